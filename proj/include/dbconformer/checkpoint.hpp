#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "dbconformer/binary.hpp"
#include "dbconformer/config.hpp"
#include "dbconformer/model.hpp"
#include "dbconformer/trialset.hpp"

namespace dbc {

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"channels", c.channels},
          {"samples", c.samples},
          {"classes", c.classes},
          {"filters", c.filters},
          {"kernel", c.kernel},
          {"patch", c.patch},
          {"embed", c.embed},
          {"temporal_layers", c.temporal_layers},
          {"temporal_heads", c.temporal_heads},
          {"spatial_layers", c.spatial_layers},
          {"spatial_heads", c.spatial_heads},
          {"ff_mult", c.ff_mult},
          {"p_embed", c.p_embed},
          {"p_enc", c.p_enc},
          {"p_cls", c.p_cls},
          {"spatial_conv_filters", c.spatial_conv_filters},
          {"spatial_conv_kernel", c.spatial_conv_kernel},
          {"spatial_proj_bias", c.spatial_proj_bias},
          {"no_spatial_branch", c.no_spatial_branch},
          {"no_positional_encoding", c.no_positional_encoding},
          {"mean_pool_channels", c.mean_pool_channels}};
}

/// Inverse of to_json; missing keys keep their defaults.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::remove_reference_t<decltype(field)>>();
  };
  get("channels", c.channels);
  get("samples", c.samples);
  get("classes", c.classes);
  get("filters", c.filters);
  get("kernel", c.kernel);
  get("patch", c.patch);
  get("embed", c.embed);
  get("temporal_layers", c.temporal_layers);
  get("temporal_heads", c.temporal_heads);
  get("spatial_layers", c.spatial_layers);
  get("spatial_heads", c.spatial_heads);
  get("ff_mult", c.ff_mult);
  get("p_embed", c.p_embed);
  get("p_enc", c.p_enc);
  get("p_cls", c.p_cls);
  get("spatial_conv_filters", c.spatial_conv_filters);
  get("spatial_conv_kernel", c.spatial_conv_kernel);
  get("spatial_proj_bias", c.spatial_proj_bias);
  get("no_spatial_branch", c.no_spatial_branch);
  get("no_positional_encoding", c.no_positional_encoding);
  get("mean_pool_channels", c.mean_pool_channels);
  return c;
}

// ---------------------------------------------------------------------------
// DBCF checkpoint (little-endian):
//   "DBCF" | u32 version=1 | u32 len + model config JSON
//   | u32 n_params  | n_params  × record
//   | u32 n_buffers | n_buffers × record
// record: u32 len + name | u32 rank | u32 dims[rank] | f64 values[prod(dims)]

namespace dbcf {

inline constexpr std::uint32_t kVersion = 1;

struct Record {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Contents {
  ModelConfig config;
  std::vector<Record> parameters;
  std::vector<Record> buffers;
};

namespace detail {

inline void put_records(binary::Writer& w, const std::vector<std::pair<std::string, Tensor>>& items) {
  w.put(static_cast<std::uint32_t>(items.size()));
  for (const auto& [name, t] : items) {
    w.str(name);
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.put(v);
  }
}

inline std::vector<Record> get_records(binary::Reader& r) {
  const auto n = r.get<std::uint32_t>("record count");
  std::vector<Record> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    Record rec;
    rec.name = r.str("record name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw FormatError("record '" + rec.name + "' has rank " + std::to_string(rank), r.pos() - 4);
    std::uint64_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint32_t>("dimension");
      rec.shape.push_back(d);
      if (d != 0 && count > (r.remaining() / 8 + 1) / d) {
        throw FormatError("record '" + rec.name + "' is larger than the file", r.pos());
      }
      count *= d;
    }
    r.need(8 * count, "record values");
    rec.values.resize(count);
    for (auto& v : rec.values) v = r.get<double>("record values");
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(DBConformer& model) {
  binary::Writer w;
  w.raw("DBCF", 4);
  w.put(kVersion);
  w.str(to_json(model.config()).dump());
  std::vector<std::pair<std::string, Tensor>> buffers;
  model.visit_buffers([&](const std::string& n, Tensor& t) { buffers.emplace_back(n, t); });
  detail::put_records(w, model.named_parameters());
  detail::put_records(w, buffers);
  return w.take();
}

/// Structural parse without building a model.
inline Contents parse(std::span<const std::uint8_t> bytes) {
  binary::Reader r(bytes, "DBCF");
  r.need(4, "magic");
  if (std::memcmp(r.here(), "DBCF", 4) != 0) throw FormatError("bad DBCF magic", 0);
  (void)r.get<std::uint32_t>("magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) throw FormatError("unsupported DBCF version " + std::to_string(version), 4);
  Contents c;
  const std::size_t config_at = r.pos();
  const std::string text = r.str("config");
  try {
    c.config = model_config_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("unreadable model config: ") + e.what(), config_at);
  }
  c.parameters = detail::get_records(r);
  c.buffers = detail::get_records(r);
  if (r.remaining() != 0) {
    throw FormatError("DBCF length mismatch: " + std::to_string(r.remaining()) + " trailing bytes", r.pos());
  }
  return c;
}

/// Sum of parameter record lengths.
inline std::size_t parameter_total(const Contents& c) {
  std::size_t n = 0;
  for (const auto& r : c.parameters) n += r.values.size();
  return n;
}

/// Rebuilds a model and fills every parameter and buffer from the file.
inline DBConformer decode(std::span<const std::uint8_t> bytes) {
  Contents c = parse(bytes);
  try {
    c.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid model config: ") + e.what(), 8);
  }
  // Checked before allocating so a corrupt config cannot request a huge model.
  if (parameter_count(c.config).total != parameter_total(c)) {
    throw FormatError("DBCF: parameter records do not match the model config", 0);
  }
  DBConformer model(c.config, 0);
  auto fill = [](const std::vector<Record>& recs, const char* kind) {
    return [&recs, kind, i = std::size_t{0}](const std::string& name, Tensor& t) mutable {
      if (i >= recs.size()) throw FormatError(std::string("DBCF: missing ") + kind + " '" + name + "'", 0);
      const Record& rec = recs[i++];
      if (rec.name != name || rec.shape != t.shape()) {
        throw FormatError("DBCF: " + std::string(kind) + " '" + rec.name + "' " + to_string(rec.shape) +
                              " does not match model's '" + name + "' " + to_string(t.shape()),
                          0);
      }
      std::copy(rec.values.begin(), rec.values.end(), t.data().begin());
    };
  };
  std::size_t n_params = 0, n_buffers = 0;
  model.visit_parameters([&](const std::string&, Tensor&) { ++n_params; });
  model.visit_buffers([&](const std::string&, Tensor&) { ++n_buffers; });
  if (n_params != c.parameters.size() || n_buffers != c.buffers.size()) {
    throw FormatError("DBCF: record count does not match the model config", 0);
  }
  model.visit_parameters(fill(c.parameters, "parameter"));
  model.visit_buffers(fill(c.buffers, "buffer"));
  return model;
}

}  // namespace dbcf

inline void save_checkpoint(const std::filesystem::path& path, DBConformer& model) {
  write_bytes(path, dbcf::encode(model));
}

inline DBConformer load_checkpoint(const std::filesystem::path& path) { return dbcf::decode(read_bytes(path)); }

}  // namespace dbc
