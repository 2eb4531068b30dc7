#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "dbconformer/align.hpp"
#include "dbconformer/binary.hpp"
#include "dbconformer/error.hpp"
#include "dbconformer/tensor.hpp"

namespace dbc {

/// Trials of one subject: data is B×C×T, trial-major then channel-major.
struct TrialSet {
  std::uint32_t subject_id = 0;
  float sample_rate = 250.0f;
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<std::int32_t> labels;
  std::vector<std::uint32_t> chronological_index;
  std::vector<double> data;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t trial_stride() const { return channels * samples; }

  TrialMap trial(std::size_t i) const {
    return TrialMap(data.data() + i * trial_stride(), static_cast<Eigen::Index>(channels),
                    static_cast<Eigen::Index>(samples));
  }
  Eigen::Map<Matrix> trial(std::size_t i) {
    return Eigen::Map<Matrix>(data.data() + i * trial_stride(), static_cast<Eigen::Index>(channels),
                              static_cast<Eigen::Index>(samples));
  }

  /// Trial indices sorted by recording order.
  std::vector<std::size_t> chronological_order() const {
    std::vector<std::size_t> order(size());
    for (std::size_t i = 0; i < size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return chronological_index[a] < chronological_index[b]; });
    return order;
  }

  /// Highest label + 1 (0 when empty).
  std::size_t class_count() const {
    std::int32_t hi = -1;
    for (auto y : labels) hi = std::max(hi, y);
    return static_cast<std::size_t>(hi + 1);
  }

  /// Checks every structural invariant; throws ContractError naming the first violation.
  void validate() const {
    if (chronological_index.size() != labels.size()) {
      throw ContractError("trial set: " + std::to_string(labels.size()) + " labels but " +
                          std::to_string(chronological_index.size()) + " chronological indices");
    }
    if (data.size() != labels.size() * trial_stride()) {
      throw ContractError("trial set: data holds " + std::to_string(data.size()) + " values, expected " +
                          std::to_string(labels.size() * trial_stride()));
    }
    if (!labels.empty() && (channels == 0 || samples == 0)) throw ContractError("trial set: empty trial shape");
    for (auto y : labels) {
      if (y < 0) throw ContractError("trial set: negative label " + std::to_string(y));
    }
    std::vector<bool> seen(labels.size(), false);
    for (auto c : chronological_index) {
      if (c >= labels.size() || seen[c]) throw ContractError("trial set: chronological_index is not a permutation");
      seen[c] = true;
    }
    for (double v : data) {
      if (!std::isfinite(v)) throw ContractError("trial set: non-finite sample");
    }
  }

  /// Stacks the selected trials into a [n, C, T] tensor.
  Tensor batch(std::span<const std::size_t> indices) const {
    Tensor out({indices.size(), channels, samples});
    const std::size_t stride = trial_stride();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(indices[i] * stride), stride, out.ptr() + i * stride);
    }
    return out;
  }

  std::vector<int> batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels[indices[i]];
    return out;
  }
};

// ---------------------------------------------------------------------------
// EEGB binary format (all fields little-endian):
//   "EEGB" | u32 version=1 | u32 subject_id | u32 B | u32 C | u32 T | f32 sample_rate
//   | i32 labels[B] | u32 chronological_index[B] | f64 data[B*C*T]

namespace eegb {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 4 + 4 * 5 + 4;

inline std::vector<std::uint8_t> encode(const TrialSet& set) {
  set.validate();
  auto u32 = [](std::size_t v, const char* what) {
    if (v > 0xffffffffu) throw ContractError(std::string("EEGB: ") + what + " exceeds 32 bits");
    return static_cast<std::uint32_t>(v);
  };
  binary::Writer w;
  w.raw("EEGB", 4);
  w.put(kVersion);
  w.put(set.subject_id);
  w.put(u32(set.size(), "trial count"));
  w.put(u32(set.channels, "channel count"));
  w.put(u32(set.samples, "sample count"));
  w.put(set.sample_rate);
  for (auto y : set.labels) w.put(y);
  for (auto c : set.chronological_index) w.put(c);
  for (double v : set.data) w.put(v);
  return w.take();
}

inline TrialSet decode(std::span<const std::uint8_t> bytes) {
  binary::Reader r(bytes, "EEGB");
  r.need(4, "magic");
  if (std::memcmp(r.here(), "EEGB", 4) != 0) throw FormatError("bad EEGB magic", 0);
  (void)r.get<std::uint32_t>("magic");
  const std::size_t version_at = r.pos();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError("unsupported EEGB version " + std::to_string(version), version_at);
  }
  TrialSet set;
  set.subject_id = r.get<std::uint32_t>("subject_id");
  const std::size_t b_at = r.pos();
  const std::uint64_t B = r.get<std::uint32_t>("trial count");
  const std::uint64_t C = r.get<std::uint32_t>("channel count");
  const std::uint64_t T = r.get<std::uint32_t>("sample count");
  const std::size_t rate_at = r.pos();
  set.sample_rate = r.get<float>("sample_rate");
  if (!(std::isfinite(set.sample_rate) && set.sample_rate > 0.0f)) {
    throw FormatError("sample rate must be positive and finite", rate_at);
  }
  if (B > 0 && (C == 0 || T == 0)) throw FormatError("non-empty file with zero channels or samples", b_at);

  // Total length must match the header exactly; computed without overflow.
  const unsigned __int128 values = static_cast<unsigned __int128>(B) * C * T;
  const unsigned __int128 expected = static_cast<unsigned __int128>(kHeaderBytes) + 8 * B + 8 * values;
  if (expected != bytes.size()) {
    const bool huge = expected > static_cast<unsigned __int128>(UINT64_MAX);
    throw FormatError("EEGB length mismatch: header implies " +
                          (huge ? std::string("more than 2^64") : std::to_string(static_cast<std::uint64_t>(expected))) +
                          " bytes, file has " + std::to_string(bytes.size()),
                      expected > bytes.size() ? bytes.size() : static_cast<std::size_t>(expected));
  }
  set.channels = static_cast<std::size_t>(C);
  set.samples = static_cast<std::size_t>(T);
  set.labels.resize(B);
  set.chronological_index.resize(B);
  for (auto& y : set.labels) {
    const std::size_t at = r.pos();
    y = r.get<std::int32_t>("labels");
    if (y < 0) throw FormatError("negative label " + std::to_string(y), at);
  }
  std::vector<bool> seen(B, false);
  for (auto& c : set.chronological_index) {
    const std::size_t at = r.pos();
    c = r.get<std::uint32_t>("chronological_index");
    if (c >= B || seen[c]) throw FormatError("chronological_index is not a permutation of 0..B-1", at);
    seen[c] = true;
  }
  set.data.resize(static_cast<std::size_t>(values));
  for (auto& v : set.data) {
    const std::size_t at = r.pos();
    v = r.get<double>("data");
    if (!std::isfinite(v)) throw FormatError("non-finite sample", at);
  }
  return set;
}

}  // namespace eegb

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_trialset(const std::filesystem::path& path, const TrialSet& set) {
  write_bytes(path, eegb::encode(set));
}

inline TrialSet read_trialset(const std::filesystem::path& path) { return eegb::decode(read_bytes(path)); }

/// Every `*.eegb` file in `dir`, in file-name order.
inline std::vector<TrialSet> read_trialset_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".eegb") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw EmptyInputError("no .eegb files in " + dir.string());
  std::vector<TrialSet> sets;
  for (const auto& f : files) sets.push_back(read_trialset(f));
  return sets;
}

}  // namespace dbc
