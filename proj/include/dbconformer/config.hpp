#pragma once

#include <cstddef>
#include <string>

#include "dbconformer/error.hpp"

namespace dbc {

/// Architectural hyperparameters of the dual-branch model.
struct ModelConfig {
  std::size_t channels = 22;   // C
  std::size_t samples = 1000;  // T
  std::size_t classes = 2;     // Nc
  std::size_t filters = 40;    // F, must equal embed
  std::size_t kernel = 25;     // K, temporal depthwise kernel
  std::size_t patch = 125;     // W, pooling window
  std::size_t embed = 40;      // D
  std::size_t temporal_layers = 2;
  std::size_t temporal_heads = 2;
  std::size_t spatial_layers = 2;
  std::size_t spatial_heads = 2;
  std::size_t ff_mult = 4;  // encoder feed-forward width = ff_mult * D
  double p_embed = 0.5;
  double p_enc = 0.1;
  double p_cls = 0.5;
  std::size_t spatial_conv_filters = 16;
  std::size_t spatial_conv_kernel = 25;
  bool spatial_proj_bias = false;
  // Ablations.
  bool no_spatial_branch = false;
  bool no_positional_encoding = false;
  bool mean_pool_channels = false;

  static constexpr std::size_t kHidden1 = 64;
  static constexpr std::size_t kHidden2 = 32;

  std::size_t patches() const { return patch ? samples / patch : 0; }
  std::size_t ff_width() const { return ff_mult * embed; }
  std::size_t fused_width() const { return no_spatial_branch ? embed : 2 * embed; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (channels == 0 || samples == 0) fail("channels and samples must be positive");
    if (classes < 2) fail("need at least 2 classes");
    if (filters != embed) fail("filter count F (" + std::to_string(filters) + ") must equal embedding dim D (" +
                                std::to_string(embed) + ")");
    if (embed == 0) fail("embedding dim must be positive");
    if (temporal_heads == 0 || embed % temporal_heads != 0) fail("D not divisible by temporal heads");
    if (spatial_heads == 0 || embed % spatial_heads != 0) fail("D not divisible by spatial heads");
    if (kernel == 0) fail("temporal kernel must be positive");
    if (patch == 0 || samples / patch < 1) fail("patch window must satisfy 1 <= W <= T");
    if (spatial_conv_filters == 0 || spatial_conv_kernel == 0) fail("spatial conv shape must be positive");
    if (samples < spatial_conv_kernel) {
      fail("T (" + std::to_string(samples) + ") shorter than spatial conv kernel (" +
           std::to_string(spatial_conv_kernel) + ")");
    }
    if (ff_mult == 0) fail("ff_mult must be positive");
    for (double p : {p_embed, p_enc, p_cls}) {
      if (!(p >= 0.0 && p < 1.0)) fail("dropout probabilities must be in [0, 1)");
    }
  }

  /// BNCI2014001 configuration (same for CO/CV and LOSO).
  static ModelConfig bnci2014001() { return ModelConfig{}; }

  /// Tiny configuration for full-model gradient checks (dropout disabled).
  static ModelConfig small() {
    ModelConfig c;
    c.channels = 3;
    c.samples = 64;
    c.classes = 2;
    c.filters = c.embed = 8;
    c.kernel = 5;
    c.patch = 16;
    c.temporal_layers = c.spatial_layers = 1;
    c.temporal_heads = c.spatial_heads = 2;
    c.p_embed = c.p_enc = c.p_cls = 0.0;
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace dbc
