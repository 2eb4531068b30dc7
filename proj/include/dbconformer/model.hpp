#pragma once

#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dbconformer/config.hpp"
#include "dbconformer/layers.hpp"

namespace dbc {

struct ParamBlock {
  std::string name;
  std::string branch;  // "temporal", "spatial" or "classifier"
  std::size_t count = 0;
};

/// Closed-form trainable-parameter count with a per-block breakdown.
struct ParamBreakdown {
  std::vector<ParamBlock> blocks;
  std::size_t total = 0;

  std::size_t branch_total(const std::string& branch) const {
    std::size_t n = 0;
    for (const auto& b : blocks) {
      if (b.branch == branch) n += b.count;
    }
    return n;
  }
};

/// Counts every trainable scalar (batch-norm affine terms and positional
/// encodings included, running statistics excluded). The first classifier
/// layer's columns that read the spatial feature are booked to the spatial
/// branch so that removing the branch removes exactly its blocks.
inline ParamBreakdown parameter_count(const ModelConfig& c) {
  c.validate();
  const std::size_t C = c.channels, F = c.filters, K = c.kernel, D = c.embed, P = c.patches();
  const std::size_t layer = EncoderLayerParams::count(D, c.ff_width());
  const std::size_t h1 = ModelConfig::kHidden1, h2 = ModelConfig::kHidden2;
  ParamBreakdown r;
  auto add = [&](std::string name, std::string branch, std::size_t n) {
    r.blocks.push_back({std::move(name), std::move(branch), n});
    r.total += n;
  };
  add("temporal.embedding", "temporal", C * F + 2 * F + F * K + 2 * F);
  if (!c.no_positional_encoding) add("temporal.positional", "temporal", P * D);
  add("temporal.encoder", "temporal", c.temporal_layers * layer);
  if (!c.no_spatial_branch) {
    const std::size_t S = c.spatial_conv_filters;
    add("spatial.embedding", "spatial", S * c.spatial_conv_kernel + S + S * D + (c.spatial_proj_bias ? D : 0));
    if (!c.no_positional_encoding) add("spatial.positional", "spatial", C * D);
    add("spatial.encoder", "spatial", c.spatial_layers * layer);
    if (!c.mean_pool_channels) add("spatial.channel_attention", "spatial", D * D + D);
    add("spatial.classifier_input", "spatial", h1 * D);
  }
  add("classifier", "classifier", h1 * D + h1 + h1 * h2 + h2 + h2 * c.classes + c.classes);
  return r;
}

struct ForwardContext {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;  // dropout stream, needed in train mode
};

struct ChannelAttentionOutput {
  Tensor weights;  // [B, C], rows sum to 1
  Tensor pooled;   // [B, D]
};

/// Channel scoring k = w2ᵀ tanh(W1 z) per token (no biases), softmax over
/// channels, and the attention-weighted sum of tokens. z [B, C, D].
inline ChannelAttentionOutput channel_attention(const Tensor& z, const Tensor& w1, const Tensor& w2) {
  ops::detail::require_rank(z, 3, "channel_attention");
  const std::size_t B = z.dim(0), C = z.dim(1), D = z.dim(2);
  if (w1.shape() != Shape{D, D} || w2.shape() != Shape{D}) {
    throw DimensionError("channel_attention: weights " + to_string(w1.shape()) + ", " + to_string(w2.shape()) +
                         " do not match tokens " + to_string(z.shape()));
  }
  Tensor hidden = ops::tanh(ops::linear(z, w1));
  Tensor scores = ops::reshape(ops::linear(hidden, ops::reshape(w2, {1, D})), {B, C});
  Tensor alpha = ops::softmax(scores, 1);
  Tensor pooled = ops::reshape(ops::bmm(ops::reshape(alpha, {B, 1, C}), z), {B, D});
  return {alpha, pooled};
}

struct SpatialOutput {
  Tensor features;  // [B, D]
  Tensor weights;   // [B, C]
};

struct ForwardOutput {
  Tensor logits;     // [B, Nc]
  Tensor attention;  // [B, C]; undefined without the spatial branch
};

/// Dual-branch convolutional Transformer: a temporal branch (patch tokens
/// along time) and a spatial branch (one token per channel, pooled by channel
/// attention), fused by concatenation into an MLP classifier.
class DBConformer {
 public:
  DBConformer(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng = Rng(seed).derive("init");
    const auto& c = config_;
    const std::size_t C = c.channels, F = c.filters, K = c.kernel, D = c.embed, P = c.patches();

    temporal_filter_ = uniform_fan_in({F, C, 1}, C, rng);
    bn1_gamma_ = parameter({F}, 1.0);
    bn1_beta_ = parameter({F}, 0.0);
    depthwise_ = uniform_fan_in({F, 1, K}, K, rng);
    bn2_gamma_ = parameter({F}, 1.0);
    bn2_beta_ = parameter({F}, 0.0);
    bn1_ = ops::BatchNormStats(F);
    bn2_ = ops::BatchNormStats(F);
    if (!c.no_positional_encoding) temporal_pos_ = normal_param({P, D}, rng);
    for (std::size_t i = 0; i < c.temporal_layers; ++i) {
      temporal_layers_.push_back(EncoderLayerParams::make(D, c.ff_width(), rng));
    }

    if (!c.no_spatial_branch) {
      const std::size_t S = c.spatial_conv_filters, Ks = c.spatial_conv_kernel;
      spatial_conv_ = uniform_fan_in({S, 1, Ks}, Ks, rng);
      spatial_conv_bias_ = parameter({S}, 0.0);
      spatial_proj_ = LinearParams::make(S, D, c.spatial_proj_bias, rng);
      if (!c.no_positional_encoding) spatial_pos_ = normal_param({C, D}, rng);
      for (std::size_t i = 0; i < c.spatial_layers; ++i) {
        spatial_layers_.push_back(EncoderLayerParams::make(D, c.ff_width(), rng));
      }
      if (!c.mean_pool_channels) {
        attn_w1_ = uniform_fan_in({D, D}, D, rng);
        attn_w2_ = uniform_fan_in({D}, D, rng);
      }
    }

    fc1_ = LinearParams::make(c.fused_width(), ModelConfig::kHidden1, true, rng);
    fc2_ = LinearParams::make(ModelConfig::kHidden1, ModelConfig::kHidden2, true, rng);
    fc3_ = LinearParams::make(ModelConfig::kHidden2, c.classes, true, rng);
  }

  const ModelConfig& config() const { return config_; }

  /// Trainable tensors in a fixed order with stable names.
  void visit_parameters(const ParamVisitor& fn) {
    fn("temporal.filter.weight", temporal_filter_);
    fn("temporal.bn1.gamma", bn1_gamma_);
    fn("temporal.bn1.beta", bn1_beta_);
    fn("temporal.depthwise.weight", depthwise_);
    fn("temporal.bn2.gamma", bn2_gamma_);
    fn("temporal.bn2.beta", bn2_beta_);
    if (temporal_pos_.defined()) fn("temporal.pos", temporal_pos_);
    for (std::size_t i = 0; i < temporal_layers_.size(); ++i) {
      temporal_layers_[i].visit("temporal.encoder." + std::to_string(i), fn);
    }
    if (!config_.no_spatial_branch) {
      fn("spatial.conv.weight", spatial_conv_);
      fn("spatial.conv.bias", spatial_conv_bias_);
      spatial_proj_.visit("spatial.proj", fn);
      if (spatial_pos_.defined()) fn("spatial.pos", spatial_pos_);
      for (std::size_t i = 0; i < spatial_layers_.size(); ++i) {
        spatial_layers_[i].visit("spatial.encoder." + std::to_string(i), fn);
      }
      if (attn_w1_.defined()) {
        fn("spatial.attention.w1", attn_w1_);
        fn("spatial.attention.w2", attn_w2_);
      }
    }
    fc1_.visit("classifier.fc1", fn);
    fc2_.visit("classifier.fc2", fn);
    fc3_.visit("classifier.fc3", fn);
  }

  /// Non-trainable state (batch-norm running statistics).
  void visit_buffers(const ParamVisitor& fn) {
    fn("temporal.bn1.running_mean", bn1_.running_mean);
    fn("temporal.bn1.running_var", bn1_.running_var);
    fn("temporal.bn2.running_mean", bn2_.running_mean);
    fn("temporal.bn2.running_var", bn2_.running_var);
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    visit_parameters([&](const std::string& n, Tensor& t) { out.emplace_back(n, t); });
    return out;
  }

  std::vector<Tensor> parameters() {
    std::vector<Tensor> out;
    visit_parameters([&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
  }

  void zero_grad() {
    visit_parameters([](const std::string&, Tensor& t) { t.zero_grad(); });
  }

  /// x [B, C, T] -> patch tokens [B, P, F].
  Tensor temporal_patch_embed(const Tensor& x, const ForwardContext& ctx) {
    check_input(x);
    const auto& c = config_;
    Tensor h = ops::conv1d(x, temporal_filter_);
    h = ops::batchnorm1d(h, bn1_gamma_, bn1_beta_, bn1_, ctx.mode);
    h = ops::conv1d(h, depthwise_, {}, ops::Conv1dOptions::same(c.kernel, c.filters));
    h = ops::batchnorm1d(h, bn2_gamma_, bn2_beta_, bn2_, ctx.mode);
    h = ops::gelu(h);
    h = ops::dropout(h, c.p_embed, ctx.mode, ctx.rng);
    h = ops::avgpool1d(h, c.patch);
    return ops::permute(h, {0, 2, 1});
  }

  /// x [B, C, T] -> temporal feature [B, D] (mean over encoded patch tokens).
  Tensor temporal_branch(const Tensor& x, const ForwardContext& ctx) {
    Tensor z = temporal_patch_embed(x, ctx);
    if (temporal_pos_.defined()) z = ops::add_broadcast(z, temporal_pos_);
    z = encode(z, temporal_layers_, config_.temporal_heads, ctx);
    return ops::mean(z, 1);
  }

  /// x [B, C, T] -> channel tokens [B, C, D]. The shared filter bank runs over
  /// every channel, is averaged over time, then projected to D.
  Tensor spatial_patch_embed(const Tensor& x, const ForwardContext& ctx) {
    (void)ctx;
    check_input(x);
    require_spatial();
    const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2);
    Tensor folded = ops::reshape(x, {B * C, 1, T});
    Tensor pooled = ops::conv1d_global_mean(folded, spatial_conv_, spatial_conv_bias_);
    Tensor tokens = ops::reshape(pooled, {B, C, config_.spatial_conv_filters});
    return spatial_proj_(tokens);
  }

  SpatialOutput spatial_branch(const Tensor& x, const ForwardContext& ctx) {
    Tensor z = spatial_patch_embed(x, ctx);
    if (spatial_pos_.defined()) z = ops::add_broadcast(z, spatial_pos_);
    z = encode(z, spatial_layers_, config_.spatial_heads, ctx);
    if (config_.mean_pool_channels) {
      const std::size_t B = z.dim(0), C = z.dim(1);
      return {ops::mean(z, 1), Tensor({B, C}, 1.0 / static_cast<double>(C))};
    }
    auto att = channel_attention(z, attn_w1_, attn_w2_);
    return {att.pooled, att.weights};
  }

  ForwardOutput forward(const Tensor& x, const ForwardContext& ctx) {
    if (ctx.mode == Mode::train && !ctx.rng &&
        (config_.p_embed > 0.0 || config_.p_enc > 0.0 || config_.p_cls > 0.0)) {
      throw ContractError("train-mode forward with dropout needs a random stream");
    }
    Tensor fused = temporal_branch(x, ctx);
    Tensor attention;
    if (!config_.no_spatial_branch) {
      auto s = spatial_branch(x, ctx);
      fused = ops::concat_last(fused, s.features);
      attention = s.weights;
    }
    Tensor h = ops::dropout(ops::elu(fc1_(fused)), config_.p_cls, ctx.mode, ctx.rng);
    h = ops::dropout(ops::elu(fc2_(h)), config_.p_cls, ctx.mode, ctx.rng);
    return {fc3_(h), attention};
  }

  static Tensor loss(const Tensor& logits, std::span<const int> labels) { return ops::cross_entropy(logits, labels); }

  // Direct handles used by tests and the attention-symmetry checks.
  Tensor& temporal_filter() { return temporal_filter_; }
  Tensor& temporal_pos() { return temporal_pos_; }
  Tensor& spatial_pos() { return spatial_pos_; }
  Tensor& attention_w1() { return attn_w1_; }
  Tensor& attention_w2() { return attn_w2_; }
  std::vector<EncoderLayerParams>& temporal_layers() { return temporal_layers_; }
  std::vector<EncoderLayerParams>& spatial_layers() { return spatial_layers_; }

 private:
  static Tensor normal_param(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.normal(0.0, 0.02);
    return t.set_requires_grad(true);
  }

  void check_input(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(1) != config_.channels || x.dim(2) != config_.samples) {
      throw DimensionError("model input " + to_string(x.shape()) + " does not match config (B, " +
                           std::to_string(config_.channels) + ", " + std::to_string(config_.samples) + ")");
    }
  }

  void require_spatial() const {
    if (config_.no_spatial_branch) throw ConfigError("spatial branch disabled in this configuration");
  }

  Tensor encode(Tensor z, const std::vector<EncoderLayerParams>& layers, std::size_t heads,
                const ForwardContext& ctx) const {
    EncoderContext ec{heads, config_.p_enc, ctx.mode, ctx.rng};
    for (const auto& layer : layers) z = transformer_encoder_layer(z, layer, ec);
    return z;
  }

  ModelConfig config_;
  Tensor temporal_filter_, bn1_gamma_, bn1_beta_, depthwise_, bn2_gamma_, bn2_beta_, temporal_pos_;
  ops::BatchNormStats bn1_, bn2_;
  std::vector<EncoderLayerParams> temporal_layers_;
  Tensor spatial_conv_, spatial_conv_bias_, spatial_pos_;
  LinearParams spatial_proj_;
  std::vector<EncoderLayerParams> spatial_layers_;
  Tensor attn_w1_, attn_w2_;
  LinearParams fc1_, fc2_, fc3_;
};

}  // namespace dbc
