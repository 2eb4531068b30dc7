#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "dbconformer/ops.hpp"

namespace dbc {

/// Visitor over named parameter tensors.
using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;

/// Weights uniform in ±sqrt(1/fan_in).
inline Tensor uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t.set_requires_grad(true);
}

inline Tensor parameter(Shape shape, double fill) { return Tensor(std::move(shape), fill).set_requires_grad(true); }

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out] or undefined

  static LinearParams make(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
    LinearParams p;
    p.weight = uniform_fan_in({out, in}, in, rng);
    if (with_bias) p.bias = parameter({out}, 0.0);
    return p;
  }

  Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".weight", weight);
    if (bias.defined()) fn(prefix + ".bias", bias);
  }
};

struct AttentionParams {
  LinearParams q, k, v, out;

  static AttentionParams make(std::size_t dim, Rng& rng) {
    return {LinearParams::make(dim, dim, true, rng), LinearParams::make(dim, dim, true, rng),
            LinearParams::make(dim, dim, true, rng), LinearParams::make(dim, dim, true, rng)};
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    q.visit(prefix + ".q", fn);
    k.visit(prefix + ".k", fn);
    v.visit(prefix + ".v", fn);
    out.visit(prefix + ".out", fn);
  }
};

/// Post-norm encoder layer: y = LN(x + Drop(MHA(x))); out = LN(y + Drop(FF(y))),
/// FF = Linear(D -> ff) . GELU . Linear(ff -> D).
struct EncoderLayerParams {
  AttentionParams attn;
  Tensor norm1_gamma, norm1_beta;
  LinearParams ff1, ff2;
  Tensor norm2_gamma, norm2_beta;

  static EncoderLayerParams make(std::size_t dim, std::size_t ff_width, Rng& rng) {
    EncoderLayerParams p;
    p.attn = AttentionParams::make(dim, rng);
    p.norm1_gamma = parameter({dim}, 1.0);
    p.norm1_beta = parameter({dim}, 0.0);
    p.ff1 = LinearParams::make(dim, ff_width, true, rng);
    p.ff2 = LinearParams::make(ff_width, dim, true, rng);
    p.norm2_gamma = parameter({dim}, 1.0);
    p.norm2_beta = parameter({dim}, 0.0);
    return p;
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    attn.visit(prefix + ".attn", fn);
    fn(prefix + ".norm1.gamma", norm1_gamma);
    fn(prefix + ".norm1.beta", norm1_beta);
    ff1.visit(prefix + ".ff1", fn);
    ff2.visit(prefix + ".ff2", fn);
    fn(prefix + ".norm2.gamma", norm2_gamma);
    fn(prefix + ".norm2.beta", norm2_beta);
  }

  /// 4 projections (D·D + D each), two LayerNorms (2D each), FF (2·D·ff + ff + D).
  static std::size_t count(std::size_t dim, std::size_t ff_width) {
    return 4 * (dim * dim + dim) + 4 * dim + 2 * dim * ff_width + ff_width + dim;
  }
};

/// Full bidirectional multi-head self-attention. x [B, N, D]; each head uses
/// scale 1/sqrt(D/H); heads are concatenated then output-projected.
inline Tensor multihead_attention(const Tensor& x, const AttentionParams& p, std::size_t heads) {
  ops::detail::require_rank(x, 3, "multihead_attention");
  const std::size_t B = x.dim(0), N = x.dim(1), D = x.dim(2);
  if (heads == 0 || D % heads != 0) {
    throw DimensionError("multihead_attention: embedding dim " + std::to_string(D) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t dh = D / heads;
  auto split = [&](const Tensor& t) {
    return ops::reshape(ops::permute(ops::reshape(t, {B, N, heads, dh}), {0, 2, 1, 3}), {B * heads, N, dh});
  };
  Tensor q = split(p.q(x));
  Tensor k = split(p.k(x));
  Tensor v = split(p.v(x));
  Tensor scores = ops::scale(ops::bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor weights = ops::softmax(scores, 2);
  Tensor ctx = ops::bmm(weights, v);
  Tensor merged = ops::reshape(ops::permute(ops::reshape(ctx, {B, heads, N, dh}), {0, 2, 1, 3}), {B, N, D});
  return p.out(merged);
}

struct EncoderContext {
  std::size_t heads = 1;
  double dropout = 0.0;
  ops::Mode mode = ops::Mode::eval;
  Rng* rng = nullptr;
};

inline Tensor transformer_encoder_layer(const Tensor& x, const EncoderLayerParams& p, const EncoderContext& ctx) {
  Tensor attn = multihead_attention(x, p.attn, ctx.heads);
  Tensor y = ops::layernorm(ops::add(x, ops::dropout(attn, ctx.dropout, ctx.mode, ctx.rng)), p.norm1_gamma,
                            p.norm1_beta);
  Tensor ff = p.ff2(ops::gelu(p.ff1(y)));
  return ops::layernorm(ops::add(y, ops::dropout(ff, ctx.dropout, ctx.mode, ctx.rng)), p.norm2_gamma, p.norm2_beta);
}

}  // namespace dbc
