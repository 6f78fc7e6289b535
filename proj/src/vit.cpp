#include "sptnet/vit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace sptnet {

void TinyViTConfig::validate() const {
  std::ostringstream os;
  if (patch_h <= 0 || patch_w <= 0 || image_h % patch_h != 0 || image_w % patch_w != 0)
    os << "image " << image_h << "x" << image_w << " not divisible by patch " << patch_h << "x" << patch_w << "; ";
  if (depth < 1) os << "depth must be >= 1; ";
  if (dim < 1 || heads < 1 || dim % heads != 0) os << "dim must be a positive multiple of heads; ";
  if (mlp_ratio <= 0.0) os << "mlp_ratio must be positive; ";
  if (proj_dim < 1) os << "proj_dim must be >= 1; ";
  if (num_prototypes < 2) os << "num_prototypes must be >= 2; ";
  if (trainable_blocks < 0 || trainable_blocks > depth) os << "trainable_blocks must lie in [0, depth]; ";
  if (!os.str().empty()) throw ConfigError("model config: " + os.str());
}

bool is_trainable(const TinyViTConfig& config, const std::string& name) {
  if (name.starts_with("head.") || name == "prototypes") return true;
  if (name.starts_with("norm.")) return config.train_final_norm;
  if (name.starts_with("blocks.")) {
    const int block = std::stoi(name.substr(7));
    return block >= config.depth - config.trainable_blocks;
  }
  return false;
}

namespace {

template <typename Scalar>
using Column = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
Linear<Scalar> make_linear(int in, int out, Rng& rng) {
  // Xavier-uniform weights, zero bias.
  const double bound = std::sqrt(6.0 / (in + out));
  Linear<Scalar> l;
  l.weight.resize(out, in);
  for (Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  l.bias = Matrix<Scalar>::Zero(1, out);
  return l;
}

template <typename Scalar>
LayerNorm<Scalar> make_norm(int d) {
  return {Matrix<Scalar>::Ones(1, d), Matrix<Scalar>::Zero(1, d)};
}

template <typename Scalar>
Matrix<Scalar> normal_matrix(Index rows, Index cols, double stddev, Rng& rng) {
  Matrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(stddev * rng.normal());
  return m;
}

template <typename Scalar>
Matrix<Scalar> linear_forward(const Matrix<Scalar>& x, const Linear<Scalar>& l) {
  Matrix<Scalar> y = x * l.weight.transpose();
  y.rowwise() += l.bias.row(0);
  return y;
}

template <typename Scalar>
Matrix<Scalar> linear_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& dy, const Linear<Scalar>& l,
                               Linear<Scalar>& g, bool need_input) {
  g.weight.noalias() += dy.transpose() * x;
  g.bias += dy.colwise().sum();
  if (!need_input) return {};
  return dy * l.weight;
}

constexpr double kNormEps = 1e-6;
constexpr double kUnitEps = 1e-12;

template <typename Scalar>
Matrix<Scalar> norm_forward(const Matrix<Scalar>& x, const LayerNorm<Scalar>& p, Matrix<Scalar>& xhat,
                            Column<Scalar>& rstd) {
  const Index d = x.cols();
  xhat.resize(x.rows(), d);
  rstd.resize(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).sum() / static_cast<Scalar>(d);
    const Scalar var = (x.row(r).array() - mean).square().sum() / static_cast<Scalar>(d);
    rstd(r) = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kNormEps));
    xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
  }
  Matrix<Scalar> y = xhat.array().rowwise() * p.gain.row(0).array();
  y.rowwise() += p.shift.row(0);
  return y;
}

template <typename Scalar>
Matrix<Scalar> norm_backward(const Matrix<Scalar>& dy, const Matrix<Scalar>& xhat, const Column<Scalar>& rstd,
                             const LayerNorm<Scalar>& p, LayerNorm<Scalar>& g) {
  g.gain += (dy.array() * xhat.array()).colwise().sum().matrix();
  g.shift += dy.colwise().sum();
  const Matrix<Scalar> dxhat = dy.array().rowwise() * p.gain.row(0).array();
  const Scalar inv_d = Scalar(1) / static_cast<Scalar>(dy.cols());
  Matrix<Scalar> dx(dy.rows(), dy.cols());
  for (Index r = 0; r < dy.rows(); ++r) {
    const Scalar mean_d = dxhat.row(r).sum() * inv_d;
    const Scalar mean_dx = dxhat.row(r).dot(xhat.row(r)) * inv_d;
    dx.row(r) = rstd(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx);
  }
  return dx;
}

template <typename Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x * static_cast<Scalar>(std::numbers::sqrt2 / 2)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * static_cast<Scalar>(std::numbers::sqrt2 / 2)));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * static_cast<Scalar>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename Scalar>
Matrix<Scalar> gelu_forward(const Matrix<Scalar>& x) {
  return x.unaryExpr([](Scalar v) { return gelu(v); });
}

template <typename Scalar>
Matrix<Scalar> gelu_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& dy) {
  return dy.cwiseProduct(x.unaryExpr([](Scalar v) { return gelu_grad(v); }));
}

template <typename Scalar>
void softmax_rows(Matrix<Scalar>& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    const Scalar mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

template <typename Scalar>
Matrix<Scalar> block_forward(const Matrix<Scalar>& x, const EncoderBlock<Scalar>& p, const TinyViTConfig& cfg,
                             Index batch, Index seq_len, BlockTrace<Scalar>& t) {
  const Index d = cfg.dim, dh = cfg.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  t.input = x;
  t.y1 = norm_forward(x, p.norm1, t.xhat1, t.rstd1);
  t.qkv = linear_forward(t.y1, p.qkv);
  t.attn_out.resize(x.rows(), d);
  t.probs.resize(static_cast<std::size_t>(batch * cfg.heads));
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < cfg.heads; ++h) {
      const auto q = t.qkv.block(b * seq_len, h * dh, seq_len, dh);
      const auto k = t.qkv.block(b * seq_len, d + h * dh, seq_len, dh);
      const auto v = t.qkv.block(b * seq_len, 2 * d + h * dh, seq_len, dh);
      Matrix<Scalar>& a = t.probs[static_cast<std::size_t>(b * cfg.heads + h)];
      a.noalias() = (q * k.transpose()) * scale;
      softmax_rows(a);
      t.attn_out.block(b * seq_len, h * dh, seq_len, dh).noalias() = a * v;
    }
  }
  t.mid = x + linear_forward(t.attn_out, p.proj);
  t.y2 = norm_forward(t.mid, p.norm2, t.xhat2, t.rstd2);
  t.h1 = linear_forward(t.y2, p.fc1);
  t.a1 = gelu_forward(t.h1);
  return t.mid + linear_forward(t.a1, p.fc2);
}

template <typename Scalar>
Matrix<Scalar> block_backward(const Matrix<Scalar>& dout, const EncoderBlock<Scalar>& p, const TinyViTConfig& cfg,
                              Index batch, Index seq_len, const BlockTrace<Scalar>& t, EncoderBlock<Scalar>& g) {
  const Index d = cfg.dim, dh = cfg.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  Matrix<Scalar> da1 = linear_backward(t.a1, dout, p.fc2, g.fc2, true);
  Matrix<Scalar> dh1 = gelu_backward(t.h1, da1);
  Matrix<Scalar> dy2 = linear_backward(t.y2, dh1, p.fc1, g.fc1, true);
  Matrix<Scalar> dmid = dout + norm_backward(dy2, t.xhat2, t.rstd2, p.norm2, g.norm2);
  Matrix<Scalar> dattn = linear_backward(t.attn_out, dmid, p.proj, g.proj, true);
  Matrix<Scalar> dqkv(t.qkv.rows(), t.qkv.cols());
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < cfg.heads; ++h) {
      const auto q = t.qkv.block(b * seq_len, h * dh, seq_len, dh);
      const auto k = t.qkv.block(b * seq_len, d + h * dh, seq_len, dh);
      const auto v = t.qkv.block(b * seq_len, 2 * d + h * dh, seq_len, dh);
      const Matrix<Scalar>& a = t.probs[static_cast<std::size_t>(b * cfg.heads + h)];
      const auto dout_h = dattn.block(b * seq_len, h * dh, seq_len, dh);
      dqkv.block(b * seq_len, 2 * d + h * dh, seq_len, dh).noalias() = a.transpose() * dout_h;
      const Matrix<Scalar> da = dout_h * v.transpose();
      const Column<Scalar> inner = (da.array() * a.array()).rowwise().sum();
      const Matrix<Scalar> ds = (a.array() * (da.colwise() - inner).array()).matrix() * scale;
      dqkv.block(b * seq_len, h * dh, seq_len, dh).noalias() = ds * k;
      dqkv.block(b * seq_len, d + h * dh, seq_len, dh).noalias() = ds.transpose() * q;
    }
  }
  Matrix<Scalar> dy1 = linear_backward(t.y1, dqkv, p.qkv, g.qkv, true);
  return dmid + norm_backward(dy1, t.xhat1, t.rstd1, p.norm1, g.norm1);
}

template <typename Scalar>
Matrix<Scalar> unit_rows(const Matrix<Scalar>& m, Column<Scalar>& norms) {
  norms = m.rowwise().norm().cwiseMax(static_cast<Scalar>(kUnitEps));
  return norms.asDiagonal().inverse() * m;
}

// Gradient through u = m / |m| for each row.
template <typename Scalar>
Matrix<Scalar> unit_rows_backward(const Matrix<Scalar>& unit, const Column<Scalar>& norms, const Matrix<Scalar>& du) {
  const Column<Scalar> dots = (du.array() * unit.array()).rowwise().sum();
  Matrix<Scalar> dm = du - dots.asDiagonal() * unit;
  return norms.asDiagonal().inverse() * dm;
}

}  // namespace

template <typename Scalar>
ModelParams<Scalar> init_model(const TinyViTConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed, 0x5eed'0f'714fULL);
  ModelParams<Scalar> p;
  p.config = config;
  const int d = config.dim;
  const int patch_size = kChannels * config.patch_h * config.patch_w;
  p.patch_embed = make_linear<Scalar>(patch_size, d, rng);
  p.cls_token = normal_matrix<Scalar>(1, d, 0.02, rng);
  p.pos_embed = normal_matrix<Scalar>(1 + config.patches(), d, 0.02, rng);
  for (int i = 0; i < config.depth; ++i) {
    EncoderBlock<Scalar> b;
    b.norm1 = make_norm<Scalar>(d);
    b.qkv = make_linear<Scalar>(d, 3 * d, rng);
    b.proj = make_linear<Scalar>(d, d, rng);
    b.norm2 = make_norm<Scalar>(d);
    b.fc1 = make_linear<Scalar>(d, config.mlp_hidden(), rng);
    b.fc2 = make_linear<Scalar>(config.mlp_hidden(), d, rng);
    p.blocks.push_back(std::move(b));
  }
  p.norm = make_norm<Scalar>(d);
  p.head1 = make_linear<Scalar>(d, config.proj_dim, rng);
  p.head2 = make_linear<Scalar>(config.proj_dim, config.proj_dim, rng);
  p.head3 = make_linear<Scalar>(config.proj_dim, config.proj_dim, rng);
  p.prototypes = normal_matrix<Scalar>(config.num_prototypes, config.proj_dim, 1.0, rng);
  return p;
}

template <typename Scalar>
Index VPTPrompts<Scalar>::parameter_count() const {
  Index total = 0;
  for (const auto& t : tokens) total += t.size();
  return total;
}

template <typename Scalar>
VPTPrompts<Scalar> make_vpt(const TinyViTConfig& config, int length, bool deep) {
  VPTPrompts<Scalar> vpt;
  vpt.deep = deep;
  if (length <= 0) return vpt;
  const int layers = deep ? config.depth : 1;
  for (int i = 0; i < layers; ++i) vpt.tokens.push_back(Matrix<Scalar>::Zero(length, config.dim));
  return vpt;
}

template <typename Scalar>
ModelOutput<Scalar> forward(const ModelParams<Scalar>& params, const PatchGrid<Scalar>& patches,
                            const VPTPrompts<Scalar>* vpt, ForwardTrace<Scalar>* trace) {
  const TinyViTConfig& cfg = params.config;
  const Index n = cfg.patches();
  if (patches.patch_h != cfg.patch_h || patches.patch_w != cfg.patch_w || patches.patches_per_image() != n ||
      patches.data.cols() != patches.patch_size() || patches.data.rows() % n != 0)
    throw ShapeError("forward: patch grid does not match the model geometry");
  const Index prompt_len = vpt ? vpt->length() : 0;
  if (vpt) {
    const std::size_t want = vpt->deep ? static_cast<std::size_t>(cfg.depth) : 1;
    if (prompt_len > 0 && vpt->tokens.size() != want) throw ShapeError("forward: VPT layer count mismatch");
    for (const auto& t : vpt->tokens)
      if (t.rows() != prompt_len || t.cols() != cfg.dim) throw ShapeError("forward: VPT token shape mismatch");
  }
  const bool deep = vpt ? vpt->deep : true;
  const Index batch = patches.data.rows() / n;
  const Index seq_len = 1 + prompt_len + n;
  const Index d = cfg.dim;

  ForwardTrace<Scalar> local;
  ForwardTrace<Scalar>& t = trace ? *trace : local;
  t.patches = patches.data;
  t.batch = batch;
  t.seq_len = seq_len;
  t.prompt_len = prompt_len;
  t.deep_prompts = deep;
  t.blocks.resize(static_cast<std::size_t>(cfg.depth));

  const Matrix<Scalar> embedded = linear_forward(patches.data, params.patch_embed);
  Matrix<Scalar> seq(batch * seq_len, d);
  for (Index b = 0; b < batch; ++b) {
    seq.row(b * seq_len) = params.cls_token.row(0) + params.pos_embed.row(0);
    if (prompt_len > 0) seq.block(b * seq_len + 1, 0, prompt_len, d) = vpt->tokens[0];
    seq.block(b * seq_len + 1 + prompt_len, 0, n, d) = embedded.middleRows(b * n, n) + params.pos_embed.bottomRows(n);
  }
  for (int i = 0; i < cfg.depth; ++i) {
    if (i > 0 && deep && prompt_len > 0)
      for (Index b = 0; b < batch; ++b)
        seq.block(b * seq_len + 1, 0, prompt_len, d) = vpt->tokens[static_cast<std::size_t>(i)];
    seq = block_forward(seq, params.blocks[static_cast<std::size_t>(i)], cfg, batch, seq_len,
                        t.blocks[static_cast<std::size_t>(i)]);
  }

  t.cls_pre_norm.resize(batch, d);
  for (Index b = 0; b < batch; ++b) t.cls_pre_norm.row(b) = seq.row(b * seq_len);
  t.cls_embedding = norm_forward(t.cls_pre_norm, params.norm, t.cls_xhat, t.cls_rstd);
  t.z1 = linear_forward(t.cls_embedding, params.head1);
  t.g1 = gelu_forward(t.z1);
  t.z2 = linear_forward(t.g1, params.head2);
  t.g2 = gelu_forward(t.z2);
  t.projection = linear_forward(t.g2, params.head3);
  t.features = unit_rows(t.projection, t.proj_norm);
  t.unit_prototypes = unit_rows(params.prototypes, t.proto_norm);

  ModelOutput<Scalar> out;
  out.cls_embedding = t.cls_embedding;
  out.features = t.features;
  out.logits = t.features * t.unit_prototypes.transpose();
  require_finite(out.features, "model features");
  require_finite(out.logits, "model logits");
  return out;
}

template <typename Scalar>
ModelGradients<Scalar> make_gradients(const ModelParams<Scalar>& params, const VPTPrompts<Scalar>* vpt) {
  ModelGradients<Scalar> g;
  g.model = params.zeros_like();
  if (vpt)
    for (const auto& t : vpt->tokens) g.vpt.push_back(Matrix<Scalar>::Zero(t.rows(), t.cols()));
  return g;
}

template <typename Scalar>
void backward(const ModelParams<Scalar>& params, const ForwardTrace<Scalar>& t, const Matrix<Scalar>& d_features,
              const Matrix<Scalar>& d_logits, const BackwardRequest& request, ModelGradients<Scalar>& grads,
              const Matrix<Scalar>* d_cls_embedding) {
  const TinyViTConfig& cfg = params.config;
  const Index batch = t.batch, seq_len = t.seq_len, prompt_len = t.prompt_len, d = cfg.dim;
  const Index n = cfg.patches();
  if (d_features.rows() != batch || d_logits.rows() != batch || d_logits.cols() != cfg.num_prototypes)
    throw ShapeError("backward: output gradient shape mismatch");
  if (prompt_len > 0 && grads.vpt.size() != (t.deep_prompts ? static_cast<std::size_t>(cfg.depth) : 1))
    throw ShapeError("backward: VPT gradient slots missing");
  ModelParams<Scalar>& g = grads.model;

  // logits = features * unit_prototypes^T
  const Matrix<Scalar> d_unit_feat = d_features + d_logits * t.unit_prototypes;
  const Matrix<Scalar> d_unit_proto = d_logits.transpose() * t.features;
  g.prototypes += unit_rows_backward(t.unit_prototypes, t.proto_norm, d_unit_proto);

  const Matrix<Scalar> d_proj = unit_rows_backward(t.features, t.proj_norm, d_unit_feat);
  const Matrix<Scalar> d_g2 = linear_backward(t.g2, d_proj, params.head3, g.head3, true);
  const Matrix<Scalar> d_g1 = linear_backward(t.g1, gelu_backward(t.z2, d_g2), params.head2, g.head2, true);
  Matrix<Scalar> d_cls = linear_backward(t.cls_embedding, gelu_backward(t.z1, d_g1), params.head1, g.head1, true);
  if (d_cls_embedding) d_cls += *d_cls_embedding;
  const Matrix<Scalar> d_cls_pre = norm_backward(d_cls, t.cls_xhat, t.cls_rstd, params.norm, g.norm);

  const int stop = std::clamp(request.input_grad ? 0 : request.stop_block, 0, cfg.depth);
  if (stop >= cfg.depth) return;

  Matrix<Scalar> dseq = Matrix<Scalar>::Zero(batch * seq_len, d);
  for (Index b = 0; b < batch; ++b) dseq.row(b * seq_len) = d_cls_pre.row(b);
  for (int i = cfg.depth - 1; i >= stop; --i) {
    const auto ui = static_cast<std::size_t>(i);
    dseq = block_backward(dseq, params.blocks[ui], cfg, batch, seq_len, t.blocks[ui], g.blocks[ui]);
    if (prompt_len > 0 && (t.deep_prompts || i == 0)) {
      const std::size_t slot = t.deep_prompts ? ui : 0;
      for (Index b = 0; b < batch; ++b) {
        grads.vpt[slot] += dseq.block(b * seq_len + 1, 0, prompt_len, d);
        // Deep prompts replace the previous layer's prompt outputs, which therefore receive no gradient.
        if (t.deep_prompts && i > 0) dseq.block(b * seq_len + 1, 0, prompt_len, d).setZero();
      }
    }
  }
  if (stop > 0) return;

  Matrix<Scalar> d_embedded(batch * n, d);
  for (Index b = 0; b < batch; ++b) {
    g.cls_token += dseq.row(b * seq_len);
    g.pos_embed.row(0) += dseq.row(b * seq_len);
    const auto dpatch = dseq.block(b * seq_len + 1 + prompt_len, 0, n, d);
    g.pos_embed.bottomRows(n) += dpatch;
    d_embedded.middleRows(b * n, n) = dpatch;
  }
  Matrix<Scalar> d_input = linear_backward(t.patches, d_embedded, params.patch_embed, g.patch_embed, request.input_grad);
  if (request.input_grad) grads.patches = std::move(d_input);
}

Index top_count(Index patches, double top_fraction) {
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) throw std::invalid_argument("top_fraction must lie in (0, 1]");
  const auto count = static_cast<Index>(std::ceil(top_fraction * static_cast<double>(patches) - 1e-9));
  return std::clamp<Index>(count, 1, patches);
}

template <typename Scalar>
std::vector<AttentionMap<Scalar>> extract_attention(const ModelParams<Scalar>& params,
                                                    const PatchGrid<Scalar>& patches, AttentionQuery query,
                                                    double top_fraction, const VPTPrompts<Scalar>* vpt) {
  const Index n = params.config.patches();
  if (query && (*query < 0 || *query >= n)) throw std::invalid_argument("attention query patch index out of range");
  const Index keep = top_count(n, top_fraction);
  ForwardTrace<Scalar> trace;
  forward(params, patches, vpt, &trace);
  const auto& last = trace.blocks.back();
  const Index heads = params.config.heads;
  const Index first_patch = 1 + trace.prompt_len;
  const Index query_row = query ? first_patch + *query : 0;

  std::vector<AttentionMap<Scalar>> maps(static_cast<std::size_t>(trace.batch));
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index b = 0; b < trace.batch; ++b) {
    AttentionMap<Scalar>& map = maps[static_cast<std::size_t>(b)];
    map.weights.resize(heads, trace.seq_len);
    map.mask.setConstant(heads, n, false);
    for (Index h = 0; h < heads; ++h) {
      map.weights.row(h) = last.probs[static_cast<std::size_t>(b * heads + h)].row(query_row);
      std::iota(order.begin(), order.end(), Index{0});
      const auto row = map.weights.row(h);
      std::stable_sort(order.begin(), order.end(),
                       [&](Index a, Index c) { return row(first_patch + a) > row(first_patch + c); });
      for (Index j = 0; j < keep; ++j) map.mask(h, order[static_cast<std::size_t>(j)]) = true;
    }
  }
  return maps;
}

#define SPTNET_INSTANTIATE(S)                                                                                  \
  template ModelParams<S> init_model<S>(const TinyViTConfig&, std::uint64_t);                                \
  template struct VPTPrompts<S>;                                                                             \
  template VPTPrompts<S> make_vpt<S>(const TinyViTConfig&, int, bool);                                       \
  template ModelOutput<S> forward<S>(const ModelParams<S>&, const PatchGrid<S>&, const VPTPrompts<S>*,       \
                                     ForwardTrace<S>*);                                                      \
  template ModelGradients<S> make_gradients<S>(const ModelParams<S>&, const VPTPrompts<S>*);                 \
  template void backward<S>(const ModelParams<S>&, const ForwardTrace<S>&, const Matrix<S>&, const Matrix<S>&, \
                            const BackwardRequest&, ModelGradients<S>&, const Matrix<S>*);                   \
  template std::vector<AttentionMap<S>> extract_attention<S>(const ModelParams<S>&, const PatchGrid<S>&,     \
                                                             AttentionQuery, double, const VPTPrompts<S>*);

SPTNET_INSTANTIATE(float)
SPTNET_INSTANTIATE(double)
#undef SPTNET_INSTANTIATE

}  // namespace sptnet
