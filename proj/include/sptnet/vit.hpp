#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sptnet/core.hpp"
#include "sptnet/patch_geometry.hpp"

namespace sptnet {

struct TinyViTConfig {
  int image_h = 224;
  int image_w = 224;
  int patch_h = 16;
  int patch_w = 16;
  int depth = 2;
  int dim = 32;
  int heads = 4;
  double mlp_ratio = 2.0;
  int proj_dim = 32;
  int num_prototypes = 8;
  // Number of top encoder blocks in the model group; earlier blocks and the embedding stay frozen.
  int trainable_blocks = 1;
  bool train_final_norm = true;

  Index patches() const { return Index{image_h / patch_h} * (image_w / patch_w); }
  int head_dim() const { return dim / heads; }
  int mlp_hidden() const { return static_cast<int>(dim * mlp_ratio + 0.5); }
  void validate() const;
};

template <typename Scalar>
struct Linear {
  Matrix<Scalar> weight;  // out x in
  Matrix<Scalar> bias;    // 1 x out
};

template <typename Scalar>
struct LayerNorm {
  Matrix<Scalar> gain;   // 1 x d
  Matrix<Scalar> shift;  // 1 x d
};

template <typename Scalar>
struct EncoderBlock {
  LayerNorm<Scalar> norm1;
  Linear<Scalar> qkv;
  Linear<Scalar> proj;
  LayerNorm<Scalar> norm2;
  Linear<Scalar> fc1;
  Linear<Scalar> fc2;
};

/// Encoder F, projection head H and class prototypes W.
template <typename Scalar>
struct ModelParams {
  TinyViTConfig config;
  Linear<Scalar> patch_embed;
  Matrix<Scalar> cls_token;  // 1 x d
  Matrix<Scalar> pos_embed;  // (1+n) x d
  std::vector<EncoderBlock<Scalar>> blocks;
  LayerNorm<Scalar> norm;
  Linear<Scalar> head1;
  Linear<Scalar> head2;
  Linear<Scalar> head3;
  Matrix<Scalar> prototypes;  // |C| x proj_dim, normalised on read

  // Calls fn(name, tensor) for every tensor in a fixed order.
  template <typename Fn>
  void visit(Fn&& fn);
  template <typename Fn>
  void visit(Fn&& fn) const;

  ModelParams zeros_like() const;
  template <typename Other>
  ModelParams<Other> cast() const;
};

/// Whether a named model tensor belongs to the trainable model group.
bool is_trainable(const TinyViTConfig& config, const std::string& tensor_name);

template <typename Scalar>
ModelParams<Scalar> init_model(const TinyViTConfig& config, std::uint64_t seed);

/// VPT token prompts: one b x d matrix per layer (deep), or a single one inserted before layer 0 (shallow).
template <typename Scalar>
struct VPTPrompts {
  bool deep = true;
  std::vector<Matrix<Scalar>> tokens;

  Index length() const { return tokens.empty() ? 0 : tokens.front().rows(); }
  Index parameter_count() const;
};

template <typename Scalar>
VPTPrompts<Scalar> make_vpt(const TinyViTConfig& config, int length, bool deep);

template <typename Scalar>
struct ModelOutput {
  Matrix<Scalar> cls_embedding;  // B x d
  Matrix<Scalar> features;       // B x proj_dim, unit rows
  Matrix<Scalar> logits;         // B x |C|, raw cosines
};

template <typename Scalar>
struct BlockTrace {
  Matrix<Scalar> input, xhat1, y1, qkv, attn_out, mid, xhat2, y2, h1, a1;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd1, rstd2;
  std::vector<Matrix<Scalar>> probs;  // [image * heads + head], T x T
};

/// Activations retained by forward() for backward() and attention extraction.
template <typename Scalar>
struct ForwardTrace {
  Matrix<Scalar> patches;
  Index batch = 0;
  Index seq_len = 0;
  Index prompt_len = 0;
  bool deep_prompts = true;
  std::vector<BlockTrace<Scalar>> blocks;
  Matrix<Scalar> cls_pre_norm, cls_xhat;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> cls_rstd;
  Matrix<Scalar> cls_embedding, z1, g1, z2, g2, projection, features;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> proj_norm, proto_norm;
  Matrix<Scalar> unit_prototypes;
};

template <typename Scalar>
ModelOutput<Scalar> forward(const ModelParams<Scalar>& params, const PatchGrid<Scalar>& patches,
                            const VPTPrompts<Scalar>* vpt = nullptr, ForwardTrace<Scalar>* trace = nullptr);

struct BackwardRequest {
  // Lowest encoder block to backpropagate through; 0 reaches the embedding.
  int stop_block = 0;
  bool input_grad = false;
};

template <typename Scalar>
struct ModelGradients {
  ModelParams<Scalar> model;         // same layout as the parameters, accumulated
  std::vector<Matrix<Scalar>> vpt;   // per VPT layer
  Matrix<Scalar> patches;            // (B*n) x patch_size when input_grad
};

template <typename Scalar>
ModelGradients<Scalar> make_gradients(const ModelParams<Scalar>& params, const VPTPrompts<Scalar>* vpt);

/// Accumulates into grads the gradient of a scalar whose gradients w.r.t. the forward outputs are given.
template <typename Scalar>
void backward(const ModelParams<Scalar>& params, const ForwardTrace<Scalar>& trace, const Matrix<Scalar>& d_features,
              const Matrix<Scalar>& d_logits, const BackwardRequest& request, ModelGradients<Scalar>& grads,
              const Matrix<Scalar>* d_cls_embedding = nullptr);

/// Query for attention maps: nullopt selects the CLS token, otherwise a patch index.
using AttentionQuery = std::optional<int>;

template <typename Scalar>
struct AttentionMap {
  Matrix<Scalar> weights;  // heads x seq_len, final layer, one query row per head
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mask;  // heads x n
};

/// Per image: final-layer attention of the query and, per head, the ceil(top_fraction*n) most attended patches.
/// Ties go to the lower patch index.
template <typename Scalar>
std::vector<AttentionMap<Scalar>> extract_attention(const ModelParams<Scalar>& params,
                                                    const PatchGrid<Scalar>& patches, AttentionQuery query,
                                                    double top_fraction, const VPTPrompts<Scalar>* vpt = nullptr);

Index top_count(Index patches, double top_fraction);

// ---- template members -------------------------------------------------------------

template <typename Scalar>
template <typename Fn>
void ModelParams<Scalar>::visit(Fn&& fn) {
  auto lin = [&](const std::string& p, Linear<Scalar>& l) {
    fn(p + ".weight", l.weight);
    fn(p + ".bias", l.bias);
  };
  auto ln = [&](const std::string& p, LayerNorm<Scalar>& l) {
    fn(p + ".gain", l.gain);
    fn(p + ".shift", l.shift);
  };
  lin("patch_embed", patch_embed);
  fn(std::string("cls_token"), cls_token);
  fn(std::string("pos_embed"), pos_embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i);
    ln(p + ".norm1", blocks[i].norm1);
    lin(p + ".qkv", blocks[i].qkv);
    lin(p + ".proj", blocks[i].proj);
    ln(p + ".norm2", blocks[i].norm2);
    lin(p + ".fc1", blocks[i].fc1);
    lin(p + ".fc2", blocks[i].fc2);
  }
  ln("norm", norm);
  lin("head.0", head1);
  lin("head.1", head2);
  lin("head.2", head3);
  fn(std::string("prototypes"), prototypes);
}

template <typename Scalar>
template <typename Fn>
void ModelParams<Scalar>::visit(Fn&& fn) const {
  const_cast<ModelParams*>(this)->visit(
      [&](const std::string& name, Matrix<Scalar>& t) { fn(name, static_cast<const Matrix<Scalar>&>(t)); });
}

template <typename Scalar>
ModelParams<Scalar> ModelParams<Scalar>::zeros_like() const {
  ModelParams out = *this;
  out.visit([](const std::string&, Matrix<Scalar>& t) { t.setZero(); });
  return out;
}

template <typename Scalar>
template <typename Other>
ModelParams<Other> ModelParams<Scalar>::cast() const {
  ModelParams<Other> out;
  out.config = config;
  out.blocks.resize(blocks.size());
  std::vector<const Matrix<Scalar>*> src;
  visit([&](const std::string&, const Matrix<Scalar>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.visit([&](const std::string&, Matrix<Other>& t) { t = src[i++]->template cast<Other>(); });
  return out;
}

}  // namespace sptnet
