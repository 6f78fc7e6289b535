#pragma once

#include <optional>
#include <string>

#include "sptnet/core.hpp"
#include "sptnet/patch_geometry.hpp"
#include "sptnet/vit.hpp"

namespace sptnet {

/// Prompt configurations of the ablation grid.
enum class PromptVariant {
  none,           // baseline, no data parameters
  vpt,            // token prompts only
  global,         // image border only
  spt,            // per-patch borders (SPTNet-P)
  shared,         // one border shared by all patches (SPTNet-S)
  shared_global,  // shared border + image border
  sptnet,         // per-patch borders + image border
};

PromptVariant parse_prompt_variant(const std::string& name);
std::string to_string(PromptVariant v);

struct PromptConfig {
  PromptVariant variant = PromptVariant::sptnet;
  int margin = 1;          // m
  int global_margin = 30;  // m+
  int vpt_length = 4;
  bool vpt_deep = true;
  double init_range = 0.03;

  bool spatial() const;
  bool shared() const { return variant == PromptVariant::shared || variant == PromptVariant::shared_global; }
  bool global() const;
  bool vpt() const { return variant == PromptVariant::vpt; }
};

PromptGeometry prompt_geometry(const PromptConfig& prompt, const TinyViTConfig& model);

/// All data parameters of one run.
template <typename Scalar>
struct PromptSet {
  std::optional<SpatialPrompt<Scalar>> spatial;
  std::optional<GlobalPrompt<Scalar>> global;
  VPTPrompts<Scalar> vpt;

  bool empty() const { return !spatial && !global && vpt.tokens.empty(); }
  Index parameter_count() const;

  template <typename Fn>
  void visit(Fn&& fn) {
    if (spatial) fn(std::string("prompt.spatial"), spatial->values);
    if (global) fn(std::string("prompt.global"), global->values);
    for (std::size_t i = 0; i < vpt.tokens.size(); ++i) fn("prompt.vpt." + std::to_string(i), vpt.tokens[i]);
  }
  template <typename Fn>
  void visit(Fn&& fn) const {
    const_cast<PromptSet*>(this)->visit(
        [&](const std::string& name, Matrix<Scalar>& t) { fn(name, static_cast<const Matrix<Scalar>&>(t)); });
  }

  PromptSet zeros_like() const {
    PromptSet out = *this;
    out.visit([](const std::string&, Matrix<Scalar>& t) { t.setZero(); });
    return out;
  }
  template <typename Other>
  PromptSet<Other> cast() const;
};

/// Builds the prompts enabled by the config, initialised uniformly in [-init_range, init_range].
template <typename Scalar>
PromptSet<Scalar> make_prompts(const PromptConfig& config, const TinyViTConfig& model, std::uint64_t seed);

/// Global prompt on the image, then patchify, then per-patch prompts. A null prompt set only patchifies.
template <typename Scalar>
PatchGrid<Scalar> compose_input(const ImageBatch<Scalar>& images, const PromptSet<Scalar>* prompts, int patch_h,
                                int patch_w);

/// Accumulates the pixel-prompt gradients given the gradient w.r.t. the composed patches.
template <typename Scalar>
void accumulate_prompt_gradient(const PromptSet<Scalar>& prompts, const PatchGrid<Scalar>& geometry,
                                const Matrix<Scalar>& patch_grad, PromptSet<Scalar>& grads);

template <typename Scalar>
template <typename Other>
PromptSet<Other> PromptSet<Scalar>::cast() const {
  PromptSet<Other> out;
  if (spatial) {
    out.spatial.emplace();
    out.spatial->layout = spatial->layout;
    out.spatial->shared = spatial->shared;
    out.spatial->values = spatial->values.template cast<Other>();
  }
  if (global) {
    out.global.emplace();
    out.global->layout = global->layout;
    out.global->values = global->values.template cast<Other>();
  }
  out.vpt.deep = vpt.deep;
  for (const auto& t : vpt.tokens) out.vpt.tokens.push_back(t.template cast<Other>());
  return out;
}

}  // namespace sptnet
