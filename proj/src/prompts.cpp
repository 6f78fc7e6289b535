#include "sptnet/prompts.hpp"

namespace sptnet {

PromptVariant parse_prompt_variant(const std::string& name) {
  if (name == "none") return PromptVariant::none;
  if (name == "vpt") return PromptVariant::vpt;
  if (name == "global") return PromptVariant::global;
  if (name == "spt" || name == "sptnet-p") return PromptVariant::spt;
  if (name == "shared" || name == "sptnet-s") return PromptVariant::shared;
  if (name == "shared_global") return PromptVariant::shared_global;
  if (name == "sptnet") return PromptVariant::sptnet;
  throw ConfigError("unknown prompt variant '" + name + "'");
}

std::string to_string(PromptVariant v) {
  switch (v) {
    case PromptVariant::none: return "none";
    case PromptVariant::vpt: return "vpt";
    case PromptVariant::global: return "global";
    case PromptVariant::spt: return "spt";
    case PromptVariant::shared: return "shared";
    case PromptVariant::shared_global: return "shared_global";
    case PromptVariant::sptnet: return "sptnet";
  }
  return "none";
}

bool PromptConfig::spatial() const {
  return variant == PromptVariant::spt || variant == PromptVariant::sptnet || shared();
}

bool PromptConfig::global() const {
  return variant == PromptVariant::global || variant == PromptVariant::sptnet ||
         variant == PromptVariant::shared_global;
}

PromptGeometry prompt_geometry(const PromptConfig& prompt, const TinyViTConfig& model) {
  PromptGeometry g;
  g.image_h = model.image_h;
  g.image_w = model.image_w;
  g.patch_h = model.patch_h;
  g.patch_w = model.patch_w;
  g.margin = prompt.margin;
  g.global_margin = prompt.global_margin;
  g.spatial = prompt.spatial();
  g.shared = prompt.shared();
  g.global = prompt.global();
  if (prompt.vpt()) {
    g.vpt_layers = prompt.vpt_deep ? model.depth : 1;
    g.vpt_length = prompt.vpt_length;
    g.vpt_dim = model.dim;
  }
  return g;
}

template <typename Scalar>
Index PromptSet<Scalar>::parameter_count() const {
  Index total = vpt.parameter_count();
  if (spatial) total += spatial->parameter_count();
  if (global) total += global->parameter_count();
  return total;
}

template <typename Scalar>
PromptSet<Scalar> make_prompts(const PromptConfig& config, const TinyViTConfig& model, std::uint64_t seed) {
  PromptSet<Scalar> set;
  if (config.spatial())
    set.spatial.emplace(model.patch_h, model.patch_w, config.margin, model.patches(), config.shared());
  if (config.global()) set.global.emplace(model.image_h, model.image_w, config.global_margin);
  if (config.vpt()) {
    if (config.vpt_length < 1) throw ConfigError("prompt.vpt_length must be >= 1 for the vpt variant");
    set.vpt = make_vpt<Scalar>(model, config.vpt_length, config.vpt_deep);
  }
  Rng rng(seed, 0x9e0f'7a11ULL);
  const double r = config.init_range;
  set.visit([&](const std::string&, Matrix<Scalar>& t) {
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(rng.uniform(-r, r));
  });
  return set;
}

template <typename Scalar>
PatchGrid<Scalar> compose_input(const ImageBatch<Scalar>& images, const PromptSet<Scalar>* prompts, int patch_h,
                                int patch_w) {
  if (!prompts) return patchify(images, patch_h, patch_w);
  PatchGrid<Scalar> grid =
      prompts->global ? patchify(attach_global(images, *prompts->global), patch_h, patch_w) : patchify(images, patch_h, patch_w);
  if (prompts->spatial) grid = attach_spatial(grid, *prompts->spatial);
  return grid;
}

template <typename Scalar>
void accumulate_prompt_gradient(const PromptSet<Scalar>& prompts, const PatchGrid<Scalar>& geometry,
                                const Matrix<Scalar>& patch_grad, PromptSet<Scalar>& grads) {
  if (prompts.spatial)
    grads.spatial->values += spatial_prompt_gradient(patch_grad, *prompts.spatial, geometry.patches_per_image());
  if (prompts.global) {
    PatchGrid<Scalar> g = geometry;
    g.data = patch_grad;
    grads.global->values += global_prompt_gradient(unpatchify(g).data, *prompts.global);
  }
}

#define SPTNET_INSTANTIATE(S)                                                                                   \
  template struct PromptSet<S>;                                                                               \
  template PromptSet<S> make_prompts<S>(const PromptConfig&, const TinyViTConfig&, std::uint64_t);            \
  template PatchGrid<S> compose_input<S>(const ImageBatch<S>&, const PromptSet<S>*, int, int);                \
  template void accumulate_prompt_gradient<S>(const PromptSet<S>&, const PatchGrid<S>&, const Matrix<S>&,      \
                                              PromptSet<S>&);

SPTNET_INSTANTIATE(float)
SPTNET_INSTANTIATE(double)
#undef SPTNET_INSTANTIATE

}  // namespace sptnet
