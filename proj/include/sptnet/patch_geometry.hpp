#pragma once

#include <cstdint>
#include <vector>

#include "sptnet/core.hpp"

namespace sptnet {

inline constexpr int kChannels = 3;

/// A batch of channel-major images. Row b holds image b flattened as (c, y, x).
template <typename Scalar>
struct ImageBatch {
  int height = 0;
  int width = 0;
  Matrix<Scalar> data;  // B x (3*H*W)

  ImageBatch() = default;
  ImageBatch(Index batch, int h, int w) : height(h), width(w), data(Matrix<Scalar>::Zero(batch, kChannels * h * w)) {}

  Index batch() const { return data.rows(); }
  Index pixels_per_image() const { return Index{kChannels} * height * width; }

  Scalar& at(Index b, int c, int y, int x) { return data(b, (Index{c} * height + y) * width + x); }
  Scalar at(Index b, int c, int y, int x) const { return data(b, (Index{c} * height + y) * width + x); }

  template <typename Other>
  ImageBatch<Other> cast() const {
    ImageBatch<Other> out;
    out.height = height;
    out.width = width;
    out.data = data.template cast<Other>();
    return out;
  }
};

/// Patches of a batch in row-major grid order. Row (b*n + j) holds patch j of image b,
/// flattened channel-major as (c, y, x) within the patch.
template <typename Scalar>
struct PatchGrid {
  int patch_h = 0;
  int patch_w = 0;
  int grid_rows = 0;
  int grid_cols = 0;
  Matrix<Scalar> data;  // (B*n) x (3*h*w)

  Index patches_per_image() const { return Index{grid_rows} * grid_cols; }
  Index batch() const { return patches_per_image() == 0 ? 0 : data.rows() / patches_per_image(); }
  Index patch_size() const { return Index{kChannels} * patch_h * patch_w; }
};

/// Positions of the width-m border inside a 3 x h x w block, in compact-storage order:
/// channel-major, then top band, bottom band, left band, right band (row-major inside each band).
struct BorderLayout {
  int height = 0;
  int width = 0;
  int margin = 0;
  std::vector<Index> positions;  // flat (c, y, x) offsets into the block

  BorderLayout() = default;
  BorderLayout(int h, int w, int m);

  Index size() const { return static_cast<Index>(positions.size()); }
  // Compact parameter count 6m(h+w-2m).
  static std::int64_t compact_size(int h, int w, int m);
};

template <typename Scalar>
PatchGrid<Scalar> patchify(const ImageBatch<Scalar>& images, int patch_h, int patch_w);

template <typename Scalar>
ImageBatch<Scalar> unpatchify(const PatchGrid<Scalar>& patches);

/// Learnable per-patch border values (or a single shared border broadcast to all patches).
template <typename Scalar>
struct SpatialPrompt {
  BorderLayout layout;
  bool shared = false;
  Matrix<Scalar> values;  // n x c_m, or 1 x c_m when shared

  SpatialPrompt() = default;
  SpatialPrompt(int patch_h, int patch_w, int margin, Index patch_count, bool is_shared);
  Index parameter_count() const { return values.size(); }
};

/// Learnable border of width m+ around the whole image.
template <typename Scalar>
struct GlobalPrompt {
  BorderLayout layout;
  Matrix<Scalar> values;  // 1 x 6m+(H+W-2m+)

  GlobalPrompt() = default;
  GlobalPrompt(int image_h, int image_w, int margin);
  Index parameter_count() const { return values.size(); }
};

template <typename Scalar>
PatchGrid<Scalar> attach_spatial(const PatchGrid<Scalar>& patches, const SpatialPrompt<Scalar>& prompt);

template <typename Scalar>
ImageBatch<Scalar> attach_global(const ImageBatch<Scalar>& images, const GlobalPrompt<Scalar>& prompt);

/// Gradient of a scalar w.r.t. the compact spatial values, given its gradient w.r.t. the prompted patches.
template <typename Scalar>
Matrix<Scalar> spatial_prompt_gradient(const Matrix<Scalar>& patch_grad, const SpatialPrompt<Scalar>& prompt,
                                       Index patches_per_image);

/// Gradient w.r.t. the compact global values, given the gradient w.r.t. the prompted images.
template <typename Scalar>
Matrix<Scalar> global_prompt_gradient(const Matrix<Scalar>& image_grad, const GlobalPrompt<Scalar>& prompt);

/// Scatter a compact border vector into a zero block of shape 3 x h x w (flattened).
template <typename Scalar>
RowVector<Scalar> scatter_border(const BorderLayout& layout, const Eigen::Ref<const RowVector<Scalar>>& compact);

struct PromptGeometry {
  int image_h = 224;
  int image_w = 224;
  int patch_h = 16;
  int patch_w = 16;
  int margin = 1;        // m
  int global_margin = 30;  // m+
  bool spatial = true;
  bool shared = false;
  bool global = true;
  // VPT tokens: vpt_layers x vpt_length x dim (0 disables).
  int vpt_layers = 0;
  int vpt_length = 0;
  int vpt_dim = 0;
};

struct PromptParamCount {
  std::int64_t spatial = 0;
  std::int64_t global = 0;
  std::int64_t vpt = 0;
  std::int64_t total() const { return spatial + global + vpt; }
};

PromptParamCount count_prompt_params(const PromptGeometry& g);

}  // namespace sptnet
