#include "sptnet/patch_geometry.hpp"

#include <sstream>

namespace sptnet {

namespace {

void check_border(int h, int w, int m, const char* what) {
  if (h <= 0 || w <= 0) throw GeometryError(std::string(what) + ": block size must be positive");
  if (m < 1 || 2 * m >= std::min(h, w)) {
    std::ostringstream os;
    os << what << ": border width " << m << " must satisfy 1 <= m and 2m < min(" << h << ", " << w << ")";
    throw GeometryError(os.str());
  }
}

}  // namespace

BorderLayout::BorderLayout(int h, int w, int m) : height(h), width(w), margin(m) {
  check_border(h, w, m, "border layout");
  positions.reserve(static_cast<std::size_t>(compact_size(h, w, m)));
  for (int c = 0; c < kChannels; ++c) {
    const Index base = Index{c} * h * w;
    auto push = [&](int y, int x) { positions.push_back(base + Index{y} * w + x); };
    for (int y = 0; y < m; ++y)
      for (int x = 0; x < w; ++x) push(y, x);
    for (int y = h - m; y < h; ++y)
      for (int x = 0; x < w; ++x) push(y, x);
    for (int y = m; y < h - m; ++y)
      for (int x = 0; x < m; ++x) push(y, x);
    for (int y = m; y < h - m; ++y)
      for (int x = w - m; x < w; ++x) push(y, x);
  }
}

std::int64_t BorderLayout::compact_size(int h, int w, int m) {
  return 6LL * m * (static_cast<std::int64_t>(h) + w - 2LL * m);
}

template <typename Scalar>
PatchGrid<Scalar> patchify(const ImageBatch<Scalar>& images, int patch_h, int patch_w) {
  if (patch_h <= 0 || patch_w <= 0 || images.height % patch_h != 0 || images.width % patch_w != 0) {
    std::ostringstream os;
    os << "patchify: image " << images.height << "x" << images.width << " is not divisible by patch " << patch_h
       << "x" << patch_w;
    throw ShapeError(os.str());
  }
  if (images.data.cols() != images.pixels_per_image()) throw ShapeError("patchify: image row width mismatch");
  PatchGrid<Scalar> grid;
  grid.patch_h = patch_h;
  grid.patch_w = patch_w;
  grid.grid_rows = images.height / patch_h;
  grid.grid_cols = images.width / patch_w;
  const Index n = grid.patches_per_image();
  grid.data.resize(images.batch() * n, grid.patch_size());
  for (Index b = 0; b < images.batch(); ++b) {
    for (int gy = 0; gy < grid.grid_rows; ++gy) {
      for (int gx = 0; gx < grid.grid_cols; ++gx) {
        auto row = grid.data.row(b * n + Index{gy} * grid.grid_cols + gx);
        Index k = 0;
        for (int c = 0; c < kChannels; ++c)
          for (int y = 0; y < patch_h; ++y)
            for (int x = 0; x < patch_w; ++x) row(k++) = images.at(b, c, gy * patch_h + y, gx * patch_w + x);
      }
    }
  }
  return grid;
}

template <typename Scalar>
ImageBatch<Scalar> unpatchify(const PatchGrid<Scalar>& grid) {
  const Index n = grid.patches_per_image();
  if (n == 0 || grid.data.rows() % n != 0 || grid.data.cols() != grid.patch_size())
    throw ShapeError("unpatchify: patch grid shape mismatch");
  ImageBatch<Scalar> images(grid.data.rows() / n, grid.grid_rows * grid.patch_h, grid.grid_cols * grid.patch_w);
  for (Index b = 0; b < images.batch(); ++b) {
    for (int gy = 0; gy < grid.grid_rows; ++gy) {
      for (int gx = 0; gx < grid.grid_cols; ++gx) {
        auto row = grid.data.row(b * n + Index{gy} * grid.grid_cols + gx);
        Index k = 0;
        for (int c = 0; c < kChannels; ++c)
          for (int y = 0; y < grid.patch_h; ++y)
            for (int x = 0; x < grid.patch_w; ++x)
              images.at(b, c, gy * grid.patch_h + y, gx * grid.patch_w + x) = row(k++);
      }
    }
  }
  return images;
}

template <typename Scalar>
SpatialPrompt<Scalar>::SpatialPrompt(int patch_h, int patch_w, int margin, Index patch_count, bool is_shared)
    : layout(patch_h, patch_w, margin), shared(is_shared) {
  values = Matrix<Scalar>::Zero(is_shared ? 1 : patch_count, layout.size());
}

template <typename Scalar>
GlobalPrompt<Scalar>::GlobalPrompt(int image_h, int image_w, int margin) : layout(image_h, image_w, margin) {
  values = Matrix<Scalar>::Zero(1, layout.size());
}

template <typename Scalar>
RowVector<Scalar> scatter_border(const BorderLayout& layout, const Eigen::Ref<const RowVector<Scalar>>& compact) {
  if (compact.size() != layout.size()) throw ShapeError("scatter_border: compact size mismatch");
  RowVector<Scalar> block = RowVector<Scalar>::Zero(Index{kChannels} * layout.height * layout.width);
  for (Index i = 0; i < layout.size(); ++i) block(layout.positions[static_cast<std::size_t>(i)]) = compact(i);
  return block;
}

template <typename Scalar>
PatchGrid<Scalar> attach_spatial(const PatchGrid<Scalar>& patches, const SpatialPrompt<Scalar>& prompt) {
  const Index n = patches.patches_per_image();
  if (prompt.layout.height != patches.patch_h || prompt.layout.width != patches.patch_w)
    throw ShapeError("attach_spatial: prompt patch shape does not match the grid");
  if (!prompt.shared && prompt.values.rows() != n)
    throw ShapeError("attach_spatial: prompt count does not match patches per image");
  if (prompt.values.cols() != prompt.layout.size()) throw ShapeError("attach_spatial: compact width mismatch");
  PatchGrid<Scalar> out = patches;
  const auto& pos = prompt.layout.positions;
  for (Index r = 0; r < out.data.rows(); ++r) {
    const Index j = prompt.shared ? 0 : r % n;
    for (std::size_t i = 0; i < pos.size(); ++i) out.data(r, pos[i]) += prompt.values(j, static_cast<Index>(i));
  }
  return out;
}

template <typename Scalar>
ImageBatch<Scalar> attach_global(const ImageBatch<Scalar>& images, const GlobalPrompt<Scalar>& prompt) {
  if (prompt.layout.height != images.height || prompt.layout.width != images.width)
    throw ShapeError("attach_global: prompt geometry does not match the image size");
  if (prompt.values.cols() != prompt.layout.size()) throw ShapeError("attach_global: compact width mismatch");
  ImageBatch<Scalar> out = images;
  const auto& pos = prompt.layout.positions;
  for (Index b = 0; b < out.batch(); ++b)
    for (std::size_t i = 0; i < pos.size(); ++i) out.data(b, pos[i]) += prompt.values(0, static_cast<Index>(i));
  return out;
}

template <typename Scalar>
Matrix<Scalar> spatial_prompt_gradient(const Matrix<Scalar>& patch_grad, const SpatialPrompt<Scalar>& prompt,
                                       Index patches_per_image) {
  Matrix<Scalar> grad = Matrix<Scalar>::Zero(prompt.values.rows(), prompt.values.cols());
  const auto& pos = prompt.layout.positions;
  for (Index r = 0; r < patch_grad.rows(); ++r) {
    const Index j = prompt.shared ? 0 : r % patches_per_image;
    for (std::size_t i = 0; i < pos.size(); ++i) grad(j, static_cast<Index>(i)) += patch_grad(r, pos[i]);
  }
  return grad;
}

template <typename Scalar>
Matrix<Scalar> global_prompt_gradient(const Matrix<Scalar>& image_grad, const GlobalPrompt<Scalar>& prompt) {
  Matrix<Scalar> grad = Matrix<Scalar>::Zero(1, prompt.values.cols());
  const auto& pos = prompt.layout.positions;
  for (Index b = 0; b < image_grad.rows(); ++b)
    for (std::size_t i = 0; i < pos.size(); ++i) grad(0, static_cast<Index>(i)) += image_grad(b, pos[i]);
  return grad;
}

PromptParamCount count_prompt_params(const PromptGeometry& g) {
  PromptParamCount count;
  if (g.image_h % g.patch_h != 0 || g.image_w % g.patch_w != 0)
    throw GeometryError("count_prompt_params: image is not divisible by the patch size");
  if (g.spatial) {
    check_border(g.patch_h, g.patch_w, g.margin, "spatial prompt");
    const std::int64_t n = static_cast<std::int64_t>(g.image_h / g.patch_h) * (g.image_w / g.patch_w);
    const std::int64_t per_patch = BorderLayout::compact_size(g.patch_h, g.patch_w, g.margin);
    count.spatial = g.shared ? per_patch : n * per_patch;
  }
  if (g.global) {
    check_border(g.image_h, g.image_w, g.global_margin, "global prompt");
    count.global = BorderLayout::compact_size(g.image_h, g.image_w, g.global_margin);
  }
  count.vpt = static_cast<std::int64_t>(g.vpt_layers) * g.vpt_length * g.vpt_dim;
  return count;
}

#define SPTNET_INSTANTIATE(S)                                                                                   \
  template PatchGrid<S> patchify<S>(const ImageBatch<S>&, int, int);                                          \
  template ImageBatch<S> unpatchify<S>(const PatchGrid<S>&);                                                  \
  template struct SpatialPrompt<S>;                                                                           \
  template struct GlobalPrompt<S>;                                                                            \
  template RowVector<S> scatter_border<S>(const BorderLayout&, const Eigen::Ref<const RowVector<S>>&);        \
  template PatchGrid<S> attach_spatial<S>(const PatchGrid<S>&, const SpatialPrompt<S>&);                      \
  template ImageBatch<S> attach_global<S>(const ImageBatch<S>&, const GlobalPrompt<S>&);                      \
  template Matrix<S> spatial_prompt_gradient<S>(const Matrix<S>&, const SpatialPrompt<S>&, Index);            \
  template Matrix<S> global_prompt_gradient<S>(const Matrix<S>&, const GlobalPrompt<S>&);

SPTNET_INSTANTIATE(float)
SPTNET_INSTANTIATE(double)
#undef SPTNET_INSTANTIATE

}  // namespace sptnet
