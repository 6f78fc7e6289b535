#include <doctest.h>

#include <set>

#include "sptnet/patch_geometry.hpp"
#include "sptnet/prompts.hpp"
#include "support.hpp"

using namespace sptnet;

namespace {

ImageBatch<double> random_images(Rng& rng, Index b, int h, int w) {
  ImageBatch<double> img(b, h, w);
  img.data = oracle::random_matrix(rng, b, img.pixels_per_image(), -1, 1);
  return img;
}

// Number of pixels of a 3 x h x w block within distance m of its edge, counted pixel by pixel.
std::int64_t border_pixels(int h, int w, int m) {
  std::int64_t count = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (y < m || y >= h - m || x < m || x >= w - m) ++count;
  return 3 * count;
}

}  // namespace

TEST_CASE("border layout size matches a pixel count over a grid of shapes") {
  for (int h = 3; h <= 14; ++h)
    for (int w = 3; w <= 14; ++w)
      for (int m = 1; 2 * m < std::min(h, w); ++m) {
        const BorderLayout layout(h, w, m);
        CHECK(layout.size() == border_pixels(h, w, m));
        CHECK(BorderLayout::compact_size(h, w, m) == border_pixels(h, w, m));
        const std::set<Index> unique(layout.positions.begin(), layout.positions.end());
        CHECK(unique.size() == layout.positions.size());
      }
}

TEST_CASE("border layout order: channel, top, bottom, left, right") {
  const BorderLayout layout(4, 5, 1);
  // channel 0: top row (y=0, x=0..4), bottom row (y=3), left column (x=0, y=1..2), right column (x=4, y=1..2)
  const std::vector<Index> expect = {0, 1, 2, 3, 4, 15, 16, 17, 18, 19, 5, 10, 9, 14};
  REQUIRE(layout.size() == 3 * 14);
  for (std::size_t i = 0; i < expect.size(); ++i) CHECK(layout.positions[i] == expect[i]);
  CHECK(layout.positions[14] == 20);  // channel 1 starts with its top-left pixel
}

TEST_CASE("invalid margins are rejected") {
  CHECK_THROWS_AS(BorderLayout(16, 16, 0), GeometryError);
  CHECK_THROWS_AS(BorderLayout(16, 16, 8), GeometryError);
  CHECK_THROWS_AS(BorderLayout(16, 5, 3), GeometryError);
  CHECK_NOTHROW(BorderLayout(16, 16, 7));
}

TEST_CASE("parameter budgets of the standard geometry") {
  PromptGeometry g;  // 224 x 224, 16 x 16 patches, m = 1, m+ = 30
  PromptParamCount c = count_prompt_params(g);
  CHECK(c.spatial == 35280);
  CHECK(c.global == 69840);
  CHECK(c.total() == 105120);
  g.global = false;
  CHECK(count_prompt_params(g).total() == 35280);
  g.shared = true;
  CHECK(count_prompt_params(g).total() == 180);
  g.spatial = false;
  g.global = false;
  g.vpt_layers = 12;
  g.vpt_length = 4;
  g.vpt_dim = 768;
  CHECK(count_prompt_params(g).total() == 12 * 4 * 768);
}

TEST_CASE("budget formula over m and m+") {
  for (int m = 1; m <= 7; ++m) {
    PromptGeometry g;
    g.margin = m;
    g.global = false;
    CHECK(count_prompt_params(g).spatial == 196LL * 6 * m * (32 - 2 * m));
  }
  for (int mp = 1; mp <= 111; mp += 10) {
    PromptGeometry g;
    g.global_margin = mp;
    g.spatial = false;
    CHECK(count_prompt_params(g).global == 6LL * mp * (448 - 2 * mp));
  }
}

TEST_CASE("patchify and unpatchify invert each other") {
  Rng rng(3);
  const ImageBatch<double> img = random_images(rng, 2, 12, 8);
  const PatchGrid<double> grid = patchify(img, 4, 4);
  CHECK(grid.grid_rows == 3);
  CHECK(grid.grid_cols == 2);
  CHECK(grid.data.rows() == 12);
  // patch 3 of image 1 is grid cell (1, 1): pixel (c=2, y=1, x=3) inside it is image pixel (2, 5, 7)
  CHECK(grid.data(6 + 3, (2 * 4 + 1) * 4 + 3) == img.at(1, 2, 5, 7));
  const ImageBatch<double> back = unpatchify(grid);
  CHECK(back.data == img.data);
  CHECK_THROWS_AS(patchify(img, 5, 4), ShapeError);
}

TEST_CASE("spatial prompt only touches border pixels") {
  Rng rng(4);
  const ImageBatch<double> img = random_images(rng, 2, 8, 8);
  const PatchGrid<double> grid = patchify(img, 4, 4);
  SpatialPrompt<double> prompt(4, 4, 1, 4, false);
  prompt.values = oracle::random_matrix(rng, prompt.values.rows(), prompt.values.cols(), -1, 1);
  const PatchGrid<double> out = attach_spatial(grid, prompt);
  for (Index b = 0; b < 2; ++b)
    for (Index j = 0; j < 4; ++j) {
      const Index row = b * 4 + j;
      const RowVector<double> add = scatter_border<double>(prompt.layout, prompt.values.row(j));
      CHECK((out.data.row(row) - grid.data.row(row) - add).norm() < 1e-14);
      for (int c = 0; c < 3; ++c)
        for (int y = 1; y < 3; ++y)
          for (int x = 1; x < 3; ++x) {
            const Index col = (c * 4 + y) * 4 + x;
            CHECK(out.data(row, col) == grid.data(row, col));
          }
    }
}

TEST_CASE("shared prompt broadcasts one border to every patch") {
  Rng rng(5);
  const ImageBatch<double> img = random_images(rng, 1, 8, 8);
  const PatchGrid<double> grid = patchify(img, 4, 4);
  SpatialPrompt<double> prompt(4, 4, 1, 4, true);
  CHECK(prompt.values.rows() == 1);
  prompt.values.setConstant(0.5);
  const Matrix<double> diff = attach_spatial(grid, prompt).data - grid.data;
  for (Index r = 1; r < 4; ++r) CHECK(diff.row(r) == diff.row(0));
  CHECK(diff.sum() == doctest::Approx(4 * 0.5 * 36));
}

TEST_CASE("global prompt adds the image border before patchify") {
  Rng rng(6);
  const ImageBatch<double> img = random_images(rng, 2, 8, 8);
  GlobalPrompt<double> prompt(8, 8, 2);
  CHECK(prompt.parameter_count() == 6 * 2 * (16 - 4));
  prompt.values = oracle::random_matrix(rng, 1, prompt.values.cols(), -1, 1);
  const ImageBatch<double> out = attach_global(img, prompt);
  for (Index b = 0; b < 2; ++b)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          const bool border = y < 2 || y >= 6 || x < 2 || x >= 6;
          if (!border) CHECK(out.at(b, c, y, x) == img.at(b, c, y, x));
        }
  const RowVector<double> add = scatter_border<double>(prompt.layout, prompt.values.row(0));
  CHECK((out.data.row(1) - img.data.row(1) - add).norm() < 1e-14);
}

TEST_CASE("prompt gradients match central differences of a linear probe") {
  Rng rng(7);
  const ImageBatch<double> img = random_images(rng, 3, 8, 12);
  PromptConfig cfg;
  cfg.variant = PromptVariant::sptnet;
  cfg.margin = 1;
  cfg.global_margin = 2;
  TinyViTConfig model;
  model.image_h = 8;
  model.image_w = 12;
  model.patch_h = model.patch_w = 4;
  for (PromptVariant v : {PromptVariant::sptnet, PromptVariant::shared_global, PromptVariant::spt}) {
    cfg.variant = v;
    PromptSet<double> prompts = make_prompts<double>(cfg, model, 11);
    const PatchGrid<double> probe_shape = compose_input(img, &prompts, 4, 4);
    const Matrix<double> probe = oracle::random_matrix(rng, probe_shape.data.rows(), probe_shape.data.cols(), -1, 1);
    auto loss = [&] { return compose_input(img, &prompts, 4, 4).data.cwiseProduct(probe).sum(); };
    PromptSet<double> grads = prompts.zeros_like();
    accumulate_prompt_gradient(prompts, probe_shape, probe, grads);
    auto params = oracle::tensors(prompts);
    auto analytic = oracle::tensors(grads);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto r = oracle::check_tensor(params[i].first, *params[i].second, *analytic[i].second, loss, 40, rng,
                                          1e-5, 1e-8);
      CHECK_MESSAGE(r.worst < 1e-8, params[i].first);
    }
  }
}

TEST_CASE("prompt initialisation range and variants") {
  TinyViTConfig model;
  PromptConfig cfg;
  const PromptSet<float> p = make_prompts<float>(cfg, model, 1);
  REQUIRE(p.spatial);
  REQUIRE(p.global);
  CHECK(p.parameter_count() == 105120);
  CHECK(p.spatial->values.cwiseAbs().maxCoeff() <= 0.03f);
  CHECK(p.global->values.cwiseAbs().maxCoeff() <= 0.03f);
  CHECK(p.spatial->values.cwiseAbs().maxCoeff() > 0.02f);
  cfg.variant = PromptVariant::none;
  CHECK(make_prompts<float>(cfg, model, 1).empty());
  CHECK(parse_prompt_variant("sptnet-p") == PromptVariant::spt);
  CHECK(parse_prompt_variant("sptnet-s") == PromptVariant::shared);
  CHECK_THROWS_AS(parse_prompt_variant("bogus"), ConfigError);
}
