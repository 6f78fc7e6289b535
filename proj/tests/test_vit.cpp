#include <doctest.h>

#include <numeric>

#include "sptnet/vit.hpp"
#include "support.hpp"

using namespace sptnet;

namespace {

TinyViTConfig tiny() {
  TinyViTConfig c;
  c.image_h = c.image_w = 12;
  c.patch_h = c.patch_w = 4;
  c.depth = 2;
  c.dim = 8;
  c.heads = 2;
  c.proj_dim = 6;
  c.num_prototypes = 3;
  return c;
}

PatchGrid<double> random_patches(Rng& rng, const TinyViTConfig& c, Index batch) {
  ImageBatch<double> img(batch, c.image_h, c.image_w);
  img.data = oracle::random_matrix(rng, batch, img.pixels_per_image(), -1, 1);
  return patchify(img, c.patch_h, c.patch_w);
}

}  // namespace

TEST_CASE("forward output shapes and ranges") {
  const TinyViTConfig c = tiny();
  Rng rng(1);
  const auto model = init_model<double>(c, 2);
  const auto out = forward(model, random_patches(rng, c, 5));
  CHECK(out.features.rows() == 5);
  CHECK(out.features.cols() == 6);
  CHECK(out.logits.cols() == 3);
  for (Index r = 0; r < 5; ++r) CHECK(out.features.row(r).norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(out.logits.cwiseAbs().maxCoeff() <= 1.0 + 1e-12);
}

TEST_CASE("initialisation is deterministic per seed") {
  const TinyViTConfig c = tiny();
  const auto a = init_model<float>(c, 9), b = init_model<float>(c, 9), d = init_model<float>(c, 10);
  std::vector<std::uint64_t> ha, hb, hd;
  a.visit([&](const std::string&, const Matrix<float>& t) { ha.push_back(hash_tensor(t)); });
  b.visit([&](const std::string&, const Matrix<float>& t) { hb.push_back(hash_tensor(t)); });
  d.visit([&](const std::string&, const Matrix<float>& t) { hd.push_back(hash_tensor(t)); });
  CHECK(ha == hb);
  CHECK(ha != hd);
}

TEST_CASE("trainable groups follow the config") {
  TinyViTConfig c = tiny();
  CHECK_FALSE(is_trainable(c, "patch_embed.weight"));
  CHECK_FALSE(is_trainable(c, "pos_embed"));
  CHECK_FALSE(is_trainable(c, "blocks.0.qkv.weight"));
  CHECK(is_trainable(c, "blocks.1.qkv.weight"));
  CHECK(is_trainable(c, "norm.gain"));
  CHECK(is_trainable(c, "head.2.bias"));
  CHECK(is_trainable(c, "prototypes"));
  c.trainable_blocks = 0;
  c.train_final_norm = false;
  CHECK_FALSE(is_trainable(c, "blocks.1.qkv.weight"));
  CHECK_FALSE(is_trainable(c, "norm.gain"));
}

TEST_CASE("config validation") {
  TinyViTConfig c = tiny();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.patch_h = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.trainable_blocks = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("backward matches central differences on every tensor") {
  const TinyViTConfig c = tiny();
  Rng rng(5);
  for (int mode = 0; mode < 3; ++mode) {
    auto model = init_model<double>(c, 3);
    std::optional<VPTPrompts<double>> vpt;
    if (mode > 0) {
      vpt = make_vpt<double>(c, 2, mode == 1);
      for (auto& t : vpt->tokens) t = oracle::random_matrix(rng, t.rows(), t.cols(), -0.5, 0.5);
    }
    PatchGrid<double> patches = random_patches(rng, c, 3);
    const Matrix<double> wf = oracle::random_matrix(rng, 3, c.proj_dim, -1, 1);
    const Matrix<double> wl = oracle::random_matrix(rng, 3, c.num_prototypes, -1, 1);
    const VPTPrompts<double>* vp = vpt ? &*vpt : nullptr;
    auto loss = [&] {
      const auto out = forward(model, patches, vp);
      return out.features.cwiseProduct(wf).sum() + out.logits.cwiseProduct(wl).sum();
    };
    ForwardTrace<double> trace;
    forward(model, patches, vp, &trace);
    ModelGradients<double> grads = make_gradients(model, vp);
    BackwardRequest req;
    req.input_grad = true;
    backward(model, trace, wf, wl, req, grads);

    auto params = oracle::tensors(model);
    auto analytic = oracle::tensors(grads.model);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto r = oracle::check_tensor(params[i].first, *params[i].second, *analytic[i].second, loss, 12, rng,
                                          1e-6, 1e-4);
      CHECK_MESSAGE(r.worst < 1e-4, params[i].first, " mode ", mode, " err ", r.worst);
    }
    const auto rp = oracle::check_tensor("patches", patches.data, grads.patches, loss, 30, rng, 1e-6, 1e-4);
    CHECK_MESSAGE(rp.worst < 1e-4, "patches mode ", mode);
    if (vpt)
      for (std::size_t l = 0; l < vpt->tokens.size(); ++l) {
        const auto rv = oracle::check_tensor("vpt", vpt->tokens[l], grads.vpt[l], loss, 16, rng, 1e-6, 1e-4);
        CHECK_MESSAGE(rv.worst < 1e-4, "vpt layer ", l, " mode ", mode);
      }
  }
}

TEST_CASE("stop_block leaves lower blocks without gradient") {
  const TinyViTConfig c = tiny();
  Rng rng(6);
  const auto model = init_model<double>(c, 3);
  ForwardTrace<double> trace;
  forward<double>(model, random_patches(rng, c, 2), nullptr, &trace);
  ModelGradients<double> grads = make_gradients<double>(model, nullptr);
  BackwardRequest req;
  req.stop_block = 1;
  backward(model, trace, oracle::random_matrix(rng, 2, c.proj_dim, -1, 1),
           oracle::random_matrix(rng, 2, c.num_prototypes, -1, 1), req, grads);
  CHECK(grads.model.blocks[0].qkv.weight.norm() == 0.0);
  CHECK(grads.model.patch_embed.weight.norm() == 0.0);
  CHECK(grads.model.blocks[1].qkv.weight.norm() > 0.0);
  CHECK(grads.model.prototypes.norm() > 0.0);
}

TEST_CASE("top_count rounds up and stays in range") {
  CHECK(top_count(196, 0.1) == 20);
  CHECK(top_count(196, 1.0) == 196);
  CHECK(top_count(16, 0.25) == 4);
  CHECK(top_count(10, 0.01) == 1);
  CHECK_THROWS(top_count(196, 0.0));
  CHECK_THROWS(top_count(196, 1.5));
}

TEST_CASE("attention maps: row sums, cardinality and top patches") {
  TinyViTConfig c = tiny();
  c.image_h = c.image_w = 16;  // 16 patches
  Rng rng(8);
  const auto model = init_model<double>(c, 4);
  const PatchGrid<double> patches = random_patches(rng, c, 2);
  for (AttentionQuery q : {AttentionQuery{}, AttentionQuery{0}, AttentionQuery{15}, AttentionQuery{5}}) {
    for (double f : {0.1, 0.25, 1.0}) {
      const auto maps = extract_attention(model, patches, q, f);
      REQUIRE(maps.size() == 2);
      for (const auto& m : maps) {
        CHECK(m.weights.rows() == c.heads);
        CHECK(m.weights.cols() == 17);
        CHECK(m.mask.cols() == 16);
        for (Index h = 0; h < c.heads; ++h) {
          CHECK(std::abs(m.weights.row(h).sum() - 1.0) < 1e-12);
          CHECK(m.mask.row(h).count() == top_count(16, f));
          // every kept patch is attended at least as much as every dropped one
          double kept_min = 2, dropped_max = -1;
          for (Index p = 0; p < 16; ++p) {
            const double w = m.weights(h, 1 + p);
            if (m.mask(h, p)) kept_min = std::min(kept_min, w);
            else dropped_max = std::max(dropped_max, w);
          }
          CHECK(kept_min >= dropped_max);
        }
      }
    }
  }
}

TEST_CASE("attention ties go to the lower patch index") {
  TinyViTConfig c = tiny();
  auto model = init_model<double>(c, 4);
  // Zero query/key weights give uniform attention over the sequence.
  for (auto& b : model.blocks) {
    b.qkv.weight.topRows(2 * c.dim).setZero();
    b.qkv.bias.leftCols(2 * c.dim).setZero();
  }
  Rng rng(2);
  const auto maps = extract_attention(model, random_patches(rng, c, 1), std::nullopt, 0.25);
  for (Index h = 0; h < c.heads; ++h) {
    CHECK(std::abs(maps[0].weights.row(h).sum() - 1.0) < 1e-12);
    for (Index p = 0; p < 9; ++p) CHECK(maps[0].mask(h, p) == (p < top_count(9, 0.25)));
  }
}
