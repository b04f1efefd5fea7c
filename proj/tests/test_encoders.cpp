#include <set>

#include "support.hpp"

using namespace nlip;
using nlip::test::check_param_gradients;
using nlip::test::random_matrix;

namespace {

EncoderConfig small_config(int blocks = 1, bool positional = true) {
  EncoderConfig cfg;
  cfg.d_img = 6;
  cfg.patch_count = 8;
  cfg.vocab_size = 20;
  cfg.width = 8;
  cfg.d_embed = 5;
  cfg.blocks = blocks;
  cfg.use_positional = positional;
  cfg.mae_depth = 1;
  cfg.d_dec = 6;
  return cfg;
}

}  // namespace

TEST(MaskPlan, HalfOfSixteen) {
  Matrix grid = random_matrix(16, 4, 1);
  auto [visible, plan] = mask_patches(grid, 0.5, 9);
  EXPECT_EQ(plan.visible.size(), 8u);
  EXPECT_EQ(plan.masked.size(), 8u);
  EXPECT_EQ(visible.rows(), 8);
  for (std::size_t i = 0; i < plan.visible.size(); ++i) EXPECT_EQ(visible.row(i), grid.row(plan.visible[i]));
}

TEST(MaskPlan, ZeroRatioKeepsEverything) {
  auto plan = make_mask_plan(16, 0.0, 3);
  EXPECT_TRUE(plan.masked.empty());
  EXPECT_EQ(plan.visible.size(), 16u);
}

TEST(MaskPlan, PartitionAndDeterminism) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    for (double ratio : {0.1, 0.25, 0.5, 0.75, 0.9}) {
      auto plan = make_mask_plan(13, ratio, seed);
      EXPECT_EQ(plan.masked.size(), static_cast<std::size_t>(std::lround(ratio * 13)));
      std::set<int> all(plan.visible.begin(), plan.visible.end());
      for (int m : plan.masked) EXPECT_TRUE(all.insert(m).second) << "overlap at " << m;
      EXPECT_EQ(all.size(), 13u);
      EXPECT_EQ(*all.begin(), 0);
      EXPECT_EQ(*all.rbegin(), 12);
      EXPECT_EQ(plan, make_mask_plan(13, ratio, seed));
    }
  }
}

TEST(MaskPlan, MaskedPositionsAreRoughlyUniform) {
  std::vector<int> hits(8, 0);
  const int draws = 8000;
  for (int s = 0; s < draws; ++s)
    for (int m : make_mask_plan(8, 0.5, static_cast<std::uint64_t>(s)).masked) ++hits[m];
  // each position is masked with probability 1/2; 4 sigma band
  const double sigma = std::sqrt(draws * 0.25);
  for (int h : hits) EXPECT_NEAR(h, draws / 2.0, 4 * sigma);
}

TEST(MaskPlan, BadRatioIsRangeError) {
  Matrix grid = random_matrix(4, 2, 1);
  EXPECT_THROW(mask_patches(grid, 1.0, 0), RangeError);
  EXPECT_THROW(mask_patches(grid, -0.1, 0), RangeError);
}

TEST(SpanMask, ZeroLambdaLeavesCaption) {
  TokenSeq c = {1, 4, 5, 6, 13, 7, 14, 2};
  EXPECT_EQ(span_mask_text(c, 0.0, 1), c);
}

TEST(SpanMask, ReplacesSpanByOneMask) {
  TokenSeq c = {10, 11, 12, 13, 14, 15, 16, 17, 18, 19};
  TokenSeq out = mask_span_at(c, 4, 3);
  EXPECT_EQ(out, (TokenSeq{10, 11, 12, 13, TokenVocab::kMask, 17, 18, 19}));
  EXPECT_EQ(out.size(), 8u);
  EXPECT_EQ(mask_span_at(c, 2, 0), c);
  EXPECT_THROW(mask_span_at(c, 8, 3), RangeError);
}

TEST(SpanMask, DeterministicInSeed) {
  TokenSeq c = {10, 11, 12, 13, 14, 15, 16, 17, 18, 19};
  EXPECT_EQ(span_mask_text(c, 3.0, 5), span_mask_text(c, 3.0, 5));
}

TEST(SpanMask, PoissonMeanSpanLength) {
  TokenSeq c(77);
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = static_cast<TokenId>(10 + i % 5);
  const int n = 100000;
  double sum = 0.0;
  for (int s = 0; s < n; ++s) {
    TokenSeq out = span_mask_text(c, 3.0, static_cast<std::uint64_t>(s));
    // an untouched caption means length 0; otherwise the span collapsed to one token
    const double len = out == c ? 0.0 : static_cast<double>(c.size() - out.size() + 1);
    sum += len;
  }
  EXPECT_NEAR(sum / n, 3.0, 3.0 * std::sqrt(3.0) / std::sqrt(static_cast<double>(n)));
}

TEST(SpanMask, SpanNeverExceedsCaption) {
  TokenSeq c = {5, 6};
  for (std::uint64_t s = 0; s < 500; ++s) {
    TokenSeq out = span_mask_text(c, 10.0, s);
    EXPECT_GE(out.size(), 1u);
    EXPECT_LE(out.size(), 2u);
  }
}

TEST(ImageEncoder, BlockFreeSinglePatchIsProjectedPatch) {
  ParamStore store;
  auto cfg = small_config(0, false);
  cfg.patch_count = 1;
  auto enc = ImageEncoder::create(store, cfg, 4);
  auto world = generate_world(4, cfg.d_img, 2);
  Matrix patch = world.signatures.row(1);
  auto plan = make_mask_plan(1, 0.0, 0);
  auto e = encode_image(store, enc, patch, plan);
  // oracle: proj * (W x + b), then unit norm
  RowVector embedded = patch * store[store.id("image.patch_embed.weight")].transpose();
  embedded += store[store.id("image.patch_embed.bias")].row(0);
  RowVector projected = embedded * store[store.id("image.proj.weight")].transpose();
  RowVector expect = projected / projected.norm();
  EXPECT_LT((e.global - expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(e.global.norm(), 1.0, 1e-12);
}

TEST(ImageEncoder, IdenticalInputsIdenticalOutputs) {
  ParamStore store;
  auto enc = ImageEncoder::create(store, small_config(2), 4);
  Matrix grid = random_matrix(8, 6, 3);
  auto [visible, plan] = mask_patches(grid, 0.5, 1);
  auto a = encode_image(store, enc, visible, plan);
  auto b = encode_image(store, enc, visible, plan);
  EXPECT_EQ(a.global, b.global);
  EXPECT_EQ(a.token_states, b.token_states);
  EXPECT_EQ(a.token_states.rows(), 4);
  EXPECT_NEAR(a.global.norm(), 1.0, 1e-6);
}

TEST(ImageEncoder, PermutationInvariantWithoutPositions) {
  for (int blocks : {1, 2}) {
    ParamStore store;
    auto enc = ImageEncoder::create(store, small_config(blocks, false), 4);
    Matrix grid = random_matrix(8, 6, 5);
    auto plan = make_mask_plan(8, 0.0, 0);
    auto a = encode_image(store, enc, grid, plan);
    std::vector<int> perm = {3, 7, 0, 5, 1, 6, 2, 4};
    auto b = encode_image(store, enc, gather_rows(grid, perm), plan);
    EXPECT_LT((a.global - b.global).cwiseAbs().maxCoeff(), 1e-12) << "blocks " << blocks;
  }
}

TEST(ImageEncoder, PositionsBreakPermutationInvariance) {
  ParamStore store;
  auto enc = ImageEncoder::create(store, small_config(1, true), 4);
  Matrix grid = random_matrix(8, 6, 5);
  auto plan = make_mask_plan(8, 0.0, 0);
  auto a = encode_image(store, enc, grid, plan);
  auto b = encode_image(store, enc, gather_rows(grid, {3, 7, 0, 5, 1, 6, 2, 4}), plan);
  EXPECT_GT((a.global - b.global).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(ImageEncoder, ShapeMismatchIsShapeError) {
  ParamStore store;
  auto enc = ImageEncoder::create(store, small_config(1), 4);
  auto plan = make_mask_plan(8, 0.5, 0);
  EXPECT_THROW(encode_image(store, enc, random_matrix(5, 6, 1), plan), ShapeError);
  EXPECT_THROW(encode_image(store, enc, random_matrix(4, 7, 1), plan), ShapeError);
}

TEST(ImageEncoder, HalfMaskHalvesBlockEvaluations) {
  ParamStore store;
  auto cfg = small_config(2);
  cfg.patch_count = 16;
  auto enc = ImageEncoder::create(store, cfg, 4);
  const auto full = enc.block_evaluations(make_mask_plan(16, 0.0, 0));
  const auto half = enc.block_evaluations(make_mask_plan(16, 0.5, 0));
  EXPECT_EQ(full, 32u);
  EXPECT_EQ(half * 2, full);
}

TEST(IrLoss, OppositeUnitVectorsGiveFour) {
  Matrix pred(1, 2), target(1, 2);
  pred << -1.0, 0.0;
  target << 1.0, 0.0;
  // guarded norms shift the value by O(1e-8)
  EXPECT_NEAR(ir_loss(pred, target).loss, 4.0, 1e-7);
}

TEST(IrLoss, ExactPredictionGivesZero) {
  Matrix target = random_matrix(3, 4, 2);
  Matrix pred = target;
  for (Eigen::Index i = 0; i < pred.rows(); ++i) pred.row(i) *= 2.5;
  EXPECT_NEAR(ir_loss(pred, target).loss, 0.0, 1e-14);
}

TEST(IrLoss, ZeroTargetIsFinite) {
  Matrix pred = random_matrix(1, 3, 2);
  Matrix target = Matrix::Zero(1, 3);
  auto l = ir_loss(pred, target);
  EXPECT_TRUE(std::isfinite(l.loss));
  EXPECT_TRUE(l.d_pred.allFinite());
}

TEST(IrLoss, GradientMatchesDifferences) {
  Matrix pred = random_matrix(3, 4, 7);
  Matrix target = random_matrix(3, 4, 8);
  auto l = ir_loss(pred, target);
  auto r = nlip::test::check_matrix_gradient(pred, l.d_pred, [&] { return ir_loss(pred, target).loss; });
  EXPECT_LT(r.max_rel, 1e-6) << r.worst;
}

TEST(IrLoss, EmptyMaskedSetIsZero) {
  ParamStore store;
  auto cfg = small_config(1);
  auto enc = ImageEncoder::create(store, cfg, 4);
  auto mae = MaeDecoder::create(store, cfg, 4);
  Matrix grid = random_matrix(8, 6, 3);
  auto plan = make_mask_plan(8, 0.0, 0);
  auto e = encode_image(store, enc, grid, plan);
  Gradients g = store.make_gradients();
  auto r = reconstruct_and_ir_loss(store, &g, mae, e.token_states, plan, grid);
  EXPECT_EQ(r.loss, 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g.at(i).squaredNorm(), 0.0);
}

TEST(EncoderGradients, ImageTowerThroughReconstruction) {
  for (int blocks : {0, 1}) {
    ParamStore store;
    auto cfg = small_config(blocks);
    auto enc = ImageEncoder::create(store, cfg, 4);
    auto mae = MaeDecoder::create(store, cfg, 4);
    Matrix grid = random_matrix(8, 6, 3);
    auto [visible, plan] = mask_patches(grid, 0.5, 2);
    RowVector probe = random_matrix(1, cfg.d_embed, 9);

    // loss = IR + probe . global, so both the state and the global paths are exercised
    auto loss = [&] {
      auto e = encode_image(store, enc, visible, plan);
      return reconstruct_and_ir_loss(store, nullptr, mae, e.token_states, plan, grid).loss + probe.dot(e.global);
    };
    Gradients g = store.make_gradients();
    ImageEncoder::Cache cache;
    auto e = enc.forward(store, visible, plan, cache);
    auto ir = reconstruct_and_ir_loss(store, &g, mae, e.token_states, plan, grid);
    enc.backward(store, g, cache, probe, ir.d_states);

    auto r = check_param_gradients(store, g, loss);
    EXPECT_LT(r.max_rel, 1e-5) << "blocks " << blocks << ": " << r.worst;
  }
}

TEST(EncoderGradients, TextTower) {
  ParamStore store;
  auto cfg = small_config(2);
  auto enc = TextEncoder::create(store, cfg, 4);
  TokenSeq tokens = {1, 4, 5, 6, 13, 7, 13, 2};
  RowVector probe = random_matrix(1, cfg.d_embed, 9);
  Matrix state_probe = random_matrix(8, cfg.width, 10);
  auto loss = [&] {
    auto e = encode_text(store, enc, tokens);
    return probe.dot(e.global) + (state_probe.array() * e.token_states.array()).sum();
  };
  Gradients g = store.make_gradients();
  TextEncoder::Cache cache;
  enc.forward(store, tokens, cache);
  enc.backward(store, g, cache, probe, state_probe);
  // the state probe makes the loss O(10), so difference noise is larger too
  auto r = check_param_gradients(store, g, loss, nullptr, 1e-6, 1e-3);
  EXPECT_LT(r.max_rel, 1e-5) << r.worst;
}

TEST(TextEncoder, LengthLimit) {
  ParamStore store;
  auto enc = TextEncoder::create(store, small_config(1), 4);
  EXPECT_NO_THROW(encode_text(store, enc, TokenSeq(77, 4)));
  EXPECT_THROW(encode_text(store, enc, TokenSeq(78, 4)), RangeError);
  EXPECT_THROW(encode_text(store, enc, TokenSeq{1, 99, 2}), ContractError);
}

TEST(TextEncoder, UnitNormAndDeterministic) {
  ParamStore store;
  auto enc = TextEncoder::create(store, small_config(2), 4);
  Rng rng = make_rng(3, "tokens");
  for (int trial = 0; trial < 20; ++trial) {
    TokenSeq t(1 + uniform_index(rng, 20));
    for (auto& x : t) x = static_cast<TokenId>(uniform_index(rng, 20));
    auto a = encode_text(store, enc, t);
    EXPECT_NEAR(a.global.norm(), 1.0, 1e-6);
    EXPECT_EQ(a.global, encode_text(store, enc, t).global);
  }
}
