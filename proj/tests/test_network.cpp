#include <gtest/gtest.h>
#include <set>

#include "pcf/gradcheck.hpp"
#include "pcf/network.hpp"
#include "test_util.hpp"

using namespace pcf;
using pcf::testing::dyadic_cloud;
using pcf::testing::kLayerStep;
using pcf::testing::probe_loss;
using pcf::testing::random_cloud;
using pcf::testing::random_tensor;
using pcf::testing::translated;

namespace {

void fill(Tensor& t, double v) {
  for (double& x : t.mutable_data()) x = v;
}

BlockSpec block_spec(std::size_t in, std::size_t out, ShortcutKind sc,
                     Variant v = Variant::pcf_subtractive) {
  BlockSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.shortcut = sc;
  s.op.c_mid = 4;
  s.op.heads = 2;
  s.op.variant = v;
  s.post_relu = false;
  return s;
}

void zero_branch(BlockParams& b) {
  fill(b.lin2.weight, 0.0);
  fill(b.lin2.bias, 0.0);
}

NetConfig small_net(Variant v = Variant::pcf_subtractive) {
  NetConfig cfg;
  cfg.in_channels = 3;
  cfg.num_classes = 3;
  cfg.levels = 2;
  cfg.base_width = 8;
  cfg.base_grid = 0.15;
  cfg.blocks_per_level = {1, 1};
  cfg.k = 4;
  cfg.heads = 2;
  cfg.c_mid = 4;
  cfg.variant = v;
  cfg.use_norm = false;
  return cfg;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(ResidualBlock, ZeroBranchIdentityShortcutIsIdentity) {
  Rng rng(1);
  const PointCloud c = random_cloud(30, 8, rng);
  BlockParams b = BlockParams::create(block_spec(8, 8, ShortcutKind::identity), rng);
  zero_branch(b);
  const Tensor x = c.feature_tensor();
  const Tensor y = residual_block(x, knn(c, c, 5), b);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(ResidualBlock, IdentityLinearShortcutWithZeroBranch) {
  Rng rng(2);
  const PointCloud c = random_cloud(30, 8, rng);
  BlockParams b = BlockParams::create(block_spec(8, 8, ShortcutKind::linear), rng);
  zero_branch(b);
  fill(b.shortcut.weight, 0.0);
  fill(b.shortcut.bias, 0.0);
  for (std::size_t i = 0; i < 8; ++i) b.shortcut.weight.mutable_data()[i * 8 + i] = 1.0;
  const Tensor x = c.feature_tensor();
  const Tensor y = residual_block(x, knn(c, c, 5), b);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(ResidualBlock, PostReluRectifies) {
  Rng rng(3);
  const PointCloud c = random_cloud(20, 8, rng);
  BlockSpec spec = block_spec(8, 8, ShortcutKind::identity);
  spec.post_relu = true;
  BlockParams b = BlockParams::create(spec, rng);
  zero_branch(b);
  const Tensor x = c.feature_tensor();
  const Tensor y = residual_block(x, knn(c, c, 5), b);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], std::max(x[i], 0.0));
}

TEST(ResidualBlock, ShortcutContracts) {
  Rng rng(4);
  EXPECT_THROW(BlockParams::create(block_spec(8, 16, ShortcutKind::identity), rng), ConfigError);
  const PointCloud fine = random_cloud(40, 8, rng);
  const PointCloud coarse = grid_subsample(fine, 0.5).first;
  const BlockParams b = BlockParams::create(block_spec(8, 8, ShortcutKind::identity), rng);
  EXPECT_THROW(residual_block(fine.feature_tensor(), knn(fine, coarse, 4), b), ConfigError);
}

TEST(ResidualBlock, BottleneckWidthMustSplitIntoHeads) {
  Rng rng(5);
  BlockSpec spec = block_spec(8, 8, ShortcutKind::identity);
  spec.op.heads = 4;  // bottleneck width 2
  EXPECT_THROW(BlockParams::create(spec, rng), ConfigError);
}

TEST(ResidualBlock, GradCheckSameCloud) {
  Rng rng(6);
  const PointCloud c = random_cloud(16, 8, rng);
  const Neighborhood nbr = knn(c, c, 4);
  for (Variant v : {Variant::pointconv, Variant::pcf_subtractive, Variant::pcf_qkv}) {
    const BlockParams b = BlockParams::create(block_spec(8, 8, ShortcutKind::linear, v), rng);
    const Tensor x = random_tensor({16, 8}, rng);
    const Tensor w = random_tensor({16, 8}, rng, false);
    std::vector<NamedTensor> named;
    b.collect("b", named);
    std::vector<Tensor> params{x};
    for (auto& n : named) params.push_back(n.tensor);
    EXPECT_LT(grad_check([&] { return probe_loss(residual_block(x, nbr, b), w); }, params, kLayerStep),
              1e-4)
        << to_string(v);
  }
}

TEST(ResidualBlock, GradCheckDownsampling) {
  Rng rng(7);
  const PointCloud fine = random_cloud(24, 8, rng);
  const auto [coarse, pooling] = grid_subsample(fine, 0.5);
  const Neighborhood nbr = knn(fine, coarse, 4);
  BlockSpec spec = block_spec(8, 16, ShortcutKind::maxpool_linear);
  spec.use_norm = true;
  const BlockParams b = BlockParams::create(spec, rng);
  const Tensor x = random_tensor({24, 8}, rng);
  const Tensor w = random_tensor({coarse.size(), 16}, rng, false);
  std::vector<NamedTensor> named;
  b.collect("b", named);
  std::vector<Tensor> params{x};
  for (auto& n : named)
    if (n.trainable) params.push_back(n.tensor);
  // Eval mode: running statistics make the norm a fixed affine map.
  EXPECT_LT(grad_check([&] { return probe_loss(residual_block(x, nbr, b, Mode::eval, nullptr, &pooling), w); },
                       params, kLayerStep),
            1e-4);
  EXPECT_THROW(residual_block(x, nbr, b), ConfigError);
}

TEST(DownsampleShortcut, SingleSlotIsGatherThenLinear) {
  Rng rng(8);
  const PointCloud fine = random_cloud(20, 3, rng);
  const PointCloud coarse = grid_subsample(fine, 0.4).first;
  const Neighborhood nbr = knn(fine, coarse, 1);
  const Linear proj = Linear::create(3, 5, rng);
  const Tensor y = downsample_shortcut(fine.feature_tensor(), nbr, proj);
  for (std::size_t n = 0; n < coarse.size(); ++n) {
    const auto expect = proj.apply(fine.feature_row(nbr.indices(n, 0)));
    for (std::size_t o = 0; o < 5; ++o) EXPECT_NEAR(y[n * 5 + o], expect[o], 1e-15);
  }
}

TEST(DownsampleShortcut, ConstantFeaturesPoolToConstant) {
  Rng rng(9);
  PointCloud fine = random_cloud(30, 2, rng);
  std::fill(fine.features.begin(), fine.features.end(), 0.75);
  const PointCloud coarse = grid_subsample(fine, 0.5).first;
  Linear proj = Linear::create(2, 2, rng);
  fill(proj.weight, 0.0);
  fill(proj.bias, 0.0);
  proj.weight.mutable_data()[0] = proj.weight.mutable_data()[3] = 1.0;
  const Tensor y = downsample_shortcut(fine.feature_tensor(), knn(fine, coarse, 6), proj);
  for (double v : y.data()) EXPECT_EQ(v, 0.75);
}

TEST(DownsampleShortcut, MatchesScalarLoop) {
  Rng rng(10);
  const PointCloud fine = random_cloud(60, 4, rng);
  const PointCloud coarse = grid_subsample(fine, 0.35).first;
  const Neighborhood nbr = knn(fine, coarse, 7);
  const Linear proj = Linear::create(4, 6, rng);
  const Tensor y = downsample_shortcut(fine.feature_tensor(), nbr, proj);
  for (std::size_t n = 0; n < coarse.size(); ++n) {
    std::vector<double> pooled(4, -1e300);
    for (std::size_t j = 0; j < 7; ++j)
      for (std::size_t c = 0; c < 4; ++c)
        pooled[c] = std::max(pooled[c], fine.features[nbr.indices(n, j) * 4 + c]);
    const auto expect = proj.apply(pooled);
    for (std::size_t o = 0; o < 6; ++o) EXPECT_NEAR(y[n * 6 + o], expect[o], 1e-14);
  }
}

TEST(Deconv, SelfSingleSlotIsPerPointConv) {
  Rng rng(11);
  const PointCloud c = random_cloud(25, 4, rng);
  PcfLayerConfig cfg;
  cfg.c_in = 4;
  cfg.c_out = 3;
  cfg.c_mid = 4;
  cfg.heads = 1;
  cfg.variant = Variant::pointconv;
  const PcfParams p = PcfParams::create(cfg, rng);
  const Neighborhood nbr = knn(c, c, 1);
  const Tensor y = pointconv_deconv(c.feature_tensor(), nbr, p);
  // h(0) is shared by every point, so each row is x_n . W(h(0)).
  const auto h0 = p.pos_mlp.apply(std::vector<double>{0, 0, 0});
  for (std::size_t n = 0; n < 25; ++n)
    for (std::size_t o = 0; o < 3; ++o) {
      double expect = 0;
      for (std::size_t m = 0; m < 4; ++m)
        for (std::size_t i = 0; i < 4; ++i)
          expect += p.weight[(m * 4 + i) * 3 + o] * h0[m] * c.features[n * 4 + i];
      EXPECT_NEAR(y[n * 3 + o], expect, 1e-13);
    }
}

TEST(Deconv, CrossCloudMatchesNaiveAndIgnoresTranslation) {
  Rng rng(12);
  const PointCloud fine = dyadic_cloud(90, 0, rng);
  PointCloud coarse = grid_subsample(dyadic_cloud(90, 6, rng), 0.25).first;
  PcfLayerConfig cfg;
  cfg.c_in = 6;
  cfg.c_out = 5;
  cfg.c_mid = 8;
  cfg.heads = 1;
  cfg.variant = Variant::pointconv;
  const PcfParams p = PcfParams::create(cfg, rng);
  const Tensor src = coarse.feature_tensor();
  const Neighborhood up = knn(coarse, fine, 6);
  const Tensor y = pointconv_deconv(src, up, p);
  EXPECT_EQ(y.dim(0), fine.size());
  EXPECT_LT(max_relative_difference(y, pcf_forward_naive(src, Tensor::zeros({fine.size(), 6}), up, p)),
            1e-10);
  const Vec3 t{-4.0, 0.5, 2.25};
  const Neighborhood up2 = knn(translated(coarse, t), translated(fine, t), 6);
  EXPECT_EQ(up2.indices, up.indices);
  // Barycenters are not dyadic, so offsets agree to rounding only.
  EXPECT_LT(max_abs_diff(pointconv_deconv(src, up2, p), y), 1e-12);
}

TEST(Norm, TrainModeStandardizesAndTracksStatistics) {
  Rng rng(13);
  const Norm n = Norm::create(3);
  const Tensor x = random_tensor({40, 3}, rng, false, 2, 5);
  const Tensor y = n(x, Mode::train);
  for (std::size_t j = 0; j < 3; ++j) {
    double m = 0;
    for (std::size_t r = 0; r < 40; ++r) m += y[r * 3 + j];
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_GT(n.running_mean[j], 0.2);  // moved 10% toward a mean in [2, 5]
  }
  const Norm fresh = Norm::create(3);
  const Tensor e = fresh(x, Mode::eval);  // zero mean, unit variance buffers
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(e[i], x[i] / std::sqrt(1 + 1e-5), 1e-15);
}

TEST(Hierarchy, LevelsCoarsenAndMapInputs) {
  Rng rng(14);
  NetConfig cfg = small_net();
  cfg.levels = 3;
  cfg.blocks_per_level = {1, 1, 1};
  const PointCloud c = random_cloud(300, 3, rng);
  const Hierarchy h = build_hierarchy(c, cfg);
  ASSERT_EQ(h.levels.size(), 3u);
  EXPECT_LT(h.levels[1].cloud.size(), h.levels[0].cloud.size());
  EXPECT_LT(h.levels[2].cloud.size(), h.levels[1].cloud.size());
  const auto map = h.input_to_level(2);
  ASSERT_EQ(map.size(), 300u);
  for (std::size_t i : map) EXPECT_LT(i, h.levels[2].cloud.size());
  EXPECT_EQ(h.levels[1].down_nbr.queries(), h.levels[1].cloud.size());
  EXPECT_EQ(h.levels[1].up_nbr.queries(), h.levels[0].cloud.size());
}

TEST(Hierarchy, RejectsWrongChannelsAndBadConfig) {
  Rng rng(15);
  EXPECT_THROW(build_hierarchy(random_cloud(10, 2, rng), small_net()), DimensionError);
  NetConfig cfg = small_net();
  cfg.levels = 1;
  cfg.blocks_per_level = {1};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_net();
  cfg.blocks_per_level = {1, 1, 1};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(UNet, OneRowPerInputPointAndDecoderCardinality) {
  Rng rng(16);
  NetConfig cfg = small_net();
  cfg.levels = 3;
  cfg.blocks_per_level = {1, 2, 1};
  const UNet net = UNet::create(cfg, rng);
  const PointCloud c = random_cloud(200, 3, rng);
  const Hierarchy h = build_hierarchy(c, cfg);
  ForwardTrace trace;
  const Tensor logits = unet_forward(h, net, Mode::eval, &trace);
  EXPECT_EQ(logits.shape(), (Shape{200, 3}));
  ASSERT_EQ(trace.decoder_rows.size(), 3u);
  EXPECT_EQ(trace.decoder_rows[0], h.levels[1].cloud.size());
  EXPECT_EQ(trace.decoder_rows[1], h.levels[0].cloud.size());
  EXPECT_EQ(trace.decoder_rows[2], c.size());
  EXPECT_EQ(trace.block_scores.size(), 4u);
  EXPECT_EQ(net.score_layers(), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(net.layer_names().size(), 7u);
}

TEST(UNet, TinyCloudUsesEffectiveK) {
  Rng rng(17);
  const UNet net = UNet::create(small_net(), rng);
  const Tensor logits = unet_forward(random_cloud(3, 3, rng), net);
  EXPECT_EQ(logits.dim(0), 3u);
}

TEST(UNet, GradCheckTwoLevels) {
  Rng rng(18);
  const NetConfig cfg = small_net();
  const UNet net = UNet::create(cfg, rng);
  const PointCloud c = random_cloud(32, 3, rng);
  const Hierarchy h = build_hierarchy(c, cfg);
  ASSERT_GT(h.levels[0].cloud.size(), h.levels[1].cloud.size());
  const Tensor w = random_tensor({32, 3}, rng, false);
  std::vector<Tensor> params = net.parameters();
  EXPECT_LT(grad_check([&] { return probe_loss(unet_forward(h, net), w); }, params, kLayerStep), 1e-4);
}

TEST(UNet, TranslationInvariance) {
  Rng rng(19);
  NetConfig cfg = small_net();
  cfg.levels = 3;
  cfg.blocks_per_level = {1, 1, 1};
  cfg.use_norm = true;
  for (Variant v : {Variant::pointconv, Variant::pcf_subtractive, Variant::pcf_qkv,
                    Variant::attention_baseline}) {
    cfg.variant = v;
    const UNet net = UNet::create(cfg, rng);
    const PointCloud c = random_cloud(256, 3, rng);
    const Tensor a = unet_forward(c, net);
    const Tensor b = unet_forward(translated(c, {0.7310585786, -12.345678, 3.14159265}), net);
    EXPECT_LT(max_abs_diff(a, b), 1e-9) << to_string(v);
    const Tensor d = unet_forward(translated(c, {8.0, -0.5, 1024.25}), net);
    EXPECT_LT(max_abs_diff(a, d), 1e-9) << to_string(v);
  }
}

TEST(UNet, ZeroResidualBranchesLeaveOnlyShortcutPaths) {
  Rng rng(20);
  NetConfig cfg = small_net();
  cfg.levels = 3;
  cfg.blocks_per_level = {2, 1, 1};
  UNet net = UNet::create(cfg, rng);
  for (auto& level : net.blocks)
    for (auto& b : level) zero_branch(b);
  const PointCloud c = random_cloud(150, 3, rng);
  const Hierarchy h = build_hierarchy(c, cfg);
  const Tensor before = unet_forward(h, net);
  // Operator parameters no longer reach the logits.
  for (auto& level : net.blocks)
    for (auto& b : level) {
      for (Tensor t : b.op.parameters()) fill(t, 0.37);
      fill(b.lin1.weight, -0.2);
    }
  const Tensor after = unet_forward(h, net);
  EXPECT_TRUE(std::equal(before.data().begin(), before.data().end(), after.data().begin()));
}

TEST(UNet, NamedTensorsAreUnique) {
  Rng rng(21);
  NetConfig cfg = small_net();
  cfg.use_norm = true;
  const UNet net = UNet::create(cfg, rng);
  std::set<std::string> names;
  std::size_t buffers = 0;
  for (const auto& n : net.named_tensors()) {
    EXPECT_TRUE(names.insert(n.name).second) << n.name;
    buffers += n.trainable ? 0 : 1;
  }
  EXPECT_GT(buffers, 0u);
  EXPECT_EQ(net.parameters().size() + buffers, names.size());
}
