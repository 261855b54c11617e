#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "pcf/io.hpp"
#include "test_util.hpp"

using namespace pcf;

namespace {

PointCloud scene(std::uint64_t seed, std::size_t n = 300) {
  SynthSceneSpec spec;
  spec.num_points = n;
  spec.seed = seed;
  return generate_scene(spec);
}

const char* kMinimal = "variant = pcf_subtractive\nnum_classes = 3\nepochs = 2\n";

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("pcf_io_" + name)).string();
}

}  // namespace

TEST(CloudFile, RoundTripIsLossless) {
  const PointCloud c = quantize_f32(scene(1));
  const PointCloud back = decode_cloud(encode_cloud(c));
  EXPECT_EQ(back.positions, c.positions);
  EXPECT_EQ(back.features, c.features);
  EXPECT_EQ(back.labels, c.labels);
  EXPECT_EQ(back.channels, c.channels);
  EXPECT_EQ(encode_cloud(back), encode_cloud(c));
}

TEST(CloudFile, HeaderLayout) {
  const PointCloud c = scene(2, 17);
  const std::string bytes = encode_cloud(c);
  EXPECT_EQ(bytes.substr(0, 4), "PCF1");
  EXPECT_EQ(bytes.size(), 4u + 4 + 4 + 4 + 1 + 17 * 3 * 4 + 17 * 4 * 4 + 17 * 4);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 17u);  // N, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 4u);  // c
  EXPECT_EQ(bytes[16], 1);
}

TEST(CloudFile, UnlabelledCloud) {
  const PointCloud c = PointCloud::from_positions({{0.5, 1, 2}, {3, 4, 5}});
  const PointCloud back = decode_cloud(encode_cloud(c));
  EXPECT_FALSE(back.has_labels());
  EXPECT_EQ(back.positions, c.positions);
}

TEST(CloudFile, TruncationReportsOffset) {
  const std::string bytes = encode_cloud(scene(3, 10));
  try {
    decode_cloud(std::string_view(bytes).substr(0, 15));
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 12"), std::string::npos) << e.what();
  }
  try {
    decode_cloud(std::string_view(bytes).substr(0, bytes.size() - 1));
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 17"), std::string::npos) << e.what();
  }
}

TEST(CloudFile, MagicAndVersionChecked) {
  std::string bytes = encode_cloud(scene(4, 5));
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_cloud(bad), IoError);
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(decode_cloud(bad), VersionError);
  EXPECT_THROW(decode_cloud(bytes + "x"), IoError);
}

TEST(CloudFile, SameSeedByteIdenticalFiles) {
  const std::string a = temp_path("a.pcf"), b = temp_path("b.pcf");
  write_cloud(a, scene(5));
  write_cloud(b, scene(5));
  EXPECT_EQ(io_detail::slurp(a), io_detail::slurp(b));
  EXPECT_EQ(read_cloud(a).size(), 300u);
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST(CloudFile, UnwritablePath) {
  EXPECT_THROW(write_cloud("/nonexistent-dir/x.pcf", scene(6, 5)), IoError);
  EXPECT_THROW(read_cloud("/nonexistent-dir/x.pcf"), IoError);
}

TEST(Config, MinimalUsesDefaults) {
  const RunConfig cfg = parse_config(kMinimal);
  EXPECT_EQ(cfg.net.k, 16u);
  EXPECT_EQ(cfg.net.heads, 8u);
  EXPECT_EQ(cfg.train.epochs, 2u);
  EXPECT_DOUBLE_EQ(cfg.train.initial_lr, 0.001);
}

TEST(Config, MissingKeyIsNamed) {
  try {
    parse_config("variant = pointconv\nepochs = 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("num_classes"), std::string::npos) << e.what();
  }
}

TEST(Config, UnknownKeyRejected) {
  EXPECT_THROW(parse_config(std::string(kMinimal) + "hedas = 4\n"), ConfigError);
}

TEST(Config, BadValuesRejected) {
  EXPECT_THROW(parse_config(std::string(kMinimal) + "k = -3\n"), ConfigError);
  EXPECT_THROW(parse_config(std::string(kMinimal) + "base_grid = fast\n"), ConfigError);
  EXPECT_THROW(parse_config(std::string(kMinimal) + "use_norm = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config(std::string(kMinimal) + "epochs = 4\n"), ConfigError);  // repeated
  EXPECT_THROW(parse_config(std::string(kMinimal) + "just words\n"), ConfigError);
  EXPECT_THROW(parse_config(std::string(kMinimal) + "class_weights = 1,2\n"), ConfigError);
  EXPECT_THROW(parse_config("variant = conv\nnum_classes = 3\nepochs = 1\n"), ConfigError);
}

TEST(Config, VersionMismatch) {
  EXPECT_THROW(parse_config(std::string(kMinimal) + "version = 2\n"), VersionError);
  EXPECT_NO_THROW(parse_config(std::string(kMinimal) + "version = 1\n"));
}

TEST(Config, CommentsAndWhitespace) {
  const RunConfig cfg = parse_config(
      "# run\n  variant=pointconv   # trailing\n\nnum_classes = 2\nepochs = 7\n"
      "blocks_per_level = 1, 2 ,3\nlevels = 3\nclass_weights = 0.5,2\n");
  EXPECT_EQ(cfg.net.variant, Variant::pointconv);
  EXPECT_EQ(cfg.net.blocks_per_level, (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(cfg.train.class_weights, (std::vector<double>{0.5, 2.0}));
}

TEST(Config, ResolvedTextRoundTrips) {
  RunConfig cfg = parse_config(std::string(kMinimal) + "base_grid = 0.07\nseed = 42\nactivation = softmax\n");
  const std::string text = config_to_text(cfg);
  EXPECT_EQ(config_to_text(parse_config(text)), text);
  EXPECT_NE(text.find("base_grid = 0.07\n"), std::string::npos);
  EXPECT_NE(text.find("seed = 42\n"), std::string::npos);
  EXPECT_NE(text.find("k = 16\n"), std::string::npos);
}

namespace {

RunConfig tiny_run() {
  return parse_config(
      "variant = pcf_subtractive\nnum_classes = 3\nepochs = 1\nlevels = 2\nblocks_per_level = 1,1\n"
      "base_width = 16\nheads = 4\nc_mid = 4\nk = 6\nbase_grid = 0.2\n");
}

}  // namespace

TEST(Checkpoint, RoundTripPreservesOutputs) {
  const RunConfig cfg = tiny_run();
  Rng rng(3);
  UNet net = UNet::create(cfg.net, rng);
  // Move the running stats off their defaults so buffers are exercised too.
  const Hierarchy h = build_hierarchy(scene(7, 200), cfg.net);
  unet_forward(h, net, Mode::train);

  const std::string bytes = encode_checkpoint(net, cfg);
  const Checkpoint ck = decode_checkpoint(bytes);
  EXPECT_EQ(config_to_text(ck.config), config_to_text(cfg));
  const Tensor a = unet_forward(h, net), b = unet_forward(h, ck.net);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  EXPECT_EQ(encode_checkpoint(ck.net, ck.config), bytes);
}

TEST(Checkpoint, VersionAndTruncation) {
  const RunConfig cfg = tiny_run();
  Rng rng(4);
  const std::string bytes = encode_checkpoint(UNet::create(cfg.net, rng), cfg);
  std::string bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(decode_checkpoint(bad), VersionError);
  EXPECT_THROW(decode_checkpoint(std::string_view(bytes).substr(0, bytes.size() / 2)), IoError);
  bad = bytes;
  bad[0] = 'Q';
  EXPECT_THROW(decode_checkpoint(bad), IoError);
}
