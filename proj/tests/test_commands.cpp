#include <gtest/gtest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pcf/commands.hpp"

using namespace pcf;
namespace fs = std::filesystem;

namespace {

// A scratch directory per test, removed afterwards.
class Workdir {
 public:
  explicit Workdir(const std::string& name) : path_(fs::temp_directory_path() / ("pcf_cmd_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~Workdir() { fs::remove_all(path_); }
  std::string operator/(const std::string& leaf) const { return (path_ / leaf).string(); }

 private:
  fs::path path_;
};

const char* kTinyConfig =
    "variant = pcf_subtractive\nnum_classes = 3\nepochs = 2\nlevels = 2\nblocks_per_level = 1,1\n"
    "base_width = 16\nbase_grid = 0.1\nk = 8\nheads = 4\nc_mid = 8\n";

void write_text(const std::string& path, const std::string& text) { io_detail::dump(path, text); }

void gen(const std::string& out, std::size_t count, std::uint64_t seed, std::size_t n = 600) {
  cmd::GenOptions g;
  g.spec.num_points = n;
  g.spec.seed = seed;
  g.count = count;
  g.out = out;
  cmd::gen_data(g);
}

struct Trained {
  std::string csv;
  TrainReport report;
};

Trained train_tiny(const Workdir& w, const std::string& config, const std::string& ckpt) {
  write_text(w / "run.cfg", config);
  cmd::TrainOptions t{w / "run.cfg", w / "train", w / "eval", ckpt};
  std::ostringstream out, log;
  Trained r;
  r.report = cmd::train_cmd(t, out, log);
  r.csv = out.str();
  return r;
}

}  // namespace

TEST(GenData, SameSeedByteIdenticalAndHeaderCount) {
  Workdir w("gen");
  gen(w / "a.pcf", 1, 9, 777);
  gen(w / "b.pcf", 1, 9, 777);
  const std::string a = io_detail::slurp(w / "a.pcf");
  EXPECT_EQ(a, io_detail::slurp(w / "b.pcf"));
  std::uint32_t n = 0;
  std::memcpy(&n, a.data() + 8, 4);
  EXPECT_EQ(n, 777u);

  SynthSceneSpec spec;
  spec.num_points = 777;
  spec.seed = 9;
  const PointCloud direct = quantize_f32(generate_scene(spec));
  const PointCloud back = read_cloud(w / "a.pcf");
  EXPECT_EQ(back.positions, direct.positions);
  EXPECT_EQ(back.features, direct.features);
  EXPECT_EQ(back.labels, direct.labels);
}

TEST(GenData, DirectoryOfScenesUsesConsecutiveSeeds) {
  Workdir w("gendir");
  gen(w / "set", 3, 40, 100);
  const auto clouds = cmd::load_dir(w / "set");
  ASSERT_EQ(clouds.size(), 3u);
  gen(w / "one.pcf", 1, 42, 100);
  EXPECT_EQ(clouds[2].positions, read_cloud(w / "one.pcf").positions);
}

TEST(GenData, UnwritablePath) {
  cmd::GenOptions g;
  g.out = "/nonexistent-dir/x.pcf";
  EXPECT_THROW(cmd::gen_data(g), IoError);
}

TEST(TrainEval, EvalReproducesFinalReportedMiou) {
  Workdir w("traineval");
  gen(w / "train", 3, 100);
  gen(w / "eval", 2, 200);
  const Trained t = train_tiny(w, kTinyConfig, w / "m.ckpt");
  ASSERT_EQ(t.report.epochs.size(), 2u);
  EXPECT_EQ(t.csv.substr(0, 19), "epoch,loss,lr,miou\n");

  std::ostringstream out;
  const MiouResult r = cmd::eval_cmd(w / "m.ckpt", w / "eval", out);
  EXPECT_EQ(r.mean, t.report.epochs.back().miou);
  EXPECT_NE(out.str().find("class,iou\n0,"), std::string::npos);
  EXPECT_NE(out.str().find("\nmean,"), std::string::npos);
}

TEST(TrainEval, VariantSelectedByConfig) {
  Workdir w("variant");
  gen(w / "train", 2, 100);
  gen(w / "eval", 1, 200);
  const Trained a = train_tiny(w, kTinyConfig, w / "a.ckpt");
  std::string pc = kTinyConfig;
  pc.replace(pc.find("pcf_subtractive"), 15, "pointconv");
  const Trained b = train_tiny(w, pc, w / "b.ckpt");
  EXPECT_NE(a.csv, b.csv);
  EXPECT_EQ(load_checkpoint(w / "b.ckpt").net.config.variant, Variant::pointconv);
  EXPECT_TRUE(load_checkpoint(w / "b.ckpt").net.score_layers().empty());
}

TEST(TrainEval, SeedEnvOverride) {
  Workdir w("seedenv");
  gen(w / "train", 2, 100);
  gen(w / "eval", 1, 200);
  const Trained base = train_tiny(w, kTinyConfig, w / "a.ckpt");
  ::setenv("PCF_SEED", "5", 1);
  const Trained over = train_tiny(w, kTinyConfig, w / "b.ckpt");
  ::setenv("PCF_SEED", "five", 1);
  EXPECT_THROW(train_tiny(w, kTinyConfig, w / "c.ckpt"), ConfigError);
  ::unsetenv("PCF_SEED");
  EXPECT_NE(base.csv, over.csv);
  EXPECT_EQ(load_checkpoint(w / "b.ckpt").config.train.seed, 5u);
  EXPECT_EQ(train_tiny(w, std::string(kTinyConfig) + "seed = 5\n", w / "d.ckpt").csv, over.csv);
}

TEST(TrainEval, ConfigErrorsSurface) {
  Workdir w("cfgerr");
  gen(w / "train", 1, 100);
  gen(w / "eval", 1, 200);
  try {
    train_tiny(w, "variant = pointconv\nnum_classes = 3\n", w / "m.ckpt");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("epochs"), std::string::npos) << e.what();
  }
  EXPECT_THROW(train_tiny(w, std::string(kTinyConfig) + "version = 3\n", w / "m.ckpt"), VersionError);
}

TEST(Scores, NonScoreLayerListsEligible) {
  Rng rng(1);
  NetConfig cfg = parse_config(kTinyConfig).net;
  const UNet net = UNet::create(cfg, rng);
  SynthSceneSpec spec;
  spec.num_points = 300;
  try {
    cmd::point_scores(net, generate_scene(spec), 3);
    FAIL();
  } catch (const ParameterError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("0: enc0.block0 (pcf_subtractive)"), std::string::npos) << what;
    EXPECT_NE(what.find("1: enc1.block0"), std::string::npos) << what;
  }
}

TEST(Scores, ConstantOneAndConstantFeaturesGiveZero) {
  SynthSceneSpec spec;
  spec.num_points = 500;
  const PointCloud cloud = generate_scene(spec);
  Rng rng(2);

  NetConfig cfg = parse_config(kTinyConfig).net;
  cfg.activation = Activation::constant_one;
  const UNet flat = UNet::create(cfg, rng);
  for (std::size_t layer : {0, 1}) {
    for (double s : cmd::point_scores(flat, cloud, layer)) ASSERT_EQ(s, 0.0);
  }

  cfg.activation = Activation::sigmoid;
  const UNet net = UNet::create(cfg, rng);
  PointCloud constant = cloud;
  for (std::size_t i = 0; i < constant.size(); ++i) {
    for (std::size_t c = 0; c < constant.channels; ++c) constant.features[i * constant.channels + c] = 0.3 * c;
  }
  const auto scores = cmd::point_scores(net, constant, 0);
  ASSERT_EQ(scores.size(), cloud.size());
  for (double s : scores) ASSERT_EQ(s, 0.0);
  double varied = 0.0;
  for (double s : cmd::point_scores(net, cloud, 0)) varied = std::max(varied, s);
  EXPECT_GT(varied, 0.0);
}

TEST(Scores, CsvRows) {
  const PointCloud c = PointCloud::from_positions({{0.5, 1, 2}, {3, 4, 5}});
  const std::vector<double> s{0.25, 0.0};
  EXPECT_EQ(cmd::scores_csv(c, s), "x,y,z,score_diff\n0.5,1,2,0.25\n3,4,5,0\n");
}

TEST(Bench, CsvShapeAndPositiveTimings) {
  cmd::BenchOptions b;
  b.n = {64, 1024};
  b.reps = 3;
  b.c_in = b.c_out = 16;
  b.c_mid = 4;
  b.heads = 4;
  for (const char* op : {"pcf", "pointconv", "knn"}) {
    b.op = op;
    std::ostringstream out;
    cmd::bench_cmd(b, out);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "op,n,k,c_in,c_out,c_mid,median_s,points_per_s,naive_median_s,naive_over_factorized");
    std::vector<double> times;
    while (std::getline(in, line)) {
      std::vector<std::string> cells;
      std::stringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
      ASSERT_EQ(cells.size(), 10u) << line;
      EXPECT_EQ(cells[0], op);
      const double t = std::stod(cells[6]);
      EXPECT_GT(t, 0.0);
      EXPECT_GT(std::stod(cells[8]), 0.0);
      times.push_back(t);
    }
    ASSERT_EQ(times.size(), 2u);
    EXPECT_LT(times[0], times[1]) << op;
  }
  b.op = "conv";
  std::ostringstream sink;
  EXPECT_THROW(cmd::bench_cmd(b, sink), ConfigError);
}

TEST(Check, SuiteReportAndStatus) {
  std::ostringstream out;
  EXPECT_TRUE(cmd::check_cmd("invariance", 0, out));
  EXPECT_EQ(out.str().substr(0, 40), "suite,check,worst,tolerance,status,note\n");
  EXPECT_THROW(cmd::check_cmd("speed", 0, out), ConfigError);
}
