#pragma once

// Command bodies behind the `pcf` tool. Each takes parsed options and writes
// its primary output to a stream, so the same code path serves the binary
// and the tests.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "pcf/checks.hpp"
#include "pcf/io.hpp"
#include "pcf/training.hpp"

namespace pcf::cmd {

/// PCF_SEED, when set, replaces the configured seed.
inline std::optional<std::uint64_t> seed_from_env() {
  const char* s = std::getenv("PCF_SEED");
  if (!s || !*s) return std::nullopt;
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(s, s + std::strlen(s), v);
  if (ec != std::errc() || *end != '\0') {
    throw ConfigError(pcf::detail::concat("PCF_SEED must be an unsigned integer, got '", s, "'"));
  }
  return v;
}

/// Every *.pcf file in `dir`, in filename order.
inline std::vector<PointCloud> load_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".pcf") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .pcf files in " + dir);
  std::vector<PointCloud> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(read_cloud(f.string()));
  return out;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenOptions {
  SynthSceneSpec spec;
  std::size_t count = 1;
  std::string out;  // a file if it ends in .pcf, otherwise a directory
};

/// Returns the written paths. Scene i uses seed + i.
inline std::vector<std::string> gen_data(GenOptions opt) {
  if (opt.count == 0) throw ParameterError("gen-data: count must be positive");
  opt.spec.num_classes = geometry_classes(opt.spec.geometry);
  std::vector<std::string> paths;
  if (std::filesystem::path(opt.out).extension() == ".pcf") {
    if (opt.count != 1) throw ParameterError("gen-data: --out names one file but count is " + std::to_string(opt.count));
    paths.push_back(opt.out);
  } else {
    std::error_code ec;
    std::filesystem::create_directories(opt.out, ec);
    if (ec) throw IoError("cannot create directory " + opt.out + ": " + ec.message());
    for (std::size_t i = 0; i < opt.count; ++i) {
      std::ostringstream name;
      name << "scene_" << std::setw(4) << std::setfill('0') << i << ".pcf";
      paths.push_back((std::filesystem::path(opt.out) / name.str()).string());
    }
  }
  const std::uint64_t base = opt.spec.seed;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    SynthSceneSpec s = opt.spec;
    s.seed = base + i;
    write_cloud(paths[i], generate_scene(s));
  }
  return paths;
}

// ---------------------------------------------------------------------------
// train / eval

struct TrainOptions {
  std::string config;
  std::string data;
  std::string eval_data;  // optional
  std::string out;        // checkpoint path
};

/// Resolves the config (PCF_SEED applied), logs it, trains and saves. The
/// report CSV goes to `out`; config and progress go to `log`.
inline TrainReport train_cmd(const TrainOptions& opt, std::ostream& out, std::ostream& log) {
  RunConfig cfg = read_config(opt.config);
  if (auto s = seed_from_env()) cfg.train.seed = *s;
  log << "# resolved config\n" << config_to_text(cfg) << std::flush;

  const auto train_clouds = load_dir(opt.data);
  const auto train_set = prepare(train_clouds, cfg.net);
  std::vector<PreparedScene> eval_set;
  if (!opt.eval_data.empty()) eval_set = prepare(load_dir(opt.eval_data), cfg.net);

  Rng rng(cfg.train.seed);
  UNet net = UNet::create(cfg.net, rng);
  const TrainReport report = train(net, train_set, eval_set, cfg.train, &log);
  save_checkpoint(opt.out, net, cfg);
  out << report.to_csv();
  return report;
}

inline std::string miou_table(const MiouResult& r) {
  std::ostringstream os;
  os << std::setprecision(17) << "class,iou\n";
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    os << c << ',';
    if (std::isnan(r.per_class[c])) {
      os << "absent";
    } else {
      os << r.per_class[c];
    }
    os << '\n';
  }
  os << "mean," << r.mean << "\naccuracy," << r.accuracy << '\n';
  return os.str();
}

inline MiouResult eval_cmd(const std::string& checkpoint, const std::string& data, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const auto clouds = load_dir(data);
  const MiouResult r = evaluate(ck.net, std::span<const PointCloud>(clouds));
  out << miou_table(r);
  return r;
}

// ---------------------------------------------------------------------------
// check

inline bool check_cmd(const std::string& suite, std::uint64_t seed, std::ostream& out) {
  const checks::CheckReport rep = checks::run_suite(suite, seed);
  out << rep.to_text();
  return rep.passed();
}

// ---------------------------------------------------------------------------
// scores

/// score_diff of encoder layer `layer`, carried back to every input point
/// through the pooling maps.
inline std::vector<double> point_scores(const UNet& net, const PointCloud& cloud, std::size_t layer) {
  const auto eligible = net.score_layers();
  if (std::find(eligible.begin(), eligible.end(), layer) == eligible.end()) {
    const auto names = net.layer_names();
    std::ostringstream os;
    os << "layer " << layer << " has no reweighting scores; eligible layers:";
    if (eligible.empty()) os << " none";
    for (std::size_t i : eligible) os << "\n  " << i << ": " << names[i];
    throw ParameterError(os.str());
  }
  const Hierarchy h = build_hierarchy(cloud, net.config);
  ForwardTrace trace;
  {
    NoGradGuard guard;
    unet_forward(h, net, Mode::eval, &trace);
  }
  const Tensor diff = score_diff(trace.block_scores[layer]);
  const auto idx = h.input_to_level(trace.block_level[layer]);
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = diff[idx[i]];
  return out;
}

inline std::string scores_csv(const PointCloud& cloud, std::span<const double> scores) {
  std::ostringstream os;
  os << std::setprecision(17) << "x,y,z,score_diff\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.positions[i];
    os << p[0] << ',' << p[1] << ',' << p[2] << ',' << scores[i] << '\n';
  }
  return os.str();
}

inline void scores_cmd(const std::string& checkpoint, const std::string& data, std::size_t layer,
                       const std::string& out_path) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const PointCloud cloud = read_cloud(data);
  io_detail::dump(out_path, scores_csv(cloud, point_scores(ck.net, cloud, layer)));
}

// ---------------------------------------------------------------------------
// bench

struct BenchOptions {
  std::string op = "pcf";  // pcf, pointconv or knn
  std::vector<std::size_t> n{256, 512, 1024, 2048};
  std::size_t k = 16;
  std::size_t reps = 5;
  std::size_t c_in = 64, c_out = 64, c_mid = 16, heads = 8;
  std::uint64_t seed = 0;
};

namespace detail {

template <class F>
double median_seconds(std::size_t reps, F&& f) {
  std::vector<double> t;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

}  // namespace detail

/// Timings are wall clock and so are the one output not reproducible run
/// to run.
inline void bench_cmd(const BenchOptions& opt, std::ostream& out) {
  if (opt.op != "pcf" && opt.op != "pointconv" && opt.op != "knn") {
    throw ConfigError("bench: unknown op '" + opt.op + "' (expected pcf, pointconv or knn)");
  }
  if (opt.reps == 0) throw ParameterError("bench: reps must be positive");
  Rng rng(opt.seed);
  out << "op,n,k,c_in,c_out,c_mid,median_s,points_per_s,naive_median_s,naive_over_factorized\n";
  for (std::size_t n : opt.n) {
    if (n < opt.k) throw CapacityError(pcf::detail::concat("bench: n=", n, " is below k=", opt.k));
    const PointCloud cloud = checks::detail::random_cloud(n, opt.c_in, rng);
    double fast = 0.0, naive = 0.0;
    if (opt.op == "knn") {
      fast = detail::median_seconds(opt.reps, [&] { knn(cloud, cloud, opt.k); });
      naive = detail::median_seconds(opt.reps, [&] { brute_force_knn(cloud, cloud, opt.k); });
    } else {
      const Variant v = opt.op == "pcf" ? Variant::pcf_subtractive : Variant::pointconv;
      const PcfParams p = PcfParams::create(
          checks::detail::layer(v, opt.c_in, opt.c_out, opt.heads, Activation::sigmoid, opt.c_mid), rng);
      const Neighborhood nbr = knn(cloud, cloud, opt.k);
      const Tensor x = cloud.feature_tensor();
      NoGradGuard guard;
      fast = detail::median_seconds(opt.reps, [&] {
        if (v == Variant::pointconv) {
          pointconv_forward(x, nbr, p);
        } else {
          pcf_forward(x, nbr, p);
        }
      });
      naive = detail::median_seconds(opt.reps, [&] { pcf_forward_naive(x, nbr, p); });
    }
    out << opt.op << ',' << n << ',' << opt.k << ',' << opt.c_in << ',' << opt.c_out << ','
        << opt.c_mid << ',' << fast << ',' << static_cast<double>(n) / fast << ',' << naive << ','
        << naive / fast << '\n';
  }
}

}  // namespace pcf::cmd
