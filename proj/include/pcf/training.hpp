#pragma once

// Loss, optimizer, schedule, metrics, synthetic scenes and the train/eval
// loops for per-point segmentation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <array>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pcf/geometry.hpp"
#include "pcf/network.hpp"
#include "pcf/rng.hpp"
#include "pcf/tensor.hpp"

namespace pcf {

/// -sum_n w[y_n] log softmax(logits_n)[y_n] / sum_n w[y_n].
inline Tensor weighted_cross_entropy(const Tensor& logits, std::span<const int> labels,
                                     std::span<const double> weights) {
  detail::require_rank(logits, 2, "weighted_cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError(detail::concat("weighted_cross_entropy: ", n, " logit rows but ",
                                        labels.size(), " labels"));
  }
  if (weights.size() != c) {
    throw DimensionError(detail::concat("weighted_cross_entropy: ", c, " classes but ",
                                        weights.size(), " weights"));
  }
  for (double w : weights) {
    if (!(w > 0.0)) throw ParameterError("weighted_cross_entropy: class weights must be positive");
  }
  std::vector<double> probs(n * c);
  double num = 0.0, den = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw IndexError(detail::concat("label ", y, " at point ", r, " outside [0, ", c, ")"));
    }
    const double* row = logits.data().data() + r * c;
    const auto top = static_cast<std::size_t>(std::max_element(row, row + c) - row);
    const double mx = row[top];
    double rest = 0.0;  // log-sum-exp = mx + log1p(rest) keeps confident rows above zero
    for (std::size_t j = 0; j < c; ++j)
      if (j != top) rest += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(row[j] - mx) / (1.0 + rest);
    const double w = weights[static_cast<std::size_t>(y)];
    num += w * (std::log1p(rest) - (row[y] - mx));
    den += w;
  }
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<double> wts(weights.begin(), weights.end());
  return detail::make_result({}, {num / den}, "weighted_cross_entropy", {logits},
                             [logits, probs = std::move(probs), lab = std::move(lab),
                              wts = std::move(wts), den, c](const detail::TensorImpl& o) {
                               auto g = detail::grad_of(*logits.impl());
                               const double go = o.grad[0] / den;
                               for (std::size_t r = 0; r < lab.size(); ++r) {
                                 const auto y = static_cast<std::size_t>(lab[r]);
                                 const double s = go * wts[y];
                                 for (std::size_t j = 0; j < c; ++j) {
                                   g[r * c + j] += s * (probs[r * c + j] - (j == y ? 1.0 : 0.0));
                                 }
                               }
                             });
}

struct OptimState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Adam with bias correction. Weight decay is decoupled: p -= lr * wd * p
/// happens before the adaptive step. Missing gradients count as zero.
inline void adam_step(std::span<Tensor> params, OptimState& st) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.numel(), 0.0);
      st.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (st.m.size() != params.size()) {
    throw ContractError(detail::concat("adam_step: state tracks ", st.m.size(), " tensors, got ",
                                       params.size()));
  }
  ++st.step;
  const double t = static_cast<double>(st.step);
  const double c1 = 1.0 - std::pow(st.beta1, t);
  const double c2 = 1.0 - std::pow(st.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (st.m[i].size() != p.numel()) {
      throw ContractError(detail::concat("adam_step: moment buffer ", i, " has ", st.m[i].size(),
                                         " entries for a tensor of ", p.numel()));
    }
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      w[j] -= st.lr * st.weight_decay * w[j];
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * gj;
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * gj * gj;
      w[j] -= st.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + st.eps);
    }
  }
}

struct TrainConfig {
  double initial_lr = 1e-3;
  double decay_factor = 0.5;
  std::size_t decay_every = 80;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  double weight_decay = 1e-4;
  std::vector<double> class_weights;  // empty: inverse log frequency of the training set
};

inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  const std::size_t every = std::max<std::size_t>(1, cfg.decay_every);
  return cfg.initial_lr * std::pow(cfg.decay_factor, static_cast<double>(epoch / every));
}

struct MiouResult {
  std::vector<double> per_class;  // NaN for classes absent from prediction and truth
  std::vector<bool> counted;
  double mean = 0.0;
  double accuracy = 0.0;
};

inline MiouResult miou_from_confusion(const std::vector<std::uint64_t>& confusion,
                                      std::size_t num_classes) {
  MiouResult r;
  r.per_class.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  r.counted.assign(num_classes, false);
  std::uint64_t total = 0, correct = 0;
  std::size_t used = 0;
  double acc = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::uint64_t tp = confusion[c * num_classes + c], fp = 0, fn = 0;
    for (std::size_t o = 0; o < num_classes; ++o) {
      total += confusion[c * num_classes + o];
      if (o == c) continue;
      fn += confusion[c * num_classes + o];  // row = truth
      fp += confusion[o * num_classes + c];  // column = prediction
    }
    correct += tp;
    if (tp + fp + fn == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    r.counted[c] = true;
    acc += r.per_class[c];
    ++used;
  }
  r.mean = used ? acc / static_cast<double>(used) : 0.0;
  r.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return r;
}

inline void accumulate_confusion(std::vector<std::uint64_t>& confusion, std::span<const int> pred,
                                 std::span<const int> truth, std::size_t num_classes) {
  if (pred.size() != truth.size()) {
    throw DimensionError(detail::concat("miou: ", pred.size(), " predictions for ", truth.size(),
                                        " labels"));
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (int v : {pred[i], truth[i]}) {
      if (v < 0 || static_cast<std::size_t>(v) >= num_classes) {
        throw IndexError(detail::concat("miou: label ", v, " at point ", i, " outside [0, ",
                                        num_classes, ")"));
      }
    }
    ++confusion[static_cast<std::size_t>(truth[i]) * num_classes + static_cast<std::size_t>(pred[i])];
  }
}

/// IoU_c = TP / (TP + FP + FN); classes absent from both sides are left out
/// of the mean.
inline MiouResult miou(std::span<const int> pred, std::span<const int> truth, std::size_t num_classes) {
  std::vector<std::uint64_t> confusion(num_classes * num_classes, 0);
  accumulate_confusion(confusion, pred, truth, num_classes);
  return miou_from_confusion(confusion, num_classes);
}

enum class SceneGeometry { two_planes_corner, plane_plus_sphere, boundary_noise };

inline std::string to_string(SceneGeometry g) {
  switch (g) {
    case SceneGeometry::two_planes_corner: return "two_planes_corner";
    case SceneGeometry::plane_plus_sphere: return "plane_plus_sphere";
    case SceneGeometry::boundary_noise: return "boundary_noise";
  }
  return "?";
}

inline SceneGeometry parse_geometry(std::string_view s) {
  for (auto g : {SceneGeometry::two_planes_corner, SceneGeometry::plane_plus_sphere,
                 SceneGeometry::boundary_noise}) {
    if (s == to_string(g)) return g;
  }
  throw ConfigError("unknown geometry '" + std::string(s) +
                    "' (expected two_planes_corner|plane_plus_sphere|boundary_noise)");
}

inline std::size_t geometry_classes(SceneGeometry g) {
  return g == SceneGeometry::boundary_noise ? 3 : 2;
}

struct SynthSceneSpec {
  std::size_t num_points = 4096;
  std::size_t num_classes = 3;
  SceneGeometry geometry = SceneGeometry::boundary_noise;
  double noise_sigma = 0.005;              // position jitter, meters
  double boundary_label_flip_rate = 0.1;   // per point inside the edge band
  double band_width = 0.06;                // meters
  double color_noise = 0.1;
  std::uint64_t seed = 0;
};

struct SynthScene {
  PointCloud cloud;
  std::vector<int> clean_labels;
  std::vector<std::uint8_t> in_band;  // within band_width of a class boundary
};

namespace detail {

// Rug rectangle on the floor, [x0, x1] x [y0, y1].
struct Rect {
  double x0, x1, y0, y1;
  bool contains(double x, double y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
  double edge_distance(double x, double y) const {
    if (contains(x, y)) return std::min({x - x0, x1 - x, y - y0, y1 - y});
    const double dx = std::max({x0 - x, 0.0, x - x1});
    const double dy = std::max({y0 - y, 0.0, y - y1});
    return std::hypot(dx, dy);
  }
};

}  // namespace detail

/// Room-corner style scenes: a 2 x 2 m floor (class 0) with either a wall
/// (class 1, x = 0) or a resting sphere (class 1). boundary_noise adds a rug
/// (class 2) that differs from the floor only in color and flips labels near
/// class boundaries. Features are [1, r, g, b].
inline SynthScene generate_scene_detailed(const SynthSceneSpec& spec) {
  if (spec.num_points == 0) throw ParameterError("generate_scene: num_points must be positive");
  if (spec.num_classes != geometry_classes(spec.geometry)) {
    throw ParameterError(detail::concat("generate_scene: ", to_string(spec.geometry), " has ",
                                        geometry_classes(spec.geometry), " classes, spec says ",
                                        spec.num_classes));
  }
  if (spec.noise_sigma < 0 || spec.color_noise < 0 || spec.band_width < 0 ||
      spec.boundary_label_flip_rate < 0 || spec.boundary_label_flip_rate > 1) {
    throw ParameterError("generate_scene: noise, band and flip rate must be non-negative (flip <= 1)");
  }
  Rng rng(spec.seed);
  constexpr double side = 2.0, wall_h = 1.5, radius = 0.45;
  const Vec3 sphere_c{1.0, 1.0, radius};
  const bool sphere = spec.geometry == SceneGeometry::plane_plus_sphere;
  const double floor_area = side * side;
  const double other_area = sphere ? 4.0 * std::numbers::pi * radius * radius : side * wall_h;
  const double p_floor = floor_area / (floor_area + other_area);

  detail::Rect rug{0, 0, 0, 0};
  if (spec.geometry == SceneGeometry::boundary_noise) {
    const double w = rng.uniform(0.5, 1.0), d = rng.uniform(0.5, 1.0);
    const double cx = rng.uniform(0.2 + w / 2, side - 0.1 - w / 2);
    const double cy = rng.uniform(0.1 + d / 2, side - 0.1 - d / 2);
    rug = {cx - w / 2, cx + w / 2, cy - d / 2, cy + d / 2};
  }
  const std::array<std::array<double, 3>, 3> palette{{{0.55, 0.50, 0.45},   // floor
                                                      {0.55, 0.50, 0.45},   // wall / sphere
                                                      {0.35, 0.45, 0.70}}};  // rug

  SynthScene out;
  std::vector<Vec3> pos(spec.num_points);
  std::vector<double> feats(spec.num_points * 4);
  std::vector<int> labels(spec.num_points);
  out.clean_labels.resize(spec.num_points);
  out.in_band.assign(spec.num_points, 0);
  for (std::size_t i = 0; i < spec.num_points; ++i) {
    Vec3 p;
    int label = 0, across = 0;
    double dist = 0.0;  // to the nearest class boundary
    if (rng.uniform() < p_floor) {
      p = {rng.uniform(0, side), rng.uniform(0, side), 0.0};
      if (sphere) {
        across = 1;
        dist = std::hypot(p[0] - sphere_c[0], p[1] - sphere_c[1], p[2] - sphere_c[2]) - radius;
      } else {
        across = 1;
        dist = p[0];
        if (spec.geometry == SceneGeometry::boundary_noise) {
          const double rd = rug.edge_distance(p[0], p[1]);
          if (rug.contains(p[0], p[1])) label = 2;
          if (rd < dist) {
            dist = rd;
            across = label == 2 ? 0 : 2;
          }
        }
      }
    } else {
      label = 1;
      if (sphere) {
        // Upper-hemisphere-weighted uniform sampling on the sphere, z > 0.
        Vec3 d{rng.normal(), rng.normal(), rng.normal()};
        const double len = std::hypot(d[0], d[1], d[2]);
        for (std::size_t a = 0; a < 3; ++a) p[a] = sphere_c[a] + radius * d[a] / len;
        if (p[2] <= 0.0) p[2] = 2 * radius - p[2];  // reflect the contact point away
        dist = p[2];
      } else {
        p = {0.0, rng.uniform(0, side), rng.uniform(0, wall_h)};
        dist = p[2];
      }
      across = 0;
    }
    out.clean_labels[i] = label;
    const bool band = dist < spec.band_width;
    out.in_band[i] = band ? 1 : 0;
    if (band && rng.uniform() < spec.boundary_label_flip_rate) label = across;
    labels[i] = label;
    for (std::size_t a = 0; a < 3; ++a) {
      pos[i][a] = p[a] + (spec.noise_sigma > 0 ? rng.normal(0, spec.noise_sigma) : 0.0);
    }
    const auto& col = palette[static_cast<std::size_t>(out.clean_labels[i])];
    feats[i * 4] = 1.0;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double noise = spec.color_noise > 0 ? rng.normal(0, spec.color_noise) : 0.0;
      feats[i * 4 + 1 + ch] = std::clamp(col[ch] + noise, 0.0, 1.0);
    }
  }
  out.cloud = PointCloud(std::move(pos), std::move(feats), 4, std::move(labels));
  return out;
}

inline PointCloud generate_scene(const SynthSceneSpec& spec) {
  return generate_scene_detailed(spec).cloud;
}

/// 1 / ln(1.02 + f_c) with f_c the label frequency over the given clouds.
inline std::vector<double> inverse_log_frequency_weights(std::span<const PointCloud> clouds,
                                                         std::size_t num_classes) {
  std::vector<double> count(num_classes, 0.0);
  double total = 0.0;
  for (const auto& c : clouds) {
    for (int y : c.labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw IndexError(detail::concat("label ", y, " outside [0, ", num_classes, ")"));
      }
      count[static_cast<std::size_t>(y)] += 1.0;
      total += 1.0;
    }
  }
  std::vector<double> w(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    w[c] = 1.0 / std::log(1.02 + (total > 0 ? count[c] / total : 0.0));
  }
  return w;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double miou = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;

  std::string to_csv() const {
    std::ostringstream os;
    os << "epoch,loss,lr,miou\n";
    os << std::setprecision(17);
    for (const auto& e : epochs) os << e.epoch << ',' << e.loss << ',' << e.lr << ',' << e.miou << '\n';
    return os.str();
  }
};

/// A cloud with its precomputed levels.
struct PreparedScene {
  Hierarchy hierarchy;
  std::vector<int> labels;
};

inline std::vector<PreparedScene> prepare(std::span<const PointCloud> clouds, const NetConfig& cfg) {
  std::vector<PreparedScene> out;
  out.reserve(clouds.size());
  for (const auto& c : clouds) {
    if (!c.has_labels()) throw DimensionError("training and evaluation clouds need labels");
    out.push_back({build_hierarchy(c, cfg), c.labels});
  }
  return out;
}

inline std::vector<int> predict(const Hierarchy& h, const UNet& net) {
  NoGradGuard guard;
  const Tensor logits = unet_forward(h, net, Mode::eval);
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> pred(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto row = logits.data().subspan(r * c, c);
    pred[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return pred;
}

/// Pooled confusion over every point of every scene.
inline MiouResult evaluate(const UNet& net, std::span<const PreparedScene> scenes) {
  const std::size_t c = net.config.num_classes;
  std::vector<std::uint64_t> confusion(c * c, 0);
  for (const auto& s : scenes) accumulate_confusion(confusion, predict(s.hierarchy, net), s.labels, c);
  return miou_from_confusion(confusion, c);
}

inline MiouResult evaluate(const UNet& net, std::span<const PointCloud> clouds) {
  const auto prepared = prepare(clouds, net.config);
  return evaluate(net, std::span<const PreparedScene>(prepared));
}

/// One scene per step, scenes shuffled each epoch. The miou column is
/// measured on `eval` (or on the training scenes when `eval` is empty).
inline TrainReport train(UNet& net, std::span<const PreparedScene> train_set,
                         std::span<const PreparedScene> eval_set, const TrainConfig& cfg,
                         std::ostream* log = nullptr) {
  if (train_set.empty()) throw ParameterError("train: no training scenes");
  std::vector<double> weights = cfg.class_weights;
  if (weights.empty()) {
    std::vector<PointCloud> labelled;
    for (const auto& s : train_set) {
      PointCloud c = s.hierarchy.input;
      c.labels = s.labels;
      labelled.push_back(std::move(c));
    }
    weights = inverse_log_frequency_weights(labelled, net.config.num_classes);
  }
  std::vector<Tensor> params = net.parameters();
  OptimState opt;
  opt.weight_decay = cfg.weight_decay;
  Rng shuffle(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train_set.size());
  const auto scored = eval_set.empty() ? train_set : eval_set;

  TrainReport report;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.lr = lr_at(epoch, cfg);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle.engine());
    double total = 0.0;
    for (std::size_t idx : order) {
      for (auto& p : params) p.zero_grad();
      const Tensor loss = weighted_cross_entropy(unet_forward(train_set[idx].hierarchy, net, Mode::train),
                                                 train_set[idx].labels, weights);
      if (!std::isfinite(loss.item())) {
        backward(loss);
        double gnorm = 0.0;
        for (const auto& p : params)
          for (double g : p.grad()) gnorm += g * g;
        throw NumericError(detail::concat("non-finite loss ", loss.item(), " at epoch ", epoch,
                                          ", scene ", idx, ", lr ", opt.lr, ", gradient norm ",
                                          std::sqrt(gnorm)));
      }
      backward(loss);
      adam_step(params, opt);
      total += loss.item();
    }
    EpochRecord rec{epoch, total / static_cast<double>(train_set.size()), opt.lr,
                    evaluate(net, scored).mean};
    report.epochs.push_back(rec);
    if (log) {
      *log << std::setprecision(6) << "epoch " << rec.epoch << " loss " << rec.loss << " lr "
           << rec.lr << " miou " << rec.miou << '\n';
    }
  }
  return report;
}

}  // namespace pcf
