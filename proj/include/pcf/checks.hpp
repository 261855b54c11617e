#pragma once

// Self-check suites shared by `pcf check` and the acceptance binary. Each row
// reports the worst value seen against a fixed tolerance.

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "pcf/geometry.hpp"
#include "pcf/gradcheck.hpp"
#include "pcf/network.hpp"
#include "pcf/pcf.hpp"
#include "pcf/rng.hpp"

namespace pcf::checks {

struct CheckRow {
  std::string name;
  double worst = 0.0;
  double tolerance = 0.0;
  bool above = false;  // pass when worst > tolerance instead of worst < tolerance
  bool vetoed = false;
  std::string note{};

  bool passed() const { return !vetoed && (above ? worst > tolerance : worst < tolerance); }
};

struct CheckReport {
  std::string suite;
  std::vector<CheckRow> rows;

  bool passed() const {
    return std::all_of(rows.begin(), rows.end(), [](const CheckRow& r) { return r.passed(); });
  }

  double worst_of(std::string_view prefix) const {
    double w = 0.0;
    for (const auto& r : rows)
      if (r.name.starts_with(prefix)) w = std::max(w, r.worst);
    return w;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << "suite,check,worst,tolerance,status,note\n" << std::setprecision(6);
    for (const auto& r : rows) {
      os << suite << ',' << r.name << ',' << r.worst << ',' << (r.above ? ">" : "<") << r.tolerance
         << ',' << (r.passed() ? "PASS" : "FAIL") << ',' << r.note << '\n';
    }
    return os.str();
  }
};

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = shape_numel(shape);
  Tensor t(std::move(shape), rng.uniform_vector(n, lo, hi));
  if (grad) t.set_requires_grad();
  return t;
}

inline PointCloud random_cloud(std::size_t n, std::size_t channels, Rng& rng, double extent = 1.0) {
  std::vector<Vec3> pos(n);
  for (auto& p : pos) p = {rng.uniform(0, extent), rng.uniform(0, extent), rng.uniform(0, extent)};
  return PointCloud(std::move(pos), rng.uniform_vector(n * channels, -1.0, 1.0), channels);
}

inline PointCloud translated(const PointCloud& cloud, const Vec3& t) {
  PointCloud out = cloud;
  for (auto& p : out.positions)
    for (std::size_t a = 0; a < 3; ++a) p[a] += t[a];
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  pcf::detail::require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Tensor probe_loss(const Tensor& out, const Tensor& w) { return sum(mul(out, w)); }

/// Random probe weights scaled so that sum |out * w| is at most 1e-3. The
/// roundoff of a central difference is a few ulps of the loss over the step;
/// keeping the loss small keeps that noise far below the 1e-8 floor of the
/// relative error, where tiny or vanishing gradients are judged.
inline Tensor probe_weights(const Tensor& out, Rng& rng) {
  std::vector<double> w = rng.uniform_vector(out.numel(), -1.0, 1.0);
  double mass = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) mass += std::abs(out[i] * w[i]);
  if (mass > 1e-3) {
    for (double& v : w) v *= 1e-3 / mass;
  }
  return Tensor(out.shape(), w);
}

inline constexpr double kLayerStep = 1e-6;

inline PcfLayerConfig layer(Variant v, std::size_t cin, std::size_t cout, std::size_t heads,
                            Activation act = Activation::sigmoid, std::size_t cmid = 4) {
  PcfLayerConfig c;
  c.c_in = cin;
  c.c_out = cout;
  c.c_mid = cmid;
  c.heads = heads;
  c.variant = v;
  c.activation = act;
  return c;
}

/// Same neighbors, slots shuffled per query.
inline Neighborhood permute_slots(const Neighborhood& nbr, Rng& rng) {
  Neighborhood out = nbr;
  const std::size_t n = nbr.queries(), k = nbr.k();
  std::vector<std::size_t> perm(k);
  for (std::size_t q = 0; q < n; ++q) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    for (std::size_t j = 0; j < k; ++j) {
      out.indices(q, j) = nbr.indices(q, perm[j]);
      for (std::size_t a = 0; a < 3; ++a) {
        out.rel_pos[(q * k + j) * 3 + a] = nbr.rel_pos[(q * k + perm[j]) * 3 + a];
      }
    }
  }
  return out;
}

inline std::vector<Tensor> params_of(const PcfParams& p) { return p.parameters(); }

}  // namespace detail

// ---------------------------------------------------------------------------

/// Factorized vs direct per-slot evaluation, constant_one reduction, the
/// accelerated kNN against brute force, and the convexity contrast between
/// the attention baseline and PCF.
inline CheckReport run_oracle_suite(std::uint64_t seed = 0) {
  using namespace detail;
  Rng rng(seed);
  CheckReport rep{"oracle", {}};

  double worst = 0.0;
  const std::size_t ks[] = {1, 4, 16}, hs[] = {1, 2, 4, 8};
  const Activation acts[] = {Activation::sigmoid, Activation::softmax, Activation::relu};
  for (std::size_t i = 0; i < 100; ++i) {
    const std::size_t k = ks[i % 3], heads = hs[(i / 3) % 4];
    const Variant v = i % 2 ? Variant::pcf_qkv : Variant::pcf_subtractive;
    const std::size_t n = k + rng.index(257 - k);
    const std::size_t cin = heads * (1 + rng.index(3)), cout = 1 + rng.index(8), cmid = 1 + rng.index(8);
    const PointCloud c = random_cloud(n, cin, rng);
    const Neighborhood nbr = knn(c, c, k);
    const PcfParams p = PcfParams::create(layer(v, cin, cout, heads, acts[i % 3], cmid), rng);
    const Tensor x = c.feature_tensor();
    worst = std::max(worst, max_relative_difference(pcf_forward(x, nbr, p), pcf_forward_naive(x, nbr, p)));
  }
  rep.rows.push_back({"factorized_vs_naive(100 instances)", worst, 1e-10});

  double w_const = 0.0, w_direct = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    const std::size_t heads = hs[i % 4], cin = heads * 2, k = ks[i % 3];
    const PointCloud c = random_cloud(64, cin, rng);
    const Neighborhood nbr = knn(c, c, k);
    const Tensor x = c.feature_tensor();
    const Variant v = i % 2 ? Variant::pcf_qkv : Variant::pcf_subtractive;
    PcfParams p = PcfParams::create(layer(v, cin, 5, heads, Activation::constant_one), rng);
    const Tensor reweighted = pcf_forward(x, nbr, p);
    PcfParams conv = p;
    conv.config.variant = Variant::pointconv;
    const Tensor plain = pointconv_forward(x, nbr, conv);
    w_const = std::max(w_const, max_relative_difference(reweighted, plain));
    w_direct = std::max(w_direct, max_relative_difference(plain, pcf_forward_naive(x, nbr, conv)));
  }
  rep.rows.push_back({"constant_one_vs_pointconv", w_const, 1e-12});
  rep.rows.push_back({"pointconv_vs_direct_loop", w_direct, 1e-10});

  double mismatches = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    const std::size_t n = 16 + rng.index(1985);
    const PointCloud src = random_cloud(n, 0, rng, rng.uniform(0.1, 10.0));
    const auto a = knn(src, src, 16), b = brute_force_knn(src, src, 16);
    for (std::size_t j = 0; j < a.indices.values.size(); ++j) {
      mismatches += a.indices.values[j] != b.indices.values[j];
    }
  }
  rep.rows.push_back({"knn_vs_brute_force(mismatched slots)", mismatches, 0.5});

  // Baseline outputs stay inside the per-channel hull of the neighbor values.
  double excess = -INFINITY;
  for (std::size_t i = 0; i < 10; ++i) {
    const std::size_t heads = hs[i % 4];
    const PointCloud c = random_cloud(60, 8, rng);
    const Neighborhood nbr = knn(c, c, 8);
    const PcfParams p = PcfParams::create(layer(Variant::attention_baseline, 8, 8, heads), rng);
    const Tensor out = attention_baseline_forward(c.feature_tensor(), nbr, p);
    for (std::size_t q = 0; q < 60; ++q) {
      for (std::size_t o = 0; o < 8; ++o) {
        double lo = INFINITY, hi = -INFINITY;
        for (std::size_t j = 0; j < 8; ++j) {
          const double val = p.value.apply(c.feature_row(nbr.indices(q, j)))[o];
          lo = std::min(lo, val);
          hi = std::max(hi, val);
        }
        const double y = out[q * 8 + o];
        excess = std::max(excess, std::max(lo - y, y - hi));
      }
    }
  }
  rep.rows.push_back({"baseline_excess_over_neighbor_hull", excess, 1e-12});

  // Positive features, h = relu(0.5) constant, W_l = -1 and sigmoid scores:
  // every effective weight is negative so the output drops below all inputs.
  {
    PointCloud c = random_cloud(40, 1, rng);
    for (double& f : c.features) f = 0.5 + std::abs(f);
    const Neighborhood nbr = knn(c, c, 4);
    PcfParams p = PcfParams::create(layer(Variant::pcf_subtractive, 1, 1, 1), rng);
    for (double& w : p.weight.mutable_data()) w = -1.0;
    for (double& w : p.pos_mlp.layers.back().weight.mutable_data()) w = 0.0;
    for (double& w : p.pos_mlp.layers.back().bias.mutable_data()) w = 0.5;
    const Tensor out = pcf_forward(c.feature_tensor(), nbr, p);
    double margin = INFINITY;
    for (std::size_t q = 0; q < 40; ++q) {
      double lo = INFINITY;
      for (std::size_t j = 0; j < 4; ++j) lo = std::min(lo, c.features[nbr.indices(q, j)]);
      margin = std::min(margin, lo - out[q]);
    }
    rep.rows.push_back({"pcf_distance_below_neighbor_hull", margin, 0.0, true});
  }
  return rep;
}

/// Central differences on every primitive, every layer variant, residual
/// blocks and a two-level network.
inline CheckReport run_gradcheck_suite(std::uint64_t seed = 0) {
  using namespace detail;
  Rng rng(seed);
  CheckReport rep{"gradcheck", {}};
  auto add = [&](std::string name, std::vector<Tensor> params, std::function<Tensor()> out,
                 double step) {
    Tensor probe;
    {
      NoGradGuard guard;
      probe = probe_weights(out(), rng);
    }
    GradCheckOptions opts;
    opts.step = step;
    const auto r = grad_check_detailed([&] { return probe_loss(out(), probe); }, params, opts);
    CheckRow row{std::move(name), r.max_rel_error, 1e-4};
    row.note = pcf::detail::concat("checked=", r.checked, " kinks=", r.kinks);
    // Skipping is only an allowance for a few entries sitting on a kink.
    row.vetoed = r.kinks * 20 > r.checked + r.kinks;
    rep.rows.push_back(std::move(row));
  };

  {
    const IndexTable idx(4, 3, {0, 1, 2, 3, 3, 0, 1, 1, 2, 4, 0, 2});
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    Tensor u = random_tensor({3, 4}, rng), v = random_tensor({3, 4}, rng);
    Tensor bias = random_tensor({4}, rng), src = random_tensor({5, 4}, rng);
    Tensor nbr = random_tensor({4, 3, 4}, rng), ctr = random_tensor({4, 4}, rng);
    Tensor scores = random_tensor({4, 3, 2}, rng), h = random_tensor({4, 3, 5}, rng);
    Tensor q = random_tensor({4, 3, 6}, rng), kc = random_tensor({4, 6}, rng);
    Tensor vec = random_tensor({5}, rng);
    Tensor w = random_tensor({4, 3}, rng), wb = random_tensor({3}, rng);
    const double s = 1e-6;
    add("op:matmul", {a, b}, [=] { return matmul(a, b); }, s);
    add("op:linear", {u, w, wb}, [=] { return linear(u, w, wb); }, s);
    add("op:add", {u, v}, [=] { return pcf::add(u, v); }, s);
    add("op:sub", {u, v}, [=] { return sub(u, v); }, s);
    add("op:mul", {u, v}, [=] { return mul(u, v); }, s);
    add("op:scale", {u}, [=] { return scale(u, -1.7); }, s);
    add("op:add_bias", {u, bias}, [=] { return add_bias(u, bias); }, s);
    add("op:reshape", {u}, [=] { return reshape(u, {2, 6}); }, s);
    add("op:gather_rows", {src}, [=] { return gather_rows(src, idx); }, s);
    add("op:neighborhood_reduce", {nbr}, [=] { return neighborhood_reduce(nbr); }, s);
    add("op:neighborhood_max", {nbr}, [=] { return neighborhood_max(nbr); }, s);
    add("op:sub_center", {nbr, ctr}, [=] { return sub_center(nbr, ctr); }, s);
    add("op:group_scale", {nbr, scores}, [=] { return group_scale(nbr, scores); }, s);
    add("op:neighborhood_outer", {h, nbr}, [=] { return neighborhood_outer(h, nbr); }, s);
    add("op:head_dot", {q, kc}, [=] { return head_dot(q, kc, 3, 0.7); }, s);
    add("op:broadcast_slots", {vec}, [=] { return broadcast_slots(vec, 2, 3); }, s);
    add("op:concat_last", {u, v}, [=] { return concat_last(u, v); }, s);
    add("op:swap_last_axes", {nbr}, [=] { return swap_last_axes(nbr); }, s);
    add("op:sigmoid", {u}, [=] { return sigmoid(u); }, s);
    add("op:relu", {u}, [=] { return relu(u); }, s);
    add("op:softmax", {u}, [=] { return pointwise(u, Pointwise::softmax_over_last); }, s);
    add("op:mean", {u}, [=] { return mean(u); }, s);
    add("op:segment_mean", {src}, [=] { return segment_mean(src, {{0, 2}, {4}, {1, 3, 0}}); }, s);
    add("op:scale_columns", {u, bias}, [=] { return scale_columns(u, bias); }, s);
    add("op:standardize_columns", {u}, [=] { return standardize_columns(u, 1e-3); }, s);
  }

  const PointCloud cloud = random_cloud(24, 8, rng);
  const Neighborhood nbr = knn(cloud, cloud, 6);
  const struct {
    Variant v;
    Activation a;
    bool no_conv;
  } layers[] = {{Variant::pointconv, Activation::sigmoid, false},
                {Variant::pcf_subtractive, Activation::sigmoid, false},
                {Variant::pcf_subtractive, Activation::softmax, false},
                {Variant::pcf_subtractive, Activation::relu, false},
                {Variant::pcf_qkv, Activation::sigmoid, false},
                {Variant::pcf_qkv, Activation::softmax, false},
                {Variant::pcf_subtractive, Activation::sigmoid, true},
                {Variant::attention_baseline, Activation::softmax, false}};
  for (const auto& l : layers) {
    PcfLayerConfig cfg = layer(l.v, 8, 8, 2, l.a);
    cfg.disable_conv = l.no_conv;
    const PcfParams p = PcfParams::create(cfg, rng);
    const Tensor x = random_tensor({24, 8}, rng);
    std::vector<Tensor> params = params_of(p);
    params.push_back(x);
    add("layer:" + to_string(l.v) + "/" + to_string(l.a) + (l.no_conv ? "/no_conv" : ""), params,
        [=] { return apply_layer(x, x, nbr, p).features; }, kLayerStep);
  }

  for (Variant v : {Variant::pointconv, Variant::pcf_subtractive, Variant::pcf_qkv}) {
    BlockSpec spec;
    spec.in_channels = 8;
    spec.out_channels = 8;
    spec.shortcut = ShortcutKind::linear;
    spec.op = layer(v, 0, 0, 2);
    spec.post_relu = false;
    const BlockParams b = BlockParams::create(spec, rng);
    const Tensor x = random_tensor({24, 8}, rng);
    std::vector<NamedTensor> named;
    b.collect("b", named);
    std::vector<Tensor> params{x};
    for (auto& n : named)
      if (n.trainable) params.push_back(n.tensor);
    add("residual_block:" + to_string(v), params, [=] { return residual_block(x, nbr, b); }, kLayerStep);
  }
  {
    const auto [coarse, pooling] = grid_subsample(cloud, 0.5);
    const Neighborhood down = knn(cloud, coarse, 4);
    BlockSpec spec;
    spec.in_channels = 8;
    spec.out_channels = 16;
    spec.shortcut = ShortcutKind::maxpool_linear;
    spec.op = layer(Variant::pcf_subtractive, 0, 0, 2);
    spec.use_norm = true;
    spec.post_relu = false;
    const BlockParams b = BlockParams::create(spec, rng);
    const Tensor x = random_tensor({24, 8}, rng);
    std::vector<NamedTensor> named;
    b.collect("b", named);
    std::vector<Tensor> params{x};
    for (auto& n : named)
      if (n.trainable) params.push_back(n.tensor);
    const SubsampleMap pool = pooling;
    add("residual_block:downsampling", params,
        [=] { return residual_block(x, down, b, Mode::eval, nullptr, &pool); }, kLayerStep);
  }
  {
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
    cfg.use_norm = false;
    const UNet net = UNet::create(cfg, rng);
    const Hierarchy h = build_hierarchy(random_cloud(32, 3, rng), cfg);
    add("unet:2_levels", net.parameters(), [&] { return unet_forward(h, net); }, kLayerStep);
  }
  return rep;
}

/// Translation, neighbor-slot permutation and score-range properties.
inline CheckReport run_invariance_suite(std::uint64_t seed = 0) {
  using namespace detail;
  Rng rng(seed);
  CheckReport rep{"invariance", {}};
  const Vec3 shifts[] = {{0.7310585786, -12.345678, 3.14159265}, {8.0, -0.5, 1024.25}};

  const PointCloud cloud = random_cloud(200, 8, rng);
  const Neighborhood nbr = knn(cloud, cloud, 16);
  const Tensor x = cloud.feature_tensor();
  const Variant variants[] = {Variant::pointconv, Variant::pcf_subtractive, Variant::pcf_qkv,
                              Variant::attention_baseline};
  for (Variant v : variants) {
    const PcfParams p =
        PcfParams::create(layer(v, 8, 8, 4, v == Variant::attention_baseline ? Activation::softmax
                                                                              : Activation::sigmoid),
                          rng);
    const Tensor base = apply_layer(x, x, nbr, p).features;
    double moved = 0.0;
    for (const auto& t : shifts) {
      const PointCloud c2 = translated(cloud, t);
      const Neighborhood n2 = knn(c2, c2, 16);
      moved = std::max(moved, max_abs_diff(apply_layer(x, x, n2, p).features, base));
    }
    rep.rows.push_back({"translation:" + to_string(v), moved, 1e-9});
    const Neighborhood shuffled = permute_slots(nbr, rng);
    rep.rows.push_back({"slot_permutation:" + to_string(v),
                        max_abs_diff(apply_layer(x, x, shuffled, p).features, base), 1e-12});
  }

  NetConfig cfg;
  cfg.in_channels = 3;
  cfg.levels = 3;
  cfg.base_width = 8;
  cfg.base_grid = 0.15;
  cfg.blocks_per_level = {1, 1, 1};
  cfg.k = 4;
  cfg.heads = 2;
  cfg.c_mid = 4;
  for (Variant v : variants) {
    cfg.variant = v;
    const UNet net = UNet::create(cfg, rng);
    const PointCloud c = random_cloud(256, 3, rng);
    const Tensor base = unet_forward(c, net);
    double moved = 0.0;
    for (const auto& t : shifts) moved = std::max(moved, max_abs_diff(unet_forward(translated(c, t), net), base));
    rep.rows.push_back({"translation:unet/" + to_string(v), moved, 1e-9});
  }

  double row_sum = 0.0, outside = -INFINITY;
  for (Variant v : {Variant::pcf_subtractive, Variant::pcf_qkv}) {
    for (Activation a : {Activation::softmax, Activation::sigmoid}) {
      const PcfParams p = PcfParams::create(layer(v, 8, 8, 4, a), rng);
      const ScoreBlock s = pcf_forward_with_scores(x, x, nbr, p).scores;
      for (std::size_t q = 0; q < s.points(); ++q) {
        for (std::size_t h = 0; h < s.heads(); ++h) {
          double total = 0.0;
          for (std::size_t j = 0; j < s.k(); ++j) {
            const double val = s.at(q, j, h);
            total += val;
            if (a == Activation::sigmoid) outside = std::max(outside, std::max(-val, val - 1.0));
          }
          if (a == Activation::softmax) row_sum = std::max(row_sum, std::abs(total - 1.0));
        }
      }
    }
  }
  rep.rows.push_back({"softmax_row_sum_error", row_sum, 1e-12});
  rep.rows.push_back({"sigmoid_distance_outside_(0,1)", outside, 0.0});
  return rep;
}

inline CheckReport run_suite(std::string_view name, std::uint64_t seed = 0) {
  if (name == "oracle") return run_oracle_suite(seed);
  if (name == "gradcheck") return run_gradcheck_suite(seed);
  if (name == "invariance") return run_invariance_suite(seed);
  throw ConfigError("unknown suite '" + std::string(name) + "' (expected gradcheck|oracle|invariance)");
}

}  // namespace pcf::checks
