#pragma once

// Point convolution operators: PointConv, reweighted PointConv (subtractive and
// dot-product reweighting) in factorized form, a scalar-loop reference, the
// softmax attention baseline and the score-difference diagnostic.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pcf/geometry.hpp"
#include "pcf/rng.hpp"
#include "pcf/tensor.hpp"

namespace pcf {

enum class Variant { pointconv, pcf_subtractive, pcf_qkv, attention_baseline };
enum class Activation { sigmoid, softmax, relu, constant_one };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::pointconv: return "pointconv";
    case Variant::pcf_subtractive: return "pcf_subtractive";
    case Variant::pcf_qkv: return "pcf_qkv";
    case Variant::attention_baseline: return "attention_baseline";
  }
  return "?";
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::sigmoid: return "sigmoid";
    case Activation::softmax: return "softmax";
    case Activation::relu: return "relu";
    case Activation::constant_one: return "constant_one";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (auto v : {Variant::pointconv, Variant::pcf_subtractive, Variant::pcf_qkv,
                 Variant::attention_baseline}) {
    if (s == to_string(v)) return v;
  }
  throw ConfigError("unknown variant '" + std::string(s) +
                    "' (expected pointconv|pcf_subtractive|pcf_qkv|attention_baseline)");
}

inline Activation parse_activation(std::string_view s) {
  for (auto a : {Activation::sigmoid, Activation::softmax, Activation::relu,
                 Activation::constant_one}) {
    if (s == to_string(a)) return a;
  }
  throw ConfigError("unknown activation '" + std::string(s) +
                    "' (expected sigmoid|softmax|relu|constant_one)");
}

/// A tensor with its checkpoint name. Buffers (trainable == false) are saved
/// but never touched by the optimizer.
struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined

  static Linear create(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l;
    l.weight = Tensor({in, out}, rng.uniform_vector(in * out, -bound, bound));
    l.weight.set_requires_grad();
    if (with_bias) {
      l.bias = Tensor({out}, rng.uniform_vector(out, -bound, bound));
      l.bias.set_requires_grad();
    }
    return l;
  }

  bool defined() const { return weight.defined(); }
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  /// Row-vector evaluation with plain loops.
  std::vector<double> apply(std::span<const double> in) const {
    const std::size_t ni = in_features(), no = out_features();
    std::vector<double> out(no, 0.0);
    for (std::size_t o = 0; o < no; ++o) {
      double acc = bias.defined() ? bias[o] : 0.0;
      for (std::size_t i = 0; i < ni; ++i) acc += in[i] * weight[i * no + o];
      out[o] = acc;
    }
    return out;
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    if (!defined()) return;
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

/// Linear layers with relu between them; `relu_last` also rectifies the output.
struct Mlp {
  std::vector<Linear> layers;
  bool relu_last = false;

  static Mlp create(const std::vector<std::size_t>& widths, bool relu_last, Rng& rng) {
    Mlp m;
    m.relu_last = relu_last;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      m.layers.push_back(Linear::create(widths[i], widths[i + 1], rng));
    }
    return m;
  }

  bool empty() const { return layers.empty(); }

  Tensor operator()(const Tensor& x) const {
    Tensor y = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      y = layers[i](y);
      if (i + 1 < layers.size() || relu_last) y = relu(y);
    }
    return y;
  }

  std::vector<double> apply(std::span<const double> in) const {
    std::vector<double> y(in.begin(), in.end());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      y = layers[i].apply(y);
      if (i + 1 < layers.size() || relu_last) {
        for (double& v : y) v = v > 0.0 ? v : 0.0;
      }
    }
    return y;
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].collect(prefix + "." + std::to_string(i), out);
    }
  }
};

struct PcfLayerConfig {
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t c_mid = 16;
  std::size_t heads = 8;
  std::size_t psi_depth = 2;  // hidden layers in the reweighting MLP
  std::size_t d_qk = 0;       // per-head query/key width; 0 picks c_in / heads
  Variant variant = Variant::pcf_subtractive;
  Activation activation = Activation::sigmoid;
  bool disable_conv = false;  // replace h(dp) by a learned constant vector

  std::size_t qk_width() const { return d_qk ? d_qk : std::max<std::size_t>(1, c_in / heads); }

  void validate() const {
    if (c_in == 0 || c_out == 0 || c_mid == 0) {
      throw ConfigError(detail::concat("layer widths must be positive (c_in=", c_in,
                                       ", c_out=", c_out, ", c_mid=", c_mid, ")"));
    }
    if (heads == 0) throw ConfigError("heads must be positive");
    const bool reweighted = variant == Variant::pcf_subtractive || variant == Variant::pcf_qkv;
    if (reweighted && c_in % heads != 0) {
      throw ConfigError(detail::concat("heads=", heads, " does not divide c_in=", c_in));
    }
    if (variant == Variant::attention_baseline && c_out % heads != 0) {
      throw ConfigError(detail::concat("heads=", heads, " does not divide c_out=", c_out,
                                       " for the attention baseline"));
    }
  }
};

/// Trainable state of one operator layer. Which members are populated
/// depends on the variant.
struct PcfParams {
  PcfLayerConfig config;
  Mlp pos_mlp;        // h: R^3 -> R^c_mid
  Mlp psi_mlp;        // reweighting MLP: R^c_in -> R^heads (pcf_subtractive)
  Linear query;       // pcf_qkv, attention_baseline
  Linear key;         // pcf_qkv, attention_baseline
  Linear value;       // attention_baseline
  Linear pos_head;    // attention_baseline: c_mid -> heads
  Tensor weight;      // W_l as [(c_mid * c_in), c_out]
  Tensor const_embed; // [c_mid], stands in for h when disable_conv

  static PcfParams create(const PcfLayerConfig& cfg, Rng& rng) {
    cfg.validate();
    PcfParams p;
    p.config = cfg;
    p.pos_mlp = Mlp::create({3, cfg.c_mid, cfg.c_mid}, /*relu_last=*/true, rng);
    switch (cfg.variant) {
      case Variant::pcf_subtractive: {
        std::vector<std::size_t> widths(cfg.psi_depth + 1, cfg.c_in);
        widths.push_back(cfg.heads);
        p.psi_mlp = Mlp::create(widths, false, rng);
        break;
      }
      case Variant::pcf_qkv:
        p.query = Linear::create(cfg.c_in, cfg.heads * cfg.qk_width(), rng);
        p.key = Linear::create(cfg.c_in, cfg.heads * cfg.qk_width(), rng);
        break;
      case Variant::attention_baseline:
        p.query = Linear::create(cfg.c_in, cfg.heads * cfg.qk_width(), rng);
        p.key = Linear::create(cfg.c_in, cfg.heads * cfg.qk_width(), rng);
        p.value = Linear::create(cfg.c_in, cfg.c_out, rng);
        p.pos_head = Linear::create(cfg.c_mid, cfg.heads, rng);
        break;
      case Variant::pointconv:
        break;
    }
    if (cfg.variant != Variant::attention_baseline) {
      const std::size_t fan_in = cfg.c_mid * cfg.c_in;
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      p.weight = Tensor({fan_in, cfg.c_out}, rng.uniform_vector(fan_in * cfg.c_out, -bound, bound));
      p.weight.set_requires_grad();
      if (cfg.disable_conv) {
        p.const_embed = Tensor::ones({cfg.c_mid});
        p.const_embed.set_requires_grad();
      }
    }
    return p;
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    pos_mlp.collect(prefix + ".pos_mlp", out);
    psi_mlp.collect(prefix + ".psi_mlp", out);
    query.collect(prefix + ".query", out);
    key.collect(prefix + ".key", out);
    value.collect(prefix + ".value", out);
    pos_head.collect(prefix + ".pos_head", out);
    if (weight.defined()) out.push_back({prefix + ".weight", weight});
    if (const_embed.defined()) out.push_back({prefix + ".const_embed", const_embed});
  }

  std::vector<Tensor> parameters() const {
    std::vector<NamedTensor> named;
    collect("", named);
    std::vector<Tensor> out;
    for (auto& n : named) out.push_back(n.tensor);
    return out;
  }
};

/// Reweighting scores, N x K x heads.
struct ScoreBlock {
  Tensor values;

  std::size_t points() const { return values.dim(0); }
  std::size_t k() const { return values.dim(1); }
  std::size_t heads() const { return values.dim(2); }
  double at(std::size_t n, std::size_t j, std::size_t h) const {
    return values[(n * k() + j) * heads() + h];
  }
};

namespace detail {

inline void check_layer_inputs(const Tensor& src, const Tensor& center, const Neighborhood& nbr,
                               const PcfParams& p) {
  require_rank(src, 2, "layer source features");
  require_rank(center, 2, "layer center features");
  if (src.dim(1) != p.config.c_in || center.dim(1) != p.config.c_in) {
    throw DimensionError(concat("layer expects ", p.config.c_in, " input channels, got source ",
                                shape_str(src.shape()), " and center ", shape_str(center.shape())));
  }
  if (center.dim(0) != nbr.queries()) {
    throw DimensionError(concat("neighborhood has ", nbr.queries(), " queries but ",
                                center.dim(0), " center rows"));
  }
  for (std::size_t idx : nbr.indices.values) {
    if (idx >= src.dim(0)) {
      throw IndexError(concat("neighbor index ", idx, " outside ", src.dim(0), " source rows"));
    }
  }
}

inline Tensor apply_activation(const Tensor& logits, Activation act) {
  switch (act) {
    case Activation::sigmoid: return sigmoid(logits);
    case Activation::relu: return relu(logits);
    case Activation::softmax:
      return swap_last_axes(pointwise(swap_last_axes(logits), Pointwise::softmax_over_last));
    case Activation::constant_one: return Tensor::ones(logits.shape());
  }
  throw ConfigError("unknown activation");
}

inline Tensor neighbor_offsets(const Neighborhood& nbr) {
  return Tensor({nbr.queries(), nbr.k(), 3}, nbr.rel_pos);
}

}  // namespace detail

/// h(p_i - p) for every neighbor slot: [N,K,3] -> [N,K,c_mid].
inline Tensor positional_embed(const Tensor& rel_pos, const PcfParams& p) {
  return p.pos_mlp(rel_pos);
}

/// Scores from feature differences X_{p_i} - X_p.
inline ScoreBlock psi_subtractive(const Tensor& center_feats, const Tensor& nbr_feats,
                                  const PcfParams& p) {
  if (p.config.activation == Activation::constant_one) {
    return {Tensor::ones({nbr_feats.dim(0), nbr_feats.dim(1), p.config.heads})};
  }
  if (p.psi_mlp.empty()) {
    throw ConfigError("psi_subtractive: layer of variant " + to_string(p.config.variant) +
                      " has no reweighting MLP");
  }
  return {detail::apply_activation(p.psi_mlp(sub_center(nbr_feats, center_feats)),
                                   p.config.activation)};
}

/// Scores from per-head query/key dot products scaled by 1/sqrt(d_qk).
inline ScoreBlock psi_qkv(const Tensor& center_feats, const Tensor& nbr_feats, const PcfParams& p) {
  if (p.config.variant != Variant::pcf_qkv || !p.query.defined()) {
    throw ConfigError("psi_qkv: layer variant is " + to_string(p.config.variant) +
                      ", expected pcf_qkv");
  }
  if (p.config.activation == Activation::constant_one) {
    return {Tensor::ones({nbr_feats.dim(0), nbr_feats.dim(1), p.config.heads})};
  }
  const double factor = 1.0 / std::sqrt(static_cast<double>(p.config.qk_width()));
  return {detail::apply_activation(
      head_dot(p.query(nbr_feats), p.key(center_feats), p.config.heads, factor),
      p.config.activation)};
}

struct LayerOutput {
  Tensor features;
  ScoreBlock scores;  // reweighting scores or attention weights; empty for pointconv
};

namespace detail {

inline Tensor conv_embedding(const Neighborhood& nbr, const PcfParams& p) {
  if (p.config.disable_conv) return broadcast_slots(p.const_embed, nbr.queries(), nbr.k());
  return positional_embed(neighbor_offsets(nbr), p);
}

inline Tensor factorized_conv(const Tensor& h, const Tensor& weighted_nbr, const PcfParams& p) {
  return matmul(neighborhood_outer(h, weighted_nbr), p.weight);
}

}  // namespace detail

/// Efficient PointConv: W_l . vec(sum_i h(p_i - p) X_{p_i}^T).
inline Tensor pointconv_forward(const Tensor& src, const Neighborhood& nbr, const PcfParams& p) {
  if (p.config.variant != Variant::pointconv) {
    throw ConfigError("pointconv_forward on a layer of variant " + to_string(p.config.variant));
  }
  detail::require_rank(src, 2, "pointconv source features");
  if (src.dim(1) != p.config.c_in) {
    throw DimensionError(detail::concat("pointconv expects ", p.config.c_in, " channels, got ",
                                        shape_str(src.shape())));
  }
  for (std::size_t idx : nbr.indices.values) {
    if (idx >= src.dim(0)) {
      throw IndexError(detail::concat("neighbor index ", idx, " outside ", src.dim(0), " rows"));
    }
  }
  return detail::factorized_conv(detail::conv_embedding(nbr, p), gather_rows(src, nbr.indices), p);
}

/// Efficient reweighted convolution with explicit center features (used when the
/// queries are a different cloud than the sources).
inline LayerOutput pcf_forward_with_scores(const Tensor& src, const Tensor& center,
                                           const Neighborhood& nbr, const PcfParams& p) {
  if (p.config.variant != Variant::pcf_subtractive && p.config.variant != Variant::pcf_qkv) {
    throw ConfigError("pcf_forward on a layer of variant " + to_string(p.config.variant));
  }
  detail::check_layer_inputs(src, center, nbr, p);
  const Tensor nbr_feats = gather_rows(src, nbr.indices);
  ScoreBlock scores = p.config.variant == Variant::pcf_subtractive
                          ? psi_subtractive(center, nbr_feats, p)
                          : psi_qkv(center, nbr_feats, p);
  Tensor out = detail::factorized_conv(detail::conv_embedding(nbr, p),
                                       group_scale(nbr_feats, scores.values), p);
  return {std::move(out), std::move(scores)};
}

inline Tensor pcf_forward(const Tensor& src, const Tensor& center, const Neighborhood& nbr,
                          const PcfParams& p) {
  return pcf_forward_with_scores(src, center, nbr, p).features;
}

/// Same-cloud form: the queries are the source points themselves.
inline Tensor pcf_forward(const Tensor& feats, const Neighborhood& nbr, const PcfParams& p) {
  return pcf_forward(feats, feats, nbr, p);
}

/// Softmax attention over the neighborhood weighting v(X_{p_i}); the logits
/// are q(X_{p_i}).k(X_p)/sqrt(d) plus a per-head positional scalar.
inline LayerOutput attention_baseline_with_weights(const Tensor& src, const Tensor& center,
                                                   const Neighborhood& nbr, const PcfParams& p) {
  if (p.config.variant != Variant::attention_baseline) {
    throw ConfigError("attention_baseline_forward on a layer of variant " +
                      to_string(p.config.variant));
  }
  detail::check_layer_inputs(src, center, nbr, p);
  const Tensor nbr_feats = gather_rows(src, nbr.indices);
  const double factor = 1.0 / std::sqrt(static_cast<double>(p.config.qk_width()));
  const Tensor logits =
      add(head_dot(p.query(nbr_feats), p.key(center), p.config.heads, factor),
          p.pos_head(positional_embed(detail::neighbor_offsets(nbr), p)));
  ScoreBlock weights{detail::apply_activation(logits, Activation::softmax)};
  Tensor out = neighborhood_reduce(group_scale(p.value(nbr_feats), weights.values));
  return {std::move(out), std::move(weights)};
}

inline Tensor attention_baseline_forward(const Tensor& src, const Tensor& center,
                                         const Neighborhood& nbr, const PcfParams& p) {
  return attention_baseline_with_weights(src, center, nbr, p).features;
}

inline Tensor attention_baseline_forward(const Tensor& feats, const Neighborhood& nbr,
                                         const PcfParams& p) {
  return attention_baseline_forward(feats, feats, nbr, p);
}

/// Dispatches on the layer's variant.
inline LayerOutput apply_layer(const Tensor& src, const Tensor& center, const Neighborhood& nbr,
                               const PcfParams& p) {
  switch (p.config.variant) {
    case Variant::pointconv: return {pointconv_forward(src, nbr, p), {}};
    case Variant::pcf_subtractive:
    case Variant::pcf_qkv: return pcf_forward_with_scores(src, center, nbr, p);
    case Variant::attention_baseline: return attention_baseline_with_weights(src, center, nbr, p);
  }
  throw ConfigError("unknown variant");
}

/// Direct per-slot evaluation: materializes w(p_i - p) = W_l h(p_i - p) as a
/// c_out x c_in matrix for every neighbor and sums w psi X. Shares no tensor
/// kernels with the factorized path. Accepts pointconv (psi = 1) and both
/// reweighted variants.
inline Tensor pcf_forward_naive(const Tensor& src, const Tensor& center, const Neighborhood& nbr,
                                const PcfParams& p) {
  const auto& cfg = p.config;
  if (cfg.variant == Variant::attention_baseline) {
    throw ConfigError("pcf_forward_naive does not cover the attention baseline");
  }
  if (cfg.variant != Variant::pointconv) detail::check_layer_inputs(src, center, nbr, p);
  const std::size_t n_q = nbr.queries(), k = nbr.k(), cin = cfg.c_in, cout = cfg.c_out,
                    cmid = cfg.c_mid, heads = cfg.heads;
  const std::size_t group = cin / std::max<std::size_t>(1, heads);
  const auto x_row = [&](std::size_t r) { return src.data().subspan(r * cin, cin); };

  std::vector<double> out(n_q * cout, 0.0);
  std::vector<double> scores(k * heads, 1.0);
  std::vector<double> w(cout * cin);
  for (std::size_t n = 0; n < n_q; ++n) {
    const auto c_row = center.data().subspan(n * cin, cin);
    const bool reweighted = cfg.variant != Variant::pointconv &&
                            cfg.activation != Activation::constant_one;
    std::fill(scores.begin(), scores.end(), 1.0);
    if (reweighted) {
      for (std::size_t j = 0; j < k; ++j) {
        const auto x = x_row(nbr.indices(n, j));
        std::vector<double> logits;
        if (cfg.variant == Variant::pcf_subtractive) {
          std::vector<double> diff(cin);
          for (std::size_t i = 0; i < cin; ++i) diff[i] = x[i] - c_row[i];
          logits = p.psi_mlp.apply(diff);
        } else {
          const auto q = p.query.apply(x);
          const auto kk = p.key.apply(c_row);
          const std::size_t d = cfg.qk_width();
          logits.assign(heads, 0.0);
          for (std::size_t h = 0; h < heads; ++h) {
            double dot = 0.0;
            for (std::size_t e = 0; e < d; ++e) dot += q[h * d + e] * kk[h * d + e];
            logits[h] = dot / std::sqrt(static_cast<double>(d));
          }
        }
        for (std::size_t h = 0; h < heads; ++h) scores[j * heads + h] = logits[h];
      }
      for (std::size_t h = 0; h < heads; ++h) {
        if (cfg.activation == Activation::softmax) {
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, scores[j * heads + h]);
          double z = 0.0;
          for (std::size_t j = 0; j < k; ++j) z += std::exp(scores[j * heads + h] - mx);
          for (std::size_t j = 0; j < k; ++j) {
            scores[j * heads + h] = std::exp(scores[j * heads + h] - mx) / z;
          }
        } else {
          for (std::size_t j = 0; j < k; ++j) {
            double& s = scores[j * heads + h];
            s = cfg.activation == Activation::sigmoid ? 1.0 / (1.0 + std::exp(-s))
                                                      : std::max(s, 0.0);
          }
        }
      }
    }
    for (std::size_t j = 0; j < k; ++j) {
      std::vector<double> h;
      if (cfg.disable_conv) {
        h.assign(p.const_embed.data().begin(), p.const_embed.data().end());
      } else {
        h = p.pos_mlp.apply(std::span<const double>(nbr.rel_pos).subspan((n * k + j) * 3, 3));
      }
      // w[o][i] = sum_m W_l[(m, i), o] h[m]
      std::fill(w.begin(), w.end(), 0.0);
      for (std::size_t m = 0; m < cmid; ++m) {
        for (std::size_t i = 0; i < cin; ++i) {
          const double* wl = p.weight.data().data() + (m * cin + i) * cout;
          for (std::size_t o = 0; o < cout; ++o) w[o * cin + i] += wl[o] * h[m];
        }
      }
      const auto x = x_row(nbr.indices(n, j));
      for (std::size_t o = 0; o < cout; ++o) {
        double acc = 0.0;
        for (std::size_t i = 0; i < cin; ++i) {
          const double s = reweighted ? scores[j * heads + i / group] : 1.0;
          acc += w[o * cin + i] * s * x[i];
        }
        out[n * cout + o] += acc;
      }
    }
  }
  return Tensor({n_q, cout}, std::move(out));
}

inline Tensor pcf_forward_naive(const Tensor& feats, const Neighborhood& nbr, const PcfParams& p) {
  return pcf_forward_naive(feats, feats, nbr, p);
}

/// Per point: the spread max - min of the scores over the neighborhood,
/// taken per head, then the largest spread over heads.
inline Tensor score_diff(const ScoreBlock& scores) {
  const std::size_t n = scores.points(), k = scores.k(), heads = scores.heads();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t h = 0; h < heads; ++h) {
      double lo = scores.at(i, 0, h), hi = lo;
      for (std::size_t j = 1; j < k; ++j) {
        lo = std::min(lo, scores.at(i, j, h));
        hi = std::max(hi, scores.at(i, j, h));
      }
      out[i] = std::max(out[i], hi - lo);
    }
  }
  return Tensor({n}, std::move(out));
}

/// max |a - b| / max |b|, the norm-wise relative difference used by the
/// equivalence checks.
inline double max_relative_difference(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "max_relative_difference");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  if (num == 0.0) return 0.0;
  return num / std::max(den, 1e-300);
}

}  // namespace pcf
