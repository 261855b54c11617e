#pragma once

// Bottleneck residual blocks, point deconvolution and the multi-level U-Net
// segmentation backbone built on them.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "pcf/geometry.hpp"
#include "pcf/pcf.hpp"
#include "pcf/rng.hpp"
#include "pcf/tensor.hpp"

namespace pcf {

enum class Mode { train, eval };

/// Per-feature normalization over the points of one cloud. Train mode uses
/// the batch statistics and updates the running ones; eval mode uses the
/// running statistics.
struct Norm {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;  // buffer
  Tensor running_var;   // buffer
  double momentum = 0.1;
  double eps = 1e-5;

  static Norm create(std::size_t channels) {
    Norm n;
    n.gamma = Tensor::ones({channels});
    n.gamma.set_requires_grad();
    n.beta = Tensor::zeros({channels});
    n.beta.set_requires_grad();
    n.running_mean = Tensor::zeros({channels});
    n.running_var = Tensor::ones({channels});
    return n;
  }

  bool defined() const { return gamma.defined(); }

  Tensor operator()(const Tensor& x, Mode mode) const {
    if (!defined()) return x;
    detail::require_rank(x, 2, "norm");
    const std::size_t n = x.dim(0), c = x.dim(1);
    if (mode == Mode::eval) {
      std::vector<double> s(c), b(c);
      for (std::size_t j = 0; j < c; ++j) {
        s[j] = 1.0 / std::sqrt(running_var[j] + eps);
        b[j] = -running_mean[j] * s[j];
      }
      return add_bias(scale_columns(add_bias(scale_columns(x, Tensor({c}, s)), Tensor({c}, b)), gamma),
                      beta);
    }
    update_running(x, n, c);
    return add_bias(scale_columns(standardize_columns(x, eps), gamma), beta);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    if (!defined()) return;
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
    out.push_back({prefix + ".running_mean", running_mean, false});
    out.push_back({prefix + ".running_var", running_var, false});
  }

 private:
  void update_running(const Tensor& x, std::size_t n, std::size_t c) const {
    // Buffers are shared handles, so the update is visible to every copy.
    Tensor rm = running_mean, rv = running_var;
    auto m = rm.mutable_data();
    auto v = rv.mutable_data();
    for (std::size_t j = 0; j < c; ++j) {
      double mu = 0.0;
      for (std::size_t r = 0; r < n; ++r) mu += x[r * c + j];
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t r = 0; r < n; ++r) var += (x[r * c + j] - mu) * (x[r * c + j] - mu);
      var /= static_cast<double>(n);
      m[j] = (1.0 - momentum) * m[j] + momentum * mu;
      v[j] = (1.0 - momentum) * v[j] + momentum * var;
    }
  }
};

enum class ShortcutKind { identity, linear, maxpool_linear };

inline std::string to_string(ShortcutKind s) {
  switch (s) {
    case ShortcutKind::identity: return "identity";
    case ShortcutKind::linear: return "linear";
    case ShortcutKind::maxpool_linear: return "maxpool_linear";
  }
  return "?";
}

struct BlockSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  double bottleneck_ratio = 0.25;
  PcfLayerConfig op;  // c_in and c_out are overwritten with the bottleneck width
  ShortcutKind shortcut = ShortcutKind::identity;
  bool use_norm = false;
  bool post_relu = true;

  std::size_t mid_channels() const {
    const auto m = static_cast<std::size_t>(std::lround(static_cast<double>(out_channels) * bottleneck_ratio));
    return std::max<std::size_t>(1, m);
  }

  PcfLayerConfig op_config() const {
    PcfLayerConfig cfg = op;
    cfg.c_in = cfg.c_out = mid_channels();
    return cfg;
  }

  void validate() const {
    if (in_channels == 0 || out_channels == 0) throw ConfigError("block widths must be positive");
    if (!(bottleneck_ratio > 0.0)) throw ConfigError("bottleneck_ratio must be positive");
    if (shortcut == ShortcutKind::identity && in_channels != out_channels) {
      throw ConfigError(detail::concat("identity shortcut needs in_channels == out_channels, got ",
                                       in_channels, " and ", out_channels));
    }
    op_config().validate();
  }
};

struct BlockParams {
  BlockSpec spec;
  Linear lin1;
  Norm norm1;
  PcfParams op;
  Norm norm2;
  Linear lin2;
  Norm norm3;
  Linear shortcut;  // undefined for the identity shortcut

  static BlockParams create(const BlockSpec& spec, Rng& rng) {
    spec.validate();
    BlockParams b;
    b.spec = spec;
    const std::size_t mid = spec.mid_channels();
    b.lin1 = Linear::create(spec.in_channels, mid, rng);
    b.op = PcfParams::create(spec.op_config(), rng);
    b.lin2 = Linear::create(mid, spec.out_channels, rng);
    if (spec.use_norm) {
      b.norm1 = Norm::create(mid);
      b.norm2 = Norm::create(mid);
      b.norm3 = Norm::create(spec.out_channels);
    }
    if (spec.shortcut != ShortcutKind::identity) {
      b.shortcut = Linear::create(spec.in_channels, spec.out_channels, rng);
    }
    return b;
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    lin1.collect(prefix + ".lin1", out);
    norm1.collect(prefix + ".norm1", out);
    op.collect(prefix + ".op", out);
    norm2.collect(prefix + ".norm2", out);
    lin2.collect(prefix + ".lin2", out);
    norm3.collect(prefix + ".norm3", out);
    shortcut.collect(prefix + ".shortcut", out);
  }
};

/// Per-channel max over each coarse point's fine neighborhood, then a linear
/// map to the block's output width.
inline Tensor downsample_shortcut(const Tensor& fine_feats, const Neighborhood& pooling_nbr,
                                  const Linear& proj) {
  return proj(neighborhood_max(gather_rows(fine_feats, pooling_nbr.indices)));
}

/// shortcut(x) + lin2(op(lin1(x))), then an optional relu. For the max-pool
/// shortcut `nbr` maps the coarse queries to the fine input points, and
/// `pooling` supplies the fine members of each coarse point; their mean is the
/// coarse point's own feature in the operator.
inline Tensor residual_block(const Tensor& x, const Neighborhood& nbr, const BlockParams& p,
                             Mode mode = Mode::eval, ScoreBlock* scores = nullptr,
                             const SubsampleMap* pooling = nullptr) {
  detail::require_rank(x, 2, "residual_block");
  if (x.dim(1) != p.spec.in_channels) {
    throw DimensionError(detail::concat("residual_block expects ", p.spec.in_channels,
                                        " channels, got ", shape_str(x.shape())));
  }
  const bool pooled = p.spec.shortcut == ShortcutKind::maxpool_linear;
  if (!pooled && nbr.queries() != x.dim(0)) {
    throw ConfigError(detail::concat(to_string(p.spec.shortcut), " shortcut cannot change cardinality (",
                                     x.dim(0), " -> ", nbr.queries(), " points); use maxpool_linear"));
  }
  if (pooled && (!pooling || pooling->parent.size() != nbr.queries())) {
    throw ConfigError(detail::concat("maxpool_linear block needs the subsample map of its ",
                                     nbr.queries(), " coarse points"));
  }
  const Tensor h = relu(p.norm1(p.lin1(x), mode));
  const Tensor center = pooled ? segment_mean(h, pooling->parent) : h;
  LayerOutput y = apply_layer(h, center, nbr, p.op);
  if (scores) *scores = y.scores;
  const Tensor branch = p.norm3(p.lin2(relu(p.norm2(y.features, mode))), mode);

  Tensor skip;
  switch (p.spec.shortcut) {
    case ShortcutKind::identity: skip = x; break;
    case ShortcutKind::linear: skip = p.shortcut(x); break;
    case ShortcutKind::maxpool_linear: skip = downsample_shortcut(x, nbr, p.shortcut); break;
  }
  const Tensor out = add(skip, branch);
  return p.spec.post_relu ? relu(out) : out;
}

/// PointConv evaluated at fine query points from coarse sources.
inline Tensor pointconv_deconv(const Tensor& coarse_feats, const Neighborhood& up_nbr,
                               const PcfParams& p) {
  return pointconv_forward(coarse_feats, up_nbr, p);
}

struct NetConfig {
  std::size_t in_channels = 4;
  std::size_t num_classes = 3;
  std::size_t levels = 5;
  std::size_t base_width = 64;
  double base_grid = 0.04;  // level l cell = base_grid * 2^l
  std::vector<std::size_t> blocks_per_level{1, 2, 2, 2, 2};
  std::size_t k = 16;
  std::size_t heads = 8;
  std::size_t c_mid = 16;
  std::size_t psi_depth = 2;
  double bottleneck_ratio = 0.25;
  Variant variant = Variant::pcf_subtractive;
  Activation activation = Activation::sigmoid;
  bool disable_conv = false;
  bool use_norm = true;
  bool post_relu = true;

  std::size_t width(std::size_t level) const { return base_width << level; }
  double grid(std::size_t level) const { return std::ldexp(base_grid, static_cast<int>(level)); }

  void validate() const {
    if (levels < 2) throw ConfigError(detail::concat("levels must be at least 2, got ", levels));
    if (blocks_per_level.size() != levels) {
      throw ConfigError(detail::concat("blocks_per_level has ", blocks_per_level.size(),
                                       " entries for ", levels, " levels"));
    }
    for (std::size_t b : blocks_per_level) {
      if (b == 0) throw ConfigError("every level needs at least one block");
    }
    if (!(base_grid > 0.0) || !std::isfinite(base_grid)) {
      throw ConfigError("base_grid must be positive");
    }
    if (in_channels == 0 || num_classes == 0 || base_width == 0 || k == 0) {
      throw ConfigError("in_channels, num_classes, base_width and k must be positive");
    }
  }

  PcfLayerConfig op_template() const {
    PcfLayerConfig op;
    op.c_mid = c_mid;
    op.heads = heads;
    op.psi_depth = psi_depth;
    op.variant = variant;
    op.activation = activation;
    op.disable_conv = disable_conv;
    return op;
  }
};

/// Per-level clouds and neighborhoods, built once per input cloud.
struct Level {
  PointCloud cloud;
  SubsampleMap pooling;              // members in the previous cloud of each point here
  std::vector<std::size_t> cell_of;  // for each point of the previous cloud, its point here
  Neighborhood self_nbr;             // this cloud to itself
  Neighborhood down_nbr;             // queries here, sources in the previous cloud
  Neighborhood up_nbr;               // queries in the previous cloud, sources here
};

struct Hierarchy {
  PointCloud input;
  std::vector<Level> levels;

  /// Index into level `level` of every input point.
  std::vector<std::size_t> input_to_level(std::size_t level) const {
    std::vector<std::size_t> idx = levels.at(0).cell_of;
    for (std::size_t l = 1; l <= level; ++l) {
      for (auto& i : idx) i = levels[l].cell_of[i];
    }
    return idx;
  }
};

inline Hierarchy build_hierarchy(const PointCloud& input, const NetConfig& cfg) {
  cfg.validate();
  input.validate();
  if (input.channels != cfg.in_channels) {
    throw DimensionError(detail::concat("network expects ", cfg.in_channels,
                                        " input channels, cloud has ", input.channels));
  }
  Hierarchy h;
  h.input = input;
  const PointCloud* prev = &h.input;
  h.levels.reserve(cfg.levels);
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    Level lv;
    auto [cloud, map] = grid_subsample(*prev, cfg.grid(l));
    if (cloud.size() == 0) {
      throw DegenerateInputError(detail::concat("level ", l, " subsampled to 0 points"));
    }
    lv.cell_of.assign(prev->size(), 0);
    for (std::size_t c = 0; c < map.parent.size(); ++c) {
      for (std::size_t f : map.parent[c]) lv.cell_of[f] = c;
    }
    lv.cloud = std::move(cloud);
    lv.pooling = std::move(map);
    lv.self_nbr = knn(lv.cloud, lv.cloud, std::min(cfg.k, lv.cloud.size()));
    if (l > 0) lv.down_nbr = knn(*prev, lv.cloud, std::min(cfg.k, prev->size()));
    lv.up_nbr = knn(lv.cloud, *prev, std::min(cfg.k, lv.cloud.size()));
    h.levels.push_back(std::move(lv));
    prev = &h.levels.back().cloud;
  }
  return h;
}

struct DecoderStage {
  PcfParams deconv;
  Linear fuse;
  Norm norm;
};

struct UNet {
  NetConfig config;
  Linear stem;
  Norm stem_norm;
  std::vector<std::vector<BlockParams>> blocks;  // [level][block]
  std::vector<DecoderStage> decoder;             // indexed by source level
  Linear head;

  static UNet create(const NetConfig& cfg, Rng& rng) {
    cfg.validate();
    UNet net;
    net.config = cfg;
    net.stem = Linear::create(cfg.in_channels, cfg.width(0), rng);
    if (cfg.use_norm) net.stem_norm = Norm::create(cfg.width(0));
    for (std::size_t l = 0; l < cfg.levels; ++l) {
      std::vector<BlockParams> level;
      for (std::size_t b = 0; b < cfg.blocks_per_level[l]; ++b) {
        BlockSpec spec;
        const bool down = l > 0 && b == 0;
        spec.in_channels = down ? cfg.width(l - 1) : cfg.width(l);
        spec.out_channels = cfg.width(l);
        spec.bottleneck_ratio = cfg.bottleneck_ratio;
        spec.op = cfg.op_template();
        spec.shortcut = down ? ShortcutKind::maxpool_linear : ShortcutKind::identity;
        spec.use_norm = cfg.use_norm;
        spec.post_relu = cfg.post_relu;
        level.push_back(BlockParams::create(spec, rng));
      }
      net.blocks.push_back(std::move(level));
    }
    for (std::size_t l = 0; l < cfg.levels; ++l) {
      const std::size_t target = l == 0 ? cfg.width(0) : cfg.width(l - 1);
      const std::size_t skip = l == 0 ? cfg.in_channels : cfg.width(l - 1);
      PcfLayerConfig up;
      up.c_in = cfg.width(l);
      up.c_out = target;
      up.c_mid = cfg.c_mid;
      up.heads = 1;
      up.variant = Variant::pointconv;
      DecoderStage stage;
      stage.deconv = PcfParams::create(up, rng);
      stage.fuse = Linear::create(target + skip, target, rng);
      if (cfg.use_norm) stage.norm = Norm::create(target);
      net.decoder.push_back(std::move(stage));
    }
    net.head = Linear::create(cfg.width(0), cfg.num_classes, rng);
    return net;
  }

  std::vector<NamedTensor> named_tensors() const {
    std::vector<NamedTensor> out;
    stem.collect("stem", out);
    stem_norm.collect("stem_norm", out);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      for (std::size_t b = 0; b < blocks[l].size(); ++b) {
        blocks[l][b].collect("enc" + std::to_string(l) + ".block" + std::to_string(b), out);
      }
    }
    for (std::size_t l = 0; l < decoder.size(); ++l) {
      const std::string p = "dec" + std::to_string(l);
      decoder[l].deconv.collect(p + ".deconv", out);
      decoder[l].fuse.collect(p + ".fuse", out);
      decoder[l].norm.collect(p + ".norm", out);
    }
    head.collect("head", out);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& n : named_tensors()) {
      if (n.trainable) out.push_back(n.tensor);
    }
    return out;
  }

  /// Operator layers in forward order: encoder blocks, then decoder stages
  /// from the coarsest level down.
  std::vector<std::string> layer_names() const {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      for (std::size_t b = 0; b < blocks[l].size(); ++b) {
        names.push_back("enc" + std::to_string(l) + ".block" + std::to_string(b) + " (" +
                        to_string(blocks[l][b].op.config.variant) + ")");
      }
    }
    for (std::size_t l = decoder.size(); l-- > 0;) {
      names.push_back("dec" + std::to_string(l) + ".deconv (pointconv)");
    }
    return names;
  }

  /// Layer indices whose operator produces reweighting scores.
  std::vector<std::size_t> score_layers() const {
    std::vector<std::size_t> out;
    std::size_t i = 0;
    for (const auto& level : blocks) {
      for (const auto& b : level) {
        const Variant v = b.op.config.variant;
        if (v == Variant::pcf_subtractive || v == Variant::pcf_qkv) out.push_back(i);
        ++i;
      }
    }
    return out;
  }
};

/// Optional diagnostics collected during a forward pass.
struct ForwardTrace {
  std::vector<ScoreBlock> block_scores;   // one per encoder block, forward order
  std::vector<std::size_t> block_level;   // level each block runs on
  std::vector<std::size_t> decoder_rows;  // output rows per decoder stage, coarsest first
};

inline Tensor unet_forward(const Hierarchy& h, const UNet& net, Mode mode = Mode::eval,
                           ForwardTrace* trace = nullptr) {
  const NetConfig& cfg = net.config;
  if (h.levels.size() != cfg.levels) {
    throw ConfigError(detail::concat("hierarchy has ", h.levels.size(), " levels, network ",
                                     cfg.levels));
  }
  std::vector<Tensor> encoded(cfg.levels);
  Tensor x = relu(net.stem_norm(net.stem(h.levels[0].cloud.feature_tensor()), mode));
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    for (std::size_t b = 0; b < net.blocks[l].size(); ++b) {
      const bool down = l > 0 && b == 0;
      const Neighborhood& nbr = down ? h.levels[l].down_nbr : h.levels[l].self_nbr;
      ScoreBlock scores;
      x = residual_block(x, nbr, net.blocks[l][b], mode, trace ? &scores : nullptr,
                         down ? &h.levels[l].pooling : nullptr);
      if (trace) {
        trace->block_scores.push_back(std::move(scores));
        trace->block_level.push_back(l);
      }
    }
    encoded[l] = x;
  }
  for (std::size_t l = cfg.levels; l-- > 0;) {
    const DecoderStage& stage = net.decoder[l];
    const Tensor up = pointconv_deconv(x, h.levels[l].up_nbr, stage.deconv);
    const Tensor skip = l == 0 ? h.input.feature_tensor() : encoded[l - 1];
    x = relu(stage.norm(stage.fuse(concat_last(up, skip)), mode));
    if (trace) trace->decoder_rows.push_back(x.dim(0));
  }
  return net.head(x);
}

inline Tensor unet_forward(const PointCloud& cloud, const UNet& net, Mode mode = Mode::eval) {
  return unet_forward(build_hierarchy(cloud, net.config), net, mode);
}

}  // namespace pcf
