#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "graspgen/ad.hpp"
#include "graspgen/cloud.hpp"
#include "graspgen/geom.hpp"
#include "graspgen/rng.hpp"

namespace graspgen::pnet {

using ad::Tensor;
using geom::Vec3;

// Three set-abstraction stages followed by a fully connected head. A point
// count of 0 means "all points, one group"; a radius of 0 means unbounded.
// width_scale shrinks every hidden dimension (rounded up) so the same
// topology trains in minutes on one core.
struct BackboneConfig {
  std::array<int, 3> stage_point_counts{128, 32, 0};
  std::array<double, 3> stage_radii{0.02, 0.04, 0.0};
  std::array<std::vector<int>, 3> stage_channels{
      std::vector<int>{64, 64, 128}, std::vector<int>{128, 128, 256},
      std::vector<int>{256, 256, 512}};
  std::array<int, 2> head_units{1024, 1024};
  double width_scale = 1.0;
  int neighbor_cap = 64;

  int scaled(int units) const {
    return static_cast<int>(std::ceil(units * width_scale));
  }
  int output_dim() const { return scaled(head_units[1]); }

  void require_valid() const {
    if (!(width_scale > 0.0 && width_scale <= 1.0))
      throw std::invalid_argument("BackboneConfig: width_scale must be in (0, 1]");
    if (!(stage_radii[0] > 0.0 && stage_radii[1] > stage_radii[0] && stage_radii[2] == 0.0))
      throw std::invalid_argument(
          "BackboneConfig: radii must increase strictly and end unbounded");
    if (!(stage_point_counts[0] > 0 && stage_point_counts[1] > 0 && stage_point_counts[2] == 0))
      throw std::invalid_argument("BackboneConfig: last stage must group all points");
    if (neighbor_cap < 1) throw std::invalid_argument("BackboneConfig: neighbor_cap must be >= 1");
    for (const auto& ch : stage_channels) {
      if (ch.empty()) throw std::invalid_argument("BackboneConfig: empty stage MLP");
      for (int c : ch)
        if (c < 1) throw std::invalid_argument("BackboneConfig: non-positive channel width");
    }
  }

  // Textual architecture fingerprint; embedded in checkpoint metadata so a
  // mismatched load fails the header hash check.
  std::string describe(int feature_dim) const {
    char buf[64];
    std::string s = "pnet1 in=3+" + std::to_string(feature_dim);
    for (int i = 0; i < 3; ++i) {
      std::snprintf(buf, sizeof(buf), " s%d=%d@%.17g:", i, stage_point_counts[i], stage_radii[i]);
      s += buf;
      for (size_t l = 0; l < stage_channels[i].size(); ++l)
        s += (l ? "," : "") + std::to_string(scaled(stage_channels[i][l]));
    }
    s += " head=" + std::to_string(scaled(head_units[0])) + "," +
         std::to_string(scaled(head_units[1]));
    s += " cap=" + std::to_string(neighbor_cap);
    return s;
  }
};

namespace detail {

inline std::string layer_name(const std::string& prefix, int stage, size_t layer) {
  return prefix + ".s" + std::to_string(stage) + ".l" + std::to_string(layer);
}

inline std::string head_name(const std::string& prefix, int idx) {
  return prefix + ".h" + std::to_string(idx);
}

inline std::vector<Vec3> tensor_points(const Tensor& coords) {
  if (coords.shape().size() != 2 || coords.cols() != 3)
    throw ad::shape_error("backbone: coordinates must be [N x 3]");
  const auto& v = coords.value();
  std::vector<Vec3> pts(coords.rows());
  for (int i = 0; i < coords.rows(); ++i)
    pts[i] = {v[3 * i + 0], v[3 * i + 1], v[3 * i + 2]};
  return pts;
}

inline Tensor linear(ad::Tape& tape, ad::Bindings& b, const std::string& name, Tensor x) {
  return tape.add_bias(tape.matmul(x, b.use(name + ".w")), b.use(name + ".b"));
}

}  // namespace detail

// Registers one backbone's weights under `prefix`; feature_dim is the width
// of the per-point feature vector accompanying the coordinates (0 allowed).
inline void add_backbone_params(ad::ParamStore& store, const std::string& prefix,
                                const BackboneConfig& cfg, int feature_dim, Rng& rng) {
  cfg.require_valid();
  if (feature_dim < 0) throw std::invalid_argument("add_backbone_params: negative feature_dim");
  int in = feature_dim;
  for (int s = 0; s < 3; ++s) {
    int d = 3 + in;
    for (size_t l = 0; l < cfg.stage_channels[s].size(); ++l) {
      const int out = cfg.scaled(cfg.stage_channels[s][l]);
      const std::string name = detail::layer_name(prefix, s, l);
      store.add_linear_weight(name + ".w", d, out, rng);
      store.add_zeros(name + ".b", {out});
      d = out;
    }
    in = d;
  }
  int d = in;
  for (int h = 0; h < 2; ++h) {
    const int out = cfg.scaled(cfg.head_units[h]);
    const std::string name = detail::head_name(prefix, h);
    store.add_linear_weight(name + ".w", d, out, rng);
    store.add_zeros(name + ".b", {out});
    d = out;
  }
}

// Closed-form weight+bias count matching add_backbone_params.
inline std::size_t backbone_param_count(const BackboneConfig& cfg, int feature_dim) {
  cfg.require_valid();
  std::size_t n = 0;
  int in = feature_dim;
  for (int s = 0; s < 3; ++s) {
    int d = 3 + in;
    for (int c : cfg.stage_channels[s]) {
      const int out = cfg.scaled(c);
      n += static_cast<std::size_t>(d) * out + out;
      d = out;
    }
    in = d;
  }
  int d = in;
  for (int h = 0; h < 2; ++h) {
    const int out = cfg.scaled(cfg.head_units[h]);
    n += static_cast<std::size_t>(d) * out + out;
    d = out;
  }
  return n;
}

struct SetAbstractionOut {
  Tensor coords;  // [k x 3] center coordinates
  Tensor feats;   // [k x C] pooled features
};

// One set-abstraction stage: farthest-point-sampled centers, radius grouping
// with the center always included, a shared MLP over [relative coordinates
// then features], and a per-group channel max. Grouping decisions are made on
// numeric coordinate values; gradients still flow through the gathered rows.
inline SetAbstractionOut set_abstraction(ad::Tape& tape, ad::Bindings& b,
                                         const std::string& prefix, const BackboneConfig& cfg,
                                         int stage, Tensor coords,
                                         const std::optional<Tensor>& feats) {
  const std::vector<Vec3> pts = detail::tensor_points(coords);
  const int n = static_cast<int>(pts.size());
  if (n == 0) throw std::invalid_argument("set_abstraction: empty input");
  if (feats && feats->rows() != n)
    throw ad::shape_error("set_abstraction: feature/coordinate row mismatch");

  auto run_mlp = [&](Tensor rows) {
    Tensor x = rows;
    for (size_t l = 0; l < cfg.stage_channels[stage].size(); ++l)
      x = tape.relu(detail::linear(tape, b, detail::layer_name(prefix, stage, l), x));
    return x;
  };

  if (cfg.stage_point_counts[stage] == 0) {
    // Global stage: every point in one group, offsets taken from the centroid.
    const Tensor center = tape.mean_rows(coords);
    const Tensor rel = tape.sub(coords, tape.broadcast_rows(center, n));
    const Tensor rows = feats ? tape.concat_features({rel, *feats}) : rel;
    std::vector<std::vector<int>> groups(1);
    for (int i = 0; i < n; ++i) groups[0].push_back(i);
    return {center, tape.group_max_pool(run_mlp(rows), groups)};
  }

  const int k = std::min(cfg.stage_point_counts[stage], n);
  const std::vector<int> centers = cloud::fps_select(pts, k);
  std::vector<int> flat, center_rows;
  std::vector<std::vector<int>> groups(k);
  for (int gi = 0; gi < k; ++gi) {
    const auto nbrs =
        cloud::radius_neighbors(pts, centers[gi], cfg.stage_radii[stage], cfg.neighbor_cap);
    for (int idx : nbrs) {
      groups[gi].push_back(static_cast<int>(flat.size()));
      flat.push_back(idx);
      center_rows.push_back(centers[gi]);
    }
  }
  const Tensor rel =
      tape.sub(tape.gather_rows(coords, flat), tape.gather_rows(coords, center_rows));
  const Tensor rows =
      feats ? tape.concat_features({rel, tape.gather_rows(*feats, flat)}) : rel;
  return {tape.gather_rows(coords, centers), tape.group_max_pool(run_mlp(rows), groups)};
}

// Full backbone: three set-abstraction stages then two fully connected layers
// with relu. Returns a [1 x output_dim] feature row.
inline Tensor backbone_forward(ad::Tape& tape, ad::Bindings& b, const std::string& prefix,
                               const BackboneConfig& cfg, Tensor coords,
                               std::optional<Tensor> feats = std::nullopt) {
  cfg.require_valid();
  Tensor c = coords;
  std::optional<Tensor> f = std::move(feats);
  for (int s = 0; s < 3; ++s) {
    SetAbstractionOut out = set_abstraction(tape, b, prefix, cfg, s, c, f);
    c = out.coords;
    f = out.feats;
  }
  Tensor x = *f;
  for (int h = 0; h < 2; ++h)
    x = tape.relu(detail::linear(tape, b, detail::head_name(prefix, h), x));
  return x;
}

}  // namespace graspgen::pnet
