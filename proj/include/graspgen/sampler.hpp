#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "graspgen/ad.hpp"
#include "graspgen/cloud.hpp"
#include "graspgen/geom.hpp"
#include "graspgen/pnet.hpp"
#include "graspgen/rng.hpp"

namespace graspgen::sampler {

using ad::Tensor;
using cloud::PointFeatureCloud;
using geom::Grasp;
using geom::Quat;
using geom::Vec3;

struct SamplerConfig {
  pnet::BackboneConfig backbone;
  int latent_dim = 2;
  int cloud_feature_dim = 0;
  double alpha = 0.01;
  double logvar_clamp = 10.0;

  void require_valid() const {
    backbone.require_valid();
    if (latent_dim < 1 || latent_dim > 4)
      throw std::invalid_argument("SamplerConfig: latent_dim must be 1..4");
    if (cloud_feature_dim < 0)
      throw std::invalid_argument("SamplerConfig: negative cloud_feature_dim");
    if (alpha < 0.0) throw std::invalid_argument("SamplerConfig: negative alpha");
    if (logvar_clamp <= 0.0) throw std::invalid_argument("SamplerConfig: non-positive clamp");
  }

  std::string describe() const {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "vae D=%d C=%d a=%.17g clamp=%.17g", latent_dim,
                  cloud_feature_dim, alpha, logvar_clamp);
    return std::string(buf) + " | enc " + backbone.describe(cloud_feature_dim + 7) + " | dec " +
           backbone.describe(cloud_feature_dim + latent_dim);
  }
};

struct EncoderOutput {
  Tensor mean;          // [1 x D]
  Tensor log_variance;  // [1 x D], clamped
};

struct DecodeOut {
  Tensor quat;   // [1 x 4] unit, first component >= 0
  Tensor trans;  // [1 x 3]
  bool degenerate_rotation = false;
};

struct VaeLossReport {
  double reconstruction = 0.0;
  double kl = 0.0;
  double total = 0.0;
  double alpha = 0.0;
};

namespace detail {

inline void require_centered(const PointFeatureCloud& x) {
  x.require_valid();
  if (x.size() == 0) throw std::invalid_argument("sampler: empty cloud");
  if (norm(cloud::centroid(x.coordinates)) > 1e-6)
    throw std::invalid_argument("sampler: cloud is not centered on its centroid");
}

inline Tensor coords_constant(ad::Tape& tape, const PointFeatureCloud& x) {
  std::vector<double> v;
  v.reserve(x.size() * 3);
  for (const Vec3& p : x.coordinates) {
    v.push_back(p.x);
    v.push_back(p.y);
    v.push_back(p.z);
  }
  return tape.constant(std::move(v), {static_cast<int>(x.size()), 3});
}

inline Tensor linear(ad::Tape& tape, ad::Bindings& b, const std::string& name, Tensor x) {
  return tape.add_bias(tape.matmul(x, b.use(name + ".w")), b.use(name + ".b"));
}

}  // namespace detail

inline void add_sampler_params(ad::ParamStore& store, const SamplerConfig& cfg, Rng& rng) {
  cfg.require_valid();
  const int h = cfg.backbone.output_dim();
  pnet::add_backbone_params(store, "enc", cfg.backbone, cfg.cloud_feature_dim + 7, rng);
  store.add_linear_weight("enc.mean.w", h, cfg.latent_dim, rng);
  store.add_zeros("enc.mean.b", {cfg.latent_dim});
  store.add_linear_weight("enc.logvar.w", h, cfg.latent_dim, rng);
  store.add_zeros("enc.logvar.b", {cfg.latent_dim});
  pnet::add_backbone_params(store, "dec", cfg.backbone, cfg.cloud_feature_dim + cfg.latent_dim,
                            rng);
  store.add_linear_weight("dec.rot.w", h, 4, rng);
  store.add_zeros("dec.rot.b", {4});
  store.add_linear_weight("dec.trans.w", h, 3, rng);
  store.add_zeros("dec.trans.b", {3});
}

// Pose conditioning: the 7 pose numbers (sign-canonicalized quaternion then
// translation) are appended to every point's feature row.
inline EncoderOutput encode(ad::Tape& tape, ad::Bindings& b, const SamplerConfig& cfg,
                            const PointFeatureCloud& x, const Grasp& g) {
  cfg.require_valid();
  detail::require_centered(x);
  if (x.feature_dim != cfg.cloud_feature_dim)
    throw std::invalid_argument("encode: cloud feature width does not match config");
  g.require_valid();
  const auto pose = geom::grasp_to_values(Grasp{g.rotation.canonicalized(), g.translation});

  const int n = static_cast<int>(x.size());
  const int c = cfg.cloud_feature_dim;
  std::vector<double> rows(static_cast<size_t>(n) * (c + 7));
  for (int i = 0; i < n; ++i) {
    double* dst = &rows[static_cast<size_t>(i) * (c + 7)];
    for (int j = 0; j < c; ++j) dst[j] = x.features[static_cast<size_t>(i) * c + j];
    for (int j = 0; j < 7; ++j) dst[c + j] = pose[j];
  }
  const Tensor feats = tape.constant(std::move(rows), {n, c + 7});
  const Tensor h =
      pnet::backbone_forward(tape, b, "enc", cfg.backbone, detail::coords_constant(tape, x), feats);
  const Tensor mean = detail::linear(tape, b, "enc.mean", h);
  const Tensor lv = tape.clamp(detail::linear(tape, b, "enc.logvar", h), -cfg.logvar_clamp,
                               cfg.logvar_clamp);
  return {mean, lv};
}

// Sum_d (exp(lv) + mean^2 - 1 - lv) / 2 against the standard normal prior.
inline Tensor kl_divergence(ad::Tape& tape, const EncoderOutput& e) {
  const int d = e.mean.cols();
  const Tensor ones = tape.constant(std::vector<double>(d, 1.0), {1, d});
  const Tensor inner = tape.sub(
      tape.sub(tape.add(tape.exp(e.log_variance), tape.mul(e.mean, e.mean)), ones),
      e.log_variance);
  return tape.scale(tape.sum_reduce(inner), 0.5);
}

inline Tensor reparameterized_sample(ad::Tape& tape, const EncoderOutput& e,
                                     const std::vector<double>& noise) {
  const int d = e.mean.cols();
  if (static_cast<int>(noise.size()) != d)
    throw std::invalid_argument("reparameterized_sample: noise dimension mismatch");
  const Tensor std_dev = tape.exp(tape.scale(e.log_variance, 0.5));
  return tape.add(e.mean, tape.mul(std_dev, tape.constant(noise, {1, d})));
}

inline DecodeOut decode(ad::Tape& tape, ad::Bindings& b, const SamplerConfig& cfg,
                        const PointFeatureCloud& x, Tensor z) {
  cfg.require_valid();
  detail::require_centered(x);
  if (x.feature_dim != cfg.cloud_feature_dim)
    throw std::invalid_argument("decode: cloud feature width does not match config");
  if (z.shape() != ad::Shape{1, cfg.latent_dim})
    throw ad::shape_error("decode: z must be [1 x latent_dim]");

  const int n = static_cast<int>(x.size());
  Tensor feats = tape.broadcast_rows(z, n);
  if (cfg.cloud_feature_dim > 0) {
    const Tensor base =
        tape.constant(x.features, {n, cfg.cloud_feature_dim});
    feats = tape.concat_features({base, feats});
  }
  const Tensor h =
      pnet::backbone_forward(tape, b, "dec", cfg.backbone, detail::coords_constant(tape, x), feats);

  DecodeOut out;
  const Tensor raw_rot = detail::linear(tape, b, "dec.rot", h);
  double nsq = 0.0;
  for (double v : raw_rot.value()) nsq += v * v;
  if (std::sqrt(nsq) < 1e-12) {
    // Measure-zero degenerate head output; fall back to the identity rotation.
    out.quat = tape.constant({1.0, 0.0, 0.0, 0.0}, {1, 4});
    out.degenerate_rotation = true;
  } else {
    out.quat = tape.canonicalize_sign(tape.l2_normalize(raw_rot));
  }
  out.trans = detail::linear(tape, b, "dec.trans", h);
  return out;
}

inline Grasp grasp_of(const DecodeOut& d) {
  const auto& q = d.quat.value();
  const auto& t = d.trans.value();
  Grasp g;
  g.rotation = Quat{q[0], q[1], q[2], q[3]}.normalized();
  g.translation = {t[0], t[1], t[2]};
  g.require_valid();
  return g;
}

// Mean over control points of the L1 distance between the target's and the
// decoded pose's transformed gripper points.
inline Tensor recon_loss(ad::Tape& tape, const DecodeOut& d, const Grasp& target,
                         const std::vector<Vec3>& control_points) {
  if (control_points.size() < 4)
    throw std::invalid_argument("recon_loss: need at least 4 control points");
  const auto want = geom::transform_points(target, control_points);
  std::vector<double> flat;
  flat.reserve(want.size() * 3);
  for (const Vec3& p : want) {
    flat.push_back(p.x);
    flat.push_back(p.y);
    flat.push_back(p.z);
  }
  const int k = static_cast<int>(control_points.size());
  const Tensor pred = tape.quat_rotate_points(d.quat, d.trans, control_points);
  const Tensor diff = tape.sub(pred, tape.constant(std::move(flat), {k, 3}));
  return tape.scale(tape.sum_reduce(tape.abs(diff)), 1.0 / k);
}

// One optimizer step over a batch of positive grasps against a single view;
// injected per-example noise keeps the step reproducible.
inline VaeLossReport vae_training_step(ad::ParamStore& store, const SamplerConfig& cfg,
                                       const PointFeatureCloud& x,
                                       const std::vector<Grasp>& batch,
                                       const std::vector<std::vector<double>>& noise,
                                       const std::vector<Vec3>& control_points, double lr) {
  cfg.require_valid();
  if (batch.empty()) throw std::invalid_argument("vae_training_step: empty batch");
  if (noise.size() != batch.size())
    throw std::invalid_argument("vae_training_step: noise count does not match batch");

  ad::GradAccum accum(store);
  double recon_sum = 0.0, kl_sum = 0.0;
  for (size_t i = 0; i < batch.size(); ++i) {
    try {
      ad::Tape tape;
      ad::Bindings b(tape, store);
      const EncoderOutput e = encode(tape, b, cfg, x, batch[i]);
      const Tensor kl = kl_divergence(tape, e);
      const Tensor z = reparameterized_sample(tape, e, noise[i]);
      const DecodeOut d = decode(tape, b, cfg, x, z);
      const Tensor recon = recon_loss(tape, d, batch[i], control_points);
      const Tensor total = tape.add(recon, tape.scale(kl, cfg.alpha));
      tape.backward(total);
      b.flush(accum);
      recon_sum += recon.scalar();
      kl_sum += kl.scalar();
    } catch (const ad::numeric_error& err) {
      throw std::runtime_error("vae_training_step: example " + std::to_string(i) + ": " +
                               err.what());
    }
  }
  accum.scale(1.0 / static_cast<double>(batch.size()));
  ad::apply_adam(store, accum, lr);

  VaeLossReport report;
  report.alpha = cfg.alpha;
  report.reconstruction = recon_sum / static_cast<double>(batch.size());
  report.kl = kl_sum / static_cast<double>(batch.size());
  report.total = report.reconstruction + cfg.alpha * report.kl;
  return report;
}

inline VaeLossReport vae_training_step(ad::ParamStore& store, const SamplerConfig& cfg,
                                       const PointFeatureCloud& x,
                                       const std::vector<Grasp>& batch, Rng& rng,
                                       const std::vector<Vec3>& control_points, double lr) {
  std::vector<std::vector<double>> noise(batch.size());
  for (auto& row : noise) {
    row.resize(cfg.latent_dim);
    for (double& v : row) v = rng.normal();
  }
  return vae_training_step(store, cfg, x, batch, noise, control_points, lr);
}

inline Grasp decode_grasp(ad::ParamStore& store, const SamplerConfig& cfg,
                          const PointFeatureCloud& x, const std::vector<double>& z) {
  if (static_cast<int>(z.size()) != cfg.latent_dim)
    throw std::invalid_argument("decode_grasp: z dimension mismatch");
  ad::Tape tape;
  ad::Bindings b(tape, store);
  return grasp_of(decode(tape, b, cfg, x, tape.constant(z, {1, cfg.latent_dim})));
}

inline std::vector<Grasp> sample_grasps(ad::ParamStore& store, const SamplerConfig& cfg,
                                        const PointFeatureCloud& x, int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample_grasps: n must be >= 1");
  std::vector<Grasp> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    std::vector<double> z(cfg.latent_dim);
    for (double& v : z) v = rng.normal();
    out.push_back(decode_grasp(store, cfg, x, z));
  }
  return out;
}

// Partitions the positives into k strata by farthest-point sampling on
// translations and draws one grasp per stratum; small pools fall back to
// sampling with replacement.
inline std::vector<Grasp> stratified_batch(const std::vector<Grasp>& gstar, int k, Rng& rng) {
  if (gstar.empty()) throw std::invalid_argument("stratified_batch: empty positive set");
  if (k < 1) throw std::invalid_argument("stratified_batch: k must be >= 1");
  std::vector<Grasp> out;
  out.reserve(k);
  if (static_cast<int>(gstar.size()) < k) {
    for (int i = 0; i < k; ++i) out.push_back(gstar[rng.uniform_index(gstar.size())]);
    return out;
  }
  std::vector<Vec3> tr;
  tr.reserve(gstar.size());
  for (const Grasp& g : gstar) tr.push_back(g.translation);
  const std::vector<int> centers = cloud::fps_select(tr, k);
  std::vector<std::vector<int>> strata(k);
  for (size_t i = 0; i < tr.size(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      const double d = norm(tr[i] - tr[centers[c]]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    strata[best].push_back(static_cast<int>(i));
  }
  for (int c = 0; c < k; ++c) {
    if (strata[c].empty())  // duplicate translations can starve a stratum
      out.push_back(gstar[rng.uniform_index(gstar.size())]);
    else
      out.push_back(gstar[strata[c][rng.uniform_index(strata[c].size())]]);
  }
  return out;
}

}  // namespace graspgen::sampler
