#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "graspgen/ad.hpp"
#include "graspgen/cloud.hpp"
#include "graspgen/geom.hpp"
#include "graspgen/mesh.hpp"
#include "graspgen/pnet.hpp"
#include "graspgen/rng.hpp"
#include "graspgen/scene.hpp"

namespace graspgen::evaluator {

using ad::Tensor;
using cloud::PointFeatureCloud;
using geom::Grasp;
using geom::Vec3;
using mesh::TriMesh;
using scene::GripperModel;

struct EvaluatorConfig {
  pnet::BackboneConfig backbone;
  double prob_clamp = 1e-7;

  void require_valid() const {
    backbone.require_valid();
    if (prob_clamp <= 0.0 || prob_clamp >= 0.5)
      throw std::invalid_argument("EvaluatorConfig: prob_clamp must be in (0, 0.5)");
  }

  std::string describe() const {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "evalnet clamp=%.17g | ", prob_clamp);
    return std::string(buf) + backbone.describe(1);
  }
};

// Object and gripper points fused into one cloud; the single feature channel
// marks which body each point belongs to.
struct UnifiedCloud {
  std::vector<Vec3> coordinates;   // object rows first, then gripper rows
  std::vector<double> indicator;   // 0 = object point, 1 = gripper point
  int object_count = 0;
  int gripper_count = 0;
};

inline UnifiedCloud assemble_input(const PointFeatureCloud& x, const Grasp& g,
                                   const GripperModel& gripper) {
  x.require_valid();
  if (x.size() == 0) throw std::invalid_argument("assemble_input: empty object cloud");
  if (norm(cloud::centroid(x.coordinates)) > 1e-6)
    throw std::invalid_argument("assemble_input: cloud is not centered on its centroid");
  g.require_valid();

  UnifiedCloud u;
  u.object_count = x.size();
  u.coordinates = x.coordinates;
  const std::vector<Vec3> body = geom::transform_points(g, gripper.sample_cloud());
  u.gripper_count = static_cast<int>(body.size());
  u.coordinates.insert(u.coordinates.end(), body.begin(), body.end());
  u.indicator.assign(u.coordinates.size(), 0.0);
  for (size_t i = x.coordinates.size(); i < u.coordinates.size(); ++i) u.indicator[i] = 1.0;
  return u;
}

inline void add_evaluator_params(ad::ParamStore& store, const EvaluatorConfig& cfg, Rng& rng) {
  cfg.require_valid();
  pnet::add_backbone_params(store, "eval", cfg.backbone, 1, rng);
  store.add_linear_weight("eval.logit.w", cfg.backbone.output_dim(), 2, rng);
  store.add_zeros("eval.logit.b", {2});
}

// Forward pass with the gripper points mounted as a differentiable leaf so
// callers can read d(score)/d(gripper point coordinates) after backward.
struct ScoreGraph {
  Tensor gripper_points;  // [M x 3] leaf
  Tensor score;           // [1 x 1] success-class probability
};

inline ScoreGraph score_graph(ad::Tape& tape, ad::Bindings& b, const EvaluatorConfig& cfg,
                              const PointFeatureCloud& x,
                              const std::vector<Vec3>& gripper_world) {
  cfg.require_valid();
  x.require_valid();
  if (x.size() == 0) throw std::invalid_argument("score_graph: empty object cloud");
  if (norm(cloud::centroid(x.coordinates)) > 1e-6)
    throw std::invalid_argument("score_graph: cloud is not centered on its centroid");
  if (gripper_world.empty()) throw std::invalid_argument("score_graph: empty gripper cloud");

  const int n = x.size();
  const int m = static_cast<int>(gripper_world.size());
  std::vector<double> obj_flat;
  obj_flat.reserve(static_cast<size_t>(n) * 3);
  for (const Vec3& p : x.coordinates) {
    obj_flat.push_back(p.x);
    obj_flat.push_back(p.y);
    obj_flat.push_back(p.z);
  }
  std::vector<double> grip_flat;
  grip_flat.reserve(static_cast<size_t>(m) * 3);
  for (const Vec3& p : gripper_world) {
    grip_flat.push_back(p.x);
    grip_flat.push_back(p.y);
    grip_flat.push_back(p.z);
  }

  ScoreGraph out;
  out.gripper_points = tape.leaf(std::move(grip_flat), {m, 3}, true);
  const Tensor coords =
      tape.concat_rows({tape.constant(std::move(obj_flat), {n, 3}), out.gripper_points});
  std::vector<double> ind(static_cast<size_t>(n + m), 0.0);
  for (int i = n; i < n + m; ++i) ind[i] = 1.0;
  const Tensor feats = tape.constant(std::move(ind), {n + m, 1});

  const Tensor h = pnet::backbone_forward(tape, b, "eval", cfg.backbone, coords, feats);
  const Tensor logits =
      tape.add_bias(tape.matmul(h, b.use("eval.logit.w")), b.use("eval.logit.b"));
  const Tensor probs = tape.softmax(logits);
  // Success-class probability is the second softmax channel.
  out.score = tape.matmul(probs, tape.constant({0.0, 1.0}, {2, 1}));
  return out;
}

inline double score(ad::ParamStore& store, const EvaluatorConfig& cfg, const PointFeatureCloud& x,
                    const Grasp& g, const GripperModel& gripper) {
  g.require_valid();
  ad::Tape tape;
  ad::Bindings b(tape, store);
  const std::vector<Vec3> body = geom::transform_points(g, gripper.sample_cloud());
  return score_graph(tape, b, cfg, x, body).score.scalar();
}

// Binary cross-entropy with the probability clamped away from 0 and 1.
inline Tensor evaluator_loss(ad::Tape& tape, double y, Tensor s, double clamp_eps = 1e-7) {
  if (y != 0.0 && y != 1.0) throw std::invalid_argument("evaluator_loss: label must be binary");
  if (ad::numel(s.shape()) != 1) throw ad::shape_error("evaluator_loss: score must be scalar");
  if (clamp_eps <= 0.0 || clamp_eps >= 0.5)
    throw std::invalid_argument("evaluator_loss: clamp must be in (0, 0.5)");
  const Tensor sc = tape.clamp(s, clamp_eps, 1.0 - clamp_eps);
  const Tensor one = tape.constant(std::vector<double>(1, 1.0), s.shape());
  const Tensor log_s = tape.log(sc);
  const Tensor log_1ms = tape.log(tape.sub(one, sc));
  return tape.scale(tape.add(tape.scale(log_s, y), tape.scale(log_1ms, 1.0 - y)), -1.0);
}

enum class Provenance : std::uint8_t {
  simulated_positive = 0,
  sampled_negative = 1,
  hard_negative = 2,
  perturbed_positive = 3,
};

struct TrainingExample {
  Grasp grasp;
  bool positive = false;
  Provenance provenance = Provenance::simulated_positive;
};

// Perturbs a positive grasp until the perturbation stays within epsilon in
// control-point distance yet fails geometrically: the gripper body collides
// with the object, or the closing volume no longer meets it.
inline std::optional<Grasp> mine_hard_negative(const Grasp& g_pos, const TriMesh& m,
                                               const GripperModel& gripper, Rng& rng,
                                               double epsilon = 0.10, int max_tries = 20) {
  g_pos.require_valid();
  if (epsilon < 0.0) throw std::invalid_argument("mine_hard_negative: negative epsilon");
  const geom::ControlPointSet cps = gripper.control_points();
  for (int attempt = 0; attempt < max_tries; ++attempt) {
    const double da = rng.uniform(-0.6, 0.6);
    const double db = rng.uniform(-0.6, 0.6);
    const double dg = rng.uniform(-0.6, 0.6);
    const Vec3 dt{rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03)};
    Grasp cand;
    // Rotation perturbation acts in the gripper frame; translation in world.
    cand.rotation =
        (g_pos.rotation * geom::Quat::from_matrix(geom::euler_to_matrix(da, db, dg))).normalized();
    cand.translation = g_pos.translation + dt;
    if (geom::recon_distance(g_pos, cand, cps) >= epsilon) continue;
    const scene::OracleReport rep = scene::oracle_report(m, cand, gripper);
    if (!rep.collision_free || !rep.closing_volume) return cand;
  }
  return std::nullopt;
}

namespace detail {

// Largest-remainder split of `size` into the fixed 30/30/40 shares.
inline std::array<int, 3> batch_split(int size) {
  const double shares[3] = {0.3, 0.3, 0.4};
  std::array<int, 3> n{};
  double rem[3];
  int used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = shares[i] * size;
    n[i] = static_cast<int>(std::floor(exact));
    rem[i] = exact - n[i];
    used += n[i];
  }
  for (int extra = size - used; extra > 0; --extra) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (rem[i] > rem[best]) best = i;
    ++n[best];
    rem[best] = -1.0;
  }
  return n;
}

}  // namespace detail

// 30% simulated positives, 30% stored negatives, 40% hard negatives minted on
// the fly by perturbing random positives.
inline std::vector<TrainingExample> compose_training_batch(
    const std::vector<Grasp>& positives, const std::vector<Grasp>& stored_negatives,
    const TriMesh& m, const GripperModel& gripper, int size, Rng& rng, double epsilon = 0.10) {
  if (size < 1) throw std::invalid_argument("compose_training_batch: size must be >= 1");
  const auto n = detail::batch_split(size);
  if (positives.empty() && (n[0] > 0 || n[2] > 0))
    throw std::invalid_argument("compose_training_batch: positive pool is empty");
  if (stored_negatives.empty() && n[1] > 0)
    throw std::invalid_argument("compose_training_batch: negative pool is empty");

  std::vector<TrainingExample> batch;
  batch.reserve(size);
  for (int i = 0; i < n[0]; ++i)
    batch.push_back({positives[rng.uniform_index(positives.size())], true,
                     Provenance::simulated_positive});
  for (int i = 0; i < n[1]; ++i)
    batch.push_back({stored_negatives[rng.uniform_index(stored_negatives.size())], false,
                     Provenance::sampled_negative});
  int attempts_left = 50 * n[2] + 100;
  for (int i = 0; i < n[2]; ++i) {
    std::optional<Grasp> mined;
    while (!mined) {
      if (--attempts_left < 0)
        throw std::runtime_error("compose_training_batch: hard-negative mining exhausted");
      const Grasp& src = positives[rng.uniform_index(positives.size())];
      mined = mine_hard_negative(src, m, gripper, rng, epsilon);
    }
    batch.push_back({*mined, false, Provenance::hard_negative});
  }
  return batch;
}

struct EvalLossReport {
  double loss = 0.0;
  double mean_positive_score = 0.0;
  double mean_negative_score = 0.0;
};

// One Adam step of the clamped cross-entropy over a labeled batch.
inline EvalLossReport evaluator_training_step(ad::ParamStore& store, const EvaluatorConfig& cfg,
                                              const PointFeatureCloud& x,
                                              const std::vector<TrainingExample>& batch,
                                              const GripperModel& gripper, double lr) {
  cfg.require_valid();
  if (batch.empty()) throw std::invalid_argument("evaluator_training_step: empty batch");
  const std::vector<Vec3> canonical = gripper.sample_cloud();

  ad::GradAccum accum(store);
  EvalLossReport rep;
  int pos = 0, neg = 0;
  for (size_t i = 0; i < batch.size(); ++i) {
    try {
      ad::Tape tape;
      ad::Bindings b(tape, store);
      const std::vector<Vec3> body = geom::transform_points(batch[i].grasp, canonical);
      const ScoreGraph sg = score_graph(tape, b, cfg, x, body);
      const Tensor loss =
          evaluator_loss(tape, batch[i].positive ? 1.0 : 0.0, sg.score, cfg.prob_clamp);
      tape.backward(loss);
      b.flush(accum);
      rep.loss += loss.scalar();
      const double s = sg.score.scalar();
      if (batch[i].positive) {
        rep.mean_positive_score += s;
        ++pos;
      } else {
        rep.mean_negative_score += s;
        ++neg;
      }
    } catch (const ad::numeric_error& err) {
      throw std::runtime_error("evaluator_training_step: example " + std::to_string(i) + ": " +
                               err.what());
    }
  }
  accum.scale(1.0 / static_cast<double>(batch.size()));
  ad::apply_adam(store, accum, lr);
  rep.loss /= static_cast<double>(batch.size());
  if (pos > 0) rep.mean_positive_score /= pos;
  if (neg > 0) rep.mean_negative_score /= neg;
  return rep;
}

}  // namespace graspgen::evaluator
