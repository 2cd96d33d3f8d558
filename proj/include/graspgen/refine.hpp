#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "graspgen/evaluator.hpp"
#include "graspgen/geom.hpp"

namespace graspgen::refine {

using cloud::PointFeatureCloud;
using evaluator::EvaluatorConfig;
using geom::EulerPose;
using geom::Grasp;
using geom::Vec3;
using scene::GripperModel;

struct RefineParams {
  int iterations = 10;
  double step_cap = 0.01;       // meters of gripper-point displacement per step
  double keep_threshold = 0.5;  // minimum final score to keep a grasp

  void require_valid() const {
    if (iterations < 0) throw std::invalid_argument("RefineParams: negative iterations");
    if (step_cap < 0.0) throw std::invalid_argument("RefineParams: negative step_cap");
    if (keep_threshold < 0.0 || keep_threshold > 1.0)
      throw std::invalid_argument("RefineParams: keep_threshold outside [0, 1]");
  }
};

struct TraceEntry {
  Grasp grasp;
  double score = 0.0;
};

struct RefinementTrace {
  int grasp_id = 0;
  std::vector<TraceEntry> steps;  // length = iterations + 1
};

struct StepResult {
  Grasp grasp;
  double score_before = 0.0;
};

namespace detail {

inline EulerPose nudged(const EulerPose& e, const std::array<double, 6>& d, double eta) {
  EulerPose out = e;
  out.alpha += eta * d[0];
  out.beta += eta * d[1];
  out.gamma += eta * d[2];
  out.t.x += eta * d[3];
  out.t.y += eta * d[4];
  out.t.z += eta * d[5];
  return out;
}

// Same arithmetic as geom::transform_points, but without pose validation so
// that wildly long trial steps can be measured (and rejected) during scaling.
inline double max_displacement(const Grasp& from, const Grasp& to,
                               const std::vector<Vec3>& points) {
  const geom::Mat3 ra = from.rotation.to_matrix();
  const geom::Mat3 rb = to.rotation.to_matrix();
  double worst = 0.0;
  for (const Vec3& p : points)
    worst = std::fmax(worst, norm((rb * p + to.translation) - (ra * p + from.translation)));
  return worst;
}

}  // namespace detail

// One gradient-ascent step on the evaluator score, lifted from gripper-point
// gradients to a rigid pose update through the pose Jacobian. The step scale
// is chosen so the largest gripper sample-point displacement equals the raw
// step's displacement or step_cap, whichever is smaller.
inline StepResult refinement_step(ad::ParamStore& store, const EvaluatorConfig& cfg,
                                  const PointFeatureCloud& x, const Grasp& g,
                                  const GripperModel& gripper, double step_cap) {
  if (step_cap < 0.0) throw std::invalid_argument("refinement_step: negative step_cap");
  g.require_valid();
  const std::vector<Vec3> canonical = gripper.sample_cloud();
  const std::vector<Vec3> body = geom::transform_points(g, canonical);

  ad::Tape tape;
  ad::Bindings b(tape, store);
  const evaluator::ScoreGraph sg = evaluator::score_graph(tape, b, cfg, x, body);
  tape.backward(sg.score);
  const std::vector<double>& grad = sg.gripper_points.grad();
  const double score_before = sg.score.scalar();

  bool all_zero = true;
  for (double v : grad)
    if (v != 0.0) all_zero = false;
  if (all_zero || step_cap == 0.0) return {g, score_before};

  // Chain rule: 6-direction d_c = sum_i sum_r grad[i,r] * dT(e;p_i)_r / d theta_c.
  const EulerPose e = geom::from_grasp(g);
  const geom::ControlPointSet cloud_set{canonical};
  const std::vector<geom::JacobianBlock> jac = geom::pose_jacobian(e, cloud_set);
  std::array<double, 6> d{};
  for (size_t i = 0; i < canonical.size(); ++i)
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 6; ++c) d[c] += grad[i * 3 + r] * jac[i][6 * r + c];

  double mag = 0.0;
  for (double v : d) mag = std::fmax(mag, std::fabs(v));
  if (mag == 0.0) return {g, score_before};

  // The cap is a bound on the pose that is actually returned and stored, so
  // each trial scale is converted to its final Grasp before being measured.
  const auto candidate = [&](double eta) {
    Grasp out = geom::to_grasp(detail::nudged(e, d, eta));
    out.rotation = out.rotation.normalized();
    return out;
  };

  Grasp out = candidate(1.0);
  if (detail::max_displacement(g, out, canonical) > step_cap) {
    // Largest eta in [0, 1] whose displacement stays within the cap; the
    // displacement grows continuously from zero, so bisection lands on the
    // cap itself to full double precision.
    double lo = 0.0, hi = 1.0;
    Grasp accepted = g;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      const Grasp trial = candidate(mid);
      if (detail::max_displacement(g, trial, canonical) <= step_cap) {
        lo = mid;
        accepted = trial;
      } else {
        hi = mid;
      }
      if (hi - lo <= 1e-15 * hi) break;
    }
    if (lo == 0.0) return {g, score_before};
    out = accepted;
  }
  return {out, score_before};
}

struct ScoredGrasp {
  Grasp grasp;
  double score = 0.0;
  int source_index = 0;
};

struct RefineResult {
  std::vector<ScoredGrasp> kept;          // final score >= keep_threshold, best first
  std::vector<RefinementTrace> traces;    // one per input grasp, in input order
};

inline RefineResult refine(ad::ParamStore& store, const EvaluatorConfig& cfg,
                           const PointFeatureCloud& x, const std::vector<Grasp>& grasps,
                           const GripperModel& gripper, const RefineParams& params = {}) {
  params.require_valid();
  RefineResult result;
  result.traces.reserve(grasps.size());
  result.kept.reserve(grasps.size());

  for (size_t i = 0; i < grasps.size(); ++i) {
    RefinementTrace trace;
    trace.grasp_id = static_cast<int>(i);
    trace.steps.resize(static_cast<size_t>(params.iterations) + 1);
    Grasp cur = grasps[i];
    for (int k = 0; k < params.iterations; ++k) {
      const StepResult step = refinement_step(store, cfg, x, cur, gripper, params.step_cap);
      trace.steps[k] = {cur, step.score_before};
      cur = step.grasp;
    }
    const double final_score = evaluator::score(store, cfg, x, cur, gripper);
    trace.steps[params.iterations] = {cur, final_score};
    result.traces.push_back(std::move(trace));
    if (final_score >= params.keep_threshold)
      result.kept.push_back({cur, final_score, static_cast<int>(i)});
  }

  std::sort(result.kept.begin(), result.kept.end(), [](const ScoredGrasp& a, const ScoredGrasp& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.source_index < b.source_index;
  });
  return result;
}

inline void write_trace_csv(std::ostream& os, const std::vector<RefinementTrace>& traces) {
  os << "grasp_id,iter,qw,qx,qy,qz,tx,ty,tz,score\n";
  char buf[256];
  for (const RefinementTrace& tr : traces) {
    for (size_t k = 0; k < tr.steps.size(); ++k) {
      const TraceEntry& s = tr.steps[k];
      const auto v = geom::grasp_to_values(s.grasp);
      std::snprintf(buf, sizeof(buf),
                    "%d,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", tr.grasp_id, k,
                    v[0], v[1], v[2], v[3], v[4], v[5], v[6], s.score);
      os << buf;
    }
  }
}

}  // namespace graspgen::refine
