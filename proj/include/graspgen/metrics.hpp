#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "graspgen/dataset.hpp"
#include "graspgen/geom.hpp"
#include "graspgen/mesh.hpp"
#include "graspgen/scene.hpp"

namespace graspgen::metrics {

using geom::Grasp;
using geom::Vec3;
using mesh::TriMesh;
using scene::GripperModel;

// A ground-truth grasp counts as covered when some prediction's translation
// lies within this Euclidean radius of its own.
constexpr double kCoverageRadius = 0.02;

struct ScoredGrasp {
  Grasp grasp;
  double score = 0.0;
};

struct SuccessRateResult {
  double value = 0.0;
  bool empty_input = false;  // set when the convention value 0 was used
};

struct CurvePoint {
  double threshold = 0.0;
  double success = 0.0;
  double coverage = 0.0;
};

struct SuccessCoverageCurve {
  std::vector<CurvePoint> points;  // thresholds strictly increasing
  double auc = 0.0;
};

namespace detail {

inline std::string f64_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_f64(const std::string& tok, const char* what) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0')
    throw std::runtime_error(std::string("metrics: malformed number in ") + what);
  return v;
}

}  // namespace detail

// ---- Point metrics ----

inline SuccessRateResult success_rate(const std::vector<Grasp>& grasps, const TriMesh& m,
                                      const GripperModel& gripper) {
  if (grasps.empty()) return {0.0, true};
  size_t positive = 0;
  for (const Grasp& g : grasps)
    if (scene::oracle_report(m, g, gripper).success) ++positive;
  return {static_cast<double>(positive) / static_cast<double>(grasps.size()), false};
}

inline double coverage_rate(const std::vector<Grasp>& predicted, const std::vector<Grasp>& gstar) {
  if (gstar.empty()) throw std::invalid_argument("coverage_rate: ground-truth set is empty");
  if (predicted.empty()) return 0.0;
  size_t covered = 0;
  for (const Grasp& g : gstar) {
    double best = std::numeric_limits<double>::infinity();
    for (const Grasp& p : predicted)
      best = std::min(best, geom::norm(g.translation - p.translation));
    if (best <= kCoverageRadius) ++covered;
  }
  return static_cast<double>(covered) / static_cast<double>(gstar.size());
}

// Ground truth for one view: the stored oracle-positive candidates, posed in
// the mesh frame like every record.
inline std::vector<Grasp> gstar_for_view(const dataset::LabeledGraspDataset& d,
                                         std::uint32_t view_id) {
  std::vector<Grasp> out;
  for (const dataset::GraspRecord& r : d.records)
    if (r.view_id == view_id && r.positive) out.push_back(r.grasp);
  return out;
}

// ---- Success-coverage curve ----
//
// The curve is computed from sufficient statistics that can be saved and
// replayed without the mesh, the oracle, or the grasp poses:
//   - per prediction: score, oracle label, distance to the nearest ground
//     truth (the distance is informational; the first two drive the curve);
//   - per ground-truth grasp: the best score among predictions within the
//     coverage radius (-inf when no prediction ever covers it).
// A ground truth is covered at threshold t iff its cover score is >= t, so
// replaying the artifact reproduces the curve bit for bit.

struct PredictionTriple {
  double score = 0.0;
  bool positive = false;
  double nearest_gstar_distance = 0.0;
};

struct CurveArtifact {
  std::vector<PredictionTriple> predictions;
  std::vector<double> gstar_cover_scores;
};

inline CurveArtifact curve_artifact(const std::vector<ScoredGrasp>& scored,
                                    const std::vector<Grasp>& gstar, const TriMesh& m,
                                    const GripperModel& gripper) {
  if (scored.empty()) throw std::invalid_argument("curve_artifact: no scored grasps");
  if (gstar.empty()) throw std::invalid_argument("curve_artifact: ground-truth set is empty");
  CurveArtifact a;
  a.predictions.reserve(scored.size());
  for (const ScoredGrasp& s : scored) {
    PredictionTriple t;
    t.score = s.score;
    t.positive = scene::oracle_report(m, s.grasp, gripper).success;
    double best = std::numeric_limits<double>::infinity();
    for (const Grasp& g : gstar)
      best = std::min(best, geom::norm(s.grasp.translation - g.translation));
    t.nearest_gstar_distance = best;
    a.predictions.push_back(t);
  }
  a.gstar_cover_scores.reserve(gstar.size());
  for (const Grasp& g : gstar) {
    double cover = -std::numeric_limits<double>::infinity();
    for (const ScoredGrasp& s : scored)
      if (geom::norm(g.translation - s.grasp.translation) <= kCoverageRadius)
        cover = std::max(cover, s.score);
    a.gstar_cover_scores.push_back(cover);
  }
  return a;
}

inline SuccessCoverageCurve curve_from_artifact(const CurveArtifact& a, int n_thresholds = 50) {
  if (n_thresholds < 1) throw std::invalid_argument("curve: n_thresholds must be >= 1");
  if (a.predictions.empty()) throw std::invalid_argument("curve: no predictions");
  if (a.gstar_cover_scores.empty()) throw std::invalid_argument("curve: ground-truth set is empty");

  // Thresholds: quantiles of the score set, deduplicated to strict increase.
  std::vector<double> sorted;
  sorted.reserve(a.predictions.size());
  for (const PredictionTriple& t : a.predictions) sorted.push_back(t.score);
  std::sort(sorted.begin(), sorted.end());
  const size_t m = sorted.size();
  std::vector<double> thresholds;
  for (int k = 0; k < n_thresholds; ++k) {
    const size_t idx =
        n_thresholds == 1 ? 0 : (static_cast<size_t>(k) * (m - 1)) / (n_thresholds - 1);
    const double t = sorted[idx];
    if (thresholds.empty() || t > thresholds.back()) thresholds.push_back(t);
  }

  SuccessCoverageCurve curve;
  for (const double t : thresholds) {
    size_t retained = 0, positive = 0, covered = 0;
    for (const PredictionTriple& p : a.predictions)
      if (p.score >= t) {
        ++retained;
        if (p.positive) ++positive;
      }
    for (const double c : a.gstar_cover_scores)
      if (c >= t) ++covered;
    CurvePoint pt;
    pt.threshold = t;
    pt.success = retained == 0
                     ? 0.0
                     : static_cast<double>(positive) / static_cast<double>(retained);
    pt.coverage = static_cast<double>(covered) / static_cast<double>(a.gstar_cover_scores.size());
    curve.points.push_back(pt);
  }

  // Integrate success over coverage. Retention shrinks as the threshold
  // grows, so walking thresholds downward walks coverage upward; the walk
  // starts from a synthetic (coverage 0, success of the strictest point)
  // endpoint so the curve always spans coverage 0.
  double auc = 0.0;
  double prev_c = 0.0;
  double prev_s = curve.points.back().success;
  for (size_t i = curve.points.size(); i-- > 0;) {
    const double c = curve.points[i].coverage;
    const double s = curve.points[i].success;
    auc += (c - prev_c) * 0.5 * (prev_s + s);
    prev_c = c;
    prev_s = s;
  }
  curve.auc = auc;
  return curve;
}

inline SuccessCoverageCurve success_coverage_curve(const std::vector<ScoredGrasp>& scored,
                                                   const std::vector<Grasp>& gstar,
                                                   const TriMesh& m, const GripperModel& gripper,
                                                   int n_thresholds = 50) {
  return curve_from_artifact(curve_artifact(scored, gstar, m, gripper), n_thresholds);
}

// ---- Persistence ----

inline void write_artifact_csv(std::ostream& os, const CurveArtifact& a) {
  os << "kind,score,label,nearest_gstar_distance\n";
  for (const PredictionTriple& t : a.predictions)
    os << "pred," << detail::f64_text(t.score) << "," << (t.positive ? 1 : 0) << ","
       << detail::f64_text(t.nearest_gstar_distance) << "\n";
  for (const double c : a.gstar_cover_scores)
    os << "gstar," << detail::f64_text(c) << ",1,0\n";
}

inline CurveArtifact read_artifact_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "kind,score,label,nearest_gstar_distance")
    throw std::runtime_error("metrics: bad artifact header");
  CurveArtifact a;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind, score, label, dist;
    if (!std::getline(ls, kind, ',') || !std::getline(ls, score, ',') ||
        !std::getline(ls, label, ',') || !std::getline(ls, dist))
      throw std::runtime_error("metrics: malformed artifact row");
    if (kind == "pred") {
      PredictionTriple t;
      t.score = detail::parse_f64(score, "artifact score");
      if (label != "0" && label != "1")
        throw std::runtime_error("metrics: malformed artifact label");
      t.positive = label == "1";
      t.nearest_gstar_distance = detail::parse_f64(dist, "artifact distance");
      a.predictions.push_back(t);
    } else if (kind == "gstar") {
      a.gstar_cover_scores.push_back(detail::parse_f64(score, "artifact cover score"));
    } else {
      throw std::runtime_error("metrics: unknown artifact row kind '" + kind + "'");
    }
  }
  return a;
}

inline void write_curve_csv(std::ostream& os, const SuccessCoverageCurve& curve) {
  os << "threshold,success,coverage\n";
  for (const CurvePoint& p : curve.points)
    os << detail::f64_text(p.threshold) << "," << detail::f64_text(p.success) << ","
       << detail::f64_text(p.coverage) << "\n";
}

// Self-contained SVG plot of success over coverage, both axes [0, 1].
inline void write_curve_svg(std::ostream& os, const SuccessCoverageCurve& curve,
                            const std::string& title) {
  constexpr double kW = 640, kH = 480, kL = 70, kR = 620, kT = 46, kB = 430;
  const auto px = [&](double c) { return kL + c * (kR - kL); };
  const auto py = [&](double s) { return kB - s * (kB - kT); };
  char buf[128];

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
  os << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"#ffffff\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        "font-size=\"16\" fill=\"#111111\">"
     << title << "</text>\n";
  for (int i = 0; i <= 5; ++i) {
    const double f = i / 5.0;
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%.6g\" y1=\"%.6g\" x2=\"%.6g\" y2=\"%.6g\" stroke=\"#dddddd\"/>\n",
                  px(f), py(0), px(f), py(1));
    os << buf;
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%.6g\" y1=\"%.6g\" x2=\"%.6g\" y2=\"%.6g\" stroke=\"#dddddd\"/>\n",
                  px(0), py(f), px(1), py(f));
    os << buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.6g\" y=\"%.6g\" text-anchor=\"middle\" font-family=\"sans-serif\" "
                  "font-size=\"12\" fill=\"#444444\">%.1f</text>\n",
                  px(f), kB + 18, f);
    os << buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.6g\" y=\"%.6g\" text-anchor=\"end\" font-family=\"sans-serif\" "
                  "font-size=\"12\" fill=\"#444444\">%.1f</text>\n",
                  kL - 8, py(f) + 4, f);
    os << buf;
  }
  os << "<rect x=\"" << kL << "\" y=\"" << kT << "\" width=\"" << kR - kL << "\" height=\""
     << kB - kT << "\" fill=\"none\" stroke=\"#111111\"/>\n";
  os << "<text x=\"" << (kL + kR) / 2
     << "\" y=\"468\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\" "
        "fill=\"#111111\">coverage</text>\n";
  os << "<text x=\"20\" y=\"" << (kT + kB) / 2
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\" fill=\"#111111\" "
        "transform=\"rotate(-90 20 "
     << (kT + kB) / 2 << ")\">success</text>\n";

  // Polyline in integration order: the synthetic coverage-0 endpoint, then
  // thresholds from strictest to loosest.
  os << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
  std::snprintf(buf, sizeof(buf), "%.6g,%.6g", px(0.0), py(curve.points.back().success));
  os << buf;
  for (size_t i = curve.points.size(); i-- > 0;) {
    std::snprintf(buf, sizeof(buf), " %.6g,%.6g", px(curve.points[i].coverage),
                  py(curve.points[i].success));
    os << buf;
  }
  os << "\"/>\n";
  for (const CurvePoint& p : curve.points) {
    std::snprintf(buf, sizeof(buf),
                  "<circle cx=\"%.6g\" cy=\"%.6g\" r=\"3\" fill=\"#1f77b4\"/>\n", px(p.coverage),
                  py(p.success));
    os << buf;
  }
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%.6g\" y=\"%.6g\" font-family=\"sans-serif\" font-size=\"13\" "
                "fill=\"#111111\">AUC %.4f</text>\n",
                kL + 10, kT + 20, curve.auc);
  os << buf;
  os << "</svg>\n";
}

// ---- Ablation result tables ----

struct AblationRow {
  std::string label;  // e.g. "latent_dim=2", "iterations=5", "samples=400"
  double auc = 0.0;
  SuccessCoverageCurve curve;
};

struct AblationTable {
  std::string name;
  std::vector<AblationRow> rows;
};

inline void write_ablation_csv(std::ostream& os, const AblationTable& table) {
  os << "label,auc\n";
  for (const AblationRow& r : table.rows)
    os << r.label << "," << detail::f64_text(r.auc) << "\n";
}

}  // namespace graspgen::metrics
