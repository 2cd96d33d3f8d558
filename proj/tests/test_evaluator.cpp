#include <algorithm>
#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "graspgen/evaluator.hpp"

namespace gg = graspgen;
using gg::Rng;
using gg::ad::ParamStore;
using gg::ad::Tape;
using gg::ad::Tensor;
using gg::cloud::PointFeatureCloud;
using gg::geom::Grasp;
using gg::geom::Quat;
using gg::geom::Vec3;
using gg::mesh::TriMesh;
using gg::scene::GripperModel;
namespace ev = gg::evaluator;

namespace {

ev::EvaluatorConfig tiny_config() {
  ev::EvaluatorConfig cfg;
  cfg.backbone.stage_point_counts = {16, 8, 0};
  cfg.backbone.stage_radii = {0.05, 0.12, 0.0};
  cfg.backbone.stage_channels = {std::vector<int>{8, 8}, std::vector<int>{16, 16},
                                 std::vector<int>{16, 32}};
  cfg.backbone.head_units = {32, 32};
  cfg.backbone.neighbor_cap = 16;
  return cfg;
}

PointFeatureCloud centered_cloud(int n, Rng& rng, double radius = 0.04) {
  PointFeatureCloud x;
  x.coordinates.resize(n);
  for (Vec3& p : x.coordinates)
    p = gg::geom::normalized(Vec3{rng.normal(), rng.normal(), rng.normal()}) * radius;
  const Vec3 c = gg::cloud::centroid(x.coordinates);
  for (Vec3& p : x.coordinates) p -= c;
  return x;
}

Grasp random_grasp(Rng& rng, double spread = 0.03) {
  Grasp g;
  g.rotation = Quat{rng.normal(), rng.normal(), rng.normal(), rng.normal()}.normalized();
  g.translation = {spread * rng.normal(), spread * rng.normal(), spread * rng.normal()};
  return g;
}

// Area-uniform surface cloud re-centered on its centroid; the removed offset
// is reported so mesh-frame grasps can be expressed in the cloud frame.
PointFeatureCloud surface_cloud(const TriMesh& m, int n, const GripperModel& grip, Rng& rng,
                                Vec3* offset) {
  PointFeatureCloud x;
  for (const auto& d : gg::scene::sample_candidates_diag(m, n, grip, rng))
    x.coordinates.push_back(d.surface_point);
  const Vec3 c = gg::cloud::centroid(x.coordinates);
  for (Vec3& p : x.coordinates) p -= c;
  if (offset) *offset = c;
  return x;
}

Grasp in_cloud_frame(const Grasp& g, const Vec3& offset) {
  Grasp out = g;
  out.translation -= offset;
  return out;
}

}  // namespace

TEST_CASE("assemble_input fuses object and gripper points with an indicator", "[evaluator]") {
  Rng rng(11);
  const GripperModel grip;
  const PointFeatureCloud x = centered_cloud(40, rng);

  const ev::UnifiedCloud u = ev::assemble_input(x, Grasp::identity(), grip);
  const std::vector<Vec3> canonical = grip.sample_cloud();
  REQUIRE(u.object_count == 40);
  REQUIRE(u.gripper_count == static_cast<int>(canonical.size()));
  REQUIRE(u.coordinates.size() == x.coordinates.size() + canonical.size());
  REQUIRE(u.indicator.size() == u.coordinates.size());
  for (int i = 0; i < u.object_count; ++i) {
    CHECK(u.indicator[i] == 0.0);
    CHECK(gg::geom::norm(u.coordinates[i] - x.coordinates[i]) == 0.0);
  }
  for (size_t i = x.coordinates.size(); i < u.coordinates.size(); ++i) {
    CHECK(u.indicator[i] == 1.0);
    // identity grasp leaves the canonical gripper cloud untouched
    CHECK(gg::geom::norm(u.coordinates[i] - canonical[i - x.coordinates.size()]) < 1e-15);
  }

  const Grasp g = random_grasp(rng);
  Grasp shifted = g;
  const Vec3 delta{0.013, -0.021, 0.008};
  shifted.translation += delta;
  const ev::UnifiedCloud a = ev::assemble_input(x, g, grip);
  const ev::UnifiedCloud b = ev::assemble_input(x, shifted, grip);
  for (size_t i = x.coordinates.size(); i < a.coordinates.size(); ++i)
    CHECK(gg::geom::norm(b.coordinates[i] - a.coordinates[i] - delta) < 1e-12);
  for (size_t i = 0; i < x.coordinates.size(); ++i)
    CHECK(gg::geom::norm(b.coordinates[i] - a.coordinates[i]) == 0.0);

  PointFeatureCloud off = x;
  for (Vec3& p : off.coordinates) p += Vec3{0.02, 0.0, 0.0};
  CHECK_THROWS_AS(ev::assemble_input(off, g, grip), std::invalid_argument);
}

TEST_CASE("unified cloud is covariant under a shared rotation", "[evaluator]") {
  Rng rng(13);
  const GripperModel grip;
  const PointFeatureCloud x = centered_cloud(25, rng);
  const Grasp g = random_grasp(rng);
  const Quat r = Quat{rng.normal(), rng.normal(), rng.normal(), rng.normal()}.normalized();
  const gg::geom::Mat3 rm = r.to_matrix();

  PointFeatureCloud xr;
  for (const Vec3& p : x.coordinates) xr.coordinates.push_back(rm * p);
  Grasp gr;
  gr.rotation = (r * g.rotation).normalized();
  gr.translation = rm * g.translation;

  const ev::UnifiedCloud u = ev::assemble_input(x, g, grip);
  const ev::UnifiedCloud ur = ev::assemble_input(xr, gr, grip);
  REQUIRE(ur.coordinates.size() == u.coordinates.size());
  CHECK(ur.indicator == u.indicator);
  for (size_t i = 0; i < u.coordinates.size(); ++i)
    CHECK(gg::geom::norm(ur.coordinates[i] - rm * u.coordinates[i]) < 1e-12);
}

TEST_CASE("score is one half exactly under a zeroed final layer", "[evaluator]") {
  Rng rng(17);
  const ev::EvaluatorConfig cfg = tiny_config();
  ParamStore store;
  ev::add_evaluator_params(store, cfg, rng);
  std::fill(store.at("eval.logit.w").value.begin(), store.at("eval.logit.w").value.end(), 0.0);

  const GripperModel grip;
  const PointFeatureCloud x = centered_cloud(30, rng);
  CHECK(ev::score(store, cfg, x, random_grasp(rng), grip) == 0.5);
  CHECK(ev::score(store, cfg, x, random_grasp(rng), grip) == 0.5);
}

TEST_CASE("score is deterministic, bounded, and object-permutation invariant", "[evaluator]") {
  Rng rng(19);
  const ev::EvaluatorConfig cfg = tiny_config();
  ParamStore store;
  ev::add_evaluator_params(store, cfg, rng);
  const GripperModel grip;
  const PointFeatureCloud x = centered_cloud(35, rng);
  const Grasp g = random_grasp(rng);

  const double s1 = ev::score(store, cfg, x, g, grip);
  const double s2 = ev::score(store, cfg, x, g, grip);
  CHECK(s1 == s2);
  CHECK(s1 > 0.0);
  CHECK(s1 < 1.0);

  PointFeatureCloud perm = x;
  std::reverse(perm.coordinates.begin(), perm.coordinates.end());
  std::swap(perm.coordinates[3], perm.coordinates[11]);
  CHECK_THAT(ev::score(store, cfg, perm, g, grip), Catch::Matchers::WithinAbs(s1, 1e-9));
}

TEST_CASE("evaluator loss matches the clamped cross-entropy closed form", "[evaluator]") {
  auto loss_of = [](double y, double s) {
    Tape tape;
    return ev::evaluator_loss(tape, y, tape.constant({s}, {1, 1})).scalar();
  };
  CHECK_THAT(loss_of(1.0, 0.5), Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));
  CHECK_THAT(loss_of(0.0, 0.5), Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));
  CHECK_THAT(loss_of(1.0, 1.0 - 1e-7), Catch::Matchers::WithinRel(1e-7, 1e-2));
  CHECK_THAT(loss_of(1.0, 1.0), Catch::Matchers::WithinRel(1e-7, 1e-2));  // clamped
  CHECK_THAT(loss_of(1.0, 1e-12), Catch::Matchers::WithinAbs(-std::log(1e-7), 1e-9));
  CHECK_THAT(loss_of(0.0, 0.25), Catch::Matchers::WithinAbs(-std::log(0.75), 1e-12));

  Tape bad;
  CHECK_THROWS_AS(ev::evaluator_loss(bad, 0.5, bad.constant({0.5}, {1, 1})),
                  std::invalid_argument);
  CHECK_THROWS_AS(ev::evaluator_loss(bad, 1.0, bad.constant({0.5, 0.5}, {1, 2})),
                  gg::ad::shape_error);
}

TEST_CASE("evaluator loss gradient matches calculus and finite differences", "[evaluator]") {
  for (const double y : {0.0, 1.0}) {
    for (const double s : {0.2, 0.5, 0.9}) {
      Tape tape;
      const Tensor sv = tape.leaf({s}, {1, 1}, true);
      tape.backward(ev::evaluator_loss(tape, y, sv));
      const double analytic = sv.grad()[0];
      // d/ds of -(y log s + (1-y) log(1-s)) worked out by hand.
      CHECK_THAT(analytic, Catch::Matchers::WithinAbs((s - y) / (s * (1.0 - s)), 1e-12));

      const double h = 1e-6;
      auto at = [&](double v) {
        Tape t2;
        return ev::evaluator_loss(t2, y, t2.constant({v}, {1, 1})).scalar();
      };
      CHECK_THAT(analytic, Catch::Matchers::WithinRel((at(s + h) - at(s - h)) / (2 * h), 1e-6));
    }
  }
  // Outside the clamp the gradient is cut to zero.
  Tape tape;
  const Tensor sv = tape.leaf({1e-9}, {1, 1}, true);
  tape.backward(ev::evaluator_loss(tape, 1.0, sv));
  CHECK(sv.grad()[0] == 0.0);
}

TEST_CASE("score gradients w.r.t. gripper points match finite differences", "[evaluator]") {
  Rng rng(23);
  const ev::EvaluatorConfig cfg = tiny_config();
  ParamStore store;
  ev::add_evaluator_params(store, cfg, rng);
  const GripperModel grip;
  const PointFeatureCloud x = centered_cloud(20, rng);
  const Grasp g = random_grasp(rng, 0.02);
  const std::vector<Vec3> body = gg::geom::transform_points(g, grip.sample_cloud());

  std::vector<double> analytic;
  {
    Tape tape;
    gg::ad::Bindings b(tape, store);
    const ev::ScoreGraph sg = ev::score_graph(tape, b, cfg, x, body);
    tape.backward(sg.score);
    analytic = sg.gripper_points.grad();
  }

  auto eval_at = [&](const std::vector<Vec3>& pts) {
    Tape tape;
    gg::ad::Bindings b(tape, store);
    return ev::score_graph(tape, b, cfg, x, pts).score.scalar();
  };

  Rng pick(3);
  const double h = 1e-6;
  int checked = 0;
  for (int trial = 0; trial < 60 && checked < 12; ++trial) {
    const size_t pi = pick.uniform_index(body.size());
    const size_t axis = pick.uniform_index(3);
    const size_t flat = pi * 3 + axis;
    if (std::fabs(analytic[flat]) < 1e-10) continue;  // pruned by pooling; FD is noise
    std::vector<Vec3> up = body, dn = body;
    double* pu = axis == 0 ? &up[pi].x : axis == 1 ? &up[pi].y : &up[pi].z;
    double* pd = axis == 0 ? &dn[pi].x : axis == 1 ? &dn[pi].y : &dn[pi].z;
    *pu += h;
    *pd -= h;
    const double fd = (eval_at(up) - eval_at(dn)) / (2.0 * h);
    CHECK_THAT(analytic[flat], Catch::Matchers::WithinRel(fd, 1e-4));
    ++checked;
  }
  CHECK(checked >= 6);
}

TEST_CASE("hard negatives stay close to their source yet fail the oracle", "[evaluator]") {
  Rng rng(29);
  const GripperModel grip;
  const TriMesh box = gg::mesh::make_box(0.06, 0.06, 0.06);

  // Find a verified positive to perturb.
  Grasp positive;
  bool found = false;
  for (int i = 0; i < 400 && !found; ++i) {
    const auto cands = gg::scene::sample_candidate_grasps(box, 1, grip, rng);
    if (gg::scene::oracle_report(box, cands[0], grip).success) {
      positive = cands[0];
      found = true;
    }
  }
  REQUIRE(found);

  const auto cps = grip.control_points();
  int mined_count = 0;
  for (int i = 0; i < 200 && mined_count < 50; ++i) {
    const auto mined = ev::mine_hard_negative(positive, box, grip, rng);
    if (!mined) continue;
    ++mined_count;
    CHECK(gg::geom::recon_distance(positive, *mined, cps) < 0.10);
    const auto rep = gg::scene::oracle_report(box, *mined, grip);
    CHECK_FALSE(rep.success);
    CHECK((!rep.collision_free || !rep.closing_volume));
  }
  CHECK(mined_count == 50);

  SECTION("mining is deterministic under a fixed seed") {
    Rng a(777), b(777);
    const auto ma = ev::mine_hard_negative(positive, box, grip, a);
    const auto mb = ev::mine_hard_negative(positive, box, grip, b);
    REQUIRE(ma.has_value() == mb.has_value());
    if (ma)
      CHECK(gg::geom::grasp_to_values(*ma) == gg::geom::grasp_to_values(*mb));
  }

  SECTION("an impossible proximity bound yields none") {
    Rng r(31);
    CHECK_FALSE(ev::mine_hard_negative(positive, box, grip, r, 1e-12).has_value());
  }
}

TEST_CASE("raw perturbation acceptance rate sits in the expected band", "[evaluator]") {
  Rng rng(37);
  const GripperModel grip;
  const TriMesh box = gg::mesh::make_box(0.06, 0.06, 0.06);

  Grasp positive;
  bool found = false;
  for (int i = 0; i < 400 && !found; ++i) {
    const auto cands = gg::scene::sample_candidate_grasps(box, 1, grip, rng);
    if (gg::scene::oracle_report(box, cands[0], grip).success) {
      positive = cands[0];
      found = true;
    }
  }
  REQUIRE(found);

  // Brute-force re-statement of the mining acceptance condition over raw
  // perturbation draws, independent of the retry loop.
  const auto cps = grip.control_points();
  int accepted = 0;
  const int trials = 10000;
  for (int i = 0; i < trials; ++i) {
    Grasp cand;
    cand.rotation = (positive.rotation *
                     gg::geom::Quat::from_matrix(gg::geom::euler_to_matrix(
                         rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6))))
                        .normalized();
    cand.translation = positive.translation + Vec3{rng.uniform(-0.03, 0.03),
                                                   rng.uniform(-0.03, 0.03),
                                                   rng.uniform(-0.03, 0.03)};
    if (gg::geom::recon_distance(positive, cand, cps) >= 0.10) continue;
    const auto rep = gg::scene::oracle_report(box, cand, grip);
    if (!rep.collision_free || !rep.closing_volume) ++accepted;
  }
  const double rate = static_cast<double>(accepted) / trials;
  CHECK(rate > 0.1);
  CHECK(rate < 0.9);
}

TEST_CASE("training batches follow the 30/30/40 split", "[evaluator]") {
  Rng rng(41);
  const GripperModel grip;
  const TriMesh box = gg::mesh::make_box(0.06, 0.06, 0.06);

  std::vector<Grasp> positives, negatives;
  for (int i = 0; i < 3000 && (positives.size() < 25 || negatives.size() < 25); ++i) {
    const auto cands = gg::scene::sample_candidate_grasps(box, 1, grip, rng);
    if (gg::scene::oracle_report(box, cands[0], grip).success)
      positives.push_back(cands[0]);
    else
      negatives.push_back(cands[0]);
  }
  REQUIRE(positives.size() >= 25);
  REQUIRE(negatives.size() >= 25);

  auto counts = [](const std::vector<ev::TrainingExample>& batch) {
    std::array<int, 3> c{0, 0, 0};
    for (const auto& e : batch) {
      if (e.provenance == ev::Provenance::simulated_positive) {
        ++c[0];
        CHECK(e.positive);
      } else if (e.provenance == ev::Provenance::sampled_negative) {
        ++c[1];
        CHECK_FALSE(e.positive);
      } else if (e.provenance == ev::Provenance::hard_negative) {
        ++c[2];
        CHECK_FALSE(e.positive);
      }
    }
    return c;
  };

  Rng r1(5);
  const auto b10 = ev::compose_training_batch(positives, negatives, box, grip, 10, r1);
  REQUIRE(b10.size() == 10);
  CHECK(counts(b10) == std::array<int, 3>{3, 3, 4});

  Rng r2(5);
  const auto b64 = ev::compose_training_batch(positives, negatives, box, grip, 64, r2);
  REQUIRE(b64.size() == 64);
  CHECK(counts(b64) == std::array<int, 3>{19, 19, 26});

  Rng r3(5);
  const auto b7 = ev::compose_training_batch(positives, negatives, box, grip, 7, r3);
  CHECK(counts(b7) == std::array<int, 3>{2, 2, 3});

  Rng r4(5);
  const auto b3 = ev::compose_training_batch(positives, negatives, box, grip, 3, r4);
  CHECK(counts(b3) == std::array<int, 3>{1, 1, 1});

  SECTION("fixed seeds reproduce the batch exactly") {
    Rng s1(99), s2(99);
    const auto a = ev::compose_training_batch(positives, negatives, box, grip, 16, s1);
    const auto b = ev::compose_training_batch(positives, negatives, box, grip, 16, s2);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(gg::geom::grasp_to_values(a[i].grasp) == gg::geom::grasp_to_values(b[i].grasp));
      CHECK(a[i].provenance == b[i].provenance);
    }
  }

  SECTION("every minted hard negative fails the oracle near some positive") {
    Rng s(123);
    const auto batch = ev::compose_training_batch(positives, negatives, box, grip, 20, s);
    const auto cps = grip.control_points();
    for (const auto& e : batch) {
      if (e.provenance != ev::Provenance::hard_negative) continue;
      CHECK_FALSE(gg::scene::oracle_report(box, e.grasp, grip).success);
      double best = 1e9;
      for (const Grasp& p : positives)
        best = std::min(best, gg::geom::recon_distance(p, e.grasp, cps));
      CHECK(best < 0.10);
    }
  }

  SECTION("empty pools are named in the error") {
    Rng s(7);
    CHECK_THROWS_WITH(ev::compose_training_batch({}, negatives, box, grip, 10, s),
                      Catch::Matchers::ContainsSubstring("positive"));
    CHECK_THROWS_WITH(ev::compose_training_batch(positives, {}, box, grip, 10, s),
                      Catch::Matchers::ContainsSubstring("negative"));
  }
}

TEST_CASE("a trained evaluator separates held-out positives from hard negatives",
          "[evaluator][slow]") {
  Rng rng(4001);
  const GripperModel grip;
  const TriMesh box = gg::mesh::make_box(0.06, 0.06, 0.06);

  // Oracle-labeled grasp pools in the mesh frame.
  std::vector<Grasp> positives, negatives;
  for (int i = 0; i < 4000 && (positives.size() < 120 || negatives.size() < 120); ++i) {
    const auto cands = gg::scene::sample_candidate_grasps(box, 1, grip, rng);
    if (gg::scene::oracle_report(box, cands[0], grip).success)
      positives.push_back(cands[0]);
    else
      negatives.push_back(cands[0]);
  }
  REQUIRE(positives.size() >= 120);
  REQUIRE(negatives.size() >= 120);

  const std::vector<Grasp> train_pos(positives.begin(), positives.begin() + 80);
  const std::vector<Grasp> held_pos(positives.begin() + 80, positives.begin() + 120);
  const std::vector<Grasp> train_neg(negatives.begin(), negatives.begin() + 80);

  Vec3 offset;
  Rng cloud_rng(4002);
  const PointFeatureCloud x = surface_cloud(box, 96, grip, cloud_rng, &offset);

  ev::EvaluatorConfig cfg;  // full backbone at reduced width
  cfg.backbone.width_scale = 0.25;
  ParamStore store;
  Rng init(4003);
  ev::add_evaluator_params(store, cfg, init);

  Rng batch_rng(4004);
  for (int step = 0; step < 500; ++step) {
    auto batch = ev::compose_training_batch(train_pos, train_neg, box, grip, 32, batch_rng);
    for (auto& e : batch) e.grasp = in_cloud_frame(e.grasp, offset);
    ev::evaluator_training_step(store, cfg, x, batch, grip, 3e-4);
  }

  // Held-out hard negatives minted from held-out positives.
  Rng mine_rng(4005);
  std::vector<Grasp> held_hard;
  while (held_hard.size() < 40) {
    const Grasp& src = held_pos[mine_rng.uniform_index(held_pos.size())];
    const auto mined = ev::mine_hard_negative(src, box, grip, mine_rng);
    if (mined) held_hard.push_back(*mined);
  }

  double pos_mean = 0.0, hard_mean = 0.0;
  for (const Grasp& g : held_pos) pos_mean += ev::score(store, cfg, x, in_cloud_frame(g, offset), grip);
  for (const Grasp& g : held_hard)
    hard_mean += ev::score(store, cfg, x, in_cloud_frame(g, offset), grip);
  pos_mean /= static_cast<double>(held_pos.size());
  hard_mean /= static_cast<double>(held_hard.size());

  INFO("held-out positive mean " << pos_mean << " vs hard-negative mean " << hard_mean);
  CHECK(pos_mean - hard_mean >= 0.2);
}

TEST_CASE("training step validates inputs and reports scores", "[evaluator]") {
  Rng rng(43);
  const ev::EvaluatorConfig cfg = tiny_config();
  ParamStore store;
  ev::add_evaluator_params(store, cfg, rng);
  const GripperModel grip;
  const PointFeatureCloud x = centered_cloud(25, rng);

  std::vector<ev::TrainingExample> batch{
      {random_grasp(rng), true, ev::Provenance::simulated_positive},
      {random_grasp(rng), false, ev::Provenance::sampled_negative},
  };
  const auto rep = ev::evaluator_training_step(store, cfg, x, batch, grip, 1e-4);
  CHECK(rep.loss > 0.0);
  CHECK(rep.mean_positive_score > 0.0);
  CHECK(rep.mean_positive_score < 1.0);
  CHECK(rep.mean_negative_score > 0.0);
  CHECK(rep.mean_negative_score < 1.0);

  CHECK_THROWS_AS(ev::evaluator_training_step(store, cfg, x, {}, grip, 1e-4),
                  std::invalid_argument);
}
