#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "graspgen/dataset.hpp"
#include "graspgen/pipeline.hpp"

namespace fs = std::filesystem;
using namespace graspgen;
using pipeline::CliError;
using pipeline::ExitCode;
using pipeline::RunConfig;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("graspgen_pl_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

void spit(const fs::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary);
  REQUIRE(os.good());
  os << content;
}

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun run(const std::vector<std::string>& args) {
  std::vector<std::string> full;
  full.push_back("graspgen");
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : full) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = pipeline::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::vector<std::string> tree_files(const fs::path& root) {
  std::vector<std::string> rel;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), root).string());
  std::sort(rel.begin(), rel.end());
  return rel;
}

// Empty string when the trees match; otherwise a description of the first
// difference.
std::string tree_diff(const fs::path& a, const fs::path& b) {
  const auto fa = tree_files(a), fb = tree_files(b);
  if (fa != fb) return "file lists differ between " + a.string() + " and " + b.string();
  for (const auto& rel : fa)
    if (slurp(a / rel) != slurp(b / rel)) return "bytes differ for " + rel;
  return "";
}

size_t line_count(const std::string& text) {
  size_t n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

struct EnvGuard {
  std::string name;
  EnvGuard(const std::string& n, const std::string& value) : name(n) {
    ::setenv(n.c_str(), value.c_str(), 1);
  }
  ~EnvGuard() { ::unsetenv(name.c_str()); }
};

const char* kTinyConfig =
    "[run]\n"
    "seed 1\n"
    "objects 2\n"
    "views_per_object 1\n"
    "grasps_per_object 80\n"
    "train_iters 3\n"
    "sample_n 6\n"
    "latent_dim 2\n"
    "alpha 0.01\n"
    "learning_rate 0.0001\n"
    "sampler_batch 8\n"
    "evaluator_batch 8\n"
    "[backbone]\n"
    "width_scale 1\n"
    "neighbor_cap 8\n"
    "s0_points 16\n"
    "s1_points 8\n"
    "s0_radius 0.02\n"
    "s1_radius 0.04\n"
    "s0_channels 8,8,16\n"
    "s1_channels 16,16,32\n"
    "s2_channels 32,32,64\n"
    "head 64,64\n"
    "[refine]\n"
    "iterations 2\n"
    "step_cap 0.01\n"
    "keep_threshold 0.0\n"
    "[render]\n"
    "resolution 48\n"
    "max_points 64\n"
    "noise_sigma 0.001\n";

// One end-to-end command walk shared by the pipeline tests. Built on first
// use; every step asserts success so later tests can rely on the outputs.
struct Walk {
  fs::path root, cfg, objects, data, sampler_dir, evaluator_dir, samples, refined, evald;
  dataset::LabeledGraspDataset d;
  RunConfig rc;
};

Walk build_walk() {
  Walk w;
  w.root = fresh_dir("walk");
  w.cfg = w.root / "tiny.cfg";
  spit(w.cfg, kTinyConfig);
  w.rc = pipeline::parse_config_text(kTinyConfig, RunConfig{});

  w.objects = w.root / "objects";
  auto r = run({"gen-objects", "--config", w.cfg.string(), "--out", w.objects.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);

  w.data = w.root / "data";
  r = run({"gen-data", "--config", w.cfg.string(), "--objects", w.objects.string(), "--out",
           w.data.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  w.d = dataset::load(w.data);

  // Every view must offer both labels or the training commands cannot work
  // with this seed; fail loudly here rather than deep inside a later step.
  for (size_t v = 0; v < w.d.views.size(); ++v) {
    size_t pos = 0, neg = 0;
    for (const auto& rec : w.d.records)
      if (rec.view_id == v) (rec.positive ? pos : neg) += 1;
    INFO("view " << v << " has " << pos << " positives / " << neg << " negatives");
    REQUIRE(pos >= 1);
    REQUIRE(neg >= 1);
  }

  w.sampler_dir = w.root / "sampler";
  r = run({"train-sampler", "--config", w.cfg.string(), "--data", w.data.string(), "--out",
           w.sampler_dir.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);

  w.evaluator_dir = w.root / "evaluator";
  r = run({"train-evaluator", "--config", w.cfg.string(), "--data", w.data.string(), "--out",
           w.evaluator_dir.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);

  w.samples = w.root / "samples";
  r = run({"sample", "--config", w.cfg.string(), "--data", w.data.string(), "--checkpoint",
           w.sampler_dir.string(), "--out", w.samples.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);

  w.refined = w.root / "refined";
  r = run({"refine", "--config", w.cfg.string(), "--data", w.data.string(), "--grasps",
           w.samples.string(), "--checkpoint", w.evaluator_dir.string(), "--out",
           w.refined.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);

  w.evald = w.root / "evaluated";
  r = run({"evaluate", "--config", w.cfg.string(), "--data", w.data.string(), "--grasps",
           w.refined.string(), "--out", w.evald.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  return w;
}

Walk& walk() {
  static Walk w = build_walk();
  return w;
}

}  // namespace

TEST_CASE("pipeline config defaults and dump round trip", "[pipeline]") {
  RunConfig def;
  CHECK(def.seed == 0);
  CHECK(def.latent_dim == 2);
  CHECK(def.sample_n == 200);
  CHECK(def.grasps_per_object == 200);
  CHECK(def.alpha == 0.01);
  CHECK(def.learning_rate == 0.0001);
  CHECK(def.sampler_batch == 64);
  CHECK(def.evaluator_batch == 64);
  CHECK(def.refinement.iterations == 10);
  CHECK(def.refinement.step_cap == 0.01);
  CHECK(def.refinement.keep_threshold == 0.5);
  def.require_valid();

  // Every non-path field must survive a dump/parse cycle.
  RunConfig a;
  a.seed = 31;
  a.objects = 5;
  a.views_per_object = 2;
  a.grasps_per_object = 77;
  a.train_iters = 9;
  a.sample_n = 13;
  a.latent_dim = 3;
  a.alpha = 0.125;
  a.learning_rate = 0.0005;
  a.sampler_batch = 12;
  a.evaluator_batch = 18;
  a.backbone.width_scale = 0.25;
  a.backbone.neighbor_cap = 24;
  a.backbone.stage_point_counts[0] = 96;
  a.backbone.stage_radii[1] = 0.05;
  a.backbone.stage_channels[0] = {32, 48};
  a.backbone.head_units = {256, 128};
  a.gripper.max_width = 0.09;
  a.refinement.iterations = 4;
  a.refinement.keep_threshold = 0.25;
  a.render_resolution = 96;
  a.render_noise_sigma = 0.002;
  const std::string dumped = a.dump();
  const RunConfig b = pipeline::parse_config_text(dumped, RunConfig{});
  CHECK(b.dump() == dumped);

  // Paths travel through the [paths] section and never through dump().
  const RunConfig c =
      pipeline::parse_config_text("[paths]\ndata /tmp/x\ncheckpoint /tmp/y\n", RunConfig{});
  CHECK(c.data == "/tmp/x");
  CHECK(c.checkpoint == "/tmp/y");
  CHECK(c.dump().find("/tmp/x") == std::string::npos);
}

TEST_CASE("pipeline config parse errors and env paths", "[pipeline]") {
  const auto code_of = [](const std::string& text) {
    try {
      pipeline::parse_config_text(text, RunConfig{});
      return ExitCode::ok;
    } catch (const CliError& e) {
      return e.code();
    }
  };
  CHECK(code_of("[run]\nbogus_key 3\n") == ExitCode::usage);
  CHECK(code_of("[run]\nseed abc\n") == ExitCode::usage);
  CHECK(code_of("no_section_key 3\n") == ExitCode::usage);
  CHECK(code_of("[run\nseed 3\n") == ExitCode::usage);
  CHECK(code_of("[run]\nseed 3\n# comment\n\n") == ExitCode::ok);

  RunConfig cfg;
  cfg.data = "from_file";
  cfg.seed = 5;
  {
    EnvGuard g1("GRASPGEN_DATA", "from_env");
    pipeline::apply_env_paths(cfg);
    CHECK(cfg.data == "from_env");
    CHECK(cfg.seed == 5);  // environment only ever touches paths
  }
  cfg.data = "reset";
  pipeline::apply_env_paths(cfg);  // unset variables leave fields alone
  CHECK(cfg.data == "reset");
}

TEST_CASE("pipeline grasp table round trip", "[pipeline]") {
  Rng rng(4711);
  std::vector<pipeline::GraspRow> rows;
  for (int i = 0; i < 12; ++i) {
    pipeline::GraspRow r;
    r.view_id = static_cast<std::uint32_t>(i % 3);
    const geom::Quat q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
    r.grasp = geom::Grasp{q.normalized(),
                          {rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)}};
    r.score = rng.uniform01();
    r.has_score = true;
    rows.push_back(r);
  }

  for (const bool with_scores : {true, false}) {
    std::ostringstream os;
    pipeline::write_grasp_table(os, rows, with_scores);
    std::istringstream is(os.str());
    bool scored = false;
    const auto back = pipeline::read_grasp_table(is, &scored);
    REQUIRE(scored == with_scores);
    REQUIRE(back.size() == rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
      CHECK(back[i].view_id == rows[i].view_id);
      CHECK(geom::grasp_to_values(back[i].grasp) == geom::grasp_to_values(rows[i].grasp));
      if (with_scores) CHECK(back[i].score == rows[i].score);
    }
  }

  const auto code_of = [](const std::string& text) {
    std::istringstream is(text);
    try {
      pipeline::read_grasp_table(is);
      return ExitCode::ok;
    } catch (const CliError& e) {
      return e.code();
    }
  };
  CHECK(code_of("") == ExitCode::missing_input);
  CHECK(code_of("not,a,header\n") == ExitCode::missing_input);
  CHECK(code_of("view_id,qw,qx,qy,qz,tx,ty,tz\n0,1,0,0,0,0,0\n") == ExitCode::missing_input);
  CHECK(code_of("view_id,qw,qx,qy,qz,tx,ty,tz\n0,1,0,0,zero,0,0,0\n") ==
        ExitCode::missing_input);
}

TEST_CASE("pipeline run manifest round trip", "[pipeline]") {
  const fs::path dir = fresh_dir("manifest");
  pipeline::RunManifest m;
  m.command = "sample";
  m.seed = 99;
  m.dataset_hash = "00ff00ff00ff00ff";
  m.checkpoint_hash = "1234123412341234";
  m.config_text = "[run]\nseed 99\n[refine]\niterations 4\n";
  m.artifacts = {{"grasps.csv", "aaaaaaaaaaaaaaaa"}, {"notes.txt", "bbbbbbbbbbbbbbbb"}};
  pipeline::write_run_manifest(dir, m);

  const auto back = pipeline::read_run_manifest(dir);
  CHECK(back.command == m.command);
  CHECK(back.seed == m.seed);
  CHECK(back.dataset_hash == m.dataset_hash);
  CHECK(back.checkpoint_hash == m.checkpoint_hash);
  CHECK(back.config_text == m.config_text);
  CHECK(back.artifacts == m.artifacts);

  try {
    pipeline::read_run_manifest(dir / "nope");
    FAIL("expected missing manifest to throw");
  } catch (const CliError& e) {
    CHECK(e.code() == ExitCode::missing_input);
  }
}

TEST_CASE("pipeline cli walk produces consistent artifacts", "[pipeline]") {
  Walk& w = walk();

  // gen-objects: one STL per object, hashes recorded in the manifest.
  const auto objects_manifest = pipeline::read_run_manifest(w.objects);
  CHECK(objects_manifest.command == "gen-objects");
  CHECK(objects_manifest.seed == 1);
  REQUIRE(objects_manifest.artifacts.size() == 2);
  CHECK(objects_manifest.artifacts[0].first == "obj0000.stl");
  CHECK(objects_manifest.artifacts[1].first == "obj0001.stl");
  for (const auto& [rel, hash] : objects_manifest.artifacts)
    CHECK(pipeline::detail::hex64(pipeline::hash_file(w.objects / rel)) == hash);

  // gen-data: dataset hash in the manifest matches the stored tree.
  const auto data_manifest = pipeline::read_run_manifest(w.data);
  CHECK(data_manifest.command == "gen-data");
  CHECK(data_manifest.dataset_hash == pipeline::detail::hex64(dataset::content_hash(w.data)));
  CHECK(w.d.objects.size() == 2);
  CHECK(w.d.views.size() == 2);
  CHECK(w.d.records.size() == 160);

  // Training outputs: checkpoint plus one log row per iteration, and the
  // input dataset hash is embedded for provenance.
  for (const fs::path& dir : {w.sampler_dir, w.evaluator_dir}) {
    const auto m = pipeline::read_run_manifest(dir);
    CHECK(m.dataset_hash == data_manifest.dataset_hash);
    CHECK(fs::exists(dir / "checkpoint.bin"));
    const std::string log = slurp(dir / "training_log.csv");
    CHECK(line_count(log) == 1 + 3);  // header + train_iters
  }

  // sample: n grasps per view, no scores yet.
  {
    const std::string table = slurp(w.samples / "grasps.csv");
    CHECK(line_count(table) == 1 + 6 * 2);
    CHECK(table.rfind("view_id,qw,qx,qy,qz,tx,ty,tz\n", 0) == 0);
    const auto m = pipeline::read_run_manifest(w.samples);
    CHECK(m.checkpoint_hash != "none");
    const auto rows = pipeline::read_grasp_table_checked(w.samples.string(), false);
    REQUIRE(rows.size() == 12);
    for (const auto& r : rows) {
      CHECK(r.view_id < 2);
      CHECK_FALSE(r.has_score);
      r.grasp.require_valid();
    }
  }

  // refine: keep threshold 0 keeps every grasp; traces cover every input at
  // every iteration, and exported poses stay valid.
  {
    const auto rows = pipeline::read_grasp_table_checked(w.refined.string(), true);
    REQUIRE(rows.size() == 12);
    for (const auto& r : rows) {
      CHECK(r.has_score);
      CHECK(r.score >= 0.0);
      CHECK(r.score <= 1.0);
      r.grasp.require_valid();
    }
    for (const char* name : {"traces_view0000.csv", "traces_view0001.csv"}) {
      const std::string traces = slurp(w.refined / name);
      CHECK(line_count(traces) == 1 + 6 * (2 + 1));  // header + n * (iters + 1)
    }
  }

  // evaluate: per-view metrics row plus artifact/curve exports.
  {
    const std::string metrics_csv = slurp(w.evald / "metrics.csv");
    CHECK(line_count(metrics_csv) == 1 + 2);
    CHECK(metrics_csv.rfind("view,n_predictions,n_gstar,success,coverage,auc\n", 0) == 0);
    for (const char* name :
         {"artifact_view0000.csv", "curve_view0000.csv", "curve_view0000.svg",
          "artifact_view0001.csv", "curve_view0001.csv", "curve_view0001.svg"})
      CHECK(fs::exists(w.evald / name));
    const auto m = pipeline::read_run_manifest(w.evald);
    CHECK(m.artifacts.size() == 7);  // 3 per view + metrics.csv
  }

  // The dataset is an input everywhere downstream; nothing may mutate it.
  CHECK(pipeline::detail::hex64(dataset::content_hash(w.data)) == data_manifest.dataset_hash);
}

TEST_CASE("pipeline cli reruns are byte-identical and overwrite policy holds", "[pipeline]") {
  Walk& w = walk();
  const fs::path root = fresh_dir("rerun");

  const auto rerun = [&](const std::string& name, std::vector<std::string> args) {
    const fs::path dir = root / name;
    args.push_back("--out");
    args.push_back(dir.string());
    const auto r = run(args);
    INFO(r.err);
    REQUIRE(r.code == 0);
    return dir;
  };

  const auto objects2 =
      rerun("objects", {"gen-objects", "--config", w.cfg.string()});
  CHECK(tree_diff(w.objects, objects2) == "");
  const auto data2 = rerun("data", {"gen-data", "--config", w.cfg.string(), "--objects",
                                    objects2.string()});
  CHECK(tree_diff(w.data, data2) == "");
  const auto sampler2 = rerun("sampler", {"train-sampler", "--config", w.cfg.string(), "--data",
                                          data2.string()});
  CHECK(tree_diff(w.sampler_dir, sampler2) == "");
  const auto samples2 =
      rerun("samples", {"sample", "--config", w.cfg.string(), "--data", data2.string(),
                        "--checkpoint", sampler2.string()});
  CHECK(tree_diff(w.samples, samples2) == "");
  const auto refined2 =
      rerun("refined", {"refine", "--config", w.cfg.string(), "--data", data2.string(),
                        "--grasps", samples2.string(), "--checkpoint", w.evaluator_dir.string()});
  CHECK(tree_diff(w.refined, refined2) == "");
  const auto evald2 =
      rerun("evaluated", {"evaluate", "--config", w.cfg.string(), "--data", data2.string(),
                          "--grasps", refined2.string()});
  CHECK(tree_diff(w.evald, evald2) == "");

  // A second run into the same directory must refuse without --overwrite and
  // reproduce the identical bytes with it.
  auto r = run({"sample", "--config", w.cfg.string(), "--data", data2.string(), "--checkpoint",
                sampler2.string(), "--out", samples2.string()});
  CHECK(r.code == static_cast<int>(ExitCode::output));
  r = run({"sample", "--config", w.cfg.string(), "--data", data2.string(), "--checkpoint",
           sampler2.string(), "--out", samples2.string(), "--overwrite"});
  INFO(r.err);
  CHECK(r.code == 0);
  CHECK(tree_diff(w.samples, samples2) == "");
}

TEST_CASE("pipeline cli error paths use distinct exit codes", "[pipeline]") {
  Walk& w = walk();
  const fs::path root = fresh_dir("errors");

  CHECK(run({}).code == static_cast<int>(ExitCode::usage));
  CHECK(run({"no-such-command"}).code == static_cast<int>(ExitCode::usage));
  CHECK(run({"sample", "--bogus", "1"}).code == static_cast<int>(ExitCode::usage));
  CHECK(run({"evaluate", "--n", "5"}).code == static_cast<int>(ExitCode::usage));
  CHECK(run({"sample", "--seed"}).code == static_cast<int>(ExitCode::usage));
  CHECK(run({"sample", "--seed", "x"}).code == static_cast<int>(ExitCode::usage));
  CHECK(run({"train-sampler", "--config", (root / "none.cfg").string()}).code ==
        static_cast<int>(ExitCode::missing_input));

  const auto help = run({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("usage: graspgen") == 0);

  // Missing inputs are distinct from usage errors.
  CHECK(run({"sample", "--data", (root / "nodata").string(), "--checkpoint",
             w.sampler_dir.string(), "--out", (root / "o1").string()})
            .code == static_cast<int>(ExitCode::missing_input));
  CHECK(run({"sample", "--data", w.data.string(), "--checkpoint", (root / "nock").string(),
             "--out", (root / "o2").string()})
            .code == static_cast<int>(ExitCode::missing_input));
  CHECK(run({"evaluate", "--data", w.data.string(), "--grasps", w.samples.string(), "--out",
             (root / "o3").string()})
            .code == static_cast<int>(ExitCode::missing_input));  // no score column yet

  // Architecture mismatch gets its own code.
  CHECK(run({"sample", "--config", w.cfg.string(), "--data", w.data.string(), "--checkpoint",
             w.sampler_dir.string(), "--latent-dim", "3", "--out", (root / "o4").string()})
            .code == static_cast<int>(ExitCode::checkpoint_mismatch));
  CHECK(run({"refine", "--config", w.cfg.string(), "--data", w.data.string(), "--grasps",
             w.samples.string(), "--checkpoint", w.sampler_dir.string(), "--out",
             (root / "o5").string()})
            .code == static_cast<int>(ExitCode::checkpoint_mismatch));

  // Unwritable output: a path component is a regular file.
  spit(root / "blocker", "x");
  CHECK(run({"gen-objects", "--config", w.cfg.string(), "--out",
             (root / "blocker" / "sub").string()})
            .code == static_cast<int>(ExitCode::output));

  // Invalid values are rejected before any work happens.
  CHECK(run({"sample", "--config", w.cfg.string(), "--data", w.data.string(), "--checkpoint",
             w.sampler_dir.string(), "--latent-dim", "9", "--out", (root / "o6").string()})
            .code == static_cast<int>(ExitCode::usage));
  CHECK(run({"gen-objects", "--objects", "0", "--out", (root / "o7").string()}).code ==
        static_cast<int>(ExitCode::usage));
}

TEST_CASE("pipeline cli precedence: file, environment, flags", "[pipeline]") {
  const fs::path root = fresh_dir("precedence");
  const fs::path file_out = root / "from_file";
  const fs::path cfg = root / "prec.cfg";
  spit(cfg, "[run]\nseed 7\nobjects 1\n[paths]\nout " + file_out.string() + "\n");

  // File alone decides the output directory and the object count.
  auto r = run({"gen-objects", "--config", cfg.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(file_out / "obj0000.stl"));
  CHECK_FALSE(fs::exists(file_out / "obj0001.stl"));
  CHECK(pipeline::read_run_manifest(file_out).seed == 7);

  // Environment overrides the file's paths (and only paths).
  const fs::path env_out = root / "from_env";
  {
    EnvGuard g("GRASPGEN_OUT", env_out.string());
    r = run({"gen-objects", "--config", cfg.string()});
    INFO(r.err);
    REQUIRE(r.code == 0);
    CHECK(fs::exists(env_out / "run_manifest.txt"));
    CHECK(pipeline::read_run_manifest(env_out).seed == 7);
  }

  // Flags override both, for paths and for values.
  const fs::path flag_out = root / "from_flag";
  {
    EnvGuard g("GRASPGEN_OUT", (root / "env_unused").string());
    r = run({"gen-objects", "--config", cfg.string(), "--out", flag_out.string(), "--objects",
             "2", "--seed", "9"});
    INFO(r.err);
    REQUIRE(r.code == 0);
    CHECK_FALSE(fs::exists(root / "env_unused"));
    CHECK(fs::exists(flag_out / "obj0001.stl"));
    CHECK(pipeline::read_run_manifest(flag_out).seed == 9);
  }
}

TEST_CASE("pipeline ablation harnesses are deterministic and monotone", "[pipeline]") {
  Walk& w = walk();
  pipeline::TrainedSampler s = pipeline::train_sampler_model(w.d, w.rc, w.rc.seed);
  pipeline::TrainedEvaluator e = pipeline::train_evaluator_model(w.d, w.rc, w.rc.seed + 1000);

  // Sample-count sweep: draws are nested prefixes of one stream, so coverage
  // can only grow with the count; a second sweep reproduces the numbers.
  const auto pts = pipeline::ablation_sample_count(w.d, w.rc, s, {3, 6, 12});
  REQUIRE(pts.size() == 3);
  CHECK(pts[0].count == 3);
  CHECK(pts[2].count == 12);
  for (size_t i = 0; i + 1 < pts.size(); ++i) CHECK(pts[i].coverage <= pts[i + 1].coverage);
  const auto pts2 = pipeline::ablation_sample_count(w.d, w.rc, s, {3, 6, 12});
  for (size_t i = 0; i < pts.size(); ++i) CHECK(pts[i].coverage == pts2[i].coverage);

  // Refinement sweep: one row per iteration count, pooled success rates, and
  // bit-identical numbers on a rerun.
  const auto ra = pipeline::ablation_refinement(w.d, w.rc, s, e);
  REQUIRE(ra.table.rows.size() == 3);
  REQUIRE(ra.success_rates.size() == 3);
  CHECK(ra.table.rows[0].label == "iterations=0");
  CHECK(ra.table.rows[2].label == "iterations=2");
  for (const auto& row : ra.table.rows) {
    CHECK(row.auc >= 0.0);
    CHECK(row.auc <= 1.0);
  }
  const auto ra2 = pipeline::ablation_refinement(w.d, w.rc, s, e);
  for (size_t k = 0; k < ra.table.rows.size(); ++k) {
    CHECK(ra.table.rows[k].auc == ra2.table.rows[k].auc);
    CHECK(ra.success_rates[k] == ra2.success_rates[k]);
  }

  // Latent sweep: labeled row per dimensionality, reproducible end to end
  // (training included).
  const auto lt = pipeline::ablation_latent_dims(w.d, w.rc, {1, 2});
  REQUIRE(lt.rows.size() == 2);
  CHECK(lt.rows[0].label == "latent_dim=1");
  CHECK(lt.rows[1].label == "latent_dim=2");
  const auto lt2 = pipeline::ablation_latent_dims(w.d, w.rc, {1, 2});
  for (size_t i = 0; i < lt.rows.size(); ++i) CHECK(lt.rows[i].auc == lt2.rows[i].auc);
}

TEST_CASE("pipeline report replays evaluation bitwise and detects tampering", "[pipeline]") {
  Walk& w = walk();
  const fs::path root = fresh_dir("report");

  const fs::path report1 = root / "report1";
  auto r = run({"report", "--grasps", w.evald.string(), "--out", report1.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  // A replayed curve is the stored curve, byte for byte.
  CHECK(slurp(report1 / "replayed_curve_view0000.csv") == slurp(w.evald / "curve_view0000.csv"));
  CHECK(slurp(report1 / "replayed_curve_view0001.csv") == slurp(w.evald / "curve_view0001.csv"));
  CHECK(fs::exists(report1 / "summary.csv"));
  // The resolved configuration of the evaluated run rides along.
  CHECK(slurp(report1 / "resolved_config.txt") ==
        pipeline::read_run_manifest(w.evald).config_text);

  const fs::path report2 = root / "report2";
  r = run({"report", "--grasps", w.evald.string(), "--out", report2.string()});
  REQUIRE(r.code == 0);
  CHECK(tree_diff(report1, report2) == "");

  // report rejects a directory that is not an evaluate run.
  CHECK(run({"report", "--grasps", w.sampler_dir.string(), "--out", (root / "r3").string()})
            .code == static_cast<int>(ExitCode::missing_input));

  // Tampering with the stored AUC table is caught by the replay cross-check.
  const fs::path tampered = root / "tampered";
  fs::copy(w.evald, tampered, fs::copy_options::recursive);
  {
    std::istringstream is(slurp(tampered / "metrics.csv"));
    std::ostringstream os;
    std::string line;
    bool first_data = true;
    while (std::getline(is, line)) {
      if (!line.empty() && line[0] != 'v' && first_data) {
        line = line.substr(0, line.rfind(',')) + ",1.5";
        first_data = false;
      }
      os << line << "\n";
    }
    spit(tampered / "metrics.csv", os.str());
  }
  CHECK(run({"report", "--grasps", tampered.string(), "--out", (root / "r4").string()}).code ==
        static_cast<int>(ExitCode::failure));
}
