#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "graspgen/ad.hpp"
#include "graspgen/cloud.hpp"
#include "graspgen/dataset.hpp"
#include "graspgen/evaluator.hpp"
#include "graspgen/geom.hpp"
#include "graspgen/mesh.hpp"
#include "graspgen/metrics.hpp"
#include "graspgen/pnet.hpp"
#include "graspgen/refine.hpp"
#include "graspgen/rng.hpp"
#include "graspgen/sampler.hpp"
#include "graspgen/scene.hpp"

namespace graspgen::pipeline {

using geom::Grasp;
using geom::Vec3;
using mesh::TriMesh;
using scene::GripperModel;

// ---- Exit discipline ----
//
//   0  success
//   2  usage: unknown command/flag, malformed value, bad config file content
//   3  missing or unreadable input (dataset, objects, checkpoint, grasps)
//   4  checkpoint architecture does not match the requested configuration
//   5  output path: exists without --overwrite, or cannot be created/written
//   6  runtime failure (training/eval errors, inconsistent artifacts)

enum class ExitCode : int {
  ok = 0,
  usage = 2,
  missing_input = 3,
  checkpoint_mismatch = 4,
  output = 5,
  failure = 6,
};

class CliError : public std::runtime_error {
 public:
  CliError(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ExitCode code() const { return code_; }

 private:
  ExitCode code_;
};

// ---- Run configuration ----
//
// Precedence: built-in defaults < config file < environment (path fields
// only: GRASPGEN_DATA, GRASPGEN_OBJECTS, GRASPGEN_CHECKPOINT,
// GRASPGEN_GRASPS, GRASPGEN_OUT) < command-line flags.

struct RunConfig {
  std::uint64_t seed = 0;
  int objects = 2;
  int views_per_object = 1;
  int grasps_per_object = 200;
  int train_iters = 300;
  int sample_n = 200;
  int latent_dim = 2;
  double alpha = 0.01;
  double learning_rate = 0.0001;
  int sampler_batch = 64;
  int evaluator_batch = 64;
  pnet::BackboneConfig backbone;
  GripperModel gripper;
  refine::RefineParams refinement;
  int render_resolution = 64;
  int render_max_points = 256;
  double render_noise_sigma = 0.001;

  // Plumbing; never part of dump() so manifests stay location-independent.
  std::string data;
  std::string objects_dir;
  std::string checkpoint;
  std::string grasps;
  std::string out;
  bool overwrite = false;

  void require_valid() const {
    if (objects < 1) throw CliError(ExitCode::usage, "objects must be >= 1");
    if (views_per_object < 1) throw CliError(ExitCode::usage, "views_per_object must be >= 1");
    if (grasps_per_object < 1)
      throw CliError(ExitCode::usage, "grasps-per-object must be >= 1");
    if (train_iters < 0) throw CliError(ExitCode::usage, "iters must be >= 0");
    if (sample_n < 1) throw CliError(ExitCode::usage, "n must be >= 1");
    if (alpha < 0.0) throw CliError(ExitCode::usage, "alpha must be >= 0");
    if (!(learning_rate > 0.0)) throw CliError(ExitCode::usage, "learning_rate must be > 0");
    if (sampler_batch < 1 || evaluator_batch < 1)
      throw CliError(ExitCode::usage, "batch sizes must be >= 1");
    if (render_resolution < 8) throw CliError(ExitCode::usage, "render resolution too small");
    if (render_max_points < 16) throw CliError(ExitCode::usage, "render max_points too small");
    if (render_noise_sigma < 0.0) throw CliError(ExitCode::usage, "render noise must be >= 0");
    try {
      backbone.require_valid();
      refinement.require_valid();
      sampler_config().require_valid();
    } catch (const std::invalid_argument& e) {
      throw CliError(ExitCode::usage, e.what());
    }
  }

  sampler::SamplerConfig sampler_config() const {
    sampler::SamplerConfig cfg;
    cfg.backbone = backbone;
    cfg.latent_dim = latent_dim;
    cfg.cloud_feature_dim = 0;
    cfg.alpha = alpha;
    return cfg;
  }

  evaluator::EvaluatorConfig evaluator_config() const {
    evaluator::EvaluatorConfig cfg;
    cfg.backbone = backbone;
    return cfg;
  }

  std::string dump() const;
};

namespace detail {

inline std::string f64_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string int_list(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    char* end = nullptr;
    const long v = std::strtol(tok.c_str(), &end, 10);
    if (end == tok.c_str() || *end != '\0')
      throw CliError(ExitCode::usage, "config: malformed integer list for " + key);
    out.push_back(static_cast<int>(v));
  }
  if (out.empty()) throw CliError(ExitCode::usage, "config: empty integer list for " + key);
  return out;
}

inline std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0')
    throw CliError(ExitCode::usage, "malformed unsigned integer for " + what);
  return v;
}

inline int parse_int(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0')
    throw CliError(ExitCode::usage, "malformed integer for " + what);
  return static_cast<int>(v);
}

inline double parse_double(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw CliError(ExitCode::usage, "malformed number for " + what);
  return v;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string index_name(const char* stem, size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%04zu%s", stem, i, ext);
  return buf;
}

}  // namespace detail

inline std::string RunConfig::dump() const {
  std::ostringstream os;
  os << "[run]\n";
  os << "seed " << seed << "\n";
  os << "objects " << objects << "\n";
  os << "views_per_object " << views_per_object << "\n";
  os << "grasps_per_object " << grasps_per_object << "\n";
  os << "train_iters " << train_iters << "\n";
  os << "sample_n " << sample_n << "\n";
  os << "latent_dim " << latent_dim << "\n";
  os << "alpha " << detail::f64_text(alpha) << "\n";
  os << "learning_rate " << detail::f64_text(learning_rate) << "\n";
  os << "sampler_batch " << sampler_batch << "\n";
  os << "evaluator_batch " << evaluator_batch << "\n";
  os << "[gripper]\n";
  os << "finger_length " << detail::f64_text(gripper.finger_length) << "\n";
  os << "max_width " << detail::f64_text(gripper.max_width) << "\n";
  os << "finger_thickness " << detail::f64_text(gripper.finger_thickness) << "\n";
  os << "palm_depth " << detail::f64_text(gripper.palm_depth) << "\n";
  os << "palm_halfspan " << detail::f64_text(gripper.palm_halfspan) << "\n";
  os << "[backbone]\n";
  os << "width_scale " << detail::f64_text(backbone.width_scale) << "\n";
  os << "neighbor_cap " << backbone.neighbor_cap << "\n";
  os << "s0_points " << backbone.stage_point_counts[0] << "\n";
  os << "s1_points " << backbone.stage_point_counts[1] << "\n";
  os << "s0_radius " << detail::f64_text(backbone.stage_radii[0]) << "\n";
  os << "s1_radius " << detail::f64_text(backbone.stage_radii[1]) << "\n";
  os << "s0_channels " << detail::int_list(backbone.stage_channels[0]) << "\n";
  os << "s1_channels " << detail::int_list(backbone.stage_channels[1]) << "\n";
  os << "s2_channels " << detail::int_list(backbone.stage_channels[2]) << "\n";
  os << "head " << backbone.head_units[0] << "," << backbone.head_units[1] << "\n";
  os << "[refine]\n";
  os << "iterations " << refinement.iterations << "\n";
  os << "step_cap " << detail::f64_text(refinement.step_cap) << "\n";
  os << "keep_threshold " << detail::f64_text(refinement.keep_threshold) << "\n";
  os << "[render]\n";
  os << "resolution " << render_resolution << "\n";
  os << "max_points " << render_max_points << "\n";
  os << "noise_sigma " << detail::f64_text(render_noise_sigma) << "\n";
  return os.str();
}

// Applies "key value" lines (with optional [section] headers and '#'
// comments) on top of `base`. Path keys live in the [paths] section.
inline RunConfig parse_config_text(const std::string& text, RunConfig base) {
  std::istringstream is(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r'))
      line.pop_back();
    size_t start = 0;
    while (start < line.size() && (line[start] == ' ' || line[start] == '\t')) ++start;
    line.erase(0, start);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw CliError(ExitCode::usage,
                       "config: malformed section at line " + std::to_string(line_no));
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto space = line.find(' ');
    if (space == std::string::npos)
      throw CliError(ExitCode::usage, "config: expected 'key value' at line " +
                                          std::to_string(line_no));
    const std::string key = section.empty() ? line.substr(0, space)
                                            : section + "." + line.substr(0, space);
    const std::string value = line.substr(space + 1);

    if (key == "run.seed") base.seed = detail::parse_u64(value, key);
    else if (key == "run.objects") base.objects = detail::parse_int(value, key);
    else if (key == "run.views_per_object") base.views_per_object = detail::parse_int(value, key);
    else if (key == "run.grasps_per_object")
      base.grasps_per_object = detail::parse_int(value, key);
    else if (key == "run.train_iters") base.train_iters = detail::parse_int(value, key);
    else if (key == "run.sample_n") base.sample_n = detail::parse_int(value, key);
    else if (key == "run.latent_dim") base.latent_dim = detail::parse_int(value, key);
    else if (key == "run.alpha") base.alpha = detail::parse_double(value, key);
    else if (key == "run.learning_rate") base.learning_rate = detail::parse_double(value, key);
    else if (key == "run.sampler_batch") base.sampler_batch = detail::parse_int(value, key);
    else if (key == "run.evaluator_batch") base.evaluator_batch = detail::parse_int(value, key);
    else if (key == "gripper.finger_length")
      base.gripper.finger_length = detail::parse_double(value, key);
    else if (key == "gripper.max_width") base.gripper.max_width = detail::parse_double(value, key);
    else if (key == "gripper.finger_thickness")
      base.gripper.finger_thickness = detail::parse_double(value, key);
    else if (key == "gripper.palm_depth")
      base.gripper.palm_depth = detail::parse_double(value, key);
    else if (key == "gripper.palm_halfspan")
      base.gripper.palm_halfspan = detail::parse_double(value, key);
    else if (key == "backbone.width_scale")
      base.backbone.width_scale = detail::parse_double(value, key);
    else if (key == "backbone.neighbor_cap")
      base.backbone.neighbor_cap = detail::parse_int(value, key);
    else if (key == "backbone.s0_points")
      base.backbone.stage_point_counts[0] = detail::parse_int(value, key);
    else if (key == "backbone.s1_points")
      base.backbone.stage_point_counts[1] = detail::parse_int(value, key);
    else if (key == "backbone.s0_radius")
      base.backbone.stage_radii[0] = detail::parse_double(value, key);
    else if (key == "backbone.s1_radius")
      base.backbone.stage_radii[1] = detail::parse_double(value, key);
    else if (key == "backbone.s0_channels")
      base.backbone.stage_channels[0] = detail::parse_int_list(value, key);
    else if (key == "backbone.s1_channels")
      base.backbone.stage_channels[1] = detail::parse_int_list(value, key);
    else if (key == "backbone.s2_channels")
      base.backbone.stage_channels[2] = detail::parse_int_list(value, key);
    else if (key == "backbone.head") {
      const auto v = detail::parse_int_list(value, key);
      if (v.size() != 2) throw CliError(ExitCode::usage, "config: head needs two integers");
      base.backbone.head_units = {v[0], v[1]};
    } else if (key == "refine.iterations")
      base.refinement.iterations = detail::parse_int(value, key);
    else if (key == "refine.step_cap")
      base.refinement.step_cap = detail::parse_double(value, key);
    else if (key == "refine.keep_threshold")
      base.refinement.keep_threshold = detail::parse_double(value, key);
    else if (key == "render.resolution") base.render_resolution = detail::parse_int(value, key);
    else if (key == "render.max_points") base.render_max_points = detail::parse_int(value, key);
    else if (key == "render.noise_sigma")
      base.render_noise_sigma = detail::parse_double(value, key);
    else if (key == "paths.data") base.data = value;
    else if (key == "paths.objects") base.objects_dir = value;
    else if (key == "paths.checkpoint") base.checkpoint = value;
    else if (key == "paths.grasps") base.grasps = value;
    else if (key == "paths.out") base.out = value;
    else
      throw CliError(ExitCode::usage, "config: unknown key '" + key + "' at line " +
                                          std::to_string(line_no));
  }
  return base;
}

inline RunConfig parse_config_file(const std::string& path, RunConfig base) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CliError(ExitCode::missing_input, "cannot open config file " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return parse_config_text(os.str(), std::move(base));
}

inline void apply_env_paths(RunConfig& cfg) {
  const auto take = [](const char* name, std::string& field) {
    if (const char* v = std::getenv(name); v && *v) field = v;
  };
  take("GRASPGEN_DATA", cfg.data);
  take("GRASPGEN_OBJECTS", cfg.objects_dir);
  take("GRASPGEN_CHECKPOINT", cfg.checkpoint);
  take("GRASPGEN_GRASPS", cfg.grasps);
  take("GRASPGEN_OUT", cfg.out);
}

// ---- Run manifests ----

inline std::uint64_t hash_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw CliError(ExitCode::failure, "cannot hash " + p.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    h = ad::fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
    if (!is) break;
  }
  return h;
}

struct RunManifest {
  std::string command;
  std::uint64_t seed = 0;
  std::string dataset_hash = "none";     // 16 hex digits or "none"
  std::string checkpoint_hash = "none";  // architecture hash of a loaded checkpoint
  std::string config_text;
  std::vector<std::pair<std::string, std::string>> artifacts;  // rel path, 16-hex hash
};

inline void write_run_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  std::ofstream os(dir / "run_manifest.txt", std::ios::binary);
  if (!os) throw CliError(ExitCode::output, "cannot write " + (dir / "run_manifest.txt").string());
  os << "graspgen-run\nversion 1\n";
  os << "command " << m.command << "\n";
  os << "seed " << m.seed << "\n";
  os << "dataset_hash " << m.dataset_hash << "\n";
  os << "checkpoint_hash " << m.checkpoint_hash << "\n";
  os << "config_begin\n" << m.config_text << "config_end\n";
  for (const auto& [rel, hash] : m.artifacts) os << "artifact " << rel << " " << hash << "\n";
  if (!os) throw CliError(ExitCode::output, "write failed for run_manifest.txt");
}

inline RunManifest read_run_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "run_manifest.txt", std::ios::binary);
  if (!is)
    throw CliError(ExitCode::missing_input,
                   "cannot open " + (dir / "run_manifest.txt").string());
  std::string line;
  if (!std::getline(is, line) || line != "graspgen-run")
    throw CliError(ExitCode::missing_input, "bad run manifest header in " + dir.string());
  if (!std::getline(is, line) || line != "version 1")
    throw CliError(ExitCode::missing_input, "unsupported run manifest version in " + dir.string());
  RunManifest m;
  bool in_config = false;
  while (std::getline(is, line)) {
    if (in_config) {
      if (line == "config_end") {
        in_config = false;
      } else {
        m.config_text += line;
        m.config_text += "\n";
      }
      continue;
    }
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "command") ls >> m.command;
    else if (key == "seed") {
      std::string v;
      ls >> v;
      m.seed = detail::parse_u64(v, "manifest seed");
    } else if (key == "dataset_hash") ls >> m.dataset_hash;
    else if (key == "checkpoint_hash") ls >> m.checkpoint_hash;
    else if (key == "config_begin") in_config = true;
    else if (key == "artifact") {
      std::string rel, hash;
      ls >> rel >> hash;
      m.artifacts.emplace_back(rel, hash);
    } else if (!key.empty()) {
      throw CliError(ExitCode::missing_input, "unknown run manifest key '" + key + "'");
    }
  }
  return m;
}

// Refuses to clobber a previous run unless --overwrite was passed.
inline void prepare_out_dir(const RunConfig& cfg) {
  if (cfg.out.empty()) throw CliError(ExitCode::usage, "missing --out");
  const std::filesystem::path dir(cfg.out);
  std::error_code ec;
  if (std::filesystem::exists(dir / "run_manifest.txt") && !cfg.overwrite)
    throw CliError(ExitCode::output,
                   "output " + cfg.out + " already holds a run; pass --overwrite to replace it");
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir))
    throw CliError(ExitCode::output, "cannot create output directory " + cfg.out);
}

// ---- Frame shifts ----
//
// Records and exported grasps are posed in the mesh frame; networks operate
// in the frame of the re-centered view cloud. The two differ by the view's
// stored centroid.

inline Grasp to_cloud_frame(Grasp g, const Vec3& centroid) {
  g.translation -= centroid;
  return g;
}

inline Grasp to_mesh_frame(Grasp g, const Vec3& centroid) {
  g.translation += centroid;
  return g;
}

// ---- Inputs ----

inline dataset::LabeledGraspDataset load_dataset_checked(const std::string& path) {
  if (path.empty()) throw CliError(ExitCode::usage, "missing --data");
  try {
    return dataset::load(path);
  } catch (const std::exception& e) {
    throw CliError(ExitCode::missing_input, std::string("dataset ") + path + ": " + e.what());
  }
}

inline std::vector<TriMesh> load_objects_checked(const std::string& path) {
  if (path.empty()) throw CliError(ExitCode::usage, "missing --objects");
  const RunManifest m = read_run_manifest(path);
  std::vector<TriMesh> out;
  for (const auto& [rel, hash] : m.artifacts) {
    if (rel.size() < 4 || rel.substr(rel.size() - 4) != ".stl") continue;
    const std::filesystem::path p = std::filesystem::path(path) / rel;
    if (detail::hex64(hash_file(p)) != hash)
      throw CliError(ExitCode::missing_input, "object file " + rel + " does not match its hash");
    try {
      out.push_back(mesh::load_stl(p.string()));
    } catch (const std::exception& e) {
      throw CliError(ExitCode::missing_input, "object file " + rel + ": " + e.what());
    }
  }
  if (out.empty())
    throw CliError(ExitCode::missing_input, "no object meshes listed in " + path);
  return out;
}

// Loads a checkpoint and insists its architecture fingerprint matches the
// one the current configuration would produce.
inline ad::ParamStore load_checkpoint_checked(const std::string& dir,
                                              const std::string& expected_meta,
                                              std::string* hash_out = nullptr) {
  if (dir.empty()) throw CliError(ExitCode::usage, "missing --checkpoint");
  const std::string path = (std::filesystem::path(dir) / "checkpoint.bin").string();
  ad::Checkpoint ck;
  try {
    ck = ad::load_checkpoint(path);
  } catch (const std::exception& e) {
    throw CliError(ExitCode::missing_input, std::string("checkpoint: ") + e.what());
  }
  if (ck.meta != expected_meta)
    throw CliError(ExitCode::checkpoint_mismatch,
                   "checkpoint " + path + " was trained with a different architecture (" +
                       ck.meta + " vs " + expected_meta + ")");
  if (hash_out) *hash_out = detail::hex64(ck.config_hash);
  return std::move(ck.params);
}

// ---- Scored grasp table io (grasps.csv) ----

struct GraspRow {
  std::uint32_t view_id = 0;
  Grasp grasp;  // mesh frame
  double score = 0.0;
  bool has_score = false;
};

inline void write_grasp_table(std::ostream& os, const std::vector<GraspRow>& rows,
                              bool with_scores) {
  os << (with_scores ? "view_id,qw,qx,qy,qz,tx,ty,tz,score" : "view_id,qw,qx,qy,qz,tx,ty,tz")
     << "\n";
  for (const GraspRow& r : rows) {
    os << r.view_id << "," << geom::grasp_to_csv(r.grasp);
    if (with_scores) os << "," << detail::f64_text(r.score);
    os << "\n";
  }
}

inline std::vector<GraspRow> read_grasp_table(std::istream& is, bool* with_scores = nullptr) {
  std::string line;
  if (!std::getline(is, line))
    throw CliError(ExitCode::missing_input, "grasp table: empty file");
  bool scored = false;
  if (line == "view_id,qw,qx,qy,qz,tx,ty,tz,score") scored = true;
  else if (line != "view_id,qw,qx,qy,qz,tx,ty,tz")
    throw CliError(ExitCode::missing_input, "grasp table: unrecognized header");
  if (with_scores) *with_scores = scored;

  std::vector<GraspRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) fields.push_back(tok);
    if (fields.size() != (scored ? 9u : 8u))
      throw CliError(ExitCode::missing_input, "grasp table: wrong field count in row");
    GraspRow r;
    r.view_id = static_cast<std::uint32_t>(detail::parse_u64(fields[0], "grasp table view"));
    std::array<double, 7> v{};
    for (int i = 0; i < 7; ++i) {
      char* end = nullptr;
      v[i] = std::strtod(fields[1 + i].c_str(), &end);
      if (end == fields[1 + i].c_str() || *end != '\0')
        throw CliError(ExitCode::missing_input, "grasp table: malformed number in row");
    }
    r.grasp = geom::grasp_from_values(v);
    if (scored) {
      char* end = nullptr;
      r.score = std::strtod(fields[8].c_str(), &end);
      if (end == fields[8].c_str() || *end != '\0')
        throw CliError(ExitCode::missing_input, "grasp table: malformed score in row");
      r.has_score = true;
    }
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<GraspRow> read_grasp_table_checked(const std::string& dir,
                                                      bool require_scores) {
  if (dir.empty()) throw CliError(ExitCode::usage, "missing --grasps");
  const std::filesystem::path p = std::filesystem::path(dir) / "grasps.csv";
  std::ifstream is(p, std::ios::binary);
  if (!is) throw CliError(ExitCode::missing_input, "cannot open " + p.string());
  bool scored = false;
  auto rows = read_grasp_table(is, &scored);
  if (require_scores && !scored)
    throw CliError(ExitCode::missing_input,
                   p.string() + " has no score column; run refine first");
  return rows;
}

// ---- Training ----

struct ViewPools {
  size_t view = 0;
  std::vector<Grasp> positives_mesh;
  std::vector<Grasp> negatives_mesh;
  std::vector<Grasp> positives_cloud;
};

inline std::vector<ViewPools> collect_view_pools(const dataset::LabeledGraspDataset& d) {
  std::vector<ViewPools> pools(d.views.size());
  for (size_t v = 0; v < d.views.size(); ++v) pools[v].view = v;
  for (const dataset::GraspRecord& r : d.records) {
    ViewPools& p = pools[r.view_id];
    if (r.positive) {
      p.positives_mesh.push_back(r.grasp);
      p.positives_cloud.push_back(to_cloud_frame(r.grasp, d.views[r.view_id].centroid));
    } else {
      p.negatives_mesh.push_back(r.grasp);
    }
  }
  return pools;
}

struct TrainedSampler {
  sampler::SamplerConfig cfg;
  ad::ParamStore store;
  std::vector<sampler::VaeLossReport> log;
};

struct TrainedEvaluator {
  evaluator::EvaluatorConfig cfg;
  ad::ParamStore store;
  std::vector<evaluator::EvalLossReport> log;
};

inline TrainedSampler train_sampler_model(const dataset::LabeledGraspDataset& d,
                                          const RunConfig& rc, std::uint64_t seed,
                                          std::ostream* progress = nullptr) {
  TrainedSampler t;
  t.cfg = rc.sampler_config();
  std::vector<const ViewPools*> usable;
  const auto pools = collect_view_pools(d);
  for (const ViewPools& p : pools)
    if (!p.positives_cloud.empty()) usable.push_back(&p);
  if (usable.empty())
    throw CliError(ExitCode::failure, "train-sampler: dataset has no positive grasps");

  Rng rng(seed);
  sampler::add_sampler_params(t.store, t.cfg, rng);
  const std::vector<Vec3> cps = rc.gripper.control_points().points;
  for (int it = 0; it < rc.train_iters; ++it) {
    const ViewPools& p = *usable[it % usable.size()];
    const auto batch = sampler::stratified_batch(p.positives_cloud, rc.sampler_batch, rng);
    try {
      t.log.push_back(sampler::vae_training_step(t.store, t.cfg, d.views[p.view].cloud, batch,
                                                 rng, cps, rc.learning_rate));
    } catch (const std::exception& e) {
      throw CliError(ExitCode::failure, std::string("train-sampler: ") + e.what());
    }
    if (progress && (it % 50 == 0 || it + 1 == rc.train_iters))
      *progress << "train-sampler: iter " << it + 1 << "/" << rc.train_iters
                << " loss " << t.log.back().total << "\n";
  }
  return t;
}

inline TrainedEvaluator train_evaluator_model(const dataset::LabeledGraspDataset& d,
                                              const RunConfig& rc, std::uint64_t seed,
                                              std::ostream* progress = nullptr) {
  TrainedEvaluator t;
  t.cfg = rc.evaluator_config();
  const auto pools = collect_view_pools(d);
  std::vector<const ViewPools*> usable;
  for (const ViewPools& p : pools)
    if (!p.positives_mesh.empty() && !p.negatives_mesh.empty()) usable.push_back(&p);
  if (usable.empty())
    throw CliError(ExitCode::failure,
                   "train-evaluator: no view has both positive and negative grasps");

  Rng rng(seed);
  evaluator::add_evaluator_params(t.store, t.cfg, rng);
  for (int it = 0; it < rc.train_iters; ++it) {
    const ViewPools& p = *usable[it % usable.size()];
    const dataset::ViewEntry& view = d.views[p.view];
    try {
      auto batch = evaluator::compose_training_batch(
          p.positives_mesh, p.negatives_mesh, d.objects[view.object_id].mesh, rc.gripper,
          rc.evaluator_batch, rng);
      for (auto& e : batch) e.grasp = to_cloud_frame(e.grasp, view.centroid);
      t.log.push_back(evaluator::evaluator_training_step(t.store, t.cfg, view.cloud, batch,
                                                         rc.gripper, rc.learning_rate));
    } catch (const std::exception& e) {
      throw CliError(ExitCode::failure, std::string("train-evaluator: ") + e.what());
    }
    if (progress && (it % 50 == 0 || it + 1 == rc.train_iters))
      *progress << "train-evaluator: iter " << it + 1 << "/" << rc.train_iters
                << " loss " << t.log.back().loss << "\n";
  }
  return t;
}

// ---- Sampling and scoring ----

// Per-view child streams keep each view's draw independent of the others,
// so a smaller run is a bit-exact prefix of a larger one.
inline Rng view_rng(std::uint64_t seed, size_t view) {
  return Rng(seed).child(1000 + view);
}

inline std::vector<GraspRow> sample_rows(const dataset::LabeledGraspDataset& d,
                                         const sampler::SamplerConfig& cfg,
                                         ad::ParamStore& store, int n, std::uint64_t seed) {
  std::vector<GraspRow> rows;
  for (size_t v = 0; v < d.views.size(); ++v) {
    Rng rng = view_rng(seed, v);
    std::vector<Grasp> cloud_frame;
    try {
      cloud_frame = sampler::sample_grasps(store, cfg, d.views[v].cloud, n, rng);
    } catch (const std::exception& e) {
      throw CliError(ExitCode::failure, std::string("sample: ") + e.what());
    }
    for (const Grasp& g : cloud_frame) {
      GraspRow r;
      r.view_id = static_cast<std::uint32_t>(v);
      r.grasp = to_mesh_frame(g, d.views[v].centroid);
      rows.push_back(r);
    }
  }
  return rows;
}

// ---- Evaluation core shared by evaluate/ablate ----

struct ViewEvaluation {
  std::uint32_t view = 0;
  size_t n_predictions = 0;
  size_t n_gstar = 0;
  double success = 0.0;
  double coverage = 0.0;
  metrics::CurveArtifact artifact;
  metrics::SuccessCoverageCurve curve;
};

// Evaluates mesh-frame scored predictions of one view against its stored
// ground truth. Returns nothing when the view has no ground truth.
inline std::optional<ViewEvaluation> evaluate_view(const dataset::LabeledGraspDataset& d,
                                                   std::uint32_t view,
                                                   const std::vector<metrics::ScoredGrasp>& scored,
                                                   const GripperModel& gripper) {
  const auto gstar = metrics::gstar_for_view(d, view);
  if (gstar.empty() || scored.empty()) return std::nullopt;
  const TriMesh& m = d.objects[d.views[view].object_id].mesh;

  ViewEvaluation ev;
  ev.view = view;
  ev.n_predictions = scored.size();
  ev.n_gstar = gstar.size();
  ev.artifact = metrics::curve_artifact(scored, gstar, m, gripper);
  ev.curve = metrics::curve_from_artifact(ev.artifact);
  size_t pos = 0;
  for (const auto& t : ev.artifact.predictions)
    if (t.positive) ++pos;
  ev.success = static_cast<double>(pos) / static_cast<double>(scored.size());
  std::vector<Grasp> pred;
  pred.reserve(scored.size());
  for (const auto& s : scored) pred.push_back(s.grasp);
  ev.coverage = metrics::coverage_rate(pred, gstar);
  return ev;
}

// ---- Ablation harnesses ----

inline std::vector<std::vector<metrics::ScoredGrasp>> score_sampled_views(
    const dataset::LabeledGraspDataset& d, TrainedSampler& s, TrainedEvaluator& e, int n,
    std::uint64_t seed, const GripperModel& gripper) {
  std::vector<std::vector<metrics::ScoredGrasp>> per_view(d.views.size());
  for (size_t v = 0; v < d.views.size(); ++v) {
    Rng rng = view_rng(seed, v);
    const auto cloud_frame = sampler::sample_grasps(s.store, s.cfg, d.views[v].cloud, n, rng);
    per_view[v].reserve(cloud_frame.size());
    for (const Grasp& g : cloud_frame) {
      const double score = evaluator::score(e.store, e.cfg, d.views[v].cloud, g, gripper);
      per_view[v].push_back({to_mesh_frame(g, d.views[v].centroid), score});
    }
  }
  return per_view;
}

// Trains one sampler per latent dimensionality (seed + dim) against a shared
// evaluator (seed + 1000) and tabulates the mean curve AUC per dimension.
inline metrics::AblationTable ablation_latent_dims(const dataset::LabeledGraspDataset& d,
                                                   const RunConfig& rc,
                                                   const std::vector<int>& dims = {1, 2, 3, 4},
                                                   std::ostream* progress = nullptr) {
  metrics::AblationTable table;
  table.name = "latent_dims";
  TrainedEvaluator ev = train_evaluator_model(d, rc, rc.seed + 1000, progress);
  for (const int dim : dims) {
    RunConfig rd = rc;
    rd.latent_dim = dim;
    TrainedSampler s = train_sampler_model(d, rd, rc.seed + static_cast<std::uint64_t>(dim),
                                           progress);
    const auto per_view = score_sampled_views(d, s, ev, rc.sample_n, rc.seed, rc.gripper);
    double auc_sum = 0.0;
    size_t views = 0;
    metrics::AblationRow row;
    row.label = "latent_dim=" + std::to_string(dim);
    for (size_t v = 0; v < per_view.size(); ++v) {
      const auto evr = evaluate_view(d, static_cast<std::uint32_t>(v), per_view[v], rc.gripper);
      if (!evr) continue;
      auc_sum += evr->curve.auc;
      if (views == 0) row.curve = evr->curve;
      ++views;
    }
    if (views == 0)
      throw CliError(ExitCode::failure, "ablation_latent_dims: no view could be evaluated");
    row.auc = auc_sum / static_cast<double>(views);
    table.rows.push_back(std::move(row));
    if (progress) *progress << "ablate: latent_dim=" << dim << " auc " << table.rows.back().auc
                            << "\n";
  }
  return table;
}

struct RefinementAblation {
  metrics::AblationTable table;        // one row per iteration count 0..K
  std::vector<double> success_rates;   // pooled over views, index = iterations
};

// One refinement run per view provides every iteration count at once: the
// stored trace prefix after k steps is bitwise what a k-step run produces,
// because each ascent step depends only on the current pose and the nets.
inline RefinementAblation ablation_refinement(const dataset::LabeledGraspDataset& d,
                                              const RunConfig& rc, TrainedSampler& s,
                                              TrainedEvaluator& e,
                                              std::ostream* progress = nullptr) {
  const int iters = rc.refinement.iterations;
  RefinementAblation out;
  out.table.name = "refinement";

  struct PerIter {
    double auc_sum = 0.0;
    size_t views = 0;
    size_t positives = 0;
    size_t total = 0;
    std::optional<metrics::SuccessCoverageCurve> first_curve;
  };
  std::vector<PerIter> acc(static_cast<size_t>(iters) + 1);

  for (size_t v = 0; v < d.views.size(); ++v) {
    const auto gstar = metrics::gstar_for_view(d, static_cast<std::uint32_t>(v));
    if (gstar.empty()) continue;
    Rng rng = view_rng(rc.seed, v);
    const auto cloud_frame =
        sampler::sample_grasps(s.store, s.cfg, d.views[v].cloud, rc.sample_n, rng);
    refine::RefineParams params = rc.refinement;
    const auto result =
        refine::refine(e.store, e.cfg, d.views[v].cloud, cloud_frame, rc.gripper, params);
    const TriMesh& m = d.objects[d.views[v].object_id].mesh;

    for (int k = 0; k <= iters; ++k) {
      std::vector<metrics::ScoredGrasp> scored;
      scored.reserve(result.traces.size());
      for (const auto& trace : result.traces) {
        const auto& step = trace.steps[static_cast<size_t>(k)];
        scored.push_back({to_mesh_frame(step.grasp, d.views[v].centroid), step.score});
      }
      const auto evr = evaluate_view(d, static_cast<std::uint32_t>(v), scored, rc.gripper);
      if (!evr) continue;
      PerIter& a = acc[static_cast<size_t>(k)];
      a.auc_sum += evr->curve.auc;
      if (a.views == 0) a.first_curve = evr->curve;
      ++a.views;
      a.positives += static_cast<size_t>(evr->success * static_cast<double>(scored.size()) + 0.5);
      a.total += scored.size();
    }
    if (progress) *progress << "ablate: refinement view " << v << " done\n";
  }

  for (int k = 0; k <= iters; ++k) {
    const PerIter& a = acc[static_cast<size_t>(k)];
    if (a.views == 0)
      throw CliError(ExitCode::failure, "ablation_refinement: no view could be evaluated");
    metrics::AblationRow row;
    row.label = "iterations=" + std::to_string(k);
    row.auc = a.auc_sum / static_cast<double>(a.views);
    row.curve = *a.first_curve;
    out.table.rows.push_back(std::move(row));
    out.success_rates.push_back(static_cast<double>(a.positives) /
                                static_cast<double>(a.total));
  }
  return out;
}

struct SampleCountPoint {
  int count = 0;
  double coverage = 0.0;
};

// Nested subsets by construction: the first c draws of the largest run are
// exactly the c-sample run, so coverage is monotone in the count.
inline std::vector<SampleCountPoint> ablation_sample_count(
    const dataset::LabeledGraspDataset& d, const RunConfig& rc, TrainedSampler& s,
    std::vector<int> counts = {200, 400, 600, 800, 1000, 1200, 1400, 1600, 1800, 2000},
    std::ostream* progress = nullptr) {
  if (counts.empty()) throw CliError(ExitCode::usage, "ablation_sample_count: no counts");
  std::sort(counts.begin(), counts.end());
  if (counts.front() < 1) throw CliError(ExitCode::usage, "ablation_sample_count: counts >= 1");

  struct Acc {
    double sum = 0.0;
    size_t views = 0;
  };
  std::vector<Acc> acc(counts.size());
  for (size_t v = 0; v < d.views.size(); ++v) {
    const auto gstar = metrics::gstar_for_view(d, static_cast<std::uint32_t>(v));
    if (gstar.empty()) continue;
    Rng rng = view_rng(rc.seed, v);
    const auto cloud_frame =
        sampler::sample_grasps(s.store, s.cfg, d.views[v].cloud, counts.back(), rng);
    std::vector<Grasp> mesh_frame;
    mesh_frame.reserve(cloud_frame.size());
    for (const Grasp& g : cloud_frame)
      mesh_frame.push_back(to_mesh_frame(g, d.views[v].centroid));
    for (size_t i = 0; i < counts.size(); ++i) {
      const std::vector<Grasp> prefix(mesh_frame.begin(), mesh_frame.begin() + counts[i]);
      acc[i].sum += metrics::coverage_rate(prefix, gstar);
      ++acc[i].views;
    }
    if (progress) *progress << "ablate: sample-count view " << v << " done\n";
  }

  std::vector<SampleCountPoint> out;
  for (size_t i = 0; i < counts.size(); ++i) {
    if (acc[i].views == 0)
      throw CliError(ExitCode::failure, "ablation_sample_count: no view could be evaluated");
    out.push_back({counts[i], acc[i].sum / static_cast<double>(acc[i].views)});
  }
  return out;
}

// ---- Commands ----

namespace detail {

inline void write_text_artifact(const std::filesystem::path& dir, const std::string& rel,
                                const std::string& body, RunManifest& m) {
  const std::filesystem::path p = dir / rel;
  std::ofstream os(p, std::ios::binary);
  if (!os) throw CliError(ExitCode::output, "cannot write " + p.string());
  os << body;
  if (!os) throw CliError(ExitCode::output, "write failed for " + p.string());
  os.close();
  m.artifacts.emplace_back(rel, hex64(hash_file(p)));
}

}  // namespace detail

inline void cmd_gen_objects(const RunConfig& rc, std::ostream& err) {
  rc.require_valid();
  prepare_out_dir(rc);
  const std::filesystem::path dir(rc.out);
  RunManifest m;
  m.command = "gen-objects";
  m.seed = rc.seed;
  m.config_text = rc.dump();

  const Rng base(rc.seed);
  for (int i = 0; i < rc.objects; ++i) {
    const auto kind = static_cast<mesh::PrimitiveKind>(i % 3);
    Rng rng = base.child(static_cast<std::uint64_t>(i));
    const TriMesh obj = mesh::make_primitive(kind, rng);
    const std::string rel = detail::index_name("obj", static_cast<size_t>(i), ".stl");
    std::ostringstream body;
    mesh::write_stl(body, obj);
    detail::write_text_artifact(dir, rel, body.str(), m);
    err << "gen-objects: wrote " << rel << " (" << obj.triangles.size() << " triangles)\n";
  }
  write_run_manifest(dir, m);
}

inline void cmd_gen_data(const RunConfig& rc, std::ostream& err) {
  rc.require_valid();
  const auto meshes = load_objects_checked(rc.objects_dir);
  prepare_out_dir(rc);
  const std::filesystem::path dir(rc.out);

  dataset::LabeledGraspDataset d;
  Rng rng(rc.seed);
  for (size_t i = 0; i < meshes.size(); ++i) {
    dataset::ObjectEntry obj;
    obj.mesh = meshes[i];
    d.objects.push_back(std::move(obj));

    std::vector<Grasp> candidates;
    try {
      candidates = scene::sample_candidate_grasps(meshes[i], rc.grasps_per_object, rc.gripper,
                                                  rng);
    } catch (const std::exception& e) {
      throw CliError(ExitCode::failure, std::string("gen-data: ") + e.what());
    }
    std::vector<dataset::GraspRecord> object_records;
    size_t positives = 0;
    for (const Grasp& g : candidates) {
      dataset::GraspRecord r;
      r.object_id = static_cast<std::uint32_t>(i);
      r.grasp = g;
      r.positive = scene::oracle_report(meshes[i], g, rc.gripper).success;
      r.provenance = r.positive ? dataset::Provenance::simulated_positive
                                : dataset::Provenance::sampled_negative;
      if (r.positive) ++positives;
      object_records.push_back(r);
    }

    for (int v = 0; v < rc.views_per_object; ++v) {
      std::optional<scene::RenderResult> render;
      scene::CameraPose cam;
      for (int attempt = 0; attempt < 20 && !render; ++attempt) {
        cam = scene::sample_camera(rng);
        render = scene::render_partial_cloud(meshes[i], cam, rng, rc.render_resolution,
                                             rc.render_max_points, rc.render_noise_sigma);
      }
      if (!render)
        throw CliError(ExitCode::failure, "gen-data: rendering produced no hits for object " +
                                              std::to_string(i));
      dataset::ViewEntry view;
      view.object_id = static_cast<std::uint32_t>(i);
      view.camera = cam;
      view.cloud = render->cloud;
      view.centroid = render->centroid_world;
      const auto view_id = static_cast<std::uint32_t>(d.views.size());
      d.views.push_back(std::move(view));
      for (dataset::GraspRecord r : object_records) {
        r.view_id = view_id;
        d.records.push_back(r);
      }
    }
    err << "gen-data: object " << i + 1 << "/" << meshes.size() << ": " << positives << "/"
        << candidates.size() << " positive\n";
  }

  try {
    dataset::save(d, dir);
  } catch (const std::exception& e) {
    throw CliError(ExitCode::output, std::string("gen-data: ") + e.what());
  }

  RunManifest m;
  m.command = "gen-data";
  m.seed = rc.seed;
  m.dataset_hash = detail::hex64(dataset::content_hash(dir));
  m.config_text = rc.dump();
  m.artifacts.emplace_back("manifest.txt", detail::hex64(hash_file(dir / "manifest.txt")));
  m.artifacts.emplace_back("grasps.bin", detail::hex64(hash_file(dir / "grasps.bin")));
  write_run_manifest(dir, m);
}

inline void cmd_train_sampler(const RunConfig& rc, std::ostream& err) {
  rc.require_valid();
  const auto d = load_dataset_checked(rc.data);
  prepare_out_dir(rc);
  const std::filesystem::path dir(rc.out);

  const TrainedSampler t = train_sampler_model(d, rc, rc.seed, &err);
  ad::save_checkpoint((dir / "checkpoint.bin").string(), t.store, t.cfg.describe());

  std::ostringstream log;
  log << "iter,reconstruction,kl,total\n";
  for (size_t i = 0; i < t.log.size(); ++i)
    log << i << "," << detail::f64_text(t.log[i].reconstruction) << ","
        << detail::f64_text(t.log[i].kl) << "," << detail::f64_text(t.log[i].total) << "\n";

  RunManifest m;
  m.command = "train-sampler";
  m.seed = rc.seed;
  m.dataset_hash = detail::hex64(dataset::content_hash(rc.data));
  m.config_text = rc.dump();
  m.artifacts.emplace_back("checkpoint.bin", detail::hex64(hash_file(dir / "checkpoint.bin")));
  detail::write_text_artifact(dir, "training_log.csv", log.str(), m);
  write_run_manifest(dir, m);
}

inline void cmd_train_evaluator(const RunConfig& rc, std::ostream& err) {
  rc.require_valid();
  const auto d = load_dataset_checked(rc.data);
  prepare_out_dir(rc);
  const std::filesystem::path dir(rc.out);

  const TrainedEvaluator t = train_evaluator_model(d, rc, rc.seed, &err);
  ad::save_checkpoint((dir / "checkpoint.bin").string(), t.store, t.cfg.describe());

  std::ostringstream log;
  log << "iter,loss,mean_positive_score,mean_negative_score\n";
  for (size_t i = 0; i < t.log.size(); ++i)
    log << i << "," << detail::f64_text(t.log[i].loss) << ","
        << detail::f64_text(t.log[i].mean_positive_score) << ","
        << detail::f64_text(t.log[i].mean_negative_score) << "\n";

  RunManifest m;
  m.command = "train-evaluator";
  m.seed = rc.seed;
  m.dataset_hash = detail::hex64(dataset::content_hash(rc.data));
  m.config_text = rc.dump();
  m.artifacts.emplace_back("checkpoint.bin", detail::hex64(hash_file(dir / "checkpoint.bin")));
  detail::write_text_artifact(dir, "training_log.csv", log.str(), m);
  write_run_manifest(dir, m);
}

inline void cmd_sample(const RunConfig& rc, std::ostream& err) {
  rc.require_valid();
  const auto d = load_dataset_checked(rc.data);
  const sampler::SamplerConfig cfg = rc.sampler_config();
  std::string ck_hash;
  ad::ParamStore store = load_checkpoint_checked(rc.checkpoint, cfg.describe(), &ck_hash);
  prepare_out_dir(rc);
  const std::filesystem::path dir(rc.out);

  const auto rows = sample_rows(d, cfg, store, rc.sample_n, rc.seed);
  err << "sample: " << rows.size() << " grasps across " << d.views.size() << " views\n";

  std::ostringstream table;
  write_grasp_table(table, rows, /*with_scores=*/false);

  RunManifest m;
  m.command = "sample";
  m.seed = rc.seed;
  m.dataset_hash = detail::hex64(dataset::content_hash(rc.data));
  m.checkpoint_hash = ck_hash;
  m.config_text = rc.dump();
  detail::write_text_artifact(dir, "grasps.csv", table.str(), m);
  write_run_manifest(dir, m);
}

inline void cmd_refine(const RunConfig& rc, std::ostream& err) {
  rc.require_valid();
  const auto d = load_dataset_checked(rc.data);
  const auto rows = read_grasp_table_checked(rc.grasps, /*require_scores=*/false);
  const evaluator::EvaluatorConfig cfg = rc.evaluator_config();
  std::string ck_hash;
  ad::ParamStore store = load_checkpoint_checked(rc.checkpoint, cfg.describe(), &ck_hash);
  prepare_out_dir(rc);
  const std::filesystem::path dir(rc.out);

  for (const GraspRow& r : rows)
    if (r.view_id >= d.views.size())
      throw CliError(ExitCode::missing_input,
                     "refine: grasp table references unknown view " + std::to_string(r.view_id));

  RunManifest m;
  m.command = "refine";
  m.seed = rc.seed;
  m.dataset_hash = detail::hex64(dataset::content_hash(rc.data));
  m.checkpoint_hash = ck_hash;
  m.config_text = rc.dump();

  std::vector<GraspRow> kept_rows;
  for (size_t v = 0; v < d.views.size(); ++v) {
    std::vector<Grasp> cloud_frame;
    for (const GraspRow& r : rows)
      if (r.view_id == v) cloud_frame.push_back(to_cloud_frame(r.grasp, d.views[v].centroid));
    if (cloud_frame.empty()) continue;
    refine::RefineResult result;
    try {
      result = refine::refine(store, cfg, d.views[v].cloud, cloud_frame, rc.gripper,
                              rc.refinement);
    } catch (const std::exception& e) {
      throw CliError(ExitCode::failure, std::string("refine: ") + e.what());
    }
    for (const auto& s : result.kept) {
      GraspRow r;
      r.view_id = static_cast<std::uint32_t>(v);
      r.grasp = to_mesh_frame(s.grasp, d.views[v].centroid);
      r.score = s.score;
      r.has_score = true;
      kept_rows.push_back(r);
    }
    // Traces are exported in the mesh frame like every other grasp table.
    std::vector<refine::RefinementTrace> mesh_traces = result.traces;
    for (auto& trace : mesh_traces)
      for (auto& step : trace.steps) step.grasp = to_mesh_frame(step.grasp, d.views[v].centroid);
    std::ostringstream traces;
    refine::write_trace_csv(traces, mesh_traces);
    detail::write_text_artifact(dir, detail::index_name("traces_view", v, ".csv"), traces.str(),
                                m);
    err << "refine: view " << v << " kept " << result.kept.size() << "/" << cloud_frame.size()
        << "\n";
  }

  std::ostringstream table;
  write_grasp_table(table, kept_rows, /*with_scores=*/true);
  detail::write_text_artifact(dir, "grasps.csv", table.str(), m);
  write_run_manifest(dir, m);
}

inline void cmd_evaluate(const RunConfig& rc, std::ostream& err) {
  rc.require_valid();
  const auto d = load_dataset_checked(rc.data);
  const auto rows = read_grasp_table_checked(rc.grasps, /*require_scores=*/true);
  prepare_out_dir(rc);
  const std::filesystem::path dir(rc.out);

  RunManifest m;
  m.command = "evaluate";
  m.seed = rc.seed;
  m.dataset_hash = detail::hex64(dataset::content_hash(rc.data));
  m.config_text = rc.dump();

  std::ostringstream summary;
  summary << "view,n_predictions,n_gstar,success,coverage,auc\n";
  size_t evaluated = 0;
  for (size_t v = 0; v < d.views.size(); ++v) {
    std::vector<metrics::ScoredGrasp> scored;
    for (const GraspRow& r : rows)
      if (r.view_id == v) scored.push_back({r.grasp, r.score});
    const auto evr = evaluate_view(d, static_cast<std::uint32_t>(v), scored, rc.gripper);
    if (!evr) {
      if (!scored.empty())
        err << "evaluate: view " << v << " skipped (no stored ground-truth positives)\n";
      continue;
    }
    ++evaluated;
    summary << v << "," << evr->n_predictions << "," << evr->n_gstar << ","
            << detail::f64_text(evr->success) << "," << detail::f64_text(evr->coverage) << ","
            << detail::f64_text(evr->curve.auc) << "\n";

    std::ostringstream artifact, curve_csv, curve_svg;
    metrics::write_artifact_csv(artifact, evr->artifact);
    metrics::write_curve_csv(curve_csv, evr->curve);
    metrics::write_curve_svg(curve_svg, evr->curve, "success-coverage view " + std::to_string(v));
    detail::write_text_artifact(dir, detail::index_name("artifact_view", v, ".csv"),
                                artifact.str(), m);
    detail::write_text_artifact(dir, detail::index_name("curve_view", v, ".csv"),
                                curve_csv.str(), m);
    detail::write_text_artifact(dir, detail::index_name("curve_view", v, ".svg"),
                                curve_svg.str(), m);
    err << "evaluate: view " << v << " success " << evr->success << " coverage "
        << evr->coverage << " auc " << evr->curve.auc << "\n";
  }
  if (evaluated == 0)
    throw CliError(ExitCode::failure, "evaluate: no view had both predictions and ground truth");

  detail::write_text_artifact(dir, "metrics.csv", summary.str(), m);
  write_run_manifest(dir, m);
}

inline void cmd_ablate(const RunConfig& rc, std::ostream& err) {
  rc.require_valid();
  const auto d = load_dataset_checked(rc.data);
  prepare_out_dir(rc);
  const std::filesystem::path dir(rc.out);

  RunManifest m;
  m.command = "ablate";
  m.seed = rc.seed;
  m.dataset_hash = detail::hex64(dataset::content_hash(rc.data));
  m.config_text = rc.dump();

  // Latent dimensionality sweep.
  const auto latent = ablation_latent_dims(d, rc, {1, 2, 3, 4}, &err);
  {
    std::ostringstream csv;
    metrics::write_ablation_csv(csv, latent);
    detail::write_text_artifact(dir, "ablation_latent.csv", csv.str(), m);
    for (const auto& row : latent.rows) {
      std::ostringstream svg;
      metrics::write_curve_svg(svg, row.curve, row.label);
      detail::write_text_artifact(dir, "ablation_" + row.label + ".svg", svg.str(), m);
    }
    size_t least = 0;
    for (size_t i = 1; i < latent.rows.size(); ++i)
      if (latent.rows[i].auc < latent.rows[least].auc) least = i;
    std::ostringstream notes;
    notes << "least_auc " << latent.rows[least].label << "\n";
    detail::write_text_artifact(dir, "notes.txt", notes.str(), m);
  }

  // Shared models for the refinement and sample-count sweeps.
  TrainedSampler s = train_sampler_model(d, rc, rc.seed, &err);
  TrainedEvaluator e = train_evaluator_model(d, rc, rc.seed + 1000, &err);

  const auto refinement = ablation_refinement(d, rc, s, e, &err);
  {
    std::ostringstream csv;
    csv << "iterations,success,auc\n";
    for (size_t k = 0; k < refinement.table.rows.size(); ++k)
      csv << k << "," << detail::f64_text(refinement.success_rates[k]) << ","
          << detail::f64_text(refinement.table.rows[k].auc) << "\n";
    detail::write_text_artifact(dir, "ablation_refine.csv", csv.str(), m);
  }

  const auto counts = ablation_sample_count(d, rc, s, {200, 400, 600, 800, 1000, 1200, 1400,
                                                       1600, 1800, 2000},
                                            &err);
  {
    std::ostringstream csv;
    csv << "samples,coverage\n";
    for (const auto& p : counts)
      csv << p.count << "," << detail::f64_text(p.coverage) << "\n";
    detail::write_text_artifact(dir, "ablation_samples.csv", csv.str(), m);
  }

  write_run_manifest(dir, m);
}

// Rebuilds curves from the artifacts of an evaluate run and cross-checks the
// stored AUC table, bundling everything into a fresh report directory.
inline void cmd_report(const RunConfig& rc, std::ostream& err) {
  rc.require_valid();
  if (rc.grasps.empty())
    throw CliError(ExitCode::usage, "missing --grasps (an evaluate output directory)");
  const std::filesystem::path src(rc.grasps);
  const RunManifest in = read_run_manifest(src);
  if (in.command != "evaluate")
    throw CliError(ExitCode::missing_input,
                   "report: " + rc.grasps + " is a '" + in.command +
                       "' run, expected an evaluate output");
  prepare_out_dir(rc);
  const std::filesystem::path dir(rc.out);

  // Stored per-view AUCs from metrics.csv.
  std::map<std::string, double> stored_auc;
  {
    std::ifstream is(src / "metrics.csv", std::ios::binary);
    if (!is) throw CliError(ExitCode::missing_input, "report: cannot open metrics.csv");
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto first = line.find(',');
      const auto last = line.rfind(',');
      if (first == std::string::npos || last == first)
        throw CliError(ExitCode::missing_input, "report: malformed metrics.csv row");
      stored_auc[line.substr(0, first)] =
          metrics::detail::parse_f64(line.substr(last + 1), "metrics auc");
    }
  }

  RunManifest m;
  m.command = "report";
  m.seed = rc.seed;
  m.dataset_hash = in.dataset_hash;
  m.config_text = rc.dump();

  std::ostringstream summary;
  summary << "view,auc\n";
  size_t replayed = 0;
  for (const auto& [rel, hash] : in.artifacts) {
    if (rel.rfind("artifact_view", 0) != 0) continue;
    std::ifstream is(src / rel, std::ios::binary);
    if (!is) throw CliError(ExitCode::missing_input, "report: cannot open " + rel);
    metrics::CurveArtifact artifact;
    try {
      artifact = metrics::read_artifact_csv(is);
    } catch (const std::exception& e) {
      throw CliError(ExitCode::missing_input, std::string("report: ") + rel + ": " + e.what());
    }
    const auto curve = metrics::curve_from_artifact(artifact);
    const std::string view = rel.substr(std::strlen("artifact_view"), 4);
    const std::string view_key = std::to_string(std::strtol(view.c_str(), nullptr, 10));
    const auto it = stored_auc.find(view_key);
    if (it == stored_auc.end())
      throw CliError(ExitCode::failure, "report: view " + view_key + " missing from metrics.csv");
    if (curve.auc != it->second)
      throw CliError(ExitCode::failure,
                     "report: replayed auc disagrees with metrics.csv for view " + view_key);
    summary << view_key << "," << detail::f64_text(curve.auc) << "\n";

    std::ostringstream curve_csv, curve_svg;
    metrics::write_curve_csv(curve_csv, curve);
    metrics::write_curve_svg(curve_svg, curve, "replayed view " + view_key);
    detail::write_text_artifact(dir, "replayed_curve_view" + view + ".csv", curve_csv.str(), m);
    detail::write_text_artifact(dir, "replayed_curve_view" + view + ".svg", curve_svg.str(), m);
    ++replayed;
  }
  if (replayed == 0)
    throw CliError(ExitCode::missing_input, "report: no curve artifacts found in " + rc.grasps);

  detail::write_text_artifact(dir, "summary.csv", summary.str(), m);
  detail::write_text_artifact(dir, "resolved_config.txt", in.config_text, m);
  write_run_manifest(dir, m);
  err << "report: replayed " << replayed << " curve(s), all consistent\n";
}

// ---- Command-line front end ----

inline const char* usage_text() {
  return
      "usage: graspgen <command> [flags]\n"
      "\n"
      "commands:\n"
      "  gen-objects      write procedural object meshes      (--out, --objects N)\n"
      "  gen-data         render views and label grasps       (--out, --objects DIR)\n"
      "  train-sampler    train the variational grasp sampler (--out, --data)\n"
      "  train-evaluator  train the grasp success classifier  (--out, --data)\n"
      "  sample           draw grasps from a trained sampler  (--out, --data, --checkpoint)\n"
      "  refine           gradient-ascend sampled grasps      (--out, --data, --grasps,\n"
      "                                                        --checkpoint)\n"
      "  evaluate         score a grasp table against ground  (--out, --data, --grasps)\n"
      "                   truth\n"
      "  ablate           run the latent/refinement/sample    (--out, --data)\n"
      "                   sweeps\n"
      "  report           replay and bundle an evaluate run   (--out, --grasps)\n"
      "\n"
      "flags:\n"
      "  --config FILE         key-value config; flags override it\n"
      "  --seed N              RNG seed (default 0)\n"
      "  --out DIR             output directory (required by every command)\n"
      "  --objects N|DIR       object count (gen-objects) or objects dir (gen-data)\n"
      "  --grasps-per-object N labeled candidates per object (gen-data)\n"
      "  --latent-dim N        sampler latent dimensionality (1..4)\n"
      "  --iters N             training iterations (train-*, ablate) or refinement\n"
      "                        iterations (refine)\n"
      "  --n N                 grasps to draw per view (sample, ablate)\n"
      "  --threshold X         refinement keep threshold\n"
      "  --width-scale X       backbone width multiplier in (0, 1]\n"
      "  --data DIR            labeled dataset directory\n"
      "  --checkpoint DIR      trained model directory\n"
      "  --grasps DIR          grasp table directory\n"
      "  --overwrite           replace an existing run in --out\n"
      "\n"
      "environment: GRASPGEN_DATA, GRASPGEN_OBJECTS, GRASPGEN_CHECKPOINT,\n"
      "GRASPGEN_GRASPS, GRASPGEN_OUT override config-file paths; flags win.\n";
}

namespace detail {

struct FlagSpec {
  bool takes_value = true;
};

inline const std::map<std::string, FlagSpec>& flag_table() {
  static const std::map<std::string, FlagSpec> table = {
      {"--config", {true}},       {"--seed", {true}},
      {"--out", {true}},          {"--objects", {true}},
      {"--grasps-per-object", {true}}, {"--latent-dim", {true}},
      {"--iters", {true}},        {"--n", {true}},
      {"--threshold", {true}},    {"--width-scale", {true}},
      {"--data", {true}},         {"--checkpoint", {true}},
      {"--grasps", {true}},       {"--overwrite", {false}},
  };
  return table;
}

inline const std::map<std::string, std::vector<std::string>>& command_flags() {
  static const std::map<std::string, std::vector<std::string>> table = {
      {"gen-objects", {"--config", "--seed", "--out", "--objects", "--overwrite"}},
      {"gen-data",
       {"--config", "--seed", "--out", "--objects", "--grasps-per-object", "--overwrite"}},
      {"train-sampler",
       {"--config", "--seed", "--out", "--data", "--iters", "--latent-dim", "--width-scale",
        "--overwrite"}},
      {"train-evaluator",
       {"--config", "--seed", "--out", "--data", "--iters", "--width-scale", "--overwrite"}},
      {"sample",
       {"--config", "--seed", "--out", "--data", "--checkpoint", "--n", "--latent-dim",
        "--width-scale", "--overwrite"}},
      {"refine",
       {"--config", "--seed", "--out", "--data", "--grasps", "--checkpoint", "--iters",
        "--threshold", "--width-scale", "--overwrite"}},
      {"evaluate", {"--config", "--seed", "--out", "--data", "--grasps", "--overwrite"}},
      {"ablate",
       {"--config", "--seed", "--out", "--data", "--iters", "--n", "--latent-dim",
        "--width-scale", "--overwrite"}},
      {"report", {"--config", "--seed", "--out", "--grasps", "--overwrite"}},
  };
  return table;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  try {
    if (argc < 2) {
      err << usage_text();
      return static_cast<int>(ExitCode::usage);
    }
    const std::string command = argv[1];
    if (command == "--help" || command == "-h" || command == "help") {
      out << usage_text();
      return 0;
    }
    const auto& commands = detail::command_flags();
    const auto cmd_it = commands.find(command);
    if (cmd_it == commands.end())
      throw CliError(ExitCode::usage, "unknown command '" + command + "'");

    // First pass: collect flag/value pairs, validating names.
    std::vector<std::pair<std::string, std::string>> flags;
    for (int i = 2; i < argc; ++i) {
      const std::string flag = argv[i];
      if (flag == "--help" || flag == "-h") {
        out << usage_text();
        return 0;
      }
      const auto spec = detail::flag_table().find(flag);
      if (spec == detail::flag_table().end())
        throw CliError(ExitCode::usage, "unknown flag '" + flag + "'");
      if (std::find(cmd_it->second.begin(), cmd_it->second.end(), flag) == cmd_it->second.end())
        throw CliError(ExitCode::usage, "flag " + flag + " does not apply to " + command);
      std::string value;
      if (spec->second.takes_value) {
        if (i + 1 >= argc) throw CliError(ExitCode::usage, "flag " + flag + " needs a value");
        value = argv[++i];
      }
      flags.emplace_back(flag, value);
    }

    // Defaults, then config file, then environment paths, then flags.
    RunConfig cfg;
    for (const auto& [flag, value] : flags)
      if (flag == "--config") cfg = parse_config_file(value, cfg);
    apply_env_paths(cfg);
    for (const auto& [flag, value] : flags) {
      if (flag == "--config") continue;
      if (flag == "--seed") cfg.seed = detail::parse_u64(value, "--seed");
      else if (flag == "--out") cfg.out = value;
      else if (flag == "--objects") {
        if (command == "gen-objects") cfg.objects = detail::parse_int(value, "--objects");
        else cfg.objects_dir = value;
      } else if (flag == "--grasps-per-object")
        cfg.grasps_per_object = detail::parse_int(value, "--grasps-per-object");
      else if (flag == "--latent-dim") cfg.latent_dim = detail::parse_int(value, "--latent-dim");
      else if (flag == "--iters") {
        const int v = detail::parse_int(value, "--iters");
        if (command == "refine") cfg.refinement.iterations = v;
        else cfg.train_iters = v;
      } else if (flag == "--n") cfg.sample_n = detail::parse_int(value, "--n");
      else if (flag == "--threshold")
        cfg.refinement.keep_threshold = detail::parse_double(value, "--threshold");
      else if (flag == "--width-scale")
        cfg.backbone.width_scale = detail::parse_double(value, "--width-scale");
      else if (flag == "--data") cfg.data = value;
      else if (flag == "--checkpoint") cfg.checkpoint = value;
      else if (flag == "--grasps") cfg.grasps = value;
      else if (flag == "--overwrite") cfg.overwrite = true;
    }

    if (command == "gen-objects") cmd_gen_objects(cfg, err);
    else if (command == "gen-data") cmd_gen_data(cfg, err);
    else if (command == "train-sampler") cmd_train_sampler(cfg, err);
    else if (command == "train-evaluator") cmd_train_evaluator(cfg, err);
    else if (command == "sample") cmd_sample(cfg, err);
    else if (command == "refine") cmd_refine(cfg, err);
    else if (command == "evaluate") cmd_evaluate(cfg, err);
    else if (command == "ablate") cmd_ablate(cfg, err);
    else if (command == "report") cmd_report(cfg, err);
    return 0;
  } catch (const CliError& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return static_cast<int>(ExitCode::failure);
  }
}

}  // namespace graspgen::pipeline
