#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "graspgen/cloud.hpp"
#include "graspgen/evaluator.hpp"
#include "graspgen/geom.hpp"
#include "graspgen/mesh.hpp"
#include "graspgen/scene.hpp"

namespace graspgen::dataset {

using cloud::PointFeatureCloud;
using evaluator::Provenance;
using geom::Grasp;
using geom::Quat;
using geom::Vec3;
using mesh::TriMesh;

// One labeled grasp, posed in the frame of its object's mesh (centroid at the
// origin). View-frame consumers shift by the view's stored centroid.
struct GraspRecord {
  std::uint32_t object_id = 0;
  std::uint32_t view_id = 0;
  Grasp grasp;
  bool positive = false;
  Provenance provenance = Provenance::sampled_negative;
};

struct ObjectEntry {
  TriMesh mesh;
  double scale = 1.0;
  std::string mesh_path;  // relative to the dataset directory; set by save/load
};

struct ViewEntry {
  std::uint32_t object_id = 0;
  scene::CameraPose camera;
  PointFeatureCloud cloud;  // re-centered partial cloud
  Vec3 centroid;            // world offset removed when the cloud was centered
  std::string cloud_path;   // relative to the dataset directory; set by save/load
};

struct LabeledGraspDataset {
  std::vector<ObjectEntry> objects;
  std::vector<ViewEntry> views;
  std::vector<GraspRecord> records;

  void require_valid() const {
    for (const ObjectEntry& o : objects) {
      if (!(o.scale > 0.0)) throw std::invalid_argument("dataset: object scale must be positive");
      if (o.mesh.triangles.empty())
        throw std::invalid_argument("dataset: object mesh has no triangles");
    }
    for (const ViewEntry& v : views) {
      if (v.object_id >= objects.size())
        throw std::invalid_argument("dataset: view references unknown object");
      if (v.cloud.feature_dim < 0)
        throw std::invalid_argument("dataset: negative cloud feature dim");
    }
    for (const GraspRecord& r : records) {
      if (r.object_id >= objects.size())
        throw std::invalid_argument("dataset: record references unknown object");
      if (r.view_id >= views.size())
        throw std::invalid_argument("dataset: record references unknown view");
      if (static_cast<std::uint8_t>(r.provenance) > 3)
        throw std::invalid_argument("dataset: record provenance out of range");
      r.grasp.require_valid();
    }
  }
};

namespace detail {

constexpr char kMagic[8] = {'G', 'R', 'A', 'S', 'P', 'S', 'E', 'T'};
constexpr std::uint32_t kVersion = 1;

inline void put_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(os, b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(os, b, 8);
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void get_bytes(std::istream& is, void* p, size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw std::runtime_error(std::string("dataset: truncated ") + what);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  get_bytes(is, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is, const char* what) {
  unsigned char b[8];
  get_bytes(is, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is, const char* what) {
  return std::bit_cast<double>(get_u64(is, what));
}

inline std::string f64_text(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double parse_f64(const std::string& tok, const char* what) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0')
    throw std::runtime_error(std::string("dataset: malformed number in ") + what);
  return v;
}

inline std::string index_name(const char* stem, size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%04zu%s", stem, i, ext);
  return buf;
}

}  // namespace detail

// Meshes persist via mesh::write_stl / mesh::read_stl (ASCII triangle soup:
// write(read(x)) reproduces x byte for byte, and every downstream geometry
// routine works per-triangle, so soup indexing changes nothing).

// ---- Cloud persistence (little-endian binary point list) ----

inline void write_cloud(std::ostream& os, const PointFeatureCloud& x) {
  detail::put_u32(os, static_cast<std::uint32_t>(x.coordinates.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(x.feature_dim));
  for (const Vec3& p : x.coordinates) {
    detail::put_f64(os, p.x);
    detail::put_f64(os, p.y);
    detail::put_f64(os, p.z);
  }
  for (double f : x.features) detail::put_f64(os, f);
}

inline PointFeatureCloud read_cloud(std::istream& is) {
  PointFeatureCloud x;
  const std::uint32_t n = detail::get_u32(is, "cloud header");
  const std::uint32_t fd = detail::get_u32(is, "cloud header");
  if (fd > 1024) throw std::runtime_error("dataset: implausible cloud feature dim");
  x.feature_dim = static_cast<int>(fd);
  x.coordinates.resize(n);
  for (Vec3& p : x.coordinates) {
    p.x = detail::get_f64(is, "cloud points");
    p.y = detail::get_f64(is, "cloud points");
    p.z = detail::get_f64(is, "cloud points");
  }
  x.features.resize(static_cast<size_t>(n) * fd);
  for (double& f : x.features) f = detail::get_f64(is, "cloud features");
  return x;
}

// ---- Grasp record persistence (magic + version + fixed-width records) ----

inline void write_grasps(std::ostream& os, const std::vector<GraspRecord>& records) {
  detail::put_bytes(os, detail::kMagic, sizeof(detail::kMagic));
  detail::put_u32(os, detail::kVersion);
  detail::put_u64(os, records.size());
  for (const GraspRecord& r : records) {
    detail::put_u32(os, r.object_id);
    detail::put_u32(os, r.view_id);
    const auto v = geom::grasp_to_values(r.grasp);
    for (double d : v) detail::put_f64(os, d);
    const unsigned char label = r.positive ? 1 : 0;
    const unsigned char prov = static_cast<unsigned char>(r.provenance);
    detail::put_bytes(os, &label, 1);
    detail::put_bytes(os, &prov, 1);
  }
}

inline std::vector<GraspRecord> read_grasps(std::istream& is) {
  char magic[8];
  detail::get_bytes(is, magic, 8, "grasp file magic");
  if (std::memcmp(magic, detail::kMagic, 8) != 0)
    throw std::runtime_error("dataset: bad grasp file magic");
  const std::uint32_t version = detail::get_u32(is, "grasp file version");
  if (version != detail::kVersion)
    throw std::runtime_error("dataset: unsupported grasp file version " +
                             std::to_string(version));
  const std::uint64_t count = detail::get_u64(is, "grasp record count");
  std::vector<GraspRecord> records;
  records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    GraspRecord r;
    r.object_id = detail::get_u32(is, "grasp record");
    r.view_id = detail::get_u32(is, "grasp record");
    std::array<double, 7> v{};
    for (double& d : v) d = detail::get_f64(is, "grasp record");
    r.grasp = geom::grasp_from_values(v);
    unsigned char label = 0, prov = 0;
    detail::get_bytes(is, &label, 1, "grasp record");
    detail::get_bytes(is, &prov, 1, "grasp record");
    if (label > 1) throw std::runtime_error("dataset: corrupt grasp label byte");
    if (prov > 3) throw std::runtime_error("dataset: corrupt grasp provenance byte");
    r.positive = label == 1;
    r.provenance = static_cast<Provenance>(prov);
    records.push_back(r);
  }
  char extra;
  if (is.read(&extra, 1) && is.gcount() == 1)
    throw std::runtime_error("dataset: trailing bytes after grasp records");
  return records;
}

// ---- Whole-dataset directory layout ----
//
//   manifest.txt     text key-value index of everything below
//   meshes/objNNNN.stl
//   clouds/viewNNNN.bin
//   grasps.bin

inline void save(const LabeledGraspDataset& d, const std::filesystem::path& dir) {
  d.require_valid();
  namespace fs = std::filesystem;
  fs::create_directories(dir / "meshes");
  fs::create_directories(dir / "clouds");

  std::ostringstream manifest;
  manifest << "graspgen-dataset\nversion " << detail::kVersion << "\n";
  manifest << "objects " << d.objects.size() << "\n";
  manifest << "views " << d.views.size() << "\n";
  manifest << "records " << d.records.size() << "\n";

  for (size_t i = 0; i < d.objects.size(); ++i) {
    const std::string rel = "meshes/" + detail::index_name("obj", i, ".stl");
    std::ofstream os(dir / rel, std::ios::binary);
    if (!os) throw std::runtime_error("dataset: cannot write " + rel);
    mesh::write_stl(os, d.objects[i].mesh);
    manifest << "object " << i << " scale " << detail::f64_text(d.objects[i].scale) << " mesh "
             << rel << "\n";
  }
  for (size_t i = 0; i < d.views.size(); ++i) {
    const std::string rel = "clouds/" + detail::index_name("view", i, ".bin");
    std::ofstream os(dir / rel, std::ios::binary);
    if (!os) throw std::runtime_error("dataset: cannot write " + rel);
    write_cloud(os, d.views[i].cloud);
    const ViewEntry& v = d.views[i];
    manifest << "view " << i << " object " << v.object_id << " cloud " << rel << " centroid "
             << detail::f64_text(v.centroid.x) << " " << detail::f64_text(v.centroid.y) << " "
             << detail::f64_text(v.centroid.z) << " camera " << detail::f64_text(v.camera.position.x)
             << " " << detail::f64_text(v.camera.position.y) << " "
             << detail::f64_text(v.camera.position.z) << " " << detail::f64_text(v.camera.rotation.w)
             << " " << detail::f64_text(v.camera.rotation.x) << " "
             << detail::f64_text(v.camera.rotation.y) << " " << detail::f64_text(v.camera.rotation.z)
             << "\n";
  }
  manifest << "grasps grasps.bin\n";

  {
    std::ofstream os(dir / "grasps.bin", std::ios::binary);
    if (!os) throw std::runtime_error("dataset: cannot write grasps.bin");
    write_grasps(os, d.records);
  }
  {
    std::ofstream os(dir / "manifest.txt", std::ios::binary);
    if (!os) throw std::runtime_error("dataset: cannot write manifest.txt");
    os << manifest.str();
  }
}

// Spot-checks stored labels against the analytic oracle (evenly strided
// sample, deterministic). Records are posed in the mesh frame, so the check
// needs no view bookkeeping.
inline void audit_labels(const LabeledGraspDataset& d, const scene::GripperModel& gripper,
                         int samples = 32) {
  if (d.records.empty() || samples <= 0) return;
  const size_t stride =
      std::max<size_t>(1, d.records.size() / static_cast<size_t>(samples));
  for (size_t i = 0; i < d.records.size(); i += stride) {
    const GraspRecord& r = d.records[i];
    const bool oracle =
        scene::oracle_report(d.objects[r.object_id].mesh, r.grasp, gripper).success;
    if (oracle != r.positive)
      throw std::runtime_error("dataset: label audit failed at record " + std::to_string(i));
  }
}

inline LabeledGraspDataset load(const std::filesystem::path& dir, int audit_samples = 32) {
  namespace fs = std::filesystem;
  std::ifstream mf(dir / "manifest.txt", std::ios::binary);
  if (!mf) throw std::runtime_error("dataset: cannot open manifest.txt");

  std::string line;
  if (!std::getline(mf, line) || line != "graspgen-dataset")
    throw std::runtime_error("dataset: bad manifest header");

  LabeledGraspDataset d;
  size_t expect_objects = 0, expect_views = 0, expect_records = 0;
  std::string grasps_rel;
  bool have_version = false;

  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "version") {
      std::uint32_t v = 0;
      if (!(ls >> v)) throw std::runtime_error("dataset: malformed manifest version");
      if (v != detail::kVersion)
        throw std::runtime_error("dataset: unsupported manifest version " + std::to_string(v));
      have_version = true;
    } else if (key == "objects") {
      if (!(ls >> expect_objects)) throw std::runtime_error("dataset: malformed objects count");
    } else if (key == "views") {
      if (!(ls >> expect_views)) throw std::runtime_error("dataset: malformed views count");
    } else if (key == "records") {
      if (!(ls >> expect_records)) throw std::runtime_error("dataset: malformed records count");
    } else if (key == "object") {
      size_t idx = 0;
      std::string scale_word, scale_tok, mesh_word, rel;
      if (!(ls >> idx >> scale_word >> scale_tok >> mesh_word >> rel) || scale_word != "scale" ||
          mesh_word != "mesh")
        throw std::runtime_error("dataset: malformed object line");
      if (idx != d.objects.size())
        throw std::runtime_error("dataset: object lines out of order");
      ObjectEntry o;
      o.scale = detail::parse_f64(scale_tok, "object scale");
      o.mesh_path = rel;
      std::ifstream ms(dir / rel, std::ios::binary);
      if (!ms) throw std::runtime_error("dataset: cannot open " + rel);
      o.mesh = mesh::read_stl(ms);
      d.objects.push_back(std::move(o));
    } else if (key == "view") {
      size_t idx = 0;
      std::uint32_t object_id = 0;
      std::string object_word, cloud_word, rel, centroid_word, camera_word;
      std::string c[3], p[3], q[4];
      if (!(ls >> idx >> object_word >> object_id >> cloud_word >> rel >> centroid_word >> c[0] >>
            c[1] >> c[2] >> camera_word >> p[0] >> p[1] >> p[2] >> q[0] >> q[1] >> q[2] >> q[3]) ||
          object_word != "object" || cloud_word != "cloud" || centroid_word != "centroid" ||
          camera_word != "camera")
        throw std::runtime_error("dataset: malformed view line");
      if (idx != d.views.size()) throw std::runtime_error("dataset: view lines out of order");
      ViewEntry v;
      v.object_id = object_id;
      v.cloud_path = rel;
      v.centroid = {detail::parse_f64(c[0], "view centroid"), detail::parse_f64(c[1], "view centroid"),
                    detail::parse_f64(c[2], "view centroid")};
      v.camera.position = {detail::parse_f64(p[0], "camera position"),
                           detail::parse_f64(p[1], "camera position"),
                           detail::parse_f64(p[2], "camera position")};
      v.camera.rotation = Quat{detail::parse_f64(q[0], "camera rotation"),
                               detail::parse_f64(q[1], "camera rotation"),
                               detail::parse_f64(q[2], "camera rotation"),
                               detail::parse_f64(q[3], "camera rotation")};
      std::ifstream cs(dir / rel, std::ios::binary);
      if (!cs) throw std::runtime_error("dataset: cannot open " + rel);
      v.cloud = read_cloud(cs);
      d.views.push_back(std::move(v));
    } else if (key == "grasps") {
      if (!(ls >> grasps_rel)) throw std::runtime_error("dataset: malformed grasps line");
    } else {
      throw std::runtime_error("dataset: unknown manifest key '" + key + "'");
    }
  }

  if (!have_version) throw std::runtime_error("dataset: manifest missing version");
  if (grasps_rel.empty()) throw std::runtime_error("dataset: manifest missing grasps entry");
  if (d.objects.size() != expect_objects)
    throw std::runtime_error("dataset: manifest object count mismatch");
  if (d.views.size() != expect_views)
    throw std::runtime_error("dataset: manifest view count mismatch");

  std::ifstream gs(dir / grasps_rel, std::ios::binary);
  if (!gs) throw std::runtime_error("dataset: cannot open " + grasps_rel);
  d.records = read_grasps(gs);
  if (d.records.size() != expect_records)
    throw std::runtime_error("dataset: manifest record count mismatch");

  d.require_valid();
  audit_labels(d, scene::GripperModel{}, audit_samples);
  return d;
}

// Order-sensitive FNV-1a content hash over the manifest and every file it
// references; reproducible runs embed it in their output manifests.
inline std::uint64_t content_hash(const std::filesystem::path& dir) {
  std::uint64_t h = 1469598103934665603ull;
  const auto mix_file = [&h, &dir](const std::string& rel) {
    std::ifstream is(dir / rel, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot hash missing file " + rel);
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
      for (std::streamsize i = 0; i < is.gcount(); ++i) {
        h ^= static_cast<unsigned char>(buf[i]);
        h *= 1099511628211ull;
      }
      if (!is) break;
    }
  };
  mix_file("manifest.txt");

  std::ifstream mf(dir / "manifest.txt");
  if (!mf) throw std::runtime_error("dataset: cannot open manifest.txt");
  std::string line;
  while (std::getline(mf, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "object") {
      size_t idx;
      std::string w1, scale, w2, rel;
      if (ls >> idx >> w1 >> scale >> w2 >> rel) mix_file(rel);
    } else if (key == "view") {
      size_t idx;
      std::uint32_t oid;
      std::string w1, w2, rel;
      if (ls >> idx >> w1 >> oid >> w2 >> rel) mix_file(rel);
    } else if (key == "grasps") {
      std::string rel;
      if (ls >> rel) mix_file(rel);
    }
  }
  return h;
}

}  // namespace graspgen::dataset
