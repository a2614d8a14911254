#include "mdseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "mdseg/errors.hpp"
#include "mdseg/morphology.hpp"

namespace mdseg {

using nlohmann::json;

namespace {

ShapeKind parse_kind(const std::string& s) {
  if (s == "sphere") return ShapeKind::Sphere;
  if (s == "box") return ShapeKind::Box;
  if (s == "blob") return ShapeKind::Blob;
  throw InputError("gen config: unknown shape kind '" + s + "'");
}

// Low-resolution random radius-multiplier field, trilinearly interpolated.
// Gives blobs a lumpy but smooth boundary.
struct BlobField {
  static constexpr int N = 4;
  double v[N][N][N];

  explicit BlobField(Rng& rng, double amplitude) {
    for (auto& plane : v)
      for (auto& row : plane)
        for (double& x : row) x = 1.0 + amplitude * (2.0 * rng.uniform() - 1.0);
  }

  double sample(double fx, double fy, double fz) const {
    const auto clamp01 = [](double t) { return std::min(std::max(t, 0.0), 1.0); };
    const double gx = clamp01(fx) * (N - 1), gy = clamp01(fy) * (N - 1), gz = clamp01(fz) * (N - 1);
    const int x0 = std::min(static_cast<int>(gx), N - 2);
    const int y0 = std::min(static_cast<int>(gy), N - 2);
    const int z0 = std::min(static_cast<int>(gz), N - 2);
    const double tx = gx - x0, ty = gy - y0, tz = gz - z0;
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
          acc += w * v[x0 + dx][y0 + dy][z0 + dz];
        }
    return acc;
  }
};

constexpr double kBlobAmplitude = 0.3;

void check_bounds(const StructureSpec& s) {
  const double slack = s.kind == ShapeKind::Blob ? 1.0 + kBlobAmplitude : 1.0;
  for (int a = 0; a < 3; ++a) {
    if (s.size[a] <= 0) throw InputError("structure " + s.name + ": non-positive size");
    if (s.center[a] - slack * s.size[a] < 0.0 || s.center[a] + slack * s.size[a] > 1.0)
      throw InputError("structure " + s.name + " exceeds volume bounds");
  }
}

GridU8 rasterize(const StructureSpec& s, const std::array<int64_t, 3>& dims,
                 const BlobField* blob) {
  GridU8 mask(dims[0], dims[1], dims[2]);
  for (int64_t z = 0; z < dims[2]; ++z)
    for (int64_t y = 0; y < dims[1]; ++y)
      for (int64_t x = 0; x < dims[0]; ++x) {
        const double px = (x + 0.5) / dims[0], py = (y + 0.5) / dims[1],
                     pz = (z + 0.5) / dims[2];
        const double ux = (px - s.center[0]) / s.size[0];
        const double uy = (py - s.center[1]) / s.size[1];
        const double uz = (pz - s.center[2]) / s.size[2];
        bool inside = false;
        switch (s.kind) {
          case ShapeKind::Sphere:
            inside = ux * ux + uy * uy + uz * uz <= 1.0;
            break;
          case ShapeKind::Box:
            inside = std::abs(ux) <= 1.0 && std::abs(uy) <= 1.0 && std::abs(uz) <= 1.0;
            break;
          case ShapeKind::Blob: {
            const double rho = blob->sample(0.5 + 0.5 * ux, 0.5 + 0.5 * uy, 0.5 + 0.5 * uz);
            inside = ux * ux + uy * uy + uz * uz <= rho * rho;
            break;
          }
        }
        if (inside) mask.at(x, y, z) = 1;
      }
  return mask;
}

}  // namespace

Scene generate_scene(Rng& rng, const std::vector<StructureSpec>& structures,
                     const std::array<int64_t, 3>& volume_shape, double noise_std) {
  for (int64_t d : volume_shape)
    if (d < 8) throw InputError("scene: volume_shape must be >= 8 per dim");
  const uint64_t root = rng.next_u64();

  Scene scene;
  scene.image = GridF(volume_shape[0], volume_shape[1], volume_shape[2]);
  std::map<int, size_t> index_of;
  for (size_t i = 0; i < structures.size(); ++i) index_of[structures[i].id] = i;

  for (size_t i = 0; i < structures.size(); ++i) {
    const auto& s = structures[i];
    check_bounds(s);
    Rng blob_rng = Rng::derive({root, 1u, static_cast<uint64_t>(i)});
    std::optional<BlobField> blob;
    if (s.kind == ShapeKind::Blob) blob.emplace(blob_rng, kBlobAmplitude);
    GridU8 mask = rasterize(s, volume_shape, blob ? &*blob : nullptr);
    if (s.parent_id) {
      auto it = index_of.find(*s.parent_id);
      if (it == index_of.end() || it->second >= i)
        throw InputError("structure " + s.name + ": parent must precede child");
      const GridU8& parent = scene.truth[it->second];
      for (int64_t v = 0; v < mask.numel(); ++v)
        mask.data[v] = static_cast<uint8_t>(mask.data[v] & parent.data[v]);
    }
    scene.truth.push_back(std::move(mask));
  }

  for (size_t i = 0; i < structures.size(); ++i) {
    const auto& s = structures[i];
    Rng tex = Rng::derive({root, 2u, static_cast<uint64_t>(i)});
    const GridU8& mask = scene.truth[i];
    for (int64_t v = 0; v < mask.numel(); ++v)
      if (mask.data[v])
        scene.image.data[v] +=
            static_cast<float>(s.intensity_mean + s.intensity_std * tex.normal());
  }

  if (noise_std > 0) {
    Rng noise = Rng::derive({root, 3u});
    const double clip = 3.0 * noise_std;
    for (auto& v : scene.image.data) {
      const double n = std::clamp(noise_std * noise.normal(), -clip, clip);
      v += static_cast<float>(n);
    }
  }
  return scene;
}

GridU8 apply_protocol(const GridU8& full_truth_mask, const std::vector<GridU8>& substructure_masks,
                      const ProtocolVariant& variant) {
  GridU8 out = apply_margin(full_truth_mask, variant.margin_voxels);
  if (!variant.include_substructures) {
    for (const auto& sub : substructure_masks) {
      if (sub.dims != out.dims) throw InputError("apply_protocol: mask shape mismatch");
      for (int64_t v = 0; v < out.numel(); ++v)
        if (sub.data[v]) out.data[v] = 0;
    }
  }
  if (variant.axial_crop) {
    const auto [zlo_f, zhi_f] = *variant.axial_crop;
    const int64_t nz = out.nz();
    const int64_t zlo = std::llround(zlo_f * nz), zhi = std::llround(zhi_f * nz);
    for (int64_t z = 0; z < nz; ++z) {
      if (z >= zlo && z < zhi) continue;
      for (int64_t y = 0; y < out.ny(); ++y)
        for (int64_t x = 0; x < out.nx(); ++x) out.at(x, y, z) = 0;
    }
  }
  return out;
}

std::vector<StructureSpec> jitter_structures(Rng& rng, const std::vector<StructureSpec>& base,
                                             double center_jitter, double size_jitter) {
  std::vector<StructureSpec> out = base;
  std::map<int, size_t> index_of;
  for (size_t i = 0; i < base.size(); ++i) index_of[base[i].id] = i;

  std::vector<std::array<double, 3>> offset(base.size());
  std::vector<double> scale(base.size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (out[i].parent_id) {
      // Children follow their parent so containment is preserved.
      const size_t p = index_of.at(*out[i].parent_id);
      offset[i] = offset[p];
      scale[i] = scale[p];
      const auto& parent = out[p];
      for (int a = 0; a < 3; ++a) {
        const double rel = base[i].center[a] - base[p].center[a];
        out[i].center[a] = parent.center[a] + rel * scale[i];
        out[i].size[a] = base[i].size[a] * scale[i];
      }
    } else {
      for (int a = 0; a < 3; ++a)
        offset[i][a] = center_jitter * (2.0 * rng.uniform() - 1.0);
      scale[i] = 1.0 + size_jitter * (2.0 * rng.uniform() - 1.0);
      for (int a = 0; a < 3; ++a) {
        out[i].center[a] = base[i].center[a] + offset[i][a];
        out[i].size[a] = base[i].size[a] * scale[i];
      }
    }
  }
  return out;
}

void validate(const GenConfig& cfg) {
  for (int64_t d : cfg.volume_shape)
    if (d < 8) throw InputError("gen config: volume_shape must be >= 8 per dim");
  if (cfg.structures.empty()) throw InputError("gen config: no structures");
  if (cfg.datasets.empty()) throw InputError("gen config: no datasets");
  std::map<int, const StructureSpec*> by_id;
  for (const auto& s : cfg.structures) {
    if (by_id.count(s.id)) throw InputError("gen config: duplicate structure id");
    if (s.intensity_std < 0) throw InputError("gen config: intensity_std must be >= 0");
    by_id[s.id] = &s;
  }
  for (const auto& s : cfg.structures)
    if (s.parent_id && !by_id.count(*s.parent_id))
      throw InputError("gen config: unknown parent_id for structure " + s.name);
  for (const auto& d : cfg.datasets) {
    if (d.classes.empty()) throw InputError("gen config: dataset annotates no structure");
    if (d.case_count < 1) throw InputError("gen config: case_count must be >= 1");
    for (const auto& c : d.classes) {
      if (!by_id.count(c.structure_id))
        throw InputError("gen config: dataset references unknown structure id");
      if (std::abs(c.variant.margin_voxels) > 3)
        throw InputError("gen config: |margin_voxels| must be <= 3");
      if (c.variant.axial_crop) {
        const auto [lo, hi] = *c.variant.axial_crop;
        if (!(lo >= 0.0 && hi <= 1.0 && lo < hi))
          throw InputError("gen config: axial_crop fractions must satisfy 0 <= lo < hi <= 1");
      }
    }
  }
}

GenConfig load_gen_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("gen config: cannot open " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw InputError("gen config: invalid JSON: " + std::string(e.what()));
  }
  return gen_config_from_json(j);
}

GenConfig gen_config_from_json(const json& j) {
  GenConfig cfg;
  if (j.contains("volume_shape")) {
    const auto& v = j.at("volume_shape");
    for (int i = 0; i < 3; ++i) cfg.volume_shape[i] = v.at(i).get<int64_t>();
  }
  cfg.noise_std = j.value("noise_std", cfg.noise_std);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.center_jitter = j.value("center_jitter", cfg.center_jitter);
  cfg.size_jitter = j.value("size_jitter", cfg.size_jitter);

  for (const auto& js : j.at("structures")) {
    StructureSpec s;
    s.id = js.at("id").get<int>();
    s.name = js.value("name", "structure_" + std::to_string(s.id));
    s.kind = parse_kind(js.value("kind", "sphere"));
    for (int i = 0; i < 3; ++i) {
      s.center[i] = js.at("center").at(i).get<double>();
      s.size[i] = js.at("size").at(i).get<double>();
    }
    s.intensity_mean = js.value("intensity_mean", 1.0);
    s.intensity_std = js.value("intensity_std", 0.0);
    if (js.contains("parent_id") && !js.at("parent_id").is_null())
      s.parent_id = js.at("parent_id").get<int>();
    cfg.structures.push_back(std::move(s));
  }

  std::map<int, std::string> sname;
  for (const auto& s : cfg.structures) sname[s.id] = s.name;

  for (const auto& jd : j.at("datasets")) {
    DatasetGenSpec d;
    d.name = jd.at("name").get<std::string>();
    d.case_count = jd.at("case_count").get<int>();
    for (const auto& jc : jd.at("classes")) {
      DatasetGenSpec::ClassGen c;
      c.structure_id = jc.at("structure_id").get<int>();
      c.variant.margin_voxels = jc.value("margin_voxels", 0);
      c.variant.include_substructures = jc.value("include_substructures", true);
      if (jc.contains("axial_crop") && !jc.at("axial_crop").is_null())
        c.variant.axial_crop = std::make_pair(jc.at("axial_crop").at(0).get<double>(),
                                              jc.at("axial_crop").at(1).get<double>());
      c.name = jc.value("name", sname.count(c.structure_id) ? sname[c.structure_id] : "");
      if (jc.contains("group_tags"))
        for (const auto& t : jc.at("group_tags")) c.group_tags.insert(t.get<std::string>());
      d.classes.push_back(std::move(c));
    }
    cfg.datasets.push_back(std::move(d));
  }
  validate(cfg);
  return cfg;
}

nlohmann::json gen_config_to_json(const GenConfig& cfg) {
  json j;
  j["volume_shape"] = {cfg.volume_shape[0], cfg.volume_shape[1], cfg.volume_shape[2]};
  j["noise_std"] = cfg.noise_std;
  j["seed"] = cfg.seed;
  j["center_jitter"] = cfg.center_jitter;
  j["size_jitter"] = cfg.size_jitter;
  j["structures"] = json::array();
  for (const auto& s : cfg.structures) {
    json js;
    js["id"] = s.id;
    js["name"] = s.name;
    js["kind"] = s.kind == ShapeKind::Sphere ? "sphere" : s.kind == ShapeKind::Box ? "box" : "blob";
    js["center"] = {s.center[0], s.center[1], s.center[2]};
    js["size"] = {s.size[0], s.size[1], s.size[2]};
    js["intensity_mean"] = s.intensity_mean;
    js["intensity_std"] = s.intensity_std;
    if (s.parent_id)
      js["parent_id"] = *s.parent_id;
    else
      js["parent_id"] = nullptr;
    j["structures"].push_back(js);
  }
  j["datasets"] = json::array();
  for (const auto& d : cfg.datasets) {
    json jd;
    jd["name"] = d.name;
    jd["case_count"] = d.case_count;
    jd["classes"] = json::array();
    for (const auto& c : d.classes) {
      json jc;
      jc["structure_id"] = c.structure_id;
      jc["margin_voxels"] = c.variant.margin_voxels;
      jc["include_substructures"] = c.variant.include_substructures;
      if (c.variant.axial_crop)
        jc["axial_crop"] = {c.variant.axial_crop->first, c.variant.axial_crop->second};
      else
        jc["axial_crop"] = nullptr;
      jc["name"] = c.name;
      jc["group_tags"] = json::array();
      for (const auto& t : c.group_tags) jc["group_tags"].push_back(t);
      jd["classes"].push_back(jc);
    }
    j["datasets"].push_back(jd);
  }
  return j;
}

CollectionManifest generate_collection(const GenConfig& config,
                                       const std::filesystem::path& out_dir) {
  validate(config);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "volumes");
  fs::create_directories(out_dir / "truth");

  std::map<int, size_t> struct_index;
  for (size_t i = 0; i < config.structures.size(); ++i)
    struct_index[config.structures[i].id] = i;
  // Direct and transitive children of each structure.
  std::map<int, std::vector<int>> descendants;
  for (const auto& s : config.structures) {
    std::optional<int> p = s.parent_id;
    while (p) {
      descendants[*p].push_back(s.id);
      p = config.structures[struct_index.at(*p)].parent_id;
    }
  }

  CollectionManifest m;
  m.root = out_dir;
  for (size_t k = 0; k < config.datasets.size(); ++k) {
    const auto& dg = config.datasets[k];
    DatasetDescriptor d;
    d.dataset_id = static_cast<int>(k);
    d.name = dg.name;
    d.voxel_spacing = {1.0, 1.0, 1.0};
    for (size_t j = 0; j < dg.classes.size(); ++j) {
      ClassRef c;
      c.dataset_id = d.dataset_id;
      c.local_index = static_cast<int>(j);
      c.name = dg.classes[j].name;
      c.group_tags = dg.classes[j].group_tags;
      d.classes.push_back(std::move(c));
    }
    m.datasets.push_back(std::move(d));
  }

  uint64_t global_case = 0;
  for (size_t k = 0; k < config.datasets.size(); ++k) {
    const auto& dg = config.datasets[k];
    for (int i = 0; i < dg.case_count; ++i, ++global_case) {
      Rng rng = Rng::derive({config.seed, 0xCA5Eull, global_case});
      const auto structs =
          jitter_structures(rng, config.structures, config.center_jitter, config.size_jitter);
      Scene scene = generate_scene(rng, structs, config.volume_shape, config.noise_std);

      // z-score normalization; volumes are stored normalized.
      double mean = 0.0;
      for (float v : scene.image.data) mean += v;
      mean /= static_cast<double>(scene.image.numel());
      double var = 0.0;
      for (float v : scene.image.data) var += (v - mean) * (v - mean);
      var /= static_cast<double>(scene.image.numel());
      const double inv_std = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
      for (auto& v : scene.image.data)
        v = static_cast<float>((v - mean) * inv_std);

      char stem[64];
      std::snprintf(stem, sizeof(stem), "ds%02zu_case%03d", k, i);

      CaseEntry entry;
      entry.dataset_id = static_cast<int>(k);
      entry.holdout = (i % 5) == 4;
      entry.image = fs::path("volumes") / (std::string(stem) + ".mtvol");
      write_volume(scene.image, out_dir / entry.image);

      for (size_t j = 0; j < dg.classes.size(); ++j) {
        const auto& cg = dg.classes[j];
        const GridU8& full = scene.truth[struct_index.at(cg.structure_id)];
        std::vector<GridU8> subs;
        for (int sid : descendants[cg.structure_id])
          subs.push_back(scene.truth[struct_index.at(sid)]);
        GridU8 mask = apply_protocol(full, subs, cg.variant);
        entry.masks.push_back(fs::path("volumes") /
                              (std::string(stem) + "_c" + std::to_string(j) + ".mtvol"));
        write_volume(mask, out_dir / entry.masks.back());
      }

      for (const auto& s : config.structures) {
        entry.truth.push_back(fs::path("truth") /
                              (std::string(stem) + "_s" + std::to_string(s.id) + ".mtvol"));
        entry.truth_structure_ids.push_back(s.id);
        write_volume(scene.truth[struct_index.at(s.id)], out_dir / entry.truth.back());
      }

      m.datasets[k].case_count += 1;
      m.cases.push_back(std::move(entry));
    }
  }

  for (const auto& d : m.datasets)
    for (const auto& c : d.classes) m.global_classes.push_back(c);
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace mdseg
