#include "mdseg/collection.hpp"

#include <fstream>
#include <map>

#include <json.hpp>

#include "mdseg/errors.hpp"

namespace mdseg {

using nlohmann::json;

const DatasetDescriptor& CollectionManifest::dataset(int dataset_id) const {
  for (const auto& d : datasets)
    if (d.dataset_id == dataset_id) return d;
  throw InputError("unknown dataset_id " + std::to_string(dataset_id));
}

int CollectionManifest::global_class_offset(int dataset_id) const {
  int off = 0;
  for (const auto& d : datasets) {
    if (d.dataset_id == dataset_id) return off;
    off += static_cast<int>(d.classes.size());
  }
  throw InputError("unknown dataset_id " + std::to_string(dataset_id));
}

std::filesystem::path CollectionManifest::resolve(const std::filesystem::path& p) const {
  return p.is_absolute() ? p : root / p;
}

namespace {

json require(const json& j, const char* key, const char* ctx) {
  if (!j.contains(key))
    throw InputError(std::string("manifest: missing key '") + key + "' in " + ctx);
  return j.at(key);
}

}  // namespace

CollectionManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("manifest: cannot open " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw InputError("manifest: invalid JSON in " + path.string() + ": " + e.what());
  }

  CollectionManifest m;
  m.root = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");

  std::map<int, size_t> by_id;
  for (const auto& jd : require(j, "datasets", "top level")) {
    DatasetDescriptor d;
    d.dataset_id = require(jd, "id", "dataset").get<int>();
    d.name = require(jd, "name", "dataset").get<std::string>();
    if (by_id.count(d.dataset_id))
      throw InputError("manifest: duplicate dataset_id " + std::to_string(d.dataset_id));
    const auto spacing = require(jd, "spacing", "dataset");
    if (spacing.size() != 3) throw InputError("manifest: spacing must have 3 entries");
    for (int i = 0; i < 3; ++i) {
      d.voxel_spacing[i] = spacing.at(i).get<double>();
      if (!(d.voxel_spacing[i] > 0)) throw InputError("manifest: spacing must be positive");
    }
    int local = 0;
    for (const auto& jc : require(jd, "classes", "dataset")) {
      ClassRef c;
      c.dataset_id = d.dataset_id;
      c.local_index = local++;
      c.name = require(jc, "name", "class").get<std::string>();
      if (jc.contains("group_tags"))
        for (const auto& t : jc.at("group_tags")) c.group_tags.insert(t.get<std::string>());
      d.classes.push_back(std::move(c));
    }
    if (d.classes.empty())
      throw InputError("manifest: dataset " + d.name + " has no classes");
    by_id[d.dataset_id] = m.datasets.size();
    m.datasets.push_back(std::move(d));
  }
  if (m.datasets.empty()) throw InputError("manifest: no datasets");

  for (const auto& jc : require(j, "cases", "top level")) {
    CaseEntry e;
    e.dataset_id = require(jc, "dataset_id", "case").get<int>();
    auto it = by_id.find(e.dataset_id);
    if (it == by_id.end())
      throw InputError("manifest: case references unknown dataset " +
                       std::to_string(e.dataset_id));
    e.image = require(jc, "image", "case").get<std::string>();
    for (const auto& p : require(jc, "masks", "case"))
      e.masks.emplace_back(p.get<std::string>());
    const size_t want = m.datasets[it->second].classes.size();
    if (e.masks.size() != want)
      throw InputError("manifest: mask count mismatch for a case of dataset " +
                       std::to_string(e.dataset_id) + " (got " +
                       std::to_string(e.masks.size()) + ", dataset has " +
                       std::to_string(want) + " classes)");
    if (jc.contains("holdout")) e.holdout = jc.at("holdout").get<bool>();
    if (jc.contains("truth")) {
      for (const auto& p : jc.at("truth")) e.truth.emplace_back(p.get<std::string>());
      if (jc.contains("truth_structure_ids"))
        for (const auto& s : jc.at("truth_structure_ids"))
          e.truth_structure_ids.push_back(s.get<int>());
      if (e.truth_structure_ids.size() != e.truth.size())
        throw InputError("manifest: truth_structure_ids must parallel truth paths");
    }
    m.datasets[it->second].case_count += 1;
    m.cases.push_back(std::move(e));
  }

  for (const auto& d : m.datasets)
    for (const auto& c : d.classes) m.global_classes.push_back(c);
  return m;
}

void save_manifest(const CollectionManifest& m, const std::filesystem::path& path) {
  json j;
  j["datasets"] = json::array();
  for (const auto& d : m.datasets) {
    json jd;
    jd["id"] = d.dataset_id;
    jd["name"] = d.name;
    jd["spacing"] = {d.voxel_spacing[0], d.voxel_spacing[1], d.voxel_spacing[2]};
    jd["classes"] = json::array();
    for (const auto& c : d.classes) {
      json jc;
      jc["name"] = c.name;
      jc["group_tags"] = json::array();
      for (const auto& t : c.group_tags) jc["group_tags"].push_back(t);
      jd["classes"].push_back(jc);
    }
    j["datasets"].push_back(jd);
  }
  j["cases"] = json::array();
  for (const auto& e : m.cases) {
    json jc;
    jc["dataset_id"] = e.dataset_id;
    jc["image"] = e.image.generic_string();
    jc["masks"] = json::array();
    for (const auto& p : e.masks) jc["masks"].push_back(p.generic_string());
    jc["holdout"] = e.holdout;
    if (!e.truth.empty()) {
      jc["truth"] = json::array();
      for (const auto& p : e.truth) jc["truth"].push_back(p.generic_string());
      jc["truth_structure_ids"] = e.truth_structure_ids;
    }
    j["cases"].push_back(jc);
  }
  std::ofstream os(path);
  if (!os) throw InputError("manifest: cannot write " + path.string());
  os << j.dump(2) << "\n";
}

std::vector<uint8_t> annotation_mask_vector(int dataset_id, const CollectionManifest& m) {
  (void)m.dataset(dataset_id);  // validates the id
  std::vector<uint8_t> v(m.global_classes.size(), 0);
  for (size_t i = 0; i < m.global_classes.size(); ++i)
    if (m.global_classes[i].dataset_id == dataset_id) v[i] = 1;
  return v;
}

CollectionManifest filter_datasets(const CollectionManifest& m, const std::vector<int>& ids) {
  CollectionManifest out;
  out.root = m.root;
  for (int id : ids) {
    DatasetDescriptor d = m.dataset(id);
    d.case_count = 0;
    out.datasets.push_back(std::move(d));
  }
  for (const auto& e : m.cases) {
    for (size_t k = 0; k < ids.size(); ++k) {
      if (e.dataset_id != ids[k]) continue;
      out.cases.push_back(e);
      out.datasets[k].case_count += 1;
    }
  }
  for (const auto& d : out.datasets)
    for (const auto& c : d.classes) out.global_classes.push_back(c);
  if (out.datasets.empty()) throw InputError("filter_datasets: no datasets selected");
  return out;
}

Case load_case(const CollectionManifest& m, const CaseEntry& entry) {
  Case c;
  c.dataset_id = entry.dataset_id;
  c.image = read_volume_f32(m.resolve(entry.image));
  for (const auto& p : entry.masks) {
    GridU8 mask = read_volume_u8(m.resolve(p));
    if (mask.dims != c.image.dims)
      throw InputError("case: mask shape differs from image shape in " + p.string());
    for (uint8_t v : mask.data)
      if (v > 1) throw InputError("case: non-binary mask value in " + p.string());
    c.masks.push_back(std::move(mask));
  }
  return c;
}

}  // namespace mdseg
