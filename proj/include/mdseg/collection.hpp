#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mdseg/grid.hpp"

namespace mdseg {

/// One class of one dataset. Classes from different datasets are never
/// merged, even when their names coincide (disjoint label namespaces).
struct ClassRef {
  int dataset_id = 0;
  int local_index = 0;  // 0-based within the dataset
  std::string name;
  std::set<std::string> group_tags;

  friend bool operator==(const ClassRef&, const ClassRef&) = default;
};

struct DatasetDescriptor {
  int dataset_id = 0;
  std::string name;
  std::vector<ClassRef> classes;
  int case_count = 0;  // number of case entries in the manifest
  std::array<double, 3> voxel_spacing{1.0, 1.0, 1.0};
};

struct CaseEntry {
  int dataset_id = 0;
  std::filesystem::path image;
  std::vector<std::filesystem::path> masks;  // one per local class, local order
  bool holdout = false;
  // Optional protocol-free structure masks kept for verification.
  std::vector<std::filesystem::path> truth;
  std::vector<int> truth_structure_ids;
};

struct CollectionManifest {
  std::vector<DatasetDescriptor> datasets;
  std::vector<ClassRef> global_classes;  // dataset-major, then local order
  std::vector<CaseEntry> cases;
  std::filesystem::path root;  // directory all relative paths resolve against

  int num_classes() const { return static_cast<int>(global_classes.size()); }

  const DatasetDescriptor& dataset(int dataset_id) const;
  /// First global-class index of a dataset's block.
  int global_class_offset(int dataset_id) const;
  std::filesystem::path resolve(const std::filesystem::path& p) const;
};

/// In-memory case: image plus per-local-class binary masks (multi-hot,
/// overlaps permitted).
struct Case {
  int dataset_id = 0;
  GridF image;
  std::vector<GridU8> masks;
};

CollectionManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const CollectionManifest& m, const std::filesystem::path& path);

/// Entry c is 1 iff global class c belongs to `dataset_id`.
std::vector<uint8_t> annotation_mask_vector(int dataset_id, const CollectionManifest& m);

Case load_case(const CollectionManifest& m, const CaseEntry& entry);

/// Sub-collection restricted to the given datasets (order preserved);
/// global classes renumber dataset-major as usual.
CollectionManifest filter_datasets(const CollectionManifest& m, const std::vector<int>& ids);

}  // namespace mdseg
