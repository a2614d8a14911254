#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdseg/collection.hpp"
#include "mdseg/grid.hpp"
#include "mdseg/rng.hpp"

namespace mdseg {

enum class ShapeKind { Sphere, Box, Blob };

/// Geometric stand-in for an anatomical target structure. Nested structures
/// (parent_id set) are clipped to their parent's support so containment holds
/// for every generated case.
struct StructureSpec {
  int id = 0;
  std::string name;
  ShapeKind kind = ShapeKind::Sphere;
  std::array<double, 3> center{0.5, 0.5, 0.5};  // fraction of volume
  std::array<double, 3> size{0.2, 0.2, 0.2};    // half-extent / radius fractions
  double intensity_mean = 1.0;
  double intensity_std = 0.0;
  std::optional<int> parent_id;
};

/// How one dataset delineates one structure: a signed margin (dilate/erode),
/// whether nested substructures stay inside the mask, and an optional axial
/// extent restriction.
struct ProtocolVariant {
  int margin_voxels = 0;  // |margin| <= 3
  bool include_substructures = true;
  std::optional<std::pair<double, double>> axial_crop;  // (z_min, z_max) fractions
};

struct DatasetGenSpec {
  std::string name;
  int case_count = 1;
  struct ClassGen {
    int structure_id = 0;
    ProtocolVariant variant;
    std::string name;  // defaults to the structure name
    std::set<std::string> group_tags;
  };
  std::vector<ClassGen> classes;
};

struct GenConfig {
  std::array<int64_t, 3> volume_shape{32, 32, 32};
  std::vector<StructureSpec> structures;
  std::vector<DatasetGenSpec> datasets;
  double noise_std = 0.1;
  uint64_t seed = 0;
  // Per-case geometric variation; children move and scale with their parent.
  double center_jitter = 0.05;  // fraction of volume, per axis
  double size_jitter = 0.12;    // relative scale range +-
};

GenConfig load_gen_config(const std::filesystem::path& path);
GenConfig gen_config_from_json(const nlohmann::json& j);
nlohmann::json gen_config_to_json(const GenConfig& cfg);
void validate(const GenConfig& cfg);

struct Scene {
  GridF image;
  std::vector<GridU8> truth;  // parallel to the structure list
};

/// Rasterizes structures into an intensity image plus unmodified per-structure
/// support masks. Deterministic for a fixed rng state.
Scene generate_scene(Rng& rng, const std::vector<StructureSpec>& structures,
                     const std::array<int64_t, 3>& volume_shape, double noise_std);

/// Dataset-specific mask from the protocol-free truth: margin first, then
/// substructure removal, then axial crop.
GridU8 apply_protocol(const GridU8& full_truth_mask, const std::vector<GridU8>& substructure_masks,
                      const ProtocolVariant& variant);

/// Writes MTVOL volumes, protocol masks, neutral truth masks and a
/// manifest.json under out_dir. Case i of each dataset is flagged holdout
/// iff i % 5 == 4 (deterministic 80/20 split by case index).
CollectionManifest generate_collection(const GenConfig& config,
                                       const std::filesystem::path& out_dir);

std::vector<StructureSpec> jitter_structures(Rng& rng, const std::vector<StructureSpec>& base,
                                             double center_jitter, double size_jitter);

}  // namespace mdseg
