#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mdseg/collection.hpp"
#include "mdseg/net.hpp"
#include "mdseg/rng.hpp"
#include "mdseg/tensor.hpp"

namespace mdseg {

enum class Split { Train, Holdout, All };

/// Case distribution with per-case weight 1/sqrt(n_k), n_k the number of
/// eligible cases of the case's source dataset; dataset-level probability is
/// then sqrt(n_k)/sum_j sqrt(n_j).
struct SamplerSpec {
  std::vector<size_t> case_indices;    // into CollectionManifest::cases
  std::vector<double> probabilities;   // normalized, parallel to case_indices
  std::vector<double> cdf;
};

SamplerSpec build_sampler(const CollectionManifest& m, Split split = Split::Train);

/// i.i.d. draws with replacement; returns indices into manifest.cases.
std::vector<size_t> sample_batch(const SamplerSpec& sampler, int batch_size, Rng& rng);

/// Image/target patch with the local masks embedded into the global class
/// axis and the sample's dataset annotation vector.
struct Patch {
  Tensor<float> image;   // [1,px,py,pz]
  Tensor<float> target;  // [C,px,py,pz]
  std::vector<uint8_t> annotation;
};

/// With probability fg_bias the patch is centered on a uniformly chosen
/// annotated foreground voxel, otherwise positioned uniformly. Volumes
/// smaller than the patch are edge-replicated.
Patch extract_patch(const Case& c, const CollectionManifest& m,
                    const std::array<int64_t, 3>& patch_shape, Rng& rng, double fg_bias = 0.33);

struct ScheduleSpec {
  enum class Mode { Standard, Finetune };
  Mode mode = Mode::Standard;
  double base_lr = 0.01;
  int total_epochs = 1000;
  int head_warmup_epochs = 10;
  int full_warmup_epochs = 50;
  double poly_exponent = 0.9;
};

/// Standard: poly decay base*(1-epoch/total)^0.9 for every role.
/// Finetune: linear head-only warmup (backbone frozen at lr 0), then a linear
/// whole-network warmup to base, then the poly schedule over the remainder.
double learning_rate(const ScheduleSpec& schedule, int epoch, ParamRole role);

}  // namespace mdseg
