#include "mdseg/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mdseg/errors.hpp"

namespace mdseg {

namespace {
bool in_split(const CaseEntry& e, Split split) {
  switch (split) {
    case Split::Train: return !e.holdout;
    case Split::Holdout: return e.holdout;
    case Split::All: return true;
  }
  return false;
}
}  // namespace

SamplerSpec build_sampler(const CollectionManifest& m, Split split) {
  std::map<int, int64_t> n_per_dataset;
  for (const auto& e : m.cases)
    if (in_split(e, split)) n_per_dataset[e.dataset_id] += 1;

  SamplerSpec s;
  double total = 0.0;
  for (size_t i = 0; i < m.cases.size(); ++i) {
    const auto& e = m.cases[i];
    if (!in_split(e, split)) continue;
    const double w = 1.0 / std::sqrt(static_cast<double>(n_per_dataset.at(e.dataset_id)));
    s.case_indices.push_back(i);
    s.probabilities.push_back(w);
    total += w;
  }
  if (s.case_indices.empty()) throw InputError("sampler: no cases in the requested split");
  double acc = 0.0;
  s.cdf.reserve(s.probabilities.size());
  for (auto& p : s.probabilities) {
    p /= total;
    acc += p;
    s.cdf.push_back(acc);
  }
  s.cdf.back() = 1.0;
  return s;
}

std::vector<size_t> sample_batch(const SamplerSpec& sampler, int batch_size, Rng& rng) {
  if (batch_size < 1) throw std::invalid_argument("sample_batch: batch_size must be >= 1");
  std::vector<size_t> out;
  out.reserve(static_cast<size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    const double u = rng.uniform();
    const auto it = std::upper_bound(sampler.cdf.begin(), sampler.cdf.end(), u);
    const size_t k = std::min(static_cast<size_t>(it - sampler.cdf.begin()),
                              sampler.case_indices.size() - 1);
    out.push_back(sampler.case_indices[k]);
  }
  return out;
}

Patch extract_patch(const Case& c, const CollectionManifest& m,
                    const std::array<int64_t, 3>& patch_shape, Rng& rng, double fg_bias) {
  const auto& dims = c.image.dims;
  std::array<int64_t, 3> padded{}, pad_lo{};
  for (int a = 0; a < 3; ++a) {
    padded[a] = std::max(dims[a], patch_shape[a]);
    pad_lo[a] = (padded[a] - dims[a]) / 2;
  }

  std::array<int64_t, 3> start{};
  const bool want_fg = rng.uniform() < fg_bias;
  bool centered = false;
  if (want_fg) {
    // Uniform choice among annotated foreground voxels of any local class.
    std::vector<std::array<int64_t, 3>> fg;
    for (int64_t z = 0; z < dims[2]; ++z)
      for (int64_t y = 0; y < dims[1]; ++y)
        for (int64_t x = 0; x < dims[0]; ++x)
          for (const auto& mask : c.masks)
            if (mask.at(x, y, z)) {
              fg.push_back({x, y, z});
              break;
            }
    if (!fg.empty()) {
      const auto v = fg[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(fg.size())))];
      for (int a = 0; a < 3; ++a) {
        const int64_t center = v[a] + pad_lo[a];
        start[a] = std::clamp<int64_t>(center - patch_shape[a] / 2, 0, padded[a] - patch_shape[a]);
      }
      centered = true;
    }
  }
  if (!centered)
    for (int a = 0; a < 3; ++a)
      start[a] = rng.uniform_int(padded[a] - patch_shape[a] + 1);

  const int C = m.num_classes();
  const int offset = m.global_class_offset(c.dataset_id);
  Patch p;
  p.image = Tensor<float>({1, patch_shape[0], patch_shape[1], patch_shape[2]});
  p.target = Tensor<float>({C, patch_shape[0], patch_shape[1], patch_shape[2]});
  p.annotation = annotation_mask_vector(c.dataset_id, m);

  const auto src = [&](int64_t px, int a) {
    return std::clamp<int64_t>(px - pad_lo[a], 0, dims[a] - 1);
  };
  int64_t w = 0;
  for (int64_t x = 0; x < patch_shape[0]; ++x)
    for (int64_t y = 0; y < patch_shape[1]; ++y)
      for (int64_t z = 0; z < patch_shape[2]; ++z, ++w) {
        const int64_t sx = src(start[0] + x, 0), sy = src(start[1] + y, 1),
                      sz = src(start[2] + z, 2);
        p.image[w] = c.image.at(sx, sy, sz);
        for (size_t j = 0; j < c.masks.size(); ++j)
          if (c.masks[j].at(sx, sy, sz))
            p.target[(offset + static_cast<int64_t>(j)) * p.image.numel() + w] = 1.0f;
      }
  return p;
}

double learning_rate(const ScheduleSpec& s, int epoch, ParamRole role) {
  if (epoch < 0 || epoch >= s.total_epochs)
    throw std::invalid_argument("learning_rate: epoch out of range");
  const auto poly = [&](int e, int span) {
    return s.base_lr *
           std::pow(1.0 - static_cast<double>(e) / static_cast<double>(span), s.poly_exponent);
  };
  if (s.mode == ScheduleSpec::Mode::Standard) return poly(epoch, s.total_epochs);

  const int H = s.head_warmup_epochs, F = s.full_warmup_epochs;
  if (H + F >= s.total_epochs)
    throw std::invalid_argument("learning_rate: warmup phases must end before total_epochs");
  if (epoch < H) {
    if (role == ParamRole::Backbone) return 0.0;  // heads warm up alone
    return s.base_lr * static_cast<double>(epoch + 1) / static_cast<double>(H);
  }
  if (epoch < H + F)
    return std::min(s.base_lr,
                    s.base_lr * static_cast<double>(epoch - H + 1) / static_cast<double>(F));
  return poly(epoch - H - F, s.total_epochs - H - F);
}

}  // namespace mdseg
