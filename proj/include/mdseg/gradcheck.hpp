#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mdseg {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool all_pass() const {
    for (const auto& e : entries)
      if (!e.pass) return false;
    return true;
  }
};

/// f64 central-difference check (h = 1e-4 * scale) of every primitive's
/// analytic gradient and of the composed network-plus-loss objective on tiny
/// shapes. Failures are report entries, never exceptions.
GradCheckReport run_gradcheck(uint64_t seed = 7);

void write_gradcheck_csv(const GradCheckReport& report, const std::filesystem::path& path);

}  // namespace mdseg
