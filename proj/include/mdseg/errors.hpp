#pragma once

#include <stdexcept>
#include <string>

namespace mdseg {

/// Bad user input: missing files, schema violations, invalid configs.
/// The CLI maps this to exit code 2; everything else exits 1.
struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mdseg
