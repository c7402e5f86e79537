#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskjepa/parameter.hpp"

namespace mjepa {

struct GradCheckOptions {
  double step = 1e-5;       // central-difference h, must lie in [1e-6, 1e-3]
  double tolerance = 1e-4;  // max relative error
  // Denominator floor: rel = |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-6;
  // Entries probed per parameter tensor (0 = every entry).
  std::size_t max_probes = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t probed = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error < tolerance; }
};

class GradCheckError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Compares the reverse-mode gradient of `loss` with central differences
// (f(θ+h) - f(θ-h)) / 2h for every listed parameter. `loss` must rebuild the
// graph from the current parameter values on each call.
GradCheckReport grad_check(const std::function<Var<double>()>& loss, const ParameterList<double>& params,
                           const GradCheckOptions& options = {});

}  // namespace mjepa
