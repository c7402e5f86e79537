#include "maskjepa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace mjepa {

GradCheckReport grad_check(const std::function<Var<double>()>& loss, const ParameterList<double>& params,
                           const GradCheckOptions& options) {
  if (!(options.step >= 1e-6 && options.step <= 1e-3)) {
    throw std::invalid_argument("grad_check: step h must lie in [1e-6, 1e-3], got " + std::to_string(options.step));
  }

  zero_grads(params);
  Var<double> root = loss();
  if (!std::isfinite(root.item())) throw GradCheckError("grad_check: loss is non-finite at the base point");
  backward(root);
  root = Var<double>();

  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    analytic.push_back(p.var.has_grad() ? p.var.grad() : Tensor<double>(p.var.shape()));
  }
  zero_grads(params);

  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  report.tolerance = options.tolerance;
  const double h = options.step;

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Var<double> var = params[pi].var;
    const std::size_t n = var.numel();
    std::vector<std::size_t> probes(n);
    std::iota(probes.begin(), probes.end(), std::size_t{0});
    if (options.max_probes && n > options.max_probes) {
      std::shuffle(probes.begin(), probes.end(), rng);
      probes.resize(options.max_probes);
      std::sort(probes.begin(), probes.end());
    }

    GradCheckEntry entry;
    entry.name = params[pi].name;
    NoGradGuard no_grad;
    for (std::size_t idx : probes) {
      double& slot = var.mutable_value()[idx];
      const double saved = slot;
      slot = saved + h;
      const double f_plus = loss().item();
      slot = saved - h;
      const double f_minus = loss().item();
      slot = saved;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
        throw GradCheckError("grad_check: non-finite loss while probing " + entry.name + "[" +
                             std::to_string(idx) + "]");
      }
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double a = analytic[pi][idx];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, abs_err / denom);
    }
    entry.probed = probes.size();
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace mjepa
