#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "tupe/tensor.hpp"

namespace tupe {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

enum class Difference {
  kCentral,       // (f(x + h) - f(x - h)) / 2h
  kExtrapolated,  // central differences at shrinking h, Richardson-extrapolated
};

struct GradCheckOptions {
  Difference method = Difference::kCentral;
  /// h for kCentral, initial h for kExtrapolated.
  double step = 1e-6;
  /// Parameters with more entries than this are checked on a sample.
  std::size_t max_entries_per_param = 10000;
  std::uint64_t sample_seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  /// Worst relative error per parameter, in the order given.
  std::vector<std::pair<std::string, double>> per_param;
};

/// Compares reverse-mode gradients of the scalar `loss` against central
/// differences for every entry of every parameter. kExtrapolated follows
/// Ridders' tableau (h shrinks by 1.4 per level, at most 10 levels) and
/// suits losses whose gradient entries span many orders of magnitude. The relative error of an
/// entry is |a - n| / max(|a|, |n|, 1e-8).
///
/// `loss` must rebuild its graph from the current parameter values on each
/// call; parameters are perturbed in place and restored afterwards.
/// Throws NumericError naming the parameter when a gradient or loss value
/// is non-finite.
GradCheckResult grad_check(const std::function<Tensor()>& loss,
                           const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options = {});

}  // namespace tupe
