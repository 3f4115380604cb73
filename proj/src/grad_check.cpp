#include "tupe/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tupe/rng.hpp"

namespace tupe {

namespace {

double eval_loss(const std::function<Tensor()>& loss, const std::string& param) {
  const double v = loss().item();
  if (!std::isfinite(v)) {
    throw NumericError("grad_check: loss is non-finite while perturbing '" + param + "'");
  }
  return v;
}

// Ridders' extrapolation of central differences; returns the estimate with
// the smallest error bound seen in the tableau.
double extrapolated_difference(const std::function<double(double)>& f, double h0) {
  constexpr int kLevels = 10;
  constexpr double kShrink = 1.4;
  constexpr double kSafe = 2.0;
  double table[kLevels][kLevels];
  double h = h0;
  double best = 0.0;
  double best_err = std::numeric_limits<double>::infinity();
  table[0][0] = (f(h) - f(-h)) / (2.0 * h);
  for (int i = 1; i < kLevels; ++i) {
    h /= kShrink;
    table[0][i] = (f(h) - f(-h)) / (2.0 * h);
    double fac = kShrink * kShrink;
    for (int j = 1; j <= i; ++j) {
      table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
      fac *= kShrink * kShrink;
      const double err = std::max(std::abs(table[j][i] - table[j - 1][i]),
                                  std::abs(table[j][i] - table[j - 1][i - 1]));
      if (err <= best_err) {
        best_err = err;
        best = table[j][i];
      }
    }
    if (std::abs(table[i][i] - table[i - 1][i - 1]) >= kSafe * best_err) break;
  }
  return best;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& loss,
                           const std::vector<NamedTensor>& params,
                           const GradCheckOptions& options) {
  GradCheckResult result;
  std::vector<std::vector<double>> analytic;
  {
    for (const NamedTensor& p : params) p.tensor.node().grad.clear();
    Tensor root = loss();
    if (!std::isfinite(root.item())) throw NumericError("grad_check: loss is non-finite");
    backward(root);
    for (const NamedTensor& p : params) {
      if (!p.tensor.requires_grad() || !p.tensor.is_leaf()) {
        throw std::invalid_argument("grad_check: '" + p.name + "' is not a trainable leaf");
      }
      std::vector<double> g(p.tensor.grad().begin(), p.tensor.grad().end());
      // Parameters the graph never reached have zero gradient.
      if (g.empty()) g.assign(p.tensor.numel(), 0.0);
      for (double v : g) {
        if (!std::isfinite(v)) throw NumericError("grad_check: non-finite gradient in '" + p.name + "'");
      }
      analytic.push_back(std::move(g));
    }
  }

  Rng sampler(options.sample_seed);
  const double h = options.step;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor param = params[pi].tensor;
    const std::string& name = params[pi].name;
    std::span<double> values = param.mutable_data();

    std::vector<std::size_t> entries(values.size());
    std::iota(entries.begin(), entries.end(), 0);
    if (entries.size() > options.max_entries_per_param) {
      // Partial Fisher-Yates keeps the sample deterministic for a given seed.
      for (std::size_t k = 0; k < options.max_entries_per_param; ++k) {
        const std::size_t j = k + sampler.below(entries.size() - k);
        std::swap(entries[k], entries[j]);
      }
      entries.resize(options.max_entries_per_param);
    }

    double worst = 0.0;
    for (std::size_t idx : entries) {
      const double saved = values[idx];
      const auto shifted = [&](double delta) {
        values[idx] = saved + delta;
        const double v = eval_loss(loss, name);
        values[idx] = saved;
        return v;
      };
      const double numeric = options.method == Difference::kCentral
                                 ? (shifted(h) - shifted(-h)) / (2.0 * h)
                                 : extrapolated_difference(shifted, h);
      const double a = analytic[pi][idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++result.entries_checked;
      worst = std::max(worst, rel);
      if (result.worst_param.empty() || rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = name;
        result.worst_index = idx;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
    result.per_param.emplace_back(name, worst);
  }
  return result;
}

}  // namespace tupe
