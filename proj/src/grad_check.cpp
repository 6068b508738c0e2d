#include "charmt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace charmt {

GradCheckReport grad_check(const std::function<Tensor()>& f, ParameterSet& params, double h, double tol,
                           double abs_floor, bool refine) {
  GradCheckReport report;
  report.tolerance = tol;

  params.zero_grad();
  const Tensor loss = f();
  const double base = loss.item();
  backward(loss);
  {
    NoGradGuard no_grad;
    if (f().item() != base) throw std::runtime_error("grad_check: f is not deterministic");
  }

  NoGradGuard no_grad;
  for (const auto& [name, param] : params) {
    Tensor p = param;
    GradCheckEntry entry;
    entry.name = name;
    const std::vector<double> analytic =
        p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end()) : std::vector<double>(p.numel(), 0.0);
    auto values = p.mutable_data();
    auto central = [&](std::size_t i, double step) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = f().item();
      values[i] = saved - step;
      const double down = f().item();
      values[i] = saved;
      return (up - down) / (2.0 * step);
    };
    auto relative = [&](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), abs_floor}); };
    for (std::size_t i = 0; i < values.size(); ++i) {
      double numeric = central(i, h);
      double rel = relative(analytic[i], numeric);
      if (refine && rel > tol) {
        const double fine = central(i, h / 100.0);
        if (relative(analytic[i], fine) <= tol) {
          numeric = fine;
          rel = relative(analytic[i], fine);
          ++entry.refined;
        }
      }
      if (i == 0 || rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.refined += entry.refined;
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace charmt
