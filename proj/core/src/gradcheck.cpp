#include "csim/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "csim/errors.hpp"

namespace csim {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

std::vector<std::string> GradcheckReport::failing() const {
  std::vector<std::string> names;
  for (const auto& e : entries)
    if (!e.pass) names.push_back(e.name);
  return names;
}

namespace {

double evaluate(const std::function<Tensor()>& f) {
  NoGradScope no_grad;
  const double v = f().item();
  if (!std::isfinite(v)) throw EvaluationError("gradcheck: function value is not finite");
  return v;
}

std::vector<std::size_t> pick_entries(std::size_t n, std::size_t limit) {
  std::vector<std::size_t> idx;
  if (limit == 0 || limit >= n) {
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }
  for (std::size_t i = 0; i < limit; ++i) idx.push_back(i * n / limit + (n / limit) / 2);
  return idx;
}

}  // namespace

GradcheckReport gradcheck(const std::function<Tensor()>& f, std::vector<NamedTensor> params,
                          const GradcheckOptions& options) {
  if (options.step <= 0.0) throw ConfigError("gradcheck: step must be positive");

  for (auto& p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  double f0 = 0.0;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = f();
    f0 = loss.item();
    if (!std::isfinite(f0)) throw EvaluationError("gradcheck: function value is not finite");
    tape.backward(loss);
  }
  // Central differences carry round-off of about eps * |f| / h. Gradients
  // below the level where that noise alone would reach the tolerance are
  // compared absolutely.
  const double noise = 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f0)) / options.step;
  const double floor = std::max(options.magnitude_floor, noise / options.tolerance);

  GradcheckReport report;
  for (auto& p : params) {
    GradcheckEntry entry;
    entry.name = p.name;
    std::vector<double> analytic(p.tensor.numel(), 0.0);
    if (p.tensor.has_grad()) {
      auto g = p.tensor.grad();
      analytic.assign(g.begin(), g.end());
    }
    auto values = p.tensor.mutable_values();
    for (std::size_t i : pick_entries(values.size(), options.max_entries_per_param)) {
      const double original = values[i];
      values[i] = original + options.step;
      const double up = evaluate(f);
      values[i] = original - options.step;
      const double down = evaluate(f);
      values[i] = original;
      const double numeric = (up - down) / (2.0 * options.step);
      const double err = relative_error(analytic[i], numeric, floor);
      ++entry.checked;
      if (err > entry.max_rel_error || entry.checked == 1) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
    }
    entry.pass = entry.max_rel_error < options.tolerance;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.pass = report.pass && entry.pass;
    report.entries.push_back(std::move(entry));
    p.tensor.zero_grad();
  }
  return report;
}

}  // namespace csim
