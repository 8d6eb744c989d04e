#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "csim/tensor.hpp"

namespace csim {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Minimum denominator of the relative error. The effective floor is also
  /// raised to the finite-difference round-off level divided by the
  /// tolerance, so structurally zero gradients are compared absolutely.
  double magnitude_floor = 1e-6;
  /// Entries checked per parameter; 0 checks all of them. When limited, the
  /// entries are spread evenly over the tensor.
  std::size_t max_entries_per_param = 0;
};

struct GradcheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0.0;
  bool pass = true;

  std::vector<std::string> failing() const;
};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences. `f` must rebuild its graph from `params` on every
/// call and be deterministic. Throws EvaluationError if f is non-finite.
GradcheckReport gradcheck(const std::function<Tensor()>& f, std::vector<NamedTensor> params,
                          const GradcheckOptions& options = {});

double relative_error(double analytic, double numeric, double floor);

}  // namespace csim
