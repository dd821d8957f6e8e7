#pragma once

#include <functional>
#include <string>
#include <vector>

#include "geofuse/rng.hpp"
#include "geofuse/tensor.hpp"

namespace geofuse {

/// One tensor to perturb. `value` is modified in place while probing and
/// restored afterwards; `analytic` holds the VJP-derived gradient.
struct GradCheckInput {
  std::string name;
  Tensor<double>* value = nullptr;
  Tensor<double> analytic;
  std::vector<std::size_t> indices;  // empty = every element
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t probed = 0;
  std::size_t refined = 0;  // step reductions caused by kinks
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  bool passed = true;
  double max_rel_error() const;
  std::string summary() const;
};

/// Central differences with per-element step h = 1e-5 * max(1, |x|), taken
/// at h and h/2. When the two quotients disagree beyond the tolerance the
/// step straddles a kink and is reduced tenfold, at most twice. The error
/// for an element is |a - n| / max(|a|, |n|, floor). The floor is the larger
/// of 1e-6 of the input's largest gradient magnitude and the rounding noise
/// of the quotient divided by the tolerance, so that magnitudes the quotient
/// cannot resolve to the tolerance are compared absolutely.
GradCheckReport grad_check(const std::function<double()>& objective,
                           std::vector<GradCheckInput> inputs, double tolerance);

/// Up to `count` distinct random flat indices into a tensor of `size`.
std::vector<std::size_t> sample_indices(std::size_t size, std::size_t count, Rng& rng);

/// <a, b> for the random-cotangent projection used to check VJPs.
double dot(const Tensor<double>& a, const Tensor<double>& b);

Tensor<double> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0);

}  // namespace geofuse
