#include "geofuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace geofuse {

namespace {
constexpr double kStep = 1e-5;
constexpr int kKinkRefinements = 2;
// Bound on the rounding error of one objective value relative to
// max(1, |f|), about a hundred ulps.
constexpr double kRounding = 2e-14;
}  // namespace

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
  return worst;
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os.precision(3);
  for (const auto& e : entries) {
    os << (e.max_rel_error <= tolerance ? "ok   " : "FAIL ") << e.name
       << " rel=" << std::scientific << e.max_rel_error << " probed=" << e.probed;
    if (e.refined > 0) os << " refined=" << e.refined;
    if (e.max_rel_error > tolerance) {
      os << " worst[" << e.worst_index << "] analytic=" << e.worst_analytic
         << " numeric=" << e.worst_numeric;
    }
    os << "\n";
  }
  return os.str();
}

GradCheckReport grad_check(const std::function<double()>& objective,
                           std::vector<GradCheckInput> inputs, double tolerance) {
  GradCheckReport report;
  report.tolerance = tolerance;
  const double f_scale = std::max(1.0, std::abs(objective()));
  for (auto& in : inputs) {
    if (!in.value || !in.value->same_shape(in.analytic)) {
      throw ShapeError("grad_check: analytic gradient shape mismatch for " + in.name);
    }
    std::vector<std::size_t> idx = in.indices;
    if (idx.empty()) {
      idx.resize(in.value->size());
      std::iota(idx.begin(), idx.end(), 0);
    }
    std::vector<double> numeric(idx.size()), wide(idx.size()), noise(idx.size());
    std::vector<double> steps(idx.size());
    auto central = [&](std::size_t j, double h) {
      double& x = (*in.value)[idx[j]];
      const double saved = x;
      x = saved + h;
      const double up = objective();
      x = saved - h;
      const double down = objective();
      x = saved;
      return (up - down) / (2.0 * h);
    };
    auto probe = [&](std::size_t j, double h) {
      wide[j] = central(j, h);
      numeric[j] = central(j, 0.5 * h);
      noise[j] = kRounding * f_scale / (0.5 * h);
    };
    for (std::size_t j = 0; j < idx.size(); ++j) {
      steps[j] = kStep * std::max(1.0, std::abs((*in.value)[idx[j]]));
      probe(j, steps[j]);
    }
    auto max_scale = [&] {
      double scale = 0.0;
      for (std::size_t j = 0; j < idx.size(); ++j) {
        scale = std::max({scale, std::abs(numeric[j]), std::abs(in.analytic[idx[j]])});
      }
      return scale;
    };
    // Quotients at h and h/2 that disagree beyond the tolerance and beyond
    // their rounding noise mean a kink of a piecewise linear op lies within
    // the wider step; such elements are re-probed with a tenfold smaller step.
    std::size_t refined = 0;
    const double kink_floor = 1e-6 * max_scale();
    for (std::size_t j = 0; j < idx.size(); ++j) {
      double h = steps[j];
      for (int attempt = 0; attempt < kKinkRefinements; ++attempt) {
        const double gap = std::abs(wide[j] - numeric[j]);
        const double allowed =
            std::max(tolerance * std::max({std::abs(wide[j]), std::abs(numeric[j]), kink_floor}),
                     2.0 * noise[j]);
        if (gap <= allowed) break;
        h *= 0.1;
        probe(j, h);
        ++refined;
      }
    }
    const double scale = max_scale();
    GradCheckEntry entry;
    entry.name = in.name;
    entry.probed = idx.size();
    entry.refined = refined;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const double a = in.analytic[idx[j]];
      const double n = numeric[j];
      const double floor = std::max(noise[j] / tolerance, 1e-6 * scale);
      const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
      if (err > entry.max_rel_error || !std::isfinite(err)) {
        entry.max_rel_error = std::isfinite(err) ? err : INFINITY;
        entry.worst_index = idx[j];
        entry.worst_analytic = a;
        entry.worst_numeric = n;
      }
    }
    if (!(entry.max_rel_error <= tolerance)) report.passed = false;
    report.entries.push_back(entry);
  }
  return report;
}

std::vector<std::size_t> sample_indices(std::size_t size, std::size_t count, Rng& rng) {
  std::vector<std::size_t> all(size);
  std::iota(all.begin(), all.end(), 0);
  if (count >= size) return all;
  rng.shuffle(all.begin(), all.end());
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Tensor<double> random_tensor(const Shape& shape, Rng& rng, double scale) {
  Tensor<double> t(shape);
  for (auto& v : t.storage()) v = scale * rng.normal();
  return t;
}

}  // namespace geofuse
