#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "bwcloud/tensor.hpp"

namespace bwtest {

using bwcloud::Var;

inline std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

/// Values bounded away from zero, for checks through relu kinks.
inline std::vector<double> off_zero_values(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(n);
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return v;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients with central differences (step h) for
/// every entry of every input. The scalar objective is a fixed random
/// projection of the op output, so all output entries are exercised.
inline GradCheck grad_check(const std::function<Var(const std::vector<Var>&)>& op, std::vector<Var> inputs, std::uint64_t seed,
                            double h = 1e-5) {
  std::mt19937_64 rng(seed);
  std::vector<double> proj;
  auto objective = [&](const std::vector<Var>& in) {
    const Var y = op(in);
    if (proj.empty()) proj = random_values(rng, y.size());
    return bwcloud::sum(bwcloud::mul(y, Var::constant(y.shape(), proj)));
  };
  for (auto& v : inputs) v.zero_grad();
  bwcloud::backward(objective(inputs));
  GradCheck out;
  for (auto& v : inputs) {
    if (!v.requires_grad()) continue;
    const std::vector<double> analytic = v.has_grad() ? v.grad() : std::vector<double>(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v.value()[i];
      double f[2];
      {
        bwcloud::NoGradGuard guard;
        v.mutable_value()[i] = keep + h;
        f[0] = objective(inputs).item();
        v.mutable_value()[i] = keep - h;
        f[1] = objective(inputs).item();
      }
      v.mutable_value()[i] = keep;
      const double numeric = (f[0] - f[1]) / (2.0 * h);
      const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-4});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic[i] - numeric) / scale);
      ++out.checked;
    }
  }
  return out;
}

inline Var leaf(bwcloud::Shape shape, std::vector<double> values) { return Var::leaf(std::move(shape), std::move(values), true); }

/// Fresh scratch directory under the system temp dir.
inline std::string scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("bwcloud_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace bwtest
