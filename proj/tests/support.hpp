#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "tes/autodiff.hpp"
#include "tes/tensor.hpp"

namespace tes::testing {

/// Builds a scalar loss from leaves placed on a fresh tape.
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

/// |a - b| / max(|a|, |b|, floor). Below the floor, central differences at
/// h = 1e-5 are dominated by rounding (about 1e-11 absolute), so smaller
/// components are held to an absolute bound of floor * tolerance instead.
inline double relative_error(double a, double b, double floor = 1e-4) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double eval_loss(const LossBuilder& build, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t, false));
  return build(tape, leaves).value().item();
}

inline std::vector<Tensor> analytic_grads(const LossBuilder& build, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
  Var loss = build(tape, leaves);
  tape.backward(loss);
  std::vector<Tensor> out;
  for (const auto& v : leaves) out.push_back(v.grad());
  return out;
}

/// Central differences with step h for every entry of every input.
inline std::vector<Tensor> numeric_grads(const LossBuilder& build, std::vector<Tensor> inputs,
                                         double h = 1e-5) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor g(inputs[k].shape());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + h;
      const double up = eval_loss(build, inputs);
      inputs[k][i] = saved - h;
      const double down = eval_loss(build, inputs);
      inputs[k][i] = saved;
      g[i] = (up - down) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Largest relative disagreement between autodiff and central differences.
inline double max_gradient_error(const LossBuilder& build, const std::vector<Tensor>& inputs,
                                 double h = 1e-5) {
  const auto a = analytic_grads(build, inputs);
  const auto n = numeric_grads(build, inputs, h);
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k].size(); ++i) worst = std::max(worst, relative_error(a[k][i], n[k][i]));
  return worst;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() / ("tes-test-" + name + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace tes::testing
