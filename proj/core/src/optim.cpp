#include "tes/optim.hpp"

#include <cmath>
#include <string>

namespace tes {

namespace {

void check(std::span<Tensor* const> params, std::span<const Tensor* const> grads) {
  if (params.size() != grads.size())
    throw ShapeError("optimizer: " + std::to_string(params.size()) + " params but " +
                     std::to_string(grads.size()) + " grads");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i]->shape())
      throw ShapeError("optimizer: param " + shape_string(params[i]->shape()) +
                       " vs grad " + shape_string(grads[i]->shape()));
    if (!grads[i]->all_finite())
      throw NonFiniteGradient("optimizer: non-finite gradient for parameter " +
                              std::to_string(i));
  }
}

}  // namespace

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
              double learning_rate) {
  check(params, grads);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i]->data();
    for (std::size_t j = 0; j < p.size(); ++j) p[j] -= learning_rate * g[j];
  }
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
               AdamState& state, const AdamHyper& hyper, std::span<const double> rates) {
  check(params, grads);
  if (!rates.empty() && rates.size() != params.size())
    throw ShapeError("adam_step: per-parameter rate count mismatch");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape(), 0.0);
      state.v.emplace_back(p->shape(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state size mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double lr = rates.empty() ? hyper.learning_rate : rates[i];
    auto p = params[i]->data();
    auto g = grads[i]->data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
      v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + hyper.epsilon);
    }
  }
}

}  // namespace tes
