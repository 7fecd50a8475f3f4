#include "tes/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace tes {

namespace {

std::atomic<std::size_t> g_kl_clamps{0};

constexpr double kProbabilityFloor = 1e-12;

Tape& same_tape(std::initializer_list<const Var*> vars) {
  Tape* tape = nullptr;
  for (const Var* v : vars) {
    if (!v->valid()) throw std::invalid_argument("operation on an unbound Var");
    if (tape && &v->tape() != tape)
      throw std::invalid_argument("operation mixes Vars from different tapes");
    tape = &v->tape();
  }
  return *tape;
}

void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.shape().size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     " input, got " + shape_string(v.shape()));
}

/// Rows and columns of a rank-1 ([k] as one row) or rank-2 tensor.
std::pair<std::size_t, std::size_t> as_matrix(const Shape& shape, const char* op) {
  if (shape.size() == 1) return {1, shape[0]};
  if (shape.size() == 2) return {shape[0], shape[1]};
  throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + shape_string(shape));
}

template <class F>
Var unary(const Var& x, Tensor out, F&& local_grad) {
  if (!x.requires_grad()) return x.tape().record(std::move(out), {x}, {});
  auto xv = x.tape().shared_value(x);
  auto yv = std::make_shared<const Tensor>(out);
  return x.tape().record(
      std::move(out), {x},
      [xv, yv, local_grad](const Tensor& g, std::span<Tensor* const> in) {
        if (!in[0]) return;
        auto& gx = *in[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * local_grad((*xv)[i], (*yv)[i]);
      });
}

// Visits every (output row, input row, output column range) touched by one
// kernel tap of a strided, zero-padded cross-correlation.
template <class F>
void for_each_tap_row(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w,
                      std::size_t ky, std::size_t kx, std::size_t stride, std::size_t padding,
                      F&& body) {
  const long s = static_cast<long>(stride);
  const long p = static_cast<long>(padding);
  // ox range such that 0 <= ox*s + kx - p < in_w
  long ox_lo = 0;
  if (p > static_cast<long>(kx)) ox_lo = (p - static_cast<long>(kx) + s - 1) / s;
  long ox_hi = (static_cast<long>(in_w) - 1 + p - static_cast<long>(kx));
  if (ox_hi < 0) return;
  ox_hi = std::min<long>(ox_hi / s, static_cast<long>(out_w) - 1);
  if (ox_lo > ox_hi) return;
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const long iy = static_cast<long>(oy) * s + static_cast<long>(ky) - p;
    if (iy < 0 || iy >= static_cast<long>(in_h)) continue;
    const long ix0 = ox_lo * s + static_cast<long>(kx) - p;
    body(oy, static_cast<std::size_t>(iy), static_cast<std::size_t>(ox_lo),
         static_cast<std::size_t>(ox_hi + 1), static_cast<std::size_t>(ix0));
  }
}

}  // namespace

// ---- Var / Tape --------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::make_shared<const Tensor>(std::move(value));
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::borrow(const Tensor& value, bool requires_grad) {
  Node node;
  node.value = std::shared_ptr<const Tensor>(std::shared_ptr<const Tensor>{}, &value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::make_shared<const Tensor>(std::move(value));
  node.is_leaf = false;
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw std::invalid_argument("input Var belongs to another tape");
    node.inputs.push_back(in.id_);
    node.requires_grad = node.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor(node.value->shape(), 0.0);
  return node.grad;
}

const Tensor& Tape::grad(std::size_t id) const {
  const Node& node = nodes_[id];
  if (node.grad.empty()) {
    zero_scratch_ = Tensor(node.value->shape(), 0.0);
    return zero_scratch_;
  }
  return node.grad;
}

void Tape::zero_grad() {
  for (Node& node : nodes_) node.grad = Tensor();
}

std::size_t Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
  if (value(loss.id_).size() != 1)
    throw ShapeError("backward requires a scalar loss, got shape " +
                     shape_string(value(loss.id_).shape()));
  for (Node& node : nodes_)
    if (!node.is_leaf) node.grad = Tensor();
  if (!nodes_[loss.id_].requires_grad) return 0;

  grad_buffer(loss.id_)[0] += 1.0;
  std::size_t visited = 0;
  std::vector<Tensor*> in_grads;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.is_leaf || !node.backward || node.grad.empty()) continue;
    in_grads.clear();
    for (std::size_t in : node.inputs)
      in_grads.push_back(nodes_[in].requires_grad ? &grad_buffer(in) : nullptr);
    node.backward(node.grad, in_grads);
    ++visited;
  }
  return visited;
}

// ---- dense layers --------------------------------------------------------------

Var affine(const Var& input, const Var& weight, const Var& bias) {
  Tape& tape = same_tape({&input, &weight, &bias});
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  const Shape& bs = bias.shape();
  if (xs.size() != 2 || ws.size() != 2 || bs.size() != 1 || xs[1] != ws[0] || bs[0] != ws[1])
    throw ShapeError("affine: input " + shape_string(xs) + " incompatible with weight " +
                     shape_string(ws) + " and bias " + shape_string(bs));
  const std::size_t batch = xs[0], in = xs[1], out = ws[1];
  const Tensor& x = input.value();
  const Tensor& w = weight.value();
  const Tensor& b = bias.value();
  Tensor y({batch, out});
  for (std::size_t r = 0; r < batch; ++r) {
    double* yr = &y[r * out];
    for (std::size_t o = 0; o < out; ++o) yr[o] = b[o];
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = x[r * in + i];
      if (xi == 0.0) continue;
      const double* wi = &w[i * out];
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wi[o];
    }
  }
  auto xv = tape.shared_value(input);
  auto wv = tape.shared_value(weight);
  return tape.record(std::move(y), {input, weight, bias},
                     [xv, wv, batch, in, out](const Tensor& g, std::span<Tensor* const> grads) {
                       const Tensor& x = *xv;
                       const Tensor& w = *wv;
                       if (Tensor* gx = grads[0]) {
                         for (std::size_t r = 0; r < batch; ++r)
                           for (std::size_t i = 0; i < in; ++i) {
                             double acc = 0.0;
                             const double* wi = &w[i * out];
                             const double* gr = &g[r * out];
                             for (std::size_t o = 0; o < out; ++o) acc += gr[o] * wi[o];
                             (*gx)[r * in + i] += acc;
                           }
                       }
                       if (Tensor* gw = grads[1]) {
                         for (std::size_t r = 0; r < batch; ++r)
                           for (std::size_t i = 0; i < in; ++i) {
                             const double xi = x[r * in + i];
                             if (xi == 0.0) continue;
                             double* gwi = &(*gw)[i * out];
                             const double* gr = &g[r * out];
                             for (std::size_t o = 0; o < out; ++o) gwi[o] += xi * gr[o];
                           }
                       }
                       if (Tensor* gb = grads[2]) {
                         for (std::size_t r = 0; r < batch; ++r)
                           for (std::size_t o = 0; o < out; ++o) (*gb)[o] += g[r * out + o];
                       }
                     });
}

Var conv2d(const Var& input, const Var& kernel, const Var& bias, std::size_t stride,
           std::size_t padding) {
  Tape& tape = same_tape({&input, &kernel, &bias});
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (xs.size() != 4 || ks.size() != 4 || bias.shape().size() != 1 || xs[1] != ks[1] ||
      bias.shape()[0] != ks[0])
    throw ShapeError("conv2d: input " + shape_string(xs) + " incompatible with kernel " +
                     shape_string(ks) + " and bias " + shape_string(bias.shape()));
  const std::size_t batch = xs[0], cin = xs[1], in_h = xs[2], in_w = xs[3];
  const std::size_t cout = ks[0], kh = ks[2], kw = ks[3];
  if (in_h + 2 * padding < kh || in_w + 2 * padding < kw)
    throw ShapeError("conv2d: kernel " + shape_string(ks) + " larger than padded input " +
                     shape_string(xs));
  const std::size_t out_h = (in_h + 2 * padding - kh) / stride + 1;
  const std::size_t out_w = (in_w + 2 * padding - kw) / stride + 1;

  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  const Tensor& b = bias.value();
  Tensor y({batch, cout, out_h, out_w});
  const std::size_t in_plane = in_h * in_w, out_plane = out_h * out_w;

  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < cout; ++o) {
      double* yp = &y[(n * cout + o) * out_plane];
      std::fill(yp, yp + out_plane, b[o]);
      for (std::size_t c = 0; c < cin; ++c) {
        const double* xp = &x[(n * cin + c) * in_plane];
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const double wv = k[((o * cin + c) * kh + ky) * kw + kx];
            for_each_tap_row(in_h, in_w, out_h, out_w, ky, kx, stride, padding,
                             [&](std::size_t oy, std::size_t iy, std::size_t ox0, std::size_t ox1,
                                 std::size_t ix0) {
                               double* yr = yp + oy * out_w;
                               const double* xr = xp + iy * in_w + ix0;
                               for (std::size_t ox = ox0, j = 0; ox < ox1; ++ox, j += stride)
                                 yr[ox] += wv * xr[j];
                             });
          }
      }
    }

  auto xv = tape.shared_value(input);
  auto kv = tape.shared_value(kernel);
  return tape.record(
      std::move(y), {input, kernel, bias},
      [=](const Tensor& g, std::span<Tensor* const> grads) {
        const Tensor& x = *xv;
        const Tensor& k = *kv;
        Tensor* gx = grads[0];
        Tensor* gk = grads[1];
        Tensor* gb = grads[2];
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t o = 0; o < cout; ++o) {
            const double* gp = &g[(n * cout + o) * out_plane];
            if (gb) {
              double acc = 0.0;
              for (std::size_t i = 0; i < out_plane; ++i) acc += gp[i];
              (*gb)[o] += acc;
            }
            if (!gx && !gk) continue;
            for (std::size_t c = 0; c < cin; ++c) {
              const std::size_t in_off = (n * cin + c) * in_plane;
              for (std::size_t ky = 0; ky < kh; ++ky)
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const std::size_t widx = ((o * cin + c) * kh + ky) * kw + kx;
                  const double wv = k[widx];
                  double wacc = 0.0;
                  for_each_tap_row(
                      in_h, in_w, out_h, out_w, ky, kx, stride, padding,
                      [&](std::size_t oy, std::size_t iy, std::size_t ox0, std::size_t ox1,
                          std::size_t ix0) {
                        const double* gr = gp + oy * out_w;
                        const std::size_t row = in_off + iy * in_w + ix0;
                        if (gx) {
                          double* gxr = &(*gx)[row];
                          for (std::size_t ox = ox0, j = 0; ox < ox1; ++ox, j += stride)
                            gxr[j] += wv * gr[ox];
                        }
                        if (gk) {
                          const double* xr = &x[row];
                          for (std::size_t ox = ox0, j = 0; ox < ox1; ++ox, j += stride)
                            wacc += xr[j] * gr[ox];
                        }
                      });
                  if (gk) (*gk)[widx] += wacc;
                }
            }
          }
      });
}

Var upsample2x(const Var& input) {
  require_rank(input, 4, "upsample2x");
  const Shape& xs = input.shape();
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  const Tensor& x = input.value();
  Tensor y({xs[0], xs[1], 2 * h, 2 * w});
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t r = 0; r < 2 * h; ++r)
      for (std::size_t c = 0; c < 2 * w; ++c)
        y[(p * 2 * h + r) * 2 * w + c] = x[(p * h + r / 2) * w + c / 2];
  return input.tape().record(std::move(y), {input},
                             [=](const Tensor& g, std::span<Tensor* const> grads) {
                               if (!grads[0]) return;
                               Tensor& gx = *grads[0];
                               for (std::size_t p = 0; p < planes; ++p)
                                 for (std::size_t r = 0; r < 2 * h; ++r)
                                   for (std::size_t c = 0; c < 2 * w; ++c)
                                     gx[(p * h + r / 2) * w + c / 2] +=
                                         g[(p * 2 * h + r) * 2 * w + c];
                             });
}

// ---- elementwise -----------------------------------------------------------------

Var relu(const Var& x) {
  Tensor y = x.value();
  for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
  return unary(x, std::move(y), [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Var tanh_op(const Var& x) {
  Tensor y = x.value();
  for (double& v : y.data()) v = std::tanh(v);
  return unary(x, std::move(y), [](double, double out) { return 1.0 - out * out; });
}

Var scale(const Var& x, double factor) {
  Tensor y = x.value();
  for (double& v : y.data()) v *= factor;
  return unary(x, std::move(y), [factor](double, double) { return factor; });
}

Var clamp(const Var& x, double lo, double hi) {
  Tensor y = x.value();
  for (double& v : y.data()) v = std::clamp(v, lo, hi);
  return unary(x, std::move(y),
               [lo, hi](double in, double) { return in >= lo && in <= hi ? 1.0 : 0.0; });
}

Var linf_project(const Var& x, std::span<const double> center, double eps) {
  Tensor y = x.value();
  project_linf_ball(y.data(), center, eps);
  return x.tape().record(std::move(y), {x}, [](const Tensor& g, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += g[i];
  });
}

Var reshape(const Var& x, Shape shape) {
  if (shape_size(shape) != x.value().size())
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                     shape_string(shape));
  Tensor y = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(y), {x}, [](const Tensor& g, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += g[i];
  });
}

Var flatten(const Var& x) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("flatten: empty shape");
  return reshape(x, {s[0], x.value().size() / s[0]});
}

namespace {

template <class Fwd, class Ga, class Gb>
Var binary(const Var& a, const Var& b, const char* op, Fwd fwd, Ga ga, Gb gb) {
  Tape& tape = same_tape({&a, &b});
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(av[i], bv[i]);
  auto ap = tape.shared_value(a);
  auto bp = tape.shared_value(b);
  return tape.record(std::move(y), {a, b},
                     [ap, bp, ga, gb](const Tensor& g, std::span<Tensor* const> grads) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         if (grads[0]) (*grads[0])[i] += g[i] * ga((*ap)[i], (*bp)[i]);
                         if (grads[1]) (*grads[1])[i] += g[i] * gb((*ap)[i], (*bp)[i]);
                       }
                     });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var sum(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  return x.tape().record(Tensor::scalar(acc), {x},
                         [](const Tensor& g, std::span<Tensor* const> grads) {
                           if (!grads[0]) return;
                           for (double& v : grads[0]->data()) v += g[0];
                         });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

// ---- softmax family ----------------------------------------------------------------

Var softmax(const Var& x) {
  const auto [rows, cols] = as_matrix(x.shape(), "softmax");
  Tensor y = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = &y[r * cols];
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) row[j] /= z;
  }
  if (!x.requires_grad()) return x.tape().record(std::move(y), {x}, {});
  auto yv = std::make_shared<const Tensor>(y);
  return x.tape().record(std::move(y), {x},
                         [yv, rows, cols](const Tensor& g, std::span<Tensor* const> grads) {
                           if (!grads[0]) return;
                           const Tensor& y = *yv;
                           for (std::size_t r = 0; r < rows; ++r) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < cols; ++j)
                               dot += g[r * cols + j] * y[r * cols + j];
                             for (std::size_t j = 0; j < cols; ++j)
                               (*grads[0])[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - dot);
                           }
                         });
}

Var log_softmax(const Var& x) {
  const auto [rows, cols] = as_matrix(x.shape(), "log_softmax");
  Tensor y = x.value();
  Tensor p(y.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = &y[r * cols];
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] -= lse;
      p[r * cols + j] = std::exp(row[j]);
    }
  }
  auto pv = std::make_shared<const Tensor>(std::move(p));
  return x.tape().record(std::move(y), {x},
                         [pv, rows, cols](const Tensor& g, std::span<Tensor* const> grads) {
                           if (!grads[0]) return;
                           for (std::size_t r = 0; r < rows; ++r) {
                             double total = 0.0;
                             for (std::size_t j = 0; j < cols; ++j) total += g[r * cols + j];
                             for (std::size_t j = 0; j < cols; ++j)
                               (*grads[0])[r * cols + j] +=
                                   g[r * cols + j] - (*pv)[r * cols + j] * total;
                           }
                         });
}

// ---- losses ----------------------------------------------------------------------------

Var cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
  const auto [rows, cols] = as_matrix(logits.shape(), "cross_entropy");
  if (labels.size() != rows)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  for (std::size_t label : labels)
    if (label >= cols)
      throw std::out_of_range("cross_entropy: label " + std::to_string(label) +
                              " outside [0," + std::to_string(cols) + ")");
  const Tensor& x = logits.value();
  Tensor p(Shape{rows, cols});
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &x[r * cols];
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    loss -= row[labels[r]] - lse;
    for (std::size_t j = 0; j < cols; ++j) p[r * cols + j] = std::exp(row[j] - lse);
  }
  loss /= static_cast<double>(rows);
  auto pv = std::make_shared<const Tensor>(std::move(p));
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return logits.tape().record(
      Tensor::scalar(loss), {logits},
      [pv, lab, rows, cols](const Tensor& g, std::span<Tensor* const> grads) {
        if (!grads[0]) return;
        const double s = g[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < cols; ++j)
            (*grads[0])[r * cols + j] +=
                s * ((*pv)[r * cols + j] - (j == lab[r] ? 1.0 : 0.0));
      });
}

std::size_t kl_clamp_count() { return g_kl_clamps.load(); }

Var kl_divergence(const Var& target, const Var& predicted) {
  Tape& tape = same_tape({&target, &predicted});
  if (target.shape() != predicted.shape())
    throw ShapeError("kl_divergence: shape mismatch " + shape_string(target.shape()) + " vs " +
                     shape_string(predicted.shape()));
  const auto [rows, cols] = as_matrix(target.shape(), "kl_divergence");
  const Tensor& t = target.value();
  const Tensor& p = predicted.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double st = 0.0, sp = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double tv = t[r * cols + j], pv = p[r * cols + j];
      if (!(tv >= 0.0) || !(pv >= 0.0))
        throw std::invalid_argument("kl_divergence: negative or NaN probability");
      st += tv;
      sp += pv;
    }
    if (std::abs(st - 1.0) > 1e-9 || std::abs(sp - 1.0) > 1e-9)
      throw std::invalid_argument("kl_divergence: arguments must each sum to 1 within 1e-9");
  }
  // Clamped copies drive both the value and the backward rule.
  Tensor pc = p;
  Tensor tc = t;
  double value = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] > 0.0 && pc[i] == 0.0) {
      pc[i] = kProbabilityFloor;
      g_kl_clamps.fetch_add(1, std::memory_order_relaxed);
    }
    if (tc[i] == 0.0) tc[i] = kProbabilityFloor;
    if (t[i] > 0.0) value += t[i] * (std::log(t[i]) - std::log(pc[i]));
  }
  auto tv = tape.shared_value(target);
  auto pcv = std::make_shared<const Tensor>(std::move(pc));
  auto tcv = std::make_shared<const Tensor>(std::move(tc));
  return tape.record(Tensor::scalar(value), {target, predicted},
                     [tv, pcv, tcv](const Tensor& g, std::span<Tensor* const> grads) {
                       const Tensor& t = *tv;
                       for (std::size_t i = 0; i < t.size(); ++i) {
                         if (grads[0])
                           (*grads[0])[i] +=
                               g[0] * (std::log((*tcv)[i]) - std::log((*pcv)[i]) + 1.0);
                         if (grads[1] && t[i] > 0.0) (*grads[1])[i] -= g[0] * t[i] / (*pcv)[i];
                       }
                     });
}

namespace {

// Index of the largest entry excluding `skip`; ties resolve to the lowest index.
std::size_t argmax_excluding(const double* row, std::size_t cols, std::size_t skip) {
  std::size_t best = cols;
  for (std::size_t j = 0; j < cols; ++j) {
    if (j == skip) continue;
    if (best == cols || row[j] > row[best]) best = j;
  }
  return best;
}

Var cw_loss(const Var& logits, std::span<const std::size_t> classes, double margin,
            bool targeted, const char* op) {
  const auto [rows, cols] = as_matrix(logits.shape(), op);
  if (cols < 2) throw ShapeError(std::string(op) + ": needs at least two classes");
  if (classes.size() != rows)
    throw ShapeError(std::string(op) + ": class count does not match batch");
  const Tensor& x = logits.value();
  // Per row: active (unclipped) flag and the competing index.
  std::vector<std::size_t> other(rows);
  std::vector<char> active(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (classes[r] >= cols) throw std::out_of_range(std::string(op) + ": class out of range");
    const double* row = &x[r * cols];
    other[r] = argmax_excluding(row, cols, classes[r]);
    const double m = targeted ? row[other[r]] - row[classes[r]] : row[classes[r]] - row[other[r]];
    active[r] = m > -margin;
    total += active[r] ? m : -margin;
  }
  total /= static_cast<double>(rows);
  std::vector<std::size_t> cls(classes.begin(), classes.end());
  return logits.tape().record(
      Tensor::scalar(total), {logits},
      [=](const Tensor& g, std::span<Tensor* const> grads) {
        if (!grads[0]) return;
        const double s = g[0] / static_cast<double>(rows);
        const double sign = targeted ? -1.0 : 1.0;
        for (std::size_t r = 0; r < rows; ++r) {
          if (!active[r]) continue;
          (*grads[0])[r * cols + cls[r]] += sign * s;
          (*grads[0])[r * cols + other[r]] -= sign * s;
        }
      });
}

}  // namespace

Var cw_loss_untargeted(const Var& logits, std::span<const std::size_t> labels, double margin) {
  return cw_loss(logits, labels, margin, false, "cw_loss_untargeted");
}

Var cw_loss_targeted(const Var& logits, std::span<const std::size_t> targets, double margin) {
  return cw_loss(logits, targets, margin, true, "cw_loss_targeted");
}

Var cw_loss_untargeted(const Var& logits, std::size_t label, double margin) {
  return cw_loss_untargeted(logits, std::span<const std::size_t>(&label, 1), margin);
}

Var cw_loss_targeted(const Var& logits, std::size_t target, double margin) {
  return cw_loss_targeted(logits, std::span<const std::size_t>(&target, 1), margin);
}

}  // namespace tes
