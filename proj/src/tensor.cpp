#include "subformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

#include "subformer/errors.hpp"

namespace subformer {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not hold " + std::to_string(values.size()) +
                         " values");
  }
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

std::span<double> Tensor::mutable_grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() const {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>(*impl_);
  return Tensor(std::move(impl));
}

// ---- Tape -----------------------------------------------------------------

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(Tensor output, std::function<void()> backward) {
  nodes_.push_back(Node{std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("backward() on a loss that does not require grad");
  const bool on_tape =
      std::any_of(nodes_.begin(), nodes_.end(), [&](const Node& n) { return n.output.same_storage(loss); });
  if (!on_tape) {
    // A bare leaf used as the loss.
    Tensor leaf = loss;
    leaf.mutable_grad()[0] += 1.0;
    return;
  }
  for (Node& node : nodes_) {
    auto g = node.output.mutable_grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
  Tensor seed = loss;
  seed.mutable_grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

void backward(const Tensor& loss) { Tape::current().backward(loss); }

namespace {

bool tracking(const Tensor& t) { return Tape::current().recording() && t.requires_grad(); }

bool tracking(const Tensor& a, const Tensor& b) { return tracking(a) || tracking(b); }

// C[m x n] += A[m x k] * B[k x n]
__attribute__((target_clones("avx2", "default")))
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T, via a transposed copy of B so the
// inner loop runs over contiguous memory.
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  thread_local std::vector<double> bt;
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n);
}

// C[m x n] += A[k x m]^T * B[k x n]
__attribute__((target_clones("avx2", "default")))
void gemm_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Shape replace_last(Shape shape, std::size_t extent) {
  shape.back() = extent;
  return shape;
}

// Broadcast rule shared by the binary elementwise ops.
void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (b.numel() == 1) return;
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  bool ok = bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin());
  if (!ok)
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(bs) + " onto " + shape_string(as));
}

}  // namespace

// ---- matmul family --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (!(a.rank() >= 2 && b.rank() == 2 && a.shape().back() == b.dim(0)))
    throw DimensionError("matmul: dimension mismatch between " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  const std::size_t k = b.dim(0), n = b.dim(1), m = a.numel() / k;
  Tensor out = Tensor::zeros(replace_last(a.shape(), n), tracking(a, b));
  gemm_nn(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
  if (out.requires_grad()) {
    Tape::current().record(out, [a, b, out, m, k, n]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) gemm_nt(g, b.data().data(), a.mutable_grad().data(), m, n, k);
      if (b.requires_grad()) gemm_tn(a.data().data(), g, b.mutable_grad().data(), m, k, n);
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (!(a.rank() >= 2 && b.rank() == 2 && a.shape().back() == b.dim(1)))
    throw DimensionError("matmul_nt: dimension mismatch between " + shape_string(a.shape()) + " and " +
              shape_string(b.shape()) + "^T");
  const std::size_t k = b.dim(1), n = b.dim(0), m = a.numel() / k;
  Tensor out = Tensor::zeros(replace_last(a.shape(), n), tracking(a, b));
  gemm_nt(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
  if (out.requires_grad()) {
    Tape::current().record(out, [a, b, out, m, k, n]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) gemm_nn(g, b.data().data(), a.mutable_grad().data(), m, n, k);
      if (b.requires_grad()) gemm_tn(g, a.data().data(), b.mutable_grad().data(), m, n, k);
    });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (!(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1)))
    throw DimensionError("bmm: dimension mismatch between " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor out = Tensor::zeros({batch, m, n}, tracking(a, b));
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n, out.mutable_data().data() + i * m * n, m, k,
            n);
  }
  if (out.requires_grad()) {
    Tape::current().record(out, [a, b, out, batch, m, k, n]() mutable {
      for (std::size_t i = 0; i < batch; ++i) {
        const double* g = out.grad().data() + i * m * n;
        if (a.requires_grad())
          gemm_nt(g, b.data().data() + i * k * n, a.mutable_grad().data() + i * m * k, m, n, k);
        if (b.requires_grad())
          gemm_tn(a.data().data() + i * m * k, g, b.mutable_grad().data() + i * k * n, m, k, n);
      }
    });
  }
  return out;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  if (!(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2)))
    throw DimensionError("bmm_nt: dimension mismatch between " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
              "^T");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  Tensor out = Tensor::zeros({batch, m, n}, tracking(a, b));
  for (std::size_t i = 0; i < batch; ++i) {
    gemm_nt(a.data().data() + i * m * k, b.data().data() + i * n * k, out.mutable_data().data() + i * m * n, m, k,
            n);
  }
  if (out.requires_grad()) {
    Tape::current().record(out, [a, b, out, batch, m, k, n]() mutable {
      for (std::size_t i = 0; i < batch; ++i) {
        const double* g = out.grad().data() + i * m * n;
        if (a.requires_grad())
          gemm_nn(g, b.data().data() + i * n * k, a.mutable_grad().data() + i * m * k, m, n, k);
        if (b.requires_grad())
          gemm_tn(g, a.data().data() + i * m * k, b.mutable_grad().data() + i * n * k, m, n, k);
      }
    });
  }
  return out;
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "add");
  const std::size_t n = a.numel(), nb = b.numel();
  Tensor out = Tensor::zeros(a.shape(), tracking(a, b));
  auto o = out.mutable_data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t base = 0; base < n; base += nb)
    for (std::size_t j = 0; j < nb; ++j) o[base + j] = ad[base + j] + bd[j];
  if (out.requires_grad()) {
    Tape::current().record(out, [a, b, out, n, nb]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t base = 0; base < n; base += nb)
          for (std::size_t j = 0; j < nb; ++j) gb[j] += g[base + j];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "sub");
  const std::size_t n = a.numel(), nb = b.numel();
  Tensor out = Tensor::zeros(a.shape(), tracking(a, b));
  auto o = out.mutable_data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t base = 0; base < n; base += nb)
    for (std::size_t j = 0; j < nb; ++j) o[base + j] = ad[base + j] - bd[j];
  if (out.requires_grad()) {
    Tape::current().record(out, [a, b, out, n, nb]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t base = 0; base < n; base += nb)
          for (std::size_t j = 0; j < nb; ++j) gb[j] -= g[base + j];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "mul");
  const std::size_t n = a.numel(), nb = b.numel();
  Tensor out = Tensor::zeros(a.shape(), tracking(a, b));
  auto o = out.mutable_data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t base = 0; base < n; base += nb)
    for (std::size_t j = 0; j < nb; ++j) o[base + j] = ad[base + j] * bd[j];
  if (out.requires_grad()) {
    Tape::current().record(out, [a, b, out, n, nb]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        auto bd = b.data();
        for (std::size_t base = 0; base < n; base += nb)
          for (std::size_t j = 0; j < nb; ++j) ga[base + j] += g[base + j] * bd[j];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        auto ad = a.data();
        for (std::size_t base = 0; base < n; base += nb)
          for (std::size_t j = 0; j < nb; ++j) gb[j] += g[base + j] * ad[base + j];
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, double b) {
  Tensor out = Tensor::zeros(a.shape(), tracking(a));
  auto o = out.mutable_data();
  auto ad = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] + b;
  if (out.requires_grad()) {
    Tape::current().record(out, [a, out]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out = Tensor::zeros(a.shape(), tracking(a));
  auto o = out.mutable_data();
  auto ad = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * factor;
  if (out.requires_grad()) {
    Tape::current().record(out, [a, out, factor]() mutable {
      auto g = out.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor out = Tensor::scalar(total, tracking(a));
  if (out.requires_grad()) {
    Tape::current().record(out, [a, out]() mutable {
      const double g = out.grad()[0];
      for (double& v : a.mutable_grad()) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---- softmax --------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (!(axis < x.rank()))
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_string(x.shape()));
  const Shape& s = x.shape();
  const std::size_t len = s[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t outer = x.numel() / (len * inner);

  Tensor out = Tensor::zeros(s, tracking(x));
  auto in = x.data();
  auto y = out.mutable_data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < inner; ++r) {
      const std::size_t base = o * len * inner + r;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) peak = std::max(peak, in[base + j * inner]);
      if (peak == -std::numeric_limits<double>::infinity()) continue;  // fully masked slice stays zero
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(in[base + j * inner] - peak);
        y[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) y[base + j * inner] /= total;
    }
  }
  if (out.requires_grad()) {
    Tape::current().record(out, [x, out, outer, inner, len]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.mutable_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t r = 0; r < inner; ++r) {
          const std::size_t base = o * len * inner + r;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x) { return softmax(x, x.rank() - 1); }

// ---- layer norm -----------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(x.rank() >= 1 && gamma.numel() == x.shape().back() && beta.numel() == x.shape().back()))
    throw DimensionError("layer_norm: gamma/beta " + shape_string(gamma.shape()) + "/" + shape_string(beta.shape()) +
              " do not match last axis of " + shape_string(x.shape()));
  const std::size_t d = x.shape().back(), rows = x.numel() / d;
  const bool needs = tracking(x) || tracking(gamma) || tracking(beta);
  Tensor out = Tensor::zeros(x.shape(), needs);
  std::vector<double> normed(x.numel());
  std::vector<double> rstd(rows);
  auto in = x.data();
  auto g = gamma.data();
  auto b = beta.data();
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    rstd[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mu) * inv;
      normed[r * d + j] = xh;
      y[r * d + j] = xh * g[j] + b[j];
    }
  }
  if (needs) {
    Tape::current().record(out, [x, gamma, beta, out, d, rows, normed = std::move(normed),
                                 rstd = std::move(rstd)]() mutable {
      auto gout = out.grad();
      auto gm = gamma.data();
      if (gamma.requires_grad()) {
        auto gg = gamma.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += gout[r * d + j] * normed[r * d + j];
      }
      if (beta.requires_grad()) {
        auto gb = beta.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += gout[r * d + j];
      }
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = gout[r * d + j] * gm[j];
            mean_g += gh;
            mean_gx += gh * normed[r * d + j];
          }
          mean_g *= inv_d;
          mean_gx *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double gh = gout[r * d + j] * gm[j];
            gx[r * d + j] += rstd[r] * (gh - mean_g - normed[r * d + j] * mean_gx);
          }
        }
      }
    });
  }
  return out;
}

// ---- activations ----------------------------------------------------------

Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor out = Tensor::zeros(x.shape(), tracking(x));
  auto in = x.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = in[i];
    y[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  if (out.requires_grad()) {
    Tape::current().record(out, [x, out]() mutable {
      auto g = out.grad();
      auto in = x.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = in[i];
        const double t = std::tanh(kC * (v + kA * v * v * v));
        const double dt = (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
        gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), tracking(x));
  auto in = x.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = in[i] > 0.0 ? in[i] : 0.0;
  if (out.requires_grad()) {
    Tape::current().record(out, [x, out]() mutable {
      auto g = out.grad();
      auto in = x.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (in[i] > 0.0) gx[i] += g[i];
    });
  }
  return out;
}

// ---- indexing and layout --------------------------------------------------

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  if (!(table.rank() == 2))
    throw DimensionError("embedding_lookup: table must be [V x d], got " + shape_string(table.shape()));
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw VocabularyError("token id " + std::to_string(ids[i]) + " at index " + std::to_string(i) +
                            " out of range for vocabulary of " + std::to_string(vocab));
    }
  }
  Tensor out = Tensor::zeros({ids.size(), d}, tracking(table));
  auto src = table.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(src.data() + static_cast<std::size_t>(ids[i]) * d, d, y.data() + i * d);
  if (out.requires_grad()) {
    std::vector<int> rows(ids.begin(), ids.end());
    Tape::current().record(out, [table, out, d, rows = std::move(rows)]() mutable {
      auto g = out.grad();
      auto gt = table.mutable_grad();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        double* dst = gt.data() + static_cast<std::size_t>(rows[i]) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (!(shape_numel(shape) == x.numel()))
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  Tensor out = Tensor::from(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), tracking(x));
  if (out.requires_grad()) {
    Tape::current().record(out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (!(x.rank() == 3 && heads > 0 && x.dim(2) % heads == 0))
    throw DimensionError("split_heads: " + shape_string(x.shape()) + " not divisible into " + std::to_string(heads) + " heads");
  const std::size_t batch = x.dim(0), n = x.dim(1), width = x.dim(2), hd = width / heads;
  Tensor out = Tensor::zeros({batch * heads, n, hd}, tracking(x));
  auto in = x.data();
  auto y = out.mutable_data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < n; ++t)
        std::copy_n(in.data() + (b * n + t) * width + h * hd, hd, y.data() + ((b * heads + h) * n + t) * hd);
  if (out.requires_grad()) {
    Tape::current().record(out, [x, out, batch, heads, n, width, hd]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t t = 0; t < n; ++t)
            for (std::size_t e = 0; e < hd; ++e)
              gx[(b * n + t) * width + h * hd + e] += g[((b * heads + h) * n + t) * hd + e];
    });
  }
  return out;
}

Tensor merge_heads(const Tensor& x, std::size_t heads) {
  if (!(x.rank() == 3 && heads > 0 && x.dim(0) % heads == 0))
    throw DimensionError("merge_heads: " + shape_string(x.shape()) + " not divisible into " + std::to_string(heads) + " heads");
  const std::size_t batch = x.dim(0) / heads, n = x.dim(1), hd = x.dim(2), width = hd * heads;
  Tensor out = Tensor::zeros({batch, n, width}, tracking(x));
  auto in = x.data();
  auto y = out.mutable_data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < n; ++t)
        std::copy_n(in.data() + ((b * heads + h) * n + t) * hd, hd, y.data() + (b * n + t) * width + h * hd);
  if (out.requires_grad()) {
    Tape::current().record(out, [x, out, batch, heads, n, width, hd]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t t = 0; t < n; ++t)
            for (std::size_t e = 0; e < hd; ++e)
              gx[((b * heads + h) * n + t) * hd + e] += g[(b * n + t) * width + h * hd + e];
    });
  }
  return out;
}

Tensor mask_fill(const Tensor& scores, std::span<const unsigned char> allowed, std::size_t heads) {
  if (!(scores.rank() == 3 && heads > 0 && scores.dim(0) % heads == 0))
    throw DimensionError("mask_fill: bad score shape " + shape_string(scores.shape()));
  const std::size_t plane = scores.dim(1) * scores.dim(2);
  const std::size_t batch = scores.dim(0) / heads;
  if (!(allowed.size() == batch * plane))
    throw DimensionError("mask_fill: mask holds " + std::to_string(allowed.size()) +
                                               " entries, scores need " + std::to_string(batch * plane));
  Tensor out = Tensor::zeros(scores.shape(), tracking(scores));
  auto in = scores.data();
  auto y = out.mutable_data();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < scores.dim(0); ++s) {
    const unsigned char* m = allowed.data() + (s / heads) * plane;
    for (std::size_t i = 0; i < plane; ++i) y[s * plane + i] = m[i] ? in[s * plane + i] : kNegInf;
  }
  if (out.requires_grad()) {
    std::vector<unsigned char> flags(allowed.begin(), allowed.end());
    Tape::current().record(out, [scores, out, heads, plane, flags = std::move(flags)]() mutable {
      auto g = out.grad();
      auto gs = scores.mutable_grad();
      for (std::size_t s = 0; s < scores.dim(0); ++s) {
        const unsigned char* m = flags.data() + (s / heads) * plane;
        for (std::size_t i = 0; i < plane; ++i)
          if (m[i]) gs[s * plane + i] += g[s * plane + i];
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  std::vector<double> keep(x.numel());
  const double factor = 1.0 / (1.0 - p);
  for (double& k : keep) k = rng.uniform() >= p ? factor : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(keep)));
}

// ---- loss -----------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, double label_smoothing,
                     std::optional<int> ignore_id) {
  if (!(logits.rank() >= 2))
    throw DimensionError("cross_entropy: logits must be [N x V], got " + shape_string(logits.shape()));
  const std::size_t vocab = logits.shape().back(), rows = logits.numel() / vocab;
  if (!(targets.size() == rows))
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                      std::to_string(rows) + " logit rows");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw ConfigError("label smoothing must lie in [0, 1)");
  if (label_smoothing > 0.0 && vocab < 2) throw ConfigError("label smoothing needs a vocabulary of at least 2");
  const double on = 1.0 - label_smoothing;
  const double off = vocab > 1 ? label_smoothing / static_cast<double>(vocab - 1) : 0.0;

  std::size_t counted = 0;
  for (int t : targets) {
    if (ignore_id && t == *ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab)
      throw VocabularyError("target id " + std::to_string(t) + " out of range for vocabulary of " +
                            std::to_string(vocab));
    ++counted;
  }
  if (counted == 0) throw DataError("cross_entropy: degenerate batch, every position is padding");

  auto in = logits.data();
  std::vector<double> probs(logits.numel(), 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (ignore_id && targets[r] == *ignore_id) continue;
    const double* row = in.data() + r * vocab;
    const double peak = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - peak);
    const double lse = peak + std::log(z);
    double expected = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      probs[r * vocab + j] = std::exp(row[j] - lse);
      expected += (static_cast<int>(j) == targets[r] ? on : off) * row[j];
    }
    total += lse - expected;
  }
  const double inv_count = 1.0 / static_cast<double>(counted);
  Tensor out = Tensor::scalar(total * inv_count, tracking(logits));
  if (out.requires_grad()) {
    std::vector<int> tgt(targets.begin(), targets.end());
    Tape::current().record(out, [logits, out, vocab, rows, on, off, inv_count, ignore_id, tgt = std::move(tgt),
                                 probs = std::move(probs)]() mutable {
      const double g = out.grad()[0] * inv_count;
      auto gl = logits.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        if (ignore_id && tgt[r] == *ignore_id) continue;
        for (std::size_t j = 0; j < vocab; ++j) {
          const double q = static_cast<int>(j) == tgt[r] ? on : off;
          gl[r * vocab + j] += g * (probs[r * vocab + j] - q);
        }
      }
    });
  }
  return out;
}

}  // namespace subformer
