#pragma once

// Dense 2-D tensors with a tape-based reverse-mode differentiator.
//
// Every tensor is rank 2 (scalars are 1x1, vectors are 1xd or nx1). A tensor
// produced by an operation whose inputs live on a Tape is itself recorded on
// that tape; Tape::backward then walks the records in reverse creation order.
// All kernels accumulate each output element in a fixed order that does not
// depend on the element's row position, so a row permutation of the inputs
// yields a bit-identical row permutation of the outputs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

namespace npq::ad {

using Rng = std::mt19937_64;

inline constexpr double kLeakySlope = 0.2;

class Tape;

class Tensor {
 public:
  Tensor() : data_(std::make_shared<std::vector<double>>()) {}

  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(std::make_shared<std::vector<double>>(rows * cols, fill)) {}

  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::make_shared<std::vector<double>>(std::move(data))) {
    if (data_->size() != rows * cols) {
      std::ostringstream os;
      os << "tensor data length " << data_->size() << " does not match shape [" << rows << ", "
         << cols << "]";
      throw std::invalid_argument(os.str());
    }
  }

  static Tensor scalar(double v) { return Tensor(1, 1, std::vector<double>{v}); }
  static Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(1, n, std::move(v));
  }
  static Tensor column(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(n, 1, std::move(v));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return rows_ * cols_; }
  std::array<std::size_t, 2> shape() const { return {rows_, cols_}; }
  bool empty() const { return size() == 0; }

  std::span<const double> data() const { return {data_->data(), data_->size()}; }
  std::span<const double> row_span(std::size_t r) const {
    return {data_->data() + r * cols_, cols_};
  }
  double operator()(std::size_t r, std::size_t c) const { return (*data_)[r * cols_ + c]; }
  double item() const {
    if (size() != 1) throw std::invalid_argument("item() requires a 1x1 tensor");
    return (*data_)[0];
  }

  // Writable view of an untracked tensor. Shared storage is cloned first.
  std::span<double> mutable_data() {
    if (tape_ != nullptr) throw std::logic_error("cannot mutate a tensor recorded on a tape");
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
    return {data_->data(), data_->size()};
  }

  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }

  // Same values, no tape link.
  Tensor detached() const {
    Tensor t;
    t.rows_ = rows_;
    t.cols_ = cols_;
    t.data_ = data_;
    return t;
  }

  bool all_finite() const {
    return std::all_of(data_->begin(), data_->end(), [](double v) { return std::isfinite(v); });
  }

  std::string shape_string() const {
    return "[" + std::to_string(rows_) + ", " + std::to_string(cols_) + "]";
  }

 private:
  friend class Tape;

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

// Receives the output gradient and scatters contributions into the inputs.
using Backward = std::function<void(std::span<const double> out_grad, Tape& tape)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(const Tensor& value) {
    return record(value.detached(), {}, nullptr);
  }

  Tensor record(Tensor value, std::vector<std::size_t> inputs, Backward backward) {
    value.tape_ = this;
    value.node_ = nodes_.size();
    nodes_.push_back(Node{std::move(inputs), std::move(backward), value.rows(), value.cols()});
    grads_.emplace_back();
    return value;
  }

  void accumulate(const Tensor& t, std::span<const double> delta) {
    if (t.tape_ != this) return;
    auto& g = grads_[t.node_];
    if (g.empty()) g.assign(delta.size(), 0.0);
    for (std::size_t k = 0; k < delta.size(); ++k) g[k] += delta[k];
  }

  void backward(const Tensor& loss) {
    if (loss.tape_ != this) throw std::invalid_argument("backward: loss is not recorded on this tape");
    if (loss.size() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got shape " + loss.shape_string());
    }
    for (auto& g : grads_) g.clear();
    visit_order_.clear();
    grads_[loss.node_].assign(1, 1.0);
    for (std::size_t id = loss.node_ + 1; id-- > 0;) {
      if (grads_[id].empty()) continue;
      visit_order_.push_back(id);
      if (nodes_[id].backward) nodes_[id].backward(grads_[id], *this);
    }
  }

  // Gradient of the last backward() with respect to t; zeros if unreachable.
  Tensor grad(const Tensor& t) const {
    if (t.tape_ == this && !grads_[t.node_].empty()) {
      return Tensor(t.rows(), t.cols(), grads_[t.node_]);
    }
    return Tensor(t.rows(), t.cols(), 0.0);
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::size_t>& inputs_of(std::size_t node) const { return nodes_.at(node).inputs; }
  const std::vector<std::size_t>& visit_order() const { return visit_order_; }

 private:
  struct Node {
    std::vector<std::size_t> inputs;
    Backward backward;
    std::size_t rows;
    std::size_t cols;
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::vector<std::size_t> visit_order_;
};

namespace detail {

inline Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (t->tape() == nullptr) continue;
    if (tape != nullptr && tape != t->tape()) {
      throw std::invalid_argument("operands are recorded on different tapes");
    }
    tape = t->tape();
  }
  return tape;
}

inline Tape* common_tape(std::span<const Tensor> inputs) {
  Tape* tape = nullptr;
  for (const Tensor& t : inputs) {
    if (t.tape() == nullptr) continue;
    if (tape != nullptr && tape != t.tape()) {
      throw std::invalid_argument("operands are recorded on different tapes");
    }
    tape = t.tape();
  }
  return tape;
}

[[noreturn]] inline void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                              b.shape_string());
}

inline Tensor finish(Tape* tape, Tensor out, std::vector<std::size_t> inputs, Backward fn) {
  if (tape == nullptr) return out;
  return tape->record(std::move(out), std::move(inputs), std::move(fn));
}

inline std::vector<std::size_t> ids(std::initializer_list<const Tensor*> inputs) {
  std::vector<std::size_t> out;
  for (const Tensor* t : inputs) {
    if (t->on_tape()) out.push_back(t->node());
  }
  return out;
}

// out(n x m) += a(n x k) * b(k x m); per element the sum runs over k in order.
inline void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> out,
                    std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data() + i * m;
    const double* ai = a.data() + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = ai[l];
      const double* bl = b.data() + l * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * bl[j];
    }
  }
}

// out(n x k) += g(n x m) * b(k x m)^T, via an explicit transpose of b so the
// inner loop runs over contiguous output columns.
inline void gemm_nt(std::span<const double> g, std::span<const double> b, std::span<double> out,
                    std::size_t n, std::size_t m, std::size_t k) {
  std::vector<double> bt(m * k);
  for (std::size_t l = 0; l < k; ++l) {
    for (std::size_t j = 0; j < m; ++j) bt[j * k + l] = b[l * m + j];
  }
  gemm_nn(g, bt, out, n, m, k);
}

// out(k x m) += a(n x k)^T * g(n x m)
inline void gemm_tn(std::span<const double> a, std::span<const double> g, std::span<double> out,
                    std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a.data() + i * k;
    const double* gi = g.data() + i * m;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = ai[l];
      double* o = out.data() + l * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * gi[j];
    }
  }
}

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = f(x[k]);
  Tensor result(a.rows(), a.cols(), std::move(out));
  Tape* tape = a.tape();
  return finish(tape, result, ids({&a}), [a, result, df](std::span<const double> g, Tape& t) {
    std::vector<double> d(g.size());
    auto x = a.data();
    auto y = result.data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = g[k] * df(x[k], y[k]);
    t.accumulate(a, d);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) detail::shape_error("matmul", a, b);
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> out(n * m, 0.0);
  detail::gemm_nn(a.data(), b.data(), out, n, k, m);
  Tape* tape = detail::common_tape({&a, &b});
  return detail::finish(tape, Tensor(n, m, std::move(out)), detail::ids({&a, &b}),
                        [a, b, n, k, m](std::span<const double> g, Tape& t) {
                          if (a.on_tape()) {
                            std::vector<double> da(n * k, 0.0);
                            detail::gemm_nt(g, b.data(), da, n, m, k);
                            t.accumulate(a, da);
                          }
                          if (b.on_tape()) {
                            std::vector<double> db(k * m, 0.0);
                            detail::gemm_tn(a.data(), g, db, n, k, m);
                            t.accumulate(b, db);
                          }
                        });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  auto x = a.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = x[i * m + j];
  return detail::finish(a.tape(), Tensor(m, n, std::move(out)), detail::ids({&a}),
                        [a, n, m](std::span<const double> g, Tape& t) {
                          std::vector<double> d(n * m);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < m; ++j) d[i * m + j] = g[j * n + i];
                          t.accumulate(a, d);
                        });
}

inline Tensor reshape(const Tensor& a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.size()) {
    throw std::invalid_argument("reshape: cannot view " + a.shape_string() + " as [" +
                                std::to_string(rows) + ", " + std::to_string(cols) + "]");
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::finish(a.tape(), Tensor(rows, cols, std::move(out)), detail::ids({&a}),
                        [a](std::span<const double> g, Tape& t) { t.accumulate(a, g); });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::shape_error("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = a.data()[k] + b.data()[k];
  Tape* tape = detail::common_tape({&a, &b});
  return detail::finish(tape, Tensor(a.rows(), a.cols(), std::move(out)), detail::ids({&a, &b}),
                        [a, b](std::span<const double> g, Tape& t) {
                          t.accumulate(a, g);
                          t.accumulate(b, g);
                        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::shape_error("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = a.data()[k] - b.data()[k];
  Tape* tape = detail::common_tape({&a, &b});
  return detail::finish(tape, Tensor(a.rows(), a.cols(), std::move(out)), detail::ids({&a, &b}),
                        [a, b](std::span<const double> g, Tape& t) {
                          t.accumulate(a, g);
                          std::vector<double> d(g.begin(), g.end());
                          for (double& v : d) v = -v;
                          t.accumulate(b, d);
                        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::shape_error("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = a.data()[k] * b.data()[k];
  Tape* tape = detail::common_tape({&a, &b});
  return detail::finish(tape, Tensor(a.rows(), a.cols(), std::move(out)), detail::ids({&a, &b}),
                        [a, b](std::span<const double> g, Tape& t) {
                          std::vector<double> d(g.size());
                          if (a.on_tape()) {
                            for (std::size_t k = 0; k < d.size(); ++k) d[k] = g[k] * b.data()[k];
                            t.accumulate(a, d);
                          }
                          if (b.on_tape()) {
                            for (std::size_t k = 0; k < d.size(); ++k) d[k] = g[k] * a.data()[k];
                            t.accumulate(b, d);
                          }
                        });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

// a (n x m) + b (1 x m) broadcast over rows.
inline Tensor add_bias(const Tensor& a, const Tensor& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) detail::shape_error("add_bias", a, b);
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = a.data()[i * m + j] + b.data()[j];
  Tape* tape = detail::common_tape({&a, &b});
  return detail::finish(tape, Tensor(n, m, std::move(out)), detail::ids({&a, &b}),
                        [a, b, n, m](std::span<const double> g, Tape& t) {
                          t.accumulate(a, g);
                          if (b.on_tape()) {
                            std::vector<double> d(m, 0.0);
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < m; ++j) d[j] += g[i * m + j];
                            t.accumulate(b, d);
                          }
                        });
}

// Multiplies row i of a (n x m) by s(i) where s is n x 1.
inline Tensor scale_rows(const Tensor& a, const Tensor& s) {
  if (s.cols() != 1 || s.rows() != a.rows()) detail::shape_error("scale_rows", a, s);
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = a.data()[i * m + j] * s.data()[i];
  Tape* tape = detail::common_tape({&a, &s});
  return detail::finish(tape, Tensor(n, m, std::move(out)), detail::ids({&a, &s}),
                        [a, s, n, m](std::span<const double> g, Tape& t) {
                          if (a.on_tape()) {
                            std::vector<double> d(n * m);
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < m; ++j) d[i * m + j] = g[i * m + j] * s.data()[i];
                            t.accumulate(a, d);
                          }
                          if (s.on_tape()) {
                            std::vector<double> d(n, 0.0);
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < m; ++j) d[i] += g[i * m + j] * a.data()[i * m + j];
                            t.accumulate(s, d);
                          }
                        });
}

// out(i, j) = a(i) + b(j) for column vectors a (n x 1), b (m x 1).
inline Tensor outer_sum(const Tensor& a, const Tensor& b) {
  if (a.cols() != 1 || b.cols() != 1) detail::shape_error("outer_sum", a, b);
  const std::size_t n = a.rows(), m = b.rows();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = a.data()[i] + b.data()[j];
  Tape* tape = detail::common_tape({&a, &b});
  return detail::finish(tape, Tensor(n, m, std::move(out)), detail::ids({&a, &b}),
                        [a, b, n, m](std::span<const double> g, Tape& t) {
                          std::vector<double> da(n, 0.0), db(m, 0.0);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < m; ++j) {
                              da[i] += g[i * m + j];
                              db[j] += g[i * m + j];
                            }
                          t.accumulate(a, da);
                          t.accumulate(b, db);
                        });
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no operands");
  const std::size_t n = parts[0].rows();
  std::size_t m = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != n) detail::shape_error("concat_cols", parts[0], p);
    m += p.cols();
  }
  std::vector<double> out(n * m);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out[i * m + offset + j] = p(i, j);
    offset += p.cols();
  }
  std::vector<std::size_t> in_ids;
  for (const Tensor& p : parts)
    if (p.on_tape()) in_ids.push_back(p.node());
  std::vector<Tensor> kept(parts.begin(), parts.end());
  return detail::finish(detail::common_tape(parts), Tensor(n, m, std::move(out)), std::move(in_ids),
                        [kept, n, m](std::span<const double> g, Tape& t) {
                          std::size_t off = 0;
                          for (const Tensor& p : kept) {
                            if (p.on_tape()) {
                              std::vector<double> d(n * p.cols());
                              for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < p.cols(); ++j)
                                  d[i * p.cols() + j] = g[i * m + off + j];
                              t.accumulate(p, d);
                            }
                            off += p.cols();
                          }
                        });
}

inline Tensor concat_cols(std::initializer_list<Tensor> parts) {
  std::vector<Tensor> v(parts);
  return concat_cols(std::span<const Tensor>(v));
}

// Stacks tensors with equal column counts on top of each other.
inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no operands");
  const std::size_t m = parts[0].cols();
  std::size_t n = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != m) detail::shape_error("concat_rows", parts[0], p);
    n += p.rows();
  }
  std::vector<double> out;
  out.reserve(n * m);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::size_t> in_ids;
  for (const Tensor& p : parts)
    if (p.on_tape()) in_ids.push_back(p.node());
  std::vector<Tensor> kept(parts.begin(), parts.end());
  return detail::finish(detail::common_tape(parts), Tensor(n, m, std::move(out)), std::move(in_ids),
                        [kept](std::span<const double> g, Tape& t) {
                          std::size_t off = 0;
                          for (const Tensor& p : kept) {
                            t.accumulate(p, g.subspan(off, p.size()));
                            off += p.size();
                          }
                        });
}

inline Tensor concat_rows(std::initializer_list<Tensor> parts) {
  std::vector<Tensor> v(parts);
  return concat_rows(std::span<const Tensor>(v));
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(a, [](double x) { return x > 0 ? x : 0.0; },
                       [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& a, double slope = kLeakySlope) {
  return detail::unary(a, [slope](double x) { return x > 0 ? x : slope * x; },
                       [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// Elementwise max; the gradient goes to a where a >= b.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::shape_error("maximum", a, b);
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::max(a.data()[k], b.data()[k]);
  Tape* tape = detail::common_tape({&a, &b});
  return detail::finish(tape, Tensor(a.rows(), a.cols(), std::move(out)), detail::ids({&a, &b}),
                        [a, b](std::span<const double> g, Tape& t) {
                          std::vector<double> da(g.size(), 0.0), db(g.size(), 0.0);
                          for (std::size_t k = 0; k < g.size(); ++k)
                            (a.data()[k] >= b.data()[k] ? da : db)[k] = g[k];
                          t.accumulate(a, da);
                          t.accumulate(b, db);
                        });
}

// Elementwise min; the gradient goes to a where a <= b.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) detail::shape_error("minimum", a, b);
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::min(a.data()[k], b.data()[k]);
  Tape* tape = detail::common_tape({&a, &b});
  return detail::finish(tape, Tensor(a.rows(), a.cols(), std::move(out)), detail::ids({&a, &b}),
                        [a, b](std::span<const double> g, Tape& t) {
                          std::vector<double> da(g.size(), 0.0), db(g.size(), 0.0);
                          for (std::size_t k = 0; k < g.size(); ++k)
                            (a.data()[k] <= b.data()[k] ? da : db)[k] = g[k];
                          t.accumulate(a, da);
                          t.accumulate(b, db);
                        });
}

enum class Axis { Rows = 0, Cols = 1 };

// Softmax along an axis: Axis::Cols normalises each row, Axis::Rows each column.
// An empty tensor maps to an empty tensor.
inline Tensor softmax(const Tensor& a, Axis axis = Axis::Cols) {
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(a.size());
  const bool by_row = axis == Axis::Cols;
  const std::size_t groups = by_row ? n : m, len = by_row ? m : n;
  auto at = [&](std::size_t g, std::size_t k) { return by_row ? g * m + k : k * m + g; };
  for (std::size_t g = 0; g < groups; ++g) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, a.data()[at(g, k)]);
    double z = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      out[at(g, k)] = std::exp(a.data()[at(g, k)] - mx);
      z += out[at(g, k)];
    }
    for (std::size_t k = 0; k < len; ++k) out[at(g, k)] /= z;
  }
  Tensor result(n, m, std::move(out));
  return detail::finish(a.tape(), result, detail::ids({&a}),
                        [a, result, groups, len, by_row, m](std::span<const double> g, Tape& t) {
                          auto at = [&](std::size_t q, std::size_t k) { return by_row ? q * m + k : k * m + q; };
                          std::vector<double> d(g.size());
                          auto y = result.data();
                          for (std::size_t q = 0; q < groups; ++q) {
                            double dot = 0.0;
                            for (std::size_t k = 0; k < len; ++k) dot += g[at(q, k)] * y[at(q, k)];
                            for (std::size_t k = 0; k < len; ++k)
                              d[at(q, k)] = y[at(q, k)] * (g[at(q, k)] - dot);
                          }
                          t.accumulate(a, d);
                        });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::finish(a.tape(), Tensor::scalar(s), detail::ids({&a}),
                        [a](std::span<const double> g, Tape& t) {
                          std::vector<double> d(a.size(), g[0]);
                          t.accumulate(a, d);
                        });
}

inline Tensor mean(const Tensor& a) {
  if (a.empty()) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// Column totals (1 x m). Each column is accumulated in ascending value order,
// so the result is exactly invariant to the order of the rows.
inline Tensor sum_rows(const Tensor& a) {
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(m, 0.0), column(n);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) column[i] = a.data()[i * m + j];
    std::sort(column.begin(), column.end());
    for (double v : column) out[j] += v;
  }
  return detail::finish(a.tape(), Tensor(1, m, std::move(out)), detail::ids({&a}),
                        [a, n, m](std::span<const double> g, Tape& t) {
                          std::vector<double> d(n * m);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < m; ++j) d[i * m + j] = g[j];
                          t.accumulate(a, d);
                        });
}

// Row totals (n x 1).
inline Tensor sum_cols(const Tensor& a) {
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i] += a.data()[i * m + j];
  return detail::finish(a.tape(), Tensor(n, 1, std::move(out)), detail::ids({&a}),
                        [a, n, m](std::span<const double> g, Tape& t) {
                          std::vector<double> d(n * m);
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < m; ++j) d[i * m + j] = g[i];
                          t.accumulate(a, d);
                        });
}

// Row-wise inner product of equally shaped a, b -> n x 1.
inline Tensor row_dot(const Tensor& a, const Tensor& b) {
  return sum_cols(mul(a, b));
}

inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  const std::size_t m = a.cols();
  std::vector<double> out(index.size() * m);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= a.rows()) {
      throw std::out_of_range("gather_rows: row " + std::to_string(index[r]) + " outside " +
                              a.shape_string());
    }
    std::copy_n(a.data().begin() + index[r] * m, m, out.begin() + r * m);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return detail::finish(a.tape(), Tensor(idx.size(), m, std::move(out)), detail::ids({&a}),
                        [a, idx, m](std::span<const double> g, Tape& t) {
                          std::vector<double> d(a.size(), 0.0);
                          for (std::size_t r = 0; r < idx.size(); ++r)
                            for (std::size_t j = 0; j < m; ++j) d[idx[r] * m + j] += g[r * m + j];
                          t.accumulate(a, d);
                        });
}

inline Tensor gather_cols(const Tensor& a, std::span<const std::size_t> index) {
  return transpose(gather_rows(transpose(a), index));
}

inline Tensor row_block(const Tensor& a, std::size_t start, std::size_t count) {
  if (start + count > a.rows()) throw std::out_of_range("row_block: range outside " + a.shape_string());
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), start);
  return gather_rows(a, idx);
}

enum class Reduce { Max, Sum };

// Reduces the rows of `messages` into `segments` buckets given by `segment`.
// Empty buckets yield a zero row. For Max, ties route the gradient to the
// earliest row.
inline Tensor segment_reduce(const Tensor& messages, std::span<const std::size_t> segment,
                             std::size_t segments, Reduce op) {
  if (segment.size() != messages.rows()) {
    throw std::invalid_argument("segment_reduce: " + std::to_string(segment.size()) +
                                " segment ids for " + messages.shape_string());
  }
  const std::size_t m = messages.cols();
  std::vector<double> out(segments * m, 0.0);
  std::vector<std::ptrdiff_t> winner(segments * m, -1);
  auto x = messages.data();
  for (std::size_t r = 0; r < segment.size(); ++r) {
    const std::size_t s = segment[r];
    if (s >= segments) throw std::out_of_range("segment_reduce: segment id out of range");
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t o = s * m + j;
      if (op == Reduce::Sum) {
        out[o] += x[r * m + j];
      } else if (winner[o] < 0 || x[r * m + j] > out[o]) {
        out[o] = x[r * m + j];
        winner[o] = static_cast<std::ptrdiff_t>(r);
      }
    }
  }
  std::vector<std::size_t> seg(segment.begin(), segment.end());
  return detail::finish(messages.tape(), Tensor(segments, m, std::move(out)), detail::ids({&messages}),
                        [messages, seg, winner = std::move(winner), m, op](std::span<const double> g, Tape& t) {
                          std::vector<double> d(messages.size(), 0.0);
                          if (op == Reduce::Sum) {
                            for (std::size_t r = 0; r < seg.size(); ++r)
                              for (std::size_t j = 0; j < m; ++j) d[r * m + j] = g[seg[r] * m + j];
                          } else {
                            for (std::size_t o = 0; o < winner.size(); ++o)
                              if (winner[o] >= 0) d[static_cast<std::size_t>(winner[o]) * m + o % m] += g[o];
                          }
                          t.accumulate(messages, d);
                        });
}

// Log-softmax of a score column within each segment.
inline Tensor segment_log_softmax(const Tensor& scores, std::span<const std::size_t> segment,
                                  std::size_t segments) {
  if (scores.cols() != 1 || segment.size() != scores.rows()) {
    throw std::invalid_argument("segment_log_softmax: expected one segment id per score row");
  }
  const std::size_t n = scores.rows();
  std::vector<double> mx(segments, -std::numeric_limits<double>::infinity()), z(segments, 0.0);
  auto x = scores.data();
  for (std::size_t r = 0; r < n; ++r) mx[segment[r]] = std::max(mx[segment[r]], x[r]);
  for (std::size_t r = 0; r < n; ++r) z[segment[r]] += std::exp(x[r] - mx[segment[r]]);
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) out[r] = x[r] - mx[segment[r]] - std::log(z[segment[r]]);
  Tensor result = Tensor::column(std::move(out));
  std::vector<std::size_t> seg(segment.begin(), segment.end());
  return detail::finish(scores.tape(), result, detail::ids({&scores}),
                        [scores, result, seg, segments](std::span<const double> g, Tape& t) {
                          std::vector<double> gsum(segments, 0.0), d(g.size());
                          for (std::size_t r = 0; r < g.size(); ++r) gsum[seg[r]] += g[r];
                          auto y = result.data();
                          for (std::size_t r = 0; r < g.size(); ++r) d[r] = g[r] - std::exp(y[r]) * gsum[seg[r]];
                          t.accumulate(scores, d);
                        });
}

// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t k = 1; k < values.size(); ++k)
    if (values[k] > values[best]) best = k;
  return best;
}

inline std::vector<std::size_t> argmax_rows(const Tensor& a) {
  std::vector<std::size_t> out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) out[i] = argmax(a.row_span(i));
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

class ParamStore {
 public:
  void add(const std::string& name, Tensor value) {
    if (!values_.emplace(name, value.detached()).second) {
      throw std::invalid_argument("duplicate parameter '" + name + "'");
    }
  }

  bool contains(const std::string& name) const { return values_.count(name) != 0; }

  const Tensor& value(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  Tensor& value(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) out.push_back(k);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : values_) n += v.size();
    return n;
  }

  // name -> {"shape": [rows, cols], "values": [row-major]}
  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, t] : values_) {
      j[name] = {{"shape", {t.rows(), t.cols()}},
                 {"values", std::vector<double>(t.data().begin(), t.data().end())}};
    }
    return j;
  }

  static ParamStore from_json(const nlohmann::json& j) {
    ParamStore store;
    for (const auto& [name, entry] : j.items()) {
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2) throw std::invalid_argument("parameter '" + name + "' must be rank 2");
      store.add(name, Tensor(shape[0], shape[1], entry.at("values").get<std::vector<double>>()));
    }
    return store;
  }

  auto begin() const { return values_.begin(); }
  auto end() const { return values_.end(); }

 private:
  std::map<std::string, Tensor> values_;
};

// Binds parameters of a store to a tape for one forward pass. Without a tape,
// parameters are plain constants and nothing is recorded.
class Context {
 public:
  explicit Context(const ParamStore& store, Tape* tape = nullptr) : store_(&store), tape_(tape) {}

  Tensor param(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Tensor& v = store_->value(name);
    Tensor t = tape_ ? tape_->leaf(v) : v;
    bound_.emplace(name, t);
    return t;
  }

  // Transposed weight, computed once per context.
  Tensor param_t(const std::string& name) {
    const std::string key = name + "^T";
    auto it = bound_.find(key);
    if (it != bound_.end()) return it->second;
    Tensor t = transpose(param(name));
    bound_.emplace(key, t);
    return t;
  }

  Tape* tape() const { return tape_; }
  const ParamStore& store() const { return *store_; }

  // Gradients of every stored parameter after tape->backward(); unreachable or
  // unused parameters get zeros.
  std::map<std::string, Tensor> gradients() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, value] : *store_) {
      auto it = bound_.find(name);
      out.emplace(name, (tape_ && it != bound_.end()) ? tape_->grad(it->second)
                                                      : Tensor(value.rows(), value.cols(), 0.0));
    }
    return out;
  }

 private:
  const ParamStore* store_;
  Tape* tape_;
  std::unordered_map<std::string, Tensor> bound_;
};

inline Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-a, a);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = u(rng);
  return Tensor(rows, cols, std::move(v));
}

// y = x W^T + b with W stored out x in.
class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(std::string name, std::size_t in, std::size_t out)
      : name_(std::move(name)), in_(in), out_(out) {}

  static LinearLayer create(ParamStore& store, const std::string& name, std::size_t in,
                            std::size_t out, Rng& rng) {
    store.add(name + ".weight", glorot(out, in, rng));
    store.add(name + ".bias", Tensor(1, out, 0.0));
    return LinearLayer(name, in, out);
  }

  Tensor operator()(Context& ctx, const Tensor& x) const {
    if (x.cols() != in_) {
      throw std::invalid_argument("linear '" + name_ + "': expected input width " +
                                  std::to_string(in_) + ", got " + x.shape_string());
    }
    return add_bias(matmul(x, ctx.param_t(weight_name())), ctx.param(bias_name()));
  }

  const std::string& name() const { return name_; }
  std::string weight_name() const { return name_ + ".weight"; }
  std::string bias_name() const { return name_ + ".bias"; }
  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }

 private:
  std::string name_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

// Two linear layers with a ReLU in between.
class Mlp {
 public:
  Mlp() = default;
  Mlp(LinearLayer first, LinearLayer second) : first_(std::move(first)), second_(std::move(second)) {}

  static Mlp create(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden,
                    std::size_t out, Rng& rng) {
    return Mlp(LinearLayer::create(store, name + ".0", in, hidden, rng),
               LinearLayer::create(store, name + ".1", hidden, out, rng));
  }

  Tensor operator()(Context& ctx, const Tensor& x) const { return second_(ctx, relu(first_(ctx, x))); }

  const LinearLayer& first() const { return first_; }
  const LinearLayer& second() const { return second_; }

 private:
  LinearLayer first_;
  LinearLayer second_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

// Compares tape gradients of a scalar function of `params` against central
// differences. Error per coordinate is |analytic - numeric| / max(1, |analytic|).
inline GradCheckReport grad_check(const std::function<Tensor(Context&)>& f, ParamStore& params,
                                  double step = 1e-5) {
  if (!(step > 0)) throw std::invalid_argument("grad_check: step must be positive");
  Tape tape;
  Context ctx(params, &tape);
  Tensor loss = f(ctx);
  if (!std::isfinite(loss.item())) throw std::runtime_error("grad_check: loss is not finite");
  if (loss.tape() == &tape) tape.backward(loss);  // a constant loss leaves every gradient at zero
  const auto analytic = ctx.gradients();

  auto evaluate = [&](const std::string& name, std::size_t k) {
    Context plain(params);
    const double v = f(plain).item();
    if (!std::isfinite(v)) {
      throw std::runtime_error("grad_check: non-finite value when perturbing parameter '" + name +
                               "' index " + std::to_string(k));
    }
    return v;
  };

  GradCheckReport report;
  for (const std::string& name : params.names()) {
    Tensor& value = params.value(name);
    auto data = value.mutable_data();
    const auto& grad = analytic.at(name);
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double saved = data[k];
      data[k] = saved + step;
      const double up = evaluate(name, k);
      data[k] = saved - step;
      const double down = evaluate(name, k);
      data[k] = saved;
      const double numeric = (up - down) / (2 * step);
      const double a = grad.data()[k];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      ++report.coordinates;
      if (report.worst_parameter.empty() || err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_parameter = name;
        report.worst_index = k;
      }
    }
  }
  return report;
}

}  // namespace npq::ad
