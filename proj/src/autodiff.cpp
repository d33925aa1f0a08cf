#include "rldif/autodiff.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <numbers>

#include "rldif/kernels.hpp"

namespace rldif::ad {

// --- Tensor -------------------------------------------------------------------

Tensor::Tensor(size_t rows, size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_)
    throw ShapeMismatch("tensor [" + std::to_string(rows) + "," + std::to_string(cols) + "] given " +
                        std::to_string(data_.size()) + " values");
}

std::string Tensor::shape_string() const {
  return "[" + std::to_string(rows_) + "," + std::to_string(cols_) + "]";
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeMismatch("item() on tensor " + shape_string());
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// --- Tape ---------------------------------------------------------------------

const Tensor& Var::value() const { return tape->value(id); }
const Tensor& Var::grad() const { return tape->grad(id); }

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::vector<int> inputs, BackwardFn backward) {
  if (check_finite_ && !value.all_finite())
    throw NonFiniteValue("op produced non-finite values at node " + std::to_string(nodes_.size()));
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](int i) { return nodes_[i].requires_grad; });
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_mut(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.rows() != n.value.rows())
    n.grad = Tensor(n.value.rows(), n.value.cols(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw InvalidArgument("loss belongs to another tape");
  if (value(loss.id).size() != 1)
    throw NonScalarLoss("backward needs a scalar loss, got " + value(loss.id).shape_string());
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[loss.id].requires_grad) return;
  grad_mut(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(*this, id);
  }
}

// --- ops ----------------------------------------------------------------------

namespace {

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw InvalidArgument("vars live on different tapes");
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch(std::string(op) + ": " + a.shape_string() + " vs " + b.shape_string());
}

bool wants(Tape& t, int id) { return t.requires_grad(id); }

template <typename F>
Var unary(Var x, F&& f, std::function<void(Tape&, int, int)> back) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const int xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, back](Tape& t, int self) { back(t, self, xi); });
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows())
    throw ShapeMismatch("matmul: " + av.shape_string() + " x " + bv.shape_string());
  const size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Tensor out(n, m);
  kernels::matmul(av.data(), bv.data(), out.data(), n, k, m);
  const int ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {ai, bi}, [ai, bi, n, k, m](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (wants(t, ai)) kernels::matmul_a_bt_acc(g.data(), t.value(bi).data(), t.grad_mut(ai).data(), n, k, m);
    if (wants(t, bi)) kernels::matmul_at_b_acc(t.value(ai).data(), g.data(), t.grad_mut(bi).data(), n, k, m);
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const int ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    for (int id : {ai, bi}) {
      if (!wants(t, id)) continue;
      Tensor& gi = t.grad_mut(id);
      for (size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const int ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (wants(t, ai)) {
      Tensor& ga = t.grad_mut(ai);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (wants(t, bi)) {
      Tensor& gb = t.grad_mut(bi);
      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const int ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (wants(t, ai)) {
      Tensor& ga = t.grad_mut(ai);
      const Tensor& bv = t.value(bi);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (wants(t, bi)) {
      Tensor& gb = t.grad_mut(bi);
      const Tensor& av = t.value(ai);
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var add_bias(Var x, Var bias) {
  require_same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols())
    throw ShapeMismatch("add_bias: " + xv.shape_string() + " + " + bv.shape_string());
  Tensor out = xv;
  const size_t m = xv.cols();
  for (size_t r = 0; r < xv.rows(); ++r) {
    double* o = out.row_ptr(r);
    for (size_t c = 0; c < m; ++c) o[c] += bv[c];
  }
  const int xi = x.id, bi = bias.id;
  return x.tape->record(std::move(out), {xi, bi}, [xi, bi, m](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (wants(t, xi)) {
      Tensor& gx = t.grad_mut(xi);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (wants(t, bi)) {
      Tensor& gb = t.grad_mut(bi);
      for (size_t r = 0; r < g.rows(); ++r) {
        const double* gr = g.row_ptr(r);
        for (size_t c = 0; c < m; ++c) gb[c] += gr[c];
      }
    }
  });
}

Var scale(Var x, double s) {
  return unary(x, [s](double v) { return v * s; }, [s](Tape& t, int self, int xi) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(xi);
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
  });
}

Var add_scalar(Var x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](Tape& t, int self, int xi) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(xi);
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols of nothing");
  const size_t rows = parts[0].rows();
  size_t cols = 0;
  std::vector<int> ids;
  std::vector<size_t> widths;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    if (p.rows() != rows)
      throw ShapeMismatch("concat_cols: " + parts[0].value().shape_string() + " vs " + p.value().shape_string());
    cols += p.cols();
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  Tensor out(rows, cols);
  size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (size_t r = 0; r < rows; ++r)
      std::copy_n(pv.row_ptr(r), pv.cols(), out.row_ptr(r) + off);
    off += pv.cols();
  }
  return parts[0].tape->record(std::move(out), ids, [ids, widths](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    size_t off = 0;
    for (size_t p = 0; p < ids.size(); ++p) {
      if (wants(t, ids[p])) {
        Tensor& gp = t.grad_mut(ids[p]);
        for (size_t r = 0; r < g.rows(); ++r) {
          const double* src = g.row_ptr(r) + off;
          double* dst = gp.row_ptr(r);
          for (size_t c = 0; c < widths[p]; ++c) dst[c] += src[c];
        }
      }
      off += widths[p];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows of nothing");
  const size_t cols = parts[0].cols();
  size_t rows = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    if (p.cols() != cols)
      throw ShapeMismatch("concat_rows: " + parts[0].value().shape_string() + " vs " + p.value().shape_string());
    rows += p.rows();
    ids.push_back(p.id);
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const Var& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  return parts[0].tape->record(Tensor(rows, cols, std::move(data)), ids, [ids](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    size_t off = 0;
    for (int id : ids) {
      const size_t n = t.value(id).size();
      if (wants(t, id)) {
        Tensor& gp = t.grad_mut(id);
        for (size_t i = 0; i < n; ++i) gp[i] += g[off + i];
      }
      off += n;
    }
  });
}

Var slice_cols(Var x, size_t begin, size_t end) {
  const Tensor& xv = x.value();
  if (begin > end || end > xv.cols())
    throw ShapeMismatch("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + xv.shape_string());
  const size_t w = end - begin;
  Tensor out(xv.rows(), w);
  for (size_t r = 0; r < xv.rows(); ++r) std::copy_n(xv.row_ptr(r) + begin, w, out.row_ptr(r));
  const int xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, begin, w](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(xi);
    for (size_t r = 0; r < g.rows(); ++r) {
      double* dst = gx.row_ptr(r) + begin;
      const double* src = g.row_ptr(r);
      for (size_t c = 0; c < w; ++c) dst[c] += src[c];
    }
  });
}

Var slice_rows(Var x, size_t begin, size_t end) {
  const Tensor& xv = x.value();
  if (begin > end || end > xv.rows())
    throw ShapeMismatch("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + xv.shape_string());
  const size_t m = xv.cols();
  std::vector<double> data(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * m),
                           xv.data().begin() + static_cast<std::ptrdiff_t>(end * m));
  const int xi = x.id;
  return x.tape->record(Tensor(end - begin, m, std::move(data)), {xi}, [xi, begin, m](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(xi);
    for (size_t i = 0; i < g.size(); ++i) gx[begin * m + i] += g[i];
  });
}

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; }, [](Tape& t, int self, int xi) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    Tensor& gx = t.grad_mut(xi);
    for (size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] > 0 ? g[i] : 0.0;
  });
}

Var gelu(Var x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  const int xi = x.id;
  if (!x.tape->requires_grad(xi)) {
    for (size_t i = 0; i < xv.size(); ++i) out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
    return x.tape->record(std::move(out), {xi}, nullptr);
  }
  // The local derivative is formed here, where erf is already evaluated.
  auto slope = std::make_shared<std::vector<double>>(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
    out[i] = v * cdf;
    (*slope)[i] = cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
  }
  return x.tape->record(std::move(out), {xi}, [xi, slope](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(xi);
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*slope)[i];
  });
}

Var exp(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = std::exp(xv[i]);
  const int xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& yv = t.value(self);
    Tensor& gx = t.grad_mut(xi);
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i];
  });
}

Var log(Var x) {
  return unary(x, [](double v) { return std::log(v); }, [](Tape& t, int self, int xi) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    Tensor& gx = t.grad_mut(xi);
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xv[i];
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  const Tensor& xv = x.value();
  const size_t n = xv.rows(), m = xv.cols();
  if (gamma.rows() != 1 || gamma.cols() != m || beta.rows() != 1 || beta.cols() != m)
    throw ShapeMismatch("layer_norm: " + xv.shape_string() + " with gamma " + gamma.value().shape_string() +
                        " beta " + beta.value().shape_string());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor xhat(n, m);
  std::vector<double> inv_std(n);
  Tensor out(n, m);
  for (size_t r = 0; r < n; ++r) {
    const double* xr = xv.row_ptr(r);
    double mu = 0;
    for (size_t c = 0; c < m; ++c) mu += xr[c];
    mu /= static_cast<double>(m);
    double var = 0;
    for (size_t c = 0; c < m; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(m);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (size_t c = 0; c < m; ++c) {
      xhat(r, c) = (xr[c] - mu) * inv_std[r];
      out(r, c) = xhat(r, c) * gv[c] + bv[c];
    }
  }
  const int xi = x.id, gi = gamma.id, bi = beta.id;
  return x.tape->record(std::move(out), {xi, gi, bi},
                        [xi, gi, bi, n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& gv = t.value(gi);
    if (wants(t, gi) || wants(t, bi)) {
      Tensor* gg = wants(t, gi) ? &t.grad_mut(gi) : nullptr;
      Tensor* gb = wants(t, bi) ? &t.grad_mut(bi) : nullptr;
      for (size_t r = 0; r < n; ++r)
        for (size_t c = 0; c < m; ++c) {
          if (gg) (*gg)[c] += g(r, c) * xhat(r, c);
          if (gb) (*gb)[c] += g(r, c);
        }
    }
    if (wants(t, xi)) {
      Tensor& gx = t.grad_mut(xi);
      std::vector<double> dxhat(m);
      for (size_t r = 0; r < n; ++r) {
        double mean_d = 0, mean_dx = 0;
        for (size_t c = 0; c < m; ++c) {
          dxhat[c] = g(r, c) * gv[c];
          mean_d += dxhat[c];
          mean_dx += dxhat[c] * xhat(r, c);
        }
        mean_d /= static_cast<double>(m);
        mean_dx /= static_cast<double>(m);
        for (size_t c = 0; c < m; ++c)
          gx(r, c) += inv_std[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
      }
    }
  });
}

namespace {

void softmax_rows(const Tensor& x, Tensor& y) {
  for (size_t r = 0; r < x.rows(); ++r) {
    const double* xr = x.row_ptr(r);
    double* yr = y.row_ptr(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t c = 0; c < x.cols(); ++c) mx = std::max(mx, xr[c]);
    double s = 0;
    for (size_t c = 0; c < x.cols(); ++c) s += (yr[c] = std::exp(xr[c] - mx));
    for (size_t c = 0; c < x.cols(); ++c) yr[c] /= s;
  }
}

}  // namespace

Var softmax(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  softmax_rows(xv, out);
  const int xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_mut(xi);
    for (size_t r = 0; r < y.rows(); ++r) {
      double dotp = 0;
      for (size_t c = 0; c < y.cols(); ++c) dotp += g(r, c) * y(r, c);
      for (size_t c = 0; c < y.cols(); ++c) gx(r, c) += y(r, c) * (g(r, c) - dotp);
    }
  });
}

Var row_normalize(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  std::vector<double> sums(xv.rows());
  for (size_t r = 0; r < xv.rows(); ++r) {
    double s = 0;
    for (size_t c = 0; c < xv.cols(); ++c) s += xv(r, c);
    sums[r] = s;
    for (size_t c = 0; c < xv.cols(); ++c) out(r, c) = xv(r, c) / s;
  }
  const int xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, sums = std::move(sums)](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad_mut(xi);
    for (size_t r = 0; r < y.rows(); ++r) {
      double dotp = 0;
      for (size_t c = 0; c < y.cols(); ++c) dotp += g(r, c) * y(r, c);
      for (size_t c = 0; c < y.cols(); ++c) gx(r, c) += (g(r, c) - dotp) / sums[r];
    }
  });
}

Var sum(Var x) {
  double s = 0;
  for (double v : x.value().data()) s += v;
  const int xi = x.id;
  return x.tape->record(Tensor::scalar(s), {xi}, [xi](Tape& t, int self) {
    const double g = t.grad(self)[0];
    Tensor& gx = t.grad_mut(xi);
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

Var mean(Var x) {
  const size_t n = x.value().size();
  if (n == 0) throw ShapeMismatch("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var segment_mean(Var x, const std::vector<int>& segment, size_t num_segments) {
  const Tensor& xv = x.value();
  if (segment.size() != xv.rows())
    throw ShapeMismatch("segment_mean: " + std::to_string(segment.size()) + " segment ids for " + xv.shape_string());
  const size_t m = xv.cols();
  Tensor out(num_segments, m);
  std::vector<double> counts(num_segments, 0.0);
  for (size_t r = 0; r < xv.rows(); ++r) {
    const auto s = static_cast<size_t>(segment[r]);
    if (s >= num_segments) throw InvalidArgument("segment id out of range");
    counts[s] += 1.0;
    double* o = out.row_ptr(s);
    const double* xr = xv.row_ptr(r);
    for (size_t c = 0; c < m; ++c) o[c] += xr[c];
  }
  for (size_t s = 0; s < num_segments; ++s)
    if (counts[s] > 0)
      for (size_t c = 0; c < m; ++c) out(s, c) /= counts[s];
  const int xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, segment, counts = std::move(counts), m](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(xi);
    for (size_t r = 0; r < segment.size(); ++r) {
      const auto s = static_cast<size_t>(segment[r]);
      const double w = 1.0 / counts[s];
      const double* gs = g.row_ptr(s);
      double* gr = gx.row_ptr(r);
      for (size_t c = 0; c < m; ++c) gr[c] += gs[c] * w;
    }
  });
}

Var gather_rows(Var x, const std::vector<int>& index) {
  const Tensor& xv = x.value();
  const size_t m = xv.cols();
  Tensor out(index.size(), m);
  for (size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || static_cast<size_t>(index[r]) >= xv.rows())
      throw InvalidArgument("gather_rows index " + std::to_string(index[r]) + " out of " + xv.shape_string());
    std::copy_n(xv.row_ptr(static_cast<size_t>(index[r])), m, out.row_ptr(r));
  }
  const int xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, index, m](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(xi);
    for (size_t r = 0; r < index.size(); ++r) {
      double* dst = gx.row_ptr(static_cast<size_t>(index[r]));
      const double* src = g.row_ptr(r);
      for (size_t c = 0; c < m; ++c) dst[c] += src[c];
    }
  });
}

Var pick(Var x, const std::vector<int>& column_per_row) {
  const Tensor& xv = x.value();
  if (column_per_row.size() != xv.rows())
    throw ShapeMismatch("pick: " + std::to_string(column_per_row.size()) + " indices for " + xv.shape_string());
  Tensor out(xv.rows(), 1);
  for (size_t r = 0; r < xv.rows(); ++r) {
    const int c = column_per_row[r];
    if (c < 0 || static_cast<size_t>(c) >= xv.cols()) throw InvalidArgument("pick column out of range");
    out[r] = xv(r, static_cast<size_t>(c));
  }
  const int xi = x.id;
  return x.tape->record(std::move(out), {xi}, [xi, column_per_row](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad_mut(xi);
    for (size_t r = 0; r < column_per_row.size(); ++r) gx(r, static_cast<size_t>(column_per_row[r])) += g[r];
  });
}

Var clamp(Var x, double lo, double hi) {
  return unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); }, [lo, hi](Tape& t, int self, int xi) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    Tensor& gx = t.grad_mut(xi);
    for (size_t i = 0; i < g.size(); ++i)
      if (xv[i] >= lo && xv[i] <= hi) gx[i] += g[i];
  });
}

Var minimum(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("minimum", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.rows(), av.cols());
  std::vector<char> take_a(av.size());
  for (size_t i = 0; i < av.size(); ++i) {
    take_a[i] = av[i] <= bv[i];
    out[i] = take_a[i] ? av[i] : bv[i];
  }
  const int ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {ai, bi}, [ai, bi, take_a = std::move(take_a)](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    if (wants(t, ai)) {
      Tensor& ga = t.grad_mut(ai);
      for (size_t i = 0; i < g.size(); ++i)
        if (take_a[i]) ga[i] += g[i];
    }
    if (wants(t, bi)) {
      Tensor& gb = t.grad_mut(bi);
      for (size_t i = 0; i < g.size(); ++i)
        if (!take_a[i]) gb[i] += g[i];
    }
  });
}

Var cross_entropy(Var logits, const Tensor& target) {
  const Tensor& lv = logits.value();
  require_same_shape("cross_entropy", lv, target);
  const size_t n = lv.rows(), m = lv.cols();
  Tensor probs(n, m);
  softmax_rows(lv, probs);
  double total = 0;
  for (size_t r = 0; r < n; ++r) {
    const double* lr = lv.row_ptr(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t c = 0; c < m; ++c) mx = std::max(mx, lr[c]);
    double s = 0;
    for (size_t c = 0; c < m; ++c) s += std::exp(lr[c] - mx);
    const double lse = mx + std::log(s);
    for (size_t c = 0; c < m; ++c)
      if (target(r, c) != 0.0) total -= target(r, c) * (lr[c] - lse);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const int li = logits.id;
  return logits.tape->record(Tensor::scalar(total * inv_n), {li},
                             [li, target, probs = std::move(probs), inv_n](Tape& t, int self) {
    const double g = t.grad(self)[0] * inv_n;
    Tensor& gl = t.grad_mut(li);
    for (size_t r = 0; r < probs.rows(); ++r) {
      double mass = 0;
      for (size_t c = 0; c < probs.cols(); ++c) mass += target(r, c);
      for (size_t c = 0; c < probs.cols(); ++c) gl(r, c) += g * (probs(r, c) * mass - target(r, c));
    }
  });
}

Var cross_entropy(Var logits, const std::vector<int>& target_index) {
  const Tensor& lv = logits.value();
  if (target_index.size() != lv.rows())
    throw ShapeMismatch("cross_entropy: " + std::to_string(target_index.size()) + " targets for " + lv.shape_string());
  Tensor target(lv.rows(), lv.cols());
  for (size_t r = 0; r < target_index.size(); ++r) {
    if (target_index[r] < 0 || static_cast<size_t>(target_index[r]) >= lv.cols())
      throw InvalidArgument("cross_entropy target out of range");
    target(r, static_cast<size_t>(target_index[r])) = 1.0;
  }
  return cross_entropy(logits, target);
}

// --- parameters ---------------------------------------------------------------

void ParamSet::add(const std::string& name, Tensor value) {
  if (index_.contains(name)) throw InvalidArgument("duplicate parameter " + name);
  index_[name] = values_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
}

const Tensor& ParamSet::operator[](const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("unknown parameter " + name);
  return values_[it->second];
}

Tensor& ParamSet::operator[](const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("unknown parameter " + name);
  return values_[it->second];
}

size_t ParamSet::scalar_count() const {
  size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

BoundParams::BoundParams(Tape& tape, const ParamSet& params, bool requires_grad) : params_(&params) {
  vars_.reserve(params.size());
  for (const auto& v : params.values()) vars_.push_back(tape.leaf(v, requires_grad));
}

Var BoundParams::operator[](const std::string& name) const {
  const auto& names = params_->names();
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw InvalidArgument("unknown parameter " + name);
  return vars_[static_cast<size_t>(it - names.begin())];
}

std::vector<Tensor> BoundParams::gradients() const {
  std::vector<Tensor> out;
  out.reserve(vars_.size());
  for (const Var& v : vars_) {
    const Tensor& g = v.grad();
    if (g.size() == v.value().size() && g.size() > 0) out.push_back(g);
    else out.emplace_back(v.rows(), v.cols(), 0.0);
  }
  return out;
}

void adam_step(ParamSet& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamConfig& config) {
  auto& values = params.values();
  if (grads.size() != values.size())
    throw ShapeMismatch("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(values.size()) + " parameters");
  if (state.m.empty()) {
    for (const auto& v : values) {
      state.m.emplace_back(v.rows(), v.cols(), 0.0);
      state.v.emplace_back(v.rows(), v.cols(), 0.0);
    }
  }
  for (size_t p = 0; p < values.size(); ++p)
    if (grads[p].rows() != values[p].rows() || grads[p].cols() != values[p].cols() ||
        state.m[p].size() != values[p].size())
      throw ShapeMismatch("adam_step: parameter " + params.names()[p] + " " + values[p].shape_string() +
                          " vs gradient " + grads[p].shape_string());

  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (size_t p = 0; p < values.size(); ++p) {
    Tensor& w = values[p];
    Tensor& m = state.m[p];
    Tensor& v = state.v[p];
    const Tensor& g = grads[p];
    for (size_t i = 0; i < w.size(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
    }
  }
}

// --- checkpoints ----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'R', 'L', 'D', 'I', 'F', 'C', 'K', '1'};

void put_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64_le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params, const nlohmann::json& meta) {
  nlohmann::json header;
  header["format"] = "rldif-checkpoint";
  header["version"] = 1;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::string blob;
  for (size_t p = 0; p < params.size(); ++p) {
    const Tensor& t = params.values()[p];
    header["tensors"].push_back({{"name", params.names()[p]},
                                 {"shape", {t.rows(), t.cols()}},
                                 {"dtype", "float64"},
                                 {"offset", blob.size()},
                                 {"nbytes", t.size() * 8}});
    for (double v : t.data()) put_u64_le(blob, std::bit_cast<uint64_t>(v));
  }
  const std::string header_text = header.dump();
  std::string out(kMagic, 8);
  put_u64_le(out, header_text.size());
  out += header_text;
  out += blob;

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::pair<ParamSet, nlohmann::json> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint");
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  const uint64_t hlen = get_u64_le(u + 8);
  if (16 + hlen > bytes.size()) throw CheckpointError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
  const size_t data_start = 16 + hlen;
  ParamSet params;
  for (const auto& t : header.at("tensors")) {
    if (t.at("dtype") != "float64") throw CheckpointError("unsupported dtype " + t.at("dtype").dump());
    const size_t rows = t.at("shape")[0], cols = t.at("shape")[1];
    const size_t offset = t.at("offset"), nbytes = t.at("nbytes");
    if (nbytes != rows * cols * 8 || data_start + offset + nbytes > bytes.size())
      throw CheckpointError("tensor " + t.at("name").get<std::string>() + " out of bounds");
    std::vector<double> data(rows * cols);
    for (size_t i = 0; i < data.size(); ++i)
      data[i] = std::bit_cast<double>(get_u64_le(u + data_start + offset + 8 * i));
    params.add(t.at("name"), Tensor(rows, cols, std::move(data)));
  }
  return {std::move(params), header.value("meta", nlohmann::json::object())};
}

}  // namespace rldif::ad
