// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records every op with its saved activations; backward()
// walks it in reverse and accumulates gradients into every input that
// requires one. Parameters are leaves bound from a ParamSet.

#ifndef RLDIF_AUTODIFF_HPP_
#define RLDIF_AUTODIFF_HPP_

#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rldif/core.hpp"

namespace rldif::ad {

RLDIF_DEFINE_ERROR(ShapeMismatch);
RLDIF_DEFINE_ERROR(NonScalarLoss);
RLDIF_DEFINE_ERROR(NonFiniteValue);
RLDIF_DEFINE_ERROR(CheckpointError);

// Rank-2 tensor; vectors are 1 x m rows and scalars 1 x 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(size_t rows, size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(size_t rows, size_t cols, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(1, 1, v); }

  size_t rows() const { return rows_; }
  size_t cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  std::vector<size_t> shape() const { return {rows_, cols_}; }
  std::string shape_string() const;

  double& operator()(size_t r, size_t c) { return data_[r * cols_ + c]; }
  double operator()(size_t r, size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }
  double item() const;

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }
  double* row_ptr(size_t r) { return data_.data() + r * cols_; }
  const double* row_ptr(size_t r) const { return data_.data() + r * cols_; }

  bool all_finite() const;
  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Tensor& grad() const;
  size_t rows() const { return value().rows(); }
  size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  explicit Tape(bool check_finite = false) : check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);

  // Records an op. `backward` reads grad(self) and adds into grad(input).
  Var record(Tensor value, std::vector<int> inputs, BackwardFn backward);

  // Gradients for every node that requires one. Loss must be 1 x 1.
  void backward(Var loss);

  const Tensor& value(int id) const { return nodes_[id].value; }
  const Tensor& grad(int id) const { return nodes_[id].grad; }
  Tensor& grad_mut(int id);
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;  // stable references while the tape grows
  bool check_finite_;
};

// --- forward ops ------------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_bias(Var x, Var bias);  // bias is 1 x cols, broadcast over rows
Var scale(Var x, double s);
Var add_scalar(Var x, double s);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(Var x, size_t begin, size_t end);
Var slice_rows(Var x, size_t begin, size_t end);
Var relu(Var x);
Var gelu(Var x);
Var exp(Var x);
Var log(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var softmax(Var x);  // rowwise
Var row_normalize(Var x);
Var sum(Var x);
Var mean(Var x);
Var segment_mean(Var x, const std::vector<int>& segment, size_t num_segments);
Var gather_rows(Var x, const std::vector<int>& index);
Var pick(Var x, const std::vector<int>& column_per_row);  // rows x 1
Var clamp(Var x, double lo, double hi);
Var minimum(Var a, Var b);
// Mean over rows of -sum_c target[r,c] * log_softmax(logits)[r,c].
Var cross_entropy(Var logits, const Tensor& target);
Var cross_entropy(Var logits, const std::vector<int>& target_index);

// --- parameters -------------------------------------------------------------

// Named, ordered collection of parameter tensors.
class ParamSet {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.contains(name); }
  const Tensor& operator[](const std::string& name) const;
  Tensor& operator[](const std::string& name);

  size_t size() const { return values_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& values() const { return values_; }
  std::vector<Tensor>& values() { return values_; }
  size_t scalar_count() const;

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, size_t> index_;
};

// Parameters placed on a tape as leaves.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamSet& params, bool requires_grad = true);
  Var operator[](const std::string& name) const;
  // Gradients aligned with ParamSet::values(); zeros where no gradient flowed.
  std::vector<Tensor> gradients() const;

 private:
  const ParamSet* params_;
  std::vector<Var> vars_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m, v;
  long step = 0;
};

void adam_step(ParamSet& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamConfig& config);

// --- checkpoints --------------------------------------------------------------
//
// Byte layout:
//   [0, 8)        magic "RLDIFCK1"
//   [8, 16)       header length H, uint64 little-endian
//   [16, 16 + H)  UTF-8 JSON header:
//                 {"format": "rldif-checkpoint", "version": 1,
//                  "tensors": [{"name", "shape": [r, c], "dtype": "float64",
//                               "offset", "nbytes"}, ...],
//                  "meta": {...}}
//   [16 + H, ...) tensor data, little-endian IEEE-754 binary64, row-major;
//                 offsets are relative to the start of this section.

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params,
                     const nlohmann::json& meta = nlohmann::json::object());
std::pair<ParamSet, nlohmann::json> load_checkpoint(const std::filesystem::path& path);

}  // namespace rldif::ad

#endif  // RLDIF_AUTODIFF_HPP_
