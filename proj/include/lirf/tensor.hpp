#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lirf/common.hpp"

namespace lirf {

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

inline std::size_t dtype_size(Dtype dt) { return dt == Dtype::f32 ? 4 : 8; }
inline const char* dtype_name(Dtype dt) { return dt == Dtype::f32 ? "f32" : "f64"; }

// Flat dtype-tagged buffer backed by a shared array: copying a Storage
// aliases the same values (ops never write their inputs, so views such as
// reshape are free). `uninit` skips zero-filling for outputs that are fully
// overwritten.
class Storage {
 public:
  Storage() = default;
  Storage(Dtype dt, std::size_t n) : dtype_(dt), size_(n) {
    allocate();
    fill(0.0);
  }
  static Storage uninit(Dtype dt, std::size_t n) {
    Storage s;
    s.dtype_ = dt;
    s.size_ = n;
    s.allocate();
    return s;
  }

  Dtype dtype() const { return dtype_; }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }

  float* f32() { return f32_.get(); }
  const float* f32() const { return f32_.get(); }
  double* f64() { return f64_.get(); }
  const double* f64() const { return f64_.get(); }

  double at(std::size_t i) const {
    return dtype_ == Dtype::f32 ? static_cast<double>(f32_[i]) : f64_[i];
  }
  void set(std::size_t i, double v) {
    if (dtype_ == Dtype::f32)
      f32_[i] = static_cast<float>(v);
    else
      f64_[i] = v;
  }
  void fill(double v) {
    if (dtype_ == Dtype::f32)
      std::fill(f32_.get(), f32_.get() + size_, static_cast<float>(v));
    else
      std::fill(f64_.get(), f64_.get() + size_, v);
  }

  const void* raw() const {
    return dtype_ == Dtype::f32 ? static_cast<const void*>(f32_.get())
                                : static_cast<const void*>(f64_.get());
  }
  void* raw() {
    return dtype_ == Dtype::f32 ? static_cast<void*>(f32_.get())
                                : static_cast<void*>(f64_.get());
  }

  template <class T>
  T* data();
  template <class T>
  const T* data() const;

 private:
  void allocate() {
    if (size_ == 0) return;
    if (dtype_ == Dtype::f32)
      f32_ = std::shared_ptr<float[]>(new float[size_]);
    else
      f64_ = std::shared_ptr<double[]>(new double[size_]);
  }
  Dtype dtype_ = Dtype::f32;
  std::size_t size_ = 0;
  std::shared_ptr<float[]> f32_;
  std::shared_ptr<double[]> f64_;
};

template <>
inline float* Storage::data<float>() { return f32_.get(); }
template <>
inline double* Storage::data<double>() { return f64_.get(); }
template <>
inline const float* Storage::data<float>() const { return f32_.get(); }
template <>
inline const double* Storage::data<double>() const { return f64_.get(); }

struct TensorNode {
  std::vector<std::int64_t> shape;
  Storage values;
  Storage grad;  // materialized lazily during backward
  bool grad_live = false;  // grad holds valid (or zeroed) content
  bool requires_grad = false;
  std::string name;  // nonempty for named parameters
};

using NodePtr = std::shared_ptr<TensorNode>;

// Value-semantic handle over a shared node. Copying a Tensor aliases the
// underlying values; ops always allocate fresh output nodes.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Dtype dt, std::vector<std::int64_t> shape);
  // Uninitialized storage for outputs that are fully overwritten.
  static Tensor uninitialized(Dtype dt, std::vector<std::int64_t> shape);
  static Tensor full(Dtype dt, std::vector<std::int64_t> shape, double v);
  static Tensor scalar(Dtype dt, double v) { return full(dt, {}, v); }
  static Tensor from(Dtype dt, std::vector<std::int64_t> shape, std::span<const double> vals);
  static Tensor from_f32(std::vector<std::int64_t> shape, std::vector<float> vals);
  static Tensor from_f64(std::vector<std::int64_t> shape, std::vector<double> vals);

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::int64_t>& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->values.size()); }
  Dtype dtype() const { return node_->values.dtype(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }
  const std::string& name() const { return node_->name; }

  Storage& values() { return node_->values; }
  const Storage& values() const { return node_->values; }
  Storage& grad() { return node_->grad; }
  const Storage& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void clear_grad() {
    node_->grad = Storage();
    node_->grad_live = false;
  }

  double value_at(std::size_t i) const { return node_->values.at(i); }
  double scalar_value() const { return node_->values.at(0); }

  // Copies values out as doubles regardless of dtype.
  std::vector<double> to_doubles() const;

  // Deep copy (values only; grad not copied).
  Tensor clone() const;
  Tensor to(Dtype dt) const;

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

std::int64_t shape_numel(const std::vector<std::int64_t>& shape);

// One reverse-mode record. `backward` reads output grad and accumulates into
// input grads; it must tolerate an unmaterialized output grad by returning.
struct TapeRecord {
  const char* op;
  NodePtr output;
  std::function<void()> backward;
};

class Tape {
 public:
  void record(const char* op, NodePtr output, std::function<void()> fn) {
    records_.push_back({op, std::move(output), std::move(fn)});
  }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  void clear() { records_.clear(); }
  const std::vector<TapeRecord>& records() const { return records_; }
  std::vector<TapeRecord>& records() { return records_; }

 private:
  std::vector<TapeRecord> records_;
};

Tape* active_tape();

// RAII: installs a tape for the current scope. Ops record onto the active
// tape whenever any input requires grad. Single-owner: one builder, one
// backward pass.
class TapeScope {
 public:
  explicit TapeScope(Tape& t);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

struct BackwardOptions {
  bool clear_tape = true;
  bool warn_detached = true;
};

// Reverse pass over `tape` from a scalar loss. Returns grads for the given
// leaves (zero-filled, with a warning, when the graph never reached them).
std::vector<Tensor> backward(Tape& tape, const Tensor& loss, std::span<const Tensor> leaves,
                             const BackwardOptions& opts = {});

// Strict non-finite checking: when enabled, primitives reject NaN/Inf inputs.
void set_strict_nonfinite(bool enabled);
bool strict_nonfinite();

// Helpers shared by op implementations.
void ensure_grad(TensorNode& n);  // materialize zero grad, ready to add into

// For a consumer that contributes to every gradient element: allocates an
// uninitialized buffer on first touch and reports whether the caller must
// add (true) or may overwrite (false).
bool grad_accumulate_mode(TensorNode& n);

void accumulate(Storage& dst, const Storage& src);  // dst += src

}  // namespace lirf
