#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace golf {

using Shape = std::vector<int>;

/// Dense row-major tensor of 64-bit floats. Copying a Tensor copies the
/// handle; two copies refer to the same storage (parameters rely on this
/// for weight sharing across recurrent applications).
struct TensorData {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;    // empty until a backward pass touches it
  std::uint64_t tape_id = 0;   // id of the tape that produced this value, 0 for leaves
};

class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData>()) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  /// Uniform draw in [lo, hi); consumes the generator deterministically.
  static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng);

  const Shape& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }
  std::size_t size() const { return d_->values.size(); }

  double* data() { return d_->values.data(); }
  const double* data() const { return d_->values.data(); }
  std::vector<double>& values() { return d_->values; }
  const std::vector<double>& values() const { return d_->values; }

  /// Value of a scalar (size-1) tensor.
  double item() const;

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    d_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }
  const std::vector<double>& grad() const { return d_->grad; }
  std::vector<double>& grad() { return d_->grad; }
  void zero_grad() { d_->grad.assign(d_->values.size(), 0.0); }
  void clear_grad() { d_->grad.clear(); }

  /// Deep copy with no autograd state.
  Tensor detached() const;

  std::shared_ptr<TensorData> impl() const { return d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

/// Per-backward-call adjoint buffers, keyed by tensor storage identity.
class Adjoints {
 public:
  std::vector<double>& of(const std::shared_ptr<TensorData>& t);
  const std::vector<double>* find(const TensorData* t) const;
  void seed(const std::shared_ptr<TensorData>& t, double v);
  void accumulate_leaf_grads();

 private:
  struct Slot {
    std::shared_ptr<TensorData> holder;
    std::vector<double> buf;
  };
  std::unordered_map<const TensorData*, Slot> slots_;
};

using BackwardFn = std::function<void(const std::vector<double>& out_adj, Adjoints& adj)>;

/// Records differentiable operations executed while it is the active tape
/// on this thread. Construction pushes, destruction pops; tapes nest.
/// A tape is single-threaded; independent tapes on different threads do
/// not share state.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Reverse sweep from `loss` (must be scalar and produced on this tape).
  /// Leaf tensors with requires_grad accumulate into their persistent
  /// grad; calling twice without zero_grad doubles leaf gradients.
  void backward(const Tensor& loss);

  std::size_t op_count() const { return ops_.size(); }
  std::uint64_t id() const { return id_; }

  void record(std::shared_ptr<TensorData> out, BackwardFn fn);

  static Tape* active();

 private:
  struct Op {
    std::shared_ptr<TensorData> out;
    BackwardFn fn;
  };
  std::vector<Op> ops_;
  std::uint64_t id_;
  Tape* prev_;
};

/// True when an op consuming `t` must be recorded on the active tape.
bool tracked(const Tensor& t);

// ---- differentiable operations ------------------------------------------

/// Sliding cross-correlation with zero padding.
/// input [N,Cin,H,W], kernel [Cout,Cin,kh,kw] (kh, kw odd), output
/// [N,Cout,H+2p-kh+1,W+2p-kw+1]. Differentiable w.r.t. both arguments.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int pad);

Tensor relu(const Tensor& x);

/// Per-(instance, channel) standardization over the spatial extent of a
/// [N,C,H,W] tensor followed by the affine gamma/beta (each [C]).
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// x [N,din] * w [din,dout] (+ bias [dout]).
Tensor linear(const Tensor& x, const Tensor& w);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Row-wise softmax of [N,k] with max subtraction.
Tensor softmax(const Tensor& x);

/// Mean of squared differences over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor sum(const Tensor& x);
/// Scalar view of one element (flat index).
Tensor select(const Tensor& x, std::size_t flat_index);
/// 2x2 average pooling, stride 2, trailing odd row/column dropped.
Tensor avg_pool2(const Tensor& x);
/// -mean(log probs[i, labels[i]]) over rows of [N,k]; probs must be
/// strictly positive (softmax output).
Tensor cross_entropy(const Tensor& probs, const std::vector<int>& labels);

/// Runs backward on the active tape.
void backward(const Tensor& loss);

/// Max over coordinates of |analytic - central difference| /
/// (|analytic| + |numeric| + 1e-12) for a scalar-valued f.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

namespace detail {

// raw kernels (see conv_kernels.cpp); pad may differ per axis
void conv2d_forward(const double* in, int n, int c_in, int h, int w, const double* ker, int c_out,
                    int kh, int kw, int pad_h, int pad_w, double* out);
void conv2d_grad_kernel(const double* in, int n, int c_in, int h, int w, const double* out_adj,
                        int c_out, int kh, int kw, int pad_h, int pad_w, double* d_ker);

void check_finite(const double* p, std::size_t n, const char* op);

}  // namespace detail

}  // namespace golf
