#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fishpose {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct TapeError : std::logic_error {
  using std::logic_error::logic_error;
};

namespace detail {
struct TensorNode {
  Shape shape;
  Eigen::VectorXd value;
  Eigen::VectorXd grad;  // empty until a gradient reaches the node
  bool requires_grad = false;

  Eigen::VectorXd& ensure_grad() {
    if (grad.size() != value.size()) grad = Eigen::VectorXd::Zero(value.size());
    return grad;
  }
};
}  // namespace detail

/// Dense row-major double tensor with shared ownership. Copies alias the same
/// storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, Eigen::VectorXd values, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  Index dim(std::size_t axis) const { return node().shape.at(axis); }
  Index size() const { return node().value.size(); }

  const Eigen::VectorXd& values() const { return node().value; }
  Eigen::VectorXd& values() { return node().value; }
  double operator[](Index i) const { return node().value[i]; }

  bool has_grad() const { return node().grad.size() == size(); }
  /// Gradient buffer; zeros if nothing has been accumulated yet.
  const Eigen::VectorXd& grad() const;
  Eigen::VectorXd& grad() { return node().ensure_grad(); }
  void zero_grad() { node().grad.resize(0); }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) { node().requires_grad = on; }

  double item() const;
  Tensor clone() const;

  const std::shared_ptr<detail::TensorNode>& ptr() const { return node_; }

 private:
  detail::TensorNode& node() const;

  std::shared_ptr<detail::TensorNode> node_;
};

/// Ordered record of executed differentiable operations. Entries are replayed
/// in reverse by backward(), which may run only once per tape.
class Tape {
 public:
  void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

/// Makes tape the recording target for operations on this thread while alive.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// ---------------------------------------------------------------------------
// Differentiable operations. Elementwise binaries accept equal shapes or a
// single-element operand on either side.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

/// (m x k) . (k x n) -> (m x n); (m x k) . (k) -> (m).
Tensor matmul(const Tensor& a, const Tensor& b);
/// weight (out x in) . x (in) + bias (out); bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// x: C x H x W, weight: O x C x K x K, bias: O (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis = 0);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor reshape(const Tensor& x, Shape shape);

/// x: C x H x W scaled per channel by m (length C).
Tensor scale_by_channel(const Tensor& x, const Tensor& m);
/// x: C x H x W scaled per position by m (1 x H x W).
Tensor scale_by_map(const Tensor& x, const Tensor& m);

/// C x H x W -> C.
Tensor global_avg_pool(const Tensor& x);
/// C x H x W -> C; gradient goes to the first maximum in scan order.
Tensor global_max_pool(const Tensor& x);
/// C x H x W -> 1 x H x W.
Tensor channel_mean_map(const Tensor& x);
/// C x H x W -> 1 x H x W; gradient goes to the lowest channel attaining the max.
Tensor channel_max_map(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);
/// -log softmax(logits)[target] for a rank-1 logits vector.
Tensor cross_entropy(const Tensor& logits, Index target);
Tensor mse(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Index checked = 0;
};

/// Compares analytic gradients of fn w.r.t. every element of inputs against
/// central differences with step eps. A non-scalar output is reduced by a
/// fixed pseudo-random projection. Relative error per element is
/// |a - n| / max(|a|, |n|, abs_floor).
GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           std::vector<Tensor> inputs, double eps = 1e-5, double abs_floor = 1e-6);

// ---------------------------------------------------------------------------
// Checkpoints: "FPCKPT" magic, u32 version, u32 count, then per record
// (u32 name length, name, u32 rank, u64 dims, f64 little-endian values).

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const NamedTensors& tensors, const std::filesystem::path& path);
NamedTensors read_checkpoint(const std::filesystem::path& path);

}  // namespace fishpose
