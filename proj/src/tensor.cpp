#include "fishpose/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace fishpose {

Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, bool requires_grad)
    : Tensor(shape, Eigen::VectorXd::Zero(numel(shape)), requires_grad) {}

Tensor::Tensor(Shape shape, Eigen::VectorXd values, bool requires_grad)
    : node_(std::make_shared<detail::TensorNode>()) {
  for (Index d : shape) {
    if (d < 1) throw DimensionError("Tensor: non-positive extent in " + to_string(shape));
  }
  if (values.size() != numel(shape)) {
    throw DimensionError("Tensor: " + std::to_string(values.size()) + " values for shape " + to_string(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Shape{}, Eigen::VectorXd::Constant(1, v), requires_grad);
}

detail::TensorNode& Tensor::node() const {
  if (!node_) throw std::logic_error("use of an undefined Tensor");
  return *node_;
}

const Eigen::VectorXd& Tensor::grad() const { return node().ensure_grad(); }

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item(): tensor of shape " + to_string(shape()) + " is not a scalar");
  return values()[0];
}

Tensor Tensor::clone() const { return Tensor(shape(), values(), requires_grad()); }

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* g_active_tape = nullptr;

/// Suspends recording on this thread while alive.
class NoTape {
 public:
  NoTape() : previous_(g_active_tape) { g_active_tape = nullptr; }
  ~NoTape() { g_active_tape = previous_; }

 private:
  Tape* previous_;
};
}  // namespace

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw TapeError("backward: tape already replayed; run the forward pass again");
  if (loss.size() != 1) throw TapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  consumed_ = true;
  loss.ptr()->ensure_grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
  entries_.shrink_to_fit();
}

// ---------------------------------------------------------------------------
// Operation helpers

namespace {

using NodePtr = std::shared_ptr<detail::TensorNode>;
using ConstRowMap = Eigen::Map<const RowMatrixXd>;
using RowMap = Eigen::Map<RowMatrixXd>;

Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = g_active_tape;
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) {
      if (tape->consumed()) throw TapeError("recording onto a tape that was already replayed");
      return tape;
    }
  }
  return nullptr;
}

bool wants_grad(const NodePtr& n) { return n && n->requires_grad; }

/// The output's gradient, or nullptr when nothing downstream reached it.
const Eigen::VectorXd* upstream(const NodePtr& out) {
  return out->grad.size() == out->value.size() ? &out->grad : nullptr;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(t.shape()));
  }
}

enum class Side { Both, LeftScalar, RightScalar };

Side broadcast_side(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Side::Both;
  if (b.size() == 1) return Side::RightScalar;
  if (a.size() == 1) return Side::LeftScalar;
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                       to_string(b.shape()));
}

/// Accumulates g into node n, summing when n is a broadcast scalar.
void accumulate(const NodePtr& n, bool broadcast_scalar, const Eigen::VectorXd& g) {
  if (!wants_grad(n)) return;
  if (broadcast_scalar) {
    n->ensure_grad()[0] += g.sum();
  } else {
    n->ensure_grad() += g;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  const Side side = broadcast_side(a, b, "add");
  Tape* tape = recording_tape({&a, &b});
  Eigen::VectorXd v;
  Shape shape;
  switch (side) {
    case Side::Both: v = a.values() + b.values(); shape = a.shape(); break;
    case Side::RightScalar: v = a.values().array() + b[0]; shape = a.shape(); break;
    case Side::LeftScalar: v = b.values().array() + a[0]; shape = b.shape(); break;
  }
  Tensor out(std::move(shape), std::move(v), tape != nullptr);
  if (tape) {
    tape->record([an = a.ptr(), bn = b.ptr(), on = out.ptr(), side] {
      const auto* g = upstream(on);
      if (!g) return;
      accumulate(an, side == Side::LeftScalar, *g);
      accumulate(bn, side == Side::RightScalar, *g);
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const Side side = broadcast_side(a, b, "sub");
  Tape* tape = recording_tape({&a, &b});
  Eigen::VectorXd v;
  Shape shape;
  switch (side) {
    case Side::Both: v = a.values() - b.values(); shape = a.shape(); break;
    case Side::RightScalar: v = a.values().array() - b[0]; shape = a.shape(); break;
    case Side::LeftScalar: v = a[0] - b.values().array(); shape = b.shape(); break;
  }
  Tensor out(std::move(shape), std::move(v), tape != nullptr);
  if (tape) {
    tape->record([an = a.ptr(), bn = b.ptr(), on = out.ptr(), side] {
      const auto* g = upstream(on);
      if (!g) return;
      accumulate(an, side == Side::LeftScalar, *g);
      accumulate(bn, side == Side::RightScalar, -*g);
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Side side = broadcast_side(a, b, "mul");
  Tape* tape = recording_tape({&a, &b});
  Eigen::VectorXd v;
  Shape shape;
  switch (side) {
    case Side::Both: v = a.values().cwiseProduct(b.values()); shape = a.shape(); break;
    case Side::RightScalar: v = a.values() * b[0]; shape = a.shape(); break;
    case Side::LeftScalar: v = b.values() * a[0]; shape = b.shape(); break;
  }
  Tensor out(std::move(shape), std::move(v), tape != nullptr);
  if (tape) {
    tape->record([an = a.ptr(), bn = b.ptr(), on = out.ptr(), side] {
      const auto* g = upstream(on);
      if (!g) return;
      const Eigen::VectorXd& av = an->value;
      const Eigen::VectorXd& bv = bn->value;
      switch (side) {
        case Side::Both:
          accumulate(an, false, g->cwiseProduct(bv));
          accumulate(bn, false, g->cwiseProduct(av));
          break;
        case Side::RightScalar:
          accumulate(an, false, *g * bv[0]);
          accumulate(bn, true, g->cwiseProduct(av));
          break;
        case Side::LeftScalar:
          accumulate(an, true, g->cwiseProduct(bv));
          accumulate(bn, false, *g * av[0]);
          break;
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tape* tape = recording_tape({&a});
  Tensor out(a.shape(), a.values() * s, tape != nullptr);
  if (tape) {
    tape->record([an = a.ptr(), on = out.ptr(), s] {
      if (const auto* g = upstream(on)) accumulate(an, false, *g * s);
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tape* tape = recording_tape({&x});
  Tensor out(x.shape(), x.values().cwiseMax(0.0), tape != nullptr);
  if (tape) {
    tape->record([xn = x.ptr(), on = out.ptr()] {
      const auto* g = upstream(on);
      if (!g || !wants_grad(xn)) return;
      xn->ensure_grad() += (xn->value.array() > 0.0).select(g->array(), 0.0).matrix();
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tape* tape = recording_tape({&x});
  Eigen::VectorXd v = x.values().unaryExpr([](double z) {
    // Split by sign so exp never overflows.
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
  });
  Tensor out(x.shape(), std::move(v), tape != nullptr);
  if (tape) {
    tape->record([xn = x.ptr(), on = out.ptr()] {
      const auto* g = upstream(on);
      if (!g || !wants_grad(xn)) return;
      const auto y = on->value.array();
      xn->ensure_grad() += (g->array() * y * (1.0 - y)).matrix();
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  if (b.rank() != 1 && b.rank() != 2) throw DimensionError("matmul: rhs must be rank 1 or 2, got " + to_string(b.shape()));
  const Index m = a.dim(0), k = a.dim(1);
  const Index n = b.rank() == 2 ? b.dim(1) : 1;
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ: " + to_string(a.shape()) + " . " + to_string(b.shape()));
  }
  Tape* tape = recording_tape({&a, &b});
  Eigen::VectorXd v(m * n);
  RowMap(v.data(), m, n).noalias() = ConstRowMap(a.values().data(), m, k) * ConstRowMap(b.values().data(), k, n);
  Tensor out(b.rank() == 2 ? Shape{m, n} : Shape{m}, std::move(v), tape != nullptr);
  if (tape) {
    tape->record([an = a.ptr(), bn = b.ptr(), on = out.ptr(), m, k, n] {
      const auto* g = upstream(on);
      if (!g) return;
      const ConstRowMap gm(g->data(), m, n);
      if (wants_grad(an)) {
        RowMap(an->ensure_grad().data(), m, k).noalias() += gm * ConstRowMap(bn->value.data(), k, n).transpose();
      }
      if (wants_grad(bn)) {
        RowMap(bn->ensure_grad().data(), k, n).noalias() += ConstRowMap(an->value.data(), m, k).transpose() * gm;
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(weight, 2, "linear");
  require_rank(x, 1, "linear");
  const Index out_dim = weight.dim(0), in_dim = weight.dim(1);
  if (x.dim(0) != in_dim) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) + " vs weight " + to_string(weight.shape()));
  }
  Tape* tape = recording_tape({&x, &weight, &bias});
  const ConstRowMap w(weight.values().data(), out_dim, in_dim);
  Eigen::VectorXd v = w * x.values();
  if (bias.defined()) v += bias.values();
  Tensor out(Shape{out_dim}, std::move(v), tape != nullptr);
  if (tape) {
    tape->record([xn = x.ptr(), wn = weight.ptr(), bn = bias.ptr(), on = out.ptr(), out_dim, in_dim] {
      const auto* g = upstream(on);
      if (!g) return;
      if (wants_grad(wn)) RowMap(wn->ensure_grad().data(), out_dim, in_dim).noalias() += *g * xn->value.transpose();
      if (wants_grad(bn)) bn->ensure_grad() += *g;
      if (wants_grad(xn)) xn->ensure_grad().noalias() += ConstRowMap(wn->value.data(), out_dim, in_dim).transpose() * *g;
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  const Index channels = x.dim(0), height = x.dim(1), width = x.dim(2);
  const Index out_ch = weight.dim(0), kernel = weight.dim(2);
  if (weight.dim(1) != channels || weight.dim(3) != kernel) {
    throw DimensionError("conv2d: input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_ch)) {
    throw DimensionError("conv2d: bias " + to_string(bias.shape()) + " vs weight " + to_string(weight.shape()));
  }
  if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: stride must be >= 1, padding >= 0");
  const Index out_h = (height + 2 * padding - kernel) / stride + 1;
  const Index out_w = (width + 2 * padding - kernel) / stride + 1;
  if (height + 2 * padding < kernel || width + 2 * padding < kernel) {
    throw DimensionError("conv2d: kernel larger than padded input " + to_string(x.shape()));
  }

  const Index patch = channels * kernel * kernel;
  const Index positions = out_h * out_w;
  // im2col: one column per output position.
  auto cols = std::make_shared<Eigen::MatrixXd>(patch, positions);
  const double* xv = x.values().data();
  for (Index oh = 0; oh < out_h; ++oh) {
    for (Index ow = 0; ow < out_w; ++ow) {
      double* dst = cols->col(oh * out_w + ow).data();
      for (Index c = 0; c < channels; ++c) {
        for (Index ki = 0; ki < kernel; ++ki) {
          const Index ih = oh * stride - padding + ki;
          const bool row_ok = ih >= 0 && ih < height;
          for (Index kj = 0; kj < kernel; ++kj) {
            const Index iw = ow * stride - padding + kj;
            *dst++ = (row_ok && iw >= 0 && iw < width) ? xv[(c * height + ih) * width + iw] : 0.0;
          }
        }
      }
    }
  }

  Tape* tape = recording_tape({&x, &weight, &bias});
  Eigen::VectorXd v(out_ch * positions);
  RowMap out_m(v.data(), out_ch, positions);
  out_m.noalias() = ConstRowMap(weight.values().data(), out_ch, patch) * *cols;
  if (bias.defined()) out_m.colwise() += bias.values();
  Tensor out(Shape{out_ch, out_h, out_w}, std::move(v), tape != nullptr);

  if (tape) {
    tape->record([xn = x.ptr(), wn = weight.ptr(), bn = bias.ptr(), on = out.ptr(), cols, channels, height, width,
                  out_ch, out_h, out_w, kernel, stride, padding, patch, positions] {
      const auto* g = upstream(on);
      if (!g) return;
      const ConstRowMap gm(g->data(), out_ch, positions);
      if (wants_grad(wn)) RowMap(wn->ensure_grad().data(), out_ch, patch).noalias() += gm * cols->transpose();
      if (wants_grad(bn)) bn->ensure_grad() += gm.rowwise().sum();
      if (wants_grad(xn)) {
        const Eigen::MatrixXd dcols = ConstRowMap(wn->value.data(), out_ch, patch).transpose() * gm;
        double* dx = xn->ensure_grad().data();
        for (Index oh = 0; oh < out_h; ++oh) {
          for (Index ow = 0; ow < out_w; ++ow) {
            const double* src = dcols.col(oh * out_w + ow).data();
            for (Index c = 0; c < channels; ++c) {
              for (Index ki = 0; ki < kernel; ++ki) {
                const Index ih = oh * stride - padding + ki;
                const bool row_ok = ih >= 0 && ih < height;
                for (Index kj = 0; kj < kernel; ++kj, ++src) {
                  const Index iw = ow * stride - padding + kj;
                  if (row_ok && iw >= 0 && iw < width) dx[(c * height + ih) * width + iw] += *src;
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

namespace {
struct AxisSplit {
  Index outer, extent, inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}
}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + to_string(x.shape()));
  const AxisSplit s = split_at(x.shape(), axis);
  Tape* tape = recording_tape({&x});
  Eigen::VectorXd v(x.size());
  const double* xv = x.values().data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.extent * s.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (Index k = 0; k < s.extent; ++k) m = std::max(m, xv[base + k * s.inner]);
      double z = 0.0;
      for (Index k = 0; k < s.extent; ++k) z += (v[base + k * s.inner] = std::exp(xv[base + k * s.inner] - m));
      for (Index k = 0; k < s.extent; ++k) v[base + k * s.inner] /= z;
    }
  }
  Tensor out(x.shape(), std::move(v), tape != nullptr);
  if (tape) {
    tape->record([xn = x.ptr(), on = out.ptr(), s] {
      const auto* g = upstream(on);
      if (!g || !wants_grad(xn)) return;
      Eigen::VectorXd& dx = xn->ensure_grad();
      const Eigen::VectorXd& y = on->value;
      for (Index o = 0; o < s.outer; ++o) {
        for (Index i = 0; i < s.inner; ++i) {
          const Index base = o * s.extent * s.inner + i;
          double inner = 0.0;
          for (Index k = 0; k < s.extent; ++k) inner += (*g)[base + k * s.inner] * y[base + k * s.inner];
          for (Index k = 0; k < s.extent; ++k) {
            const Index j = base + k * s.inner;
            dx[j] += y[j] * ((*g)[j] - inner);
          }
        }
      }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + to_string(ref));
  Shape shape = ref;
  shape[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != ref.size()) throw DimensionError("concat: rank mismatch " + to_string(ref) + " vs " + to_string(probe));
    probe[axis] = ref[axis];
    if (probe != ref) throw DimensionError("concat: shapes differ off-axis: " + to_string(ref) + " vs " + to_string(p.shape()));
    shape[axis] += p.dim(axis);
  }
  const AxisSplit total = split_at(shape, axis);

  bool any_grad = false;
  Tape* tape = nullptr;
  for (const auto& p : parts) {
    if (Tape* t = recording_tape({&p})) {
      tape = t;
      any_grad = true;
    }
  }
  Eigen::VectorXd v(numel(shape));
  Index offset = 0;
  for (const auto& p : parts) {
    const AxisSplit s = split_at(p.shape(), axis);
    const Index block = s.extent * s.inner;
    for (Index o = 0; o < s.outer; ++o) {
      v.segment(o * total.extent * total.inner + offset * total.inner, block) = p.values().segment(o * block, block);
    }
    offset += s.extent;
  }
  Tensor out(shape, std::move(v), any_grad);
  if (tape) {
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.ptr());
    tape->record([nodes = std::move(nodes), on = out.ptr(), axis, total] {
      const auto* g = upstream(on);
      if (!g) return;
      Index offset = 0;
      for (const auto& n : nodes) {
        const AxisSplit s = split_at(n->shape, axis);
        const Index block = s.extent * s.inner;
        if (wants_grad(n)) {
          Eigen::VectorXd& dn = n->ensure_grad();
          for (Index o = 0; o < s.outer; ++o) {
            dn.segment(o * block, block) += g->segment(o * total.extent * total.inner + offset * total.inner, block);
          }
        }
        offset += s.extent;
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  Tape* tape = recording_tape({&x});
  Tensor out(std::move(shape), x.values(), tape != nullptr);
  if (tape) {
    tape->record([xn = x.ptr(), on = out.ptr()] {
      if (const auto* g = upstream(on)) accumulate(xn, false, *g);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention primitives

Tensor scale_by_channel(const Tensor& x, const Tensor& m) {
  require_rank(x, 3, "scale_by_channel");
  const Index channels = x.dim(0), plane = x.dim(1) * x.dim(2);
  if (m.size() != channels) {
    throw DimensionError("scale_by_channel: feature " + to_string(x.shape()) + " vs weights " + to_string(m.shape()));
  }
  Tape* tape = recording_tape({&x, &m});
  Eigen::VectorXd v(x.size());
  RowMap(v.data(), channels, plane) = m.values().asDiagonal() * ConstRowMap(x.values().data(), channels, plane);
  Tensor out(x.shape(), std::move(v), tape != nullptr);
  if (tape) {
    tape->record([xn = x.ptr(), mn = m.ptr(), on = out.ptr(), channels, plane] {
      const auto* g = upstream(on);
      if (!g) return;
      const ConstRowMap gm(g->data(), channels, plane);
      if (wants_grad(xn)) RowMap(xn->ensure_grad().data(), channels, plane) += mn->value.asDiagonal() * gm;
      if (wants_grad(mn)) {
        mn->ensure_grad() += gm.cwiseProduct(ConstRowMap(xn->value.data(), channels, plane)).rowwise().sum();
      }
    });
  }
  return out;
}

Tensor scale_by_map(const Tensor& x, const Tensor& m) {
  require_rank(x, 3, "scale_by_map");
  const Index channels = x.dim(0), plane = x.dim(1) * x.dim(2);
  if (m.size() != plane) {
    throw DimensionError("scale_by_map: feature " + to_string(x.shape()) + " vs map " + to_string(m.shape()));
  }
  Tape* tape = recording_tape({&x, &m});
  Eigen::VectorXd v(x.size());
  RowMap(v.data(), channels, plane) =
      ConstRowMap(x.values().data(), channels, plane) * m.values().asDiagonal();
  Tensor out(x.shape(), std::move(v), tape != nullptr);
  if (tape) {
    tape->record([xn = x.ptr(), mn = m.ptr(), on = out.ptr(), channels, plane] {
      const auto* g = upstream(on);
      if (!g) return;
      const ConstRowMap gm(g->data(), channels, plane);
      if (wants_grad(xn)) RowMap(xn->ensure_grad().data(), channels, plane) += gm * mn->value.asDiagonal();
      if (wants_grad(mn)) {
        mn->ensure_grad() +=
            gm.cwiseProduct(ConstRowMap(xn->value.data(), channels, plane)).colwise().sum().transpose();
      }
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 3, "global_avg_pool");
  const Index channels = x.dim(0), plane = x.dim(1) * x.dim(2);
  Tape* tape = recording_tape({&x});
  Tensor out(Shape{channels}, ConstRowMap(x.values().data(), channels, plane).rowwise().mean(), tape != nullptr);
  if (tape) {
    tape->record([xn = x.ptr(), on = out.ptr(), channels, plane] {
      const auto* g = upstream(on);
      if (!g || !wants_grad(xn)) return;
      RowMap(xn->ensure_grad().data(), channels, plane).colwise() += *g / static_cast<double>(plane);
    });
  }
  return out;
}

Tensor global_max_pool(const Tensor& x) {
  require_rank(x, 3, "global_max_pool");
  const Index channels = x.dim(0), plane = x.dim(1) * x.dim(2);
  Tape* tape = recording_tape({&x});
  Eigen::VectorXd v(channels);
  std::vector<Index> argmax(channels);
  const double* xv = x.values().data();
  for (Index c = 0; c < channels; ++c) {
    Index best = 0;
    for (Index i = 1; i < plane; ++i) {
      if (xv[c * plane + i] > xv[c * plane + best]) best = i;
    }
    argmax[c] = c * plane + best;
    v[c] = xv[argmax[c]];
  }
  Tensor out(Shape{channels}, std::move(v), tape != nullptr);
  if (tape) {
    tape->record([xn = x.ptr(), on = out.ptr(), argmax = std::move(argmax)] {
      const auto* g = upstream(on);
      if (!g || !wants_grad(xn)) return;
      Eigen::VectorXd& dx = xn->ensure_grad();
      for (std::size_t c = 0; c < argmax.size(); ++c) dx[argmax[c]] += (*g)[static_cast<Index>(c)];
    });
  }
  return out;
}

Tensor channel_mean_map(const Tensor& x) {
  require_rank(x, 3, "channel_mean_map");
  const Index channels = x.dim(0), plane = x.dim(1) * x.dim(2);
  Tape* tape = recording_tape({&x});
  Tensor out(Shape{1, x.dim(1), x.dim(2)},
             ConstRowMap(x.values().data(), channels, plane).colwise().mean().transpose(), tape != nullptr);
  if (tape) {
    tape->record([xn = x.ptr(), on = out.ptr(), channels, plane] {
      const auto* g = upstream(on);
      if (!g || !wants_grad(xn)) return;
      RowMap(xn->ensure_grad().data(), channels, plane).rowwise() += g->transpose() / static_cast<double>(channels);
    });
  }
  return out;
}

Tensor channel_max_map(const Tensor& x) {
  require_rank(x, 3, "channel_max_map");
  const Index channels = x.dim(0), plane = x.dim(1) * x.dim(2);
  Tape* tape = recording_tape({&x});
  Eigen::VectorXd v(plane);
  std::vector<Index> argmax(plane);
  const double* xv = x.values().data();
  for (Index i = 0; i < plane; ++i) {
    Index best = 0;
    for (Index c = 1; c < channels; ++c) {
      if (xv[c * plane + i] > xv[best * plane + i]) best = c;
    }
    argmax[i] = best * plane + i;
    v[i] = xv[argmax[i]];
  }
  Tensor out(Shape{1, x.dim(1), x.dim(2)}, std::move(v), tape != nullptr);
  if (tape) {
    tape->record([xn = x.ptr(), on = out.ptr(), argmax = std::move(argmax)] {
      const auto* g = upstream(on);
      if (!g || !wants_grad(xn)) return;
      Eigen::VectorXd& dx = xn->ensure_grad();
      for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += (*g)[static_cast<Index>(i)];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses

Tensor sum(const Tensor& x) {
  Tape* tape = recording_tape({&x});
  Tensor out = Tensor::scalar(x.values().sum(), tape != nullptr);
  if (tape) {
    tape->record([xn = x.ptr(), on = out.ptr()] {
      const auto* g = upstream(on);
      if (!g || !wants_grad(xn)) return;
      xn->ensure_grad().array() += (*g)[0];
    });
  }
  return out;
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("dot: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tape* tape = recording_tape({&a, &b});
  Tensor out = Tensor::scalar(a.values().dot(b.values()), tape != nullptr);
  if (tape) {
    tape->record([an = a.ptr(), bn = b.ptr(), on = out.ptr()] {
      const auto* g = upstream(on);
      if (!g) return;
      accumulate(an, false, bn->value * (*g)[0]);
      accumulate(bn, false, an->value * (*g)[0]);
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, Index target) {
  require_rank(logits, 1, "cross_entropy");
  const Index n = logits.dim(0);
  if (target < 0 || target >= n) {
    throw std::out_of_range("cross_entropy: class " + std::to_string(target) + " of " + std::to_string(n));
  }
  Tape* tape = recording_tape({&logits});
  const Eigen::VectorXd& z = logits.values();
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  Tensor out = Tensor::scalar(lse - z[target], tape != nullptr);
  if (tape) {
    tape->record([ln = logits.ptr(), on = out.ptr(), target, lse] {
      const auto* g = upstream(on);
      if (!g || !wants_grad(ln)) return;
      Eigen::VectorXd p = (ln->value.array() - lse).exp().matrix();
      p[target] -= 1.0;
      ln->ensure_grad() += p * (*g)[0];
    });
  }
  return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("mse: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tape* tape = recording_tape({&a, &b});
  const Eigen::VectorXd diff = a.values() - b.values();
  const double n = static_cast<double>(diff.size());
  Tensor out = Tensor::scalar(diff.squaredNorm() / n, tape != nullptr);
  if (tape) {
    tape->record([an = a.ptr(), bn = b.ptr(), on = out.ptr(), n] {
      const auto* g = upstream(on);
      if (!g) return;
      const Eigen::VectorXd d = (an->value - bn->value) * (2.0 * (*g)[0] / n);
      accumulate(an, false, d);
      accumulate(bn, false, -d);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn, std::vector<Tensor> inputs,
                           double eps, double abs_floor) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }

  Eigen::VectorXd projection;
  const auto scalarize = [&](const Tensor& out) {
    if (out.size() == 1) return reshape(out, Shape{});
    if (projection.size() != out.size()) {
      std::mt19937_64 rng(0x5eed);
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      projection.resize(out.size());
      for (Index i = 0; i < projection.size(); ++i) projection[i] = u(rng);
    }
    return dot(out, Tensor(Shape{out.size()}, projection));
  };

  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = scalarize(fn(inputs));
    tape.backward(loss);
  }

  NoTape no_tape;
  GradCheckResult result;
  for (auto& t : inputs) {
    const Eigen::VectorXd analytic = t.grad();
    Eigen::VectorXd& v = t.values();
    for (Index i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + eps;
      const double up = scalarize(fn(inputs)).item();
      v[i] = saved - eps;
      const double down = scalarize(fn(inputs)).item();
      v[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), abs_floor});
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      result.max_rel_error = std::max(result.max_rel_error, abs_err / denom);
      ++result.checked;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'F', 'P', 'C', 'K', 'P', 'T', '\0', '\0'};
static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError("truncated checkpoint " + path.string());
  return v;
}

}  // namespace

void write_checkpoint(const NamedTensors& tensors, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(t.values().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!os) throw CheckpointError("write failed: " + path.string());
}

NamedTensors read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw CheckpointError("not a checkpoint: " + path.string());
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  const auto count = get<std::uint32_t>(is, path);
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get<std::uint32_t>(is, path), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw CheckpointError("truncated checkpoint " + path.string());
    const auto rank = get<std::uint32_t>(is, path);
    if (rank > 8) throw CheckpointError("implausible rank in " + path.string());
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<Index>(get<std::uint64_t>(is, path));
    Eigen::VectorXd values(numel(shape));
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw CheckpointError("truncated checkpoint " + path.string());
    }
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

}  // namespace fishpose
