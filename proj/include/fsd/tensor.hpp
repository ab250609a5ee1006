#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fsd/error.hpp"

namespace fsd {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily during backward
  bool requires_grad = false;  // leaf flag set by the user
  bool needs_grad = false;     // requires_grad or any input needs it
  std::vector<std::shared_ptr<Node>> inputs;
  // Consumes this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
  void accumulate(std::span<const double> g);
  void ensure_grad();
};

}  // namespace detail

// Dense row-major N-D tensor of doubles with an optional reverse-mode tape.
// Value-semantics handle: copying a Tensor aliases the same node.  All ops
// produce fresh buffers; nothing is viewed or aliased.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t numel() const;
  int dim(int i) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> data() const;
  std::span<double> mutable_data();  // for parameter updates between steps
  std::span<const double> grad() const;
  void zero_grad();

  double item() const;  // scalar tensors only

  // Runs reverse-mode accumulation from this scalar.  Repeated calls
  // accumulate into leaf grads until zero_grad is called.
  void backward() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// While alive, suppresses tape recording; forwards still compute values.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Number of worker threads used inside the heavy kernels (conv2d).  Set once
// at startup; 0 means use hardware concurrency.  Results are identical for
// any thread count.
void set_num_threads(int n);
int num_threads();

// ---- operator set (exactly what the network needs) ----

// H' = floor((H + 2*padding - dilation*(kh-1) - 1)/stride) + 1, same for W'.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding, int dilation);
Shape conv2d_output_shape(const Shape& input, const Shape& weight, int stride,
                          int padding, int dilation);

struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
};

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormStats& stats, double eps, double momentum,
                   bool training);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor adaptive_avg_pool2d(const Tensor& x, int out_h, int out_w);
Tensor avg_pool2d(const Tensor& x, int kernel, int stride, int padding);

Tensor add(const Tensor& a, const Tensor& b);       // same shape
Tensor mul(const Tensor& a, const Tensor& b);       // same shape
Tensor mul_channel(const Tensor& x, const Tensor& w);  // [B,C,H,W] * [B,C,1,1]
Tensor scale(const Tensor& x, double s);

Tensor concat_channels(const std::vector<Tensor>& parts);
std::vector<Tensor> split_channels(const Tensor& x, int n);
Tensor narrow_channels(const Tensor& x, int start, int count);

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor flatten2d(const Tensor& x);  // [B,...] -> [B, rest]
Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);        // -> scalar

// cos(theta) between L2-normalized rows of x [B,D] and rows of w [K,D].
Tensor cosine_logits(const Tensor& x, const Tensor& w);

// A-softmax margin: target entries become (lambda*c + psi(c))/(1+lambda)
// with psi(c) = (-1)^k * T_m(c) - 2k, k = floor(m*acos(c)/pi).  m = 1 is the
// identity for any lambda.
Tensor angle_margin(const Tensor& cosines, const std::vector<int>& labels,
                    int margin, double lambda);
double angle_margin_psi(double cosine, int margin);

// Mean cross-entropy of softmax(logits) against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace fsd
