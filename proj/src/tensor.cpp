#include "fsd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>
#include <unordered_set>

namespace fsd {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    check_arg(d > 0, "shape dimensions must be positive");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

namespace detail {

void Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
}

void Node::accumulate(std::span<const double> g) {
  ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<int> g_num_threads{0};

NodePtr make_leaf(Shape shape, std::vector<double> value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->needs_grad = requires_grad;
  return n;
}

bool any_needs(const std::vector<NodePtr>& inputs) {
  for (const auto& in : inputs)
    if (in->needs_grad) return true;
  return false;
}

Tensor make_op(Shape shape, std::vector<double> value,
               std::vector<NodePtr> inputs,
               std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled && any_needs(inputs)) {
    n->needs_grad = true;
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(backward);
  }
  return Tensor(n);
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
  int threads = num_threads();
  if (threads > n) threads = static_cast<int>(n);
  if (threads <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::int64_t i = next.fetch_add(1);
        if (i >= n) break;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

void set_num_threads(int n) { g_num_threads.store(n); }

int num_threads() {
  int n = g_num_threads.load();
  if (n > 0) return n;
  static const int detected = [] {
    if (const char* e = std::getenv("FSD_THREADS")) {
      const int v = std::atoi(e);
      if (v > 0) return v;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc ? static_cast<int>(hc) : 1;
  }();
  return detected;
}

// ---- Tensor handle ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, v), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  const auto n = shape_numel(shape);
  check_arg(n == static_cast<std::int64_t>(data.size()),
            "from_data: shape " + shape_str(shape) + " does not match data length");
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

const Shape& Tensor::shape() const {
  check_arg(defined(), "undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::numel() const {
  check_arg(defined(), "undefined tensor");
  return node_->numel();
}

int Tensor::dim(int i) const { return shape().at(static_cast<size_t>(i)); }

bool Tensor::requires_grad() const { return defined() && node_->requires_grad; }

bool Tensor::has_grad() const { return defined() && !node_->grad.empty(); }

std::span<const double> Tensor::data() const {
  check_arg(defined(), "undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  check_arg(defined(), "undefined tensor");
  return node_->value;
}

std::span<const double> Tensor::grad() const {
  check_arg(defined(), "undefined tensor");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!defined()) return;
  node_->grad.clear();
  node_->grad.shrink_to_fit();
}

double Tensor::item() const {
  check_arg(defined() && numel() == 1, "item: tensor is not scalar");
  return node_->value[0];
}

void Tensor::backward() const {
  check_arg(defined(), "backward: undefined tensor");
  check_arg(numel() == 1, "backward: loss must be scalar, got " + shape_str(shape()));
  Node* root = node_.get();
  if (!root->needs_grad) return;

  // Post-order DFS; reversed it is a valid topological order, so every
  // node's grad is complete before its backward_fn runs.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    size_t i;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  visited.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.i < f.n->inputs.size()) {
      Node* in = f.n->inputs[f.i++].get();
      if (in->needs_grad && !visited.count(in)) {
        visited.insert(in);
        stack.push_back({in, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    if (!n->requires_grad) {
      // Intermediate grads are dead once consumed; free eagerly.
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---- conv2d ----

Shape conv2d_output_shape(const Shape& input, const Shape& weight, int stride,
                          int padding, int dilation) {
  check_arg(input.size() == 4, "conv2d: input must be 4-D, got " + shape_str(input));
  check_arg(weight.size() == 4, "conv2d: weight must be 4-D, got " + shape_str(weight));
  check_arg(weight[1] == input[1],
            "conv2d: weight in-channels " + std::to_string(weight[1]) +
                " do not match input channels " + std::to_string(input[1]));
  check_arg(weight[2] >= 1 && weight[3] >= 1, "conv2d: kernel must be >= 1");
  check_arg(stride >= 1 && dilation >= 1 && padding >= 0,
            "conv2d: invalid stride/padding/dilation");
  const int h_out = (input[2] + 2 * padding - dilation * (weight[2] - 1) - 1) / stride + 1;
  const int w_out = (input[3] + 2 * padding - dilation * (weight[3] - 1) - 1) / stride + 1;
  check_arg(input[2] + 2 * padding >= dilation * (weight[2] - 1) + 1 && h_out >= 1 &&
                input[3] + 2 * padding >= dilation * (weight[3] - 1) + 1 && w_out >= 1,
            "conv2d: kernel does not fit input geometry");
  return {input[0], weight[0], h_out, w_out};
}

namespace {

struct ConvGeom {
  int B, Cin, H, W, Cout, kh, kw, Hout, Wout, s, p, d;
};

void conv2d_forward_kernel(const double* x, const double* w, const double* bias,
                           double* y, const ConvGeom& g) {
  parallel_for(static_cast<std::int64_t>(g.B) * g.Cout, [&](std::int64_t idx) {
    const int b = static_cast<int>(idx / g.Cout);
    const int co = static_cast<int>(idx % g.Cout);
    double* yp = y + (static_cast<std::int64_t>(b) * g.Cout + co) * g.Hout * g.Wout;
    const double bv = bias ? bias[co] : 0.0;
    std::fill(yp, yp + static_cast<std::int64_t>(g.Hout) * g.Wout, bv);
    const double* wb = w + static_cast<std::int64_t>(co) * g.Cin * g.kh * g.kw;
    for (int ci = 0; ci < g.Cin; ++ci) {
      const double* xc = x + (static_cast<std::int64_t>(b) * g.Cin + ci) * g.H * g.W;
      for (int ki = 0; ki < g.kh; ++ki) {
        for (int kj = 0; kj < g.kw; ++kj) {
          const double wv = wb[(static_cast<std::int64_t>(ci) * g.kh + ki) * g.kw + kj];
          const int off = kj * g.d - g.p;
          const int ow0 = off < 0 ? (-off + g.s - 1) / g.s : 0;
          int ow1 = (g.W - 1 - off) / g.s;
          if (g.W - 1 - off < 0) ow1 = -1;
          if (ow1 > g.Wout - 1) ow1 = g.Wout - 1;
          for (int oh = 0; oh < g.Hout; ++oh) {
            const int ih = oh * g.s - g.p + ki * g.d;
            if (ih < 0 || ih >= g.H) continue;
            const double* xr = xc + static_cast<std::int64_t>(ih) * g.W + off;
            double* yr = yp + static_cast<std::int64_t>(oh) * g.Wout;
            if (g.s == 1) {
              for (int ow = ow0; ow <= ow1; ++ow) yr[ow] += wv * xr[ow];
            } else {
              for (int ow = ow0; ow <= ow1; ++ow) yr[ow] += wv * xr[ow * g.s];
            }
          }
        }
      }
    }
  });
}

void conv2d_backward_input(const double* go, const double* w, double* dx,
                           const ConvGeom& g) {
  parallel_for(g.B, [&](std::int64_t b) {
    for (int co = 0; co < g.Cout; ++co) {
      const double* gp = go + (b * g.Cout + co) * g.Hout * g.Wout;
      const double* wb = w + static_cast<std::int64_t>(co) * g.Cin * g.kh * g.kw;
      for (int ci = 0; ci < g.Cin; ++ci) {
        double* dxc = dx + (b * g.Cin + ci) * g.H * g.W;
        for (int ki = 0; ki < g.kh; ++ki) {
          for (int kj = 0; kj < g.kw; ++kj) {
            const double wv = wb[(static_cast<std::int64_t>(ci) * g.kh + ki) * g.kw + kj];
            if (wv == 0.0) continue;
            const int off = kj * g.d - g.p;
            const int ow0 = off < 0 ? (-off + g.s - 1) / g.s : 0;
            int ow1 = (g.W - 1 - off) / g.s;
            if (g.W - 1 - off < 0) ow1 = -1;
            if (ow1 > g.Wout - 1) ow1 = g.Wout - 1;
            for (int oh = 0; oh < g.Hout; ++oh) {
              const int ih = oh * g.s - g.p + ki * g.d;
              if (ih < 0 || ih >= g.H) continue;
              double* dxr = dxc + static_cast<std::int64_t>(ih) * g.W + off;
              const double* gr = gp + static_cast<std::int64_t>(oh) * g.Wout;
              if (g.s == 1) {
                for (int ow = ow0; ow <= ow1; ++ow) dxr[ow] += wv * gr[ow];
              } else {
                for (int ow = ow0; ow <= ow1; ++ow) dxr[ow * g.s] += wv * gr[ow];
              }
            }
          }
        }
      }
    }
  });
}

void conv2d_backward_weight(const double* go, const double* x, double* dw,
                            const ConvGeom& g) {
  parallel_for(g.Cout, [&](std::int64_t co) {
    for (int ci = 0; ci < g.Cin; ++ci) {
      for (int ki = 0; ki < g.kh; ++ki) {
        for (int kj = 0; kj < g.kw; ++kj) {
          const int off = kj * g.d - g.p;
          const int ow0 = off < 0 ? (-off + g.s - 1) / g.s : 0;
          int ow1 = (g.W - 1 - off) / g.s;
          if (g.W - 1 - off < 0) ow1 = -1;
          if (ow1 > g.Wout - 1) ow1 = g.Wout - 1;
          double acc = 0.0;
          for (int b = 0; b < g.B; ++b) {
            const double* gp = go + (static_cast<std::int64_t>(b) * g.Cout + co) * g.Hout * g.Wout;
            const double* xc = x + (static_cast<std::int64_t>(b) * g.Cin + ci) * g.H * g.W;
            for (int oh = 0; oh < g.Hout; ++oh) {
              const int ih = oh * g.s - g.p + ki * g.d;
              if (ih < 0 || ih >= g.H) continue;
              const double* xr = xc + static_cast<std::int64_t>(ih) * g.W + off;
              const double* gr = gp + static_cast<std::int64_t>(oh) * g.Wout;
              if (g.s == 1) {
                for (int ow = ow0; ow <= ow1; ++ow) acc += gr[ow] * xr[ow];
              } else {
                for (int ow = ow0; ow <= ow1; ++ow) acc += gr[ow] * xr[ow * g.s];
              }
            }
          }
          dw[((static_cast<std::int64_t>(co) * g.Cin + ci) * g.kh + ki) * g.kw + kj] += acc;
        }
      }
    }
  });
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding, int dilation) {
  const Shape out_shape =
      conv2d_output_shape(input.shape(), weight.shape(), stride, padding, dilation);
  const bool has_bias = bias.defined();
  if (has_bias) {
    check_arg(bias.shape().size() == 1 && bias.dim(0) == weight.dim(0),
              "conv2d: bias must be [Cout]");
  }
  const ConvGeom g{input.dim(0),  input.dim(1),  input.dim(2), input.dim(3),
                   weight.dim(0), weight.dim(2), weight.dim(3), out_shape[2],
                   out_shape[3],  stride,        padding,      dilation};

  std::vector<double> y(shape_numel(out_shape));
  conv2d_forward_kernel(input.data().data(), weight.data().data(),
                        has_bias ? bias.data().data() : nullptr, y.data(), g);

  std::vector<NodePtr> inputs{input.node(), weight.node()};
  if (has_bias) inputs.push_back(bias.node());
  return make_op(out_shape, std::move(y), std::move(inputs), [g, has_bias](Node& self) {
    const double* go = self.grad.data();
    Node& x = *self.inputs[0];
    Node& w = *self.inputs[1];
    if (x.needs_grad) {
      x.ensure_grad();
      conv2d_backward_input(go, w.value.data(), x.grad.data(), g);
    }
    if (w.needs_grad) {
      w.ensure_grad();
      conv2d_backward_weight(go, x.value.data(), w.grad.data(), g);
    }
    if (has_bias && self.inputs[2]->needs_grad) {
      Node& b = *self.inputs[2];
      b.ensure_grad();
      const std::int64_t plane = static_cast<std::int64_t>(g.Hout) * g.Wout;
      for (int bi = 0; bi < g.B; ++bi) {
        for (int co = 0; co < g.Cout; ++co) {
          const double* gp = go + (static_cast<std::int64_t>(bi) * g.Cout + co) * plane;
          double acc = 0.0;
          for (std::int64_t i = 0; i < plane; ++i) acc += gp[i];
          b.grad[co] += acc;
        }
      }
    }
  });
}

// ---- batchnorm2d ----

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   BatchNormStats& stats, double eps, double momentum,
                   bool training) {
  check_arg(input.shape().size() == 4, "batchnorm2d: input must be 4-D");
  const int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  check_arg(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
            "batchnorm2d: gamma/beta must be [C]");
  check_arg(static_cast<int>(stats.running_mean.size()) == C &&
                static_cast<int>(stats.running_var.size()) == C,
            "batchnorm2d: running stats size mismatch");
  check_arg(eps > 0.0, "batchnorm2d: eps must be positive");
  const std::int64_t n_per_c = static_cast<std::int64_t>(B) * H * W;
  if (training) check_arg(n_per_c >= 2, "batchnorm2d: train mode needs B*H*W >= 2");

  const double* x = input.data().data();
  const double* gv = gamma.data().data();
  const double* bv = beta.data().data();
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;

  std::vector<double> mean(C), inv_std(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* xp = x + (static_cast<std::int64_t>(b) * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += xp[i];
      }
      mean[c] = s / static_cast<double>(n_per_c);
    }
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* xp = x + (static_cast<std::int64_t>(b) * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const double d = xp[i] - mean[c];
          s += d * d;
        }
      }
      const double var = s / static_cast<double>(n_per_c);
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      stats.running_mean[c] = (1.0 - momentum) * stats.running_mean[c] + momentum * mean[c];
      const double unbiased = var * static_cast<double>(n_per_c) /
                              static_cast<double>(n_per_c - 1);
      stats.running_var[c] = (1.0 - momentum) * stats.running_var[c] + momentum * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = stats.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + eps);
    }
  }

  std::vector<double> xhat(input.numel());
  std::vector<double> y(input.numel());
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        const double xn = (x[base + i] - mean[c]) * inv_std[c];
        xhat[base + i] = xn;
        y[base + i] = gv[c] * xn + bv[c];
      }
    }
  }

  return make_op(
      input.shape(), std::move(y), {input.node(), gamma.node(), beta.node()},
      [B, C, plane, n_per_c, training, inv_std = std::move(inv_std),
       xhat = std::move(xhat)](Node& self) {
        const double* go = self.grad.data();
        Node& xn = *self.inputs[0];
        Node& gn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
        for (int b = 0; b < B; ++b) {
          for (int c = 0; c < C; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * plane;
            double sg = 0.0, sgx = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) {
              sg += go[base + i];
              sgx += go[base + i] * xhat[base + i];
            }
            sum_g[c] += sg;
            sum_gx[c] += sgx;
          }
        }
        if (gn.needs_grad) {
          gn.ensure_grad();
          for (int c = 0; c < C; ++c) gn.grad[c] += sum_gx[c];
        }
        if (bn.needs_grad) {
          bn.ensure_grad();
          for (int c = 0; c < C; ++c) bn.grad[c] += sum_g[c];
        }
        if (xn.needs_grad) {
          xn.ensure_grad();
          const double* gv = gn.value.data();
          const double inv_n = 1.0 / static_cast<double>(n_per_c);
          for (int b = 0; b < B; ++b) {
            for (int c = 0; c < C; ++c) {
              const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * plane;
              const double k = gv[c] * inv_std[c];
              if (training) {
                const double mg = sum_g[c] * inv_n;
                const double mgx = sum_gx[c] * inv_n;
                for (std::int64_t i = 0; i < plane; ++i) {
                  xn.grad[base + i] += k * (go[base + i] - mg - xhat[base + i] * mgx);
                }
              } else {
                for (std::int64_t i = 0; i < plane; ++i) {
                  xn.grad[base + i] += k * go[base + i];
                }
              }
            }
          }
        }
      });
}

// ---- elementwise ----

Tensor relu(const Tensor& x) {
  std::vector<double> y(x.data().begin(), x.data().end());
  for (double& v : y) v = v > 0.0 ? v : 0.0;
  return make_op(x.shape(), std::move(y), {x.node()}, [](Node& self) {
    Node& xn = *self.inputs[0];
    if (!xn.needs_grad) return;
    xn.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      if (xn.value[i] > 0.0) xn.grad[i] += self.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> y(x.numel());
  const auto xs = x.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = 1.0 / (1.0 + std::exp(-xs[i]));
  return make_op(x.shape(), std::move(y), {x.node()}, [](Node& self) {
    Node& xn = *self.inputs[0];
    if (!xn.needs_grad) return;
    xn.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double s = self.value[i];
      xn.grad[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

// ---- pooling ----

Tensor adaptive_avg_pool2d(const Tensor& x, int out_h, int out_w) {
  check_arg(x.shape().size() == 4, "adaptive_avg_pool2d: input must be 4-D");
  check_arg(out_h >= 1 && out_w >= 1, "adaptive_avg_pool2d: output dims must be >= 1");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Shape out_shape{B, C, out_h, out_w};
  std::vector<double> y(shape_numel(out_shape), 0.0);
  const double* xp = x.data().data();

  auto win = [](int i, int in, int out, int& lo, int& hi) {
    lo = (i * in) / out;
    hi = ((i + 1) * in + out - 1) / out;  // ceil
  };

  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const std::int64_t ib = (static_cast<std::int64_t>(b) * C + c) * H * W;
      const std::int64_t ob = (static_cast<std::int64_t>(b) * C + c) * out_h * out_w;
      for (int oh = 0; oh < out_h; ++oh) {
        int h0, h1;
        win(oh, H, out_h, h0, h1);
        for (int ow = 0; ow < out_w; ++ow) {
          int w0, w1;
          win(ow, W, out_w, w0, w1);
          double s = 0.0;
          for (int ih = h0; ih < h1; ++ih)
            for (int iw = w0; iw < w1; ++iw) s += xp[ib + static_cast<std::int64_t>(ih) * W + iw];
          y[ob + static_cast<std::int64_t>(oh) * out_w + ow] =
              s / (static_cast<double>(h1 - h0) * (w1 - w0));
        }
      }
    }
  }

  return make_op(out_shape, std::move(y), {x.node()},
                 [B, C, H, W, out_h, out_w, win](Node& self) {
                   Node& xn = *self.inputs[0];
                   if (!xn.needs_grad) return;
                   xn.ensure_grad();
                   const double* go = self.grad.data();
                   for (int b = 0; b < B; ++b) {
                     for (int c = 0; c < C; ++c) {
                       const std::int64_t ib = (static_cast<std::int64_t>(b) * C + c) * H * W;
                       const std::int64_t ob =
                           (static_cast<std::int64_t>(b) * C + c) * out_h * out_w;
                       for (int oh = 0; oh < out_h; ++oh) {
                         int h0, h1;
                         win(oh, H, out_h, h0, h1);
                         for (int ow = 0; ow < out_w; ++ow) {
                           int w0, w1;
                           win(ow, W, out_w, w0, w1);
                           const double g =
                               go[ob + static_cast<std::int64_t>(oh) * out_w + ow] /
                               (static_cast<double>(h1 - h0) * (w1 - w0));
                           for (int ih = h0; ih < h1; ++ih)
                             for (int iw = w0; iw < w1; ++iw)
                               xn.grad[ib + static_cast<std::int64_t>(ih) * W + iw] += g;
                         }
                       }
                     }
                   }
                 });
}

Tensor avg_pool2d(const Tensor& x, int kernel, int stride, int padding) {
  check_arg(x.shape().size() == 4, "avg_pool2d: input must be 4-D");
  check_arg(kernel >= 1 && stride >= 1 && padding >= 0, "avg_pool2d: invalid geometry");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int h_out = (H + 2 * padding - kernel) / stride + 1;
  const int w_out = (W + 2 * padding - kernel) / stride + 1;
  check_arg(H + 2 * padding >= kernel && h_out >= 1 && W + 2 * padding >= kernel && w_out >= 1,
            "avg_pool2d: kernel does not fit input geometry");
  const Shape out_shape{B, C, h_out, w_out};
  std::vector<double> y(shape_numel(out_shape), 0.0);
  const double* xp = x.data().data();
  const double inv_k2 = 1.0 / (static_cast<double>(kernel) * kernel);

  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const std::int64_t ib = (static_cast<std::int64_t>(b) * C + c) * H * W;
      const std::int64_t ob = (static_cast<std::int64_t>(b) * C + c) * h_out * w_out;
      for (int oh = 0; oh < h_out; ++oh) {
        for (int ow = 0; ow < w_out; ++ow) {
          double s = 0.0;
          for (int ki = 0; ki < kernel; ++ki) {
            const int ih = oh * stride - padding + ki;
            if (ih < 0 || ih >= H) continue;
            for (int kj = 0; kj < kernel; ++kj) {
              const int iw = ow * stride - padding + kj;
              if (iw < 0 || iw >= W) continue;
              s += xp[ib + static_cast<std::int64_t>(ih) * W + iw];
            }
          }
          // zero padding counts toward the divisor
          y[ob + static_cast<std::int64_t>(oh) * w_out + ow] = s * inv_k2;
        }
      }
    }
  }

  return make_op(out_shape, std::move(y), {x.node()},
                 [B, C, H, W, h_out, w_out, kernel, stride, padding, inv_k2](Node& self) {
                   Node& xn = *self.inputs[0];
                   if (!xn.needs_grad) return;
                   xn.ensure_grad();
                   const double* go = self.grad.data();
                   for (int b = 0; b < B; ++b) {
                     for (int c = 0; c < C; ++c) {
                       const std::int64_t ib = (static_cast<std::int64_t>(b) * C + c) * H * W;
                       const std::int64_t ob =
                           (static_cast<std::int64_t>(b) * C + c) * h_out * w_out;
                       for (int oh = 0; oh < h_out; ++oh) {
                         for (int ow = 0; ow < w_out; ++ow) {
                           const double g =
                               go[ob + static_cast<std::int64_t>(oh) * w_out + ow] * inv_k2;
                           for (int ki = 0; ki < kernel; ++ki) {
                             const int ih = oh * stride - padding + ki;
                             if (ih < 0 || ih >= H) continue;
                             for (int kj = 0; kj < kernel; ++kj) {
                               const int iw = ow * stride - padding + kj;
                               if (iw < 0 || iw >= W) continue;
                               xn.grad[ib + static_cast<std::int64_t>(ih) * W + iw] += g;
                             }
                           }
                         }
                       }
                     }
                   }
                 });
}

// ---- arithmetic ----

Tensor add(const Tensor& a, const Tensor& b) {
  check_arg(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
  std::vector<double> y(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) y[i] = av[i] + bv[i];
  return make_op(a.shape(), std::move(y), {a.node(), b.node()}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node& in = *self.inputs[k];
      if (in.needs_grad) in.accumulate(self.grad);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_arg(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
  std::vector<double> y(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) y[i] = av[i] * bv[i];
  return make_op(a.shape(), std::move(y), {a.node(), b.node()}, [](Node& self) {
    Node& an = *self.inputs[0];
    Node& bn = *self.inputs[1];
    if (an.needs_grad) {
      an.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i] * bn.value[i];
    }
    if (bn.needs_grad) {
      bn.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn.grad[i] += self.grad[i] * an.value[i];
    }
  });
}

Tensor mul_channel(const Tensor& x, const Tensor& w) {
  check_arg(x.shape().size() == 4 && w.shape().size() == 4,
            "mul_channel: inputs must be 4-D");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check_arg(w.shape() == Shape{B, C, 1, 1},
            "mul_channel: weights must be [B,C,1,1], got " + shape_str(w.shape()));
  std::vector<double> y(x.numel());
  const double* xv = x.data().data();
  const double* wv = w.data().data();
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * plane;
      const double s = wv[static_cast<std::int64_t>(b) * C + c];
      for (std::int64_t i = 0; i < plane; ++i) y[base + i] = xv[base + i] * s;
    }
  }
  return make_op(x.shape(), std::move(y), {x.node(), w.node()},
                 [B, C, plane](Node& self) {
                   Node& xn = *self.inputs[0];
                   Node& wn = *self.inputs[1];
                   const double* go = self.grad.data();
                   if (xn.needs_grad) {
                     xn.ensure_grad();
                     for (int b = 0; b < B; ++b) {
                       for (int c = 0; c < C; ++c) {
                         const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * plane;
                         const double s = wn.value[static_cast<std::int64_t>(b) * C + c];
                         for (std::int64_t i = 0; i < plane; ++i)
                           xn.grad[base + i] += go[base + i] * s;
                       }
                     }
                   }
                   if (wn.needs_grad) {
                     wn.ensure_grad();
                     for (int b = 0; b < B; ++b) {
                       for (int c = 0; c < C; ++c) {
                         const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * plane;
                         double acc = 0.0;
                         for (std::int64_t i = 0; i < plane; ++i)
                           acc += go[base + i] * xn.value[base + i];
                         wn.grad[static_cast<std::int64_t>(b) * C + c] += acc;
                       }
                     }
                   }
                 });
}

Tensor scale(const Tensor& x, double s) {
  std::vector<double> y(x.numel());
  const auto xv = x.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = xv[i] * s;
  return make_op(x.shape(), std::move(y), {x.node()}, [s](Node& self) {
    Node& xn = *self.inputs[0];
    if (!xn.needs_grad) return;
    xn.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xn.grad[i] += self.grad[i] * s;
  });
}

// ---- channel split / concat ----

Tensor narrow_channels(const Tensor& x, int start, int count) {
  check_arg(x.shape().size() == 4, "narrow_channels: input must be 4-D");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check_arg(start >= 0 && count >= 1 && start + count <= C,
            "narrow_channels: bad range [" + std::to_string(start) + "," +
                std::to_string(start + count) + ") for C=" + std::to_string(C));
  const Shape out_shape{B, count, H, W};
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  std::vector<double> y(shape_numel(out_shape));
  const double* xv = x.data().data();
  for (int b = 0; b < B; ++b) {
    std::copy(xv + (static_cast<std::int64_t>(b) * C + start) * plane,
              xv + (static_cast<std::int64_t>(b) * C + start + count) * plane,
              y.begin() + static_cast<std::int64_t>(b) * count * plane);
  }
  return make_op(out_shape, std::move(y), {x.node()},
                 [B, C, start, count, plane](Node& self) {
                   Node& xn = *self.inputs[0];
                   if (!xn.needs_grad) return;
                   xn.ensure_grad();
                   const double* go = self.grad.data();
                   for (int b = 0; b < B; ++b) {
                     double* dst = xn.grad.data() +
                                   (static_cast<std::int64_t>(b) * C + start) * plane;
                     const double* src = go + static_cast<std::int64_t>(b) * count * plane;
                     for (std::int64_t i = 0; i < count * plane; ++i) dst[i] += src[i];
                   }
                 });
}

std::vector<Tensor> split_channels(const Tensor& x, int n) {
  check_arg(x.shape().size() == 4, "split_channels: input must be 4-D");
  const int C = x.dim(1);
  check_arg(n >= 1, "split_channels: n must be >= 1");
  check_arg(C % n == 0, "split_channels: C=" + std::to_string(C) +
                            " not divisible by n=" + std::to_string(n));
  const int p = C / n;
  std::vector<Tensor> parts;
  parts.reserve(n);
  for (int i = 0; i < n; ++i) parts.push_back(narrow_channels(x, i * p, p));
  return parts;
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  check_arg(!parts.empty(), "concat_channels: empty input list");
  const int B = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  int C = 0;
  for (const auto& t : parts) {
    check_arg(t.shape().size() == 4 && t.dim(0) == B && t.dim(2) == H && t.dim(3) == W,
              "concat_channels: axis mismatch");
    C += t.dim(1);
  }
  const Shape out_shape{B, C, H, W};
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  std::vector<double> y(shape_numel(out_shape));
  std::vector<NodePtr> inputs;
  std::vector<int> widths;
  inputs.reserve(parts.size());
  int off = 0;
  for (const auto& t : parts) {
    const int c = t.dim(1);
    const double* src = t.data().data();
    for (int b = 0; b < B; ++b) {
      std::copy(src + static_cast<std::int64_t>(b) * c * plane,
                src + static_cast<std::int64_t>(b + 1) * c * plane,
                y.begin() + (static_cast<std::int64_t>(b) * C + off) * plane);
    }
    inputs.push_back(t.node());
    widths.push_back(c);
    off += c;
  }
  return make_op(out_shape, std::move(y), std::move(inputs),
                 [B, C, plane, widths](Node& self) {
                   const double* go = self.grad.data();
                   int off = 0;
                   for (size_t k = 0; k < self.inputs.size(); ++k) {
                     const int c = widths[k];
                     Node& in = *self.inputs[k];
                     if (in.needs_grad) {
                       in.ensure_grad();
                       for (int b = 0; b < B; ++b) {
                         const double* src = go + (static_cast<std::int64_t>(b) * C + off) * plane;
                         double* dst = in.grad.data() + static_cast<std::int64_t>(b) * c * plane;
                         for (std::int64_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                       }
                     }
                     off += c;
                   }
                 });
}

// ---- linear / reshape / reductions ----

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check_arg(x.shape().size() == 2, "linear: input must be [B,D]");
  check_arg(weight.shape().size() == 2, "linear: weight must be [K,D]");
  const int B = x.dim(0), D = x.dim(1), K = weight.dim(0);
  check_arg(weight.dim(1) == D, "linear: weight D mismatch");
  const bool has_bias = bias.defined();
  if (has_bias) check_arg(bias.shape() == Shape{K}, "linear: bias must be [K]");

  std::vector<double> y(static_cast<std::int64_t>(B) * K, 0.0);
  const double* xv = x.data().data();
  const double* wv = weight.data().data();
  for (int b = 0; b < B; ++b) {
    for (int k = 0; k < K; ++k) {
      double acc = has_bias ? bias.data()[k] : 0.0;
      const double* xr = xv + static_cast<std::int64_t>(b) * D;
      const double* wr = wv + static_cast<std::int64_t>(k) * D;
      for (int d = 0; d < D; ++d) acc += xr[d] * wr[d];
      y[static_cast<std::int64_t>(b) * K + k] = acc;
    }
  }

  std::vector<NodePtr> inputs{x.node(), weight.node()};
  if (has_bias) inputs.push_back(bias.node());
  return make_op({B, K}, std::move(y), std::move(inputs), [B, D, K, has_bias](Node& self) {
    const double* go = self.grad.data();
    Node& xn = *self.inputs[0];
    Node& wn = *self.inputs[1];
    if (xn.needs_grad) {
      xn.ensure_grad();
      for (int b = 0; b < B; ++b) {
        for (int k = 0; k < K; ++k) {
          const double g = go[static_cast<std::int64_t>(b) * K + k];
          const double* wr = wn.value.data() + static_cast<std::int64_t>(k) * D;
          double* dst = xn.grad.data() + static_cast<std::int64_t>(b) * D;
          for (int d = 0; d < D; ++d) dst[d] += g * wr[d];
        }
      }
    }
    if (wn.needs_grad) {
      wn.ensure_grad();
      for (int b = 0; b < B; ++b) {
        const double* xr = xn.value.data() + static_cast<std::int64_t>(b) * D;
        for (int k = 0; k < K; ++k) {
          const double g = go[static_cast<std::int64_t>(b) * K + k];
          double* dst = wn.grad.data() + static_cast<std::int64_t>(k) * D;
          for (int d = 0; d < D; ++d) dst[d] += g * xr[d];
        }
      }
    }
    if (has_bias && self.inputs[2]->needs_grad) {
      Node& bn = *self.inputs[2];
      bn.ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) bn.grad[k] += go[static_cast<std::int64_t>(b) * K + k];
    }
  });
}

Tensor flatten2d(const Tensor& x) {
  check_arg(x.shape().size() >= 2, "flatten2d: input must have >= 2 dims");
  const int B = x.dim(0);
  const int rest = static_cast<int>(x.numel() / B);
  std::vector<double> y(x.data().begin(), x.data().end());
  return make_op({B, rest}, std::move(y), {x.node()}, [](Node& self) {
    Node& xn = *self.inputs[0];
    if (xn.needs_grad) xn.accumulate(self.grad);
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_arg(shape_numel(shape) == x.numel(),
            "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<double> y(x.data().begin(), x.data().end());
  return make_op(std::move(shape), std::move(y), {x.node()}, [](Node& self) {
    Node& xn = *self.inputs[0];
    if (xn.needs_grad) xn.accumulate(self.grad);
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_op({1}, {s}, {x.node()}, [](Node& self) {
    Node& xn = *self.inputs[0];
    if (!xn.needs_grad) return;
    xn.ensure_grad();
    const double g = self.grad[0];
    for (double& d : xn.grad) d += g;
  });
}

// ---- classification head ops ----

Tensor cosine_logits(const Tensor& x, const Tensor& w) {
  check_arg(x.shape().size() == 2 && w.shape().size() == 2,
            "cosine_logits: inputs must be 2-D");
  const int B = x.dim(0), D = x.dim(1), K = w.dim(0);
  check_arg(w.dim(1) == D, "cosine_logits: feature dim mismatch");

  const double* xv = x.data().data();
  const double* wv = w.data().data();
  std::vector<double> xn_norm(B), wn_norm(K);
  for (int b = 0; b < B; ++b) {
    double s = 0.0;
    for (int d = 0; d < D; ++d) s += xv[b * D + d] * xv[b * D + d];
    xn_norm[b] = std::sqrt(s);
    check(xn_norm[b] > 1e-20, ErrorCode::invalid_argument,
          "cosine_logits: zero-norm feature row");
  }
  for (int k = 0; k < K; ++k) {
    double s = 0.0;
    for (int d = 0; d < D; ++d) s += wv[k * D + d] * wv[k * D + d];
    wn_norm[k] = std::sqrt(s);
    check(wn_norm[k] > 1e-20, ErrorCode::invalid_argument,
          "cosine_logits: zero-norm weight row");
  }

  std::vector<double> y(static_cast<std::int64_t>(B) * K);
  for (int b = 0; b < B; ++b) {
    for (int k = 0; k < K; ++k) {
      double dot = 0.0;
      for (int d = 0; d < D; ++d) dot += xv[b * D + d] * wv[k * D + d];
      y[static_cast<std::int64_t>(b) * K + k] = dot / (xn_norm[b] * wn_norm[k]);
    }
  }

  return make_op({B, K}, std::move(y), {x.node(), w.node()},
                 [B, D, K, xn_norm = std::move(xn_norm),
                  wn_norm = std::move(wn_norm)](Node& self) {
                   const double* go = self.grad.data();
                   const double* c = self.value.data();
                   Node& xn = *self.inputs[0];
                   Node& wn = *self.inputs[1];
                   const double* xv = xn.value.data();
                   const double* wv = wn.value.data();
                   if (xn.needs_grad) {
                     xn.ensure_grad();
                     for (int b = 0; b < B; ++b) {
                       for (int k = 0; k < K; ++k) {
                         const double g = go[b * K + k];
                         if (g == 0.0) continue;
                         const double cb = c[b * K + k];
                         for (int d = 0; d < D; ++d) {
                           const double what = wv[k * D + d] / wn_norm[k];
                           const double xhat = xv[b * D + d] / xn_norm[b];
                           xn.grad[b * D + d] += g * (what - cb * xhat) / xn_norm[b];
                         }
                       }
                     }
                   }
                   if (wn.needs_grad) {
                     wn.ensure_grad();
                     for (int b = 0; b < B; ++b) {
                       for (int k = 0; k < K; ++k) {
                         const double g = go[b * K + k];
                         if (g == 0.0) continue;
                         const double cb = c[b * K + k];
                         for (int d = 0; d < D; ++d) {
                           const double what = wv[k * D + d] / wn_norm[k];
                           const double xhat = xv[b * D + d] / xn_norm[b];
                           wn.grad[k * D + d] += g * (xhat - cb * what) / wn_norm[k];
                         }
                       }
                     }
                   }
                 });
}

namespace {

// Chebyshev T_m(c) and T_m'(c) = m * U_{m-1}(c) via recurrences.
void chebyshev(double c, int m, double& t, double& dt) {
  double t0 = 1.0, t1 = c;
  double u0 = 1.0, u1 = 2.0 * c;
  if (m == 0) {
    t = 1.0;
    dt = 0.0;
    return;
  }
  for (int i = 2; i <= m; ++i) {
    const double tn = 2.0 * c * t1 - t0;
    t0 = t1;
    t1 = tn;
    const double un = 2.0 * c * u1 - u0;
    u0 = u1;
    u1 = un;
  }
  t = t1;
  dt = static_cast<double>(m) * u0;  // T_m' = m * U_{m-1}
}

int margin_sector(double cosine, int m) {
  const double cl = std::clamp(cosine, -1.0, 1.0);
  const double theta = std::acos(cl);
  int k = static_cast<int>(std::floor(static_cast<double>(m) * theta / M_PI));
  if (k > m - 1) k = m - 1;
  if (k < 0) k = 0;
  return k;
}

}  // namespace

double angle_margin_psi(double cosine, int margin) {
  const int k = margin_sector(cosine, margin);
  double t, dt;
  chebyshev(std::clamp(cosine, -1.0, 1.0), margin, t, dt);
  const double sign = (k % 2 == 0) ? 1.0 : -1.0;
  return sign * t - 2.0 * k;
}

Tensor angle_margin(const Tensor& cosines, const std::vector<int>& labels,
                    int margin, double lambda) {
  check_arg(cosines.shape().size() == 2, "angle_margin: input must be [B,K]");
  const int B = cosines.dim(0), K = cosines.dim(1);
  check_arg(static_cast<int>(labels.size()) == B, "angle_margin: labels size mismatch");
  check_arg(margin >= 1, "angle_margin: margin must be >= 1");
  check_arg(lambda >= 0.0, "angle_margin: lambda must be >= 0");
  for (int y : labels) check_arg(y >= 0 && y < K, "angle_margin: label out of range");

  std::vector<double> out(cosines.data().begin(), cosines.data().end());
  if (margin > 1) {
    for (int b = 0; b < B; ++b) {
      const double c = out[static_cast<std::int64_t>(b) * K + labels[b]];
      const double psi = angle_margin_psi(c, margin);
      out[static_cast<std::int64_t>(b) * K + labels[b]] = (lambda * c + psi) / (1.0 + lambda);
    }
  }

  return make_op(cosines.shape(), std::move(out), {cosines.node()},
                 [B, K, labels, margin, lambda](Node& self) {
                   Node& cn = *self.inputs[0];
                   if (!cn.needs_grad) return;
                   cn.ensure_grad();
                   const double* go = self.grad.data();
                   for (std::int64_t i = 0; i < static_cast<std::int64_t>(B) * K; ++i)
                     cn.grad[i] += go[i];
                   if (margin > 1) {
                     for (int b = 0; b < B; ++b) {
                       const std::int64_t idx = static_cast<std::int64_t>(b) * K + labels[b];
                       const double c = cn.value[idx];
                       const int k = margin_sector(c, margin);
                       double t, dt;
                       chebyshev(std::clamp(c, -1.0, 1.0), margin, t, dt);
                       const double sign = (k % 2 == 0) ? 1.0 : -1.0;
                       const double dpsi = sign * dt;
                       const double factor = (lambda + dpsi) / (1.0 + lambda);
                       // replace the pass-through contribution with the margin one
                       cn.grad[idx] += go[idx] * (factor - 1.0);
                     }
                   }
                 });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  check_arg(logits.shape().size() == 2, "softmax_cross_entropy: logits must be [B,K]");
  const int B = logits.dim(0), K = logits.dim(1);
  check_arg(static_cast<int>(labels.size()) == B,
            "softmax_cross_entropy: labels size mismatch");
  for (int y : labels) check_arg(y >= 0 && y < K, "softmax_cross_entropy: label out of range");

  const double* z = logits.data().data();
  std::vector<double> probs(static_cast<std::int64_t>(B) * K);
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const double* zr = z + static_cast<std::int64_t>(b) * K;
    double zmax = zr[0];
    for (int k = 1; k < K; ++k) zmax = std::max(zmax, zr[k]);
    double denom = 0.0;
    for (int k = 0; k < K; ++k) denom += std::exp(zr[k] - zmax);
    const double log_denom = std::log(denom);
    for (int k = 0; k < K; ++k)
      probs[static_cast<std::int64_t>(b) * K + k] = std::exp(zr[k] - zmax) / denom;
    loss += -(zr[labels[b]] - zmax - log_denom);
  }
  loss /= static_cast<double>(B);

  return make_op({1}, {loss}, {logits.node()},
                 [B, K, labels, probs = std::move(probs)](Node& self) {
                   Node& zn = *self.inputs[0];
                   if (!zn.needs_grad) return;
                   zn.ensure_grad();
                   const double g = self.grad[0] / static_cast<double>(B);
                   for (int b = 0; b < B; ++b) {
                     for (int k = 0; k < K; ++k) {
                       const std::int64_t i = static_cast<std::int64_t>(b) * K + k;
                       const double onehot = (k == labels[b]) ? 1.0 : 0.0;
                       zn.grad[i] += g * (probs[i] - onehot);
                     }
                   }
                 });
}

}  // namespace fsd
