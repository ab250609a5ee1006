#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fsd/rng.hpp"
#include "fsd/tensor.hpp"

namespace fsd {

struct NetworkConfig {
  int n_groups = 8;
  int stem_channels = 16;
  std::vector<int> widths{32, 64, 128, 256};
  std::vector<int> mpif_blocks{1, 2, 1, 2};  // MPIF bottlenecks after each layer's conv one
  std::vector<int> strides{1, 2, 2, 2};
  int se_reduction = 8;
  int margin = 4;
  double lambda_base = 1000.0;  // A-softmax annealing: max(lambda_min, base/(1+gamma*step))
  double lambda_gamma = 0.12;
  double lambda_min = 5.0;
  int in_height = 45;
  int in_width = 600;
  int num_classes = 2;

  void validate() const;
  double margin_lambda(long long step) const;
};

std::string network_config_to_json(const NetworkConfig& cfg);
NetworkConfig network_config_from_json(const std::string& text);

struct Conv2dLayer {
  Tensor weight;  // [Cout,Cin,k,k]
  Tensor bias;    // undefined when the conv feeds a BN
  int stride = 1;
  int padding = 0;
  int dilation = 1;

  Tensor forward(const Tensor& x) const {
    return conv2d(x, weight, bias, stride, padding, dilation);
  }
};

struct BatchNorm2dLayer {
  Tensor gamma;
  Tensor beta;
  BatchNormStats stats;
  double eps = 1e-5;
  double momentum = 0.1;

  Tensor forward(const Tensor& x, bool training) {
    return batchnorm2d(x, gamma, beta, stats, eps, momentum, training);
  }
};

struct LinearLayer {
  Tensor weight;  // [K,D]
  Tensor bias;    // [K]

  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
};

// Eq-style two-branch fusion: dilated 3x3 branches, per-channel weights from
// a sigmoid-pooled energy conv, weighted sum.
struct MpifModule {
  Conv2dLayer branch1;  // dilation 1, padding 1
  Conv2dLayer branch2;  // dilation 2, padding 2
  Conv2dLayer energy1;  // same geometry as branch1, with bias
  Conv2dLayer energy2;

  Tensor forward(const Tensor& x) const;
};

// Per-channel weights for one branch: Avg(Sigmoid(Conv2d(c))) -> [B,p,1,1].
Tensor channel_weights(const Tensor& branch_out, const Conv2dLayer& energy_conv);

// Weighted fusion of the two branch outputs (channel-broadcast multiply, sum).
Tensor mpif_fuse(const Tensor& c1, const Tensor& c2, const Tensor& w1, const Tensor& w2);

// Hierarchical residual recurrence over channel groups:
//   y_1 = p_1, y_2 = K(p_2), y_i = K(p_i + y_{i-1}).
// In stage mode (strided blocks) every transform sees its own group only and
// the first group is handled by the caller.
std::vector<Tensor> scale_forward(
    const std::vector<Tensor>& groups,
    const std::vector<std::function<Tensor(const Tensor&)>>& transforms,
    bool stage_mode);

struct GroupTransform {
  bool is_mpif = false;
  Conv2dLayer conv;  // plain 3x3 when !is_mpif
  MpifModule mpif;
  BatchNorm2dLayer bn;

  Tensor forward(const Tensor& x, bool training);
};

struct SeBlock {
  LinearLayer fc1;
  LinearLayer fc2;

  Tensor forward(const Tensor& x) const;
};

struct Bottleneck {
  int n_groups = 8;
  int stride = 1;
  Conv2dLayer reduce;
  BatchNorm2dLayer bn1;
  std::vector<GroupTransform> transforms;  // for groups 2..n
  Conv2dLayer expand;
  BatchNorm2dLayer bn2;
  SeBlock se;
  bool has_shortcut = false;
  Conv2dLayer shortcut_conv;
  BatchNorm2dLayer shortcut_bn;

  Tensor forward(const Tensor& x, bool training);
};

struct ForwardTrace {
  Shape stem;
  std::vector<Shape> layers;
  Shape pooled;
  Shape logits;
};

class Network {
 public:
  Network() = default;
  static Network build(const NetworkConfig& cfg, std::uint64_t seed);

  const NetworkConfig& config() const { return cfg_; }

  // Features after global average pooling, [B, widths.back()].
  Tensor forward_features(const Tensor& x, bool training, ForwardTrace* trace = nullptr);

  // Cosine logits [B, num_classes]; the evaluation-time output.
  Tensor forward_cosines(const Tensor& x, bool training, ForwardTrace* trace = nullptr);

  // Margin-adjusted logits for training (lambda from the annealing schedule).
  Tensor forward_train_logits(const Tensor& x, const std::vector<int>& labels,
                              long long step);

  // Bonafide-minus-spoof cosine score, one per batch row.
  std::vector<double> score(const Tensor& x);

  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
  void visit_buffers(
      const std::function<void(const std::string&, std::vector<double>&)>& fn);
  std::size_t num_parameters();

  // Rounds every parameter and BN stat to its nearest f32 value, so a saved
  // checkpoint reproduces in-memory eval outputs exactly.
  void quantize_params_f32();

  std::vector<Bottleneck>& blocks() { return blocks_; }
  Tensor& head_weight() { return head_weight_; }

 private:
  NetworkConfig cfg_;
  Conv2dLayer stem_;
  BatchNorm2dLayer stem_bn_;
  std::vector<Bottleneck> blocks_;
  std::vector<int> layer_of_block_;  // layer index per bottleneck
  Tensor head_weight_;               // [num_classes, widths.back()]
};

// Checkpoint container: magic "MPIF", version, step counter, canonical config
// JSON, then named parameter and BN-stat blobs (f32).  Bit-exact round trip.
void save_checkpoint(const std::string& path, Network& net, long long step);
Network load_checkpoint(const std::string& path, long long* step_out = nullptr);

}  // namespace fsd
