#include "fsd/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "fsd/error.hpp"

namespace fsd {

using nlohmann::json;

void NetworkConfig::validate() const {
  check_arg(n_groups >= 2, "config: n_groups must be >= 2");
  check_arg(stem_channels >= 1, "config: stem_channels must be >= 1");
  check_arg(!widths.empty(), "config: widths must be non-empty");
  check_arg(widths.size() == mpif_blocks.size() && widths.size() == strides.size(),
            "config: widths/mpif_blocks/strides must have equal length");
  for (int w : widths) {
    check_arg(w >= 1 && w % n_groups == 0,
              "config: every width must be divisible by n_groups (" +
                  std::to_string(w) + " % " + std::to_string(n_groups) + ")");
    check_arg(w % se_reduction == 0,
              "config: every width must be divisible by se_reduction");
  }
  for (int m : mpif_blocks) check_arg(m >= 0, "config: mpif_blocks must be >= 0");
  for (int s : strides) check_arg(s >= 1, "config: strides must be >= 1");
  check_arg(se_reduction >= 1, "config: se_reduction must be >= 1");
  check_arg(margin >= 1, "config: margin must be >= 1");
  check_arg(lambda_min >= 0.0 && lambda_base >= 0.0 && lambda_gamma >= 0.0,
            "config: annealing constants must be >= 0");
  check_arg(in_height >= 1 && in_width >= 1, "config: input dims must be >= 1");
  check_arg(num_classes >= 2, "config: num_classes must be >= 2");
}

double NetworkConfig::margin_lambda(long long step) const {
  const double lam = lambda_base / (1.0 + lambda_gamma * static_cast<double>(step));
  return std::max(lambda_min, lam);
}

std::string network_config_to_json(const NetworkConfig& cfg) {
  json j;
  j["n_groups"] = cfg.n_groups;
  j["stem_channels"] = cfg.stem_channels;
  j["widths"] = cfg.widths;
  j["mpif_blocks"] = cfg.mpif_blocks;
  j["strides"] = cfg.strides;
  j["se_reduction"] = cfg.se_reduction;
  j["margin"] = cfg.margin;
  j["lambda_base"] = cfg.lambda_base;
  j["lambda_gamma"] = cfg.lambda_gamma;
  j["lambda_min"] = cfg.lambda_min;
  j["in_height"] = cfg.in_height;
  j["in_width"] = cfg.in_width;
  j["num_classes"] = cfg.num_classes;
  return j.dump();
}

NetworkConfig network_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::format, std::string("network config: bad JSON: ") + e.what());
  }
  NetworkConfig cfg;
  try {
    if (j.contains("n_groups")) cfg.n_groups = j["n_groups"].get<int>();
    if (j.contains("stem_channels")) cfg.stem_channels = j["stem_channels"].get<int>();
    if (j.contains("widths")) cfg.widths = j["widths"].get<std::vector<int>>();
    if (j.contains("mpif_blocks")) cfg.mpif_blocks = j["mpif_blocks"].get<std::vector<int>>();
    if (j.contains("strides")) cfg.strides = j["strides"].get<std::vector<int>>();
    if (j.contains("se_reduction")) cfg.se_reduction = j["se_reduction"].get<int>();
    if (j.contains("margin")) cfg.margin = j["margin"].get<int>();
    if (j.contains("lambda_base")) cfg.lambda_base = j["lambda_base"].get<double>();
    if (j.contains("lambda_gamma")) cfg.lambda_gamma = j["lambda_gamma"].get<double>();
    if (j.contains("lambda_min")) cfg.lambda_min = j["lambda_min"].get<double>();
    if (j.contains("in_height")) cfg.in_height = j["in_height"].get<int>();
    if (j.contains("in_width")) cfg.in_width = j["in_width"].get<int>();
    if (j.contains("num_classes")) cfg.num_classes = j["num_classes"].get<int>();
  } catch (const json::exception& e) {
    raise(ErrorCode::format, std::string("network config: bad field: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---- parameter init ----

namespace {

double snap_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

Tensor he_conv_weight(int c_out, int c_in, int k, Rng& rng) {
  const double sd = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k));
  std::vector<double> w(static_cast<std::size_t>(c_out) * c_in * k * k);
  for (double& v : w) v = snap_f32(rng.normal(0.0, sd));
  return Tensor::from_data({c_out, c_in, k, k}, std::move(w), true);
}

Tensor he_linear_weight(int k_out, int d_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(d_in));
  std::vector<double> w(static_cast<std::size_t>(k_out) * d_in);
  for (double& v : w) v = snap_f32(rng.normal(0.0, sd));
  return Tensor::from_data({k_out, d_in}, std::move(w), true);
}

Conv2dLayer make_conv(int c_out, int c_in, int k, int stride, int padding,
                      int dilation, bool with_bias, Rng& rng) {
  Conv2dLayer layer;
  layer.weight = he_conv_weight(c_out, c_in, k, rng);
  if (with_bias) layer.bias = Tensor::zeros({c_out}, true);
  layer.stride = stride;
  layer.padding = padding;
  layer.dilation = dilation;
  return layer;
}

BatchNorm2dLayer make_bn(int channels) {
  BatchNorm2dLayer bn;
  bn.gamma = Tensor::full({channels}, 1.0, true);
  bn.beta = Tensor::zeros({channels}, true);
  bn.stats.running_mean.assign(static_cast<std::size_t>(channels), 0.0);
  bn.stats.running_var.assign(static_cast<std::size_t>(channels), 1.0);
  return bn;
}

LinearLayer make_linear(int k_out, int d_in, Rng& rng) {
  LinearLayer l;
  l.weight = he_linear_weight(k_out, d_in, rng);
  l.bias = Tensor::zeros({k_out}, true);
  return l;
}

MpifModule make_mpif(int p, Rng& rng) {
  MpifModule m;
  m.branch1 = make_conv(p, p, 3, 1, 1, 1, false, rng);
  m.branch2 = make_conv(p, p, 3, 1, 2, 2, false, rng);
  m.energy1 = make_conv(p, p, 3, 1, 1, 1, true, rng);
  m.energy2 = make_conv(p, p, 3, 1, 2, 2, true, rng);
  return m;
}

}  // namespace

// ---- module forwards ----

Tensor channel_weights(const Tensor& branch_out, const Conv2dLayer& energy_conv) {
  return adaptive_avg_pool2d(sigmoid(energy_conv.forward(branch_out)), 1, 1);
}

Tensor mpif_fuse(const Tensor& c1, const Tensor& c2, const Tensor& w1,
                 const Tensor& w2) {
  return add(mul_channel(c1, w1), mul_channel(c2, w2));
}

Tensor MpifModule::forward(const Tensor& x) const {
  const Tensor c1 = branch1.forward(x);
  const Tensor c2 = branch2.forward(x);
  const Tensor w1 = channel_weights(c1, energy1);
  const Tensor w2 = channel_weights(c2, energy2);
  return mpif_fuse(c1, c2, w1, w2);
}

std::vector<Tensor> scale_forward(
    const std::vector<Tensor>& groups,
    const std::vector<std::function<Tensor(const Tensor&)>>& transforms,
    bool stage_mode) {
  check_arg(groups.size() >= 2, "scale_forward: need at least 2 groups");
  check_arg(transforms.size() == groups.size() - 1,
            "scale_forward: need one transform per group after the first");
  std::vector<Tensor> out;
  out.reserve(groups.size());
  out.push_back(groups[0]);
  for (std::size_t i = 1; i < groups.size(); ++i) {
    if (stage_mode || i == 1) {
      out.push_back(transforms[i - 1](groups[i]));
    } else {
      out.push_back(transforms[i - 1](add(groups[i], out[i - 1])));
    }
  }
  return out;
}

Tensor GroupTransform::forward(const Tensor& x, bool training) {
  const Tensor t = is_mpif ? mpif.forward(x) : conv.forward(x);
  return relu(bn.forward(t, training));
}

Tensor SeBlock::forward(const Tensor& x) const {
  const int B = x.dim(0), C = x.dim(1);
  Tensor s = flatten2d(adaptive_avg_pool2d(x, 1, 1));
  s = relu(fc1.forward(s));
  s = sigmoid(fc2.forward(s));
  return mul_channel(x, reshape(s, {B, C, 1, 1}));
}

Tensor Bottleneck::forward(const Tensor& x, bool training) {
  Tensor h = relu(bn1.forward(reduce.forward(x), training));

  std::vector<Tensor> groups = split_channels(h, n_groups);
  std::vector<std::function<Tensor(const Tensor&)>> fns;
  fns.reserve(transforms.size());
  for (auto& t : transforms) {
    fns.emplace_back([&t, training](const Tensor& in) { return t.forward(in, training); });
  }
  const bool stage = stride > 1;
  if (stage) {
    // The untransformed first group still has to be downsampled.
    groups[0] = avg_pool2d(groups[0], 3, stride, 1);
  }
  std::vector<Tensor> ys = scale_forward(groups, fns, stage);
  Tensor merged = concat_channels(ys);

  Tensor out = bn2.forward(expand.forward(merged), training);
  out = se.forward(out);

  Tensor identity = has_shortcut
                        ? shortcut_bn.forward(shortcut_conv.forward(x), training)
                        : x;
  return relu(add(out, identity));
}

// ---- network ----

Network Network::build(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Network net;
  net.cfg_ = cfg;
  Rng rng = Rng::derive(seed, {0x6d6f64656cULL});  // parameter stream

  net.stem_ = make_conv(cfg.stem_channels, 1, 1, 1, 0, 1, false, rng);
  net.stem_bn_ = make_bn(cfg.stem_channels);

  int in_ch = cfg.stem_channels;
  for (std::size_t layer = 0; layer < cfg.widths.size(); ++layer) {
    const int width = cfg.widths[layer];
    const int n_blocks = 1 + cfg.mpif_blocks[layer];
    for (int b = 0; b < n_blocks; ++b) {
      const bool first = b == 0;
      const int stride = first ? cfg.strides[layer] : 1;
      const bool is_mpif = !first;
      const int p = width / cfg.n_groups;

      Bottleneck blk;
      blk.n_groups = cfg.n_groups;
      blk.stride = stride;
      blk.reduce = make_conv(width, in_ch, 1, 1, 0, 1, false, rng);
      blk.bn1 = make_bn(width);
      for (int g = 1; g < cfg.n_groups; ++g) {
        GroupTransform t;
        t.is_mpif = is_mpif;
        if (is_mpif) {
          t.mpif = make_mpif(p, rng);
        } else {
          t.conv = make_conv(p, p, 3, stride, 1, 1, false, rng);
        }
        t.bn = make_bn(p);
        blk.transforms.push_back(std::move(t));
      }
      blk.expand = make_conv(width, width, 1, 1, 0, 1, false, rng);
      blk.bn2 = make_bn(width);
      blk.se.fc1 = make_linear(width / cfg.se_reduction, width, rng);
      blk.se.fc2 = make_linear(width, width / cfg.se_reduction, rng);
      blk.has_shortcut = stride != 1 || in_ch != width;
      if (blk.has_shortcut) {
        blk.shortcut_conv = make_conv(width, in_ch, 1, stride, 0, 1, false, rng);
        blk.shortcut_bn = make_bn(width);
      }
      net.blocks_.push_back(std::move(blk));
      net.layer_of_block_.push_back(static_cast<int>(layer));
      in_ch = width;
    }
  }

  net.head_weight_ = he_linear_weight(cfg.num_classes, cfg.widths.back(), rng);
  return net;
}

Tensor Network::forward_features(const Tensor& x, bool training, ForwardTrace* trace) {
  check_arg(x.shape().size() == 4 && x.dim(1) == 1 && x.dim(2) == cfg_.in_height &&
                x.dim(3) == cfg_.in_width,
            "network: input must be [B,1," + std::to_string(cfg_.in_height) + "," +
                std::to_string(cfg_.in_width) + "], got " + shape_str(x.shape()));

  Tensor h = relu(stem_bn_.forward(stem_.forward(x), training));
  if (trace) trace->stem = h.shape();

  int prev_layer = -1;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (trace && layer_of_block_[i] != prev_layer && prev_layer >= 0) {
      trace->layers.push_back(h.shape());
    }
    prev_layer = layer_of_block_[i];
    h = blocks_[i].forward(h, training);
  }
  if (trace) trace->layers.push_back(h.shape());

  Tensor pooled = adaptive_avg_pool2d(h, 1, 1);
  if (trace) trace->pooled = pooled.shape();
  return flatten2d(pooled);
}

Tensor Network::forward_cosines(const Tensor& x, bool training, ForwardTrace* trace) {
  const Tensor feats = forward_features(x, training, trace);
  Tensor logits = cosine_logits(feats, head_weight_);
  if (trace) trace->logits = logits.shape();
  return logits;
}

Tensor Network::forward_train_logits(const Tensor& x, const std::vector<int>& labels,
                                     long long step) {
  const Tensor cosines = forward_cosines(x, true);
  return angle_margin(cosines, labels, cfg_.margin, cfg_.margin_lambda(step));
}

std::vector<double> Network::score(const Tensor& x) {
  NoGradGuard no_grad;
  const Tensor logits = forward_cosines(x, false);
  const int B = logits.dim(0);
  std::vector<double> out(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    out[static_cast<std::size_t>(b)] =
        logits.data()[static_cast<std::size_t>(b) * cfg_.num_classes] -
        logits.data()[static_cast<std::size_t>(b) * cfg_.num_classes + 1];
  }
  return out;
}

void Network::visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("stem.conv.weight", stem_.weight);
  fn("stem.bn.gamma", stem_bn_.gamma);
  fn("stem.bn.beta", stem_bn_.beta);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Bottleneck& b = blocks_[i];
    const std::string prefix =
        "layer" + std::to_string(layer_of_block_[i] + 1) + ".block" +
        std::to_string(i) + ".";
    fn(prefix + "reduce.weight", b.reduce.weight);
    fn(prefix + "bn1.gamma", b.bn1.gamma);
    fn(prefix + "bn1.beta", b.bn1.beta);
    for (std::size_t t = 0; t < b.transforms.size(); ++t) {
      GroupTransform& g = b.transforms[t];
      const std::string tp = prefix + "transform" + std::to_string(t) + ".";
      if (g.is_mpif) {
        fn(tp + "mpif.branch1.weight", g.mpif.branch1.weight);
        fn(tp + "mpif.branch2.weight", g.mpif.branch2.weight);
        fn(tp + "mpif.energy1.weight", g.mpif.energy1.weight);
        fn(tp + "mpif.energy1.bias", g.mpif.energy1.bias);
        fn(tp + "mpif.energy2.weight", g.mpif.energy2.weight);
        fn(tp + "mpif.energy2.bias", g.mpif.energy2.bias);
      } else {
        fn(tp + "conv.weight", g.conv.weight);
      }
      fn(tp + "bn.gamma", g.bn.gamma);
      fn(tp + "bn.beta", g.bn.beta);
    }
    fn(prefix + "expand.weight", b.expand.weight);
    fn(prefix + "bn2.gamma", b.bn2.gamma);
    fn(prefix + "bn2.beta", b.bn2.beta);
    fn(prefix + "se.fc1.weight", b.se.fc1.weight);
    fn(prefix + "se.fc1.bias", b.se.fc1.bias);
    fn(prefix + "se.fc2.weight", b.se.fc2.weight);
    fn(prefix + "se.fc2.bias", b.se.fc2.bias);
    if (b.has_shortcut) {
      fn(prefix + "shortcut.conv.weight", b.shortcut_conv.weight);
      fn(prefix + "shortcut.bn.gamma", b.shortcut_bn.gamma);
      fn(prefix + "shortcut.bn.beta", b.shortcut_bn.beta);
    }
  }
  fn("head.weight", head_weight_);
}

void Network::visit_buffers(
    const std::function<void(const std::string&, std::vector<double>&)>& fn) {
  fn("stem.bn.running_mean", stem_bn_.stats.running_mean);
  fn("stem.bn.running_var", stem_bn_.stats.running_var);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Bottleneck& b = blocks_[i];
    const std::string prefix =
        "layer" + std::to_string(layer_of_block_[i] + 1) + ".block" +
        std::to_string(i) + ".";
    fn(prefix + "bn1.running_mean", b.bn1.stats.running_mean);
    fn(prefix + "bn1.running_var", b.bn1.stats.running_var);
    for (std::size_t t = 0; t < b.transforms.size(); ++t) {
      const std::string tp = prefix + "transform" + std::to_string(t) + ".";
      fn(tp + "bn.running_mean", b.transforms[t].bn.stats.running_mean);
      fn(tp + "bn.running_var", b.transforms[t].bn.stats.running_var);
    }
    fn(prefix + "bn2.running_mean", b.bn2.stats.running_mean);
    fn(prefix + "bn2.running_var", b.bn2.stats.running_var);
    if (b.has_shortcut) {
      fn(prefix + "shortcut.bn.running_mean", b.shortcut_bn.stats.running_mean);
      fn(prefix + "shortcut.bn.running_var", b.shortcut_bn.stats.running_var);
    }
  }
}

std::size_t Network::num_parameters() {
  std::size_t n = 0;
  visit_params([&n](const std::string&, Tensor& t) { n += static_cast<std::size_t>(t.numel()); });
  return n;
}

void Network::quantize_params_f32() {
  visit_params([](const std::string&, Tensor& t) {
    for (double& v : t.mutable_data()) v = static_cast<double>(static_cast<float>(v));
  });
  visit_buffers([](const std::string&, std::vector<double>& b) {
    for (double& v : b) v = static_cast<double>(static_cast<float>(v));
  });
}

// ---- checkpoint ----

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

template <typename T>
void write_le(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

void write_name(std::ostream& out, const std::string& name) {
  write_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
}

std::string read_name(std::istream& in) {
  const auto len = read_le<std::uint16_t>(in);
  std::string s(len, '\0');
  in.read(s.data(), len);
  return s;
}

void write_f32_payload(std::ostream& out, std::span<const double> data) {
  std::vector<float> f(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) f[i] = static_cast<float>(data[i]);
  out.write(reinterpret_cast<const char*>(f.data()),
            static_cast<std::streamsize>(f.size() * sizeof(float)));
}

void read_f32_payload(std::istream& in, std::span<double> data) {
  std::vector<float> f(data.size());
  in.read(reinterpret_cast<char*>(f.data()),
          static_cast<std::streamsize>(f.size() * sizeof(float)));
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<double>(f[i]);
}

}  // namespace

void save_checkpoint(const std::string& path, Network& net, long long step) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), ErrorCode::io, "cannot create checkpoint: " + path);

  out.write("MPIF", 4);
  write_le<std::uint32_t>(out, kCheckpointVersion);
  write_le<std::int64_t>(out, step);
  const std::string cfg = network_config_to_json(net.config());
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  std::uint32_t n_params = 0;
  net.visit_params([&n_params](const std::string&, Tensor&) { ++n_params; });
  write_le<std::uint32_t>(out, n_params);
  net.visit_params([&out](const std::string& name, Tensor& t) {
    write_name(out, name);
    write_le<std::uint8_t>(out, kDtypeF32);
    write_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.shape().size()));
    for (int d : t.shape()) write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    write_f32_payload(out, t.data());
  });

  std::uint32_t n_buffers = 0;
  net.visit_buffers([&n_buffers](const std::string&, std::vector<double>&) { ++n_buffers; });
  write_le<std::uint32_t>(out, n_buffers);
  net.visit_buffers([&out](const std::string& name, std::vector<double>& b) {
    write_name(out, name);
    write_le<std::uint8_t>(out, kDtypeF32);
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(b.size()));
    write_f32_payload(out, b);
  });
  check(out.good(), ErrorCode::io, "failed writing checkpoint: " + path);
}

Network load_checkpoint(const std::string& path, long long* step_out) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), ErrorCode::io, "cannot open checkpoint: " + path);

  char magic[4];
  in.read(magic, 4);
  check(in.good() && std::memcmp(magic, "MPIF", 4) == 0, ErrorCode::format,
        path + ": bad checkpoint magic");
  const auto version = read_le<std::uint32_t>(in);
  check(version == kCheckpointVersion, ErrorCode::format,
        path + ": unsupported checkpoint version");
  const auto step = read_le<std::int64_t>(in);
  const auto cfg_len = read_le<std::uint32_t>(in);
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), cfg_len);
  check(in.good(), ErrorCode::format, path + ": truncated checkpoint header");

  Network net = Network::build(network_config_from_json(cfg_text), 0);

  const auto n_params = read_le<std::uint32_t>(in);
  std::uint32_t expected_params = 0;
  net.visit_params([&expected_params](const std::string&, Tensor&) { ++expected_params; });
  check(n_params == expected_params, ErrorCode::format,
        path + ": checkpoint/config mismatch (parameter count)");
  net.visit_params([&in, &path](const std::string& name, Tensor& t) {
    const std::string got = read_name(in);
    check(got == name, ErrorCode::format,
          path + ": checkpoint/config mismatch (expected " + name + ", found " + got + ")");
    const auto dtype = read_le<std::uint8_t>(in);
    check(dtype == kDtypeF32, ErrorCode::format, path + ": unsupported blob dtype");
    const auto ndim = read_le<std::uint8_t>(in);
    check(ndim == t.shape().size(), ErrorCode::format,
          path + ": checkpoint/config mismatch (rank of " + name + ")");
    for (int d : t.shape()) {
      const auto got_d = read_le<std::uint32_t>(in);
      check(static_cast<int>(got_d) == d, ErrorCode::format,
            path + ": checkpoint/config mismatch (shape of " + name + ")");
    }
    read_f32_payload(in, t.mutable_data());
  });

  const auto n_buffers = read_le<std::uint32_t>(in);
  std::uint32_t expected_buffers = 0;
  net.visit_buffers([&expected_buffers](const std::string&, std::vector<double>&) {
    ++expected_buffers;
  });
  check(n_buffers == expected_buffers, ErrorCode::format,
        path + ": checkpoint/config mismatch (buffer count)");
  net.visit_buffers([&in, &path](const std::string& name, std::vector<double>& b) {
    const std::string got = read_name(in);
    check(got == name, ErrorCode::format,
          path + ": checkpoint/config mismatch (expected buffer " + name + ")");
    const auto dtype = read_le<std::uint8_t>(in);
    check(dtype == kDtypeF32, ErrorCode::format, path + ": unsupported blob dtype");
    const auto len = read_le<std::uint32_t>(in);
    check(len == b.size(), ErrorCode::format,
          path + ": checkpoint/config mismatch (length of " + name + ")");
    read_f32_payload(in, b);
  });
  check(in.good(), ErrorCode::format, path + ": truncated checkpoint");

  if (step_out) *step_out = step;
  return net;
}

}  // namespace fsd
