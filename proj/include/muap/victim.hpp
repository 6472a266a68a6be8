// SPDX-License-Identifier: Apache-2.0
//
// Small victim classifiers, their SGD trainer and checkpoint I/O.
//
// Architectures (valid convolutions unless noted, 2x2 max pooling):
//   lenet5_gray  1x28x28: conv 1->6 5x5 pad 2, relu, pool, conv 6->16 5x5, relu,
//                pool, fc 400->120, relu, fc 120->84, relu, fc 84->classes
//   lenet7_rgb   3x32x32: conv 3->8 3x3, relu, conv 8->16 3x3, relu, pool,
//                conv 16->32 3x3, relu, pool, fc 1152->64, relu, fc 64->classes
//   mlp_tiny     any shape: flatten, fc ->32, relu, fc 32->classes
//
// Parameter order is the order of the layers above, weight before bias.
// Fully connected weights are stored (in, out).
#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "muap/checkpoint.hpp"
#include "muap/datasets.hpp"
#include "muap/ops.hpp"
#include "muap/rng.hpp"

namespace muap {

enum class ArchKind { kLenet5Gray = 0, kLenet7Rgb = 1, kMlpTiny = 2 };

inline const char* arch_name(ArchKind k) {
  switch (k) {
    case ArchKind::kLenet5Gray: return "lenet5_gray";
    case ArchKind::kLenet7Rgb: return "lenet7_rgb";
    case ArchKind::kMlpTiny: return "mlp_tiny";
  }
  return "?";
}

inline ArchKind parse_arch(const std::string& s) {
  if (s == "lenet5_gray") return ArchKind::kLenet5Gray;
  if (s == "lenet7_rgb") return ArchKind::kLenet7Rgb;
  if (s == "mlp_tiny") return ArchKind::kMlpTiny;
  throw InvalidArgument("unknown architecture '" + s + "' (expected lenet5_gray, lenet7_rgb or mlp_tiny)");
}

struct VictimArch {
  ArchKind kind = ArchKind::kMlpTiny;
  ImageShape input;
  std::size_t num_classes = 10;

  VictimArch() = default;
  VictimArch(ArchKind k, ImageShape in, std::size_t classes) : kind(k), input(in), num_classes(classes) {
    if (classes < 2) throw InvalidArgument("a classifier needs at least 2 classes");
    if (k == ArchKind::kLenet5Gray && !(in == ImageShape{1, 28, 28})) {
      throw ShapeError("lenet5_gray requires input 1x28x28, got " + in.str());
    }
    if (k == ArchKind::kLenet7Rgb && !(in == ImageShape{3, 32, 32})) {
      throw ShapeError("lenet7_rgb requires input 3x32x32, got " + in.str());
    }
  }
};

struct Layer {
  std::string name;
  Shape weight, bias;
};

inline constexpr std::size_t kMlpHidden = 32;

inline std::vector<Layer> layer_table(const VictimArch& a) {
  const std::size_t k = a.num_classes;
  switch (a.kind) {
    case ArchKind::kLenet5Gray:
      return {{"conv1", {6, 1, 5, 5}, {6}},  {"conv2", {16, 6, 5, 5}, {16}}, {"fc1", {400, 120}, {120}},
              {"fc2", {120, 84}, {84}},      {"fc3", {84, k}, {k}}};
    case ArchKind::kLenet7Rgb:
      return {{"conv1", {8, 3, 3, 3}, {8}},   {"conv2", {16, 8, 3, 3}, {16}}, {"conv3", {32, 16, 3, 3}, {32}},
              {"fc1", {1152, 64}, {64}},      {"fc2", {64, k}, {k}}};
    case ArchKind::kMlpTiny:
      return {{"fc1", {a.input.numel(), kMlpHidden}, {kMlpHidden}}, {"fc2", {kMlpHidden, k}, {k}}};
  }
  return {};
}

struct VictimModel {
  VictimArch arch;
  NamedTensors params;
  float train_accuracy = 0.0f;

  const Tensor& param(const std::string& name) const { return find_tensor(params, name); }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
inline NamedTensors init_params(const VictimArch& arch, std::uint64_t seed) {
  Rng rng(seed);
  NamedTensors out;
  for (const Layer& l : layer_table(arch)) {
    const std::size_t fan_in = l.weight.size() == 4 ? l.weight[1] * l.weight[2] * l.weight[3] : l.weight[0];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (const auto& [suffix, shape] : {std::pair{".weight", l.weight}, std::pair{".bias", l.bias}}) {
      std::vector<float> v(shape_numel(shape));
      for (float& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
      out.emplace_back(l.name + suffix, Tensor(shape, std::move(v)));
    }
  }
  return out;
}

/// Logits (B, classes) for a batch (B, C, H, W); `params` follows
/// layer_table order and may be tape-recorded.
inline Tensor forward_with(const VictimArch& arch, const std::vector<Tensor>& params, const Tensor& batch) {
  if (batch.dim() != 4 || !(ImageShape{batch.size(1), batch.size(2), batch.size(3)} == arch.input)) {
    throw ShapeError(std::string(arch_name(arch.kind)) + " expects batches (B," + arch.input.str() + "), got " +
                     shape_str(batch.shape()));
  }
  const std::size_t B = batch.size(0);
  auto fc = [&](const Tensor& x, std::size_t i) { return add(matmul(x, params[i]), params[i + 1]); };
  auto conv = [&](const Tensor& x, std::size_t i, std::size_t pad) {
    return relu(add_channel(conv2d(x, params[i], pad), params[i + 1]));
  };
  switch (arch.kind) {
    case ArchKind::kLenet5Gray: {
      Tensor h = maxpool2(conv(batch, 0, 2));
      h = maxpool2(conv(h, 2, 0));
      h = reshape(h, {B, 400});
      h = relu(fc(h, 4));
      h = relu(fc(h, 6));
      return fc(h, 8);
    }
    case ArchKind::kLenet7Rgb: {
      Tensor h = conv(batch, 0, 0);
      h = maxpool2(conv(h, 2, 0));
      h = maxpool2(conv(h, 4, 0));
      h = reshape(h, {B, 1152});
      h = relu(fc(h, 6));
      return fc(h, 8);
    }
    case ArchKind::kMlpTiny: {
      Tensor h = reshape(batch, {B, arch.input.numel()});
      h = relu(fc(h, 0));
      return fc(h, 2);
    }
  }
  throw InvalidArgument("unknown architecture");
}

inline std::vector<Tensor> param_values(const VictimModel& m) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : m.params) out.push_back(t);
  return out;
}

inline Tensor forward_logits(const VictimModel& m, const Tensor& batch) {
  return forward_with(m.arch, param_values(m), batch);
}

inline std::size_t argmax_row(std::span<const float> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

/// Fraction of images whose argmax equals the label (ties go to the lowest
/// class index).
inline double accuracy(const VictimModel& m, const LabeledImages& data, std::size_t chunk = 256) {
  std::size_t correct = 0;
  const std::vector<Tensor> params = param_values(m);
  for (std::size_t lo = 0; lo < data.size(); lo += chunk) {
    const std::size_t n = std::min(chunk, data.size() - lo);
    const Tensor batch = slice(data.images, 0, lo, n);
    const Tensor logits = forward_with(m.arch, params, batch);
    const std::size_t k = logits.size(1);
    for (std::size_t i = 0; i < n; ++i) {
      if (static_cast<int>(argmax_row(logits.data().subspan(i * k, k))) == data.labels[lo + i]) ++correct;
    }
  }
  return data.size() == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
}

struct VictimTraining {
  std::size_t epochs = 5;
  double lr = 0.05;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
};

/// Mini-batch SGD on mean softmax cross-entropy. Returns the trained model;
/// when `epoch_loss` is given it receives the mean training loss of each
/// epoch.
inline VictimModel train_victim(const VictimArch& arch, const LabeledImages& data, const VictimTraining& cfg,
                                std::vector<double>* epoch_loss = nullptr) {
  if (data.size() == 0) throw InvalidArgument("cannot train on an empty data set");
  if (!(data.shape() == arch.input)) {
    throw ShapeError(std::string(arch_name(arch.kind)) + " expects images " + arch.input.str() + ", data has " +
                     data.shape().str());
  }
  for (int y : data.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= arch.num_classes) {
      throw InvalidArgument("label " + std::to_string(y) + " outside [0, " + std::to_string(arch.num_classes) + ")");
    }
  }
  VictimModel m{arch, init_params(arch, derive_seed(cfg.seed, 1)), 0.0f};
  Rng order_rng(derive_seed(cfg.seed, 2));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    order_rng.shuffle(order);
    double total = 0.0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch) {
      const std::size_t n = std::min(cfg.batch, order.size() - lo);
      const std::span<const std::size_t> idx(order.data() + lo, n);
      const LabeledImages mb = data.subset(idx);
      Tape tape;
      std::vector<Tensor> leaves;
      for (const auto& [name, t] : m.params) leaves.push_back(tape.leaf(t));
      Tensor loss;
      try {
        loss = mean(softmax_cross_entropy(forward_with(arch, leaves, mb.images), mb.labels));
      } catch (const NonFiniteError& err) {
        throw DivergenceError("victim training diverged in epoch " + std::to_string(e) + ": " + err.what());
      }
      total += static_cast<double>(loss.item()) * static_cast<double>(n);
      const Gradients g = tape.backward(loss);
      for (std::size_t p = 0; p < leaves.size(); ++p) {
        const Tensor grad = g.wrt(leaves[p]);
        std::vector<float> v = m.params[p].second.vec();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= static_cast<float>(cfg.lr) * grad[i];
        for (float x : v)
          if (!std::isfinite(x)) throw DivergenceError("victim parameters became non-finite in epoch " + std::to_string(e));
        m.params[p].second = Tensor(m.params[p].second.shape(), std::move(v));
      }
    }
    if (epoch_loss) epoch_loss->push_back(total / static_cast<double>(order.size()));
  }
  m.train_accuracy = static_cast<float>(accuracy(m, data));
  return m;
}

inline NamedTensors victim_tensors(const VictimModel& m) {
  NamedTensors out = m.params;
  const auto f = [](std::size_t v) { return static_cast<float>(v); };
  out.emplace_back("meta.arch", Tensor({1}, {f(static_cast<std::size_t>(m.arch.kind))}));
  out.emplace_back("meta.input_shape", Tensor({3}, {f(m.arch.input.channels), f(m.arch.input.height), f(m.arch.input.width)}));
  out.emplace_back("meta.num_classes", Tensor({1}, {f(m.arch.num_classes)}));
  out.emplace_back("meta.train_accuracy", Tensor({1}, {m.train_accuracy}));
  return out;
}

inline VictimModel victim_from_tensors(const NamedTensors& tensors) {
  const auto as_size = [](float v) { return static_cast<std::size_t>(v); };
  const int kind = static_cast<int>(find_tensor(tensors, "meta.arch").item());
  if (kind < 0 || kind > 2) throw CheckpointError(CheckpointError::Kind::kMalformed, "unknown architecture code in checkpoint");
  const Tensor& in = find_tensor(tensors, "meta.input_shape");
  if (in.numel() != 3) throw CheckpointError(CheckpointError::Kind::kMalformed, "meta.input_shape must hold 3 values");
  VictimModel m;
  m.arch = VictimArch(static_cast<ArchKind>(kind), {as_size(in[0]), as_size(in[1]), as_size(in[2])},
                      as_size(find_tensor(tensors, "meta.num_classes").item()));
  m.train_accuracy = find_tensor(tensors, "meta.train_accuracy").item();
  for (const Layer& l : layer_table(m.arch)) {
    for (const auto& [suffix, shape] : {std::pair{".weight", l.weight}, std::pair{".bias", l.bias}}) {
      const Tensor& t = find_tensor(tensors, l.name + suffix);
      if (t.shape() != shape) {
        throw CheckpointError(CheckpointError::Kind::kMalformed, "tensor '" + l.name + suffix + "' has shape " +
                                                                     shape_str(t.shape()) + ", expected " + shape_str(shape));
      }
      m.params.emplace_back(l.name + suffix, t);
    }
  }
  return m;
}

inline void save_checkpoint(const VictimModel& m, const std::filesystem::path& path) {
  save_tensors(path, victim_tensors(m));
}

inline VictimModel load_checkpoint(const std::filesystem::path& path) { return victim_from_tensors(load_tensors(path)); }

}  // namespace muap
