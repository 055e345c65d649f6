// Copyright 2026 The dssdrv Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Set-equivariant U-Net over a set of log-spectrogram images.
//
// Each DssLayer runs a Siamese conv+BN on every set element and adds a second
// conv+BN applied to the set aggregate (sum or mean). The encoder downsamples
// by two per layer, the decoder mirrors it with transposed convolutions and
// concatenated skips, and a max over the set axis feeds a two-conv head that
// emits one image in (-1, 1).

#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dssdrv/ops.hpp"

namespace dssdrv {

enum class Direction { kDown, kUp };
enum class Aggregation { kSum, kMean };

inline std::string to_string(Aggregation a) { return a == Aggregation::kSum ? "sum" : "mean"; }

inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "sum") return Aggregation::kSum;
  if (s == "mean") return Aggregation::kMean;
  throw ConfigError("unknown aggregation '" + s + "' (expected sum|mean)");
}

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  std::vector<T>* values;
};

// Trainable tensors plus BN running statistics, in a fixed order.
template <typename T>
struct ParameterSet {
  std::vector<NamedTensor<T>> params;
  std::vector<NamedBuffer<T>> buffers;

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor->numel();
    return n;
  }
};

// Conv (or transposed conv) followed by batch norm. The conv has no bias; BN's
// shift makes it redundant.
template <typename T>
class ConvBn {
 public:
  ConvBn() = default;

  template <typename Rng>
  ConvBn(Direction dir, std::int64_t in_ch, std::int64_t out_ch, Rng& rng)
      : dir_(dir),
        weight_(dir == Direction::kDown ? Tensor<T>::randn({out_ch, in_ch, kKernel, kKernel}, rng, T(0.02), true)
                                        : Tensor<T>::randn({in_ch, out_ch, kKernel, kKernel}, rng, T(0.02), true)),
        gamma_(Tensor<T>::full({out_ch}, T(1), true)),
        beta_(Tensor<T>::zeros({out_ch}, true)),
        bn_(out_ch) {}

  // x [N,C,H,W]
  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    auto y = dir_ == Direction::kDown ? conv2d<T>(x, weight_, std::nullopt, 2, Pad4{})
                                      : conv_transpose2d<T>(x, weight_, std::nullopt, 2, Pad4{});
    return batch_norm(y, gamma_, beta_, bn_, mode);
  }

  void collect(const std::string& prefix, ParameterSet<T>& set) {
    set.params.push_back({prefix + ".weight", &weight_});
    set.params.push_back({prefix + ".bn.gamma", &gamma_});
    set.params.push_back({prefix + ".bn.beta", &beta_});
    set.buffers.push_back({prefix + ".bn.running_mean", &bn_.running_mean});
    set.buffers.push_back({prefix + ".bn.running_var", &bn_.running_var});
  }

  const Tensor<T>& weight() const { return weight_; }

 private:
  Direction dir_ = Direction::kDown;
  Tensor<T> weight_, gamma_, beta_;
  BatchNormState<T> bn_;
};

template <typename T>
class DssLayer {
 public:
  DssLayer() = default;

  template <typename Rng>
  DssLayer(Direction dir, std::int64_t in_ch, std::int64_t filters, Aggregation agg, Rng& rng)
      : dir_(dir), in_ch_(in_ch), filters_(filters), agg_(agg),
        siamese_(dir, in_ch, filters, rng), aggregate_(dir, in_ch, filters, rng) {}

  // x [B,M,C,H,W] -> [B,M,filters,H',W'] with
  //   out_i = BN_s(Conv_s(x_i)) + BN_a(Conv_a(agg_j x_j)).
  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    DSSDRV_CHECK(x.rank() == 5, ShapeError, "DSS layer input must be [B,M,C,H,W], got ", shape_str(x.shape()));
    DSSDRV_CHECK(x.dim(2) == in_ch_, ShapeError, "DSS layer expects ", in_ch_, " channels, got ",
                 shape_str(x.shape()));
    const auto b = x.dim(0), m = x.dim(1), c = x.dim(2), h = x.dim(3), w = x.dim(4);
    DSSDRV_CHECK(m >= 1, ShapeError, "DSS layer needs a nonempty set");
    auto s = siamese_.forward(reshape(x, {b * m, c, h, w}), mode);
    const auto oh = s.dim(2), ow = s.dim(3);
    s = reshape(s, {b, m, filters_, oh, ow});
    auto pooled = set_reduce(x, agg_ == Aggregation::kSum ? SetReduce::kSum : SetReduce::kMean);
    auto a = aggregate_.forward(reshape(pooled, {b, c, h, w}), mode);
    return add_set_broadcast(s, reshape(a, {b, 1, filters_, oh, ow}));
  }

  void collect(const std::string& prefix, ParameterSet<T>& set) {
    siamese_.collect(prefix + ".siamese", set);
    aggregate_.collect(prefix + ".aggregate", set);
  }

  Direction direction() const { return dir_; }
  std::int64_t filters() const { return filters_; }
  Aggregation aggregation() const { return agg_; }
  const ConvBn<T>& siamese() const { return siamese_; }
  const ConvBn<T>& aggregate() const { return aggregate_; }

 private:
  Direction dir_ = Direction::kDown;
  std::int64_t in_ch_ = 0, filters_ = 0;
  Aggregation agg_ = Aggregation::kMean;
  ConvBn<T> siamese_, aggregate_;
};

struct UNetConfig {
  int depth = 8;
  int base_width = 64;
  int t_slice = 256;
  int freq_bins = 256;
  Aggregation aggregation = Aggregation::kMean;

  // Desk-scale geometry: 32-frame slices, depth 5, base width 8.
  static UNetConfig tiny(int freq_bins = 256) {
    UNetConfig c;
    c.depth = 5;
    c.base_width = 8;
    c.t_slice = 32;
    c.freq_bins = freq_bins;
    return c;
  }

  std::vector<std::int64_t> encoder_widths() const {
    static constexpr int kFull[] = {64, 128, 256, 512, 512, 512, 512, 512};
    std::vector<std::int64_t> w;
    for (int i = 0; i < depth; ++i) {
      const int full = i < 8 ? kFull[i] : 512;
      w.push_back(std::max<std::int64_t>(1, static_cast<std::int64_t>(full) * base_width / 64));
    }
    return w;
  }

  // Mirror of the encoder, ending in a single filter.
  std::vector<std::int64_t> decoder_widths() const {
    auto enc = encoder_widths();
    std::vector<std::int64_t> w;
    for (int j = 0; j + 1 < depth; ++j) w.push_back(enc[depth - 2 - j]);
    w.push_back(1);
    return w;
  }

  void validate() const {
    DSSDRV_CHECK(depth >= 1 && depth <= 16, ConfigError, "network depth must be in [1,16], got ", depth);
    DSSDRV_CHECK(base_width >= 1, ConfigError, "base width must be positive");
    const int factor = 1 << depth;
    DSSDRV_CHECK(t_slice >= factor && t_slice % factor == 0 && freq_bins >= factor && freq_bins % factor == 0,
                 ConfigError, "slice ", t_slice, "x", freq_bins, " cannot be halved ", depth,
                 " times down to a whole bottleneck");
  }
};

template <typename T>
class DssUNet {
 public:
  DssUNet() = default;

  DssUNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const auto enc = cfg_.encoder_widths();
    const auto dec = cfg_.decoder_widths();
    std::int64_t in_ch = 1;
    for (int i = 0; i < cfg_.depth; ++i) {
      encoder_.emplace_back(Direction::kDown, in_ch, enc[i], cfg_.aggregation, rng);
      in_ch = enc[i];
    }
    for (int j = 0; j < cfg_.depth; ++j) {
      const std::int64_t skip = j == 0 ? 0 : enc[cfg_.depth - 1 - j];
      decoder_.emplace_back(Direction::kUp, in_ch + skip, dec[j], cfg_.aggregation, rng);
      in_ch = dec[j];
    }
    head1_w_ = Tensor<T>::randn({1, 1, kKernel, kKernel}, rng, T(0.02), true);
    head_gamma_ = Tensor<T>::full({1}, T(1), true);
    head_beta_ = Tensor<T>::zeros({1}, true);
    head_bn_ = BatchNormState<T>(1);
    // No BN follows the last conv, so its scale matters: fan-in uniform.
    const T bound = T(1) / T(kKernel);
    head2_w_ = Tensor<T>::uniform({1, 1, kKernel, kKernel}, rng, -bound, bound, true);
    head2_b_ = Tensor<T>::uniform({1}, rng, -bound, bound, true);
  }

  // x [B,M,1,T,F] -> [B,1,T,F]
  Tensor<T> forward(const Tensor<T>& x) {
    DSSDRV_CHECK(x.rank() == 5 && x.dim(2) == 1, ShapeError, "network input must be [B,M,1,T,F], got ",
                 shape_str(x.shape()));
    DSSDRV_CHECK(x.dim(1) >= 1, ShapeError, "network input needs at least one set element");
    const int factor = 1 << cfg_.depth;
    DSSDRV_CHECK(x.dim(3) % factor == 0 && x.dim(4) % factor == 0 && x.dim(3) >= factor && x.dim(4) >= factor,
                 ShapeError, "input ", shape_str(x.shape()), " cannot be halved ", cfg_.depth, " times");
    std::vector<Tensor<T>> skips;
    Tensor<T> h = x;
    for (auto& layer : encoder_) {
      h = leaky_relu(layer.forward(h, mode_), T(0.2));
      skips.push_back(h);
    }
    for (int j = 0; j < cfg_.depth; ++j) {
      if (j > 0) h = concat(h, skips[cfg_.depth - 1 - j], 2);
      h = relu(decoder_[j].forward(h, mode_));
    }
    const auto b = h.dim(0), t = h.dim(3), f = h.dim(4);
    auto pooled = reshape(set_reduce(h, SetReduce::kMax), {b, 1, t, f});
    auto y = conv2d<T>(pooled, head1_w_, std::nullopt, 1, kSamePad);
    y = relu(batch_norm(y, head_gamma_, head_beta_, head_bn_, mode_));
    y = conv2d<T>(y, head2_w_, head2_b_, 1, kSamePad);
    return tanh(y);
  }

  ParameterSet<T> parameters() {
    ParameterSet<T> set;
    for (std::size_t i = 0; i < encoder_.size(); ++i) encoder_[i].collect("enc" + std::to_string(i), set);
    for (std::size_t j = 0; j < decoder_.size(); ++j) decoder_[j].collect("dec" + std::to_string(j), set);
    set.params.push_back({"head.conv1.weight", &head1_w_});
    set.params.push_back({"head.bn.gamma", &head_gamma_});
    set.params.push_back({"head.bn.beta", &head_beta_});
    set.buffers.push_back({"head.bn.running_mean", &head_bn_.running_mean});
    set.buffers.push_back({"head.bn.running_var", &head_bn_.running_var});
    set.params.push_back({"head.conv2.weight", &head2_w_});
    set.params.push_back({"head.conv2.bias", &head2_b_});
    return set;
  }

  void set_mode(Mode mode) { mode_ = mode; }
  Mode mode() const { return mode_; }
  const UNetConfig& config() const { return cfg_; }
  const std::vector<DssLayer<T>>& encoder() const { return encoder_; }
  const std::vector<DssLayer<T>>& decoder() const { return decoder_; }

 private:
  UNetConfig cfg_;
  Mode mode_ = Mode::kTrain;
  std::vector<DssLayer<T>> encoder_, decoder_;
  Tensor<T> head1_w_, head_gamma_, head_beta_, head2_w_, head2_b_;
  BatchNormState<T> head_bn_;
};

// (1/10) * MSE(pred, target) + MSE(grad pred, grad target), where grad stacks
// forward differences along the last axis (horizontal) and the second-to-last
// axis (vertical). Both MSE terms are means over the stacked entries.
//
// `valid_rows`, when given, holds one count per leading index (all axes before
// the last two): rows at or beyond it are padding and excluded everywhere.
template <typename T>
Tensor<T> grad_loss(const Tensor<T>& pred, const Tensor<T>& target, const std::vector<int>& valid_rows = {}) {
  DSSDRV_CHECK(pred.shape() == target.shape(), ShapeError, "grad_loss shape mismatch ", shape_str(pred.shape()),
               " vs ", shape_str(target.shape()));
  DSSDRV_CHECK(pred.rank() >= 2, ShapeError, "grad_loss needs at least 2-D images");
  const std::int64_t rows = pred.dim(pred.rank() - 2), cols = pred.dim(pred.rank() - 1);
  const std::int64_t lead = static_cast<std::int64_t>(pred.numel()) / std::max<std::int64_t>(rows * cols, 1);
  std::vector<std::int64_t> valid(static_cast<std::size_t>(lead), rows);
  if (!valid_rows.empty()) {
    DSSDRV_CHECK(valid_rows.size() == valid.size(), ShapeError, "grad_loss got ", valid_rows.size(),
                 " valid lengths for ", lead, " images");
    for (std::size_t l = 0; l < valid.size(); ++l)
      valid[l] = std::clamp<std::int64_t>(valid_rows[l], 0, rows);
  }
  double n_plain = 0, n_grad = 0;
  for (auto v : valid) {
    n_plain += static_cast<double>(v * cols);
    n_grad += static_cast<double>(v * (cols - 1) + std::max<std::int64_t>(v - 1, 0) * cols);
  }
  DSSDRV_CHECK(n_plain > 0, ShapeError, "grad_loss over zero valid entries");

  const T* p = pred.data().data();
  const T* z = target.data().data();
  double plain = 0.0, grad = 0.0;
  for (std::int64_t l = 0; l < lead; ++l) {
    const std::int64_t base = l * rows * cols;
    for (std::int64_t r = 0; r < valid[l]; ++r) {
      for (std::int64_t c = 0; c < cols; ++c) {
        const std::int64_t i = base + r * cols + c;
        const double d = static_cast<double>(p[i]) - z[i];
        plain += d * d;
        if (c + 1 < cols) {
          const double dh = (static_cast<double>(p[i + 1]) - z[i + 1]) - d;
          grad += dh * dh;
        }
        if (r + 1 < valid[l]) {
          const double dv = (static_cast<double>(p[i + cols]) - z[i + cols]) - d;
          grad += dv * dv;
        }
      }
    }
  }
  const double value = 0.1 * plain / n_plain + (n_grad > 0 ? grad / n_grad : 0.0);
  return make_result<T>(
      {}, {static_cast<T>(value)}, "grad_loss", {pred, target},
      [lead, rows, cols, valid = std::move(valid), n_plain, n_grad](detail::TensorNode<T>& node) {
        const auto& pv = node.inputs[0]->data;
        const auto& zv = node.inputs[1]->data;
        std::vector<double> g(pv.size(), 0.0);
        const double wp = 0.2 / n_plain;
        const double wg = n_grad > 0 ? 2.0 / n_grad : 0.0;
        for (std::int64_t l = 0; l < lead; ++l) {
          const std::int64_t base = l * rows * cols;
          for (std::int64_t r = 0; r < valid[l]; ++r) {
            for (std::int64_t c = 0; c < cols; ++c) {
              const std::int64_t i = base + r * cols + c;
              const double d = static_cast<double>(pv[i]) - zv[i];
              g[i] += wp * d;
              if (c + 1 < cols) {
                const double dh = (static_cast<double>(pv[i + 1]) - zv[i + 1]) - d;
                g[i + 1] += wg * dh;
                g[i] -= wg * dh;
              }
              if (r + 1 < valid[l]) {
                const double dv = (static_cast<double>(pv[i + cols]) - zv[i + cols]) - d;
                g[i + cols] += wg * dv;
                g[i] -= wg * dv;
              }
            }
          }
        }
        const double up = node.grad[0];
        if (T* gp = detail::input_grad(node, 0))
          for (std::size_t i = 0; i < g.size(); ++i) gp[i] += static_cast<T>(up * g[i]);
        if (T* gz = detail::input_grad(node, 1))
          for (std::size_t i = 0; i < g.size(); ++i) gz[i] -= static_cast<T>(up * g[i]);
      });
}

}  // namespace dssdrv
