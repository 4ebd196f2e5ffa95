#pragma once

// Depth-d U-Net: per level two 3x3 conv+ReLU, 2x2 max pool; a bottleneck
// of two 3x3 conv+ReLU; per level on the way up a stride-2 transpose conv,
// concatenation [up | skip], two 3x3 conv+ReLU; then a 1x1 conv to the
// class logits.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "../rng.hpp"
#include "fpenv.hpp"
#include "layers.hpp"

namespace dispick::segnet {

struct UNetConfig {
  std::size_t depth = 3;
  std::size_t base_channels = 16;
  std::size_t in_channels = 1;
  std::size_t classes = 3;

  void validate() const {
    if (depth < 1 || depth > 8) throw ConfigError("unet depth must be in [1, 8]");
    if (base_channels < 1) throw ConfigError("unet base_channels must be >= 1");
    if (in_channels < 1) throw ConfigError("unet in_channels must be >= 1");
    if (classes < 2) throw ConfigError("unet classes must be >= 2");
  }
  std::size_t channels_at(std::size_t level) const { return base_channels << level; }
  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

/// Parameter tensors in a fixed layer order (see `layer_specs`).  Each
/// layer contributes a kernel followed by its bias.
template <class T>
struct UNetParams {
  UNetConfig config;
  std::vector<Tensor<T>> tensors;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  template <class U>
  UNetParams<U> cast() const {
    UNetParams<U> out{config, {}};
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};

struct LayerSpec {
  std::string name;
  Tensor<float>::Shape kernel;
  std::size_t fan_in;
};

/// Layer order: enc{l}.conv_a, enc{l}.conv_b for l = 0..depth-1,
/// mid.conv_a, mid.conv_b, then for l = depth-1..0: dec{l}.up, dec{l}.conv_a,
/// dec{l}.conv_b, and finally head.
inline std::vector<LayerSpec> layer_specs(const UNetConfig& c) {
  std::vector<LayerSpec> out;
  auto conv = [&](std::string name, std::size_t k, std::size_t cin, std::size_t cout) {
    out.push_back({std::move(name), {k, k, cin, cout}, k * k * cin});
  };
  std::size_t cin = c.in_channels;
  for (std::size_t l = 0; l < c.depth; ++l) {
    const auto ch = c.channels_at(l);
    conv("enc" + std::to_string(l) + ".conv_a", 3, cin, ch);
    conv("enc" + std::to_string(l) + ".conv_b", 3, ch, ch);
    cin = ch;
  }
  const auto mid = c.channels_at(c.depth);
  conv("mid.conv_a", 3, cin, mid);
  conv("mid.conv_b", 3, mid, mid);
  cin = mid;
  for (std::size_t i = 0; i < c.depth; ++i) {
    const std::size_t l = c.depth - 1 - i;
    const auto ch = c.channels_at(l);
    out.push_back({"dec" + std::to_string(l) + ".up", {2, 2, cin, ch}, cin});
    conv("dec" + std::to_string(l) + ".conv_a", 3, 2 * ch, ch);
    conv("dec" + std::to_string(l) + ".conv_b", 3, ch, ch);
    cin = ch;
  }
  conv("head", 1, cin, c.classes);
  return out;
}

inline std::size_t parameter_count(const UNetConfig& c) {
  std::size_t n = 0;
  for (const auto& s : layer_specs(c)) n += Tensor<float>::count(s.kernel) + s.kernel.back();
  return n;
}

/// He-normal kernels (std sqrt(2/fan_in)), zero biases.  With
/// `zero_head` the final layer starts at zero, giving uniform outputs.
template <class T>
UNetParams<T> init_params(const UNetConfig& c, std::uint64_t seed, bool zero_head = false) {
  c.validate();
  Rng rng(derive_stream(seed, 0x756e6574));
  UNetParams<T> p{c, {}};
  const auto specs = layer_specs(c);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    Tensor<T> k(specs[i].kernel);
    const bool head = i + 1 == specs.size();
    if (!(head && zero_head)) {
      std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(specs[i].fan_in)));
      for (auto& v : k.values()) v = static_cast<T>(nd(rng));
    }
    p.tensors.push_back(std::move(k));
    p.tensors.emplace_back(typename Tensor<T>::Shape{specs[i].kernel.back()});
  }
  return p;
}

/// Checks tensor count and every shape against the config.
template <class T>
void validate_params(const UNetParams<T>& p) {
  p.config.validate();
  const auto specs = layer_specs(p.config);
  if (p.tensors.size() != 2 * specs.size())
    throw StructuralError("unet: expected " + std::to_string(2 * specs.size()) + " parameter tensors, got " +
                          std::to_string(p.tensors.size()));
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (p.tensors[2 * i].shape() != specs[i].kernel)
      throw StructuralError("unet layer " + specs[i].name + ": kernel shape " +
                            shape_str(p.tensors[2 * i].shape()) + ", expected " + shape_str(specs[i].kernel));
    if (p.tensors[2 * i + 1].shape() != typename Tensor<T>::Shape{specs[i].kernel.back()})
      throw StructuralError("unet layer " + specs[i].name + ": bias shape " +
                            shape_str(p.tensors[2 * i + 1].shape()));
  }
}

template <class T>
std::vector<Tensor<T>> zeros_like(const std::vector<Tensor<T>>& ts) {
  std::vector<Tensor<T>> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.emplace_back(t.shape());
  return out;
}

/// Activations kept for the backward pass.
template <class T>
struct ForwardCache {
  Tensor<T> input;
  std::vector<Tensor<T>> enc_a, enc_b, pooled;
  std::vector<std::vector<std::uint32_t>> argmax;
  Tensor<T> mid_a, mid_b;
  std::vector<Tensor<T>> cat, dec_a, dec_b;  // indexed by level
  Tensor<T> logits;
};

namespace detail {

template <class T>
Tensor<T> conv_relu(const Tensor<T>& x, const UNetParams<T>& p, std::size_t layer) {
  auto y = conv2d(x, p.tensors[2 * layer], p.tensors[2 * layer + 1]);
  relu_inplace(y);
  return y;
}

template <class T>
Tensor<T> conv_relu_back(const Tensor<T>& x, const Tensor<T>& y, Tensor<T> dy, const UNetParams<T>& p,
                         std::vector<Tensor<T>>& grads, std::size_t layer, bool need_input = true) {
  relu_backward_inplace(y, dy);
  Tensor<T> dx;
  conv2d_backward(x, p.tensors[2 * layer], dy, need_input ? &dx : nullptr, grads[2 * layer], grads[2 * layer + 1]);
  return dx;
}

}  // namespace detail

/// Returns logits [H, W, classes]; H and W must be divisible by 2^depth.
template <class T>
Tensor<T> unet_logits(const UNetParams<T>& p, const Tensor<T>& input, ForwardCache<T>* cache = nullptr) {
  const FlushDenormals ftz;
  const auto& c = p.config;
  if (input.rank() != 3 || input.dim(2) != c.in_channels)
    throw StructuralError("unet input " + shape_str(input.shape()) + " does not have " +
                          std::to_string(c.in_channels) + " channels");
  const std::size_t scale = std::size_t{1} << c.depth;
  if (input.dim(0) % scale != 0 || input.dim(1) % scale != 0)
    throw StructuralError("unet input " + shape_str(input.shape()) + " is not divisible by " +
                          std::to_string(scale));
  validate_params(p);
  ForwardCache<T> local;
  ForwardCache<T>& k = cache ? *cache : local;
  const std::size_t D = c.depth;
  k.input = input;
  k.enc_a.resize(D);
  k.enc_b.resize(D);
  k.pooled.resize(D);
  k.argmax.resize(D);
  k.cat.resize(D);
  k.dec_a.resize(D);
  k.dec_b.resize(D);
  std::size_t layer = 0;
  for (std::size_t l = 0; l < D; ++l) {
    const Tensor<T>& x = l == 0 ? k.input : k.pooled[l - 1];
    k.enc_a[l] = detail::conv_relu(x, p, layer++);
    k.enc_b[l] = detail::conv_relu(k.enc_a[l], p, layer++);
    k.pooled[l] = maxpool2(k.enc_b[l], &k.argmax[l]);
  }
  k.mid_a = detail::conv_relu(k.pooled[D - 1], p, layer++);
  k.mid_b = detail::conv_relu(k.mid_a, p, layer++);
  const Tensor<T>* cur = &k.mid_b;
  for (std::size_t i = 0; i < D; ++i) {
    const std::size_t l = D - 1 - i;
    auto up = transpose_conv2(*cur, p.tensors[2 * layer], p.tensors[2 * layer + 1]);
    ++layer;
    k.cat[l] = concat_channels(up, k.enc_b[l]);
    k.dec_a[l] = detail::conv_relu(k.cat[l], p, layer++);
    k.dec_b[l] = detail::conv_relu(k.dec_a[l], p, layer++);
    cur = &k.dec_b[l];
  }
  k.logits = conv2d(*cur, p.tensors[2 * layer], p.tensors[2 * layer + 1]);
  if (cache) return k.logits;
  return std::move(local.logits);
}

/// Per-pixel class probabilities.
template <class T>
Tensor<T> unet_forward(const UNetParams<T>& p, const Tensor<T>& input) {
  auto logits = unet_logits(p, input);
  const std::size_t C = logits.dim(2);
  for (std::size_t i = 0; i < logits.size(); i += C) {
    T* z = logits.data() + i;
    const T zmax = *std::max_element(z, z + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(z[c] - zmax));
    for (std::size_t c = 0; c < C; ++c) z[c] = static_cast<T>(std::exp(static_cast<double>(z[c] - zmax)) / s);
  }
  return logits;
}

/// Accumulates parameter gradients for d loss / d logits = `dlogits` into
/// `grads` (shaped like p.tensors).  Returns d loss / d input.
template <class T>
Tensor<T> unet_backward(const UNetParams<T>& p, const ForwardCache<T>& k, const Tensor<T>& dlogits,
                        std::vector<Tensor<T>>& grads) {
  const FlushDenormals ftz;
  const std::size_t D = p.config.depth;
  std::size_t layer = p.tensors.size() / 2 - 1;
  Tensor<T> dcur;
  conv2d_backward(k.dec_b[0], p.tensors[2 * layer], dlogits, &dcur, grads[2 * layer], grads[2 * layer + 1]);
  std::vector<Tensor<T>> dskip(D);
  for (std::size_t l = 0; l < D; ++l) {
    --layer;
    auto dda = detail::conv_relu_back(k.dec_a[l], k.dec_b[l], std::move(dcur), p, grads, layer);
    --layer;
    auto dcat = detail::conv_relu_back(k.cat[l], k.dec_a[l], std::move(dda), p, grads, layer);
    Tensor<T> dup;
    split_channels(dcat, p.config.channels_at(l), dup, dskip[l]);
    --layer;
    const Tensor<T>& up_in = l + 1 < D ? k.dec_b[l + 1] : k.mid_b;
    transpose_conv2_backward(up_in, p.tensors[2 * layer], dup, &dcur, grads[2 * layer], grads[2 * layer + 1]);
  }
  --layer;
  auto dma = detail::conv_relu_back(k.mid_a, k.mid_b, std::move(dcur), p, grads, layer);
  --layer;
  auto dpool = detail::conv_relu_back(k.pooled[D - 1], k.mid_a, std::move(dma), p, grads, layer);
  for (std::size_t i = 0; i < D; ++i) {
    const std::size_t l = D - 1 - i;
    auto deb = maxpool2_backward(dpool, k.argmax[l], k.enc_b[l].shape());
    for (std::size_t j = 0; j < deb.size(); ++j) deb[j] += dskip[l][j];
    --layer;
    auto dea = detail::conv_relu_back(k.enc_a[l], k.enc_b[l], std::move(deb), p, grads, layer);
    --layer;
    const Tensor<T>& x = l == 0 ? k.input : k.pooled[l - 1];
    dpool = detail::conv_relu_back(x, k.enc_a[l], std::move(dea), p, grads, layer);
  }
  return dpool;
}

/// Argmax class per pixel.  With `threshold` > 0 a mode class only wins if
/// its probability reaches the threshold; otherwise the pixel is noise.
template <class T>
std::vector<std::uint8_t> predict_classes(const Tensor<T>& probs, double threshold = 0.0) {
  const std::size_t C = probs.dim(2), P = probs.dim(0) * probs.dim(1);
  std::vector<std::uint8_t> out(P, 0);
  for (std::size_t i = 0; i < P; ++i) {
    const T* z = probs.data() + i * C;
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (z[c] > z[best]) best = c;
    if (threshold > 0.0 && best != 0 && static_cast<double>(z[best]) < threshold) best = 0;
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace dispick::segnet
