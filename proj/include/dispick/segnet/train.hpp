#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "../rng.hpp"
#include "adam.hpp"
#include "unet.hpp"

namespace dispick::segnet {

struct Sample {
  Tensor<float> input;                // [H, W, K], values in [0, 1]
  std::vector<std::uint8_t> target;   // class per pixel, row-major
};

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 32;
  std::size_t patience = 3;
  std::size_t max_epochs = 100;
  bool early_stopping = true;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (!(adam.learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
      throw ConfigError("adam betas must lie in [0, 1)");
    if (!(adam.epsilon > 0.0)) throw ConfigError("adam epsilon must be > 0");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

/// Patience bookkeeping: an epoch improves when its loss is strictly
/// below the best seen so far.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  bool observe(std::size_t epoch, double loss) {
    if (loss < best_loss_) {
      best_loss_ = loss;
      best_epoch_ = epoch;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }
  bool should_stop() const { return stale_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  std::size_t patience_;
  std::size_t stale_ = 0;
  std::size_t best_epoch_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
};

template <class T>
struct TrainResult {
  UNetParams<T> params;  // best epoch
  AdamState<T> adam;     // state that produced `params`
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  bool cancelled = false;
  std::optional<std::string> aborted;  // non-finite loss or gradient
};

struct EvalSummary {
  double loss = 0.0;
  double pixel_accuracy = 0.0;
};

template <class T>
EvalSummary evaluate_set(const UNetParams<T>& p, const std::vector<Sample>& set) {
  if (set.empty()) throw DataError("evaluation set is empty");
  const FlushDenormals ftz;
  double loss = 0.0;
  std::size_t hits = 0, total = 0;
  for (const auto& s : set) {
    const auto in = s.input.template cast<T>();
    const auto logits = unet_logits(p, in);
    const auto ce = softmax_ce(logits, std::span<const std::uint8_t>(s.target));
    loss += ce.loss;
    const auto pred = predict_classes(ce.probs);
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == s.target[i];
    total += pred.size();
  }
  return {loss / static_cast<double>(set.size()), static_cast<double>(hits) / static_cast<double>(total)};
}

/// Per-sample loss and gradient; gradients land in `grads` (overwritten).
template <class T>
double sample_gradient(const UNetParams<T>& p, const Sample& s, std::vector<Tensor<T>>& grads) {
  const FlushDenormals ftz;
  ForwardCache<T> cache;
  const auto in = s.input.template cast<T>();
  unet_logits(p, in, &cache);
  const auto ce = softmax_ce(cache.logits, std::span<const std::uint8_t>(s.target));
  for (auto& g : grads) g.fill(T{0});
  unet_backward(p, cache, ce.grad, grads);
  return ce.loss;
}

/// Mini-batch Adam with per-epoch validation and early stopping.  The
/// shuffle of epoch e depends only on (seed, e).  Per-sample gradients are
/// summed in batch order, so results do not depend on `threads`.
/// `on_epoch` may return false to cancel after the current epoch.
template <class T>
TrainResult<T> train(UNetParams<T> params, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                     const TrainConfig& cfg, std::function<bool(const EpochRecord&)> on_epoch = {},
                     std::optional<AdamState<T>> resume = std::nullopt) {
  cfg.validate();
  validate_params(params);
  const FlushDenormals ftz;
  if (train_set.empty()) throw DataError("training set is empty");
  if (val_set.empty()) throw DataError("validation set is empty");

  std::vector<std::string> names;
  for (const auto& s : layer_specs(params.config)) {
    names.push_back(s.name + ".kernel");
    names.push_back(s.name + ".bias");
  }
  AdamState<T> state = resume ? std::move(*resume) : AdamState<T>::zeros_for(params.tensors);
  TrainResult<T> result{params, state, {}, 0, false, false, std::nullopt};
  EarlyStopper stopper(cfg.patience);

  const std::size_t slots = std::min(cfg.batch_size, train_set.size());
  std::vector<std::vector<Tensor<T>>> per_sample(slots, zeros_like(params.tensors));
  std::vector<double> losses(slots);
  auto sum = zeros_like(params.tensors);
  std::vector<std::size_t> order(train_set.size());

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_stream(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      auto work = [&](std::size_t w) {
        for (std::size_t i = w; i < n; i += cfg.threads)
          losses[i] = sample_gradient(params, train_set[order[start + i]], per_sample[i]);
      };
      if (cfg.threads == 1) {
        work(0);
      } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < std::min(cfg.threads, n); ++w) pool.emplace_back(work, w);
      }
      const T scale = static_cast<T>(1.0 / static_cast<double>(n));
      for (std::size_t t = 0; t < sum.size(); ++t) {
        T* dst = sum[t].data();
        std::fill(dst, dst + sum[t].size(), T{0});
        for (std::size_t i = 0; i < n; ++i) {
          const T* src = per_sample[i][t].data();
          for (std::size_t j = 0; j < sum[t].size(); ++j) dst[j] += src[j];
        }
        for (std::size_t j = 0; j < sum[t].size(); ++j) dst[j] *= scale;
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(losses[i])) {
          result.aborted = "non-finite training loss at epoch " + std::to_string(epoch) + ", sample " +
                           std::to_string(order[start + i]);
          return result;
        }
        epoch_loss += losses[i];
      }
      try {
        adam_step(params.tensors, sum, state, cfg.adam, &names);
      } catch (const NumericalError& e) {
        result.aborted = std::string(e.what()) + " at epoch " + std::to_string(epoch);
        return result;
      }
    }
    const double val_loss = evaluate_set(params, val_set).loss;
    const EpochRecord rec{epoch, epoch_loss / static_cast<double>(order.size()), val_loss};
    result.history.push_back(rec);
    if (!std::isfinite(val_loss)) {
      result.aborted = "non-finite validation loss at epoch " + std::to_string(epoch);
      return result;
    }
    if (stopper.observe(epoch, val_loss)) {
      result.params = params;
      result.adam = state;
      result.best_epoch = epoch;
    }
    if (on_epoch && !on_epoch(rec)) {
      result.cancelled = true;
      break;
    }
    if (cfg.early_stopping && stopper.should_stop()) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

inline std::string history_csv(const std::vector<EpochRecord>& h) {
  std::string out = "epoch,train_loss,val_loss\n";
  char buf[96];
  for (const auto& r : h) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", r.epoch, r.train_loss, r.val_loss);
    out += buf;
  }
  return out;
}

}  // namespace dispick::segnet
