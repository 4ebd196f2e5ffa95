#pragma once

// Sim-to-real experiment: pretrain on synthetic curvesets, fine-tune on the
// pseudo-real domain, evaluate on a held-out pseudo-real set.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <json.hpp>

#include "curve.hpp"
#include "datagen.hpp"
#include "error.hpp"
#include "ftan.hpp"
#include "io.hpp"
#include "raster.hpp"
#include "rng.hpp"
#include "segnet/checkpoint.hpp"
#include "segnet/train.hpp"

namespace dispick {

namespace fs = std::filesystem;
using nlohmann::json;

/// Optional progress sink (stderr in the CLI).  Must be thread-safe when
/// sweep runs execute concurrently.
using LogFn = std::function<void(const std::string&)>;
inline LogFn& log_sink() {
  static LogFn fn;
  return fn;
}
inline void log_line(const std::string& s) {
  if (auto& f = log_sink()) f(s);
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  std::array<std::array<std::uint64_t, 3>, 3> confusion{};  // [truth][pred]

  std::uint64_t support(int c) const {
    return std::accumulate(confusion[c].begin(), confusion[c].end(), std::uint64_t{0});
  }
  std::uint64_t predicted(int c) const { return confusion[0][c] + confusion[1][c] + confusion[2][c]; }
  std::uint64_t total() const { return support(0) + support(1) + support(2); }

  /// Undefined (no predictions of class c) is nullopt, never 0.
  std::optional<double> precision(int c) const {
    const auto d = predicted(c);
    if (d == 0) return std::nullopt;
    return static_cast<double>(confusion[c][c]) / static_cast<double>(d);
  }
  std::optional<double> recall(int c) const {
    const auto d = support(c);
    if (d == 0) return std::nullopt;
    return static_cast<double>(confusion[c][c]) / static_cast<double>(d);
  }

  Metrics& operator+=(const Metrics& o) {
    for (int t = 0; t < 3; ++t)
      for (int p = 0; p < 3; ++p) confusion[t][p] += o.confusion[t][p];
    return *this;
  }
  friend bool operator==(const Metrics&, const Metrics&) = default;
};

inline Metrics evaluate(const LabelMask& pred, const LabelMask& truth) {
  Metrics m;
  for (int i = 0; i < kPixels; ++i) {
    const auto t = truth.classes.v[static_cast<std::size_t>(i)], p = pred.classes.v[static_cast<std::size_t>(i)];
    if (t > 2 || p > 2) throw DataError("evaluate: mask holds a class outside {0,1,2}");
    ++m.confusion[t][p];
  }
  return m;
}

/// Point-level confusion: truth labels of the curveset against the class
/// of the predicted pixel each point falls in.
inline Metrics evaluate_points(const LabelMask& pred, const RasterMeta& meta, const CurveSet& truth) {
  Metrics m;
  const auto predicted = mask_to_points(pred, meta, truth);
  for (std::size_t i = 0; i < truth.points.size(); ++i)
    ++m.confusion[to_int(truth.points[i].label)][to_int(predicted[i].label)];
  return m;
}

inline std::optional<double> median(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const Metrics& m) {
  json prec = json::array(), rec = json::array(), sup = json::array();
  for (int c = 0; c < 3; ++c) {
    prec.push_back(opt_json(m.precision(c)));
    rec.push_back(opt_json(m.recall(c)));
    sup.push_back(m.support(c));
  }
  return {{"confusion", m.confusion}, {"precision", prec}, {"recall", rec}, {"support", sup}};
}

struct ClassMedians {
  std::array<std::optional<double>, 3> precision, recall;
};

inline ClassMedians class_medians(const std::vector<Metrics>& ms) {
  ClassMedians out;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> p, r;
    for (const auto& m : ms) {
      if (auto v = m.precision(c)) p.push_back(*v);
      if (auto v = m.recall(c)) r.push_back(*v);
    }
    out.precision[static_cast<std::size_t>(c)] = median(std::move(p));
    out.recall[static_cast<std::size_t>(c)] = median(std::move(r));
  }
  return out;
}

inline json to_json(const ClassMedians& m) {
  json out = json::object();
  for (int c = 0; c < 3; ++c)
    out[label_name(static_cast<Label>(c))] = {{"precision", opt_json(m.precision[static_cast<std::size_t>(c)])},
                                              {"recall", opt_json(m.recall[static_cast<std::size_t>(c)])}};
  return out;
}

// ---------------------------------------------------------------------------
// Snap to peaks

struct SnappedPick {
  PickPoint point;
  bool snapped = false;  // false for noise picks and for picks with no peak in range
};

/// Spectral peaks to snap onto: the curveset's own picks (each one an FTAN
/// ridge sample) or the ridges of an FTAN map.
using PeakSource = std::variant<std::reference_wrapper<const CurveSet>, std::reference_wrapper<const FtanMap>>;

inline constexpr double kSnapRadiusPixels = 1.5;

/// Moves every mode pick to the nearest source peak within 1.5 pixel
/// widths (log-frequency) and heights (velocity), distance measured in
/// pixel units; ties go to the stronger peak.  Labels never change.
inline std::vector<SnappedPick> snap_to_peaks(const std::vector<PickPoint>& picks, const PeakSource& source,
                                              const RasterMeta& meta) {
  std::vector<PickPoint> peaks;
  if (std::holds_alternative<std::reference_wrapper<const CurveSet>>(source)) {
    peaks = std::get<std::reference_wrapper<const CurveSet>>(source).get().points;
  } else {
    peaks = extract_ridges(std::get<std::reference_wrapper<const FtanMap>>(source).get(), 8);
  }
  const double cw = meta.col_width(), rh = meta.row_height();
  std::vector<SnappedPick> out;
  out.reserve(picks.size());
  for (const auto& p : picks) {
    SnappedPick s{p, false};
    if (p.label != Label::noise) {
      double best = std::numeric_limits<double>::infinity();
      const PickPoint* hit = nullptr;
      const double lf = std::log10(p.frequency);
      for (const auto& q : peaks) {
        const double dx = (std::log10(q.frequency) - lf) / cw;
        const double dy = (q.velocity - p.velocity) / rh;
        if (std::abs(dx) > kSnapRadiusPixels || std::abs(dy) > kSnapRadiusPixels) continue;
        const double d = dx * dx + dy * dy;
        if (d < best || (d == best && hit && q.amplitude > hit->amplitude)) {
          best = d;
          hit = &q;
        }
      }
      if (hit) {
        s.point.frequency = hit->frequency;
        s.point.velocity = hit->velocity;
        s.point.amplitude = hit->amplitude;
        s.snapped = true;
      }
    }
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-station inputs

/// Rasterized dataset with a station-neighbour map, ready for K-channel
/// stacking.
struct ImageSet {
  std::vector<CurveSet> curvesets;
  std::vector<Raster> rasters;
  std::map<std::string, std::size_t> index;
  std::map<std::string, std::vector<std::string>> neighbors;
  std::size_t max_neighbors = 0;

  static ImageSet build(std::vector<CurveSet> sets, std::size_t K) {
    if (K < 1) throw ConfigError("K must be >= 1");
    ImageSet s;
    s.curvesets = std::move(sets);
    s.rasters.reserve(s.curvesets.size());
    for (std::size_t i = 0; i < s.curvesets.size(); ++i) {
      if (!s.index.emplace(s.curvesets[i].pair_id, i).second)
        throw DataError("duplicate pair_id " + s.curvesets[i].pair_id);
      s.rasters.push_back(rasterize(s.curvesets[i]));
    }
    s.max_neighbors = K - 1;
    // Small sets get as many neighbours as exist; the rest are zero channels.
    const std::size_t k = std::min(K - 1, s.curvesets.empty() ? 0 : s.curvesets.size() - 1);
    if (k > 0) s.neighbors = nearest_neighbors(s.curvesets, k);
    return s;
  }

  std::size_t find(const std::string& pair_id) const {
    auto it = index.find(pair_id);
    if (it == index.end()) throw DataError("unknown pair_id " + pair_id);
    return it->second;
  }
};

/// Channel 0 is the target image, channels 1..K-1 its nearest stations by
/// ascending distance; missing neighbours stay zero.
inline segnet::Tensor<float> stack_neighbors(const ImageSet& set, const std::string& pair_id, std::size_t K) {
  if (K < 1) throw ConfigError("K must be >= 1");
  if (K - 1 > set.max_neighbors)
    throw ConfigError("image set was built for K = " + std::to_string(set.max_neighbors + 1) + ", asked for " +
                      std::to_string(K));
  const std::size_t i = set.find(pair_id);
  segnet::Tensor<float> t({kImageSize, kImageSize, K});
  auto put = [&](std::size_t ch, const CurveImage& img) {
    for (std::size_t p = 0; p < static_cast<std::size_t>(kPixels); ++p)
      t[p * K + ch] = static_cast<float>(img.pixels.v[p]) / 255.0f;
  };
  put(0, set.rasters[i].image);
  if (K > 1) {
    auto it = set.neighbors.find(pair_id);
    if (it != set.neighbors.end())
      for (std::size_t n = 0; n < it->second.size() && n + 1 < K; ++n)
        put(n + 1, set.rasters[set.find(it->second[n])].image);
  }
  return t;
}

inline std::vector<segnet::Sample> make_samples(const ImageSet& set, std::size_t K, std::size_t begin,
                                                std::size_t end) {
  std::vector<segnet::Sample> out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) {
    const auto& m = set.rasters[i].mask.classes.v;
    out.push_back({stack_neighbors(set, set.curvesets[i].pair_id, K), std::vector<std::uint8_t>(m.begin(), m.end())});
  }
  return out;
}

inline LabelMask predict_mask(const segnet::UNetParams<float>& params, const segnet::Tensor<float>& input,
                              double threshold = 0.0) {
  const auto probs = segnet::unet_forward(params, input);
  const auto cls = segnet::predict_classes(probs, threshold);
  LabelMask m;
  std::copy(cls.begin(), cls.end(), m.classes.v.begin());
  return m;
}

// ---------------------------------------------------------------------------
// Reports

struct ImageResult {
  std::string pair_id;
  Metrics pixel;
  Metrics point;
  std::vector<SnappedPick> picks;
};

struct PickReport {
  std::string model;
  std::vector<ImageResult> images;
  ClassMedians pixel_medians;
  ClassMedians point_medians;
  Metrics pooled;
};

inline json to_json(const PickReport& r) {
  json per = json::array();
  for (const auto& im : r.images) {
    std::size_t snapped = 0, unsnapped = 0;
    for (const auto& p : im.picks) {
      if (p.point.label == Label::noise) continue;
      (p.snapped ? snapped : unsnapped)++;
    }
    per.push_back({{"pair_id", im.pair_id},
                   {"pixel", to_json(im.pixel)},
                   {"point", to_json(im.point)},
                   {"picks", {{"snapped", snapped}, {"unsnapped", unsnapped}}}});
  }
  return {{"model", r.model},
          {"images", r.images.size()},
          {"medians", {{"pixel", to_json(r.pixel_medians)}, {"point", to_json(r.point_medians)}}},
          {"pooled", to_json(r.pooled)},
          {"per_image", per}};
}

/// One line per class: class, median precision, median recall (pixel level).
inline std::string metrics_csv(const PickReport& r) {
  std::string out = "class,precision,recall,point_precision,point_recall\n";
  auto f = [](const std::optional<double>& v) {
    if (!v) return std::string("NA");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return std::string(buf);
  };
  for (std::size_t c = 0; c < 3; ++c)
    out += std::string(label_name(static_cast<Label>(c))) + "," + f(r.pixel_medians.precision[c]) + "," +
           f(r.pixel_medians.recall[c]) + "," + f(r.point_medians.precision[c]) + "," +
           f(r.point_medians.recall[c]) + "\n";
  return out;
}

/// Snapped mode picks as NDJSON records {pair_id, frequency, velocity, label, snapped}.
inline std::string picks_ndjson(const PickReport& r) {
  std::string out;
  for (const auto& im : r.images)
    for (const auto& p : im.picks) {
      if (p.point.label == Label::noise) continue;
      out += json{{"pair_id", im.pair_id},
                  {"frequency", p.point.frequency},
                  {"velocity", p.point.velocity},
                  {"label", to_int(p.point.label)},
                  {"snapped", p.snapped}}
                 .dump();
      out += '\n';
    }
  return out;
}

inline PickReport evaluate_model(const segnet::UNetParams<float>& params, const ImageSet& set, std::size_t K,
                                 const std::string& model_name, double threshold = 0.0) {
  if (params.config.in_channels != K)
    throw ConfigError("model expects K = " + std::to_string(params.config.in_channels) + ", data stacked with K = " +
                      std::to_string(K));
  PickReport r;
  r.model = model_name;
  std::vector<Metrics> px, pt;
  for (std::size_t i = 0; i < set.curvesets.size(); ++i) {
    const auto& cs = set.curvesets[i];
    const auto& ras = set.rasters[i];
    const auto pred = predict_mask(params, stack_neighbors(set, cs.pair_id, K), threshold);
    ImageResult im{cs.pair_id, evaluate(pred, ras.mask), evaluate_points(pred, ras.meta, cs), {}};
    im.picks = snap_to_peaks(pixel_picks(pred, ras.image), std::cref(cs), ras.meta);
    r.pooled += im.pixel;
    px.push_back(im.pixel);
    pt.push_back(im.point);
    r.images.push_back(std::move(im));
  }
  r.pixel_medians = class_medians(px);
  r.point_medians = class_medians(pt);
  return r;
}

// ---------------------------------------------------------------------------
// Experiment configuration

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::size_t K = 1;
  std::size_t sim_train = 2000;
  std::size_t sim_val = 200;
  std::size_t real_train = 900;
  std::size_t real_val = 100;
  std::size_t real_heldout = 200;
  segnet::TrainConfig pretrain;
  segnet::TrainConfig finetune;
  std::size_t depth = 3;
  std::size_t base_channels = 16;
  std::size_t threads = 1;
  bool skip_finetune = false;
  bool compare_sim_only = true;
  double threshold = 0.0;
  std::string data_dir = "data";        // relative to the output directory unless absolute
  std::string heldout_dir = "heldout";  // read only by the evaluate stage

  void validate() const {
    if (K < 1) throw ConfigError("K must be >= 1");
    if (sim_train < 1 || sim_val < 1) throw ConfigError("sim train/val counts must be >= 1");
    if (!skip_finetune && (real_train < 1 || real_val < 1)) throw ConfigError("real train/val counts must be >= 1");
    if (real_heldout < 1) throw ConfigError("real heldout count must be >= 1");
    if (!(threshold >= 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in [0, 1)");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    pretrain.validate();
    finetune.validate();
    unet().validate();
  }
  segnet::UNetConfig unet() const { return {depth, base_channels, K, 3}; }
  std::uint64_t stream(std::uint64_t tag) const { return splitmix64(seed ^ splitmix64(tag)); }
};

namespace detail {

inline json train_json(const segnet::TrainConfig& t) {
  return {{"learning_rate", t.adam.learning_rate}, {"beta1", t.adam.beta1},         {"beta2", t.adam.beta2},
          {"epsilon", t.adam.epsilon},             {"batch_size", t.batch_size},    {"patience", t.patience},
          {"max_epochs", t.max_epochs},            {"early_stopping", t.early_stopping}};
}

template <class V>
void take(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : keys) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown config key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
  }
}

inline void train_from_json(const json& j, segnet::TrainConfig& t, const std::string& where) {
  reject_unknown(j,
                 {"learning_rate", "beta1", "beta2", "epsilon", "batch_size", "patience", "max_epochs",
                  "early_stopping"},
                 where);
  take(j, "learning_rate", t.adam.learning_rate);
  take(j, "beta1", t.adam.beta1);
  take(j, "beta2", t.adam.beta2);
  take(j, "epsilon", t.adam.epsilon);
  take(j, "batch_size", t.batch_size);
  take(j, "patience", t.patience);
  take(j, "max_epochs", t.max_epochs);
  take(j, "early_stopping", t.early_stopping);
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"K", c.K},
          {"sim", {{"train", c.sim_train}, {"val", c.sim_val}}},
          {"real", {{"train", c.real_train}, {"val", c.real_val}, {"heldout", c.real_heldout}}},
          {"pretrain", detail::train_json(c.pretrain)},
          {"finetune", detail::train_json(c.finetune)},
          {"unet", {{"depth", c.depth}, {"base_channels", c.base_channels}}},
          {"threads", c.threads},
          {"skip_finetune", c.skip_finetune},
          {"compare_sim_only", c.compare_sim_only},
          {"threshold", c.threshold},
          {"paths", {{"data", c.data_dir}, {"heldout", c.heldout_dir}}}};
}

/// Overlays `j` onto `base`; unknown keys anywhere are an error.
inline ExperimentConfig experiment_config_from_json(const json& j, ExperimentConfig c = {}) {
  using detail::take;
  detail::reject_unknown(j,
                         {"seed", "K", "sim", "real", "pretrain", "finetune", "unet", "threads", "skip_finetune",
                          "compare_sim_only", "threshold", "paths"},
                         "");
  take(j, "seed", c.seed);
  take(j, "K", c.K);
  if (j.contains("sim")) {
    detail::reject_unknown(j["sim"], {"train", "val"}, "sim");
    take(j["sim"], "train", c.sim_train);
    take(j["sim"], "val", c.sim_val);
  }
  if (j.contains("real")) {
    detail::reject_unknown(j["real"], {"train", "val", "heldout"}, "real");
    take(j["real"], "train", c.real_train);
    take(j["real"], "val", c.real_val);
    take(j["real"], "heldout", c.real_heldout);
  }
  if (j.contains("pretrain")) detail::train_from_json(j["pretrain"], c.pretrain, "pretrain");
  if (j.contains("finetune")) detail::train_from_json(j["finetune"], c.finetune, "finetune");
  if (j.contains("unet")) {
    detail::reject_unknown(j["unet"], {"depth", "base_channels"}, "unet");
    take(j["unet"], "depth", c.depth);
    take(j["unet"], "base_channels", c.base_channels);
  }
  take(j, "threads", c.threads);
  take(j, "skip_finetune", c.skip_finetune);
  take(j, "compare_sim_only", c.compare_sim_only);
  take(j, "threshold", c.threshold);
  if (j.contains("paths")) {
    detail::reject_unknown(j["paths"], {"data", "heldout"}, "paths");
    take(j["paths"], "data", c.data_dir);
    take(j["paths"], "heldout", c.heldout_dir);
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Stages

enum class Stage { generate, pretrain, finetune, evaluate, complete };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::generate: return "generate";
    case Stage::pretrain: return "pretrain";
    case Stage::finetune: return "finetune";
    case Stage::evaluate: return "evaluate";
    case Stage::complete: return "complete";
  }
  return "?";
}

/// Resolved directories for one experiment.  The held-out directory is
/// handed out only while the evaluate stage is active.
class ExperimentPaths {
 public:
  ExperimentPaths(const ExperimentConfig& cfg, fs::path out) : out_(std::move(out)) {
    data_ = fs::path(cfg.data_dir).is_absolute() ? fs::path(cfg.data_dir) : out_ / cfg.data_dir;
    heldout_ = fs::path(cfg.heldout_dir).is_absolute() ? fs::path(cfg.heldout_dir) : out_ / cfg.heldout_dir;
  }

  const fs::path& out() const { return out_; }
  fs::path sim() const { return data_ / "sim"; }
  fs::path real() const { return data_ / "real"; }
  fs::path checkpoints() const { return out_ / "checkpoints"; }
  fs::path pretrain_checkpoint() const { return checkpoints() / "pretrain.ckpt"; }
  fs::path finetune_checkpoint() const { return checkpoints() / "finetune.ckpt"; }

  void enter(Stage s) { stage_ = s; }
  Stage stage() const { return stage_; }

  /// Location for writing the held-out set (generation never reads it back).
  fs::path heldout_for_writing() const { return heldout_ / "real"; }

  fs::path heldout_for_reading() const {
    if (stage_ != Stage::evaluate)
      throw StructuralError(std::string("held-out data requested during the ") + stage_name(stage_) + " stage");
    return heldout_ / "real";
  }

 private:
  fs::path out_, data_, heldout_;
  Stage stage_ = Stage::generate;
};

namespace detail {

/// Generates `dir` unless it already holds a dataset with the same
/// (count, domain, seed).
inline void ensure_dataset(const fs::path& dir, std::size_t n, Domain domain, std::uint64_t seed) {
  if (fs::exists(dir / "manifest.json")) {
    const auto m = io::read_json(dir / "manifest.json");
    if (m.value("count", std::size_t{0}) == n && m.value("domain", std::string()) == to_string(domain) &&
        m.value("seed", std::uint64_t{0}) == seed)
      return;
  }
  generate_dataset(dir, n, domain, seed, true);
}

inline std::vector<std::size_t> split_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace detail

/// Writes the sim, real and held-out datasets (skipping ones already present).
inline void stage_generate(const ExperimentConfig& cfg, ExperimentPaths& paths) {
  paths.enter(Stage::generate);
  detail::ensure_dataset(paths.sim(), cfg.sim_train + cfg.sim_val, Domain::sim, cfg.stream(1));
  if (!cfg.skip_finetune)
    detail::ensure_dataset(paths.real(), cfg.real_train + cfg.real_val, Domain::pseudo_real, cfg.stream(2));
  detail::ensure_dataset(paths.heldout_for_writing(), cfg.real_heldout, Domain::pseudo_real, cfg.stream(3));
}

struct SplitSamples {
  std::vector<segnet::Sample> train, val;
  ImageSet images;
};

/// Sim: first `sim_train` curvesets train, the rest validate.  Real: a
/// seeded shuffle, then the first `real_train` train.
inline SplitSamples load_split(const fs::path& dir, std::size_t n_train, std::size_t n_val, std::size_t K,
                               std::optional<std::uint64_t> shuffle_seed) {
  auto ds = load_dataset(dir);
  if (ds.curvesets.size() != n_train + n_val)
    throw DataError(dir.string() + ": holds " + std::to_string(ds.curvesets.size()) + " curvesets, expected " +
                    std::to_string(n_train + n_val));
  if (shuffle_seed) {
    const auto order = detail::split_order(ds.curvesets.size(), *shuffle_seed);
    std::vector<CurveSet> shuffled;
    for (auto i : order) shuffled.push_back(std::move(ds.curvesets[i]));
    ds.curvesets = std::move(shuffled);
  }
  SplitSamples s{{}, {}, ImageSet::build(std::move(ds.curvesets), K)};
  s.train = make_samples(s.images, K, 0, n_train);
  s.val = make_samples(s.images, K, n_train, n_train + n_val);
  return s;
}

struct StageOutcome {
  segnet::UNetParams<float> params;
  std::vector<segnet::EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
};

namespace detail {

inline StageOutcome finish_training(segnet::TrainResult<float>&& r, const fs::path& ckpt, const fs::path& history,
                                    const char* stage) {
  io::write_text(history, segnet::history_csv(r.history));
  if (r.best_epoch > 0) segnet::save_checkpoint(ckpt, r.params, &r.adam);
  if (r.aborted)
    throw NumericalError(std::string(stage) + ": " + *r.aborted +
                         (r.best_epoch > 0 ? " (last good checkpoint " + ckpt.string() + ")" : ""));
  StageOutcome o{std::move(r.params), std::move(r.history), r.best_epoch, 0.0};
  for (const auto& e : o.history)
    if (e.epoch == o.best_epoch) o.best_val_loss = e.val_loss;
  return o;
}

inline std::function<bool(const segnet::EpochRecord&)> epoch_logger(std::string stage) {
  return [stage = std::move(stage)](const segnet::EpochRecord& e) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s epoch %zu: train %.5f val %.5f", stage.c_str(), e.epoch, e.train_loss,
                  e.val_loss);
    log_line(buf);
    return true;
  };
}

inline segnet::TrainConfig with_run_settings(segnet::TrainConfig t, const ExperimentConfig& cfg, std::uint64_t tag) {
  t.seed = cfg.stream(tag);
  t.threads = cfg.threads;
  return t;
}

}  // namespace detail

inline StageOutcome stage_pretrain(const ExperimentConfig& cfg, ExperimentPaths& paths) {
  paths.enter(Stage::pretrain);
  const auto data = load_split(paths.sim(), cfg.sim_train, cfg.sim_val, cfg.K, std::nullopt);
  auto init = segnet::init_params<float>(cfg.unet(), cfg.stream(4));
  auto r = segnet::train(std::move(init), data.train, data.val, detail::with_run_settings(cfg.pretrain, cfg, 5),
                         detail::epoch_logger("pretrain"));
  return detail::finish_training(std::move(r), paths.pretrain_checkpoint(), paths.out() / "pretrain_history.csv",
                                 "pretrain");
}

/// Fine-tunes all layers from `start` with a fresh optimizer state.
inline StageOutcome stage_finetune(const ExperimentConfig& cfg, ExperimentPaths& paths,
                                   const segnet::UNetParams<float>& start) {
  paths.enter(Stage::finetune);
  const auto data = load_split(paths.real(), cfg.real_train, cfg.real_val, cfg.K, cfg.stream(6));
  auto r = segnet::train(start, data.train, data.val, detail::with_run_settings(cfg.finetune, cfg, 7),
                         detail::epoch_logger("finetune"));
  return detail::finish_training(std::move(r), paths.finetune_checkpoint(), paths.out() / "finetune_history.csv",
                                 "finetune");
}

inline ImageSet load_heldout(const ExperimentConfig& cfg, ExperimentPaths& paths) {
  auto ds = load_dataset(paths.heldout_for_reading());
  if (ds.curvesets.size() != cfg.real_heldout)
    throw DataError("held-out set holds " + std::to_string(ds.curvesets.size()) + " curvesets, expected " +
                    std::to_string(cfg.real_heldout));
  return ImageSet::build(std::move(ds.curvesets), cfg.K);
}

/// Sim-val metrics of a model (the domain-gap reference).
inline PickReport evaluate_sim_val(const ExperimentConfig& cfg, ExperimentPaths& paths,
                                   const segnet::UNetParams<float>& params, const std::string& name) {
  auto ds = load_dataset(paths.sim());
  std::vector<CurveSet> val(ds.curvesets.begin() + static_cast<std::ptrdiff_t>(cfg.sim_train), ds.curvesets.end());
  return evaluate_model(params, ImageSet::build(std::move(val), cfg.K), cfg.K, name, cfg.threshold);
}

struct ExperimentReport {
  Stage stage = Stage::generate;  // complete, or the stage that failed
  std::optional<std::string> error;
  int exit_code = 0;
  ExperimentConfig config;
  std::optional<StageOutcome> pretrain, finetune;
  std::optional<PickReport> heldout;           // final model
  std::optional<PickReport> heldout_sim_only;  // pretrained model, same held-out set
  std::optional<PickReport> sim_val;           // pretrained model on sim validation

  /// Best validation loss of the last training stage that ran.
  std::optional<double> final_val_loss() const {
    if (finetune) return finetune->best_val_loss;
    if (pretrain) return pretrain->best_val_loss;
    return std::nullopt;
  }
};

inline json to_json(const ExperimentReport& r) {
  auto stage_json = [](const std::optional<StageOutcome>& s) -> json {
    if (!s) return nullptr;
    return {{"best_epoch", s->best_epoch}, {"epochs", s->history.size()}, {"best_val_loss", s->best_val_loss}};
  };
  auto medians = [](const std::optional<PickReport>& p) -> json {
    if (!p) return nullptr;
    return to_json(p->pixel_medians);
  };
  return {{"stage", stage_name(r.stage)},
          {"error", r.error ? json(*r.error) : json(nullptr)},
          {"config", to_json(r.config)},
          {"pretrain", stage_json(r.pretrain)},
          {"finetune", stage_json(r.finetune)},
          {"heldout", r.heldout ? to_json(*r.heldout) : json(nullptr)},
          {"heldout_sim_only", medians(r.heldout_sim_only)},
          {"sim_val", medians(r.sim_val)}};
}

/// heldout_report.json, metrics.csv and picks.ndjson for one PickReport.
inline void write_pick_report(const fs::path& out, const PickReport& r) {
  io::write_json(out / "heldout_report.json", to_json(r));
  io::write_text(out / "metrics.csv", metrics_csv(r));
  io::write_text(out / "picks.ndjson", picks_ndjson(r));
}

/// Writes report.json plus the held-out PickReport files into `out`.
inline void write_report(const fs::path& out, const ExperimentReport& r) {
  io::write_json(out / "report.json", to_json(r));
  if (r.heldout) write_pick_report(out, *r.heldout);
}

/// Full protocol.  A failing stage yields a partial report naming it;
/// the report is written to `out` either way.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  ExperimentReport r;
  r.config = cfg;
  ExperimentPaths paths(cfg, out);
  fs::create_directories(out);
  io::write_json(out / "config.json", to_json(cfg));
  try {
    r.stage = Stage::generate;
    stage_generate(cfg, paths);
    r.stage = Stage::pretrain;
    r.pretrain = stage_pretrain(cfg, paths);
    if (!cfg.skip_finetune) {
      r.stage = Stage::finetune;
      r.finetune = stage_finetune(cfg, paths, r.pretrain->params);
    }
    r.stage = Stage::evaluate;
    paths.enter(Stage::evaluate);
    r.sim_val = evaluate_sim_val(cfg, paths, r.pretrain->params, "pretrain");
    const auto heldout = load_heldout(cfg, paths);
    const auto& final_params = r.finetune ? r.finetune->params : r.pretrain->params;
    r.heldout = evaluate_model(final_params, heldout, cfg.K, r.finetune ? "finetune" : "pretrain", cfg.threshold);
    if (r.finetune && cfg.compare_sim_only)
      r.heldout_sim_only = evaluate_model(r.pretrain->params, heldout, cfg.K, "pretrain", cfg.threshold);
    r.stage = Stage::complete;
  } catch (const Error& e) {
    r.error = e.what();
    r.exit_code = e.exit_code();
  } catch (const std::exception& e) {
    r.error = e.what();
    r.exit_code = 2;
  }
  write_report(out, r);
  return r;
}

// ---------------------------------------------------------------------------
// K sweep

struct SweepRow {
  std::size_t K = 0;
  std::size_t runs = 0;
  std::size_t kept = 0;
  ClassMedians medians;  // median over kept runs of each run's per-image median
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<ExperimentReport> runs;  // ordered by (K, repeat)
};

/// Runs the experiment for every K and repeat (seeds derived from
/// cfg.seed), keeps the best `keep_fraction` of runs per K by final
/// validation loss and reports median held-out metrics.  Runs of the same
/// repeat share datasets.  Up to `jobs` runs execute concurrently.
inline SweepResult k_sweep(const ExperimentConfig& cfg, const std::vector<std::size_t>& Ks, std::size_t n_repeats,
                           const fs::path& out, double keep_fraction = 0.5, std::size_t jobs = 1) {
  if (Ks.empty()) throw ConfigError("k_sweep needs at least one K");
  for (auto k : Ks)
    if (k < 1) throw ConfigError("K values must be >= 1");
  if (n_repeats < 1) throw ConfigError("k_sweep needs at least one repeat");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw ConfigError("keep_fraction must lie in (0, 1]");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");

  std::vector<ExperimentConfig> cfgs;
  std::vector<fs::path> dirs;
  for (std::size_t k = 0; k < Ks.size(); ++k)
    for (std::size_t rep = 0; rep < n_repeats; ++rep) {
      ExperimentConfig c = cfg;
      c.K = Ks[k];
      c.seed = splitmix64(cfg.seed + 0x9e37 * (rep + 1));
      c.data_dir = (out / ("data_r" + std::to_string(rep))).string();
      c.heldout_dir = (out / ("heldout_r" + std::to_string(rep))).string();
      c.validate();
      cfgs.push_back(c);
      dirs.push_back(out / ("K" + std::to_string(Ks[k]) + "_r" + std::to_string(rep)));
    }
  // Shared datasets are produced up front so concurrent runs only read them.
  for (std::size_t rep = 0; rep < n_repeats; ++rep) {
    ExperimentPaths p(cfgs[rep], dirs[rep]);
    stage_generate(cfgs[rep], p);
  }

  SweepResult res;
  res.runs.resize(cfgs.size());
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= cfgs.size()) return;
        i = next++;
      }
      res.runs[i] = run_experiment(cfgs[i], dirs[i]);
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(jobs, cfgs.size()); ++w) pool.emplace_back(worker);
  }

  for (std::size_t k = 0; k < Ks.size(); ++k) {
    SweepRow row;
    row.K = Ks[k];
    std::vector<const ExperimentReport*> ok;
    for (std::size_t rep = 0; rep < n_repeats; ++rep) {
      const auto& r = res.runs[k * n_repeats + rep];
      if (r.stage == Stage::complete && r.heldout && r.final_val_loss()) ok.push_back(&r);
    }
    row.runs = ok.size();
    std::stable_sort(ok.begin(), ok.end(),
                     [](const auto* a, const auto* b) { return *a->final_val_loss() < *b->final_val_loss(); });
    row.kept = ok.empty() ? 0
                          : std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(
                                                         keep_fraction * static_cast<double>(ok.size()) - 1e-9)));
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> p, rc;
      for (std::size_t i = 0; i < row.kept; ++i) {
        if (auto v = ok[i]->heldout->pixel_medians.precision[c]) p.push_back(*v);
        if (auto v = ok[i]->heldout->pixel_medians.recall[c]) rc.push_back(*v);
      }
      row.medians.precision[c] = median(std::move(p));
      row.medians.recall[c] = median(std::move(rc));
    }
    res.rows.push_back(row);
  }
  return res;
}

/// Table with one row per K and six metric columns.
inline std::string sweep_csv(const SweepResult& s) {
  std::string out =
      "K,runs,kept,noise_precision,noise_recall,fundamental_precision,fundamental_recall,overtone_precision,"
      "overtone_recall\n";
  auto f = [](const std::optional<double>& v) {
    if (!v) return std::string("NA");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return std::string(buf);
  };
  for (const auto& r : s.rows) {
    out += std::to_string(r.K) + "," + std::to_string(r.runs) + "," + std::to_string(r.kept);
    for (std::size_t c = 0; c < 3; ++c) out += "," + f(r.medians.precision[c]) + "," + f(r.medians.recall[c]);
    out += "\n";
  }
  return out;
}

}  // namespace dispick
