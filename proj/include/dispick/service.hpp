#pragma once

// HTTP/JSON labeling backend.
//
//   GET  /api/health
//   GET  /api/curvesets?page=&page_size=      paged list
//   GET  /api/curvesets/{id}                  points, labels, raster meta, prediction overlay
//   GET  /api/curvesets/{id}/history          every label revision, oldest first
//   PUT  /api/curvesets/{id}/labels           {"revision", "labels": [{"index", "label"}], "author"}
//   POST /api/jobs/finetune                   {"max_epochs", "learning_rate", "patience", "batch_size", "seed"}
//   GET  /api/jobs/{id}
//   GET  /api/metrics                         report for the active checkpoint
//
// Status codes: 200, 202 (job accepted), 400 (bad body / not enough
// labels), 404 (unknown id or no checkpoint), 409 (stale revision or
// dataset).

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <ctime>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "datagen.hpp"
#include "io.hpp"
#include "pipeline.hpp"
#include "raster.hpp"

// After Eigen: glibc's resolver header defines a `_res` macro that collides
// with Eigen parameter names.
#include <httplib.h>

namespace dispick::service {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Label store

struct LabelRecord {
  std::string pair_id;
  std::size_t index = 0;
  Label label = Label::noise;
  std::string author;
  std::string timestamp;
  std::uint64_t revision = 0;

  friend bool operator==(const LabelRecord&, const LabelRecord&) = default;
};

inline json to_json(const LabelRecord& r) {
  return {{"pair_id", r.pair_id}, {"index", r.index},         {"label", to_int(r.label)},
          {"author", r.author},   {"timestamp", r.timestamp}, {"revision", r.revision}};
}

inline LabelRecord label_record_from_json(const json& j) {
  return {j.at("pair_id").get<std::string>(), j.at("index").get<std::size_t>(),
          label_from_int(j.at("label").get<int>()), j.at("author").get<std::string>(),
          j.at("timestamp").get<std::string>(), j.at("revision").get<std::uint64_t>()};
}

struct LabelEdit {
  std::size_t index = 0;
  Label label = Label::noise;
};

enum class PutStatus { ok, conflict, bad_index, unknown_pair };

struct PutResult {
  PutStatus status = PutStatus::ok;
  std::uint64_t revision = 0;          // new revision, or current one on conflict
  std::vector<std::size_t> offenders;  // out-of-range indices
};

/// Point labels for one dataset, persisted as `labels-<hash>.ndjson`
/// (append-only, one LabelRecord per line) plus a compacted
/// `labels-<hash>.snapshot.json` recording how many log bytes it covers.
/// Writes are serialized; reads may run concurrently.
class LabelStore {
 public:
  LabelStore(fs::path dir, std::uint64_t dataset_hash, std::map<std::string, std::size_t> point_counts,
             std::size_t snapshot_every = 64)
      : dir_(std::move(dir)),
        hash_(hash_hex(dataset_hash)),
        counts_(std::move(point_counts)),
        snapshot_every_(snapshot_every) {
    fs::create_directories(dir_);
    load();
  }

  const std::string& dataset_hash() const { return hash_; }
  fs::path log_path() const { return dir_ / ("labels-" + hash_ + ".ndjson"); }
  fs::path snapshot_path() const { return dir_ / ("labels-" + hash_ + ".snapshot.json"); }

  std::uint64_t revision(const std::string& pair_id) const {
    std::shared_lock lock(mu_);
    auto it = state_.find(pair_id);
    return it == state_.end() ? 0 : it->second.revision;
  }

  /// Current label per labeled point index.
  std::map<std::size_t, LabelRecord> current(const std::string& pair_id) const {
    std::shared_lock lock(mu_);
    auto it = state_.find(pair_id);
    return it == state_.end() ? std::map<std::size_t, LabelRecord>{} : it->second.points;
  }

  std::size_t labeled_points(const std::string& pair_id) const {
    std::shared_lock lock(mu_);
    auto it = state_.find(pair_id);
    return it == state_.end() ? 0 : it->second.points.size();
  }

  /// Pair ids with at least one revision, in sorted order.
  std::vector<std::string> labeled_pairs() const {
    std::shared_lock lock(mu_);
    std::vector<std::string> out;
    for (const auto& [id, s] : state_)
      if (s.revision > 0) out.push_back(id);
    return out;
  }

  /// Applies `edits` iff `expected_revision` is the current revision.
  PutResult put(const std::string& pair_id, std::uint64_t expected_revision, const std::vector<LabelEdit>& edits,
                const std::string& author) {
    auto cnt = counts_.find(pair_id);
    if (cnt == counts_.end()) return {PutStatus::unknown_pair, 0, {}};
    PutResult res;
    for (const auto& e : edits)
      if (e.index >= cnt->second) res.offenders.push_back(e.index);
    if (!res.offenders.empty()) {
      res.status = PutStatus::bad_index;
      return res;
    }
    std::unique_lock lock(mu_);
    auto& s = state_[pair_id];
    if (s.revision != expected_revision) return {PutStatus::conflict, s.revision, {}};
    const std::uint64_t rev = s.revision + 1;
    const std::string ts = utc_timestamp();
    std::string lines;
    std::vector<LabelRecord> recs;
    for (const auto& e : edits) {
      recs.push_back({pair_id, e.index, e.label, author, ts, rev});
      lines += to_json(recs.back()).dump();
      lines += '\n';
    }
    append(lines);
    s.revision = rev;
    for (auto& r : recs) s.points[r.index] = std::move(r);
    if (++since_snapshot_ >= snapshot_every_) write_snapshot();
    return {PutStatus::ok, rev, {}};
  }

  /// Full audit trail for a pair (all revisions, log order).
  std::vector<LabelRecord> history(const std::string& pair_id) const {
    std::shared_lock lock(mu_);
    std::vector<LabelRecord> out;
    for_each_log_record(0, [&](const LabelRecord& r) {
      if (r.pair_id == pair_id) out.push_back(r);
    });
    return out;
  }

  void compact() {
    std::unique_lock lock(mu_);
    write_snapshot();
  }

 private:
  struct PairState {
    std::uint64_t revision = 0;
    std::map<std::size_t, LabelRecord> points;
  };

  template <class Fn>
  void for_each_log_record(std::uintmax_t from, Fn&& fn) const {
    std::ifstream in(log_path(), std::ios::binary);
    if (!in) return;
    in.seekg(static_cast<std::streamoff>(from));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        fn(label_record_from_json(json::parse(line)));
      } catch (const std::exception& e) {
        throw DataError(log_path().string() + ": corrupt label record: " + e.what());
      }
    }
  }

  void load() {
    std::uintmax_t covered = 0;
    if (fs::exists(snapshot_path())) {
      const auto snap = io::read_json(snapshot_path());
      if (snap.value("dataset_hash", std::string()) != hash_)
        throw DataError(snapshot_path().string() + ": snapshot belongs to another dataset");
      covered = snap.at("log_bytes").get<std::uintmax_t>();
      for (const auto& [id, s] : snap.at("pairs").items()) {
        auto& ps = state_[id];
        ps.revision = s.at("revision").get<std::uint64_t>();
        for (const auto& r : s.at("points")) {
          auto rec = label_record_from_json(r);
          ps.points[rec.index] = std::move(rec);
        }
      }
    }
    if (fs::exists(log_path())) {
      // A torn final line was never acknowledged; drop it.
      const std::string text = io::read_text(log_path());
      const auto keep = text.empty() || text.back() == '\n' ? text.size() : text.rfind('\n') + 1;
      if (keep != text.size()) fs::resize_file(log_path(), keep == std::string::npos ? 0 : keep);
      if (covered > fs::file_size(log_path())) throw DataError(snapshot_path().string() + ": covers more log than exists");
      for_each_log_record(covered, [&](const LabelRecord& r) {
        if (!counts_.count(r.pair_id) || r.index >= counts_.at(r.pair_id))
          throw DataError(log_path().string() + ": record for unknown point " + r.pair_id + "#" +
                          std::to_string(r.index) + " (stale dataset?)");
        auto& ps = state_[r.pair_id];
        ps.revision = std::max(ps.revision, r.revision);
        ps.points[r.index] = r;
      });
    }
  }

  void append(const std::string& lines) {
    std::ofstream out(log_path(), std::ios::binary | std::ios::app);
    out.write(lines.data(), static_cast<std::streamsize>(lines.size()));
    out.flush();
    if (!out) throw DataError("failed appending to " + log_path().string());
  }

  void write_snapshot() {
    json pairs = json::object();
    for (const auto& [id, s] : state_) {
      json pts = json::array();
      for (const auto& [i, r] : s.points) pts.push_back(to_json(r));
      pairs[id] = {{"revision", s.revision}, {"points", pts}};
    }
    const std::uintmax_t bytes = fs::exists(log_path()) ? fs::file_size(log_path()) : 0;
    const auto tmp = fs::path(snapshot_path().string() + ".tmp");
    io::write_json(tmp, {{"dataset_hash", hash_}, {"log_bytes", bytes}, {"pairs", pairs}});
    fs::rename(tmp, snapshot_path());
    since_snapshot_ = 0;
  }

  fs::path dir_;
  std::string hash_;
  std::map<std::string, std::size_t> counts_;
  std::size_t snapshot_every_;
  std::size_t since_snapshot_ = 0;
  mutable std::shared_mutex mu_;
  std::map<std::string, PairState> state_;
};

// ---------------------------------------------------------------------------
// Jobs

enum class JobState { queued, running, done, failed };

inline const char* job_state_name(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "?";
}

struct JobStatus {
  std::string id;
  std::string kind = "finetune";
  JobState state = JobState::queued;
  double progress = 0.0;
  std::string message;
  std::optional<std::string> checkpoint;
  std::vector<JobState> transitions{JobState::queued};
};

inline json to_json(const JobStatus& s) {
  json tr = json::array();
  for (auto t : s.transitions) tr.push_back(job_state_name(t));
  return {{"id", s.id},
          {"kind", s.kind},
          {"state", job_state_name(s.state)},
          {"progress", s.progress},
          {"message", s.message},
          {"checkpoint", s.checkpoint ? json(*s.checkpoint) : json(nullptr)},
          {"transitions", tr}};
}

// ---------------------------------------------------------------------------
// Service

struct ServiceConfig {
  fs::path dataset;                      // datagen dataset directory
  fs::path store;                        // label store directory
  fs::path work_dir;                     // fine-tune checkpoints land here
  std::optional<fs::path> checkpoint;    // initial active model
  std::optional<fs::path> static_dir;    // built UI bundle
  std::size_t min_labeled = 50;
  std::size_t default_page_size = 50;
  std::size_t max_page_size = 1000;
  segnet::TrainConfig finetune;          // defaults for jobs
  std::uint64_t seed = 1;
};

class Service {
 public:
  explicit Service(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    auto ds = load_dataset(cfg_.dataset);
    dataset_hash_ = ds.hash();
    std::map<std::string, std::size_t> counts;
    for (const auto& cs : ds.curvesets) counts[cs.pair_id] = cs.points.size();
    curvesets_ = std::move(ds.curvesets);
    for (std::size_t i = 0; i < curvesets_.size(); ++i) index_[curvesets_[i].pair_id] = i;
    store_ = std::make_unique<LabelStore>(cfg_.store, dataset_hash_, std::move(counts));
    if (cfg_.checkpoint) activate(segnet::load_checkpoint(*cfg_.checkpoint).params, cfg_.checkpoint->string());
    routes();
    worker_ = std::jthread([this](std::stop_token st) { job_loop(st); });
  }

  ~Service() {
    stop();
    {
      std::lock_guard lock(jobs_mu_);
      worker_.request_stop();
    }
    jobs_cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  httplib::Server& http() { return server_; }
  LabelStore& store() { return *store_; }
  std::uint64_t dataset_hash() const { return dataset_hash_; }

  /// Binds to `port` (0 picks a free one) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw DataError("cannot bind " + host + ":" + std::to_string(port));
    listener_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  /// Serves on the calling thread until stop().
  void run(const std::string& host, int port) {
    if (!server_.listen(host, port)) throw DataError("cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (listener_.joinable()) listener_.join();
  }

  /// Blocks until job `id` has finished (for tests and the CLI).
  JobStatus wait_job(const std::string& id) {
    std::unique_lock lock(jobs_mu_);
    jobs_cv_.wait(lock, [&] {
      auto it = jobs_.find(id);
      return it == jobs_.end() || it->second.state == JobState::done || it->second.state == JobState::failed;
    });
    return jobs_.at(id);
  }

 private:
  struct Model {
    segnet::UNetParams<float> params;
    std::string source;
    std::size_t K = 1;
    std::shared_ptr<const ImageSet> images;
  };

  struct JobRequest {
    std::string id;
    segnet::TrainConfig train;
    std::uint64_t seed = 0;
  };

  void activate(segnet::UNetParams<float> params, std::string source) {
    auto m = std::make_shared<Model>();
    m->K = params.config.in_channels;
    m->params = std::move(params);
    m->source = std::move(source);
    m->images = std::make_shared<const ImageSet>(ImageSet::build(curvesets_, m->K));
    std::lock_guard lock(model_mu_);
    model_ = std::move(m);
    metrics_cache_.reset();
  }

  std::shared_ptr<const Model> model() const {
    std::lock_guard lock(model_mu_);
    return model_;
  }

  /// Dataset labels overridden by the current human labels.
  CurveSet labeled_view(const CurveSet& cs) const {
    CurveSet out = cs;
    for (const auto& [i, r] : store_->current(cs.pair_id)) out.points[i].label = r.label;
    return out;
  }

  static void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& msg, json extra = json::object()) {
    extra["error"] = msg;
    send_json(res, status, extra);
  }

  void routes() {
    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    });
    server_.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, {{"status", "ok"}, {"dataset_hash", hash_hex(dataset_hash_)}, {"curvesets", curvesets_.size()}});
    });
    server_.Get("/api/curvesets", [this](const httplib::Request& req, httplib::Response& res) { list(req, res); });
    server_.Get(R"(/api/curvesets/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) { detail(req, res); });
    server_.Get(R"(/api/curvesets/([^/]+)/history)", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      if (!index_.count(id)) return send_error(res, 404, "unknown curveset " + id);
      json h = json::array();
      for (const auto& r : store_->history(id)) h.push_back(to_json(r));
      send_json(res, 200, {{"pair_id", id}, {"records", h}});
    });
    server_.Put(R"(/api/curvesets/([^/]+)/labels)", [this](const httplib::Request& req, httplib::Response& res) { put_labels(req, res); });
    server_.Post("/api/jobs/finetune", [this](const httplib::Request& req, httplib::Response& res) { post_job(req, res); });
    server_.Get(R"(/api/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(jobs_mu_);
      auto it = jobs_.find(req.matches[1]);
      if (it == jobs_.end()) return send_error(res, 404, "unknown job " + std::string(req.matches[1]));
      send_json(res, 200, to_json(it->second));
    });
    server_.Get("/api/metrics", [this](const httplib::Request&, httplib::Response& res) { metrics(res); });
    if (cfg_.static_dir && fs::is_directory(*cfg_.static_dir)) server_.set_mount_point("/", cfg_.static_dir->string());
  }

  void list(const httplib::Request& req, httplib::Response& res) {
    std::size_t page = 0, size = cfg_.default_page_size;
    try {
      if (req.has_param("page")) page = std::stoul(req.get_param_value("page"));
      if (req.has_param("page_size")) size = std::stoul(req.get_param_value("page_size"));
    } catch (const std::exception&) {
      return send_error(res, 400, "page and page_size must be non-negative integers");
    }
    if (size < 1 || size > cfg_.max_page_size)
      return send_error(res, 400, "page_size must lie in [1, " + std::to_string(cfg_.max_page_size) + "]");
    json items = json::array();
    for (std::size_t i = page * size; i < std::min(curvesets_.size(), (page + 1) * size); ++i) {
      const auto& cs = curvesets_[i];
      const auto labeled = store_->labeled_points(cs.pair_id);
      items.push_back({{"pair_id", cs.pair_id},
                       {"points", cs.points.size()},
                       {"labeled_fraction", static_cast<double>(labeled) / static_cast<double>(cs.points.size())},
                       {"revision", store_->revision(cs.pair_id)}});
    }
    send_json(res, 200, {{"total", curvesets_.size()}, {"page", page}, {"page_size", size}, {"items", items}});
  }

  void detail(const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    auto it = index_.find(id);
    if (it == index_.end()) return send_error(res, 404, "unknown curveset " + id);
    const auto& cs = curvesets_[it->second];
    const auto labels = store_->current(id);
    json pts = json::array();
    for (std::size_t i = 0; i < cs.points.size(); ++i) {
      const auto& p = cs.points[i];
      auto l = labels.find(i);
      pts.push_back({{"index", i},
                     {"frequency", p.frequency},
                     {"velocity", p.velocity},
                     {"amplitude", p.amplitude},
                     {"label", to_int(p.label)},
                     {"human_label", l == labels.end() ? json(nullptr) : json(to_int(l->second.label))}});
    }
    const auto ras = rasterize(cs);
    json body = {{"pair_id", cs.pair_id},
                 {"distance_km", cs.distance_km},
                 {"station_xy", cs.station_xy},
                 {"revision", store_->revision(id)},
                 {"dataset_hash", hash_hex(dataset_hash_)},
                 {"raster", to_json(ras.meta)},
                 {"points", pts}};
    if (auto m = model()) {
      const auto mask = predict_mask(m->params, stack_neighbors(*m->images, id, m->K));
      const auto predicted = mask_to_points(mask, ras.meta, cs);
      json cls = json::array(), picks = json::array();
      for (const auto& p : predicted) cls.push_back(to_int(p.label));
      for (const auto& s : snap_to_peaks(pixel_picks(mask, ras.image), std::cref(cs), ras.meta))
        picks.push_back({{"frequency", s.point.frequency},
                         {"velocity", s.point.velocity},
                         {"label", to_int(s.point.label)},
                         {"snapped", s.snapped}});
      body["prediction"] = {{"checkpoint", m->source}, {"point_labels", cls}, {"picks", picks}};
    }
    send_json(res, 200, body);
  }

  void put_labels(const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (!index_.count(id)) return send_error(res, 404, "unknown curveset " + id);
    json body;
    std::uint64_t rev = 0;
    std::vector<LabelEdit> edits;
    std::string author;
    try {
      body = json::parse(req.body);
      if (body.contains("dataset_hash") && body.at("dataset_hash").get<std::string>() != hash_hex(dataset_hash_))
        return send_error(res, 409, "labels refer to a different dataset",
                          {{"dataset_hash", hash_hex(dataset_hash_)}});
      rev = body.at("revision").get<std::uint64_t>();
      author = body.value("author", std::string("anonymous"));
      for (const auto& e : body.at("labels")) {
        const auto l = e.at("label").get<int>();
        if (l < 0 || l > 2) return send_error(res, 400, "label must be 0, 1 or 2");
        const auto idx = e.at("index").get<long long>();
        if (idx < 0) return send_error(res, 400, "bad point indices", {{"offenders", {idx}}});
        edits.push_back({static_cast<std::size_t>(idx), static_cast<Label>(l)});
      }
    } catch (const json::exception& e) {
      return send_error(res, 400, std::string("bad label body: ") + e.what());
    }
    const auto r = store_->put(id, rev, edits, author);
    switch (r.status) {
      case PutStatus::ok:
        {
          std::lock_guard lock(model_mu_);
          metrics_cache_.reset();
        }
        return send_json(res, 200, {{"pair_id", id}, {"revision", r.revision}});
      case PutStatus::conflict:
        return send_error(res, 409, "revision conflict", {{"revision", r.revision}});
      case PutStatus::bad_index:
        return send_error(res, 400, "bad point indices", {{"offenders", r.offenders}});
      case PutStatus::unknown_pair:
        return send_error(res, 404, "unknown curveset " + id);
    }
  }

  void post_job(const httplib::Request& req, httplib::Response& res) {
    JobRequest job;
    job.train = cfg_.finetune;
    job.seed = cfg_.seed;
    try {
      const json body = req.body.empty() ? json::object() : json::parse(req.body);
      detail::reject_unknown(body, {"max_epochs", "learning_rate", "patience", "batch_size", "seed"}, "job");
      detail::take(body, "max_epochs", job.train.max_epochs);
      detail::take(body, "learning_rate", job.train.adam.learning_rate);
      detail::take(body, "patience", job.train.patience);
      detail::take(body, "batch_size", job.train.batch_size);
      detail::take(body, "seed", job.seed);
      job.train.validate();
    } catch (const std::exception& e) {
      return send_error(res, 400, e.what());
    }
    const auto labeled = store_->labeled_pairs().size();
    if (labeled < cfg_.min_labeled)
      return send_error(res, 400,
                        "need at least " + std::to_string(cfg_.min_labeled) + " labeled curvesets, have " +
                            std::to_string(labeled),
                        {{"labeled", labeled}, {"required", cfg_.min_labeled}});
    JobStatus st;
    {
      std::lock_guard lock(jobs_mu_);
      job.id = "job-" + std::to_string(++job_counter_);
      st.id = job.id;
      jobs_[job.id] = st;
      queue_.push_back(job);
    }
    jobs_cv_.notify_all();
    send_json(res, 202, to_json(st));
  }

  void metrics(httplib::Response& res) {
    auto m = model();
    if (!m) return send_error(res, 404, "no checkpoint loaded");
    {
      std::lock_guard lock(model_mu_);
      if (metrics_cache_ && model_ == m) return send_json(res, 200, *metrics_cache_);
    }
    std::vector<CurveSet> truth;
    for (const auto& cs : curvesets_) truth.push_back(labeled_view(cs));
    const auto set = ImageSet::build(std::move(truth), m->K);
    auto body = to_json(evaluate_model(m->params, set, m->K, m->source));
    body["checkpoint"] = m->source;
    std::lock_guard lock(model_mu_);
    if (model_ == m) metrics_cache_ = body;
    send_json(res, 200, body);
  }

  void set_state(const std::string& id, JobState s, double progress, std::string msg = {},
                 std::optional<std::string> ckpt = std::nullopt) {
    std::lock_guard lock(jobs_mu_);
    auto& j = jobs_.at(id);
    if (j.state != s) j.transitions.push_back(s);
    j.state = s;
    j.progress = progress;
    if (!msg.empty()) j.message = std::move(msg);
    if (ckpt) j.checkpoint = std::move(ckpt);
    jobs_cv_.notify_all();
  }

  void job_loop(std::stop_token st) {
    for (;;) {
      JobRequest job;
      {
        std::unique_lock lock(jobs_mu_);
        jobs_cv_.wait(lock, [&] { return st.stop_requested() || !queue_.empty(); });
        if (st.stop_requested()) return;
        job = queue_.front();
        queue_.pop_front();
      }
      set_state(job.id, JobState::running, 0.0);
      try {
        run_job(job, st);
      } catch (const std::exception& e) {
        set_state(job.id, JobState::failed, 1.0, e.what());
      }
    }
  }

  /// Fine-tunes the active model (or a fresh one) on the human-labeled
  /// curvesets, 90:10 train/validation, and activates the result.
  void run_job(const JobRequest& job, std::stop_token st) {
    std::vector<CurveSet> sets;
    for (const auto& id : store_->labeled_pairs()) sets.push_back(labeled_view(curvesets_[index_.at(id)]));
    if (sets.size() < 2) throw DataError("need at least two labeled curvesets to split train/validation");
    auto base = model();
    const std::size_t K = base ? base->K : 1;
    auto order = pipeline_split(sets.size(), job.seed);
    std::vector<CurveSet> shuffled;
    for (auto i : order) shuffled.push_back(sets[i]);
    const std::size_t n_val = std::max<std::size_t>(1, shuffled.size() / 10);
    const std::size_t n_train = shuffled.size() - n_val;
    const auto images = ImageSet::build(std::move(shuffled), K);
    const auto train = make_samples(images, K, 0, n_train);
    const auto val = make_samples(images, K, n_train, n_train + n_val);
    auto start = base ? base->params : segnet::init_params<float>({3, 16, K, 3}, job.seed);
    auto cfg = job.train;
    cfg.seed = job.seed;
    auto r = segnet::train(std::move(start), train, val, cfg, [&](const segnet::EpochRecord& e) {
      set_state(job.id, JobState::running, static_cast<double>(e.epoch) / static_cast<double>(cfg.max_epochs));
      return !st.stop_requested();
    });
    if (r.aborted) throw NumericalError(*r.aborted);
    if (r.cancelled) throw DataError("cancelled by shutdown");
    const auto ckpt = cfg_.work_dir / "checkpoints" / (job.id + ".ckpt");
    segnet::save_checkpoint(ckpt, r.params, &r.adam);
    io::write_text(cfg_.work_dir / "checkpoints" / (job.id + "_history.csv"), segnet::history_csv(r.history));
    activate(std::move(r.params), ckpt.string());
    set_state(job.id, JobState::done, 1.0, "best epoch " + std::to_string(r.best_epoch), ckpt.string());
  }

  static std::vector<std::size_t> pipeline_split(std::size_t n, std::uint64_t seed) {
    return dispick::detail::split_order(n, seed);
  }

  ServiceConfig cfg_;
  std::vector<CurveSet> curvesets_;
  std::map<std::string, std::size_t> index_;
  std::uint64_t dataset_hash_ = 0;
  std::unique_ptr<LabelStore> store_;

  mutable std::mutex model_mu_;
  std::shared_ptr<const Model> model_;
  std::optional<json> metrics_cache_;

  std::mutex jobs_mu_;
  std::condition_variable jobs_cv_;
  std::map<std::string, JobStatus> jobs_;
  std::deque<JobRequest> queue_;
  std::size_t job_counter_ = 0;

  httplib::Server server_;
  std::thread listener_;
  std::jthread worker_;
};

}  // namespace dispick::service
