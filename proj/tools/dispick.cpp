// dispick: dataset generation, training, evaluation and the labeling
// service behind one command.  Exit codes: 0 ok, 1 usage/config, 2 data,
// 3 numerical failure.

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <string>
#include <vector>

#include <dispick/datagen.hpp>
#include <dispick/error.hpp>
#include <dispick/io.hpp>
#include <dispick/pipeline.hpp>
#include <dispick/raster.hpp>
#include <dispick/segnet/checkpoint.hpp>
#include <dispick/service.hpp>

namespace {

using namespace dispick;
using nlohmann::json;

struct ConfigArgs {
  std::string file;
  std::vector<std::string> overrides;
  std::string out = ".";
};

void add_config_options(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.file, "experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--set", a.overrides, "override a config value, e.g. --set pretrain.max_epochs=5");
  cmd->add_option("--out", a.out, "output directory")->required();
}

/// File values, then dotted key=value overrides (values parsed as JSON
/// when they parse, else taken as strings).  Unknown keys are rejected.
ExperimentConfig resolve_config(const ConfigArgs& a) {
  json j = a.file.empty() ? json::object() : io::read_json(a.file);
  if (!j.is_object()) throw ConfigError(a.file + ": config must be a JSON object");
  for (const auto& o : a.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + o + "'");
    const std::string key = o.substr(0, eq), text = o.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* node = &j;
    std::size_t start = 0;
    for (;;) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) throw ConfigError("bad override key '" + key + "'");
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      if (!node->contains(part)) (*node)[part] = json::object();
      node = &(*node)[part];
      if (!node->is_object()) throw ConfigError("override '" + key + "' descends into a non-object");
      start = dot + 1;
    }
  }
  return experiment_config_from_json(j);
}

ExperimentConfig prepare(const ConfigArgs& a) {
  auto cfg = resolve_config(a);
  std::filesystem::create_directories(a.out);
  io::write_json(std::filesystem::path(a.out) / "config.json", to_json(cfg));
  return cfg;
}

json stage_summary(const StageOutcome& s) {
  return {{"best_epoch", s.best_epoch}, {"epochs", s.history.size()}, {"best_val_loss", s.best_val_loss}};
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

int run(int argc, char** argv) {
  CLI::App app{"dispick: surface-wave dispersion picking by image segmentation"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "progress on stderr");

  // generate
  auto* gen = app.add_subcommand("generate", "write a synthetic curveset dataset");
  std::string gen_domain = "sim", gen_out;
  std::size_t gen_n = 0;
  std::uint64_t gen_seed = 7;
  bool gen_overwrite = false;
  gen->add_option("--domain", gen_domain, "sim or pseudo_real")->check(CLI::IsMember({"sim", "pseudo_real"}));
  gen->add_option("--n", gen_n, "number of curvesets")->required()->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "seed");
  gen->add_option("--out", gen_out, "dataset directory")->required();
  gen->add_flag("--overwrite", gen_overwrite, "replace a non-empty output directory");

  // rasterize
  auto* ras = app.add_subcommand("rasterize", "rasterize a dataset into image/mask records");
  std::string ras_dataset, ras_out;
  std::size_t ras_pgm = 0;
  ras->add_option("--dataset", ras_dataset, "dataset directory")->required();
  ras->add_option("--out", ras_out, "record directory")->required();
  ras->add_option("--pgm", ras_pgm, "also export the first N images and masks as PGM");

  ConfigArgs exp_args, train_args, ft_args, eval_args, sweep_args;
  auto* exp = app.add_subcommand("experiment", "generate, pretrain, fine-tune and evaluate");
  add_config_options(exp, exp_args);
  auto* train = app.add_subcommand("train", "generate data and pretrain on the sim domain");
  add_config_options(train, train_args);
  auto* ft = app.add_subcommand("finetune", "fine-tune the pretrained model on pseudo-real data");
  add_config_options(ft, ft_args);
  std::string ft_ckpt;
  ft->add_option("--checkpoint", ft_ckpt, "starting checkpoint (default <out>/checkpoints/pretrain.ckpt)");
  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on the held-out set");
  add_config_options(ev, eval_args);
  std::string ev_ckpt;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint (default: fine-tuned if present, else pretrained)");

  auto* sweep = app.add_subcommand("sweep", "repeat the experiment over station counts K");
  add_config_options(sweep, sweep_args);
  std::vector<std::size_t> sweep_k{1, 4, 8};
  std::size_t sweep_repeats = 3, sweep_jobs = 1;
  double sweep_keep = 0.5;
  sweep->add_option("--K", sweep_k, "station counts")->delimiter(',')->check(CLI::PositiveNumber);
  sweep->add_option("--repeats", sweep_repeats, "seeds per K")->check(CLI::PositiveNumber);
  sweep->add_option("--keep", sweep_keep, "fraction of runs kept by validation loss")->check(CLI::Range(0.0, 1.0));
  sweep->add_option("--jobs", sweep_jobs, "concurrent runs")->check(CLI::PositiveNumber);

  auto* pred = app.add_subcommand("predict", "segment one curveset and print classes and snapped picks");
  std::string pred_ckpt, pred_dataset, pred_image;
  double pred_threshold = 0.0;
  pred->add_option("--checkpoint", pred_ckpt, "checkpoint")->required();
  pred->add_option("--dataset", pred_dataset, "dataset directory")->required();
  pred->add_option("--image", pred_image, "pair_id")->required();
  pred->add_option("--threshold", pred_threshold, "minimum mode probability (0 = argmax)")->check(CLI::Range(0.0, 1.0));

  auto* serve = app.add_subcommand("serve", "run the labeling service");
  service::ServiceConfig scfg;
  std::string s_dataset, s_store = "labels", s_work = "service", s_ckpt, s_static, s_host = "127.0.0.1";
  int s_port = 8080;
  serve->add_option("--dataset", s_dataset, "dataset directory")->required();
  serve->add_option("--store", s_store, "label store directory");
  serve->add_option("--work", s_work, "directory for fine-tune checkpoints");
  serve->add_option("--checkpoint", s_ckpt, "initial checkpoint");
  serve->add_option("--static", s_static, "UI bundle directory");
  serve->add_option("--host", s_host, "bind address");
  serve->add_option("--port", s_port, "port")->check(CLI::Range(1, 65535));
  serve->add_option("--min-labeled", scfg.min_labeled, "labeled curvesets required for a fine-tune job");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  std::mutex log_mu;
  if (verbose)
    log_sink() = [&log_mu](const std::string& s) {
      std::lock_guard lock(log_mu);
      std::cerr << s << "\n";
    };

  if (*gen) {
    const auto m = generate_dataset(gen_out, gen_n, domain_from_string(gen_domain), gen_seed, gen_overwrite);
    print_json({{"out", gen_out}, {"count", m["count"]}, {"total_points", m["total_points"]}});
  } else if (*ras) {
    const auto ds = load_dataset(ras_dataset);
    const auto recs = rasterize_all(ds.curvesets);
    write_records(ras_out, recs);
    for (std::size_t i = 0; i < std::min(ras_pgm, recs.size()); ++i) {
      const auto base = std::filesystem::path(ras_out) / "pgm" / recs[i].pair_id;
      write_pgm(base.string() + ".pgm", recs[i].image);
      CurveImage mask_img{{}, recs[i].image.meta};
      for (std::size_t p = 0; p < mask_img.pixels.v.size(); ++p)
        mask_img.pixels.v[p] = static_cast<std::uint8_t>(recs[i].mask.classes.v[p] * 127);
      write_pgm(base.string() + "_mask.pgm", mask_img);
    }
    print_json({{"out", ras_out}, {"records", recs.size()}});
  } else if (*exp) {
    const auto cfg = prepare(exp_args);
    const auto r = run_experiment(cfg, exp_args.out);
    auto j = to_json(r);
    j.erase("heldout");
    if (r.heldout) j["heldout_medians"] = to_json(r.heldout->pixel_medians);
    print_json(j);
    if (r.error) {
      std::cerr << "experiment failed in stage " << stage_name(r.stage) << ": " << *r.error << "\n";
      return r.exit_code;
    }
  } else if (*train) {
    const auto cfg = prepare(train_args);
    ExperimentPaths paths(cfg, train_args.out);
    stage_generate(cfg, paths);
    const auto s = stage_pretrain(cfg, paths);
    print_json({{"checkpoint", paths.pretrain_checkpoint().string()}, {"pretrain", stage_summary(s)}});
  } else if (*ft) {
    const auto cfg = prepare(ft_args);
    ExperimentPaths paths(cfg, ft_args.out);
    const auto start = segnet::load_checkpoint(ft_ckpt.empty() ? paths.pretrain_checkpoint() : std::filesystem::path(ft_ckpt));
    if (start.params.config != cfg.unet())
      throw ConfigError("checkpoint architecture does not match the config (K, depth, base_channels)");
    stage_generate(cfg, paths);
    const auto s = stage_finetune(cfg, paths, start.params);
    print_json({{"checkpoint", paths.finetune_checkpoint().string()}, {"finetune", stage_summary(s)}});
  } else if (*ev) {
    const auto cfg = prepare(eval_args);
    ExperimentPaths paths(cfg, eval_args.out);
    std::filesystem::path ck = ev_ckpt;
    std::string name;
    if (ck.empty()) {
      const bool tuned = std::filesystem::exists(paths.finetune_checkpoint());
      ck = tuned ? paths.finetune_checkpoint() : paths.pretrain_checkpoint();
      name = tuned ? "finetune" : "pretrain";
    } else {
      name = ck.stem().string();
    }
    const auto model = segnet::load_checkpoint(ck);
    paths.enter(Stage::evaluate);
    const auto set = load_heldout(cfg, paths);
    const auto report = evaluate_model(model.params, set, cfg.K, name, cfg.threshold);
    write_pick_report(eval_args.out, report);
    print_json({{"checkpoint", ck.string()}, {"medians", to_json(report.pixel_medians)}});
  } else if (*sweep) {
    const auto cfg = prepare(sweep_args);
    const auto res = k_sweep(cfg, sweep_k, sweep_repeats, sweep_args.out, sweep_keep, sweep_jobs);
    const auto table = sweep_csv(res);
    io::write_text(std::filesystem::path(sweep_args.out) / "sweep.csv", table);
    std::cout << table;
  } else if (*pred) {
    const auto model = segnet::load_checkpoint(pred_ckpt);
    auto ds = load_dataset(pred_dataset);
    const std::size_t K = model.params.config.in_channels;
    const auto set = ImageSet::build(std::move(ds.curvesets), K);
    const auto& ras_i = set.rasters[set.find(pred_image)];
    const auto mask = predict_mask(model.params, stack_neighbors(set, pred_image, K), pred_threshold);
    // Highest residual velocity first, as in the PGM exports.
    for (int r = kImageSize - 1; r >= 0; --r) {
      std::string row;
      for (int c = 0; c < kImageSize; ++c) row += static_cast<char>('0' + mask.classes(r, c));
      std::cout << row << "\n";
    }
    const auto& cs = set.curvesets[set.find(pred_image)];
    for (const auto& s : snap_to_peaks(pixel_picks(mask, ras_i.image), std::cref(cs), ras_i.meta))
      std::cout << json{{"pair_id", pred_image},
                        {"frequency", s.point.frequency},
                        {"velocity", s.point.velocity},
                        {"label", to_int(s.point.label)},
                        {"snapped", s.snapped}}
                       .dump()
                << "\n";
  } else if (*serve) {
    scfg.dataset = s_dataset;
    scfg.store = s_store;
    scfg.work_dir = s_work;
    if (!s_ckpt.empty()) scfg.checkpoint = s_ckpt;
    if (!s_static.empty()) scfg.static_dir = s_static;
    service::Service svc(scfg);
    std::cerr << "serving " << s_dataset << " on http://" << s_host << ":" << s_port << "\n";
    svc.run(s_host, s_port);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const dispick::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
