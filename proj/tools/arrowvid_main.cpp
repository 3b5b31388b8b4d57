// Command-line driver: corpus synthesis, training, evaluation, sampling, and
// the self-supervision ablation sweep.  Every command is deterministic given
// its --seed and refuses to clobber prior output unless --force is passed.
//
// Exit codes: 0 success, 2 configuration problem (bad flag, bad config file,
// missing input, refused overwrite), 3 runtime failure (diverged training,
// I/O mid-run, unattained accuracy target).

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "arrowvid/checkpoint.hpp"
#include "arrowvid/experiment.hpp"
#include "arrowvid/image_io.hpp"
#include "arrowvid/plot.hpp"
#include "arrowvid/rng.hpp"
#include "arrowvid/synth.hpp"

using namespace arrowvid;
namespace fs = std::filesystem;

namespace {

// Relative output paths land under $ARROWVID_OUT when it is set.
std::string resolve_out(const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  const char* root = std::getenv("ARROWVID_OUT");
  if (!root || !*root) return p;
  return (fs::path(root) / p).string();
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string step_tag(int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%08lld", static_cast<long long>(step));
  return buf;
}

void refuse_unless_forced(bool exists, bool force, const std::string& what,
                          const std::string& hint) {
  if (exists && !force)
    throw ConfigError(what + " already exists; " + hint);
}

DatasetManifest load_manifest_checked(const std::string& path) {
  if (path.empty())
    throw ConfigError("no data manifest: set data_manifest in the config or pass --data");
  try {
    return load_manifest(path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("cannot use data manifest: ") + e.what());
  }
}

FeatureExtractor load_extractor_checked(const std::string& path) {
  if (path.empty() || !fs::exists(path))
    throw ConfigError("no extractor at '" + path +
                      "': train one first with `arrowvid train-extractor` and point --extractor "
                      "(or the config's extractor key) at it");
  return FeatureExtractor::load(path);
}

void validate_as_config_error(const TrainConfig& t) {
  try {
    t.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

// Run directory holding config.txt + ckpt/; picks the requested or newest
// checkpoint.
std::pair<ExperimentConfig, std::string> open_run(const std::string& run_dir, int64_t step) {
  std::string cfg_path = run_dir + "/config.txt";
  if (!fs::exists(cfg_path))
    throw ConfigError("no run at " + run_dir + " (missing config.txt)");
  ExperimentConfig ec = load_experiment_config(cfg_path);
  ec.train.out_dir = run_dir;  // the run may have been moved since training
  std::string ckpt;
  if (step >= 0) {
    ckpt = run_dir + "/ckpt/" + step_tag(step);
    if (!fs::exists(ckpt + "/meta.avtl"))
      throw ConfigError("no checkpoint for step " + std::to_string(step) + " under " + run_dir);
  } else {
    ckpt = latest_checkpoint(run_dir);
    if (ckpt.empty()) throw ConfigError("no checkpoints under " + run_dir);
  }
  return {std::move(ec), std::move(ckpt)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"video GAN workbench: synthetic corpora, arrow-of-time training, metrics"};
  app.require_subcommand(1);

  // ---- data synth ----------------------------------------------------------
  auto* data_cmd = app.add_subcommand("data", "dataset utilities");
  data_cmd->require_subcommand(1);
  auto* synth = data_cmd->add_subcommand(
      "synth", "render a temporally asymmetric synthetic corpus (one class per scene kind)");
  std::string sy_scenes = "falling_ball,growing_shape,fading_trail";
  int sy_count = 300;
  int64_t sy_frames = 16, sy_h = 64, sy_w = 64;
  uint64_t sy_seed = 0;
  std::string sy_out;
  bool sy_force = false;
  synth->add_option("--scene,--scenes", sy_scenes, "comma-separated scene kinds; class = position");
  synth->add_option("--count", sy_count, "clips to render")->check(CLI::PositiveNumber);
  synth->add_option("--frames", sy_frames, "frames per clip")->check(CLI::PositiveNumber);
  synth->add_option("--height", sy_h, "frame height")->check(CLI::PositiveNumber);
  synth->add_option("--width", sy_w, "frame width")->check(CLI::PositiveNumber);
  synth->add_option("--seed", sy_seed, "render seed");
  synth->add_option("--out", sy_out, "corpus directory")->required();
  synth->add_flag("--force", sy_force, "re-render over an existing corpus");
  synth->callback([&] {
    std::vector<SceneKind> kinds;
    for (const std::string& s : split_csv(sy_scenes)) {
      try {
        kinds.push_back(scene_kind_from_name(s));
      } catch (const std::exception& e) {
        throw ConfigError(e.what());
      }
    }
    if (kinds.empty()) throw ConfigError("--scenes named no scene kinds");
    std::string dir = resolve_out(sy_out);
    refuse_unless_forced(fs::exists(dir + "/manifest.tsv"), sy_force, "corpus at " + dir,
                         "--force re-renders it");
    if (sy_force) fs::remove_all(dir);
    std::string manifest = generate_dataset(dir, kinds, sy_count, sy_frames, sy_h, sy_w, sy_seed);
    std::cout << "rendered " << sy_count << " clips (" << kinds.size() << " classes) -> " << manifest
              << "\n";
  });

  // ---- train-extractor -----------------------------------------------------
  auto* tex = app.add_subcommand("train-extractor",
                                 "train the reference classifier metrics embed videos with");
  std::string tx_data, tx_out;
  ExtractorConfig tx_cfg;
  bool tx_force = false;
  tex->add_option("--data", tx_data, "labeled manifest to train on")->required();
  tex->add_option("--out", tx_out, "where to store the trained classifier")->required();
  tex->add_option("--clip-len", tx_cfg.clip_len, "frames per training window");
  tex->add_option("--height", tx_cfg.height, "expected frame height");
  tex->add_option("--width", tx_cfg.width, "expected frame width");
  tex->add_option("--width-div", tx_cfg.width_div, "channel divisor for desk-scale runs");
  tex->add_option("--batch", tx_cfg.batch, "training batch size");
  tex->add_option("--epochs", tx_cfg.epochs, "training epochs");
  tex->add_option("--lr", tx_cfg.lr, "learning rate");
  tex->add_option("--holdout-every", tx_cfg.holdout_every, "every k-th clip is held out");
  tex->add_option("--target-acc", tx_cfg.target_accuracy, "required held-out accuracy");
  tex->add_option("--seed", tx_cfg.seed, "initialization/order seed");
  tex->add_flag("--force", tx_force, "overwrite an existing classifier file");
  tex->callback([&] {
    std::string out = resolve_out(tx_out);
    refuse_unless_forced(fs::exists(out), tx_force, "classifier " + out, "--force overwrites it");
    DatasetManifest m = load_manifest_checked(tx_data);
    FeatureExtractor ex = train_reference_classifier(m, tx_cfg);
    if (!fs::path(out).parent_path().empty()) fs::create_directories(fs::path(out).parent_path());
    ex.save(out);
    std::cout << "classifier -> " << out << "\nprovenance " << ex.provenance() << "\n";
  });

  // ---- train ---------------------------------------------------------------
  auto* train = app.add_subcommand("train", "train one model from a config file");
  std::string tr_config, tr_data, tr_out;
  uint64_t tr_seed = 0;
  int64_t tr_steps = -1;
  bool tr_resume = false, tr_force = false;
  train->add_option("--config", tr_config, "experiment config file")->required();
  train->add_option("--data", tr_data, "override the config's data_manifest");
  train->add_option("--out", tr_out, "override the config's out_dir");
  auto* tr_seed_opt = train->add_option("--seed", tr_seed, "override the config's seed");
  train->add_option("--steps", tr_steps, "override total training steps");
  train->add_flag("--resume", tr_resume, "continue from the newest checkpoint in out_dir");
  train->add_flag("--force", tr_force, "discard an existing run in out_dir and start over");
  train->callback([&] {
    ExperimentConfig ec = load_experiment_config(tr_config);
    if (!tr_data.empty()) ec.data_manifest = tr_data;
    if (!tr_out.empty()) ec.train.out_dir = tr_out;
    if (tr_seed_opt->count()) ec.train.seed = tr_seed;
    if (tr_steps > 0) ec.train.steps = tr_steps;
    if (ec.train.out_dir.empty())
      throw ConfigError("no output directory: set out_dir in the config or pass --out");
    ec.train.out_dir = resolve_out(ec.train.out_dir);
    validate_as_config_error(ec.train);
    DatasetManifest m = load_manifest_checked(ec.data_manifest);

    std::string resume_from;
    if (tr_resume) {
      resume_from = latest_checkpoint(ec.train.out_dir);  // empty -> fresh start
    } else if (fs::exists(ec.train.out_dir + "/ledger.csv")) {
      refuse_unless_forced(true, tr_force, "run in " + ec.train.out_dir,
                           "--resume continues it, --force starts over");
      fs::remove_all(ec.train.out_dir);
    }
    fs::create_directories(ec.train.out_dir);
    save_experiment_config(ec.train.out_dir + "/config.txt", ec);
    RunResult r = run_training(ec.train, m, resume_from);
    std::cout << "run " << ec.train.out_dir << " finished at step " << r.final_step
              << "\nledger " << r.ledger_path << "\ncheckpoint " << r.last_checkpoint << "\n";
  });

  // ---- eval ----------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "score a checkpoint (video IS + FVD)");
  std::string ev_run, ev_config, ev_ckpt, ev_extractor, ev_data, ev_out;
  int64_t ev_step = -1, ev_samples = -1, ev_batch = -1;
  int ev_nseeds = -1, ev_splits = -1;
  uint64_t ev_seed = 0;
  bool ev_force = false;
  eval->add_option("--run", ev_run, "run directory (config.txt + ckpt/)");
  eval->add_option("--step", ev_step, "checkpoint step to score (default: newest)");
  eval->add_option("--config", ev_config, "config file (with --checkpoint)");
  eval->add_option("--checkpoint", ev_ckpt, "checkpoint directory (with --config)");
  eval->add_option("--extractor", ev_extractor, "override the config's extractor");
  eval->add_option("--data", ev_data, "override the config's data_manifest");
  eval->add_option("--samples", ev_samples, "samples per eval seed");
  eval->add_option("--eval-seeds", ev_nseeds, "number of eval seeds");
  eval->add_option("--batch", ev_batch, "sampling batch size");
  eval->add_option("--splits", ev_splits, "IS split count");
  auto* ev_seed_opt = eval->add_option("--seed", ev_seed, "evaluation seed");
  eval->add_option("--out", ev_out, "report file (default <run>/report.txt)");
  eval->add_flag("--force", ev_force, "overwrite an existing report");
  eval->callback([&] {
    ExperimentConfig ec;
    std::string ckpt;
    if (!ev_run.empty()) {
      if (!ev_config.empty() || !ev_ckpt.empty())
        throw ConfigError("--run already names config and checkpoint; drop --config/--checkpoint");
      std::tie(ec, ckpt) = open_run(ev_run, ev_step);
    } else {
      if (ev_config.empty() || ev_ckpt.empty())
        throw ConfigError("pass --run, or both --config and --checkpoint");
      ec = load_experiment_config(ev_config);
      ckpt = ev_ckpt;
    }
    if (!ev_extractor.empty()) ec.extractor = ev_extractor;
    if (!ev_data.empty()) ec.data_manifest = ev_data;
    if (ev_samples > 0) ec.eval.n_samples = ev_samples;
    if (ev_nseeds > 0) ec.eval.n_seeds = ev_nseeds;
    if (ev_batch > 0) ec.eval.batch = ev_batch;
    if (ev_splits > 0) ec.eval.is_splits = ev_splits;
    if (ev_seed_opt->count()) ec.eval.seed = ev_seed;

    std::string out = ev_out.empty()
                          ? (ev_run.empty() ? std::string("report.txt") : ev_run + "/report.txt")
                          : resolve_out(ev_out);
    refuse_unless_forced(fs::exists(out), ev_force, "report " + out, "--force overwrites it");
    FeatureExtractor ex = load_extractor_checked(ec.extractor);
    DatasetManifest m = load_manifest_checked(ec.data_manifest);
    MetricReport rep = evaluate_model(ec.train, ckpt, ex, m, ec.eval);
    write_report(out, rep);
    std::string tag = fs::path(ckpt).parent_path().parent_path().filename().string() + "@" +
                      fs::path(ckpt).filename().string();
    append_report_csv((fs::path(out).parent_path() / "reports.csv").string(), tag, rep);
    std::cout << rep.to_text() << "report -> " << out << "\n";
  });

  // ---- generate ------------------------------------------------------------
  auto* gen = app.add_subcommand("generate", "sample clips from a checkpoint");
  std::string gn_run, gn_out;
  int64_t gn_step = -1, gn_count = 4;
  int gn_class = -1;
  uint64_t gn_seed = 0;
  bool gn_force = false;
  gen->add_option("--run", gn_run, "run directory")->required();
  gen->add_option("--step", gn_step, "checkpoint step (default: newest)");
  gen->add_option("--count", gn_count, "clips to sample")->check(CLI::PositiveNumber);
  gen->add_option("--class", gn_class, "class id for categorical models");
  gen->add_option("--seed", gn_seed, "sampling seed");
  gen->add_option("--out", gn_out, "output directory")->required();
  gen->add_flag("--force", gn_force, "overwrite existing samples");
  gen->callback([&] {
    auto [ec, ckpt] = open_run(gn_run, gn_step);
    if (ec.train.categorical && gn_class < 0)
      throw ConfigError("class-conditional model: pass --class (0.." +
                        std::to_string(ec.train.classes - 1) + ")");
    if (ec.train.categorical && gn_class >= ec.train.classes)
      throw ConfigError("--class " + std::to_string(gn_class) + " out of range (model has " +
                        std::to_string(ec.train.classes) + " classes)");
    std::string out = resolve_out(gn_out);
    refuse_unless_forced(fs::exists(out + "/grid.png"), gn_force, "samples in " + out,
                         "--force overwrites them");
    fs::create_directories(out);

    TrainContext tc = make_trainer(ec.train);
    load_checkpoint(tc, ckpt);
    std::vector<int> labels =
        ec.train.categorical ? std::vector<int>(static_cast<size_t>(gn_count), gn_class)
                             : std::vector<int>{};
    Tensor videos = sample_videos(tc, gn_count, key_from({gn_seed, STREAM_EVAL}), labels);
    std::vector<VideoClip> clips = batch_to_clips(videos);
    for (size_t i = 0; i < clips.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "/sample_%03zu.gif", i);
      write_gif(out + name, clips[i]);
    }
    write_frame_grid_png(out + "/grid.png", clips, 8);
    std::cout << gn_count << " clips -> " << out << " (grid.png + per-clip GIFs)\n";
  });

  // ---- ablate --------------------------------------------------------------
  auto* abl = app.add_subcommand(
      "ablate", "controlled sweep over auxiliary tasks: same data, same seeds, one variable");
  std::string ab_config, ab_tasks = "none,shuffle,rotation_frame,rotation_video,rotation_both,aot";
  std::string ab_seeds = "0,1,2", ab_out, ab_extractor;
  int ab_jobs = 1;
  bool ab_force = false;
  abl->add_option("--config", ab_config, "base experiment config")->required();
  abl->add_option("--tasks", ab_tasks, "comma-separated auxiliary tasks");
  abl->add_option("--seeds", ab_seeds, "comma-separated training seeds");
  abl->add_option("--out", ab_out, "sweep directory")->required();
  abl->add_option("--extractor", ab_extractor, "override the config's extractor");
  abl->add_option("--jobs", ab_jobs, "train this many runs concurrently")
      ->check(CLI::PositiveNumber);
  abl->add_flag("--force", ab_force, "re-aggregate over an existing sweep (finished runs are kept)");
  abl->callback([&] {
    ExperimentConfig ec = load_experiment_config(ab_config);
    if (!ab_extractor.empty()) ec.extractor = ab_extractor;
    std::vector<AuxTask> tasks;
    for (const std::string& s : split_csv(ab_tasks)) {
      try {
        tasks.push_back(aux_task_from_string(s));
      } catch (const std::exception& e) {
        throw ConfigError(e.what());
      }
    }
    std::vector<uint64_t> seeds;
    for (const std::string& s : split_csv(ab_seeds)) seeds.push_back(std::stoull(s));
    std::string out = resolve_out(ab_out);
    refuse_unless_forced(fs::exists(out + "/table.csv"), ab_force, "sweep table in " + out,
                         "--force recomputes it (finished runs are reused)");
    FeatureExtractor ex = load_extractor_checked(ec.extractor);
    AblationResult res = run_ablation(ec, tasks, seeds, out, ex, ab_jobs);
    std::ifstream table(res.table_csv);
    std::cout << table.rdbuf() << "table -> " << res.table_csv << "\nper-run rows -> "
              << res.runs_csv << "\nplot -> " << res.plot_png << "\n";
  });

  // ---- report --------------------------------------------------------------
  auto* rep = app.add_subcommand("report", "re-emit plots/tables from stored run output");
  std::string rp_run, rp_sweep, rp_out;
  rep->add_option("--run", rp_run, "run directory: plot its loss curves from ledger.csv");
  rep->add_option("--sweep", rp_sweep, "sweep directory: rebuild table.csv + FVD chart");
  rep->add_option("--out", rp_out, "output image (run mode; default <run>/curves.png)");
  rep->callback([&] {
    if (rp_run.empty() == rp_sweep.empty())
      throw ConfigError("pass exactly one of --run or --sweep");
    if (!rp_sweep.empty()) {
      AblationResult res = aggregate_sweep(rp_sweep);
      std::ifstream table(res.table_csv);
      std::cout << table.rdbuf() << "table -> " << res.table_csv << "\nplot -> " << res.plot_png
                << "\n";
      return;
    }
    std::string ledger = rp_run + "/ledger.csv";
    std::ifstream in(ledger);
    if (!in) throw ConfigError("no ledger at " + ledger);
    std::string header;
    std::getline(in, header);
    std::vector<std::string> cols = split_csv(header);
    std::vector<Series> series = {{"total_d", {}}, {"total_g", {}}, {"adv_d", {}}, {"adv_g", {}}};
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
      std::vector<std::string> vals = split_csv(line);
      for (Series& s : series)
        for (size_t i = 0; i < cols.size() && i < vals.size(); ++i)
          if (cols[i] == s.name) s.y.push_back(std::stod(vals[i]));
      ++rows;
    }
    if (rows == 0) throw ConfigError("ledger at " + ledger + " has no rows yet");
    std::string out = rp_out.empty() ? rp_run + "/curves.png" : resolve_out(rp_out);
    line_chart_png(out, "training losses by step", series);
    std::cout << rows << " steps -> " << out << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);       // prints help or the flag error
    return code == 0 ? 0 : 2;     // any real parse failure is a config error
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
