#include "arrowvid/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

#include "arrowvid/checkpoint.hpp"
#include "arrowvid/plot.hpp"
#include "arrowvid/tensor_file.hpp"

namespace arrowvid {

namespace fs = std::filesystem;

namespace {

std::string step_tag(int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%08lld", static_cast<long long>(step));
  return buf;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Tensor center_windows(const DatasetManifest& m, int64_t T) {
  std::vector<VideoClip> windows;
  for (size_t i = 0; i < m.entries.size(); ++i) {
    VideoClip clip = load_clip(m.resolve(i));
    if (clip.frames() < T) continue;
    int64_t start = (clip.frames() - T) / 2;
    Tensor w(Shape{T, clip.channels(), clip.height(), clip.width()});
    std::memcpy(w.data(), clip.data.data() + start * clip.channels() * clip.height() * clip.width(),
                sizeof(double) * static_cast<size_t>(w.numel()));
    windows.emplace_back(std::move(w), clip.fps);
  }
  if (windows.empty())
    throw std::runtime_error("center_windows: no clip in the manifest reaches " + std::to_string(T) +
                             " frames");
  return clips_to_batch(windows);
}

MetricReport evaluate_model(const TrainConfig& cfg, const std::string& checkpoint_dir,
                            FeatureExtractor& ex, const DatasetManifest& data,
                            const EvalProtocol& proto) {
  if (ex.clip_len() != cfg.T || ex.height() != cfg.H || ex.width() != cfg.W)
    throw std::runtime_error(
        "evaluate_model: extractor was trained for " + std::to_string(ex.clip_len()) + "x" +
        std::to_string(ex.height()) + "x" + std::to_string(ex.width()) + " clips but the model emits " +
        std::to_string(cfg.T) + "x" + std::to_string(cfg.H) + "x" + std::to_string(cfg.W));
  auto tc = std::make_shared<TrainContext>(make_trainer(cfg));
  load_checkpoint(*tc, checkpoint_dir);
  SampleFn fn = [tc](int64_t n, uint64_t key) { return sample_videos(*tc, n, key); };
  Tensor real = center_windows(data, cfg.T);
  return evaluate_samples(fn, real, ex, proto);
}

AblationResult run_ablation(const ExperimentConfig& base, const std::vector<AuxTask>& tasks,
                            const std::vector<uint64_t>& seeds, const std::string& out_root,
                            FeatureExtractor& ex, int jobs) {
  if (tasks.empty() || seeds.empty())
    throw ConfigError("ablation needs at least one task and one seed");
  if (base.data_manifest.empty()) throw ConfigError("ablation config has no data_manifest");
  if (jobs < 1) throw ConfigError("ablation needs jobs >= 1");
  DatasetManifest data = load_manifest(base.data_manifest);
  fs::create_directories(out_root);

  struct Planned {
    TrainConfig cfg;
    AuxTask task;
    uint64_t seed;
    std::string dir, final_ckpt;
  };
  std::vector<Planned> plan;
  for (AuxTask task : tasks)
    for (uint64_t seed : seeds) {
      Planned p;
      p.cfg = base.train;
      p.cfg.aux = task;
      p.cfg.seed = seed;
      p.task = task;
      p.seed = seed;
      p.dir = out_root + "/" + aux_task_name(task) + "_s" + std::to_string(seed);
      p.cfg.out_dir = p.dir;
      p.final_ckpt = p.dir + "/ckpt/" + step_tag(p.cfg.steps);
      try {
        p.cfg.validate();
      } catch (const std::exception& e) {
        throw ConfigError(std::string("ablation variant ") + aux_task_name(task) + ": " + e.what());
      }
      plan.push_back(std::move(p));
    }

  // Train whatever is missing.  Finished runs (final checkpoint on disk) are
  // kept, so an interrupted sweep picks up where it stopped — but only under
  // the exact configuration that produced them.
  auto train_one = [&](const Planned& p) {
    ExperimentConfig resolved = base;
    resolved.train = p.cfg;
    std::string want = experiment_config_text(resolved);
    std::string cfg_path = p.dir + "/config.txt";
    if (fs::exists(cfg_path) && read_text(cfg_path) != want)
      throw ConfigError(p.dir + " holds a run with a different configuration; remove it or sweep "
                                "into a fresh directory");
    if (fs::exists(p.final_ckpt + "/meta.avtl")) return;
    fs::create_directories(p.dir);
    std::ofstream(cfg_path, std::ios::trunc) << want;
    run_training(p.cfg, data, latest_checkpoint(p.dir));
  };

  if (jobs == 1) {
    for (const Planned& p : plan) train_one(p);
  } else {
    std::atomic<size_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    auto worker = [&] {
      for (size_t i = next++; i < plan.size(); i = next++) {
        try {
          train_one(plan[i]);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    for (int j = 0; j < std::min<int>(jobs, static_cast<int>(plan.size())); ++j)
      pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  // Score every run with the one extractor.  A stored report is reused only
  // if the same extractor produced it — mixing extractors voids the ordering.
  AblationResult result;
  for (const Planned& p : plan) {
    std::string rp = p.dir + "/report.txt";
    MetricReport rep;
    bool reuse = false;
    if (fs::exists(rp)) {
      try {
        rep = read_report(rp);
        reuse = rep.extractor_provenance == ex.provenance();
      } catch (const std::exception&) {
        reuse = false;
      }
    }
    if (!reuse) {
      rep = evaluate_model(p.cfg, p.final_ckpt, ex, data, base.eval);
      write_report(rp, rep);
    }
    result.runs.push_back({p.task, p.seed, p.dir, rep});
  }

  AblationResult agg = aggregate_sweep(out_root);
  result.table_csv = agg.table_csv;
  result.runs_csv = agg.runs_csv;
  result.plot_png = agg.plot_png;
  return result;
}

AblationResult aggregate_sweep(const std::string& out_root) {
  if (!fs::exists(out_root)) throw ConfigError("no sweep directory at " + out_root);
  std::vector<SweepRun> found;
  for (const auto& entry : fs::directory_iterator(out_root)) {
    if (!entry.is_directory()) continue;
    std::string name = entry.path().filename().string();
    size_t pos = name.rfind("_s");
    if (pos == std::string::npos) continue;
    std::string seed_s = name.substr(pos + 2);
    if (seed_s.empty() || seed_s.find_first_not_of("0123456789") != std::string::npos) continue;
    AuxTask task;
    try {
      task = aux_task_from_string(name.substr(0, pos));
    } catch (const std::exception&) {
      continue;  // not a sweep run
    }
    std::string rp = entry.path().string() + "/report.txt";
    if (!fs::exists(rp)) continue;  // trained but not yet evaluated
    found.push_back({task, std::stoull(seed_s), entry.path().string(), read_report(rp)});
  }
  if (found.empty()) throw ConfigError("no evaluated runs under " + out_root);

  const AuxTask order[] = {AuxTask::none,           AuxTask::shuffle,
                           AuxTask::rotation_frame, AuxTask::rotation_video,
                           AuxTask::rotation_both,  AuxTask::aot};
  AblationResult result;
  for (AuxTask task : order) {
    std::vector<SweepRun> rows;
    for (const SweepRun& r : found)
      if (r.task == task) rows.push_back(r);
    std::sort(rows.begin(), rows.end(),
              [](const SweepRun& a, const SweepRun& b) { return a.seed < b.seed; });
    result.runs.insert(result.runs.end(), rows.begin(), rows.end());
  }

  std::string runs_csv = out_root + "/runs.csv";
  fs::remove(runs_csv);
  for (const SweepRun& r : result.runs)
    append_report_csv(runs_csv, aux_task_name(r.task) + "_s" + std::to_string(r.seed), r.report);

  std::string table_csv = out_root + "/table.csv";
  std::ofstream table(table_csv, std::ios::trunc);
  table << "task,is_mean,is_std,fvd\n";
  std::vector<std::string> labels;
  std::vector<double> fvds;
  for (AuxTask task : order) {
    double is_sum = 0, is_sq = 0, fvd_sum = 0;
    int n = 0;
    for (const SweepRun& r : result.runs)
      if (r.task == task) {
        is_sum += r.report.is_mean;
        is_sq += r.report.is_mean * r.report.is_mean;
        fvd_sum += r.report.fvd;
        ++n;
      }
    if (n == 0) continue;
    double is_mean = is_sum / n;
    double is_std = std::sqrt(std::max(0.0, is_sq / n - is_mean * is_mean));  // seed spread
    double fvd = fvd_sum / n;
    char row[96];
    std::snprintf(row, sizeof(row), ",%.6g,%.6g,%.6g\n", is_mean, is_std, fvd);
    table << aux_task_name(task) << row;
    labels.push_back(aux_task_name(task));
    fvds.push_back(fvd);
  }
  table.close();

  std::string plot = out_root + "/fvd_bars.png";
  bar_chart_png(plot, "mean FVD by auxiliary task (lower is better)", labels, fvds);

  result.table_csv = table_csv;
  result.runs_csv = runs_csv;
  result.plot_png = plot;
  return result;
}

}  // namespace arrowvid
