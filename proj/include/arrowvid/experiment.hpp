#pragma once
// Run plumbing above the trainer: editable run configs, checkpoint scoring,
// and the controlled self-supervision sweep.  Everything here is driven by
// the command-line tool; tests call it directly.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "arrowvid/dataset.hpp"
#include "arrowvid/metrics.hpp"
#include "arrowvid/trainer.hpp"

namespace arrowvid {

// Raised for problems a user fixes by editing flags or files (exit code 2),
// as opposed to failures mid-run (exit code 3).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// TrainConfig plus the file inputs a run needs.  Serialized as `key = value`
// lines, '#' comments; unknown keys are rejected outright so a typo cannot
// silently fall back to a default.
struct ExperimentConfig {
  TrainConfig train;
  std::string data_manifest;  // corpus to train on / draw real clips from
  std::string extractor;      // reference-classifier file for eval
  EvalProtocol eval;
};

ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);
std::string experiment_config_text(const ExperimentConfig& c);
void save_experiment_config(const std::string& path, const ExperimentConfig& c);

// Every clip's centered T-frame window as one {N,3,T,H,W} batch — the fixed
// real-side set metrics are computed against.  Clips shorter than T are
// skipped; an empty result throws.
Tensor center_windows(const DatasetManifest& m, int64_t T);

// Rebuilds the trainer a checkpoint came from, restores it (config-hash
// mismatch throws), and scores eval-mode samples against the manifest's
// clips.  Report provenance comes from the extractor.
MetricReport evaluate_model(const TrainConfig& cfg, const std::string& checkpoint_dir,
                            FeatureExtractor& ex, const DatasetManifest& data,
                            const EvalProtocol& proto);

struct SweepRun {
  AuxTask task = AuxTask::none;
  uint64_t seed = 0;
  std::string run_dir;
  MetricReport report;
};

struct AblationResult {
  std::vector<SweepRun> runs;  // task-major, seed-minor, caller's order
  std::string table_csv;       // per-task aggregate: task,is_mean,is_std,fvd
  std::string runs_csv;        // one full MetricReport row per run
  std::string plot_png;        // mean FVD per task, bar chart
};

// Trains one run per (task, seed) under out_root/<task>_s<seed> — identical
// data, weights, and seeds throughout; only the auxiliary task differs —
// then evaluates every run with the same extractor and aggregates.  A run
// directory already holding its final checkpoint is reused, so an
// interrupted sweep resumes where it stopped.  jobs > 1 trains that many
// runs concurrently (they share nothing); evaluation stays sequential.
// `.runs` covers exactly the requested grid; the emitted table covers every
// finished run found under out_root.
AblationResult run_ablation(const ExperimentConfig& base, const std::vector<AuxTask>& tasks,
                            const std::vector<uint64_t>& seeds, const std::string& out_root,
                            FeatureExtractor& ex, int jobs = 1);

// Rebuilds table.csv, runs.csv, and the FVD bar chart from the per-run
// report files already under out_root — no training, no evaluation.  Rows
// follow the fixed task order none, shuffle, rotation_frame, rotation_video,
// rotation_both, aot (tasks not present are skipped), seeds ascending.
AblationResult aggregate_sweep(const std::string& out_root);

}  // namespace arrowvid
