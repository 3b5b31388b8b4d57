#pragma once
// Alternating D/G optimization with an auxiliary self-supervision task on the
// discriminator.  Defaults follow the arrow-of-time recipe: D's auxiliary
// branch classifies playback direction of real clips (forward plus their
// reversals), G is additionally rewarded when its clips read as forward and
// their reversals as backward.  Rotation / shuffle variants exist for the
// ablation sweep; `none` reduces to the plain baseline trainer.
//
// Determinism: every stochastic draw (latents, layer noise, task labels,
// batch order) is keyed by (seed, stream, step counter, pass id), never by
// mutable RNG state, so a checkpoint restore continues the exact sequence.
// Clip reversal enters D's update outside the tape (inputs are data) and G's
// update inside it (the reversal must carry gradient back to the generator).

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "arrowvid/dataset.hpp"
#include "arrowvid/discriminators.hpp"
#include "arrowvid/generators.hpp"
#include "arrowvid/losses.hpp"

namespace arrowvid {

enum class LossMode { bce, wasserstein, hinge_projection };
enum class AuxTask { aot, rotation_frame, rotation_video, rotation_both, shuffle, none };

std::string loss_mode_name(LossMode m);
LossMode loss_mode_from_string(const std::string& s);
std::string aux_task_name(AuxTask a);
AuxTask aux_task_from_string(const std::string& s);

struct TrainConfig {
  Family family = Family::vgan;
  bool categorical = false;
  LossMode loss_mode = LossMode::bce;
  AuxTask aux = AuxTask::aot;
  LossWeights weights;

  double lr = 2e-4, beta1 = 0.5, beta2 = 0.999;
  double noise_weight = 0.1;  // discriminator input/feature noise
  double gp_lambda = 10.0;    // wasserstein mode only; 0 disables the penalty
  bool non_saturating_g = false;

  int64_t batch = 8;
  int64_t steps = 200;
  int d_per_g = 1;  // D updates per G update

  int64_t T = 16, H = 64, W = 64;
  int64_t latent = 100;
  int64_t width_div = 1;
  int64_t classes = 0;  // categorical only

  uint64_t seed = 0;
  // Default routing: D's direction branch trains on real clips only.  With
  // false it additionally classifies detached fakes and their reversals.
  bool aot_real_only = true;

  int64_t snapshot_every = 50;
  std::string out_dir;  // required by run_training; ledger.csv, samples/, ckpt/

  void validate() const;
  // Hash over every field that defines the architecture or the stochastic
  // stream (excludes steps, snapshot cadence, out_dir) — resuming under a
  // different value would silently train a different run.
  uint64_t config_hash() const;
};

// Which branch outputs fed which loss during the last step, tagged
// real/fake/interp × fwd/bwd.  Tests assert the routing contract on these.
struct RoutingLog {
  std::vector<std::string> adv_inputs;
  std::vector<std::string> aot_inputs;
  std::vector<std::string> task_inputs;
  void clear();
  bool adv_saw_backward() const;
  bool aot_saw_fake() const;
};

struct TrainContext {
  TrainConfig cfg;
  std::unique_ptr<Generator> gen;
  std::unique_ptr<ArrowDisc> disc;
  FrameDisc frame_disc;  // moco family only
  bool has_frame_disc = false;

  Adam opt_g, opt_d, opt_f;  // separate instances; no slot sharing

  int64_t step = 0;       // completed D+G iterations
  int64_t d_updates = 0;  // lifetime D updates (ledger-audited ratio)
  int64_t data_epoch = 0, data_batch = 0;  // cursor of the next batch to pull

  RoutingLog routing;
};

TrainContext make_trainer(const TrainConfig& cfg);

// One discriminator update (generator frozen).  `labels` required iff
// categorical.  Non-finite loss dumps the batch under out_dir/diagnostics
// and throws.
LossBundle train_step_d(TrainContext& tc, const Tensor& real, const std::vector<int>& labels = {});

// One generator update (discriminator frozen); draws its own latents.
// Closes the iteration: increments tc.step.
LossBundle train_step_g(TrainContext& tc);

// Eval-mode generation: noise layers off, batch statistics frozen.  Labels
// drawn from `key` when categorical and none are given.  Returns {n,3,T,H,W}.
Tensor sample_videos(TrainContext& tc, int64_t n, uint64_t key, std::vector<int> labels = {});

struct RunResult {
  int64_t final_step = 0;
  std::string last_checkpoint;
  std::string ledger_path;
};

// Alternates d_per_g D steps with one G step until cfg.steps, appending one
// ledger row per iteration and snapshotting checkpoints plus sample grids
// every snapshot_every steps.  `resume_from` names a checkpoint directory;
// the run continues bit-identically to an uninterrupted one.
RunResult run_training(const TrainConfig& cfg, const DatasetManifest& data,
                       const std::string& resume_from = "");

}  // namespace arrowvid
