#pragma once
// Checkpoint directories: gen.avtl / disc.avtl / frame.avtl (when present) /
// opt.avtl / meta.avtl.  Every file carries a CRC tail, so tampering fails
// the load; meta stores the config hash, so resuming under a different
// configuration fails loudly instead of training garbage.  RNG needs no
// serialized state — all draws are re-derived from (seed, counters) held in
// meta.

#include <string>

#include "arrowvid/trainer.hpp"

namespace arrowvid {

void save_checkpoint(const TrainContext& tc, const std::string& dir);
void load_checkpoint(TrainContext& tc, const std::string& dir);

// Step recorded in a checkpoint directory's meta file.
int64_t checkpoint_step(const std::string& dir);

// Highest-step checkpoint under run_dir/ckpt, or "" when none exist.
std::string latest_checkpoint(const std::string& run_dir);

}  // namespace arrowvid
