#include "arrowvid/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "arrowvid/checkpoint.hpp"
#include "arrowvid/image_io.hpp"
#include "arrowvid/tensor_file.hpp"
#include "arrowvid/video.hpp"

namespace arrowvid {

std::string loss_mode_name(LossMode m) {
  switch (m) {
    case LossMode::bce: return "bce";
    case LossMode::wasserstein: return "wasserstein";
    case LossMode::hinge_projection: return "hinge-projection";
  }
  return "?";
}

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "bce") return LossMode::bce;
  if (s == "wasserstein") return LossMode::wasserstein;
  if (s == "hinge-projection" || s == "hinge_projection") return LossMode::hinge_projection;
  throw std::runtime_error("unknown loss mode: " + s);
}

std::string aux_task_name(AuxTask a) {
  switch (a) {
    case AuxTask::aot: return "aot";
    case AuxTask::rotation_frame: return "rotation_frame";
    case AuxTask::rotation_video: return "rotation_video";
    case AuxTask::rotation_both: return "rotation_both";
    case AuxTask::shuffle: return "shuffle";
    case AuxTask::none: return "none";
  }
  return "?";
}

AuxTask aux_task_from_string(const std::string& s) {
  if (s == "aot") return AuxTask::aot;
  if (s == "rotation_frame") return AuxTask::rotation_frame;
  if (s == "rotation_video") return AuxTask::rotation_video;
  if (s == "rotation_both") return AuxTask::rotation_both;
  if (s == "shuffle" || s == "shuffled") return AuxTask::shuffle;
  if (s == "none") return AuxTask::none;
  throw std::runtime_error("unknown auxiliary task: " + s);
}

void TrainConfig::validate() const {
  arrowvid::validate(weights);  // free-function overload, not this member
  if (lr <= 0) throw std::runtime_error("config: learning rate must be positive");
  if (batch < 1) throw std::runtime_error("config: batch size must be >= 1");
  if (steps < 1) throw std::runtime_error("config: step count must be >= 1");
  if (d_per_g < 1) throw std::runtime_error("config: D:G ratio must be >= 1");
  if (snapshot_every < 1) throw std::runtime_error("config: snapshot cadence must be >= 1");
  if (noise_weight < 0) throw std::runtime_error("config: noise weight must be non-negative");
  if (gp_lambda < 0) throw std::runtime_error("config: gradient penalty weight must be non-negative");
  if (categorical && classes < 2)
    throw std::runtime_error("config: categorical training needs at least 2 classes");
  if (categorical && loss_mode != LossMode::hinge_projection)
    throw std::runtime_error("config: categorical training uses the hinge-projection objective");
  if (!categorical && loss_mode == LossMode::hinge_projection)
    throw std::runtime_error("config: hinge-projection scoring needs class labels (categorical)");
  if ((aux == AuxTask::rotation_frame || aux == AuxTask::rotation_both) && family != Family::moco)
    throw std::runtime_error(
        "config: frame-level rotation needs the frame discriminator, which only the moco family has");
  if (aux == AuxTask::aot && T < 2)
    throw std::runtime_error("config: direction classification needs at least 2 frames");
  if (aux == AuxTask::shuffle && T < 3)
    throw std::runtime_error(
        "config: shuffle detection needs at least 3 frames (every 2-frame permutation is the "
        "identity or the reversal)");
}

namespace {

uint64_t hash_bits(uint64_t h, double v) { return mix64(h ^ std::bit_cast<uint64_t>(v)); }
uint64_t hash_u(uint64_t h, uint64_t v) { return mix64(h ^ v); }

}  // namespace

uint64_t TrainConfig::config_hash() const {
  uint64_t h = 0xa076bebc81acb5f7ull;
  h = hash_u(h, static_cast<uint64_t>(family));
  h = hash_u(h, categorical ? 1 : 0);
  h = hash_u(h, static_cast<uint64_t>(loss_mode));
  h = hash_u(h, static_cast<uint64_t>(aux));
  h = hash_bits(h, weights.alpha);
  h = hash_bits(h, weights.beta);
  h = hash_bits(h, weights.lambda1);
  h = hash_bits(h, weights.lambda2);
  h = hash_bits(h, weights.lambda3);
  h = hash_bits(h, lr);
  h = hash_bits(h, beta1);
  h = hash_bits(h, beta2);
  h = hash_bits(h, noise_weight);
  h = hash_bits(h, gp_lambda);
  h = hash_u(h, non_saturating_g ? 1 : 0);
  h = hash_u(h, static_cast<uint64_t>(batch));
  h = hash_u(h, static_cast<uint64_t>(d_per_g));
  h = hash_u(h, static_cast<uint64_t>(T));
  h = hash_u(h, static_cast<uint64_t>(H));
  h = hash_u(h, static_cast<uint64_t>(W));
  h = hash_u(h, static_cast<uint64_t>(latent));
  h = hash_u(h, static_cast<uint64_t>(width_div));
  h = hash_u(h, static_cast<uint64_t>(classes));
  h = hash_u(h, seed);
  h = hash_u(h, aot_real_only ? 1 : 0);
  return h;
}

void RoutingLog::clear() {
  adv_inputs.clear();
  aot_inputs.clear();
  task_inputs.clear();
}

bool RoutingLog::adv_saw_backward() const {
  for (const auto& s : adv_inputs)
    if (s.size() >= 4 && s.substr(s.size() - 4) == "_bwd") return true;
  return false;
}

bool RoutingLog::aot_saw_fake() const {
  for (const auto& s : aot_inputs)
    if (s.rfind("d:fake", 0) == 0) return true;
  return false;
}

TrainContext make_trainer(const TrainConfig& cfg) {
  cfg.validate();
  TrainContext tc;
  tc.cfg = cfg;

  GenCfg g;
  g.family = cfg.family;
  g.T = cfg.T;
  g.H = cfg.H;
  g.W = cfg.W;
  g.latent = cfg.latent;
  g.width_div = cfg.width_div;
  g.categorical = cfg.categorical;
  g.classes = cfg.classes;
  tc.gen = make_generator(g, key_from({cfg.seed, STREAM_PARAM_INIT, 71}));

  DiscCfg d;
  d.family = cfg.family;
  d.T = cfg.T;
  d.H = cfg.H;
  d.W = cfg.W;
  d.width_div = cfg.width_div;
  d.noise_weight = cfg.noise_weight;
  d.categorical = cfg.categorical;
  d.classes = cfg.classes;
  d.head_aot = (cfg.aux == AuxTask::aot);
  d.head_rot = (cfg.aux == AuxTask::rotation_video || cfg.aux == AuxTask::rotation_both);
  d.head_shuffle = (cfg.aux == AuxTask::shuffle);
  tc.disc = make_discriminator(d, key_from({cfg.seed, STREAM_PARAM_INIT, 73}));

  if (cfg.family == Family::moco) {
    bool frame_rot = (cfg.aux == AuxTask::rotation_frame || cfg.aux == AuxTask::rotation_both);
    tc.frame_disc =
        FrameDisc(cfg.H, cfg.W, cfg.width_div, key_from({cfg.seed, STREAM_PARAM_INIT, 79}), frame_rot);
    tc.has_frame_disc = true;
  }

  tc.opt_g = Adam(cfg.lr, cfg.beta1, cfg.beta2);
  tc.opt_d = Adam(cfg.lr, cfg.beta1, cfg.beta2);
  tc.opt_f = Adam(cfg.lr, cfg.beta1, cfg.beta2);
  return tc;
}

namespace {

double sval(const Var& v) { return v.defined() ? v.val().data()[0] : 0.0; }

Tensor reverse_time_batch(const Tensor& x) {
  const Shape& s = x.shape();
  Tensor out(s);
  int64_t N = s[0], C = s[1], T = s[2], F = s[3] * s[4];
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t t = 0; t < T; ++t)
        std::copy(x.data() + ((n * C + c) * T + t) * F, x.data() + ((n * C + c) * T + t + 1) * F,
                  out.data() + ((n * C + c) * T + (T - 1 - t)) * F);
  return out;
}

Tensor rotate_batch(const Tensor& x, const std::vector<int>& ks) {
  std::vector<VideoClip> clips = batch_to_clips(x);
  for (size_t i = 0; i < clips.size(); ++i) clips[i] = rotate_frames(clips[i], ks[i]);
  return clips_to_batch(clips);
}

// Per-sample coin decides shuffled vs intact; shuffled clips get a fresh
// admissible permutation (never identity, never the exact reversal).
Tensor shuffle_mix_batch(const Tensor& x, std::vector<int>& flags, uint64_t key) {
  std::vector<VideoClip> clips = batch_to_clips(x);
  RngStream coin(key);
  flags.resize(clips.size());
  for (size_t i = 0; i < clips.size(); ++i) {
    flags[i] = coin.uniform() < 0.5 ? 1 : 0;
    if (flags[i]) {
      RngStream rs(key_from({key, static_cast<uint64_t>(i)}));
      clips[i] = shuffle_frames(clips[i], rs).clip;
    }
  }
  return clips_to_batch(clips);
}

std::vector<int> admissible_perm(int64_t T, RngStream& rs) {
  for (;;) {
    std::vector<int> p = rs.permutation(static_cast<int>(T));
    if (!is_identity_perm(p) && !is_reversal_perm(p)) return p;
  }
}

std::vector<int64_t> pick_frame_indices(int64_t n, int64_t T, uint64_t key) {
  RngStream rs(key);
  std::vector<int64_t> out(static_cast<size_t>(n));
  for (auto& t : out) t = rs.uniform_int(T);
  return out;
}

// {N,3,T,H,W} -> {N,3,H,W}, one chosen frame per clip (data path, no grad).
Tensor gather_frames(const Tensor& x, const std::vector<int64_t>& ts) {
  const Shape& s = x.shape();
  int64_t N = s[0], C = s[1], T = s[2], F = s[3] * s[4];
  Tensor out(Shape{N, C, s[3], s[4]});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      std::copy(x.data() + ((n * C + c) * T + ts[static_cast<size_t>(n)]) * F,
                x.data() + ((n * C + c) * T + ts[static_cast<size_t>(n)] + 1) * F,
                out.data() + (n * C + c) * F);
  return out;
}

// Same selection inside the tape so frame gradients reach the generator.
Var gather_frames_var(Var x, const std::vector<int64_t>& ts) {
  const Shape& s = x.shape();
  std::vector<Var> parts;
  for (int64_t n = 0; n < s[0]; ++n) {
    Var one = narrow(x, 0, n, 1);                                  // {1,C,T,H,W}
    one = narrow(one, 2, ts[static_cast<size_t>(n)], 1);           // {1,C,1,H,W}
    parts.push_back(reshape(one, Shape{1, s[1], s[3], s[4]}));
  }
  return concat(parts, 0);
}

Var rotate_batch_var(Var x, const std::vector<int>& ks) {
  std::vector<Var> parts;
  for (int64_t n = 0; n < x.shape()[0]; ++n) {
    Var one = narrow(x, 0, n, 1);
    int k = ks[static_cast<size_t>(n)] & 3;
    if (k) one = rot90_hw(one, k);
    parts.push_back(one);
  }
  return concat(parts, 0);
}

std::vector<int> draw_labels(int64_t n, int64_t classes, uint64_t key) {
  RngStream rs(key);
  std::vector<int> out(static_cast<size_t>(n));
  for (auto& l : out) l = static_cast<int>(rs.uniform_int(classes));
  return out;
}

std::vector<int> draw_ks(int64_t n, uint64_t key) {
  RngStream rs(key);
  std::vector<int> out(static_cast<size_t>(n));
  for (auto& k : out) k = static_cast<int>(rs.uniform_int(4));
  return out;
}

[[noreturn]] void abort_nonfinite(const TrainConfig& cfg, const char* side, int64_t counter,
                                  const std::vector<std::pair<std::string, Tensor>>& dump) {
  std::string where = "no dump (config has no output directory)";
  if (!cfg.out_dir.empty()) {
    std::string dir = cfg.out_dir + "/diagnostics";
    std::filesystem::create_directories(dir);
    for (const auto& [tag, tensor] : dump) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "/%s_%08lld_%s.avt", side,
                    static_cast<long long>(counter), tag.c_str());
      save_tensor(dir + buf, tensor);
    }
    where = "offending inputs dumped to " + dir;
  }
  throw std::runtime_error(std::string("training diverged: non-finite ") + side + " loss at update " +
                           std::to_string(counter) + "; " + where);
}

// Task-stream purposes, subkeyed under (seed, STREAM_TASK, counter, purpose).
enum : uint64_t {
  TASK_FAKE_LABELS = 1,
  TASK_ROT_KS = 2,
  TASK_SHUFFLE = 3,
  TASK_FRAME_PICK = 4,
  TASK_GP_EPS = 5,
  TASK_FRAME_ROT = 6,
};

}  // namespace

LossBundle train_step_d(TrainContext& tc, const Tensor& real, const std::vector<int>& labels) {
  const TrainConfig& c = tc.cfg;
  const Shape& rs = real.shape();
  if (rs.size() != 5 || rs[1] != 3 || rs[2] != c.T || rs[3] != c.H || rs[4] != c.W)
    throw std::runtime_error("train_step_d: batch " + shape_str(rs) + " does not match {N,3," +
                             std::to_string(c.T) + "," + std::to_string(c.H) + "," +
                             std::to_string(c.W) + "}");
  int64_t N = rs[0];
  if (c.categorical && static_cast<int64_t>(labels.size()) != N)
    throw std::runtime_error("train_step_d: categorical batch needs one label per clip");

  tc.routing.clear();
  Tape t;
  uint64_t ctr = static_cast<uint64_t>(tc.d_updates);
  auto nk = [&](uint64_t pass) { return key_from({c.seed, STREAM_LAYER_NOISE, ctr, pass}); };
  auto tk = [&](uint64_t purpose) { return key_from({c.seed, STREAM_TASK, ctr, purpose}); };
  double w_aux = c.categorical ? c.weights.lambda1 : c.weights.alpha;
  bool want_aux = (c.aux != AuxTask::none) && w_aux > 0.0;

  // detached fakes: G runs frozen, its output re-enters the tape as data
  RngStream zs(key_from({c.seed, STREAM_LATENT, ctr, PASS_D_GEN}));
  Tensor z = sample_latent(Shape{N, tc.gen->latent_dim()}, zs);
  std::vector<int> fake_labels =
      c.categorical ? draw_labels(N, c.classes, tk(TASK_FAKE_LABELS)) : std::vector<int>{};
  PassCtx g_frozen{true, false, nk(PASS_D_GEN)};
  Tensor fake = tc.gen->forward(t, t.constant(z), fake_labels, g_frozen).val();

  PassCtx p_rf{true, true, nk(PASS_D_REAL_FWD)};
  DiscOut out_rf = tc.disc->forward(t, t.constant(real), labels, p_rf);
  tc.routing.adv_inputs.push_back("d:real_fwd");
  PassCtx p_ff{true, true, nk(PASS_D_FAKE_FWD)};
  DiscOut out_ff = tc.disc->forward(t, t.constant(fake), fake_labels, p_ff);
  tc.routing.adv_inputs.push_back("d:fake_fwd");

  Var adv_term;  // the term D minimizes; includes the gradient penalty
  switch (c.loss_mode) {
    case LossMode::bce:
      adv_term = neg(adv_loss_bce(out_rf.realism, out_ff.realism));
      break;
    case LossMode::wasserstein: {
      adv_term = wasserstein_adv(out_rf.realism, out_ff.realism).first;
      if (c.gp_lambda > 0) {
        RngStream es(tk(TASK_GP_EPS));
        Tensor x_hat(rs);
        int64_t per = x_hat.numel() / N;
        for (int64_t n = 0; n < N; ++n) {
          double e = es.uniform();
          for (int64_t j = 0; j < per; ++j)
            x_hat.data()[n * per + j] = e * real.data()[n * per + j] + (1 - e) * fake.data()[n * per + j];
        }
        Var xin = t.input(std::move(x_hat), true);
        // shares the unused fake-bwd noise slot; only the penalty pass uses it
        PassCtx p_gp{true, true, nk(PASS_D_FAKE_BWD)};
        DiscOut out_gp = tc.disc->forward(t, xin, labels, p_gp);
        tc.routing.adv_inputs.push_back("d:interp_fwd");
        adv_term = add(adv_term, gradient_penalty(out_gp.realism, xin, c.gp_lambda));
      }
      break;
    }
    case LossMode::hinge_projection:
      adv_term = hinge_adv(out_rf.realism, out_ff.realism).first;
      break;
  }

  Var aux;  // task loss, whichever task is configured
  if (want_aux) {
    switch (c.aux) {
      case AuxTask::aot: {
        PassCtx p_rb{true, true, nk(PASS_D_REAL_BWD)};
        DiscOut out_rb = tc.disc->forward(t, t.constant(reverse_time_batch(real)), labels, p_rb);
        tc.routing.aot_inputs.push_back("d:real_fwd");
        tc.routing.aot_inputs.push_back("d:real_bwd");
        aux = aot_loss_d(out_rf.aot, out_rb.aot);
        if (!c.aot_real_only) {
          PassCtx p_fb{true, true, nk(PASS_D_FAKE_BWD)};
          DiscOut out_fb =
              tc.disc->forward(t, t.constant(reverse_time_batch(fake)), fake_labels, p_fb);
          tc.routing.aot_inputs.push_back("d:fake_fwd");
          tc.routing.aot_inputs.push_back("d:fake_bwd");
          aux = mulc(add(aux, aot_loss_d(out_ff.aot, out_fb.aot)), 0.5);
        }
        break;
      }
      case AuxTask::rotation_video:
      case AuxTask::rotation_both: {
        std::vector<int> ks = draw_ks(N, tk(TASK_ROT_KS));
        PassCtx p_rot{true, true, nk(PASS_D_REAL_BWD)};
        DiscOut out_rot = tc.disc->forward(t, t.constant(rotate_batch(real, ks)), labels, p_rot);
        tc.routing.task_inputs.push_back("d:real_rot");
        aux = rotation_task_loss(out_rot.rot, ks);
        break;
      }
      case AuxTask::shuffle: {
        std::vector<int> flags;
        Tensor mixed = shuffle_mix_batch(real, flags, tk(TASK_SHUFFLE));
        PassCtx p_mix{true, true, nk(PASS_D_REAL_BWD)};
        DiscOut out_mix = tc.disc->forward(t, t.constant(mixed), labels, p_mix);
        tc.routing.task_inputs.push_back("d:real_mix");
        aux = shuffle_task_loss(out_mix.shuf, flags);
        break;
      }
      case AuxTask::rotation_frame:  // frame discriminator's task; below
      case AuxTask::none:
        break;
    }
  }

  // frame discriminator: realism on one random frame per clip, plus the
  // frame-rotation task when configured
  Var frame_term;
  if (tc.has_frame_disc) {
    std::vector<int64_t> ts = pick_frame_indices(N, c.T, tk(TASK_FRAME_PICK));
    PassCtx p_fr{true, true, nk(PASS_D_FRAME)};
    Var real_f = tc.frame_disc.forward(t, t.constant(gather_frames(real, ts)), p_fr);
    Var fake_f = tc.frame_disc.forward(t, t.constant(gather_frames(fake, ts)), p_fr);
    tc.routing.task_inputs.push_back("d:real_frame");
    tc.routing.task_inputs.push_back("d:fake_frame");
    frame_term = frame_d_loss(adv_loss_bce(real_f, fake_f));
    if (want_aux && (c.aux == AuxTask::rotation_frame || c.aux == AuxTask::rotation_both)) {
      std::vector<int> ks = draw_ks(N, tk(TASK_FRAME_ROT));
      Tensor frames = gather_frames(real, ts);
      std::vector<VideoClip> singles;
      for (int64_t n = 0; n < N; ++n) {
        Tensor one(Shape{1, 3, c.H, c.W});
        std::copy(frames.data() + n * 3 * c.H * c.W, frames.data() + (n + 1) * 3 * c.H * c.W,
                  one.data());
        singles.push_back(rotate_frames(VideoClip(std::move(one)), ks[static_cast<size_t>(n)]));
      }
      Tensor rot(Shape{N, 3, c.H, c.W});
      for (int64_t n = 0; n < N; ++n)
        std::copy(singles[static_cast<size_t>(n)].data.data(),
                  singles[static_cast<size_t>(n)].data.data() + 3 * c.H * c.W,
                  rot.data() + n * 3 * c.H * c.W);
      Var rot_logits = tc.frame_disc.forward_rot(t, t.constant(rot), p_fr);
      tc.routing.task_inputs.push_back("d:real_frame_rot");
      frame_term = add(frame_term, mulc(rotation_task_loss(rot_logits, ks), w_aux));
    }
  }

  Var zero = t.constant(Tensor(Shape{1}, 0.0));
  Var aux_or_zero = aux.defined() ? aux : zero;
  Var total;
  switch (c.loss_mode) {
    case LossMode::bce:
    case LossMode::wasserstein:
      total = add(adv_term, mulc(aux_or_zero, w_aux));
      break;
    case LossMode::hinge_projection:
      total = total_categorical_d(adv_term, aux_or_zero, c.weights.lambda1);
      break;
  }
  if (frame_term.defined()) total = add(total, frame_term);

  LossBundle b;
  b.adv_d = sval(adv_term);
  b.aot_d = sval(aux);
  b.frame_d = sval(frame_term);
  b.total_d = sval(total);
  if (!std::isfinite(b.total_d) || !std::isfinite(b.adv_d) || !std::isfinite(b.aot_d) ||
      !std::isfinite(b.frame_d))
    abort_nonfinite(c, "d", tc.d_updates, {{"real", real}, {"fake", fake}, {"latent", z}});

  t.backward(total);
  std::vector<Param*> dp = tc.disc->params();
  tc.opt_d.step(dp);
  if (tc.has_frame_disc) {
    std::vector<Param*> fp = tc.frame_disc.params();
    tc.opt_f.step(fp);
  }
  ++tc.d_updates;
  return b;
}

LossBundle train_step_g(TrainContext& tc) {
  const TrainConfig& c = tc.cfg;
  int64_t N = c.batch;
  Tape t;
  uint64_t ctr = static_cast<uint64_t>(tc.step);
  // pass ids keep these disjoint from the D step's draws at equal counters
  auto nk = [&](uint64_t pass) { return key_from({c.seed, STREAM_LAYER_NOISE, ctr, pass}); };
  auto tk = [&](uint64_t purpose) { return key_from({c.seed, STREAM_TASK, ctr, purpose + 16}); };
  double w_aux = c.categorical ? c.weights.lambda2 : c.weights.beta;
  bool want_aux = (c.aux != AuxTask::none) && w_aux > 0.0;

  RngStream zs(key_from({c.seed, STREAM_LATENT, ctr, PASS_G_GEN}));
  Tensor z1 = sample_latent(Shape{N, tc.gen->latent_dim()}, zs);
  std::vector<int> labels =
      c.categorical ? draw_labels(N, c.classes, tk(TASK_FAKE_LABELS)) : std::vector<int>{};
  Var z1v = t.constant(z1);
  PassCtx g_train{true, true, nk(PASS_G_GEN)};
  Var fake = tc.gen->forward(t, z1v, labels, g_train);

  PassCtx p_ff{true, false, nk(PASS_G_FAKE_FWD)};
  DiscOut out_f = tc.disc->forward(t, fake, labels, p_ff);
  tc.routing.adv_inputs.push_back("g:fake_fwd");

  Var adv_term;
  switch (c.loss_mode) {
    case LossMode::bce:
      adv_term = g_adv_bce(out_f.realism, c.non_saturating_g);
      break;
    case LossMode::wasserstein:
    case LossMode::hinge_projection:
      adv_term = neg(mean_all(out_f.realism));
      break;
  }

  Var aux;
  if (want_aux) {
    switch (c.aux) {
      case AuxTask::aot: {
        // reversal stays on the tape: the direction penalty must reach G
        Var rev = flip(fake, 2);
        PassCtx p_fb{true, false, nk(PASS_G_FAKE_BWD)};
        DiscOut out_b = tc.disc->forward(t, rev, labels, p_fb);
        tc.routing.aot_inputs.push_back("g:fake_fwd");
        tc.routing.aot_inputs.push_back("g:fake_bwd");
        aux = aot_loss_g(out_f.aot, out_b.aot);
        break;
      }
      case AuxTask::rotation_video:
      case AuxTask::rotation_both: {
        std::vector<int> ks = draw_ks(N, tk(TASK_ROT_KS));
        Var rot = rotate_batch_var(fake, ks);
        PassCtx p_rot{true, false, nk(PASS_G_FAKE2)};
        DiscOut out_rot = tc.disc->forward(t, rot, labels, p_rot);
        tc.routing.task_inputs.push_back("g:fake_rot");
        aux = rotation_task_loss(out_rot.rot, ks);
        break;
      }
      case AuxTask::shuffle: {
        RngStream coin(tk(TASK_SHUFFLE));
        std::vector<int> flags(static_cast<size_t>(N));
        std::vector<std::vector<int>> perms;
        std::vector<int> identity(static_cast<size_t>(c.T));
        for (int64_t i = 0; i < c.T; ++i) identity[static_cast<size_t>(i)] = static_cast<int>(i);
        for (int64_t n = 0; n < N; ++n) {
          flags[static_cast<size_t>(n)] = coin.uniform() < 0.5 ? 1 : 0;
          if (flags[static_cast<size_t>(n)]) {
            RngStream rs(key_from({tk(TASK_SHUFFLE), static_cast<uint64_t>(n)}));
            perms.push_back(admissible_perm(c.T, rs));
          } else {
            perms.push_back(identity);
          }
        }
        Var mixed = permute_time(fake, perms);
        PassCtx p_mix{true, false, nk(PASS_G_FAKE2)};
        DiscOut out_mix = tc.disc->forward(t, mixed, labels, p_mix);
        tc.routing.task_inputs.push_back("g:fake_mix");
        aux = shuffle_task_loss(out_mix.shuf, flags);
        break;
      }
      case AuxTask::rotation_frame:
      case AuxTask::none:
        break;
    }
  }

  Var div;
  if (c.categorical && c.weights.lambda3 > 0) {
    RngStream zs2(key_from({c.seed, STREAM_LATENT, ctr, PASS_G_GEN2}));
    Tensor z2 = sample_latent(Shape{N, tc.gen->latent_dim()}, zs2);
    Var z2v = t.constant(z2);
    PassCtx g2{true, true, nk(PASS_G_GEN2)};
    Var fake2 = tc.gen->forward(t, z2v, labels, g2);  // same labels by contract
    div = diversity_loss(z1v, z2v, fake, fake2);
  }

  Var frame_term;
  if (tc.has_frame_disc) {
    std::vector<int64_t> ts = pick_frame_indices(N, c.T, tk(TASK_FRAME_PICK));
    Var frames = gather_frames_var(fake, ts);
    PassCtx p_fr{true, false, nk(PASS_G_FRAME)};
    Var scores = tc.frame_disc.forward(t, frames, p_fr);
    tc.routing.task_inputs.push_back("g:fake_frame");
    frame_term = g_adv_bce(scores, c.non_saturating_g);
    if (want_aux && (c.aux == AuxTask::rotation_frame || c.aux == AuxTask::rotation_both)) {
      std::vector<int> ks = draw_ks(N, tk(TASK_FRAME_ROT));
      Var rot = rotate_batch_var(frames, ks);
      Var rot_logits = tc.frame_disc.forward_rot(t, rot, p_fr);
      tc.routing.task_inputs.push_back("g:fake_frame_rot");
      frame_term = add(frame_term, mulc(rotation_task_loss(rot_logits, ks), w_aux));
    }
  }

  Var zero = t.constant(Tensor(Shape{1}, 0.0));
  Var aux_or_zero = aux.defined() ? aux : zero;
  Var total;
  if (c.loss_mode == LossMode::hinge_projection) {
    total = total_categorical_g(adv_term, aux_or_zero, div.defined() ? div : zero, c.weights.lambda2,
                                c.weights.lambda3);
  } else {
    total = total_g_unconditional(adv_term, aux_or_zero, w_aux);
  }
  if (frame_term.defined()) total = total_g_with_frames(total, frame_term);

  LossBundle b;
  b.adv_g = sval(adv_term);
  b.aot_g = sval(aux);
  b.div = sval(div);
  b.frame_g = sval(frame_term);
  b.total_g = sval(total);
  if (!std::isfinite(b.total_g) || !std::isfinite(b.adv_g) || !std::isfinite(b.aot_g) ||
      !std::isfinite(b.div) || !std::isfinite(b.frame_g))
    abort_nonfinite(c, "g", tc.step, {{"latent", z1}});

  t.backward(total);
  std::vector<Param*> gp = tc.gen->params();
  tc.opt_g.step(gp);
  ++tc.step;
  return b;
}

Tensor sample_videos(TrainContext& tc, int64_t n, uint64_t key, std::vector<int> labels) {
  const TrainConfig& c = tc.cfg;
  if (n < 1) throw std::runtime_error("sample_videos: need at least one sample");
  if (c.categorical && labels.empty()) labels = draw_labels(n, c.classes, key_from({key, 0x4c41ull}));
  if (c.categorical && static_cast<int64_t>(labels.size()) != n)
    throw std::runtime_error("sample_videos: need one label per sample");
  Tape t;
  RngStream zs(key_from({key, STREAM_LATENT}));
  Tensor z = sample_latent(Shape{n, tc.gen->latent_dim()}, zs);
  PassCtx eval{false, false, key};
  return tc.gen->forward(t, t.constant(z), labels, eval).val();
}

RunResult run_training(const TrainConfig& cfg, const DatasetManifest& data,
                       const std::string& resume_from) {
  cfg.validate();
  if (cfg.out_dir.empty()) throw std::runtime_error("run_training: config needs an output directory");
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  fs::create_directories(cfg.out_dir + "/samples");
  fs::create_directories(cfg.out_dir + "/ckpt");
  std::string ledger_path = cfg.out_dir + "/ledger.csv";

  TrainContext tc = make_trainer(cfg);
  BatchCfg bc;
  bc.batch_size = cfg.batch;
  bc.clip_len = cfg.T;
  bc.seed = cfg.seed;
  BatchIterator it(data, bc);

  if (!resume_from.empty()) {
    load_checkpoint(tc, resume_from);
    it.seek(tc.data_epoch, tc.data_batch);
    if (!fs::exists(ledger_path)) {
      std::ofstream out(ledger_path, std::ios::trunc);
      out << LossBundle::csv_header() << ",wall_ms,d_updates\n";
    }
    // drop ledger rows the resumed segment will rewrite
    if (fs::exists(ledger_path)) {
      std::ifstream in(ledger_path);
      std::string line, kept;
      std::getline(in, line);
      kept = line + "\n";
      while (std::getline(in, line)) {
        long long row_step = std::atoll(line.c_str());
        if (row_step <= tc.step) kept += line + "\n";
      }
      in.close();
      std::ofstream out(ledger_path, std::ios::trunc);
      out << kept;
    }
  } else {
    it.begin_epoch(0);
    std::ofstream out(ledger_path, std::ios::trunc);
    out << LossBundle::csv_header() << ",wall_ms,d_updates\n";
  }

  std::ofstream ledger(ledger_path, std::ios::app);
  if (!ledger) throw std::runtime_error("cannot open " + ledger_path);

  auto pull = [&](BatchIterator::Batch& b) {
    if (!it.next(b)) {
      it.begin_epoch(it.epoch() + 1);
      if (!it.next(b)) throw std::runtime_error("batch stream yielded an empty epoch");
    }
    tc.data_epoch = it.epoch();
    tc.data_batch = it.batch_index();
  };

  std::string last_ckpt;
  while (tc.step < cfg.steps) {
    auto t0 = std::chrono::steady_clock::now();
    LossBundle d_bundle;
    BatchIterator::Batch b;
    for (int k = 0; k < cfg.d_per_g; ++k) {
      pull(b);
      // Manifests always carry classes; unconditional runs ignore them.
      d_bundle = train_step_d(tc, b.video, cfg.categorical ? b.labels : std::vector<int>{});
    }
    LossBundle g_bundle = train_step_g(tc);
    d_bundle.adv_g = g_bundle.adv_g;
    d_bundle.aot_g = g_bundle.aot_g;
    d_bundle.div = g_bundle.div;
    d_bundle.frame_g = g_bundle.frame_g;
    d_bundle.total_g = g_bundle.total_g;
    double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    ledger << d_bundle.csv_row(tc.step) << ',' << ms << ',' << tc.d_updates << '\n';
    ledger.flush();

    if (tc.step % cfg.snapshot_every == 0 || tc.step == cfg.steps) {
      char tag[32];
      std::snprintf(tag, sizeof(tag), "step_%08lld", static_cast<long long>(tc.step));
      std::string ckpt_dir = cfg.out_dir + "/ckpt/" + tag;
      save_checkpoint(tc, ckpt_dir);
      last_ckpt = ckpt_dir;
      int64_t n_show = std::min<int64_t>(4, cfg.batch);
      Tensor grid =
          sample_videos(tc, n_show, key_from({cfg.seed, STREAM_EVAL, static_cast<uint64_t>(tc.step)}));
      std::vector<VideoClip> clips = batch_to_clips(grid);
      write_frame_grid_png(cfg.out_dir + "/samples/" + tag + ".png", clips, 8);
      write_gif(cfg.out_dir + "/samples/" + tag + ".gif", clips[0]);
    }
  }
  return {tc.step, last_ckpt, ledger_path};
}

}  // namespace arrowvid
