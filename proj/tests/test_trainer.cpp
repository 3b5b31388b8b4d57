#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "arrowvid/checkpoint.hpp"
#include "arrowvid/dataset.hpp"
#include "arrowvid/rng.hpp"
#include "arrowvid/synth.hpp"
#include "arrowvid/tensor_file.hpp"
#include "arrowvid/trainer.hpp"

using namespace arrowvid;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& tag) {
  std::string d = (fs::temp_directory_path() / ("avtest_" + tag)).string();
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Shared tiny corpus: two scene kinds, 16x16, 10 frames (two frames of
// window slack over the T=8 clips the trainer pulls).
const DatasetManifest& corpus() {
  static DatasetManifest m = [] {
    std::string dir = fresh_dir("trainer_corpus");
    std::string mp = generate_dataset(dir, {SceneKind::falling_ball, SceneKind::growing_shape}, 12,
                                      10, 16, 16, 505);
    return load_manifest(mp);
  }();
  return m;
}

TrainConfig tiny_cfg(AuxTask aux = AuxTask::aot, Family fam = Family::vgan) {
  TrainConfig c;
  c.family = fam;
  c.aux = aux;
  c.T = 8;
  c.H = 16;
  c.W = 16;
  c.latent = 16;
  c.width_div = 16;
  c.batch = 3;
  c.steps = 4;
  c.snapshot_every = 2;
  c.seed = 99;
  return c;
}

Tensor pull_real(int64_t n, uint64_t seed = 7) {
  BatchCfg bc;
  bc.batch_size = n;
  bc.clip_len = 8;
  bc.seed = seed;
  BatchIterator it(corpus(), bc);
  it.begin_epoch(0);
  BatchIterator::Batch b;
  REQUIRE(it.next(b));
  return b.video;
}

bool states_equal(const NamedTensors& a, const NamedTensors& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first) return false;
    if (a[i].second.shape() != b[i].second.shape()) return false;
    if (std::memcmp(a[i].second.data(), b[i].second.data(),
                    sizeof(double) * static_cast<size_t>(a[i].second.numel())) != 0)
      return false;
  }
  return true;
}

// Equality restricted to names both sides carry — lets a run with an extra
// (untouched) auxiliary head be compared against one built without it.
bool shared_states_equal(const NamedTensors& a, const NamedTensors& b) {
  int compared = 0;
  for (const auto& [name, ta] : a)
    for (const auto& [nb, tb] : b)
      if (name == nb) {
        ++compared;
        if (ta.shape() != tb.shape()) return false;
        if (std::memcmp(ta.data(), tb.data(),
                        sizeof(double) * static_cast<size_t>(ta.numel())) != 0)
          return false;
      }
  return compared > 0;
}

bool has_tag(const std::vector<std::string>& v, const std::string& tag) {
  return std::find(v.begin(), v.end(), tag) != v.end();
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

// Ledger rows compare exactly except the wall-clock column (second to last).
std::string strip_wall(const std::string& row) {
  size_t last = row.rfind(',');
  size_t prev = row.rfind(',', last - 1);
  return row.substr(0, prev) + row.substr(last);
}

}  // namespace

TEST_SUITE_BEGIN("trainer");

TEST_CASE("config validation rejects broken settings") {
  TrainConfig c = tiny_cfg();
  CHECK_NOTHROW(c.validate());

  TrainConfig bad = c;
  bad.lr = 0;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("learning rate"), std::runtime_error);
  bad = c;
  bad.weights.alpha = -1;
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  bad = c;
  bad.d_per_g = 0;
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  bad = c;
  bad.categorical = true;  // needs classes and the hinge objective
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  bad = c;
  bad.loss_mode = LossMode::hinge_projection;  // hinge without labels
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  bad = c;
  bad.aux = AuxTask::rotation_frame;  // frame tasks need the two-stream family
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  bad = c;
  bad.T = 1;  // no direction in a single frame
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
  bad = tiny_cfg(AuxTask::shuffle);
  bad.T = 2;  // every 2-frame permutation is identity or reversal
  CHECK_THROWS_AS(bad.validate(), std::runtime_error);
}

TEST_CASE("config hash tracks identity, ignores run length") {
  TrainConfig a = tiny_cfg();
  TrainConfig b = tiny_cfg();
  CHECK(a.config_hash() == b.config_hash());

  b.steps = 999;
  b.snapshot_every = 7;
  b.out_dir = "/elsewhere";
  CHECK(a.config_hash() == b.config_hash());  // run length is not identity

  b = tiny_cfg();
  b.seed = 100;
  CHECK(a.config_hash() != b.config_hash());
  b = tiny_cfg();
  b.weights.alpha = 0.5;
  CHECK(a.config_hash() != b.config_hash());
  b = tiny_cfg(AuxTask::aot, Family::tgan);
  CHECK(a.config_hash() != b.config_hash());
  b = tiny_cfg(AuxTask::none);
  CHECK(a.config_hash() != b.config_hash());
}

TEST_CASE("names round-trip") {
  for (auto m : {LossMode::bce, LossMode::wasserstein, LossMode::hinge_projection})
    CHECK(loss_mode_from_string(loss_mode_name(m)) == m);
  for (auto a : {AuxTask::aot, AuxTask::rotation_frame, AuxTask::rotation_video,
                 AuxTask::rotation_both, AuxTask::shuffle, AuxTask::none})
    CHECK(aux_task_from_string(aux_task_name(a)) == a);
  CHECK_THROWS_AS(aux_task_from_string("sudoku"), std::runtime_error);
  CHECK_THROWS_AS(loss_mode_from_string(""), std::runtime_error);
}

TEST_CASE("construction wires the families") {
  TrainContext v = make_trainer(tiny_cfg());
  CHECK_FALSE(v.has_frame_disc);
  CHECK(v.gen->latent_dim() == 16);

  TrainContext m = make_trainer(tiny_cfg(AuxTask::aot, Family::moco));
  CHECK(m.has_frame_disc);

  // Same seed, same shapes -> same init; different seed -> different weights.
  TrainContext v2 = make_trainer(tiny_cfg());
  CHECK(states_equal(v.gen->state(), v2.gen->state()));
  CHECK(states_equal(v.disc->state(), v2.disc->state()));
  TrainConfig other = tiny_cfg();
  other.seed = 1234;
  TrainContext v3 = make_trainer(other);
  CHECK_FALSE(states_equal(v.gen->state(), v3.gen->state()));
}

TEST_CASE("discriminator improves against a frozen generator") {
  TrainConfig c = tiny_cfg();
  c.batch = 4;
  TrainContext tc = make_trainer(c);
  BatchCfg bc;
  bc.batch_size = 4;
  bc.clip_len = 8;
  bc.seed = 3;
  BatchIterator it(corpus(), bc);
  it.begin_epoch(0);

  std::vector<double> totals;
  BatchIterator::Batch b;
  for (int s = 0; s < 50; ++s) {
    if (!it.next(b)) {
      it.begin_epoch(it.epoch() + 1);
      REQUIRE(it.next(b));
    }
    LossBundle lb = train_step_d(tc, b.video);
    CHECK(std::isfinite(lb.total_d));
    totals.push_back(lb.total_d);
  }
  double head = std::accumulate(totals.begin(), totals.begin() + 10, 0.0) / 10;
  double tail = std::accumulate(totals.end() - 10, totals.end(), 0.0) / 10;
  CHECK(tail < head);
  CHECK(tc.d_updates == 50);
  CHECK(tc.step == 0);  // D-only updates close no iteration
}

TEST_CASE("default routing: adversarial pass never sees reversals, direction branch never sees fakes") {
  TrainContext tc = make_trainer(tiny_cfg());
  Tensor real = pull_real(3);

  train_step_d(tc, real);
  CHECK_FALSE(tc.routing.adv_saw_backward());
  CHECK_FALSE(tc.routing.aot_saw_fake());
  CHECK(has_tag(tc.routing.adv_inputs, "d:real_fwd"));
  CHECK(has_tag(tc.routing.adv_inputs, "d:fake_fwd"));
  CHECK(has_tag(tc.routing.aot_inputs, "d:real_fwd"));
  CHECK(has_tag(tc.routing.aot_inputs, "d:real_bwd"));

  train_step_g(tc);
  CHECK_FALSE(tc.routing.adv_saw_backward());
  CHECK(has_tag(tc.routing.adv_inputs, "g:fake_fwd"));
  // G's direction term needs both playback directions of its own output.
  CHECK(has_tag(tc.routing.aot_inputs, "g:fake_fwd"));
  CHECK(has_tag(tc.routing.aot_inputs, "g:fake_bwd"));
}

TEST_CASE("optional fake-clip direction training is routed and logged") {
  TrainConfig c = tiny_cfg();
  c.aot_real_only = false;
  TrainContext tc = make_trainer(c);
  train_step_d(tc, pull_real(3));
  CHECK(tc.routing.aot_saw_fake());
  CHECK(has_tag(tc.routing.aot_inputs, "d:fake_fwd"));
  CHECK(has_tag(tc.routing.aot_inputs, "d:fake_bwd"));
  CHECK_FALSE(tc.routing.adv_saw_backward());  // adversarial stream unchanged
}

TEST_CASE("rotation and shuffle tasks tag their transformed inputs") {
  TrainContext rot = make_trainer(tiny_cfg(AuxTask::rotation_video));
  train_step_d(rot, pull_real(3));
  CHECK(has_tag(rot.routing.task_inputs, "d:real_rot"));
  CHECK(rot.routing.aot_inputs.empty());
  train_step_g(rot);
  CHECK(has_tag(rot.routing.task_inputs, "g:fake_rot"));

  TrainContext shuf = make_trainer(tiny_cfg(AuxTask::shuffle));
  train_step_d(shuf, pull_real(3));
  CHECK(has_tag(shuf.routing.task_inputs, "d:real_mix"));
  train_step_g(shuf);
  CHECK(has_tag(shuf.routing.task_inputs, "g:fake_mix"));

  TrainContext both = make_trainer(tiny_cfg(AuxTask::rotation_both, Family::moco));
  train_step_d(both, pull_real(3));
  CHECK(has_tag(both.routing.task_inputs, "d:real_rot"));
  CHECK(has_tag(both.routing.task_inputs, "d:real_frame_rot"));
  train_step_g(both);
  CHECK(has_tag(both.routing.task_inputs, "g:fake_rot"));
  CHECK(has_tag(both.routing.task_inputs, "g:fake_frame_rot"));
}

TEST_CASE("zero-weighted direction task walks the baseline trajectory") {
  TrainConfig with = tiny_cfg(AuxTask::aot);
  with.weights.alpha = 0;
  with.weights.beta = 0;
  TrainConfig without = tiny_cfg(AuxTask::none);
  TrainContext a = make_trainer(with);
  TrainContext b = make_trainer(without);

  for (int s = 0; s < 5; ++s) {
    Tensor real = pull_real(3, 40 + static_cast<uint64_t>(s));
    LossBundle la = train_step_d(a, real);
    LossBundle lb = train_step_d(b, real);
    CHECK(la.total_d == lb.total_d);
    LossBundle ga = train_step_g(a);
    LossBundle gb = train_step_g(b);
    CHECK(ga.total_g == gb.total_g);
  }
  CHECK(states_equal(a.gen->state(), b.gen->state()));
  // Discriminators differ by the dormant direction head; everything they
  // share must have moved in lockstep.
  CHECK(shared_states_equal(a.disc->state(), b.disc->state()));
}

TEST_CASE("optimizer clocks tick independently") {
  TrainContext tc = make_trainer(tiny_cfg());
  Tensor real = pull_real(3);
  train_step_d(tc, real);
  train_step_d(tc, real);
  train_step_g(tc);
  CHECK(tc.opt_d.t() == 2);
  CHECK(tc.opt_g.t() == 1);
  CHECK(tc.opt_f.t() == 0);  // no frame stream outside moco
  CHECK(tc.d_updates == 2);
  CHECK(tc.step == 1);
}

TEST_CASE("non-finite loss aborts and dumps the offending batch") {
  TrainConfig c = tiny_cfg();
  c.out_dir = fresh_dir("trainer_nan");
  TrainContext tc = make_trainer(c);
  Tensor real = pull_real(3);
  real.data()[5] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_WITH_AS(train_step_d(tc, real), doctest::Contains("training diverged"),
                       std::runtime_error);
  int dumped = 0;
  for (const auto& e : fs::directory_iterator(c.out_dir + "/diagnostics")) {
    (void)e;
    ++dumped;
  }
  CHECK(dumped > 0);
}

TEST_CASE("shape and label errors are rejected up front") {
  TrainContext tc = make_trainer(tiny_cfg());
  CHECK_THROWS_WITH_AS(train_step_d(tc, Tensor(Shape{3, 3, 8, 16, 8})),
                       doctest::Contains("does not match"), std::runtime_error);

  TrainConfig cc = tiny_cfg();
  cc.categorical = true;
  cc.classes = 2;
  cc.loss_mode = LossMode::hinge_projection;
  TrainContext cat = make_trainer(cc);
  CHECK_THROWS_WITH_AS(train_step_d(cat, pull_real(3)), doctest::Contains("one label per clip"),
                       std::runtime_error);
}

TEST_CASE("checkpoint restores parameters, optimizer slots, and counters bit-exact") {
  TrainConfig c = tiny_cfg();
  TrainContext tc = make_trainer(c);
  Tensor real = pull_real(3);
  train_step_d(tc, real);
  train_step_g(tc);

  std::string dir = fresh_dir("trainer_ckpt") + "/step_00000001";
  save_checkpoint(tc, dir);
  NamedTensors g0 = tc.gen->state(), d0 = tc.disc->state();

  // Walk away from the saved point, then restore.
  train_step_d(tc, pull_real(3, 21));
  train_step_g(tc);
  CHECK_FALSE(states_equal(tc.gen->state(), g0));

  load_checkpoint(tc, dir);
  CHECK(states_equal(tc.gen->state(), g0));
  CHECK(states_equal(tc.disc->state(), d0));
  CHECK(tc.step == 1);
  CHECK(tc.d_updates == 1);
  CHECK(tc.opt_g.t() == 1);
  CHECK(tc.opt_d.t() == 1);
  CHECK(checkpoint_step(dir) == 1);

  // The restored context must continue exactly as the original run would
  // have — same next update given the same batch.
  TrainContext fresh = make_trainer(c);
  train_step_d(fresh, real);
  train_step_g(fresh);
  Tensor rb = pull_real(3, 21);
  LossBundle resumed = train_step_d(tc, rb);
  LossBundle straight = train_step_d(fresh, rb);
  CHECK(resumed.total_d == straight.total_d);
  CHECK(states_equal(tc.disc->state(), fresh.disc->state()));
}

TEST_CASE("checkpoint refuses tampered files and foreign configurations") {
  TrainConfig c = tiny_cfg();
  TrainContext tc = make_trainer(c);
  std::string dir = fresh_dir("trainer_ckpt_bad") + "/step_00000000";
  save_checkpoint(tc, dir);

  SUBCASE("flipped byte trips the checksum") {
    std::fstream f(dir + "/disc.avtl", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    char x;
    f.seekg(40);
    f.get(x);
    x ^= 0x40;
    f.seekp(40);
    f.put(x);
    f.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(tc, dir), doctest::Contains("checksum"),
                         std::runtime_error);
  }
  SUBCASE("config hash guards against silent divergence") {
    TrainConfig other = c;
    other.seed = 1000;
    TrainContext otc = make_trainer(other);
    CHECK_THROWS_WITH_AS(load_checkpoint(otc, dir), doctest::Contains("different configuration"),
                         std::runtime_error);
    other = c;
    other.steps = 12345;  // run length is not identity: must load fine
    TrainContext same = make_trainer(other);
    CHECK_NOTHROW(load_checkpoint(same, dir));
  }
}

TEST_CASE("sampling is keyed, deterministic, and unchanged by restore") {
  TrainConfig c = tiny_cfg();
  TrainContext tc = make_trainer(c);
  train_step_d(tc, pull_real(3));
  train_step_g(tc);

  Tensor s1 = sample_videos(tc, 2, 777);
  Tensor s2 = sample_videos(tc, 2, 777);
  CHECK(s1.shape() == Shape{2, 3, 8, 16, 16});
  CHECK(std::memcmp(s1.data(), s2.data(), sizeof(double) * s1.numel()) == 0);
  Tensor s3 = sample_videos(tc, 2, 778);
  CHECK(std::memcmp(s1.data(), s3.data(), sizeof(double) * s1.numel()) != 0);

  std::string dir = fresh_dir("trainer_sample_ckpt") + "/cp";
  save_checkpoint(tc, dir);
  train_step_d(tc, pull_real(3, 9));
  train_step_g(tc);
  load_checkpoint(tc, dir);
  Tensor s4 = sample_videos(tc, 2, 777);
  CHECK(std::memcmp(s1.data(), s4.data(), sizeof(double) * s1.numel()) == 0);
}

TEST_CASE("run_training writes ledger, snapshots, and honors the update ratio") {
  TrainConfig c = tiny_cfg();
  c.steps = 4;
  c.snapshot_every = 2;
  c.d_per_g = 2;
  c.out_dir = fresh_dir("trainer_run");
  RunResult r = run_training(c, corpus());

  CHECK(r.final_step == 4);
  CHECK(r.last_checkpoint == c.out_dir + "/ckpt/step_00000004");
  CHECK(fs::exists(c.out_dir + "/ckpt/step_00000002/meta.avtl"));
  CHECK(fs::exists(c.out_dir + "/samples/step_00000004.png"));
  CHECK(fs::exists(c.out_dir + "/samples/step_00000004.gif"));

  std::vector<std::string> lines = read_lines(r.ledger_path);
  REQUIRE(lines.size() == 5);  // header + one row per iteration
  CHECK(lines[0] == LossBundle::csv_header() + ",wall_ms,d_updates");
  // Tail column audits the ratio: after iteration s, d_updates == 2s.
  for (int s = 1; s <= 4; ++s) {
    const std::string& row = lines[static_cast<size_t>(s)];
    CHECK(row.substr(0, 2) == std::to_string(s) + ",");
    CHECK(row.substr(row.rfind(',') + 1) == std::to_string(2 * s));
  }
  CHECK(latest_checkpoint(c.out_dir) == r.last_checkpoint);
}

TEST_CASE("resumed run is bit-identical to an uninterrupted one") {
  TrainConfig base = tiny_cfg();
  base.steps = 6;
  base.snapshot_every = 3;

  TrainConfig whole = base;
  whole.out_dir = fresh_dir("trainer_whole");
  RunResult rw = run_training(whole, corpus());

  TrainConfig part = base;
  part.steps = 3;
  part.out_dir = fresh_dir("trainer_part");
  RunResult rp = run_training(part, corpus());
  part.steps = 6;
  RunResult rr = run_training(part, corpus(), rp.last_checkpoint);
  CHECK(rr.final_step == 6);

  // Final snapshots agree byte-for-byte per stored tensor.
  for (const char* f : {"/gen.avtl", "/disc.avtl", "/opt.avtl"}) {
    NamedTensors a = load_named_tensors(rw.last_checkpoint + f);
    NamedTensors b = load_named_tensors(rr.last_checkpoint + f);
    CHECK(states_equal(a, b));
  }
  // Ledgers agree row-for-row once wall time is set aside.
  std::vector<std::string> lw = read_lines(rw.ledger_path);
  std::vector<std::string> lr = read_lines(rr.ledger_path);
  REQUIRE(lw.size() == lr.size());
  for (size_t i = 1; i < lw.size(); ++i) CHECK(strip_wall(lw[i]) == strip_wall(lr[i]));
  // And the sample grids rendered at the shared snapshot do too.
  std::ifstream pa(whole.out_dir + "/samples/step_00000006.png", std::ios::binary);
  std::ifstream pb(part.out_dir + "/samples/step_00000006.png", std::ios::binary);
  std::string ba((std::istreambuf_iterator<char>(pa)), std::istreambuf_iterator<char>());
  std::string bb((std::istreambuf_iterator<char>(pb)), std::istreambuf_iterator<char>());
  CHECK(ba == bb);
}

TEST_CASE("objective variants run a full iteration with finite books") {
  SUBCASE("wasserstein with gradient penalty") {
    TrainConfig c = tiny_cfg(AuxTask::aot, Family::tgan);
    c.loss_mode = LossMode::wasserstein;
    TrainContext tc = make_trainer(c);
    LossBundle d = train_step_d(tc, pull_real(3));
    CHECK(std::isfinite(d.total_d));
    CHECK(has_tag(tc.routing.adv_inputs, "d:interp_fwd"));  // penalty probe
    LossBundle g = train_step_g(tc);
    CHECK(std::isfinite(g.total_g));
  }
  SUBCASE("two-stream family books frame terms") {
    TrainContext tc = make_trainer(tiny_cfg(AuxTask::aot, Family::moco));
    LossBundle d = train_step_d(tc, pull_real(3));
    CHECK(d.frame_d != 0.0);
    CHECK(std::isfinite(d.frame_d));
    CHECK(tc.opt_f.t() == 1);
    LossBundle g = train_step_g(tc);
    CHECK(g.frame_g != 0.0);
    CHECK(doctest::Approx(g.total_g) == g.adv_g + 0.2 * g.aot_g + g.frame_g);
  }
  SUBCASE("categorical hinge books the diversity term") {
    TrainConfig c = tiny_cfg();
    c.categorical = true;
    c.classes = 2;
    c.loss_mode = LossMode::hinge_projection;
    TrainContext tc = make_trainer(c);
    BatchCfg bc;
    bc.batch_size = 3;
    bc.clip_len = 8;
    bc.seed = 7;
    BatchIterator it(corpus(), bc);
    it.begin_epoch(0);
    BatchIterator::Batch b;
    REQUIRE(it.next(b));
    LossBundle d = train_step_d(tc, b.video, b.labels);
    CHECK(std::isfinite(d.total_d));
    LossBundle g = train_step_g(tc);
    CHECK(g.div != 0.0);
    CHECK(doctest::Approx(g.total_g) == g.adv_g + 0.5 * g.aot_g + 0.2 * g.div);
  }
}

TEST_SUITE_END();
