#include "arrowvid/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "arrowvid/tensor_file.hpp"

namespace arrowvid {

namespace {

constexpr double kFormat = 1.0;

void pack_adam(NamedTensors& out, const std::string& tag, const Adam& a) {
  Tensor tt(Shape{1});
  tt.data()[0] = static_cast<double>(a.t());
  out.emplace_back(tag + ".t", std::move(tt));
  std::vector<Tensor> slots = a.state_tensors();
  for (size_t i = 0; i < slots.size(); ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), ".s%04zu", i);
    out.emplace_back(tag + buf, std::move(slots[i]));
  }
}

void unpack_adam(const NamedTensors& in, const std::string& tag, Adam& a) {
  int64_t t = -1;
  std::vector<Tensor> slots;
  for (const auto& [name, tensor] : in) {
    if (name == tag + ".t") t = static_cast<int64_t>(tensor.data()[0]);
    else if (name.rfind(tag + ".s", 0) == 0) slots.push_back(tensor);
  }
  if (t < 0) throw std::runtime_error("checkpoint: missing optimizer clock for " + tag);
  a.load_state(t, std::move(slots));
}

}  // namespace

void save_checkpoint(const TrainContext& tc, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_named_tensors(dir + "/gen.avtl", tc.gen->state());
  save_named_tensors(dir + "/disc.avtl", tc.disc->state());
  if (tc.has_frame_disc) save_named_tensors(dir + "/frame.avtl", tc.frame_disc.state());

  NamedTensors opt;
  pack_adam(opt, "optd", tc.opt_d);
  pack_adam(opt, "optg", tc.opt_g);
  if (tc.has_frame_disc) pack_adam(opt, "optf", tc.opt_f);
  save_named_tensors(dir + "/opt.avtl", opt);

  uint64_t hash = tc.cfg.config_hash();
  Tensor meta(Shape{7});
  meta.data()[0] = kFormat;
  meta.data()[1] = static_cast<double>(tc.step);
  meta.data()[2] = static_cast<double>(tc.d_updates);
  meta.data()[3] = static_cast<double>(tc.data_epoch);
  meta.data()[4] = static_cast<double>(tc.data_batch);
  meta.data()[5] = static_cast<double>(hash & 0xffffffffull);
  meta.data()[6] = static_cast<double>(hash >> 32);
  NamedTensors mt;
  mt.emplace_back("meta", std::move(meta));
  save_named_tensors(dir + "/meta.avtl", mt);
}

namespace {

Tensor read_meta(const std::string& dir) {
  NamedTensors mt = load_named_tensors(dir + "/meta.avtl");
  if (mt.size() != 1 || mt[0].first != "meta" || mt[0].second.numel() != 7)
    throw std::runtime_error("checkpoint: malformed meta file in " + dir);
  if (mt[0].second.data()[0] != kFormat)
    throw std::runtime_error("checkpoint: unsupported format version in " + dir);
  return mt[0].second;
}

}  // namespace

void load_checkpoint(TrainContext& tc, const std::string& dir) {
  Tensor meta = read_meta(dir);
  uint64_t hash = static_cast<uint64_t>(meta.data()[5]) |
                  (static_cast<uint64_t>(meta.data()[6]) << 32);
  if (hash != tc.cfg.config_hash())
    throw std::runtime_error(
        "checkpoint: config hash mismatch — this checkpoint was written under a different "
        "configuration than the one resuming it");

  tc.gen->load(load_named_tensors(dir + "/gen.avtl"));
  tc.disc->load(load_named_tensors(dir + "/disc.avtl"));
  if (tc.has_frame_disc) tc.frame_disc.load(load_named_tensors(dir + "/frame.avtl"));

  NamedTensors opt = load_named_tensors(dir + "/opt.avtl");
  unpack_adam(opt, "optd", tc.opt_d);
  unpack_adam(opt, "optg", tc.opt_g);
  if (tc.has_frame_disc) unpack_adam(opt, "optf", tc.opt_f);

  tc.step = static_cast<int64_t>(meta.data()[1]);
  tc.d_updates = static_cast<int64_t>(meta.data()[2]);
  tc.data_epoch = static_cast<int64_t>(meta.data()[3]);
  tc.data_batch = static_cast<int64_t>(meta.data()[4]);
}

int64_t checkpoint_step(const std::string& dir) {
  return static_cast<int64_t>(read_meta(dir).data()[1]);
}

std::string latest_checkpoint(const std::string& run_dir) {
  namespace fs = std::filesystem;
  std::string ckpt_root = run_dir + "/ckpt";
  if (!fs::exists(ckpt_root)) return "";
  long long best = -1;
  std::string best_path;
  for (const auto& e : fs::directory_iterator(ckpt_root)) {
    std::string name = e.path().filename().string();
    long long s;
    if (std::sscanf(name.c_str(), "step_%lld", &s) == 1 && s > best) {
      best = s;
      best_path = e.path().string();
    }
  }
  return best_path;
}

}  // namespace arrowvid
