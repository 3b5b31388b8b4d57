#include "arrowvid/discriminators.hpp"

#include <stdexcept>

namespace arrowvid {

namespace {

// Temporal kernel clamp: kernel 4 / pad 1 while the extent allows, else the
// whole extent unpadded.  Identity on the published shapes (T in {16,32}).
void clamp_kt_s2(int64_t tcur, int64_t& kt, int& pt) {
  kt = tcur < 4 ? tcur : 4;
  pt = kt == 4 ? 1 : 0;
}

int64_t out_s2(int64_t i, int64_t k, int p) { return (i + 2 * p - k) / 2 + 1; }

void check_input(const std::string& name, const Shape& s, const DiscCfg& c) {
  if (s.size() != 5 || s[1] != 3 || s[2] != c.T || s[3] != c.H || s[4] != c.W)
    throw std::runtime_error(name + ": expected {N,3," + std::to_string(c.T) + "," + std::to_string(c.H) +
                             "," + std::to_string(c.W) + "}, got " + shape_str(s));
}

void check_disc_labels(const DiscCfg& c, const std::vector<int>& labels, int64_t n) {
  if (c.categorical) {
    if (static_cast<int64_t>(labels.size()) != n)
      throw std::runtime_error("categorical discriminator needs one class label per sample");
  } else if (!labels.empty()) {
    throw std::runtime_error("unconditional discriminator got class labels");
  }
}

// mean over channel-2.. dims holding {N,C}: {N,C,...} -> {N,C}
Var mean_keep_nc(Var x) {
  int64_t cnt = 1;
  const Shape& s = x.shape();
  for (size_t i = 2; i < s.size(); ++i) cnt *= s[i];
  return mulc(nc_sum(x), 1.0 / static_cast<double>(cnt));
}

// ---- Table-1 family ----
struct VganDisc final : ArrowDisc {
  DiscCfg c;
  int s;
  std::vector<Conv3dLayer> convs;
  std::vector<BatchNormLayer> bns;  // stages 2..s
  std::vector<NoiseLayer> noises;   // input + one per stage
  LinearLayer h_real, h_aot, h_rot, h_shuf;
  LinearLayer psi;
  Param emb;
  int64_t flat_dim = 0, feat_c = 0;
  std::vector<std::pair<std::string, Shape>> shapes_;

  VganDisc(const DiscCfg& cfg, uint64_t key) : c(cfg), s(spatial_stages(cfg.H)) {
    if (c.H != c.W) throw std::runtime_error("discriminator wants square frames");
    InitCtx init{key};
    noises.emplace_back(c.noise_weight, 0);
    int64_t tcur = c.T, cw = 3;
    for (int i = 0; i < s; ++i) {
      int64_t cout = divw(int64_t{128} << i, c.width_div), kt;
      int pt;
      clamp_kt_s2(tcur, kt, pt);
      convs.emplace_back("d.conv" + std::to_string(i + 1), cw, cout, std::array<int64_t, 3>{kt, 4, 4},
                         std::array<int, 3>{2, 2, 2}, std::array<int, 3>{pt, 1, 1}, init);
      if (i > 0) bns.emplace_back("d.bn" + std::to_string(i + 1), cout, init);
      noises.emplace_back(c.noise_weight, static_cast<uint64_t>(i + 1));
      tcur = out_s2(tcur, kt, pt);
      cw = cout;
    }
    feat_c = cw;
    flat_dim = cw * tcur * 16;
    h_real = LinearLayer("d.real", flat_dim, 1, init);
    if (c.head_aot) h_aot = LinearLayer("d.aot", flat_dim, 1, init);
    if (c.head_rot) h_rot = LinearLayer("d.rot", flat_dim, 4, init);
    if (c.head_shuffle) h_shuf = LinearLayer("d.shuf", flat_dim, 1, init);
    if (c.categorical) {
      psi = LinearLayer("d.psi", feat_c, 1, init);
      emb = Param("d.emb", init_normal({c.classes, feat_c}, 0.0, 0.02, init.next()));
      for (auto& l : convs) l.enable_sn();
      h_real.enable_sn();
      psi.enable_sn();
      if (c.head_aot) h_aot.enable_sn();
      if (c.head_rot) h_rot.enable_sn();
      if (c.head_shuffle) h_shuf.enable_sn();
    }
  }

  const DiscCfg& cfg() const override { return c; }
  const std::vector<std::pair<std::string, Shape>>& last_shapes() const override { return shapes_; }

  DiscOut forward(Tape& t, Var x, const std::vector<int>& labels, const PassCtx& ctx) override {
    check_input("d.input", x.shape(), c);
    check_disc_labels(c, labels, x.shape()[0]);
    shapes_.clear();
    Var h = noises[0].forward(t, x, ctx);
    for (int i = 0; i < s; ++i) {
      h = convs[static_cast<size_t>(i)].forward(t, h, ctx);
      if (i > 0) h = bns[static_cast<size_t>(i - 1)].forward(t, h, ctx);
      h = noises[static_cast<size_t>(i + 1)].forward(t, h, ctx);
      h = lrelu(h, 0.2);
      shapes_.emplace_back("d.conv" + std::to_string(i + 1), h.shape());
    }
    int64_t n = x.shape()[0];
    Var flat = reshape(h, {n, flat_dim});
    shapes_.emplace_back("d.flatten", flat.shape());
    DiscOut o;
    if (c.categorical) {
      o.phi = mean_keep_nc(h);
      o.realism = projection_score(t, psi, emb, o.phi, labels, ctx);
    } else {
      o.realism = reshape(h_real.forward(t, flat, ctx), {n});
    }
    if (c.head_aot) o.aot = reshape(h_aot.forward(t, flat, ctx), {n});
    if (c.head_rot) o.rot = h_rot.forward(t, flat, ctx);
    if (c.head_shuffle) o.shuf = reshape(h_shuf.forward(t, flat, ctx), {n});
    return o;
  }

  std::vector<Param*> params() override {
    std::vector<Param*> o;
    for (auto& l : convs) l.params(o);
    for (auto& l : bns) l.params(o);
    h_real.params(o);
    if (c.head_aot) h_aot.params(o);
    if (c.head_rot) h_rot.params(o);
    if (c.head_shuffle) h_shuf.params(o);
    if (c.categorical) {
      psi.params(o);
      o.push_back(&emb);
    }
    return o;
  }
  NamedTensors state() const override {
    NamedTensors o;
    for (auto& l : convs) l.state(o);
    for (auto& l : bns) l.state(o);
    h_real.state(o);
    if (c.head_aot) h_aot.state(o);
    if (c.head_rot) h_rot.state(o);
    if (c.head_shuffle) h_shuf.state(o);
    if (c.categorical) {
      psi.state(o);
      o.emplace_back(emb.name, emb.value);
    }
    return o;
  }
  void load(const NamedTensors& in) override {
    size_t pos = 0;
    for (auto& l : convs) l.load(in, pos);
    for (auto& l : bns) l.load(in, pos);
    h_real.load(in, pos);
    if (c.head_aot) h_aot.load(in, pos);
    if (c.head_rot) h_rot.load(in, pos);
    if (c.head_shuffle) h_shuf.load(in, pos);
    if (c.categorical) {
      psi.load(in, pos);
      emb.value = take_tensor(in, pos, emb.name, emb.value.shape());
    }
    if (pos != in.size()) throw std::runtime_error("checkpoint has trailing tensors");
  }
};

// ---- Table-2 family ----
struct TganDisc final : ArrowDisc {
  DiscCfg c;
  int s;
  std::vector<Conv3dLayer> convs;
  std::vector<BatchNormLayer> bns;
  Conv3dLayer h_real, h_aot, h_rot, h_shuf;  // per-time-slice Conv2d heads
  LinearLayer psi;
  Param emb;
  int64_t tf = 0, feat_c = 0;
  std::vector<std::pair<std::string, Shape>> shapes_;

  TganDisc(const DiscCfg& cfg, uint64_t key) : c(cfg), s(spatial_stages(cfg.H)) {
    if (c.H != c.W) throw std::runtime_error("discriminator wants square frames");
    InitCtx init{key};
    int64_t tcur = c.T, cw = 3;
    for (int i = 0; i < s; ++i) {
      int64_t cout = divw(int64_t{64} << i, c.width_div), kt;
      int pt;
      clamp_kt_s2(tcur, kt, pt);
      convs.emplace_back("d.conv" + std::to_string(i + 1), cw, cout, std::array<int64_t, 3>{kt, 4, 4},
                         std::array<int, 3>{2, 2, 2}, std::array<int, 3>{pt, 1, 1}, init);
      if (i > 0) bns.emplace_back("d.bn" + std::to_string(i + 1), cout, init);
      tcur = out_s2(tcur, kt, pt);
      cw = cout;
    }
    tf = tcur;
    feat_c = cw;
    auto head = [&](const std::string& n, int64_t ch) {
      return Conv3dLayer(n, cw, ch, {1, 4, 4}, {1, 1, 1}, {0, 0, 0}, init);
    };
    h_real = head("d.real", 1);
    if (c.head_aot) h_aot = head("d.aot", 1);
    if (c.head_rot) h_rot = head("d.rot", 4);
    if (c.head_shuffle) h_shuf = head("d.shuf", 1);
    if (c.categorical) {
      psi = LinearLayer("d.psi", feat_c, 1, init);
      emb = Param("d.emb", init_normal({c.classes, feat_c}, 0.0, 0.02, init.next()));
      for (auto& l : convs) l.enable_sn();
      h_real.enable_sn();
      psi.enable_sn();
      if (c.head_aot) h_aot.enable_sn();
      if (c.head_rot) h_rot.enable_sn();
      if (c.head_shuffle) h_shuf.enable_sn();
    }
  }

  const DiscCfg& cfg() const override { return c; }
  const std::vector<std::pair<std::string, Shape>>& last_shapes() const override { return shapes_; }

  DiscOut forward(Tape& t, Var x, const std::vector<int>& labels, const PassCtx& ctx) override {
    check_input("d.input", x.shape(), c);
    check_disc_labels(c, labels, x.shape()[0]);
    shapes_.clear();
    Var h = x;
    for (int i = 0; i < s; ++i) {
      h = convs[static_cast<size_t>(i)].forward(t, h, ctx);
      if (i > 0) h = bns[static_cast<size_t>(i - 1)].forward(t, h, ctx);
      h = lrelu(h, 0.2);
      shapes_.emplace_back("d.conv" + std::to_string(i + 1), h.shape());
    }
    int64_t n = x.shape()[0];
    DiscOut o;
    // {N,1,tf,1,1} -> per-slice scores {N,tf}, mean-reduced per sample
    auto slice_head = [&](Conv3dLayer& head) {
      Var m = reshape(head.forward(t, h, ctx), {n, tf});
      return m;
    };
    if (c.categorical) {
      o.phi = mean_keep_nc(h);
      o.realism_map = slice_head(h_real);
      o.realism = projection_score(t, psi, emb, o.phi, labels, ctx);
    } else {
      o.realism_map = slice_head(h_real);
      o.realism = mean_samples(o.realism_map);
    }
    shapes_.emplace_back("d.real", o.realism_map.shape());
    if (c.head_aot) {
      o.aot_map = slice_head(h_aot);
      o.aot = mean_samples(o.aot_map);
      shapes_.emplace_back("d.aot", o.aot_map.shape());
    }
    if (c.head_rot) o.rot = mean_keep_nc(h_rot.forward(t, h, ctx));
    if (c.head_shuffle) o.shuf = mean_samples(reshape(h_shuf.forward(t, h, ctx), {n, tf}));
    return o;
  }

  std::vector<Param*> params() override {
    std::vector<Param*> o;
    for (auto& l : convs) l.params(o);
    for (auto& l : bns) l.params(o);
    h_real.params(o);
    if (c.head_aot) h_aot.params(o);
    if (c.head_rot) h_rot.params(o);
    if (c.head_shuffle) h_shuf.params(o);
    if (c.categorical) {
      psi.params(o);
      o.push_back(&emb);
    }
    return o;
  }
  NamedTensors state() const override {
    NamedTensors o;
    for (auto& l : convs) l.state(o);
    for (auto& l : bns) l.state(o);
    h_real.state(o);
    if (c.head_aot) h_aot.state(o);
    if (c.head_rot) h_rot.state(o);
    if (c.head_shuffle) h_shuf.state(o);
    if (c.categorical) {
      psi.state(o);
      o.emplace_back(emb.name, emb.value);
    }
    return o;
  }
  void load(const NamedTensors& in) override {
    size_t pos = 0;
    for (auto& l : convs) l.load(in, pos);
    for (auto& l : bns) l.load(in, pos);
    h_real.load(in, pos);
    if (c.head_aot) h_aot.load(in, pos);
    if (c.head_rot) h_rot.load(in, pos);
    if (c.head_shuffle) h_shuf.load(in, pos);
    if (c.categorical) {
      psi.load(in, pos);
      emb.value = take_tensor(in, pos, emb.name, emb.value.shape());
    }
    if (pos != in.size()) throw std::runtime_error("checkpoint has trailing tensors");
  }
};

// ---- Table-3 family ----
struct MocoDisc final : ArrowDisc {
  DiscCfg c;
  static constexpr int kStages = 3;
  std::vector<Conv3dLayer> convs;
  std::vector<BatchNormLayer> bns;
  std::vector<NoiseLayer> noises;
  Conv3dLayer h_real, h_aot, h_rot, h_shuf;
  LinearLayer psi;
  Param emb;
  int64_t feat_c = 0;
  std::vector<std::pair<std::string, Shape>> shapes_;

  // spatial kernel clamp mirroring the temporal one (stride 2, pad 1 kept)
  static int64_t ks_of(int64_t hcur) { return hcur + 2 < 4 ? hcur + 2 : 4; }

  MocoDisc(const DiscCfg& cfg, uint64_t key) : c(cfg) {
    if (c.H != c.W) throw std::runtime_error("discriminator wants square frames");
    if (spatial_stages(c.H) < 1) throw std::runtime_error("resolution too small");
    InitCtx init{key};
    int64_t tcur = c.T, hcur = c.H, cw = 3;
    for (int i = 0; i < kStages; ++i) {
      int64_t cout = divw(int64_t{64} << i, c.width_div);
      int64_t kt = tcur < 4 ? tcur : 4;
      int64_t ks = ks_of(hcur);
      noises.emplace_back(c.noise_weight, static_cast<uint64_t>(i));
      convs.emplace_back("d.conv" + std::to_string(i + 1), cw, cout, std::array<int64_t, 3>{kt, ks, ks},
                         std::array<int, 3>{1, 2, 2}, std::array<int, 3>{0, 1, 1}, init);
      if (i > 0) bns.emplace_back("d.bn" + std::to_string(i + 1), cout, init);
      tcur = tcur - kt + 1;
      hcur = (hcur + 2 - ks) / 2 + 1;
      cw = cout;
    }
    feat_c = cw;
    int64_t kt = tcur < 4 ? tcur : 4;
    int64_t ks = ks_of(hcur);
    auto head = [&](const std::string& n, int64_t ch) {
      return Conv3dLayer(n, cw, ch, {kt, ks, ks}, {1, 2, 2}, {0, 1, 1}, init);
    };
    h_real = head("d.real", 1);
    if (c.head_aot) h_aot = head("d.aot", 1);
    if (c.head_rot) h_rot = head("d.rot", 4);
    if (c.head_shuffle) h_shuf = head("d.shuf", 1);
    if (c.categorical) {
      psi = LinearLayer("d.psi", feat_c, 1, init);
      emb = Param("d.emb", init_normal({c.classes, feat_c}, 0.0, 0.02, init.next()));
      for (auto& l : convs) l.enable_sn();
      h_real.enable_sn();
      psi.enable_sn();
      if (c.head_aot) h_aot.enable_sn();
      if (c.head_rot) h_rot.enable_sn();
      if (c.head_shuffle) h_shuf.enable_sn();
    }
  }

  const DiscCfg& cfg() const override { return c; }
  const std::vector<std::pair<std::string, Shape>>& last_shapes() const override { return shapes_; }

  DiscOut forward(Tape& t, Var x, const std::vector<int>& labels, const PassCtx& ctx) override {
    check_input("d.input", x.shape(), c);
    check_disc_labels(c, labels, x.shape()[0]);
    shapes_.clear();
    Var h = x;
    for (int i = 0; i < kStages; ++i) {
      h = noises[static_cast<size_t>(i)].forward(t, h, ctx);
      h = convs[static_cast<size_t>(i)].forward(t, h, ctx);
      if (i > 0) h = bns[static_cast<size_t>(i - 1)].forward(t, h, ctx);
      h = lrelu(h, 0.2);
      shapes_.emplace_back("d.conv" + std::to_string(i + 1), h.shape());
    }
    DiscOut o;
    if (c.categorical) {
      o.phi = mean_keep_nc(h);
      o.realism_map = h_real.forward(t, h, ctx);
      o.realism = projection_score(t, psi, emb, o.phi, labels, ctx);
    } else {
      o.realism_map = h_real.forward(t, h, ctx);
      o.realism = mean_samples(o.realism_map);
    }
    shapes_.emplace_back("d.real", o.realism_map.shape());
    if (c.head_aot) {
      o.aot_map = h_aot.forward(t, h, ctx);
      o.aot = mean_samples(o.aot_map);
      shapes_.emplace_back("d.aot", o.aot_map.shape());
    }
    if (c.head_rot) o.rot = mean_keep_nc(h_rot.forward(t, h, ctx));
    if (c.head_shuffle) o.shuf = mean_samples(h_shuf.forward(t, h, ctx));
    return o;
  }

  std::vector<Param*> params() override {
    std::vector<Param*> o;
    for (auto& l : convs) l.params(o);
    for (auto& l : bns) l.params(o);
    h_real.params(o);
    if (c.head_aot) h_aot.params(o);
    if (c.head_rot) h_rot.params(o);
    if (c.head_shuffle) h_shuf.params(o);
    if (c.categorical) {
      psi.params(o);
      o.push_back(&emb);
    }
    return o;
  }
  NamedTensors state() const override {
    NamedTensors o;
    for (auto& l : convs) l.state(o);
    for (auto& l : bns) l.state(o);
    h_real.state(o);
    if (c.head_aot) h_aot.state(o);
    if (c.head_rot) h_rot.state(o);
    if (c.head_shuffle) h_shuf.state(o);
    if (c.categorical) {
      psi.state(o);
      o.emplace_back(emb.name, emb.value);
    }
    return o;
  }
  void load(const NamedTensors& in) override {
    size_t pos = 0;
    for (auto& l : convs) l.load(in, pos);
    for (auto& l : bns) l.load(in, pos);
    h_real.load(in, pos);
    if (c.head_aot) h_aot.load(in, pos);
    if (c.head_rot) h_rot.load(in, pos);
    if (c.head_shuffle) h_shuf.load(in, pos);
    if (c.categorical) {
      psi.load(in, pos);
      emb.value = take_tensor(in, pos, emb.name, emb.value.shape());
    }
    if (pos != in.size()) throw std::runtime_error("checkpoint has trailing tensors");
  }
};

}  // namespace

Var projection_score(Tape& t, LinearLayer& psi, Param& emb, Var phi, const std::vector<int>& labels,
                     const PassCtx& ctx) {
  if (phi.shape().size() != 2 || phi.shape()[1] != emb.value.shape()[1])
    throw std::runtime_error("projection_score: feature dim " + shape_str(phi.shape()) +
                             " does not match embedding " + shape_str(emb.value.shape()));
  Var base = reshape(psi.forward(t, phi, ctx), {phi.shape()[0]});
  Var e = select_rows(t.leaf(emb, ctx.trainable), labels);
  return add(base, sum_samples(mul(e, phi)));
}

std::unique_ptr<ArrowDisc> make_discriminator(const DiscCfg& cfg, uint64_t init_key) {
  if (cfg.categorical && cfg.classes < 2)
    throw std::runtime_error("categorical discriminator needs classes >= 2");
  switch (cfg.family) {
    case Family::vgan: return std::make_unique<VganDisc>(cfg, init_key);
    case Family::tgan: return std::make_unique<TganDisc>(cfg, init_key);
    case Family::moco: return std::make_unique<MocoDisc>(cfg, init_key);
  }
  throw std::runtime_error("unknown family");
}

// ---- frame discriminator ----

FrameDisc::FrameDisc(int64_t h, int64_t w, int64_t width_div, uint64_t init_key, bool with_rot)
    : H(h), W(w), head_rot(with_rot) {
  if (h != w) throw std::runtime_error("frame discriminator wants square frames");
  int s = spatial_stages(h);
  InitCtx init{init_key};
  int64_t cw = 3;
  for (int i = 0; i < s; ++i) {
    int64_t cout = divw(int64_t{64} << i, width_div);
    convs.emplace_back("fd.conv" + std::to_string(i + 1), cw, cout, std::array<int64_t, 2>{4, 4},
                       std::array<int, 2>{2, 2}, std::array<int, 2>{1, 1}, init);
    if (i > 0) bns.emplace_back("fd.bn" + std::to_string(i + 1), cout, init);
    cw = cout;
  }
  out_conv = Conv2dLayer("fd.out", cw, 1, {3, 3}, {1, 1}, {1, 1}, init);
  if (head_rot) rot_conv = Conv2dLayer("fd.rot", cw, 4, {3, 3}, {1, 1}, {1, 1}, init);
}

Var FrameDisc::trunk(Tape& t, Var frames, const PassCtx& ctx) {
  const Shape& s = frames.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != H || s[3] != W)
    throw std::runtime_error("fd.input: expected {N,3," + std::to_string(H) + "," + std::to_string(W) +
                             "}, got " + shape_str(s));
  Var h = frames;
  for (size_t i = 0; i < convs.size(); ++i) {
    h = convs[i].forward(t, h, ctx);
    if (i > 0) h = bns[i - 1].forward(t, h, ctx);
    h = lrelu(h, 0.2);
  }
  return h;
}

Var FrameDisc::forward_map(Tape& t, Var frames, const PassCtx& ctx) {
  return out_conv.forward(t, trunk(t, frames, ctx), ctx);
}

Var FrameDisc::forward(Tape& t, Var frames, const PassCtx& ctx) {
  return mean_samples(forward_map(t, frames, ctx));
}

Var FrameDisc::forward_rot(Tape& t, Var frames, const PassCtx& ctx) {
  if (!head_rot) throw std::runtime_error("frame discriminator was built without a rotation head");
  Var m = rot_conv.forward(t, trunk(t, frames, ctx), ctx);  // {N,4,h',w'}
  const Shape& s = m.shape();
  return mulc(nc_sum(m), 1.0 / static_cast<double>(s[2] * s[3]));
}

std::vector<Param*> FrameDisc::params() {
  std::vector<Param*> o;
  for (auto& l : convs) l.params(o);
  for (auto& l : bns) l.params(o);
  out_conv.params(o);
  if (head_rot) rot_conv.params(o);
  return o;
}

NamedTensors FrameDisc::state() const {
  NamedTensors o;
  for (auto& l : convs) l.state(o);
  for (auto& l : bns) l.state(o);
  out_conv.state(o);
  if (head_rot) rot_conv.state(o);
  return o;
}

void FrameDisc::load(const NamedTensors& in) {
  size_t pos = 0;
  for (auto& l : convs) l.load(in, pos);
  for (auto& l : bns) l.load(in, pos);
  out_conv.load(in, pos);
  if (head_rot) rot_conv.load(in, pos);
  if (pos != in.size()) throw std::runtime_error("checkpoint has trailing tensors");
}

}  // namespace arrowvid
