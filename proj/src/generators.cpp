#include "arrowvid/generators.hpp"

#include <stdexcept>

namespace arrowvid {

std::string family_name(Family f) {
  switch (f) {
    case Family::vgan: return "vgan";
    case Family::tgan: return "tgan";
    case Family::moco: return "moco";
  }
  throw std::runtime_error("unknown family");
}

Family family_from_string(const std::string& s) {
  if (s == "vgan" || s == "vgan_two_stream") return Family::vgan;
  if (s == "tgan" || s == "tgan_temporal_image") return Family::tgan;
  if (s == "moco" || s == "moco_gru" || s == "mocogan") return Family::moco;
  throw std::runtime_error("unknown generator family: " + s);
}

int spatial_stages(int64_t h) {
  int64_t cur = 4;
  int k = 0;
  while (cur < h) {
    cur *= 2;
    ++k;
  }
  if (cur != h || k < 1)
    throw std::runtime_error("resolution must be 4*2^k with k >= 1, got " + std::to_string(h));
  return k;
}

int64_t divw(int64_t w, int64_t div) {
  int64_t v = w / (div > 0 ? div : 1);
  return v < 4 ? 4 : v;
}

static std::vector<int> repeat_labels(const std::vector<int>& l, int64_t reps) {
  std::vector<int> out;
  out.reserve(l.size() * static_cast<size_t>(reps));
  for (int v : l)
    for (int64_t r = 0; r < reps; ++r) out.push_back(v);
  return out;
}

static void check_labels(const GenCfg& c, const std::vector<int>& labels, int64_t n) {
  if (c.categorical) {
    if (static_cast<int64_t>(labels.size()) != n)
      throw std::runtime_error("categorical generator needs one class label per sample");
  } else if (!labels.empty()) {
    throw std::runtime_error("unconditional generator got class labels");
  }
}

// Shared 2D frame renderer: latent row -> {rows,3,H,W}.  Unconditional: BN
// after the projection and every hidden deconv; conditional: CBN before every
// deconv (final included).
namespace {
struct ImageGen {
  int s = 0;
  int64_t c0 = 0;
  bool cond = false;
  LinearLayer lin;
  std::vector<TConv2dLayer> up;
  TConv2dLayer out_conv;
  std::vector<BatchNormLayer> bn;
  std::vector<CondBatchNormLayer> cbn;

  ImageGen() = default;
  ImageGen(const std::string& p, int64_t in_dim, int64_t h, int64_t div, bool cond_, int64_t classes,
           InitCtx& init)
      : s(spatial_stages(h)), cond(cond_) {
    std::vector<int64_t> ch(static_cast<size_t>(s));
    for (int i = 0; i < s; ++i) ch[static_cast<size_t>(i)] = divw(int64_t{64} << (s - 1 - i), div);
    c0 = ch[0];
    lin = LinearLayer(p + ".lin", in_dim, c0 * 16, init);
    for (int i = 0; i + 1 < s; ++i)
      up.emplace_back(p + ".up" + std::to_string(i), ch[static_cast<size_t>(i)],
                      ch[static_cast<size_t>(i + 1)], std::array<int64_t, 2>{4, 4},
                      std::array<int, 2>{2, 2}, std::array<int, 2>{1, 1}, init);
    out_conv = TConv2dLayer(p + ".out", ch[static_cast<size_t>(s - 1)], 3, {4, 4}, {2, 2}, {1, 1}, init);
    if (cond) {
      for (int i = 0; i + 1 < s; ++i)
        cbn.emplace_back(p + ".cbn" + std::to_string(i), classes, ch[static_cast<size_t>(i)], init);
      cbn.emplace_back(p + ".cbn" + std::to_string(s - 1), classes, ch[static_cast<size_t>(s - 1)], init);
    } else {
      bn.emplace_back(p + ".bn0", c0, init);
      for (int i = 0; i + 1 < s; ++i) bn.emplace_back(p + ".bn" + std::to_string(i + 1), ch[static_cast<size_t>(i + 1)], init);
    }
  }

  Var forward(Tape& t, Var z2, const std::vector<int>& row_labels, const PassCtx& ctx) {
    int64_t rows = z2.shape()[0];
    Var h = reshape(lin.forward(t, z2, ctx), {rows, c0, 4, 4});
    if (!cond) {
      h = relu_(bn[0].forward(t, h, ctx));
      for (size_t i = 0; i < up.size(); ++i) h = relu_(bn[i + 1].forward(t, up[i].forward(t, h, ctx), ctx));
      return tanh_(out_conv.forward(t, h, ctx));
    }
    h = relu_(h);
    for (size_t i = 0; i < up.size(); ++i)
      h = relu_(up[i].forward(t, cbn[i].forward(t, h, row_labels, ctx), ctx));
    return tanh_(out_conv.forward(t, cbn.back().forward(t, h, row_labels, ctx), ctx));
  }

  void params(std::vector<Param*>& o) {
    lin.params(o);
    for (auto& l : up) l.params(o);
    out_conv.params(o);
    for (auto& l : bn) l.params(o);
    for (auto& l : cbn) l.params(o);
  }
  void state(NamedTensors& o) const {
    lin.state(o);
    for (auto& l : up) l.state(o);
    out_conv.state(o);
    for (auto& l : bn) l.state(o);
    for (auto& l : cbn) l.state(o);
  }
  void load(const NamedTensors& in, size_t& pos) {
    lin.load(in, pos);
    for (auto& l : up) l.load(in, pos);
    out_conv.load(in, pos);
    for (auto& l : bn) l.load(in, pos);
    for (auto& l : cbn) l.load(in, pos);
  }
};

// {rows,3,H,W} with rows = n*T (frame-major within sample) -> {N,3,T,H,W}
Var fold_frames(Var y, int64_t n, int64_t T) {
  const Shape& s = y.shape();
  return permute(reshape(y, {n, T, s[1], s[2], s[3]}), {0, 2, 1, 3, 4});
}

// ---- two-stream generator ----
struct VganGen final : Generator {
  GenCfg c;
  int s;
  int64_t T0, c0;
  LinearLayer fg_lin, bg_lin;
  std::vector<TConv3dLayer> fg_up;
  TConv3dLayer fg_out, fg_mask;
  std::vector<TConv2dLayer> bg_up;
  TConv2dLayer bg_out;
  std::vector<BatchNormLayer> fg_bn, bg_bn;
  std::vector<CondBatchNormLayer> fg_cbn, bg_cbn;

  VganGen(const GenCfg& cfg, uint64_t key) : c(cfg), s(spatial_stages(cfg.H)) {
    if (c.H != c.W) throw std::runtime_error("generator wants square frames");
    T0 = c.T >> s;
    if (T0 < 1 || (T0 << s) != c.T)
      throw std::runtime_error("vgan generator needs T divisible by 2^" + std::to_string(s));
    InitCtx init{key};
    std::vector<int64_t> ch(static_cast<size_t>(s));
    for (int i = 0; i < s; ++i) ch[static_cast<size_t>(i)] = divw(int64_t{64} << (s - 1 - i), c.width_div);
    c0 = ch[0];
    fg_lin = LinearLayer("g.fg.lin", c.latent, c0 * T0 * 16, init);
    bg_lin = LinearLayer("g.bg.lin", c.latent, c0 * 16, init);
    for (int i = 0; i + 1 < s; ++i) {
      fg_up.emplace_back("g.fg.up" + std::to_string(i), ch[static_cast<size_t>(i)], ch[static_cast<size_t>(i + 1)],
                         std::array<int64_t, 3>{4, 4, 4}, std::array<int, 3>{2, 2, 2},
                         std::array<int, 3>{1, 1, 1}, init);
      bg_up.emplace_back("g.bg.up" + std::to_string(i), ch[static_cast<size_t>(i)], ch[static_cast<size_t>(i + 1)],
                         std::array<int64_t, 2>{4, 4}, std::array<int, 2>{2, 2}, std::array<int, 2>{1, 1},
                         init);
    }
    fg_out = TConv3dLayer("g.fg.out", ch.back(), 3, {4, 4, 4}, {2, 2, 2}, {1, 1, 1}, init);
    fg_mask = TConv3dLayer("g.fg.mask", ch.back(), 1, {4, 4, 4}, {2, 2, 2}, {1, 1, 1}, init);
    bg_out = TConv2dLayer("g.bg.out", ch.back(), 3, {4, 4}, {2, 2}, {1, 1}, init);
    if (c.categorical) {
      for (int i = 0; i < s; ++i) {
        fg_cbn.emplace_back("g.fg.cbn" + std::to_string(i), c.classes, ch[static_cast<size_t>(i)], init);
        bg_cbn.emplace_back("g.bg.cbn" + std::to_string(i), c.classes, ch[static_cast<size_t>(i)], init);
      }
    } else {
      for (int i = 0; i < s; ++i) {
        fg_bn.emplace_back("g.fg.bn" + std::to_string(i), ch[static_cast<size_t>(i)], init);
        bg_bn.emplace_back("g.bg.bn" + std::to_string(i), ch[static_cast<size_t>(i)], init);
      }
    }
  }

  int64_t latent_dim() const override { return c.latent; }
  const GenCfg& cfg() const override { return c; }

  Var forward(Tape& t, Var z, const std::vector<int>& labels, const PassCtx& ctx) override {
    int64_t n = z.shape()[0];
    if (z.shape().size() != 2 || z.shape()[1] != c.latent)
      throw std::runtime_error("g.fg.lin: expected latent {N," + std::to_string(c.latent) + "}, got " +
                               shape_str(z.shape()));
    check_labels(c, labels, n);

    Var h = reshape(fg_lin.forward(t, z, ctx), {n, c0, T0, 4, 4});
    Var f, m;
    if (!c.categorical) {
      h = relu_(fg_bn[0].forward(t, h, ctx));
      for (size_t i = 0; i < fg_up.size(); ++i)
        h = relu_(fg_bn[i + 1].forward(t, fg_up[i].forward(t, h, ctx), ctx));
      f = tanh_(fg_out.forward(t, h, ctx));
      m = sigmoid_(fg_mask.forward(t, h, ctx));
    } else {
      h = relu_(h);
      for (size_t i = 0; i < fg_up.size(); ++i)
        h = relu_(fg_up[i].forward(t, fg_cbn[i].forward(t, h, labels, ctx), ctx));
      Var hc = fg_cbn.back().forward(t, h, labels, ctx);
      f = tanh_(fg_out.forward(t, hc, ctx));
      m = sigmoid_(fg_mask.forward(t, hc, ctx));
    }

    Var b = reshape(bg_lin.forward(t, z, ctx), {n, c0, 4, 4});
    if (!c.categorical) {
      b = relu_(bg_bn[0].forward(t, b, ctx));
      for (size_t i = 0; i < bg_up.size(); ++i)
        b = relu_(bg_bn[i + 1].forward(t, bg_up[i].forward(t, b, ctx), ctx));
      b = tanh_(bg_out.forward(t, b, ctx));
    } else {
      b = relu_(b);
      for (size_t i = 0; i < bg_up.size(); ++i)
        b = relu_(bg_up[i].forward(t, bg_cbn[i].forward(t, b, labels, ctx), ctx));
      b = tanh_(bg_out.forward(t, bg_cbn.back().forward(t, b, labels, ctx), ctx));
    }

    Var m3 = concat({m, m, m}, 1);
    std::vector<Var> reps(static_cast<size_t>(c.T), reshape(b, {n, 3, 1, c.H, c.W}));
    Var bt = concat(reps, 2);
    return add(mul(m3, f), mul(addc(neg(m3), 1.0), bt));
  }

  std::vector<Param*> params() override {
    std::vector<Param*> o;
    fg_lin.params(o);
    bg_lin.params(o);
    for (auto& l : fg_up) l.params(o);
    fg_out.params(o);
    fg_mask.params(o);
    for (auto& l : bg_up) l.params(o);
    bg_out.params(o);
    for (auto& l : fg_bn) l.params(o);
    for (auto& l : bg_bn) l.params(o);
    for (auto& l : fg_cbn) l.params(o);
    for (auto& l : bg_cbn) l.params(o);
    return o;
  }
  NamedTensors state() const override {
    NamedTensors o;
    fg_lin.state(o);
    bg_lin.state(o);
    for (auto& l : fg_up) l.state(o);
    fg_out.state(o);
    fg_mask.state(o);
    for (auto& l : bg_up) l.state(o);
    bg_out.state(o);
    for (auto& l : fg_bn) l.state(o);
    for (auto& l : bg_bn) l.state(o);
    for (auto& l : fg_cbn) l.state(o);
    for (auto& l : bg_cbn) l.state(o);
    return o;
  }
  void load(const NamedTensors& in) override {
    size_t pos = 0;
    fg_lin.load(in, pos);
    bg_lin.load(in, pos);
    for (auto& l : fg_up) l.load(in, pos);
    fg_out.load(in, pos);
    fg_mask.load(in, pos);
    for (auto& l : bg_up) l.load(in, pos);
    bg_out.load(in, pos);
    for (auto& l : fg_bn) l.load(in, pos);
    for (auto& l : bg_bn) l.load(in, pos);
    for (auto& l : fg_cbn) l.load(in, pos);
    for (auto& l : bg_cbn) l.load(in, pos);
    if (pos != in.size()) throw std::runtime_error("checkpoint has trailing tensors");
  }
};

// ---- temporal + image generator ----
struct TganGen final : Generator {
  GenCfg c;
  int st;
  std::vector<TConv1dLayer> t_up;
  std::vector<BatchNormLayer> t_bn;
  std::vector<CondBatchNormLayer> t_cbn;
  ImageGen img;

  TganGen(const GenCfg& cfg, uint64_t key) : c(cfg) {
    if (c.H != c.W) throw std::runtime_error("generator wants square frames");
    int64_t cur = 1;
    st = 0;
    while (cur < c.T) {
      cur *= 2;
      ++st;
    }
    if (cur != c.T || st < 1) throw std::runtime_error("tgan generator needs T = 2^k, k >= 1");
    InitCtx init{key};
    int64_t in_w = c.latent;
    for (int j = 0; j < st; ++j) {
      int64_t out_w = (j == st - 1) ? c.latent : divw(std::max<int64_t>(128, int64_t{512} >> j), c.width_div);
      t_up.emplace_back("g.t.up" + std::to_string(j), in_w, out_w, 4, 2, 1, init);
      if (c.categorical)
        t_cbn.emplace_back("g.t.cbn" + std::to_string(j), c.classes, in_w, init);
      else if (j + 1 < st)
        t_bn.emplace_back("g.t.bn" + std::to_string(j), out_w, init);
      in_w = out_w;
    }
    img = ImageGen("g.img", 2 * c.latent, c.H, c.width_div, c.categorical, c.classes, init);
  }

  int64_t latent_dim() const override { return c.latent; }
  const GenCfg& cfg() const override { return c; }

  Var forward(Tape& t, Var z, const std::vector<int>& labels, const PassCtx& ctx) override {
    int64_t n = z.shape()[0];
    if (z.shape().size() != 2 || z.shape()[1] != c.latent)
      throw std::runtime_error("g.t.up0: expected latent {N," + std::to_string(c.latent) + "}, got " +
                               shape_str(z.shape()));
    check_labels(c, labels, n);
    Var u = reshape(z, {n, c.latent, 1});
    for (int j = 0; j < st; ++j) {
      if (c.categorical) u = t_cbn[static_cast<size_t>(j)].forward(t, u, labels, ctx);
      u = t_up[static_cast<size_t>(j)].forward(t, u, ctx);
      if (j + 1 < st)
        u = relu_(c.categorical ? u : t_bn[static_cast<size_t>(j)].forward(t, u, ctx));
      else
        u = tanh_(u);
    }
    // per-frame latents {N,T,L}; pair each with its sample's z0
    Var zf = reshape(permute(u, {0, 2, 1}), {n * c.T, c.latent});
    std::vector<Var> reps(static_cast<size_t>(c.T), reshape(z, {n, 1, c.latent}));
    Var z0 = reshape(concat(reps, 1), {n * c.T, c.latent});
    Var y = img.forward(t, concat({z0, zf}, 1), repeat_labels(labels, c.T), ctx);
    return fold_frames(y, n, c.T);
  }

  std::vector<Param*> params() override {
    std::vector<Param*> o;
    for (auto& l : t_up) l.params(o);
    for (auto& l : t_bn) l.params(o);
    for (auto& l : t_cbn) l.params(o);
    img.params(o);
    return o;
  }
  NamedTensors state() const override {
    NamedTensors o;
    for (auto& l : t_up) l.state(o);
    for (auto& l : t_bn) l.state(o);
    for (auto& l : t_cbn) l.state(o);
    img.state(o);
    return o;
  }
  void load(const NamedTensors& in) override {
    size_t pos = 0;
    for (auto& l : t_up) l.load(in, pos);
    for (auto& l : t_bn) l.load(in, pos);
    for (auto& l : t_cbn) l.load(in, pos);
    img.load(in, pos);
    if (pos != in.size()) throw std::runtime_error("checkpoint has trailing tensors");
  }
};

// ---- content + GRU motion generator ----
struct MocoGen final : Generator {
  GenCfg c;
  GRUCellLayer gru;
  ImageGen img;

  MocoGen(const GenCfg& cfg, uint64_t key) : c(cfg) {
    if (c.H != c.W) throw std::runtime_error("generator wants square frames");
    if (c.T < 1) throw std::runtime_error("moco generator needs T >= 1");
    InitCtx init{key};
    gru = GRUCellLayer("g.gru", c.moco_motion, c.moco_hidden, init);
    img = ImageGen("g.img", c.latent + c.moco_hidden, c.H, c.width_div, c.categorical, c.classes, init);
  }

  int64_t latent_dim() const override { return c.latent + c.T * c.moco_motion; }
  const GenCfg& cfg() const override { return c; }

  Var forward(Tape& t, Var z, const std::vector<int>& labels, const PassCtx& ctx) override {
    int64_t n = z.shape()[0];
    if (z.shape().size() != 2 || z.shape()[1] != latent_dim())
      throw std::runtime_error("g.gru: expected latent {N," + std::to_string(latent_dim()) + "}, got " +
                               shape_str(z.shape()));
    check_labels(c, labels, n);
    Var zc = narrow(z, 1, 0, c.latent);
    Var h = t.constant(Tensor({n, c.moco_hidden}));
    std::vector<Var> lat;
    lat.reserve(static_cast<size_t>(c.T));
    for (int64_t tt = 0; tt < c.T; ++tt) {
      Var eps = narrow(z, 1, c.latent + tt * c.moco_motion, c.moco_motion);
      h = gru.forward(t, eps, h, ctx);
      lat.push_back(reshape(concat({zc, h}, 1), {n, 1, c.latent + c.moco_hidden}));
    }
    Var rows = reshape(concat(lat, 1), {n * c.T, c.latent + c.moco_hidden});
    Var y = img.forward(t, rows, repeat_labels(labels, c.T), ctx);
    return fold_frames(y, n, c.T);
  }

  std::vector<Param*> params() override {
    std::vector<Param*> o;
    gru.params(o);
    img.params(o);
    return o;
  }
  NamedTensors state() const override {
    NamedTensors o;
    gru.state(o);
    img.state(o);
    return o;
  }
  void load(const NamedTensors& in) override {
    size_t pos = 0;
    gru.load(in, pos);
    img.load(in, pos);
    if (pos != in.size()) throw std::runtime_error("checkpoint has trailing tensors");
  }
};
}  // namespace

std::unique_ptr<Generator> make_generator(const GenCfg& cfg, uint64_t init_key) {
  if (cfg.categorical && cfg.classes < 2)
    throw std::runtime_error("categorical generator needs classes >= 2");
  switch (cfg.family) {
    case Family::vgan: return std::make_unique<VganGen>(cfg, init_key);
    case Family::tgan: return std::make_unique<TganGen>(cfg, init_key);
    case Family::moco: return std::make_unique<MocoGen>(cfg, init_key);
  }
  throw std::runtime_error("unknown family");
}

}  // namespace arrowvid
