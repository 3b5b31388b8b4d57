#include "arrowvid/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "arrowvid/tensor_file.hpp"

namespace arrowvid {

namespace {

int64_t divw(int64_t c, int64_t div) { return std::max<int64_t>(4, c / div); }

int spatial_stages(int64_t hw) {
  if (hw < 8 || (hw & (hw - 1)) != 0)
    throw std::runtime_error("extractor: spatial size must be a power of two >= 8, got " +
                             std::to_string(hw));
  int s = 0;
  while (hw > 4) {
    hw /= 2;
    ++s;
  }
  return s;
}

uint64_t hash_doubles(uint64_t h, const Tensor& t) {
  for (int64_t i = 0; i < t.numel(); ++i)
    h = mix64(h ^ std::bit_cast<uint64_t>(t.data()[i]));
  return h;
}

std::string hex64(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Tensor string_tensor(const std::string& s) {
  Tensor t(Shape{std::max<int64_t>(1, static_cast<int64_t>(s.size()))});
  for (size_t i = 0; i < s.size(); ++i) t.data()[i] = static_cast<double>(static_cast<uint8_t>(s[i]));
  return t;
}

std::string tensor_string(const Tensor& t) {
  std::string s;
  for (int64_t i = 0; i < t.numel(); ++i) {
    int c = static_cast<int>(t.data()[i]);
    if (c > 0) s.push_back(static_cast<char>(c));
  }
  return s;
}

}  // namespace

FeatureExtractor::FeatureExtractor(int64_t classes, int64_t clip_len, int64_t height, int64_t width,
                                   int64_t width_div, uint64_t seed)
    : classes_(classes), clip_len_(clip_len), height_(height), width_(width),
      width_div_(width_div), seed_(seed) {
  if (classes < 2) throw std::runtime_error("extractor: need at least 2 classes");
  if (height != width) throw std::runtime_error("extractor: frames must be square");
  int n_stages = spatial_stages(height);
  InitCtx init;
  init.key = key_from({seed, 0x4658ull});  // "FX"
  int64_t cin = 3, t_cur = clip_len;
  for (int i = 0; i < n_stages; ++i) {
    int64_t cout = divw(32ll << i, width_div);
    int64_t kt = std::min<int64_t>(4, t_cur);
    int pt = (kt == 4) ? 1 : 0;
    Stage st;
    st.conv = Conv3dLayer("fx.conv" + std::to_string(i), cin, cout, {kt, 4, 4}, {2, 2, 2},
                          {pt, 1, 1}, init);
    st.bn = BatchNormLayer("fx.bn" + std::to_string(i), cout, init);
    stages_.push_back(std::move(st));
    t_cur = (t_cur + 2 * pt - kt) / 2 + 1;
    cin = cout;
  }
  embed_dim_ = cin;
  head_ = LinearLayer("fx.head", embed_dim_, classes_, init);
  refresh_provenance();
}

std::pair<Var, Var> FeatureExtractor::forward(Tape& t, const Tensor& batch, const PassCtx& ctx) {
  if (batch.ndim() != 5 || batch.dim(1) != 3 || batch.dim(2) != clip_len_ ||
      batch.dim(3) != height_ || batch.dim(4) != width_)
    throw std::runtime_error("extractor: input " + shape_str(batch.shape()) + " does not match {N,3," +
                             std::to_string(clip_len_) + "," + std::to_string(height_) + "," +
                             std::to_string(width_) + "}");
  Var h = t.constant(batch);
  for (auto& st : stages_) {
    h = st.conv.forward(t, h, ctx);
    h = st.bn.forward(t, h, ctx);
    h = lrelu(h, 0.2);
  }
  const Shape& s = h.shape();
  double feat = static_cast<double>(s[2] * s[3] * s[4]);
  Var pooled = mulc(nc_sum(h), 1.0 / feat);  // global average pool -> {N,E}
  Var logits = head_.forward(t, pooled, ctx);
  return {logits, pooled};
}

Tensor FeatureExtractor::probabilities(const Tensor& batch) {
  Tape t;
  PassCtx ctx{false, false, 0};
  Tensor logits = forward(t, batch, ctx).first.val();
  int64_t n = logits.dim(0), k = logits.dim(1);
  Tensor probs(Shape{n, k});
  for (int64_t i = 0; i < n; ++i) {
    double mx = logits.at({i, 0});
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, logits.at({i, j}));
    double z = 0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(logits.at({i, j}) - mx);
    double sum = 0;
    for (int64_t j = 0; j < k; ++j) {
      probs.at({i, j}) = std::exp(logits.at({i, j}) - mx) / z;
      sum += probs.at({i, j});
    }
    if (std::fabs(sum - 1.0) > 1e-5)
      throw std::runtime_error("extractor: probability row does not sum to 1");
  }
  return probs;
}

Tensor FeatureExtractor::embeddings(const Tensor& batch) {
  Tape t;
  PassCtx ctx{false, false, 0};
  Tensor emb = forward(t, batch, ctx).second.val();
  if (!emb.all_finite()) throw std::runtime_error("extractor: non-finite embeddings");
  return emb;
}

double FeatureExtractor::train_batch(const Tensor& videos, const std::vector<int>& labels, Adam& opt) {
  if (static_cast<int64_t>(labels.size()) != videos.dim(0))
    throw std::runtime_error("extractor: labels/batch mismatch");
  for (int l : labels)
    if (l < 0 || l >= classes_)
      throw std::runtime_error("extractor: label " + std::to_string(l) + " out of range [0," +
                               std::to_string(classes_) + ")");
  Tape t;
  PassCtx ctx{true, true, 0};
  Var logits = forward(t, videos, ctx).first;
  Var loss = neg(mean_all(gather_cols(log_softmax(logits), labels)));
  double out = loss.val().data()[0];
  t.backward(loss);
  std::vector<Param*> ps = params();
  opt.step(ps);
  refresh_provenance();
  return out;
}

double FeatureExtractor::accuracy(const Tensor& videos, const std::vector<int>& labels) {
  Tensor probs = probabilities(videos);
  int64_t hits = 0;
  for (int64_t i = 0; i < probs.dim(0); ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < probs.dim(1); ++j)
      if (probs.at({i, j}) > probs.at({i, best})) best = j;
    if (best == labels[static_cast<size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(probs.dim(0));
}

std::vector<Param*> FeatureExtractor::params() {
  std::vector<Param*> out;
  for (auto& st : stages_) {
    st.conv.params(out);
    st.bn.params(out);
  }
  head_.params(out);
  return out;
}

void FeatureExtractor::set_corpus_tag(const std::string& tag) {
  corpus_tag_ = tag;
  refresh_provenance();
}

void FeatureExtractor::refresh_provenance() {
  NamedTensors st;
  for (const auto& s : stages_) {
    s.conv.state(st);
    s.bn.state(st);
  }
  head_.state(st);
  uint64_t h = 0x9e3779b97f4a7c15ull;
  for (const auto& [name, tensor] : st) {
    for (char c : name) h = mix64(h ^ static_cast<uint64_t>(static_cast<uint8_t>(c)));
    h = hash_doubles(h, tensor);
  }
  provenance_ = hex64(h) + "@" + corpus_tag_;
}

void FeatureExtractor::save(const std::string& path) const {
  NamedTensors st;
  Tensor meta(Shape{6});
  meta.data()[0] = static_cast<double>(classes_);
  meta.data()[1] = static_cast<double>(clip_len_);
  meta.data()[2] = static_cast<double>(height_);
  meta.data()[3] = static_cast<double>(width_);
  meta.data()[4] = static_cast<double>(width_div_);
  meta.data()[5] = static_cast<double>(seed_);
  st.emplace_back("fx.meta", std::move(meta));
  st.emplace_back("fx.corpus", string_tensor(corpus_tag_));
  for (const auto& s : stages_) {
    s.conv.state(st);
    s.bn.state(st);
  }
  head_.state(st);
  save_named_tensors(path, st);
}

FeatureExtractor FeatureExtractor::load(const std::string& path) {
  NamedTensors st = load_named_tensors(path);
  size_t pos = 0;
  Tensor meta = take_tensor(st, pos, "fx.meta", {6});
  std::string corpus;
  if (pos >= st.size() || st[pos].first != "fx.corpus")
    throw std::runtime_error("checkpoint truncated: missing fx.corpus");
  corpus = tensor_string(st[pos].second);
  ++pos;
  FeatureExtractor fx(static_cast<int64_t>(meta.data()[0]), static_cast<int64_t>(meta.data()[1]),
                      static_cast<int64_t>(meta.data()[2]), static_cast<int64_t>(meta.data()[3]),
                      static_cast<int64_t>(meta.data()[4]), static_cast<uint64_t>(meta.data()[5]));
  for (auto& s : fx.stages_) {
    s.conv.load(st, pos);
    s.bn.load(st, pos);
  }
  fx.head_.load(st, pos);
  fx.corpus_tag_ = corpus;
  fx.refresh_provenance();
  return fx;
}

namespace {

Tensor stack_center_windows(const DatasetManifest& m, const std::vector<size_t>& idx, int64_t T) {
  std::vector<VideoClip> windows;
  for (size_t i : idx) {
    VideoClip clip = load_clip(m.resolve(i));
    if (clip.frames() < T)
      throw std::runtime_error("clip " + m.entries[i].path + " shorter than evaluation window");
    int64_t start = (clip.frames() - T) / 2;
    int64_t C = clip.channels(), H = clip.height(), W = clip.width();
    Tensor w(Shape{T, C, H, W});
    std::copy(clip.data.data() + start * C * H * W, clip.data.data() + (start + T) * C * H * W,
              w.data());
    windows.emplace_back(std::move(w), clip.fps);
  }
  return clips_to_batch(windows);
}

}  // namespace

FeatureExtractor train_reference_classifier(const DatasetManifest& manifest,
                                            const ExtractorConfig& cfg) {
  validate_manifest(manifest);
  int k = manifest.num_classes();
  if (k < 2) throw std::runtime_error("reference classifier needs at least 2 classes");
  if (cfg.holdout_every < 2) throw std::runtime_error("holdout_every must be >= 2");

  DatasetManifest train_m, hold_m;
  train_m.root = hold_m.root = manifest.root;
  std::vector<size_t> hold_idx;
  for (size_t i = 0; i < manifest.entries.size(); ++i) {
    if (static_cast<int>(i % static_cast<size_t>(cfg.holdout_every)) == cfg.holdout_every - 1) {
      hold_m.entries.push_back(manifest.entries[i]);
      hold_idx.push_back(i);
    } else {
      train_m.entries.push_back(manifest.entries[i]);
    }
  }
  if (train_m.entries.empty() || hold_m.entries.empty())
    throw std::runtime_error("dataset too small to split for held-out accuracy");

  FeatureExtractor fx(k, cfg.clip_len, cfg.height, cfg.width, cfg.width_div, cfg.seed);
  Adam opt(cfg.lr, 0.5, 0.999);
  BatchCfg bc;
  bc.batch_size = cfg.batch;
  bc.clip_len = cfg.clip_len;
  bc.seed = cfg.seed;
  BatchIterator it(train_m, bc);  // throws if the split starves a class
  for (int e = 0; e < cfg.epochs; ++e) {
    it.begin_epoch(e);
    BatchIterator::Batch b;
    while (it.next(b)) fx.train_batch(b.video, b.labels, opt);
  }

  std::vector<size_t> all_hold(hold_m.entries.size());
  for (size_t i = 0; i < all_hold.size(); ++i) all_hold[i] = i;
  Tensor hold_videos = stack_center_windows(hold_m, all_hold, cfg.clip_len);
  std::vector<int> hold_labels;
  for (const auto& e : hold_m.entries) hold_labels.push_back(e.class_index);
  double acc = fx.accuracy(hold_videos, hold_labels);
  if (acc < cfg.target_accuracy) {
    char msg[160];
    std::snprintf(msg, sizeof(msg),
                  "reference classifier held-out accuracy %.3f below %.3f: train more epochs or "
                  "enlarge the dataset",
                  acc, cfg.target_accuracy);
    throw std::runtime_error(msg);
  }

  uint64_t ch = 0x517cc1b727220a95ull;
  for (const auto& e : manifest.entries) {
    for (char c : e.path) ch = mix64(ch ^ static_cast<uint64_t>(static_cast<uint8_t>(c)));
    ch = mix64(ch ^ static_cast<uint64_t>(e.class_index));
  }
  fx.set_corpus_tag(hex64(ch));
  return fx;
}

std::pair<double, double> inception_score_from_probs(const Tensor& probs, int splits) {
  if (probs.ndim() != 2) throw std::runtime_error("inception score: want {N,K} probabilities");
  int64_t n = probs.dim(0), k = probs.dim(1);
  if (splits < 1) throw std::runtime_error("inception score: split count must be positive");
  if (n < splits)
    throw std::runtime_error("inception score: fewer videos (" + std::to_string(n) +
                             ") than splits (" + std::to_string(splits) + ")");
  for (int64_t i = 0; i < n; ++i) {
    double sum = 0;
    for (int64_t j = 0; j < k; ++j) {
      double p = probs.at({i, j});
      if (p < -1e-12) throw std::runtime_error("inception score: negative probability");
      sum += p;
    }
    if (std::fabs(sum - 1.0) > 1e-5)
      throw std::runtime_error("inception score: row " + std::to_string(i) + " sums to " +
                               std::to_string(sum));
  }
  std::vector<double> scores;
  for (int s = 0; s < splits; ++s) {
    int64_t lo = n * s / splits, hi = n * (s + 1) / splits;
    std::vector<double> marginal(static_cast<size_t>(k), 0.0);
    for (int64_t i = lo; i < hi; ++i)
      for (int64_t j = 0; j < k; ++j) marginal[static_cast<size_t>(j)] += probs.at({i, j});
    for (double& m : marginal) m /= static_cast<double>(hi - lo);
    double mean_kl = 0;
    for (int64_t i = lo; i < hi; ++i) {
      double kl = 0;
      for (int64_t j = 0; j < k; ++j) {
        double p = probs.at({i, j});
        if (p > 0) kl += p * (std::log(p) - std::log(marginal[static_cast<size_t>(j)]));
      }
      mean_kl += kl;
    }
    mean_kl /= static_cast<double>(hi - lo);
    double score = std::exp(mean_kl);
    // information bounds: 1 <= IS <= K
    if (score < 1.0 - 1e-6 || score > static_cast<double>(k) + 1e-6)
      throw std::runtime_error("inception score " + std::to_string(score) +
                               " escaped its [1,K] bounds — corrupt probabilities");
    scores.push_back(std::clamp(score, 1.0, static_cast<double>(k)));
  }
  double mean = 0;
  for (double s : scores) mean += s;
  mean /= static_cast<double>(scores.size());
  double var = 0;
  for (double s : scores) var += (s - mean) * (s - mean);
  var /= static_cast<double>(scores.size());
  return {mean, std::sqrt(std::max(0.0, var))};
}

namespace {

Tensor batched_rows(const Tensor& videos, FeatureExtractor& ex, int64_t chunk, bool probs) {
  int64_t n = videos.dim(0);
  int64_t per = videos.numel() / n;
  Tensor out;
  std::vector<double> acc;
  int64_t cols = 0;
  for (int64_t lo = 0; lo < n; lo += chunk) {
    int64_t hi = std::min(n, lo + chunk);
    Shape s = videos.shape();
    s[0] = hi - lo;
    Tensor part(s);
    std::copy(videos.data() + lo * per, videos.data() + hi * per, part.data());
    Tensor r = probs ? ex.probabilities(part) : ex.embeddings(part);
    cols = r.dim(1);
    acc.insert(acc.end(), r.data(), r.data() + r.numel());
  }
  return Tensor(Shape{n, cols}, std::move(acc));
}

}  // namespace

std::pair<double, double> inception_score(const Tensor& videos, FeatureExtractor& ex, int splits) {
  return inception_score_from_probs(batched_rows(videos, ex, 16, true), splits);
}

double frechet_from_embeddings(const Tensor& emb_real, const Tensor& emb_fake) {
  if (emb_real.ndim() != 2 || emb_fake.ndim() != 2 || emb_real.dim(1) != emb_fake.dim(1))
    throw std::runtime_error("frechet distance: want {N,E} and {M,E} embeddings");
  if (!emb_real.all_finite() || !emb_fake.all_finite())
    throw std::runtime_error("frechet distance: non-finite embeddings");
  int64_t n = emb_real.dim(0), m = emb_fake.dim(0), e = emb_real.dim(1);
  if (n < 2 || m < 2) throw std::runtime_error("frechet distance: need at least 2 samples per side");
  if (n < e || m < e)
    std::cerr << "warning: frechet distance from fewer samples than embedding dims (" << n << "," << m
              << " vs " << e << ") — covariances are rank-deficient\n";

  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> X(emb_real.data(), n, e), Y(emb_fake.data(), m, e);
  Eigen::VectorXd mu_x = X.colwise().mean(), mu_y = Y.colwise().mean();
  Mat Xc = X.rowwise() - mu_x.transpose(), Yc = Y.rowwise() - mu_y.transpose();
  Mat Sx = (Xc.adjoint() * Xc) / static_cast<double>(n - 1);
  Mat Sy = (Yc.adjoint() * Yc) / static_cast<double>(m - 1);

  Eigen::SelfAdjointEigenSolver<Mat> es_x(Sx);
  Eigen::VectorXd wx = es_x.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Mat A = es_x.eigenvectors() * wx.asDiagonal() * es_x.eigenvectors().transpose();
  Mat B = A * Sy * A;
  B = ((B + B.transpose()) / 2.0).eval();
  Eigen::SelfAdjointEigenSolver<Mat> es_b(B);
  double tr_sqrt = es_b.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  double d = (mu_x - mu_y).squaredNorm() + Sx.trace() + Sy.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, d);
}

double frechet_video_distance(const Tensor& real_videos, const Tensor& fake_videos,
                              FeatureExtractor& ex) {
  return frechet_from_embeddings(batched_rows(real_videos, ex, 16, false),
                                 batched_rows(fake_videos, ex, 16, false));
}

MetricReport evaluate_samples(const SampleFn& sample, const Tensor& real_videos,
                              FeatureExtractor& ex, const EvalProtocol& proto) {
  if (proto.n_samples < 2) throw std::runtime_error("evaluate: need at least 2 samples per seed");
  if (proto.n_seeds < 1) throw std::runtime_error("evaluate: need at least 1 seed");
  Tensor real_emb = batched_rows(real_videos, ex, proto.batch, false);

  std::vector<double> seed_means, seed_split_stds, seed_fvds;
  for (int s = 0; s < proto.n_seeds; ++s) {
    std::vector<double> probs_acc, emb_acc;
    int64_t done = 0, batch_idx = 0, kcols = 0, ecols = 0;
    while (done < proto.n_samples) {
      int64_t want = std::min<int64_t>(proto.batch, proto.n_samples - done);
      uint64_t key = key_from({proto.seed, STREAM_EVAL, static_cast<uint64_t>(s),
                               static_cast<uint64_t>(batch_idx)});
      Tensor vids = sample(want, key);
      if (vids.dim(0) != want)
        throw std::runtime_error("evaluate: sampler returned " + std::to_string(vids.dim(0)) +
                                 " clips, wanted " + std::to_string(want));
      Tensor p = ex.probabilities(vids);
      Tensor em = ex.embeddings(vids);
      kcols = p.dim(1);
      ecols = em.dim(1);
      probs_acc.insert(probs_acc.end(), p.data(), p.data() + p.numel());
      emb_acc.insert(emb_acc.end(), em.data(), em.data() + em.numel());
      done += want;
      ++batch_idx;
    }
    Tensor probs(Shape{proto.n_samples, kcols}, std::move(probs_acc));
    Tensor embs(Shape{proto.n_samples, ecols}, std::move(emb_acc));
    auto [is_mean, is_std] = inception_score_from_probs(probs, proto.is_splits);
    seed_means.push_back(is_mean);
    seed_split_stds.push_back(is_std);
    seed_fvds.push_back(frechet_from_embeddings(real_emb, embs));
  }

  auto mean_of = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  MetricReport r;
  r.is_mean = mean_of(seed_means);
  r.is_std_splits = mean_of(seed_split_stds);
  double var = 0;
  for (double x : seed_means) var += (x - r.is_mean) * (x - r.is_mean);
  r.is_std_seeds = std::sqrt(std::max(0.0, var / static_cast<double>(seed_means.size())));
  r.fvd = mean_of(seed_fvds);
  r.n_samples = proto.n_samples;
  r.n_seeds = proto.n_seeds;
  r.extractor_provenance = ex.provenance();
  return r;
}

std::string MetricReport::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "is_mean = " << is_mean << "\n";
  os << "is_std_splits = " << is_std_splits << "\n";
  os << "is_std_seeds = " << is_std_seeds << "\n";
  os << "fvd = " << fvd << "\n";
  os << "n_samples = " << n_samples << "\n";
  os << "n_seeds = " << n_seeds << "\n";
  os << "extractor = " << extractor_provenance << "\n";
  return os.str();
}

MetricReport MetricReport::from_text(const std::string& text) {
  MetricReport r;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    size_t eq = line.find(" = ");
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq), val = line.substr(eq + 3);
    if (key == "is_mean") r.is_mean = std::stod(val);
    else if (key == "is_std_splits") r.is_std_splits = std::stod(val);
    else if (key == "is_std_seeds") r.is_std_seeds = std::stod(val);
    else if (key == "fvd") r.fvd = std::stod(val);
    else if (key == "n_samples") r.n_samples = std::stoll(val);
    else if (key == "n_seeds") r.n_seeds = std::stoi(val);
    else if (key == "extractor") r.extractor_provenance = val;
  }
  return r;
}

std::string MetricReport::csv_header() {
  return "run,is_mean,is_std_splits,is_std_seeds,fvd,n_samples,n_seeds,extractor";
}

std::string MetricReport::csv_row(const std::string& run_tag) const {
  std::ostringstream os;
  os.precision(10);
  os << run_tag << ',' << is_mean << ',' << is_std_splits << ',' << is_std_seeds << ',' << fvd << ','
     << n_samples << ',' << n_seeds << ',' << extractor_provenance;
  return os.str();
}

void write_report(const std::string& path, const MetricReport& r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report " + path);
  out << r.to_text();
}

MetricReport read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read report " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return MetricReport::from_text(ss.str());
}

void append_report_csv(const std::string& path, const std::string& run_tag, const MetricReport& r) {
  bool fresh = !std::ifstream(path).good();
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path);
  if (fresh) out << MetricReport::csv_header() << "\n";
  out << r.csv_row(run_tag) << "\n";
}

}  // namespace arrowvid
