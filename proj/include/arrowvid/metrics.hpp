#pragma once
// Sample-quality metrics behind a pluggable video classifier.
//
// The score definitions are exp(E[KL(p(y|x) || p(y))]) over evaluation
// splits and ||mu_x - mu_g||^2 + Tr(Sx + Sg - 2 (Sx Sg)^(1/2)) over
// penultimate embeddings.  The heavyweight published extractors are external
// dependencies this repo deliberately does not fetch; a desk-scale 3-D conv
// classifier trained on the synthetic corpus stands in.  Absolute values are
// therefore NOT comparable to published tables — only orderings between runs
// evaluated with the same extractor are meaningful.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "arrowvid/dataset.hpp"
#include "arrowvid/layers.hpp"
#include "arrowvid/tape.hpp"
#include "arrowvid/tensor.hpp"

namespace arrowvid {

// Small 3-D conv classifier: stride-2 trunk to 4x4, global average pool
// (the embedding), linear head (the class logits).
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(int64_t classes, int64_t clip_len, int64_t height, int64_t width,
                   int64_t width_div, uint64_t seed);

  // {N,3,T,H,W} -> {N,K}; every row sums to 1 within 1e-5 (asserted).
  Tensor probabilities(const Tensor& batch);
  // {N,3,T,H,W} -> {N,E} pooled penultimate features; non-finite output throws.
  Tensor embeddings(const Tensor& batch);

  int64_t num_classes() const { return classes_; }
  int64_t embed_dim() const { return embed_dim_; }
  int64_t clip_len() const { return clip_len_; }
  int64_t height() const { return height_; }
  int64_t width() const { return width_; }

  // Hash of the trained weights plus the training-corpus tag; reports carry
  // it so scores are never compared across extractors by accident.
  const std::string& provenance() const { return provenance_; }
  void set_corpus_tag(const std::string& tag);

  double train_batch(const Tensor& videos, const std::vector<int>& labels, Adam& opt);
  double accuracy(const Tensor& videos, const std::vector<int>& labels);

  std::vector<Param*> params();
  void save(const std::string& path) const;
  static FeatureExtractor load(const std::string& path);

 private:
  struct Stage {
    Conv3dLayer conv;
    BatchNormLayer bn;
  };
  std::pair<Var, Var> forward(Tape& t, const Tensor& batch, const PassCtx& ctx);  // (logits, embed)
  void refresh_provenance();

  int64_t classes_ = 0, clip_len_ = 0, height_ = 0, width_ = 0, width_div_ = 1;
  int64_t embed_dim_ = 0;
  uint64_t seed_ = 0;
  std::vector<Stage> stages_;
  LinearLayer head_;
  std::string corpus_tag_ = "untrained";
  std::string provenance_;
};

struct ExtractorConfig {
  int64_t clip_len = 16;
  int64_t height = 64, width = 64;
  int64_t width_div = 1;
  int64_t batch = 8;
  int epochs = 30;
  double lr = 2e-4;
  int holdout_every = 5;           // every k-th manifest entry is held out
  double target_accuracy = 0.95;   // below this the result is not a usable metric backbone
  uint64_t seed = 0;
};

// Supervised training on a labeled manifest (K >= 2 classes), deterministic
// given cfg.seed.  Throws if held-out accuracy misses target_accuracy,
// advising more epochs — scores from an undiscriminating extractor are noise.
FeatureExtractor train_reference_classifier(const DatasetManifest& manifest,
                                            const ExtractorConfig& cfg);

// exp(mean KL to the split marginal) per split; returns (mean, population
// std) across splits.  Every split score is asserted into [1, K].
std::pair<double, double> inception_score_from_probs(const Tensor& probs, int splits);
std::pair<double, double> inception_score(const Tensor& videos, FeatureExtractor& ex,
                                          int splits = 10);

// Gaussian 2-Wasserstein distance between embedding clouds.  Covariances are
// unbiased; the cross term uses Tr((Sx Sg)^(1/2)) = Tr((A Sg A)^(1/2)) with
// A = Sx^(1/2), both roots by symmetric eigendecomposition with negative
// eigenvalues clipped to zero (rank-deficient desk-scale clouds are normal).
double frechet_from_embeddings(const Tensor& emb_real, const Tensor& emb_fake);
double frechet_video_distance(const Tensor& real_videos, const Tensor& fake_videos,
                              FeatureExtractor& ex);

struct EvalProtocol {
  int64_t n_samples = 1000;
  int n_seeds = 4;
  int64_t batch = 16;
  int is_splits = 10;
  uint64_t seed = 0;
};

struct MetricReport {
  double is_mean = 0;
  double is_std_splits = 0;  // split-to-split spread, averaged over seeds
  double is_std_seeds = 0;   // seed-to-seed spread of the per-seed means
  double fvd = 0;            // per-seed FVD against the real set, averaged
  int64_t n_samples = 0;
  int n_seeds = 0;
  std::string extractor_provenance;

  std::string to_text() const;  // key = value lines
  static MetricReport from_text(const std::string& text);
  static std::string csv_header();
  std::string csv_row(const std::string& run_tag) const;
};

void write_report(const std::string& path, const MetricReport& r);
MetricReport read_report(const std::string& path);
void append_report_csv(const std::string& path, const std::string& run_tag, const MetricReport& r);

// sample(count, key) returns {count,C,T,H,W} in eval mode; keys derive from
// (protocol seed, seed index, batch index) so reruns reproduce exactly.
using SampleFn = std::function<Tensor(int64_t count, uint64_t key)>;

MetricReport evaluate_samples(const SampleFn& sample, const Tensor& real_videos,
                              FeatureExtractor& ex, const EvalProtocol& proto);

}  // namespace arrowvid
