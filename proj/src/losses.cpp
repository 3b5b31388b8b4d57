#include "arrowvid/losses.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace arrowvid {

void validate(const LossWeights& w) {
  if (w.alpha < 0 || w.beta < 0 || w.lambda1 < 0 || w.lambda2 < 0 || w.lambda3 < 0)
    throw std::runtime_error("loss weights must be >= 0");
}

bool LossBundle::finite() const {
  for (double v : {adv_d, adv_g, aot_d, aot_g, div, frame_d, frame_g, total_d, total_g})
    if (!std::isfinite(v)) return false;
  return true;
}

std::string LossBundle::csv_header() {
  return "step,adv_d,adv_g,aot_d,aot_g,div,frame_d,frame_g,total_d,total_g";
}

std::string LossBundle::csv_row(int64_t step) const {
  std::ostringstream os;
  os.precision(10);
  os << step;
  for (double v : {adv_d, adv_g, aot_d, aot_g, div, frame_d, frame_g, total_d, total_g}) os << ',' << v;
  return os.str();
}

static void want_nonempty(Var v, const char* who) {
  if (!v.defined() || v.val().numel() == 0) throw std::runtime_error(std::string(who) + ": empty batch");
}

// mean over the batch of -log sigmoid(x)  (BCE against target 1)
static Var bce_target_one(Var logits) { return mean_all(softplus_(neg(logits))); }
// mean of -log(1 - sigmoid(x))  (BCE against target 0)
static Var bce_target_zero(Var logits) { return mean_all(softplus_(logits)); }

static Var aot_two_term(Var fwd, Var bwd, const char* who) {
  want_nonempty(fwd, who);
  want_nonempty(bwd, who);
  return add(bce_target_one(fwd), bce_target_zero(bwd));
}

Var aot_loss_d(Var fwd_real_logits, Var bwd_real_logits) {
  return aot_two_term(fwd_real_logits, bwd_real_logits, "aot_loss_d");
}

Var aot_loss_g(Var fwd_fake_logits, Var bwd_fake_logits) {
  return aot_two_term(fwd_fake_logits, bwd_fake_logits, "aot_loss_g");
}

Var adv_loss_bce(Var real_logits, Var fake_logits) {
  want_nonempty(real_logits, "adv_loss_bce");
  want_nonempty(fake_logits, "adv_loss_bce");
  // E[log D] = -mean softplus(-x); E[log(1-D)] = -mean softplus(x)
  return neg(add(bce_target_one(real_logits), bce_target_zero(fake_logits)));
}

Var g_adv_bce(Var fake_logits, bool non_saturating) {
  want_nonempty(fake_logits, "g_adv_bce");
  if (non_saturating) return bce_target_one(fake_logits);  // -E[log D(fake)]
  return neg(bce_target_zero(fake_logits));                // E[log(1-D(fake))]
}

Var gradient_penalty(Var interp_scores, Var x_interp, double lambda, double target) {
  want_nonempty(interp_scores, "gradient_penalty");
  want_nonempty(x_interp, "gradient_penalty");
  Tape& t = *interp_scores.tape;
  Var g = t.grad_graph(interp_scores, {x_interp})[0];
  Var norm = sqrt_(addc(sum_samples(square(g)), 1e-12));
  return mulc(mean_all(square(addc(norm, -target))), lambda);
}

std::pair<Var, Var> wasserstein_adv(Var real_scores, Var fake_scores, const GpCfg& gp) {
  want_nonempty(real_scores, "wasserstein_adv");
  want_nonempty(fake_scores, "wasserstein_adv");
  Var d = sub(mean_all(fake_scores), mean_all(real_scores));
  if (gp.enabled) {
    if (!gp.interp_scores.defined() || !gp.x_interp.defined())
      throw std::runtime_error("wasserstein_adv: gradient penalty requested without interpolation inputs");
    d = add(d, gradient_penalty(gp.interp_scores, gp.x_interp, gp.lambda));
  }
  return {d, neg(mean_all(fake_scores))};
}

std::pair<Var, Var> hinge_adv(Var real_scores, Var fake_scores) {
  want_nonempty(real_scores, "hinge_adv");
  want_nonempty(fake_scores, "hinge_adv");
  Var d = add(mean_all(relu_(addc(neg(real_scores), 1.0))), mean_all(relu_(addc(fake_scores, 1.0))));
  return {d, neg(mean_all(fake_scores))};
}

Var diversity_loss(Var z1, Var z2, Var v1, Var v2) {
  if (z1.shape() != z2.shape() || v1.shape() != v2.shape())
    throw std::runtime_error("diversity_loss: pair shapes must match");
  want_nonempty(z1, "diversity_loss");
  want_nonempty(v1, "diversity_loss");
  Var dz = mean_all(abs_(sub(z1, z2)));
  Var dv = mean_all(abs_(sub(v1, v2)));
  return div_(dz, addc(dv, 1e-8));
}

Var rotation_task_loss(Var logits4, const std::vector<int>& k_targets) {
  want_nonempty(logits4, "rotation_task_loss");
  const Shape& s = logits4.shape();
  if (s.size() != 2 || s[1] != 4) throw std::runtime_error("rotation_task_loss: logits must be {N,4}");
  if (s[0] != static_cast<int64_t>(k_targets.size()))
    throw std::runtime_error("rotation_task_loss: one target per sample");
  return neg(mean_all(gather_cols(log_softmax(logits4), k_targets)));
}

Var shuffle_task_loss(Var logits, const std::vector<int>& shuffled_flags) {
  want_nonempty(logits, "shuffle_task_loss");
  if (logits.shape().size() != 1 || logits.shape()[0] != static_cast<int64_t>(shuffled_flags.size()))
    throw std::runtime_error("shuffle_task_loss: logits {N} with one flag per sample");
  Tape& t = *logits.tape;
  Tensor y({logits.shape()[0]});
  for (size_t i = 0; i < shuffled_flags.size(); ++i) {
    int f = shuffled_flags[i];
    if (f != 0 && f != 1) throw std::runtime_error("shuffle_task_loss: flags must be 0/1");
    y.data()[i] = static_cast<double>(f);
  }
  Var yv = t.constant(y);
  Var pos = mul(yv, softplus_(neg(logits)));
  Var negterm = mul(addc(neg(yv), 1.0), softplus_(logits));
  return mean_all(add(pos, negterm));
}

Var total_d_unconditional(Var adv_value, Var aot_d, double alpha) {
  return add(neg(adv_value), mulc(aot_d, alpha));
}

Var total_g_unconditional(Var g_adv_term, Var aot_g, double beta) {
  return add(g_adv_term, mulc(aot_g, beta));
}

Var total_categorical_d(Var hinge_d_loss, Var aot_d, double lambda1) {
  return add(hinge_d_loss, mulc(aot_d, lambda1));
}

Var total_categorical_g(Var hinge_g_loss, Var aot_g, Var div, double lambda2, double lambda3) {
  return add(hinge_g_loss, add(mulc(aot_g, lambda2), mulc(div, lambda3)));
}

Var frame_d_loss(Var frame_value) { return neg(frame_value); }

Var total_g_with_frames(Var total_g, Var frame_value) { return add(total_g, frame_value); }

}  // namespace arrowvid
