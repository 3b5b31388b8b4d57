#pragma once
// Training objectives as pure functions over tape variables.
//
// Sign conventions, fixed here so call sites stay readable:
//   * adv_loss_bce returns the value the discriminator MAXIMIZES
//     (E[log D(x)] + E[log(1-D(G(z)))]); totals negate it for D's
//     minimization objective.  The frame loss has the same form and reuses it.
//   * hinge_adv and wasserstein_adv return (d_loss, g_loss) pairs that each
//     network MINIMIZES directly.
//   * The arrow losses are two-term BCEs (forward->1, backward->0), one mean
//     per direction, summed; minimized by whichever network they are charged
//     to.
//
// Everything is computed in log-space from logits (softplus / log-softmax),
// never from clamped probabilities.
//
// Routing contract (enforced where the trainer assembles batches): adversarial
// losses see only forward-direction clips; the discriminator's arrow loss sees
// only real clips (both directions) unless the aot_on_fake config flag is set;
// the generator's arrow loss sees generated clips in both directions.

#include <string>
#include <utility>
#include <vector>

#include "arrowvid/tape.hpp"

namespace arrowvid {

struct LossWeights {
  double alpha = 1.0;    // D arrow-loss weight
  double beta = 0.2;     // G arrow-loss weight
  double lambda1 = 1.0;  // categorical: D arrow
  double lambda2 = 0.5;  // categorical: G arrow
  double lambda3 = 0.2;  // categorical: diversity
};
void validate(const LossWeights& w);  // all weights >= 0

// One training step's scalars, in CSV column order.
struct LossBundle {
  double adv_d = 0, adv_g = 0, aot_d = 0, aot_g = 0, div = 0, frame_d = 0, frame_g = 0, total_d = 0,
         total_g = 0;
  bool finite() const;
  static std::string csv_header();  // "step,adv_d,...,total_g"
  std::string csv_row(int64_t step) const;
};

// ---- arrow-of-time ----
// mean BCE(logits, 1) over forward clips + mean BCE(logits, 0) over backward
// clips.  All logits zero -> 2 ln 2.
Var aot_loss_d(Var fwd_real_logits, Var bwd_real_logits);
Var aot_loss_g(Var fwd_fake_logits, Var bwd_fake_logits);  // same form, generated clips

// ---- adversarial ----
// E[log sigmoid(real)] + E[log(1 - sigmoid(fake))]; the discriminator ascends
// this, so D objectives enter as its negation.
Var adv_loss_bce(Var real_logits, Var fake_logits);
// The term G minimizes: saturating uses E[log(1-D(fake))] as written,
// non-saturating uses -E[log D(fake)].
Var g_adv_bce(Var fake_logits, bool non_saturating = false);

// Gradient penalty inputs for the Wasserstein critic.  interp_scores must be
// the critic's output on x_interp within the same tape so the gradient graph
// can be formed.
struct GpCfg {
  bool enabled = false;
  double lambda = 10.0;
  Var interp_scores;
  Var x_interp;
};
// d_loss = mean(fake) - mean(real) [+ penalty]; g_loss = -mean(fake).
std::pair<Var, Var> wasserstein_adv(Var real_scores, Var fake_scores, const GpCfg& gp = {});
// lambda * E[(||d scores/d x||_2 - target)^2], per-sample norms.
Var gradient_penalty(Var interp_scores, Var x_interp, double lambda = 10.0, double target = 1.0);

// Standard hinge: d_loss = E[max(0,1-real)] + E[max(0,1+fake)], g_loss =
// -E[fake].  (The published formulation prints the margins with flipped
// signs; the standard form is used deliberately.)
std::pair<Var, Var> hinge_adv(Var real_scores, Var fake_scores);

// ---- diversity (mode-seeking, minimized reciprocal) ----
// d(z1,z2) / (d(v1,v2) + 1e-8) with d = mean absolute difference.
Var diversity_loss(Var z1, Var z2, Var v1, Var v2);

// ---- ablation task losses ----
Var rotation_task_loss(Var logits4, const std::vector<int>& k_targets);     // 4-way CE
Var shuffle_task_loss(Var logits, const std::vector<int>& shuffled_flags);  // BCE, 1 = shuffled

// ---- totals ----
// L_D = -L_adv + alpha * L_aot_d        (adv is the maximized value)
Var total_d_unconditional(Var adv_value, Var aot_d, double alpha);
// L_G = g_adv_term + beta * L_aot_g     (g_adv_term already G-minimized)
Var total_g_unconditional(Var g_adv_term, Var aot_g, double beta);
// Categorical: hinge pair conventions (both inputs minimized forms).
Var total_categorical_d(Var hinge_d_loss, Var aot_d, double lambda1);
Var total_categorical_g(Var hinge_g_loss, Var aot_g, Var div, double lambda2, double lambda3);
// Frame terms: the frame value has adv_loss_bce's form; D_frame minimizes its
// negation, G adds the value to its total.
Var frame_d_loss(Var frame_value);
Var total_g_with_frames(Var total_g, Var frame_value);

}  // namespace arrowvid
