//! Clipped surrogate objective with KL regularization and truncated
//! trajectory-level importance weighting, over toy categorical policies.
//!
//! Per shifted position `t` with target token `y_t`:
//!
//! ```text
//! rho_t  = exp(logp_learner_t - logp_old_t)
//! surr_t = min(rho_t * A_t, clip(rho_t, 1-eps_c, 1+eps_c) * A_t)
//! Jbar   = (1/sum m) * sum_t m_t * surr_t  -  beta * KLbar
//! J_ep   = min(exp(sum_t m_t (logp_old_t - logp_sampler_t)), C) * Jbar
//! ```
//!
//! The KL term is the exact categorical divergence between the learner and
//! reference distributions at each masked position, averaged over masked
//! positions. The truncated importance weight compares the cached
//! generation-time policies (old vs sampler) and is therefore constant in
//! the learner parameters; no gradient flows through it.
//!
//! `grpo_loss` returns the batch objective (mean over episodes), per-token
//! diagnostics, and the analytic gradient with respect to the learner
//! logits, which is validated against central finite differences in tests.

use serde::{Deserialize, Serialize};

use super::masks::MaskSet;
use super::DataplaneError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Clip width for the token-level ratio, in (0, 1).
    pub clip_eps: f64,
    /// KL regularization coefficient (beta), >= 0.
    pub kl_coeff: f64,
    /// Trajectory importance-weight cap (C), >= 1.
    pub trunc_c: f64,
    /// Epsilon guard in group normalization denominators.
    pub norm_eps: f64,
    pub grouping: Grouping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    State,
    Batch,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_coeff: 0.0,
            trunc_c: 2.0,
            norm_eps: 1e-6,
            grouping: Grouping::State,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), DataplaneError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(DataplaneError::BadConfig("clip_eps must be in (0,1)".into()));
        }
        if self.kl_coeff < 0.0 {
            return Err(DataplaneError::BadConfig("kl_coeff must be >= 0".into()));
        }
        if self.trunc_c < 1.0 {
            return Err(DataplaneError::BadConfig("trunc_c must be >= 1".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(DataplaneError::BadConfig("norm_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// One episode's training tensors at shifted (next-token) positions.
///
/// `learner_logits[t]` scores the prediction of `targets[t]`; rows must
/// share one vocabulary size with `ref_logits`. `old_logprobs` and
/// `sampler_logprobs` are the cached generation-time log-probabilities of
/// the target tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoEpisode {
    pub targets: Vec<usize>,
    pub masks: MaskSet,
    /// Scalar normalized advantage, broadcast over response tokens.
    pub advantage: f64,
    pub learner_logits: Vec<Vec<f64>>,
    pub ref_logits: Vec<Vec<f64>>,
    pub old_logprobs: Vec<f64>,
    pub sampler_logprobs: Vec<f64>,
}

/// Per-token diagnostics at masked positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDiag {
    pub episode: usize,
    pub position: usize,
    pub rho: f64,
    pub clipped: bool,
    pub surrogate: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoOutput {
    /// Batch objective: mean over episodes of the weighted Jbar.
    pub objective: f64,
    /// Per-episode truncated importance weights.
    pub trajectory_weights: Vec<f64>,
    /// d objective / d learner_logits, same shape as the inputs.
    pub grad_learner_logits: Vec<Vec<Vec<f64>>>,
    pub diagnostics: Vec<TokenDiag>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&z| z - log_z).collect()
}

/// Token-level likelihood ratios `exp(logp_new - logp_old)`.
pub fn token_ratio(logp_new: &[f64], logp_old: &[f64]) -> Result<Vec<f64>, DataplaneError> {
    if logp_new.len() != logp_old.len() {
        return Err(DataplaneError::LengthMismatch {
            what: "logp_old",
            got: logp_old.len(),
            expected: logp_new.len(),
        });
    }
    if logp_new.iter().chain(logp_old.iter()).any(|v| v.is_nan()) {
        return Err(DataplaneError::NumericError("NaN log-probability".into()));
    }
    Ok(logp_new
        .iter()
        .zip(logp_old.iter())
        .map(|(n, o)| (n - o).exp())
        .collect())
}

fn check_episode(ep: &GrpoEpisode) -> Result<(), DataplaneError> {
    let n = ep.targets.len();
    let fields: [(&str, usize); 5] = [
        ("loss_mask", ep.masks.loss_mask.len()),
        ("learner_logits", ep.learner_logits.len()),
        ("ref_logits", ep.ref_logits.len()),
        ("old_logprobs", ep.old_logprobs.len()),
        ("sampler_logprobs", ep.sampler_logprobs.len()),
    ];
    for (what, got) in fields {
        if got != n {
            return Err(DataplaneError::LengthMismatch {
                what,
                got,
                expected: n,
            });
        }
    }
    if ep.masks.loss_mask.iter().all(|&m| m == 0) {
        return Err(DataplaneError::DegenerateEpisode);
    }
    let vocab = ep.learner_logits.first().map(|r| r.len()).unwrap_or(0);
    for (row, tgt) in ep.learner_logits.iter().zip(ep.targets.iter()) {
        if row.len() != vocab || *tgt >= vocab {
            return Err(DataplaneError::BadConfig(
                "logit rows must share one vocabulary covering every target".into(),
            ));
        }
    }
    for row in &ep.ref_logits {
        if row.len() != vocab {
            return Err(DataplaneError::BadConfig(
                "reference logits must match the learner vocabulary".into(),
            ));
        }
    }
    Ok(())
}

/// Evaluate the batch objective, diagnostics and analytic gradient.
pub fn grpo_loss(batch: &[GrpoEpisode], cfg: &GrpoConfig) -> Result<GrpoOutput, DataplaneError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(DataplaneError::DegenerateEpisode);
    }
    for ep in batch {
        check_episode(ep)?;
    }

    let n_episodes = batch.len() as f64;
    let mut objective = 0.0;
    let mut weights = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    let mut diagnostics = Vec::new();

    for (ep_idx, ep) in batch.iter().enumerate() {
        let mask_count: f64 = ep.masks.loss_mask.iter().map(|&m| m as f64).sum();

        // Trajectory importance weight from the cached generation-time
        // policies; constant in the learner parameters.
        let log_w: f64 = ep
            .masks
            .loss_mask
            .iter()
            .zip(ep.old_logprobs.iter().zip(ep.sampler_logprobs.iter()))
            .filter(|(&m, _)| m == 1)
            .map(|(_, (o, s))| o - s)
            .sum();
        let weight = log_w.exp().min(cfg.trunc_c);
        weights.push(weight);

        let mut surr_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut grad = vec![vec![0.0; ep.learner_logits[0].len()]; ep.learner_logits.len()];

        for (t, &m) in ep.masks.loss_mask.iter().enumerate() {
            if m == 0 {
                continue;
            }
            let logp_learner = log_softmax(&ep.learner_logits[t]);
            let probs: Vec<f64> = logp_learner.iter().map(|lp| lp.exp()).collect();
            let target = ep.targets[t];
            let rho = (logp_learner[target] - ep.old_logprobs[t]).exp();
            if !rho.is_finite() {
                return Err(DataplaneError::NumericError(format!(
                    "non-finite ratio at episode {ep_idx} position {t}"
                )));
            }
            let adv = ep.advantage;
            let clipped_rho = rho.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
            let unclipped = rho * adv;
            let clipped = clipped_rho * adv;
            let surr = unclipped.min(clipped);
            surr_sum += surr;

            // d surr / d rho: the min is the unclipped branch exactly when
            // it is the smaller term; at the kink we take the unclipped
            // side (measure zero, matched by the sampling in tests).
            let d_surr_d_rho = if unclipped <= clipped { adv } else { 0.0 };

            // exact KL(learner || ref) over the toy vocabulary
            let logp_ref = log_softmax(&ep.ref_logits[t]);
            let kl: f64 = probs
                .iter()
                .zip(logp_learner.iter().zip(logp_ref.iter()))
                .map(|(&p, (lp, lr))| p * (lp - lr))
                .sum();
            kl_sum += kl;

            diagnostics.push(TokenDiag {
                episode: ep_idx,
                position: t,
                rho,
                clipped: unclipped > clipped,
                surrogate: surr,
                kl,
            });

            // gradient of the surrogate: d rho / d z_v = rho * (1[v=y] - p_v)
            let scale = weight / (n_episodes * mask_count);
            for v in 0..probs.len() {
                let indicator = if v == target { 1.0 } else { 0.0 };
                let d_logp = indicator - probs[v];
                grad[t][v] += scale * d_surr_d_rho * rho * d_logp;
                // gradient of the exact KL:
                // dKL/dz_v = p_v * (logp_v - logq_v - KL)
                let d_kl = probs[v] * (logp_learner[v] - logp_ref[v] - kl);
                grad[t][v] -= scale * cfg.kl_coeff * d_kl;
            }
        }

        let jbar = surr_sum / mask_count - cfg.kl_coeff * kl_sum / mask_count;
        objective += weight * jbar / n_episodes;
        grads.push(grad);
    }

    Ok(GrpoOutput {
        objective,
        trajectory_weights: weights,
        grad_learner_logits: grads,
        diagnostics,
    })
}
