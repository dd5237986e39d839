//! Defense training objectives.
//!
//! Alongside the standard baselines (adversarial cross-entropy, logit
//! pairing, TRADES) this module implements boundary-distance re-weighting:
//! per-sample weights `rho_i = 1 - d_i / sum(d)` derived from the PGD flip
//! step, and the composite objective
//! `mean_i rho_i * CE(local_adv_i, y_i) + beta * mean_i KL(local_adv_i || global_clean_i)`
//! where the global logits are frozen.

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::error::{Error, Result};
use crate::nn::{kl_divergence_parts, softmax_cross_entropy, softmax_rows};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Plain,
    PgdAt,
    Alp,
    Trades,
    Dbfat,
}

impl DefenseKind {
    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::Plain => "plain",
            DefenseKind::PgdAt => "pgd_at",
            DefenseKind::Alp => "alp",
            DefenseKind::Trades => "trades",
            DefenseKind::Dbfat => "dbfat",
        }
    }
}

/// Defense selection plus its hyperparameters. `beta` weighs the pairing or
/// regularization term of ALP/TRADES/DBFAT; `attack` is the training attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub beta: f64,
    pub attack: AttackConfig,
    /// Train with uniform weights instead of boundary-distance weights
    /// (ablation switch; only meaningful for `Dbfat`).
    #[serde(default)]
    pub disable_reweighting: bool,
}

/// Why [`weights_rho`] fell back to uniform weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoFallback {
    /// Every sample was misclassified before the first step (`sum d = 0`).
    AllMisclassified,
    /// Single-sample batch.
    SingleSample,
}

/// Per-sample training weights. Outputs of [`weights_rho`] satisfy
/// `sum(rho) = m - 1` (up to f64 rounding) on the non-degenerate branch and
/// are anti-monotone in `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub rho: Vec<f64>,
    pub fallback: Option<RhoFallback>,
}

impl WeightVector {
    /// Uniform unit weights; turns the weighted CE into plain mean CE.
    pub fn ones(m: usize) -> Self {
        Self {
            rho: vec![1.0; m],
            fallback: None,
        }
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

/// Weights from boundary distances: `rho_i = 1 - d_i / sum(d)`.
///
/// Samples that flip early (small `d`, near the boundary) get weights close
/// to one; samples that never flip within `steps` get the smallest weights.
/// Degenerate batches fall back to uniform: `(m-1)/m` when every sample is
/// already misclassified, `[1]` for a single sample.
pub fn weights_rho(d: &[usize], steps: usize) -> Result<WeightVector> {
    let m = d.len();
    if m == 0 {
        return Err(Error::InvalidConfig("empty distance vector".into()));
    }
    if let Some(&bad) = d.iter().find(|&&di| di > steps) {
        return Err(Error::InvalidConfig(format!(
            "distance {bad} exceeds step cap {steps}"
        )));
    }
    if m == 1 {
        return Ok(WeightVector {
            rho: vec![1.0],
            fallback: Some(RhoFallback::SingleSample),
        });
    }
    let total: usize = d.iter().sum();
    if total == 0 {
        let w = (m - 1) as f64 / m as f64;
        return Ok(WeightVector {
            rho: vec![w; m],
            fallback: Some(RhoFallback::AllMisclassified),
        });
    }
    let total = total as f64;
    Ok(WeightVector {
        rho: d.iter().map(|&di| 1.0 - di as f64 / total).collect(),
        fallback: None,
    })
}

/// Adversarial cross-entropy: `CE(f(x_adv), y)`.
pub fn loss_pgd_at(logits_adv: &Tensor, y: &[usize]) -> Result<(f64, Tensor)> {
    softmax_cross_entropy(logits_adv, y)
}

/// Logit pairing: `CE(f(x_adv), y) + beta * mean_i ||f(x_adv)_i - f(x)_i||^2`.
/// Returns gradients for the adversarial and clean logits, in that order.
pub fn loss_alp(
    logits_adv: &Tensor,
    logits_cln: &Tensor,
    y: &[usize],
    beta: f64,
) -> Result<(f64, Tensor, Tensor)> {
    if !logits_adv.same_shape(logits_cln) {
        return Err(Error::ShapeMismatch {
            context: "loss_alp".into(),
            expected: format!("{:?}", logits_adv.shape()),
            actual: format!("{:?}", logits_cln.shape()),
        });
    }
    let (ce, mut grad_adv) = softmax_cross_entropy(logits_adv, y)?;
    let m = logits_adv.rows() as f64;
    let diff = logits_adv.sub(logits_cln)?;
    let pair: f64 = diff.data().iter().map(|&v| v * v).sum::<f64>() / m;
    let coeff = 2.0 * beta / m;
    for (g, &dv) in grad_adv.data_mut().iter_mut().zip(diff.data()) {
        *g += coeff * dv;
    }
    let grad_cln = diff.scale(-coeff);
    Ok((ce + beta * pair, grad_adv, grad_cln))
}

/// TRADES: `CE(f(x), y) + beta * mean KL(f(x_adv) || f(x))`. Returns
/// gradients for the clean and adversarial logits, in that order.
pub fn loss_trades(
    logits_cln: &Tensor,
    logits_adv: &Tensor,
    y: &[usize],
    beta: f64,
) -> Result<(f64, Tensor, Tensor)> {
    let (ce, grad_cln_ce) = softmax_cross_entropy(logits_cln, y)?;
    let (kl, grad_adv_kl, grad_cln_kl) = kl_divergence_parts(logits_adv, logits_cln)?;
    let grad_cln = grad_cln_ce.add(&grad_cln_kl.scale(beta))?;
    let grad_adv = grad_adv_kl.scale(beta);
    Ok((ce + beta * kl, grad_cln, grad_adv))
}

/// Boundary-weighted adversarial CE plus KL regularization toward the frozen
/// global model:
/// `mean_i rho_i * CE_i(local_adv, y) + beta * mean_i KL_i(local_adv || global_clean)`.
/// The gradient flows into the local adversarial logits only.
pub fn loss_dbfat(
    logits_adv_local: &Tensor,
    y: &[usize],
    logits_cln_global: &Tensor,
    rho: &WeightVector,
    beta: f64,
) -> Result<(f64, Tensor)> {
    let (m, c) = (logits_adv_local.rows(), logits_adv_local.cols());
    if rho.len() != m {
        return Err(Error::ShapeMismatch {
            context: "loss_dbfat weights".into(),
            expected: format!("{m} weights"),
            actual: format!("{}", rho.len()),
        });
    }
    if y.len() != m {
        return Err(Error::ShapeMismatch {
            context: "loss_dbfat labels".into(),
            expected: format!("{m} labels"),
            actual: format!("{}", y.len()),
        });
    }
    for &label in y {
        if label >= c {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: c,
            });
        }
    }

    // Weighted CE with per-sample weights: cannot reuse the mean-CE helper.
    let probs = softmax_rows(logits_adv_local);
    let inv_m = 1.0 / m as f64;
    let mut ce = 0.0;
    let mut grad = Tensor::zeros(vec![m, c]);
    for i in 0..m {
        let pi = probs.row(i);
        // log(p_y) via the stabilized probabilities; p_y > 0 because the
        // softmax of finite logits is strictly positive.
        ce += rho.rho[i] * -pi[y[i]].ln();
        let gi = grad.row_mut(i);
        let w = rho.rho[i] * inv_m;
        for (g, &p) in gi.iter_mut().zip(pi) {
            *g = w * p;
        }
        gi[y[i]] -= w;
    }
    ce *= inv_m;

    let (kl, grad_kl, _) = kl_divergence_parts(logits_adv_local, logits_cln_global)?;
    for (g, &gk) in grad.data_mut().iter_mut().zip(grad_kl.data()) {
        *g += beta * gk;
    }
    Ok((ce + beta * kl, grad))
}
