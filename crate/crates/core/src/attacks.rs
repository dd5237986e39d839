//! Gradient-based evasion attacks under an L-infinity threat model, plus a
//! boundary-distance probe.
//!
//! Every attack ascends the cross-entropy loss and projects each iterate
//! back onto the epsilon ball around the natural input intersected with the
//! valid pixel range `[0, 1]`. None of them mutate the model or the input
//! batch; callers keep ownership of both.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backward_input, forward, softmax_cross_entropy, NetworkSpec, ParamSet};
use crate::rng::Prng;
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    Mim,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Mim => "mim",
        }
    }
}

/// Threat-model parameters shared by all attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L-infinity perturbation bound, in input units.
    pub epsilon: f64,
    /// Step size per iteration (ignored by FGSM, which steps by epsilon).
    pub alpha: f64,
    /// Iteration count (FGSM is always a single step).
    pub steps: usize,
    /// Start from a uniform point in the epsilon ball instead of the input.
    pub random_start: bool,
    /// Momentum decay for MIM; unused by the other kinds.
    pub momentum_decay: f64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            alpha: epsilon,
            steps: 1,
            random_start: false,
            momentum_decay: 0.0,
        }
    }

    pub fn pgd(epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            alpha,
            steps,
            random_start: false,
            momentum_decay: 0.0,
        }
    }

    pub fn mim(epsilon: f64, alpha: f64, steps: usize, momentum_decay: f64) -> Self {
        Self {
            kind: AttackKind::Mim,
            epsilon,
            alpha,
            steps,
            random_start: false,
            momentum_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::InvalidConfig("attack epsilon must be >= 0".into()));
        }
        if self.kind != AttackKind::Fgsm && (self.alpha <= 0.0 || self.steps == 0) {
            return Err(Error::InvalidConfig(
                "iterative attacks need alpha > 0 and steps >= 1".into(),
            ));
        }
        if self.momentum_decay < 0.0 {
            return Err(Error::InvalidConfig("momentum decay must be >= 0".into()));
        }
        Ok(())
    }

    fn effective_steps(&self) -> usize {
        if self.kind == AttackKind::Fgsm {
            1
        } else {
            self.steps
        }
    }

    fn effective_alpha(&self) -> f64 {
        if self.kind == AttackKind::Fgsm {
            self.epsilon
        } else {
            self.alpha
        }
    }
}

/// Output of [`boundary_probe`]: the final adversarial batch together with
/// each sample's minimum misclassification step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub x_adv: Tensor,
    /// `d[i] = 0` if sample `i` is already misclassified before any step,
    /// the first step index at which it flips otherwise, capped at `steps`
    /// for samples that never flip.
    pub d: Vec<usize>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamp every element of `x_adv` into `[x - eps, x + eps] ∩ [0, 1]`.
fn project(x_adv: &mut Tensor, x: &Tensor, eps: f64) {
    for (a, &orig) in x_adv.data_mut().iter_mut().zip(x.data()) {
        let lo = (orig - eps).max(0.0);
        let hi = (orig + eps).min(1.0);
        *a = a.clamp(lo, hi);
    }
}

fn mark_misclassified(logits: &Tensor, labels: &[usize], step: usize, d: &mut [usize]) {
    for (i, slot) in d.iter_mut().enumerate() {
        if *slot == usize::MAX && argmax(logits.row(i)) != labels[i] {
            *slot = step;
        }
    }
}

fn check_batch(spec: &NetworkSpec, x: &Tensor, y: &[usize]) -> Result<()> {
    if !x.is_matrix() || x.cols() != spec.input_dim() || x.rows() != y.len() {
        return Err(Error::ShapeMismatch {
            context: "attack input".into(),
            expected: format!("[{}, {}] with matching labels", y.len(), spec.input_dim()),
            actual: format!("{:?}", x.shape()),
        });
    }
    Ok(())
}

/// Shared iteration: sign ascent on the CE loss with per-step projection.
/// When `probe` is set, records the first misclassification step per sample.
fn run_attack(
    spec: &NetworkSpec,
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut Prng,
    mut probe: Option<&mut Vec<usize>>,
) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(spec, x, y)?;
    let eps = cfg.epsilon;
    let alpha = cfg.effective_alpha();
    let steps = cfg.effective_steps();

    let mut x_adv = x.clone();
    if cfg.random_start && eps > 0.0 {
        for v in x_adv.data_mut() {
            *v += rng.random_range(-eps..=eps);
        }
        project(&mut x_adv, x, eps);
    }

    let mut d = vec![usize::MAX; x.rows()];
    let mut momentum = Tensor::zeros(x.shape().to_vec());

    for step in 0..steps {
        let (logits, trace) = forward(spec, params, &x_adv)?;
        if probe.is_some() {
            mark_misclassified(&logits, y, step, &mut d);
        }
        let (_, logit_grad) = softmax_cross_entropy(&logits, y)?;
        let grad = backward_input(&trace, &logit_grad)?;

        let direction: Tensor = match cfg.kind {
            AttackKind::Fgsm | AttackKind::Pgd => grad.map(sign),
            AttackKind::Mim => {
                // Accumulate the per-sample L1-normalized gradient.
                let m = x.rows();
                for i in 0..m {
                    let gi = grad.row(i);
                    let l1: f64 = gi.iter().map(|g| g.abs()).sum();
                    let mi = momentum.row_mut(i);
                    for (mv, &gv) in mi.iter_mut().zip(gi) {
                        *mv = cfg.momentum_decay * *mv + if l1 > 0.0 { gv / l1 } else { 0.0 };
                    }
                }
                momentum.map(sign)
            }
        };

        for (a, &dir) in x_adv.data_mut().iter_mut().zip(direction.data()) {
            *a += alpha * dir;
        }
        project(&mut x_adv, x, eps);
    }

    if let Some(out) = probe.as_deref_mut() {
        let (logits, _) = forward(spec, params, &x_adv)?;
        mark_misclassified(&logits, y, steps, &mut d);
        for slot in &mut d {
            if *slot == usize::MAX {
                *slot = steps;
            }
        }
        *out = d;
    }
    Ok(x_adv)
}

/// Single-step sign ascent: `clamp(x + eps * sign(grad), 0, 1)`.
pub fn fgsm(
    spec: &NetworkSpec,
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
) -> Result<Tensor> {
    let cfg = AttackConfig::fgsm(epsilon);
    let mut rng = Prng::seed_from_u64(0);
    run_attack(spec, params, x, y, &cfg, &mut rng, None)
}

/// Iterated sign ascent with per-step projection onto the epsilon ball.
pub fn pgd(
    spec: &NetworkSpec,
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut Prng,
) -> Result<Tensor> {
    if cfg.kind != AttackKind::Pgd {
        return Err(Error::InvalidConfig("pgd called with non-pgd config".into()));
    }
    run_attack(spec, params, x, y, cfg, rng, None)
}

/// Momentum iterative method: accumulates L1-normalized gradients and steps
/// by the sign of the accumulator.
pub fn mim(
    spec: &NetworkSpec,
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut Prng,
) -> Result<Tensor> {
    if cfg.kind != AttackKind::Mim {
        return Err(Error::InvalidConfig("mim called with non-mim config".into()));
    }
    run_attack(spec, params, x, y, cfg, rng, None)
}

/// Dispatch on `cfg.kind`.
pub fn attack(
    spec: &NetworkSpec,
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut Prng,
) -> Result<Tensor> {
    run_attack(spec, params, x, y, cfg, rng, None)
}

/// Runs the iterative attack and records, per sample, the minimum step at
/// which its adversarial variant is misclassified. The returned batch is the
/// final iterate, so training can reuse it instead of attacking twice.
pub fn boundary_probe(
    spec: &NetworkSpec,
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut Prng,
) -> Result<ProbeResult> {
    if cfg.kind == AttackKind::Fgsm {
        return Err(Error::InvalidConfig(
            "boundary probe needs an iterative attack".into(),
        ));
    }
    let mut d = Vec::new();
    let x_adv = run_attack(spec, params, x, y, cfg, rng, Some(&mut d))?;
    Ok(ProbeResult { x_adv, d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_blobs;
    use crate::nn::LayerParams;
    use crate::rng::stream;

    fn small_net(seed: u64) -> (NetworkSpec, ParamSet) {
        let spec = NetworkSpec::mlp(4, &[6], 3).unwrap();
        let params = spec.init_params(&mut stream(seed, "net", &[]));
        (spec, params)
    }

    fn random_batch(seed: u64, m: usize, d: usize, c: usize) -> (Tensor, Vec<usize>) {
        let mut rng = stream(seed, "batch", &[]);
        let data: Vec<f64> = (0..m * d).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        (Tensor::new(vec![m, d], data).unwrap(), labels)
    }

    fn ball_ok(x: &Tensor, x_adv: &Tensor, eps: f64) -> bool {
        x_adv
            .data()
            .iter()
            .zip(x.data())
            .all(|(&a, &o)| (a - o).abs() <= eps + 1e-12 && (0.0..=1.0).contains(&a))
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let (spec, params) = small_net(1);
        let (x, y) = random_batch(1, 3, 4, 3);
        let x_adv = fgsm(&spec, &params, &x, &y, 0.0).unwrap();
        assert_eq!(x_adv, x);
    }

    #[test]
    fn attacks_respect_ball_and_range_and_do_not_mutate_inputs() {
        for seed in 0..10u64 {
            let (spec, params) = small_net(seed);
            let (x, y) = random_batch(seed, 4, 4, 3);
            let x_before = x.clone();
            let params_before = params.clone();
            for cfg in [
                AttackConfig::fgsm(0.2),
                AttackConfig::pgd(0.15, 0.04, 5),
                AttackConfig::mim(0.15, 0.04, 5, 1.0),
            ] {
                let mut rng = stream(seed, "atk", &[]);
                let x_adv = attack(&spec, &params, &x, &y, &cfg, &mut rng).unwrap();
                assert!(ball_ok(&x, &x_adv, cfg.epsilon), "{:?}", cfg.kind);
            }
            assert_eq!(x, x_before);
            assert_eq!(params, params_before);
        }
    }

    #[test]
    fn pgd_zero_epsilon_is_identity_for_any_steps() {
        let (spec, params) = small_net(2);
        let (x, y) = random_batch(2, 3, 4, 3);
        let cfg = AttackConfig::pgd(0.0, 0.1, 7);
        let mut rng = stream(0, "atk", &[]);
        let x_adv = pgd(&spec, &params, &x, &y, &cfg, &mut rng).unwrap();
        assert_eq!(x_adv, x);
    }

    #[test]
    fn single_step_pgd_with_large_alpha_equals_fgsm() {
        let (spec, params) = small_net(3);
        let (x, y) = random_batch(3, 4, 4, 3);
        let fg = fgsm(&spec, &params, &x, &y, 0.2).unwrap();
        for alpha in [0.2, 0.5, 3.0] {
            let cfg = AttackConfig::pgd(0.2, alpha, 1);
            let mut rng = stream(0, "atk", &[]);
            let pg = pgd(&spec, &params, &x, &y, &cfg, &mut rng).unwrap();
            assert_eq!(pg, fg, "alpha = {alpha}");
        }
    }

    #[test]
    fn mim_without_momentum_matches_pgd() {
        // sign(g / ||g||_1) == sign(g): one L1-normalized step per iterate.
        let (spec, params) = small_net(4);
        let (x, y) = random_batch(4, 4, 4, 3);
        let mut rng_a = stream(0, "atk", &[]);
        let mut rng_b = stream(0, "atk", &[]);
        let pg = pgd(&spec, &params, &x, &y, &AttackConfig::pgd(0.1, 0.03, 6), &mut rng_a).unwrap();
        let mi = mim(
            &spec,
            &params,
            &x,
            &y,
            &AttackConfig::mim(0.1, 0.03, 6, 0.0),
            &mut rng_b,
        )
        .unwrap();
        assert_eq!(pg, mi);
    }

    #[test]
    fn random_start_is_seed_deterministic() {
        let (spec, params) = small_net(5);
        let (x, y) = random_batch(5, 3, 4, 3);
        let mut cfg = AttackConfig::pgd(0.2, 0.05, 4);
        cfg.random_start = true;
        let a = pgd(&spec, &params, &x, &y, &cfg, &mut stream(9, "rs", &[])).unwrap();
        let b = pgd(&spec, &params, &x, &y, &cfg, &mut stream(9, "rs", &[])).unwrap();
        let c = pgd(&spec, &params, &x, &y, &cfg, &mut stream(10, "rs", &[])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stronger_attack_achieves_higher_loss() {
        // Train a small model first; the ascent ordering is about models
        // with real decision structure, not random initializations.
        let ds = make_synthetic_blobs(64, 2, 0.1, 6).unwrap();
        let spec = NetworkSpec::mlp(2, &[8], 2).unwrap();
        let mut params = spec.init_params(&mut stream(6, "net", &[]));
        let all: Vec<usize> = (0..ds.len()).collect();
        let (x, y) = ds.batch(&all);
        for _ in 0..60 {
            let (logits, trace) = forward(&spec, &params, &x).unwrap();
            let (_, lg) = softmax_cross_entropy(&logits, &y).unwrap();
            let grads = crate::nn::backward_params(&trace, &lg).unwrap();
            params = crate::nn::sgd_step(&params, &grads, 0.5).unwrap();
        }

        let fg = fgsm(&spec, &params, &x, &y, 0.2).unwrap();
        let cfg = AttackConfig::pgd(0.2, 0.02, 20);
        let mut rng = stream(0, "atk", &[]);
        let pg = pgd(&spec, &params, &x, &y, &cfg, &mut rng).unwrap();
        let loss = |xs: &Tensor| {
            let (logits, _) = forward(&spec, &params, xs).unwrap();
            softmax_cross_entropy(&logits, &y).unwrap().0
        };
        assert!(
            loss(&pg) >= loss(&fg),
            "pgd loss {} < fgsm loss {}",
            loss(&pg),
            loss(&fg)
        );
    }

    #[test]
    fn probe_rejects_fgsm_configs() {
        let (spec, params) = small_net(7);
        let (x, y) = random_batch(7, 2, 4, 3);
        let mut rng = stream(0, "atk", &[]);
        assert!(
            boundary_probe(&spec, &params, &x, &y, &AttackConfig::fgsm(0.1), &mut rng).is_err()
        );
    }

    #[test]
    fn probe_distance_is_zero_for_misclassified_and_capped_at_eps_zero() {
        let (spec, params) = small_net(8);
        let (x, _) = random_batch(8, 6, 4, 3);
        let (logits, _) = forward(&spec, &params, &x).unwrap();
        // Labels chosen so half the batch is wrong from the start.
        let preds: Vec<usize> = (0..6).map(|i| argmax(logits.row(i))).collect();
        let labels: Vec<usize> = preds
            .iter()
            .enumerate()
            .map(|(i, &p)| if i % 2 == 0 { p } else { (p + 1) % 3 })
            .collect();

        let cfg = AttackConfig::pgd(0.0, 0.05, 5);
        let mut rng = stream(0, "atk", &[]);
        let probe = boundary_probe(&spec, &params, &x, &labels, &cfg, &mut rng).unwrap();
        for (i, &di) in probe.d.iter().enumerate() {
            if i % 2 == 0 {
                // Correctly classified and unable to move: never flips.
                assert_eq!(di, 5, "sample {i}");
            } else {
                assert_eq!(di, 0, "sample {i}");
            }
        }
        assert_eq!(probe.x_adv, x);
    }

    #[test]
    fn probe_distance_is_prefix_stable_as_steps_grow() {
        let (spec, params) = small_net(9);
        let (x, y) = random_batch(9, 10, 4, 3);
        let mut rng = stream(0, "atk", &[]);
        let short = boundary_probe(
            &spec,
            &params,
            &x,
            &y,
            &AttackConfig::pgd(0.3, 0.03, 6),
            &mut rng,
        )
        .unwrap();
        let long = boundary_probe(
            &spec,
            &params,
            &x,
            &y,
            &AttackConfig::pgd(0.3, 0.03, 12),
            &mut rng,
        )
        .unwrap();
        for (i, (&ds, &dl)) in short.d.iter().zip(&long.d).enumerate() {
            if ds < 6 {
                assert_eq!(ds, dl, "sample {i}");
            } else {
                assert!(dl >= 6, "sample {i}");
            }
        }
    }

    #[test]
    fn probe_distance_tracks_boundary_proximity_on_blobs() {
        // Two blobs split by the vertical line x0 = 0.5; a hand-built linear
        // model classifies by that line, so samples closer to it should flip
        // in fewer PGD steps.
        let ds = make_synthetic_blobs(60, 2, 0.12, 31).unwrap();
        let spec = NetworkSpec::mlp(2, &[], 2).unwrap();
        let a = 30.0;
        let params = ParamSet::from_layers(vec![LayerParams {
            name: "dense0".into(),
            weight: Tensor::new(vec![2, 2], vec![a, -a, 0.0, 0.0]).unwrap(),
            bias: Tensor::new(vec![2], vec![-0.5 * a, 0.5 * a]).unwrap(),
        }]);

        // Keep only correctly classified samples so d measures crossing time.
        let all: Vec<usize> = (0..ds.len()).collect();
        let (x_all, y_all) = ds.batch(&all);
        let (logits, _) = forward(&spec, &params, &x_all).unwrap();
        let keep: Vec<usize> = (0..ds.len())
            .filter(|&i| argmax(logits.row(i)) == y_all[i])
            .collect();
        let (x, y) = ds.batch(&keep);

        let cfg = AttackConfig::pgd(0.3, 0.01, 40);
        let mut rng = stream(0, "atk", &[]);
        let probe = boundary_probe(&spec, &params, &x, &y, &cfg, &mut rng).unwrap();

        // Spearman rank correlation between distance-to-boundary and d.
        let margin: Vec<f64> = (0..x.rows()).map(|i| (x.row(i)[0] - 0.5).abs()).collect();
        let rho = spearman(&margin, &probe.d.iter().map(|&v| v as f64).collect::<Vec<_>>());
        assert!(
            rho > 0.8,
            "distance and flip step should rank together, rho = {rho}"
        );
    }

    fn ranks(values: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let mut out = vec![0.0; values.len()];
        for (rank, &idx) in order.iter().enumerate() {
            out[idx] = rank as f64;
        }
        out
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let mean = (n - 1.0) / 2.0;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in ra.iter().zip(&rb) {
            cov += (x - mean) * (y - mean);
            va += (x - mean) * (x - mean);
            vb += (y - mean) * (y - mean);
        }
        cov / (va.sqrt() * vb.sqrt())
    }
}
