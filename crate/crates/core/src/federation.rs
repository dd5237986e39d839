//! Synchronous federated training: client selection, local adversarial
//! training against a frozen copy of the broadcast global model, and
//! sample-count-weighted averaging.
//!
//! Per-client randomness derives from `(seed, round, client_id)`, and the
//! round's updates are aggregated in selection order; running clients in
//! parallel therefore produces the same trajectory as running them one by
//! one.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{attack, boundary_probe};
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::eval::RoundReport;
use crate::exec;
use crate::losses::{
    loss_alp, loss_dbfat, loss_pgd_at, loss_trades, weights_rho, DefenseConfig, DefenseKind,
    WeightVector,
};
use crate::nn::{
    backward_params, forward, sgd_step, softmax_cross_entropy, NetworkSpec, ParamSet,
};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Federation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    /// Total client count K.
    pub clients: usize,
    /// Clients sampled per round.
    pub clients_per_round: usize,
    /// Local epochs per selected client.
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rounds: u64,
    pub defense: DefenseConfig,
    /// Proximal coefficient; zero means pure FedAvg, positive adds the
    /// FedProx term `mu/2 * ||w - w_global||^2` to every local objective.
    pub prox_mu: f64,
    pub seed: u64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0
            || self.clients_per_round == 0
            || self.clients_per_round > self.clients
        {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= clients_per_round <= clients, got {}/{}",
                self.clients_per_round, self.clients
            )));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "local_epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.lr < 0.0 || self.prox_mu < 0.0 {
            return Err(Error::InvalidConfig(
                "learning rate and prox_mu must be >= 0".into(),
            ));
        }
        self.defense.attack.validate()
    }
}

/// Global model plus the round counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub global_params: ParamSet,
    pub round_index: u64,
}

impl ServerState {
    pub fn new(spec: &NetworkSpec, seed: u64) -> Self {
        Self {
            global_params: spec.init_params(&mut stream(seed, "init", &[])),
            round_index: 0,
        }
    }
}

/// One client's trained parameters and sample count for aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamSet,
    pub n_k: usize,
    /// Mean training loss over all local batches, for reporting.
    pub mean_loss: f64,
}

/// `count` distinct ids drawn uniformly without replacement from `0..k`,
/// deterministic in `(seed, round_index)`. Returned sorted so downstream
/// iteration order is stable.
pub fn select_clients(k: usize, count: usize, round_index: u64, seed: u64) -> Result<Vec<usize>> {
    if count > k {
        return Err(Error::InvalidConfig(format!(
            "cannot select {count} of {k} clients"
        )));
    }
    let mut rng = stream(seed, "select", &[round_index]);
    let mut ids = rand::seq::index::sample(&mut rng, k, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Loss value and parameter gradients for one batch under the configured
/// defense. The broadcast `global_params` stay frozen: for the KL term they
/// only ever produce logits, never gradients.
fn defense_backward(
    spec: &NetworkSpec,
    params: &ParamSet,
    global_params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    defense: &DefenseConfig,
    rng: &mut crate::rng::Prng,
) -> Result<(f64, ParamSet)> {
    match defense.kind {
        DefenseKind::Plain => {
            let (logits, trace) = forward(spec, params, x)?;
            let (loss, lg) = softmax_cross_entropy(&logits, y)?;
            Ok((loss, backward_params(&trace, &lg)?))
        }
        DefenseKind::PgdAt => {
            let x_adv = attack(spec, params, x, y, &defense.attack, rng)?;
            let (logits, trace) = forward(spec, params, &x_adv)?;
            let (loss, lg) = loss_pgd_at(&logits, y)?;
            Ok((loss, backward_params(&trace, &lg)?))
        }
        DefenseKind::Alp => {
            let x_adv = attack(spec, params, x, y, &defense.attack, rng)?;
            let (logits_adv, trace_adv) = forward(spec, params, &x_adv)?;
            let (logits_cln, trace_cln) = forward(spec, params, x)?;
            let (loss, g_adv, g_cln) = loss_alp(&logits_adv, &logits_cln, y, defense.beta)?;
            let grads = backward_params(&trace_adv, &g_adv)?
                .add(&backward_params(&trace_cln, &g_cln)?)?;
            Ok((loss, grads))
        }
        DefenseKind::Trades => {
            let x_adv = attack(spec, params, x, y, &defense.attack, rng)?;
            let (logits_cln, trace_cln) = forward(spec, params, x)?;
            let (logits_adv, trace_adv) = forward(spec, params, &x_adv)?;
            let (loss, g_cln, g_adv) = loss_trades(&logits_cln, &logits_adv, y, defense.beta)?;
            let grads = backward_params(&trace_cln, &g_cln)?
                .add(&backward_params(&trace_adv, &g_adv)?)?;
            Ok((loss, grads))
        }
        DefenseKind::Dbfat => {
            let probe = boundary_probe(spec, params, x, y, &defense.attack, rng)?;
            let rho = if defense.disable_reweighting {
                WeightVector::ones(y.len())
            } else {
                weights_rho(&probe.d, defense.attack.steps)?
            };
            let (logits_adv, trace) = forward(spec, params, &probe.x_adv)?;
            let (logits_glob, _) = forward(spec, global_params, x)?;
            let (loss, lg) = loss_dbfat(&logits_adv, y, &logits_glob, &rho, defense.beta)?;
            Ok((loss, backward_params(&trace, &lg)?))
        }
    }
}

/// Local training on one shard: `local_epochs` passes of shuffled
/// mini-batches starting from the broadcast parameters.
pub fn local_train(
    spec: &NetworkSpec,
    dataset: &Dataset,
    shard: &ClientShard,
    global_params: &ParamSet,
    cfg: &FedConfig,
    round_index: u64,
) -> Result<ClientUpdate> {
    if shard.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "client {} has an empty shard",
            shard.client_id
        )));
    }
    let mut rng = stream(cfg.seed, "local", &[round_index, shard.client_id as u64]);
    let mut params = global_params.clone();
    let mut order = shard.indices.clone();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;

    for _epoch in 0..cfg.local_epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = dataset.batch(chunk);
            let (loss, mut grads) =
                defense_backward(spec, &params, global_params, &x, &y, &cfg.defense, &mut rng)?;
            let mut total_loss = loss;
            if cfg.prox_mu > 0.0 {
                total_loss += 0.5 * cfg.prox_mu * params.sq_distance(global_params)?;
                grads = grads.axpy(cfg.prox_mu, &params.sub(global_params)?)?;
            }
            if !total_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    round: round_index,
                    client: shard.client_id,
                    batch: batches,
                });
            }
            params = sgd_step(&params, &grads, cfg.lr)?;
            loss_sum += total_loss;
            batches += 1;
        }
    }

    Ok(ClientUpdate {
        client_id: shard.client_id,
        params,
        n_k: shard.n_k(),
        mean_loss: loss_sum / batches as f64,
    })
}

/// Sample-count-weighted average `sum_k (n_k / n) * w_k`.
///
/// Computed relative to the first update, `w_1 + sum_k c_k * (w_k - w_1)`,
/// which is the same weighted mean but conserves the parameters bitwise when
/// every client returns identical weights.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<ParamSet> {
    let first = updates
        .first()
        .ok_or_else(|| Error::InvalidConfig("no updates to aggregate".into()))?;
    let n: usize = updates.iter().map(|u| u.n_k).sum();
    if n == 0 {
        return Err(Error::InvalidConfig("aggregate over zero samples".into()));
    }
    let mut acc = first.params.clone();
    for update in &updates[1..] {
        let coef = update.n_k as f64 / n as f64;
        let delta = update.params.sub(&first.params)?;
        acc = acc.axpy(coef, &delta)?;
    }
    Ok(acc)
}

/// One synchronous round: select from the non-empty shards, train the
/// selected clients (in parallel when enabled), aggregate, advance the
/// round counter. The report carries per-client losses and wall time;
/// metrics are filled in by the caller on evaluation rounds.
pub fn run_round(
    server: ServerState,
    spec: &NetworkSpec,
    dataset: &Dataset,
    shards: &[ClientShard],
    cfg: &FedConfig,
) -> Result<(ServerState, RoundReport)> {
    cfg.validate()?;
    let started = Instant::now();

    // Empty shards stay in the client list but are never selected.
    let eligible: Vec<usize> = (0..shards.len())
        .filter(|&i| !shards[i].is_empty())
        .collect();
    if eligible.len() < cfg.clients_per_round {
        return Err(Error::InvalidConfig(format!(
            "only {} non-empty shards for {} clients per round",
            eligible.len(),
            cfg.clients_per_round
        )));
    }
    let picks = select_clients(
        eligible.len(),
        cfg.clients_per_round,
        server.round_index,
        cfg.seed,
    )?;
    let chosen: Vec<usize> = picks.into_iter().map(|i| eligible[i]).collect();

    let updates = exec::try_map(&chosen, |&cid| {
        local_train(
            spec,
            dataset,
            &shards[cid],
            &server.global_params,
            cfg,
            server.round_index,
        )
    })?;

    let global_params = aggregate_fedavg(&updates)?;
    let report = RoundReport {
        round: server.round_index,
        metrics: None,
        client_losses: updates.iter().map(|u| (u.client_id, u.mean_loss)).collect(),
        wall_ms: started.elapsed().as_millis() as u64,
        config_hash: String::new(),
    };
    Ok((
        ServerState {
            global_params,
            round_index: server.round_index + 1,
        },
        report,
    ))
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON snapshot of an architecture, its weights, and the round
/// they were taken at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: NetworkSpec,
    pub round: u64,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(spec: NetworkSpec, round: u64, params: ParamSet) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            spec,
            round,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::InvalidConfig(format!("checkpoint serialization: {e}")))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&json).map_err(|e| {
            Error::InvalidConfig(format!("{}: not a checkpoint: {e}", path.display()))
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "checkpoint version {} unsupported (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        ckpt.spec.validate()?;
        ckpt.spec.check_params(&ckpt.params)?;
        Ok(ckpt)
    }
}
