//! Server aggregation and the communication round shared by every tuner.
//!
//! FedAvg, FedProx and Reptile all run through the same pair of routines:
//! [`run_round`] performs local training on a batch of clients and
//! [`aggregate`] folds the results back into the global model. FedProx is
//! local training with `prox_mu > 0`; FedAvg is aggregation with a unit step
//! and no momentum; Reptile uses a step below one.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::hyperspace::{Config, SearchSpace};
use crate::models::{self, LocalHyperparams, ModelParams};
use crate::rng::{derive_seed, SimRng};
use rand::SeedableRng;

/// Which model the validation signal is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// The shared model before local training.
    Global,
    /// Each client's locally trained model.
    Personalized,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Global => "global",
            Target::Personalized => "personalized",
        }
    }
}

/// Server configuration `b`: step `alpha_t = lr * decay^t` and heavy-ball
/// momentum on the pseudo-update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerHyperparams {
    pub lr: f64,
    pub momentum: f64,
    pub decay: f64,
}

impl Default for ServerHyperparams {
    fn default() -> Self {
        Self::fedavg()
    }
}

impl ServerHyperparams {
    /// Plain weighted averaging.
    pub fn fedavg() -> Self {
        Self {
            lr: 1.0,
            momentum: 0.0,
            decay: 1.0,
        }
    }

    /// Reads `server_lr`, `server_momentum` and `server_decay`; absent names
    /// fall back to FedAvg values.
    pub fn from_config(space: &SearchSpace, config: &Config) -> Result<Self> {
        let d = Self::fedavg();
        let b = Self {
            lr: space.real(config, "server_lr").unwrap_or(d.lr),
            momentum: space.real(config, "server_momentum").unwrap_or(d.momentum),
            decay: space.real(config, "server_decay").unwrap_or(d.decay),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, detail: String| {
            Err(Error::OutOfDomain {
                name: name.into(),
                detail,
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("server_lr", format!("{} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("server_momentum", format!("{} not in [0, 1)", self.momentum));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("server_decay", format!("{} not in (0, 1]", self.decay));
        }
        Ok(())
    }

    pub fn step_size(&self, round: usize) -> f64 {
        self.lr * self.decay.powi(round as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub model: ModelParams,
    pub velocity: Vec<f64>,
    pub round: usize,
}

impl ServerState {
    pub fn new(model: ModelParams) -> Self {
        let velocity = vec![0.0; model.len()];
        Self {
            model,
            velocity,
            round: 0,
        }
    }
}

/// What one client sends back after a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client: usize,
    /// Index of the configuration the client trained with (0 when fixed).
    pub arm: usize,
    pub model: ModelParams,
    /// Validation loss of the locally trained model.
    pub local_loss: f64,
    /// Validation loss of the pre-round global model, when requested.
    pub global_loss: Option<f64>,
    pub train_size: usize,
    pub val_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub updates: Vec<ClientUpdate>,
}

impl RoundResult {
    /// `sum |V| L / sum |V|` over the round's clients for the given target.
    pub fn score(&self, target: Target) -> Result<f64> {
        let total: usize = self.updates.iter().map(|u| u.val_size).sum();
        if total == 0 {
            return Err(Error::ZeroValidationSize);
        }
        let weighted: f64 = self
            .updates
            .iter()
            .map(|u| {
                let l = match target {
                    Target::Personalized => u.local_loss,
                    Target::Global => u.global_loss.unwrap_or(f64::NAN),
                };
                u.val_size as f64 * l
            })
            .sum();
        Ok(weighted / total as f64)
    }

    pub fn local_losses(&self) -> Vec<f64> {
        self.updates.iter().map(|u| u.local_loss).collect()
    }

    pub fn val_sizes(&self) -> Vec<usize> {
        self.updates.iter().map(|u| u.val_size).collect()
    }

    pub fn arms(&self) -> Vec<usize> {
        self.updates.iter().map(|u| u.arm).collect()
    }
}

/// One aggregation step.
///
/// `delta = (sum |T_i| w_i) / (sum |T_i|) - w`, `v <- momentum v + delta`,
/// `w <- w + alpha_t v`. With zero momentum this is exactly
/// `(1 - alpha_t) w + alpha_t * weighted_mean`.
pub fn aggregate(state: &ServerState, round: &RoundResult, b: &ServerHyperparams) -> Result<ServerState> {
    let total: usize = round.updates.iter().map(|u| u.train_size).sum();
    if round.updates.is_empty() || total == 0 {
        return Err(Error::ZeroTrainSize);
    }
    let d = state.model.len();
    let mut mean = vec![0.0; d];
    for u in &round.updates {
        let weight = u.train_size as f64;
        mean.iter_mut().zip(&u.model.weights).for_each(|(m, w)| *m += weight * w);
    }
    let total = total as f64;
    let alpha = b.step_size(state.round);
    let mut next = state.clone();
    for i in 0..d {
        let delta = mean[i] / total - state.model.weights[i];
        next.velocity[i] = b.momentum * state.velocity[i] + delta;
        next.model.weights[i] = state.model.weights[i] + alpha * next.velocity[i];
    }
    next.round += 1;
    Ok(next)
}

/// Where each client's local configuration comes from.
pub enum ClientConfigs<'a> {
    Fixed(&'a LocalHyperparams),
    /// Each client draws an index from `theta` and trains with that arm.
    Sampled {
        theta: &'a [f64],
        arms: &'a [LocalHyperparams],
        rng: &'a mut SimRng,
    },
}

/// Inverse-CDF draw from a categorical distribution.
pub fn sample_categorical(theta: &[f64], rng: &mut impl Rng) -> usize {
    if theta.len() == 1 {
        return 0;
    }
    let total: f64 = theta.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (j, &p) in theta.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // rounding left u at the very top: take the last arm with mass
    theta.iter().rposition(|&p| p > 0.0).unwrap_or(theta.len() - 1)
}

/// Samples `count` distinct client indices out of `pool`.
pub fn sample_clients(pool: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    rand::seq::index::sample(rng, pool, count.min(pool)).into_vec()
}

/// Runs one communication round.
///
/// Clients train in parallel from the current global model, each with its
/// own stream derived from `train_seed` and its slot in the batch; results
/// are reduced in slot order so the outcome does not depend on scheduling.
pub fn run_round(
    state: &ServerState,
    clients: &[&ClientDataset],
    configs: ClientConfigs<'_>,
    b: &ServerHyperparams,
    target: Target,
    train_seed: u64,
) -> Result<(ServerState, RoundResult, f64)> {
    if clients.is_empty() {
        return Err(Error::ZeroTrainSize);
    }
    let jobs: Vec<(usize, &LocalHyperparams)> = match configs {
        ClientConfigs::Fixed(c) => clients.iter().map(|_| (0, c)).collect(),
        ClientConfigs::Sampled { theta, arms, rng } => clients
            .iter()
            .map(|_| {
                let j = sample_categorical(theta, rng);
                (j, &arms[j])
            })
            .collect(),
    };

    let round = state.round;
    let w = &state.model;
    let outcomes: Vec<Result<ClientUpdate>> = clients
        .par_iter()
        .zip(jobs.par_iter())
        .enumerate()
        .map(|(slot, (client, &(arm, c)))| {
            let mut rng = SimRng::seed_from_u64(derive_seed(train_seed, &[slot as u64]));
            let trained = models::local_train(&client.train, w, c, w, &mut rng).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence {
                    round,
                    client: Some(client.id),
                },
                other => other,
            })?;
            let local_loss = models::loss(&trained, &client.val)?;
            let global_loss = match target {
                Target::Global => Some(models::loss(w, &client.val)?),
                Target::Personalized => None,
            };
            Ok(ClientUpdate {
                client: client.id,
                arm,
                model: trained,
                local_loss,
                global_loss,
                train_size: client.train.len(),
                val_size: client.val.len(),
            })
        })
        .collect();
    let updates = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let result = RoundResult { updates };
    let next = aggregate(state, &result, b)?;
    if !next.model.is_finite() {
        return Err(Error::Divergence { round, client: None });
    }
    let score = result.score(target)?;
    if !score.is_finite() {
        return Err(Error::Divergence { round, client: None });
    }
    Ok((next, result, score))
}
