//! Successive halving over federated training runs, with random search as
//! the one-elimination special case and FedEx as an optional inner tuner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fedex::{fedex_round, sha_discounted_score, FedExState, StepSchedule, Telemetry};
use super::schedule::EliminationSchedule;
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::fedmethods::{run_round, sample_clients, ClientConfigs, ServerHyperparams, ServerState, Target};
use crate::hyperspace::{Config, SearchSpace};
use crate::models::{Architecture, LocalHyperparams, ModelParams};
use crate::rng::{derive_seed, stream, Stream};

/// What advancing one arm by some rounds produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Advance<R> {
    /// Scores of the rounds that actually ran.
    pub scores: Vec<f64>,
    pub executed: usize,
    /// Scheduled rounds skipped because the arm failed.
    pub forfeited: usize,
    pub failed: bool,
    pub records: Vec<R>,
}

/// Trains arms on behalf of [`successive_halving`].
pub trait StageRunner: Sync {
    type Arm: Send;
    type Record: Send;
    fn advance(&self, arm: &mut Self::Arm, rounds: usize) -> Advance<Self::Record>;
}

/// State handed to the observer after every stage that ran.
pub struct Checkpoint<'a, A> {
    /// `1..=R` for elimination stages and `R + 1` for the survivor's final run.
    pub stage: usize,
    /// Rounds consumed so far, forfeited ones included.
    pub consumed: usize,
    /// Arms that ran in this stage, before elimination.
    pub alive: &'a [usize],
    /// Elimination score of every arm; `+inf` for failed arms.
    pub scores: &'a [f64],
    pub arms: &'a [A],
}

impl<A> Checkpoint<'_, A> {
    /// Alive arm with the lowest score, lowest index on ties.
    pub fn leader(&self) -> usize {
        let mut best = self.alive[0];
        for &a in self.alive {
            if self.scores[a] < self.scores[best] {
                best = a;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub alive: Vec<usize>,
    pub survivors: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug)]
pub struct ShaOutcome<A, R> {
    pub best: usize,
    pub arms: Vec<A>,
    pub stages: Vec<StageSummary>,
    pub records: Vec<R>,
    pub scores: Vec<f64>,
    pub rounds_executed: usize,
    pub rounds_forfeited: usize,
}

impl<A, R> ShaOutcome<A, R> {
    pub fn rounds_consumed(&self) -> usize {
        self.rounds_executed + self.rounds_forfeited
    }
}

/// The `keep` arms of `alive` with the lowest scores, lowest index first on
/// ties, returned in index order.
pub fn select_survivors(alive: &[usize], scores: &[f64], keep: usize) -> Vec<usize> {
    let mut ranked = alive.to_vec();
    ranked.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    ranked.truncate(keep);
    ranked.sort_unstable();
    ranked
}

/// Runs the elimination loop. Arms within a stage advance in parallel; the
/// elimination between stages is a barrier and records are merged in arm
/// order.
pub fn successive_halving<S: StageRunner>(
    schedule: &EliminationSchedule,
    runner: &S,
    mut arms: Vec<S::Arm>,
    discount: f64,
    observer: &mut dyn FnMut(&Checkpoint<'_, S::Arm>),
) -> ShaOutcome<S::Arm, S::Record> {
    let n = arms.len();
    assert_eq!(n, schedule.initial_arms(), "arm count must match the schedule");
    let mut history: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut failed = vec![false; n];
    let mut scores = vec![f64::INFINITY; n];
    let mut alive: Vec<usize> = (0..n).collect();
    let mut stages = Vec::with_capacity(schedule.rounds);
    let mut records = Vec::new();
    let (mut executed, mut forfeited) = (0, 0);

    let last = schedule.rounds + 1;
    for stage in 1..=last {
        let width = if stage == last {
            schedule.final_rounds()
        } else {
            schedule.stage_rounds(stage)
        };
        if width > 0 {
            let mut mask = vec![false; n];
            alive.iter().for_each(|&a| mask[a] = true);
            let advanced: Vec<(usize, Advance<S::Record>)> = arms
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| mask[*i])
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|(i, arm)| (i, runner.advance(arm, width)))
                .collect();
            for (i, adv) in advanced {
                executed += adv.executed;
                forfeited += adv.forfeited;
                history[i].extend(adv.scores);
                failed[i] |= adv.failed;
                scores[i] = if failed[i] || history[i].is_empty() {
                    f64::INFINITY
                } else {
                    sha_discounted_score(&history[i], discount)
                };
                records.extend(adv.records);
            }
            observer(&Checkpoint {
                stage,
                consumed: executed + forfeited,
                alive: &alive,
                scores: &scores,
                arms: &arms,
            });
        }
        if stage < last {
            let survivors = select_survivors(&alive, &scores, schedule.survivors_after(stage));
            stages.push(StageSummary {
                stage,
                alive: alive.clone(),
                survivors: survivors.clone(),
                scores: alive.iter().map(|&a| scores[a]).collect(),
            });
            alive = survivors;
        }
    }
    ShaOutcome {
        best: alive[0],
        arms,
        stages,
        records,
        scores,
        rounds_executed: executed,
        rounds_forfeited: forfeited,
    }
}

/// Settings of the FedEx inner tuner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedExSettings {
    pub k: usize,
    pub epsilon: f64,
    pub schedule: StepSchedule,
    pub discount: f64,
}

impl Default for FedExSettings {
    fn default() -> Self {
        Self {
            k: 27,
            epsilon: 0.1,
            schedule: StepSchedule::Aggressive,
            discount: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InnerTuner {
    Plain,
    FedEx(FedExSettings),
}

/// Settings shared by every arm of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShaSettings {
    /// Clients sampled per communication round.
    pub clients_per_round: usize,
    pub target: Target,
    /// Discount of past rounds in the elimination score; 0 uses the last round.
    pub elimination_discount: f64,
    /// Keep a per-round record of every arm.
    pub trace: bool,
}

impl Default for ShaSettings {
    fn default() -> Self {
        Self {
            clients_per_round: 10,
            target: Target::Personalized,
            elimination_discount: 0.0,
            trace: false,
        }
    }
}

/// One hyperparameter configuration under evaluation with its model.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub id: usize,
    pub server_config: Config,
    pub server: ServerHyperparams,
    /// One configuration for plain arms, k for FedEx arms.
    pub client_configs: Vec<Config>,
    pub local: Vec<LocalHyperparams>,
    pub state: ServerState,
    pub fedex: Option<FedExState>,
    /// Score of every round run so far.
    pub scores: Vec<f64>,
    pub rounds_used: usize,
    pub rounds_forfeited: usize,
    pub failure: Option<Error>,
}

impl Arm {
    pub fn latest_score(&self) -> Option<f64> {
        self.scores.last().copied()
    }

    /// Index into `client_configs` of the configuration the arm hands out.
    pub fn chosen(&self) -> usize {
        self.fedex.as_ref().map_or(0, |f| f.finalize())
    }

    /// Final model, chosen local configuration and, for FedEx arms, theta.
    pub fn finalize(&self) -> (&ModelParams, &Config, &LocalHyperparams, Option<&[f64]>) {
        let j = self.chosen();
        (
            &self.state.model,
            &self.client_configs[j],
            &self.local[j],
            self.fedex.as_ref().map(|f| f.theta.as_slice()),
        )
    }
}

/// Samples the `n` arms of a sweep.
///
/// Arm `a` draws its server and first client configuration from the
/// `(seed, a)` configuration stream and its model from the `(seed, a)`
/// initialization stream, so plain and FedEx sweeps on the same seed start
/// from identical `(b, c_1, w)`; the other FedEx configurations come from a
/// separate perturbation stream.
pub fn sample_arms(space: &SearchSpace, n: usize, arch: Architecture, inner: &InnerTuner, seed: u64) -> Vec<Arm> {
    (0..n)
        .map(|id| {
            let tag = [id as u64];
            let full = space.sample_uniform(&mut stream(seed, Stream::ArmConfig, &tag));
            let (client_configs, fedex) = match inner {
                InnerTuner::Plain => (vec![full.client.clone()], None),
                InnerTuner::FedEx(f) => {
                    let mut rng = stream(seed, Stream::Perturb, &tag);
                    let arms = space.perturbed_arms(&full.client, f.k, f.epsilon, &mut rng);
                    (arms, Some(FedExState::new(f.k, f.schedule, f.discount)))
                }
            };
            let model = ModelParams::init(arch, &mut stream(seed, Stream::ModelInit, &tag));
            let mut failure = None;
            let server = ServerHyperparams::from_config(space, &full.server).unwrap_or_else(|e| {
                failure = Some(e);
                ServerHyperparams::fedavg()
            });
            let local = client_configs
                .iter()
                .map(|c| {
                    LocalHyperparams::from_config(space, c).unwrap_or_else(|e| {
                        failure.get_or_insert(e);
                        LocalHyperparams::default()
                    })
                })
                .collect();
            Arm {
                id,
                server_config: full.server,
                server,
                client_configs,
                local,
                state: ServerState::new(model),
                fedex,
                scores: Vec::new(),
                rounds_used: 0,
                rounds_forfeited: 0,
                failure,
            }
        })
        .collect()
}

/// Per-round record of one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub arm: usize,
    pub round: usize,
    pub score: f64,
    pub target: Target,
    pub theta: Option<Vec<f64>>,
    pub telemetry: Option<Telemetry>,
}

/// Advances arms by real federated training rounds.
pub struct FederatedRunner<'a> {
    pub clients: &'a [ClientDataset],
    pub settings: ShaSettings,
    pub seed: u64,
}

impl FederatedRunner<'_> {
    fn round(&self, arm: &mut Arm) -> Result<(f64, Option<Telemetry>)> {
        let t = arm.state.round as u64;
        let tag = [arm.id as u64, t];
        let batch = self.settings.clients_per_round.min(self.clients.len());
        let picked = sample_clients(self.clients.len(), batch, &mut stream(self.seed, Stream::ClientSelect, &tag));
        let batch: Vec<&ClientDataset> = picked.iter().map(|&i| &self.clients[i]).collect();
        let train_seed = derive_seed(self.seed, &[Stream::LocalTrain as u64, arm.id as u64, t]);
        let target = self.settings.target;
        match &mut arm.fedex {
            None => {
                let configs = ClientConfigs::Fixed(&arm.local[0]);
                let (next, _, score) = run_round(&arm.state, &batch, configs, &arm.server, target, train_seed)?;
                arm.state = next;
                Ok((score, None))
            }
            Some(fx) => {
                let mut theta_rng = stream(self.seed, Stream::ThetaSample, &tag);
                let (next, _, score, tel) =
                    fedex_round(fx, &arm.state, &batch, &arm.local, &arm.server, target, train_seed, &mut theta_rng)?;
                arm.state = next;
                Ok((score, Some(tel)))
            }
        }
    }
}

impl StageRunner for FederatedRunner<'_> {
    type Arm = Arm;
    type Record = RoundRecord;

    fn advance(&self, arm: &mut Arm, rounds: usize) -> Advance<RoundRecord> {
        let mut adv = Advance {
            scores: Vec::with_capacity(rounds),
            executed: 0,
            forfeited: 0,
            failed: arm.failure.is_some(),
            records: Vec::new(),
        };
        for done in 0..rounds {
            if arm.failure.is_some() {
                adv.forfeited = rounds - done;
                break;
            }
            let round = arm.state.round;
            match self.round(arm) {
                Ok((score, telemetry)) => {
                    adv.scores.push(score);
                    adv.executed += 1;
                    arm.scores.push(score);
                    if self.settings.trace {
                        adv.records.push(RoundRecord {
                            arm: arm.id,
                            round,
                            score,
                            target: self.settings.target,
                            theta: arm.fedex.as_ref().map(|f| f.theta.clone()),
                            telemetry,
                        });
                    }
                }
                Err(e) => {
                    arm.failure = Some(e);
                    adv.failed = true;
                    // the failed round still cost a communication round
                    adv.executed += 1;
                    adv.forfeited = rounds - done - 1;
                    break;
                }
            }
        }
        arm.rounds_used += adv.executed;
        arm.rounds_forfeited += adv.forfeited;
        adv
    }
}

/// Runs a full sweep on one federation.
#[allow(clippy::too_many_arguments)]
pub fn run_sha(
    space: &SearchSpace,
    schedule: &EliminationSchedule,
    clients: &[ClientDataset],
    arch: Architecture,
    settings: ShaSettings,
    inner: &InnerTuner,
    seed: u64,
    observer: &mut dyn FnMut(&Checkpoint<'_, Arm>),
) -> Result<ShaOutcome<Arm, RoundRecord>> {
    if clients.is_empty() || settings.clients_per_round == 0 {
        return Err(Error::ZeroTrainSize);
    }
    if let InnerTuner::FedEx(f) = inner {
        if f.k == 0 {
            return Err(Error::Config("fedex.k must be at least 1".into()));
        }
        if !(f.epsilon >= 0.0 && f.epsilon.is_finite()) {
            return Err(Error::Config(format!("fedex.epsilon must be >= 0, got {}", f.epsilon)));
        }
        if !(0.0..=1.0).contains(&f.discount) {
            return Err(Error::Config(format!("fedex.discount must lie in [0, 1], got {}", f.discount)));
        }
    }
    let arms = sample_arms(space, schedule.initial_arms(), arch, inner, seed);
    let runner = FederatedRunner { clients, settings, seed };
    Ok(successive_halving(schedule, &runner, arms, settings.elimination_discount, observer))
}
