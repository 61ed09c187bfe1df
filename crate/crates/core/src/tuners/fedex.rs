//! The FedEx inner tuner: a distribution over k local configurations
//! updated by exponentiated gradient from the clients' validation losses.

use num_traits::{FromPrimitive, NumOps, Zero};
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::fedmethods::{run_round, ClientConfigs, RoundResult, ServerHyperparams, ServerState, Target};
use crate::models::LocalHyperparams;
use crate::rng::SimRng;

/// Smallest probability an arm can be pushed down to.
const THETA_FLOOR: f64 = 1e-150;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// `sqrt(2 ln k)`
    Constant,
    /// `sqrt(2 ln k) / sqrt(sum_s |g_s|_inf^2)`
    Adaptive,
    /// `sqrt(2 ln k) / |g_t|_inf`
    #[default]
    Aggressive,
}

impl StepSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            StepSchedule::Constant => "constant",
            StepSchedule::Adaptive => "adaptive",
            StepSchedule::Aggressive => "aggressive",
        }
    }
}

impl std::str::FromStr for StepSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "adaptive" => Ok(Self::Adaptive),
            "aggressive" => Ok(Self::Aggressive),
            other => Err(Error::Config(format!("unknown step schedule `{other}`"))),
        }
    }
}

/// Importance-weighted estimate of the gradient of the expected validation
/// loss with respect to `theta`:
/// `g_j = sum_i |V_i| (L_i - lambda) [j(i) = j] / (theta_j sum_i |V_i|)`.
///
/// Generic so it can be checked in exact rational arithmetic.
pub fn grad_estimate<T>(losses: &[T], val_sizes: &[usize], sampled: &[usize], theta: &[T], lambda: &T) -> Result<Vec<T>>
where
    T: Clone + Zero + PartialEq + NumOps + FromPrimitive,
{
    assert_eq!(losses.len(), val_sizes.len());
    assert_eq!(losses.len(), sampled.len());
    let total: usize = val_sizes.iter().sum();
    if total == 0 {
        return Err(Error::ZeroValidationSize);
    }
    let k = theta.len();
    let mut grad = vec![T::zero(); k];
    for ((loss, &v), &j) in losses.iter().zip(val_sizes).zip(sampled) {
        if j >= k || theta[j] == T::zero() {
            return Err(Error::InvalidSampling { index: j });
        }
        let v = T::from_usize(v).expect("validation size fits the scalar type");
        grad[j] = grad[j].clone() + v * (loss.clone() - lambda.clone());
    }
    let total = T::from_usize(total).expect("validation size fits the scalar type");
    for (g, t) in grad.iter_mut().zip(theta) {
        if *g != T::zero() {
            *g = g.clone() / (t.clone() * total.clone());
        }
    }
    Ok(grad)
}

/// Mean of `history` with weight `discount^age`, age 0 being the latest
/// entry. Discount 0 keeps only the latest entry and 1 is the plain mean.
pub fn discounted_mean(history: &[f64], discount: f64) -> f64 {
    let n = history.len();
    let (mut num, mut den) = (0.0, 0.0);
    for (s, &x) in history.iter().enumerate() {
        let w = discount.powi((n - 1 - s) as i32);
        if w > 0.0 {
            num += w * x;
            den += w;
        }
    }
    num / den
}

/// Baseline `lambda_t` from the scores of rounds before `t`; zero before the
/// first round.
pub fn baseline_update(history: &[f64], discount: f64) -> f64 {
    if history.is_empty() {
        0.0
    } else {
        discounted_mean(history, discount)
    }
}

/// Elimination score of an arm from its per-round scores.
pub fn sha_discounted_score(history: &[f64], discount: f64) -> f64 {
    assert!(!history.is_empty(), "an arm needs at least one round before it can be scored");
    discounted_mean(history, discount)
}

/// Step size `eta_t` given the sup-norms of every gradient so far (the
/// current one last). Zero means no update.
pub fn step_size(kind: StepSchedule, k: usize, grad_norms: &[f64]) -> f64 {
    if k <= 1 {
        return 0.0;
    }
    let scale = (2.0 * (k as f64).ln()).sqrt();
    let eta = match kind {
        StepSchedule::Constant => return scale,
        StepSchedule::Adaptive => scale / grad_norms.iter().map(|g| g * g).sum::<f64>().sqrt(),
        StepSchedule::Aggressive => scale / grad_norms.last().copied().unwrap_or(0.0),
    };
    if eta.is_finite() {
        eta
    } else {
        0.0
    }
}

/// `theta * exp(-eta grad)` renormalized, computed in the log domain with a
/// floor that keeps every entry strictly positive.
pub fn exponentiated_update(theta: &[f64], grad: &[f64], eta: f64) -> Vec<f64> {
    if eta == 0.0 || grad.iter().all(|&g| g == 0.0) {
        return theta.to_vec();
    }
    let logits: Vec<f64> = theta.iter().zip(grad).map(|(t, g)| t.ln() - eta * g).collect();
    if logits.iter().any(|l| l.is_nan()) {
        return theta.to_vec();
    }
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return theta.to_vec();
    }
    let mut next: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    normalize(&mut next);
    if next.iter().any(|&p| p < THETA_FLOOR) {
        next.iter_mut().for_each(|p| *p = p.max(THETA_FLOOR));
        normalize(&mut next);
    }
    next
}

fn normalize(p: &mut [f64]) {
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(theta: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in theta.iter().enumerate() {
        if p > theta[best] {
            best = j;
        }
    }
    best
}

/// Shannon entropy in nats.
pub fn entropy(theta: &[f64]) -> f64 {
    -theta.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// What one FedEx update did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub lambda: f64,
    pub eta: f64,
    pub grad_norm: f64,
}

/// The distribution over an arm's k local configurations and the running
/// histories its step size and baseline depend on. It travels with the arm
/// across elimination stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedExState {
    pub theta: Vec<f64>,
    /// Per-round `sum |V| L / sum |V|` of the locally trained models.
    pub score_history: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub schedule: StepSchedule,
    pub discount: f64,
}

impl FedExState {
    pub fn new(k: usize, schedule: StepSchedule, discount: f64) -> Self {
        assert!(k >= 1, "FedEx needs at least one configuration");
        assert!((0.0..=1.0).contains(&discount), "baseline discount must lie in [0, 1]");
        Self {
            theta: vec![1.0 / k as f64; k],
            score_history: Vec::new(),
            grad_norms: Vec::new(),
            schedule,
            discount,
        }
    }

    pub fn k(&self) -> usize {
        self.theta.len()
    }

    /// Feeds one round's client losses into the exponentiated-gradient update.
    ///
    /// The baseline and gradient always use the personalized losses, which
    /// are the only per-configuration signal a round produces.
    pub fn observe_round(&mut self, round: &RoundResult) -> Result<Telemetry> {
        let lambda = baseline_update(&self.score_history, self.discount);
        let grad = grad_estimate(&round.local_losses(), &round.val_sizes(), &round.arms(), &self.theta, &lambda)?;
        let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        self.grad_norms.push(grad_norm);
        let eta = step_size(self.schedule, self.k(), &self.grad_norms);
        self.theta = exponentiated_update(&self.theta, &grad, eta);
        self.score_history.push(round.score(Target::Personalized)?);
        Ok(Telemetry {
            lambda,
            eta,
            grad_norm,
        })
    }

    /// The configuration FedEx would hand out deterministically.
    pub fn finalize(&self) -> usize {
        argmax(&self.theta)
    }
}

/// One FedEx communication round: every client samples a configuration from
/// `theta`, trains, and reports back; the server aggregates and `theta` takes
/// an exponentiated-gradient step.
#[allow(clippy::too_many_arguments)]
pub fn fedex_round(
    state: &mut FedExState,
    server: &ServerState,
    clients: &[&ClientDataset],
    arms: &[LocalHyperparams],
    b: &ServerHyperparams,
    target: Target,
    train_seed: u64,
    theta_rng: &mut SimRng,
) -> Result<(ServerState, RoundResult, f64, Telemetry)> {
    assert_eq!(arms.len(), state.k());
    let configs = ClientConfigs::Sampled {
        theta: &state.theta,
        arms,
        rng: theta_rng,
    };
    let (next, result, score) = run_round(server, clients, configs, b, target, train_seed)?;
    let telemetry = state.observe_round(&result)?;
    Ok((next, result, score, telemetry))
}
