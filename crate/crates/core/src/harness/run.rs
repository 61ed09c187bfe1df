//! Trial orchestration.
//!
//! A trial is one (tuner variant, seed) pair. Trials are independent and run
//! in parallel; every random stream is derived from the trial seed, so the
//! collected rows do not depend on the worker count.

use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, OcoConfig, Tuner};
use crate::data::{generate, ClientDataset};
use crate::error::{Error, Result};
use crate::fedmethods::Target;
use crate::models::{error_rate, local_train, LocalHyperparams, ModelParams};
use crate::oco::{auto_k, theorem_protocol, Feedback, RegretRecord, TaskGenerator};
use crate::rng::{stream, Stream};
use crate::tuners::fedex::{entropy, StepSchedule};
use crate::tuners::sha::{run_sha, Arm, Checkpoint, FedExSettings, InnerTuner, RoundRecord};

/// Final outcome of one trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub seed: u64,
    pub tuner: String,
    pub target: Target,
    /// Communication rounds consumed, forfeited ones included.
    pub rounds: usize,
    pub test_error: f64,
    /// Elimination score of the returned arm.
    pub val_score: f64,
    pub best_arm: usize,
    /// Index of the finalized local configuration within the arm.
    pub chosen: usize,
    pub rounds_executed: usize,
    pub rounds_forfeited: usize,
    pub failed_arms: usize,
    pub theta_entropy: Option<f64>,
    /// `name=value` pairs of the returned server and local configuration.
    pub config: String,
}

/// Test error of the current leader at every stage boundary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OnlineRow {
    pub seed: u64,
    pub tuner: String,
    pub round: usize,
    pub best_test_error: f64,
    pub arms_alive: usize,
    pub theta_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub seed: u64,
    pub tuner: String,
    pub record: RoundRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExperimentOutput {
    pub results: Vec<TrialResult>,
    pub online: Vec<OnlineRow>,
    pub trace: Vec<TraceRow>,
}

impl ExperimentOutput {
    fn absorb(&mut self, other: ExperimentOutput) {
        self.results.extend(other.results);
        self.online.extend(other.online);
        self.trace.extend(other.trace);
    }
}

/// Mean test error over all test examples of the federation.
///
/// With the personalized target every client first runs `Loc_c` from `w` on
/// its training split; a client whose fine-tuning diverges counts as
/// entirely wrong.
pub fn test_error(clients: &[ClientDataset], w: &ModelParams, c: &LocalHyperparams, target: Target, seed: u64, tag: u64) -> f64 {
    let worst = if w.arch.is_classifier() { 1.0 } else { f64::INFINITY };
    let per_client: Vec<(f64, usize)> = clients
        .par_iter()
        .map(|client| {
            let n = client.test.len();
            let model = match target {
                Target::Global => Ok(w.clone()),
                Target::Personalized => {
                    let mut rng = stream(seed, Stream::Evaluate, &[tag, client.id as u64]);
                    local_train(&client.train, w, c, w, &mut rng)
                }
            };
            let err = model
                .and_then(|m| error_rate(&m, &client.test))
                .ok()
                .filter(|e| e.is_finite())
                .unwrap_or(worst);
            (err, n)
        })
        .collect();
    let total: usize = per_client.iter().map(|(_, n)| n).sum();
    per_client.iter().map(|(e, n)| e * *n as f64).sum::<f64>() / total as f64
}

/// One tuner setting within an experiment or ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub tuner: Tuner,
    pub inner: InnerTuner,
    pub elimination_discount: f64,
}

impl Variant {
    pub fn from_config(cfg: &ExperimentConfig, tuner: Tuner) -> Self {
        Self {
            label: tuner.as_str().to_string(),
            tuner,
            inner: cfg.inner_for(tuner),
            elimination_discount: cfg.budget.elimination_discount,
        }
    }
}

fn describe(cfg_space: &crate::hyperspace::SearchSpace, arm: &Arm) -> String {
    let (_, client, _, _) = arm.finalize();
    let server = cfg_space.describe(&arm.server_config);
    let client = cfg_space.describe(client);
    match (server.is_empty(), client.is_empty()) {
        (true, _) => client,
        (_, true) => server,
        _ => format!("{server};{client}"),
    }
}

/// Runs one variant on one seed.
pub fn run_trial(cfg: &ExperimentConfig, variant: &Variant, seed: u64) -> Result<ExperimentOutput> {
    let space = cfg.space()?;
    let schedule = cfg.schedule_for(variant.tuner)?;
    let clients = generate(&cfg.federation, seed)?;
    let arch = cfg.architecture();
    let mut settings = cfg.sha_settings();
    settings.elimination_discount = variant.elimination_discount;
    let target = cfg.target;

    let mut online = Vec::new();
    let mut observer = |cp: &Checkpoint<'_, Arm>| {
        let leader = &cp.arms[cp.leader()];
        let (w, _, c, theta) = leader.finalize();
        online.push(OnlineRow {
            seed,
            tuner: variant.label.clone(),
            round: cp.consumed,
            best_test_error: test_error(&clients, w, c, target, seed, cp.stage as u64),
            arms_alive: cp.alive.len(),
            theta_entropy: theta.map(entropy),
        });
    };
    let out = run_sha(&space, &schedule, &clients, arch, settings, &variant.inner, seed, &mut observer)?;
    let best = &out.arms[out.best];
    let final_row = online.last().expect("the observer runs at least once");
    let result = TrialResult {
        seed,
        tuner: variant.label.clone(),
        target,
        rounds: out.rounds_consumed(),
        test_error: final_row.best_test_error,
        val_score: out.scores[out.best],
        best_arm: out.best,
        chosen: best.chosen(),
        rounds_executed: out.rounds_executed,
        rounds_forfeited: out.rounds_forfeited,
        failed_arms: out.arms.iter().filter(|a| a.failure.is_some()).count(),
        theta_entropy: final_row.theta_entropy,
        config: describe(&space, best),
    };
    let trace = out
        .records
        .into_iter()
        .map(|record| TraceRow {
            seed,
            tuner: variant.label.clone(),
            record,
        })
        .collect();
    Ok(ExperimentOutput {
        results: vec![result],
        online,
        trace,
    })
}

fn run_grid(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<ExperimentOutput> {
    let jobs: Vec<(&Variant, u64)> = variants
        .iter()
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let outputs: Vec<Result<ExperimentOutput>> = jobs.par_iter().map(|(v, s)| run_trial(cfg, v, *s)).collect();
    let mut all = ExperimentOutput::default();
    for o in outputs {
        all.absorb(o?);
    }
    Ok(all)
}

fn check(cfg: &ExperimentConfig) -> Result<()> {
    let issues = cfg.issues();
    if issues.is_empty() {
        Ok(())
    } else {
        let msg = issues
            .iter()
            .map(|i| format!("{}: {}", i.field, i.message))
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::Config(msg))
    }
}

/// Runs the configured tuner on every seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    check(cfg)?;
    run_grid(cfg, &[Variant::from_config(cfg, cfg.tuner)])
}

/// One ablation variant with the axis values that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub variant: Variant,
    pub epsilon: Option<f64>,
    pub schedule: Option<StepSchedule>,
    pub discount: Option<f64>,
}

/// The cartesian product of the configured sweep axes. When an epsilon or
/// schedule axis is swept the plain wrapper is added as a reference row.
pub fn ablation_variants(cfg: &ExperimentConfig) -> Vec<AblationVariant> {
    let ab = &cfg.ablation;
    let base = cfg.fedex_config().settings();
    let eps: Vec<Option<f64>> = if ab.epsilon.is_empty() { vec![None] } else { ab.epsilon.iter().copied().map(Some).collect() };
    let sch: Vec<Option<StepSchedule>> = if ab.schedule.is_empty() { vec![None] } else { ab.schedule.iter().copied().map(Some).collect() };
    let dis: Vec<Option<f64>> = if ab.discount.is_empty() { vec![None] } else { ab.discount.iter().copied().map(Some).collect() };
    let mut out = Vec::new();
    let fedex_axes = !ab.epsilon.is_empty() || !ab.schedule.is_empty();
    for &d in &dis {
        let discount = d.unwrap_or(cfg.budget.elimination_discount);
        if fedex_axes {
            let plain = cfg.tuner.plain();
            let mut label = plain.as_str().to_string();
            if let Some(d) = d {
                label.push_str(&format!("[discount={d}]"));
            }
            out.push(AblationVariant {
                variant: Variant {
                    label,
                    tuner: plain,
                    inner: InnerTuner::Plain,
                    elimination_discount: discount,
                },
                epsilon: None,
                schedule: None,
                discount: d,
            });
        }
        for &e in &eps {
            for &s in &sch {
                let mut tags = Vec::new();
                let mut inner = cfg.inner_for(cfg.tuner);
                if let InnerTuner::FedEx(f) = &mut inner {
                    *f = FedExSettings {
                        epsilon: e.unwrap_or(base.epsilon),
                        schedule: s.unwrap_or(base.schedule),
                        ..base
                    };
                }
                if let Some(e) = e {
                    tags.push(format!("eps={e}"));
                }
                if let Some(s) = s {
                    tags.push(format!("schedule={}", s.as_str()));
                }
                if let Some(d) = d {
                    tags.push(format!("discount={d}"));
                }
                let mut label = cfg.tuner.as_str().to_string();
                if !tags.is_empty() {
                    label.push_str(&format!("[{}]", tags.join(";")));
                }
                out.push(AblationVariant {
                    variant: Variant {
                        label,
                        tuner: cfg.tuner,
                        inner,
                        elimination_discount: discount,
                    },
                    epsilon: e,
                    schedule: s,
                    discount: d,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutput {
    pub variants: Vec<AblationVariant>,
    pub output: ExperimentOutput,
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationOutput> {
    check(cfg)?;
    if cfg.ablation.is_empty() {
        return Err(Error::Config("ablation: no sweep axis given".into()));
    }
    let variants = ablation_variants(cfg);
    let plain: Vec<Variant> = variants.iter().map(|v| v.variant.clone()).collect();
    let output = run_grid(cfg, &plain)?;
    Ok(AblationOutput { variants, output })
}

/// Regret trajectory of one (mode, horizon, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OcoRun {
    pub seed: u64,
    pub mode: Feedback,
    pub tau: usize,
    pub k: usize,
    pub records: Vec<RegretRecord>,
}

/// Seed-averaged summary for one (mode, horizon).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OcoSummaryRow {
    pub mode: Feedback,
    pub tau: usize,
    pub k: usize,
    pub seeds: usize,
    pub mean_avg_regret: f64,
    pub std_avg_regret: f64,
    pub mean_similarity: f64,
    /// `G V sqrt(m)` with the mean similarity.
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcoOutput {
    pub runs: Vec<OcoRun>,
    pub summary: Vec<OcoSummaryRow>,
    /// Per mode: slope of log mean regret against log horizon, and the
    /// same slope after subtracting the floor (absent when the residual is
    /// not positive at every horizon).
    pub slopes: Vec<(Feedback, f64, Option<f64>)>,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn run_oco(cfg: &OcoConfig) -> Result<OcoOutput> {
    let issues = cfg.issues();
    if let Some(i) = issues.first() {
        return Err(Error::Config(format!("{}: {}", i.field, i.message)));
    }
    let gen = TaskGenerator {
        family: cfg.family,
        dim: cfg.dim,
        diameter: cfg.diameter,
        m: cfg.m,
        dispersion: cfg.dispersion,
        noise: cfg.noise,
    };
    let g = cfg.family.lipschitz(cfg.diameter);
    let b = cfg.family.bound(cfg.diameter);
    let k_for = |tau: usize| if cfg.k > 0 { cfg.k } else { auto_k(cfg.diameter, g, b, cfg.m, tau) };
    let jobs: Vec<(Feedback, usize, u64)> = cfg
        .modes
        .iter()
        .flat_map(|&mode| cfg.taus.iter().flat_map(move |&tau| cfg.seeds.iter().map(move |&s| (mode, tau, s))))
        .collect();
    let runs: Vec<OcoRun> = jobs
        .par_iter()
        .map(|&(mode, tau, seed)| {
            let tasks = gen.generate(tau, &mut stream(seed, Stream::OcoTasks, &[tau as u64]))?;
            let k = k_for(tau);
            let records = theorem_protocol(&tasks, k, mode, &mut stream(seed, Stream::OcoSample, &[tau as u64]))?;
            Ok(OcoRun {
                seed,
                mode,
                tau,
                k,
                records,
            })
        })
        .collect::<Result<_>>()?;

    let mut summary = Vec::new();
    let mut slopes = Vec::new();
    for &mode in &cfg.modes {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut residual = Vec::new();
        for &tau in &cfg.taus {
            let finals: Vec<&RegretRecord> = runs
                .iter()
                .filter(|r| r.mode == mode && r.tau == tau)
                .map(|r| r.records.last().expect("tau >= 1"))
                .collect();
            let regrets: Vec<f64> = finals.iter().map(|r| r.avg_regret).collect();
            let (mean, std) = mean_std(&regrets);
            let sim = finals.iter().map(|r| r.similarity).sum::<f64>() / finals.len() as f64;
            let floor = g * sim * (cfg.m as f64).sqrt();
            summary.push(OcoSummaryRow {
                mode,
                tau,
                k: k_for(tau),
                seeds: finals.len(),
                mean_avg_regret: mean,
                std_avg_regret: std,
                mean_similarity: sim,
                floor,
            });
            xs.push(tau as f64);
            ys.push(mean);
            residual.push(mean - floor);
        }
        let slope = if xs.len() >= 2 && ys.iter().all(|&y| y > 0.0) { loglog_slope(&xs, &ys) } else { f64::NAN };
        let resid = (xs.len() >= 2 && residual.iter().all(|&r| r > 0.0)).then(|| loglog_slope(&xs, &residual));
        slopes.push((mode, slope, resid));
    }
    Ok(OcoOutput { runs, summary, slopes })
}
