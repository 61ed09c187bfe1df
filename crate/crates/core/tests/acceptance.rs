//! Acceptance criteria, one line each.
//!
//! Runs without the libtest harness so the lines always print and each
//! criterion is timed on its own.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use statrs::distribution::{ContinuousCDF, StudentsT};

use fedtune::data::{generate, ClientDataset, FederationSpec};
use fedtune::fedmethods::{
    run_round, sample_categorical, ClientConfigs, ClientUpdate, RoundResult, ServerHyperparams, ServerState, Target,
};
use fedtune::harness::config::{parse_with_overrides, ExperimentConfig, OcoConfig};
use fedtune::harness::{run_ablation, run_experiment, run_oco};
use fedtune::hyperspace::SearchSpace;
use fedtune::models::{
    gradient, objective, Activation, Architecture, Dataset, DropoutMask, LocalHyperparams, ModelParams, Regularizer,
};
use fedtune::oco::{ogd, ogd_regret_bound, step_grid, uniform_in_ball, LossFamily, TaskGenerator};
use fedtune::rng::SimRng;
use fedtune::tuners::fedex::{fedex_round, grad_estimate, FedExState, StepSchedule};
use fedtune::tuners::schedule::compute_schedule;
use fedtune::tuners::sha::{run_sha, successive_halving, Advance, FedExSettings, InnerTuner, ShaSettings, StageRunner};

type Verdict = (bool, String);

fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

fn rational(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Exact and floating-point unbiasedness of the importance-weighted estimate.
fn unbiased_gradient() -> Verdict {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut exact_ok = true;
    for case in 0..1000 {
        let k = 1 + case % 8;
        let b = 1 + r.random_range(0..3usize);
        let weights: Vec<i64> = (0..k).map(|_| r.random_range(1..20)).collect();
        let wsum: i64 = weights.iter().sum();
        let theta_q: Vec<BigRational> = weights.iter().map(|&w| rational(w, wsum)).collect();
        let losses: Vec<Vec<i64>> = (0..b).map(|_| (0..k).map(|_| r.random_range(0..1000)).collect()).collect();
        let sizes: Vec<usize> = (0..b).map(|_| r.random_range(1..30)).collect();
        let lambda_num = r.random_range(0..1000);
        let lambda_q = rational(lambda_num, 1000);
        let total: usize = sizes.iter().sum();

        // d/d theta_j of sum_i |V_i| sum_j theta_j (L_ij - lambda) / sum |V|
        let exact_q: Vec<BigRational> = (0..k)
            .map(|j| {
                (0..b).fold(rational(0, 1), |acc, i| {
                    acc + rational(sizes[i] as i64, total as i64) * (rational(losses[i][j], 1000) - lambda_q.clone())
                })
            })
            .collect();

        let mut expect_q = vec![rational(0, 1); k];
        let mut expect_f = vec![0.0; k];
        let theta_f: Vec<f64> = weights.iter().map(|&w| w as f64 / wsum as f64).collect();
        for outcome in 0..k.pow(b as u32) {
            let sampled: Vec<usize> = (0..b).map(|i| outcome / k.pow(i as u32) % k).collect();
            let prob_q = sampled.iter().fold(rational(1, 1), |p, &j| p * theta_q[j].clone());
            let prob_f: f64 = sampled.iter().map(|&j| theta_f[j]).product();
            let l_q: Vec<BigRational> = (0..b).map(|i| rational(losses[i][sampled[i]], 1000)).collect();
            let l_f: Vec<f64> = (0..b).map(|i| losses[i][sampled[i]] as f64 / 1000.0).collect();
            let g_q = grad_estimate(&l_q, &sizes, &sampled, &theta_q, &lambda_q).unwrap();
            let g_f = grad_estimate(&l_f, &sizes, &sampled, &theta_f, &(lambda_num as f64 / 1000.0)).unwrap();
            for j in 0..k {
                expect_q[j] = expect_q[j].clone() + prob_q.clone() * g_q[j].clone();
                expect_f[j] += prob_f * g_f[j];
            }
        }
        exact_ok &= expect_q == exact_q;
        for j in 0..k {
            let exact = exact_q[j].numer().to_string().parse::<f64>().unwrap()
                / exact_q[j].denom().to_string().parse::<f64>().unwrap();
            worst = worst.max((expect_f[j] - exact).abs());
        }
    }
    (exact_ok && worst <= 1e-12, format!("1000 cases, rational exact: {exact_ok}, max float error {worst:.2e}"))
}

fn synthetic_round(theta: &[f64], losses: impl Fn(usize) -> f64, clients: usize, r: &mut SimRng) -> RoundResult {
    let updates = (0..clients)
        .map(|i| {
            let j = sample_categorical(theta, r);
            ClientUpdate {
                client: i,
                arm: j,
                model: ModelParams::zeros(Architecture::linear(1)),
                local_loss: losses(j),
                global_loss: None,
                train_size: 1,
                val_size: 1 + i,
            }
        })
        .collect();
    RoundResult { updates }
}

/// Theta stays a strictly positive probability vector under hostile losses.
fn simplex_invariant() -> Verdict {
    let mut r = rng(2);
    let mut steps = 0;
    let mut worst_sum = 0.0f64;
    let mut min_entry = f64::INFINITY;
    let mut check = |theta: &[f64], steps: &mut usize| {
        *steps += 1;
        worst_sum = worst_sum.max((theta.iter().sum::<f64>() - 1.0).abs());
        min_entry = min_entry.min(theta.iter().copied().fold(f64::INFINITY, f64::min));
    };
    for schedule in [StepSchedule::Constant, StepSchedule::Adaptive, StepSchedule::Aggressive] {
        for k in [2usize, 8, 27] {
            let mut s = FedExState::new(k, schedule, 0.5);
            for t in 0..1200 {
                let theta = s.theta.clone();
                let top = fedtune::tuners::fedex::argmax(&theta);
                // punish the favourite, reward the least likely, swing the scale
                let scale = 10f64.powi((t % 13) as i32 - 6);
                let losses = |j: usize| {
                    if j == top {
                        1e6 * scale
                    } else if t % 7 == 0 {
                        0.0
                    } else {
                        scale * (j as f64 + 1.0)
                    }
                };
                let round = synthetic_round(&theta, losses, 5, &mut r);
                s.observe_round(&round).unwrap();
                check(&s.theta, &mut steps);
            }
        }
    }
    // real rounds on a tiny federation with configurations that diverge
    let fed = generate(
        &FederationSpec {
            clients: 4,
            examples_per_client: [12, 16],
            feature_dim: 3,
            classes: 3,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    let batch: Vec<&ClientDataset> = fed.iter().collect();
    // learning rates from 1e-3 to 1e3 so some arms blow up and reset the model
    let arms: Vec<LocalHyperparams> = (0..7)
        .map(|j| LocalHyperparams {
            lr: 10f64.powi(j - 3),
            batch_size: 4,
            ..Default::default()
        })
        .collect();
    let b = ServerHyperparams::fedavg();
    let arch = Architecture::logistic(3, 3);
    let mut rounds = 0;
    for schedule in [StepSchedule::Constant, StepSchedule::Adaptive, StepSchedule::Aggressive] {
        let mut s = FedExState::new(arms.len(), schedule, 0.9);
        let mut server = ServerState::new(ModelParams::init(arch, &mut r));
        for t in 0..3400u64 {
            rounds += 1;
            match fedex_round(&mut s, &server, &batch, &arms, &b, Target::Personalized, t, &mut r) {
                Ok((next, _, _, _)) => server = next,
                Err(_) => server = ServerState::new(ModelParams::init(arch, &mut r)),
            }
            check(&s.theta, &mut steps);
        }
    }
    let ok = rounds >= 10_000 && worst_sum <= 1e-9 && min_entry > 0.0;
    (
        ok,
        format!("{rounds} fedex rounds + {} adversarial updates, max |sum - 1| {worst_sum:.1e}, min entry {min_entry:.1e}", steps - rounds),
    )
}

/// FedEx with one configuration, or with identical ones, retraces the plain run.
fn reduction_equivalence() -> Verdict {
    let space = SearchSpace::default_federated();
    let mut mismatches = 0;
    let mut compared = 0;
    for case in 0..20u64 {
        let mut r = rng(100 + case);
        let spec = FederationSpec {
            clients: r.random_range(4..10),
            examples_per_client: [20, 40],
            feature_dim: r.random_range(2..6),
            classes: r.random_range(2..5),
            heterogeneity: r.random(),
            ..Default::default()
        };
        let fed = generate(&spec, case).unwrap();
        let arch = if case % 2 == 0 {
            Architecture::logistic(spec.feature_dim, spec.classes)
        } else {
            Architecture::mlp(spec.feature_dim, 4, spec.classes, Activation::Tanh)
        };
        let full = space.sample_uniform(&mut r);
        let server = ServerHyperparams::from_config(&space, &full.server).unwrap();
        let c = LocalHyperparams::from_config(&space, &full.client).unwrap_or_default();
        let target = if case % 3 == 0 { Target::Global } else { Target::Personalized };
        let init = ModelParams::init(arch, &mut r);
        let batch: Vec<&ClientDataset> = fed.iter().take(3).collect();

        // round by round: plain, k = 1, and k = 4 identical arms (eps = 0)
        let identical = space.perturbed_arms(&full.client, 4, 0.0, &mut r);
        let same: Vec<LocalHyperparams> = identical
            .iter()
            .map(|cfg| LocalHyperparams::from_config(&space, cfg).unwrap_or_default())
            .collect();
        let mut plain = ServerState::new(init.clone());
        let mut one = plain.clone();
        let mut four = plain.clone();
        let mut s1 = FedExState::new(1, StepSchedule::Aggressive, 0.9);
        let mut s4 = FedExState::new(4, StepSchedule::Aggressive, 0.9);
        for t in 0..15u64 {
            let seed = case * 1000 + t;
            let a = run_round(&plain, &batch, ClientConfigs::Fixed(&c), &server, target, seed);
            let b = fedex_round(&mut s1, &one, &batch, &[c], &server, target, seed, &mut rng(t));
            let d = fedex_round(&mut s4, &four, &batch, &same, &server, target, seed, &mut rng(t + 7));
            compared += 1;
            match (a, b, d) {
                (Ok((pa, _, sa)), Ok((pb, _, sb, _)), Ok((pd, _, sd, _))) => {
                    if pa.model.weights != pb.model.weights
                        || pa.model.weights != pd.model.weights
                        || sa.to_bits() != sb.to_bits()
                        || sa.to_bits() != sd.to_bits()
                    {
                        mismatches += 1;
                    }
                    plain = pa;
                    one = pb;
                    four = pd;
                }
                (Err(x), Err(y), Err(z)) if x == y && y == z => break,
                _ => {
                    mismatches += 1;
                    break;
                }
            }
        }

        // whole sweeps through the wrapper
        let schedule = compute_schedule(3, 1, 48, 16).unwrap();
        let settings = ShaSettings {
            clients_per_round: 3,
            target,
            trace: true,
            ..Default::default()
        };
        let base = run_sha(&space, &schedule, &fed, arch, settings, &InnerTuner::Plain, case, &mut |_| {}).unwrap();
        for inner in [
            FedExSettings { k: 1, ..Default::default() },
            FedExSettings { k: 5, epsilon: 0.0, ..Default::default() },
        ] {
            let fx = run_sha(&space, &schedule, &fed, arch, settings, &InnerTuner::FedEx(inner), case, &mut |_| {}).unwrap();
            compared += 1;
            let scores = |o: &[fedtune::tuners::sha::RoundRecord]| -> Vec<(usize, usize, u64)> {
                o.iter().map(|r| (r.arm, r.round, r.score.to_bits())).collect()
            };
            let same_states = base.arms.iter().zip(&fx.arms).all(|(a, b)| a.state == b.state);
            if scores(&base.records) != scores(&fx.records) || !same_states || base.best != fx.best {
                mismatches += 1;
            }
        }
    }
    (mismatches == 0, format!("20 configs, {compared} comparisons, {mismatches} mismatches"))
}

/// Scores arms from a fixed pseudo-random table with many ties.
struct TableRunner(u64);

impl StageRunner for TableRunner {
    type Arm = (usize, usize);
    type Record = ();
    fn advance(&self, arm: &mut (usize, usize), rounds: usize) -> Advance<()> {
        arm.1 += rounds;
        let h = (arm.0 as u64 * 2654435761 + arm.1 as u64 * 40503 + self.0).wrapping_mul(0x9e3779b97f4a7c15);
        let score = ((h >> 33) % 4) as f64;
        Advance {
            scores: vec![score; rounds],
            executed: rounds,
            forfeited: 0,
            failed: false,
            records: Vec::new(),
        }
    }
}

/// Survivor counts, tie-breaking against a brute-force ranking, and budget use.
fn sha_mechanics() -> Verdict {
    let mut r = rng(4);
    let mut budgets = 0;
    let mut failures = Vec::new();
    while budgets < 100 {
        let t: usize = r.random_range(300..20_000);
        let m: usize = r.random_range(t / 20..t / 2);
        let Ok(schedule) = compute_schedule(3, 3, t, m) else { continue };
        budgets += 1;

        // spacing and remainder rule, evaluated independently
        let s = (t - m) / 36;
        let extra = ((t - 36 * s - m) / 2).min(m - 3 * s);
        let expected_total = 36 * s + m + 2 * extra;

        let runner = TableRunner(budgets as u64);
        let mut last_scores: BTreeMap<usize, f64> = BTreeMap::new();
        let mut oracle_ok = true;
        let out = successive_halving(&schedule, &runner, (0..27).map(|i| (i, 0)).collect(), 0.0, &mut |cp| {
            for &a in cp.alive {
                last_scores.insert(a, cp.scores[a]);
            }
        });
        for stage in &out.stages {
            let keep = stage.alive.len() / 3;
            let brute: Vec<usize> = stage
                .alive
                .iter()
                .enumerate()
                .filter(|&(i, &a)| {
                    let sa = stage.scores[i];
                    let better = stage
                        .alive
                        .iter()
                        .enumerate()
                        .filter(|&(j, &b)| stage.scores[j] < sa || (stage.scores[j] == sa && b < a))
                        .count();
                    better < keep
                })
                .map(|(_, &a)| a)
                .collect();
            oracle_ok &= brute == stage.survivors;
        }
        let counts: Vec<usize> = out.stages.iter().map(|s| s.survivors.len()).collect();
        if counts != [9, 3, 1] || !oracle_ok || out.rounds_consumed() != expected_total || expected_total > t {
            failures.push((t, m, counts, oracle_ok, out.rounds_consumed(), expected_total));
        }
    }
    (
        failures.is_empty(),
        format!("{budgets} budgets, 27 -> 9 -> 3 -> 1, failures: {failures:?}"),
    )
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Analytic gradients against central finite differences.
fn model_gradients() -> Verdict {
    let mut r = rng(5);
    let h = 1e-5;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for kind in ["linear", "logistic", "mlp-tanh", "mlp-relu"] {
        let points = if kind.starts_with("mlp") { 100 } else { 200 };
        for _ in 0..points {
            let d = r.random_range(2..6);
            let classes = r.random_range(2..5);
            let arch = match kind {
                "linear" => Architecture::linear(d),
                "logistic" => Architecture::logistic(d, classes),
                "mlp-tanh" => Architecture::mlp(d, 5, classes, Activation::Tanh),
                _ => Architecture::mlp(d, 5, classes, Activation::Relu),
            };
            let n = 8;
            let mut data = Dataset::new(d);
            for _ in 0..n {
                let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
                let y = if arch.is_classifier() { r.random_range(0..classes) as f64 } else { r.random_range(-3.0..3.0) };
                data.push(&x, y).unwrap();
            }
            let mut w = ModelParams::init(arch, &mut r);
            w.weights.iter_mut().for_each(|x| *x += r.random_range(-0.5..0.5));
            let anchor = ModelParams::init(arch, &mut r);
            let reg = Regularizer {
                weight_decay: r.random_range(0.0..0.1),
                prox_mu: r.random_range(0.0..1.0),
                anchor: Some(&anchor),
            };
            let mask = kind.starts_with("mlp").then(|| DropoutMask::sample(5, n, 0.3, &mut r));
            let g = gradient(&w, &data, &reg, mask.as_ref()).unwrap();
            let fd: Vec<f64> = (0..w.len())
                .map(|i| {
                    let mut p = w.clone();
                    p.weights[i] += h;
                    let up = objective(&p, &data, &reg, mask.as_ref()).unwrap();
                    p.weights[i] -= 2.0 * h;
                    let down = objective(&p, &data, &reg, mask.as_ref()).unwrap();
                    (up - down) / (2.0 * h)
                })
                .collect();
            let e = relative_error(&g, &fd);
            let slot = worst.entry(kind).or_insert(0.0);
            *slot = slot.max(e);
        }
    }
    let ok = worst.values().all(|&e| e <= 1e-4);
    let detail = worst.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect::<Vec<_>>().join(", ");
    (ok, format!("200 points per family, max relative error: {detail}"))
}

/// Per-task OGD regret never exceeds the textbook bound.
fn ogd_bound() -> Verdict {
    let mut r = rng(6);
    let gen = TaskGenerator {
        family: LossFamily::Quadratic,
        dim: 5,
        diameter: 2.0,
        m: 50,
        dispersion: 0.5,
        noise: 0.5,
    };
    let tasks = gen.generate(500, &mut r).unwrap();
    let grid = step_grid(2.0, 2.0, 50, 10);
    let mut worst_ratio = f64::NEG_INFINITY;
    let mut escaped = 0;
    for task in &tasks {
        let init = uniform_in_ball(5, 1.0, &mut r);
        for &c in &grid {
            let run = ogd(task, &init, c).unwrap();
            let bound = ogd_regret_bound(task.diameter, task.lipschitz(), task.m(), c);
            worst_ratio = worst_ratio.max(run.regret / bound);
            escaped += run
                .iterates
                .iter()
                .filter(|w| w.iter().map(|x| x * x).sum::<f64>().sqrt() > 1.0 + 1e-9)
                .count();
        }
    }
    (
        worst_ratio <= 1.0 && escaped == 0,
        format!("500 tasks x 10 steps, max regret/bound {worst_ratio:.3}, iterates outside domain {escaped}"),
    )
}

/// Regret decays with V = 0 and levels off near the V-dependent floor otherwise.
fn regret_trend() -> Verdict {
    let zero: OcoConfig = parse_with_overrides(
        "seeds = [0,1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16,17,18,19]\nfamily = \"quadratic\"\ndim = 5\nm = 50\ntaus = [10, 100, 1000]\ndispersion = 0.0\nnoise = 0.0",
        &[],
    )
    .unwrap();
    let out = run_oco(&zero).unwrap();
    let means: Vec<f64> = out.summary.iter().map(|s| s.mean_avg_regret).collect();
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    let slope = out.slopes[0].1;
    let v_max = out.summary.iter().map(|s| s.mean_similarity).fold(0.0, f64::max);
    let v_zero = v_max <= 1e-9;

    let wide: OcoConfig = parse_with_overrides(
        "seeds = [0,1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16,17,18,19]\nfamily = \"distance\"\ndim = 2\nm = 50\ntaus = [1000]\ndispersion = 0.8\nnoise = 0.0",
        &[],
    )
    .unwrap();
    let big = run_oco(&wide).unwrap();
    let row = &big.summary[0];
    let ratio = row.mean_avg_regret / row.floor;
    let plateau = (1.0 / 3.0..=3.0).contains(&ratio);
    let ok = decreasing && v_zero && slope <= -1.0 / 3.0 + 0.1 && plateau;
    (
        ok,
        format!(
            "V={v_max:.1e}: mean regret {:?}, slope {slope:.3}; V={:.3}: regret {:.3} vs floor {:.3} (ratio {ratio:.2})",
            means.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>(),
            row.mean_similarity,
            row.mean_avg_regret,
            row.floor
        ),
    )
}

fn benchmark_config(tuner: &str) -> ExperimentConfig {
    parse_with_overrides(
        "",
        &[
            format!("tuner=\"{tuner}\""),
            "seeds=[0,1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16,17,18,19]".into(),
            "federation.clients=50".into(),
            "model.kind=\"logistic\"".into(),
            "clients_per_round=10".into(),
            "budget.total_rounds=600".into(),
            "budget.max_per_arm=120".into(),
        ],
    )
    .unwrap()
}

/// SHA+FedEx matches or beats SHA on most paired seeds.
fn fedex_benefit() -> Verdict {
    let sha = run_experiment(&benchmark_config("sha")).unwrap();
    let fedex = run_experiment(&benchmark_config("sha+fedex")).unwrap();
    let mut wins = 0;
    let mut same_budget = true;
    for (a, b) in sha.results.iter().zip(&fedex.results) {
        assert_eq!(a.seed, b.seed);
        same_budget &= a.rounds == b.rounds && a.rounds == 600;
        if b.test_error <= a.test_error {
            wins += 1;
        }
    }
    let mean = |rows: &[fedtune::harness::run::TrialResult]| rows.iter().map(|r| r.test_error).sum::<f64>() / rows.len() as f64;
    (
        wins * 100 >= 60 * 20 && same_budget,
        format!(
            "FedEx <= SHA on {wins}/20 seeds, mean error {:.4} vs {:.4}, identical 600-round budgets: {same_budget}",
            mean(&fedex.results),
            mean(&sha.results)
        ),
    )
}

/// Elimination discounts give statistically indistinguishable final errors.
fn discount_ablation() -> Verdict {
    let mut cfg = benchmark_config("sha");
    cfg.ablation.discount = vec![0.0, 0.5, 1.0];
    let out = run_ablation(&cfg).unwrap();
    let errors = |label: &str| -> Vec<f64> {
        out.output.results.iter().filter(|r| r.tuner == label).map(|r| r.test_error).collect()
    };
    let base = errors("sha[discount=0]");
    let t = StudentsT::new(0.0, 1.0, (base.len() - 1) as f64).unwrap().inverse_cdf(0.95);
    let mut ok = base.len() == 20;
    let mut parts = Vec::new();
    for other in ["sha[discount=0.5]", "sha[discount=1]"] {
        let diffs: Vec<f64> = errors(other).iter().zip(&base).map(|(a, b)| a - b).collect();
        let (mean, sd) = fedtune::harness::run::mean_std(&diffs);
        let half = t * sd / (diffs.len() as f64).sqrt();
        let covers = mean - half <= 0.0 && 0.0 <= mean + half;
        ok &= covers;
        parts.push(format!("{other} - discount 0: {mean:+.4} +- {half:.4}"));
    }
    (ok, format!("90% paired CIs: {}", parts.join("; ")))
}

fn read_outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        files.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
    }
    files
}

/// Every CLI verb is reproducible across runs and worker counts.
fn cli_determinism() -> Verdict {
    let exe = env!("CARGO_BIN_EXE_fedtune");
    let tmp = tempfile::tempdir().unwrap();
    let small: Vec<&str> = vec![
        "--seed", "3", "--seed", "4",
        "--set", "federation.clients=8",
        "--set", "clients_per_round=4",
        "--set", "budget.total_rounds=120",
        "--set", "budget.max_per_arm=30",
        "--set", "output.trace=true",
    ];
    let config = tmp.path().join("valid.toml");
    std::fs::write(&config, "tuner = \"sha+fedex\"\n[fedex]\nk = 5\n").unwrap();
    let config = config.to_string_lossy().into_owned();
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("run", [vec!["run", "--config", config.as_str()], small.clone()].concat()),
        ("ablate", [vec!["ablate", "--config", config.as_str(), "--epsilon", "0,0.5", "--discount", "0,1"], small.clone()].concat()),
        ("oco", vec!["oco", "--seed", "1", "--seed", "2", "--tau", "10,50", "--mode", "bandit,full-information"]),
        ("export-federation", [vec!["export-federation"], small.clone()].concat()),
        ("validate-config", vec!["validate-config", config.as_str()]),
    ];
    let mut mismatched = Vec::new();
    let mut files = 0;
    for (name, args) in &commands {
        let mut seen: Vec<(BTreeMap<String, Vec<u8>>, Vec<u8>)> = Vec::new();
        for (attempt, jobs) in ["1", "1", "8"].iter().enumerate() {
            let dir = tmp.path().join(format!("{name}-{attempt}"));
            let mut cmd = Command::new(exe);
            cmd.args(args);
            let stdout = if *name == "validate-config" {
                cmd.output().unwrap()
            } else {
                cmd.args(["--out-dir", dir.to_str().unwrap(), "--jobs", jobs]).output().unwrap()
            };
            if !stdout.status.success() {
                return (false, format!("`{name}` failed: {}", String::from_utf8_lossy(&stdout.stdout)));
            }
            let outputs = if dir.exists() { read_outputs(&dir) } else { BTreeMap::new() };
            let printed = if *name == "validate-config" { stdout.stdout } else { Vec::new() };
            seen.push((outputs, printed));
        }
        files += seen[0].0.len();
        if seen[0] != seen[1] || seen[0] != seen[2] {
            mismatched.push(*name);
        }
    }
    (
        mismatched.is_empty(),
        format!("{} commands, {files} output files, jobs 1/1/8, mismatches: {mismatched:?}", commands.len()),
    )
}

fn main() {
    let criteria: Vec<(u32, &str, Duration, fn() -> Verdict)> = vec![
        (1, "unbiased gradient", Duration::from_secs(5), unbiased_gradient),
        (2, "simplex invariant", Duration::from_secs(10), simplex_invariant),
        (3, "reduction equivalence", Duration::from_secs(60), reduction_equivalence),
        (4, "SHA mechanics", Duration::from_secs(10), sha_mechanics),
        (5, "model gradients", Duration::from_secs(30), model_gradients),
        (6, "OGD regret bound", Duration::from_secs(30), ogd_bound),
        (7, "regret trend", Duration::from_secs(300), regret_trend),
        (8, "FedEx benefit", Duration::from_secs(900), fedex_benefit),
        (9, "discount ablation", Duration::from_secs(900), discount_ablation),
        (10, "CLI determinism", Duration::from_secs(300), cli_determinism),
    ];
    let mut failed = 0;
    for (n, name, limit, check) in criteria {
        let start = Instant::now();
        let (ok, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let pass = ok && in_time;
        failed += usize::from(!pass);
        println!(
            "criterion {n:>2} {} {name}: {detail} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

