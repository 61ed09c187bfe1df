//! Online convex optimization test-bed for the FedEx regret guarantee.
//!
//! Each task is a sequence of `m` convex losses over a Euclidean ball. The
//! server keeps an initialization `w_t` and a distribution over a grid of
//! OGD step sizes; every task runs OGD from `w_t` with a sampled step, the
//! scaled regret drives an exponentiated-gradient step on the grid, and
//! `w_{t+1}` moves to the running mean of the revealed task optima.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedmethods::sample_categorical;
use crate::tuners::fedex::{entropy, exponentiated_update, grad_estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    /// `1/2 |w - u|^2`: `G = D`, `b = D^2 / 2`.
    Quadratic,
    /// `|w - u|`: `G = 1`, `b = D`.
    Distance,
}

impl LossFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            LossFamily::Quadratic => "quadratic",
            LossFamily::Distance => "distance",
        }
    }

    pub fn lipschitz(self, diameter: f64) -> f64 {
        match self {
            LossFamily::Quadratic => diameter,
            LossFamily::Distance => 1.0,
        }
    }

    pub fn bound(self, diameter: f64) -> f64 {
        match self {
            LossFamily::Quadratic => diameter * diameter / 2.0,
            LossFamily::Distance => diameter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feedback {
    /// One step size sampled per task; only its regret is seen.
    Bandit,
    /// Every step size is run on every task.
    FullInformation,
}

impl Feedback {
    pub fn as_str(self) -> &'static str {
        match self {
            Feedback::Bandit => "bandit",
            Feedback::FullInformation => "full-information",
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean projection onto the ball of the given radius around `center`.
pub fn project(w: &[f64], center: &[f64], radius: f64) -> Vec<f64> {
    let r = dist(w, center);
    if r <= radius {
        return w.to_vec();
    }
    let scale = radius / r;
    w.iter().zip(center).map(|(x, c)| c + (x - c) * scale).collect()
}

/// Minimizer of `sum_i |w - u_i|`, by Weiszfeld iterations run until the
/// subgradient norm is at most `1e-9`.
pub fn geometric_median(points: &[Vec<f64>]) -> Vec<f64> {
    let d = points[0].len();
    let n = points.len() as f64;
    let mut w: Vec<f64> = (0..d).map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    for _ in 0..100_000 {
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        let mut pull = vec![0.0; d];
        let mut at_point = 0.0;
        for p in points {
            let r = dist(&w, p);
            if r < 1e-14 {
                at_point += 1.0;
                continue;
            }
            for k in 0..d {
                num[k] += p[k] / r;
                pull[k] += (p[k] - w[k]) / r;
            }
            den += 1.0 / r;
        }
        // at a data point the subgradient set is a ball of radius `at_point`
        let residual = (norm(&pull) - at_point).max(0.0);
        if residual <= 1e-9 || den == 0.0 {
            break;
        }
        let next: Vec<f64> = if at_point > 0.0 {
            let step = residual / norm(&pull) / den;
            w.iter().zip(&pull).map(|(x, g)| x + step * g).collect()
        } else {
            num.iter().map(|x| x / den).collect()
        };
        let moved = dist(&next, &w);
        w = next;
        if moved < 1e-15 {
            break;
        }
    }
    w
}

/// `m` losses of one family, each anchored at a target inside the ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcoTask {
    pub family: LossFamily,
    pub targets: Vec<Vec<f64>>,
    pub center: Vec<f64>,
    pub diameter: f64,
    pub optimum: Vec<f64>,
}

impl OcoTask {
    pub fn new(family: LossFamily, targets: Vec<Vec<f64>>, center: Vec<f64>, diameter: f64) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let radius = diameter / 2.0;
        for t in &targets {
            if t.len() != center.len() {
                return Err(Error::Shape(format!("target has dimension {}, expected {}", t.len(), center.len())));
            }
            let r = dist(t, &center);
            if r > radius + 1e-9 {
                return Err(Error::OutsideDomain { distance: r, radius });
            }
        }
        let optimum = match family {
            LossFamily::Quadratic => {
                let n = targets.len() as f64;
                (0..center.len()).map(|k| targets.iter().map(|t| t[k]).sum::<f64>() / n).collect()
            }
            LossFamily::Distance => geometric_median(&targets),
        };
        Ok(Self {
            family,
            targets,
            center,
            diameter,
            optimum,
        })
    }

    pub fn m(&self) -> usize {
        self.targets.len()
    }

    pub fn radius(&self) -> f64 {
        self.diameter / 2.0
    }

    pub fn lipschitz(&self) -> f64 {
        self.family.lipschitz(self.diameter)
    }

    pub fn bound(&self) -> f64 {
        self.family.bound(self.diameter)
    }

    pub fn loss(&self, i: usize, w: &[f64]) -> f64 {
        let r = dist(w, &self.targets[i]);
        match self.family {
            LossFamily::Quadratic => 0.5 * r * r,
            LossFamily::Distance => r,
        }
    }

    pub fn gradient(&self, i: usize, w: &[f64]) -> Vec<f64> {
        let u = &self.targets[i];
        match self.family {
            LossFamily::Quadratic => w.iter().zip(u).map(|(a, b)| a - b).collect(),
            LossFamily::Distance => {
                let r = dist(w, u);
                if r == 0.0 {
                    vec![0.0; w.len()]
                } else {
                    w.iter().zip(u).map(|(a, b)| (a - b) / r).collect()
                }
            }
        }
    }

    /// Total loss of the fixed point `w` over the task.
    pub fn total_loss(&self, w: &[f64]) -> f64 {
        (0..self.m()).map(|i| self.loss(i, w)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OgdRun {
    /// `w_{t,1}, .., w_{t,m}`: the point each loss was evaluated at.
    pub iterates: Vec<Vec<f64>>,
    pub regret: f64,
}

/// Projected online gradient descent through one task.
pub fn ogd(task: &OcoTask, init: &[f64], step: f64) -> Result<OgdRun> {
    let radius = task.radius();
    let r = dist(init, &task.center);
    if r > radius + 1e-9 {
        return Err(Error::OutsideDomain { distance: r, radius });
    }
    let mut w = init.to_vec();
    let mut iterates = Vec::with_capacity(task.m());
    let mut incurred = 0.0;
    for i in 0..task.m() {
        incurred += task.loss(i, &w);
        let g = task.gradient(i, &w);
        let next: Vec<f64> = w.iter().zip(&g).map(|(x, gx)| x - step * gx).collect();
        iterates.push(std::mem::replace(&mut w, project(&next, &task.center, radius)));
    }
    Ok(OgdRun {
        iterates,
        regret: incurred - task.total_loss(&task.optimum),
    })
}

/// The standard OGD guarantee `D^2 / (2 step) + step m G^2 / 2`.
pub fn ogd_regret_bound(diameter: f64, lipschitz: f64, m: usize, step: f64) -> f64 {
    diameter * diameter / (2.0 * step) + step * m as f64 * lipschitz * lipschitz / 2.0
}

/// Step sizes `c_j = D / (G j sqrt(m))` for `j = 1..=k`.
pub fn step_grid(diameter: f64, lipschitz: f64, m: usize, k: usize) -> Vec<f64> {
    (1..=k)
        .map(|j| diameter / (lipschitz * j as f64 * (m as f64).sqrt()))
        .collect()
}

/// Grid size solving `k^(3/2) = (D G / b) sqrt(tau / (2m))`, rounded up.
pub fn auto_k(diameter: f64, lipschitz: f64, bound: f64, m: usize, tau: usize) -> usize {
    let rhs = diameter * lipschitz / bound * (tau as f64 / (2.0 * m as f64)).sqrt();
    (rhs.powf(2.0 / 3.0).ceil() as usize).max(1)
}

/// Root-mean-square distance of the optima from their mean, the mean being
/// projected into the domain first.
pub fn task_similarity(optima: &[Vec<f64>], center: &[f64], radius: f64) -> f64 {
    assert!(!optima.is_empty(), "need at least one optimum");
    let n = optima.len() as f64;
    let mean: Vec<f64> = (0..center.len()).map(|k| optima.iter().map(|o| o[k]).sum::<f64>() / n).collect();
    let w = project(&mean, center, radius);
    (optima.iter().map(|o| dist(o, &w).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    /// 1-based task index.
    pub task: usize,
    /// Sampled grid index in bandit mode.
    pub arm: Option<usize>,
    pub regret: f64,
    /// Task-averaged regret over tasks `1..=task`.
    pub avg_regret: f64,
    /// Task similarity of the optima revealed so far.
    pub similarity: f64,
    pub theta_entropy: f64,
}

/// Runs the meta-learning protocol over `tasks` with a `k`-point step grid.
///
/// Regret is scaled by `1/(m b)` before the exponentiated update, so the
/// bandit step is `sqrt(ln k / (k tau))`; with full information it is
/// `sqrt(ln k / tau)` and the recorded regret is its expectation under theta.
pub fn theorem_protocol(tasks: &[OcoTask], k: usize, mode: Feedback, rng: &mut impl Rng) -> Result<Vec<RegretRecord>> {
    assert!(!tasks.is_empty() && k >= 1);
    let first = &tasks[0];
    let (d, g, b, m) = (first.diameter, first.lipschitz(), first.bound(), first.m());
    let tau = tasks.len();
    let grid = step_grid(d, g, m, k);
    let scale = 1.0 / (m as f64 * b);
    let kf = k as f64;
    let eta = match mode {
        Feedback::Bandit => (kf.ln() / (kf * tau as f64)).sqrt(),
        Feedback::FullInformation => (kf.ln() / tau as f64).sqrt(),
    };
    let mut theta = vec![1.0 / kf; k];
    let mut w = first.center.clone();
    let mut optima: Vec<Vec<f64>> = Vec::with_capacity(tau);
    let mut total = 0.0;
    let mut records = Vec::with_capacity(tau);
    for (t, task) in tasks.iter().enumerate() {
        let (arm, regret, grad) = match mode {
            Feedback::Bandit => {
                let j = sample_categorical(&theta, rng);
                let r = ogd(task, &w, grid[j])?.regret;
                let grad = grad_estimate(&[r * scale], &[1], &[j], &theta, &0.0)?;
                (Some(j), r, grad)
            }
            Feedback::FullInformation => {
                let all: Vec<f64> = grid.iter().map(|&c| ogd(task, &w, c).map(|o| o.regret)).collect::<Result<_>>()?;
                let expected = all.iter().zip(&theta).map(|(r, p)| r * p).sum();
                (None, expected, all.iter().map(|r| r * scale).collect())
            }
        };
        theta = exponentiated_update(&theta, &grad, eta);
        let alpha = 1.0 / (t + 1) as f64;
        w = w
            .iter()
            .zip(&task.optimum)
            .map(|(x, o)| (1.0 - alpha) * x + alpha * o)
            .collect();
        optima.push(task.optimum.clone());
        total += regret;
        records.push(RegretRecord {
            task: t + 1,
            arm,
            regret,
            avg_regret: total / (t + 1) as f64,
            similarity: task_similarity(&optima, &first.center, first.radius()),
            theta_entropy: entropy(&theta),
        });
    }
    Ok(records)
}

/// Uniform draw from the ball of the given radius around the origin.
pub fn uniform_in_ball(dim: usize, radius: f64, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&g);
        if n > 0.0 {
            let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
            return g.iter().map(|x| x * r / n).collect();
        }
    }
}

/// Random task sequences around a shared hub.
///
/// Task `t` has a center `hub + u`, `u` uniform in a ball of radius
/// `dispersion`; its `m` targets are that center plus noise uniform in a
/// ball of radius `noise`. Everything is projected into the domain, a ball
/// of diameter `diameter` at the origin. `dispersion = 0` gives identical
/// tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskGenerator {
    pub family: LossFamily,
    pub dim: usize,
    pub diameter: f64,
    pub m: usize,
    pub dispersion: f64,
    pub noise: f64,
}

impl TaskGenerator {
    pub fn generate(&self, tau: usize, rng: &mut impl Rng) -> Result<Vec<OcoTask>> {
        let radius = self.diameter / 2.0;
        let origin = vec![0.0; self.dim];
        let hub_room = (radius - self.dispersion - self.noise).max(0.0);
        let hub = uniform_in_ball(self.dim, hub_room, rng);
        (0..tau)
            .map(|_| {
                let shift = uniform_in_ball(self.dim, self.dispersion, rng);
                let c: Vec<f64> = hub.iter().zip(&shift).map(|(h, s)| h + s).collect();
                let c = project(&c, &origin, radius);
                let targets = (0..self.m)
                    .map(|_| {
                        if self.noise == 0.0 {
                            return c.clone();
                        }
                        let e = uniform_in_ball(self.dim, self.noise, rng);
                        let u: Vec<f64> = c.iter().zip(&e).map(|(a, b)| a + b).collect();
                        project(&u, &origin, radius)
                    })
                    .collect();
                OcoTask::new(self.family, targets, origin.clone(), self.diameter)
            })
            .collect()
    }
}
