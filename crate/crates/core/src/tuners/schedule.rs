//! Elimination schedules for successive halving.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stage boundaries `tau_0 = 0 < tau_1 < .. < tau_R` plus the per-arm cap.
///
/// Stage `r` runs the `eta^(R-r+1)` arms still alive from `tau_{r-1}` to
/// `tau_r`; after the last elimination the single survivor keeps training
/// until it has used `max_per_arm` rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EliminationSchedule {
    pub eta: usize,
    pub rounds: usize,
    pub boundaries: Vec<usize>,
    pub max_per_arm: usize,
}

impl EliminationSchedule {
    /// Random search over `n` arms: one elimination straight to a single survivor.
    pub fn random_search(n: usize, total_budget: usize, max_per_arm: usize) -> Result<Self> {
        compute_schedule(n, 1, total_budget, max_per_arm)
    }

    pub fn initial_arms(&self) -> usize {
        self.eta.pow(self.rounds as u32)
    }

    /// Number of arms alive after elimination `r` (`r = 0` is the start).
    pub fn survivors_after(&self, r: usize) -> usize {
        self.eta.pow((self.rounds - r) as u32)
    }

    /// Width of stage `r` in `1..=R`.
    pub fn stage_rounds(&self, r: usize) -> usize {
        self.boundaries[r] - self.boundaries[r - 1]
    }

    /// Rounds the survivor trains after the last elimination.
    pub fn final_rounds(&self) -> usize {
        self.max_per_arm - self.boundaries[self.rounds]
    }

    /// Communication rounds consumed by a full sweep.
    pub fn total_rounds(&self) -> usize {
        (1..=self.rounds)
            .map(|r| self.survivors_after(r - 1) * self.stage_rounds(r))
            .sum::<usize>()
            + self.final_rounds()
    }
}

/// Equal stage spacing `s = floor((T - M) / ((eta^(R+1) - 1)/(eta - 1) - R - 1))`,
/// with leftover budget spent lengthening the last elimination stage.
///
/// The denominator equals `sum_{i=1..R} (eta^i - 1)`, the number of
/// spacing units consumed by arms eliminated along the way, so a sweep costs
/// `denominator * s + M` before the leftover is assigned.
pub fn compute_schedule(eta: usize, rounds: usize, total_budget: usize, max_per_arm: usize) -> Result<EliminationSchedule> {
    let infeasible = |msg: String| Err(Error::InfeasibleSchedule(msg));
    if eta < 2 {
        return infeasible(format!("elimination rate must be >= 2, got {eta}"));
    }
    if rounds < 1 {
        return infeasible("need at least one elimination round".into());
    }
    if max_per_arm == 0 || total_budget == 0 {
        return infeasible("budgets must be positive".into());
    }
    if max_per_arm > total_budget {
        return infeasible(format!("max rounds per arm {max_per_arm} exceeds total budget {total_budget}"));
    }
    let mut denom = 0usize;
    let mut power = 1usize;
    for _ in 0..rounds {
        power = match power.checked_mul(eta) {
            Some(p) => p,
            None => return infeasible(format!("{eta}^{rounds} arms overflows")),
        };
        denom += power - 1;
    }
    let spacing = (total_budget - max_per_arm) / denom;
    if spacing < 1 {
        return infeasible(format!(
            "budget {total_budget} with {max_per_arm} rounds per arm leaves no room for {denom} stage units"
        ));
    }
    if rounds * spacing > max_per_arm {
        return infeasible(format!(
            "{rounds} stages of {spacing} rounds exceed the per-arm cap {max_per_arm}"
        ));
    }
    let mut boundaries: Vec<usize> = (0..=rounds).map(|r| r * spacing).collect();
    let leftover = total_budget - (denom * spacing + max_per_arm);
    // the last stage runs eta arms, and the survivor's total stays at M
    let extra = (leftover / (eta - 1)).min(max_per_arm - boundaries[rounds]);
    boundaries[rounds] += extra;
    Ok(EliminationSchedule {
        eta,
        rounds,
        boundaries,
        max_per_arm,
    })
}
