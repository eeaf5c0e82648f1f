//! Exponential-kernel Hawkes mathematics shared by the simulator, the
//! particle filter and the evaluation code.
//!
//! Every user runs an independent multivariate Hawkes process whose
//! dimensions are tasks. A task `k` of pattern `ℓ` contributes
//!
//! ```text
//! λ_{u,k}(t) = α_ℓ · Σ_{i ∈ k} exp(-ν (t - t_i))
//! ```
//!
//! and new tasks arrive at the base rate `μ_u`. Because all kernels share the
//! decay `ν`, the sum over a task's events is carried as a single number that
//! is decayed and incremented in O(1) per event.
//!
//! Time is measured in months throughout.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{HdhpError, Result};

pub type UserId = usize;
pub type PatternId = usize;
pub type TaskId = usize;

/// Below this gap between `α` and `ν` the moment formulas switch to their
/// analytic limit.
pub const CRITICAL_EPS: f64 = 1e-8;

/// Triggering kernel `α · exp(-ν · elapsed)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub alpha: f64,
    pub nu: f64,
}

impl KernelParams {
    pub fn new(alpha: f64, nu: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(HdhpError::domain(format!("alpha must be >= 0, got {alpha}")));
        }
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(HdhpError::domain(format!("nu must be > 0, got {nu}")));
        }
        Ok(Self { alpha, nu })
    }

    /// Expected number of direct offspring of one event.
    pub fn branching_ratio(&self) -> f64 {
        self.alpha / self.nu
    }
}

fn check_duration(name: &str, value: f64) -> Result<()> {
    if value >= 0.0 {
        Ok(())
    } else {
        Err(HdhpError::domain(format!("{name} must be >= 0, got {value}")))
    }
}

pub fn kernel_value(k: &KernelParams, elapsed: f64) -> Result<f64> {
    check_duration("elapsed", elapsed)?;
    Ok(k.alpha * (-k.nu * elapsed).exp())
}

/// Decays an excitation sum over `gap` and optionally adds a new event.
pub fn excitation_update(sum: f64, gap: f64, nu: f64, add_event: bool) -> Result<f64> {
    check_duration("gap", gap)?;
    if sum < 0.0 {
        return Err(HdhpError::domain(format!("excitation sum must be >= 0, got {sum}")));
    }
    let decayed = sum * (-nu * gap).exp();
    Ok(if add_event { decayed + 1.0 } else { decayed })
}

/// `∫_0^gap Σ α S e^{-ντ} dτ` for a weighted excitation `α·S` known at the
/// start of the interval.
#[inline]
pub fn excitation_integral(weighted_excitation: f64, nu: f64, gap: f64) -> f64 {
    weighted_excitation * (-(-nu * gap).exp_m1()) / nu
}

/// One table of the franchise: a burst of related events of one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub id: TaskId,
    pub user: UserId,
    pub pattern: PatternId,
    pub count: u32,
    pub last_time: f64,
    /// `Σ_i exp(-ν (last_time - t_i))` over the task's events.
    pub excitation_sum: f64,
}

impl TaskState {
    /// A task created by its first event at `time`.
    pub fn new(id: TaskId, user: UserId, pattern: PatternId, time: f64) -> Self {
        Self {
            id,
            user,
            pattern,
            count: 1,
            last_time: time,
            excitation_sum: 1.0,
        }
    }

    pub fn excitation_at(&self, t: f64, nu: f64) -> Result<f64> {
        let gap = t - self.last_time;
        if gap < 0.0 {
            return Err(HdhpError::domain(format!(
                "query time {t} precedes task {} last event {}",
                self.id, self.last_time
            )));
        }
        excitation_update(self.excitation_sum, gap, nu, false)
    }

    /// Appends an event at `t`.
    pub fn record(&mut self, t: f64, nu: f64) -> Result<()> {
        let gap = t - self.last_time;
        if gap < 0.0 {
            return Err(HdhpError::domain(format!(
                "event at {t} precedes task {} last event {}",
                self.id, self.last_time
            )));
        }
        self.excitation_sum = excitation_update(self.excitation_sum, gap, nu, true)?;
        self.last_time = t;
        self.count += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub user: UserId,
    pub mu: f64,
    pub tasks: Vec<TaskState>,
}

impl UserState {
    pub fn new(user: UserId, mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(HdhpError::domain(format!("mu must be > 0, got {mu}")));
        }
        Ok(Self {
            user,
            mu,
            tasks: Vec::new(),
        })
    }

    pub fn last_time(&self) -> Option<f64> {
        self.tasks
            .iter()
            .map(|t| t.last_time)
            .fold(None, |acc, t| Some(acc.map_or(t, |a: f64| a.max(t))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserIntensity {
    /// Rate of each task of the user, in the order of `UserState::tasks`.
    pub task_rates: Vec<f64>,
    pub new_task_rate: f64,
    pub total: f64,
}

impl UserIntensity {
    pub fn new_task_probability(&self) -> f64 {
        self.new_task_rate / self.total
    }
}

/// Intensities of every task of `u` at time `t`; `kernels` is indexed by pattern.
pub fn user_intensity(u: &UserState, kernels: &[KernelParams], t: f64) -> Result<UserIntensity> {
    let mut task_rates = Vec::with_capacity(u.tasks.len());
    let mut total = u.mu;
    for task in &u.tasks {
        let k = kernels.get(task.pattern).ok_or_else(|| {
            HdhpError::domain(format!("no kernel for pattern {}", task.pattern))
        })?;
        let rate = k.alpha * task.excitation_at(t, k.nu)?;
        total += rate;
        task_rates.push(rate);
    }
    Ok(UserIntensity {
        task_rates,
        new_task_rate: u.mu,
        total,
    })
}

/// A single user's event annotated with its task and pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkedEvent {
    pub time: f64,
    pub task: TaskId,
    pub pattern: PatternId,
}

/// Parameters of one user's task-marked Hawkes process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHawkes {
    pub mu: f64,
    /// Indexed by pattern.
    pub alphas: Vec<f64>,
    pub nu: f64,
}

impl UserHawkes {
    fn alpha(&self, pattern: PatternId) -> Result<f64> {
        self.alphas
            .get(pattern)
            .copied()
            .ok_or_else(|| HdhpError::domain(format!("no alpha for pattern {pattern}")))
    }
}

fn check_sorted(events: &[MarkedEvent]) -> Result<()> {
    for (i, w) in events.windows(2).enumerate() {
        if w[1].time < w[0].time {
            return Err(HdhpError::Unsorted {
                index: i + 1,
                time: w[1].time,
                previous: w[0].time,
            });
        }
    }
    Ok(())
}

/// Complete-data log-likelihood of one user's events on `[0, horizon)`.
///
/// The first event of a task is scored by the new-task rate `μ`, every later
/// one by the rate of the task it joins. The compensator is closed form. A zero
/// rate at an event returns `f64::NEG_INFINITY`.
pub fn log_likelihood(events: &[MarkedEvent], params: &UserHawkes, horizon: f64) -> Result<f64> {
    check_sorted(events)?;
    if let Some(last) = events.last() {
        if last.time >= horizon {
            return Err(HdhpError::domain(format!(
                "event at {} is not before the horizon {horizon}",
                last.time
            )));
        }
    }
    let nu = params.nu;
    let mut tasks: HashMap<TaskId, (f64, f64)> = HashMap::new();
    let mut log_rates = 0.0;
    let mut compensator = params.mu * horizon;
    for ev in events {
        let alpha = params.alpha(ev.pattern)?;
        let rate = match tasks.get_mut(&ev.task) {
            None => {
                tasks.insert(ev.task, (1.0, ev.time));
                params.mu
            }
            Some((sum, last)) => {
                let decayed = excitation_update(*sum, ev.time - *last, nu, false)?;
                *sum = decayed + 1.0;
                *last = ev.time;
                alpha * decayed
            }
        };
        if rate <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        log_rates += rate.ln();
        compensator += excitation_integral(alpha, nu, horizon - ev.time);
    }
    Ok(log_rates - compensator)
}

/// `(e^{dt} - 1) / d`, continuous through `d = 0`.
fn expm1_ratio(d: f64, t: f64) -> f64 {
    if d.abs() < CRITICAL_EPS {
        t * (1.0 + 0.5 * d * t)
    } else {
        (d * t).exp_m1() / d
    }
}

/// `(e^{dT} - 1 - dT) / d²`, continuous through `d = 0`.
fn expm1_second_ratio(d: f64, t: f64) -> f64 {
    let x = d * t;
    if x.abs() < 1e-3 {
        t * t * (0.5 + x / 6.0 + x * x / 24.0 + x * x * x / 120.0)
    } else {
        (x.exp_m1() - x) / (d * d)
    }
}

/// Mean intensity at time `t` of a single pattern dimension started empty
/// with base rate `mu_pi`.
///
/// Equals `μπ (α e^{(α-ν)t} - ν)/(α - ν)`, evaluated as
/// `μπ (1 + α (e^{(α-ν)t} - 1)/(α-ν))` so that it stays exact near `α = ν`.
pub fn expected_intensity(mu_pi: f64, k: &KernelParams, t: f64) -> Result<f64> {
    check_duration("t", t)?;
    check_duration("mu_pi", mu_pi)?;
    let d = k.alpha - k.nu;
    Ok(mu_pi * (1.0 + k.alpha * expm1_ratio(d, t)))
}

/// Expected number of events on `[0, horizon]`, the integral of
/// [`expected_intensity`]. For `α ≥ ν` the value grows exponentially with the
/// horizon; it is still returned as the analytic value.
pub fn expected_count(mu_pi: f64, k: &KernelParams, horizon: f64) -> Result<f64> {
    check_duration("horizon", horizon)?;
    check_duration("mu_pi", mu_pi)?;
    let d = k.alpha - k.nu;
    Ok(mu_pi * (horizon + k.alpha * expm1_second_ratio(d, horizon)))
}

/// Compensator increments `∫_{t_i}^{t_{i+1}} λ_u(τ) dτ` between consecutive
/// events of one user. Under the generating model they are i.i.d. Exp(1).
pub fn rescale_times(events: &[MarkedEvent], model: &UserHawkes) -> Result<Vec<f64>> {
    check_sorted(events)?;
    let nu = model.nu;
    // Σ_k α_k S_k over all tasks, valid at `last`.
    let mut weighted = 0.0;
    let mut last = match events.first() {
        Some(e) => e.time,
        None => return Ok(Vec::new()),
    };
    let mut gaps = Vec::with_capacity(events.len().saturating_sub(1));
    for (i, ev) in events.iter().enumerate() {
        let gap = ev.time - last;
        if i > 0 {
            gaps.push(model.mu * gap + excitation_integral(weighted, nu, gap));
        }
        weighted = weighted * (-nu * gap).exp() + model.alpha(ev.pattern)?;
        last = ev.time;
    }
    Ok(gaps)
}
