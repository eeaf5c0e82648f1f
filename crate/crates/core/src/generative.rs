//! Forward simulation of grouped event streams.
//!
//! Events of all users are drawn from the superposition of the per-user Hawkes
//! processes by thinning, assigned to an existing or new task in proportion to
//! the task intensities, and new tasks pick a pattern either from the Chinese
//! restaurant process or from an explicit popularity vector.
//!
//! Gamma distributions are parameterised by `(shape, rate)` in [`Hyperparams`]
//! (`tau1`, `tau2`) and by `(shape, scale)` in [`SyntheticConfig`]
//! (`mu_shape`/`mu_scale`, `alpha_shape`/`alpha_scale`). The synthetic
//! defaults `Gamma(10, 0.2)` for base rates therefore have mean 2 new tasks per
//! month, and `Gamma(8, 0.25)` for kernel strengths has mean 2.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Exp, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{HdhpError, Result};
use crate::point_process::{
    user_intensity, KernelParams, PatternId, TaskId, TaskState, UserId, UserState,
};

/// Model hyperparameters and inference settings, read from a flat JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Concentration of the pattern Dirichlet process.
    pub beta: f64,
    /// Symmetric Dirichlet prior on pattern word distributions.
    pub eta0: f64,
    /// Gamma prior on kernel strength: shape.
    pub tau1: f64,
    /// Gamma prior on kernel strength: rate.
    pub tau2: f64,
    /// Kernel decay, 1/months. Fixed, never inferred.
    pub nu: f64,
    pub vocab: Vec<String>,
    /// Smoothing factor `r` of the online base-rate update.
    pub mu_smoothing: f64,
    pub particles: usize,
    /// Resample when ESS falls below `ess_fraction * particles`.
    pub ess_fraction: f64,
    pub seed: u64,
    /// Base rate of a user before the first update.
    pub mu_init: f64,
    /// Beginning of the observation window.
    pub start_time: f64,
    pub alpha_refresh: AlphaRefresh,
    pub selection: Selection,
    /// Keep every α at the prior mean and every μ at `mu_init`.
    pub freeze_params: bool,
    /// Tasks whose excitation sum decays below this are dropped from the
    /// active set. Zero keeps every task.
    pub prune_below: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            eta0: 0.1,
            tau1: 8.0,
            tau2: 4.0,
            nu: 5.0,
            vocab: Vec::new(),
            mu_smoothing: 0.9,
            particles: 200,
            ess_fraction: 0.5,
            seed: 0,
            mu_init: 1.0,
            start_time: 0.0,
            alpha_refresh: AlphaRefresh::Touched,
            selection: Selection::MaxWeight,
            freeze_params: false,
            prune_below: 1e-30,
        }
    }
}

/// Which kernel strengths are redrawn from their posterior at each event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRefresh {
    /// Only the pattern that received the event.
    Touched,
    /// Every pattern, before each event.
    All,
}

/// How the reported particle is chosen at the end of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Largest final importance weight; ties go to the larger path likelihood.
    MaxWeight,
    /// Largest sum of log-increments along the particle's full ancestry.
    MaxPathLikelihood,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta", self.beta),
            ("eta0", self.eta0),
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("nu", self.nu),
            ("mu_init", self.mu_init),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HdhpError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mu_smoothing) {
            return Err(HdhpError::Config(format!(
                "mu_smoothing must lie in [0, 1], got {}",
                self.mu_smoothing
            )));
        }
        if !(self.ess_fraction > 0.0 && self.ess_fraction <= 1.0) {
            return Err(HdhpError::Config(format!(
                "ess_fraction must lie in (0, 1], got {}",
                self.ess_fraction
            )));
        }
        if self.particles == 0 {
            return Err(HdhpError::Config("particles must be >= 1".into()));
        }
        if !(self.prune_below >= 0.0) || !self.start_time.is_finite() {
            return Err(HdhpError::Config("prune_below and start_time must be finite".into()));
        }
        if self.vocab.is_empty() {
            return Err(HdhpError::Config("vocabulary is empty".into()));
        }
        let mut sorted: Vec<&String> = self.vocab.iter().collect();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(HdhpError::Config(format!("duplicate vocabulary entry `{}`", w[0])));
        }
        Ok(())
    }

    pub fn alpha_prior_mean(&self) -> f64 {
        self.tau1 / self.tau2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternParams {
    pub alpha: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub user: UserId,
    /// Indices into the vocabulary.
    pub words: Vec<usize>,
    pub true_pattern: Option<PatternId>,
    pub true_task: Option<TaskId>,
}

/// How new tasks choose a pattern during simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Popularity {
    /// Fixed popularity vector over `n_patterns` patterns.
    Explicit { weights: Vec<f64> },
    /// Popularity drawn once from a symmetric Dirichlet.
    Dirichlet { concentration: f64 },
    /// Chinese restaurant process; `n_patterns` is ignored and patterns are
    /// created on demand.
    Crp { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub mu_shape: f64,
    pub mu_scale: f64,
    pub n_patterns: usize,
    pub popularity: Popularity,
    pub alpha_shape: f64,
    pub alpha_scale: f64,
    pub vocab_size: usize,
    /// Number of words each pattern can emit.
    pub support_size: usize,
    pub word_concentration: f64,
    pub nu: f64,
    pub words_per_event: usize,
    /// Stop after this many events.
    pub n_events: usize,
    /// Stop at this time, if set.
    pub horizon: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            mu_shape: 10.0,
            mu_scale: 0.2,
            n_patterns: 50,
            popularity: Popularity::Dirichlet { concentration: 1.0 },
            alpha_shape: 8.0,
            alpha_scale: 0.25,
            vocab_size: 100,
            support_size: 30,
            word_concentration: 3.0,
            nu: 5.0,
            words_per_event: 5,
            n_events: 150_000,
            horizon: None,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HdhpError::Config(m));
        if self.n_users == 0 || self.vocab_size == 0 || self.words_per_event == 0 {
            return err("n_users, vocab_size and words_per_event must be >= 1".into());
        }
        if self.support_size == 0 || self.support_size > self.vocab_size {
            return err(format!(
                "support_size {} must lie in [1, vocab_size = {}]",
                self.support_size, self.vocab_size
            ));
        }
        for (name, v) in [
            ("mu_shape", self.mu_shape),
            ("mu_scale", self.mu_scale),
            ("alpha_shape", self.alpha_shape),
            ("alpha_scale", self.alpha_scale),
            ("word_concentration", self.word_concentration),
            ("nu", self.nu),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be > 0, got {v}"));
            }
        }
        if self.n_events == 0 && self.horizon.is_none() {
            return err("either n_events or horizon must bound the stream".into());
        }
        match &self.popularity {
            Popularity::Explicit { weights } => {
                if weights.len() != self.n_patterns || weights.iter().any(|w| !(*w >= 0.0)) {
                    return err("explicit popularity needs n_patterns nonnegative weights".into());
                }
                let s: f64 = weights.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return err(format!("popularity must sum to 1, sums to {s}"));
                }
            }
            Popularity::Dirichlet { concentration } => {
                if self.n_patterns == 0 || !(*concentration > 0.0) {
                    return err("Dirichlet popularity needs n_patterns >= 1 and concentration > 0".into());
                }
            }
            Popularity::Crp { beta } => {
                if !(*beta > 0.0) {
                    return err("CRP beta must be > 0".into());
                }
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vec<String> {
        (0..self.vocab_size).map(|i| format!("w{i}")).collect()
    }

    pub fn user_names(&self) -> Vec<String> {
        (0..self.n_users).map(|i| format!("u{i}")).collect()
    }
}

/// Parameters that generated a synthetic stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub users: Vec<String>,
    pub vocab: Vec<String>,
    pub nu: f64,
    pub mus: Vec<f64>,
    pub patterns: Vec<PatternParams>,
    /// Configured popularity, or realised task shares in CRP mode.
    pub popularity: Vec<f64>,
    /// Pattern of every task, indexed by task id.
    pub task_patterns: Vec<PatternId>,
    pub task_users: Vec<UserId>,
    /// Time of the last generated event.
    pub end_time: f64,
}

impl GroundTruth {
    pub fn alphas(&self) -> Vec<f64> {
        self.patterns.iter().map(|p| p.alpha).collect()
    }
}

fn gamma_shape_rate<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters validated")
        .sample(rng)
}

/// Symmetric-or-not Dirichlet draw by normalised gammas.
pub fn sample_dirichlet<R: Rng + ?Sized>(concentration: &[f64], rng: &mut R) -> Vec<f64> {
    let mut draws: Vec<f64> = concentration
        .iter()
        .map(|&c| Gamma::new(c, 1.0).expect("positive concentration").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        // every gamma underflowed; the Dirichlet is then a point mass
        let hit = rng.random_range(0..draws.len());
        draws.iter_mut().enumerate().for_each(|(i, d)| *d = if i == hit { 1.0 } else { 0.0 });
    }
    draws
}

/// A new pattern from the base measure: `α ~ Gamma(τ₁, τ₂)`, `θ ~ Dir(η₀)`.
pub fn sample_pattern_params<R: Rng + ?Sized>(h: &Hyperparams, rng: &mut R) -> PatternParams {
    let alpha = gamma_shape_rate(h.tau1, h.tau2, rng);
    let theta = sample_dirichlet(&vec![h.eta0; h.vocab.len()], rng);
    PatternParams { alpha, theta }
}

/// A pattern that emits only `support_size` randomly chosen words.
fn sample_support_pattern<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> PatternParams {
    let alpha = Gamma::new(cfg.alpha_shape, cfg.alpha_scale)
        .expect("validated")
        .sample(rng);
    let support = rand::seq::index::sample(rng, cfg.vocab_size, cfg.support_size);
    let weights = sample_dirichlet(&vec![cfg.word_concentration; cfg.support_size], rng);
    let mut theta = vec![0.0; cfg.vocab_size];
    for (w, p) in support.iter().zip(weights) {
        theta[w] = p;
    }
    PatternParams { alpha, theta }
}

/// Total intensity of every user at `t`.
fn user_rates(users: &[UserState], kernels: &[KernelParams], t: f64) -> Result<Vec<f64>> {
    users
        .iter()
        .map(|u| user_intensity(u, kernels, t).map(|i| i.total))
        .collect()
}

/// Draws the time and user of the next event by thinning.
///
/// Between events every kernel only decays, so the total intensity at the
/// current candidate bounds it for all later times until the next event.
pub fn sample_next_event<R: Rng + ?Sized>(
    users: &[UserState],
    kernels: &[KernelParams],
    t_prev: f64,
    rng: &mut R,
) -> Result<(f64, UserId)> {
    let mut t = t_prev;
    let mut bound: f64 = user_rates(users, kernels, t)?.iter().sum();
    if !(bound > 0.0) {
        return Err(HdhpError::domain("total intensity is zero"));
    }
    loop {
        t += Exp::new(bound).expect("positive bound").sample(rng);
        let rates = user_rates(users, kernels, t)?;
        let total: f64 = rates.iter().sum();
        if rng.random::<f64>() * bound <= total {
            let mut pick = rng.random::<f64>() * total;
            for (u, r) in rates.iter().enumerate() {
                if pick < *r {
                    return Ok((t, u));
                }
                pick -= r;
            }
            // rounding left a sliver past the last user
            let last = rates.iter().rposition(|r| *r > 0.0).unwrap_or(rates.len() - 1);
            return Ok((t, last));
        }
        bound = total;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskChoice {
    /// Index into `UserState::tasks`.
    Existing(usize),
    New,
}

/// Picks the task of an event of `u` at `t` in proportion to task intensities.
pub fn assign_task<R: Rng + ?Sized>(
    u: &UserState,
    kernels: &[KernelParams],
    t: f64,
    rng: &mut R,
) -> Result<TaskChoice> {
    let intensity = user_intensity(u, kernels, t)?;
    let mut pick = rng.random::<f64>() * intensity.total;
    if pick < intensity.new_task_rate {
        return Ok(TaskChoice::New);
    }
    pick -= intensity.new_task_rate;
    for (i, r) in intensity.task_rates.iter().enumerate() {
        if pick < *r {
            return Ok(TaskChoice::Existing(i));
        }
        pick -= r;
    }
    Ok(match intensity.task_rates.iter().rposition(|r| *r > 0.0) {
        Some(i) => TaskChoice::Existing(i),
        None => TaskChoice::New,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternChoice {
    Existing(PatternId),
    New,
}

/// Chinese restaurant process step over patterns. `counts[ℓ]` is the number of
/// tasks of pattern `ℓ` and must sum to `total_tasks`.
pub fn assign_pattern<R: Rng + ?Sized>(
    counts: &[u64],
    total_tasks: u64,
    beta: f64,
    rng: &mut R,
) -> Result<PatternChoice> {
    let sum: u64 = counts.iter().sum();
    if sum != total_tasks {
        return Err(HdhpError::domain(format!(
            "pattern counts sum to {sum} but there are {total_tasks} tasks"
        )));
    }
    let mut pick = rng.random::<f64>() * (total_tasks as f64 + beta);
    for (l, &m) in counts.iter().enumerate() {
        if pick < m as f64 {
            return Ok(PatternChoice::Existing(l));
        }
        pick -= m as f64;
    }
    Ok(PatternChoice::New)
}

/// `n_words` i.i.d. draws from `theta`.
pub fn sample_content<R: Rng + ?Sized>(theta: &[f64], n_words: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_words == 0 {
        return Err(HdhpError::domain("an event needs at least one word"));
    }
    let dist = WeightedIndex::new(theta)
        .map_err(|e| HdhpError::domain(format!("invalid word distribution: {e}")))?;
    Ok((0..n_words).map(|_| dist.sample(rng)).collect())
}

/// Simulates a labelled stream from `cfg`.
pub fn generate<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Result<(Vec<Event>, GroundTruth)> {
    cfg.validate()?;
    let mus: Vec<f64> = (0..cfg.n_users)
        .map(|_| Gamma::new(cfg.mu_shape, cfg.mu_scale).expect("validated").sample(rng))
        .collect();
    let mut patterns: Vec<PatternParams> = match cfg.popularity {
        Popularity::Crp { .. } => Vec::new(),
        _ => (0..cfg.n_patterns).map(|_| sample_support_pattern(cfg, rng)).collect(),
    };
    let popularity = match &cfg.popularity {
        Popularity::Explicit { weights } => Some(weights.clone()),
        Popularity::Dirichlet { concentration } => {
            Some(sample_dirichlet(&vec![*concentration; cfg.n_patterns], rng))
        }
        Popularity::Crp { .. } => None,
    };
    let popularity_index = popularity
        .as_ref()
        .map(|p| WeightedIndex::new(p).map_err(|e| HdhpError::Config(format!("popularity: {e}"))))
        .transpose()?;

    let mut users = mus
        .iter()
        .enumerate()
        .map(|(u, &mu)| UserState::new(u, mu))
        .collect::<Result<Vec<_>>>()?;
    let mut kernels: Vec<KernelParams> = patterns
        .iter()
        .map(|p| KernelParams::new(p.alpha, cfg.nu))
        .collect::<Result<_>>()?;
    let mut task_patterns: Vec<PatternId> = Vec::new();
    let mut task_users: Vec<UserId> = Vec::new();
    let mut tasks_per_pattern: Vec<u64> = vec![0; patterns.len()];

    let mut events = Vec::new();
    let mut t = 0.0;
    let max_events = if cfg.n_events == 0 { usize::MAX } else { cfg.n_events };
    while events.len() < max_events {
        let (t_next, u) = sample_next_event(&users, &kernels, t, rng)?;
        if cfg.horizon.is_some_and(|h| t_next >= h) {
            break;
        }
        t = t_next;
        let (task, pattern) = match assign_task(&users[u], &kernels, t, rng)? {
            TaskChoice::Existing(i) => {
                let task = &mut users[u].tasks[i];
                task.record(t, cfg.nu)?;
                (task.id, task.pattern)
            }
            TaskChoice::New => {
                let pattern = match (&cfg.popularity, &popularity_index) {
                    (Popularity::Crp { beta }, _) => {
                        let k = task_patterns.len() as u64;
                        match assign_pattern(&tasks_per_pattern, k, *beta, rng)? {
                            PatternChoice::Existing(l) => l,
                            PatternChoice::New => {
                                let p = sample_support_pattern(cfg, rng);
                                kernels.push(KernelParams::new(p.alpha, cfg.nu)?);
                                patterns.push(p);
                                tasks_per_pattern.push(0);
                                patterns.len() - 1
                            }
                        }
                    }
                    (_, Some(index)) => index.sample(rng),
                    (_, None) => unreachable!("explicit popularity always has an index"),
                };
                let id = task_patterns.len();
                task_patterns.push(pattern);
                task_users.push(u);
                tasks_per_pattern[pattern] += 1;
                users[u].tasks.push(TaskState::new(id, u, pattern, t));
                (id, pattern)
            }
        };
        let words = sample_content(&patterns[pattern].theta, cfg.words_per_event, rng)?;
        events.push(Event {
            time: t,
            user: u,
            words,
            true_pattern: Some(pattern),
            true_task: Some(task),
        });
        // tasks that have decayed to nothing no longer affect sampling
        users[u]
            .tasks
            .retain(|task| task.excitation_sum * (-cfg.nu * (t - task.last_time)).exp() > 1e-12);
    }

    let popularity = popularity.unwrap_or_else(|| {
        let k = task_patterns.len().max(1) as f64;
        tasks_per_pattern.iter().map(|&m| m as f64 / k).collect()
    });
    let truth = GroundTruth {
        users: cfg.user_names(),
        vocab: cfg.vocab(),
        nu: cfg.nu,
        mus,
        patterns,
        popularity,
        task_patterns,
        task_users,
        end_time: t,
    };
    Ok((events, truth))
}
