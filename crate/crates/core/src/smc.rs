//! Sequential Monte Carlo inference of tasks and patterns.
//!
//! Each particle carries one hypothesis of the task assignments of all events
//! seen so far, together with the collapsed word counts of every pattern, the
//! per-pattern sufficient statistics of the kernel strength and the online
//! base-rate estimates of every user. For every incoming event each particle
//!
//! 1. refreshes base rates (and optionally every kernel strength),
//! 2. scores the event under the time model,
//! 3. draws the task from the locally optimal proposal (task prior times the
//!    Dirichlet-multinomial predictive of the event's words),
//! 4. adds the proposal normaliser and the time term to its log-weight,
//! 5. redraws the kernel strength of the pattern that received the event.
//!
//! Weights are then normalised with log-sum-exp and the population is
//! resampled systematically when the effective sample size drops below
//! `ess_fraction · particles`.
//!
//! State that rarely changes between resampled copies (per-user task lists,
//! per-pattern word counts, the assignment history) sits behind `Arc` and is
//! copied only when a particle writes to it.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HdhpError, Result};
use crate::generative::{AlphaRefresh, Event, Hyperparams, Selection};
use crate::point_process::{excitation_integral, PatternId, TaskId, TaskState, UserId};

/// Collapsed word counts `C_{w,ℓ}` and totals `C_ℓ` of every pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternWordCounts {
    vocab_size: usize,
    totals: Vec<u64>,
    counts: Vec<Arc<Vec<u32>>>,
}

impl PatternWordCounts {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            totals: Vec::new(),
            counts: Vec::new(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn n_patterns(&self) -> usize {
        self.totals.len()
    }

    pub fn total(&self, pattern: PatternId) -> u64 {
        self.totals[pattern]
    }

    pub fn count(&self, pattern: PatternId, word: usize) -> u32 {
        self.counts[pattern][word]
    }

    pub fn counts(&self, pattern: PatternId) -> &[u32] {
        &self.counts[pattern]
    }

    pub fn add_pattern(&mut self) -> PatternId {
        self.totals.push(0);
        self.counts.push(Arc::new(vec![0; self.vocab_size]));
        self.totals.len() - 1
    }

    pub fn add_words(&mut self, pattern: PatternId, words: &[usize]) {
        let counts = Arc::make_mut(&mut self.counts[pattern]);
        for &w in words {
            counts[w] += 1;
        }
        self.totals[pattern] += words.len() as u64;
    }

    /// Rebuilds counts from dense per-pattern vectors.
    pub fn from_dense(vocab_size: usize, dense: Vec<Vec<u32>>) -> Result<Self> {
        let mut out = Self::new(vocab_size);
        for row in dense {
            if row.len() != vocab_size {
                return Err(HdhpError::domain("word count row does not match vocabulary size"));
            }
            out.totals.push(row.iter().map(|&c| c as u64).sum());
            out.counts.push(Arc::new(row));
        }
        Ok(out)
    }
}

fn check_words(query: &[usize], vocab_size: usize) -> Result<()> {
    if query.is_empty() {
        return Err(HdhpError::domain("query has no words"));
    }
    if let Some(w) = query.iter().find(|&&w| w >= vocab_size) {
        return Err(HdhpError::domain(format!(
            "word index {w} is outside the vocabulary of size {vocab_size}"
        )));
    }
    Ok(())
}

/// Dirichlet-multinomial predictive probability of `query` under `pattern`
/// (`None` scores a pattern with no words yet).
///
/// Computed as the sequential product
/// `Π_j (C_{w_j,ℓ} + η₀ + #{i<j: w_i = w_j}) / (C_ℓ + η₀|𝒲| + j)`.
pub fn content_marginal(
    counts: &PatternWordCounts,
    pattern: Option<PatternId>,
    query: &[usize],
    eta0: f64,
) -> Result<f64> {
    check_words(query, counts.vocab_size)?;
    if let Some(l) = pattern {
        if l >= counts.n_patterns() {
            return Err(HdhpError::domain(format!("pattern {l} does not exist")));
        }
    }
    Ok(content_marginal_unchecked(counts, pattern, query, eta0))
}

fn content_marginal_unchecked(
    counts: &PatternWordCounts,
    pattern: Option<PatternId>,
    query: &[usize],
    eta0: f64,
) -> f64 {
    let (row, total) = match pattern {
        Some(l) => (Some(&counts.counts[l]), counts.totals[l] as f64),
        None => (None, 0.0),
    };
    let denom0 = total + eta0 * counts.vocab_size as f64;
    let mut p = 1.0;
    for (j, &w) in query.iter().enumerate() {
        let repeats = query[..j].iter().filter(|&&x| x == w).count() as f64;
        let c = row.map_or(0.0, |r| r[w] as f64);
        p *= (c + eta0 + repeats) / (denom0 + j as f64);
    }
    p
}

/// Kernel-strength state of one pattern inside a particle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaState {
    /// Current value used by the time model.
    pub value: f64,
    /// Events that joined an existing task of this pattern.
    pub follow_ups: u64,
    /// All events of this pattern.
    pub events: u64,
    /// `Σ_i exp(-ν (t_ref - t_i))` over the pattern's events, where `t_ref`
    /// is the particle's last processed time.
    pub excitation: f64,
}

impl AlphaState {
    /// `(F, D)`: follow-up count and `Σ_i (1 - e^{-ν(now - t_i)})/ν`.
    fn sufficient_stats(&self, excitation_now: f64, nu: f64) -> (f64, f64) {
        (self.follow_ups as f64, (self.events as f64 - excitation_now) / nu)
    }
}

/// Assignment of one event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub task: TaskId,
    pub pattern: PatternId,
}

struct HistoryNode {
    assignment: Assignment,
    prev: Option<Arc<HistoryNode>>,
}

/// Persistent list of assignments; clones share their common prefix.
#[derive(Clone, Default)]
struct History {
    head: Option<Arc<HistoryNode>>,
    len: usize,
}

impl History {
    fn push(&mut self, assignment: Assignment) {
        let prev = self.head.take();
        self.head = Some(Arc::new(HistoryNode { assignment, prev }));
        self.len += 1;
    }

    fn to_vec(&self) -> Vec<Assignment> {
        let mut out = Vec::with_capacity(self.len);
        let mut cur = self.head.as_deref();
        while let Some(node) = cur {
            out.push(node.assignment);
            cur = node.prev.as_deref();
        }
        out.reverse();
        out
    }
}

impl Drop for History {
    fn drop(&mut self) {
        // unlink iteratively; the default recursive drop overflows on long streams
        let mut cur = self.head.take();
        while let Some(node) = cur {
            match Arc::try_unwrap(node) {
                Ok(mut node) => cur = node.prev.take(),
                Err(_) => break,
            }
        }
    }
}

/// One weighted hypothesis.
#[derive(Clone)]
pub struct Particle {
    /// Active tasks of every user.
    users: Vec<Arc<Vec<TaskState>>>,
    mus: Vec<f64>,
    observed: Vec<bool>,
    tasks_started: Vec<u64>,
    /// `m_ℓ`.
    pattern_tasks: Vec<u64>,
    /// `K`.
    total_tasks: u64,
    words: PatternWordCounts,
    alphas: Vec<AlphaState>,
    /// Time at which `AlphaState::excitation` and the weights are current.
    last_time: f64,
    history: History,
    pub log_weight: f64,
    /// Sum of log-increments along the particle's ancestry.
    pub log_path: f64,
}

impl std::fmt::Debug for Particle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Particle")
            .field("events", &self.history.len)
            .field("tasks", &self.total_tasks)
            .field("patterns", &self.pattern_tasks.len())
            .field("log_weight", &self.log_weight)
            .finish()
    }
}

impl Particle {
    pub fn new(n_users: usize, h: &Hyperparams) -> Self {
        Self {
            users: (0..n_users).map(|_| Arc::new(Vec::new())).collect(),
            mus: vec![h.mu_init; n_users],
            observed: vec![false; n_users],
            tasks_started: vec![0; n_users],
            pattern_tasks: Vec::new(),
            total_tasks: 0,
            words: PatternWordCounts::new(h.vocab.len()),
            alphas: Vec::new(),
            last_time: h.start_time,
            history: History::default(),
            log_weight: 0.0,
            log_path: 0.0,
        }
    }

    pub fn n_patterns(&self) -> usize {
        self.pattern_tasks.len()
    }

    pub fn total_tasks(&self) -> u64 {
        self.total_tasks
    }

    pub fn pattern_tasks(&self) -> &[u64] {
        &self.pattern_tasks
    }

    pub fn word_counts(&self) -> &PatternWordCounts {
        &self.words
    }

    pub fn alpha_states(&self) -> &[AlphaState] {
        &self.alphas
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.alphas.iter().map(|a| a.value).collect()
    }

    pub fn mus(&self) -> &[f64] {
        &self.mus
    }

    pub fn user_tasks(&self, user: UserId) -> &[TaskState] {
        &self.users[user]
    }

    pub fn tasks_started(&self, user: UserId) -> u64 {
        self.tasks_started[user]
    }

    pub fn last_time(&self) -> f64 {
        self.last_time
    }

    pub fn assignments(&self) -> Vec<Assignment> {
        self.history.to_vec()
    }

    pub fn n_events(&self) -> usize {
        self.history.len
    }

    fn alpha(&self, pattern: PatternId) -> f64 {
        self.alphas[pattern].value
    }

    /// Forces the kernel strength of an existing pattern.
    pub fn set_alpha(&mut self, pattern: PatternId, alpha: f64) {
        self.alphas[pattern].value = alpha;
    }

    pub fn set_mu(&mut self, user: UserId, mu: f64) {
        self.mus[user] = mu;
    }

    /// `Σ_k α_{ℓ(k)} S_k(t)` over the active tasks of `user`.
    fn user_excitation(&self, user: UserId, t: f64, nu: f64) -> f64 {
        self.users[user]
            .iter()
            .map(|task| self.alpha(task.pattern) * task.excitation_sum * (-nu * (t - task.last_time)).exp())
            .sum()
    }
}

/// An atom of the proposal over the task of the next event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalAtom {
    /// Index into the user's active tasks.
    Task(usize),
    NewTask(PatternId),
    NewTaskNewPattern,
}

#[derive(Debug, Clone)]
pub struct Proposal {
    /// Unnormalised masses: task prior times content predictive.
    pub atoms: Vec<(ProposalAtom, f64)>,
    /// Sum of the masses, `Q_n`.
    pub normalizer: f64,
}

impl Proposal {
    pub fn probability(&self, atom: ProposalAtom) -> f64 {
        self.atoms
            .iter()
            .find(|(a, _)| *a == atom)
            .map_or(0.0, |(_, m)| m / self.normalizer)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ProposalAtom {
        let mut pick = rng.random::<f64>() * self.normalizer;
        for (atom, mass) in &self.atoms {
            if pick < *mass {
                return *atom;
            }
            pick -= mass;
        }
        self.atoms
            .iter()
            .rev()
            .find(|(_, m)| *m > 0.0)
            .map_or(ProposalAtom::NewTaskNewPattern, |(a, _)| *a)
    }
}

fn check_event(p: &Particle, event: &Event) -> Result<()> {
    if event.user >= p.users.len() {
        return Err(HdhpError::domain(format!("user {} out of range", event.user)));
    }
    if event.time < p.last_time {
        return Err(HdhpError::domain(format!(
            "event at {} precedes the last processed time {}",
            event.time, p.last_time
        )));
    }
    check_words(&event.words, p.words.vocab_size)
}

/// Posterior over the task of `event` given the particle's past assignments.
pub fn proposal(p: &Particle, event: &Event, h: &Hyperparams) -> Result<Proposal> {
    check_event(p, event)?;
    let nu = h.nu;
    let t = event.time;
    let tasks = &p.users[event.user];

    let pattern_marginals: Vec<f64> = (0..p.n_patterns())
        .map(|l| content_marginal_unchecked(&p.words, Some(l), &event.words, h.eta0))
        .collect();
    let new_marginal = content_marginal_unchecked(&p.words, None, &event.words, h.eta0);

    let rates: Vec<f64> = tasks
        .iter()
        .map(|task| p.alpha(task.pattern) * task.excitation_sum * (-nu * (t - task.last_time)).exp())
        .collect();
    let mu = p.mus[event.user];
    let total = mu + rates.iter().sum::<f64>();

    let mut atoms = Vec::with_capacity(tasks.len() + p.n_patterns() + 1);
    for (i, (task, rate)) in tasks.iter().zip(&rates).enumerate() {
        atoms.push((ProposalAtom::Task(i), rate / total * pattern_marginals[task.pattern]));
    }
    let new_task = mu / total;
    let crp_denom = p.total_tasks as f64 + h.beta;
    for (l, &m) in p.pattern_tasks.iter().enumerate() {
        atoms.push((
            ProposalAtom::NewTask(l),
            new_task * m as f64 / crp_denom * pattern_marginals[l],
        ));
    }
    atoms.push((
        ProposalAtom::NewTaskNewPattern,
        new_task * h.beta / crp_denom * new_marginal,
    ));
    let normalizer = atoms.iter().map(|(_, m)| m).sum();
    Ok(Proposal { atoms, normalizer })
}

/// `log λ_u(t_n) − Σ_u ∫_{t_prev}^{t_n} λ_u(τ) dτ` under the particle's current
/// kernel strengths and base rates.
pub fn time_log_likelihood_increment(p: &Particle, event: &Event, t_prev: f64, h: &Hyperparams) -> Result<f64> {
    check_event(p, event)?;
    if t_prev < p.last_time || event.time < t_prev {
        return Err(HdhpError::domain(format!(
            "previous time {t_prev} must lie in [{}, {}]",
            p.last_time, event.time
        )));
    }
    let nu = h.nu;
    let to_prev = (-nu * (t_prev - p.last_time)).exp();
    let gap = event.time - t_prev;
    let weighted: f64 = p.alphas.iter().map(|a| a.value * a.excitation).sum::<f64>() * to_prev;
    let compensator = p.mus.iter().sum::<f64>() * gap + excitation_integral(weighted, nu, gap);
    let rate = p.mus[event.user] + p.user_excitation(event.user, event.time, nu);
    Ok(rate.ln() - compensator)
}

pub fn update_weight(p: &mut Particle, normalizer: f64, time_ll: f64) -> Result<()> {
    if !(normalizer > 0.0) {
        return Err(HdhpError::domain(format!("proposal normaliser must be > 0, got {normalizer}")));
    }
    let inc = normalizer.ln() + time_ll;
    p.log_weight += inc;
    p.log_path += inc;
    Ok(())
}

/// Normalises log-weights in place and returns `log Σ_p w_p` before
/// normalisation.
pub fn normalize_weights(particles: &mut [Particle]) -> f64 {
    let max = particles.iter().map(|p| p.log_weight).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let uniform = -(particles.len() as f64).ln();
        particles.iter_mut().for_each(|p| p.log_weight = uniform);
        return max;
    }
    let sum: f64 = particles.iter().map(|p| (p.log_weight - max).exp()).sum();
    let log_sum = max + sum.ln();
    particles.iter_mut().for_each(|p| p.log_weight -= log_sum);
    log_sum
}

/// `(F_ℓ, D_ℓ)` of the kernel-strength posterior at time `now`.
pub fn alpha_sufficient_stats(p: &Particle, pattern: PatternId, now: f64, nu: f64) -> (f64, f64) {
    let a = &p.alphas[pattern];
    let excitation = a.excitation * (-nu * (now - p.last_time).max(0.0)).exp();
    a.sufficient_stats(excitation, nu)
}

/// Redraws `α_ℓ ~ Gamma(τ₁ + F_ℓ, τ₂ + D_ℓ)`.
pub fn update_alpha<R: Rng + ?Sized>(
    p: &mut Particle,
    pattern: PatternId,
    now: f64,
    h: &Hyperparams,
    rng: &mut R,
) -> Result<()> {
    if pattern >= p.n_patterns() {
        return Err(HdhpError::domain(format!("pattern {pattern} does not exist")));
    }
    let (f, d) = alpha_sufficient_stats(p, pattern, now, h.nu);
    let gamma = Gamma::new(h.tau1 + f, 1.0 / (h.tau2 + d))
        .map_err(|e| HdhpError::domain(format!("alpha posterior: {e}")))?;
    p.alphas[pattern].value = gamma.sample(rng);
    Ok(())
}

/// Smoothed maximum-likelihood update of a user's base rate:
/// `μ ← r μ + (1 − r) · tasks_started / (now − start)`.
pub fn update_mu(p: &mut Particle, user: UserId, now: f64, h: &Hyperparams) -> Result<()> {
    let elapsed = now - h.start_time;
    if !(elapsed > 0.0) {
        return Err(HdhpError::domain(format!(
            "time {now} must be after the stream start {}",
            h.start_time
        )));
    }
    let mle = p.tasks_started[user] as f64 / elapsed;
    let r = h.mu_smoothing;
    p.mus[user] = r * p.mus[user] + (1.0 - r) * mle;
    Ok(())
}

pub fn effective_sample_size(particles: &[Particle]) -> f64 {
    1.0 / particles.iter().map(|p| (2.0 * p.log_weight).exp()).sum::<f64>()
}

/// Systematic offspring indices for normalised `weights`.
pub fn systematic_indices<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let step = 1.0 / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for _ in 0..n {
        while u > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
        u += step;
    }
    out
}

/// Resamples in place when the ESS of the normalised weights is below
/// `ess_fraction · |particles|`. Returns whether resampling happened.
pub fn resample<R: Rng + ?Sized>(particles: &mut Vec<Particle>, ess_fraction: f64, rng: &mut R) -> bool {
    let n = particles.len();
    if effective_sample_size(particles) >= ess_fraction * n as f64 {
        return false;
    }
    let weights: Vec<f64> = particles.iter().map(|p| p.log_weight.exp()).collect();
    let picks = systematic_indices(&weights, rng);
    let uniform = -(n as f64).ln();
    let mut next: Vec<Particle> = picks.iter().map(|&i| particles[i].clone()).collect();
    next.iter_mut().for_each(|p| p.log_weight = uniform);
    *particles = next;
    true
}

/// What one particle did with one event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub atom: ProposalAtom,
    pub assignment: Assignment,
    pub log_normalizer: f64,
    pub time_ll: f64,
}

/// Advances one particle by one event: parameter refresh, proposal draw,
/// state update, weight update and kernel-strength redraw.
pub fn advance<R: Rng + ?Sized>(p: &mut Particle, event: &Event, h: &Hyperparams, rng: &mut R) -> Result<StepOutcome> {
    advance_inner(p, event, h, rng, None)
}

/// Like [`advance`] but takes the given atom instead of sampling one. The atom
/// must carry positive proposal mass.
pub fn advance_with<R: Rng + ?Sized>(
    p: &mut Particle,
    event: &Event,
    h: &Hyperparams,
    atom: ProposalAtom,
    rng: &mut R,
) -> Result<StepOutcome> {
    advance_inner(p, event, h, rng, Some(atom))
}

fn advance_inner<R: Rng + ?Sized>(
    p: &mut Particle,
    event: &Event,
    h: &Hyperparams,
    rng: &mut R,
    forced: Option<ProposalAtom>,
) -> Result<StepOutcome> {
    check_event(p, event)?;
    let now = event.time;
    let nu = h.nu;

    if !h.freeze_params {
        if now > h.start_time {
            for u in 0..p.users.len() {
                if p.observed[u] {
                    update_mu(p, u, now, h)?;
                }
            }
        }
        if h.alpha_refresh == AlphaRefresh::All {
            for l in 0..p.n_patterns() {
                update_alpha(p, l, now, h, rng)?;
            }
        }
    }

    let t_prev = p.last_time;
    let time_ll = time_log_likelihood_increment(p, event, t_prev, h)?;
    let prop = proposal(p, event, h)?;
    let atom = match forced {
        Some(atom) if prop.probability(atom) > 0.0 => atom,
        Some(atom) => return Err(HdhpError::domain(format!("{atom:?} has no proposal mass"))),
        None => prop.sample(rng),
    };
    update_weight(p, prop.normalizer, time_ll)?;

    let decay = (-nu * (now - t_prev)).exp();
    p.alphas.iter_mut().for_each(|a| a.excitation *= decay);
    p.last_time = now;

    let user = event.user;
    let (task_id, pattern, follow_up) = match atom {
        ProposalAtom::Task(i) => {
            let tasks = Arc::make_mut(&mut p.users[user]);
            tasks[i].record(now, nu)?;
            (tasks[i].id, tasks[i].pattern, true)
        }
        ProposalAtom::NewTask(_) | ProposalAtom::NewTaskNewPattern => {
            let pattern = match atom {
                ProposalAtom::NewTask(l) => l,
                _ => {
                    let l = p.words.add_pattern();
                    p.pattern_tasks.push(0);
                    let value = if h.freeze_params || h.alpha_refresh == AlphaRefresh::Touched {
                        h.alpha_prior_mean()
                    } else {
                        Gamma::new(h.tau1, 1.0 / h.tau2)
                            .map_err(|e| HdhpError::domain(format!("alpha prior: {e}")))?
                            .sample(rng)
                    };
                    p.alphas.push(AlphaState {
                        value,
                        follow_ups: 0,
                        events: 0,
                        excitation: 0.0,
                    });
                    l
                }
            };
            let id = p.total_tasks as TaskId;
            p.total_tasks += 1;
            p.pattern_tasks[pattern] += 1;
            p.tasks_started[user] += 1;
            Arc::make_mut(&mut p.users[user]).push(TaskState::new(id, user, pattern, now));
            (id, pattern, false)
        }
    };
    p.observed[user] = true;
    p.words.add_words(pattern, &event.words);
    let a = &mut p.alphas[pattern];
    a.events += 1;
    a.excitation += 1.0;
    if follow_up {
        a.follow_ups += 1;
    }
    if h.prune_below > 0.0 {
        let limit = h.prune_below;
        let tasks = &p.users[user];
        if tasks
            .iter()
            .any(|task| task.excitation_sum * (-nu * (now - task.last_time)).exp() < limit)
        {
            Arc::make_mut(&mut p.users[user])
                .retain(|task| task.excitation_sum * (-nu * (now - task.last_time)).exp() >= limit);
        }
    }
    if !h.freeze_params && h.alpha_refresh == AlphaRefresh::Touched {
        update_alpha(p, pattern, now, h, rng)?;
    }

    let assignment = Assignment { task: task_id, pattern };
    p.history.push(assignment);
    Ok(StepOutcome {
        atom,
        assignment,
        log_normalizer: prop.normalizer.ln(),
        time_ll,
    })
}

/// Summary of one filtering step over the whole population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// `log p̂(event | past)`.
    pub log_evidence_increment: f64,
    pub ess: f64,
    pub resampled: bool,
}

/// Particle population driven one event at a time.
pub struct Smc {
    hyper: Hyperparams,
    users: Vec<String>,
    particles: Vec<Particle>,
    rngs: Vec<ChaCha8Rng>,
    resample_rng: ChaCha8Rng,
    pool: Option<rayon::ThreadPool>,
    log_evidence: Vec<f64>,
    event_times: Vec<f64>,
    event_users: Vec<UserId>,
    resamples: usize,
}

impl Smc {
    /// `threads = None` uses the global rayon pool; results do not depend on
    /// the number of threads.
    pub fn new(users: Vec<String>, hyper: Hyperparams, threads: Option<usize>) -> Result<Self> {
        hyper.validate()?;
        if users.is_empty() {
            return Err(HdhpError::Config("no users".into()));
        }
        let n = hyper.particles;
        let uniform = -(n as f64).ln();
        let particles = (0..n)
            .map(|_| {
                let mut p = Particle::new(users.len(), &hyper);
                p.log_weight = uniform;
                p
            })
            .collect();
        let rngs = (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
                rng.set_stream(i as u64 + 1);
                rng
            })
            .collect();
        let resample_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let pool = threads
            .map(|t| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(t.max(1))
                    .build()
                    .map_err(|e| HdhpError::Config(format!("thread pool: {e}")))
            })
            .transpose()?;
        Ok(Self {
            hyper,
            users,
            particles,
            rngs,
            resample_rng,
            pool,
            log_evidence: Vec::new(),
            event_times: Vec::new(),
            event_users: Vec::new(),
            resamples: 0,
        })
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn step(&mut self, event: &Event) -> Result<StepReport> {
        let h = &self.hyper;
        let particles = &mut self.particles;
        let rngs = &mut self.rngs;
        let mut run = || -> Result<()> {
            particles
                .par_iter_mut()
                .zip(rngs.par_iter_mut())
                .try_for_each(|(p, rng)| advance(p, event, h, rng).map(|_| ()))
        };
        match &self.pool {
            Some(pool) => pool.install(run)?,
            None => run()?,
        }
        let inc = normalize_weights(&mut self.particles);
        if !inc.is_finite() {
            return Err(HdhpError::domain(format!(
                "every particle assigns zero probability to the event at {}",
                event.time
            )));
        }
        let ess = effective_sample_size(&self.particles);
        let resampled = resample(&mut self.particles, self.hyper.ess_fraction, &mut self.resample_rng);
        if resampled {
            self.resamples += 1;
        }
        let cumulative = self.log_evidence.last().copied().unwrap_or(0.0) + inc;
        self.log_evidence.push(cumulative);
        self.event_times.push(event.time);
        self.event_users.push(event.user);
        Ok(StepReport {
            log_evidence_increment: inc,
            ess,
            resampled,
        })
    }

    /// Index of the particle chosen by `rule`.
    pub fn select(&self, rule: Selection) -> usize {
        let key = |p: &Particle| match rule {
            Selection::MaxWeight => (p.log_weight, p.log_path),
            Selection::MaxPathLikelihood => (p.log_path, p.log_weight),
        };
        let mut best = 0;
        for (i, p) in self.particles.iter().enumerate().skip(1) {
            if key(p) > key(&self.particles[best]) {
                best = i;
            }
        }
        best
    }

    pub fn finish(self) -> InferenceResult {
        let selected = self.select(self.hyper.selection);
        let max_path = self.select(Selection::MaxPathLikelihood);
        let p = &self.particles[selected];
        let h = &self.hyper;
        let now = p.last_time;
        let patterns = (0..p.n_patterns())
            .map(|l| {
                let a = &p.alphas[l];
                let (f, d) = alpha_sufficient_stats(p, l, now, h.nu);
                let counts = p.words.counts(l);
                PatternEstimate {
                    alpha: if h.freeze_params { a.value } else { (h.tau1 + f) / (h.tau2 + d) },
                    alpha_draw: a.value,
                    tasks: p.pattern_tasks[l],
                    follow_ups: a.follow_ups,
                    events: a.events,
                    excitation: a.excitation,
                    word_total: p.words.total(l),
                    word_counts: counts
                        .iter()
                        .enumerate()
                        .filter(|(_, &c)| c > 0)
                        .map(|(w, &c)| (w, c))
                        .collect(),
                }
            })
            .collect();
        let user_states = (0..self.users.len())
            .map(|u| UserEstimate {
                mu: p.mus[u],
                tasks_started: p.tasks_started[u],
                tasks: p.users[u].as_ref().clone(),
            })
            .collect();
        InferenceResult {
            hyperparams: self.hyper.clone(),
            users: self.users.clone(),
            assignments: p.assignments(),
            patterns,
            user_states,
            total_tasks: p.total_tasks,
            end_time: now,
            selected_particle: selected,
            max_path_particle: max_path,
            log_weight: p.log_weight,
            log_path: p.log_path,
            log_evidence: self.log_evidence,
            event_times: self.event_times,
            event_users: self.event_users,
            resamples: self.resamples,
        }
    }
}

/// Per-pattern estimates of the reported particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternEstimate {
    /// Posterior mean of the kernel strength.
    pub alpha: f64,
    /// Last posterior draw.
    pub alpha_draw: f64,
    /// `m_ℓ`.
    pub tasks: u64,
    pub follow_ups: u64,
    pub events: u64,
    /// Aggregate excitation of the pattern's events at `end_time`.
    pub excitation: f64,
    pub word_total: u64,
    /// Sparse `(word index, count)` pairs.
    pub word_counts: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEstimate {
    pub mu: f64,
    pub tasks_started: u64,
    /// Tasks still active at `end_time`.
    pub tasks: Vec<TaskState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub hyperparams: Hyperparams,
    pub users: Vec<String>,
    /// Task and pattern of every training event, in stream order.
    pub assignments: Vec<Assignment>,
    pub patterns: Vec<PatternEstimate>,
    pub user_states: Vec<UserEstimate>,
    pub total_tasks: u64,
    pub end_time: f64,
    pub selected_particle: usize,
    pub max_path_particle: usize,
    pub log_weight: f64,
    pub log_path: f64,
    /// Cumulative `log p̂(events_{1:n})` after every event.
    pub log_evidence: Vec<f64>,
    /// Time and user of every training event.
    pub event_times: Vec<f64>,
    pub event_users: Vec<UserId>,
    pub resamples: usize,
}

impl InferenceResult {
    pub fn vocab(&self) -> &[String] {
        &self.hyperparams.vocab
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.patterns.iter().map(|p| p.alpha).collect()
    }

    pub fn mus(&self) -> Vec<f64> {
        self.user_states.iter().map(|u| u.mu).collect()
    }

    /// Training events without their words.
    pub fn training_events(&self) -> Vec<Event> {
        self.event_times
            .iter()
            .zip(&self.event_users)
            .map(|(&time, &user)| Event {
                time,
                user,
                words: Vec::new(),
                true_pattern: None,
                true_task: None,
            })
            .collect()
    }

    /// Pattern label of every training event.
    pub fn pattern_labels(&self) -> Vec<PatternId> {
        self.assignments.iter().map(|a| a.pattern).collect()
    }

    /// Posterior-mean word distribution of a pattern.
    pub fn theta(&self, pattern: PatternId) -> Vec<f64> {
        let v = self.hyperparams.vocab.len();
        let eta0 = self.hyperparams.eta0;
        let p = &self.patterns[pattern];
        let denom = p.word_total as f64 + eta0 * v as f64;
        let mut theta = vec![eta0 / denom; v];
        for &(w, c) in &p.word_counts {
            theta[w] = (c as f64 + eta0) / denom;
        }
        theta
    }

    pub fn word_counts(&self) -> Result<PatternWordCounts> {
        let v = self.hyperparams.vocab.len();
        let dense = self
            .patterns
            .iter()
            .map(|p| {
                let mut row = vec![0u32; v];
                for &(w, c) in &p.word_counts {
                    if w >= v {
                        return Err(HdhpError::domain(format!("word index {w} outside vocabulary")));
                    }
                    row[w] = c;
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        PatternWordCounts::from_dense(v, dense)
    }
}

fn check_stream(events: &[Event], start: f64) -> Result<()> {
    if events.is_empty() {
        return Err(HdhpError::EmptyStream);
    }
    if events[0].time < start {
        return Err(HdhpError::domain(format!(
            "first event at {} precedes the stream start {start}",
            events[0].time
        )));
    }
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

/// Runs the particle filter over a time-sorted stream.
pub fn fit(events: &[Event], users: &[String], h: &Hyperparams, threads: Option<usize>) -> Result<InferenceResult> {
    check_stream(events, h.start_time)?;
    let mut smc = Smc::new(users.to_vec(), h.clone(), threads)?;
    for event in events {
        smc.step(event)?;
    }
    Ok(smc.finish())
}
