//! Clustering recovery, held-out prediction, temporal goodness of fit and the
//! per-pattern / per-user summaries of a fitted model.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{HdhpError, Result};
use crate::generative::Event;
use crate::point_process::{expected_count, excitation_integral, KernelParams, PatternId, TaskState, UserId};
use crate::smc::{content_marginal, Assignment, InferenceResult, PatternWordCounts};

/// 5% critical value of the Anderson-Darling statistic for a fully specified
/// continuous null distribution.
pub const AD_CRITICAL_5PCT: f64 = 2.492;

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalised mutual information `I(A;B)/√(H(A)H(B))`.
///
/// If both labelings are constant the score is 1; if exactly one is, 0.
pub fn nmi(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.is_empty() {
        return Err(HdhpError::domain("cannot score empty labelings"));
    }
    if labels_a.len() != labels_b.len() {
        return Err(HdhpError::domain(format!(
            "labelings differ in length: {} vs {}",
            labels_a.len(),
            labels_b.len()
        )));
    }
    let n = labels_a.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        *joint.entry((a, b)).or_default() += 1;
        *ca.entry(a).or_default() += 1;
        *cb.entry(b).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(a, b), &c)| {
            let pab = c as f64 / n;
            pab * (pab * n * n / (ca[&a] as f64 * cb[&b] as f64)).ln()
        })
        .sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// `m[i][j]` = number of items with inferred label `i` and true label `j`.
pub fn confusion_matrix(inferred: &[usize], truth: &[usize]) -> Vec<Vec<u64>> {
    let rows = inferred.iter().max().map_or(0, |m| m + 1);
    let cols = truth.iter().max().map_or(0, |m| m + 1);
    let mut m = vec![vec![0u64; cols]; rows];
    for (&i, &j) in inferred.iter().zip(truth) {
        m[i][j] += 1;
    }
    m
}

/// Optimal one-to-one matching of inferred (rows) to true (columns) labels,
/// maximising the total matched mass. Rows left without a column, or matched
/// only to zero mass, map to `None`.
pub fn match_patterns(confusion: &[Vec<u64>]) -> Vec<Option<usize>> {
    let rows = confusion.len();
    let cols = confusion.iter().map(|r| r.len()).max().unwrap_or(0);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    let max = confusion.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost = |i: usize, j: usize| -> i64 {
        let v = confusion.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0) as i64;
        max - v
    };
    let col_of_row = hungarian_min(n, cost);
    (0..rows)
        .map(|i| {
            let j = col_of_row[i];
            (j < cols && confusion[i].get(j).copied().unwrap_or(0) > 0).then_some(j)
        })
        .collect()
}

/// Minimum-cost perfect assignment on an `n × n` matrix (shortest augmenting
/// paths with potentials, O(n³)). Returns the column of every row.
fn hungarian_min(n: usize, cost: impl Fn(usize, usize) -> i64) -> Vec<usize> {
    const INF: i64 = i64::MAX / 4;
    // 1-based with a virtual column 0
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        if row_of_col[j] > 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// `Σ_ℓ λ_ℓ p_ℓ / Σ_ℓ λ_ℓ`.
pub fn mix_predictive(intensities: &[f64], likelihoods: &[f64]) -> f64 {
    let total: f64 = intensities.iter().sum();
    intensities.iter().zip(likelihoods).map(|(l, p)| l * p).sum::<f64>() / total
}

/// A fitted model with live user intensities, used to score held-out events.
///
/// Word counts and parameters stay at their training values; only the task
/// excitations move forward as held-out events are observed.
#[derive(Debug, Clone)]
pub struct Predictor {
    eta0: f64,
    nu: f64,
    alphas: Vec<f64>,
    mus: Vec<f64>,
    popularity: Vec<f64>,
    counts: PatternWordCounts,
    tasks: Vec<Vec<TaskState>>,
    next_task: usize,
    user_index: HashMap<String, UserId>,
    vocab_index: HashMap<String, usize>,
    users: Vec<String>,
}

impl Predictor {
    pub fn new(model: &InferenceResult) -> Result<Self> {
        let k = model.total_tasks.max(1) as f64;
        Ok(Self {
            eta0: model.hyperparams.eta0,
            nu: model.hyperparams.nu,
            alphas: model.alphas(),
            mus: model.mus(),
            popularity: model.patterns.iter().map(|p| p.tasks as f64 / k).collect(),
            counts: model.word_counts()?,
            tasks: model.user_states.iter().map(|u| u.tasks.clone()).collect(),
            next_task: model.total_tasks as usize,
            user_index: model.users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect(),
            vocab_index: model.vocab().iter().enumerate().map(|(i, w)| (w.clone(), i)).collect(),
            users: model.users.clone(),
        })
    }

    pub fn n_patterns(&self) -> usize {
        self.alphas.len()
    }

    pub fn user_id(&self, name: &str) -> Result<UserId> {
        self.user_index
            .get(name)
            .copied()
            .ok_or_else(|| HdhpError::UnknownUser(name.to_string()))
    }

    pub fn user_name(&self, user: UserId) -> &str {
        &self.users[user]
    }

    pub fn word_id(&self, word: &str) -> Result<usize> {
        self.vocab_index
            .get(word)
            .copied()
            .ok_or_else(|| HdhpError::UnknownWord(word.to_string()))
    }

    fn check_user(&self, user: UserId) -> Result<()> {
        if user < self.mus.len() {
            Ok(())
        } else {
            Err(HdhpError::UnknownUser(format!("#{user}")))
        }
    }

    fn task_rate(&self, task: &TaskState, t: f64) -> Result<f64> {
        Ok(self.alphas[task.pattern] * task.excitation_at(t, self.nu)?)
    }

    /// `λ_{u,ℓ}(t) = μ_u π̂_ℓ + Σ_{k ∈ ℓ} α_ℓ S_k(t)` for every pattern.
    pub fn pattern_intensities(&self, user: UserId, t: f64) -> Result<Vec<f64>> {
        self.check_user(user)?;
        let mu = self.mus[user];
        let mut rates: Vec<f64> = self.popularity.iter().map(|p| mu * p).collect();
        for task in &self.tasks[user] {
            rates[task.pattern] += self.task_rate(task, t)?;
        }
        Ok(rates)
    }

    /// Normalised pattern intensities of `user` at `t`.
    pub fn mixture_weights(&self, user: UserId, t: f64) -> Result<Vec<f64>> {
        let rates = self.pattern_intensities(user, t)?;
        let total: f64 = rates.iter().sum();
        Ok(rates.iter().map(|r| r / total).collect())
    }

    /// `∫_from^to λ_u(τ) dτ`, valid while the user has no events in between.
    pub fn compensator(&self, user: UserId, from: f64, to: f64) -> Result<f64> {
        self.check_user(user)?;
        let mut weighted = 0.0;
        for task in &self.tasks[user] {
            weighted += self.task_rate(task, from)?;
        }
        Ok(self.mus[user] * (to - from) + excitation_integral(weighted, self.nu, to - from))
    }

    /// Moves the user's state past `event`, attaching it to the most probable
    /// existing task or new task of an existing pattern.
    pub fn observe(&mut self, event: &Event) -> Result<Assignment> {
        self.check_user(event.user)?;
        let marginals: Vec<f64> = (0..self.n_patterns())
            .map(|l| content_marginal(&self.counts, Some(l), &event.words, self.eta0))
            .collect::<Result<_>>()?;
        let mut best: Option<(f64, Option<usize>, PatternId)> = None;
        for (i, task) in self.tasks[event.user].iter().enumerate() {
            let score = self.task_rate(task, event.time)? * marginals[task.pattern];
            if best.is_none_or(|b| score > b.0) {
                best = Some((score, Some(i), task.pattern));
            }
        }
        let mu = self.mus[event.user];
        for (l, p) in self.popularity.iter().enumerate() {
            let score = mu * p * marginals[l];
            if best.is_none_or(|b| score > b.0) {
                best = Some((score, None, l));
            }
        }
        let (_, slot, pattern) = best.ok_or_else(|| HdhpError::domain("model has no patterns"))?;
        let nu = self.nu;
        let tasks = &mut self.tasks[event.user];
        let task = match slot {
            Some(i) => {
                tasks[i].record(event.time, nu)?;
                tasks[i].id
            }
            None => {
                let id = self.next_task;
                self.next_task += 1;
                tasks.push(TaskState::new(id, event.user, pattern, event.time));
                id
            }
        };
        Ok(Assignment { task, pattern })
    }
}

/// `log p(ω | train, u, t) = log Σ_ℓ p(ω | ℓ) λ_{u,ℓ}(t) / Σ_ℓ λ_{u,ℓ}(t)`.
pub fn heldout_query_loglik(model: &Predictor, event: &Event) -> Result<f64> {
    let intensities = model.pattern_intensities(event.user, event.time)?;
    let likelihoods: Vec<f64> = (0..model.n_patterns())
        .map(|l| content_marginal(&model.counts, Some(l), &event.words, model.eta0))
        .collect::<Result<_>>()?;
    Ok(mix_predictive(&intensities, &likelihoods).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub value: f64,
    pub events: usize,
    /// Set when some event had zero predictive probability.
    pub diagnostic: Option<String>,
}

/// `exp(−Σ log p_i / n)` over per-event held-out log-likelihoods.
pub fn perplexity(logliks: &[f64]) -> Result<Perplexity> {
    if logliks.is_empty() {
        return Err(HdhpError::domain("perplexity needs at least one test event"));
    }
    let bad = logliks.iter().filter(|l| l.is_infinite() && l.is_sign_negative()).count();
    let mean = logliks.iter().sum::<f64>() / logliks.len() as f64;
    Ok(Perplexity {
        value: (-mean).exp(),
        events: logliks.len(),
        diagnostic: (bad > 0).then(|| format!("{bad} event(s) had zero predictive probability")),
    })
}

/// One-sample Kolmogorov-Smirnov statistic against Exp(1).
pub fn ks_statistic_exp1(sample: &[f64]) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = -(-x.max(0.0)).exp_m1();
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov survival function `Q(λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}`.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic p-value of a KS statistic `d` on `n` points, with Stephens'
/// small-sample correction of the scaling.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d)
}

/// Anderson-Darling statistic against Exp(1).
pub fn ad_statistic_exp1(sample: &[f64]) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let s: f64 = (0..n)
        .map(|i| {
            let log_cdf = (-(-xs[i].max(0.0)).exp_m1()).ln();
            let log_sf = -xs[n - 1 - i].max(0.0);
            (2 * i + 1) as f64 * (log_cdf + log_sf)
        })
        .sum();
    -(n as f64) - s / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserGof {
    pub user: String,
    pub gaps: usize,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
    pub ad_statistic: f64,
    pub ks_reject: bool,
    pub ad_reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    pub users: Vec<UserGof>,
    /// Users with fewer than two events in the window.
    pub skipped: Vec<String>,
    pub ks_reject_fraction: f64,
    pub ad_reject_fraction: f64,
}

/// KS and AD tests of every user's rescaled gaps against Exp(1) at 5%.
pub fn gof_tests(gaps: &[(String, Vec<f64>)]) -> GofReport {
    let mut users = Vec::new();
    let mut skipped = Vec::new();
    for (user, g) in gaps {
        if g.is_empty() {
            skipped.push(user.clone());
            continue;
        }
        let ks = ks_statistic_exp1(g);
        let p = ks_pvalue(ks, g.len());
        let ad = ad_statistic_exp1(g);
        users.push(UserGof {
            user: user.clone(),
            gaps: g.len(),
            ks_statistic: ks,
            ks_pvalue: p,
            ad_statistic: ad,
            ks_reject: p < 0.05,
            ad_reject: !(ad <= AD_CRITICAL_5PCT),
        });
    }
    let n = users.len().max(1) as f64;
    let ks_reject_fraction = users.iter().filter(|u| u.ks_reject).count() as f64 / n;
    let ad_reject_fraction = users.iter().filter(|u| u.ad_reject).count() as f64 / n;
    GofReport {
        users,
        skipped,
        ks_reject_fraction,
        ad_reject_fraction,
    }
}

/// Scores of a held-out stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    /// Log-likelihood of every scored event, in stream order, with the index
    /// of the event in the input.
    pub logliks: Vec<(usize, f64)>,
    /// Events of users the model has never seen.
    pub unknown_user_events: usize,
    pub perplexity: Option<Perplexity>,
    pub gof: GofReport,
}

/// Scores `events` one by one: content log-likelihood before observing each
/// event, compensator increments between consecutive events of a user, then
/// the event is observed. `users` names the user ids of `events`.
pub fn evaluate_heldout(model: &InferenceResult, events: &[Event], users: &[String]) -> Result<HeldOut> {
    let mut predictor = Predictor::new(model)?;
    let mut logliks = Vec::new();
    let mut unknown = 0;
    let mut last_time: HashMap<UserId, f64> = HashMap::new();
    let mut gaps: Vec<(String, Vec<f64>)> = model.users.iter().map(|u| (u.clone(), Vec::new())).collect();
    let mut seen: HashSet<UserId> = HashSet::new();
    for (i, ev) in events.iter().enumerate() {
        let name = users
            .get(ev.user)
            .ok_or_else(|| HdhpError::domain(format!("event {i} has no user name")))?;
        let Ok(user) = predictor.user_id(name) else {
            unknown += 1;
            continue;
        };
        let ev = Event { user, ..ev.clone() };
        logliks.push((i, heldout_query_loglik(&predictor, &ev)?));
        if let Some(&prev) = last_time.get(&user) {
            gaps[user].1.push(predictor.compensator(user, prev, ev.time)?);
        }
        predictor.observe(&ev)?;
        last_time.insert(user, ev.time);
        seen.insert(user);
    }
    let gaps: Vec<_> = gaps
        .into_iter()
        .enumerate()
        .filter(|(u, _)| seen.contains(u))
        .map(|(_, g)| g)
        .collect();
    let values: Vec<f64> = logliks.iter().map(|(_, l)| *l).collect();
    Ok(HeldOut {
        perplexity: if values.is_empty() { None } else { Some(perplexity(&values)?) },
        logliks,
        unknown_user_events: unknown,
        gof: gof_tests(&gaps),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSummary {
    pub pattern: PatternId,
    /// `m_ℓ / K`.
    pub popularity: f64,
    /// Expected self-excited events in the first month after a task starts.
    pub burstiness: f64,
    pub alpha: f64,
    pub top_words: Vec<(String, f64)>,
}

/// Per-pattern popularity, burstiness and top words.
pub fn pattern_report(model: &InferenceResult, top_k: usize) -> Result<Vec<PatternSummary>> {
    let k = model.total_tasks.max(1) as f64;
    let nu = model.hyperparams.nu;
    model
        .patterns
        .iter()
        .enumerate()
        .map(|(l, p)| {
            let kernel = KernelParams::new(p.alpha, nu)?;
            let burstiness = (expected_count(1.0, &kernel, 1.0)? - 1.0).max(0.0);
            let theta = model.theta(l);
            let mut order: Vec<usize> = (0..theta.len()).collect();
            order.sort_by(|&a, &b| theta[b].total_cmp(&theta[a]).then(a.cmp(&b)));
            Ok(PatternSummary {
                pattern: l,
                popularity: p.tasks as f64 / k,
                burstiness,
                alpha: p.alpha,
                top_words: order
                    .into_iter()
                    .take(top_k)
                    .map(|w| (model.vocab()[w].clone(), theta[w]))
                    .collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSummary {
    pub user: String,
    pub mu: f64,
    pub tasks: usize,
    pub patterns_adopted: usize,
    /// Mean over the user's tasks of last minus first event time.
    pub mean_task_duration: f64,
}

/// Per-user base rate, number of distinct patterns and mean task duration,
/// from the training events the model was fitted on.
pub fn user_report(model: &InferenceResult, events: &[Event]) -> Result<Vec<UserSummary>> {
    if events.len() != model.assignments.len() {
        return Err(HdhpError::domain(format!(
            "model covers {} events but {} were given",
            model.assignments.len(),
            events.len()
        )));
    }
    let n_users = model.users.len();
    // per task: (user, pattern, first, last)
    let mut spans: HashMap<usize, (UserId, PatternId, f64, f64)> = HashMap::new();
    for (ev, a) in events.iter().zip(&model.assignments) {
        if ev.user >= n_users {
            return Err(HdhpError::domain(format!("event user {} outside the model", ev.user)));
        }
        spans
            .entry(a.task)
            .and_modify(|s| s.3 = ev.time)
            .or_insert((ev.user, a.pattern, ev.time, ev.time));
    }
    let mut per_user: Vec<(usize, HashSet<PatternId>, f64)> = vec![(0, HashSet::new(), 0.0); n_users];
    for (user, pattern, first, last) in spans.values() {
        let e = &mut per_user[*user];
        e.0 += 1;
        e.1.insert(*pattern);
        e.2 += last - first;
    }
    Ok(per_user
        .into_iter()
        .enumerate()
        .map(|(u, (tasks, patterns, total))| UserSummary {
            user: model.users[u].clone(),
            mu: model.user_states[u].mu,
            tasks,
            patterns_adopted: patterns.len(),
            mean_task_duration: if tasks == 0 { 0.0 } else { total / tasks as f64 },
        })
        .collect())
}
