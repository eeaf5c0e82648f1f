//! Independent oracles shared by the integration tests: adaptive quadrature,
//! brute-force intensities, exhaustive enumeration of assignment sequences
//! and brute-force recounts of particle state.
#![allow(dead_code)]

pub mod suites;

use hdhp::generative::{Event, Hyperparams};
use hdhp::point_process::{PatternId, UserId};
use hdhp::smc::{advance_with, proposal, Particle, ProposalAtom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

// ---------------------------------------------------------------- quadrature

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        left + right + diff / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}

/// Adaptive Simpson quadrature of a smooth integrand on `[a, b]`.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(&f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Quadrature of an integrand that is smooth between `breaks`.
pub fn integrate_piecewise<F: Fn(f64) -> f64>(f: F, breaks: &[f64], a: f64, b: f64, tol: f64) -> f64 {
    let mut points: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    points.sort_by(f64::total_cmp);
    let mut total = 0.0;
    let mut lo = a;
    for x in points.into_iter().chain(std::iter::once(b)) {
        // evaluate strictly inside each piece so jumps at `x` are excluded
        total += simpson(&f, lo, x, tol);
        lo = x;
    }
    total
}

/// `μ + Σ_{t_j < t} α_j e^{-ν(t - t_j)}` from the raw history.
pub fn brute_rate(mu: f64, history: &[(f64, f64)], nu: f64, t: f64) -> f64 {
    mu + history
        .iter()
        .filter(|(tj, _)| *tj < t)
        .map(|(tj, a)| a * (-nu * (t - tj)).exp())
        .sum::<f64>()
}

// ------------------------------------------------------------ random inputs

pub fn vocab(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

pub fn event(time: f64, user: UserId, words: Vec<usize>) -> Event {
    Event {
        time,
        user,
        words,
        true_pattern: None,
        true_task: None,
    }
}

/// A stream of at most `max_events` events over `n_users` users and a
/// vocabulary of `vocab_size` words.
pub fn random_stream<R: Rng>(rng: &mut R, max_events: usize, n_users: usize, vocab_size: usize, span: f64) -> Vec<Event> {
    let n = rng.random_range(1..=max_events);
    let mut times: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * span).collect();
    times.sort_by(f64::total_cmp);
    times
        .into_iter()
        .map(|t| {
            let words = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..vocab_size)).collect();
            event(t, rng.random_range(0..n_users), words)
        })
        .collect()
}

/// Hyperparameters with frozen kernel strengths and base rates, one particle
/// and no pruning: the setting in which the filter is exact.
pub fn exact_hyper<R: Rng>(rng: &mut R, vocab_size: usize) -> Hyperparams {
    let tau2 = rng.random_range(1.0..5.0);
    let alpha_mean = rng.random_range(0.5..6.0);
    Hyperparams {
        beta: rng.random_range(0.3..3.0),
        eta0: rng.random_range(0.2..2.0),
        tau1: alpha_mean * tau2,
        tau2,
        nu: rng.random_range(2.0..8.0),
        vocab: vocab(vocab_size),
        particles: 1,
        mu_init: rng.random_range(0.3..3.0),
        freeze_params: true,
        prune_below: 0.0,
        ..Hyperparams::default()
    }
}

// ------------------------------------------------------ enumeration oracle

/// Assignment state of one path, kept as raw lists.
#[derive(Clone, Debug, Default)]
pub struct OracleState {
    /// `(user, pattern, event times)` per task in creation order.
    pub tasks: Vec<(UserId, PatternId, Vec<f64>)>,
    /// Word counts per pattern.
    pub counts: Vec<Vec<u32>>,
    /// `Σ log` of the rate factors of the path so far.
    pub log_rates: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleChoice {
    /// Global task index.
    Task(usize),
    NewTask(PatternId),
    NewPattern,
}

impl OracleState {
    fn tasks_per_pattern(&self) -> Vec<u64> {
        let mut m = vec![0; self.counts.len()];
        for (_, l, _) in &self.tasks {
            m[*l] += 1;
        }
        m
    }

    /// Every choice for `ev` with its rate factor: the task's intensity for a
    /// follow-up, `μ` times the CRP probability for a new task.
    pub fn choices(&self, ev: &Event, h: &Hyperparams) -> Vec<(OracleChoice, f64)> {
        let alpha = h.tau1 / h.tau2;
        let mut out = Vec::new();
        for (k, (u, _, times)) in self.tasks.iter().enumerate() {
            if *u == ev.user {
                let rate: f64 = times.iter().map(|tj| alpha * (-h.nu * (ev.time - tj)).exp()).sum();
                out.push((OracleChoice::Task(k), rate));
            }
        }
        let k = self.tasks.len() as f64;
        for (l, m) in self.tasks_per_pattern().into_iter().enumerate() {
            out.push((OracleChoice::NewTask(l), h.mu_init * m as f64 / (k + h.beta)));
        }
        out.push((OracleChoice::NewPattern, h.mu_init * h.beta / (k + h.beta)));
        out
    }

    pub fn apply(&self, ev: &Event, choice: OracleChoice, rate: f64, vocab_size: usize) -> OracleState {
        let mut s = self.clone();
        let pattern = match choice {
            OracleChoice::Task(k) => {
                s.tasks[k].2.push(ev.time);
                s.tasks[k].1
            }
            OracleChoice::NewTask(l) => {
                s.tasks.push((ev.user, l, vec![ev.time]));
                l
            }
            OracleChoice::NewPattern => {
                s.counts.push(vec![0; vocab_size]);
                let l = s.counts.len() - 1;
                s.tasks.push((ev.user, l, vec![ev.time]));
                l
            }
        };
        for &w in &ev.words {
            s.counts[pattern][w] += 1;
        }
        s.log_rates += rate.ln();
        s
    }

    /// Closed-form Dirichlet-multinomial evidence of all words, per pattern.
    pub fn log_content(&self, eta0: f64) -> f64 {
        self.counts
            .iter()
            .map(|c| {
                let v = c.len() as f64;
                let total: u32 = c.iter().sum();
                ln_gamma(v * eta0) - ln_gamma(v * eta0 + total as f64)
                    + c.iter().map(|&n| ln_gamma(eta0 + n as f64) - ln_gamma(eta0)).sum::<f64>()
            })
            .sum()
    }

    /// Joint log density of the events processed so far and the path, up to
    /// time `now`.
    pub fn log_joint(&self, n_users: usize, now: f64, h: &Hyperparams) -> f64 {
        let alpha = h.tau1 / h.tau2;
        let mut compensator = n_users as f64 * h.mu_init * (now - h.start_time);
        for (_, _, times) in &self.tasks {
            for tj in times {
                compensator += alpha / h.nu * (1.0 - (-h.nu * (now - tj)).exp());
            }
        }
        self.log_rates + self.log_content(h.eta0) - compensator
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log p(events)` by summing the joint over every assignment sequence.
pub fn enumerate_marginal(events: &[Event], n_users: usize, h: &Hyperparams) -> f64 {
    fn go(s: &OracleState, events: &[Event], n: usize, n_users: usize, h: &Hyperparams, out: &mut Vec<f64>) {
        if n == events.len() {
            out.push(s.log_joint(n_users, events[n - 1].time, h));
            return;
        }
        for (choice, rate) in s.choices(&events[n], h) {
            if rate > 0.0 {
                let next = s.apply(&events[n], choice, rate, h.vocab.len());
                go(&next, events, n + 1, n_users, h, out);
            }
        }
    }
    let mut leaves = Vec::new();
    go(&OracleState::default(), events, 0, n_users, h, &mut leaves);
    log_sum_exp(&leaves)
}

/// `E_q[Π_n Q_n · p(t_n, u_n | ·)]` over the filter's own proposal, computed
/// exactly by walking every branch of the proposal tree of one particle.
pub fn proposal_tree_evidence(events: &[Event], n_users: usize, h: &Hyperparams) -> f64 {
    fn go(p: &Particle, events: &[Event], n: usize, h: &Hyperparams, rng: &mut ChaCha8Rng) -> f64 {
        if n == events.len() {
            return 0.0;
        }
        let prop = proposal(p, &events[n], h).expect("valid proposal");
        let mut terms = Vec::new();
        for (atom, mass) in &prop.atoms {
            if *mass > 0.0 {
                let mut child = p.clone();
                let out = advance_with(&mut child, &events[n], h, *atom, rng).expect("advance");
                let q = mass / prop.normalizer;
                terms.push(q.ln() + out.log_normalizer + out.time_ll + go(&child, events, n + 1, h, rng));
            }
        }
        log_sum_exp(&terms)
    }
    let p = Particle::new(n_users, h);
    go(&p, events, 0, h, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Walks every path of the particle and of the oracle in lockstep. At every
/// node checks that each proposal probability equals the exact one-step
/// conditional and that `log Q_n + time term` equals the exact one-step
/// predictive `log p(y_n | y_{<n}, b_{<n})`. Returns the largest deviation.
pub fn lockstep_max_error(events: &[Event], n_users: usize, h: &Hyperparams) -> f64 {
    fn to_atom(p: &Particle, s: &OracleState, ev: &Event, c: OracleChoice) -> ProposalAtom {
        match c {
            OracleChoice::Task(k) => {
                let id = k; // oracle and filter number tasks in creation order
                let idx = p
                    .user_tasks(ev.user)
                    .iter()
                    .position(|t| t.id == id)
                    .expect("task is active");
                debug_assert_eq!(s.tasks[k].0, ev.user);
                ProposalAtom::Task(idx)
            }
            OracleChoice::NewTask(l) => ProposalAtom::NewTask(l),
            OracleChoice::NewPattern => ProposalAtom::NewTaskNewPattern,
        }
    }
    fn go(
        p: &Particle,
        s: &OracleState,
        events: &[Event],
        n: usize,
        n_users: usize,
        h: &Hyperparams,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        if n == events.len() {
            return 0.0;
        }
        let ev = &events[n];
        let prev_joint = if n == 0 { 0.0 } else { s.log_joint(n_users, events[n - 1].time, h) };
        let prop = proposal(p, ev, h).expect("valid proposal");
        let mut children = Vec::new();
        for (c, rate) in s.choices(ev, h) {
            if rate > 0.0 {
                let next = s.apply(ev, c, rate, h.vocab.len());
                let j = next.log_joint(n_users, ev.time, h);
                children.push((c, next, j));
            }
        }
        let log_pred = log_sum_exp(&children.iter().map(|c| c.2).collect::<Vec<_>>());
        let mut worst: f64 = 0.0;
        let mut seen_mass = 0.0;
        for (c, next, j) in &children {
            let atom = to_atom(p, s, ev, *c);
            let exact = (j - log_pred).exp();
            let q = prop.probability(atom);
            seen_mass += q;
            worst = worst.max((q - exact).abs());
            let mut child = p.clone();
            let out = advance_with(&mut child, ev, h, atom, rng).expect("advance");
            let inc = out.log_normalizer + out.time_ll;
            worst = worst.max((inc - (log_pred - prev_joint)).abs());
            worst = worst.max(go(&child, next, events, n + 1, n_users, h, rng));
        }
        // the filter must not put mass on atoms the oracle does not know
        worst.max((seen_mass - 1.0).abs())
    }
    let p = Particle::new(n_users, h);
    go(&p, &OracleState::default(), events, 0, n_users, h, &mut ChaCha8Rng::seed_from_u64(0))
}

// --------------------------------------------------- particle recount checks

/// Compares every piece of incremental particle state with a recount from
/// the particle's own assignments of `events` (the events processed so far).
pub fn check_particle(p: &Particle, events: &[Event], h: &Hyperparams) -> Result<(), String> {
    let nu = h.nu;
    let assignments = p.assignments();
    if assignments.len() != events.len() {
        return Err(format!("{} assignments for {} events", assignments.len(), events.len()));
    }
    if !p.log_weight.is_finite() {
        return Err("non-finite log weight".into());
    }
    let now = p.last_time();
    let n_patterns = p.n_patterns();

    // tasks: user, pattern, event indices
    let mut tasks: std::collections::BTreeMap<usize, (UserId, PatternId, Vec<usize>)> = Default::default();
    for (i, (a, e)) in assignments.iter().zip(events).enumerate() {
        if a.pattern >= n_patterns {
            return Err(format!("event {i} has pattern {} of {n_patterns}", a.pattern));
        }
        let entry = tasks.entry(a.task).or_insert((e.user, a.pattern, Vec::new()));
        if entry.0 != e.user || entry.1 != a.pattern {
            return Err(format!("task {} mixes users or patterns", a.task));
        }
        entry.2.push(i);
    }
    if tasks.len() as u64 != p.total_tasks() {
        return Err(format!("{} tasks in history, K = {}", tasks.len(), p.total_tasks()));
    }
    let m_sum: u64 = p.pattern_tasks().iter().sum();
    if m_sum != p.total_tasks() {
        return Err(format!("Σ m_ℓ = {m_sum} but K = {}", p.total_tasks()));
    }
    let mut m = vec![0u64; n_patterns];
    for (_, l, _) in tasks.values() {
        m[*l] += 1;
    }
    if m != p.pattern_tasks() {
        return Err(format!("m_ℓ {:?} vs recount {m:?}", p.pattern_tasks()));
    }

    // words
    let wc = p.word_counts();
    let mut recount = vec![vec![0u32; wc.vocab_size()]; n_patterns];
    for (a, e) in assignments.iter().zip(events) {
        for &w in &e.words {
            recount[a.pattern][w] += 1;
        }
    }
    for (l, counts) in recount.iter().enumerate() {
        if wc.counts(l) != counts.as_slice() {
            return Err(format!("word counts of pattern {l} differ from the recount"));
        }
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if wc.total(l) != total {
            return Err(format!("C_ℓ of pattern {l} is {} but words sum to {total}", wc.total(l)));
        }
    }

    // active tasks and their excitation sums
    let mut active = std::collections::HashSet::new();
    for u in 0..p.mus().len() {
        let started = tasks.values().filter(|(tu, _, _)| *tu == u).count() as u64;
        if p.tasks_started(u) != started {
            return Err(format!("user {u} started {} tasks, recount {started}", p.tasks_started(u)));
        }
        for t in p.user_tasks(u) {
            let Some((tu, tl, idx)) = tasks.get(&t.id) else {
                return Err(format!("active task {} has no events", t.id));
            };
            if *tu != u || *tl != t.pattern {
                return Err(format!("task {} owner or pattern mismatch", t.id));
            }
            let last = events[*idx.last().unwrap()].time;
            if t.count as usize != idx.len() || t.last_time != last {
                return Err(format!("task {} count/last_time mismatch", t.id));
            }
            let brute: f64 = idx.iter().map(|&i| (-nu * (last - events[i].time)).exp()).sum();
            if (brute - t.excitation_sum).abs() > 1e-9 {
                return Err(format!("task {} excitation {} vs brute {brute}", t.id, t.excitation_sum));
            }
            active.insert(t.id);
        }
    }
    for (id, (_, _, idx)) in &tasks {
        if !active.contains(id) {
            let left: f64 = idx.iter().map(|&i| (-nu * (now - events[i].time)).exp()).sum();
            if left >= h.prune_below.max(1e-300) * 1.0000001 {
                return Err(format!("task {id} dropped while its excitation is {left}"));
            }
        }
    }

    // kernel-strength statistics
    for (l, a) in p.alpha_states().iter().enumerate() {
        let idx: Vec<usize> = (0..events.len()).filter(|&i| assignments[i].pattern == l).collect();
        let follow_ups = idx.len() as u64 - m[l];
        if a.events != idx.len() as u64 || a.follow_ups != follow_ups {
            return Err(format!("pattern {l} event/follow-up counts differ from the recount"));
        }
        let brute: f64 = idx.iter().map(|&i| (-nu * (now - events[i].time)).exp()).sum();
        if (brute - a.excitation).abs() > 1e-9 * brute.max(1.0) {
            return Err(format!("pattern {l} aggregate excitation {} vs brute {brute}", a.excitation));
        }
    }
    Ok(())
}

/// `Σ_n log p(y_n | y_{<n}, b_{<n})` along a given assignment path, which is
/// what a single particle following that path reports as its evidence.
pub fn oracle_path_evidence(
    events: &[Event],
    assignments: &[hdhp::smc::Assignment],
    n_users: usize,
    h: &Hyperparams,
) -> f64 {
    let mut s = OracleState::default();
    let mut total = 0.0;
    for (n, (ev, a)) in events.iter().zip(assignments).enumerate() {
        let prev = if n == 0 { 0.0 } else { s.log_joint(n_users, events[n - 1].time, h) };
        let choices = s.choices(ev, h);
        let joints: Vec<f64> = choices
            .iter()
            .filter(|(_, r)| *r > 0.0)
            .map(|(c, r)| s.apply(ev, *c, *r, h.vocab.len()).log_joint(n_users, ev.time, h))
            .collect();
        total += log_sum_exp(&joints) - prev;
        let want = if a.task < s.tasks.len() {
            OracleChoice::Task(a.task)
        } else if a.pattern < s.counts.len() {
            OracleChoice::NewTask(a.pattern)
        } else {
            OracleChoice::NewPattern
        };
        let (c, r) = *choices.iter().find(|(c, _)| *c == want).expect("path choice exists");
        s = s.apply(ev, c, r, h.vocab.len());
    }
    total
}

// ------------------------------------------------------ simulation helpers

/// Number of events on `[0, horizon]` of one task-initiation stream with rate
/// `mu_pi` and a single kernel, simulated with the library's thinning and
/// task-assignment steps.
pub fn simulate_count<R: Rng>(mu_pi: f64, alpha: f64, nu: f64, horizon: f64, rng: &mut R) -> usize {
    use hdhp::generative::{assign_task, sample_next_event, TaskChoice};
    use hdhp::point_process::{KernelParams, TaskState, UserState};
    let kernels = [KernelParams::new(alpha, nu).unwrap()];
    let mut user = UserState::new(0, mu_pi).unwrap();
    let mut t = 0.0;
    let mut n = 0;
    loop {
        let (next, _) = sample_next_event(std::slice::from_ref(&user), &kernels, t, rng).unwrap();
        if next > horizon {
            return n;
        }
        t = next;
        match assign_task(&user, &kernels, t, rng).unwrap() {
            TaskChoice::Existing(i) => user.tasks[i].record(t, nu).unwrap(),
            TaskChoice::New => user.tasks.push(TaskState::new(n, 0, 0, t)),
        }
        n += 1;
    }
}

/// Mean, standard error and closed-form expectation of the event count.
pub fn moment_check(mu_pi: f64, alpha: f64, nu: f64, horizon: f64, runs: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts: Vec<f64> = (0..runs)
        .map(|_| simulate_count(mu_pi, alpha, nu, horizon, &mut rng) as f64)
        .collect();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let k = hdhp::point_process::KernelParams::new(alpha, nu).unwrap();
    let expected = hdhp::point_process::expected_count(mu_pi, &k, horizon).unwrap();
    (mean, (var / n).sqrt(), expected)
}

/// Simulates `n_users` independent single-user streams and rescales each
/// with its true parameters.
pub fn true_rescaled_gaps(n_users: usize, events_per_user: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
    use hdhp::generative::{generate, SyntheticConfig};
    use hdhp::point_process::{rescale_times, MarkedEvent, UserHawkes};
    (0..n_users)
        .map(|i| {
            let cfg = SyntheticConfig {
                n_users: 1,
                n_patterns: 5,
                vocab_size: 10,
                support_size: 5,
                n_events: events_per_user,
                seed: seed.wrapping_add(i as u64),
                ..SyntheticConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (events, truth) = generate(&cfg, &mut rng).unwrap();
            let marked: Vec<MarkedEvent> = events
                .iter()
                .map(|e| MarkedEvent {
                    time: e.time,
                    task: e.true_task.unwrap(),
                    pattern: e.true_pattern.unwrap(),
                })
                .collect();
            let model = UserHawkes {
                mu: truth.mus[0],
                alphas: truth.alphas(),
                nu: truth.nu,
            };
            (format!("u{i}"), rescale_times(&marked, &model).unwrap())
        })
        .collect()
}

/// Pearson's χ² statistic and its upper-tail p-value.
pub fn chi_square(observed: &[f64], expected: &[f64]) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    let df = (observed.len() - 1) as f64;
    (stat, 1.0 - ChiSquared::new(df).unwrap().cdf(stat))
}
