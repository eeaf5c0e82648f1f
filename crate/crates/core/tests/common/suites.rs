//! Invariant suites, each returning the number of checks made or the first
//! violation.

use super::check_particle;
use hdhp::evaluation::{evaluate_heldout, gof_tests, pattern_report, user_report, Predictor};
use hdhp::generative::{generate, AlphaRefresh, Event, Hyperparams, SyntheticConfig};
use hdhp::io::{snapshot_from_str, snapshot_to_string};
use hdhp::point_process::TaskState;
use hdhp::smc::{fit, InferenceResult, Smc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SuiteResult = Result<usize, String>;

pub fn small_stream(n_users: usize, n_patterns: usize, n_events: usize, seed: u64) -> (Vec<Event>, Vec<String>, Vec<String>) {
    let cfg = SyntheticConfig {
        n_users,
        n_patterns,
        vocab_size: 30,
        support_size: 8,
        n_events,
        seed,
        ..SyntheticConfig::default()
    };
    let (events, truth) = generate(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (events, truth.users, truth.vocab)
}

/// Task excitation sums against brute-force decayed sums.
pub fn excitation(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = 0;
    for _ in 0..500 {
        let nu = rng.random_range(0.1..20.0);
        let n = rng.random_range(1..=50);
        let mut t = 0.0;
        let mut times = Vec::new();
        for _ in 0..n {
            t += rng.random_range(0.0..1.0) * rng.random_range(0.0..1.0);
            times.push(t);
        }
        let mut task = TaskState::new(0, 0, 0, times[0]);
        for (i, &ti) in times.iter().enumerate().skip(1) {
            task.record(ti, nu).map_err(|e| e.to_string())?;
            let brute: f64 = times[..=i].iter().map(|tj| (-nu * (ti - tj)).exp()).sum();
            if (task.excitation_sum - brute).abs() > 1e-10 {
                return Err(format!("excitation {} vs brute {brute}", task.excitation_sum));
            }
            checks += 1;
        }
    }
    Ok(checks)
}

/// Every particle after every event against recounts from its assignments.
pub fn particle_state(seed: u64) -> SuiteResult {
    let (events, users, vocab) = small_stream(8, 4, 400, seed);
    let mut checks = 0;
    for refresh in [AlphaRefresh::Touched, AlphaRefresh::All] {
        let h = Hyperparams {
            vocab: vocab.clone(),
            particles: 8,
            seed,
            alpha_refresh: refresh,
            // keep pruning active so the recount also covers dropped tasks
            prune_below: 1e-6,
            ..Hyperparams::default()
        };
        let mut smc = Smc::new(users.clone(), h.clone(), Some(1)).map_err(|e| e.to_string())?;
        for n in 0..events.len() {
            smc.step(&events[n]).map_err(|e| e.to_string())?;
            for (i, p) in smc.particles().iter().enumerate() {
                check_particle(p, &events[..=n], &h).map_err(|e| format!("event {n}, particle {i}: {e}"))?;
                checks += 1;
            }
            let total: f64 = smc.particles().iter().map(|p| p.log_weight.exp()).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(format!("weights sum to {total} after event {n}"));
            }
        }
        let r = smc.finish();
        if r.assignments.len() != events.len() {
            return Err("assignments do not cover every event".into());
        }
    }
    Ok(checks)
}

fn fitted(seed: u64) -> (InferenceResult, Vec<Event>, Vec<String>) {
    let (events, users, vocab) = small_stream(10, 4, 1200, seed);
    let h = Hyperparams {
        vocab,
        particles: 16,
        seed,
        ..Hyperparams::default()
    };
    let model = fit(&events[..900], &users, &h, Some(1)).unwrap();
    (model, events, users)
}

/// Held-out mixture weights sum to one, before and after observing events.
pub fn mixture_weights(seed: u64) -> SuiteResult {
    let (model, events, _) = fitted(seed);
    let mut pred = Predictor::new(&model).map_err(|e| e.to_string())?;
    let mut checks = 0;
    for ev in &events[900..] {
        for u in 0..model.users.len() {
            let w = pred.mixture_weights(u, ev.time).map_err(|e| e.to_string())?;
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-12 || w.iter().any(|x| *x < 0.0) {
                return Err(format!("weights of user {u} sum to {s}"));
            }
            checks += 1;
        }
        pred.observe(ev).map_err(|e| e.to_string())?;
    }
    Ok(checks)
}

/// Snapshot round trip: equal model, identical bytes, bit-identical
/// downstream evaluation.
pub fn snapshot_round_trip(seed: u64) -> SuiteResult {
    let (model, events, users) = fitted(seed);
    let text = snapshot_to_string(&model).map_err(|e| e.to_string())?;
    let back = snapshot_from_str(&text).map_err(|e| e.to_string())?;
    if back != model {
        return Err("loaded model differs".into());
    }
    if snapshot_to_string(&back).map_err(|e| e.to_string())? != text {
        return Err("re-serialised snapshot differs".into());
    }
    let a = evaluate_heldout(&model, &events[900..], &users).map_err(|e| e.to_string())?;
    let b = evaluate_heldout(&back, &events[900..], &users).map_err(|e| e.to_string())?;
    let bits = |h: &hdhp::evaluation::HeldOut| h.logliks.iter().map(|(_, l)| l.to_bits()).collect::<Vec<_>>();
    if bits(&a) != bits(&b) || a != b {
        return Err("evaluation after reload differs".into());
    }
    let truncated = &text[..text.len() / 2];
    if snapshot_from_str(truncated).is_ok() {
        return Err("truncated snapshot loaded".into());
    }
    Ok(4)
}

/// Normalisation and range invariants of the reports.
pub fn reports(seed: u64) -> SuiteResult {
    let (model, events, users) = fitted(seed);
    let mut checks = 0;
    for l in 0..model.patterns.len() {
        let s: f64 = model.theta(l).iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(format!("θ of pattern {l} sums to {s}"));
        }
        checks += 1;
    }
    let pr = pattern_report(&model, 5).map_err(|e| e.to_string())?;
    let pop: f64 = pr.iter().map(|p| p.popularity).sum();
    if (pop - 1.0).abs() > 1e-12 || pr.iter().any(|p| p.burstiness < 0.0) {
        return Err(format!("popularities sum to {pop} or burstiness < 0"));
    }
    let m: u64 = model.patterns.iter().map(|p| p.tasks).sum();
    if m != model.total_tasks {
        return Err(format!("Σ m_ℓ = {m} vs K = {}", model.total_tasks));
    }
    let ur = user_report(&model, &model.training_events()).map_err(|e| e.to_string())?;
    if ur.iter().any(|u| u.patterns_adopted > u.tasks || u.mean_task_duration < 0.0) {
        return Err("user report out of range".into());
    }
    let held = evaluate_heldout(&model, &events[900..], &users).map_err(|e| e.to_string())?;
    let g = &held.gof;
    for f in [g.ks_reject_fraction, g.ad_reject_fraction] {
        if !(0.0..=1.0).contains(&f) {
            return Err(format!("fraction {f} outside [0, 1]"));
        }
    }
    if g.users.iter().any(|u| !(0.0..=1.0).contains(&u.ks_pvalue)) {
        return Err("p-value outside [0, 1]".into());
    }
    let gaps: Vec<(String, Vec<f64>)> = vec![("flat".into(), vec![1.0; 40])];
    if !gof_tests(&gaps).users[0].ks_reject {
        return Err("degenerate gaps not rejected".into());
    }
    Ok(checks + 3)
}

/// Every suite, by name.
pub fn all(seed: u64) -> Vec<(&'static str, SuiteResult)> {
    vec![
        ("excitation sums vs brute force", excitation(seed)),
        ("particle counts, words and excitation vs recount", particle_state(seed)),
        ("mixture-weight normalisation", mixture_weights(seed)),
        ("snapshot round trip", snapshot_round_trip(seed)),
        ("report normalisation", reports(seed)),
    ]
}
