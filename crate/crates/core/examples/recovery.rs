//! Synthetic parameter-recovery run: generate a labelled stream, fit it and
//! print clustering and parameter-recovery scores.
//!
//! cargo run --release -p hdhp --example recovery -- [events] [particles] [seed]

use std::time::Instant;

use hdhp::evaluation::{confusion_matrix, match_patterns, nmi};
use hdhp::generative::{generate, Hyperparams, SyntheticConfig};
use hdhp::smc::fit;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n_events = args.get(1).map_or(Ok(25_000), |s| s.parse())?;
    let particles = args.get(2).map_or(Ok(100), |s| s.parse())?;
    let seed = args.get(3).map_or(Ok(1), |s| s.parse())?;
    let eta0 = args.get(4).map_or(Ok(0.1), |s| s.parse())?;

    let cfg = SyntheticConfig {
        n_users: 50,
        n_patterns: 15,
        n_events,
        seed,
        ..SyntheticConfig::default()
    };
    let (events, truth) = generate(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    println!("generated {} events over {:.1} months, {} tasks", events.len(), truth.end_time, truth.task_patterns.len());

    let h = Hyperparams {
        vocab: truth.vocab.clone(),
        particles,
        seed,
        eta0,
        ..Hyperparams::default()
    };
    let start = Instant::now();
    let model = fit(&events, &truth.users, &h, None)?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "fit: {:.1}s ({:.3} ms/event), {} patterns, {} tasks, {} resamples",
        secs,
        1e3 * secs / events.len() as f64,
        model.patterns.len(),
        model.total_tasks,
        model.resamples
    );

    let inferred = model.pattern_labels();
    let true_labels: Vec<usize> = events.iter().map(|e| e.true_pattern.unwrap()).collect();
    let third = events.len() / 3;
    for k in 0..3 {
        let r = k * third..if k == 2 { events.len() } else { (k + 1) * third };
        println!("NMI third {}: {:.4}", k + 1, nmi(&inferred[r.clone()], &true_labels[r])?);
    }

    let mapping = match_patterns(&confusion_matrix(&inferred, &true_labels));
    let (mut est, mut tru) = (Vec::new(), Vec::new());
    for (l, m) in mapping.iter().enumerate() {
        if let Some(j) = m {
            est.push(model.patterns[l].alpha);
            tru.push(truth.patterns[*j].alpha);
        }
    }
    println!("alpha: {} matched, pearson {:.4}", est.len(), pearson(&est, &tru));

    let mut rel: Vec<f64> = model
        .mus()
        .iter()
        .zip(&truth.mus)
        .map(|(m, t)| (m - t).abs() / t)
        .collect();
    rel.sort_by(f64::total_cmp);
    println!("mu: median relative error {:.4}", rel[rel.len() / 2]);
    Ok(())
}
