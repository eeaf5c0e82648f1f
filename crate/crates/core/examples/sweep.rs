//! Per-event fit cost across particle counts.
//!
//! cargo run --release -p hdhp --example sweep -- [events] [threads]

use std::time::Instant;

use hdhp::generative::{generate, Hyperparams, SyntheticConfig};
use hdhp::smc::fit;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n_events = args.get(1).map_or(Ok(2000), |s| s.parse())?;
    let threads: usize = args.get(2).map_or(Ok(1), |s| s.parse())?;
    let cfg = SyntheticConfig {
        n_users: 30,
        n_patterns: 10,
        vocab_size: 60,
        support_size: 15,
        n_events,
        seed: 5,
        ..SyntheticConfig::default()
    };
    let (events, truth) = generate(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    for particles in [10usize, 25, 50, 100, 200, 400] {
        let h = Hyperparams {
            vocab: truth.vocab.clone(),
            particles,
            seed: 5,
            ..Hyperparams::default()
        };
        let mut times = Vec::new();
        let mut resamples = 0;
        let mut patterns = 0;
        for _ in 0..3 {
            let start = Instant::now();
            let m = fit(&events, &truth.users, &h, Some(threads))?;
            times.push(1e6 * start.elapsed().as_secs_f64() / events.len() as f64);
            resamples = m.resamples;
            patterns = m.patterns.len();
        }
        println!(
            "P={particles:4}: us/event {:?}  us/event/particle {:.2}  resamples {resamples}  patterns {patterns}",
            times.iter().map(|t| format!("{t:.1}")).collect::<Vec<_>>(),
            times.iter().copied().fold(f64::INFINITY, f64::min) / particles as f64
        );
    }
    Ok(())
}
