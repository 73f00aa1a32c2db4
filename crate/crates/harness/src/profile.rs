//! Wall-clock and live-activation measurement of single forwards.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usm_core::graph::Graph;
use usm_core::net::{ModelConfig, UsmNet};
use usm_core::tensor::Tensor;

use crate::error::Result;
use crate::flops::flops_count;

#[derive(Clone, Debug)]
pub struct ProfileReport {
    /// Per-repetition wall time of one batch-1 forward, in milliseconds.
    pub rep_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Measured peak live activation elements of one forward graph.
    pub peak_live_elements: usize,
    /// Token ledger copied from the analytic cost model.
    pub token_ledger: Vec<usize>,
}

fn time_forwards(net: &UsmNet, reps: usize, rng: &mut ChaCha8Rng) -> Result<ProfileReport> {
    let cfg = net.config();
    let z = Tensor::randn(&[cfg.channels, cfg.h, cfg.w], 1.0, rng);
    // untimed warmup forward, also used to read the live-element peak
    let peak = {
        let mut g = Graph::inference();
        let zv = g.constant(&z);
        net.forward(&mut g, zv, 0.5, None)?;
        g.peak_elements()
    };
    let mut rep_ms = Vec::with_capacity(reps);
    for i in 0..reps {
        let t = (i as f64 + 0.5) / reps as f64;
        let start = Instant::now();
        let mut g = Graph::inference();
        g.set_check_finite(false);
        let zv = g.constant(&z);
        net.forward(&mut g, zv, t, None)?;
        rep_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = rep_ms.iter().sum::<f64>() / reps as f64;
    let var = rep_ms.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / reps as f64;
    let ledger = if net.is_flat() {
        vec![cfg.tokens(); 25]
    } else {
        flops_count(cfg).block_tokens
    };
    Ok(ProfileReport {
        rep_ms,
        mean_ms: mean,
        std_ms: var.sqrt(),
        peak_live_elements: peak,
        token_ledger: ledger,
    })
}

/// Time `reps` single forwards of the hierarchical model at batch 1.
pub fn profile_run(config: &ModelConfig, reps: usize, seed: u64) -> Result<ProfileReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = UsmNet::new(config.clone(), &mut rng)?;
    time_forwards(&net, reps, &mut rng)
}

/// Time the hierarchical model and the flat 25-block reference side by side.
pub fn profile_pair(
    config: &ModelConfig,
    reps: usize,
    seed: u64,
) -> Result<(ProfileReport, ProfileReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let usm = UsmNet::new(config.clone(), &mut rng)?;
    let flat = UsmNet::flat_reference(config.clone(), &mut rng)?;
    let a = time_forwards(&usm, reps, &mut rng)?;
    let b = time_forwards(&flat, reps, &mut rng)?;
    Ok((a, b))
}

/// Render the report as CSV: `rep,wall_ms` rows plus a trailing summary.
pub fn report_csv(r: &ProfileReport) -> String {
    let mut out = String::from("rep,wall_ms\n");
    for (i, ms) in r.rep_ms.iter().enumerate() {
        out.push_str(&format!("{i},{ms:.6}\n"));
    }
    out.push_str(&format!(
        "# mean_ms={:.6} std_ms={:.6} peak_live_elements={}\n",
        r.mean_ms, r.std_ms, r.peak_live_elements
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            h: 8,
            w: 8,
            channels: 2,
            hidden: 8,
            state: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn one_rep_gives_one_row() {
        let r = profile_run(&small(), 1, 0).unwrap();
        assert_eq!(r.rep_ms.len(), 1);
        assert!(r.peak_live_elements > 0);
    }

    #[test]
    fn ledger_matches_flops_count() {
        let r = profile_run(&small(), 1, 0).unwrap();
        assert_eq!(r.token_ledger, flops_count(&small()).block_tokens);
    }
}
