//! Shared drivers for training and bulk sampling, used by both the CLI and
//! the acceptance suite.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use usm_core::flow::{euler_sample, train_step};
use usm_core::net::UsmNet;
use usm_core::optim::Optimizer;
use usm_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::dataset::SyntheticDataset;
use crate::error::Result;
use crate::metrics::{MetricsRow, MetricsWriter};

/// Seed streams: one base seed fans out into independent generators so the
/// same seed reproduces the whole run bit for bit.
fn stream(seed: u64, idx: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx);
    rng
}

pub struct TrainOutcome {
    pub net: UsmNet,
    pub rows: Vec<MetricsRow>,
}

/// Full training run: fresh model from the seed, `steps` optimizer updates
/// on freshly drawn batches, optional metrics CSV.
pub fn train_model(rc: &RunConfig, seed: u64, metrics_path: Option<&Path>) -> Result<TrainOutcome> {
    rc.model.validate()?;
    let mut init_rng = stream(seed, 0);
    let mut data_rng = stream(seed, 1);
    let mut noise_rng = stream(seed, 2);
    let mut net = UsmNet::new(rc.model.clone(), &mut init_rng)?;
    let mut opt = match rc.train.optimizer.as_str() {
        "sgd" => Optimizer::sgd(rc.train.lr),
        _ => Optimizer::adam(rc.train.lr),
    };
    let conditional = rc.model.use_text && rc.model.n_ctx_classes > 0;
    let mut writer = match metrics_path {
        Some(p) => Some(MetricsWriter::create(p)?),
        None => None,
    };
    let mut rows = Vec::with_capacity(rc.train.steps);
    for step in 0..rc.train.steps {
        let started = Instant::now();
        let (batch, labels) = rc.data.sample_labeled(rc.train.batch, &mut data_rng)?;
        let items: Vec<(Tensor, Option<usize>)> = (0..rc.train.batch)
            .map(|i| {
                let x = SyntheticDataset::item(&batch, i)?;
                let class = conditional.then(|| labels[i]);
                Ok((x, class))
            })
            .collect::<Result<_>>()?;
        let stats = train_step(&mut net, &mut opt, &items, step, &mut noise_rng)?;
        let row = MetricsRow {
            step,
            loss: stats.loss,
            weighted_loss: stats.weighted_loss,
            grad_norm: stats.grad_norm,
            lr: rc.train.lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = &mut writer {
            w.write(&row)
                .map_err(crate::error::HarnessError::io(metrics_path.unwrap()))?;
        }
        rows.push(row);
        if rc.train.log_every > 0 && step % rc.train.log_every.max(1) == 0 {
            log::info!(
                "step {step}: loss {:.5} weighted {:.5} grad norm {:.4}",
                row.loss,
                row.weighted_loss,
                row.grad_norm
            );
        }
    }
    Ok(TrainOutcome { net, rows })
}

/// Draw `count` independent samples in parallel; sample i uses its own
/// derived rng stream, so the result is deterministic regardless of worker
/// scheduling.
pub fn sample_many(
    net: &UsmNet,
    count: usize,
    steps: usize,
    seed: u64,
    class: Option<usize>,
) -> Result<Tensor> {
    let cfg = net.config();
    let per = cfg.channels * cfg.h * cfg.w;
    let samples: Vec<Result<Tensor>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, 16 + i as u64);
            Ok(euler_sample(net, steps, &mut rng, class)?)
        })
        .collect();
    let mut data = Vec::with_capacity(count * per);
    for s in samples {
        data.extend_from_slice(s?.data());
    }
    Ok(Tensor::new(
        vec![count, cfg.channels, cfg.h, cfg.w],
        data,
    )?)
}

/// Reference draws from the data spec for moment evaluation.
pub fn reference_set(data: &SyntheticDataset, n: usize, seed: u64) -> Result<Tensor> {
    let mut rng = stream(seed, 8);
    data.sample(n, &mut rng)
}
