//! Rectified-flow objective and Euler sampling.
//!
//! The forward interpolation is z(t) = t*x + (1-t)*eps with t=0 at pure noise
//! and t=1 at data, so the velocity target v = x - eps points from noise to
//! data and sampling integrates t upward from 0. The loss weights each batch
//! item by the logit-normal density at its sampled time.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::net::UsmNet;
use crate::optim::Optimizer;
use crate::tensor::Tensor;

/// Lower/upper clamp applied to sampled times during training, keeping the
/// logit-normal weight finite at the interval boundary.
pub const T_CLAMP: f64 = 1e-4;

/// Linear interpolant z = t*x + (1-t)*eps; t must lie in [0, 1].
pub fn interpolate(x: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "interpolate: t = {t} outside [0, 1]"
        )));
    }
    if x.shape() != eps.shape() {
        return Err(Error::shape_mismatch("interpolate", x.shape(), eps.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(&a, &b)| t * a + (1.0 - t) * b)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Density of the logit-normal distribution with zero mean and unit variance
/// evaluated at t in (0, 1).
pub fn logit_normal_weight(t: f64) -> Result<f64> {
    if t <= 0.0 || t >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "logit_normal_weight: t = {t} outside (0, 1)"
        )));
    }
    let logit = (t / (1.0 - t)).ln();
    let norm = 1.0 / (t * (1.0 - t) * (2.0 * std::f64::consts::PI).sqrt());
    Ok(norm * (-0.5 * logit * logit).exp())
}

/// Weighted flow-matching loss: (1/B) sum_i w_i * mean((v_hat_i - v_i)^2).
pub fn fm_loss(v_hat: &[Tensor], v: &[Tensor], w: &[f64]) -> Result<f64> {
    if v_hat.len() != v.len() || v.len() != w.len() || v.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "fm_loss: inconsistent batch sizes {} / {} / {}",
            v_hat.len(),
            v.len(),
            w.len()
        )));
    }
    let mut total = 0.0;
    for ((vh, vt), &wi) in v_hat.iter().zip(v.iter()).zip(w.iter()) {
        if vh.shape() != vt.shape() {
            return Err(Error::shape_mismatch("fm_loss", vh.shape(), vt.shape()));
        }
        let mse = vh
            .data()
            .iter()
            .zip(vt.data().iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / vh.len() as f64;
        total += wi * mse;
    }
    Ok(total / v.len() as f64)
}

/// Per-step training statistics (the metrics CSV rows come from these).
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    /// Unweighted mean MSE over the batch.
    pub loss: f64,
    /// The optimized objective: logit-normal-weighted mean MSE.
    pub weighted_loss: f64,
    /// Global L2 norm over all parameter gradients.
    pub grad_norm: f64,
    /// Mean applied logit-normal weight over the batch.
    pub mean_weight: f64,
}

/// One optimizer step of the training loop: sample eps and t per item, build
/// the interpolants, run the forward/backward passes (batch items in
/// parallel, merged in index order so results are deterministic), and apply
/// the update.
pub fn train_step(
    net: &mut UsmNet,
    opt: &mut Optimizer,
    batch: &[(Tensor, Option<usize>)],
    step: usize,
    rng: &mut impl Rng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("train_step: empty batch".into()));
    }
    // Draw all randomness up front, serially, so the step is reproducible
    // regardless of worker scheduling.
    let mut items = Vec::with_capacity(batch.len());
    let mut t_values = Vec::with_capacity(batch.len());
    for (x, class) in batch {
        let t: f64 = rng.gen::<f64>().clamp(T_CLAMP, 1.0 - T_CLAMP);
        let eps_data: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        let eps = Tensor::new(x.shape().to_vec(), eps_data)?;
        t_values.push(t);
        items.push((x.clone(), eps, t, *class));
    }

    let per_item: Vec<Result<(f64, f64, f64, Gradients)>> = items
        .par_iter()
        .map(|(x, eps, t, class)| {
            let z = interpolate(x, eps, *t)?;
            let v = x.sub(eps)?;
            let weight = logit_normal_weight(*t)?;
            let mut g = Graph::new();
            g.set_check_finite(false);
            let zv = g.constant(&z);
            let ctx = match class {
                Some(c) => Some(net.ctx_for_class(&mut g, *c)?),
                None => None,
            };
            let v_hat = net.forward(&mut g, zv, *t, ctx)?;
            let vv = g.constant(&v);
            let diff = g.sub(v_hat, vv)?;
            let sq = g.mul(diff, diff)?;
            let mse = g.mean_all(sq)?;
            let mse_value = g.scalar_value(mse)?;
            let weighted = g.mul_scalar(mse, weight / items.len() as f64)?;
            let grads = g.backward(weighted)?;
            Ok((mse_value, weight * mse_value, weight, grads))
        })
        .collect();

    let mut grads_parts = Vec::with_capacity(per_item.len());
    let mut loss_sum = 0.0;
    let mut weighted_sum = 0.0;
    let mut weight_sum = 0.0;
    for r in per_item {
        let (mse, weighted, weight, grads) = r?;
        loss_sum += mse;
        weighted_sum += weighted;
        weight_sum += weight;
        grads_parts.push(grads);
    }
    let loss = loss_sum / items.len() as f64;
    let weighted_loss = weighted_sum / items.len() as f64;
    let mean_weight = weight_sum / items.len() as f64;
    if !weighted_loss.is_finite() {
        return Err(Error::NanLoss { step, t_values });
    }

    let grads = Gradients::merge_sum(grads_parts)?;
    let mut sq_norm = 0.0;
    let mut current: Vec<Tensor> = Vec::new();
    net.params.for_each_param(&mut |_, t| {
        if let Some(g) = grads.get(t) {
            sq_norm += g.data().iter().map(|&v| v * v).sum::<f64>();
        }
        current.push(t.clone());
    });

    let updated = opt.step(&current, &grads)?;
    let mut idx = 0usize;
    net.params.for_each_param_mut(&mut |_, t| {
        if let Some(new_t) = &updated[idx] {
            *t = new_t.clone();
        }
        idx += 1;
    });

    Ok(StepStats {
        loss,
        weighted_loss,
        grad_norm: sq_norm.sqrt(),
        mean_weight,
    })
}

/// Euler integration of a velocity field from noise: z_0 = eps, then
/// z_{i} = z_{i-1} + dt * field(z_{i-1}, (i-1)*dt) for i = 1..=steps.
/// Makes exactly `steps` field evaluations.
pub fn euler_sample_field(
    field: &mut dyn FnMut(&Tensor, f64) -> Result<Tensor>,
    init_noise: Tensor,
    steps: usize,
) -> Result<Tensor> {
    if steps < 1 {
        return Err(Error::InvalidArgument(
            "euler_sample: steps must be at least 1".into(),
        ));
    }
    let dt = 1.0 / steps as f64;
    let mut z = init_noise;
    for i in 0..steps {
        let t = i as f64 * dt;
        let v = field(&z, t)?;
        z = z.axpy(dt, &v)?;
    }
    Ok(z)
}

/// Euler sampling with the network as the velocity field.
pub fn euler_sample(
    net: &UsmNet,
    steps: usize,
    rng: &mut impl Rng,
    ctx_class: Option<usize>,
) -> Result<Tensor> {
    let cfg = net.config();
    let shape = [cfg.channels, cfg.h, cfg.w];
    let noise = Tensor::randn(&shape, 1.0, rng);
    let mut field = |z: &Tensor, t: f64| -> Result<Tensor> {
        let mut g = Graph::inference();
        let zv = g.constant(z);
        let ctx = match ctx_class {
            Some(c) => Some(net.ctx_for_class(&mut g, c)?),
            None => None,
        };
        let out = net.forward(&mut g, zv, t, ctx)?;
        Ok(g.tensor(out))
    };
    euler_sample_field(&mut field, noise, steps)
}
