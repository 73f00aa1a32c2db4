//! Training metrics CSV and the Gaussian-fit moment distance.

use std::fs;
use std::io::Write;
use std::path::Path;

use usm_core::tensor::Tensor;

use crate::error::{HarnessError, Result};

pub const METRICS_HEADER: &str = "step,loss,weighted_loss,grad_norm,lr,wall_ms";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub weighted_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

pub struct MetricsWriter {
    file: fs::File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(HarnessError::io(path))?;
        writeln!(file, "{METRICS_HEADER}").map_err(HarnessError::io(path))?;
        Ok(MetricsWriter { file })
    }

    pub fn write(&mut self, row: &MetricsRow) -> std::io::Result<()> {
        writeln!(
            self.file,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.3}",
            row.step, row.loss, row.weighted_loss, row.grad_norm, row.lr, row.wall_ms
        )
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(HarnessError::malformed("metrics csv", "bad header"));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(HarnessError::malformed(
                "metrics csv",
                format!("line {}: expected 6 fields", i + 1),
            ));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| HarnessError::malformed("metrics csv", format!("bad number {s}")))
        };
        rows.push(MetricsRow {
            step: parts[0]
                .parse()
                .map_err(|_| HarnessError::malformed("metrics csv", "bad step"))?,
            loss: parse(parts[1])?,
            weighted_loss: parse(parts[2])?,
            grad_norm: parse(parts[3])?,
            lr: parse(parts[4])?,
            wall_ms: parse(parts[5])?,
        });
    }
    Ok(rows)
}

/// 2-Wasserstein distance between diagonal Gaussian fits of two sample sets:
/// sqrt(|mu_g - mu_r|^2 + |sigma_g - sigma_r|^2) over flattened dimensions.
/// Standard deviations use the population convention (divide by n).
pub fn eval_moments(generated: &Tensor, reference: &Tensor) -> Result<f64> {
    let dims_of = |t: &Tensor, what: &str| -> Result<(usize, usize)> {
        let s = t.shape();
        if s.len() < 2 {
            return Err(HarnessError::malformed(
                "eval_moments",
                format!("{what}: expected [n, ...], got {s:?}"),
            ));
        }
        let n = s[0];
        let d: usize = s[1..].iter().product();
        if n < 2 {
            return Err(HarnessError::malformed(
                "eval_moments",
                format!("{what}: need at least 2 samples, got {n}"),
            ));
        }
        Ok((n, d))
    };
    let (ng, dg) = dims_of(generated, "generated")?;
    let (nr, dr) = dims_of(reference, "reference")?;
    if dg != dr {
        return Err(HarnessError::malformed(
            "eval_moments",
            format!("dimension mismatch {dg} vs {dr}"),
        ));
    }
    let fit = |t: &Tensor, n: usize, d: usize| -> (Vec<f64>, Vec<f64>) {
        let mut mean = vec![0.0; d];
        for row in t.data().chunks(d) {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for row in t.data().chunks(d) {
            for (j, &v) in row.iter().enumerate() {
                let c = v - mean[j];
                var[j] += c * c;
            }
        }
        let std = var.iter().map(|&v| (v / n as f64).sqrt()).collect();
        (mean, std)
    };
    let (mg, sg) = fit(generated, ng, dg);
    let (mr, sr) = fit(reference, nr, dr);
    let mut acc = 0.0;
    for j in 0..dg {
        let dm = mg[j] - mr[j];
        let ds = sg[j] - sr[j];
        acc += dm * dm + ds * ds;
    }
    Ok(acc.sqrt())
}
