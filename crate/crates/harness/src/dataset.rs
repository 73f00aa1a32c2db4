//! Seeded synthetic datasets standing in for VAE latents.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use usm_core::net::ModelConfig;
use usm_core::tensor::Tensor;

use crate::error::{HarnessError, Result};

/// A fully seeded sample distribution over [c, h, w] latents. The same spec
/// always describes the same distribution; the rng passed to `sample` only
/// drives the draws.
#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticDataset {
    /// K diagonal Gaussians; component j has mean amp * s_j with s_j a
    /// Rademacher pattern derived from mean_seed, and per-dim deviation sigma.
    GaussMix {
        c: usize,
        h: usize,
        w: usize,
        k: usize,
        amp: f64,
        sigma: f64,
        mean_seed: u64,
    },
    /// +-1 blocks of the given period with additive Gaussian noise.
    Checkerboard {
        c: usize,
        h: usize,
        w: usize,
        period: usize,
        noise: f64,
    },
    /// GaussMix whose component index doubles as the class label.
    ClassConditional {
        c: usize,
        h: usize,
        w: usize,
        classes: usize,
        amp: f64,
        sigma: f64,
        mean_seed: u64,
    },
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        SyntheticDataset::GaussMix {
            c: 4,
            h: 8,
            w: 8,
            k: 2,
            amp: 0.05,
            sigma: 0.02,
            mean_seed: 17,
        }
    }
}

impl SyntheticDataset {
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            SyntheticDataset::GaussMix { c, h, w, .. }
            | SyntheticDataset::Checkerboard { c, h, w, .. }
            | SyntheticDataset::ClassConditional { c, h, w, .. } => (*c, *h, *w),
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            SyntheticDataset::ClassConditional { classes, .. } => Some(*classes),
            _ => None,
        }
    }

    fn elem(&self) -> usize {
        let (c, h, w) = self.dims();
        c * h * w
    }

    /// Component means as flat vectors, derived deterministically from the
    /// spec alone.
    pub fn component_means(&self) -> Vec<Vec<f64>> {
        match self {
            SyntheticDataset::GaussMix {
                k, amp, mean_seed, ..
            }
            | SyntheticDataset::ClassConditional {
                classes: k,
                amp,
                mean_seed,
                ..
            } => {
                let dims = self.elem();
                (0..*k)
                    .map(|j| {
                        let mut rng = ChaCha8Rng::seed_from_u64(mean_seed.wrapping_add(j as u64));
                        (0..dims)
                            .map(|_| if rng.gen::<bool>() { *amp } else { -*amp })
                            .collect()
                    })
                    .collect()
            }
            SyntheticDataset::Checkerboard { .. } => Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let (c, h, w) = self.dims();
        if c == 0 || h == 0 || w == 0 {
            return Err(HarnessError::malformed("dataset", "zero-sized latent"));
        }
        match self {
            SyntheticDataset::GaussMix { k, sigma, .. } => {
                if *k == 0 || *sigma < 0.0 {
                    return Err(HarnessError::malformed("dataset", "need k >= 1, sigma >= 0"));
                }
            }
            SyntheticDataset::ClassConditional { classes, sigma, .. } => {
                if *classes == 0 || *sigma < 0.0 {
                    return Err(HarnessError::malformed("dataset", "need classes >= 1"));
                }
            }
            SyntheticDataset::Checkerboard { period, noise, .. } => {
                if *period == 0 || *noise < 0.0 {
                    return Err(HarnessError::malformed("dataset", "need period >= 1"));
                }
            }
        }
        Ok(())
    }

    /// Draw n samples as an [n, c, h, w] tensor.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(self.sample_labeled(n, rng)?.0)
    }

    /// Draw n samples plus class ids (always present; meaningful for the
    /// class-conditional kind).
    pub fn sample_labeled(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
        self.validate()?;
        let (c, h, w) = self.dims();
        let dims = self.elem();
        let mut data = Vec::with_capacity(n * dims);
        let mut labels = Vec::with_capacity(n);
        match self {
            SyntheticDataset::GaussMix { k, sigma, .. }
            | SyntheticDataset::ClassConditional {
                classes: k,
                sigma,
                ..
            } => {
                let means = self.component_means();
                for _ in 0..n {
                    let j = rng.gen_range(0..*k);
                    labels.push(j);
                    let mean = &means[j];
                    for d in 0..dims {
                        let z: f64 = rng.sample(StandardNormal);
                        data.push(mean[d] + sigma * z);
                    }
                }
            }
            SyntheticDataset::Checkerboard { period, noise, .. } => {
                for _ in 0..n {
                    labels.push(0);
                    for _ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let parity = (y / period + x / period) % 2;
                                let base = if parity == 0 { 1.0 } else { -1.0 };
                                let z: f64 = rng.sample(StandardNormal);
                                data.push(base + noise * z);
                            }
                        }
                    }
                }
            }
        }
        Ok((Tensor::new(vec![n, c, h, w], data)?, labels))
    }

    /// View sample i of an [n, c, h, w] batch as a standalone [c, h, w] tensor.
    pub fn item(batch: &Tensor, i: usize) -> Result<Tensor> {
        let s = batch.shape();
        if s.len() != 4 || i >= s[0] {
            return Err(HarnessError::malformed(
                "dataset",
                format!("cannot take item {i} of shape {s:?}"),
            ));
        }
        let per = s[1] * s[2] * s[3];
        Ok(Tensor::new(
            vec![s[1], s[2], s[3]],
            batch.data()[i * per..(i + 1) * per].to_vec(),
        )?)
    }

    pub fn fill_kv(&self, m: &mut BTreeMap<String, String>) {
        let (c, h, w) = self.dims();
        m.insert("data.c".into(), c.to_string());
        m.insert("data.h".into(), h.to_string());
        m.insert("data.w".into(), w.to_string());
        match self {
            SyntheticDataset::GaussMix {
                k,
                amp,
                sigma,
                mean_seed,
                ..
            } => {
                m.insert("data.kind".into(), "gauss-mix".into());
                m.insert("data.k".into(), k.to_string());
                m.insert("data.amp".into(), amp.to_string());
                m.insert("data.sigma".into(), sigma.to_string());
                m.insert("data.mean_seed".into(), mean_seed.to_string());
            }
            SyntheticDataset::Checkerboard { period, noise, .. } => {
                m.insert("data.kind".into(), "checkerboard".into());
                m.insert("data.period".into(), period.to_string());
                m.insert("data.noise".into(), noise.to_string());
            }
            SyntheticDataset::ClassConditional {
                classes,
                amp,
                sigma,
                mean_seed,
                ..
            } => {
                m.insert("data.kind".into(), "class-conditional".into());
                m.insert("data.classes".into(), classes.to_string());
                m.insert("data.amp".into(), amp.to_string());
                m.insert("data.sigma".into(), sigma.to_string());
                m.insert("data.mean_seed".into(), mean_seed.to_string());
            }
        }
    }

    pub fn from_kv(map: &BTreeMap<String, String>, model: &ModelConfig) -> Result<Self> {
        let get = |key: &str| -> Option<&String> { map.get(key) };
        let parse_num = |key: &str, default: f64| -> Result<f64> {
            match get(key) {
                None => Ok(default),
                Some(v) => v.parse().map_err(|_| {
                    HarnessError::malformed("config", format!("bad value for {key}: {v}"))
                }),
            }
        };
        let parse_usize = |key: &str, default: usize| -> Result<usize> {
            match get(key) {
                None => Ok(default),
                Some(v) => v.parse().map_err(|_| {
                    HarnessError::malformed("config", format!("bad value for {key}: {v}"))
                }),
            }
        };
        let c = parse_usize("data.c", model.channels)?;
        let h = parse_usize("data.h", model.h)?;
        let w = parse_usize("data.w", model.w)?;
        let kind = get("data.kind").map(String::as_str).unwrap_or("gauss-mix");
        let ds = match kind {
            "gauss-mix" => SyntheticDataset::GaussMix {
                c,
                h,
                w,
                k: parse_usize("data.k", 2)?,
                amp: parse_num("data.amp", 0.05)?,
                sigma: parse_num("data.sigma", 0.02)?,
                mean_seed: parse_usize("data.mean_seed", 17)? as u64,
            },
            "checkerboard" => SyntheticDataset::Checkerboard {
                c,
                h,
                w,
                period: parse_usize("data.period", 2)?,
                noise: parse_num("data.noise", 0.1)?,
            },
            "class-conditional" => SyntheticDataset::ClassConditional {
                c,
                h,
                w,
                classes: parse_usize("data.classes", 2)?,
                amp: parse_num("data.amp", 0.05)?,
                sigma: parse_num("data.sigma", 0.02)?,
                mean_seed: parse_usize("data.mean_seed", 17)? as u64,
            },
            other => {
                return Err(HarnessError::malformed(
                    "config",
                    format!("unknown data.kind {other}"),
                ))
            }
        };
        ds.validate()?;
        Ok(ds)
    }
}
