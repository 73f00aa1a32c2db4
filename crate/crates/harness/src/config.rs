//! Canonical key-value config text: one `key = value` per line, UTF-8, keys
//! sorted on write. The same encoding is embedded into checkpoints so a
//! saved model carries a reproducible description of its architecture.

use std::collections::BTreeMap;

use usm_core::net::ModelConfig;

use crate::dataset::SyntheticDataset;
use crate::error::{HarnessError, Result};

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            HarnessError::malformed("config", format!("line {}: missing '='", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn render_kv(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

fn get_parsed<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| HarnessError::malformed("config", format!("bad value for {key}: {v}"))),
    }
}

pub fn model_to_kv(cfg: &ModelConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("model.h".into(), cfg.h.to_string());
    m.insert("model.w".into(), cfg.w.to_string());
    m.insert("model.channels".into(), cfg.channels.to_string());
    m.insert("model.hidden".into(), cfg.hidden.to_string());
    m.insert("model.state".into(), cfg.state.to_string());
    m.insert("model.expand".into(), cfg.expand.to_string());
    m.insert("model.k_conv".into(), cfg.k_conv.to_string());
    m.insert("model.n_heads".into(), cfg.n_heads.to_string());
    m.insert("model.ctx_dim".into(), cfg.ctx_dim.to_string());
    m.insert("model.n_ctx_classes".into(), cfg.n_ctx_classes.to_string());
    m.insert("model.use_text".into(), cfg.use_text.to_string());
    m.insert("model.use_skips".into(), cfg.use_skips.to_string());
    m
}

pub fn model_from_kv(map: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let cfg = ModelConfig {
        h: get_parsed(map, "model.h", d.h)?,
        w: get_parsed(map, "model.w", d.w)?,
        channels: get_parsed(map, "model.channels", d.channels)?,
        hidden: get_parsed(map, "model.hidden", d.hidden)?,
        state: get_parsed(map, "model.state", d.state)?,
        expand: get_parsed(map, "model.expand", d.expand)?,
        k_conv: get_parsed(map, "model.k_conv", d.k_conv)?,
        n_heads: get_parsed(map, "model.n_heads", d.n_heads)?,
        ctx_dim: get_parsed(map, "model.ctx_dim", d.ctx_dim)?,
        n_ctx_classes: get_parsed(map, "model.n_ctx_classes", d.n_ctx_classes)?,
        use_text: get_parsed(map, "model.use_text", d.use_text)?,
        use_skips: get_parsed(map, "model.use_skips", d.use_skips)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_config_text(cfg: &ModelConfig) -> String {
    render_kv(&model_to_kv(cfg))
}

pub fn model_config_from_text(text: &str) -> Result<ModelConfig> {
    model_from_kv(&parse_kv(text)?)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: String,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 8,
            lr: 1e-4,
            optimizer: "adam".into(),
            log_every: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleConfig {
    pub count: usize,
    pub steps: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            count: 16,
            steps: 25,
        }
    }
}

/// Everything a CLI run needs: architecture, training knobs, data spec and
/// sampling knobs.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub data: SyntheticDataset,
}

pub fn run_config_to_text(rc: &RunConfig) -> String {
    let mut m = model_to_kv(&rc.model);
    m.insert("train.steps".into(), rc.train.steps.to_string());
    m.insert("train.batch".into(), rc.train.batch.to_string());
    m.insert("train.lr".into(), format!("{:e}", rc.train.lr));
    m.insert("train.optimizer".into(), rc.train.optimizer.clone());
    m.insert("train.log_every".into(), rc.train.log_every.to_string());
    m.insert("sample.count".into(), rc.sample.count.to_string());
    m.insert("sample.steps".into(), rc.sample.steps.to_string());
    rc.data.fill_kv(&mut m);
    render_kv(&m)
}

pub fn run_config_from_text(text: &str) -> Result<RunConfig> {
    let map = parse_kv(text)?;
    let model = model_from_kv(&map)?;
    let dt = TrainConfig::default();
    let train = TrainConfig {
        steps: get_parsed(&map, "train.steps", dt.steps)?,
        batch: get_parsed(&map, "train.batch", dt.batch)?,
        lr: get_parsed(&map, "train.lr", dt.lr)?,
        optimizer: map
            .get("train.optimizer")
            .cloned()
            .unwrap_or_else(|| dt.optimizer.clone()),
        log_every: get_parsed(&map, "train.log_every", dt.log_every)?,
    };
    if train.optimizer != "adam" && train.optimizer != "sgd" {
        return Err(HarnessError::malformed(
            "config",
            format!("train.optimizer must be adam or sgd, got {}", train.optimizer),
        ));
    }
    let ds = SampleConfig::default();
    let sample = SampleConfig {
        count: get_parsed(&map, "sample.count", ds.count)?,
        steps: get_parsed(&map, "sample.steps", ds.steps)?,
    };
    let data = SyntheticDataset::from_kv(&map, &model)?;
    Ok(RunConfig {
        model,
        train,
        sample,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trips_through_text() {
        let mut cfg = ModelConfig::default();
        cfg.hidden = 24;
        cfg.use_text = true;
        cfg.n_ctx_classes = 2;
        cfg.n_heads = 4;
        let text = model_config_text(&cfg);
        let back = model_config_from_text(&text).unwrap();
        assert_eq!(cfg, back);
        // keys are sorted
        let lines: Vec<&str> = text.lines().collect();
        let mut sorted = lines.clone();
        sorted.sort_unstable();
        assert_eq!(lines, sorted);
    }

    #[test]
    fn malformed_line_is_rejected() {
        assert!(model_config_from_text("model.h 16\n").is_err());
        assert!(model_config_from_text("model.h = sixteen\n").is_err());
    }
}
