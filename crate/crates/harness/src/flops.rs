//! Analytic multiply-accumulate counts for the network, as closed-form
//! functions of the configuration. No model is instantiated.
//!
//! Conventions: one MAC per multiply in the affine maps; normalization,
//! modulation and gating are counted at one MAC per touched element;
//! activations are not counted as MACs. The flat reference is 25 main blocks
//! all at full sequence length with no resampling or skip projections.

use usm_core::net::{block_plan, BlockPlan, ModelConfig, N_DECODER, N_ENCODER, N_MIDDLE};

/// How a line item scales with the hidden size D (with E = expand*D and all
/// other dims held fixed). Used by tests pinning the quadratic terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HiddenScaling {
    Quadratic,
    Linear,
    Other,
}

#[derive(Clone, Debug)]
pub struct CostLine {
    pub name: String,
    pub macs: u64,
    pub scaling: HiddenScaling,
}

/// The full cost breakdown for one configuration.
#[derive(Clone, Debug)]
pub struct CostReport {
    pub lines: Vec<CostLine>,
    /// Token count seen by each of the 25 blocks in execution order.
    pub block_tokens: Vec<usize>,
    /// Full sequence length h*w.
    pub l_full: usize,
    pub total_macs: u64,
    pub flat_total_macs: u64,
    /// Cost of the 12 skip projections alone.
    pub skip_macs: u64,
    /// Analytic estimate of peak live activation elements during a forward.
    pub peak_activation_elems: u64,
}

impl CostReport {
    /// Sum of per-block token counts over 25 * L: the cost ratio of the
    /// hierarchy against the flat reference when every block has identical
    /// per-token cost and resampling/skip layers are excluded. Equals
    /// 511/1600 for the 12/1/12 layout with downsampling after encoder
    /// blocks 3, 6 and 9, independent of every dimension.
    pub fn seq_block_cost_ratio(&self) -> f64 {
        let num: usize = self.block_tokens.iter().sum();
        let den = (N_ENCODER + N_MIDDLE + N_DECODER) * self.l_full;
        num as f64 / den as f64
    }

    /// The same ratio as an exact integer fraction (numerator, denominator).
    pub fn seq_block_cost_fraction(&self) -> (u64, u64) {
        let num: usize = self.block_tokens.iter().sum();
        let den = (N_ENCODER + N_MIDDLE + N_DECODER) * self.l_full;
        (num as u64, den as u64)
    }

    /// Full analytic cost against the flat reference.
    pub fn total_ratio_vs_flat(&self) -> f64 {
        self.total_macs as f64 / self.flat_total_macs as f64
    }

    pub fn line(&self, name: &str) -> Option<&CostLine> {
        self.lines.iter().find(|l| l.name == name)
    }
}

/// Per-token and per-forward MACs of one main block at sequence length l.
fn block_lines(prefix: &str, l: u64, cfg: &ModelConfig, lines: &mut Vec<CostLine>) {
    let d = cfg.hidden as u64;
    let e = cfg.inner() as u64;
    let n = cfg.state as u64;
    let k = cfg.k_conv as u64;
    lines.push(CostLine {
        name: format!("{prefix}.adaln_map"),
        macs: d * 3 * d,
        scaling: HiddenScaling::Quadratic,
    });
    lines.push(CostLine {
        name: format!("{prefix}.stream_proj"),
        macs: l * (d * 2 * e + e * d),
        scaling: HiddenScaling::Quadratic,
    });
    lines.push(CostLine {
        name: format!("{prefix}.delta_proj"),
        macs: l * e * e,
        scaling: HiddenScaling::Quadratic,
    });
    lines.push(CostLine {
        name: format!("{prefix}.state_maps"),
        macs: l * 2 * e * n,
        scaling: HiddenScaling::Linear,
    });
    if k > 0 {
        lines.push(CostLine {
            name: format!("{prefix}.conv"),
            macs: l * e * k,
            scaling: HiddenScaling::Linear,
        });
    }
    lines.push(CostLine {
        name: format!("{prefix}.discretize_scan"),
        macs: l * (2 * e * n + 3 * e * n + e),
        scaling: HiddenScaling::Linear,
    });
    lines.push(CostLine {
        name: format!("{prefix}.gate_norm"),
        macs: l * (2 * e + 3 * d),
        scaling: HiddenScaling::Linear,
    });
    if cfg.use_text {
        let m = cfg.n_ctx_classes.max(1) as u64; // M = 1 learned row per class
        let ctx = cfg.ctx_dim as u64;
        lines.push(CostLine {
            name: format!("{prefix}.attn_proj"),
            macs: l * 2 * d * d,
            scaling: HiddenScaling::Quadratic,
        });
        lines.push(CostLine {
            name: format!("{prefix}.attn_mix"),
            macs: l * 2 * d * m,
            scaling: HiddenScaling::Other,
        });
        lines.push(CostLine {
            name: format!("{prefix}.attn_kv"),
            macs: 2 * m * ctx * d,
            scaling: HiddenScaling::Other,
        });
    }
}

fn model_lines(cfg: &ModelConfig, plan: &[BlockPlan], with_resampling: bool) -> Vec<CostLine> {
    let d = cfg.hidden as u64;
    let c = cfg.channels as u64;
    let l_full = cfg.tokens() as u64;
    let t_dim = cfg.t_dim() as u64;
    let mut lines = Vec::new();
    lines.push(CostLine {
        name: "in_proj".into(),
        macs: l_full * c * d,
        scaling: HiddenScaling::Other,
    });
    lines.push(CostLine {
        name: "t_embed".into(),
        macs: t_dim * d + d * d,
        scaling: HiddenScaling::Other,
    });
    let mut down_idx = 0;
    let mut up_idx = 0;
    for bp in plan {
        let l = (bp.grid.0 * bp.grid.1) as u64;
        if bp.up_before && with_resampling {
            // transposed conv producing l tokens: one d*d tap per output
            lines.push(CostLine {
                name: format!("up{up_idx}"),
                macs: l * d * d,
                scaling: HiddenScaling::Quadratic,
            });
            up_idx += 1;
        }
        if bp.skip_from.is_some() && with_resampling && cfg.use_skips {
            let dec_j = bp.index - N_ENCODER - N_MIDDLE;
            lines.push(CostLine {
                name: format!("skip.dec{dec_j:02}"),
                macs: l * 2 * d * d,
                scaling: HiddenScaling::Quadratic,
            });
        }
        block_lines(&format!("block{:02}", bp.index), l, cfg, &mut lines);
        if bp.down_after && with_resampling {
            // kernel-2 stride-2 conv over l input tokens: l/4 outputs, 4 taps each
            lines.push(CostLine {
                name: format!("down{down_idx}"),
                macs: l * d * d,
                scaling: HiddenScaling::Quadratic,
            });
            down_idx += 1;
        }
    }
    lines.push(CostLine {
        name: "out_proj".into(),
        macs: l_full * d * c,
        scaling: HiddenScaling::Other,
    });
    lines
}

/// Analytic cost report for a configuration; a pure function of the config.
pub fn flops_count(cfg: &ModelConfig) -> CostReport {
    let plan = block_plan(cfg, false);
    let lines = model_lines(cfg, &plan, true);
    let total_macs = lines.iter().map(|l| l.macs).sum();
    let skip_macs = lines
        .iter()
        .filter(|l| l.name.starts_with("skip."))
        .map(|l| l.macs)
        .sum();

    let flat_plan = block_plan(cfg, true);
    let flat_lines = model_lines(cfg, &flat_plan, false);
    let flat_total_macs = flat_lines.iter().map(|l| l.macs).sum();

    let block_tokens: Vec<usize> = plan.iter().map(|b| b.grid.0 * b.grid.1).collect();

    // live elements per block at length l: input, norm, modulated, stream and
    // gate (2e), conv + silu (2e), delta (e), b/c (2n), abar/bbar/hidden
    // states (3 e n), scan/gate/output (2e + d); plus retained encoder
    // outputs for the skips.
    let d = cfg.hidden as u64;
    let e = cfg.inner() as u64;
    let n = cfg.state as u64;
    let per_token = 3 * d + 5 * e + 2 * n + 3 * e * n + 2 * e + d;
    let max_block = block_tokens.iter().copied().max().unwrap_or(0) as u64 * per_token;
    let retained: u64 = plan
        .iter()
        .filter(|b| b.is_encoder)
        .map(|b| (b.grid.0 * b.grid.1) as u64 * d)
        .sum();
    let peak_activation_elems = max_block + retained;

    CostReport {
        lines,
        block_tokens,
        l_full: cfg.tokens(),
        total_macs,
        flat_total_macs,
        skip_macs,
        peak_activation_elems,
    }
}
