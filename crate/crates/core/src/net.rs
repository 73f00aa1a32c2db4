//! The U-shaped 25-block network.
//!
//! Layout: a 1x1 patchify projection, 12 encoder blocks with a stride-2
//! downsampling convolution after blocks 3, 6 and 9, one bottleneck block at
//! hw/64 tokens, and 12 decoder blocks mirroring the encoder with transposed
//! convolutions before decoder blocks 4, 7 and 10. Every decoder block fuses
//! the resolution-matched encoder output (encoder j pairs with decoder 13-j)
//! by concatenation along the hidden axis followed by a 2D -> D projection.
//!
//! Each main block is AdaLN timestep modulation around the selective-scan
//! sequence block, with an optional cross-attention residual for text
//! conditioning. Modulation maps, cross-attention output projections and the
//! final output projection start at zero, so a freshly initialized model is
//! the zero velocity field.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::scan::{generate_scan, scan_for_block, ScanPath};
use crate::ssm::{mamba_block, MambaBlockParams};
use crate::tensor::Tensor;

pub const N_ENCODER: usize = 12;
pub const N_MIDDLE: usize = 1;
pub const N_DECODER: usize = 12;
pub const N_BLOCKS: usize = N_ENCODER + N_MIDDLE + N_DECODER;

/// Shared normalization guard for every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;

const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Latent grid height; must be divisible by 8 (three halvings).
    pub h: usize,
    /// Latent grid width; must be divisible by 8.
    pub w: usize,
    /// Latent channels.
    pub channels: usize,
    /// Hidden size D.
    pub hidden: usize,
    /// State size N of the diagonal SSM.
    pub state: usize,
    /// Inner expansion factor; the stream width is expand * hidden.
    pub expand: usize,
    /// Depthwise causal conv width inside each sequence block; 0 disables it.
    pub k_conv: usize,
    /// Attention heads for the optional cross-attention.
    pub n_heads: usize,
    /// Context embedding width for text conditioning.
    pub ctx_dim: usize,
    /// Rows of the learned per-class context table (0 = external ctx only).
    pub n_ctx_classes: usize,
    pub use_text: bool,
    pub use_skips: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            h: 16,
            w: 16,
            channels: 4,
            hidden: 32,
            state: 16,
            expand: 2,
            k_conv: 4,
            n_heads: 4,
            ctx_dim: 16,
            n_ctx_classes: 0,
            use_text: false,
            use_skips: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.h % 8 != 0 || self.w % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "grid {}x{} must be divisible by 8 for three halvings",
                self.h, self.w
            )));
        }
        if self.channels == 0 || self.hidden == 0 || self.state == 0 || self.expand == 0 {
            return Err(Error::InvalidArgument(
                "channels, hidden, state and expand must be positive".into(),
            ));
        }
        if self.use_text {
            if self.n_heads == 0 || self.hidden % self.n_heads != 0 {
                return Err(Error::InvalidArgument(format!(
                    "n_heads {} must divide hidden {}",
                    self.n_heads, self.hidden
                )));
            }
            if self.ctx_dim == 0 {
                return Err(Error::InvalidArgument("ctx_dim must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn inner(&self) -> usize {
        self.expand * self.hidden
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    /// Sinusoidal feature width for the timestep embedding (hidden rounded
    /// up to even).
    pub fn t_dim(&self) -> usize {
        self.hidden + self.hidden % 2
    }
}

/// Per-block placement in the U-shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    /// Execution-order index 0..25; also selects the scan configuration.
    pub index: usize,
    /// Grid dims this block runs at.
    pub grid: (usize, usize),
    /// Transposed convolution before this (decoder) block.
    pub up_before: bool,
    /// Stride-2 convolution after this (encoder) block.
    pub down_after: bool,
    /// 0-based encoder block whose output fuses into this decoder block.
    pub skip_from: Option<usize>,
    pub is_encoder: bool,
}

/// The execution plan for the 25 blocks, derived purely from the config.
/// With `flat` set, all blocks run at full length with no resampling or
/// skips (the reference layout used for cost comparisons).
pub fn block_plan(config: &ModelConfig, flat: bool) -> Vec<BlockPlan> {
    let mut plan = Vec::with_capacity(N_BLOCKS);
    let grid_at = |level: usize| (config.h >> level, config.w >> level);
    for i in 0..N_ENCODER {
        let level = if flat { 0 } else { i / 3 };
        plan.push(BlockPlan {
            index: i,
            grid: grid_at(level),
            up_before: false,
            down_after: !flat && i % 3 == 2 && i < 9,
            skip_from: None,
            is_encoder: true,
        });
    }
    plan.push(BlockPlan {
        index: N_ENCODER,
        grid: grid_at(if flat { 0 } else { 3 }),
        up_before: false,
        down_after: false,
        skip_from: None,
        is_encoder: false,
    });
    for j in 0..N_DECODER {
        let level = if flat { 0 } else { 3 - (j / 3).min(3) };
        plan.push(BlockPlan {
            index: N_ENCODER + N_MIDDLE + j,
            grid: grid_at(level),
            up_before: !flat && j % 3 == 0 && j > 0,
            down_after: false,
            skip_from: (!flat).then_some(N_ENCODER - 1 - j),
            is_encoder: false,
        });
    }
    plan
}

/// Timestep embedding MLP weights.
#[derive(Clone, Debug)]
pub struct TimestepParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl TimestepParams {
    fn init(t_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        TimestepParams {
            w1: Tensor::randn(&[t_dim, hidden], INIT_STD, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(&[hidden, hidden], INIT_STD, rng),
            b2: Tensor::zeros(&[hidden]),
        }
    }
}

/// AdaLN modulation map: t-embedding -> (shift, scale, gate), zero-initialized
/// so every block starts as the identity.
#[derive(Clone, Debug)]
pub struct AdaLnParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl AdaLnParams {
    fn init(hidden: usize) -> Self {
        AdaLnParams {
            w: Tensor::zeros(&[hidden, 3 * hidden]),
            b: Tensor::zeros(&[3 * hidden]),
        }
    }
}

/// Multi-head cross-attention weights; the output projection starts at zero
/// so the module contributes nothing at init.
#[derive(Clone, Debug)]
pub struct CrossAttnParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl CrossAttnParams {
    fn init(hidden: usize, ctx_dim: usize, rng: &mut impl Rng) -> Self {
        CrossAttnParams {
            w_q: Tensor::randn(&[hidden, hidden], INIT_STD, rng),
            w_k: Tensor::randn(&[ctx_dim, hidden], INIT_STD, rng),
            w_v: Tensor::randn(&[ctx_dim, hidden], INIT_STD, rng),
            w_o: Tensor::zeros(&[hidden, hidden]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MainBlockParams {
    pub adaln: AdaLnParams,
    pub mamba: MambaBlockParams,
    pub cross: Option<CrossAttnParams>,
}

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn init(hidden: usize, rng: &mut impl Rng) -> Self {
        ConvParams {
            kernel: Tensor::randn(&[2, 2, hidden, hidden], INIT_STD, rng),
            bias: Tensor::zeros(&[hidden]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// Every learnable tensor of the model.
#[derive(Clone, Debug)]
pub struct UsmParams {
    pub in_proj: LinearParams,
    pub t_embed: TimestepParams,
    pub blocks: Vec<MainBlockParams>,
    pub down: Vec<ConvParams>,
    pub up: Vec<ConvParams>,
    pub skips: Vec<LinearParams>,
    /// Zero-initialized, so the fresh model predicts the zero field.
    pub out_proj: LinearParams,
    /// Learned per-class context rows standing in for a text encoder.
    pub ctx_table: Option<Tensor>,
}

impl UsmParams {
    fn init(config: &ModelConfig, flat: bool, rng: &mut impl Rng) -> Self {
        let d = config.hidden;
        let blocks = (0..N_BLOCKS)
            .map(|_| MainBlockParams {
                adaln: AdaLnParams::init(d),
                mamba: MambaBlockParams::init(
                    d,
                    config.inner(),
                    config.state,
                    config.k_conv,
                    INIT_STD,
                    rng,
                ),
                cross: config
                    .use_text
                    .then(|| CrossAttnParams::init(d, config.ctx_dim, rng)),
            })
            .collect();
        let resample = |rng: &mut _| (0..3).map(|_| ConvParams::init(d, rng)).collect::<Vec<_>>();
        UsmParams {
            in_proj: LinearParams {
                w: Tensor::randn(&[config.channels, d], INIT_STD, rng),
                b: Tensor::zeros(&[d]),
            },
            t_embed: TimestepParams::init(config.t_dim(), d, rng),
            blocks,
            down: if flat { Vec::new() } else { resample(rng) },
            up: if flat { Vec::new() } else { resample(rng) },
            skips: if flat || !config.use_skips {
                Vec::new()
            } else {
                (0..N_DECODER)
                    .map(|_| LinearParams {
                        w: Tensor::randn(&[2 * d, d], INIT_STD, rng),
                        b: Tensor::zeros(&[d]),
                    })
                    .collect()
            },
            out_proj: LinearParams {
                w: Tensor::zeros(&[d, config.channels]),
                b: Tensor::zeros(&[config.channels]),
            },
            ctx_table: (config.use_text && config.n_ctx_classes > 0)
                .then(|| Tensor::randn(&[config.n_ctx_classes, config.ctx_dim], INIT_STD, rng)),
        }
    }

    fn mark_all_grad(&mut self) {
        self.for_each_param_mut(&mut |_, t| t.set_requires_grad(true));
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("in_proj.w".into(), &self.in_proj.w);
        f("in_proj.b".into(), &self.in_proj.b);
        f("t_embed.w1".into(), &self.t_embed.w1);
        f("t_embed.b1".into(), &self.t_embed.b1);
        f("t_embed.w2".into(), &self.t_embed.w2);
        f("t_embed.b2".into(), &self.t_embed.b2);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i:02}");
            f(format!("{p}.adaln.w"), &b.adaln.w);
            f(format!("{p}.adaln.b"), &b.adaln.b);
            f(format!("{p}.mamba.w_in"), &b.mamba.w_in);
            if let Some(cw) = &b.mamba.conv_w {
                f(format!("{p}.mamba.conv_w"), cw);
            }
            f(format!("{p}.mamba.a_log"), &b.mamba.ssm.a_log);
            f(format!("{p}.mamba.d_skip"), &b.mamba.ssm.d_skip);
            f(format!("{p}.mamba.w_b"), &b.mamba.ssm.w_b);
            f(format!("{p}.mamba.w_c"), &b.mamba.ssm.w_c);
            f(format!("{p}.mamba.w_delta"), &b.mamba.ssm.w_delta);
            f(format!("{p}.mamba.delta_bias"), &b.mamba.ssm.delta_bias);
            f(format!("{p}.mamba.w_out"), &b.mamba.w_out);
            if let Some(c) = &b.cross {
                f(format!("{p}.cross.w_q"), &c.w_q);
                f(format!("{p}.cross.w_k"), &c.w_k);
                f(format!("{p}.cross.w_v"), &c.w_v);
                f(format!("{p}.cross.w_o"), &c.w_o);
            }
        }
        for (i, c) in self.down.iter().enumerate() {
            f(format!("down{i}.kernel"), &c.kernel);
            f(format!("down{i}.bias"), &c.bias);
        }
        for (i, c) in self.up.iter().enumerate() {
            f(format!("up{i}.kernel"), &c.kernel);
            f(format!("up{i}.bias"), &c.bias);
        }
        for (i, s) in self.skips.iter().enumerate() {
            f(format!("skip{i:02}.w"), &s.w);
            f(format!("skip{i:02}.b"), &s.b);
        }
        f("out_proj.w".into(), &self.out_proj.w);
        f("out_proj.b".into(), &self.out_proj.b);
        if let Some(t) = &self.ctx_table {
            f("ctx_table".into(), t);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("in_proj.w".into(), &mut self.in_proj.w);
        f("in_proj.b".into(), &mut self.in_proj.b);
        f("t_embed.w1".into(), &mut self.t_embed.w1);
        f("t_embed.b1".into(), &mut self.t_embed.b1);
        f("t_embed.w2".into(), &mut self.t_embed.w2);
        f("t_embed.b2".into(), &mut self.t_embed.b2);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{i:02}");
            f(format!("{p}.adaln.w"), &mut b.adaln.w);
            f(format!("{p}.adaln.b"), &mut b.adaln.b);
            f(format!("{p}.mamba.w_in"), &mut b.mamba.w_in);
            if let Some(cw) = &mut b.mamba.conv_w {
                f(format!("{p}.mamba.conv_w"), cw);
            }
            f(format!("{p}.mamba.a_log"), &mut b.mamba.ssm.a_log);
            f(format!("{p}.mamba.d_skip"), &mut b.mamba.ssm.d_skip);
            f(format!("{p}.mamba.w_b"), &mut b.mamba.ssm.w_b);
            f(format!("{p}.mamba.w_c"), &mut b.mamba.ssm.w_c);
            f(format!("{p}.mamba.w_delta"), &mut b.mamba.ssm.w_delta);
            f(format!("{p}.mamba.delta_bias"), &mut b.mamba.ssm.delta_bias);
            f(format!("{p}.mamba.w_out"), &mut b.mamba.w_out);
            if let Some(c) = &mut b.cross {
                f(format!("{p}.cross.w_q"), &mut c.w_q);
                f(format!("{p}.cross.w_k"), &mut c.w_k);
                f(format!("{p}.cross.w_v"), &mut c.w_v);
                f(format!("{p}.cross.w_o"), &mut c.w_o);
            }
        }
        for (i, c) in self.down.iter_mut().enumerate() {
            f(format!("down{i}.kernel"), &mut c.kernel);
            f(format!("down{i}.bias"), &mut c.bias);
        }
        for (i, c) in self.up.iter_mut().enumerate() {
            f(format!("up{i}.kernel"), &mut c.kernel);
            f(format!("up{i}.bias"), &mut c.bias);
        }
        for (i, s) in self.skips.iter_mut().enumerate() {
            f(format!("skip{i:02}.w"), &mut s.w);
            f(format!("skip{i:02}.b"), &mut s.b);
        }
        f("out_proj.w".into(), &mut self.out_proj.w);
        f("out_proj.b".into(), &mut self.out_proj.b);
        if let Some(t) = &mut self.ctx_table {
            f("ctx_table".into(), t);
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, t| out.push((name, t.clone())));
        out
    }
}

/// Pure sinusoidal timestep features: [sin(1000 t w_j) ..., cos(1000 t w_j) ...]
/// with w_j = 10000^(-2j/dim). `dim` must be even.
pub fn timestep_features(t: f64, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "timestep feature dim {dim} must be positive and even"
        )));
    }
    let half = dim / 2;
    let scaled = 1000.0 * t;
    let mut data = vec![0.0; dim];
    for j in 0..half {
        let omega = 10000f64.powf(-2.0 * j as f64 / dim as f64);
        data[j] = (scaled * omega).sin();
        data[half + j] = (scaled * omega).cos();
    }
    Tensor::new(vec![dim], data)
}

/// Sinusoidal features through the 2-layer SiLU MLP; returns a [1, hidden]
/// embedding that conditions every block of one forward pass.
pub fn timestep_embed(
    g: &mut Graph,
    t: f64,
    p: &TimestepParams,
    t_dim: usize,
) -> Result<Value> {
    let feats = timestep_features(t, t_dim)?.reshaped(vec![1, t_dim])?;
    let fv = g.constant(&feats);
    let w1 = g.leaf(&p.w1);
    let b1 = g.leaf(&p.b1);
    let h = g.linear(fv, w1, Some(b1))?;
    let h = g.silu(h)?;
    let w2 = g.leaf(&p.w2);
    let b2 = g.leaf(&p.b2);
    g.linear(h, w2, Some(b2))
}

/// AdaLN modulation: x_mod = LN(x) * (1 + scale(t)) + shift(t). Returns the
/// modulated sequence and the gate vector for the residual.
pub fn adaln_modulate(
    g: &mut Graph,
    x: Value,
    t_emb: Value,
    p: &AdaLnParams,
) -> Result<(Value, Value)> {
    let d = g.shape(x).last().copied().unwrap_or(0);
    let act = g.silu(t_emb)?;
    let w = g.leaf(&p.w);
    let b = g.leaf(&p.b);
    let mods = g.linear(act, w, Some(b))?;
    let pieces = g.split_last(mods, &[d, d, d])?;
    let shift = g.reshape(pieces[0], vec![d])?;
    let scale = g.reshape(pieces[1], vec![d])?;
    let gate = g.reshape(pieces[2], vec![d])?;
    let normed = g.layer_norm(x, LAYER_NORM_EPS)?;
    let scale1 = g.add_scalar(scale, 1.0)?;
    let scaled = g.mul(normed, scale1)?;
    let x_mod = g.add(scaled, shift)?;
    Ok((x_mod, gate))
}

/// Multi-head cross-attention: queries from the sequence, keys/values from
/// the context rows. Scale is 1/sqrt(head_dim); softmax over the context.
pub fn cross_attention(
    g: &mut Graph,
    x: Value,
    ctx: Value,
    p: &CrossAttnParams,
    n_heads: usize,
) -> Result<Value> {
    let d = match g.shape(x) {
        [_, d] => *d,
        s => return Err(Error::invalid_shape("cross_attention", s, "expected [l, d]")),
    };
    let m = match g.shape(ctx) {
        [m, _] => *m,
        s => return Err(Error::invalid_shape("cross_attention", s, "expected [m, ctx_dim]")),
    };
    if m == 0 {
        return Err(Error::InvalidArgument(
            "cross_attention: context must have at least one row".into(),
        ));
    }
    let dh = d / n_heads;
    let wq = g.leaf(&p.w_q);
    let wk = g.leaf(&p.w_k);
    let wv = g.leaf(&p.w_v);
    let q = g.matmul(x, wq)?;
    let k = g.matmul(ctx, wk)?;
    let v = g.matmul(ctx, wv)?;
    let head_sizes = vec![dh; n_heads];
    let qs = g.split_last(q, &head_sizes)?;
    let ks = g.split_last(k, &head_sizes)?;
    let vs = g.split_last(v, &head_sizes)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut merged: Option<Value> = None;
    for hi in 0..n_heads {
        let kt = g.transpose2(ks[hi])?;
        let scores = g.matmul(qs[hi], kt)?;
        let scores = g.mul_scalar(scores, scale)?;
        let probs = g.softmax_last(scores)?;
        let out = g.matmul(probs, vs[hi])?;
        merged = Some(match merged {
            None => out,
            Some(acc) => g.concat_last(acc, out)?,
        });
    }
    let cat = merged.expect("n_heads >= 1");
    let wo = g.leaf(&p.w_o);
    g.matmul(cat, wo)
}

/// Concat-then-project skip fusion: out = [dec | enc] * w + b.
pub fn skip_fuse(g: &mut Graph, dec: Value, enc: Value, w: &Tensor, b: &Tensor) -> Result<Value> {
    if g.shape(dec) != g.shape(enc) {
        return Err(Error::shape_mismatch(
            "skip_fuse",
            g.shape(dec),
            g.shape(enc),
        ));
    }
    let cat = g.concat_last(dec, enc)?;
    let wv = g.leaf(w);
    let bv = g.leaf(b);
    g.linear(cat, wv, Some(bv))
}

/// One main block: AdaLN-modulated selective-scan with a gated residual,
/// then an optional cross-attention residual.
pub fn main_block(
    g: &mut Graph,
    x: Value,
    t_emb: Value,
    ctx: Option<Value>,
    p: &MainBlockParams,
    path: &ScanPath,
    n_heads: usize,
) -> Result<Value> {
    let (x_mod, gate) = adaln_modulate(g, x, t_emb, &p.adaln)?;
    let f = mamba_block(g, x_mod, &p.mamba, path)?;
    let gated = g.mul(f, gate)?;
    let mut out = g.add(x, gated)?;
    if let (Some(cp), Some(ctx)) = (&p.cross, ctx) {
        let q_in = g.layer_norm(out, LAYER_NORM_EPS)?;
        let att = cross_attention(g, q_in, ctx, cp, n_heads)?;
        out = g.add(out, att)?;
    }
    Ok(out)
}

/// The assembled model: config, parameters and precomputed scan paths.
#[derive(Clone)]
pub struct UsmNet {
    config: ModelConfig,
    flat: bool,
    pub params: UsmParams,
    plan: Vec<BlockPlan>,
    scans: Vec<ScanPath>,
}

impl UsmNet {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(config, false, rng)
    }

    /// The flat 25-block reference at full sequence length everywhere, used
    /// for cost comparisons.
    pub fn flat_reference(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(config, true, rng)
    }

    fn build(config: ModelConfig, flat: bool, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let plan = block_plan(&config, flat);
        // paired encoder/decoder blocks must agree on token counts
        for bp in &plan {
            if let Some(src) = bp.skip_from {
                assert_eq!(plan[src].grid, bp.grid, "skip pairing grid mismatch");
            }
        }
        let mut scans = Vec::with_capacity(plan.len());
        for bp in &plan {
            scans.push(generate_scan(scan_for_block(bp.index), bp.grid.0, bp.grid.1)?);
        }
        let mut params = UsmParams::init(&config, flat, rng);
        params.mark_all_grad();
        Ok(UsmNet {
            config,
            flat,
            params,
            plan,
            scans,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_flat(&self) -> bool {
        self.flat
    }

    pub fn plan(&self) -> &[BlockPlan] {
        &self.plan
    }

    pub fn scan_paths(&self) -> &[ScanPath] {
        &self.scans
    }

    /// Token count seen by each of the 25 blocks in execution order.
    pub fn token_ledger(&self) -> Vec<usize> {
        self.plan.iter().map(|b| b.grid.0 * b.grid.1).collect()
    }

    /// Context row for a learned class embedding (M = 1 token).
    pub fn ctx_for_class(&self, g: &mut Graph, class: usize) -> Result<Value> {
        let table = self.params.ctx_table.as_ref().ok_or_else(|| {
            Error::InvalidArgument("model has no learned context table".into())
        })?;
        if class >= table.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range for {} context rows",
                table.shape()[0]
            )));
        }
        let tv = g.leaf(table);
        g.gather_rows(tv, &[class])
    }

    /// Full forward pass: latent [c, h, w] and timestep to the predicted
    /// velocity field of the same shape.
    pub fn forward(&self, g: &mut Graph, z: Value, t: f64, ctx: Option<Value>) -> Result<Value> {
        let cfg = &self.config;
        let expect = [cfg.channels, cfg.h, cfg.w];
        if g.shape(z) != expect {
            return Err(Error::invalid_shape(
                "usm_forward",
                g.shape(z),
                format!("expected {expect:?}"),
            ));
        }
        let ctx = if ctx.is_some() && !cfg.use_text {
            log::warn!("usm_forward: context supplied but use_text is off; ignoring it");
            None
        } else {
            ctx
        };

        let t_emb = timestep_embed(g, t, &self.params.t_embed, cfg.t_dim())?;

        let l = cfg.tokens();
        let flat_z = g.reshape(z, vec![cfg.channels, l])?;
        let tokens = g.transpose2(flat_z)?;
        let w_in = g.leaf(&self.params.in_proj.w);
        let b_in = g.leaf(&self.params.in_proj.b);
        let mut x = g.linear(tokens, w_in, Some(b_in))?;

        let mut enc_outputs: Vec<Value> = Vec::with_capacity(N_ENCODER);
        let mut down_idx = 0usize;
        let mut up_idx = 0usize;
        for bp in &self.plan {
            if bp.up_before {
                let (gh, gw) = (bp.grid.0 / 2, bp.grid.1 / 2);
                let grid = g.reshape(x, vec![gh, gw, cfg.hidden])?;
                let conv = &self.params.up[up_idx];
                let kv = g.leaf(&conv.kernel);
                let bv = g.leaf(&conv.bias);
                let upped = g.conv_up(grid, kv, bv)?;
                x = g.reshape(upped, vec![bp.grid.0 * bp.grid.1, cfg.hidden])?;
                up_idx += 1;
            }
            if let Some(src) = bp.skip_from {
                if cfg.use_skips {
                    let dec_j = bp.index - N_ENCODER - N_MIDDLE;
                    let sp = &self.params.skips[dec_j];
                    x = skip_fuse(g, x, enc_outputs[src], &sp.w, &sp.b)?;
                }
            }
            x = main_block(
                g,
                x,
                t_emb,
                ctx,
                &self.params.blocks[bp.index],
                &self.scans[bp.index],
                cfg.n_heads,
            )?;
            if bp.is_encoder {
                enc_outputs.push(x);
            }
            if bp.down_after {
                let grid = g.reshape(x, vec![bp.grid.0, bp.grid.1, cfg.hidden])?;
                let conv = &self.params.down[down_idx];
                let kv = g.leaf(&conv.kernel);
                let bv = g.leaf(&conv.bias);
                let downed = g.conv_down(grid, kv, bv)?;
                x = g.reshape(downed, vec![bp.grid.0 * bp.grid.1 / 4, cfg.hidden])?;
                down_idx += 1;
            }
        }

        let w_out = g.leaf(&self.params.out_proj.w);
        let b_out = g.leaf(&self.params.out_proj.b);
        let out_tokens = g.linear(x, w_out, Some(b_out))?;
        let back = g.transpose2(out_tokens)?;
        g.reshape(back, vec![cfg.channels, cfg.h, cfg.w])
    }

    /// Inference-mode forward on a plain tensor.
    pub fn forward_tensor(&self, z: &Tensor, t: f64, ctx: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::inference();
        let zv = g.constant(z);
        let cv = ctx.map(|c| g.constant(c));
        let out = self.forward(&mut g, zv, t, cv)?;
        Ok(g.tensor(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plan_matches_the_shape_ledger() {
        let config = ModelConfig::default(); // 16x16
        let plan = block_plan(&config, false);
        let tokens: Vec<usize> = plan.iter().map(|b| b.grid.0 * b.grid.1).collect();
        let expected = [
            256, 256, 256, 64, 64, 64, 16, 16, 16, 4, 4, 4, // encoder
            4, // middle
            4, 4, 4, 16, 16, 16, 64, 64, 64, 256, 256, 256, // decoder
        ];
        assert_eq!(tokens, expected);
    }

    #[test]
    fn skip_pairing_is_resolution_matched() {
        let config = ModelConfig::default();
        let plan = block_plan(&config, false);
        for bp in &plan {
            if let Some(src) = bp.skip_from {
                assert_eq!(plan[src].grid, bp.grid);
                assert!(plan[src].is_encoder);
                // encoder j (1-based) pairs with decoder 13-j
                let dec_j = bp.index - N_ENCODER - N_MIDDLE; // 0-based
                assert_eq!(src, N_ENCODER - 1 - dec_j);
            }
        }
    }

    #[test]
    fn timestep_features_at_zero() {
        let f = timestep_features(0.0, 8).unwrap();
        assert_eq!(&f.data()[..4], &[0.0; 4]);
        assert_eq!(&f.data()[4..], &[1.0; 4]);
        assert!(timestep_features(0.5, 7).is_err());
    }

    #[test]
    fn identity_at_init_network_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = ModelConfig {
            h: 8,
            w: 8,
            channels: 2,
            hidden: 8,
            state: 4,
            ..ModelConfig::default()
        };
        let net = UsmNet::new(config, &mut rng).unwrap();
        let z = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
        let out = net.forward_tensor(&z, 0.3, None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_round_trip_on_non_square_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let config = ModelConfig {
            h: 8,
            w: 16,
            channels: 3,
            hidden: 8,
            state: 4,
            ..ModelConfig::default()
        };
        let net = UsmNet::new(config, &mut rng).unwrap();
        let z = Tensor::randn(&[3, 8, 16], 1.0, &mut rng);
        let out = net.forward_tensor(&z, 0.5, None).unwrap();
        assert_eq!(out.shape(), &[3, 8, 16]);
    }
}
