//! Structural and behavioral invariants of the assembled network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usm_core::fdiff::{finite_diff_grad, max_rel_err};
use usm_core::graph::Graph;
use usm_core::net::{
    adaln_modulate, block_plan, cross_attention, main_block, skip_fuse, timestep_embed,
    timestep_features, AdaLnParams, ModelConfig, UsmNet, LAYER_NORM_EPS,
};
use usm_core::scan::{generate_scan, scan_for_block};
use usm_core::ssm::mamba_block;
use usm_core::tensor::Tensor;

fn small_config() -> ModelConfig {
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
fn bottleneck_receives_hw_over_64_tokens() {
    let config = ModelConfig::default(); // 16x16
    let plan = block_plan(&config, false);
    let middle = &plan[12];
    assert_eq!(middle.grid.0 * middle.grid.1, 256 / 64);
}

#[test]
fn scan_schedule_follows_block_index_mod_8() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = UsmNet::new(small_config(), &mut rng).unwrap();
    for (k, path) in net.scan_paths().iter().enumerate() {
        assert_eq!(path.config_id(), scan_for_block(k));
        assert_eq!(path.config_id(), k % 8);
    }
}

#[test]
fn token_ledger_is_mirror_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = UsmNet::new(ModelConfig::default(), &mut rng).unwrap();
    let ledger = net.token_ledger();
    assert_eq!(ledger.len(), 25);
    for j in 0..12 {
        // encoder block j (0-based) pairs with decoder block 24-j
        assert_eq!(ledger[j], ledger[24 - j], "pairing broken at {j}");
    }
}

#[test]
fn context_is_ignored_bit_exactly_when_text_is_off() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut config = small_config();
    config.use_text = false;
    let mut net = UsmNet::new(config, &mut rng).unwrap();
    // give the model a non-trivial function of its input
    net.params.out_proj.w = Tensor::randn(&[8, 2], 0.1, &mut rng).with_grad();
    let z = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
    let ctx = Tensor::randn(&[3, 16], 1.0, &mut rng);
    let with_ctx = net.forward_tensor(&z, 0.4, Some(&ctx)).unwrap();
    let without = net.forward_tensor(&z, 0.4, None).unwrap();
    assert!(with_ctx.bit_eq(&without));
}

#[test]
fn adaln_zero_map_makes_blocks_identity_and_neutral_modulation_is_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 6;
    let x = Tensor::randn(&[5, d], 1.0, &mut rng);
    let t_emb = Tensor::randn(&[1, d], 1.0, &mut rng);
    let zero = AdaLnParams {
        w: Tensor::zeros(&[d, 3 * d]),
        b: Tensor::zeros(&[3 * d]),
    };
    let mut g = Graph::inference();
    let xv = g.constant(&x);
    let tv = g.constant(&t_emb);
    let (x_mod, gate) = adaln_modulate(&mut g, xv, tv, &zero).unwrap();
    // zero map: scale = shift = gate = 0, so x_mod == LN(x) and residual dies
    assert!(g.data(gate).iter().all(|&v| v == 0.0));
    let ln = g.layer_norm(xv, LAYER_NORM_EPS).unwrap();
    assert_eq!(g.data(x_mod), g.data(ln));
}

#[test]
fn adaln_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 8;
    let x0 = Tensor::randn(&[4, d], 1.0, &mut rng);
    let t0 = Tensor::randn(&[1, d], 1.0, &mut rng);
    let params = AdaLnParams {
        w: Tensor::randn(&[d, 3 * d], 0.3, &mut rng).with_grad(),
        b: Tensor::randn(&[3 * d], 0.3, &mut rng),
    };

    let eval = |w: &Tensor| -> f64 {
        let p = AdaLnParams {
            w: w.clone(),
            b: params.b.clone(),
        };
        let mut g = Graph::inference();
        let xv = g.constant(&x0);
        let tv = g.constant(&t0);
        let (x_mod, gate) = adaln_modulate(&mut g, xv, tv, &p).unwrap();
        let gated = g.mul(x_mod, gate).unwrap();
        let s = g.sum_all(gated).unwrap();
        g.scalar_value(s).unwrap()
    };

    let mut g = Graph::new();
    let xv = g.constant(&x0);
    let tv = g.constant(&t0);
    let (x_mod, gate) = adaln_modulate(&mut g, xv, tv, &params).unwrap();
    let gated = g.mul(x_mod, gate).unwrap();
    let s = g.sum_all(gated).unwrap();
    let grads = g.backward(s).unwrap();
    let analytic = grads.get(&params.w).unwrap();
    let numeric = finite_diff_grad(&mut |t| Ok(eval(t)), &params.w, 1e-6).unwrap();
    assert!(max_rel_err(analytic, &numeric, 1e-9) < 1e-6);
}

#[test]
fn cross_attention_single_key_broadcasts_and_zero_output_projection_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (d, ctx_dim, heads, l) = (8usize, 5usize, 2usize, 4usize);
    let mut p = usm_core::net::CrossAttnParams {
        w_q: Tensor::randn(&[d, d], 0.3, &mut rng),
        w_k: Tensor::randn(&[ctx_dim, d], 0.3, &mut rng),
        w_v: Tensor::randn(&[ctx_dim, d], 0.3, &mut rng),
        w_o: Tensor::randn(&[d, d], 0.3, &mut rng),
    };
    let x = Tensor::randn(&[l, d], 1.0, &mut rng);
    let ctx1 = Tensor::randn(&[1, ctx_dim], 1.0, &mut rng);

    // M=1: softmax over one key is 1, so every row equals W_o (W_v ctx)
    let mut g = Graph::inference();
    let xv = g.constant(&x);
    let cv = g.constant(&ctx1);
    let out = cross_attention(&mut g, xv, cv, &p, heads).unwrap();
    let rows: Vec<&[f64]> = g.data(out).chunks(d).collect();
    for r in &rows[1..] {
        for (a, b) in r.iter().zip(rows[0].iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let wv_row = {
        let mut g2 = Graph::inference();
        let cv = g2.constant(&ctx1);
        let wvv = g2.constant(&p.w_v);
        let v = g2.matmul(cv, wvv).unwrap();
        let wov = g2.constant(&p.w_o);
        let o = g2.matmul(v, wov).unwrap();
        g2.tensor(o)
    };
    for (a, b) in rows[0].iter().zip(wv_row.data().iter()) {
        assert!((a - b).abs() < 1e-12);
    }

    // zero W_o kills the contribution entirely
    p.w_o = Tensor::zeros(&[d, d]);
    let mut g3 = Graph::inference();
    let xv = g3.constant(&x);
    let cv = g3.constant(&ctx1);
    let out = cross_attention(&mut g3, xv, cv, &p, heads).unwrap();
    assert!(g3.data(out).iter().all(|&v| v == 0.0));
}

#[test]
fn cross_attention_is_permutation_invariant_over_context_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (d, ctx_dim, heads, l, m) = (8usize, 5usize, 2usize, 4usize, 3usize);
    let p = usm_core::net::CrossAttnParams {
        w_q: Tensor::randn(&[d, d], 0.3, &mut rng),
        w_k: Tensor::randn(&[ctx_dim, d], 0.3, &mut rng),
        w_v: Tensor::randn(&[ctx_dim, d], 0.3, &mut rng),
        w_o: Tensor::randn(&[d, d], 0.3, &mut rng),
    };
    let x = Tensor::randn(&[l, d], 1.0, &mut rng);
    let ctx = Tensor::randn(&[m, ctx_dim], 1.0, &mut rng);
    let permuted = {
        let mut data = Vec::new();
        for &row in &[2usize, 0, 1] {
            data.extend_from_slice(&ctx.data()[row * ctx_dim..(row + 1) * ctx_dim]);
        }
        Tensor::new(vec![m, ctx_dim], data).unwrap()
    };
    let run = |ctx: &Tensor| {
        let mut g = Graph::inference();
        let xv = g.constant(&x);
        let cv = g.constant(ctx);
        let out = cross_attention(&mut g, xv, cv, &p, heads).unwrap();
        g.tensor(out)
    };
    let a = run(&ctx);
    let b = run(&permuted);
    assert!(a.sub(&b).unwrap().max_abs() < 1e-12);

    // M = 0 is rejected
    let empty = Tensor::zeros(&[0, ctx_dim]);
    let mut g = Graph::inference();
    let xv = g.constant(&x);
    let cv = g.constant(&empty);
    assert!(cross_attention(&mut g, xv, cv, &p, heads).is_err());
}

#[test]
fn main_block_matches_hand_composed_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 4;
    let config = small_config();
    let mut net = UsmNet::new(
        ModelConfig {
            hidden: d,
            ..config
        },
        &mut rng,
    )
    .unwrap();
    // randomize the first block's modulation so the test is not vacuous
    net.params.blocks[0].adaln.w = Tensor::randn(&[d, 3 * d], 0.4, &mut rng).with_grad();
    net.params.blocks[0].adaln.b = Tensor::randn(&[3 * d], 0.4, &mut rng).with_grad();

    let x = Tensor::randn(&[4, d], 1.0, &mut rng);
    let t_emb = Tensor::randn(&[1, d], 1.0, &mut rng);
    let path = generate_scan(0, 2, 2).unwrap();
    let bp = &net.params.blocks[0];

    let mut g = Graph::inference();
    let xv = g.constant(&x);
    let tv = g.constant(&t_emb);
    let composed = main_block(&mut g, xv, tv, None, bp, &path, 1).unwrap();

    let (x_mod, gate) = adaln_modulate(&mut g, xv, tv, &bp.adaln).unwrap();
    let f = mamba_block(&mut g, x_mod, &bp.mamba, &path).unwrap();
    let gated = g.mul(f, gate).unwrap();
    let by_hand = g.add(xv, gated).unwrap();

    assert_eq!(g.data(composed), g.data(by_hand));
}

#[test]
fn skip_fuse_block_identity_projections_and_hand_product() {
    let d = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dec = Tensor::randn(&[2, d], 1.0, &mut rng);
    let enc = Tensor::randn(&[2, d], 1.0, &mut rng);
    let zero_b = Tensor::zeros(&[d]);

    // W = [I | 0]^T layout: rows 0..d identity (dec part), rows d..2d zero
    let mut w_dec = vec![0.0; 2 * d * d];
    for i in 0..d {
        w_dec[i * d + i] = 1.0;
    }
    let w_dec = Tensor::new(vec![2 * d, d], w_dec).unwrap();
    let mut w_enc = vec![0.0; 2 * d * d];
    for i in 0..d {
        w_enc[(d + i) * d + i] = 1.0;
    }
    let w_enc = Tensor::new(vec![2 * d, d], w_enc).unwrap();

    let run = |w: &Tensor| {
        let mut g = Graph::inference();
        let dv = g.constant(&dec);
        let ev = g.constant(&enc);
        let out = skip_fuse(&mut g, dv, ev, w, &zero_b).unwrap();
        g.tensor(out)
    };
    assert!(run(&w_dec).bit_eq(&dec));
    assert!(run(&w_enc).bit_eq(&enc));

    // random W on L=2, D=2 against a hand matrix product
    let w = Tensor::randn(&[2 * d, d], 1.0, &mut rng);
    let out = run(&w);
    for r in 0..2 {
        let cat: Vec<f64> = dec.data()[r * d..(r + 1) * d]
            .iter()
            .chain(enc.data()[r * d..(r + 1) * d].iter())
            .cloned()
            .collect();
        for j in 0..d {
            let mut acc = 0.0;
            for (i, &cv) in cat.iter().enumerate() {
                acc += cv * w.data()[i * d + j];
            }
            assert!((out.data()[r * d + j] - acc).abs() < 1e-12);
        }
    }

    // mismatched lengths indicate a pairing bug
    let mut g = Graph::inference();
    let dv = g.constant(&dec);
    let bad = g.constant(&Tensor::zeros(&[3, d]));
    assert!(skip_fuse(&mut g, dv, bad, &w, &zero_b).is_err());
}

#[test]
fn timestep_embedding_is_deterministic_and_lipschitz_near_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let config = small_config();
    let net = UsmNet::new(config.clone(), &mut rng).unwrap();
    let embed = |t: f64| {
        let mut g = Graph::inference();
        let v = timestep_embed(&mut g, t, &net.params.t_embed, config.t_dim()).unwrap();
        g.tensor(v)
    };
    let a = embed(0.5);
    let b = embed(0.5);
    assert!(a.bit_eq(&b));
    let c = embed(0.5 + 1e-9);
    assert!(a.sub(&c).unwrap().max_abs() < 1e-6);
    // odd sinusoidal width is rejected
    assert!(timestep_features(0.3, 7).is_err());
}

#[test]
fn full_model_gradient_spot_check_against_finite_differences() {
    // h=w=8, D=8, N=4: randomize the normally-zero tensors so no path is
    // degenerate, then check a sample of coordinates in three parameter
    // groups end to end through forward + mse loss.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let config = ModelConfig {
        h: 8,
        w: 8,
        channels: 2,
        hidden: 8,
        state: 4,
        ..ModelConfig::default()
    };
    let mut net = UsmNet::new(config.clone(), &mut rng).unwrap();
    net.params.out_proj.w = Tensor::randn(&[8, 2], 0.2, &mut rng).with_grad();
    net.params.out_proj.b = Tensor::randn(&[2], 0.2, &mut rng).with_grad();
    for b in &mut net.params.blocks {
        b.adaln.w = Tensor::randn(&[8, 24], 0.2, &mut rng).with_grad();
        b.adaln.b = Tensor::randn(&[24], 0.2, &mut rng).with_grad();
    }
    let z = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
    let target = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
    let t = 0.37;

    let loss_fn = |net: &UsmNet| -> f64 {
        let mut g = Graph::inference();
        let zv = g.constant(&z);
        let out = net.forward(&mut g, zv, t, None).unwrap();
        let tv = g.constant(&target);
        let d = g.sub(out, tv).unwrap();
        let sq = g.mul(d, d).unwrap();
        let m = g.mean_all(sq).unwrap();
        g.scalar_value(m).unwrap()
    };

    let mut g = Graph::new();
    let zv = g.constant(&z);
    let out = net.forward(&mut g, zv, t, None).unwrap();
    let tv = g.constant(&target);
    let d = g.sub(out, tv).unwrap();
    let sq = g.mul(d, d).unwrap();
    let m = g.mean_all(sq).unwrap();
    let grads = g.backward(m).unwrap();

    // spot-check three groups: a mid-encoder w_in, a decoder skip, in_proj
    let check = |tensor: &Tensor, set: &dyn Fn(&mut UsmNet, Tensor), coords: &[usize]| {
        let analytic = grads.get(tensor).expect("missing grad");
        let base = tensor.data().to_vec();
        for &i in coords {
            let eps = 1e-5;
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let mut net_p = net.clone();
            set(&mut net_p, Tensor::new(tensor.shape().to_vec(), plus).unwrap());
            let fp = loss_fn(&net_p);
            let mut net_m = net.clone();
            set(&mut net_m, Tensor::new(tensor.shape().to_vec(), minus).unwrap());
            let fm = loss_fn(&net_m);
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                ((a - numeric) / denom).abs() < 1e-4,
                "coord {i}: analytic {a:e} vs numeric {numeric:e}"
            );
        }
    };

    let w_in5 = net.params.blocks[5].mamba.w_in.clone();
    check(
        &w_in5,
        &|n, t| n.params.blocks[5].mamba.w_in = t,
        &[0, 3, 17, 63, 100],
    );
    let skip3 = net.params.skips[3].w.clone();
    check(&skip3, &|n, t| n.params.skips[3].w = t, &[0, 9, 31, 64, 120]);
    let in_w = net.params.in_proj.w.clone();
    check(&in_w, &|n, t| n.params.in_proj.w = t, &[0, 5, 11, 15]);
}
