//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usm_harness::checkpoint;
use usm_harness::config::{run_config_from_text, RunConfig};
use usm_harness::error::{HarnessError, Result};
use usm_harness::flops::flops_count;
use usm_harness::image::{emit_image, emit_montage};
use usm_harness::metrics::eval_moments;
use usm_harness::profile::{profile_pair, report_csv};
use usm_harness::runner::{reference_set, sample_many, train_model};

#[derive(Parser)]
#[command(
    name = "usm",
    version,
    about = "U-shaped selective-scan diffusion: train, sample, profile"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed for all derived random streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run-config file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on the configured synthetic dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override train.steps from the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Override train.batch.
        #[arg(long)]
        batch: Option<usize>,
        /// Override train.lr.
        #[arg(long)]
        lr: Option<f64>,
        /// Override train.optimizer (adam|sgd).
        #[arg(long)]
        optimizer: Option<String>,
        /// Disable the encoder-to-decoder skip connections.
        #[arg(long)]
        no_skips: bool,
    },
    /// Sample from a trained checkpoint and emit images plus a tensor dump.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load (defaults to OUT/model.usmc).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Number of samples.
        #[arg(long)]
        count: Option<usize>,
        /// Euler steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Class id for the learned context table.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Analytic cost report and wall-clock comparison against the flat
    /// reference.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Timed repetitions per model.
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// Finite-difference gradient verification on a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates sampled per parameter group.
        #[arg(long, default_value_t = 24)]
        coords: usize,
    },
    /// Print one scan permutation, one index per line.
    ScanDump {
        /// Scan configuration id in 0..8.
        #[arg(long = "config")]
        config_id: usize,
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        /// Write to OUT/scan_<id>_<h>x<w>.txt instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Moment distance between a sample dump and fresh reference draws.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Sample dump produced by `usm sample`.
        #[arg(long)]
        generated: PathBuf,
        /// Reference draw count.
        #[arg(long, default_value_t = 4096)]
        ref_n: usize,
    },
}

fn load_run_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        None => Ok(RunConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
            run_config_from_text(&text)
        }
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train {
            common,
            steps,
            batch,
            lr,
            optimizer,
            no_skips,
        } => {
            let mut rc = load_run_config(&common)?;
            if let Some(s) = steps {
                rc.train.steps = s;
            }
            if let Some(b) = batch {
                rc.train.batch = b;
            }
            if let Some(l) = lr {
                rc.train.lr = l;
            }
            if let Some(o) = optimizer {
                if o != "adam" && o != "sgd" {
                    return Err(HarnessError::Usage(format!(
                        "--optimizer must be adam or sgd, got {o}"
                    )));
                }
                rc.train.optimizer = o;
            }
            if no_skips {
                rc.model.use_skips = false;
            }
            ensure_out(&common.out)?;
            let cfg_dump = common.out.join("config.txt");
            fs::write(&cfg_dump, usm_harness::config::run_config_to_text(&rc))
                .map_err(HarnessError::io(&cfg_dump))?;
            let metrics = common.out.join("metrics.csv");
            let outcome = train_model(&rc, common.seed, Some(&metrics))?;
            let ckpt = common.out.join("model.usmc");
            checkpoint::save_net(&ckpt, &outcome.net)?;
            let last = outcome.rows.last();
            println!(
                "trained {} steps; final loss {:.6}; checkpoint {}",
                outcome.rows.len(),
                last.map(|r| r.loss).unwrap_or(f64::NAN),
                ckpt.display()
            );
            Ok(())
        }
        Cmd::Sample {
            common,
            ckpt,
            count,
            steps,
            class,
        } => {
            let rc = load_run_config(&common)?;
            ensure_out(&common.out)?;
            let ckpt = ckpt.unwrap_or_else(|| common.out.join("model.usmc"));
            let net = checkpoint::load_net(&ckpt)?;
            let count = count.unwrap_or(rc.sample.count);
            let steps = steps.unwrap_or(rc.sample.steps);
            let samples = sample_many(&net, count, steps, common.seed, class)?;
            let dump = common.out.join("samples.usmc");
            checkpoint::save_samples(
                &dump,
                &usm_harness::config::run_config_to_text(&rc),
                &samples,
            )?;
            let montage = common.out.join("samples.pgm");
            emit_montage(&samples, &montage)?;
            let first = usm_harness::dataset::SyntheticDataset::item(&samples, 0)?;
            emit_image(&first, &common.out.join("sample0.pgm"))?;
            println!(
                "sampled {count} items with {steps} steps -> {} and {}",
                dump.display(),
                montage.display()
            );
            Ok(())
        }
        Cmd::Profile { common, reps } => {
            let rc = load_run_config(&common)?;
            ensure_out(&common.out)?;
            let report = flops_count(&rc.model);
            println!(
                "analytic: {} MACs hierarchical vs {} flat; ratio {:.6}; seq block-cost ratio {:.6}",
                report.total_macs,
                report.flat_total_macs,
                report.total_ratio_vs_flat(),
                report.seq_block_cost_ratio()
            );
            println!(
                "skip projections: {} MACs; peak activation estimate: {} elements",
                report.skip_macs, report.peak_activation_elems
            );
            let (usm, flat) = profile_pair(&rc.model, reps, common.seed)?;
            println!(
                "measured: usm {:.3} +- {:.3} ms vs flat {:.3} +- {:.3} ms per forward (batch 1)",
                usm.mean_ms, usm.std_ms, flat.mean_ms, flat.std_ms
            );
            println!("peak live elements: usm {}", usm.peak_live_elements);
            let csv_path = common.out.join("profile.csv");
            fs::write(&csv_path, report_csv(&usm)).map_err(HarnessError::io(&csv_path))?;
            let flat_path = common.out.join("profile_flat.csv");
            fs::write(&flat_path, report_csv(&flat)).map_err(HarnessError::io(&flat_path))?;
            Ok(())
        }
        Cmd::Gradcheck { common, coords } => {
            let report = gradcheck(common.seed, coords)?;
            for (group, err) in &report {
                println!("{group}: max rel err {err:.3e}");
            }
            let worst = report.iter().map(|(_, e)| *e).fold(0.0f64, f64::max);
            if worst >= 1e-4 {
                return Err(HarnessError::Core(usm_core::Error::NonFinite {
                    op: "gradcheck exceeded tolerance",
                }));
            }
            println!("gradcheck passed: worst {worst:.3e} < 1e-4");
            Ok(())
        }
        Cmd::ScanDump {
            config_id,
            h,
            w,
            out,
            seed: _,
        } => {
            let path = usm_core::scan::generate_scan(config_id, h, w)
                .map_err(|e| HarnessError::Usage(e.to_string()))?;
            let mut text = String::new();
            for &p in path.perm() {
                text.push_str(&p.to_string());
                text.push('\n');
            }
            match out {
                None => print!("{text}"),
                Some(dir) => {
                    ensure_out(&dir)?;
                    let f = dir.join(format!("scan_{config_id}_{h}x{w}.txt"));
                    fs::write(&f, text).map_err(HarnessError::io(&f))?;
                    println!("wrote {}", f.display());
                }
            }
            Ok(())
        }
        Cmd::Eval {
            common,
            generated,
            ref_n,
        } => {
            let rc = load_run_config(&common)?;
            let (_, samples) = checkpoint::load_samples(&generated)?;
            let reference = reference_set(&rc.data, ref_n, common.seed)?;
            let d = eval_moments(&samples, &reference)?;
            println!("moment distance: {d:.6}");
            Ok(())
        }
    }
}

/// Gradient check over an end-to-end model: sampled coordinates per logical
/// parameter group, forward + mse loss, backward vs central differences.
fn gradcheck(seed: u64, coords_per_group: usize) -> Result<Vec<(String, f64)>> {
    use usm_core::graph::Graph;
    use usm_core::net::{ModelConfig, UsmNet};
    use usm_core::tensor::Tensor;

    let config = ModelConfig {
        h: 8,
        w: 8,
        channels: 2,
        hidden: 8,
        state: 4,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = UsmNet::new(config.clone(), &mut rng)?;
    // randomize the tensors that start at zero so no path is degenerate
    net.params.out_proj.w = Tensor::randn(&[8, 2], 0.2, &mut rng).with_grad();
    net.params.out_proj.b = Tensor::randn(&[2], 0.2, &mut rng).with_grad();
    for b in &mut net.params.blocks {
        b.adaln.w = Tensor::randn(&[8, 24], 0.2, &mut rng).with_grad();
        b.adaln.b = Tensor::randn(&[24], 0.2, &mut rng).with_grad();
    }
    let z = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
    let target = Tensor::randn(&[2, 8, 8], 1.0, &mut rng);
    let t = 0.45;

    let loss_of = |net: &UsmNet| -> Result<f64> {
        let mut g = Graph::inference();
        let zv = g.constant(&z);
        let out = net.forward(&mut g, zv, t, None)?;
        let tv = g.constant(&target);
        let d = g.sub(out, tv)?;
        let sq = g.mul(d, d)?;
        let m = g.mean_all(sq)?;
        Ok(g.scalar_value(m)?)
    };

    let mut g = Graph::new();
    let zv = g.constant(&z);
    let out = net.forward(&mut g, zv, t, None)?;
    let tv = g.constant(&target);
    let dv = g.sub(out, tv)?;
    let sq = g.mul(dv, dv)?;
    let m = g.mean_all(sq)?;
    let grads = g.backward(m)?;

    let mut named: Vec<(String, Tensor)> = Vec::new();
    net.params.for_each_param(&mut |name, t| named.push((name, t.clone())));

    let group_of = |name: &str| -> String {
        match name.split('.').next().unwrap_or(name) {
            s if s.starts_with("block") => {
                let rest = name.splitn(2, '.').nth(1).unwrap_or("");
                format!("blocks.{}", rest.split('.').next().unwrap_or(rest))
            }
            s if s.starts_with("down") => "down".into(),
            s if s.starts_with("up") => "up".into(),
            s if s.starts_with("skip") => "skips".into(),
            s => s.to_string(),
        }
    };

    let mut groups: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
    for (i, (name, _)) in named.iter().enumerate() {
        groups.entry(group_of(name)).or_default().push(i);
    }

    let eps = 1e-5;
    let mut report = Vec::new();
    for (group, members) in groups {
        let mut worst = 0.0f64;
        let mut coord_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        for k in 0..coords_per_group {
            use rand::Rng;
            let (name, tensor) = &named[members[k % members.len()]];
            let i = coord_rng.gen_range(0..tensor.len());
            let analytic = grads
                .get(tensor)
                .map(|gt| gt.data()[i])
                .unwrap_or(0.0);
            let probe = |delta: f64| -> Result<f64> {
                let mut data = tensor.data().to_vec();
                data[i] += delta;
                let mut replaced = net.clone();
                let patched = Tensor::new(tensor.shape().to_vec(), data)?;
                let mut hit = false;
                replaced.params.for_each_param_mut(&mut |n, t| {
                    if n == *name {
                        *t = patched.clone();
                        hit = true;
                    }
                });
                debug_assert!(hit);
                loss_of(&replaced)
            };
            let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs());
            let diff = (analytic - numeric).abs();
            if diff > 1e-8 {
                worst = worst.max(diff / denom.max(1e-8));
            }
        }
        report.push((group, worst));
    }
    Ok(report)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are success, anything else is a usage error
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
