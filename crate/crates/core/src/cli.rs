//! The `refconv` command: one subcommand per pipeline stage or analysis.
//! Each run writes a self-contained output directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis::{connection_degree, delta_weights, kl_redundancy, loss_landscape, skeleton_magnitude};
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::data::{subset, Dataset};
use crate::error::{Error, Result};
use crate::models::{build_zoo, Layer, Network};
use crate::refconv::cost_report;
use crate::tensor::{ConvSpec, Tensor4};
use crate::training::{evaluate_with, finetune_arm, pretrain, refocus_train, retrain_arm, Precision, TrainLog};

#[derive(Parser, Debug)]
#[command(name = "refconv", version, about = "Refocusing convolution: train, merge and analyze small CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct FromCheckpoint {
    #[command(flatten)]
    pub run: RunArgs,
    /// Input checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a fresh baseline model.
    Pretrain(RunArgs),
    /// Replace spatial convs by refocusing layers and train with the basis frozen.
    Refocus(FromCheckpoint),
    /// Train the baseline a second time with the same schedule.
    Retrain(FromCheckpoint),
    /// Train the baseline with a constant learning rate of 1e-4.
    Finetune(FromCheckpoint),
    /// Fold refocusing layers into plain convs.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss and top-1 accuracy on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write `metrics.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Kernel and landscape diagnostics.
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// MAC and parameter counts of a conv and its refocusing transform.
    Cost(CostArgs),
}

#[derive(Args, Debug, Clone)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Only this layer.
    #[arg(long)]
    pub layer: Option<String>,
    /// Matrix order (first N kernel channels).
    #[arg(long)]
    pub channels: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeKind {
    /// Summed |W_r| between basis and transformed channels (depthwise layers).
    Connection(AnalyzeArgs),
    /// Pairwise KL redundancy of kernel channels, for W_b and W_t.
    Kl(AnalyzeArgs),
    /// Max-normalized average kernel magnitude per position.
    Skeleton(AnalyzeArgs),
    /// Filter-normalized 2-D loss slice.
    Landscape {
        #[command(flatten)]
        args: AnalyzeArgs,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        span: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct CostArgs {
    #[arg(long, default_value_t = 512)]
    pub c_in: usize,
    #[arg(long, default_value_t = 512)]
    pub c_out: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 512)]
    pub groups: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: u64,
    #[arg(long, default_value_t = 28)]
    pub height: u64,
    #[arg(long, default_value_t = 28)]
    pub width: u64,
    #[arg(long, default_value_t = 3)]
    pub map_kernel: u64,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved.toml"), cfg.to_toml()?)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finish(out: &Path, cfg: &RunConfig, net: &Network<f32>, stage: Stage, log: &TrainLog, test: &Dataset, train: &Dataset, source: Option<&Path>) -> Result<()> {
    log.write_csv(&out.join("train_log.csv"))?;
    let (loss, acc) = evaluate_with(net, test, &train.stats)?;
    let mut ck = Checkpoint::new(net, stage, cfg.train.precision, cfg.train.seed)?
        .with_metadata("test_loss", loss)?
        .with_metadata("test_acc", acc)?
        .with_metadata("train_fingerprint", train.fingerprint())?;
    if let Some(src) = source {
        ck = ck.with_metadata("source", src.display().to_string())?;
    }
    ck.save(&out.join("checkpoint"))?;
    write_json(&out.join("metrics.json"), &json!({ "stage": stage.as_str(), "test_loss": loss, "test_acc": acc, "epochs": log.records.len() }))?;
    println!("{}: test loss {loss:.5}, top-1 {:.2}%  -> {}", stage.as_str(), acc * 100.0, out.display());
    Ok(())
}

/// Runs `f` in the configured precision and brings the result back to f32.
fn in_precision<F32, F64>(precision: Precision, f32_run: F32, f64_run: F64) -> Result<(Network<f32>, TrainLog)>
where
    F32: FnOnce() -> Result<(Network<f32>, TrainLog)>,
    F64: FnOnce() -> Result<(Network<f64>, TrainLog)>,
{
    match precision {
        Precision::F32 => f32_run(),
        Precision::F64 => {
            let (net, log) = f64_run()?;
            Ok((net.cast::<f32>()?, log))
        }
    }
}

fn load_stage(dir: &Path, allowed: &[Stage]) -> Result<Checkpoint> {
    let ck = Checkpoint::load(dir)?;
    ck.stage().require(allowed)?;
    Ok(ck)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => {
            let cfg = load_config(a.config.as_deref(), a.seed)?;
            prepare_out(&a.out, &cfg)?;
            let (train, test) = cfg.data.load()?;
            let graph = build_zoo(&cfg.model)?;
            let (net, log) = in_precision(
                cfg.train.precision,
                || pretrain::<f32>(graph.clone(), &train, Some(&test), &cfg.train),
                || pretrain::<f64>(graph.clone(), &train, Some(&test), &cfg.train),
            )?;
            finish(&a.out, &cfg, &net, Stage::Baseline, &log, &test, &train, None)
        }
        Command::Refocus(a) => {
            let cfg = load_config(a.run.config.as_deref(), a.run.seed)?;
            let base = load_stage(&a.checkpoint, &[Stage::Baseline])?;
            prepare_out(&a.run.out, &cfg)?;
            let (train, test) = cfg.data.load()?;
            let (net, log) = in_precision(
                cfg.train.precision,
                || refocus_train(&base.network, &train, Some(&test), &cfg.train, &cfg.surgery),
                || refocus_train(&base.network.cast::<f64>()?, &train, Some(&test), &cfg.train, &cfg.surgery),
            )?;
            finish(&a.run.out, &cfg, &net, Stage::Refconv, &log, &test, &train, Some(&a.checkpoint))
        }
        Command::Retrain(a) => comparison_arm(a, false),
        Command::Finetune(a) => comparison_arm(a, true),
        Command::Merge { checkpoint, out } => {
            let ck = load_stage(&checkpoint, &[Stage::Refconv])?;
            let merged = ck.network.merged()?;
            let mut m = Checkpoint::new(&merged, Stage::Merged, ck.manifest.precision, ck.manifest.seed)?
                .with_metadata("source", checkpoint.display().to_string())?;
            for key in ["train_fingerprint"] {
                if let Some(v) = ck.manifest.metadata.get(key) {
                    m = m.with_metadata(key, v)?;
                }
            }
            m.save(&out)?;
            println!("merged {} refocusing layers -> {}", ck.network.refconv_names().len(), out.display());
            Ok(())
        }
        Command::Eval { checkpoint, config, out } => {
            let cfg = load_config(config.as_deref(), None)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let (train, test) = cfg.data.load()?;
            let (loss, acc) = evaluate_with(&ck.network, &test, &train.stats)?;
            println!("{} ({}): test loss {loss:.6}, top-1 {:.2}%", ck.manifest.model_id, ck.stage().as_str(), acc * 100.0);
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                write_json(
                    &out.join("metrics.json"),
                    &json!({ "checkpoint": checkpoint.display().to_string(), "stage": ck.stage().as_str(), "test_loss": loss, "test_acc": acc }),
                )?;
            }
            Ok(())
        }
        Command::Analyze { kind } => analyze(kind),
        Command::Cost(c) => {
            let spec = ConvSpec::new(c.c_in, c.c_out, c.kernel, c.stride, c.kernel / 2, c.groups)?;
            let r = cost_report(&spec, c.batch, c.height, c.width, c.map_kernel)?;
            if c.json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                println!("flops_original  {:>16}  ({:.0}M MACs)", r.flops_original, r.flops_original as f64 / 1e6);
                println!("flops_refocus   {:>16}  ({:.0}M MACs)", r.flops_refocus, r.flops_refocus as f64 / 1e6);
                println!("params_original {:>16}", r.params_original);
                println!("params_refocus  {:>16}", r.params_refocus);
            }
            Ok(())
        }
    }
}

fn comparison_arm(a: FromCheckpoint, finetune: bool) -> Result<()> {
    let cfg = load_config(a.run.config.as_deref(), a.run.seed)?;
    let base = load_stage(&a.checkpoint, &[Stage::Baseline])?;
    prepare_out(&a.run.out, &cfg)?;
    let (train, test) = cfg.data.load()?;
    let arm32 = if finetune { finetune_arm::<f32> } else { retrain_arm::<f32> };
    let arm64 = if finetune { finetune_arm::<f64> } else { retrain_arm::<f64> };
    let (net, log) = in_precision(
        cfg.train.precision,
        || arm32(&base.network, &train, Some(&test), &cfg.train),
        || arm64(&base.network.cast::<f64>()?, &train, Some(&test), &cfg.train),
    )?;
    finish(&a.run.out, &cfg, &net, Stage::Baseline, &log, &test, &train, Some(&a.checkpoint))
}

fn analyze(kind: AnalyzeKind) -> Result<()> {
    let (args, extra) = match kind {
        AnalyzeKind::Connection(a) => (a, Analysis::Connection),
        AnalyzeKind::Kl(a) => (a, Analysis::Kl),
        AnalyzeKind::Skeleton(a) => (a, Analysis::Skeleton),
        AnalyzeKind::Landscape { args, resolution, span, seed } => (args, Analysis::Landscape { resolution, span, seed }),
    };
    let mut cfg = load_config(args.config.as_deref(), None)?;
    if let Some(c) = args.channels {
        cfg.analysis.channels = c;
    }
    if let Some(l) = &args.layer {
        cfg.analysis.layer = l.clone();
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    prepare_out(&args.out, &cfg)?;
    let net = &ck.network;
    let wanted = |name: &str| cfg.analysis.layer.is_empty() || cfg.analysis.layer == name;
    if !cfg.analysis.layer.is_empty() && net.layer_index(&cfg.analysis.layer).is_none() {
        return Err(Error::InvalidArgument(format!("no layer named `{}`", cfg.analysis.layer)));
    }
    let mut summary = serde_json::Map::new();
    match extra {
        Analysis::Connection => {
            ck.stage().require(&[Stage::Refconv])?;
            for name in net.refconv_names().into_iter().filter(|n| wanted(n)) {
                let layer = net.refconv(&name).expect("listed refconv");
                if layer.refocus.map_groups != 1 {
                    summary.insert(name.clone(), json!({ "skipped": format!("map conv has {} groups", layer.refocus.map_groups) }));
                    continue;
                }
                let n = cfg.analysis.channels.min(layer.refocus.weights.dims()[0]);
                let m = connection_degree(layer, n)?.with_layer(&name);
                m.write(&args.out, &format!("{name}.connection"))?;
                summary.insert(name, json!({ "order": n, "diagonal_mean": (0..n).map(|i| m.get(i, i)).sum::<f64>() / n as f64, "mean_offdiag": m.mean_offdiag() }));
            }
        }
        Analysis::Kl => {
            for (name, w_b, w_t) in kernels(net)?.into_iter().filter(|(n, _, _)| wanted(n)) {
                let n = cfg.analysis.channels.min(w_t.dims()[0] * w_t.dims()[1]);
                let mt = kl_redundancy(&w_t, n)?.with_layer(&name);
                mt.write(&args.out, &format!("{name}.kl_wt"))?;
                mt.transpose().write(&args.out, &format!("{name}.kl_wt_transposed"))?;
                let mut entry = json!({ "order": n, "mean_offdiag_wt": mt.mean_offdiag() });
                if let Some(w_b) = w_b {
                    let mb = kl_redundancy(&w_b, n)?.with_layer(&name);
                    mb.write(&args.out, &format!("{name}.kl_wb"))?;
                    mb.transpose().write(&args.out, &format!("{name}.kl_wb_transposed"))?;
                    entry["mean_offdiag_wb"] = json!(mb.mean_offdiag());
                }
                summary.insert(name, entry);
            }
        }
        Analysis::Skeleton => {
            for (name, w_b, w_t) in kernels(net)?.into_iter().filter(|(n, _, _)| wanted(n)) {
                skeleton_magnitude(&w_t)?.with_layer(&name).write(&args.out, &format!("{name}.skeleton_wt"))?;
                let mut entry = json!({ "kernel": w_t.dims()[2] });
                if let Some(w_b) = w_b {
                    skeleton_magnitude(&w_b)?.with_layer(&name).write(&args.out, &format!("{name}.skeleton_wb"))?;
                    match skeleton_magnitude(&delta_weights(&w_t, &w_b)?) {
                        Ok(m) => m.with_layer(&name).write(&args.out, &format!("{name}.skeleton_delta"))?,
                        Err(_) => entry["delta"] = json!("all zero"),
                    }
                }
                summary.insert(name, entry);
            }
        }
        Analysis::Landscape { resolution, span, seed } => {
            let mut opts = cfg.analysis.landscape.clone();
            opts.resolution = resolution.unwrap_or(opts.resolution);
            opts.span = span.unwrap_or(opts.span);
            opts.seed = seed.unwrap_or(opts.seed);
            let (train, _) = cfg.data.load()?;
            let probe = landscape_subset(&train, opts.samples, opts.seed)?;
            let grid = loss_landscape(net, &probe, &train.stats, &opts)?;
            grid.write(&args.out, "landscape")?;
            summary.insert("landscape".into(), json!({ "center_loss": grid.center(), "samples": probe.len() }));
        }
    }
    write_json(&args.out.join("summary.json"), &serde_json::Value::Object(summary))?;
    println!("analysis written to {}", args.out.display());
    Ok(())
}

enum Analysis {
    Connection,
    Kl,
    Skeleton,
    Landscape { resolution: Option<usize>, span: Option<f64>, seed: Option<u64> },
}

/// `(layer, W_b, W_t)` for every spatial conv; `W_b` only for refocusing layers.
type KernelTriple = (String, Option<Tensor4<f32>>, Tensor4<f32>);

fn kernels(net: &Network<f32>) -> Result<Vec<KernelTriple>> {
    let mut out = Vec::new();
    for (d, layer) in net.graph().layers.iter().zip(net.layers()) {
        match layer {
            Layer::RefConv(rc) => out.push((d.name.clone(), Some(rc.basis.weights.clone()), rc.transform()?)),
            Layer::Conv { weight, .. } if weight.dims()[2] >= 2 => out.push((d.name.clone(), None, weight.clone())),
            _ => {}
        }
    }
    Ok(out)
}

/// A stratified sample of about `samples` training images, capped at `samples`.
pub fn landscape_subset(train: &Dataset, samples: usize, seed: u64) -> Result<Dataset> {
    if samples >= train.len() {
        return Ok(train.clone());
    }
    let picked = subset(train, samples as f64 / train.len() as f64, seed)?;
    let n = picked.len().min(samples);
    Ok(picked.select(&(0..n).collect::<Vec<_>>()))
}
