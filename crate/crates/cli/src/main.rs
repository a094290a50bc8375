//! `fsctx`: generate synthetic episodes, train mimic models, evaluate and
//! sweep classifiers.
//!
//! Every subcommand reads an optional TOML config (`--config`), applies
//! its own flags and then any `--set key=value` overrides, and writes its
//! outputs under `<run.out_dir>/<timestamp>-seed<seed>/`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fsctx_core::checkpoint::{save_mimic, Checkpoint};
use fsctx_core::config::RunConfig;
use fsctx_core::encoder::EncoderShape;
use fsctx_core::episode::{parse_episode_file, write_episode_file, Dataset};
use fsctx_core::eval::{
    aggregate, mimic_fidelity, robustness_sweep, sweep_markdown, write_csv, write_markdown, write_sweep_csv,
    Evaluator, Method, MethodSpec,
};
use fsctx_core::mimic::MimicMode;
use fsctx_core::normalize::Normalization;
use fsctx_core::synthetic::generate_dataset;
use fsctx_core::train::{curve_ends, gradcheck_encoder, gradcheck_mimic, train_encoder, train_mimic, CurvePoint};
use fsctx_core::MimicConfig;

#[derive(Parser, Debug)]
#[command(name = "fsctx", version, about = "Support-set context experiments on episodic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set train.batch_size=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Parent directory for the run directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Write outputs to exactly this directory instead of a timestamped one.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the raw-input corpus for encoder training.
        #[arg(long)]
        raw: bool,
    },
    /// Train a mimic model (or the contrastive encoder) on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Episode file.
        #[arg(long)]
        data: Option<PathBuf>,
        /// prototype_mimic or svm_mimic.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train the encoder instead; `--data` must hold raw inputs.
        #[arg(long)]
        encoder: bool,
    },
    /// Evaluate methods on dataset splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Episode files; several files are treated as seeded repeats.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Methods to run (knn, prototype, svm, prototype_mimic, svm_mimic).
        #[arg(long, num_args = 1..)]
        method: Vec<String>,
        #[arg(long, num_args = 1..)]
        normalization: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        split: Vec<String>,
        /// Every simple classifier under every normalization.
        #[arg(long)]
        ablation: bool,
    },
    /// Accuracy as supports shrink or labels get flipped.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// support_count or label_noise.
        #[arg(long)]
        axis: Option<String>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        levels: Vec<usize>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        probes: usize,
        #[arg(long, default_value_t = 3)]
        configs: u64,
    },
}

fn load_config(common: &Common, flags: Vec<String>) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut all = flags;
    all.extend(common.set.iter().cloned());
    let mut cfg = base.with_overrides(&all)?;
    if let Some(d) = &common.out_dir {
        cfg.run.out_dir = d.clone();
    }
    Ok(cfg)
}

fn quoted(key: &str, v: &Path) -> String {
    format!("{key}={:?}", v.to_string_lossy())
}

fn run_dir(common: &Common, cfg: &RunConfig, seed: u64) -> Result<PathBuf> {
    let dir = match &common.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            cfg.run.out_dir.join(format!("{stamp}-seed{seed}"))
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(dir)
}

fn dataset_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.run
        .data
        .as_deref()
        .context("no dataset: pass --data or set run.data")
}

fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

fn generate(common: Common, seed: Option<u64>, raw: bool) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(s) = seed {
        flags.push(format!("dataset.seed={s}"));
    }
    let cfg = load_config(&common, flags)?;
    let dir = run_dir(&common, &cfg, cfg.dataset.seed)?;
    let g = generate_dataset(&cfg.dataset, raw)?;
    write_episode_file(dir.join("episodes.jsonl"), &g.dataset)?;
    if let Some(r) = &g.raw {
        write_episode_file(dir.join("raw.jsonl"), r)?;
    }
    let mut md = String::from("| split | episodes |\n|---|---|\n");
    for s in g.dataset.split_names() {
        md.push_str(&format!("| {s} | {} |\n", g.dataset.split(&s).count()));
    }
    fs::write(dir.join("summary.md"), md)?;
    println!("{}", dir.display());
    Ok(())
}

fn train(common: Common, data: Option<PathBuf>, mode: Option<String>, steps: Option<usize>, seed: Option<u64>, encoder: bool) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(d) = &data {
        flags.push(quoted("run.data", d));
    }
    if let Some(m) = mode {
        flags.push(format!("model.mode={m:?}"));
    }
    if let Some(s) = steps {
        flags.push(format!("train.total_steps={s}"));
    }
    if let Some(s) = seed {
        flags.push(format!("train.seed={s}"));
    }
    let cfg = load_config(&common, flags)?;
    let ds = parse_episode_file(dataset_path(&cfg)?)?;
    let dir = run_dir(&common, &cfg, cfg.train.seed)?;
    if encoder {
        let e = &cfg.encoder;
        let run = train_encoder(&ds, e.hidden, e.out_dim, e.tau, &cfg.train)?;
        Checkpoint::from(&run.params).save(dir.join("encoder.ckpt"))?;
        write_curve(&dir.join("loss_curve.csv"), &run.curve)?;
        summarize_curve(&dir, &run.curve, &[])?;
    } else {
        let mc = MimicConfig {
            token_dim: ds.dim,
            ..cfg.model
        };
        let run = train_mimic(&ds, mc, &cfg.train, &cfg.method.svm)?;
        save_mimic(&run.model, dir.join("model.ckpt"))?;
        write_curve(&dir.join("loss_curve.csv"), &run.curve)?;
        let mut extra = vec![format!("skipped train episodes: {}", run.skipped.len())];
        if mc.mode == MimicMode::SvmMimic && ds.split("test").next().is_some() {
            let fid = mimic_fidelity(&run.model, &ds, "test", &cfg.method.svm)?;
            extra.push(format!("test fidelity (mean cosine to teacher): {fid:.4}"));
        }
        summarize_curve(&dir, &run.curve, &extra)?;
    }
    println!("{}", dir.display());
    Ok(())
}

fn summarize_curve(dir: &Path, curve: &[CurvePoint], extra: &[String]) -> Result<()> {
    let mut md = format!("steps: {}\n\n", curve.len());
    if let Some((first, last)) = curve_ends(curve, 0.1) {
        md.push_str(&format!("loss, first 10%: {first:.5}\n\nloss, last 10%: {last:.5}\n\n"));
    }
    for line in extra {
        md.push_str(line);
        md.push_str("\n\n");
    }
    fs::write(dir.join("summary.md"), md)?;
    Ok(())
}

fn eval(
    common: Common,
    data: Vec<PathBuf>,
    methods: Vec<String>,
    norms: Vec<String>,
    checkpoint: Option<PathBuf>,
    splits: Vec<String>,
    ablation: bool,
) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(c) = &checkpoint {
        flags.push(quoted("method.checkpoint", c));
    }
    if !splits.is_empty() {
        let list: Vec<String> = splits.iter().map(|s| format!("{s:?}")).collect();
        flags.push(format!("run.splits=[{}]", list.join(",")));
    }
    let cfg = load_config(&common, flags)?;
    let files: Vec<PathBuf> = if data.is_empty() {
        vec![dataset_path(&cfg)?.to_path_buf()]
    } else {
        data
    };
    let methods: Vec<Method> = if ablation {
        vec![Method::Knn, Method::Prototype, Method::Svm]
    } else if methods.is_empty() {
        vec![cfg.method.method]
    } else {
        methods.iter().map(|m| Method::parse(m)).collect::<Result<_, _>>()?
    };
    let norms: Vec<Normalization> = if ablation {
        Normalization::ALL.to_vec()
    } else if norms.is_empty() {
        vec![cfg.method.normalization]
    } else {
        norms.iter().map(|n| Normalization::parse(n)).collect::<Result<_, _>>()?
    };
    let dir = run_dir(&common, &cfg, cfg.run.seeds.first().copied().unwrap_or(0))?;
    let datasets: Vec<Dataset> = files
        .iter()
        .map(|f| parse_episode_file(f).with_context(|| format!("reading {}", f.display())))
        .collect::<Result<_>>()?;
    let mut reports = Vec::new();
    for &m in &methods {
        for &n in &norms {
            let spec = MethodSpec {
                method: m,
                normalization: n,
                ..cfg.method.clone()
            };
            for ds in &datasets {
                let ev = Evaluator::new(spec.clone(), ds)?;
                for split in &cfg.run.splits {
                    if ds.split(split).next().is_none() {
                        bail!("dataset has no `{split}` split");
                    }
                    let r = ev.evaluate(ds, split)?;
                    log::info!("{m} {n} {split}: {:.4} ({} skipped)", r.accuracy, r.skipped.len());
                    reports.push(r);
                }
            }
        }
    }
    let rows = aggregate(&reports);
    write_csv(&rows, dir.join("report.csv"))?;
    write_markdown(&rows, dir.join("report.md"))?;
    let mut w = csv::Writer::from_path(dir.join("episodes.csv"))?;
    w.write_record(["method", "normalization", "split", "episode", "correct", "queries"])?;
    for r in &reports {
        for e in &r.episodes {
            w.write_record([
                r.method.name(),
                r.normalization.name(),
                &r.split,
                &e.id,
                &e.correct.to_string(),
                &e.queries.to_string(),
            ])?;
        }
    }
    w.flush()?;
    print!("{}", fsctx_core::eval::markdown_table(&rows));
    println!("{}", dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    common: Common,
    data: Option<PathBuf>,
    axis: Option<String>,
    levels: Vec<usize>,
    method: Option<String>,
    checkpoint: Option<PathBuf>,
    split: Option<String>,
    seed: Option<u64>,
) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(d) = &data {
        flags.push(quoted("run.data", d));
    }
    if let Some(a) = axis {
        flags.push(format!("sweep.axis={a:?}"));
    }
    if !levels.is_empty() {
        let l: Vec<String> = levels.iter().map(|l| l.to_string()).collect();
        flags.push(format!("sweep.levels=[{}]", l.join(",")));
    }
    if let Some(m) = method {
        flags.push(format!("method.method={m:?}"));
    }
    if let Some(c) = &checkpoint {
        flags.push(quoted("method.checkpoint", c));
    }
    if let Some(s) = split {
        flags.push(format!("run.splits=[{s:?}]"));
    }
    if let Some(s) = seed {
        flags.push(format!("run.seeds=[{s}]"));
    }
    let cfg = load_config(&common, flags)?;
    let ds = parse_episode_file(dataset_path(&cfg)?)?;
    let seed = cfg.run.seeds.first().copied().unwrap_or(0);
    let split = cfg.run.splits.first().map(String::as_str).unwrap_or("test");
    let dir = run_dir(&common, &cfg, seed)?;
    let ev = Evaluator::new(cfg.method.clone(), &ds)?;
    let rows = robustness_sweep(&ev, &ds, split, cfg.sweep.axis, &cfg.sweep.levels, seed)?;
    let name = format!("{}+{}", cfg.method.method, cfg.method.normalization);
    write_sweep_csv(&name, cfg.sweep.axis, &rows, dir.join("sweep.csv"))?;
    let md = sweep_markdown(&name, cfg.sweep.axis, &rows);
    fs::write(dir.join("sweep.md"), &md)?;
    print!("{md}");
    println!("{}", dir.display());
    Ok(())
}

fn gradcheck(common: Common, probes: usize, configs: u64) -> Result<()> {
    let cfg = load_config(&common, Vec::new())?;
    let dir = run_dir(&common, &cfg, 0)?;
    let mut w = csv::Writer::from_path(dir.join("gradcheck.csv"))?;
    w.write_record(["target", "config", "probes", "max_rel_error"])?;
    let mut worst: f64 = 0.0;
    let mut md = String::from("| target | config | max relative error |\n|---|---|---|\n");
    for seed in 0..configs {
        let dim = cfg.dataset.dim.min(8).max(2);
        let mut targets = Vec::new();
        for mode in [MimicMode::PrototypeMimic, MimicMode::SvmMimic] {
            let mc = MimicConfig {
                mode,
                token_dim: dim,
                mlp_dim: cfg.model.mlp_dim.min(8).max(1),
                head_dim: cfg.model.head_dim.min(4).max(1),
                heads: cfg.model.heads.min(2).max(1),
                ..cfg.model
            };
            let r = gradcheck_mimic(mc, 3, probes, seed)?;
            targets.push((format!("{mode:?}"), r.max_rel_error));
        }
        let shape = EncoderShape {
            raw_dim: cfg.dataset.raw_dim.min(10).max(1),
            hidden: cfg.encoder.hidden.min(8).max(1),
            out_dim: cfg.encoder.out_dim.min(6).max(1),
        };
        let r = gradcheck_encoder(shape, 3, cfg.encoder.tau, probes, seed)?;
        targets.push(("Encoder".into(), r.max_rel_error));
        for (name, err) in targets {
            worst = worst.max(err);
            w.write_record([name.as_str(), &seed.to_string(), &probes.to_string(), &format!("{err:e}")])?;
            md.push_str(&format!("| {name} | {seed} | {err:.3e} |\n"));
        }
    }
    w.flush()?;
    fs::write(dir.join("gradcheck.md"), &md)?;
    print!("{md}");
    println!("max relative error: {worst:e}");
    println!("{}", dir.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Generate { common, seed, raw } => generate(common, seed, raw),
        Command::Train {
            common,
            data,
            mode,
            steps,
            seed,
            encoder,
        } => train(common, data, mode, steps, seed, encoder),
        Command::Eval {
            common,
            data,
            method,
            normalization,
            checkpoint,
            split,
            ablation,
        } => eval(common, data, method, normalization, checkpoint, split, ablation),
        Command::Sweep {
            common,
            data,
            axis,
            levels,
            method,
            checkpoint,
            split,
            seed,
        } => sweep(common, data, axis, levels, method, checkpoint, split, seed),
        Command::Gradcheck {
            common,
            probes,
            configs,
        } => gradcheck(common, probes, configs),
    }
}
