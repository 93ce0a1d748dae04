//! `hsmae`: synthetic data, pre-training, fine-tuning, evaluation,
//! reconstruction dumps and file inspection.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand, ValueEnum};
use hsmae_core::checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
use hsmae_core::hsidata::{
    gen_synthetic, load_cube, make_split, normalize, read_split, save_cube, write_split, HsiCube,
    HSC_MAGIC,
};
use hsmae_core::loss::{rec_loss, sam_map};
use hsmae_core::masking::sample_mask_plan;
use hsmae_core::model::{reconstruct, ModelConfig};
use hsmae_core::tensor::Graph;
use hsmae_core::tokenizer::partition;
use hsmae_core::training::{evaluate, finetune, log_to_jsonl, pretrain, FinetuneConfig, FinetuneMode};
use hsmae_core::Error;
use log::info;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "hsmae", version, about = "Masked autoencoder pre-training for hyperspectral cubes")]
struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for pre-training micro-batches (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a labeled synthetic cube and a train/test split.
    GenSynth(GenSynthArgs),
    /// Masked reconstruction pre-training.
    Pretrain(PretrainArgs),
    /// Train a classifier on labeled pixels and score the test split.
    Finetune(FinetuneArgs),
    /// Compare predicted and true label CSVs.
    Eval(EvalArgs),
    /// Reconstruct a cube from a random mask and report the losses.
    Reconstruct(ReconstructArgs),
    /// Print the header of a cube or checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long)]
    h: usize,
    #[arg(long)]
    w: usize,
    #[arg(long)]
    b: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Output cube (.hsc).
    #[arg(long, default_value = "synthetic.hsc")]
    out: PathBuf,
    /// Split CSV; defaults to the cube path with a .csv extension.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    train_fraction: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Micro,
    Desk,
    Foundation,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Training cubes (.hsc), visited round-robin.
    #[arg(required = true)]
    cubes: Vec<PathBuf>,
    /// Checkpoint path; rewritten at every checkpoint and at the end.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines loss log; defaults to the checkpoint path with .jsonl.
    #[arg(long)]
    log: Option<PathBuf>,
    /// JSON run configuration; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mask_spatial: Option<f64>,
    #[arg(long)]
    mask_spectral: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Reuse one mask plan per cube for every step.
    #[arg(long)]
    fixed_plan: bool,
    /// Disable flips and spectral jitter.
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Probe,
    Full,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled cube (.hsc).
    #[arg(long)]
    cube: PathBuf,
    /// Split CSV with columns i,j,label,split.
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum, default_value = "probe")]
    mode: Mode,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// ClassReport JSON output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Test-pixel predictions CSV (i,j,label,predicted).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Save the fine-tuned model.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// CSV with a `predicted` or `label` column.
    #[arg(long)]
    pred: PathBuf,
    /// CSV with a `label` column.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    mask_spatial: f64,
    #[arg(long, default_value_t = 0.5)]
    mask_spectral: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Reconstructed cube (.hsc), in the input's units, cropped to whole patches.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-pixel spectral angle CSV (i,j,sam); empty for zero-norm pixels.
    #[arg(long)]
    sam_map: Option<PathBuf>,
    /// LossReport JSON output; it is always printed.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Cube (.hsc) or checkpoint.
    path: PathBuf,
}

/// A problem with the command line rather than with the data.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numeric() => 3,
        Some(Error::InvalidArgument(_) | Error::EmptyMask | Error::NothingVisible) => 1,
        _ => 2,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn gen_synth(cli: &Cli, a: &GenSynthArgs) -> anyhow::Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let cube = gen_synthetic(a.h, a.w, a.b, a.classes, seed)?;
    let split = make_split(&cube, a.train_fraction, seed)?;
    let split_path = a.split.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    save_cube(&cube, &a.out)?;
    write_split(&split, &split_path)?;
    println!(
        "wrote {} ({}×{}×{}, {} classes) and {}",
        a.out.display(),
        a.h,
        a.w,
        a.b,
        a.classes,
        split_path.display()
    );
    Ok(())
}

fn cmd_pretrain(cli: &Cli, a: &PretrainArgs) -> anyhow::Result<()> {
    let mut run = RunConfig::load(a.config.as_deref())?;
    let cfg = &mut run.pretrain;
    if let Some(p) = a.preset {
        cfg.model = match p {
            Preset::Micro => ModelConfig::micro(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Foundation => ModelConfig::foundation(),
        };
    }
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(cfg.steps, a.steps);
    set!(cfg.alpha, a.alpha);
    set!(cfg.mask_spatial, a.mask_spatial);
    set!(cfg.mask_spectral, a.mask_spectral);
    set!(cfg.optimizer.lr, a.lr);
    set!(cfg.optimizer.weight_decay, a.weight_decay);
    set!(cfg.grad_accum, a.grad_accum);
    set!(cfg.checkpoint_every, a.checkpoint_every);
    set!(cfg.threads, cli.threads);
    set!(run.seed, cli.seed);
    let cfg = &mut run.pretrain;
    cfg.fixed_plan |= a.fixed_plan;
    if a.no_augment {
        cfg.augment = hsmae_core::training::AugmentConfig::off();
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let cubes = a.cubes.iter().map(load_cube).collect::<Result<Vec<_>, _>>()?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("jsonl"));
    info!("pre-training {} steps on {} cubes", cfg.steps, cubes.len());
    let out = pretrain(&cubes, cfg, run.seed, &mut |step, ck| {
        info!("checkpoint at step {step}");
        ck.save(&a.out)
    })?;
    write_file(&log_path, log_to_jsonl(&out.log))?;
    let last = out.log.last().expect("steps >= 1");
    println!(
        "{} steps: l_rec {:.6} -> {:.6}; wrote {} and {}",
        out.log.len(),
        out.log[0].l_rec,
        last.l_rec,
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_finetune(cli: &Cli, a: &FinetuneArgs) -> anyhow::Result<()> {
    let run = RunConfig::load(a.config.as_deref())?;
    let mut cfg = match (a.config.is_some(), a.mode) {
        (true, _) => run.finetune,
        (false, Mode::Probe) => FinetuneConfig::probe(),
        (false, Mode::Full) => FinetuneConfig::full(),
    };
    cfg.mode = match a.mode {
        Mode::Probe => FinetuneMode::Probe,
        Mode::Full => FinetuneMode::Full,
    };
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.optimizer.lr = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let seed = cli.seed.unwrap_or(run.seed);

    let ck = Checkpoint::load(&a.checkpoint)?;
    let cube = load_cube(&a.cube)?;
    let split = read_split(&a.split)?;
    let out = finetune(&ck, &cube, &split, &cfg, seed)?;
    let r = &out.report;
    println!("OA {:.2}%  AA {:.2}%  kappa {:.4}", r.oa, r.aa, r.kappa);
    if let Some(p) = &a.report {
        write_json(p, r)?;
    }
    if let Some(p) = &a.predictions {
        let mut w = csv::Writer::from_path(p).map_err(Error::from)?;
        for row in &out.predictions {
            w.serialize(row).map_err(Error::from)?;
        }
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &a.out {
        Checkpoint {
            params: out.params,
            ..ck
        }
        .save(p)?;
    }
    Ok(())
}

struct LabelColumn {
    coords: Option<Vec<(String, String)>>,
    labels: Vec<usize>,
}

fn read_labels(path: &Path, prefer: &[&str]) -> anyhow::Result<LabelColumn> {
    let mut r = csv::Reader::from_path(path).map_err(Error::from)?;
    let headers = r.headers().map_err(Error::from)?.clone();
    let col = prefer
        .iter()
        .find_map(|name| headers.iter().position(|h| h == *name))
        .ok_or_else(|| Error::format(0, format!("{}: no {} column", path.display(), prefer.join("/"))))?;
    let ij = headers
        .iter()
        .position(|h| h == "i")
        .zip(headers.iter().position(|h| h == "j"));
    let mut coords = ij.map(|_| Vec::new());
    let mut labels = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(Error::from)?;
        let raw = rec.get(col).unwrap_or("").trim();
        let label: usize = raw
            .parse()
            .map_err(|_| Error::format(row + 2, format!("{}: bad label {raw:?}", path.display())))?;
        if label == 0 {
            return Err(Error::format(row + 2, format!("{}: label 0 marks unlabeled pixels", path.display())).into());
        }
        labels.push(label - 1);
        if let (Some(c), Some((i, j))) = (coords.as_mut(), ij) {
            c.push((rec[i].to_string(), rec[j].to_string()));
        }
    }
    Ok(LabelColumn { coords, labels })
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let pred = read_labels(&a.pred, &["predicted", "label"])?;
    let truth = read_labels(&a.truth, &["label"])?;
    if let (Some(p), Some(t)) = (&pred.coords, &truth.coords) {
        if let Some(row) = p.iter().zip(t).position(|(x, y)| x != y) {
            bail!(Error::format(row + 2, "pixel coordinates of the two files disagree"));
        }
    }
    let r = evaluate(&pred.labels, &truth.labels)?;
    println!("OA {:.2}%  AA {:.2}%  kappa {:.4}", r.oa, r.aa, r.kappa);
    if r.degenerate {
        println!("note: single-class data, kappa fixed by convention");
    }
    if let Some(p) = &a.report {
        write_json(p, &r)?;
    }
    Ok(())
}

fn cmd_reconstruct(cli: &Cli, a: &ReconstructArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cube = load_cube(&a.cube)?;
    let grid = partition(&cube)?;
    let seed = cli.seed.unwrap_or(0);
    let plan = sample_mask_plan(grid.p, grid.q, grid.k, a.mask_spatial, a.mask_spectral, seed)
        .map_err(|e| match e {
            Error::NothingVisible => usage("the mask ratios hide every token; lower --mask-spatial or --mask-spectral"),
            e => e.into(),
        })?;
    if plan.masked_tokens.is_empty() {
        return Err(usage(format!(
            "l_mse is undefined: with --mask-spatial {} and --mask-spectral {} no voxel is masked \
             (empty M). Use ratios that hide at least one cell or spectral group, e.g. 0.5",
            a.mask_spatial, a.mask_spectral
        )));
    }
    let (norm, stats) = normalize(&cube);
    let mut g = Graph::new();
    let w = ck.params.bind_frozen(&mut g);
    let rec = reconstruct(&mut g, &w, &norm, &plan, &ck.config)?;
    let (_, report) = rec_loss(&mut g, rec.y_hat, &rec.target, &rec.mask, a.alpha)?;
    let y_hat = g.value(rec.y_hat).clone();
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    let (h, wd, b) = grid.extents();
    if let Some(p) = &a.out {
        let wl = cube.wavelengths()[..b].to_vec();
        let out = HsiCube::new(h, wd, b, y_hat.data().to_vec(), wl, None)?;
        let stats = hsmae_core::hsidata::NormStats {
            mean: stats.mean[..b].to_vec(),
            std: stats.std[..b].to_vec(),
        };
        save_cube(&stats.denormalize(&out), p)?;
    }
    if let Some(p) = &a.sam_map {
        let angles = sam_map(&rec.target, &y_hat)?;
        let mut text = String::from("i,j,sam\n");
        for (px, ang) in angles.iter().enumerate() {
            let v = ang.map(|x| x.to_string()).unwrap_or_default();
            text.push_str(&format!("{},{},{v}\n", px / wd, px % wd));
        }
        write_file(p, text)?;
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> anyhow::Result<()> {
    let bytes = fs::read(&a.path).map_err(|e| Error::io(&a.path, e))?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ck = Checkpoint::from_bytes(&bytes)?;
        let h = ck.header();
        let c = &h.config;
        println!("checkpoint {}", a.path.display());
        println!("format version {}", h.format_version);
        println!(
            "model d_model {} encoder {} decoder {} heads {} ff {}",
            c.d_model, c.n_enc_layers, c.n_dec_layers, c.n_heads, c.d_ff
        );
        println!("spatial table {} x {}, spectral groups {}", h.p, h.q, h.k);
        println!("classes {}", h.n_classes);
        println!("seed {}", h.seed);
        println!("parameters {} in {} arrays", ck.params.n_params(), h.tensors.len());
        return Ok(());
    }
    if !bytes.starts_with(HSC_MAGIC) {
        return Err(Error::format(0, "neither a cube nor a checkpoint (unknown magic)").into());
    }
    let cube = HsiCube::from_bytes(&bytes)?;
    let wl = cube.wavelengths();
    let (lo, hi) = wl
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    println!("cube {}", a.path.display());
    println!("H {}", cube.height());
    println!("W {}", cube.width());
    println!("B {}", cube.bands());
    println!("wavelengths {lo:.4} - {hi:.4} um");
    match cube.labels() {
        Some(_) => println!("labels yes ({} classes)", cube.n_classes()),
        None => println!("labels no"),
    }
    match partition(&cube) {
        Ok(g) => println!(
            "tokens {} x {} x {} = {} (cropped {} rows, {} cols, {} bands)",
            g.p,
            g.q,
            g.k,
            g.n_tokens(),
            g.crop.rows,
            g.crop.cols,
            g.crop.bands
        ),
        Err(e) => println!("tokens none ({e})"),
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if cli.threads == Some(0) {
        return Err(usage("--threads must be >= 1"));
    }
    match &cli.command {
        Command::GenSynth(a) => gen_synth(cli, a),
        Command::Pretrain(a) => cmd_pretrain(cli, a),
        Command::Finetune(a) => cmd_finetune(cli, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Reconstruct(a) => cmd_reconstruct(cli, a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
