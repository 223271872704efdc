//! Command-line driver: synthetic data generation, two-stage training,
//! posterior sampling, evaluation, and the sensor/step studies. Every
//! numeric artifact is CSV; every run prints its resolved configuration
//! and root seed so it can be reproduced exactly.

mod selfcheck;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use geofunflow::data::{
    generate_grf_dataset, generate_harmonic_dataset, read_dataset, write_dataset, DomainKind,
    FieldDataset, FieldSample, GenConfig, Split,
};
use geofunflow::flow::{posterior_ensemble, FlowConfig, FlowModel};
use geofunflow::geofae::{GeoFaeConfig, GeoFaeModel};
use geofunflow::geometry::{build_conditioning, sample_sensors, ConditioningInstance};
use geofunflow::metrics::{ensemble_uncertainty, fit_log_slope, relative_l2};
use geofunflow::rng::Rng;
use geofunflow::training::checkpoint::{load_checkpoint, save_checkpoint};
use geofunflow::training::{
    train_stage1, train_stage2, write_loss_csv, OptimizerState, TrainConfig,
};
use serde::Deserialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

// Root-seed streams for evaluation-time corruption (independent of the
// library's internal training streams).
const SEED_EVAL_SENSORS: u64 = 0xE101;
const SEED_EVAL_NOISE: u64 = 0xE102;
const SEED_EVAL_ENSEMBLE: u64 = 0xE103;

#[derive(Parser)]
#[command(
    name = "gff",
    version,
    about = "Function autoencoder + conditional latent flow on irregular point clouds"
)]
struct Cli {
    /// Optional TOML file supplying defaults (flags override it).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (falls back to the config file, then $GFF_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and write it as a field file.
    GenData(GenDataArgs),
    /// Stage 1: train the autoencoder on a dataset.
    TrainFae(TrainFaeArgs),
    /// Stage 2: train the latent flow against a frozen autoencoder.
    TrainFlow(TrainFlowArgs),
    /// Draw a posterior ensemble for one held-out sample.
    Sample(SampleArgs),
    /// Evaluate reconstruction and posterior error on the held-out split.
    Eval(EvalArgs),
    /// Posterior error as the observed fraction grows.
    StudySensors(StudySensorsArgs),
    /// Posterior error as the sampler step count grows.
    StudySteps(StudyStepsArgs),
    /// Run the built-in verification suite (gradients, invariances,
    /// transport oracles, posterior bound).
    Selfcheck,
}

#[derive(Args)]
struct GenDataArgs {
    /// Domain shape: annulus | notch-triangle | perturbed-disk.
    #[arg(long, default_value = "annulus")]
    kind: String,
    /// Points per sample.
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// Number of samples.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Field generator: grf | harmonic.
    #[arg(long, default_value = "grf")]
    generator: String,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0.5)]
    lengthscale: f64,
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    /// Output file (.gffd).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Default)]
struct TrainOverrides {
    /// Model/schedule preset: desk | paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Observation noise level relative to per-channel std.
    #[arg(long)]
    noise: Option<f64>,
    /// Sensor fractions drawn during training, e.g. 0.25,0.5,0.75,1.0.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
}

#[derive(Args)]
struct TrainFaeArgs {
    /// Dataset file (.gffd).
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory (checkpoint + loss CSV).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainFlowArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained autoencoder checkpoint (.gfck).
    #[arg(long)]
    fae: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fae: PathBuf,
    #[arg(long)]
    flow: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    /// Index into the held-out split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Euler steps (default: the flow preset's step count).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 8)]
    ensemble: usize,
    /// Output CSV of per-point truth/mean/std.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fae: PathBuf,
    /// Optional flow checkpoint; omit to evaluate reconstruction only.
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 8)]
    ensemble: usize,
    /// Output CSV, one row per held-out sample.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StudySensorsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fae: PathBuf,
    /// Optional flow checkpoint; with it the study scores posterior
    /// ensemble means, without it deterministic reconstructions.
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Observed fractions to sweep, strictly increasing.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 4)]
    ensemble: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StudyStepsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    fae: PathBuf,
    #[arg(long)]
    flow: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    /// Step counts to sweep, e.g. 1,2,5,10,100,1000.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,100,1000")]
    steps_list: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    ensemble: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Optional TOML defaults: top-level `seed` and `preset`, plus a
/// `[train]` table mirroring the schedule fields.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    preset: Option<String>,
    train: Option<FileTrain>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileTrain {
    iterations: Option<usize>,
    batch_size: Option<usize>,
    base_lr: Option<f64>,
    warmup_steps: Option<usize>,
    decay_factor: Option<f64>,
    decay_every: Option<usize>,
    weight_decay: Option<f64>,
    noise_level: Option<f64>,
    fractions: Option<Vec<f64>>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config file {}", p.display()))
        }
    }
}

fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> Result<u64> {
    if let Some(s) = flag.or(file.seed) {
        return Ok(s);
    }
    match std::env::var("GFF_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| anyhow::anyhow!("GFF_SEED must be an unsigned integer, got {v:?}")),
        Err(_) => Ok(0),
    }
}

fn resolve_preset(flag: Option<&String>, file: &FileConfig) -> String {
    flag.cloned()
        .or_else(|| file.preset.clone())
        .unwrap_or_else(|| "desk".to_string())
}

fn print_train_config(cfg: &TrainConfig) {
    println!("iterations = {}", cfg.iterations);
    println!("batch_size = {}", cfg.batch_size);
    println!("base_lr = {}", cfg.base_lr);
    println!("warmup_steps = {}", cfg.warmup_steps);
    println!("decay_factor = {}", cfg.decay_factor);
    println!("decay_every = {}", cfg.decay_every);
    println!("weight_decay = {}", cfg.weight_decay);
    println!("noise_level = {}", cfg.noise_level);
    let fractions: Vec<String> = cfg.fraction_set.iter().map(|f| f.to_string()).collect();
    println!("fractions = {}", fractions.join(","));
}

fn resolve_train(
    preset: &str,
    file: &FileConfig,
    flags: &TrainOverrides,
    seed: u64,
) -> Result<TrainConfig> {
    let mut cfg = match preset {
        "desk" => TrainConfig::desk(seed),
        "paper" => TrainConfig::paper(seed),
        other => bail!("unknown preset {other:?} (desk, paper)"),
    };
    if let Some(t) = &file.train {
        if let Some(v) = t.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = t.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = t.base_lr {
            cfg.base_lr = v;
        }
        if let Some(v) = t.warmup_steps {
            cfg.warmup_steps = v;
        }
        if let Some(v) = t.decay_factor {
            cfg.decay_factor = v;
        }
        if let Some(v) = t.decay_every {
            cfg.decay_every = v;
        }
        if let Some(v) = t.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = t.noise_level {
            cfg.noise_level = v;
        }
        if let Some(v) = &t.fractions {
            cfg.fraction_set = v.clone();
        }
    }
    if let Some(v) = flags.iters {
        cfg.iterations = v;
    }
    if let Some(v) = flags.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = flags.warmup {
        cfg.warmup_steps = v;
    }
    if let Some(v) = flags.decay_factor {
        cfg.decay_factor = v;
    }
    if let Some(v) = flags.decay_every {
        cfg.decay_every = v;
    }
    if let Some(v) = flags.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = flags.noise {
        cfg.noise_level = v;
    }
    if let Some(v) = &flags.fractions {
        cfg.fraction_set = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<FieldDataset> {
    let ds = read_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(ds)
}

/// Build the autoencoder for a dataset/preset and load its checkpoint.
fn load_fae(path: &Path, preset: &str, ds: &FieldDataset, seed: u64) -> Result<GeoFaeModel> {
    let cfg = GeoFaeConfig::by_name(preset, ds.meta.channels, ds.meta.dim)?;
    let mut model = GeoFaeModel::new(cfg, seed)?;
    let mut scratch = OptimizerState::new(model.store.numel());
    load_checkpoint(path, &mut model.store, &mut scratch)
        .with_context(|| format!("loading autoencoder checkpoint {}", path.display()))?;
    model.freeze();
    Ok(model)
}

fn load_flow(path: &Path, preset: &str, fae: &GeoFaeModel, seed: u64) -> Result<FlowModel> {
    let cfg = FlowConfig::by_name(preset, fae.cfg.latent_dim, fae.cfg.latent_tokens)?;
    let mut model = FlowModel::new(cfg, seed)?;
    let mut scratch = OptimizerState::new(model.store.numel());
    load_checkpoint(path, &mut model.store, &mut scratch)
        .with_context(|| format!("loading flow checkpoint {}", path.display()))?;
    Ok(model)
}

/// Corrupt one held-out sample for evaluation: fixed fraction, noise
/// relative to the dataset's training std, seeds derived per sample.
fn eval_instance(
    sample: &FieldSample,
    channel_std: &[f64],
    fraction: f64,
    noise: f64,
    root_seed: u64,
    sample_index: usize,
) -> Result<ConditioningInstance> {
    let sensor_seed = Rng::derive2(root_seed, SEED_EVAL_SENSORS, sample_index as u64).next_u64();
    let noise_seed = Rng::derive2(root_seed, SEED_EVAL_NOISE, sample_index as u64).next_u64();
    let sensors = sample_sensors(&sample.cloud, fraction, sensor_seed)?;
    let inst = build_conditioning(
        &sample.cloud,
        &sensors,
        &sample.values,
        sample.channels,
        noise,
        channel_std,
        noise_seed,
    )?;
    Ok(inst)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    let mut f = std::fs::File::create(path)
        .with_context(|| format!("creating output file {}", path.display()))?;
    f.write_all(text.as_bytes())
        .with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Single line, machine parseable: "error: <chain: joined: parts>".
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = load_file_config(cli.config.as_deref())?;
    let seed = resolve_seed(cli.seed, &file)?;
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a, seed),
        Cmd::TrainFae(a) => train_fae(a, &file, seed),
        Cmd::TrainFlow(a) => train_flow(a, &file, seed),
        Cmd::Sample(a) => sample_cmd(a, &file, seed),
        Cmd::Eval(a) => eval_cmd(a, &file, seed),
        Cmd::StudySensors(a) => study_sensors(a, &file, seed),
        Cmd::StudySteps(a) => study_steps(a, &file, seed),
        Cmd::Selfcheck => selfcheck::run(seed),
    }
}

fn gen_data(a: GenDataArgs, seed: u64) -> Result<()> {
    let kind = DomainKind::parse(&a.kind)?;
    println!(
        "command = gen-data\nkind = {}\npoints = {}\nsamples = {}\ngenerator = {}\nchannels = {}\nlengthscale = {}\namplitude = {}\nseed = {}",
        kind.name(), a.n, a.samples, a.generator, a.channels, a.lengthscale, a.amplitude, seed
    );
    let ds = match a.generator.as_str() {
        "grf" => generate_grf_dataset(&GenConfig {
            kind,
            n_points: a.n,
            n_samples: a.samples,
            channels: a.channels,
            lengthscale: a.lengthscale,
            amplitude: a.amplitude,
            root_seed: seed,
        })?,
        "harmonic" => {
            if a.channels != 1 {
                bail!("harmonic generator produces a single channel");
            }
            generate_harmonic_dataset(kind, a.n, a.samples, seed)?
        }
        other => bail!("unknown generator {other:?} (grf, harmonic)"),
    };
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_dataset(&a.out, &ds)?;
    println!(
        "wrote {} samples ({} points each, {} channels) to {}",
        ds.len(),
        a.n,
        ds.meta.channels,
        a.out.display()
    );
    Ok(())
}

fn train_fae(a: TrainFaeArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let preset = resolve_preset(a.train.preset.as_ref(), file);
    let cfg = resolve_train(&preset, file, &a.train, seed)?;
    let ds = load_dataset(&a.data)?;
    println!(
        "command = train-fae\ndata = {}\npreset = {}\nseed = {}",
        a.data.display(),
        preset,
        seed
    );
    print_train_config(&cfg);
    let fae_cfg = GeoFaeConfig::by_name(&preset, ds.meta.channels, ds.meta.dim)?;
    let mut model = GeoFaeModel::new(fae_cfg, seed)?;
    let mut state = OptimizerState::new(model.store.numel());
    if let Some(resume) = &a.resume {
        load_checkpoint(resume, &mut model.store, &mut state)
            .with_context(|| format!("resuming from {}", resume.display()))?;
        println!("resumed at step {}", state.step);
    }
    let history = train_stage1(&mut model, &ds, &cfg, &mut state)?;
    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("fae.gfck");
    save_checkpoint(&ckpt, &model.store, &state)?;
    write_loss_csv(&a.out.join("fae_loss.csv"), &history)?;
    if let Some(last) = history.last() {
        println!("final loss = {} (step {})", last.loss, last.step);
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn train_flow(a: TrainFlowArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let preset = resolve_preset(a.train.preset.as_ref(), file);
    let cfg = resolve_train(&preset, file, &a.train, seed)?;
    let ds = load_dataset(&a.data)?;
    println!(
        "command = train-flow\ndata = {}\nfae = {}\npreset = {}\nseed = {}",
        a.data.display(),
        a.fae.display(),
        preset,
        seed
    );
    print_train_config(&cfg);
    let fae = load_fae(&a.fae, &preset, &ds, seed)?;
    let flow_cfg = FlowConfig::by_name(&preset, fae.cfg.latent_dim, fae.cfg.latent_tokens)?;
    let mut flow = FlowModel::new(flow_cfg, seed)?;
    let mut state = OptimizerState::new(flow.store.numel());
    if let Some(resume) = &a.resume {
        load_checkpoint(resume, &mut flow.store, &mut state)
            .with_context(|| format!("resuming from {}", resume.display()))?;
        println!("resumed at step {}", state.step);
    }
    let history = train_stage2(&mut flow, &fae, &ds, &cfg, &mut state)?;
    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("flow.gfck");
    save_checkpoint(&ckpt, &flow.store, &state)?;
    write_loss_csv(&a.out.join("flow_loss.csv"), &history)?;
    if let Some(last) = history.last() {
        println!("final loss = {} (step {})", last.loss, last.step);
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn coord_header(dim: usize) -> &'static str {
    match dim {
        1 => "x",
        2 => "x,y",
        _ => "x,y,z",
    }
}

fn sample_cmd(a: SampleArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let preset = resolve_preset(a.preset.as_ref(), file);
    let ds = load_dataset(&a.data)?;
    let fae = load_fae(&a.fae, &preset, &ds, seed)?;
    let flow = load_flow(&a.flow, &preset, &fae, seed)?;
    let steps = a.steps.unwrap_or(flow.cfg.default_steps);
    println!(
        "command = sample\ndata = {}\npreset = {}\nindex = {}\nfraction = {}\nnoise = {}\nsteps = {}\nensemble = {}\nseed = {}",
        a.data.display(), preset, a.index, a.fraction, a.noise, steps, a.ensemble, seed
    );
    let split = Split::default_for(ds.len())?;
    let Some(&sample_idx) = split.test.get(a.index) else {
        bail!(
            "held-out index {} out of range (split has {} samples)",
            a.index,
            split.test.len()
        );
    };
    let sample = &ds.samples[sample_idx];
    let inst = eval_instance(
        sample,
        &ds.meta.stats.std,
        a.fraction,
        a.noise,
        seed,
        a.index,
    )?;
    let ens_seed = Rng::derive2(seed, SEED_EVAL_ENSEMBLE, a.index as u64).next_u64();
    let ens = posterior_ensemble(
        &flow,
        &fae,
        &inst,
        a.ensemble,
        sample.cloud.coords(),
        steps,
        ens_seed,
    )?;

    let p = sample.channels;
    let mut csv = String::new();
    csv.push_str(coord_header(ds.meta.dim));
    csv.push_str(",observed");
    for c in 0..p {
        csv.push_str(&format!(",truth_c{c},mean_c{c},std_c{c}"));
    }
    csv.push('\n');
    for i in 0..sample.cloud.len() {
        let pt = sample.cloud.point(i);
        let coords: Vec<String> = pt.iter().map(|v| v.to_string()).collect();
        csv.push_str(&coords.join(","));
        csv.push_str(&format!(",{}", inst.sensors.mask[i]));
        for c in 0..p {
            let j = i * p + c;
            csv.push_str(&format!(",{},{},{}", sample.values[j], ens.mean[j], ens.std[j]));
        }
        csv.push('\n');
    }
    write_text(&a.out, &csv)?;
    let err = relative_l2(&ens.mean, &sample.values)?;
    println!(
        "ensemble mean relative_l2 = {err}\nwrote {} rows to {}",
        sample.cloud.len(),
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let preset = resolve_preset(a.preset.as_ref(), file);
    let ds = load_dataset(&a.data)?;
    let fae = load_fae(&a.fae, &preset, &ds, seed)?;
    let flow = match &a.flow {
        Some(p) => Some(load_flow(p, &preset, &fae, seed)?),
        None => None,
    };
    let steps = a
        .steps
        .unwrap_or_else(|| flow.as_ref().map(|f| f.cfg.default_steps).unwrap_or(10));
    println!(
        "command = eval\ndata = {}\npreset = {}\nfraction = {}\nnoise = {}\nsteps = {}\nensemble = {}\nseed = {}",
        a.data.display(), preset, a.fraction, a.noise, steps, a.ensemble, seed
    );
    let split = Split::default_for(ds.len())?;
    let mut csv = String::from(if flow.is_some() {
        "sample,fae_rel_l2,flow_rel_l2,mean_std\n"
    } else {
        "sample,fae_rel_l2\n"
    });
    let mut fae_errs = Vec::new();
    let mut flow_errs = Vec::new();
    for (row, &idx) in split.test.iter().enumerate() {
        let sample = &ds.samples[idx];
        let inst = eval_instance(sample, &ds.meta.stats.std, a.fraction, a.noise, seed, row)?;
        let recon = fae.reconstruct(&inst, sample.cloud.coords())?;
        let fae_err = relative_l2(&recon, &sample.values)?;
        fae_errs.push(fae_err);
        match &flow {
            Some(fl) => {
                let ens_seed = Rng::derive2(seed, SEED_EVAL_ENSEMBLE, row as u64).next_u64();
                let ens = posterior_ensemble(
                    fl,
                    &fae,
                    &inst,
                    a.ensemble,
                    sample.cloud.coords(),
                    steps,
                    ens_seed,
                )?;
                let flow_err = relative_l2(&ens.mean, &sample.values)?;
                let mean_std = if a.ensemble >= 2 {
                    ensemble_uncertainty(&ens.members)?.mean_std
                } else {
                    0.0
                };
                flow_errs.push(flow_err);
                csv.push_str(&format!("{idx},{fae_err},{flow_err},{mean_std}\n"));
            }
            None => csv.push_str(&format!("{idx},{fae_err}\n")),
        }
    }
    write_text(&a.out, &csv)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!("held-out samples = {}", split.test.len());
    println!("mean fae_rel_l2 = {}", mean(&fae_errs));
    if !flow_errs.is_empty() {
        println!("mean flow_rel_l2 = {}", mean(&flow_errs));
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn study_sensors(a: StudySensorsArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let preset = resolve_preset(a.preset.as_ref(), file);
    let ds = load_dataset(&a.data)?;
    let fae = load_fae(&a.fae, &preset, &ds, seed)?;
    let flow = match &a.flow {
        Some(path) => Some(load_flow(path, &preset, &fae, seed)?),
        None => None,
    };
    let steps = a
        .steps
        .or_else(|| flow.as_ref().map(|f| f.cfg.default_steps))
        .unwrap_or(0);
    println!(
        "command = study-sensors\ndata = {}\npreset = {}\nfractions = {:?}\nnoise = {}\nsteps = {}\nensemble = {}\nseed = {}",
        a.data.display(), preset, a.fractions, a.noise, steps, a.ensemble, seed
    );
    if a.fractions.len() < 2 || a.fractions.windows(2).any(|w| w[0] >= w[1]) {
        bail!("fractions must be at least two values, strictly increasing");
    }
    let split = Split::default_for(ds.len())?;
    let mut csv = String::from("fraction,sensors,error\n");
    let mut pairs = Vec::new();
    for (fi, &fraction) in a.fractions.iter().enumerate() {
        let mut err_acc = 0.0;
        let mut sensor_acc = 0usize;
        for (row, &idx) in split.test.iter().enumerate() {
            let sample = &ds.samples[idx];
            // Per-(fraction, sample) derivation keeps cells independent.
            let cell = (fi * split.test.len() + row) as usize;
            let inst =
                eval_instance(sample, &ds.meta.stats.std, fraction, a.noise, seed, cell)?;
            sensor_acc += inst.sensors.count();
            let pred = match &flow {
                Some(flow) => {
                    let ens_seed =
                        Rng::derive2(seed, SEED_EVAL_ENSEMBLE, cell as u64).next_u64();
                    posterior_ensemble(
                        flow,
                        &fae,
                        &inst,
                        a.ensemble,
                        sample.cloud.coords(),
                        steps,
                        ens_seed,
                    )?
                    .mean
                }
                None => fae.reconstruct(&inst, sample.cloud.coords())?,
            };
            err_acc += relative_l2(&pred, &sample.values)?;
        }
        let n = split.test.len() as f64;
        let mean_err = err_acc / n;
        let mean_sensors = sensor_acc as f64 / n;
        csv.push_str(&format!("{fraction},{mean_sensors},{mean_err}\n"));
        pairs.push((mean_sensors, mean_err));
        println!("fraction {fraction}: sensors ~{mean_sensors}, error {mean_err}");
    }
    write_text(&a.out, &csv)?;
    match fit_log_slope(&pairs) {
        Ok(slope) => println!("log-log slope (error vs sensors) = {slope}"),
        Err(e) => println!("log-log slope unavailable: {e}"),
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn study_steps(a: StudyStepsArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let preset = resolve_preset(a.preset.as_ref(), file);
    let ds = load_dataset(&a.data)?;
    let fae = load_fae(&a.fae, &preset, &ds, seed)?;
    let flow = load_flow(&a.flow, &preset, &fae, seed)?;
    println!(
        "command = study-steps\ndata = {}\npreset = {}\nsteps_list = {:?}\nfraction = {}\nnoise = {}\nensemble = {}\nseed = {}",
        a.data.display(), preset, a.steps_list, a.fraction, a.noise, a.ensemble, seed
    );
    if a.steps_list.is_empty() || a.steps_list.iter().any(|&s| s == 0) {
        bail!("steps list must be non-empty with positive entries");
    }
    let split = Split::default_for(ds.len())?;
    // One corruption per test sample, shared across step counts so the
    // sweep isolates the integrator.
    let mut instances = Vec::new();
    for (row, &idx) in split.test.iter().enumerate() {
        let sample = &ds.samples[idx];
        instances.push((
            idx,
            eval_instance(sample, &ds.meta.stats.std, a.fraction, a.noise, seed, row)?,
        ));
    }
    let mut csv = String::from("steps,error\n");
    for &steps in &a.steps_list {
        let mut err_acc = 0.0;
        for (row, (idx, inst)) in instances.iter().enumerate() {
            let sample = &ds.samples[*idx];
            let ens_seed = Rng::derive2(seed, SEED_EVAL_ENSEMBLE, row as u64).next_u64();
            let ens = posterior_ensemble(
                &flow,
                &fae,
                inst,
                a.ensemble,
                sample.cloud.coords(),
                steps,
                ens_seed,
            )?;
            err_acc += relative_l2(&ens.mean, &sample.values)?;
        }
        let mean_err = err_acc / instances.len() as f64;
        csv.push_str(&format!("{steps},{mean_err}\n"));
        println!("steps {steps}: error {mean_err}");
    }
    write_text(&a.out, &csv)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
