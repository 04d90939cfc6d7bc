//! Command-line surface: argument types plus one function per command.
//!
//! Every command resolves its settings the same way: desk defaults, then
//! `--config`, then each `--set key=value` in order, then `--seed`. The
//! merged result is echoed to `<out>/effective-config.txt`, which can be
//! passed back as `--config` to reproduce the run.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;

use crate::bench::bench_forward;
use crate::checkpoint;
use crate::config::Settings;
use crate::error::{config, Error, Result};
use crate::flops::{self, image_slots, PUBLISHED_LOCATION_SWEEP};
use crate::gradcheck::{model_config, model_gradcheck, ModelProbe};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::model::Model;
use crate::rng::{stream, Stream};
use crate::schedule::{batches_for_step, evaluate, held_out, train, TrainState};
use crate::summarizer::{top_k, tpa_select};
use crate::synth::{generate, read_shard, write_shard, SampleKind, SynthSample};
use crate::tensor::gradcheck::{op_suite, GradCheckConfig};

#[derive(Debug, Parser)]
#[command(name = "patchsum", version, about = "Text-guided patch summarization on a toy vision-language model")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key=value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    pub out: PathBuf,
    /// Root seed (same as `--set run.seed=N`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Run the training loop, writing metrics and checkpoints.
    Train {
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report losses and PTM AUC on held-out synthetic data.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate this shard instead of generating held-out samples.
        #[arg(long)]
        shard: Option<PathBuf>,
    },
    /// Dump per-patch saliency and both selections for one sample.
    Select {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        /// Saliency mix; defaults to the checkpoint's β, else 0.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Write the analytical FLOPs breakdown, optionally with a sweep.
    Flops {
        /// Also sweep k ∈ {4,6,8} × α ∈ {0.4,0.7,0.9} into flops.csv.
        #[arg(long)]
        sweep: bool,
    },
    /// Time the inference forward.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
    },
    /// Render synthetic samples into a binary shard.
    GenData {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, value_enum, default_value_t = DataKind::Mixed)]
        kind: DataKind,
        /// Shard path; defaults to `<out>/data.bin`.
        #[arg(long)]
        shard: Option<PathBuf>,
    },
    /// Finite-difference check of every op and every model parameter.
    Gradcheck {
        /// Random points per op.
        #[arg(long, default_value_t = 5)]
        points: u64,
        /// Coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 3)]
        per_param: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Select { .. } => "select",
            Command::Flops { .. } => "flops",
            Command::Bench { .. } => "bench",
            Command::GenData { .. } => "gen-data",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Paired,
    Region,
    /// Alternates paired and region samples.
    Mixed,
}

/// Process exit status for a command result: 2 for configuration errors,
/// 1 for any other failure.
pub fn exit_code(result: &Result<()>) -> u8 {
    match result {
        Ok(()) => 0,
        Err(Error::Config(_)) => 2,
        Err(_) => 1,
    }
}

/// Merges defaults, config file, overrides and seed, then validates.
pub fn resolve_settings(common: &Common) -> Result<Settings> {
    let mut settings = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| config(format!("cannot read {}: {e}", path.display())))?;
            Settings::parse_text(&text)?
        }
        None => Settings::default(),
    };
    let pairs = common
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| config(format!("--set expects key=value, got '{kv}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    settings.apply(&pairs)?;
    if let Some(seed) = common.seed {
        settings.run.seed = seed;
    }
    settings.validate()?;
    Ok(settings)
}

/// Runs one command, writing a human summary to `log`.
pub fn run(cli: &Cli, log: &mut dyn Write) -> Result<()> {
    let settings = resolve_settings(&cli.common)?;
    let out = &cli.common.out;
    fs::create_dir_all(out)?;
    fs::write(out.join("effective-config.txt"), settings.to_text())?;
    match &cli.command {
        Command::Train { resume } => cmd_train(&settings, out, resume.as_deref(), log),
        Command::Eval { checkpoint, shard } => cmd_eval(&settings, out, checkpoint.as_deref(), shard.as_deref(), log),
        Command::Select { checkpoint, sample_seed, beta } => {
            cmd_select(&settings, out, checkpoint.as_deref(), *sample_seed, *beta, log)
        }
        Command::Flops { sweep } => cmd_flops(&settings, out, *sweep, log),
        Command::Bench { checkpoint, beta } => cmd_bench(&settings, out, checkpoint.as_deref(), *beta, log),
        Command::GenData { count, kind, shard } => cmd_gen_data(&settings, out, *count, *kind, shard.as_deref(), log),
        Command::Gradcheck { points, per_param } => cmd_gradcheck(&settings, out, *points, *per_param, log),
    }
}

fn load_model(settings: &Settings, checkpoint: Option<&Path>) -> Result<(Model, Option<TrainState>)> {
    let model = Model::new(&settings.run)?;
    let state = match checkpoint {
        Some(path) => checkpoint::load(path, &model)?,
        None => None,
    };
    Ok((model, state))
}

fn cmd_train(settings: &Settings, out: &Path, resume: Option<&Path>, log: &mut dyn Write) -> Result<()> {
    let (model, loaded) = load_model(settings, resume)?;
    let mut state = match (resume, loaded) {
        (Some(path), None) => {
            return Err(Error::State(format!("{} has no optimizer state to resume from", path.display())));
        }
        (_, Some(state)) => state,
        (None, None) => TrainState::new(model.params()),
    };
    let t = &settings.train;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let metrics_path = out.join("metrics.csv");
    let mut metrics = if state.step == 0 { MetricsWriter::create(&metrics_path)? } else { MetricsWriter::append(&metrics_path)? };
    writeln!(log, "training {} steps from step {}", t.steps, state.step)?;
    train(&model, &mut state, t, |report, state| {
        metrics.write(&MetricsRow::from(report))?;
        if t.checkpoint_every > 0 && state.step % t.checkpoint_every == 0 {
            checkpoint::save(&ckpt_dir.join(format!("step-{:06}.bin", state.step)), &model, Some(state))?;
        }
        Ok(())
    })?;
    checkpoint::save(&ckpt_dir.join("final.bin"), &model, Some(&state))?;
    writeln!(
        log,
        "done: step={} beta={} ptm_ema={}",
        state.step,
        state.beta,
        state.ptm_ema.map_or("n/a".to_string(), |e| format!("{e:.6}"))
    )?;
    Ok(())
}

fn split_by_kind(samples: Vec<SynthSample>) -> (Vec<SynthSample>, Vec<SynthSample>) {
    samples.into_iter().partition(|s| s.bbox.is_some())
}

fn cmd_eval(settings: &Settings, out: &Path, ckpt: Option<&Path>, shard_path: Option<&Path>, log: &mut dyn Write) -> Result<()> {
    let (model, state) = load_model(settings, ckpt)?;
    let (region, paired) = match shard_path {
        Some(path) => split_by_kind(read_shard(path)?),
        None => held_out(settings.run.seed, settings.train.eval_samples, &settings.run)?,
    };
    let beta = state.as_ref().map_or(0.0, |s| s.beta);
    let report = evaluate(&model, &region, &paired, beta, settings.train.batch_d, settings.train.mlm_rate)?;
    let mut text = String::new();
    for (name, v) in crate::objectives::LossBundle::NAMES.iter().zip(report.losses.parts()) {
        let _ = writeln!(text, "{name}={v}");
    }
    let _ = writeln!(text, "total={}\nptm_auc={}\nsamples={}\nbeta={beta}", report.losses.total, report.ptm_auc, report.samples);
    fs::write(out.join("eval.txt"), &text)?;
    log.write_all(text.as_bytes())?;
    Ok(())
}

fn cmd_select(
    settings: &Settings,
    out: &Path,
    ckpt: Option<&Path>,
    sample_seed: u64,
    beta: Option<f64>,
    log: &mut dyn Write,
) -> Result<()> {
    let (model, state) = load_model(settings, ckpt)?;
    let model = model.frozen()?;
    let beta = beta.or(state.map(|s| s.beta)).unwrap_or(0.0);
    let sample = generate(sample_seed, SampleKind::Paired, settings.run.image_size as u32)?;
    let text = model.text_encode(&sample.caption)?;
    let vision = model.vit_forward(&sample.image(), &text, beta)?;
    let sal = &vision.saliency;
    let n = sal.a.numel();

    let mut kpe = vec![false; n];
    for &g in &vision.seq.grid_indices[1..] {
        kpe[g as usize] = true;
    }
    let mut tpa = vec![false; n];
    if settings.run.tpa_enabled {
        let seeds = tpa_select(&vision.seq, &sal.a_dot, settings.run.gamma)?;
        for &g in &seeds.grid_indices[1..] {
            tpa[g as usize] = true;
        }
    }
    let mut csv = String::from("grid_index,a,p,a_dot,selected_kpe,selected_tpa\n");
    for i in 0..n {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{}",
            sal.a.data()[i],
            sal.p.data()[i],
            sal.a_dot.data()[i],
            u8::from(kpe[i]),
            u8::from(tpa[i])
        );
    }
    let dir = out.join("masks");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("sample-{sample_seed}.csv"));
    fs::write(&path, csv)?;
    writeln!(
        log,
        "caption: {}\nbeta={beta} kept={} seeds={} top-saliency={:?}\nwrote {}",
        model.vocab().decode(&sample.caption),
        kpe.iter().filter(|&&k| k).count(),
        tpa.iter().filter(|&&k| k).count(),
        top_k(sal.a_dot.data(), 3),
        path.display()
    )?;
    Ok(())
}

fn cmd_flops(settings: &Settings, out: &Path, sweep: bool, log: &mut dyn Write) -> Result<()> {
    let cfg = &settings.run;
    let n_img = image_slots(cfg.image_size, cfg.patch_size)?;
    let report = flops::report(cfg, n_img, cfg.max_text_len)?;
    fs::write(out.join("flops.txt"), &report)?;
    log.write_all(report.as_bytes())?;
    if sweep {
        let mut ks: Vec<usize> = PUBLISHED_LOCATION_SWEEP.iter().map(|p| p.0).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut alphas: Vec<f64> = PUBLISHED_LOCATION_SWEEP.iter().map(|p| p.1).collect();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        let points = flops::sweep(cfg, &ks, &alphas, &[cfg.gamma], &[cfg.image_size], cfg.max_text_len);
        fs::write(out.join("flops.csv"), flops::sweep_csv(&points))?;
        writeln!(log, "sweep: {} points written to flops.csv", points.len())?;
    }
    Ok(())
}

fn cmd_bench(settings: &Settings, out: &Path, ckpt: Option<&Path>, beta: f64, log: &mut dyn Write) -> Result<()> {
    let (model, _) = load_model(settings, ckpt)?;
    let model = model.frozen()?;
    let mut rng = stream(settings.run.seed, Stream::HeldOut);
    let batch = (0..settings.bench_batch)
        .map(|_| generate(rng.gen(), SampleKind::Paired, settings.run.image_size as u32))
        .collect::<Result<Vec<_>>>()?;
    let result = bench_forward(&model, &batch, beta, settings.bench_iters, settings.bench_warmup)?;
    let text = result.to_text();
    fs::write(out.join("bench.txt"), &text)?;
    log.write_all(text.as_bytes())?;
    Ok(())
}

fn cmd_gen_data(
    settings: &Settings,
    out: &Path,
    count: usize,
    kind: DataKind,
    shard_path: Option<&Path>,
    log: &mut dyn Write,
) -> Result<()> {
    let mut rng = stream(settings.run.seed, Stream::Data);
    let size = settings.run.image_size as u32;
    let samples = (0..count)
        .map(|i| {
            let kind = match kind {
                DataKind::Paired => SampleKind::Paired,
                DataKind::Region => SampleKind::Region,
                DataKind::Mixed if i % 2 == 0 => SampleKind::Paired,
                DataKind::Mixed => SampleKind::Region,
            };
            generate(rng.gen(), kind, size)
        })
        .collect::<Result<Vec<_>>>()?;
    let path = shard_path.map_or_else(|| out.join("data.bin"), Path::to_path_buf);
    write_shard(&path, &samples)?;
    writeln!(log, "wrote {count} samples to {}", path.display())?;
    Ok(())
}

fn cmd_gradcheck(settings: &Settings, out: &Path, points: u64, per_param: usize, log: &mut dyn Write) -> Result<()> {
    let mut text = String::new();
    let mut failures = 0usize;

    let op_cfg = GradCheckConfig::default();
    for r in op_suite(points, op_cfg)? {
        let ok = r.report.passes(op_cfg.tolerance);
        failures += usize::from(!ok);
        let _ = writeln!(text, "op {} point={} max_rel={:.3e} {}", r.op, r.point, r.report.max_rel_error(), verdict(ok));
    }

    let model = Model::new(&settings.run)?;
    let t = crate::config::TrainConfig { batch_d: 2, batch_o: 2, ..settings.train.clone() };
    let (region, paired) = batches_for_step(settings.run.seed, 0, &t, &settings.run)?;
    let probe = ModelProbe {
        region: &region,
        paired: &paired,
        beta: 0.5 * settings.run.beta_max.max(f64::EPSILON),
        mlm_rate: t.mlm_rate,
        seed: settings.run.seed,
        rng_step: 0,
        per_param,
    };
    let cfg = model_config();
    for r in model_gradcheck(&model, &probe, cfg)? {
        let ok = r.report.passes(cfg.tolerance);
        failures += usize::from(!ok);
        let _ = writeln!(text, "param {} max_rel={:.3e} {}", r.name, r.report.max_rel_error(), verdict(ok));
    }
    let _ = writeln!(text, "failures={failures}");
    fs::write(out.join("gradcheck.txt"), &text)?;
    writeln!(log, "gradcheck: {failures} failures (details in gradcheck.txt)")?;
    if failures > 0 {
        return Err(Error::Numeric(format!("{failures} gradient checks exceeded tolerance")));
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}
