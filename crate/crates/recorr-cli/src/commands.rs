//! Implementations of the CLI subcommands.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use recorr::config::RunConfig;
use recorr::diff::{load_checkpoint, ParamStore, Tape};
use recorr::pyramid::{register as run_registration, Mode, Variant};
use recorr::synth::{generate_dataset, load_manifest, load_split, Split};
use recorr::trainer::{evaluate as run_evaluation, train as run_training, EvalModel};
use recorr::vol::{warp, DisplacementField, Volume};
use recorr::vol3::{read_vol3, write_vol3};
use recorr::{RecorrError, Result};

/// Network shapes require dimensions divisible by this (four halvings).
const DIM_MULTIPLE: usize = 16;

pub fn config_key_help() -> String {
    recorr::config::describe_keys()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                RecorrError::Data(format!("reading config {}: {e}", p.display()))
            })?;
            RunConfig::from_json(&text)
        }
    }
}

pub fn gen(spec: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(Some(spec))?;
    fs::create_dir_all(out)?;
    let manifest = generate_dataset(out, &cfg.dataset_spec())?;
    fs::write(out.join("resolved_config.json"), cfg.to_pretty_json() + "\n")?;
    let count = |s: Split| manifest.pairs.iter().filter(|p| p.split == s).count();
    println!(
        "wrote {} pairs at {:?} (train {}, val {}, test {}) to {}",
        manifest.pairs.len(),
        manifest.dims,
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        out.display()
    );
    Ok(())
}

pub fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(Some(config))?;
    if cfg.mode() != Mode::Learned {
        return Err(RecorrError::Config(
            "training requires \"mode\": \"learned\"; direct mode has no parameters".into(),
        ));
    }
    let manifest = load_manifest(data)?;
    let train_pairs = load_split(data, &manifest, Split::Train)?;
    let val_pairs = load_split(data, &manifest, Split::Val)?;
    fs::create_dir_all(out)?;
    let ckpt = out.join("model.ckpt");
    let log_path = out.join("train_log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let outcome = run_training(&train_pairs, &val_pairs, &cfg.train_config(), &ckpt, Some(&mut log))?;
    fs::write(out.join("resolved_config.json"), cfg.to_pretty_json() + "\n")?;
    println!(
        "trained {} epochs on {} pairs; best epoch {} (val dice {:.4}); checkpoint {}",
        outcome.history.len(),
        train_pairs.len(),
        outcome.best_epoch,
        outcome.best_val_dice,
        ckpt.display()
    );
    Ok(())
}

pub struct RegisterArgs {
    pub fixed: PathBuf,
    pub moving: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub direct: bool,
    pub diffeo: bool,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub warped: Option<PathBuf>,
}

/// Selects learned or direct mode from the flags; learned mode loads the
/// checkpoint, direct mode runs parameter-free.
fn mode_and_store(ckpt: Option<&Path>, direct: bool) -> Result<(Mode, ParamStore<f32>)> {
    match (ckpt, direct) {
        (Some(path), false) => Ok((Mode::Learned, load_checkpoint(path)?)),
        (None, true) => Ok((Mode::Direct, ParamStore::new())),
        (None, false) => Err(RecorrError::Config(
            "pass either --ckpt <file> or --direct".into(),
        )),
        (Some(_), true) => unreachable!("clap rejects --ckpt with --direct"),
    }
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Pads a volume to `dims` by replicating the border, preserving spacing.
fn pad_replicate(v: &Volume<f32>, dims: [usize; 3]) -> Volume<f32> {
    if v.dims == dims {
        return v.clone();
    }
    let mut out = Volume::zeros(v.channels, dims).with_spacing(v.spacing);
    for c in 0..v.channels {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let sz = z.min(v.dims[0] - 1);
                    let sy = y.min(v.dims[1] - 1);
                    let sx = x.min(v.dims[2] - 1);
                    *out.at_mut(c, z, y, x) = v.at(c, sz, sy, sx);
                }
            }
        }
    }
    out
}

fn crop_field(f: &DisplacementField<f32>, dims: [usize; 3]) -> DisplacementField<f32> {
    if f.dims() == dims {
        return f.clone();
    }
    let mut out = DisplacementField::zeros(dims);
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                out.set_u(z, y, x, f.u(z, y, x));
            }
        }
    }
    out
}

pub fn register(args: &RegisterArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let fixed: Volume<f32> = read_vol3(&args.fixed)?;
    let moving: Volume<f32> = read_vol3(&args.moving)?;
    let variant = if args.diffeo { Variant::Diffeo } else { cfg.variant() };
    let (mode, store) = mode_and_store(args.ckpt.as_deref(), args.direct)?;

    // The pyramid halves resolution four times, so inputs are padded to a
    // multiple of 16 by border replication and the field cropped back.
    let orig = fixed.dims;
    let padded = [
        round_up(orig[0], DIM_MULTIPLE),
        round_up(orig[1], DIM_MULTIPLE),
        round_up(orig[2], DIM_MULTIPLE),
    ];
    let pf = pad_replicate(&fixed, padded);
    let pm = pad_replicate(&moving, padded);

    let mut tape = Tape::new();
    let trace = run_registration(
        &mut tape,
        &store,
        &pf,
        &pm,
        &cfg.model_spec(),
        &cfg.iteration_schedule(),
        mode,
        variant,
    )?;
    let field = crop_field(trace.final_field(), orig);
    write_vol3(&args.out, field.as_volume())?;
    if let Some(path) = &args.warped {
        write_vol3(path, &warp(&moving, &field)?)?;
    }
    println!(
        "registered {:?}; mean |u| {:.4} voxels; field {}",
        orig,
        field.mean_norm(),
        args.out.display()
    );
    Ok(())
}

pub struct EvaluateArgs {
    pub data: PathBuf,
    pub split: Split,
    pub ckpt: Option<PathBuf>,
    pub direct: bool,
    pub diffeo: bool,
    pub config: Option<PathBuf>,
    pub report: PathBuf,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let manifest = load_manifest(&args.data)?;
    let pairs = load_split(&args.data, &manifest, args.split)?;
    let variant = if args.diffeo { Variant::Diffeo } else { cfg.variant() };
    let (mode, store) = mode_and_store(args.ckpt.as_deref(), args.direct)?;
    let model = match mode {
        Mode::Learned => EvalModel::Learned(&store),
        Mode::Direct => EvalModel::Direct,
    };
    let report = run_evaluation(
        &pairs,
        &cfg.model_spec(),
        &cfg.iteration_schedule(),
        variant,
        &model,
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| RecorrError::Data(format!("serializing report: {e}")))?;
    fs::write(&args.report, json + "\n")?;
    println!(
        "{} pairs: dice {:.4} (initial {:.4}) hd95 {:.3} assd {:.3} fold {:.2e} epe {:.4} (initial {:.4})",
        report.pairs.len(),
        report.dice.mean,
        report.dice_initial.mean,
        report.hd95.mean,
        report.assd.mean,
        report.fold_fraction.mean,
        report.epe.mean,
        report.epe_initial.mean
    );
    Ok(())
}

pub fn gradcheck(seed: u64) -> Result<()> {
    let mut reports = recorr::diff::gradcheck::op_suite(seed)?;
    reports.extend(recorr::pyramid::composed_suite(seed)?);
    let mut failed = 0usize;
    for r in &reports {
        println!(
            "{:<24} max_rel {:>11.3e} probes {:>4} {}",
            r.name,
            r.max_rel,
            r.probes,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(RecorrError::NonFinite(format!(
            "{failed} of {} gradient checks failed",
            reports.len()
        )));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

#[derive(Serialize)]
struct BenchEntry {
    radius: usize,
    corr_channels: usize,
    seconds: f64,
}

#[derive(Serialize)]
struct BenchReport {
    dims: [usize; 3],
    channels: usize,
    reps: usize,
    seed: u64,
    warp_seconds: f64,
    correlation: Vec<BenchEntry>,
}

fn random_volume(channels: usize, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Volume<f32> {
    let mut v = Volume::zeros(channels, dims);
    for e in v.data.iter_mut() {
        *e = rng.gen_range(-1.0..1.0);
    }
    v
}

pub fn bench(radii: &[usize], dim: usize, channels: usize, reps: usize, seed: u64) -> Result<()> {
    if radii.is_empty() || dim == 0 || channels == 0 || reps == 0 {
        return Err(RecorrError::InvalidArgument(
            "bench needs nonempty radii and positive dims/channels/reps".into(),
        ));
    }
    let dims = [dim, dim, dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fixed = random_volume(channels, dims, &mut rng);
    let moving = random_volume(channels, dims, &mut rng);
    let mut field = Volume::zeros(3, dims);
    for e in field.data.iter_mut() {
        *e = rng.gen_range(-0.45..0.45);
    }

    // Inputs are registered on the tape once; only the kernel call is
    // timed, taking the minimum over `reps` runs after one warm-up.
    let mut correlation = Vec::new();
    for &radius in radii {
        let mut tape = Tape::<f32>::new();
        let f = tape.input(fixed.clone());
        let m = tape.input(moving.clone());
        tape.correlation(f, m, radius)?;
        let mut best = f64::INFINITY;
        for _ in 0..reps {
            let t = Instant::now();
            tape.correlation(f, m, radius)?;
            best = best.min(t.elapsed().as_secs_f64());
        }
        correlation.push(BenchEntry {
            radius,
            corr_channels: radius * radius * radius,
            seconds: best,
        });
    }
    let warp_seconds = {
        let mut tape = Tape::<f32>::new();
        let m = tape.input(moving.clone());
        let u = tape.input(field.clone());
        tape.warp(m, u)?;
        let mut best = f64::INFINITY;
        for _ in 0..reps {
            let t = Instant::now();
            tape.warp(m, u)?;
            best = best.min(t.elapsed().as_secs_f64());
        }
        best
    };

    let report = BenchReport {
        dims,
        channels,
        reps,
        seed,
        warp_seconds,
        correlation,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| RecorrError::Data(format!("serializing bench report: {e}")))?;
    println!("{json}");
    Ok(())
}
