//! Temporary probe: full dress rehearsal of the desk-scale learning
//! experiment (dataset, 50-epoch training, held-out evaluation).

use std::time::Instant;

use recorr::losses::LossConfig;
use recorr::pyramid::{IterationSchedule, ModelSpec, Variant};
use recorr::synth::{generate_dataset, DatasetSpec, PerturbKind, PhantomSpec, Split};
use recorr::trainer::{evaluate, train, EvalModel, TrainConfig};
use recorr::updater::UpdaterConfig;

#[test]
#[ignore]
fn probe_full_training() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let spec = DatasetSpec {
        seed: 7,
        train: 40,
        val: 8,
        test: 8,
        phantom: PhantomSpec {
            noise_sigma: 0.12,
            ..PhantomSpec::default()
        },
        perturb: PerturbKind::Svf {
            grid_divisor: 4,
            max_disp: 8.0,
        },
    };
    let manifest = generate_dataset(dir.path(), &spec).unwrap();
    let train_pairs = recorr::synth::load_split(dir.path(), &manifest, Split::Train).unwrap();
    let val_pairs = recorr::synth::load_split(dir.path(), &manifest, Split::Val).unwrap();
    let test_pairs = recorr::synth::load_split(dir.path(), &manifest, Split::Test).unwrap();
    eprintln!("dataset: {:.1}s", t0.elapsed().as_secs_f64());

    let cfg = TrainConfig {
        seed: 11,
        epochs: 50,
        loss: LossConfig {
            dice_weight: 0.5,
            ..LossConfig::default()
        },
        model: ModelSpec {
            updater: UpdaterConfig { motion_channels: 8 },
            refine_channels: 8,
            ..ModelSpec::default()
        },
        schedule: IterationSchedule::small(),
        variant: Variant::Standard,
        ..TrainConfig::default()
    };
    let ckpt = dir.path().join("model.ckpt");
    let t1 = Instant::now();
    let mut log = Vec::new();
    let outcome = train(&train_pairs, &val_pairs, &cfg, &ckpt, Some(&mut log)).unwrap();
    eprintln!(
        "train: {:.1} min, best epoch {} val dice {:.4}",
        t1.elapsed().as_secs_f64() / 60.0,
        outcome.best_epoch,
        outcome.best_val_dice
    );
    for rec in &outcome.history {
        if rec.epoch % 5 == 0 || rec.epoch == cfg.epochs - 1 {
            eprintln!(
                "  epoch {:2}: loss {:.6} val_dice {:.4} clipped {}",
                rec.epoch, rec.mean_loss, rec.val_dice, rec.clipped_steps
            );
        }
    }

    let store = recorr::diff::load_checkpoint::<f32>(&ckpt).unwrap();
    for variant in [Variant::Standard, Variant::Diffeo] {
        let report = evaluate(
            &test_pairs,
            &cfg.model,
            &cfg.schedule,
            variant,
            &EvalModel::Learned(&store),
        )
        .unwrap();
        let worst_fold = report
            .pairs
            .iter()
            .map(|p| p.fold_fraction)
            .fold(0.0f64, f64::max);
        eprintln!(
            "EVAL {:?}: dice {:.4} (initial {:.4}, delta {:+.4}) epe {:.4} (initial {:.4}, ratio {:.3}) fold max {:.8}",
            variant,
            report.dice.mean,
            report.dice_initial.mean,
            report.dice.mean - report.dice_initial.mean,
            report.epe.mean,
            report.epe_initial.mean,
            report.epe.mean / report.epe_initial.mean,
            worst_fold,
        );
    }
    eprintln!("total: {:.1} min", t0.elapsed().as_secs_f64() / 60.0);
}
