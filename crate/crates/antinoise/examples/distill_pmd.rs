//! Distills a quickly trained teacher into a plain backbone. The student
//! matches teacher features tap by tap (shallow to deep), then teacher
//! scores, and finally fine-tunes on cross-entropy alone; it ends with the
//! exact parameter count of a plain backbone.
//!
//!   cargo run --release --example distill_pmd

use antinoise::backbone::RefBackbone;
use antinoise::config::{derive_seed, ExperimentConfig};
use antinoise::data::make_toy_dataset;
use antinoise::eval::evaluate_accuracy;
use antinoise::pmal::{make_optimizers, pmal_train, PmalModel};
use antinoise::pmd::{pmd_train, DistillPair};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let cfg = ExperimentConfig {
        epochs: 4,
        lr: 0.02,
        ..ExperimentConfig::desk_defaults()
    };
    let (train, test) = make_toy_dataset(4, 25, 64, 1).split_per_class(20, 5)?;

    println!("training a quick teacher ({} epochs)...", cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
    let mut teacher = PmalModel::<f32>::new(&cfg, train.num_classes(), &mut rng)?;
    let mut opts = make_optimizers(&teacher, cfg.sam_config(), false);
    pmal_train(&mut teacher, &mut opts, &train, &test, &cfg, 0, |_| Ok(()))?;
    let teacher_acc = evaluate_accuracy(&teacher, &test, 0.0, 0, cfg.batch_size)?;
    println!("teacher test accuracy: {teacher_acc:.3}");

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "student-init"));
    let student = RefBackbone::<f32>::new(
        cfg.input_size,
        cfg.input_size,
        train.num_classes(),
        &teacher.backbone.tap_stages,
        &mut rng,
    )?;
    let plain_params = student.param_count();
    let mut pair = DistillPair::new(teacher, student, cfg.alpha)?;

    println!("distilling (first half) and fine-tuning (second half)...");
    pmd_train(&mut pair, &train, &test, &cfg, 0, |st| {
        println!(
            "epoch {:>3}  phase {}  l_feat_1 {:>8.3}  l_score {:>8.3}  l_ce {:>6.3}  val {:.3}",
            st.epoch,
            if st.fine_tuning { 2 } else { 1 },
            st.row.get("l_feat_1").unwrap_or(f64::NAN),
            st.row.get("l_score").unwrap_or(f64::NAN),
            st.row.get("l_ce").unwrap_or(f64::NAN),
            st.row.get("val_acc").unwrap_or(f64::NAN),
        );
        Ok(())
    })?;

    let student_acc = evaluate_accuracy(&pair.student, &test, 0.0, 0, cfg.batch_size)?;
    println!("student test accuracy: {student_acc:.3}");
    println!(
        "student parameters: {} (plain backbone: {plain_params}) -- zero inference overhead",
        pair.student.param_count()
    );
    Ok(())
}
