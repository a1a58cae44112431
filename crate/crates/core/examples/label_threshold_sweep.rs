//! Density and accuracy of each pseudo-label variant over the target
//! training set as the dynamic threshold varies, halfway through adaptation.

use pixproto::synth::Dataset;
use pixproto::trainer::{TrainConfig, Trainer};

fn main() -> pixproto::Result<()> {
    let mut cfg = TrainConfig::desk_preset();
    cfg.warmup_iterations = 200;
    cfg.iterations = 200;
    let d = &cfg.data;
    let data = Dataset::generate(&d.scene, &d.shift, d.source_scenes, d.target_scenes, d.eval_scenes)?;
    let eval = data.evaluation_handle();
    let mut trainer = Trainer::new(cfg.clone(), data.training_view())?;
    for _ in 0..cfg.iterations / 2 {
        trainer.step(None)?;
    }
    let thresholds = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95];
    let snaps = trainer.label_snapshots(&eval, &thresholds, None)?;
    println!(
        "{:>5} | {:>13} | {:>13} | {:>13} | {:>13}",
        "T", "static", "dyn w/o cal", "dyn w/ cal", "hybrid"
    );
    for s in &snaps {
        let cell = |r: &pixproto::pseudo::PseudoLabelReport| format!("{:.3} / {:.3}", r.density, r.accuracy);
        println!(
            "{:>5} | {} | {} | {} | {}",
            s.threshold,
            cell(&s.static_labels),
            cell(&s.dynamic_uncalibrated),
            cell(&s.dynamic),
            cell(&s.hybrid)
        );
    }
    println!("(density / accuracy)");
    Ok(())
}
