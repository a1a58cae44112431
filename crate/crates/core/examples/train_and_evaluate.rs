//! Warm up on labelled source scenes, adapt to the unlabelled target domain,
//! and compare target mIoU before and after. Prints a few metric rows.
//!
//! `cargo run --release --example train_and_evaluate -- [config.json]`

use pixproto::synth::Dataset;
use pixproto::trainer::eval::{evaluate, feature_alignment};
use pixproto::trainer::{TrainConfig, Trainer};

fn main() -> pixproto::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => TrainConfig::load(path.as_ref())?,
        None => {
            let mut c = TrainConfig::desk_preset();
            c.warmup_iterations = 200;
            c.iterations = 200;
            c
        }
    };
    let d = &cfg.data;
    let data = Dataset::generate(&d.scene, &d.shift, d.source_scenes, d.target_scenes, d.eval_scenes)?;
    let eval = data.evaluation_handle();

    let mut trainer = Trainer::new(cfg.clone(), data.training_view())?;
    let before = evaluate(&trainer.state().params, &eval)?;
    println!("after warmup: target mIoU {:.3}", before.miou);

    let every = (cfg.iterations / 5).max(1);
    trainer.run(None, |t, r| {
        if t.state().iteration % every == 0 {
            println!(
                "iter {:>5}  lr {:.4}  loss {:.4}  seg_T {:.4}  fcl {:.4}  bcl {:.4}",
                t.state().iteration,
                r.lr,
                r.loss.total,
                r.loss.parts.seg_target,
                r.loss.parts.fcl,
                r.loss.parts.bcl
            );
        }
        Ok(())
    })?;

    let params = &trainer.state().params;
    let after = evaluate(params, &eval)?;
    println!("after adaptation: target mIoU {:.3}", after.miou);
    for (c, iou) in after.iou.iter().enumerate() {
        if let Some(v) = iou {
            println!("  {:<8} {v:.3}", cfg.data.scene.class_names[c]);
        }
    }
    let a = feature_alignment(params, &eval, 10, 300, cfg.seed)?;
    println!("alignment: same {:.3}  different {:.3}  gap {:.3}", a.same_class, a.different_class, a.gap);
    Ok(())
}
