//! Static (per-class top fraction by confidence), dynamic (prototype
//! similarity above a threshold) and hybrid pseudo labels on one target scene
//! of a briefly warmed-up model.

use pixproto::encoder::forward;
use pixproto::prototypes::masked_average_pool;
use pixproto::pseudo::{dynamic_labels, hybrid_fuse, label_metrics, static_labels, StaticLabelConfig};
use pixproto::synth::Dataset;
use pixproto::trainer::{warmup, TrainConfig};

fn main() -> pixproto::Result<()> {
    let mut cfg = TrainConfig::desk_preset();
    cfg.warmup_iterations = 150;
    let d = &cfg.data;
    let data = Dataset::generate(&d.scene, &d.shift, d.source_scenes, d.target_scenes, d.eval_scenes)?;
    let view = data.training_view();
    let eval = data.evaluation_handle();
    let params = warmup(&cfg, &view)?;

    let src = view.source(0);
    let out_s = forward(&params, &src.image)?;
    let ys = src.ground_truth.resample_nearest(out_s.features.height(), out_s.features.width());
    let protos = masked_average_pool(&out_s.features, &ys)?;

    let target = view.target(0);
    let out_t = forward(&params, target.image)?;
    let (fh, fw) = (out_t.features.height(), out_t.features.width());
    let truth = eval.target_ground_truth(0).resample_nearest(fh, fw);
    let classes = cfg.classes();

    let fixed = static_labels(&out_t.probs, &StaticLabelConfig { fraction: 0.3, refresh_interval: 1 })?;
    println!("{:<22} {:>8} {:>9}", "labels", "density", "accuracy");
    let show = |name: &str, y: &pixproto::maps::LabelMap| -> pixproto::Result<()> {
        let r = label_metrics(y, &truth)?;
        println!("{name:<22} {:>8.3} {:>9.3}", r.density, r.accuracy);
        Ok(())
    };
    show("static q=0.3", &fixed)?;
    for thr in [0.5, 0.75, 0.9] {
        let dynamic = dynamic_labels(&out_t.features, &protos, thr, classes)?.labels;
        show(&format!("dynamic T={thr}"), &dynamic)?;
        show(&format!("hybrid  T={thr}"), &hybrid_fuse(&dynamic, &fixed)?)?;
    }
    Ok(())
}
