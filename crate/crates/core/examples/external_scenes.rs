//! Load image/label PNG pairs through the same path the scene dumps use and
//! score a warmed-up model on them. With no arguments it dumps two synthetic
//! target scenes first and reads those back.
//!
//! `cargo run --example external_scenes -- [image.png labels.png]...`

use std::path::PathBuf;

use pixproto::io::{dump_scene, load_scene_pngs};
use pixproto::synth::{generate, Dataset, Domain};
use pixproto::trainer::eval::{accumulate_confusion, iou_from_confusion, predict};
use pixproto::trainer::{warmup, TrainConfig};

fn main() -> pixproto::Result<()> {
    let mut cfg = TrainConfig::desk_preset();
    cfg.warmup_iterations = 150;
    let d = &cfg.data;
    let data = Dataset::generate(&d.scene, &d.shift, d.source_scenes, d.target_scenes, 0)?;
    let params = warmup(&cfg, &data.training_view())?;

    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let pairs: Vec<(PathBuf, PathBuf)> = if args.is_empty() {
        let dir = std::env::temp_dir().join("pixproto_external");
        (0..2)
            .map(|i| {
                let scene = generate(&d.scene, &d.shift, 1000 + i, Domain::Target);
                dump_scene(&dir, &format!("ext_{i}"), &scene, &d.scene, &d.shift)?;
                Ok((dir.join(format!("ext_{i}_image.png")), dir.join(format!("ext_{i}_labels.png"))))
            })
            .collect::<pixproto::Result<_>>()?
    } else {
        args.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect()
    };

    let c = cfg.classes();
    let mut confusion = vec![vec![0u64; c]; c];
    for (image, labels) in &pairs {
        let (img, y) = load_scene_pngs(image, labels, c)?;
        accumulate_confusion(&predict(&params, &img)?, &y, &mut confusion)?;
        println!("scored {}", image.display());
    }
    println!("mIoU {:.3}", iou_from_confusion(&confusion).miou);
    Ok(())
}
