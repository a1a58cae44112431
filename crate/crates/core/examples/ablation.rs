//! The five cumulative arms (baseline, +FCL, +BCL, +dynamic labels, +bias
//! calibration) over a few seeds, reporting mean and sd of mIoU.
//!
//! `cargo run --release --example ablation -- [seeds, e.g. 0,1,2]`

use pixproto::synth::Dataset;
use pixproto::trainer::ablation::{run_ablation, AblationOptions, Arm};
use pixproto::trainer::TrainConfig;

fn main() -> pixproto::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|x| x.trim().parse().expect("seed")).collect())
        .unwrap_or_else(|| vec![0]);
    let cfg = TrainConfig::desk_preset();
    let d = &cfg.data;
    let data = Dataset::generate(&d.scene, &d.shift, d.source_scenes, d.target_scenes, d.eval_scenes)?;
    let report = run_ablation(&cfg, &data, &Arm::ALL, &seeds, &AblationOptions::default())?;
    println!("{:<22} {:>10} {:>8} {:>10}", "arm", "mIoU", "sd", "align gap");
    for r in &report.rows {
        println!(
            "{:<22} {:>10.4} {:>8.4} {:>10.3}",
            r.arm.name(),
            r.miou_mean,
            r.miou_sd,
            r.alignment_gap_mean
        );
    }
    Ok(())
}
