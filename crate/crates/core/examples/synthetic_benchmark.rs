//! Generate the synthetic source/target benchmark, print per-domain colour
//! statistics, and dump a few scenes as PNGs.
//!
//! `cargo run --example synthetic_benchmark -- [out_dir]`

use std::path::PathBuf;

use pixproto::io::dump_scene;
use pixproto::synth::{generate, Dataset, Domain, DomainShift, SceneSpec};

fn main() -> pixproto::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/benchmark".into()));
    let spec = SceneSpec::default();
    let shift = DomainShift::benchmark(1.0);
    let data = Dataset::generate(&spec, &shift, 40, 40, 10)?;
    let view = data.training_view();

    // mean RGB per class in each domain: the shift shows up as an offset
    let mut sums = vec![[[0.0f64; 3]; 2]; spec.classes()];
    let mut counts = vec![[0usize; 2]; spec.classes()];
    for i in 0..40 {
        let s = view.source(i);
        let t = generate(&spec, &shift, i as u64, Domain::Target);
        for (d, scene) in [(0, s), (1, &t)] {
            for p in 0..scene.ground_truth.num_pixels() {
                let c = scene.ground_truth.get(p).unwrap();
                counts[c][d] += 1;
                for k in 0..3 {
                    sums[c][d][k] += scene.image.pixel(p)[k];
                }
            }
        }
    }
    println!("{:<10} {:>24} {:>24}", "class", "source rgb", "target rgb");
    for c in 0..spec.classes() {
        let mean = |d: usize| sums[c][d].map(|v| v / counts[c][d].max(1) as f64);
        let (s, t) = (mean(0), mean(1));
        println!(
            "{:<10} {:>7.3} {:>7.3} {:>7.3}  {:>7.3} {:>7.3} {:>7.3}",
            spec.class_names[c], s[0], s[1], s[2], t[0], t[1], t[2]
        );
    }

    // the training view cannot see target ground truth
    assert!(view.target(0).ground_truth().is_err());

    for i in 0..3 {
        dump_scene(&out, &format!("source_{i}"), view.source(i), &spec, &DomainShift::none())?;
        let t = generate(&spec, &shift, i as u64, Domain::Target);
        dump_scene(&out, &format!("target_{i}"), &t, &spec, &shift)?;
    }
    println!("wrote scenes to {}", out.display());
    Ok(())
}
