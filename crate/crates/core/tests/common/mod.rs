#![allow(dead_code)]

use std::path::Path;

use pixproto::pseudo::StaticLabelConfig;
use pixproto::synth::Dataset;
use pixproto::trainer::TrainConfig;

/// Small enough that a full train run takes well under a second.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk_preset();
    cfg.warmup_iterations = 20;
    cfg.iterations = 10;
    cfg.static_labels = StaticLabelConfig {
        fraction: 0.3,
        refresh_interval: 4,
    };
    cfg.encoder.widths = vec![4, 6];
    cfg.data.scene.height = 16;
    cfg.data.scene.width = 16;
    cfg.data.source_scenes = 8;
    cfg.data.target_scenes = 6;
    cfg.data.eval_scenes = 3;
    cfg.alignment_pixels = 16;
    cfg.embedding_pixels = 20;
    cfg
}

pub fn dataset(cfg: &TrainConfig) -> Dataset {
    let d = &cfg.data;
    Dataset::generate(&d.scene, &d.shift, d.source_scenes, d.target_scenes, d.eval_scenes).unwrap()
}

pub fn write_config(dir: &Path, name: &str, cfg: &TrainConfig) -> String {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

pub fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let k = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.iter().map(|r| r[k].parse().unwrap()).collect()
}
