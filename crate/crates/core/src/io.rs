//! File formats: label PNGs (one 8-bit channel holding the class index,
//! 255 = unlabelled), colourised label PNGs, RGB image PNGs, scene dumps, and
//! the CSV tables written by the command-line tool.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::encoder::ImageGrid;
use crate::error::{Error, Result};
use crate::maps::{FeatureMap, LabelMap, UNLABELED};
use crate::pseudo::PseudoLabelReport;
use crate::synth::{DomainShift, LabeledScene, SceneSpec};
use crate::trainer::ablation::AblationReport;
use crate::trainer::eval::{EvalReport, LabelSnapshot};
use crate::trainer::StepRecord;

pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let img = GrayImage::from_raw(labels.width() as u32, labels.height() as u32, labels.raw().to_vec())
        .expect("buffer matches dimensions");
    img.save(path)?;
    Ok(())
}

pub fn read_label_png(path: &Path, classes: usize) -> Result<LabelMap> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    LabelMap::from_vec(h as usize, w as usize, classes, img.into_raw())
}

/// Fixed palette; unlabelled pixels are black.
pub fn class_color(class: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 10] = [
        [140, 140, 128],
        [128, 64, 128],
        [70, 130, 180],
        [220, 60, 50],
        [60, 180, 75],
        [240, 200, 30],
        [150, 80, 200],
        [30, 200, 200],
        [250, 130, 180],
        [120, 80, 40],
    ];
    PALETTE[class % PALETTE.len()]
}

pub fn write_color_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let w = labels.width();
    let img = RgbImage::from_fn(w as u32, labels.height() as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb(labels.get(p).map_or([0, 0, 0], class_color))
    });
    img.save(path)?;
    Ok(())
}

/// Channels in `[0, 1]` are quantised to 8 bits.
pub fn write_image_png(path: &Path, image: &ImageGrid) -> Result<()> {
    if image.dim() != 3 {
        return Err(Error::contract("write_image_png: expected 3 channels"));
    }
    let w = image.width();
    let img = RgbImage::from_fn(w as u32, image.height() as u32, |x, y| {
        let px = image.pixel(y as usize * w + x as usize);
        Rgb([0, 1, 2].map(|k| (px[k].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path)?;
    Ok(())
}

pub fn read_image_png(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    FeatureMap::from_vec(h as usize, w as usize, 3, data)
}

/// Sidecar of a dumped scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub index: u64,
    pub domain: crate::synth::Domain,
    pub spec: SceneSpec,
    pub shift: DomainShift,
}

/// Writes `<stem>_image.png`, `<stem>_labels.png` and `<stem>.json` into `dir`.
pub fn dump_scene(dir: &Path, stem: &str, scene: &LabeledScene, spec: &SceneSpec, shift: &DomainShift) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_image_png(&dir.join(format!("{stem}_image.png")), &scene.image)?;
    write_label_png(&dir.join(format!("{stem}_labels.png")), &scene.ground_truth)?;
    let sidecar = SceneSidecar {
        index: scene.index,
        domain: scene.domain,
        spec: spec.clone(),
        shift: shift.clone(),
    };
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Reads an image/label PNG pair in the dump format. Works for any
/// externally produced pair with the same encoding.
pub fn load_scene_pngs(image: &Path, labels: &Path, classes: usize) -> Result<(ImageGrid, LabelMap)> {
    let img = read_image_png(image)?;
    let y = read_label_png(labels, classes)?;
    if img.height() != y.height() || img.width() != y.width() {
        return Err(Error::contract("scene image and label PNGs differ in size"));
    }
    if y.raw().iter().any(|&v| v == UNLABELED) {
        return Err(Error::contract("scene ground truth must label every pixel"));
    }
    Ok((img, y))
}

/// Column layout of `metrics.csv`, version 1.
pub const METRICS_COLUMNS: [&str; 29] = [
    "iteration",
    "lr",
    "loss_total",
    "loss_base",
    "seg_source",
    "seg_target",
    "ent_source",
    "ent_target",
    "fcl",
    "bcl",
    "seg_source_pixels",
    "seg_target_pixels",
    "fcl_pixels",
    "bcl_pixels",
    "fcl_skipped",
    "bcl_skipped",
    "fcl_status",
    "bcl_status",
    "dynamic_status",
    "static_density",
    "static_accuracy",
    "dynamic_uncalibrated_density",
    "dynamic_uncalibrated_accuracy",
    "dynamic_density",
    "dynamic_accuracy",
    "hybrid_density",
    "hybrid_accuracy",
    "same_class_similarity",
    "different_class_similarity",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn metrics_row(r: &StepRecord) -> Vec<String> {
    let l = &r.loss;
    let label = |f: fn(&crate::trainer::StepLabelStats) -> &PseudoLabelReport| {
        (
            opt(r.labels.as_ref().map(|s| f(s).density)),
            opt(r.labels.as_ref().map(|s| f(s).accuracy)),
        )
    };
    let (sd, sa) = label(|s| &s.static_labels);
    let (ud, ua) = label(|s| &s.dynamic_uncalibrated);
    let (dd, da) = label(|s| &s.dynamic);
    let (hd, ha) = label(|s| &s.hybrid);
    vec![
        r.iteration.to_string(),
        r.lr.to_string(),
        l.total.to_string(),
        l.base.to_string(),
        l.parts.seg_source.to_string(),
        l.parts.seg_target.to_string(),
        l.parts.ent_source.to_string(),
        l.parts.ent_target.to_string(),
        l.parts.fcl.to_string(),
        l.parts.bcl.to_string(),
        l.counts.seg_source.to_string(),
        l.counts.seg_target.to_string(),
        l.counts.fcl.to_string(),
        l.counts.bcl.to_string(),
        r.fcl_skipped.to_string(),
        r.bcl_skipped.to_string(),
        r.fcl_status.as_str().into(),
        r.bcl_status.as_str().into(),
        r.dynamic_status.as_str().into(),
        sd,
        sa,
        ud,
        ua,
        dd,
        da,
        hd,
        ha,
        opt(r.similarity.map(|s| s.same_class)),
        opt(r.similarity.map(|s| s.different_class)),
    ]
}

pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path)?;
        inner.write_record(METRICS_COLUMNS)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, record: &StepRecord) -> Result<()> {
        self.inner.write_record(metrics_row(record))?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn eval_columns(classes: usize) -> Vec<String> {
    let mut cols = vec!["iteration".to_string(), "miou".to_string()];
    cols.extend((0..classes).map(|c| format!("iou_{c}")));
    cols
}

pub fn eval_row(iteration: usize, report: &EvalReport) -> Vec<String> {
    let mut row = vec![iteration.to_string(), report.miou.to_string()];
    row.extend(report.iou.iter().map(|v| opt(*v)));
    row
}

pub fn write_ablation_csvs(dir: &Path, report: &AblationReport, classes: usize) -> Result<()> {
    let mut summary = csv::Writer::from_path(dir.join("ablation_summary.csv"))?;
    summary.write_record([
        "arm",
        "seeds",
        "miou_mean",
        "miou_sd",
        "alignment_gap_mean",
        "alignment_gap_sd",
    ])?;
    for r in &report.rows {
        summary.write_record([
            r.arm.name().to_string(),
            r.seeds.to_string(),
            r.miou_mean.to_string(),
            r.miou_sd.to_string(),
            r.alignment_gap_mean.to_string(),
            r.alignment_gap_sd.to_string(),
        ])?;
    }
    summary.flush()?;

    let mut runs = csv::Writer::from_path(dir.join("ablation_runs.csv"))?;
    let mut header: Vec<String> = ["arm", "seed", "miou", "same_class_similarity", "different_class_similarity", "alignment_gap"]
        .map(String::from)
        .to_vec();
    header.extend((0..classes).map(|c| format!("iou_{c}")));
    for v in ["static", "dynamic_uncalibrated", "dynamic", "hybrid"] {
        header.push(format!("mid_{v}_density"));
        header.push(format!("mid_{v}_accuracy"));
    }
    runs.write_record(&header)?;
    for r in &report.runs {
        let mut row = vec![
            r.arm.name().to_string(),
            r.seed.to_string(),
            r.miou.to_string(),
            r.alignment.same_class.to_string(),
            r.alignment.different_class.to_string(),
            r.alignment.gap.to_string(),
        ];
        row.extend(r.iou.iter().map(|v| opt(*v)));
        match &r.mid_labels {
            Some(s) => {
                for rep in snapshot_reports(s) {
                    row.push(rep.density.to_string());
                    row.push(rep.accuracy.to_string());
                }
            }
            None => row.extend(std::iter::repeat(String::new()).take(8)),
        }
        runs.write_record(&row)?;
    }
    runs.flush()?;
    Ok(())
}

fn snapshot_reports(s: &LabelSnapshot) -> [&PseudoLabelReport; 4] {
    [&s.static_labels, &s.dynamic_uncalibrated, &s.dynamic, &s.hybrid]
}

/// One row per threshold: density and accuracy of each label variant.
pub fn write_sweep_csv(path: &Path, snapshots: &[LabelSnapshot]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["threshold".to_string()];
    for v in ["static", "dynamic_uncalibrated", "dynamic", "hybrid"] {
        header.push(format!("{v}_density"));
        header.push(format!("{v}_accuracy"));
    }
    w.write_record(&header)?;
    for s in snapshots {
        let mut row = vec![s.threshold.to_string()];
        for rep in snapshot_reports(s) {
            row.push(rep.density.to_string());
            row.push(rep.accuracy.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `domain,scene,pixel,class,f0..f{D-1}`.
pub fn write_embeddings_csv(path: &Path, rows: &[crate::trainer::eval::EmbeddingRow]) -> Result<()> {
    let mut file = std::io::BufWriter::new(File::create(path)?);
    let dim = rows.first().map_or(0, |r| r.feature.len());
    let mut header = vec!["domain".to_string(), "scene".into(), "pixel".into(), "class".into()];
    header.extend((0..dim).map(|d| format!("f{d}")));
    writeln!(file, "{}", header.join(","))?;
    for r in rows {
        let feats: Vec<String> = r.feature.iter().map(|v| v.to_string()).collect();
        writeln!(file, "{},{},{},{},{}", r.domain, r.scene, r.pixel, r.class, feats.join(","))?;
    }
    file.flush()?;
    Ok(())
}
