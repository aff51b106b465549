//! Evaluation protocol: single-prompt scores and IoU-versus-clicks curves.
//!
//! Every instance starts from one point or one box; corrective clicks are then
//! placed at the distance-transform centre of the largest error region, so a
//! re-run reproduces the same clicks. IoU is measured at the original image
//! resolution.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Sample;
use crate::maskcore::{
    box_from_mask, iou, sample_correction_click, sample_point_in_mask, BinaryMask, ClickPlacement,
    Correction, Prompt,
};
use crate::model::PromptableModel;
use crate::pipeline::Session;
use crate::raster::RgbImage;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartMode {
    Point,
    Box,
}

impl fmt::Display for StartMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StartMode::Point => "point",
            StartMode::Box => "box",
        })
    }
}

impl FromStr for StartMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(StartMode::Point),
            "box" => Ok(StartMode::Box),
            other => Err(Error::Config(format!("unknown start mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub instances_per_image: usize,
    pub box_margin: (usize, usize),
    pub max_clicks: usize,
    pub start: StartMode,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            instances_per_image: 10,
            box_margin: (0, 10),
            max_clicks: 5,
            start: StartMode::Box,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.box_margin.0 > self.box_margin.1 {
            return Err(Error::Config(format!(
                "empty box margin range {:?}",
                self.box_margin
            )));
        }
        Ok(())
    }
}

fn initial_prompt<R: Rng + ?Sized>(gt: &BinaryMask, cfg: &EvalConfig, rng: &mut R) -> Result<Prompt> {
    Ok(match cfg.start {
        StartMode::Point => Prompt::Point(sample_point_in_mask(gt, rng)?),
        StartMode::Box => {
            let m = rng.gen_range(cfg.box_margin.0..=cfg.box_margin.1);
            Prompt::Box(box_from_mask(gt, m)?)
        }
    })
}

/// IoU after the initial prompt and after each of `max_clicks` corrections,
/// on an existing session. Early convergence repeats the final value.
pub fn run_instance_in<R: Rng + ?Sized>(
    model: &dyn PromptableModel,
    session: &Session,
    gt: &BinaryMask,
    cfg: &EvalConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if gt.is_empty() {
        return Err(Error::EmptyMask);
    }
    if gt.dims() != session.image().dims() {
        return Err(Error::shape(session.image().dims(), gt.dims()));
    }
    let mut history = vec![initial_prompt(gt, cfg, rng)?];
    let mut pred = session.decode(model, &history)?.0;
    let mut trajectory = Vec::with_capacity(cfg.max_clicks + 1);
    trajectory.push(iou(&pred, gt)?);
    while trajectory.len() <= cfg.max_clicks {
        match sample_correction_click(&pred, gt, ClickPlacement::Center, rng)? {
            Correction::Converged => {
                let last = *trajectory.last().expect("non-empty");
                trajectory.resize(cfg.max_clicks + 1, last);
            }
            Correction::Click(p) => {
                history.push(Prompt::Point(p));
                pred = session.decode(model, &history)?.0;
                trajectory.push(iou(&pred, gt)?);
            }
        }
    }
    Ok(trajectory)
}

/// Single-instance trajectory; encodes `image` first.
pub fn run_instance<R: Rng + ?Sized>(
    model: &dyn PromptableModel,
    image: &RgbImage,
    gt: &BinaryMask,
    cfg: &EvalConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if gt.is_empty() {
        return Err(Error::EmptyMask);
    }
    let session = Session::new(model, image.clone(), "")?;
    run_instance_in(model, &session, gt, cfg, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub image: usize,
    pub instance: usize,
    pub ious: Vec<f64>,
}

/// All trajectories of one dataset under one start mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGroup {
    pub dataset: String,
    pub start_mode: StartMode,
    pub config: EvalConfig,
    pub trajectories: Vec<Trajectory>,
    /// Instances skipped (empty ground truth), as `(image, instance)`.
    pub skipped: Vec<(usize, usize)>,
}

/// A published or externally measured score shown next to measured rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    pub dataset: String,
    pub start_mode: StartMode,
    pub clicks: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub groups: Vec<EvalGroup>,
    #[serde(default)]
    pub references: Vec<ReferenceRow>,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub start_mode: StartMode,
    pub clicks: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalGroup {
    pub fn max_clicks(&self) -> usize {
        self.config.max_clicks
    }

    /// IoUs of every instance after `clicks` corrections.
    pub fn column(&self, clicks: usize) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.ious[clicks]).collect()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        (0..=self.max_clicks())
            .map(|k| {
                let col = self.column(k);
                let (mean, std) = mean_std(&col);
                SummaryRow {
                    dataset: self.dataset.clone(),
                    start_mode: self.start_mode,
                    clicks: k,
                    mean,
                    std,
                    n: col.len(),
                }
            })
            .collect()
    }
}

impl EvalReport {
    pub fn summary(&self) -> Vec<SummaryRow> {
        self.groups.iter().flat_map(|g| g.summary()).collect()
    }

    pub fn group(&self, dataset: &str, start: StartMode) -> Option<&EvalGroup> {
        self.groups
            .iter()
            .find(|g| g.dataset == dataset && g.start_mode == start)
    }

    pub fn merge(&mut self, other: EvalReport) {
        self.groups.extend(other.groups);
        self.references.extend(other.references);
    }

    /// CSV with columns `dataset,start_mode,clicks,mean,std,n`. Reference
    /// rows follow the measured rows with the label in the dataset column and
    /// an empty `n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,start_mode,clicks,mean,std,n\n");
        for r in self.summary() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                csv_field(&r.dataset),
                r.start_mode,
                r.clicks,
                r.mean,
                r.std,
                r.n
            ));
        }
        for r in &self.references {
            out.push_str(&format!(
                "{},{},{},{},{},\n",
                csv_field(&format!("{} ({})", r.dataset, r.label)),
                r.start_mode,
                r.clicks,
                r.mean,
                r.std
            ));
        }
        out
    }

    /// Curves for plotting: per group, clicks with mean and std.
    pub fn plot_data(&self) -> serde_json::Value {
        let curves: Vec<_> = self
            .groups
            .iter()
            .map(|g| {
                let rows = g.summary();
                serde_json::json!({
                    "dataset": g.dataset,
                    "start_mode": g.start_mode,
                    "clicks": rows.iter().map(|r| r.clicks).collect::<Vec<_>>(),
                    "mean": rows.iter().map(|r| r.mean).collect::<Vec<_>>(),
                    "std": rows.iter().map(|r| r.std).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::json!({ "x": "clicks", "y": "iou", "curves": curves })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Parses a CSV produced by [`EvalReport::to_csv`], measured rows only.
pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    let mut offset = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line_offset = offset;
        offset += line.len() + 1;
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.rsplitn(6, ',').collect();
        let bad = |what: &str| Error::Format {
            offset: line_offset,
            message: format!("bad {what} in CSV line {}", i + 1),
        };
        if fields.len() != 6 {
            return Err(bad("field count"));
        }
        if fields[0].is_empty() {
            continue;
        }
        rows.push(SummaryRow {
            dataset: fields[5].trim_matches('"').replace("\"\"", "\""),
            start_mode: fields[4].parse().map_err(|_| bad("start mode"))?,
            clicks: fields[3].parse().map_err(|_| bad("clicks"))?,
            mean: fields[2].parse().map_err(|_| bad("mean"))?,
            std: fields[1].parse().map_err(|_| bad("std"))?,
            n: fields[0].parse().map_err(|_| bad("n"))?,
        });
    }
    Ok(rows)
}

fn image_rng(seed: u64, image: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image as u64);
    rng
}

/// Evaluates up to `instances_per_image` instances of every image.
pub fn run_dataset(
    model: &dyn PromptableModel,
    dataset: &str,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut group = EvalGroup {
        dataset: dataset.to_string(),
        start_mode: cfg.start,
        config: cfg.clone(),
        trajectories: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, sample) in samples.iter().enumerate() {
        let mut rng = image_rng(cfg.seed, i);
        let n = sample.instances.len();
        let chosen = sample_indices(&mut rng, n, cfg.instances_per_image.min(n)).into_vec();
        if chosen.is_empty() {
            continue;
        }
        let session = Session::new(model, sample.image.clone(), format!("{dataset}/{i}"))?;
        for k in chosen {
            match run_instance_in(model, &session, &sample.instances[k], cfg, &mut rng) {
                Ok(ious) => group.trajectories.push(Trajectory {
                    image: i,
                    instance: k,
                    ious,
                }),
                Err(Error::EmptyMask) => {
                    log::warn!("{dataset}: image {i} instance {k} has an empty mask; skipped");
                    group.skipped.push((i, k));
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(EvalReport {
        groups: vec![group],
        references: Vec::new(),
    })
}

/// Mean IoU after a single prompt of the given kind.
pub fn single_prompt_iou(
    model: &dyn PromptableModel,
    samples: &[Sample],
    start: StartMode,
    box_margin: (usize, usize),
    seed: u64,
) -> Result<f64> {
    let cfg = EvalConfig {
        max_clicks: 0,
        start,
        box_margin,
        seed,
        ..Default::default()
    };
    let report = run_dataset(model, "validation", samples, &cfg)?;
    Ok(mean_std(&report.groups[0].column(0)).0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub plot: PathBuf,
}

/// Writes `report.csv`, `report.json` and `curves.json` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<ReportPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = ReportPaths {
        csv: dir.join("report.csv"),
        json: dir.join("report.json"),
        plot: dir.join("curves.json"),
    };
    std::fs::write(&paths.csv, report.to_csv())?;
    std::fs::write(&paths.json, serde_json::to_vec_pretty(report)?)?;
    std::fs::write(&paths.plot, serde_json::to_vec_pretty(&report.plot_data())?)?;
    Ok(paths)
}
