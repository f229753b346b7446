//! Zoo-backed encoding and the layer-sweep evaluation report.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::ModelParams;
use crate::image::RgbImage;
use crate::overfit::{encode_overfit, image_anchors, ImageAnchors, OverfitConfig, OverfitEncoding, OverfitError};
use crate::pipeline::{encode_baseline, Baseline, PipelineError};
use crate::rd::{bd_rate, bit_saving, RateUnit, RdCurve, RdError, RdPoint};
use crate::train::{TrainError, Zoo};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Overfit(#[from] OverfitError),
    #[error(transparent)]
    Rd(#[from] RdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Config(String),
}

/// A zoo with every usable checkpoint loaded.
#[derive(Clone, Debug)]
pub struct LoadedZoo {
    pub zoo: Zoo,
    models: BTreeMap<u8, ModelParams>,
}

/// Result of encoding one image with a zoo model.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub quality: u8,
    pub baseline: Baseline,
    pub anchors: Option<ImageAnchors>,
    pub overfit: Option<OverfitEncoding>,
}

impl Encoded {
    /// The bytes to store: the overfit container when present, else the baseline.
    pub fn bytes(&self) -> &[u8] {
        match &self.overfit {
            Some(o) => &o.bytes,
            None => &self.baseline.bytes,
        }
    }
}

impl LoadedZoo {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, EvalError> {
        let zoo = Zoo::open(dir)?;
        let mut models = BTreeMap::new();
        for e in &zoo.manifest.models {
            if zoo.usable(e.quality).is_ok() {
                models.insert(e.quality, zoo.model(e.quality)?);
            }
        }
        if models.is_empty() {
            return Err(EvalError::Config("zoo has no usable models".into()));
        }
        Ok(Self { zoo, models })
    }

    pub fn qualities(&self) -> Vec<u8> {
        self.models.keys().copied().collect()
    }

    pub fn model(&self, quality: u8) -> Result<&ModelParams, EvalError> {
        self.models
            .get(&quality)
            .ok_or_else(|| TrainError::Manifest(format!("quality {quality} not in zoo")).into())
    }

    /// Per-image anchors from `base` and a baseline encode at a neighbouring quality.
    /// Neighbours are tried closest first; the first that yields increasing anchors wins.
    pub fn anchors(&self, image: &RgbImage, base: &Baseline) -> Result<ImageAnchors, EvalError> {
        let q = base.container.header.quality;
        let mut last = None;
        for nq in self.zoo.neighbors(q)? {
            let other = encode_baseline(self.model(nq)?, image, nq)?;
            let fallback = match (self.zoo.usable(q)?.anchor, self.zoo.usable(nq)?.anchor) {
                (Some(a), Some(b)) => Some((a, b)),
                _ => None,
            };
            match image_anchors(base, &other, fallback) {
                Ok(a) => return Ok(a),
                Err(e) => {
                    warn!("quality {q}: anchors with neighbour {nq} unusable ({e})");
                    last = Some(e);
                }
            }
        }
        Err(match last {
            Some(e) => e.into(),
            None => TrainError::Manifest(format!("quality {q} has no usable neighbour")).into(),
        })
    }

    /// Baseline encode, plus the overfit encode when `overfit` is given.
    pub fn encode(&self, image: &RgbImage, quality: u8, overfit: Option<&OverfitConfig>) -> Result<Encoded, EvalError> {
        let params = self.model(quality)?;
        let baseline = encode_baseline(params, image, quality)?;
        let Some(cfg) = overfit else {
            return Ok(Encoded {
                quality,
                baseline,
                anchors: None,
                overfit: None,
            });
        };
        let anchors = self.anchors(image, &baseline)?;
        let enc = encode_overfit(params, &baseline, anchors.payload, cfg)?;
        Ok(Encoded {
            quality,
            baseline,
            anchors: Some(anchors),
            overfit: Some(enc),
        })
    }
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub layers: Vec<usize>,
    /// Empty means every usable quality.
    pub qualities: Vec<u8>,
    /// `layers` is overridden per sweep entry.
    pub overfit: OverfitConfig,
}

/// One image at one quality with one layer count.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub image: String,
    pub quality: u8,
    pub layers: usize,
    pub width: usize,
    pub height: usize,
    pub baseline_bits: u64,
    pub baseline_psnr: f64,
    pub overfit_bits: u64,
    pub overfit_psnr: f64,
    /// `1 - overfit_bits / R(overfit_psnr)` with whole-container anchors.
    pub bit_saving: f64,
    pub update_bits: u64,
    pub q: f32,
    pub best_iteration: usize,
    pub initial_acc: f64,
    pub best_acc: f64,
    pub per_image_anchors: bool,
}

/// Mean saving over the images of one (quality, l) cell, or over all qualities when `quality` is `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub quality: Option<u8>,
    pub layers: usize,
    pub images: usize,
    pub mean_bit_saving: f64,
    /// Only on the all-quality rows; `None` when the curves do not support it.
    pub bd_rate: Option<f64>,
    /// Argmax of mean saving over `l` within the same quality group.
    pub best_layers: usize,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
}

impl EvalReport {
    /// Layer count with the highest mean saving across all qualities.
    pub fn best_layers(&self) -> Option<usize> {
        self.summary.iter().find(|s| s.quality.is_none()).map(|s| s.best_layers)
    }
}

pub const REPORT_HEADER: &str = "image,quality,layers,width,height,baseline_bits,baseline_psnr_db,overfit_bits,\
overfit_psnr_db,bit_saving,update_bits,q,best_iteration,initial_acc,best_acc,anchors";

pub const SUMMARY_HEADER: &str = "quality,layers,images,mean_bit_saving,bd_rate_percent,best_layers";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_report_csv(rows: &[ReportRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.image),
            r.quality,
            r.layers,
            r.width,
            r.height,
            r.baseline_bits,
            r.baseline_psnr,
            r.overfit_bits,
            r.overfit_psnr,
            r.bit_saving,
            r.update_bits,
            r.q,
            r.best_iteration,
            r.initial_acc,
            r.best_acc,
            if r.per_image_anchors { "image" } else { "validation" }
        )?;
    }
    Ok(())
}

pub fn write_summary_csv(rows: &[SummaryRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for s in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.quality.map_or("all".to_string(), |q| q.to_string()),
            s.layers,
            s.images,
            s.mean_bit_saving,
            s.bd_rate.map_or(String::new(), |v| v.to_string()),
            s.best_layers
        )?;
    }
    Ok(())
}

/// Runs every image at every selected quality and layer count. Jobs run on the rayon pool;
/// row order is deterministic (image, quality, layers).
pub fn run_eval(zoo: &LoadedZoo, images: &[(String, RgbImage)], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let qualities = if cfg.qualities.is_empty() {
        zoo.qualities()
    } else {
        cfg.qualities.clone()
    };
    if cfg.layers.is_empty() || images.is_empty() {
        return Err(EvalError::Config("nothing to evaluate".into()));
    }
    let jobs: Vec<(usize, u8)> = (0..images.len())
        .flat_map(|i| qualities.iter().map(move |&q| (i, q)))
        .collect();
    let per_job: Vec<Vec<ReportRow>> = jobs
        .par_iter()
        .map(|&(i, q)| eval_job(zoo, &images[i].0, &images[i].1, q, cfg))
        .collect::<Result<_, _>>()?;
    let rows: Vec<ReportRow> = per_job.into_iter().flatten().collect();
    let summary = summarize(&rows, &cfg.layers);
    Ok(EvalReport { rows, summary })
}

fn eval_job(zoo: &LoadedZoo, name: &str, image: &RgbImage, quality: u8, cfg: &EvalConfig) -> Result<Vec<ReportRow>, EvalError> {
    let params = zoo.model(quality)?;
    let base = encode_baseline(params, image, quality)?;
    let anchors = zoo.anchors(image, &base)?;
    let mut rows = Vec::with_capacity(cfg.layers.len());
    for &l in &cfg.layers {
        let oc = OverfitConfig {
            layers: l,
            ..cfg.overfit.clone()
        };
        let enc = encode_overfit(params, &base, anchors.payload, &oc)?;
        let best = &enc.result.best;
        let bits = enc.total_bits();
        let row = ReportRow {
            image: name.to_string(),
            quality,
            layers: l,
            width: image.width(),
            height: image.height(),
            baseline_bits: base.total_bits(),
            baseline_psnr: base.psnr,
            overfit_bits: bits,
            overfit_psnr: best.eval.psnr,
            bit_saving: bit_saving(bits as f64, &anchors.container, best.eval.psnr),
            update_bits: best.eval.update.payload_bits(),
            q: best.eval.update.extra.q(),
            best_iteration: best.iteration,
            initial_acc: enc.result.initial_acc,
            best_acc: best.eval.acc,
            per_image_anchors: anchors.per_image,
        };
        info!(
            "{name} q{quality} l={l}: saving {:+.3}% (acc {:.4} -> {:.4})",
            100.0 * row.bit_saving,
            row.initial_acc,
            row.best_acc
        );
        rows.push(row);
    }
    Ok(rows)
}

fn mean(v: impl Iterator<Item = f64>) -> (f64, usize) {
    let (s, n) = v.fold((0.0, 0), |(s, n), x| (s + x, n + 1));
    (if n == 0 { f64::NAN } else { s / n as f64 }, n)
}

fn argmax_layers(cells: &[(usize, f64)]) -> usize {
    cells
        .iter()
        .filter(|c| c.1.is_finite())
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |c| c.0)
}

/// Per-(quality, l) means, all-quality means per l, and BD-rate per l against the baseline curve.
pub fn summarize(rows: &[ReportRow], layers: &[usize]) -> Vec<SummaryRow> {
    let mut qualities: Vec<u8> = rows.iter().map(|r| r.quality).collect();
    qualities.sort_unstable();
    qualities.dedup();
    let mut out = Vec::new();
    let groups = qualities.iter().map(|&q| Some(q)).chain(std::iter::once(None));
    for quality in groups {
        let cells: Vec<(usize, f64, usize)> = layers
            .iter()
            .map(|&l| {
                let (m, n) = mean(
                    rows.iter()
                        .filter(|r| r.layers == l && quality.is_none_or(|q| r.quality == q))
                        .map(|r| r.bit_saving),
                );
                (l, m, n)
            })
            .collect();
        let best = argmax_layers(&cells.iter().map(|c| (c.0, c.1)).collect::<Vec<_>>());
        for (l, m, n) in cells {
            out.push(SummaryRow {
                quality,
                layers: l,
                images: n,
                mean_bit_saving: m,
                bd_rate: if quality.is_none() { layer_bd_rate(rows, &qualities, l) } else { None },
                best_layers: best,
            });
        }
    }
    out
}

/// Curve of mean bits-per-pixel against mean PSNR, one point per quality.
fn mean_curve(rows: &[ReportRow], qualities: &[u8], l: usize, overfit: bool) -> Result<RdCurve, RdError> {
    let points = qualities
        .iter()
        .map(|&q| {
            let sel: Vec<&ReportRow> = rows.iter().filter(|r| r.quality == q && r.layers == l).collect();
            let bpp = |r: &ReportRow| {
                let bits = if overfit { r.overfit_bits } else { r.baseline_bits };
                bits as f64 / (r.width * r.height) as f64
            };
            let psnr = |r: &ReportRow| if overfit { r.overfit_psnr } else { r.baseline_psnr };
            RdPoint::new(mean(sel.iter().map(|r| bpp(r))).0, mean(sel.iter().map(|r| psnr(r))).0)
        })
        .collect();
    RdCurve::new(RateUnit::BitsPerPixel, points)
}

fn layer_bd_rate(rows: &[ReportRow], qualities: &[u8], l: usize) -> Option<f64> {
    let result = mean_curve(rows, qualities, l, false)
        .and_then(|base| bd_rate(&base, &mean_curve(rows, qualities, l, true)?));
    match result {
        Ok(v) => Some(v),
        Err(e) => {
            warn!("no BD-rate for l={l}: {e}");
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(q: u8, l: usize, saving: f64) -> ReportRow {
        ReportRow {
            image: "a,b".into(),
            quality: q,
            layers: l,
            width: 8,
            height: 8,
            baseline_bits: 100 * q as u64,
            baseline_psnr: 20.0 + q as f64,
            overfit_bits: 90 * q as u64,
            overfit_psnr: 20.0 + q as f64,
            bit_saving: saving,
            update_bits: 0,
            q: 10.0,
            best_iteration: 0,
            initial_acc: 1.0,
            best_acc: 1.0,
            per_image_anchors: true,
        }
    }

    #[test]
    fn summary_means_and_best_layer() {
        let rows = vec![row(1, 1, 0.01), row(1, 2, 0.03), row(2, 1, 0.05), row(2, 2, 0.01)];
        let s = summarize(&rows, &[1, 2]);
        assert_eq!(s.len(), 6);
        let all: Vec<&SummaryRow> = s.iter().filter(|r| r.quality.is_none()).collect();
        assert!((all[0].mean_bit_saving - 0.03).abs() < 1e-15);
        assert!((all[1].mean_bit_saving - 0.02).abs() < 1e-15);
        assert!(all.iter().all(|r| r.best_layers == 1));
        assert_eq!(s[0].best_layers, 2);
        assert_eq!(s[2].best_layers, 1);
        // Two qualities are too few points for a BD-rate.
        assert_eq!(all[0].bd_rate, None);
    }

    #[test]
    fn bd_rate_of_uniform_ten_percent_saving() {
        let rows: Vec<ReportRow> = (1..=5).map(|q| row(q, 1, 0.1)).collect();
        let s = summarize(&rows, &[1]);
        let bd = s.iter().find(|r| r.quality.is_none()).unwrap().bd_rate.unwrap();
        assert!((bd + 10.0).abs() < 1e-9);
    }

    #[test]
    fn report_csv_quotes_names() {
        let mut buf = Vec::new();
        write_report_csv(&[row(1, 1, 0.0)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert!(line.starts_with("\"a,b\",1,1,"));
        assert_eq!(REPORT_HEADER.split(',').count(), 16);
    }
}
