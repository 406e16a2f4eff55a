//! Average precision over rotated boxes with the PASCAL VOC matching rules,
//! precision/recall export and the JSON-lines detection format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, OrientedBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// 11-point interpolation.
    Voc07,
    /// Area under the interpolated curve.
    Voc12,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "voc07" => Ok(Protocol::Voc07),
            "voc12" => Ok(Protocol::Voc12),
            _ => Err(Error::Config(format!(
                "unknown AP protocol {:?}; use voc07 or voc12",
                s
            ))),
        }
    }
}

/// `0.50, 0.55, ..., 0.95`.
pub fn standard_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDetection {
    pub image: String,
    pub class: usize,
    pub score: f64,
    pub bbox: OrientedBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGroundTruth {
    pub image: String,
    pub class: usize,
    pub bbox: OrientedBox,
    pub difficult: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score_cutoff: f64,
    /// Interpolated: the best precision at this recall or above.
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class: usize,
    pub threshold: f64,
    pub ap: f64,
    pub points: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub name: String,
    pub num_gt: usize,
    pub num_detections: usize,
    /// One entry per threshold of the report.
    pub ap: Vec<f64>,
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub thresholds: Vec<f64>,
    /// Mean over evaluated classes, one entry per threshold.
    pub map: Vec<f64>,
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
    /// Classes with neither ground truth nor detections are left out.
    pub classes: Vec<ClassReport>,
    pub curves: Vec<PrCurve>,
}

/// Outcome of one detection after greedy matching.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Hit {
    True,
    False,
    /// Matched a difficult instance; counts as neither.
    Ignored,
}

struct ClassCurve {
    ap: f64,
    points: Vec<PrPoint>,
}

fn voc_ap(recall: &[f64], precision: &[f64], protocol: Protocol) -> f64 {
    match protocol {
        Protocol::Voc07 => {
            (0..11)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(precision)
                        .filter(|(r, _)| **r >= t)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        Protocol::Voc12 => {
            let mut mrec = vec![0.0];
            mrec.extend_from_slice(recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend_from_slice(precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len())
                .filter(|&i| mrec[i] != mrec[i - 1])
                .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
                .sum()
        }
    }
}

/// `dets` sorted by descending score; `ious[d]` lists `(gt index, IoU)` for
/// candidates in the same image.
fn class_curve(
    scores: &[f64],
    ious: &[Vec<(usize, f64)>],
    difficult: &[bool],
    threshold: f64,
    protocol: Protocol,
) -> ClassCurve {
    let npos = difficult.iter().filter(|d| !**d).count();
    let mut used = vec![false; difficult.len()];
    let hits: Vec<Hit> = ious
        .iter()
        .map(|cands| {
            let mut best: Option<(usize, f64)> = None;
            for &(g, iou) in cands {
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, iou)) if iou >= threshold => {
                    if difficult[g] {
                        Hit::Ignored
                    } else if !used[g] {
                        used[g] = true;
                        Hit::True
                    } else {
                        Hit::False
                    }
                }
                _ => Hit::False,
            }
        })
        .collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let mut cutoffs = Vec::new();
    for (h, &s) in hits.iter().zip(scores) {
        match h {
            Hit::True => tp += 1,
            Hit::False => fp += 1,
            Hit::Ignored => continue,
        }
        recall.push(if npos == 0 { 0.0 } else { tp as f64 / npos as f64 });
        precision.push(tp as f64 / (tp + fp) as f64);
        cutoffs.push(s);
    }
    let ap = if npos == 0 {
        0.0
    } else {
        voc_ap(&recall, &precision, protocol)
    };
    let mut interp = precision.clone();
    for i in (0..interp.len().saturating_sub(1)).rev() {
        interp[i] = interp[i].max(interp[i + 1]);
    }
    let mut points: Vec<PrPoint> = cutoffs
        .iter()
        .zip(&interp)
        .zip(&recall)
        .map(|((&score_cutoff, &precision), &recall)| PrPoint {
            score_cutoff,
            precision,
            recall,
        })
        .collect();
    if points.is_empty() {
        points.push(PrPoint {
            score_cutoff: f64::INFINITY,
            precision: 0.0,
            recall: 0.0,
        });
    }
    ClassCurve { ap, points }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn at_threshold(thresholds: &[f64], values: &[f64], t: f64) -> f64 {
    thresholds
        .iter()
        .position(|&x| (x - t).abs() < 1e-12)
        .map_or(f64::NAN, |i| values[i])
}

/// Greedy score-descending matching per class; each ground-truth box is
/// matched at most once. A class with no ground truth but with detections
/// scores 0; a class with neither is left out of the mean. `ap50`, `ap75`
/// and `ap50_95` are NaN when their thresholds are not in `thresholds`.
pub fn evaluate_ap(
    detections: &[EvalDetection],
    ground_truth: &[EvalGroundTruth],
    labels: &LabelMap,
    thresholds: &[f64],
    protocol: Protocol,
) -> Result<EvalReport> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidArgument(format!(
            "IoU thresholds must lie in [0, 1]: {:?}",
            thresholds
        )));
    }
    for d in detections {
        if d.class >= labels.len() || !d.score.is_finite() {
            return Err(Error::InvalidArgument(format!("bad detection {:?}", d)));
        }
    }
    if let Some(g) = ground_truth.iter().find(|g| g.class >= labels.len()) {
        return Err(Error::InvalidArgument(format!(
            "ground-truth class {} out of range",
            g.class
        )));
    }
    let mut classes = Vec::new();
    let mut curves = Vec::new();
    for c in 0..labels.len() {
        let gts: Vec<&EvalGroundTruth> = ground_truth.iter().filter(|g| g.class == c).collect();
        let mut dets: Vec<&EvalDetection> = detections.iter().filter(|d| d.class == c).collect();
        if gts.is_empty() && dets.is_empty() {
            continue;
        }
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, g) in gts.iter().enumerate() {
            by_image.entry(g.image.as_str()).or_default().push(i);
        }
        let ious: Vec<Vec<(usize, f64)>> = dets
            .iter()
            .map(|d| {
                by_image
                    .get(d.image.as_str())
                    .map(|idx| idx.iter().map(|&g| (g, rotated_iou(&d.bbox, &gts[g].bbox))).collect())
                    .unwrap_or_default()
            })
            .collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let difficult: Vec<bool> = gts.iter().map(|g| g.difficult).collect();
        let mut aps = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let cc = class_curve(&scores, &ious, &difficult, t, protocol);
            aps.push(cc.ap);
            curves.push(PrCurve {
                class: c,
                threshold: t,
                ap: cc.ap,
                points: cc.points,
            });
        }
        classes.push(ClassReport {
            class: c,
            name: labels.name(c).expect("class in range").to_string(),
            num_gt: difficult.iter().filter(|d| !**d).count(),
            num_detections: dets.len(),
            ap50: at_threshold(thresholds, &aps, 0.5),
            ap75: at_threshold(thresholds, &aps, 0.75),
            ap50_95: if thresholds == standard_thresholds().as_slice() {
                mean(&aps)
            } else {
                f64::NAN
            },
            ap: aps,
        });
    }
    let map: Vec<f64> = (0..thresholds.len())
        .map(|t| mean(&classes.iter().map(|c| c.ap[t]).collect::<Vec<_>>()))
        .collect();
    Ok(EvalReport {
        protocol,
        ap50: at_threshold(thresholds, &map, 0.5),
        ap75: at_threshold(thresholds, &map, 0.75),
        ap50_95: if thresholds == standard_thresholds().as_slice() {
            mean(&map)
        } else {
            f64::NAN
        },
        thresholds: thresholds.to_vec(),
        map,
        classes,
        curves,
    })
}

/// One CSV row of [`export_pr_curve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrRow {
    pub class: String,
    pub threshold: f64,
    pub score_cutoff: f64,
    pub precision: f64,
    pub recall: f64,
}

pub fn pr_rows(report: &EvalReport) -> Vec<PrRow> {
    let names: HashMap<usize, &str> = report.classes.iter().map(|c| (c.class, c.name.as_str())).collect();
    report
        .curves
        .iter()
        .flat_map(|curve| {
            let name = names.get(&curve.class).copied().unwrap_or_default().to_string();
            curve.points.iter().map(move |p| PrRow {
                class: name.clone(),
                threshold: curve.threshold,
                score_cutoff: p.score_cutoff,
                precision: p.precision,
                recall: p.recall,
            })
        })
        .collect()
}

/// CSV `class,threshold,score_cutoff,precision,recall`.
pub fn export_pr_curve(report: &EvalReport, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in pr_rows(report) {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pr_curve(path: &Path) -> Result<Vec<PrRow>> {
    let csv_err = |e: csv::Error| Error::Parse {
        line: e.position().map_or(0, |p| p.line() as usize),
        msg: format!("{}: {}", path.display(), e),
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// One line of the detection dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image: String,
    pub class: String,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl DetectionRecord {
    pub fn from_detection(d: &EvalDetection, labels: &LabelMap) -> Result<Self> {
        let class = labels
            .name(d.class)
            .ok_or_else(|| Error::InvalidArgument(format!("class {} not in label map", d.class)))?;
        Ok(DetectionRecord {
            image: d.image.clone(),
            class: class.to_string(),
            score: d.score,
            cx: d.bbox.cx,
            cy: d.bbox.cy,
            w: d.bbox.w,
            h: d.bbox.h,
            theta: d.bbox.theta,
        })
    }

    pub fn to_detection(&self, labels: &LabelMap) -> Result<EvalDetection> {
        let class = labels
            .index(&self.class)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class {:?}", self.class)))?;
        Ok(EvalDetection {
            image: self.image.clone(),
            class,
            score: self.score,
            bbox: OrientedBox::new(self.cx, self.cy, self.w, self.h, self.theta)?,
        })
    }
}

pub fn write_detections_jsonl(records: &[DetectionRecord], out: &mut impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        writeln!(out).map_err(|e| Error::io("<detections>", e))?;
    }
    Ok(())
}

pub fn save_detections_jsonl(records: &[DetectionRecord], path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_detections_jsonl(records, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections_jsonl(path: &Path) -> Result<Vec<DetectionRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("{}: {}", path.display(), e),
        })?);
    }
    Ok(out)
}
