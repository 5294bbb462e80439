//! Localization and start-detection metrics, plus ground-truth quantization.

use crate::decoder::ActionInstance;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeSet;

/// tIoU thresholds of the standard localization table.
pub const TIOU_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

/// Guards floor/ceil against representation error, e.g. `0.2 · 30 / 6`.
const QUANT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    /// Inclusive chunk indices.
    Chunks,
    Seconds,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub unit: Unit,
}

impl Interval {
    pub fn chunks(start: usize, end: usize) -> Self {
        Interval {
            start: start as f64,
            end: end as f64,
            unit: Unit::Chunks,
        }
    }

    pub fn seconds(start: f64, end: f64) -> Self {
        Interval {
            start,
            end,
            unit: Unit::Seconds,
        }
    }

    pub fn length(&self) -> f64 {
        match self.unit {
            Unit::Chunks => self.end - self.start + 1.0,
            Unit::Seconds => self.end - self.start,
        }
    }
}

pub fn tiou(a: &Interval, b: &Interval) -> Result<f64> {
    if a.unit != b.unit {
        return Err(Error::Contract(format!("tIoU between {:?} and {:?}", a.unit, b.unit)));
    }
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    let inter = match a.unit {
        Unit::Chunks => (hi - lo + 1.0).max(0.0),
        Unit::Seconds => (hi - lo).max(0.0),
    };
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        // two zero-length intervals in seconds
        return Ok(if a.start == b.start { 1.0 } else { 0.0 });
    }
    Ok(inter / union)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub class_id: usize,
    pub interval: Interval,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_id: String,
    pub class_id: usize,
    pub interval: Interval,
}

/// Outcome of greedy matching at one tIoU threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Prediction indices in ranking order.
    pub order: Vec<usize>,
    /// TP flag per ranked prediction.
    pub tp: Vec<bool>,
    /// Matched GT index per ranked prediction.
    pub matched: Vec<Option<usize>>,
}

impl MatchResult {
    /// `(precision, recall)` after each ranked prediction.
    pub fn pr_curve(&self, gt_count: usize) -> Vec<(f64, f64)> {
        let mut tp = 0usize;
        self.tp
            .iter()
            .enumerate()
            .map(|(i, &hit)| {
                tp += hit as usize;
                (tp as f64 / (i + 1) as f64, tp as f64 / gt_count.max(1) as f64)
            })
            .collect()
    }
}

/// Descending score, then earlier start, then lower class id.
fn ranking(a: (f64, f64, usize), b: (f64, f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then(a.1.total_cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// Greedy matching: in ranking order, each prediction takes the unmatched GT
/// of the same video and class with the highest tIoU ≥ `thr`.
pub fn match_detections(preds: &[Detection], gts: &[GroundTruth], thr: f64) -> Result<MatchResult> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&preds[i], &preds[j]);
        ranking((a.score, a.interval.start, a.class_id), (b.score, b.interval.start, b.class_id))
    });
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(preds.len());
    let mut matched = Vec::with_capacity(preds.len());
    for &i in &order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.video_id != p.video_id || gt.class_id != p.class_id {
                continue;
            }
            let iou = tiou(&p.interval, &gt.interval)?;
            if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        tp.push(best.is_some());
        matched.push(best.map(|(g, _)| g));
    }
    Ok(MatchResult { order, tp, matched })
}

/// All-point interpolated area under a PR curve.
fn interpolated_ap(curve: &[(f64, f64)]) -> f64 {
    let mut env: Vec<f64> = curve.iter().map(|&(p, _)| p).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (i, &(_, r)) in curve.iter().enumerate() {
        ap += (r - prev_recall) * env[i];
        prev_recall = r;
    }
    ap
}

/// AP in `[0, 1]` for predictions and GTs of a single class.
pub fn average_precision(preds: &[Detection], gts: &[GroundTruth], thr: f64) -> Result<f64> {
    if gts.is_empty() {
        return Ok(0.0);
    }
    let m = match_detections(preds, gts, thr)?;
    Ok(interpolated_ap(&m.pr_curve(gts.len())))
}

/// mAP table in percent, averaged over the classes present in the GT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    pub average: f64,
    /// `per_class[threshold][i]` is the AP (percent) of `classes[i]`.
    pub classes: Vec<usize>,
    pub per_class: Vec<Vec<f64>>,
}

pub fn map_over_thresholds(preds: &[Detection], gts: &[GroundTruth], thresholds: &[f64]) -> Result<MapReport> {
    let classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect::<BTreeSet<_>>().into_iter().collect();
    let mut map = Vec::with_capacity(thresholds.len());
    let mut per_class = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut aps = Vec::with_capacity(classes.len());
        for &c in &classes {
            let p: Vec<Detection> = preds.iter().filter(|d| d.class_id == c).cloned().collect();
            let g: Vec<GroundTruth> = gts.iter().filter(|d| d.class_id == c).cloned().collect();
            aps.push(100.0 * average_precision(&p, &g, thr)?);
        }
        map.push(if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 });
        per_class.push(aps);
    }
    let average = if map.is_empty() { 0.0 } else { map.iter().sum::<f64>() / map.len() as f64 };
    Ok(MapReport {
        thresholds: thresholds.to_vec(),
        map,
        average,
        classes,
        per_class,
    })
}

/// Action start used by point-level AP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartPoint {
    pub video_id: String,
    pub class_id: usize,
    /// Seconds.
    pub time: f64,
    pub score: f64,
}

/// Point-level AP for one class: a prediction is a TP when an unmatched GT
/// start of the same video lies within `offset` seconds (the closest wins).
pub fn point_ap(preds: &[StartPoint], gts: &[StartPoint], offset: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&preds[i], &preds[j]);
        ranking((a.score, a.time, a.class_id), (b.score, b.time, b.class_id))
    });
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(preds.len());
    for &i in &order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.video_id != p.video_id || gt.class_id != p.class_id {
                continue;
            }
            let dt = (p.time - gt.time).abs();
            if dt <= offset && best.is_none_or(|(_, b)| dt < b) {
                best = Some((g, dt));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        tp.push(best.is_some());
    }
    let m = MatchResult {
        order,
        tp,
        matched: Vec::new(),
    };
    interpolated_ap(&m.pr_curve(gts.len()))
}

/// Point-level mAP table in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMapReport {
    pub offsets: Vec<f64>,
    pub p_map: Vec<f64>,
    pub average: f64,
}

/// Offsets 1 s to 10 s.
pub fn default_offsets() -> Vec<f64> {
    (1..=10).map(f64::from).collect()
}

pub fn point_map(preds: &[StartPoint], gts: &[StartPoint], offsets: &[f64]) -> PointMapReport {
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    let p_map: Vec<f64> = offsets
        .iter()
        .map(|&off| {
            let aps: Vec<f64> = classes
                .iter()
                .map(|&c| {
                    let p: Vec<StartPoint> = preds.iter().filter(|x| x.class_id == c).cloned().collect();
                    let g: Vec<StartPoint> = gts.iter().filter(|x| x.class_id == c).cloned().collect();
                    100.0 * point_ap(&p, &g, off)
                })
                .collect();
            if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 }
        })
        .collect();
    let average = if p_map.is_empty() { 0.0 } else { p_map.iter().sum::<f64>() / p_map.len() as f64 };
    PointMapReport {
        offsets: offsets.to_vec(),
        p_map,
        average,
    }
}

/// An annotated instance in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedInstance {
    pub start_sec: f64,
    pub end_sec: f64,
    pub class_id: usize,
}

/// Maps second-level instances onto chunk indices and merges same-class
/// instances that end up overlapping or adjacent.
pub fn gt_quantize_merge(instances: &[TimedInstance], fps: f64, l: usize) -> Result<Vec<ActionInstance>> {
    if !(fps > 0.0) || l == 0 {
        return Err(Error::Input(format!("fps {fps} and chunk length {l} must be positive")));
    }
    let per_chunk = l as f64 / fps;
    let mut chunks = Vec::with_capacity(instances.len());
    for inst in instances {
        if inst.end_sec < inst.start_sec || inst.start_sec < 0.0 || !inst.end_sec.is_finite() {
            return Err(Error::Input(format!(
                "invalid instance [{}, {}]",
                inst.start_sec, inst.end_sec
            )));
        }
        let start = (inst.start_sec / per_chunk + QUANT_EPS).floor() as usize;
        let end_excl = (inst.end_sec / per_chunk - QUANT_EPS).ceil().max(0.0) as usize;
        chunks.push(ActionInstance {
            start_chunk: start,
            end_chunk: start.max(end_excl.saturating_sub(1)),
            class_id: inst.class_id,
            score: 1.0,
        });
    }
    Ok(merge_same_class(chunks))
}

/// Merges same-class chunk instances with `next.start ≤ cur.end + 1`.
/// Output is sorted by start, then class.
pub fn merge_same_class(mut instances: Vec<ActionInstance>) -> Vec<ActionInstance> {
    instances.sort_by_key(|i| (i.class_id, i.start_chunk, i.end_chunk));
    let mut out: Vec<ActionInstance> = Vec::with_capacity(instances.len());
    for inst in instances {
        match out.last_mut() {
            Some(cur) if cur.class_id == inst.class_id && inst.start_chunk <= cur.end_chunk + 1 => {
                cur.end_chunk = cur.end_chunk.max(inst.end_chunk);
            }
            _ => out.push(inst),
        }
    }
    out.sort_by_key(|i| (i.start_chunk, i.class_id));
    out
}

/// The second-level span exactly covered by a chunk instance.
pub fn chunks_to_seconds(inst: &ActionInstance, fps: f64, l: usize) -> TimedInstance {
    let per_chunk = l as f64 / fps;
    TimedInstance {
        start_sec: inst.start_chunk as f64 * per_chunk,
        end_sec: (inst.end_chunk + 1) as f64 * per_chunk,
        class_id: inst.class_id,
    }
}

/// Start points of detected instances, in emission order.
pub fn starts_from_instances(video_id: &str, instances: &[ActionInstance], fps: f64, l: usize) -> Vec<StartPoint> {
    instances
        .iter()
        .map(|i| StartPoint {
            video_id: video_id.to_string(),
            class_id: i.class_id,
            time: i.start_chunk as f64 * l as f64 / fps,
            score: i.score,
        })
        .collect()
}

/// Chunk-unit detections from decoded instances.
pub fn detections_from_instances(video_id: &str, instances: &[ActionInstance]) -> Vec<Detection> {
    instances
        .iter()
        .map(|i| Detection {
            video_id: video_id.to_string(),
            class_id: i.class_id,
            interval: Interval::chunks(i.start_chunk, i.end_chunk),
            score: i.score,
        })
        .collect()
}

pub fn ground_truth_from_instances(video_id: &str, instances: &[ActionInstance]) -> Vec<GroundTruth> {
    instances
        .iter()
        .map(|i| GroundTruth {
            video_id: video_id.to_string(),
            class_id: i.class_id,
            interval: Interval::chunks(i.start_chunk, i.end_chunk),
        })
        .collect()
}
