//! Prediction quality and anomaly scores: MSE, PSNR, per-clip normalisation,
//! score gap and the Q-frame reuse mode.

use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{FrameTensor, VideoClip};
use crate::error::{Error, Result};
use crate::network::{Network, PathInputs};

/// Guard against `log(0)` for identical frames.
pub const MSE_EPSILON: f64 = 1e-10;

/// Peak value of the `[0, 1]` intensity range scores are computed in.
pub const MAX_VALUE: f64 = 1.0;

/// Mean over pixels of the squared channel norm of `target - pred`.
pub fn mse(target: &FrameTensor, pred: &FrameTensor) -> Result<f64> {
    if target.shape() != pred.shape() || target.shape().len() != 3 {
        return Err(Error::Validation(format!(
            "mse needs equal [C, H, W] shapes, got {:?} and {:?}",
            target.shape(),
            pred.shape()
        )));
    }
    let pixels = (target.shape()[1] * target.shape()[2]) as f64;
    let sum: f64 = target
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / pixels)
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    10.0 * (max_value * max_value / mse.max(MSE_EPSILON)).log10()
}

pub fn psnr(target: &FrameTensor, pred: &FrameTensor, max_value: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(target, pred)?, max_value))
}

/// PSNR of two frames stored in `[-1, 1]`, measured after mapping both to
/// `[0, 1]`.
pub fn frame_psnr(target: &FrameTensor, pred: &FrameTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(target, pred)? / 4.0, MAX_VALUE))
}

/// `1 - (r - min) / (max - min)`; all zeros when the list is constant.
pub fn normalize_scores(psnr: &[f64]) -> Vec<f64> {
    let lo = psnr.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = psnr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; psnr.len()];
    }
    psnr.iter().map(|&r| 1.0 - (r - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub clip_id: String,
    pub frame_indices: Vec<usize>,
    pub psnr: Vec<f64>,
    pub score: Vec<f64>,
    /// Labels of the scored frames, when the clip has them.
    pub labels: Option<Vec<u8>>,
    pub skipped_prefix: usize,
}

impl ScoreSeries {
    fn from_psnr(clip: &VideoClip, p: usize, psnr: Vec<f64>) -> Self {
        ScoreSeries {
            clip_id: clip.id.clone(),
            frame_indices: (p..clip.len()).collect(),
            score: normalize_scores(&psnr),
            psnr,
            labels: clip.labels.as_ref().map(|l| l[p..].to_vec()),
            skipped_prefix: p,
        }
    }

    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }
}

fn check_clip(net: &Network<f32>, clip: &VideoClip, needed: usize) -> Result<usize> {
    let p = net.config().input_len;
    if clip.len() < needed {
        return Err(Error::Validation(format!(
            "clip {} has {} frames, scoring needs at least {needed}",
            clip.id,
            clip.len()
        )));
    }
    Ok(p)
}

/// Scores frames `P..T` of a clip, each predicted from the `P` frames before
/// it with a fresh recurrent state.
pub fn score_clip(net: &Network<f32>, clip: &VideoClip) -> Result<ScoreSeries> {
    let p = check_clip(net, clip, net.config().input_len + 1)?;
    let inputs = clip
        .frames
        .iter()
        .take(clip.len() - 1)
        .map(|f| net.path_inputs(f))
        .collect::<Result<Vec<PathInputs<f32>>>>()?;
    let mut psnr = Vec::with_capacity(clip.len() - p);
    for t in p..clip.len() {
        let mut state = net.initial_state();
        for z in &inputs[t - p..t] {
            net.step(&mut state, z)?;
        }
        psnr.push(frame_psnr(&clip.frames[t], &net.decode(&state)?)?);
    }
    Ok(ScoreSeries::from_psnr(clip, p, psnr))
}

/// Scores a clip in blocks of `q` targets. Each block warms the recurrent
/// state up on `P - 1` frames and then emits `q` consecutive predictions
/// without resetting it. Blocks do not share any work.
pub fn score_clip_reuse(net: &Network<f32>, clip: &VideoClip, q: usize) -> Result<ScoreSeries> {
    if q == 0 {
        return Err(Error::Validation("q must be at least 1".into()));
    }
    let p = check_clip(net, clip, net.config().input_len + q)?;
    let mut psnr = Vec::with_capacity(clip.len() - p);
    let mut start = p;
    while start < clip.len() {
        let end = (start + q).min(clip.len());
        let mut state = net.initial_state();
        for f in &clip.frames[start - p..start - 1] {
            net.advance(&mut state, f)?;
        }
        for t in start..end {
            net.advance(&mut state, &clip.frames[t - 1])?;
            psnr.push(frame_psnr(&clip.frames[t], &net.decode(&state)?)?);
        }
        start = end;
    }
    Ok(ScoreSeries::from_psnr(clip, p, psnr))
}

/// Scores every clip, in parallel when the `parallel` feature is on. The
/// output order follows `clips`.
pub fn score_clips(net: &Network<f32>, clips: &[VideoClip], q: usize) -> Result<Vec<ScoreSeries>> {
    let one = |clip: &VideoClip| {
        if q == 1 {
            score_clip(net, clip)
        } else {
            score_clip_reuse(net, clip, q)
        }
    };
    #[cfg(feature = "parallel")]
    let out = clips.par_iter().map(one).collect();
    #[cfg(not(feature = "parallel"))]
    let out = clips.iter().map(one).collect();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipGap {
    pub clip_id: String,
    pub mean_normal: Option<f64>,
    pub mean_abnormal: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreGapReport {
    pub dataset: String,
    pub delta_s: f64,
    pub clips: Vec<ClipGap>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Mean score of abnormal frames minus mean score of normal frames, over
/// every scored frame of the dataset.
pub fn score_gap(dataset: &str, series: &[ScoreSeries]) -> Result<ScoreGapReport> {
    let (mut normal, mut abnormal) = (Vec::new(), Vec::new());
    let mut clips = Vec::with_capacity(series.len());
    for s in series {
        let labels = s.labels.as_ref().ok_or_else(|| {
            Error::Validation(format!("clip {} has no frame labels", s.clip_id))
        })?;
        if labels.len() != s.score.len() {
            return Err(Error::Validation(format!(
                "clip {} has {} labels for {} scores",
                s.clip_id,
                labels.len(),
                s.score.len()
            )));
        }
        let (mut n, mut a) = (Vec::new(), Vec::new());
        for (&score, &label) in s.score.iter().zip(labels) {
            if label == 1 { a.push(score) } else { n.push(score) }
        }
        clips.push(ClipGap {
            clip_id: s.clip_id.clone(),
            mean_normal: mean(&n),
            mean_abnormal: mean(&a),
        });
        normal.extend(n);
        abnormal.extend(a);
    }
    match (mean(&abnormal), mean(&normal)) {
        (Some(a), Some(n)) => Ok(ScoreGapReport {
            dataset: dataset.to_string(),
            delta_s: a - n,
            clips,
        }),
        (None, _) => Err(Error::UndefinedGap("no abnormal frames".into())),
        (_, None) => Err(Error::UndefinedGap("no normal frames".into())),
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    clip_id: String,
    frame_index: usize,
    psnr_db: f64,
    score: f64,
    label: Option<u8>,
}

/// Writes series as CSV with columns
/// `clip_id,frame_index,psnr_db,score,label`; the label cell is empty for
/// unlabeled clips.
pub fn write_scores_csv(path: &Path, series: &[ScoreSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for s in series {
        for i in 0..s.len() {
            w.serialize(CsvRow {
                clip_id: s.clip_id.clone(),
                frame_index: s.frame_indices[i],
                psnr_db: s.psnr[i],
                score: s.score[i],
                label: s.labels.as_ref().map(|l| l[i]),
            })
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads series written by [`write_scores_csv`]. Rows of one clip must be
/// contiguous; `skipped_prefix` is taken as the first frame index.
pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreSeries>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out: Vec<ScoreSeries> = Vec::new();
    for row in r.deserialize::<CsvRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let fresh = out.last().is_none_or(|s| s.clip_id != row.clip_id);
        if fresh {
            if out.iter().any(|s| s.clip_id == row.clip_id) {
                return Err(Error::Decode {
                    path: path.to_path_buf(),
                    message: format!("rows of clip {} are not contiguous", row.clip_id),
                });
            }
            out.push(ScoreSeries {
                clip_id: row.clip_id.clone(),
                frame_indices: Vec::new(),
                psnr: Vec::new(),
                score: Vec::new(),
                labels: row.label.map(|_| Vec::new()),
                skipped_prefix: row.frame_index,
            });
        }
        let s = out.last_mut().expect("pushed above");
        match (&mut s.labels, row.label) {
            (Some(l), Some(v)) => l.push(v),
            (None, None) => {}
            _ => {
                return Err(Error::Decode {
                    path: path.to_path_buf(),
                    message: format!("clip {} mixes labeled and unlabeled rows", s.clip_id),
                })
            }
        }
        s.frame_indices.push(row.frame_index);
        s.psnr.push(row.psnr_db);
        s.score.push(row.score);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}
