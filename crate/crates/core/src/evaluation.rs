//! Frame-level ROC/AUC and the ablation harness.

use std::path::Path;
use std::time::Instant;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{load_split, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::scoring::{score_clips, score_gap, ScoreSeries};
use crate::trainer::{train, TrainConfig};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Validation(format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        let which = if pos == 0 { "abnormal" } else { "normal" };
        return Err(Error::UndefinedAuc(format!("no {which} frames")));
    }
    Ok((pos, neg))
}

/// Probability that a random abnormal frame outscores a random normal one,
/// ties counted one half. Computed from mid-ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Decreasing; the first point uses `+inf` so that nothing is flagged.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

/// ROC points for every distinct threshold. A frame is flagged when its
/// score is at least the threshold. `auc` is the trapezoidal area.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = RocCurve {
        thresholds: vec![f64::INFINITY],
        tpr: vec![0.0],
        fpr: vec![0.0],
        auc: 0.0,
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 { tp += 1 } else { fp += 1 }
            i += 1;
        }
        curve.thresholds.push(s);
        curve.tpr.push(tp as f64 / pos as f64);
        curve.fpr.push(fp as f64 / neg as f64);
    }
    curve.auc = curve
        .fpr
        .windows(2)
        .zip(curve.tpr.windows(2))
        .map(|(f, t)| (f[1] - f[0]) * (t[1] + t[0]) / 2.0)
        .sum();
    Ok(curve)
}

fn flatten(series: &[ScoreSeries]) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in series {
        let l = s.labels.as_ref().ok_or_else(|| {
            Error::Validation(format!("clip {} has no frame labels", s.clip_id))
        })?;
        if l.len() != s.score.len() {
            return Err(Error::Validation(format!("clip {} label count mismatch", s.clip_id)));
        }
        scores.extend_from_slice(&s.score);
        labels.extend_from_slice(l);
    }
    Ok((scores, labels))
}

/// AUC over every scored frame of every clip at once.
pub fn global_auc(series: &[ScoreSeries]) -> Result<f64> {
    let (scores, labels) = flatten(series)?;
    auc(&scores, &labels)
}

pub fn global_roc(series: &[ScoreSeries]) -> Result<RocCurve> {
    let (scores, labels) = flatten(series)?;
    roc_curve(&scores, &labels)
}

pub fn write_roc_csv(path: &Path, roc: &RocCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["threshold", "fpr", "tpr"]).map_err(|e| csv_error(path, e))?;
    for i in 0..roc.tpr.len() {
        w.write_record([roc.thresholds[i].to_string(), roc.fpr[i].to_string(), roc.tpr[i].to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Architecture and objective switches of one ablation variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    pub multi_path: bool,
    pub convgru: bool,
    pub nonlocal: bool,
    pub nt_loss: bool,
}

impl AblationSpec {
    fn named(name: &str, multi_path: bool, nonlocal: bool, nt_loss: bool) -> Self {
        AblationSpec {
            name: name.into(),
            multi_path,
            convgru: true,
            nonlocal,
            nt_loss,
        }
    }

    /// One ConvGRU path on the deepest features.
    pub fn single_path() -> Self {
        Self::named("single_path", false, false, false)
    }

    pub fn multi_path() -> Self {
        Self::named("multi_path", true, false, false)
    }

    /// Multi-path with non-local blocks, trained without the noise
    /// tolerance term.
    pub fn no_nt() -> Self {
        Self::named("no_nt", true, true, false)
    }

    pub fn full() -> Self {
        Self::named("full", true, true, true)
    }

    /// The four variants from weakest to strongest.
    pub fn grid() -> Vec<Self> {
        vec![Self::single_path(), Self::multi_path(), Self::no_nt(), Self::full()]
    }

    /// Published AUC (percent, Avenue) of each named variant.
    pub fn reference_auc(&self) -> Option<f64> {
        match self.name.as_str() {
            "single_path" => Some(82.4),
            "multi_path" => Some(86.1),
            "no_nt" => Some(86.7),
            "full" => Some(88.3),
            _ => None,
        }
    }

    pub fn apply(&self, net: &NetworkConfig, train: &TrainConfig) -> (NetworkConfig, TrainConfig) {
        let net = NetworkConfig {
            multi_path: self.multi_path,
            convgru: self.convgru,
            nonlocal: self.nonlocal,
            ..net.clone()
        };
        let mut train = train.clone();
        if !self.nt_loss {
            train.loss.lambda_nt = 0.0;
        }
        (net, train)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub auc: f64,
    pub delta_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub spec: AblationSpec,
    pub mean_auc: f64,
    pub mean_delta_s: f64,
    pub reference_auc: Option<f64>,
}

/// Everything here is a pure function of the inputs; timings are kept in
/// [`AblationTiming`] so that reports compare byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub variants: Vec<VariantSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTiming {
    pub variant: String,
    pub seed: u64,
    pub wall_time_s: f64,
}

impl AblationReport {
    pub fn mean_auc(&self, variant: &str) -> Option<f64> {
        self.variants.iter().find(|v| v.spec.name == variant).map(|v| v.mean_auc)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per run: `variant,seed,multi_path,convgru,nonlocal,nt_loss,auc,delta_s`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["variant", "seed", "multi_path", "convgru", "nonlocal", "nt_loss", "auc", "delta_s"])
            .map_err(|e| csv_error(path, e))?;
        for r in &self.runs {
            let s = &self.variants.iter().find(|v| v.spec.name == r.variant).expect("variant").spec;
            w.write_record([
                r.variant.clone(),
                r.seed.to_string(),
                s.multi_path.to_string(),
                s.convgru.to_string(),
                s.nonlocal.to_string(),
                s.nt_loss.to_string(),
                r.auc.to_string(),
                r.delta_s.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Trains and evaluates every variant once per seed. The seed replaces both
/// the network initialisation seed and the training seed; the data and the
/// loss network stay fixed. Runs execute in parallel when the `parallel`
/// feature is on; `on_run` is told about every finished run and `runs` keeps
/// variant-major order.
pub fn run_ablation(
    manifest: &DatasetManifest,
    base_net: &NetworkConfig,
    base_train: &TrainConfig,
    specs: &[AblationSpec],
    seeds: &[u64],
    on_run: &(dyn Fn(&AblationRun, &AblationTiming) + Sync),
) -> Result<AblationReport> {
    if specs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one variant and one seed".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if specs[..i].iter().any(|o| o.name == s.name) {
            return Err(Error::Config(format!("variant name {} is used twice", s.name)));
        }
    }
    let test = load_split(manifest, Split::Test)?;
    let jobs: Vec<(&AblationSpec, u64)> = specs.iter().flat_map(|s| seeds.iter().map(move |&k| (s, k))).collect();
    let one = |&(spec, seed): &(&AblationSpec, u64)| -> Result<AblationRun> {
        let timer = Instant::now();
        let (mut net_config, mut train_config) = spec.apply(base_net, base_train);
        net_config.seed = seed;
        train_config.seed = seed;
        let trained = train(manifest, &net_config, &train_config, None)?;
        let series = score_clips(&trained.network, &test, 1)?;
        let run = AblationRun {
            variant: spec.name.clone(),
            seed,
            auc: global_auc(&series)?,
            delta_s: score_gap("test", &series)?.delta_s,
        };
        let timing = AblationTiming {
            variant: spec.name.clone(),
            seed,
            wall_time_s: timer.elapsed().as_secs_f64(),
        };
        on_run(&run, &timing);
        Ok(run)
    };
    #[cfg(feature = "parallel")]
    let runs: Vec<AblationRun> = jobs.par_iter().map(one).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<AblationRun> = jobs.iter().map(one).collect::<Result<_>>()?;
    let k = seeds.len() as f64;
    let variants = specs
        .iter()
        .map(|spec| {
            let mine = runs.iter().filter(|r| r.variant == spec.name);
            let (a, d) = mine.fold((0.0, 0.0), |(a, d), r| (a + r.auc, d + r.delta_s));
            VariantSummary {
                spec: spec.clone(),
                mean_auc: a / k,
                mean_delta_s: d / k,
                reference_auc: spec.reference_auc(),
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        runs,
        variants,
    })
}
