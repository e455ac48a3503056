//! Ground-truth labeling of proposed loop closures, PR and ROC curves, and
//! method comparison tables.
//!
//! Accounting is per query: every query with at least one reference within
//! `d_thresh` is a ground-truth positive, so `tp + fn` is constant across
//! thresholds. An accepted wrong match on such a query is a false positive
//! and the query also stays a false negative.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Pose;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub d_thresh: f64,
    pub lower_is_better: bool,
    /// Maximum number of points written per exported curve.
    pub n_thresholds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            d_thresh: 10.0,
            lower_is_better: true,
            n_thresholds: 200,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_thresh > 0.0) || self.n_thresholds < 2 {
            return Err(Error::InvalidConfig(format!("invalid evaluation config: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledMatch {
    pub query: usize,
    pub reference: usize,
    pub score: f64,
    /// The proposed pair lies within `d_thresh`.
    pub is_true: bool,
    /// The query has some reference within `d_thresh`.
    pub gt_positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    pub matches: Vec<LabeledMatch>,
    /// Every query frame with at least one reference within `d_thresh`.
    pub ground_truth: BTreeSet<usize>,
}

/// Labels `(query, reference, score)` proposals against planar ground truth.
pub fn label_matches(
    proposals: &[(usize, usize, f64)],
    poses_query: &[Pose],
    poses_ref: &[Pose],
    cfg: &EvalConfig,
) -> Result<Labeling> {
    cfg.validate()?;
    let ground_truth: BTreeSet<usize> = poses_query
        .iter()
        .enumerate()
        .filter(|(_, q)| poses_ref.iter().any(|r| q.planar_distance(r) <= cfg.d_thresh))
        .map(|(i, _)| i)
        .collect();
    let mut matches = Vec::with_capacity(proposals.len());
    for &(q, r, score) in proposals {
        let pq = poses_query.get(q).ok_or(Error::MissingPose(q))?;
        let pr = poses_ref.get(r).ok_or(Error::MissingPose(r))?;
        matches.push(LabeledMatch {
            query: q,
            reference: r,
            score,
            is_true: pq.planar_distance(pr) <= cfg.d_thresh,
            gt_positive: ground_truth.contains(&q),
        });
    }
    Ok(Labeling { matches, ground_truth })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    /// `(precision, recall)` per distinct threshold, loosening.
    pub pr_curve: Vec<(f64, f64)>,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub roc_curve: Vec<(f64, f64)>,
    pub auc: f64,
    pub recall_at_full_precision: f64,
    pub points: Vec<CurvePoint>,
    pub d_thresh: f64,
}

/// Counts at every distinct score, from strictest to loosest threshold.
pub fn sweep(matches: &[LabeledMatch], cfg: &EvalConfig) -> Vec<CurvePoint> {
    let key = |m: &LabeledMatch| if cfg.lower_is_better { m.score } else { -m.score };
    let mut sorted: Vec<&LabeledMatch> = matches.iter().collect();
    sorted.sort_by(|a, b| key(a).total_cmp(&key(b)));
    let n_gt = matches.iter().filter(|m| m.gt_positive).count();
    let n_false = matches.iter().filter(|m| !m.is_true).count();
    let n_neg_queries = matches.iter().filter(|m| !m.gt_positive).count();
    let (mut tp, mut fp, mut rejected_neg) = (0usize, 0usize, n_neg_queries);
    let mut out = Vec::new();
    let mut k = 0;
    while k < sorted.len() {
        let t = key(sorted[k]);
        while k < sorted.len() && key(sorted[k]) == t {
            let m = sorted[k];
            if m.is_true {
                tp += 1;
            } else {
                fp += 1;
            }
            if !m.gt_positive {
                rejected_neg -= 1;
            }
            k += 1;
        }
        let counts = ConfusionCounts {
            tp,
            fp,
            fn_: n_gt - tp,
            tn: rejected_neg,
        };
        out.push(CurvePoint {
            threshold: if cfg.lower_is_better { t } else { -t },
            counts,
            precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            fpr: if n_false == 0 { 0.0 } else { fp as f64 / n_false as f64 },
        });
    }
    out
}

/// Precision/recall per threshold and recall at 100% precision.
pub fn pr_curve(matches: &[LabeledMatch], cfg: &EvalConfig) -> Result<(Vec<(f64, f64)>, f64)> {
    if !matches.iter().any(|m| m.gt_positive) {
        return Err(Error::NoPositives);
    }
    let pts = sweep(matches, cfg);
    let curve: Vec<(f64, f64)> = pts.iter().map(|p| (p.precision, p.recall)).collect();
    let r100 = pts
        .iter()
        .filter(|p| p.precision == 1.0)
        .map(|p| p.recall)
        .fold(0.0, f64::max);
    Ok((curve, r100))
}

/// ROC points and trapezoidal area.
pub fn roc_auc(matches: &[LabeledMatch], cfg: &EvalConfig) -> Result<(Vec<(f64, f64)>, f64)> {
    let n_gt = matches.iter().filter(|m| m.gt_positive).count();
    let n_false = matches.iter().filter(|m| !m.is_true).count();
    if n_gt == 0 || n_false == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut roc = vec![(0.0, 0.0)];
    roc.extend(sweep(matches, cfg).iter().map(|p| (p.fpr, p.recall)));
    if roc.last() != Some(&(1.0, 1.0)) {
        roc.push((1.0, 1.0));
    }
    let auc = roc
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
        .sum();
    Ok((roc, auc))
}

/// Mann-Whitney form of the AUC: positives are true matches plus one
/// never-accepted positive per ground-truth query whose match is wrong;
/// negatives are false matches; ties count one half.
pub fn rank_auc(matches: &[LabeledMatch], cfg: &EvalConfig) -> Result<f64> {
    let key = |m: &LabeledMatch| if cfg.lower_is_better { m.score } else { -m.score };
    let pos: Vec<f64> = matches.iter().filter(|m| m.is_true).map(key).collect();
    let missed = matches.iter().filter(|m| m.gt_positive && !m.is_true).count();
    let neg: Vec<f64> = matches.iter().filter(|m| !m.is_true).map(key).collect();
    let n_pos = pos.len() + missed;
    if n_pos == 0 || neg.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p < n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (n_pos * neg.len()) as f64)
}

pub fn evaluate(matches: &[LabeledMatch], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let (pr, r100) = pr_curve(matches, cfg)?;
    let (roc, auc) = roc_auc(matches, cfg)?;
    Ok(EvalReport {
        pr_curve: pr,
        roc_curve: roc,
        auc,
        recall_at_full_precision: r100,
        points: sweep(matches, cfg),
        d_thresh: cfg.d_thresh,
    })
}

/// Evenly spaced subset of at most `n` items, always keeping both ends.
fn decimate<T: Copy>(v: &[T], n: usize) -> Vec<T> {
    if v.len() <= n || n < 2 {
        return v.to_vec();
    }
    (0..n).map(|k| v[k * (v.len() - 1) / (n - 1)]).collect()
}

pub fn write_pr_csv<W: Write>(w: &mut W, r: &EvalReport, cfg: &EvalConfig) -> Result<()> {
    writeln!(w, "# d_thresh={} accounting=per-query", r.d_thresh)?;
    writeln!(w, "threshold,precision,recall")?;
    for p in decimate(&r.points, cfg.n_thresholds) {
        writeln!(w, "{},{},{}", p.threshold, p.precision, p.recall)?;
    }
    Ok(())
}

pub fn write_roc_csv<W: Write>(w: &mut W, r: &EvalReport, cfg: &EvalConfig) -> Result<()> {
    writeln!(w, "# d_thresh={} accounting=per-query auc={}", r.d_thresh, r.auc)?;
    writeln!(w, "threshold,fpr,tpr")?;
    for p in decimate(&r.points, cfg.n_thresholds) {
        writeln!(w, "{},{},{}", p.threshold, p.fpr, p.recall)?;
    }
    Ok(())
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: String,
    pub setting: String,
    pub auc: f64,
    pub recall_at_full_precision: f64,
}

impl MethodResult {
    pub fn new(method: &str, setting: &str, report: &EvalReport) -> Self {
        Self {
            method: method.into(),
            setting: setting.into(),
            auc: report.auc,
            recall_at_full_precision: report.recall_at_full_precision,
        }
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

/// CSV table: AUC and recall at 100% precision per method and setting, with
/// ratios against `baseline` in the same setting (empty when absent).
pub fn compare_methods(results: &[MethodResult], baseline: &str, d_thresh: f64) -> String {
    let mut s = format!("# d_thresh={d_thresh} baseline={baseline}\n");
    s.push_str("method,setting,auc,recall_at_100p,auc_ratio,recall_ratio\n");
    for r in results {
        let base = results
            .iter()
            .find(|b| b.method == baseline && b.setting == r.setting);
        let (ar, rr) = match base {
            Some(b) => (
                ratio(r.auc, b.auc).to_string(),
                ratio(r.recall_at_full_precision, b.recall_at_full_precision).to_string(),
            ),
            None => (String::new(), String::new()),
        };
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.setting, r.auc, r.recall_at_full_precision, ar, rr
        ));
    }
    s
}

/// Storage needed to keep every feature, in GiB.
pub fn storage_projection_gib(bytes_per_frame: usize, rate_hz: f64, hours: f64) -> f64 {
    bytes_per_frame as f64 * rate_hz * hours * 3600.0 / (1u64 << 30) as f64
}
