//! Feature differences, the SAD image baseline and sequence matching.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{DifferenceMatrix, FeatureMatrix};
use crate::mapper::TopViewImage;

/// Squared Euclidean distance.
pub fn feature_difference(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum())
}

/// Sum of absolute differences.
pub fn sad_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum())
}

pub const SAD_PATCH: usize = 8;

/// Area-mean downsampling by `down`, then zero-mean unit-variance
/// normalization of every 8×8 patch (edge patches may be smaller). Constant
/// patches become zero.
pub fn sad_feature(image: &TopViewImage, down: usize) -> Result<Vec<f32>> {
    if down == 0 || image.height % down != 0 || image.width % down != 0 {
        return Err(Error::InvalidConfig(format!(
            "downsampling factor {down} does not divide {}×{}",
            image.height, image.width
        )));
    }
    let (h, w) = (image.height / down, image.width / down);
    let mut small = vec![0f64; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut s = 0.0;
            for a in 0..down {
                for b in 0..down {
                    s += image.get(u * down + a, v * down + b) as f64;
                }
            }
            small[u * w + v] = s / (down * down) as f64;
        }
    }
    let mut out = vec![0f32; h * w];
    for pu in (0..h).step_by(SAD_PATCH) {
        for pv in (0..w).step_by(SAD_PATCH) {
            let (u1, v1) = ((pu + SAD_PATCH).min(h), (pv + SAD_PATCH).min(w));
            let idx: Vec<usize> = (pu..u1).flat_map(|u| (pv..v1).map(move |v| u * w + v)).collect();
            let n = idx.len() as f64;
            let mean = idx.iter().map(|&i| small[i]).sum::<f64>() / n;
            let var = idx.iter().map(|&i| (small[i] - mean).powi(2)).sum::<f64>() / n;
            if var <= 1e-24 {
                continue;
            }
            let sd = var.sqrt();
            for &i in &idx {
                out[i] = ((small[i] - mean) / sd) as f32;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    SqEuclid,
    Sad,
}

impl Metric {
    pub fn distance(self, a: &[f32], b: &[f32]) -> Result<f64> {
        match self {
            Metric::SqEuclid => feature_difference(a, b),
            Metric::Sad => sad_distance(a, b),
        }
    }
}

/// Exhaustive pairwise differences, rows = queries, columns = references.
pub fn difference_matrix(queries: &FeatureMatrix, refs: &FeatureMatrix, metric: Metric) -> Result<DifferenceMatrix> {
    let (nq, nr) = (queries.count(), refs.count());
    if nq > 0 && nr > 0 && queries.dim != refs.dim {
        return Err(Error::DimensionMismatch {
            expected: queries.dim,
            got: refs.dim,
        });
    }
    let mut values = Vec::with_capacity(nq * nr);
    for q in queries.rows().take(nq) {
        for r in refs.rows().take(nr) {
            values.push(metric.distance(q, r)?);
        }
    }
    DifferenceMatrix::new(nq, nr, values)
}

/// Local contrast enhancement: each entry is z-scored against the entries of
/// its row within `window` columns centered on it, then the whole matrix is
/// shifted so its minimum is zero.
pub fn contrast_enhance(dm: &DifferenceMatrix, window: usize) -> DifferenceMatrix {
    let half = window / 2;
    let mut out = DifferenceMatrix::filled(dm.rows, dm.cols, 0.0);
    for i in 0..dm.rows {
        let row = dm.row(i);
        for j in 0..dm.cols {
            let (lo, hi) = (j.saturating_sub(half), (j + half + 1).min(dm.cols));
            let seg = &row[lo..hi];
            let n = seg.len() as f64;
            let mean = seg.iter().sum::<f64>() / n;
            let sd = (seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let z = if sd > 0.0 { (row[j] - mean) / sd } else { 0.0 };
            out.set(i, j, z);
        }
    }
    let min = out.values.iter().copied().fold(f64::INFINITY, f64::min);
    if min.is_finite() {
        out.values.iter_mut().for_each(|v| *v -= min);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqMatchConfig {
    pub ds: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub v_step: f64,
    pub exclusion_window: usize,
    pub contrast_enhance: bool,
    pub r_window: usize,
}

impl Default for SeqMatchConfig {
    fn default() -> Self {
        Self {
            ds: 10,
            v_min: 0.8,
            v_max: 1.2,
            v_step: 0.1,
            exclusion_window: 20,
            contrast_enhance: false,
            r_window: 10,
        }
    }
}

impl SeqMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ds == 0 || !(self.v_min > 0.0) || !(self.v_max >= self.v_min) || !(self.v_step > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid sequence matching config: {self:?}")));
        }
        Ok(())
    }

    pub fn velocities(&self) -> Vec<f64> {
        let n = ((self.v_max - self.v_min) / self.v_step + 1e-9).floor() as usize;
        (0..=n).map(|k| self.v_min + k as f64 * self.v_step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub reference: usize,
    pub velocity: f64,
    pub score: f64,
    /// Best score outside the exclusion window, if any column remains.
    pub second_score: Option<f64>,
    /// `score / second_score`; 1 when there is no second candidate or both
    /// are zero.
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueryOutcome {
    Matched(Match),
    /// Fewer than `ds` query rows on one side.
    InsufficientContext,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryMatch {
    pub query: usize,
    pub outcome: QueryOutcome,
}

impl QueryMatch {
    pub fn matched(&self) -> Option<&Match> {
        match &self.outcome {
            QueryOutcome::Matched(m) => Some(m),
            QueryOutcome::InsufficientContext => None,
        }
    }
}

fn ratio(best: f64, second: Option<f64>) -> f64 {
    match second {
        None => 1.0,
        Some(s) if s == 0.0 => {
            if best == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        }
        Some(s) => best / s,
    }
}

/// Constant-velocity sequence scoring around every query row.
///
/// Out-of-range columns along a trajectory are skipped and the sum is divided
/// by the number of terms used. Ties go to the smallest column, then the
/// smallest velocity.
pub fn sequence_match(dm: &DifferenceMatrix, cfg: &SeqMatchConfig) -> Result<Vec<QueryMatch>> {
    cfg.validate()?;
    let enhanced;
    let dm = if cfg.contrast_enhance {
        enhanced = contrast_enhance(dm, cfg.r_window);
        &enhanced
    } else {
        dm
    };
    let ds = cfg.ds as i64;
    let vels = cfg.velocities();
    let cols = dm.cols as i64;
    let half = (cfg.exclusion_window / 2) as i64;
    let mut out = Vec::with_capacity(dm.rows);
    let mut col_best = vec![f64::INFINITY; dm.cols];
    for i in 0..dm.rows {
        let ii = i as i64;
        if ii < ds || ii + ds >= dm.rows as i64 || dm.cols == 0 {
            out.push(QueryMatch {
                query: i,
                outcome: QueryOutcome::InsufficientContext,
            });
            continue;
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..dm.cols {
            let mut bj = f64::INFINITY;
            for &v in &vels {
                let (mut sum, mut n) = (0.0, 0usize);
                for s in -ds..=ds {
                    let c = (j as f64 + v * s as f64).round() as i64;
                    if (0..cols).contains(&c) {
                        sum += dm.get((ii + s) as usize, c as usize);
                        n += 1;
                    }
                }
                let score = sum / n as f64;
                if score < bj {
                    bj = score;
                }
                if best.is_none_or(|(_, _, b)| score < b) {
                    best = Some((j, v, score));
                }
            }
            col_best[j] = bj;
        }
        let (bj, bv, bs) = best.expect("at least one column");
        let second = col_best
            .iter()
            .enumerate()
            .filter(|(j, _)| (*j as i64 - bj as i64).abs() > half)
            .map(|(_, &s)| s)
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.min(s))));
        out.push(QueryMatch {
            query: i,
            outcome: QueryOutcome::Matched(Match {
                reference: bj,
                velocity: bv,
                score: bs,
                second_score: second,
                ratio: ratio(bs, second),
            }),
        });
    }
    Ok(out)
}

/// CSV with columns `query_id,match_id,score,second_score,ratio`; queries
/// without enough context are omitted, a missing second score is empty.
pub fn write_matches_csv<W: Write>(w: &mut W, matches: &[QueryMatch]) -> Result<()> {
    writeln!(w, "query_id,match_id,score,second_score,ratio")?;
    for q in matches {
        if let Some(m) = q.matched() {
            let second = m.second_score.map(|s| s.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", q.query, m.reference, m.score, second, m.ratio)?;
        }
    }
    Ok(())
}

/// Parses the CSV written by [`write_matches_csv`] into
/// `(query, reference, ratio)` triples.
pub fn read_matches_csv(text: &str) -> Result<Vec<(usize, usize, f64)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format {
            record: "match CSV",
            reason: format!("line {}: `{line}`", n + 1),
        };
        if f.len() != 5 {
            return Err(bad());
        }
        let q = f[0].parse().map_err(|_| bad())?;
        let r = f[1].parse().map_err(|_| bad())?;
        let ratio = f[4].parse().map_err(|_| bad())?;
        out.push((q, r, ratio));
    }
    Ok(out)
}

pub fn write_difference_csv<W: Write>(w: &mut W, dm: &DifferenceMatrix) -> Result<()> {
    for i in 0..dm.rows {
        let cells: Vec<String> = dm.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}
