//! Retrieval metrics: R@K, median rank and Rsum in both directions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::objective::SimilarityMatrix;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrievalDirection {
    TextToVideo,
    VideoToText,
}

impl RetrievalDirection {
    pub fn short(self) -> &'static str {
        match self {
            RetrievalDirection::TextToVideo => "t2v",
            RetrievalDirection::VideoToText => "v2t",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: RetrievalDirection,
    /// K → percentage of queries whose positive ranks at or above K.
    pub r_at: BTreeMap<usize, f64>,
    pub mdr: f64,
    /// 1-indexed rank of each query's positive.
    pub ranks: Vec<usize>,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.r_at.get(&k).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BidirectionalReport {
    pub t2v: RetrievalReport,
    pub v2t: RetrievalReport,
    pub rsum: f64,
}

/// `1 + #{strictly higher} + #{tied with smaller index}`.
pub fn rank_of_positive(scores: &[f64], positive_index: usize) -> Result<usize> {
    let pos = *scores.get(positive_index).ok_or(Error::IndexOutOfRange {
        index: positive_index,
        len: scores.len(),
    })?;
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(k, &s)| s > pos || (s == pos && k < positive_index))
        .count();
    Ok(1 + ahead)
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("ranks"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// Middle value, or the mean of the two middle values for even counts.
pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("ranks"));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    })
}

fn report(direction: RetrievalDirection, ranks: Vec<usize>, ks: &[usize]) -> Result<RetrievalReport> {
    let r_at = ks
        .iter()
        .map(|&k| Ok((k, recall_at_k(&ranks, k)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(RetrievalReport {
        direction,
        r_at,
        mdr: median_rank(&ranks)?,
        ranks,
    })
}

/// Text queries score videos down column `j`; video queries score texts
/// along row `i`. The positive of query `q` is item `q`.
pub fn evaluate_bidirectional(s: &SimilarityMatrix, ks: &[usize]) -> Result<BidirectionalReport> {
    let (rows, cols) = (s.values.rows(), s.values.cols());
    if rows != cols {
        return Err(Error::NonSquare { rows, cols });
    }
    let n = rows;
    let mut column = vec![0.0; n];
    let mut t2v = Vec::with_capacity(n);
    for j in 0..n {
        for (i, c) in column.iter_mut().enumerate() {
            *c = s.get(i, j);
        }
        t2v.push(rank_of_positive(&column, j)?);
    }
    let v2t = (0..n)
        .map(|i| rank_of_positive(s.values.row(i), i))
        .collect::<Result<Vec<_>>>()?;
    let t2v = report(RetrievalDirection::TextToVideo, t2v, ks)?;
    let v2t = report(RetrievalDirection::VideoToText, v2t, ks)?;
    let rsum = t2v.r_at.values().chain(v2t.r_at.values()).sum();
    Ok(BidirectionalReport { t2v, v2t, rsum })
}

/// `direction,R1,R5,R10,MdR` rows followed by an `rsum` line, 4 decimals.
pub fn metrics_csv(report: &BidirectionalReport) -> String {
    let mut out = String::from("direction");
    for k in report.t2v.r_at.keys() {
        let _ = write!(out, ",R{k}");
    }
    out.push_str(",MdR\n");
    for r in [&report.t2v, &report.v2t] {
        out.push_str(r.direction.short());
        for v in r.r_at.values() {
            let _ = write!(out, ",{v:.4}");
        }
        let _ = writeln!(out, ",{:.4}", r.mdr);
    }
    let _ = writeln!(out, "rsum,{:.4}", report.rsum);
    out
}
