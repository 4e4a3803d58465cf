//! Agreement between learned interaction maps across runs.

use serde::{Deserialize, Serialize};

use crate::error::{DsprError, Result};
use crate::tensor::Tensor;

fn off_diagonal(m: &Tensor) -> Result<Vec<(usize, f64)>> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(DsprError::Shape {
            op: "interaction_map",
            lhs: vec![s[0], s[0]],
            rhs: s.to_vec(),
        });
    }
    let n = s[0];
    Ok((0..n * n)
        .filter(|i| i / n != i % n)
        .map(|i| (i, m.data()[i]))
        .collect())
}

/// Flat indices of the `k` largest off-diagonal entries; ties go to the
/// lower index.
pub fn top_edges(m: &Tensor, k: usize) -> Result<Vec<usize>> {
    let mut e = off_diagonal(m)?;
    e.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(e.into_iter().take(k).map(|(i, _)| i).collect())
}

pub fn jaccard_top_k(a: &Tensor, b: &Tensor, k: usize) -> Result<f64> {
    let ta = top_edges(a, k)?;
    let tb = top_edges(b, k)?;
    let inter = ta.iter().filter(|i| tb.contains(i)).count();
    let union = ta.len() + tb.len() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Ranks starting at 1 with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation of the off-diagonal entries.
pub fn rank_correlation(a: &Tensor, b: &Tensor) -> Result<f64> {
    let ra = average_ranks(&off_diagonal(a)?.iter().map(|e| e.1).collect::<Vec<_>>());
    let rb = average_ranks(&off_diagonal(b)?.iter().map(|e| e.1).collect::<Vec<_>>());
    if ra.len() != rb.len() {
        return Err(DsprError::Shape {
            op: "rank_correlation",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    Ok(if va == 0.0 || vb == 0.0 {
        if va == vb {
            1.0
        } else {
            0.0
        }
    } else {
        cov / (va * vb).sqrt()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub condition: String,
    pub runs: usize,
    pub jaccard_top5: f64,
    pub rank_correlation: f64,
}

/// Mean pairwise top-5 Jaccard and rank correlation over at least two maps.
pub fn mechanism_stability(condition: &str, maps: &[Tensor]) -> Result<StabilityReport> {
    if maps.len() < 2 {
        return Err(DsprError::Contract("stability needs at least two runs".into()));
    }
    let (mut j, mut r, mut pairs) = (0.0, 0.0, 0.0);
    for a in 0..maps.len() {
        for b in a + 1..maps.len() {
            j += jaccard_top_k(&maps[a], &maps[b], 5)?;
            r += rank_correlation(&maps[a], &maps[b])?;
            pairs += 1.0;
        }
    }
    Ok(StabilityReport {
        condition: condition.to_string(),
        runs: maps.len(),
        jaccard_top5: j / pairs,
        rank_correlation: r / pairs,
    })
}
