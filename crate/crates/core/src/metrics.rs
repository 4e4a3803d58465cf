//! Accuracy and physical-fidelity metrics over `[S, H]` forecasts.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DsprError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-8;

fn check(op: &'static str, y_hat: &Tensor, y: &Tensor) -> Result<(usize, usize)> {
    if y_hat.shape() != y.shape() || y.shape().len() != 2 {
        return Err(DsprError::Shape {
            op,
            lhs: y_hat.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok((y.shape()[0], y.shape()[1]))
}

fn rows(t: &Tensor, h: usize) -> impl Iterator<Item = &[f64]> {
    t.data().chunks(h)
}

pub fn mae(y_hat: &Tensor, y: &Tensor) -> Result<f64> {
    check("mae", y_hat, y)?;
    let s: f64 = y_hat.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / y.numel() as f64)
}

pub fn rmse(y_hat: &Tensor, y: &Tensor) -> Result<f64> {
    check("rmse", y_hat, y)?;
    let s: f64 = y_hat.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((s / y.numel() as f64).sqrt())
}

/// Mean conservation accuracy in percent:
/// `mean_s (1 - |sum y_hat - sum y| / (sum y + eps)) * 100`.
///
/// The denominator is the signed total, so on centred data the value can be
/// negative or exceed 100; [`MetricReport`] also carries a floored copy.
pub fn mca(y_hat: &Tensor, y: &Tensor, eps: f64) -> Result<f64> {
    let (s, h) = check("mca", y_hat, y)?;
    let total: f64 = rows(y_hat, h)
        .zip(rows(y, h))
        .map(|(a, b)| {
            let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
            1.0 - (sa - sb).abs() / (sb + eps)
        })
        .sum();
    Ok(total / s as f64 * 100.0)
}

fn total_variation(x: &[f64]) -> f64 {
    x.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

/// `TV(y_hat) / TV(y)`, with `eps` standing in for a vanishing truth variation.
/// Equal variations give exactly 1.
pub fn variation_ratio(y_hat: &[f64], y: &[f64], eps: f64) -> f64 {
    let (tp, ty) = (total_variation(y_hat), total_variation(y));
    if tp == ty {
        1.0
    } else {
        tp / ty.max(eps)
    }
}

/// Total variation ratio in percent: `mean_s (1 - |1 - r_s|) * 100` with
/// `r_s` from [`variation_ratio`].
pub fn tvr(y_hat: &Tensor, y: &Tensor, eps: f64) -> Result<f64> {
    let (s, h) = check("tvr", y_hat, y)?;
    let total: f64 = rows(y_hat, h)
        .zip(rows(y, h))
        .map(|(a, b)| 1.0 - (1.0 - variation_ratio(a, b, eps)).abs())
        .sum();
    Ok(total / s as f64 * 100.0)
}

/// Interval convention for [`tda`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdaConfig {
    /// Steps per non-overlapping horizon segment.
    pub segment: usize,
    /// Minimum `|change of segment mean|` of the truth for an interval to count.
    pub delta: f64,
}

impl TdaConfig {
    /// Segments of 4 steps (halved until two fit in the horizon) and
    /// `delta = 0.1 * std(y)` over every evaluated value.
    pub fn for_truth(y: &Tensor) -> Self {
        let h = y.shape().get(1).copied().unwrap_or(1);
        let mut segment = 4;
        while segment > 1 && 2 * segment > h {
            segment /= 2;
        }
        let n = y.numel() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let std = (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            segment,
            delta: 0.1 * std,
        }
    }
}

fn segment_means(x: &[f64], seg: usize) -> Vec<f64> {
    x.chunks_exact(seg)
        .map(|c| c.iter().sum::<f64>() / seg as f64)
        .collect()
}

/// Trend directional accuracy in percent over all significant intervals
/// pooled across samples; `None` when no interval is significant.
pub fn tda(y_hat: &Tensor, y: &Tensor, cfg: &TdaConfig) -> Result<Option<f64>> {
    let (_, h) = check("tda", y_hat, y)?;
    if cfg.segment == 0 || cfg.delta < 0.0 {
        return Err(DsprError::Config("tda needs segment >= 1 and delta >= 0".into()));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (a, b) in rows(y_hat, h).zip(rows(y, h)) {
        let (ma, mb) = (segment_means(a, cfg.segment), segment_means(b, cfg.segment));
        for k in 1..mb.len() {
            let dy = mb[k] - mb[k - 1];
            if dy.abs() > cfg.delta {
                total += 1;
                let dp = ma[k] - ma[k - 1];
                if dp != 0.0 && dp.signum() == dy.signum() {
                    hits += 1;
                }
            }
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64 * 100.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    High,
    Medium,
    Low,
    All,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Regime::High => "High",
            Regime::Medium => "Medium",
            Regime::Low => "Low",
            Regime::All => "All",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mca: f64,
    pub mca_clipped: f64,
    pub tvr: f64,
    pub tda: Option<f64>,
    pub n_samples: usize,
    pub regime: Option<Regime>,
    pub tda_segment: usize,
    pub tda_delta: f64,
}

impl MetricReport {
    pub fn compute(y_hat: &Tensor, y: &Tensor, tda_cfg: &TdaConfig, regime: Option<Regime>) -> Result<Self> {
        let (s, h) = check("metric_report", y_hat, y)?;
        let mca = mca(y_hat, y, DEFAULT_EPS)?;
        Ok(Self {
            horizon: h,
            mae: mae(y_hat, y)?,
            rmse: rmse(y_hat, y)?,
            mca,
            mca_clipped: mca.max(0.0),
            tvr: tvr(y_hat, y, DEFAULT_EPS)?,
            tda: tda(y_hat, y, tda_cfg)?,
            n_samples: s,
            regime,
            tda_segment: tda_cfg.segment,
            tda_delta: tda_cfg.delta,
        })
    }

    /// One report per horizon `h = 1..=H`, each scoring the first `h`
    /// forecast steps. Without a fixed `tda` convention the thresholds come
    /// from each truth prefix.
    pub fn per_horizon(
        y_hat: &Tensor,
        y: &Tensor,
        regime: Option<Regime>,
        tda: Option<TdaConfig>,
    ) -> Result<Vec<Self>> {
        let (s, h) = check("per_horizon", y_hat, y)?;
        (1..=h)
            .map(|k| {
                let prefix = |t: &Tensor| {
                    let data = t.data().chunks(h).flat_map(|row| row[..k].iter().copied()).collect();
                    Tensor::new(vec![s, k], data)
                };
                let (p, t) = (prefix(y_hat)?, prefix(y)?);
                Self::compute(&p, &t, &tda.unwrap_or_else(|| TdaConfig::for_truth(&t)), regime)
            })
            .collect()
    }

    pub const CSV_HEADER: [&'static str; 9] = [
        "label",
        "regime",
        "horizon",
        "MAE",
        "RMSE",
        "MCA",
        "TVR",
        "TDA",
        "n_samples",
    ];

    pub fn csv_row(&self, label: &str) -> Vec<String> {
        vec![
            label.to_string(),
            self.regime.map_or_else(|| "All".to_string(), |r| r.to_string()),
            self.horizon.to_string(),
            self.mae.to_string(),
            self.rmse.to_string(),
            self.mca.to_string(),
            self.tvr.to_string(),
            self.tda.map_or_else(|| "undefined".to_string(), |v| v.to_string()),
            self.n_samples.to_string(),
        ]
    }
}

/// Writes labelled reports in the accuracy-table column layout.
pub fn write_reports_csv(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MetricReport::CSV_HEADER)?;
    for (label, r) in rows {
        w.write_record(r.csv_row(label))?;
    }
    w.flush()?;
    Ok(())
}

/// Volatility tertiles of per-sample target standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimePartition {
    pub high: Vec<usize>,
    pub medium: Vec<usize>,
    pub low: Vec<usize>,
    /// Largest std in the low group and in the medium group.
    pub thresholds: (f64, f64),
}

impl RegimePartition {
    pub fn group(&self, r: Regime) -> Option<&[usize]> {
        match r {
            Regime::High => Some(&self.high),
            Regime::Medium => Some(&self.medium),
            Regime::Low => Some(&self.low),
            Regime::All => None,
        }
    }
}

/// Sorts samples by `(std, index)` and cuts at `floor(n/3)` and `floor(2n/3)`.
pub fn regime_split(sample_std: &[f64]) -> Result<RegimePartition> {
    let n = sample_std.len();
    if n < 3 {
        return Err(DsprError::Contract(format!(
            "regime split needs at least 3 samples, got {n}"
        )));
    }
    if sample_std.iter().any(|v| !v.is_finite()) {
        return Err(DsprError::Contract("non-finite sample std".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sample_std[a].total_cmp(&sample_std[b]).then(a.cmp(&b)));
    let (c1, c2) = (n / 3, 2 * n / 3);
    let mut low = order[..c1].to_vec();
    let mut medium = order[c1..c2].to_vec();
    let mut high = order[c2..].to_vec();
    low.sort_unstable();
    medium.sort_unstable();
    high.sort_unstable();
    Ok(RegimePartition {
        thresholds: (sample_std[order[c1 - 1]], sample_std[order[c2 - 1]]),
        high,
        medium,
        low,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn one_missing_unit_costs_a_quarter() {
        let y = t(&[&[1.0, 1.0, 1.0, 1.0]]);
        let p = t(&[&[1.0, 1.0, 1.0, 0.0]]);
        assert!((mca(&p, &y, DEFAULT_EPS).unwrap() - 75.0).abs() < 1e-6);
    }

    #[test]
    fn zero_total_stays_finite() {
        let y = t(&[&[1.0, -1.0]]);
        let p = t(&[&[0.5, 0.0]]);
        assert!(mca(&p, &y, DEFAULT_EPS).unwrap().is_finite());
    }

    #[test]
    fn doubled_variation_scores_zero() {
        let y = t(&[&[0.0, 1.0, 0.0, 1.0]]);
        let p = t(&[&[0.0, 2.0, 0.0, 2.0]]);
        assert_eq!(tvr(&p, &y, DEFAULT_EPS).unwrap(), 0.0);
    }

    #[test]
    fn constant_prediction_has_zero_tvr() {
        let y = t(&[&[0.0, 1.0, 3.0, 2.0]]);
        let p = t(&[&[5.0, 5.0, 5.0, 5.0]]);
        assert_eq!(tvr(&p, &y, DEFAULT_EPS).unwrap(), 0.0);
    }

    #[test]
    fn sign_flip_misses_every_interval() {
        let y = t(&[&[1.0, 1.0, -1.0, -1.0], &[-2.0, -2.0, 2.0, 2.0]]);
        let p = t(&[&[-1.0, -1.0, 1.0, 1.0], &[2.0, 2.0, -2.0, -2.0]]);
        let cfg = TdaConfig { segment: 2, delta: 0.1 };
        assert_eq!(tda(&p, &y, &cfg).unwrap(), Some(0.0));
        assert_eq!(tda(&y, &y, &cfg).unwrap(), Some(100.0));
    }

    #[test]
    fn flat_truth_leaves_tda_undefined() {
        let y = t(&[&[1.0, 1.0, 1.0, 1.0]]);
        let cfg = TdaConfig { segment: 2, delta: 0.1 };
        assert_eq!(tda(&y, &y, &cfg).unwrap(), None);
    }

    #[test]
    fn default_segment_fits_short_horizons() {
        assert_eq!(TdaConfig::for_truth(&Tensor::zeros(&[2, 4])).segment, 2);
        assert_eq!(TdaConfig::for_truth(&Tensor::zeros(&[2, 8])).segment, 4);
        assert_eq!(TdaConfig::for_truth(&Tensor::zeros(&[2, 1])).segment, 1);
    }

    #[test]
    fn exact_tertiles() {
        let stds: Vec<f64> = (1..=9).map(f64::from).collect();
        let p = regime_split(&stds).unwrap();
        assert_eq!(p.high, vec![6, 7, 8]);
        assert_eq!(p.medium, vec![3, 4, 5]);
        assert_eq!(p.low, vec![0, 1, 2]);
        assert_eq!(p.thresholds, (3.0, 6.0));
    }

    #[test]
    fn ties_split_by_index() {
        let p = regime_split(&[2.0; 9]).unwrap();
        assert_eq!(p.low, vec![0, 1, 2]);
        assert_eq!(p.medium, vec![3, 4, 5]);
        assert_eq!(p.high, vec![6, 7, 8]);
    }

    #[test]
    fn too_few_samples() {
        assert!(regime_split(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(mae(&a, &b).is_err());
        assert!(mca(&a, &b, DEFAULT_EPS).is_err());
    }

    proptest! {
        #[test]
        fn perfect_prediction_scores(data in prop::collection::vec(0.1f64..10.0, 8..40)) {
            let s = data.len() / 4;
            let y = Tensor::new(vec![s, 4], data[..s * 4].to_vec()).unwrap();
            let r = MetricReport::compute(&y, &y, &TdaConfig::for_truth(&y), None).unwrap();
            prop_assert_eq!(r.mae, 0.0);
            prop_assert_eq!(r.rmse, 0.0);
            prop_assert!((r.mca - 100.0).abs() < 1e-9);
            prop_assert!((r.tvr - 100.0).abs() < 1e-9);
            if let Some(v) = r.tda {
                prop_assert_eq!(v, 100.0);
            }
        }

        #[test]
        fn mca_ignores_horizon_order(
            a in prop::collection::vec(-5f64..5.0, 6),
            b in prop::collection::vec(0.5f64..5.0, 6),
            perm in Just(vec![3usize, 0, 5, 1, 4, 2]),
        ) {
            let ya = Tensor::new(vec![1, 6], a.clone()).unwrap();
            let yb = Tensor::new(vec![1, 6], b.clone()).unwrap();
            let pa = Tensor::new(vec![1, 6], perm.iter().map(|&i| a[i]).collect()).unwrap();
            let pb = Tensor::new(vec![1, 6], perm.iter().map(|&i| b[i]).collect()).unwrap();
            let m1 = mca(&ya, &yb, DEFAULT_EPS).unwrap();
            let m2 = mca(&pa, &pb, DEFAULT_EPS).unwrap();
            prop_assert!((m1 - m2).abs() < 1e-9 * m1.abs().max(1.0));
        }

        #[test]
        fn tertiles_partition(stds in prop::collection::vec(0f64..3.0, 3..200)) {
            let p = regime_split(&stds).unwrap();
            let mut all: Vec<usize> = p.high.iter().chain(&p.medium).chain(&p.low).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..stds.len()).collect::<Vec<_>>());
            let sizes = [p.high.len(), p.medium.len(), p.low.len()];
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
