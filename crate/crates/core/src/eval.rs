//! 3D-ROC evaluation, separability summaries and the global RX baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::{BinaryMask, HsiCube, ScoreMap};

/// Detection and false-alarm rates at descending thresholds.
///
/// The first point is a sentinel `(t = 1, P_D = 0, P_F = 0)` standing for a
/// threshold just above the top score; every following point is one unique
/// min-max normalised score `u` with rates counted over `score >= u`. The
/// smallest unique score is always 0, so the series ends at `(0, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocSeries {
    pub thresholds: Vec<f64>,
    pub p_d: Vec<f64>,
    pub p_f: Vec<f64>,
}

fn check_pair(scores: &ScoreMap, gt: &BinaryMask) -> Result<(usize, usize)> {
    if scores.height() != gt.height() || scores.width() != gt.width() {
        return Err(Error::Argument(format!(
            "score map {}x{} and ground truth {}x{} differ",
            scores.height(),
            scores.width(),
            gt.height(),
            gt.width()
        )));
    }
    let anomalies = gt.count_ones();
    let background = gt.values().len() - anomalies;
    if anomalies == 0 || background == 0 {
        return Err(Error::Argument(format!(
            "ground truth needs both classes, has {anomalies} anomaly and {background} background pixels"
        )));
    }
    Ok((anomalies, background))
}

pub fn roc_series(scores: &ScoreMap, gt: &BinaryMask) -> Result<RocSeries> {
    let (n_a, n_b) = check_pair(scores, gt)?;
    let u = scores.normalized();
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&a, &b| u[b].total_cmp(&u[a]));
    let mut series = RocSeries {
        thresholds: vec![1.0],
        p_d: vec![0.0],
        p_f: vec![0.0],
    };
    let (mut hits, mut false_alarms) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = u[order[i]];
        while i < order.len() && u[order[i]] == t {
            if gt.values()[order[i]] == 1 {
                hits += 1;
            } else {
                false_alarms += 1;
            }
            i += 1;
        }
        series.thresholds.push(t);
        series.p_d.push(hits as f64 / n_a as f64);
        series.p_f.push(false_alarms as f64 / n_b as f64);
    }
    Ok(series)
}

impl RocSeries {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// `threshold,p_d,p_f` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,p_d,p_f\n");
        for k in 0..self.len() {
            s.push_str(&format!("{},{},{}\n", self.thresholds[k], self.p_d[k], self.p_f[k]));
        }
        s
    }
}

/// Trapezoid area under `y(x)` for consecutive points, with `|dx|` so the
/// direction of travel does not matter.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| (xs[1] - xs[0]).abs() * (ys[0] + ys[1]) / 2.0)
        .sum()
}

/// The three base areas and four scores derived from them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub auc_df: f64,
    pub auc_dt: f64,
    pub auc_ft: f64,
    pub auc_td: f64,
    pub auc_bs: f64,
    pub auc_odp: f64,
    /// `+inf` when `auc_ft` is 0.
    pub auc_snpr: f64,
}

impl AucReport {
    pub fn from_base(auc_df: f64, auc_dt: f64, auc_ft: f64) -> Self {
        Self {
            auc_df,
            auc_dt,
            auc_ft,
            auc_td: auc_df + auc_dt,
            auc_bs: auc_df - auc_ft,
            auc_odp: auc_dt - auc_ft + 1.0,
            auc_snpr: if auc_ft == 0.0 {
                f64::INFINITY
            } else {
                auc_dt / auc_ft
            },
        }
    }

    pub fn snpr_is_infinite(&self) -> bool {
        self.auc_snpr.is_infinite()
    }

    pub const CSV_HEADER: &'static str =
        "dataset,method,auc_df,auc_dt,auc_ft,auc_td,auc_bs,auc_odp,auc_snpr";

    pub fn csv_row(&self, dataset: &str, method: &str) -> String {
        let snpr = if self.snpr_is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.6}", self.auc_snpr)
        };
        format!(
            "{dataset},{method},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{snpr}",
            self.auc_df, self.auc_dt, self.auc_ft, self.auc_td, self.auc_bs, self.auc_odp
        )
    }

    /// Parses a row written by [`AucReport::csv_row`].
    pub fn parse_csv_row(line: &str) -> Result<(String, String, Self)> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Data(format!("expected 9 CSV fields, got {}: {line}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            match f[i] {
                "inf" => Ok(f64::INFINITY),
                s => s
                    .parse()
                    .map_err(|_| Error::Data(format!("field {i} is not a number: {s}"))),
            }
        };
        Ok((
            f[0].to_string(),
            f[1].to_string(),
            Self {
                auc_df: num(2)?,
                auc_dt: num(3)?,
                auc_ft: num(4)?,
                auc_td: num(5)?,
                auc_bs: num(6)?,
                auc_odp: num(7)?,
                auc_snpr: num(8)?,
            },
        ))
    }

    /// Names of derived fields that differ from their recomputation from the
    /// base areas by more than `abs_tol` (`snpr_rel_tol` relative for SNPR).
    pub fn identity_violations(&self, abs_tol: f64, snpr_rel_tol: f64) -> Vec<&'static str> {
        let r = Self::from_base(self.auc_df, self.auc_dt, self.auc_ft);
        let mut bad = Vec::new();
        for (name, printed, recomputed) in [
            ("auc_td", self.auc_td, r.auc_td),
            ("auc_bs", self.auc_bs, r.auc_bs),
            ("auc_odp", self.auc_odp, r.auc_odp),
        ] {
            if (printed - recomputed).abs() > abs_tol {
                bad.push(name);
            }
        }
        let snpr_ok = if r.auc_snpr.is_infinite() || self.auc_snpr.is_infinite() {
            r.auc_snpr == self.auc_snpr
        } else {
            (self.auc_snpr - r.auc_snpr).abs() <= snpr_rel_tol * r.auc_snpr.abs()
        };
        if !snpr_ok {
            bad.push("auc_snpr");
        }
        bad
    }
}

pub fn auc_report(series: &RocSeries) -> AucReport {
    AucReport::from_base(
        trapezoid(&series.p_f, &series.p_d),
        trapezoid(&series.thresholds, &series.p_d),
        trapezoid(&series.thresholds, &series.p_f),
    )
}

/// Shorthand for `auc_report(&roc_series(..)?)`.
pub fn evaluate(scores: &ScoreMap, gt: &BinaryMask) -> Result<AucReport> {
    Ok(auc_report(&roc_series(scores, gt)?))
}

/// Global RX: squared Mahalanobis distance of every pixel to the global mean
/// under the global covariance plus `eps * I`. `None` picks
/// `1e-6 * trace / B`, or `1e-6` when the covariance is zero.
pub fn grx(cube: &HsiCube, eps: Option<f64>) -> Result<ScoreMap> {
    let (h, w, b) = (cube.height(), cube.width(), cube.bands());
    let n = h * w;
    // B x N, column per pixel
    let x = DMatrix::<f64>::from_fn(b, n, |band, p| cube.band(band)[p] as f64);
    let mean = DVector::<f64>::from_fn(b, |band, _| x.row(band).mean());
    let mut d = x;
    for mut col in d.column_iter_mut() {
        col -= &mean;
    }
    let mut cov = &d * d.transpose() / n as f64;
    let eps = match eps {
        Some(e) if e >= 0.0 && e.is_finite() => e,
        Some(e) => return Err(Error::Argument(format!("regularization must be >= 0, got {e}"))),
        None => {
            let tr = cov.trace();
            if tr > 0.0 {
                1e-6 * tr / b as f64
            } else {
                1e-6
            }
        }
    };
    for i in 0..b {
        cov[(i, i)] += eps;
    }
    let chol = cov.cholesky().ok_or_else(|| {
        Error::Numeric(format!(
            "covariance + {eps:e} I is not positive definite; use a larger regularization"
        ))
    })?;
    let y = chol
        .l()
        .solve_lower_triangular(&d)
        .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
    let scores = y.column_iter().map(|c| c.norm_squared()).collect();
    ScoreMap::new(h, w, scores)
}

/// Minimum, quartiles and maximum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile of sorted data with linear interpolation between order
/// statistics at position `q * (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub background: FiveNumber,
    pub anomaly: FiveNumber,
}

impl Separability {
    pub const CSV_HEADER: &'static str =
        "method,bg_min,bg_q1,bg_median,bg_q3,bg_max,an_min,an_q1,an_median,an_q3,an_max";

    pub fn csv_row(&self, method: &str) -> String {
        let (b, a) = (&self.background, &self.anomaly);
        format!(
            "{method},{},{},{},{},{},{},{},{},{},{}",
            b.min, b.q1, b.median, b.q3, b.max, a.min, a.q1, a.median, a.q3, a.max
        )
    }
}

/// Five-number summaries of normalised scores per class.
pub fn separability_stats(scores: &ScoreMap, gt: &BinaryMask) -> Result<Separability> {
    check_pair(scores, gt)?;
    let u = scores.normalized();
    let (mut bg, mut an) = (Vec::new(), Vec::new());
    for (v, &g) in u.into_iter().zip(gt.values()) {
        if g == 1 {
            an.push(v);
        } else {
            bg.push(v);
        }
    }
    Ok(Separability {
        background: FiveNumber::of(&bg),
        anomaly: FiveNumber::of(&an),
    })
}
