//! Predictive diagnostics over a draw matrix (`L x N`, one row per
//! posterior predictive sample, one column per held-out coordinate) and the
//! matching truth vector: MSPE, 95% coverage with the interval score,
//! energy score, and threshold misclassification.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::combine::{quantiles_of_sorted, QuantileGrid};
use crate::error::{Error, Result};
use crate::exec;

/// Below this many draws the 95% interval endpoints are unstable; metrics
/// are still computed but flagged.
pub const LOW_SAMPLE_THRESHOLD: usize = 40;

/// Above this many draws the energy score switches to an evenly subsampled
/// estimator to keep the pairwise sum bounded.
pub const ENERGY_EXACT_MAX: usize = 2000;

fn check_shapes(draws: &DMatrix<f64>, truth: &DVector<f64>) -> Result<()> {
    if draws.ncols() != truth.len() {
        return Err(Error::Dimension(format!(
            "draws have {} coordinates, truth has {}",
            draws.ncols(),
            truth.len()
        )));
    }
    if draws.nrows() == 0 {
        return Err(Error::Dimension("no predictive draws".into()));
    }
    Ok(())
}

/// `||mean(draws) - truth||^2 / N`.
pub fn mspe(draws: &DMatrix<f64>, truth: &DVector<f64>) -> Result<f64> {
    check_shapes(draws, truth)?;
    let l = draws.nrows() as f64;
    let n = draws.ncols();
    let mut acc = 0.0;
    for j in 0..n {
        let mean = draws.column(j).sum() / l;
        let diff = mean - truth[j];
        acc += diff * diff;
    }
    Ok(acc / n as f64)
}

/// Per-coordinate empirical central interval at `level`, its coverage of the
/// truth, and the Gneiting-Raftery interval score
/// `(u - l) + (2/alpha)(l - y)_+ + (2/alpha)(y - u)_+`, averaged over
/// coordinates.
pub fn coverage_and_interval_score(
    draws: &DMatrix<f64>,
    truth: &DVector<f64>,
    level: f64,
) -> Result<(f64, f64, bool)> {
    check_shapes(draws, truth)?;
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "interval level must be in (0,1), got {level}"
        )));
    }
    let l = draws.nrows();
    let alpha = 1.0 - level;
    let grid = QuantileGrid::from_levels(vec![alpha / 2.0, 1.0 - alpha / 2.0])?;
    let n = draws.ncols();
    let per_coord: Vec<(bool, f64)> = exec::map_range(n, |j| {
        let mut col: Vec<f64> = draws.column(j).iter().copied().collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = quantiles_of_sorted(&col, &grid);
        let (lo, hi) = (q[0], q[1]);
        let y = truth[j];
        let covered = lo <= y && y <= hi;
        let score =
            (hi - lo) + (2.0 / alpha) * (lo - y).max(0.0) + (2.0 / alpha) * (y - hi).max(0.0);
        (covered, score)
    });
    let covered = per_coord.iter().filter(|(c, _)| *c).count() as f64 / n as f64;
    let score = per_coord.iter().map(|(_, s)| s).sum::<f64>() / n as f64;
    Ok((covered, score, l < LOW_SAMPLE_THRESHOLD))
}

/// Energy score
/// `(1/L) sum_l ||Y_l - y|| - 1/(2 L^2) sum_l sum_l' ||Y_l - Y_l'||`.
///
/// Exact for `L <= 2000`; above that the draws are evenly subsampled to 2000
/// rows before the exact computation.
pub fn energy_score(draws: &DMatrix<f64>, truth: &DVector<f64>) -> Result<f64> {
    check_shapes(draws, truth)?;
    if draws.nrows() < 2 {
        return Err(Error::InvalidArgument(
            "energy score needs at least two draws".into(),
        ));
    }
    let rows = if draws.nrows() > ENERGY_EXACT_MAX {
        let l = draws.nrows();
        let idx: Vec<usize> = (0..ENERGY_EXACT_MAX).map(|j| j * l / ENERGY_EXACT_MAX).collect();
        let mut sub = DMatrix::zeros(ENERGY_EXACT_MAX, draws.ncols());
        for (r, &i) in idx.iter().enumerate() {
            sub.row_mut(r).copy_from(&draws.row(i));
        }
        sub
    } else {
        draws.clone()
    };
    let l = rows.nrows();
    let to_truth: Vec<f64> = exec::map_range(l, |i| (rows.row(i).transpose() - truth).norm());
    let pair_sums: Vec<f64> = exec::map_range(l, |i| {
        let mut acc = 0.0;
        for j in (i + 1)..l {
            acc += (rows.row(i) - rows.row(j)).norm();
        }
        acc
    });
    let first = to_truth.iter().sum::<f64>() / l as f64;
    let second = pair_sums.iter().sum::<f64>() / (l * l) as f64;
    Ok(first - second)
}

/// How coordinates are classified against the threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdRule {
    /// Classify by the predictive mean (default).
    PredictiveMean,
    /// Classify by whether the exceedance probability is above one half.
    ExceedanceProbability,
}

/// Percentage of coordinates whose threshold classification disagrees with
/// the truth's.
pub fn threshold_error_pct(
    draws: &DMatrix<f64>,
    truth: &DVector<f64>,
    threshold: f64,
    rule: ThresholdRule,
) -> Result<f64> {
    check_shapes(draws, truth)?;
    let l = draws.nrows() as f64;
    let n = draws.ncols();
    let mut wrong = 0usize;
    for j in 0..n {
        let predicted_exceeds = match rule {
            ThresholdRule::PredictiveMean => draws.column(j).sum() / l > threshold,
            ThresholdRule::ExceedanceProbability => {
                let pr = draws.column(j).iter().filter(|&&v| v > threshold).count() as f64 / l;
                pr > 0.5
            }
        };
        if predicted_exceeds != (truth[j] > threshold) {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / n as f64)
}

/// One evaluation's worth of diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mspe: f64,
    pub coverage: f64,
    pub interval_score: f64,
    pub energy_score: f64,
    pub error_pct: f64,
    pub n0: usize,
    pub s0: usize,
    pub l: usize,
    pub low_sample_warning: bool,
}

impl EvalReport {
    pub fn compute(
        draws: &DMatrix<f64>,
        truth: &DVector<f64>,
        n0: usize,
        s0: usize,
        threshold: f64,
        rule: ThresholdRule,
    ) -> Result<Self> {
        let (coverage, interval_score, low) = coverage_and_interval_score(draws, truth, 0.95)?;
        Ok(EvalReport {
            mspe: mspe(draws, truth)?,
            coverage,
            interval_score,
            energy_score: energy_score(draws, truth)?,
            error_pct: threshold_error_pct(draws, truth, threshold, rule)?,
            n0,
            s0,
            l: draws.nrows(),
            low_sample_warning: low,
        })
    }

    pub fn save_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        if let Some(c) = comment {
            writeln!(w, "# {c}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(
            w,
            "mspe,coverage,interval_score,energy_score,error_pct,n0,s0,l,low_sample_warning"
        )
        .map_err(|e| Error::io(path, e))?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            self.mspe,
            self.coverage,
            self.interval_score,
            self.energy_score,
            self.error_pct,
            self.n0,
            self.s0,
            self.l,
            self.low_sample_warning
        )
        .map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn table(&self) -> String {
        format!(
            "metric           value\n\
             mspe             {:>12.6}\n\
             coverage         {:>12.4}\n\
             interval score   {:>12.6}\n\
             energy score     {:>12.6}\n\
             error %          {:>12.4}\n\
             (n0 = {}, S0 = {}, L = {}{})",
            self.mspe,
            self.coverage,
            self.interval_score,
            self.energy_score,
            self.error_pct,
            self.n0,
            self.s0,
            self.l,
            if self.low_sample_warning {
                ", low-sample warning"
            } else {
                ""
            }
        )
    }
}
