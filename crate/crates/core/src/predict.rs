//! Posterior predictive composition sampling at new index points.
//!
//! Two modes. In new-simulation mode the GP term at the new points is a
//! fresh realization, so given a parameter draw
//! `y* ~ N(mu*, sigma2 K** + tau2 I)` with `mu* = Z* gamma + X* beta`.
//! In within-simulation mode the GP term is kriged against the sketched data
//! of one training run: the conditioning quantities of the usual GP
//! predictive are projected through the sketch, so with
//! `Sigma11 = sigma2 Phi K Phi^T + tau2 I`, `Sigma21 = sigma2 Cov(w*, w)
//! Phi^T`, `Sigma22 = sigma2 K**`, a draw has mean
//! `mu* + Sigma21 Sigma11^{-1} (y_{s,Phi} - Phi mu_s)` and covariance
//! `Sigma22 - Sigma21 Sigma11^{-1} Sigma12 + tau2 I`.
//!
//! One plan is built per (covariance, request) pair; the expensive
//! eigendecompositions happen once and every parameter draw reuses them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::binfmt;
use crate::data::{PredictionMode, PredictionRequest};
use crate::error::{Error, Result};
use crate::exec;
use crate::kernels::CovarianceOperator;
use crate::linalg::{chol_with_jitter, PsdEigen, CHOL_JITTER};
use crate::rng::seeded_rng;
use crate::sampler::SketchedPosterior;
use crate::sketch::{SketchMatrix, SketchedData};

const PRED_MAGIC: &[u8; 8] = b"GPSKPRED";
const PRED_VERSION: u64 = 1;

/// Composition draws of `y*`; row `l` holds the sample for parameter draw
/// `l`, coordinates ordered simulation-major (`idx = s* . n* + i`).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDraws {
    pub draws: DMatrix<f64>,
    pub sketch_id: usize,
    pub n_star: usize,
    pub s_star: usize,
    pub mode: PredictionMode,
}

impl PredictiveDraws {
    pub fn count(&self) -> usize {
        self.draws.nrows()
    }

    pub fn save(&self, path: &Path, config_hash: &[u8; 32]) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        binfmt::write_u64(&mut w, path, binfmt::magic(PRED_MAGIC))?;
        binfmt::write_u64(&mut w, path, PRED_VERSION)?;
        let (mode, sim) = match self.mode {
            PredictionMode::NewSimulation => (0u64, 0u64),
            PredictionMode::WithinSimulation(s) => (1u64, s as u64),
        };
        for v in [
            self.sketch_id as u64,
            self.count() as u64,
            self.n_star as u64,
            self.s_star as u64,
            mode,
            sim,
        ] {
            binfmt::write_u64(&mut w, path, v)?;
        }
        w.write_all(config_hash).map_err(|e| Error::io(path, e))?;
        binfmt::write_matrix(&mut w, path, &self.draws)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, [u8; 32])> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        binfmt::expect_magic(&mut r, path, binfmt::magic(PRED_MAGIC), "predictive draws")?;
        let version = binfmt::read_u64(&mut r, path)?;
        if version != PRED_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let sketch_id = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "sketch")?;
        let count = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "count")?;
        let n_star = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "n_star")?;
        let s_star = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "s_star")?;
        let mode_tag = binfmt::read_u64(&mut r, path)?;
        let sim = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "sim")?;
        let mode = match mode_tag {
            0 => PredictionMode::NewSimulation,
            1 => PredictionMode::WithinSimulation(sim),
            other => return Err(Error::format(path, format!("bad mode tag {other}"))),
        };
        let mut config_hash = [0u8; 32];
        std::io::Read::read_exact(&mut r, &mut config_hash).map_err(|e| Error::io(path, e))?;
        let draws = binfmt::read_matrix(&mut r, path, count, n_star * s_star)?;
        Ok((
            PredictiveDraws {
                draws,
                sketch_id,
                n_star,
                s_star,
                mode,
            },
            config_hash,
        ))
    }
}

/// Precomputed per-(covariance, request) state reused across parameter draws.
pub enum PredictivePlan {
    NewSim {
        x_star: DMatrix<f64>,
        z_star: DMatrix<f64>,
        /// Eigendecomposition of `K**`.
        vectors: DMatrix<f64>,
        values: DVector<f64>,
    },
    WithinSim {
        x_star: DMatrix<f64>,
        z_star: DMatrix<f64>,
        /// `Cov(w*, w) Phi^T Q` (n* x m).
        t_mat: DMatrix<f64>,
        /// Eigenvalues of `Phi K Phi^T`.
        lambda: DVector<f64>,
        /// `K**` under the variant.
        kss: DMatrix<f64>,
        /// Rotated sketched data of the conditioning run.
        y_rot_s: DVector<f64>,
        x_rot: DMatrix<f64>,
        ones_rot: DVector<f64>,
        z_s: DVector<f64>,
        sim: usize,
    },
}

impl PredictivePlan {
    pub fn n_star(&self) -> usize {
        match self {
            PredictivePlan::NewSim { x_star, .. } => x_star.nrows(),
            PredictivePlan::WithinSim { x_star, .. } => x_star.nrows(),
        }
    }

    pub fn s_star(&self) -> usize {
        match self {
            PredictivePlan::NewSim { z_star, .. } => z_star.nrows(),
            PredictivePlan::WithinSim { z_star, .. } => z_star.nrows(),
        }
    }

    pub fn mode(&self) -> PredictionMode {
        match self {
            PredictivePlan::NewSim { .. } => PredictionMode::NewSimulation,
            PredictivePlan::WithinSim { sim, .. } => PredictionMode::WithinSimulation(*sim),
        }
    }
}

/// Plan for fresh-realization prediction.
pub fn plan_new_simulation(
    cov: &dyn CovarianceOperator,
    req: &PredictionRequest,
) -> Result<PredictivePlan> {
    let kss = cov.new_cov(&req.new_locations)?;
    let eig = PsdEigen::new(&kss);
    Ok(PredictivePlan::NewSim {
        x_star: req.new_local_attrs.clone(),
        z_star: req.new_global_attrs.clone(),
        vectors: eig.vectors,
        values: eig.values,
    })
}

/// Plan for kriging against the sketched data of training run `sim`.
pub fn plan_within_simulation(
    cov: &dyn CovarianceOperator,
    req: &PredictionRequest,
    phi: &SketchMatrix,
    sk: &SketchedData,
    global_attrs: &DMatrix<f64>,
    phi_k_phi_t: &DMatrix<f64>,
) -> Result<PredictivePlan> {
    let PredictionMode::WithinSimulation(sim) = req.mode else {
        return Err(Error::InvalidArgument(
            "request mode is not within-simulation".into(),
        ));
    };
    if req.s_star() != 1 {
        return Err(Error::InvalidArgument(
            "within-simulation prediction conditions on one training run; \
             request exactly one simulation"
                .into(),
        ));
    }
    if sim >= sk.s() {
        return Err(Error::InvalidArgument(format!(
            "training run {sim} out of range (S = {})",
            sk.s()
        )));
    }
    let eig = PsdEigen::new(phi_k_phi_t);
    // Sigma21 / sigma2 = Cov(w*, w) Phi^T, rotated once
    let phi_dense = phi.to_dense();
    let cross_phi_t = cov.cross_mul(&req.new_locations, &phi_dense.transpose());
    let t_mat = &cross_phi_t * &eig.vectors;
    let kss = cov.new_cov(&req.new_locations)?;
    Ok(PredictivePlan::WithinSim {
        x_star: req.new_local_attrs.clone(),
        z_star: req.new_global_attrs.clone(),
        t_mat,
        lambda: eig.values.clone(),
        kss,
        y_rot_s: eig.rotate_vec(&sk.y_sk.column(sim).into_owned()),
        x_rot: eig.rotate(&sk.x_sk),
        ones_rot: eig.rotate_vec(&sk.ones_sk),
        z_s: global_attrs.row(sim).transpose(),
        sim,
    })
}

/// Predictive mean (length `n* . S*`) and the per-simulation covariance
/// block (`n* x n*`; simulations are independent given the parameters).
pub fn predictive_moments(
    plan: &PredictivePlan,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    sigma2: f64,
    tau2: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    match plan {
        PredictivePlan::NewSim {
            x_star,
            z_star,
            vectors,
            values,
        } => {
            let n_star = x_star.nrows();
            let s_star = z_star.nrows();
            let xb = x_star * beta;
            let mut mean = DVector::zeros(n_star * s_star);
            for s in 0..s_star {
                let zg = z_star.row(s).transpose().dot(gamma);
                for i in 0..n_star {
                    mean[s * n_star + i] = xb[i] + zg;
                }
            }
            let mut cov = vectors
                * DMatrix::from_diagonal(&values.map(|v| sigma2 * v))
                * vectors.transpose();
            for i in 0..n_star {
                cov[(i, i)] += tau2;
            }
            (mean, cov)
        }
        PredictivePlan::WithinSim {
            x_star,
            z_star,
            t_mat,
            lambda,
            kss,
            y_rot_s,
            x_rot,
            ones_rot,
            z_s,
            ..
        } => {
            let n_star = x_star.nrows();
            let d = lambda.map(|l| 1.0 / (sigma2 * l + tau2));
            let resid = y_rot_s - x_rot * beta - ones_rot * z_s.dot(gamma);
            let correction = t_mat * d.component_mul(&resid) * sigma2;
            let zg = z_star.row(0).transpose().dot(gamma);
            let mut mean = x_star * beta;
            for i in 0..n_star {
                mean[i] += zg + correction[i];
            }
            // sigma2 K** - sigma2^2 T diag(d) T^T + tau2 I
            let mut td = t_mat.clone();
            for (j, dj) in d.iter().enumerate() {
                td.column_mut(j).scale_mut(*dj);
            }
            let mut cov = kss * sigma2 - (td * t_mat.transpose()) * (sigma2 * sigma2);
            for i in 0..n_star {
                cov[(i, i)] += tau2;
            }
            (mean, cov)
        }
    }
}

/// One predictive sample for one parameter draw.
pub fn predictive_draw(
    plan: &PredictivePlan,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    sigma2: f64,
    tau2: f64,
    rng: &mut ChaCha12Rng,
) -> Result<DVector<f64>> {
    match plan {
        PredictivePlan::NewSim {
            x_star,
            z_star,
            vectors,
            values,
        } => {
            let n_star = x_star.nrows();
            let s_star = z_star.nrows();
            let xb = x_star * beta;
            let sd = values.map(|v| (sigma2 * v + tau2).sqrt());
            let mut out = DVector::zeros(n_star * s_star);
            for s in 0..s_star {
                let zg = z_star.row(s).transpose().dot(gamma);
                let z = DVector::from_fn(n_star, |_, _| rng.sample(StandardNormal));
                let w = vectors * sd.component_mul(&z);
                for i in 0..n_star {
                    out[s * n_star + i] = xb[i] + zg + w[i];
                }
            }
            Ok(out)
        }
        PredictivePlan::WithinSim { .. } => {
            let (mean, cov) = predictive_moments(plan, beta, gamma, sigma2, tau2);
            let n_star = plan.n_star();
            let chol = chol_with_jitter(cov, CHOL_JITTER, "within-simulation predictive")?;
            let z = DVector::from_fn(n_star, |_, _| rng.sample(StandardNormal));
            Ok(mean + chol.l() * z)
        }
    }
}

/// Composition sampling: one predictive draw per retained parameter draw,
/// subsampled evenly to `count`. Draw-parallel; each draw has its own seeded
/// stream, so results do not depend on scheduling.
pub fn composition_sample(
    posterior: &SketchedPosterior,
    plan: &PredictivePlan,
    count: usize,
    seed: u64,
) -> Result<PredictiveDraws> {
    let l = posterior.len();
    if count == 0 || count > l {
        return Err(Error::InvalidArgument(format!(
            "count must satisfy 1 <= count <= L = {l}, got {count}"
        )));
    }
    let n_out = plan.n_star() * plan.s_star();
    let rows: Vec<Result<DVector<f64>>> = exec::map_range(count, |j| {
        let idx = j * l / count;
        let (beta, gamma, sigma2, tau2) = posterior.draw(idx);
        let mut rng = seeded_rng(seed, 16 + j as u64);
        predictive_draw(plan, &beta, &gamma, sigma2, tau2, &mut rng)
    });
    let mut draws = DMatrix::zeros(count, n_out);
    for (j, row) in rows.into_iter().enumerate() {
        let row = row?;
        draws.row_mut(j).copy_from(&row.transpose());
    }
    Ok(PredictiveDraws {
        draws,
        sketch_id: posterior.sketch_id,
        n_star: plan.n_star(),
        s_star: plan.s_star(),
        mode: plan.mode(),
    })
}
