//! MCMC for one sketched posterior: exact Gibbs draws for the coefficient
//! block `(beta, gamma)` and Metropolis-Hastings on `log sigma2`, `log tau2`,
//! targeting the tempered likelihood
//!
//! ```text
//! prod_s N(y_{s,Phi} | X_Phi beta + (Phi 1) z_s^T gamma,
//!          sigma2 Phi K Phi^T + tau2 I)^power
//! ```
//!
//! times IG priors on the variances and a N(0, I) prior on the coefficients
//! (the prior is not tempered; only the likelihood carries the exponent).
//!
//! `Phi K(theta) Phi^T` is computed once per chain. The chain works in its
//! eigenbasis, where `sigma2 M + tau2 I` is diagonal for every variance pair,
//! so each likelihood evaluation after the per-iteration residual pass costs
//! O(m) and the whole chain is O(m^3 + n_iter (mS + m r^2)).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

use crate::binfmt;
use crate::error::{Error, Result};
use crate::linalg::{sample_gaussian_from_precision, PsdEigen};
use crate::rng::seeded_rng;
use crate::sketch::SketchedData;

const LN_2PI: f64 = 1.8378770664093453;
const POSTERIOR_MAGIC: &[u8; 8] = b"GPSKPOST";
const POSTERIOR_VERSION: u64 = 1;

/// Inverse-gamma shapes/rates for the variances; the coefficient prior is
/// fixed at N(0, I).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Priors {
    pub a_tau: f64,
    pub b_tau: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
}

impl Default for Priors {
    fn default() -> Self {
        // weakly informative, prior mean b/(a-1) = 1
        Priors {
            a_tau: 2.0,
            b_tau: 1.0,
            a_sigma: 2.0,
            b_sigma: 1.0,
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a_tau", self.a_tau),
            ("b_tau", self.b_tau),
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "prior hyperparameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub proposal_sd_log_sigma2: f64,
    pub proposal_sd_log_tau2: f64,
    /// Initial values; `None` uses `var(sketched responses) / 2`.
    pub init_sigma2: Option<f64>,
    pub init_tau2: Option<f64>,
    /// Robbins-Monro adaptation of the proposal scales during burn-in,
    /// targeting 0.35 acceptance. The kernel is fixed after burn-in.
    pub adapt_burnin: bool,
    /// Keeps the variances at their initial values (Gibbs-only chain).
    pub fix_variances: bool,
    /// Ablation: drop sigma2 from the covariance used in the coefficient
    /// Gibbs step (the likelihood itself always includes it).
    pub omit_sigma2_in_gibbs: bool,
    pub chain_seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_iter: 5000,
            n_burn: 1000,
            thin: 4,
            proposal_sd_log_sigma2: 0.15,
            proposal_sd_log_tau2: 0.15,
            init_sigma2: None,
            init_tau2: None,
            adapt_burnin: true,
            fix_variances: false,
            omit_sigma2_in_gibbs: false,
            chain_seed: 0,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burn >= self.n_iter {
            return Err(Error::InvalidArgument(format!(
                "n_burn = {} must be < n_iter = {}",
                self.n_burn, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidArgument("thin must be >= 1".into()));
        }
        if !(self.proposal_sd_log_sigma2 > 0.0) || !(self.proposal_sd_log_tau2 > 0.0) {
            return Err(Error::InvalidArgument("proposal sds must be > 0".into()));
        }
        for v in [self.init_sigma2, self.init_tau2].into_iter().flatten() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "initial variances must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Retained draw count.
    pub fn retained(&self) -> usize {
        (self.n_iter - self.n_burn).div_ceil(self.thin)
    }
}

/// Post-burn-in draws of `(beta, gamma, sigma2, tau2)` for one sketch.
/// Columns are ordered `beta (q), gamma (p), sigma2, tau2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchedPosterior {
    pub sketch_id: usize,
    pub theta: f64,
    pub power: f64,
    pub q: usize,
    pub p: usize,
    pub draws: DMatrix<f64>,
    pub accept_sigma2: f64,
    pub accept_tau2: f64,
    pub chain_seed: u64,
}

impl SketchedPosterior {
    pub fn len(&self) -> usize {
        self.draws.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.nrows() == 0
    }

    pub fn beta(&self, i: usize) -> DVector<f64> {
        self.draws.column(i).into_owned()
    }

    pub fn gamma(&self, i: usize) -> DVector<f64> {
        self.draws.column(self.q + i).into_owned()
    }

    pub fn sigma2(&self) -> DVector<f64> {
        self.draws.column(self.q + self.p).into_owned()
    }

    pub fn tau2(&self) -> DVector<f64> {
        self.draws.column(self.q + self.p + 1).into_owned()
    }

    /// One parameter draw as `(beta, gamma, sigma2, tau2)`.
    pub fn draw(&self, l: usize) -> (DVector<f64>, DVector<f64>, f64, f64) {
        let row = self.draws.row(l);
        let beta = DVector::from_fn(self.q, |j, _| row[j]);
        let gamma = DVector::from_fn(self.p, |j, _| row[self.q + j]);
        (beta, gamma, row[self.q + self.p], row[self.q + self.p + 1])
    }
}

/// Tempered log-likelihood of one parameter point, one `m x m` Cholesky per
/// call. `phi_k_phi_t` is `Phi K(theta) Phi^T`, computed once per chain.
pub fn log_sketched_likelihood(
    sk: &SketchedData,
    phi_k_phi_t: &DMatrix<f64>,
    global_attrs: &DMatrix<f64>,
    sigma2: f64,
    tau2: f64,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<f64> {
    let m = sk.m();
    let s_count = sk.s();
    if phi_k_phi_t.nrows() != m || phi_k_phi_t.ncols() != m {
        return Err(Error::Dimension("phi_k_phi_t must be m x m".into()));
    }
    if global_attrs.nrows() != s_count {
        return Err(Error::Dimension(
            "global_attrs rows must match sketched simulations".into(),
        ));
    }
    let mut cov = phi_k_phi_t * sigma2;
    for i in 0..m {
        cov[(i, i)] += tau2;
    }
    let chol = match cov.clone().cholesky() {
        Some(c) => c,
        None => {
            for i in 0..m {
                cov[(i, i)] += 1e-10;
            }
            cov.cholesky()
                .ok_or(Error::LikelihoodCholesky { sigma2, tau2 })?
        }
    };
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let xb = &sk.x_sk * beta;
    let mut total = 0.0;
    for s in 0..s_count {
        let zg = global_attrs.row(s).transpose().dot(gamma);
        let resid = sk.y_sk.column(s) - &xb - &sk.ones_sk * zg;
        let w = chol
            .l()
            .solve_lower_triangular(&resid)
            .expect("Cholesky factor is nonsingular");
        total += -0.5 * (m as f64 * LN_2PI + logdet + w.norm_squared());
    }
    Ok(sk.power * total)
}

/// Per-chain precomputed state: the sketched data rotated into the
/// eigenbasis of `Phi K Phi^T`.
pub struct ChainWorkspace {
    m: usize,
    s_count: usize,
    q: usize,
    p: usize,
    power: f64,
    lambda: DVector<f64>,
    y_rot: DMatrix<f64>,
    x_rot: DMatrix<f64>,
    ones_rot: DVector<f64>,
    global_attrs: DMatrix<f64>,
    z_sum: DVector<f64>,
    z_gram: DMatrix<f64>,
    y_rot_sum: DVector<f64>,
    omit_sigma2_in_gibbs: bool,
}

impl ChainWorkspace {
    pub fn new(
        sk: &SketchedData,
        phi_k_phi_t: &DMatrix<f64>,
        global_attrs: &DMatrix<f64>,
        omit_sigma2_in_gibbs: bool,
    ) -> Result<Self> {
        let m = sk.m();
        let s_count = sk.s();
        let q = sk.q();
        let p = global_attrs.ncols();
        if phi_k_phi_t.nrows() != m || phi_k_phi_t.ncols() != m {
            return Err(Error::Dimension("phi_k_phi_t must be m x m".into()));
        }
        if global_attrs.nrows() != s_count {
            return Err(Error::Dimension(format!(
                "global_attrs has {} rows, sketched data has S = {}",
                global_attrs.nrows(),
                s_count
            )));
        }
        if !(sk.power >= 0.0) || !sk.power.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "power must be finite and nonnegative, got {}",
                sk.power
            )));
        }
        let eig = PsdEigen::new(phi_k_phi_t);
        let y_rot = eig.rotate(&sk.y_sk);
        let x_rot = eig.rotate(&sk.x_sk);
        let ones_rot = eig.rotate_vec(&sk.ones_sk);
        let mut z_sum = DVector::zeros(p);
        let mut z_gram = DMatrix::zeros(p, p);
        for s in 0..s_count {
            let z = global_attrs.row(s).transpose();
            z_sum += &z;
            z_gram += &z * z.transpose();
        }
        let mut y_rot_sum = DVector::zeros(m);
        for s in 0..s_count {
            y_rot_sum += y_rot.column(s);
        }
        Ok(ChainWorkspace {
            m,
            s_count,
            q,
            p,
            power: sk.power,
            lambda: eig.values,
            y_rot,
            x_rot,
            ones_rot,
            global_attrs: global_attrs.clone(),
            z_sum,
            z_gram,
            y_rot_sum,
            omit_sigma2_in_gibbs,
        })
    }

    pub fn coef_len(&self) -> usize {
        self.q + self.p
    }

    fn inv_diag(&self, sigma2: f64, tau2: f64) -> DVector<f64> {
        let scale = if self.omit_sigma2_in_gibbs {
            1.0
        } else {
            sigma2
        };
        self.lambda.map(|l| 1.0 / (scale * l + tau2))
    }

    /// Gaussian conditional moments of `(beta, gamma)` given the variances:
    /// precision `power * sum_s A_s^T Sigma^{-1} A_s + I`.
    pub fn coefficient_posterior_moments(
        &self,
        sigma2: f64,
        tau2: f64,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let (precision, rhs) = self.coefficient_system(sigma2, tau2);
        let chol = precision
            .clone()
            .cholesky()
            .expect("coefficient precision is positive definite");
        let mean = chol.solve(&rhs);
        let cov = chol.inverse();
        (mean, cov)
    }

    fn coefficient_system(&self, sigma2: f64, tau2: f64) -> (DMatrix<f64>, DVector<f64>) {
        let r = self.coef_len();
        let mut precision = DMatrix::identity(r, r);
        let mut rhs = DVector::zeros(r);
        if self.s_count == 0 || r == 0 {
            return (precision, rhs);
        }
        let d = self.inv_diag(sigma2, tau2);
        let q = self.q;
        let p = self.p;
        let dx = {
            let mut dx = self.x_rot.clone();
            for i in 0..self.m {
                let di = d[i];
                for j in 0..q {
                    dx[(i, j)] *= di;
                }
            }
            dx
        };
        let xtdx = self.x_rot.transpose() * &dx;
        let d_ones = d.component_mul(&self.ones_rot);
        let xtdo = self.x_rot.transpose() * &d_ones;
        let otdo = self.ones_rot.dot(&d_ones);

        let w = self.power;
        for a in 0..q {
            for b in 0..q {
                precision[(a, b)] += w * self.s_count as f64 * xtdx[(a, b)];
            }
        }
        for a in 0..q {
            for b in 0..p {
                let v = w * xtdo[a] * self.z_sum[b];
                precision[(a, q + b)] += v;
                precision[(q + b, a)] += v;
            }
        }
        for a in 0..p {
            for b in 0..p {
                precision[(q + a, q + b)] += w * otdo * self.z_gram[(a, b)];
            }
        }
        // rhs: beta block through sum_s y~_s, gamma block per-s projections
        let d_ysum = d.component_mul(&self.y_rot_sum);
        let xtdy = self.x_rot.transpose() * &d_ysum;
        for a in 0..q {
            rhs[a] += w * xtdy[a];
        }
        for s in 0..self.s_count {
            let t_s = d_ones.dot(&self.y_rot.column(s).into_owned());
            for b in 0..p {
                rhs[q + b] += w * self.global_attrs[(s, b)] * t_s;
            }
        }
        (precision, rhs)
    }

    /// Exact draw from the coefficient conditional.
    pub fn gibbs_coefficients(
        &self,
        sigma2: f64,
        tau2: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<DVector<f64>> {
        let r = self.coef_len();
        if r == 0 {
            return Ok(DVector::zeros(0));
        }
        let (precision, rhs) = self.coefficient_system(sigma2, tau2);
        let noise = DVector::from_fn(r, |_, _| rng.sample(StandardNormal));
        sample_gaussian_from_precision(precision, &rhs, &noise, "coefficient conditional")
    }

    /// Per-eigendirection squared residual sums for the current
    /// coefficients; makes subsequent variance evaluations O(m).
    fn residual_row_squares(&self, coef: &DVector<f64>) -> DVector<f64> {
        let beta = coef.rows(0, self.q).into_owned();
        let gamma = coef.rows(self.q, self.p).into_owned();
        let xb = &self.x_rot * &beta;
        let mut rowsq = DVector::zeros(self.m);
        for s in 0..self.s_count {
            let zg = self.global_attrs.row(s).transpose().dot(&gamma);
            for i in 0..self.m {
                let r = self.y_rot[(i, s)] - xb[i] - self.ones_rot[i] * zg;
                rowsq[i] += r * r;
            }
        }
        rowsq
    }

    fn log_tempered_likelihood_rowsq(&self, rowsq: &DVector<f64>, sigma2: f64, tau2: f64) -> f64 {
        let mut logdet = 0.0;
        let mut quad = 0.0;
        for i in 0..self.m {
            let di = sigma2 * self.lambda[i] + tau2;
            logdet += di.ln();
            quad += rowsq[i] / di;
        }
        -0.5 * self.power * (self.s_count as f64 * (self.m as f64 * LN_2PI + logdet) + quad)
    }

    /// Tempered log-likelihood at a full parameter point (fast path used by
    /// the chain; equals [`log_sketched_likelihood`] on the same inputs).
    pub fn log_tempered_likelihood(
        &self,
        sigma2: f64,
        tau2: f64,
        beta: &DVector<f64>,
        gamma: &DVector<f64>,
    ) -> f64 {
        let mut coef = DVector::zeros(self.coef_len());
        coef.rows_mut(0, self.q).copy_from(beta);
        coef.rows_mut(self.q, self.p).copy_from(gamma);
        let rowsq = self.residual_row_squares(&coef);
        self.log_tempered_likelihood_rowsq(&rowsq, sigma2, tau2)
    }
}

fn ln_inv_gamma(x: f64, a: f64, b: f64) -> f64 {
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

/// One random-walk step on a log variance. Returns (new value, accepted,
/// acceptance probability, log-likelihood at the new value).
fn mh_log_variance_step<F>(
    current: f64,
    proposal_sd: f64,
    a: f64,
    b: f64,
    log_lik: F,
    current_ll: f64,
    rng: &mut ChaCha12Rng,
) -> (f64, bool, f64, f64)
where
    F: Fn(f64) -> f64,
{
    let step: f64 = rng.sample::<f64, _>(StandardNormal) * proposal_sd;
    let proposed = (current.ln() + step).exp();
    let proposed_ll = log_lik(proposed);
    // log-scale random walk: IG prior plus the log|Jacobian| = ln x
    let log_alpha = (proposed_ll + ln_inv_gamma(proposed, a, b) + proposed.ln())
        - (current_ll + ln_inv_gamma(current, a, b) + current.ln());
    let alpha = log_alpha.min(0.0).exp();
    let u: f64 = rng.random();
    if u.ln() < log_alpha {
        (proposed, true, alpha, proposed_ll)
    } else {
        (current, false, alpha, current_ll)
    }
}

/// Runs the full chain: Gibbs coefficients, then MH on sigma2 and tau2, per
/// iteration; burn-in discarded, post-burn-in draws thinned.
pub fn run_chain(
    sk: &SketchedData,
    phi_k_phi_t: &DMatrix<f64>,
    global_attrs: &DMatrix<f64>,
    priors: Priors,
    config: &ChainConfig,
    sketch_id: usize,
    theta: f64,
) -> Result<SketchedPosterior> {
    config.validate()?;
    priors.validate()?;
    let ws = ChainWorkspace::new(sk, phi_k_phi_t, global_attrs, config.omit_sigma2_in_gibbs)?;
    let mut rng = seeded_rng(config.chain_seed, 0);

    // scale-aware deterministic initialization
    let default_init = {
        let len = sk.y_sk.len();
        if len == 0 {
            1.0
        } else {
            let mean = sk.y_sk.iter().sum::<f64>() / len as f64;
            let var = sk.y_sk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            (var / 2.0).max(1e-8)
        }
    };
    let mut sigma2 = config.init_sigma2.unwrap_or(default_init);
    let mut tau2 = config.init_tau2.unwrap_or(default_init);

    let r = ws.coef_len();
    let retained = config.retained();
    let mut draws = DMatrix::zeros(retained, r + 2);
    let mut ln_sd_sigma = config.proposal_sd_log_sigma2.ln();
    let mut ln_sd_tau = config.proposal_sd_log_tau2.ln();
    let mut acc_sigma = 0usize;
    let mut acc_tau = 0usize;
    let mut post_iters = 0usize;
    let mut out_row = 0usize;

    for iter in 0..config.n_iter {
        let coef = ws
            .gibbs_coefficients(sigma2, tau2, &mut rng)
            .map_err(|e| Error::ChainAborted {
                sketch_id,
                iteration: iter,
                source: Box::new(e),
            })?;

        if !config.fix_variances {
            let rowsq = ws.residual_row_squares(&coef);
            let mut current_ll = ws.log_tempered_likelihood_rowsq(&rowsq, sigma2, tau2);

            let (new_sigma2, accepted_s, alpha_s, ll_s) = mh_log_variance_step(
                sigma2,
                ln_sd_sigma.exp(),
                priors.a_sigma,
                priors.b_sigma,
                |s2| ws.log_tempered_likelihood_rowsq(&rowsq, s2, tau2),
                current_ll,
                &mut rng,
            );
            sigma2 = new_sigma2;
            current_ll = ll_s;

            let (new_tau2, accepted_t, alpha_t, _) = mh_log_variance_step(
                tau2,
                ln_sd_tau.exp(),
                priors.a_tau,
                priors.b_tau,
                |t2| ws.log_tempered_likelihood_rowsq(&rowsq, sigma2, t2),
                current_ll,
                &mut rng,
            );
            tau2 = new_tau2;

            if iter < config.n_burn {
                if config.adapt_burnin {
                    let gain = 1.0 / (1.0 + iter as f64).powf(0.6);
                    ln_sd_sigma = (ln_sd_sigma + gain * (alpha_s - 0.35)).clamp(-10.0, 3.0);
                    ln_sd_tau = (ln_sd_tau + gain * (alpha_t - 0.35)).clamp(-10.0, 3.0);
                }
            } else {
                post_iters += 1;
                acc_sigma += accepted_s as usize;
                acc_tau += accepted_t as usize;
            }
        } else if iter >= config.n_burn {
            post_iters += 1;
        }

        if iter >= config.n_burn && (iter - config.n_burn) % config.thin == 0 {
            for j in 0..r {
                draws[(out_row, j)] = coef[j];
            }
            draws[(out_row, r)] = sigma2;
            draws[(out_row, r + 1)] = tau2;
            out_row += 1;
        }
    }
    debug_assert_eq!(out_row, retained);

    let denom = post_iters.max(1) as f64;
    Ok(SketchedPosterior {
        sketch_id,
        theta,
        power: sk.power,
        q: ws.q,
        p: ws.p,
        draws,
        accept_sigma2: if config.fix_variances {
            0.0
        } else {
            acc_sigma as f64 / denom
        },
        accept_tau2: if config.fix_variances {
            0.0
        } else {
            acc_tau as f64 / denom
        },
        chain_seed: config.chain_seed,
    })
}

/// A posterior file: draws plus everything needed to reproduce them.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorFile {
    pub posterior: SketchedPosterior,
    pub priors: Priors,
    pub config: ChainConfig,
    pub sketch_seed: u64,
    pub config_hash: [u8; 32],
}

pub fn save_posterior(path: &Path, file: &PosteriorFile) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let post = &file.posterior;
    let cfg = &file.config;
    binfmt::write_u64(&mut w, path, binfmt::magic(POSTERIOR_MAGIC))?;
    binfmt::write_u64(&mut w, path, POSTERIOR_VERSION)?;
    for v in [
        post.sketch_id,
        post.len(),
        post.q,
        post.p,
        cfg.n_iter,
        cfg.n_burn,
        cfg.thin,
    ] {
        binfmt::write_u64(&mut w, path, v as u64)?;
    }
    for v in [
        post.theta,
        post.power,
        post.accept_sigma2,
        post.accept_tau2,
        file.priors.a_tau,
        file.priors.b_tau,
        file.priors.a_sigma,
        file.priors.b_sigma,
        cfg.proposal_sd_log_sigma2,
        cfg.proposal_sd_log_tau2,
        cfg.init_sigma2.unwrap_or(f64::NAN),
        cfg.init_tau2.unwrap_or(f64::NAN),
    ] {
        binfmt::write_f64(&mut w, path, v)?;
    }
    let flags = cfg.adapt_burnin as u64
        | (cfg.fix_variances as u64) << 1
        | (cfg.omit_sigma2_in_gibbs as u64) << 2;
    binfmt::write_u64(&mut w, path, flags)?;
    binfmt::write_u64(&mut w, path, post.chain_seed)?;
    binfmt::write_u64(&mut w, path, file.sketch_seed)?;
    w.write_all(&file.config_hash)
        .map_err(|e| Error::io(path, e))?;
    binfmt::write_matrix(&mut w, path, &post.draws)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_posterior(path: &Path) -> Result<PosteriorFile> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    binfmt::expect_magic(&mut r, path, binfmt::magic(POSTERIOR_MAGIC), "posterior")?;
    let version = binfmt::read_u64(&mut r, path)?;
    if version != POSTERIOR_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let sketch_id = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "sketch_id")?;
    let l = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "L")?;
    let q = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "q")?;
    let p = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "p")?;
    let n_iter = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "n_iter")?;
    let n_burn = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "n_burn")?;
    let thin = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "thin")?;
    let mut fs = [0.0; 12];
    for v in fs.iter_mut() {
        *v = binfmt::read_f64(&mut r, path)?;
    }
    let flags = binfmt::read_u64(&mut r, path)?;
    let chain_seed = binfmt::read_u64(&mut r, path)?;
    let sketch_seed = binfmt::read_u64(&mut r, path)?;
    let mut config_hash = [0u8; 32];
    std::io::Read::read_exact(&mut r, &mut config_hash).map_err(|e| Error::io(path, e))?;
    let draws = binfmt::read_matrix(&mut r, path, l, q + p + 2)?;
    Ok(PosteriorFile {
        posterior: SketchedPosterior {
            sketch_id,
            theta: fs[0],
            power: fs[1],
            q,
            p,
            draws,
            accept_sigma2: fs[2],
            accept_tau2: fs[3],
            chain_seed,
        },
        priors: Priors {
            a_tau: fs[4],
            b_tau: fs[5],
            a_sigma: fs[6],
            b_sigma: fs[7],
        },
        config: ChainConfig {
            n_iter,
            n_burn,
            thin,
            proposal_sd_log_sigma2: fs[8],
            proposal_sd_log_tau2: fs[9],
            init_sigma2: if fs[10].is_nan() { None } else { Some(fs[10]) },
            init_tau2: if fs[11].is_nan() { None } else { Some(fs[11]) },
            adapt_burnin: flags & 1 != 0,
            fix_variances: flags & 2 != 0,
            omit_sigma2_in_gibbs: flags & 4 != 0,
            chain_seed,
        },
        sketch_seed,
        config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FunctionalDataset;
    use crate::kernels::{build_full_gp, CovarianceOperator, DENSE_CAP_DEFAULT};
    use crate::sketch::{apply_sketch, SketchKind, SketchMatrix, SketchRows};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;

    fn identity_sketch(n: usize) -> SketchMatrix {
        SketchMatrix {
            kind: SketchKind::SelectionSubdomain { grid: vec![1, 1] },
            m: n,
            n,
            seed: 0,
            rows: SketchRows::Selection((0..n).collect()),
        }
    }

    fn gp_dataset(n: usize, s: usize, seed: u64) -> (FunctionalDataset, DMatrix<f64>) {
        let mut rng = seeded_rng(seed, 0);
        let locations = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 10.0);
        let op = build_full_gp(&locations, 3.0, DENSE_CAP_DEFAULT).unwrap();
        let phi = identity_sketch(n);
        let k = op.quad_form(&phi.to_dense());
        let chol_k = k.clone().cholesky().unwrap();
        let (sigma2_0, tau2_0): (f64, f64) = (2.0, 0.2);
        let beta0 = DVector::from_vec(vec![2.0, -1.0]);
        let gamma0 = DVector::from_vec(vec![5.0]);
        let local_attrs = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let global_attrs = DMatrix::from_fn(s, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut responses = DMatrix::zeros(n, s);
        for sim in 0..s {
            let w = chol_k.l()
                * DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
                * sigma2_0.sqrt();
            let noise =
                DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)) * tau2_0.sqrt();
            let mean = &local_attrs * &beta0
                + DVector::from_element(n, global_attrs[(sim, 0)] * gamma0[0]);
            responses.set_column(sim, &(mean + w + noise));
        }
        let ds = FunctionalDataset::new(locations, local_attrs, global_attrs, responses).unwrap();
        (ds, k)
    }

    #[test]
    fn scalar_likelihood_closed_form() {
        let sk = SketchedData {
            y_sk: DMatrix::from_element(1, 1, 1.3),
            x_sk: DMatrix::from_element(1, 1, 0.7),
            ones_sk: DVector::from_element(1, 0.5),
            power: 4.0,
        };
        let quad = DMatrix::from_element(1, 1, 1.0);
        let z = DMatrix::from_element(1, 1, 2.0);
        let beta = DVector::from_element(1, 0.4);
        let gamma = DVector::from_element(1, -0.3);
        let (sigma2, tau2) = (1.5, 0.3);
        let got = log_sketched_likelihood(&sk, &quad, &z, sigma2, tau2, &beta, &gamma).unwrap();
        let mean = 0.7 * 0.4 + 0.5 * (2.0 * -0.3);
        let var = sigma2 + tau2;
        let expected = 4.0 * (-0.5 * (LN_2PI + var.ln() + (1.3 - mean) * (1.3 - mean) / var));
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn identity_sketch_matches_full_data_likelihood() {
        let n = 60;
        let (ds, k) = gp_dataset(n, 2, 10);
        let phi = identity_sketch(n);
        let sk = apply_sketch(&phi, &ds).unwrap();
        assert_eq!(sk.power, 1.0);
        let beta = DVector::from_vec(vec![1.8, -0.9]);
        let gamma = DVector::from_vec(vec![4.7]);
        let (sigma2, tau2) = (1.7, 0.25);
        let got = log_sketched_likelihood(&sk, &k, &ds.global_attrs, sigma2, tau2, &beta, &gamma)
            .unwrap();
        // dense oracle straight from the hierarchical model
        let mut cov = &k * sigma2;
        for i in 0..n {
            cov[(i, i)] += tau2;
        }
        let chol = cov.cholesky().unwrap();
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mut expected = 0.0;
        for s in 0..ds.s() {
            let mean = &ds.local_attrs * &beta
                + DVector::from_element(n, ds.global_attrs[(s, 0)] * gamma[0]);
            let resid = ds.responses.column(s) - mean;
            let w = chol.l().solve_lower_triangular(&resid).unwrap();
            expected += -0.5 * (n as f64 * LN_2PI + logdet + w.norm_squared());
        }
        assert_relative_eq!(got, expected, epsilon = 1e-8);
    }

    #[test]
    fn likelihood_linear_in_power() {
        let (ds, k) = gp_dataset(30, 2, 11);
        let phi = identity_sketch(30);
        let mut sk = apply_sketch(&phi, &ds).unwrap();
        let beta = DVector::from_vec(vec![0.5, 0.1]);
        let gamma = DVector::from_vec(vec![1.0]);
        let base =
            log_sketched_likelihood(&sk, &k, &ds.global_attrs, 1.0, 0.5, &beta, &gamma).unwrap();
        sk.power = 2.0;
        let doubled =
            log_sketched_likelihood(&sk, &k, &ds.global_attrs, 1.0, 0.5, &beta, &gamma).unwrap();
        assert_relative_eq!(doubled, 2.0 * base, epsilon = 1e-12);
    }

    #[test]
    fn fast_path_matches_public_likelihood() {
        let (ds, k) = gp_dataset(40, 3, 12);
        let phi = identity_sketch(40);
        let sk = apply_sketch(&phi, &ds).unwrap();
        let ws = ChainWorkspace::new(&sk, &k, &ds.global_attrs, false).unwrap();
        let beta = DVector::from_vec(vec![1.1, -0.4]);
        let gamma = DVector::from_vec(vec![2.2]);
        for (s2, t2) in [(1.0, 0.5), (2.3, 0.1), (0.2, 0.9)] {
            let fast = ws.log_tempered_likelihood(s2, t2, &beta, &gamma);
            let slow =
                log_sketched_likelihood(&sk, &k, &ds.global_attrs, s2, t2, &beta, &gamma).unwrap();
            assert_relative_eq!(fast, slow, epsilon = 1e-10);
        }
    }

    #[test]
    fn gibbs_moments_match_dense_conditional() {
        // power = 1, identity sketch: the conditional must equal the
        // full-data Gaussian conditional computed densely
        let n = 50;
        let (ds, k) = gp_dataset(n, 2, 13);
        let phi = identity_sketch(n);
        let sk = apply_sketch(&phi, &ds).unwrap();
        let ws = ChainWorkspace::new(&sk, &k, &ds.global_attrs, false).unwrap();
        let (sigma2, tau2) = (2.0, 0.2);
        let (mean, cov) = ws.coefficient_posterior_moments(sigma2, tau2);

        let mut sig = &k * sigma2;
        for i in 0..n {
            sig[(i, i)] += tau2;
        }
        let sig_inv = sig.cholesky().unwrap().inverse();
        let r = 3;
        let mut precision = DMatrix::identity(r, r);
        let mut rhs = DVector::zeros(r);
        for s in 0..ds.s() {
            let mut a = DMatrix::zeros(n, r);
            a.columns_mut(0, 2).copy_from(&ds.local_attrs);
            a.column_mut(2)
                .copy_from(&DVector::from_element(n, ds.global_attrs[(s, 0)]));
            precision += a.transpose() * &sig_inv * &a;
            rhs += a.transpose() * &sig_inv * ds.responses.column(s);
        }
        let chol = precision.cholesky().unwrap();
        let mean_oracle = chol.solve(&rhs);
        let cov_oracle = chol.inverse();
        assert_relative_eq!(mean, mean_oracle, epsilon = 1e-8);
        assert_relative_eq!(cov, cov_oracle, epsilon = 1e-8);
    }

    #[test]
    fn gibbs_huge_information_approaches_gls() {
        let (ds, k) = gp_dataset(40, 2, 14);
        let phi = identity_sketch(40);
        let mut sk = apply_sketch(&phi, &ds).unwrap();
        sk.power = 1e10;
        let ws = ChainWorkspace::new(&sk, &k, &ds.global_attrs, false).unwrap();
        let (sigma2, tau2) = (2.0, 0.2);
        let (mean, _) = ws.coefficient_posterior_moments(sigma2, tau2);
        // GLS oracle without the prior
        let n = 40;
        let mut sig = &k * sigma2;
        for i in 0..n {
            sig[(i, i)] += tau2;
        }
        let sig_inv = sig.cholesky().unwrap().inverse();
        let r = 3;
        let mut info = DMatrix::zeros(r, r);
        let mut rhs = DVector::zeros(r);
        for s in 0..ds.s() {
            let mut a = DMatrix::zeros(n, r);
            a.columns_mut(0, 2).copy_from(&ds.local_attrs);
            a.column_mut(2)
                .copy_from(&DVector::from_element(n, ds.global_attrs[(s, 0)]));
            info += a.transpose() * &sig_inv * &a;
            rhs += a.transpose() * &sig_inv * ds.responses.column(s);
        }
        let gls = info.cholesky().unwrap().solve(&rhs);
        assert_relative_eq!(mean, gls, epsilon = 1e-8);
    }

    #[test]
    fn gibbs_without_simulations_draws_from_prior() {
        let sk = SketchedData {
            y_sk: DMatrix::zeros(5, 0),
            x_sk: DMatrix::from_fn(5, 2, |i, j| (i + j) as f64 * 0.1),
            ones_sk: DVector::from_element(5, 1.0),
            power: 1.0,
        };
        let quad = DMatrix::identity(5, 5);
        let z = DMatrix::zeros(0, 1);
        let ws = ChainWorkspace::new(&sk, &quad, &z, false).unwrap();
        let (mean, cov) = ws.coefficient_posterior_moments(1.0, 1.0);
        assert_eq!(mean, DVector::zeros(3));
        assert_eq!(cov, DMatrix::identity(3, 3));
        let mut rng = seeded_rng(4, 0);
        let mut sum = DVector::zeros(3);
        let mut sumsq = DVector::zeros(3);
        let n_draws = 4000;
        for _ in 0..n_draws {
            let d = ws.gibbs_coefficients(1.0, 1.0, &mut rng).unwrap();
            sum += &d;
            sumsq += d.component_mul(&d);
        }
        for j in 0..3 {
            let m = sum[j] / n_draws as f64;
            let v = sumsq[j] / n_draws as f64 - m * m;
            assert!(m.abs() < 0.06, "prior mean {m}");
            assert!((v - 1.0).abs() < 0.1, "prior var {v}");
        }
    }

    #[test]
    fn gibbs_draw_deterministic_given_seed() {
        let (ds, k) = gp_dataset(20, 2, 15);
        let phi = identity_sketch(20);
        let sk = apply_sketch(&phi, &ds).unwrap();
        let ws = ChainWorkspace::new(&sk, &k, &ds.global_attrs, false).unwrap();
        let a = ws
            .gibbs_coefficients(1.0, 0.3, &mut seeded_rng(7, 0))
            .unwrap();
        let b = ws
            .gibbs_coefficients(1.0, 0.3, &mut seeded_rng(7, 0))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mh_with_constant_likelihood_samples_the_prior() {
        // power = 0 turns the tempered likelihood off entirely
        let sk = SketchedData {
            y_sk: DMatrix::from_element(2, 1, 0.5),
            x_sk: DMatrix::zeros(2, 0),
            ones_sk: DVector::from_element(2, 1.0),
            power: 0.0,
        };
        let quad = DMatrix::identity(2, 2);
        let z = DMatrix::zeros(1, 0);
        let priors = Priors {
            a_tau: 2.5,
            b_tau: 1.5,
            a_sigma: 3.0,
            b_sigma: 2.0,
        };
        let config = ChainConfig {
            n_iter: 52_000,
            n_burn: 2_000,
            thin: 1,
            chain_seed: 21,
            ..ChainConfig::default()
        };
        let post = run_chain(&sk, &quad, &z, priors, &config, 0, 1.0).unwrap();
        let inv_sigma: f64 =
            post.sigma2().iter().map(|v| 1.0 / v).sum::<f64>() / post.len() as f64;
        let inv_tau: f64 = post.tau2().iter().map(|v| 1.0 / v).sum::<f64>() / post.len() as f64;
        // E[1/x] under IG(a, b) is a/b
        assert!(
            (inv_sigma - 1.5).abs() / 1.5 < 0.05,
            "1/sigma2 mean {inv_sigma}, want 1.5"
        );
        assert!(
            (inv_tau - 2.5 / 1.5).abs() / (2.5 / 1.5) < 0.05,
            "1/tau2 mean {inv_tau}"
        );
    }

    #[test]
    fn mh_variance_marginal_matches_grid_posterior() {
        // one-datum problem with no coefficients: the grid over
        // (log sigma2, log tau2) is an independent quadrature oracle
        let sk = SketchedData {
            y_sk: DMatrix::from_element(1, 1, 1.1),
            x_sk: DMatrix::zeros(1, 0),
            ones_sk: DVector::from_element(1, 1.0),
            power: 3.0,
        };
        let quad = DMatrix::from_element(1, 1, 1.0);
        let z = DMatrix::zeros(1, 0);
        let priors = Priors::default();
        let config = ChainConfig {
            n_iter: 220_000,
            n_burn: 20_000,
            thin: 1,
            chain_seed: 33,
            ..ChainConfig::default()
        };
        let post = run_chain(&sk, &quad, &z, priors, &config, 0, 1.0).unwrap();

        // quadrature over a wide log grid
        let grid_n = 400;
        let lo = -9.0;
        let hi = 5.0;
        let step = (hi - lo) / grid_n as f64;
        let mut joint = vec![vec![0.0; grid_n]; grid_n];
        let mut max_lp = f64::NEG_INFINITY;
        for (i, row) in joint.iter_mut().enumerate() {
            let ls = lo + (i as f64 + 0.5) * step;
            let s2: f64 = ls.exp();
            for (j, cell) in row.iter_mut().enumerate() {
                let lt = lo + (j as f64 + 0.5) * step;
                let t2: f64 = lt.exp();
                let var = s2 + t2;
                let ll = -0.5 * (LN_2PI + var.ln() + 1.1 * 1.1 / var) * 3.0;
                let lp = ll
                    + ln_inv_gamma(s2, priors.a_sigma, priors.b_sigma)
                    + ln_inv_gamma(t2, priors.a_tau, priors.b_tau)
                    + ls
                    + lt;
                *cell = lp;
                max_lp = max_lp.max(lp);
            }
        }
        let mut marginal = vec![0.0; grid_n];
        let mut total = 0.0;
        for i in 0..grid_n {
            for j in 0..grid_n {
                let w = (joint[i][j] - max_lp).exp();
                marginal[i] += w;
                total += w;
            }
        }
        for v in marginal.iter_mut() {
            *v /= total;
        }
        // histogram of the MCMC draws on the same bins
        let mut hist = vec![0.0; grid_n];
        for v in post.sigma2().iter() {
            let idx = (((v.ln() - lo) / step) as isize).clamp(0, grid_n as isize - 1) as usize;
            hist[idx] += 1.0;
        }
        for v in hist.iter_mut() {
            *v /= post.len() as f64;
        }
        let tv: f64 = marginal
            .iter()
            .zip(hist.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn tiny_proposal_sd_accepts_everything() {
        let (ds, k) = gp_dataset(20, 1, 16);
        let phi = identity_sketch(20);
        let sk = apply_sketch(&phi, &ds).unwrap();
        let config = ChainConfig {
            n_iter: 2000,
            n_burn: 200,
            thin: 1,
            proposal_sd_log_sigma2: 1e-9,
            proposal_sd_log_tau2: 1e-9,
            adapt_burnin: false,
            chain_seed: 3,
            ..ChainConfig::default()
        };
        let post =
            run_chain(&sk, &k, &ds.global_attrs, Priors::default(), &config, 0, 3.0).unwrap();
        assert!(post.accept_sigma2 > 0.99, "{}", post.accept_sigma2);
        assert!(post.accept_tau2 > 0.99, "{}", post.accept_tau2);
    }

    #[test]
    fn chain_reproducible_and_draws_positive() {
        let (ds, k) = gp_dataset(30, 2, 17);
        let phi = identity_sketch(30);
        let sk = apply_sketch(&phi, &ds).unwrap();
        let config = ChainConfig {
            n_iter: 800,
            n_burn: 200,
            thin: 2,
            chain_seed: 5,
            ..ChainConfig::default()
        };
        let a = run_chain(&sk, &k, &ds.global_attrs, Priors::default(), &config, 0, 3.0).unwrap();
        let b = run_chain(&sk, &k, &ds.global_attrs, Priors::default(), &config, 0, 3.0).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.len(), 300);
        assert!(a.sigma2().iter().all(|&v| v > 0.0));
        assert!(a.tau2().iter().all(|&v| v > 0.0));
        assert!(a.accept_sigma2 > 0.0 && a.accept_sigma2 < 1.0);
        assert!(a.accept_tau2 > 0.0 && a.accept_tau2 < 1.0);
    }

    #[test]
    fn gibbs_only_chain_matches_analytic_conditional() {
        // conjugate sub-case: variances fixed at truth
        let (ds, k) = gp_dataset(50, 2, 18);
        let phi = identity_sketch(50);
        let sk = apply_sketch(&phi, &ds).unwrap();
        let config = ChainConfig {
            n_iter: 5200,
            n_burn: 200,
            thin: 1,
            init_sigma2: Some(2.0),
            init_tau2: Some(0.2),
            fix_variances: true,
            chain_seed: 9,
            ..ChainConfig::default()
        };
        let post =
            run_chain(&sk, &k, &ds.global_attrs, Priors::default(), &config, 0, 3.0).unwrap();
        let ws = ChainWorkspace::new(&sk, &k, &ds.global_attrs, false).unwrap();
        let (mean, cov) = ws.coefficient_posterior_moments(2.0, 0.2);
        let l = post.len() as f64;
        for j in 0..3 {
            let emp: f64 = post.draws.column(j).sum() / l;
            let mcse = (cov[(j, j)] / l).sqrt();
            assert!(
                (emp - mean[j]).abs() < 3.0 * mcse,
                "coef {j}: {emp} vs {} (mcse {mcse})",
                mean[j]
            );
        }
    }

    #[test]
    fn posterior_file_round_trip() {
        let (ds, k) = gp_dataset(15, 1, 19);
        let phi = identity_sketch(15);
        let sk = apply_sketch(&phi, &ds).unwrap();
        let config = ChainConfig {
            n_iter: 100,
            n_burn: 20,
            thin: 2,
            chain_seed: 11,
            ..ChainConfig::default()
        };
        let post =
            run_chain(&sk, &k, &ds.global_attrs, Priors::default(), &config, 3, 2.5).unwrap();
        let file = PosteriorFile {
            posterior: post,
            priors: Priors::default(),
            config,
            sketch_seed: 77,
            config_hash: [9u8; 32],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("post.bin");
        save_posterior(&path, &file).unwrap();
        let back = load_posterior(&path).unwrap();
        assert_eq!(file, back);
    }

    #[test]
    fn ablation_flag_changes_gibbs_but_not_likelihood() {
        let (ds, k) = gp_dataset(25, 2, 20);
        let phi = identity_sketch(25);
        let sk = apply_sketch(&phi, &ds).unwrap();
        let ws_default =
            ChainWorkspace::new(&sk, &k, &ds.global_attrs, false).unwrap();
        let ws_ablate =
            ChainWorkspace::new(&sk, &k, &ds.global_attrs, true).unwrap();
        let (m1, _) = ws_default.coefficient_posterior_moments(2.0, 0.2);
        let (m2, _) = ws_ablate.coefficient_posterior_moments(2.0, 0.2);
        assert!((m1 - m2).norm() > 1e-8);
        let beta = DVector::from_vec(vec![1.0, 1.0]);
        let gamma = DVector::from_vec(vec![1.0]);
        assert_eq!(
            ws_default.log_tempered_likelihood(2.0, 0.2, &beta, &gamma),
            ws_ablate.log_tempered_likelihood(2.0, 0.2, &beta, &gamma)
        );
    }
}
