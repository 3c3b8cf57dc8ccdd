//! Synthetic data generators: the uniform-domain GP design used throughout
//! the test and acceptance suites, and a storm-surge-shaped variant with
//! elevation as the local attribute and five physically-ranged global
//! attributes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::FunctionalDataset;
use crate::error::{Error, Result};
use crate::kernels::{build_mpp, exp_kernel};
use crate::linalg::{chol_with_jitter, CHOL_JITTER};
use crate::rng::seeded_rng;

/// Design of one synthetic experiment: `S` training simulations observed at
/// `n` points, `S0` test simulations at `n0` disjoint points.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub n0: usize,
    pub s: usize,
    pub s0: usize,
    pub d: usize,
    pub p: usize,
    pub q: usize,
    pub gamma0: Vec<f64>,
    pub beta0: Vec<f64>,
    pub sigma2_0: f64,
    pub tau2_0: f64,
    pub theta0: f64,
    /// Axis-aligned box: (lower corner, upper corner).
    pub domain: (Vec<f64>, Vec<f64>),
    pub seed: u64,
    /// Largest `n + n0` simulated by exact dense Cholesky.
    pub dense_cap: usize,
    /// Knot count for the low-rank GP fallback above the cap; `None` means
    /// exceeding the cap is an error.
    pub fallback_knots: Option<usize>,
}

impl Default for SimConfig {
    /// Desk-scale version of the uniform-domain design: domain [0,10]^2,
    /// gamma = 5, beta = (2, -1), sigma2 = 2, tau2 = 0.2, theta = 3.
    fn default() -> Self {
        SimConfig {
            n: 2000,
            n0: 500,
            s: 10,
            s0: 5,
            d: 2,
            p: 1,
            q: 2,
            gamma0: vec![5.0],
            beta0: vec![2.0, -1.0],
            sigma2_0: 2.0,
            tau2_0: 0.2,
            theta0: 3.0,
            domain: (vec![0.0, 0.0], vec![10.0, 10.0]),
            seed: 0,
            dense_cap: 5000,
            fallback_knots: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n0 == 0 || self.s == 0 || self.s0 == 0 {
            return Err(Error::Config("all of n, n0, S, S0 must be >= 1".into()));
        }
        if self.gamma0.len() != self.p || self.beta0.len() != self.q {
            return Err(Error::Config(format!(
                "coefficient lengths ({}, {}) must match (p, q) = ({}, {})",
                self.gamma0.len(),
                self.beta0.len(),
                self.p,
                self.q
            )));
        }
        if !(self.sigma2_0 >= 0.0) || !(self.tau2_0 >= 0.0) || !(self.theta0 > 0.0) {
            return Err(Error::Config(
                "variances must be nonnegative and theta positive".into(),
            ));
        }
        if self.domain.0.len() != self.d || self.domain.1.len() != self.d {
            return Err(Error::Config("domain corners must have d coordinates".into()));
        }
        if self
            .domain
            .0
            .iter()
            .zip(self.domain.1.iter())
            .any(|(lo, hi)| !(lo < hi))
        {
            return Err(Error::Config("degenerate domain box".into()));
        }
        Ok(())
    }
}

/// The generating parameters, recorded next to the data files.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthRecord {
    pub gamma0: Vec<f64>,
    pub beta0: Vec<f64>,
    pub sigma2_0: f64,
    pub tau2_0: f64,
    pub theta0: f64,
    pub seed: u64,
}

impl TruthRecord {
    pub fn save_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        if let Some(c) = comment {
            writeln!(w, "# {c}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(w, "param,value").map_err(|e| Error::io(path, e))?;
        for (i, v) in self.gamma0.iter().enumerate() {
            writeln!(w, "gamma{},{}", i + 1, v).map_err(|e| Error::io(path, e))?;
        }
        for (i, v) in self.beta0.iter().enumerate() {
            writeln!(w, "beta{},{}", i + 1, v).map_err(|e| Error::io(path, e))?;
        }
        writeln!(w, "sigma2,{}", self.sigma2_0).map_err(|e| Error::io(path, e))?;
        writeln!(w, "tau2,{}", self.tau2_0).map_err(|e| Error::io(path, e))?;
        writeln!(w, "theta,{}", self.theta0).map_err(|e| Error::io(path, e))?;
        writeln!(w, "seed,{}", self.seed).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Draws the GP term for all simulations: each column is one realization
/// over all `n_total` points.
fn draw_gp_realizations(
    locations: &DMatrix<f64>,
    cfg: &SimConfig,
    n_sims: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<DMatrix<f64>> {
    let n_total = locations.nrows();
    let sigma = cfg.sigma2_0.sqrt();
    if cfg.sigma2_0 == 0.0 {
        return Ok(DMatrix::zeros(n_total, n_sims));
    }
    if n_total <= cfg.dense_cap {
        let mut k = DMatrix::zeros(n_total, n_total);
        let dcols = locations.ncols();
        let mut ui = vec![0.0; dcols];
        let mut uj = vec![0.0; dcols];
        for i in 0..n_total {
            for c in 0..dcols {
                ui[c] = locations[(i, c)];
            }
            for j in i..n_total {
                for c in 0..dcols {
                    uj[c] = locations[(j, c)];
                }
                let v = exp_kernel(&ui, &uj, cfg.theta0);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let chol = chol_with_jitter(k, CHOL_JITTER, "simulation covariance")?;
        let mut w = DMatrix::zeros(n_total, n_sims);
        for s in 0..n_sims {
            let z = DVector::from_fn(n_total, |_, _| rng.sample(StandardNormal));
            w.set_column(s, &(chol.l() * z * sigma));
        }
        Ok(w)
    } else if let Some(n_knot) = cfg.fallback_knots {
        // low-rank fallback: the knot process plus independent residuals
        // with the exact MPP marginal correction keeps unit variance
        let mpp = build_mpp(locations, cfg.theta0, n_knot, cfg.seed ^ 0x6b6e6f74)?;
        let knot_idx = mpp.knot_indices().to_vec();
        let knot_locs = DMatrix::from_fn(n_knot, locations.ncols(), |i, j| {
            locations[(knot_idx[i], j)]
        });
        let mut ktilde = DMatrix::zeros(n_knot, n_knot);
        let dcols = locations.ncols();
        let mut ui = vec![0.0; dcols];
        let mut uj = vec![0.0; dcols];
        for i in 0..n_knot {
            for c in 0..dcols {
                ui[c] = knot_locs[(i, c)];
            }
            for j in i..n_knot {
                for c in 0..dcols {
                    uj[c] = knot_locs[(j, c)];
                }
                let v = exp_kernel(&ui, &uj, cfg.theta0);
                ktilde[(i, j)] = v;
                ktilde[(j, i)] = v;
            }
        }
        let chol = chol_with_jitter(ktilde, CHOL_JITTER, "fallback knot covariance")?;
        let mut w = DMatrix::zeros(n_total, n_sims);
        for s in 0..n_sims {
            let z = DVector::from_fn(n_knot, |_, _| rng.sample(StandardNormal));
            let w_knots = chol.l() * z;
            // interpolate through the knots, then add the diagonal remainder
            let weights = chol.solve(&w_knots);
            let mut col = DVector::zeros(n_total);
            let mut ki = vec![0.0; n_knot];
            for i in 0..n_total {
                for c in 0..dcols {
                    ui[c] = locations[(i, c)];
                }
                for (a, kv) in ki.iter_mut().enumerate() {
                    for c in 0..dcols {
                        uj[c] = knot_locs[(a, c)];
                    }
                    *kv = exp_kernel(&ui, &uj, cfg.theta0);
                }
                let low = ki.iter().zip(weights.iter()).map(|(a, b)| a * b).sum::<f64>();
                let resid_var = mpp.d_diag()[i].max(0.0);
                let eps: f64 = rng.sample(StandardNormal);
                col[i] = low + eps * resid_var.sqrt();
            }
            w.set_column(s, &(col * sigma));
        }
        Ok(w)
    } else {
        Err(Error::DenseCapExceeded {
            n: n_total,
            cap: cfg.dense_cap,
        })
    }
}

/// Generates a train/test pair: locations uniform on the box, standard
/// normal attributes, GP-plus-noise responses.
pub fn generate(cfg: &SimConfig) -> Result<(FunctionalDataset, FunctionalDataset, TruthRecord)> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed, 5);
    let n_total = cfg.n + cfg.n0;
    let s_total = cfg.s + cfg.s0;
    let locations = DMatrix::from_fn(n_total, cfg.d, |_, c| {
        let lo = cfg.domain.0[c];
        let hi = cfg.domain.1[c];
        lo + rng.random::<f64>() * (hi - lo)
    });
    let local_attrs = DMatrix::from_fn(n_total, cfg.q, |_, _| rng.sample(StandardNormal));
    let global_attrs = DMatrix::from_fn(s_total, cfg.p, |_, _| rng.sample(StandardNormal));
    let w = draw_gp_realizations(&locations, cfg, s_total, &mut rng)?;

    let beta0 = DVector::from_column_slice(&cfg.beta0);
    let gamma0 = DVector::from_column_slice(&cfg.gamma0);
    let tau = cfg.tau2_0.sqrt();
    let xb = &local_attrs * &beta0;
    let mut responses = DMatrix::zeros(n_total, s_total);
    for s in 0..s_total {
        let zg = global_attrs.row(s).transpose().dot(&gamma0);
        for i in 0..n_total {
            let eps: f64 = rng.sample(StandardNormal);
            responses[(i, s)] = zg + xb[i] + w[(i, s)] + eps * tau;
        }
    }

    let train = FunctionalDataset::new(
        locations.rows(0, cfg.n).into_owned(),
        local_attrs.rows(0, cfg.n).into_owned(),
        global_attrs.rows(0, cfg.s).into_owned(),
        responses.view((0, 0), (cfg.n, cfg.s)).into_owned(),
    )?;
    let test = FunctionalDataset::new(
        locations.rows(cfg.n, cfg.n0).into_owned(),
        local_attrs.rows(cfg.n, cfg.n0).into_owned(),
        global_attrs.rows(cfg.s, cfg.s0).into_owned(),
        responses.view((cfg.n, cfg.s), (cfg.n0, cfg.s0)).into_owned(),
    )?;
    let truth = TruthRecord {
        gamma0: cfg.gamma0.clone(),
        beta0: cfg.beta0.clone(),
        sigma2_0: cfg.sigma2_0,
        tau2_0: cfg.tau2_0,
        theta0: cfg.theta0,
        seed: cfg.seed,
    };
    Ok((train, test, truth))
}

/// Storm-surge-shaped synthetic design: elevation as the single local
/// attribute and five global attributes drawn from physical ranges, then
/// standardized. Signs of the generating coefficients follow the usual
/// surge relationships (rise in sea level and storm velocity push surge up;
/// elevation, heading, and pressure push it down).
#[derive(Clone, Debug, PartialEq)]
pub struct SloshLikeConfig {
    pub n: usize,
    pub n0: usize,
    pub s: usize,
    pub s0: usize,
    pub seed: u64,
    pub sigma2_0: f64,
    pub tau2_0: f64,
    pub theta0: f64,
    pub fallback_knots: Option<usize>,
}

impl Default for SloshLikeConfig {
    fn default() -> Self {
        SloshLikeConfig {
            n: 5000,
            n0: 500,
            s: 5,
            s0: 5,
            seed: 0,
            sigma2_0: 0.3,
            tau2_0: 0.02,
            theta0: 1.0,
            fallback_knots: Some(512),
        }
    }
}

/// Physical ranges of the five global attributes: heading (degrees),
/// velocity (knots), latitude (degrees), pressure (millibars), sea level
/// rise (cm).
pub const SLOSH_ATTR_RANGES: [(f64, f64); 5] = [
    (204.0349, 384.0244),
    (0.0, 40.0),
    (38.32527, 39.26811),
    (930.0, 980.0),
    (-20.0, 350.0),
];

/// Generating coefficients on the standardized scale, ordered as
/// [`SLOSH_ATTR_RANGES`]: heading, velocity, latitude, pressure, sea level
/// rise; last the elevation coefficient.
pub const SLOSH_GAMMA0: [f64; 5] = [-0.4, 0.5, 0.2, -0.6, 0.8];
pub const SLOSH_BETA_ELEVATION: f64 = -0.7;

pub fn generate_slosh_like(
    cfg: &SloshLikeConfig,
) -> Result<(FunctionalDataset, FunctionalDataset, TruthRecord)> {
    let mut rng = seeded_rng(cfg.seed, 6);
    let n_total = cfg.n + cfg.n0;
    let s_total = cfg.s + cfg.s0;

    // coastal-strip coordinates
    let locations = DMatrix::from_fn(n_total, 2, |_, c| {
        if c == 0 {
            rng.random::<f64>() * 20.0
        } else {
            rng.random::<f64>() * 10.0
        }
    });
    // smooth elevation surface plus local roughness, standardized below
    let mut elevation = DVector::from_fn(n_total, |i, _| {
        let x = locations[(i, 0)];
        let y = locations[(i, 1)];
        (0.45 * x).sin() * (0.3 * y).cos() + 0.08 * y
            + 0.1 * rng.sample::<f64, _>(StandardNormal)
    });
    standardize(elevation.as_mut_slice());
    let local_attrs = DMatrix::from_column_slice(n_total, 1, elevation.as_slice());

    // raw physical draws, standardized per attribute
    let mut global_attrs = DMatrix::from_fn(s_total, 5, |_, j| {
        let (lo, hi) = SLOSH_ATTR_RANGES[j];
        lo + rng.random::<f64>() * (hi - lo)
    });
    for j in 0..5 {
        let mut col: Vec<f64> = global_attrs.column(j).iter().copied().collect();
        standardize(&mut col);
        for (i, v) in col.into_iter().enumerate() {
            global_attrs[(i, j)] = v;
        }
    }

    let sim_cfg = SimConfig {
        n: cfg.n,
        n0: cfg.n0,
        s: cfg.s,
        s0: cfg.s0,
        d: 2,
        p: 5,
        q: 1,
        gamma0: SLOSH_GAMMA0.to_vec(),
        beta0: vec![SLOSH_BETA_ELEVATION],
        sigma2_0: cfg.sigma2_0,
        tau2_0: cfg.tau2_0,
        theta0: cfg.theta0,
        domain: (vec![0.0, 0.0], vec![20.0, 10.0]),
        seed: cfg.seed,
        dense_cap: 5000,
        fallback_knots: cfg.fallback_knots,
    };
    let w = draw_gp_realizations(&locations, &sim_cfg, s_total, &mut rng)?;

    let gamma0 = DVector::from_column_slice(&SLOSH_GAMMA0);
    let tau = cfg.tau2_0.sqrt();
    let mut responses = DMatrix::zeros(n_total, s_total);
    for s in 0..s_total {
        let zg = global_attrs.row(s).transpose().dot(&gamma0);
        for i in 0..n_total {
            let eps: f64 = rng.sample(StandardNormal);
            responses[(i, s)] =
                zg + local_attrs[(i, 0)] * SLOSH_BETA_ELEVATION + w[(i, s)] + eps * tau;
        }
    }

    let train = FunctionalDataset::new(
        locations.rows(0, cfg.n).into_owned(),
        local_attrs.rows(0, cfg.n).into_owned(),
        global_attrs.rows(0, cfg.s).into_owned(),
        responses.view((0, 0), (cfg.n, cfg.s)).into_owned(),
    )?;
    let test = FunctionalDataset::new(
        locations.rows(cfg.n, cfg.n0).into_owned(),
        local_attrs.rows(cfg.n, cfg.n0).into_owned(),
        global_attrs.rows(cfg.s, cfg.s0).into_owned(),
        responses.view((cfg.n, cfg.s), (cfg.n0, cfg.s0)).into_owned(),
    )?;
    let truth = TruthRecord {
        gamma0: SLOSH_GAMMA0.to_vec(),
        beta0: vec![SLOSH_BETA_ELEVATION],
        sigma2_0: cfg.sigma2_0,
        tau2_0: cfg.tau2_0,
        theta0: cfg.theta0,
        seed: cfg.seed,
    };
    Ok((train, test, truth))
}

fn standardize(xs: &mut [f64]) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    for v in xs.iter_mut() {
        *v = (*v - mean) / sd;
    }
}
