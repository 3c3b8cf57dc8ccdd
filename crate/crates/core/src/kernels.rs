//! Covariance constructions over index points: the exponential kernel, the
//! dense full-GP covariance, the low-rank modified-predictive-process (MPP)
//! form, and the sparse-precision nearest-neighbor GP (NNGP).
//!
//! All variants sit behind [`CovarianceOperator`], which exposes what the
//! rest of the pipeline needs without materializing `n x n` matrices:
//! `K v`, the sketched quadratic form `Phi K Phi^T`, cross-covariance
//! products against new index points, and the model covariance at new points.
//! Everything is at unit marginal variance; callers scale by `sigma2`.

use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{chol_with_jitter, CHOL_JITTER};

/// Refusal threshold for dense `n x n` work (full-GP build, new-point
/// covariances). The sketching pipeline never needs dense covariances above
/// this; hitting the cap means the caller asked for something the method is
/// designed to avoid.
pub const DENSE_CAP_DEFAULT: usize = 20_000;

const BLOCK: usize = 512;

/// Exponential correlation: `exp(-theta * ||u - v||)`.
pub fn exp_kernel(u: &[f64], v: &[f64], theta: f64) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut d2 = 0.0;
    for (a, b) in u.iter().zip(v.iter()) {
        let diff = a - b;
        d2 += diff * diff;
    }
    (-theta * d2.sqrt()).exp()
}

/// How NNGP orders points before conditioning each on preceding neighbors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeighborOrdering {
    /// Keep the dataset's row order.
    InputOrder,
    /// Sort by first coordinate, ties broken by subsequent coordinates.
    CoordinateSort,
}

/// Covariance family selector with its variant-specific parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    FullGp,
    Mpp { n_knot: usize, knot_seed: u64 },
    Nngp { k: usize, ordering: NeighborOrdering },
}

/// Unit-variance covariance over the training index points.
pub trait CovarianceOperator: Send + Sync {
    fn n(&self) -> usize;
    fn theta(&self) -> f64;

    /// `K v`.
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;

    /// `Phi K Phi^T` for a dense `m x n` matrix, never materializing `K`.
    fn quad_form(&self, phi: &DMatrix<f64>) -> DMatrix<f64>;

    /// `K` restricted to a row/column index subset (for selection sketches).
    fn sub_matrix(&self, indices: &[usize]) -> DMatrix<f64>;

    /// `Cov(w*, w) . rhs` for `rhs` with `n` rows.
    fn cross_mul(&self, new_locs: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64>;

    /// `Var(w*)` at new index points under this variant.
    fn new_cov(&self, new_locs: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

pub fn build_operator(
    locations: &DMatrix<f64>,
    spec: &KernelSpec,
    theta: f64,
    dense_cap: usize,
) -> Result<Box<dyn CovarianceOperator>> {
    match spec {
        KernelSpec::FullGp => Ok(Box::new(build_full_gp(locations, theta, dense_cap)?)),
        KernelSpec::Mpp { n_knot, knot_seed } => {
            Ok(Box::new(build_mpp(locations, theta, *n_knot, *knot_seed)?))
        }
        KernelSpec::Nngp { k, ordering } => {
            Ok(Box::new(build_nngp(locations, theta, *k, *ordering)?))
        }
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "length-scale theta must be positive and finite, got {theta}"
        )));
    }
    Ok(())
}

fn row_slice(locs: &DMatrix<f64>, i: usize, buf: &mut Vec<f64>) {
    buf.clear();
    for j in 0..locs.ncols() {
        buf.push(locs[(i, j)]);
    }
}

/// Kernel tile between row ranges of two location matrices.
fn kernel_tile(
    a: &DMatrix<f64>,
    rows_a: Range<usize>,
    b: &DMatrix<f64>,
    rows_b: Range<usize>,
    theta: f64,
) -> DMatrix<f64> {
    let d = a.ncols();
    let mut tile = DMatrix::zeros(rows_a.len(), rows_b.len());
    for (ti, i) in rows_a.clone().enumerate() {
        for (tj, j) in rows_b.clone().enumerate() {
            let mut d2 = 0.0;
            for c in 0..d {
                let diff = a[(i, c)] - b[(j, c)];
                d2 += diff * diff;
            }
            tile[(ti, tj)] = (-theta * d2.sqrt()).exp();
        }
    }
    tile
}

fn strips(n: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(BLOCK))
        .map(|s| (s * BLOCK)..((s + 1) * BLOCK).min(n))
        .collect()
}

fn symmetrize(mut mat: DMatrix<f64>) -> DMatrix<f64> {
    let t = mat.transpose();
    mat += t;
    mat *= 0.5;
    mat
}

// ---------------------------------------------------------------------------
// Full GP
// ---------------------------------------------------------------------------

pub struct FullGpOperator {
    locations: DMatrix<f64>,
    theta: f64,
    dense_cap: usize,
}

/// Dense exponential-kernel covariance. Refuses `n` above `dense_cap`.
pub fn build_full_gp(
    locations: &DMatrix<f64>,
    theta: f64,
    dense_cap: usize,
) -> Result<FullGpOperator> {
    check_theta(theta)?;
    let n = locations.nrows();
    if n == 0 {
        return Err(Error::Dimension("no index points".into()));
    }
    if n > dense_cap {
        return Err(Error::DenseCapExceeded { n, cap: dense_cap });
    }
    Ok(FullGpOperator {
        locations: locations.clone(),
        theta,
        dense_cap,
    })
}

impl CovarianceOperator for FullGpOperator {
    fn n(&self) -> usize {
        self.locations.nrows()
    }

    fn theta(&self) -> f64 {
        self.theta
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        assert_eq!(v.len(), n);
        let blocks = strips(n);
        let parts = exec::map_slice(&blocks, |rows| {
            let mut out = DVector::zeros(rows.len());
            for cols in strips(n) {
                let tile = kernel_tile(
                    &self.locations,
                    rows.clone(),
                    &self.locations,
                    cols.clone(),
                    self.theta,
                );
                out.gemv(1.0, &tile, &v.rows(cols.start, cols.len()), 1.0);
            }
            out
        });
        let mut out = DVector::zeros(n);
        for (rows, part) in blocks.iter().zip(parts) {
            out.rows_mut(rows.start, rows.len()).copy_from(&part);
        }
        out
    }

    fn quad_form(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        assert_eq!(phi.ncols(), n);
        let m = phi.nrows();
        let blocks = strips(n);
        // W = K Phi^T assembled in row strips
        let w_blocks = exec::map_slice(&blocks, |rows| {
            let mut wb = DMatrix::zeros(rows.len(), m);
            for cols in strips(n) {
                let tile = kernel_tile(
                    &self.locations,
                    rows.clone(),
                    &self.locations,
                    cols.clone(),
                    self.theta,
                );
                wb.gemm(
                    1.0,
                    &tile,
                    &phi.columns(cols.start, cols.len()).transpose(),
                    1.0,
                );
            }
            wb
        });
        let mut w = DMatrix::zeros(n, m);
        for (rows, wb) in blocks.iter().zip(w_blocks) {
            w.rows_mut(rows.start, rows.len()).copy_from(&wb);
        }
        symmetrize(phi * w)
    }

    fn sub_matrix(&self, indices: &[usize]) -> DMatrix<f64> {
        let d = self.locations.ncols();
        let m = indices.len();
        let mut out = DMatrix::zeros(m, m);
        let mut ui = Vec::with_capacity(d);
        let mut uj = Vec::with_capacity(d);
        for a in 0..m {
            row_slice(&self.locations, indices[a], &mut ui);
            for b in a..m {
                row_slice(&self.locations, indices[b], &mut uj);
                let v = exp_kernel(&ui, &uj, self.theta);
                out[(a, b)] = v;
                out[(b, a)] = v;
            }
        }
        out
    }

    fn cross_mul(&self, new_locs: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        assert_eq!(rhs.nrows(), n);
        let n_star = new_locs.nrows();
        let c = rhs.ncols();
        let new_blocks = strips(n_star);
        let parts = exec::map_slice(&new_blocks, |rows| {
            let mut out = DMatrix::zeros(rows.len(), c);
            for cols in strips(n) {
                let tile = kernel_tile(
                    new_locs,
                    rows.clone(),
                    &self.locations,
                    cols.clone(),
                    self.theta,
                );
                out.gemm(1.0, &tile, &rhs.rows(cols.start, cols.len()), 1.0);
            }
            out
        });
        let mut out = DMatrix::zeros(n_star, c);
        for (rows, part) in new_blocks.iter().zip(parts) {
            out.rows_mut(rows.start, rows.len()).copy_from(&part);
        }
        out
    }

    fn new_cov(&self, new_locs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n_star = new_locs.nrows();
        if n_star > self.dense_cap {
            return Err(Error::DenseCapExceeded {
                n: n_star,
                cap: self.dense_cap,
            });
        }
        Ok(kernel_tile(
            new_locs,
            0..n_star,
            new_locs,
            0..n_star,
            self.theta,
        ))
    }
}

// ---------------------------------------------------------------------------
// Modified predictive process
// ---------------------------------------------------------------------------

pub struct MppOperator {
    locations: DMatrix<f64>,
    theta: f64,
    knot_locs: DMatrix<f64>,
    knot_indices: Vec<usize>,
    chol_ktilde: Cholesky<f64, Dyn>,
    /// Diagonal correction restoring unit marginal variance, in `[0, 1]`.
    d_diag: DVector<f64>,
}

/// Low-rank-plus-diagonal covariance through `n_knot` knots drawn uniformly
/// without replacement from the training locations.
pub fn build_mpp(
    locations: &DMatrix<f64>,
    theta: f64,
    n_knot: usize,
    knot_seed: u64,
) -> Result<MppOperator> {
    check_theta(theta)?;
    let n = locations.nrows();
    if n_knot == 0 || n_knot > n {
        return Err(Error::InvalidArgument(format!(
            "n_knot must satisfy 1 <= n_knot <= n, got n_knot = {n_knot}, n = {n}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(knot_seed);
    let mut knot_indices: Vec<usize> = rand::seq::index::sample(&mut rng, n, n_knot).into_vec();
    knot_indices.sort_unstable();
    let d = locations.ncols();
    let knot_locs = DMatrix::from_fn(n_knot, d, |i, j| locations[(knot_indices[i], j)]);
    let ktilde = kernel_tile(&knot_locs, 0..n_knot, &knot_locs, 0..n_knot, theta);
    let chol_ktilde = chol_with_jitter(ktilde, CHOL_JITTER, "MPP knot matrix K~")?;

    // D_ii = 1 - k~_i^T K~^{-1} k~_i, computed in row strips
    let blocks = strips(n);
    let parts = exec::map_slice(&blocks, |rows| {
        let cross = kernel_tile(locations, rows.clone(), &knot_locs, 0..n_knot, theta);
        let s = chol_ktilde
            .l()
            .solve_lower_triangular(&cross.transpose())
            .expect("Cholesky factor is nonsingular");
        DVector::from_fn(rows.len(), |i, _| {
            (1.0 - s.column(i).norm_squared()).clamp(0.0, 1.0)
        })
    });
    let mut d_diag = DVector::zeros(n);
    for (rows, part) in blocks.iter().zip(parts) {
        d_diag.rows_mut(rows.start, rows.len()).copy_from(&part);
    }

    Ok(MppOperator {
        locations: locations.clone(),
        theta,
        knot_locs,
        knot_indices,
        chol_ktilde,
        d_diag,
    })
}

impl MppOperator {
    pub fn knot_indices(&self) -> &[usize] {
        &self.knot_indices
    }

    pub fn d_diag(&self) -> &DVector<f64> {
        &self.d_diag
    }

    /// `Phi K~~` accumulated over row strips of the training points.
    fn phi_cross_knots(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        let n_knot = self.knot_locs.nrows();
        let blocks = strips(n);
        let parts = exec::map_slice(&blocks, |rows| {
            let cross = kernel_tile(
                &self.locations,
                rows.clone(),
                &self.knot_locs,
                0..n_knot,
                self.theta,
            );
            phi.columns(rows.start, rows.len()) * cross
        });
        let mut acc = DMatrix::zeros(phi.nrows(), n_knot);
        for part in parts {
            acc += part;
        }
        acc
    }
}

impl CovarianceOperator for MppOperator {
    fn n(&self) -> usize {
        self.locations.nrows()
    }

    fn theta(&self) -> f64 {
        self.theta
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        assert_eq!(v.len(), n);
        let n_knot = self.knot_locs.nrows();
        // t = K~~^T v
        let blocks = strips(n);
        let parts = exec::map_slice(&blocks, |rows| {
            let cross = kernel_tile(
                &self.locations,
                rows.clone(),
                &self.knot_locs,
                0..n_knot,
                self.theta,
            );
            cross.transpose() * v.rows(rows.start, rows.len())
        });
        let mut t = DVector::zeros(n_knot);
        for part in parts {
            t += part;
        }
        let t2 = self.chol_ktilde.solve(&t);
        // out = K~~ t2 + D v
        let out_parts = exec::map_slice(&blocks, |rows| {
            let cross = kernel_tile(
                &self.locations,
                rows.clone(),
                &self.knot_locs,
                0..n_knot,
                self.theta,
            );
            cross * &t2
        });
        let mut out = DVector::zeros(n);
        for (rows, part) in blocks.iter().zip(out_parts) {
            out.rows_mut(rows.start, rows.len()).copy_from(&part);
        }
        out + self.d_diag.component_mul(v)
    }

    fn quad_form(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        assert_eq!(phi.ncols(), n);
        let u = self.phi_cross_knots(phi);
        let t = self
            .chol_ktilde
            .l()
            .solve_lower_triangular(&u.transpose())
            .expect("Cholesky factor is nonsingular");
        let low_rank = t.transpose() * &t;
        // Phi D Phi^T over row strips
        let blocks = strips(n);
        let parts = exec::map_slice(&blocks, |rows| {
            let mut scaled = phi.columns(rows.start, rows.len()).into_owned();
            for (local, i) in rows.clone().enumerate() {
                let di = self.d_diag[i];
                scaled.column_mut(local).scale_mut(di);
            }
            scaled * phi.columns(rows.start, rows.len()).transpose()
        });
        let mut diag_part = DMatrix::zeros(phi.nrows(), phi.nrows());
        for part in parts {
            diag_part += part;
        }
        symmetrize(low_rank + diag_part)
    }

    fn sub_matrix(&self, indices: &[usize]) -> DMatrix<f64> {
        let d = self.locations.ncols();
        let m = indices.len();
        let n_knot = self.knot_locs.nrows();
        let sub_locs = DMatrix::from_fn(m, d, |i, j| self.locations[(indices[i], j)]);
        let cross = kernel_tile(&sub_locs, 0..m, &self.knot_locs, 0..n_knot, self.theta);
        let s = self
            .chol_ktilde
            .l()
            .solve_lower_triangular(&cross.transpose())
            .expect("Cholesky factor is nonsingular");
        let mut out = s.transpose() * &s;
        for (a, &i) in indices.iter().enumerate() {
            out[(a, a)] += self.d_diag[i];
        }
        symmetrize(out)
    }

    fn cross_mul(&self, new_locs: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        assert_eq!(rhs.nrows(), n);
        let n_knot = self.knot_locs.nrows();
        // t1 = K~~^T rhs
        let blocks = strips(n);
        let parts = exec::map_slice(&blocks, |rows| {
            let cross = kernel_tile(
                &self.locations,
                rows.clone(),
                &self.knot_locs,
                0..n_knot,
                self.theta,
            );
            cross.transpose() * rhs.rows(rows.start, rows.len())
        });
        let mut t1 = DMatrix::zeros(n_knot, rhs.ncols());
        for part in parts {
            t1 += part;
        }
        let t2 = self.chol_ktilde.solve(&t1);
        let new_cross = kernel_tile(
            new_locs,
            0..new_locs.nrows(),
            &self.knot_locs,
            0..n_knot,
            self.theta,
        );
        new_cross * t2
    }

    fn new_cov(&self, new_locs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n_star = new_locs.nrows();
        let n_knot = self.knot_locs.nrows();
        let cross = kernel_tile(new_locs, 0..n_star, &self.knot_locs, 0..n_knot, self.theta);
        let s = self
            .chol_ktilde
            .l()
            .solve_lower_triangular(&cross.transpose())
            .expect("Cholesky factor is nonsingular");
        let mut out = s.transpose() * &s;
        for t in 0..n_star {
            let dt = (1.0 - s.column(t).norm_squared()).clamp(0.0, 1.0);
            out[(t, t)] += dt;
        }
        Ok(symmetrize(out))
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbor GP
// ---------------------------------------------------------------------------

pub struct NngpOperator {
    locations: DMatrix<f64>,
    theta: f64,
    k: usize,
    /// `order[pos]` = original row index at ordered position `pos`.
    order: Vec<usize>,
    /// Per ordered position: neighbor positions (ascending) and weights, so
    /// that `A[i, neighbors[i]] = weights[i]`, A strictly lower triangular.
    neighbors: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
    /// Conditional variances: `K^{-1} = (I - A)^T diag(cond_var)^{-1} (I - A)`.
    cond_var: DVector<f64>,
}

/// Sparse-precision covariance conditioning each point on at most `k`
/// preceding neighbors in the chosen ordering. Early points (position `i <=
/// k`) condition on all preceding points.
pub fn build_nngp(
    locations: &DMatrix<f64>,
    theta: f64,
    k: usize,
    ordering: NeighborOrdering,
) -> Result<NngpOperator> {
    check_theta(theta)?;
    let n = locations.nrows();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "neighbor count must satisfy 1 <= k < n, got k = {k}, n = {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if ordering == NeighborOrdering::CoordinateSort {
        order.sort_by(|&a, &b| {
            for c in 0..locations.ncols() {
                match locations[(a, c)].partial_cmp(&locations[(b, c)]) {
                    Some(std::cmp::Ordering::Equal) | None => continue,
                    Some(o) => return o,
                }
            }
            std::cmp::Ordering::Equal
        });
    }
    let ordered_locs = DMatrix::from_fn(n, locations.ncols(), |i, j| locations[(order[i], j)]);

    struct RowFactor {
        neighbors: Vec<usize>,
        weights: Vec<f64>,
        cond_var: f64,
    }

    let rows: Vec<Result<RowFactor>> = exec::map_range(n, |i| {
        if i == 0 {
            return Ok(RowFactor {
                neighbors: Vec::new(),
                weights: Vec::new(),
                cond_var: 1.0,
            });
        }
        let k_i = k.min(i);
        // k_i nearest preceding points; ties broken by position for
        // determinism
        let mut cands: Vec<(f64, usize)> = (0..i)
            .map(|j| {
                let mut d2 = 0.0;
                for c in 0..ordered_locs.ncols() {
                    let diff = ordered_locs[(i, c)] - ordered_locs[(j, c)];
                    d2 += diff * diff;
                }
                (d2, j)
            })
            .collect();
        cands.select_nth_unstable_by(k_i - 1, |a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        });
        let mut nbrs: Vec<usize> = cands[..k_i].iter().map(|&(_, j)| j).collect();
        nbrs.sort_unstable();

        let knn = DMatrix::from_fn(k_i, k_i, |a, b| {
            let mut d2 = 0.0;
            for c in 0..ordered_locs.ncols() {
                let diff = ordered_locs[(nbrs[a], c)] - ordered_locs[(nbrs[b], c)];
                d2 += diff * diff;
            }
            (-theta * d2.sqrt()).exp()
        });
        let kvec = DVector::from_fn(k_i, |a, _| {
            let mut d2 = 0.0;
            for c in 0..ordered_locs.ncols() {
                let diff = ordered_locs[(nbrs[a], c)] - ordered_locs[(i, c)];
                d2 += diff * diff;
            }
            (-theta * d2.sqrt()).exp()
        });
        let chol = chol_with_jitter(knn, CHOL_JITTER, "NNGP neighbor submatrix")?;
        let w = chol.solve(&kvec);
        let cond_var = 1.0 - kvec.dot(&w);
        Ok(RowFactor {
            neighbors: nbrs,
            weights: w.as_slice().to_vec(),
            cond_var,
        })
    });

    let mut neighbors = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut cond_var = DVector::zeros(n);
    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        neighbors.push(row.neighbors);
        weights.push(row.weights);
        cond_var[i] = row.cond_var;
    }

    Ok(NngpOperator {
        locations: locations.clone(),
        theta,
        k,
        order,
        neighbors,
        weights,
        cond_var,
    })
}

impl NngpOperator {
    /// Solves `(I - A) x = b` (forward substitution in ordered space).
    fn solve_i_minus_a(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = b.len();
        let mut x = b.clone();
        for i in 0..n {
            let mut acc = x[i];
            for (idx, w) in self.neighbors[i].iter().zip(self.weights[i].iter()) {
                acc += w * x[*idx];
            }
            x[i] = acc;
        }
        x
    }

    /// Solves `(I - A)^T x = b` (backward scatter in ordered space).
    fn solve_i_minus_a_t(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = b.len();
        let mut x = b.clone();
        for j in (0..n).rev() {
            let xj = x[j];
            for (idx, w) in self.neighbors[j].iter().zip(self.weights[j].iter()) {
                x[*idx] += w * xj;
            }
        }
        x
    }

    /// `K v` in ordered space.
    fn apply_ordered(&self, v: &DVector<f64>) -> DVector<f64> {
        let t = self.solve_i_minus_a_t(v);
        let t = t.component_mul(&self.cond_var);
        self.solve_i_minus_a(&t)
    }

    /// Neighbor conditioning of one new point on its `k` nearest training
    /// points (original indexing): returns (original indices, weights,
    /// conditional variance).
    fn condition_new_point(&self, point: &[f64]) -> Result<(Vec<usize>, DVector<f64>, f64)> {
        let n = self.n();
        let d = self.locations.ncols();
        let k = self.k.min(n);
        let mut cands: Vec<(f64, usize)> = (0..n)
            .map(|j| {
                let mut d2 = 0.0;
                for c in 0..d {
                    let diff = point[c] - self.locations[(j, c)];
                    d2 += diff * diff;
                }
                (d2, j)
            })
            .collect();
        cands.select_nth_unstable_by(k - 1, |a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        });
        let mut nbrs: Vec<usize> = cands[..k].iter().map(|&(_, j)| j).collect();
        nbrs.sort_unstable();
        let knn = DMatrix::from_fn(k, k, |a, b| {
            let mut d2 = 0.0;
            for c in 0..d {
                let diff = self.locations[(nbrs[a], c)] - self.locations[(nbrs[b], c)];
                d2 += diff * diff;
            }
            (-self.theta * d2.sqrt()).exp()
        });
        let kvec = DVector::from_fn(k, |a, _| {
            let mut d2 = 0.0;
            for c in 0..d {
                let diff = self.locations[(nbrs[a], c)] - point[c];
                d2 += diff * diff;
            }
            (-self.theta * d2.sqrt()).exp()
        });
        let chol = chol_with_jitter(knn, CHOL_JITTER, "NNGP prediction neighbors")?;
        let w = chol.solve(&kvec);
        let f = (1.0 - kvec.dot(&w)).max(0.0);
        Ok((nbrs, w, f))
    }

    #[cfg(test)]
    fn neighbor_counts(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    #[cfg(test)]
    fn bivariate_factors(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            self.weights.clone(),
            self.cond_var.as_slice().to_vec(),
        )
    }
}

impl CovarianceOperator for NngpOperator {
    fn n(&self) -> usize {
        self.locations.nrows()
    }

    fn theta(&self) -> f64 {
        self.theta
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        assert_eq!(v.len(), n);
        let vo = DVector::from_fn(n, |pos, _| v[self.order[pos]]);
        let yo = self.apply_ordered(&vo);
        let mut out = DVector::zeros(n);
        for pos in 0..n {
            out[self.order[pos]] = yo[pos];
        }
        out
    }

    fn quad_form(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        assert_eq!(phi.ncols(), n);
        let m = phi.nrows();
        let sqrt_d = self.cond_var.map(f64::sqrt);
        let rows: Vec<DVector<f64>> = exec::map_range(m, |r| {
            let psi = DVector::from_fn(n, |pos, _| phi[(r, self.order[pos])]);
            self.solve_i_minus_a_t(&psi).component_mul(&sqrt_d)
        });
        let mut v = DMatrix::zeros(m, n);
        for (r, row) in rows.iter().enumerate() {
            v.row_mut(r).copy_from(&row.transpose());
        }
        symmetrize(&v * v.transpose())
    }

    fn sub_matrix(&self, indices: &[usize]) -> DMatrix<f64> {
        let n = self.n();
        let m = indices.len();
        let cols: Vec<DVector<f64>> = exec::map_slice(indices, |&j| {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            self.apply(&e)
        });
        let mut out = DMatrix::zeros(m, m);
        for (b, col) in cols.iter().enumerate() {
            for (a, &i) in indices.iter().enumerate() {
                out[(a, b)] = col[i];
            }
        }
        symmetrize(out)
    }

    fn cross_mul(&self, new_locs: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        assert_eq!(rhs.nrows(), n);
        let c = rhs.ncols();
        // G = K rhs, one apply per column
        let g_cols: Vec<DVector<f64>> =
            exec::map_range(c, |j| self.apply(&rhs.column(j).into_owned()));
        let n_star = new_locs.nrows();
        let d = new_locs.ncols();
        let rows: Vec<Result<DVector<f64>>> = exec::map_range(n_star, |t| {
            let point: Vec<f64> = (0..d).map(|cc| new_locs[(t, cc)]).collect();
            let (nbrs, w, _) = self.condition_new_point(&point)?;
            Ok(DVector::from_fn(c, |j, _| {
                let mut acc = 0.0;
                for (a, &orig) in nbrs.iter().enumerate() {
                    acc += w[a] * g_cols[j][orig];
                }
                acc
            }))
        });
        let mut out = DMatrix::zeros(n_star, c);
        for (t, row) in rows.into_iter().enumerate() {
            let row = row.expect("neighbor conditioning failed");
            out.row_mut(t).copy_from(&row.transpose());
        }
        out
    }

    fn new_cov(&self, new_locs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.n();
        let n_star = new_locs.nrows();
        let d = new_locs.ncols();
        let mut conds = Vec::with_capacity(n_star);
        for t in 0..n_star {
            let point: Vec<f64> = (0..d).map(|cc| new_locs[(t, cc)]).collect();
            conds.push(self.condition_new_point(&point)?);
        }
        // g_t = K (B^T e_t): scatter weights then apply
        let g: Vec<DVector<f64>> = exec::map_slice(&conds, |(nbrs, w, _)| {
            let mut v = DVector::zeros(n);
            for (a, &orig) in nbrs.iter().enumerate() {
                v[orig] = w[a];
            }
            self.apply(&v)
        });
        let mut out = DMatrix::zeros(n_star, n_star);
        for t in 0..n_star {
            let (nbrs_t, w_t, f_t) = &conds[t];
            for t2 in 0..n_star {
                let mut acc = 0.0;
                for (a, &orig) in nbrs_t.iter().enumerate() {
                    acc += w_t[a] * g[t2][orig];
                }
                out[(t, t2)] = acc;
            }
            out[(t, t)] += f_t;
        }
        Ok(symmetrize(out))
    }
}
