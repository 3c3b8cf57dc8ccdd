//! Sketching matrices and sketched datasets.
//!
//! A Gaussian sketch compresses the `n`-point data to `m << n` rows through a
//! random linear map with i.i.d. N(0, 1/n) entries. The divide-and-conquer
//! baselines (subdomain and stratified partitions) are expressed as selection
//! sketches so the downstream fit is identical. Every sketched dataset
//! carries its stochastic-approximation exponent `power = n / m` (or
//! `n / m_subset` for partitions), the single source of truth for likelihood
//! tempering downstream.
//!
//! Entries of a Gaussian sketch come from a counter-addressed stream keyed by
//! `(seed, i*n + j)`, so a column block `[offset, offset + n_j)` regenerated
//! by a research center is bit-identical to the same block of the centralized
//! matrix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::binfmt;
use crate::data::FunctionalDataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{neumaier_dot, NeumaierSum};
use crate::rng::{seeded_rng, CounterRng, STREAM_SKETCH};

const SKETCHED_MAGIC: &[u8; 8] = b"GPSKSKED";
const SKETCHED_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionKind {
    Subdomain,
    Stratified,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SketchKind {
    Gaussian,
    /// All points of one rectangular grid cell, `grid` = cells per axis.
    SelectionSubdomain { grid: Vec<usize> },
    /// Proportional random draws from every grid cell.
    SelectionStratified { grid: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum SketchRows {
    /// Dense `m x n` map.
    Dense(DMatrix<f64>),
    /// Row indices into the data, strictly increasing.
    Selection(Vec<usize>),
}

/// An `m x n` random linear map, regenerable bit-identically from
/// `(kind, m, n, seed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchMatrix {
    pub kind: SketchKind,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub rows: SketchRows,
}

impl SketchMatrix {
    /// The dense matrix view of this sketch (selection sketches expand to
    /// indicator rows).
    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.rows {
            SketchRows::Dense(mat) => mat.clone(),
            SketchRows::Selection(idx) => {
                let mut mat = DMatrix::zeros(self.m, self.n);
                for (r, &j) in idx.iter().enumerate() {
                    mat[(r, j)] = 1.0;
                }
                mat
            }
        }
    }
}

/// The compressed triple `(Phi y_s, Phi X, Phi 1_n)` for all `S` simulations.
///
/// `Phi Z_s = ones_sk * z_s^T`, so the per-simulation sketched design never
/// needs to be stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchedData {
    /// `m x S`: column `s` is `Phi y_s`.
    pub y_sk: DMatrix<f64>,
    /// `m x q`.
    pub x_sk: DMatrix<f64>,
    /// `m`-vector `Phi 1_n`.
    pub ones_sk: DVector<f64>,
    /// Tempering exponent `n / m` (or `n / m_subset`).
    pub power: f64,
}

impl SketchedData {
    pub fn m(&self) -> usize {
        self.y_sk.nrows()
    }

    pub fn s(&self) -> usize {
        self.y_sk.ncols()
    }

    pub fn q(&self) -> usize {
        self.x_sk.ncols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        binfmt::write_u64(&mut w, path, binfmt::magic(SKETCHED_MAGIC))?;
        binfmt::write_u64(&mut w, path, SKETCHED_VERSION)?;
        for v in [self.m(), self.s(), self.q()] {
            binfmt::write_u64(&mut w, path, v as u64)?;
        }
        binfmt::write_f64(&mut w, path, self.power)?;
        binfmt::write_matrix(&mut w, path, &self.y_sk)?;
        binfmt::write_matrix(&mut w, path, &self.x_sk)?;
        binfmt::write_vector(&mut w, path, &self.ones_sk)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        binfmt::expect_magic(&mut r, path, binfmt::magic(SKETCHED_MAGIC), "sketched data")?;
        let version = binfmt::read_u64(&mut r, path)?;
        if version != SKETCHED_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let m = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "m")?;
        let s = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "S")?;
        let q = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "q")?;
        let power = binfmt::read_f64(&mut r, path)?;
        Ok(SketchedData {
            y_sk: binfmt::read_matrix(&mut r, path, m, s)?,
            x_sk: binfmt::read_matrix(&mut r, path, m, q)?,
            ones_sk: binfmt::read_vector(&mut r, path, m)?,
            power,
        })
    }
}

/// Entries of the Gaussian sketch for `(seed, row i, columns cols)`.
///
/// Shared with the federation module so per-center column blocks regenerate
/// exactly the centralized entries.
pub(crate) fn gaussian_row_block(
    stream: &CounterRng,
    n: usize,
    i: usize,
    cols: std::ops::Range<usize>,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), cols.len());
    let start = (i * n + cols.start) as u64;
    stream.fill_normals(start, out);
    let scale = 1.0 / (n as f64).sqrt();
    for v in out.iter_mut() {
        *v *= scale;
    }
}

pub(crate) fn sketch_stream(seed: u64) -> CounterRng {
    CounterRng::new(seed, STREAM_SKETCH)
}

/// An `m x n` Gaussian sketch with i.i.d. N(0, 1/n) entries.
pub fn gen_gaussian_sketch(m: usize, n: usize, seed: u64) -> Result<SketchMatrix> {
    if m == 0 || m >= n {
        return Err(Error::InvalidArgument(format!(
            "Gaussian sketch needs 1 <= m < n, got m = {m}, n = {n}"
        )));
    }
    let stream = sketch_stream(seed);
    let rows: Vec<Vec<f64>> = exec::map_range(m, |i| {
        let mut row = vec![0.0; n];
        gaussian_row_block(&stream, n, i, 0..n, &mut row);
        row
    });
    let mut mat = DMatrix::zeros(m, n);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            mat[(i, j)] = *v;
        }
    }
    Ok(SketchMatrix {
        kind: SketchKind::Gaussian,
        m,
        n,
        seed,
        rows: SketchRows::Dense(mat),
    })
}

/// Partition baselines over a d-dimensional box: one selection sketch per
/// subset, subsets disjoint and exhaustive.
///
/// The grid has exactly `ceil(n / m_target)` cells (factored across axes as
/// near-square as divisors allow). Subdomain subsets are the non-empty cells;
/// stratified subsets each draw proportionally from every cell. Cells that
/// come out empty contribute nothing and are dropped, which can leave fewer
/// subsets than cells on badly unbalanced data.
pub fn gen_partition_sketch(
    kind: PartitionKind,
    locations: &DMatrix<f64>,
    m_target: usize,
    seed: u64,
) -> Result<Vec<SketchMatrix>> {
    let n = locations.nrows();
    let d = locations.ncols();
    if m_target == 0 || m_target > n {
        return Err(Error::InvalidArgument(format!(
            "m_target must satisfy 1 <= m_target <= n, got {m_target}, n = {n}"
        )));
    }
    let cells_wanted = n.div_ceil(m_target);
    let grid = factor_grid(cells_wanted, d);
    let total_cells: usize = grid.iter().product();

    // coordinate bins per axis
    let mut mins = vec![f64::INFINITY; d];
    let mut maxs = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for c in 0..d {
            mins[c] = mins[c].min(locations[(i, c)]);
            maxs[c] = maxs[c].max(locations[(i, c)]);
        }
    }
    let cell_of = |i: usize| -> usize {
        let mut cell = 0;
        for c in 0..d {
            let width = (maxs[c] - mins[c]).max(f64::MIN_POSITIVE);
            let frac = (locations[(i, c)] - mins[c]) / width;
            let b = ((frac * grid[c] as f64) as usize).min(grid[c] - 1);
            cell = cell * grid[c] + b;
        }
        cell
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); total_cells];
    for i in 0..n {
        members[cell_of(i)].push(i);
    }

    let subsets: Vec<Vec<usize>> = match kind {
        PartitionKind::Subdomain => members.into_iter().filter(|m| !m.is_empty()).collect(),
        PartitionKind::Stratified => {
            let mut rng = seeded_rng(seed, 2);
            let mut subsets: Vec<Vec<usize>> = vec![Vec::new(); total_cells];
            for (cell_idx, mut cell) in members.into_iter().enumerate() {
                cell.shuffle(&mut rng);
                // rotate the dealing start so remainders spread across subsets
                let start = rng.random_range(0..total_cells.max(1)) + cell_idx;
                for (k, idx) in cell.into_iter().enumerate() {
                    subsets[(start + k) % total_cells].push(idx);
                }
            }
            subsets.into_iter().filter(|s| !s.is_empty()).collect()
        }
    };

    let grid_for_kind = grid.clone();
    Ok(subsets
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            let m = idx.len();
            SketchMatrix {
                kind: match kind {
                    PartitionKind::Subdomain => SketchKind::SelectionSubdomain {
                        grid: grid_for_kind.clone(),
                    },
                    PartitionKind::Stratified => SketchKind::SelectionStratified {
                        grid: grid_for_kind.clone(),
                    },
                },
                m,
                n,
                seed,
                rows: SketchRows::Selection(idx),
            }
        })
        .collect())
}

/// Factors `cells` into `d` axis counts as close to `cells^(1/d)` as the
/// divisors of `cells` allow.
fn factor_grid(cells: usize, d: usize) -> Vec<usize> {
    let mut remaining = cells.max(1);
    let mut grid = Vec::with_capacity(d);
    for axis in 0..d {
        let axes_left = d - axis;
        if axes_left == 1 {
            grid.push(remaining);
            break;
        }
        let target = (remaining as f64).powf(1.0 / axes_left as f64).round() as usize;
        let mut best = 1;
        for cand in 1..=remaining {
            if remaining % cand == 0
                && (cand as i64 - target as i64).abs() < (best as i64 - target as i64).abs()
            {
                best = cand;
            }
        }
        grid.push(best);
        remaining /= best;
    }
    grid
}

/// `Phi K(theta) Phi^T` for any sketch kind: dense sketches go through the
/// operator's blocked quadratic form, selection sketches read the covariance
/// sub-matrix directly.
pub fn sketch_quad_form(
    phi: &SketchMatrix,
    cov: &dyn crate::kernels::CovarianceOperator,
) -> Result<DMatrix<f64>> {
    if phi.n != cov.n() {
        return Err(Error::Dimension(format!(
            "sketch has n = {}, covariance has n = {}",
            phi.n,
            cov.n()
        )));
    }
    Ok(match &phi.rows {
        SketchRows::Dense(mat) => cov.quad_form(mat),
        SketchRows::Selection(idx) => cov.sub_matrix(idx),
    })
}

/// Applies a sketch to a dataset, producing the compressed triple and its
/// tempering exponent.
pub fn apply_sketch(phi: &SketchMatrix, ds: &FunctionalDataset) -> Result<SketchedData> {
    if phi.n != ds.n() {
        return Err(Error::Dimension(format!(
            "sketch has n = {}, dataset has n = {}",
            phi.n,
            ds.n()
        )));
    }
    let n = ds.n();
    match &phi.rows {
        SketchRows::Selection(idx) => {
            let m = idx.len();
            let y_sk = DMatrix::from_fn(m, ds.s(), |r, s| ds.responses[(idx[r], s)]);
            let x_sk = DMatrix::from_fn(m, ds.q(), |r, j| ds.local_attrs[(idx[r], j)]);
            let ones_sk = DVector::from_element(m, 1.0);
            Ok(SketchedData {
                y_sk,
                x_sk,
                ones_sk,
                power: n as f64 / m as f64,
            })
        }
        SketchRows::Dense(mat) => {
            let m = phi.m;
            // rows are independent; compensated dots keep the federated
            // two-path identity at the ulp level
            let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = exec::map_range(m, |r| {
                let phi_row: Vec<f64> = (0..n).map(|j| mat[(r, j)]).collect();
                let mut y_row = vec![0.0; ds.s()];
                for s in 0..ds.s() {
                    y_row[s] = neumaier_dot(&phi_row, ds.responses.column(s).as_slice());
                }
                let mut x_row = vec![0.0; ds.q()];
                for j in 0..ds.q() {
                    x_row[j] = neumaier_dot(&phi_row, ds.local_attrs.column(j).as_slice());
                }
                let mut ones = NeumaierSum::new();
                for v in &phi_row {
                    ones.add(*v);
                }
                (y_row, x_row, ones.total())
            });
            let mut y_sk = DMatrix::zeros(m, ds.s());
            let mut x_sk = DMatrix::zeros(m, ds.q());
            let mut ones_sk = DVector::zeros(m);
            for (r, (y_row, x_row, ones)) in rows.into_iter().enumerate() {
                for (s, v) in y_row.into_iter().enumerate() {
                    y_sk[(r, s)] = v;
                }
                for (j, v) in x_row.into_iter().enumerate() {
                    x_sk[(r, j)] = v;
                }
                ones_sk[r] = ones;
            }
            Ok(SketchedData {
                y_sk,
                x_sk,
                ones_sk,
                power: n as f64 / m as f64,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn toy_dataset(n: usize, seed: u64) -> FunctionalDataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        FunctionalDataset::new(
            DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 10.0),
            DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>()),
            DMatrix::from_fn(3, 1, |_, _| rng.random::<f64>()),
            DMatrix::from_fn(n, 3, |_, _| rng.random::<f64>() * 4.0 - 2.0),
        )
        .unwrap()
    }

    #[test]
    fn gaussian_sketch_deterministic() {
        let a = gen_gaussian_sketch(20, 100, 7).unwrap();
        let b = gen_gaussian_sketch(20, 100, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_gaussian_sketch(20, 100, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_sketch_rejects_m_not_less_than_n() {
        assert!(gen_gaussian_sketch(10, 10, 0).is_err());
        assert!(gen_gaussian_sketch(11, 10, 0).is_err());
    }

    #[test]
    fn gaussian_entry_variance_near_one_over_n() {
        let m = 500;
        let n = 10_000;
        let phi = gen_gaussian_sketch(m, n, 42).unwrap();
        let SketchRows::Dense(mat) = &phi.rows else {
            panic!()
        };
        let mean: f64 = mat.iter().sum::<f64>() / (m * n) as f64;
        let var: f64 = mat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m * n) as f64;
        let target = 1.0 / n as f64;
        assert!(
            (var - target).abs() / target < 0.05,
            "var {var:e} vs {target:e}"
        );
    }

    #[test]
    fn gaussian_row_norms_concentrate() {
        // E||row||^2 = n * (1/n) = 1
        let n = 10_000;
        let mut mean_sq = 0.0;
        let mut count = 0;
        for seed in 0..3 {
            let phi = gen_gaussian_sketch(30, n, 1000 + seed).unwrap();
            let SketchRows::Dense(mat) = &phi.rows else {
                panic!()
            };
            for r in 0..30 {
                mean_sq += mat.row(r).norm_squared();
                count += 1;
            }
        }
        mean_sq /= count as f64;
        assert!((0.9..=1.1).contains(&mean_sq), "mean sq row norm {mean_sq}");
    }

    #[test]
    fn subdomain_partition_exact() {
        let n = 100;
        let ds = toy_dataset(n, 5);
        let sketches =
            gen_partition_sketch(PartitionKind::Subdomain, &ds.locations, 25, 1).unwrap();
        assert_eq!(sketches.len(), 4);
        let mut seen = vec![false; n];
        for sk in &sketches {
            let SketchRows::Selection(idx) = &sk.rows else {
                panic!()
            };
            for &i in idx {
                assert!(!seen[i], "index {i} appears twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn stratified_subsets_touch_every_cell() {
        let n = 400;
        let ds = toy_dataset(n, 6);
        let sketches =
            gen_partition_sketch(PartitionKind::Stratified, &ds.locations, 100, 2).unwrap();
        assert_eq!(sketches.len(), 4);
        let SketchKind::SelectionStratified { grid } = &sketches[0].kind else {
            panic!()
        };
        // recompute cell assignment and check every subset hits every cell
        let mut mins = [f64::INFINITY; 2];
        let mut maxs = [f64::NEG_INFINITY; 2];
        for i in 0..n {
            for c in 0..2 {
                mins[c] = mins[c].min(ds.locations[(i, c)]);
                maxs[c] = maxs[c].max(ds.locations[(i, c)]);
            }
        }
        let cell_of = |i: usize| {
            let mut cell = 0;
            for c in 0..2 {
                let frac = (ds.locations[(i, c)] - mins[c]) / (maxs[c] - mins[c]);
                let b = ((frac * grid[c] as f64) as usize).min(grid[c] - 1);
                cell = cell * grid[c] + b;
            }
            cell
        };
        let total_cells: usize = grid.iter().product();
        for sk in &sketches {
            let SketchRows::Selection(idx) = &sk.rows else {
                panic!()
            };
            let mut touched = vec![false; total_cells];
            for &i in idx {
                touched[cell_of(i)] = true;
            }
            assert!(touched.iter().all(|&t| t), "subset misses a cell");
        }
        // exact partition
        let mut seen = vec![false; n];
        for sk in &sketches {
            let SketchRows::Selection(idx) = &sk.rows else {
                panic!()
            };
            for &i in idx {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn identity_selection_sketch_is_lossless() {
        let ds = toy_dataset(30, 9);
        let phi = SketchMatrix {
            kind: SketchKind::SelectionSubdomain { grid: vec![1, 1] },
            m: 30,
            n: 30,
            seed: 0,
            rows: SketchRows::Selection((0..30).collect()),
        };
        let sk = apply_sketch(&phi, &ds).unwrap();
        assert_eq!(sk.y_sk, ds.responses);
        assert_eq!(sk.x_sk, ds.local_attrs);
        assert_eq!(sk.power, 1.0);
    }

    #[test]
    fn sketch_application_linear_in_responses() {
        let ds = toy_dataset(40, 11);
        let mut ds2 = ds.clone();
        ds2.responses *= 2.0;
        let mut ds_sum = ds.clone();
        ds_sum.responses = &ds.responses + &ds2.responses;
        let phi = gen_gaussian_sketch(8, 40, 3).unwrap();
        let a = apply_sketch(&phi, &ds).unwrap();
        let b = apply_sketch(&phi, &ds2).unwrap();
        let c = apply_sketch(&phi, &ds_sum).unwrap();
        assert_relative_eq!(&a.y_sk + &b.y_sk, c.y_sk, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_sketch_full_rank() {
        // underdetermination premise: smallest singular value bounded away
        // from zero relative to the largest
        for (m, n, seed) in [(50, 500, 1u64), (120, 800, 2), (200, 1200, 3)] {
            let phi = gen_gaussian_sketch(m, n, seed).unwrap();
            let SketchRows::Dense(mat) = &phi.rows else {
                panic!()
            };
            let svd = mat.clone().svd(false, false);
            let max = svd.singular_values.max();
            let min = svd.singular_values.min();
            assert!(min > 1e-8 * max, "rank deficient: {min} vs {max}");
        }
    }

    #[test]
    fn sketched_data_round_trip() {
        let ds = toy_dataset(50, 13);
        let phi = gen_gaussian_sketch(10, 50, 4).unwrap();
        let sk = apply_sketch(&phi, &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sk.bin");
        sk.save(&path).unwrap();
        let back = SketchedData::load(&path).unwrap();
        assert_eq!(sk, back);
    }

    #[test]
    fn power_is_n_over_m() {
        let ds = toy_dataset(60, 17);
        let phi = gen_gaussian_sketch(12, 60, 4).unwrap();
        assert_eq!(apply_sketch(&phi, &ds).unwrap().power, 5.0);
        let parts = gen_partition_sketch(PartitionKind::Subdomain, &ds.locations, 15, 0).unwrap();
        for p in &parts {
            let sk = apply_sketch(&p, &ds).unwrap();
            assert_eq!(sk.power, 60.0 / p.m as f64);
        }
    }

    #[test]
    fn factor_grid_near_square() {
        assert_eq!(factor_grid(4, 2), vec![2, 2]);
        assert_eq!(factor_grid(20, 2), vec![4, 5]);
        assert_eq!(factor_grid(7, 2), vec![1, 7]);
        assert_eq!(factor_grid(8, 3), vec![2, 2, 2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn regeneration_bit_identical(m in 2usize..12, extra in 1usize..40, seed in 0u64..1000) {
            let n = m + extra;
            let a = gen_gaussian_sketch(m, n, seed).unwrap();
            let b = gen_gaussian_sketch(m, n, seed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn partitions_are_exact(n in 30usize..120, m_target in 5usize..40, seed in 0u64..50) {
            let locs = {
                let mut rng = ChaCha12Rng::seed_from_u64(seed + 999);
                DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 10.0)
            };
            for kind in [PartitionKind::Subdomain, PartitionKind::Stratified] {
                let sketches = gen_partition_sketch(kind, &locs, m_target.min(n), seed).unwrap();
                let mut seen = vec![false; n];
                for sk in &sketches {
                    let SketchRows::Selection(idx) = &sk.rows else { panic!() };
                    for &i in idx {
                        prop_assert!(!seen[i]);
                        seen[i] = true;
                    }
                }
                prop_assert!(seen.iter().all(|&b| b));
            }
        }
    }

    #[test]
    fn quad_form_routes_agree() {
        use crate::kernels::{build_full_gp, CovarianceOperator, DENSE_CAP_DEFAULT};
        let ds = toy_dataset(50, 23);
        let cov = build_full_gp(&ds.locations, 1.5, DENSE_CAP_DEFAULT).unwrap();
        let sel = SketchMatrix {
            kind: SketchKind::SelectionSubdomain { grid: vec![1, 1] },
            m: 10,
            n: 50,
            seed: 0,
            rows: SketchRows::Selection((0..50).step_by(5).collect()),
        };
        let via_sub = sketch_quad_form(&sel, &cov).unwrap();
        let via_dense = cov.quad_form(&sel.to_dense());
        assert_relative_eq!(via_sub, via_dense, epsilon = 1e-10);
        let gauss = gen_gaussian_sketch(6, 50, 1).unwrap();
        let g1 = sketch_quad_form(&gauss, &cov).unwrap();
        let SketchRows::Dense(mat) = &gauss.rows else {
            panic!()
        };
        assert_eq!(g1, cov.quad_form(mat));
    }

    #[test]
    fn dense_view_of_selection() {
        let phi = SketchMatrix {
            kind: SketchKind::SelectionSubdomain { grid: vec![1] },
            m: 2,
            n: 4,
            seed: 0,
            rows: SketchRows::Selection(vec![1, 3]),
        };
        assert_eq!(
            phi.to_dense(),
            dmatrix![0.0, 1.0, 0.0, 0.0; 0.0, 0.0, 0.0, 1.0]
        );
    }
}
