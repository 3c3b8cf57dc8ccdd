//! Collaborative posterior: the one-dimensional Wasserstein barycenter of the
//! sketched posteriors, computed per scalar functional by averaging empirical
//! quantile functions over a fine grid in (0, 1).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;

use crate::binfmt;
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::seeded_rng;
use crate::sampler::SketchedPosterior;

const COLLAB_MAGIC: &[u8; 8] = b"GPSKCOLL";
const COLLAB_VERSION: u64 = 1;

/// Strictly increasing quantile levels inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileGrid {
    xi: Vec<f64>,
}

impl QuantileGrid {
    /// The default fine grid 0.0005, 0.0010, ..., 0.9995; its resolution
    /// puts the 0.025/0.5/0.975 summary levels exactly on grid points.
    pub fn default_fine() -> Self {
        let step = 0.0005;
        let count = 1999;
        QuantileGrid {
            xi: (1..=count).map(|i| i as f64 * step).collect(),
        }
    }

    pub fn from_levels(xi: Vec<f64>) -> Result<Self> {
        if xi.is_empty() {
            return Err(Error::InvalidArgument("empty quantile grid".into()));
        }
        for w in xi.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidArgument(
                    "quantile grid must be strictly increasing".into(),
                ));
            }
        }
        if !(xi[0] > 0.0) || !(xi[xi.len() - 1] < 1.0) {
            return Err(Error::InvalidArgument(
                "quantile levels must lie strictly inside (0, 1)".into(),
            ));
        }
        Ok(QuantileGrid { xi })
    }

    pub fn levels(&self) -> &[f64] {
        &self.xi
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    /// Index of the grid point closest to `level`.
    pub fn nearest(&self, level: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &x) in self.xi.iter().enumerate() {
            let d = (x - level).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Type-7 (linear interpolation) empirical quantiles of `draws` at every
/// grid level. Output is non-decreasing in the level.
pub fn empirical_quantiles(draws: &[f64], grid: &QuantileGrid) -> Result<Vec<f64>> {
    if draws.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two draws for empirical quantiles".into(),
        ));
    }
    if draws.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite draw".into()));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(quantiles_of_sorted(&sorted, grid))
}

pub(crate) fn quantiles_of_sorted(sorted: &[f64], grid: &QuantileGrid) -> Vec<f64> {
    let l = sorted.len();
    grid.levels()
        .iter()
        .map(|&xi| {
            let h = (l - 1) as f64 * xi;
            let lo = h.floor() as usize;
            let frac = h - lo as f64;
            if lo + 1 < l {
                sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
            } else {
                sorted[l - 1]
            }
        })
        .collect()
}

/// Scalar functionals of a sketched posterior that can be combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamFunctional {
    Beta(usize),
    Gamma(usize),
    Sigma2,
    Tau2,
}

impl ParamFunctional {
    /// Canonical names: `beta1..betaq`, `gamma1..gammap`, `sigma2`, `tau2`.
    pub fn name(&self) -> String {
        match self {
            ParamFunctional::Beta(i) => format!("beta{}", i + 1),
            ParamFunctional::Gamma(i) => format!("gamma{}", i + 1),
            ParamFunctional::Sigma2 => "sigma2".to_string(),
            ParamFunctional::Tau2 => "tau2".to_string(),
        }
    }

    pub fn all_for(q: usize, p: usize) -> Vec<ParamFunctional> {
        let mut out = Vec::with_capacity(q + p + 2);
        out.extend((0..q).map(ParamFunctional::Beta));
        out.extend((0..p).map(ParamFunctional::Gamma));
        out.push(ParamFunctional::Sigma2);
        out.push(ParamFunctional::Tau2);
        out
    }

    pub fn extract(&self, post: &SketchedPosterior) -> Result<DVector<f64>> {
        match self {
            ParamFunctional::Beta(i) => {
                if *i >= post.q {
                    return Err(Error::InvalidArgument(format!(
                        "beta index {i} out of range (q = {})",
                        post.q
                    )));
                }
                Ok(post.beta(*i))
            }
            ParamFunctional::Gamma(i) => {
                if *i >= post.p {
                    return Err(Error::InvalidArgument(format!(
                        "gamma index {i} out of range (p = {})",
                        post.p
                    )));
                }
                Ok(post.gamma(*i))
            }
            ParamFunctional::Sigma2 => Ok(post.sigma2()),
            ParamFunctional::Tau2 => Ok(post.tau2()),
        }
    }
}

/// Pointwise mean of per-sketch quantile vectors. The per-level values are
/// summed in sorted order, so the result is bitwise invariant to permutations
/// of the posterior list.
pub fn average_quantile_vectors(per_sketch: &[Vec<f64>]) -> Result<Vec<f64>> {
    let h = per_sketch.len();
    if h == 0 {
        return Err(Error::InvalidArgument("no quantile vectors".into()));
    }
    let len = per_sketch[0].len();
    if per_sketch.iter().any(|v| v.len() != len) {
        return Err(Error::Dimension("quantile vectors differ in length".into()));
    }
    let mut out = vec![0.0; len];
    let mut vals = vec![0.0; h];
    for (g, slot) in out.iter_mut().enumerate() {
        for (j, v) in per_sketch.iter().enumerate() {
            vals[j] = v[g];
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        *slot = vals.iter().sum::<f64>() / h as f64;
    }
    Ok(out)
}

/// Quantile vector of the collaborative posterior for one functional.
pub fn combine_quantiles(
    posteriors: &[SketchedPosterior],
    functional: ParamFunctional,
    grid: &QuantileGrid,
) -> Result<Vec<f64>> {
    if posteriors.is_empty() {
        return Err(Error::InvalidArgument("no posteriors to combine".into()));
    }
    let per_sketch = posteriors
        .iter()
        .map(|post| {
            let draws = functional.extract(post)?;
            empirical_quantiles(draws.as_slice(), grid)
        })
        .collect::<Result<Vec<_>>>()?;
    average_quantile_vectors(&per_sketch)
}

/// Streaming accumulator for quantile averaging over many functionals, used
/// for predictive combination where holding all draw sets at once would be
/// wasteful.
pub struct QuantileAccumulator {
    grid: QuantileGrid,
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl QuantileAccumulator {
    pub fn new(grid: QuantileGrid, n_functionals: usize) -> Self {
        let len = grid.len();
        QuantileAccumulator {
            grid,
            sums: vec![vec![0.0; len]; n_functionals],
            count: 0,
        }
    }

    /// Adds one posterior's draw set per functional; `draws_of` maps the
    /// functional index to its draws.
    pub fn add_posterior<F>(&mut self, draws_of: F) -> Result<()>
    where
        F: Fn(usize) -> Vec<f64> + Sync + Send,
    {
        let grid = &self.grid;
        let new_quantiles: Vec<Result<Vec<f64>>> =
            exec::map_range(self.sums.len(), |j| empirical_quantiles(&draws_of(j), grid));
        for (sum, nq) in self.sums.iter_mut().zip(new_quantiles) {
            for (s, v) in sum.iter_mut().zip(nq?) {
                *s += v;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Averaged quantile vector for one functional.
    pub fn averaged(&self, j: usize) -> Vec<f64> {
        self.sums[j].iter().map(|s| s / self.count as f64).collect()
    }
}

/// Summary read off the averaged quantile function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

/// The combined posterior: per-functional averaged quantile vectors on a
/// shared grid, with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct CollaborativePosterior {
    pub grid: QuantileGrid,
    pub functionals: BTreeMap<String, Vec<f64>>,
    pub h_count: usize,
    pub sketch_ids: Vec<usize>,
    pub thetas: Vec<f64>,
}

impl CollaborativePosterior {
    /// Combines the registered parameter functionals of `posteriors`.
    pub fn from_posteriors(posteriors: &[SketchedPosterior], grid: QuantileGrid) -> Result<Self> {
        if posteriors.is_empty() {
            return Err(Error::InvalidArgument("no posteriors to combine".into()));
        }
        let q = posteriors[0].q;
        let p = posteriors[0].p;
        if posteriors.iter().any(|po| po.q != q || po.p != p) {
            return Err(Error::Dimension(
                "posteriors disagree on coefficient dimensions".into(),
            ));
        }
        let funcs = ParamFunctional::all_for(q, p);
        let combined: Vec<Result<Vec<f64>>> =
            exec::map_slice(&funcs, |f| combine_quantiles(posteriors, *f, &grid));
        let mut functionals = BTreeMap::new();
        for (f, c) in funcs.iter().zip(combined) {
            functionals.insert(f.name(), c?);
        }
        Ok(CollaborativePosterior {
            grid,
            functionals,
            h_count: posteriors.len(),
            sketch_ids: posteriors.iter().map(|p| p.sketch_id).collect(),
            thetas: posteriors.iter().map(|p| p.theta).collect(),
        })
    }

    pub fn insert(&mut self, name: String, quantiles: Vec<f64>) -> Result<()> {
        if quantiles.len() != self.grid.len() {
            return Err(Error::Dimension(
                "quantile vector length differs from grid".into(),
            ));
        }
        self.functionals.insert(name, quantiles);
        Ok(())
    }

    pub fn quantiles(&self, functional: &str) -> Result<&Vec<f64>> {
        self.functionals
            .get(functional)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown functional {functional:?}")))
    }

    /// Inverse-CDF sampling: uniform levels over the grid range, linear
    /// interpolation of the averaged quantile function.
    pub fn sample(&self, functional: &str, count: usize, seed: u64) -> Result<Vec<f64>> {
        let q = self.quantiles(functional)?;
        Ok(sample_from_quantiles(q, self.grid.levels(), count, seed))
    }

    /// Median and central 95% interval at the grid points nearest to
    /// 0.025, 0.5, 0.975.
    pub fn summarize(&self, functional: &str) -> Result<Summary> {
        let q = self.quantiles(functional)?;
        Ok(Summary {
            median: q[self.grid.nearest(0.5)],
            ci95_low: q[self.grid.nearest(0.025)],
            ci95_high: q[self.grid.nearest(0.975)],
        })
    }

    /// Writes `functional, xi, value` rows (density-plot data).
    pub fn save_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        if let Some(c) = comment {
            writeln!(w, "# {c}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(w, "functional,xi,value").map_err(|e| Error::io(path, e))?;
        for (name, quants) in &self.functionals {
            for (xi, v) in self.grid.levels().iter().zip(quants) {
                writeln!(w, "{name},{xi},{v}").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn save_bin(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        binfmt::write_u64(&mut w, path, binfmt::magic(COLLAB_MAGIC))?;
        binfmt::write_u64(&mut w, path, COLLAB_VERSION)?;
        binfmt::write_u64(&mut w, path, self.h_count as u64)?;
        binfmt::write_u64(&mut w, path, self.functionals.len() as u64)?;
        binfmt::write_u64(&mut w, path, self.grid.len() as u64)?;
        binfmt::write_u64(&mut w, path, self.sketch_ids.len() as u64)?;
        for &id in &self.sketch_ids {
            binfmt::write_u64(&mut w, path, id as u64)?;
        }
        for &t in &self.thetas {
            binfmt::write_f64(&mut w, path, t)?;
        }
        for &xi in self.grid.levels() {
            binfmt::write_f64(&mut w, path, xi)?;
        }
        for (name, quants) in &self.functionals {
            let bytes = name.as_bytes();
            binfmt::write_u64(&mut w, path, bytes.len() as u64)?;
            w.write_all(bytes).map_err(|e| Error::io(path, e))?;
            for &v in quants {
                binfmt::write_f64(&mut w, path, v)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_bin(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        binfmt::expect_magic(&mut r, path, binfmt::magic(COLLAB_MAGIC), "collaborative")?;
        let version = binfmt::read_u64(&mut r, path)?;
        if version != COLLAB_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let h_count = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "H")?;
        let n_func = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "n_func")?;
        let grid_len = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "grid")?;
        let n_ids = binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "ids")?;
        let mut sketch_ids = Vec::with_capacity(n_ids);
        for _ in 0..n_ids {
            sketch_ids.push(binfmt::checked_usize(
                binfmt::read_u64(&mut r, path)?,
                path,
                "id",
            )?);
        }
        let mut thetas = Vec::with_capacity(n_ids);
        for _ in 0..n_ids {
            thetas.push(binfmt::read_f64(&mut r, path)?);
        }
        let mut xi = Vec::with_capacity(grid_len);
        for _ in 0..grid_len {
            xi.push(binfmt::read_f64(&mut r, path)?);
        }
        let grid = QuantileGrid::from_levels(xi)?;
        let mut functionals = BTreeMap::new();
        for _ in 0..n_func {
            let name_len =
                binfmt::checked_usize(binfmt::read_u64(&mut r, path)?, path, "name len")?;
            let mut buf = vec![0u8; name_len];
            std::io::Read::read_exact(&mut r, &mut buf).map_err(|e| Error::io(path, e))?;
            let name = String::from_utf8(buf)
                .map_err(|_| Error::format(path, "functional name not utf-8"))?;
            let mut quants = Vec::with_capacity(grid_len);
            for _ in 0..grid_len {
                quants.push(binfmt::read_f64(&mut r, path)?);
            }
            functionals.insert(name, quants);
        }
        Ok(CollaborativePosterior {
            grid,
            functionals,
            h_count,
            sketch_ids,
            thetas,
        })
    }
}

/// Inverse-CDF draws from a piecewise-linear quantile function.
pub fn sample_from_quantiles(
    quantiles: &[f64],
    levels: &[f64],
    count: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = seeded_rng(seed, 3);
    let lo = levels[0];
    let hi = levels[levels.len() - 1];
    (0..count)
        .map(|_| {
            let xi = lo + rng.random::<f64>() * (hi - lo);
            interpolate_quantile(quantiles, levels, xi)
        })
        .collect()
}

fn interpolate_quantile(quantiles: &[f64], levels: &[f64], xi: f64) -> f64 {
    match levels.binary_search_by(|l| l.partial_cmp(&xi).unwrap()) {
        Ok(i) => quantiles[i],
        Err(0) => quantiles[0],
        Err(i) if i >= levels.len() => quantiles[levels.len() - 1],
        Err(i) => {
            let t = (xi - levels[i - 1]) / (levels[i] - levels[i - 1]);
            quantiles[i - 1] + t * (quantiles[i] - quantiles[i - 1])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn posterior_from_column(values: Vec<f64>) -> SketchedPosterior {
        let l = values.len();
        let mut draws = DMatrix::zeros(l, 3);
        for (i, v) in values.iter().enumerate() {
            draws[(i, 0)] = *v;
            draws[(i, 1)] = v + 1.0;
            draws[(i, 2)] = v.abs() + 0.5;
        }
        SketchedPosterior {
            sketch_id: 0,
            theta: 1.0,
            power: 2.0,
            q: 1,
            p: 0,
            draws,
            accept_sigma2: 0.3,
            accept_tau2: 0.3,
            chain_seed: 0,
        }
    }

    #[test]
    fn two_point_median_interpolates() {
        let grid = QuantileGrid::from_levels(vec![0.5]).unwrap();
        let q = empirical_quantiles(&[0.0, 1.0], &grid).unwrap();
        assert_eq!(q, vec![0.5]);
    }

    #[test]
    fn constant_draws_give_constant_quantiles() {
        let grid = QuantileGrid::default_fine();
        let q = empirical_quantiles(&[3.25; 40], &grid).unwrap();
        assert!(q.iter().all(|&v| v == 3.25));
    }

    #[test]
    fn quantiles_match_sort_and_index_oracle() {
        let mut rng = seeded_rng(5, 0);
        let draws: Vec<f64> = (0..57).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let grid = QuantileGrid::default_fine();
        let got = empirical_quantiles(&draws, &grid).unwrap();
        // brute-force type-7 oracle
        let mut sorted = draws.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (g, &xi) in grid.levels().iter().enumerate() {
            let h = (sorted.len() - 1) as f64 * xi;
            let lo = h.floor() as usize;
            let frac = h - lo as f64;
            let expected = if lo + 1 < sorted.len() {
                sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
            } else {
                sorted[sorted.len() - 1]
            };
            assert_abs_diff_eq!(got[g], expected, epsilon = 1e-12);
        }
        // monotone
        for w in got.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn default_grid_contains_summary_levels() {
        let grid = QuantileGrid::default_fine();
        assert_eq!(grid.len(), 1999);
        for level in [0.025, 0.5, 0.975] {
            let idx = grid.nearest(level);
            assert_abs_diff_eq!(grid.levels()[idx], level, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_posterior_combination_is_identity() {
        let post = posterior_from_column(vec![0.1, 0.7, -0.4, 1.9, 0.3, 0.2, 1.1, -2.0]);
        let grid = QuantileGrid::default_fine();
        let own = empirical_quantiles(post.beta(0).as_slice(), &grid).unwrap();
        let combined =
            combine_quantiles(std::slice::from_ref(&post), ParamFunctional::Beta(0), &grid)
                .unwrap();
        assert_eq!(own, combined);
    }

    #[test]
    fn point_mass_average() {
        let a = posterior_from_column(vec![2.0; 10]);
        let b = posterior_from_column(vec![6.0; 10]);
        let grid = QuantileGrid::default_fine();
        let combined = combine_quantiles(&[a, b], ParamFunctional::Beta(0), &grid).unwrap();
        assert!(combined.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn permutation_invariance_exact() {
        let mut rng = seeded_rng(9, 0);
        let posts: Vec<SketchedPosterior> = (0..5)
            .map(|_| posterior_from_column((0..30).map(|_| rng.random::<f64>() * 4.0).collect()))
            .collect();
        let grid = QuantileGrid::default_fine();
        let base = combine_quantiles(&posts, ParamFunctional::Beta(0), &grid).unwrap();
        let mut perm = posts.clone();
        perm.reverse();
        perm.swap(0, 2);
        let permuted = combine_quantiles(&perm, ParamFunctional::Beta(0), &grid).unwrap();
        assert_eq!(base, permuted);
    }

    #[test]
    fn collaborative_posterior_summary_and_sampling() {
        let mut rng = seeded_rng(11, 0);
        let posts: Vec<SketchedPosterior> = (0..4)
            .map(|_| {
                posterior_from_column(
                    (0..400)
                        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                        .collect(),
                )
            })
            .collect();
        let cp =
            CollaborativePosterior::from_posteriors(&posts, QuantileGrid::default_fine()).unwrap();
        let s = cp.summarize("beta1").unwrap();
        assert!(s.median.abs() < 0.2);
        assert!(s.ci95_low < s.median && s.median < s.ci95_high);

        // sampled median self-consistency: within two grid steps of the
        // averaged 0.5 quantile
        let draws = cp.sample("beta1", 100_000, 7).unwrap();
        let mut sorted = draws.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = sorted[sorted.len() / 2];
        let grid_step_value = {
            let g = cp.grid.nearest(0.5);
            (cp.quantiles("beta1").unwrap()[g + 2] - cp.quantiles("beta1").unwrap()[g - 2]) / 2.0
        };
        assert!(
            (med - s.median).abs() <= grid_step_value.abs().max(0.01),
            "sampled median {med} vs {}",
            s.median
        );

        // degenerate quantiles sample degenerately, and seeds reproduce
        let mut cp2 = cp.clone();
        cp2.insert("const".into(), vec![1.5; cp.grid.len()]).unwrap();
        assert!(cp2
            .sample("const", 100, 1)
            .unwrap()
            .iter()
            .all(|&v| v == 1.5));
        assert_eq!(
            cp.sample("beta1", 50, 3).unwrap(),
            cp.sample("beta1", 50, 3).unwrap()
        );
    }

    #[test]
    fn collaborative_round_trip() {
        let posts: Vec<SketchedPosterior> = (0..3)
            .map(|i| posterior_from_column((0..20).map(|j| (i * j) as f64 * 0.1).collect()))
            .collect();
        let cp =
            CollaborativePosterior::from_posteriors(&posts, QuantileGrid::default_fine()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("cp.bin");
        cp.save_bin(&bin).unwrap();
        let back = CollaborativePosterior::load_bin(&bin).unwrap();
        assert_eq!(cp, back);
        let csv = dir.path().join("cp.csv");
        cp.save_csv(&csv, Some("config=deadbeef")).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("# config=deadbeef\nfunctional,xi,value\n"));
    }

    #[test]
    fn missing_functional_is_an_error() {
        let post = posterior_from_column(vec![0.0, 1.0]);
        let grid = QuantileGrid::default_fine();
        assert!(combine_quantiles(&[post], ParamFunctional::Beta(2), &grid).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn location_equivariance(
            shift in -50.0f64..50.0,
            seed in 0u64..500,
            h in 1usize..5,
        ) {
            let mut rng = seeded_rng(seed, 1);
            let grid = QuantileGrid::from_levels((1..100).map(|i| i as f64 / 100.0).collect()).unwrap();
            let sets: Vec<Vec<f64>> = (0..h)
                .map(|_| (0..40).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect())
                .collect();
            let base: Vec<Vec<f64>> = sets
                .iter()
                .map(|s| empirical_quantiles(s, &grid).unwrap())
                .collect();
            let shifted: Vec<Vec<f64>> = sets
                .iter()
                .map(|s| {
                    let moved: Vec<f64> = s.iter().map(|v| v + shift).collect();
                    empirical_quantiles(&moved, &grid).unwrap()
                })
                .collect();
            let a = average_quantile_vectors(&base).unwrap();
            let b = average_quantile_vectors(&shifted).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                // exact up to floating-point rounding of the shift
                prop_assert!((x + shift - y).abs() <= 1e-12 * (1.0 + x.abs() + shift.abs()));
            }
        }

        #[test]
        fn combined_quantiles_monotone(seed in 0u64..500, h in 1usize..6) {
            let mut rng = seeded_rng(seed, 2);
            let grid = QuantileGrid::default_fine();
            let sets: Vec<Vec<f64>> = (0..h)
                .map(|_| (0..30).map(|_| rng.random::<f64>() * 9.0).collect())
                .collect();
            let per: Vec<Vec<f64>> = sets.iter().map(|s| empirical_quantiles(s, &grid).unwrap()).collect();
            let avg = average_quantile_vectors(&per).unwrap();
            for w in avg.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }
    }
}
