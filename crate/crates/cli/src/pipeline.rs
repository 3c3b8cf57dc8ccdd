//! Orchestration of the pipeline stages: simulate, fit, combine, predict,
//! eval. Each stage reads the artifacts of the previous one from the output
//! directory and stamps everything it writes with the config hash.

use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use gpsketch::combine::{CollaborativePosterior, QuantileAccumulator, QuantileGrid};
use gpsketch::data::{
    load_dataset, save_dataset, FileFormat, FunctionalDataset, PredictionMode, PredictionRequest,
};
use gpsketch::error::{Error, Result};
use gpsketch::exec;
use gpsketch::kernels::{build_operator, CovarianceOperator};
use gpsketch::metrics::{EvalReport, ThresholdRule};
use gpsketch::predict::{
    composition_sample, plan_new_simulation, plan_within_simulation, PredictiveDraws,
    PredictivePlan,
};
use gpsketch::sampler::{
    run_chain, save_posterior, load_posterior, PosteriorFile, SketchedPosterior,
};
use gpsketch::simgen::{self, SimConfig, SloshLikeConfig};
use gpsketch::sketch::{
    apply_sketch, gen_gaussian_sketch, gen_partition_sketch, sketch_quad_form, PartitionKind,
    SketchMatrix,
};

use crate::config::{
    PredictModeKey, RunConfig, SimulateKind, SketchKindKey,
};

/// Runs `f` inside a rayon pool of the requested size (parallel builds) or
/// directly (sequential builds).
pub fn install_pool<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if let Some(w) = workers {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .expect("worker pool");
            return pool.install(f);
        }
    }
    let _ = workers;
    f()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub struct SimulateOutputs {
    pub train: PathBuf,
    pub test: PathBuf,
    pub truth: PathBuf,
}

pub fn run_simulate(cfg: &RunConfig) -> Result<SimulateOutputs> {
    let out = &cfg.output.dir;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let sim = &cfg.simulate;
    let (train, test, truth) = match sim.kind {
        SimulateKind::Paper => {
            let d = sim.domain_min.len();
            let sim_cfg = SimConfig {
                n: sim.n,
                n0: sim.n0,
                s: sim.s,
                s0: sim.s0,
                d,
                p: sim.gamma0.len(),
                q: sim.beta0.len(),
                gamma0: sim.gamma0.clone(),
                beta0: sim.beta0.clone(),
                sigma2_0: sim.sigma2_0,
                tau2_0: sim.tau2_0,
                theta0: sim.theta0,
                domain: (sim.domain_min.clone(), sim.domain_max.clone()),
                seed: cfg.seed,
                dense_cap: sim.dense_cap,
                fallback_knots: sim.fallback_knots,
            };
            simgen::generate(&sim_cfg)?
        }
        SimulateKind::SloshLike => {
            let slosh_cfg = SloshLikeConfig {
                n: sim.n,
                n0: sim.n0,
                s: sim.s,
                s0: sim.s0,
                seed: cfg.seed,
                sigma2_0: sim.sigma2_0,
                tau2_0: sim.tau2_0,
                theta0: sim.theta0,
                fallback_knots: sim.fallback_knots,
            };
            simgen::generate_slosh_like(&slosh_cfg)?
        }
    };
    let format: FileFormat = cfg.data.format.into();
    let ext = match format {
        FileFormat::Bin => "bin",
        FileFormat::Csv => "csv",
    };
    let train_path = out.join(format!("train.{ext}"));
    let test_path = out.join(format!("test.{ext}"));
    let truth_path = out.join("truth.csv");
    save_dataset(&train, &train_path, format)?;
    save_dataset(&test, &test_path, format)?;
    truth.save_csv(&truth_path, Some(&format!("config={}", cfg.hash_hex())))?;
    Ok(SimulateOutputs {
        train: train_path,
        test: test_path,
        truth: truth_path,
    })
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FailedChain {
    pub h: usize,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitManifest {
    pub config_hash: String,
    pub dataset: PathBuf,
    pub format: String,
    pub n: usize,
    pub q: usize,
    pub p: usize,
    pub s: usize,
    pub sketch_kind: String,
    pub h_count: usize,
    pub m: usize,
    pub base_seed: u64,
    pub sketch_seeds: Vec<u64>,
    pub chain_seeds: Vec<u64>,
    pub thetas: Vec<f64>,
    pub posteriors: Vec<String>,
    pub failed: Vec<FailedChain>,
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("fit_manifest.json")
}

pub fn posterior_file_name(h: usize) -> String {
    format!("posterior_h{h:03}.bin")
}

pub fn predictive_file_name(h: usize) -> String {
    format!("predictive_h{h:03}.bin")
}

/// Builds the per-sketch matrices for a fit: Gaussian sketches regenerate
/// from seeds; partition baselines split the domain once.
pub fn build_sketches(cfg: &RunConfig, ds: &FunctionalDataset) -> Result<(Vec<SketchMatrix>, usize)> {
    let n = ds.n();
    let m = cfg.sketch.m.resolve(n)?;
    match cfg.sketch.kind {
        SketchKindKey::Gaussian => {
            if m >= n {
                return Err(Error::Config(format!(
                    "resolved m = {m} must be < n = {n} for Gaussian sketches"
                )));
            }
            let sketches = (0..cfg.sketch.h)
                .map(|h| gen_gaussian_sketch(m, n, cfg.sketch_seed(h)))
                .collect::<Result<Vec<_>>>()?;
            Ok((sketches, m))
        }
        SketchKindKey::Subdomain => Ok((
            gen_partition_sketch(PartitionKind::Subdomain, &ds.locations, m, cfg.seed)?,
            m,
        )),
        SketchKindKey::Stratified => Ok((
            gen_partition_sketch(PartitionKind::Stratified, &ds.locations, m, cfg.seed)?,
            m,
        )),
    }
}

/// Covariance operators for the per-sketch length-scales, built once per
/// distinct value.
pub fn operators_for_thetas(
    cfg: &RunConfig,
    locations: &DMatrix<f64>,
    thetas: &[f64],
) -> Result<Vec<Arc<Box<dyn CovarianceOperator>>>> {
    let spec = cfg.kernel_spec();
    let mut unique: Vec<(u64, Arc<Box<dyn CovarianceOperator>>)> = Vec::new();
    let mut out = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let key = theta.to_bits();
        let found = unique.iter().find(|(k, _)| *k == key).map(|(_, op)| op.clone());
        let op = match found {
            Some(op) => op,
            None => {
                let op = Arc::new(build_operator(
                    locations,
                    &spec,
                    theta,
                    cfg.covariance.dense_cap,
                )?);
                unique.push((key, op.clone()));
                op
            }
        };
        out.push(op);
    }
    Ok(out)
}

pub struct FitOutputs {
    pub manifest: FitManifest,
    pub manifest_file: PathBuf,
}

pub fn run_fit(cfg: &RunConfig) -> Result<FitOutputs> {
    let out = &cfg.output.dir;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let train_path = cfg.train_path()?;
    let ds = load_dataset(&train_path, cfg.data.format.into())?;
    let (sketches, m) = build_sketches(cfg, &ds)?;
    let h_count = sketches.len();
    let thetas = cfg.covariance.theta.resolve(h_count)?;
    let operators = operators_for_thetas(cfg, &ds.locations, &thetas)?;
    fit_sketches(cfg, &ds, &train_path, sketches, m, thetas, operators)
}

/// The common back half of a fit: apply sketches, run chains in parallel,
/// write posterior files and the manifest.
pub fn fit_sketches(
    cfg: &RunConfig,
    ds: &FunctionalDataset,
    dataset_path: &Path,
    sketches: Vec<SketchMatrix>,
    m: usize,
    thetas: Vec<f64>,
    operators: Vec<Arc<Box<dyn CovarianceOperator>>>,
) -> Result<FitOutputs> {
    let out = &cfg.output.dir;
    let h_count = sketches.len();
    let hash = cfg.hash();
    let priors = (&cfg.priors).into();

    let results: Vec<std::result::Result<String, (usize, String)>> =
        exec::map_range(h_count, |h| {
            let phi = &sketches[h];
            let run = || -> Result<String> {
                let sk = apply_sketch(phi, ds)?;
                let quad = sketch_quad_form(phi, operators[h].as_ref().as_ref())?;
                let chain_cfg = cfg.chain.to_chain_config(cfg.chain_seed(h));
                let posterior = run_chain(
                    &sk,
                    &quad,
                    &ds.global_attrs,
                    priors,
                    &chain_cfg,
                    h,
                    thetas[h],
                )?;
                let name = posterior_file_name(h);
                save_posterior(
                    &out.join(&name),
                    &PosteriorFile {
                        posterior,
                        priors,
                        config: chain_cfg,
                        sketch_seed: phi.seed,
                        config_hash: hash,
                    },
                )?;
                Ok(name)
            };
            run().map_err(|e| (h, e.to_string()))
        });

    let mut posteriors = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(name) => posteriors.push(name),
            Err((h, error)) => failed.push(FailedChain { h, error }),
        }
    }
    let manifest = FitManifest {
        config_hash: cfg.hash_hex(),
        dataset: dataset_path.to_path_buf(),
        format: format!("{:?}", cfg.data.format).to_lowercase(),
        n: ds.n(),
        q: ds.q(),
        p: ds.p(),
        s: ds.s(),
        sketch_kind: format!("{:?}", cfg.sketch.kind).to_lowercase(),
        h_count,
        m,
        base_seed: cfg.seed,
        sketch_seeds: sketches.iter().map(|s| s.seed).collect(),
        chain_seeds: (0..h_count).map(|h| cfg.chain_seed(h)).collect(),
        thetas,
        posteriors,
        failed,
    };
    let manifest_file = manifest_path(out);
    write_json(&manifest_file, &manifest)?;
    Ok(FitOutputs {
        manifest,
        manifest_file,
    })
}

pub fn load_manifest(out_dir: &Path) -> Result<FitManifest> {
    let path = manifest_path(out_dir);
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing fit manifest {}; run `gpsketch fit` first",
            path.display()
        )));
    }
    read_json(&path)
}

pub fn load_posteriors(out_dir: &Path, manifest: &FitManifest) -> Result<Vec<SketchedPosterior>> {
    manifest
        .posteriors
        .iter()
        .map(|name| {
            let path = out_dir.join(name);
            if !path.exists() {
                return Err(Error::Config(format!(
                    "missing posterior file {}",
                    path.display()
                )));
            }
            Ok(load_posterior(&path)?.posterior)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// combine
// ---------------------------------------------------------------------------

pub struct CombineOutputs {
    pub collaborative: CollaborativePosterior,
    pub quantiles_csv: PathBuf,
    pub quantiles_bin: PathBuf,
    pub summary_csv: PathBuf,
}

pub fn run_combine(cfg: &RunConfig) -> Result<CombineOutputs> {
    let out = &cfg.output.dir;
    let manifest = load_manifest(out)?;
    let posteriors = load_posteriors(out, &manifest)?;
    let cp = CollaborativePosterior::from_posteriors(&posteriors, QuantileGrid::default_fine())?;
    let comment = format!("config={}", cfg.hash_hex());
    let quantiles_csv = out.join("combined_params.csv");
    let quantiles_bin = out.join("combined_params.bin");
    cp.save_csv(&quantiles_csv, Some(&comment))?;
    cp.save_bin(&quantiles_bin)?;
    let summary_csv = out.join("params_summary.csv");
    let f = File::create(&summary_csv).map_err(|e| Error::Io {
        path: summary_csv.clone(),
        source: e,
    })?;
    let mut w = BufWriter::new(f);
    let io = |e: std::io::Error| Error::Io {
        path: summary_csv.clone(),
        source: e,
    };
    writeln!(w, "# {comment}").map_err(io)?;
    writeln!(w, "functional,median,ci95_low,ci95_high").map_err(io)?;
    for name in cp.functionals.keys() {
        let s = cp.summarize(name)?;
        writeln!(w, "{name},{},{},{}", s.median, s.ci95_low, s.ci95_high).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(CombineOutputs {
        collaborative: cp,
        quantiles_csv,
        quantiles_bin,
        summary_csv,
    })
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictManifest {
    pub config_hash: String,
    pub files: Vec<String>,
    pub n_star: usize,
    pub s_star: usize,
    pub count: usize,
    pub mode: String,
}

pub fn predict_manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("predict_manifest.json")
}

pub struct PredictOutputs {
    pub manifest: PredictManifest,
    pub summary_csv: PathBuf,
}

pub fn run_predict(cfg: &RunConfig) -> Result<PredictOutputs> {
    let out = &cfg.output.dir;
    let manifest = load_manifest(out)?;
    let posteriors = load_posteriors(out, &manifest)?;
    let train = load_dataset(&manifest.dataset, cfg.data.format.into())?;
    let request_path = match &cfg.predict.request {
        Some(p) => p.clone(),
        None => cfg.test_path()?,
    };
    let request_ds = load_dataset(&request_path, cfg.data.format.into())?;
    let mode = match cfg.predict.mode {
        PredictModeKey::NewSimulation => PredictionMode::NewSimulation,
        PredictModeKey::WithinSimulation => {
            PredictionMode::WithinSimulation(cfg.predict.sim_index)
        }
    };
    let req = PredictionRequest::from_dataset(&request_ds, mode);
    req.validate_against(&train)?;

    let operators = operators_for_thetas(cfg, &train.locations, &manifest.thetas)?;
    let hash = cfg.hash();
    let count = cfg.predict.count.min(posteriors[0].len());
    let n_coords = req.n_star() * req.s_star();
    let grid = QuantileGrid::default_fine();
    let mut acc = QuantileAccumulator::new(grid, n_coords);
    let mut mean_acc = DVector::<f64>::zeros(n_coords);
    let mut files = Vec::with_capacity(posteriors.len());

    // plans are reusable across sketches that share a length-scale in
    // new-simulation mode; within-simulation plans depend on the sketch
    let mut shared_plans: Vec<(u64, Arc<PredictivePlan>)> = Vec::new();
    for (h, posterior) in posteriors.iter().enumerate() {
        let plan: Arc<PredictivePlan> = match mode {
            PredictionMode::NewSimulation => {
                let key = manifest.thetas[h].to_bits();
                match shared_plans.iter().find(|(k, _)| *k == key) {
                    Some((_, plan)) => plan.clone(),
                    None => {
                        let plan =
                            Arc::new(plan_new_simulation(operators[h].as_ref().as_ref(), &req)?);
                        shared_plans.push((key, plan.clone()));
                        plan
                    }
                }
            }
            PredictionMode::WithinSimulation(_) => {
                let phi = regenerate_sketch(&manifest, h, &train)?;
                let sk = apply_sketch(&phi, &train)?;
                let quad = sketch_quad_form(&phi, operators[h].as_ref().as_ref())?;
                Arc::new(plan_within_simulation(
                    operators[h].as_ref().as_ref(),
                    &req,
                    &phi,
                    &sk,
                    &train.global_attrs,
                    &quad,
                )?)
            }
        };
        let draws = composition_sample(posterior, &plan, count, cfg.predict_seed(h))?;
        let name = predictive_file_name(h);
        draws.save(&out.join(&name), &hash)?;
        acc.add_posterior(|j| draws.draws.column(j).iter().copied().collect())?;
        for j in 0..n_coords {
            mean_acc[j] += draws.draws.column(j).mean();
        }
        files.push(name);
    }
    let h_count = posteriors.len() as f64;
    mean_acc /= h_count;

    // combined per-coordinate summary off the averaged quantile functions
    let summary_csv = out.join("predictive_summary.csv");
    {
        let f = File::create(&summary_csv).map_err(|e| Error::Io {
            path: summary_csv.clone(),
            source: e,
        })?;
        let mut w = BufWriter::new(f);
        let io = |e: std::io::Error| Error::Io {
            path: summary_csv.clone(),
            source: e,
        };
        writeln!(w, "# config={}", cfg.hash_hex()).map_err(io)?;
        writeln!(
            w,
            "# coordinate = sim * n_star + point, simulation-major over the request"
        )
        .map_err(io)?;
        writeln!(w, "coordinate,mean,q025,q975").map_err(io)?;
        let lo = acc.grid().nearest(0.025);
        let hi = acc.grid().nearest(0.975);
        for j in 0..n_coords {
            let quants = acc.averaged(j);
            writeln!(w, "{j},{},{},{}", mean_acc[j], quants[lo], quants[hi]).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    let pmanifest = PredictManifest {
        config_hash: cfg.hash_hex(),
        files,
        n_star: req.n_star(),
        s_star: req.s_star(),
        count,
        mode: format!("{:?}", cfg.predict.mode).to_lowercase(),
    };
    write_json(&predict_manifest_path(out), &pmanifest)?;
    Ok(PredictOutputs {
        manifest: pmanifest,
        summary_csv,
    })
}

/// Rebuilds the `h`-th sketch of a fit from its manifest entry.
pub fn regenerate_sketch(
    manifest: &FitManifest,
    h: usize,
    ds: &FunctionalDataset,
) -> Result<SketchMatrix> {
    match manifest.sketch_kind.as_str() {
        "gaussian" => gen_gaussian_sketch(manifest.m, manifest.n, manifest.sketch_seeds[h]),
        "subdomain" => {
            let all = gen_partition_sketch(
                PartitionKind::Subdomain,
                &ds.locations,
                manifest.m,
                manifest.base_seed,
            )?;
            all.into_iter().nth(h).ok_or_else(|| {
                Error::Config(format!("partition regenerated fewer than {h} subsets"))
            })
        }
        "stratified" => {
            let all = gen_partition_sketch(
                PartitionKind::Stratified,
                &ds.locations,
                manifest.m,
                manifest.base_seed,
            )?;
            all.into_iter().nth(h).ok_or_else(|| {
                Error::Config(format!("partition regenerated fewer than {h} subsets"))
            })
        }
        other => Err(Error::Config(format!("unknown sketch kind {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub struct EvalOutputs {
    pub report: EvalReport,
    pub report_csv: PathBuf,
}

pub fn run_eval(cfg: &RunConfig) -> Result<EvalOutputs> {
    let out = &cfg.output.dir;
    let pm_path = predict_manifest_path(out);
    if !pm_path.exists() {
        return Err(Error::Config(format!(
            "missing predictive manifest {}; run `gpsketch predict` first",
            pm_path.display()
        )));
    }
    let pmanifest: PredictManifest = read_json(&pm_path)?;
    let truth_path = match &cfg.eval.truth {
        Some(p) => p.clone(),
        None => cfg.test_path()?,
    };
    let truth_ds = load_dataset(&truth_path, cfg.data.format.into())?;
    let n_coords = pmanifest.n_star * pmanifest.s_star;
    if truth_ds.n() != pmanifest.n_star || truth_ds.s() != pmanifest.s_star {
        return Err(Error::Dimension(format!(
            "truth file has (n, S) = ({}, {}), predictions have ({}, {})",
            truth_ds.n(),
            truth_ds.s(),
            pmanifest.n_star,
            pmanifest.s_star
        )));
    }
    // responses are column-major, matching the simulation-major draw layout
    let truth = DVector::from_column_slice(truth_ds.responses.as_slice());

    let draws = collaborative_predictive_draws(cfg, out, &pmanifest, cfg.eval.count)?;
    let rule: ThresholdRule = cfg.eval.rule.into();
    let report = EvalReport::compute(
        &draws,
        &truth,
        pmanifest.n_star,
        pmanifest.s_star,
        cfg.eval.threshold,
        rule,
    )?;
    let report_csv = out.join("eval_report.csv");
    report.save_csv(&report_csv, Some(&format!("config={}", cfg.hash_hex())))?;
    let _ = n_coords;
    Ok(EvalOutputs { report, report_csv })
}

/// Combines the per-sketch predictive files by quantile averaging, then
/// samples `count` collaborative draws per coordinate (independently across
/// coordinates: marginal combination carries no joint dependence).
pub fn collaborative_predictive_draws(
    cfg: &RunConfig,
    out: &Path,
    pmanifest: &PredictManifest,
    count: usize,
) -> Result<DMatrix<f64>> {
    let n_coords = pmanifest.n_star * pmanifest.s_star;
    let grid = QuantileGrid::default_fine();
    let mut acc = QuantileAccumulator::new(grid, n_coords);
    for name in &pmanifest.files {
        let path = out.join(name);
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing predictive file {}",
                path.display()
            )));
        }
        let (pred, _) = PredictiveDraws::load(&path)?;
        if pred.n_star * pred.s_star != n_coords {
            return Err(Error::Dimension(
                "predictive files disagree on coordinate count".into(),
            ));
        }
        acc.add_posterior(|j| pred.draws.column(j).iter().copied().collect())?;
    }
    let levels: Vec<f64> = acc.grid().levels().to_vec();
    let cols: Vec<Vec<f64>> = exec::map_range(n_coords, |j| {
        let quants = acc.averaged(j);
        gpsketch::combine::sample_from_quantiles(&quants, &levels, count, cfg.eval_seed(j))
    });
    let mut draws = DMatrix::zeros(count, n_coords);
    for (j, col) in cols.into_iter().enumerate() {
        for (i, v) in col.into_iter().enumerate() {
            draws[(i, j)] = v;
        }
    }
    Ok(draws)
}
