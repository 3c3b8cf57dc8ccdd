//! Run configuration: TOML schema, CLI overrides, resolution, and hashing.
//!
//! Every key has a default, so a minimal config only names its data files.
//! The sha-256 of the effective (post-override) configuration is stamped on
//! every pipeline output for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gpsketch::data::FileFormat;
use gpsketch::error::{Error, Result};
use gpsketch::kernels::{KernelSpec, NeighborOrdering};
use gpsketch::metrics::ThresholdRule;
use gpsketch::sampler::{ChainConfig, Priors};

pub const FOUR_FEET_IN_METERS: f64 = 1.2192;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed; every sketch, chain, and sampler stream derives from it.
    pub seed: u64,
    /// Worker threads; `None` uses the rayon default. Overridden by
    /// `GPSKETCH_WORKERS` and `--workers`.
    pub workers: Option<usize>,
    pub data: DataSection,
    pub simulate: SimulateSection,
    pub sketch: SketchSection,
    pub covariance: CovarianceSection,
    pub priors: PriorsSection,
    pub chain: ChainSection,
    pub predict: PredictSection,
    pub eval: EvalSection,
    pub output: OutputSection,
    pub federation: Option<FederationSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: None,
            data: DataSection::default(),
            simulate: SimulateSection::default(),
            sketch: SketchSection::default(),
            covariance: CovarianceSection::default(),
            priors: PriorsSection::default(),
            chain: ChainSection::default(),
            predict: PredictSection::default(),
            eval: EvalSection::default(),
            output: OutputSection::default(),
            federation: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: FormatKey,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum FormatKey {
    #[default]
    Bin,
    Csv,
}

impl From<FormatKey> for FileFormat {
    fn from(k: FormatKey) -> FileFormat {
        match k {
            FormatKey::Bin => FileFormat::Bin,
            FormatKey::Csv => FileFormat::Csv,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub kind: SimulateKind,
    pub n: usize,
    pub n0: usize,
    pub s: usize,
    pub s0: usize,
    pub gamma0: Vec<f64>,
    pub beta0: Vec<f64>,
    pub sigma2_0: f64,
    pub tau2_0: f64,
    pub theta0: f64,
    pub domain_min: Vec<f64>,
    pub domain_max: Vec<f64>,
    pub dense_cap: usize,
    pub fallback_knots: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SimulateKind {
    #[default]
    Paper,
    SloshLike,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            kind: SimulateKind::Paper,
            n: 2000,
            n0: 500,
            s: 10,
            s0: 5,
            gamma0: vec![5.0],
            beta0: vec![2.0, -1.0],
            sigma2_0: 2.0,
            tau2_0: 0.2,
            theta0: 3.0,
            domain_min: vec![0.0, 0.0],
            domain_max: vec![10.0, 10.0],
            dense_cap: 5000,
            fallback_knots: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SketchSection {
    pub h: usize,
    pub m: MSpec,
    pub kind: SketchKindKey,
}

impl Default for SketchSection {
    fn default() -> Self {
        SketchSection {
            h: 5,
            m: MSpec::Percent("1%".to_string()),
            kind: SketchKindKey::Gaussian,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum SketchKindKey {
    #[default]
    Gaussian,
    Subdomain,
    Stratified,
}

/// Sketch dimension: an absolute count or a percentage of `n` such as
/// `"1%"` (resolved as `round(pct * n)`).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum MSpec {
    Count(usize),
    Percent(String),
}

impl MSpec {
    pub fn resolve(&self, n: usize) -> Result<usize> {
        match self {
            MSpec::Count(m) => Ok(*m),
            MSpec::Percent(text) => {
                let trimmed = text.trim();
                let digits = trimmed
                    .strip_suffix('%')
                    .ok_or_else(|| Error::Config(format!("bad m spec {text:?}: expected e.g. \"1%\"")))?;
                let pct: f64 = digits
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad m percentage {text:?}")))?;
                if !(pct > 0.0) || pct >= 100.0 {
                    return Err(Error::Config(format!(
                        "m percentage must be in (0, 100), got {pct}"
                    )));
                }
                Ok(((pct / 100.0) * n as f64).round().max(1.0) as usize)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovarianceSection {
    pub variant: CovarianceKey,
    pub theta: ThetaSpec,
    pub n_knot: usize,
    pub knot_seed: u64,
    pub k: usize,
    pub ordering: OrderingKey,
    pub dense_cap: usize,
}

impl Default for CovarianceSection {
    fn default() -> Self {
        CovarianceSection {
            variant: CovarianceKey::FullGp,
            theta: ThetaSpec::Single(3.0),
            n_knot: 500,
            knot_seed: 7,
            k: 10,
            ordering: OrderingKey::CoordinateSort,
            dense_cap: gpsketch::kernels::DENSE_CAP_DEFAULT,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceKey {
    #[default]
    FullGp,
    Mpp,
    Nngp,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingKey {
    #[default]
    CoordinateSort,
    InputOrder,
}

/// Per-sketch length-scales: one shared value, an explicit list (length 1 or
/// H), or H values equally spaced over a range.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ThetaSpec {
    Single(f64),
    List(Vec<f64>),
    Range { min: f64, max: f64 },
}

impl ThetaSpec {
    pub fn resolve(&self, h_count: usize) -> Result<Vec<f64>> {
        let thetas = match self {
            ThetaSpec::Single(t) => vec![*t; h_count],
            ThetaSpec::List(list) => match list.len() {
                1 => vec![list[0]; h_count],
                len if len == h_count => list.clone(),
                len => {
                    return Err(Error::Config(format!(
                        "theta list has {len} entries; expected 1 or H = {h_count}"
                    )))
                }
            },
            ThetaSpec::Range { min, max } => {
                if !(min <= max) {
                    return Err(Error::Config(format!("bad theta range [{min}, {max}]")));
                }
                if h_count == 1 {
                    vec![*min]
                } else {
                    (0..h_count)
                        .map(|h| min + (max - min) * h as f64 / (h_count - 1) as f64)
                        .collect()
                }
            }
        };
        if thetas.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("theta values must be positive".into()));
        }
        Ok(thetas)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorsSection {
    pub a_tau: f64,
    pub b_tau: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
}

impl Default for PriorsSection {
    fn default() -> Self {
        let p = Priors::default();
        PriorsSection {
            a_tau: p.a_tau,
            b_tau: p.b_tau,
            a_sigma: p.a_sigma,
            b_sigma: p.b_sigma,
        }
    }
}

impl From<&PriorsSection> for Priors {
    fn from(s: &PriorsSection) -> Priors {
        Priors {
            a_tau: s.a_tau,
            b_tau: s.b_tau,
            a_sigma: s.a_sigma,
            b_sigma: s.b_sigma,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub proposal_sd_log_sigma2: f64,
    pub proposal_sd_log_tau2: f64,
    pub init_sigma2: Option<f64>,
    pub init_tau2: Option<f64>,
    pub adapt_burnin: bool,
    pub fix_variances: bool,
    pub omit_sigma2_in_gibbs: bool,
}

impl Default for ChainSection {
    fn default() -> Self {
        let c = ChainConfig::default();
        ChainSection {
            n_iter: c.n_iter,
            n_burn: c.n_burn,
            thin: c.thin,
            proposal_sd_log_sigma2: c.proposal_sd_log_sigma2,
            proposal_sd_log_tau2: c.proposal_sd_log_tau2,
            init_sigma2: c.init_sigma2,
            init_tau2: c.init_tau2,
            adapt_burnin: c.adapt_burnin,
            fix_variances: c.fix_variances,
            omit_sigma2_in_gibbs: c.omit_sigma2_in_gibbs,
        }
    }
}

impl ChainSection {
    pub fn to_chain_config(&self, chain_seed: u64) -> ChainConfig {
        ChainConfig {
            n_iter: self.n_iter,
            n_burn: self.n_burn,
            thin: self.thin,
            proposal_sd_log_sigma2: self.proposal_sd_log_sigma2,
            proposal_sd_log_tau2: self.proposal_sd_log_tau2,
            init_sigma2: self.init_sigma2,
            init_tau2: self.init_tau2,
            adapt_burnin: self.adapt_burnin,
            fix_variances: self.fix_variances,
            omit_sigma2_in_gibbs: self.omit_sigma2_in_gibbs,
            chain_seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    /// Request file (dataset format; responses ignored). Defaults to
    /// `data.test`.
    pub request: Option<PathBuf>,
    pub mode: PredictModeKey,
    /// Training run to krige against in within-simulation mode.
    pub sim_index: usize,
    /// Predictive draws per sketch (evenly subsampled from the chain).
    pub count: usize,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            request: None,
            mode: PredictModeKey::NewSimulation,
            sim_index: 0,
            count: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum PredictModeKey {
    #[default]
    NewSimulation,
    WithinSimulation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Truth file (dataset format). Defaults to `data.test`.
    pub truth: Option<PathBuf>,
    /// Threshold in response units; the four-foot flood level in meters.
    pub threshold: f64,
    pub rule: ThresholdRuleKey,
    /// Collaborative draws sampled per coordinate for the metrics.
    pub count: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            truth: None,
            threshold: FOUR_FEET_IN_METERS,
            rule: ThresholdRuleKey::Mean,
            count: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdRuleKey {
    #[default]
    Mean,
    Probability,
}

impl From<ThresholdRuleKey> for ThresholdRule {
    fn from(k: ThresholdRuleKey) -> ThresholdRule {
        match k {
            ThresholdRuleKey::Mean => ThresholdRule::PredictiveMean,
            ThresholdRuleKey::Probability => ThresholdRule::ExceedanceProbability,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub manifest: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// sha-256 of the effective configuration. The worker count is
    /// execution metadata, not statistical configuration, and outputs must
    /// not depend on parallelism, so it is excluded.
    pub fn hash(&self) -> [u8; 32] {
        let mut hashed = self.clone();
        hashed.workers = None;
        let json = serde_json::to_string(&hashed).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    pub fn train_path(&self) -> Result<PathBuf> {
        match &self.data.train {
            Some(p) => Ok(p.clone()),
            None => Err(Error::Config("data.train is not set".into())),
        }
    }

    pub fn test_path(&self) -> Result<PathBuf> {
        match &self.data.test {
            Some(p) => Ok(p.clone()),
            None => Err(Error::Config("data.test is not set".into())),
        }
    }

    pub fn kernel_spec(&self) -> KernelSpec {
        match self.covariance.variant {
            CovarianceKey::FullGp => KernelSpec::FullGp,
            CovarianceKey::Mpp => KernelSpec::Mpp {
                n_knot: self.covariance.n_knot,
                knot_seed: self.covariance.knot_seed,
            },
            CovarianceKey::Nngp => KernelSpec::Nngp {
                k: self.covariance.k,
                ordering: match self.covariance.ordering {
                    OrderingKey::CoordinateSort => NeighborOrdering::CoordinateSort,
                    OrderingKey::InputOrder => NeighborOrdering::InputOrder,
                },
            },
        }
    }

    pub fn sketch_seed(&self, h: usize) -> u64 {
        self.seed.wrapping_add(h as u64)
    }

    pub fn chain_seed(&self, h: usize) -> u64 {
        self.seed.wrapping_add(100_000).wrapping_add(h as u64)
    }

    pub fn predict_seed(&self, h: usize) -> u64 {
        self.seed.wrapping_add(50_000).wrapping_add(h as u64)
    }

    pub fn eval_seed(&self, coordinate: usize) -> u64 {
        self.seed.wrapping_add(70_000).wrapping_add(coordinate as u64)
    }
}

/// Worker-count resolution: flag > `GPSKETCH_WORKERS` > config > default.
pub fn resolve_workers(flag: Option<usize>, cfg: &RunConfig) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("GPSKETCH_WORKERS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .or(cfg.workers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 42
            [data]
            train = "out/train.bin"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.sketch.h, 5);
        assert_eq!(cfg.sketch.m, MSpec::Percent("1%".into()));
        assert_eq!(cfg.chain.n_iter, 5000);
        assert_eq!(cfg.eval.threshold, FOUR_FEET_IN_METERS);
    }

    #[test]
    fn unknown_field_names_the_key() {
        let err = toml::from_str::<RunConfig>("sketchh = 3\n").unwrap_err();
        assert!(err.to_string().contains("sketchh"));
    }

    #[test]
    fn m_spec_resolution() {
        assert_eq!(MSpec::Count(128).resolve(2000).unwrap(), 128);
        assert_eq!(MSpec::Percent("1%".into()).resolve(2000).unwrap(), 20);
        assert_eq!(MSpec::Percent("0.25%".into()).resolve(2000).unwrap(), 5);
        assert_eq!(MSpec::Percent("1 %".into()).resolve(49719).unwrap(), 497);
        assert!(MSpec::Percent("banana".into()).resolve(100).is_err());
        assert!(MSpec::Percent("120%".into()).resolve(100).is_err());
    }

    #[test]
    fn theta_resolution() {
        assert_eq!(ThetaSpec::Single(3.0).resolve(4).unwrap(), vec![3.0; 4]);
        assert_eq!(
            ThetaSpec::List(vec![1.0, 2.0, 3.0]).resolve(3).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert!(ThetaSpec::List(vec![1.0, 2.0]).resolve(5).is_err());
        assert_eq!(
            ThetaSpec::Range { min: 1.0, max: 3.0 }.resolve(3).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(
            ThetaSpec::Range { min: 1.0, max: 3.0 }.resolve(1).unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn theta_spec_parses_all_toml_forms() {
        #[derive(Deserialize)]
        struct T {
            theta: ThetaSpec,
        }
        let single: T = toml::from_str("theta = 2.5").unwrap();
        assert_eq!(single.theta, ThetaSpec::Single(2.5));
        let list: T = toml::from_str("theta = [1.0, 2.0]").unwrap();
        assert_eq!(list.theta, ThetaSpec::List(vec![1.0, 2.0]));
        let range: T = toml::from_str("theta = { min = 0.5, max = 4.0 }").unwrap();
        assert_eq!(range.theta, ThetaSpec::Range { min: 0.5, max: 4.0 });
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 1;
        assert_ne!(a.hash_hex(), b.hash_hex());
        assert_eq!(a.hash_hex(), RunConfig::default().hash_hex());
        assert_eq!(a.hash_hex().len(), 64);
    }
}
