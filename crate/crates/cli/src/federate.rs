//! Federated mode: multi-center partial sketches, aggregation, and the
//! coordinator-side fit.
//!
//! The federation manifest lists the centers (row offsets, counts, shard
//! files), the shared index-point and global-attribute files the coordinator
//! may read, and the message transport (a directory of message files, or a
//! TCP listener for length-prefixed frames). Raw responses and local
//! attributes exist only inside shard files; the coordinator sees partial
//! products.
//!
//! Roles:
//! - `split`: test tooling that carves a dataset into shard files and writes
//!   the shared locations/globals files.
//! - `center`: computes one message per sketch from its shard.
//! - `coordinator`: aggregates messages into full-data sketches, then runs
//!   the same chains as a centralized fit.

use std::net::TcpListener;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use gpsketch::data::{load_dataset, save_dataset, FileFormat, FunctionalDataset};
use gpsketch::error::{Error, Result};
use gpsketch::exec;
use gpsketch::federation::{
    aggregate_partials, center_compute_partial, send_messages, serve_collect, split_dataset,
    CenterShard, GlobalSketchSpec, PartialSketchMessage,
};
use gpsketch::sampler::{run_chain, save_posterior, PosteriorFile};
use gpsketch::sketch::{gen_gaussian_sketch, sketch_quad_form};

use crate::config::{RunConfig, SketchKindKey};
use crate::pipeline::{
    manifest_path, operators_for_thetas, posterior_file_name, FailedChain, FitManifest,
    FitOutputs,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationManifest {
    /// Global row count; every center must agree on it.
    pub n: usize,
    /// Dataset file holding the shared index points and global attributes
    /// (its local attributes and responses are placeholders).
    pub public_view: PathBuf,
    pub message_dir: PathBuf,
    /// When set, the coordinator listens here instead of reading files.
    pub tcp_addr: Option<String>,
    pub centers: Vec<CenterEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterEntry {
    pub id: u64,
    pub offset: usize,
    pub rows: usize,
    pub shard: PathBuf,
}

impl FederationManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize manifest: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut spans: Vec<(usize, usize, u64)> = self
            .centers
            .iter()
            .map(|c| (c.offset, c.rows, c.id))
            .collect();
        spans.sort_unstable();
        let mut expected = 0;
        for (off, rows, id) in &spans {
            if *off != expected {
                return Err(Error::Protocol(format!(
                    "center {id} starts at row {off}, expected {expected}"
                )));
            }
            expected += rows;
        }
        if expected != self.n {
            return Err(Error::Protocol(format!(
                "centers cover {expected} rows, manifest says n = {}",
                self.n
            )));
        }
        Ok(())
    }
}

fn federation_manifest(cfg: &RunConfig) -> Result<FederationManifest> {
    let section = cfg
        .federation
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [federation] section".into()))?;
    let manifest = FederationManifest::load(&section.manifest)?;
    manifest.validate()?;
    Ok(manifest)
}

fn message_file(dir: &Path, center_id: u64, h: usize) -> PathBuf {
    dir.join(format!("msg_c{center_id:03}_h{h:03}.bin"))
}

/// Splits `data.train` into per-center shard files plus the shared public
/// view (locations and global attributes; responses and local attributes
/// zeroed).
pub fn run_split(cfg: &RunConfig) -> Result<()> {
    let manifest = federation_manifest(cfg)?;
    let ds = load_dataset(&cfg.train_path()?, cfg.data.format.into())?;
    if ds.n() != manifest.n {
        return Err(Error::Protocol(format!(
            "dataset has n = {}, manifest says {}",
            ds.n(),
            manifest.n
        )));
    }
    let mut by_offset = manifest.centers.clone();
    by_offset.sort_by_key(|c| c.offset);
    let rows: Vec<usize> = by_offset.iter().map(|c| c.rows).collect();
    let shards = split_dataset(&ds, &rows)?;
    for (entry, mut shard) in by_offset.iter().zip(shards) {
        shard.center_id = entry.id;
        if let Some(parent) = entry.shard.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
        shard.save(&entry.shard)?;
    }
    let public = FunctionalDataset::new(
        ds.locations.clone(),
        DMatrix::zeros(ds.n(), ds.q()),
        ds.global_attrs.clone(),
        DMatrix::zeros(ds.n(), ds.s()),
    )?;
    if let Some(parent) = manifest.public_view.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    save_dataset(&public, &manifest.public_view, FileFormat::Bin)?;
    Ok(())
}

fn resolved_specs(cfg: &RunConfig, manifest: &FederationManifest) -> Result<Vec<GlobalSketchSpec>> {
    if cfg.sketch.kind != SketchKindKey::Gaussian {
        return Err(Error::Config(
            "federated runs use Gaussian sketches; partition baselines need raw data".into(),
        ));
    }
    let m = cfg.sketch.m.resolve(manifest.n)?;
    if m >= manifest.n {
        return Err(Error::Config(format!(
            "resolved m = {m} must be < n = {}",
            manifest.n
        )));
    }
    Ok((0..cfg.sketch.h)
        .map(|h| GlobalSketchSpec {
            m,
            n: manifest.n,
            seed: cfg.sketch_seed(h),
            h,
        })
        .collect())
}

/// Center role: compute one message per sketch; write files or send frames.
pub fn run_center(cfg: &RunConfig, center_id: u64, use_tcp: bool) -> Result<()> {
    let manifest = federation_manifest(cfg)?;
    let entry = manifest
        .centers
        .iter()
        .find(|c| c.id == center_id)
        .ok_or_else(|| Error::Protocol(format!("center {center_id} not in the manifest")))?;
    let shard = CenterShard::load(&entry.shard)?;
    if shard.center_id != center_id || shard.offset != entry.offset || shard.n_j() != entry.rows {
        return Err(Error::Protocol(format!(
            "shard file {} disagrees with the manifest entry for center {center_id}",
            entry.shard.display()
        )));
    }
    let specs = resolved_specs(cfg, &manifest)?;
    let messages = specs
        .iter()
        .map(|spec| center_compute_partial(&shard, spec))
        .collect::<Result<Vec<_>>>()?;
    if use_tcp {
        let addr = manifest
            .tcp_addr
            .as_ref()
            .ok_or_else(|| Error::Config("manifest has no tcp_addr".into()))?;
        send_messages(addr.as_str(), &messages)?;
    } else {
        std::fs::create_dir_all(&manifest.message_dir).map_err(|e| Error::Io {
            path: manifest.message_dir.clone(),
            source: e,
        })?;
        for msg in &messages {
            msg.save(&message_file(&manifest.message_dir, center_id, msg.h))?;
        }
    }
    Ok(())
}

/// Coordinator role: gather all messages, aggregate per sketch, and fit the
/// chains exactly as a centralized run would.
pub fn run_coordinator(cfg: &RunConfig, use_tcp: bool) -> Result<FitOutputs> {
    let manifest = federation_manifest(cfg)?;
    let specs = resolved_specs(cfg, &manifest)?;
    let h_count = specs.len();
    let expected = manifest.centers.len() * h_count;

    let mut messages: Vec<PartialSketchMessage> = if use_tcp {
        let addr = manifest
            .tcp_addr
            .as_ref()
            .ok_or_else(|| Error::Config("manifest has no tcp_addr".into()))?;
        let listener = TcpListener::bind(addr.as_str())
            .map_err(|e| Error::Protocol(format!("bind {addr}: {e}")))?;
        serve_collect(&listener, expected)?
    } else {
        let mut collected = Vec::with_capacity(expected);
        for center in &manifest.centers {
            for h in 0..h_count {
                let path = message_file(&manifest.message_dir, center.id, h);
                if !path.exists() {
                    return Err(Error::Protocol(format!(
                        "missing message from center {} for sketch {h}: {}",
                        center.id,
                        path.display()
                    )));
                }
                collected.push(PartialSketchMessage::load(&path)?);
            }
        }
        collected
    };
    messages.sort_by_key(|m| (m.h, m.center_id));

    let public = load_dataset(&manifest.public_view, FileFormat::Bin)?;
    if public.n() != manifest.n {
        return Err(Error::Protocol(format!(
            "public view has n = {}, manifest says {}",
            public.n(),
            manifest.n
        )));
    }
    let thetas = cfg.covariance.theta.resolve(h_count)?;
    let operators = operators_for_thetas(cfg, &public.locations, &thetas)?;

    let out = &cfg.output.dir;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let hash = cfg.hash();
    let priors = (&cfg.priors).into();
    let m = specs[0].m;
    let results: Vec<std::result::Result<String, (usize, String)>> =
        exec::map_range(h_count, |h| {
            let run = || -> Result<String> {
                let per_h: Vec<PartialSketchMessage> = messages
                    .iter()
                    .filter(|msg| msg.h == h)
                    .cloned()
                    .collect();
                if per_h.len() != manifest.centers.len() {
                    return Err(Error::Protocol(format!(
                        "sketch {h}: got {} messages, expected {}",
                        per_h.len(),
                        manifest.centers.len()
                    )));
                }
                let sk = aggregate_partials(&per_h, manifest.n)?;
                let phi = gen_gaussian_sketch(specs[h].m, specs[h].n, specs[h].seed)?;
                let quad = sketch_quad_form(&phi, operators[h].as_ref().as_ref())?;
                let chain_cfg = cfg.chain.to_chain_config(cfg.chain_seed(h));
                let posterior = run_chain(
                    &sk,
                    &quad,
                    &public.global_attrs,
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
                        sketch_seed: specs[h].seed,
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
    let fit_manifest = FitManifest {
        config_hash: cfg.hash_hex(),
        dataset: manifest.public_view.clone(),
        format: "bin".to_string(),
        n: manifest.n,
        q: public.q(),
        p: public.p(),
        s: public.s(),
        sketch_kind: "gaussian".to_string(),
        h_count,
        m,
        base_seed: cfg.seed,
        sketch_seeds: specs.iter().map(|s| s.seed).collect(),
        chain_seeds: (0..h_count).map(|h| cfg.chain_seed(h)).collect(),
        thetas,
        posteriors,
        failed,
    };
    let manifest_file = manifest_path(out);
    let text = serde_json::to_string_pretty(&fit_manifest)
        .map_err(|e| Error::Config(format!("serialize manifest: {e}")))?;
    std::fs::write(&manifest_file, text).map_err(|e| Error::Io {
        path: manifest_file.clone(),
        source: e,
    })?;
    Ok(FitOutputs {
        manifest: fit_manifest,
        manifest_file,
    })
}
