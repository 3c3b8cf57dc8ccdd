use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gpsketch::error::Error;
use gpsketch_cli::config::{
    resolve_workers, MSpec, PredictModeKey, RunConfig, SketchKindKey, ThetaSpec, ThresholdRuleKey,
};
use gpsketch_cli::federate;
use gpsketch_cli::pipeline::{self, install_pool};

/// Robust distributed Bayesian GP regression via random data sketching.
#[derive(Parser)]
#[command(name = "gpsketch", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (also honors GPSKETCH_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic train/test datasets and a truth record.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit one chain per sketch and write posterior files.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Override the number of sketches.
        #[arg(long)]
        h: Option<usize>,
        /// Override the sketch dimension (count or percentage like "1%").
        #[arg(long)]
        m: Option<String>,
        /// Override the length-scale (single shared value).
        #[arg(long)]
        theta: Option<f64>,
        /// Override the sketch kind.
        #[arg(long, value_enum)]
        sketch_kind: Option<SketchKindArg>,
    },
    /// Average the sketched posteriors into the collaborative posterior.
    Combine {
        #[command(flatten)]
        common: Common,
    },
    /// Composition-sample predictive draws per sketch.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Override the prediction mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Override the per-sketch draw count.
        #[arg(long)]
        count: Option<usize>,
        /// Override the request file.
        #[arg(long)]
        request: Option<PathBuf>,
    },
    /// Score the collaborative predictions against a truth file.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Override the classification threshold (response units).
        #[arg(long)]
        threshold: Option<f64>,
        /// Classification rule for the threshold metric.
        #[arg(long, value_enum)]
        rule: Option<RuleArg>,
        /// Override the collaborative draw count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Multi-center mode: split shards, compute partials, or coordinate.
    Federate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Which center this process is (role = center).
        #[arg(long)]
        center_id: Option<u64>,
        #[arg(long, value_enum, default_value = "files")]
        transport: TransportArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SketchKindArg {
    Gaussian,
    Subdomain,
    Stratified,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    NewSimulation,
    WithinSimulation,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Mean,
    Probability,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Split,
    Center,
    Coordinator,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Files,
    Tcp,
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = common.workers {
        cfg.workers = Some(workers);
    }
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Simulate { common } => {
            let cfg = load_config(&common)?;
            let out = run_in_pool(&common, &cfg, |cfg| pipeline::run_simulate(cfg))?;
            println!(
                "wrote {}, {}, {}",
                out.train.display(),
                out.test.display(),
                out.truth.display()
            );
            Ok(())
        }
        Cmd::Fit {
            common,
            h,
            m,
            theta,
            sketch_kind,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(h) = h {
                cfg.sketch.h = h;
            }
            if let Some(m) = m {
                cfg.sketch.m = match m.parse::<usize>() {
                    Ok(count) => MSpec::Count(count),
                    Err(_) => MSpec::Percent(m),
                };
            }
            if let Some(t) = theta {
                cfg.covariance.theta = ThetaSpec::Single(t);
            }
            if let Some(kind) = sketch_kind {
                cfg.sketch.kind = match kind {
                    SketchKindArg::Gaussian => SketchKindKey::Gaussian,
                    SketchKindArg::Subdomain => SketchKindKey::Subdomain,
                    SketchKindArg::Stratified => SketchKindKey::Stratified,
                };
            }
            let out = run_in_pool(&common, &cfg, |cfg| pipeline::run_fit(cfg))?;
            println!(
                "wrote {} posterior file(s) and {}",
                out.manifest.posteriors.len(),
                out.manifest_file.display()
            );
            if !out.manifest.failed.is_empty() {
                for f in &out.manifest.failed {
                    eprintln!("chain {} failed: {}", f.h, f.error);
                }
                return Err(Error::Protocol(format!(
                    "{} chain(s) failed: {:?}",
                    out.manifest.failed.len(),
                    out.manifest.failed.iter().map(|f| f.h).collect::<Vec<_>>()
                )));
            }
            Ok(())
        }
        Cmd::Combine { common } => {
            let cfg = load_config(&common)?;
            let out = run_in_pool(&common, &cfg, |cfg| pipeline::run_combine(cfg))?;
            println!(
                "wrote {}, {}, {}",
                out.quantiles_csv.display(),
                out.quantiles_bin.display(),
                out.summary_csv.display()
            );
            Ok(())
        }
        Cmd::Predict {
            common,
            mode,
            count,
            request,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(mode) = mode {
                cfg.predict.mode = match mode {
                    ModeArg::NewSimulation => PredictModeKey::NewSimulation,
                    ModeArg::WithinSimulation => PredictModeKey::WithinSimulation,
                };
            }
            if let Some(count) = count {
                cfg.predict.count = count;
            }
            if let Some(request) = request {
                cfg.predict.request = Some(request);
            }
            let out = run_in_pool(&common, &cfg, |cfg| pipeline::run_predict(cfg))?;
            println!(
                "wrote {} predictive file(s) and {}",
                out.manifest.files.len(),
                out.summary_csv.display()
            );
            Ok(())
        }
        Cmd::Eval {
            common,
            threshold,
            rule,
            count,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(threshold) = threshold {
                cfg.eval.threshold = threshold;
            }
            if let Some(rule) = rule {
                cfg.eval.rule = match rule {
                    RuleArg::Mean => ThresholdRuleKey::Mean,
                    RuleArg::Probability => ThresholdRuleKey::Probability,
                };
            }
            if let Some(count) = count {
                cfg.eval.count = count;
            }
            let out = run_in_pool(&common, &cfg, |cfg| pipeline::run_eval(cfg))?;
            println!("{}", out.report.table());
            println!("wrote {}", out.report_csv.display());
            Ok(())
        }
        Cmd::Federate {
            common,
            role,
            center_id,
            transport,
        } => {
            let cfg = load_config(&common)?;
            let tcp = matches!(transport, TransportArg::Tcp);
            match role {
                RoleArg::Split => {
                    run_in_pool(&common, &cfg, |cfg| federate::run_split(cfg))?;
                    println!("wrote shard files and the public view");
                    Ok(())
                }
                RoleArg::Center => {
                    let id = center_id.ok_or_else(|| {
                        Error::Config("role = center requires --center-id".into())
                    })?;
                    run_in_pool(&common, &cfg, |cfg| federate::run_center(cfg, id, tcp))?;
                    println!("center {id} released its partial sketches");
                    Ok(())
                }
                RoleArg::Coordinator => {
                    let out =
                        run_in_pool(&common, &cfg, |cfg| federate::run_coordinator(cfg, tcp))?;
                    println!(
                        "aggregated and fit {} sketch posterior(s); wrote {}",
                        out.manifest.posteriors.len(),
                        out.manifest_file.display()
                    );
                    if !out.manifest.failed.is_empty() {
                        return Err(Error::Protocol(format!(
                            "{} chain(s) failed",
                            out.manifest.failed.len()
                        )));
                    }
                    Ok(())
                }
            }
        }
    }
}

fn run_in_pool<R: Send>(
    common: &Common,
    cfg: &RunConfig,
    f: impl FnOnce(&RunConfig) -> Result<R, Error> + Send,
) -> Result<R, Error> {
    let workers = resolve_workers(common.workers, cfg);
    install_pool(workers, || f(cfg))
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if e.is_user_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
