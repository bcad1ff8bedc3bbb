//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or configuration
//! errors. Commands that write files also record a `run_manifest.json` next
//! to their outputs, keyed by subcommand.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{Dataset, HorizonConfig};
use crate::error::{Error, Result};
use crate::eval::{benchmark, evaluate_log, write_benchmark_outputs, BenchmarkConfig};
use crate::model::{Gamma, ModelConfig, Variant};
use crate::sampling::{CurveCache, SCHEME_HELP};
use crate::synthgen::{describe, generate_to, GenConfig};
use crate::trainer::{read_prediction_log, train_offline, write_prediction_log, OnlinePolicy, TrainConfig};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Architecture settings; data dimensions come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub variant: Variant,
    pub n_k: usize,
    pub channels: usize,
    pub kernel_width: usize,
    pub n_blocks: usize,
    pub n_basis: usize,
    pub gamma: Gamma,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::new(Variant::Proposed, 1, 1, 1, 1);
        Self {
            variant: m.variant,
            n_k: m.n_k,
            channels: m.channels,
            kernel_width: m.kernel_width,
            n_blocks: m.n_blocks,
            n_basis: m.n_basis,
            gamma: m.gamma,
        }
    }
}

impl ArchConfig {
    pub fn bind(&self, ds: &Dataset, horizon: &HorizonConfig) -> ModelConfig {
        ModelConfig {
            n_k: self.n_k,
            channels: self.channels,
            kernel_width: self.kernel_width,
            n_blocks: self.n_blocks,
            n_basis: self.n_basis,
            gamma: self.gamma,
            ..ModelConfig::new(self.variant, ds.meta.d, ds.meta.k, horizon.t_p, horizon.horizon())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkGrid {
    pub variants: Vec<Variant>,
    pub schemes: Vec<OnlinePolicy>,
    /// Defaults to every day after the offline span.
    pub online_days: Option<usize>,
    pub eval_skip_days: usize,
}

impl Default for BenchmarkGrid {
    fn default() -> Self {
        let schemes = [
            "uniform:uniform",
            "segment:uniform",
            "segment:similar",
            "segment:low_error",
            "fixed90:uniform",
            "decay:uniform",
            "uniform:similar",
            "uniform:low_error",
        ];
        Self {
            variants: vec![Variant::Base, Variant::BaseInter, Variant::Proposed],
            schemes: schemes.iter().map(|s| s.parse().expect("valid scheme")).collect(),
            online_days: None,
            eval_skip_days: 0,
        }
    }
}

/// Everything a run can be configured with. Every section is optional in the
/// JSON file; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GenConfig,
    pub model: ArchConfig,
    pub horizon: HorizonConfig,
    pub train: TrainConfig,
    pub benchmark: BenchmarkGrid,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.horizon.validate()?;
        self.train.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_scheme(s: &str) -> std::result::Result<OnlinePolicy, String> {
    if s == "frozen" {
        return Ok(OnlinePolicy::Frozen);
    }
    s.parse::<crate::sampling::SchemeSpec>()
        .map(OnlinePolicy::Update)
        .map_err(|_| format!("`{s}` is not a scheme\nvalid schemes: frozen, or {SCHEME_HELP}"))
}

#[derive(Debug, Parser)]
#[command(name = "driftcast", version, about = "Entity metric estimation under concept drift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        days: Option<usize>,
        /// none, abrupt or incremental.
        #[arg(long)]
        drift: Option<String>,
        #[arg(long)]
        drift_day: Option<usize>,
        #[arg(long)]
        scale_spread: Option<f64>,
    },
    /// Print a summary of a dataset directory.
    Describe {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train on the offline archive and write a checkpoint.
    TrainOffline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Simulate online days from a checkpoint and write the prediction log.
    RunOnline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// `frozen` or temporal:nontemporal, e.g. segment:similar.
        #[arg(long, value_parser = parse_scheme)]
        scheme: OnlinePolicy,
        #[arg(long)]
        days: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write the state after the last day here.
        #[arg(long)]
        save_ckpt: Option<PathBuf>,
        /// Reseed the sampling generator instead of continuing the
        /// checkpointed stream.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every variant × scheme cell and write report and rank tables.
    Benchmark {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the segmentation curve of one entity as CSV.
    Segment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        entity: String,
        #[arg(long)]
        out: PathBuf,
        /// Subsequence length, defaults to the look-back.
        #[arg(long)]
        m: Option<usize>,
        /// Use hours before this one only.
        #[arg(long)]
        end: Option<usize>,
    },
    /// Score a prediction log against the dataset labels.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Ignore days before this one.
        #[arg(long, default_value_t = 0)]
        from_day: usize,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn write_manifest(out_dir: &Path, command: &str, config: &RunConfig, seed: u64, extra: serde_json::Value) -> Result<()> {
    let path = out_dir.join(MANIFEST_FILE);
    let mut all = match std::fs::read_to_string(&path) {
        Ok(text) => match serde_json::from_str::<serde_json::Value>(&text) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => serde_json::Map::new(),
        },
        Err(_) => serde_json::Map::new(),
    };
    let entry = serde_json::json!({
        "config_hash": config.hash(),
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "run": extra,
    });
    all.insert(command.to_string(), entry);
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(all))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn ensure_parent(p: &Path) -> Result<PathBuf> {
    let dir = parent_dir(p);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    Ok(dir)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            config,
            seed,
            entities,
            clusters,
            days,
            drift,
            drift_day,
            scale_spread,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            let g = &mut cfg.generator;
            if let Some(v) = seed {
                g.seed = v;
            }
            if let Some(v) = entities {
                g.n_entities = v;
            }
            if let Some(v) = clusters {
                g.n_clusters = v;
            }
            if let Some(v) = days {
                g.days = v;
            }
            if let Some(v) = drift {
                g.drift_kind = v.parse()?;
            }
            if drift_day.is_some() {
                g.drift_day = drift_day;
            }
            if let Some(v) = scale_spread {
                g.scale_spread = v;
            }
            cfg.validate()?;
            let ds = generate_to(&cfg.generator, &out)?;
            println!(
                "wrote {} entities × {} hours to {}",
                ds.entities.len(),
                ds.meta.hours,
                out.display()
            );
            write_manifest(&out, "gen-data", &cfg, cfg.generator.seed, serde_json::json!({}))
        }
        Command::Describe { data } => {
            print!("{}", describe(&data)?);
            Ok(())
        }
        Command::TrainOffline {
            data,
            config,
            out,
            seed,
            variant,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            cfg.validate()?;
            let ds = Dataset::load(&data)?;
            let model = cfg.model.bind(&ds, &cfg.horizon);
            let state = train_offline(&ds, &model, &cfg.train, &cfg.horizon)?;
            let dir = ensure_parent(&out)?;
            save_checkpoint(&state, &out)?;
            println!(
                "offline training done: final loss {:.6}, checkpoint {}",
                state.final_offline_loss,
                out.display()
            );
            write_manifest(
                &dir,
                "train-offline",
                &cfg,
                cfg.train.seed,
                serde_json::json!({ "data": data, "out": out, "final_offline_loss": state.final_offline_loss }),
            )
        }
        Command::RunOnline {
            data,
            ckpt,
            scheme,
            days,
            out,
            save_ckpt,
            seed,
        } => {
            let ds = Dataset::load(&data)?;
            let mut state = load_checkpoint(&ckpt)?.with_policy(scheme);
            if let Some(s) = seed {
                use rand::SeedableRng;
                state.rng = rand_chacha::ChaCha8Rng::seed_from_u64(s);
            }
            let start_day = state.day;
            state.run_days(&ds, days, &mut CurveCache::new())?;
            let dir = ensure_parent(&out)?;
            write_prediction_log(&state.log, &out)?;
            if let Some(p) = &save_ckpt {
                ensure_parent(p)?;
                save_checkpoint(&state, p)?;
            }
            println!(
                "simulated days {start_day}..{} with {scheme}; {} log rows in {}",
                state.day,
                state.log.len(),
                out.display()
            );
            let cfg = RunConfig {
                horizon: state.horizon,
                train: state.train.clone(),
                ..RunConfig::default()
            };
            write_manifest(
                &dir,
                "run-online",
                &cfg,
                seed.unwrap_or(state.train.seed),
                serde_json::json!({
                    "data": data, "ckpt": ckpt, "scheme": scheme, "days": days,
                    "start_day": start_day, "out": out, "save_ckpt": save_ckpt,
                }),
            )
        }
        Command::Benchmark {
            data,
            config,
            out,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let ds = Dataset::load(&data)?;
            let online_days = cfg
                .benchmark
                .online_days
                .unwrap_or_else(|| ds.meta.days.saturating_sub(cfg.train.offline_days));
            let bench = BenchmarkConfig {
                variants: cfg.benchmark.variants.clone(),
                schemes: cfg.benchmark.schemes.clone(),
                model: cfg.model.bind(&ds, &cfg.horizon),
                train: cfg.train.clone(),
                horizon: cfg.horizon,
                online_days,
                eval_skip_days: cfg.benchmark.eval_skip_days,
            };
            let results = benchmark(&ds, &bench)?;
            write_benchmark_outputs(&results, &out)?;
            println!("{} runs scored, tables in {}", results.len(), out.display());
            write_manifest(&out, "benchmark", &cfg, cfg.train.seed, serde_json::json!({ "data": data }))
        }
        Command::Segment {
            data,
            entity,
            out,
            m,
            end,
        } => {
            let ds = Dataset::load(&data)?;
            let e = ds
                .entity_index(&entity)
                .ok_or_else(|| Error::Config(format!("unknown entity {entity}")))?;
            let m = m.unwrap_or(HorizonConfig::default().t_p);
            let end = end.unwrap_or(ds.meta.hours);
            let mut cache = CurveCache::new();
            let curve = cache.get(&ds, e, end, m)?;
            let dir = ensure_parent(&out)?;
            let mut text = String::from("position,cac_sum,p\n");
            for (i, (c, p)) in curve.cac_sum.iter().zip(&curve.p).enumerate() {
                text.push_str(&format!("{i},{c},{p}\n"));
            }
            std::fs::write(&out, text).map_err(|err| Error::io(format!("writing {}", out.display()), err))?;
            write_manifest(
                &dir,
                "segment",
                &RunConfig::default(),
                0,
                serde_json::json!({ "data": data, "entity": entity, "m": m, "end": end }),
            )
        }
        Command::Evaluate {
            pred,
            data,
            from_day,
            out,
        } => {
            let ds = Dataset::load(&data)?;
            let rows = read_prediction_log(&pred)?;
            let report = evaluate_log(&rows, &ds, from_day)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            if let Some(p) = &out {
                let dir = ensure_parent(p)?;
                let mut f = std::fs::File::create(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?;
                writeln!(f, "{json}").map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
                write_manifest(
                    &dir,
                    "evaluate",
                    &RunConfig::default(),
                    0,
                    serde_json::json!({ "pred": pred, "data": data, "from_day": from_day }),
                )?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run_cli(["driftcast", "fly"]), 1);
        assert_eq!(run_cli(["driftcast", "describe"]), 1);
        let code = run_cli([
            "driftcast", "run-online", "--data", "d", "--ckpt", "c", "--scheme", "often:never", "--days", "1",
            "--out", "o",
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn data_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        assert_eq!(run_cli(["driftcast".into(), "describe".into(), "--data".into(), missing.into_os_string()]), 2);
    }

    #[test]
    fn scheme_flag_parses() {
        assert_eq!(parse_scheme("fixed90:uniform").unwrap().to_string(), "fixed90:uniform");
        assert_eq!(parse_scheme("segment:similar").unwrap().to_string(), "segment:similar");
        let err = parse_scheme("segment").unwrap_err();
        assert!(err.contains("valid schemes"));
        assert!(err.contains("similar"));
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"n_iter": 5, "speed": 3}}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&path)), Err(Error::Config(_))));
        std::fs::write(&path, r#"{"train": {"n_iter": 5, "scheme": "segment:similar"}, "model": {"gamma": "auto"}}"#)
            .unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.train.n_iter, 5);
        assert_eq!(cfg.train.scheme, parse_scheme("segment:similar").unwrap());
        assert_eq!(cfg.hash(), RunConfig::load(Some(&path)).unwrap().hash());
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn default_grid_round_trips() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
        assert_eq!(cfg.benchmark.schemes.len(), 8);
    }
}
