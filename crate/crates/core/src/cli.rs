//! Command-line front end: argument parsing, run configuration and commands.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    accuracy_over_time, curve_csv, default_voxelizer, estimate_energy, raw_input, verify_causality_raw,
};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::frontend::dataset::{write_dataset, Dataset, ManifestDataset};
use crate::frontend::synth::{synth_dataset, SynthSpec};
use crate::model::{predict, AvModel, FusionMode, NetworkConfig};
use crate::training::{evaluate, finetune, infer_all, pretrain, read_json, run_pipeline, Prepared, RunOutput, Splits, TrainConfig};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "avsnn", version, about = "Causal spiking audio-visual word recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Paper)]
    pub preset: Preset,
    /// Dataset directory holding manifest.jsonl; synthetic data is generated when absent.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true)]
    pub ckpt: Option<PathBuf>,
    /// Babble SNR in dB for generated data.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub snr: Option<f64>,
    /// Comma list drawn from 1..=4, e.g. `1,2,3`.
    #[arg(long, global = true, value_parser = parse_cues)]
    pub cue_positions: Option<BTreeSet<usize>>,
    #[arg(long, global = true)]
    pub fusion_mode: Option<FusionMode>,
    /// Predict from the first `t` output steps only.
    #[arg(long, global = true)]
    pub upto_t: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-size network and schedule.
    #[default]
    Paper,
    /// Small network and short schedule for a single CPU core.
    Desk,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (events, WAV files, manifest).
    SynthData,
    /// Write a randomly initialized checkpoint.
    Init,
    /// Run pretraining and finetuning.
    Train,
    /// Test-set accuracy of a checkpoint.
    Eval,
    /// Operation counts and energy for one test sample.
    Energy {
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Check that outputs never depend on future inputs; exits 2 on failure.
    Causality {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Test accuracy as a function of elapsed timesteps.
    Curve,
    /// Finetune and evaluate once per cue set from shared pretrained models.
    Ablation {
        /// Semicolon-separated cue sets.
        #[arg(long, default_value = "3;2,3;1,2,3;1,2,3,4")]
        sets: String,
    },
    /// Print the JSON schema of the run configuration.
    ConfigSchema,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Init => "init",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Energy { .. } => "energy",
            Command::Causality { .. } => "causality",
            Command::Curve => "curve",
            Command::Ablation { .. } => "ablation",
            Command::ConfigSchema => "config-schema",
        }
    }
}

pub fn parse_cues(s: &str) -> std::result::Result<BTreeSet<usize>, String> {
    let mut set = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let p: usize = part.parse().map_err(|_| format!("bad cue position {part:?}"))?;
        if !(1..=4).contains(&p) {
            return Err(format!("cue position {p} outside 1..=4"));
        }
        set.insert(p);
    }
    Ok(set)
}

/// Everything a command needs besides paths and the seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub training: TrainConfig,
    /// Synthetic data used when no dataset directory is given.
    pub data: SynthSpec,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::default(),
            Preset::Desk => Self {
                network: NetworkConfig::desk(),
                training: TrainConfig::desk(),
                data: SynthSpec::default(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        self.data.validate()?;
        if self.network.timesteps != self.data.timesteps {
            return Err(Error::Config(format!(
                "network uses {} timesteps, data has {}",
                self.network.timesteps, self.data.timesteps
            )));
        }
        Ok(())
    }
}

/// JSON schema of [`RunConfig`].
pub fn config_schema() -> Value {
    serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serializes")
}

/// Loads the configuration file or preset and applies flag overrides.
pub fn resolve_config(opts: &Opts) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => read_json::<RunConfig>(p)?,
        None => RunConfig::preset(opts.preset),
    };
    if let Some(snr) = opts.snr {
        cfg.data.snr_db = Some(snr);
    }
    if let Some(mode) = opts.fusion_mode {
        cfg.network.fusion_mode = mode;
    }
    if let Some(cues) = &opts.cue_positions {
        cfg.network.set_cue_positions(cues.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Provenance written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub preset: Option<String>,
    /// Relative to the manifest itself, so identical runs give identical files.
    pub output_dir: PathBuf,
    pub seed: u64,
    pub flags: BTreeMap<String, Value>,
    pub config: RunConfig,
    pub version: String,
}

impl RunManifest {
    fn new(command: &Command, opts: &Opts, cfg: &RunConfig) -> Self {
        let mut flags = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            if !v.is_null() {
                flags.insert(k.to_string(), v);
            }
        };
        put("data", json!(opts.data));
        put("ckpt", json!(opts.ckpt));
        put("snr", json!(opts.snr));
        put("cue_positions", json!(opts.cue_positions));
        put("fusion_mode", json!(opts.fusion_mode));
        put("upto_t", json!(opts.upto_t));
        match command {
            Command::Energy { sample } => put("sample", json!(sample)),
            Command::Causality { trials, sample } => {
                put("trials", json!(trials));
                put("sample", json!(sample));
            }
            Command::Ablation { sets } => put("sets", json!(sets)),
            _ => {}
        }
        Self {
            command: command.name().to_string(),
            config_path: opts.config.clone(),
            preset: opts.config.is_none().then(|| format!("{:?}", opts.preset).to_lowercase()),
            output_dir: PathBuf::from("."),
            seed: opts.seed,
            flags,
            config: cfg.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Creates `out` with its manifest in place, via a temporary sibling and a
/// rename so the directory never appears half-initialized. An existing
/// directory is reused only if it already holds a manifest.
pub fn prepare_out_dir(out: &Path, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    if out.exists() {
        if !out.join(MANIFEST_FILE).exists() && std::fs::read_dir(out)?.next().is_some() {
            return Err(Error::Config(format!(
                "{} exists and is not a run directory",
                out.display()
            )));
        }
        std::fs::write(out.join(MANIFEST_FILE), text)?;
        return Ok(());
    }
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("bad output path {}", out.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir(&tmp)?;
    std::fs::write(tmp.join(MANIFEST_FILE), text)?;
    std::fs::rename(&tmp, out)?;
    Ok(())
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

struct Data {
    train: Box<dyn Dataset>,
    test: Box<dyn Dataset>,
}

fn load_data(opts: &Opts, cfg: &RunConfig) -> Result<Data> {
    match &opts.data {
        Some(dir) => {
            let train = ManifestDataset::open_split(dir, "train")?;
            let test = ManifestDataset::open_split(dir, "test")?;
            if train.is_empty() && test.is_empty() {
                return Err(Error::EmptyInput(format!("{} lists no train or test samples", dir.display())));
            }
            Ok(Data {
                train: Box::new(train),
                test: Box::new(test),
            })
        }
        None => {
            let (train, test) = synth_dataset(&cfg.data, opts.seed)?;
            Ok(Data {
                train: Box::new(train),
                test: Box::new(test),
            })
        }
    }
}

/// Model from `--ckpt`, or a fresh one built from the configuration.
fn load_model(opts: &Opts, cfg: &RunConfig) -> Result<(AvModel, bool)> {
    match &opts.ckpt {
        Some(p) => Ok((Checkpoint::load(p)?.to_model()?, true)),
        None => Ok((AvModel::new(cfg.network.clone(), opts.seed)?, false)),
    }
}

fn require_out(opts: &Opts) -> Result<&Path> {
    opts.out
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --out".into()))
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let opts = &cli.opts;
    if let Command::ConfigSchema = cli.command {
        emit(&(serde_json::to_string_pretty(&config_schema())? + "\n"));
        return Ok(0);
    }
    let cfg = resolve_config(opts)?;
    let out = opts.out.clone();
    if let Some(o) = &out {
        prepare_out_dir(o, &RunManifest::new(&cli.command, opts, &cfg))?;
    }
    let seed = opts.seed;
    let summary: Value = match &cli.command {
        Command::ConfigSchema => unreachable!("handled above"),
        Command::SynthData => {
            let out = require_out(opts)?;
            let (train, test) = synth_dataset(&cfg.data, seed)?;
            let n = write_dataset(out, &[("train", &train), ("test", &test)])?;
            json!({"seed": seed, "samples": n, "train": train.len(), "test": test.len()})
        }
        Command::Init => {
            let out = require_out(opts)?;
            let model = AvModel::new(cfg.network.clone(), seed)?;
            Checkpoint::from_model(&model).save(&out.join("model.ckpt"))?;
            json!({"seed": seed, "parameters": model.num_parameters()})
        }
        Command::Train => cmd_train(opts, &cfg, out.as_deref())?,
        Command::Eval => cmd_eval(opts, &cfg)?,
        Command::Energy { sample } => cmd_energy(opts, &cfg, *sample, out.as_deref())?,
        Command::Causality { trials, sample } => {
            let v = cmd_causality(opts, &cfg, *trials, *sample)?;
            if let Some(o) = &out {
                write_json(&o.join("causality.json"), &v)?;
            }
            emit(&(serde_json::to_string_pretty(&v)? + "\n"));
            return Ok(if v["pass"] == json!(true) { 0 } else { 2 });
        }
        Command::Curve => cmd_curve(opts, &cfg, out.as_deref())?,
        Command::Ablation { sets } => cmd_ablation(opts, &cfg, sets, out.as_deref())?,
    };
    if let Some(o) = &out {
        write_json(&o.join(format!("{}.json", cli.command.name())), &summary)?;
    }
    emit(&(serde_json::to_string_pretty(&summary)? + "\n"));
    Ok(0)
}

fn cmd_train(opts: &Opts, cfg: &RunConfig, out: Option<&Path>) -> Result<Value> {
    let data = load_data(opts, cfg)?;
    let test = (!data.test.is_empty()).then_some(data.test.as_ref());
    let splits = Splits {
        train: data.train.as_ref(),
        test,
        prepared: None,
    };
    let run = RunOutput {
        dir: out.map(Path::to_path_buf),
    };
    let mut r = run_pipeline(&cfg.network, &cfg.training, opts.seed, &splits, &run)?;
    if let Some(o) = out {
        Checkpoint::from_model(&r.model).save(&o.join("model.ckpt"))?;
    }
    let test_acc = match test {
        Some(t) => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let f = crate::training::Features::load(t, cfg.network.timesteps, cfg.network.fusion_mode, false, &mut rng)?;
            Some(evaluate(&mut r.model, &f, cfg.training.batch_size)?)
        }
        None => None,
    };
    Ok(json!({
        "seed": opts.seed,
        "fusion_mode": cfg.network.fusion_mode,
        "epochs": r.logs.len(),
        "final_loss": r.logs.last().map(|l| l.loss),
        "test_acc": test_acc,
    }))
}

fn test_features(opts: &Opts, cfg: &NetworkConfig, data: &Data) -> Result<crate::training::Features> {
    if data.test.is_empty() {
        return Err(Error::EmptyInput("test split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    crate::training::Features::load(data.test.as_ref(), cfg.timesteps, cfg.fusion_mode, false, &mut rng)
}

fn cmd_eval(opts: &Opts, cfg: &RunConfig) -> Result<Value> {
    let (mut model, _) = load_model(opts, cfg)?;
    let data = load_data(opts, cfg)?;
    let f = test_features(opts, &model.cfg, &data)?;
    let logits = infer_all(&mut model, &f, cfg.training.batch_size)?;
    let mut correct = 0usize;
    for (o, &y) in logits.iter().zip(&f.labels) {
        correct += usize::from(predict(o, opts.upto_t)? == y);
    }
    Ok(json!({
        "seed": opts.seed,
        "accuracy": correct as f64 / f.len() as f64,
        "samples": f.len(),
        "upto_t": opts.upto_t,
        "fusion_mode": model.cfg.fusion_mode,
    }))
}

fn cmd_energy(opts: &Opts, cfg: &RunConfig, sample: usize, out: Option<&Path>) -> Result<Value> {
    let (mut model, _) = load_model(opts, cfg)?;
    let data = load_data(opts, cfg)?;
    if sample >= data.test.len() {
        return Err(Error::Config(format!("sample {sample} out of {} test samples", data.test.len())));
    }
    let raw = data.test.raw(sample)?;
    let input = raw_input(&raw, model.cfg.timesteps, &default_voxelizer)?;
    let report = estimate_energy(&mut model, &input)?;
    if let Some(o) = out {
        std::fs::write(o.join("energy.txt"), report.to_text())?;
    }
    emit(&report.to_text());
    let mut v = serde_json::to_value(&report)?;
    v["seed"] = json!(opts.seed);
    Ok(v)
}

fn cmd_causality(opts: &Opts, cfg: &RunConfig, trials: usize, sample: usize) -> Result<Value> {
    let (mut model, from_ckpt) = load_model(opts, cfg)?;
    let data = load_data(opts, cfg)?;
    if sample >= data.test.len() {
        return Err(Error::Config(format!("sample {sample} out of {} test samples", data.test.len())));
    }
    let raw = data.test.raw(sample)?;
    if !from_ckpt {
        // Untrained statistics leave most layers silent; calibrate so the probe exercises every path.
        model.calibrate_batch_norm(&raw_input(&raw, model.cfg.timesteps, &default_voxelizer)?)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let v = verify_causality_raw(&mut model, &raw, trials, &mut rng, &default_voxelizer)?;
    info!("causality {}", if v.pass { "pass" } else { "FAIL" });
    let mut j = serde_json::to_value(&v)?;
    j["seed"] = json!(opts.seed);
    Ok(j)
}

fn cmd_curve(opts: &Opts, cfg: &RunConfig, out: Option<&Path>) -> Result<Value> {
    let (mut model, _) = load_model(opts, cfg)?;
    let data = load_data(opts, cfg)?;
    let f = test_features(opts, &model.cfg, &data)?;
    let curve = accuracy_over_time(&mut model, &f, cfg.training.batch_size)?;
    if let Some(o) = out {
        std::fs::write(o.join("curve.csv"), curve_csv(&curve))?;
    }
    Ok(json!({"seed": opts.seed, "samples": f.len(), "accuracy": curve}))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cue_positions: BTreeSet<usize>,
    pub n_as: usize,
    pub n_s: usize,
    pub parameters: usize,
    pub test_acc: f64,
    pub final_loss: f64,
}

/// Aligned plain-text comparison table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<12} {:>5} {:>4} {:>10} {:>9} {:>10}\n", "cues", "n_as", "n_s", "params", "test_acc", "loss");
    for r in rows {
        let cues: Vec<String> = r.cue_positions.iter().map(usize::to_string).collect();
        s += &format!(
            "{:<12} {:>5} {:>4} {:>10} {:>9.4} {:>10.4}\n",
            format!("{{{}}}", cues.join(",")),
            r.n_as,
            r.n_s,
            r.parameters,
            r.test_acc,
            r.final_loss
        );
    }
    s
}

fn cmd_ablation(opts: &Opts, cfg: &RunConfig, sets: &str, out: Option<&Path>) -> Result<Value> {
    let sets: Vec<BTreeSet<usize>> = sets
        .split(';')
        .map(|s| parse_cues(s).map_err(Error::Config))
        .collect::<Result<_>>()?;
    if sets.iter().any(BTreeSet::is_empty) {
        return Err(Error::Config("empty cue set in ablation".into()));
    }
    let data = load_data(opts, cfg)?;
    let mut net = cfg.network.clone();
    net.fusion_mode = FusionMode::HiAvsnn;
    let prepared = Prepared::load(data.train.as_ref(), Some(data.test.as_ref()), net.timesteps, opts.seed)?;
    let splits = Splits {
        train: data.train.as_ref(),
        test: None,
        prepared: Some(&prepared),
    };
    let sub = |name: &str| -> Result<RunOutput> {
        Ok(RunOutput {
            dir: match out {
                Some(o) => {
                    let d = o.join(name);
                    std::fs::create_dir_all(&d)?;
                    Some(d)
                }
                None => None,
            },
        })
    };
    let (visual, audio, _) = pretrain(&net, &cfg.training, opts.seed, &splits, &sub("pretrain")?)?;
    let test = prepared.test.as_ref().expect("loaded with a test split");
    let mut rows = Vec::new();
    for set in sets {
        let mut n = net.clone();
        n.set_cue_positions(set.clone());
        n.validate()?;
        let name: Vec<String> = set.iter().map(usize::to_string).collect();
        let (mut model, logs) = finetune(&n, &cfg.training, opts.seed, &visual, &audio, &splits, &sub(&format!("cues_{}", name.join("_")))?)?;
        let acc = evaluate(&mut model, test, cfg.training.batch_size)?;
        info!("cues {set:?}: test accuracy {acc:.4}");
        rows.push(AblationRow {
            cue_positions: set,
            n_as: n.n_as,
            n_s: n.n_s,
            parameters: model.num_parameters(),
            test_acc: acc,
            final_loss: logs.last().map_or(f64::NAN, |l| l.loss),
        });
    }
    let table = ablation_table(&rows);
    if let Some(o) = out {
        std::fs::write(o.join("ablation.txt"), &table)?;
    }
    emit(&table);
    Ok(json!({"seed": opts.seed, "rows": rows}))
}

/// Machine-readable error report printed on failure.
pub fn error_json(e: &Error) -> Value {
    json!({"error": {"kind": e.kind(), "message": e.to_string()}})
}
