//! Commands behind the `rrm` binary. Each command reads its inputs, does its
//! work inside a pool of `threads` workers and writes its outputs plus a
//! `manifest.json` under one output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rrm_core::attacks::{AdversaryBudget, Norm, TemperatureScaled};
use rrm_core::bench::{evaluate, read_report, reports_to_csv, Evaluation, RunReport};
use rrm_core::data::{generate_synthetic, load_dataset, save_dataset, Dataset, SyntheticSpec};
use rrm_core::models::{load_checkpoint, save_checkpoint, Model};
use rrm_core::robustify::{robustify_dataset, RobustifyConfig};
use rrm_core::trainers::{parse_real, train, Method, TrainConfig};
use rrm_core::{par, Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable that replaces the seed of any loaded config.
pub const SEED_ENV: &str = "RRM_SEED";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Record of one command invocation and the files it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// Resolved configuration (after defaults and seed overrides).
    pub config: serde_json::Value,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
    /// File name under `out_dir` -> sha256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config_path: Option<&Path>,
        config: serde_json::Value,
        seed: u64,
        out_dir: &Path,
        threads: usize,
    ) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config,
            seed,
            out_dir: out_dir.to_path_buf(),
            threads,
            artifacts: BTreeMap::new(),
        }
    }

    /// Hashes `out_dir/name` and records it.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        self.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        write_file(&path, text)?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Re-hashes every artifact; names the first one whose contents changed.
    pub fn verify(&self) -> Result<()> {
        for (name, want) in &self.artifacts {
            let path = self.out_dir.join(name);
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            if &sha256_hex(&bytes) != want {
                return Err(Error::Contract(format!("artifact {} does not match its recorded hash", path.display())));
            }
        }
        Ok(())
    }
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_toml(cfg: &TrainConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// Reads a TOML config and applies the seed override from the environment.
pub fn load_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut cfg = parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// Loads a checkpoint for use as a teacher: frozen, with its recorded
/// training time taken from a `report.json` next to it when present.
pub fn load_teacher(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let mut t = load_checkpoint(path)?;
    t.freeze();
    let report = path.with_file_name(REPORT_JSON_FILE);
    if report.exists() {
        t.provenance.train_time_s = read_report(&report)?.total_time_s;
    }
    Ok(t)
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub teacher: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub threads: usize,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub report: RunReport,
    pub manifest: RunManifest,
}

/// Trains the configured method and writes the checkpoint, the report as
/// CSV and JSON, the resolved config and the manifest.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutput> {
    let cfg = load_config(&args.config)?;
    let teacher = match (&args.teacher, cfg.method.needs_teacher()) {
        (Some(p), true) => Some(load_teacher(p)?),
        (None, true) => {
            return Err(Error::Config(format!("method {} needs a teacher checkpoint (--teacher)", cfg.method)))
        }
        (Some(_), false) => return Err(Error::Config(format!("method {} does not take a teacher", cfg.method))),
        (None, false) => None,
    };
    let data = load_dataset(&args.data)?;
    let (model, report) = par::with_threads(args.threads, || train(&cfg, &data, teacher.as_ref()))?;

    let dir = &args.out_dir;
    ensure_dir(dir)?;
    save_checkpoint(&model, dir.join(CHECKPOINT_FILE))?;
    write_file(&dir.join(REPORT_CSV_FILE), reports_to_csv(std::slice::from_ref(&report)))?;
    write_file(&dir.join(REPORT_JSON_FILE), report.to_json()?)?;
    write_file(&dir.join(CONFIG_ECHO_FILE), config_to_toml(&cfg)?)?;
    let mut manifest = RunManifest::new("train", Some(&args.config), to_json(&cfg), cfg.seed, dir, args.threads);
    for name in [CHECKPOINT_FILE, REPORT_CSV_FILE, REPORT_JSON_FILE, CONFIG_ECHO_FILE] {
        manifest.record(name)?;
    }
    manifest.write()?;
    Ok(TrainOutput { model, report, manifest })
}

#[derive(Clone, Debug)]
pub struct GenDataArgs {
    pub spec: SyntheticSpec,
    /// Extra samples written as a held-out split.
    pub n_test: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

pub const TRAIN_DATA_FILE: &str = "train.rrmd";
pub const TEST_DATA_FILE: &str = "test.rrmd";

/// Draws `spec.n` training and `n_test` held-out samples of the synthetic task.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<RunManifest> {
    let spec = SyntheticSpec { n: args.spec.n + args.n_test, ..args.spec.clone() };
    let all = generate_synthetic(&spec, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    let (train_set, test_set) = all.split_at(args.spec.n);
    let dir = &args.out_dir;
    ensure_dir(dir)?;
    let mut manifest = RunManifest::new("gen-data", None, to_json(&args.spec), args.seed, dir, 1);
    manifest.config["n_test"] = args.n_test.into();
    save_dataset(&train_set, dir.join(TRAIN_DATA_FILE))?;
    manifest.record(TRAIN_DATA_FILE)?;
    if args.n_test > 0 {
        save_dataset(&test_set, dir.join(TEST_DATA_FILE))?;
        manifest.record(TEST_DATA_FILE)?;
    }
    manifest.write()?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct AttackArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub restarts: usize,
    /// Defaults from the norm when absent.
    pub step_size: Option<f64>,
    pub pixel_box: Option<[f64; 2]>,
    /// Attack the logits divided by this temperature.
    pub temperature: Option<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
}

impl AttackArgs {
    pub fn budget(&self) -> Result<AdversaryBudget> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be a non-negative number, got {}", self.epsilon)));
        }
        let mut b = AdversaryBudget::new(self.norm, self.epsilon, self.steps)
            .with_restarts(self.restarts)
            .with_box(self.pixel_box);
        if let Some(s) = self.step_size {
            b = b.with_step_size(s);
        }
        b.validate()?;
        Ok(b)
    }
}

pub const EVAL_FILE: &str = "eval.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub samples: usize,
    pub natural_acc: f64,
    pub adv_acc: f64,
    pub budget: AdversaryBudget,
    pub temperature: Option<f64>,
    pub seed: u64,
}

/// Evaluates `model`, seen through `temperature` when given.
pub fn evaluate_with(
    model: &Model,
    data: &Dataset,
    budget: &AdversaryBudget,
    temperature: Option<f64>,
    seed: u64,
) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match temperature {
        Some(t) => {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("temperature must be positive, got {t}")));
            }
            evaluate(&TemperatureScaled { model, t }, data, Some(budget), &mut rng)
        }
        None => evaluate(model, data, Some(budget), &mut rng),
    }
}

/// Natural and adversarial accuracy of a checkpoint.
pub fn cmd_attack(args: &AttackArgs) -> Result<AttackReport> {
    let budget = args.budget()?;
    let model = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let e = par::with_threads(args.threads, || evaluate_with(&model, &data, &budget, args.temperature, args.seed))?;
    let report = AttackReport {
        samples: data.len(),
        natural_acc: e.natural_acc,
        adv_acc: e.adv_acc.unwrap_or(e.natural_acc),
        budget,
        temperature: args.temperature,
        seed: args.seed,
    };
    let dir = &args.out_dir;
    ensure_dir(dir)?;
    write_file(&dir.join(EVAL_FILE), serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?)?;
    let mut manifest = RunManifest::new("attack", None, to_json(&report), args.seed, dir, args.threads);
    manifest.record(EVAL_FILE)?;
    manifest.write()?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct RobustifyArgs {
    pub teacher: PathBuf,
    pub data: PathBuf,
    pub config: RobustifyConfig,
    /// Only the first `limit` samples are robustified.
    pub limit: Option<usize>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
}

pub const ROBUST_DATA_FILE: &str = "robust.rrmd";

/// Writes a robustified copy of the dataset.
pub fn cmd_robustify(args: &RobustifyArgs) -> Result<Dataset> {
    args.config.validate()?;
    let teacher = load_teacher(&args.teacher)?;
    let mut data = load_dataset(&args.data)?;
    if let Some(k) = args.limit {
        let idx: Vec<usize> = (0..k.min(data.len())).collect();
        data = data.subset(&idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let out = par::with_threads(args.threads, || robustify_dataset(&teacher, &data, &args.config, &mut rng))?;
    let dir = &args.out_dir;
    ensure_dir(dir)?;
    save_dataset(&out, dir.join(ROBUST_DATA_FILE))?;
    let mut cfg = to_json(&args.config);
    cfg["limit"] = to_json(&args.limit);
    let mut manifest = RunManifest::new("robustify", None, cfg, args.seed, dir, args.threads);
    manifest.record(ROBUST_DATA_FILE)?;
    manifest.write()?;
    Ok(out)
}

/// Parses a comma-separated list of reals; fractions such as `1/1000` are allowed.
pub fn parse_lambda_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(|t| parse_real(t.trim())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub natural_acc: Option<f64>,
    pub adv_acc: Option<f64>,
    pub epoch_time_mean_s: Option<f64>,
    /// Why the row has no results.
    pub error: Option<String>,
}

/// Trains one RRM student per lambda and evaluates each under `budget`.
/// Rows come back sorted by lambda; a lambda the trainer rejects yields a
/// row carrying the error instead of aborting the sweep.
pub fn sweep_lambda(
    base: &TrainConfig,
    lambdas: &[f64],
    data: &Dataset,
    eval_data: &Dataset,
    teacher: &Model,
    budget: &AdversaryBudget,
    eval_seed: u64,
) -> Result<Vec<SweepRow>> {
    if base.method != Method::Rrm {
        return Err(Error::Config(format!("a lambda sweep needs method rrm, got {}", base.method)));
    }
    let mut lambdas = lambdas.to_vec();
    lambdas.sort_by(f64::total_cmp);
    // Runs are independent, so they share the pool; the output is the same
    // as a sequential sweep.
    let rows = par::map(&lambdas, |&lambda| -> Result<SweepRow> {
        let cfg = TrainConfig { lambda, ..base.clone() };
        match train(&cfg, data, Some(teacher)) {
            Ok((model, report)) => {
                let e = evaluate_with(&model, eval_data, budget, None, eval_seed)?;
                Ok(SweepRow {
                    lambda,
                    natural_acc: Some(e.natural_acc),
                    adv_acc: e.adv_acc,
                    epoch_time_mean_s: Some(report.epoch_time_mean_s),
                    error: None,
                })
            }
            Err(e) if e.is_usage() => Ok(SweepRow {
                lambda,
                natural_acc: None,
                adv_acc: None,
                epoch_time_mean_s: None,
                error: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        }
    });
    rows.into_iter().collect()
}

pub const SWEEP_COLUMNS: [&str; 5] = ["lambda", "natural_acc", "adv_acc", "epoch_time_mean_s", "error"];

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = SWEEP_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        // Quote the note; it may contain commas.
        let note = r.error.as_deref().map(|m| format!("\"{}\"", m.replace('"', "\"\""))).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.lambda,
            opt(r.natural_acc),
            opt(r.adv_acc),
            opt(r.epoch_time_mean_s),
            note
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct SweepArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    /// Held-out data for evaluation; the training data when absent.
    pub eval_data: Option<PathBuf>,
    pub teacher: PathBuf,
    pub lambdas: Vec<f64>,
    /// Attack steps and restarts; epsilon, norm and box come from the config budget.
    pub steps: usize,
    pub restarts: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
}

pub const SWEEP_FILE: &str = "sweep.csv";

pub fn cmd_sweep_lambda(args: &SweepArgs) -> Result<Vec<SweepRow>> {
    let cfg = load_config(&args.config)?;
    let teacher = load_teacher(&args.teacher)?;
    let data = load_dataset(&args.data)?;
    let eval_data = match &args.eval_data {
        Some(p) => load_dataset(p)?,
        None => data.clone(),
    };
    let budget = AdversaryBudget {
        steps: args.steps,
        restarts: args.restarts,
        step_size: AdversaryBudget::default_step_size(cfg.budget.norm, cfg.budget.epsilon, args.steps),
        ..cfg.budget
    };
    budget.validate()?;
    let rows = par::with_threads(args.threads, || {
        sweep_lambda(&cfg, &args.lambdas, &data, &eval_data, &teacher, &budget, args.seed)
    })?;
    let dir = &args.out_dir;
    ensure_dir(dir)?;
    write_file(&dir.join(SWEEP_FILE), sweep_to_csv(&rows))?;
    let mut echo = to_json(&cfg);
    echo["lambdas"] = to_json(&args.lambdas);
    echo["eval_budget"] = to_json(&budget);
    let mut manifest = RunManifest::new("sweep-lambda", Some(&args.config), echo, cfg.seed, dir, args.threads);
    manifest.record(SWEEP_FILE)?;
    manifest.write()?;
    Ok(rows)
}

/// Process exit code for a failed command: 1 for bad input, 2 for failures while running.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_usage() {
        1
    } else {
        2
    }
}
