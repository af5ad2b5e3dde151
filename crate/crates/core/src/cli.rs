//! Command-line front end. Every command writes a `run.json` recording its
//! arguments and fully resolved configuration; `replay` re-runs one.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};

use crate::abx::Task;
use crate::corpus::{load_corpus, validate_corpus, Corpus, Split};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::pipeline::{evaluation, run_experiment, Evaluation, ExperimentConfig, ExperimentReport, TestMask, TrainMode};
use crate::prep::Preprocessor;
use crate::report::ResultSet;
use crate::structure::archive_parallelism;
use crate::synth::{generate_corpus, oracle_report, SynthConfig};
use crate::wsmf::write_atomic;

const MODEL_FORMAT: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "abnet", version, about = "Weakly supervised audio-visual phone embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Within,
    Across,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Within => Task::Within,
            TaskArg::Across => Task::Across,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON file overriding default settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic audio-visual corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit preprocessing on the training split and save the bundle.
    Prepare {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a network (or record raw features) for one training mode.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, ignore_case = true)]
        mode: TrainMode,
        #[arg(long)]
        out: PathBuf,
        /// Preprocessing bundle from `prepare`; fitted afresh when absent.
        #[arg(long)]
        prep: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write frame embeddings of a corpus split.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, ignore_case = true)]
        test_mask: TestMask,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, ignore_case = true, default_value = "test")]
        split: SplitArg,
        #[command(flatten)]
        common: Common,
    },
    /// Minimal-pair ABX error on the test split.
    EvalAbx {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, ignore_case = true)]
        task: TaskArg,
        #[arg(long, value_enum, ignore_case = true)]
        test_mask: TestMask,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Parallelism of feature difference vectors on the test split.
    EvalParallelism {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, ignore_case = true)]
        test_mask: TestMask,
        #[arg(long)]
        report: PathBuf,
        /// Optional bar chart.
        #[arg(long)]
        svg: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// ABX accuracy of the audio phone against its competitor under
    /// substituted visual streams.
    EvalMcgurk {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate experiment or evaluation reports into a table and charts.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run every training mode and analysis on one corpus.
    Experiment {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run the command recorded in a run.json.
    Replay { run: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: Value,
    /// Command-specific facts such as training mode and test mask.
    #[serde(default)]
    pub context: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelInfo {
    format_version: u32,
    mode: TrainMode,
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv, None) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn json_text<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, text.as_bytes())
}

/// Defaults, then the config file (or the replayed config), then `--seed`.
fn resolve<C: DeserializeOwned + Default>(common: Option<&Common>, replayed: Option<&Value>) -> Result<C> {
    if let Some(v) = replayed {
        return Ok(serde_json::from_value(v.clone())?);
    }
    match common.and_then(|c| c.config.as_ref()) {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.clone()))?;
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
        }
        None => Ok(C::default()),
    }
}

fn experiment_config(common: &Common, replayed: Option<&Value>) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = resolve(Some(common), replayed)?;
    if let (Some(seed), None) = (common.seed, replayed) {
        cfg.seed = seed;
    }
    Ok(cfg.resolved())
}

fn record(command: &str, argv: &[String], seed: u64, config: &impl Serialize, context: Value) -> Result<RunRecord> {
    Ok(RunRecord {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        argv: argv.to_vec(),
        seed,
        config: serde_json::to_value(config)?,
        context,
    })
}

/// `r.json` -> `r.run.json`, next to the report it describes.
fn sidecar(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    report.with_file_name(format!("{stem}.run.json"))
}

fn load_valid_corpus(path: &Path) -> Result<Corpus> {
    let corpus = load_corpus(path)?;
    let report = validate_corpus(&corpus);
    if let Some(v) = report.violations.first() {
        return Err(Error::MalformedManifest(format!(
            "{} validation violation(s), first: {}",
            report.violations.len(),
            v.message
        )));
    }
    Ok(corpus)
}

/// Load a trained (or raw) model directory.
fn load_model(dir: &Path) -> Result<(TrainMode, Preprocessor, Option<Network<f32>>)> {
    let path = dir.join("model.json");
    let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingFile(path.clone()))?;
    let info: ModelInfo = serde_json::from_str(&text)?;
    if info.format_version != MODEL_FORMAT {
        return Err(Error::InvalidConfig(format!("unsupported model format version {}", info.format_version)));
    }
    let prep = Preprocessor::load(&dir.join("prep"))?;
    let net = match info.mode {
        TrainMode::Raw => None,
        _ => Some(Network::<f32>::load(&dir.join("network"))?),
    };
    Ok((info.mode, prep, net))
}

struct Loaded {
    train: Corpus,
    test: Corpus,
    mode: TrainMode,
    prep: Preprocessor,
    net: Option<Network<f32>>,
}

impl Loaded {
    fn open(model: &Path, corpus: &Path) -> Result<Self> {
        let (mode, prep, net) = load_model(model)?;
        let corpus = load_valid_corpus(corpus)?;
        Ok(Self {
            train: corpus.split(Split::Train),
            test: corpus.split(Split::Test),
            mode,
            prep,
            net,
        })
    }

    fn evaluation(&self, cfg: &ExperimentConfig) -> Result<Evaluation<'_>> {
        evaluation(self.prep.clone(), &self.train, &self.test, cfg)
    }
}

fn eval_context(mode: TrainMode, mask: TestMask, task: Option<Task>) -> Value {
    json!({"mode": mode, "test_mask": mask, "task": task})
}

fn dispatch(command: Command, argv: &[String], replayed: Option<&Value>) -> Result<()> {
    match command {
        Command::Synth { out, common } => {
            let mut cfg: SynthConfig = resolve(Some(&common), replayed)?;
            if let (Some(seed), None) = (common.seed, replayed) {
                cfg.seed = seed;
            }
            generate_corpus(&cfg, &out)?;
            write_text(&out.join("oracle.json"), &json_text(&oracle_report(&cfg)?)?)?;
            let rec = record("synth", argv, cfg.seed, &cfg, Value::Null)?;
            write_text(&out.join("run.json"), &json_text(&rec)?)
        }
        Command::Prepare { corpus, out, common } => {
            let cfg = experiment_config(&common, replayed)?;
            let corpus = load_valid_corpus(&corpus)?;
            let prep = Preprocessor::fit(&corpus.split(Split::Train), &cfg.prep)?.quantized();
            prep.save(&out)?;
            let rec = record("prepare", argv, cfg.seed, &cfg, Value::Null)?;
            write_text(&out.join("run.json"), &json_text(&rec)?)
        }
        Command::Train { corpus, mode, out, prep, common } => {
            let cfg = experiment_config(&common, replayed)?;
            let corpus = load_valid_corpus(&corpus)?;
            let train_corpus = corpus.split(Split::Train);
            let test_corpus = corpus.split(Split::Test);
            let prep = match prep {
                Some(dir) => Preprocessor::load(&dir)?,
                None => Preprocessor::fit(&train_corpus, &cfg.prep)?.quantized(),
            };
            prep.save(&out.join("prep"))?;
            if mode != TrainMode::Raw {
                let eval = evaluation(prep, &train_corpus, &test_corpus, &cfg)?;
                let (net, log) = eval.train(mode, &cfg)?;
                net.save(&out.join("network"))?;
                write_text(&out.join("train_log.csv"), &log.to_csv())?;
                write_text(&out.join("train_log.json"), &json_text(&log)?)?;
            }
            let info = ModelInfo {
                format_version: MODEL_FORMAT,
                mode,
            };
            write_text(&out.join("model.json"), &json_text(&info)?)?;
            let rec = record("train", argv, cfg.seed, &cfg, json!({"mode": mode}))?;
            write_text(&out.join("run.json"), &json_text(&rec)?)
        }
        Command::Embed {
            model,
            corpus,
            test_mask,
            out,
            split,
            common,
        } => {
            let cfg = experiment_config(&common, replayed)?;
            let (mode, prep, net) = load_model(&model)?;
            let corpus = load_valid_corpus(&corpus)?;
            let corpus = match split {
                SplitArg::Train => corpus.split(Split::Train),
                SplitArg::Test => corpus.split(Split::Test),
                SplitArg::All => corpus,
            };
            let prepared = crate::prep::PreparedCorpus::new(&corpus, &prep)?;
            let mask = test_mask.mask(&prepared.layout)?;
            let archive = match &net {
                Some(net) => crate::network::embed_corpus(net, &prepared, &mask)?,
                None => crate::network::raw_archive(&prepared, &mask)?,
            };
            archive.save(&out)?;
            let rec = record("embed", argv, cfg.seed, &cfg, eval_context(mode, test_mask, None))?;
            write_text(&out.join("run.json"), &json_text(&rec)?)
        }
        Command::EvalAbx {
            model,
            corpus,
            task,
            test_mask,
            report,
            common,
        } => {
            let cfg = experiment_config(&common, replayed)?;
            let loaded = Loaded::open(&model, &corpus)?;
            let eval = loaded.evaluation(&cfg)?;
            let archive = eval.archive(loaded.net.as_ref(), test_mask)?;
            let r = eval.abx(task.into(), &archive)?;
            write_text(&report, &r.to_json())?;
            let rec = record("eval-abx", argv, cfg.seed, &cfg, eval_context(loaded.mode, test_mask, Some(task.into())))?;
            write_text(&sidecar(&report), &json_text(&rec)?)
        }
        Command::EvalParallelism {
            model,
            corpus,
            test_mask,
            report,
            svg,
            common,
        } => {
            let cfg = experiment_config(&common, replayed)?;
            let loaded = Loaded::open(&model, &corpus)?;
            let eval = loaded.evaluation(&cfg)?;
            let archive = eval.archive(loaded.net.as_ref(), test_mask)?;
            let r = archive_parallelism(&archive, &loaded.test)?;
            write_text(&report, &r.to_json())?;
            write_text(&report.with_extension("csv"), &r.to_csv())?;
            if let Some(svg) = svg {
                let set = ResultSet {
                    abx: Vec::new(),
                    parallelism: vec![(loaded.mode, test_mask, r)],
                };
                write_text(&svg, &set.parallelism_chart())?;
            }
            let rec = record("eval-parallelism", argv, cfg.seed, &cfg, eval_context(loaded.mode, test_mask, None))?;
            write_text(&sidecar(&report), &json_text(&rec)?)
        }
        Command::EvalMcgurk { model, corpus, report, common } => {
            let cfg = experiment_config(&common, replayed)?;
            let loaded = Loaded::open(&model, &corpus)?;
            let net = loaded
                .net
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("McGurk evaluation needs a trained network, not raw features".into()))?;
            let eval = loaded.evaluation(&cfg)?;
            let r = eval.mcgurk(net, &cfg)?;
            write_text(&report, &r.to_json())?;
            let rec = record("eval-mcgurk", argv, cfg.seed, &cfg, json!({"mode": loaded.mode}))?;
            write_text(&sidecar(&report), &json_text(&rec)?)
        }
        Command::Report { out, inputs } => {
            let mut set = ResultSet::default();
            for input in &inputs {
                set.extend(read_results(input)?);
            }
            write_outputs(&out, &set)?;
            let rec = record("report", argv, 0, &Value::Null, json!({"inputs": inputs}))?;
            write_text(&out.join("run.json"), &json_text(&rec)?)
        }
        Command::Experiment { corpus, out, common } => {
            let cfg = experiment_config(&common, replayed)?;
            let corpus = load_valid_corpus(&corpus)?;
            let r = run_experiment(&corpus, &cfg)?;
            write_text(&out.join("report.json"), &r.to_json())?;
            let mc: BTreeMap<&str, _> = r.mcgurk.iter().map(|m| (m.mode.name(), &m.report)).collect();
            write_text(&out.join("mcgurk.json"), &json_text(&mc)?)?;
            write_outputs(&out, &ResultSet::from_experiment(&r))?;
            let rec = record("experiment", argv, cfg.seed, &cfg, Value::Null)?;
            write_text(&out.join("run.json"), &json_text(&rec)?)
        }
        Command::Replay { run } => {
            let text = std::fs::read_to_string(&run).map_err(|_| Error::MissingFile(run.clone()))?;
            let rec: RunRecord = serde_json::from_str(&text)?;
            let cli = Cli::try_parse_from(&rec.argv).map_err(|e| Error::InvalidConfig(format!("recorded arguments do not parse: {e}")))?;
            if matches!(cli.command, Command::Replay { .. }) {
                return Err(Error::InvalidConfig("a replay record cannot replay itself".into()));
            }
            let config = (!rec.config.is_null()).then_some(&rec.config);
            dispatch(cli.command, &rec.argv, config)
        }
    }
}

fn write_outputs(out: &Path, set: &ResultSet) -> Result<()> {
    write_text(&out.join("table.csv"), &set.table_csv())?;
    write_text(&out.join("features.svg"), &set.feature_chart())?;
    write_text(&out.join("parallelism.svg"), &set.parallelism_chart())
}

/// An experiment report, or one evaluation report with its run record.
fn read_results(path: &Path) -> Result<ResultSet> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    if let Ok(r) = serde_json::from_str::<ExperimentReport>(&text) {
        return Ok(ResultSet::from_experiment(&r));
    }
    let side = sidecar(path);
    let side_text = std::fs::read_to_string(&side).map_err(|_| Error::MissingFile(side.clone()))?;
    let rec: RunRecord = serde_json::from_str(&side_text)?;
    #[derive(Deserialize)]
    struct Ctx {
        mode: TrainMode,
        test_mask: TestMask,
    }
    let ctx: Ctx = serde_json::from_value(rec.context)
        .map_err(|e| Error::MalformedManifest(format!("{}: no mode or test mask recorded ({e})", side.display())))?;
    let mut set = ResultSet::default();
    match rec.command.as_str() {
        "eval-abx" => set.abx.push((ctx.mode, ctx.test_mask, serde_json::from_str(&text)?)),
        "eval-parallelism" => set.parallelism.push((ctx.mode, ctx.test_mask, serde_json::from_str(&text)?)),
        other => {
            return Err(Error::MalformedManifest(format!("{}: cannot aggregate output of {other}", path.display())));
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run_cli(["abnet", "frobnicate"]), 1);
        assert_eq!(run_cli(["abnet", "train", "--corpus", "x"]), 1);
        assert_eq!(run_cli(["abnet", "--help"]), 0);
    }

    #[test]
    fn masks_and_modes_parse_case_insensitively() {
        let cli = Cli::try_parse_from(["abnet", "eval-abx", "--model", "m", "--corpus", "c", "--task", "within", "--test-mask", "AV", "--report", "r.json"]).unwrap();
        match cli.command {
            Command::EvalAbx { test_mask, task, .. } => {
                assert_eq!(test_mask, TestMask::Av);
                assert_eq!(task, TaskArg::Within);
            }
            _ => unreachable!(),
        }
        let cli = Cli::try_parse_from(["abnet", "train", "--corpus", "c", "--mode", "Mono-V", "--out", "m"]).unwrap();
        assert!(matches!(cli.command, Command::Train { mode: TrainMode::MonoV, .. }));
    }

    #[test]
    fn sidecar_sits_next_to_report() {
        assert_eq!(sidecar(Path::new("out/r.json")), PathBuf::from("out/r.run.json"));
        assert_eq!(sidecar(Path::new("r")), PathBuf::from("r.run.json"));
    }

    #[test]
    fn missing_corpus_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("m");
        let code = run_cli(["abnet", "prepare", "--corpus", "/nonexistent/manifest.json", "--out", out.to_str().unwrap()]);
        assert_eq!(code, 2);
    }
}
