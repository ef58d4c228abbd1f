//! Command-line front end: data generation, both training stages,
//! evaluation suites and decode traces. Every run writes its outputs and one
//! `manifest.json` into a run directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    eval_needle, eval_recall, gen_needle, gen_pairwise, gen_synthetic_qa, needle_suite, needle_training_sequence,
    standard_depths, EvalReport, ModelScorer, NeedleConfig, NeedleSample, PairwiseConfig, PairwiseSample, QaConfig,
    RandomScorer,
};
use crate::engine::{generate, EngineConfig};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig, SelectionPlan};
use crate::paging::AugmentedSequence;
use crate::recipes::split_seed;
use crate::suites::{equivalence_check, memory_check, random_tokens};
use crate::training::{Example, TrainConfig, Trainer};

pub const SEED_ENV: &str = "RETRO_PAGER_SEED";

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVALID_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "retro-pager", version, about = "Paged KV retrieval experiments")]
pub struct Cli {
    /// JSON file with `model`, `engine`, `train` and `seed` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory; defaults to `runs/<timestamp>`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as JSONL.
    Gen(GenArgs),
    /// Run stage 1 (retriever) or stage 2 (sparse LM) training.
    Train(TrainArgs),
    /// Run an evaluation suite and write a JSON report.
    Eval(EvalArgs),
    /// Decode once and write score and audit traces.
    Trace(TraceArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Pairwise,
    Qa,
    Needle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Recall,
    Needle,
    Equivalence,
    Memory,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: DataKind,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Defaults to the model page size.
    #[arg(long)]
    pub page_size: Option<usize>,
    #[arg(long)]
    pub n_negatives: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub haystack_pages: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Optimizer updates; overrides `train.max_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// JSONL from `gen`; generated on the fly when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Starting checkpoint; a fresh model when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// Model to evaluate. Without it recall and needle use a fresh model from
    /// the config, equivalence and memory use the toy model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Held-out samples for recall, suites per depth for needle.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Sequence length of the equivalence check.
    #[arg(long, default_value_t = 1024)]
    pub tokens: usize,
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub haystack_pages: usize,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Random context length.
    #[arg(long, default_value_t = 1024)]
    pub tokens: usize,
    #[arg(long, default_value_t = 4)]
    pub query_tokens: usize,
}

/// Config file layout; every section is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    model: ModelConfig,
    engine: EngineConfig,
    train: serde_json::Map<String, serde_json::Value>,
    seed: Option<u64>,
}

/// Resolved configuration of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub engine: EngineConfig,
    pub train: TrainConfig,
    pub seed: Option<u64>,
    /// `train` keys given in the file; they overlay the preset of whichever
    /// stage runs.
    #[serde(skip)]
    pub train_overrides: serde_json::Map<String, serde_json::Value>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: ConfigFile =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig {
            model: file.model,
            engine: file.engine,
            train: TrainConfig::stage1(),
            seed: file.seed,
            train_overrides: file.train,
        };
        cfg.train = cfg.train_for(1)?;
        Ok(cfg)
    }

    /// Stage preset with the file's `train` keys applied.
    pub fn train_for(&self, stage: u8) -> Result<TrainConfig> {
        let preset = if stage == 1 { TrainConfig::stage1() } else { TrainConfig::stage2() };
        let mut v = serde_json::to_value(&preset)?;
        let obj = v.as_object_mut().expect("struct serializes to an object");
        for (k, x) in &self.train_overrides {
            if !obj.contains_key(k) {
                return Err(Error::InvalidConfig(format!("unknown train field `{k}`")));
            }
            obj.insert(k.clone(), x.clone());
        }
        let mut tc: TrainConfig = serde_json::from_value(v).map_err(|e| Error::InvalidConfig(format!("train: {e}")))?;
        tc.stage = stage;
        tc.seed = self.train.seed;
        Ok(tc)
    }

    /// Flag, then config file, then environment, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>, env: Option<&str>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match env {
            Some(v) => v.trim().parse().map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not a seed"))),
            None => Ok(0),
        }
    }
}

/// Record of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub subcommand: String,
    pub config: RunConfig,
    pub seed: u64,
    pub threads: usize,
    /// Content hash of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// Hash over the resolved config, seed and input hashes.
    pub input_hash: String,
    pub outputs: Vec<String>,
    pub wall_seconds: f64,
    pub started_at: String,
}

/// Git-style blob hash, SHA-256 flavour.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Parse `args` (program name first), run, and return the exit code. Errors
/// go to stderr as one JSON object.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": "UsageError", "message": e.to_string().trim() }));
            return EXIT_USAGE;
        }
    };
    let command: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, command) {
        Ok(manifest) => {
            println!("{}", manifest.outputs.last().map_or("", String::as_str));
            0
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => EXIT_INVALID_CONFIG,
        _ => EXIT_FAILURE,
    }
}

struct Run {
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    input_paths: Vec<PathBuf>,
    outputs: Vec<String>,
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path)?;
        self.inputs.insert(path.display().to_string(), content_hash(&bytes));
        self.input_paths.push(fs::canonicalize(path)?);
        Ok(bytes)
    }

    /// Path of a new output file; refuses to overwrite an input.
    fn output(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Ok(c) = fs::canonicalize(&p) {
            if self.input_paths.contains(&c) {
                return Err(Error::InvalidInput(format!("{} is an input of this run", p.display())));
            }
        }
        self.outputs.push(p.display().to_string());
        Ok(p)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.output(name)?;
        fs::write(p, bytes)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }
}

/// Run a parsed command and write its manifest.
pub fn execute(cli: &Cli, command: Vec<String>) -> Result<RunManifest> {
    let t = Instant::now();
    let started_at = chrono::Utc::now();
    let threads = cli.threads.unwrap_or(1);
    if threads == 0 {
        return Err(Error::InvalidConfig("--threads must be at least 1".into()));
    }
    let dir = match &cli.run_dir {
        Some(d) => d.clone(),
        None => PathBuf::from("runs").join(started_at.format("%Y%m%dT%H%M%S%.3fZ").to_string()),
    };
    let mut run = Run { dir, inputs: BTreeMap::new(), input_paths: Vec::new(), outputs: Vec::new() };
    let mut config = match &cli.config {
        Some(p) => {
            run.input(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    let seed = config.resolve_seed(cli.seed, env.as_deref())?;
    config.seed = Some(seed);
    config.model.seed = seed;
    config.model.validate()?;
    config.engine.validate()?;
    config.train.validate(config.model.n_layers)?;
    config.train.seed = seed;
    fs::create_dir_all(&run.dir)?;

    let subcommand = match &cli.command {
        Command::Gen(a) => {
            cmd_gen(&mut run, &config, seed, a)?;
            "gen"
        }
        Command::Train(a) => {
            cmd_train(&mut run, &mut config, seed, a)?;
            "train"
        }
        Command::Eval(a) => {
            cmd_eval(&mut run, &config, seed, a)?;
            "eval"
        }
        Command::Trace(a) => {
            cmd_trace(&mut run, &config, a)?;
            "trace"
        }
    };

    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&config)?);
    h.update(format!("{subcommand}:{seed}").as_bytes());
    for (k, v) in &run.inputs {
        h.update(k.as_bytes());
        h.update(v.as_bytes());
    }
    let manifest_path = run.dir.join("manifest.json");
    let mut outputs = run.outputs.clone();
    outputs.push(manifest_path.display().to_string());
    let manifest = RunManifest {
        command,
        subcommand: subcommand.to_string(),
        config,
        seed,
        threads,
        inputs: run.inputs.clone(),
        input_hash: hex::encode(h.finalize()),
        outputs,
        wall_seconds: t.elapsed().as_secs_f64(),
        started_at: started_at.to_rfc3339(),
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

fn pairwise_config(model: &ModelConfig) -> PairwiseConfig {
    PairwiseConfig { page_size: model.page_size, vocab_size: model.vocab_size, ..Default::default() }
}

fn qa_config(model: &ModelConfig) -> QaConfig {
    QaConfig { page_size: model.page_size, vocab_size: model.vocab_size, ..Default::default() }
}

fn cmd_gen(run: &mut Run, config: &RunConfig, seed: u64, a: &GenArgs) -> Result<()> {
    let page_size = a.page_size.unwrap_or(config.model.page_size);
    let vocab_size = config.model.vocab_size;
    let mut out = String::new();
    for i in 0..a.n {
        let s = split_seed(seed, false, i);
        let line = match a.kind {
            DataKind::Pairwise => {
                let d = PairwiseConfig::default();
                let cfg = PairwiseConfig {
                    page_size,
                    vocab_size,
                    n_negatives: a.n_negatives.unwrap_or(d.n_negatives),
                    max_tokens: a.max_tokens.unwrap_or(d.max_tokens),
                    ..d
                };
                serde_json::to_string(&gen_pairwise(&cfg, s)?)?
            }
            DataKind::Qa => serde_json::to_string(&gen_synthetic_qa(&QaConfig { page_size, vocab_size, ..Default::default() }, s)?)?,
            DataKind::Needle => {
                let depths = standard_depths();
                let cfg = NeedleConfig {
                    haystack_pages: a.haystack_pages,
                    page_size,
                    vocab_size,
                    depth_fraction: depths[i % depths.len()],
                    ..Default::default()
                };
                serde_json::to_string(&gen_needle(&cfg, s)?)?
            }
        };
        out.push_str(&line);
        out.push('\n');
    }
    run.write("data.jsonl", out.as_bytes())
}

/// JSONL dataset of either record type.
enum Dataset {
    Pairwise(Vec<PairwiseSample>),
    Needle(Vec<NeedleSample>),
}

fn load_dataset(text: &str) -> Result<Dataset> {
    let first = text.lines().find(|l| !l.trim().is_empty()).ok_or(Error::EmptyInput)?;
    if serde_json::from_str::<NeedleSample>(first).is_ok() {
        let samples = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<NeedleSample>>>()?;
        return Ok(Dataset::Needle(samples));
    }
    Ok(Dataset::Pairwise(crate::data::parse_jsonl(text)?))
}

fn stage_example(stage: u8, data: Option<&Dataset>, model: &ModelConfig, seed: u64, i: usize) -> Result<Example> {
    let (w, bmk) = (model.page_size, model.bookmark_token());
    match (stage, data) {
        (1, None) => gen_pairwise(&pairwise_config(model), split_seed(seed, false, i))?.to_example(w, bmk),
        (1, Some(Dataset::Pairwise(d))) => d[i % d.len()].to_example(w, bmk),
        (1, Some(Dataset::Needle(_))) => Err(Error::InvalidInput("stage 1 needs pairwise or qa data".into())),
        (_, None) => {
            let s = gen_synthetic_qa(&qa_config(model), split_seed(seed, false, i))?;
            Ok(Example::text(AugmentedSequence::from_segments(&[&s.tokens, &s.query], w, bmk)?))
        }
        (_, Some(Dataset::Pairwise(d))) => {
            let s = &d[i % d.len()];
            Ok(Example::text(AugmentedSequence::from_segments(&[&s.tokens, &s.query], w, bmk)?))
        }
        (_, Some(Dataset::Needle(d))) => {
            let (seq, loss_from) = needle_training_sequence(&d[i % d.len()], w, bmk)?;
            Ok(Example::Text { seq, loss_from, plan: None })
        }
    }
}

fn load_model(run: &mut Run, path: Option<&PathBuf>, fallback: &ModelConfig) -> Result<Model> {
    match path {
        Some(p) => Ok(Checkpoint::from_bytes(&run.input(p)?)?.model),
        None => Model::init(fallback.clone()),
    }
}

fn cmd_train(run: &mut Run, config: &mut RunConfig, seed: u64, a: &TrainArgs) -> Result<()> {
    let mut tc = config.train_for(a.stage)?;
    if let Some(s) = a.steps {
        tc.max_steps = s;
    }
    if let Some(lr) = a.lr {
        tc.learning_rate = lr;
    }
    let mut model = load_model(run, a.init.as_ref(), &config.model)?;
    if a.init.is_some() {
        config.model = model.config.clone();
    }
    tc.validate(model.config.n_layers)?;
    config.train = tc.clone();
    let data = match &a.data {
        Some(p) => Some(load_dataset(std::str::from_utf8(&run.input(p)?).map_err(|e| Error::InvalidInput(e.to_string()))?)?),
        None => None,
    };
    let mut trainer = Trainer::new(&model, tc.clone())?;
    let per = tc.examples_per_step();
    for step in 0..tc.max_steps {
        let batch = (0..per)
            .map(|j| stage_example(tc.stage, data.as_ref(), &model.config, seed, step * per + j))
            .collect::<Result<Vec<_>>>()?;
        trainer.step(&mut model, &batch)?;
    }
    let stage = if tc.max_steps == 0 { "init".to_string() } else { format!("stage{}", tc.stage) };
    let ckpt = Checkpoint { model, freeze: trainer.mask.clone(), stage, seed };
    let path = run.output("checkpoint.bin")?;
    save_checkpoint(&path, &ckpt)?;
    let mut metrics = Vec::new();
    trainer.write_metrics(&mut metrics)?;
    run.write("metrics.jsonl", &metrics)
}

fn cmd_eval(run: &mut Run, config: &RunConfig, seed: u64, a: &EvalArgs) -> Result<()> {
    match a.suite {
        Suite::Recall => {
            let model = load_model(run, a.checkpoint.as_ref(), &config.model)?;
            let (w, bmk) = (model.config.page_size, model.config.bookmark_token());
            let cases = (0..a.n)
                .map(|i| {
                    let s = gen_pairwise(&pairwise_config(&model.config), split_seed(seed, true, i))?;
                    Ok((s.sequence(w, bmk)?, s.positive_page(w)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let policy = config.train.policy;
            let sink = config.engine.sink_count;
            let recall = eval_recall(&mut ModelScorer::new(&model, SelectionPlan::Retrieval(policy)), &cases, 1, sink)?;
            let chance = eval_recall(&mut RandomScorer::new(model.config.n_layers, seed), &cases, 1, sink)?;
            let mut map = recall.to_map();
            map.insert("chance".into(), chance.mean);
            run.write_json("report.json", &EvalReport { recall: map, needle: BTreeMap::new() })
        }
        Suite::Needle => {
            let model = load_model(run, a.checkpoint.as_ref(), &config.model)?;
            let base = NeedleConfig {
                haystack_pages: a.haystack_pages,
                page_size: model.config.page_size,
                vocab_size: model.config.vocab_size,
                ..Default::default()
            };
            let mut samples = Vec::new();
            for r in 0..a.n.max(1) {
                samples.extend(needle_suite(&base, &standard_depths(), split_seed(seed, true, r))?);
            }
            let configs = vec![
                ("retrieval".to_string(), config.engine.clone()),
                ("sliding_window".to_string(), config.engine.sliding_window_equivalent()),
            ];
            let report = eval_needle(&model, &samples, &configs)?;
            let mut needle = report.accuracy.clone();
            let overall: BTreeMap<String, f64> =
                configs.iter().filter_map(|(n, _)| report.overall(n).map(|v| (n.clone(), v))).collect();
            needle.insert("overall".into(), overall);
            run.write_json("report.json", &EvalReport { recall: BTreeMap::new(), needle })?;
            run.write_json("needle_results.json", &report.results)
        }
        Suite::Equivalence => {
            let model = load_model(run, a.checkpoint.as_ref(), &ModelConfig { seed, ..ModelConfig::toy() })?;
            let report = equivalence_check(&model, a.tokens, seed)?;
            run.write_json("report.json", &report)?;
            if !report.pass {
                return Err(Error::Numerical(format!(
                    "max logit difference {} exceeds {}",
                    report.max_abs_diff, report.tolerance
                )));
            }
            Ok(())
        }
        Suite::Memory => {
            let model = load_model(run, a.checkpoint.as_ref(), &ModelConfig { seed, ..ModelConfig::toy() })?;
            let report = memory_check(&model, &config.engine, &a.lengths, seed)?;
            run.write_json("report.json", &report)?;
            if !report.pass {
                return Err(Error::InvalidState(format!(
                    "retrieval peaks {:?}, full-attention peaks {:?}",
                    report.retrieval_peak_hot, report.full_peak_resident
                )));
            }
            Ok(())
        }
    }
}

fn cmd_trace(run: &mut Run, config: &RunConfig, a: &TraceArgs) -> Result<()> {
    let model = load_model(run, a.checkpoint.as_ref(), &config.model)?;
    let seed = config.model.seed;
    let context = random_tokens(&model, a.tokens, seed);
    let query = random_tokens(&model, a.query_tokens, seed ^ 0x5eed);
    let (_, trace) = generate(&model, &config.engine, &context, &query)?;
    let query_page = trace.selections.iter().map(|s| s.query_page_index).max().unwrap_or(0);
    let scores = trace.score_trace(query_page)?;
    run.write("score_trace.csv", scores.to_csv().as_bytes())?;
    let mut audit = Vec::new();
    trace.write_audit_csv(&mut audit)?;
    run.write("audit.csv", &audit)?;
    run.write("trace.json", trace.to_json()?.as_bytes())
}

/// Load the checkpoint a `train` run wrote.
pub fn run_checkpoint(run_dir: &Path) -> Result<Checkpoint> {
    load_checkpoint(&run_dir.join("checkpoint.bin"))
}
