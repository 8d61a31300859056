//! Application shell: subcommand dispatch, artifact emission, exit codes.
//!
//! Every subcommand takes `--seed` and `--out DIR`; all artifacts land under
//! the output directory together with a `manifest.json` listing file CRC32s.
//! Exit codes: 0 success, 1 validation error (usage, config), 2 runtime
//! failure.

pub mod config;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand};
use config::{render_key_help, RunConfig};
use infobottle::corpus::{
    build_reference_embeddings, generate_corpus, load_corpus, save_corpus, Corpus,
    ReferenceEmbeddingTable,
};
use infobottle::diffcore::{op_gradient_suite, DEFAULT_FD_STEP};
use infobottle::error::Error as CoreError;
use infobottle::evaluator::{build_adversarial_dataset, evaluate, mi_analysis, robust_f1};
use infobottle::mi::theory_check_report;
use infobottle::model::end_to_end_grad_check;
use infobottle::trainer::{train, Checkpoint};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::sync::{Once, OnceLock};

fn key_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(render_key_help)
}

#[derive(Parser)]
#[command(
    name = "infobottle",
    about = "Training and evaluation laboratory for information-theoretically regularized robust text classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synonym-structured corpus and reference embeddings.
    GenData(GenDataArgs),
    /// Train a model and write the best-dev checkpoint.
    Train(TrainArgs),
    /// Benign evaluation, optionally under the word-substitution attack.
    Evaluate(EvaluateArgs),
    /// Anchored-vs-global MI comparison between two checkpoints.
    MiAnalysis(MiAnalysisArgs),
    /// Randomized exact-enumeration checks of the two inequalities.
    TheoryCheck(TheoryCheckArgs),
    /// Finite-difference verification of every op and the end-to-end model.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set train.lr=0.2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run seed; identical seeds reproduce bit-identical artifacts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for artifacts and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Worker cap for parallel evaluation.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
#[command(after_help = key_help())]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
#[command(after_help = key_help())]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
#[command(after_help = key_help())]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Attack kind.
    #[arg(long, value_parser = ["none", "word-sub"], default_value = "word-sub")]
    attack: String,
    /// Checkpoint the attack is run against (defaults to --ckpt).
    #[arg(long)]
    victim: Option<PathBuf>,
}

#[derive(Args)]
#[command(after_help = key_help())]
struct MiAnalysisArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Base checkpoint (e.g. trained without adversarial data).
    #[arg(long)]
    ckpt_a: PathBuf,
    /// Comparison checkpoint (e.g. retrained with adversarial data).
    #[arg(long)]
    ckpt_b: PathBuf,
    /// Victim for building the adversarial split (defaults to --ckpt-a).
    #[arg(long)]
    victim: Option<PathBuf>,
}

#[derive(Args)]
#[command(after_help = key_help())]
struct TheoryCheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Randomized decomposition-inequality instances.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Random pairs for the envelope inequality.
    #[arg(long, default_value_t = 100_000)]
    lemma2_pairs: usize,
}

#[derive(Args)]
#[command(after_help = key_help())]
struct GradCheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Random points probed per op.
    #[arg(long, default_value_t = 10)]
    points: usize,
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            if code != 0 {
                eprintln!("\n{}", render_key_help());
            }
            return code;
        }
    };
    let outcome = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::MiAnalysis(a) => cmd_mi_analysis(a),
        Cmd::TheoryCheck(a) => cmd_theory_check(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CoreError::Config(_) | CoreError::CorpusConfig(_) => 1,
                _ => 2,
            }
        }
    }
}

fn init_logging() {
    static INIT: Once = Once::new();
    INIT.call_once(|| {
        let level = match std::env::var("INFOBOTTLE_LOG").as_deref() {
            Ok("quiet") => log::LevelFilter::Error,
            Ok("debug") => log::LevelFilter::Debug,
            _ => log::LevelFilter::Info,
        };
        let _ = env_logger::Builder::new().filter_level(level).try_init();
    });
}

fn setup(common: &CommonArgs) -> Result<RunConfig, CoreError> {
    if let Some(jobs) = common.jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.sets {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(CoreError::Config(format!(
                "--set expects KEY=VALUE, got {kv:?}"
            )));
        };
        cfg.apply(k.trim(), v.trim())?;
        cfg.source_text.push_str(&format!("\n{} = {}", k.trim(), v.trim()));
    }
    cfg.finalize();
    Ok(cfg)
}

/// Tracks artifacts written under `--out` and emits `manifest.json`.
struct OutDir {
    root: PathBuf,
    files: Vec<(String, u32)>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self, CoreError> {
        std::fs::create_dir_all(root)?;
        Ok(OutDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CoreError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.files.push((rel.to_string(), crc32fast::hash(bytes)));
        Ok(())
    }

    /// Record a file some other writer already produced under the root.
    fn note(&mut self, rel: &str) -> Result<(), CoreError> {
        let bytes = std::fs::read(self.root.join(rel))?;
        self.files.push((rel.to_string(), crc32fast::hash(&bytes)));
        Ok(())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn finalize(mut self) -> Result<(), CoreError> {
        #[derive(Serialize)]
        struct Entry {
            path: String,
            crc32: String,
        }
        self.files.sort();
        let entries: Vec<Entry> = self
            .files
            .iter()
            .map(|(path, crc)| Entry {
                path: path.clone(),
                crc32: format!("{crc:08x}"),
            })
            .collect();
        let json = serde_json::json!({ "files": entries });
        let bytes = serde_json::to_vec_pretty(&json)
            .map_err(|e| CoreError::Config(format!("manifest serialization: {e}")))?;
        std::fs::write(self.root.join("manifest.json"), bytes)?;
        Ok(())
    }
}

fn load_data(dir: &Path) -> Result<(Corpus, ReferenceEmbeddingTable), CoreError> {
    let corpus = load_corpus(dir)?;
    let table = ReferenceEmbeddingTable::load(&dir.join("embeddings.ibrt"))?;
    Ok((corpus, table))
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CoreError> {
    serde_json::to_vec_pretty(value).map_err(|e| CoreError::Eval(format!("serialization: {e}")))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<i32, CoreError> {
    let cfg = setup(&args.common)?;
    cfg.corpus.validate()?;
    let mut out = OutDir::create(&args.common.out)?;
    let corpus = generate_corpus(&cfg.corpus, args.common.seed)?;
    let table = build_reference_embeddings(
        &corpus.vocab,
        cfg.corpus.embed_dim,
        cfg.corpus.epsilon,
        args.common.seed,
    )?;
    save_corpus(&corpus, &out.root)?;
    for rel in ["vocab.tsv", "train.tsv", "dev.tsv", "test.tsv"] {
        out.note(rel)?;
    }
    table.save(&out.path("embeddings.ibrt"))?;
    out.note("embeddings.ibrt")?;
    println!(
        "gen-data: {} train / {} dev / {} test examples, vocab {}, epsilon {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.vocab.len(),
        table.epsilon
    );
    out.finalize()?;
    Ok(0)
}

fn cmd_train(args: TrainArgs) -> Result<i32, CoreError> {
    let cfg = setup(&args.common)?;
    let mut out = OutDir::create(&args.common.out)?;
    let (corpus, table) = load_data(&args.data)?;
    let mut model_cfg = cfg.model_config();
    model_cfg.vocab_size = corpus.vocab.len();
    let train_cfg = cfg.train_config(args.common.seed);
    let mut log = Vec::new();
    // Embeddings always initialize from the reference geometry; the freeze
    // flag only controls whether training may move them afterwards.
    let outcome = train(
        &train_cfg,
        &model_cfg,
        &corpus,
        Some(&table),
        &cfg.source_text,
        &mut log,
    )?;
    out.write("train.log", &log)?;
    outcome.checkpoint.save(&out.path("checkpoint.ckpt"))?;
    out.note("checkpoint.ckpt")?;
    out.write("history.json", &to_json(&outcome.history)?)?;
    let best = outcome
        .history
        .iter()
        .map(|m| m.dev_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    println!(
        "train: {} epochs, best dev accuracy {:.4}, checkpoint at step {}",
        outcome.history.len(),
        if best.is_finite() { best } else { 0.0 },
        outcome.checkpoint.step
    );
    out.finalize()?;
    Ok(0)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<i32, CoreError> {
    let cfg = setup(&args.common)?;
    let mut out = OutDir::create(&args.common.out)?;
    let (corpus, table) = load_data(&args.data)?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = ckpt.build_model()?;
    let victim = match &args.victim {
        Some(path) => Checkpoint::load(path)?.build_model()?,
        None => model.clone(),
    };
    let attack = (args.attack == "word-sub").then_some(&cfg.attack);
    let mut report = evaluate(
        &model,
        &victim,
        &corpus.test,
        attack,
        &corpus.vocab,
        &table,
        cfg.source_text.clone(),
        args.common.seed,
    )?;
    if model.config.tagging_head && attack.is_some() {
        let outcomes = build_adversarial_dataset(
            &victim,
            &corpus.test,
            &cfg.attack,
            &corpus.vocab,
            &table,
        )?;
        let adversarial: Vec<_> = outcomes.into_iter().map(|o| o.example).collect();
        report.robust_f1 = Some(robust_f1(
            &model,
            &adversarial,
            &corpus.vocab,
            cfg.corpus.indicator_sets,
        )?);
    }
    out.write("eval_report.json", &to_json(&report)?)?;
    println!(
        "evaluate: benign {:.4}, robust {}, attack success {}",
        report.benign_accuracy,
        report
            .robust_accuracy
            .map_or("n/a".to_string(), |v| format!("{v:.4}")),
        report
            .attack_success_rate
            .map_or("n/a".to_string(), |v| format!("{v:.4}")),
    );
    out.finalize()?;
    Ok(0)
}

fn cmd_mi_analysis(args: MiAnalysisArgs) -> Result<i32, CoreError> {
    let cfg = setup(&args.common)?;
    let mut out = OutDir::create(&args.common.out)?;
    let (corpus, table) = load_data(&args.data)?;
    let ckpt_a = Checkpoint::load(&args.ckpt_a)?;
    let ckpt_b = Checkpoint::load(&args.ckpt_b)?;
    let victim = match &args.victim {
        Some(path) => Checkpoint::load(path)?.build_model()?,
        None => ckpt_a.build_model()?,
    };
    let outcomes =
        build_adversarial_dataset(&victim, &corpus.test, &cfg.attack, &corpus.vocab, &table)?;
    let adversarial: Vec<_> = outcomes.into_iter().map(|o| o.example).collect();
    let report = mi_analysis(
        &ckpt_a,
        &ckpt_b,
        &corpus.test,
        &adversarial,
        &cfg.mi,
        args.common.seed,
    )?;
    out.write("mi_report.json", &to_json(&report)?)?;
    out.write("mi_bars.csv", report.to_csv().as_bytes())?;
    println!(
        "mi-analysis: delta adv anchored {:.4}, delta adv non-anchored {:.4}",
        report.delta_adv_anchored, report.delta_adv_non_anchored
    );
    out.finalize()?;
    Ok(0)
}

fn cmd_theory_check(args: TheoryCheckArgs) -> Result<i32, CoreError> {
    let _ = setup(&args.common)?;
    let mut out = OutDir::create(&args.common.out)?;
    let report = theory_check_report(args.trials, args.lemma2_pairs, args.common.seed)?;
    out.write("theory_report.json", &to_json(&report)?)?;
    println!(
        "theory-check: {} decomposition trials ({} violations), {} envelope pairs ({} violations)",
        report.lemma1_trials.len(),
        report.lemma1_violations,
        report.lemma2_pairs,
        report.lemma2_violations
    );
    out.finalize()?;
    if report.lemma1_violations + report.lemma2_violations > 0 {
        eprintln!("error: inequality violations found");
        return Ok(2);
    }
    Ok(0)
}

#[derive(Serialize)]
struct GradReport {
    tolerance: f64,
    ops: Vec<infobottle::diffcore::OpCheck>,
    end_to_end: f64,
    pass: bool,
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<i32, CoreError> {
    let _ = setup(&args.common)?;
    let mut out = OutDir::create(&args.common.out)?;
    let seed = args.common.seed;
    let ops = op_gradient_suite(seed, args.points)?;

    // Representative end-to-end fixture: a 2-layer model on a small corpus.
    let corpus_cfg = infobottle::corpus::CorpusConfig {
        num_sets: 8,
        set_size: 3,
        num_classes: 3,
        indicator_sets: 6,
        indicators_per_example: 2,
        train_n: 4,
        dev_n: 2,
        test_n: 2,
        min_tokens: 5,
        max_tokens: 7,
        embed_dim: 16,
        epsilon: 0.2,
        member_skew: 1.0,
    };
    let corpus = generate_corpus(&corpus_cfg, seed)?;
    let model = infobottle::model::Model::init(
        infobottle::model::ModelConfig {
            dim: 16,
            layers: 2,
            heads: 4,
            vocab_size: corpus_cfg.vocab_size(),
            num_classes: 3,
            max_len: 8,
            pool: infobottle::model::Pooling::Cls,
            tagging_head: false,
        },
        seed,
    )?;
    let end_to_end = end_to_end_grad_check(&model, &corpus.train[..2], seed, DEFAULT_FD_STEP)?;

    let tolerance = 1e-4;
    let pass = end_to_end <= tolerance && ops.iter().all(|o| o.max_rel_err <= tolerance);
    for op in &ops {
        println!(
            "grad-check: {:28} max_rel_err {:.3e} {}",
            op.op,
            op.max_rel_err,
            if op.max_rel_err <= tolerance { "ok" } else { "FAIL" }
        );
    }
    println!(
        "grad-check: end-to-end (params + delta) max_rel_err {end_to_end:.3e} {}",
        if end_to_end <= tolerance { "ok" } else { "FAIL" }
    );
    let report = GradReport {
        tolerance,
        ops,
        end_to_end,
        pass,
    };
    out.write("grad_report.json", &to_json(&report)?)?;
    out.finalize()?;
    Ok(if pass { 0 } else { 2 })
}
