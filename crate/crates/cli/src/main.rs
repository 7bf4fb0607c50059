//! `pedalign`: pedagogical-alignment pipeline over structured tutor
//! conversations: validate corpora, build preference data, train the toy
//! policy with SFT and DPO/IPO/KTO, and evaluate alignment.
//!
//! Exit codes: 0 success, 1 domain violation (for example ordering
//! violations under `validate`), 2 I/O or configuration error.

use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pedalign_core::losses::{Algo, Beta};
use pedalign_core::metrics::{
    ppl_gap_report, read_predictions_jsonl, write_predictions_jsonl, MetricsReport,
};
use pedalign_core::policy::{lhp_train, save_checkpoint, sft_train, ToyTutorPolicy};
use pedalign_core::prefgen::{split_dataset, write_pairs_jsonl, write_probes_jsonl};
use pedalign_core::schema::{dataset_stats, duplicate_ids, validate_action_ordering, ParseMode};

use pedalign_cli::config::{self, RunConfig};
use pedalign_cli::pipeline::{
    self, atomic_write, build_pairs_from_config, build_probes_for, evaluate_policy, read_corpus,
    read_policy, read_probes, run_pipeline, sft_examples,
};

#[derive(Parser)]
#[command(name = "pedalign", version, about = "Pedagogical alignment at desk scale")]
struct Cli {
    /// Config file; defaults to $PEDALIGN_CONFIG, else built-in defaults.
    #[arg(long, global = true, env = "PEDALIGN_CONFIG")]
    config: Option<PathBuf>,

    /// Override every configured seed (split, SFT, LHP).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Skip malformed corpus lines instead of aborting.
    #[arg(long, global = true, conflicts_with = "strict")]
    lenient: bool,

    /// Abort on the first malformed corpus line (the default).
    #[arg(long, global = true)]
    strict: bool,

    /// Override the LHP algorithm (dpo, ipo, kto).
    #[arg(long, global = true)]
    algo: Option<String>,

    /// Override the LHP beta.
    #[arg(long, global = true)]
    beta: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CorpusArg {
    /// Conversation corpus (JSONL); defaults to the configured path.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a corpus and check the action-ordering rules.
    Validate(CorpusArg),
    /// Split a corpus into SFT/LHP/test partitions and write them out.
    Split(CorpusArg),
    /// Build preference pairs from tutor-stream divergence.
    BuildPairs {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Pair source override: noisy, rejected-file, or probes.
        #[arg(long)]
        source: Option<String>,
        /// Output file; defaults to <out_dir>/pairs.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build misaligned-action perplexity probes.
    BuildProbes {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Restrict to one partition of a previous `split` run.
        #[arg(long, value_parser = ["sft", "lhp", "test"])]
        split: Option<String>,
        /// splits.json manifest; required with --split.
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Output file; defaults to <out_dir>/probes.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised fine-tuning on a corpus of gold annotations.
    SftTrain {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Checkpoint output; defaults to <out_dir>/sft.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Preference training (DPO/IPO/KTO) from a pair file.
    LhpTrain {
        /// Preference pairs (JSONL); defaults to <out_dir>/pairs.jsonl.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Initial and reference checkpoint; defaults to <out_dir>/sft.ckpt.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Train from fresh weights instead of the reference checkpoint.
        #[arg(long)]
        from_scratch: bool,
        /// Checkpoint output; defaults to <out_dir>/lhp.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus, or score a prediction file.
    Eval {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Policy checkpoint to evaluate.
        #[arg(long, conflicts_with = "preds")]
        ckpt: Option<PathBuf>,
        /// Pre-computed prediction file (JSONL) to score instead.
        #[arg(long)]
        preds: Option<PathBuf>,
        /// Also write the generated predictions here.
        #[arg(long)]
        dump_preds: Option<PathBuf>,
        /// Report output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perplexity-gap table of a checkpoint over a probe file.
    Ppl {
        /// Policy checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Probe file; defaults to <out_dir>/probes.jsonl.
        #[arg(long)]
        probes: Option<PathBuf>,
        /// Report output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every configured (algo, beta) from one SFT start.
    SweepBeta {
        /// Report output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run split -> SFT -> pairs -> LHP -> eval end to end.
    Pipeline {
        /// Reuse existing checkpoints instead of retraining.
        #[arg(long)]
        resume: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<u8, String> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.seed, cli.algo.as_deref(), cli.beta);
    let mode = if cli.lenient { ParseMode::Lenient } else { ParseMode::Strict };

    match cli.command {
        Command::Validate(corpus) => cmd_validate(&cfg, corpus, mode),
        Command::Split(corpus) => cmd_split(&cfg, corpus, mode),
        Command::BuildPairs { corpus, source, out } => {
            cmd_build_pairs(&mut cfg, corpus, source, out, mode)
        }
        Command::BuildProbes { corpus, split, splits, out } => {
            cmd_build_probes(&cfg, corpus, split, splits, out, mode)
        }
        Command::SftTrain { corpus, out } => cmd_sft_train(&cfg, corpus, out, mode),
        Command::LhpTrain { pairs, init, from_scratch, out } => {
            cmd_lhp_train(&cfg, pairs, init, from_scratch, out)
        }
        Command::Eval { corpus, ckpt, preds, dump_preds, out } => {
            cmd_eval(&cfg, corpus, ckpt, preds, dump_preds, out, mode)
        }
        Command::Ppl { ckpt, probes, out } => cmd_ppl(&cfg, ckpt, probes, out),
        Command::SweepBeta { out } => cmd_sweep_beta(&cfg, out, mode),
        Command::Pipeline { resume } => {
            let outcome = run_pipeline(&cfg, mode, resume).map_err(|e| e.to_string())?;
            eprintln!("pipeline: wrote {} artifacts", outcome.artifacts.len());
            for path in &outcome.artifacts {
                println!("{}", path.display());
            }
            Ok(0)
        }
    }
}

fn corpus_path(cfg: &RunConfig, arg: &CorpusArg) -> PathBuf {
    arg.corpus.clone().unwrap_or_else(|| cfg.paths.corpus.clone())
}

fn cmd_validate(cfg: &RunConfig, corpus: CorpusArg, mode: ParseMode) -> Result<u8, String> {
    let (convs, stats) = read_corpus(&corpus_path(cfg, &corpus), mode)?;
    let stats_d = dataset_stats(&convs);
    eprintln!(
        "parsed {} conversations ({} skipped), {} QA pairs, mean rounds {:.2}, mean words {:.1}",
        stats.parsed, stats.skipped, stats_d.qa_pairs, stats_d.mean_rounds, stats_d.mean_words
    );
    let mut total = 0usize;
    for id in duplicate_ids(&convs) {
        println!("{id}\t-\tduplicate conversation id");
        total += 1;
    }
    for conv in &convs {
        let report = validate_action_ordering(conv);
        for v in &report.violations {
            println!("{}\tturn {}\t{}", report.conversation_id, v.turn, v.message);
        }
        total += report.violations.len();
    }
    println!("{total} violations");
    Ok(if total == 0 { 0 } else { 1 })
}

fn cmd_split(cfg: &RunConfig, corpus: CorpusArg, mode: ParseMode) -> Result<u8, String> {
    let (convs, _) = read_corpus(&corpus_path(cfg, &corpus), mode)?;
    let (d_c, d_p, d_t) = split_dataset(&convs, &cfg.split.spec()).map_err(|e| e.to_string())?;
    let discarded = convs.len() - d_c.len() - d_p.len() - d_t.len();
    for (name, part) in [("d_sft.jsonl", &d_c), ("d_lhp.jsonl", &d_p), ("d_test.jsonl", &d_t)] {
        let path = cfg.paths.out_dir.join(name);
        let mut bytes = Vec::new();
        for conv in part {
            bytes.extend_from_slice(conv.to_json_line().as_bytes());
            bytes.push(b'\n');
        }
        atomic_write(&path, &bytes).map_err(|e| e.to_string())?;
        println!("{}", path.display());
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        seed: u64,
        sft: Vec<&'a str>,
        lhp: Vec<&'a str>,
        test: Vec<&'a str>,
    }
    let manifest = Manifest {
        seed: cfg.split.seed,
        sft: d_c.iter().map(|c| c.id.as_str()).collect(),
        lhp: d_p.iter().map(|c| c.id.as_str()).collect(),
        test: d_t.iter().map(|c| c.id.as_str()).collect(),
    };
    let path = cfg.paths.out_dir.join("splits.json");
    atomic_write(&path, &serde_json::to_vec_pretty(&manifest).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    println!("{}", path.display());
    eprintln!(
        "split {}/{}/{} conversations, {} discarded",
        d_c.len(),
        d_p.len(),
        d_t.len(),
        discarded
    );
    Ok(0)
}

fn cmd_build_pairs(
    cfg: &mut RunConfig,
    corpus: CorpusArg,
    source: Option<String>,
    out: Option<PathBuf>,
    mode: ParseMode,
) -> Result<u8, String> {
    if let Some(source) = source {
        cfg.lhp.pair_source = match source.as_str() {
            "noisy" => config::PairSource::Noisy,
            "rejected-file" => config::PairSource::RejectedFile,
            "probes" => config::PairSource::Probes,
            other => return Err(format!("unknown pair source `{other}`")),
        };
    }
    let (convs, _) = read_corpus(&corpus_path(cfg, &corpus), mode)?;
    let (pairs, _) = build_pairs_from_config(cfg, &convs)?;
    let path = out.unwrap_or_else(|| cfg.paths.out_dir.join("pairs.jsonl"));
    let mut bytes = Vec::new();
    write_pairs_jsonl(&mut bytes, &pairs).map_err(|e| e.to_string())?;
    atomic_write(&path, &bytes).map_err(|e| e.to_string())?;
    eprintln!("wrote {} pairs", pairs.len());
    println!("{}", path.display());
    Ok(0)
}

fn cmd_build_probes(
    cfg: &RunConfig,
    corpus: CorpusArg,
    split: Option<String>,
    splits: Option<PathBuf>,
    out: Option<PathBuf>,
    mode: ParseMode,
) -> Result<u8, String> {
    let (mut convs, _) = read_corpus(&corpus_path(cfg, &corpus), mode)?;
    if let Some(which) = split {
        let manifest_path =
            splits.unwrap_or_else(|| cfg.paths.out_dir.join("splits.json"));
        let manifest: serde_json::Value = serde_json::from_reader(BufReader::new(
            fs::File::open(&manifest_path)
                .map_err(|e| format!("cannot open `{}`: {e}", manifest_path.display()))?,
        ))
        .map_err(|e| e.to_string())?;
        let ids: Vec<&str> = manifest[which.as_str()]
            .as_array()
            .ok_or_else(|| format!("manifest has no `{which}` partition"))?
            .iter()
            .filter_map(|v| v.as_str())
            .collect();
        convs.retain(|c| ids.contains(&c.id.as_str()));
    }
    let probes = build_probes_for(cfg, &convs)?;
    let path = out.unwrap_or_else(|| cfg.paths.out_dir.join("probes.jsonl"));
    let mut bytes = Vec::new();
    write_probes_jsonl(&mut bytes, &probes).map_err(|e| e.to_string())?;
    atomic_write(&path, &bytes).map_err(|e| e.to_string())?;
    eprintln!("wrote {} probes", probes.len());
    println!("{}", path.display());
    Ok(0)
}

fn cmd_sft_train(
    cfg: &RunConfig,
    corpus: CorpusArg,
    out: Option<PathBuf>,
    mode: ParseMode,
) -> Result<u8, String> {
    let (convs, _) = read_corpus(&corpus_path(cfg, &corpus), mode)?;
    let vocab = pipeline::build_vocab(&convs);
    let mut policy = ToyTutorPolicy::new(vocab, cfg.policy.n_buckets);
    let examples = sft_examples(&convs);
    let train_cfg = cfg.sft.train_config()?;
    let curve = sft_train(&mut policy, &examples, &train_cfg).map_err(|e| e.to_string())?;
    eprintln!(
        "sft: {} examples, final epoch loss {:.4}",
        examples.len(),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    let path = out.unwrap_or_else(|| cfg.paths.out_dir.join("sft.ckpt"));
    let mut bytes = Vec::new();
    save_checkpoint(&policy, &mut bytes).map_err(|e| e.to_string())?;
    atomic_write(&path, &bytes).map_err(|e| e.to_string())?;
    println!("{}", path.display());
    Ok(0)
}

fn cmd_lhp_train(
    cfg: &RunConfig,
    pairs: Option<PathBuf>,
    init: Option<PathBuf>,
    from_scratch: bool,
    out: Option<PathBuf>,
) -> Result<u8, String> {
    let pairs_path = pairs.unwrap_or_else(|| cfg.paths.out_dir.join("pairs.jsonl"));
    let f = fs::File::open(&pairs_path)
        .map_err(|e| format!("cannot open pairs `{}`: {e}", pairs_path.display()))?;
    let pairs = pedalign_core::prefgen::read_pairs_jsonl(BufReader::new(f))
        .map_err(|e| e.to_string())?;
    let init_path = init.unwrap_or_else(|| cfg.paths.out_dir.join("sft.ckpt"));
    let reference = read_policy(&init_path)?;
    let mut policy = if from_scratch || !cfg.lhp.from_sft {
        ToyTutorPolicy::new(reference.vocab.clone(), reference.n_buckets)
    } else {
        reference.clone()
    };
    let train_cfg = cfg.lhp.train_config()?;
    let curve = lhp_train(&mut policy, &reference, &pairs, &train_cfg).map_err(|e| e.to_string())?;
    eprintln!(
        "lhp: {} on {} pairs, final epoch margin {:.4}",
        train_cfg.algo,
        pairs.len(),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    let path = out.unwrap_or_else(|| cfg.paths.out_dir.join("lhp.ckpt"));
    let mut bytes = Vec::new();
    save_checkpoint(&policy, &mut bytes).map_err(|e| e.to_string())?;
    atomic_write(&path, &bytes).map_err(|e| e.to_string())?;
    println!("{}", path.display());
    Ok(0)
}

fn cmd_eval(
    cfg: &RunConfig,
    corpus: CorpusArg,
    ckpt: Option<PathBuf>,
    preds: Option<PathBuf>,
    dump_preds: Option<PathBuf>,
    out: Option<PathBuf>,
    mode: ParseMode,
) -> Result<u8, String> {
    let report = if let Some(preds_path) = preds {
        let f = fs::File::open(&preds_path)
            .map_err(|e| format!("cannot open predictions `{}`: {e}", preds_path.display()))?;
        let preds = read_predictions_jsonl(BufReader::new(f)).map_err(|e| e.to_string())?;
        let metrics = MetricsReport::compute(&preds).map_err(|e| e.to_string())?;
        let rounds = pedalign_core::metrics::multi_round_curve(&preds, cfg.eval.rounds_cap)
            .map_err(|e| e.to_string())?;
        pipeline::EvalReport { metrics, rounds }
    } else {
        let ckpt = ckpt.ok_or("eval needs either --ckpt or --preds")?;
        let policy = read_policy(&ckpt)?;
        let (convs, _) = read_corpus(&corpus_path(cfg, &corpus), mode)?;
        let (report, records) = evaluate_policy(&policy, &convs, cfg.eval.rounds_cap)?;
        if let Some(dump) = dump_preds {
            let mut bytes = Vec::new();
            write_predictions_jsonl(&mut bytes, &records).map_err(|e| e.to_string())?;
            atomic_write(&dump, &bytes).map_err(|e| e.to_string())?;
        }
        report
    };
    eprintln!("{}", report.metrics.render().trim_end());
    emit_json(&report, out.as_deref())?;
    Ok(0)
}

fn cmd_ppl(
    cfg: &RunConfig,
    ckpt: PathBuf,
    probes: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<u8, String> {
    let policy = read_policy(&ckpt)?;
    let probes_path = probes.unwrap_or_else(|| cfg.paths.out_dir.join("probes.jsonl"));
    let probes = read_probes(&probes_path)?;
    let table = ppl_gap_report(&probes, |ann| policy.utterance_token_logprobs(ann))
        .map_err(|e| e.to_string())?;
    eprint!("{}", table.render());
    emit_json(&table, out.as_deref())?;
    Ok(0)
}

#[derive(Serialize)]
struct SweepRow {
    algo: Algo,
    beta: f64,
    mean_accuracy: f64,
    mean_f1: f64,
}

fn cmd_sweep_beta(cfg: &RunConfig, out: Option<PathBuf>, mode: ParseMode) -> Result<u8, String> {
    let mut algos = Vec::new();
    for name in &cfg.sweep.algos {
        algos.push(Algo::parse(name).ok_or_else(|| format!("unknown algorithm `{name}`"))?);
    }
    algos.sort_by_key(|a| a.as_str());
    let mut betas = cfg.sweep.betas.clone();
    for &beta in &betas {
        Beta::new(beta).map_err(|e| e.to_string())?;
    }
    betas.sort_by(|a, b| a.partial_cmp(b).expect("betas are finite"));

    let (corpus, _) = read_corpus(&cfg.paths.corpus, mode)?;
    let (d_c, d_p_source, d_t) =
        split_dataset(&corpus, &cfg.split.spec()).map_err(|e| e.to_string())?;

    let vocab = pipeline::build_vocab(&d_c);
    let mut sft_policy = ToyTutorPolicy::new(vocab, cfg.policy.n_buckets);
    let sft_cfg = cfg.sft.train_config()?;
    sft_train(&mut sft_policy, &sft_examples(&d_c), &sft_cfg).map_err(|e| e.to_string())?;

    let (pairs, _) = build_pairs_from_config(cfg, &d_p_source)?;
    if pairs.is_empty() {
        return Err("no divergent turns; nothing to sweep".into());
    }

    let mut rows = Vec::new();
    for &algo in &algos {
        for &beta in &betas {
            let mut lhp_cfg = cfg.lhp.train_config()?;
            lhp_cfg.algo = algo;
            lhp_cfg.beta = Beta::new(beta).map_err(|e| e.to_string())?;
            let mut policy = sft_policy.clone();
            lhp_train(&mut policy, &sft_policy, &pairs, &lhp_cfg).map_err(|e| e.to_string())?;
            let (report, _) = evaluate_policy(&policy, &d_t, cfg.eval.rounds_cap)?;
            eprintln!(
                "sweep: {algo} beta {beta}: acc {}",
                report.metrics.display_accuracy()
            );
            rows.push(SweepRow {
                algo,
                beta,
                mean_accuracy: report.metrics.accuracy.mean,
                mean_f1: report.metrics.f1.mean,
            });
        }
    }

    println!("algo  beta   acc    f1");
    for row in &rows {
        println!(
            "{:<4}  {:<5} {:>5.1}  {:.2}",
            row.algo,
            row.beta,
            row.mean_accuracy * 100.0,
            row.mean_f1
        );
    }
    if let Some(path) = out {
        atomic_write(&path, &serde_json::to_vec_pretty(&rows).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    }
    Ok(0)
}

fn emit_json<T: Serialize>(value: &T, out: Option<&std::path::Path>) -> Result<(), String> {
    let json = serde_json::to_vec_pretty(value).map_err(|e| e.to_string())?;
    match out {
        Some(path) => atomic_write(path, &json).map_err(|e| e.to_string()),
        None => {
            let mut stdout = std::io::stdout().lock();
            use std::io::Write;
            stdout.write_all(&json).and_then(|_| stdout.write_all(b"\n")).map_err(|e| e.to_string())
        }
    }
}
