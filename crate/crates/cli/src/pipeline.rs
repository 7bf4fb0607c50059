//! Pipeline stages and the shared helpers behind the subcommands.
//!
//! Artifact writes are atomic (temp file in the target directory, then
//! rename), so an aborted run never leaves a truncated file under a final
//! name. All stages are deterministic under the configured seeds.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use pedalign_core::losses::{batch_objective, BatchInput, LossReport, QuadLogProbs};
use pedalign_core::metrics::{
    multi_round_curve, FieldPrediction, MetricsReport, PredictionRecord, RoundAccuracy,
};
use pedalign_core::policy::{
    lhp_train, load_checkpoint, save_checkpoint, sft_train, ToyTutorPolicy, Vocab,
};
use pedalign_core::prefgen::{
    build_context, build_misaligned_probes, build_preference_pairs, pairs_from_probes,
    perturb_stream, read_probes_jsonl, read_solution_bank, split_dataset, write_pairs_jsonl,
    write_probes_jsonl, PerplexityProbe, PreferencePair,
};
use pedalign_core::schema::{
    parse_conversation_stream, validate_action_ordering, Conversation, ParseMode, ParseStats,
};

use crate::config::{PairSource, RunConfig};

/// Stage-labeled pipeline error; the exit code is always 2.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub message: String,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for StageError {}

pub type StageResult<T> = Result<T, StageError>;

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> StageError {
    move |e| StageError { stage, message: e.to_string() }
}

/// Writes bytes to `path` via a sibling temp file and an atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn read_corpus(
    path: &Path,
    mode: ParseMode,
) -> Result<(Vec<Conversation>, ParseStats), String> {
    let file = fs::File::open(path)
        .map_err(|e| format!("cannot open corpus `{}`: {e}", path.display()))?;
    parse_conversation_stream(BufReader::new(file), mode)
        .map_err(|e| format!("corpus `{}`: {e}", path.display()))
}

/// Gold (context, annotation) pairs for supervised training.
pub fn sft_examples(
    convs: &[Conversation],
) -> Vec<(pedalign_core::prefgen::Context, pedalign_core::schema::TutorAnnotation)> {
    convs
        .iter()
        .flat_map(|conv| {
            conv.turns.iter().map(move |turn| {
                let ctx = build_context(conv, turn.index)
                    .expect("turn indices are in range by construction");
                (ctx, turn.tutor.clone())
            })
        })
        .collect()
}

/// Vocabulary over every text field of the training split, min frequency 1.
pub fn build_vocab(convs: &[Conversation]) -> Vocab {
    let mut texts: Vec<&str> = Vec::new();
    for conv in convs {
        texts.push(&conv.question);
        for turn in &conv.turns {
            texts.push(&turn.student_utterance);
            texts.push(&turn.tutor.subproblem);
            texts.push(&turn.tutor.utterance);
        }
    }
    Vocab::build(texts)
}

/// Teacher-forced predictions: each turn is annotated from the gold history.
pub fn predict_corpus(
    policy: &ToyTutorPolicy,
    convs: &[Conversation],
) -> Vec<PredictionRecord> {
    let mut records = Vec::new();
    for conv in convs {
        for turn in &conv.turns {
            let ctx = build_context(conv, turn.index)
                .expect("turn indices are in range by construction");
            let pred = policy.annotate(&ctx);
            records.push(PredictionRecord::from_annotations(
                &conv.id, turn.index, &pred, &turn.tutor,
            ));
        }
    }
    records
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub rounds: Vec<RoundAccuracy>,
}

pub fn evaluate_policy(
    policy: &ToyTutorPolicy,
    convs: &[Conversation],
    rounds_cap: usize,
) -> Result<(EvalReport, Vec<PredictionRecord>), String> {
    let records = predict_corpus(policy, convs);
    let preds: Vec<FieldPrediction> = records
        .iter()
        .map(|r| r.to_field_prediction())
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let metrics = MetricsReport::compute(&preds).map_err(|e| e.to_string())?;
    let rounds = multi_round_curve(&preds, rounds_cap).map_err(|e| e.to_string())?;
    Ok((EvalReport { metrics, rounds }, records))
}

/// Builds preference pairs from the configured rejected-stream source.
/// Returns the pairs plus the side artifact describing the rejected stream
/// (a degraded corpus, a copied corpus subset, or the probe set).
pub enum RejectedArtifact {
    Corpus(Vec<Conversation>),
    Probes(Vec<PerplexityProbe>),
}

pub fn build_pairs_from_config(
    cfg: &RunConfig,
    d_p_source: &[Conversation],
) -> Result<(Vec<PreferencePair>, RejectedArtifact), String> {
    match cfg.lhp.pair_source {
        PairSource::Noisy => {
            let rejected = perturb_stream(d_p_source, cfg.lhp.flip_prob, cfg.lhp.noise_seed);
            let pairs =
                build_preference_pairs(d_p_source, &rejected).map_err(|e| e.to_string())?;
            Ok((pairs, RejectedArtifact::Corpus(rejected)))
        }
        PairSource::RejectedFile => {
            let path = cfg.paths.rejected.as_ref().ok_or(
                "pair_source = \"rejected-file\" requires paths.rejected in the config",
            )?;
            let (stream, _) = read_corpus(path, ParseMode::Strict)?;
            let by_id: HashMap<&str, &Conversation> =
                stream.iter().map(|c| (c.id.as_str(), c)).collect();
            let subset: Vec<Conversation> = d_p_source
                .iter()
                .filter_map(|c| by_id.get(c.id.as_str()).map(|r| (*r).clone()))
                .collect();
            let pairs =
                build_preference_pairs(d_p_source, &subset).map_err(|e| e.to_string())?;
            Ok((pairs, RejectedArtifact::Corpus(subset)))
        }
        PairSource::Probes => {
            let probes = build_probes_for(cfg, d_p_source)?;
            Ok((pairs_from_probes(&probes), RejectedArtifact::Probes(probes)))
        }
    }
}

/// Probes over ordering-valid conversations; invalid ones are skipped with a
/// note on stderr.
pub fn build_probes_for(
    cfg: &RunConfig,
    convs: &[Conversation],
) -> Result<Vec<PerplexityProbe>, String> {
    let path = cfg
        .paths
        .solutions
        .as_ref()
        .ok_or("probe building requires paths.solutions in the config")?;
    let file = fs::File::open(path)
        .map_err(|e| format!("cannot open solution bank `{}`: {e}", path.display()))?;
    let bank = read_solution_bank(BufReader::new(file)).map_err(|e| e.to_string())?;

    let mut probes = Vec::new();
    let mut skipped = 0usize;
    for conv in convs {
        if !validate_action_ordering(conv).is_valid() {
            skipped += 1;
            continue;
        }
        probes.extend(build_misaligned_probes(conv, &bank).map_err(|e| e.to_string())?);
    }
    if skipped > 0 {
        eprintln!("note: skipped {skipped} ordering-invalid conversations for probes");
    }
    Ok(probes)
}

#[derive(Debug, Serialize)]
struct SplitManifest<'a> {
    seed: u64,
    sft: Vec<&'a str>,
    lhp: Vec<&'a str>,
    test: Vec<&'a str>,
}

#[derive(Debug, Serialize)]
struct TrainReport {
    sft_epoch_loss: Vec<f64>,
    lhp: Option<LhpReport>,
}

#[derive(Debug, Serialize)]
struct LhpReport {
    epoch_margin: Vec<f64>,
    objective: LossReport,
}

/// Everything the pipeline wrote, in write order.
pub struct PipelineOutcome {
    pub artifacts: Vec<PathBuf>,
}

/// Runs split -> SFT -> rejected-stream -> pairs -> LHP -> eval -> reports.
/// With `resume`, stages whose artifacts already exist are loaded instead of
/// recomputed. A zero-size LHP partition stops the pipeline after SFT.
pub fn run_pipeline(cfg: &RunConfig, mode: ParseMode, resume: bool) -> StageResult<PipelineOutcome> {
    let out = &cfg.paths.out_dir;
    let mut artifacts = Vec::new();
    let art = |name: &str| out.join(name);

    // split
    let (corpus, stats) = read_corpus(&cfg.paths.corpus, mode).map_err(stage_err("split"))?;
    eprintln!(
        "split: parsed {} conversations ({} skipped)",
        stats.parsed, stats.skipped
    );
    let (d_c, d_p_source, d_t) =
        split_dataset(&corpus, &cfg.split.spec()).map_err(stage_err("split"))?;
    let manifest = SplitManifest {
        seed: cfg.split.seed,
        sft: d_c.iter().map(|c| c.id.as_str()).collect(),
        lhp: d_p_source.iter().map(|c| c.id.as_str()).collect(),
        test: d_t.iter().map(|c| c.id.as_str()).collect(),
    };
    let manifest_json =
        serde_json::to_vec_pretty(&manifest).map_err(stage_err("split"))?;
    atomic_write(&art("splits.json"), &manifest_json).map_err(stage_err("split"))?;
    artifacts.push(art("splits.json"));

    // sft-train
    let sft_path = art("sft.ckpt");
    let sft_cfg = cfg.sft.train_config().map_err(stage_err("sft-train"))?;
    let (sft_policy, sft_curve) = if resume && sft_path.exists() {
        eprintln!("sft-train: reusing {}", sft_path.display());
        let f = fs::File::open(&sft_path).map_err(stage_err("sft-train"))?;
        (
            load_checkpoint(BufReader::new(f)).map_err(stage_err("sft-train"))?,
            Vec::new(),
        )
    } else {
        let vocab = build_vocab(&d_c);
        let mut policy = ToyTutorPolicy::new(vocab, cfg.policy.n_buckets);
        let examples = sft_examples(&d_c);
        eprintln!(
            "sft-train: {} examples, vocab {}, {} buckets",
            examples.len(),
            policy.vocab.len(),
            policy.n_buckets
        );
        let curve = sft_train(&mut policy, &examples, &sft_cfg).map_err(stage_err("sft-train"))?;
        let mut bytes = Vec::new();
        save_checkpoint(&policy, &mut bytes).map_err(stage_err("sft-train"))?;
        atomic_write(&sft_path, &bytes).map_err(stage_err("sft-train"))?;
        (policy, curve)
    };
    artifacts.push(sft_path.clone());

    if cfg.split.n_lhp == 0 {
        eprintln!("pipeline: n_lhp = 0, stopping after SFT");
        return Ok(PipelineOutcome { artifacts });
    }

    // rejected-stream generation
    let (pairs, rejected) =
        build_pairs_from_config(cfg, &d_p_source).map_err(stage_err("rejected-stream"))?;
    let rejected_path = match &rejected {
        RejectedArtifact::Corpus(stream) => {
            let path = art("rejected.jsonl");
            let mut bytes = Vec::new();
            for conv in stream {
                bytes.extend_from_slice(conv.to_json_line().as_bytes());
                bytes.push(b'\n');
            }
            atomic_write(&path, &bytes).map_err(stage_err("rejected-stream"))?;
            path
        }
        RejectedArtifact::Probes(probes) => {
            let path = art("probes.jsonl");
            let mut bytes = Vec::new();
            write_probes_jsonl(&mut bytes, probes).map_err(stage_err("rejected-stream"))?;
            atomic_write(&path, &bytes).map_err(stage_err("rejected-stream"))?;
            path
        }
    };
    artifacts.push(rejected_path);

    // pair build
    eprintln!("build-pairs: {} pairs from {} conversations", pairs.len(), d_p_source.len());
    let mut bytes = Vec::new();
    write_pairs_jsonl(&mut bytes, &pairs).map_err(stage_err("build-pairs"))?;
    atomic_write(&art("pairs.jsonl"), &bytes).map_err(stage_err("build-pairs"))?;
    artifacts.push(art("pairs.jsonl"));
    if pairs.is_empty() {
        return Err(StageError {
            stage: "build-pairs",
            message: "no divergent turns; nothing to train on".into(),
        });
    }

    // lhp-train
    let lhp_path = art("lhp.ckpt");
    let lhp_cfg = cfg.lhp.train_config().map_err(stage_err("lhp-train"))?;
    let (lhp_policy, margin_curve) = if resume && lhp_path.exists() {
        eprintln!("lhp-train: reusing {}", lhp_path.display());
        let f = fs::File::open(&lhp_path).map_err(stage_err("lhp-train"))?;
        (
            load_checkpoint(BufReader::new(f)).map_err(stage_err("lhp-train"))?,
            Vec::new(),
        )
    } else {
        let mut policy = if cfg.lhp.from_sft {
            sft_policy.clone()
        } else {
            ToyTutorPolicy::new(sft_policy.vocab.clone(), sft_policy.n_buckets)
        };
        eprintln!(
            "lhp-train: {} on {} pairs (beta {})",
            lhp_cfg.algo,
            pairs.len(),
            lhp_cfg.beta.value()
        );
        let curve =
            lhp_train(&mut policy, &sft_policy, &pairs, &lhp_cfg).map_err(stage_err("lhp-train"))?;
        let mut bytes = Vec::new();
        save_checkpoint(&policy, &mut bytes).map_err(stage_err("lhp-train"))?;
        atomic_write(&lhp_path, &bytes).map_err(stage_err("lhp-train"))?;
        (policy, curve)
    };
    artifacts.push(lhp_path);

    // training report
    let quads: Vec<QuadLogProbs> = pairs
        .iter()
        .map(|p| QuadLogProbs {
            lp_policy_chosen: lhp_policy.annotation_logprob(&p.context, &p.chosen),
            lp_ref_chosen: sft_policy.annotation_logprob(&p.context, &p.chosen),
            lp_policy_rejected: lhp_policy.annotation_logprob(&p.context, &p.rejected),
            lp_ref_rejected: sft_policy.annotation_logprob(&p.context, &p.rejected),
        })
        .collect();
    let objective = match lhp_cfg.algo {
        pedalign_core::losses::Algo::Kto => {
            let singles: Vec<pedalign_core::losses::KtoExample> = quads
                .iter()
                .flat_map(|q| {
                    [
                        pedalign_core::losses::KtoExample {
                            lp_policy: q.lp_policy_chosen,
                            lp_ref: q.lp_ref_chosen,
                            label: pedalign_core::losses::KtoLabel::Desirable,
                        },
                        pedalign_core::losses::KtoExample {
                            lp_policy: q.lp_policy_rejected,
                            lp_ref: q.lp_ref_rejected,
                            label: pedalign_core::losses::KtoLabel::Undesirable,
                        },
                    ]
                })
                .collect();
            batch_objective(BatchInput::Singletons(&singles), lhp_cfg.algo, lhp_cfg.beta)
        }
        _ => batch_objective(BatchInput::Paired(&quads), lhp_cfg.algo, lhp_cfg.beta),
    }
    .map_err(stage_err("report"))?;
    let report = TrainReport {
        sft_epoch_loss: sft_curve,
        lhp: Some(LhpReport {
            epoch_margin: margin_curve,
            objective: LossReport::from_batch(lhp_cfg.algo, lhp_cfg.beta, &objective),
        }),
    };
    let report_json = serde_json::to_vec_pretty(&report).map_err(stage_err("report"))?;
    atomic_write(&art("train_report.json"), &report_json).map_err(stage_err("report"))?;
    artifacts.push(art("train_report.json"));

    // eval
    let (eval_report, _) =
        evaluate_policy(&lhp_policy, &d_t, cfg.eval.rounds_cap).map_err(stage_err("eval"))?;
    eprintln!(
        "eval: acc {} f1 {}",
        eval_report.metrics.display_accuracy(),
        eval_report.metrics.display_f1()
    );
    let metrics_json =
        serde_json::to_vec_pretty(&eval_report).map_err(stage_err("eval"))?;
    atomic_write(&art("metrics.json"), &metrics_json).map_err(stage_err("eval"))?;
    artifacts.push(art("metrics.json"));

    Ok(PipelineOutcome { artifacts })
}

/// Loads probes written by `build-probes`.
pub fn read_probes(path: &Path) -> Result<Vec<PerplexityProbe>, String> {
    let f = fs::File::open(path)
        .map_err(|e| format!("cannot open probes `{}`: {e}", path.display()))?;
    read_probes_jsonl(BufReader::new(f)).map_err(|e| e.to_string())
}

/// Loads a policy checkpoint.
pub fn read_policy(path: &Path) -> Result<ToyTutorPolicy, String> {
    let f = fs::File::open(path)
        .map_err(|e| format!("cannot open checkpoint `{}`: {e}", path.display()))?;
    load_checkpoint(BufReader::new(f)).map_err(|e| e.to_string())
}
