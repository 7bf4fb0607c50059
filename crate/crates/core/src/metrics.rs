//! Alignment evaluation: per-field accuracy and macro-F1 over the three
//! classification fields, per-round accuracy curves, perplexity, and
//! perplexity-gap tables over misaligned-action probes.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prefgen::PerplexityProbe;
use crate::schema::{ActionCode, EvalCode, SubproblemState, TutorAnnotation};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric input is empty")]
    EmptyInput,
    #[error("perplexity requires a nonempty token list")]
    EmptyTokens,
    #[error("log-probability {0} is positive")]
    PositiveLogProb(f64),
    #[error("malformed prediction record at line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("I/O failure: {0}")]
    Io(String),
}

/// One scored turn: predictions next to gold for the three classification
/// fields. `None` predictions come from unparseable model responses and
/// score as wrong on every field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldPrediction {
    pub conversation_id: String,
    pub round: usize,
    pub pred_eval: Option<EvalCode>,
    pub pred_action: Option<ActionCode>,
    pub pred_substate: Option<SubproblemState>,
    pub gold_eval: EvalCode,
    pub gold_action: ActionCode,
    pub gold_substate: SubproblemState,
}

impl FieldPrediction {
    pub fn from_annotations(
        conversation_id: &str,
        round: usize,
        pred: &TutorAnnotation,
        gold: &TutorAnnotation,
    ) -> Self {
        FieldPrediction {
            conversation_id: conversation_id.to_string(),
            round,
            pred_eval: Some(pred.eval),
            pred_action: Some(pred.action),
            pred_substate: Some(pred.substate),
            gold_eval: gold.eval,
            gold_action: gold.action,
            gold_substate: gold.substate,
        }
    }

    fn matches(&self) -> [bool; 3] {
        [
            self.pred_eval == Some(self.gold_eval),
            self.pred_action == Some(self.gold_action),
            self.pred_substate == Some(self.gold_substate),
        ]
    }
}

/// Per-field scores plus their arithmetic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldScores {
    pub eval: f64,
    pub action: f64,
    pub substate: f64,
    pub mean: f64,
}

impl FieldScores {
    /// Builds the triple with its arithmetic mean.
    pub fn new(eval: f64, action: f64, substate: f64) -> Self {
        FieldScores { eval, action, substate, mean: (eval + action + substate) / 3.0 }
    }
}

/// Fraction of exact code matches per field.
pub fn field_accuracy(preds: &[FieldPrediction]) -> Result<FieldScores, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut hits = [0usize; 3];
    for p in preds {
        for (h, m) in hits.iter_mut().zip(p.matches()) {
            *h += m as usize;
        }
    }
    let n = preds.len() as f64;
    Ok(FieldScores::new(
        hits[0] as f64 / n,
        hits[1] as f64 / n,
        hits[2] as f64 / n,
    ))
}

/// Macro-averaged F1 per field: the unweighted mean of per-class F1 over the
/// classes present in gold. Unparseable predictions count as false negatives
/// for their gold class and predict nothing.
pub fn macro_f1(preds: &[FieldPrediction]) -> Result<FieldScores, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let eval = macro_f1_field(preds, |p| (p.pred_eval.map(|c| c.index()), p.gold_eval.index()));
    let action =
        macro_f1_field(preds, |p| (p.pred_action.map(|c| c.index()), p.gold_action.index()));
    let substate = macro_f1_field(preds, |p| {
        (p.pred_substate.map(|c| c.index()), p.gold_substate.index())
    });
    Ok(FieldScores::new(eval, action, substate))
}

fn macro_f1_field(
    preds: &[FieldPrediction],
    extract: impl Fn(&FieldPrediction) -> (Option<usize>, usize),
) -> f64 {
    // Keyed by class index: (true positives, false positives, false negatives).
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    let mut gold_classes: Vec<usize> = Vec::new();
    for p in preds {
        let (pred, gold) = extract(p);
        if !gold_classes.contains(&gold) {
            gold_classes.push(gold);
        }
        if pred == Some(gold) {
            counts.entry(gold).or_default().0 += 1;
        } else {
            counts.entry(gold).or_default().2 += 1;
            if let Some(pred) = pred {
                counts.entry(pred).or_default().1 += 1;
            }
        }
    }
    // Mean of per-class F1 over classes that occur in gold.
    let total: f64 = gold_classes
        .iter()
        .map(|c| {
            let (tp, fp, fneg) = counts.get(c).copied().unwrap_or_default();
            let denom = 2 * tp + fp + fneg;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    total / gold_classes.len() as f64
}

/// One point of the multi-round accuracy curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundAccuracy {
    pub round: usize,
    pub accuracy: f64,
    pub n: usize,
}

/// Mean three-field accuracy grouped by round. Rounds beyond `cap` pool into
/// the cap bucket; empty rounds are omitted.
pub fn multi_round_curve(
    preds: &[FieldPrediction],
    cap: usize,
) -> Result<Vec<RoundAccuracy>, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let cap = cap.max(1);
    let mut buckets: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for p in preds {
        let round = p.round.min(cap);
        let score = p.matches().iter().filter(|&&m| m).count() as f64 / 3.0;
        let entry = buckets.entry(round).or_default();
        entry.0 += score;
        entry.1 += 1;
    }
    Ok(buckets
        .into_iter()
        .map(|(round, (sum, n))| RoundAccuracy { round, accuracy: sum / n as f64, n })
        .collect())
}

/// Perplexity of a token sequence: `exp(-mean(log-probs))`. Inputs must be
/// finite and non-positive.
pub fn perplexity(token_logprobs: &[f64]) -> Result<f64, MetricsError> {
    if token_logprobs.is_empty() {
        return Err(MetricsError::EmptyTokens);
    }
    for &lp in token_logprobs {
        if lp > 0.0 || !lp.is_finite() {
            return Err(MetricsError::PositiveLogProb(lp));
        }
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok((-mean).exp())
}

/// Mean perplexity and count for one action bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PplBucket {
    pub mean_ppl: f64,
    pub count: usize,
}

/// Per-action perplexity table over probes. Buckets with no probes are
/// absent rather than zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PplTable {
    pub a1: Option<PplBucket>,
    pub a2: Option<PplBucket>,
    pub a4: Option<PplBucket>,
    pub a5: Option<PplBucket>,
}

impl PplTable {
    /// `ppl(A2) - ppl(A1)`, when both buckets are present.
    pub fn gap_1_2(&self) -> Option<f64> {
        Some(self.a2?.mean_ppl - self.a1?.mean_ppl)
    }

    /// `ppl(A5) - ppl(A4)`, when both buckets are present.
    pub fn gap_4_5(&self) -> Option<f64> {
        Some(self.a5?.mean_ppl - self.a4?.mean_ppl)
    }

    /// Plain-text rendering, one row per present bucket.
    pub fn render(&self) -> String {
        let mut out = String::from("action  mean-ppl  n\n");
        for (name, bucket) in [("A1", self.a1), ("A2", self.a2), ("A4", self.a4), ("A5", self.a5)]
        {
            if let Some(b) = bucket {
                out.push_str(&format!("{name:<6}  {:>8.4}  {}\n", b.mean_ppl, b.count));
            }
        }
        out
    }
}

/// Buckets each probe's aligned utterance under A1/A4 and its misaligned
/// utterance under A2/A5, scoring perplexity over utterance tokens only via
/// the supplied policy hook.
pub fn ppl_gap_report(
    probes: &[PerplexityProbe],
    token_logprobs: impl Fn(&TutorAnnotation) -> Vec<f64>,
) -> Result<PplTable, MetricsError> {
    if probes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut acc: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
    for probe in probes {
        for ann in [&probe.aligned, &probe.misaligned] {
            let ppl = perplexity(&token_logprobs(ann))?;
            let entry = acc.entry(ann.action.get()).or_default();
            entry.0 += ppl;
            entry.1 += 1;
        }
    }
    let bucket = |a: u8| -> Option<PplBucket> {
        acc.get(&a)
            .map(|&(sum, n)| PplBucket { mean_ppl: sum / n as f64, count: n })
    };
    Ok(PplTable { a1: bucket(1), a2: bucket(2), a4: bucket(4), a5: bucket(5) })
}

/// Accuracy and macro-F1 over the three classification fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: FieldScores,
    pub f1: FieldScores,
    pub n_examples: usize,
}

impl MetricsReport {
    pub fn compute(preds: &[FieldPrediction]) -> Result<Self, MetricsError> {
        Ok(MetricsReport {
            accuracy: field_accuracy(preds)?,
            f1: macro_f1(preds)?,
            n_examples: preds.len(),
        })
    }

    /// Table-style accuracy cell: mean and per-field values scaled by 100
    /// and rounded to integers, e.g. `77 (74, 74, 84)`.
    pub fn display_accuracy(&self) -> String {
        format_accuracy_cell(&self.accuracy)
    }

    /// Table-style F1 cell rounded to two decimals, e.g.
    /// `0.34 (0.42, 0.24, 0.37)`.
    pub fn display_f1(&self) -> String {
        format_f1_cell(&self.f1)
    }

    pub fn render(&self) -> String {
        format!(
            "n={}  acc {}  f1 {}\n",
            self.n_examples,
            self.display_accuracy(),
            self.display_f1()
        )
    }
}

pub fn format_accuracy_cell(scores: &FieldScores) -> String {
    let pct = |x: f64| (x * 100.0).round() as i64;
    format!(
        "{} ({}, {}, {})",
        pct(scores.mean),
        pct(scores.eval),
        pct(scores.action),
        pct(scores.substate)
    )
}

pub fn format_f1_cell(scores: &FieldScores) -> String {
    format!(
        "{:.2} ({:.2}, {:.2}, {:.2})",
        scores.mean, scores.eval, scores.action, scores.substate
    )
}

/// On-disk prediction record: pred/gold code triples per turn. Codes are
/// kept as raw strings on read so malformed predictions can score as wrong
/// instead of failing the whole file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub conv_id: String,
    pub turn: usize,
    pub pred: CodeTriple,
    pub gold: CodeTriple,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeTriple {
    pub eval: String,
    pub action: String,
    pub substate: String,
}

impl CodeTriple {
    pub fn of(ann: &TutorAnnotation) -> Self {
        CodeTriple {
            eval: ann.eval.as_str().to_string(),
            action: ann.action.get().to_string(),
            substate: ann.substate.as_str().to_string(),
        }
    }
}

impl PredictionRecord {
    pub fn from_annotations(
        conv_id: &str,
        turn: usize,
        pred: &TutorAnnotation,
        gold: &TutorAnnotation,
    ) -> Self {
        PredictionRecord {
            conv_id: conv_id.to_string(),
            turn,
            pred: CodeTriple::of(pred),
            gold: CodeTriple::of(gold),
        }
    }

    /// Gold codes must be valid; predicted codes degrade to `None`.
    pub fn to_field_prediction(&self) -> Result<FieldPrediction, MetricsError> {
        let bad = |field: &str, value: &str| MetricsError::MalformedLine {
            line: 0,
            message: format!("gold {field} code `{value}` is invalid"),
        };
        Ok(FieldPrediction {
            conversation_id: self.conv_id.clone(),
            round: self.turn,
            pred_eval: EvalCode::parse(&self.pred.eval).ok(),
            pred_action: ActionCode::parse(&self.pred.action).ok(),
            pred_substate: SubproblemState::parse(&self.pred.substate).ok(),
            gold_eval: EvalCode::parse(&self.gold.eval)
                .map_err(|_| bad("eval", &self.gold.eval))?,
            gold_action: ActionCode::parse(&self.gold.action)
                .map_err(|_| bad("action", &self.gold.action))?,
            gold_substate: SubproblemState::parse(&self.gold.substate)
                .map_err(|_| bad("substate", &self.gold.substate))?,
        })
    }
}

/// Reads a line-delimited prediction file into scoreable records.
pub fn read_predictions_jsonl<R: BufRead>(r: R) -> Result<Vec<FieldPrediction>, MetricsError> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| MetricsError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| MetricsError::MalformedLine {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        out.push(rec.to_field_prediction().map_err(|e| match e {
            MetricsError::MalformedLine { message, .. } => {
                MetricsError::MalformedLine { line: lineno + 1, message }
            }
            other => other,
        })?);
    }
    Ok(out)
}

pub fn write_predictions_jsonl<W: std::io::Write>(
    mut w: W,
    records: &[PredictionRecord],
) -> Result<(), MetricsError> {
    for rec in records {
        serde_json::to_writer(&mut w, rec).map_err(|e| MetricsError::Io(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| MetricsError::Io(e.to_string()))?;
    }
    Ok(())
}
