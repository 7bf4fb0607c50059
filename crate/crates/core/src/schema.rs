//! Structured tutor-response schema: codes, annotations, conversations,
//! stream parsing, and pedagogical-ordering validation.
//!
//! A tutor turn carries five fields: an evaluation code (`a`..`g`), an action
//! code (`1`..`12`), a subproblem state (`w`..`z`), the subproblem text, and
//! the tutor utterance. Conversations are stored one per line as JSON records
//! (see [`parse_conversation_stream`]).

use std::collections::HashSet;
use std::io::BufRead;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

/// Canonical tutor field names, as emitted on output.
pub const FIELD_EVAL: &str = "Evaluation of Student Response";
pub const FIELD_ACTION: &str = "Action Based on Evaluation";
pub const FIELD_SUBSTATE: &str = "Subproblem State";
pub const FIELD_SUBPROBLEM: &str = "Subproblem";
pub const FIELD_UTTERANCE: &str = "Tutorbot";

/// Short aliases accepted on input alongside the canonical names.
const ALIAS_EVAL: &str = "Eval of Student Response";
const ALIAS_ACTION: &str = "Action Based on Eval";

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("expected a JSON object for a tutor annotation")]
    NonObjectInput,
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("unknown code `{value}` for field `{field}`")]
    UnknownCode { field: String, value: String },
    #[error("field `{0}` must be a non-empty string")]
    EmptyField(String),
    #[error("conversation `{0}` has no turns")]
    EmptyConversation(String),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record at line {line}: {message}")]
    MalformedLine { line: usize, message: String },
}

/// Evaluation of the student response, codes `a` through `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EvalCode {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl EvalCode {
    pub const ALL: [EvalCode; 7] = [
        EvalCode::A,
        EvalCode::B,
        EvalCode::C,
        EvalCode::D,
        EvalCode::E,
        EvalCode::F,
        EvalCode::G,
    ];

    pub fn parse(s: &str) -> Result<Self, SchemaError> {
        match s.trim() {
            "a" => Ok(EvalCode::A),
            "b" => Ok(EvalCode::B),
            "c" => Ok(EvalCode::C),
            "d" => Ok(EvalCode::D),
            "e" => Ok(EvalCode::E),
            "f" => Ok(EvalCode::F),
            "g" => Ok(EvalCode::G),
            other => Err(SchemaError::UnknownCode {
                field: FIELD_EVAL.to_string(),
                value: other.to_string(),
            }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalCode::A => "a",
            EvalCode::B => "b",
            EvalCode::C => "c",
            EvalCode::D => "d",
            EvalCode::E => "e",
            EvalCode::F => "f",
            EvalCode::G => "g",
        }
    }

    /// Zero-based index, `a` = 0 .. `g` = 6.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl Serialize for EvalCode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EvalCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        EvalCode::parse(&s).map_err(D::Error::custom)
    }
}

/// Tutor action code, integer 1..=12. Codes 3 and 6..=12 carry no attached
/// semantics here; they are stored and compared by value only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionCode(u8);

impl ActionCode {
    pub const COUNT: usize = 12;

    pub fn new(code: u8) -> Result<Self, SchemaError> {
        if (1..=12).contains(&code) {
            Ok(ActionCode(code))
        } else {
            Err(SchemaError::UnknownCode {
                field: FIELD_ACTION.to_string(),
                value: code.to_string(),
            })
        }
    }

    /// Accepts both numeric strings (`"4"`) and the bare value.
    pub fn parse(s: &str) -> Result<Self, SchemaError> {
        s.trim()
            .parse::<u8>()
            .map_err(|_| SchemaError::UnknownCode {
                field: FIELD_ACTION.to_string(),
                value: s.to_string(),
            })
            .and_then(Self::new)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based index, action 1 = 0 .. action 12 = 11.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::new(i as u8 + 1).ok()
    }

    /// Guidance actions offer hints or feedback instead of the solution.
    pub fn is_guidance(self) -> bool {
        self.0 == 1 || self.0 == 4
    }

    /// Direct actions step in with the solution.
    pub fn is_direct(self) -> bool {
        self.0 == 2 || self.0 == 5
    }
}

impl Serialize for ActionCode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for ActionCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        action_from_value(&v).map_err(D::Error::custom)
    }
}

fn action_from_value(v: &Value) -> Result<ActionCode, SchemaError> {
    match v {
        Value::String(s) => ActionCode::parse(s),
        Value::Number(n) => n
            .as_u64()
            .filter(|&n| n <= u8::MAX as u64)
            .ok_or_else(|| SchemaError::UnknownCode {
                field: FIELD_ACTION.to_string(),
                value: n.to_string(),
            })
            .and_then(|n| ActionCode::new(n as u8)),
        other => Err(SchemaError::UnknownCode {
            field: FIELD_ACTION.to_string(),
            value: other.to_string(),
        }),
    }
}

/// Subproblem state, codes `w` through `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubproblemState {
    W,
    X,
    Y,
    Z,
}

impl SubproblemState {
    pub const ALL: [SubproblemState; 4] = [
        SubproblemState::W,
        SubproblemState::X,
        SubproblemState::Y,
        SubproblemState::Z,
    ];

    pub fn parse(s: &str) -> Result<Self, SchemaError> {
        match s.trim() {
            "w" => Ok(SubproblemState::W),
            "x" => Ok(SubproblemState::X),
            "y" => Ok(SubproblemState::Y),
            "z" => Ok(SubproblemState::Z),
            other => Err(SchemaError::UnknownCode {
                field: FIELD_SUBSTATE.to_string(),
                value: other.to_string(),
            }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SubproblemState::W => "w",
            SubproblemState::X => "x",
            SubproblemState::Y => "y",
            SubproblemState::Z => "z",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl Serialize for SubproblemState {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SubproblemState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        SubproblemState::parse(&s).map_err(D::Error::custom)
    }
}

/// One tutor turn's structured fields. Field order matches the canonical
/// on-disk order, so serialization round-trips canonical input byte for byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TutorAnnotation {
    #[serde(rename = "Evaluation of Student Response")]
    pub eval: EvalCode,
    #[serde(rename = "Action Based on Evaluation")]
    pub action: ActionCode,
    #[serde(rename = "Subproblem State")]
    pub substate: SubproblemState,
    #[serde(rename = "Subproblem")]
    pub subproblem: String,
    #[serde(rename = "Tutorbot")]
    pub utterance: String,
}

impl TutorAnnotation {
    /// Parses a tutor annotation from a JSON object, accepting both the
    /// canonical long field names and the short aliases
    /// (`"Eval of Student Response"`, `"Action Based on Eval"`). Action codes
    /// may arrive as numbers or numeric strings.
    pub fn from_value(raw: &Value) -> Result<Self, SchemaError> {
        let obj = raw.as_object().ok_or(SchemaError::NonObjectInput)?;

        let field = |long: &str, alias: Option<&str>| -> Result<&Value, SchemaError> {
            obj.get(long)
                .or_else(|| alias.and_then(|a| obj.get(a)))
                .ok_or_else(|| SchemaError::MissingField(long.to_string()))
        };
        let text = |name: &str, v: &Value| -> Result<String, SchemaError> {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| SchemaError::UnknownCode {
                    field: name.to_string(),
                    value: v.to_string(),
                })
        };

        let eval = EvalCode::parse(&text(FIELD_EVAL, field(FIELD_EVAL, Some(ALIAS_EVAL))?)?)?;
        let action = action_from_value(field(FIELD_ACTION, Some(ALIAS_ACTION))?)?;
        let substate =
            SubproblemState::parse(&text(FIELD_SUBSTATE, field(FIELD_SUBSTATE, None)?)?)?;
        let subproblem = text(FIELD_SUBPROBLEM, field(FIELD_SUBPROBLEM, None)?)?;
        let utterance = text(FIELD_UTTERANCE, field(FIELD_UTTERANCE, None)?)?;
        if utterance.is_empty() {
            return Err(SchemaError::EmptyField(FIELD_UTTERANCE.to_string()));
        }

        Ok(TutorAnnotation {
            eval,
            action,
            substate,
            subproblem,
            utterance,
        })
    }
}

impl<'de> Deserialize<'de> for TutorAnnotation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        TutorAnnotation::from_value(&v).map_err(D::Error::custom)
    }
}

/// Parses one tutor turn from an already-decoded key/value object.
pub fn parse_turn_annotation(raw: &Value) -> Result<TutorAnnotation, SchemaError> {
    TutorAnnotation::from_value(raw)
}

/// One student/tutor exchange. `index` is the 1-based turn number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationTurn {
    pub index: usize,
    pub student_utterance: String,
    pub tutor: TutorAnnotation,
}

/// A full tutoring conversation seeded by one question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub question: String,
    pub turns: Vec<ConversationTurn>,
}

/// On-disk shape of one conversation line.
#[derive(Serialize, Deserialize)]
struct ConversationRecord {
    id: String,
    question: String,
    turns: Vec<TurnRecord>,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    student: String,
    tutor: TutorAnnotation,
}

impl Conversation {
    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        let rec: ConversationRecord = serde_json::from_str(line)?;
        if rec.turns.is_empty() {
            return Err(serde_json::Error::custom(format!(
                "conversation `{}` has no turns",
                rec.id
            )));
        }
        Ok(Conversation {
            id: rec.id,
            question: rec.question,
            turns: rec
                .turns
                .into_iter()
                .enumerate()
                .map(|(i, t)| ConversationTurn {
                    index: i + 1,
                    student_utterance: t.student,
                    tutor: t.tutor,
                })
                .collect(),
        })
    }

    pub fn to_json_line(&self) -> String {
        let rec = ConversationRecord {
            id: self.id.clone(),
            question: self.question.clone(),
            turns: self
                .turns
                .iter()
                .map(|t| TurnRecord {
                    student: t.student_utterance.clone(),
                    tutor: t.tutor.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&rec).expect("conversation serialization cannot fail")
    }
}

/// Whether a malformed line aborts the stream or is counted and skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

/// Line counts from one pass over a conversation stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ParseStats {
    /// Non-blank lines consumed (`parsed + skipped`).
    pub total: usize,
    pub parsed: usize,
    pub skipped: usize,
}

/// Reads line-delimited conversation records. Blank lines are ignored. In
/// lenient mode malformed lines are counted and skipped; in strict mode the
/// first malformed line aborts.
pub fn parse_conversation_stream<R: BufRead>(
    source: R,
    mode: ParseMode,
) -> Result<(Vec<Conversation>, ParseStats), SchemaError> {
    let mut convs = Vec::new();
    let mut stats = ParseStats::default();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.total += 1;
        match Conversation::from_json_line(&line) {
            Ok(conv) => {
                stats.parsed += 1;
                convs.push(conv);
            }
            Err(err) => match mode {
                ParseMode::Strict => {
                    return Err(SchemaError::MalformedLine {
                        line: lineno + 1,
                        message: err.to_string(),
                    })
                }
                ParseMode::Lenient => stats.skipped += 1,
            },
        }
    }
    Ok((convs, stats))
}

/// Identifier of a violated ordering rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RuleId {
    /// Action 2 appeared with no prior action 1.
    #[serde(rename = "action-2-before-1")]
    Action2Before1,
    /// Action 5 appeared with no prior action 4.
    #[serde(rename = "action-5-before-4")]
    Action5Before4,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub turn: usize,
    pub rule: RuleId,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub conversation_id: String,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the guidance-before-solution ordering: a direct-solution action
/// (2 or 5) is only valid after its guidance counterpart (1 or 4) has
/// occurred earlier in the conversation.
pub fn validate_action_ordering(conv: &Conversation) -> ValidationReport {
    let mut seen1 = false;
    let mut seen4 = false;
    let mut violations = Vec::new();
    for turn in &conv.turns {
        match turn.tutor.action.get() {
            2 if !seen1 => violations.push(Violation {
                turn: turn.index,
                rule: RuleId::Action2Before1,
                message: format!("action 2 at turn {} with no prior action 1", turn.index),
            }),
            5 if !seen4 => violations.push(Violation {
                turn: turn.index,
                rule: RuleId::Action5Before4,
                message: format!("action 5 at turn {} with no prior action 4", turn.index),
            }),
            _ => {}
        }
        match turn.tutor.action.get() {
            1 => seen1 = true,
            4 => seen4 = true,
            _ => {}
        }
    }
    ValidationReport {
        conversation_id: conv.id.clone(),
        violations,
    }
}

/// Corpus-level shape summary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DatasetStats {
    pub conversations: usize,
    /// Total QA pairs; every turn is one question-answer pair.
    pub qa_pairs: usize,
    pub mean_rounds: f64,
    pub mean_words: f64,
}

/// Counts conversations, QA pairs, and per-conversation means. Words are
/// whitespace-separated runs over the question, student utterances, and
/// tutor utterances.
pub fn dataset_stats(convs: &[Conversation]) -> DatasetStats {
    if convs.is_empty() {
        return DatasetStats::default();
    }
    let qa_pairs: usize = convs.iter().map(|c| c.turns.len()).sum();
    let words: usize = convs
        .iter()
        .map(|c| {
            c.question.split_whitespace().count()
                + c.turns
                    .iter()
                    .map(|t| {
                        t.student_utterance.split_whitespace().count()
                            + t.tutor.utterance.split_whitespace().count()
                    })
                    .sum::<usize>()
        })
        .sum();
    let n = convs.len() as f64;
    DatasetStats {
        conversations: convs.len(),
        qa_pairs,
        mean_rounds: qa_pairs as f64 / n,
        mean_words: words as f64 / n,
    }
}

/// Checks that conversation ids are unique within a corpus.
pub fn duplicate_ids(convs: &[Conversation]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut dups = Vec::new();
    for c in convs {
        if !seen.insert(c.id.as_str()) {
            dups.push(c.id.clone());
        }
    }
    dups
}
