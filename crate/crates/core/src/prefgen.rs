//! Preference-data construction: conversation contexts, the signature
//! function that decides divergence between two tutor streams, misaligned
//! perplexity probes, noisy rejected-stream synthesis, and corpus splitting.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{
    ActionCode, Conversation, EvalCode, SchemaError, SubproblemState, TutorAnnotation,
};

/// The three partitions produced by [`split_dataset`]: SFT training, LHP
/// training source, and held-out test conversations.
pub type SplitPartitions = (Vec<Conversation>, Vec<Conversation>, Vec<Conversation>);

#[derive(Debug, Error)]
pub enum PrefgenError {
    #[error("turn {turn} out of range for conversation `{conv}` with {len} turns")]
    TurnOutOfRange { conv: String, turn: usize, len: usize },
    #[error("misaligned streams: {0}")]
    MisalignedStreams(String),
    #[error("solution bank has no answer for subproblem `{0}`")]
    MissingSolution(String),
    #[error("corpus of {have} conversations cannot cover splits totalling {need}")]
    InsufficientCorpus { have: usize, need: usize },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record at line {line}: {message}")]
    MalformedLine { line: usize, message: String },
}

/// Conversation history conditioning a tutor's turn-`t` response: the seed
/// question, student utterances 1..=t, and tutor annotations 1..=t-1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub question: String,
    #[serde(rename = "students")]
    pub student_utterances: Vec<String>,
    #[serde(rename = "tutors")]
    pub tutor_annotations: Vec<TutorAnnotation>,
}

/// The pedagogical attribute triple compared between two tutor responses.
/// Two annotations diverge iff any of the three fields differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature {
    pub eval: EvalCode,
    pub action: ActionCode,
    pub substate: SubproblemState,
}

/// Projects an annotation onto its signature; subproblem text and utterance
/// are ignored.
pub fn pedagogical_signature(ann: &TutorAnnotation) -> Signature {
    Signature {
        eval: ann.eval,
        action: ann.action,
        substate: ann.substate,
    }
}

/// One preference record: at this context the `chosen` response is
/// pedagogically preferred over the `rejected` one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context: Context,
    pub chosen: TutorAnnotation,
    pub rejected: TutorAnnotation,
    #[serde(rename = "conv_id")]
    pub source_conversation: String,
    pub turn: usize,
}

/// Which aligned/misaligned action pairing a probe exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    #[serde(rename = "A1vsA2")]
    A1VsA2,
    #[serde(rename = "A4vsA5")]
    A4VsA5,
}

/// A perplexity probe: the conversation's actual guidance response next to a
/// synthesized direct-solution response under the identical context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerplexityProbe {
    pub context: Context,
    pub aligned: TutorAnnotation,
    pub misaligned: TutorAnnotation,
    pub probe_kind: ProbeKind,
    #[serde(rename = "conv_id")]
    pub source_conversation: String,
    pub turn: usize,
}

/// Seeded three-way split sizes, in conversations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub n_sft: usize,
    pub n_lhp: usize,
    pub n_test: usize,
}

/// Builds the context for the tutor's turn-`t` response (1-based).
pub fn build_context(conv: &Conversation, t: usize) -> Result<Context, PrefgenError> {
    if t == 0 || t > conv.turns.len() {
        return Err(PrefgenError::TurnOutOfRange {
            conv: conv.id.clone(),
            turn: t,
            len: conv.turns.len(),
        });
    }
    Ok(Context {
        question: conv.question.clone(),
        student_utterances: conv.turns[..t]
            .iter()
            .map(|turn| turn.student_utterance.clone())
            .collect(),
        tutor_annotations: conv.turns[..t - 1]
            .iter()
            .map(|turn| turn.tutor.clone())
            .collect(),
    })
}

/// Builds preference pairs from two aligned tutor streams. For every turn
/// where the signatures diverge, the `tutor_stream` response is chosen and
/// the `sft_stream` response rejected; turns with equal signatures emit
/// nothing. Streams are matched by conversation id and must agree on turn
/// counts and student utterances.
pub fn build_preference_pairs(
    tutor_stream: &[Conversation],
    sft_stream: &[Conversation],
) -> Result<Vec<PreferencePair>, PrefgenError> {
    let by_id: HashMap<&str, &Conversation> =
        sft_stream.iter().map(|c| (c.id.as_str(), c)).collect();

    let mut pairs = Vec::new();
    for tutor_conv in tutor_stream {
        let sft_conv = by_id.get(tutor_conv.id.as_str()).ok_or_else(|| {
            PrefgenError::MisalignedStreams(format!(
                "conversation `{}` missing from the rejected stream",
                tutor_conv.id
            ))
        })?;
        if tutor_conv.turns.len() != sft_conv.turns.len() {
            return Err(PrefgenError::MisalignedStreams(format!(
                "conversation `{}` has {} turns vs {} in the rejected stream",
                tutor_conv.id,
                tutor_conv.turns.len(),
                sft_conv.turns.len()
            )));
        }
        for (a, b) in tutor_conv.turns.iter().zip(&sft_conv.turns) {
            if a.student_utterance != b.student_utterance {
                return Err(PrefgenError::MisalignedStreams(format!(
                    "conversation `{}` turn {}: student utterances differ",
                    tutor_conv.id, a.index
                )));
            }
            if pedagogical_signature(&a.tutor) != pedagogical_signature(&b.tutor) {
                pairs.push(PreferencePair {
                    context: build_context(tutor_conv, a.index)?,
                    chosen: a.tutor.clone(),
                    rejected: b.tutor.clone(),
                    source_conversation: tutor_conv.id.clone(),
                    turn: a.index,
                });
            }
        }
    }
    Ok(pairs)
}

/// Utterance template for synthesized direct-solution responses.
pub fn direct_solution_utterance(answer: &str) -> String {
    format!("The answer to this part is: {answer}. Let's move on.")
}

/// Builds perplexity probes from a conversation: for the first turn with
/// action 1 an `A1vsA2` probe, for the first with action 4 an `A4vsA5`
/// probe. The misaligned annotation carries action +1 and a direct-solution
/// utterance synthesized from the solution bank. Assumes the conversation is
/// ordering-valid.
pub fn build_misaligned_probes(
    conv: &Conversation,
    solution_bank: &HashMap<String, String>,
) -> Result<Vec<PerplexityProbe>, PrefgenError> {
    let mut probes = Vec::new();
    for (aligned_action, kind) in [(1u8, ProbeKind::A1VsA2), (4u8, ProbeKind::A4VsA5)] {
        let turn = match conv
            .turns
            .iter()
            .find(|t| t.tutor.action.get() == aligned_action)
        {
            Some(t) => t,
            None => continue,
        };
        let answer = solution_bank
            .get(&turn.tutor.subproblem)
            .ok_or_else(|| PrefgenError::MissingSolution(turn.tutor.subproblem.clone()))?;
        let misaligned = TutorAnnotation {
            action: ActionCode::new(aligned_action + 1).expect("1->2 and 4->5 are in range"),
            utterance: direct_solution_utterance(answer),
            ..turn.tutor.clone()
        };
        probes.push(PerplexityProbe {
            context: build_context(conv, turn.index)?,
            aligned: turn.tutor.clone(),
            misaligned,
            probe_kind: kind,
            source_conversation: conv.id.clone(),
            turn: turn.index,
        });
    }
    Ok(probes)
}

/// Reinterprets probes as preference pairs: the conversation's guidance
/// response is chosen, the synthesized direct-solution response rejected.
/// Signatures always diverge because the actions differ.
pub fn pairs_from_probes(probes: &[PerplexityProbe]) -> Vec<PreferencePair> {
    probes
        .iter()
        .map(|p| PreferencePair {
            context: p.context.clone(),
            chosen: p.aligned.clone(),
            rejected: p.misaligned.clone(),
            source_conversation: p.source_conversation.clone(),
            turn: p.turn,
        })
        .collect()
}

/// Perturbs a tutor stream into a degraded rejected stream: each signature
/// field flips to a uniformly random different code with probability
/// `flip_prob`, independently per field. Contexts, students, subproblem
/// text, and utterances are untouched.
pub fn perturb_stream(convs: &[Conversation], flip_prob: f64, seed: u64) -> Vec<Conversation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    convs
        .iter()
        .map(|conv| {
            let mut out = conv.clone();
            for turn in &mut out.turns {
                let ann = &mut turn.tutor;
                if rng.gen::<f64>() < flip_prob {
                    ann.eval = flip_code(&mut rng, ann.eval.index(), 7, EvalCode::from_index);
                }
                if rng.gen::<f64>() < flip_prob {
                    ann.action =
                        flip_code(&mut rng, ann.action.index(), 12, ActionCode::from_index);
                }
                if rng.gen::<f64>() < flip_prob {
                    ann.substate =
                        flip_code(&mut rng, ann.substate.index(), 4, SubproblemState::from_index);
                }
            }
            out
        })
        .collect()
}

fn flip_code<T>(
    rng: &mut ChaCha8Rng,
    current: usize,
    n: usize,
    from_index: impl Fn(usize) -> Option<T>,
) -> T {
    // Uniform over the n-1 other codes.
    let offset = rng.gen_range(1..n);
    from_index((current + offset) % n).expect("index in range by construction")
}

/// Splits a corpus into (SFT, LHP, test) partitions: conversations are
/// sorted by id, shuffled under the seed, then assigned contiguously.
/// Leftovers are discarded.
pub fn split_dataset(
    convs: &[Conversation],
    spec: &SplitSpec,
) -> Result<SplitPartitions, PrefgenError> {
    let need = spec.n_sft + spec.n_lhp + spec.n_test;
    if need > convs.len() {
        return Err(PrefgenError::InsufficientCorpus {
            have: convs.len(),
            need,
        });
    }
    let mut ordered: Vec<&Conversation> = convs.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ordered.shuffle(&mut rng);

    let sft = ordered[..spec.n_sft].iter().map(|c| (*c).clone()).collect();
    let lhp = ordered[spec.n_sft..spec.n_sft + spec.n_lhp]
        .iter()
        .map(|c| (*c).clone())
        .collect();
    let test = ordered[spec.n_sft + spec.n_lhp..need]
        .iter()
        .map(|c| (*c).clone())
        .collect();
    Ok((sft, lhp, test))
}

/// Writes preference pairs as line-delimited JSON.
pub fn write_pairs_jsonl<W: Write>(mut w: W, pairs: &[PreferencePair]) -> Result<(), PrefgenError> {
    for pair in pairs {
        serde_json::to_writer(&mut w, pair)
            .map_err(|e| PrefgenError::Io(std::io::Error::other(e)))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs_jsonl<R: BufRead>(r: R) -> Result<Vec<PreferencePair>, PrefgenError> {
    read_jsonl(r)
}

/// Writes perplexity probes as line-delimited JSON.
pub fn write_probes_jsonl<W: Write>(
    mut w: W,
    probes: &[PerplexityProbe],
) -> Result<(), PrefgenError> {
    for probe in probes {
        serde_json::to_writer(&mut w, probe)
            .map_err(|e| PrefgenError::Io(std::io::Error::other(e)))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_probes_jsonl<R: BufRead>(r: R) -> Result<Vec<PerplexityProbe>, PrefgenError> {
    read_jsonl(r)
}

fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>, PrefgenError> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| PrefgenError::MalformedLine {
                line: lineno + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Reads a solution bank: a JSON object mapping subproblem text to answer
/// text.
pub fn read_solution_bank<R: std::io::Read>(
    r: R,
) -> Result<HashMap<String, String>, PrefgenError> {
    serde_json::from_reader(r).map_err(|e| PrefgenError::MalformedLine {
        line: 0,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Conversation;
    use serde_json::json;

    fn annotation(eval: &str, action: u8, substate: &str, utterance: &str) -> TutorAnnotation {
        TutorAnnotation {
            eval: EvalCode::parse(eval).unwrap(),
            action: ActionCode::new(action).unwrap(),
            substate: SubproblemState::parse(substate).unwrap(),
            subproblem: "part one".into(),
            utterance: utterance.into(),
        }
    }

    fn conv(id: &str, specs: &[(&str, u8)]) -> Conversation {
        let turns: Vec<serde_json::Value> = specs
            .iter()
            .enumerate()
            .map(|(i, (eval, action))| {
                json!({
                    "student": format!("student turn {}", i + 1),
                    "tutor": {
                        "Evaluation of Student Response": eval,
                        "Action Based on Evaluation": action.to_string(),
                        "Subproblem State": "x",
                        "Subproblem": "part one",
                        "Tutorbot": format!("tutor turn {}", i + 1),
                    }
                })
            })
            .collect();
        Conversation::from_json_line(
            &json!({"id": id, "question": "Q?", "turns": turns}).to_string(),
        )
        .unwrap()
    }

    #[test]
    fn context_at_first_turn_has_no_tutor_history() {
        let c = conv("c", &[("a", 1), ("b", 3)]);
        let ctx = build_context(&c, 1).unwrap();
        assert_eq!(ctx.student_utterances.len(), 1);
        assert!(ctx.tutor_annotations.is_empty());
        assert_eq!(ctx.question, "Q?");
    }

    #[test]
    fn context_counts_follow_turn_index() {
        let c = conv("c", &[("a", 1); 5]);
        let ctx = build_context(&c, 3).unwrap();
        assert_eq!(ctx.student_utterances.len(), 3);
        assert_eq!(ctx.tutor_annotations.len(), 2);
    }

    #[test]
    fn context_rejects_out_of_range_turn() {
        let c = conv("c", &[("a", 1); 5]);
        assert!(matches!(
            build_context(&c, 6),
            Err(PrefgenError::TurnOutOfRange { .. })
        ));
        assert!(build_context(&c, 0).is_err());
    }

    #[test]
    fn signature_ignores_free_text() {
        let a = annotation("a", 1, "x", "one wording");
        let b = annotation("a", 1, "x", "a different wording");
        assert_eq!(pedagogical_signature(&a), pedagogical_signature(&b));
        let c = annotation("a", 2, "x", "one wording");
        assert_ne!(pedagogical_signature(&a), pedagogical_signature(&c));
    }

    #[test]
    fn equal_streams_emit_no_pairs() {
        let a = conv("c", &[("a", 1), ("b", 3)]);
        let pairs =
            build_preference_pairs(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn divergent_turn_emits_one_pair_with_tutor_stream_chosen() {
        let tutor = conv("c", &[("a", 1), ("a", 1)]);
        let mut sft = tutor.clone();
        sft.turns[1].tutor.action = ActionCode::new(2).unwrap();
        let pairs = build_preference_pairs(&[tutor], &[sft]).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].turn, 2);
        assert_eq!(pairs[0].chosen.action.get(), 1);
        assert_eq!(pairs[0].rejected.action.get(), 2);
        assert_eq!(pairs[0].context.student_utterances.len(), 2);
    }

    #[test]
    fn mismatched_streams_are_rejected() {
        let a = conv("c", &[("a", 1), ("b", 3)]);
        let missing = build_preference_pairs(std::slice::from_ref(&a), &[]);
        assert!(matches!(missing, Err(PrefgenError::MisalignedStreams(_))));

        let short = conv("c", &[("a", 1)]);
        assert!(build_preference_pairs(std::slice::from_ref(&a), &[short]).is_err());

        let mut other_student = a.clone();
        other_student.turns[0].student_utterance = "something else".into();
        assert!(build_preference_pairs(&[a], &[other_student]).is_err());
    }

    fn bank() -> HashMap<String, String> {
        HashMap::from([("part one".to_string(), "oxygen".to_string())])
    }

    #[test]
    fn probes_fire_on_first_occurrence_only() {
        let c = conv("c", &[("a", 3), ("a", 1), ("a", 1), ("c", 4)]);
        let probes = build_misaligned_probes(&c, &bank()).unwrap();
        assert_eq!(probes.len(), 2);
        assert_eq!(probes[0].probe_kind, ProbeKind::A1VsA2);
        assert_eq!(probes[0].turn, 2);
        assert_eq!(probes[0].misaligned.action.get(), 2);
        assert_eq!(probes[1].probe_kind, ProbeKind::A4VsA5);
        assert_eq!(probes[1].turn, 4);
        assert_eq!(probes[1].misaligned.action.get(), 5);
    }

    #[test]
    fn probe_misaligned_action_is_aligned_plus_one() {
        let c = conv("c", &[("a", 1), ("c", 4)]);
        for p in build_misaligned_probes(&c, &bank()).unwrap() {
            assert_eq!(p.misaligned.action.get(), p.aligned.action.get() + 1);
            assert_eq!(p.context, build_context(&c, p.turn).unwrap());
        }
    }

    #[test]
    fn no_guidance_actions_means_no_probes() {
        let c = conv("c", &[("a", 3), ("b", 6)]);
        assert!(build_misaligned_probes(&c, &bank()).unwrap().is_empty());
    }

    #[test]
    fn missing_solution_is_an_error() {
        let c = conv("c", &[("a", 1)]);
        let err = build_misaligned_probes(&c, &HashMap::new()).unwrap_err();
        assert!(matches!(err, PrefgenError::MissingSolution(_)));
    }

    #[test]
    fn probe_pairs_always_diverge() {
        let c = conv("c", &[("a", 1), ("c", 4)]);
        let probes = build_misaligned_probes(&c, &bank()).unwrap();
        for pair in pairs_from_probes(&probes) {
            assert_ne!(
                pedagogical_signature(&pair.chosen),
                pedagogical_signature(&pair.rejected)
            );
        }
    }

    fn corpus(n: usize) -> Vec<Conversation> {
        (0..n).map(|i| conv(&format!("c{i:04}"), &[("a", 1)])).collect()
    }

    #[test]
    fn split_sizes_and_discards() {
        let convs = corpus(1738);
        let spec = SplitSpec { seed: 7, n_sft: 600, n_lhp: 600, n_test: 450 };
        let (sft, lhp, test) = split_dataset(&convs, &spec).unwrap();
        assert_eq!((sft.len(), lhp.len(), test.len()), (600, 600, 450));
        let mut ids: Vec<&str> = sft.iter().chain(&lhp).chain(&test).map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 1650, "partitions must be pairwise disjoint");
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let convs = corpus(30);
        let spec = SplitSpec { seed: 11, n_sft: 10, n_lhp: 10, n_test: 5 };
        let a = split_dataset(&convs, &spec).unwrap();
        let b = split_dataset(&convs, &spec).unwrap();
        assert_eq!(a, b);
        let other = split_dataset(&convs, &SplitSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn split_is_input_order_independent() {
        let mut convs = corpus(30);
        let spec = SplitSpec { seed: 11, n_sft: 10, n_lhp: 10, n_test: 5 };
        let a = split_dataset(&convs, &spec).unwrap();
        convs.reverse();
        let b = split_dataset(&convs, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_split_is_rejected() {
        let convs = corpus(5);
        let spec = SplitSpec { seed: 1, n_sft: 2, n_lhp: 2, n_test: 2 };
        assert!(matches!(
            split_dataset(&convs, &spec),
            Err(PrefgenError::InsufficientCorpus { have: 5, need: 6 })
        ));
    }

    #[test]
    fn perturb_preserves_structure_and_flips_fields() {
        let convs = corpus(50);
        let noisy = perturb_stream(&convs, 1.0, 3);
        assert_eq!(noisy.len(), convs.len());
        for (orig, pert) in convs.iter().zip(&noisy) {
            assert_eq!(orig.id, pert.id);
            for (a, b) in orig.turns.iter().zip(&pert.turns) {
                assert_eq!(a.student_utterance, b.student_utterance);
                assert_eq!(a.tutor.utterance, b.tutor.utterance);
                // flip probability 1.0 changes every field
                assert_ne!(a.tutor.eval, b.tutor.eval);
                assert_ne!(a.tutor.action, b.tutor.action);
                assert_ne!(a.tutor.substate, b.tutor.substate);
            }
        }
        assert_eq!(perturb_stream(&convs, 0.0, 3), convs);
        assert_eq!(perturb_stream(&convs, 0.5, 9), perturb_stream(&convs, 0.5, 9));
    }

    #[test]
    fn pair_jsonl_round_trips() {
        let tutor = conv("c", &[("a", 1), ("a", 1)]);
        let mut sft = tutor.clone();
        sft.turns[0].tutor.eval = EvalCode::parse("b").unwrap();
        let pairs = build_preference_pairs(&[tutor], &[sft]).unwrap();
        let mut buf = Vec::new();
        write_pairs_jsonl(&mut buf, &pairs).unwrap();
        let back = read_pairs_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, pairs);
    }
}
