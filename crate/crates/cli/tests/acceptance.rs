//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! 1. Aggregation arithmetic of the reported accuracy/F1 cells.
//! 2. Closed-form loss identities for DPO, IPO, and KTO.
//! 3. Gradient verification, input-level and end-to-end parameter-level.
//! 4. Pipeline integrity on the bundled fixture plus split semantics.
//! 5. Direction-level perplexity-gap reproduction (SFT separates, DPO/KTO
//!    widen both gaps).
//! 6. Direction-level accuracy ordering (every LHP algorithm at least
//!    matches SFT; DPO and KTO at least match IPO).
//! 7. Metric equivalence against independent brute-force implementations.
//! 8. Byte-identical artifacts across reruns with the same seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pedalign_cli::config::{PairSource, RunConfig};
use pedalign_cli::pipeline::{build_probes_for, build_vocab, run_pipeline, sft_examples};
use pedalign_core::losses::{
    batch_objective, dpo_loss, grad_check, ipo_loss, kto_loss, Algo, BatchInput, Beta,
    CheckPoint, KtoExample, KtoLabel, QuadLogProbs,
};
use pedalign_core::metrics::{
    field_accuracy, format_accuracy_cell, format_f1_cell, macro_f1, multi_round_curve,
    perplexity, ppl_gap_report, FieldPrediction, FieldScores, PplTable,
};
use pedalign_core::policy::{
    lhp_param_grads, lhp_train, sft_train, ToyTutorPolicy, TrainConfig,
};
use pedalign_core::prefgen::{
    build_context, build_misaligned_probes, build_preference_pairs, pairs_from_probes,
    pedagogical_signature, perturb_stream, split_dataset, Context, PreferencePair, SplitSpec,
};
use pedalign_core::schema::{
    parse_conversation_stream, ActionCode, Conversation, ConversationTurn, EvalCode, ParseMode,
    SubproblemState, TutorAnnotation,
};

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($fmt)+)),
        }
    };
}

fn criterion(n: usize, name: &str, body: impl FnOnce() -> Result<(), String>) {
    match body() {
        Ok(()) => println!("criterion {n} ({name}): PASS"),
        Err(msg) => {
            println!("criterion {n} ({name}): FAIL - {msg}");
            panic!("criterion {n} ({name}) failed: {msg}");
        }
    }
}

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn load_fixture(name: &str) -> Vec<Conversation> {
    let path = fixtures_dir().join(name);
    let file = std::fs::File::open(&path)
        .unwrap_or_else(|e| panic!("cannot open {}: {e}", path.display()));
    let (convs, _) = parse_conversation_stream(std::io::BufReader::new(file), ParseMode::Strict)
        .expect("fixture corpus is well-formed");
    convs
}

/// The demo configuration over the bundled fixture, pinned in code.
fn fixture_config(out_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.corpus = fixtures_dir().join("corpus.jsonl");
    cfg.paths.solutions = Some(fixtures_dir().join("solutions.json"));
    cfg.paths.rejected = Some(fixtures_dir().join("corpus_sft.jsonl"));
    cfg.paths.out_dir = out_dir.to_path_buf();
    cfg.split.seed = 42;
    cfg.split.n_sft = 16;
    cfg.split.n_lhp = 16;
    cfg.split.n_test = 8;
    cfg.policy.n_buckets = 64;
    cfg.sft.learning_rate = 0.05;
    cfg.sft.epochs = 12;
    cfg.sft.seed = 42;
    cfg.lhp.learning_rate = 0.04;
    cfg.lhp.epochs = 30;
    cfg.lhp.seed = 42;
    cfg.lhp.beta = 0.1;
    cfg
}

/// Splits the fixture and trains the SFT policy exactly as the pipeline does.
fn fixture_sft(
    cfg: &RunConfig,
) -> (Vec<Conversation>, Vec<Conversation>, Vec<Conversation>, ToyTutorPolicy) {
    let corpus = load_fixture("corpus.jsonl");
    let (d_c, d_p, d_t) = split_dataset(&corpus, &cfg.split.spec()).expect("split is feasible");
    let mut policy = ToyTutorPolicy::new(build_vocab(&d_c), cfg.policy.n_buckets);
    let sft_cfg = cfg.sft.train_config().expect("valid config");
    sft_train(&mut policy, &sft_examples(&d_c), &sft_cfg).expect("sft training succeeds");
    (d_c, d_p, d_t, policy)
}

fn mean_accuracy_of(policy: &ToyTutorPolicy, convs: &[Conversation]) -> f64 {
    let mut preds = Vec::new();
    for conv in convs {
        for turn in &conv.turns {
            let ctx = build_context(conv, turn.index).unwrap();
            let pred = policy.annotate(&ctx);
            preds.push(FieldPrediction::from_annotations(
                &conv.id, turn.index, &pred, &turn.tutor,
            ));
        }
    }
    field_accuracy(&preds).unwrap().mean
}

#[test]
fn criterion_1_aggregation_arithmetic() {
    criterion(1, "aggregation arithmetic", || {
        let acc = FieldScores::new(0.74, 0.74, 0.84);
        ensure!(
            (acc.mean - 0.7733333333333333).abs() < 1e-12,
            "accuracy mean {} is not 77.33%",
            acc.mean
        );
        let cell = format_accuracy_cell(&acc);
        ensure!(cell == "77 (74, 74, 84)", "accuracy cell rendered as `{cell}`");

        let f1 = FieldScores::new(0.42, 0.24, 0.37);
        ensure!(
            (f1.mean - 0.3433333333333333).abs() < 1e-12,
            "f1 mean {} is not 0.3433",
            f1.mean
        );
        let cell = format_f1_cell(&f1);
        ensure!(cell == "0.34 (0.42, 0.24, 0.37)", "f1 cell rendered as `{cell}`");
        Ok(())
    });
}

#[test]
fn criterion_2_loss_identities() {
    criterion(2, "loss identities", || {
        let at_reference = QuadLogProbs::new(-3.25, -3.25, -7.5, -7.5).unwrap();
        for beta_value in [0.1, 0.3, 0.6, 0.9] {
            let beta = Beta::new(beta_value).unwrap();
            let dpo = dpo_loss(&at_reference, beta).loss;
            ensure!(
                (dpo - std::f64::consts::LN_2).abs() <= 1e-12,
                "DPO at policy==reference is {dpo}, not ln 2, at beta {beta_value}"
            );
            let ipo = ipo_loss(&at_reference, beta).loss;
            let expect = 1.0 / (4.0 * beta_value * beta_value);
            ensure!(
                (ipo - expect).abs() <= 1e-12,
                "IPO at policy==reference is {ipo}, not {expect}, at beta {beta_value}"
            );
        }
        ensure!(
            (ipo_loss(&at_reference, Beta::new(0.1).unwrap()).loss - 25.0).abs() <= 1e-12,
            "IPO identity at beta 0.1 is not 25.0"
        );
        // h = 5 = 1/(2*0.1) exactly
        let at_target = QuadLogProbs::new(-1.0, -4.0, -9.0, -7.0).unwrap();
        let at_min = ipo_loss(&at_target, Beta::new(0.1).unwrap());
        ensure!(at_min.loss == 0.0, "IPO at its minimizer is {}, not 0", at_min.loss);

        for (lambda, label) in [(1.0, KtoLabel::Desirable), (2.5, KtoLabel::Undesirable)] {
            let ex = KtoExample { lp_policy: -2.0, lp_ref: -3.0, label };
            let res = kto_loss(&ex, Beta::new(0.3).unwrap(), 1.0, lambda, lambda).unwrap();
            ensure!(
                (res.loss - lambda / 2.0).abs() <= 1e-12,
                "KTO at r == ref_point is {}, not lambda/2 = {}",
                res.loss,
                lambda / 2.0
            );
        }
        Ok(())
    });
}

#[test]
fn criterion_3_gradient_verification() {
    criterion(3, "gradient verification", || {
        // Input-level: 1000 random points per algorithm, eps 1e-5.
        let mut rng = ChaCha8Rng::seed_from_u64(271828);
        let betas = [0.1, 0.3, 0.6, 0.9];
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let beta = Beta::new(betas[rng.gen_range(0..betas.len())]).unwrap();
            let coords: Vec<f64> = (0..5).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let quad = QuadLogProbs::new(coords[0], coords[1], coords[2], coords[3]).unwrap();
            worst = worst.max(grad_check(Algo::Dpo, &CheckPoint::Paired(quad), beta, 1e-5));
            worst = worst.max(grad_check(Algo::Ipo, &CheckPoint::Paired(quad), beta, 1e-5));
            let kto = CheckPoint::Kto {
                example: KtoExample {
                    lp_policy: coords[0],
                    lp_ref: coords[1],
                    label: if rng.gen() { KtoLabel::Desirable } else { KtoLabel::Undesirable },
                },
                ref_point: coords[4],
            };
            worst = worst.max(grad_check(Algo::Kto, &kto, beta, 1e-5));
        }
        ensure!(worst <= 1e-6, "input-level max relative error {worst} exceeds 1e-6");

        // End-to-end: analytic parameter gradients of the batch objective vs
        // central differences on 20 sampled parameters, eps 1e-4.
        let (policy, reference, pairs) = grad_check_setting();
        let beta = Beta::new(0.1).unwrap();
        for algo in [Algo::Dpo, Algo::Ipo, Algo::Kto] {
            if algo == Algo::Kto {
                // The leave-one-out reference point must sit strictly in its
                // clamped region so it is locally constant.
                for p in &pairs {
                    let r_c = policy.annotation_logprob(&p.context, &p.chosen)
                        - reference.annotation_logprob(&p.context, &p.chosen);
                    let r_r = policy.annotation_logprob(&p.context, &p.rejected)
                        - reference.annotation_logprob(&p.context, &p.rejected);
                    ensure!(
                        r_c < -1e-3 && r_r < -1e-3,
                        "KTO setting requires strictly negative log-ratios, got {r_c}, {r_r}"
                    );
                }
            }
            let analytic = lhp_param_grads(&policy, &reference, &pairs, algo, beta)
                .map_err(|e| e.to_string())?;
            let eps = 1e-4;
            let total = policy.weights.flat_len();
            let mut sample_rng = ChaCha8Rng::seed_from_u64(314159 + algo as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let idx = sample_rng.gen_range(0..total);
                let mut plus = policy.clone();
                plus.weights.add_flat(idx, eps);
                let mut minus = policy.clone();
                minus.weights.add_flat(idx, -eps);
                let numeric = (batch_loss(&plus, &reference, &pairs, algo, beta)
                    - batch_loss(&minus, &reference, &pairs, algo, beta))
                    / (2.0 * eps);
                let a = analytic.get_flat(idx);
                let err = (a - numeric).abs() / a.abs().max(1.0);
                worst = worst.max(err);
            }
            ensure!(
                worst <= 1e-4,
                "end-to-end max relative error {worst} exceeds 1e-4 for {algo}"
            );
        }
        Ok(())
    });
}

/// A small policy, a reference that strictly dominates it on the pair
/// annotations, and a mixed batch of preference pairs.
fn grad_check_setting() -> (ToyTutorPolicy, ToyTutorPolicy, Vec<PreferencePair>) {
    let texts = [
        "look at the first part again",
        "the answer is the gradient",
        "try the next step now",
        "here is the full solution",
    ];
    let vocab = pedalign_core::policy::Vocab::build(texts);
    let policy = ToyTutorPolicy::new(vocab, 4);

    let ann = |eval: usize, action: u8, substate: usize, utt: &str| TutorAnnotation {
        eval: EvalCode::from_index(eval).unwrap(),
        action: ActionCode::new(action).unwrap(),
        substate: SubproblemState::from_index(substate).unwrap(),
        subproblem: "part".into(),
        utterance: utt.into(),
    };
    let ctx = |student: &str| Context {
        question: "Q?".into(),
        student_utterances: vec![student.to_string()],
        tutor_annotations: vec![],
    };
    let pairs: Vec<PreferencePair> = (0..6)
        .map(|i| PreferencePair {
            context: ctx(&format!("student message {i}")),
            chosen: ann(i % 7, [1, 4][i % 2], i % 4, texts[i % 2]),
            rejected: ann((i + 1) % 7, [2, 5][i % 2], (i + 1) % 4, texts[2 + i % 2]),
            source_conversation: format!("c{i}"),
            turn: 1,
        })
        .collect();

    // Reference: the same policy nudged toward every pair annotation, so all
    // policy-vs-reference log-ratios are strictly negative.
    let mut reference = policy.clone();
    let data: Vec<(Context, TutorAnnotation)> = pairs
        .iter()
        .flat_map(|p| {
            [(p.context.clone(), p.chosen.clone()), (p.context.clone(), p.rejected.clone())]
        })
        .collect();
    let cfg = TrainConfig {
        learning_rate: 0.1,
        batch_size: data.len(),
        epochs: 2,
        weight_decay: 0.0,
        warmup_ratio: 0.0,
        ..TrainConfig::sft_defaults()
    };
    sft_train(&mut reference, &data, &cfg).expect("reference nudge succeeds");
    (policy, reference, pairs)
}

fn batch_loss(
    policy: &ToyTutorPolicy,
    reference: &ToyTutorPolicy,
    pairs: &[PreferencePair],
    algo: Algo,
    beta: Beta,
) -> f64 {
    let lps: Vec<(f64, f64, f64, f64)> = pairs
        .iter()
        .map(|p| {
            (
                policy.annotation_logprob(&p.context, &p.chosen),
                reference.annotation_logprob(&p.context, &p.chosen),
                policy.annotation_logprob(&p.context, &p.rejected),
                reference.annotation_logprob(&p.context, &p.rejected),
            )
        })
        .collect();
    match algo {
        Algo::Dpo | Algo::Ipo => {
            let quads: Vec<QuadLogProbs> = lps
                .iter()
                .map(|&(pc, rc, pr, rr)| QuadLogProbs::new(pc, rc, pr, rr).unwrap())
                .collect();
            batch_objective(BatchInput::Paired(&quads), algo, beta).unwrap().mean_loss
        }
        Algo::Kto => {
            let singles: Vec<KtoExample> = lps
                .iter()
                .flat_map(|&(pc, rc, pr, rr)| {
                    [
                        KtoExample { lp_policy: pc, lp_ref: rc, label: KtoLabel::Desirable },
                        KtoExample { lp_policy: pr, lp_ref: rr, label: KtoLabel::Undesirable },
                    ]
                })
                .collect();
            batch_objective(BatchInput::Singletons(&singles), algo, beta).unwrap().mean_loss
        }
    }
}

#[test]
fn criterion_4_pipeline_integrity() {
    criterion(4, "pipeline integrity", || {
        let corpus = load_fixture("corpus.jsonl");
        let degraded = load_fixture("corpus_sft.jsonl");
        let pairs = build_preference_pairs(&corpus, &degraded).map_err(|e| e.to_string())?;

        // Brute-force divergent-turn count: independent double loop.
        let mut brute = 0usize;
        for a in &corpus {
            for b in &degraded {
                if a.id != b.id {
                    continue;
                }
                for (x, y) in a.turns.iter().zip(&b.turns) {
                    if pedagogical_signature(&x.tutor) != pedagogical_signature(&y.tutor) {
                        brute += 1;
                    }
                }
            }
        }
        ensure!(
            pairs.len() == brute,
            "pair count {} differs from brute-force divergent count {brute}",
            pairs.len()
        );
        ensure!(brute > 0, "fixture streams never diverge");
        for p in &pairs {
            ensure!(
                pedagogical_signature(&p.chosen) != pedagogical_signature(&p.rejected),
                "pair at {} turn {} has equal signatures",
                p.source_conversation,
                p.turn
            );
        }

        // Probe rules over the whole fixture.
        let bank_file = std::fs::File::open(fixtures_dir().join("solutions.json"))
            .map_err(|e| e.to_string())?;
        let bank = pedalign_core::prefgen::read_solution_bank(std::io::BufReader::new(bank_file))
            .map_err(|e| e.to_string())?;
        let mut total_probes = 0usize;
        for conv in &corpus {
            let probes = build_misaligned_probes(conv, &bank).map_err(|e| e.to_string())?;
            ensure!(probes.len() <= 2, "{} probes in one conversation", probes.len());
            total_probes += probes.len();
            for p in &probes {
                ensure!(
                    p.misaligned.action.get() == p.aligned.action.get() + 1,
                    "misaligned action {} is not aligned {} + 1",
                    p.misaligned.action.get(),
                    p.aligned.action.get()
                );
                let first = conv
                    .turns
                    .iter()
                    .find(|t| t.tutor.action == p.aligned.action)
                    .expect("aligned action exists");
                ensure!(
                    first.index == p.turn,
                    "probe at turn {} is not the first occurrence {}",
                    p.turn,
                    first.index
                );
            }
        }
        ensure!(total_probes > 0, "fixture yields no probes");

        // Split semantics on a synthetic 1738-conversation corpus.
        let synthetic: Vec<Conversation> = (0..1738)
            .map(|i| Conversation {
                id: format!("conv{i:05}"),
                question: "q".into(),
                turns: vec![ConversationTurn {
                    index: 1,
                    student_utterance: "s".into(),
                    tutor: TutorAnnotation {
                        eval: EvalCode::A,
                        action: ActionCode::new(1).unwrap(),
                        substate: SubproblemState::X,
                        subproblem: "p".into(),
                        utterance: "u".into(),
                    },
                }],
            })
            .collect();
        let spec = SplitSpec { seed: 42, n_sft: 600, n_lhp: 600, n_test: 450 };
        let (a, b, c) = split_dataset(&synthetic, &spec).map_err(|e| e.to_string())?;
        ensure!(
            (a.len(), b.len(), c.len()) == (600, 600, 450),
            "split sizes ({}, {}, {})",
            a.len(),
            b.len(),
            c.len()
        );
        let mut ids: Vec<&str> =
            a.iter().chain(&b).chain(&c).map(|x| x.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ensure!(ids.len() == 1650, "partitions overlap: {} unique ids", ids.len());
        ensure!(1738 - ids.len() == 88, "discard count is {}", 1738 - ids.len());
        Ok(())
    });
}

fn ppl_table(policy: &ToyTutorPolicy, probes: &[pedalign_core::prefgen::PerplexityProbe]) -> PplTable {
    ppl_gap_report(probes, |ann| policy.utterance_token_logprobs(ann)).expect("probes nonempty")
}

#[test]
fn criterion_5_perplexity_gap_direction() {
    criterion(5, "perplexity gap direction", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = fixture_config(dir.path());
        let (_d_c, d_p, d_t, sft_policy) = fixture_sft(&cfg);

        let eval_probes = build_probes_for(&cfg, &d_t)?;
        ensure!(!eval_probes.is_empty(), "test split yields no probes");

        // A fresh uniform policy has no action preference: every bucket sits
        // at vocabulary-size perplexity and both gaps are (near) zero.
        let base = ToyTutorPolicy::new(sft_policy.vocab.clone(), sft_policy.n_buckets);
        let base_table = ppl_table(&base, &eval_probes);
        let base_gap_12 = base_table.gap_1_2().ok_or("base gap buckets absent")?;
        let base_gap_45 = base_table.gap_4_5().ok_or("base gap buckets absent")?;
        ensure!(
            base_gap_12.abs() < 1e-9 && base_gap_45.abs() < 1e-9,
            "uniform policy has nonzero gaps {base_gap_12}, {base_gap_45}"
        );

        let sft_table = ppl_table(&sft_policy, &eval_probes);
        let (a1, a2, a4, a5) = (
            sft_table.a1.ok_or("A1 bucket absent")?.mean_ppl,
            sft_table.a2.ok_or("A2 bucket absent")?.mean_ppl,
            sft_table.a4.ok_or("A4 bucket absent")?.mean_ppl,
            sft_table.a5.ok_or("A5 bucket absent")?.mean_ppl,
        );
        ensure!(a1 < a2, "after SFT ppl(A1) {a1} is not below ppl(A2) {a2}");
        ensure!(a4 < a5, "after SFT ppl(A4) {a4} is not below ppl(A5) {a5}");
        let sft_gap_12 = a2 - a1;
        let sft_gap_45 = a5 - a4;

        let train_probes = build_probes_for(&cfg, &d_p)?;
        let pairs = pairs_from_probes(&train_probes);
        ensure!(!pairs.is_empty(), "no probe-derived training pairs");

        for algo in [Algo::Dpo, Algo::Kto] {
            let mut lhp_cfg = cfg.lhp.train_config()?;
            lhp_cfg.algo = algo;
            lhp_cfg.beta = Beta::new(0.1).map_err(|e| e.to_string())?;
            let mut policy = sft_policy.clone();
            lhp_train(&mut policy, &sft_policy, &pairs, &lhp_cfg).map_err(|e| e.to_string())?;
            let table = ppl_table(&policy, &eval_probes);
            let gap_12 = table.gap_1_2().ok_or("gap buckets absent")?;
            let gap_45 = table.gap_4_5().ok_or("gap buckets absent")?;
            ensure!(
                gap_12 > sft_gap_12,
                "{algo}: A1/A2 gap {gap_12} did not widen past SFT {sft_gap_12}"
            );
            ensure!(
                gap_45 > sft_gap_45,
                "{algo}: A4/A5 gap {gap_45} did not widen past SFT {sft_gap_45}"
            );
        }
        Ok(())
    });
}

#[test]
fn criterion_6_accuracy_ordering() {
    criterion(6, "accuracy ordering", || {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = fixture_config(dir.path());
        let (_d_c, d_p, d_t, sft_policy) = fixture_sft(&cfg);

        let rejected = perturb_stream(&d_p, cfg.lhp.flip_prob, cfg.lhp.noise_seed);
        let pairs = build_preference_pairs(&d_p, &rejected).map_err(|e| e.to_string())?;
        ensure!(!pairs.is_empty(), "no training pairs");

        let sft_acc = mean_accuracy_of(&sft_policy, &d_t);
        let mut by_algo = BTreeMap::new();
        for algo in [Algo::Dpo, Algo::Ipo, Algo::Kto] {
            let mut lhp_cfg = cfg.lhp.train_config()?;
            lhp_cfg.algo = algo;
            let mut policy = sft_policy.clone();
            lhp_train(&mut policy, &sft_policy, &pairs, &lhp_cfg).map_err(|e| e.to_string())?;
            let acc = mean_accuracy_of(&policy, &d_t);
            ensure!(
                acc >= sft_acc,
                "{algo} accuracy {acc:.4} fell below the SFT-only {sft_acc:.4}"
            );
            by_algo.insert(algo.as_str(), acc);
        }
        let (dpo, ipo, kto) = (by_algo["dpo"], by_algo["ipo"], by_algo["kto"]);
        ensure!(dpo >= ipo, "DPO {dpo:.4} below IPO {ipo:.4}");
        ensure!(kto >= ipo, "KTO {kto:.4} below IPO {ipo:.4}");
        eprintln!(
            "accuracy: sft {sft_acc:.4}, dpo {dpo:.4}, ipo {ipo:.4}, kto {kto:.4}"
        );
        Ok(())
    });
}

#[test]
fn criterion_7_metric_oracle_equivalence() {
    criterion(7, "metric oracle equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(161803);
        for case in 0..1000 {
            let n = rng.gen_range(1..=25);
            let preds: Vec<FieldPrediction> = (0..n)
                .map(|_| {
                    let pe = EvalCode::from_index(rng.gen_range(0..7)).unwrap();
                    let pa = ActionCode::from_index(rng.gen_range(0..12)).unwrap();
                    let ps = SubproblemState::from_index(rng.gen_range(0..4)).unwrap();
                    FieldPrediction {
                        conversation_id: "c".into(),
                        round: rng.gen_range(1..=12),
                        pred_eval: maybe(&mut rng, pe),
                        pred_action: maybe(&mut rng, pa),
                        pred_substate: maybe(&mut rng, ps),
                        gold_eval: EvalCode::from_index(rng.gen_range(0..7)).unwrap(),
                        gold_action: ActionCode::from_index(rng.gen_range(0..12)).unwrap(),
                        gold_substate: SubproblemState::from_index(rng.gen_range(0..4)).unwrap(),
                    }
                })
                .collect();

            let acc = field_accuracy(&preds).map_err(|e| e.to_string())?;
            let expected = brute_accuracy(&preds, |p| (p.pred_eval.map(|c| c.index()), p.gold_eval.index()));
            ensure!((acc.eval - expected).abs() <= 1e-12, "case {case}: accuracy mismatch");
            let expected = brute_accuracy(&preds, |p| (p.pred_action.map(|c| c.index()), p.gold_action.index()));
            ensure!((acc.action - expected).abs() <= 1e-12, "case {case}: action accuracy mismatch");

            let f1 = macro_f1(&preds).map_err(|e| e.to_string())?;
            for (got, extract, width) in [
                (f1.eval, extractor_eval as fn(&FieldPrediction) -> (Option<usize>, usize), 7usize),
                (f1.action, extractor_action, 12),
                (f1.substate, extractor_substate, 4),
            ] {
                let expected = brute_macro_f1(&preds, extract, width);
                ensure!((got - expected).abs() <= 1e-12, "case {case}: macro-F1 mismatch");
            }

            let curve = multi_round_curve(&preds, 8).map_err(|e| e.to_string())?;
            let expected = brute_curve(&preds, 8);
            ensure!(curve.len() == expected.len(), "case {case}: curve length mismatch");
            for (got, want) in curve.iter().zip(&expected) {
                ensure!(
                    got.round == want.0 && got.n == want.2
                        && (got.accuracy - want.1).abs() <= 1e-12,
                    "case {case}: curve point mismatch"
                );
            }

            let k = rng.gen_range(1..=10);
            let lps: Vec<f64> = (0..k).map(|_| -rng.gen_range(0.0..6.0)).collect();
            let got = perplexity(&lps).map_err(|e| e.to_string())?;
            // Independent route: geometric mean of the per-token probabilities.
            let product: f64 = lps.iter().map(|lp| lp.exp()).product();
            let expected = 1.0 / product.powf(1.0 / k as f64);
            ensure!(
                (got - expected).abs() <= 1e-12 * expected.abs().max(1.0),
                "case {case}: perplexity {got} vs {expected}"
            );
        }
        Ok(())
    });
}

fn maybe<T>(rng: &mut ChaCha8Rng, value: T) -> Option<T> {
    // One in ten predictions is unparseable.
    if rng.gen_range(0..10) == 0 {
        None
    } else {
        Some(value)
    }
}

fn extractor_eval(p: &FieldPrediction) -> (Option<usize>, usize) {
    (p.pred_eval.map(|c| c.index()), p.gold_eval.index())
}

fn extractor_action(p: &FieldPrediction) -> (Option<usize>, usize) {
    (p.pred_action.map(|c| c.index()), p.gold_action.index())
}

fn extractor_substate(p: &FieldPrediction) -> (Option<usize>, usize) {
    (p.pred_substate.map(|c| c.index()), p.gold_substate.index())
}

fn brute_accuracy(
    preds: &[FieldPrediction],
    extract: impl Fn(&FieldPrediction) -> (Option<usize>, usize),
) -> f64 {
    let hits = preds.iter().filter(|p| {
        let (pred, gold) = extract(p);
        pred == Some(gold)
    });
    hits.count() as f64 / preds.len() as f64
}

/// Full confusion-matrix macro F1 with an extra column for unparseable
/// predictions; classes restricted to those present in gold.
fn brute_macro_f1(
    preds: &[FieldPrediction],
    extract: impl Fn(&FieldPrediction) -> (Option<usize>, usize),
    n_classes: usize,
) -> f64 {
    let mut matrix = vec![vec![0usize; n_classes + 1]; n_classes];
    for p in preds {
        let (pred, gold) = extract(p);
        matrix[gold][pred.unwrap_or(n_classes)] += 1;
    }
    let mut gold_classes: Vec<usize> = preds.iter().map(|p| extract(p).1).collect();
    gold_classes.sort_unstable();
    gold_classes.dedup();
    let mut total = 0.0;
    for &c in &gold_classes {
        let tp = matrix[c][c];
        let fp: usize = (0..n_classes).filter(|&g| g != c).map(|g| matrix[g][c]).sum();
        let fneg: usize = (0..=n_classes).filter(|&p| p != c).map(|p| matrix[c][p]).sum();
        let denom = 2 * tp + fp + fneg;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    total / gold_classes.len() as f64
}

fn brute_curve(preds: &[FieldPrediction], cap: usize) -> Vec<(usize, f64, usize)> {
    let mut rounds: Vec<usize> = preds.iter().map(|p| p.round.min(cap)).collect();
    rounds.sort_unstable();
    rounds.dedup();
    rounds
        .into_iter()
        .map(|round| {
            let members: Vec<&FieldPrediction> =
                preds.iter().filter(|p| p.round.min(cap) == round).collect();
            let sum: f64 = members
                .iter()
                .map(|p| {
                    let mut hits = 0usize;
                    if p.pred_eval == Some(p.gold_eval) {
                        hits += 1;
                    }
                    if p.pred_action == Some(p.gold_action) {
                        hits += 1;
                    }
                    if p.pred_substate == Some(p.gold_substate) {
                        hits += 1;
                    }
                    hits as f64 / 3.0
                })
                .sum();
            (round, sum / members.len() as f64, members.len())
        })
        .collect()
}

#[test]
fn criterion_8_determinism() {
    criterion(8, "determinism", || {
        let dir_a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dir_b = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut runs = Vec::new();
        for dir in [dir_a.path(), dir_b.path()] {
            let mut cfg = fixture_config(dir);
            cfg.lhp.pair_source = PairSource::Noisy;
            let outcome = run_pipeline(&cfg, ParseMode::Strict, false).map_err(|e| e.to_string())?;
            ensure!(
                outcome.artifacts.len() == 7,
                "pipeline wrote {} artifacts, expected 7",
                outcome.artifacts.len()
            );
            runs.push(outcome);
        }
        for (a, b) in runs[0].artifacts.iter().zip(&runs[1].artifacts) {
            ensure!(
                a.file_name() == b.file_name(),
                "artifact order differs: {} vs {}",
                a.display(),
                b.display()
            );
            let bytes_a = std::fs::read(a).map_err(|e| e.to_string())?;
            let bytes_b = std::fs::read(b).map_err(|e| e.to_string())?;
            ensure!(
                bytes_a == bytes_b,
                "artifact {} differs between identical runs",
                a.file_name().unwrap().to_string_lossy()
            );
        }
        Ok(())
    });
}
