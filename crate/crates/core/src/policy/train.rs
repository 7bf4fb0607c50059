//! SFT and preference training loops over the toy policy.
//!
//! Both loops are single-threaded and fully determined by (seed, config,
//! data). Gradients are analytic throughout: a log-softmax row contributes
//! `scale * (indicator - probabilities)` to its weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::losses::{batch_objective, Algo, BatchInput, KtoExample, KtoLabel, QuadLogProbs};
use crate::math::log_sum_exp;
use crate::prefgen::{Context, PreferencePair};
use crate::schema::TutorAnnotation;

use super::optim::{optimizer_step, OptimizerState, TrainConfig};
use super::{
    featurize_context, ActionGroup, ParamSet, PolicyError, ToyTutorPolicy, N_ACTION, N_EVAL,
    N_SUBSTATE,
};

/// Adds `scale * d(log p(ann | ctx))/d(theta)` into `out`.
pub fn accumulate_logprob_grad(
    policy: &ToyTutorPolicy,
    ctx: &Context,
    ann: &TutorAnnotation,
    scale: f64,
    out: &mut ParamSet,
) {
    let bucket = featurize_context(ctx, policy.n_buckets);
    softmax_row_grad(
        &policy.weights.eval,
        &mut out.eval,
        bucket * N_EVAL,
        N_EVAL,
        ann.eval.index(),
        scale,
    );
    softmax_row_grad(
        &policy.weights.action,
        &mut out.action,
        bucket * N_ACTION,
        N_ACTION,
        ann.action.index(),
        scale,
    );
    softmax_row_grad(
        &policy.weights.substate,
        &mut out.substate,
        bucket * N_SUBSTATE,
        N_SUBSTATE,
        ann.substate.index(),
        scale,
    );

    let v = policy.vocab.len();
    let group = ActionGroup::of(ann.action).index();
    let chain = policy.token_chain(&ann.utterance);
    for w in chain.windows(2) {
        let start = (group * v + w[0]) * v;
        softmax_row_grad(&policy.weights.token, &mut out.token, start, v, w[1], scale);
    }
}

/// `out[row + k] += scale * (delta_{k,target} - softmax(weights[row])_k)`.
fn softmax_row_grad(
    weights: &[f64],
    out: &mut [f64],
    start: usize,
    width: usize,
    target: usize,
    scale: f64,
) {
    let row = &weights[start..start + width];
    let lse = log_sum_exp(row);
    for k in 0..width {
        let p = (row[k] - lse).exp();
        out[start + k] -= scale * p;
    }
    out[start + target] += scale;
}

/// Supervised fine-tuning: minimizes the mean negative log-likelihood of the
/// gold annotations. Returns the per-epoch mean loss.
pub fn sft_train(
    policy: &mut ToyTutorPolicy,
    data: &[(Context, TutorAnnotation)],
    cfg: &TrainConfig,
) -> Result<Vec<f64>, PolicyError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(&policy.weights);
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as f64;

    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in indices.chunks(cfg.batch_size) {
            let mut grads = ParamSet::zeros_like(&policy.weights);
            let scale = -1.0 / batch.len() as f64;
            for &i in batch {
                let (ctx, ann) = &data[i];
                epoch_loss -= policy.annotation_logprob(ctx, ann);
                accumulate_logprob_grad(policy, ctx, ann, scale, &mut grads);
            }
            optimizer_step(
                &mut policy.weights,
                &grads,
                &mut state,
                cfg,
                step as f64 / total_steps,
            )?;
            step += 1;
        }
        curve.push(epoch_loss / data.len() as f64);
    }
    Ok(curve)
}

/// Analytic parameter gradients of one batch objective, for a frozen
/// reference. Exposed for gradient-check harnesses; the training loop uses
/// precomputed reference log-probs instead.
pub fn lhp_param_grads(
    policy: &ToyTutorPolicy,
    reference: &ToyTutorPolicy,
    pairs: &[PreferencePair],
    algo: Algo,
    beta: crate::losses::Beta,
) -> Result<ParamSet, PolicyError> {
    let ref_lps: Vec<(f64, f64)> = pairs
        .iter()
        .map(|p| {
            (
                reference.annotation_logprob(&p.context, &p.chosen),
                reference.annotation_logprob(&p.context, &p.rejected),
            )
        })
        .collect();
    let mut grads = ParamSet::zeros_like(&policy.weights);
    lhp_batch_step(policy, pairs, &ref_lps, algo, beta, &mut grads)
        .map_err(|e| PolicyError::InvalidConfig(e.to_string()))?;
    Ok(grads)
}

/// Computes the batch objective and accumulates parameter gradients.
/// Returns (mean loss, mean margin) for the batch.
fn lhp_batch_step(
    policy: &ToyTutorPolicy,
    pairs: &[PreferencePair],
    ref_lps: &[(f64, f64)],
    algo: Algo,
    beta: crate::losses::Beta,
    grads: &mut ParamSet,
) -> Result<(f64, f64), crate::losses::LossError> {
    let policy_lps: Vec<(f64, f64)> = pairs
        .iter()
        .map(|p| {
            (
                policy.annotation_logprob(&p.context, &p.chosen),
                policy.annotation_logprob(&p.context, &p.rejected),
            )
        })
        .collect();

    match algo {
        Algo::Dpo | Algo::Ipo => {
            let quads: Vec<QuadLogProbs> = policy_lps
                .iter()
                .zip(ref_lps)
                .map(|(&(pc, pr), &(rc, rr))| QuadLogProbs {
                    lp_policy_chosen: pc,
                    lp_ref_chosen: rc,
                    lp_policy_rejected: pr,
                    lp_ref_rejected: rr,
                })
                .collect();
            let batch = batch_objective(BatchInput::Paired(&quads), algo, beta)?;
            for (pair, g) in pairs.iter().zip(&batch.grads) {
                accumulate_logprob_grad(policy, &pair.context, &pair.chosen, g[0], grads);
                accumulate_logprob_grad(policy, &pair.context, &pair.rejected, g[1], grads);
            }
            Ok((batch.mean_loss, batch.margin_mean))
        }
        Algo::Kto => {
            // Each pair decomposes into a desirable and an undesirable
            // singleton, in pair order.
            let singles: Vec<KtoExample> = policy_lps
                .iter()
                .zip(ref_lps)
                .flat_map(|(&(pc, pr), &(rc, rr))| {
                    [
                        KtoExample { lp_policy: pc, lp_ref: rc, label: KtoLabel::Desirable },
                        KtoExample { lp_policy: pr, lp_ref: rr, label: KtoLabel::Undesirable },
                    ]
                })
                .collect();
            let batch = batch_objective(BatchInput::Singletons(&singles), algo, beta)?;
            for (i, pair) in pairs.iter().enumerate() {
                let gc = batch.grads[2 * i][0];
                let gr = batch.grads[2 * i + 1][0];
                accumulate_logprob_grad(policy, &pair.context, &pair.chosen, gc, grads);
                accumulate_logprob_grad(policy, &pair.context, &pair.rejected, gr, grads);
            }
            Ok((batch.mean_loss, batch.margin_mean))
        }
    }
}

/// Preference training against a frozen reference. Reference log-probs are
/// computed once up front. Returns the per-epoch mean margin (`W - L` for
/// DPO, `h` for IPO, the singleton log-ratio `r` for KTO).
pub fn lhp_train(
    policy: &mut ToyTutorPolicy,
    reference: &ToyTutorPolicy,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<Vec<f64>, PolicyError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let ref_lps: Vec<(f64, f64)> = pairs
        .iter()
        .map(|p| {
            (
                reference.annotation_logprob(&p.context, &p.chosen),
                reference.annotation_logprob(&p.context, &p.rejected),
            )
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(&policy.weights);
    let batches_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as f64;

    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut margin_sum = 0.0;
        for batch_idx in indices.chunks(cfg.batch_size) {
            let batch: Vec<PreferencePair> =
                batch_idx.iter().map(|&i| pairs[i].clone()).collect();
            let batch_refs: Vec<(f64, f64)> =
                batch_idx.iter().map(|&i| ref_lps[i]).collect();
            let mut grads = ParamSet::zeros_like(&policy.weights);
            let (_, margin) =
                lhp_batch_step(policy, &batch, &batch_refs, cfg.algo, cfg.beta, &mut grads)
                    .map_err(|e| PolicyError::InvalidConfig(e.to_string()))?;
            margin_sum += margin * batch.len() as f64;
            optimizer_step(
                &mut policy.weights,
                &grads,
                &mut state,
                cfg,
                step as f64 / total_steps,
            )?;
            step += 1;
        }
        curve.push(margin_sum / pairs.len() as f64);
    }
    Ok(curve)
}

/// Mean margin of a pair set under (policy, reference) without training.
pub fn mean_margin(
    policy: &ToyTutorPolicy,
    reference: &ToyTutorPolicy,
    pairs: &[PreferencePair],
    algo: Algo,
    beta: crate::losses::Beta,
) -> f64 {
    let scale = match algo {
        Algo::Dpo => beta.value(),
        Algo::Ipo | Algo::Kto => 1.0,
    };
    let total: f64 = pairs
        .iter()
        .map(|p| {
            let pc = policy.annotation_logprob(&p.context, &p.chosen);
            let pr = policy.annotation_logprob(&p.context, &p.rejected);
            let rc = reference.annotation_logprob(&p.context, &p.chosen);
            let rr = reference.annotation_logprob(&p.context, &p.rejected);
            scale * ((pc - rc) - (pr - rr))
        })
        .sum();
    total / pairs.len() as f64
}
