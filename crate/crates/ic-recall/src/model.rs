//! One-layer transformer forward pass, the two-step decoding, and the
//! closed-form logit fast paths that double as oracles for the full
//! forward computation.

use crate::error::{IcError, Result};
use crate::linalg::{axpy, softmax, Mat};
use crate::memory::{argmax_token, MlpParams};
use crate::vocab::{EmbeddingBasis, EmbeddingMode, IcSequence, KnowledgeWorld};
use serde::{Deserialize, Serialize};

/// Trainable attention parameters.
///
/// Partial mode trains only the two attention-logit vectors that matter
/// for the two decoding steps: `theta` (scores from the EoS position,
/// length 2k+2) and `omega` (scores from the decoded-relation position,
/// length 2k+3). All other key-query entries are identically zero.
/// Full mode holds the whole (d_P+d) x (d_P+d) matrix acting on stacked
/// [position; token] embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AttnParams {
    Partial { k: usize, theta: Vec<f64>, omega: Vec<f64> },
    Full { wkq: Mat },
}

impl AttnParams {
    pub fn zero_partial(k: usize) -> Self {
        AttnParams::Partial { k, theta: vec![0.0; 2 * k + 2], omega: vec![0.0; 2 * k + 3] }
    }

    pub fn zero_full(d: usize, d_p: usize) -> Self {
        AttnParams::Full { wkq: Mat::zeros(d_p + d, d_p + d) }
    }

    /// softmax(theta), softmax(omega) for partial mode.
    pub fn scores(&self) -> Option<AttentionScores> {
        match self {
            AttnParams::Partial { theta, omega, .. } => Some(AttentionScores {
                v: softmax(theta),
                q: softmax(omega),
            }),
            AttnParams::Full { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionScores {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLogits {
    pub step: u8,
    pub values: Vec<f64>,
    pub temperature: f64,
}

/// Stacked embedding of position `pos`: [one-hot position; phi(token)].
fn stacked(basis: &EmbeddingBasis, token: usize, pos: usize) -> Vec<f64> {
    let mut z = vec![0.0; basis.d_p + basis.d];
    z[pos] = 1.0;
    z[basis.d_p..].copy_from_slice(basis.phi(token));
    z
}

/// Attention logits from the last position for the given input length.
fn attention_logits(basis: &EmbeddingBasis, attn: &AttnParams, tokens: &[usize]) -> Vec<f64> {
    let len = tokens.len();
    match attn {
        AttnParams::Partial { theta, omega, .. } => {
            // only the columns at the EoS and decoded-relation positions of
            // the position block are nonzero
            if len == theta.len() {
                theta.clone()
            } else if len == omega.len() {
                omega.clone()
            } else {
                vec![0.0; len]
            }
        }
        AttnParams::Full { wkq } => {
            let z_last = stacked(basis, tokens[len - 1], len - 1);
            let key = wkq.matvec(&z_last);
            (0..len)
                .map(|i| {
                    // z_i^T key without materializing z_i
                    key[i] + crate::linalg::dot(basis.phi(tokens[i]), &key[basis.d_p..])
                })
                .collect()
        }
    }
}

/// Pre-readout output f(Z; W): attention from the last token, residual,
/// projection to token-embedding coordinates, MLP.
pub fn forward(
    basis: &EmbeddingBasis,
    mlp: &MlpParams,
    attn: &AttnParams,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    if tokens.len() > basis.d_p {
        return Err(IcError::LengthExceeded { len: tokens.len(), max: basis.d_p });
    }
    let weights = softmax(&attention_logits(basis, attn, tokens));
    if basis.mode == EmbeddingMode::OneHot {
        // h is a sparse combination of canonical basis vectors
        let mut terms: Vec<(usize, f64)> = Vec::with_capacity(tokens.len() + 1);
        let push = |terms: &mut Vec<(usize, f64)>, tok: usize, c: f64| {
            if let Some(t) = terms.iter_mut().find(|t| t.0 == tok) {
                t.1 += c;
            } else {
                terms.push((tok, c));
            }
        };
        for (i, &tok) in tokens.iter().enumerate() {
            push(&mut terms, tok, weights[i]);
        }
        push(&mut terms, tokens[tokens.len() - 1], 1.0);
        Ok(mlp.forward_sparse(&terms))
    } else {
        let mut h = vec![0.0; basis.d];
        for (i, &tok) in tokens.iter().enumerate() {
            axpy(weights[i], basis.phi(tok), &mut h);
        }
        axpy(1.0, basis.phi(tokens[tokens.len() - 1]), &mut h);
        Ok(mlp.forward(&h))
    }
}

/// Full-vocabulary readout logits for explicit attention weights over
/// the input tokens (residual on the last token included).
pub fn logits_with_weights(
    basis: &EmbeddingBasis,
    mlp: &MlpParams,
    tokens: &[usize],
    weights: &[f64],
) -> Vec<f64> {
    let f = if basis.mode == EmbeddingMode::OneHot {
        let mut terms: Vec<(usize, f64)> = Vec::with_capacity(tokens.len() + 1);
        let push = |tok: usize, c: f64, terms: &mut Vec<(usize, f64)>| {
            if let Some(t) = terms.iter_mut().find(|t| t.0 == tok) {
                t.1 += c;
            } else {
                terms.push((tok, c));
            }
        };
        for (i, &tok) in tokens.iter().enumerate() {
            push(tok, weights[i], &mut terms);
        }
        push(tokens[tokens.len() - 1], 1.0, &mut terms);
        mlp.forward_sparse(&terms)
    } else {
        let mut h = vec![0.0; basis.d];
        for (i, &tok) in tokens.iter().enumerate() {
            axpy(weights[i], basis.phi(tok), &mut h);
        }
        axpy(1.0, basis.phi(tokens[tokens.len() - 1]), &mut h);
        mlp.forward(&h)
    };
    basis.token_logits(&f)
}

/// Step-1 relation logits via the full forward pass.
pub fn relation_logits_forward(
    basis: &EmbeddingBasis,
    mlp: &MlpParams,
    attn: &AttnParams,
    world: &KnowledgeWorld,
    seq: &IcSequence,
) -> Result<Vec<f64>> {
    let f = forward(basis, mlp, attn, &seq.tokens)?;
    let logits = basis.token_logits(&f);
    Ok(logits[2 * world.n..2 * world.n + world.m].to_vec())
}

/// Step-2 answer logits via the full forward pass, conditioned on the
/// decoded relation appended to the sequence.
pub fn answer_logits_forward(
    basis: &EmbeddingBasis,
    mlp: &MlpParams,
    attn: &AttnParams,
    world: &KnowledgeWorld,
    seq: &IcSequence,
    relation: usize,
) -> Result<Vec<f64>> {
    let mut tokens = seq.tokens.clone();
    tokens.push(world.relation_token(relation));
    let f = forward(basis, mlp, attn, &tokens)?;
    let logits = basis.token_logits(&f);
    Ok(logits[world.n..2 * world.n].to_vec())
}

/// Closed-form step-1 relation logits under the constructed memory:
/// l(r) = sum_i v_{2i-1}^2 + sum_j v_{2j}^2
///        + 2 sum_{i,j} v_{2i-1} v_{2j} 1{r(s_i) = a_j},
/// with i over the k+1 subjects and j over the k in-context answers.
/// The EoS weight never enters.
pub fn step1_logits_closed_form(world: &KnowledgeWorld, seq: &IcSequence, v: &[f64]) -> Vec<f64> {
    let k = seq.k;
    let mut base = 0.0;
    for i in 0..=k {
        base += v[2 * i] * v[2 * i];
    }
    for j in 0..k {
        base += v[2 * j + 1] * v[2 * j + 1];
    }
    let subjects: Vec<usize> = (0..=k).map(|i| seq.subject(i)).collect();
    let answers: Vec<usize> = (0..k).map(|j| seq.answer_index(world, j)).collect();
    world
        .relation_table
        .iter()
        .map(|row| {
            let mut cross = 0.0;
            for (i, &s) in subjects.iter().enumerate() {
                for (j, &a) in answers.iter().enumerate() {
                    if row[s] == a {
                        cross += v[2 * i] * v[2 * j + 1];
                    }
                }
            }
            base + 2.0 * cross
        })
        .collect()
}

/// Closed-form step-1 answer logits: only subjects s_i with nonempty
/// R(s_i, a) contribute, each with weight v_{2i-1}^2.
pub fn step1_answer_logits_closed_form(
    world: &KnowledgeWorld,
    seq: &IcSequence,
    v: &[f64],
) -> Vec<f64> {
    let k = seq.k;
    (0..world.n)
        .map(|a| {
            (0..=k)
                .filter(|&i| !world.relations_at(seq.subject(i), a).is_empty())
                .map(|i| v[2 * i] * v[2 * i])
                .sum()
        })
        .collect()
}

/// Closed-form step-2 answer logits, teacher-forced on relation `rel`:
/// l(a) = sum over subjects s with nonempty R(s, a) of
///   (q_{2i-1} 1{s = s_i} + (1 + q_last) 1{rel(s) = a})^2.
pub fn step2_logits_closed_form(
    world: &KnowledgeWorld,
    seq: &IcSequence,
    rel: usize,
    q: &[f64],
) -> Vec<f64> {
    let k = seq.k;
    let q_last = q[2 * k + 2];
    let subjects: Vec<usize> = (0..=k).map(|i| seq.subject(i)).collect();
    (0..world.n)
        .map(|a| {
            let mut l = 0.0;
            for s in 0..world.n {
                if world.relations_at(s, a).is_empty() {
                    continue;
                }
                let mut c = 0.0;
                if let Some(i) = subjects.iter().position(|&si| si == s) {
                    c += q[2 * i];
                }
                if world.apply(rel, s) == a {
                    c += 1.0 + q_last;
                }
                l += c * c;
            }
            l
        })
        .collect()
}

/// Masked temperature softmax over a logit group.
pub fn predict(logits: &StepLogits) -> Result<Vec<f64>> {
    if logits.temperature <= 0.0 {
        return Err(IcError::InvalidTemperature(logits.temperature));
    }
    let scaled: Vec<f64> = logits.values.iter().map(|l| l / logits.temperature).collect();
    Ok(softmax(&scaled))
}

/// Greedy two-step decode. Step 1 picks the argmax relation; step 2 is
/// conditioned on that prediction (or on the true relation when
/// `teacher_forced`).
pub fn decode_two_step(
    basis: &EmbeddingBasis,
    mlp: &MlpParams,
    attn: &AttnParams,
    world: &KnowledgeWorld,
    seq: &IcSequence,
    teacher_forced: bool,
) -> Result<(usize, usize)> {
    let rel_logits = relation_logits_forward(basis, mlp, attn, world, seq)?;
    let (r_pred, _) = argmax_token(&rel_logits);
    let conditioning = if teacher_forced { seq.relation } else { r_pred };
    let ans_logits = answer_logits_forward(basis, mlp, attn, world, seq, conditioning)?;
    let (a_pred, _) = argmax_token(&ans_logits);
    Ok((r_pred, a_pred))
}

/// Closed-form decode for partial mode (identical output, no MLP pass).
pub fn decode_two_step_closed(
    world: &KnowledgeWorld,
    seq: &IcSequence,
    scores: &AttentionScores,
    teacher_forced: bool,
) -> (usize, usize) {
    let rel_logits = step1_logits_closed_form(world, seq, &scores.v);
    let (r_pred, _) = argmax_token(&rel_logits);
    let conditioning = if teacher_forced { seq.relation } else { r_pred };
    let ans_logits = step2_logits_closed_form(world, seq, conditioning, &scores.q);
    let (a_pred, _) = argmax_token(&ans_logits);
    (r_pred, a_pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::construct_memory;
    use crate::vocab::{build_world, sample_ic_sequence, EmbeddingMode};
    use rand::Rng;

    #[test]
    fn uniform_attention_at_zero_logits() {
        let world = build_world(3, 6, 1, 1_000_000).unwrap();
        let basis = EmbeddingBasis::new(&world, 2, EmbeddingMode::OneHot, 1);
        let attn = AttnParams::zero_partial(2);
        let logits = attention_logits(&basis, &attn, &[0, 3, 1, 4, 2, world.eos_token()]);
        let w = softmax(&logits);
        for wi in w {
            assert!((wi - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn table_logit_values_at_uniform_attention() {
        // 2-matching 1/4, 1-matching 7/36, 0-matching 5/36
        let world = build_world(8, 16, 3, 10_000_000).unwrap();
        let mut rng = crate::rng::stream_rng(0, crate::rng::Stream::Dataset);
        let seq = sample_ic_sequence(&world, 2, &mut rng).unwrap();
        let v = vec![1.0 / 6.0; 6];
        let logits = step1_logits_closed_form(&world, &seq, &v);
        for (r, l) in logits.iter().enumerate() {
            let row = &world.relation_table[r];
            let matches = (0..3)
                .map(|i| {
                    (0..2)
                        .filter(|&j| row[seq.subject(i)] == seq.answer_index(&world, j))
                        .count()
                })
                .sum::<usize>();
            let want = match matches {
                2 => 0.25,
                1 => 7.0 / 36.0,
                0 => 5.0 / 36.0,
                _ => unreachable!(),
            };
            assert!((l - want).abs() < 1e-12, "r={r} matches={matches} l={l}");
        }
    }

    #[test]
    fn closed_forms_match_full_forward() {
        let world = build_world(8, 14, 7, 10_000_000).unwrap();
        let basis = EmbeddingBasis::new(&world, 2, EmbeddingMode::OneHot, 7);
        let mlp = construct_memory(&world, &basis);
        let mut rng = crate::rng::stream_rng(7, crate::rng::Stream::Dataset);
        for _ in 0..50 {
            let seq = sample_ic_sequence(&world, 2, &mut rng).unwrap();
            let theta: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let omega: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let attn = AttnParams::Partial { k: 2, theta: theta.clone(), omega: omega.clone() };
            let scores = attn.scores().unwrap();

            let full = relation_logits_forward(&basis, &mlp, &attn, &world, &seq).unwrap();
            let closed = step1_logits_closed_form(&world, &seq, &scores.v);
            for (a, b) in full.iter().zip(&closed) {
                assert!((a - b).abs() < 1e-10, "step1 {a} vs {b}");
            }

            let full2 = answer_logits_forward(&basis, &mlp, &attn, &world, &seq, seq.relation).unwrap();
            let closed2 = step2_logits_closed_form(&world, &seq, seq.relation, &scores.q);
            for (a, b) in full2.iter().zip(&closed2) {
                assert!((a - b).abs() < 1e-10, "step2 {a} vs {b}");
            }
        }
    }

    #[test]
    fn random_orthonormal_matches_one_hot_logits() {
        let world = build_world(5, 10, 2, 10_000_000).unwrap();
        let one_hot = EmbeddingBasis::new(&world, 2, EmbeddingMode::OneHot, 2);
        let rot = EmbeddingBasis::new(&world, 2, EmbeddingMode::RandomOrthonormal, 2);
        let mlp_oh = construct_memory(&world, &one_hot);
        let mlp_rot = construct_memory(&world, &rot);
        let mut rng = crate::rng::stream_rng(2, crate::rng::Stream::Dataset);
        let seq = sample_ic_sequence(&world, 2, &mut rng).unwrap();
        let theta: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let attn = AttnParams::Partial { k: 2, theta, omega: vec![0.0; 7] };
        let a = relation_logits_forward(&one_hot, &mlp_oh, &attn, &world, &seq).unwrap();
        let b = relation_logits_forward(&rot, &mlp_rot, &attn, &world, &seq).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn first_step_answer_logits_tie() {
        // answer-group logits of the first decoding step are exactly equal
        // for the in-context answers, for any theta
        let world = build_world(3, 6, 4, 1_000_000).unwrap();
        let basis = EmbeddingBasis::new(&world, 2, EmbeddingMode::OneHot, 4);
        let mlp = construct_memory(&world, &basis);
        let mut rng = crate::rng::stream_rng(4, crate::rng::Stream::Dataset);
        for _ in 0..20 {
            let seq = sample_ic_sequence(&world, 2, &mut rng).unwrap();
            let theta: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let attn = AttnParams::Partial { k: 2, theta, omega: vec![0.0; 7] };
            let f = forward(&basis, &mlp, &attn, &seq.tokens).unwrap();
            let logits = basis.token_logits(&f);
            let answers: Vec<f64> = (0..world.n).map(|a| logits[world.answer_token(a)]).collect();
            assert_eq!(answers[0], answers[1]);
            assert_eq!(answers[0], answers[2]);
        }
    }
}
