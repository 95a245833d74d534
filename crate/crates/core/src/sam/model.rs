use serde::{Deserialize, Serialize};

use super::params::{Layout, SamParams};
use super::tape::{log_sum_exp, sigmoid, softplus, Tape, Var};
use super::{Objective, SamError, SubsetMode};
use crate::sampler::SubsetTarget;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetOutput {
    /// Bit `i` set means input `i` is a member.
    pub mask: u32,
    pub representation: Vec<f64>,
    pub logits: Vec<f64>,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetAbstractionOutput {
    pub n: usize,
    /// Ordered by mask. In pairs-only mode sets of three or more carry
    /// singletons, pairs and the full set only.
    pub subsets: Vec<SubsetOutput>,
    /// `h` applied to the sum of the subset representations.
    pub set_representation: Vec<f64>,
}

impl SetAbstractionOutput {
    pub fn subset(&self, mask: u32) -> Option<&SubsetOutput> {
        self.subsets.binary_search_by_key(&mask, |s| s.mask).ok().map(|i| &self.subsets[i])
    }

    /// Entry for the whole input set.
    pub fn full(&self) -> &SubsetOutput {
        self.subsets.last().expect("at least one subset")
    }
}

struct Entry {
    mask: u32,
    rep: Var,
    logits: Var,
    embedding: Var,
}

struct Built {
    n: usize,
    entries: Vec<Entry>,
    set_rep: Var,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

fn mlp2(tape: &mut Tape, layers: [usize; 2], x: Var, final_relu: bool) -> Result<Var, SamError> {
    let a = tape.affine(layers[0], x)?;
    let a = tape.relu(a)?;
    let b = tape.affine(layers[1], a)?;
    if final_relu {
        tape.relu(b)
    } else {
        Ok(b)
    }
}

fn check_inputs<F: AsRef<[f64]>>(params: &SamParams, features: &[F]) -> Result<(), SamError> {
    let cfg = &params.config;
    if features.is_empty() {
        return Err(SamError::EmptySet);
    }
    if features.len() > cfg.max_set_size {
        return Err(SamError::SetTooLarge { max: cfg.max_set_size, found: features.len() });
    }
    for f in features {
        if f.as_ref().len() != cfg.feature_dim {
            return Err(SamError::DimensionMismatch { expected: cfg.feature_dim, found: f.as_ref().len() });
        }
    }
    Ok(())
}

fn build<F: AsRef<[f64]>>(tape: &mut Tape, params: &SamParams, features: &[F]) -> Result<Built, SamError> {
    check_inputs(params, features)?;
    let layout: Layout = params.layout();
    let n = features.len();
    let mut encoded = Vec::with_capacity(n);
    for f in features {
        let x = tape.input(f.as_ref().to_vec())?;
        encoded.push(mlp2(tape, Layout::ENCODER, x, true)?);
    }

    // The first relation layer is linear in its concatenated input, so each
    // (position, member) block product is computed once and shared by every
    // ordering of every subset.
    let hidden = params.config.hidden;
    let mut blocks: Vec<Vec<Vec<Var>>> = vec![Vec::new()];
    for k in 1..=layout.relations.min(n) {
        let layer = layout.relation(k)[0];
        let mut per_pos = Vec::with_capacity(k);
        for pos in 0..k {
            let row = encoded
                .iter()
                .map(|&r| tape.affine_block(layer, r, pos * hidden, pos == 0))
                .collect::<Result<Vec<_>, _>>()?;
            per_pos.push(row);
        }
        blocks.push(per_pos);
    }

    let perms: Vec<Vec<Vec<usize>>> = (0..=layout.relations).map(permutations).collect();
    let mut reps: Vec<(u32, Var)> = Vec::new();
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let k = members.len();
        if k > layout.relations {
            continue;
        }
        let mut orderings = Vec::with_capacity(perms[k].len());
        for p in &perms[k] {
            let parts: Vec<Var> = p.iter().enumerate().map(|(pos, &j)| blocks[k][pos][members[j]]).collect();
            let pre = if k == 1 { parts[0] } else { tape.sum(&parts)? };
            let a = tape.relu(pre)?;
            let b = tape.affine(layout.relation(k)[1], a)?;
            orderings.push(tape.relu(b)?);
        }
        let rep = if orderings.len() == 1 { orderings[0] } else { tape.mean(&orderings)? };
        reps.push((mask, rep));
    }

    let summed = tape.sum(&reps.iter().map(|r| r.1).collect::<Vec<_>>())?;
    let set_rep = mlp2(tape, layout.head(), summed, false)?;

    let full = (1u32 << n) - 1;
    if params.config.subset_mode == SubsetMode::PairsOnly && n > layout.relations {
        let pairs: Vec<Var> = reps.iter().filter(|r| r.0.count_ones() == 2).map(|r| r.1).collect();
        let rep = tape.mean(&pairs)?;
        reps.push((full, rep));
    }

    let mut entries = Vec::with_capacity(reps.len());
    for (mask, rep) in reps {
        let logits = tape.affine(layout.classifier(), rep)?;
        let embedding = tape.affine(layout.embedder(), rep)?;
        entries.push(Entry { mask, rep, logits, embedding });
    }
    Ok(Built { n, entries, set_rep })
}

fn collect(tape: &Tape, built: &Built) -> SetAbstractionOutput {
    SetAbstractionOutput {
        n: built.n,
        subsets: built
            .entries
            .iter()
            .map(|e| SubsetOutput {
                mask: e.mask,
                representation: tape.value(e.rep).to_vec(),
                logits: tape.value(e.logits).to_vec(),
                embedding: tape.value(e.embedding).to_vec(),
            })
            .collect(),
        set_representation: tape.value(built.set_rep).to_vec(),
    }
}

pub fn forward_set<F: AsRef<[f64]>>(params: &SamParams, features: &[F]) -> Result<SetAbstractionOutput, SamError> {
    let mut tape = Tape::new(params);
    let built = build(&mut tape, params, features)?;
    Ok(collect(&tape, &built))
}

/// Embedding-head output for the whole input set.
pub fn abstraction_representation<F: AsRef<[f64]>>(params: &SamParams, features: &[F]) -> Result<Vec<f64>, SamError> {
    Ok(forward_set(params, features)?.full().embedding.clone())
}

fn find_target(targets: &[SubsetTarget], mask: u32) -> Result<&SubsetTarget, SamError> {
    targets.iter().find(|t| t.mask == mask).ok_or(SamError::MissingTarget(mask))
}

fn class_indices(params: &SamParams, target: &SubsetTarget) -> Result<Vec<usize>, SamError> {
    if target.nodes.is_empty() {
        return Err(SamError::MissingTarget(target.mask));
    }
    target
        .nodes
        .iter()
        .map(|id| params.class_index(id).ok_or_else(|| SamError::UnknownClass(id.to_string())))
        .collect()
}

fn build_loss(tape: &mut Tape, params: &SamParams, built: &Built, targets: &[SubsetTarget]) -> Result<Var, SamError> {
    let mut terms = Vec::with_capacity(built.entries.len());
    for e in &built.entries {
        let target = find_target(targets, e.mask)?;
        let classes = class_indices(params, target)?;
        let term = match params.config.objective {
            Objective::SetAbstraction => {
                let ce = tape.softmax_ce(e.logits, &classes)?;
                let mse = tape.mse(e.embedding, &target.embedding)?;
                tape.sum(&[ce, mse])?
            }
            Objective::Classification => tape.softmax_ce(e.logits, &classes)?,
            Objective::MultiLabel => tape.sigmoid_bce(e.logits, &classes)?,
        };
        terms.push(term);
    }
    tape.mean(&terms)
}

/// Loss of a computed forward pass, evaluated directly from its values.
pub fn loss(params: &SamParams, out: &SetAbstractionOutput, targets: &[SubsetTarget]) -> Result<f64, SamError> {
    let mut total = 0.0;
    for s in &out.subsets {
        let target = find_target(targets, s.mask)?;
        let classes = class_indices(params, target)?;
        let ce = || {
            let lse = log_sum_exp(&s.logits);
            classes.iter().map(|&c| lse - s.logits[c]).sum::<f64>() / classes.len() as f64
        };
        total += match params.config.objective {
            Objective::SetAbstraction => {
                if target.embedding.len() != s.embedding.len() {
                    return Err(SamError::DimensionMismatch {
                        expected: s.embedding.len(),
                        found: target.embedding.len(),
                    });
                }
                let mse = s.embedding.iter().zip(&target.embedding).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                    / s.embedding.len() as f64;
                ce() + mse
            }
            Objective::Classification => ce(),
            Objective::MultiLabel => {
                let mut sum = 0.0;
                for (c, &z) in s.logits.iter().enumerate() {
                    let y = if classes.contains(&c) { 1.0 } else { 0.0 };
                    sum += softplus(z) - y * z;
                }
                sum / s.logits.len() as f64
            }
        };
    }
    Ok(total / out.subsets.len() as f64)
}

/// Runs forward and backward, accumulating parameter gradients into `grads`.
pub fn backward<F: AsRef<[f64]>>(
    params: &SamParams,
    features: &[F],
    targets: &[SubsetTarget],
    grads: &mut SamParams,
) -> Result<(f64, SetAbstractionOutput), SamError> {
    let mut tape = Tape::new(params);
    let built = build(&mut tape, params, features)?;
    let total = build_loss(&mut tape, params, &built, targets)?;
    tape.backward(total, grads);
    Ok((tape.value(total)[0], collect(&tape, &built)))
}

pub fn gradients<F: AsRef<[f64]>>(
    params: &SamParams,
    features: &[F],
    targets: &[SubsetTarget],
) -> Result<(f64, SamParams), SamError> {
    let mut grads = params.zeros_like();
    let (l, _) = backward(params, features, targets, &mut grads)?;
    Ok((l, grads))
}

/// Indices of the `k` largest scores, best first; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-class probabilities under the configured objective.
pub fn class_probabilities(params: &SamParams, logits: &[f64]) -> Vec<f64> {
    match params.config.objective {
        Objective::MultiLabel => logits.iter().map(|&z| sigmoid(z)).collect(),
        _ => super::tape::softmax(logits),
    }
}
