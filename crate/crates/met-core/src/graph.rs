//! Self-supervised similarity graphs over detached last-exit logits, and the
//! intra-class compactness / inter-class separability penalties they weight.
//!
//! Graphs are built per mini-batch from plain logit values, so no gradient
//! can flow from the penalty back into the last classifier. Self-pairs are
//! excluded from both graphs, and the pair counts `N_intra` / `N_inter`
//! count pairs in each pair set rather than pairs with nonzero cosine.

use std::rc::Rc;

use crate::error::{MetError, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::cosine_sim;

/// Batch similarity graphs: same-class and cross-class cosine weights.
#[derive(Debug, Clone)]
pub struct SimilarityGraphs {
    pub n: usize,
    /// `n x n`, nonzero only for same-class ordered pairs with `i != j`.
    pub intra: Rc<Vec<f64>>,
    /// `n x n`, nonzero only for cross-class ordered pairs.
    pub inter: Rc<Vec<f64>>,
    /// Ordered same-class pairs with `i != j`.
    pub n_intra: usize,
    /// Ordered cross-class pairs.
    pub n_inter: usize,
    pub labels: Vec<usize>,
}

/// Build both graphs from the last exit's (detached) logit values.
///
/// A zero-norm logit row makes cosine undefined; its pairs get similarity 0
/// and the pair still counts toward `N_intra` / `N_inter`.
pub fn build_graphs(
    logits: &[f64],
    num_classes: usize,
    labels: &[usize],
) -> Result<SimilarityGraphs> {
    let n = labels.len();
    if n == 0 {
        return Err(MetError::Data("empty batch for graph construction".into()));
    }
    if logits.len() != n * num_classes {
        return Err(MetError::Data(format!(
            "{} logit values for {} samples x {} classes",
            logits.len(),
            n,
            num_classes
        )));
    }
    let row = |i: usize| &logits[i * num_classes..(i + 1) * num_classes];
    let mut intra = vec![0.0; n * n];
    let mut inter = vec![0.0; n * n];
    let mut n_intra = 0;
    let mut n_inter = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let sim = cosine_sim(row(i), row(j)).unwrap_or(0.0);
            if labels[i] == labels[j] {
                intra[i * n + j] = sim;
                n_intra += 1;
            } else {
                inter[i * n + j] = sim;
                n_inter += 1;
            }
        }
    }
    Ok(SimilarityGraphs {
        n,
        intra: Rc::new(intra),
        inter: Rc::new(inter),
        n_intra,
        n_inter,
        labels: labels.to_vec(),
    })
}

/// Intra-class compactness: pairwise Euclidean distances of representations
/// weighted by the same-class graph, summed over ordered pairs.
pub fn compactness(tape: &mut Tape, reps: TensorId, graphs: &SimilarityGraphs) -> Result<TensorId> {
    check_rows(tape, reps, graphs)?;
    tape.weighted_pairdist_sum(reps, graphs.intra.clone())
}

/// Inter-class separability: as `compactness` but over the cross-class graph.
pub fn separability(
    tape: &mut Tape,
    reps: TensorId,
    graphs: &SimilarityGraphs,
) -> Result<TensorId> {
    check_rows(tape, reps, graphs)?;
    tape.weighted_pairdist_sum(reps, graphs.inter.clone())
}

fn check_rows(tape: &Tape, reps: TensorId, graphs: &SimilarityGraphs) -> Result<()> {
    let (rows, _) = tape.shape(reps);
    if rows != graphs.n {
        return Err(MetError::ShapeMismatch {
            op: "graph penalty",
            lhs: vec![rows, 0],
            rhs: vec![graphs.n, graphs.n],
        });
    }
    Ok(())
}

/// Normalized graph term of one exit:
/// `compactness / N_intra - separability / N_inter`, with empty pair sets
/// contributing zero.
pub fn exit_graph_term(
    tape: &mut Tape,
    reps: TensorId,
    graphs: &SimilarityGraphs,
) -> Result<TensorId> {
    let mut term: Option<TensorId> = None;
    if graphs.n_intra > 0 {
        let comp = compactness(tape, reps, graphs)?;
        term = Some(tape.scale(comp, 1.0 / graphs.n_intra as f64));
    }
    if graphs.n_inter > 0 {
        let sep = separability(tape, reps, graphs)?;
        let scaled = tape.scale(sep, -1.0 / graphs.n_inter as f64);
        term = Some(match term {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(term.unwrap_or_else(|| tape.constant(crate::tensor::Tensor::scalar(0.0))))
}

/// Full regularizer over the early exits:
/// `alpha * sum_{e=1}^{E-1} (compactness_e / N_intra - separability_e / N_inter)`.
///
/// `early_reps` holds the representations of exits `1..E-1`; pass an empty
/// slice for a single-exit model.
pub fn graph_penalty(
    tape: &mut Tape,
    early_reps: &[TensorId],
    graphs: &SimilarityGraphs,
    alpha: f64,
) -> Result<TensorId> {
    if alpha < 0.0 {
        return Err(MetError::Config(format!(
            "alpha must be nonnegative, got {alpha}"
        )));
    }
    if alpha == 0.0 || early_reps.is_empty() {
        return Ok(tape.constant(crate::tensor::Tensor::scalar(0.0)));
    }
    let mut acc: Option<TensorId> = None;
    for &reps in early_reps {
        let term = exit_graph_term(tape, reps, graphs)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    Ok(tape.scale(acc.expect("nonempty reps"), alpha))
}
