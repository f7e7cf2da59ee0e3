use autograd::{Element, Tape, Tensor};
use itertools::Itertools;
use serde::{Deserialize, Serialize};

use super::calibration::{CalibrationCache, PrmPair};
use crate::error::{Error, Result};
use crate::network::{BranchRef, BranchState, Network, Prm};

/// Discrepancy of one candidate subset of one PRM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyRecord {
    pub prm: usize,
    pub subset: Vec<usize>,
    pub discrepancy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SearchOutcome {
    /// Union over PRMs of the selected subsets, in PRM then branch order.
    pub proposal: Vec<BranchRef>,
    /// Every evaluated candidate, in evaluation order.
    pub records: Vec<DiscrepancyRecord>,
    /// PRMs with too few active branches for the step.
    pub skipped: Vec<usize>,
}

/// `Σ_pairs ‖PRM^(P)(x) − PRM(x)‖_F` for every candidate `P` of size `p`,
/// in lexicographic order of branch-index tuples.
pub fn evaluate_subsets<E: Element>(prm: &Prm<E>, pairs: &[PrmPair<E>], p: usize) -> Result<Vec<(Vec<usize>, f64)>> {
    let active = prm.indices_in(BranchState::Active);
    // weighted branch responses w_i · EB_i(x), per pair, per active branch
    let mut terms: Vec<Vec<Tensor<E>>> = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let mut tape = Tape::inference();
        let xv = tape.leaf(pair.input.clone(), false);
        let mut per_branch = Vec::with_capacity(active.len());
        for &i in &active {
            let b = &prm.branches[i];
            let eb = b.eb_forward(&mut tape, xv)?;
            let w = b.weight().expect("active branch has a weight").on(&mut tape);
            let t = tape.mul_scalar_var(eb, w)?;
            per_branch.push(tape.take_value(t));
        }
        terms.push(per_branch);
    }

    let mut out = Vec::new();
    let mut buf: Vec<E> = Vec::new();
    for subset in active.iter().copied().combinations(p) {
        let mut total = 0.0;
        for (pair, per_branch) in pairs.iter().zip(&terms) {
            buf.clear();
            buf.extend_from_slice(pair.input.data());
            // same accumulation order as the PRM forward
            for (k, &i) in active.iter().enumerate() {
                if subset.contains(&i) {
                    continue;
                }
                for (o, &t) in buf.iter_mut().zip(per_branch[k].data()) {
                    *o += t;
                }
            }
            let sq: f64 = buf
                .iter()
                .zip(pair.output.data())
                .map(|(&a, &b)| {
                    let d = a.as_f64() - b.as_f64();
                    d * d
                })
                .sum();
            total += sq.sqrt();
        }
        out.push((subset, total));
    }
    Ok(out)
}

/// Per-PRM exhaustive search over all `p`-subsets of active branches,
/// keeping the lexicographically first minimizer.
pub fn blockwise_prune_search<E: Element>(
    net: &Network<E>,
    cache: &CalibrationCache<E>,
    p: usize,
) -> Result<SearchOutcome> {
    if p == 0 {
        return Err(Error::Config("prune step must be at least 1".into()));
    }
    if cache.pairs.len() != net.num_prms() {
        return Err(Error::Config(format!(
            "calibration cache covers {} PRMs, network has {}",
            cache.pairs.len(),
            net.num_prms()
        )));
    }
    let mut outcome = SearchOutcome::default();
    for (l, pairs) in cache.pairs.iter().enumerate() {
        let prm = net.prm(l);
        let n_active = prm.indices_in(BranchState::Active).len();
        if n_active <= p {
            log::info!("skipping {}: {n_active} active branches for step {p}", prm.label);
            outcome.skipped.push(l);
            continue;
        }
        let mut best: Option<(Vec<usize>, f64)> = None;
        for (subset, d) in evaluate_subsets(prm, pairs, p)? {
            outcome.records.push(DiscrepancyRecord {
                prm: l,
                subset: subset.clone(),
                discrepancy: d,
            });
            if best.as_ref().is_none_or(|(_, b)| d < *b) {
                best = Some((subset, d));
            }
        }
        let (subset, _) = best.expect("at least one candidate");
        outcome
            .proposal
            .extend(subset.into_iter().map(|branch| BranchRef { prm: l, branch }));
    }
    Ok(outcome)
}
