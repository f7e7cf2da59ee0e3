//! Branch-state timelines and architecture summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ArchitectureDescriptor, BranchState, EfficientBlockSpec};
use crate::pruning::{Event, EventKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub epoch: usize,
    /// States at the end of the epoch, one row per PRM.
    pub states: Vec<Vec<BranchState>>,
    pub events: Vec<EventKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub prm_labels: Vec<String>,
    pub kernels: Vec<String>,
    pub epochs: Vec<TimelineRow>,
}

/// Replays `events` on `initial` and records the branch states after each
/// of the first `epochs` epochs (or through the last event if `None`).
pub fn timeline(initial: &ArchitectureDescriptor, events: &[Event], epochs: Option<usize>) -> Result<Timeline> {
    initial.validate()?;
    let last = events.iter().map(|e| e.epoch + 1).max().unwrap_or(0);
    let n = epochs.unwrap_or(last).max(last);
    let mut states = initial.branch_states.clone();
    let mut rows = Vec::with_capacity(n);
    let mut it = events.iter().peekable();
    for epoch in 0..n {
        let mut kinds = Vec::new();
        while let Some(e) = it.next_if(|e| e.epoch == epoch) {
            let to = match e.event {
                EventKind::Mask => Some((BranchState::Active, BranchState::Masked)),
                EventKind::Commit => Some((BranchState::Masked, BranchState::Pruned)),
                EventKind::Restore => Some((BranchState::Masked, BranchState::Active)),
                EventKind::Terminated => None,
            };
            if let Some((from, to)) = to {
                for r in &e.masked_set {
                    let s = states
                        .get_mut(r.prm)
                        .and_then(|row| row.get_mut(r.branch))
                        .ok_or_else(|| Error::Data(format!("event names unknown branch {r:?}")))?;
                    if *s != from {
                        return Err(Error::Data(format!(
                            "epoch {epoch}: {:?} of branch {r:?} in state {s:?}",
                            e.event
                        )));
                    }
                    *s = to;
                }
            }
            kinds.push(e.event);
        }
        if it.peek().is_some_and(|e| e.epoch < epoch) {
            return Err(Error::Data("events are not ordered by epoch".into()));
        }
        rows.push(TimelineRow {
            epoch,
            states: states.clone(),
            events: kinds,
        });
    }
    Ok(Timeline {
        prm_labels: initial.model_config().prm_labels(),
        kernels: initial.kernels.iter().map(|k| k.to_string()).collect(),
        epochs: rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmSummary {
    pub label: String,
    pub channels: usize,
    pub states: Vec<BranchState>,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSummary {
    pub depth: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<String>,
    pub num_classes: usize,
    pub prms: Vec<PrmSummary>,
    /// Parameters of active branches.
    pub active_branch_params: usize,
    pub masked_branch_params: usize,
}

/// PRM channel width per forward position.
fn prm_channels(desc: &ArchitectureDescriptor) -> Vec<usize> {
    let d = desc.depth;
    (0..d - 1)
        .map(|i| desc.channels[i])
        .chain([desc.channels[d - 1]])
        .chain((0..d - 1).rev().map(|j| desc.channels[j]))
        .collect()
}

pub fn summarize(desc: &ArchitectureDescriptor) -> Result<ArchitectureSummary> {
    desc.validate()?;
    let labels = desc.model_config().prm_labels();
    let mut active_params = 0;
    let mut masked_params = 0;
    let mut prms = Vec::new();
    for ((label, ch), states) in labels.into_iter().zip(prm_channels(desc)).zip(&desc.branch_states) {
        for (k, s) in desc.kernels.iter().zip(states) {
            // block parameters plus the branch weight
            let n = EfficientBlockSpec::new(*k, ch).parameter_count() + 1;
            match s {
                BranchState::Active => active_params += n,
                BranchState::Masked => masked_params += n,
                BranchState::Pruned => {}
            }
        }
        prms.push(PrmSummary {
            label,
            channels: ch,
            active: states.iter().filter(|s| **s == BranchState::Active).count(),
            states: states.clone(),
        });
    }
    Ok(ArchitectureSummary {
        depth: desc.depth,
        channels: desc.channels.clone(),
        kernels: desc.kernels.iter().map(|k| k.to_string()).collect(),
        num_classes: desc.num_classes,
        prms,
        active_branch_params: active_params,
        masked_branch_params: masked_params,
    })
}

/// Aligned text grid: one row per PRM, one column per kernel
/// (`A` active, `M` masked, `.` pruned).
pub fn render_grid(summary: &ArchitectureSummary) -> String {
    let lw = summary.prms.iter().map(|p| p.label.len()).max().unwrap_or(0).max(5);
    let cw = summary.kernels.iter().map(|k| k.len()).max().unwrap_or(1);
    let mut s = format!("{:<lw$} {:>4} ", "prm", "ch");
    for k in &summary.kernels {
        s.push_str(&format!(" {k:>cw$}"));
    }
    s.push_str("  active\n");
    for p in &summary.prms {
        s.push_str(&format!("{:<lw$} {:>4} ", p.label, p.channels));
        for st in &p.states {
            s.push_str(&format!(" {:>cw$}", st.symbol()));
        }
        s.push_str(&format!("  {}/{}\n", p.active, p.states.len()));
    }
    s
}

/// Evaluation of one checkpoint, as written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEvaluation {
    pub checkpoint: std::path::PathBuf,
    pub params: crate::network::ParamCount,
    pub report: crate::eval::EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub params_effective: usize,
    pub mean_dice: Vec<f64>,
    pub mean_nsd: Vec<f64>,
}

/// Side-by-side summary of several evaluated checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Per-class DSC of every row minus the first row.
    pub dice_delta: Vec<Vec<f64>>,
}

pub fn compare(entries: &[(String, CheckpointEvaluation)]) -> Result<Comparison> {
    let Some((_, base)) = entries.first() else {
        return Err(Error::Data("nothing to compare".into()));
    };
    let rows: Vec<ComparisonRow> = entries
        .iter()
        .map(|(name, e)| ComparisonRow {
            name: name.clone(),
            params_effective: e.params.effective,
            mean_dice: e.report.mean_dice.clone(),
            mean_nsd: e.report.mean_nsd.clone(),
        })
        .collect();
    let dice_delta = rows
        .iter()
        .map(|r| {
            r.mean_dice
                .iter()
                .zip(&base.report.mean_dice)
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    Ok(Comparison { rows, dice_delta })
}

/// Markdown table of a comparison.
pub fn render_comparison(c: &Comparison) -> String {
    let classes = c.rows.first().map_or(0, |r| r.mean_dice.len());
    let mut s = String::from("| model | params |");
    for k in 1..=classes {
        s.push_str(&format!(" DSC c{k} | NSD c{k} | ΔDSC c{k} |"));
    }
    s.push_str("\n|---|---:|");
    s.push_str(&"---:|---:|---:|".repeat(classes));
    s.push('\n');
    for (r, d) in c.rows.iter().zip(&c.dice_delta) {
        s.push_str(&format!("| {} | {} |", r.name, r.params_effective));
        for ((dice, nsd), delta) in r.mean_dice.iter().zip(&r.mean_nsd).zip(d) {
            s.push_str(&format!(" {dice:.4} | {nsd:.4} | {delta:+.4} |"));
        }
        s.push('\n');
    }
    s
}
