use autograd::Element;
use serde::{Deserialize, Serialize};

use super::calibration::CalibrationCache;
use super::search::blockwise_prune_search;
use crate::error::Result;
use crate::network::{BranchRef, Network};

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Stable,
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Mask,
    Commit,
    Restore,
    Terminated,
}

/// One controller transition, as written to the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub epoch: usize,
    pub event: EventKind,
    /// Prune step after the transition.
    pub p: usize,
    pub masked_set: Vec<BranchRef>,
    pub fd: f64,
    /// Mask-time reference value; `None` before the first mask.
    pub best_fd: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Improvement {
    Maintained,
    OverPruned,
}

/// `OverPruned` iff `current > best + threshold`.
pub fn improvement_check(current_fd: f64, best_fd: f64, threshold: f64) -> Improvement {
    if current_fd > best_fd + threshold {
        Improvement::OverPruned
    } else {
        Improvement::Maintained
    }
}

/// No value after `start` undercuts the running minimum over `from..=start`
/// by more than `tol`.
fn stalled(series: &[f64], from: usize, start: usize, tol: f64) -> bool {
    let best = series[from..=start].iter().copied().fold(f64::INFINITY, f64::min);
    series[start + 1..].iter().all(|&v| v >= best - tol)
}

/// True iff the trailing `window` epochs all lie after `floor_epoch` and
/// neither series set a new minimum inside the window, the minimum being
/// taken over the epochs since `floor_epoch` up to the window start.
///
/// Histories are indexed by epoch (entry `e` is epoch `e`).
pub fn convergence_check(tr: &[f64], rl: &[f64], window: usize, floor_epoch: Option<usize>) -> bool {
    convergence_check_with(tr, rl, window, floor_epoch, 0.0)
}

/// [`convergence_check`] where improvements of at most `tol` do not count.
pub fn convergence_check_with(tr: &[f64], rl: &[f64], window: usize, floor_epoch: Option<usize>, tol: f64) -> bool {
    let len = tr.len().min(rl.len());
    if window == 0 || len < window {
        return false;
    }
    let start = len - window;
    if floor_epoch.is_some_and(|f| start <= f) {
        return false;
    }
    let from = floor_epoch.map_or(0, |f| f + 1);
    stalled(&tr[..len], from, start, tol) && stalled(&rl[..len], from, start, tol)
}

/// Progressive mask → check → commit/restore state machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub p: usize,
    pub window: usize,
    pub threshold: f64,
    /// Convergence tolerance: smaller improvements count as stalled.
    #[serde(default)]
    pub tolerance: f64,
    pub phase: Phase,
    pub masked_set: Vec<BranchRef>,
    pub best_tr: Option<f64>,
    pub best_rl: Option<f64>,
    /// Historical minimum of `tr + rl`.
    pub hist_best_fd: Option<f64>,
    /// Reference recorded at the most recent mask.
    pub best_fd: Option<f64>,
    pub epochs_since_improvement: usize,
    pub last_event_epoch: Option<usize>,
    pub tr_history: Vec<f64>,
    pub rl_history: Vec<f64>,
    pub events: Vec<Event>,
}

impl ControllerState {
    pub fn new(initial_p: usize) -> Self {
        Self {
            p: initial_p,
            window: DEFAULT_WINDOW,
            threshold: DEFAULT_THRESHOLD,
            tolerance: 0.0,
            phase: Phase::Stable,
            masked_set: Vec::new(),
            best_tr: None,
            best_rl: None,
            hist_best_fd: None,
            best_fd: None,
            epochs_since_improvement: 0,
            last_event_epoch: None,
            tr_history: Vec::new(),
            rl_history: Vec::new(),
            events: Vec::new(),
        }
    }

    /// A controller that never prunes (retrain mode).
    pub fn disabled() -> Self {
        Self::new(0)
    }

    pub fn is_finished(&self) -> bool {
        self.p == 0
    }

    fn record(&mut self, tr: f64, rl: f64) {
        self.tr_history.push(tr);
        self.rl_history.push(rl);
        let fd = tr + rl;
        self.best_tr = Some(self.best_tr.map_or(tr, |b| b.min(tr)));
        self.best_rl = Some(self.best_rl.map_or(rl, |b| b.min(rl)));
        match self.hist_best_fd {
            Some(b) if fd >= b => self.epochs_since_improvement += 1,
            _ => {
                self.hist_best_fd = Some(fd);
                self.epochs_since_improvement = 0;
            }
        }
    }

    fn emit(&mut self, out: &mut Vec<Event>, epoch: usize, event: EventKind, masked_set: Vec<BranchRef>, fd: f64) {
        let e = Event {
            epoch,
            event,
            p: self.p,
            masked_set,
            fd,
            best_fd: self.best_fd,
        };
        log::info!("epoch {epoch}: {event:?} p={} fd={fd:.5}", self.p);
        self.last_event_epoch = Some(epoch);
        self.events.push(e.clone());
        out.push(e);
    }

    /// One end-of-epoch controller update; `epoch` must equal the number of
    /// previously recorded epochs. `build_cache` is called only when a search runs.
    pub fn step<E: Element>(
        &mut self,
        epoch: usize,
        tr: f64,
        rl: f64,
        net: &mut Network<E>,
        build_cache: impl FnOnce(&Network<E>) -> Result<CalibrationCache<E>>,
    ) -> Result<Vec<Event>> {
        debug_assert_eq!(epoch, self.tr_history.len());
        self.record(tr, rl);
        let fd = tr + rl;
        let mut out = Vec::new();
        if self.p == 0 {
            return Ok(out);
        }
        if !convergence_check_with(
            &self.tr_history,
            &self.rl_history,
            self.window,
            self.last_event_epoch,
            self.tolerance,
        ) {
            return Ok(out);
        }

        if self.phase == Phase::Masked {
            let reference = self.best_fd.expect("mask records a reference");
            let set = std::mem::take(&mut self.masked_set);
            self.phase = Phase::Stable;
            match improvement_check(fd, reference, self.threshold) {
                Improvement::Maintained => {
                    net.commit_prune(&set)?;
                    self.emit(&mut out, epoch, EventKind::Commit, set, fd);
                }
                Improvement::OverPruned => {
                    net.restore_mask(&set)?;
                    self.p -= 1;
                    self.emit(&mut out, epoch, EventKind::Restore, set, fd);
                    if self.p == 0 {
                        self.emit(&mut out, epoch, EventKind::Terminated, Vec::new(), fd);
                    }
                    return Ok(out);
                }
            }
        }

        if self.best_fd.is_none_or(|b| fd < b) {
            let cache = build_cache(net)?;
            let search = blockwise_prune_search(net, &cache, self.p)?;
            if search.proposal.is_empty() {
                // no PRM can give up p branches: shrink the step
                self.p -= 1;
                log::info!("epoch {epoch}: nothing prunable, step reduced to {}", self.p);
                if self.p == 0 {
                    self.emit(&mut out, epoch, EventKind::Terminated, Vec::new(), fd);
                }
                return Ok(out);
            }
            net.apply_mask(&search.proposal)?;
            self.best_fd = self.hist_best_fd;
            self.masked_set = search.proposal.clone();
            self.phase = Phase::Masked;
            self.emit(&mut out, epoch, EventKind::Mask, search.proposal, fd);
        }
        Ok(out)
    }
}
