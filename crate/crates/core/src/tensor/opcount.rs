//! Thread-local instrumentation of forward-pass arithmetic.
//!
//! Counting is off until [`start`] is called. Matmuls add their
//! multiply-accumulates to the bucket selected by the innermost
//! [`Component`] and [`Phase`] guards; attention adds its query·key score
//! evaluations separately. Backward passes are never counted.

use std::cell::RefCell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Local,
    Global,
    Cross,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    /// Query·key scores and attention-weighted values.
    AttentionCore,
    /// Query/key/value/output projections.
    Projection,
    Ffn,
    Other,
}

const COMPONENTS: usize = 4;
const PHASES: usize = 4;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    macs: [[u64; PHASES]; COMPONENTS],
    pub score_evals: u64,
}

impl OpCounts {
    pub fn macs(&self, c: Component, p: Phase) -> u64 {
        self.macs[c as usize][p as usize]
    }

    pub fn component_macs(&self, c: Component) -> u64 {
        self.macs[c as usize].iter().sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.iter().flatten().sum()
    }
}

struct State {
    enabled: bool,
    component: Component,
    phase: Phase,
    counts: OpCounts,
}

thread_local! {
    static STATE: RefCell<State> = const {
        RefCell::new(State {
            enabled: false,
            component: Component::Other,
            phase: Phase::Other,
            counts: OpCounts { macs: [[0; PHASES]; COMPONENTS], score_evals: 0 },
        })
    };
}

/// Resets the counters and turns counting on for this thread.
pub fn start() {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        s.enabled = true;
        s.counts = OpCounts::default();
    });
}

/// Turns counting off and returns what was counted since [`start`].
pub fn stop() -> OpCounts {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        s.enabled = false;
        std::mem::take(&mut s.counts)
    })
}

/// Counts accumulated so far without stopping.
pub fn snapshot() -> OpCounts {
    STATE.with(|s| s.borrow().counts.clone())
}

pub(crate) fn add_macs(n: u64) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.enabled {
            let (c, p) = (s.component as usize, s.phase as usize);
            s.counts.macs[c][p] += n;
        }
    });
}

pub(crate) fn add_scores(n: u64) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.enabled {
            s.counts.score_evals += n;
        }
    });
}

/// Restores the previous component when dropped.
pub struct ComponentGuard(Component);

impl Drop for ComponentGuard {
    fn drop(&mut self) {
        STATE.with(|s| s.borrow_mut().component = self.0);
    }
}

pub fn component(c: Component) -> ComponentGuard {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        let prev = s.component;
        s.component = c;
        ComponentGuard(prev)
    })
}

/// Restores the previous phase when dropped.
pub struct PhaseGuard(Phase);

impl Drop for PhaseGuard {
    fn drop(&mut self) {
        STATE.with(|s| s.borrow_mut().phase = self.0);
    }
}

pub fn phase(p: Phase) -> PhaseGuard {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        let prev = s.phase;
        s.phase = p;
        PhaseGuard(prev)
    })
}
