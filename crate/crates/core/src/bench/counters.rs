use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// What a model evaluation was spent on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Passes whose gradients update parameters (or, for a teacher, feed the update).
    Train,
    /// Passes spent searching for adversarial inputs.
    Attack,
    /// Passes spent measuring accuracy.
    Eval,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Train, Phase::Attack, Phase::Eval];

    fn slot(self) -> usize {
        match self {
            Phase::Train => 0,
            Phase::Attack => 1,
            Phase::Eval => 2,
        }
    }
}

/// Forward/backward pass tallies for one phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounters {
    pub scope: Phase,
    pub forwards: u64,
    pub backwards: u64,
}

impl PassCounters {
    pub fn zero(scope: Phase) -> Self {
        Self { scope, forwards: 0, backwards: 0 }
    }
}

/// Snapshot of a ledger across all phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub train: PassCounters,
    pub attack: PassCounters,
    pub eval: PassCounters,
}

impl Default for LedgerSnapshot {
    fn default() -> Self {
        Self {
            train: PassCounters::zero(Phase::Train),
            attack: PassCounters::zero(Phase::Attack),
            eval: PassCounters::zero(Phase::Eval),
        }
    }
}

impl LedgerSnapshot {
    pub fn phase(&self, p: Phase) -> PassCounters {
        match p {
            Phase::Train => self.train,
            Phase::Attack => self.attack,
            Phase::Eval => self.eval,
        }
    }

    pub fn total_forwards(&self) -> u64 {
        self.train.forwards + self.attack.forwards + self.eval.forwards
    }

    pub fn total_backwards(&self) -> u64 {
        self.train.backwards + self.attack.backwards + self.eval.backwards
    }

    /// Per-phase difference `self - earlier`.
    pub fn since(&self, earlier: &LedgerSnapshot) -> LedgerSnapshot {
        let d = |a: PassCounters, b: PassCounters| PassCounters {
            scope: a.scope,
            forwards: a.forwards - b.forwards,
            backwards: a.backwards - b.backwards,
        };
        LedgerSnapshot {
            train: d(self.train, earlier.train),
            attack: d(self.attack, earlier.attack),
            eval: d(self.eval, earlier.eval),
        }
    }

    pub fn plus(&self, other: &LedgerSnapshot) -> LedgerSnapshot {
        let s = |a: PassCounters, b: PassCounters| PassCounters {
            scope: a.scope,
            forwards: a.forwards + b.forwards,
            backwards: a.backwards + b.backwards,
        };
        LedgerSnapshot {
            train: s(self.train, other.train),
            attack: s(self.attack, other.attack),
            eval: s(self.eval, other.eval),
        }
    }
}

/// Atomic pass counters owned by a model. Only model evaluation and model
/// backward calls increment it.
#[derive(Debug, Default)]
pub struct PassLedger {
    forwards: [AtomicU64; 3],
    backwards: [AtomicU64; 3],
}

impl PassLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn record_forward(&self, phase: Phase) {
        self.forwards[phase.slot()].fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn record_backward(&self, phase: Phase) {
        self.backwards[phase.slot()].fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self, phase: Phase) -> PassCounters {
        PassCounters {
            scope: phase,
            forwards: self.forwards[phase.slot()].load(Ordering::Relaxed),
            backwards: self.backwards[phase.slot()].load(Ordering::Relaxed),
        }
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot { train: self.get(Phase::Train), attack: self.get(Phase::Attack), eval: self.get(Phase::Eval) }
    }

    pub fn reset(&self) {
        for a in self.forwards.iter().chain(&self.backwards) {
            a.store(0, Ordering::Relaxed);
        }
    }
}
