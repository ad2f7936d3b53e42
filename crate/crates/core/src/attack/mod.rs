//! The hierarchical block attack.
//!
//! A run walks block sizes from coarse to fine. At each size it runs one or
//! more bandit passes ([`corrattack_stage`]): a Latin-hypercube warm start,
//! then repeated GP fit / expected-improvement pick / evaluate, until the best
//! EI falls below the threshold or no candidate is left. Actions are accepted
//! only when they strictly lower the loss, so the cached loss never rises.

mod audit;
mod engine;
mod lhs;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bandit::{ActionSpec, SampleSet, SignMap};
use crate::error::{invalid, Result};
use crate::image::{BlockGrid, BlockIndex, Image, MIN_BLOCK_SIZE};
use crate::oracle::{LossSpec, DEFAULT_MARGIN};

pub use crate::oracle::check_success;
pub use audit::{InvariantAudit, Violation};
pub use engine::{corrattack_stage, hierarchical_attack, hierarchical_diff, hierarchical_flip, AttackRun};
pub use lhs::latin_hypercube_init;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Diff,
    Flip,
}

impl std::str::FromStr for AttackMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diff" => Ok(AttackMode::Diff),
            "flip" => Ok(AttackMode::Flip),
            other => Err(invalid(format!("unknown mode {other:?} (diff|flip)"))),
        }
    }
}

/// How a pass picks its next action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// GP posterior + expected improvement.
    #[default]
    BayesOpt,
    /// Every action of the pass once, in uniformly random order.
    UniformRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub epsilon: f64,
    /// Diff step size.
    pub eta: f64,
    pub initial_block: usize,
    /// Stop a pass once the best expected improvement drops below this.
    pub ei_threshold: f64,
    /// Warm-start samples per pass, as a fraction of the pass's action count.
    pub sample_ratio: f64,
    /// Window capacity, as a fraction of the pass's action count.
    pub window_ratio: f64,
    pub min_samples: usize,
    pub min_window: usize,
    /// block size -> locality radius
    pub alpha_schedule: BTreeMap<usize, usize>,
    pub query_budget: usize,
    pub margin: f64,
    pub target: Option<usize>,
    pub seed: u64,
    pub selection: Selection,
}

impl AttackConfig {
    pub fn new(mode: AttackMode) -> Self {
        let alpha: &[(usize, usize)] = match mode {
            AttackMode::Flip => &[(32, 1), (16, 1), (8, 2), (4, 2), (2, 3)],
            AttackMode::Diff => &[(32, 0), (16, 0), (8, 1), (4, 1), (2, 2)],
        };
        Self {
            mode,
            epsilon: 0.05,
            eta: 0.03,
            initial_block: 32,
            ei_threshold: 1e-4,
            sample_ratio: 0.03,
            window_ratio: 0.09,
            min_samples: 4,
            min_window: 12,
            alpha_schedule: alpha.iter().copied().collect(),
            query_budget: 10_000,
            margin: DEFAULT_MARGIN,
            target: None,
            seed: 0,
            selection: Selection::BayesOpt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.eta > 0.0) || !(self.ei_threshold > 0.0) {
            return Err(invalid("epsilon, eta and ei_threshold must be positive"));
        }
        if !(self.sample_ratio > 0.0) || !(self.sample_ratio < self.window_ratio) {
            return Err(invalid("need 0 < sample_ratio < window_ratio"));
        }
        if self.query_budget == 0 {
            return Err(invalid("query budget must be positive"));
        }
        if self.initial_block < MIN_BLOCK_SIZE || !self.initial_block.is_power_of_two() {
            return Err(invalid(format!(
                "initial block {} must be a power of two >= {MIN_BLOCK_SIZE}",
                self.initial_block
            )));
        }
        if self.min_samples == 0 || self.min_window < self.min_samples {
            return Err(invalid("need 1 <= min_samples <= min_window"));
        }
        if !(self.margin >= 0.0) {
            return Err(invalid("margin must be >= 0"));
        }
        Ok(())
    }

    /// Locality radius for a block size; sizes missing from the schedule use
    /// the entry with the nearest block size.
    pub fn alpha_for(&self, block_size: usize) -> usize {
        if let Some(a) = self.alpha_schedule.get(&block_size) {
            return *a;
        }
        self.alpha_schedule
            .iter()
            .min_by_key(|(b, _)| b.abs_diff(block_size))
            .map(|(_, a)| *a)
            .unwrap_or(0)
    }

    /// `(m, tau)` for a pass over `n` actions.
    pub fn pass_sizes(&self, n: usize) -> (usize, usize) {
        let m = ((self.sample_ratio * n as f64).ceil() as usize)
            .max(self.min_samples)
            .min(n);
        let tau = ((self.window_ratio * n as f64).ceil() as usize).max(self.min_window);
        (m, tau)
    }

    pub fn loss_spec(&self, label: usize) -> LossSpec {
        match self.target {
            Some(t) => LossSpec::targeted(t, self.margin),
            None => LossSpec::untargeted(label, self.margin),
        }
    }
}

/// Mutable state of one run.
#[derive(Debug, Clone, Serialize)]
pub struct AttackState {
    pub x_t: Image,
    pub current_loss: f64,
    pub queries: usize,
    pub stage: usize,
    pub grid: BlockGrid,
    pub window: SampleSet,
    /// Actions already taken in the current flip pass.
    pub consumed: Vec<BlockIndex>,
    /// Per-pixel sign of the flip perturbation; `None` in Diff mode.
    pub signs: Option<SignMap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    Diff,
    FlipNegative,
    FlipPositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageEnd {
    EiBelowThreshold,
    CandidatesExhausted,
    Success,
    BudgetExhausted,
}

impl StageEnd {
    pub fn is_terminal(&self) -> bool {
        matches!(self, StageEnd::Success | StageEnd::BudgetExhausted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub block_size: usize,
    pub pass: PassKind,
    pub actions: usize,
    pub accepted: usize,
    pub queries_at_end: usize,
    pub end: StageEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub query: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedStep {
    pub query: usize,
    pub block_size: usize,
    pub block: BlockIndex,
    pub step: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub success: bool,
    pub queries: usize,
    pub budget_exhausted: bool,
    pub final_loss: f64,
    pub final_image: Image,
    /// Loss of `x_t` after every query.
    pub loss_trace: Vec<TracePoint>,
    pub accepted: Vec<AcceptedStep>,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    InitialCheck,
    FlipInit,
    WarmStart,
    Acquisition,
    RandomPick,
}

/// Snapshot handed to an [`AttackObserver`] after every oracle interaction.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub phase: Phase,
    pub action: Option<&'a ActionSpec>,
    pub accepted: bool,
    /// The oracle reported success on this step.
    pub success: bool,
    pub g: Option<f64>,
    pub queries_delta: usize,
    pub previous_loss: f64,
    pub state: &'a AttackState,
    pub origin: &'a Image,
    pub epsilon: f64,
    pub alpha: usize,
    pub window_capacity: usize,
}

pub trait AttackObserver {
    fn on_step(&mut self, _event: &StepEvent<'_>) {}
}

/// Observer that ignores everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoObserver;

impl AttackObserver for NoObserver {}
