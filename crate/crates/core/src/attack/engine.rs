use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::lhs::latin_hypercube_init;
use super::{
    AcceptedStep, AttackConfig, AttackMode, AttackObserver, AttackResult, AttackState, NoObserver,
    PassKind, Phase, Selection, StageEnd, StageRecord, StepEvent, TracePoint,
};
use crate::acquisition::{expected_improvement, select_max, AcquisitionScore};
use crate::bandit::{
    block_features, evaluate_difference, make_action_set, pca_first_component, ActionKind,
    ActionMode, ActionSpec, SampleSet,
};
use crate::error::{invalid, Error, Result};
use crate::gp::{AdamFitter, FeatureVec, GpHyperparams, GpModel};
use crate::image::{make_grid, project_ball, split_blocks, Image, MIN_BLOCK_SIZE};
use crate::oracle::{LogitsOracle, LossSpec};

/// Enforces the run's query budget and counts the run's own queries.
struct Metered<'o, O: ?Sized> {
    inner: &'o mut O,
    used: usize,
    budget: usize,
}

impl<O: LogitsOracle + ?Sized> LogitsOracle for Metered<'_, O> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn query(&mut self, x: &Image) -> Result<Vec<f64>> {
        if self.used >= self.budget {
            return Err(Error::BudgetExhausted { used: self.used });
        }
        match self.inner.query(x) {
            Ok(logits) => {
                self.used += 1;
                Ok(logits)
            }
            Err(Error::BudgetExhausted { .. }) => Err(Error::BudgetExhausted { used: self.used }),
            Err(e) => Err(e),
        }
    }

    fn queries_used(&self) -> usize {
        self.used
    }
}

struct PullOutcome {
    accepted: bool,
    terminal: Option<StageEnd>,
}

/// One attack run against one image.
pub struct AttackRun<'a, O: ?Sized, Obs: ?Sized> {
    oracle: Metered<'a, O>,
    observer: &'a mut Obs,
    origin: &'a Image,
    spec: LossSpec,
    config: &'a AttackConfig,
    rng: ChaCha8Rng,
    state: AttackState,
    trace: Vec<TracePoint>,
    accepted: Vec<AcceptedStep>,
    stages: Vec<StageRecord>,
    success: bool,
    exhausted: bool,
}

impl<'a, O, Obs> AttackRun<'a, O, Obs>
where
    O: LogitsOracle + ?Sized,
    Obs: AttackObserver + ?Sized,
{
    /// Validates inputs and sets up the coarsest grid. Issues no queries.
    pub fn new(
        oracle: &'a mut O,
        observer: &'a mut Obs,
        x: &'a Image,
        label: usize,
        config: &'a AttackConfig,
    ) -> Result<Self> {
        config.validate()?;
        let spec = config.loss_spec(label);
        spec.validate(oracle.num_classes())?;
        if !x.in_unit_range() {
            return Err(invalid("input pixels must lie in [0, 1]"));
        }
        let grid = make_grid(x.shape, config.initial_block)?;
        let (_, tau) = config.pass_sizes(grid.num_blocks());
        let state = AttackState {
            x_t: x.clone(),
            current_loss: f64::NAN,
            queries: 0,
            stage: 0,
            grid,
            window: SampleSet::new(tau),
            consumed: Vec::new(),
            signs: None,
        };
        Ok(Self {
            oracle: Metered {
                inner: oracle,
                used: 0,
                budget: config.query_budget,
            },
            observer,
            origin: x,
            spec,
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            state,
            trace: Vec::new(),
            accepted: Vec::new(),
            stages: Vec::new(),
            success: false,
            exhausted: false,
        })
    }

    pub fn state(&self) -> &AttackState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.success || self.exhausted
    }

    #[allow(clippy::too_many_arguments)]
    fn emit(
        &mut self,
        phase: Phase,
        action: Option<&ActionSpec>,
        accepted: bool,
        g: Option<f64>,
        queries_delta: usize,
        previous_loss: f64,
        alpha: usize,
    ) {
        let event = StepEvent {
            phase,
            action,
            accepted,
            success: self.success,
            g,
            queries_delta,
            previous_loss,
            state: &self.state,
            origin: self.origin,
            epsilon: self.config.epsilon,
            alpha,
            window_capacity: self.state.window.capacity(),
        };
        self.observer.on_step(&event);
    }

    /// Queries a whole image, replacing the cached loss. Returns false when the
    /// budget is spent.
    fn reset_to(&mut self, image: Image, phase: Phase) -> Result<bool> {
        let previous = self.state.current_loss;
        let logits = match self.oracle.query(&image) {
            Ok(l) => l,
            Err(Error::BudgetExhausted { .. }) => {
                self.exhausted = true;
                return Ok(false);
            }
            Err(e) => return Err(e),
        };
        self.state.queries = self.oracle.used;
        self.state.x_t = image;
        self.state.current_loss = self.spec.loss(&logits)?;
        self.success = self.spec.is_success(&logits);
        self.trace.push(TracePoint {
            query: self.state.queries,
            loss: self.state.current_loss,
        });
        self.emit(phase, None, false, None, 1, previous, 0);
        Ok(true)
    }

    /// Measures the loss of the natural image. Returns true if the run is over
    /// (already adversarial, or no budget).
    pub fn initial_check(&mut self) -> Result<bool> {
        self.reset_to(self.origin.clone(), Phase::InitialCheck)?;
        Ok(self.is_finished())
    }

    /// Random +-eps start for flip runs, one sign per coarsest block.
    pub fn flip_init(&mut self) -> Result<bool> {
        let grid = self.state.grid;
        let mut signs = vec![0i8; self.origin.pixels.len()];
        for block in grid.blocks() {
            let s: i8 = if self.rng.random::<bool>() { 1 } else { -1 };
            grid.pixel_offsets(&block).for_each(|o| signs[o] = s);
        }
        let eps = self.config.epsilon;
        let moved = Image {
            shape: self.origin.shape,
            pixels: self
                .origin
                .pixels
                .iter()
                .zip(&signs)
                .map(|(p, &s)| p + eps * s as f64)
                .collect(),
        };
        let start = project_ball(&moved, self.origin, eps)?;
        self.state.signs = Some(signs);
        self.reset_to(start, Phase::FlipInit)?;
        Ok(self.is_finished())
    }

    fn pull(
        &mut self,
        action: &ActionSpec,
        feature: FeatureVec,
        alpha: usize,
        consumes: bool,
        phase: Phase,
    ) -> Result<PullOutcome> {
        let grid = self.state.grid;
        let previous = self.state.current_loss;
        let before = self.oracle.used;
        let result = evaluate_difference(
            &mut self.oracle,
            &self.state.x_t,
            previous,
            self.origin,
            self.config.epsilon,
            &grid,
            action,
            &self.spec,
        );
        self.state.queries = self.oracle.used;
        let eval = match result {
            Ok(e) => e,
            Err(Error::BudgetExhausted { .. }) => {
                self.exhausted = true;
                for q in before + 1..=self.oracle.used {
                    self.trace.push(TracePoint { query: q, loss: previous });
                }
                return Ok(PullOutcome {
                    accepted: false,
                    terminal: Some(StageEnd::BudgetExhausted),
                });
            }
            Err(e) => return Err(e),
        };

        let accepted = eval.g < 0.0 || eval.success;
        if accepted {
            self.state.x_t = eval.candidate;
            self.state.current_loss = eval.candidate_loss;
            if let Some(signs) = self.state.signs.as_mut() {
                let s = match action.kind {
                    ActionKind::FlipToPos { .. } => 1,
                    ActionKind::FlipToNeg { .. } => -1,
                    ActionKind::Diff { .. } => 0,
                };
                if s != 0 {
                    grid.pixel_offsets(&action.block).for_each(|o| signs[o] = s);
                }
            }
            if consumes {
                self.state.consumed.push(action.block);
            }
            self.accepted.push(AcceptedStep {
                query: self.state.queries,
                block_size: grid.block_size,
                block: action.block,
                step: eval.step,
                loss: eval.candidate_loss,
            });
        }
        self.state
            .window
            .update(accepted, action.block, feature, eval.g, alpha);
        for q in before + 1..=self.oracle.used {
            let loss = if q == self.oracle.used { self.state.current_loss } else { previous };
            self.trace.push(TracePoint { query: q, loss });
        }
        if eval.success {
            self.success = true;
        }
        self.emit(phase, Some(action), accepted, Some(eval.g), eval.queries, previous, alpha);

        Ok(PullOutcome {
            accepted,
            terminal: eval.success.then_some(StageEnd::Success),
        })
    }

    /// Runs one bandit pass over the current grid. `features` holds one
    /// feature vector per block in linear-index order.
    pub fn run_pass(&mut self, pass: PassKind, features: &[FeatureVec]) -> Result<StageRecord> {
        let grid = self.state.grid;
        if features.len() != grid.num_blocks() {
            return Err(invalid("one feature vector per block required"));
        }
        let mode = match pass {
            PassKind::Diff => ActionMode::Diff,
            PassKind::FlipNegative => ActionMode::FlipNegativePass,
            PassKind::FlipPositive => ActionMode::FlipPositivePass,
        };
        let empty = Vec::new();
        let signs = self.state.signs.as_ref().unwrap_or(&empty);
        if pass != PassKind::Diff && signs.is_empty() {
            return Err(invalid("flip pass before flip initialisation"));
        }
        let actions = make_action_set(mode, &grid, signs, self.config.epsilon, self.config.eta);
        let alpha = self.config.alpha_for(grid.block_size);
        let (m, tau) = self.config.pass_sizes(actions.len());
        self.state.window = SampleSet::new(tau);
        self.state.consumed.clear();
        self.state.stage = grid.stage;

        let (accepted, end) = if self.is_finished() {
            (0, if self.success { StageEnd::Success } else { StageEnd::BudgetExhausted })
        } else if actions.is_empty() {
            (0, StageEnd::CandidatesExhausted)
        } else {
            match self.config.selection {
                Selection::BayesOpt => self.bayes_pass(&actions, features, m, alpha, pass)?,
                Selection::UniformRandom => self.random_pass(&actions, features, alpha, pass)?,
            }
        };
        let record = StageRecord {
            stage: grid.stage,
            block_size: grid.block_size,
            pass,
            actions: actions.len(),
            accepted,
            queries_at_end: self.state.queries,
            end,
        };
        self.stages.push(record.clone());
        Ok(record)
    }

    fn bayes_pass(
        &mut self,
        actions: &[ActionSpec],
        features: &[FeatureVec],
        m: usize,
        alpha: usize,
        pass: PassKind,
    ) -> Result<(usize, StageEnd)> {
        let grid = self.state.grid;
        let consumes = pass != PassKind::Diff;
        let feature_of = |a: &ActionSpec| features[grid.linear_index(&a.block)];
        // every action is tried at most once per pass
        let mut taken = vec![false; actions.len()];
        let mut accepted = 0;

        let warm = latin_hypercube_init(actions, &grid, m, &mut self.rng);
        for idx in warm {
            let out = self.pull(&actions[idx], feature_of(&actions[idx]), alpha, consumes, Phase::WarmStart)?;
            taken[idx] = true;
            if out.accepted {
                accepted += 1;
            }
            if let Some(end) = out.terminal {
                return Ok((accepted, end));
            }
        }

        let mut fitter = AdamFitter::default();
        let mut hp = GpHyperparams::default();
        loop {
            // actions are in linear-index order, so index order is the tie-break order
            let candidates: Vec<usize> = (0..actions.len()).filter(|&i| !taken[i]).collect();
            if candidates.is_empty() {
                return Ok((accepted, StageEnd::CandidatesExhausted));
            }
            let data = self.state.window.to_dataset()?;
            if data.len() >= 2 {
                hp = fitter.fit_step(&hp, &data)?;
            }
            let model = GpModel::condition(&hp, &data)?;
            let best = self.state.window.best().unwrap_or(0.0);
            let scores = candidates.iter().map(|&i| {
                let post = model.predict(&feature_of(&actions[i])).destandardize(&data);
                AcquisitionScore {
                    action: i,
                    ei: expected_improvement(post.mean, post.variance, best),
                }
            });
            let pick = select_max(scores)?;
            if pick.ei < self.config.ei_threshold {
                return Ok((accepted, StageEnd::EiBelowThreshold));
            }
            let idx = pick.action;
            let out = self.pull(&actions[idx], feature_of(&actions[idx]), alpha, consumes, Phase::Acquisition)?;
            taken[idx] = true;
            if out.accepted {
                accepted += 1;
            }
            if let Some(end) = out.terminal {
                return Ok((accepted, end));
            }
        }
    }

    fn random_pass(
        &mut self,
        actions: &[ActionSpec],
        features: &[FeatureVec],
        alpha: usize,
        pass: PassKind,
    ) -> Result<(usize, StageEnd)> {
        let grid = self.state.grid;
        let consumes = pass != PassKind::Diff;
        let mut order: Vec<usize> = (0..actions.len()).collect();
        order.shuffle(&mut self.rng);
        let mut accepted = 0;
        for idx in order {
            let feature = features[grid.linear_index(&actions[idx].block)];
            let out = self.pull(&actions[idx], feature, alpha, consumes, Phase::RandomPick)?;
            if out.accepted {
                accepted += 1;
            }
            if let Some(end) = out.terminal {
                return Ok((accepted, end));
            }
        }
        Ok((accepted, StageEnd::CandidatesExhausted))
    }

    /// Moves to the next finer grid. Returns false at the finest size.
    pub fn refine(&mut self) -> Result<bool> {
        if self.state.grid.block_size / 2 < MIN_BLOCK_SIZE {
            return Ok(false);
        }
        self.state.grid = split_blocks(&self.state.grid)?;
        self.state.stage = self.state.grid.stage;
        Ok(true)
    }

    /// Features of the current grid, from the natural image.
    pub fn current_features(&self) -> Result<Vec<FeatureVec>> {
        let grid = self.state.grid;
        block_features(&grid, &pca_first_component(self.origin, &grid)?)
    }

    pub fn finish(self) -> AttackResult {
        AttackResult {
            success: self.success,
            queries: self.state.queries,
            budget_exhausted: self.exhausted,
            final_loss: self.state.current_loss,
            final_image: self.state.x_t,
            loss_trace: self.trace,
            accepted: self.accepted,
            stages: self.stages,
        }
    }
}

/// Runs one bandit pass; see [`AttackRun::run_pass`].
pub fn corrattack_stage<O, Obs>(
    run: &mut AttackRun<'_, O, Obs>,
    pass: PassKind,
    features: &[FeatureVec],
) -> Result<StageRecord>
where
    O: LogitsOracle + ?Sized,
    Obs: AttackObserver + ?Sized,
{
    run.run_pass(pass, features)
}

/// Full coarse-to-fine attack in the configured mode.
///
/// Stops on success, on budget exhaustion, or once a full round at the finest
/// block size accepts nothing.
pub fn hierarchical_attack<O, Obs>(
    oracle: &mut O,
    x: &Image,
    label: usize,
    config: &AttackConfig,
    observer: &mut Obs,
) -> Result<AttackResult>
where
    O: LogitsOracle + ?Sized,
    Obs: AttackObserver + ?Sized,
{
    let mut run = AttackRun::new(oracle, observer, x, label, config)?;
    if run.initial_check()? {
        return Ok(run.finish());
    }
    if config.mode == AttackMode::Flip && run.flip_init()? {
        return Ok(run.finish());
    }
    let passes: &[PassKind] = match config.mode {
        AttackMode::Diff => &[PassKind::Diff],
        AttackMode::Flip => &[PassKind::FlipNegative, PassKind::FlipPositive],
    };
    loop {
        let features = run.current_features()?;
        let mut accepted = 0;
        for &pass in passes {
            let record = run.run_pass(pass, &features)?;
            accepted += record.accepted;
            if record.end.is_terminal() {
                return Ok(run.finish());
            }
        }
        if !run.refine()? && accepted == 0 {
            break;
        }
    }
    Ok(run.finish())
}

pub fn hierarchical_diff<O: LogitsOracle + ?Sized>(
    oracle: &mut O,
    x: &Image,
    label: usize,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let mut config = config.clone();
    config.mode = AttackMode::Diff;
    hierarchical_attack(oracle, x, label, &config, &mut NoObserver)
}

pub fn hierarchical_flip<O: LogitsOracle + ?Sized>(
    oracle: &mut O,
    x: &Image,
    label: usize,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let mut config = config.clone();
    config.mode = AttackMode::Flip;
    hierarchical_attack(oracle, x, label, &config, &mut NoObserver)
}
