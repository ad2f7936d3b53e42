use super::{AttackObserver, Phase, StepEvent};
use crate::bandit::ActionKind;

const FEASIBILITY_SLACK: f64 = 1e-9;

/// A broken invariant, tagged with the query count at which it was seen.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub query: usize,
    pub what: String,
}

/// Observer that checks every step of a run against the engine's invariants:
/// ball feasibility, pixel range, loss monotonicity, per-step query costs,
/// window capacity, emptiness of the locality ball after an acceptance, and
/// the block-constant `{-eps, +eps}` sign structure of flip runs.
#[derive(Debug, Default, Clone)]
pub struct InvariantAudit {
    pub steps: usize,
    pub violations: Vec<Violation>,
    queries: usize,
}

impl InvariantAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn flag(&mut self, query: usize, what: String) {
        self.violations.push(Violation { query, what });
    }
}

impl AttackObserver for InvariantAudit {
    fn on_step(&mut self, e: &StepEvent<'_>) {
        self.steps += 1;
        let st = e.state;
        let q = st.queries;
        self.queries += e.queries_delta;

        if st.queries != self.queries {
            self.flag(q, format!("state reports {} queries, deltas sum to {}", st.queries, self.queries));
        }
        let expected_cost = match e.action.map(|a| a.kind) {
            None => 1,
            Some(ActionKind::Diff { .. }) if e.success => e.queries_delta.clamp(1, 2),
            Some(ActionKind::Diff { .. }) => 2,
            Some(_) => 1,
        };
        if e.queries_delta != expected_cost {
            self.flag(q, format!("{:?} step cost {} queries, expected {expected_cost}", e.phase, e.queries_delta));
        }

        match st.x_t.linf_distance(e.origin) {
            Ok(d) if d > e.epsilon + FEASIBILITY_SLACK => self.flag(q, format!("outside the ball: {d}")),
            Err(err) => self.flag(q, err.to_string()),
            _ => {}
        }
        if !st.x_t.in_unit_range() {
            self.flag(q, "pixel outside [0, 1]".into());
        }

        let resets = matches!(e.phase, Phase::InitialCheck | Phase::FlipInit);
        if !resets {
            if st.current_loss > e.previous_loss {
                self.flag(q, format!("loss rose {} -> {}", e.previous_loss, st.current_loss));
            }
            if e.accepted && !e.success && !(st.current_loss < e.previous_loss) {
                self.flag(q, "accepted step without strict decrease".into());
            }
            if !e.accepted && st.current_loss != e.previous_loss {
                self.flag(q, "rejected step changed the loss".into());
            }
        }

        if st.window.len() > e.window_capacity {
            self.flag(q, format!("window holds {} > {}", st.window.len(), e.window_capacity));
        }
        if let (true, Some(action)) = (e.accepted, e.action) {
            if let Some(hit) = st.window.entries().find(|s| s.block.spatial_l1(&action.block) <= e.alpha) {
                self.flag(q, format!("window keeps {:?} within radius {} of accepted {:?}", hit.block, e.alpha, action.block));
            }
        }

        if let Some(signs) = &st.signs {
            let grid = &st.grid;
            for block in grid.blocks() {
                let mut offsets = grid.pixel_offsets(&block);
                let first = offsets.next().map(|o| signs[o]).unwrap_or(1);
                if first != 1 && first != -1 {
                    self.flag(q, format!("sign {first} at {block:?}"));
                }
                if offsets.any(|o| signs[o] != first) {
                    self.flag(q, format!("sign not constant over {block:?}"));
                }
            }
            let mismatch = st
                .x_t
                .pixels
                .iter()
                .zip(&e.origin.pixels)
                .zip(signs)
                .any(|((&xt, &x0), &s)| {
                    let target = (x0 + e.epsilon * s as f64).clamp(0.0, 1.0);
                    (xt - target).abs() > FEASIBILITY_SLACK
                });
            if mismatch {
                self.flag(q, "image is not the clipped signed perturbation".into());
            }
        }
    }
}
