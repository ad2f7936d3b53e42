//! The query interface to the target model.
//!
//! Models return raw logits; losses are computed attacker-side from a
//! [`LossSpec`]. Every answered query is counted by the wrapping
//! [`CountingOracle`], which also enforces the query budget.

mod diagnostics;
mod loss;
mod remote;
mod synthetic;

pub use diagnostics::{change_map, finite_difference_map, ChangeMap};
pub use loss::{
    argmax, check_success, hinge_targeted, hinge_untargeted, LossKind, LossSpec, DEFAULT_MARGIN,
};
pub use remote::{HealthStatus, LogitsRequest, LogitsResponse, RemoteModel, RetryPolicy, ORACLE_URL_ENV};
pub use synthetic::{
    LinearModel, MlpModel, SyntheticModel, BENCH_CLASSES, BENCH_SEED, BENCH_SHAPE,
};

use crate::error::{Error, Result};
use crate::image::Image;

/// Something that maps an image to logits.
pub trait LogitsModel {
    fn num_classes(&self) -> usize;
    fn logits(&mut self, x: &Image) -> Result<Vec<f64>>;
}

impl<M: LogitsModel + ?Sized> LogitsModel for Box<M> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn logits(&mut self, x: &Image) -> Result<Vec<f64>> {
        (**self).logits(x)
    }
}

/// A metered model. `queries_used` grows by exactly one per answered query.
pub trait LogitsOracle {
    fn num_classes(&self) -> usize;
    fn query(&mut self, x: &Image) -> Result<Vec<f64>>;
    fn queries_used(&self) -> usize;
}

impl<O: LogitsOracle + ?Sized> LogitsOracle for &mut O {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn query(&mut self, x: &Image) -> Result<Vec<f64>> {
        (**self).query(x)
    }

    fn queries_used(&self) -> usize {
        (**self).queries_used()
    }
}

/// Counts queries against an optional budget. A query past the budget fails
/// with [`Error::BudgetExhausted`] before the model is contacted; a query the
/// model fails to answer is not counted.
#[derive(Debug, Clone)]
pub struct CountingOracle<M> {
    model: M,
    budget: Option<usize>,
    used: usize,
}

impl<M: LogitsModel> CountingOracle<M> {
    pub fn new(model: M) -> Self {
        Self {
            model,
            budget: None,
            used: 0,
        }
    }

    pub fn with_budget(model: M, budget: usize) -> Self {
        Self {
            model,
            budget: Some(budget),
            used: 0,
        }
    }

    pub fn set_budget(&mut self, budget: Option<usize>) {
        self.budget = budget;
    }

    pub fn budget(&self) -> Option<usize> {
        self.budget
    }

    pub fn remaining(&self) -> Option<usize> {
        self.budget.map(|b| b.saturating_sub(self.used))
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn into_inner(self) -> M {
        self.model
    }
}

impl<M: LogitsModel> LogitsOracle for CountingOracle<M> {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn query(&mut self, x: &Image) -> Result<Vec<f64>> {
        if let Some(budget) = self.budget {
            if self.used >= budget {
                return Err(Error::BudgetExhausted { used: self.used });
            }
        }
        let logits = self.model.logits(x)?;
        if logits.len() != self.model.num_classes() {
            return Err(Error::Protocol(format!(
                "model returned {} logits, expected {}",
                logits.len(),
                self.model.num_classes()
            )));
        }
        self.used += 1;
        Ok(logits)
    }

    fn queries_used(&self) -> usize {
        self.used
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;

    struct Flaky {
        calls: usize,
    }

    impl LogitsModel for Flaky {
        fn num_classes(&self) -> usize {
            2
        }

        fn logits(&mut self, _x: &Image) -> Result<Vec<f64>> {
            self.calls += 1;
            if self.calls % 2 == 0 {
                Err(Error::OracleUnavailable("down".into()))
            } else {
                Ok(vec![1.0, 0.0])
            }
        }
    }

    #[test]
    fn budget_is_enforced_without_side_effects() {
        let x = Image::filled(Shape::new(1, 1, 1), 0.0);
        let mut o = CountingOracle::with_budget(Flaky { calls: 0 }, 1);
        assert!(o.query(&x).is_ok());
        assert_eq!(o.query(&x), Err(Error::BudgetExhausted { used: 1 }));
        assert_eq!(o.queries_used(), 1);
        assert_eq!(o.model().calls, 1, "model contacted past the budget");
    }

    #[test]
    fn failed_queries_are_not_counted() {
        let x = Image::filled(Shape::new(1, 1, 1), 0.0);
        let mut o = CountingOracle::new(Flaky { calls: 0 });
        assert!(o.query(&x).is_ok());
        assert!(o.query(&x).is_err());
        assert!(o.query(&x).is_ok());
        assert_eq!(o.queries_used(), 2);
    }
}
