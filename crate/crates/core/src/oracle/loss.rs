use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Default hinge margin for the synthetic benchmarks.
pub const DEFAULT_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Untargeted { label: usize },
    Targeted { target: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub margin: f64,
}

impl LossSpec {
    pub fn untargeted(label: usize, margin: f64) -> Self {
        Self {
            kind: LossKind::Untargeted { label },
            margin,
        }
    }

    pub fn targeted(target: usize, margin: f64) -> Self {
        Self {
            kind: LossKind::Targeted { target },
            margin,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if num_classes < 2 {
            return Err(invalid("hinge loss needs at least two classes"));
        }
        if !(self.margin >= 0.0) {
            return Err(invalid(format!("margin must be >= 0, got {}", self.margin)));
        }
        let class = match self.kind {
            LossKind::Untargeted { label } => label,
            LossKind::Targeted { target } => target,
        };
        if class >= num_classes {
            return Err(invalid(format!(
                "class {class} out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }

    pub fn loss(&self, logits: &[f64]) -> Result<f64> {
        match self.kind {
            LossKind::Untargeted { label } => hinge_untargeted(logits, label, self.margin),
            LossKind::Targeted { target } => hinge_targeted(logits, target, self.margin),
        }
    }

    pub fn is_success(&self, logits: &[f64]) -> bool {
        check_success(logits, &self.kind)
    }
}

fn check_class(logits: &[f64], class: usize) -> Result<()> {
    if logits.len() < 2 {
        return Err(invalid("hinge loss needs at least two logits"));
    }
    if class >= logits.len() {
        return Err(invalid(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(())
}

/// `max{F_y - max_{j != y} F_j, -margin}`
pub fn hinge_untargeted(logits: &[f64], label: usize, margin: f64) -> Result<f64> {
    check_class(logits, label)?;
    let other = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((logits[label] - other).max(-margin))
}

/// `max{max_j F_j - F_q, -margin}`; the max runs over all classes, target included.
pub fn hinge_targeted(logits: &[f64], target: usize, margin: f64) -> Result<f64> {
    check_class(logits, target)?;
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((top - logits[target]).max(-margin))
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn check_success(logits: &[f64], kind: &LossKind) -> bool {
    if logits.is_empty() {
        return false;
    }
    match *kind {
        LossKind::Untargeted { label } => argmax(logits) != label,
        LossKind::Targeted { target } => argmax(logits) == target,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untargeted_examples() {
        assert_eq!(hinge_untargeted(&[3.0, 1.0, 1.0], 0, 0.05).unwrap(), 2.0);
        assert_eq!(hinge_untargeted(&[1.0, 3.0, 1.0], 0, 0.05).unwrap(), -0.05);
        assert!(hinge_untargeted(&[1.0], 0, 0.05).is_err());
        assert!(hinge_untargeted(&[1.0, 2.0], 2, 0.05).is_err());
    }

    #[test]
    fn targeted_examples() {
        assert_eq!(hinge_targeted(&[3.0, 1.0], 0, 0.05).unwrap(), 0.0);
        assert_eq!(hinge_targeted(&[1.0, 3.0], 0, 0.05).unwrap(), 2.0);
    }

    #[test]
    fn success_tie_rules() {
        let un = |y| LossKind::Untargeted { label: y };
        assert!(!check_success(&[5.0, 1.0, 2.0], &un(0)));
        assert!(check_success(&[1.0, 4.0], &LossKind::Targeted { target: 1 }));
        // tie between classes 0 and 2
        assert!(!check_success(&[3.0, 1.0, 3.0], &un(0)));
        assert!(check_success(&[3.0, 1.0, 3.0], &un(2)));
    }

    #[test]
    fn spec_validation() {
        assert!(LossSpec::untargeted(3, 0.05).validate(10).is_ok());
        assert!(LossSpec::untargeted(10, 0.05).validate(10).is_err());
        assert!(LossSpec::targeted(0, -1.0).validate(10).is_err());
        assert!(LossSpec::targeted(0, 0.1).validate(1).is_err());
    }
}
