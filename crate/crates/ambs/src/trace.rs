//! State traces and their bounded-safety semantics.

use crate::error::{Error, Result};
use crate::formula::{LabelSet, SafetyFormula};

/// A finite trace of `len()` steps: `states[0..=len]` with per-state
/// annotations. All per-state sequences have length `len() + 1`; `actions`
/// has length `len()` (`actions[t]` is taken at `states[t]`).
///
/// Conventions, shared by real episodes and imagined rollouts:
/// - `labels[i]` are the labels of `states[i]`; `None` for model-imagined
///   traces, where only predicted costs exist.
/// - `rewards[i]` is the reward observed on entering `states[i]`
///   (`rewards[0] = 0`).
/// - `costs[i]` is the cost of `states[i]` itself: `0` when the state
///   satisfies the safety formula, the cost value `C` otherwise.
/// - `continues[i]` is `1.0` while the episode is live at `states[i]`,
///   `0.0` once it has ended there.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Trace<S, A> {
    pub states: Vec<S>,
    pub actions: Vec<A>,
    pub labels: Option<Vec<LabelSet>>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub continues: Vec<f64>,
}

impl<S, A> Trace<S, A> {
    /// Number of steps (transitions). One less than the number of states.
    pub fn len(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.len() <= 1
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::precondition("trace has no states"));
        }
        if self.actions.len() != n - 1 {
            return Err(Error::precondition(format!(
                "trace has {n} states but {} actions",
                self.actions.len()
            )));
        }
        for (name, len) in [
            ("rewards", self.rewards.len()),
            ("costs", self.costs.len()),
            ("continues", self.continues.len()),
        ] {
            if len != n {
                return Err(Error::precondition(format!(
                    "trace has {n} states but {len} {name}"
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::precondition(format!(
                    "trace has {n} states but {} label sets",
                    labels.len()
                )));
            }
        }
        Ok(())
    }
}

/// Bounded safety: every state `states[0..=n]` satisfies `formula`,
/// index 0 included. Requires labels and at least `n + 1` states.
pub fn trace_satisfies<S, A>(trace: &Trace<S, A>, formula: &SafetyFormula, n: usize) -> Result<bool> {
    let labels = trace
        .labels
        .as_ref()
        .ok_or_else(|| Error::precondition("trace has no labels; cannot evaluate the formula"))?;
    if labels.len() < n + 1 {
        return Err(Error::precondition(format!(
            "horizon {n} needs {} states, trace has {}",
            n + 1,
            labels.len()
        )));
    }
    Ok(labels[..=n].iter().all(|&l| formula.eval(l)))
}

/// Cost of one state given its labels: `0` if the formula holds, `c` otherwise.
pub fn step_cost(labels: LabelSet, formula: &SafetyFormula, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::config(format!("cost value must be positive, got {c}")));
    }
    Ok(if formula.eval(labels) { 0.0 } else { c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::Atoms;

    fn simple() -> (Atoms, SafetyFormula) {
        let atoms = Atoms::new(&["hazard"]).unwrap();
        let f = SafetyFormula::parse("!hazard", &atoms).unwrap();
        (atoms, f)
    }

    fn trace_with_violation_at(idx: usize, len: usize) -> Trace<usize, usize> {
        let labels: Vec<LabelSet> = (0..=len)
            .map(|i| if i == idx { LabelSet::from_ids(&[0]) } else { LabelSet::EMPTY })
            .collect();
        Trace {
            states: (0..=len).collect(),
            actions: vec![0; len],
            labels: Some(labels),
            rewards: vec![0.0; len + 1],
            costs: vec![0.0; len + 1],
            continues: vec![1.0; len + 1],
        }
    }

    #[test]
    fn violation_at_index_three_splits_horizons() {
        let (_, f) = simple();
        let tr = trace_with_violation_at(3, 5);
        assert!(trace_satisfies(&tr, &f, 2).unwrap());
        assert!(!trace_satisfies(&tr, &f, 3).unwrap());
        assert!(!trace_satisfies(&tr, &f, 5).unwrap());
    }

    #[test]
    fn index_zero_counts() {
        let (_, f) = simple();
        let tr = trace_with_violation_at(0, 2);
        assert!(!trace_satisfies(&tr, &f, 0).unwrap());
        assert!(!trace_satisfies(&tr, &f, 2).unwrap());
    }

    #[test]
    fn horizon_beyond_trace_is_error() {
        let (_, f) = simple();
        let tr = trace_with_violation_at(0, 2);
        assert!(trace_satisfies(&tr, &f, 3).is_err());
    }

    #[test]
    fn unlabelled_trace_cannot_be_checked() {
        let (_, f) = simple();
        let mut tr = trace_with_violation_at(0, 2);
        tr.labels = None;
        assert!(trace_satisfies(&tr, &f, 1).is_err());
    }

    #[test]
    fn step_cost_values() {
        let (_, f) = simple();
        assert_eq!(step_cost(LabelSet::EMPTY, &f, 10.0).unwrap(), 0.0);
        assert_eq!(step_cost(LabelSet::from_ids(&[0]), &f, 10.0).unwrap(), 10.0);
        assert!(step_cost(LabelSet::EMPTY, &f, 0.0).is_err());
        assert!(step_cost(LabelSet::EMPTY, &f, -1.0).is_err());
    }

    #[test]
    fn validate_checks_lengths() {
        let tr = trace_with_violation_at(0, 3);
        tr.validate().unwrap();
        let mut bad = tr.clone();
        bad.rewards.pop();
        assert!(bad.validate().is_err());
        let mut bad = tr.clone();
        bad.actions.push(0);
        assert!(bad.validate().is_err());
    }
}
