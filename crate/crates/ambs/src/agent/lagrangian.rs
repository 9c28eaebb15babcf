//! Augmented-Lagrangian handling of the expected-cost constraint
//! `J_C(π) ≤ d`. Each update evaluates the penalty term at the current
//! multiplier estimate and grows the multiplier by the (clipped) constraint
//! violation:
//!
//!   g = J_C − d
//!   if λ + μ·g ≥ 0:  Ψ = λ·g + (μ/2)·g²,  ∂Ψ/∂J_C = λ + μ·g,  λ' = λ + μ·g
//!   else:            Ψ = −λ²/(2μ),        ∂Ψ/∂J_C = 0,        λ' = 0
//!
//! The two branches agree in value and derivative on the switching surface
//! λ + μ·g = 0, so the penalty is C¹ in g, and λ' ≥ 0 always.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the penalty weight μ grows between updates, via μ ← μ^{1+σ}.
///
/// For μ < 1 the power shrinks it, so both rules clip: `Capped` never lets μ
/// fall below its current value or exceed `cap` (a stable default), while
/// `PaperLiteral` jumps straight to `max(μ^{1+σ}, 1)` — aggressive, and the
/// behaviour the published schedule describes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum MuRule {
    Capped { cap: f64 },
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda: f64,
    pub mu: f64,
    /// Growth exponent σ in μ ← μ^{1+σ}.
    pub sigma: f64,
    /// Constraint threshold d.
    pub threshold: f64,
    pub rule: MuRule,
}

/// One evaluation of the penalty at the pre-update multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangianStep {
    /// Ψ(J_C; λ, μ).
    pub penalty: f64,
    /// ∂Ψ/∂J_C, the weight on the cost-return gradient term.
    pub coefficient: f64,
}

impl LagrangianState {
    pub fn new(lambda: f64, mu: f64, sigma: f64, threshold: f64, rule: MuRule) -> Result<Self> {
        let state = Self { lambda, mu, sigma, threshold, rule };
        state.validate()?;
        Ok(state)
    }

    /// The desk-scale default: λ = 0.01, μ = 5e-9, σ = 1e-6, capped at 1.
    pub fn with_defaults(threshold: f64) -> Self {
        Self {
            lambda: 0.01,
            mu: 5e-9,
            sigma: 1e-6,
            threshold,
            rule: MuRule::Capped { cap: 1.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("multiplier must be >= 0, got {}", self.lambda)));
        }
        if !(self.mu > 0.0) {
            return Err(Error::Config(format!("penalty weight must be > 0, got {}", self.mu)));
        }
        if !(self.sigma >= 0.0) || !self.threshold.is_finite() {
            return Err(Error::config("need growth exponent >= 0 and a finite threshold"));
        }
        if let MuRule::Capped { cap } = self.rule {
            if !(cap > 0.0) || self.mu > cap {
                return Err(Error::Config(format!(
                    "penalty weight {} exceeds its cap {cap}",
                    self.mu
                )));
            }
        }
        Ok(())
    }
}

/// Evaluate the penalty at the current multipliers, then update λ and μ in
/// place. Returns the step evaluated *before* the update, which is what the
/// policy gradient for this batch uses.
pub fn lagrangian_step(state: &mut LagrangianState, j_cost: f64) -> Result<LagrangianStep> {
    state.validate()?;
    if !j_cost.is_finite() {
        return Err(Error::Precondition(format!("cost estimate must be finite, got {j_cost}")));
    }
    let g = j_cost - state.threshold;
    let shifted = state.lambda + state.mu * g;
    let step = if shifted >= 0.0 {
        LagrangianStep {
            penalty: state.lambda * g + 0.5 * state.mu * g * g,
            coefficient: shifted,
        }
    } else {
        LagrangianStep { penalty: -state.lambda * state.lambda / (2.0 * state.mu), coefficient: 0.0 }
    };
    state.lambda = shifted.max(0.0);
    let grown = state.mu.powf(1.0 + state.sigma);
    state.mu = match state.rule {
        MuRule::Capped { cap } => grown.max(state.mu).min(cap),
        MuRule::PaperLiteral => grown.max(1.0),
    };
    Ok(step)
}
