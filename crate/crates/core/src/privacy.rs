//! Rényi-DP accounting for composed Gaussian mechanisms.
//!
//! Each DP-Adam step releases a sum of clipped gradients through a Gaussian
//! mechanism with sensitivity C and noise σ = z·C, costing
//! ε_RDP(α) = α·C²/(2σ²) = α/(2z²) at every tracked order α. Costs add over
//! steps; the (ε,δ) guarantee is the minimum over the order grid of
//! ε_RDP(α) − ln(δ)/(α−1).
//!
//! The ledger applies no subsampling amplification: each step is charged at
//! full cost, which upper-bounds the amplified account. The per-order step
//! cost is injected through [`RdpLedger::add_steps_with`], so an amplified
//! variant can plug in without touching the ledger.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("Rényi order {0} must exceed 1")]
    InvalidOrder(f64),
    #[error("order grid is empty")]
    EmptyGrid,
    #[error("order grids differ")]
    GridMismatch,
    #[error("sensitivity {0} must be non-negative")]
    InvalidSensitivity(f64),
    #[error("noise scale {0} must be non-negative")]
    InvalidSigma(f64),
    #[error("delta {0} must lie in (0,1)")]
    InvalidDelta(f64),
    #[error("epsilon {0} outside the (0,1) range of the classical Gaussian bound")]
    EpsilonOutOfRange(f64),
}

/// Rényi orders the ledger tracks by default. Dense below 8 because strong
/// noise pushes the optimal conversion order down.
pub const DEFAULT_ORDER_GRID: [f64; 15] = [
    1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0,
];

/// RDP cost of one Gaussian mechanism release at order `alpha`:
/// α·Δf²/(2σ²). A zero σ with positive sensitivity is an infinite cost and
/// is reported as such rather than as an error.
pub fn rdp_gaussian_step(alpha: f64, sensitivity: f64, sigma: f64) -> Result<f64, PrivacyError> {
    if alpha <= 1.0 {
        return Err(PrivacyError::InvalidOrder(alpha));
    }
    if sensitivity < 0.0 || !sensitivity.is_finite() {
        return Err(PrivacyError::InvalidSensitivity(sensitivity));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(PrivacyError::InvalidSigma(sigma));
    }
    if sensitivity == 0.0 {
        return Ok(0.0);
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(alpha * sensitivity * sensitivity / (2.0 * sigma * sigma))
}

/// Classical Gaussian calibration: σ = √(2·ln(1.25/δ))·Δf/ε, valid only for
/// ε in (0,1).
pub fn gaussian_sigma(sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64, PrivacyError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(PrivacyError::EpsilonOutOfRange(epsilon));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(PrivacyError::InvalidDelta(delta));
    }
    if sensitivity <= 0.0 || !sensitivity.is_finite() {
        return Err(PrivacyError::InvalidSensitivity(sensitivity));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() * sensitivity / epsilon)
}

/// Membership-advantage bound e^ε − 1. Values above 1 say nothing, since
/// advantage never exceeds 1; see [`advantage_bound_is_vacuous`].
pub fn advantage_bound(epsilon: f64) -> f64 {
    epsilon.exp_m1()
}

pub fn advantage_bound_is_vacuous(bound: f64) -> bool {
    bound > 1.0
}

/// An (ε, δ) guarantee together with the Rényi order that minimized it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub alpha: f64,
}

/// Parameters of a run of identical accounted steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepParams {
    /// Noise multiplier z (σ = z·C).
    pub noise_multiplier: f64,
    /// Clipping norm C (the mechanism's sensitivity).
    pub clip: f64,
    /// Batch sampling ratio B/n; recorded for the report, not used by the
    /// unamplified account.
    pub sampling_ratio: f64,
    pub count: usize,
}

/// Accumulated RDP cost across an order grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpLedger {
    orders: Vec<f64>,
    eps_rdp: Vec<f64>,
    steps: usize,
    history: Vec<StepParams>,
}

impl RdpLedger {
    pub fn new(mut orders: Vec<f64>) -> Result<Self, PrivacyError> {
        if orders.is_empty() {
            return Err(PrivacyError::EmptyGrid);
        }
        if let Some(&bad) = orders.iter().find(|&&a| !(a > 1.0) || !a.is_finite()) {
            return Err(PrivacyError::InvalidOrder(bad));
        }
        orders.sort_by(|a, b| a.partial_cmp(b).unwrap());
        orders.dedup();
        let n = orders.len();
        Ok(RdpLedger { orders, eps_rdp: vec![0.0; n], steps: 0, history: Vec::new() })
    }

    pub fn with_default_grid() -> Self {
        Self::new(DEFAULT_ORDER_GRID.to_vec()).expect("default grid is valid")
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn eps_rdp(&self) -> &[f64] {
        &self.eps_rdp
    }

    pub fn step_count(&self) -> usize {
        self.steps
    }

    pub fn history(&self) -> &[StepParams] {
        &self.history
    }

    /// Adds `count` identical steps whose per-order cost is `cost_at(α)`.
    /// The injection point for alternative per-step accounts.
    pub fn add_steps_with(
        &mut self,
        count: usize,
        params: StepParams,
        mut cost_at: impl FnMut(f64) -> Result<f64, PrivacyError>,
    ) -> Result<(), PrivacyError> {
        let per_order: Vec<f64> = self
            .orders
            .iter()
            .map(|&a| cost_at(a))
            .collect::<Result<_, _>>()?;
        for (acc, cost) in self.eps_rdp.iter_mut().zip(&per_order) {
            *acc += count as f64 * cost;
        }
        self.steps += count;
        if count > 0 {
            self.history.push(StepParams { count, ..params });
        }
        Ok(())
    }

    /// Charges `count` Gaussian steps with noise multiplier z and clip C.
    pub fn add_gaussian_steps(
        &mut self,
        count: usize,
        noise_multiplier: f64,
        clip: f64,
        sampling_ratio: f64,
    ) -> Result<(), PrivacyError> {
        let params = StepParams { noise_multiplier, clip, sampling_ratio, count };
        self.add_steps_with(count, params, |alpha| {
            rdp_gaussian_step(alpha, clip, noise_multiplier * clip)
        })
    }

    /// Adds externally computed per-order costs (one per grid order).
    pub fn compose_values(&mut self, per_order: &[f64]) -> Result<(), PrivacyError> {
        if per_order.len() != self.orders.len() {
            return Err(PrivacyError::GridMismatch);
        }
        for (acc, cost) in self.eps_rdp.iter_mut().zip(per_order) {
            *acc += cost;
        }
        self.steps += 1;
        Ok(())
    }

    /// Merges another ledger over the same grid.
    pub fn merge(&mut self, other: &RdpLedger) -> Result<(), PrivacyError> {
        if self.orders != other.orders {
            return Err(PrivacyError::GridMismatch);
        }
        for (acc, cost) in self.eps_rdp.iter_mut().zip(&other.eps_rdp) {
            *acc += cost;
        }
        self.steps += other.steps;
        self.history.extend_from_slice(&other.history);
        Ok(())
    }

    /// Best (ε, δ) over the grid: min_α [ε_RDP(α) − ln(δ)/(α−1)]. Ties keep
    /// the smallest order.
    pub fn to_dp(&self, delta: f64) -> Result<PrivacySpec, PrivacyError> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(PrivacyError::InvalidDelta(delta));
        }
        let ln_delta = delta.ln();
        let mut best: Option<(f64, f64)> = None;
        for (&alpha, &rdp) in self.orders.iter().zip(&self.eps_rdp) {
            let eps = rdp - ln_delta / (alpha - 1.0);
            if best.map_or(true, |(e, _)| eps < e) {
                best = Some((eps, alpha));
            }
        }
        let (epsilon, alpha) = best.expect("grid validated non-empty");
        Ok(PrivacySpec { epsilon, delta, alpha })
    }
}
