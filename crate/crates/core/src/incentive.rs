//! Pricing game between the service provider (VSP) and the user.
//!
//! The VSP sells perception plus generation at price `v_r` per unit QoS plus a
//! base fee `I_b`, and allocates its resource budget to maximize its own
//! utility. The user picks the pricing that maximizes their utility subject to
//! the VSP staying above its utility threshold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `scale * x / (half_saturation + x)` for `x > 0`, zero otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaturatingCurve {
    pub scale: f64,
    pub half_saturation: f64,
}

impl SaturatingCurve {
    pub fn value(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            self.scale * x / (self.half_saturation + x)
        }
    }

    /// Curve through `(x1, y1)` and `(x2, y2)`.
    pub fn through(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        // y (b + x) = a x at both points.
        let den = x2 * y1 - x1 * y2;
        if den == 0.0 {
            return Err(Error::InvalidArgument("calibration points do not define a saturating curve".into()));
        }
        let b = x1 * x2 * (y2 - y1) / den;
        let a = y1 * (b + x1) / x1;
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::InvalidArgument("calibration points do not define a saturating curve".into()));
        }
        Ok(Self {
            scale: a,
            half_saturation: b,
        })
    }

    /// Curve with a given half-saturation point passing through `(x, y)`.
    pub fn with_half_saturation(half_saturation: f64, x: f64, y: f64) -> Self {
        Self {
            scale: y * (half_saturation + x) / x,
            half_saturation,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.scale >= 0.0 && self.half_saturation > 0.0 && self.scale.is_finite() && self.half_saturation.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{name}: scale must be >= 0 and half_saturation > 0"
            )));
        }
        Ok(())
    }
}

/// Perception accuracy vs APs used and image-quality gains vs inference steps.
///
/// The quality curves take the number of inference steps beyond the first,
/// so a single step yields zero improvement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QosMappings {
    pub perception: SaturatingCurve,
    pub brisque: SaturatingCurve,
    pub tv: SaturatingCurve,
}

/// Half-saturation (in extra steps) of the image-quality curves.
pub const QUALITY_HALF_SATURATION: f64 = 2.0;

impl Default for QosMappings {
    fn default() -> Self {
        Self::calibrated()
    }
}

impl QosMappings {
    /// Accuracy 5.7 at 1 AP and 23.5 at 5 APs; BRISQUE 55 -> 3 and TV 78 -> 32
    /// between 1 and 10 inference steps.
    pub fn calibrated() -> Self {
        Self {
            perception: SaturatingCurve::through(1.0, 5.7, 5.0, 23.5).expect("valid calibration"),
            brisque: SaturatingCurve::with_half_saturation(QUALITY_HALF_SATURATION, 9.0, 55.0 - 3.0),
            tv: SaturatingCurve::with_half_saturation(QUALITY_HALF_SATURATION, 9.0, 78.0 - 32.0),
        }
    }

    pub fn zero() -> Self {
        let z = SaturatingCurve {
            scale: 0.0,
            half_saturation: 1.0,
        };
        Self {
            perception: z,
            brisque: z,
            tv: z,
        }
    }

    pub fn perception_accuracy(&self, aps: u32) -> f64 {
        self.perception.value(aps as f64)
    }

    pub fn brisque_gain(&self, steps: u32) -> f64 {
        self.brisque.value(steps.saturating_sub(1) as f64)
    }

    pub fn tv_gain(&self, steps: u32) -> f64 {
        self.tv.value(steps.saturating_sub(1) as f64)
    }
}

/// Resource units consumed per AP, by skeleton extraction and per inference step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResourceCosts {
    pub per_ap: u32,
    pub skeleton: u32,
    pub per_step: u32,
}

impl Default for ResourceCosts {
    fn default() -> Self {
        Self {
            per_ap: 2,
            skeleton: 1,
            per_step: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvState {
    pub mappings: QosMappings,
    /// Cost per resource unit.
    pub v_c: f64,
    /// User gain per unit QoS.
    pub v_m: f64,
    /// Total resource units.
    pub e_t: u32,
    /// VSP utility threshold.
    pub u_th: f64,
    /// APs available for perception.
    pub max_aps: u32,
    #[serde(default)]
    pub costs: ResourceCosts,
}

impl Default for EnvState {
    fn default() -> Self {
        Self::economy_default()
    }
}

impl EnvState {
    pub fn economy_default() -> Self {
        Self {
            mappings: QosMappings::calibrated(),
            v_c: 60.0,
            v_m: 60.0,
            e_t: 100,
            u_th: 2900.0,
            max_aps: 6,
            costs: ResourceCosts::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_c > 0.0 && self.v_c.is_finite()) {
            return Err(Error::InvalidArgument("v_c must be positive".into()));
        }
        if !(self.v_m > 0.0 && self.v_m.is_finite()) {
            return Err(Error::InvalidArgument("v_m must be positive".into()));
        }
        if !(self.u_th >= 0.0 && self.u_th.is_finite()) {
            return Err(Error::InvalidArgument("u_th must be non-negative".into()));
        }
        if self.costs.per_ap == 0 || self.costs.per_step == 0 {
            return Err(Error::InvalidArgument("per-AP and per-step costs must be positive".into()));
        }
        self.mappings.perception.validate("perception")?;
        self.mappings.brisque.validate("brisque")?;
        self.mappings.tv.validate("tv")
    }

    /// Allocation for a given AP count and step count (no budget check).
    pub fn allocation(&self, aps: u32, steps: u32) -> Allocation {
        let chi_s = if aps == 0 {
            0
        } else {
            aps * self.costs.per_ap + self.costs.skeleton
        };
        Allocation {
            chi_s,
            chi_ag: steps * self.costs.per_step,
        }
    }

    pub fn aps_for(&self, chi_s: u32) -> u32 {
        chi_s.saturating_sub(self.costs.skeleton) / self.costs.per_ap
    }

    pub fn steps_for(&self, chi_ag: u32) -> u32 {
        chi_ag / self.costs.per_step
    }

    /// Every budget-feasible quantized allocation, AP count outer, steps inner.
    pub fn allocations(&self) -> Vec<Allocation> {
        let mut out = Vec::new();
        for aps in 0..=self.max_aps {
            let chi_s = self.allocation(aps, 0).chi_s;
            if chi_s > self.e_t {
                break;
            }
            for steps in 0..=(self.e_t - chi_s) / self.costs.per_step {
                out.push(self.allocation(aps, steps));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricingStrategy {
    pub v_r: f64,
    pub i_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Allocation {
    pub chi_s: u32,
    pub chi_ag: u32,
}

impl Allocation {
    pub fn total(&self) -> u32 {
        self.chi_s + self.chi_ag
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Qos {
    pub q_s: f64,
    pub q_ag: f64,
    pub q_t: f64,
}

pub fn total_qos(alloc: &Allocation, env: &EnvState) -> Qos {
    let m = &env.mappings;
    let steps = env.steps_for(alloc.chi_ag);
    let q_s = m.perception_accuracy(env.aps_for(alloc.chi_s));
    let q_ag = m.brisque_gain(steps) + m.tv_gain(steps);
    Qos {
        q_s,
        q_ag,
        q_t: q_s + q_ag,
    }
}

pub fn vsp_utility_from(s: &PricingStrategy, q_t: f64, units: u32, v_c: f64) -> f64 {
    s.v_r * q_t + s.i_b - units as f64 * v_c
}

pub fn user_utility_from(s: &PricingStrategy, q_t: f64, v_m: f64) -> f64 {
    (v_m - s.v_r) * q_t - s.i_b
}

pub fn vsp_utility(s: &PricingStrategy, alloc: &Allocation, env: &EnvState) -> f64 {
    vsp_utility_from(s, total_qos(alloc, env).q_t, alloc.total(), env.v_c)
}

pub fn user_utility(s: &PricingStrategy, alloc: &Allocation, env: &EnvState) -> f64 {
    user_utility_from(s, total_qos(alloc, env).q_t, env.v_m)
}

/// `a` beats `b` for the VSP: higher utility, then fewer units, then more perception units.
fn better_response(a: (f64, &Allocation), b: (f64, &Allocation)) -> bool {
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    if a.1.total() != b.1.total() {
        return a.1.total() < b.1.total();
    }
    a.1.chi_s > b.1.chi_s
}

/// VSP utility-maximizing allocation for the given pricing.
pub fn vsp_best_response(s: &PricingStrategy, env: &EnvState) -> Allocation {
    let mut best = Allocation { chi_s: 0, chi_ag: 0 };
    let mut best_u = vsp_utility(s, &best, env);
    for alloc in env.allocations() {
        let u = vsp_utility(s, &alloc, env);
        if better_response((u, &alloc), (best_u, &best)) {
            best = alloc;
            best_u = u;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PricingGrid {
    pub v_r_max: f64,
    pub v_r_step: f64,
    pub i_b_max: f64,
    pub i_b_step: f64,
}

impl Default for PricingGrid {
    fn default() -> Self {
        Self {
            v_r_max: 60.0,
            v_r_step: 0.5,
            i_b_max: 30.0,
            i_b_step: 0.5,
        }
    }
}

impl PricingGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_r_step > 0.0 && self.i_b_step > 0.0 && self.v_r_max >= 0.0 && self.i_b_max >= 0.0) {
            return Err(Error::InvalidArgument("pricing grid needs positive steps and non-negative maxima".into()));
        }
        Ok(())
    }

    pub fn v_r_values(&self) -> Vec<f64> {
        let n = (self.v_r_max / self.v_r_step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| i as f64 * self.v_r_step).collect()
    }

    pub fn i_b_values(&self) -> Vec<f64> {
        let n = (self.i_b_max / self.i_b_step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| i as f64 * self.i_b_step).collect()
    }
}

/// One point of the pricing game with everything needed to audit it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameOutcome {
    pub strategy: PricingStrategy,
    pub allocation: Allocation,
    pub q_t: f64,
    pub u_vsp: f64,
    pub u_us: f64,
}

impl GameOutcome {
    /// Let the VSP best-respond to `strategy` and score the result.
    pub fn play(strategy: PricingStrategy, env: &EnvState) -> Self {
        let allocation = vsp_best_response(&strategy, env);
        Self::evaluate(strategy, allocation, env)
    }

    pub fn evaluate(strategy: PricingStrategy, allocation: Allocation, env: &EnvState) -> Self {
        let q_t = total_qos(&allocation, env).q_t;
        Self {
            strategy,
            allocation,
            q_t,
            u_vsp: vsp_utility_from(&strategy, q_t, allocation.total(), env.v_c),
            u_us: user_utility_from(&strategy, q_t, env.v_m),
        }
    }

    pub fn feasible(&self, env: &EnvState) -> bool {
        self.u_vsp >= env.u_th
    }
}

/// Maximize the user's utility over the pricing grid subject to the VSP best
/// responding and meeting its threshold. `None` when no grid point is feasible.
/// Ties go to the lowest grid index (`v_r` outer, `I_b` inner).
pub fn oracle_optimal_pricing(env: &EnvState, grid: &PricingGrid) -> Result<Option<GameOutcome>> {
    env.validate()?;
    grid.validate()?;
    let ibs = grid.i_b_values();
    // The best response does not depend on I_b, so solve it once per price.
    let per_vr: Vec<Option<(usize, GameOutcome)>> = grid
        .v_r_values()
        .par_iter()
        .enumerate()
        .map(|(i, &v_r)| {
            let alloc = vsp_best_response(&PricingStrategy { v_r, i_b: 0.0 }, env);
            let mut best: Option<(usize, GameOutcome)> = None;
            for (j, &i_b) in ibs.iter().enumerate() {
                let out = GameOutcome::evaluate(PricingStrategy { v_r, i_b }, alloc, env);
                if out.feasible(env) && best.as_ref().is_none_or(|(_, b)| out.u_us > b.u_us) {
                    best = Some((i * ibs.len() + j, out));
                }
            }
            best
        })
        .collect();
    let mut best: Option<(usize, GameOutcome)> = None;
    for cand in per_vr.into_iter().flatten() {
        if best.as_ref().is_none_or(|(_, b)| cand.1.u_us > b.u_us) {
            best = Some(cand);
        }
    }
    Ok(best.map(|(_, o)| o))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    BelowThreshold,
    OverBudget,
    NotBestResponse,
    NegativePrice,
    InvalidAllocation,
}

/// Check an outcome against the bilevel problem's constraints.
pub fn audit(outcome: &GameOutcome, env: &EnvState) -> Vec<Violation> {
    let mut v = Vec::new();
    let recomputed = GameOutcome::evaluate(outcome.strategy, outcome.allocation, env);
    if recomputed.u_vsp < env.u_th {
        v.push(Violation::BelowThreshold);
    }
    if outcome.allocation.total() > env.e_t {
        v.push(Violation::OverBudget);
    }
    if !env.allocations().contains(&outcome.allocation) && outcome.allocation != (Allocation { chi_s: 0, chi_ag: 0 }) {
        v.push(Violation::InvalidAllocation);
    }
    let br = vsp_best_response(&outcome.strategy, env);
    if vsp_utility(&outcome.strategy, &br, env) > recomputed.u_vsp {
        v.push(Violation::NotBestResponse);
    }
    if outcome.strategy.v_r < 0.0 || outcome.strategy.i_b < 0.0 {
        v.push(Violation::NegativePrice);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_points() {
        let m = QosMappings::calibrated();
        assert!((m.perception_accuracy(1) - 5.7).abs() < 1e-12);
        assert!((m.perception_accuracy(5) - 23.5).abs() < 1e-12);
        assert!((m.brisque_gain(10) - 52.0).abs() < 1e-12);
        assert!((m.tv_gain(10) - 46.0).abs() < 1e-12);
        assert_eq!(m.brisque_gain(1), 0.0);
        assert_eq!(m.perception_accuracy(0), 0.0);
    }

    #[test]
    fn zero_allocation_has_zero_qos() {
        let env = EnvState::economy_default();
        let q = total_qos(&Allocation { chi_s: 0, chi_ag: 0 }, &env);
        assert_eq!(q.q_t, 0.0);
    }

    #[test]
    fn utility_arithmetic() {
        let s = PricingStrategy { v_r: 2.0, i_b: 5.0 };
        assert_eq!(vsp_utility_from(&s, 10.0, 4, 1.0), 21.0);
        let s = PricingStrategy { v_r: 35.0, i_b: 13.0 };
        assert_eq!(user_utility_from(&s, 26.0, 40.0), 117.0);
        let s = PricingStrategy { v_r: 40.0, i_b: 13.0 };
        assert_eq!(user_utility_from(&s, 26.0, 40.0), -13.0);
        let env = EnvState::economy_default();
        let zero = Allocation { chi_s: 0, chi_ag: 0 };
        assert_eq!(vsp_utility(&s, &zero, &env), 13.0);
        assert_eq!(user_utility(&s, &zero, &env), -13.0);
    }

    #[test]
    fn empty_budget_best_response() {
        let mut env = EnvState::economy_default();
        env.e_t = 0;
        let a = vsp_best_response(&PricingStrategy { v_r: 50.0, i_b: 0.0 }, &env);
        assert_eq!(a, Allocation { chi_s: 0, chi_ag: 0 });
    }

    #[test]
    fn allocation_quantization() {
        let env = EnvState::economy_default();
        assert_eq!(env.allocation(3, 4), Allocation { chi_s: 7, chi_ag: 8 });
        assert_eq!(env.aps_for(7), 3);
        assert_eq!(env.aps_for(0), 0);
        assert!(env.allocations().iter().all(|a| a.total() <= env.e_t));
    }

    #[test]
    fn degenerate_zero_mappings() {
        let mut env = EnvState::economy_default();
        env.mappings = QosMappings::zero();
        env.u_th = 12.0;
        let out = oracle_optimal_pricing(&env, &PricingGrid::default()).unwrap().unwrap();
        assert_eq!(out.strategy.i_b, 12.0);
        assert_eq!(out.u_us, -12.0);
        assert_eq!(out.allocation.total(), 0);
        env.u_th = 31.0;
        assert!(oracle_optimal_pricing(&env, &PricingGrid::default()).unwrap().is_none());
    }

    #[test]
    fn default_economy_in_sanity_band() {
        let env = EnvState::economy_default();
        let out = oracle_optimal_pricing(&env, &PricingGrid::default()).unwrap().unwrap();
        assert!((30.0..=50.0).contains(&out.strategy.v_r), "{out:?}");
        assert!((10.0..=20.0).contains(&out.strategy.i_b), "{out:?}");
        assert!(audit(&out, &env).is_empty());
    }

    #[test]
    fn curve_through_points() {
        let c = SaturatingCurve::through(2.0, 3.0, 6.0, 5.0).unwrap();
        assert!((c.value(2.0) - 3.0).abs() < 1e-12);
        assert!((c.value(6.0) - 5.0).abs() < 1e-12);
        assert!(SaturatingCurve::through(1.0, 1.0, 2.0, 2.0).is_err());
    }
}
