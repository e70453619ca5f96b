//! Per-campaign online bidding policies.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::allocator::TrafficSlice;
use crate::error::{BidError, Result};
use crate::model::{to_bid_params, AccumStats, BidParams, Campaign, DualVars};
use crate::oracle::lp_optimal;
use crate::predictor::{remaining_response, PredictorModel};
use crate::solver::{solve, SolveFlags, SolverConfig};

/// What a controller emits at a tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickDecision {
    pub params: BidParams,
    /// Duals in effect. Controllers without duals report the equivalent
    /// `p = value_scale / alpha` (infinite for a flat bid).
    pub duals: DualVars,
    pub flags: SolveFlags,
    /// Previous parameters were kept because this tick's solve was unusable.
    pub held: bool,
}

impl TickDecision {
    fn plain(params: BidParams, campaign: &Campaign) -> Self {
        let p = if params.alpha > 0.0 {
            campaign.value_scale() / params.alpha
        } else {
            f64::INFINITY
        };
        Self {
            params,
            duals: DualVars::new(p, 0.0, 0.0),
            flags: SolveFlags::default(),
            held: false,
        }
    }
}

pub trait Controller: Send {
    fn name(&self) -> &'static str;

    /// Called at the start of `step` with stats accumulated before it.
    fn on_tick(&mut self, campaign: &Campaign, step: u32, acc: &AccumStats) -> Result<TickDecision>;

    /// Warnings raised so far (e.g. an unreachable lower CPC bound).
    fn warnings(&self) -> &[String] {
        &[]
    }
}

pub struct BicbController {
    model: Arc<dyn PredictorModel>,
    cfg: SolverConfig,
    warm: DualVars,
    last_good: Option<(BidParams, DualVars)>,
    warnings: Vec<String>,
}

pub fn bicb_controller(model: Arc<dyn PredictorModel>, cfg: SolverConfig) -> Result<BicbController> {
    cfg.validate()?;
    Ok(BicbController {
        model,
        cfg,
        warm: DualVars::default(),
        last_good: None,
        warnings: Vec::new(),
    })
}

impl BicbController {
    fn hold(&self, flags: SolveFlags, fallback: Option<(BidParams, DualVars)>) -> Option<TickDecision> {
        self.last_good.or(fallback).map(|(params, duals)| TickDecision {
            params,
            duals,
            flags,
            held: self.last_good.is_some(),
        })
    }
}

impl Controller for BicbController {
    fn name(&self) -> &'static str {
        "bicb"
    }

    fn on_tick(&mut self, campaign: &Campaign, step: u32, acc: &AccumStats) -> Result<TickDecision> {
        let resp = remaining_response(self.model.as_ref(), campaign, step, acc);
        let sol = match solve(resp.as_ref(), campaign, &self.warm, &self.cfg) {
            Ok(sol) => sol,
            Err(e @ BidError::BracketFailure { .. }) => {
                self.warnings.push(format!("step {step}: {e}"));
                let flags = SolveFlags {
                    degraded: true,
                    ..Default::default()
                };
                return self.hold(flags, None).ok_or(e);
            }
            Err(e) => return Err(e),
        };
        let params = to_bid_params(&sol.duals, campaign)?;
        if sol.flags.infeasible_lower || sol.flags.degraded {
            if sol.flags.infeasible_lower {
                self.warnings.push(format!(
                    "step {step}: lower CPC bound {} unreachable by auction allocation",
                    campaign.cpc_lower
                ));
            }
            if let Some(d) = self.hold(sol.flags, Some((params, sol.duals))) {
                return Ok(d);
            }
        }
        self.warm = sol.duals;
        if !sol.flags.infeasible_lower {
            self.last_good = Some((params, sol.duals));
        }
        Ok(TickDecision {
            params,
            duals: sol.duals,
            flags: sol.flags,
            held: false,
        })
    }

    fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 0.6,
            ki: 0.05,
            kd: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidConfig {
    pub pacing: PidGains,
    pub cpc: PidGains,
    /// Steps over which the CPC loop measures realized CPC.
    pub window: u32,
    /// Per-step spend weights of the reference schedule; empty means uniform.
    pub reference: Vec<f64>,
    /// Anti-windup bound on each integral term.
    pub integral_limit: f64,
    /// Bounds on the per-tick multiplicative change of alpha.
    pub min_factor: f64,
    pub max_factor: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub initial_alpha: f64,
}

impl Default for PidConfig {
    fn default() -> Self {
        Self {
            pacing: PidGains {
                kp: 0.4,
                ki: 0.02,
                kd: 0.0,
            },
            cpc: PidGains::default(),
            window: 3,
            reference: Vec::new(),
            integral_limit: 5.0,
            min_factor: 0.5,
            max_factor: 2.0,
            alpha_min: 1e-9,
            alpha_max: 1e9,
            initial_alpha: 1.0,
        }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64| v.is_finite();
        let gains_ok = [self.pacing, self.cpc]
            .iter()
            .all(|g| finite(g.kp) && finite(g.ki) && finite(g.kd));
        let ok = gains_ok
            && self.window >= 1
            && self.integral_limit >= 0.0
            && 0.0 < self.min_factor
            && self.min_factor <= 1.0
            && 1.0 <= self.max_factor
            && finite(self.max_factor)
            && 0.0 < self.alpha_min
            && self.alpha_min <= self.alpha_max
            && finite(self.alpha_max)
            && self.initial_alpha > 0.0
            && finite(self.initial_alpha)
            && self.reference.iter().all(|w| *w >= 0.0 && w.is_finite());
        if ok {
            Ok(())
        } else {
            Err(BidError::InvalidController(format!("invalid PID config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Loop {
    integral: f64,
    prev: Option<f64>,
}

impl Loop {
    fn update(&mut self, g: &PidGains, e: f64, limit: f64) -> f64 {
        self.integral = (self.integral + e).clamp(-limit, limit);
        let de = self.prev.map_or(0.0, |p| e - p);
        self.prev = Some(e);
        g.kp * e + g.ki * self.integral + g.kd * de
    }
}

/// Budget pacing plus CPC correction, both acting multiplicatively on alpha.
pub struct PidController {
    cfg: PidConfig,
    alpha: f64,
    pacing: Loop,
    cpc: Loop,
    /// Accumulated stats at the last `window` ticks.
    history: VecDeque<AccumStats>,
}

pub fn pid_controller(cfg: PidConfig) -> Result<PidController> {
    cfg.validate()?;
    Ok(PidController {
        alpha: cfg.initial_alpha.clamp(cfg.alpha_min, cfg.alpha_max),
        cfg,
        pacing: Loop::default(),
        cpc: Loop::default(),
        history: VecDeque::new(),
    })
}

impl PidController {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Fraction of the budget the reference schedule has spent after
    /// `elapsed` of `n` steps.
    fn reference_fraction(&self, elapsed: u32, n: u32) -> f64 {
        let w = &self.cfg.reference;
        if w.is_empty() {
            return elapsed as f64 / n as f64;
        }
        let total: f64 = w.iter().take(n as usize).sum();
        if total <= 0.0 {
            return elapsed as f64 / n as f64;
        }
        w.iter().take(elapsed as usize).sum::<f64>() / total
    }
}

impl Controller for PidController {
    fn name(&self) -> &'static str {
        "pid"
    }

    fn on_tick(&mut self, campaign: &Campaign, step: u32, acc: &AccumStats) -> Result<TickDecision> {
        let n = campaign.n_steps();
        let elapsed = step.saturating_sub(campaign.start_step).min(n);
        let mut factor = 1.0;

        if elapsed > 0 && campaign.budget > 0.0 {
            let per_step = campaign.budget / n as f64;
            let target = campaign.budget * self.reference_fraction(elapsed, n);
            let e = (target - acc.cost) / per_step;
            let u = self.pacing.update(&self.cfg.pacing, e, self.cfg.integral_limit);
            factor = 1.0 + u;

            let oldest = self.history.front().copied().unwrap_or_default();
            let window_cost = acc.cost - oldest.cost;
            let window_clicks = acc.clicks - oldest.clicks;
            if window_clicks > 0.0 {
                let cpc = window_cost / window_clicks;
                if campaign.has_upper() && cpc > campaign.cpc_upper {
                    let e = (campaign.cpc_upper - cpc) / campaign.cpc_upper;
                    let f = 1.0 + self.cpc.update(&self.cfg.cpc, e, self.cfg.integral_limit);
                    factor = factor.min(f);
                } else if campaign.has_lower() && cpc < campaign.cpc_lower {
                    let e = (campaign.cpc_lower - cpc) / campaign.cpc_lower;
                    let f = 1.0 + self.cpc.update(&self.cfg.cpc, e, self.cfg.integral_limit);
                    factor = factor.max(f);
                } else {
                    self.cpc = Loop::default();
                }
            }
            factor = factor.clamp(self.cfg.min_factor, self.cfg.max_factor);
        }

        self.history.push_back(*acc);
        while self.history.len() > self.cfg.window as usize {
            self.history.pop_front();
        }
        self.alpha = (self.alpha * factor).clamp(self.cfg.alpha_min, self.cfg.alpha_max);
        Ok(TickDecision::plain(
            BidParams {
                alpha: self.alpha,
                beta: 0.0,
            },
            campaign,
        ))
    }
}

/// Duals solved once on historical traffic and replayed unchanged.
pub struct FixedController {
    name: &'static str,
    decision: TickDecision,
}

pub fn online_lp_controller(history: &TrafficSlice, campaign: &Campaign, cfg: &SolverConfig) -> Result<FixedController> {
    if history.is_empty() {
        return Err(BidError::EmptyHistory);
    }
    let lp = lp_optimal(history, campaign, cfg)?;
    let params = to_bid_params(&lp.duals, campaign)?;
    Ok(FixedController {
        name: "online_lp",
        decision: TickDecision {
            params,
            duals: lp.duals,
            flags: SolveFlags::default(),
            held: false,
        },
    })
}

/// Flat bid on every impression.
pub fn manual_controller(bid: f64) -> Result<FixedController> {
    if !(bid > 0.0 && bid.is_finite()) {
        return Err(BidError::InvalidController(format!("manual bid must be positive and finite, got {bid}")));
    }
    let params = BidParams { alpha: 0.0, beta: bid };
    Ok(FixedController {
        name: "manual",
        decision: TickDecision {
            params,
            duals: DualVars::new(f64::INFINITY, 0.0, 0.0),
            flags: SolveFlags::default(),
            held: false,
        },
    })
}

impl Controller for FixedController {
    fn name(&self) -> &'static str {
        self.name
    }

    fn on_tick(&mut self, _: &Campaign, _: u32, _: &AccumStats) -> Result<TickDecision> {
        Ok(self.decision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::{replay, ReplayMode};
    use crate::model::Impression;
    use crate::predictor::oracle_predictor;

    fn camp() -> Campaign {
        Campaign::budget_only("c", 10.0, 0, 47)
    }

    #[test]
    fn pid_holds_alpha_on_zero_error() {
        let c = camp();
        let mut pid = pid_controller(PidConfig {
            initial_alpha: 2.0,
            ..Default::default()
        })
        .unwrap();
        let first = pid.on_tick(&c, 0, &AccumStats::default()).unwrap();
        assert_eq!(first.params, BidParams { alpha: 2.0, beta: 0.0 });
        // exactly on the uniform reference after 4 steps
        let acc = AccumStats {
            cost: 10.0 * 4.0 / 48.0,
            ..Default::default()
        };
        let d = pid.on_tick(&c, 4, &acc).unwrap();
        assert!((d.params.alpha - 2.0).abs() < 1e-12);
        assert!((d.duals.p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pid_p_only_update_rule() {
        let c = camp();
        let gains = PidGains { kp: 1.0, ki: 0.0, kd: 0.0 };
        let mut pid = pid_controller(PidConfig {
            pacing: gains,
            initial_alpha: 1.0,
            ..Default::default()
        })
        .unwrap();
        // reference after 6 steps is 1.25; spent 1.0 → e = 0.25 / (10/48) = 1.2
        let acc = AccumStats { cost: 1.0, ..Default::default() };
        let d = pid.on_tick(&c, 6, &acc).unwrap();
        let e: f64 = (10.0 * 6.0 / 48.0 - 1.0) / (10.0 / 48.0);
        assert!((d.params.alpha - (1.0 + e).min(2.0)).abs() < 1e-12);
        let mut pid = pid_controller(PidConfig {
            pacing: gains,
            max_factor: 10.0,
            ..Default::default()
        })
        .unwrap();
        let d = pid.on_tick(&c, 6, &acc).unwrap();
        assert!((d.params.alpha - (1.0 + e)).abs() < 1e-12);
    }

    #[test]
    fn pid_cpc_loop_lowers_alpha_above_upper_bound() {
        let c = Campaign::with_cpc("c", 10.0, 1.0, 0.0, 0, 47);
        let mut pid = pid_controller(PidConfig::default()).unwrap();
        pid.on_tick(&c, 0, &AccumStats::default()).unwrap();
        // on pace but CPC = 2
        let acc = AccumStats {
            cost: 10.0 / 48.0,
            clicks: 10.0 / 96.0,
            ..Default::default()
        };
        let d = pid.on_tick(&c, 1, &acc).unwrap();
        assert!(d.params.alpha < 1.0);
    }

    #[test]
    fn pid_config_validation() {
        assert!(pid_controller(PidConfig { window: 0, ..Default::default() }).is_err());
        assert!(pid_controller(PidConfig { initial_alpha: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn manual_threshold_and_validation() {
        let imps = [
            Impression::new(0, 0.5, 0.5, 1.0).unwrap(),
            Impression::new(0, 0.5, 1.0, 1.0).unwrap(),
            Impression::new(0, 0.5, 1.5, 1.0).unwrap(),
        ];
        let mut m = manual_controller(1.0).unwrap();
        let d = m.on_tick(&camp(), 0, &AccumStats::default()).unwrap();
        let won: Vec<bool> = imps.iter().map(|i| d.params.wins(i)).collect();
        assert_eq!(won, vec![true, false, false]);
        let mut cheap = manual_controller(0.01).unwrap();
        let d = cheap.on_tick(&camp(), 0, &AccumStats::default()).unwrap();
        assert!(imps.iter().all(|i| !d.params.wins(i)));
        assert!(manual_controller(0.0).is_err());
        assert!(manual_controller(-1.0).is_err());
        assert!(manual_controller(f64::INFINITY).is_err());
        assert!(manual_controller(f64::NAN).is_err());
    }

    fn day() -> TrafficSlice {
        let imps = (0..200)
            .map(|i| {
                let u = (i as f64 * 0.618_033_988_7).fract();
                Impression::new(i % 4, 0.05 + 0.3 * u, 0.2 + u, 0.1 + u).unwrap()
            })
            .collect();
        TrafficSlice::from_steps(imps, 4).unwrap()
    }

    #[test]
    fn online_lp_self_history_and_empty() {
        let s = day();
        let c = Campaign::budget_only("c", 3.0, 0, 3);
        let cfg = SolverConfig::default();
        let mut ol = online_lp_controller(&s, &c, &cfg).unwrap();
        let d = ol.on_tick(&c, 0, &AccumStats::default()).unwrap();
        let got = replay(&s, &d.duals, &c, ReplayMode::HardBudgetStop).unwrap();
        let lp = lp_optimal(&s, &c, &cfg).unwrap();
        assert!(got.value <= lp.value + 1e-9);
        assert!(lp.value - got.value <= 2.0 * s.max_obj() + 1e-9);
        let empty = TrafficSlice::from_steps(vec![], 4).unwrap();
        assert!(matches!(online_lp_controller(&empty, &c, &cfg), Err(BidError::EmptyHistory)));
    }

    #[test]
    fn bicb_oracle_bcb_has_no_cpc_duals_and_stable_first_tick() {
        let s = day();
        let c = Campaign::budget_only("c", 3.0, 0, 3);
        let cfg = SolverConfig::default();
        let mut b = bicb_controller(Arc::new(oracle_predictor(s.clone())), cfg).unwrap();
        let d = b.on_tick(&c, 0, &AccumStats::default()).unwrap();
        assert_eq!(d.duals.q_u, 0.0);
        assert_eq!(d.duals.q_l, 0.0);
        assert!(d.params.alpha.is_finite() && d.params.beta.is_finite());
        let full = replay(&s, &d.duals, &c, ReplayMode::Unconstrained).unwrap();
        assert!(full.cost <= c.budget);
    }

    #[test]
    fn bicb_zero_future_spends_now() {
        let empty = TrafficSlice::from_steps(vec![], 4).unwrap();
        let c = Campaign::budget_only("c", 3.0, 0, 3);
        let mut b = bicb_controller(Arc::new(oracle_predictor(empty)), SolverConfig::default()).unwrap();
        let d = b.on_tick(&c, 0, &AccumStats::default()).unwrap();
        assert!(d.duals.p <= SolverConfig::default().dual_floor * 1.0001);
        assert!(d.params.alpha.is_finite());
    }
}
