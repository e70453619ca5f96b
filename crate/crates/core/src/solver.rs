//! Nested-bisection search for the optimal duals `(p, q_u, q_l)`.
//!
//! The inner loop computes `P(q)`, the smallest budget multiplier whose
//! response fits the budget for a fixed CPC multiplier `q`. The outer loop
//! bisects the signed `q` on the sign of the CPC gap
//! `g(q) = cost(P(q), q) − C·click(P(q), q)`, which is nonincreasing in `q`.
//! At most one of `q_u`, `q_l` is ever nonzero.
//!
//! Responses built from discrete traffic are step functions, so exact
//! equalities are generally unattainable: the solver always returns the point
//! on the constraint-satisfying side of the final bracket, together with its
//! neighbour on the violating side when a CPC constraint binds.

use std::cell::{Cell, RefCell};

use serde::{Deserialize, Serialize};

use crate::allocator::{replay_impressions, ReplayMode, SmoothedReplay};
use crate::error::{BidError, Result};
use crate::index::{IndexCursor, TrafficIndex};
use crate::model::{Campaign, DualVars, Impression};

/// Predicted whole-horizon totals for a set of duals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub cost: f64,
    pub clicks: f64,
}

impl Totals {
    pub fn cpc(&self) -> f64 {
        if self.clicks > 0.0 {
            self.cost / self.clicks
        } else {
            0.0
        }
    }
}

/// Deterministic evaluator of the remaining-horizon cost and clicks.
pub trait ResponseFn {
    fn totals(&self, duals: &DualVars) -> Result<Totals>;
}

impl<F> ResponseFn for F
where
    F: Fn(&DualVars) -> Result<Totals>,
{
    fn totals(&self, duals: &DualVars) -> Result<Totals> {
        self(duals)
    }
}

/// Exact response of known traffic (the "time machine").
pub struct ReplayResponse<'a> {
    pub impressions: &'a [Impression],
    pub campaign: &'a Campaign,
}

impl ResponseFn for ReplayResponse<'_> {
    fn totals(&self, duals: &DualVars) -> Result<Totals> {
        let s = replay_impressions(self.impressions, duals, self.campaign, ReplayMode::Unconstrained)?;
        Ok(Totals {
            cost: s.cost,
            clicks: s.clicks,
        })
    }
}

/// Continuous response, see [`SmoothedReplay`].
pub struct SmoothedResponse<'a> {
    pub inner: SmoothedReplay<'a>,
    pub campaign: &'a Campaign,
}

impl ResponseFn for SmoothedResponse<'_> {
    fn totals(&self, duals: &DualVars) -> Result<Totals> {
        let (cost, clicks) = self.inner.totals(duals, self.campaign)?;
        Ok(Totals { cost, clicks })
    }
}

/// Exact replay response over a [`TrafficIndex`]: `base + weight · replay`.
/// Agrees with [`ReplayResponse`] up to summation order.
pub struct IndexedResponse<'a> {
    index: TrafficIndex,
    weight: f64,
    base: Totals,
    campaign: &'a Campaign,
    cursor: RefCell<IndexCursor>,
}

impl<'a> IndexedResponse<'a> {
    pub fn new(index: TrafficIndex, weight: f64, base: Totals, campaign: &'a Campaign) -> Self {
        Self {
            index,
            weight,
            base,
            campaign,
            cursor: RefCell::new(IndexCursor::default()),
        }
    }
}

impl ResponseFn for IndexedResponse<'_> {
    fn totals(&self, duals: &DualVars) -> Result<Totals> {
        let d = duals.denominator();
        if !(d > 0.0 && d.is_finite()) {
            return Err(BidError::DegenerateDuals(d));
        }
        let t = self.index.totals_from(
            self.campaign.value_scale(),
            duals.offset(self.campaign),
            d,
            &mut self.cursor.borrow_mut(),
        );
        Ok(Totals {
            cost: self.base.cost + self.weight * t.cost,
            clicks: self.base.clicks + self.weight * t.clicks,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Upper end of every bisection bracket.
    pub big_m: f64,
    /// Residual tolerance as a fraction of the budget.
    pub eps_residual: f64,
    /// Relative bracket width at which a bisection stops.
    pub bracket_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Lower limit on `p + q_u − q_l`.
    pub dual_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            big_m: 1e6,
            eps_residual: 1e-6,
            bracket_tol: 1e-10,
            max_outer: 64,
            max_inner: 64,
            dual_floor: 1e-9,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.big_m > 0.0
            && self.eps_residual > 0.0
            && self.bracket_tol > 0.0
            && self.dual_floor > 0.0
            && self.dual_floor < self.big_m
            && self.max_outer >= 1
            && self.max_inner >= 1;
        if ok {
            Ok(())
        } else {
            Err(BidError::Config(format!("invalid solver config {self:?}")))
        }
    }
}

/// Squared residuals of the three optimality conditions; `None` for an
/// absent CPC bound.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Residuals {
    pub budget: f64,
    pub upper: Option<f64>,
    pub lower: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SolveFlags {
    /// An iteration cap was hit before a bracket closed.
    pub degraded: bool,
    /// The lower CPC bound can only be met by a non-auction allocation.
    pub infeasible_lower: bool,
    /// Even the largest `q_u` leaves the realized CPC above `C_u`.
    pub upper_unreachable: bool,
}

impl SolveFlags {
    pub fn any(&self) -> bool {
        self.degraded || self.infeasible_lower || self.upper_unreachable
    }
}

/// Which constraint drove the outer search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CpcRegime {
    Slack,
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub duals: DualVars,
    pub totals: Totals,
    pub flags: SolveFlags,
    pub regime: CpcRegime,
    /// Closest evaluated point on the violating side of the CPC bracket.
    pub neighbor: Option<(DualVars, Totals)>,
    pub evaluations: usize,
    pub outer_iterations: usize,
    pub residuals: Residuals,
}

pub fn residuals(resp: &dyn ResponseFn, campaign: &Campaign, duals: &DualVars) -> Result<Residuals> {
    Ok(residuals_of(&resp.totals(duals)?, campaign))
}

pub fn residuals_of(t: &Totals, campaign: &Campaign) -> Residuals {
    let sq = |x: f64| x * x;
    Residuals {
        budget: sq(campaign.budget - t.cost),
        upper: campaign
            .has_upper()
            .then(|| sq(campaign.cpc_upper * t.clicks - t.cost)),
        lower: campaign
            .has_lower()
            .then(|| sq(campaign.cpc_lower * t.clicks - t.cost)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Probe {
    Low,
    High,
    /// Satisfying and within the residual tolerance.
    Hit,
}

struct Search<T> {
    lo: f64,
    lo_val: f64,
    lo_data: Option<T>,
    hi: f64,
    hi_val: f64,
    hi_data: Option<T>,
    converged: bool,
    evals: usize,
}

/// Initial relative half-width of a warm-started bracket.
const WARM_WIDTH: f64 = 1.0 / 1024.0;

/// Relative bracket width of the inner search never exceeds this.
const INNER_TOL: f64 = 1e-10;

impl<T> Search<T> {
    fn set_lo(&mut self, x: f64, v: f64, data: T) {
        self.lo = x;
        self.lo_val = v;
        self.lo_data = Some(data);
    }

    fn set_hi(&mut self, x: f64, v: f64, data: T) {
        self.hi = x;
        self.hi_val = v;
        self.hi_data = Some(data);
    }
}

/// Smallest `x` in `(lo, upper]` whose probe is not `Low`; `lo` itself is
/// known to be `Low`. Probes also return a residual that is positive when
/// `Low`, nonpositive otherwise, and decreasing in `x` (NaN if unknown).
///
/// Without a hint, brackets upward from 1 by factors of four. With a hint,
/// probes it and steps outward by a relative width that starts at
/// [`WARM_WIDTH`] and grows fourfold. Wide brackets are split geometrically;
/// once within a factor of four, ITP steps (regula falsi, truncated and
/// projected into a shrinking ball around the midpoint) finish the search in
/// at most one probe more than bisection would need.
fn search_up<T>(
    lo: f64,
    upper: f64,
    hint: Option<f64>,
    tol: f64,
    min_width: f64,
    cap: usize,
    mut probe: impl FnMut(f64) -> Result<(Probe, f64, T)>,
) -> Result<Search<T>> {
    let mut s = Search {
        lo,
        lo_val: f64::NAN,
        lo_data: None,
        hi: upper,
        hi_val: f64::NAN,
        hi_data: None,
        converged: false,
        evals: 0,
    };
    let (mut h, warm) = match hint {
        Some(h) if h > lo && h <= upper => (h, true),
        _ => ((2.0 * lo).max(1.0).min(upper), false),
    };
    if h <= lo {
        h = upper;
    }
    let mut grow = if warm { WARM_WIDTH } else { 3.0 };
    let mut first = true;
    loop {
        if s.evals >= cap {
            return Ok(s);
        }
        let (pr, v, data) = probe(h)?;
        s.evals += 1;
        match pr {
            Probe::Hit => {
                s.set_hi(h, v, data);
                s.converged = true;
                return Ok(s);
            }
            Probe::High => {
                s.set_hi(h, v, data);
                if !(warm && first) {
                    break;
                }
                // the hint was high: step down towards `lo`
                loop {
                    let x = s.hi / (1.0 + grow);
                    grow *= 4.0;
                    if x <= s.lo || s.evals >= cap {
                        break;
                    }
                    let (pr, v, data) = probe(x)?;
                    s.evals += 1;
                    match pr {
                        Probe::Hit => {
                            s.set_hi(x, v, data);
                            s.converged = true;
                            return Ok(s);
                        }
                        Probe::High => s.set_hi(x, v, data),
                        Probe::Low => {
                            s.set_lo(x, v, data);
                            break;
                        }
                    }
                }
                break;
            }
            Probe::Low => {
                s.set_lo(h, v, data);
                if h >= upper {
                    return Ok(s);
                }
                h = (h * (1.0 + grow)).min(upper);
                grow *= 4.0;
            }
        }
        first = false;
    }
    // ITP state, set when the bracket first gets narrow
    let mut itp: Option<(f64, f64, i32)> = None;
    loop {
        let width = s.hi - s.lo;
        if width <= tol * s.hi || s.hi <= min_width {
            s.converged = true;
            return Ok(s);
        }
        if s.evals >= cap {
            return Ok(s);
        }
        let half = 0.5 * (s.lo + s.hi);
        let mid = if s.lo > 0.0 && s.hi / s.lo > 4.0 {
            (s.lo * s.hi).sqrt()
        } else if s.lo <= 0.0 {
            half
        } else {
            let (eps, kappa, n_max) = *itp.get_or_insert_with(|| {
                let eps = 0.5 * tol * s.lo;
                let n_half = (width / (2.0 * eps)).log2().ceil().max(0.0);
                (eps, 0.2 / width, n_half as i32 + 1)
            });
            let (fa, fb) = (-s.lo_val, -s.hi_val);
            if fa < 0.0 && fb >= 0.0 && (fb - fa).is_finite() {
                let xf = (fb * s.lo - fa * s.hi) / (fb - fa);
                let sigma = (half - xf).signum();
                let delta = kappa * width * width;
                let xt = if delta <= (half - xf).abs() { xf + sigma * delta } else { half };
                let r = (eps * 2f64.powi(n_max) - 0.5 * width).max(0.0);
                itp = Some((eps, kappa, n_max - 1));
                if (xt - half).abs() <= r {
                    xt
                } else {
                    half - sigma * r
                }
            } else {
                itp = Some((eps, kappa, n_max - 1));
                half
            }
        };
        if mid <= s.lo || mid >= s.hi {
            s.converged = true;
            return Ok(s);
        }
        let (pr, v, data) = probe(mid)?;
        s.evals += 1;
        match pr {
            Probe::Hit => {
                s.set_hi(mid, v, data);
                s.converged = true;
                return Ok(s);
            }
            Probe::High => s.set_hi(mid, v, data),
            Probe::Low => s.set_lo(mid, v, data),
        }
    }
}

struct Counted<'r> {
    inner: &'r dyn ResponseFn,
    calls: Cell<usize>,
}

impl Counted<'_> {
    fn eval(&self, d: &DualVars) -> Result<Totals> {
        self.calls.set(self.calls.get() + 1);
        self.inner.totals(d)
    }
}

/// Result of one inner `P(q)` search.
#[derive(Debug, Clone, Copy)]
struct PStep {
    duals: DualVars,
    totals: Totals,
    /// The denominator sits at its floor with the budget slack while `q_l > 0`:
    /// the unconstrained `P(q)` would leave the auction region.
    floored: bool,
    /// The budget-slack minimum was accepted without searching.
    at_minimum: bool,
    converged: bool,
}

fn p_step(
    resp: &Counted<'_>,
    campaign: &Campaign,
    q: f64,
    cfg: &SolverConfig,
    hint_denominator: Option<f64>,
) -> Result<PStep> {
    let q_u = q.max(0.0);
    let q_l = (-q).max(0.0);
    let d_min = q_u.max(cfg.dual_floor);
    let at = |d: f64| DualVars {
        p: (d - q_u + q_l).max(0.0),
        q_u,
        q_l,
    };
    let budget = campaign.budget;
    let hit_tol = cfg.eps_residual * budget;

    let first = resp.eval(&at(d_min))?;
    if first.cost <= budget {
        return Ok(PStep {
            duals: at(d_min),
            totals: first,
            floored: q_l > 0.0,
            at_minimum: true,
            converged: true,
        });
    }
    let upper = d_min + cfg.big_m;
    let search = search_up(
        d_min,
        upper,
        hint_denominator,
        cfg.bracket_tol.min(INNER_TOL),
        0.0,
        cfg.max_inner.saturating_sub(1).max(1),
        |d| {
            let t = resp.eval(&at(d))?;
            let pr = if t.cost > budget {
                Probe::Low
            } else if budget - t.cost <= hit_tol {
                Probe::Hit
            } else {
                Probe::High
            };
            Ok((pr, t.cost - budget, t))
        },
    )?;
    match search.hi_data {
        Some(totals) => Ok(PStep {
            duals: at(search.hi),
            totals,
            floored: false,
            at_minimum: false,
            converged: search.converged,
        }),
        None if search.lo >= upper => Err(BidError::BracketFailure {
            cost: search.lo_data.map_or(first.cost, |t| t.cost),
            budget,
            bracket: upper,
        }),
        // cap exhausted while still bracketing upward
        None => {
            let t = resp.eval(&at(upper))?;
            if t.cost > budget {
                return Err(BidError::BracketFailure {
                    cost: t.cost,
                    budget,
                    bracket: upper,
                });
            }
            Ok(PStep {
                duals: at(upper),
                totals: t,
                floored: false,
                at_minimum: false,
                converged: false,
            })
        }
    }
}

/// `P(q)`: the budget multiplier for a fixed signed CPC multiplier `q`
/// (`q ≥ 0` means `q_u = q`, `q < 0` means `q_l = −q`). Returns 0 when the
/// budget is slack at the smallest admissible multiplier.
pub fn solve_p_given_q(resp: &dyn ResponseFn, campaign: &Campaign, q: f64, cfg: &SolverConfig) -> Result<f64> {
    let counted = Counted {
        inner: resp,
        calls: Cell::new(0),
    };
    let st = p_step(&counted, campaign, q, cfg, None)?;
    if st.at_minimum && q <= 0.0 {
        return Ok(0.0);
    }
    Ok(st.duals.p)
}

/// CPC gap `cost − C·clicks` at `(P(q), q)`, with `C = C_u` for `q ≥ 0` and
/// `C = C_l` otherwise. Also returns the duals and totals at that point.
pub fn cpc_gap(resp: &dyn ResponseFn, campaign: &Campaign, q: f64, cfg: &SolverConfig) -> Result<(DualVars, Totals, f64)> {
    let counted = Counted {
        inner: resp,
        calls: Cell::new(0),
    };
    let st = p_step(&counted, campaign, q, cfg, None)?;
    let bound = if q >= 0.0 { campaign.cpc_upper } else { campaign.cpc_lower };
    Ok((st.duals, st.totals, st.totals.cost - bound * st.totals.clicks))
}

/// Solves for the optimal duals of `campaign` against `resp`.
pub fn solve(resp: &dyn ResponseFn, campaign: &Campaign, warm_start: &DualVars, cfg: &SolverConfig) -> Result<Solution> {
    campaign.validate()?;
    cfg.validate()?;
    let counted = Counted {
        inner: resp,
        calls: Cell::new(0),
    };
    let hit_tol = cfg.eps_residual * campaign.budget;
    let warm_d = warm_start.denominator();
    let warm_hint = (warm_d > 0.0 && warm_d.is_finite()).then_some(warm_d);

    let step0 = p_step(&counted, campaign, 0.0, cfg, warm_hint)?;
    let mut converged = step0.converged;
    let t0 = step0.totals;
    let outer_cap = cfg.max_outer.saturating_sub(1).max(1);

    let finish = |step: PStep,
                  regime: CpcRegime,
                  neighbor: Option<PStep>,
                  flags: SolveFlags,
                  outer: usize,
                  calls: usize| Solution {
        duals: step.duals,
        totals: step.totals,
        flags,
        regime,
        neighbor: neighbor.map(|n| (n.duals, n.totals)),
        evaluations: calls,
        outer_iterations: outer,
        residuals: residuals_of(&step.totals, campaign),
    };

    let upper_violated = campaign.has_upper() && t0.clicks > 0.0 && t0.cost > campaign.cpc_upper * t0.clicks;
    let lower_violated = campaign.has_lower() && t0.clicks > 0.0 && t0.cost < campaign.cpc_lower * t0.clicks;

    if upper_violated {
        let cu = campaign.cpc_upper;
        let mut last_d = step0.duals.denominator();
        let mut inner_ok = true;
        let warm_q = (warm_start.q_u > 0.0).then_some(warm_start.q_u);
        let search = search_up(0.0, cfg.big_m, warm_q, cfg.bracket_tol, cfg.dual_floor, outer_cap, |q| {
            let st = p_step(&counted, campaign, q, cfg, Some(last_d))?;
            last_d = st.duals.denominator();
            inner_ok &= st.converged;
            let g = st.totals.cost - cu * st.totals.clicks;
            let pr = if st.totals.clicks <= 0.0 || g <= 0.0 {
                if -g <= hit_tol && budget_settled(&st, campaign, hit_tol) {
                    Probe::Hit
                } else {
                    Probe::High
                }
            } else {
                Probe::Low
            };
            Ok((pr, g, st))
        })?;
        converged &= search.converged && inner_ok;
        let outer = search.evals + 1;
        let neighbor = search.lo_data.or(Some(step0));
        return Ok(match search.hi_data {
            Some(st) => finish(
                st,
                CpcRegime::Upper,
                neighbor,
                SolveFlags {
                    degraded: !converged,
                    ..Default::default()
                },
                outer,
                counted.calls.get(),
            ),
            None => {
                let st = search.lo_data.unwrap_or(step0);
                finish(
                    st,
                    CpcRegime::Upper,
                    None,
                    SolveFlags {
                        degraded: !converged && search.lo < cfg.big_m,
                        upper_unreachable: search.lo >= cfg.big_m,
                        ..Default::default()
                    },
                    outer,
                    counted.calls.get(),
                )
            }
        });
    }

    if lower_violated {
        let cl = campaign.cpc_lower;
        let mut last_d = step0.duals.denominator();
        let mut inner_ok = true;
        let warm_q = (warm_start.q_l > 0.0).then_some(warm_start.q_l);
        let search = search_up(0.0, cfg.big_m, warm_q, cfg.bracket_tol, cfg.dual_floor, outer_cap, |q_l| {
            let st = p_step(&counted, campaign, -q_l, cfg, Some(last_d))?;
            if !st.floored {
                last_d = st.duals.denominator();
            }
            inner_ok &= st.converged;
            if st.floored {
                return Ok((Probe::High, f64::NAN, st));
            }
            let g = st.totals.cost - cl * st.totals.clicks;
            let pr = if g >= 0.0 {
                if g <= hit_tol && budget_settled(&st, campaign, hit_tol) {
                    Probe::Hit
                } else {
                    Probe::High
                }
            } else {
                Probe::Low
            };
            Ok((pr, -g, st))
        })?;
        converged &= search.converged && inner_ok;
        let outer = search.evals + 1;
        let satisfied = search.hi_data.filter(|st| !st.floored);
        return Ok(match satisfied {
            Some(st) => finish(
                st,
                CpcRegime::Lower,
                search.lo_data.or(Some(step0)),
                SolveFlags {
                    degraded: !converged,
                    ..Default::default()
                },
                outer,
                counted.calls.get(),
            ),
            None => finish(
                search.lo_data.unwrap_or(step0),
                CpcRegime::Lower,
                None,
                SolveFlags {
                    degraded: !converged,
                    infeasible_lower: true,
                    ..Default::default()
                },
                outer,
                counted.calls.get(),
            ),
        });
    }

    Ok(finish(
        step0,
        CpcRegime::Slack,
        None,
        SolveFlags {
            degraded: !converged,
            ..Default::default()
        },
        1,
        counted.calls.get(),
    ))
}

/// Budget condition of complementary slackness: either `p` is at its floor
/// or the spend is within tolerance of the budget.
fn budget_settled(st: &PStep, campaign: &Campaign, tol: f64) -> bool {
    st.at_minimum || (campaign.budget - st.totals.cost).abs() <= tol
}

/// Complementary slackness products at a solution, each scaled by the budget.
pub fn slackness_products(sol: &Solution, campaign: &Campaign) -> [f64; 3] {
    let t = &sol.totals;
    let d = &sol.duals;
    let b = campaign.budget.max(f64::MIN_POSITIVE);
    let upper = if d.q_u > 0.0 {
        d.q_u * (t.cost - campaign.cpc_upper * t.clicks) / b
    } else {
        0.0
    };
    let lower = if d.q_l > 0.0 {
        d.q_l * (t.cost - campaign.cpc_lower * t.clicks) / b
    } else {
        0.0
    };
    [d.p * (t.cost - campaign.budget) / b, upper, lower]
}
