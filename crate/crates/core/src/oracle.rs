//! Ground truth: the exact LP optimum, the exhaustive 0-1 optimum for tiny
//! instances, and the greedy 0-1 policy that thresholds on the LP duals.
//!
//! The LP is solved through its own dual structure. For a fixed CPC
//! multiplier `q` the budget-constrained Lagrangian is a fractional knapsack
//! ordered by the per-impression break-even denominator
//! `t_i = (s·obj_i + C_u·q_u − C_l·q_l) / wp_i` (impression `i` wins iff
//! `p + q_u − q_l < t_i`). When a CPC bound binds, the optimum mixes the two
//! knapsack solutions on either side of the critical `q`, which leaves at most
//! two fractional impressions once objective ties are broken.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::allocator::{won_set, TrafficSlice};
use crate::error::{BidError, Result};
use crate::index::TrafficIndex;
use crate::model::{cpc_compliant, epsilon_c, AccumStats, Campaign, DualVars, Impression};
use crate::solver::{solve, IndexedResponse, SolverConfig, Totals};

pub const BRUTE_FORCE_LIMIT: usize = 22;

/// Relative size of the tie-breaking objective perturbation.
pub const PERTURBATION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Constraint {
    Budget,
    CpcUpper,
    CpcLower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    /// `Σ x·pctr·obj`, without the constant `C_u` factor of the LP objective.
    pub value: f64,
    pub cost: f64,
    pub clicks: f64,
    pub duals: DualVars,
    /// `(impression index, fraction)` for every strictly fractional `x_i`.
    pub fractional_items: Vec<(usize, f64)>,
    pub binding: BTreeSet<Constraint>,
    /// Full primal allocation, index-aligned with the slice.
    pub allocation: Vec<f64>,
}

impl LpSolution {
    pub fn stats(&self) -> AccumStats {
        AccumStats {
            cost: self.cost,
            clicks: self.clicks,
            value: self.value,
            wins: self.allocation.iter().filter(|x| **x > 0.0).count() as u64,
            seen: self.allocation.len() as u64,
        }
    }
}

/// Adds `i·ε` (with `ε = 1e-12·max obj`) to the `i`-th objective so that no
/// three `(wp, obj)` points are collinear in practice; between otherwise
/// identical impressions the later one is preferred.
pub fn perturb_objs(slice: &TrafficSlice) -> TrafficSlice {
    let eps = PERTURBATION * slice.max_obj();
    slice.with_objs(
        slice
            .impressions()
            .iter()
            .enumerate()
            .map(|(i, imp)| imp.obj + i as f64 * eps),
    )
}

/// Exact budget-feasible maximizer of the Lagrangian at a fixed `q`.
struct Fill {
    cost: f64,
    clicks: f64,
    duals: DualVars,
    budget_binding: bool,
    scale: f64,
    offset: f64,
    d_min: f64,
    /// Threshold and index of the fractional item, and its fraction.
    cut: Option<(f64, usize, f64)>,
}

impl Fill {
    fn gap(&self, bound: f64) -> f64 {
        self.cost - bound * self.clicks
    }

    fn allocation(&self, imps: &[Impression]) -> Vec<f64> {
        imps.iter()
            .enumerate()
            .map(|(i, imp)| {
                let t = (self.scale * imp.obj + self.offset) / imp.wp;
                if t <= self.d_min {
                    return 0.0;
                }
                match self.cut {
                    None => 1.0,
                    Some((ct, ci, frac)) => match t.total_cmp(&ct).then(i.cmp(&ci)) {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => frac,
                        std::cmp::Ordering::Less => 0.0,
                    },
                }
            })
            .collect()
    }
}

/// Relative half-width of the threshold band searched around a guess.
const GUESS_BAND: f64 = 1e-6;

/// Number of top-ranked entries of `order` that fit in `budget` after
/// `before` is spent; permutes `order` so that they come first.
fn select_prefix(order: &mut [(f64, usize)], imps: &[Impression], mut before: f64, budget: f64) -> usize {
    let rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1));
    let cost_of = |e: &(f64, usize)| imps[e.1].cost();
    let (mut lo, mut hi) = (0, order.len());
    loop {
        if hi - lo <= 32 {
            order[lo..hi].sort_unstable_by(rank);
            let mut k = lo;
            while k < hi && before + cost_of(&order[k]) <= budget {
                before += cost_of(&order[k]);
                k += 1;
            }
            return k;
        }
        let mid = lo + (hi - lo) / 2;
        order[lo..hi].select_nth_unstable_by(mid - lo, rank);
        let left: f64 = order[lo..mid].iter().map(cost_of).sum();
        if before + left > budget {
            hi = mid;
        } else if before + left + cost_of(&order[mid]) > budget {
            return mid;
        } else {
            before += left + cost_of(&order[mid]);
            lo = mid + 1;
        }
    }
}

/// Items are ranked by threshold `(scale·obj + offset)/wp`, descending, later
/// index first among equals, and taken greedily until the budget runs out.
/// `guess` is a likely boundary threshold; only a band around it is ranked
/// when the guess is right.
fn knapsack_fill(
    imps: &[Impression],
    campaign: &Campaign,
    q: f64,
    floor: f64,
    guess: Option<f64>,
    order: &mut Vec<(f64, usize)>,
) -> Fill {
    let q_u = q.max(0.0);
    let q_l = (-q).max(0.0);
    let probe = DualVars { p: 0.0, q_u, q_l };
    let scale = campaign.value_scale();
    let offset = probe.offset(campaign);
    let d_min = q_u.max(floor);
    let budget = campaign.budget;
    let threshold = |imp: &Impression| (scale * imp.obj + offset) / imp.wp;

    // (cost, clicks) already taken ahead of `order`
    let mut taken = None;
    if let Some(g) = guess.filter(|g| *g > d_min) {
        let (band_lo, band_hi) = ((g * (1.0 - GUESS_BAND)).max(d_min), g * (1.0 + GUESS_BAND));
        order.clear();
        let (mut cost, mut clicks, mut band_cost) = (0.0, 0.0, 0.0);
        for (i, imp) in imps.iter().enumerate() {
            let t = threshold(imp);
            if t > band_hi {
                cost += imp.cost();
                clicks += imp.pctr;
            } else if t > band_lo {
                band_cost += imp.cost();
                order.push((t, i));
            }
        }
        if cost <= budget && cost + band_cost > budget {
            taken = Some((cost, clicks));
        }
    }
    let (mut cost, mut clicks) = match taken {
        Some(t) => t,
        None => {
            order.clear();
            order.extend(
                imps.iter()
                    .enumerate()
                    .map(|(i, imp)| (threshold(imp), i))
                    .filter(|(t, _)| *t > d_min),
            );
            (0.0, 0.0)
        }
    };
    let total: f64 = cost + order.iter().map(|e| imps[e.1].cost()).sum::<f64>();
    let k = if total <= budget {
        order.len()
    } else {
        select_prefix(order, imps, cost, budget)
    };
    for e in &order[..k] {
        cost += imps[e.1].cost();
        clicks += imps[e.1].pctr;
    }
    let mut denominator = d_min;
    let mut cut = None;
    if k < order.len() {
        // the boundary item is the best of the rest
        let (t, i) = *order[k..]
            .iter()
            .min_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)))
            .expect("nonempty rest");
        let c = imps[i].cost();
        let frac = ((budget - cost) / c).clamp(0.0, 1.0);
        cost += frac * c;
        clicks += frac * imps[i].pctr;
        denominator = t;
        cut = Some((t, i, frac));
    }
    Fill {
        cost,
        clicks,
        duals: DualVars {
            p: (denominator - q_u + q_l).max(0.0),
            q_u,
            q_l,
        },
        budget_binding: cut.is_some(),
        scale,
        offset,
        d_min,
        cut,
    }
}

const REFINE_ITERS: usize = 200;

/// Brackets and bisects the critical CPC multiplier on exact knapsack fills.
/// `sign` is the CPC regime: +1 searches `q_u ≥ 0`, −1 searches `q_l ≥ 0`.
fn refine(
    slice: &TrafficSlice,
    campaign: &Campaign,
    cfg: &SolverConfig,
    start: Fill,
    hint: (f64, f64),
    sign: f64,
) -> Result<(Fill, Fill)> {
    let bound = if sign > 0.0 { campaign.cpc_upper } else { campaign.cpc_lower };
    let mut scratch = Vec::new();
    let mut guess = None;
    let mut fill = |m: f64| {
        let f = knapsack_fill(slice.impressions(), campaign, sign * m, cfg.dual_floor, guess, &mut scratch);
        guess = f.cut.map(|c| c.0);
        f
    };
    // "satisfied" is monotone in the multiplier; floored lower fills count as
    // overshoot so the bisection stops at the auction-region boundary.
    let satisfied = |f: &Fill| {
        if sign < 0.0 && !f.budget_binding {
            return true;
        }
        let g = f.gap(bound);
        if sign > 0.0 {
            g <= 0.0
        } else {
            g >= 0.0
        }
    };

    let mut lo = 0.0;
    let mut lo_fill = start;
    let warm = hint.1 > 0.0;
    let mut hi = if warm { hint.1 } else { 1.0 };
    let mut hi_fill = fill(hi);
    // relative step, grown fourfold while bracketing
    let mut w = if warm { 1e-9 } else { 3.0 };
    if satisfied(&hi_fill) {
        // the solver's lower end first, then step down
        let mut x = if hint.0 > 0.0 && hint.0 < hi { hint.0 } else { hi / (1.0 + w) };
        while w < 1e12 {
            let f = fill(x);
            if !satisfied(&f) {
                lo = x;
                lo_fill = f;
                break;
            }
            hi = x;
            hi_fill = f;
            w *= 4.0;
            x = hi / (1.0 + w);
        }
    } else {
        while !satisfied(&hi_fill) {
            lo = hi;
            lo_fill = hi_fill;
            if hi >= cfg.big_m {
                return Err(BidError::BracketFailure {
                    cost: lo_fill.cost,
                    budget: campaign.budget,
                    bracket: hi,
                });
            }
            hi = (hi * (1.0 + w)).min(cfg.big_m);
            w *= 4.0;
            hi_fill = fill(hi);
        }
    }
    for _ in 0..REFINE_ITERS {
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let mid = if lo > 0.0 && hi / lo > 4.0 {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if mid <= lo || mid >= hi {
            break;
        }
        let f = fill(mid);
        if satisfied(&f) {
            hi = mid;
            hi_fill = f;
        } else {
            lo = mid;
            lo_fill = f;
        }
    }
    if sign < 0.0 && !hi_fill.budget_binding {
        return Err(BidError::InfeasibleLowerBound);
    }
    Ok((lo_fill, hi_fill))
}

/// Exact optimum of the LP relaxation.
pub fn lp_optimal(slice: &TrafficSlice, campaign: &Campaign, cfg: &SolverConfig) -> Result<LpSolution> {
    campaign.validate()?;
    let pert = perturb_objs(slice);
    let resp = IndexedResponse::new(TrafficIndex::build(pert.impressions()), 1.0, Totals::default(), campaign);
    let sol = solve(&resp, campaign, &DualVars::default(), cfg)?;
    if sol.flags.infeasible_lower {
        return Err(BidError::InfeasibleLowerBound);
    }

    let base = knapsack_fill(pert.impressions(), campaign, 0.0, cfg.dual_floor, None, &mut Vec::new());
    let upper_violated = campaign.has_upper() && base.gap(campaign.cpc_upper) > 0.0;
    let lower_violated = campaign.has_lower() && base.clicks > 0.0 && base.gap(campaign.cpc_lower) < 0.0;

    let (x, duals, regime) = if upper_violated || lower_violated {
        let (sign, bound, regime) = if upper_violated {
            (1.0, campaign.cpc_upper, Constraint::CpcUpper)
        } else {
            (-1.0, campaign.cpc_lower, Constraint::CpcLower)
        };
        let q_of = |d: &DualVars| if sign > 0.0 { d.q_u } else { d.q_l };
        let hint = (sol.neighbor.map_or(0.0, |(d, _)| q_of(&d)), q_of(&sol.duals));
        let (viol, sat) = match refine(&pert, campaign, cfg, base, hint, sign) {
            Err(BidError::InfeasibleLowerBound) => return simplex_lp(slice, campaign, sol.duals),
            r => r?,
        };
        let ga = viol.gap(bound);
        let gb = sat.gap(bound);
        let lambda = if (gb - ga).abs() > 0.0 {
            (gb / (gb - ga)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let x: Vec<f64> = viol
            .allocation(pert.impressions())
            .iter()
            .zip(&sat.allocation(pert.impressions()))
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        (x, sat.duals, Some(regime))
    } else {
        (base.allocation(pert.impressions()), base.duals, None)
    };

    let imps = slice.impressions();
    let mut value = 0.0;
    let mut cost = 0.0;
    let mut clicks = 0.0;
    let mut fractional_items = Vec::new();
    for (i, (&xi, imp)) in x.iter().zip(imps).enumerate() {
        if xi <= 0.0 {
            continue;
        }
        value += xi * imp.value();
        cost += xi * imp.cost();
        clicks += xi * imp.pctr;
        if xi > 1e-12 && xi < 1.0 - 1e-12 {
            fractional_items.push((i, xi));
        }
    }

    let mut binding = BTreeSet::new();
    if duals.p > cfg.dual_floor && (campaign.budget - cost).abs() <= 1e-9 * campaign.budget.max(1.0) {
        binding.insert(Constraint::Budget);
    }
    if let Some(r) = regime {
        binding.insert(r);
    }
    Ok(LpSolution {
        value,
        cost,
        clicks,
        duals,
        fractional_items,
        binding,
        allocation: x,
    })
}

/// General simplex solve, for lower-bound instances whose LP optimum lies
/// outside the auction region (`p + q_u − q_l ≤ 0`). `duals` is reported as
/// given.
fn simplex_lp(slice: &TrafficSlice, campaign: &Campaign, duals: DualVars) -> Result<LpSolution> {
    use minilp::{ComparisonOp, OptimizationDirection, Problem};
    let imps = slice.impressions();
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = imps.iter().map(|i| lp.add_var(i.value(), (0.0, 1.0))).collect();
    let row = |f: &dyn Fn(&Impression) -> f64| vars.iter().zip(imps).map(|(&v, i)| (v, f(i))).collect::<Vec<_>>();
    lp.add_constraint(row(&|i| i.cost()), ComparisonOp::Le, campaign.budget);
    if campaign.has_upper() {
        lp.add_constraint(row(&|i| i.cost() - campaign.cpc_upper * i.pctr), ComparisonOp::Le, 0.0);
    }
    if campaign.has_lower() {
        lp.add_constraint(row(&|i| i.cost() - campaign.cpc_lower * i.pctr), ComparisonOp::Ge, 0.0);
    }
    let solved = lp.solve().map_err(|_| BidError::InfeasibleLowerBound)?;
    let x: Vec<f64> = vars.iter().map(|&v| solved[v].clamp(0.0, 1.0)).collect();
    let (mut value, mut cost, mut clicks) = (0.0, 0.0, 0.0);
    let mut fractional_items = Vec::new();
    for (i, (&xi, imp)) in x.iter().zip(imps).enumerate() {
        value += xi * imp.value();
        cost += xi * imp.cost();
        clicks += xi * imp.pctr;
        if xi > 1e-12 && xi < 1.0 - 1e-12 {
            fractional_items.push((i, xi));
        }
    }
    let tol = 1e-9 * campaign.budget.max(1.0);
    let mut binding = BTreeSet::new();
    if campaign.budget - cost <= tol {
        binding.insert(Constraint::Budget);
    }
    if campaign.has_upper() && (cost - campaign.cpc_upper * clicks).abs() <= tol {
        binding.insert(Constraint::CpcUpper);
    }
    if campaign.has_lower() && (cost - campaign.cpc_lower * clicks).abs() <= tol {
        binding.insert(Constraint::CpcLower);
    }
    Ok(LpSolution {
        value,
        cost,
        clicks,
        duals,
        fractional_items,
        binding,
        allocation: x,
    })
}

/// Greedy 0-1 allocation: win iff strictly above the dual threshold, with the
/// duals solved on the tie-broken traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyOutcome {
    pub stats: AccumStats,
    pub duals: DualVars,
}

pub fn greedy_01(slice: &TrafficSlice, campaign: &Campaign, cfg: &SolverConfig) -> Result<GreedyOutcome> {
    let pert = perturb_objs(slice);
    let resp = IndexedResponse::new(TrafficIndex::build(pert.impressions()), 1.0, Totals::default(), campaign);
    let sol = solve(&resp, campaign, &DualVars::default(), cfg)?;
    if sol.flags.infeasible_lower {
        return Err(BidError::InfeasibleLowerBound);
    }
    let won = won_set(&pert, &sol.duals, campaign)?;
    let mut stats = AccumStats::default();
    for (imp, w) in slice.impressions().iter().zip(won) {
        stats.record(imp, w);
    }
    Ok(GreedyOutcome {
        stats,
        duals: sol.duals,
    })
}

/// Exhaustive 0-1 optimum (`N ≤ 22`).
pub fn brute_force_01(slice: &TrafficSlice, campaign: &Campaign) -> Result<f64> {
    let imps = slice.impressions();
    let n = imps.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(BidError::TooLarge(n));
    }
    const REL: f64 = 1e-12;
    let mut best = 0.0f64;
    for mask in 0u32..(1u32 << n) {
        let (mut cost, mut clicks, mut value) = (0.0, 0.0, 0.0);
        let mut m = mask;
        while m != 0 {
            let i = m.trailing_zeros() as usize;
            cost += imps[i].cost();
            clicks += imps[i].pctr;
            value += imps[i].value();
            m &= m - 1;
        }
        if value <= best || cost > campaign.budget * (1.0 + REL) {
            continue;
        }
        if clicks > 0.0 {
            if campaign.has_upper() && cost > campaign.cpc_upper * clicks * (1.0 + REL) {
                continue;
            }
            if campaign.has_lower() && cost < campaign.cpc_lower * clicks * (1.0 - REL) {
                continue;
            }
        }
        best = value;
    }
    Ok(best)
}

/// Greedy-vs-optimum bound: the greedy value is within `2·max obj` of the
/// 0-1 optimum, and its CPC lies in the corridor widened by `ε^c`.
pub fn verify_gap(greedy: &AccumStats, lp01_value: f64, slice: &TrafficSlice, campaign: &Campaign) -> bool {
    let max_obj = slice.max_obj();
    let value_ok = greedy.value >= lp01_value - 2.0 * max_obj - 1e-12 * lp01_value.max(1.0);
    let eps = if campaign.is_budget_only() {
        0.0
    } else {
        epsilon_c(campaign, slice.max_wp()).unwrap_or(f64::INFINITY)
    };
    let budget_ok = greedy.cost <= campaign.budget * (1.0 + 1e-12);
    value_ok && budget_ok && cpc_compliant(greedy, campaign, eps)
}
