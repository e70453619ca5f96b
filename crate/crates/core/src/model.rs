//! Domain types and the closed-form bidding mathematics.
//!
//! A campaign maximizes `Σ x·pctr·obj` subject to a budget and an optional
//! CPC corridor `[cpc_lower, cpc_upper]`. The Lagrange multipliers of those
//! three constraints, `(p, q_u, q_l)`, fully determine the optimal policy:
//!
//! ```text
//! bid = (s·obj + C_u·q_u − C_l·q_l) / (p + q_u − q_l)
//! ```
//!
//! where `s` is the objective scale (`C_u` when an upper bound exists, 1
//! otherwise, so that the budget-only setting with `C_u = +∞` stays finite).

use serde::{Deserialize, Serialize};

use crate::error::{BidError, Result};

/// One biddable opportunity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub step: u32,
    pub pctr: f64,
    /// Winning price, charged per click.
    pub wp: f64,
    /// Value per click.
    pub obj: f64,
}

impl Impression {
    pub fn new(step: u32, pctr: f64, wp: f64, obj: f64) -> Result<Self> {
        let imp = Self { step, pctr, wp, obj };
        imp.validate()?;
        Ok(imp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pctr) {
            return Err(BidError::InvalidImpression(format!(
                "pctr {} outside [0, 1]",
                self.pctr
            )));
        }
        if !(self.wp > 0.0 && self.wp.is_finite()) {
            return Err(BidError::InvalidImpression(format!(
                "wp {} must be positive and finite",
                self.wp
            )));
        }
        if !(self.obj >= 0.0 && self.obj.is_finite()) {
            return Err(BidError::InvalidImpression(format!(
                "obj {} must be nonnegative and finite",
                self.obj
            )));
        }
        Ok(())
    }

    /// Expected value `pctr·obj`.
    #[inline]
    pub fn value(&self) -> f64 {
        self.pctr * self.obj
    }

    /// Expected cost `pctr·wp`.
    #[inline]
    pub fn cost(&self) -> f64 {
        self.pctr * self.wp
    }
}

/// Campaign constraints and schedule.
///
/// The budget-only setting is expressed with `cpc_lower = 0` and
/// `cpc_upper = +∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub id: String,
    pub budget: f64,
    pub cpc_upper: f64,
    pub cpc_lower: f64,
    pub start_step: u32,
    pub end_step: u32,
    pub manual_bid: Option<f64>,
}

impl Campaign {
    /// Budget-only campaign.
    pub fn budget_only(id: impl Into<String>, budget: f64, start_step: u32, end_step: u32) -> Self {
        Self {
            id: id.into(),
            budget,
            cpc_upper: f64::INFINITY,
            cpc_lower: 0.0,
            start_step,
            end_step,
            manual_bid: None,
        }
    }

    /// Campaign with budget and both CPC bounds.
    pub fn with_cpc(
        id: impl Into<String>,
        budget: f64,
        cpc_upper: f64,
        cpc_lower: f64,
        start_step: u32,
        end_step: u32,
    ) -> Self {
        Self {
            id: id.into(),
            budget,
            cpc_upper,
            cpc_lower,
            start_step,
            end_step,
            manual_bid: None,
        }
    }

    pub fn with_manual_bid(mut self, bid: f64) -> Self {
        self.manual_bid = Some(bid);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(BidError::InvalidCampaign {
                id: self.id.clone(),
                reason,
            })
        };
        if !(self.budget >= 0.0 && self.budget.is_finite()) {
            return fail(format!("budget {} must be finite and nonnegative", self.budget));
        }
        if !(self.cpc_lower >= 0.0 && self.cpc_lower.is_finite()) {
            return fail(format!("cpc_lower {} must be finite and nonnegative", self.cpc_lower));
        }
        if !(self.cpc_upper > 0.0) {
            return fail(format!("cpc_upper {} must be positive", self.cpc_upper));
        }
        if self.has_lower() && self.cpc_upper <= self.cpc_lower {
            return fail(format!(
                "cpc_upper {} must exceed cpc_lower {}",
                self.cpc_upper, self.cpc_lower
            ));
        }
        if self.start_step > self.end_step {
            return fail(format!(
                "start_step {} after end_step {}",
                self.start_step, self.end_step
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn has_upper(&self) -> bool {
        self.cpc_upper.is_finite()
    }

    #[inline]
    pub fn has_lower(&self) -> bool {
        self.cpc_lower > 0.0
    }

    pub fn is_budget_only(&self) -> bool {
        !self.has_upper() && !self.has_lower()
    }

    /// Coefficient of `obj` in the bid numerator.
    #[inline]
    pub fn value_scale(&self) -> f64 {
        if self.has_upper() {
            self.cpc_upper
        } else {
            1.0
        }
    }

    pub fn n_steps(&self) -> u32 {
        self.end_step - self.start_step + 1
    }

    /// Same campaign with the CPC corridor narrowed by `eps` on both sides.
    pub fn tightened(&self, eps: f64) -> Self {
        let mut c = self.clone();
        if c.has_upper() {
            c.cpc_upper -= eps;
        }
        if c.has_lower() {
            c.cpc_lower += eps;
        }
        c
    }
}

/// Lagrange multipliers of the budget, CPC-upper and CPC-lower constraints.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DualVars {
    pub p: f64,
    pub q_u: f64,
    pub q_l: f64,
}

impl DualVars {
    pub fn new(p: f64, q_u: f64, q_l: f64) -> Self {
        Self { p, q_u, q_l }
    }

    /// Build from the signed CPC multiplier used by the solver: `q ≥ 0` is an
    /// upper-bound multiplier, `q < 0` a lower-bound one.
    pub fn from_signed(p: f64, q: f64) -> Self {
        Self {
            p,
            q_u: q.max(0.0),
            q_l: (-q).max(0.0),
        }
    }

    #[inline]
    pub fn signed_q(&self) -> f64 {
        self.q_u - self.q_l
    }

    /// `p + q_u − q_l`, the bid denominator.
    #[inline]
    pub fn denominator(&self) -> f64 {
        self.p + self.q_u - self.q_l
    }

    /// `C_u·q_u − C_l·q_l`, with inactive terms skipped so an infinite upper
    /// bound never meets a zero multiplier.
    #[inline]
    pub fn offset(&self, campaign: &Campaign) -> f64 {
        let mut k = 0.0;
        if self.q_u > 0.0 {
            k += campaign.cpc_upper * self.q_u;
        }
        if self.q_l > 0.0 {
            k -= campaign.cpc_lower * self.q_l;
        }
        k
    }

    pub fn is_valid(&self) -> bool {
        self.p >= 0.0 && self.q_u >= 0.0 && self.q_l >= 0.0 && self.denominator() > 0.0
    }

    fn checked_denominator(&self) -> Result<f64> {
        let d = self.denominator();
        if d > 0.0 && d.is_finite() {
            Ok(d)
        } else {
            Err(BidError::DegenerateDuals(d))
        }
    }
}

/// Linear bid parameters: `bid = alpha·obj + beta`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BidParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BidParams {
    #[inline]
    pub fn bid(&self, obj: f64) -> f64 {
        self.alpha * obj + self.beta
    }

    #[inline]
    pub fn wins(&self, imp: &Impression) -> bool {
        self.bid(imp.obj) > imp.wp
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite()
    }
}

/// Cumulative outcome of an allocation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AccumStats {
    pub cost: f64,
    pub clicks: f64,
    pub value: f64,
    pub wins: u64,
    pub seen: u64,
}

impl AccumStats {
    #[inline]
    pub fn record(&mut self, imp: &Impression, won: bool) {
        self.seen += 1;
        if won {
            self.win(imp);
        }
    }

    #[inline]
    pub fn win(&mut self, imp: &Impression) {
        self.cost += imp.cost();
        self.clicks += imp.pctr;
        self.value += imp.value();
        self.wins += 1;
    }

    pub fn cpc(&self) -> f64 {
        effective_cpc(self)
    }
}

impl std::ops::AddAssign for AccumStats {
    fn add_assign(&mut self, rhs: Self) {
        self.cost += rhs.cost;
        self.clicks += rhs.clicks;
        self.value += rhs.value;
        self.wins += rhs.wins;
        self.seen += rhs.seen;
    }
}

impl std::ops::Add for AccumStats {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl std::iter::Sum for AccumStats {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Optimal bid for an impression with per-click value `obj`.
pub fn bid_price(duals: &DualVars, campaign: &Campaign, obj: f64) -> Result<f64> {
    let d = duals.checked_denominator()?;
    Ok((campaign.value_scale() * obj + duals.offset(campaign)) / d)
}

pub fn to_bid_params(duals: &DualVars, campaign: &Campaign) -> Result<BidParams> {
    let d = duals.checked_denominator()?;
    Ok(BidParams {
        alpha: campaign.value_scale() / d,
        beta: duals.offset(campaign) / d,
    })
}

/// Greedy 0-1 rule: win iff `obj` strictly exceeds the dual threshold
/// `(wp·(p + q_u − q_l) − C_u·q_u + C_l·q_l) / C_u`.
pub fn win_decision(duals: &DualVars, campaign: &Campaign, imp: &Impression) -> Result<bool> {
    let d = duals.checked_denominator()?;
    Ok(wins_unchecked(
        campaign.value_scale(),
        duals.offset(campaign),
        d,
        imp,
    ))
}

/// Threshold rule in multiplied-out form; callers guarantee `denominator > 0`.
#[inline]
pub(crate) fn wins_unchecked(scale: f64, offset: f64, denominator: f64, imp: &Impression) -> bool {
    scale * imp.obj + offset > imp.wp * denominator
}

/// Realized CPC; zero-click stats report 0 and count as compliant.
pub fn effective_cpc(stats: &AccumStats) -> f64 {
    if stats.clicks > 0.0 {
        stats.cost / stats.clicks
    } else {
        0.0
    }
}

/// Whether realized stats sit inside the campaign's CPC corridor.
pub fn cpc_compliant(stats: &AccumStats, campaign: &Campaign, slack: f64) -> bool {
    if stats.clicks <= 0.0 {
        return true;
    }
    let cpc = stats.cost / stats.clicks;
    let upper_ok = !campaign.has_upper() || cpc <= campaign.cpc_upper + slack;
    let lower_ok = !campaign.has_lower() || cpc >= campaign.cpc_lower - slack;
    upper_ok && lower_ok
}

/// CPC-bound slack that keeps the greedy 0-1 solution within the corridor:
/// `max(2·C_u² / (B − 2·C_u), 2·C_l·max_wp / B)`; the first term is dropped
/// without an upper bound.
pub fn epsilon_c(campaign: &Campaign, max_wp: f64) -> Result<f64> {
    let b = campaign.budget;
    let cu = campaign.cpc_upper;
    let upper = if campaign.has_upper() {
        if !(b > 2.0 * cu) {
            return Err(BidError::EpsilonUndefined {
                budget: b,
                cpc_upper: cu,
            });
        }
        2.0 * cu * cu / (b - 2.0 * cu)
    } else {
        0.0
    };
    let lower = 2.0 * campaign.cpc_lower * max_wp / b;
    Ok(upper.max(lower))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camp(cu: f64, cl: f64) -> Campaign {
        Campaign::with_cpc("c", 100.0, cu, cl, 0, 47)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn bid_price_examples() {
        let c = camp(2.0, 1.0);
        assert!(close(bid_price(&DualVars::new(1.0, 0.0, 0.0), &c, 0.5).unwrap(), 1.0));
        let b = bid_price(&DualVars::new(0.5, 0.25, 0.0), &c, 0.3).unwrap();
        assert!(close(b, 1.1 / 0.75), "{b}");
        let b = bid_price(&DualVars::new(1.0, 0.0, 0.5), &c, 0.4).unwrap();
        assert!(close(b, 0.6), "{b}");
    }

    #[test]
    fn degenerate_duals_rejected() {
        let c = camp(2.0, 1.0);
        let d = DualVars::new(0.5, 0.0, 0.5);
        assert!(matches!(bid_price(&d, &c, 1.0), Err(BidError::DegenerateDuals(_))));
        assert!(to_bid_params(&d, &c).is_err());
        let imp = Impression::new(0, 0.5, 1.0, 1.0).unwrap();
        assert!(win_decision(&d, &c, &imp).is_err());
    }

    #[test]
    fn bid_params_examples() {
        let c = camp(2.0, 1.0);
        let bp = to_bid_params(&DualVars::new(1.0, 0.0, 0.0), &c).unwrap();
        assert!(close(bp.alpha, 2.0) && bp.beta == 0.0);
        let bp = to_bid_params(&DualVars::new(0.5, 0.25, 0.0), &c).unwrap();
        assert!(close(bp.alpha, 8.0 / 3.0) && close(bp.beta, 2.0 / 3.0));
        let bp = to_bid_params(&DualVars::new(2.0, 0.0, 1.0), &c).unwrap();
        assert!(close(bp.alpha, 2.0) && close(bp.beta, -1.0));
    }

    #[test]
    fn win_decision_examples() {
        let c = camp(2.0, 1.0);
        let unit = DualVars::new(1.0, 0.0, 0.0);
        let imp = |wp, obj| Impression::new(0, 1.0, wp, obj).unwrap();
        assert!(win_decision(&unit, &c, &imp(1.0, 0.6)).unwrap());
        // exact tie loses
        assert!(!win_decision(&unit, &c, &imp(1.0, 0.5)).unwrap());
        let d = DualVars::new(0.5, 0.25, 0.0);
        assert!(!win_decision(&d, &c, &imp(1.5, 0.3)).unwrap());
    }

    #[test]
    fn budget_only_bids_are_finite() {
        let c = Campaign::budget_only("bcb", 10.0, 0, 47);
        let bp = to_bid_params(&DualVars::new(0.5, 0.0, 0.0), &c).unwrap();
        assert_eq!(bp, BidParams { alpha: 2.0, beta: 0.0 });
    }

    #[test]
    fn effective_cpc_examples() {
        let s = AccumStats { cost: 150.0, clicks: 100.0, ..Default::default() };
        assert!(close(effective_cpc(&s), 1.5));
        assert_eq!(effective_cpc(&AccumStats::default()), 0.0);
        let s = AccumStats { cost: 240477.0, clicks: 160318.0, ..Default::default() };
        assert!((effective_cpc(&s) - 1.50).abs() < 5e-3);
    }

    #[test]
    fn zero_clicks_are_compliant() {
        assert!(cpc_compliant(&AccumStats::default(), &camp(2.0, 1.0), 0.0));
    }

    #[test]
    fn epsilon_c_examples() {
        let c = Campaign::with_cpc("c", 300.0, 2.0, 1.2, 0, 47);
        let e = epsilon_c(&c, 3.0).unwrap();
        assert!(close(e, 8.0 / 296.0), "{e}");
        assert!((e - 0.027027).abs() < 1e-6);

        let c0 = Campaign::with_cpc("c", 300.0, 2.0, 0.0, 0, 47);
        assert!(close(epsilon_c(&c0, 3.0).unwrap(), 8.0 / 296.0));

        let big = Campaign::with_cpc("c", 1e9, 2.0, 1.2, 0, 47);
        let e = epsilon_c(&big, 3.0).unwrap();
        assert!(e < 1e-8 && close(e, 8.0 / (1e9 - 4.0)));

        let small = Campaign::with_cpc("c", 4.0, 2.0, 1.2, 0, 47);
        assert!(matches!(epsilon_c(&small, 3.0), Err(BidError::EpsilonUndefined { .. })));

        let lower_only = Campaign::with_cpc("c", 4.0, f64::INFINITY, 1.2, 0, 47);
        assert!(close(epsilon_c(&lower_only, 3.0).unwrap(), 1.8));
    }

    #[test]
    fn impression_validation() {
        assert!(Impression::new(0, 1.2, 1.0, 1.0).is_err());
        assert!(Impression::new(0, 0.5, 0.0, 1.0).is_err());
        assert!(Impression::new(0, 0.5, 1.0, -0.1).is_err());
        assert!(Impression::new(0, 0.0, 1.0, 0.0).is_ok());
    }

    #[test]
    fn campaign_validation() {
        assert!(camp(2.0, 1.0).validate().is_ok());
        assert!(camp(1.0, 2.0).validate().is_err());
        assert!(Campaign::budget_only("b", 1.0, 0, 47).validate().is_ok());
        assert!(Campaign::budget_only("b", 1.0, 5, 4).validate().is_err());
    }
}
