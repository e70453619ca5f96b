//! Deterministic replay of impression traffic under fixed duals.
//!
//! `replay` is the discrete counterpart of the continuous `cost(p, q)` and
//! `click(p, q)` response surfaces: every impression is won or lost by the
//! strict threshold rule and contributes its expected cost and clicks.

use serde::{Deserialize, Serialize};

use crate::error::{BidError, Result};
use crate::model::{wins_unchecked, AccumStats, BidParams, Campaign, DualVars, Impression};

/// Ordered impressions of one traffic period, indexed by step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSlice {
    impressions: Vec<Impression>,
    first_step: u32,
    last_step: u32,
    /// `offsets[s - first_step]` is the index of the first impression at step `s`;
    /// one trailing entry equals `impressions.len()`.
    offsets: Vec<usize>,
}

impl TrafficSlice {
    /// Builds a slice covering `first_step..=last_step`. Impressions are
    /// stably sorted by step.
    pub fn new(mut impressions: Vec<Impression>, first_step: u32, last_step: u32) -> Result<Self> {
        if first_step > last_step {
            return Err(BidError::InvalidImpression(format!(
                "step range {first_step}..={last_step} is empty"
            )));
        }
        for imp in &impressions {
            imp.validate()?;
            if imp.step < first_step || imp.step > last_step {
                return Err(BidError::InvalidImpression(format!(
                    "step {} outside {first_step}..={last_step}",
                    imp.step
                )));
            }
        }
        impressions.sort_by_key(|imp| imp.step);
        let n_steps = (last_step - first_step + 1) as usize;
        let mut offsets = vec![0usize; n_steps + 1];
        for imp in &impressions {
            offsets[(imp.step - first_step) as usize + 1] += 1;
        }
        for i in 1..offsets.len() {
            offsets[i] += offsets[i - 1];
        }
        Ok(Self {
            impressions,
            first_step,
            last_step,
            offsets,
        })
    }

    /// Slice over steps `0..n_steps`.
    pub fn from_steps(impressions: Vec<Impression>, n_steps: u32) -> Result<Self> {
        Self::new(impressions, 0, n_steps.max(1) - 1)
    }

    pub fn impressions(&self) -> &[Impression] {
        &self.impressions
    }

    pub fn len(&self) -> usize {
        self.impressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.impressions.is_empty()
    }

    pub fn first_step(&self) -> u32 {
        self.first_step
    }

    pub fn last_step(&self) -> u32 {
        self.last_step
    }

    pub fn steps(&self) -> std::ops::RangeInclusive<u32> {
        self.first_step..=self.last_step
    }

    /// Impressions with `from <= step <= to`, clipped to the slice range.
    pub fn range(&self, from: u32, to: u32) -> &[Impression] {
        let from = from.max(self.first_step);
        let to = to.min(self.last_step);
        if from > to {
            return &[];
        }
        let a = self.offsets[(from - self.first_step) as usize];
        let b = self.offsets[(to - self.first_step) as usize + 1];
        &self.impressions[a..b]
    }

    pub fn bucket(&self, step: u32) -> &[Impression] {
        self.range(step, step)
    }

    pub fn max_wp(&self) -> f64 {
        self.impressions.iter().map(|i| i.wp).fold(0.0, f64::max)
    }

    pub fn max_obj(&self) -> f64 {
        self.impressions.iter().map(|i| i.obj).fold(0.0, f64::max)
    }

    /// Expected cost of winning everything.
    pub fn total_cost(&self) -> f64 {
        self.impressions.iter().map(Impression::cost).sum()
    }

    /// Same traffic with objective values replaced, index for index.
    pub(crate) fn with_objs(&self, objs: impl Iterator<Item = f64>) -> Self {
        let mut out = self.clone();
        for (imp, obj) in out.impressions.iter_mut().zip(objs) {
            imp.obj = obj;
        }
        out
    }

    /// Concatenation of two slices over the union of their step ranges.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let mut imps = self.impressions.clone();
        imps.extend_from_slice(&other.impressions);
        Self::new(
            imps,
            self.first_step.min(other.first_step),
            self.last_step.max(other.last_step),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplayMode {
    /// Ignore the budget; constraints are enforced through the duals.
    Unconstrained,
    /// Skip any impression that would push spend past the budget, but keep scanning.
    HardBudgetStop,
}

/// Core scan shared by every replay flavour.
#[inline]
pub(crate) fn scan<F: Fn(&Impression) -> bool>(
    imps: &[Impression],
    mode: ReplayMode,
    budget_left: f64,
    wins: F,
) -> AccumStats {
    let mut acc = AccumStats {
        seen: imps.len() as u64,
        ..Default::default()
    };
    match mode {
        ReplayMode::Unconstrained => {
            for imp in imps {
                if wins(imp) {
                    acc.win(imp);
                }
            }
        }
        ReplayMode::HardBudgetStop => {
            for imp in imps {
                if wins(imp) && acc.cost + imp.cost() <= budget_left {
                    acc.win(imp);
                }
            }
        }
    }
    acc
}

/// Replays impressions under fixed duals.
pub fn replay_impressions(
    imps: &[Impression],
    duals: &DualVars,
    campaign: &Campaign,
    mode: ReplayMode,
) -> Result<AccumStats> {
    let d = duals.denominator();
    if !(d > 0.0 && d.is_finite()) {
        return Err(BidError::DegenerateDuals(d));
    }
    let scale = campaign.value_scale();
    let offset = duals.offset(campaign);
    Ok(scan(imps, mode, campaign.budget, |imp| {
        wins_unchecked(scale, offset, d, imp)
    }))
}

pub fn replay(
    slice: &TrafficSlice,
    duals: &DualVars,
    campaign: &Campaign,
    mode: ReplayMode,
) -> Result<AccumStats> {
    replay_impressions(slice.impressions(), duals, campaign, mode)
}

/// Per-step deltas of an unconstrained replay, one per step of the slice.
pub fn replay_per_step(
    slice: &TrafficSlice,
    duals: &DualVars,
    campaign: &Campaign,
) -> Result<Vec<AccumStats>> {
    slice
        .steps()
        .map(|s| replay_impressions(slice.bucket(s), duals, campaign, ReplayMode::Unconstrained))
        .collect()
}

/// Replays impressions under linear bid parameters (`alpha·obj + beta > wp`).
pub fn replay_params(
    imps: &[Impression],
    params: &BidParams,
    budget_left: f64,
    mode: ReplayMode,
) -> AccumStats {
    scan(imps, mode, budget_left, |imp| params.wins(imp))
}

/// Which impressions (by index) win under `duals`.
pub fn won_set(slice: &TrafficSlice, duals: &DualVars, campaign: &Campaign) -> Result<Vec<bool>> {
    let d = duals.denominator();
    if !(d > 0.0) {
        return Err(BidError::DegenerateDuals(d));
    }
    let scale = campaign.value_scale();
    let offset = duals.offset(campaign);
    Ok(slice
        .impressions()
        .iter()
        .map(|imp| wins_unchecked(scale, offset, d, imp))
        .collect())
}

/// Continuous response surface obtained by blurring each impression's value
/// with Gaussian noise of width `sigma`: an impression is won with
/// probability `Φ((obj − threshold) / sigma)`. As `sigma → 0` this recovers
/// `replay`; for `sigma > 0` cost and clicks are smooth and strictly
/// decreasing in `p`, which is the setting the bisection schedule is proved in.
#[derive(Debug, Clone)]
pub struct SmoothedReplay<'a> {
    pub impressions: &'a [Impression],
    pub sigma: f64,
}

impl SmoothedReplay<'_> {
    pub fn totals(&self, duals: &DualVars, campaign: &Campaign) -> Result<(f64, f64)> {
        let d = duals.denominator();
        if !(d > 0.0 && d.is_finite()) {
            return Err(BidError::DegenerateDuals(d));
        }
        let scale = campaign.value_scale();
        let offset = duals.offset(campaign);
        let mut cost = 0.0;
        let mut clicks = 0.0;
        for imp in self.impressions {
            let threshold = (imp.wp * d - offset) / scale;
            let z = (imp.obj - threshold) / self.sigma;
            let w = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
            cost += w * imp.cost();
            clicks += w * imp.pctr;
        }
        Ok((cost, clicks))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn imp(step: u32, pctr: f64, wp: f64, obj: f64) -> Impression {
        Impression::new(step, pctr, wp, obj).unwrap()
    }

    fn unit_campaign() -> Campaign {
        Campaign::with_cpc("c", 1e9, 2.0, 0.0, 0, 1)
    }

    #[test]
    fn replay_single_winner() {
        let s = TrafficSlice::from_steps(vec![imp(0, 1.0, 1.0, 0.6), imp(0, 1.0, 1.0, 0.4)], 1).unwrap();
        let st = replay(&s, &DualVars::new(1.0, 0.0, 0.0), &unit_campaign(), ReplayMode::Unconstrained).unwrap();
        assert_eq!(st.cost, 1.0);
        assert_eq!(st.clicks, 1.0);
        assert!((st.value - 0.6).abs() < 1e-15);
        assert_eq!(st.wins, 1);
        assert_eq!(st.seen, 2);
    }

    #[test]
    fn tiny_p_wins_everything() {
        let s = TrafficSlice::from_steps(vec![imp(0, 0.5, 3.0, 0.2), imp(0, 0.1, 7.0, 0.01)], 1).unwrap();
        let st = replay(&s, &DualVars::new(1e-9, 0.0, 0.0), &unit_campaign(), ReplayMode::Unconstrained).unwrap();
        assert!((st.cost - s.total_cost()).abs() < 1e-12);
    }

    #[test]
    fn empty_slice_is_zero() {
        let s = TrafficSlice::from_steps(vec![], 48).unwrap();
        let st = replay(&s, &DualVars::new(1.0, 0.0, 0.0), &unit_campaign(), ReplayMode::Unconstrained).unwrap();
        assert_eq!(st, AccumStats::default());
    }

    #[test]
    fn per_step_single_bucket_matches_replay() {
        let s = TrafficSlice::from_steps(vec![imp(0, 0.5, 1.0, 0.9), imp(0, 0.3, 2.0, 0.1)], 1).unwrap();
        let d = DualVars::new(0.8, 0.0, 0.0);
        let c = unit_campaign();
        let per = replay_per_step(&s, &d, &c).unwrap();
        assert_eq!(per.len(), 1);
        assert_eq!(per[0], replay(&s, &d, &c, ReplayMode::Unconstrained).unwrap());
    }

    #[test]
    fn per_step_losing_bucket_is_zero() {
        // step-1 objs sit below the threshold obj > wp / 2
        let s = TrafficSlice::from_steps(
            vec![imp(0, 1.0, 1.0, 0.9), imp(1, 1.0, 1.0, 0.3), imp(1, 0.5, 2.0, 0.7)],
            2,
        )
        .unwrap();
        let per = replay_per_step(&s, &DualVars::new(1.0, 0.0, 0.0), &unit_campaign()).unwrap();
        assert_eq!(per.len(), 2);
        assert_eq!(per[0].wins, 1);
        assert_eq!(per[1].wins, 0);
        assert_eq!(per[1].cost, 0.0);
        assert_eq!(per[1].seen, 2);
    }

    #[test]
    fn hard_budget_stop_skips_but_continues() {
        let s = TrafficSlice::from_steps(
            vec![imp(0, 1.0, 2.0, 5.0), imp(0, 1.0, 5.0, 5.0), imp(0, 1.0, 1.0, 5.0)],
            1,
        )
        .unwrap();
        let c = Campaign::with_cpc("c", 3.5, 10.0, 0.0, 0, 0);
        let st = replay(&s, &DualVars::new(1e-6, 0.0, 0.0), &c, ReplayMode::HardBudgetStop).unwrap();
        assert_eq!(st.wins, 2);
        assert_eq!(st.cost, 3.0);
    }

    #[test]
    fn range_clips() {
        let s = TrafficSlice::new(vec![imp(3, 1.0, 1.0, 1.0), imp(5, 1.0, 1.0, 1.0)], 2, 6).unwrap();
        assert_eq!(s.range(0, 100).len(), 2);
        assert_eq!(s.range(4, 5).len(), 1);
        assert_eq!(s.range(6, 5).len(), 0);
        assert_eq!(s.bucket(2).len(), 0);
        assert!(TrafficSlice::new(vec![imp(9, 1.0, 1.0, 1.0)], 0, 5).is_err());
    }

    #[test]
    fn smoothed_replay_approaches_hard_replay() {
        let imps = vec![imp(0, 0.5, 1.0, 0.9), imp(0, 0.4, 2.0, 0.2), imp(0, 0.9, 0.5, 0.6)];
        let c = unit_campaign();
        let d = DualVars::new(0.7, 0.0, 0.0);
        let hard = replay_impressions(&imps, &d, &c, ReplayMode::Unconstrained).unwrap();
        let (cost, clicks) = SmoothedReplay { impressions: &imps, sigma: 1e-9 }.totals(&d, &c).unwrap();
        assert!((cost - hard.cost).abs() < 1e-12);
        assert!((clicks - hard.clicks).abs() < 1e-12);
    }

    fn arb_imps(max: usize) -> impl Strategy<Value = Vec<Impression>> {
        prop::collection::vec(
            (0u32..4, 0.01f64..1.0, 0.05f64..5.0, 0.0f64..2.0)
                .prop_map(|(s, c, w, o)| Impression { step: s, pctr: c, wp: w, obj: o }),
            0..max,
        )
    }

    proptest! {
        #[test]
        fn cost_nonincreasing_in_p(imps in arb_imps(60), p1 in 0.01f64..5.0, dp in 0.0f64..5.0, q in -0.5f64..0.5) {
            let c = Campaign::with_cpc("c", 1e9, 2.0, 0.5, 0, 3);
            let s = TrafficSlice::from_steps(imps, 4).unwrap();
            let lo = DualVars::from_signed(p1 + 0.5, q);
            let hi = DualVars::from_signed(p1 + 0.5 + dp, q);
            let a = replay(&s, &lo, &c, ReplayMode::Unconstrained).unwrap();
            let b = replay(&s, &hi, &c, ReplayMode::Unconstrained).unwrap();
            prop_assert!(a.cost >= b.cost && a.clicks >= b.clicks && a.value >= b.value);
            let wa = won_set(&s, &lo, &c).unwrap();
            let wb = won_set(&s, &hi, &c).unwrap();
            prop_assert!(wa.iter().zip(&wb).all(|(x, y)| *x || !*y));
        }

        #[test]
        fn replay_is_additive(a in arb_imps(40), b in arb_imps(40), p in 0.05f64..3.0) {
            let c = Campaign::with_cpc("c", 1e9, 2.0, 0.0, 0, 3);
            let d = DualVars::new(p, 0.0, 0.0);
            let sa = TrafficSlice::from_steps(a, 4).unwrap();
            let sb = TrafficSlice::from_steps(b, 4).unwrap();
            let whole = replay(&sa.concat(&sb).unwrap(), &d, &c, ReplayMode::Unconstrained).unwrap();
            let parts = replay(&sa, &d, &c, ReplayMode::Unconstrained).unwrap()
                + replay(&sb, &d, &c, ReplayMode::Unconstrained).unwrap();
            prop_assert!((whole.cost - parts.cost).abs() < 1e-9);
            prop_assert!((whole.clicks - parts.clicks).abs() < 1e-9);
            prop_assert_eq!(whole.wins, parts.wins);
            let per: AccumStats = replay_per_step(&sa, &d, &c).unwrap().into_iter().sum();
            let direct = replay(&sa, &d, &c, ReplayMode::Unconstrained).unwrap();
            prop_assert!((per.cost - direct.cost).abs() < 1e-9);
        }

        #[test]
        fn hard_stop_never_exceeds_budget(imps in arb_imps(60), budget in 0.0f64..10.0, p in 0.01f64..2.0) {
            let c = Campaign::with_cpc("c", budget, 2.0, 0.0, 0, 3);
            let s = TrafficSlice::from_steps(imps, 4).unwrap();
            let st = replay(&s, &DualVars::new(p, 0.0, 0.0), &c, ReplayMode::HardBudgetStop).unwrap();
            prop_assert!(st.cost <= budget);
        }
    }
}
