//! Randomized property suites: greedy gap, LP dominance, replay
//! monotonicity, solver convergence and positivity of the bid denominator.
//!
//! Every suite is deterministic for a fixed seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{replay, ReplayMode, SmoothedReplay, TrafficSlice};
use crate::error::{BidError, Result};
use crate::harness::experiment::mix;
use crate::harness::synth::{assumption1_check, synth_generate, SynthConfig};
use crate::model::{Campaign, DualVars, Impression};
use crate::oracle::{brute_force_01, greedy_01, lp_optimal, verify_gap};
use crate::solver::{cpc_gap, solve, CpcRegime, ReplayResponse, SmoothedResponse, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub gap_instances: usize,
    /// Largest instance for the brute-force comparisons.
    pub max_n: usize,
    pub monotone_instances: usize,
    pub grid_points: usize,
    pub solver_runs: usize,
    pub positivity_campaigns: usize,
    pub solver: SolverConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gap_instances: 1000,
            max_n: 15,
            monotone_instances: 100,
            grid_points: 20,
            solver_runs: 1000,
            positivity_campaigns: 100,
            solver: SolverConfig::default(),
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_n == 0 || self.max_n > crate::oracle::BRUTE_FORCE_LIMIT {
            return Err(BidError::Config(format!(
                "max_n must be in 1..={}",
                crate::oracle::BRUTE_FORCE_LIMIT
            )));
        }
        if self.grid_points < 2 {
            return Err(BidError::Config("grid_points must be at least 2".into()));
        }
        self.solver.validate()
    }
}

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Draws rejected before checking (outside the suite's preconditions).
    pub redrawn: usize,
    /// First few failures.
    pub examples: Vec<String>,
}

const MAX_EXAMPLES: usize = 5;
/// Give up on a suite after this many rejected draws per requested case.
const MAX_REDRAWS_PER_CASE: usize = 20;

impl SuiteReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            cases: 0,
            failures: 0,
            redrawn: 0,
            examples: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            if self.examples.len() < MAX_EXAMPLES {
                self.examples.push(detail());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }

    /// One line: name, verdict and counts.
    pub fn summary(&self) -> String {
        format!(
            "{} {}: {} cases, {} failures, {} redrawn",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.failures,
            self.redrawn
        )
    }
}

fn rng_for(seed: u64, suite: u64, k: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, suite), k as u64))
}

fn random_slice(rng: &mut ChaCha8Rng, n: usize, n_steps: u32) -> TrafficSlice {
    let imps = (0..n)
        .map(|_| {
            let step = rng.random_range(0..n_steps);
            let pctr = rng.random_range(0.05..1.0);
            let wp = rng.random_range(0.05..1.0);
            let obj = rng.random_range(0.0..1.0);
            Impression::new(step, pctr, wp, obj).expect("valid draw")
        })
        .collect();
    TrafficSlice::from_steps(imps, n_steps).expect("valid slice")
}

fn mean_cpc(slice: &TrafficSlice) -> f64 {
    let clicks: f64 = slice.impressions().iter().map(|i| i.pctr).sum();
    slice.total_cost() / clicks
}

/// Small instance in one of three settings: budget only, upper bound, both
/// bounds. Budgets keep `B > 2·C_u` so the CPC slack is defined.
fn gap_instance(rng: &mut ChaCha8Rng, max_n: usize) -> (TrafficSlice, Campaign) {
    let n = rng.random_range(1..=max_n);
    let slice = random_slice(rng, n, 1);
    let total = slice.total_cost();
    let cpc = mean_cpc(&slice);
    let mut budget = total * rng.random_range(0.2..1.2);
    let campaign = match rng.random_range(0..3) {
        0 => Campaign::budget_only("gap", budget, 0, 0),
        1 => {
            let cu = cpc * rng.random_range(0.5..1.1);
            budget = budget.max(cu * rng.random_range(2.2..4.0));
            Campaign::with_cpc("gap", budget, cu, 0.0, 0, 0)
        }
        _ => {
            let cu = cpc * rng.random_range(1.1..1.5);
            let cl = cpc * rng.random_range(0.6..1.05);
            budget = budget.max(cu * rng.random_range(2.2..4.0));
            Campaign::with_cpc("gap", budget, cu, cl, 0, 0)
        }
    };
    (slice, campaign)
}

/// Greedy gap and LP dominance over the same instances.
pub fn gap_suites(cfg: &VerifyConfig) -> Result<(SuiteReport, SuiteReport)> {
    let mut gap = SuiteReport::new("greedy-gap");
    let mut lp = SuiteReport::new("lp-dominance");
    let mut draw = 0;
    while gap.cases < cfg.gap_instances {
        if draw >= cfg.gap_instances * MAX_REDRAWS_PER_CASE {
            break;
        }
        let mut rng = rng_for(cfg.seed, 1, draw);
        draw += 1;
        let (slice, campaign) = gap_instance(&mut rng, cfg.max_n);
        let greedy = match greedy_01(&slice, &campaign, &cfg.solver) {
            Err(BidError::InfeasibleLowerBound) => {
                gap.redrawn += 1;
                lp.redrawn += 1;
                continue;
            }
            r => r?,
        };
        let best = brute_force_01(&slice, &campaign)?;
        gap.check(verify_gap(&greedy.stats, best, &slice, &campaign), || {
            format!(
                "draw {}: greedy {:?} vs optimum {best} ({campaign:?})",
                draw - 1,
                greedy.stats
            )
        });
        match lp_optimal(&slice, &campaign, &cfg.solver) {
            Ok(sol) => {
                let tol = 1e-9 * best.abs().max(1.0);
                let dominates = sol.value >= best - tol;
                let equal = !sol.binding.is_empty() || (sol.value - best).abs() <= tol;
                lp.check(dominates && equal, || {
                    format!("draw {}: lp {} vs optimum {best}, binding {:?}", draw - 1, sol.value, sol.binding)
                });
            }
            Err(e) => lp.check(false, || format!("draw {}: {e}", draw - 1)),
        }
    }
    Ok((gap, lp))
}

/// Replay totals nonincreasing along a `p` grid; CPC gaps `g_u`, `g_l`
/// nonincreasing along `q` grids up to one impression's contribution.
pub fn monotonicity_suite(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("monotonicity");
    let k = cfg.grid_points;
    for inst in 0..cfg.monotone_instances {
        let mut rng = rng_for(cfg.seed, 2, inst);
        let slice = random_slice(&mut rng, 200, 4);
        let cpc = mean_cpc(&slice);
        let campaign = Campaign::with_cpc(
            "mono",
            slice.total_cost() * rng.random_range(0.1..0.6),
            cpc * rng.random_range(0.5..1.0),
            cpc * rng.random_range(1.0..1.5),
            0,
            3,
        );
        // the two bounds are swapped on purpose: each g is probed on its own
        let upper = Campaign {
            cpc_lower: 0.0,
            ..campaign.clone()
        };
        let lower = Campaign {
            cpc_upper: f64::INFINITY,
            ..campaign.clone()
        };

        // p grid at fixed q
        let q = rng.random_range(-0.05..0.5);
        let duals_at = |p: f64| DualVars::from_signed(p, q);
        let ps: Vec<f64> = (0..k)
            .map(|j| q.abs() + 0.01 * 1000f64.powf(j as f64 / (k - 1) as f64))
            .collect();
        let mut prev = None;
        let mut ok = true;
        for &p in &ps {
            let s = replay(&slice, &duals_at(p), &upper, ReplayMode::Unconstrained)?;
            if let Some((c, k, v)) = prev {
                ok &= s.cost <= c && s.clicks <= k && s.value <= v;
            }
            prev = Some((s.cost, s.clicks, s.value));
        }
        rep.check(ok, || format!("instance {inst}: replay not monotone in p at q = {q}"));

        let step = slice
            .impressions()
            .iter()
            .map(|i| i.pctr * (i.wp + campaign.cpc_upper.max(campaign.cpc_lower)))
            .fold(0.0, f64::max);
        let resp_u = ReplayResponse {
            impressions: slice.impressions(),
            campaign: &upper,
        };
        let resp_l = ReplayResponse {
            impressions: slice.impressions(),
            campaign: &lower,
        };
        for (resp, c, sign) in [(&resp_u, &upper, 1.0), (&resp_l, &lower, -1.0)] {
            let mut prev: Option<f64> = None;
            let mut ok = true;
            for j in 0..k {
                let q = sign * 2.0 * j as f64 / (k - 1) as f64;
                let (duals, _, g) = cpc_gap(resp, c, q, &cfg.solver)?;
                // budget slack at the smallest denominator: outside the
                // auction region, where the gap carries no order
                if q < 0.0 && duals.denominator() <= cfg.solver.dual_floor * (1.0 + 1e-6) {
                    break;
                }
                // q ordered by increasing signed value
                if let Some(pg) = prev {
                    ok &= if sign > 0.0 { g <= pg + step } else { g >= pg - step };
                }
                prev = Some(g);
            }
            rep.check(ok, || {
                format!("instance {inst}: g not monotone in q ({})", if sign > 0.0 { "upper" } else { "lower" })
            });
        }
    }
    Ok(rep)
}

/// Solves against continuous responses: residuals on active constraints
/// within `(1e-6·B)²` and at most `64²` evaluations.
pub fn solver_suite(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("solver-convergence");
    let mut draw = 0;
    while rep.cases < cfg.solver_runs {
        if draw >= cfg.solver_runs * MAX_REDRAWS_PER_CASE {
            break;
        }
        let mut rng = rng_for(cfg.seed, 3, draw);
        draw += 1;
        let n = rng.random_range(20..120);
        let slice = random_slice(&mut rng, n, 1);
        let cpc = mean_cpc(&slice);
        let budget = slice.total_cost() * rng.random_range(0.1..0.7);
        let campaign = match rng.random_range(0..3) {
            0 => Campaign::budget_only("smooth", budget, 0, 0),
            1 => Campaign::with_cpc("smooth", budget, cpc * rng.random_range(0.6..1.0), 0.0, 0, 0),
            _ => Campaign::with_cpc("smooth", budget, f64::INFINITY, cpc * rng.random_range(1.0..1.3), 0, 0),
        };
        let resp = SmoothedResponse {
            inner: SmoothedReplay {
                impressions: slice.impressions(),
                sigma: rng.random_range(0.02..0.1),
            },
            campaign: &campaign,
        };
        let sol = solve(&resp, &campaign, &DualVars::default(), &cfg.solver)?;
        if sol.flags.infeasible_lower || sol.flags.upper_unreachable {
            rep.redrawn += 1;
            continue;
        }
        let tol = (1e-6 * campaign.budget).powi(2);
        let r = &sol.residuals;
        let budget_ok = sol.duals.p <= cfg.solver.dual_floor || r.budget <= tol;
        let upper_ok = sol.duals.q_u <= 0.0 || r.upper.is_some_and(|u| u <= tol);
        let lower_ok = sol.duals.q_l <= 0.0 || r.lower.is_some_and(|l| l <= tol);
        let evals_ok = sol.evaluations <= 64 * 64;
        rep.check(budget_ok && upper_ok && lower_ok && evals_ok && !sol.flags.degraded, || {
            format!("draw {}: {:?} residuals {:?} evaluations {}", draw - 1, sol.duals, r, sol.evaluations)
        });
    }
    Ok(rep)
}

/// Campaigns with a binding lower CPC bound on generated traffic that passes
/// the value/price correlation check: every solve keeps `p + q_u − q_l > 0`.
pub fn positivity_suite(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::new("denominator-positivity");
    let mut draw = 0;
    while rep.cases < cfg.positivity_campaigns {
        if draw >= cfg.positivity_campaigns * MAX_REDRAWS_PER_CASE {
            break;
        }
        let mut rng = rng_for(cfg.seed, 4, draw);
        draw += 1;
        let slice = synth_generate(&SynthConfig {
            n_impressions: 2000,
            seed: rng.random(),
            ..Default::default()
        })?;
        let budget = slice.total_cost() * rng.random_range(0.05..0.3);
        let reference = lp_optimal(&slice, &Campaign::budget_only("ref", budget, 0, 47), &cfg.solver)?;
        let cpc_ref = reference.cost / reference.clicks;
        let campaign = Campaign::with_cpc("pos", budget, f64::INFINITY, cpc_ref * rng.random_range(1.02..1.15), 0, 47);
        if !assumption1_check(&slice, &campaign) {
            rep.redrawn += 1;
            continue;
        }
        let resp = ReplayResponse {
            impressions: slice.impressions(),
            campaign: &campaign,
        };
        let sol = solve(&resp, &campaign, &DualVars::default(), &cfg.solver)?;
        if sol.regime != CpcRegime::Lower {
            rep.redrawn += 1;
            continue;
        }
        let d = sol.duals.denominator();
        rep.check(d > 0.0 && !sol.flags.infeasible_lower, || {
            format!("draw {}: duals {:?} flags {:?}", draw - 1, sol.duals, sol.flags)
        });
    }
    Ok(rep)
}

/// All suites in a fixed order.
pub fn run_suites(cfg: &VerifyConfig) -> Result<Vec<SuiteReport>> {
    cfg.validate()?;
    let (gap, lp) = gap_suites(cfg)?;
    Ok(vec![
        gap,
        lp,
        monotonicity_suite(cfg)?,
        solver_suite(cfg)?,
        positivity_suite(cfg)?,
    ])
}
