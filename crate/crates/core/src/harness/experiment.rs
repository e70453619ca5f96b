//! Train/test experiment over a population of campaigns.
//!
//! Every campaign sees its own pseudo-random share of each period's traffic.
//! Budgets and CPC bounds are derived from the training period; the optimum
//! R* of each campaign is the exact LP on its test traffic.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{load_traffic, LoadOptions};
use super::episode::{run_episode, EpisodeResult};
use super::metrics::{compute_metrics, MetricsReport, DEFAULT_LAMBDA};
use super::synth::{synth_generate, SynthConfig};
use crate::allocator::TrafficSlice;
use crate::controllers::{bicb_controller, manual_controller, online_lp_controller, pid_controller, Controller, PidConfig};
use crate::error::{BidError, Result};
use crate::model::{AccumStats, Campaign};
use crate::oracle::lp_optimal;
use crate::predictor::{oracle_predictor, train_empirical, PredictorModel};
use crate::solver::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Manual,
    Pid,
    OnlineLp,
    Bicb,
    BicbStar,
    OfflineLp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Manual,
        Method::Pid,
        Method::OnlineLp,
        Method::Bicb,
        Method::BicbStar,
        Method::OfflineLp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Manual => "manual",
            Method::Pid => "pid",
            Method::OnlineLp => "online_lp",
            Method::Bicb => "bicb",
            Method::BicbStar => "bicb_star",
            Method::OfflineLp => "offline_lp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = BidError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| BidError::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Budget only.
    Bcb,
    /// Budget plus CPC bounds.
    Bicb,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Bcb => "bcb",
            Setting::Bicb => "bicb",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = BidError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bcb" => Ok(Setting::Bcb),
            "bicb" => Ok(Setting::Bicb),
            _ => Err(BidError::Config(format!("unknown setting `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficKind {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    pub source: TrafficKind,
    /// Traffic CSV when `source = "file"`.
    pub path: Option<PathBuf>,
    pub n_steps: u32,
    /// Synthetic periods used for training; the next one is the test period.
    pub train_days: u32,
    /// File periods used for training; default all but the test period.
    pub train_periods: Vec<String>,
    /// File period evaluated; default the last one.
    pub test_period: Option<String>,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            source: TrafficKind::Synthetic,
            path: None,
            n_steps: 48,
            train_days: 1,
            train_periods: Vec::new(),
            test_period: None,
        }
    }
}

/// How campaigns are drawn. Ranges are `[lo, hi]`, sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub count: usize,
    /// Fraction of each period's impressions a campaign can bid on.
    pub share: f64,
    /// Budget as a fraction of the campaign's training-period traffic cost.
    pub budget_fraction: [f64; 2],
    /// Fraction of campaigns whose lower CPC bound is the binding one.
    pub lower_binding_share: f64,
    /// Upper bound over the reference CPC, for upper-binding campaigns.
    pub upper_ratio: [f64; 2],
    /// Lower bound over the reference CPC, for upper-binding campaigns.
    pub loose_lower_ratio: f64,
    /// Lower bound over the reference CPC, for lower-binding campaigns.
    pub lower_ratio: [f64; 2],
    /// Upper bound over the lower bound, for lower-binding campaigns.
    pub loose_upper_ratio: f64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            count: 10,
            share: 0.5,
            budget_fraction: [0.05, 0.3],
            lower_binding_share: 0.3,
            upper_ratio: [0.8, 0.95],
            loose_lower_ratio: 0.3,
            lower_ratio: [1.03, 1.15],
            loose_upper_ratio: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub setting: Setting,
    pub methods: Vec<Method>,
    pub lambda: f64,
    /// Volume calibration of the empirical predictor.
    pub calibration: f64,
    /// Manual bid as a multiple of the median training win price.
    pub manual_factor: f64,
    pub traffic: TrafficConfig,
    /// Per-period generator settings; `seed` is overridden per period.
    pub synth: SynthConfig,
    pub campaigns: CampaignConfig,
    pub solver: SolverConfig,
    /// `initial_alpha` is overridden from training traffic.
    pub pid: PidConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            setting: Setting::Bcb,
            methods: Method::ALL.to_vec(),
            lambda: DEFAULT_LAMBDA,
            calibration: 1.0,
            manual_factor: 1.0,
            traffic: TrafficConfig::default(),
            synth: SynthConfig {
                value_ramp: 0.3,
                ..Default::default()
            },
            campaigns: CampaignConfig::default(),
            solver: SolverConfig::default(),
            pid: PidConfig::default(),
        }
    }
}

fn range_ok(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && 0.0 < r[0] && r[0] <= r[1]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| BidError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| BidError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BidError::Config(m));
        if self.methods.is_empty() {
            return bad("no methods selected".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return bad(format!("method `{m}` listed twice"));
            }
        }
        if !(self.lambda >= 1.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be at least 1", self.lambda));
        }
        if !(self.calibration > 0.0 && self.calibration.is_finite()) {
            return bad(format!("calibration {} must be positive", self.calibration));
        }
        if !(self.manual_factor > 0.0 && self.manual_factor.is_finite()) {
            return bad(format!("manual_factor {} must be positive", self.manual_factor));
        }
        let t = &self.traffic;
        if t.n_steps == 0 {
            return bad("traffic.n_steps must be positive".into());
        }
        match t.source {
            TrafficKind::Synthetic if t.train_days == 0 => return bad("traffic.train_days must be positive".into()),
            TrafficKind::File if t.path.is_none() => return bad("traffic.path is required for file traffic".into()),
            _ => {}
        }
        let c = &self.campaigns;
        let ok = c.count >= 1
            && c.share > 0.0
            && c.share <= 1.0
            && range_ok(c.budget_fraction)
            && range_ok(c.upper_ratio)
            && range_ok(c.lower_ratio)
            && (0.0..=1.0).contains(&c.lower_binding_share)
            && c.loose_lower_ratio >= 0.0
            && c.loose_upper_ratio > 1.0
            && c.loose_lower_ratio < c.upper_ratio[0];
        if !ok {
            return bad(format!("invalid campaigns section {c:?}"));
        }
        self.synth.validate()?;
        self.solver.validate()?;
        self.pid.validate()
    }
}

/// One line of the report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub setting: Setting,
    pub revenue: f64,
    pub cost: f64,
    pub br: f64,
    pub r_over_rstar: f64,
    pub ocr: f64,
    pub g: f64,
}

pub const REPORT_HEADER: &str = "method,setting,revenue,cost,br,r_over_rstar,ocr,g";

pub fn write_report<W: Write>(writer: W, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(REPORT_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub campaigns: Vec<Campaign>,
    pub rows: Vec<ReportRow>,
    pub reports: Vec<(Method, MetricsReport)>,
    /// Per method, one episode per campaign in campaign order; absent for
    /// the offline LP.
    pub episodes: Vec<(Method, Vec<EpisodeResult>)>,
    pub warnings: Vec<String>,
}

/// Train/test traffic for one experiment.
#[derive(Debug, Clone)]
pub struct Periods {
    pub train: Vec<(String, TrafficSlice)>,
    pub test: (String, TrafficSlice),
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Periods `day-1 ..= day-count`, period `k` drawn with a seed derived from
/// `seed` and `k`. `synth.seed` is ignored.
pub fn synthetic_periods(synth: &SynthConfig, seed: u64, count: u32) -> Result<Vec<(String, TrafficSlice)>> {
    (0..count)
        .map(|k| {
            synth_generate(&SynthConfig {
                seed: mix(seed, k as u64),
                ..synth.clone()
            })
            .map(|s| (format!("day-{}", k + 1), s))
        })
        .collect()
}

pub fn prepare_periods(cfg: &ExperimentConfig) -> Result<Periods> {
    let t = &cfg.traffic;
    match t.source {
        TrafficKind::Synthetic => {
            let synth = SynthConfig {
                n_steps: t.n_steps,
                ..cfg.synth.clone()
            };
            let mut train = synthetic_periods(&synth, cfg.seed, t.train_days + 1)?;
            let test = train.pop().expect("at least one period");
            Ok(Periods { train, test })
        }
        TrafficKind::File => {
            let path = t.path.as_ref().expect("validated");
            let mut periods = load_traffic(path, LoadOptions { n_steps: t.n_steps })?;
            if periods.is_empty() {
                return Err(BidError::Config(format!("{} holds no traffic", path.display())));
            }
            let test_idx = match &t.test_period {
                Some(id) => periods
                    .iter()
                    .position(|(p, _)| p == id)
                    .ok_or_else(|| BidError::Config(format!("test period `{id}` not found")))?,
                None => periods.len() - 1,
            };
            let test = periods.remove(test_idx);
            let train: Vec<_> = if t.train_periods.is_empty() {
                periods
            } else {
                t.train_periods
                    .iter()
                    .map(|id| {
                        periods
                            .iter()
                            .find(|(p, _)| p == id)
                            .cloned()
                            .ok_or_else(|| BidError::Config(format!("training period `{id}` not found")))
                    })
                    .collect::<Result<_>>()?
            };
            // a single period trains on itself
            let train = if train.is_empty() { vec![test.clone()] } else { train };
            Ok(Periods { train, test })
        }
    }
}

/// The impressions campaign `k` may bid on.
fn campaign_share(slice: &TrafficSlice, seed: u64, k: usize, period: u64, share: f64) -> Result<TrafficSlice> {
    if share >= 1.0 {
        return Ok(slice.clone());
    }
    let cut = (share * u64::MAX as f64) as u64;
    let key = mix(mix(seed, 0xC0FFEE ^ k as u64), period);
    let imps = slice
        .impressions()
        .iter()
        .enumerate()
        .filter(|(i, _)| mix(key, *i as u64) < cut)
        .map(|(_, imp)| *imp)
        .collect();
    TrafficSlice::new(imps, slice.first_step(), slice.last_step())
}

struct CampaignData {
    campaign: Campaign,
    train: Vec<TrafficSlice>,
    test: TrafficSlice,
    pid_alpha: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn build_campaigns(cfg: &ExperimentConfig, periods: &Periods) -> Result<Vec<CampaignData>> {
    let c = &cfg.campaigns;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xCA4E));
    let draws: Vec<(f64, bool, f64)> = (0..c.count)
        .map(|_| {
            let budget_frac = rng.random_range(c.budget_fraction[0]..=c.budget_fraction[1]);
            let lower_binding = rng.random::<f64>() < c.lower_binding_share;
            let r = if lower_binding {
                rng.random_range(c.lower_ratio[0]..=c.lower_ratio[1])
            } else {
                rng.random_range(c.upper_ratio[0]..=c.upper_ratio[1])
            };
            (budget_frac, lower_binding, r)
        })
        .collect();
    let last = cfg.traffic.n_steps - 1;
    draws
        .into_par_iter()
        .enumerate()
        .map(|(k, (budget_frac, lower_binding, ratio))| {
            let train = periods
                .train
                .iter()
                .enumerate()
                .map(|(j, (_, s))| campaign_share(s, cfg.seed, k, j as u64, c.share))
                .collect::<Result<Vec<_>>>()?;
            let test = campaign_share(&periods.test.1, cfg.seed, k, u64::MAX, c.share)?;
            let n_train = train.len() as f64;
            let train_cost = train.iter().map(TrafficSlice::total_cost).sum::<f64>() / n_train;
            let id = format!("c{k:03}");
            let budget = budget_frac * train_cost;
            let wps: Vec<f64> = train.iter().flat_map(|s| s.impressions().iter().map(|i| i.wp)).collect();
            let objs: f64 = train.iter().flat_map(|s| s.impressions().iter().map(|i| i.obj)).sum();
            let wp_sum: f64 = wps.iter().sum();
            let pid_alpha = if objs > 0.0 && wp_sum > 0.0 { wp_sum / objs } else { 1.0 };
            let manual = median(wps) * cfg.manual_factor;
            let mut campaign = Campaign::budget_only(id, budget, 0, last);
            if cfg.setting == Setting::Bicb {
                let cpc_ref = reference_cpc(&train[0], &campaign, &cfg.solver)?;
                let (upper, lower) = if lower_binding {
                    let l = cpc_ref * ratio;
                    (l * c.loose_upper_ratio, l)
                } else {
                    (cpc_ref * ratio, cpc_ref * c.loose_lower_ratio)
                };
                campaign = Campaign::with_cpc(campaign.id, budget, upper, lower, 0, last);
            }
            if manual > 0.0 {
                campaign = campaign.with_manual_bid(manual);
            }
            Ok(CampaignData {
                campaign,
                train,
                test,
                pid_alpha,
            })
        })
        .collect()
}

/// CPC of the budget-only optimum on the training traffic.
fn reference_cpc(train: &TrafficSlice, campaign: &Campaign, cfg: &SolverConfig) -> Result<f64> {
    let lp = lp_optimal(train, campaign, cfg)?;
    if lp.clicks > 0.0 {
        Ok(lp.cost / lp.clicks)
    } else {
        let clicks: f64 = train.impressions().iter().map(|i| i.pctr).sum();
        Ok(if clicks > 0.0 { train.total_cost() / clicks } else { 1.0 })
    }
}

fn make_controller(
    method: Method,
    d: &CampaignData,
    cfg: &ExperimentConfig,
) -> Result<Box<dyn Controller>> {
    Ok(match method {
        Method::Manual => {
            let bid = d
                .campaign
                .manual_bid
                .ok_or_else(|| BidError::InvalidController(format!("campaign {} has no manual bid", d.campaign.id)))?;
            Box::new(manual_controller(bid)?)
        }
        Method::Pid => Box::new(pid_controller(PidConfig {
            initial_alpha: d.pid_alpha,
            ..cfg.pid.clone()
        })?),
        Method::OnlineLp => Box::new(online_lp_controller(&d.train[0], &d.campaign, &cfg.solver)?),
        Method::Bicb => {
            let model: Arc<dyn PredictorModel> = Arc::new(train_empirical(d.train.clone(), cfg.calibration)?);
            Box::new(bicb_controller(model, cfg.solver)?)
        }
        Method::BicbStar => Box::new(bicb_controller(Arc::new(oracle_predictor(d.test.clone())), cfg.solver)?),
        Method::OfflineLp => unreachable!("offline LP has no controller"),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let periods = prepare_periods(cfg)?;
    run_experiment_on(cfg, &periods)
}

pub fn run_experiment_on(cfg: &ExperimentConfig, periods: &Periods) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let data = build_campaigns(cfg, periods)?;
    let lps = data
        .par_iter()
        .map(|d| lp_optimal(&d.test, &d.campaign, &cfg.solver))
        .collect::<Result<Vec<_>>>()?;
    let campaigns: Vec<Campaign> = data.iter().map(|d| d.campaign.clone()).collect();
    let r_star: Vec<f64> = lps.iter().map(|l| l.value).collect();

    let mut out = ExperimentOutput {
        campaigns,
        rows: Vec::new(),
        reports: Vec::new(),
        episodes: Vec::new(),
        warnings: Vec::new(),
    };
    for &method in &cfg.methods {
        let stats: Vec<AccumStats> = if method == Method::OfflineLp {
            lps.iter().map(|l| l.stats()).collect()
        } else {
            let eps = data
                .par_iter()
                .map(|d| {
                    let mut ctl = make_controller(method, d, cfg)?;
                    run_episode(&d.campaign, ctl.as_mut(), &d.test)
                })
                .collect::<Result<Vec<_>>>()?;
            for e in &eps {
                out.warnings
                    .extend(e.warnings.iter().map(|w| format!("{method} {}: {w}", e.campaign_id)));
            }
            let s = eps.iter().map(|e| e.final_stats).collect();
            out.episodes.push((method, eps));
            s
        };
        let report = compute_metrics(&out.campaigns, &stats, &r_star, cfg.lambda)?;
        out.rows.push(ReportRow {
            method,
            setting: cfg.setting,
            revenue: report.revenue,
            cost: report.cost,
            br: report.br,
            r_over_rstar: report.r_over_rstar,
            ocr: report.ocr,
            g: report.g,
        });
        out.reports.push((method, report));
    }
    Ok(out)
}
