//! Remaining-horizon cost and click models ("time machines").
//!
//! A [`PredictorModel`] answers: if the campaign bids with these duals from
//! step `t` on, what cost and clicks will step `t` produce? The oracle
//! variant replays the true future; the empirical variant replays stored
//! historical traffic and averages across periods.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::allocator::{replay_impressions, ReplayMode, TrafficSlice};
use crate::error::{BidError, Result};
use crate::model::{AccumStats, Campaign, DualVars};
use crate::index::TrafficIndex;
use crate::solver::{IndexedResponse, ResponseFn, Totals};

/// Side information a learned model may condition on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignFeatures {
    pub category: String,
    /// `floor(log10(budget))`, clamped at zero.
    pub budget_band: u32,
    pub elapsed_fraction: f64,
}

impl CampaignFeatures {
    pub fn for_campaign(campaign: &Campaign, step: u32) -> Self {
        let elapsed = step.saturating_sub(campaign.start_step) as f64 / campaign.n_steps() as f64;
        Self {
            category: String::new(),
            budget_band: campaign.budget.max(1.0).log10().floor() as u32,
            elapsed_fraction: elapsed.clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub kind: String,
    pub trained_on: Vec<String>,
    pub calibration: f64,
}

pub trait PredictorModel: Send + Sync {
    /// Expected cost and clicks of a single step.
    fn predict_bucket(
        &self,
        campaign: &Campaign,
        features: &CampaignFeatures,
        step: u32,
        duals: &DualVars,
    ) -> Result<Totals>;

    /// Sum over `from..=to`. Implementations may override with a single pass.
    fn predict_range(
        &self,
        campaign: &Campaign,
        features: &CampaignFeatures,
        from: u32,
        to: u32,
        duals: &DualVars,
    ) -> Result<Totals> {
        let mut acc = Totals::default();
        for t in from..=to {
            let b = self.predict_bucket(campaign, features, t, duals)?;
            acc.cost += b.cost;
            acc.clicks += b.clicks;
        }
        Ok(acc)
    }

    fn metadata(&self) -> &ModelMetadata;

    /// When the prediction over `from..=to` is a weighted replay of stored
    /// impressions: an index over those impressions and the weight. Enables
    /// [`IndexedResponse`].
    fn replay_index(&self, _from: u32, _to: u32) -> Option<(TrafficIndex, f64)> {
        None
    }
}

/// Perfect foresight over a known future period.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    future: TrafficSlice,
    meta: ModelMetadata,
    index: OnceLock<TrafficIndex>,
}

pub fn oracle_predictor(future: TrafficSlice) -> OraclePredictor {
    OraclePredictor {
        future,
        meta: ModelMetadata {
            kind: "oracle".into(),
            trained_on: Vec::new(),
            calibration: 1.0,
        },
        index: OnceLock::new(),
    }
}

fn replay_totals(slice: &TrafficSlice, campaign: &Campaign, from: u32, to: u32, duals: &DualVars) -> Result<Totals> {
    let s = replay_impressions(slice.range(from, to), duals, campaign, ReplayMode::Unconstrained)?;
    Ok(Totals {
        cost: s.cost,
        clicks: s.clicks,
    })
}

impl PredictorModel for OraclePredictor {
    fn predict_bucket(&self, campaign: &Campaign, _: &CampaignFeatures, step: u32, duals: &DualVars) -> Result<Totals> {
        replay_totals(&self.future, campaign, step, step, duals)
    }

    fn predict_range(
        &self,
        campaign: &Campaign,
        _: &CampaignFeatures,
        from: u32,
        to: u32,
        duals: &DualVars,
    ) -> Result<Totals> {
        replay_totals(&self.future, campaign, from, to, duals)
    }

    fn metadata(&self) -> &ModelMetadata {
        &self.meta
    }

    fn replay_index(&self, from: u32, to: u32) -> Option<(TrafficIndex, f64)> {
        let index = self.index.get_or_init(|| TrafficIndex::build(self.future.impressions()));
        Some((index.restrict(from, to), 1.0))
    }
}

/// Empirical-replay estimator: the decision rule applied to each historical
/// period's traffic, averaged over periods and scaled by `calibration`.
#[derive(Debug, Clone)]
pub struct EmpiricalPredictor {
    history: Vec<TrafficSlice>,
    meta: ModelMetadata,
    index: OnceLock<TrafficIndex>,
}

pub fn train_empirical(history: Vec<TrafficSlice>, calibration: f64) -> Result<EmpiricalPredictor> {
    let ids = (0..history.len()).map(|i| format!("period-{i}")).collect();
    train_empirical_with_ids(history, ids, calibration)
}

pub fn train_empirical_with_ids(history: Vec<TrafficSlice>, ids: Vec<String>, calibration: f64) -> Result<EmpiricalPredictor> {
    if history.is_empty() {
        return Err(BidError::EmptyHistory);
    }
    if !(calibration >= 0.0 && calibration.is_finite()) {
        return Err(BidError::Config(format!("calibration {calibration} must be finite and nonnegative")));
    }
    Ok(EmpiricalPredictor {
        history,
        meta: ModelMetadata {
            kind: "empirical-replay".into(),
            trained_on: ids,
            calibration,
        },
        index: OnceLock::new(),
    })
}

impl EmpiricalPredictor {
    pub fn with_calibration(mut self, calibration: f64) -> Self {
        self.meta.calibration = calibration;
        self
    }

    pub fn periods(&self) -> usize {
        self.history.len()
    }
}

impl PredictorModel for EmpiricalPredictor {
    fn predict_bucket(&self, campaign: &Campaign, f: &CampaignFeatures, step: u32, duals: &DualVars) -> Result<Totals> {
        self.predict_range(campaign, f, step, step, duals)
    }

    fn predict_range(
        &self,
        campaign: &Campaign,
        _: &CampaignFeatures,
        from: u32,
        to: u32,
        duals: &DualVars,
    ) -> Result<Totals> {
        let mut acc = Totals::default();
        for period in &self.history {
            let t = replay_totals(period, campaign, from, to, duals)?;
            acc.cost += t.cost;
            acc.clicks += t.clicks;
        }
        let w = self.meta.calibration / self.history.len() as f64;
        Ok(Totals {
            cost: acc.cost * w,
            clicks: acc.clicks * w,
        })
    }

    fn metadata(&self) -> &ModelMetadata {
        &self.meta
    }

    fn replay_index(&self, from: u32, to: u32) -> Option<(TrafficIndex, f64)> {
        let index = self
            .index
            .get_or_init(|| TrafficIndex::build(self.history.iter().flat_map(|p| p.impressions())));
        Some((index.restrict(from, to), self.meta.calibration / self.history.len() as f64))
    }
}

/// Whole-horizon totals: realized stats so far plus predicted steps
/// `t0..=end_step`.
pub fn predict_remaining(
    model: &dyn PredictorModel,
    campaign: &Campaign,
    t0: u32,
    duals: &DualVars,
    acc: &AccumStats,
) -> Result<Totals> {
    let mut out = Totals {
        cost: acc.cost,
        clicks: acc.clicks,
    };
    let from = t0.max(campaign.start_step);
    if from <= campaign.end_step {
        let f = CampaignFeatures::for_campaign(campaign, t0);
        let future = model.predict_range(campaign, &f, from, campaign.end_step, duals)?;
        out.cost += future.cost;
        out.clicks += future.clicks;
    }
    Ok(out)
}

/// [`predict_remaining`] as a solver response.
pub struct PredictorResponse<'a> {
    pub model: &'a dyn PredictorModel,
    pub campaign: &'a Campaign,
    pub t0: u32,
    pub acc: AccumStats,
}

impl ResponseFn for PredictorResponse<'_> {
    fn totals(&self, duals: &DualVars) -> Result<Totals> {
        predict_remaining(self.model, self.campaign, self.t0, duals, &self.acc)
    }
}

/// The fastest exact response for `predict_remaining` at `t0`.
pub fn remaining_response<'a>(
    model: &'a dyn PredictorModel,
    campaign: &'a Campaign,
    t0: u32,
    acc: &AccumStats,
) -> Box<dyn ResponseFn + 'a> {
    let base = Totals {
        cost: acc.cost,
        clicks: acc.clicks,
    };
    let from = t0.max(campaign.start_step);
    if from > campaign.end_step {
        return Box::new(move |_: &DualVars| Ok(base));
    }
    match model.replay_index(from, campaign.end_step) {
        Some((index, weight)) => Box::new(IndexedResponse::new(index, weight, base, campaign)),
        None => Box::new(PredictorResponse {
            model,
            campaign,
            t0,
            acc: *acc,
        }),
    }
}

/// One controller tick as written to the control log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlLogRecord {
    pub campaign_id: String,
    pub step: u32,
    pub p: f64,
    pub q_u: f64,
    pub q_l: f64,
    pub cost: f64,
    pub clicks: f64,
}

pub const LOG_HEADER: &str = "campaign_id,step,p,q_u,q_l,cost,clicks";

impl ControlLogRecord {
    pub fn duals(&self) -> DualVars {
        DualVars::new(self.p, self.q_u, self.q_l)
    }

    fn validate(&self) -> Result<()> {
        let fields = [self.p, self.q_u, self.q_l, self.cost, self.clicks];
        if fields.iter().any(|v| v.is_nan() || *v < 0.0) || !self.cost.is_finite() || !self.clicks.is_finite() {
            return Err(BidError::Config(format!(
                "log record for `{}` at step {} has negative or non-numeric fields",
                self.campaign_id, self.step
            )));
        }
        Ok(())
    }
}

pub fn write_logs<W: Write>(writer: W, records: &[ControlLogRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(LOG_HEADER.split(','))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_logs<R: Read>(reader: R, source: &str) -> Result<Vec<ControlLogRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != LOG_HEADER {
        return Err(BidError::Schema {
            path: source.into(),
            expected: LOG_HEADER.into(),
            found: header,
        });
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let rec: ControlLogRecord = row.map_err(|e| BidError::Parse {
            path: source.into(),
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_logs_file(path: &Path) -> Result<Vec<ControlLogRecord>> {
    read_logs(std::fs::File::open(path)?, &path.display().to_string())
}

/// Validated, deduplicated per-campaign trajectories ordered by step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingDataset {
    pub trajectories: BTreeMap<String, Vec<ControlLogRecord>>,
}

impl TrainingDataset {
    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn len(&self) -> usize {
        self.trajectories.values().map(Vec::len).sum()
    }
}

pub fn ingest_logs(records: Vec<ControlLogRecord>) -> Result<TrainingDataset> {
    let mut by: BTreeMap<String, BTreeMap<u32, ControlLogRecord>> = BTreeMap::new();
    for rec in records {
        rec.validate()?;
        let steps = by.entry(rec.campaign_id.clone()).or_default();
        match steps.get(&rec.step) {
            Some(existing) if existing != &rec => {
                return Err(BidError::ConflictingLogs {
                    campaign: rec.campaign_id,
                    step: rec.step,
                })
            }
            Some(_) => {}
            None => {
                steps.insert(rec.step, rec);
            }
        }
    }
    Ok(TrainingDataset {
        trajectories: by
            .into_iter()
            .map(|(k, v)| (k, v.into_values().collect()))
            .collect(),
    })
}

/// Ratio of realized to predicted spend over a logged trajectory, usable as
/// the `calibration` of an empirical model. Records whose duals cannot drive
/// the bid formula are skipped; returns 1.0 when nothing is comparable.
pub fn log_calibration(model: &dyn PredictorModel, campaign: &Campaign, trajectory: &[ControlLogRecord]) -> Result<f64> {
    let mut realized = 0.0;
    let mut predicted = 0.0;
    for rec in trajectory {
        let d = rec.duals();
        if !(d.denominator() > 0.0 && d.denominator().is_finite()) {
            continue;
        }
        let f = CampaignFeatures::for_campaign(campaign, rec.step);
        predicted += model.predict_bucket(campaign, &f, rec.step, &d)?.cost;
        realized += rec.cost;
    }
    Ok(if predicted > 0.0 { realized / predicted } else { 1.0 })
}
