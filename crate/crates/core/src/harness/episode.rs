//! One campaign, one controller, one period.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::allocator::{replay_params, ReplayMode, TrafficSlice};
use crate::controllers::{Controller, TickDecision};
use crate::error::{BidError, Result};
use crate::model::{AccumStats, Campaign};
use crate::predictor::ControlLogRecord;
use crate::solver::SolveFlags;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub campaign_id: String,
    pub start_step: u32,
    /// Outcome of each scheduled step.
    pub per_step: Vec<AccumStats>,
    pub final_stats: AccumStats,
    /// Controller output at each step; empty for a zero-budget campaign.
    pub ticks: Vec<TickDecision>,
    /// Union over ticks.
    pub flags: SolveFlags,
    pub warnings: Vec<String>,
}

/// One line of the per-episode time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub step: u32,
    pub p: f64,
    pub q_u: f64,
    pub q_l: f64,
    pub alpha: f64,
    pub beta: f64,
    pub cum_cost: f64,
    pub cum_clicks: f64,
    pub cum_value: f64,
}

pub const PLOT_HEADER: &str = "step,p,q_u,q_l,alpha,beta,cum_cost,cum_clicks,cum_value";

/// One step of an episode log: the controller output and the step outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLogRow {
    pub step: u32,
    pub p: f64,
    pub q_u: f64,
    pub q_l: f64,
    pub alpha: f64,
    pub beta: f64,
    pub held: bool,
    pub cost: f64,
    pub clicks: f64,
    pub value: f64,
    pub wins: u64,
    pub seen: u64,
}

pub const EPISODE_HEADER: &str = "step,p,q_u,q_l,alpha,beta,held,cost,clicks,value,wins,seen";

impl EpisodeResult {
    pub fn log_records(&self) -> Vec<ControlLogRecord> {
        self.ticks
            .iter()
            .zip(&self.per_step)
            .enumerate()
            .map(|(i, (t, s))| ControlLogRecord {
                campaign_id: self.campaign_id.clone(),
                step: self.start_step + i as u32,
                p: t.duals.p,
                q_u: t.duals.q_u,
                q_l: t.duals.q_l,
                cost: s.cost,
                clicks: s.clicks,
            })
            .collect()
    }

    pub fn log_rows(&self) -> Vec<EpisodeLogRow> {
        self.ticks
            .iter()
            .zip(&self.per_step)
            .enumerate()
            .map(|(i, (t, s))| EpisodeLogRow {
                step: self.start_step + i as u32,
                p: t.duals.p,
                q_u: t.duals.q_u,
                q_l: t.duals.q_l,
                alpha: t.params.alpha,
                beta: t.params.beta,
                held: t.held,
                cost: s.cost,
                clicks: s.clicks,
                value: s.value,
                wins: s.wins,
                seen: s.seen,
            })
            .collect()
    }

    pub fn plot_rows(&self) -> Vec<PlotRow> {
        plot_rows(&self.log_rows())
    }
}

/// Cumulative time series of an episode log.
pub fn plot_rows(log: &[EpisodeLogRow]) -> Vec<PlotRow> {
    let (mut cost, mut clicks, mut value) = (0.0, 0.0, 0.0);
    log.iter()
        .map(|r| {
            cost += r.cost;
            clicks += r.clicks;
            value += r.value;
            PlotRow {
                step: r.step,
                p: r.p,
                q_u: r.q_u,
                q_l: r.q_l,
                alpha: r.alpha,
                beta: r.beta,
                cum_cost: cost,
                cum_clicks: clicks,
                cum_value: value,
            }
        })
        .collect()
}

pub fn write_episode_log<W: Write>(writer: W, rows: &[EpisodeLogRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(EPISODE_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_episode_log<R: Read>(reader: R, source: &str) -> Result<Vec<EpisodeLogRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != EPISODE_HEADER {
        return Err(BidError::Schema {
            path: source.into(),
            expected: EPISODE_HEADER.into(),
            found: header,
        });
    }
    rdr.deserialize()
        .map(|row| {
            row.map_err(|e| BidError::Parse {
                path: source.into(),
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn write_plot<W: Write>(writer: W, rows: &[PlotRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(PLOT_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Ticks the controller at every step boundary and replays the step's
/// impressions under its bid with a hard budget stop.
pub fn run_episode(campaign: &Campaign, controller: &mut dyn Controller, slice: &TrafficSlice) -> Result<EpisodeResult> {
    campaign.validate()?;
    if campaign.start_step < slice.first_step() || campaign.end_step > slice.last_step() {
        return Err(BidError::InvalidCampaign {
            id: campaign.id.clone(),
            reason: format!(
                "schedule {}..={} outside traffic {}..={}",
                campaign.start_step,
                campaign.end_step,
                slice.first_step(),
                slice.last_step()
            ),
        });
    }
    let n = campaign.n_steps() as usize;
    let mut out = EpisodeResult {
        campaign_id: campaign.id.clone(),
        start_step: campaign.start_step,
        per_step: Vec::with_capacity(n),
        final_stats: AccumStats::default(),
        ticks: Vec::with_capacity(n),
        flags: SolveFlags::default(),
        warnings: Vec::new(),
    };
    if campaign.budget <= 0.0 {
        out.per_step.resize(n, AccumStats::default());
        return Ok(out);
    }
    let mut acc = AccumStats::default();
    for step in campaign.start_step..=campaign.end_step {
        let d = controller.on_tick(campaign, step, &acc)?;
        if !d.params.is_finite() {
            return Err(BidError::InvalidController(format!(
                "{} emitted non-finite params {:?} at step {step}",
                controller.name(),
                d.params
            )));
        }
        let s = replay_params(slice.bucket(step), &d.params, campaign.budget - acc.cost, ReplayMode::HardBudgetStop);
        acc += s;
        out.per_step.push(s);
        out.flags.degraded |= d.flags.degraded;
        out.flags.infeasible_lower |= d.flags.infeasible_lower;
        out.flags.upper_unreachable |= d.flags.upper_unreachable;
        out.ticks.push(d);
    }
    out.final_stats = acc;
    out.warnings = controller.warnings().to_vec();
    Ok(out)
}
