//! BR, R/R*, OCR and the penalized score G.

use serde::{Deserialize, Serialize};

use crate::error::{BidError, Result};
use crate::model::{AccumStats, Campaign};

pub const DEFAULT_LAMBDA: f64 = 100.0;

/// Relative slack below which a CPC excess is treated as rounding.
pub const VIOLATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignMetrics {
    pub id: String,
    pub revenue: f64,
    pub cost: f64,
    pub budget: f64,
    pub r_star: f64,
    pub cpc: f64,
    pub exr: f64,
    pub penalty: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub revenue: f64,
    pub cost: f64,
    pub br: f64,
    pub r_over_rstar: f64,
    pub ocr: f64,
    pub g: f64,
    pub campaigns: Vec<CampaignMetrics>,
}

/// Relative CPC excess over the violated bound, 0 when compliant or clickless.
pub fn excess_ratio(stats: &AccumStats, campaign: &Campaign) -> f64 {
    if stats.clicks <= 0.0 {
        return 0.0;
    }
    let cpc = stats.cost / stats.clicks;
    let mut exr = 0.0;
    if campaign.has_upper() {
        exr = f64::max(exr, cpc / campaign.cpc_upper - 1.0);
    }
    if campaign.has_lower() {
        exr = f64::max(exr, campaign.cpc_lower / cpc - 1.0);
    }
    if exr <= VIOLATION_TOL {
        0.0
    } else {
        exr
    }
}

pub fn penalty(exr: f64, lambda: f64) -> f64 {
    lambda.powf(exr) - 1.0
}

/// Aggregates per-campaign outcomes against per-campaign optima `r_star`.
pub fn compute_metrics(campaigns: &[Campaign], outcomes: &[AccumStats], r_star: &[f64], lambda: f64) -> Result<MetricsReport> {
    if campaigns.len() != outcomes.len() || campaigns.len() != r_star.len() {
        return Err(BidError::Mismatch(format!(
            "{} campaigns, {} outcomes, {} references",
            campaigns.len(),
            outcomes.len(),
            r_star.len()
        )));
    }
    if !(lambda >= 1.0 && lambda.is_finite()) {
        return Err(BidError::Config(format!("lambda {lambda} must be at least 1")));
    }
    let per: Vec<CampaignMetrics> = campaigns
        .iter()
        .zip(outcomes)
        .zip(r_star)
        .map(|((c, s), &r)| {
            let exr = excess_ratio(s, c);
            CampaignMetrics {
                id: c.id.clone(),
                revenue: s.value,
                cost: s.cost,
                budget: c.budget,
                r_star: r,
                cpc: s.cpc(),
                exr,
                penalty: penalty(exr, lambda),
                violated: exr > 0.0,
            }
        })
        .collect();
    let revenue: f64 = per.iter().map(|m| m.revenue).sum();
    let cost: f64 = per.iter().map(|m| m.cost).sum();
    let budget: f64 = per.iter().map(|m| m.budget).sum();
    let rs: f64 = per.iter().map(|m| m.r_star).sum();
    let r_over_rstar = if rs > 0.0 {
        revenue / rs
    } else if revenue > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    let n = per.len().max(1) as f64;
    let ocr = per.iter().filter(|m| m.violated).count() as f64 / n;
    let g = r_over_rstar.min(1.0) - per.iter().map(|m| m.penalty).sum::<f64>();
    Ok(MetricsReport {
        revenue,
        cost,
        br: if budget > 0.0 { cost / budget } else { 0.0 },
        r_over_rstar,
        ocr,
        g,
        campaigns: per,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(cost: f64, clicks: f64, value: f64) -> AccumStats {
        AccumStats {
            cost,
            clicks,
            value,
            ..Default::default()
        }
    }

    #[test]
    fn no_violation_g_equals_ratio() {
        let c = vec![Campaign::with_cpc("a", 10.0, 2.0, 0.5, 0, 47)];
        let m = compute_metrics(&c, &[stats(9.0, 9.0, 0.9)], &[1.0], DEFAULT_LAMBDA).unwrap();
        assert!((m.g - 0.9).abs() < 1e-12);
        assert_eq!(m.ocr, 0.0);
        assert!((m.br - 0.9).abs() < 1e-12);
    }

    #[test]
    fn ten_percent_over_upper() {
        let c = vec![Campaign::with_cpc("a", 10.0, 1.0, 0.0, 0, 47)];
        let m = compute_metrics(&c, &[stats(1.1, 1.0, 1.0)], &[1.0], DEFAULT_LAMBDA).unwrap();
        let p = m.campaigns[0].penalty;
        assert!((p - 0.584_893_192_461_113_5).abs() < 1e-9, "{p}");
        assert!((p - (10f64.powf(0.2) - 1.0)).abs() < 1e-12);
        assert_eq!(m.ocr, 1.0);
        assert!((m.g - (1.0 - p)).abs() < 1e-12);
    }

    #[test]
    fn lower_violation_and_clickless() {
        let c = vec![
            Campaign::with_cpc("a", 10.0, 4.0, 2.0, 0, 47),
            Campaign::with_cpc("b", 10.0, 4.0, 2.0, 0, 47),
        ];
        let m = compute_metrics(&c, &[stats(1.0, 1.0, 1.0), stats(0.0, 0.0, 0.0)], &[1.0, 1.0], DEFAULT_LAMBDA).unwrap();
        assert!((m.campaigns[0].exr - 1.0).abs() < 1e-12);
        assert!(!m.campaigns[1].violated);
        assert_eq!(m.ocr, 0.5);
        assert!(m.g <= m.r_over_rstar.min(1.0));
    }

    #[test]
    fn mismatched_inputs() {
        let c = vec![Campaign::budget_only("a", 1.0, 0, 47)];
        assert!(matches!(
            compute_metrics(&c, &[], &[1.0], DEFAULT_LAMBDA),
            Err(BidError::Mismatch(_))
        ));
    }
}
