//! Traffic CSV (`period_id,step,pctr,wp,obj`, one row per impression) and
//! campaign definition files.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::allocator::TrafficSlice;
use crate::error::{BidError, Result};
use crate::model::{Campaign, Impression};

pub const TRAFFIC_HEADER: &str = "period_id,step,pctr,wp,obj";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Steps per period; rows must satisfy `step < n_steps`.
    pub n_steps: u32,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { n_steps: 48 }
    }
}

#[derive(Deserialize)]
struct Row<'a> {
    period_id: &'a str,
    step: u32,
    pctr: f64,
    wp: f64,
    obj: f64,
}

/// Periods in order of first appearance.
pub fn load_traffic(path: &Path, opts: LoadOptions) -> Result<Vec<(String, TrafficSlice)>> {
    let file = std::fs::File::open(path)?;
    read_traffic(std::io::BufReader::with_capacity(1 << 20, file), &path.display().to_string(), opts)
}

pub fn read_traffic<R: Read>(reader: R, source: &str, opts: LoadOptions) -> Result<Vec<(String, TrafficSlice)>> {
    if opts.n_steps == 0 {
        return Err(BidError::Config("n_steps must be positive".into()));
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.byte_headers()?.iter().map(String::from_utf8_lossy).collect::<Vec<_>>().join(",");
    if header != TRAFFIC_HEADER {
        return Err(BidError::Schema {
            path: source.into(),
            expected: TRAFFIC_HEADER.into(),
            found: header,
        });
    }
    let parse_err = |line: u64, reason: String| BidError::Parse {
        path: source.into(),
        line,
        reason,
    };
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut periods: Vec<(String, Vec<Impression>)> = Vec::new();
    let mut rec = csv::ByteRecord::new();
    while rdr.read_byte_record(&mut rec)? {
        let line = rec.position().map_or(0, |p| p.line());
        let row: Row = rec.deserialize(None).map_err(|e| parse_err(line, e.to_string()))?;
        if row.step >= opts.n_steps {
            return Err(parse_err(line, format!("step {} outside [0, {})", row.step, opts.n_steps)));
        }
        let imp = Impression::new(row.step, row.pctr, row.wp, row.obj).map_err(|e| parse_err(line, e.to_string()))?;
        let slot = match index.get(row.period_id) {
            Some(&i) => i,
            None => {
                index.insert(row.period_id.to_owned(), periods.len());
                periods.push((row.period_id.to_owned(), Vec::new()));
                periods.len() - 1
            }
        };
        periods[slot].1.push(imp);
    }
    periods
        .into_iter()
        .map(|(id, imps)| Ok((id, TrafficSlice::new(imps, 0, opts.n_steps - 1)?)))
        .collect()
}

pub fn write_traffic<W: Write>(writer: W, periods: &[(String, TrafficSlice)]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(TRAFFIC_HEADER.split(','))?;
    for (id, slice) in periods {
        for imp in slice.impressions() {
            w.write_record([
                id.as_str(),
                &imp.step.to_string(),
                &imp.pctr.to_string(),
                &imp.wp.to_string(),
                &imp.obj.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const CAMPAIGN_HEADER: &str = "id,budget,cpc_upper,cpc_lower,start_step,end_step,manual_bid";

/// Campaign definitions as CSV; an absent bound is written `inf`, an absent
/// manual bid as an empty field.
pub fn write_campaigns<W: Write>(writer: W, campaigns: &[Campaign]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CAMPAIGN_HEADER.split(','))?;
    for c in campaigns {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_campaigns<R: Read>(reader: R, source: &str) -> Result<Vec<Campaign>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != CAMPAIGN_HEADER {
        return Err(BidError::Schema {
            path: source.into(),
            expected: CAMPAIGN_HEADER.into(),
            found: header,
        });
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let c: Campaign = row.map_err(|e| BidError::Parse {
            path: source.into(),
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        c.validate()?;
        out.push(c);
    }
    Ok(out)
}

pub fn write_traffic_file(path: &Path, periods: &[(String, TrafficSlice)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_traffic(std::io::BufWriter::new(f), periods)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn campaigns_round_trip_with_open_bounds() {
        let cs = vec![
            Campaign::budget_only("a", 10.0, 0, 47),
            Campaign::with_cpc("b", 5.0, 2.0, 0.5, 3, 40).with_manual_bid(1.5),
        ];
        let mut buf = Vec::new();
        write_campaigns(&mut buf, &cs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(1).unwrap().contains("inf"), "{text}");
        assert_eq!(read_campaigns(buf.as_slice(), "mem").unwrap(), cs);
        assert!(read_campaigns("id,budget\na,1\n".as_bytes(), "mem").is_err());
    }

    const FIXTURE: &str = "period_id,step,pctr,wp,obj\nd1,0,0.1,1.0,2.0\nd1,3,0.2,0.5,1.0\nd1,47,0.05,2.0,0.0\n";

    #[test]
    fn three_row_fixture() {
        let p = read_traffic(FIXTURE.as_bytes(), "fx", LoadOptions::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].0, "d1");
        assert_eq!(p[0].1.len(), 3);
        assert_eq!(p[0].1.last_step(), 47);
    }

    #[test]
    fn bad_pctr_reports_line() {
        let text = "period_id,step,pctr,wp,obj\nd1,0,0.1,1.0,2.0\nd1,1,1.2,1.0,2.0\n";
        match read_traffic(text.as_bytes(), "fx", LoadOptions::default()) {
            Err(BidError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn step_range_and_schema() {
        let text = "period_id,step,pctr,wp,obj\nd1,48,0.1,1.0,2.0\n";
        assert!(matches!(
            read_traffic(text.as_bytes(), "fx", LoadOptions::default()),
            Err(BidError::Parse { line: 2, .. })
        ));
        assert!(read_traffic(text.as_bytes(), "fx", LoadOptions { n_steps: 96 }).is_ok());
        let text = "day,step,pctr,wp,obj\nd1,0,0.1,1.0,2.0\n";
        assert!(matches!(
            read_traffic(text.as_bytes(), "fx", LoadOptions::default()),
            Err(BidError::Schema { .. })
        ));
        let text = "period_id,step,pctr,wp,obj\nd1,x,0.1,1.0,2.0\n";
        assert!(matches!(
            read_traffic(text.as_bytes(), "fx", LoadOptions::default()),
            Err(BidError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn round_trip_keeps_period_order() {
        let text = "period_id,step,pctr,wp,obj\nb,1,0.1,1.0,2.0\na,0,0.2,0.5,1.0\nb,0,0.3,0.25,0.125\n";
        let p = read_traffic(text.as_bytes(), "fx", LoadOptions::default()).unwrap();
        assert_eq!(p.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        let mut buf = Vec::new();
        write_traffic(&mut buf, &p).unwrap();
        let q = read_traffic(buf.as_slice(), "mem", LoadOptions::default()).unwrap();
        assert_eq!(p, q);
    }
}
