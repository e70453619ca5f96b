//! Traffic index for fast exact replay totals.
//!
//! Impressions are split into buckets of similar win price and sorted by
//! `obj` inside each bucket. For a query `(scale, offset, D)` the win rule
//! `scale·obj + offset > wp·D` is then decided wholesale for everything in a
//! bucket outside a thin `obj` band, found by binary search; only the band is
//! checked one by one. The band bounds carry a rounding margin so the result
//! matches a plain replay up to summation order.

use crate::model::Impression;
use crate::solver::Totals;

#[derive(Debug, Clone, Default, PartialEq)]
struct Bucket {
    wp_lo: f64,
    wp_hi: f64,
    obj_max: f64,
    /// Ascending.
    obj: Vec<f64>,
    wp: Vec<f64>,
    pctr: Vec<f64>,
    step: Vec<u32>,
    /// `suffix_cost[i]` sums the cost of items `i..`; one longer than `obj`.
    suffix_cost: Vec<f64>,
    suffix_clicks: Vec<f64>,
}

impl Bucket {
    fn push(&mut self, obj: f64, wp: f64, pctr: f64, step: u32) {
        self.obj.push(obj);
        self.wp.push(wp);
        self.pctr.push(pctr);
        self.step.push(step);
    }

    fn seal(&mut self) {
        let n = self.obj.len();
        self.wp_lo = self.wp.iter().copied().fold(f64::INFINITY, f64::min);
        self.wp_hi = self.wp.iter().copied().fold(0.0, f64::max);
        self.obj_max = self.obj.last().copied().unwrap_or(0.0);
        self.suffix_cost = vec![0.0; n + 1];
        self.suffix_clicks = vec![0.0; n + 1];
        for i in (0..n).rev() {
            self.suffix_cost[i] = self.suffix_cost[i + 1] + self.pctr[i] * self.wp[i];
            self.suffix_clicks[i] = self.suffix_clicks[i + 1] + self.pctr[i];
        }
    }

    /// `hint` holds the band found by the previous query and is updated.
    fn totals(&self, scale: f64, offset: f64, d: f64, hint: &mut (usize, usize)) -> (f64, f64) {
        let m = 1e-12 * (offset.abs() + self.wp_hi * d + scale * self.obj_max);
        // at or below `lose` every item loses, above `win` every item wins
        let lose = self.wp_lo * d - offset - m;
        let win = self.wp_hi * d - offset + m;
        let i0 = gallop(&self.obj, hint.0, |o| scale * o <= lose);
        let i1 = i0 + gallop(&self.obj[i0..], hint.1.saturating_sub(i0), |o| scale * o <= win);
        *hint = (i0, i1);
        let mut cost = self.suffix_cost[i1];
        let mut clicks = self.suffix_clicks[i1];
        for j in i0..i1 {
            if scale * self.obj[j] + offset > self.wp[j] * d {
                cost += self.pctr[j] * self.wp[j];
                clicks += self.pctr[j];
            }
        }
        (cost, clicks)
    }
}

/// `v.partition_point(pred)`, searched outward from `hint`.
fn gallop(v: &[f64], hint: usize, pred: impl Fn(f64) -> bool) -> usize {
    let n = v.len();
    let h = hint.min(n);
    let (lo, hi) = if h < n && pred(v[h]) {
        let mut lo = h + 1;
        let mut step = 1;
        loop {
            let x = h + step;
            if x >= n || !pred(v[x]) {
                break (lo, x.min(n));
            }
            lo = x + 1;
            step *= 2;
        }
    } else {
        let mut hi = h;
        let mut step = 1;
        loop {
            if step > h {
                break (0, hi);
            }
            let x = h - step;
            if pred(v[x]) {
                break (x + 1, hi);
            }
            hi = x;
            step *= 2;
        }
    };
    lo + v[lo..hi].partition_point(|&o| pred(o))
}

/// Per-bucket search positions carried between queries.
#[derive(Debug, Clone, Default)]
pub struct IndexCursor(Vec<(usize, usize)>);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficIndex {
    buckets: Vec<Bucket>,
    len: usize,
}

impl TrafficIndex {
    pub fn build<'a>(imps: impl IntoIterator<Item = &'a Impression>) -> Self {
        let mut all: Vec<&Impression> = imps.into_iter().collect();
        let n = all.len();
        if n == 0 {
            return Self::default();
        }
        all.sort_unstable_by(|a, b| a.wp.total_cmp(&b.wp));
        let k = ((n as f64).sqrt() / 2.0).round().clamp(1.0, 1024.0) as usize;
        let size = n.div_ceil(k);
        let buckets = all
            .chunks_mut(size)
            .map(|chunk| {
                chunk.sort_unstable_by(|a, b| a.obj.total_cmp(&b.obj));
                let mut b = Bucket::default();
                for imp in chunk.iter() {
                    b.push(imp.obj, imp.wp, imp.pctr, imp.step);
                }
                b.seal();
                b
            })
            .collect();
        Self { buckets, len: n }
    }

    /// The items with `from <= step <= to`.
    pub fn restrict(&self, from: u32, to: u32) -> Self {
        let mut len = 0;
        let buckets = self
            .buckets
            .iter()
            .filter_map(|src| {
                let mut b = Bucket::default();
                for i in 0..src.obj.len() {
                    if (from..=to).contains(&src.step[i]) {
                        b.push(src.obj[i], src.wp[i], src.pctr[i], src.step[i]);
                    }
                }
                if b.obj.is_empty() {
                    return None;
                }
                b.seal();
                len += b.obj.len();
                Some(b)
            })
            .collect();
        Self { buckets, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Cost and clicks of the items won at `(scale, offset, d)`, `scale > 0`.
    pub fn totals(&self, scale: f64, offset: f64, d: f64) -> Totals {
        self.totals_from(scale, offset, d, &mut IndexCursor::default())
    }

    /// As [`TrafficIndex::totals`], starting the searches where the previous
    /// query through `cursor` ended. Faster for nearby queries.
    pub fn totals_from(&self, scale: f64, offset: f64, d: f64, cursor: &mut IndexCursor) -> Totals {
        cursor.0.resize(self.buckets.len(), (0, 0));
        let mut t = Totals::default();
        for (b, h) in self.buckets.iter().zip(cursor.0.iter_mut()) {
            let (c, k) = b.totals(scale, offset, d, h);
            t.cost += c;
            t.clicks += k;
        }
        t
    }
}
