//! Overlap and surface-distance scores per nested region, and cohort
//! summaries laid out like the usual challenge tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumedata::{labels_to_masks, Grid, LabelMap};

/// Reporting order of the regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Et,
    Wt,
    Tc,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Et, Region::Wt, Region::Tc];

    pub fn name(self) -> &'static str {
        match self {
            Region::Et => "ET",
            Region::Wt => "WT",
            Region::Tc => "TC",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Region::Et => "et",
            Region::Wt => "wt",
            Region::Tc => "tc",
        }
    }
}

fn same_shape<A: Copy, B: Copy>(a: &Grid<A>, b: &Grid<B>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `2|a∩b| / (|a|+|b|)`; 1 when both are empty.
pub fn dice_score(a: &Grid<bool>, b: &Grid<bool>) -> Result<f64> {
    same_shape(a, b)?;
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        sa += x as usize;
        sb += y as usize;
    }
    Ok(if sa + sb == 0 { 1.0 } else { 2.0 * inter as f64 / (sa + sb) as f64 })
}

/// `(TP/(TP+FN), TN/(TN+FP))`, each 1 when its denominator is 0.
pub fn sensitivity_specificity(pred: &Grid<bool>, truth: &Grid<bool>) -> Result<(f64, f64)> {
    same_shape(pred, truth)?;
    let (mut tp, mut fn_, mut fp, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p, t) {
            (true, true) => tp += 1,
            (false, true) => fn_ += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 1.0 } else { a as f64 / (a + b) as f64 };
    Ok((ratio(tp, fn_), ratio(tn, fp)))
}

/// Foreground voxels with at least one face neighbour outside the mask
/// (the grid border counts as outside).
pub fn surface(mask: &Grid<bool>) -> Grid<bool> {
    let [nx, ny, nz] = mask.shape();
    let mut out = Grid::filled(mask.shape(), false);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if !mask.get(x, y, z) {
                    continue;
                }
                let border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                let open = border
                    || !mask.get(x - 1, y, z)
                    || !mask.get(x + 1, y, z)
                    || !mask.get(x, y - 1, z)
                    || !mask.get(x, y + 1, z)
                    || !mask.get(x, y, z - 1)
                    || !mask.get(x, y, z + 1);
                if open {
                    out.set(x, y, z, true);
                }
            }
        }
    }
    out
}

/// Squared distance along one line to the nearest finite site (lower
/// envelope of parabolas); `f` holds 0 at sites, ∞ elsewhere or earlier
/// partial results.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * step;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + pos(q) * pos(q)) - (f[last] + pos(last) * pos(last))) / (2.0 * (pos(q) - pos(last)));
            if s <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(p) {
            k += 1;
        }
        let d = pos(p) - pos(v[k]);
        *o = f[v[k]] + d * d;
    }
}

/// Squared Euclidean distance (in mm²) from every voxel to the nearest
/// `true` voxel of `sites`.
pub fn squared_distance_transform(sites: &Grid<bool>, spacing: [f64; 3]) -> Grid<f64> {
    let shape = sites.shape();
    let mut d = sites.map(|s| if s { 0.0 } else { f64::INFINITY });
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in [2usize, 1, 0] {
        let n = shape[axis];
        let stride: usize = shape[axis + 1..].iter().product();
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for base in 0..d.len() {
            // visit each line once, from the voxel whose coordinate along `axis` is 0
            if (base / stride) % n != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = d.data()[base + i * stride];
            }
            edt_line(&line, spacing[axis], &mut out, &mut v, &mut z);
            for i in 0..n {
                d.data_mut()[base + i * stride] = out[i];
            }
        }
    }
    d
}

/// Linear-interpolation percentile (`q` in [0, 1]) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let h = q * (values.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    values[lo] + (h - lo as f64) * (values[hi] - values[lo])
}

fn directed_p95(from: &Grid<bool>, to_dist: &Grid<f64>) -> f64 {
    let mut d: Vec<f64> =
        from.data().iter().zip(to_dist.data()).filter(|(&s, _)| s).map(|(_, &d2)| d2.sqrt()).collect();
    percentile(&mut d, 0.95)
}

/// Symmetric 95th-percentile surface distance in mm; `None` when either
/// mask is empty.
pub fn hd95(a: &Grid<bool>, b: &Grid<bool>, spacing: [f64; 3]) -> Result<Option<f64>> {
    same_shape(a, b)?;
    let (sa, sb) = (surface(a), surface(b));
    if sa.count() == 0 || sb.count() == 0 {
        return Ok(None);
    }
    let da = squared_distance_transform(&sa, spacing);
    let db = squared_distance_transform(&sb, spacing);
    Ok(Some(directed_p95(&sa, &db).max(directed_p95(&sb, &da))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub dice: f64,
    pub hd95: Option<f64>,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    /// In [`Region::ALL`] order.
    pub regions: [RegionScores; 3],
}

impl CaseScores {
    pub fn region(&self, r: Region) -> &RegionScores {
        &self.regions[Region::ALL.iter().position(|&x| x == r).expect("region")]
    }
}

pub fn score_case(case_id: &str, pred: &LabelMap, truth: &LabelMap, spacing: [f64; 3]) -> Result<CaseScores> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "case {case_id}: prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let (p, t) = (labels_to_masks(pred), labels_to_masks(truth));
    let pick = |m: &crate::volumedata::MultiLabelMasks, r: Region| match r {
        Region::Et => m.et.clone(),
        Region::Wt => m.wt.clone(),
        Region::Tc => m.tc.clone(),
    };
    let mut regions = Vec::with_capacity(3);
    for r in Region::ALL {
        let (a, b) = (pick(&p, r), pick(&t, r));
        let (sensitivity, specificity) = sensitivity_specificity(&a, &b)?;
        regions.push(RegionScores { dice: dice_score(&a, &b)?, hd95: hd95(&a, &b, spacing)?, sensitivity, specificity });
    }
    Ok(CaseScores { case_id: case_id.to_string(), regions: regions.try_into().expect("three regions") })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Dice,
    Hd95,
    Sensitivity,
    Specificity,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Dice, Metric::Hd95, Metric::Sensitivity, Metric::Specificity];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Dice => "Dice",
            Metric::Hd95 => "Dist.",
            Metric::Sensitivity => "Sens.",
            Metric::Specificity => "Spec.",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Hd95 => "hd95",
            Metric::Sensitivity => "sens",
            Metric::Specificity => "spec",
        }
    }

    fn value(self, s: &RegionScores) -> Option<f64> {
        match self {
            Metric::Dice => Some(s.dice),
            Metric::Hd95 => s.hd95,
            Metric::Sensitivity => Some(s.sensitivity),
            Metric::Specificity => Some(s.specificity),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    /// Values aggregated.
    pub count: usize,
    /// Cases without a value (empty-mask distance sentinel).
    pub excluded: usize,
}

impl Summary {
    /// `sample_std` switches the standard deviation to the n−1 form.
    pub fn of(values: &[f64], excluded: usize, sample_std: bool) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN, median: f64::NAN, q25: f64::NAN, q75: f64::NAN, count: 0, excluded };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        let std = if sample_std {
            if values.len() > 1 {
                (ss / (n - 1.0)).sqrt()
            } else {
                0.0
            }
        } else {
            (ss / n).sqrt()
        };
        let mut sorted = values.to_vec();
        Self {
            mean,
            std,
            median: percentile(&mut sorted, 0.5),
            q25: percentile(&mut sorted, 0.25),
            q75: percentile(&mut sorted, 0.75),
            count: values.len(),
            excluded,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: usize,
    /// `entries[metric][region]` in [`Metric::ALL`] × [`Region::ALL`] order.
    pub entries: Vec<Vec<Summary>>,
    pub sample_std: bool,
}

impl MetricsReport {
    pub fn get(&self, metric: Metric, region: Region) -> &Summary {
        let m = Metric::ALL.iter().position(|&x| x == metric).expect("metric");
        let r = Region::ALL.iter().position(|&x| x == region).expect("region");
        &self.entries[m][r]
    }
}

pub fn summarize(scores: &[CaseScores], sample_std: bool) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::Empty("no case scores to summarize".into()));
    }
    let entries = Metric::ALL
        .iter()
        .map(|&m| {
            Region::ALL
                .iter()
                .enumerate()
                .map(|(ri, _)| {
                    let vals: Vec<f64> = scores.iter().filter_map(|s| m.value(&s.regions[ri])).collect();
                    Summary::of(&vals, scores.len() - vals.len(), sample_std)
                })
                .collect()
        })
        .collect();
    Ok(MetricsReport { cases: scores.len(), entries, sample_std })
}

const ROWS: [&str; 5] = ["Mean", "StdDev", "Median", "25% quantile", "75% quantile"];

fn row_value(s: &Summary, row: usize) -> f64 {
    [s.mean, s.std, s.median, s.q25, s.q75][row]
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

/// Per-case CSV: `case_id`, then dice, hd95, sens, spec for ET, WT, TC.
pub fn write_case_csv(path: &Path, scores: &[CaseScores]) -> Result<()> {
    let mut header = vec!["case_id".to_string()];
    for m in Metric::ALL {
        for r in Region::ALL {
            header.push(format!("{}_{}", m.key(), r.key()));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(|e| Error::Serialization(e.to_string()))?;
    for s in scores {
        let mut rec = vec![s.case_id.clone()];
        for m in Metric::ALL {
            for (ri, _) in Region::ALL.iter().enumerate() {
                rec.push(fmt_opt(m.value(&s.regions[ri])));
            }
        }
        w.write_record(&rec).map_err(|e| Error::Serialization(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    crate::write_atomic(path, &bytes)
}

/// Summary CSV: one row per statistic, one column per metric × region.
pub fn write_summary_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["statistic".to_string()];
    for m in Metric::ALL {
        for r in Region::ALL {
            header.push(format!("{}_{}", m.key(), r.key()));
        }
    }
    w.write_record(&header).map_err(|e| Error::Serialization(e.to_string()))?;
    let cells = |f: &dyn Fn(&Summary) -> String| -> Vec<String> {
        Metric::ALL.iter().flat_map(|&m| Region::ALL.iter().map(move |&r| (m, r))).map(|(m, r)| f(report.get(m, r))).collect()
    };
    let mut rows: Vec<(String, Vec<String>)> =
        ROWS.iter().enumerate().map(|(i, name)| (name.to_string(), cells(&|s| format!("{}", row_value(s, i))))).collect();
    rows.push(("Count".into(), cells(&|s| s.count.to_string())));
    rows.push(("Excluded".into(), cells(&|s| s.excluded.to_string())));
    for (name, values) in rows {
        let rec: Vec<String> = std::iter::once(name).chain(values).collect();
        w.write_record(&rec).map_err(|e| Error::Serialization(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    crate::write_atomic(path, &bytes)
}

/// Aligned text table: Dice and distance columns for ET, WT, TC, then a
/// second block with sensitivity and specificity.
pub fn render_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    for metrics in [[Metric::Dice, Metric::Hd95], [Metric::Sensitivity, Metric::Specificity]] {
        let _ = write!(out, "{:<14}", "");
        for m in metrics {
            for r in Region::ALL {
                let _ = write!(out, "{:>10}", format!("{} {}", m.label(), r.name()));
            }
        }
        out.push('\n');
        for (i, row) in ROWS.iter().enumerate() {
            let _ = write!(out, "{row:<14}");
            for m in metrics {
                for r in Region::ALL {
                    let _ = write!(out, "{:>10.4}", row_value(report.get(m, r), i));
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    let excluded: usize = Region::ALL.iter().map(|&r| report.get(Metric::Hd95, r).excluded).sum();
    let _ = writeln!(
        out,
        "{} cases; distance statistics exclude {excluded} empty-mask entries; {} standard deviation",
        report.cases,
        if report.sample_std { "sample" } else { "population" }
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates_linearly() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&mut v, 0.5), 2.5);
        assert_eq!(percentile(&mut v, 0.0), 1.0);
        assert_eq!(percentile(&mut v, 1.0), 4.0);
        let mut one = vec![7.0];
        assert_eq!(percentile(&mut one, 0.95), 7.0);
    }

    #[test]
    fn edt_line_with_anisotropic_step() {
        let f = [f64::INFINITY, 0.0, f64::INFINITY, f64::INFINITY];
        let mut out = [0.0; 4];
        edt_line(&f, 2.0, &mut out, &mut Vec::new(), &mut Vec::new());
        assert_eq!(out, [4.0, 0.0, 4.0, 16.0]);
    }
}
