//! Point-wise and crack-wise evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::cloud_io::AnnotationLayer;
use crate::error::{Error, Result};
use crate::instancer::CrackInstance;

/// Point-wise scores computed from these four counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn count(predicted: &[u8], truth: &[u8]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p == 1, t == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, other: Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// 0 when nothing was predicted as crack.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, 0.0)
    }

    /// 0 when there are no crack points.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, 0.0)
    }

    /// 1 when there are no non-crack points.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp, 1.0)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn scores(&self) -> PointScores {
        PointScores {
            precision: self.precision(),
            recall: self.recall(),
            specificity: self.specificity(),
            f1: self.f1(),
        }
    }
}

fn ratio(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointScores {
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
}

pub fn pointwise(predicted: &[u8], truth: &[u8]) -> Result<PointScores> {
    Ok(Confusion::count(predicted, truth)?.scores())
}

/// One predicted instance matched to one real instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Match {
    pub predicted: u32,
    pub real: u32,
    pub intersection: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchTable {
    pub matches: Vec<Match>,
    pub predicted_count: usize,
    /// Ids of every real instance, matched or not.
    pub real_ids: Vec<u32>,
}

impl MatchTable {
    /// Number of predictions matched to each real id that has any.
    pub fn matches_per_real(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for m in &self.matches {
            *out.entry(m.real).or_insert(0) += 1;
        }
        out
    }
}

/// A prediction matches a real crack when at least `alpha` of its points
/// lie on it. A prediction overlapping several cracks is assigned to the
/// one with the largest overlap (lowest real id on ties).
pub fn match_instances(predicted: &[CrackInstance], real: &[CrackInstance], alpha: f64) -> MatchTable {
    let mut owner: HashMap<u32, u32> = HashMap::new();
    for r in real {
        for &m in &r.members {
            owner.insert(m, r.id);
        }
    }
    let mut matches = Vec::new();
    for p in predicted {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for m in &p.members {
            if let Some(&r) = owner.get(m) {
                *counts.entry(r).or_insert(0) += 1;
            }
        }
        let need = alpha * p.members.len() as f64;
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c as f64 >= need)
            .fold(None, |best: Option<(u32, usize)>, (r, c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((r, c)),
            });
        if let Some((r, c)) = best {
            matches.push(Match {
                predicted: p.id,
                real: r,
                intersection: c,
            });
        }
    }
    MatchTable {
        matches,
        predicted_count: predicted.len(),
        real_ids: real.iter().map(|r| r.id).collect(),
    }
}

/// Fraction of the `n_cr` real cracks matched by at least one prediction.
pub fn crack_detection_rate(table: &MatchTable, n_cr: usize) -> Result<f64> {
    if n_cr == 0 {
        return Err(Error::UndefinedMetric("detection rate without real cracks"));
    }
    Ok(table.matches_per_real().len() as f64 / n_cr as f64)
}

/// How undetected cracks enter the continuity average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContinuityConvention {
    /// Every real crack counts; an undetected one contributes 0.
    #[default]
    MissedCountZero,
    /// Average only over detected cracks.
    DetectedOnly,
}

/// Mean over real cracks of `1 / (predictions matching it)`.
pub fn crack_continuity(table: &MatchTable, n_cr: usize) -> Result<f64> {
    crack_continuity_with(table, n_cr, ContinuityConvention::default())
}

pub fn crack_continuity_with(table: &MatchTable, n_cr: usize, convention: ContinuityConvention) -> Result<f64> {
    if n_cr == 0 {
        return Err(Error::UndefinedMetric("continuity without real cracks"));
    }
    let per = table.matches_per_real();
    let hist = match_histogram(per.values().copied());
    match convention {
        ContinuityConvention::MissedCountZero => Ok(reciprocal_mean(&hist, n_cr)),
        ContinuityConvention::DetectedOnly if per.is_empty() => {
            Err(Error::UndefinedMetric("continuity with no detected cracks"))
        }
        ContinuityConvention::DetectedOnly => Ok(reciprocal_mean(&hist, per.len())),
    }
}

fn match_histogram(counts: impl IntoIterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for k in counts {
        *hist.entry(k).or_insert(0) += 1;
    }
    hist
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `(Σ c / k) / n` over a histogram `k -> c`, formed as a reduced fraction
/// and divided once. Falls back to floating point if the fraction
/// outgrows u128.
fn reciprocal_mean(hist: &BTreeMap<usize, usize>, n: usize) -> f64 {
    let exact = || -> Option<f64> {
        let (mut num, mut den) = (0u128, 1u128);
        for (&k, &c) in hist {
            let k = k as u128;
            let l = den / gcd(den, k) * k;
            num = num.checked_mul(l / den)?.checked_add((c as u128).checked_mul(l / k)?)?;
            den = l;
            let g = gcd(num, den);
            (num, den) = (num / g, den / g);
        }
        den = den.checked_mul(n as u128)?;
        let g = gcd(num, den);
        Some((num / g) as f64 / (den / g) as f64)
    };
    exact().unwrap_or_else(|| hist.iter().map(|(&k, &c)| c as f64 / k as f64).sum::<f64>() / n as f64)
}

/// Fraction of predicted instances that match a real crack.
pub fn crack_precision(table: &MatchTable) -> Result<f64> {
    if table.predicted_count == 0 {
        return Err(Error::UndefinedMetric("crack precision without predictions"));
    }
    Ok(table.matches.len() as f64 / table.predicted_count as f64)
}

/// Instances at or below this many points form the small-crack bin.
pub const SMALL_CRACK_POINTS: usize = 500;
/// Cracks at least this wide (meters) form the wide-crack bin.
pub const WIDE_CRACK: f64 = 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct SizeRow {
    pub cloud: String,
    pub id: u32,
    pub points: usize,
    /// Maximum analytic width from the generator, when known.
    pub max_width: Option<f64>,
    pub detected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeBin {
    pub label: &'static str,
    pub count: usize,
    pub detected: usize,
}

impl SizeBin {
    /// `None` for an empty bin.
    pub fn rate(&self) -> Option<f64> {
        (self.count > 0).then(|| self.detected as f64 / self.count as f64)
    }
}

/// Per-crack detection flags for one cloud, sorted by point count.
pub fn detection_by_size(
    cloud: &str,
    table: &MatchTable,
    real: &[CrackInstance],
    widths: Option<&HashMap<u32, f64>>,
) -> Vec<SizeRow> {
    let hit = table.matches_per_real();
    let mut rows: Vec<SizeRow> = real
        .iter()
        .map(|r| SizeRow {
            cloud: cloud.to_string(),
            id: r.id,
            points: r.point_count(),
            max_width: widths.and_then(|w| w.get(&r.id).copied()),
            detected: hit.contains_key(&r.id),
        })
        .collect();
    rows.sort_by(|a, b| (a.points, &a.cloud, a.id).cmp(&(b.points, &b.cloud, b.id)));
    rows
}

/// Summary bins by point count and, where widths are known, by width.
pub fn size_bins(rows: &[SizeRow]) -> Vec<SizeBin> {
    let bin = |label, f: &dyn Fn(&SizeRow) -> bool| {
        let sel: Vec<&SizeRow> = rows.iter().filter(|r| f(r)).collect();
        SizeBin {
            label,
            count: sel.len(),
            detected: sel.iter().filter(|r| r.detected).count(),
        }
    };
    let mut out = vec![
        bin("points <= 500", &|r| r.points <= SMALL_CRACK_POINTS),
        bin("points > 500", &|r| r.points > SMALL_CRACK_POINTS),
    ];
    if rows.iter().any(|r| r.max_width.is_some()) {
        out.push(bin("width < 3 cm", &|r| r.max_width.is_some_and(|w| w < WIDE_CRACK)));
        out.push(bin("width >= 3 cm", &|r| r.max_width.is_some_and(|w| w >= WIDE_CRACK)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub delta_h: f64,
    pub confusion: Confusion,
}

impl SweepPoint {
    pub fn scores(&self) -> PointScores {
        self.confusion.scores()
    }
}

/// Point-wise scores of `confidence >= Δ_H` for each threshold, pooled
/// over all layers. Works on raw confidences, before clustering.
pub fn threshold_sweep(layers: &[(&AnnotationLayer, &[u8])], thresholds: &[f64]) -> Result<Vec<SweepPoint>> {
    for (layer, truth) in layers {
        if layer.len() != truth.len() {
            return Err(Error::Contract(format!(
                "layer of {} points against {} labels",
                layer.len(),
                truth.len()
            )));
        }
    }
    Ok(thresholds
        .iter()
        .map(|&delta_h| {
            let mut c = Confusion::default();
            for (layer, truth) in layers {
                for (&conf, &t) in layer.confidence.iter().zip(truth.iter()) {
                    match (conf as f64 >= delta_h, t == 1) {
                        (true, true) => c.tp += 1,
                        (true, false) => c.fp += 1,
                        (false, false) => c.tn += 1,
                        (false, true) => c.fn_ += 1,
                    }
                }
            }
            SweepPoint { delta_h, confusion: c }
        })
        .collect())
}

/// Counts accumulated over one or more clouds, from which every metric
/// is derived.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub delta_h: f64,
    pub delta_r: f64,
    pub delta_n: usize,
    pub confusion: Confusion,
    /// Real crack instances.
    pub n_cr: usize,
    /// Real cracks matched at least once.
    pub detected: usize,
    /// Number of real cracks keyed by how many predictions matched them.
    pub match_counts: BTreeMap<usize, usize>,
    pub predicted: usize,
    pub predicted_matched: usize,
    pub sizes: Vec<SizeRow>,
}

/// Inputs for evaluating one cloud.
pub struct CloudResult<'a> {
    pub tag: &'a str,
    pub predicted_labels: &'a [u8],
    pub truth: &'a [u8],
    pub predicted: &'a [CrackInstance],
    pub real: &'a [CrackInstance],
    pub widths: Option<&'a HashMap<u32, f64>>,
}

impl MetricsReport {
    pub fn new(delta_h: f64, delta_r: f64, delta_n: usize) -> Self {
        MetricsReport {
            delta_h,
            delta_r,
            delta_n,
            ..Default::default()
        }
    }

    pub fn add_cloud(&mut self, cloud: &CloudResult<'_>, alpha: f64) -> Result<()> {
        self.confusion.add(Confusion::count(cloud.predicted_labels, cloud.truth)?);
        let table = match_instances(cloud.predicted, cloud.real, alpha);
        let per = table.matches_per_real();
        self.n_cr += cloud.real.len();
        self.detected += per.len();
        for (k, c) in match_histogram(per.values().copied()) {
            *self.match_counts.entry(k).or_insert(0) += c;
        }
        self.predicted += table.predicted_count;
        self.predicted_matched += table.matches.len();
        self.sizes
            .extend(detection_by_size(cloud.tag, &table, cloud.real, cloud.widths));
        Ok(())
    }

    pub fn scores(&self) -> PointScores {
        self.confusion.scores()
    }

    pub fn cr_det(&self) -> Result<f64> {
        if self.n_cr == 0 {
            return Err(Error::UndefinedMetric("detection rate without real cracks"));
        }
        Ok(self.detected as f64 / self.n_cr as f64)
    }

    pub fn cr_con(&self) -> Result<f64> {
        if self.n_cr == 0 {
            return Err(Error::UndefinedMetric("continuity without real cracks"));
        }
        Ok(reciprocal_mean(&self.match_counts, self.n_cr))
    }

    pub fn cr_pre(&self) -> Option<f64> {
        (self.predicted > 0).then(|| self.predicted_matched as f64 / self.predicted as f64)
    }

    pub fn bins(&self) -> Vec<SizeBin> {
        let mut rows = self.sizes.clone();
        rows.sort_by(|a, b| (a.points, &a.cloud, a.id).cmp(&(b.points, &b.cloud, b.id)));
        size_bins(&rows)
    }

    pub const CSV_HEADER: &'static str =
        "delta_h,delta_r,delta_n,precision,recall,specificity,f1,cr_det,cr_con,cr_pre,n_cr,n_pred";

    pub fn csv_row(&self) -> String {
        let s = self.scores();
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}",
            self.delta_h,
            self.delta_r,
            self.delta_n,
            s.precision,
            s.recall,
            s.specificity,
            s.f1,
            opt(self.cr_det().ok()),
            opt(self.cr_con().ok()),
            opt(self.cr_pre()),
            self.n_cr,
            self.predicted
        )
    }

    pub fn to_text(&self) -> String {
        let s = self.scores();
        let c = self.confusion;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "thresholds: delta_h={} delta_r={} delta_n={}",
            self.delta_h, self.delta_r, self.delta_n
        );
        let _ = writeln!(out, "points: TP={} FP={} TN={} FN={}", c.tp, c.fp, c.tn, c.fn_);
        let _ = writeln!(
            out,
            "precision={:.4} recall={:.4} specificity={:.4} f1={:.4}",
            s.precision, s.recall, s.specificity, s.f1
        );
        let _ = writeln!(
            out,
            "cracks: real={} predicted={} detected={}",
            self.n_cr, self.predicted, self.detected
        );
        let _ = writeln!(
            out,
            "cr_det={} cr_con={} cr_pre={}",
            opt(self.cr_det().ok()),
            opt(self.cr_con().ok()),
            opt(self.cr_pre())
        );
        for b in self.bins() {
            let _ = writeln!(out, "  {:<14} {}/{} detected ({})", b.label, b.detected, b.count, opt(b.rate()));
        }
        out
    }
}
