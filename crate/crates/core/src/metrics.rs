//! Tolerance-aware crack evaluation.
//!
//! A predicted crack pixel is a true positive when some ground-truth crack
//! pixel lies within the tolerance radius, otherwise a false positive. A
//! ground-truth crack pixel with no predicted pixel within the radius is a
//! false negative. Matching is many-to-one, so `tp + fn` need not equal the
//! number of ground-truth pixels when `radius > 0`.
//!
//! Threshold sweeps use the grid `t = k / 1000`, `k = 1..=999`, and binarise
//! with `p >= t`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ProbabilityMap};

/// Number of thresholds in a sweep.
pub const SWEEP_LEN: usize = 999;

/// The `k`-th sweep threshold, `k` in `1..=999`.
pub fn sweep_threshold(k: usize) -> f64 {
    k as f64 / 1000.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Chebyshev,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerance {
    pub radius: f64,
    pub metric: DistanceMetric,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            radius: 2.0,
            metric: DistanceMetric::Euclidean,
        }
    }
}

impl Tolerance {
    pub fn euclidean(radius: f64) -> Self {
        Tolerance {
            radius,
            metric: DistanceMetric::Euclidean,
        }
    }

    /// Whether a pixel offset lies within the radius.
    pub fn accepts(&self, dy: i64, dx: i64) -> bool {
        match self.metric {
            DistanceMetric::Euclidean => ((dy * dy + dx * dx) as f64) <= self.radius * self.radius,
            DistanceMetric::Chebyshev => (dy.abs().max(dx.abs()) as f64) <= self.radius,
        }
    }

    /// All accepted offsets.
    pub fn offsets(&self) -> Vec<(i64, i64)> {
        let r = if self.radius.is_finite() && self.radius > 0.0 {
            libm::floor(self.radius) as i64
        } else {
            0
        };
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if self.accepts(dy, dx) {
                    out.push((dy, dx));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl core::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub pr: f64,
    pub re: f64,
    pub f1: f64,
}

/// Precision, recall and F1. An empty denominator gives 1 for that ratio,
/// and F1 is 0 when both ratios are 0.
pub fn prf(c: ConfusionCounts) -> Prf {
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let pr = ratio(c.tp, c.tp + c.fp);
    let re = ratio(c.tp, c.tp + c.fn_);
    let f1 = if pr + re == 0.0 { 0.0 } else { 2.0 * pr * re / (pr + re) };
    Prf { pr, re, f1 }
}

/// For each pixel, the maximum of `values` over the tolerance disk
/// (`None` where the disk holds no value).
fn disk_max<T: Copy + Ord>(h: usize, w: usize, values: &[Option<T>], offsets: &[(i64, i64)]) -> Vec<Option<T>> {
    let mut out = vec![None; h * w];
    for (i, v) in values.iter().enumerate() {
        let Some(v) = *v else { continue };
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        for &(dy, dx) in offsets {
            let (ny, nx) = (y + dy, x + dx);
            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                continue;
            }
            let slot = &mut out[ny as usize * w + nx as usize];
            if slot.is_none_or(|s| v > s) {
                *slot = Some(v);
            }
        }
    }
    out
}

fn check_shapes(h: usize, w: usize, gt: &BinaryMask) -> Result<()> {
    if (h, w) != (gt.height(), gt.width()) {
        return Err(Error::shape("metrics", &[gt.height(), gt.width()], &[h, w]));
    }
    Ok(())
}

pub fn tolerant_confusion(pred: &BinaryMask, gt: &BinaryMask, tol: Tolerance) -> Result<ConfusionCounts> {
    let (h, w) = (pred.height(), pred.width());
    check_shapes(h, w, gt)?;
    let offsets = tol.offsets();
    let as_opt = |m: &BinaryMask| m.data().iter().map(|&b| b.then_some(())).collect::<Vec<_>>();
    let near_gt = disk_max(h, w, &as_opt(gt), &offsets);
    let near_pred = disk_max(h, w, &as_opt(pred), &offsets);
    let mut c = ConfusionCounts::default();
    for i in 0..h * w {
        if pred.data()[i] {
            if near_gt[i].is_some() {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        if gt.data()[i] && near_pred[i].is_none() {
            c.fn_ += 1;
        }
    }
    Ok(c)
}

/// Largest `k` in `0..=999` with `sweep_threshold(k) <= p` (0 when `p` is
/// below every threshold).
fn level(p: f64) -> usize {
    let mut k = libm::floor(p * 1000.0).clamp(0.0, SWEEP_LEN as f64) as usize;
    while k < SWEEP_LEN && p >= sweep_threshold(k + 1) {
        k += 1;
    }
    while k > 0 && p < sweep_threshold(k) {
        k -= 1;
    }
    k
}

/// Confusion counts of one image at every sweep threshold; entry `k - 1`
/// holds threshold `k / 1000`.
pub fn sweep_image(prob: &ProbabilityMap, gt: &BinaryMask, tol: Tolerance) -> Result<Vec<ConfusionCounts>> {
    let (h, w) = (prob.height(), prob.width());
    check_shapes(h, w, gt)?;
    let offsets = tol.offsets();
    let levels: Vec<usize> = prob.data().iter().map(|&p| level(p)).collect();
    let gt_opt: Vec<Option<()>> = gt.data().iter().map(|&b| b.then_some(())).collect();
    let near_gt = disk_max(h, w, &gt_opt, &offsets);
    let lv_opt: Vec<Option<usize>> = levels.iter().map(|&l| Some(l)).collect();
    let best_near = disk_max(h, w, &lv_opt, &offsets);
    // tp_hist[l]: pixels predicted up to level l that are near the ground truth.
    let mut tp_hist = vec![0u64; SWEEP_LEN + 1];
    let mut fp_hist = vec![0u64; SWEEP_LEN + 1];
    // miss_hist[l]: ground-truth pixels whose best nearby level is l.
    let mut miss_hist = vec![0u64; SWEEP_LEN + 1];
    for i in 0..h * w {
        if near_gt[i].is_some() {
            tp_hist[levels[i]] += 1;
        } else {
            fp_hist[levels[i]] += 1;
        }
        if gt.data()[i] {
            miss_hist[best_near[i].unwrap_or(0)] += 1;
        }
    }
    let mut out = vec![ConfusionCounts::default(); SWEEP_LEN];
    let (mut tp, mut fp) = (0u64, 0u64);
    for k in (1..=SWEEP_LEN).rev() {
        tp += tp_hist[k];
        fp += fp_hist[k];
        out[k - 1].tp = tp;
        out[k - 1].fp = fp;
    }
    let mut fn_ = 0u64;
    for k in 1..=SWEEP_LEN {
        fn_ += miss_hist[k - 1];
        out[k - 1].fn_ = fn_;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub pr: f64,
    pub re: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdsResult {
    pub ods: f64,
    pub best_t: f64,
    pub curve: Vec<CurvePoint>,
}

fn sweeps(probs: &[ProbabilityMap], gts: &[BinaryMask], tol: Tolerance) -> Result<Vec<Vec<ConfusionCounts>>> {
    if probs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if probs.len() != gts.len() {
        return Err(crate::error::contract!(
            "{} probability maps but {} ground truths",
            probs.len(),
            gts.len()
        ));
    }
    probs.iter().zip(gts).map(|(p, g)| sweep_image(p, g, tol)).collect()
}

fn ods_from(sweeps: &[Vec<ConfusionCounts>]) -> OdsResult {
    let mut curve = Vec::with_capacity(SWEEP_LEN);
    let (mut ods, mut best_t) = (f64::NEG_INFINITY, sweep_threshold(1));
    for k in 0..SWEEP_LEN {
        let mut total = ConfusionCounts::default();
        for s in sweeps {
            total += s[k];
        }
        let m = prf(total);
        let t = sweep_threshold(k + 1);
        if m.f1 > ods {
            ods = m.f1;
            best_t = t;
        }
        curve.push(CurvePoint {
            t,
            pr: m.pr,
            re: m.re,
            f1: m.f1,
        });
    }
    OdsResult { ods, best_t, curve }
}

fn ois_from(sweeps: &[Vec<ConfusionCounts>]) -> f64 {
    let total: f64 = sweeps
        .iter()
        .map(|s| s.iter().map(|&c| prf(c).f1).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / sweeps.len() as f64
}

/// Best dataset-level F1 over the sweep, the first threshold reaching it and
/// the precision/recall curve.
pub fn ods(probs: &[ProbabilityMap], gts: &[BinaryMask], tol: Tolerance) -> Result<OdsResult> {
    Ok(ods_from(&sweeps(probs, gts, tol)?))
}

/// Mean over images of each image's best F1 over the sweep.
pub fn ois(probs: &[ProbabilityMap], gts: &[BinaryMask], tol: Tolerance) -> Result<f64> {
    Ok(ois_from(&sweeps(probs, gts, tol)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub pr: f64,
    pub re: f64,
    pub f1: f64,
    pub ods: f64,
    pub best_t: f64,
    pub ois: f64,
    pub pr_curve: Vec<CurvePoint>,
}

/// Fixed-threshold scores (counts summed over the dataset) plus ODS, OIS
/// and the sweep curve.
pub fn evaluate(probs: &[ProbabilityMap], gts: &[BinaryMask], threshold: f64, tol: Tolerance) -> Result<MetricsReport> {
    let sw = sweeps(probs, gts, tol)?;
    let mut counts = ConfusionCounts::default();
    for (p, g) in probs.iter().zip(gts) {
        counts += tolerant_confusion(&p.threshold(threshold), g, tol)?;
    }
    let m = prf(counts);
    let o = ods_from(&sw);
    Ok(MetricsReport {
        threshold,
        counts,
        pr: m.pr,
        re: m.re,
        f1: m.f1,
        ods: o.ods,
        best_t: o.best_t,
        ois: ois_from(&sw),
        pr_curve: o.curve,
    })
}

/// Dataset F1 of binary predictions (counts summed over images).
pub fn dataset_prf(preds: &[BinaryMask], gts: &[BinaryMask], tol: Tolerance) -> Result<Prf> {
    if preds.len() != gts.len() {
        return Err(crate::error::contract!(
            "{} predictions but {} ground truths",
            preds.len(),
            gts.len()
        ));
    }
    let mut total = ConfusionCounts::default();
    for (p, g) in preds.iter().zip(gts) {
        total += tolerant_confusion(p, g, tol)?;
    }
    Ok(prf(total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(h: usize, w: usize, y: usize, x: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| (r, c) == (y, x))
    }

    #[test]
    fn diagonal_neighbour_matches_distance_three_does_not() {
        let gt = point(7, 7, 3, 3);
        let c = tolerant_confusion(&point(7, 7, 4, 4), &gt, Tolerance::default()).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, fn_: 0 });
        let c = tolerant_confusion(&point(7, 7, 3, 6), &gt, Tolerance::default()).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn prf_examples() {
        let p = prf(ConfusionCounts { tp: 3, fp: 1, fn_: 2 });
        assert_eq!((p.pr, p.re), (0.75, 0.6));
        assert!((p.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-15);
        let e = prf(ConfusionCounts::default());
        assert_eq!((e.pr, e.re, e.f1), (1.0, 1.0, 1.0));
        let miss = prf(ConfusionCounts { tp: 0, fp: 0, fn_: 4 });
        assert_eq!((miss.pr, miss.re, miss.f1), (1.0, 0.0, 0.0));
        let spurious = prf(ConfusionCounts { tp: 0, fp: 4, fn_: 0 });
        assert_eq!((spurious.pr, spurious.re, spurious.f1), (0.0, 1.0, 0.0));
    }

    #[test]
    fn levels_agree_with_direct_comparison() {
        for &p in &[0.0, 0.0005, 0.001, 0.0011, 0.5, 0.29, 0.999, 0.9995, 1.0, 0.007, 0.57] {
            let l = level(p);
            for k in 1..=SWEEP_LEN {
                assert_eq!(k <= l, p >= sweep_threshold(k), "p = {p}, k = {k}");
            }
        }
    }

    #[test]
    fn chebyshev_accepts_corner() {
        let t = Tolerance {
            radius: 2.0,
            metric: DistanceMetric::Chebyshev,
        };
        assert!(t.accepts(2, 2));
        assert!(!Tolerance::default().accepts(2, 2));
        assert_eq!(Tolerance::euclidean(0.0).offsets(), [(0, 0)]);
    }

    #[test]
    fn perfect_maps_score_one() {
        let gt = BinaryMask::from_fn(6, 6, |y, x| x == y);
        let p = ProbabilityMap::from(&gt);
        let r = evaluate(
            core::slice::from_ref(&p),
            core::slice::from_ref(&gt),
            0.5,
            Tolerance::default(),
        )
        .unwrap();
        assert_eq!((r.pr, r.re, r.f1, r.ods, r.ois), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert!(r.pr_curve.iter().all(|c| c.f1 == 1.0));
        assert!(matches!(ods(&[], &[], Tolerance::default()), Err(Error::EmptyDataset)));
    }
}
