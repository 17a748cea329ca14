//! Lesion matching, detection and localization metrics, report files.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anatomical::{lookup_region, Region, RegionLabelMap};
use crate::detector::DetectionCandidate;
use crate::error::{Error, Result};
use crate::volume_io::CMBAnnotation;

/// Default distance within which a candidate counts as hitting a lesion.
pub const DEFAULT_MATCH_RADIUS_MM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(candidate index, annotation index)` in the caller's ordering.
    pub pairs: Vec<(usize, usize)>,
    pub match_radius_mm: f64,
}

/// Descending score, then lexicographic centre.
pub(crate) fn score_order(a: &DetectionCandidate, b: &DetectionCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.center[0].total_cmp(&b.center[0]))
        .then_with(|| a.center[1].total_cmp(&b.center[1]))
        .then_with(|| a.center[2].total_cmp(&b.center[2]))
}

fn dist_mm(a: [f64; 3], b: [f64; 3], spacing: [f64; 3]) -> f64 {
    (0..3).map(|i| ((a[i] - b[i]) * spacing[i]).powi(2)).sum::<f64>().sqrt()
}

/// Candidate indices sorted for greedy matching.
fn ranked(cands: &[DetectionCandidate]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cands.len()).collect();
    idx.sort_by(|&i, &j| score_order(&cands[i], &cands[j]).then(i.cmp(&j)));
    idx
}

/// Per-candidate annotation hit in ranked order (`None` for a false positive).
fn greedy_hits(
    cands: &[DetectionCandidate],
    annotations: &[[f64; 3]],
    spacing: [f64; 3],
    radius_mm: f64,
) -> Vec<(usize, Option<usize>)> {
    let mut used = vec![false; annotations.len()];
    ranked(cands)
        .into_iter()
        .map(|ci| {
            let mut best: Option<(f64, usize)> = None;
            for (ai, a) in annotations.iter().enumerate() {
                if used[ai] {
                    continue;
                }
                let d = dist_mm(cands[ci].center, *a, spacing);
                if d <= radius_mm && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, ai));
                }
            }
            if let Some((_, ai)) = best {
                used[ai] = true;
            }
            (ci, best.map(|(_, ai)| ai))
        })
        .collect()
}

/// Greedy matching by descending score: each candidate takes the nearest
/// still-unmatched annotation within `radius_mm`.
pub fn match_detections(
    cands: &[DetectionCandidate],
    annotations: &[[f64; 3]],
    spacing: [f64; 3],
    radius_mm: f64,
) -> MatchResult {
    let pairs: Vec<(usize, usize)> = greedy_hits(cands, annotations, spacing, radius_mm)
        .into_iter()
        .filter_map(|(c, a)| a.map(|a| (c, a)))
        .collect();
    let tp = pairs.len();
    MatchResult {
        tp,
        fp: cands.len() - tp,
        fn_: annotations.len() - tp,
        pairs,
        match_radius_mm: radius_mm,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `None` when there are no annotated lesions.
    pub sensitivity: Option<f64>,
    /// `None` when nothing was detected.
    pub precision: Option<f64>,
    pub fp_avg: f64,
    pub n_subjects: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Pooled sensitivity and precision, false positives per subject.
pub fn detection_metrics(matches: &[MatchResult]) -> Result<DetectionMetrics> {
    if matches.is_empty() {
        return Err(Error::invalid("matches", "at least one subject is required"));
    }
    let tp: usize = matches.iter().map(|m| m.tp).sum();
    let fp: usize = matches.iter().map(|m| m.fp).sum();
    let fn_: usize = matches.iter().map(|m| m.fn_).sum();
    Ok(DetectionMetrics {
        tp,
        fp,
        fn_,
        sensitivity: ratio(tp, tp + fn_),
        precision: ratio(tp, tp + fp),
        fp_avg: fp as f64 / matches.len() as f64,
        n_subjects: matches.len(),
    })
}

/// Detections and ground truth of one subject in native voxel space.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSubject {
    pub id: String,
    pub candidates: Vec<DetectionCandidate>,
    pub annotations: Vec<CMBAnnotation>,
    pub spacing: [f64; 3],
}

impl EvalSubject {
    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.annotations.iter().map(|a| a.center).collect()
    }

    pub fn match_at(&self, threshold: f64, radius_mm: f64) -> MatchResult {
        let kept: Vec<DetectionCandidate> =
            self.candidates.iter().filter(|c| c.score >= threshold).cloned().collect();
        match_detections(&kept, &self.centers(), self.spacing, radius_mm)
    }
}

/// Metrics after discarding candidates below `threshold`.
pub fn metrics_at(subjects: &[EvalSubject], threshold: f64, radius_mm: f64) -> Result<DetectionMetrics> {
    let m: Vec<MatchResult> = subjects.iter().map(|s| s.match_at(threshold, radius_mm)).collect();
    detection_metrics(&m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    /// Undefined points never occur: each threshold keeps at least one candidate.
    pub precision: f64,
    pub recall: f64,
    pub fp_avg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per distinct score, threshold descending.
    pub points: Vec<CurvePoint>,
    pub auc_pr: f64,
}

/// `sum_i (r_i - r_{i-1}) p_i` with `r_0 = 0`, points ordered by rising recall.
pub fn step_auc(points: &[CurvePoint]) -> f64 {
    let mut prev = 0.0;
    let mut auc = 0.0;
    for p in points {
        auc += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    auc
}

/// Precision-recall and sensitivity-vs-FP_avg sweep over every distinct score.
///
/// Greedy matching in score order never revisits earlier decisions, so the
/// matching at threshold `t` is the prefix of one full matching; one pass
/// yields every operating point.
pub fn pr_curve(subjects: &[EvalSubject], radius_mm: f64) -> Result<PrCurve> {
    if subjects.is_empty() {
        return Err(Error::invalid("subjects", "at least one subject is required"));
    }
    let total_gt: usize = subjects.iter().map(|s| s.annotations.len()).sum();
    let mut hits: Vec<(f64, bool)> = Vec::new();
    for s in subjects {
        for (ci, a) in greedy_hits(&s.candidates, &s.centers(), s.spacing, radius_mm) {
            hits.push((s.candidates[ci].score, a.is_some()));
        }
    }
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_s = subjects.len() as f64;
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < hits.len() {
        let t = hits[i].0;
        while i < hits.len() && hits[i].0 == t {
            if hits[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(CurvePoint {
            threshold: t,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if total_gt > 0 { tp as f64 / total_gt as f64 } else { 0.0 },
            fp_avg: fp as f64 / n_s,
        });
    }
    let auc_pr = step_auc(&points);
    Ok(PrCurve { points, auc_pr })
}

/// Per-class Dice with class-mean and voxel-pooled totals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub lobar: f64,
    pub deep: f64,
    pub infratentorial: f64,
    /// Mean of the three classes.
    pub total: f64,
    /// `2 sum|P_k & T_k| / sum(|P_k| + |T_k|)` over the three classes.
    pub pooled: f64,
    /// Classes absent from both maps, scored 1.0.
    pub absent: Vec<Region>,
}

impl DiceReport {
    pub fn class(&self, r: Region) -> Option<f64> {
        match r {
            Region::None => None,
            Region::Lobar => Some(self.lobar),
            Region::Deep => Some(self.deep),
            Region::Infratentorial => Some(self.infratentorial),
        }
    }

    pub fn min_class(&self) -> f64 {
        self.lobar.min(self.deep).min(self.infratentorial)
    }
}

pub fn dice_score(pred: &RegionLabelMap, truth: &RegionLabelMap) -> Result<DiceReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut inter = [0usize; 4];
    let mut np = [0usize; 4];
    let mut nt = [0usize; 4];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        np[p as usize] += 1;
        nt[t as usize] += 1;
        if p == t {
            inter[p as usize] += 1;
        }
    }
    let mut absent = Vec::new();
    let per: Vec<f64> = Region::TISSUE
        .iter()
        .map(|&r| {
            let k = r.code() as usize;
            if np[k] + nt[k] == 0 {
                absent.push(r);
                1.0
            } else {
                2.0 * inter[k] as f64 / (np[k] + nt[k]) as f64
            }
        })
        .collect();
    let i_sum: usize = inter[1..].iter().sum();
    let d_sum: usize = np[1..].iter().sum::<usize>() + nt[1..].iter().sum::<usize>();
    Ok(DiceReport {
        lobar: per[0],
        deep: per[1],
        infratentorial: per[2],
        total: per.iter().sum::<f64>() / 3.0,
        pooled: if d_sum == 0 { 1.0 } else { 2.0 * i_sum as f64 / d_sum as f64 },
        absent,
    })
}

/// Correctly localized and total lesions per class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalizationConfusion {
    pub tp_lobar: usize,
    pub tp_deep: usize,
    pub tp_infra: usize,
    pub n_lobar: usize,
    pub n_deep: usize,
    pub n_infra: usize,
}

impl LocalizationConfusion {
    pub fn add(&mut self, truth: Region, predicted: Region) {
        let hit = (truth == predicted) as usize;
        match truth {
            Region::Lobar => {
                self.n_lobar += 1;
                self.tp_lobar += hit;
            }
            Region::Deep => {
                self.n_deep += 1;
                self.tp_deep += hit;
            }
            Region::Infratentorial => {
                self.n_infra += 1;
                self.tp_infra += hit;
            }
            Region::None => {}
        }
    }

    pub fn merge(&mut self, o: &Self) {
        self.tp_lobar += o.tp_lobar;
        self.tp_deep += o.tp_deep;
        self.tp_infra += o.tp_infra;
        self.n_lobar += o.n_lobar;
        self.n_deep += o.n_deep;
        self.n_infra += o.n_infra;
    }
}

/// Compares the rater's region of each annotated lesion with the label map at its centre.
pub fn localization_confusion(annotations: &[CMBAnnotation], map: &RegionLabelMap) -> Result<LocalizationConfusion> {
    let mut c = LocalizationConfusion::default();
    for a in annotations {
        if let Some(truth) = a.region {
            c.add(truth, lookup_region(a.center, map)?.region);
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationAccuracy {
    pub lobar: Option<f64>,
    pub deep: Option<f64>,
    pub infratentorial: Option<f64>,
    pub total: f64,
}

pub fn localization_accuracy(c: &LocalizationConfusion) -> Result<LocalizationAccuracy> {
    let n = c.n_lobar + c.n_deep + c.n_infra;
    if n == 0 {
        return Err(Error::invalid("confusion", "no annotated lesion carries a region"));
    }
    for (tp, n) in [(c.tp_lobar, c.n_lobar), (c.tp_deep, c.n_deep), (c.tp_infra, c.n_infra)] {
        if tp > n {
            return Err(Error::invalid("confusion", format!("{tp} correct out of {n}")));
        }
    }
    Ok(LocalizationAccuracy {
        lobar: ratio(c.tp_lobar, c.n_lobar),
        deep: ratio(c.tp_deep, c.n_deep),
        infratentorial: ratio(c.tp_infra, c.n_infra),
        total: (c.tp_lobar + c.tp_deep + c.tp_infra) as f64 / n as f64,
    })
}

/// Eliminated false positives per subject.
pub fn efp_avg(eliminated: usize, n_subjects: usize) -> Result<f64> {
    if n_subjects == 0 {
        return Err(Error::invalid("n_subjects", "must be at least 1"));
    }
    Ok(eliminated as f64 / n_subjects as f64)
}

/// Everything reported for one evaluation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_subjects: usize,
    pub threshold: f64,
    pub match_radius_mm: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub sensitivity: Option<f64>,
    pub precision: Option<f64>,
    pub fp_avg: f64,
    pub auc_pr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<DiceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub la: Option<LocalizationAccuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub efp_avg: Option<f64>,
}

impl MetricsReport {
    /// Detection metrics at `threshold`; the PR area uses every candidate.
    pub fn detection(subjects: &[EvalSubject], threshold: f64, radius_mm: f64) -> Result<Self> {
        let m = metrics_at(subjects, threshold, radius_mm)?;
        let curve = pr_curve(subjects, radius_mm)?;
        Ok(Self {
            n_subjects: m.n_subjects,
            threshold,
            match_radius_mm: radius_mm,
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            sensitivity: m.sensitivity,
            precision: m.precision,
            fp_avg: m.fp_avg,
            auc_pr: curve.auc_pr,
            dice: None,
            la: None,
            efp_avg: None,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// CSV with columns `threshold, precision, recall, fp_avg`.
pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Percentage with two decimals, for display only.
pub fn percent(r: Option<f64>) -> String {
    r.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}%", 100.0 * v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(c: [f64; 3], score: f64) -> DetectionCandidate {
        DetectionCandidate {
            center: c,
            size_mm: 5.0,
            score,
            region: None,
        }
    }

    const ISO: [f64; 3] = [1.0; 3];

    #[test]
    fn matching_examples() {
        let m = match_detections(&[cand([0.5, 0.0, 0.0], 0.9)], &[[0.0; 3]], ISO, 5.0);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        let m = match_detections(&[cand([1.0, 0.0, 0.0], 0.9), cand([0.0, 1.0, 0.0], 0.8)], &[[0.0; 3]], ISO, 5.0);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        assert_eq!(m.pairs, vec![(0, 0)]);
        let m = match_detections(&[], &[[0.0; 3], [9.0; 3]], ISO, 5.0);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 2));
    }

    #[test]
    fn matching_uses_mm_distance() {
        let c = [cand([0.0, 0.0, 3.0], 0.9)];
        assert_eq!(match_detections(&c, &[[0.0; 3]], [0.5, 0.5, 1.0], 5.0).tp, 1);
        assert_eq!(match_detections(&c, &[[0.0; 3]], [0.5, 0.5, 2.0], 5.0).tp, 0);
    }

    #[test]
    fn higher_score_claims_the_lesion_first() {
        // The better-scored candidate is farther away but still wins.
        let c = [cand([0.5, 0.0, 0.0], 0.6), cand([3.0, 0.0, 0.0], 0.9)];
        let m = match_detections(&c, &[[0.0; 3]], ISO, 5.0);
        assert_eq!(m.pairs, vec![(1, 0)]);
    }

    fn with_counts(tp: usize, fp: usize, fn_: usize) -> MatchResult {
        MatchResult {
            tp,
            fp,
            fn_,
            pairs: vec![],
            match_radius_mm: 5.0,
        }
    }

    #[test]
    fn detection_metric_examples() {
        let m = detection_metrics(&[with_counts(5, 1, 1), with_counts(4, 2, 0), with_counts(0, 0, 0), with_counts(0, 0, 0)])
            .unwrap();
        assert_eq!(m.sensitivity, Some(0.9));
        assert_eq!(m.precision, Some(0.75));
        assert_eq!(m.fp_avg, 0.75);
        let m = detection_metrics(&[with_counts(71, 0, 4)]).unwrap();
        assert!((m.sensitivity.unwrap() - 0.9466).abs() < 1e-3);
        assert_eq!(percent(m.sensitivity), "94.67%");
        let m = detection_metrics(&[with_counts(0, 0, 3), with_counts(0, 0, 1)]).unwrap();
        assert_eq!((m.sensitivity, m.precision, m.fp_avg), (Some(0.0), None, 0.0));
        assert!(detection_metrics(&[]).is_err());
    }

    fn subject(cands: Vec<DetectionCandidate>, gt: &[[f64; 3]]) -> EvalSubject {
        EvalSubject {
            id: "s".into(),
            candidates: cands,
            annotations: gt.iter().map(|&c| CMBAnnotation::new(c, None, None).unwrap()).collect(),
            spacing: ISO,
        }
    }

    #[test]
    fn pr_extremes() {
        let good = subject(vec![cand([0.0; 3], 0.9), cand([20.0; 3], 0.4)], &[[0.0; 3], [20.0; 3]]);
        assert_eq!(pr_curve(&[good], 5.0).unwrap().auc_pr, 1.0);
        let bad = subject(vec![cand([40.0; 3], 0.9), cand([60.0; 3], 0.4)], &[[0.0; 3]]);
        assert_eq!(pr_curve(&[bad], 5.0).unwrap().auc_pr, 0.0);
        let none = subject(vec![], &[[0.0; 3]]);
        let c = pr_curve(&[none], 5.0).unwrap();
        assert!(c.points.is_empty() && c.auc_pr == 0.0);
    }

    #[test]
    fn pr_mixed_case_by_hand() {
        // Scores 0.9 (hit), 0.7 (miss), 0.5 (hit) against two lesions.
        let s = subject(
            vec![cand([0.0; 3], 0.9), cand([30.0; 3], 0.7), cand([10.0; 3], 0.5)],
            &[[0.0; 3], [10.0; 3]],
        );
        let c = pr_curve(&[s], 5.0).unwrap();
        let pr: Vec<(f64, f64)> = c.points.iter().map(|p| (p.precision, p.recall)).collect();
        assert_eq!(pr, vec![(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0)]);
        assert!((c.auc_pr - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    fn map(labels: Vec<u8>) -> RegionLabelMap {
        let n = labels.len();
        RegionLabelMap::new(labels, [n, 1, 1], ISO).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = map(vec![0, 1, 2, 3, 1]);
        let d = dice_score(&a, &a).unwrap();
        assert_eq!((d.lobar, d.deep, d.infratentorial, d.total, d.pooled), (1.0, 1.0, 1.0, 1.0, 1.0));
        let d = dice_score(&map(vec![1, 1, 2, 2, 3, 3]), &map(vec![2, 3, 3, 1, 1, 2])).unwrap();
        assert_eq!((d.lobar, d.deep, d.infratentorial), (0.0, 0.0, 0.0));
        let d = dice_score(&map(vec![1, 1, 0]), &map(vec![0, 1, 1])).unwrap();
        assert_eq!(d.lobar, 0.5);
        assert_eq!(d.absent, vec![Region::Deep, Region::Infratentorial]);
        assert!(dice_score(&map(vec![1]), &map(vec![1, 1])).is_err());
    }

    #[test]
    fn localization_examples() {
        let c = LocalizationConfusion {
            tp_lobar: 97,
            tp_deep: 10,
            tp_infra: 5,
            n_lobar: 100,
            n_deep: 10,
            n_infra: 5,
        };
        let la = localization_accuracy(&c).unwrap();
        assert_eq!((la.lobar, la.deep, la.infratentorial), (Some(0.97), Some(1.0), Some(1.0)));
        assert!((la.total - 112.0 / 115.0).abs() < 1e-15);
        assert!((la.total - 0.974).abs() < 5e-4);
        let zero = LocalizationConfusion { tp_lobar: 0, tp_deep: 0, tp_infra: 0, ..c };
        let la = localization_accuracy(&zero).unwrap();
        assert_eq!((la.lobar, la.total), (Some(0.0), 0.0));
        let only_lobar = LocalizationConfusion { n_lobar: 2, tp_lobar: 2, ..Default::default() };
        assert_eq!(localization_accuracy(&only_lobar).unwrap().deep, None);
        assert!(localization_accuracy(&LocalizationConfusion::default()).is_err());
    }

    #[test]
    fn confusion_from_map() {
        let m = map(vec![1, 2, 3, 0]);
        let ann = [
            CMBAnnotation::new([0.0, 0.0, 0.0], None, Some(Region::Lobar)).unwrap(),
            CMBAnnotation::new([1.0, 0.0, 0.0], None, Some(Region::Lobar)).unwrap(),
            CMBAnnotation::new([2.0, 0.0, 0.0], None, None).unwrap(),
        ];
        let c = localization_confusion(&ann, &m).unwrap();
        assert_eq!((c.tp_lobar, c.n_lobar, c.n_deep), (1, 2, 0));
    }

    #[test]
    fn efp_examples() {
        assert!((efp_avg(7, 23).unwrap() - 0.304).abs() < 5e-4);
        assert_eq!(format!("{:.2}", efp_avg(7, 23).unwrap()), "0.30");
        assert!((efp_avg(8, 23).unwrap() - 0.348).abs() < 5e-4);
        assert_eq!(efp_avg(0, 23).unwrap(), 0.0);
        assert!(efp_avg(1, 0).is_err());
    }

    #[test]
    fn report_and_curve_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = subject(vec![cand([0.0; 3], 0.9), cand([30.0; 3], 0.7)], &[[0.0; 3]]);
        let r = MetricsReport::detection(&[s.clone()], 0.5, 5.0).unwrap();
        let p = dir.path().join("reports/r.json");
        r.write(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(v["fn"], 0);
        assert_eq!(v["precision"], 0.5);
        let curve = pr_curve(&[s], 5.0).unwrap();
        let cp = dir.path().join("curves/pr.csv");
        write_curve_csv(&cp, &curve.points).unwrap();
        assert!(fs::read_to_string(&cp).unwrap().starts_with("threshold,precision,recall,fp_avg\n"));
        assert_eq!(read_curve_csv(&cp).unwrap(), curve.points);
    }

    proptest! {
        #[test]
        fn count_identities_and_sweep_consistency(
            cs in prop::collection::vec((prop::array::uniform3(0.0f64..20.0), 0.01f64..0.99), 0..30),
            gt in prop::collection::vec(prop::array::uniform3(0.0f64..20.0), 0..12),
        ) {
            let cands: Vec<_> = cs.iter().map(|&(c, s)| cand(c, s)).collect();
            let m = match_detections(&cands, &gt, [0.5, 0.5, 2.0], 5.0);
            prop_assert_eq!(m.tp, m.pairs.len());
            prop_assert_eq!(m.tp + m.fn_, gt.len());
            prop_assert_eq!(m.tp + m.fp, cands.len());
            let s = EvalSubject { spacing: [0.5, 0.5, 2.0], ..subject(cands, &gt) };
            let curve = pr_curve(&[s.clone()], 5.0).unwrap();
            let mut last_recall = 0.0;
            for p in &curve.points {
                prop_assert!(p.recall >= last_recall);
                last_recall = p.recall;
                let direct = s.match_at(p.threshold, 5.0);
                prop_assert_eq!(p.fp_avg, direct.fp as f64);
                if !gt.is_empty() {
                    prop_assert_eq!(p.recall, direct.tp as f64 / gt.len() as f64);
                }
            }
        }
    }
}
