use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::anatomical::{filter_candidates, segment_subject, Region, RegionCounts, RegionLabelMap, Segmenter};
use crate::detector::{detect_subject_at, write_candidates, DetectionCandidate, Detector, SubjectCandidates};
use crate::error::{Error, Result};
use crate::evaluation::{
    dice_score, efp_avg, localization_accuracy, localization_confusion, match_detections, pr_curve, write_curve_csv,
    write_json, DiceReport, EvalSubject, LocalizationConfusion, MetricsReport, DEFAULT_MATCH_RADIUS_MM,
};
use crate::volume_io::SubjectRecord;

/// Candidates below this score are never kept; it only bounds the PR sweep.
pub const CURVE_FLOOR: f64 = 0.01;

/// Per-subject pipeline outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectPipeline {
    pub id: String,
    /// Candidates at or above the operating threshold before filtering.
    pub n_candidates: usize,
    /// Candidates at or above the threshold removed by the filter.
    pub eliminated: usize,
    /// Eliminated candidates that matched no lesion before filtering.
    pub eliminated_fp: usize,
    pub regions: RegionCounts,
    /// Filtered candidates at or above the threshold, tagged with regions.
    pub kept: Vec<DetectionCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<DiceReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub threshold: f64,
    pub subjects: Vec<SubjectPipeline>,
    pub pre: MetricsReport,
    /// Also carries Dice (with a segmenter), localization accuracy and EFP_avg.
    pub post: MetricsReport,
    pub efp_avg: f64,
    #[serde(skip)]
    pub pre_eval: Vec<EvalSubject>,
    #[serde(skip)]
    pub post_eval: Vec<EvalSubject>,
}

fn mean_dice(reports: &[DiceReport]) -> Option<DiceReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let avg = |f: fn(&DiceReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(DiceReport {
        lobar: avg(|d| d.lobar),
        deep: avg(|d| d.deep),
        infratentorial: avg(|d| d.infratentorial),
        total: avg(|d| d.total),
        pooled: avg(|d| d.pooled),
        absent: Region::TISSUE
            .into_iter()
            .filter(|r| reports.iter().all(|d| d.absent.contains(r)))
            .collect(),
    })
}

/// Detect, map to regions, filter and score every subject.
///
/// Region maps come from `segmenter` when given, otherwise from each
/// subject's own label map. Metrics are reported when annotations are
/// available, for both the raw and the filtered candidates.
pub fn run_pipeline_on(subjects: &[SubjectRecord], detector: &Detector, segmenter: Option<&Segmenter>) -> Result<PipelineReport> {
    if subjects.is_empty() {
        return Err(Error::invalid("subjects", "nothing to process"));
    }
    let threshold = detector.config().prob_threshold;
    let radius = DEFAULT_MATCH_RADIUS_MM;
    let mut out = Vec::with_capacity(subjects.len());
    let mut pre_eval = Vec::with_capacity(subjects.len());
    let mut post_eval = Vec::with_capacity(subjects.len());
    let mut dice = Vec::new();
    let mut confusion = LocalizationConfusion::default();
    for s in subjects {
        let all = detect_subject_at(s, detector, CURVE_FLOOR.min(threshold))?;
        let predicted: RegionLabelMap = match segmenter {
            Some(seg) => segment_subject(s, seg)?,
            None => s
                .label_map
                .clone()
                .ok_or_else(|| Error::invalid("subject", format!("{} has no label map and no segmenter was given", s.subject_id)))?,
        };
        if predicted.shape() != s.swi.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: region map {:?} vs image {:?}",
                s.subject_id,
                predicted.shape(),
                s.swi.shape()
            )));
        }
        let filtered = filter_candidates(&all, &predicted)?;
        let above: Vec<DetectionCandidate> = all.iter().filter(|c| c.score >= threshold).cloned().collect();
        let kept: Vec<DetectionCandidate> = filtered.kept.iter().filter(|c| c.score >= threshold).cloned().collect();
        let spacing = s.swi.spacing();
        let centers: Vec<[f64; 3]> = s.annotations.iter().map(|a| a.center).collect();
        let matched = match_detections(&above, &centers, spacing, radius);
        let mut eliminated = 0;
        let mut eliminated_fp = 0;
        for (i, c) in above.iter().enumerate() {
            if crate::anatomical::lookup_region(c.center, &predicted)?.region == Region::None {
                eliminated += 1;
                eliminated_fp += !matched.pairs.iter().any(|&(ci, _)| ci == i) as usize;
            }
        }
        let mut regions = RegionCounts::default();
        for c in &kept {
            match c.region {
                Some(Region::Lobar) => regions.lobar += 1,
                Some(Region::Deep) => regions.deep += 1,
                Some(Region::Infratentorial) => regions.infratentorial += 1,
                _ => {}
            }
        }
        let subject_dice = match (&s.label_map, segmenter) {
            (Some(truth), Some(_)) => Some(dice_score(&predicted, truth)?),
            _ => None,
        };
        if let Some(d) = &subject_dice {
            dice.push(d.clone());
        }
        confusion.merge(&localization_confusion(&s.annotations, &predicted)?);
        info!(
            "{}: {} candidates, {} kept, {} eliminated",
            s.subject_id,
            above.len(),
            kept.len(),
            eliminated
        );
        pre_eval.push(EvalSubject {
            id: s.subject_id.clone(),
            candidates: all,
            annotations: s.annotations.clone(),
            spacing,
        });
        post_eval.push(EvalSubject {
            id: s.subject_id.clone(),
            candidates: filtered.kept,
            annotations: s.annotations.clone(),
            spacing,
        });
        out.push(SubjectPipeline {
            id: s.subject_id.clone(),
            n_candidates: above.len(),
            eliminated,
            eliminated_fp,
            regions,
            kept,
            dice: subject_dice,
        });
    }
    let efp = efp_avg(out.iter().map(|s| s.eliminated_fp).sum(), out.len())?;
    let pre = MetricsReport::detection(&pre_eval, threshold, radius)?;
    let mut post = MetricsReport::detection(&post_eval, threshold, radius)?;
    post.dice = mean_dice(&dice);
    post.la = localization_accuracy(&confusion).ok();
    post.efp_avg = Some(efp);
    Ok(PipelineReport {
        threshold,
        subjects: out,
        pre,
        post,
        efp_avg: efp,
        pre_eval,
        post_eval,
    })
}

impl PipelineReport {
    /// `reports/{pre,post}_filter.json`, `reports/pipeline.json`,
    /// `reports/candidates.json` and the PR curves under `curves/`.
    pub fn write(&self, cfg: &ExperimentConfig) -> Result<()> {
        let reports = cfg.reports_dir();
        let curves = cfg.curves_dir();
        write_json(&reports.join("pipeline.json"), self)?;
        self.pre.write(&reports.join("pre_filter.json"))?;
        self.post.write(&reports.join("post_filter.json"))?;
        let kept: Vec<SubjectCandidates> = self
            .subjects
            .iter()
            .map(|s| SubjectCandidates {
                id: s.id.clone(),
                candidates: s.kept.clone(),
            })
            .collect();
        write_candidates(&reports.join("candidates.json"), &kept)?;
        write_curve_csv(&curves.join("pr_pre_filter.csv"), &pr_curve(&self.pre_eval, DEFAULT_MATCH_RADIUS_MM)?.points)?;
        write_curve_csv(&curves.join("pr_post_filter.csv"), &pr_curve(&self.post_eval, DEFAULT_MATCH_RADIUS_MM)?.points)?;
        Ok(())
    }

    /// Fails when the post-filter metrics miss the configured floors.
    pub fn check_floors(&self, cfg: &ExperimentConfig) -> Result<()> {
        check_floors(&self.post, cfg)
    }
}

pub fn check_floors(m: &MetricsReport, cfg: &ExperimentConfig) -> Result<()> {
    if let (Some(floor), Some(s)) = (cfg.min_sensitivity, m.sensitivity) {
        if s < floor {
            return Err(Error::MetricFloor(format!("sensitivity {s:.4} below floor {floor}")));
        }
    }
    if let Some(ceiling) = cfg.max_fp_avg {
        if m.fp_avg > ceiling {
            return Err(Error::MetricFloor(format!("FP_avg {:.4} above ceiling {ceiling}", m.fp_avg)));
        }
    }
    Ok(())
}

/// Loads a checkpoint pair for `cfg`, checking it matches the data layout.
pub fn load_models(cfg: &ExperimentConfig, detector: &Path, segmenter: Option<&Path>) -> Result<(Detector, Option<Segmenter>)> {
    let det = crate::detector::load_detector(detector)?;
    let (expect, _) = cfg.arm();
    if det.config().z_slices != expect.z_slices {
        return Err(Error::Checkpoint(format!(
            "detector was trained for {} interpolated slices, config expects {}",
            det.config().z_slices,
            expect.z_slices
        )));
    }
    let seg = segmenter.map(Segmenter::load).transpose()?;
    Ok((det, seg))
}
