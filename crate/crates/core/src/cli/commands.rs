use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use super::config::{Ablation, ExperimentConfig};
use super::pipeline::{check_floors, load_models, run_pipeline_on, CURVE_FLOOR};
use super::plot::{froc_series, line_chart, loss_series, pr_series, read_loss_log};
use super::train::{train_detector_on, train_segmenter_on};
use crate::anatomical::{filter_candidates, segment_subject, RegionLabelMap, Segmenter};
use crate::detector::{detect_subject_at, load_detector, read_candidates, write_candidates, SubjectCandidates};
use crate::error::{Error, Result};
use crate::evaluation::{
    pr_curve, read_curve_csv, write_curve_csv, write_json, EvalSubject, MetricsReport, DEFAULT_MATCH_RADIUS_MM,
};
use crate::synthetic::{generate_dataset, write_synthetic};
use crate::volume_io::nifti::{read_label_map, write_label_map, write_volume};
use crate::volume_io::{interpolate_z, normalize_minmax, read_dataset, Modality, SubjectRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SegModality {
    Swi,
    T1,
}

impl From<SegModality> for Modality {
    fn from(m: SegModality) -> Self {
        match m {
            SegModality::Swi => Modality::Swi,
            SegModality::T1 => Modality::T1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cmbdet", version, about = "3D cerebral microbleed detection with anatomical filtering")]
pub struct Cli {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// rpn, rpn_ffm or rpn_ffm_hspl.
    #[arg(long, global = true)]
    pub ablation: Option<Ablation>,
    /// Segmenter input modality.
    #[arg(long, global = true, value_enum)]
    pub modality: Option<SegModality>,
    /// Dataset root, overriding `paths.data_root`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Run directory, overriding `paths.output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset under the data root.
    Synth {
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        normal_fraction: Option<f64>,
    },
    /// Write normalised, z-interpolated SWI and phase volumes.
    Preprocess,
    /// Train the detector for the configured ablation arm.
    TrainDetector,
    /// Train the anatomical segmenter.
    TrainSegmenter,
    /// Run the detector; writes reports/detections.json.
    Detect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the segmenter; writes segmentations/<id>.nii.gz.
    Segment {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Drop candidates in the none region; writes reports/filtered.json.
    Filter {
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Score candidates against annotations; writes reports/metrics.json.
    Evaluate {
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Detect, segment, filter and evaluate in one pass.
    Pipeline {
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        segmenter: Option<PathBuf>,
        /// Use the label maps shipped with the data instead of a segmenter.
        #[arg(long)]
        provided_regions: bool,
    },
    /// Render SVG plots from curves/*.csv and logs/losses.csv.
    Plot,
}

/// Config file (or defaults) with command-line overrides applied.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(a) = cli.ablation {
        cfg.ablation = a;
    }
    if let Some(m) = cli.modality {
        cfg.segmenter.input_modality = m.into();
    }
    if let Some(d) = &cli.data {
        cfg.paths.data_root = d.clone();
    }
    if let Some(o) = &cli.out {
        cfg.paths.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &ExperimentConfig) -> Result<Vec<SubjectRecord>> {
    let subjects = read_dataset(&cfg.paths.data_root)?;
    if subjects.is_empty() {
        return Err(Error::invalid(
            "data_root",
            format!("no subject directories under {}", cfg.paths.data_root.display()),
        ));
    }
    info!("loaded {} subjects from {}", subjects.len(), cfg.paths.data_root.display());
    Ok(subjects)
}

fn segmentation_path(cfg: &ExperimentConfig, id: &str) -> PathBuf {
    cfg.paths.output_dir.join("segmentations").join(format!("{id}.nii.gz"))
}

fn region_map(cfg: &ExperimentConfig, s: &SubjectRecord) -> Result<RegionLabelMap> {
    let p = segmentation_path(cfg, &s.subject_id);
    if p.exists() {
        return read_label_map(&p);
    }
    s.label_map
        .clone()
        .ok_or_else(|| Error::invalid("regions", format!("no segmentation or label map for {}", s.subject_id)))
}

fn candidates_for<'a>(all: &'a [SubjectCandidates], id: &str) -> Result<&'a SubjectCandidates> {
    all.iter()
        .find(|c| c.id == id)
        .ok_or_else(|| Error::invalid("candidates", format!("no entry for subject {id}")))
}

/// Runs one command to completion.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let out = &cfg.paths.output_dir;
    let reports = cfg.reports_dir();
    match &cli.command {
        Command::Synth {
            subjects,
            normal_fraction,
        } => {
            let n = subjects.unwrap_or(cfg.synth.n_subjects);
            let f = normal_fraction.unwrap_or(cfg.synth.normal_fraction);
            let ds = generate_dataset(n, &cfg.synth.phantom, f, cfg.seed)?;
            write_synthetic(&cfg.paths.data_root, &ds)?;
            info!("wrote {n} subjects to {}", cfg.paths.data_root.display());
        }
        Command::Preprocess => {
            for s in load_data(&cfg)? {
                let dir = out.join("preprocessed").join(&s.subject_id);
                let prep = |v| interpolate_z(&normalize_minmax(v)?, cfg.detector.z_slices);
                write_volume(&dir.join("swi.nii.gz"), &prep(&s.swi)?)?;
                let phase = s.phase.as_ref().ok_or(Error::MissingModality("phase"))?;
                write_volume(&dir.join("phase.nii.gz"), &prep(phase)?)?;
            }
        }
        Command::TrainDetector => {
            let subjects = load_data(&cfg)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(out, e))?;
            let run = train_detector_on(&cfg, &subjects, Some(out))?;
            info!(
                "trained {} for {} steps, final L_final {:.5}",
                cfg.ablation,
                run.losses.len(),
                run.losses.last().map_or(f64::NAN, |l| l.l_final)
            );
        }
        Command::TrainSegmenter => {
            let subjects = load_data(&cfg)?;
            let (_, history) = train_segmenter_on(&cfg, &subjects, Some(out))?;
            let path = out.join("logs").join("segmenter_losses.csv");
            std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(out, e))?;
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["epoch", "L_dice"])?;
            for (e, l) in history.iter().enumerate() {
                w.write_record([e.to_string(), l.to_string()])?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Command::Detect { checkpoint } => {
            let model = load_detector(checkpoint.as_deref().unwrap_or(&cfg.detector_checkpoint()))?;
            let mut all = Vec::new();
            for s in load_data(&cfg)? {
                let floor = CURVE_FLOOR.min(model.config().prob_threshold);
                all.push(SubjectCandidates {
                    candidates: detect_subject_at(&s, &model, floor)?,
                    id: s.subject_id,
                });
            }
            write_candidates(&reports.join("detections.json"), &all)?;
        }
        Command::Segment { checkpoint } => {
            let model = Segmenter::load(checkpoint.as_deref().unwrap_or(&cfg.segmenter_checkpoint()))?;
            for s in load_data(&cfg)? {
                write_label_map(&segmentation_path(&cfg, &s.subject_id), &segment_subject(&s, &model)?)?;
            }
        }
        Command::Filter { candidates } => {
            let all = read_candidates(candidates.as_deref().unwrap_or(&reports.join("detections.json")))?;
            let mut kept = Vec::new();
            let mut summary = Vec::new();
            for s in load_data(&cfg)? {
                let report = filter_candidates(&candidates_for(&all, &s.subject_id)?.candidates, &region_map(&cfg, &s)?)?;
                summary.push(serde_json::json!({
                    "id": s.subject_id,
                    "eliminated": report.eliminated,
                    "regions": report.regions,
                }));
                kept.push(SubjectCandidates {
                    id: s.subject_id,
                    candidates: report.kept,
                });
            }
            write_candidates(&reports.join("filtered.json"), &kept)?;
            write_json(&reports.join("filter_report.json"), &summary)?;
        }
        Command::Evaluate { candidates } => {
            let default = if reports.join("filtered.json").exists() {
                reports.join("filtered.json")
            } else {
                reports.join("detections.json")
            };
            let all = read_candidates(candidates.as_deref().unwrap_or(&default))?;
            let subjects = load_data(&cfg)?
                .into_iter()
                .map(|s| {
                    Ok(EvalSubject {
                        candidates: candidates_for(&all, &s.subject_id)?.candidates.clone(),
                        spacing: s.swi.spacing(),
                        annotations: s.annotations,
                        id: s.subject_id,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let m = MetricsReport::detection(&subjects, cfg.detector.prob_threshold, DEFAULT_MATCH_RADIUS_MM)?;
            m.write(&reports.join("metrics.json"))?;
            write_curve_csv(&cfg.curves_dir().join("pr.csv"), &pr_curve(&subjects, DEFAULT_MATCH_RADIUS_MM)?.points)?;
            print_summary("evaluation", &m);
            check_floors(&m, &cfg)?;
        }
        Command::Pipeline {
            detector,
            segmenter,
            provided_regions,
        } => {
            let det_path = detector.clone().unwrap_or_else(|| cfg.detector_checkpoint());
            let seg_path = segmenter.clone().unwrap_or_else(|| cfg.segmenter_checkpoint());
            let seg = (!provided_regions).then_some(seg_path.as_path());
            let (det, seg) = load_models(&cfg, &det_path, seg)?;
            let report = run_pipeline_on(&load_data(&cfg)?, &det, seg.as_ref())?;
            report.write(&cfg)?;
            print_summary("pre-filter", &report.pre);
            print_summary("post-filter", &report.post);
            println!("EFP_avg {:.4}", report.efp_avg);
            report.check_floors(&cfg)?;
        }
        Command::Plot => plot_run(out)?,
    }
    Ok(())
}

fn print_summary(stage: &str, m: &MetricsReport) {
    println!(
        "{stage}: sensitivity {} precision {} FP_avg {:.4} AUC-PR {:.4} (TP {} FP {} FN {})",
        crate::evaluation::percent(m.sensitivity),
        crate::evaluation::percent(m.precision),
        m.fp_avg,
        m.auc_pr,
        m.tp,
        m.fp,
        m.fn_
    );
}

/// One PR and one sensitivity-vs-FP_avg chart per curve CSV, plus the loss chart.
pub fn plot_run(run_dir: &Path) -> Result<()> {
    let plots = run_dir.join("plots");
    let curves = run_dir.join("curves");
    let mut pr = Vec::new();
    let mut froc = Vec::new();
    if curves.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&curves)
            .map_err(|e| Error::io(&curves, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        files.sort();
        for f in files {
            let name = f.file_stem().unwrap().to_string_lossy().to_string();
            let pts = read_curve_csv(&f)?;
            pr.push(pr_series(&name, &pts));
            froc.push(froc_series(&name, &pts));
        }
    }
    if !pr.is_empty() {
        line_chart(&plots.join("pr.svg"), "Precision-recall", "recall", "precision", &pr)?;
        line_chart(&plots.join("sensitivity_fp.svg"), "Sensitivity vs FP_avg", "FP_avg", "sensitivity", &froc)?;
    }
    let log = run_dir.join("logs").join("losses.csv");
    if log.exists() {
        let rows = read_loss_log(&log)?;
        let window = (rows.len() / 200).max(1);
        line_chart(&plots.join("losses.svg"), "Training losses", "step", "loss", &loss_series(&rows, window))?;
    }
    if pr.is_empty() && !log.exists() {
        return Err(Error::invalid("run", format!("nothing to plot under {}", run_dir.display())));
    }
    Ok(())
}
