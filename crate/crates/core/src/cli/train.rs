use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use crate::anatomical::{segmenter_input, train_segmenter_step, Segmenter};
use crate::detector::{save_detector, Detector};
use crate::error::{Error, Result};
use crate::hspl::{sample_balanced_crops, train_step, LossBreakdown, LossLogWriter, StepOptions, TrainingSubject};
use crate::nn::{Dims, Sgd};
use crate::volume_io::SubjectRecord;

/// Trained detector and its per-step losses.
#[derive(Debug)]
pub struct DetectorRun {
    pub model: Detector,
    pub losses: Vec<LossBreakdown>,
}

/// Balanced-crop training of the configured ablation arm. With a run
/// directory, writes `logs/losses.csv`, periodic and final checkpoints.
pub fn train_detector_on(cfg: &ExperimentConfig, subjects: &[SubjectRecord], run_dir: Option<&Path>) -> Result<DetectorRun> {
    cfg.validate()?;
    let (det_cfg, weights) = cfg.arm();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Detector::new(det_cfg.clone(), &mut rng)?;
    let pool = subjects
        .iter()
        .map(|s| TrainingSubject::from_record(s, det_cfg.z_slices))
        .collect::<Result<Vec<_>>>()?;
    let spacing = pool.first().ok_or(Error::invalid("subjects", "training set is empty"))?.spacing;
    let t = &cfg.training;
    let mut opt = Sgd::new(cfg.optimizer.lr, cfg.optimizer.momentum);
    let sched = cfg.scheduler.step_lr();
    let mut log = match run_dir {
        Some(dir) => Some(LossLogWriter::create(&dir.join("logs").join("losses.csv"))?),
        None => None,
    };
    let ckpt_dir = run_dir.map(|d| d.join("checkpoints"));
    let mut losses = Vec::with_capacity(cfg.epochs * t.crops_per_epoch);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        opt.set_lr(sched.lr_at(cfg.optimizer.lr, epoch));
        let crops = sample_balanced_crops(&pool, t.crop_size, t.crops_per_epoch, &mut rng)?;
        let mut sum = 0.0;
        for crop in &crops {
            let opts = StepOptions {
                weights: weights.clone(),
                focal_norm: t.focal_norm,
                pos_radius_mm: t.pos_radius_mm,
                spacing,
                step,
                grad_clip: t.grad_clip,
            };
            let out = train_step(&mut model, &mut opt, crop, &opts)?;
            if let Some(w) = log.as_mut() {
                w.write(step, &out.losses)?;
            }
            sum += out.losses.l_final;
            losses.push(out.losses);
            step += 1;
        }
        info!("epoch {epoch}: mean L_final {:.5}, lr {}", sum / crops.len() as f64, opt.lr());
        if let Some(dir) = &ckpt_dir {
            if t.checkpoint_every > 0 && (epoch + 1) % t.checkpoint_every == 0 {
                save_detector(&dir.join(format!("detector_epoch{:04}.ckpt", epoch + 1)), &mut model)?;
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = &ckpt_dir {
        save_detector(&dir.join("detector.ckpt"), &mut model)?;
    }
    Ok(DetectorRun { model, losses })
}

fn crop_labels(labels: &[u8], shape: Dims, origin: Dims, size: Dims) -> Vec<u8> {
    let mut out = Vec::with_capacity(size.iter().product());
    for z in 0..size[2] {
        for y in 0..size[1] {
            let row = origin[0] + shape[0] * ((origin[1] + y) + shape[1] * (origin[2] + z));
            out.extend_from_slice(&labels[row..row + size[0]]);
        }
    }
    out
}

/// Random-crop dice training on subjects that carry label maps. Returns the
/// model and the mean loss of every epoch.
pub fn train_segmenter_on(
    cfg: &ExperimentConfig,
    subjects: &[SubjectRecord],
    run_dir: Option<&Path>,
) -> Result<(Segmenter, Vec<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e9);
    let mut model = Segmenter::new(cfg.segmenter.clone(), &mut rng)?;
    let divisor = 1 << (cfg.segmenter.depth - 1);
    let mut data = Vec::new();
    for s in subjects {
        let map = s
            .label_map
            .as_ref()
            .ok_or_else(|| Error::invalid("subjects", format!("{} has no label map", s.subject_id)))?;
        let input = segmenter_input(s.modality(cfg.segmenter.input_modality)?)?;
        data.push((input, map));
    }
    if data.is_empty() {
        return Err(Error::invalid("subjects", "training set is empty"));
    }
    let mut opt = Sgd::new(cfg.training.segmenter_lr, cfg.optimizer.momentum);
    let sched = cfg.scheduler.step_lr();
    let mut history = Vec::with_capacity(cfg.training.segmenter_epochs);
    for epoch in 0..cfg.training.segmenter_epochs {
        opt.set_lr(sched.lr_at(cfg.training.segmenter_lr, epoch));
        let mut sum = 0.0;
        for _ in 0..cfg.training.segmenter_crops_per_epoch {
            let (input, map) = &data[rng.gen_range(0..data.len())];
            let shape = input.dims();
            let size: Dims = std::array::from_fn(|i| cfg.segmenter.crop_size[i].min(shape[i]) / divisor * divisor);
            if size.contains(&0) {
                return Err(Error::invalid("segmenter.crop_size", format!("volume {shape:?} is too small")));
            }
            let origin: Dims = std::array::from_fn(|i| rng.gen_range(0..=shape[i] - size[i]));
            let x = input.crop(origin, size)?;
            let y = crop_labels(map.labels(), shape, origin, size);
            sum += train_segmenter_step(&mut model, &mut opt, &x, &y)?;
        }
        let mean = sum / cfg.training.segmenter_crops_per_epoch.max(1) as f64;
        info!("segmenter epoch {epoch}: mean dice loss {mean:.5}");
        history.push(mean);
    }
    if let Some(dir) = run_dir {
        model.save(&dir.join("checkpoints").join("segmenter.ckpt"))?;
    }
    Ok((model, history))
}
