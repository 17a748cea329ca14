use super::losses::{concentration_loss_grad, focal_loss_logits, regression_loss_grad, total_loss, FocalNorm, RegTarget};
use super::sampling::{select_coordinate, TrainingCrop};
use super::{extract_feature_vector, FeatureVector, LossBreakdown, LossWeights};
use crate::detector::{objectness, Detector, HEAD_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Module, Sgd, Tensor};

/// Per-step training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOptions {
    pub weights: LossWeights,
    pub focal_norm: FocalNorm,
    /// Voxels within this distance of a lesion centre are objectness positives.
    pub pos_radius_mm: f64,
    /// Voxel size of the crop in mm.
    pub spacing: [f64; 3],
    pub step: usize,
    /// Joint gradient-norm ceiling applied before the update.
    pub grad_clip: Option<f64>,
}

/// Loss values and the feature vectors that entered the concentration term.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    pub features: Vec<FeatureVector>,
}

fn objectness_targets(crop: &TrainingCrop, opts: &StepOptions) -> Vec<bool> {
    let [nx, ny, nz] = crop.input.dims();
    let mut t = vec![false; nx * ny * nz];
    let r2 = opts.pos_radius_mm * opts.pos_radius_mm;
    for c in &crop.cmbs {
        let lo: [usize; 3] =
            std::array::from_fn(|a| (c.center[a] - opts.pos_radius_mm / opts.spacing[a]).floor().max(0.0) as usize);
        let hi: [usize; 3] = std::array::from_fn(|a| {
            let d = [nx, ny, nz][a];
            ((c.center[a] + opts.pos_radius_mm / opts.spacing[a]).ceil().max(0.0) as usize).min(d - 1)
        });
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let v = [x, y, z];
                    let d2: f64 = (0..3).map(|a| ((v[a] as f64 - c.center[a]) * opts.spacing[a]).powi(2)).sum();
                    if d2 <= r2 {
                        t[x + nx * (y + ny * z)] = true;
                    }
                }
            }
        }
        let v = responsible_voxel(c.center, [nx, ny, nz]);
        t[v[0] + nx * (v[1] + ny * v[2])] = true;
    }
    t
}

fn responsible_voxel(c: [f64; 3], dims: [usize; 3]) -> [usize; 3] {
    std::array::from_fn(|a| (c[a].floor().max(0.0) as usize).min(dims[a] - 1))
}

fn regression_targets(crop: &TrainingCrop, anchor_mm: f64) -> Vec<RegTarget> {
    let dims = crop.input.dims();
    crop.cmbs
        .iter()
        .map(|c| {
            let voxel = responsible_voxel(c.center, dims);
            RegTarget {
                voxel,
                offset: std::array::from_fn(|a| (c.center[a] - voxel[a] as f64).clamp(0.0, 1.0)),
                log_size: (c.diameter_mm.unwrap_or(anchor_mm) / anchor_mm).ln(),
            }
        })
        .collect()
}

/// One forward/backward pass over a crop followed by an optimiser update.
pub fn train_step(model: &mut Detector, opt: &mut Sgd, crop: &TrainingCrop, opts: &StepOptions) -> Result<StepOutput> {
    let w = &opts.weights;
    let fw = model.forward_train(&crop.input)?;
    let mut parts = fw.head.split(&[1, HEAD_CHANNELS - 1]).into_iter();
    let logits = parts.next().unwrap();
    let reg = parts.next().unwrap();

    let targets = objectness_targets(crop, opts);
    let (l_cls, g_cls) = focal_loss_logits(logits.data(), &targets, w.focal_gamma, w.focal_alpha, opts.focal_norm)?;
    let (l_reg, g_reg) = regression_loss_grad(&reg, &regression_targets(crop, model.config().anchor_size_mm));

    let mut features = Vec::new();
    let mut l_con = 0.0;
    let mut grad_fused = None;
    let mut g_cmb = vec![0.0f64; model.fused_channels()];
    let mut g_mimic = vec![0.0f64; model.fused_channels()];
    if w.lambda_con > 0.0 {
        let prob: Vec<f32> = logits.data().iter().map(|&v| objectness(v)).collect();
        let coords = select_coordinate(crop, &prob);
        let k = coords.len() as f64;
        let mut gf = Tensor::zeros(fw.fused.channels(), fw.fused.dims());
        for c in coords {
            let fv = extract_feature_vector(&fw.fused, c, crop.contains_cmb)?;
            let (ma, mb) = model.prototypes.roles(crop.contains_cmb);
            let to64 = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<_>>();
            let v = to64(&fv.values);
            let g = concentration_loss_grad(&v, &to64(ma), &to64(mb), w.margin_n)?;
            l_con += g.loss / k;
            let scale = w.lambda_con / k;
            for (ch, d) in g.d_v.iter().enumerate() {
                let cur = gf.at(ch, c[0], c[1], c[2]);
                gf.set(ch, c[0], c[1], c[2], cur + (scale * d) as f32);
            }
            let (ga, gb) = if crop.contains_cmb {
                (&mut g_cmb, &mut g_mimic)
            } else {
                (&mut g_mimic, &mut g_cmb)
            };
            for i in 0..v.len() {
                ga[i] += scale * g.d_ma[i];
                gb[i] += scale * g.d_mb[i];
            }
            features.push(fv);
        }
        grad_fused = Some(gf);
    }

    let losses = total_loss(l_cls, l_reg, l_con, w).map_err(|e| match e {
        Error::NonFiniteLoss { term, value, .. } => Error::NonFiniteLoss {
            term,
            value,
            step: Some(opts.step),
        },
        other => other,
    })?;

    let mut g_logits = Tensor::from_vec(1, logits.dims(), g_cls)?;
    g_logits.data_mut().iter_mut().for_each(|g| *g *= w.lambda_cls as f32);
    let mut g_reg = g_reg;
    g_reg.data_mut().iter_mut().for_each(|g| *g *= w.lambda_reg as f32);
    let grad_head = Tensor::concat(&[&g_logits, &g_reg])?;

    model.zero_grad();
    model.backward(&fw.cache, &grad_head, grad_fused.as_ref());
    for (p, g) in model.prototypes.cmb.grad.iter_mut().zip(&g_cmb) {
        *p += *g as f32;
    }
    for (p, g) in model.prototypes.mimic.grad.iter_mut().zip(&g_mimic) {
        *p += *g as f32;
    }
    if let Some(c) = opts.grad_clip {
        clip_grad_norm(model, c);
    }
    opt.step(model);
    Ok(StepOutput { losses, features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::hspl::CmbTarget;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> Detector {
        let cfg = DetectorConfig {
            base_channels: 4,
            fused_channels: 4,
            ..DetectorConfig::default()
        };
        Detector::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn crop(positive: bool) -> TrainingCrop {
        let dims = [8, 8, 4];
        let mut input = Tensor::filled(2, dims, 0.8);
        let cmbs = if positive {
            for z in 1..3 {
                for y in 3..6 {
                    for x in 3..6 {
                        input.set(0, x, y, z, 0.1);
                        input.set(1, x, y, z, 0.2);
                    }
                }
            }
            vec![CmbTarget {
                center: [4.3, 4.6, 2.1],
                diameter_mm: Some(3.0),
            }]
        } else {
            vec![]
        };
        TrainingCrop {
            subject: 0,
            origin: [0; 3],
            input,
            contains_cmb: positive,
            cmbs,
        }
    }

    fn opts(lambda_con: f64, step: usize) -> StepOptions {
        StepOptions {
            weights: LossWeights {
                lambda_con,
                ..LossWeights::default()
            },
            focal_norm: FocalNorm::Mean,
            pos_radius_mm: 1.0,
            spacing: [1.0; 3],
            step,
            grad_clip: None,
        }
    }

    #[test]
    fn targets_cover_the_lesion_neighbourhood() {
        let c = crop(true);
        let t = objectness_targets(&c, &opts(0.0, 0));
        let on: Vec<usize> = (0..t.len()).filter(|&i| t[i]).collect();
        assert!(on.contains(&(4 + 8 * (4 + 8 * 2))));
        assert!(on.len() > 1 && on.len() < 20);
        assert!(objectness_targets(&crop(false), &opts(0.0, 0)).iter().all(|&v| !v));
        let r = regression_targets(&c, 5.0);
        assert_eq!(r[0].voxel, [4, 4, 2]);
        assert!((r[0].offset[1] - 0.6).abs() < 1e-12);
        assert!((r[0].log_size - (0.6f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_the_loss() {
        let mut m = tiny_model();
        let mut opt = Sgd::new(0.05, 0.9);
        let crops = [crop(true), crop(false)];
        let first: f64 = crops
            .iter()
            .map(|c| train_step(&mut m.clone(), &mut Sgd::new(0.0, 0.0), c, &opts(0.01, 0)).unwrap().losses.l_final)
            .sum();
        for s in 0..60 {
            train_step(&mut m, &mut opt, &crops[s % 2], &opts(0.01, s)).unwrap();
        }
        let last: f64 = crops
            .iter()
            .map(|c| train_step(&mut m.clone(), &mut Sgd::new(0.0, 0.0), c, &opts(0.01, 0)).unwrap().losses.l_final)
            .sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn concentration_term_and_prototypes() {
        let mut m = tiny_model();
        let before = m.prototypes.clone();
        let out = train_step(&mut m, &mut Sgd::new(0.1, 0.0), &crop(false), &opts(0.0, 0)).unwrap();
        assert_eq!(out.losses.l_con, 0.0);
        assert!(out.features.is_empty());
        assert_eq!(m.prototypes.cmb.value, before.cmb.value);
        let out = train_step(&mut m, &mut Sgd::new(0.1, 0.0), &crop(true), &opts(0.01, 1)).unwrap();
        assert!((0.0..=2.0).contains(&out.losses.l_con));
        assert_eq!(out.features.len(), 1);
        assert_eq!(out.features[0].source_coord, [4, 5, 2]);
        assert_ne!(m.prototypes.cmb.value, before.cmb.value);
    }

    #[test]
    fn non_finite_loss_names_step() {
        let mut m = tiny_model();
        m.visit_params(&mut |p| {
            if p.name.starts_with("rpn.out") {
                p.value.iter_mut().for_each(|v| *v = f32::NAN);
            }
        });
        match train_step(&mut m, &mut Sgd::new(0.1, 0.0), &crop(true), &opts(0.01, 7)) {
            Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, Some(7)),
            other => panic!("unexpected {:?}", other.map(|o| o.losses)),
        }
    }
}
