use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RegionLabelMap;
use crate::error::{Error, Result};
use crate::nn::unet::UNet;
use crate::nn::{Buffer, Checkpoint, Conv3d, Dims, Module, Param, Sgd, Tensor};
use crate::volume_io::{half_stride, make_coordinate_tensors, normalize_minmax, sliding_windows, Modality, Space, SubjectRecord, Volume3D};

const CHECKPOINT_KIND: &str = "segmenter";
const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    /// `swi` or `t1`.
    pub input_modality: Modality,
    /// Image plus three coordinate channels.
    pub in_channels: usize,
    pub crop_size: Dims,
    pub classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// Inference stride; half the crop when absent.
    pub stride: Option<Dims>,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            input_modality: Modality::Swi,
            in_channels: 4,
            crop_size: [64, 64, 16],
            classes: 4,
            base_channels: 8,
            depth: 3,
            stride: None,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.input_modality, Modality::Swi | Modality::T1) {
            return Err(Error::invalid("input_modality", "must be swi or t1"));
        }
        if self.in_channels != 4 {
            return Err(Error::invalid("in_channels", "one image channel plus three coordinate channels"));
        }
        if self.classes != 4 {
            return Err(Error::invalid("classes", "none, lobar, deep and infratentorial"));
        }
        if self.base_channels == 0 || self.depth == 0 {
            return Err(Error::invalid("segmenter", "channels and depth must be positive"));
        }
        let d = 1usize << (self.depth - 1);
        if self.crop_size.iter().any(|&c| c == 0 || c % d != 0) {
            return Err(Error::invalid("crop_size", format!("must be a positive multiple of {d}")));
        }
        Ok(())
    }
}

/// U-Net with a 1x1x1 classifier on its finest level.
#[derive(Clone, Debug)]
pub struct Segmenter {
    config: SegmenterConfig,
    unet: UNet,
    classifier: Conv3d,
}

impl Segmenter {
    pub fn new<R: Rng + ?Sized>(config: SegmenterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let unet = UNet::new("seg", config.in_channels, config.base_channels, config.depth, rng);
        let classifier = Conv3d::new("seg.cls", config.base_channels, config.classes, 1, true, rng);
        Ok(Self { config, unet, classifier })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    /// Class probabilities for one crop.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let levels = self.unet.forward(x)?;
        Ok(softmax_channels(&self.classifier.forward(levels.last().unwrap())))
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let cfg = self.config.clone();
        Checkpoint::capture(CHECKPOINT_KIND, &cfg, self)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let cfg: SegmenterConfig = ckpt.config(CHECKPOINT_KIND)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(cfg, &mut rng)?;
        ckpt.restore(&mut model)?;
        Ok(model)
    }
}

impl Module for Segmenter {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.unet.visit_params(f);
        self.classifier.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.unet.visit_buffers(f);
    }
}

/// Per-voxel softmax across channels.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let (c, n) = (logits.channels(), logits.voxels());
    let src = logits.data();
    let mut out = Tensor::zeros(c, logits.dims());
    let dst = out.data_mut();
    for i in 0..n {
        let max = (0..c).map(|k| src[k * n + i]).fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (src[k * n + i] - max).exp();
            dst[k * n + i] = e;
            sum += e;
        }
        for k in 0..c {
            dst[k * n + i] /= sum;
        }
    }
    out
}

fn softmax_backward(prob: &Tensor, grad_prob: &[f64]) -> Tensor {
    let (c, n) = (prob.channels(), prob.voxels());
    let p = prob.data();
    let mut out = Tensor::zeros(c, prob.dims());
    let g = out.data_mut();
    for i in 0..n {
        let dot: f64 = (0..c).map(|k| p[k * n + i] as f64 * grad_prob[k * n + i]).sum();
        for k in 0..c {
            g[k * n + i] = (p[k * n + i] as f64 * (grad_prob[k * n + i] - dot)) as f32;
        }
    }
    out
}

/// Class-major one-hot encoding of region codes.
pub fn one_hot(labels: &[u8], dims: Dims, classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(classes, dims);
    let n = t.voxels();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for grid {dims:?}", labels.len())));
    }
    let data = t.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::invalid("labels", format!("code {l} outside 0..{classes}")));
        }
        data[l as usize * n + i] = 1.0;
    }
    Ok(t)
}

fn check_dice(pred: &[f64], target: &[f64], classes: usize) -> Result<usize> {
    if pred.len() != target.len() || classes == 0 || pred.len() % classes != 0 {
        return Err(Error::ShapeMismatch(format!(
            "prediction of {} values, target of {}, {classes} classes",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.len() / classes)
}

/// `1 - mean_k 2 sum(p t) / (sum p + sum t + 1e-6)` over class-major arrays.
pub fn dice_loss(pred: &[f64], target: &[f64], classes: usize) -> Result<f64> {
    let n = check_dice(pred, target, classes)?;
    let mut acc = 0.0;
    for k in 0..classes {
        let (p, t) = (&pred[k * n..(k + 1) * n], &target[k * n..(k + 1) * n]);
        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let s = p.iter().sum::<f64>() + t.iter().sum::<f64>() + DICE_EPS;
        acc += 2.0 * inter / s;
    }
    Ok(1.0 - acc / classes as f64)
}

/// Dice loss and its gradient with respect to `pred`.
pub fn dice_loss_grad(pred: &[f64], target: &[f64], classes: usize) -> Result<(f64, Vec<f64>)> {
    let n = check_dice(pred, target, classes)?;
    let kf = classes as f64;
    let mut acc = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for k in 0..classes {
        let r = k * n..(k + 1) * n;
        let (p, t) = (&pred[r.clone()], &target[r.clone()]);
        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let s = p.iter().sum::<f64>() + t.iter().sum::<f64>() + DICE_EPS;
        acc += 2.0 * inter / s;
        for (g, &ti) in grad[r].iter_mut().zip(t) {
            *g = -(2.0 * ti / s - 2.0 * inter / (s * s)) / kf;
        }
    }
    Ok((1.0 - acc / kf, grad))
}

/// Normalised image stacked with whole-volume coordinate ramps.
pub fn segmenter_input(image: &Volume3D) -> Result<Tensor> {
    if image.space() != Space::Native {
        return Err(Error::invalid("image", "segmentation runs on native (non-interpolated) volumes"));
    }
    let norm = normalize_minmax(image)?;
    let [cx, cy, cz] = make_coordinate_tensors(image.shape(), image.spacing())?;
    Tensor::stack(&[norm.data(), cx.data(), cy.data(), cz.data()], image.shape())
}

/// One dice-loss update on an input crop and its region codes.
pub fn train_segmenter_step(model: &mut Segmenter, opt: &mut Sgd, input: &Tensor, labels: &[u8]) -> Result<f64> {
    let target = one_hot(labels, input.dims(), model.config.classes)?;
    let (levels, cache) = model.unet.forward_train(input)?;
    let fine = levels.last().unwrap();
    let prob = softmax_channels(&model.classifier.forward(fine));
    let p64: Vec<f64> = prob.data().iter().map(|&v| v as f64).collect();
    let t64: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
    let (loss, g_prob) = dice_loss_grad(&p64, &t64, model.config.classes)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { term: "L_dice", value: loss, step: None });
    }
    let g_logits = softmax_backward(&prob, &g_prob);
    model.zero_grad();
    let g_fine = model.classifier.backward(fine, &g_logits, true);
    let mut grads: Vec<Option<Tensor>> = (0..levels.len()).map(|_| None).collect();
    *grads.last_mut().unwrap() = g_fine;
    model.unet.backward(&cache, grads, false);
    opt.step(model);
    Ok(loss)
}

fn effective_crop(crop: Dims, shape: Dims, divisor: usize) -> Result<Dims> {
    let mut w = [0; 3];
    for i in 0..3 {
        w[i] = crop[i].min(shape[i]) / divisor * divisor;
        if w[i] == 0 {
            return Err(Error::NotDivisible {
                dims: shape,
                factor: divisor,
                padded: shape.map(|s| s.div_ceil(divisor).max(1) * divisor),
            });
        }
    }
    Ok(w)
}

/// Sliding-window segmentation; overlapping windows are averaged in probability
/// space before the per-voxel argmax (ties go to the lower code).
pub fn segment_subject(subject: &SubjectRecord, model: &Segmenter) -> Result<RegionLabelMap> {
    let cfg = model.config();
    let image = subject.modality(cfg.input_modality)?;
    let input = segmenter_input(image)?;
    let shape = image.shape();
    let window = effective_crop(cfg.crop_size, shape, 1 << (cfg.depth - 1))?;
    let stride = cfg.stride.unwrap_or_else(|| half_stride(window));
    let classes = cfg.classes;
    let n = input.voxels();
    let mut acc = vec![0.0f64; classes * n];
    let mut hits = vec![0u32; n];
    for spec in sliding_windows(shape, window, stride)? {
        let prob = model.predict(&input.crop(spec.origin, spec.size)?)?;
        let [ox, oy, oz] = spec.origin;
        let [wx, wy, wz] = spec.size;
        let m = prob.voxels();
        for z in 0..wz {
            for y in 0..wy {
                for x in 0..wx {
                    let local = x + wx * (y + wy * z);
                    let global = (ox + x) + shape[0] * ((oy + y) + shape[1] * (oz + z));
                    hits[global] += 1;
                    for k in 0..classes {
                        acc[k * n + global] += prob.data()[k * m + local] as f64;
                    }
                }
            }
        }
    }
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..classes {
                if acc[k * n + i] > acc[best * n + i] {
                    best = k;
                }
            }
            debug_assert!(hits[i] > 0);
            best as u8
        })
        .collect();
    RegionLabelMap::new(labels, shape, image.spacing())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dice_examples() {
        let hard = [1.0, 0.0, 0.0, 1.0];
        assert!(dice_loss(&hard, &hard, 2).unwrap() < 1e-6);
        let other = [0.0, 1.0, 1.0, 0.0];
        assert!((dice_loss(&other, &hard, 2).unwrap() - 1.0).abs() < 1e-12);
        // One class: |A| = |B| = 2 with one shared voxel.
        let l = dice_loss(&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0], 1).unwrap();
        assert!((l - 0.5).abs() < 1e-6);
        assert!(dice_loss(&[1.0], &[1.0, 0.0], 1).is_err());
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.95)).collect();
        let t: Vec<f64> = (0..12).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
        let (l, g) = dice_loss_grad(&p, &t, 3).unwrap();
        assert_eq!(l, dice_loss(&p, &t, 3).unwrap());
        for i in 0..12 {
            let h = 1e-6;
            let mut a = p.clone();
            a[i] += h;
            let mut b = p.clone();
            b[i] -= h;
            let fd = (dice_loss(&a, &t, 3).unwrap() - dice_loss(&b, &t, 3).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn softmax_and_one_hot() {
        let logits = Tensor::from_vec(2, [2, 1, 1], vec![0.0, 3.0, 0.0, -3.0]).unwrap();
        let p = softmax_channels(&logits);
        assert!((p.data()[0] - 0.5).abs() < 1e-7);
        assert!((p.data()[1] + p.data()[3] - 1.0).abs() < 1e-6);
        let h = one_hot(&[1, 0], [2, 1, 1], 2).unwrap();
        assert_eq!(h.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(one_hot(&[4, 0], [2, 1, 1], 4).is_err());
    }

    #[test]
    fn input_has_coordinates_and_rejects_interpolated_space() {
        let data: Vec<f32> = (0..4 * 4 * 4).map(|i| i as f32).collect();
        let v = Volume3D::new(data, [4, 4, 4], [1.0; 3], Modality::Swi, Space::Native).unwrap();
        let x = segmenter_input(&v).unwrap();
        assert_eq!(x.channels(), 4);
        assert_eq!((x.at(1, 0, 0, 0), x.at(1, 3, 0, 0), x.at(3, 0, 0, 3)), (0.0, 1.0, 1.0));
        let interp = crate::volume_io::interpolate_z(&v, 8).unwrap();
        assert!(segmenter_input(&interp).is_err());
    }

    fn zoned(shape: Dims) -> (Tensor, Vec<u8>, Volume3D) {
        let mut labels = Vec::new();
        let mut img = Vec::new();
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    let l = if x < shape[0] / 4 { 0 } else if z < shape[2] / 2 { 3 } else if y < shape[1] / 2 { 1 } else { 2 };
                    labels.push(l);
                    img.push([0.0, 0.8, 0.5, 0.3][l as usize]);
                }
            }
        }
        let v = Volume3D::new(img, shape, [1.0; 3], Modality::Swi, Space::Native).unwrap();
        (segmenter_input(&v).unwrap(), labels, v)
    }

    #[test]
    fn overfits_a_small_volume_and_round_trips() {
        let cfg = SegmenterConfig {
            crop_size: [16, 16, 8],
            base_channels: 4,
            ..SegmenterConfig::default()
        };
        let mut m = Segmenter::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (x, labels, v) = zoned([16, 16, 8]);
        let mut opt = Sgd::new(0.1, 0.9);
        let first = train_segmenter_step(&mut m, &mut opt, &x, &labels).unwrap();
        let mut last = first;
        for _ in 0..150 {
            last = train_segmenter_step(&mut m, &mut opt, &x, &labels).unwrap();
        }
        assert!(last < first * 0.5, "{first} -> {last}");
        let subject = SubjectRecord {
            subject_id: "s".into(),
            swi: v,
            phase: None,
            t1: None,
            annotations: vec![],
            label_map: None,
        };
        let map = segment_subject(&subject, &m).unwrap();
        assert_eq!(map.shape(), [16, 16, 8]);
        let agree = map.labels().iter().zip(&labels).filter(|(a, b)| a == b).count();
        assert!(agree as f64 / labels.len() as f64 > 0.8);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seg.ckpt");
        m.save(&p).unwrap();
        let back = Segmenter::load(&p).unwrap();
        assert_eq!(segment_subject(&subject, &back).unwrap(), map);
        let t1 = Segmenter::new(
            SegmenterConfig {
                input_modality: Modality::T1,
                ..m.config().clone()
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(matches!(segment_subject(&subject, &t1), Err(Error::MissingModality(_))));
    }
}
