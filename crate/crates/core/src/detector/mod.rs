//! Single-stage 3D lesion detector and its inference path.

mod model;
mod nms;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use model::{Detector, DetectorCache, TrainForward, HEAD_CHANNELS};
pub use nms::{nms_3d, nms_3d_brute_force};

use crate::anatomical::Region;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Checkpoint, Dims, Tensor};
use crate::volume_io::{
    half_stride, interpolate_z, map_z, normalize_minmax, sliding_windows, SubjectRecord, Volume3D,
};

/// Multi-channel feature grid.
pub type FeatureMap = Tensor;

const CHECKPOINT_KIND: &str = "detector";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Input channels, ordered (SWI, phase).
    pub in_channels: usize,
    pub base_channels: usize,
    /// Decoder levels fed to the fusion module.
    pub levels: usize,
    /// Channel count of the fused map and of prototype vectors.
    pub fused_channels: usize,
    /// `false` runs the proposal head on the finest level alone.
    pub fusion: bool,
    pub anchor_size_mm: f64,
    pub prob_threshold: f64,
    pub nms_radius_mm: f64,
    /// Slice count after z-interpolation.
    pub z_slices: usize,
    /// Inference window, clamped to the volume.
    pub window: Dims,
    /// Inference stride; half the window when absent.
    pub stride: Option<Dims>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            base_channels: 16,
            levels: 3,
            fused_channels: 16,
            fusion: true,
            anchor_size_mm: 5.0,
            prob_threshold: 0.5,
            nms_radius_mm: 5.0,
            z_slices: 224,
            window: [128, 128, 128],
            stride: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels != 3 {
            return Err(Error::invalid("levels", "the fusion module aggregates exactly three levels"));
        }
        if self.in_channels != 2 {
            return Err(Error::invalid("in_channels", "the detector takes SWI and phase"));
        }
        if !(2.0..=10.0).contains(&self.anchor_size_mm) {
            return Err(Error::invalid("anchor_size_mm", "must lie in [2, 10]"));
        }
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::invalid("prob_threshold", "must lie in (0, 1)"));
        }
        if self.base_channels == 0 || self.fused_channels == 0 {
            return Err(Error::invalid("channels", "must be positive"));
        }
        if self.nms_radius_mm < 0.0 {
            return Err(Error::invalid("nms_radius_mm", "must be non-negative"));
        }
        Ok(())
    }

    /// Spatial divisor imposed by the backbone.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Per-voxel objectness and box regression over one crop.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionFieldOutput {
    pub prob: Vec<f32>,
    /// Four channels: dx, dy, dz offsets (pre-sigmoid) and log-size.
    pub reg: Tensor,
    pub anchor_size_mm: f64,
}

impl DetectionFieldOutput {
    pub fn dims(&self) -> Dims {
        self.reg.dims()
    }
}

/// A detected lesion in native voxel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionCandidate {
    #[serde(flatten, with = "xyz")]
    pub center: [f64; 3],
    pub size_mm: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
}

mod xyz {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Xyz {
        x: f64,
        y: f64,
        z: f64,
    }

    pub fn serialize<S: Serializer>(c: &[f64; 3], s: S) -> Result<S::Ok, S::Error> {
        Xyz { x: c[0], y: c[1], z: c[2] }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
        let v = Xyz::deserialize(d)?;
        Ok([v.x, v.y, v.z])
    }
}

pub fn backbone_forward(model: &Detector, crop: &Tensor) -> Result<Vec<FeatureMap>> {
    model.backbone_forward(crop)
}

pub fn fuse_features(model: &Detector, levels: &[FeatureMap]) -> Result<FeatureMap> {
    model.fuse_features(levels)
}

/// Probability strictly inside (0, 1) for any finite logit.
pub fn objectness(logit: f32) -> f32 {
    let lo = f32::EPSILON;
    (sigmoid(logit as f64) as f32).clamp(lo, 1.0 - lo)
}

/// Splits raw head logits into a probability map and the regression channels.
pub fn head_to_field(head: &Tensor, anchor_size_mm: f64) -> DetectionFieldOutput {
    let mut parts = head.split(&[1, HEAD_CHANNELS - 1]).into_iter();
    let logits = parts.next().unwrap();
    let reg = parts.next().unwrap();
    DetectionFieldOutput {
        prob: logits.data().iter().map(|&v| objectness(v)).collect(),
        reg,
        anchor_size_mm,
    }
}

pub fn rpn_forward(model: &Detector, fused: &FeatureMap) -> Result<DetectionFieldOutput> {
    if fused.channels() != model.fused_channels() {
        return Err(Error::ShapeMismatch(format!(
            "fused map has {} channels, head expects {}",
            fused.channels(),
            model.fused_channels()
        )));
    }
    if !fused.is_finite() {
        return Err(Error::invalid("fused", "non-finite feature values"));
    }
    Ok(head_to_field(&model.head_forward(fused), model.config().anchor_size_mm))
}

/// Candidates for every voxel at or above `threshold`, in crop-origin-shifted coordinates.
pub fn decode_boxes(field: &DetectionFieldOutput, crop_origin: [f64; 3], threshold: f64) -> Vec<DetectionCandidate> {
    let [nx, ny, nz] = field.dims();
    let mut out = Vec::new();
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = field.prob[i];
                if p as f64 >= threshold {
                    let d: [f64; 4] = std::array::from_fn(|c| field.reg.channel(c)[i] as f64);
                    let v = [x, y, z];
                    out.push(DetectionCandidate {
                        center: std::array::from_fn(|a| crop_origin[a] + (v[a] as f64 + sigmoid(d[a]))),
                        size_mm: field.anchor_size_mm * d[3].exp(),
                        score: p as f64,
                        region: None,
                    });
                }
                i += 1;
            }
        }
    }
    out
}

/// Normalised SWI and phase, z-interpolated, stacked as detector input.
pub fn prepare_input(subject: &SubjectRecord, z_slices: usize) -> Result<Tensor> {
    let phase = subject.phase.as_ref().ok_or(Error::MissingModality("phase"))?;
    let prep = |v: &Volume3D| -> Result<Volume3D> { interpolate_z(&normalize_minmax(v)?, z_slices) };
    let swi = prep(&subject.swi)?;
    let phase = prep(phase)?;
    Tensor::stack(&[swi.data(), phase.data()], swi.shape())
}

/// Inference window for a volume: the configured size clamped to the volume
/// and rounded down to the backbone divisor.
pub fn effective_window(config: &DetectorConfig, shape: Dims) -> Result<Dims> {
    let d = config.divisor();
    let mut w = [0; 3];
    for i in 0..3 {
        w[i] = config.window[i].min(shape[i]) / d * d;
        if w[i] == 0 {
            return Err(Error::NotDivisible {
                dims: shape,
                factor: d,
                padded: shape.map(|s| s.div_ceil(d).max(1) * d),
            });
        }
    }
    Ok(w)
}

/// Sliding-window detection over a prepared (interpolated-space) input;
/// centres stay in interpolated space, no suppression applied.
pub fn detect_windows(model: &Detector, input: &Tensor, threshold: f64) -> Result<Vec<DetectionCandidate>> {
    let shape = input.dims();
    let window = effective_window(model.config(), shape)?;
    let stride = model.config().stride.unwrap_or_else(|| half_stride(window));
    let mut out = Vec::new();
    for spec in sliding_windows(shape, window, stride)? {
        let crop = input.crop(spec.origin, spec.size)?;
        let (_, head) = model.forward(&crop)?;
        let field = head_to_field(&head, model.config().anchor_size_mm);
        out.extend(decode_boxes(&field, spec.origin.map(|v| v as f64), threshold));
    }
    Ok(out)
}

/// Whole-subject detection in native coordinates, sorted by descending score.
pub fn detect_subject_at(subject: &SubjectRecord, model: &Detector, threshold: f64) -> Result<Vec<DetectionCandidate>> {
    let cfg = model.config();
    let input = prepare_input(subject, cfg.z_slices)?;
    let native_depth = subject.swi.shape()[2];
    let mut cands = detect_windows(model, &input, threshold)?;
    let shape = subject.swi.shape();
    for c in &mut cands {
        c.center[2] = map_z(c.center[2], native_depth, cfg.z_slices);
        for a in 0..3 {
            c.center[a] = c.center[a].clamp(0.0, (shape[a] - 1) as f64);
        }
    }
    Ok(nms_3d(&cands, cfg.nms_radius_mm, subject.swi.spacing()))
}

pub fn detect_subject(subject: &SubjectRecord, model: &Detector) -> Result<Vec<DetectionCandidate>> {
    detect_subject_at(subject, model, model.config().prob_threshold)
}

pub fn save_detector(path: &Path, model: &mut Detector) -> Result<()> {
    let cfg = model.config().clone();
    Checkpoint::capture(CHECKPOINT_KIND, &cfg, model)?.save(path)
}

pub fn load_detector(path: &Path) -> Result<Detector> {
    let ckpt = Checkpoint::load(path)?;
    let cfg: DetectorConfig = ckpt.config(CHECKPOINT_KIND)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = Detector::new(cfg, &mut rng)?;
    ckpt.restore(&mut model)?;
    Ok(model)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectCandidates {
    pub id: String,
    pub candidates: Vec<DetectionCandidate>,
}

pub fn write_candidates(path: &Path, subjects: &[SubjectCandidates]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(subjects)?).map_err(|e| Error::io(path, e))
}

pub fn read_candidates(path: &Path) -> Result<Vec<SubjectCandidates>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
