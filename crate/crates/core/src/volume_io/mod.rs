//! Volumes, subjects, resampling, cropping and window iteration.

mod annotations;
mod dataset;
pub mod nifti;

use serde::{Deserialize, Serialize};

pub use annotations::{read_annotations, write_annotations, AnnotationFile, AnnotatedSubject, CmbEntry};
pub use dataset::{read_dataset, read_subject, write_dataset, ANNOTATIONS_FILE, LABELS_FILE, PHASE_FILE, SWI_FILE, T1_FILE};

use crate::anatomical::{Region, RegionLabelMap};
use crate::error::{Error, Result};
use crate::nn::{voxel_count, Dims};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Swi,
    Phase,
    T1,
    LabelMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Native,
    ZInterp,
}

/// Scalar grid, x fastest: `data[x + W * (y + H * z)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    data: Vec<f32>,
    shape: Dims,
    spacing: [f64; 3],
    modality: Modality,
    space: Space,
}

impl Volume3D {
    pub fn new(data: Vec<f32>, shape: Dims, spacing: [f64; 3], modality: Modality, space: Space) -> Result<Self> {
        if data.len() != voxel_count(shape) {
            return Err(Error::ShapeMismatch(format!("{} values for shape {shape:?}", data.len())));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("spacing", format!("{spacing:?} must be positive")));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid("data", format!("non-finite voxel value {v}")));
        }
        if modality == Modality::LabelMap && data.iter().any(|&v| !matches!(v as i32, 0..=3) || v.fract() != 0.0) {
            return Err(Error::invalid("data", "label maps hold only codes 0..=3"));
        }
        Ok(Self {
            data,
            shape,
            spacing,
            modality,
            space,
        })
    }

    pub fn filled(value: f32, shape: Dims, spacing: [f64; 3], modality: Modality) -> Self {
        Self {
            data: vec![value; voxel_count(shape)],
            shape,
            spacing,
            modality,
            space: Space::Native,
        }
    }

    pub fn shape(&self) -> Dims {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// A ground-truth lesion in native voxel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CMBAnnotation {
    pub center: [f64; 3],
    pub diameter_mm: Option<f64>,
    pub region: Option<Region>,
}

impl CMBAnnotation {
    pub fn new(center: [f64; 3], diameter_mm: Option<f64>, region: Option<Region>) -> Result<Self> {
        if let Some(d) = diameter_mm {
            if !(2.0..=10.0).contains(&d) {
                return Err(Error::invalid("diameter_mm", format!("{d} outside [2, 10]")));
            }
        }
        if region == Some(Region::None) {
            return Err(Error::invalid("region", "annotations cannot lie in the none region"));
        }
        Ok(Self {
            center,
            diameter_mm,
            region,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub swi: Volume3D,
    pub phase: Option<Volume3D>,
    pub t1: Option<Volume3D>,
    pub annotations: Vec<CMBAnnotation>,
    pub label_map: Option<RegionLabelMap>,
}

impl SubjectRecord {
    /// Checks shared native geometry and annotation bounds.
    pub fn validate(&self) -> Result<()> {
        let shape = self.swi.shape();
        let spacing = self.swi.spacing();
        let others = [self.phase.as_ref(), self.t1.as_ref()];
        for v in others.into_iter().flatten() {
            if v.shape() != shape || v.spacing() != spacing {
                return Err(Error::ShapeMismatch(format!(
                    "{}: {:?} volume {:?} does not match SWI {shape:?}",
                    self.subject_id,
                    v.modality(),
                    v.shape()
                )));
            }
        }
        if let Some(l) = &self.label_map {
            if l.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "{}: label map {:?} does not match SWI {shape:?}",
                    self.subject_id,
                    l.shape()
                )));
            }
        }
        for a in &self.annotations {
            if (0..3).any(|i| a.center[i] < 0.0 || a.center[i] > (shape[i] - 1) as f64) {
                return Err(Error::CoordinateOutOfGrid {
                    coord: a.center,
                    grid: shape,
                });
            }
        }
        Ok(())
    }

    pub fn modality(&self, m: Modality) -> Result<&Volume3D> {
        match m {
            Modality::Swi => Ok(&self.swi),
            Modality::Phase => self.phase.as_ref().ok_or(Error::MissingModality("phase")),
            Modality::T1 => self.t1.as_ref().ok_or(Error::MissingModality("T1")),
            Modality::LabelMap => Err(Error::invalid("modality", "label maps are not image inputs")),
        }
    }
}

/// Axis-aligned sub-grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropSpec {
    pub origin: Dims,
    pub size: Dims,
}

impl CropSpec {
    /// Builds a crop of `size` around a requested (possibly out-of-range) origin,
    /// shifted so it lies inside `shape`.
    pub fn clamped(origin: [i64; 3], size: Dims, shape: Dims) -> Result<Self> {
        if (0..3).any(|i| size[i] == 0 || size[i] > shape[i]) {
            return Err(Error::invalid("size", format!("{size:?} does not fit in {shape:?}")));
        }
        let origin = std::array::from_fn(|i| origin[i].clamp(0, (shape[i] - size[i]) as i64) as usize);
        Ok(Self { origin, size })
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.origin[i] as f64 && p[i] <= (self.origin[i] + self.size[i] - 1) as f64)
    }

    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| p[i] - self.origin[i] as f64)
    }

    pub fn to_global(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| p[i] + self.origin[i] as f64)
    }

    fn check(&self, shape: Dims) -> Result<()> {
        if (0..3).any(|i| self.size[i] == 0 || self.origin[i] + self.size[i] > shape[i]) {
            return Err(Error::OutOfBounds {
                origin: self.origin,
                size: self.size,
                shape,
            });
        }
        Ok(())
    }
}

/// `(v - min) / (max - min)`.
pub fn normalize_minmax(v: &Volume3D) -> Result<Volume3D> {
    let (lo, hi) = v.min_max();
    if hi <= lo {
        return Err(Error::DegenerateIntensity { value: lo });
    }
    let (lo, range) = (lo as f64, hi as f64 - lo as f64);
    let mut out = v.clone();
    for x in out.data.iter_mut() {
        *x = ((*x as f64 - lo) / range).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Endpoint-aligned resampling along z; nearest neighbour for label maps.
pub fn interpolate_z(v: &Volume3D, target_slices: usize) -> Result<Volume3D> {
    if target_slices < 2 {
        return Err(Error::invalid("target_slices", "must be at least 2"));
    }
    if v.space != Space::Native {
        return Err(Error::invalid("space", "volume is already z-interpolated"));
    }
    let [nx, ny, nz] = v.shape;
    if target_slices < nz {
        return Err(Error::invalid(
            "target_slices",
            format!("{target_slices} is below the native depth {nz}"),
        ));
    }
    let plane = nx * ny;
    let mut data = vec![0.0f32; plane * target_slices];
    for (zo, out) in data.chunks_exact_mut(plane).enumerate() {
        let zn = map_z(zo as f64, nz, target_slices);
        let z0 = (zn.floor() as usize).min(nz - 1);
        let z1 = (z0 + 1).min(nz - 1);
        let t = zn - z0 as f64;
        let a = &v.data[z0 * plane..(z0 + 1) * plane];
        let b = &v.data[z1 * plane..(z1 + 1) * plane];
        if v.modality == Modality::LabelMap {
            let src = if t < 0.5 { a } else { b };
            out.copy_from_slice(src);
        } else {
            for ((o, &p), &q) in out.iter_mut().zip(a).zip(b) {
                *o = ((1.0 - t) * p as f64 + t * q as f64) as f32;
            }
        }
    }
    let spacing = [
        v.spacing[0],
        v.spacing[1],
        if nz > 1 {
            v.spacing[2] * (nz - 1) as f64 / (target_slices - 1) as f64
        } else {
            v.spacing[2]
        },
    ];
    Ok(Volume3D {
        data,
        shape: [nx, ny, target_slices],
        spacing,
        modality: v.modality,
        space: Space::ZInterp,
    })
}

/// Interpolated z coordinate to native z.
pub fn map_z(z_interp: f64, native_depth: usize, target_slices: usize) -> f64 {
    if target_slices < 2 {
        return z_interp;
    }
    z_interp * (native_depth.max(1) - 1) as f64 / (target_slices - 1) as f64
}

/// Native z coordinate to interpolated z.
pub fn unmap_z(z_native: f64, native_depth: usize, target_slices: usize) -> f64 {
    if native_depth < 2 {
        return z_native;
    }
    z_native * (target_slices - 1) as f64 / (native_depth - 1) as f64
}

/// Window origins along one axis, the last clamped to `len - window`.
/// Strides longer than the window are shortened to the window so that no voxel is skipped.
pub fn window_origins(len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || window > len {
        return Err(Error::invalid("window", format!("{window} does not fit in {len}")));
    }
    if stride == 0 {
        return Err(Error::invalid("stride", "must be at least 1"));
    }
    let last = len - window;
    let mut out: Vec<usize> = (0..=last).step_by(stride.min(window)).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    Ok(out)
}

/// Tiles `shape` with end-clamped windows in lexicographic (x, y, z) order.
pub fn sliding_windows(shape: Dims, window: Dims, stride: Dims) -> Result<Vec<CropSpec>> {
    let ox = window_origins(shape[0], window[0], stride[0])?;
    let oy = window_origins(shape[1], window[1], stride[1])?;
    let oz = window_origins(shape[2], window[2], stride[2])?;
    let mut out = Vec::with_capacity(ox.len() * oy.len() * oz.len());
    for &x in &ox {
        for &y in &oy {
            for &z in &oz {
                out.push(CropSpec {
                    origin: [x, y, z],
                    size: window,
                });
            }
        }
    }
    Ok(out)
}

/// Default stride: half the window, at least 1.
pub fn half_stride(window: Dims) -> Dims {
    window.map(|w| (w / 2).max(1))
}

/// Absolute-coordinate ramps in [0, 1] along x, y and z.
pub fn make_coordinate_tensors(shape: Dims, spacing: [f64; 3]) -> Result<[Volume3D; 3]> {
    if shape.iter().any(|&n| n < 2) {
        return Err(Error::invalid("shape", format!("{shape:?} needs at least 2 voxels per axis")));
    }
    let [nx, ny, nz] = shape;
    let mut out = [0, 1, 2].map(|_| vec![0.0f32; voxel_count(shape)]);
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out[0][i] = x as f32 / (nx - 1) as f32;
                out[1][i] = y as f32 / (ny - 1) as f32;
                out[2][i] = z as f32 / (nz - 1) as f32;
                i += 1;
            }
        }
    }
    let [a, b, c] = out;
    let mk = |d| Volume3D {
        data: d,
        shape,
        spacing,
        modality: Modality::T1,
        space: Space::Native,
    };
    Ok([mk(a), mk(b), mk(c)])
}

/// Exact sub-grid copy.
pub fn extract_crop(v: &Volume3D, spec: &CropSpec) -> Result<Volume3D> {
    let data = crop_slice(&v.data, v.shape, spec)?;
    Ok(Volume3D {
        data,
        shape: spec.size,
        spacing: v.spacing,
        modality: v.modality,
        space: v.space,
    })
}

pub(crate) fn crop_slice<T: Copy>(src: &[T], shape: Dims, spec: &CropSpec) -> Result<Vec<T>> {
    spec.check(shape)?;
    let [ox, oy, oz] = spec.origin;
    let [sx, sy, sz] = spec.size;
    let mut out = Vec::with_capacity(sx * sy * sz);
    for z in oz..oz + sz {
        for y in oy..oy + sy {
            let start = ox + shape[0] * (y + shape[1] * z);
            out.extend_from_slice(&src[start..start + sx]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(data: Vec<f32>, shape: Dims) -> Volume3D {
        Volume3D::new(data, shape, [1.0; 3], Modality::Swi, Space::Native).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let v = normalize_minmax(&vol(vec![2.0, 4.0, 6.0], [3, 1, 1])).unwrap();
        assert_eq!(v.data(), &[0.0, 0.5, 1.0]);
        let v = normalize_minmax(&vol(vec![-1.0, 0.0, 3.0], [3, 1, 1])).unwrap();
        assert_eq!(v.data(), &[0.0, 0.25, 1.0]);
        let unit = vol(vec![0.0, 0.3, 1.0], [3, 1, 1]);
        let v = normalize_minmax(&unit).unwrap();
        for (a, b) in v.data().iter().zip(unit.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(matches!(
            normalize_minmax(&vol(vec![5.0; 4], [2, 2, 1])),
            Err(Error::DegenerateIntensity { .. })
        ));
    }

    #[test]
    fn interpolate_ramp() {
        let v = vol(vec![0.0, 1.0, 2.0], [1, 1, 3]);
        let out = interpolate_z(&v, 5).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(out.space(), Space::ZInterp);
        assert!(interpolate_z(&v, 1).is_err());
        assert!(interpolate_z(&out, 9).is_err());
    }

    #[test]
    fn interpolate_endpoints_and_identity() {
        let data: Vec<f32> = (0..2 * 72).map(|i| (i as f32 * 0.37).sin()).collect();
        let v = vol(data, [2, 1, 72]);
        let out = interpolate_z(&v, 224).unwrap();
        assert_eq!(out.shape(), [2, 1, 224]);
        assert_eq!(out.at(1, 0, 0), v.at(1, 0, 0));
        assert_eq!(out.at(1, 0, 223), v.at(1, 0, 71));
        let native = vol(out.data().to_vec(), out.shape());
        let same = interpolate_z(&native, 224).unwrap();
        assert_eq!(same.data(), native.data());
    }

    #[test]
    fn label_maps_resample_by_nearest() {
        let v = Volume3D::new(vec![0.0, 3.0, 1.0], [1, 1, 3], [1.0; 3], Modality::LabelMap, Space::Native).unwrap();
        let out = interpolate_z(&v, 7).unwrap();
        assert!(out.data().iter().all(|&c| [0.0, 1.0, 3.0].contains(&c)));
        assert_eq!(out.data(), &[0.0, 0.0, 3.0, 3.0, 3.0, 1.0, 1.0]);
    }

    #[test]
    fn map_z_examples() {
        assert_eq!(map_z(0.0, 72, 224), 0.0);
        assert!((map_z(223.0, 72, 224) - 71.0).abs() < 1e-12);
        assert!((map_z(111.5, 72, 224) - 35.5).abs() < 1e-12);
        assert!((unmap_z(35.5, 72, 224) - 111.5).abs() < 1e-12);
    }

    #[test]
    fn window_origin_examples() {
        assert_eq!(window_origins(224, 128, 96).unwrap(), vec![0, 96]);
        assert_eq!(window_origins(512, 128, 96).unwrap(), vec![0, 96, 192, 288, 384]);
        assert_eq!(window_origins(200, 128, 96).unwrap(), vec![0, 72]);
        assert!(sliding_windows([10, 10, 10], [11, 4, 4], [2, 2, 2]).is_err());
    }

    #[test]
    fn coordinate_tensor_examples() {
        let [tx, _, tz] = make_coordinate_tensors([512, 2, 3], [1.0; 3]).unwrap();
        assert_eq!(tx.at(0, 0, 0), 0.0);
        assert_eq!(tx.at(511, 1, 2), 1.0);
        let crop = extract_crop(&tx, &CropSpec { origin: [64, 0, 0], size: [8, 2, 3] }).unwrap();
        assert!((crop.at(0, 0, 0) - 64.0 / 511.0).abs() < 1e-7);
        for z in 0..3 {
            let v = tz.at(0, 0, z);
            assert!((0..512).all(|x| (0..2).all(|y| tz.at(x, y, z) == v)));
        }
    }

    #[test]
    fn crop_examples() {
        let shape = [4, 4, 4];
        let v = vol((0..64).map(|i| i as f32).collect(), shape);
        let full = extract_crop(&v, &CropSpec { origin: [0; 3], size: shape }).unwrap();
        assert_eq!(full, v);
        let spec = CropSpec { origin: [1, 1, 1], size: [2, 2, 2] };
        let c = extract_crop(&v, &spec).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(c.at(x, y, z), v.at(x + 1, y + 1, z + 1));
                }
            }
        }
        let spec = CropSpec { origin: [8, 8, 8], size: [4, 4, 4] };
        assert_eq!(spec.to_local([10.0, 12.0, 8.0]), [2.0, 4.0, 0.0]);
        assert!(matches!(
            extract_crop(&v, &CropSpec { origin: [3, 0, 0], size: [2, 2, 2] }),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn clamped_crop_stays_inside() {
        let c = CropSpec::clamped([-5, 30, 2], [8, 8, 4], [32, 32, 8]).unwrap();
        assert_eq!(c.origin, [0, 24, 2]);
    }

    #[test]
    fn annotation_diameter_bounds() {
        assert!(CMBAnnotation::new([0.0; 3], Some(1.0), None).is_err());
        assert!(CMBAnnotation::new([0.0; 3], Some(10.0), Some(Region::Deep)).is_ok());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(vals in prop::collection::vec(-1e3f32..1e3, 2..64)) {
            prop_assume!(vals.iter().any(|&v| v != vals[0]));
            let n = vals.len();
            let once = normalize_minmax(&vol(vals, [n, 1, 1])).unwrap();
            let (lo, hi) = once.min_max();
            prop_assert!(lo == 0.0 && hi == 1.0);
            let twice = normalize_minmax(&once).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn map_z_inverts_interpolation(native in 2usize..100, extra in 0usize..200) {
            let target = native + extra;
            let data: Vec<f32> = (0..native).map(|z| z as f32).collect();
            let v = vol(data, [1, 1, native]);
            let out = interpolate_z(&v, target).unwrap();
            for z in 0..native {
                let zi = unmap_z(z as f64, native, target);
                prop_assert!((map_z(zi, native, target) - z as f64).abs() < 1e-6);
                // A ramp resamples to its own coordinate.
                let k = zi.round() as usize;
                prop_assert!((out.at(0, 0, k) as f64 - map_z(k as f64, native, target)).abs() < 1e-4);
            }
        }

        #[test]
        fn windows_cover_every_voxel(
            shape in prop::array::uniform3(1usize..20),
            wfrac in prop::array::uniform3(0.05f64..1.0),
            stride in prop::array::uniform3(1usize..12),
        ) {
            let window: Dims = std::array::from_fn(|i| ((shape[i] as f64 * wfrac[i]).ceil() as usize).clamp(1, shape[i]));
            let wins = sliding_windows(shape, window, stride).unwrap();
            let mut covered = vec![false; voxel_count(shape)];
            for w in &wins {
                for z in w.origin[2]..w.origin[2] + w.size[2] {
                    for y in w.origin[1]..w.origin[1] + w.size[1] {
                        for x in w.origin[0]..w.origin[0] + w.size[0] {
                            covered[x + shape[0] * (y + shape[1] * z)] = true;
                        }
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
            let mut sorted = wins.clone();
            sorted.sort_by_key(|w| w.origin);
            prop_assert_eq!(sorted, wins);
        }

        #[test]
        fn coordinate_tensors_are_translation_consistent(
            shape in prop::array::uniform3(2usize..12),
            o in prop::array::uniform3(0usize..12),
            s in prop::array::uniform3(1usize..12),
        ) {
            let size: Dims = std::array::from_fn(|i| s[i].min(shape[i]));
            let spec = CropSpec::clamped(o.map(|v| v as i64), size, shape).unwrap();
            let full = make_coordinate_tensors(shape, [1.0; 3]).unwrap();
            for t in &full {
                let c = extract_crop(t, &spec).unwrap();
                for z in 0..size[2] {
                    for y in 0..size[1] {
                        for x in 0..size[0] {
                            let g = spec.to_global([x as f64, y as f64, z as f64]).map(|v| v as usize);
                            prop_assert_eq!(c.at(x, y, z), t.at(g[0], g[1], g[2]));
                        }
                    }
                }
            }
        }
    }
}
