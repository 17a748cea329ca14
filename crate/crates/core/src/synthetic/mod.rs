//! Deterministic SWI/phase/T1 phantoms with planted microbleeds, vessel and
//! calcification mimics, schematic region labels and ground truth.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anatomical::{Region, RegionLabelMap};
use crate::error::{Error, Result};
use crate::evaluation::write_json;
use crate::nn::{voxel_count, Dims};
use crate::volume_io::{write_dataset, CMBAnnotation, Modality, Space, SubjectRecord, Volume3D};

const MAX_ATTEMPTS: usize = 2000;
/// Supersampling pitch for partial-volume rendering, in mm.
const SUBSAMPLE_MM: f64 = 0.25;
/// Minimum gap between lesion surfaces, in mm.
const GAP_MM: f64 = 1.0;
/// Vessel length range, in mm.
const VESSEL_LENGTH_MM: (f64, f64) = (12.0, 20.0);
const VESSEL_DIAMETER_MM: (f64, f64) = (1.5, 3.0);
const CALCIFICATION_DIAMETER_MM: (f64, f64) = (2.0, 5.0);
/// Intensity lesions are blended towards (SWI).
const DARK_SWI: (f64, f64) = (0.15, 0.3);
const DARK_PHASE: f64 = 0.2;
const BRIGHT_PHASE: f64 = 0.85;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: Dims,
    pub spacing: [f64; 3],
    pub n_cmbs: usize,
    pub n_vessels: usize,
    pub n_calcifications: usize,
    pub cmb_diameter_range_mm: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [96, 96, 48],
            spacing: [0.5, 0.5, 2.0],
            n_cmbs: 3,
            n_vessels: 2,
            n_calcifications: 2,
            cmb_diameter_range_mm: (2.0, 10.0),
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n < 8) {
            return Err(Error::invalid("shape", "at least 8 voxels per axis"));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid("spacing", "must be positive"));
        }
        let (lo, hi) = self.cmb_diameter_range_mm;
        if !(2.0 <= lo && lo <= hi && hi <= 10.0) {
            return Err(Error::invalid("cmb_diameter_range_mm", "must satisfy 2 <= lo <= hi <= 10"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionKind {
    Cmb,
    Vessel,
    Calcification,
}

/// Lesion geometry in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LesionShape {
    /// Axis-aligned ellipsoid.
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
    /// Capsule around the segment `a`-`b`.
    Tube { a: [f64; 3], b: [f64; 3], radius: f64 },
}

impl LesionShape {
    fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            LesionShape::Ellipsoid { center, radii } => {
                (0..3).map(|i| ((p[i] - center[i]) / radii[i]).powi(2)).sum::<f64>() <= 1.0
            }
            LesionShape::Tube { a, b, radius } => point_segment_dist(p, a, b) <= radius,
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            LesionShape::Ellipsoid { center, radii } => (
                std::array::from_fn(|i| center[i] - radii[i]),
                std::array::from_fn(|i| center[i] + radii[i]),
            ),
            LesionShape::Tube { a, b, radius } => (
                std::array::from_fn(|i| a[i].min(b[i]) - radius),
                std::array::from_fn(|i| a[i].max(b[i]) + radius),
            ),
        }
    }

    /// Surface points used for containment checks.
    fn probe_points(&self) -> Vec<[f64; 3]> {
        match *self {
            LesionShape::Ellipsoid { center, radii } => {
                let mut pts = vec![center];
                for i in 0..3 {
                    for s in [-1.0, 1.0] {
                        let mut p = center;
                        p[i] += s * radii[i];
                        pts.push(p);
                    }
                }
                pts
            }
            LesionShape::Tube { a, b, radius } => (0..=16)
                .flat_map(|k| {
                    let t = k as f64 / 16.0;
                    let c: [f64; 3] = std::array::from_fn(|i| a[i] + t * (b[i] - a[i]));
                    (0..3).flat_map(move |i| {
                        [-1.0, 1.0].map(|s| {
                            let mut p = c;
                            p[i] += s * radius;
                            p
                        })
                    })
                })
                .collect(),
        }
    }

    /// Conservative distance between the two shapes' surfaces.
    fn clearance(&self, other: &LesionShape) -> f64 {
        let (c1, r1) = self.core();
        let (c2, r2) = other.core();
        segment_segment_dist(c1, c2) - r1 - r2
    }

    /// Axis segment and enclosing radius.
    fn core(&self) -> (([f64; 3], [f64; 3]), f64) {
        match *self {
            LesionShape::Ellipsoid { center, radii } => ((center, center), radii.iter().cloned().fold(0.0, f64::max)),
            LesionShape::Tube { a, b, radius } => ((a, b), radius),
        }
    }
}

fn point_segment_dist(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: [f64; 3] = std::array::from_fn(|i| b[i] - a[i]);
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((0..3).map(|i| (p[i] - a[i]) * ab[i]).sum::<f64>() / len2).clamp(0.0, 1.0)
    };
    (0..3).map(|i| (p[i] - a[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

fn segment_segment_dist(s1: ([f64; 3], [f64; 3]), s2: ([f64; 3], [f64; 3])) -> f64 {
    // Dense sampling of the first segment; exact enough at the generator's scale.
    (0..=64)
        .map(|k| {
            let t = k as f64 / 64.0;
            let p = std::array::from_fn(|i| s1.0[i] + t * (s1.1[i] - s1.0[i]));
            point_segment_dist(p, s2.0, s2.1)
        })
        .fold(f64::INFINITY, f64::min)
}

/// A planted structure and the intensities it is blended towards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub kind: LesionKind,
    pub shape: LesionShape,
    pub swi_target: f64,
    pub phase_target: f64,
    /// Diameter in mm (tube diameter for vessels).
    pub diameter_mm: f64,
}

/// Schematic anatomy: brain ellipsoid with a deep core, lobar shell,
/// infratentorial base and two ventricle pockets.
#[derive(Clone, Copy, Debug)]
struct Anatomy {
    center: [f64; 3],
    semi: [f64; 3],
}

const VENTRICLES: [([f64; 3], [f64; 3]); 2] = [
    ([-0.2, 0.05, 0.12], [0.1, 0.3, 0.22]),
    ([0.2, 0.05, 0.12], [0.1, 0.3, 0.22]),
];
const SHELL: f64 = 0.68;
const INFRA_Z: f64 = -0.55;

impl Anatomy {
    fn new(shape: Dims, spacing: [f64; 3]) -> Self {
        Self {
            center: std::array::from_fn(|i| (shape[i] - 1) as f64 * spacing[i] / 2.0),
            semi: std::array::from_fn(|i| 0.44 * shape[i] as f64 * spacing[i]),
        }
    }

    fn unit(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (p[i] - self.center[i]) / self.semi[i])
    }

    fn rho(&self, p: [f64; 3]) -> f64 {
        self.unit(p).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn in_ventricle(&self, p: [f64; 3]) -> bool {
        let u = self.unit(p);
        VENTRICLES
            .iter()
            .any(|(c, r)| (0..3).map(|i| ((u[i] - c[i]) / r[i]).powi(2)).sum::<f64>() <= 1.0)
    }

    fn region(&self, p: [f64; 3]) -> Region {
        let u = self.unit(p);
        let rho = self.rho(p);
        if rho > 1.0 || self.in_ventricle(p) {
            Region::None
        } else if u[2] < INFRA_Z {
            Region::Infratentorial
        } else if rho > SHELL {
            Region::Lobar
        } else {
            Region::Deep
        }
    }

    fn random_point<R: Rng + ?Sized>(&self, rng: &mut R, max_rho: f64) -> [f64; 3] {
        loop {
            let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            if u.iter().map(|v| v * v).sum::<f64>() <= max_rho * max_rho {
                return std::array::from_fn(|i| self.center[i] + u[i] * self.semi[i]);
            }
        }
    }

    fn ventricle_point<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        let (c, r) = VENTRICLES[rng.gen_range(0..VENTRICLES.len())];
        loop {
            let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            if u.iter().map(|v| v * v).sum::<f64>() <= 0.5 {
                return std::array::from_fn(|i| self.center[i] + (c[i] + u[i] * r[i]) * self.semi[i]);
            }
        }
    }
}

/// Base intensities per region: (SWI, phase, T1).
fn tissue(r: Region, ventricle: bool) -> (f64, f64, f64) {
    if ventricle {
        return (0.88, 0.5, 0.15);
    }
    match r {
        Region::None => (0.0, 0.0, 0.0),
        Region::Lobar => (0.72, 0.5, 0.45),
        Region::Deep => (0.62, 0.5, 0.75),
        Region::Infratentorial => (0.67, 0.5, 0.6),
    }
}

fn voxel_mm(v: Dims, spacing: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| v[i] as f64 * spacing[i])
}

/// Label at the nearest voxel (halves rounding up) of a millimetre position.
fn label_at(labels: &[u8], shape: Dims, spacing: [f64; 3], p: [f64; 3]) -> Option<Region> {
    let mut idx = [0usize; 3];
    for i in 0..3 {
        let v = (p[i] / spacing[i] + 0.5).floor();
        if v < 0.0 || v >= shape[i] as f64 {
            return None;
        }
        idx[i] = v as usize;
    }
    Some(Region::ALL[labels[idx[0] + shape[0] * (idx[1] + shape[1] * idx[2])] as usize])
}

/// Synthetic subject plus every planted structure.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub subject: SubjectRecord,
    pub lesions: Vec<Lesion>,
}

impl Phantom {
    /// Voxel indices with at least `min_fraction` of their volume inside `lesion`.
    pub fn lesion_voxels(&self, lesion: &Lesion, min_fraction: f64) -> Vec<usize> {
        let shape = self.subject.swi.shape();
        let spacing = self.subject.swi.spacing();
        partial_volume(&lesion.shape, shape, spacing)
            .into_iter()
            .filter(|&(_, f)| f >= min_fraction)
            .map(|(i, _)| i)
            .collect()
    }
}

/// `(voxel index, fraction inside)` for every voxel touched by `shape`.
fn partial_volume(shape: &LesionShape, dims: Dims, spacing: [f64; 3]) -> Vec<(usize, f64)> {
    let (lo, hi) = shape.bounds();
    let sub: [usize; 3] = std::array::from_fn(|i| ((spacing[i] / SUBSAMPLE_MM).ceil() as usize).clamp(1, 8));
    let total = (sub[0] * sub[1] * sub[2]) as f64;
    let range = |i: usize| {
        let a = ((lo[i] / spacing[i]) - 0.5).floor().max(0.0) as usize;
        let b = (((hi[i] / spacing[i]) + 0.5).ceil().max(0.0) as usize).min(dims[i] - 1);
        a..=b
    };
    let mut out = Vec::new();
    for z in range(2) {
        for y in range(1) {
            for x in range(0) {
                let c = voxel_mm([x, y, z], spacing);
                let mut inside = 0usize;
                for sz in 0..sub[2] {
                    for sy in 0..sub[1] {
                        for sx in 0..sub[0] {
                            let s = [sx, sy, sz];
                            let p: [f64; 3] =
                                std::array::from_fn(|i| c[i] + ((s[i] as f64 + 0.5) / sub[i] as f64 - 0.5) * spacing[i]);
                            inside += shape.contains(p) as usize;
                        }
                    }
                }
                if inside > 0 {
                    out.push((x + dims[0] * (y + dims[1] * z), inside as f64 / total));
                }
            }
        }
    }
    out
}

fn place<R: Rng + ?Sized>(
    what: &str,
    placed: &[Lesion],
    rng: &mut R,
    mut propose: impl FnMut(&mut R) -> Option<Lesion>,
) -> Result<Lesion> {
    for _ in 0..MAX_ATTEMPTS {
        let Some(l) = propose(rng) else { continue };
        if placed.iter().all(|o| o.shape.clearance(&l.shape) > GAP_MM) {
            return Ok(l);
        }
    }
    Err(Error::Sampling(format!(
        "could not place {what} after {MAX_ATTEMPTS} attempts; reduce lesion counts or sizes"
    )))
}

/// Builds one phantom: background anatomy, lesions, noise, labels and annotations.
pub fn generate_phantom_full(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = spec.shape;
    let sp = spec.spacing;
    let anat = Anatomy::new(shape, sp);
    let n = voxel_count(shape);

    let mut labels = vec![0u8; n];
    let mut swi = vec![0.0f64; n];
    let mut phase = vec![0.0f64; n];
    let mut t1 = vec![0.0f64; n];
    let mut brain = vec![false; n];
    let mut i = 0;
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let p = voxel_mm([x, y, z], sp);
                let r = anat.region(p);
                let inside = anat.rho(p) <= 1.0;
                let (s, ph, t) = tissue(r, inside && anat.in_ventricle(p));
                labels[i] = r.code();
                swi[i] = s;
                phase[i] = ph;
                t1[i] = t;
                brain[i] = inside;
                i += 1;
            }
        }
    }

    let inside_brain = |l: &LesionShape| l.probe_points().iter().all(|&p| anat.rho(p) < 0.97);
    let mut lesions: Vec<Lesion> = Vec::new();
    let (dlo, dhi) = spec.cmb_diameter_range_mm;
    for _ in 0..spec.n_cmbs {
        let l = place("microbleed", &lesions, &mut rng, |rng| {
            let d = rng.gen_range(dlo..=dhi);
            let mut radii = [d / 2.0; 3];
            // Round or mildly elliptical; never wider than the diameter.
            for r in radii.iter_mut().skip(1) {
                *r *= rng.gen_range(0.8..=1.0);
            }
            let center = anat.random_point(rng, 0.9);
            let shape = LesionShape::Ellipsoid { center, radii };
            let tissue_ok = shape
                .probe_points()
                .iter()
                .all(|&p| label_at(&labels, spec.shape, sp, p).is_some_and(|r| r != Region::None));
            (inside_brain(&shape) && tissue_ok).then(|| Lesion {
                kind: LesionKind::Cmb,
                shape,
                swi_target: rng.gen_range(DARK_SWI.0..DARK_SWI.1),
                phase_target: DARK_PHASE,
                diameter_mm: d,
            })
        })?;
        lesions.push(l);
    }
    for _ in 0..spec.n_vessels {
        let l = place("vessel", &lesions, &mut rng, |rng| {
            let d = rng.gen_range(VESSEL_DIAMETER_MM.0..VESSEL_DIAMETER_MM.1);
            let len = rng.gen_range(VESSEL_LENGTH_MM.0..VESSEL_LENGTH_MM.1);
            let dir = random_unit(rng);
            let c = anat.random_point(rng, 0.85);
            let a = std::array::from_fn(|i| c[i] - dir[i] * len / 2.0);
            let b = std::array::from_fn(|i| c[i] + dir[i] * len / 2.0);
            let shape = LesionShape::Tube { a, b, radius: d / 2.0 };
            inside_brain(&shape).then(|| Lesion {
                kind: LesionKind::Vessel,
                shape,
                swi_target: rng.gen_range(DARK_SWI.0..DARK_SWI.1),
                phase_target: DARK_PHASE,
                diameter_mm: d,
            })
        })?;
        lesions.push(l);
    }
    for _ in 0..spec.n_calcifications {
        let l = place("calcification", &lesions, &mut rng, |rng| {
            let d = rng.gen_range(CALCIFICATION_DIAMETER_MM.0..CALCIFICATION_DIAMETER_MM.1);
            // Half of them sit in a ventricle, like choroid plexus calcification.
            let center = if rng.gen_bool(0.5) { anat.ventricle_point(rng) } else { anat.random_point(rng, 0.9) };
            let shape = LesionShape::Ellipsoid { center, radii: [d / 2.0; 3] };
            inside_brain(&shape).then(|| Lesion {
                kind: LesionKind::Calcification,
                shape,
                swi_target: rng.gen_range(DARK_SWI.0..DARK_SWI.1),
                phase_target: BRIGHT_PHASE,
                diameter_mm: d,
            })
        })?;
        lesions.push(l);
    }

    for l in &lesions {
        for (i, f) in partial_volume(&l.shape, shape, sp) {
            swi[i] += f * (l.swi_target - swi[i]);
            phase[i] += f * (l.phase_target - phase[i]);
        }
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for i in 0..n {
            if brain[i] {
                swi[i] += noise.sample(&mut rng);
                phase[i] += noise.sample(&mut rng);
                t1[i] += noise.sample(&mut rng);
            }
        }
    }

    let annotations = lesions
        .iter()
        .filter(|l| l.kind == LesionKind::Cmb)
        .map(|l| {
            let LesionShape::Ellipsoid { center, .. } = l.shape else { unreachable!() };
            let region = label_at(&labels, shape, sp, center);
            CMBAnnotation::new(std::array::from_fn(|i| center[i] / sp[i]), Some(l.diameter_mm), region)
        })
        .collect::<Result<Vec<_>>>()?;

    let vol = |d: Vec<f64>, m| Volume3D::new(d.into_iter().map(|v| v as f32).collect(), shape, sp, m, Space::Native);
    let subject = SubjectRecord {
        subject_id: format!("phantom-{:016x}", spec.seed),
        swi: vol(swi, Modality::Swi)?,
        phase: Some(vol(phase, Modality::Phase)?),
        t1: Some(vol(t1, Modality::T1)?),
        annotations,
        label_map: Some(RegionLabelMap::new(labels, shape, sp)?),
    };
    subject.validate()?;
    Ok(Phantom { subject, lesions })
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<SubjectRecord> {
    Ok(generate_phantom_full(spec)?.subject)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub normal: bool,
    pub n_cmbs: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub subjects: Vec<SubjectRecord>,
    pub manifest: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Subject seeds drawn from a ChaCha8 stream keyed by the master seed.
pub fn derive_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// `n_subjects` phantoms; the last `round(n * normal_fraction)` carry no microbleeds.
pub fn generate_dataset(n_subjects: usize, template: &PhantomSpec, normal_fraction: f64, seed: u64) -> Result<Dataset> {
    generate_dataset_with_prefix(n_subjects, template, normal_fraction, seed, "sub")
}

pub fn generate_dataset_with_prefix(
    n_subjects: usize,
    template: &PhantomSpec,
    normal_fraction: f64,
    seed: u64,
    prefix: &str,
) -> Result<Dataset> {
    if n_subjects == 0 {
        return Err(Error::invalid("n_subjects", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&normal_fraction) {
        return Err(Error::invalid("normal_fraction", "must lie in [0, 1]"));
    }
    let n_normal = (n_subjects as f64 * normal_fraction).round() as usize;
    let mut subjects = Vec::with_capacity(n_subjects);
    let mut manifest = Vec::with_capacity(n_subjects);
    for (i, s) in derive_seeds(seed, n_subjects).into_iter().enumerate() {
        let normal = i >= n_subjects - n_normal;
        let spec = PhantomSpec {
            seed: s,
            n_cmbs: if normal { 0 } else { template.n_cmbs },
            ..template.clone()
        };
        let mut subj = generate_phantom(&spec)?;
        subj.subject_id = format!("{prefix}-{i:03}");
        manifest.push(ManifestEntry {
            id: subj.subject_id.clone(),
            seed: s,
            normal,
            n_cmbs: subj.annotations.len(),
        });
        subjects.push(subj);
    }
    Ok(Dataset { subjects, manifest })
}

/// NIfTI volumes, annotations and the manifest under `root`.
pub fn write_synthetic(root: &Path, ds: &Dataset) -> Result<()> {
    write_dataset(root, &ds.subjects)?;
    write_json(&root.join(MANIFEST_FILE), &ds.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            shape: [64, 64, 24],
            seed,
            ..PhantomSpec::default()
        }
    }

    fn digest(s: &SubjectRecord) -> Vec<u8> {
        let mut h = Sha256::new();
        for v in [Some(&s.swi), s.phase.as_ref(), s.t1.as_ref()].into_iter().flatten() {
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().to_vec()
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_phantom(&small(5)).unwrap();
        let b = generate_phantom(&small(5)).unwrap();
        assert_eq!(digest(&a), digest(&b));
        assert_eq!(a.annotations, b.annotations);
        assert_ne!(digest(&a), digest(&generate_phantom(&small(6)).unwrap()));
    }

    #[test]
    fn annotations_and_regions() {
        for seed in 0..4 {
            let p = generate_phantom_full(&PhantomSpec { seed, ..PhantomSpec::default() }).unwrap();
            let s = &p.subject;
            assert_eq!(s.annotations.len(), 3);
            let map = s.label_map.as_ref().unwrap();
            for a in &s.annotations {
                let d = a.diameter_mm.unwrap();
                assert!((2.0..=10.0).contains(&d));
                let r = crate::anatomical::lookup_region(a.center, map).unwrap().region;
                assert_ne!(r, Region::None);
                assert_eq!(a.region, Some(r));
            }
            for r in Region::ALL {
                assert!(map.count(r) > 0, "{r} missing");
            }
        }
    }

    fn brain_mean(v: &Volume3D, anat: &Anatomy) -> f64 {
        let sp = v.spacing();
        let [nx, ny, nz] = v.shape();
        let mut sum = 0.0;
        let mut n = 0usize;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if anat.rho(voxel_mm([x, y, z], sp)) <= 1.0 {
                        sum += v.at(x, y, z) as f64;
                        n += 1;
                    }
                }
            }
        }
        sum / n as f64
    }

    #[test]
    fn calcifications_have_opposite_phase() {
        for seed in 0..3 {
            let p = generate_phantom_full(&PhantomSpec { seed, n_calcifications: 4, ..PhantomSpec::default() }).unwrap();
            let s = &p.subject;
            let anat = Anatomy::new(s.swi.shape(), s.swi.spacing());
            let phase = s.phase.as_ref().unwrap();
            let (m_swi, m_phase) = (brain_mean(&s.swi, &anat), brain_mean(phase, &anat));
            let mut checked = 0;
            for l in p.lesions.iter().filter(|l| l.kind == LesionKind::Calcification) {
                for i in p.lesion_voxels(l, 0.5) {
                    assert!((s.swi.data()[i] as f64) < m_swi);
                    assert!((phase.data()[i] as f64) > m_phase);
                    checked += 1;
                }
            }
            assert!(checked > 0);
        }
    }

    #[test]
    fn vessels_persist_and_microbleeds_stay_compact() {
        let p = generate_phantom_full(&PhantomSpec { n_vessels: 4, ..PhantomSpec::default() }).unwrap();
        let shape = p.subject.swi.shape();
        let sp = p.subject.swi.spacing();
        let extent = |idx: &[usize]| -> [usize; 3] {
            let coords: Vec<[usize; 3]> =
                idx.iter().map(|&i| [i % shape[0], (i / shape[0]) % shape[1], i / (shape[0] * shape[1])]).collect();
            std::array::from_fn(|a| {
                let lo = coords.iter().map(|c| c[a]).min().unwrap();
                let hi = coords.iter().map(|c| c[a]).max().unwrap();
                hi - lo + 1
            })
        };
        for l in &p.lesions {
            let vox = p.lesion_voxels(l, 0.5);
            match l.kind {
                LesionKind::Vessel => assert!(extent(&vox).iter().any(|&e| e >= 3)),
                LesionKind::Cmb if !vox.is_empty() => {
                    let e = extent(&vox);
                    for a in 0..3 {
                        assert!(e[a] as f64 * sp[a] <= l.diameter_mm + sp[a], "{e:?} vs {}", l.diameter_mm);
                    }
                }
                _ => {}
            }
        }
    }

    #[test]
    fn volumes_normalise_cleanly() {
        let s = generate_phantom(&small(1)).unwrap();
        for v in [&s.swi, s.phase.as_ref().unwrap(), s.t1.as_ref().unwrap()] {
            let n = crate::volume_io::normalize_minmax(v).unwrap();
            let (lo, hi) = n.min_max();
            assert_eq!((lo, hi), (0.0, 1.0));
        }
    }

    #[test]
    fn unsatisfiable_spec_is_reported() {
        let spec = PhantomSpec {
            shape: [16, 16, 8],
            n_cmbs: 40,
            cmb_diameter_range_mm: (9.0, 10.0),
            ..PhantomSpec::default()
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Sampling(_))));
    }

    #[test]
    fn dataset_normals_and_distinct_subjects() {
        let ds = generate_dataset(10, &small(0), 0.3, 42).unwrap();
        assert_eq!(ds.subjects.iter().filter(|s| s.annotations.is_empty()).count(), 3);
        assert_eq!(ds.manifest.iter().filter(|m| m.normal).count(), 3);
        let again = generate_dataset(10, &small(0), 0.3, 42).unwrap();
        let hashes: Vec<_> = ds.subjects.iter().map(digest).collect();
        assert_eq!(hashes, again.subjects.iter().map(digest).collect::<Vec<_>>());
        for i in 0..hashes.len() {
            for j in i + 1..hashes.len() {
                assert_ne!(hashes[i], hashes[j]);
            }
        }
        assert!(generate_dataset(0, &small(0), 0.3, 42).is_err());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let ds = generate_dataset(2, &small(0), 0.5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(dir.path(), &ds).unwrap();
        assert!(dir.path().join(MANIFEST_FILE).exists());
        let back = crate::volume_io::read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in ds.subjects.iter().zip(&back) {
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.swi.data(), b.swi.data());
            assert_eq!(a.label_map, b.label_map);
            assert_eq!(a.annotations.len(), b.annotations.len());
        }
    }
}
