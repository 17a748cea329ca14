use rand::Rng;

use crate::detector::prepare_input;
use crate::error::{Error, Result};
use crate::nn::{Dims, Tensor};
use crate::volume_io::{unmap_z, SubjectRecord};

const MAX_ATTEMPTS: usize = 10_000;

/// A lesion in detector-input (z-interpolated) voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CmbTarget {
    pub center: [f64; 3],
    pub diameter_mm: Option<f64>,
}

/// A preprocessed subject ready for crop sampling.
#[derive(Clone, Debug)]
pub struct TrainingSubject {
    pub id: String,
    pub input: Tensor,
    pub cmbs: Vec<CmbTarget>,
    /// Voxel size of `input` in mm.
    pub spacing: [f64; 3],
}

impl TrainingSubject {
    pub fn from_record(subject: &SubjectRecord, z_slices: usize) -> Result<Self> {
        let input = prepare_input(subject, z_slices)?;
        let nz = subject.swi.shape()[2];
        let sp = subject.swi.spacing();
        let spacing = [
            sp[0],
            sp[1],
            if nz > 1 {
                sp[2] * (nz - 1) as f64 / (z_slices - 1) as f64
            } else {
                sp[2]
            },
        ];
        let cmbs = subject
            .annotations
            .iter()
            .map(|a| CmbTarget {
                center: [a.center[0], a.center[1], unmap_z(a.center[2], nz, z_slices)],
                diameter_mm: a.diameter_mm,
            })
            .collect();
        Ok(Self {
            id: subject.subject_id.clone(),
            input,
            cmbs,
            spacing,
        })
    }
}

/// One training sample with its lesions in crop-local coordinates.
#[derive(Clone, Debug)]
pub struct TrainingCrop {
    pub subject: usize,
    pub origin: Dims,
    pub input: Tensor,
    pub contains_cmb: bool,
    pub cmbs: Vec<CmbTarget>,
}

impl TrainingCrop {
    pub fn cmb_coords(&self) -> Vec<[f64; 3]> {
        self.cmbs.iter().map(|c| c.center).collect()
    }
}

/// Nearest voxel (halves round up), clamped into `dims`.
pub(crate) fn voxel_of(p: [f64; 3], dims: Dims) -> Dims {
    std::array::from_fn(|i| ((p[i] + 0.5).floor().max(0.0) as usize).min(dims[i] - 1))
}

fn inside(v: Dims, origin: Dims, size: Dims, margin: [usize; 3]) -> bool {
    (0..3).all(|i| v[i] + margin[i] >= origin[i] && v[i] < origin[i] + size[i] + margin[i])
}

fn make_crop(pool: &[TrainingSubject], s: usize, origin: Dims, size: Dims) -> Result<TrainingCrop> {
    let subj = &pool[s];
    let dims = subj.input.dims();
    let cmbs: Vec<CmbTarget> = subj
        .cmbs
        .iter()
        .filter(|c| inside(voxel_of(c.center, dims), origin, size, [0; 3]))
        .map(|c| CmbTarget {
            center: std::array::from_fn(|i| c.center[i] - origin[i] as f64),
            diameter_mm: c.diameter_mm,
        })
        .collect();
    Ok(TrainingCrop {
        subject: s,
        origin,
        input: subj.input.crop(origin, size)?,
        contains_cmb: !cmbs.is_empty(),
        cmbs,
    })
}

/// `count / 2` crops around randomly chosen lesions and `count / 2` lesion-free
/// crops, interleaved positive first.
pub fn sample_balanced_crops<R: Rng + ?Sized>(
    pool: &[TrainingSubject],
    crop_size: Dims,
    count: usize,
    rng: &mut R,
) -> Result<Vec<TrainingCrop>> {
    if count % 2 != 0 {
        return Err(Error::invalid("count", format!("{count} is odd")));
    }
    let lesions: Vec<(usize, usize)> = pool
        .iter()
        .enumerate()
        .flat_map(|(s, subj)| (0..subj.cmbs.len()).map(move |k| (s, k)))
        .collect();
    if lesions.is_empty() {
        return Err(Error::Sampling("no subject in the pool has an annotated lesion".into()));
    }
    for subj in pool {
        let d = subj.input.dims();
        if (0..3).any(|i| crop_size[i] == 0 || crop_size[i] > d[i]) {
            return Err(Error::invalid("crop_size", format!("{crop_size:?} does not fit {}: {d:?}", subj.id)));
        }
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count / 2 {
        let (s, k) = lesions[rng.gen_range(0..lesions.len())];
        let dims = pool[s].input.dims();
        let v = voxel_of(pool[s].cmbs[k].center, dims);
        let origin: Dims = std::array::from_fn(|i| {
            let lo = (v[i] + 1).saturating_sub(crop_size[i]);
            let hi = v[i].min(dims[i] - crop_size[i]);
            rng.gen_range(lo..=hi)
        });
        out.push(make_crop(pool, s, origin, crop_size)?);
        out.push(sample_negative(pool, crop_size, rng)?);
    }
    Ok(out)
}

fn sample_negative<R: Rng + ?Sized>(pool: &[TrainingSubject], size: Dims, rng: &mut R) -> Result<TrainingCrop> {
    for _ in 0..MAX_ATTEMPTS {
        let s = rng.gen_range(0..pool.len());
        let subj = &pool[s];
        let dims = subj.input.dims();
        let origin: Dims = std::array::from_fn(|i| rng.gen_range(0..=dims[i] - size[i]));
        // Keep partially visible lesions out of negatives as well.
        let clear = subj.cmbs.iter().all(|c| {
            let r_mm = c.diameter_mm.unwrap_or(2.0) / 2.0;
            let margin: [usize; 3] = std::array::from_fn(|i| (r_mm / subj.spacing[i]).ceil() as usize);
            !inside(voxel_of(c.center, dims), origin, size, margin)
        });
        if clear {
            return make_crop(pool, s, origin, size);
        }
    }
    Err(Error::Sampling(format!(
        "no lesion-free {size:?} crop found after {MAX_ATTEMPTS} attempts"
    )))
}

/// Lesion voxels for positive crops; otherwise the single most confident voxel,
/// ties resolved towards the lexicographically smallest `(x, y, z)`.
pub fn select_coordinate(crop: &TrainingCrop, prob: &[f32]) -> Vec<Dims> {
    let dims = crop.input.dims();
    if crop.contains_cmb {
        return crop.cmbs.iter().map(|c| voxel_of(c.center, dims)).collect();
    }
    let [nx, ny, nz] = dims;
    let mut best = [0usize; 3];
    let mut best_p = f32::NEG_INFINITY;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = prob[x + nx * (y + ny * z)];
                if p > best_p {
                    best_p = p;
                    best = [x, y, z];
                }
            }
        }
    }
    vec![best]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn subject(id: &str, dims: Dims, cmbs: &[[f64; 3]]) -> TrainingSubject {
        TrainingSubject {
            id: id.into(),
            input: Tensor::zeros(2, dims),
            cmbs: cmbs
                .iter()
                .map(|&c| CmbTarget {
                    center: c,
                    diameter_mm: Some(3.0),
                })
                .collect(),
            spacing: [1.0; 3],
        }
    }

    fn crop_with(dims: Dims, cmbs: &[[f64; 3]]) -> TrainingCrop {
        TrainingCrop {
            subject: 0,
            origin: [0; 3],
            input: Tensor::zeros(2, dims),
            contains_cmb: !cmbs.is_empty(),
            cmbs: cmbs
                .iter()
                .map(|&c| CmbTarget {
                    center: c,
                    diameter_mm: None,
                })
                .collect(),
        }
    }

    #[test]
    fn counts_are_balanced_and_reproducible() {
        let pool = [subject("a", [40, 40, 20], &[[10.0, 12.0, 8.0]]), subject("b", [40, 40, 20], &[])];
        let run = |seed| sample_balanced_crops(&pool, [8, 8, 4], 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let crops = run(3);
        assert_eq!(crops.iter().filter(|c| c.contains_cmb).count(), 4);
        assert_eq!(crops.iter().filter(|c| !c.contains_cmb).count(), 4);
        let again = run(3);
        assert_eq!(
            crops.iter().map(|c| (c.subject, c.origin)).collect::<Vec<_>>(),
            again.iter().map(|c| (c.subject, c.origin)).collect::<Vec<_>>()
        );
        assert!(sample_balanced_crops(&pool, [8, 8, 4], 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(sample_balanced_crops(&pool[1..], [8, 8, 4], 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn impossible_negative_is_reported() {
        let pool = [subject("a", [8, 8, 4], &[[4.0, 4.0, 2.0]])];
        let r = sample_balanced_crops(&pool, [8, 8, 4], 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Sampling(_))));
    }

    #[test]
    fn selection_rules() {
        let dims = [6, 6, 6];
        let mut p = vec![0.1f32; 216];
        p[3 + 6 * (4 + 6 * 5)] = 0.9;
        assert_eq!(select_coordinate(&crop_with(dims, &[]), &p), vec![[3, 4, 5]]);
        let c = crop_with([16, 16, 10], &[[10.0, 12.0, 8.0]]);
        assert_eq!(select_coordinate(&c, &vec![0.3; 16 * 16 * 10]), vec![[10, 12, 8]]);
        assert_eq!(select_coordinate(&crop_with(dims, &[]), &[0.5; 216]), vec![[0, 0, 0]]);
    }
}
