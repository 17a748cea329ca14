//! Anatomical localization: region taxonomy, atlas mapping, segmentation
//! and elimination of candidates that fall outside plausible tissue.

mod segmenter;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use segmenter::{
    dice_loss, dice_loss_grad, one_hot, segment_subject, segmenter_input, softmax_channels, train_segmenter_step,
    Segmenter, SegmenterConfig,
};

use crate::detector::DetectionCandidate;
use crate::error::{Error, Result};
use crate::nn::{voxel_count, Dims};

/// Microbleed location class; `None` marks tissue where lesions cannot occur.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    None = 0,
    Lobar = 1,
    Deep = 2,
    Infratentorial = 3,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::None, Region::Lobar, Region::Deep, Region::Infratentorial];
    pub const TISSUE: [Region; 3] = [Region::Lobar, Region::Deep, Region::Infratentorial];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::invalid("code", format!("region code {code} outside 0..=3")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::None => "none",
            Region::Lobar => "lobar",
            Region::Deep => "deep",
            Region::Infratentorial => "infratentorial",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s.trim())
            .ok_or_else(|| Error::invalid("region", format!("unknown class `{s}`")))
    }
}

/// Per-voxel region codes in native space.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionLabelMap {
    labels: Vec<u8>,
    shape: Dims,
    spacing: [f64; 3],
}

impl RegionLabelMap {
    pub fn new(labels: Vec<u8>, shape: Dims, spacing: [f64; 3]) -> Result<Self> {
        if labels.len() != voxel_count(shape) {
            return Err(Error::ShapeMismatch(format!("{} labels for shape {shape:?}", labels.len())));
        }
        if let Some(c) = labels.iter().find(|&&c| c > 3) {
            return Err(Error::invalid("labels", format!("code {c} outside 0..=3")));
        }
        Ok(Self { labels, shape, spacing })
    }

    pub fn shape(&self) -> Dims {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> Region {
        Region::ALL[self.labels[x + self.shape[0] * (y + self.shape[1] * z)] as usize]
    }

    pub fn count(&self, r: Region) -> usize {
        self.labels.iter().filter(|&&c| c == r.code()).count()
    }
}

const DEFAULT_TABLE: &str = include_str!("aseg_bombs.tsv");

/// Atlas subregion name to location class.
#[derive(Clone, Debug, PartialEq)]
pub struct AsegMappingTable {
    entries: BTreeMap<String, Region>,
}

impl AsegMappingTable {
    /// Parses `name<TAB>class` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, class) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("mapping line {}: expected `name<TAB>class`", n + 1)))?;
            let region = class.parse()?;
            if entries.insert(normalize_name(name), region).is_some() {
                return Err(Error::Config(format!("mapping line {}: duplicate entry `{name}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, Region)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn map(&self, subregion: &str) -> Result<Region> {
        self.entries
            .get(&normalize_name(subregion))
            .copied()
            .ok_or_else(|| Error::UnknownSubregion {
                name: subregion.to_string(),
                valid: self.entries.keys().cloned().collect::<Vec<_>>().join(", "),
            })
    }
}

impl Default for AsegMappingTable {
    fn default() -> Self {
        Self::parse(DEFAULT_TABLE).expect("bundled mapping table is valid")
    }
}

fn normalize_name(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn map_aseg_to_bombs(subregion: &str) -> Result<Region> {
    AsegMappingTable::default().map(subregion)
}

/// Region at a candidate plus the share of its 3x3x3 neighbourhood that agrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionLookup {
    pub region: Region,
    pub agreement: f64,
}

/// Label at the rounded (half-up) native voxel.
pub fn lookup_region(center: [f64; 3], map: &RegionLabelMap) -> Result<RegionLookup> {
    let shape = map.shape();
    let idx: [i64; 3] = std::array::from_fn(|i| (center[i] + 0.5).floor() as i64);
    if (0..3).any(|i| !center[i].is_finite() || idx[i] < 0 || idx[i] >= shape[i] as i64) {
        return Err(Error::CoordinateOutOfGrid { coord: center, grid: shape });
    }
    let [x, y, z] = idx.map(|v| v as usize);
    let region = map.at(x, y, z);
    let (mut agree, mut total) = (0usize, 0usize);
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let p = [idx[0] + dx, idx[1] + dy, idx[2] + dz];
                if (0..3).all(|i| p[i] >= 0 && p[i] < shape[i] as i64) {
                    total += 1;
                    agree += (map.at(p[0] as usize, p[1] as usize, p[2] as usize) == region) as usize;
                }
            }
        }
    }
    Ok(RegionLookup {
        region,
        agreement: agree as f64 / total as f64,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub lobar: usize,
    pub deep: usize,
    pub infratentorial: usize,
}

/// Outcome of anatomical filtering for one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: Vec<DetectionCandidate>,
    pub eliminated: usize,
    pub regions: RegionCounts,
}

/// Drops candidates located in the none region and tags the rest.
pub fn filter_candidates(cands: &[DetectionCandidate], map: &RegionLabelMap) -> Result<FilterReport> {
    let mut kept = Vec::with_capacity(cands.len());
    let mut regions = RegionCounts::default();
    let mut eliminated = 0;
    for c in cands {
        let r = lookup_region(c.center, map)?.region;
        match r {
            Region::None => {
                eliminated += 1;
                continue;
            }
            Region::Lobar => regions.lobar += 1,
            Region::Deep => regions.deep += 1,
            Region::Infratentorial => regions.infratentorial += 1,
        }
        kept.push(DetectionCandidate {
            region: Some(r),
            ..c.clone()
        });
    }
    Ok(FilterReport {
        kept,
        eliminated,
        regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_examples_map_to_expected_classes() {
        assert_eq!(map_aseg_to_bombs("cerebral cortex").unwrap(), Region::Lobar);
        assert_eq!(map_aseg_to_bombs("thalamus").unwrap(), Region::Deep);
        assert_eq!(map_aseg_to_bombs("lateral ventricle").unwrap(), Region::None);
        assert_eq!(map_aseg_to_bombs("internal/external capsule").unwrap(), Region::Deep);
        assert_eq!(map_aseg_to_bombs("  Brain   Stem ").unwrap(), Region::Infratentorial);
    }

    #[test]
    fn unknown_name_lists_valid_ones() {
        match map_aseg_to_bombs("pineal gland") {
            Err(Error::UnknownSubregion { valid, .. }) => assert!(valid.contains("thalamus")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn table_is_total_and_surjective() {
        let t = AsegMappingTable::default();
        // 27 atlas subregions plus the manually separated capsule.
        assert_eq!(t.len(), 28);
        let per_class = |r| t.entries().filter(|(_, c)| *c == r).count();
        assert_eq!(per_class(Region::Lobar), 10);
        assert_eq!(per_class(Region::Deep), 7);
        assert_eq!(per_class(Region::Infratentorial), 3);
        assert_eq!(per_class(Region::None), 8);
    }

    #[test]
    fn parse_rejects_duplicates_and_bad_classes() {
        assert!(AsegMappingTable::parse("a\tlobar\na\tdeep\n").is_err());
        assert!(AsegMappingTable::parse("a\tcortex\n").is_err());
        assert!(AsegMappingTable::parse("no tab here\n").is_err());
    }

    fn labelled(shape: Dims, f: impl Fn(usize, usize, usize) -> u8) -> RegionLabelMap {
        let mut labels = Vec::new();
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    labels.push(f(x, y, z));
                }
            }
        }
        RegionLabelMap::new(labels, shape, [1.0; 3]).unwrap()
    }

    fn cand(c: [f64; 3]) -> DetectionCandidate {
        DetectionCandidate {
            center: c,
            size_mm: 5.0,
            score: 0.9,
            region: None,
        }
    }

    #[test]
    fn lookup_rules() {
        let map = labelled([16, 4, 4], |x, _, _| if x == 10 { 2 } else if x >= 11 { 1 } else { 3 });
        assert_eq!(lookup_region([10.0, 1.0, 1.0], &map).unwrap().region, Region::Deep);
        let mixed = lookup_region([11.0, 1.0, 1.0], &map).unwrap();
        assert_eq!(mixed.region, Region::Lobar);
        assert!(mixed.agreement < 1.0);
        assert_eq!(lookup_region([10.5, 1.0, 1.0], &map).unwrap().region, Region::Lobar);
        assert_eq!(lookup_region([10.49, 1.0, 1.0], &map).unwrap().region, Region::Deep);
        assert!(lookup_region([15.6, 1.0, 1.0], &map).is_err());
        assert!(lookup_region([-0.6, 1.0, 1.0], &map).is_err());
    }

    #[test]
    fn filter_examples() {
        let map = labelled([10, 2, 2], |x, _, _| if x < 4 { 0 } else { 1 + (x % 3) as u8 });
        let cands: Vec<_> = [0.0, 5.0, 1.0, 7.0, 9.0].iter().map(|&x| cand([x, 0.0, 0.0])).collect();
        let r = filter_candidates(&cands, &map).unwrap();
        assert_eq!((r.kept.len(), r.eliminated), (3, 2));
        assert!(r.kept.iter().all(|c| c.region.is_some_and(|r| r != Region::None)));
        let inside: Vec<_> = cands[1..].iter().filter(|c| c.center[0] >= 4.0).cloned().collect();
        let r = filter_candidates(&inside, &map).unwrap();
        assert_eq!((r.kept.len(), r.eliminated), (3, 0));
        let r = filter_candidates(&[], &map).unwrap();
        assert!(r.kept.is_empty() && r.eliminated == 0);
    }

    #[test]
    fn report_serialises_documented_keys() {
        let map = labelled([4, 1, 1], |x, _, _| x as u8);
        let r = filter_candidates(&[cand([2.0, 0.0, 0.0]), cand([0.0, 0.0, 0.0])], &map).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["eliminated"], 1);
        assert_eq!(v["regions"]["deep"], 1);
        assert_eq!(v["kept"][0]["region"], "deep");
    }
}
