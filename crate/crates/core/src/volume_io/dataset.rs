use std::fs;
use std::path::Path;

use super::nifti::{read_label_map, read_volume, write_label_map, write_volume};
use super::{read_annotations, write_annotations, AnnotationFile, Modality, SubjectRecord};
use crate::error::{Error, Result};

/// Annotation file at the dataset root.
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const SWI_FILE: &str = "swi.nii.gz";
pub const PHASE_FILE: &str = "phase.nii.gz";
pub const T1_FILE: &str = "t1.nii.gz";
pub const LABELS_FILE: &str = "labels.nii.gz";

/// Writes `<root>/<id>/{swi,phase,t1,labels}.nii.gz` for every subject plus
/// `<root>/annotations.json`.
pub fn write_dataset(root: &Path, subjects: &[SubjectRecord]) -> Result<()> {
    let mut ann = AnnotationFile::default();
    for s in subjects {
        let dir = root.join(&s.subject_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_volume(&dir.join(SWI_FILE), &s.swi)?;
        if let Some(v) = &s.phase {
            write_volume(&dir.join(PHASE_FILE), v)?;
        }
        if let Some(v) = &s.t1 {
            write_volume(&dir.join(T1_FILE), v)?;
        }
        if let Some(m) = &s.label_map {
            write_label_map(&dir.join(LABELS_FILE), m)?;
        }
        ann.insert(&s.subject_id, &s.annotations);
    }
    write_annotations(&root.join(ANNOTATIONS_FILE), &ann)
}

/// Reads one subject directory; optional volumes are loaded when present.
pub fn read_subject(dir: &Path, annotations: &AnnotationFile) -> Result<SubjectRecord> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid("subject dir", format!("{} has no usable name", dir.display())))?
        .to_string();
    let optional = |name: &str, m: Modality| -> Result<_> {
        let p = dir.join(name);
        if p.exists() {
            read_volume(&p, m).map(Some)
        } else {
            Ok(None)
        }
    };
    let labels = dir.join(LABELS_FILE);
    let s = SubjectRecord {
        swi: read_volume(&dir.join(SWI_FILE), Modality::Swi)?,
        phase: optional(PHASE_FILE, Modality::Phase)?,
        t1: optional(T1_FILE, Modality::T1)?,
        label_map: if labels.exists() { Some(read_label_map(&labels)?) } else { None },
        annotations: annotations.get(&id)?,
        subject_id: id,
    };
    s.validate()?;
    Ok(s)
}

/// Every subject directory under `root` (sorted by name).
pub fn read_dataset(root: &Path) -> Result<Vec<SubjectRecord>> {
    let ann_path = root.join(ANNOTATIONS_FILE);
    let ann = if ann_path.exists() { read_annotations(&ann_path)? } else { AnnotationFile::default() };
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SWI_FILE).exists())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_subject(d, &ann)).collect()
}
