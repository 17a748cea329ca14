use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CMBAnnotation;
use crate::anatomical::Region;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmbEntry {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diameter_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSubject {
    pub id: String,
    #[serde(default)]
    pub cmbs: Vec<CmbEntry>,
}

/// Dataset-level annotation file, native voxel coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub subjects: Vec<AnnotatedSubject>,
}

impl AnnotationFile {
    pub fn get(&self, id: &str) -> Result<Vec<CMBAnnotation>> {
        let Some(s) = self.subjects.iter().find(|s| s.id == id) else {
            return Ok(Vec::new());
        };
        s.cmbs
            .iter()
            .map(|c| CMBAnnotation::new([c.x, c.y, c.z], c.diameter_mm, c.region))
            .collect()
    }

    pub fn insert(&mut self, id: &str, cmbs: &[CMBAnnotation]) {
        let entries = cmbs
            .iter()
            .map(|a| CmbEntry {
                x: a.center[0],
                y: a.center[1],
                z: a.center[2],
                diameter_mm: a.diameter_mm,
                region: a.region,
            })
            .collect();
        match self.subjects.iter_mut().find(|s| s.id == id) {
            Some(s) => s.cmbs = entries,
            None => self.subjects.push(AnnotatedSubject {
                id: id.to_string(),
                cmbs: entries,
            }),
        }
    }
}

pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_annotations(path: &Path, file: &AnnotationFile) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(file)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_layout() {
        let text = r#"{"subjects":[{"id":"s1","cmbs":[{"x":10,"y":12,"z":8,"diameter_mm":4.0,"region":"deep"}]},{"id":"n1","cmbs":[]}]}"#;
        let f: AnnotationFile = serde_json::from_str(text).unwrap();
        let a = f.get("s1").unwrap();
        assert_eq!(a[0].center, [10.0, 12.0, 8.0]);
        assert_eq!(a[0].region, Some(Region::Deep));
        assert!(f.get("n1").unwrap().is_empty());
        assert!(f.get("missing").unwrap().is_empty());
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ann.json");
        let mut f = AnnotationFile::default();
        f.insert("a", &[CMBAnnotation::new([1.0, 2.0, 3.0], None, Some(Region::Lobar)).unwrap()]);
        write_annotations(&p, &f).unwrap();
        assert_eq!(read_annotations(&p).unwrap(), f);
    }
}
