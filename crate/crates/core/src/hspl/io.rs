use std::fs::{self, File};
use std::path::Path;

use super::{FeatureVector, LossBreakdown};
use crate::error::{Error, Result};

fn create(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// CSV of feature vectors: `subject_id, x, y, z, is_cmb, v_0, ...`.
pub struct FeatureDumpWriter {
    out: csv::Writer<File>,
    n_ch: usize,
}

impl FeatureDumpWriter {
    pub fn create(path: &Path, n_ch: usize) -> Result<Self> {
        let mut out = create(path)?;
        let mut header: Vec<String> = ["subject_id", "x", "y", "z", "is_cmb"].map(String::from).to_vec();
        header.extend((0..n_ch).map(|i| format!("v_{i}")));
        out.write_record(&header)?;
        Ok(Self { out, n_ch })
    }

    pub fn write(&mut self, subject_id: &str, v: &FeatureVector) -> Result<()> {
        if v.values.len() != self.n_ch {
            return Err(Error::ShapeMismatch(format!(
                "feature vector of length {} in a {}-channel dump",
                v.values.len(),
                self.n_ch
            )));
        }
        let mut row = vec![subject_id.to_string()];
        row.extend(v.source_coord.iter().map(|c| c.to_string()));
        row.push(u8::from(v.source_is_cmb).to_string());
        row.extend(v.values.iter().map(|x| x.to_string()));
        self.out.write_record(&row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("feature dump", e))
    }
}

/// Per-step loss log: `step, L_cls, L_reg, L_con, L_final`.
pub struct LossLogWriter {
    out: csv::Writer<File>,
}

impl LossLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = create(path)?;
        out.write_record(["step", "L_cls", "L_reg", "L_con", "L_final"])?;
        Ok(Self { out })
    }

    pub fn write(&mut self, step: usize, l: &LossBreakdown) -> Result<()> {
        self.out.write_record([
            step.to_string(),
            l.l_cls.to_string(),
            l.l_reg.to_string(),
            l.l_con.to_string(),
            l.l_final.to_string(),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("loss log", e))
    }
}
