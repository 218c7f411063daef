use std::path::Path;

use crate::error::{MftpError, Result};

pub const SCHEMA_VERSION: &str = "1";

pub fn num(v: f64) -> String {
    v.to_string()
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// CSV writer whose first column is `schema_version`.
pub struct Table {
    w: csv::Writer<std::fs::File>,
    path: std::path::PathBuf,
}

impl Table {
    pub fn create(path: &Path, columns: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["schema_version"];
        header.extend_from_slice(columns);
        w.write_record(&header)?;
        Ok(Table { w, path: path.to_path_buf() })
    }

    pub fn row(&mut self, fields: Vec<String>) -> Result<()> {
        let mut rec = Vec::with_capacity(fields.len() + 1);
        rec.push(SCHEMA_VERSION.to_string());
        rec.extend(fields);
        self.w.write_record(&rec)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| MftpError::io(&self.path, e))
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| MftpError::io(path, e))
}
