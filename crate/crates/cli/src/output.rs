use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

/// Formats a float with enough digits to round-trip.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::Write {
            path: root.display().to_string(),
            source: e,
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Write {
            path: path.display().to_string(),
            source: e,
        })?;
        self.written.push(path);
        Ok(())
    }

    /// CSV preceded by `# schema` and `# key = value` comment lines.
    pub fn csv(&mut self, name: &str, table: &Table) -> Result<(), CliError> {
        let mut buf = format!("# schema = {}\n", table.schema).into_bytes();
        for (key, value) in &table.meta {
            buf.extend_from_slice(format!("# {key} = {value}\n").as_bytes());
        }
        let mut writer = csv::Writer::from_writer(buf);
        writer.write_record(&table.header)?;
        for row in &table.rows {
            writer.write_record(row)?;
        }
        let buf = writer.into_inner().map_err(|e| CliError::Write {
            path: name.to_string(),
            source: e.into_error(),
        })?;
        self.put(name, &buf)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.put(name, text.as_bytes())
    }
}

pub struct Table {
    schema: &'static str,
    meta: Vec<(String, String)>,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(schema: &'static str, header: impl IntoIterator<Item = S>) -> Self {
        Self {
            schema,
            meta: Vec::new(),
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }
}
