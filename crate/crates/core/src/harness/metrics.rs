use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logging point. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub real_step: u64,
    pub epoch: u64,
    pub eval_return: f64,
    pub model_train_loss: f64,
    pub model_val_loss: f64,
    pub compounding_error_5: f64,
    pub compounding_error_10: f64,
    pub compounding_error_20: f64,
    pub w1_estimate: f64,
    pub gradient_penalty: f64,
    pub adaptation_steps: u64,
    pub wall_clock_seconds: f64,
}

pub const CSV_HEADER: [&str; 12] = [
    "real_step",
    "epoch",
    "eval_return",
    "model_train_loss",
    "model_val_loss",
    "compounding_error_5",
    "compounding_error_10",
    "compounding_error_20",
    "w1_estimate",
    "gradient_penalty",
    "adaptation_steps",
    "wall_clock_seconds",
];

/// Streams records to a CSV file, flushing after every row so a failed run
/// still leaves everything logged so far.
pub struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        writer.write_record(CSV_HEADER)?;
        writer.flush()?;
        Ok(CsvSink { path: path.to_path_buf(), writer })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.writer.serialize(rec)?;
        self.writer.flush()?;
        Ok(())
    }

    /// Appends `# error: <class>: <message>` after the rows written so far.
    pub fn append_error(mut self, err: &Error) -> Result<()> {
        self.writer.flush()?;
        drop(self.writer);
        let mut f = std::fs::OpenOptions::new().append(true).open(&self.path)?;
        let msg = err.to_string().replace('\n', " ");
        writeln!(f, "# error: {}: {msg}", err.class())?;
        self.writer = csv::WriterBuilder::new().from_writer(f);
        Ok(())
    }
}

/// Reads records back, skipping comment lines.
pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
