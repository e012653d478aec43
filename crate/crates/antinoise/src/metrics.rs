//! Per-epoch metrics rows and CSV output.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// One row of named metric values. Column order is the insertion order of
/// the first row and must stay consistent across a run.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub values: Vec<(String, f64)>,
}

impl MetricsRow {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

/// Writes metrics rows to a CSV file as they arrive.
pub struct CsvLogger {
    file: std::fs::File,
    header: Option<Vec<String>>,
}

impl CsvLogger {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Self { file: std::fs::File::create(path)?, header: None })
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        let keys: Vec<String> = row.values.iter().map(|(k, _)| k.clone()).collect();
        match &self.header {
            None => {
                let mut line = String::from("epoch");
                for k in &keys {
                    line.push(',');
                    line.push_str(k);
                }
                writeln!(self.file, "{line}")?;
                self.header = Some(keys);
            }
            Some(h) => {
                if *h != keys {
                    return Err(Error::Config(format!(
                        "metrics columns changed mid-run: {h:?} vs {keys:?}"
                    )));
                }
            }
        }
        let mut line = row.epoch.to_string();
        for (_, v) in &row.values {
            line.push(',');
            line.push_str(&format_value(*v));
        }
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        Ok(())
    }
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        // Shortest round-trip representation: deterministic for equal floats.
        format!("{v}")
    }
}

/// Writes a simple rectangular CSV in one shot.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{}", header.join(","))?;
    for row in rows {
        writeln!(file, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut log = CsvLogger::create(&path).unwrap();
        for epoch in 0..2 {
            log.write_row(&MetricsRow {
                epoch,
                values: vec![("lr".into(), 0.1), ("acc".into(), 0.5 + epoch as f64)],
            })
            .unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,lr,acc");
        assert_eq!(lines[1], "0,0.1,0.5");
        assert_eq!(lines[2], "1,0.1,1.5");
    }

    #[test]
    fn changed_columns_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = CsvLogger::create(&dir.path().join("m.csv")).unwrap();
        log.write_row(&MetricsRow { epoch: 0, values: vec![("a".into(), 1.0)] })
            .unwrap();
        let err = log.write_row(&MetricsRow { epoch: 1, values: vec![("b".into(), 1.0)] });
        assert!(err.is_err());
    }
}
