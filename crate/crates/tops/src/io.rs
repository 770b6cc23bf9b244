//! Reading streams from disk.

use std::fs;
use std::path::Path;

use tops_core::workload::DatasetProfile;

use crate::error::{Result, ToolError};

/// Which column of a CSV file holds the readings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnSelector {
    /// 0-based position; the first row is data.
    Index(usize),
    /// Header name; the first row is a header.
    Name(String),
}

impl ColumnSelector {
    /// A number selects by position, anything else by header name.
    pub fn parse(text: &str) -> Self {
        match text.parse::<usize>() {
            Ok(i) => ColumnSelector::Index(i),
            Err(_) => ColumnSelector::Name(text.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum StreamFormat {
    /// One value per line; blank lines are skipped.
    #[default]
    Lines,
    Csv(ColumnSelector),
}

#[derive(Debug, Clone)]
pub struct LoadedStream {
    pub values: Vec<f64>,
    pub profile: DatasetProfile,
}

fn parse_reading(path: &Path, line: u64, text: &str) -> Result<f64> {
    let text = text.trim();
    let v: f64 = text.parse().map_err(|_| ToolError::BadRow {
        path: path.to_path_buf(),
        line,
        reason: format!("{text:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(ToolError::BadRow {
            path: path.to_path_buf(),
            line,
            reason: format!("{text:?} is not finite"),
        });
    }
    if v < 0.0 {
        return Err(ToolError::BadRow {
            path: path.to_path_buf(),
            line,
            reason: format!("negative reading {v}"),
        });
    }
    Ok(v)
}

fn read_lines(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|source| ToolError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        values.push(parse_reading(path, i as u64 + 1, line)?);
    }
    Ok(values)
}

fn read_csv_column(path: &Path, column: &ColumnSelector) -> Result<Vec<f64>> {
    let unreadable = |source: std::io::Error| ToolError::Unreadable {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(unreadable)?;
    let has_header = matches!(column, ColumnSelector::Name(_));
    let mut reader = csv::ReaderBuilder::new().has_headers(has_header).flexible(true).from_reader(file);
    let index = match column {
        ColumnSelector::Index(i) => *i,
        ColumnSelector::Name(name) => {
            let headers = reader.headers().map_err(|e| ToolError::BadRow {
                path: path.to_path_buf(),
                line: 1,
                reason: e.to_string(),
            })?;
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| ToolError::config(format!("{} has no column named {name:?}", path.display())))?
        }
    };
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            match e.into_kind() {
                csv::ErrorKind::Io(source) => unreadable(source),
                kind => ToolError::BadRow {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("{kind:?}"),
                },
            }
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = record.get(index).ok_or_else(|| ToolError::BadRow {
            path: path.to_path_buf(),
            line,
            reason: format!("row has no column {index}"),
        })?;
        values.push(parse_reading(path, line, field)?);
    }
    Ok(values)
}

/// Read every reading from `path` and profile it.
pub fn load_stream(path: &Path, format: &StreamFormat) -> Result<LoadedStream> {
    let values = match format {
        StreamFormat::Lines => read_lines(path)?,
        StreamFormat::Csv(column) => read_csv_column(path, column)?,
    };
    if values.is_empty() {
        return Err(ToolError::Empty { path: path.to_path_buf() });
    }
    let profile = DatasetProfile::from_values(&values)?;
    Ok(LoadedStream { values, profile })
}

/// Write one value per line.
pub fn write_lines(path: &Path, values: &[f64]) -> Result<()> {
    let mut text = String::with_capacity(values.len() * 8);
    for v in values {
        text.push_str(&v.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| ToolError::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}
