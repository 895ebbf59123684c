//! MoleculeNet-style CSV ingestion, label statistics and dataset splits.

mod fetch;
mod presets;
mod split;

pub use fetch::{
    dataset_file_name, fetch_dataset, fetch_dataset_from, sha256_hex, FetchError, FetchOutcome, DATASET_NAMES,
    DEFAULT_BASE_URL,
};
pub use presets::{Preset, PRESETS};
pub use split::{split, write_split_csvs, Split, SplitError, SplitMethod, SplitSpec};

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::parse_smiles;
use crate::tokenizer::{segment, TokenizeMode, DEFAULT_MAX_SEQ_LEN};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    UnreadableFile { path: PathBuf, source: std::io::Error },
    #[error("malformed CSV in {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("column {column:?} not found; header is {header:?}")]
    MissingColumn { column: String, header: Vec<String> },
    #[error("row {row}, column {column:?}: label {value:?} is not 0 or 1")]
    InvalidLabel { row: usize, column: String, value: String },
    #[error("no task columns found")]
    NoTasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoleculeRecord {
    pub smiles: String,
    pub labels: Vec<Option<bool>>,
    /// 1-based data row in the source file (header excluded).
    pub source_row: usize,
    /// The full original row, for writing splits back out.
    pub raw: Vec<String>,
}

/// A row that was not ingested, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRow {
    pub source_row: usize,
    pub smiles: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCounts {
    pub positives: usize,
    pub negatives: usize,
    pub missing: usize,
}

impl LabelCounts {
    /// Negatives per positive; `None` when there are no positives.
    pub fn neg_per_pos(&self) -> Option<f64> {
        (self.positives > 0).then(|| self.negatives as f64 / self.positives as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetTable {
    pub header: Vec<String>,
    pub smiles_column: String,
    pub task_names: Vec<String>,
    pub records: Vec<MoleculeRecord>,
    pub dropped: Vec<DroppedRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub smiles_column: String,
    /// Task columns; `None` picks every other column whose non-empty
    /// cells are all 0 or 1.
    pub task_columns: Option<Vec<String>>,
    pub max_seq_len: usize,
    pub tokenize_mode: TokenizeMode,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            smiles_column: "smiles".into(),
            task_columns: None,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            tokenize_mode: TokenizeMode::TwoCharAtoms,
        }
    }
}

fn parse_label(cell: &str) -> Result<Option<bool>, ()> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(0.0) => Ok(Some(false)),
        Ok(1.0) => Ok(Some(true)),
        _ => Err(()),
    }
}

pub fn load_csv(path: &Path, opts: &LoadOptions) -> Result<DatasetTable, LoadError> {
    let bytes = std::fs::read(path).map_err(|source| LoadError::UnreadableFile { path: path.to_path_buf(), source })?;
    load_csv_bytes(&bytes, opts).map_err(|e| match e {
        LoadError::Csv { source, .. } => LoadError::Csv { path: path.to_path_buf(), source },
        other => other,
    })
}

/// Parses CSV content already in memory; see [`load_csv`].
pub fn load_csv_bytes(bytes: &[u8], opts: &LoadOptions) -> Result<DatasetTable, LoadError> {
    let csv_err = |source| LoadError::Csv { path: PathBuf::new(), source };
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(bytes);
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    let rows: Vec<Vec<String>> = reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .map_err(csv_err)?;
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LoadError::MissingColumn { column: name.to_string(), header: header.clone() })
    };
    let smiles_idx = column(&opts.smiles_column)?;
    let task_idx: Vec<usize> = match &opts.task_columns {
        Some(names) => names.iter().map(|n| column(n)).collect::<Result<_, _>>()?,
        None => (0..header.len())
            .filter(|&c| c != smiles_idx)
            .filter(|&c| {
                rows.iter().all(|r| parse_label(&r[c]).is_ok()) && rows.iter().any(|r| !r[c].trim().is_empty())
            })
            .collect(),
    };
    if task_idx.is_empty() {
        return Err(LoadError::NoTasks);
    }

    let mut records = Vec::with_capacity(rows.len());
    let mut dropped = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        let source_row = i + 1;
        let smiles = row[smiles_idx].trim().to_string();
        let mut labels = Vec::with_capacity(task_idx.len());
        for &c in &task_idx {
            labels.push(parse_label(&row[c]).map_err(|_| LoadError::InvalidLabel {
                row: source_row,
                column: header[c].clone(),
                value: row[c].clone(),
            })?);
        }
        let reason = if labels.iter().all(Option::is_none) {
            Some("no labels present".to_string())
        } else {
            check_smiles(&smiles, opts).err()
        };
        match reason {
            Some(reason) => dropped.push(DroppedRow { source_row, smiles, reason }),
            None => records.push(MoleculeRecord { smiles, labels, source_row, raw: row }),
        }
    }
    if !dropped.is_empty() {
        log::warn!("dropped {} of {} rows", dropped.len(), records.len() + dropped.len());
    }
    Ok(DatasetTable {
        task_names: task_idx.iter().map(|&c| header[c].clone()).collect(),
        smiles_column: opts.smiles_column.clone(),
        header,
        records,
        dropped,
    })
}

fn check_smiles(smiles: &str, opts: &LoadOptions) -> Result<(), String> {
    let tokens = segment(smiles, opts.tokenize_mode).map_err(|e| e.to_string())?;
    if tokens.len() > opts.max_seq_len {
        return Err(format!("{} tokens exceeds max_seq_len {}", tokens.len(), opts.max_seq_len));
    }
    parse_smiles(smiles).map_err(|e| e.to_string())?;
    Ok(())
}

impl DatasetTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn smiles(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.smiles.as_str()).collect()
    }

    /// Label counts per task, optionally restricted to `rows`.
    pub fn task_counts(&self, rows: Option<&[usize]>) -> Vec<LabelCounts> {
        let mut counts = vec![LabelCounts::default(); self.num_tasks()];
        let mut tally = |r: &MoleculeRecord| {
            for (c, l) in counts.iter_mut().zip(&r.labels) {
                match l {
                    Some(true) => c.positives += 1,
                    Some(false) => c.negatives += 1,
                    None => c.missing += 1,
                }
            }
        };
        match rows {
            Some(idx) => idx.iter().for_each(|&i| tally(&self.records[i])),
            None => self.records.iter().for_each(tally),
        }
        counts
    }

    /// Totals over all tasks' present labels.
    pub fn aggregate_counts(&self, rows: Option<&[usize]>) -> LabelCounts {
        self.task_counts(rows).iter().fold(LabelCounts::default(), |acc, c| LabelCounts {
            positives: acc.positives + c.positives,
            negatives: acc.negatives + c.negatives,
            missing: acc.missing + c.missing,
        })
    }

    /// A new table holding the given rows, in order.
    pub fn subset(&self, rows: &[usize]) -> DatasetTable {
        DatasetTable {
            header: self.header.clone(),
            smiles_column: self.smiles_column.clone(),
            task_names: self.task_names.clone(),
            records: rows.iter().map(|&i| self.records[i].clone()).collect(),
            dropped: Vec::new(),
        }
    }

    /// A table restricted to one task; rows missing that label are removed.
    pub fn single_task(&self, task: usize) -> DatasetTable {
        let records = self
            .records
            .iter()
            .filter(|r| r.labels[task].is_some())
            .map(|r| MoleculeRecord { labels: vec![r.labels[task]], ..r.clone() })
            .collect();
        DatasetTable {
            header: self.header.clone(),
            smiles_column: self.smiles_column.clone(),
            task_names: vec![self.task_names[task].clone()],
            records,
            dropped: Vec::new(),
        }
    }

    /// Appends `other`'s records; both tables must share task names.
    pub fn concat(&self, other: &DatasetTable) -> Option<DatasetTable> {
        if self.task_names != other.task_names {
            return None;
        }
        let mut out = self.clone();
        out.records.extend(other.records.iter().cloned());
        out.dropped.extend(other.dropped.iter().cloned());
        Some(out)
    }

    /// Distinct SMILES count; duplicates are kept as separate records.
    pub fn unique_smiles(&self) -> usize {
        self.records.iter().map(|r| r.smiles.as_str()).collect::<HashSet<_>>().len()
    }
}
