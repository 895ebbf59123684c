use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::DatasetTable;
use crate::molgraph::{smiles_scaffold_key, ParseError};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("split fractions {0:?} must each be > 0 and sum to 1")]
    BadFractions([f64; 3]),
    #[error("cannot split an empty table")]
    Empty,
    #[error("scaffold split: row {row} ({smiles:?}) does not parse: {source}")]
    Unparseable { row: usize, smiles: String, source: ParseError },
    #[error("writing split files: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing split files: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMethod {
    Random,
    Stratified,
    Scaffold,
}

impl std::str::FromStr for SplitMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "stratified" => Ok(Self::Stratified),
            "scaffold" => Ok(Self::Scaffold),
            other => Err(format!("unknown split method {other:?} (expected random, stratified or scaffold)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub method: SplitMethod,
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(method: SplitMethod, seed: u64) -> Self {
        Self { method, fractions: [0.8, 0.1, 0.1], seed }
    }

    pub fn validate(&self) -> Result<(), SplitError> {
        let f = self.fractions;
        if f.iter().any(|&x| x.is_nan() || x <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SplitError::BadFractions(f));
        }
        Ok(())
    }
}

/// Row indices into the source table for each part.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    /// Scaffold key per source row, when the scaffold method was used.
    pub scaffold_keys: Option<Vec<String>>,
    pub warnings: Vec<String>,
}

impl Split {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.train, &self.valid, &self.test]
    }
}

pub fn split(table: &DatasetTable, spec: &SplitSpec) -> Result<Split, SplitError> {
    spec.validate()?;
    if table.is_empty() {
        return Err(SplitError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.method {
        SplitMethod::Random => {
            let mut idx: Vec<usize> = (0..table.len()).collect();
            idx.shuffle(&mut rng);
            Ok(slice_in_order(&idx, spec.fractions))
        }
        SplitMethod::Stratified => Ok(stratified(table, spec.fractions, &mut rng)),
        SplitMethod::Scaffold => scaffold(table, spec.fractions),
    }
}

fn slice_in_order(idx: &[usize], f: [f64; 3]) -> Split {
    let n = idx.len();
    let n_train = ((n as f64 * f[0]).round() as usize).min(n);
    let n_valid = ((n as f64 * f[1]).round() as usize).min(n - n_train);
    Split {
        train: idx[..n_train].to_vec(),
        valid: idx[n_train..n_train + n_valid].to_vec(),
        test: idx[n_train + n_valid..].to_vec(),
        ..Default::default()
    }
}

/// Groups rows by their full label profile, shuffles each group, and deals
/// the concatenated groups out so every prefix stays proportional to the
/// fractions. Each group is therefore spread evenly over the three parts.
fn stratified(table: &DatasetTable, f: [f64; 3], rng: &mut ChaCha8Rng) -> Split {
    let mut groups: BTreeMap<Vec<Option<bool>>, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.records.iter().enumerate() {
        groups.entry(r.labels.clone()).or_default().push(i);
    }
    let mut out = Split::default();
    let mut dealt = 0usize;
    for rows in groups.values_mut() {
        rows.shuffle(rng);
        for &row in rows.iter() {
            dealt += 1;
            let counts = [out.train.len(), out.valid.len(), out.test.len()];
            let part = (0..3)
                .max_by(|&a, &b| {
                    let da = f[a] * dealt as f64 - counts[a] as f64;
                    let db = f[b] * dealt as f64 - counts[b] as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .unwrap();
            [&mut out.train, &mut out.valid, &mut out.test][part].push(row);
        }
    }
    out
}

/// Whole scaffold groups, largest first (ties by key), fill train, then
/// validation, then test.
fn scaffold(table: &DatasetTable, f: [f64; 3]) -> Result<Split, SplitError> {
    let mut keys = Vec::with_capacity(table.len());
    for r in &table.records {
        let key = smiles_scaffold_key(&r.smiles).map_err(|source| SplitError::Unparseable {
            row: r.source_row,
            smiles: r.smiles.clone(),
            source,
        })?;
        keys.push(key.0);
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k.as_str()).or_default().push(i);
    }
    let mut ordered: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    ordered.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));

    let n = table.len() as f64;
    let train_cap = f[0] * n;
    let valid_cap = (f[0] + f[1]) * n;
    let mut out = Split::default();
    for (key, rows) in ordered {
        let g = rows.len();
        if (out.train.len() + g) as f64 <= train_cap {
            out.train.extend(rows);
        } else if out.train.is_empty() {
            out.warnings.push(format!(
                "scaffold group {key:?} has {g} rows, more than the train allocation of {train_cap:.0}; placed in train"
            ));
            out.train.extend(rows);
        } else if (out.train.len() + out.valid.len() + g) as f64 <= valid_cap {
            out.valid.extend(rows);
        } else {
            out.test.extend(rows);
        }
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    out.scaffold_keys = Some(keys);
    Ok(out)
}

/// Writes `train.csv`, `valid.csv` and `test.csv` with the original columns,
/// plus `scaffold_key` when the split computed one.
pub fn write_split_csvs(table: &DatasetTable, split: &Split, dir: &Path) -> Result<(), SplitError> {
    std::fs::create_dir_all(dir)?;
    for (name, rows) in ["train.csv", "valid.csv", "test.csv"].iter().zip(split.parts()) {
        let mut w = csv::Writer::from_path(dir.join(name))?;
        let mut header = table.header.clone();
        if split.scaffold_keys.is_some() {
            header.push("scaffold_key".into());
        }
        w.write_record(&header)?;
        for &i in rows {
            let mut row = table.records[i].raw.clone();
            if let Some(keys) = &split.scaffold_keys {
                row.push(keys[i].clone());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_csv_bytes, LoadOptions};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn toy(n: usize) -> DatasetTable {
        let mut text = String::from("smiles,y\n");
        let rings = ["c1ccccc1", "C1CCCCC1", "c1ccncc1", "C1CCOC1", "c1ccc2ccccc2c1"];
        for i in 0..n {
            text.push_str(&format!("{}{},{}\n", "C".repeat(i % 4 + 1), rings[i % rings.len()], (i % 3 == 0) as u8));
        }
        load_csv_bytes(text.as_bytes(), &LoadOptions::default()).unwrap()
    }

    fn assert_partition(s: &Split, n: usize) {
        let all: Vec<usize> = s.parts().iter().flat_map(|p| p.iter().copied()).collect();
        assert_eq!(all.len(), n);
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), n);
    }

    #[test]
    fn random_ten_rows_is_eight_one_one() {
        let t = toy(10);
        let a = split(&t, &SplitSpec::new(SplitMethod::Random, 4)).unwrap();
        let b = split(&t, &SplitSpec::new(SplitMethod::Random, 4)).unwrap();
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (8, 1, 1));
        assert_eq!(a, b);
        assert_partition(&a, 10);
    }

    #[test]
    fn shared_scaffold_stays_together() {
        let text = "smiles,y\nCc1ccccc1,1\nCCc1ccccc1,0\nCCCC,1\nC1CCCCC1,0\nOCC1CCCC1,1\n";
        let t = load_csv_bytes(text.as_bytes(), &LoadOptions::default()).unwrap();
        for seed in 0..5 {
            let s = split(&t, &SplitSpec { method: SplitMethod::Scaffold, fractions: [0.4, 0.3, 0.3], seed }).unwrap();
            let together = s.parts().iter().any(|p| p.contains(&0) && p.contains(&1));
            assert!(together);
        }
    }

    #[test]
    fn oversized_group_warns() {
        let text = "smiles,y\nCc1ccccc1,1\nCCc1ccccc1,0\nOc1ccccc1,1\nC1CC1,0\n";
        let t = load_csv_bytes(text.as_bytes(), &LoadOptions::default()).unwrap();
        let s = split(&t, &SplitSpec { method: SplitMethod::Scaffold, fractions: [0.5, 0.25, 0.25], seed: 0 }).unwrap();
        assert_eq!(s.train, vec![0, 1, 2]);
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn bad_fractions_rejected() {
        let t = toy(5);
        let spec = SplitSpec { method: SplitMethod::Random, fractions: [0.8, 0.2, 0.0], seed: 0 };
        assert!(matches!(split(&t, &spec), Err(SplitError::BadFractions(_))));
    }

    #[test]
    fn writes_three_files_with_keys() {
        let t = toy(20);
        let s = split(&t, &SplitSpec::new(SplitMethod::Scaffold, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_split_csvs(&t, &s, dir.path()).unwrap();
        let train = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
        assert!(train.starts_with("smiles,y,scaffold_key\n"));
        assert_eq!(train.lines().count(), s.train.len() + 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn all_methods_partition(n in 3usize..80, seed in any::<u64>(), m in 0usize..3) {
            let t = toy(n);
            let method = [SplitMethod::Random, SplitMethod::Stratified, SplitMethod::Scaffold][m];
            let s = split(&t, &SplitSpec::new(method, seed)).unwrap();
            assert_partition(&s, n);
            if let Some(keys) = &s.scaffold_keys {
                let sets: Vec<HashSet<&String>> = s.parts().iter().map(|p| p.iter().map(|&i| &keys[i]).collect()).collect();
                prop_assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
            }
        }
    }
}
