use super::{LoadOptions, SplitMethod};

/// A named dataset protocol: which file, which columns, which split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    /// Dataset name as accepted by [`super::fetch_dataset`].
    pub dataset: &'static str,
    pub smiles_column: &'static str,
    /// `None` infers every binary column.
    pub task_columns: Option<&'static [&'static str]>,
    pub split: SplitMethod,
    /// Trains on the whole dataset (minus a validation slice) and tests on
    /// a separately supplied file.
    pub external_test: bool,
    pub description: &'static str,
}

const TOX21_TASKS: [&str; 12] = [
    "NR-AR",
    "NR-AR-LBD",
    "NR-AhR",
    "NR-Aromatase",
    "NR-ER",
    "NR-ER-LBD",
    "NR-PPAR-gamma",
    "SR-ARE",
    "SR-ATAD5",
    "SR-HSE",
    "SR-MMP",
    "SR-p53",
];

pub const PRESETS: [Preset; 6] = [
    Preset {
        name: "tox21-phase1",
        dataset: "tox21",
        smiles_column: "smiles",
        task_columns: Some(&TOX21_TASKS),
        split: SplitMethod::Random,
        external_test: false,
        description: "Tox21, 12 tasks, random 80/10/10 split",
    },
    Preset {
        name: "tox21-score",
        dataset: "tox21",
        smiles_column: "smiles",
        task_columns: Some(&TOX21_TASKS),
        split: SplitMethod::Random,
        external_test: true,
        description: "Tox21, train on all labelled data with a validation slice, test on the score set (--score-csv)",
    },
    Preset {
        name: "bbbp-scaffold",
        dataset: "bbbp",
        smiles_column: "smiles",
        task_columns: Some(&["p_np"]),
        split: SplitMethod::Scaffold,
        external_test: false,
        description: "BBBP, single task, scaffold split",
    },
    Preset {
        name: "clintox-random",
        dataset: "clintox",
        smiles_column: "smiles",
        task_columns: Some(&["FDA_APPROVED", "CT_TOX"]),
        split: SplitMethod::Random,
        external_test: false,
        description: "ClinTox, 2 tasks, random split",
    },
    Preset {
        name: "hiv-scaffold",
        dataset: "hiv",
        smiles_column: "smiles",
        task_columns: Some(&["HIV_active"]),
        split: SplitMethod::Scaffold,
        external_test: false,
        description: "HIV, single task, scaffold split",
    },
    Preset {
        name: "sider-random",
        dataset: "sider",
        smiles_column: "smiles",
        task_columns: None,
        split: SplitMethod::Random,
        external_test: false,
        description: "SIDER, 27 tasks, random split",
    },
];

impl Preset {
    pub fn find(name: &str) -> Option<&'static Preset> {
        PRESETS.iter().find(|p| p.name == name)
    }

    pub fn load_options(&self, max_seq_len: usize) -> LoadOptions {
        LoadOptions {
            smiles_column: self.smiles_column.to_string(),
            task_columns: self.task_columns.map(|c| c.iter().map(|s| s.to_string()).collect()),
            max_seq_len,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_datasets_known() {
        for (i, p) in PRESETS.iter().enumerate() {
            assert!(super::super::DATASET_NAMES.contains(&p.dataset));
            assert!(PRESETS[i + 1..].iter().all(|q| q.name != p.name));
        }
        assert_eq!(Preset::find("tox21-phase1").unwrap().task_columns.unwrap().len(), 12);
        assert!(Preset::find("nope").is_none());
    }

    #[test]
    fn stratified_is_never_a_preset_default() {
        assert!(PRESETS.iter().all(|p| p.split != SplitMethod::Stratified));
    }
}
