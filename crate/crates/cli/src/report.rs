use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::CliError;

pub const CONFIG: &str = "config.toml";
pub const FLIP_HISTOGRAM: &str = "flip_histogram.csv";
pub const MEMORY_USAGE: &str = "memory_usage.csv";
pub const RELOCATION_HEATMAP: &str = "relocation_heatmap.csv";
pub const PLAN_TABLE: &str = "plan_table.csv";
pub const DEFENSES: &str = "defenses.json";
pub const OUTCOME: &str = "outcome.json";
pub const FLIP_CANDIDATES: &str = "flip_candidates.tsv";

/// Named report files, written in name order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReportBundle {
    files: BTreeMap<String, String>,
}

impl ReportBundle {
    pub fn add(&mut self, name: &str, content: String) {
        self.files.insert(name.to_string(), content);
    }

    pub fn add_json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.add(name, text);
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.get(name).map(String::as_str)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        for (name, content) in &self.files {
            std::fs::write(dir.join(name), content)?;
        }
        Ok(())
    }
}
