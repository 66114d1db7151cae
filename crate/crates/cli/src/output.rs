//! Result emission: one `results.csv` and one `summary.json` per command
//! run, both written deterministically so identical configurations produce
//! identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use collabedit_core::config::RunConfig;

pub struct CommandOutput {
    dir: PathBuf,
    command: &'static str,
}

impl CommandOutput {
    pub fn new(out_dir: &Path, command: &'static str) -> anyhow::Result<Self> {
        let dir = out_dir.join(command);
        fs::create_dir_all(&dir)?;
        Ok(CommandOutput {
            dir,
            command,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_csv(&self, header: &[&str], rows: &[Vec<String>]) -> anyhow::Result<PathBuf> {
        let path = self.dir.join("results.csv");
        let mut writer = csv::Writer::from_path(&path)?;
        writer.write_record(header)?;
        for row in rows {
            writer.write_record(row)?;
        }
        writer.flush()?;
        Ok(path)
    }

    pub fn write_summary(
        &self,
        config: &RunConfig,
        results: serde_json::Value,
    ) -> anyhow::Result<PathBuf> {
        let path = self.dir.join("summary.json");
        let summary = serde_json::json!({
            "command": self.command,
            "config": config,
            "results": results,
        });
        fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")?;
        Ok(path)
    }
}

/// Shortest-round-trip decimal form; stable for identical bit patterns.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_bool(v: bool) -> String {
    if v {
        "1".into()
    } else {
        "0".into()
    }
}
