use std::path::PathBuf;

use crate::error::CliError;

/// Writes report files into an optional directory.
pub struct Reporter {
    dir: Option<PathBuf>,
}

impl Reporter {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir }
    }

    /// Returns the written path, or `None` when no report directory is set.
    pub fn write(&self, file_name: &str, contents: &str) -> Result<Option<PathBuf>, CliError> {
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(file_name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(Some(path))
    }

    pub fn write_json<T: serde::Serialize>(&self, file_name: &str, value: &T) -> Result<Option<PathBuf>, CliError> {
        let json = serde_json::to_string_pretty(value).expect("report types serialize");
        self.write(file_name, &(json + "\n"))
    }
}
