//! Output files are built in memory, checked against their schema and only
//! then written; a failed write removes whatever was already written.

use std::fs;
use std::path::{Path, PathBuf};

use coral_core::ingest::{parse_pgm, read_correspondences, write_pgm, Grid, PgmEncoding};
use serde_json::Value;

use crate::CliError;

pub const SCHEMA_VERSION: u64 = 1;

pub const TRACE_HEADER: &str = "iteration,data,smoothness,label_cost,total";

enum Kind {
    /// Object with `schema_version` and these keys.
    Json(&'static [&'static str]),
    /// Header line and rows with as many fields.
    Csv(&'static str),
    Pgm,
    Correspondences,
    Toml,
}

#[derive(Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>, Kind)>,
}

impl Outputs {
    pub fn json(&mut self, name: &str, mut value: Value, required: &'static [&'static str]) {
        value["schema_version"] = Value::from(SCHEMA_VERSION);
        let mut bytes = serde_json::to_vec_pretty(&value).expect("JSON values serialize");
        bytes.push(b'\n');
        self.files.push((name.into(), bytes, Kind::Json(required)));
    }

    pub fn csv(&mut self, name: &str, header: &'static str, rows: &[String]) {
        let mut text = String::from(header);
        text.push('\n');
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        self.files.push((name.into(), text.into_bytes(), Kind::Csv(header)));
    }

    pub fn pgm(&mut self, name: &str, grid: &Grid, encoding: PgmEncoding) {
        let mut bytes = Vec::new();
        write_pgm(&mut bytes, grid, encoding).expect("grid shape is consistent");
        self.files.push((name.into(), bytes, Kind::Pgm));
    }

    pub fn correspondences(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes, Kind::Correspondences));
    }

    pub fn toml(&mut self, name: &str, text: String) {
        self.files.push((name.into(), text.into_bytes(), Kind::Toml));
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, bytes, kind) in &self.files {
            check(bytes, kind).map_err(|e| format!("{name} fails its schema: {e}"))?;
        }
        Ok(())
    }

    pub fn commit(self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        self.validate().map_err(CliError::Runtime)?;
        let mut written: Vec<PathBuf> = Vec::new();
        let result = (|| {
            for (name, bytes, _) in &self.files {
                let path = dir.join(name);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
                }
                written.push(path.clone());
                fs::write(&path, bytes).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            Ok::<(), String>(())
        })();
        match result {
            Ok(()) => Ok(written),
            Err(e) => {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                Err(CliError::Runtime(e))
            }
        }
    }
}

fn check(bytes: &[u8], kind: &Kind) -> Result<(), String> {
    match kind {
        Kind::Json(required) => {
            let v: Value = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
            if v.get("schema_version").and_then(Value::as_u64) != Some(SCHEMA_VERSION) {
                return Err("missing schema_version".into());
            }
            for key in *required {
                if v.get(key).is_none() {
                    return Err(format!("missing key {key:?}"));
                }
            }
            Ok(())
        }
        Kind::Csv(header) => {
            let text = std::str::from_utf8(bytes).map_err(|e| e.to_string())?;
            let mut lines = text.lines();
            if lines.next() != Some(header) {
                return Err("unexpected header".into());
            }
            let width = header.split(',').count();
            for (i, line) in lines.enumerate() {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != width || fields.iter().any(|f| f.is_empty()) {
                    return Err(format!("row {} has malformed fields", i + 1));
                }
            }
            Ok(())
        }
        Kind::Pgm => parse_pgm(bytes).map(|_| ()).map_err(|e| e.to_string()),
        Kind::Correspondences => read_correspondences(bytes).map(|_| ()).map_err(|e| e.to_string()),
        Kind::Toml => {
            let text = std::str::from_utf8(bytes).map_err(|e| e.to_string())?;
            toml::from_str::<toml::Table>(text).map(|_| ()).map_err(|e| e.to_string())
        }
    }
}

/// One `energy_trace.csv` row per outer iteration.
pub fn trace_rows(trace: &[coral_core::solver::EnergyTriple]) -> Vec<String> {
    trace
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{i},{},{},{},{}", e.data, e.smoothness, e.label_cost, e.total()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn rejects_malformed_outputs() {
        assert!(check(b"{\"a\":1}", &Kind::Json(&["a"])).is_err());
        assert!(check(b"{\"schema_version\":1}", &Kind::Json(&["a"])).is_err());
        assert!(check(b"{\"schema_version\":1,\"a\":1}", &Kind::Json(&["a"])).is_ok());
        assert!(check(b"x,y\n1,2\n", &Kind::Csv("x,y")).is_ok());
        assert!(check(b"x,y\n1\n", &Kind::Csv("x,y")).is_err());
        assert!(check(b"x,y\n1,\n", &Kind::Csv("x,y")).is_err());
    }

    #[test]
    fn failed_commit_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::default();
        out.json("a.json", json!({}), &[]);
        // A directory where a file should go makes the second write fail.
        fs::create_dir(dir.path().join("b.csv")).unwrap();
        out.csv("b.csv", "x", &["1".into()]);
        assert!(matches!(out.commit(dir.path()), Err(CliError::Runtime(_))));
        assert!(!dir.path().join("a.json").exists());
    }
}
