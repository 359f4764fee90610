//! CSV formatting, the atomic output set and the run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use quadlab::dynamics::State12;

use crate::config::RunConfig;
use crate::{CliError, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;
/// Manifest fields that differ between otherwise identical runs.
pub const MANIFEST_VOLATILE_FIELDS: [&str; 2] = ["started_at", "finished_at"];

pub const STATE_HEADER: &str = "t,x,y,z,roll,pitch,yaw,vx,vy,vz,wx,wy,wz";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:?}")
    }
}

/// Rounded to 9 significant digits, then printed as [`fmt_f64`] does.
pub fn fmt_sig9(v: f64) -> String {
    if !v.is_finite() {
        return fmt_f64(v);
    }
    let rounded: f64 = format!("{v:.8e}").parse().expect("scientific notation parses");
    fmt_f64(rounded)
}

/// Builds CSV text row by row.
#[derive(Debug, Clone)]
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &str) -> Self {
        Self {
            text: format!("{header}\n"),
            columns: header.split(',').count(),
        }
    }

    /// Appends one row; panics if the field count differs from the header.
    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut n = 0;
        for (i, f) in fields.into_iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            self.text.push_str(f.as_ref());
            n += 1;
        }
        assert_eq!(n, self.columns, "CSV row width must match the header");
        self.text.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.text.into_bytes()
    }
}

pub fn state_row(t: f64, s: &State12) -> Vec<String> {
    std::iter::once(t).chain(s.to_array()).map(fmt_sig9).collect()
}

pub fn states_csv<'a>(states: impl IntoIterator<Item = (f64, &'a State12)>) -> Vec<u8> {
    let mut csv = Csv::new(STATE_HEADER);
    for (t, s) in states {
        csv.row(state_row(t, s));
    }
    csv.into_bytes()
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("output types serialise");
    s.push('\n');
    s.into_bytes()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub run_id: String,
    pub subcommand: String,
    pub seed: u64,
    pub config: RunConfig,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<OutputEntry>,
}

/// Run id: hash of the subcommand and the resolved configuration.
pub fn run_id(subcommand: &str, cfg: &RunConfig) -> String {
    let mut bytes = subcommand.as_bytes().to_vec();
    bytes.push(0);
    bytes.extend(serde_json::to_vec(cfg).expect("config serialises"));
    sha256_hex(&bytes)[..16].to_string()
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Files produced by one run, held in memory until [`Outputs::commit`].
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            files: Vec::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Adds a file by name relative to the output directory; names are unique.
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        let name = name.into();
        assert!(
            !name.contains('/') && name != MANIFEST_NAME,
            "output names are plain and distinct from the manifest"
        );
        assert!(self.files.iter().all(|(n, _)| *n != name), "duplicate output {name}");
        self.files.push((name, bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) {
        self.add(name, json_bytes(value));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes every file and then the manifest, each via a temporary file and
    /// rename. On failure everything already placed is removed again.
    pub fn commit(self, subcommand: &str, cfg: &RunConfig, started_at: String) -> Result<RunManifest> {
        fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        let outputs: Vec<OutputEntry> = self
            .files
            .iter()
            .map(|(name, bytes)| OutputEntry {
                path: name.clone(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(bytes),
            })
            .collect();
        let manifest = RunManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            run_id: run_id(subcommand, cfg),
            subcommand: subcommand.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            started_at,
            finished_at: now_rfc3339(),
            outputs,
        };
        let mut placed: Vec<PathBuf> = Vec::new();
        let manifest_bytes = json_bytes(&manifest);
        let all = self
            .files
            .iter()
            .map(|(n, b)| (n.as_str(), b.as_slice()))
            .chain(std::iter::once((MANIFEST_NAME, manifest_bytes.as_slice())));
        for (name, bytes) in all {
            let target = self.dir.join(name);
            if let Err(e) = write_atomic(&target, bytes) {
                for p in &placed {
                    let _ = fs::remove_file(p);
                }
                return Err(e);
            }
            placed.push(target);
        }
        Ok(manifest)
    }
}

/// Write to a sibling temporary file, then rename over `target`.
pub fn write_atomic(target: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = target.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, target));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(CliError::io(target, e));
    }
    Ok(())
}

/// Manifest text with the volatile fields blanked, for rerun comparison.
pub fn normalized_manifest(text: &str) -> Result<String> {
    let mut v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("manifest: {e}")))?;
    if let Some(obj) = v.as_object_mut() {
        for f in MANIFEST_VOLATILE_FIELDS {
            obj.insert(f.to_string(), serde_json::Value::Null);
        }
    }
    let mut out = String::new();
    let _ = write!(out, "{}", v);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -2.5e-12, 1.0 / 3.0, 12345.678, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
    }

    #[test]
    fn state_rows_keep_nine_significant_digits() {
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(-123456.789012), "-123456.789");
        assert_eq!(fmt_sig9(2.5e-12), "2.5e-12");
        assert_eq!(fmt_sig9(0.0), "0.0");
    }

    #[test]
    #[should_panic]
    fn csv_rejects_ragged_rows() {
        let mut c = Csv::new("a,b");
        c.row(["1"]);
    }

    #[test]
    fn commit_writes_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::new(dir.path().join("run"));
        out.add("a.csv", b"x\n1\n".to_vec());
        let cfg = RunConfig::default();
        let m = out.commit("simulate", &cfg, now_rfc3339()).unwrap();
        assert_eq!(m.outputs.len(), 1);
        assert_eq!(fs::read(dir.path().join("run/a.csv")).unwrap(), b"x\n1\n");
        let text = fs::read_to_string(dir.path().join("run").join(MANIFEST_NAME)).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.outputs[0].sha256, sha256_hex(b"x\n1\n"));
        let leftovers: Vec<_> = fs::read_dir(dir.path().join("run"))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with('.'))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn failed_commit_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("run");
        fs::create_dir_all(blocker.join("b.csv")).unwrap();
        let mut out = Outputs::new(&blocker);
        out.add("a.csv", b"1\n".to_vec());
        out.add("b.csv", b"2\n".to_vec());
        let err = out.commit("simulate", &RunConfig::default(), now_rfc3339()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(!blocker.join("a.csv").exists());
        assert!(!blocker.join(MANIFEST_NAME).exists());
    }
}
