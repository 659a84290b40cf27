//! Run directories: config snapshot, seed manifest, append-only results
//! and the profiles a run produced.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chanprune_core::profiles::Profile;
use chanprune_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const RESULTS_HEADER: &str = "# chanprune results v1";
pub const RESULTS_FILE: &str = "results.csv";
pub const TIMINGS_FILE: &str = "timings.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub seed: u64,
    pub base: String,
    /// Path of the profile JSON, relative to the run directory.
    pub profile: String,
    pub cf: f64,
    pub c: f64,
    pub accuracy: f64,
}

impl ResultRow {
    pub fn key(&self) -> CellKey {
        (self.experiment.clone(), self.seed, self.base.clone(), self.profile.clone())
    }
}

pub type CellKey = (String, u64, String, String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub experiment: String,
    pub seed: u64,
    pub base: String,
    pub profile: String,
    pub seconds: f64,
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates (or reopens) a run directory. A directory holding a
    /// different resolved config is refused rather than silently mixed.
    pub fn open(root: impl Into<PathBuf>, cfg: &ExperimentConfig) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("profiles"))?;
        let snapshot = cfg.to_toml()?;
        let path = root.join("config.toml");
        if path.exists() {
            let old = fs::read_to_string(&path)?;
            if old != snapshot {
                return Err(Error::Config(format!(
                    "{} holds a different config; use a new id or remove the directory",
                    root.display()
                )));
            }
        } else {
            fs::write(&path, snapshot)?;
        }
        Ok(Self { root })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write_seed_manifest(&self, manifest: &serde_json::Value) -> Result<()> {
        fs::write(self.path("seeds.json"), serde_json::to_string_pretty(manifest)? + "\n")?;
        Ok(())
    }

    /// Saves `profile` as `profiles/<name>.json`, returning the relative path.
    pub fn save_profile(&self, name: &str, profile: &Profile) -> Result<String> {
        let rel = format!("profiles/{name}.json");
        profile.save(self.path(&rel))?;
        Ok(rel)
    }

    pub fn results(&self) -> Result<ResultsLog> {
        ResultsLog::open(self.path(RESULTS_FILE), self.path(TIMINGS_FILE))
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut text = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.starts_with('#') {
            text.push_str(&line);
            text.push('\n');
        }
    }
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    Ok(rd.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

/// Single appender for a run's results and wall-clock timings. Timings
/// live apart from results so that result files stay bit-reproducible.
pub struct ResultsLog {
    results: csv::Writer<File>,
    timings: csv::Writer<File>,
    done: HashSet<CellKey>,
    rows: Vec<ResultRow>,
}

impl ResultsLog {
    fn open(results: PathBuf, timings: PathBuf) -> Result<Self> {
        let rows = read_results(&results)?;
        let done = rows.iter().map(ResultRow::key).collect();
        let fresh = !results.exists() || fs::metadata(&results)?.len() == 0;
        let mut f = OpenOptions::new().create(true).append(true).open(&results)?;
        if fresh {
            writeln!(f, "{RESULTS_HEADER}")?;
        }
        let results = csv::WriterBuilder::new().has_headers(fresh).from_writer(f);
        let t_fresh = !timings.exists();
        let t = OpenOptions::new().create(true).append(true).open(&timings)?;
        let timings = csv::WriterBuilder::new().has_headers(t_fresh).from_writer(t);
        Ok(Self {
            results,
            timings,
            done,
            rows,
        })
    }

    pub fn contains(&self, key: &CellKey) -> bool {
        self.done.contains(key)
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn find(&self, key: &CellKey) -> Option<&ResultRow> {
        self.rows.iter().find(|r| &r.key() == key)
    }

    pub fn append(&mut self, row: ResultRow, seconds: f64) -> Result<()> {
        if !self.done.insert(row.key()) {
            return Ok(());
        }
        self.results.serialize(&row)?;
        self.results.flush()?;
        self.timings.serialize(TimingRow {
            experiment: row.experiment.clone(),
            seed: row.seed,
            base: row.base.clone(),
            profile: row.profile.clone(),
            seconds,
        })?;
        self.timings.flush()?;
        self.rows.push(row);
        Ok(())
    }
}
