//! Artifact writing. CSV floats use `{:.16e}` (17 significant digits) and
//! every CSV starts with a `# seed = N` comment line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub struct Output {
    dir: PathBuf,
    seed: u64,
    files: Vec<String>,
}

impl Output {
    pub fn new(dir: &Path, seed: u64) -> Result<Output, CliError> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Output { dir: dir.to_path_buf(), seed, files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn create(&mut self, name: &str) -> Result<(fs::File, PathBuf), CliError> {
        let path = self.dir.join(name);
        let f = fs::File::create(&path).map_err(|e| io(&path, e))?;
        self.files.push(name.to_string());
        Ok((f, path))
    }

    /// CSV body already formatted by a library routine.
    pub fn text_csv(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let seed = self.seed;
        let (mut f, path) = self.create(name)?;
        write!(f, "# seed = {seed}\n{body}").map_err(|e| io(&path, e))
    }

    pub fn csv_rows(&mut self, name: &str, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<(), CliError> {
        let seed = self.seed;
        let (mut f, path) = self.create(name)?;
        writeln!(f, "# seed = {seed}").map_err(|e| io(&path, e))?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(header).map_err(|e| io(&path, e))?;
        for r in rows {
            w.write_record(&r).map_err(|e| io(&path, e))?;
        }
        w.flush().map_err(|e| io(&path, e))
    }

    pub fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<(), CliError> {
        let (mut f, path) = self.create(name)?;
        let text = serde_json::to_string_pretty(value).expect("json serializes");
        writeln!(f, "{text}").map_err(|e| io(&path, e))
    }

    /// Config echo, versions, seed, wall time and the list of files.
    pub fn manifest(&mut self, cfg: &RunConfig, wall_time_s: f64) -> Result<(), CliError> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let m = json!({
            "config": cfg,
            "versions": {
                "goursat": goursat::VERSION,
                "goursat-cli": env!("CARGO_PKG_VERSION"),
            },
            "seed": cfg.seed,
            "workers": rayon::current_num_threads(),
            "wall_time_s": wall_time_s,
            "finished_unix": now,
            "files": self.files,
        });
        self.json("manifest.json", &m)
    }
}
