//! CSV and JSON writers. Every file opens with the schema version and the
//! resolved configuration so it can be regenerated from itself.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pmcts::framework::RolloutTrace;

use crate::config::SCHEMA_VERSION;
use crate::error::CliResult;

/// Writes into a hidden staging directory and moves the files into place
/// only on `commit`; dropping it uncommitted removes everything.
pub struct Staging {
    dir: PathBuf,
    target: PathBuf,
    files: Vec<String>,
    done: bool,
}

impl Staging {
    pub fn new(target: &Path) -> CliResult<Self> {
        fs::create_dir_all(target)?;
        let dir = target.join(format!(".staging-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, target: target.to_path_buf(), files: Vec::new(), done: false })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn commit(mut self) -> CliResult<Vec<PathBuf>> {
        let mut out = Vec::new();
        for f in &self.files {
            let dst = self.target.join(f);
            fs::rename(self.dir.join(f), &dst)?;
            out.push(dst);
        }
        fs::remove_dir_all(&self.dir)?;
        self.done = true;
        Ok(out)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

/// A CSV writer whose file starts with `# key=value` header lines.
pub fn csv_with_header(path: &Path, config: &impl Serialize) -> CliResult<csv::Writer<BufWriter<File>>> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "# schema_version={SCHEMA_VERSION}")?;
    writeln!(f, "# config={}", serde_json::to_string(config)?)?;
    Ok(csv::Writer::from_writer(f))
}

/// Appends `# key=value` footer lines after the CSV body.
pub fn finish_csv(w: csv::Writer<BufWriter<File>>, footer: &[(String, String)]) -> CliResult<()> {
    let mut f = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    for (k, v) in footer {
        writeln!(f, "# {k}={v}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn csv_reader(path: &Path) -> CliResult<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?)
}

#[derive(Serialize)]
struct Envelope<'a, C: Serialize, T: Serialize> {
    schema_version: u32,
    config: &'a C,
    #[serde(flatten)]
    body: &'a T,
}

pub fn write_json(path: &Path, config: &impl Serialize, body: &impl Serialize) -> CliResult<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, &Envelope { schema_version: SCHEMA_VERSION, config, body })?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub rollout: usize,
    /// Virtual rollout step or milliseconds, per the trace's time unit.
    pub time: f64,
    pub root_action: Option<usize>,
    #[serde(rename = "V_i")]
    pub v_i: f64,
    #[serde(rename = "V_star")]
    pub v_star: f64,
    #[serde(rename = "V_mean")]
    pub v_mean: f64,
    pub worker: usize,
    pub tree_index: usize,
    pub task_id: u64,
}

pub fn write_trace(path: &Path, config: &impl Serialize, trace: &RolloutTrace) -> CliResult<()> {
    let mut w = csv_with_header(path, config)?;
    for r in &trace.records {
        w.serialize(TraceRow {
            rollout: r.index,
            time: r.completed_at,
            root_action: r.root_action,
            v_i: r.value,
            v_star: r.optimal_value,
            v_mean: r.expected_value,
            worker: r.worker,
            tree_index: r.tree,
            task_id: r.task_id,
        })?;
    }
    finish_csv(w, &[])
}

pub fn read_trace(path: &Path) -> CliResult<Vec<TraceRow>> {
    let mut r = csv_reader(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
