//! Line-delimited JSON record files.
//!
//! Every file the engine writes is one JSON object per line. Pools are
//! stored as a header line followed by task, caption, trajectory and error
//! lines, each keyed by `(task_id, caption_index, index)`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::sampler::{CaptionSlot, RawPool, SlotError, TaskPool};
use crate::types::{Caption, TaskItem, Trajectory};

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Decode {
        path: String,
        line: usize,
        message: String,
    },
    #[error("malformed pool file {path}: {message}")]
    Pool { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RecordError + '_ {
    move |source| RecordError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Encodes `items` as JSON lines.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Decodes JSON lines, skipping blank lines.
pub fn from_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>, RecordError> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| RecordError::Decode {
                path: origin.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), RecordError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| RecordError::Io {
            path: path.display().to_string(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, RecordError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RecordError::Decode {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// One line of a pool file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolLine {
    Header { k: u32, n: u32, seed: u64 },
    Task(TaskItem),
    Caption(Caption),
    Trajectory(Trajectory),
    Error(SlotError),
}

/// Flattens a pool into its line sequence.
pub fn pool_lines(pool: &RawPool) -> Vec<PoolLine> {
    let mut lines = vec![PoolLine::Header {
        k: pool.k,
        n: pool.n,
        seed: pool.seed,
    }];
    for task in &pool.tasks {
        lines.push(PoolLine::Task(task.task.clone()));
        for slot in &task.captions {
            lines.push(PoolLine::Caption(slot.caption.clone()));
            lines.extend(slot.trajectories.iter().cloned().map(PoolLine::Trajectory));
        }
        lines.extend(task.errors.iter().cloned().map(PoolLine::Error));
    }
    lines
}

/// Rebuilds a pool from its lines. Captions and trajectories may appear in
/// any order after their task line.
pub fn pool_from_lines(lines: Vec<PoolLine>, origin: &str) -> Result<RawPool, RecordError> {
    let bad = |message: String| RecordError::Pool {
        path: origin.to_string(),
        message,
    };
    let mut iter = lines.into_iter();
    let (k, n, seed) = match iter.next() {
        Some(PoolLine::Header { k, n, seed }) => (k, n, seed),
        _ => return Err(bad("first line must be the header".into())),
    };
    let mut tasks: Vec<TaskPool> = Vec::new();
    let find = |tasks: &mut Vec<TaskPool>, id: &str| tasks.iter().position(|t| t.task.id == id);
    for line in iter {
        match line {
            PoolLine::Header { .. } => return Err(bad("duplicate header".into())),
            PoolLine::Task(task) => {
                if find(&mut tasks, &task.id).is_some() {
                    return Err(bad(format!("duplicate task `{}`", task.id)));
                }
                tasks.push(TaskPool {
                    task,
                    captions: Vec::new(),
                    errors: Vec::new(),
                });
            }
            PoolLine::Caption(caption) => {
                let t = find(&mut tasks, &caption.task_id)
                    .ok_or_else(|| bad(format!("caption for unknown task `{}`", caption.task_id)))?;
                tasks[t].captions.push(CaptionSlot {
                    caption,
                    trajectories: Vec::new(),
                });
            }
            PoolLine::Trajectory(traj) => {
                let t = find(&mut tasks, &traj.task_id)
                    .ok_or_else(|| bad(format!("trajectory for unknown task `{}`", traj.task_id)))?;
                let slot = tasks[t]
                    .captions
                    .iter_mut()
                    .find(|s| s.caption.index == traj.caption_index)
                    .ok_or_else(|| {
                        bad(format!(
                            "trajectory for unknown caption {}/{}",
                            traj.task_id, traj.caption_index
                        ))
                    })?;
                slot.trajectories.push(traj);
            }
            PoolLine::Error(err) => {
                let t = find(&mut tasks, &err.task_id)
                    .ok_or_else(|| bad(format!("error for unknown task `{}`", err.task_id)))?;
                tasks[t].errors.push(err);
            }
        }
    }
    for task in &mut tasks {
        task.captions.sort_by_key(|s| s.caption.index);
        for slot in &mut task.captions {
            slot.trajectories.sort_by_key(|t| t.index);
        }
    }
    Ok(RawPool { k, n, seed, tasks })
}

pub fn write_pool(path: impl AsRef<Path>, pool: &RawPool) -> Result<(), RecordError> {
    write_jsonl(path, &pool_lines(pool))
}

pub fn read_pool(path: impl AsRef<Path>) -> Result<RawPool, RecordError> {
    let path = path.as_ref();
    let lines = read_jsonl(path)?;
    pool_from_lines(lines, &path.display().to_string())
}
