//! Line-delimited dataset files: one JSON object per line, header first.
//!
//! ```text
//! {"record":"header","format_version":1,"d_raw":32,"action_type_names":[...]}
//! {"record":"observation","episode":0,"t":1,...}
//! ...
//! {"record":"episode","episode":0,"length":12,"reward":1,...}
//! ```
//!
//! Floats are written in shortest round-trip decimal form, so a load of a
//! saved file reproduces every field bit for bit.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Episode, Modality, Observation};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub d_raw: usize,
    pub action_type_names: Vec<String>,
    /// Configuration that produced the file, when it was generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

impl DatasetHeader {
    pub fn new(d_raw: usize, action_type_names: Vec<String>) -> Self {
        DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            d_raw,
            action_type_names,
            generator: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header(DatasetHeader),
    Observation {
        episode: usize,
        task_id: u64,
        t: usize,
        action_type: usize,
        v: Vec<f64>,
        x: Vec<f64>,
        k: Vec<f64>,
    },
    Episode {
        episode: usize,
        task_id: u64,
        length: usize,
        reward: u8,
        expert_states: Vec<usize>,
        target_action: Option<usize>,
        cue_modality: Option<Modality>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

fn encode(record: &Record) -> String {
    serde_json::to_string(record).expect("dataset records always serialize")
}

pub fn write_dataset<W: Write>(mut w: W, dataset: &Dataset) -> std::io::Result<()> {
    writeln!(w, "{}", encode(&Record::Header(dataset.header.clone())))?;
    for (idx, ep) in dataset.episodes.iter().enumerate() {
        for obs in &ep.observations {
            let rec = Record::Observation {
                episode: idx,
                task_id: obs.task_id,
                t: obs.t,
                action_type: obs.action_type,
                v: obs.v.clone(),
                x: obs.x.clone(),
                k: obs.k.clone(),
            };
            writeln!(w, "{}", encode(&rec))?;
        }
        let rec = Record::Episode {
            episode: idx,
            task_id: ep.task_id,
            length: ep.observations.len(),
            reward: ep.reward,
            expert_states: ep.expert_states.iter().copied().collect(),
            target_action: ep.target_action,
            cue_modality: ep.cue_modality,
        };
        writeln!(w, "{}", encode(&rec))?;
    }
    w.flush()
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(BufWriter::new(file), dataset).map_err(|e| Error::io(path, e))
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut header: Option<DatasetHeader> = None;
    let mut episodes = Vec::new();
    let mut pending: Vec<Observation> = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let parse_err = |msg: String| Error::Parse { line: line_no, msg };
        match (record, &header) {
            (Record::Header(h), None) => {
                if h.format_version != DATASET_FORMAT_VERSION {
                    return Err(Error::Version {
                        found: h.format_version,
                        expected: DATASET_FORMAT_VERSION,
                    });
                }
                header = Some(h);
            }
            (Record::Header(_), Some(_)) => return Err(parse_err("duplicate header record".into())),
            (_, None) => return Err(parse_err("first record must be the header".into())),
            (
                Record::Observation {
                    episode,
                    task_id,
                    t,
                    action_type,
                    v,
                    x,
                    k,
                },
                Some(h),
            ) => {
                if episode != episodes.len() {
                    return Err(parse_err(format!(
                        "observation for episode {episode} while reading episode {}",
                        episodes.len()
                    )));
                }
                if action_type >= h.action_type_names.len() {
                    return Err(parse_err(format!("unknown action type {action_type}")));
                }
                let obs = Observation {
                    t,
                    v,
                    x,
                    k,
                    action_type,
                    task_id,
                };
                obs.validate(h.d_raw).map_err(|e| parse_err(e.to_string()))?;
                pending.push(obs);
            }
            (
                Record::Episode {
                    episode,
                    task_id,
                    length,
                    reward,
                    expert_states,
                    target_action,
                    cue_modality,
                },
                Some(h),
            ) => {
                if episode != episodes.len() {
                    return Err(parse_err(format!(
                        "episode record {episode} out of order (expected {})",
                        episodes.len()
                    )));
                }
                if length != pending.len() {
                    return Err(parse_err(format!(
                        "episode {episode} declares {length} observations, found {}",
                        pending.len()
                    )));
                }
                let ep = Episode {
                    task_id,
                    observations: std::mem::take(&mut pending),
                    reward,
                    expert_states: expert_states.into_iter().collect::<BTreeSet<_>>(),
                    target_action,
                    cue_modality,
                };
                ep.validate(h.d_raw).map_err(|e| parse_err(e.to_string()))?;
                episodes.push(ep);
            }
        }
    }

    let header = header.ok_or(Error::Parse {
        line: 0,
        msg: "missing header record".into(),
    })?;
    if !pending.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: format!("{} trailing observations without an episode record", pending.len()),
        });
    }
    Ok(Dataset { header, episodes })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}
