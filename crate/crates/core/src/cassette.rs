//! Record/replay of external interactions as JSONL `(request, response)` pairs.
//!
//! Replay matches requests by their canonical JSON text. Repeated identical
//! requests consume recorded responses in order; the last one is reused
//! once the queue runs dry.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CassetteError {
    #[error("cassette io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed cassette entry: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no recorded response for request {0}")]
    Missing(String),
    #[error("cannot encode interaction: {0}")]
    Encode(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureMode {
    /// Talk to the live service, no cassette.
    Off,
    /// Talk to the live service and append every exchange to the cassette.
    Record,
    /// Answer only from the cassette.
    #[default]
    Replay,
}

impl std::str::FromStr for FixtureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(FixtureMode::Off),
            "record" => Ok(FixtureMode::Record),
            "replay" => Ok(FixtureMode::Replay),
            other => Err(format!("unknown fixture mode {other:?}")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Interaction {
    request: serde_json::Value,
    response: serde_json::Value,
}

pub struct Cassette {
    path: PathBuf,
    recorded: BTreeMap<String, VecDeque<serde_json::Value>>,
    last: BTreeMap<String, serde_json::Value>,
    writer: Option<File>,
}

impl Cassette {
    /// Opens a cassette for replay. A missing file is an empty cassette.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CassetteError> {
        let path = path.as_ref().to_path_buf();
        let mut recorded: BTreeMap<String, VecDeque<serde_json::Value>> = BTreeMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|source| CassetteError::Io {
                path: path.clone(),
                source,
            })?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|source| CassetteError::Io {
                    path: path.clone(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: Interaction =
                    serde_json::from_str(&line).map_err(|e| CassetteError::Malformed {
                        path: path.clone(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                recorded
                    .entry(entry.request.to_string())
                    .or_default()
                    .push_back(entry.response);
            }
        }
        Ok(Cassette {
            path,
            recorded,
            last: BTreeMap::new(),
            writer: None,
        })
    }

    /// Opens a cassette that appends new interactions to its file.
    pub fn open_for_recording(path: impl AsRef<Path>) -> Result<Self, CassetteError> {
        let mut cassette = Self::open(path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&cassette.path)
            .map_err(|source| CassetteError::Io {
                path: cassette.path.clone(),
                source,
            })?;
        cassette.writer = Some(file);
        Ok(cassette)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.recorded.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn replay<Req: Serialize, Resp: DeserializeOwned>(
        &mut self,
        request: &Req,
    ) -> Result<Resp, CassetteError> {
        let key = serde_json::to_value(request)?.to_string();
        let value = match self.recorded.get_mut(&key).and_then(VecDeque::pop_front) {
            Some(v) => {
                self.last.insert(key, v.clone());
                v
            }
            None => self
                .last
                .get(&key)
                .cloned()
                .ok_or_else(|| CassetteError::Missing(key.clone()))?,
        };
        Ok(serde_json::from_value(value)?)
    }

    pub fn record<Req: Serialize, Resp: Serialize>(
        &mut self,
        request: &Req,
        response: &Resp,
    ) -> Result<(), CassetteError> {
        let entry = Interaction {
            request: serde_json::to_value(request)?,
            response: serde_json::to_value(response)?,
        };
        let line = serde_json::to_string(&entry)?;
        if let Some(w) = self.writer.as_mut() {
            writeln!(w, "{line}").map_err(|source| CassetteError::Io {
                path: self.path.clone(),
                source,
            })?;
        }
        self.last.insert(entry.request.to_string(), entry.response);
        Ok(())
    }
}

/// Writes a cassette file from in-memory pairs; handy for building fixtures.
pub fn write_cassette<Req: Serialize, Resp: Serialize>(
    path: impl AsRef<Path>,
    pairs: &[(Req, Resp)],
) -> Result<(), CassetteError> {
    let path = path.as_ref();
    let mut out = String::new();
    for (req, resp) in pairs {
        let entry = Interaction {
            request: serde_json::to_value(req)?,
            response: serde_json::to_value(resp)?,
        };
        out.push_str(&serde_json::to_string(&entry)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| CassetteError::Io {
        path: path.to_path_buf(),
        source,
    })
}
