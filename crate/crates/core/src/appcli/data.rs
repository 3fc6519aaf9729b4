use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subword::MergeTable;
use crate::training::TrainUnit;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    #[serde(rename = "type")]
    pub entity_type: String,
    /// Char offset of the first char.
    pub start: usize,
    /// Char offset one past the last char.
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub text: String,
    #[serde(default)]
    pub entities: Vec<EntitySpan>,
}

impl DatasetSample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.text.chars().count();
        for e in &self.entities {
            if e.end <= e.start {
                return Err(format!(
                    "entity `{}` has end {} <= start {}",
                    e.entity_type, e.end, e.start
                ));
            }
            if e.end > n {
                return Err(format!(
                    "entity `{}` ends at {} past the text length {n}",
                    e.entity_type, e.end
                ));
            }
        }
        Ok(())
    }

    /// Substring at char offsets `[start, end)`.
    pub fn surface(&self, start: usize, end: usize) -> String {
        self.text.chars().skip(start).take(end - start).collect()
    }
}

/// Reads one JSON record per line. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetSample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = |reason: String| Error::Record {
            path: path.to_path_buf(),
            line: k + 1,
            reason,
        };
        let sample: DatasetSample = serde_json::from_str(&line).map_err(|e| record(e.to_string()))?;
        sample.validate().map_err(record)?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, samples: &[DatasetSample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Entity type → keyword query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuerySpec(pub BTreeMap<String, String>);

impl QuerySpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: QuerySpec = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::format(path, e.to_string()))?;
        spec.validate().map_err(|e| Error::format(path, e))?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.0.is_empty() {
            return Err("no entity types declared".into());
        }
        for (t, q) in &self.0 {
            if t.trim().is_empty() {
                return Err("empty entity type name".into());
            }
            if q.trim().is_empty() {
                return Err(format!("empty query for `{t}`"));
            }
        }
        Ok(())
    }

    pub fn types(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn query(&self, entity_type: &str) -> Option<&str> {
        self.0.get(entity_type).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One (sentence, entity type) pair before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryUnit<'a> {
    pub sentence: usize,
    pub text: &'a str,
    pub entity_type: &'a str,
    pub query: &'a str,
    pub spans: Vec<(usize, usize)>,
}

/// Pairs every sample with every declared type. Units with no spans of
/// their type are kept as negatives.
pub fn expand_samples<'a>(
    samples: &'a [DatasetSample],
    queries: &'a QuerySpec,
) -> Result<Vec<QueryUnit<'a>>> {
    for s in samples {
        if let Some(e) = s.entities.iter().find(|e| queries.query(&e.entity_type).is_none()) {
            return Err(Error::UnknownType(e.entity_type.clone()));
        }
    }
    let mut out = Vec::with_capacity(samples.len() * queries.len());
    for (k, s) in samples.iter().enumerate() {
        for (t, q) in &queries.0 {
            out.push(QueryUnit {
                sentence: k,
                text: &s.text,
                entity_type: t,
                query: q,
                spans: s
                    .entities
                    .iter()
                    .filter(|e| &e.entity_type == t)
                    .map(|e| (e.start, e.end))
                    .collect(),
            });
        }
    }
    Ok(out)
}

/// Tokenizes query units into training units; returns the number of gold
/// spans lost to truncation or misalignment.
pub fn build_train_units(
    units: &[QueryUnit<'_>],
    table: &MergeTable,
    cap: usize,
) -> Result<(Vec<TrainUnit>, usize)> {
    let mut dropped = 0;
    let mut out = Vec::with_capacity(units.len());
    for u in units {
        let seq = table.encode(u.query, u.text, cap)?;
        let (unit, lost) = TrainUnit::new(seq, &u.spans, u.entity_type);
        dropped += lost;
        out.push(unit);
    }
    Ok((out, dropped))
}
