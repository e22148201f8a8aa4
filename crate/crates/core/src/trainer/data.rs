use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{hash_features, BaseFeature, DocumentRecord};

/// A query with graded candidate documents and optional teacher scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub query: DocumentRecord,
    pub docs: Vec<DocumentRecord>,
    pub labels: Vec<u32>,
    pub teacher_scores: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawDoc {
    id: String,
    #[serde(default)]
    text: String,
    label: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    teacher_score: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawInstance {
    query: DocumentRecord,
    docs: Vec<RawDoc>,
}

impl TrainingInstance {
    pub fn validate(&self) -> Result<()> {
        if self.docs.is_empty() {
            return Err(Error::Validation(format!(
                "query {:?} has no candidate documents",
                self.query.id
            )));
        }
        if self.docs.len() != self.labels.len() {
            return Err(Error::Validation("labels do not align with docs".into()));
        }
        if let Some(t) = &self.teacher_scores {
            if t.len() != self.docs.len() {
                return Err(Error::Validation("teacher scores do not align with docs".into()));
            }
            if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation("teacher scores must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    fn from_raw(raw: RawInstance) -> Result<Self> {
        let with_teacher = raw.docs.iter().filter(|d| d.teacher_score.is_some()).count();
        if with_teacher != 0 && with_teacher != raw.docs.len() {
            return Err(Error::Validation(
                "teacher_score must be given for all docs of a query or none".into(),
            ));
        }
        let teacher_scores =
            (with_teacher > 0).then(|| raw.docs.iter().map(|d| d.teacher_score.unwrap()).collect());
        let labels = raw.docs.iter().map(|d| d.label).collect();
        let docs = raw
            .docs
            .into_iter()
            .map(|d| DocumentRecord { id: d.id, text: d.text })
            .collect();
        let inst = TrainingInstance {
            query: raw.query,
            docs,
            labels,
            teacher_scores,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// JSON line in the training file format.
    pub fn to_json(&self) -> String {
        let raw = RawInstance {
            query: self.query.clone(),
            docs: self
                .docs
                .iter()
                .enumerate()
                .map(|(i, d)| RawDoc {
                    id: d.id.clone(),
                    text: d.text.clone(),
                    label: self.labels[i],
                    teacher_score: self.teacher_scores.as_ref().map(|t| t[i]),
                })
                .collect(),
        };
        serde_json::to_string(&raw).expect("serializable")
    }

    pub fn featurize(&self, d_base: usize, hash_seed: u64) -> Result<EncodedInstance> {
        Ok(EncodedInstance {
            query: hash_features(&self.query.text, d_base, hash_seed)?,
            docs: self
                .docs
                .iter()
                .map(|d| hash_features(&d.text, d_base, hash_seed))
                .collect::<Result<_>>()?,
            labels: self.labels.clone(),
            teacher_scores: self.teacher_scores.clone(),
        })
    }
}

pub fn parse_training(reader: impl BufRead) -> Result<Vec<TrainingInstance>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<training data>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(TrainingInstance::from_raw(raw).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_training(path: &Path) -> Result<Vec<TrainingInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_training(BufReader::new(file))
}

/// A training instance after featurization; what the loss graph consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInstance {
    pub query: BaseFeature,
    pub docs: Vec<BaseFeature>,
    pub labels: Vec<u32>,
    pub teacher_scores: Option<Vec<f64>>,
}

impl EncodedInstance {
    pub fn validate(&self) -> Result<()> {
        if self.docs.is_empty() || self.docs.len() != self.labels.len() {
            return Err(Error::Validation("instance needs aligned, nonempty docs and labels".into()));
        }
        if let Some(t) = &self.teacher_scores {
            if t.len() != self.docs.len() {
                return Err(Error::Validation("teacher scores do not align with docs".into()));
            }
        }
        Ok(())
    }

    pub fn top_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}
