//! Labeled samples from one domain.

use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelLevel {
    Fine,
    Coarse,
}

impl fmt::Display for LabelLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelLevel::Fine => "fine",
            LabelLevel::Coarse => "coarse",
        })
    }
}

impl std::str::FromStr for LabelLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fine" => Ok(LabelLevel::Fine),
            "coarse" => Ok(LabelLevel::Coarse),
            other => Err(format!("unknown label level `{other}`")),
        }
    }
}

/// Samples `inputs` (one row each) with integer `labels` from domain `domain`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain: String,
    pub level: LabelLevel,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl DomainDataset {
    pub fn new(
        domain: impl Into<String>,
        level: LabelLevel,
        inputs: Tensor,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(invalid("dataset must contain at least one sample"));
        }
        if inputs.rows() != labels.len() {
            return Err(invalid(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if !inputs.all_finite() {
            return Err(invalid("dataset inputs must be finite"));
        }
        Ok(Self {
            domain: domain.into(),
            level,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn labels_rc(&self) -> Rc<[usize]> {
        Rc::from(self.labels.as_slice())
    }

    /// Errors unless every label is below `count`.
    pub fn check_labels(&self, count: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= count) {
            Some(l) => Err(invalid(format!(
                "label {l} in domain `{}` outside 0..{count}",
                self.domain
            ))),
            None => Ok(()),
        }
    }

    /// Subset in the given index order. Panics on out-of-range indices.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            domain: self.domain.clone(),
            level: self.level,
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenation of datasets sharing level and dimension. The domain tag
    /// of the result is the tags joined by `+`.
    pub fn concat(parts: &[&DomainDataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("nothing to concatenate"))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.level != first.level || p.dim() != first.dim() {
                return Err(invalid("cannot concatenate datasets of different level or dimension"));
            }
            data.extend_from_slice(p.inputs.data());
            labels.extend_from_slice(&p.labels);
        }
        let domain = parts
            .iter()
            .map(|p| p.domain.as_str())
            .collect::<Vec<_>>()
            .join("+");
        Self::new(
            domain,
            first.level,
            Tensor::from_vec(labels.len(), first.dim(), data),
            labels,
        )
    }
}
