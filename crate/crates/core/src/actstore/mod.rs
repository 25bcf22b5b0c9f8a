// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation and attention store, and the RAD binary container.
//!
//! A RAD file is `"RAD1"`, a little-endian `u32` manifest length `J`, `J`
//! bytes of UTF-8 JSON manifest, then little-endian row-major tensors at
//! the offsets the manifest declares (measured from byte 0).
//!
//! In memory everything is widened to `f64`; [`write_rad`] narrows to the
//! manifest's payload dtype.

mod format;
mod validate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub use format::{
    read_rad, read_rad_file, write_rad, write_rad_bytes, Dtype, RadManifest, RecordDescriptor,
    RecordKind, FORMAT_VERSION, MAGIC,
};
pub use validate::{
    renormalize_rows, validate_attention, MatrixValidation, ValidationReport,
    DEFAULT_ROW_SUM_TOL, MASK_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn symbol(self) -> &'static str {
        match self {
            Polarity::Positive => "+",
            Polarity::Negative => "-",
        }
    }

    /// Accepts `+`, `-`, and the typographic minus `−`.
    pub fn parse_symbol(s: &str) -> Option<Option<Polarity>> {
        match s {
            "+" => Some(Some(Polarity::Positive)),
            "-" | "\u{2212}" => Some(Some(Polarity::Negative)),
            "" => Some(None),
            _ => None,
        }
    }

    pub fn flipped(self) -> Polarity {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    #[default]
    Full,
    Causal,
}

/// Key of one hidden-state record: the state at the final token of the
/// prompt truncated after `k` answer tokens, at `layer`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActKey {
    pub prompt_id: String,
    pub k: u32,
    pub layer: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInfo {
    pub polarity: Option<Polarity>,
    pub pair_id: Option<String>,
}

/// Hidden-state vectors keyed by `(prompt, truncation, layer)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationSet {
    records: BTreeMap<ActKey, Vec<f64>>,
    prompts: BTreeMap<String, PromptInfo>,
    token_texts: BTreeMap<(String, u32), String>,
}

impl ActivationSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers (or updates) the polarity and pair of a prompt.
    pub fn set_prompt(
        &mut self,
        prompt_id: impl Into<String>,
        polarity: Option<Polarity>,
        pair_id: Option<String>,
    ) {
        self.prompts
            .insert(prompt_id.into(), PromptInfo { polarity, pair_id });
    }

    pub fn insert(
        &mut self,
        prompt_id: impl Into<String>,
        k: u32,
        layer: usize,
        values: Vec<f64>,
    ) -> Result<()> {
        let prompt_id = prompt_id.into();
        if k == 0 {
            return Err(Error::InvalidArgument(format!(
                "truncation k must be >= 1 (prompt {prompt_id})"
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("hidden state"));
        }
        if let Some(d) = self.dim() {
            if values.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "hidden state",
                    expected: d,
                    found: values.len(),
                });
            }
        }
        self.prompts.entry(prompt_id.clone()).or_default();
        self.records.insert(ActKey { prompt_id, k, layer }, values);
        Ok(())
    }

    pub fn set_token_text(&mut self, prompt_id: impl Into<String>, k: u32, text: impl Into<String>) {
        self.token_texts.insert((prompt_id.into(), k), text.into());
    }

    pub fn token_text(&self, prompt_id: &str, k: u32) -> Option<&str> {
        self.token_texts
            .get(&(prompt_id.to_string(), k))
            .map(String::as_str)
    }

    pub fn get(&self, prompt_id: &str, k: u32, layer: usize) -> Option<&[f64]> {
        self.records
            .get(&ActKey {
                prompt_id: prompt_id.to_string(),
                k,
                layer,
            })
            .map(Vec::as_slice)
    }

    pub fn records(&self) -> impl Iterator<Item = (&ActKey, &[f64])> {
        self.records.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn prompt(&self, prompt_id: &str) -> Option<&PromptInfo> {
        self.prompts.get(prompt_id)
    }

    pub fn prompts(&self) -> impl Iterator<Item = (&str, &PromptInfo)> {
        self.prompts.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.values().next().map(Vec::len)
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.records.keys().map(|k| k.layer).collect()
    }

    /// Truncation positions recorded for a prompt, ascending.
    pub fn truncations(&self, prompt_id: &str) -> BTreeSet<u32> {
        self.prompt_records(prompt_id).map(|(k, _)| k.k).collect()
    }

    /// Records of one prompt in `(k, layer)` order.
    pub fn prompt_records<'a>(
        &'a self,
        prompt_id: &str,
    ) -> impl Iterator<Item = (&'a ActKey, &'a [f64])> + 'a {
        let lo = ActKey {
            prompt_id: prompt_id.to_string(),
            k: 0,
            layer: 0,
        };
        let hi = ActKey {
            prompt_id: prompt_id.to_string(),
            k: u32::MAX,
            layer: usize::MAX,
        };
        self.records
            .range(lo..=hi)
            .map(|(k, v)| (k, v.as_slice()))
    }

    pub fn polarity(&self, prompt_id: &str) -> Option<Polarity> {
        self.prompts.get(prompt_id).and_then(|p| p.polarity)
    }

    /// Copy with every positive prompt relabelled negative and vice versa.
    pub fn with_swapped_polarity(&self) -> Self {
        let mut out = self.clone();
        for info in out.prompts.values_mut() {
            info.polarity = info.polarity.map(Polarity::flipped);
        }
        out
    }

    /// Subset restricted to the given prompts.
    pub fn select_prompts<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Self {
        let keep: BTreeSet<&str> = ids.into_iter().collect();
        Self {
            records: self
                .records
                .iter()
                .filter(|(k, _)| keep.contains(k.prompt_id.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            prompts: self
                .prompts
                .iter()
                .filter(|(k, _)| keep.contains(k.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            token_texts: self
                .token_texts
                .iter()
                .filter(|((p, _), _)| keep.contains(p.as_str()))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttnKey {
    pub prompt_id: String,
    pub layer: usize,
    pub head: usize,
}

/// Attention matrices `A` per (prompt, layer, head) and attention outputs
/// `O = A·V` (before the output projection) per (prompt, layer).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionDump {
    pub mask_kind: MaskKind,
    matrices: BTreeMap<AttnKey, DenseMatrix>,
    outputs: BTreeMap<(String, usize), DenseMatrix>,
}

impl AttentionDump {
    pub fn new(mask_kind: MaskKind) -> Self {
        Self {
            mask_kind,
            ..Self::default()
        }
    }

    pub fn insert_matrix(
        &mut self,
        prompt_id: impl Into<String>,
        layer: usize,
        head: usize,
        m: DenseMatrix,
    ) -> Result<()> {
        let prompt_id = prompt_id.into();
        if !m.is_square() {
            return Err(Error::NotSquare {
                rows: m.rows(),
                cols: m.cols(),
            });
        }
        if let Some(n) = self.tokens(&prompt_id, layer) {
            if n != m.rows() {
                return Err(Error::DimensionMismatch {
                    context: "attention matrices within a layer",
                    expected: n,
                    found: m.rows(),
                });
            }
        }
        self.matrices.insert(
            AttnKey {
                prompt_id,
                layer,
                head,
            },
            m,
        );
        Ok(())
    }

    pub fn insert_output(
        &mut self,
        prompt_id: impl Into<String>,
        layer: usize,
        o: DenseMatrix,
    ) -> Result<()> {
        let prompt_id = prompt_id.into();
        if let Some(n) = self.tokens(&prompt_id, layer) {
            if n != o.rows() {
                return Err(Error::DimensionMismatch {
                    context: "attention output rows",
                    expected: n,
                    found: o.rows(),
                });
            }
        }
        self.outputs.insert((prompt_id, layer), o);
        Ok(())
    }

    /// Sequence length of a (prompt, layer), from its matrices or output.
    pub fn tokens(&self, prompt_id: &str, layer: usize) -> Option<usize> {
        self.layer_range(prompt_id, layer)
            .next()
            .map(|(_, m)| m.rows())
            .or_else(|| {
                self.outputs
                    .get(&(prompt_id.to_string(), layer))
                    .map(DenseMatrix::rows)
            })
    }

    pub fn matrices(&self) -> impl Iterator<Item = (&AttnKey, &DenseMatrix)> {
        self.matrices.iter()
    }

    pub fn outputs(&self) -> impl Iterator<Item = ((&str, usize), &DenseMatrix)> {
        self.outputs.iter().map(|((p, l), m)| ((p.as_str(), *l), m))
    }

    pub fn matrix(&self, prompt_id: &str, layer: usize, head: usize) -> Option<&DenseMatrix> {
        self.matrices.get(&AttnKey {
            prompt_id: prompt_id.to_string(),
            layer,
            head,
        })
    }

    pub fn output(&self, prompt_id: &str, layer: usize) -> Option<&DenseMatrix> {
        self.outputs.get(&(prompt_id.to_string(), layer))
    }

    /// Heads of one (prompt, layer), ascending.
    pub fn heads(&self, prompt_id: &str, layer: usize) -> Vec<(usize, &DenseMatrix)> {
        self.layer_range(prompt_id, layer)
            .map(|(k, m)| (k.head, m))
            .collect()
    }

    fn layer_range(
        &self,
        prompt_id: &str,
        layer: usize,
    ) -> std::collections::btree_map::Range<'_, AttnKey, DenseMatrix> {
        let key = |head| AttnKey {
            prompt_id: prompt_id.to_string(),
            layer,
            head,
        };
        self.matrices.range(key(0)..=key(usize::MAX))
    }

    pub fn prompt_ids(&self) -> BTreeSet<&str> {
        self.matrices
            .keys()
            .map(|k| k.prompt_id.as_str())
            .chain(self.outputs.keys().map(|(p, _)| p.as_str()))
            .collect()
    }

    pub fn layers(&self, prompt_id: &str) -> BTreeSet<usize> {
        self.matrices
            .keys()
            .filter(|k| k.prompt_id == prompt_id)
            .map(|k| k.layer)
            .collect()
    }

    pub fn matrix_count(&self) -> usize {
        self.matrices.len()
    }

    pub fn output_count(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty() && self.outputs.is_empty()
    }
}
