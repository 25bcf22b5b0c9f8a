// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ActivationSet, AttentionDump, MaskKind, Polarity};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const MAGIC: [u8; 4] = *b"RAD1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F16,
    Bf16,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F16 | Dtype::Bf16 => 2,
            Dtype::F32 => 4,
        }
    }

    fn encode(self, x: f64, out: &mut Vec<u8>) -> bool {
        match self {
            Dtype::F32 => {
                let v = x as f32;
                out.extend_from_slice(&v.to_le_bytes());
                v.is_finite()
            }
            Dtype::F16 => {
                let v = f16::from_f64(x);
                out.extend_from_slice(&v.to_le_bytes());
                v.is_finite()
            }
            Dtype::Bf16 => {
                let v = bf16::from_f64(x);
                out.extend_from_slice(&v.to_le_bytes());
                v.is_finite()
            }
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            Dtype::Bf16 => bytes
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Hidden,
    Attn,
    AttnOut,
}

/// One tensor in the payload.
///
/// `pair_id`, `truncation` and `token_text` are only meaningful for hidden
/// records and are omitted from the JSON when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDescriptor {
    pub kind: RecordKind,
    pub prompt_id: String,
    pub polarity: String,
    pub layer: usize,
    /// `-1` when the record is not per-head.
    pub head: i64,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
    pub byte_length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_text: Option<String>,
}

impl RecordDescriptor {
    fn label(&self, index: usize) -> String {
        let kind = match self.kind {
            RecordKind::Hidden => "hidden",
            RecordKind::Attn => "attn",
            RecordKind::AttnOut => "attn_out",
        };
        let mut s = format!("record #{index} ({kind} prompt={} layer={}", self.prompt_id, self.layer);
        if self.head >= 0 {
            s.push_str(&format!(" head={}", self.head));
        }
        if let Some(k) = self.truncation {
            s.push_str(&format!(" k={k}"));
        }
        s.push(')');
        s
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadManifest {
    pub format_version: u32,
    pub model_id: String,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub tokenizer_note: String,
    pub dtype_of_payload: Dtype,
    #[serde(default)]
    pub mask_kind: MaskKind,
    pub record_index: Vec<RecordDescriptor>,
    /// Fields this reader does not interpret (hook points, provenance,
    /// vision-token spans). Preserved verbatim on rewrite.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl RadManifest {
    pub fn new(
        model_id: impl Into<String>,
        hidden_dim: usize,
        num_layers: usize,
        num_heads: usize,
        dtype_of_payload: Dtype,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_id: model_id.into(),
            hidden_dim,
            num_layers,
            num_heads,
            tokenizer_note: String::new(),
            dtype_of_payload,
            mask_kind: MaskKind::Full,
            record_index: Vec::new(),
            extra: BTreeMap::new(),
        }
    }
}

struct PendingRecord<'a> {
    desc: RecordDescriptor,
    values: &'a [f64],
}

fn shape_error(record: String, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        record,
        detail: detail.into(),
    }
}

/// Serializes `acts` and `attn` under the header fields of `manifest`.
///
/// The manifest's `record_index` and `mask_kind` are rebuilt from the
/// payload; everything else is copied through. Records are laid out in key
/// order, so equal payloads always give identical bytes.
pub fn write_rad_bytes(
    manifest: &RadManifest,
    acts: &ActivationSet,
    attn: &AttentionDump,
) -> Result<Vec<u8>> {
    let dtype = manifest.dtype_of_payload;
    let mut pending: Vec<PendingRecord<'_>> = Vec::new();

    for (key, values) in acts.records() {
        let info = acts.prompt(&key.prompt_id).cloned().unwrap_or_default();
        pending.push(PendingRecord {
            desc: RecordDescriptor {
                kind: RecordKind::Hidden,
                prompt_id: key.prompt_id.clone(),
                polarity: info.polarity.map(Polarity::symbol).unwrap_or("").into(),
                layer: key.layer,
                head: -1,
                shape: vec![values.len()],
                dtype,
                offset: 0,
                byte_length: 0,
                pair_id: info.pair_id,
                truncation: Some(key.k),
                token_text: acts.token_text(&key.prompt_id, key.k).map(str::to_string),
            },
            values,
        });
    }
    for (key, m) in attn.matrices() {
        pending.push(PendingRecord {
            desc: RecordDescriptor {
                kind: RecordKind::Attn,
                prompt_id: key.prompt_id.clone(),
                polarity: String::new(),
                layer: key.layer,
                head: key.head as i64,
                shape: vec![m.rows(), m.cols()],
                dtype,
                offset: 0,
                byte_length: 0,
                pair_id: None,
                truncation: None,
                token_text: None,
            },
            values: m.data(),
        });
    }
    for ((prompt_id, layer), m) in attn.outputs() {
        pending.push(PendingRecord {
            desc: RecordDescriptor {
                kind: RecordKind::AttnOut,
                prompt_id: prompt_id.to_string(),
                polarity: String::new(),
                layer,
                head: -1,
                shape: vec![m.rows(), m.cols()],
                dtype,
                offset: 0,
                byte_length: 0,
                pair_id: None,
                truncation: None,
                token_text: None,
            },
            values: m.data(),
        });
    }

    for (i, p) in pending.iter().enumerate() {
        check_descriptor(manifest, &p.desc, i)?;
    }

    let mut out_manifest = manifest.clone();
    out_manifest.format_version = FORMAT_VERSION;
    out_manifest.mask_kind = attn.mask_kind;

    // Offsets depend on the manifest length, which depends on the digits of
    // the offsets. The length is monotone in the offsets, so iterating to a
    // fixed point terminates.
    let mut manifest_len = 0usize;
    let json = loop {
        let mut offset = (HEADER_LEN + manifest_len) as u64;
        out_manifest.record_index = pending
            .iter()
            .map(|p| {
                let mut d = p.desc.clone();
                d.byte_length = (p.values.len() * dtype.size()) as u64;
                d.offset = offset;
                offset += d.byte_length;
                d
            })
            .collect();
        let json = serde_json::to_vec(&out_manifest)?;
        if json.len() == manifest_len {
            break json;
        }
        manifest_len = json.len();
    };
    let manifest_len_u32 = u32::try_from(json.len())
        .map_err(|_| Error::InvalidArgument("manifest exceeds 4 GiB".into()))?;

    let payload_len: usize = pending.iter().map(|p| p.values.len() * dtype.size()).sum();
    let mut bytes = Vec::with_capacity(HEADER_LEN + json.len() + payload_len);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&manifest_len_u32.to_le_bytes());
    bytes.extend_from_slice(&json);
    for (i, p) in pending.iter().enumerate() {
        let mut finite = true;
        for &x in p.values {
            finite &= dtype.encode(x, &mut bytes);
        }
        if !finite {
            return Err(shape_error(
                out_manifest.record_index[i].label(i),
                format!("value out of range for {dtype:?}"),
            ));
        }
    }
    Ok(bytes)
}

/// Writes a RAD file to `sink`; returns the number of bytes written.
pub fn write_rad<W: Write>(
    manifest: &RadManifest,
    acts: &ActivationSet,
    attn: &AttentionDump,
    mut sink: W,
) -> Result<u64> {
    let bytes = write_rad_bytes(manifest, acts, attn)?;
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(bytes.len() as u64)
}

/// Shape checks shared by the reader and the writer.
fn check_descriptor(m: &RadManifest, d: &RecordDescriptor, index: usize) -> Result<()> {
    let label = || d.label(index);
    if d.layer >= m.num_layers {
        return Err(shape_error(
            label(),
            format!("layer {} >= num_layers {}", d.layer, m.num_layers),
        ));
    }
    match d.kind {
        RecordKind::Hidden => {
            if d.shape != [m.hidden_dim] {
                return Err(shape_error(
                    label(),
                    format!("hidden shape {:?}, expected [{}]", d.shape, m.hidden_dim),
                ));
            }
            if d.head != -1 {
                return Err(shape_error(label(), "hidden records carry head -1"));
            }
            match d.truncation {
                Some(k) if k >= 1 => {}
                _ => return Err(shape_error(label(), "hidden records need truncation >= 1")),
            }
        }
        RecordKind::Attn => {
            if d.shape.len() != 2 || d.shape[0] != d.shape[1] || d.shape[0] == 0 {
                return Err(shape_error(
                    label(),
                    format!("attention shape {:?} is not square", d.shape),
                ));
            }
            if d.head < 0 || d.head as usize >= m.num_heads {
                return Err(shape_error(
                    label(),
                    format!("head {} outside 0..{}", d.head, m.num_heads),
                ));
            }
        }
        RecordKind::AttnOut => {
            if d.shape.len() != 2 || d.shape.contains(&0) {
                return Err(shape_error(
                    label(),
                    format!("attention output shape {:?} is not 2-D", d.shape),
                ));
            }
            if d.head != -1 {
                return Err(shape_error(label(), "attention outputs carry head -1"));
            }
        }
    }
    Ok(())
}

/// Parses and fully validates a RAD byte buffer.
pub fn read_rad(bytes: &[u8]) -> Result<(RadManifest, ActivationSet, AttentionDump)> {
    let head = &bytes[..bytes.len().min(4)];
    if head != &MAGIC[..head.len()] {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            record: "header".into(),
        });
    }
    let manifest_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let payload_start = HEADER_LEN + manifest_len;
    if bytes.len() < payload_start {
        return Err(Error::TruncatedPayload {
            record: "manifest".into(),
        });
    }
    let raw: Value = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
        .map_err(|e| Error::BadManifest(e.to_string()))?;
    match raw.get("format_version").and_then(Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::VersionMismatch {
                found: u32::try_from(v).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(Error::BadManifest("missing format_version".into())),
    }
    let manifest: RadManifest =
        serde_json::from_value(raw).map_err(|e| Error::BadManifest(e.to_string()))?;

    let mut acts = ActivationSet::new();
    let mut attn = AttentionDump::new(manifest.mask_kind);
    let mut seen_prompts: BTreeMap<String, (Option<Polarity>, Option<String>)> = BTreeMap::new();
    let mut prev_end = payload_start as u64;
    for (i, d) in manifest.record_index.iter().enumerate() {
        if d.offset < prev_end {
            return Err(Error::OffsetOverlap { record: d.label(i) });
        }
        let expected_len = (d.numel() * d.dtype.size()) as u64;
        if d.byte_length != expected_len {
            return Err(shape_error(
                d.label(i),
                format!(
                    "byte_length {} but shape {:?} of {:?} needs {expected_len}",
                    d.byte_length, d.shape, d.dtype
                ),
            ));
        }
        check_descriptor(&manifest, d, i)?;
        let end = d
            .offset
            .checked_add(d.byte_length)
            .ok_or_else(|| Error::TruncatedPayload { record: d.label(i) })?;
        if end > bytes.len() as u64 {
            return Err(Error::TruncatedPayload { record: d.label(i) });
        }
        prev_end = end;

        let values = d.dtype.decode(&bytes[d.offset as usize..end as usize]);
        if values.iter().any(|x| !x.is_finite()) {
            return Err(shape_error(d.label(i), "non-finite payload value"));
        }
        let polarity = Polarity::parse_symbol(&d.polarity).ok_or_else(|| {
            Error::BadManifest(format!("{}: unknown polarity {:?}", d.label(i), d.polarity))
        })?;
        let duplicate = || Error::BadManifest(format!("{}: duplicate record", d.label(i)));
        match d.kind {
            RecordKind::Hidden => {
                let k = d.truncation.unwrap_or(1);
                if acts.get(&d.prompt_id, k, d.layer).is_some() {
                    return Err(duplicate());
                }
                match seen_prompts.get(&d.prompt_id) {
                    Some((pol, pair)) => {
                        if *pol != polarity || *pair != d.pair_id {
                            return Err(Error::BadManifest(format!(
                                "{}: polarity or pair_id disagrees with earlier records of the prompt",
                                d.label(i)
                            )));
                        }
                    }
                    None => {
                        seen_prompts.insert(d.prompt_id.clone(), (polarity, d.pair_id.clone()));
                        acts.set_prompt(d.prompt_id.clone(), polarity, d.pair_id.clone());
                    }
                }
                acts.insert(d.prompt_id.clone(), k, d.layer, values)?;
                if let Some(t) = &d.token_text {
                    acts.set_token_text(d.prompt_id.clone(), k, t.clone());
                }
            }
            RecordKind::Attn => {
                let head = d.head as usize;
                if attn.matrix(&d.prompt_id, d.layer, head).is_some() {
                    return Err(duplicate());
                }
                let m = DenseMatrix::new(d.shape[0], d.shape[1], values)?;
                attn.insert_matrix(d.prompt_id.clone(), d.layer, head, m)
                    .map_err(|e| shape_error(d.label(i), e.to_string()))?;
            }
            RecordKind::AttnOut => {
                if attn.output(&d.prompt_id, d.layer).is_some() {
                    return Err(duplicate());
                }
                let m = DenseMatrix::new(d.shape[0], d.shape[1], values)?;
                attn.insert_output(d.prompt_id.clone(), d.layer, m)
                    .map_err(|e| shape_error(d.label(i), e.to_string()))?;
            }
        }
    }
    Ok((manifest, acts, attn))
}

pub fn read_rad_file(path: impl AsRef<Path>) -> Result<(RadManifest, ActivationSet, AttentionDump)> {
    read_rad(&std::fs::read(path)?)
}
