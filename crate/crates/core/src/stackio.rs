//! Per-utterance layer stacks and the manifest that ties them to labels.
//!
//! Stack files ("LSK1") are a 16-byte header followed by raw little-endian
//! `f32` values:
//!
//! ```text
//! b"LSK1" | L: u32 | T: u32 | d: u32 | L*T*d x f32, row-major [layer, frame, dim]
//! ```
//!
//! Layer 0 is the upstream model's pre-encoder feature, so a base model with
//! 12 transformer layers has `L = 13`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

pub const STACK_MAGIC: &[u8; 4] = b"LSK1";
pub const STACK_HEADER_LEN: usize = 16;

/// Hidden states of one upstream model for one utterance, `[L, T, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    values: DenseArray,
}

impl LayerStack {
    pub fn new(layers: usize, frames: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        let values = DenseArray::new(vec![layers, frames, dim], values)?;
        if let Some(index) = values.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite stack value at flat index {index}")));
        }
        Ok(Self { values })
    }

    pub fn layers(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    /// All frames of layer `j`, `T*d` values.
    pub fn layer(&self, j: usize) -> &[f64] {
        let n = self.frames() * self.dim();
        &self.values.data()[j * n..(j + 1) * n]
    }

    pub fn frame(&self, j: usize, t: usize) -> &[f64] {
        let d = self.dim();
        &self.layer(j)[t * d..(t + 1) * d]
    }

    /// Replaces every layer by its mean over frames, giving a `[L, 1, d]`
    /// stack. All fusion forwards are linear, so fusing pooled stacks equals
    /// pooling the fused feature.
    pub fn pooled(&self) -> LayerStack {
        let (l, t, d) = (self.layers(), self.frames(), self.dim());
        let mut out = Vec::with_capacity(l * d);
        for j in 0..l {
            let mut acc = vec![0.0; d];
            for f in 0..t {
                for (a, v) in acc.iter_mut().zip(self.frame(j, f)) {
                    *a += v;
                }
            }
            out.extend(acc.into_iter().map(|a| a / t as f64));
        }
        LayerStack {
            values: DenseArray::new(vec![l, 1, d], out).expect("pooled shape"),
        }
    }
}

pub fn save_stack(stack: &LayerStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(STACK_HEADER_LEN + 4 * stack.values.len());
    buf.extend_from_slice(STACK_MAGIC);
    for extent in [stack.layers(), stack.frames(), stack.dim()] {
        let extent = u32::try_from(extent)
            .map_err(|_| Error::format(path, format!("extent {extent} exceeds u32")))?;
        buf.extend_from_slice(&extent.to_le_bytes());
    }
    for &v in stack.values.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_stack(path: impl AsRef<Path>) -> Result<LayerStack> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_stack(&bytes, path)
}

fn decode_stack(bytes: &[u8], path: &Path) -> Result<LayerStack> {
    if bytes.len() < STACK_HEADER_LEN {
        return Err(Error::format(
            path,
            format!("header needs {STACK_HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..4] != STACK_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}", &bytes[..4])));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (l, t, d) = (read_u32(4), read_u32(8), read_u32(12));
    if l == 0 || t == 0 || d == 0 {
        return Err(Error::format(path, format!("zero extent in header L={l} T={t} d={d}")));
    }
    let expected = l
        .checked_mul(t)
        .and_then(|n| n.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(STACK_HEADER_LEN))
        .ok_or_else(|| Error::format(path, "header extents overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "truncated or oversized payload: expected {expected} bytes, got {}",
                bytes.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(l * t * d);
    for (index, chunk) in bytes[STACK_HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite {
                path: path.to_path_buf(),
                index,
            });
        }
        values.push(f64::from(v));
    }
    LayerStack::new(l, t, d, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    UtteranceClassification,
    SequenceTranscription,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Transcript(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub label: Label,
    /// One stack file per model, already resolved against the manifest's
    /// directory.
    pub stack_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub task_kind: TaskKind,
    /// Class count for classification, vocabulary size (blank included) for
    /// transcription.
    pub label_count: usize,
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    /// Model count `m`; zero for an empty manifest.
    pub fn model_count(&self) -> usize {
        self.records.first().map_or(0, |r| r.stack_paths.len())
    }
}

/// Optional first line of a manifest declaring the task and label space.
#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab_size: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transcript: Option<Vec<usize>>,
    stacks: Vec<String>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut header: Option<ManifestHeader> = None;
    let mut lines = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))?;
        if value.get("id").is_none() && value.get("task_kind").is_some() {
            if header.is_some() || !lines.is_empty() {
                return Err(Error::Manifest(format!(
                    "line {}: header must be the first line",
                    n + 1
                )));
            }
            header = Some(
                serde_json::from_value(value)
                    .map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))?,
            );
            continue;
        }
        let parsed: ManifestLine = serde_json::from_value(value)
            .map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))?;
        lines.push((n + 1, parsed));
    }

    let mut records = Vec::with_capacity(lines.len());
    let mut arity = None;
    for (n, line) in lines {
        if *arity.get_or_insert(line.stacks.len()) != line.stacks.len() {
            return Err(Error::Manifest(format!(
                "line {n}: record {} lists {} stacks, earlier records list {}",
                line.id,
                line.stacks.len(),
                arity.unwrap()
            )));
        }
        if line.stacks.is_empty() {
            return Err(Error::Manifest(format!("line {n}: record {} has no stacks", line.id)));
        }
        let label = match (line.label, line.transcript) {
            (Some(c), None) => Label::Class(c),
            (None, Some(t)) => Label::Transcript(t),
            _ => {
                return Err(Error::Manifest(format!(
                    "line {n}: record {} needs exactly one of label/transcript",
                    line.id
                )))
            }
        };
        let stack_paths = line
            .stacks
            .iter()
            .map(|s| {
                let p = PathBuf::from(s);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            })
            .collect();
        records.push(UtteranceRecord {
            id: line.id,
            label,
            stack_paths,
        });
    }

    let task_kind = match (&header, records.first()) {
        (Some(h), _) => h.task_kind,
        (None, Some(UtteranceRecord { label: Label::Transcript(_), .. })) => {
            TaskKind::SequenceTranscription
        }
        _ => TaskKind::UtteranceClassification,
    };
    let declared = header.as_ref().and_then(|h| match task_kind {
        TaskKind::UtteranceClassification => h.class_count,
        TaskKind::SequenceTranscription => h.vocab_size,
    });

    let mut max_label = 0;
    for r in &records {
        match (&r.label, task_kind) {
            (Label::Class(c), TaskKind::UtteranceClassification) => max_label = max_label.max(*c),
            (Label::Transcript(t), TaskKind::SequenceTranscription) => {
                if let Some(pos) = t.iter().position(|&tok| tok == 0) {
                    return Err(Error::Manifest(format!(
                        "record {}: token {pos} is the reserved blank id 0",
                        r.id
                    )));
                }
                max_label = max_label.max(t.iter().copied().max().unwrap_or(0));
            }
            _ => {
                return Err(Error::Manifest(format!(
                    "record {}: label type does not match task kind {task_kind:?}",
                    r.id
                )))
            }
        }
    }
    let label_count = match declared {
        Some(n) => {
            if !records.is_empty() && max_label >= n {
                return Err(Error::Manifest(format!(
                    "label id {max_label} outside declared range 0..{n}"
                )));
            }
            n
        }
        None if records.is_empty() => 0,
        None => match task_kind {
            TaskKind::UtteranceClassification => max_label + 1,
            TaskKind::SequenceTranscription => (max_label + 1).max(2),
        },
    };

    Ok(Manifest {
        task_kind,
        label_count,
        records,
    })
}

/// Writes a manifest with a header line. Stack paths are written relative to
/// the manifest's directory when possible.
pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let header = ManifestHeader {
        task_kind: manifest.task_kind,
        class_count: (manifest.task_kind == TaskKind::UtteranceClassification)
            .then_some(manifest.label_count),
        vocab_size: (manifest.task_kind == TaskKind::SequenceTranscription)
            .then_some(manifest.label_count),
    };
    let mut out = Vec::new();
    writeln!(out, "{}", to_json(&header)).unwrap();
    for r in &manifest.records {
        let (label, transcript) = match &r.label {
            Label::Class(c) => (Some(*c), None),
            Label::Transcript(t) => (None, Some(t.clone())),
        };
        let stacks = r
            .stack_paths
            .iter()
            .map(|p| {
                p.strip_prefix(base)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned()
            })
            .collect();
        let line = ManifestLine {
            id: r.id.clone(),
            label,
            transcript,
            stacks,
        };
        writeln!(out, "{}", to_json(&line)).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("manifest line serializes")
}

/// Outcome of opening every stack referenced by a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    /// `(L, d)` per model as observed on the first record.
    pub model_dims: Vec<(usize, usize)>,
    /// Shared frame count per record, in manifest order.
    pub frame_counts: Vec<usize>,
    /// Human-readable inconsistencies; empty for a clean corpus.
    pub mismatches: Vec<String>,
    /// Naive/structured/shared-head fusion need one common `d`.
    pub feature_fusion_available: bool,
}

pub fn validate_corpus(
    manifest: &Manifest,
    expected_dims: Option<&[(usize, usize)]>,
) -> Result<CorpusReport> {
    let m = manifest.model_count();
    let mut model_dims: Vec<(usize, usize)> = Vec::new();
    let mut frame_counts = Vec::with_capacity(manifest.records.len());
    let mut mismatches = Vec::new();
    let mut frame_errors = Vec::new();

    if let Some(expected) = expected_dims {
        if expected.len() != m && !manifest.records.is_empty() {
            mismatches.push(format!(
                "expected dims for {} models, manifest has {m}",
                expected.len()
            ));
        }
    }

    for record in &manifest.records {
        let mut frames = Vec::with_capacity(m);
        for (i, p) in record.stack_paths.iter().enumerate() {
            let stack = load_stack(p)?;
            let dims = (stack.layers(), stack.dim());
            if model_dims.len() <= i {
                model_dims.push(dims);
            } else if model_dims[i] != dims {
                mismatches.push(format!(
                    "record {}: model {} has (L, d) = {dims:?}, expected {:?}",
                    record.id,
                    i + 1,
                    model_dims[i]
                ));
            }
            if let Some(want) = expected_dims.and_then(|e| e.get(i)) {
                if *want != dims {
                    mismatches.push(format!(
                        "record {}: model {} has (L, d) = {dims:?}, configured {want:?}",
                        record.id,
                        i + 1
                    ));
                }
            }
            frames.push(stack.frames());
        }
        if frames.windows(2).any(|w| w[0] != w[1]) {
            frame_errors.push(format!("{} (frames {frames:?})", record.id));
        }
        frame_counts.push(frames.first().copied().unwrap_or(0));
    }

    if !frame_errors.is_empty() {
        return Err(Error::Validation(format!(
            "models disagree on frame count in records: {}",
            frame_errors.join(", ")
        )));
    }

    let feature_fusion_available = model_dims.windows(2).all(|w| w[0].1 == w[1].1);
    if !feature_fusion_available {
        mismatches.push(format!(
            "model dims differ {:?}: feature-level and shared-head fusion unavailable",
            model_dims.iter().map(|d| d.1).collect::<Vec<_>>()
        ));
    }

    Ok(CorpusReport {
        model_dims,
        frame_counts,
        mismatches,
        feature_fusion_available,
    })
}
