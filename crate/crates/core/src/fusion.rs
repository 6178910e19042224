//! Fusion of per-layer hidden states from several frozen upstream models.
//!
//! Five forward paths are supported:
//!
//! | mode              | fused quantity                                  | weight constraint        |
//! |-------------------|-------------------------------------------------|--------------------------|
//! | `naive`           | `F(Σ_i Σ_j w_ij h_ij)`                          | `Σ_i Σ_j w_ij = 1`       |
//! | `structured`      | `F(Σ_i p_i Σ_j w_ij h_ij)`                      | `∀i Σ_j w_ij = 1`, `Σ p = 1` |
//! | `prob-shared`     | `Σ_i p_i F(Σ_j w_ij h_ij)`                      | as structured            |
//! | `prob-individual` | `Σ_i p_i F_i(Σ_j w_ij h_ij)`                    | as structured            |
//! | `last-layer`      | `F(Σ_i v_i h_{i,L-1})`                          | `Σ v = 1`                |
//!
//! Every constrained weight vector is the softmax of unconstrained logits: one
//! global softmax for `naive`, one per model otherwise. The upstream stacks are
//! frozen, so backward passes only produce gradients for the logits.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, softmax_backward, softmax_stable, DenseArray};
use crate::stackio::LayerStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Naive,
    Structured,
    ProbShared,
    ProbIndividual,
    LastLayer,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Naive,
        FusionMode::Structured,
        FusionMode::ProbShared,
        FusionMode::ProbIndividual,
        FusionMode::LastLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Naive => "naive",
            FusionMode::Structured => "structured",
            FusionMode::ProbShared => "prob-shared",
            FusionMode::ProbIndividual => "prob-individual",
            FusionMode::LastLayer => "last-layer",
        }
    }

    /// Fusion happens after the head, on posteriors.
    pub fn is_probability_level(self) -> bool {
        matches!(self, FusionMode::ProbShared | FusionMode::ProbIndividual)
    }

    /// Whether all models must share the hidden dimension.
    pub fn requires_common_dim(self) -> bool {
        self != FusionMode::ProbIndividual
    }

    /// Number of downstream heads the mode trains.
    pub fn head_count(self, models: usize) -> usize {
        if self == FusionMode::ProbIndividual {
            models
        } else {
            1
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| {
                let valid: Vec<_> = FusionMode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown fusion mode '{s}'; valid modes: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// Trainable fusion state.
///
/// `layer_logits` holds a single vector of length `Σ_i L_i` (model-major) for
/// `naive`, one vector of length `L_i` per model for `structured` and the
/// probability modes, and nothing for `last-layer`. `model_logits` parametrize
/// `p` when `p_learnable` is set, and always parametrize the last-layer
/// weights `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub layer_logits: Vec<Vec<f64>>,
    pub model_logits: Vec<f64>,
    pub fixed_p: Vec<f64>,
    pub p_learnable: bool,
}

impl FusionParams {
    /// Zero logits (uniform weights) and `p = 1/m`.
    pub fn uniform(mode: FusionMode, layer_counts: &[usize], p_learnable: bool) -> Self {
        let m = layer_counts.len();
        let layer_logits = match mode {
            FusionMode::Naive => vec![vec![0.0; layer_counts.iter().sum()]],
            FusionMode::LastLayer => Vec::new(),
            _ => layer_counts.iter().map(|&l| vec![0.0; l]).collect(),
        };
        Self {
            layer_logits,
            model_logits: vec![0.0; m],
            fixed_p: vec![1.0 / m as f64; m],
            p_learnable,
        }
    }

    pub fn model_count(&self) -> usize {
        self.fixed_p.len()
    }

    /// Whether `model_logits` receive gradients in this mode.
    pub fn model_logits_trainable(&self, mode: FusionMode) -> bool {
        mode == FusionMode::LastLayer || (self.p_learnable && mode != FusionMode::Naive)
    }

    /// Checks logit shapes against the mode and the models' layer counts.
    pub fn check(&self, mode: FusionMode, layer_counts: &[usize]) -> Result<()> {
        let m = layer_counts.len();
        if m == 0 {
            return Err(Error::Config("fusion needs at least one model".into()));
        }
        if self.fixed_p.len() != m || self.model_logits.len() != m {
            return Err(Error::Config(format!(
                "params are for {} models, stacks provide {m}",
                self.fixed_p.len()
            )));
        }
        let ok = match mode {
            FusionMode::Naive => {
                self.layer_logits.len() == 1
                    && self.layer_logits[0].len() == layer_counts.iter().sum::<usize>()
            }
            FusionMode::LastLayer => self.layer_logits.is_empty(),
            _ => {
                self.layer_logits.len() == m
                    && self
                        .layer_logits
                        .iter()
                        .zip(layer_counts)
                        .all(|(v, &l)| v.len() == l)
            }
        };
        if !ok {
            return Err(Error::Config(format!(
                "layer logits {:?} do not fit mode {mode} with layer counts {layer_counts:?}",
                self.layer_logits.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// Model-level mixture: `p` for structured and probability modes, `v` for
    /// last-layer. Naive has none.
    pub fn mixture(&self, mode: FusionMode) -> Result<Vec<f64>> {
        match mode {
            FusionMode::LastLayer => softmax_stable(&self.model_logits),
            FusionMode::Naive => Err(Error::Config("naive fusion has no model mixture".into())),
            _ if self.p_learnable => softmax_stable(&self.model_logits),
            _ => Ok(self.fixed_p.clone()),
        }
    }

    /// Normalized layer weights per model.
    ///
    /// For naive fusion the rows are slices of one global distribution (only
    /// the grand total is 1). For last-layer fusion model `i` gets `v_i` on its
    /// final layer.
    pub fn layer_weights(&self, mode: FusionMode, layer_counts: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check(mode, layer_counts)?;
        match mode {
            FusionMode::Naive => {
                let flat = softmax_stable(&self.layer_logits[0])?;
                let mut rows = Vec::with_capacity(layer_counts.len());
                let mut at = 0;
                for &l in layer_counts {
                    rows.push(flat[at..at + l].to_vec());
                    at += l;
                }
                Ok(rows)
            }
            FusionMode::LastLayer => {
                let v = softmax_stable(&self.model_logits)?;
                Ok(layer_counts
                    .iter()
                    .zip(v)
                    .map(|(&l, vi)| {
                        let mut row = vec![0.0; l];
                        row[l - 1] = vi;
                        row
                    })
                    .collect())
            }
            _ => self.layer_logits.iter().map(|z| softmax_stable(z)).collect(),
        }
    }

    /// Coefficient on each `h_ij` in the fused feature(s). For feature-level
    /// modes these multiply into one shared sum; for probability modes row `i`
    /// is model `i`'s own branch.
    pub fn coefficients(&self, mode: FusionMode, layer_counts: &[usize]) -> Result<Vec<Vec<f64>>> {
        let w = self.layer_weights(mode, layer_counts)?;
        if mode == FusionMode::Structured {
            let p = self.mixture(mode)?;
            return Ok(w
                .into_iter()
                .zip(p)
                .map(|(row, pi)| row.into_iter().map(|x| pi * x).collect())
                .collect());
        }
        Ok(w)
    }
}

/// Input to a downstream head: `[T, d]` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub frames: DenseArray,
}

impl FusedFeature {
    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frames(&self) -> usize {
        self.frames.rows()
    }
}

fn layer_counts(stacks: &[LayerStack]) -> Vec<usize> {
    stacks.iter().map(LayerStack::layers).collect()
}

fn check_stacks(stacks: &[LayerStack], common_dim: bool) -> Result<()> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::Config("fusion needs at least one stack".into()))?;
    for (i, s) in stacks.iter().enumerate().skip(1) {
        if s.frames() != first.frames() {
            return Err(Error::Frame(format!(
                "model {} has {} frames, model 1 has {}",
                i + 1,
                s.frames(),
                first.frames()
            )));
        }
        if common_dim && s.dim() != first.dim() {
            return Err(Error::Dim(format!(
                "model {} has dim {}, model 1 has {}",
                i + 1,
                s.dim(),
                first.dim()
            )));
        }
    }
    Ok(())
}

/// `Σ_i Σ_j coeffs[i][j] · h_ij`, accumulated in (i, j) order.
fn weighted_sum<'a>(
    stacks: impl IntoIterator<Item = &'a LayerStack>,
    coeffs: impl IntoIterator<Item = &'a Vec<f64>>,
) -> FusedFeature {
    let mut out: Option<DenseArray> = None;
    for (stack, row) in stacks.into_iter().zip(coeffs) {
        let acc = out.get_or_insert_with(|| DenseArray::zeros(vec![stack.frames(), stack.dim()]));
        for (j, &c) in row.iter().enumerate() {
            axpy(acc.data_mut(), c, stack.layer(j));
        }
    }
    FusedFeature {
        frames: out.expect("at least one stack"),
    }
}

pub fn fuse_naive(stacks: &[LayerStack], params: &FusionParams) -> Result<FusedFeature> {
    check_stacks(stacks, true)?;
    let c = params.coefficients(FusionMode::Naive, &layer_counts(stacks))?;
    Ok(weighted_sum(stacks, &c))
}

pub fn fuse_structured(stacks: &[LayerStack], params: &FusionParams) -> Result<FusedFeature> {
    check_stacks(stacks, true)?;
    let c = params.coefficients(FusionMode::Structured, &layer_counts(stacks))?;
    Ok(weighted_sum(stacks, &c))
}

pub fn fuse_last_layer(stacks: &[LayerStack], params: &FusionParams) -> Result<FusedFeature> {
    check_stacks(stacks, true)?;
    let c = params.coefficients(FusionMode::LastLayer, &layer_counts(stacks))?;
    Ok(weighted_sum(stacks, &c))
}

/// Per-model weighted layer sums `Σ_j w_ij h_ij`, the branches of the
/// probability-level modes. `prob-shared` needs a common dim (one head reads
/// every branch); `prob-individual` does not.
pub fn fuse_per_model(
    mode: FusionMode,
    stacks: &[LayerStack],
    params: &FusionParams,
) -> Result<Vec<FusedFeature>> {
    if !mode.is_probability_level() {
        return Err(Error::Config(format!("{mode} is not a probability-level mode")));
    }
    check_stacks(stacks, mode.requires_common_dim())?;
    let w = params.layer_weights(mode, &layer_counts(stacks))?;
    Ok(stacks
        .iter()
        .zip(&w)
        .map(|(s, row)| weighted_sum([s], [row]))
        .collect())
}

/// Convex combination `Σ_i p_i · probs_i` of per-model posteriors, each
/// `[T, C]` (`T = 1` for utterance-level posteriors).
pub fn fuse_probabilities(per_model: &[DenseArray], p: &[f64]) -> Result<DenseArray> {
    let first = per_model
        .first()
        .ok_or_else(|| Error::Config("no posteriors to fuse".into()))?;
    if per_model.len() != p.len() {
        return Err(Error::Dim(format!(
            "{} posteriors but {} mixture weights",
            per_model.len(),
            p.len()
        )));
    }
    let mut out = DenseArray::zeros(first.shape().to_vec());
    for (probs, &pi) in per_model.iter().zip(p) {
        if probs.shape() != first.shape() {
            return Err(Error::Dim(format!(
                "posterior shape {:?} differs from {:?}",
                probs.shape(),
                first.shape()
            )));
        }
        axpy(out.data_mut(), pi, probs.data());
    }
    Ok(out)
}

/// Dispatches to the mode's forward path: one feature for feature-level modes,
/// one per model for probability-level modes.
pub fn fuse(mode: FusionMode, stacks: &[LayerStack], params: &FusionParams) -> Result<Vec<FusedFeature>> {
    match mode {
        FusionMode::Naive => fuse_naive(stacks, params).map(|f| vec![f]),
        FusionMode::Structured => fuse_structured(stacks, params).map(|f| vec![f]),
        FusionMode::LastLayer => fuse_last_layer(stacks, params).map(|f| vec![f]),
        FusionMode::ProbShared | FusionMode::ProbIndividual => fuse_per_model(mode, stacks, params),
    }
}

/// Gradient arriving at the fusion outputs.
#[derive(Debug, Clone)]
pub struct FusionUpstream {
    /// `dL/dfeature` for each output of [`fuse`].
    pub features: Vec<DenseArray>,
    /// `dL/dp_i` from the probability mixture (probability modes only).
    pub mixture: Option<Vec<f64>>,
}

/// Gradients shaped like [`FusionParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub layer_logits: Vec<Vec<f64>>,
    pub model_logits: Vec<f64>,
}

pub fn fusion_backward(
    mode: FusionMode,
    stacks: &[LayerStack],
    params: &FusionParams,
    upstream: &FusionUpstream,
) -> Result<FusionGrads> {
    check_stacks(stacks, mode.requires_common_dim())?;
    let counts = layer_counts(stacks);
    params.check(mode, &counts)?;
    let m = stacks.len();

    let expected_outputs = if mode.is_probability_level() { m } else { 1 };
    if upstream.features.len() != expected_outputs {
        return Err(Error::Config(format!(
            "{mode} expects {expected_outputs} upstream gradients, got {}",
            upstream.features.len()
        )));
    }
    for (k, g) in upstream.features.iter().enumerate() {
        let s = &stacks[k.min(m - 1)];
        if g.len() != s.frames() * s.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {k} has {} values, feature has {}",
                g.len(),
                s.frames() * s.dim()
            )));
        }
    }

    // dL/dc_ij: contraction of the upstream gradient with each frozen layer.
    let dcoef: Vec<Vec<f64>> = stacks
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let g = &upstream.features[if mode.is_probability_level() { i } else { 0 }];
            (0..s.layers()).map(|j| dot(s.layer(j), g.data())).collect()
        })
        .collect();

    let mut grads = FusionGrads {
        layer_logits: params.layer_logits.iter().map(|v| vec![0.0; v.len()]).collect(),
        model_logits: vec![0.0; m],
    };

    match mode {
        FusionMode::Naive => {
            let u = softmax_stable(&params.layer_logits[0])?;
            grads.layer_logits[0] = softmax_backward(&u, &dcoef.concat());
        }
        FusionMode::LastLayer => {
            let v = softmax_stable(&params.model_logits)?;
            let dv: Vec<f64> = dcoef.iter().map(|row| row[row.len() - 1]).collect();
            grads.model_logits = softmax_backward(&v, &dv);
        }
        FusionMode::Structured | FusionMode::ProbShared | FusionMode::ProbIndividual => {
            let p = params.mixture(mode)?;
            let mut dp = vec![0.0; m];
            for i in 0..m {
                let w = softmax_stable(&params.layer_logits[i])?;
                let dw: Vec<f64> = if mode == FusionMode::Structured {
                    dp[i] = dot(&w, &dcoef[i]);
                    dcoef[i].iter().map(|g| p[i] * g).collect()
                } else {
                    dcoef[i].clone()
                };
                grads.layer_logits[i] = softmax_backward(&w, &dw);
            }
            if mode.is_probability_level() {
                match &upstream.mixture {
                    Some(g) if g.len() == m => dp.copy_from_slice(g),
                    Some(g) => {
                        return Err(Error::Config(format!(
                            "mixture gradient has {} entries for {m} models",
                            g.len()
                        )))
                    }
                    None => {}
                }
            }
            if params.p_learnable {
                grads.model_logits = softmax_backward(&p, &dp);
            }
        }
    }
    Ok(grads)
}
