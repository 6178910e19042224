//! Downstream heads and their objectives.
//!
//! Both heads are a single affine map followed by softmax. The utterance head
//! mean-pools frames first; the CTC head scores every frame. Losses take
//! posteriors rather than logits because probability-level fusion mixes
//! posteriors before the loss sees them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedFeature;
use crate::numerics::{affine, argmax, mean_pool, softmax_backward, softmax_stable, DenseArray};

/// Blank label index for CTC.
pub const BLANK: usize = 0;

/// Floor added inside logs of (possibly mixed) posteriors.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Utterance,
    FrameCtc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamHead {
    pub kind: HeadKind,
    /// `[C, d]`
    pub weight: DenseArray,
    pub bias: Vec<f64>,
}

impl DownstreamHead {
    pub fn zeros(kind: HeadKind, input_dim: usize, output_dim: usize) -> Result<Self> {
        if kind == HeadKind::FrameCtc && output_dim < 2 {
            return Err(Error::Config(format!(
                "CTC head needs blank plus at least one token, got {output_dim} outputs"
            )));
        }
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        Ok(Self {
            kind,
            weight: DenseArray::zeros(vec![output_dim, input_dim]),
            bias: vec![0.0; output_dim],
        })
    }

    /// Weights uniform in `±1/sqrt(d)`, zero bias.
    pub fn init_uniform<R: Rng>(kind: HeadKind, input_dim: usize, output_dim: usize, rng: &mut R) -> Result<Self> {
        let mut head = Self::zeros(kind, input_dim, output_dim)?;
        let bound = 1.0 / (input_dim as f64).sqrt();
        for w in head.weight.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
        Ok(head)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Posterior(s) over the label space: `[1, C]` for utterance heads, `[T, C]`
/// for frame heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPosterior {
    pub kind: HeadKind,
    pub probs: DenseArray,
}

impl TaskPosterior {
    pub fn utterance(&self) -> &[f64] {
        self.probs.row(0)
    }
}

/// Head input after pooling: one row for utterance heads, every frame for CTC.
fn head_inputs(head: &DownstreamHead, feature: &FusedFeature) -> Result<DenseArray> {
    if feature.dim() != head.input_dim() {
        return Err(Error::Dim(format!(
            "feature dim {} does not match head input dim {}",
            feature.dim(),
            head.input_dim()
        )));
    }
    match head.kind {
        HeadKind::Utterance => DenseArray::new(vec![1, feature.dim()], mean_pool(&feature.frames)?),
        HeadKind::FrameCtc => Ok(feature.frames.clone()),
    }
}

pub fn head_forward(head: &DownstreamHead, feature: &FusedFeature) -> Result<TaskPosterior> {
    let inputs = head_inputs(head, feature)?;
    let mut probs = DenseArray::zeros(vec![inputs.rows(), head.output_dim()]);
    for r in 0..inputs.rows() {
        let z = affine(inputs.row(r), &head.weight, &head.bias)?;
        probs.row_mut(r).copy_from_slice(&softmax_stable(&z)?);
    }
    Ok(TaskPosterior { kind: head.kind, probs })
}

/// Gradient fed into [`head_backward`].
#[derive(Debug, Clone)]
pub enum HeadUpstream {
    /// `dL/dz` for the pre-softmax logits, one row per head output row.
    Logits(DenseArray),
    /// `dL/dposterior`; converted through the softmax Jacobian.
    Posterior(DenseArray),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub weight: DenseArray,
    pub bias: Vec<f64>,
    /// `dL/dfeature`, `[T, d]`.
    pub feature: DenseArray,
}

pub fn head_backward(head: &DownstreamHead, feature: &FusedFeature, upstream: &HeadUpstream) -> Result<HeadGrads> {
    let inputs = head_inputs(head, feature)?;
    let logit_grad = match upstream {
        HeadUpstream::Logits(g) => g.clone(),
        HeadUpstream::Posterior(g) => {
            let post = head_forward(head, feature)?;
            let mut out = DenseArray::zeros(post.probs.shape().to_vec());
            for r in 0..post.probs.rows() {
                out.row_mut(r)
                    .copy_from_slice(&softmax_backward(post.probs.row(r), g.row(r)));
            }
            out
        }
    };
    if logit_grad.rows() != inputs.rows() || logit_grad.cols() != head.output_dim() {
        return Err(Error::Shape(format!(
            "logit gradient {:?} does not match head output [{}, {}]",
            logit_grad.shape(),
            inputs.rows(),
            head.output_dim()
        )));
    }

    let (c, d) = (head.output_dim(), head.input_dim());
    let mut weight = DenseArray::zeros(vec![c, d]);
    let mut bias = vec![0.0; c];
    let mut input_grad = DenseArray::zeros(vec![inputs.rows(), d]);
    for r in 0..inputs.rows() {
        let (x, gz) = (inputs.row(r), logit_grad.row(r));
        for k in 0..c {
            bias[k] += gz[k];
            let wrow = weight.row_mut(k);
            for (w, xv) in wrow.iter_mut().zip(x) {
                *w += gz[k] * xv;
            }
        }
        let gx = input_grad.row_mut(r);
        for k in 0..c {
            for (g, w) in gx.iter_mut().zip(head.weight.row(k)) {
                *g += gz[k] * w;
            }
        }
    }

    let feature_grad = match head.kind {
        HeadKind::FrameCtc => input_grad,
        HeadKind::Utterance => {
            // mean pooling spreads the gradient evenly over frames
            let t = feature.frames();
            let per_frame: Vec<f64> = input_grad.row(0).iter().map(|g| g / t as f64).collect();
            DenseArray::new(vec![t, d], per_frame.repeat(t))?
        }
    };
    Ok(HeadGrads {
        weight,
        bias,
        feature: feature_grad,
    })
}

/// A loss value with its gradient w.r.t. the posterior it was computed from,
/// and w.r.t. the logits that posterior would be the softmax of.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub posterior_grad: DenseArray,
    pub logit_grad: DenseArray,
}

fn logit_grad_from(probs: &DenseArray, posterior_grad: &DenseArray) -> DenseArray {
    let mut out = DenseArray::zeros(probs.shape().to_vec());
    for r in 0..probs.rows() {
        out.row_mut(r)
            .copy_from_slice(&softmax_backward(probs.row(r), posterior_grad.row(r)));
    }
    out
}

/// `-ln(max(posterior[class], 1e-12))`; the clamp only guards against
/// `ln 0`, and a clamped probability has zero gradient.
pub fn cross_entropy_loss(posterior: &DenseArray, class_id: usize) -> Result<LossGrad> {
    let c = posterior.cols();
    if class_id >= c {
        return Err(Error::Label(format!("class {class_id} outside 0..{c}")));
    }
    let p = posterior.row(0)[class_id];
    let mut posterior_grad = DenseArray::zeros(vec![1, c]);
    if p > LOG_FLOOR {
        posterior_grad.data_mut()[class_id] = -1.0 / p;
    }
    Ok(LossGrad {
        loss: -p.max(LOG_FLOOR).ln(),
        logit_grad: logit_grad_from(posterior, &posterior_grad),
        posterior_grad,
    })
}

/// Minimum frames needed to emit `transcript`: one per token plus a blank
/// between each pair of equal neighbours.
pub fn ctc_min_frames(transcript: &[usize]) -> usize {
    transcript.len() + transcript.windows(2).filter(|w| w[0] == w[1]).count()
}

fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
    }
}

/// Negative log-likelihood of `transcript` under per-frame posteriors `[T, C]`,
/// marginalized over all blank-interleaved alignments (forward-backward in
/// log space).
pub fn ctc_loss(frame_posteriors: &DenseArray, transcript: &[usize]) -> Result<LossGrad> {
    let (t_len, c) = (frame_posteriors.rows(), frame_posteriors.cols());
    if let Some(&bad) = transcript.iter().find(|&&k| k == BLANK || k >= c) {
        return Err(Error::Label(format!("token {bad} outside 1..{c}")));
    }
    let required = ctc_min_frames(transcript);
    if required > t_len {
        return Err(Error::Alignment {
            len: transcript.len(),
            required,
            frames: t_len,
        });
    }

    // extended label: blank, y1, blank, y2, ..., blank
    let mut ext = Vec::with_capacity(2 * transcript.len() + 1);
    ext.push(BLANK);
    for &k in transcript {
        ext.push(k);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let log_y: Vec<f64> = frame_posteriors
        .data()
        .iter()
        .map(|&p| p.max(LOG_FLOOR).ln())
        .collect();
    let ly = |t: usize, k: usize| log_y[t * c + k];
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = ly(0, ext[0]);
    if s_len > 1 {
        alpha[1] = ly(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let stay = prev[s];
            let step = if s >= 1 { prev[s - 1] } else { ninf };
            let skip = if can_skip(s) { prev[s - 2] } else { ninf };
            let acc = lse3(stay, step, skip);
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + ly(t, ext[s]) };
        }
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + ly(t + 1, ext[s2]);
            let stay = next(s);
            let step = if s + 1 < s_len { next(s + 1) } else { ninf };
            let skip = if s + 2 < s_len && can_skip(s + 2) { next(s + 2) } else { ninf };
            beta[t * s_len + s] = lse3(stay, step, skip);
        }
    }

    let end = &alpha[last..];
    let log_p = if s_len > 1 {
        lse2(end[s_len - 1], end[s_len - 2])
    } else {
        end[0]
    };

    let mut posterior_grad = DenseArray::zeros(vec![t_len, c]);
    for t in 0..t_len {
        let row = posterior_grad.row_mut(t);
        for s in 0..s_len {
            let a = alpha[t * s_len + s] + beta[t * s_len + s];
            if a != ninf {
                row[ext[s]] += (a - log_p).exp();
            }
        }
        for (k, g) in row.iter_mut().enumerate() {
            // occupancy / y, negated; clamped entries are constant in y
            let y = frame_posteriors.row(t)[k];
            *g = if y > LOG_FLOOR { -*g / y } else { 0.0 };
        }
    }
    Ok(LossGrad {
        loss: -log_p,
        logit_grad: logit_grad_from(frame_posteriors, &posterior_grad),
        posterior_grad,
    })
}

/// Best-path decoding: per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy_decode(frame_posteriors: &DenseArray) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..frame_posteriors.rows() {
        let k = argmax(frame_posteriors.row(t));
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}
