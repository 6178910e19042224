//! Fusion layer plus downstream head(s) as one trainable unit, with a flat
//! parameter view for optimizers and gradient checks.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse, fuse_probabilities, fusion_backward, FusionMode, FusionParams, FusionUpstream};
use crate::heads::{
    cross_entropy_loss, ctc_loss, head_backward, head_forward, DownstreamHead, HeadKind, HeadUpstream, LossGrad,
};
use crate::numerics::{dot, DenseArray};
use crate::stackio::{Label, LayerStack, TaskKind};

pub fn head_kind(task: TaskKind) -> HeadKind {
    match task {
        TaskKind::UtteranceClassification => HeadKind::Utterance,
        TaskKind::SequenceTranscription => HeadKind::FrameCtc,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub mode: FusionMode,
    pub fusion: FusionParams,
    /// One head, or one per model for `prob-individual`.
    pub heads: Vec<DownstreamHead>,
}

/// Which optimizer settings a flat parameter range uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Fusion,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub range: Range<usize>,
    pub kind: GroupKind,
    pub trainable: bool,
}

impl FusionModel {
    /// Zero fusion logits and seeded uniform head weights.
    pub fn init<R: Rng>(
        mode: FusionMode,
        task: TaskKind,
        model_dims: &[(usize, usize)],
        label_count: usize,
        p_learnable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if model_dims.is_empty() {
            return Err(Error::Config("no models to fuse".into()));
        }
        if mode.requires_common_dim() && model_dims.windows(2).any(|w| w[0].1 != w[1].1) {
            return Err(Error::Config(format!(
                "{mode} fusion needs a common hidden dim, models have {:?}",
                model_dims.iter().map(|d| d.1).collect::<Vec<_>>()
            )));
        }
        let layer_counts: Vec<usize> = model_dims.iter().map(|d| d.0).collect();
        let heads = (0..mode.head_count(model_dims.len()))
            .map(|k| DownstreamHead::init_uniform(head_kind(task), model_dims[k].1, label_count, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            mode,
            fusion: FusionParams::uniform(mode, &layer_counts, p_learnable),
            heads,
        })
    }

    fn head_for(&self, branch: usize) -> usize {
        if self.heads.len() == 1 {
            0
        } else {
            branch
        }
    }

    /// Final posterior `[rows, C]` after any probability-level mixing.
    pub fn posterior(&self, stacks: &[LayerStack]) -> Result<DenseArray> {
        let features = fuse(self.mode, stacks, &self.fusion)?;
        if !self.mode.is_probability_level() {
            return Ok(head_forward(&self.heads[0], &features[0])?.probs);
        }
        let branches = features
            .iter()
            .enumerate()
            .map(|(i, f)| head_forward(&self.heads[self.head_for(i)], f).map(|p| p.probs))
            .collect::<Result<Vec<_>>>()?;
        fuse_probabilities(&branches, &self.fusion.mixture(self.mode)?)
    }

    pub fn loss(&self, stacks: &[LayerStack], label: &Label) -> Result<f64> {
        Ok(task_loss(&self.posterior(stacks)?, label)?.loss)
    }

    /// Loss and the flat gradient (same layout as [`Self::flat_params`]).
    /// Non-trainable entries are left at zero.
    pub fn loss_and_grad(&self, stacks: &[LayerStack], label: &Label) -> Result<(f64, Vec<f64>)> {
        let features = fuse(self.mode, stacks, &self.fusion)?;
        let mut head_grads: Vec<(DenseArray, Vec<f64>)> = self
            .heads
            .iter()
            .map(|h| (DenseArray::zeros(h.weight.shape().to_vec()), vec![0.0; h.bias.len()]))
            .collect();

        let (loss, upstream) = if !self.mode.is_probability_level() {
            let post = head_forward(&self.heads[0], &features[0])?;
            let lg = task_loss(&post.probs, label)?;
            let g = head_backward(&self.heads[0], &features[0], &HeadUpstream::Logits(lg.logit_grad))?;
            head_grads[0] = (g.weight, g.bias);
            (
                lg.loss,
                FusionUpstream {
                    features: vec![g.feature],
                    mixture: None,
                },
            )
        } else {
            let p = self.fusion.mixture(self.mode)?;
            let branches = features
                .iter()
                .enumerate()
                .map(|(i, f)| head_forward(&self.heads[self.head_for(i)], f).map(|q| q.probs))
                .collect::<Result<Vec<_>>>()?;
            let fused = fuse_probabilities(&branches, &p)?;
            let lg = task_loss(&fused, label)?;
            let mut feature_grads = Vec::with_capacity(features.len());
            let mut mixture = Vec::with_capacity(features.len());
            for (i, (f, q)) in features.iter().zip(&branches).enumerate() {
                mixture.push(dot(lg.posterior_grad.data(), q.data()));
                let mut gq = lg.posterior_grad.clone();
                gq.data_mut().iter_mut().for_each(|v| *v *= p[i]);
                let k = self.head_for(i);
                let g = head_backward(&self.heads[k], f, &HeadUpstream::Posterior(gq))?;
                // a shared head accumulates every branch's contribution
                let (w, b) = &mut head_grads[k];
                crate::numerics::axpy(w.data_mut(), 1.0, g.weight.data());
                crate::numerics::axpy(b, 1.0, &g.bias);
                feature_grads.push(g.feature);
            }
            (
                lg.loss,
                FusionUpstream {
                    features: feature_grads,
                    mixture: Some(mixture),
                },
            )
        };

        let fg = fusion_backward(self.mode, stacks, &self.fusion, &upstream)?;
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend(fg.layer_logits.iter().flatten());
        if self.fusion.model_logits_trainable(self.mode) {
            flat.extend(&fg.model_logits);
        } else {
            flat.extend(std::iter::repeat_n(0.0, fg.model_logits.len()));
        }
        for (w, b) in &head_grads {
            flat.extend(w.data());
            flat.extend(b);
        }
        Ok((loss, flat))
    }

    pub fn param_count(&self) -> usize {
        self.param_groups().last().map_or(0, |g| g.range.end)
    }

    /// Layout of [`Self::flat_params`]: layer logits, model logits, then each
    /// head's weight and bias.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut groups = Vec::new();
        let mut at = 0;
        let mut push = |name: String, len: usize, kind, trainable| {
            groups.push(ParamGroup {
                name,
                range: at..at + len,
                kind,
                trainable,
            });
            at += len;
        };
        let layer_len = self.fusion.layer_logits.iter().map(Vec::len).sum();
        push("fusion.layer_logits".into(), layer_len, GroupKind::Fusion, true);
        push(
            "fusion.model_logits".into(),
            self.fusion.model_logits.len(),
            GroupKind::Fusion,
            self.fusion.model_logits_trainable(self.mode),
        );
        for (k, h) in self.heads.iter().enumerate() {
            push(format!("head{}.weight", k + 1), h.weight.len(), GroupKind::Head, true);
            push(format!("head{}.bias", k + 1), h.bias.len(), GroupKind::Head, true);
        }
        groups
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend(self.fusion.layer_logits.iter().flatten());
        flat.extend(&self.fusion.model_logits);
        for h in &self.heads {
            flat.extend(h.weight.data());
            flat.extend(&h.bias);
        }
        flat
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for v in self.fusion.layer_logits.iter_mut().flatten() {
            *v = it.next().unwrap();
        }
        for v in &mut self.fusion.model_logits {
            *v = it.next().unwrap();
        }
        for h in &mut self.heads {
            for v in h.weight.data_mut() {
                *v = it.next().unwrap();
            }
            for v in &mut h.bias {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }
}

/// Loss of a final posterior against a label; classification uses cross
/// entropy, transcription uses CTC.
pub fn task_loss(posterior: &DenseArray, label: &Label) -> Result<LossGrad> {
    match label {
        Label::Class(c) => cross_entropy_loss(posterior, *c),
        Label::Transcript(y) => ctc_loss(posterior, y),
    }
}
