//! Synthetic corpora with complementary "upstream models".
//!
//! Each utterance has a speaker-like class id and a content-like token
//! sequence. Every model encodes both with a per-model strength and a
//! bump-shaped profile over layers. Speaker evidence lives in a per-model
//! embedding space while content evidence shares one space. Class evidence
//! peaks late in odd-numbered models and early in even-numbered ones, token
//! evidence peaks in the middle layers. With the default acceptance settings
//! model 1 is the speaker specialist and model 2 the content specialist,
//! and model 2's activations are four times larger than model 1's.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::stackio::{save_stack, write_manifest, Label, LayerStack, Manifest, TaskKind, UtteranceRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub model_count: usize,
    pub layer_count: usize,
    pub dim: usize,
    pub class_count: usize,
    /// Includes the blank id 0.
    pub vocab_size: usize,
    pub utterance_count: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Per-model strength of the class signal, in `[0, 1]`.
    pub class_specialization: Vec<f64>,
    /// Per-model strength of the token signal, in `[0, 1]`.
    pub token_specialization: Vec<f64>,
    /// Std of i.i.d. noise on every value.
    pub noise_std: f64,
    /// Std of a per-utterance, per-model offset shared by all frames and
    /// layers (a channel/session effect that pooling cannot average away).
    pub session_noise_std: f64,
    /// Per-model multiplier on every value (signal and noise alike).
    pub model_scale: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    /// The acceptance corpus: two complementary 13-layer models.
    fn default() -> Self {
        Self {
            model_count: 2,
            layer_count: 13,
            dim: 16,
            class_count: 20,
            vocab_size: 12,
            utterance_count: 400,
            min_frames: 20,
            max_frames: 40,
            class_specialization: vec![1.0, 0.7],
            token_specialization: vec![0.8, 1.0],
            noise_std: 0.5,
            session_noise_std: 0.2,
            model_scale: vec![1.0, 4.0],
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "model_count",
    "layer_count",
    "dim",
    "class_count",
    "vocab_size",
    "utterance_count",
    "min_frames",
    "max_frames",
    "class_specialization",
    "token_specialization",
    "noise_std",
    "session_noise_std",
    "model_scale",
    "seed",
];

impl SyntheticTaskSpec {
    /// Missing keys keep their [`Default`] values.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(KEYS)?;
        let d = Self::default();
        let spec = Self {
            model_count: kv.get("model_count")?.unwrap_or(d.model_count),
            layer_count: kv.get("layer_count")?.unwrap_or(d.layer_count),
            dim: kv.get("dim")?.unwrap_or(d.dim),
            class_count: kv.get("class_count")?.unwrap_or(d.class_count),
            vocab_size: kv.get("vocab_size")?.unwrap_or(d.vocab_size),
            utterance_count: kv.get("utterance_count")?.unwrap_or(d.utterance_count),
            min_frames: kv.get("min_frames")?.unwrap_or(d.min_frames),
            max_frames: kv.get("max_frames")?.unwrap_or(d.max_frames),
            class_specialization: kv.get_list("class_specialization")?.unwrap_or(d.class_specialization),
            token_specialization: kv.get_list("token_specialization")?.unwrap_or(d.token_specialization),
            noise_std: kv.get("noise_std")?.unwrap_or(d.noise_std),
            session_noise_std: kv.get("session_noise_std")?.unwrap_or(d.session_noise_std),
            model_scale: match (kv.get_list("model_scale")?, kv.get("model_count")?) {
                (Some(v), _) => v,
                (None, Some(m)) if m != d.model_count => vec![1.0; m],
                (None, _) => d.model_scale,
            },
            seed: kv.get("seed")?.unwrap_or(d.seed),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_key_values(&self) -> String {
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(", ");
        format!(
            "model_count = {}\nlayer_count = {}\ndim = {}\nclass_count = {}\nvocab_size = {}\n\
             utterance_count = {}\nmin_frames = {}\nmax_frames = {}\nclass_specialization = {}\n\
             token_specialization = {}\nnoise_std = {}\nsession_noise_std = {}\nmodel_scale = {}\nseed = {}\n",
            self.model_count,
            self.layer_count,
            self.dim,
            self.class_count,
            self.vocab_size,
            self.utterance_count,
            self.min_frames,
            self.max_frames,
            list(&self.class_specialization),
            list(&self.token_specialization),
            self.noise_std,
            self.session_noise_std,
            list(&self.model_scale),
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.model_count == 0 || self.layer_count == 0 || self.dim == 0 {
            return fail("model_count, layer_count and dim must be positive".into());
        }
        if self.class_count == 0 || self.utterance_count == 0 {
            return fail("class_count and utterance_count must be positive".into());
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return fail(format!(
                "frame range {}..{} is empty or starts at zero",
                self.min_frames, self.max_frames
            ));
        }
        for (name, v) in [
            ("class_specialization", &self.class_specialization),
            ("token_specialization", &self.token_specialization),
        ] {
            if v.len() != self.model_count {
                return fail(format!("{name} has {} entries for {} models", v.len(), self.model_count));
            }
            if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return fail(format!("{name} values must lie in [0, 1]"));
            }
        }
        if !(self.noise_std >= 0.0 && self.session_noise_std >= 0.0) {
            return fail("noise levels must be non-negative".into());
        }
        if self.model_scale.len() != self.model_count || self.model_scale.iter().any(|s| !(*s > 0.0)) {
            return fail(format!("model_scale needs {} positive entries", self.model_count));
        }
        Ok(())
    }

    /// Relative class-signal strength at layer `j` of model `i`, in `[0, 1]`.
    pub fn class_profile(&self, model: usize, layer: usize) -> f64 {
        let center = if model.is_multiple_of(2) { 0.8 } else { 0.3 };
        self.bump(center, layer)
    }

    /// Relative token-signal strength at layer `j`, in `[0, 1]`.
    pub fn token_profile(&self, layer: usize) -> f64 {
        self.bump(0.5, layer)
    }

    fn bump(&self, center_frac: f64, layer: usize) -> f64 {
        if self.layer_count == 1 {
            return 1.0;
        }
        let span = (self.layer_count - 1) as f64;
        let x = (layer as f64 - center_frac * span) / (span / 5.0);
        (-0.5 * x * x).exp()
    }
}

/// Both manifests of a generated corpus; they share the stack files.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub classification: Manifest,
    pub transcription: Manifest,
    pub classification_path: PathBuf,
    pub transcription_path: PathBuf,
}

/// Per-frame token ids (0 for silence) and the transcript they spell.
fn draw_alignment(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> (Vec<usize>, Vec<usize>) {
    let mut per_frame = vec![0; frames];
    let mut transcript: Vec<usize> = Vec::new();
    let mut pos = rng.random_range(0..=1usize).min(frames - 1);
    while pos < frames {
        let token = loop {
            let k = rng.random_range(1..vocab);
            // adjacent repeats would need a separating blank; keep runs distinct
            if vocab == 2 || transcript.last() != Some(&k) {
                break k;
            }
        };
        let duration = rng.random_range(2..=4usize).min(frames - pos);
        per_frame[pos..pos + duration].fill(token);
        transcript.push(token);
        pos += duration;
        let gap = if vocab == 2 { 1 } else { rng.random_range(0..=1usize) };
        pos += gap;
    }
    (per_frame, transcript)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Fixed random unit embeddings. Class embeddings are drawn per model
/// (`class[i][c]`); token embeddings are shared by all models (`token[k]`,
/// with the blank/silence id 0 mapped to the zero vector).
pub struct Embeddings {
    pub class: Vec<Vec<Vec<f64>>>,
    pub token: Vec<Vec<f64>>,
}

impl Embeddings {
    fn draw(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Self {
        let class = (0..spec.model_count)
            .map(|_| (0..spec.class_count).map(|_| unit_vector(rng, spec.dim)).collect())
            .collect();
        let mut token = vec![vec![0.0; spec.dim]];
        token.extend((1..spec.vocab_size).map(|_| unit_vector(rng, spec.dim)));
        Self { class, token }
    }

    /// The embeddings a corpus generated from `spec` uses.
    pub fn for_spec(spec: &SyntheticTaskSpec) -> Self {
        Self::draw(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
    }
}

pub fn generate_corpus(spec: &SyntheticTaskSpec, out_dir: impl AsRef<Path>) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let stack_dir = out_dir.join("stacks");
    fs::create_dir_all(&stack_dir).map_err(|e| Error::io(&stack_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let emb = Embeddings::draw(spec, &mut rng);
    let (l, d) = (spec.layer_count, spec.dim);
    let class_profile: Vec<Vec<f64>> = (0..spec.model_count)
        .map(|i| (0..l).map(|j| spec.class_profile(i, j)).collect())
        .collect();
    let token_profile: Vec<f64> = (0..l).map(|j| spec.token_profile(j)).collect();

    let mut sid = Vec::with_capacity(spec.utterance_count);
    let mut asr = Vec::with_capacity(spec.utterance_count);
    let width = spec.utterance_count.to_string().len().max(4);
    for u in 0..spec.utterance_count {
        let id = format!("utt{u:0width$}");
        let class_id = rng.random_range(0..spec.class_count);
        let frames = rng.random_range(spec.min_frames..=spec.max_frames);
        let (per_frame, transcript) = draw_alignment(&mut rng, frames, spec.vocab_size);

        let mut paths = Vec::with_capacity(spec.model_count);
        for i in 0..spec.model_count {
            let session: Vec<f64> = (0..d)
                .map(|_| spec.session_noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut values = Vec::with_capacity(l * frames * d);
            for j in 0..l {
                let a = spec.class_specialization[i] * class_profile[i][j];
                let b = spec.token_specialization[i] * token_profile[j];
                let scale = spec.model_scale[i];
                for &tok in &per_frame {
                    let ce = &emb.class[i][class_id];
                    let te = &emb.token[tok];
                    for k in 0..d {
                        let noise: f64 = rng.sample(StandardNormal);
                        values.push(scale * (a * ce[k] + b * te[k] + session[k] + spec.noise_std * noise));
                    }
                }
            }
            let stack = LayerStack::new(l, frames, d, values)?;
            let path = stack_dir.join(format!("{id}.m{}.lsk", i + 1));
            save_stack(&stack, &path)?;
            paths.push(path);
        }
        sid.push(UtteranceRecord {
            id: id.clone(),
            label: Label::Class(class_id),
            stack_paths: paths.clone(),
        });
        asr.push(UtteranceRecord {
            id,
            label: Label::Transcript(transcript),
            stack_paths: paths,
        });
    }

    let classification = Manifest {
        task_kind: TaskKind::UtteranceClassification,
        label_count: spec.class_count,
        records: sid,
    };
    let transcription = Manifest {
        task_kind: TaskKind::SequenceTranscription,
        label_count: spec.vocab_size,
        records: asr,
    };
    let classification_path = out_dir.join("sid.jsonl");
    let transcription_path = out_dir.join("asr.jsonl");
    write_manifest(&classification, &classification_path)?;
    write_manifest(&transcription, &transcription_path)?;
    fs::write(out_dir.join("spec.cfg"), spec.to_key_values()).map_err(|e| Error::io(out_dir, e))?;
    Ok(SyntheticCorpus {
        classification,
        transcription,
        classification_path,
        transcription_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{argmax, dot};
    use crate::stackio::{load_manifest, load_stack};

    fn small() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            layer_count: 4,
            dim: 6,
            class_count: 5,
            vocab_size: 5,
            utterance_count: 10,
            min_frames: 8,
            max_frames: 12,
            seed: 3,
            ..Default::default()
        }
    }

    fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in [dir.to_path_buf(), dir.join("stacks")] {
            for e in fs::read_dir(&sub).unwrap() {
                let p = e.unwrap().path();
                if p.is_file() {
                    let rel = p.strip_prefix(dir).unwrap().display().to_string();
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_corpus(&small(), a.path()).unwrap();
        generate_corpus(&small(), b.path()).unwrap();
        let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
        assert_eq!(ta.len(), 3 + 20);
        assert_eq!(ta, tb);

        let c = tempfile::tempdir().unwrap();
        generate_corpus(&SyntheticTaskSpec { seed: 4, ..small() }, c.path()).unwrap();
        assert_ne!(ta, tree_bytes(c.path()));
    }

    #[test]
    fn manifests_load_with_expected_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let corpus = generate_corpus(&spec, dir.path()).unwrap();
        for path in [&corpus.classification_path, &corpus.transcription_path] {
            let m = load_manifest(path).unwrap();
            assert_eq!(m.records.len(), 10);
            assert_eq!(m.model_count(), 2);
        }
        let m = load_manifest(&corpus.transcription_path).unwrap();
        assert_eq!(m.label_count, spec.vocab_size);
        for rec in &m.records {
            let s0 = load_stack(&rec.stack_paths[0]).unwrap();
            let s1 = load_stack(&rec.stack_paths[1]).unwrap();
            assert_eq!((s0.layers(), s0.dim()), (4, 6));
            assert_eq!(s0.frames(), s1.frames());
            assert!((8..=12).contains(&s0.frames()));
            let Label::Transcript(y) = &rec.label else { panic!("expected transcript") };
            assert!(!y.is_empty() && y.iter().all(|&k| k >= 1 && k < spec.vocab_size));
            assert!(y.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn noiseless_class_signal_is_separable() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticTaskSpec {
            noise_std: 0.0,
            session_noise_std: 0.0,
            token_specialization: vec![0.0, 0.0],
            ..small()
        };
        let corpus = generate_corpus(&spec, dir.path()).unwrap();
        let emb = Embeddings::for_spec(&spec);
        let layer = spec.layer_count - 1;
        for rec in &corpus.classification.records {
            let stack = load_stack(&rec.stack_paths[0]).unwrap();
            let pooled = stack.pooled();
            let x = pooled.frame(layer, 0);
            let scores: Vec<f64> = emb.class[0].iter().map(|e| dot(x, e)).collect();
            assert_eq!(Label::Class(argmax(&scores)), rec.label);
        }
    }

    #[test]
    fn unwritable_output_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = generate_corpus(&small(), blocker.join("out")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn key_values_round_trip() {
        let spec = small();
        let kv = KeyValues::parse(&spec.to_key_values()).unwrap();
        assert_eq!(SyntheticTaskSpec::from_key_values(&kv).unwrap(), spec);
        let kv = KeyValues::parse("seed = 9").unwrap();
        let parsed = SyntheticTaskSpec::from_key_values(&kv).unwrap();
        assert_eq!(parsed, SyntheticTaskSpec { seed: 9, ..Default::default() });
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SyntheticTaskSpec { class_specialization: vec![1.0], ..small() },
            SyntheticTaskSpec { token_specialization: vec![1.5, 0.0], ..small() },
            SyntheticTaskSpec { min_frames: 9, max_frames: 3, ..small() },
            SyntheticTaskSpec { vocab_size: 1, ..small() },
            SyntheticTaskSpec { model_scale: vec![1.0, 0.0], ..small() },
        ];
        for spec in bad {
            assert!(matches!(spec.validate(), Err(Error::Config(_))), "{spec:?}");
        }
    }
}
