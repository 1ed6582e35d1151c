//! Dual-encoder architecture: a strided-conv local encoder feeding the
//! sub-phone codebook, a global encoder (same front-end, separate weights)
//! with temporal average pooling and two feed-forward layers feeding the
//! speaker codebook, a transposed-conv decoder conditioned on both, and
//! the optional speaker-classifier / gradient-reversal branches.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, GraphError, NodeId, Padding, ParamSet, Tensor};
use crate::vq::{self, Codebook, CodebookKind, VqError};
use crate::wav::AudioSignal;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("audio too short: {got} samples, need at least {need}")]
    AudioTooShort { got: usize, need: usize },
    #[error("speaker id {got} out of range for {n} speakers")]
    BadSpeaker { got: usize, n: usize },
    #[error("downsampling factor {0} does not factor into strides of 2..4")]
    BadDsf(usize),
    #[error("{0}")]
    Variant(String),
    #[error("inconsistent lengths: {0}")]
    Length(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Vq(#[from] VqError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Softmax,
    ASoftmax,
}

/// The five system variants. Serializes as its snake-case name
/// (`base`, `global_vq`, `speaker_label_s`, `speaker_label_as`,
/// `adversarial_s`, `adversarial_as`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Base,
    GlobalVq,
    SpeakerLabel(HeadKind),
    Adversarial(HeadKind),
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Variant {
    pub fn has_global(self) -> bool {
        !matches!(self, Variant::Base)
    }

    pub fn has_classifier(self) -> bool {
        matches!(self, Variant::SpeakerLabel(_) | Variant::Adversarial(_))
    }

    pub fn has_adversarial(self) -> bool {
        matches!(self, Variant::Adversarial(_))
    }

    pub fn head(self) -> Option<HeadKind> {
        match self {
            Variant::Base | Variant::GlobalVq => None,
            Variant::SpeakerLabel(h) | Variant::Adversarial(h) => Some(h),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Base => "base",
            Variant::GlobalVq => "global_vq",
            Variant::SpeakerLabel(HeadKind::Softmax) => "speaker_label_s",
            Variant::SpeakerLabel(HeadKind::ASoftmax) => "speaker_label_as",
            Variant::Adversarial(HeadKind::Softmax) => "adversarial_s",
            Variant::Adversarial(HeadKind::ASoftmax) => "adversarial_as",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Variant::Base),
            "global_vq" => Ok(Variant::GlobalVq),
            "speaker_label_s" => Ok(Variant::SpeakerLabel(HeadKind::Softmax)),
            "speaker_label_as" => Ok(Variant::SpeakerLabel(HeadKind::ASoftmax)),
            "adversarial_s" => Ok(Variant::Adversarial(HeadKind::Softmax)),
            "adversarial_as" => Ok(Variant::Adversarial(HeadKind::ASoftmax)),
            other => Err(format!(
                "unknown variant `{other}` (want base, global_vq, speaker_label_s, \
                 speaker_label_as, adversarial_s, adversarial_as)"
            )),
        }
    }
}

/// Reconstruction loss mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    /// Mean squared error on raw samples.
    Mse,
    /// 256-way cross-entropy on mu-law classes per sample.
    MuLaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Waveform downsampling factor; one local code per `dsf` samples.
    pub dsf: usize,
    pub local_k: usize,
    pub global_k: usize,
    pub embed_d: usize,
    pub n_speakers: usize,
    /// Conv channel width between the waveform and the embedding.
    pub hidden: usize,
    pub adv_lambda: f64,
    pub asoftmax_margin: u32,
    pub recon_loss: ReconLoss,
    pub sample_rate: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Base,
            dsf: 64,
            local_k: 64,
            global_k: 16,
            embed_d: 16,
            n_speakers: 20,
            hidden: 16,
            adv_lambda: 1.0,
            asoftmax_margin: 2,
            recon_loss: ReconLoss::Mse,
            sample_rate: 16000,
        }
    }
}

impl ModelConfig {
    /// Factor `dsf` into conv strides (largest first, each in 2..=4).
    pub fn strides(&self) -> Result<Vec<usize>, ModelError> {
        let mut d = self.dsf;
        if d == 0 {
            return Err(ModelError::BadDsf(0));
        }
        let mut out = Vec::new();
        for f in [4usize, 3, 2] {
            while d % f == 0 {
                out.push(f);
                d /= f;
            }
        }
        if d != 1 || out.is_empty() {
            return Err(ModelError::BadDsf(self.dsf));
        }
        Ok(out)
    }

    /// Width of the vector concatenated to each local code in the decoder:
    /// the quantized global code for dual variants, a speaker one-hot for
    /// the base system.
    pub fn global_dim(&self) -> usize {
        if self.variant.has_global() {
            self.embed_d
        } else {
            self.n_speakers
        }
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.dsf)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.strides()?;
        for (what, v) in [
            ("local_k", self.local_k),
            ("global_k", self.global_k),
            ("embed_d", self.embed_d),
            ("n_speakers", self.n_speakers),
            ("hidden", self.hidden),
            ("sample_rate", self.sample_rate as usize),
        ] {
            if v == 0 {
                return Err(ModelError::Variant(format!("{what} must be positive")));
            }
        }
        if self.adv_lambda < 0.0 {
            return Err(ModelError::Variant("adv_lambda must be >= 0".into()));
        }
        if self.asoftmax_margin == 0 {
            return Err(ModelError::Variant("asoftmax_margin must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parameter name prefixes owned by speaker-related components; these are
/// the pieces frozen during phone-side fine-tuning.
pub const SPEAKER_PARAM_PREFIXES: [&str; 4] = ["enc_global.", "codebook.global", "head.", "adv."];

/// Parameter name prefixes copied verbatim by a warm start.
pub const LOCAL_PARAM_PREFIXES: [&str; 3] = ["enc_local.", "codebook.local", "dec."];

const MU_LAW_CLASSES: usize = 256;

pub fn mu_law_encode(x: f64) -> usize {
    const MU: f64 = 255.0;
    let x = x.clamp(-1.0, 1.0);
    let y = x.signum() * (1.0 + MU * x.abs()).ln() / (1.0 + MU).ln();
    (((y + 1.0) / 2.0 * MU_LAW_CLASSES as f64) as usize).min(MU_LAW_CLASSES - 1)
}

pub fn mu_law_decode(class: usize) -> f64 {
    const MU: f64 = 255.0;
    let y = (class as f64 + 0.5) / MU_LAW_CLASSES as f64 * 2.0 - 1.0;
    y.signum() * (((1.0 + MU).powf(y.abs()) - 1.0) / MU)
}

/// A model instance: configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    strides: Vec<usize>,
}

/// Graph-bound parameter nodes, aligned with `Model::params` order.
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn node_ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// All per-utterance loss nodes produced by a training forward pass.
pub struct ForwardPass {
    pub l_r: NodeId,
    pub l_vq_local: NodeId,
    pub l_c_local: NodeId,
    pub l_vq_global: Option<NodeId>,
    pub l_c_global: Option<NodeId>,
    pub l_spk: Option<NodeId>,
    pub l_adv: Option<NodeId>,
    pub local_indices: Vec<usize>,
    pub global_index: Option<usize>,
    pub speaker_pred: Option<usize>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let strides = config.strides()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.embed_d;
        let h = config.hidden;

        let conv_stack = |params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str| {
            let n = strides.len();
            for (i, &s) in strides.iter().enumerate() {
                let c_in = if i == 0 { 1 } else { h };
                let c_out = if i == n - 1 { d } else { h };
                let k = 2 * s;
                let fan_in = c_in * k;
                params.push(
                    format!("{prefix}.conv{i}.w"),
                    Tensor::fan_in_uniform(rng, vec![c_out, c_in, k], fan_in),
                );
                params.push(
                    format!("{prefix}.conv{i}.b"),
                    Tensor::fan_in_uniform(rng, vec![c_out], fan_in),
                );
            }
        };

        conv_stack(&mut params, &mut rng, "enc_local");
        // codebooks start inside the encoder-output cloud (bound shrinks
        // with table size); a wide init lets one origin-nearest codeword
        // capture every frame on step one
        params.push(
            "codebook.local",
            Tensor::fan_in_uniform(&mut rng, vec![config.local_k, d], config.local_k * d),
        );

        if config.variant.has_global() {
            conv_stack(&mut params, &mut rng, "enc_global");
            for ff in ["ff1", "ff2"] {
                params.push(
                    format!("enc_global.{ff}.w"),
                    Tensor::fan_in_uniform(&mut rng, vec![d, d], d),
                );
                params.push(
                    format!("enc_global.{ff}.b"),
                    Tensor::fan_in_uniform(&mut rng, vec![d], d),
                );
            }
            params.push(
                "codebook.global",
                Tensor::fan_in_uniform(&mut rng, vec![config.global_k, d], config.global_k * d),
            );
        }

        // decoder mirrors the encoder, consuming local codes + global vector
        let g_dim = config.global_dim();
        let n = strides.len();
        for (i, &s) in strides.iter().rev().enumerate() {
            let c_in = if i == 0 { d + g_dim } else { h };
            let last = i == n - 1;
            let c_out = if !last {
                h
            } else {
                match config.recon_loss {
                    ReconLoss::Mse => 1,
                    ReconLoss::MuLaw => h,
                }
            };
            let k = 2 * s;
            let fan_in = c_in * k;
            params.push(
                format!("dec.convt{i}.w"),
                Tensor::fan_in_uniform(&mut rng, vec![c_in, c_out, k], fan_in),
            );
            params.push(
                format!("dec.convt{i}.b"),
                Tensor::fan_in_uniform(&mut rng, vec![c_out], fan_in),
            );
        }
        if config.recon_loss == ReconLoss::MuLaw {
            // pointwise head from hidden channels to mu-law classes
            params.push(
                "dec.head.w",
                Tensor::fan_in_uniform(&mut rng, vec![MU_LAW_CLASSES, h, 1], h),
            );
            params.push(
                "dec.head.b",
                Tensor::fan_in_uniform(&mut rng, vec![MU_LAW_CLASSES], h),
            );
        }

        if config.variant.has_classifier() {
            params.push(
                "head.spk.w",
                Tensor::fan_in_uniform(&mut rng, vec![config.n_speakers, d], d),
            );
        }
        if config.variant.has_adversarial() {
            for ff in ["ff1", "ff2"] {
                params.push(
                    format!("adv.{ff}.w"),
                    Tensor::fan_in_uniform(&mut rng, vec![d, d], d),
                );
                params.push(
                    format!("adv.{ff}.b"),
                    Tensor::fan_in_uniform(&mut rng, vec![d], d),
                );
            }
            params.push(
                "adv.head.w",
                Tensor::fan_in_uniform(&mut rng, vec![config.n_speakers, d], d),
            );
        }

        Ok(Self {
            config,
            params,
            strides,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        let strides = config.strides()?;
        Ok(Self {
            config,
            params,
            strides,
        })
    }

    pub fn local_codebook(&self) -> Codebook {
        Codebook::new(
            self.params.by_name("codebook.local").unwrap().value.clone(),
            CodebookKind::Local,
        )
        .expect("codebook tensor is k x d")
    }

    pub fn global_codebook(&self) -> Option<Codebook> {
        self.params.by_name("codebook.global").map(|e| {
            Codebook::new(e.value.clone(), CodebookKind::Global).expect("codebook tensor is k x d")
        })
    }

    /// Insert every parameter into a graph (frozen ones as frozen leaves).
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|e| {
                if e.frozen {
                    graph.frozen_leaf(e.value.clone())
                } else {
                    graph.leaf(e.value.clone())
                }
            })
            .collect();
        Bound { ids }
    }

    fn node(&self, bound: &Bound, name: &str) -> NodeId {
        bound.ids[self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not present in this variant"))]
    }

    fn check_audio(&self, samples: &[f64]) -> Result<(), ModelError> {
        if samples.len() < self.config.dsf {
            return Err(ModelError::AudioTooShort {
                got: samples.len(),
                need: self.config.dsf,
            });
        }
        Ok(())
    }

    fn audio_node(&self, graph: &mut Graph, samples: &[f64]) -> Result<NodeId, ModelError> {
        Ok(graph.frozen_leaf(Tensor::matrix(1, samples.len(), samples.to_vec())?))
    }

    /// Conv front-end shared by both encoders: `[1, t] -> [t', d]` frames.
    fn encode_frames(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        audio: NodeId,
        prefix: &str,
    ) -> Result<NodeId, ModelError> {
        let mut x = audio;
        let n = self.strides.len();
        for (i, &s) in self.strides.iter().enumerate() {
            let w = self.node(bound, &format!("{prefix}.conv{i}.w"));
            let b = self.node(bound, &format!("{prefix}.conv{i}.b"));
            x = graph.conv1d(x, w, b, s, Padding::Same)?;
            if i + 1 < n {
                x = graph.relu(x)?;
            }
        }
        Ok(graph.transpose(x)?)
    }

    /// Local encoder: `t' = ceil(t / dsf)` frames of dimension `d`.
    pub fn encode_local(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        samples: &[f64],
    ) -> Result<NodeId, ModelError> {
        self.check_audio(samples)?;
        let audio = self.audio_node(graph, samples)?;
        self.encode_frames(graph, bound, audio, "enc_local")
    }

    /// Global encoder: frames -> TAP -> two feed-forward layers -> `[1, d]`.
    pub fn encode_global(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        samples: &[f64],
    ) -> Result<NodeId, ModelError> {
        if !self.config.variant.has_global() {
            return Err(ModelError::Variant(
                "base variant has no global encoder".into(),
            ));
        }
        self.check_audio(samples)?;
        let audio = self.audio_node(graph, samples)?;
        let frames = self.encode_frames(graph, bound, audio, "enc_global")?;
        self.global_head(graph, bound, frames)
    }

    /// TAP + ff1 + relu + ff2 on top of global-encoder frames.
    fn global_head(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        frames: NodeId,
    ) -> Result<NodeId, ModelError> {
        let pooled = graph.mean_rows(frames)?;
        let w1 = self.node(bound, "enc_global.ff1.w");
        let b1 = self.node(bound, "enc_global.ff1.b");
        let w2 = self.node(bound, "enc_global.ff2.w");
        let b2 = self.node(bound, "enc_global.ff2.b");
        let h = graph.matmul(pooled, w1)?;
        let h = graph.add_bias_rows(h, b1)?;
        let h = graph.relu(h)?;
        let h = graph.matmul(h, w2)?;
        Ok(graph.add_bias_rows(h, b2)?)
    }

    /// Decode local frames plus a broadcast global vector into `t` samples
    /// (`[1, t]` for MSE mode) or `[t, 256]` mu-law logits.
    pub fn decode(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        local_frames: NodeId,
        global_vec: NodeId,
        t: usize,
    ) -> Result<NodeId, ModelError> {
        let n_frames = graph.value(local_frames).rows();
        if n_frames != self.config.frames_for(t) {
            return Err(ModelError::Length(format!(
                "{n_frames} frames cannot decode to {t} samples at dsf {}",
                self.config.dsf
            )));
        }
        let g_dim = graph.value(global_vec).numel();
        if g_dim != self.config.global_dim() {
            return Err(ModelError::Length(format!(
                "global vector has {g_dim} dims, decoder wants {}",
                self.config.global_dim()
            )));
        }
        let g_rows = graph.broadcast_row(global_vec, n_frames)?;
        let cat = graph.concat_cols(local_frames, g_rows)?;
        let mut x = graph.transpose(cat)?;
        let n = self.strides.len();
        for (i, &s) in self.strides.iter().rev().enumerate() {
            let w = self.node(bound, &format!("dec.convt{i}.w"));
            let b = self.node(bound, &format!("dec.convt{i}.b"));
            // kernel 2s with pad s/2*... keeps out_len == in_len * s
            x = graph.conv1d_transpose(x, w, b, s, s / 2)?;
            if i + 1 < n {
                x = graph.relu(x)?;
            }
        }
        match self.config.recon_loss {
            ReconLoss::Mse => Ok(graph.crop_cols(x, t)?),
            ReconLoss::MuLaw => {
                let x = graph.relu(x)?;
                let w = self.node(bound, "dec.head.w");
                let b = self.node(bound, "dec.head.b");
                let logits = graph.conv1d(x, w, b, 1, Padding::Same)?;
                let logits = graph.crop_cols(logits, t)?;
                Ok(graph.transpose(logits)?)
            }
        }
    }

    /// One-hot (or zero, for out-of-inventory speakers) global vector used
    /// by the base variant's decoder.
    pub fn speaker_onehot(
        &self,
        graph: &mut Graph,
        speaker: Option<usize>,
    ) -> Result<NodeId, ModelError> {
        let n = self.config.n_speakers;
        let mut v = vec![0.0; n];
        if let Some(s) = speaker {
            if s >= n {
                return Err(ModelError::BadSpeaker { got: s, n });
            }
            v[s] = 1.0;
        }
        Ok(graph.frozen_leaf(Tensor::matrix(1, n, v)?))
    }

    /// Classifier loss and argmax prediction for a `[1, d]` global code.
    ///
    /// Softmax kind scores `w . x`; angular kind scores cosines against
    /// unit-normalized weight rows with a SphereFace-style multiplicative
    /// margin on the target class angle.
    pub fn classify_speaker(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        code: NodeId,
        speaker: usize,
    ) -> Result<(NodeId, usize), ModelError> {
        let head = self.config.variant.head().ok_or_else(|| {
            ModelError::Variant("this variant has no speaker classifier".into())
        })?;
        if speaker >= self.config.n_speakers {
            return Err(ModelError::BadSpeaker {
                got: speaker,
                n: self.config.n_speakers,
            });
        }
        let w = self.node(bound, "head.spk.w");
        match head {
            HeadKind::Softmax => {
                let wt = graph.transpose(w)?;
                let logits = graph.matmul(code, wt)?;
                let loss = graph.cross_entropy_rows(logits, &[speaker])?;
                let pred = argmax(graph.value(logits).data());
                Ok((loss, pred))
            }
            HeadKind::ASoftmax => {
                let loss = self.asoftmax_loss(graph, w, code, speaker, self.config.asoftmax_margin)?;
                let pred = {
                    let mut g2 = Graph::new();
                    let wv = g2.leaf(graph.value(w).clone());
                    let cv = g2.leaf(graph.value(code).clone());
                    let cos = cosine_logits(&mut g2, wv, cv)?;
                    argmax(g2.value(cos).data())
                };
                Ok((loss, pred))
            }
        }
    }

    /// Angular-softmax loss: cosines against unit-norm weight rows, with
    /// the target logit replaced by `psi(theta) = (-1)^k cos(m*theta) - 2k`.
    /// At margin 1 this is plain softmax over the (norm-stripped) cosines.
    fn asoftmax_loss(
        &self,
        graph: &mut Graph,
        w: NodeId,
        code: NodeId,
        speaker: usize,
        margin: u32,
    ) -> Result<NodeId, ModelError> {
        let cos = cosine_logits(graph, w, code)?;
        let target_cos = graph.get_element(cos, speaker)?;
        let c = graph.value(target_cos).as_scalar().unwrap().clamp(-1.0, 1.0);
        let theta = c.acos();
        let k = ((margin as f64 * theta) / std::f64::consts::PI).floor();
        // T_m(cos theta) = cos(m*theta) via the Chebyshev recurrence
        let mut t_prev = graph.frozen_leaf(Tensor::scalar(1.0));
        let mut t_cur = target_cos;
        for _ in 1..margin {
            let two_c = graph.scale(target_cos, 2.0)?;
            let prod = graph.mul(two_c, t_cur)?;
            let neg_prev = graph.scale(t_prev, -1.0)?;
            let next = graph.add(prod, neg_prev)?;
            t_prev = t_cur;
            t_cur = next;
        }
        let sign = if (k as i64) % 2 == 0 { 1.0 } else { -1.0 };
        let signed = graph.scale(t_cur, sign)?;
        let psi = graph.add_scalar(signed, -2.0 * k)?;
        let logits = graph.replace_element(cos, speaker, psi)?;
        Ok(graph.cross_entropy_rows(logits, &[speaker])?)
    }

    /// Adversarial branch: gradient reversal on the local frames, TAP,
    /// two feed-forward layers, then a softmax speaker classifier. The
    /// loss value itself is unaffected by lambda; only gradients reverse.
    pub fn adversarial_speaker_loss(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        local_frames: NodeId,
        speaker: usize,
        lambda: f64,
    ) -> Result<NodeId, ModelError> {
        if !self.config.variant.has_adversarial() {
            return Err(ModelError::Variant(
                "this variant has no adversarial branch".into(),
            ));
        }
        if speaker >= self.config.n_speakers {
            return Err(ModelError::BadSpeaker {
                got: speaker,
                n: self.config.n_speakers,
            });
        }
        let rev = graph.grad_reverse(local_frames, lambda)?;
        let pooled = graph.mean_rows(rev)?;
        let w1 = self.node(bound, "adv.ff1.w");
        let b1 = self.node(bound, "adv.ff1.b");
        let w2 = self.node(bound, "adv.ff2.w");
        let b2 = self.node(bound, "adv.ff2.b");
        let h = graph.matmul(pooled, w1)?;
        let h = graph.add_bias_rows(h, b1)?;
        let h = graph.relu(h)?;
        let h = graph.matmul(h, w2)?;
        let h = graph.add_bias_rows(h, b2)?;
        let wh = self.node(bound, "adv.head.w");
        let wt = graph.transpose(wh)?;
        let logits = graph.matmul(h, wt)?;
        Ok(graph.cross_entropy_rows(logits, &[speaker])?)
    }

    /// Full training forward pass for one utterance crop.
    ///
    /// `speaker` supplies the label for the one-hot decoder conditioning
    /// (base variant) and the classifier/adversarial losses; pass `None`
    /// for label-free evaluation (those terms are then absent).
    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        samples: &[f64],
        speaker: Option<usize>,
    ) -> Result<ForwardPass, ModelError> {
        self.check_audio(samples)?;
        let t = samples.len();
        let local_frames = self.encode_local(graph, bound, samples)?;
        let local_cb = self.local_codebook();
        let local_node = self.node(bound, "codebook.local");
        let local_vq = vq::quantize_in_graph(graph, local_frames, local_node, &local_cb)?;

        let mut global_index = None;
        let mut l_vq_global = None;
        let mut l_c_global = None;
        let mut l_spk = None;
        let mut speaker_pred = None;
        let mut l_adv = None;

        let global_vec = if self.config.variant.has_global() {
            let ze_g = self.encode_global(graph, bound, samples)?;
            let global_cb = self.global_codebook().expect("dual variant");
            let global_node = self.node(bound, "codebook.global");
            let gq = vq::quantize_in_graph(graph, ze_g, global_node, &global_cb)?;
            global_index = Some(gq.indices[0]);
            l_vq_global = Some(gq.vq_loss);
            l_c_global = Some(gq.commit_loss);
            if self.config.variant.has_classifier() {
                if let Some(spk) = speaker {
                    let (loss, pred) =
                        self.classify_speaker(graph, bound, gq.straight_through, spk)?;
                    l_spk = Some(loss);
                    speaker_pred = Some(pred);
                }
            }
            gq.straight_through
        } else {
            self.speaker_onehot(graph, speaker)?
        };

        if self.config.variant.has_adversarial() {
            if let Some(spk) = speaker {
                l_adv = Some(self.adversarial_speaker_loss(
                    graph,
                    bound,
                    local_frames,
                    spk,
                    self.config.adv_lambda,
                )?);
            }
        }

        let recon = self.decode(graph, bound, local_vq.straight_through, global_vec, t)?;
        let l_r = match self.config.recon_loss {
            ReconLoss::Mse => {
                let target = self.audio_node(graph, samples)?;
                let d = graph.sub(recon, target)?;
                let sq = graph.mul(d, d)?;
                graph.mean_all(sq)?
            }
            ReconLoss::MuLaw => {
                let targets: Vec<usize> = samples.iter().map(|&s| mu_law_encode(s)).collect();
                graph.cross_entropy_rows(recon, &targets)?
            }
        };

        Ok(ForwardPass {
            l_r,
            l_vq_local: local_vq.vq_loss,
            l_c_local: local_vq.commit_loss,
            l_vq_global,
            l_c_global,
            l_spk,
            l_adv,
            local_indices: local_vq.indices,
            global_index,
            speaker_pred,
        })
    }

    // ── value-level inference helpers ───────────────────────────────

    /// Local code indices for a whole utterance.
    pub fn local_codes(&self, audio: &AudioSignal) -> Result<Vec<usize>, ModelError> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let frames = self.encode_local(&mut graph, &bound, &audio.samples)?;
        let cb = self.local_codebook();
        Ok(vq::nearest_indices(graph.value(frames), &cb)?)
    }

    /// Quantized global code index, if this variant has a global encoder.
    pub fn global_code(&self, audio: &AudioSignal) -> Result<Option<usize>, ModelError> {
        if !self.config.variant.has_global() {
            return Ok(None);
        }
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let ze = self.encode_global(&mut graph, &bound, &audio.samples)?;
        let cb = self.global_codebook().expect("dual variant");
        Ok(Some(vq::nearest_indices(graph.value(ze), &cb)?[0]))
    }

    /// Pre-quantization global embedding (for cosine similarity).
    pub fn global_embedding(&self, audio: &AudioSignal) -> Result<Vec<f64>, ModelError> {
        if !self.config.variant.has_global() {
            return Err(ModelError::Variant(
                "base variant has no global encoder".into(),
            ));
        }
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let ze = self.encode_global(&mut graph, &bound, &audio.samples)?;
        Ok(graph.value(ze).data().to_vec())
    }

    /// Reconstruct an utterance through the quantized bottlenecks.
    /// `speaker` matters only for the base variant's one-hot conditioning.
    pub fn reconstruct(
        &self,
        audio: &AudioSignal,
        speaker: Option<usize>,
    ) -> Result<AudioSignal, ModelError> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let t = audio.samples.len();
        let frames = self.encode_local(&mut graph, &bound, &audio.samples)?;
        let cb = self.local_codebook();
        let lq = vq::quantize_in_graph(&mut graph, frames, self.node(&bound, "codebook.local"), &cb)?;
        let global_vec = if self.config.variant.has_global() {
            let ze = self.encode_global(&mut graph, &bound, &audio.samples)?;
            let gcb = self.global_codebook().expect("dual variant");
            let gq = vq::quantize_in_graph(
                &mut graph,
                ze,
                self.node(&bound, "codebook.global"),
                &gcb,
            )?;
            gq.straight_through
        } else {
            self.speaker_onehot(&mut graph, speaker)?
        };
        let out = self.decode(&mut graph, &bound, lq.straight_through, global_vec, t)?;
        let samples = match self.config.recon_loss {
            ReconLoss::Mse => graph
                .value(out)
                .data()
                .iter()
                .map(|&v| v.clamp(-1.0, 1.0))
                .collect(),
            ReconLoss::MuLaw => {
                let logits = graph.value(out);
                (0..logits.rows())
                    .map(|i| mu_law_decode(argmax(logits.row(i))))
                    .collect()
            }
        };
        Ok(AudioSignal::new(samples, audio.sample_rate))
    }
}

/// Row-wise cosine scores of a `[1, d]` vector against each row of `w`.
fn cosine_logits(graph: &mut Graph, w: NodeId, code: NodeId) -> Result<NodeId, GraphError> {
    let wn = graph.row_normalize(w)?;
    let cn = graph.row_normalize(code)?;
    let wt = graph.transpose(wn)?;
    graph.matmul(cn, wt)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::Rng;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            dsf: 16,
            local_k: 8,
            global_k: 4,
            embed_d: 6,
            n_speakers: 3,
            hidden: 5,
            adv_lambda: 1.0,
            asoftmax_margin: 2,
            recon_loss: ReconLoss::Mse,
            sample_rate: 16000,
        }
    }

    fn audio(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    #[test]
    fn frame_count_follows_ceil_arithmetic() {
        let model = Model::new(cfg(Variant::Base), 1).unwrap();
        for t in [16usize, 17, 100, 6400, 6401] {
            let mut g = Graph::new();
            let b = model.bind(&mut g);
            let frames = model.encode_local(&mut g, &b, &audio(t, 0)).unwrap();
            assert_eq!(g.value(frames).rows(), t.div_ceil(16), "t = {t}");
            assert_eq!(g.value(frames).cols(), 6);
        }
    }

    #[test]
    fn too_short_audio_rejected() {
        let model = Model::new(cfg(Variant::Base), 1).unwrap();
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        assert!(matches!(
            model.encode_local(&mut g, &b, &audio(15, 0)),
            Err(ModelError::AudioTooShort { .. })
        ));
    }

    #[test]
    fn encoding_is_deterministic() {
        let model = Model::new(cfg(Variant::GlobalVq), 2).unwrap();
        let samples = audio(160, 3);
        let run = || {
            let mut g = Graph::new();
            let b = model.bind(&mut g);
            let f = model.encode_local(&mut g, &b, &samples).unwrap();
            g.value(f).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tap_is_permutation_invariant() {
        let model = Model::new(cfg(Variant::GlobalVq), 2).unwrap();
        let samples = audio(160, 3);
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let au = g.frozen_leaf(Tensor::matrix(1, samples.len(), samples.clone()).unwrap());
        let frames = model.encode_frames(&mut g, &b, au, "enc_global").unwrap();
        let pooled = g.mean_rows(frames).unwrap();
        let want = g.value(pooled).data().to_vec();

        // reverse the frame order and pool again
        let v = g.value(frames).clone();
        let (n, d) = (v.rows(), v.cols());
        let mut rev = Vec::with_capacity(n * d);
        for i in (0..n).rev() {
            rev.extend_from_slice(v.row(i));
        }
        let rv = g.leaf(Tensor::matrix(n, d, rev).unwrap());
        let pooled2 = g.mean_rows(rv).unwrap();
        assert_eq!(g.value(pooled2).data(), &want[..]);
    }

    #[test]
    fn tap_of_constant_frames_is_exact() {
        let mut g = Graph::new();
        let v = vec![0.1, -0.3, 0.7];
        let mut data = Vec::new();
        for _ in 0..7 {
            data.extend_from_slice(&v);
        }
        let x = g.leaf(Tensor::matrix(7, 3, data).unwrap());
        let pooled = g.mean_rows(x).unwrap();
        assert_eq!(g.value(pooled).data(), &v[..]);
    }

    #[test]
    fn decode_length_contract() {
        for variant in [Variant::Base, Variant::GlobalVq] {
            let model = Model::new(cfg(variant), 4).unwrap();
            for t in [160usize, 161, 1600] {
                let out = model
                    .reconstruct(&AudioSignal::new(audio(t, 5), 16000), Some(1))
                    .unwrap();
                assert_eq!(out.len(), t, "variant {variant}, t = {t}");
            }
        }
    }

    #[test]
    fn mulaw_decode_length_contract() {
        let mut c = cfg(Variant::GlobalVq);
        c.recon_loss = ReconLoss::MuLaw;
        let model = Model::new(c, 4).unwrap();
        let out = model
            .reconstruct(&AudioSignal::new(audio(161, 5), 16000), None)
            .unwrap();
        assert_eq!(out.len(), 161);
    }

    #[test]
    fn mu_law_roundtrip_monotone() {
        for class in 0..256 {
            let x = mu_law_decode(class);
            assert_eq!(mu_law_encode(x), class);
        }
        assert_eq!(mu_law_encode(-1.0), 0);
        assert_eq!(mu_law_encode(1.0), 255);
    }

    #[test]
    fn classifier_hand_loss_and_prediction() {
        // logits [5, -5] via a crafted weight matrix and unit input
        let model = Model::new(cfg(Variant::SpeakerLabel(HeadKind::Softmax)), 6).unwrap();
        let mut g = Graph::new();
        let mut b = model.bind(&mut g);
        // overwrite the head weights with a known matrix (3 speakers, d=6)
        let w_idx = model.params.index_of("head.spk.w").unwrap();
        let mut w = vec![0.0; 3 * 6];
        w[0] = 5.0; // speaker 0 scores 5 * x[0]
        w[6] = -5.0; // speaker 1 scores -5 * x[0]
        b.ids[w_idx] = g.leaf(Tensor::matrix(3, 6, w).unwrap());
        let mut x = vec![0.0; 6];
        x[0] = 1.0;
        let code = g.leaf(Tensor::matrix(1, 6, x).unwrap());
        let (loss, pred) = model.classify_speaker(&mut g, &b, code, 0).unwrap();
        let want = {
            // -log softmax of [5, -5, 0] at index 0
            let z: f64 = (5.0f64).exp() + (-5.0f64).exp() + 1.0;
            -((5.0f64).exp() / z).ln()
        };
        assert!((g.value(loss).as_scalar().unwrap() - want).abs() < 1e-12);
        assert_eq!(pred, 0);
    }

    #[test]
    fn bad_speaker_id_rejected() {
        let model = Model::new(cfg(Variant::SpeakerLabel(HeadKind::Softmax)), 6).unwrap();
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let code = g.leaf(Tensor::matrix(1, 6, vec![0.1; 6]).unwrap());
        assert!(matches!(
            model.classify_speaker(&mut g, &b, code, 3),
            Err(ModelError::BadSpeaker { .. })
        ));
    }

    #[test]
    fn asoftmax_margin_one_equals_softmax_on_cosines() {
        let mut c = cfg(Variant::SpeakerLabel(HeadKind::ASoftmax));
        c.asoftmax_margin = 1;
        let model = Model::new(c, 7).unwrap();
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let code = g.leaf(Tensor::matrix(1, 6, audio(6, 8)).unwrap());
        let (loss, _) = model.classify_speaker(&mut g, &b, code, 1).unwrap();

        // plain softmax over the angle-only logits
        let mut g2 = Graph::new();
        let w = g2.leaf(model.params.by_name("head.spk.w").unwrap().value.clone());
        let code2 = g2.leaf(Tensor::matrix(1, 6, audio(6, 8)).unwrap());
        let cos = cosine_logits(&mut g2, w, code2).unwrap();
        let ce = g2.cross_entropy_rows(cos, &[1]).unwrap();
        assert_eq!(
            g.value(loss).as_scalar().unwrap(),
            g2.value(ce).as_scalar().unwrap()
        );
    }

    #[test]
    fn asoftmax_target_score_non_increasing_in_margin() {
        // psi_m(theta) must not grow with m for fixed geometry
        for theta_deg in [10.0f64, 35.0, 60.0, 95.0, 140.0, 170.0] {
            let theta = theta_deg.to_radians();
            let c = theta.cos();
            let mut prev = f64::INFINITY;
            for m in 1..=4u32 {
                let k = ((m as f64 * theta) / std::f64::consts::PI).floor();
                let sign = if (k as i64) % 2 == 0 { 1.0 } else { -1.0 };
                let psi = sign * (m as f64 * theta).cos() - 2.0 * k;
                assert!(
                    psi <= prev + 1e-12,
                    "psi grew at theta {theta_deg}, m {m}: {psi} > {prev}"
                );
                assert!((sign * cheb(m, c) - 2.0 * k - psi).abs() < 1e-9);
                prev = psi;
            }
        }
    }

    fn cheb(m: u32, c: f64) -> f64 {
        let (mut a, mut b) = (1.0, c);
        for _ in 1..m {
            let next = 2.0 * c * b - a;
            a = b;
            b = next;
        }
        if m == 0 {
            1.0
        } else {
            b
        }
    }

    #[test]
    fn adversarial_loss_value_independent_of_lambda() {
        let model = Model::new(cfg(Variant::Adversarial(HeadKind::Softmax)), 9).unwrap();
        let samples = audio(160, 10);
        let value = |lambda: f64| {
            let mut g = Graph::new();
            let b = model.bind(&mut g);
            let frames = model.encode_local(&mut g, &b, &samples).unwrap();
            let l = model
                .adversarial_speaker_loss(&mut g, &b, frames, 1, lambda)
                .unwrap();
            g.value(l).as_scalar().unwrap()
        };
        assert_eq!(value(0.0), value(1.0));
    }

    #[test]
    fn adversarial_gradient_scales_linearly_in_lambda() {
        let model = Model::new(cfg(Variant::Adversarial(HeadKind::Softmax)), 9).unwrap();
        let samples = audio(160, 10);
        let grads = |lambda: f64| {
            let mut g = Graph::new();
            let b = model.bind(&mut g);
            let frames = model.encode_local(&mut g, &b, &samples).unwrap();
            let l = model
                .adversarial_speaker_loss(&mut g, &b, frames, 1, lambda)
                .unwrap();
            g.backward(l).unwrap();
            let w0 = model.params.index_of("enc_local.conv0.w").unwrap();
            g.grad(b.ids[w0]).to_vec()
        };
        let g1 = grads(1.0);
        let g2 = grads(2.0);
        assert!(g1.iter().any(|&v| v != 0.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn forward_pass_covers_all_variants() {
        let samples = audio(160, 12);
        for variant in [
            Variant::Base,
            Variant::GlobalVq,
            Variant::SpeakerLabel(HeadKind::Softmax),
            Variant::SpeakerLabel(HeadKind::ASoftmax),
            Variant::Adversarial(HeadKind::Softmax),
            Variant::Adversarial(HeadKind::ASoftmax),
        ] {
            let model = Model::new(cfg(variant), 13).unwrap();
            let mut g = Graph::new();
            let b = model.bind(&mut g);
            let fp = model.forward(&mut g, &b, &samples, Some(2)).unwrap();
            assert!(g.value(fp.l_r).as_scalar().unwrap().is_finite());
            assert_eq!(fp.l_vq_global.is_some(), variant.has_global());
            assert_eq!(fp.l_spk.is_some(), variant.has_classifier());
            assert_eq!(fp.l_adv.is_some(), variant.has_adversarial());
        }
    }

    #[test]
    fn reconstruction_grad_reaches_both_codebooks_and_encoders() {
        let model = Model::new(cfg(Variant::GlobalVq), 14).unwrap();
        let samples = audio(160, 15);
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let fp = model.forward(&mut g, &b, &samples, None).unwrap();
        g.backward(fp.l_r).unwrap();
        for name in ["enc_local.conv0.w", "enc_global.conv0.w"] {
            let idx = model.params.index_of(name).unwrap();
            assert!(
                g.grad(b.ids[idx]).iter().any(|&v| v != 0.0),
                "{name} got no reconstruction gradient"
            );
        }
    }

    #[test]
    fn zero_vs_learned_global_code_changes_output() {
        let model = Model::new(cfg(Variant::GlobalVq), 16).unwrap();
        let samples = audio(160, 17);
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let frames = model.encode_local(&mut g, &b, &samples).unwrap();
        let cb = model.local_codebook();
        let lq =
            vq::quantize_in_graph(&mut g, frames, model.node(&b, "codebook.local"), &cb).unwrap();
        let learned = g.leaf(Tensor::matrix(1, 6, vec![0.4; 6]).unwrap());
        let zero = g.leaf(Tensor::matrix(1, 6, vec![0.0; 6]).unwrap());
        let out1 = model
            .decode(&mut g, &b, lq.straight_through, learned, 160)
            .unwrap();
        let out2 = model
            .decode(&mut g, &b, lq.straight_through, zero, 160)
            .unwrap();
        assert_ne!(g.value(out1).data(), g.value(out2).data());
    }

    #[test]
    fn asoftmax_loss_passes_finite_differences() {
        // the margin path is piecewise smooth; random geometry stays off
        // the segment boundaries with probability one
        let model = Model::new(cfg(Variant::SpeakerLabel(HeadKind::ASoftmax)), 18).unwrap();
        let w0 = model.params.by_name("head.spk.w").unwrap().value.clone();
        let base = vec![w0, Tensor::matrix(1, 6, audio(6, 19)).unwrap()];
        let build: crate::numerics::BuildFn = &|g, ts| {
            let w = g.leaf(ts[0].clone());
            let code = g.leaf(ts[1].clone());
            let cos = cosine_logits(g, w, code)?;
            let tc = g.get_element(cos, 1)?;
            let c = g.value(tc).as_scalar().unwrap().clamp(-1.0, 1.0);
            let theta = c.acos();
            let k = (2.0 * theta / std::f64::consts::PI).floor();
            let two_c = g.scale(tc, 2.0)?;
            let prod = g.mul(two_c, tc)?;
            let t2 = g.add_scalar(prod, -1.0)?;
            let sign = if (k as i64) % 2 == 0 { 1.0 } else { -1.0 };
            let signed = g.scale(t2, sign)?;
            let psi = g.add_scalar(signed, -2.0 * k)?;
            let logits = g.replace_element(cos, 1, psi)?;
            let loss = g.cross_entropy_rows(logits, &[1])?;
            Ok((loss, vec![w, code]))
        };
        for p in 0..2 {
            let err = grad_check(&base, build, p, 1e-5).unwrap();
            assert!(err < 1e-4, "asoftmax param {p}: fd error {err}");
        }
    }
}
