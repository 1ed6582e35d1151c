//! Loss assembly for all five variants, the training loop, warm starts
//! from a trained base model, and frozen fine-tuning of the phone side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::model::{
    ForwardPass, Model, ModelConfig, ModelError, Variant, LOCAL_PARAM_PREFIXES,
    SPEAKER_PARAM_PREFIXES,
};
use crate::numerics::{Graph, GraphError, NodeId, Optimizer, OptimizerKind};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("step {step}: non-finite loss ({detail}); step aborted")]
    NonFinite { step: u64, detail: String },
    #[error("variant mismatch: {0}")]
    VariantMismatch(String),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] crate::numerics::OptimError),
    #[error(transparent)]
    Vq(#[from] crate::vq::VqError),
}

/// Every loss term of Eq-style totals, plus the weights that combined
/// them. Absent heads hold exactly zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_vq_l: f64,
    pub l_c_l: f64,
    pub l_vq_g: f64,
    pub l_c_g: f64,
    pub l_spk: f64,
    pub l_adv: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recompute `total` from the stored fields with the exact expression
    /// shape used when the graph was built, so equality is bitwise.
    pub fn recompute_total(&self, variant: Variant) -> f64 {
        match variant {
            Variant::Base => (self.l_r + self.alpha * self.l_vq_l) + self.beta * self.l_c_l,
            _ => {
                (((self.l_r + self.alpha * (self.l_vq_l + self.l_c_l))
                    + self.beta * (self.l_vq_g + self.l_c_g))
                    + self.l_spk)
                    + self.l_adv
            }
        }
    }
}

/// Batch-mean node over per-item scalars: `(((t0+t1)+t2)...)/n`.
fn mean_node(graph: &mut Graph, nodes: &[NodeId]) -> Result<NodeId, GraphError> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = graph.add(acc, n)?;
    }
    graph.scale(acc, 1.0 / nodes.len() as f64)
}

/// Combine per-item forward passes into the variant's total loss node and
/// its matching [`LossBreakdown`].
pub fn total_loss(
    graph: &mut Graph,
    passes: &[ForwardPass],
    variant: Variant,
    alpha: f64,
    beta: f64,
) -> Result<(NodeId, LossBreakdown), TrainError> {
    if passes.is_empty() {
        return Err(TrainError::EmptySplit("batch"));
    }
    let collect = |graph: &mut Graph,
                   get: &dyn Fn(&ForwardPass) -> Option<NodeId>,
                   what: &'static str|
     -> Result<Option<NodeId>, TrainError> {
        let nodes: Vec<NodeId> = passes.iter().filter_map(get).collect();
        if nodes.is_empty() {
            return Ok(None);
        }
        if nodes.len() != passes.len() {
            return Err(TrainError::VariantMismatch(format!(
                "{what} present for only {} of {} items",
                nodes.len(),
                passes.len()
            )));
        }
        Ok(Some(mean_node(graph, &nodes)?))
    };

    let l_r = collect(graph, &|p| Some(p.l_r), "reconstruction")?.expect("always present");
    let l_vq_l = collect(graph, &|p| Some(p.l_vq_local), "local vq")?.expect("always present");
    let l_c_l = collect(graph, &|p| Some(p.l_c_local), "local commit")?.expect("always present");
    let l_vq_g = collect(graph, &|p| p.l_vq_global, "global vq")?;
    let l_c_g = collect(graph, &|p| p.l_c_global, "global commit")?;
    let l_spk = collect(graph, &|p| p.l_spk, "classifier loss")?;
    let l_adv = collect(graph, &|p| p.l_adv, "adversarial loss")?;

    match variant {
        Variant::Base => {
            if l_vq_g.is_some() || l_spk.is_some() || l_adv.is_some() {
                return Err(TrainError::VariantMismatch(
                    "base variant got dual-encoder loss terms".into(),
                ));
            }
        }
        Variant::GlobalVq => {
            if l_vq_g.is_none() || l_c_g.is_none() {
                return Err(TrainError::VariantMismatch(
                    "dual variant without global vq terms".into(),
                ));
            }
        }
        Variant::SpeakerLabel(_) | Variant::Adversarial(_) => {
            if l_vq_g.is_none() || l_spk.is_none() {
                return Err(TrainError::VariantMismatch(
                    "classifier variant without classifier loss".into(),
                ));
            }
            if variant.has_adversarial() && l_adv.is_none() {
                return Err(TrainError::VariantMismatch(
                    "adversarial variant without adversarial loss".into(),
                ));
            }
        }
    }

    let total = match variant {
        Variant::Base => {
            let a = graph.scale(l_vq_l, alpha)?;
            let b = graph.scale(l_c_l, beta)?;
            let s = graph.add(l_r, a)?;
            graph.add(s, b)?
        }
        _ => {
            let tl = graph.add(l_vq_l, l_c_l)?;
            let a = graph.scale(tl, alpha)?;
            let tg = graph.add(l_vq_g.unwrap(), l_c_g.unwrap())?;
            let b = graph.scale(tg, beta)?;
            let mut s = graph.add(l_r, a)?;
            s = graph.add(s, b)?;
            if let Some(spk) = l_spk {
                s = graph.add(s, spk)?;
            }
            if let Some(adv) = l_adv {
                s = graph.add(s, adv)?;
            }
            s
        }
    };

    let scalar = |graph: &Graph, n: Option<NodeId>| {
        n.map(|id| graph.value(id).as_scalar().unwrap()).unwrap_or(0.0)
    };
    let breakdown = LossBreakdown {
        l_r: graph.value(l_r).as_scalar().unwrap(),
        l_vq_l: graph.value(l_vq_l).as_scalar().unwrap(),
        l_c_l: graph.value(l_c_l).as_scalar().unwrap(),
        l_vq_g: scalar(graph, l_vq_g),
        l_c_g: scalar(graph, l_c_g),
        l_spk: scalar(graph, l_spk),
        l_adv: scalar(graph, l_adv),
        alpha,
        beta,
        total: graph.value(total).as_scalar().unwrap(),
    };
    Ok((total, breakdown))
}

/// One training item: a full utterance with its classifier label.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub samples: Vec<f64>,
    pub speaker: usize,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<TrainItem>,
    pub val: Vec<TrainItem>,
    pub sample_rate: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub alpha: f64,
    pub beta: f64,
    /// Fixed crop length per batch item.
    pub crop_ms: f64,
    pub val_every: u64,
    pub seed: u64,
    /// Re-seed codebooks from encoder outputs at startup when their probe
    /// assignment is degenerate. A uniform random codebook sits in the
    /// wrong region of embedding space, one origin-nearest codeword
    /// captures every frame, and the commitment loss locks the collapse
    /// in; sampling real encoder outputs is the standard cure. Trained
    /// codebooks pass the probe and are left alone.
    pub codebook_data_init: bool,
}

impl TrainOptions {
    /// Paper-silent knobs get these desk defaults: Adam at 1e-3, 0.4 s
    /// crops, alpha 1 with beta 0.25 for the base loss and beta 1 for the
    /// dual-encoder loss.
    pub fn default_for(variant: Variant) -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            alpha: 1.0,
            beta: if variant == Variant::Base { 0.25 } else { 1.0 },
            crop_ms: 400.0,
            val_every: 50,
            seed: 0,
            codebook_data_init: true,
        }
    }

    pub fn crop_samples(&self, sample_rate: u32) -> usize {
        ((self.crop_ms * sample_rate as f64 / 1000.0).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<LossBreakdown>,
    pub val: Vec<(u64, LossBreakdown)>,
    pub best_step: u64,
    pub skipped: Vec<(u64, String)>,
}

fn crop(samples: &[f64], start: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let take = len.min(samples.len().saturating_sub(start));
    out[..take].copy_from_slice(&samples[start..start + take]);
    out
}

fn sample_batch(
    rng: &mut ChaCha8Rng,
    data: &[TrainItem],
    batch_size: usize,
    crop_len: usize,
) -> Vec<(Vec<f64>, usize)> {
    (0..batch_size)
        .map(|_| {
            let item = &data[rng.gen_range(0..data.len())];
            let max_start = item.samples.len().saturating_sub(crop_len);
            let start = if max_start == 0 {
                0
            } else {
                rng.gen_range(0..=max_start)
            };
            (crop(&item.samples, start, crop_len), item.speaker)
        })
        .collect()
}

/// Replace a codebook with a seeded sample of candidate rows (plus jitter
/// when there are fewer candidates than codewords).
fn sample_codebook(
    rng: &mut ChaCha8Rng,
    candidates: &[Vec<f64>],
    k: usize,
    d: usize,
) -> crate::numerics::Tensor {
    let rms = (candidates
        .iter()
        .flat_map(|r| r.iter())
        .map(|v| v * v)
        .sum::<f64>()
        / (candidates.len() * d) as f64)
        .sqrt();
    let jitter = 0.05 * rms + 1e-4;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut data = Vec::with_capacity(k * d);
    for i in 0..k {
        let row = &candidates[order[i % order.len()]];
        if i < order.len() {
            data.extend_from_slice(row);
        } else {
            for &v in row {
                data.push(v + rng.gen_range(-jitter..jitter));
            }
        }
    }
    crate::numerics::Tensor::new(vec![k, d], data).expect("sampled codebook shape")
}

/// Data-dependent codebook seeding: run the encoders over a few probe
/// crops and replace any unfrozen codebook whose assignment perplexity is
/// degenerate with a sample of the observed encoder outputs.
fn data_init_codebooks(
    model: &mut Model,
    data: &TrainData,
    opts: &TrainOptions,
) -> Result<(), TrainError> {
    let crop_len = opts.crop_samples(data.sample_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xC0DE_B00C);
    let n_probe = 16.min(data.train.len() * 2);
    let probes: Vec<Vec<f64>> = (0..n_probe)
        .map(|i| {
            let item = &data.train[i % data.train.len()];
            let max_start = item.samples.len().saturating_sub(crop_len);
            let start = if max_start == 0 { 0 } else { rng.gen_range(0..=max_start) };
            crop(&item.samples, start, crop_len)
        })
        .collect();

    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    let mut local_rows: Vec<Vec<f64>> = Vec::new();
    let mut global_rows: Vec<Vec<f64>> = Vec::new();
    for samples in &probes {
        let frames = model.encode_local(&mut graph, &bound, samples)?;
        let v = graph.value(frames);
        for r in 0..v.rows() {
            local_rows.push(v.row(r).to_vec());
        }
        if model.config.variant.has_global() {
            let gz = model.encode_global(&mut graph, &bound, samples)?;
            global_rows.push(graph.value(gz).data().to_vec());
        }
    }

    let mut plans: Vec<(usize, crate::numerics::Tensor)> = Vec::new();
    for (name, k, rows) in [
        ("codebook.local", model.config.local_k, &local_rows),
        ("codebook.global", model.config.global_k, &global_rows),
    ] {
        let Some(idx) = model.params.index_of(name) else {
            continue;
        };
        if model.params.frozen(idx) || rows.is_empty() {
            continue;
        }
        let codebook = crate::vq::Codebook::new(
            model.params.value(idx).clone(),
            crate::vq::CodebookKind::Local,
        )?;
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let ze = crate::numerics::Tensor::new(vec![rows.len(), model.config.embed_d], flat)?;
        let indices = crate::vq::nearest_indices(&ze, &codebook)?;
        let stats = crate::vq::codebook_stats(&indices, k)?;
        if stats.perplexity < 3.0 {
            plans.push((idx, sample_codebook(&mut rng, rows, k, model.config.embed_d)));
        }
    }
    for (idx, tensor) in plans {
        *model.params.value_mut(idx) = tensor;
    }
    Ok(())
}

/// One optimizer step over a batch of `(crop, speaker)` pairs. On a
/// non-finite loss or gradient the parameters stay untouched and the
/// diagnostic is returned.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &[(Vec<f64>, usize)],
    alpha: f64,
    beta: f64,
    step: u64,
) -> Result<LossBreakdown, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptySplit("batch"));
    }
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    let mut passes = Vec::with_capacity(batch.len());
    for (samples, speaker) in batch {
        passes.push(model.forward(&mut graph, &bound, samples, Some(*speaker))?);
    }
    let (total, breakdown) = total_loss(&mut graph, &passes, model.config.variant, alpha, beta)?;
    if !breakdown.total.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            detail: format!("total loss {breakdown:?}"),
        });
    }
    graph.backward(total)?;
    let grads: Vec<Vec<f64>> = bound
        .node_ids()
        .iter()
        .map(|&id| graph.grad(id).to_vec())
        .collect();
    optimizer
        .step(&mut model.params, &grads)
        .map_err(|e| TrainError::NonFinite {
            step,
            detail: e.to_string(),
        })?;
    Ok(breakdown)
}

/// Deterministic validation loss: one centered crop per item, no labels
/// withheld (validation speakers are train speakers).
pub fn validation_loss(
    model: &Model,
    data: &TrainData,
    opts: &TrainOptions,
) -> Result<LossBreakdown, TrainError> {
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let crop_len = opts.crop_samples(data.sample_rate);
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph);
    let mut passes = Vec::with_capacity(data.val.len());
    for item in &data.val {
        let start = item.samples.len().saturating_sub(crop_len) / 2;
        let samples = crop(&item.samples, start, crop_len);
        passes.push(model.forward(&mut graph, &bound, &samples, Some(item.speaker))?);
    }
    let (_, breakdown) = total_loss(&mut graph, &passes, model.config.variant, opts.alpha, opts.beta)?;
    Ok(breakdown)
}

/// Train a fresh or pre-initialized model; returns the checkpoint with the
/// lowest validation total and the full loss curves.
pub fn train(
    mut model: Model,
    data: &TrainData,
    opts: &TrainOptions,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut report = TrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    if opts.steps == 0 {
        let ckpt = Checkpoint::from_model(&model, 0, opts.seed, rng.get_word_pos());
        return Ok((ckpt, report));
    }
    if opts.codebook_data_init {
        data_init_codebooks(&mut model, data, opts)?;
    }
    let mut optimizer = Optimizer::new(opts.optimizer, opts.lr);
    let crop_len = opts.crop_samples(data.sample_rate);
    let mut best: Option<(u64, f64, Checkpoint)> = None;

    for step in 1..=opts.steps {
        let batch = sample_batch(&mut rng, &data.train, opts.batch_size, crop_len);
        match train_step(&mut model, &mut optimizer, &batch, opts.alpha, opts.beta, step) {
            Ok(breakdown) => report.steps.push(breakdown),
            Err(TrainError::NonFinite { step, detail }) => {
                report.skipped.push((step, detail));
            }
            Err(other) => return Err(other),
        }
        if step % opts.val_every == 0 || step == opts.steps {
            let val = validation_loss(&model, data, opts)?;
            report.val.push((step, val));
            let better = match &best {
                None => true,
                Some((_, best_total, _)) => val.total < *best_total,
            };
            if better {
                best = Some((
                    step,
                    val.total,
                    Checkpoint::from_model(&model, step, opts.seed, rng.get_word_pos()),
                ));
            }
        }
    }
    let (best_step, _, ckpt) = best.expect("steps >= 1 always evaluates at least once");
    report.best_step = best_step;
    Ok((ckpt, report))
}

/// Copy the trained local pathway of a base checkpoint into a freshly
/// initialized dual-encoder model: local encoder, local codebook, and the
/// decoder's local input slice plus all later decoder layers. Global and
/// classifier components stay at their fresh initialization.
pub fn warm_start(
    base: &Checkpoint,
    dual_config: &ModelConfig,
    init_seed: u64,
) -> Result<Checkpoint, TrainError> {
    if base.config.variant != Variant::Base {
        return Err(TrainError::ArchitectureMismatch(format!(
            "warm start wants a base checkpoint, got {}",
            base.config.variant
        )));
    }
    if !dual_config.variant.has_global() {
        return Err(TrainError::ArchitectureMismatch(
            "warm start target must be a dual-encoder variant".into(),
        ));
    }
    for (what, a, b) in [
        ("dsf", base.config.dsf, dual_config.dsf),
        ("embed_d", base.config.embed_d, dual_config.embed_d),
        ("local_k", base.config.local_k, dual_config.local_k),
        ("hidden", base.config.hidden, dual_config.hidden),
    ] {
        if a != b {
            return Err(TrainError::ArchitectureMismatch(format!(
                "{what} differs: base {a} vs dual {b}"
            )));
        }
    }
    if base.config.recon_loss != dual_config.recon_loss {
        return Err(TrainError::ArchitectureMismatch(
            "reconstruction mode differs".into(),
        ));
    }

    let mut dual = Model::new(dual_config.clone(), init_seed)?;
    let d = dual_config.embed_d;
    for i in 0..dual.params.len() {
        let name = dual.params.entry(i).name.clone();
        if !LOCAL_PARAM_PREFIXES.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let src = base.params.by_name(&name).ok_or_else(|| {
            TrainError::ArchitectureMismatch(format!("base checkpoint lacks `{name}`"))
        })?;
        if name == "dec.convt0.w" {
            // first decoder layer: copy only the local-channel input rows;
            // the global-conditioning rows have a different width per variant
            let dst = dual.params.value_mut(i);
            let block = dst.shape()[1] * dst.shape()[2];
            if src.value.shape()[1..] != dst.shape()[1..] || src.value.shape()[0] < d {
                return Err(TrainError::ArchitectureMismatch(format!(
                    "decoder shapes diverge: {:?} vs {:?}",
                    src.value.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut()[..d * block].copy_from_slice(&src.value.data()[..d * block]);
        } else {
            if src.value.shape() != dual.params.value(i).shape() {
                return Err(TrainError::ArchitectureMismatch(format!(
                    "`{name}` shapes diverge: {:?} vs {:?}",
                    src.value.shape(),
                    dual.params.value(i).shape()
                )));
            }
            *dual.params.value_mut(i) = src.value.clone();
        }
    }
    Ok(Checkpoint::from_model(&dual, 0, init_seed, 0))
}

/// Freeze every speaker-related component (global encoder, global
/// codebook, classifier and adversarial heads) and fine-tune the rest.
pub fn freeze_fine_tune(
    ckpt: &Checkpoint,
    data: &TrainData,
    opts: &TrainOptions,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    if !ckpt.config.variant.has_global() {
        return Err(TrainError::VariantMismatch(
            "frozen fine-tuning wants a dual-encoder variant".into(),
        ));
    }
    let mut model = ckpt.model()?;
    model.params.freeze_matching(&SPEAKER_PARAM_PREFIXES);
    let (mut out, report) = train(model, data, opts)?;
    out.params.unfreeze_all();
    Ok((out, report))
}
