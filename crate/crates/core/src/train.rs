//! Adam training of ensembles with cross-entropy loss, plus evaluation
//! and bit-exact checkpointing.

use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, stack_images, Sample};
use crate::error::{Error, Result};
use crate::layers::{trainable_tensors_mut, Mode};
use crate::metrics::{
    auc_trapezoid, confusion, roc_curve, RocCurve, ScoredSample,
};
use crate::model::{build_ensemble, Arch, EnsembleModel, Profile};
use crate::rng::Rng;
use crate::segmentation::{hard_vote, split_feature, Label, SegmentationScheme};
use crate::tape::{Id, Tape};
use crate::tensor::Tensor;

pub const CE_CLAMP: f64 = 1e-12;

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_decay() -> f64 {
    1e-6
}
fn default_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            decay: default_decay(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidArgument("lr must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("beta1/beta2 must be in [0,1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// First/second moment buffers mirroring the trainable tensors, and the
/// step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_model(model: &mut EnsembleModel) -> AdamState {
        let shapes: Vec<Vec<usize>> =
            trainable_model_tensors(model).iter().map(|t| t.shape().to_vec()).collect();
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: 0,
        }
    }
}

/// Mutable references to every trainable tensor of the ensemble, extractor
/// first, then heads in index order — the same order training gradients are
/// produced in.
pub fn trainable_model_tensors(model: &mut EnsembleModel) -> Vec<&mut Tensor<f32>> {
    let mut out = trainable_tensors_mut(&mut model.extractor.params);
    // split the heads borrow manually: each head is a distinct Vec
    for head in model.heads.iter_mut() {
        out.extend(trainable_tensors_mut(&mut head.params));
    }
    out
}

/// One Adam update. Learning rate decays as `lr / (1 + decay * t)` with the
/// pre-increment step count (the first step uses the base lr); the moment
/// bias corrections use the post-increment count, as in the standard
/// formulation. Math in f64, storage in f32.
pub fn adam_step(
    params: &mut [&mut Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let lr_t = cfg.lr / (1.0 + cfg.decay * state.t as f64);
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "adam_step: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for i in 0..p.numel() {
            let gi = g.data()[i] as f64;
            let mi = cfg.beta1 * m.data()[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi as f32;
            v.data_mut()[i] = vi as f32;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            let delta = lr_t * mhat / (vhat.sqrt() + cfg.epsilon);
            p.data_mut()[i] = (p.data()[i] as f64 - delta) as f32;
        }
    }
    Ok(())
}

/// `-ln(probs[label])` with probabilities clamped at 1e-12.
pub fn cross_entropy(probs: &Tensor<f32>, label: u8) -> Result<f64> {
    if probs.shape() != [2] && probs.shape() != [1, 2] {
        return Err(Error::ShapeMismatch(format!("cross_entropy: probs {:?}", probs.shape())));
    }
    if label > 1 {
        return Err(Error::InvalidArgument(format!("label must be 0 or 1, got {label}")));
    }
    let p = (probs.data()[label as usize] as f64).max(CE_CLAMP);
    Ok(-p.ln())
}

/// Build the training graph for one batch: extractor, per-block heads, and
/// the summed per-head mean cross-entropy. Returns the loss node plus the
/// trainable leaf ids of the extractor and of each block's head pass.
fn build_train_graph(
    tape: &mut Tape<f32>,
    model: &mut EnsembleModel,
    images: &Tensor<f32>,
    labels: &[usize],
) -> Result<(Id, Vec<Id>, Vec<Vec<Id>>)> {
    let x = tape.constant(images.clone());
    let mut extractor_ids = Vec::new();
    let latent = model.extractor.forward(tape, x, Mode::Train, &mut extractor_ids)?;
    let mut loss: Option<Id> = None;
    let mut head_ids = Vec::with_capacity(model.plan.blocks.len());
    let blocks = model.plan.blocks.clone();
    for (b, block) in blocks.iter().enumerate() {
        let hi = model.head_index(b);
        let sliced =
            tape.slice_spatial(latent, block.row_start, block.row_len, block.col_start, block.col_len)?;
        let mut ids = Vec::new();
        let probs = model.heads[hi].forward(tape, sliced, Mode::Train, &mut ids)?;
        head_ids.push(ids);
        let ce = tape.cross_entropy_mean(probs, labels)?;
        loss = Some(match loss {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    Ok((loss.expect("plans have at least one block"), extractor_ids, head_ids))
}

/// Mean over samples of the sum of per-head cross-entropies, without
/// taking a gradient step.
pub fn ensemble_loss(model: &mut EnsembleModel, batch: &[&Sample]) -> Result<f64> {
    let images = stack_images(batch)?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label as usize).collect();
    // train-mode statistics, but leave running stats untouched
    let saved: Vec<Tensor<f32>> = snapshot_running_stats(model);
    let mut tape = Tape::new();
    let (loss, _, _) = build_train_graph(&mut tape, model, &images, &labels)?;
    let v = tape.value(loss).data()[0] as f64;
    restore_running_stats(model, &saved);
    Ok(v)
}

fn snapshot_running_stats(model: &mut EnsembleModel) -> Vec<Tensor<f32>> {
    let mut out = Vec::new();
    model.visit_mut(&mut |_, t, trainable| {
        if !trainable {
            out.push(t.clone());
        }
    });
    out
}

fn restore_running_stats(model: &mut EnsembleModel, saved: &[Tensor<f32>]) {
    let mut it = saved.iter();
    model.visit_mut(&mut |_, t, trainable| {
        if !trainable {
            *t = it.next().expect("running stat count unchanged").clone();
        }
    });
}

/// One optimization step on a batch; returns the batch loss.
pub fn train_step(
    model: &mut EnsembleModel,
    state: &mut AdamState,
    images: &Tensor<f32>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, extractor_ids, head_ids) = build_train_graph(&mut tape, model, images, labels)?;
    let loss_val = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;
    let grad_of = |id: Id| -> Tensor<f32> {
        grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()))
    };
    let mut flat: Vec<Tensor<f32>> = extractor_ids.iter().map(|&id| grad_of(id)).collect();
    if model.shared_heads {
        // one parameter set served every block: sum gradients positionwise
        let mut acc: Vec<Tensor<f32>> = head_ids[0].iter().map(|&id| grad_of(id)).collect();
        for ids in &head_ids[1..] {
            for (a, &id) in acc.iter_mut().zip(ids) {
                let g = grad_of(id);
                for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                    *av += gv;
                }
            }
        }
        flat.extend(acc);
    } else {
        for ids in &head_ids {
            flat.extend(ids.iter().map(|&id| grad_of(id)));
        }
    }
    let mut params = trainable_model_tensors(model);
    adam_step(&mut params, &flat, state, cfg)?;
    Ok(loss_val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch whose checkpoint was retained (best validation AUC).
    pub best_epoch: usize,
    pub best_auc: f64,
}

/// Train for `cfg.epochs` epochs (seeded shuffle per epoch), evaluating on
/// the validation set after each one. The checkpoint with the best
/// validation AUC (accuracy as tie fallback when AUC is unavailable) is
/// written to `checkpoint_path`. `on_epoch` fires after each epoch;
/// returning `false` stops early.
pub fn fit(
    model: &mut EnsembleModel,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog) -> bool,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("no samples".into()));
    }
    let mut state = AdamState::for_model(model);
    let mut rng = Rng::new(cfg.seed);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for mut batch in batch_iter(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64)? {
            // single-sample batches cannot feed train-mode batch norm
            if batch.len() == 1 && model_has_batchnorm(model) {
                continue;
            }
            // the shuffle decides batch membership; a canonical in-batch
            // order keeps f32 reductions independent of shuffle order
            batch.sort_unstable();
            let samples: Vec<&Sample> = batch.iter().map(|&i| &train_set[i]).collect();
            let images = stack_images(&samples)?;
            let labels: Vec<usize> = samples.iter().map(|s| s.label as usize).collect();
            loss_sum += train_step(model, &mut state, &images, &labels, cfg)?;
            n_batches += 1;
        }
        let train_loss = if n_batches > 0 { loss_sum / n_batches as f64 } else { f64::NAN };
        let report = evaluate(model, val_set, None)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            val_acc: report.vote_accuracy,
            val_auc: report.auc,
        };
        let score = entry.val_auc.unwrap_or(entry.val_acc);
        let improved = best.map_or(true, |(b, _)| score > b);
        if improved {
            best = Some((score, epoch));
            if let Some(p) = checkpoint_path {
                save_checkpoint(p, model, cfg, epoch, &rng)?;
            }
        }
        let go_on = on_epoch(&entry);
        log.push(entry);
        if !go_on {
            break;
        }
        // advance the session rng so resumed runs diverge per epoch
        rng.next_u64();
    }
    let (best_auc, best_epoch) = best.expect("at least one epoch ran");
    Ok(FitOutcome { log, best_epoch, best_auc })
}

fn model_has_batchnorm(model: &mut EnsembleModel) -> bool {
    let mut any = false;
    model.visit_mut(&mut |name, _, trainable| {
        if !trainable && name.ends_with("running_mean") {
            any = true;
        }
    });
    any
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub n: usize,
    /// Accuracy of the hard-vote label.
    pub vote_accuracy: f64,
    /// Score-based metrics over mean prob_real across voters; absent when
    /// the dataset has a single class.
    pub auc: Option<f64>,
    pub roc: Option<RocCurve>,
    pub scores: Vec<ScoredSample>,
    /// Accuracy of thresholding the mean score, when a threshold was given.
    pub threshold_accuracy: Option<f64>,
}

/// Per-sample per-voter probabilities of REAL, batched through the frozen
/// model in inference mode.
pub fn predict_probs(
    model: &mut EnsembleModel,
    samples: &[Sample],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let images = stack_images(&refs)?;
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let mut ids = Vec::new();
        let latent_id = model.extractor.forward(&mut tape, x, Mode::Infer, &mut ids)?;
        let latent = tape.value(latent_id).clone();
        let ls = latent.shape().to_vec();
        let n = ls[0];
        let mut per_sample: Vec<Vec<f64>> = vec![Vec::new(); n];
        let per = latent.numel() / n;
        for b in 0..model.plan.blocks.len() {
            let hi = model.head_index(b);
            let block = model.plan.blocks[b];
            // stack the b-th block of every sample
            let mut stacked =
                Tensor::zeros(vec![n, block.row_len, block.col_len, ls[3]]);
            let bper = stacked.numel() / n;
            for i in 0..n {
                let one = Tensor::new(
                    vec![ls[1], ls[2], ls[3]],
                    latent.data()[i * per..(i + 1) * per].to_vec(),
                )?;
                let plan = crate::segmentation::BlockPlan { blocks: vec![block] };
                let piece = split_feature(&one, &plan)?.remove(0);
                stacked.data_mut()[i * bper..(i + 1) * bper].copy_from_slice(piece.data());
            }
            let mut tape = Tape::new();
            let xb = tape.constant(stacked);
            let mut ids = Vec::new();
            let probs = model.heads[hi].forward(&mut tape, xb, Mode::Infer, &mut ids)?;
            let pv = tape.value(probs);
            for i in 0..n {
                per_sample[i].push(pv.data()[i * 2 + 1] as f64);
            }
        }
        out.extend(per_sample);
    }
    Ok(out)
}

/// Hard-vote accuracy plus ROC/AUC over the mean-probability score.
pub fn evaluate(
    model: &mut EnsembleModel,
    samples: &[Sample],
    threshold: Option<f64>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples".into()));
    }
    let probs = predict_probs(model, samples)?;
    let mut correct = 0usize;
    let mut scores = Vec::with_capacity(samples.len());
    for (s, pv) in samples.iter().zip(&probs) {
        let per_voter: Vec<(Label, f64)> =
            pv.iter().map(|&p| (Label::from_prob_real(p), p)).collect();
        let vote = hard_vote(&per_voter)?;
        if vote.label.as_index() == s.label as usize {
            correct += 1;
        }
        let mean = pv.iter().sum::<f64>() / pv.len() as f64;
        scores.push(ScoredSample { score: mean, label: s.label });
    }
    let vote_accuracy = correct as f64 / samples.len() as f64;
    let both_classes = scores.iter().any(|s| s.label == 0) && scores.iter().any(|s| s.label == 1);
    let (auc, roc) = if both_classes {
        let roc = roc_curve(&scores)?;
        (Some(auc_trapezoid(&roc)), Some(roc))
    } else {
        (None, None)
    };
    let threshold_accuracy = threshold.map(|t| {
        let c = confusion(&scores, t);
        c.accuracy()
    });
    Ok(EvalReport { n: samples.len(), vote_accuracy, auc, roc, scores, threshold_accuracy })
}

// ── checkpointing ──────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGF1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub config: TrainConfig,
    pub arch: Arch,
    pub profile: Profile,
    pub scheme: String,
    pub shared_heads: bool,
    pub epoch: usize,
    pub rng: Rng,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// Write the model (every tensor, including batch-norm running statistics)
/// as magic + length-prefixed JSON header + raw little-endian f32 payloads
/// in directory order.
pub fn save_checkpoint(
    path: &Path,
    model: &EnsembleModel,
    cfg: &TrainConfig,
    epoch: usize,
    rng: &Rng,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    model.visit(&mut |name, t, _| {
        let byte_offset = payload.len() as u64;
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset,
            byte_len: (t.numel() * 4) as u64,
        });
    });
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        tensors: entries,
        config: cfg.clone(),
        arch: model.arch,
        profile: model.profile,
        scheme: model.scheme.name(),
        shared_heads: model.shared_heads,
        epoch,
        rng: rng.clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| Error::TruncatedCheckpoint("unexpected end of file".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic bytes".into()));
    }
    let mut lenb = [0u8; 8];
    f.read_exact(&mut lenb).map_err(|_| Error::TruncatedCheckpoint("unexpected end of file".into()))?;
    let hlen = u64::from_le_bytes(lenb) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf).map_err(|_| Error::TruncatedCheckpoint("unexpected end of file".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            got: header.format_version,
        });
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(Error::MalformedCheckpoint(format!("unsupported dtype {}", e.dtype)));
        }
        let start = e.byte_offset as usize;
        let end = start + e.byte_len as usize;
        let bytes = payload.get(start..end).ok_or(Error::TruncatedCheckpoint("unexpected end of file".into()))?;
        let expected: usize = e.shape.iter().product();
        if bytes.len() != expected * 4 {
            return Err(Error::MalformedCheckpoint(format!(
                "tensor '{}': {} bytes for shape {:?}",
                e.name,
                bytes.len(),
                e.shape
            )));
        }
        let data: Vec<f32> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok(Checkpoint { header, tensors })
}

impl Checkpoint {
    /// Rebuild the model this checkpoint was saved from, bit-exact.
    pub fn build_model(&self) -> Result<EnsembleModel> {
        let scheme = SegmentationScheme::parse(&self.header.scheme)?;
        let mut rng = Rng::new(0);
        let mut model = build_ensemble(
            self.header.arch,
            scheme,
            self.header.profile,
            self.header.shared_heads,
            &mut rng,
        )?;
        let mut it = self.tensors.iter();
        let mut err: Option<Error> = None;
        model.visit_mut(&mut |name, t, _| {
            if err.is_some() {
                return;
            }
            match it.next() {
                Some((cname, ct)) if *cname == name && ct.shape() == t.shape() => {
                    *t = ct.clone();
                }
                Some((cname, ct)) => {
                    err = Some(Error::MalformedCheckpoint(format!(
                        "expected tensor '{name}' {:?}, found '{cname}' {:?}",
                        t.shape(),
                        ct.shape()
                    )));
                }
                None => {
                    err = Some(Error::MalformedCheckpoint(format!("missing tensor '{name}'")));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if it.next().is_some() {
            return Err(Error::MalformedCheckpoint("extra tensors in checkpoint".into()));
        }
        Ok(model)
    }

    /// Error unless the checkpoint was saved with `scheme`.
    pub fn expect_scheme(&self, scheme: SegmentationScheme) -> Result<()> {
        if self.header.scheme != scheme.name() {
            return Err(Error::SchemeMismatch {
                expected: self.header.scheme.clone(),
                got: scheme.name(),
            });
        }
        Ok(())
    }
}
