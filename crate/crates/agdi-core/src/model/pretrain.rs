//! Parameter initialization, AdamW, and base-model pretraining.
//!
//! Pretraining couples two objectives: answer cross-entropy through the
//! decoder, and a symmetric contrastive loss aligning image and caption
//! embeddings so the dual encoder carries retrieval structure.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    encode_image_on_tape, encode_text_on_tape, forward_lm_on_tape, generate, Arch, BoundParams,
    DecodeParams, Group, ParamSet, Role, TokenSeq, TrackSpec,
};
use crate::rng::{normal_tensor, stream};
use crate::{Tape, Tensor};

/// One supervised decoder sample; `answer` includes the trailing EOS.
#[derive(Clone, Debug)]
pub struct QaSample {
    pub image: Tensor,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}

/// One contrastive pair.
#[derive(Clone, Debug)]
pub struct CaptionPair {
    pub image: Tensor,
    pub caption: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct PretrainData {
    pub qa: Vec<QaSample>,
    pub pairs: Vec<CaptionPair>,
    pub holdout: Vec<QaSample>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub contrastive_weight: f64,
    pub contrastive_temp: f64,
    /// Required held-out greedy exact-match accuracy; 0 disables the gate.
    pub accuracy_floor: f64,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        PretrainSchedule {
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 0.0,
            contrastive_weight: 0.5,
            contrastive_temp: 0.1,
            accuracy_floor: 0.95,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub holdout_accuracy: f64,
}

/// Seeded initialization; per-tensor streams keyed by name so layout
/// changes do not reshuffle unrelated tensors.
pub fn init_params(arch: &Arch, seed: u64) -> Result<ParamSet> {
    arch.validate()?;
    let mut p = ParamSet::new(arch.clone());
    fn add(
        p: &mut ParamSet,
        seed: u64,
        name: &str,
        group: Group,
        dims: &[usize],
        std: f64,
    ) -> Result<()> {
        let t = if std == 0.0 {
            Tensor::zeros(dims)
        } else {
            let mut rng = stream(seed, &format!("init.{name}"));
            normal_tensor(&mut rng, dims, std)
        };
        p.insert(name, group, t)
    }
    let add = |p: &mut ParamSet, name: &str, group: Group, dims: &[usize], std: f64| {
        add(p, seed, name, group, dims, std)
    };
    let ones = |dims: &[usize]| Tensor::full(dims, 1.0);

    let patch_in = (arch.image_h / 2) * (arch.image_w / 2) * arch.image_c;
    let code = arch.enc_hidden / 2;
    add(
        &mut p,
        "img_enc.patch.w1",
        Group::Encoder,
        &[patch_in, arch.enc_hidden],
        (patch_in as f64).powf(-0.5),
    )?;
    add(&mut p, "img_enc.patch.b1", Group::Encoder, &[arch.enc_hidden], 0.0)?;
    add(
        &mut p,
        "img_enc.patch.w2",
        Group::Encoder,
        &[arch.enc_hidden, code],
        (arch.enc_hidden as f64).powf(-0.5),
    )?;
    add(&mut p, "img_enc.patch.b2", Group::Encoder, &[code], 0.0)?;
    add(
        &mut p,
        "img_enc.out.w",
        Group::Encoder,
        &[4 * code, arch.embed_dim],
        (4.0 * code as f64).powf(-0.5),
    )?;
    add(&mut p, "img_enc.out.b", Group::Encoder, &[arch.embed_dim], 0.0)?;
    add(
        &mut p,
        "txt_pool.w",
        Group::Encoder,
        &[arch.width, arch.embed_dim],
        (arch.width as f64).powf(-0.5),
    )?;
    add(&mut p, "txt_pool.b", Group::Encoder, &[arch.embed_dim], 0.0)?;
    add(
        &mut p,
        "connector.w",
        Group::Llm,
        &[arch.embed_dim, arch.width],
        (arch.embed_dim as f64).powf(-0.5),
    )?;
    add(&mut p, "connector.b", Group::Llm, &[arch.width], 0.0)?;
    add(&mut p, "tok_emb", Group::Llm, &[arch.vocab, arch.width], 0.1)?;
    add(&mut p, "pos_emb", Group::Llm, &[arch.max_seq, arch.width], 0.1)?;
    let w_std = (arch.width as f64).powf(-0.5);
    for layer in 0..arch.layers {
        let n = |s: &str| format!("dec.{layer}.{s}");
        p.insert(&n("ln1.g"), Group::Llm, ones(&[arch.width]))?;
        p.insert(&n("ln1.b"), Group::Llm, Tensor::zeros(&[arch.width]))?;
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            add(&mut p, &n(w), Group::Llm, &[arch.width, arch.width], w_std)?;
        }
        for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
            add(&mut p, &n(b), Group::Llm, &[arch.width], 0.0)?;
        }
        p.insert(&n("ln2.g"), Group::Llm, ones(&[arch.width]))?;
        p.insert(&n("ln2.b"), Group::Llm, Tensor::zeros(&[arch.width]))?;
        add(&mut p, &n("mlp.w1"), Group::Llm, &[arch.width, arch.mlp_hidden], w_std)?;
        add(&mut p, &n("mlp.b1"), Group::Llm, &[arch.mlp_hidden], 0.0)?;
        add(
            &mut p,
            &n("mlp.w2"),
            Group::Llm,
            &[arch.mlp_hidden, arch.width],
            (arch.mlp_hidden as f64).powf(-0.5),
        )?;
        add(&mut p, &n("mlp.b2"), Group::Llm, &[arch.width], 0.0)?;
    }
    p.insert("final.ln.g", Group::Llm, ones(&[arch.width]))?;
    p.insert("final.ln.b", Group::Llm, Tensor::zeros(&[arch.width]))?;
    add(&mut p, "head.w", Group::Llm, &[arch.width, arch.vocab], w_std)?;
    add(&mut p, "head.b", Group::Llm, &[arch.vocab], 0.0)?;
    Ok(p)
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW {
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update over named tensors; only names present in `grads` move.
    pub fn step<'a>(
        &mut self,
        tensors: impl Iterator<Item = (&'a String, &'a mut Tensor)>,
        grads: &IndexMap<String, Tensor>,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, tensor) in tensors {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.dims()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.dims()));
            for i in 0..tensor.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let p = tensor.data()[i];
                tensor.data_mut()[i] =
                    p - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p);
            }
        }
    }

    pub fn step_params(
        &mut self,
        params: &mut ParamSet,
        grads: &IndexMap<String, Tensor>,
        lr: f64,
    ) {
        let pairs = params.iter_mut().map(|(n, p)| (n, &mut p.tensor));
        // Borrow gymnastics: collect mutable refs through the iterator.
        let mut buf: Vec<(&String, &mut Tensor)> = Vec::new();
        for (n, t) in pairs {
            buf.push((n, t));
        }
        self.step(buf.into_iter(), grads, lr);
    }
}

/// Mean per-token answer cross-entropy for a chunk of samples, built on one
/// shared tape so the parameter binding and backward sweep amortize. Returns
/// the summed (not averaged) loss and its gradients.
fn chunk_loss_grads(
    params: &ParamSet,
    samples: &[&QaSample],
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, TrackSpec::All);
    let mut losses = Vec::with_capacity(samples.len());
    for sample in samples {
        let x = tape.constant(sample.image.clone());
        let prefix = &sample.answer[..sample.answer.len() - 1];
        let graph = forward_lm_on_tape(
            &mut tape,
            &bound,
            &params.arch,
            x,
            &sample.question,
            prefix,
            false,
        )?;
        let ls = tape.log_softmax(graph.logits)?;
        let targets: Vec<usize> = sample.answer.iter().map(|&i| i as usize).collect();
        let picked = tape.pick_per_row(ls, &targets)?;
        let s = tape.sum(picked)?;
        losses.push(tape.scale(s, -1.0 / sample.answer.len() as f64)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let grads = tape.backward(total)?;
    Ok((tape.value(total).item(), bound.named_grads(&grads)))
}

/// Symmetric InfoNCE over one batch of pairs.
fn contrastive_loss_grads(
    params: &ParamSet,
    batch: &[&CaptionPair],
    temp: f64,
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let b = batch.len();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, TrackSpec::All);
    let arch = &params.arch;
    let mut img_rows = Vec::with_capacity(b);
    let mut txt_rows = Vec::with_capacity(b);
    for pair in batch {
        let x = tape.constant(pair.image.clone());
        let ei = encode_image_on_tape(&mut tape, &bound, arch, x)?;
        img_rows.push(tape.reshape(ei, &[1, arch.embed_dim])?);
        let et = encode_text_on_tape(&mut tape, &bound, arch, &pair.caption)?;
        txt_rows.push(tape.reshape(et, &[1, arch.embed_dim])?);
    }
    let imgs = tape.concat_rows(&img_rows)?;
    let txts = tape.concat_rows(&txt_rows)?;
    let txts_t = tape.transpose(txts)?;
    let logits = tape.matmul(imgs, txts_t)?;
    let logits = tape.scale(logits, 1.0 / temp)?;
    let diag: Vec<usize> = (0..b).collect();
    let ls_rows = tape.log_softmax(logits)?;
    let picked_rows = tape.pick_per_row(ls_rows, &diag)?;
    let logits_t = tape.transpose(logits)?;
    let ls_cols = tape.log_softmax(logits_t)?;
    let picked_cols = tape.pick_per_row(ls_cols, &diag)?;
    let sum_r = tape.sum(picked_rows)?;
    let sum_c = tape.sum(picked_cols)?;
    let total = tape.add(sum_r, sum_c)?;
    let loss = tape.scale(total, -0.5 / b as f64)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), bound.named_grads(&grads)))
}

fn merge_grads(acc: &mut IndexMap<String, Tensor>, part: &IndexMap<String, Tensor>, scale: f64) {
    for (name, g) in part {
        match acc.get_mut(name) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
            None => {
                let mut t = g.clone();
                for v in t.data_mut() {
                    *v *= scale;
                }
                acc.insert(name.clone(), t);
            }
        }
    }
}

/// Greedy exact-match accuracy over a QA slice.
pub fn exact_match_accuracy(params: &ParamSet, samples: &[QaSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("exact_match_accuracy: empty dataset"));
    }
    let results: Vec<Result<bool>> = samples
        .par_iter()
        .map(|s| {
            let dp = DecodeParams {
                max_new_tokens: s.answer.len() + 4,
                ..DecodeParams::greedy()
            };
            let q = TokenSeq::new(s.question.clone(), Role::Question);
            let out = generate(params, &s.image, &q, &dp)?;
            Ok(out.ids == s.answer)
        })
        .collect();
    let mut hits = 0usize;
    for r in results {
        if r? {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Trains a base model from scratch. A zero-epoch schedule returns the
/// initialization unchanged; otherwise the held-out accuracy floor is
/// enforced at the end of the schedule.
pub fn pretrain_base(
    arch: &Arch,
    data: &PretrainData,
    sched: &PretrainSchedule,
    seed: u64,
) -> Result<(ParamSet, PretrainReport)> {
    let mut params = init_params(arch, seed)?;
    let mut report = PretrainReport {
        epoch_losses: Vec::new(),
        holdout_accuracy: 0.0,
    };
    if sched.epochs == 0 {
        return Ok((params, report));
    }
    if data.qa.is_empty() {
        return Err(Error::contract("pretrain_base: empty QA dataset"));
    }
    let mut opt = AdamW::new(sched.weight_decay);
    let mut pair_cursor = 0usize;
    let mut pair_order: Vec<usize> = (0..data.pairs.len()).collect();
    for epoch in 0..sched.epochs {
        // Cosine decay to 10% of the base rate.
        let progress = epoch as f64 / sched.epochs as f64;
        let lr = sched.lr * (0.55 + 0.45 * (std::f64::consts::PI * progress).cos());
        let mut order: Vec<usize> = (0..data.qa.len()).collect();
        let mut rng = stream(seed, &format!("pretrain.epoch.{epoch}"));
        order.shuffle(&mut rng);
        if !data.pairs.is_empty() {
            pair_order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(sched.batch_size) {
            // One tape (and one backward) per fixed-size sub-chunk; gradients
            // merge in sub-chunk order, so thread count cannot change sums.
            let results: Vec<Result<(f64, IndexMap<String, Tensor>)>> = chunk
                .par_chunks(8)
                .map(|ids| {
                    let samples: Vec<&QaSample> = ids.iter().map(|&i| &data.qa[i]).collect();
                    chunk_loss_grads(&params, &samples)
                })
                .collect();
            let mut grads: IndexMap<String, Tensor> = IndexMap::new();
            let mut batch_loss = 0.0;
            let inv = 1.0 / chunk.len() as f64;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss * inv;
                merge_grads(&mut grads, &g, inv);
            }
            if sched.contrastive_weight > 0.0 && !data.pairs.is_empty() {
                let take = sched.batch_size.min(data.pairs.len());
                let batch: Vec<&CaptionPair> = (0..take)
                    .map(|k| &data.pairs[pair_order[(pair_cursor + k) % data.pairs.len()]])
                    .collect();
                pair_cursor = (pair_cursor + take) % data.pairs.len();
                let (closs, cgrads) = contrastive_loss_grads(&params, &batch, sched.contrastive_temp)?;
                batch_loss += sched.contrastive_weight * closs;
                merge_grads(&mut grads, &cgrads, sched.contrastive_weight);
            }
            opt.step_params(&mut params, &grads, lr);
            epoch_loss += batch_loss;
            batches += 1;
        }
        report.epoch_losses.push(epoch_loss / batches as f64);
    }
    if !data.holdout.is_empty() {
        report.holdout_accuracy = exact_match_accuracy(&params, &data.holdout)?;
        if report.holdout_accuracy < sched.accuracy_floor {
            return Err(Error::Training(format!(
                "held-out accuracy {:.3} below floor {:.3} after {} epochs (final loss {:.4})",
                report.holdout_accuracy,
                sched.accuracy_floor,
                sched.epochs,
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            )));
        }
    }
    Ok((params, report))
}
