//! Forward passes: dual encoders, causal decoder, generation.
//!
//! The image reaches the decoder as a single prefix token projected from the
//! image embedding, so every pixel's influence flows through the encoder.
//! Sequence layout: `[img] q .. q [bos] a .. a`; the logit row at the BOS
//! position predicts the first answer token.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Arch, BoundParams, ParamSet, TokenSeq, TrackSpec, BOS, EOS};
use crate::rng::stream;
use crate::tensor::NodeId;
use crate::{Real, Tape, Tensor};

/// Decode settings. Temperature 0 is greedy decoding and ignores
/// `top_p` and `seed`.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            temperature: 0.0,
            top_p: 1.0,
            max_new_tokens: 128,
            seed: 0,
        }
    }
}

impl DecodeParams {
    pub fn greedy() -> Self {
        DecodeParams::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be finite and >= 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("top_p must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Inputs of the `llm`-group linear layers, recorded during a forward pass
/// for activation-aware pruning.
pub struct LinearProbes {
    pub inputs: IndexMap<String, NodeId>,
}

/// Result of a teacher-forced decoder forward.
pub struct LmGraph {
    /// `(|a_prefix|+1) x V` logit rows over the answer positions.
    pub logits: NodeId,
    /// Unit-norm image embedding shared with the semantic loss.
    pub image_embed: NodeId,
    pub probes: Option<LinearProbes>,
}

fn tape_dims(tape: &Tape, id: NodeId) -> Vec<usize> {
    tape.value(id).dims().to_vec()
}

fn check_ids(arch: &Arch, ids: &[u32]) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= arch.vocab) {
        return Err(Error::contract(format!(
            "token id {bad} out of range for vocab {}",
            arch.vocab
        )));
    }
    Ok(())
}

/// Image to unit embedding; differentiable in both the image and the
/// encoder parameters.
///
/// A 2x2 grid of patches goes through a shared two-layer MLP; patch codes
/// concatenate and project to the embedding. Weight sharing across patches
/// makes shape/color features compose across positions.
pub fn encode_image_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    arch: &Arch,
    x: NodeId,
) -> Result<NodeId> {
    if tape.value(x).dims() != arch.image_dims().as_slice() {
        return Err(Error::Shape {
            op: "encode_image",
            lhs: tape.value(x).dims().to_vec(),
            rhs: arch.image_dims(),
        });
    }
    // Center pixels to [-1, 1] so the first tanh layer works in its
    // nonlinear range.
    let half = tape.constant(Tensor::full(tape_dims(tape, x).as_slice(), -0.5));
    let centered = tape.add(x, half)?;
    let centered = tape.scale(centered, 2.0)?;
    let (ph, pw) = (arch.image_h / 2, arch.image_w / 2);
    // Row-major [H, W, C] viewed as [H, W*C]; a patch is a row/col block.
    let as_rows = tape.reshape(centered, &[arch.image_h, arch.image_w * arch.image_c])?;
    let mut codes = Vec::with_capacity(4);
    for (r0, c0) in [(0, 0), (0, pw), (ph, 0), (ph, pw)] {
        let rows = tape.slice_rows(as_rows, r0, ph)?;
        let patch = tape.slice_cols(rows, c0 * arch.image_c, pw * arch.image_c)?;
        let flat = tape.reshape(patch, &[1, ph * pw * arch.image_c])?;
        let h = tape.matmul(flat, bound.id("img_enc.patch.w1"))?;
        let h = tape.add_rows(h, bound.id("img_enc.patch.b1"))?;
        let h = tape.tanh(h)?;
        let h = tape.matmul(h, bound.id("img_enc.patch.w2"))?;
        let h = tape.add_rows(h, bound.id("img_enc.patch.b2"))?;
        codes.push(tape.tanh(h)?);
    }
    let joined = tape.concat_cols(&codes)?;
    let e = tape.matmul(joined, bound.id("img_enc.out.w"))?;
    let e = tape.add_rows(e, bound.id("img_enc.out.b"))?;
    let e = tape.reshape(e, &[arch.embed_dim])?;
    tape.normalize(e)
}

/// Token sequence to unit embedding via mean-pooled token embeddings and the
/// encoder-group pooling head.
pub fn encode_text_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    arch: &Arch,
    ids: &[u32],
) -> Result<NodeId> {
    if ids.is_empty() {
        return Err(Error::contract("encode_text: empty sequence"));
    }
    check_ids(arch, ids)?;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let rows = tape.gather(bound.id("tok_emb"), &idx)?;
    let pooled = tape.mean_rows(rows)?;
    let pooled = tape.reshape(pooled, &[1, arch.width])?;
    let e = tape.matmul(pooled, bound.id("txt_pool.w"))?;
    let e = tape.add_rows(e, bound.id("txt_pool.b"))?;
    let e = tape.reshape(e, &[arch.embed_dim])?;
    tape.normalize(e)
}

/// Teacher-forced decoder forward over `[img] q [bos] a_prefix`.
pub fn forward_lm_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    arch: &Arch,
    x: NodeId,
    q: &[u32],
    a_prefix: &[u32],
    want_probes: bool,
) -> Result<LmGraph> {
    check_ids(arch, q)?;
    check_ids(arch, a_prefix)?;
    let seq_len = 1 + q.len() + 1 + a_prefix.len();
    if seq_len > arch.max_seq {
        return Err(Error::contract(format!(
            "sequence overflow: {seq_len} tokens exceeds max {}",
            arch.max_seq
        )));
    }
    let mut probes = want_probes.then(|| LinearProbes {
        inputs: IndexMap::new(),
    });
    let probe = |name: &str, id: NodeId, probes: &mut Option<LinearProbes>| {
        if let Some(p) = probes.as_mut() {
            p.inputs.insert(name.to_string(), id);
        }
    };

    let image_embed = encode_image_on_tape(tape, bound, arch, x)?;
    let e_row = tape.reshape(image_embed, &[1, arch.embed_dim])?;
    probe("connector.w", e_row, &mut probes);
    let img_tok = tape.matmul(e_row, bound.id("connector.w"))?;
    let img_tok = tape.add_rows(img_tok, bound.id("connector.b"))?;

    let mut ids: Vec<usize> = Vec::with_capacity(seq_len - 1);
    ids.extend(q.iter().map(|&i| i as usize));
    ids.push(BOS as usize);
    ids.extend(a_prefix.iter().map(|&i| i as usize));
    let tok_rows = tape.gather(bound.id("tok_emb"), &ids)?;
    let mut rows = tape.concat_rows(&[img_tok, tok_rows])?;
    let pos = tape.slice_rows(bound.id("pos_emb"), 0, seq_len)?;
    rows = tape.add(rows, pos)?;

    // Causal mask: finite large negative keeps every value finite.
    let mut mask = vec![0.0 as Real; seq_len * seq_len];
    for i in 0..seq_len {
        for j in (i + 1)..seq_len {
            mask[i * seq_len + j] = -1e9;
        }
    }
    let mask = tape.constant(Tensor::new(vec![seq_len, seq_len], mask)?);
    let hd = arch.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();

    for layer in 0..arch.layers {
        let p = |s: &str| format!("dec.{layer}.{s}");
        let ln1 = tape.layer_norm(rows, bound.id(&p("ln1.g")), bound.id(&p("ln1.b")), 1e-5)?;
        probe(&p("attn.wq"), ln1, &mut probes);
        probe(&p("attn.wk"), ln1, &mut probes);
        probe(&p("attn.wv"), ln1, &mut probes);
        let qm = tape.matmul(ln1, bound.id(&p("attn.wq")))?;
        let qm = tape.add_rows(qm, bound.id(&p("attn.bq")))?;
        let km = tape.matmul(ln1, bound.id(&p("attn.wk")))?;
        let km = tape.add_rows(km, bound.id(&p("attn.bk")))?;
        let vm = tape.matmul(ln1, bound.id(&p("attn.wv")))?;
        let vm = tape.add_rows(vm, bound.id(&p("attn.bv")))?;

        let mut heads = Vec::with_capacity(arch.heads);
        for h in 0..arch.heads {
            let qh = tape.slice_cols(qm, h * hd, hd)?;
            let kh = tape.slice_cols(km, h * hd, hd)?;
            let vh = tape.slice_cols(vm, h * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let masked = tape.add(scores, mask)?;
            let probs = tape.softmax(masked)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        probe(&p("attn.wo"), ctx, &mut probes);
        let attn = tape.matmul(ctx, bound.id(&p("attn.wo")))?;
        let attn = tape.add_rows(attn, bound.id(&p("attn.bo")))?;
        rows = tape.add(rows, attn)?;

        let ln2 = tape.layer_norm(rows, bound.id(&p("ln2.g")), bound.id(&p("ln2.b")), 1e-5)?;
        probe(&p("mlp.w1"), ln2, &mut probes);
        let h1 = tape.matmul(ln2, bound.id(&p("mlp.w1")))?;
        let h1 = tape.add_rows(h1, bound.id(&p("mlp.b1")))?;
        let h1 = tape.tanh(h1)?;
        probe(&p("mlp.w2"), h1, &mut probes);
        let mlp = tape.matmul(h1, bound.id(&p("mlp.w2")))?;
        let mlp = tape.add_rows(mlp, bound.id(&p("mlp.b2")))?;
        rows = tape.add(rows, mlp)?;
    }

    let lnf = tape.layer_norm(rows, bound.id("final.ln.g"), bound.id("final.ln.b"), 1e-5)?;
    probe("head.w", lnf, &mut probes);
    let logits_full = tape.matmul(lnf, bound.id("head.w"))?;
    let logits_full = tape.add_rows(logits_full, bound.id("head.b"))?;
    let logits = tape.slice_rows(logits_full, 1 + q.len(), a_prefix.len() + 1)?;

    Ok(LmGraph {
        logits,
        image_embed,
        probes,
    })
}

// ── plain (untracked) wrappers ──────────────────────────────────────────

pub fn encode_image(params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, TrackSpec::None);
    let xn = tape.constant(x.clone());
    let e = encode_image_on_tape(&mut tape, &bound, &params.arch, xn)?;
    Ok(tape.value(e).clone())
}

pub fn encode_text(params: &ParamSet, seq: &TokenSeq) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, TrackSpec::None);
    let e = encode_text_on_tape(&mut tape, &bound, &params.arch, &seq.ids)?;
    Ok(tape.value(e).clone())
}

/// Teacher-forced logits: `(|a_prefix|+1) x V`.
pub fn forward_lm(
    params: &ParamSet,
    x: &Tensor,
    q: &TokenSeq,
    a_prefix: &TokenSeq,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, TrackSpec::None);
    let xn = tape.constant(x.clone());
    let graph = forward_lm_on_tape(
        &mut tape,
        &bound,
        &params.arch,
        xn,
        &q.ids,
        &a_prefix.ids,
        false,
    )?;
    Ok(tape.value(graph.logits).clone())
}

/// Autoregressive decode. Stops at EOS, `max_new_tokens`, or the sequence
/// capacity. Temperature 0 is argmax with lowest-id tie-break; otherwise
/// nucleus sampling over the smallest prefix with cumulative mass >= top_p.
pub fn generate(
    params: &ParamSet,
    x: &Tensor,
    q: &TokenSeq,
    dp: &DecodeParams,
) -> Result<TokenSeq> {
    dp.validate()?;
    let arch = &params.arch;
    let mut rng = stream(dp.seed, "decode");
    let mut generated: Vec<u32> = Vec::new();
    while generated.len() < dp.max_new_tokens {
        if 1 + q.len() + 1 + generated.len() >= arch.max_seq {
            break;
        }
        let prefix = TokenSeq::new(generated.clone(), crate::model::Role::Generated);
        let logits = forward_lm(params, x, q, &prefix)?;
        let v = arch.vocab;
        let last = &logits.data()[(logits.dims()[0] - 1) * v..];
        let next = if dp.temperature == 0.0 {
            argmax_lowest(last)
        } else {
            sample_nucleus(last, dp.temperature, dp.top_p, rng.gen::<f64>())
        };
        generated.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(TokenSeq::new(generated, crate::model::Role::Generated))
}

fn argmax_lowest(row: &[Real]) -> u32 {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// One nucleus draw given a uniform sample in [0, 1).
pub fn sample_nucleus(row: &[Real], temperature: f64, top_p: f64, u: f64) -> u32 {
    let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut probs: Vec<f64> = row.iter().map(|v| ((v - mx) / temperature).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= sum;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut cut = order.len();
    let mut cum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cum += probs[i];
        if cum >= top_p {
            cut = k + 1;
            break;
        }
    }
    let kept = &order[..cut];
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut acc = 0.0;
    for &i in kept {
        acc += probs[i] / mass;
        if u < acc {
            return i as u32;
        }
    }
    *kept.last().unwrap() as u32
}
