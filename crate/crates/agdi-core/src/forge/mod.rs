//! Trigger forging: dual-injection losses, sign-PGD image updates,
//! adversarial auxiliary-model updates, and the full optimization loop.
//!
//! Per iteration the auxiliary model first moves against the trigger (its
//! loss is the negated trigger loss, gradients clipped then scaled by the
//! model learning rate), then the image takes one sign step on the trigger
//! loss computed against the updated model, and is projected back into the
//! epsilon-ball and the unit box. After the final step the auxiliary model
//! is restored to the reference clone so successive triggers never
//! accumulate model drift.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::on_grid;
use crate::error::{Error, Result};
use crate::model::{
    encode_text_on_tape, forward_lm_on_tape, generate, load_checkpoint, save_checkpoint,
    BoundParams, DecodeParams, Group, ParamSet, Role, TokenSeq, Tokenizer, TrackSpec, EOS,
};
use crate::tensor::NodeId;
use crate::{Tape, Tensor};

/// Pixel grid unit: images live on multiples of 1/255.
pub const GRID: f64 = 1.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    /// Clamp each gradient element to [-c, +c].
    Elementwise,
    /// Rescale the whole gradient to L2 norm c when it exceeds c.
    Norm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForgeConfig {
    /// Optimization steps K.
    pub steps: usize,
    /// Image step size, in [0,1] pixel units.
    pub alpha: f64,
    /// Perturbation budget, an integer multiple of 1/255.
    pub epsilon: f64,
    /// Model learning rate for the adversarial update; 0 freezes the model.
    pub gamma: f64,
    /// Gradient clip threshold.
    pub clip: f64,
    pub clip_mode: ClipMode,
    /// Weight of the semantic loss in both the trigger and model losses.
    pub lambda: f64,
    /// Parameter groups the adversarial update touches.
    pub update_groups: Vec<Group>,
    pub seed: u64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            steps: 1000,
            alpha: 1.0 / 255.0,
            epsilon: 16.0 / 255.0,
            gamma: 5e-4,
            clip: 5e-4,
            clip_mode: ClipMode::Elementwise,
            lambda: 1.0,
            update_groups: vec![Group::Encoder, Group::Llm],
            seed: 0,
        }
    }
}

impl ForgeConfig {
    /// The frozen-model cross-entropy PGD degenerate configuration.
    pub fn ordinary(&self) -> ForgeConfig {
        ForgeConfig {
            gamma: 0.0,
            lambda: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config("epsilon must be in [0, 1]"));
        }
        let steps = self.epsilon / GRID;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::config(
                "epsilon must be an integer multiple of 1/255",
            ));
        }
        if self.gamma < 0.0 {
            return Err(Error::config("gamma must be >= 0"));
        }
        if self.clip <= 0.0 {
            return Err(Error::config("clip threshold must be > 0"));
        }
        if self.lambda < 0.0 {
            return Err(Error::config("lambda must be >= 0"));
        }
        if self.gamma > 0.0 && self.update_groups.is_empty() {
            return Err(Error::config(
                "update_groups must be nonempty when gamma > 0",
            ));
        }
        Ok(())
    }
}

/// One unit of forging work: a clean image and a question-answer pair.
#[derive(Clone, Debug)]
pub struct TriggerSpec {
    pub id: String,
    pub x_cle: Tensor,
    pub q_trig: TokenSeq,
    /// Target answer tokens, EOS included.
    pub a_tar: TokenSeq,
}

impl TriggerSpec {
    pub fn validate(&self, params: &ParamSet) -> Result<()> {
        if self.x_cle.dims() != params.arch.image_dims().as_slice() {
            return Err(Error::Shape {
                op: "trigger_spec",
                lhs: self.x_cle.dims().to_vec(),
                rhs: params.arch.image_dims(),
            });
        }
        if !on_grid(&self.x_cle) {
            return Err(Error::contract(format!(
                "trigger {}: clean image must lie on the 1/255 grid",
                self.id
            )));
        }
        if self.a_tar.is_empty() || *self.a_tar.ids.last().unwrap() != EOS {
            return Err(Error::contract(format!(
                "trigger {}: target answer must be nonempty and end with EOS",
                self.id
            )));
        }
        let need = 1 + self.q_trig.len() + 1 + self.a_tar.len();
        if need > params.arch.max_seq {
            return Err(Error::contract(format!(
                "trigger {}: sequence budget exceeded ({need} > {})",
                self.id, params.arch.max_seq
            )));
        }
        Ok(())
    }
}

/// Per-step scalar losses recorded during forging.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ForgeTrace {
    pub res: Vec<f64>,
    pub sem: Vec<f64>,
    pub trig: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TriggerArtifact {
    pub x_trig: Tensor,
    pub spec: TriggerSpec,
    pub config: ForgeConfig,
    pub trace: ForgeTrace,
    /// Whether the reference model's greedy decode equals the target after
    /// forging.
    pub converged: bool,
}

/// Loss nodes sharing one forward pass.
pub struct TriggerLossNodes {
    pub res: NodeId,
    pub sem: NodeId,
    pub trig: NodeId,
}

/// Builds the response, semantic, and combined trigger losses on one tape.
/// With `lambda == 0` the combined node IS the response node; the semantic
/// value is still computed for the trace but stays outside the gradient
/// path of `trig`.
pub fn trigger_losses_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    params: &ParamSet,
    x: NodeId,
    spec: &TriggerSpec,
    lambda: f64,
) -> Result<TriggerLossNodes> {
    let arch = &params.arch;
    let a = &spec.a_tar.ids;
    let prefix = &a[..a.len() - 1];
    let graph = forward_lm_on_tape(tape, bound, arch, x, &spec.q_trig.ids, prefix, false)?;
    let ls = tape.log_softmax(graph.logits)?;
    let targets: Vec<usize> = a.iter().map(|&i| i as usize).collect();
    let picked = tape.pick_per_row(ls, &targets)?;
    let sum = tape.sum(picked)?;
    let res = tape.scale(sum, -1.0)?;

    let payload = spec.a_tar.payload();
    let e_txt = encode_text_on_tape(tape, bound, arch, &payload)?;
    let cos = tape.cosine_sim(graph.image_embed, e_txt)?;
    let sem = tape.scale(cos, -1.0)?;

    let trig = if lambda == 0.0 {
        res
    } else {
        let weighted = tape.scale(sem, lambda)?;
        tape.add(res, weighted)?
    };
    Ok(TriggerLossNodes { res, sem, trig })
}

fn eval_loss(
    params: &ParamSet,
    x: &Tensor,
    spec: &TriggerSpec,
    lambda: f64,
    pick: impl Fn(&TriggerLossNodes) -> NodeId,
    negate: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, TrackSpec::None);
    let xn = tape.constant(x.clone());
    let nodes = trigger_losses_on_tape(&mut tape, &bound, params, xn, spec, lambda)?;
    let node = pick(&nodes);
    let node = if negate { tape.scale(node, -1.0)? } else { node };
    Ok(tape.value(node).clone())
}

/// Summed per-token cross-entropy of the target answer under teacher
/// forcing.
pub fn response_loss(params: &ParamSet, x: &Tensor, spec: &TriggerSpec) -> Result<Tensor> {
    eval_loss(params, x, spec, 0.0, |n| n.res, false)
}

/// Negative cosine similarity between the image embedding and the target
/// text embedding.
pub fn semantic_loss(params: &ParamSet, x: &Tensor, spec: &TriggerSpec) -> Result<Tensor> {
    eval_loss(params, x, spec, 0.0, |n| n.sem, false)
}

/// Response loss plus `lambda` times the semantic loss.
pub fn trigger_loss(
    params: &ParamSet,
    x: &Tensor,
    spec: &TriggerSpec,
    lambda: f64,
) -> Result<Tensor> {
    eval_loss(params, x, spec, lambda, |n| n.trig, false)
}

/// Negated trigger loss; the objective the auxiliary model descends.
pub fn model_loss(
    params: &ParamSet,
    x: &Tensor,
    spec: &TriggerSpec,
    lambda: f64,
) -> Result<Tensor> {
    eval_loss(params, x, spec, lambda, |n| n.trig, true)
}

/// Applies one clipped gradient-descent step to the parameters in
/// `update_groups`; everything else is untouched.
pub fn adv_model_step(
    params: &mut ParamSet,
    grads: &IndexMap<String, Tensor>,
    gamma: f64,
    clip: f64,
    mode: ClipMode,
    update_groups: &[Group],
) -> Result<()> {
    if clip <= 0.0 {
        return Err(Error::config("clip threshold must be > 0"));
    }
    // Norm mode computes one global factor over the in-group gradient.
    let norm_factor = match mode {
        ClipMode::Elementwise => 1.0,
        ClipMode::Norm => {
            let mut sq = 0.0;
            for (name, p) in params.iter() {
                if !update_groups.contains(&p.group) {
                    continue;
                }
                let g = grads.get(name).ok_or_else(|| {
                    Error::contract(format!("missing gradient for parameter {name:?}"))
                })?;
                sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
            let norm = sq.sqrt();
            if norm > clip {
                clip / norm
            } else {
                1.0
            }
        }
    };
    for (name, p) in params.iter_mut() {
        if !update_groups.contains(&p.group) {
            continue;
        }
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing gradient for parameter {name:?}")))?;
        if g.dims() != p.tensor.dims() {
            return Err(Error::Shape {
                op: "adv_model_step",
                lhs: p.tensor.dims().to_vec(),
                rhs: g.dims().to_vec(),
            });
        }
        match mode {
            ClipMode::Elementwise => {
                for (w, gi) in p.tensor.data_mut().iter_mut().zip(g.data()) {
                    *w -= gamma * gi.clamp(-clip, clip);
                }
            }
            ClipMode::Norm => {
                for (w, gi) in p.tensor.data_mut().iter_mut().zip(g.data()) {
                    *w -= gamma * norm_factor * gi;
                }
            }
        }
    }
    Ok(())
}

/// One sign step: `x - alpha * sign(g)`, with `sign(0) = 0`.
pub fn pgd_step(x: &Tensor, g: &Tensor, alpha: f64) -> Result<Tensor> {
    if x.dims() != g.dims() {
        return Err(Error::Shape {
            op: "pgd_step",
            lhs: x.dims().to_vec(),
            rhs: g.dims().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(xi, gi)| {
            let s = if *gi > 0.0 {
                1.0
            } else if *gi < 0.0 {
                -1.0
            } else {
                0.0
            };
            xi - alpha * s
        })
        .collect();
    Tensor::new(x.dims().to_vec(), data)
}

/// Clamps the perturbation into the epsilon-ball, then the image into
/// [0, 1]. Idempotent.
pub fn project(x: &Tensor, x_cle: &Tensor, epsilon: f64) -> Result<Tensor> {
    if x.dims() != x_cle.dims() {
        return Err(Error::Shape {
            op: "project",
            lhs: x.dims().to_vec(),
            rhs: x_cle.dims().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(x_cle.data())
        .map(|(xi, ci)| (ci + (xi - ci).clamp(-epsilon, epsilon)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.dims().to_vec(), data)
}

/// Rounds every pixel to the nearest 1/255 grid point.
pub fn snap_to_grid(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| (v * 255.0).round() / 255.0).collect();
    Tensor::new(x.dims().to_vec(), data).expect("snap keeps dims")
}

/// Observer payload for per-step inspection in tests.
pub struct StepObs<'a> {
    pub step: usize,
    pub x: &'a Tensor,
    pub l_res: f64,
    pub l_sem: f64,
    pub l_trig: f64,
}

/// The forging loop against a caller-owned auxiliary model. On return the
/// auxiliary model is bitwise-equal to `reference`.
pub fn forge_with_aux(
    aux: &mut ParamSet,
    reference: &ParamSet,
    spec: &TriggerSpec,
    cfg: &ForgeConfig,
    mut observer: Option<&mut dyn FnMut(&StepObs)>,
) -> Result<TriggerArtifact> {
    cfg.validate()?;
    spec.validate(reference)?;
    if !aux.layout_eq(reference) {
        return Err(Error::contract("auxiliary/reference layout mismatch"));
    }
    let mut x = spec.x_cle.clone();
    let mut trace = ForgeTrace::default();
    let abort = |k: usize, e: Error, trace: &ForgeTrace| {
        Error::numeric(
            "forge_trigger",
            format!(
                "aborted at step {k}: {e} (last trig losses {:?})",
                trace.trig.iter().rev().take(3).collect::<Vec<_>>()
            ),
        )
    };
    for k in 0..cfg.steps {
        // Model update on the current image (skipped exactly when gamma=0).
        if cfg.gamma > 0.0 {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, aux, TrackSpec::Groups(&cfg.update_groups));
            let xn = tape.constant(x.clone());
            let nodes = trigger_losses_on_tape(&mut tape, &bound, aux, xn, spec, cfg.lambda)
                .map_err(|e| abort(k, e, &trace))?;
            let m_loss = tape.scale(nodes.trig, -1.0).map_err(|e| abort(k, e, &trace))?;
            let grads = tape.backward(m_loss).map_err(|e| abort(k, e, &trace))?;
            let named = bound.named_grads(&grads);
            adv_model_step(aux, &named, cfg.gamma, cfg.clip, cfg.clip_mode, &cfg.update_groups)?;
        }

        // Image update on the updated model.
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, aux, TrackSpec::None);
        let xn = tape.leaf(x.clone(), true);
        let nodes = trigger_losses_on_tape(&mut tape, &bound, aux, xn, spec, cfg.lambda)
            .map_err(|e| abort(k, e, &trace))?;
        let (l_res, l_sem, l_trig) = (
            tape.value(nodes.res).item(),
            tape.value(nodes.sem).item(),
            tape.value(nodes.trig).item(),
        );
        debug_assert!(
            (l_trig - (l_res + cfg.lambda * l_sem)).abs() <= 1e-12,
            "loss identity violated at step {k}"
        );
        let grads = tape.backward(nodes.trig).map_err(|e| abort(k, e, &trace))?;
        let gx = grads.get(xn).expect("tracked image leaf");
        x = pgd_step(&x, gx, cfg.alpha)?;
        x = project(&x, &spec.x_cle, cfg.epsilon)?;
        x = snap_to_grid(&x);
        trace.res.push(l_res);
        trace.sem.push(l_sem);
        trace.trig.push(l_trig);
        if let Some(obs) = observer.as_deref_mut() {
            obs(&StepObs {
                step: k,
                x: &x,
                l_res,
                l_sem,
                l_trig,
            });
        }
    }
    aux.restore(reference)?;

    let decoded = generate(
        reference,
        &x,
        &spec.q_trig,
        &DecodeParams {
            max_new_tokens: spec.a_tar.len() + 4,
            ..DecodeParams::greedy()
        },
    )?;
    let converged = decoded.ids == spec.a_tar.ids;
    Ok(TriggerArtifact {
        x_trig: x,
        spec: spec.clone(),
        config: cfg.clone(),
        trace,
        converged,
    })
}

/// Forges one trigger image. The base model observed by the caller is
/// bitwise-unchanged.
pub fn forge_trigger(
    base: &ParamSet,
    spec: &TriggerSpec,
    cfg: &ForgeConfig,
) -> Result<TriggerArtifact> {
    let mut aux = base.clone_params();
    forge_with_aux(&mut aux, base, spec, cfg, None)
}

/// Forges a batch; each trigger is independent, workers own private clones,
/// and per-spec failures are collected without stopping the batch.
pub fn forge_batch(
    base: &ParamSet,
    specs: &[TriggerSpec],
    cfg: &ForgeConfig,
) -> Vec<Result<TriggerArtifact>> {
    specs
        .par_iter()
        .map(|spec| forge_trigger(base, spec, cfg))
        .collect()
}

/// Builds the default trigger set: every QA pair crossed with `n_images`
/// deterministic clean scenes, pair-major.
pub fn build_trigger_specs(n_images: usize, seed: u64) -> Result<Vec<TriggerSpec>> {
    let images = crate::data::gen_clean_images(n_images, seed)?;
    let pairs = crate::data::trigger_pair_seqs();
    let mut specs = Vec::with_capacity(pairs.len() * n_images);
    for (pi, (q, a)) in pairs.iter().enumerate() {
        for (ii, img) in images.iter().enumerate() {
            specs.push(TriggerSpec {
                id: format!("pair{pi}_img{ii}"),
                x_cle: img.clone(),
                q_trig: q.clone(),
                a_tar: a.clone(),
            });
        }
    }
    Ok(specs)
}

// ── artifact persistence ────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Sidecar {
    id: String,
    question: String,
    target: String,
    q_ids: Vec<u32>,
    a_ids: Vec<u32>,
    config: ForgeConfig,
    converged: bool,
    trace: ForgeTrace,
}

/// Writes `<stem>.bin` (tensor container holding `x_trig` and `x_cle`),
/// `<stem>.json` (spec text, config, convergence, trace), and optionally a
/// lossless `<stem>.png`.
pub fn save_artifact(
    artifact: &TriggerArtifact,
    arch_source: &ParamSet,
    dir: &Path,
    stem: &str,
    export_png: bool,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut container = ParamSet::new(arch_source.arch.clone());
    // Group tags are meaningless for images; the container format requires
    // one, so both use the encoder tag.
    container.insert("x_trig", Group::Encoder, artifact.x_trig.clone())?;
    container.insert("x_cle", Group::Encoder, artifact.spec.x_cle.clone())?;
    let bin = dir.join(format!("{stem}.bin"));
    save_checkpoint(&container, &bin)?;

    let tok = Tokenizer::standard();
    let sidecar = Sidecar {
        id: artifact.spec.id.clone(),
        question: tok.detokenize(&artifact.spec.q_trig)?,
        target: tok.detokenize(&artifact.spec.a_tar)?,
        q_ids: artifact.spec.q_trig.ids.clone(),
        a_ids: artifact.spec.a_tar.ids.clone(),
        config: artifact.config.clone(),
        converged: artifact.converged,
        trace: artifact.trace.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(dir.join(format!("{stem}.json")), json)?;

    if export_png {
        let (h, w) = (artifact.x_trig.dims()[0], artifact.x_trig.dims()[1]);
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * 3;
                let px = |i: usize| (artifact.x_trig.data()[base + i] * 255.0).round() as u8;
                img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        img.save(dir.join(format!("{stem}.png")))
            .map_err(|e| Error::config(format!("png export: {e}")))?;
    }
    Ok(bin)
}

pub fn load_artifact(dir: &Path, stem: &str) -> Result<TriggerArtifact> {
    let container = load_checkpoint(&dir.join(format!("{stem}.bin")))?;
    let sidecar: Sidecar =
        serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let x_trig = container
        .get("x_trig")
        .ok_or_else(|| Error::Format("artifact missing x_trig".into()))?
        .tensor
        .clone();
    let x_cle = container
        .get("x_cle")
        .ok_or_else(|| Error::Format("artifact missing x_cle".into()))?
        .tensor
        .clone();
    Ok(TriggerArtifact {
        x_trig,
        spec: TriggerSpec {
            id: sidecar.id,
            x_cle,
            q_trig: TokenSeq::new(sidecar.q_ids, Role::Question),
            a_tar: TokenSeq::new(sidecar.a_ids, Role::Answer),
        },
        config: sidecar.config,
        trace: sidecar.trace,
        converged: sidecar.converged,
    })
}
