//! Toy multimodal model: dual encoder feeding a small causal decoder.

mod checkpoint;
mod net;
mod pretrain;
pub mod tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use net::{
    encode_image, encode_image_on_tape, encode_text, encode_text_on_tape, forward_lm,
    forward_lm_on_tape, generate, DecodeParams, LinearProbes, LmGraph,
};
pub use pretrain::{
    init_params, pretrain_base, AdamW, CaptionPair, PretrainData, PretrainSchedule, QaSample,
};
pub use tokenizer::{normalize as tokenizer_normalize, Role, TokenSeq, Tokenizer, BOS, EOS, PAD, TRIGGER_QA};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradientMap, NodeId, Tape, Tensor as GTensor};
use crate::{Real, Tensor};

/// Parameter group label; the adversarial update and the pruning surface
/// are restricted by group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Llm,
}

impl Group {
    pub fn tag(self) -> u8 {
        match self {
            Group::Encoder => 0,
            Group::Llm => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Group::Encoder),
            1 => Ok(Group::Llm),
            other => Err(Error::Format(format!("unknown group tag {other}"))),
        }
    }
}

/// Architecture descriptor, persisted verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub image_h: usize,
    pub image_w: usize,
    pub image_c: usize,
    /// Shared embedding dimension of the image/text encoders.
    pub embed_dim: usize,
    /// Hidden width of the image encoder MLP.
    pub enc_hidden: usize,
    pub vocab: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_seq: usize,
}

impl Arch {
    /// Default toy scale: 16x16x3 images, 2-layer width-64 decoder.
    pub fn toy(vocab: usize) -> Arch {
        Arch {
            image_h: 16,
            image_w: 16,
            image_c: 3,
            embed_dim: 64,
            enc_hidden: 128,
            vocab,
            layers: 2,
            width: 64,
            heads: 4,
            mlp_hidden: 256,
            max_seq: 48,
        }
    }

    pub fn image_numel(&self) -> usize {
        self.image_h * self.image_w * self.image_c
    }

    pub fn image_dims(&self) -> Vec<usize> {
        vec![self.image_h, self.image_w, self.image_c]
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.vocab <= tokenizer::RESERVED {
            return Err(Error::config("vocabulary too small"));
        }
        if [
            self.image_h,
            self.image_w,
            self.image_c,
            self.embed_dim,
            self.enc_hidden,
            self.layers,
            self.width,
            self.heads,
            self.mlp_hidden,
            self.max_seq,
        ]
        .iter()
        .any(|&v| v == 0)
        {
            return Err(Error::config("architecture extents must be positive"));
        }
        Ok(())
    }
}

/// One named parameter tensor with its group label.
#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub group: Group,
}

/// Ordered map from unique tensor names to parameters. Iteration order is
/// insertion order and is checkpoint-stable.
#[derive(Clone, Debug)]
pub struct ParamSet {
    pub arch: Arch,
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new(arch: Arch) -> ParamSet {
        ParamSet {
            arch,
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: Group, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name.to_string(), Param { tensor, group });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.entries[name].tensor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Deep bitwise copy.
    pub fn clone_params(&self) -> ParamSet {
        self.clone()
    }

    /// Makes `self` bitwise-equal to `reference`.
    pub fn restore(&mut self, reference: &ParamSet) -> Result<()> {
        if self.arch != reference.arch {
            return Err(Error::contract("restore: architecture mismatch"));
        }
        if self.entries.len() != reference.entries.len() {
            return Err(Error::contract("restore: entry count mismatch"));
        }
        for ((name_a, a), (name_b, b)) in self.entries.iter_mut().zip(reference.entries.iter()) {
            if name_a != name_b || a.tensor.dims() != b.tensor.dims() || a.group != b.group {
                return Err(Error::contract(format!(
                    "restore: entry mismatch at {name_a:?} vs {name_b:?}"
                )));
            }
            a.tensor = b.tensor.clone();
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.arch == other.arch
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((na, a), (nb, b))| {
                    na == nb && a.group == b.group && a.tensor.bitwise_eq(&b.tensor)
                })
    }

    /// Same names, dims, and groups (values may differ).
    pub fn layout_eq(&self, other: &ParamSet) -> bool {
        self.arch == other.arch
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((na, a), (nb, b))| {
                    na == nb && a.group == b.group && a.tensor.dims() == b.tensor.dims()
                })
    }
}

/// Which parameters become tracked leaves when a ParamSet is bound to a tape.
#[derive(Clone, Copy, Debug)]
pub enum TrackSpec<'a> {
    None,
    All,
    Groups(&'a [Group]),
}

impl TrackSpec<'_> {
    fn tracks(&self, group: Group) -> bool {
        match self {
            TrackSpec::None => false,
            TrackSpec::All => true,
            TrackSpec::Groups(gs) => gs.contains(&group),
        }
    }
}

/// Tape binding of a ParamSet: node ids per parameter name.
pub struct BoundParams {
    ids: IndexMap<String, NodeId>,
    tracked: Vec<String>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape<Real>, params: &ParamSet, track: TrackSpec) -> BoundParams {
        let mut ids = IndexMap::new();
        let mut tracked = Vec::new();
        for (name, p) in params.iter() {
            let is_tracked = track.tracks(p.group);
            ids.insert(name.clone(), tape.leaf(p.tensor.clone(), is_tracked));
            if is_tracked {
                tracked.push(name.clone());
            }
        }
        BoundParams { ids, tracked }
    }

    pub fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    /// Extracts tracked-parameter gradients by name. Every tracked leaf has
    /// an entry (zeros when the loss never touched it).
    pub fn named_grads(&self, grads: &GradientMap<Real>) -> IndexMap<String, Tensor> {
        self.tracked
            .iter()
            .map(|name| {
                let g = grads
                    .get(self.ids[name])
                    .expect("tracked leaves always have gradients")
                    .clone();
                (name.clone(), g)
            })
            .collect()
    }
}

// Re-exported for generic helpers in tests.
pub type TapeT = Tape<Real>;
pub type TensorT = GTensor<Real>;
