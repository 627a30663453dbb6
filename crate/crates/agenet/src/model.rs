//! Model assembly: the attentional backbone, the ResNet-lite backbone, the
//! shared two-headed multi-task output with gender-augmented age branch,
//! and ensemble averaging over member predictions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    AttentionModule, AttentionModuleSpec, BatchNorm2d, Conv2d, Dense, ParamKind, ResidualUnit,
    ResidualUnitSpec, TensorVisitor,
};
use crate::scalar::Scalar;
use crate::tensor::{no_grad, ops, Tensor};

pub const GENDER_CLASSES: usize = 2;
/// Width of the hidden dense layer in the age branch.
pub const AGE_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    AttentionNet,
    ResnetLite,
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackboneKind::AttentionNet => write!(f, "attention-net"),
            BackboneKind::ResnetLite => write!(f, "resnet-lite"),
        }
    }
}

/// Declarative description of a multi-task model; everything needed to
/// rebuild the parameter tree from a weight file header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiTaskModelSpec {
    pub backbone: BackboneKind,
    pub input_size: usize,
    pub embedding_dim: usize,
    pub num_age_buckets: usize,
    pub gender_augmentation: bool,
    pub detach_gender_input: bool,
}

impl MultiTaskModelSpec {
    pub fn new(backbone: BackboneKind, input_size: usize, num_age_buckets: usize) -> MultiTaskModelSpec {
        MultiTaskModelSpec {
            backbone,
            input_size,
            embedding_dim: match backbone {
                BackboneKind::AttentionNet => 256,
                BackboneKind::ResnetLite => 512,
            },
            num_age_buckets,
            gender_augmentation: true,
            detach_gender_input: false,
        }
    }

    /// Input width to the age branch's hidden layer.
    pub fn age_input_dim(&self) -> usize {
        if self.gender_augmentation {
            self.embedding_dim + GENDER_CLASSES
        } else {
            self.embedding_dim
        }
    }
}

/// Per-image output probabilities, always stored at f64 for reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub gender_probs: Vec<f64>,
    pub age_probs: Vec<f64>,
}

impl Prediction {
    fn argmax(v: &[f64]) -> usize {
        // ties resolve to the lowest index
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        best
    }

    pub fn gender_class(&self) -> usize {
        Self::argmax(&self.gender_probs)
    }

    pub fn age_class(&self) -> usize {
        Self::argmax(&self.age_probs)
    }
}

/// Elementwise arithmetic mean of member predictions per image.
/// Members must agree on the number of age buckets.
pub fn ensemble_predict(members: &[Vec<Prediction>]) -> Result<Vec<Prediction>> {
    if members.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ensemble needs at least 2 members, got {}",
            members.len()
        )));
    }
    let n = members[0].len();
    let buckets = members[0].first().map(|p| p.age_probs.len()).unwrap_or(0);
    for m in members {
        if m.len() != n {
            return Err(Error::shape("ensemble", format!("member sizes differ: {} vs {}", n, m.len())));
        }
        if m.iter().any(|p| p.age_probs.len() != buckets) {
            return Err(Error::shape("ensemble", "age bucket counts differ across members".to_string()));
        }
    }
    let inv = 1.0 / members.len() as f64;
    Ok((0..n)
        .map(|i| {
            let mut gender = vec![0.0; GENDER_CLASSES];
            let mut age = vec![0.0; buckets];
            for m in members {
                for (a, &b) in gender.iter_mut().zip(&m[i].gender_probs) {
                    *a += b;
                }
                for (a, &b) in age.iter_mut().zip(&m[i].age_probs) {
                    *a += b;
                }
            }
            gender.iter_mut().for_each(|v| *v *= inv);
            age.iter_mut().for_each(|v| *v *= inv);
            Prediction { gender_probs: gender, age_probs: age }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Attention backbone
// ---------------------------------------------------------------------------

/// Stem conv -> maxpool -> three attention modules interleaved with strided
/// residual units -> global average pool -> dense embedding.
pub struct AttentionNet<S: Scalar> {
    stem_conv: Conv2d<S>,
    stem_bn: BatchNorm2d<S>,
    attn1: AttentionModule<S>,
    trans1: ResidualUnit<S>,
    attn2: AttentionModule<S>,
    trans2: ResidualUnit<S>,
    attn3: AttentionModule<S>,
    embed: Dense<S>,
}

/// Channel plan and mask depths for the three attention stages.
const ATTN_CHANNELS: [usize; 3] = [32, 64, 128];
const ATTN_MASK_LEVELS: [usize; 3] = [2, 2, 1];
const ATTN_TRUNK_DEPTH: usize = 2;

impl<S: Scalar> AttentionNet<S> {
    fn new(input_size: usize, embedding_dim: usize, rng: &mut ChaCha8Rng) -> Result<AttentionNet<S>> {
        // stem halves twice; each stage s halves once after its module
        let mut size = input_size;
        if size % 4 != 0 {
            return Err(Error::Config(format!(
                "attention-net input size {} not divisible by the stem downsampling (4)",
                input_size
            )));
        }
        size /= 4;
        let net = AttentionNet {
            stem_conv: Conv2d::new(3, ATTN_CHANNELS[0], 7, 2, 3, rng),
            stem_bn: BatchNorm2d::new(ATTN_CHANNELS[0]),
            attn1: AttentionModule::new(
                AttentionModuleSpec {
                    channels: ATTN_CHANNELS[0],
                    trunk_depth: ATTN_TRUNK_DEPTH,
                    mask_levels: ATTN_MASK_LEVELS[0],
                    residual_gate: true,
                },
                rng,
            ),
            trans1: ResidualUnit::new(
                ResidualUnitSpec { in_channels: ATTN_CHANNELS[0], out_channels: ATTN_CHANNELS[1], stride: 2 },
                rng,
            ),
            attn2: AttentionModule::new(
                AttentionModuleSpec {
                    channels: ATTN_CHANNELS[1],
                    trunk_depth: ATTN_TRUNK_DEPTH,
                    mask_levels: ATTN_MASK_LEVELS[1],
                    residual_gate: true,
                },
                rng,
            ),
            trans2: ResidualUnit::new(
                ResidualUnitSpec { in_channels: ATTN_CHANNELS[1], out_channels: ATTN_CHANNELS[2], stride: 2 },
                rng,
            ),
            attn3: AttentionModule::new(
                AttentionModuleSpec {
                    channels: ATTN_CHANNELS[2],
                    trunk_depth: ATTN_TRUNK_DEPTH,
                    mask_levels: ATTN_MASK_LEVELS[2],
                    residual_gate: true,
                },
                rng,
            ),
            embed: Dense::new(ATTN_CHANNELS[2], embedding_dim, rng),
        };
        for attn in [&net.attn1, &net.attn2, &net.attn3] {
            attn.check_input(size, size)?;
            if size < 2 {
                return Err(Error::Config(format!(
                    "attention-net input size {} leaves no spatial extent at the deepest stage",
                    input_size
                )));
            }
            size /= 2;
        }
        Ok(net)
    }

    fn forward(&self, x: &Tensor<S>, train: bool) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        let stem = ops::maxpool2d(
            &ops::relu(&self.stem_bn.forward(&self.stem_conv.forward(x)?, train)?),
            2,
            2,
        )?;
        let (a1, m1) = self.attn1.forward(&stem, train)?;
        let t1 = self.trans1.forward(&a1, train)?;
        let (a2, m2) = self.attn2.forward(&t1, train)?;
        let t2 = self.trans2.forward(&a2, train)?;
        let (a3, m3) = self.attn3.forward(&t2, train)?;
        let pooled = ops::global_avg_pool(&a3)?;
        let embedding = ops::relu(&self.embed.forward(&pooled)?);
        Ok((embedding, vec![m1, m2, m3]))
    }

    fn visit(&self, f: &mut TensorVisitor<S>) {
        self.stem_conv.visit("stem.conv", f);
        self.stem_bn.visit("stem.bn", f);
        self.attn1.visit("attn1", f);
        self.trans1.visit("trans1", f);
        self.attn2.visit("attn2", f);
        self.trans2.visit("trans2", f);
        self.attn3.visit("attn3", f);
        self.embed.visit("embed", f);
    }
}

// ---------------------------------------------------------------------------
// ResNet-lite backbone
// ---------------------------------------------------------------------------

/// 18-layer residual topology: stem then 4 stages x 2 units at channels
/// 64/128/256/512, global average pool as the embedding.
pub struct ResnetLite<S: Scalar> {
    stem_conv: Conv2d<S>,
    stem_bn: BatchNorm2d<S>,
    stages: Vec<ResidualUnit<S>>,
}

const RESNET_CHANNELS: [usize; 4] = [64, 128, 256, 512];

impl<S: Scalar> ResnetLite<S> {
    fn new(input_size: usize, rng: &mut ChaCha8Rng) -> Result<ResnetLite<S>> {
        if input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "resnet-lite input size {} must be divisible by 32 (five halvings)",
                input_size
            )));
        }
        let stem_conv = Conv2d::new(3, RESNET_CHANNELS[0], 7, 2, 3, rng);
        let stem_bn = BatchNorm2d::new(RESNET_CHANNELS[0]);
        let mut stages = Vec::new();
        let mut in_ch = RESNET_CHANNELS[0];
        for (i, &ch) in RESNET_CHANNELS.iter().enumerate() {
            let first_stride = if i == 0 { 1 } else { 2 };
            stages.push(ResidualUnit::new(
                ResidualUnitSpec { in_channels: in_ch, out_channels: ch, stride: first_stride },
                rng,
            ));
            stages.push(ResidualUnit::new(ResidualUnitSpec::same(ch), rng));
            in_ch = ch;
        }
        Ok(ResnetLite { stem_conv, stem_bn, stages })
    }

    fn forward(&self, x: &Tensor<S>, train: bool) -> Result<Tensor<S>> {
        let mut cur = ops::maxpool2d(
            &ops::relu(&self.stem_bn.forward(&self.stem_conv.forward(x)?, train)?),
            2,
            2,
        )?;
        for unit in &self.stages {
            cur = unit.forward(&cur, train)?;
        }
        ops::global_avg_pool(&cur)
    }

    fn visit(&self, f: &mut TensorVisitor<S>) {
        self.stem_conv.visit("stem.conv", f);
        self.stem_bn.visit("stem.bn", f);
        for (i, unit) in self.stages.iter().enumerate() {
            unit.visit(&format!("stage{}.unit{}", i / 2, i % 2), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Multi-task model
// ---------------------------------------------------------------------------

enum BackboneNet<S: Scalar> {
    Attention(AttentionNet<S>),
    Resnet(ResnetLite<S>),
}

/// Outputs of one forward pass; logits feed the loss, taps feed export.
pub struct ForwardOutput<S: Scalar> {
    pub gender_logits: Tensor<S>,
    pub age_logits: Tensor<S>,
    pub gender_probs: Tensor<S>,
    pub mask_taps: Vec<Tensor<S>>,
}

pub struct MultiTaskModel<S: Scalar> {
    pub spec: MultiTaskModelSpec,
    backbone: BackboneNet<S>,
    gender_head: Dense<S>,
    age_hidden: Dense<S>,
    age_out: Dense<S>,
}

/// Builds a model with the paper-style attentional backbone.
pub fn build_attention_net<S: Scalar>(spec: &MultiTaskModelSpec, seed: u64) -> Result<MultiTaskModel<S>> {
    let mut spec = spec.clone();
    spec.backbone = BackboneKind::AttentionNet;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = BackboneNet::Attention(AttentionNet::new(spec.input_size, spec.embedding_dim, &mut rng)?);
    MultiTaskModel::assemble(spec, backbone, &mut rng)
}

/// Builds a model with the 18-layer residual backbone.
pub fn build_resnet_lite<S: Scalar>(spec: &MultiTaskModelSpec, seed: u64) -> Result<MultiTaskModel<S>> {
    let mut spec = spec.clone();
    spec.backbone = BackboneKind::ResnetLite;
    if spec.embedding_dim != RESNET_CHANNELS[3] {
        return Err(Error::Config(format!(
            "resnet-lite embedding is the {}-wide pooled feature map, spec says {}",
            RESNET_CHANNELS[3], spec.embedding_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = BackboneNet::Resnet(ResnetLite::new(spec.input_size, &mut rng)?);
    MultiTaskModel::assemble(spec, backbone, &mut rng)
}

pub fn build_model<S: Scalar>(spec: &MultiTaskModelSpec, seed: u64) -> Result<MultiTaskModel<S>> {
    match spec.backbone {
        BackboneKind::AttentionNet => build_attention_net(spec, seed),
        BackboneKind::ResnetLite => build_resnet_lite(spec, seed),
    }
}

impl<S: Scalar> MultiTaskModel<S> {
    fn assemble(spec: MultiTaskModelSpec, backbone: BackboneNet<S>, rng: &mut ChaCha8Rng) -> Result<MultiTaskModel<S>> {
        if spec.num_age_buckets == 0 {
            return Err(Error::Config("num_age_buckets must be positive".into()));
        }
        // The gender head is built before the age branch so that toggling
        // gender augmentation leaves its initialization stream unchanged.
        let gender_head = Dense::new(spec.embedding_dim, GENDER_CLASSES, rng);
        let age_hidden = Dense::new(spec.age_input_dim(), AGE_HIDDEN, rng);
        let age_out = Dense::new(AGE_HIDDEN, spec.num_age_buckets, rng);
        Ok(MultiTaskModel { spec, backbone, gender_head, age_hidden, age_out })
    }

    /// Backbone embedding, gender logits, then the age branch fed with the
    /// embedding optionally concatenated with the gender probabilities.
    pub fn forward(&self, images: &Tensor<S>, train: bool) -> Result<ForwardOutput<S>> {
        if images.dims().len() != 4
            || images.dims()[1] != 3
            || images.dims()[2] != self.spec.input_size
            || images.dims()[3] != self.spec.input_size
        {
            return Err(Error::shape(
                "forward_multitask",
                format!(
                    "expected [N,3,{},{}], got {:?}",
                    self.spec.input_size, self.spec.input_size, images.dims()
                ),
            ));
        }
        let (embedding, mask_taps) = match &self.backbone {
            BackboneNet::Attention(net) => net.forward(images, train)?,
            BackboneNet::Resnet(net) => (net.forward(images, train)?, Vec::new()),
        };
        let gender_logits = self.gender_head.forward(&embedding)?;
        let gender_probs = ops::softmax(&gender_logits, 1)?;
        let age_input = if self.spec.gender_augmentation {
            let gender_signal =
                if self.spec.detach_gender_input { gender_probs.detach() } else { gender_probs.clone() };
            ops::concat(&[&embedding, &gender_signal], 1)?
        } else {
            embedding
        };
        let age_logits = self.age_out.forward(&ops::relu(&self.age_hidden.forward(&age_input)?))?;
        Ok(ForwardOutput { gender_logits, age_logits, gender_probs, mask_taps })
    }

    /// Eval-mode probabilities per image, without touching gradients or
    /// batch-norm running statistics.
    pub fn predict(&self, images: &Tensor<S>) -> Result<Vec<Prediction>> {
        no_grad(|| {
            let out = self.forward(images, false)?;
            let age_probs = ops::softmax(&out.age_logits, 1)?;
            let n = images.dims()[0];
            let b = self.spec.num_age_buckets;
            let gp = out.gender_probs.to_f64_vec();
            let ap = age_probs.to_f64_vec();
            Ok((0..n)
                .map(|i| Prediction {
                    gender_probs: gp[i * GENDER_CLASSES..(i + 1) * GENDER_CLASSES].to_vec(),
                    age_probs: ap[i * b..(i + 1) * b].to_vec(),
                })
                .collect())
        })
    }

    /// The mask of each attention module in forward order. Errors on the
    /// residual backbone, which has no attention taps.
    pub fn attention_taps(&self, images: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        match &self.backbone {
            BackboneNet::Resnet(_) => Err(Error::Unsupported(
                "attention taps require the attention-net backbone".into(),
            )),
            BackboneNet::Attention(_) => {
                no_grad(|| Ok(self.forward(images, false)?.mask_taps.iter().map(|t| t.detach()).collect()))
            }
        }
    }

    pub fn visit(&self, f: &mut TensorVisitor<S>) {
        match &self.backbone {
            BackboneNet::Attention(net) => net.visit(f),
            BackboneNet::Resnet(net) => net.visit(f),
        }
        self.gender_head.visit("head.gender", f);
        self.age_hidden.visit("head.age.hidden", f);
        self.age_out.visit("head.age.out", f);
    }

    /// All tensors in stable order: (name, tensor, kind).
    pub fn named_tensors(&self) -> Vec<(String, Tensor<S>, ParamKind)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t, kind| out.push((name, t.clone(), kind)));
        out
    }

    pub fn trainable_params(&self) -> Vec<(String, Tensor<S>)> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, _, k)| *k == ParamKind::Trainable)
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.trainable_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.trainable_params() {
            t.zero_grad();
        }
    }
}
