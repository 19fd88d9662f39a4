//! Model builders: the latent feature extractor, the per-block SModel
//! classifier, the Mesonet baseline and its segmented variant, and the
//! ensemble tying an extractor, a segmentation scheme and voting heads
//! together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    forward_stack, init_params, out_shape_stack, Layer, LayerParams, Mode, Shape,
};
use crate::rng::Rng;
use crate::segmentation::{
    hard_vote, plan_blocks, split_feature, BlockPlan, Label, SegmentationScheme, VoteResult,
};
use crate::tape::{Id, Tape};
use crate::tensor::Tensor;

/// Scale profile: `Full` is the reference geometry (256×256 inputs,
/// 32×32×128 latent); `Desk` is a reduced geometry with the same code path
/// for fast CPU runs (64×64 inputs, 8×8×64 latent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    Full,
    Desk,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Profile> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::InvalidArgument(format!("unknown profile '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Desk => "desk",
        }
    }

    /// Side of the square input image.
    pub fn input_side(self) -> usize {
        match self {
            Profile::Full => 256,
            Profile::Desk => 64,
        }
    }

    /// Channel widths of the three extractor blocks.
    pub fn extractor_channels(self) -> [usize; 3] {
        match self {
            Profile::Full => [32, 64, 128],
            Profile::Desk => [16, 32, 64],
        }
    }

    /// Shape of the latent feature tensor the extractor produces.
    pub fn latent_shape(self) -> Shape {
        let side = self.input_side() / 8;
        Shape::Spatial { h: side, w: side, c: self.extractor_channels()[2] }
    }
}

/// A named layer sequence with a declared per-sample input shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: Shape,
    pub rows: Vec<(String, Layer)>,
}

impl ModelSpec {
    pub fn layers(&self) -> Vec<Layer> {
        self.rows.iter().map(|(_, l)| l.clone()).collect()
    }

    pub fn output_shape(&self) -> Result<Shape> {
        out_shape_stack(&self.layers(), self.input)
    }

    /// Named output shape after each row, starting with the input row.
    pub fn shape_ladder(&self) -> Result<Vec<(String, Shape)>> {
        let mut out = vec![("Input".to_string(), self.input)];
        let mut shape = self.input;
        for (name, layer) in &self.rows {
            shape = layer.out_shape(shape)?;
            out.push((name.clone(), shape));
        }
        Ok(out)
    }
}

/// A spec together with its learned parameters.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: ModelSpec,
    pub params: Vec<LayerParams>,
}

impl Network {
    pub fn init(spec: ModelSpec, rng: &mut Rng) -> Result<Network> {
        let params = init_params(&spec.layers(), spec.input, rng)?;
        Ok(Network { spec, params })
    }

    /// Run the network on the tape; `x` must be `[n, ...input shape]`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<f32>,
        x: Id,
        mode: Mode,
        trainable_ids: &mut Vec<Id>,
    ) -> Result<Id> {
        forward_stack(tape, &self.spec.layers(), &mut self.params, x, mode, trainable_ids)
    }

    pub fn param_count(&self) -> Result<usize> {
        crate::layers::param_count_stack(&self.spec.layers(), self.spec.input)
    }
}

/// Latent feature extractor: three blocks of
/// [conv 3×3 → batchnorm → relu → maxpool 2], spatial side divided by 8.
pub fn build_feature_extractor(profile: Profile) -> ModelSpec {
    let side = profile.input_side();
    let mut rows = Vec::new();
    for (i, &c_out) in profile.extractor_channels().iter().enumerate() {
        let n = i + 1;
        rows.push((format!("Conv2D_{n}"), Layer::Conv2d { k: 3, c_out }));
        rows.push((format!("BatchNorm_{n}"), Layer::BatchNorm));
        rows.push((format!("ReLU_{n}"), Layer::Relu));
        rows.push((format!("MaxPooling_{n}"), Layer::MaxPool { k: 2 }));
    }
    ModelSpec {
        name: "feature_extractor".into(),
        input: Shape::Spatial { h: side, w: side, c: 3 },
        rows,
    }
}

/// Per-block classifier: two separable-convolution residual stages
/// (channels c→c, then c→2c with a projected skip), maxpool 2 between them,
/// then global average pooling → dense(2) → softmax. Global pooling makes
/// it size-agnostic; the intermediate maxpool is dropped for blocks with an
/// odd side (strip splits produce e.g. 10×11 blocks).
pub fn build_smodel(input_channels: usize, block_h: usize, block_w: usize) -> Result<ModelSpec> {
    if block_h < 4 || block_w < 4 {
        return Err(Error::InvalidArgument(format!(
            "smodel needs spatial size >= 4, got {block_h}x{block_w}"
        )));
    }
    let c = input_channels;
    let stage = |ch: usize| Layer::Residual {
        body: vec![
            Layer::SeparableConv2d { k: 3, c_out: ch },
            Layer::BatchNorm,
            Layer::Relu,
            Layer::SeparableConv2d { k: 3, c_out: ch },
            Layer::BatchNorm,
        ],
    };
    let mut rows = vec![("Residual_1".to_string(), stage(c))];
    if block_h % 2 == 0 && block_w % 2 == 0 {
        rows.push(("MaxPooling_1".into(), Layer::MaxPool { k: 2 }));
    }
    rows.push(("Residual_2".into(), stage(2 * c)));
    rows.push(("GlobalAvgPool_1".into(), Layer::GlobalAvgPool));
    rows.push(("FullyConnected_1".into(), Layer::Dense { units: 2 }));
    rows.push(("Softmax_1".into(), Layer::Softmax));
    Ok(ModelSpec { name: "smodel".into(), input: Shape::Spatial { h: block_h, w: block_w, c }, rows })
}

/// The shared front of the Mesonet ladder, up to and including the fourth
/// batch normalization (32×32×16 for a 256×256 input).
fn mesonet_front() -> Vec<(String, Layer)> {
    let mut rows = Vec::new();
    let convs: [(usize, usize); 4] = [(3, 8), (5, 8), (5, 16), (5, 16)];
    for (i, &(k, c_out)) in convs.iter().enumerate() {
        let n = i + 1;
        rows.push((format!("Conv2D_{n}"), Layer::Conv2d { k, c_out }));
        rows.push((format!("ReLU_{n}"), Layer::Relu));
        rows.push((format!("BatchNorm_{n}"), Layer::BatchNorm));
        if n < 4 {
            rows.push((format!("MaxPooling_{n}"), Layer::MaxPool { k: 2 }));
        }
    }
    rows
}

/// The full Mesonet baseline ladder: four conv/batchnorm/pool blocks
/// (channels 8, 8, 16, 16; final pool 4×4), then dense 1024 → 16 → 2.
pub fn build_mesonet(profile: Profile) -> ModelSpec {
    let side = profile.input_side();
    let mut rows = mesonet_front();
    rows.push(("MaxPooling_4".into(), Layer::MaxPool { k: 4 }));
    rows.push(("Flatten".into(), Layer::Flatten));
    rows.push(("FullyConnected_1".into(), Layer::Dense { units: 1024 }));
    rows.push(("ReLU_5".into(), Layer::Relu));
    rows.push(("FullyConnected_2".into(), Layer::Dense { units: 16 }));
    rows.push(("LeakyReLU_1".into(), Layer::LeakyRelu));
    rows.push(("FullyConnected_3".into(), Layer::Dense { units: 2 }));
    rows.push(("Softmax_1".into(), Layer::Softmax));
    ModelSpec {
        name: "mesonet".into(),
        input: Shape::Spatial { h: side, w: side, c: 3 },
        rows,
    }
}

/// One head of the segmented Mesonet: separable conv 5×5 to 256 channels
/// with relu, batchnorm, global average pooling, dense(2), softmax.
fn mesonet_seg_head(block_h: usize, block_w: usize, c_in: usize, index: usize) -> ModelSpec {
    let n = index + 1;
    ModelSpec {
        name: format!("mesonet_seg_head_{n}"),
        input: Shape::Spatial { h: block_h, w: block_w, c: c_in },
        rows: vec![
            (format!("SeparableConv2D_{n}"), Layer::SeparableConv2d { k: 5, c_out: 256 }),
            (format!("ReLU_{n}"), Layer::Relu),
            (format!("BatchNorm_{}", n + 4), Layer::BatchNorm),
            (format!("GlobalAvgPool_{n}"), Layer::GlobalAvgPool),
            (format!("FullyConnected_{n}"), Layer::Dense { units: 2 }),
            (format!("Softmax_{n}"), Layer::Softmax),
        ],
    }
}

/// Architecture family of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// Feature extractor + per-block SModel heads.
    Proposed,
    /// The Mesonet baseline as a single-voter ensemble.
    Mesonet,
    /// Mesonet front + per-block separable-conv heads.
    MesonetSeg,
}

impl Arch {
    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "proposed" => Ok(Arch::Proposed),
            "mesonet" => Ok(Arch::Mesonet),
            "mesonet-seg" => Ok(Arch::MesonetSeg),
            other => Err(Error::InvalidArgument(format!("unknown architecture '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Proposed => "proposed",
            Arch::Mesonet => "mesonet",
            Arch::MesonetSeg => "mesonet-seg",
        }
    }
}

/// An extractor, a block plan over its latent output, and one classifier
/// head per block, combined by hard voting.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub arch: Arch,
    pub profile: Profile,
    pub scheme: SegmentationScheme,
    pub extractor: Network,
    pub plan: BlockPlan,
    /// One network per block; a single network reused for every block when
    /// `shared_heads` is set.
    pub heads: Vec<Network>,
    pub shared_heads: bool,
}

impl EnsembleModel {
    pub fn voter_count(&self) -> usize {
        self.plan.voter_count()
    }

    /// Head parameter set serving block `b`.
    pub fn head_index(&self, b: usize) -> usize {
        if self.shared_heads {
            0
        } else {
            b
        }
    }

    pub fn input_side(&self) -> usize {
        self.profile.input_side()
    }

    /// Visit every parameter tensor with a stable dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<f32>, bool)) {
        for (i, p) in self.extractor.params.iter().enumerate() {
            p.visit(&format!("extractor.{i}"), f);
        }
        for (h, head) in self.heads.iter().enumerate() {
            for (i, p) in head.params.iter().enumerate() {
                p.visit(&format!("head{h}.{i}"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<f32>, bool)) {
        for (i, p) in self.extractor.params.iter_mut().enumerate() {
            p.visit_mut(&format!("extractor.{i}"), f);
        }
        for (h, head) in self.heads.iter_mut().enumerate() {
            for (i, p) in head.params.iter_mut().enumerate() {
                p.visit_mut(&format!("head{h}.{i}"), f);
            }
        }
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = 0usize;
        self.visit(&mut |_, t, trainable| {
            if trainable {
                total += t.numel();
            }
        });
        total
    }
}

/// Build an ensemble of the given architecture, scheme and profile, with
/// freshly initialized parameters.
pub fn build_ensemble(
    arch: Arch,
    scheme: SegmentationScheme,
    profile: Profile,
    shared_heads: bool,
    rng: &mut Rng,
) -> Result<EnsembleModel> {
    if arch == Arch::Mesonet && scheme != SegmentationScheme::Ori {
        return Err(Error::InvalidArgument(format!(
            "the mesonet baseline is unsegmented; use scheme 'ori', not '{}'",
            scheme.name()
        )));
    }
    let (extractor_spec, latent) = match arch {
        Arch::Proposed => {
            let spec = build_feature_extractor(profile);
            let latent = profile.latent_shape();
            (spec, latent)
        }
        Arch::Mesonet | Arch::MesonetSeg => {
            let side = profile.input_side();
            let spec = ModelSpec {
                name: "mesonet_front".into(),
                input: Shape::Spatial { h: side, w: side, c: 3 },
                rows: mesonet_front(),
            };
            let latent = spec.output_shape()?;
            (spec, latent)
        }
    };
    let (lh, lw, lc) = match latent {
        Shape::Spatial { h, w, c } => (h, w, c),
        Shape::Flat { .. } => unreachable!("extractors end spatial"),
    };
    let plan = plan_blocks(scheme, lh, lw)?;
    let extractor = Network::init(extractor_spec, rng)?;

    let head_spec = |b: usize| -> Result<ModelSpec> {
        let block = &plan.blocks[b];
        match arch {
            Arch::Proposed => build_smodel(lc, block.row_len, block.col_len),
            Arch::MesonetSeg => Ok(mesonet_seg_head(block.row_len, block.col_len, lc, b)),
            Arch::Mesonet => {
                // the Table 1 tail: pool 4×4, flatten, dense ladder
                Ok(ModelSpec {
                    name: "mesonet_tail".into(),
                    input: latent,
                    rows: vec![
                        ("MaxPooling_4".into(), Layer::MaxPool { k: 4 }),
                        ("Flatten".into(), Layer::Flatten),
                        ("FullyConnected_1".into(), Layer::Dense { units: 1024 }),
                        ("ReLU_5".into(), Layer::Relu),
                        ("FullyConnected_2".into(), Layer::Dense { units: 16 }),
                        ("LeakyReLU_1".into(), Layer::LeakyRelu),
                        ("FullyConnected_3".into(), Layer::Dense { units: 2 }),
                        ("Softmax_1".into(), Layer::Softmax),
                    ],
                })
            }
        }
    };

    let head_count = if shared_heads { 1 } else { plan.voter_count() };
    let mut heads = Vec::with_capacity(head_count);
    for b in 0..head_count {
        heads.push(Network::init(head_spec(b)?, rng)?);
    }
    Ok(EnsembleModel { arch, profile, scheme, extractor, plan, heads, shared_heads })
}

/// Classify one image: extract the latent feature, split it per the plan,
/// run each head, and hard-vote.
pub fn forward_ensemble(model: &mut EnsembleModel, image: &Tensor<f32>) -> Result<VoteResult> {
    let probs = forward_ensemble_probs(model, image)?;
    let per_voter: Vec<(Label, f64)> =
        probs.iter().map(|&p| (Label::from_prob_real(p), p)).collect();
    hard_vote(&per_voter)
}

/// Per-voter probabilities of REAL for one image, in block order.
pub fn forward_ensemble_probs(
    model: &mut EnsembleModel,
    image: &Tensor<f32>,
) -> Result<Vec<f64>> {
    let side = model.input_side();
    if image.shape() != [side, side, 3] {
        return Err(Error::ShapeMismatch(format!(
            "expected image [{side}, {side}, 3], got {:?}",
            image.shape()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(image.clone().reshaped(vec![1, side, side, 3])?);
    let mut ids = Vec::new();
    let latent_id = model.extractor.forward(&mut tape, x, Mode::Infer, &mut ids)?;
    let latent = tape.value(latent_id).clone();
    let lshape = latent.shape().to_vec();
    let latent = latent.reshaped(lshape[1..].to_vec())?;
    let blocks = split_feature(&latent, &model.plan)?;

    let mut probs = Vec::with_capacity(blocks.len());
    for (b, block) in blocks.into_iter().enumerate() {
        let hi = model.head_index(b);
        let mut tape = Tape::new();
        let bs = block.shape().to_vec();
        let bid = tape.constant(block.reshaped(vec![1, bs[0], bs[1], bs[2]])?);
        let mut ids = Vec::new();
        let out = model.heads[hi].forward(&mut tape, bid, Mode::Infer, &mut ids)?;
        let pv = tape.value(out);
        if pv.shape() != [1, 2] {
            return Err(Error::ShapeMismatch(format!("head output {:?}", pv.shape())));
        }
        probs.push(pv.data()[1] as f64);
    }
    Ok(probs)
}

/// One row of a model summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub shape: Shape,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    pub model: String,
    pub rows: Vec<SummaryRow>,
    pub total_params: usize,
}

impl std::fmt::Display for ModelSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "model: {}", self.model)?;
        writeln!(f, "{:<22} {:>16} {:>12}", "layer", "output shape", "params")?;
        for r in &self.rows {
            writeln!(f, "{:<22} {:>16} {:>12}", r.name, r.shape.to_string(), r.params)?;
        }
        writeln!(f, "{:<22} {:>16} {:>12}", "total", "", self.total_params)
    }
}

/// Per-layer output shapes and trainable parameter counts.
pub fn model_summary(spec: &ModelSpec) -> Result<ModelSummary> {
    let mut rows = vec![SummaryRow { name: "Input".into(), shape: spec.input, params: 0 }];
    let mut shape = spec.input;
    let mut total = 0;
    for (name, layer) in &spec.rows {
        let params = layer.param_count(shape)?;
        shape = layer.out_shape(shape)?;
        total += params;
        rows.push(SummaryRow { name: name.clone(), shape, params });
    }
    Ok(ModelSummary { model: spec.name.clone(), rows, total_params: total })
}
