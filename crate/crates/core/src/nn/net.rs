use rand::Rng;
use serde::{Deserialize, Serialize};

use super::block::{build_block, uniform_tensor, BlockKind, BlockSpec, CandidateOp, CONV_KERNEL};
use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Shape of one (flattened) input row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InputShape {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn flat_len(&self) -> usize {
        match *self {
            InputShape::Vector { dim } => dim,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, InputShape::Image { .. })
    }

    /// Residual block kind matching this modality.
    pub fn block_kind(&self) -> BlockKind {
        if self.is_image() {
            BlockKind::ConvResidual
        } else {
            BlockKind::DenseResidual
        }
    }
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn build<R: Rng + ?Sized>(
        rng: &mut R,
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.insert(format!("{prefix}.w"), uniform_tensor(rng, &[in_dim, out_dim], in_dim));
        let bias = store.insert(format!("{prefix}.b"), uniform_tensor(rng, &[out_dim], in_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Convolution with square kernel and "same" padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn build<R: Rng + ?Sized>(
        rng: &mut R,
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.insert(
            format!("{prefix}.w"),
            uniform_tensor(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
        );
        let bias = store.insert(format!("{prefix}.b"), uniform_tensor(rng, &[out_ch], fan_in));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        tape.conv2d(x, w, Some(b), 1, self.kernel / 2)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }
}

/// Feature-width change: input stems and branch adapters.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Dense(Linear),
    Conv(Conv),
}

impl Projection {
    /// Stem from raw input rows to `width` features (3×3 conv for images).
    pub fn stem<R: Rng + ?Sized>(
        rng: &mut R,
        store: &mut ParamStore,
        prefix: &str,
        input: InputShape,
        width: usize,
    ) -> Self {
        match input {
            InputShape::Vector { dim } => Projection::Dense(Linear::build(rng, store, prefix, dim, width)),
            InputShape::Image { channels, .. } => {
                Projection::Conv(Conv::build(rng, store, prefix, channels, width, CONV_KERNEL))
            }
        }
    }

    /// Linear or 1×1 conv adapter between feature widths.
    pub fn adapter<R: Rng + ?Sized>(
        rng: &mut R,
        store: &mut ParamStore,
        prefix: &str,
        image: bool,
        from: usize,
        to: usize,
    ) -> Self {
        if image {
            Projection::Conv(Conv::build(rng, store, prefix, from, to, 1))
        } else {
            Projection::Dense(Linear::build(rng, store, prefix, from, to))
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Projection::Dense(l) => l.forward(tape, store, x),
            Projection::Conv(c) => c.forward(tape, store, x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Projection::Dense(l) => l.param_count(),
            Projection::Conv(c) => c.param_count(),
        }
    }
}

/// Classifier head: global average pool for image features, then linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub pool: bool,
    pub linear: Linear,
}

impl Head {
    pub fn build<R: Rng + ?Sized>(
        rng: &mut R,
        store: &mut ParamStore,
        prefix: &str,
        image: bool,
        features: usize,
        classes: usize,
    ) -> Self {
        Self {
            pool: image,
            linear: Linear::build(rng, store, prefix, features, classes),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = if self.pool { tape.global_avg_pool(x)? } else { x };
        self.linear.forward(tape, store, h)
    }

    pub fn param_count(&self) -> usize {
        self.linear.param_count()
    }
}

/// Turns `[N, flat]` input rows into the stem's expected layout.
pub(crate) fn shape_input(tape: &mut Tape, input: InputShape, x: Var) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 2 || s[1] != input.flat_len() {
        return Err(shape_err(
            "input",
            format!("expected rows of {} values, got {:?}", input.flat_len(), s),
        ));
    }
    match input {
        InputShape::Vector { .. } => Ok(x),
        InputShape::Image { channels, height, width } => tape.reshape(x, &[s[0], channels, height, width]),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub input: InputShape,
    pub classes: usize,
    /// Feature width carried between blocks.
    pub width: usize,
    /// Hidden width inside each residual block.
    pub hidden: usize,
    pub block_depth: usize,
    pub blocks: usize,
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("teacher needs at least 2 classes, got {}", self.classes)));
        }
        if self.blocks == 0 || self.width == 0 || self.input.flat_len() == 0 {
            return Err(Error::Config("teacher blocks, width and input dims must be positive".into()));
        }
        self.block_spec().validate()
    }

    pub fn block_spec(&self) -> BlockSpec {
        BlockSpec {
            kind: self.input.block_kind(),
            width: self.hidden,
            depth: self.block_depth,
            in_dim: self.width,
            out_dim: self.width,
        }
    }
}

/// Stem, a chain of residual blocks, and a classifier. Student branches
/// attach to the outputs of intermediate blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherNet {
    pub spec: TeacherSpec,
    pub stem: Projection,
    pub blocks: Vec<CandidateOp>,
    pub head: Head,
}

/// Teacher outputs with every block's features kept for grafting.
pub struct TeacherForward {
    /// `features[i]` is the output of block `i + 1`.
    pub features: Vec<Var>,
    pub logits: Var,
}

impl TeacherNet {
    pub fn build<R: Rng + ?Sized>(spec: &TeacherSpec, rng: &mut R, store: &mut ParamStore) -> Result<Self> {
        spec.validate()?;
        let stem = Projection::stem(rng, store, "teacher.stem", spec.input, spec.width);
        let blocks = (0..spec.blocks)
            .map(|i| build_block(&spec.block_spec(), rng, store, &format!("teacher.block{}", i + 1), (i, 0)))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::build(rng, store, "teacher.head", spec.input.is_image(), spec.width, spec.classes);
        Ok(Self {
            spec: spec.clone(),
            stem,
            blocks,
            head,
        })
    }

    /// Block indices (1-based) after which a branch may attach.
    pub fn cut_points(&self) -> Vec<usize> {
        (1..self.blocks.len()).collect()
    }

    pub fn forward_features(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<TeacherForward> {
        let x = shape_input(tape, self.spec.input, x)?;
        let mut h = self.stem.forward(tape, store, x)?;
        let mut features = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.forward(tape, store, h)?;
            features.push(h);
        }
        let logits = self.head.forward(tape, store, h)?;
        Ok(TeacherForward { features, logits })
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self.blocks.iter().map(|b| b.spec.param_count()).sum::<usize>()
            + self.head.param_count()
    }
}

/// Attach points for `n` laddered branches: branch `i` attaches after
/// teacher block `i`.
pub fn partition_teacher(teacher: &TeacherNet, n: usize) -> Result<Vec<usize>> {
    let cuts = teacher.cut_points();
    if n > cuts.len() {
        return Err(Error::TooManyBranches {
            requested: n,
            blocks: teacher.blocks.len(),
        });
    }
    Ok(cuts[..n].to_vec())
}

/// Standalone student: stem, one operation per layer, head.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentNet {
    pub input: InputShape,
    pub stem: Projection,
    pub layers: Vec<CandidateOp>,
    pub head: Head,
}

impl StudentNet {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let x = shape_input(tape, self.input, x)?;
        let mut h = self.stem.forward(tape, store, x)?;
        for op in &self.layers {
            h = op.forward(tape, store, h)?;
        }
        self.head.forward(tape, store, h)
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self.layers.iter().map(|l| l.spec.param_count()).sum::<usize>()
            + self.head.param_count()
    }
}

/// Closed-form parameter count of a student with the given layer specs.
pub fn student_param_count(input: InputShape, feature_dim: usize, classes: usize, layers: &[BlockSpec]) -> usize {
    let stem = match input {
        InputShape::Vector { dim } => dim * feature_dim + feature_dim,
        InputShape::Image { channels, .. } => feature_dim * channels * CONV_KERNEL * CONV_KERNEL + feature_dim,
    };
    stem + layers.iter().map(BlockSpec::param_count).sum::<usize>() + feature_dim * classes + classes
}

/// Anything that maps input rows to class logits.
pub trait Classifier {
    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var>;
    fn classes(&self) -> usize;
}

/// A network structure together with the parameter storage it reads.
#[derive(Clone, Debug)]
pub struct Model<N> {
    pub net: N,
    pub params: ParamStore,
}

impl Classifier for Model<TeacherNet> {
    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.net.forward_features(tape, &self.params, x)?.logits)
    }
    fn classes(&self) -> usize {
        self.net.spec.classes
    }
}

impl Classifier for Model<StudentNet> {
    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.net.forward(tape, &self.params, x)
    }
    fn classes(&self) -> usize {
        self.net.head.linear.out_dim
    }
}

impl Model<TeacherNet> {
    pub fn new_teacher<R: Rng + ?Sized>(spec: &TeacherSpec, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = TeacherNet::build(spec, rng, &mut params)?;
        Ok(Self { net, params })
    }
}

/// Logits for a batch of input rows, outside any training tape.
pub fn predict<C: Classifier + ?Sized>(model: &C, inputs: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.input(inputs.clone());
    let z = model.logits(&mut tape, x)?;
    Ok(tape.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(blocks: usize) -> TeacherSpec {
        TeacherSpec {
            input: InputShape::Vector { dim: 2 },
            classes: 3,
            width: 8,
            hidden: 16,
            block_depth: 2,
            blocks,
        }
    }

    #[test]
    fn partition_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Model::new_teacher(&spec(4), &mut rng).unwrap();
        assert_eq!(partition_teacher(&t.net, 3).unwrap(), vec![1, 2, 3]);
        assert_eq!(partition_teacher(&t.net, 0).unwrap(), Vec::<usize>::new());
        let t2 = Model::new_teacher(&spec(2), &mut rng).unwrap();
        assert_eq!(
            partition_teacher(&t2.net, 3).unwrap_err(),
            Error::TooManyBranches { requested: 3, blocks: 2 }
        );
    }

    #[test]
    fn teacher_forward_shapes_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Model::new_teacher(&spec(3), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[5, 2], 0.3));
        let out = t.net.forward_features(&mut tape, &t.params, x).unwrap();
        assert_eq!(out.features.len(), 3);
        assert_eq!(tape.value(out.logits).shape(), &[5, 3]);
        assert_eq!(t.params.numel(), t.net.param_count());
        assert!(t.params.iter().all(|p| p.name.starts_with("teacher.")));
    }

    #[test]
    fn image_teacher_runs() {
        let spec = TeacherSpec {
            input: InputShape::Image { channels: 1, height: 4, width: 4 },
            classes: 2,
            width: 3,
            hidden: 4,
            block_depth: 1,
            blocks: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Model::new_teacher(&spec, &mut rng).unwrap();
        let z = predict(&t, &Tensor::full(&[2, 16], 0.5)).unwrap();
        assert_eq!(z.shape(), &[2, 2]);
        assert_eq!(t.params.numel(), t.net.param_count());
    }
}
