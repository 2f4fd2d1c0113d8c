//! Weight-sharing supernet with path binarization.
//!
//! Every layer holds `k` candidate operations whose parameters live in one
//! shared store, keyed by `(layer, candidate)`. A [`SupernetLayer`] pairs
//! those candidates with its own gate logits `φ`; each iteration exactly one
//! candidate is drawn from `softmax(φ)` and only that candidate is evaluated,
//! so the tape never holds more than one sub-network.
//!
//! The gate logits are trained with a score-function estimator: for a
//! sampled path with loss `L`,
//!
//! ```text
//! φ ← φ − η · (L − b) · (onehot(j_act) − softmax(φ))
//! ```
//!
//! where `b` is an exponential moving average of past losses.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{
    build_block, shape_input, student_param_count, BlockKind, BlockSpec, CandidateOp, Head, InputShape, Model,
    Projection, StudentNet,
};

/// Decay of the moving-average baseline used by [`StudentBranch::update_phi`].
pub const BASELINE_DECAY: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetSpec {
    pub input: InputShape,
    pub classes: usize,
    /// Feature width shared by every supernet layer.
    pub feature_dim: usize,
    /// Candidate operations per layer.
    pub layers: Vec<Vec<BlockSpec>>,
}

/// One chosen candidate index per layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArchitectureSample(pub Vec<usize>);

impl ArchitectureSample {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl SupernetSpec {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.iter().any(Vec::is_empty) {
            return Err(Error::Config("supernet needs at least one candidate in every layer".into()));
        }
        if self.classes < 2 || self.feature_dim == 0 {
            return Err(Error::Config("supernet needs >= 2 classes and a positive feature_dim".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (j, c) in layer.iter().enumerate() {
                c.validate()?;
                if c.in_dim != self.feature_dim || c.out_dim != self.feature_dim {
                    return Err(Error::InvalidBlock(format!(
                        "layer {l} candidate {j}: dims {}->{} differ from feature_dim {}",
                        c.in_dim, c.out_dim, self.feature_dim
                    )));
                }
                if c.is_parametric() && c.kind != self.input.block_kind() {
                    return Err(Error::InvalidBlock(format!(
                        "layer {l} candidate {j}: {:?} does not fit {:?} inputs",
                        c.kind, self.input
                    )));
                }
            }
        }
        Ok(())
    }

    /// The first `layers` layers.
    pub fn truncated(&self, layers: usize) -> Result<Self> {
        if layers == 0 || layers > self.depth() {
            return Err(Error::InvalidBudget {
                budget: layers,
                depth: self.depth(),
            });
        }
        Ok(Self {
            layers: self.layers[..layers].to_vec(),
            ..self.clone()
        })
    }

    pub fn check_sample(&self, sample: &ArchitectureSample) -> Result<()> {
        if sample.len() > self.depth() {
            return Err(Error::Config(format!(
                "architecture has {} layers, supernet only {}",
                sample.len(),
                self.depth()
            )));
        }
        for (layer, (&index, choices)) in sample.0.iter().zip(&self.layers).enumerate() {
            if index >= choices.len() {
                return Err(Error::InvalidArchitecture {
                    layer,
                    index,
                    choices: choices.len(),
                });
            }
        }
        Ok(())
    }

    pub fn sample_specs(&self, sample: &ArchitectureSample) -> Result<Vec<BlockSpec>> {
        self.check_sample(sample)?;
        Ok(sample
            .0
            .iter()
            .zip(&self.layers)
            .map(|(&j, layer)| layer[j].clone())
            .collect())
    }

    /// Closed-form parameter count of the standalone student for `sample`.
    pub fn student_param_count(&self, sample: &ArchitectureSample) -> Result<usize> {
        let specs = self.sample_specs(sample)?;
        Ok(student_param_count(self.input, self.feature_dim, self.classes, &specs))
    }

    /// A one-candidate-per-layer spec holding exactly `sample`'s blocks.
    pub fn fixed(&self, sample: &ArchitectureSample) -> Result<Self> {
        let specs = self.sample_specs(sample)?;
        Ok(Self {
            layers: specs.into_iter().map(|s| vec![s]).collect(),
            ..self.clone()
        })
    }
}

/// Shared candidate storage plus a stem and head for standalone use.
#[derive(Clone, Debug)]
pub struct Supernet {
    pub spec: SupernetSpec,
    pub candidates: Vec<Vec<CandidateOp>>,
    pub stem: Projection,
    pub head: Head,
    pub params: ParamStore,
}

impl Supernet {
    pub fn build<R: Rng + ?Sized>(spec: &SupernetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut candidates = Vec::with_capacity(spec.depth());
        for (l, layer) in spec.layers.iter().enumerate() {
            let mut ops = Vec::with_capacity(layer.len());
            for (j, c) in layer.iter().enumerate() {
                ops.push(build_block(c, rng, &mut params, &format!("supernet.l{l}.c{j}"), (l, j))?);
            }
            candidates.push(ops);
        }
        let stem = Projection::stem(rng, &mut params, "supernet.stem", spec.input, spec.feature_dim);
        let head = Head::build(
            rng,
            &mut params,
            "supernet.head",
            spec.input.is_image(),
            spec.feature_dim,
            spec.classes,
        );
        Ok(Self {
            spec: spec.clone(),
            candidates,
            stem,
            head,
            params,
        })
    }

    /// Fresh gate state over supernet layers `range`.
    pub fn layers(&self, range: std::ops::Range<usize>) -> Vec<SupernetLayer> {
        range
            .map(|l| SupernetLayer::new(l, self.candidates[l].clone()))
            .collect()
    }

    /// A student whose operations alias this supernet's parameters; run it
    /// against [`Supernet::params`].
    pub fn view(&self, sample: &ArchitectureSample) -> Result<StudentNet> {
        self.spec.check_sample(sample)?;
        Ok(StudentNet {
            input: self.spec.input,
            stem: self.stem.clone(),
            layers: sample
                .0
                .iter()
                .enumerate()
                .map(|(l, &j)| self.candidates[l][j].clone())
                .collect(),
            head: self.head.clone(),
        })
    }
}

/// A standalone student with the sampled architecture and newly
/// initialised parameters.
pub fn derive_student<R: Rng + ?Sized>(
    spec: &SupernetSpec,
    sample: &ArchitectureSample,
    rng: &mut R,
) -> Result<Model<StudentNet>> {
    let specs = spec.sample_specs(sample)?;
    let mut params = ParamStore::new();
    let stem = Projection::stem(rng, &mut params, "student.stem", spec.input, spec.feature_dim);
    let layers = specs
        .iter()
        .enumerate()
        .map(|(l, s)| build_block(s, rng, &mut params, &format!("student.layer{l}"), (l, sample.0[l])))
        .collect::<Result<Vec<_>>>()?;
    let head = Head::build(
        rng,
        &mut params,
        "student.head",
        spec.input.is_image(),
        spec.feature_dim,
        spec.classes,
    );
    Ok(Model {
        net: StudentNet {
            input: spec.input,
            stem,
            layers,
            head,
        },
        params,
    })
}

/// Candidates of one supernet layer with one branch's gate logits and
/// gate state.
#[derive(Clone, Debug)]
pub struct SupernetLayer {
    pub layer: usize,
    pub candidates: Vec<CandidateOp>,
    pub phi: Tensor<f64>,
    gates: Option<Vec<u8>>,
    active: Option<usize>,
    sampled_at: Option<u64>,
}

fn softmax(phi: &[f64]) -> Vec<f64> {
    let m = phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = phi.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl SupernetLayer {
    pub fn new(layer: usize, candidates: Vec<CandidateOp>) -> Self {
        let k = candidates.len();
        Self {
            layer,
            candidates,
            phi: Tensor::zeros(&[k]),
            gates: None,
            active: None,
            sampled_at: None,
        }
    }

    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    /// `p_φ = softmax(φ)`.
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(self.phi.data())
    }

    pub fn gates(&self) -> Option<&[u8]> {
        self.gates.as_deref()
    }

    pub fn active(&self) -> Option<usize> {
        self.active
    }

    /// Draws `j_act ~ p_φ` and sets the one-hot gates for `iteration`.
    pub fn sample_gates<R: Rng + ?Sized>(&mut self, rng: &mut R, iteration: u64) -> usize {
        let j = if self.k() == 1 {
            0
        } else {
            let p = self.probabilities();
            match WeightedIndex::new(&p) {
                Ok(dist) => dist.sample(rng),
                // Only reachable if φ holds non-finite values.
                Err(_) => 0,
            }
        };
        self.set_active(j, iteration);
        j
    }

    /// Sets the gates to a fixed candidate.
    pub fn set_active(&mut self, j: usize, iteration: u64) {
        assert!(j < self.k(), "candidate {j} out of range");
        let mut g = vec![0u8; self.k()];
        g[j] = 1;
        self.gates = Some(g);
        self.active = Some(j);
        self.sampled_at = Some(iteration);
    }

    fn active_op(&self) -> Result<&CandidateOp> {
        self.active
            .map(|j| &self.candidates[j])
            .ok_or(Error::GatesUnset(self.layer))
    }

    /// `Σ_j g_j f_j(x)` with one-hot `g`: only the active candidate is
    /// evaluated or recorded.
    pub fn mixed_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.active_op()?.forward(tape, store, x)
    }
}

/// Branch grafted onto a teacher cut point (or, for search, onto the raw
/// input through the supernet stem).
#[derive(Clone, Debug)]
pub struct StudentBranch {
    /// Teacher block after which the branch attaches; 0 for standalone use.
    pub attach: usize,
    pub adapter: Option<Projection>,
    pub layers: Vec<SupernetLayer>,
    pub head: Head,
    baseline: Option<f64>,
}

impl StudentBranch {
    pub fn new(attach: usize, adapter: Option<Projection>, layers: Vec<SupernetLayer>, head: Head) -> Self {
        Self {
            attach,
            adapter,
            layers,
            head,
            baseline: None,
        }
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    /// Resamples every layer's gates.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R, iteration: u64) -> ArchitectureSample {
        ArchitectureSample(self.layers.iter_mut().map(|l| l.sample_gates(rng, iteration)).collect())
    }

    /// Current active index per layer, if every layer's gates are set.
    pub fn architecture(&self) -> Option<ArchitectureSample> {
        self.layers
            .iter()
            .map(|l| l.active())
            .collect::<Option<Vec<_>>>()
            .map(ArchitectureSample)
    }

    /// Composition of the active operations over `features`, then the head.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        let mut h = match &self.adapter {
            Some(a) => a.forward(tape, store, features)?,
            None => features,
        };
        for layer in &self.layers {
            h = layer.mixed_forward(tape, store, h)?;
        }
        self.head.forward(tape, store, h)
    }

    /// Parameters a forward pass may touch under the current gates.
    pub fn active_param_ids(&self) -> Result<Vec<ParamId>> {
        let mut ids = Vec::new();
        if let Some(Projection::Dense(l)) = &self.adapter {
            ids.extend([l.weight, l.bias]);
        }
        if let Some(Projection::Conv(c)) = &self.adapter {
            ids.extend([c.weight, c.bias]);
        }
        for layer in &self.layers {
            ids.extend(layer.active_op()?.params.iter().copied());
        }
        ids.extend([self.head.linear.weight, self.head.linear.bias]);
        Ok(ids)
    }

    /// One score-function step on every layer's `φ` using the loss of the
    /// path sampled at `iteration`. Only `φ` and the baseline change.
    pub fn update_phi(&mut self, loss: f64, step: f64, iteration: u64) -> Result<()> {
        for l in &self.layers {
            if l.sampled_at != Some(iteration) || l.active.is_none() {
                return Err(Error::StaleGates {
                    layer: l.layer,
                    sampled: l.sampled_at,
                    iteration,
                });
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("update_phi"));
        }
        let baseline = self.baseline.unwrap_or(loss);
        let advantage = loss - baseline;
        if advantage != 0.0 {
            for l in &mut self.layers {
                let p = l.probabilities();
                let j = l.active.expect("checked above");
                for (c, (phi, pc)) in l.phi.data_mut().iter_mut().zip(&p).enumerate() {
                    let score = if c == j { 1.0 } else { 0.0 } - pc;
                    *phi -= step * advantage * score;
                }
            }
        }
        self.baseline = Some(BASELINE_DECAY * baseline + (1.0 - BASELINE_DECAY) * loss);
        Ok(())
    }

    /// True when the branch's layers are all zero operations.
    pub fn is_all_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.active().map(|j| l.candidates[j].spec.kind == BlockKind::Zero).unwrap_or(false))
    }
}

/// Runs a standalone supernet path: stem, gated layers, head.
pub(crate) fn standalone_forward(
    supernet: &Supernet,
    branch: &StudentBranch,
    tape: &mut Tape,
    x: Var,
) -> Result<Var> {
    let x = shape_input(tape, supernet.spec.input, x)?;
    branch.forward(tape, &supernet.params, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> SupernetSpec {
        SupernetSpec {
            input: InputShape::Vector { dim: 3 },
            classes: 2,
            feature_dim: 4,
            layers: vec![
                vec![BlockSpec::dense(8, 2, 4), BlockSpec::dense(4, 1, 4), BlockSpec::identity(4)],
                vec![BlockSpec::zero(4, 4), BlockSpec::dense(16, 2, 4), BlockSpec::identity(4)],
            ],
        }
    }

    #[test]
    fn single_candidate_always_zero() {
        let net = Supernet::build(&spec().fixed(&ArchitectureSample(vec![1, 2])).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut layer = net.layers(0..1).remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for it in 0..20 {
            assert_eq!(layer.sample_gates(&mut rng, it), 0);
            assert_eq!(layer.gates().unwrap(), &[1]);
        }
    }

    #[test]
    fn gates_unset_is_an_error() {
        let net = Supernet::build(&spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let layer = net.layers(0..1).remove(0);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 4]));
        assert_eq!(
            layer.mixed_forward(&mut tape, &net.params, x).unwrap_err(),
            Error::GatesUnset(0)
        );
    }

    #[test]
    fn stale_gates_rejected() {
        let net = Supernet::build(&spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let head = net.head.clone();
        let mut branch = StudentBranch::new(0, None, net.layers(0..2), head);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        branch.sample(&mut rng, 4);
        assert!(matches!(branch.update_phi(1.0, 0.1, 5), Err(Error::StaleGates { .. })));
        branch.update_phi(1.0, 0.1, 4).unwrap();
    }

    #[test]
    fn invalid_sample_index() {
        let s = spec();
        assert_eq!(
            s.check_sample(&ArchitectureSample(vec![0, 3])).unwrap_err(),
            Error::InvalidArchitecture { layer: 1, index: 3, choices: 3 }
        );
        let net = Supernet::build(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(net.view(&ArchitectureSample(vec![5])).is_err());
    }

    #[test]
    fn fresh_student_is_seed_deterministic() {
        let s = spec();
        let sample = ArchitectureSample(vec![0, 1]);
        let a = derive_student(&s, &sample, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = derive_student(&s, &sample, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_eq!(a.params.numel(), s.student_param_count(&sample).unwrap());
    }

    #[test]
    fn spec_validation() {
        let mut s = spec();
        s.layers[0].push(BlockSpec::dense(8, 2, 5));
        assert!(s.validate().is_err());
        let mut s = spec();
        s.layers[1].push(BlockSpec::conv(8, 2, 4));
        assert!(s.validate().is_err());
        assert!(spec().truncated(3).is_err());
        assert_eq!(spec().truncated(1).unwrap().depth(), 1);
    }
}
