//! Two-tower encoders mapping pooled video features and text features into
//! one joint space.
//!
//! Each tower is either a single affine map or affine → tanh → affine.
//! Outputs are left unnormalized; cosine similarity handles scale.
//!
//! Flat parameter order, used by the optimizer and checkpoints: video tower
//! then text tower; within a tower, layers in forward order; within a layer,
//! the weight matrix row-major (`in × out`) followed by the bias.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelDims {
    pub video_in: usize,
    pub text_in: usize,
    /// Width of the tanh layer; 0 means a single affine map per tower.
    pub hidden: usize,
    pub joint: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    /// `in × out`, applied as `x · W + b`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(n, n);
        for i in 0..n {
            a.weights.set(i, i, 1.0);
        }
        a
    }

    /// Uniform in `[−a, a]` with `a = sqrt(6 / (fan_in + fan_out))`; zero bias.
    pub fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = glorot_limit(fan_in, fan_out);
        let mut layer = Self::zeros(fan_in, fan_out);
        for w in layer.weights.as_mut_slice() {
            *w = rng.random_range(-a..=a);
        }
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.weights.vec_mul(x);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }

    fn num_params(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tower {
    pub layers: Vec<Affine>,
}

/// Activations kept from a tower's forward pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TowerForward {
    pub inputs: Vec<Vec<f64>>,
    /// Post-tanh activations; empty for single-layer towers.
    pub hidden: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl Tower {
    fn build<R: Rng>(fan_in: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        let layers = if hidden == 0 {
            vec![Affine::glorot(fan_in, out, rng)]
        } else {
            vec![
                Affine::glorot(fan_in, hidden, rng),
                Affine::glorot(hidden, out, rng),
            ]
        };
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Affine::fan_out)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.encode_unchecked(x).1)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn encode_unchecked(&self, x: &[f64]) -> (Option<Vec<f64>>, Vec<f64>) {
        match self.layers.as_slice() {
            [single] => (None, single.apply(x)),
            [first, second] => {
                let mut h = first.apply(x);
                h.iter_mut().for_each(|v| *v = v.tanh());
                let out = second.apply(&h);
                (Some(h), out)
            }
            _ => unreachable!("towers have one or two layers"),
        }
    }

    pub fn forward<R: AsRef<[f64]>>(&self, inputs: &[R]) -> Result<TowerForward> {
        let mut fwd = TowerForward {
            inputs: Vec::with_capacity(inputs.len()),
            hidden: Vec::new(),
            outputs: Vec::with_capacity(inputs.len()),
        };
        for x in inputs {
            let x = x.as_ref();
            self.check_input(x)?;
            let (h, out) = self.encode_unchecked(x);
            fwd.inputs.push(x.to_vec());
            if let Some(h) = h {
                fwd.hidden.push(h);
            }
            fwd.outputs.push(out);
        }
        Ok(fwd)
    }

    /// Accumulates parameter gradients into `grad` (same shape as `self`).
    pub fn backward_into(
        &self,
        fwd: &TowerForward,
        grad_outputs: &[Vec<f64>],
        grad: &mut Tower,
    ) -> Result<()> {
        if grad_outputs.len() != fwd.outputs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} output gradients for {} items",
                grad_outputs.len(),
                fwd.outputs.len()
            )));
        }
        let deep = self.layers.len() == 2;
        if deep && fwd.hidden.len() != fwd.inputs.len() {
            return Err(Error::ShapeMismatch("forward state lacks hidden activations".into()));
        }
        for (n, g) in grad_outputs.iter().enumerate() {
            if g.len() != self.output_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "output gradient of length {} for joint dim {}",
                    g.len(),
                    self.output_dim()
                )));
            }
            let x = &fwd.inputs[n];
            if deep {
                let h = &fwd.hidden[n];
                accumulate_affine(&mut grad.layers[1], h, g);
                let w2 = &self.layers[1].weights;
                let dh: Vec<f64> = (0..w2.rows())
                    .map(|r| {
                        let da = w2.row(r).iter().zip(g).fold(0.0, |acc, (w, gv)| acc + w * gv);
                        da * (1.0 - h[r] * h[r])
                    })
                    .collect();
                accumulate_affine(&mut grad.layers[0], x, &dh);
            } else {
                accumulate_affine(&mut grad.layers[0], x, g);
            }
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Affine::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }
}

fn accumulate_affine(grad: &mut Affine, input: &[f64], g: &[f64]) {
    for (r, &x) in input.iter().enumerate() {
        for (w, gv) in grad.weights.row_mut(r).iter_mut().zip(g) {
            *w += x * gv;
        }
    }
    for (b, gv) in grad.bias.iter_mut().zip(g) {
        *b += gv;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoTowerModel {
    pub video: Tower,
    pub text: Tower,
}

/// Forward activations for one batch through both towers.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardState {
    pub video: TowerForward,
    pub text: TowerForward,
}

impl ForwardState {
    pub fn video_reprs(&self) -> &[Vec<f64>] {
        &self.video.outputs
    }

    pub fn text_reprs(&self) -> &[Vec<f64>] {
        &self.text.outputs
    }
}

impl TwoTowerModel {
    pub fn init_params<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        if dims.video_in == 0 || dims.text_in == 0 || dims.joint == 0 {
            return Err(Error::Config(format!("model dims must be positive: {dims:?}")));
        }
        let video = Tower::build(dims.video_in, dims.hidden, dims.joint, rng);
        let text = Tower::build(dims.text_in, dims.hidden, dims.joint, rng);
        Ok(Self { video, text })
    }

    /// Initializes from the `init` sub-stream of `seed`.
    pub fn init_seeded(dims: ModelDims, seed: u64) -> Result<Self> {
        Self::init_params(dims, &mut crate::rng::substream(seed, "init"))
    }

    pub fn from_towers(video: Tower, text: Tower) -> Result<Self> {
        let m = Self { video, text };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for tower in [&self.video, &self.text] {
            if !(1..=2).contains(&tower.layers.len()) {
                return Err(Error::ShapeMismatch("towers need one or two layers".into()));
            }
            for pair in tower.layers.windows(2) {
                if pair[0].fan_out() != pair[1].fan_in() {
                    return Err(Error::ShapeMismatch("layer widths do not chain".into()));
                }
            }
            for l in &tower.layers {
                if l.bias.len() != l.fan_out() {
                    return Err(Error::ShapeMismatch("bias length".into()));
                }
            }
        }
        if self.video.output_dim() != self.text.output_dim() {
            return Err(Error::DimMismatch {
                expected: self.video.output_dim(),
                got: self.text.output_dim(),
            });
        }
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            video_in: self.video.input_dim(),
            text_in: self.text.input_dim(),
            hidden: if self.video.layers.len() == 2 {
                self.video.layers[0].fan_out()
            } else {
                0
            },
            joint: self.video.output_dim(),
        }
    }

    pub fn encode_video(&self, pooled_features: &[f64]) -> Result<Vec<f64>> {
        self.video.encode(pooled_features)
    }

    pub fn encode_text(&self, text_features: &[f64]) -> Result<Vec<f64>> {
        self.text.encode(text_features)
    }

    pub fn forward<V: AsRef<[f64]>, T: AsRef<[f64]>>(
        &self,
        pooled_video: &[V],
        text: &[T],
    ) -> Result<ForwardState> {
        if pooled_video.len() != text.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} videos and {} texts in batch",
                pooled_video.len(),
                text.len()
            )));
        }
        Ok(ForwardState {
            video: self.video.forward(pooled_video)?,
            text: self.text.forward(text)?,
        })
    }

    /// Parameter gradients given gradients w.r.t. every output representation.
    pub fn backward(
        &self,
        fwd: &ForwardState,
        grad_video: &[Vec<f64>],
        grad_text: &[Vec<f64>],
    ) -> Result<TwoTowerModel> {
        let mut grad = self.zeros_like();
        self.video.backward_into(&fwd.video, grad_video, &mut grad.video)?;
        self.text.backward_into(&fwd.text, grad_text, &mut grad.text)?;
        Ok(grad)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            video: self.video.zeros_like(),
            text: self.text.zeros_like(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Affine> {
        self.video.layers.iter().chain(&self.text.layers)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Affine> {
        self.video.layers.iter_mut().chain(&mut self.text.layers)
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(Affine::num_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a model with {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut rest = flat;
        for l in self.layers_mut() {
            let (w, tail) = rest.split_at(l.weights.as_slice().len());
            l.weights.as_mut_slice().copy_from_slice(w);
            let (b, tail) = tail.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }
}
