//! Reference backbone: pooled sequence -> shared tanh layer -> diagnosis,
//! reconstruction and examination heads.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureSequence, NUM_CATEGORIES, NUM_EXAM_HEADS};
use crate::error::BackboneError;

use super::loss::{HeadBalance, LossMix};

const CHECKPOINT_FORMAT: &str = "dxloop-backbone";
const CHECKPOINT_VERSION: u32 = 1;

/// Pooled input: one slot of width `W` per category holding the mean of that
/// category's blocks over all visits (zeros when never measured), then the
/// current-visit presence flags and the history length mapped to
/// `h / (1 + h)`. Every entry lies in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PooledInput(pub Vec<f64>);

impl PooledInput {
    pub fn dim_for(width: usize) -> usize {
        NUM_CATEGORIES * width + NUM_CATEGORIES + 1
    }

    /// Block width encoded by a pooled input of length `dim`.
    pub fn width_of(dim: usize) -> Option<usize> {
        let blocks = dim.checked_sub(NUM_CATEGORIES + 1)?;
        (blocks > 0 && blocks % NUM_CATEGORIES == 0).then_some(blocks / NUM_CATEGORIES)
    }

    pub fn from_sequence(seq: &FeatureSequence<'_>) -> Result<Self, BackboneError> {
        let width = seq
            .block_width()
            .ok_or_else(|| BackboneError::Shape("empty feature sequence".into()))?;
        let mut out = vec![0.0; Self::dim_for(width)];
        let mut counts = [0usize; NUM_CATEGORIES];
        for item in seq.items() {
            if item.block.len() != width {
                return Err(BackboneError::Shape(format!(
                    "{} block has width {}, expected {width}",
                    item.category,
                    item.block.len()
                )));
            }
            let slot = item.category.index() * width;
            for (o, v) in out[slot..slot + width].iter_mut().zip(item.block) {
                *o += v;
            }
            counts[item.category.index()] += 1;
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 1 {
                out[c * width..(c + 1) * width].iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        let flags = NUM_CATEGORIES * width;
        for c in seq.current_mask().iter() {
            out[flags + c.index()] = 1.0;
        }
        let h = seq.history_visits() as f64;
        out[flags + NUM_CATEGORIES] = h / (1.0 + h);
        Ok(PooledInput(out))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Dense layer with row-major `out x inp` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Linear {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs);
        let rows = self.weight.chunks_exact(self.inputs).zip(&self.bias);
        match sparse_support(x) {
            Some(nz) => {
                for (o, (row, b)) in out.iter_mut().zip(rows) {
                    *o = b + nz.iter().map(|&i| row[i] * x[i]).sum::<f64>();
                }
            }
            None => {
                for (o, (row, b)) in out.iter_mut().zip(rows) {
                    *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                }
            }
        }
    }

    /// Accumulates parameter gradients for upstream gradient `dy` at input
    /// `x`, and optionally writes the input gradient into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear, dx: Option<&mut [f64]>) {
        let nz = sparse_support(x);
        for (o, g) in dy.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            match &nz {
                Some(nz) => nz.iter().for_each(|&i| row[i] += g * x[i]),
                None => {
                    for (r, v) in row.iter_mut().zip(x) {
                        *r += g * v;
                    }
                }
            }
        }
        if let Some(dx) = dx {
            dx.iter_mut().for_each(|v| *v = 0.0);
            for (o, g) in dy.iter().enumerate() {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                for (d, w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Indices of the non-zero entries when fewer than half are non-zero.
fn sparse_support(x: &[f64]) -> Option<Vec<usize>> {
    if x.len() < 64 {
        return None;
    }
    let nz: Vec<usize> = (0..x.len()).filter(|&i| x[i] != 0.0).collect();
    (nz.len() * 2 < x.len()).then_some(nz)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn softmax2(a: &[f64; 2]) -> [f64; 2] {
    let m = a[0].max(a[1]);
    let e0 = (a[0] - m).exp();
    let e1 = (a[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Everything the backbone emits for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    pub activations: [f64; 2],
    pub class_probs: [f64; 2],
    pub exam_scores: [f64; NUM_EXAM_HEADS],
    pub reconstruction: Vec<f64>,
}

/// Intermediate values kept for back-propagation.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub hidden: Vec<f64>,
    pub exam_input: Vec<f64>,
    pub exam_logits: [f64; NUM_EXAM_HEADS],
    pub output: BackboneOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneModel {
    pub width: usize,
    pub hidden: usize,
    pub encoder: Linear,
    pub diagnosis: Linear,
    pub decoder: Linear,
    /// Input is the hidden layer followed by the two class probabilities.
    pub exam: Linear,
    pub log_sigmas: [f64; NUM_EXAM_HEADS],
}

/// Gradient buffers with the same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Linear,
    pub diagnosis: Linear,
    pub decoder: Linear,
    pub exam: Linear,
    pub log_sigmas: [f64; NUM_EXAM_HEADS],
}

impl Gradients {
    pub fn zeros_like(model: &BackboneModel) -> Self {
        Gradients {
            encoder: Linear::zeros(model.encoder.inputs, model.encoder.outputs),
            diagnosis: Linear::zeros(model.diagnosis.inputs, model.diagnosis.outputs),
            decoder: Linear::zeros(model.decoder.inputs, model.decoder.outputs),
            exam: Linear::zeros(model.exam.inputs, model.exam.outputs),
            log_sigmas: [0.0; NUM_EXAM_HEADS],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.params_mut().for_each(|g| *g *= factor);
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.encoder
            .params()
            .chain(self.diagnosis.params())
            .chain(self.decoder.params())
            .chain(self.exam.params())
            .chain(self.log_sigmas.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.encoder
            .params_mut()
            .chain(self.diagnosis.params_mut())
            .chain(self.decoder.params_mut())
            .chain(self.exam.params_mut())
            .chain(self.log_sigmas.iter_mut())
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: BackboneModel,
}

impl BackboneModel {
    /// All parameters zero (log sigma = 0, i.e. sigma = 1).
    pub fn zeros(width: usize, hidden: usize) -> Self {
        let dim = PooledInput::dim_for(width);
        BackboneModel {
            width,
            hidden,
            encoder: Linear::zeros(dim, hidden),
            diagnosis: Linear::zeros(hidden, 2),
            decoder: Linear::zeros(hidden, dim),
            exam: Linear::zeros(hidden + 2, NUM_EXAM_HEADS),
            log_sigmas: [0.0; NUM_EXAM_HEADS],
        }
    }

    /// Training initialization: Glorot encoder and decoder, zero heads. The
    /// zero diagnosis head keeps the two activations antisymmetric under
    /// training.
    pub fn initialize<R: Rng>(width: usize, hidden: usize, rng: &mut R) -> Self {
        let dim = PooledInput::dim_for(width);
        let mut model = Self::zeros(width, hidden);
        model.encoder = Linear::glorot(dim, hidden, rng);
        model.decoder = Linear::glorot(hidden, dim, rng);
        model
    }

    pub fn input_dim(&self) -> usize {
        PooledInput::dim_for(self.width)
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.encoder
            .params()
            .chain(self.diagnosis.params())
            .chain(self.decoder.params())
            .chain(self.exam.params())
            .chain(self.log_sigmas.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.encoder
            .params_mut()
            .chain(self.diagnosis.params_mut())
            .chain(self.decoder.params_mut())
            .chain(self.exam.params_mut())
            .chain(self.log_sigmas.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    pub fn forward(&self, seq: &FeatureSequence<'_>) -> Result<BackboneOutput, BackboneError> {
        if seq.is_empty() {
            return Err(BackboneError::Shape("empty feature sequence".into()));
        }
        if let Some(w) = seq.block_width() {
            if w != self.width {
                return Err(BackboneError::Shape(format!(
                    "block width {w}, model expects {}",
                    self.width
                )));
            }
        }
        let pooled = PooledInput::from_sequence(seq)?;
        self.forward_pooled(&pooled)
    }

    pub fn forward_pooled(&self, pooled: &PooledInput) -> Result<BackboneOutput, BackboneError> {
        if pooled.0.len() != self.input_dim() {
            return Err(BackboneError::Shape(format!(
                "pooled input has {} values, model expects {}",
                pooled.0.len(),
                self.input_dim()
            )));
        }
        Ok(self.trace(&pooled.0, true).output)
    }

    /// Full forward pass; the reconstruction is left empty unless asked for.
    pub(crate) fn trace(&self, x: &[f64], reconstruct: bool) -> Trace {
        let mut hidden = vec![0.0; self.hidden];
        self.encoder.forward(x, &mut hidden);
        hidden.iter_mut().for_each(|h| *h = h.tanh());

        let mut activations = [0.0; 2];
        self.diagnosis.forward(&hidden, &mut activations);
        let class_probs = softmax2(&activations);

        let mut reconstruction = Vec::new();
        if reconstruct {
            reconstruction = vec![0.0; self.input_dim()];
            self.decoder.forward(&hidden, &mut reconstruction);
            reconstruction.iter_mut().for_each(|r| *r = sigmoid(*r));
        }

        let mut exam_input = hidden.clone();
        exam_input.extend_from_slice(&class_probs);
        let mut exam_logits = [0.0; NUM_EXAM_HEADS];
        self.exam.forward(&exam_input, &mut exam_logits);
        let exam_scores = exam_logits.map(sigmoid);

        Trace {
            hidden,
            exam_input,
            exam_logits,
            output: BackboneOutput {
                activations,
                class_probs,
                exam_scores,
                reconstruction,
            },
        }
    }

    /// Stage-one loss of one sample; gradients of encoder, diagnosis and
    /// decoder are accumulated into `grad`.
    pub fn diagnosis_step(
        &self,
        x: &[f64],
        class_target: &[f64; 2],
        mix: LossMix,
        grad: &mut Gradients,
    ) -> f64 {
        let t = self.trace(x, true);
        let out = &t.output;
        let a = out.activations;
        let m = a[0].max(a[1]);
        let lse = m + ((a[0] - m).exp() + (a[1] - m).exp()).ln();
        let ce: f64 = class_target.iter().zip(&a).map(|(y, v)| y * (lse - v)).sum();
        let y_sum: f64 = class_target.iter().sum();
        let d_act: [f64; 2] =
            std::array::from_fn(|k| mix.diagnosis * (y_sum * out.class_probs[k] - class_target[k]));

        let dim = x.len() as f64;
        let mut msle = 0.0;
        let mut d_dec = vec![0.0; x.len()];
        for (j, (xv, r)) in x.iter().zip(&out.reconstruction).enumerate() {
            let lx = if *xv == 0.0 { 0.0 } else { xv.ln_1p() };
            let diff = r.ln_1p() - lx;
            msle += diff * diff;
            let d_r = mix.reconstruction * 2.0 * diff / ((1.0 + r) * dim);
            d_dec[j] = d_r * r * (1.0 - r);
        }
        msle /= dim;

        let mut dh = vec![0.0; self.hidden];
        let mut dh_dec = vec![0.0; self.hidden];
        self.diagnosis
            .backward(&t.hidden, &d_act, &mut grad.diagnosis, Some(&mut dh));
        self.decoder
            .backward(&t.hidden, &d_dec, &mut grad.decoder, Some(&mut dh_dec));
        let d_pre: Vec<f64> = dh
            .iter()
            .zip(&dh_dec)
            .zip(&t.hidden)
            .map(|((a, b), h)| (a + b) * (1.0 - h * h))
            .collect();
        self.encoder.backward(x, &d_pre, &mut grad.encoder, None);

        mix.diagnosis * ce + mix.reconstruction * msle
    }

    /// Data term of the selection loss for one sample,
    /// `sum_i -(1 / (2 sigma_i^2)) * LL_i`, with gradients of the exam head
    /// and the data part of the log-sigma gradient accumulated into `grad`.
    /// The `ln sigma_i` regularizer is added once per batch by the caller.
    pub fn exam_step(
        &self,
        x: &[f64],
        targets: &[bool; NUM_EXAM_HEADS],
        balances: &[Option<HeadBalance>; NUM_EXAM_HEADS],
        grad: &mut Gradients,
    ) -> f64 {
        let t = self.trace(x, false);
        let mut loss = 0.0;
        let mut d_logits = [0.0; NUM_EXAM_HEADS];
        for head in 0..NUM_EXAM_HEADS {
            let Some(b) = &balances[head] else { continue };
            let z = t.exam_logits[head];
            let s = t.output.exam_scores[head];
            let inv_var = (-2.0 * self.log_sigmas[head]).exp();
            // log-likelihood from logits for stability
            let ll = if targets[head] {
                -b.gamma_pos * softplus(-z)
            } else {
                -b.gamma_neg * softplus(z)
            };
            loss += -0.5 * inv_var * ll;
            let d_ll_dz = if targets[head] {
                b.gamma_pos * (1.0 - s)
            } else {
                -b.gamma_neg * s
            };
            d_logits[head] = -0.5 * inv_var * d_ll_dz;
            grad.log_sigmas[head] += inv_var * ll;
        }
        self.exam.backward(&t.exam_input, &d_logits, &mut grad.exam, None);
        loss
    }

    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, BackboneError> {
        serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })
        .map_err(|e| BackboneError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, BackboneError> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| BackboneError::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(BackboneError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let m = ckpt.model;
        let dim = m.input_dim();
        let shapes_ok = m.encoder.inputs == dim
            && m.encoder.outputs == m.hidden
            && m.diagnosis.inputs == m.hidden
            && m.diagnosis.outputs == 2
            && m.decoder.inputs == m.hidden
            && m.decoder.outputs == dim
            && m.exam.inputs == m.hidden + 2
            && m.exam.outputs == NUM_EXAM_HEADS
            && [&m.encoder, &m.diagnosis, &m.decoder, &m.exam]
                .iter()
                .all(|l| l.weight.len() == l.inputs * l.outputs && l.bias.len() == l.outputs);
        if !shapes_ok {
            return Err(BackboneError::Checkpoint("tensor shapes do not match".into()));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
