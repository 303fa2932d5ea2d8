use rand::Rng;

use super::{ModelError, ToyArchitecture, ARCH_METADATA_KEY};
use crate::checkpoint::{Checkpoint, Tensor};
use crate::exec::Exec;
use crate::matrix::Matrix;
use crate::toy::LabeledDataset;

/// Rows per gradient chunk. Chunks are summed in index order, so the
/// gradient is identical whether chunks run sequentially or in parallel.
const GRAD_CHUNK_ROWS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    /// Row-major `[fan_out, fan_in]`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.fan_out)
            .map(|o| {
                let w = &self.weight[o * self.fan_in..(o + 1) * self.fan_in];
                self.bias[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    fn add_assign(&mut self, other: &Layer) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.weight
            .iter_mut()
            .chain(self.bias.iter_mut())
            .for_each(|v| *v *= s);
    }
}

/// Tanh MLP with `f64` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: ToyArchitecture,
    layers: Vec<Layer>,
}

/// Loss gradient with the same layout as [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Layer>,
}

impl Gradients {
    /// Flattened in [`Mlp::flat_params`] order.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }
}

fn log_softmax_loss(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[label];
    let probs = exps.into_iter().map(|e| e / total).collect();
    (loss, probs)
}

impl Mlp {
    pub fn zeros(arch: &ToyArchitecture) -> Self {
        Self {
            arch: arch.clone(),
            layers: arch
                .layer_dims()
                .into_iter()
                .map(|(i, o)| Layer::zeros(i, o))
                .collect(),
        }
    }

    /// Every parameter uniform in `[-scale, scale]`, drawn layer by layer
    /// (weights, then bias).
    pub fn init_uniform(arch: &ToyArchitecture, rng: &mut impl Rng, scale: f64) -> Self {
        let mut mlp = Self::zeros(arch);
        for layer in &mut mlp.layers {
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *v = rng.random_range(-scale..=scale);
            }
        }
        mlp
    }

    pub fn from_checkpoint(model: &Checkpoint, arch: &ToyArchitecture) -> Result<Self, ModelError> {
        arch.check(model)?;
        let mut mlp = Self::zeros(arch);
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            let w = model.get(&format!("layer{i}.weight")).expect("checked");
            let b = model.get(&format!("layer{i}.bias")).expect("checked");
            layer.weight = w.data().iter().map(|v| f64::from(*v)).collect();
            layer.bias = b.data().iter().map(|v| f64::from(*v)).collect();
        }
        Ok(mlp)
    }

    /// Rounds parameters to `f32`; records the architecture in metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = Tensor::new(
                vec![layer.fan_out, layer.fan_in],
                layer.weight.iter().map(|v| *v as f32).collect(),
            )
            .expect("layer shape");
            let b = Tensor::new(
                vec![layer.fan_out],
                layer.bias.iter().map(|v| *v as f32).collect(),
            )
            .expect("layer shape");
            c.insert(format!("layer{i}.weight"), w)
                .expect("unique layer names");
            c.insert(format!("layer{i}.bias"), b)
                .expect("unique layer names");
        }
        c.metadata
            .insert(ARCH_METADATA_KEY.into(), self.arch.to_json());
        c
    }

    pub fn architecture(&self) -> &ToyArchitecture {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Layer by layer, weights (row-major) then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params(), "parameter count");
        let mut it = params.iter();
        for layer in &mut self.layers {
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
    }

    /// Activations `[input, hidden_1, .., hidden_k]` and the logits for one row.
    fn trace_row(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut acts = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        let (last, hidden) = self.layers.split_last().expect("at least one layer");
        for layer in hidden {
            let h = layer
                .affine(acts.last().expect("non-empty"))
                .into_iter()
                .map(f64::tanh)
                .collect();
            acts.push(h);
        }
        let logits = last.affine(acts.last().expect("non-empty"));
        (acts, logits)
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<(), ModelError> {
        if inputs.rows() > 0 && inputs.cols() != self.arch.input_dim {
            return Err(ModelError::DimensionMismatch(format!(
                "inputs have {} features, architecture expects {}",
                inputs.cols(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// Logits `[n, num_classes]` and last-hidden representation
    /// `[n, representation_dim]` in one pass.
    pub fn forward_trace(&self, inputs: &Matrix) -> Result<(Matrix, Matrix), ModelError> {
        self.check_inputs(inputs)?;
        let mut logits = Matrix::zeros(inputs.rows(), self.arch.num_classes);
        let mut reps = Matrix::zeros(inputs.rows(), self.arch.representation_dim());
        for (i, row) in inputs.iter_rows().enumerate() {
            let (acts, z) = self.trace_row(row);
            logits.row_mut(i).copy_from_slice(&z);
            reps.row_mut(i)
                .copy_from_slice(acts.last().expect("non-empty"));
        }
        Ok((logits, reps))
    }

    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix, ModelError> {
        Ok(self.forward_trace(inputs)?.0)
    }

    pub fn representation(&self, inputs: &Matrix) -> Result<Matrix, ModelError> {
        Ok(self.forward_trace(inputs)?.1)
    }

    /// Applies only the final affine layer to a representation row.
    pub fn head(&self, representation: &[f64]) -> Vec<f64> {
        self.layers
            .last()
            .expect("at least one layer")
            .affine(representation)
    }

    fn check_dataset(&self, data: &LabeledDataset) -> Result<(), ModelError> {
        self.check_inputs(&data.inputs)?;
        if data.num_classes > self.arch.num_classes {
            return Err(ModelError::DimensionMismatch(format!(
                "dataset has {} classes, model outputs {}",
                data.num_classes, self.arch.num_classes
            )));
        }
        Ok(())
    }

    /// Mean softmax cross-entropy over the dataset.
    pub fn loss(&self, data: &LabeledDataset) -> Result<f64, ModelError> {
        self.check_dataset(data)?;
        if data.is_empty() {
            return Ok(0.0);
        }
        let total: f64 = data
            .inputs
            .iter_rows()
            .zip(&data.labels)
            .map(|(x, &y)| log_softmax_loss(&self.trace_row(x).1, y).0)
            .sum();
        Ok(total / data.len() as f64)
    }

    fn chunk_loss_grad(
        &self,
        data: &LabeledDataset,
        rows: std::ops::Range<usize>,
    ) -> (f64, Vec<Layer>) {
        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer::zeros(l.fan_in, l.fan_out))
            .collect();
        let mut loss = 0.0;
        for i in rows {
            let (acts, logits) = self.trace_row(data.inputs.row(i));
            let (l, probs) = log_softmax_loss(&logits, data.labels[i]);
            loss += l;
            let mut delta = probs;
            delta[data.labels[i]] -= 1.0;
            for k in (0..self.layers.len()).rev() {
                let layer = &self.layers[k];
                let input = &acts[k];
                let g = &mut grads[k];
                let rows = g.bias.iter_mut().zip(g.weight.chunks_mut(layer.fan_in));
                for ((gb, row), d) in rows.zip(&delta) {
                    *gb += d;
                    for (gw, a) in row.iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
                if k > 0 {
                    delta = (0..layer.fan_in)
                        .map(|j| {
                            let back: f64 = (0..layer.fan_out)
                                .map(|o| layer.weight[o * layer.fan_in + j] * delta[o])
                                .sum();
                            back * (1.0 - input[j] * input[j])
                        })
                        .collect();
                }
            }
        }
        (loss, grads)
    }

    /// Mean loss and its gradient by backpropagation.
    pub fn loss_and_grad(
        &self,
        data: &LabeledDataset,
        exec: Exec,
    ) -> Result<(f64, Gradients), ModelError> {
        self.check_dataset(data)?;
        let n = data.len();
        let chunks = n.div_ceil(GRAD_CHUNK_ROWS);
        let parts = exec.map_range(chunks, |c| {
            let start = c * GRAD_CHUNK_ROWS;
            self.chunk_loss_grad(data, start..(start + GRAD_CHUNK_ROWS).min(n))
        });
        let mut layers: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer::zeros(l.fan_in, l.fan_out))
            .collect();
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (acc, part) in layers.iter_mut().zip(&g) {
                acc.add_assign(part);
            }
        }
        if n > 0 {
            let inv = 1.0 / n as f64;
            loss *= inv;
            layers.iter_mut().for_each(|l| l.scale(inv));
        }
        Ok((loss, Gradients { layers }))
    }

    /// `θ ← θ − lr·g`.
    pub fn step(&mut self, grads: &Gradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, d) in layer.weight.iter_mut().zip(&g.weight) {
                *p -= lr * d;
            }
            for (p, d) in layer.bias.iter_mut().zip(&g.bias) {
                *p -= lr * d;
            }
        }
    }
}

/// Logits `[n, num_classes]` for `inputs`.
pub fn forward(
    model: &Checkpoint,
    arch: &ToyArchitecture,
    inputs: &Matrix,
) -> Result<Matrix, ModelError> {
    Mlp::from_checkpoint(model, arch)?.logits(inputs)
}

/// Post-tanh output of the final hidden layer, or the raw inputs when the
/// architecture has no hidden layer.
pub fn extract_representation(
    model: &Checkpoint,
    arch: &ToyArchitecture,
    inputs: &Matrix,
) -> Result<Matrix, ModelError> {
    Mlp::from_checkpoint(model, arch)?.representation(inputs)
}
