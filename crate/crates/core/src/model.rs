//! ReLU multilayer perceptron with softmax cross-entropy and manual backprop.

use crate::ndcore::{DenseTensor, RngStream};
use crate::{Error, Result};

/// Dense layers `dims[0] → dims[1] → … → dims[last]`, ReLU between layers and
/// a linear output.
///
/// Parameters are kept as a flat list `[W₀, b₀, W₁, b₁, …]` with `Wᵢ` of shape
/// `[out × in]`, which is also the order gradients come back in.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    params: Vec<DenseTensor>,
}

impl MlpModel {
    /// He-initialized (`std = sqrt(2 / in)`) weights and zero biases.
    pub fn new(dims: &[usize], rng: &mut RngStream) -> Result<Self> {
        Self::check_dims(dims)?;
        let mut params = Vec::with_capacity(2 * (dims.len() - 1));
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f32).sqrt();
            params.push(DenseTensor::new(
                rng.gaussian_vec(0.0, std, fan_in * fan_out),
                vec![fan_out, fan_in],
            )?);
            params.push(DenseTensor::zeros(&[fan_out]));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::check_dims(dims)?;
        let params = dims
            .windows(2)
            .flat_map(|w| [DenseTensor::zeros(&[w[1], w[0]]), DenseTensor::zeros(&[w[1]])])
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            params,
        })
    }

    /// Builds a model from explicit `[W₀, b₀, …]` tensors.
    pub fn from_params(params: Vec<DenseTensor>) -> Result<Self> {
        if params.is_empty() || params.len() % 2 != 0 {
            return Err(Error::Dimension("need (weight, bias) pairs".into()));
        }
        let mut dims = vec![params[0].shape().get(1).copied().unwrap_or(0)];
        for pair in params.chunks(2) {
            let (w, b) = (&pair[0], &pair[1]);
            if w.shape().len() != 2 || b.shape() != [w.shape()[0]] || w.shape()[1] != *dims.last().unwrap() {
                return Err(Error::Dimension(format!(
                    "layer shapes do not chain: weight {:?}, bias {:?}",
                    w.shape(),
                    b.shape()
                )));
            }
            dims.push(w.shape()[0]);
        }
        Ok(Self { dims, params })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Parameter(format!(
                "MLP needs at least input and output widths, all positive; got {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// `Σ (out·in + out)` over layers.
    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    pub fn params(&self) -> &[DenseTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<DenseTensor> {
        self.params
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.shape().to_vec()).collect()
    }

    pub fn weight(&self, layer: usize) -> &DenseTensor {
        &self.params[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &DenseTensor {
        &self.params[2 * layer + 1]
    }

    fn check_input(&self, x: &DenseTensor) -> Result<()> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_dim() {
            return Err(Error::Dimension(format!(
                "expected [batch × {}] input, got {:?}",
                self.input_dim(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Pre-activations of every layer; the last entry is the logits.
    fn forward_trace(&self, x: &DenseTensor) -> Result<Vec<DenseTensor>> {
        self.check_input(x)?;
        let mut zs: Vec<DenseTensor> = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            let input = match zs.last() {
                None => x.clone(),
                Some(z) => z.map(relu)?,
            };
            let mut z = input.matmul_transposed(self.weight(l))?;
            z.add_row_vector(self.bias(l))?;
            zs.push(z);
        }
        Ok(zs)
    }

    /// Logits `[batch × classes]`.
    pub fn forward(&self, x: &DenseTensor) -> Result<DenseTensor> {
        Ok(self.forward_trace(x)?.pop().expect("at least one layer"))
    }

    /// Mean softmax cross-entropy over the batch and its gradient for every parameter.
    pub fn loss_and_grads(&self, x: &DenseTensor, y: &[usize]) -> Result<(f32, Vec<DenseTensor>)> {
        self.check_labels(x, y)?;
        let zs = self.forward_trace(x)?;
        let batch = y.len();
        let classes = self.num_classes();
        let logits = zs.last().unwrap();
        let mut delta = vec![0.0f32; batch * classes];
        let mut loss = 0.0f64;
        for (i, &label) in y.iter().enumerate() {
            let row = logits.row(i);
            let (lse, probs) = log_softmax_parts(row);
            loss += lse - f64::from(row[label]);
            let d = &mut delta[i * classes..(i + 1) * classes];
            for (dj, p) in d.iter_mut().zip(probs) {
                *dj = (p / batch as f64) as f32;
            }
            d[label] -= 1.0 / batch as f32;
        }
        let loss = (loss / batch as f64) as f32;

        let mut grads = vec![DenseTensor::zeros(&[0]); self.params.len()];
        let mut delta = DenseTensor::new(delta, vec![batch, classes])?;
        for l in (0..self.num_layers()).rev() {
            let input = if l == 0 { x.clone() } else { zs[l - 1].map(relu)? };
            grads[2 * l] = delta.transposed_matmul(&input)?;
            grads[2 * l + 1] = delta.sum_rows()?;
            if l > 0 {
                let upstream = delta.matmul(self.weight(l))?;
                delta = upstream.zip_map(&zs[l - 1], |g, z| if z > 0.0 { g } else { 0.0 })?;
            }
        }
        Ok((loss, grads))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, x: &DenseTensor, y: &[usize]) -> Result<f32> {
        self.check_labels(x, y)?;
        let logits = self.forward(x)?;
        let total: f64 = y
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let row = logits.row(i);
                log_softmax_parts(row).0 - f64::from(row[label])
            })
            .sum();
        Ok((total / y.len() as f64) as f32)
    }

    fn check_labels(&self, x: &DenseTensor, y: &[usize]) -> Result<()> {
        self.check_input(x)?;
        if y.is_empty() || y.len() != x.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} samples",
                y.len(),
                x.rows()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= self.num_classes()) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Argmax class per row, ties broken toward the lowest index.
    pub fn predict(&self, x: &DenseTensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x)?))
    }
}

#[inline]
fn relu(v: f32) -> f32 {
    v.max(0.0)
}

/// `(log Σ exp(row), softmax(row))`, max-shifted.
fn log_softmax_parts(row: &[f32]) -> (f64, Vec<f64>) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = row.iter().map(|&v| f64::from(v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = f64::from(max) + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

pub fn argmax_rows(logits: &DenseTensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Accuracy and mean loss of `model` on a labelled set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

const EVAL_CHUNK: usize = 512;

/// Fraction of argmax-correct predictions (ties resolve to the lowest class).
pub fn evaluate(model: &MlpModel, x: &DenseTensor, y: &[usize]) -> Result<f64> {
    Ok(evaluate_full(model, x, y)?.accuracy)
}

pub fn evaluate_full(model: &MlpModel, x: &DenseTensor, y: &[usize]) -> Result<Evaluation> {
    if y.is_empty() {
        return Err(Error::Parameter("cannot evaluate on an empty set".into()));
    }
    if y.len() != x.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} samples",
            y.len(),
            x.rows()
        )));
    }
    let cols = x.cols();
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    for start in (0..y.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(y.len());
        let chunk = DenseTensor::new(x.data()[start * cols..end * cols].to_vec(), vec![end - start, cols])?;
        let labels = &y[start..end];
        let logits = model.forward(&chunk)?;
        for (i, (&pred, &label)) in argmax_rows(&logits).iter().zip(labels).enumerate() {
            if label >= model.num_classes() {
                return Err(Error::Data(format!("label {label} out of range")));
            }
            correct += usize::from(pred == label);
            let row = logits.row(i);
            loss += log_softmax_parts(row).0 - f64::from(row[label]);
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / y.len() as f64,
        loss: loss / y.len() as f64,
    })
}
