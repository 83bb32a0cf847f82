use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layer::{build_layers, Cache, Layer, LayerSpec};
use crate::nn::tensor::Tensor;
use crate::scalar::{lit, Scalar};

/// Training objective. Class labels are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// Mean negative log-likelihood of a softmax posterior.
    Nll,
    /// Mean over the batch of the per-sample sum of squared errors.
    Mse,
    /// Sum of `heads` NLL terms per sample, averaged over the batch.
    SummedNll(usize),
}

impl Loss {
    pub fn heads(&self) -> usize {
        match self {
            Loss::Nll => 1,
            Loss::SummedNll(n) => *n,
            Loss::Mse => 0,
        }
    }
}

/// Supervision for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets<T> {
    /// `batch * heads` labels in `1..=classes`, sample-major.
    Labels(Vec<usize>),
    Values(Tensor<T>),
}

/// Parameter gradients in the network's fixed parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T>(pub Vec<Vec<T>>);

impl<T: Scalar> Gradients<T> {
    pub fn arrays(&self) -> &[Vec<T>] {
        &self.0
    }

    pub fn max_abs(&self) -> T {
        self.0.iter().flat_map(|a| a.iter()).fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Output of a forward pass that keeps what backpropagation needs.
pub struct ForwardPass<T> {
    output: Tensor<T>,
    caches: Vec<Cache<T>>,
}

impl<T> ForwardPass<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    tag: String,
    input_shape: Vec<usize>,
    /// Per-sample shape entering each layer, followed by the output shape.
    shapes: Vec<Vec<usize>>,
    layers: Vec<Layer<T>>,
    loss: Loss,
}

impl<T: Scalar> Network<T> {
    /// Builds the network with seeded uniform Glorot weights and zero biases.
    pub fn new(tag: impl Into<String>, input_shape: &[usize], specs: &[LayerSpec], loss: Loss, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layers, _) = build_layers(specs, input_shape, &mut rng, 0)?;
        let mut shapes = vec![input_shape.to_vec()];
        for l in &layers {
            let next = l.out_shape(shapes.last().unwrap());
            shapes.push(next);
        }
        let net = Self {
            tag: tag.into(),
            input_shape: input_shape.to_vec(),
            shapes,
            layers,
            loss,
        };
        net.check_loss()?;
        Ok(net)
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(tag: impl Into<String>, input_shape: &[usize], specs: &[LayerSpec], loss: Loss) -> Result<Self> {
        let mut net = Self::new(tag, input_shape, specs, loss, 0)?;
        for p in net.params_mut() {
            p.fill(T::zero());
        }
        Ok(net)
    }

    fn check_loss(&self) -> Result<()> {
        let out = self.output_shape();
        match self.loss {
            Loss::Nll | Loss::SummedNll(_) => {
                let heads = self.loss.heads();
                match self.layers.last() {
                    Some(Layer::Softmax { groups, .. }) if *groups == heads => Ok(()),
                    _ => Err(Error::InvalidParameter(format!(
                        "{:?} loss needs a final Softmax with {heads} group(s)",
                        self.loss
                    ))),
                }
            }
            Loss::Mse => {
                if out.len() == 1 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!("MSE loss needs a flat output, got {out:?}")))
                }
            }
        }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    /// Per-sample shape after each layer.
    pub fn layer_output_shapes(&self) -> &[Vec<usize>] {
        &self.shapes[1..]
    }

    pub fn loss_kind(&self) -> Loss {
        self.loss
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.visit_params(&mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            l.visit_params_mut(&mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Number of classes per softmax head, if the loss is a classification loss.
    pub fn classes(&self) -> Option<usize> {
        match self.loss {
            Loss::Mse => None,
            l => Some(self.output_shape()[0] / l.heads()),
        }
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        if batch.shape().is_empty() || batch.sample_shape() != self.input_shape.as_slice() {
            let mut expected = vec![batch.batch()];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::LayerShape {
                layer: 0,
                kind: "input".to_string(),
                expected,
                actual: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let mut cur = batch.clone();
        for l in &self.layers {
            cur = l.forward(cur, false).0;
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, batch: &Tensor<T>) -> Result<ForwardPass<T>> {
        self.check_input(batch)?;
        let mut cur = batch.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (next, c) = l.forward(cur, true);
            caches.push(c);
            cur = next;
        }
        Ok(ForwardPass { output: cur, caches })
    }

    fn check_targets(&self, output: &Tensor<T>, targets: &Targets<T>) -> Result<()> {
        let b = output.batch();
        match (self.loss, targets) {
            (Loss::Mse, Targets::Values(t)) => {
                if t.shape() != output.shape() {
                    return Err(Error::DimensionMismatch {
                        expected: format!("targets of shape {:?}", output.shape()),
                        actual: format!("{:?}", t.shape()),
                    });
                }
                Ok(())
            }
            (Loss::Nll | Loss::SummedNll(_), Targets::Labels(labels)) => {
                let heads = self.loss.heads();
                if labels.len() != b * heads {
                    return Err(Error::DimensionMismatch {
                        expected: format!("{} labels", b * heads),
                        actual: format!("{} labels", labels.len()),
                    });
                }
                let classes = self.classes().unwrap();
                if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > classes) {
                    return Err(Error::LabelOutOfRange { label: bad, classes });
                }
                Ok(())
            }
            (loss, _) => Err(Error::InvalidParameter(format!("target kind does not match {loss:?} loss"))),
        }
    }

    /// Scalar objective of `output` against `targets`.
    pub fn loss(&self, output: &Tensor<T>, targets: &Targets<T>) -> Result<T> {
        self.check_targets(output, targets)?;
        let b = T::from_usize(output.batch()).unwrap();
        let total = match targets {
            Targets::Values(t) => output
                .data()
                .iter()
                .zip(t.data())
                .map(|(y, t)| (*y - *t) * (*y - *t))
                .sum::<T>(),
            Targets::Labels(labels) => {
                let classes = self.classes().unwrap();
                output
                    .data()
                    .chunks_exact(classes)
                    .zip(labels)
                    .map(|(p, &l)| -p[l - 1].max(T::min_positive_value()).ln())
                    .sum::<T>()
            }
        };
        Ok(total / b)
    }

    /// Gradient of the loss with respect to every parameter.
    pub fn backward(&self, pass: ForwardPass<T>, targets: &Targets<T>) -> Result<Gradients<T>> {
        Ok(self.backward_inner(pass, targets, false)?.0)
    }

    /// Parameter gradients plus the gradient with respect to the input batch.
    pub fn backward_with_input(&self, pass: ForwardPass<T>, targets: &Targets<T>) -> Result<(Gradients<T>, Tensor<T>)> {
        let (g, x) = self.backward_inner(pass, targets, true)?;
        Ok((g, x.expect("input gradient requested")))
    }

    fn backward_inner(
        &self,
        pass: ForwardPass<T>,
        targets: &Targets<T>,
        need_input: bool,
    ) -> Result<(Gradients<T>, Option<Tensor<T>>)> {
        let ForwardPass { output, caches } = pass;
        self.check_targets(&output, targets)?;
        let b = output.batch();
        let inv_b = T::one() / T::from_usize(b).unwrap();
        let mut grads: Vec<Vec<T>> = self.params().iter().map(|p| vec![T::zero(); p.len()]).collect();

        let mut skip_last = false;
        let mut g = match targets {
            Targets::Values(t) => {
                let two: T = lit(2.0);
                let data = output
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(y, t)| two * (*y - *t) * inv_b)
                    .collect();
                Tensor::new(output.shape().to_vec(), data)?
            }
            Targets::Labels(labels) => {
                // softmax and NLL fused: (p - onehot) / B on the logits
                let classes = self.classes().unwrap();
                let mut data: Vec<T> = output.data().iter().map(|p| *p * inv_b).collect();
                for (row, &l) in data.chunks_exact_mut(classes).zip(labels) {
                    row[l - 1] -= inv_b;
                }
                skip_last = true;
                Tensor::new(output.shape().to_vec(), data)?
            }
        };

        let mut slot_end = grads.len();
        let n = self.layers.len();
        let last = if skip_last { n - 1 } else { n };
        let mut input_grad = None;
        for i in (0..last).rev() {
            let layer = &self.layers[i];
            let count = layer.param_count_tensors();
            let mut slot = slot_end - count;
            let start = slot;
            let need = need_input || i > 0;
            match layer.backward(&caches[i], g, &mut grads, &mut slot, need) {
                Some(next) => {
                    let mut shape = vec![b];
                    shape.extend_from_slice(&self.shapes[i]);
                    g = next.reshape(shape)?;
                }
                None => {
                    g = Tensor::zeros(vec![0]);
                }
            }
            slot_end = start;
            if i == 0 && need_input {
                input_grad = Some(g.clone());
            }
        }
        if last == 0 && need_input {
            input_grad = Some(g);
        }
        Ok((Gradients(grads), input_grad))
    }

    /// Loss and parameter gradients for one batch.
    pub fn loss_and_gradients(&self, batch: &Tensor<T>, targets: &Targets<T>) -> Result<(T, Gradients<T>)> {
        let pass = self.forward_cached(batch)?;
        let loss = self.loss(pass.output(), targets)?;
        let grads = self.backward(pass, targets)?;
        Ok((loss, grads))
    }

    /// θ ← θ − lr·∇θ
    pub fn sgd_step(&mut self, grads: &Gradients<T>, learning_rate: T) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != grads.0.len() || params.iter().zip(&grads.0).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::DimensionMismatch {
                expected: format!("{} parameter arrays", params.len()),
                actual: format!("{} gradient arrays", grads.0.len()),
            });
        }
        for (p, g) in params.iter_mut().zip(&grads.0) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= learning_rate * *gv;
            }
        }
        Ok(())
    }

    /// Overwrites all parameters from arrays in parameter order.
    pub fn set_params(&mut self, values: &[Vec<T>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() || params.iter().zip(values).any(|(p, v)| p.len() != v.len()) {
            return Err(Error::DimensionMismatch {
                expected: format!("{} parameter arrays of matching length", params.len()),
                actual: format!("{} arrays", values.len()),
            });
        }
        for (p, v) in params.iter_mut().zip(values) {
            p.copy_from_slice(v);
        }
        Ok(())
    }

    pub fn params_snapshot(&self) -> Vec<Vec<T>> {
        self.params().iter().map(|p| p.to_vec()).collect()
    }

    /// Index of the largest entry in each softmax head, 1-based, lowest index on ties.
    pub fn argmax_labels(&self, output: &Tensor<T>) -> Vec<usize> {
        let classes = self.classes().unwrap_or(output.sample_len());
        output.data().chunks_exact(classes).map(argmax_1based).collect()
    }
}

pub fn argmax_1based<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best + 1
}
