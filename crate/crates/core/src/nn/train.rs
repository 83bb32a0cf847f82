//! Minibatch SGD with early stopping on validation loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::network::{Loss, Network, Targets};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Indexed supervised examples that can be gathered into batches.
pub trait DataSource<T> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inputs and targets for the given sample indices, in that order.
    fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Targets<T>)>;
}

/// In-memory examples: one input per sample plus labels or target vectors.
#[derive(Clone, Debug)]
pub struct MemoryData<T> {
    sample_shape: Vec<usize>,
    inputs: Vec<T>,
    labels: Option<(usize, Vec<usize>)>,
    targets: Option<(Vec<usize>, Vec<T>)>,
    count: usize,
}

impl<T: Scalar> MemoryData<T> {
    /// `labels` holds `heads` labels per sample.
    pub fn classification(sample_shape: Vec<usize>, inputs: Vec<T>, heads: usize, labels: Vec<usize>) -> Result<Self> {
        let n: usize = sample_shape.iter().product();
        if n == 0 || !inputs.len().is_multiple_of(n) || heads == 0 || labels.len() != inputs.len() / n * heads {
            return Err(Error::DimensionMismatch {
                expected: format!("inputs a multiple of {n} and {heads} labels per sample"),
                actual: format!("{} inputs, {} labels", inputs.len(), labels.len()),
            });
        }
        Ok(Self {
            count: inputs.len() / n,
            sample_shape,
            inputs,
            labels: Some((heads, labels)),
            targets: None,
        })
    }

    pub fn regression(sample_shape: Vec<usize>, inputs: Vec<T>, target_shape: Vec<usize>, targets: Vec<T>) -> Result<Self> {
        let n: usize = sample_shape.iter().product();
        let m: usize = target_shape.iter().product();
        if n == 0 || m == 0 || !inputs.len().is_multiple_of(n) || targets.len() != inputs.len() / n * m {
            return Err(Error::DimensionMismatch {
                expected: format!("inputs a multiple of {n} and {m} target values per sample"),
                actual: format!("{} inputs, {} targets", inputs.len(), targets.len()),
            });
        }
        Ok(Self {
            count: inputs.len() / n,
            sample_shape,
            inputs,
            labels: None,
            targets: Some((target_shape, targets)),
        })
    }
}

impl<T: Scalar> DataSource<T> for MemoryData<T> {
    fn len(&self) -> usize {
        self.count
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Targets<T>)> {
        let n: usize = self.sample_shape.iter().product();
        let mut x = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            x.extend_from_slice(&self.inputs[i * n..(i + 1) * n]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        let x = Tensor::new(shape, x)?;
        let t = match (&self.labels, &self.targets) {
            (Some((heads, labels)), _) => Targets::Labels(
                indices
                    .iter()
                    .flat_map(|&i| labels[i * heads..(i + 1) * heads].iter().copied())
                    .collect(),
            ),
            (_, Some((tshape, values))) => {
                let m: usize = tshape.iter().product();
                let mut v = Vec::with_capacity(indices.len() * m);
                for &i in indices {
                    v.extend_from_slice(&values[i * m..(i + 1) * m]);
                }
                let mut shape = vec![indices.len()];
                shape.extend_from_slice(tshape);
                Targets::Values(Tensor::new(shape, v)?)
            }
            _ => unreachable!(),
        };
        Ok((x, t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 50,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidParameter("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidParameter("max epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Fraction of correctly predicted labels (all heads pooled); classification only.
    pub valid_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
}

/// Evaluation of a network over a whole data source.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

pub fn evaluate<T: Scalar, D: DataSource<T> + ?Sized>(net: &Network<T>, data: &D, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let batch_size = batch_size.max(1);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, t) = data.batch(chunk)?;
        let out = net.forward(&x)?;
        let l = net.loss(&out, &t)?.to_f64_lossy();
        loss_sum += l * chunk.len() as f64;
        if let Targets::Labels(labels) = &t {
            let pred = net.argmax_labels(&out);
            correct += pred.iter().zip(labels).filter(|(a, b)| a == b).count();
            total += labels.len();
        }
    }
    let accuracy = match net.loss_kind() {
        Loss::Mse => None,
        _ => Some(correct as f64 / total as f64),
    };
    Ok(Evaluation {
        loss: loss_sum / data.len() as f64,
        accuracy,
    })
}

/// Trains in place. On return the network holds the parameters of the best
/// validation epoch.
pub fn train<T: Scalar, D: DataSource<T> + ?Sized, V: DataSource<T> + ?Sized>(
    net: &mut Network<T>,
    train_set: &D,
    valid_set: &V,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if valid_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let lr = T::from_f64_lossy(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History {
        best_valid_loss: f64::INFINITY,
        ..History::default()
    };
    let mut best_params = net.params_snapshot();
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, t) = train_set.batch(chunk)?;
            let (loss, grads) = net.loss_and_gradients(&x, &t)?;
            loss_sum += loss.to_f64_lossy() * chunk.len() as f64;
            net.sgd_step(&grads, lr)?;
        }
        let eval = evaluate(net, valid_set, config.batch_size.max(100))?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            valid_loss: eval.loss,
            valid_accuracy: eval.accuracy,
        };
        on_epoch(&rec);
        history.epochs.push(rec);
        if eval.loss < history.best_valid_loss {
            history.best_valid_loss = eval.loss;
            history.best_epoch = epoch;
            best_params = net.params_snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    net.set_params(&best_params)?;
    Ok(history)
}
