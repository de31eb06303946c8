//! Training and evaluation loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Model, Optimizer, TrainConfig};
use crate::error::{Error, Result};
use crate::layers::NormMode;
use crate::tensor::{Element, Tape, Tensor};

/// Batch size used for inference passes.
const EVAL_BATCH: usize = 128;

/// Anything that maps a batch of images to `N × classes` logits.
pub trait Classifier<T: Element> {
    fn logits(&mut self, images: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Element> Classifier<T> for Model<T> {
    fn logits(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict(images)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses seen during the epoch.
    pub train_loss: f64,
    pub test_accuracy: f64,
}

/// Index of the largest logit in each row; ties go to the lower class.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.shape().get(1).copied().unwrap_or(1);
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// Fraction of samples whose highest logit is the true label.
pub fn evaluate<T: Element, C: Classifier<T>>(
    classifier: &mut C,
    data: &Dataset<T>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let logits = classifier.logits(&x)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross entropy over a dataset, normalization in eval mode.
pub fn mean_loss<T: Element>(model: &mut Model<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let logits = model.predict(&x)?;
        total += super::softmax_cross_entropy(&logits, &labels)?.as_f64() * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// One optimization step on a batch; returns the batch loss.
pub fn train_step<T: Element>(
    model: &mut Model<T>,
    optimizer: &mut Optimizer<T>,
    images: Tensor<T>,
    labels: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let fwd = model.forward(&mut tape, x, NormMode::Train)?;
    let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
    let value = tape.value(loss).item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let mut params = model.parameters_mut();
    for (p, var) in params.iter_mut().zip(&fwd.params) {
        if let Some(g) = grads.take(*var) {
            p.accumulate_grad(&g)?;
        }
    }
    optimizer.step(&mut params)?;
    Ok(value)
}

/// Trains for `config.epochs` epochs, evaluating on `test` after each.
///
/// The sample order is reshuffled every epoch from a generator seeded with
/// `config.seed`, so identical inputs give identical histories.
pub fn train_epochs<T: Element>(
    model: &mut Model<T>,
    train: &Dataset<T>,
    test: &Dataset<T>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(
            "training needs non-empty train and test sets".into(),
        ));
    }
    let mut optimizer = Optimizer::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = train.batch(chunk);
            let loss = train_step(model, &mut optimizer, x, &labels).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
            total += loss * chunk.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            test_accuracy: evaluate(model, test)?,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}
