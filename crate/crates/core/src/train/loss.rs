use crate::error::{Error, Result};
use crate::tensor::{BackwardContext, BackwardRule, Element, Tape, Tensor, Var};

struct SoftmaxCrossEntropy<T> {
    logits: Var,
    labels: Vec<usize>,
    probs: Vec<T>,
}

impl<T: Element> BackwardRule<T> for SoftmaxCrossEntropy<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let n = self.labels.len();
        let classes = self.probs.len() / n;
        let scale = g[0] / T::of(n as f64);
        let mut out: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
        for (i, &label) in self.labels.iter().enumerate() {
            out[i * classes + label] -= scale;
        }
        Ok(vec![Some(out)])
    }
}

/// Row-wise softmax probabilities and the mean negative log-likelihood.
fn softmax_nll<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(Vec<T>, T)> {
    let &[n, classes] = logits.shape() else {
        return Err(Error::Dimension(format!(
            "logits must be N×classes, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != n || n == 0 {
        return Err(Error::Data(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut probs = Vec::with_capacity(n * classes);
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln() + max;
        total += log_sum - row[label];
        probs.extend(row.iter().map(|&z| (z - log_sum).exp()));
    }
    Ok((probs, total / T::of(n as f64)))
}

/// Mean negative log-softmax of the true class.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    softmax_nll(logits, labels).map(|(_, loss)| loss)
}

impl<T: Element> Tape<T> {
    /// Scalar mean cross entropy; its gradient is `(softmax − onehot) / N`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (probs, loss) = softmax_nll(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_saturated() {
        let z = Tensor::<f64>::from_f64([1, 2], &[0.0, 0.0]).unwrap();
        assert!((softmax_cross_entropy(&z, &[0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((softmax_cross_entropy(&z, &[0]).unwrap() - 0.69315).abs() < 1e-5);
        let z = Tensor::<f64>::from_f64([1, 2], &[100.0, 0.0]).unwrap();
        assert!(softmax_cross_entropy(&z, &[0]).unwrap() < 1e-40);
    }

    #[test]
    fn gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(
            Tensor::from_f64([2, 2], &[1.0, -1.0, 0.5, 0.25])
                .unwrap()
                .with_requires_grad(true),
        );
        let loss = tape.softmax_cross_entropy(z, &[1, 0]).unwrap();
        let g = tape.backward(loss).unwrap();
        let p0 = 1.0 / (1.0 + (-2.0f64).exp());
        let p1 = 1.0 / (1.0 + (-0.25f64).exp());
        let want = [
            (p0) / 2.0,
            (1.0 - p0 - 1.0) / 2.0,
            (p1 - 1.0) / 2.0,
            (1.0 - p1) / 2.0,
        ];
        for (a, b) in g.get(z).unwrap().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn out_of_range_label() {
        let z = Tensor::<f64>::zeros([1, 2]);
        assert!(matches!(
            softmax_cross_entropy(&z, &[2]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            softmax_cross_entropy(&z, &[0, 1]),
            Err(Error::Data(_))
        ));
    }
}
