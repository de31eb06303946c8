use crate::error::{Error, Result};
use crate::tensor::{BackwardContext, BackwardRule, Element, Tape, Tensor, Var};

struct AvgPool {
    input: Var,
    plane: usize,
}

impl<T: Element> BackwardRule<T> for AvgPool {
    fn name(&self) -> &'static str {
        "adaptive_avg_pool"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let scale = T::one() / T::of(self.plane as f64);
        Ok(vec![Some(
            g.iter()
                .flat_map(|&v| std::iter::repeat_n(v * scale, self.plane))
                .collect(),
        )])
    }
}

impl<T: Element> Tape<T> {
    /// Mean over all spatial positions: `N×C×H×W → N×C×1×1`.
    pub fn adaptive_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let &[n, c, h, w] = x.shape() else {
            return Err(Error::Dimension(format!(
                "pooling expects N×C×H×W, got {:?}",
                x.shape()
            )));
        };
        let plane = h * w;
        if plane == 0 {
            return Err(Error::Dimension("pooling over an empty map".into()));
        }
        let scale = T::of(plane as f64);
        let data = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / scale)
            .collect();
        let value = Tensor::new([n, c, 1, 1], data)?;
        Ok(self.push(value, AvgPool { input, plane }))
    }
}

pub fn adaptive_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.adaptive_avg_pool(v)?;
    Ok(tape.value(y).clone())
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let x = Tensor::<f64>::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn pool_values() {
        let c = Tensor::<f64>::full([2, 3, 4, 5], 3.0);
        let p = adaptive_avg_pool(&c).unwrap();
        assert_eq!(p.shape(), &[2, 3, 1, 1]);
        assert!(p.data().iter().all(|&v| v == 3.0));
        let x = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(adaptive_avg_pool(&x).unwrap().data(), &[2.5]);
    }
}
