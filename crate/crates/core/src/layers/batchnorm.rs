use crate::error::{Error, Result};
use crate::tensor::{BackwardContext, BackwardRule, Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-channel batch normalization over `N×C×H×W` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([channels], T::one()).with_requires_grad(true),
            beta: Tensor::zeros([channels]).with_requires_grad(true),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], T::one()),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Normalizes `x` outside of any tape.
    pub fn forward(&mut self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(self.gamma.clone());
        let b = tape.constant(self.beta.clone());
        let y = tape.batchnorm(xv, g, b, self, mode)?;
        Ok(tape.value(y).clone().with_requires_grad(false))
    }
}

fn layout(shape: &[usize], channels: usize) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c, h, w] if c == channels => Ok((n, c, h * w)),
        _ => Err(Error::Dimension(format!(
            "batch norm over {channels} channels given input of shape {shape:?}"
        ))),
    }
}

struct BatchNormOp<T> {
    input: Var,
    gamma: Var,
    beta: Var,
    mode: NormMode,
    /// Normalized input, `x̂`.
    normalized: Vec<T>,
    inv_std: Vec<T>,
    dims: (usize, usize, usize),
}

impl<T: Element> BackwardRule<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input, self.gamma, self.beta]
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (n, c, hw) = self.dims;
        let gamma = ctx.value(self.gamma).data();
        let count = T::of((n * hw) as f64);
        let mut d_gamma = vec![T::zero(); c];
        let mut d_beta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); g.len()];
        for ch in 0..c {
            let positions = (0..n).flat_map(|b| {
                let start = (b * c + ch) * hw;
                start..start + hw
            });
            let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
            for i in positions.clone() {
                sum_g += g[i];
                sum_gx += g[i] * self.normalized[i];
            }
            d_gamma[ch] = sum_gx;
            d_beta[ch] = sum_g;
            let scale = gamma[ch] * self.inv_std[ch];
            match self.mode {
                NormMode::Eval => {
                    for i in positions {
                        dx[i] = g[i] * scale;
                    }
                }
                NormMode::Train => {
                    let (mean_g, mean_gx) = (sum_g / count, sum_gx / count);
                    for i in positions {
                        dx[i] = scale * (g[i] - mean_g - self.normalized[i] * mean_gx);
                    }
                }
            }
        }
        Ok(vec![Some(dx), Some(d_gamma), Some(d_beta)])
    }
}

impl<T: Element> Tape<T> {
    /// Batch normalization. In [`NormMode::Train`] the running statistics of
    /// `state` are updated; `gamma`/`beta` values are read from the vars.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNorm<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let channels = state.channels();
        let x = self.value(input);
        let (n, c, hw) = layout(x.shape(), channels)?;
        let count = n * hw;
        if mode == NormMode::Train && count == 0 {
            return Err(Error::Contract(
                "batch norm in train mode needs a non-empty batch".into(),
            ));
        }
        let eps = T::of(state.epsilon);
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            NormMode::Eval => (
                state.running_mean.data().to_vec(),
                state.running_var.data().to_vec(),
            ),
            NormMode::Train => {
                let xs = x.data();
                let denom = T::of(count as f64);
                (0..c)
                    .map(|ch| {
                        let vals = || {
                            (0..n).flat_map(move |b| {
                                let start = (b * c + ch) * hw;
                                xs[start..start + hw].iter().copied()
                            })
                        };
                        let mean = vals().sum::<T>() / denom;
                        let var = vals().map(|v| (v - mean) * (v - mean)).sum::<T>() / denom;
                        (mean, var)
                    })
                    .unzip()
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma_v = self.value(gamma).data();
        let beta_v = self.value(beta).data();
        if gamma_v.len() != c || beta_v.len() != c {
            return Err(Error::Dimension(format!(
                "batch norm affine parameters must have {c} entries"
            )));
        }
        let xs = x.data();
        let mut normalized = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * hw;
                for i in start..start + hw {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = gamma_v[ch] * xh + beta_v[ch];
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;

        if mode == NormMode::Train {
            let m = T::of(state.momentum);
            let unbias = if count > 1 {
                T::of(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            for ch in 0..c {
                let rm = &mut state.running_mean.data_mut()[ch];
                *rm = (T::one() - m) * *rm + m * mean[ch];
                let rv = &mut state.running_var.data_mut()[ch];
                *rv = (T::one() - m) * *rv + m * var[ch] * unbias;
            }
        }

        Ok(self.push(
            value,
            BatchNormOp {
                input,
                gamma,
                beta,
                mode,
                normalized,
                inv_std,
                dims: (n, c, hw),
            },
        ))
    }
}
