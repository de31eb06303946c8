//! Floating point and binary-weight convolutions lowered through unfold.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::spatial::Geometry;
use crate::tensor::{BackwardContext, BackwardRule, Element, Tape, Tensor, Var};

/// Spatial hyper-parameters shared by the convolution flavours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn he_normal<T: Element>(geom: &ConvGeometry, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / geom.fan_in() as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let data: Vec<f64> = (0..geom.out_channels * geom.fan_in())
        .map(|_| dist.sample(rng))
        .collect();
    Tensor::from_f64([geom.out_channels, geom.fan_in()], &data)
        .expect("sized above")
        .with_requires_grad(true)
}

fn check_weight<T: Element>(geom: &ConvGeometry, weight: &Tensor<T>) -> Result<()> {
    if weight.shape() != [geom.out_channels, geom.fan_in()] {
        return Err(Error::Dimension(format!(
            "convolution weight has shape {:?}, expected [{}, {}]",
            weight.shape(),
            geom.out_channels,
            geom.fan_in()
        )));
    }
    Ok(())
}

/// Floating point convolution, `fold(unfold(x) · Wᵀ + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub geometry: ConvGeometry,
    /// `C_out × C_in·k·k`.
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Element> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn init(geometry: ConvGeometry, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = he_normal(&geometry, rng);
        let bias = bias.then(|| Tensor::zeros([geometry.out_channels]).with_requires_grad(true));
        Self {
            geometry,
            weight,
            bias,
        }
    }

    pub fn from_parts(
        geometry: ConvGeometry,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        check_weight(&geometry, &weight)?;
        if let Some(b) = &bias {
            if b.shape() != [geometry.out_channels] {
                return Err(Error::Dimension(format!(
                    "bias has shape {:?}, expected [{}]",
                    b.shape(),
                    geometry.out_channels
                )));
            }
        }
        Ok(Self {
            geometry,
            weight: weight.with_requires_grad(true),
            bias: bias.map(|b| b.with_requires_grad(true)),
        })
    }
}

/// Binary-weight convolution: `sign(W)` scaled per output channel by
/// `alpha[o] = mean |W[o]|`, trained through a clipped straight-through
/// estimator on the latent real-valued weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryConv2d<T> {
    pub geometry: ConvGeometry,
    /// Latent `C_out × C_in·k·k` weights.
    pub real_weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Element> BinaryConv2d<T> {
    pub fn init(geometry: ConvGeometry, bias: bool, rng: &mut impl Rng) -> Self {
        let Conv2d { weight, bias, .. } = Conv2d::init(geometry, bias, rng);
        Self {
            geometry,
            real_weight: weight,
            bias,
        }
    }

    pub fn from_parts(
        geometry: ConvGeometry,
        real_weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    ) -> Result<Self> {
        let Conv2d { weight, bias, .. } = Conv2d::from_parts(geometry, real_weight, bias)?;
        Ok(Self {
            geometry,
            real_weight: weight,
            bias,
        })
    }

    /// Entries in `{−1, +1}`; zero maps to `+1`.
    pub fn sign_weight(&self) -> Tensor<T> {
        self.real_weight
            .map(|w| if w >= T::zero() { T::one() } else { -T::one() })
    }

    pub fn alpha(&self) -> Tensor<T> {
        Tensor::from_vec(row_alphas(self.real_weight.data(), self.geometry.fan_in()))
    }

    /// `sign_weight` with each row scaled by its `alpha`.
    pub fn effective_weight(&self) -> Tensor<T> {
        let data = binarize(self.real_weight.data(), self.geometry.fan_in());
        Tensor::new(self.real_weight.shape().to_vec(), data).expect("same shape")
    }
}

fn row_alphas<T: Element>(w: &[T], fan_in: usize) -> Vec<T> {
    w.chunks(fan_in)
        .map(|row| row.iter().map(|v| v.abs()).sum::<T>() / T::of(fan_in as f64))
        .collect()
}

fn binarize<T: Element>(w: &[T], fan_in: usize) -> Vec<T> {
    let alphas = row_alphas(w, fan_in);
    w.chunks(fan_in)
        .zip(alphas)
        .flat_map(|(row, a)| {
            row.iter()
                .map(move |&v| if v >= T::zero() { a } else { -a })
        })
        .collect()
}

/// `rows · Wᵀ (+ b)` for `rows: R×D`, `W: C×D`.
struct Linear {
    rows: Var,
    weight: Var,
    bias: Option<Var>,
    dims: (usize, usize, usize),
}

impl<T: Element> BackwardRule<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.rows, self.weight];
        v.extend(self.bias);
        v
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (r, d, c) = self.dims;
        let x = ctx.value(self.rows).data();
        let w = ctx.value(self.weight).data();
        let g_rows = ctx.needs_grad(self.rows).then(|| {
            // g · W  (R×C · C×D)
            let mut out = vec![T::zero(); r * d];
            T::gemm(r, c, d, g, false, w, false, &mut out, false);
            out
        });
        let g_w = ctx.needs_grad(self.weight).then(|| {
            // gᵀ · x  (C×R · R×D)
            let mut out = vec![T::zero(); c * d];
            T::gemm(c, r, d, g, true, x, false, &mut out, false);
            out
        });
        let mut grads = vec![g_rows, g_w];
        if self.bias.is_some() {
            let mut gb = vec![T::zero(); c];
            for row in g.chunks(c) {
                gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
            grads.push(Some(gb));
        }
        Ok(grads)
    }
}

/// Straight-through binarization of latent weights.
struct Binarize {
    input: Var,
}

impl<T: Element> BackwardRule<T> for Binarize {
    fn name(&self) -> &'static str {
        "binarize"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let w = ctx.value(self.input).data();
        Ok(vec![Some(
            g.iter()
                .zip(w)
                .map(|(&g, &w)| if w.abs() <= T::one() { g } else { T::zero() })
                .collect(),
        )])
    }
}

impl<T: Element> Tape<T> {
    /// `rows · weightᵀ + bias` for `rows: R×D`, `weight: C×D`, `bias: C`.
    pub fn linear(&mut self, rows: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (x, w) = (self.value(rows), self.value(weight));
        let (r, d, c) = match (x.shape(), w.shape()) {
            (&[r, d], &[c, d2]) if d == d2 => (r, d, c),
            (a, b) => {
                return Err(Error::Dimension(format!(
                    "linear map of rows {a:?} with weight {b:?}"
                )))
            }
        };
        let mut out = vec![T::zero(); r * c];
        T::gemm(r, d, c, x.data(), false, w.data(), true, &mut out, false);
        if let Some(b) = bias {
            let b = self.value(b).data();
            if b.len() != c {
                return Err(Error::Dimension(format!(
                    "bias of length {} for {c} outputs",
                    b.len()
                )));
            }
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(b).for_each(|(o, &v)| *o += v);
            }
        }
        let value = Tensor::new([r, c], out)?;
        Ok(self.push(
            value,
            Linear {
                rows,
                weight,
                bias,
                dims: (r, d, c),
            },
        ))
    }

    /// Per-row `alpha · sign(w)` with a straight-through gradient that is
    /// zeroed where `|w| > 1`.
    pub fn binarize_weight(&mut self, weight: Var) -> Result<Var> {
        let w = self.value(weight);
        let &[_, fan_in] = w.shape() else {
            return Err(Error::Dimension(format!(
                "binarize expects a matrix, got {:?}",
                w.shape()
            )));
        };
        let value = Tensor::new(w.shape().to_vec(), binarize(w.data(), fan_in))?;
        Ok(self.push(value, Binarize { input: weight }))
    }

    /// Convolution via unfold, linear map, fold.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: &ConvGeometry,
    ) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != geometry.in_channels {
            return Err(Error::Geometry(format!(
                "convolution over {} channels given input of shape {shape:?}",
                geometry.in_channels
            )));
        }
        let (rows, geom) =
            self.unfold(input, geometry.kernel, geometry.stride, geometry.padding)?;
        let out = self.linear(rows, weight, bias)?;
        self.fold(out, &geom)
    }
}

fn run_conv<T: Element>(
    input: &Tensor<T>,
    geometry: &ConvGeometry,
    weight: Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    Geometry::new(
        input.shape(),
        geometry.kernel,
        geometry.stride,
        geometry.padding,
    )?;
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(weight);
    let b = bias.map(|b| tape.constant(b.clone()));
    let y = tape.conv2d(x, w, b, geometry)?;
    Ok(tape.value(y).clone())
}

/// Floating point convolution of an `N×C×H×W` input.
pub fn conv2d<T: Element>(input: &Tensor<T>, params: &Conv2d<T>) -> Result<Tensor<T>> {
    run_conv(
        input,
        &params.geometry,
        params.weight.clone(),
        params.bias.as_ref(),
    )
}

/// Binary-weight convolution of an `N×C×H×W` input.
pub fn binary_conv2d<T: Element>(input: &Tensor<T>, params: &BinaryConv2d<T>) -> Result<Tensor<T>> {
    run_conv(
        input,
        &params.geometry,
        params.effective_weight(),
        params.bias.as_ref(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom(c_in: usize, c_out: usize, k: usize, s: usize, p: usize) -> ConvGeometry {
        ConvGeometry {
            in_channels: c_in,
            out_channels: c_out,
            kernel: k,
            stride: s,
            padding: p,
        }
    }

    #[test]
    fn pointwise_identity() {
        let g = geom(3, 3, 1, 1, 0);
        let eye = Tensor::<f64>::from_f64([3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let conv = Conv2d::from_parts(g, eye, None).unwrap();
        let x = Tensor::from_f64(
            [2, 3, 2, 2],
            &(0..24).map(|i| i as f64 - 7.5).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(conv2d(&x, &conv).unwrap(), x);
    }

    #[test]
    fn shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f32>::init(geom(3, 64, 5, 2, 2), true, &mut rng);
        let y = conv2d(&Tensor::zeros([1, 3, 32, 32]), &conv).unwrap();
        assert_eq!(y.shape(), &[1, 64, 16, 16]);
        assert!(matches!(
            conv2d(&Tensor::zeros([1, 4, 32, 32]), &conv),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn binarization_of_two_element_row() {
        let g = geom(2, 1, 1, 1, 0);
        let bin = BinaryConv2d::<f64>::from_parts(
            g,
            Tensor::from_f64([1, 2], &[0.5, -0.5]).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(bin.alpha().data(), &[0.5]);
        assert_eq!(bin.sign_weight().data(), &[1.0, -1.0]);
        let plain =
            Conv2d::from_parts(g, Tensor::from_f64([1, 2], &[0.5, -0.5]).unwrap(), None).unwrap();
        let x = Tensor::from_f64([1, 2, 1, 3], &[1., 2., 3., -4., 0.5, 7.]).unwrap();
        assert_eq!(
            binary_conv2d(&x, &bin).unwrap(),
            conv2d(&x, &plain).unwrap()
        );
    }

    #[test]
    fn all_positive_weights_sum_receptive_field() {
        let g = geom(1, 1, 2, 1, 0);
        let bin = BinaryConv2d::<f64>::from_parts(
            g,
            Tensor::from_f64([1, 4], &[0.1, 0.2, 0.3, 0.4]).unwrap(),
            None,
        )
        .unwrap();
        let x = Tensor::from_f64([1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let y = binary_conv2d(&x, &bin).unwrap();
        let alpha = 0.25;
        assert!((y.data()[0] - alpha * 12.0).abs() < 1e-12);
        assert!((y.data()[1] - alpha * 16.0).abs() < 1e-12);
    }

    #[test]
    fn straight_through_clips_large_weights() {
        let g = geom(2, 1, 1, 1, 0);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 2, 1, 1], &[1.5, -2.0]).unwrap());
        let w = tape.leaf(
            Tensor::from_f64([1, 2], &[2.0, 0.3])
                .unwrap()
                .with_requires_grad(true),
        );
        let wb = tape.binarize_weight(w).unwrap();
        let y = tape.conv2d(x, wb, None, &g).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d loss / d effective weight = input values
        assert_eq!(grads.get(wb), None);
        assert_eq!(grads.get(w).unwrap(), &[0.0, -2.0]);
    }
}
