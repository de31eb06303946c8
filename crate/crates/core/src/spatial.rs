//! Lowering of spatial convolution to matrix form (unfold / im2col) and the
//! output-side reshape back to feature maps (fold).
//!
//! Row `u` of an unfolded matrix is the receptive field of output position
//! `u = n·H_out·W_out + y·W_out + x`. Columns run channel-major, then kernel
//! row, then kernel column, so column `c·k·k + i·k + j` reads input
//! `(n, c, y·stride + i − padding, x·stride + j − padding)`, or zero when that
//! position falls in the padding.

use crate::error::{Error, Result};
use crate::tensor::{BackwardContext, BackwardRule, Element, Tape, Tensor, Var};

/// Shape bookkeeping shared by [`unfold`] and [`fold`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl Geometry {
    pub fn new(
        input_shape: &[usize],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let &[batch, channels, height, width] = input_shape else {
            return Err(Error::Geometry(format!(
                "expected an N×C×H×W input, got shape {input_shape:?}"
            )));
        };
        if kernel == 0 || stride == 0 {
            return Err(Error::Geometry(format!(
                "kernel ({kernel}) and stride ({stride}) must be at least 1"
            )));
        }
        if height + 2 * padding < kernel || width + 2 * padding < kernel {
            return Err(Error::Geometry(format!(
                "kernel {kernel} exceeds padded input {}×{}",
                height + 2 * padding,
                width + 2 * padding
            )));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    /// Number of unfolded rows, `N·H_out·W_out`.
    pub fn rows(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    /// Receptive-field length, `C·k·k`.
    pub fn cols(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn output_shape(&self, out_channels: usize) -> [usize; 4] {
        [self.batch, out_channels, self.out_height, self.out_width]
    }

    /// Input offset read by each (row, column) pair, `None` for padding.
    fn for_each_tap(&self, mut f: impl FnMut(usize, Option<usize>)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (h, w) = (self.height as isize, self.width as isize);
        let mut dst = 0;
        for n in 0..self.batch {
            for oy in 0..self.out_height {
                for ox in 0..self.out_width {
                    for c in 0..self.channels {
                        let plane = (n * self.channels + c) * self.height * self.width;
                        for i in 0..k {
                            let iy = (oy * s + i) as isize - p;
                            for j in 0..k {
                                let ix = (ox * s + j) as isize - p;
                                let src = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                    .then(|| plane + iy as usize * self.width + ix as usize);
                                f(dst, src);
                                dst += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Receptive-field rows of an input together with its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldedFeatureMatrix<T> {
    pub data: Tensor<T>,
    pub geometry: Geometry,
}

fn unfold_values<T: Element>(input: &[T], geom: &Geometry) -> Vec<T> {
    let mut out = vec![T::zero(); geom.rows() * geom.cols()];
    geom.for_each_tap(|dst, src| {
        if let Some(src) = src {
            out[dst] = input[src];
        }
    });
    out
}

fn unfold_adjoint<T: Element>(grad_rows: &[T], geom: &Geometry) -> Vec<T> {
    let mut out = vec![T::zero(); geom.input_shape().iter().product()];
    geom.for_each_tap(|dst, src| {
        if let Some(src) = src {
            out[src] += grad_rows[dst];
        }
    });
    out
}

/// Flat offset in `N×C×H_out×W_out` of each `(row, channel)` entry.
fn fold_offset(geom: &Geometry, channels: usize, row: usize, c: usize) -> usize {
    let plane = geom.out_height * geom.out_width;
    let (n, pos) = (row / plane, row % plane);
    (n * channels + c) * plane + pos
}

fn fold_values<T: Element>(rows: &[T], geom: &Geometry, channels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows.len()];
    for row in 0..geom.rows() {
        for c in 0..channels {
            out[fold_offset(geom, channels, row, c)] = rows[row * channels + c];
        }
    }
    out
}

fn fold_adjoint<T: Element>(grad: &[T], geom: &Geometry, channels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); grad.len()];
    for row in 0..geom.rows() {
        for c in 0..channels {
            out[row * channels + c] = grad[fold_offset(geom, channels, row, c)];
        }
    }
    out
}

/// im2col: `N×C×H×W` input to `R×(C·k·k)` receptive-field rows.
pub fn unfold<T: Element>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<UnfoldedFeatureMatrix<T>> {
    let geometry = Geometry::new(input.shape(), kernel, stride, padding)?;
    let data = Tensor::new(
        [geometry.rows(), geometry.cols()],
        unfold_values(input.data(), &geometry),
    )?;
    Ok(UnfoldedFeatureMatrix { data, geometry })
}

/// Reshapes per-position output vectors `R×C_out` into `N×C_out×H_out×W_out`.
pub fn fold<T: Element>(rows: &Tensor<T>, geometry: &Geometry) -> Result<Tensor<T>> {
    let channels = check_fold(rows.shape(), geometry)?;
    Tensor::new(
        geometry.output_shape(channels),
        fold_values(rows.data(), geometry, channels),
    )
}

fn check_fold(shape: &[usize], geometry: &Geometry) -> Result<usize> {
    match *shape {
        [r, c] if r == geometry.rows() => Ok(c),
        _ => Err(Error::Geometry(format!(
            "fold expects {} rows (N={}, {}×{} positions), got shape {shape:?}",
            geometry.rows(),
            geometry.batch,
            geometry.out_height,
            geometry.out_width
        ))),
    }
}

struct Unfold {
    input: Var,
    geometry: Geometry,
}

impl<T: Element> BackwardRule<T> for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(unfold_adjoint(g, &self.geometry))])
    }
}

struct Fold {
    input: Var,
    geometry: Geometry,
    channels: usize,
}

impl<T: Element> BackwardRule<T> for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(fold_adjoint(g, &self.geometry, self.channels))])
    }
}

impl<T: Element> Tape<T> {
    /// Differentiable [`unfold`]; gradients scatter-add back onto every
    /// input position a receptive field covered.
    pub fn unfold(
        &mut self,
        input: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<(Var, Geometry)> {
        let ufm = unfold(self.value(input), kernel, stride, padding)?;
        let geometry = ufm.geometry;
        Ok((self.push(ufm.data, Unfold { input, geometry }), geometry))
    }

    /// Differentiable [`fold`].
    pub fn fold(&mut self, rows: Var, geometry: &Geometry) -> Result<Var> {
        let value = fold(self.value(rows), geometry)?;
        let channels = value.shape()[1];
        Ok(self.push(
            value,
            Fold {
                input: rows,
                geometry: *geometry,
                channels,
            },
        ))
    }
}
