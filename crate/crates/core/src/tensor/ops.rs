//! Differentiable primitives recorded on a [`Tape`].

use super::tape::{BackwardContext, BackwardRule, Tape, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

struct Elementwise {
    kind: BinaryKind,
    lhs: Var,
    rhs: Var,
    broadcast: Broadcast,
}

impl<T: Element> BackwardRule<T> for Elementwise {
    fn name(&self) -> &'static str {
        "elementwise"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.lhs, self.rhs]
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let a = ctx.value(self.lhs).data();
        let b = ctx.value(self.rhs).data();
        let pick = |x: &[T], i: usize| if x.len() == 1 { x[0] } else { x[i] };
        // full-size partials, then collapsed onto scalar operands
        let (ga, gb): (Vec<T>, Vec<T>) = match self.kind {
            BinaryKind::Add => (g.to_vec(), g.to_vec()),
            BinaryKind::Sub => (g.to_vec(), g.iter().map(|&x| -x).collect()),
            BinaryKind::Mul => (
                g.iter().enumerate().map(|(i, &x)| x * pick(b, i)).collect(),
                g.iter().enumerate().map(|(i, &x)| x * pick(a, i)).collect(),
            ),
        };
        let collapse = |v: Vec<T>| vec![v.into_iter().sum::<T>()];
        Ok(match self.broadcast {
            Broadcast::Same => vec![Some(ga), Some(gb)],
            Broadcast::LhsScalar => vec![Some(collapse(ga)), Some(gb)],
            Broadcast::RhsScalar => vec![Some(ga), Some(collapse(gb))],
        })
    }
}

struct Reduce {
    kind: ReduceKind,
    input: Var,
    // (outer, axis extent, inner); outer = inner = 1 and extent = numel for a full reduction
    split: (usize, usize, usize),
}

impl<T: Element> BackwardRule<T> for Reduce {
    fn name(&self) -> &'static str {
        "reduce"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (outer, extent, inner) = self.split;
        let scale = match self.kind {
            ReduceKind::Sum => T::one(),
            ReduceKind::Mean => T::one() / T::of(extent as f64),
        };
        let mut out = vec![T::zero(); outer * extent * inner];
        for o in 0..outer {
            for a in 0..extent {
                for i in 0..inner {
                    out[(o * extent + a) * inner + i] = g[o * inner + i] * scale;
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

struct MatMul {
    lhs: Var,
    rhs: Var,
    dims: (usize, usize, usize),
}

impl<T: Element> BackwardRule<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.lhs, self.rhs]
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (r, k, c) = self.dims;
        let a = ctx.value(self.lhs).data();
        let b = ctx.value(self.rhs).data();
        let ga = ctx.needs_grad(self.lhs).then(|| {
            // g · bᵀ
            let mut out = vec![T::zero(); r * k];
            T::gemm(r, c, k, g, false, b, true, &mut out, false);
            out
        });
        let gb = ctx.needs_grad(self.rhs).then(|| {
            // aᵀ · g
            let mut out = vec![T::zero(); k * c];
            T::gemm(k, r, c, a, true, g, false, &mut out, false);
            out
        });
        Ok(vec![ga, gb])
    }
}

struct Tanh {
    input: Var,
}

impl<T: Element> BackwardRule<T> for Tanh {
    fn name(&self) -> &'static str {
        "tanh"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let y = ctx.output().data();
        Ok(vec![Some(
            g.iter()
                .zip(y)
                .map(|(&g, &y)| g * (T::one() - y * y))
                .collect(),
        )])
    }
}

struct Relu<T> {
    input: Var,
    min_abs_input: T,
}

impl<T: Element> BackwardRule<T> for Relu<T> {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let x = ctx.value(self.input).data();
        Ok(vec![Some(
            g.iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect(),
        )])
    }

    fn kink_distance(&self) -> Option<f64> {
        Some(self.min_abs_input.as_f64())
    }
}

struct Reshape {
    input: Var,
}

impl<T: Element> BackwardRule<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(g.to_vec())])
    }
}

struct Scale<T> {
    input: Var,
    factor: T,
}

impl<T: Element> BackwardRule<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, _ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(g.iter().map(|&x| x * self.factor).collect())])
    }
}

impl<T: Element> Tape<T> {
    /// Elementwise binary op on equal shapes, or with one scalar operand.
    pub fn elementwise(&mut self, lhs: Var, rhs: Var, kind: BinaryKind) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        let broadcast = if a.shape() == b.shape() {
            Broadcast::Same
        } else if a.is_scalar() {
            Broadcast::LhsScalar
        } else if b.is_scalar() {
            Broadcast::RhsScalar
        } else {
            return Err(Error::Dimension(format!(
                "cannot broadcast {:?} with {:?}",
                a.shape(),
                b.shape()
            )));
        };
        let shape = match broadcast {
            Broadcast::LhsScalar => b.shape().to_vec(),
            _ => a.shape().to_vec(),
        };
        let n = a.numel().max(b.numel());
        let (ad, bd) = (a.data(), b.data());
        let pick = |x: &[T], i: usize| if x.len() == 1 { x[0] } else { x[i] };
        let data: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (pick(ad, i), pick(bd, i));
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Elementwise {
                kind,
                lhs,
                rhs,
                broadcast,
            },
        ))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.elementwise(lhs, rhs, BinaryKind::Add)
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.elementwise(lhs, rhs, BinaryKind::Sub)
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.elementwise(lhs, rhs, BinaryKind::Mul)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|x| x * factor);
        self.push(value, Scale { input, factor })
    }

    /// Sum or mean over one axis, or over everything when `axis` is `None`
    /// (giving a rank-0 result).
    pub fn reduce(&mut self, input: Var, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape();
        let (split, out_shape) = match axis {
            None => ((1, x.numel(), 1), Vec::new()),
            Some(ax) if ax < shape.len() => {
                let outer = shape[..ax].iter().product();
                let inner = shape[ax + 1..].iter().product();
                let mut out_shape = shape.to_vec();
                out_shape.remove(ax);
                ((outer, shape[ax], inner), out_shape)
            }
            Some(ax) => {
                return Err(Error::Dimension(format!(
                    "axis {ax} out of range for shape {shape:?}"
                )))
            }
        };
        let (outer, extent, inner) = split;
        let data = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                for i in 0..inner {
                    out[o * inner + i] += data[(o * extent + a) * inner + i];
                }
            }
        }
        if kind == ReduceKind::Mean {
            let n = T::of(extent as f64);
            out.iter_mut().for_each(|v| *v /= n);
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Reduce { kind, input, split }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.reduce(input, ReduceKind::Sum, None)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        self.reduce(input, ReduceKind::Mean, None)
    }

    /// `[R×K] · [K×C] → [R×C]`.
    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Dimension(format!(
                "matmul of {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (r, k, c) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        T::gemm(r, k, c, a.data(), false, b.data(), false, &mut out, false);
        let value = Tensor::new([r, c], out)?;
        Ok(self.push(
            value,
            MatMul {
                lhs,
                rhs,
                dims: (r, k, c),
            },
        ))
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| x.tanh());
        self.push(value, Tanh { input })
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let min_abs_input = x.data().iter().map(|v| v.abs()).fold(T::infinity(), T::min);
        let value = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            value,
            Relu {
                input,
                min_abs_input,
            },
        )
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::new(shape, x.data().to_vec())?;
        Ok(self.push(value, Reshape { input }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: &[f64]) -> Var {
        tape.leaf(
            Tensor::from_f64(shape.to_vec(), data)
                .unwrap()
                .with_requires_grad(true),
        )
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let eye = leaf(&mut tape, &[2, 2], &[1., 0., 0., 1.]);
        let b = leaf(&mut tape, &[2, 2], &[1., 2., 3., 4.]);
        let p = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

        let a = leaf(&mut tape, &[1, 2], &[1., 2.]);
        let c = leaf(&mut tape, &[2, 1], &[3., 4.]);
        let d = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(d).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, &[2, 3], &[0.; 6]);
        let b = leaf(&mut tape, &[2, 3], &[0.; 6]);
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn tanh_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0, 0.5, 20.0]));
        let y = tape.tanh(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        // (e^x - e^-x) / (e^x + e^-x) at x = 0.5
        let e = (0.5f64).exp();
        let reference = (e - 1.0 / e) / (e + 1.0 / e);
        assert!((v[1] as f64 - reference).abs() < 1e-6);
        assert!((v[1] as f64 - 0.46212).abs() < 1e-5);
        assert_eq!(v[2], 1.0);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, &[2], &[1., 2.]);
        let b = leaf(&mut tape, &[2], &[3., 4.]);
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4., 6.]);

        let two = tape.leaf(Tensor::scalar(2.0));
        let v = leaf(&mut tape, &[3], &[1., 2., 3.]);
        let m = tape.mul(two, v).unwrap();
        assert_eq!(tape.value(m).data(), &[2., 4., 6.]);
        assert_eq!(tape.value(m).shape(), &[3]);

        let w = leaf(&mut tape, &[4], &[1., 2., 3., 4.]);
        let mean = tape.mean(w).unwrap();
        assert_eq!(tape.value(mean).item().unwrap(), 2.5);

        let bad = leaf(&mut tape, &[3], &[0.; 3]);
        assert!(matches!(tape.add(a, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn reduce_along_axis() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let rows = tape.reduce(x, ReduceKind::Sum, Some(1)).unwrap();
        assert_eq!(tape.value(rows).data(), &[6., 15.]);
        let cols = tape.reduce(x, ReduceKind::Mean, Some(0)).unwrap();
        assert_eq!(tape.value(cols).data(), &[2.5, 3.5, 4.5]);
        let loss = tape.sum(cols).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.5; 6]);
    }

    #[test]
    fn backward_sum_and_tanh() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[3], &[0.; 3]);
        let loss = tape.sum(x).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[1., 1., 1.]);

        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[3], &[0.; 3]);
        let t = tape.tanh(x);
        let loss = tape.sum(t).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[1., 1., 1.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[3], &[0.; 3]);
        let t = tape.tanh(x);
        assert!(matches!(tape.backward(t), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        // loss = sum(x * x) + sum(3x)  =>  d/dx = 2x + 3
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[2], &[1.5, -2.0]);
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0);
        let total = tape.add(sq, lin).unwrap();
        let loss = tape.sum(total).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0, -1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[3], &[-1., 0., 2.]);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0., 0., 2.]);
        let loss = tape.sum(r).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[0., 0., 1.]);
        assert_eq!(tape.kink_distance(), Some(0.0));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let x = leaf(&mut tape, &[2], &[3.0, 4.0]);
        let p = tape.mul(c, x).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
    }
}
