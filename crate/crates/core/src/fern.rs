//! Differentiable random-fern ensemble layer.
//!
//! Each of the `K` ferns looks at a fixed, randomly drawn sequence of `m`
//! columns of an unfolded feature matrix. For row `u` and fern `k`:
//!
//! * the responses are `c[j] = tanh(row[dims[k][j]] − thresholds[k][j])`;
//! * the signs of `c` (positive → 1, otherwise 0, first test most
//!   significant) form an `m`-bit code, and `offsets[k] + code` addresses
//!   a row of the shared lookup table (`K·2^m` rows of `c_out` values);
//! * an instance weight `w` measures how close `|c|` is to all ones.
//!
//! The output row is `Σ_k w_k · lut[idx_k]`. The table address carries no
//! gradient; training signal reaches the input and thresholds through `w`
//! and reaches the table through the gathered rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::costmodel::{OpCounts, OpKind};
use crate::error::{Error, Result};
use crate::spatial;
use crate::tensor::{BackwardContext, BackwardRule, DType, Element, Tape, Tensor, Var};

/// How the instance weight is derived from a fern's responses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum WeightMode {
    /// `‖ |c| − 1 ‖₂`. Zero when the fern is saturated.
    #[default]
    LiteralL2,
    /// `1 − ‖ |c| − 1 ‖₂ / √m`. One when saturated, zero at `c = 0`.
    NormalizedProximity,
    /// `1 − mean(1 − |c|)`.
    MeanL1Proximity,
}

impl WeightMode {
    pub const ALL: [WeightMode; 3] = [
        WeightMode::LiteralL2,
        WeightMode::NormalizedProximity,
        WeightMode::MeanL1Proximity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightMode::LiteralL2 => "literal_l2",
            WeightMode::NormalizedProximity => "normalized_proximity",
            WeightMode::MeanL1Proximity => "mean_l1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown weight mode `{s}`")))
    }
}

impl std::fmt::Display for WeightMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FernConfig {
    /// Number of ferns `K`.
    pub ferns: usize,
    /// Tests per fern `m`.
    pub depth: usize,
    /// Column count of the unfolded input.
    pub in_dim: usize,
    pub out_channels: usize,
    pub weight_mode: WeightMode,
    pub thresholds_trainable: bool,
    pub seed: u64,
}

pub const MAX_DEPTH: usize = 24;

impl FernConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ferns == 0 {
            return Err(Error::Config("fern count must be at least 1".into()));
        }
        if !(1..=MAX_DEPTH).contains(&self.depth) {
            return Err(Error::Config(format!(
                "fern depth {} outside 1..={MAX_DEPTH}",
                self.depth
            )));
        }
        if self.in_dim == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!(
                "in_dim ({}) and out_channels ({}) must be at least 1",
                self.in_dim, self.out_channels
            )));
        }
        let cells = self
            .ferns
            .checked_mul(1usize << self.depth)
            .filter(|&n| n <= u32::MAX as usize);
        if cells.is_none() {
            return Err(Error::Config(format!(
                "{} ferns of depth {} overflow the table index",
                self.ferns, self.depth
            )));
        }
        Ok(())
    }

    /// Cells per fern, `2^m`.
    pub fn cells(&self) -> usize {
        1 << self.depth
    }

    /// Lookup-table rows, `K·2^m`.
    pub fn table_rows(&self) -> usize {
        self.ferns * self.cells()
    }
}

/// Parameters and frozen structure of one fern ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct FernEnsembleLayer<T> {
    config: FernConfig,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    thresholds: Tensor<T>,
    lut: Tensor<T>,
}

/// Draws a fresh layer. Deterministic in `config.seed`.
pub fn fern_init<T: Element>(config: FernConfig) -> Result<FernEnsembleLayer<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (k, m) = (config.ferns, config.depth);
    let dims: Vec<usize> = (0..k * m)
        .map(|_| rng.random_range(0..config.in_dim))
        .collect();
    let standard = Normal::new(0.0, 1.0).expect("valid normal");
    let thresholds: Vec<f64> = (0..k * m).map(|_| standard.sample(&mut rng)).collect();
    let lut_dist = Normal::new(0.0, 1.0 / (k as f64).sqrt()).expect("valid normal");
    let lut: Vec<f64> = (0..config.table_rows() * config.out_channels)
        .map(|_| lut_dist.sample(&mut rng))
        .collect();
    let thresholds = Tensor::from_f64([k, m], &thresholds)?;
    let lut = Tensor::from_f64([config.table_rows(), config.out_channels], &lut)?;
    FernEnsembleLayer::from_parts(config, dims, thresholds, lut)
}

impl<T: Element> FernEnsembleLayer<T> {
    /// Assembles a layer from stored parts, checking every invariant.
    pub fn from_parts(
        config: FernConfig,
        dims: Vec<usize>,
        thresholds: Tensor<T>,
        lut: Tensor<T>,
    ) -> Result<Self> {
        config.validate()?;
        let (k, m) = (config.ferns, config.depth);
        if dims.len() != k * m {
            return Err(Error::Dimension(format!(
                "expected {} split dimensions, got {}",
                k * m,
                dims.len()
            )));
        }
        if let Some(&d) = dims.iter().find(|&&d| d >= config.in_dim) {
            return Err(Error::Config(format!(
                "split dimension {d} outside [0, {})",
                config.in_dim
            )));
        }
        if thresholds.shape() != [k, m] {
            return Err(Error::Dimension(format!(
                "thresholds have shape {:?}, expected [{k}, {m}]",
                thresholds.shape()
            )));
        }
        if lut.shape() != [config.table_rows(), config.out_channels] {
            return Err(Error::Dimension(format!(
                "lookup table has shape {:?}, expected [{}, {}]",
                lut.shape(),
                config.table_rows(),
                config.out_channels
            )));
        }
        let offsets = (0..k).map(|f| f * config.cells()).collect();
        let mut thresholds = thresholds;
        thresholds.set_requires_grad(config.thresholds_trainable);
        let lut = lut.with_requires_grad(true);
        Ok(Self {
            config,
            dims,
            offsets,
            thresholds,
            lut,
        })
    }

    pub fn config(&self) -> &FernConfig {
        &self.config
    }

    /// Split dimensions, `K×m` row-major.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Base table row of each fern, `k·2^m`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn thresholds(&self) -> &Tensor<T> {
        &self.thresholds
    }

    pub fn thresholds_mut(&mut self) -> &mut Tensor<T> {
        &mut self.thresholds
    }

    pub fn lut(&self) -> &Tensor<T> {
        &self.lut
    }

    pub fn lut_mut(&mut self) -> &mut Tensor<T> {
        &mut self.lut
    }

    /// `(thresholds, lut)`, mutably.
    pub fn params_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.thresholds, &mut self.lut)
    }

    fn view<'a>(&'a self, thresholds: &'a [T], lut: &'a [T]) -> Kernel<'a, T> {
        Kernel {
            config: &self.config,
            dims: &self.dims,
            offsets: &self.offsets,
            thresholds,
            lut,
        }
    }
}

/// Stage of the fern forward pass that an operation is attributed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FernPhase {
    /// Threshold subtraction and tanh.
    Response,
    /// Sign tests, bit assembly and offset addition.
    Indexing,
    /// Instance weight.
    Weight,
    /// Fetching lookup-table rows.
    Gather,
    /// Scaling and summing the fetched rows.
    WeightedSum,
}

impl FernPhase {
    pub const ALL: [FernPhase; 5] = [
        FernPhase::Response,
        FernPhase::Indexing,
        FernPhase::Weight,
        FernPhase::Gather,
        FernPhase::WeightedSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FernPhase::Response => "response",
            FernPhase::Indexing => "indexing",
            FernPhase::Weight => "weight",
            FernPhase::Gather => "gather",
            FernPhase::WeightedSum => "weighted_sum",
        }
    }
}

/// Sink for operation counts emitted while the forward kernel runs.
pub trait OpRecorder {
    fn record(&mut self, phase: FernPhase, kind: OpKind, count: u64);
}

impl OpRecorder for () {
    #[inline(always)]
    fn record(&mut self, _: FernPhase, _: OpKind, _: u64) {}
}

/// Operation counts of an executed forward pass, split by phase.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FernOpProfile {
    phases: [OpCounts; 5],
}

impl FernOpProfile {
    pub fn phase(&self, phase: FernPhase) -> OpCounts {
        self.phases[phase as usize]
    }

    pub fn total(&self) -> OpCounts {
        self.phases.iter().copied().sum()
    }
}

impl OpRecorder for FernOpProfile {
    fn record(&mut self, phase: FernPhase, kind: OpKind, count: u64) {
        self.phases[phase as usize].add(kind, count);
    }
}

/// Cached intermediates of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FernForwardContext<T> {
    /// `R×K×m` tanh responses.
    pub responses: Tensor<T>,
    /// `R×K` table rows, each in `[offsets[k], offsets[k] + 2^m)`.
    pub indices: Vec<usize>,
    /// `R×K` instance weights.
    pub weights: Tensor<T>,
}

impl<T: Element> FernForwardContext<T> {
    pub fn rows(&self) -> usize {
        self.responses.shape()[0]
    }

    /// Smallest `|c|` over all responses.
    pub fn min_abs_response(&self) -> f64 {
        self.responses
            .data()
            .iter()
            .map(|c| c.abs().as_f64())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Gradients produced by [`fern_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct FernGradients<T> {
    pub lut: Tensor<T>,
    pub thresholds: Tensor<T>,
    /// Same shape as the unfolded input rows.
    pub rows: Tensor<T>,
}

/// `c[k][j] = tanh(row[dims[k][j]] − thresholds[k][j])` for one row.
pub fn fern_response<T: Element>(row: &[T], layer: &FernEnsembleLayer<T>) -> Result<Tensor<T>> {
    if row.len() != layer.config.in_dim {
        return Err(Error::Dimension(format!(
            "row of length {} for a layer with in_dim {}",
            row.len(),
            layer.config.in_dim
        )));
    }
    let c = layer
        .dims
        .iter()
        .zip(layer.thresholds.data())
        .map(|(&d, &t)| squash(row[d] - t))
        .collect();
    Tensor::new([layer.config.ferns, layer.config.depth], c)
}

/// Table row selected by each fern from responses `c` (`K×m`).
///
/// A positive response sets its bit, zero or negative clears it; the
/// first test of a fern is the most significant bit.
pub fn index_encode<T: Element>(c: &[T], layer: &FernEnsembleLayer<T>) -> Result<Vec<usize>> {
    let (k, m) = (layer.config.ferns, layer.config.depth);
    if c.len() != k * m {
        return Err(Error::Dimension(format!(
            "{} responses for {k} ferns of depth {m}",
            c.len()
        )));
    }
    Ok(c.chunks_exact(m)
        .zip(&layer.offsets)
        .map(|(bits, &offset)| offset + encode_bits(bits))
        .collect())
}

/// Shift-or assembly of sign bits, MSB first.
#[inline]
fn encode_bits<T: Element>(c: &[T]) -> usize {
    c.iter()
        .fold(0usize, |code, &v| (code << 1) | usize::from(v > T::zero()))
}

/// Instance weight of one fern's responses.
pub fn instance_weight<T: Element>(c: &[T], mode: WeightMode) -> T {
    let m = T::of(c.len() as f64);
    match mode {
        WeightMode::LiteralL2 => distance_to_ones(c),
        WeightMode::NormalizedProximity => T::one() - distance_to_ones(c) / m.sqrt(),
        WeightMode::MeanL1Proximity => {
            T::one() - c.iter().map(|&v| T::one() - v.abs()).sum::<T>() / m
        }
    }
}

fn distance_to_ones<T: Element>(c: &[T]) -> T {
    c.iter()
        .map(|&v| {
            let d = v.abs() - T::one();
            d * d
        })
        .sum::<T>()
        .sqrt()
}

/// `sign(v)` with `sign(0) = 0`, the subgradient used for `|v|`.
#[inline]
fn sign<T: Element>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `∂w/∂c[j]` written into `out`; `w` is the value from [`instance_weight`].
fn instance_weight_grad<T: Element>(c: &[T], mode: WeightMode, w: T, out: &mut [T]) {
    let m = T::of(c.len() as f64);
    match mode {
        WeightMode::LiteralL2 | WeightMode::NormalizedProximity => {
            let dist = match mode {
                WeightMode::LiteralL2 => w,
                _ => (T::one() - w) * m.sqrt(),
            };
            if dist <= T::zero() {
                out.fill(T::zero());
                return;
            }
            let scale = match mode {
                WeightMode::LiteralL2 => T::one() / dist,
                _ => -T::one() / (dist * m.sqrt()),
            };
            for (o, &v) in out.iter_mut().zip(c) {
                *o = (v.abs() - T::one()) * sign(v) * scale;
            }
        }
        WeightMode::MeanL1Proximity => {
            for (o, &v) in out.iter_mut().zip(c) {
                *o = sign(v) / m;
            }
        }
    }
}

/// Borrowed view over everything the kernels need.
struct Kernel<'a, T> {
    config: &'a FernConfig,
    dims: &'a [usize],
    offsets: &'a [usize],
    thresholds: &'a [T],
    lut: &'a [T],
}

impl<T: Element> Kernel<'_, T> {
    fn forward<R: OpRecorder>(
        &self,
        rows: &[T],
        n_rows: usize,
        recorder: &mut R,
    ) -> (Vec<T>, FernForwardContext<T>) {
        let (k, m, d, c_out) = (
            self.config.ferns,
            self.config.depth,
            self.config.in_dim,
            self.config.out_channels,
        );
        let mode = self.config.weight_mode;
        let mut out = vec![T::zero(); n_rows * c_out];
        let mut responses = vec![T::zero(); n_rows * k * m];
        let mut indices = vec![0usize; n_rows * k];
        let mut weights = vec![T::zero(); n_rows * k];

        for u in 0..n_rows {
            let row = &rows[u * d..(u + 1) * d];
            let c_row = &mut responses[u * k * m..(u + 1) * k * m];
            for ((c, &dim), &t) in c_row.iter_mut().zip(self.dims).zip(self.thresholds) {
                *c = squash(row[dim] - t);
            }
            let out_row = &mut out[u * c_out..(u + 1) * c_out];
            for f in 0..k {
                let c = &c_row[f * m..(f + 1) * m];
                let idx = self.offsets[f] + encode_bits(c);
                let w = instance_weight(c, mode);
                indices[u * k + f] = idx;
                weights[u * k + f] = w;
                let entry = &self.lut[idx * c_out..(idx + 1) * c_out];
                for (o, &e) in out_row.iter_mut().zip(entry) {
                    *o += w * e;
                }
            }
        }
        record_forward(self.config, n_rows as u64, recorder);

        let ctx = FernForwardContext {
            responses: Tensor::new([n_rows, k, m], responses).expect("sized above"),
            indices,
            weights: Tensor::new([n_rows, k], weights).expect("sized above"),
        };
        (out, ctx)
    }

    /// Returns `(grad_lut, grad_thresholds, grad_rows)`.
    fn backward(
        &self,
        ctx: &FernForwardContext<T>,
        grad_out: &[T],
        want_rows: bool,
        want_thresholds: bool,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (k, m, d, c_out) = (
            self.config.ferns,
            self.config.depth,
            self.config.in_dim,
            self.config.out_channels,
        );
        let n_rows = ctx.rows();
        let mode = self.config.weight_mode;
        let mut g_lut = vec![T::zero(); self.lut.len()];
        let mut g_t = vec![T::zero(); k * m];
        let mut g_rows = vec![T::zero(); if want_rows { n_rows * d } else { 0 }];
        let mut dwdc = vec![T::zero(); m];
        let responses = ctx.responses.data();
        let weights = ctx.weights.data();
        let need_input_side = want_rows || want_thresholds;

        for u in 0..n_rows {
            let g = &grad_out[u * c_out..(u + 1) * c_out];
            for f in 0..k {
                let idx = ctx.indices[u * k + f];
                let w = weights[u * k + f];
                let entry = &self.lut[idx * c_out..(idx + 1) * c_out];
                let slot = &mut g_lut[idx * c_out..(idx + 1) * c_out];
                for (s, &gv) in slot.iter_mut().zip(g) {
                    *s += w * gv;
                }
                let dw = dot(entry, g);
                if !need_input_side {
                    continue;
                }
                let c = &responses[(u * k + f) * m..(u * k + f + 1) * m];
                instance_weight_grad(c, mode, w, &mut dwdc);
                for j in 0..m {
                    let dz = dw * dwdc[j] * (T::one() - c[j] * c[j]);
                    if want_rows {
                        g_rows[u * d + self.dims[f * m + j]] += dz;
                    }
                    g_t[f * m + j] -= dz;
                }
            }
        }
        (g_lut, g_t, g_rows)
    }
}

/// `tanh(z)`. Single precision goes through a double-precision
/// exponential, which is several times faster than the single-precision
/// `tanh` in common C libraries and stays within one unit in the last place
/// of the correctly rounded result.
#[inline]
fn squash<T: Element>(z: T) -> T {
    if T::DTYPE != DType::F32 {
        return z.tanh();
    }
    let x = z.as_f64();
    let y = if x.abs() < 1e-4 {
        // cancellation in e^{2x} − 1; the series error is below x⁵
        x - x * x * x / 3.0
    } else if x.abs() > 20.0 {
        x.signum()
    } else {
        let e = (2.0 * x).exp();
        (e - 1.0) / (e + 1.0)
    };
    T::of(y)
}

/// Inner product with eight interleaved partial sums, so the reduction is
/// not one serial dependency chain. The summation order is fixed.
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Per-row operation counts of the forward pass, attributed by phase.
fn record_forward<R: OpRecorder>(config: &FernConfig, rows: u64, rec: &mut R) {
    let k = config.ferns as u64;
    let km = k * config.depth as u64;
    let c_out = config.out_channels as u64;
    use FernPhase::*;
    use OpKind::*;

    rec.record(Response, MemReadWords, 2 * km * rows);
    rec.record(Response, FloatAdd, km * rows);
    rec.record(Response, SpecialFn, km * rows);

    rec.record(Indexing, Compare, km * rows);
    rec.record(Indexing, IntAddShift, km * rows);

    match config.weight_mode {
        WeightMode::LiteralL2 | WeightMode::NormalizedProximity => {
            // |c| − 1, squaring, accumulation, sqrt
            rec.record(Weight, FloatAdd, 2 * km * rows);
            rec.record(Weight, FloatMul, km * rows);
            rec.record(Weight, SpecialFn, k * rows);
            if config.weight_mode == WeightMode::NormalizedProximity {
                rec.record(Weight, FloatMul, k * rows);
                rec.record(Weight, FloatAdd, k * rows);
            }
        }
        WeightMode::MeanL1Proximity => {
            rec.record(Weight, FloatAdd, 2 * km * rows + k * rows);
            rec.record(Weight, FloatMul, k * rows);
        }
    }

    rec.record(Gather, MemReadWords, k * c_out * rows);

    rec.record(WeightedSum, FloatMul, k * c_out * rows);
    rec.record(WeightedSum, FloatAdd, k * c_out * rows);
    rec.record(WeightedSum, MemWriteWords, c_out * rows);
}

/// Closed-form forward counts for `rows` unfolded rows.
pub fn forward_op_profile(config: &FernConfig, rows: usize) -> FernOpProfile {
    let mut profile = FernOpProfile::default();
    record_forward(config, rows as u64, &mut profile);
    profile
}

fn check_rows<T: Element>(rows: &Tensor<T>, config: &FernConfig) -> Result<usize> {
    match *rows.shape() {
        [r, d] if d == config.in_dim => Ok(r),
        _ => Err(Error::Dimension(format!(
            "fern layer with in_dim {} given rows of shape {:?}",
            config.in_dim,
            rows.shape()
        ))),
    }
}

/// Weighted lookup-table sums for every row of an unfolded matrix (`R×D`).
pub fn fern_forward<T: Element>(
    rows: &Tensor<T>,
    layer: &FernEnsembleLayer<T>,
) -> Result<(Tensor<T>, FernForwardContext<T>)> {
    let n = check_rows(rows, &layer.config)?;
    let kernel = layer.view(layer.thresholds.data(), layer.lut.data());
    let (out, ctx) = kernel.forward(rows.data(), n, &mut ());
    Ok((Tensor::new([n, layer.config.out_channels], out)?, ctx))
}

/// [`fern_forward`] that also tallies the operations it executes.
pub fn fern_forward_instrumented<T: Element>(
    rows: &Tensor<T>,
    layer: &FernEnsembleLayer<T>,
) -> Result<(Tensor<T>, FernForwardContext<T>, FernOpProfile)> {
    let n = check_rows(rows, &layer.config)?;
    let kernel = layer.view(layer.thresholds.data(), layer.lut.data());
    let mut profile = FernOpProfile::default();
    let (out, ctx) = kernel.forward(rows.data(), n, &mut profile);
    Ok((
        Tensor::new([n, layer.config.out_channels], out)?,
        ctx,
        profile,
    ))
}

/// Gradients of a scalar loss given `grad_out = ∂L/∂out` (`R×c_out`).
pub fn fern_backward<T: Element>(
    ctx: &FernForwardContext<T>,
    grad_out: &Tensor<T>,
    layer: &FernEnsembleLayer<T>,
) -> Result<FernGradients<T>> {
    let cfg = &layer.config;
    let n = ctx.rows();
    if grad_out.shape() != [n, cfg.out_channels]
        || ctx.responses.shape() != [n, cfg.ferns, cfg.depth]
        || ctx.indices.len() != n * cfg.ferns
    {
        return Err(Error::Contract(format!(
            "forward context for {n} rows does not match gradient of shape {:?}",
            grad_out.shape()
        )));
    }
    let kernel = layer.view(layer.thresholds.data(), layer.lut.data());
    let (g_lut, g_t, g_rows) = kernel.backward(ctx, grad_out.data(), true, true);
    Ok(FernGradients {
        lut: Tensor::new(layer.lut.shape().to_vec(), g_lut)?,
        thresholds: Tensor::new([cfg.ferns, cfg.depth], g_t)?,
        rows: Tensor::new([n, cfg.in_dim], g_rows)?,
    })
}

/// Convolution drop-in: `fold(fern_forward(unfold(input)))`.
pub fn fern_conv_layer<T: Element>(
    input: &Tensor<T>,
    layer: &FernEnsembleLayer<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geometry = spatial::Geometry::new(input.shape(), kernel, stride, padding)?;
    if geometry.cols() != layer.config.in_dim {
        return Err(Error::Geometry(format!(
            "fern layer expects {} columns but {}×{}×{} receptive fields have {}",
            layer.config.in_dim,
            geometry.channels,
            kernel,
            kernel,
            geometry.cols()
        )));
    }
    let ufm = spatial::unfold(input, kernel, stride, padding)?;
    let (rows, _) = fern_forward(&ufm.data, layer)?;
    spatial::fold(&rows, &ufm.geometry)
}

struct FernOp<T> {
    rows: Var,
    thresholds: Var,
    lut: Var,
    config: FernConfig,
    dims: Vec<usize>,
    offsets: Vec<usize>,
    ctx: FernForwardContext<T>,
}

impl<T: Element> BackwardRule<T> for FernOp<T> {
    fn name(&self) -> &'static str {
        "fern"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.rows, self.thresholds, self.lut]
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let kernel = Kernel {
            config: &self.config,
            dims: &self.dims,
            offsets: &self.offsets,
            thresholds: ctx.value(self.thresholds).data(),
            lut: ctx.value(self.lut).data(),
        };
        let want_rows = ctx.needs_grad(self.rows);
        let want_t = ctx.needs_grad(self.thresholds);
        let (g_lut, g_t, g_rows) = kernel.backward(&self.ctx, g, want_rows, want_t);
        Ok(vec![
            want_rows.then_some(g_rows),
            want_t.then_some(g_t),
            Some(g_lut),
        ])
    }

    fn kink_distance(&self) -> Option<f64> {
        Some(self.ctx.min_abs_response())
    }
}

impl<T: Element> Tape<T> {
    /// Records a fern forward pass over unfolded `rows`.
    ///
    /// `layer` supplies the frozen structure (config, split dimensions,
    /// offsets); the threshold and table values are read from the
    /// `thresholds` and `lut` vars so that they can be tape leaves.
    pub fn fern(
        &mut self,
        rows: Var,
        thresholds: Var,
        lut: Var,
        layer: &FernEnsembleLayer<T>,
    ) -> Result<Var> {
        let cfg = layer.config();
        let n = check_rows(self.value(rows), cfg)?;
        let (t, l) = (self.value(thresholds), self.value(lut));
        if t.shape() != layer.thresholds.shape() || l.shape() != layer.lut.shape() {
            return Err(Error::Dimension(format!(
                "fern parameters of shape {:?} / {:?} for a layer expecting {:?} / {:?}",
                t.shape(),
                l.shape(),
                layer.thresholds.shape(),
                layer.lut.shape()
            )));
        }
        let kernel = layer.view(t.data(), l.data());
        let (out, ctx) = kernel.forward(self.value(rows).data(), n, &mut ());
        let value = Tensor::new([n, cfg.out_channels], out)?;
        Ok(self.push(
            value,
            FernOp {
                rows,
                thresholds,
                lut,
                config: cfg.clone(),
                dims: layer.dims.clone(),
                offsets: layer.offsets.clone(),
                ctx,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_precision_squash_matches_tanh() {
        let mut worst = 0u32;
        for i in -200_000..=200_000 {
            let z = i as f32 * 1e-4 + 1e-7;
            // double-precision tanh rounded once is the reference
            let (a, b) = (squash(z), (z as f64).tanh() as f32);
            worst = worst.max(a.to_bits().abs_diff(b.to_bits()));
        }
        for z in [1e-30f32, -1e-8, 3e-5, 25.0, -90.0, 0.0] {
            assert!(
                (squash(z) - z.tanh()).abs() <= f32::EPSILON * z.tanh().abs(),
                "{z}"
            );
        }
        assert!(worst <= 1, "{worst} ulp");
        assert_eq!(squash(0.5f64), 0.5f64.tanh());
    }

    fn config(ferns: usize, depth: usize, in_dim: usize, out_channels: usize) -> FernConfig {
        FernConfig {
            ferns,
            depth,
            in_dim,
            out_channels,
            weight_mode: WeightMode::LiteralL2,
            thresholds_trainable: true,
            seed: 7,
        }
    }

    fn layer_with(cfg: FernConfig, dims: Vec<usize>, thresholds: &[f64]) -> FernEnsembleLayer<f64> {
        let (k, m) = (cfg.ferns, cfg.depth);
        let lut_len = cfg.table_rows() * cfg.out_channels;
        let lut: Vec<f64> = (0..lut_len).map(|i| 0.1 * i as f64 - 0.3).collect();
        FernEnsembleLayer::from_parts(
            cfg.clone(),
            dims,
            Tensor::from_f64([k, m], thresholds).unwrap(),
            Tensor::from_f64([cfg.table_rows(), cfg.out_channels], &lut).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn init_shapes_and_offsets() {
        let layer: FernEnsembleLayer<f32> = fern_init(config(24, 3, 75, 64)).unwrap();
        assert_eq!(layer.lut().shape(), &[192, 64]);
        assert_eq!(layer.thresholds().shape(), &[24, 3]);
        let expected: Vec<usize> = (0..24).map(|k| k * 8).collect();
        assert_eq!(layer.offsets(), expected.as_slice());
        assert!(layer.dims().iter().all(|&d| d < 75));
    }

    #[test]
    fn init_single_dimension_is_forced() {
        let layer: FernEnsembleLayer<f64> = fern_init(config(1, 1, 1, 1)).unwrap();
        assert_eq!(layer.dims(), &[0]);
    }

    #[test]
    fn init_is_deterministic() {
        let a: FernEnsembleLayer<f64> = fern_init(config(6, 4, 30, 5)).unwrap();
        let b: FernEnsembleLayer<f64> = fern_init(config(6, 4, 30, 5)).unwrap();
        assert_eq!(a, b);
        let mut other = config(6, 4, 30, 5);
        other.seed = 8;
        let c: FernEnsembleLayer<f64> = fern_init(other).unwrap();
        assert_ne!(a.dims(), c.dims());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            config(0, 3, 4, 4),
            config(2, 0, 4, 4),
            config(2, 25, 4, 4),
            config(2, 3, 0, 4),
            config(2, 3, 4, 0),
            config(usize::MAX / 2, 24, 4, 4),
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        assert!(WeightMode::parse("soft").is_err());
    }

    #[test]
    fn from_parts_rejects_out_of_range_dims() {
        let cfg = config(1, 2, 3, 1);
        let err = FernEnsembleLayer::<f64>::from_parts(
            cfg,
            vec![0, 3],
            Tensor::zeros([1, 2]),
            Tensor::zeros([4, 1]),
        );
        assert!(err.is_err());
    }

    #[test]
    fn response_at_thresholds_is_zero() {
        let layer = layer_with(config(2, 2, 3, 1), vec![0, 1, 2, 0], &[0.3, -0.2, 1.5, 0.3]);
        let c = fern_response(&[0.3, -0.2, 1.5], &layer).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn response_values() {
        // row[d] − t = (0.5, −1, 2)
        let layer = layer_with(config(1, 3, 3, 1), vec![0, 1, 2], &[0.0, 0.0, 0.0]);
        let c = fern_response(&[0.5, -1.0, 2.0], &layer).unwrap();
        let tanh = |x: f64| (x.exp() - (-x).exp()) / (x.exp() + (-x).exp());
        for (got, want) in c.data().iter().zip([tanh(0.5), tanh(-1.0), tanh(2.0)]) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in c.data().iter().zip([0.46212, -0.76159, 0.96403]) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn response_saturates_in_f32() {
        let cfg = config(2, 3, 1, 1);
        let layer: FernEnsembleLayer<f32> = FernEnsembleLayer::from_parts(
            cfg,
            vec![0; 6],
            Tensor::zeros([2, 3]),
            Tensor::zeros([16, 1]),
        )
        .unwrap();
        let c = fern_response(&[100.0f32], &layer).unwrap();
        assert!(c.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn index_encoding_examples() {
        let layer = layer_with(config(3, 3, 1, 1), vec![0; 9], &[0.0; 9]);
        let all_negative = [-0.5; 9];
        assert_eq!(index_encode(&all_negative, &layer).unwrap(), vec![0, 8, 16]);

        let c = [0.9, 0.8, 0.7, -1.0, -1.0, -1.0, 0.9, -0.2, 0.1];
        let idx = index_encode(&c, &layer).unwrap();
        assert_eq!(idx[0], 7);
        assert_eq!(idx[2], 16 + 5);
        // zero maps to a cleared bit
        assert_eq!(
            index_encode(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &layer).unwrap()[0],
            1
        );
    }

    #[test]
    fn instance_weight_examples() {
        let sat = [1.0, -1.0, 1.0];
        assert_eq!(instance_weight(&sat, WeightMode::LiteralL2), 0.0);
        assert_eq!(instance_weight(&sat, WeightMode::NormalizedProximity), 1.0);
        assert_eq!(instance_weight(&sat, WeightMode::MeanL1Proximity), 1.0);

        let zero = [0.0; 3];
        assert!((instance_weight(&zero, WeightMode::LiteralL2) - 3f64.sqrt()).abs() < 1e-15);
        assert!(instance_weight(&zero, WeightMode::NormalizedProximity).abs() < 1e-15);
        assert_eq!(instance_weight(&zero, WeightMode::MeanL1Proximity), 0.0);

        let half = [0.5, -0.5, 1.0];
        assert!((instance_weight(&half, WeightMode::LiteralL2) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((instance_weight(&half, WeightMode::LiteralL2) - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn single_fern_hand_calculation() {
        let mut cfg = config(1, 1, 1, 2);
        cfg.weight_mode = WeightMode::LiteralL2;
        let layer: FernEnsembleLayer<f64> = FernEnsembleLayer::from_parts(
            cfg,
            vec![0],
            Tensor::zeros([1, 1]),
            Tensor::from_f64([2, 2], &[10.0, 20.0, 3.0, -4.0]).unwrap(),
        )
        .unwrap();
        let rows = Tensor::from_f64([1, 1], &[0.5]).unwrap();
        let (out, ctx) = fern_forward(&rows, &layer).unwrap();
        let c = 0.5f64.tanh();
        let w = (c - 1.0).abs();
        assert_eq!(ctx.indices, vec![1]);
        assert!((w - 0.53788).abs() < 1e-5);
        assert!((ctx.weights.data()[0] - w).abs() < 1e-15);
        assert!((out.data()[0] - 3.0 * w).abs() < 1e-15);
        assert!((out.data()[1] + 4.0 * w).abs() < 1e-15);
    }

    #[test]
    fn saturated_literal_output_is_zero() {
        let layer = layer_with(config(4, 3, 2, 3), vec![0; 12], &[0.0; 12]);
        let rows = Tensor::from_f64([2, 2], &[80.0, 80.0, -80.0, -80.0]).unwrap();
        let (out, _) = fern_forward(&rows, &layer).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_zero_gradient() {
        let layer: FernEnsembleLayer<f64> = fern_init(config(3, 2, 4, 2)).unwrap();
        let rows = Tensor::from_f64([2, 4], &[0.1, -0.4, 0.9, 1.3, -0.7, 0.2, 0.5, -1.1]).unwrap();
        let (_, ctx) = fern_forward(&rows, &layer).unwrap();
        let g = fern_backward(&ctx, &Tensor::zeros([2, 2]), &layer).unwrap();
        assert!(g.lut.data().iter().all(|&v| v == 0.0));
        assert!(g.thresholds.data().iter().all(|&v| v == 0.0));
        assert!(g.rows.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_single_row_lut_gradient() {
        let layer: FernEnsembleLayer<f64> = fern_init(config(1, 3, 4, 2)).unwrap();
        let rows = Tensor::from_f64([1, 4], &[0.3, -0.8, 1.7, 0.05]).unwrap();
        let (_, ctx) = fern_forward(&rows, &layer).unwrap();
        let grad_out = Tensor::from_f64([1, 2], &[0.7, -1.2]).unwrap();
        let g = fern_backward(&ctx, &grad_out, &layer).unwrap();
        let idx = ctx.indices[0];
        let w = ctx.weights.data()[0];
        for (row, chunk) in g.lut.data().chunks(2).enumerate() {
            if row == idx {
                assert_eq!(chunk, &[w * 0.7, w * -1.2]);
            } else {
                assert_eq!(chunk, &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn backward_rejects_mismatched_context() {
        let layer: FernEnsembleLayer<f64> = fern_init(config(2, 2, 3, 2)).unwrap();
        let rows = Tensor::zeros([3, 3]);
        let (_, ctx) = fern_forward(&rows, &layer).unwrap();
        let err = fern_backward(&ctx, &Tensor::zeros([2, 2]), &layer).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let layer: FernEnsembleLayer<f64> = fern_init(config(2, 2, 3, 2)).unwrap();
        assert!(matches!(
            fern_forward(&Tensor::zeros([3, 4]), &layer),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_layer_shape_contract() {
        let layer: FernEnsembleLayer<f32> = fern_init(config(24, 3, 75, 64)).unwrap();
        let x = Tensor::<f32>::zeros([1, 3, 32, 32]);
        let y = fern_conv_layer(&x, &layer, 5, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 64, 16, 16]);
        assert!(matches!(
            fern_conv_layer(&x, &layer, 3, 2, 1),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn instrumented_counts_match_closed_form() {
        for mode in WeightMode::ALL {
            let mut cfg = config(5, 3, 12, 4);
            cfg.weight_mode = mode;
            let layer: FernEnsembleLayer<f64> = fern_init(cfg.clone()).unwrap();
            let rows = Tensor::from_f64(
                [7, 12],
                &(0..84).map(|i| (i as f64).sin()).collect::<Vec<_>>(),
            )
            .unwrap();
            let (_, _, profile) = fern_forward_instrumented(&rows, &layer).unwrap();
            assert_eq!(profile, forward_op_profile(&cfg, 7));
            assert_eq!(profile.phase(FernPhase::Indexing).get(OpKind::FloatMul), 0);
            assert_eq!(profile.phase(FernPhase::Gather).get(OpKind::FloatMul), 0);
        }
    }
}
