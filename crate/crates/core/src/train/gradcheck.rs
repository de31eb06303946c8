//! Finite-difference verification of the analytic gradients.
//!
//! Every check compares tape gradients against central differences
//! `(f(x+ε) − f(x−ε)) / 2ε` for every coordinate of every input and
//! parameter. The error of one coordinate is `|analytic − numeric| /
//! max(1, |numeric|)`; a report carries the worst one.
//!
//! Fern layers are only piecewise smooth: the table address jumps when a
//! response changes sign. Samples are therefore redrawn until every
//! non-smooth point on the tape (fern responses, relu inputs) is at least
//! `margin` away from its kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{build_model, BlockSpec, FernSettings, LayerSpec, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::fern::{fern_init, FernConfig, FernEnsembleLayer, WeightMode};
use crate::layers::{BatchNorm, ConvGeometry, NormMode};
use crate::tensor::{DType, ReduceKind, Tape, Tensor, Var};

/// Draws allowed before giving up on finding a margin-satisfying sample.
pub const MAX_DRAWS: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// `(input, element)` of the worst coordinate.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    fn update(&mut self, input: usize, element: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        // NaN compares false, so force it to win
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = err;
            self.worst = (input, element);
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || other.max_rel_error.is_nan() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks `build`, a scalar-valued graph of `inputs`, at `inputs`.
///
/// Every input is recorded as a leaf requiring a gradient.
pub fn grad_check<F>(inputs: &[Tensor<f64>], epsilon: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let out = build(&mut tape, &vars)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::Contract(
                "gradient check needs a scalar output".into(),
            ));
        }
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    drop(tape);

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, analytic) in analytic.iter().enumerate() {
        for j in 0..probe[i].numel() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + epsilon;
            let (t, _, o) = eval(&probe)?;
            let plus = t.value(o).item()?;
            probe[i].data_mut()[j] = orig - epsilon;
            let (t, _, o) = eval(&probe)?;
            let minus = t.value(o).item()?;
            probe[i].data_mut()[j] = orig;
            report.update(i, j, analytic[j], (plus - minus) / (2.0 * epsilon));
        }
    }
    Ok(report)
}

/// Checks a whole network's cross-entropy gradient with respect to every
/// parameter (input index = parameter position) and the input images
/// (last index). Normalization runs in train mode.
pub fn grad_check_model(
    model: &mut Model<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    epsilon: f64,
) -> Result<GradCheckReport> {
    fn loss_of(model: &mut Model<f64>, images: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let fwd = model.forward(&mut tape, x, NormMode::Train)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
        tape.value(loss).item()
    }

    let mut tape = Tape::new();
    let x = tape.leaf(images.clone().with_requires_grad(true));
    let fwd = model.forward(&mut tape, x, NormMode::Train)?;
    let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = fwd
        .params
        .iter()
        .zip(model.parameters())
        .map(|(v, (_, t))| {
            grads
                .get(*v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    analytic.push(grads.get(x).map(<[f64]>::to_vec).unwrap_or_default());

    let mut report = GradCheckReport::default();
    let n_params = analytic.len() - 1;
    for (i, analytic) in analytic.iter().enumerate().take(n_params) {
        if !model.parameters()[i].1.requires_grad() {
            continue;
        }
        for (j, &a) in analytic.iter().enumerate() {
            let orig = model.parameters()[i].1.data()[j];
            model.parameters_mut()[i].data_mut()[j] = orig + epsilon;
            let plus = loss_of(model, images, labels)?;
            model.parameters_mut()[i].data_mut()[j] = orig - epsilon;
            let minus = loss_of(model, images, labels)?;
            model.parameters_mut()[i].data_mut()[j] = orig;
            report.update(i, j, a, (plus - minus) / (2.0 * epsilon));
        }
    }
    let mut probe = images.clone();
    for (j, &a) in analytic[n_params].iter().enumerate() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + epsilon;
        let plus = loss_of(model, &probe, labels)?;
        probe.data_mut()[j] = orig - epsilon;
        let minus = loss_of(model, &probe, labels)?;
        probe.data_mut()[j] = orig;
        report.update(n_params, j, a, (plus - minus) / (2.0 * epsilon));
    }
    Ok(report)
}

/// Small self-contained graphs covering every differentiable layer kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fragment {
    /// Fern layer on unfolded rows; checks rows, thresholds and table.
    Fern(WeightMode),
    /// unfold → fern → fold on an image.
    FernConv(WeightMode),
    /// Two fern blocks with batch norm, pooling and a fern classifier.
    FernNet(WeightMode),
    Conv,
    BatchNorm,
    Pool,
    Loss,
    /// matmul, tanh, elementwise ops and reductions.
    TensorOps,
}

impl Fragment {
    pub fn all() -> Vec<Fragment> {
        let mut out = Vec::new();
        for mode in WeightMode::ALL {
            out.push(Fragment::Fern(mode));
        }
        for mode in WeightMode::ALL {
            out.push(Fragment::FernConv(mode));
        }
        out.push(Fragment::FernNet(WeightMode::NormalizedProximity));
        out.extend([
            Fragment::Conv,
            Fragment::BatchNorm,
            Fragment::Pool,
            Fragment::Loss,
            Fragment::TensorOps,
        ]);
        out
    }

    pub fn name(&self) -> String {
        match self {
            Fragment::Fern(m) => format!("fern[{m}]"),
            Fragment::FernConv(m) => format!("fern_conv[{m}]"),
            Fragment::FernNet(m) => format!("fern_net[{m}]"),
            Fragment::Conv => "conv".into(),
            Fragment::BatchNorm => "batchnorm".into(),
            Fragment::Pool => "pool".into(),
            Fragment::Loss => "loss".into(),
            Fragment::TensorOps => "tensor_ops".into(),
        }
    }

    pub fn is_fern(&self) -> bool {
        matches!(
            self,
            Fragment::Fern(_) | Fragment::FernConv(_) | Fragment::FernNet(_)
        )
    }

    /// Pass threshold on the worst relative error.
    pub fn tolerance(&self) -> f64 {
        if self.is_fern() {
            1e-5
        } else {
            1e-6
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Instance> {
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let draw = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
            Tensor::from_f64(shape.to_vec(), &data).expect("sized")
        };
        let fern_layer = |rng: &mut ChaCha8Rng, mode, in_dim, out_channels| {
            fern_init::<f64>(FernConfig {
                ferns: 4,
                depth: 3,
                in_dim,
                out_channels,
                weight_mode: mode,
                thresholds_trainable: true,
                seed: rng.random(),
            })
        };
        Ok(match *self {
            Fragment::Fern(mode) => {
                let layer = fern_layer(rng, mode, 12, 5)?;
                let rows = draw(&[16, 12], rng);
                let projection = draw(&[16, 5], rng);
                Instance::graph(
                    vec![rows, layer.thresholds().clone(), layer.lut().clone()],
                    Graph::Fern { layer, projection },
                )
            }
            Fragment::FernConv(mode) => {
                let layer = fern_layer(rng, mode, 27, 4)?;
                let image = draw(&[2, 3, 6, 6], rng);
                let projection = draw(&[2, 4, 3, 3], rng);
                Instance::graph(
                    vec![image, layer.thresholds().clone(), layer.lut().clone()],
                    Graph::FernConv { layer, projection },
                )
            }
            Fragment::FernNet(mode) => {
                let block = |c_in, c_out, k, s, bn| {
                    LayerSpec::Block(BlockSpec {
                        in_channels: c_in,
                        out_channels: c_out,
                        kernel: k,
                        stride: s,
                        padding: k / 2,
                        batch_norm: bn,
                        backbone: super::Backbone::Fern,
                    })
                };
                let config = ModelConfig {
                    name: "gradcheck".into(),
                    input: [3, 8, 8],
                    layers: vec![
                        block(3, 6, 3, 2, true),
                        block(6, 6, 3, 2, true),
                        LayerSpec::AdaptiveAvgPool,
                        block(6, 2, 1, 1, false),
                    ],
                    fern: FernSettings {
                        ferns: 4,
                        depth: 3,
                        weight_mode: mode,
                        thresholds_trainable: true,
                    },
                    conv_bias: true,
                    bn_momentum: 0.1,
                    bn_epsilon: 1e-5,
                    seed: rng.random(),
                    dtype: DType::F64,
                };
                let model = build_model::<f64>(&config)?;
                let images = draw(&[3, 3, 8, 8], rng);
                let labels = (0..3).map(|_| rng.random_range(0..2)).collect();
                Instance::Net {
                    model,
                    images,
                    labels,
                }
            }
            Fragment::Conv => {
                let geometry = ConvGeometry {
                    in_channels: 3,
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                };
                let inputs = vec![
                    draw(&[2, 3, 6, 6], rng),
                    draw(&[4, 27], rng),
                    draw(&[4], rng),
                ];
                let projection = draw(&[2, 4, 3, 3], rng);
                Instance::graph(
                    inputs,
                    Graph::Conv {
                        geometry,
                        projection,
                    },
                )
            }
            Fragment::BatchNorm => {
                let x = draw(&[3, 4, 3, 3], rng).map(|v| 2.0 * v + 0.5);
                let gamma = Tensor::from_vec(
                    (0..4)
                        .map(|_| rng.sample(Uniform::new(0.5, 1.5).expect("range")))
                        .collect(),
                );
                let beta = draw(&[4], rng);
                let projection = draw(&[3, 4, 3, 3], rng);
                Instance::graph(
                    vec![x, gamma, beta],
                    Graph::BatchNorm {
                        state: BatchNorm::new(4),
                        projection,
                    },
                )
            }
            Fragment::Pool => {
                let projection = draw(&[2, 3, 1, 1], rng);
                Instance::graph(vec![draw(&[2, 3, 4, 4], rng)], Graph::Pool { projection })
            }
            Fragment::Loss => {
                let logits = draw(&[6, 3], rng).map(|v| 2.0 * v);
                let labels = (0..6).map(|_| rng.random_range(0..3)).collect();
                Instance::graph(vec![logits], Graph::Loss { labels })
            }
            Fragment::TensorOps => {
                let projection = draw(&[4, 3], rng);
                Instance::graph(
                    vec![draw(&[4, 5], rng), draw(&[5, 3], rng), draw(&[], rng)],
                    Graph::TensorOps { projection },
                )
            }
        })
    }
}

enum Graph {
    Fern {
        layer: FernEnsembleLayer<f64>,
        projection: Tensor<f64>,
    },
    FernConv {
        layer: FernEnsembleLayer<f64>,
        projection: Tensor<f64>,
    },
    Conv {
        geometry: ConvGeometry,
        projection: Tensor<f64>,
    },
    BatchNorm {
        state: BatchNorm<f64>,
        projection: Tensor<f64>,
    },
    Pool {
        projection: Tensor<f64>,
    },
    Loss {
        labels: Vec<usize>,
    },
    TensorOps {
        projection: Tensor<f64>,
    },
}

fn project(tape: &mut Tape<f64>, out: Var, projection: &Tensor<f64>) -> Result<Var> {
    let p = tape.constant(projection.clone());
    let prod = tape.mul(out, p)?;
    tape.sum(prod)
}

impl Graph {
    fn build(&self, tape: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
        match self {
            Graph::Fern { layer, projection } => {
                let out = tape.fern(v[0], v[1], v[2], layer)?;
                project(tape, out, projection)
            }
            Graph::FernConv { layer, projection } => {
                let (rows, geom) = tape.unfold(v[0], 3, 2, 1)?;
                let out = tape.fern(rows, v[1], v[2], layer)?;
                let out = tape.fold(out, &geom)?;
                project(tape, out, projection)
            }
            Graph::Conv {
                geometry,
                projection,
            } => {
                let out = tape.conv2d(v[0], v[1], Some(v[2]), geometry)?;
                project(tape, out, projection)
            }
            Graph::BatchNorm { state, projection } => {
                let mut state = state.clone();
                let out = tape.batchnorm(v[0], v[1], v[2], &mut state, NormMode::Train)?;
                project(tape, out, projection)
            }
            Graph::Pool { projection } => {
                let out = tape.adaptive_avg_pool(v[0])?;
                project(tape, out, projection)
            }
            Graph::Loss { labels } => tape.softmax_cross_entropy(v[0], labels),
            Graph::TensorOps { projection } => {
                // sum(P ⊙ tanh(a·b)) + s·mean_rows(a ⊙ a − a) summed
                let ab = tape.matmul(v[0], v[1])?;
                let t = tape.tanh(ab);
                let first = project(tape, t, projection)?;
                let sq = tape.mul(v[0], v[0])?;
                let diff = tape.sub(sq, v[0])?;
                let rows = tape.reduce(diff, ReduceKind::Mean, Some(1))?;
                let scaled = tape.mul(v[2], rows)?;
                let second = tape.sum(scaled)?;
                tape.add(first, second)
            }
        }
    }
}

enum Instance {
    Graph {
        inputs: Vec<Tensor<f64>>,
        graph: Graph,
    },
    Net {
        model: Model<f64>,
        images: Tensor<f64>,
        labels: Vec<usize>,
    },
}

impl Instance {
    fn graph(inputs: Vec<Tensor<f64>>, graph: Graph) -> Self {
        Instance::Graph { inputs, graph }
    }

    fn kink_distance(&mut self) -> Result<Option<f64>> {
        let mut tape = Tape::new();
        match self {
            Instance::Graph { inputs, graph } => {
                let vars: Vec<Var> = inputs
                    .iter()
                    .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
                    .collect();
                graph.build(&mut tape, &vars)?;
            }
            Instance::Net { model, images, .. } => {
                let x = tape.leaf(images.clone().with_requires_grad(true));
                model.forward(&mut tape, x, NormMode::Train)?;
            }
        }
        Ok(tape.kink_distance())
    }

    fn check(&mut self, epsilon: f64) -> Result<GradCheckReport> {
        match self {
            Instance::Graph { inputs, graph } => {
                grad_check(inputs, epsilon, |tape, vars| graph.build(tape, vars))
            }
            Instance::Net {
                model,
                images,
                labels,
            } => grad_check_model(model, images, labels, epsilon),
        }
    }
}

/// Draws one instance of `fragment` whose kinks are all at least `margin`
/// away, then checks it.
pub fn check_fragment(
    fragment: Fragment,
    rng: &mut ChaCha8Rng,
    margin: f64,
    epsilon: f64,
) -> Result<GradCheckReport> {
    for _ in 0..MAX_DRAWS {
        let mut instance = fragment.sample(rng)?;
        let distance = instance.kink_distance()?.unwrap_or(f64::INFINITY);
        if distance >= margin {
            return instance.check(epsilon);
        }
    }
    Err(Error::Sampling {
        margin,
        draws: MAX_DRAWS,
    })
}

/// Worst error of `trials` independent instances of `fragment`.
pub fn check_fragment_trials(
    fragment: Fragment,
    seed: u64,
    trials: usize,
    margin: f64,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for _ in 0..trials {
        report.merge(&check_fragment(fragment, &mut rng, margin, epsilon)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{BackwardContext, BackwardRule};

    /// `x²` whose backward rule is off by a factor of two.
    struct BrokenSquare {
        input: Var,
    }

    impl BackwardRule<f64> for BrokenSquare {
        fn name(&self) -> &'static str {
            "broken_square"
        }

        fn inputs(&self) -> Vec<Var> {
            vec![self.input]
        }

        fn backward(
            &self,
            ctx: &BackwardContext<'_, f64>,
            g: &[f64],
        ) -> Result<Vec<Option<Vec<f64>>>> {
            let x = ctx.value(self.input).data();
            Ok(vec![Some(
                x.iter().zip(g).map(|(x, g)| 4.0 * x * g).collect(),
            )])
        }
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let x = Tensor::from_f64([3], &[1.5, 2.0, 3.0]).unwrap();
        let report = grad_check(&[x], 1e-6, |tape, v| {
            let value = tape.value(v[0]).map(|x| x * x);
            let sq = tape.push(value, BrokenSquare { input: v[0] });
            tape.sum(sq)
        })
        .unwrap();
        assert!((report.max_rel_error - 1.0).abs() < 1e-6, "{report:?}");
    }

    #[test]
    fn tensor_ops_pass() {
        let r = check_fragment_trials(Fragment::TensorOps, 1, 10, 0.0, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn single_fern_layer_passes() {
        let r =
            check_fragment_trials(Fragment::Fern(WeightMode::LiteralL2), 2, 5, 1e-3, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert!(r.checked > 0);
    }

    #[test]
    fn conv_and_batchnorm_pass() {
        for f in [
            Fragment::Conv,
            Fragment::BatchNorm,
            Fragment::Loss,
            Fragment::Pool,
        ] {
            let r = check_fragment_trials(f, 3, 5, 1e-3, 1e-6).unwrap();
            assert!(r.max_rel_error < 1e-6, "{}: {r:?}", f.name());
        }
    }

    #[test]
    fn impossible_margin_is_a_sampling_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err =
            check_fragment(Fragment::Fern(WeightMode::LiteralL2), &mut rng, 2.0, 1e-6).unwrap_err();
        assert!(matches!(err, Error::Sampling { .. }));
    }
}
