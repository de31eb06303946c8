use serde::Serialize;

use super::{OpCounts, OpKind};
use crate::error::{Error, Result};
use crate::fern::{forward_op_profile, FernOpProfile};
use crate::spatial::Geometry;
use crate::train::{Backbone, LayerSpec, ModelConfig};

/// Inference cost of one operation of a network.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    /// `l{position}.{op}`, e.g. `l2.fern`, `l2.bn`, `l4.pool`.
    pub name: String,
    /// 1-based position of the owning layer.
    pub position: usize,
    /// `fern`, `conv`, `binconv`, `bn`, `relu` or `pool`.
    pub op: &'static str,
    /// Elements of the operation's output.
    pub output_elements: u64,
    pub counts: OpCounts,
    /// Phase breakdown, for fern layers.
    #[serde(skip)]
    pub fern_profile: Option<FernOpProfile>,
}

impl LayerCost {
    pub fn per_output(&self, kind: OpKind) -> f64 {
        self.counts.get(kind) as f64 / self.output_elements as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    /// `N×C×H×W` input the counts refer to.
    pub input_shape: [usize; 4],
    pub layers: Vec<LayerCost>,
    pub total: OpCounts,
}

impl OpReport {
    /// The backbone cost of the block at `position`.
    pub fn backbone(&self, position: usize) -> Option<&LayerCost> {
        self.layers
            .iter()
            .find(|l| l.position == position && matches!(l.op, "fern" | "conv" | "binconv"))
    }
}

/// Forward-pass operation counts of the network described by `config` on an
/// `N×C×H×W` (or `C×H×W`, meaning one image) input.
///
/// Counting rules, per operation:
/// - conv: a multiply and an add per weight tap and output, two word reads
///   per tap (activation and weight), one add and read per bias;
/// - binconv: signed accumulation, so adds instead of multiplies, one
///   multiply by the channel scale per output, weights read 32 signs per
///   word;
/// - fern: the closed-form per-row profile of the fern kernel;
/// - bn: folded into an inference affine map, two multiplies and an add
///   per element;
/// - relu: one compare per element; pool: an add per element, one divide
///   per channel.
pub fn count_ops(config: &ModelConfig, input_shape: &[usize]) -> Result<OpReport> {
    config.validate()?;
    let shape = match *input_shape {
        [c, h, w] => [1, c, h, w],
        [n, c, h, w] => [n, c, h, w],
        _ => {
            return Err(Error::Dimension(format!(
                "cost model input must be C×H×W or N×C×H×W, got {input_shape:?}"
            )))
        }
    };
    let last_block = config
        .layers
        .iter()
        .rposition(|l| matches!(l, LayerSpec::Block(_)));
    let mut layers = Vec::new();
    let mut current = shape;
    for (i, layer) in config.layers.iter().enumerate() {
        let position = i + 1;
        let mut push = |op: &'static str, output_elements: u64, counts: OpCounts, fern_profile| {
            layers.push(LayerCost {
                name: format!("l{position}.{op}"),
                position,
                op,
                output_elements,
                counts,
                fern_profile,
            })
        };
        match layer {
            LayerSpec::AdaptiveAvgPool => {
                let [n, c, h, w] = current;
                let (maps, taps) = ((n * c) as u64, (h * w) as u64);
                let counts = OpCounts::new()
                    .with(OpKind::FloatAdd, maps * (taps - 1))
                    .with(OpKind::FloatDiv, maps)
                    .with(OpKind::MemReadWords, maps * taps)
                    .with(OpKind::MemWriteWords, maps);
                push("pool", maps, counts, None);
                current = [n, c, 1, 1];
            }
            LayerSpec::Block(b) => {
                if current[1] != b.in_channels {
                    return Err(Error::Geometry(format!(
                        "layer {position} expects {} channels, input has {}",
                        b.in_channels, current[1]
                    )));
                }
                let geom = Geometry::new(&current, b.kernel, b.stride, b.padding)?;
                let rows = geom.rows() as u64;
                let c_out = b.out_channels as u64;
                let taps = b.in_dim() as u64;
                let outputs = rows * c_out;
                let bias = if config.conv_bias { outputs } else { 0 };
                match b.backbone {
                    Backbone::Fern => {
                        let profile = forward_op_profile(&config.fern_config(b, 0), geom.rows());
                        push("fern", outputs, profile.total(), Some(profile));
                    }
                    Backbone::Conv => {
                        let macs = outputs * taps;
                        let counts = OpCounts::new()
                            .with(OpKind::FloatMul, macs)
                            .with(OpKind::FloatAdd, macs - outputs + bias)
                            .with(OpKind::MemReadWords, 2 * macs + bias)
                            .with(OpKind::MemWriteWords, outputs);
                        push("conv", outputs, counts, None);
                    }
                    Backbone::BinConv => {
                        let macs = outputs * taps;
                        let counts = OpCounts::new()
                            .with(OpKind::FloatAdd, macs - outputs + bias)
                            .with(OpKind::FloatMul, outputs)
                            .with(
                                OpKind::MemReadWords,
                                macs + macs.div_ceil(32) + outputs + bias,
                            )
                            .with(OpKind::MemWriteWords, outputs);
                        push("binconv", outputs, counts, None);
                    }
                }
                if b.batch_norm {
                    let counts = OpCounts::new()
                        .with(OpKind::FloatMul, 2 * outputs)
                        .with(OpKind::FloatAdd, outputs)
                        .with(OpKind::MemReadWords, outputs + 2 * c_out)
                        .with(OpKind::MemWriteWords, outputs);
                    push("bn", outputs, counts, None);
                }
                if b.backbone != Backbone::Fern && Some(i) != last_block {
                    let counts = OpCounts::new()
                        .with(OpKind::Compare, outputs)
                        .with(OpKind::MemReadWords, outputs)
                        .with(OpKind::MemWriteWords, outputs);
                    push("relu", outputs, counts, None);
                }
                current = geom.output_shape(b.out_channels);
            }
        }
    }
    let total = layers.iter().map(|l| l.counts).sum();
    Ok(OpReport {
        input_shape: shape,
        layers,
        total,
    })
}

/// Per block: fern float multiplies per output element divided by those of
/// the same geometry as a dense convolution. Returns `(position, ratio)`.
pub fn fern_mul_ratios(config: &ModelConfig, input_shape: &[usize]) -> Result<Vec<(usize, f64)>> {
    let mut fern = config.clone();
    fern.set_backbone(Backbone::Fern);
    let mut conv = config.clone();
    conv.set_backbone(Backbone::Conv);
    let fern = count_ops(&fern, input_shape)?;
    let conv = count_ops(&conv, input_shape)?;
    Ok(config
        .blocks()
        .zip(
            config
                .layers
                .iter()
                .enumerate()
                .filter(|(_, l)| matches!(l, LayerSpec::Block(_))),
        )
        .map(|(_, (i, _))| {
            let f = fern.backbone(i + 1).expect("fern block");
            let c = conv.backbone(i + 1).expect("conv block");
            (
                i + 1,
                f.per_output(OpKind::FloatMul) / c.per_output(OpKind::FloatMul),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fern::FernPhase;
    use crate::train::BlockSpec;

    fn single(backbone: Backbone, c_in: usize, c_out: usize, k: usize) -> ModelConfig {
        let mut cfg = ModelConfig::reference(backbone);
        cfg.input = [c_in, 1, 1];
        cfg.layers = vec![LayerSpec::Block(BlockSpec {
            in_channels: c_in,
            out_channels: c_out,
            kernel: k,
            stride: 1,
            padding: 0,
            batch_norm: false,
            backbone,
        })];
        cfg
    }

    #[test]
    fn pointwise_conv_is_one_multiply() {
        let report = count_ops(&single(Backbone::Conv, 1, 1, 1), &[1, 1, 1]).unwrap();
        assert_eq!(report.total.get(OpKind::FloatMul), 1);
    }

    #[test]
    fn second_reference_layer_ratio() {
        let cfg = ModelConfig::reference(Backbone::Fern);
        let report = count_ops(&cfg, &[3, 64, 64]).unwrap();
        let l2 = report.backbone(2).unwrap();
        // 32×32 input, stride 2 → 16×16 positions
        assert_eq!(l2.output_elements, 256 * 64);
        assert!((l2.per_output(OpKind::FloatMul) - 24.0 * 67.0 / 64.0).abs() < 1e-12);
        let ratios = fern_mul_ratios(&cfg, &[3, 64, 64]).unwrap();
        let (_, r2) = ratios[1];
        assert!((r2 - 24.0 * 67.0 / 64.0 / 576.0).abs() < 1e-12, "{r2}");
    }

    #[test]
    fn indexing_and_gather_never_multiply() {
        let cfg = ModelConfig::reference(Backbone::Fern);
        let report = count_ops(&cfg, &[3, 64, 64]).unwrap();
        for layer in report.layers.iter().filter(|l| l.op == "fern") {
            let p = layer.fern_profile.as_ref().unwrap();
            assert_eq!(p.phase(FernPhase::Indexing).get(OpKind::FloatMul), 0);
            assert_eq!(p.phase(FernPhase::Gather).get(OpKind::FloatMul), 0);
        }
    }

    #[test]
    fn totals_are_sums_of_layers() {
        for backbone in Backbone::ALL {
            let report = count_ops(&ModelConfig::reference(backbone), &[2, 3, 64, 64]).unwrap();
            let sum: OpCounts = report.layers.iter().map(|l| l.counts).sum();
            assert_eq!(sum, report.total);
        }
    }

    #[test]
    fn batch_scales_linearly() {
        let cfg = ModelConfig::reference(Backbone::BinConv);
        let one = count_ops(&cfg, &[3, 64, 64]).unwrap().total;
        let four = count_ops(&cfg, &[4, 3, 64, 64]).unwrap().total;
        // the weight-word rounding is per layer, so allow a tiny slack there
        for kind in OpKind::ALL {
            if kind != OpKind::MemReadWords {
                assert_eq!(four.get(kind), 4 * one.get(kind), "{kind}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let cfg = ModelConfig::reference(Backbone::Conv);
        assert!(count_ops(&cfg, &[1, 64, 64]).is_err());
        assert!(count_ops(&cfg, &[64, 64]).is_err());
    }
}
