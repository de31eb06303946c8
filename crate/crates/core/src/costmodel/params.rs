use crate::tensor::Element;
use crate::train::{Backbone, LayerSpec, Model, ModelConfig};

/// Learnable parameters of a network described by `config`, computed from
/// layer shapes alone.
///
/// Fern thresholds are included when they are trainable or when
/// `include_frozen` is set.
pub fn count_params(config: &ModelConfig, include_frozen: bool) -> u64 {
    let fern = &config.fern;
    let mut total = 0u64;
    for layer in &config.layers {
        let LayerSpec::Block(b) = layer else { continue };
        let c_out = b.out_channels as u64;
        total += match b.backbone {
            Backbone::Fern => {
                let k = fern.ferns as u64;
                let lut = k * (1u64 << fern.depth) * c_out;
                let thresholds = k * fern.depth as u64;
                lut + if fern.thresholds_trainable || include_frozen {
                    thresholds
                } else {
                    0
                }
            }
            Backbone::Conv | Backbone::BinConv => {
                c_out * b.in_dim() as u64 + if config.conv_bias { c_out } else { 0 }
            }
        };
        if b.batch_norm {
            total += 2 * c_out;
        }
    }
    total
}

/// Same quantity as [`count_params`], obtained by summing the sizes of the
/// tensors a built model actually holds.
pub fn count_model_params<T: Element>(model: &Model<T>, include_frozen: bool) -> u64 {
    model
        .parameters()
        .iter()
        .filter(|(_, t)| include_frozen || t.requires_grad())
        .map(|(_, t)| t.numel() as u64)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::build_model;

    #[test]
    fn reference_counts() {
        let mut fern = ModelConfig::reference(Backbone::Fern);
        assert_eq!(count_params(&fern, false), 37_920);
        fern.fern.thresholds_trainable = false;
        assert_eq!(count_params(&fern, false), 37_632);
        assert_eq!(count_params(&fern, true), 37_920);
        assert_eq!(
            count_params(&ModelConfig::reference(Backbone::Conv), false),
            79_234
        );
        assert_eq!(
            count_params(&ModelConfig::reference(Backbone::BinConv), false),
            79_234
        );
    }

    #[test]
    fn empty_model_has_no_parameters() {
        let mut cfg = ModelConfig::reference(Backbone::Conv);
        cfg.layers.clear();
        assert_eq!(count_params(&cfg, true), 0);
    }

    #[test]
    fn closed_form_matches_traversal() {
        for backbone in Backbone::ALL {
            for trainable in [true, false] {
                for bias in [true, false] {
                    let mut cfg = ModelConfig::reference(backbone);
                    cfg.fern.thresholds_trainable = trainable;
                    cfg.conv_bias = bias;
                    let model = build_model::<f32>(&cfg).unwrap();
                    for frozen in [true, false] {
                        assert_eq!(
                            count_params(&cfg, frozen),
                            count_model_params(&model, frozen),
                            "{backbone} trainable={trainable} bias={bias} frozen={frozen}"
                        );
                    }
                }
            }
        }
    }
}
