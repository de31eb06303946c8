//! Line-based run configuration: `[section]` headers and `key = value`
//! lines, `#` comments. Each `[layer]` section appends one layer.
//!
//! ```text
//! [model]
//! name = fern
//! input = 3, 64, 64
//!
//! [fern]
//! ferns = 24
//! depth = 3
//!
//! [layer]
//! in_channels = 3
//! out_channels = 64
//! kernel = 5
//! stride = 2
//! batch_norm = true
//! backbone = fern
//!
//! [layer]
//! type = adaptive_avg_pool
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fern::WeightMode;
use crate::tensor::DType;
use crate::train::{Backbone, BlockSpec, LayerSpec, ModelConfig, OptimizerKind, TrainConfig};

/// Everything a training run needs besides data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn reference(backbone: Backbone) -> Self {
        Self {
            model: ModelConfig::reference(backbone),
            train: TrainConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        parse(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Canonical text form; [`RunConfig::parse`] inverts it exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut out = String::new();
        let [c, h, w] = m.input;
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "name = {}", m.name);
        let _ = writeln!(out, "input = {c}, {h}, {w}");
        let _ = writeln!(out, "seed = {}", m.seed);
        let _ = writeln!(out, "dtype = {}", m.dtype.name());
        let _ = writeln!(out, "conv_bias = {}", m.conv_bias);
        let _ = writeln!(out, "bn_momentum = {:?}", m.bn_momentum);
        let _ = writeln!(out, "bn_epsilon = {:?}", m.bn_epsilon);
        let _ = writeln!(out, "\n[fern]");
        let _ = writeln!(out, "ferns = {}", m.fern.ferns);
        let _ = writeln!(out, "depth = {}", m.fern.depth);
        let _ = writeln!(out, "weight_mode = {}", m.fern.weight_mode.name());
        let _ = writeln!(
            out,
            "thresholds_trainable = {}",
            m.fern.thresholds_trainable
        );
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(out, "optimizer = {}", t.optimizer.name());
        let _ = writeln!(out, "learning_rate = {:?}", t.learning_rate);
        let _ = writeln!(out, "momentum = {:?}", t.momentum);
        let _ = writeln!(out, "beta1 = {:?}", t.beta1);
        let _ = writeln!(out, "beta2 = {:?}", t.beta2);
        let _ = writeln!(out, "adam_epsilon = {:?}", t.adam_epsilon);
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "epochs = {}", t.epochs);
        let _ = writeln!(out, "seed = {}", t.seed);
        for layer in &m.layers {
            let _ = writeln!(out, "\n[layer]");
            match layer {
                LayerSpec::AdaptiveAvgPool => {
                    let _ = writeln!(out, "type = adaptive_avg_pool");
                }
                LayerSpec::Block(b) => {
                    let _ = writeln!(out, "in_channels = {}", b.in_channels);
                    let _ = writeln!(out, "out_channels = {}", b.out_channels);
                    let _ = writeln!(out, "kernel = {}", b.kernel);
                    let _ = writeln!(out, "stride = {}", b.stride);
                    let _ = writeln!(out, "padding = {}", b.padding);
                    let _ = writeln!(out, "batch_norm = {}", b.batch_norm);
                    let _ = writeln!(out, "backbone = {}", b.backbone.name());
                }
            }
        }
        out
    }
}

struct Section {
    name: String,
    line: usize,
    entries: BTreeMap<String, (usize, String)>,
}

impl Section {
    fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        let Some((line, raw)) = self.entries.remove(key) else {
            return Ok(None);
        };
        raw.parse().map(Some).map_err(|_| {
            bad(
                line,
                format!("cannot parse `{raw}` as the value of `{key}`"),
            )
        })
    }

    fn take_with<V>(
        &mut self,
        key: &str,
        parse: impl FnOnce(&str) -> Result<V>,
    ) -> Result<Option<V>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, raw)) => parse(&raw).map(Some).map_err(|e| bad(line, e.to_string())),
        }
    }

    fn require<V: FromStr>(&mut self, key: &str) -> Result<V> {
        self.take(key)?
            .ok_or_else(|| bad(self.line, format!("[{}] is missing `{key}`", self.name)))
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => {
                Err(bad(line, format!("unknown key `{key}` in [{}]", self.name)))
            }
        }
    }
}

fn bad(line: usize, reason: String) -> Error {
    Error::format("config", format!("line {line}: {reason}"))
}

fn sections(text: &str) -> Result<Vec<Section>> {
    let mut out: Vec<Section> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            out.push(Section {
                name: name.trim().to_string(),
                line,
                entries: BTreeMap::new(),
            });
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| bad(line, format!("expected `key = value`, got `{content}`")))?;
        let section = out
            .last_mut()
            .ok_or_else(|| bad(line, "key outside of any [section]".into()))?;
        let key = key.trim().to_string();
        if section
            .entries
            .insert(key.clone(), (line, value.trim().to_string()))
            .is_some()
        {
            return Err(bad(line, format!("`{key}` given twice")));
        }
    }
    Ok(out)
}

fn parse(text: &str) -> Result<RunConfig> {
    let mut model = ModelConfig::reference(Backbone::Fern);
    model.name = String::new();
    model.layers.clear();
    let mut train = TrainConfig::default();
    let mut seen = Vec::new();
    for mut s in sections(text)? {
        if s.name != "layer" {
            if seen.contains(&s.name) {
                return Err(bad(s.line, format!("section [{}] given twice", s.name)));
            }
            seen.push(s.name.clone());
        }
        match s.name.as_str() {
            "model" => {
                if let Some(v) = s.take::<String>("name")? {
                    model.name = v;
                }
                if let Some(v) = s.take_with("input", parse_shape)? {
                    model.input = v;
                }
                if let Some(v) = s.take("seed")? {
                    model.seed = v;
                }
                if let Some(v) = s.take_with("dtype", |d| {
                    DType::parse(d).ok_or_else(|| Error::Config(format!("unknown dtype `{d}`")))
                })? {
                    model.dtype = v;
                }
                if let Some(v) = s.take("conv_bias")? {
                    model.conv_bias = v;
                }
                if let Some(v) = s.take("bn_momentum")? {
                    model.bn_momentum = v;
                }
                if let Some(v) = s.take("bn_epsilon")? {
                    model.bn_epsilon = v;
                }
            }
            "fern" => {
                let f = &mut model.fern;
                if let Some(v) = s.take("ferns")? {
                    f.ferns = v;
                }
                if let Some(v) = s.take("depth")? {
                    f.depth = v;
                }
                if let Some(v) = s.take_with("weight_mode", WeightMode::parse)? {
                    f.weight_mode = v;
                }
                if let Some(v) = s.take("thresholds_trainable")? {
                    f.thresholds_trainable = v;
                }
            }
            "train" => {
                if let Some(v) = s.take_with("optimizer", OptimizerKind::parse)? {
                    train.optimizer = v;
                }
                if let Some(v) = s.take("learning_rate")? {
                    train.learning_rate = v;
                }
                if let Some(v) = s.take("momentum")? {
                    train.momentum = v;
                }
                if let Some(v) = s.take("beta1")? {
                    train.beta1 = v;
                }
                if let Some(v) = s.take("beta2")? {
                    train.beta2 = v;
                }
                if let Some(v) = s.take("adam_epsilon")? {
                    train.adam_epsilon = v;
                }
                if let Some(v) = s.take("batch_size")? {
                    train.batch_size = v;
                }
                if let Some(v) = s.take("epochs")? {
                    train.epochs = v;
                }
                if let Some(v) = s.take("seed")? {
                    train.seed = v;
                }
            }
            "layer" => {
                let kind = s.take::<String>("type")?.unwrap_or_else(|| "block".into());
                let layer = match kind.as_str() {
                    "adaptive_avg_pool" => LayerSpec::AdaptiveAvgPool,
                    "block" => {
                        let kernel: usize = s.require("kernel")?;
                        LayerSpec::Block(BlockSpec {
                            in_channels: s.require("in_channels")?,
                            out_channels: s.require("out_channels")?,
                            kernel,
                            stride: s.take("stride")?.unwrap_or(1),
                            padding: s.take("padding")?.unwrap_or(kernel / 2),
                            batch_norm: s.take("batch_norm")?.unwrap_or(false),
                            backbone: s
                                .take_with("backbone", Backbone::parse)?
                                .unwrap_or(Backbone::Fern),
                        })
                    }
                    other => return Err(bad(s.line, format!("unknown layer type `{other}`"))),
                };
                model.layers.push(layer);
            }
            other => return Err(bad(s.line, format!("unknown section [{other}]"))),
        }
        s.finish()?;
    }
    if model.name.is_empty() {
        model.name = model.backbone().map_or("model", Backbone::name).to_string();
    }
    let config = RunConfig { model, train };
    config.validate()?;
    Ok(config)
}

fn parse_shape(text: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = text
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("`{text}` is not a C, H, W shape")))?;
    dims.try_into()
        .map_err(|_| Error::Config(format!("`{text}` is not a C, H, W shape")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_are_the_reference_models() {
        let cases = [
            (include_str!("../../configs/fern.cfg"), Backbone::Fern),
            (include_str!("../../configs/vanilla.cfg"), Backbone::Conv),
            (include_str!("../../configs/binconv.cfg"), Backbone::BinConv),
        ];
        for (text, backbone) in cases {
            let cfg = RunConfig::parse(text).unwrap();
            let mut expected = RunConfig::reference(backbone);
            expected.model.name = cfg.model.name.clone();
            assert_eq!(cfg, expected, "{backbone}");
        }
    }

    #[test]
    fn text_round_trip() {
        for backbone in Backbone::ALL {
            let mut cfg = RunConfig::reference(backbone);
            cfg.model.bn_epsilon = 1.2345678901234e-7;
            cfg.train.learning_rate = 0.1 + 0.2;
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("[model]\nseed = x", "line 2"),
            ("seed = 1", "line 1"),
            ("[model]\nbogus = 1", "bogus"),
            ("[nope]", "nope"),
            ("[layer]\nkernel = 3\nin_channels = 3", "out_channels"),
            ("[model]\nseed = 1\nseed = 2", "twice"),
        ];
        for (text, needle) in cases {
            let err = RunConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?}: {err}");
        }
    }

    #[test]
    fn chaining_is_validated() {
        let text = "[layer]\nin_channels = 3\nout_channels = 8\nkernel = 3\n\n[layer]\nin_channels = 4\nout_channels = 2\nkernel = 1\n";
        assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))));
    }
}
