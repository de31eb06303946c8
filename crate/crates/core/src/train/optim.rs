use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Drives the shuffle order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 32,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Optimizer state for an ordered parameter list.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: TrainConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Element> Optimizer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every parameter that requires a gradient from its gradient
    /// slot, then clears the slots. Parameters without a gradient are treated
    /// as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            if self.config.optimizer == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let cfg = &self.config;
        let lr = T::of(cfg.learning_rate);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let grad = p
                .grad()
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); p.numel()]);
            if grad.len() != self.first[i].len() {
                return Err(Error::Dimension(format!(
                    "parameter {i} changed size between steps"
                )));
            }
            match cfg.optimizer {
                OptimizerKind::Sgd => {
                    // v ← μv + g;  p ← p − lr·(g + μv)
                    let mu = T::of(cfg.momentum);
                    let v = &mut self.first[i];
                    for ((w, &g), v) in p.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                        *v = mu * *v + g;
                        *w -= lr * (g + mu * *v);
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
                    let t = self.steps as i32;
                    let c1 = T::one() - b1.powi(t);
                    let c2 = T::one() - b2.powi(t);
                    let eps = T::of(cfg.adam_epsilon);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((w, &g), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}
