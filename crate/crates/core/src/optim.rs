//! AdaDelta with heavy-ball momentum and the mini-batch training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{invalid, Result};
use crate::network::Network;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaDeltaConfig {
    pub rho: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for AdaDeltaConfig {
    fn default() -> Self {
        AdaDeltaConfig {
            rho: 0.95,
            eps: 1e-6,
            momentum: 0.8,
        }
    }
}

/// Per-parameter running averages and the momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaDeltaState {
    pub config: AdaDeltaConfig,
    pub acc_grad: Vec<f64>,
    pub acc_update: Vec<f64>,
    pub prev_update: Vec<f64>,
}

impl AdaDeltaState {
    pub fn new(len: usize, config: AdaDeltaConfig) -> Self {
        AdaDeltaState {
            config,
            acc_grad: vec![0.0; len],
            acc_update: vec![0.0; len],
            prev_update: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.acc_grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc_grad.is_empty()
    }

    /// One update:
    ///
    /// ```text
    /// E[g^2]  <- rho E[g^2] + (1 - rho) g^2
    /// delta   <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    /// E[dx^2] <- rho E[dx^2] + (1 - rho) delta^2
    /// step    <- momentum * prev_step + delta
    /// params  += step
    /// ```
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(invalid(format!(
                "optimizer holds {} parameters, got {} params and {} grads",
                self.len(),
                params.len(),
                grads.len()
            )));
        }
        let AdaDeltaConfig { rho, eps, momentum } = self.config;
        for i in 0..params.len() {
            let g = grads[i];
            self.acc_grad[i] = rho * self.acc_grad[i] + (1.0 - rho) * g * g;
            let delta = -((self.acc_update[i] + eps).sqrt() / (self.acc_grad[i] + eps).sqrt()) * g;
            self.acc_update[i] = rho * self.acc_update[i] + (1.0 - rho) * delta * delta;
            let step = momentum * self.prev_update[i] + delta;
            params[i] += step;
            self.prev_update[i] = step;
        }
        Ok(())
    }
}

/// Functional form of [`AdaDeltaState::step`]: returns the new parameters
/// and state, leaving the inputs untouched.
pub fn adadelta_step(
    params: &[f64],
    grads: &[f64],
    state: &AdaDeltaState,
) -> Result<(Vec<f64>, AdaDeltaState)> {
    let mut p = params.to_vec();
    let mut s = state.clone();
    s.step(&mut p, grads)?;
    Ok((p, s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Evaluate on the test split every this many iterations (and after the
    /// last one).
    pub eval_interval: usize,
    /// Evaluate on at most this many test samples; `None` uses all.
    pub eval_samples: Option<usize>,
    /// Skip parameter updates entirely.
    pub frozen: bool,
    pub optimizer: AdaDeltaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            iterations: 5000,
            seed: 0,
            eval_interval: 500,
            eval_samples: None,
            frozen: false,
            optimizer: AdaDeltaConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    /// 1-based iteration number.
    pub iteration: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<IterRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "iteration,train_loss,test_loss,test_accuracy";

    /// One row per iteration; test columns are empty where no evaluation
    /// ran.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.iteration,
                r.train_loss,
                opt(r.test_loss),
                opt(r.test_accuracy)
            );
        }
        s
    }

    pub fn last_eval(&self) -> Option<&IterRecord> {
        self.records
            .iter()
            .rev()
            .find(|r| r.test_accuracy.is_some())
    }
}

/// Yields mini-batch index lists: the sample order is reshuffled at the
/// start of every epoch from a seeded generator.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchSampler {
            order,
            cursor: 0,
            batch: batch.min(len).max(1),
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let b = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        b
    }
}

/// Trains `network` in place with [`train_with`] and no progress callback.
pub fn train(
    network: &mut Network,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    config: &TrainConfig,
) -> Result<History> {
    train_with(network, train_set, test_set, config, |_| {})
}

/// Mini-batch training. Constraints of every compositional bank are
/// projected after each step and verified at every evaluation.
pub fn train_with(
    network: &mut Network,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    config: &TrainConfig,
    mut on_eval: impl FnMut(&IterRecord),
) -> Result<History> {
    if config.batch_size == 0 || config.iterations == 0 || config.eval_interval == 0 {
        return Err(invalid(
            "batch size, iterations and eval interval must be positive",
        ));
    }
    if train_set.is_empty() || test_set.is_empty() {
        return Err(invalid("training and test sets must be non-empty"));
    }
    let classes = network.classes();
    if train_set.class_count > classes || test_set.class_count > classes {
        return Err(invalid(format!(
            "dataset has {} classes, network outputs {}",
            train_set.class_count.max(test_set.class_count),
            classes
        )));
    }
    let mut params = network.params();
    let mut opt = AdaDeltaState::new(params.len(), config.optimizer);
    let mut sampler = BatchSampler::new(train_set.len(), config.batch_size, config.seed);
    let eval_n = config
        .eval_samples
        .unwrap_or(test_set.len())
        .min(test_set.len());
    let eval_images = test_set.images.gather(&(0..eval_n).collect::<Vec<_>>());
    let eval_labels = &test_set.labels[..eval_n];

    let mut history = History::default();
    for it in 1..=config.iterations {
        let idx = sampler.next_batch();
        let x = train_set.images.gather(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
        let (loss, grads) = network.loss_and_grads(&x, &y)?;
        if !config.frozen {
            let flat = network.flatten_grads(&grads);
            opt.step(&mut params, &flat)?;
            network.set_params(&params)?;
            network.project_constraints();
            params = network.params();
        }
        let mut record = IterRecord {
            iteration: it,
            train_loss: loss,
            test_loss: None,
            test_accuracy: None,
        };
        if it % config.eval_interval == 0 || it == config.iterations {
            network.validate()?;
            let (l, a) = network.evaluate(&eval_images, eval_labels, config.batch_size)?;
            record.test_loss = Some(l);
            record.test_accuracy = Some(a);
            on_eval(&record);
        }
        history.records.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op_without_momentum() {
        let state = AdaDeltaState::new(3, AdaDeltaConfig::default());
        let (p, _) = adadelta_step(&[1.0, -2.0, 3.0], &[0.0; 3], &state).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn zero_gradient_applies_pure_momentum() {
        let mut state = AdaDeltaState::new(2, AdaDeltaConfig::default());
        state.prev_update = vec![0.5, -1.0];
        let (p, s) = adadelta_step(&[1.0, 1.0], &[0.0, 0.0], &state).unwrap();
        assert_eq!(p, vec![1.0 + 0.8 * 0.5, 1.0 - 0.8]);
        assert_eq!(s.prev_update, vec![0.4, -0.8]);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let state = AdaDeltaState::new(1, AdaDeltaConfig::default());
        let g = 0.3;
        let (p, s) = adadelta_step(&[0.0], &[g], &state).unwrap();
        // delta = -(sqrt(eps) / sqrt((1 - rho) g^2 + eps)) g
        let expected = -(1e-6f64.sqrt() / (0.05 * 0.09 + 1e-6f64).sqrt()) * 0.3;
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((s.acc_grad[0] - 0.05 * 0.09).abs() < 1e-15);
        assert!((s.acc_update[0] - 0.05 * expected * expected).abs() < 1e-18);
    }

    #[test]
    fn step_is_deterministic_and_pure() {
        let mut state = AdaDeltaState::new(2, AdaDeltaConfig::default());
        state.acc_grad = vec![0.1, 0.2];
        let snapshot = state.clone();
        let a = adadelta_step(&[1.0, 2.0], &[0.3, -0.4], &state).unwrap();
        let b = adadelta_step(&[1.0, 2.0], &[0.3, -0.4], &state).unwrap();
        assert_eq!(a, b);
        assert_eq!(state, snapshot);
        assert!(adadelta_step(&[1.0], &[0.3, -0.4], &state).is_err());
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 5, 3);
        let mut seen: Vec<usize> = s.next_batch();
        seen.extend(s.next_batch());
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn history_csv_layout() {
        let h = History {
            records: vec![
                IterRecord {
                    iteration: 1,
                    train_loss: 2.5,
                    test_loss: None,
                    test_accuracy: None,
                },
                IterRecord {
                    iteration: 2,
                    train_loss: 2.0,
                    test_loss: Some(1.5),
                    test_accuracy: Some(0.25),
                },
            ],
        };
        assert_eq!(
            h.to_csv(),
            "iteration,train_loss,test_loss,test_accuracy\n1,2.5,,\n2,2,1.5,0.25\n"
        );
    }
}
