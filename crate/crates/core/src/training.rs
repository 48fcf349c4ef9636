//! Mini-batch SGD on the mean L1 loss with checkpointing on validation
//! system-level SRCC.
//!
//! Epoch 0 evaluates the initial parameters. After each epoch the working
//! parameters are rounded to storage precision (f32) and that snapshot is
//! what gets evaluated, logged and returned. A snapshot beats the current best
//! when its validation SRCC is higher, or equal with a lower validation L1.
//! Training stops after `early_stop_patience` epochs without a new best.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            max_epochs: 1000,
            early_stop_patience: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::InvalidConfig(
                "batch size, max epochs and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Inputs with labels and system ids.
#[derive(Debug, Clone)]
pub struct Dataset<I> {
    pub inputs: Vec<I>,
    pub labels: Vec<f64>,
    pub systems: Vec<String>,
}

impl<I> Dataset<I> {
    pub fn new(inputs: Vec<I>, labels: Vec<f64>, systems: Vec<String>) -> Result<Self> {
        if inputs.len() != labels.len() || inputs.len() != systems.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: labels.len().min(systems.len()),
            });
        }
        if labels.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("label"));
        }
        Ok(Self {
            inputs,
            labels,
            systems,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn num_systems(&self) -> usize {
        let mut s: Vec<&str> = self.systems.iter().map(String::as_str).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    }

    pub fn map<J>(&self, f: impl FnMut(&I) -> J) -> Dataset<J> {
        Dataset {
            inputs: self.inputs.iter().map(f).collect(),
            labels: self.labels.clone(),
            systems: self.systems.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l1: f64,
    pub val_srcc_system: f64,
    pub val_l1: f64,
}

impl EpochRecord {
    fn beats(&self, other: &EpochRecord) -> bool {
        let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
        let (a, b) = (key(self.val_srcc_system), key(other.val_srcc_system));
        a > b || (a == b && self.val_l1 < other.val_l1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub const LOG_CSV_HEADER: &str = "epoch,train_l1,val_srcc_system,val_l1";

impl TrainingLog {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.epoch,
                metrics::format_value(e.train_l1),
                metrics::format_value(e.val_srcc_system),
                metrics::format_value(e.val_l1)
            );
        }
        out
    }
}

/// A scalar predictor with trainable parameters.
pub(crate) trait Objective {
    type Input;

    fn predict(&self, params: &[f64], input: &Self::Input) -> f64;

    /// Adds `scale * dŷ/dθ` to `grad`.
    fn accumulate_gradient(
        &self,
        params: &[f64],
        input: &Self::Input,
        scale: f64,
        grad: &mut [f64],
    );
}

/// Rounds to the f32 storage precision of the model files.
pub(crate) fn snapshot(params: &[f64]) -> Vec<f64> {
    params.iter().map(|&p| p as f32 as f64).collect()
}

/// Mean L1 loss of a batch and its subgradient (sign of the residual, 0 at
/// zero residual).
pub(crate) fn batch_l1_gradient<O: Objective>(
    obj: &O,
    params: &[f64],
    inputs: &[&O::Input],
    labels: &[f64],
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let scale = 1.0 / inputs.len() as f64;
    let mut loss = 0.0;
    for (input, &y) in inputs.iter().zip(labels) {
        let residual = obj.predict(params, input) - y;
        loss += residual.abs() * scale;
        let sign = if residual > 0.0 {
            1.0
        } else if residual < 0.0 {
            -1.0
        } else {
            0.0
        };
        if sign != 0.0 {
            obj.accumulate_gradient(params, input, sign * scale, grad);
        }
    }
    loss
}

pub(crate) fn predict_all<O: Objective>(obj: &O, params: &[f64], inputs: &[O::Input]) -> Vec<f64> {
    inputs.iter().map(|x| obj.predict(params, x)).collect()
}

pub(crate) fn check_splits<A, B>(train: &Dataset<A>, val: &Dataset<B>) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let systems = val.num_systems();
    if systems < 2 {
        return Err(Error::SingleSystem(systems));
    }
    Ok(())
}

pub(crate) fn evaluate<O: Objective>(
    obj: &O,
    params: &[f64],
    epoch: usize,
    train: &Dataset<O::Input>,
    val: &Dataset<O::Input>,
) -> Result<EpochRecord> {
    let train_pred = predict_all(obj, params, &train.inputs);
    let val_pred = predict_all(obj, params, &val.inputs);
    let (train_l1, val_l1) = if train_pred.iter().chain(&val_pred).all(|v| v.is_finite()) {
        (
            metrics::mean_abs_error(&train_pred, &train.labels)?,
            metrics::mean_abs_error(&val_pred, &val.labels)?,
        )
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let val_srcc_system = if val_l1.is_finite() {
        metrics::system_srcc(&val_pred, &val.labels, &val.systems)?
    } else {
        f64::NAN
    };
    Ok(EpochRecord {
        epoch,
        train_l1,
        val_srcc_system,
        val_l1,
    })
}

/// Returns the best snapshot and the full log.
pub(crate) fn fit<O: Objective>(
    obj: &O,
    init: Vec<f64>,
    train: &Dataset<O::Input>,
    val: &Dataset<O::Input>,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, TrainingLog)> {
    cfg.validate()?;
    check_splits(train, val)?;

    let mut params = init;
    let mut best_params = snapshot(&params);
    let mut epochs = vec![evaluate(obj, &best_params, 0, train, val)?];
    let mut best_epoch = 0;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; params.len()];
    let mut batch_inputs = Vec::with_capacity(cfg.batch_size);
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch_inputs.clear();
            batch_labels.clear();
            for &i in chunk {
                batch_inputs.push(&train.inputs[i]);
                batch_labels.push(train.labels[i]);
            }
            batch_l1_gradient(obj, &params, &batch_inputs, &batch_labels, &mut grad);
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }

        let current = snapshot(&params);
        let record = evaluate(obj, &current, epoch, train, val)?;
        if record.beats(&epochs[best_epoch]) {
            best_epoch = epochs.len();
            best_params = current;
        }
        epochs.push(record);
        if epoch - epochs[best_epoch].epoch >= cfg.early_stop_patience {
            log::debug!("early stop at epoch {epoch}, best epoch {best_epoch}");
            break;
        }
    }

    Ok((best_params, TrainingLog { epochs, best_epoch }))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// ŷ = w·x + b on plain vectors.
    struct Affine;

    impl Objective for Affine {
        type Input = Vec<f64>;

        fn predict(&self, p: &[f64], x: &Vec<f64>) -> f64 {
            let d = x.len();
            x.iter().zip(&p[..d]).map(|(a, b)| a * b).sum::<f64>() + p[d]
        }

        fn accumulate_gradient(&self, _: &[f64], x: &Vec<f64>, s: f64, g: &mut [f64]) {
            let d = x.len();
            for i in 0..d {
                g[i] += s * x[i];
            }
            g[d] += s;
        }
    }

    fn data(n: usize, f: impl Fn(usize) -> (f64, f64)) -> Dataset<Vec<f64>> {
        let (xs, ys): (Vec<_>, Vec<_>) = (0..n)
            .map(|i| {
                let (x, y) = f(i);
                (vec![x], y)
            })
            .unzip();
        let systems = (0..n).map(|i| format!("s{}", i % 5)).collect();
        Dataset::new(xs, ys, systems).unwrap()
    }

    #[test]
    fn constant_labels_reach_zero_loss() {
        let train = data(40, |i| (i as f64 / 40.0, 3.0));
        let val = data(20, |i| (i as f64 / 20.0, 3.0));
        let cfg = TrainConfig {
            learning_rate: 0.01,
            max_epochs: 300,
            ..Default::default()
        };
        let (p, log) = fit(&Affine, vec![0.0, 0.0], &train, &val, &cfg).unwrap();
        assert!(log.best().train_l1 < 0.02, "{:?}", log.best());
        assert!((p[1] - 3.0).abs() < 0.05);
    }

    #[test]
    fn deterministic_per_seed() {
        let train = data(60, |i| {
            ((i * 7 % 13) as f64 / 13.0, 2.0 + (i * 7 % 13) as f64 / 13.0)
        });
        let val = data(30, |i| {
            ((i * 3 % 11) as f64 / 11.0, 2.0 + (i * 3 % 11) as f64 / 11.0)
        });
        let cfg = TrainConfig {
            learning_rate: 0.01,
            max_epochs: 50,
            seed: 7,
            ..Default::default()
        };
        let a = fit(&Affine, vec![0.0, 0.0], &train, &val, &cfg).unwrap();
        let b = fit(&Affine, vec![0.0, 0.0], &train, &val, &cfg).unwrap();
        assert_eq!(a.1.to_csv(), b.1.to_csv());
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn returned_checkpoint_has_max_srcc() {
        let train = data(50, |i| ((i % 10) as f64, 1.0 + 0.4 * (i % 10) as f64));
        let val = data(25, |i| ((i % 10) as f64, 1.0 + 0.4 * (i % 10) as f64));
        let cfg = TrainConfig {
            learning_rate: 0.001,
            max_epochs: 80,
            ..Default::default()
        };
        let (_, log) = fit(&Affine, vec![0.0, 0.0], &train, &val, &cfg).unwrap();
        let max = log
            .epochs
            .iter()
            .map(|e| e.val_srcc_system)
            .filter(|v| !v.is_nan())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(log.best().val_srcc_system, max);
    }

    #[test]
    fn split_errors() {
        let train = data(10, |i| (i as f64, 3.0));
        let empty = data(0, |_| (0.0, 0.0));
        let one_sys = Dataset::new(
            vec![vec![1.0], vec![2.0]],
            vec![1.0, 2.0],
            vec!["a".into(), "a".into()],
        )
        .unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            fit(&Affine, vec![0.0; 2], &empty, &train, &cfg),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            fit(&Affine, vec![0.0; 2], &train, &empty, &cfg),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            fit(&Affine, vec![0.0; 2], &train, &one_sys, &cfg),
            Err(Error::SingleSystem(1))
        ));
        let bad = TrainConfig {
            batch_size: 0,
            ..cfg
        };
        assert!(fit(&Affine, vec![0.0; 2], &train, &train, &bad).is_err());
    }

    #[test]
    fn zero_residual_has_zero_subgradient() {
        let mut g = vec![9.0; 2];
        let x = vec![2.0];
        let loss = batch_l1_gradient(&Affine, &[1.0, 1.0], &[&x], &[3.0], &mut g);
        assert_eq!(loss, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn log_csv_layout() {
        let log = TrainingLog {
            epochs: vec![EpochRecord {
                epoch: 0,
                train_l1: 0.5,
                val_srcc_system: f64::NAN,
                val_l1: 0.25,
            }],
            best_epoch: 0,
        };
        assert_eq!(
            log.to_csv(),
            "epoch,train_l1,val_srcc_system,val_l1\n0,0.5,nan,0.25\n"
        );
    }
}
