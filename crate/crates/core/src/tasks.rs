//! Deterministic desk-scale tasks: data generation, training batches, and
//! fitness evaluation on validation / held-out splits.
//!
//! Fitness is higher-is-better everywhere: negated MSE for regression,
//! accuracy for classification. Splits are disjoint by construction and
//! immutable once generated.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{loss_and_grad, LossKind, NetworkState, Targets};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Regression,
    Spirals,
}

/// Targets for one split.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetData {
    Values(Tensor),
    Classes(Vec<usize>),
}

/// One immutable data split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub targets: TargetData,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A task: its splits, loss, and shapes.
#[derive(Debug, Clone)]
pub struct Task {
    pub kind: TaskKind,
    pub seed: u64,
    pub input_width: usize,
    pub output_width: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub train: Dataset,
    pub validation: Dataset,
    pub heldout: Dataset,
}

/// Fitness-bearing splits. The held-out split is reserved for soups and
/// final reporting; selection only ever sees validation fitness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    Heldout,
}

/// The regression target function on raw inputs in `[-1, 1]^4`:
/// `y = sin(3 x1) + x2^2 - 0.5 x3 x4`.
pub fn regression_target(x: &[f64]) -> f64 {
    (3.0 * x[0]).sin() + x[1] * x[1] - 0.5 * x[2] * x[3]
}

/// Synthetic regression, 4 inputs, 1 output, squared-error loss. Training
/// targets carry 0.1-std Gaussian noise; validation and held-out targets are
/// noiseless. Fitness is the negated validation MSE.
pub fn gen_regression_task(
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_held: usize,
    batch_size: usize,
) -> Result<Task> {
    for (name, n) in [("train", n_train), ("validation", n_val), ("heldout", n_held)] {
        if n == 0 {
            return Err(Error::InvalidConfig(format!("{name} split must be >= 1")));
        }
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    let mut rng = StreamRng::derive(seed, "task/regression", &[]);
    let make = |n: usize, noisy: bool, rng: &mut StreamRng| -> Result<Dataset> {
        let mut xs = Vec::with_capacity(n * 4);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let mut point = [0.0; 4];
            for v in &mut point {
                *v = rng.random_range(-1.0..=1.0);
            }
            let mut y = regression_target(&point);
            if noisy {
                let eps: f64 = StandardNormal.sample(rng);
                y += 0.1 * eps;
            }
            xs.extend_from_slice(&point);
            ys.push(y);
        }
        Ok(Dataset {
            x: Tensor::from_vec(&[n, 4], xs)?,
            targets: TargetData::Values(Tensor::from_vec(&[n, 1], ys)?),
        })
    };
    let train = make(n_train, true, &mut rng)?;
    let validation = make(n_val, false, &mut rng)?;
    let heldout = make(n_held, false, &mut rng)?;
    Ok(Task {
        kind: TaskKind::Regression,
        seed,
        input_width: 4,
        output_width: 1,
        batch_size,
        loss: LossKind::SquaredError,
        train,
        validation,
        heldout,
    })
}

/// Noiseless coordinates of a spiral-arm point: radius proportional to the
/// angle parameter `t in [0, 3*pi]`, the second arm rotated by pi.
pub fn spiral_point(arm: usize, t: f64) -> (f64, f64) {
    let r = t / (3.0 * std::f64::consts::PI);
    let theta = t + arm as f64 * std::f64::consts::PI;
    (r * theta.cos(), r * theta.sin())
}

/// Two interleaved spirals with Gaussian jitter; cross-entropy loss over two
/// classes; fitness is validation accuracy. Validation and held-out splits
/// hold `max(1, n_per_class/2)` points per class, sampled at phase-shifted
/// angles so the splits never coincide with training points.
pub fn gen_spirals_task(
    seed: u64,
    n_per_class: usize,
    noise_std: f64,
    batch_size: usize,
) -> Result<Task> {
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be >= 1".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    if !noise_std.is_finite() || noise_std < 0.0 {
        return Err(Error::InvalidConfig("noise_std must be finite and >= 0".into()));
    }
    let span = 3.0 * std::f64::consts::PI;
    let mut rng = StreamRng::derive(seed, "task/spirals", &[]);
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let make = |n: usize, phase: f64, rng: &mut StreamRng| -> Result<Dataset> {
        let mut xs = Vec::with_capacity(n * 2 * 2);
        let mut labels = Vec::with_capacity(n * 2);
        for arm in 0..2 {
            for i in 0..n {
                // phase 0 yields the exact endpoints t = 0 and t = span
                let t = if phase == 0.0 {
                    if n == 1 {
                        0.0
                    } else {
                        span * i as f64 / (n - 1) as f64
                    }
                } else {
                    span * (i as f64 + phase) / n as f64
                };
                let (px, py) = spiral_point(arm, t);
                let jx: f64 = jitter.sample(rng);
                let jy: f64 = jitter.sample(rng);
                xs.push(px + noise_std * jx);
                xs.push(py + noise_std * jy);
                labels.push(arm);
            }
        }
        Ok(Dataset {
            x: Tensor::from_vec(&[n * 2, 2], xs)?,
            targets: TargetData::Classes(labels),
        })
    };
    // golden-ratio phases keep split angles disjoint from the training grid
    let n_eval = (n_per_class / 2).max(1);
    let train = make(n_per_class, 0.0, &mut rng)?;
    let validation = make(n_eval, 0.381_966_011_250_105_1, &mut rng)?;
    let heldout = make(n_eval, 0.618_033_988_749_894_9, &mut rng)?;
    Ok(Task {
        kind: TaskKind::Spirals,
        seed,
        input_width: 2,
        output_width: 2,
        batch_size,
        loss: LossKind::CrossEntropy,
        train,
        validation,
        heldout,
    })
}

impl Task {
    pub fn split(&self, split: EvalSplit) -> &Dataset {
        match split {
            EvalSplit::Validation => &self.validation,
            EvalSplit::Heldout => &self.heldout,
        }
    }

    /// Gather a training batch by index.
    pub fn train_batch(&self, indices: &[usize]) -> Result<(Tensor, BatchTargets)> {
        let d = self.input_width;
        let mut xs = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            let row = &self.train.x.data()[i * d..(i + 1) * d];
            xs.extend_from_slice(row);
        }
        let x = Tensor::from_vec(&[indices.len(), d], xs)?;
        let targets = match &self.train.targets {
            TargetData::Values(t) => {
                let od = self.output_width;
                let mut vals = Vec::with_capacity(indices.len() * od);
                for &i in indices {
                    vals.extend_from_slice(&t.data()[i * od..(i + 1) * od]);
                }
                BatchTargets::Values(Tensor::from_vec(&[indices.len(), od], vals)?)
            }
            TargetData::Classes(c) => {
                BatchTargets::Classes(indices.iter().map(|&i| c[i]).collect())
            }
        };
        Ok((x, targets))
    }
}

/// Owned targets of a gathered batch.
pub enum BatchTargets {
    Values(Tensor),
    Classes(Vec<usize>),
}

impl BatchTargets {
    pub fn as_targets(&self) -> Targets<'_> {
        match self {
            BatchTargets::Values(t) => Targets::Values(t),
            BatchTargets::Classes(c) => Targets::Classes(c),
        }
    }
}

/// Metric of a network on one dataset: negated MSE for value targets,
/// accuracy for class targets. Returns `-inf` when outputs are non-finite.
pub fn dataset_metric(net: &NetworkState, task: &Task, ds: &Dataset) -> f64 {
    let (y, _) = match net.forward(&ds.x) {
        Ok(out) => out,
        Err(_) => return f64::NEG_INFINITY,
    };
    if !y.all_finite() {
        return f64::NEG_INFINITY;
    }
    match &ds.targets {
        TargetData::Values(t) => {
            let (mse, _) = loss_and_grad(task.loss, &y, &Targets::Values(t))
                .expect("shapes fixed by construction");
            -mse
        }
        TargetData::Classes(labels) => {
            let n = ds.len();
            let mut correct = 0usize;
            for (i, label) in labels.iter().enumerate() {
                let mut best = 0usize;
                let mut best_v = y.at2(i, 0);
                for c in 1..task.output_width {
                    let v = y.at2(i, c);
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                if best == *label {
                    correct += 1;
                }
            }
            correct as f64 / n as f64
        }
    }
}

/// Full-split fitness: deterministic, never mutates the network.
pub fn evaluate_fitness(net: &NetworkState, task: &Task, split: EvalSplit) -> f64 {
    if net.diverged {
        return f64::NEG_INFINITY;
    }
    dataset_metric(net, task, task.split(split))
}

/// Export one split as CSV for inspection: feature columns then the target.
pub fn dataset_csv(ds: &Dataset) -> String {
    use std::fmt::Write as _;
    let d = ds.x.cols();
    let mut out = String::new();
    for k in 0..d {
        let _ = write!(out, "x{k},");
    }
    out.push_str("target\n");
    for i in 0..ds.len() {
        for k in 0..d {
            let _ = write!(out, "{},", ds.x.at2(i, k));
        }
        match &ds.targets {
            TargetData::Values(t) => {
                let _ = writeln!(out, "{}", t.at2(i, 0));
            }
            TargetData::Classes(c) => {
                let _ = writeln!(out, "{}", c[i]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::MemberId;
    use crate::optim::OptimSpec;
    use crate::space::{DecodeContext, SpaceDef};
    use crate::tensor::InitKind;

    #[test]
    fn regression_target_values() {
        assert_eq!(regression_target(&[0.0, 0.0, 0.0, 0.0]), 0.0);
        // x = (0.5236, 0, 0, 0): y = sin(1.5708) which is 1 to ~7e-12
        let y = regression_target(&[0.5236, 0.0, 0.0, 0.0]);
        assert_eq!(y, (1.5708f64).sin());
        assert!((y - 1.0).abs() < 1e-9);
    }

    #[test]
    fn regression_datasets_reproducible() {
        let a = gen_regression_task(5, 32, 16, 16, 8).unwrap();
        let b = gen_regression_task(5, 32, 16, 16, 8).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.heldout, b.heldout);
        let c = gen_regression_task(6, 32, 16, 16, 8).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn spiral_generator_geometry() {
        // t = 0 on arm 0 sits at the start of the arm, at the origin
        let t0 = gen_spirals_task(1, 10, 0.0, 4).unwrap();
        assert_eq!(t0.train.x.at2(0, 0), 0.0);
        assert_eq!(t0.train.x.at2(0, 1), 0.0);
        // labels balanced: exactly n_per_class per class
        match &t0.train.targets {
            TargetData::Classes(labels) => {
                assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 10);
                assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 10);
            }
            _ => panic!("spirals are classification"),
        }
    }

    #[test]
    fn constant_classifier_scores_half_on_balanced_spirals() {
        let task = gen_spirals_task(2, 20, 0.1, 8).unwrap();
        let space = SpaceDef::default_space(false);
        // all-identity genome with zeroed head weights and equal biases:
        // constant equal logits, argmax tie broken to class 0
        let g = crate::space::Genome(vec![0, 0, 0, 0, 0, 0, 0]);
        let ctx = DecodeContext {
            member: MemberId(0),
            input_width: 2,
            output_width: 2,
            init: InitKind::UniformHe,
            optim: OptimSpec::adam(1e-3),
        };
        let mut net = space
            .decode(&g, &ctx, crate::rng::StreamRng::derive(0, "d", &[]))
            .unwrap();
        net.head.w.value = Tensor::zeros(&[2, 32]).unwrap();
        net.head.b.value = Tensor::zeros(&[2]).unwrap();
        let acc = evaluate_fitness(&net, &task, EvalSplit::Validation);
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn evaluation_is_deterministic_and_pure() {
        let task = gen_regression_task(3, 16, 8, 8, 4).unwrap();
        let space = SpaceDef::default_space(false);
        let g = space.sample_genome(&mut crate::rng::StreamRng::derive(1, "g", &[]));
        let ctx = DecodeContext {
            member: MemberId(0),
            input_width: 4,
            output_width: 1,
            init: InitKind::UniformHe,
            optim: OptimSpec::adam(1e-3),
        };
        let net = space
            .decode(&g, &ctx, crate::rng::StreamRng::derive(1, "d", &[]))
            .unwrap();
        let before = net.clone();
        let f1 = evaluate_fitness(&net, &task, EvalSplit::Validation);
        let f2 = evaluate_fitness(&net, &task, EvalSplit::Validation);
        assert_eq!(f1, f2);
        assert!(net.weights_bitwise_eq(&before));
    }

    #[test]
    fn perfect_regression_predictor_scores_zero() {
        // a "network" evaluated against its own outputs: craft a dataset
        // whose targets are exactly the network outputs
        let task = gen_regression_task(4, 8, 8, 8, 4).unwrap();
        let space = SpaceDef::default_space(false);
        let g = space.sample_genome(&mut crate::rng::StreamRng::derive(2, "g", &[]));
        let ctx = DecodeContext {
            member: MemberId(0),
            input_width: 4,
            output_width: 1,
            init: InitKind::UniformHe,
            optim: OptimSpec::adam(1e-3),
        };
        let net = space
            .decode(&g, &ctx, crate::rng::StreamRng::derive(2, "d", &[]))
            .unwrap();
        let (y, _) = net.forward(&task.validation.x).unwrap();
        let mut rigged = task.clone();
        rigged.validation = Dataset {
            x: task.validation.x.clone(),
            targets: TargetData::Values(y),
        };
        assert_eq!(evaluate_fitness(&net, &rigged, EvalSplit::Validation), 0.0);
    }

    #[test]
    fn csv_export_round_trips_by_eye() {
        let task = gen_spirals_task(5, 4, 0.05, 2).unwrap();
        let csv = dataset_csv(&task.train);
        assert_eq!(csv.lines().next().unwrap(), "x0,x1,target");
        assert_eq!(csv.lines().count(), 1 + 8);
        assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 3));
        let reg = gen_regression_task(5, 4, 2, 2, 2).unwrap();
        let csv = dataset_csv(&reg.validation);
        assert_eq!(csv.lines().next().unwrap(), "x0,x1,x2,x3,target");
    }

    #[test]
    fn reference_network_learns_the_spirals() {
        // task learnability oracle: a width-32, 3-residual-layer network
        // trained 200 epochs exceeds 95% train accuracy
        let task = gen_spirals_task(7, 100, 0.05, 32).unwrap();
        let space = SpaceDef::default_space(false);
        // residual x0.5 layers with tanh everywhere, normalization off
        let g = crate::space::Genome(vec![2, 2, 2, 1, 1, 1, 0]);
        let ctx = DecodeContext {
            member: MemberId(0),
            input_width: 2,
            output_width: 2,
            init: InitKind::UniformHe,
            optim: OptimSpec::adam(3e-3),
        };
        let mut net = space
            .decode(&g, &ctx, crate::rng::StreamRng::derive(1, "ref", &[]))
            .unwrap();
        net.rng = crate::rng::StreamRng::derive(1, "ref-train", &[]);
        crate::runner::train_member(&mut net, 200, &task).unwrap();
        let train_acc = dataset_metric(&net, &task, &task.train);
        assert!(
            train_acc > 0.95,
            "reference training reached only {train_acc}"
        );
    }
}
