//! Maximum-likelihood training of a coupling flow with Adam.
//!
//! Data are standardized first; losses are average negative log-likelihoods
//! in standardized space. Each mini-batch gradient is split into fixed-size
//! chunks that are reduced in index order, so results do not depend on the
//! number of worker threads.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{FlowArch, FlowModel, Standardizer};
use crate::error::{Error, Result};
use crate::stats::{derive_seed, rng_from_seed, std_normal_log_pdf, RowMatrix};

const GRAD_CHUNK: usize = 16;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub layers: usize,
    pub bins: usize,
    pub hidden: Vec<usize>,
    pub tail_bound: f64,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = FlowArch::default();
        Self {
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            layers: arch.layers,
            bins: arch.bins,
            hidden: arch.hidden,
            tail_bound: arch.tail_bound,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn arch(&self) -> FlowArch {
        FlowArch {
            layers: self.layers,
            bins: self.bins,
            hidden: self.hidden.clone(),
            tail_bound: self.tail_bound,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "batch size and learning rate must be positive".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "validation fraction must lie in (0, 1)".into(),
            ));
        }
        self.arch().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub first_batch_loss: f64,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_val_nll: f64,
    pub best_val_nll: f64,
    pub best_epoch: usize,
    pub curve: Vec<EpochStats>,
}

/// Optimizer state needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub current: Vec<f64>,
    pub best_val_nll: f64,
    pub best_epoch: usize,
    pub initial_val_nll: f64,
}

/// Train/validation split of a dataset with the standardizer fit on the training part.
pub struct SplitData {
    pub standardizer: Standardizer,
    pub train: RowMatrix,
    pub validation: RowMatrix,
}

pub fn split_dataset(data: &RowMatrix, config: &TrainConfig) -> Result<SplitData> {
    if data.rows() < 2 {
        return Err(Error::InvalidConfig("training needs at least two rows".into()));
    }
    if !data.all_finite() {
        return Err(Error::NonFinite("training data"));
    }
    let n = data.rows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(derive_seed(config.seed, 1)));
    let n_val = ((config.validation_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let validation = data.select_rows(&idx[..n_val]);
    let train_raw = data.select_rows(&idx[n_val..]);
    let standardizer = Standardizer::fit(&train_raw)?;
    let standardize_all = |m: &RowMatrix| {
        let mut out = RowMatrix::empty(m.cols());
        for r in m.iter_rows() {
            out.push_row(&standardizer.standardize(r));
        }
        out
    };
    Ok(SplitData {
        train: standardize_all(&train_raw),
        validation: standardize_all(&validation),
        standardizer,
    })
}

/// Negative log-likelihood of one standardized point and its gradient.
fn point_loss_grad(model: &FlowModel, z: &[f64], grads: &mut [Vec<f64>]) -> f64 {
    let layers = model.layers();
    let d = layers.len();
    // stages[l] is the input of layer l in the density direction
    let mut stages: Vec<Vec<f64>> = vec![Vec::new(); d + 1];
    stages[d] = z.to_vec();
    let mut ld = 0.0;
    for l in (0..d).rev() {
        let mut out = vec![0.0; z.len()];
        ld += layers[l].inverse(&stages[l + 1], &mut out);
        stages[l] = out;
    }
    let u = &stages[0];
    let loss = -(std_normal_log_pdf(u) + ld);
    let mut g = u.clone();
    for l in 0..d {
        g = layers[l].backward_inverse(&stages[l + 1], &g, -1.0, &mut grads[l]);
    }
    loss
}

fn point_loss(model: &FlowModel, z: &[f64]) -> f64 {
    let mut cur = z.to_vec();
    let mut next = vec![0.0; z.len()];
    let mut ld = 0.0;
    for layer in model.layers().iter().rev() {
        ld += layer.inverse(&cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    -(std_normal_log_pdf(&cur) + ld)
}

/// Mean NLL of standardized points, reduced in fixed chunk order.
pub fn mean_nll(model: &FlowModel, standardized: &RowMatrix) -> f64 {
    let n = standardized.rows();
    if n == 0 {
        return f64::NAN;
    }
    let partial: Vec<f64> = (0..n.div_ceil(GRAD_CHUNK))
        .into_par_iter()
        .map(|c| {
            let hi = ((c + 1) * GRAD_CHUNK).min(n);
            let mut s = 0.0;
            for i in c * GRAD_CHUNK..hi {
                s += point_loss(model, standardized.row(i));
            }
            s
        })
        .collect();
    partial.iter().sum::<f64>() / n as f64
}

/// Mean NLL over the given standardized rows and its gradient with respect to
/// [`FlowModel::parameters`].
pub fn loss_and_gradient(model: &FlowModel, standardized: &RowMatrix, rows: &[usize]) -> (f64, Vec<f64>) {
    let shapes: Vec<usize> = model.layers().iter().map(|l| l.params().len()).collect();
    let partial: Vec<(f64, Vec<Vec<f64>>)> = rows
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
            let mut loss = 0.0;
            for &i in chunk {
                loss += point_loss_grad(model, standardized.row(i), &mut grads);
            }
            (loss, grads)
        })
        .collect();
    let mut total = 0.0;
    let mut flat = vec![0.0; model.parameter_count()];
    for (loss, grads) in &partial {
        total += loss;
        let mut off = 0;
        for g in grads {
            for (a, b) in flat[off..off + g.len()].iter_mut().zip(g) {
                *a += b;
            }
            off += g.len();
        }
    }
    let n = rows.len() as f64;
    flat.iter_mut().for_each(|g| *g /= n);
    (total / n, flat)
}

pub struct Trainer {
    config: TrainConfig,
    model: FlowModel,
    best: FlowModel,
    state: TrainState,
    report: TrainReport,
}

impl Trainer {
    /// Fresh identity-initialized model with the standardizer of `split`.
    pub fn new(config: TrainConfig, dim: usize, split: &SplitData) -> Result<Self> {
        config.validate()?;
        let model = FlowModel::initialized(dim, config.arch(), split.standardizer.clone(), config.seed)?;
        let initial = mean_nll(&model, &split.validation);
        let n = model.parameter_count();
        let state = TrainState {
            epochs_done: 0,
            step: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            current: model.parameters(),
            best_val_nll: initial,
            best_epoch: 0,
            initial_val_nll: initial,
        };
        Ok(Self {
            report: TrainReport {
                initial_val_nll: initial,
                best_val_nll: initial,
                best_epoch: 0,
                curve: Vec::new(),
            },
            best: model.clone(),
            model,
            config,
            state,
        })
    }

    /// Continues from a saved state; `best` is the model that was returned
    /// when the state was saved.
    pub fn resume(config: TrainConfig, best: FlowModel, state: TrainState) -> Result<Self> {
        config.validate()?;
        let mut model = best.clone();
        model.set_parameters(&state.current)?;
        if state.first_moment.len() != model.parameter_count()
            || state.second_moment.len() != model.parameter_count()
        {
            return Err(Error::Checkpoint("optimizer state does not match model".into()));
        }
        Ok(Self {
            report: TrainReport {
                initial_val_nll: state.initial_val_nll,
                best_val_nll: state.best_val_nll,
                best_epoch: state.best_epoch,
                curve: Vec::new(),
            },
            best,
            model,
            config,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn best_model(&self) -> &FlowModel {
        &self.best
    }

    pub fn current_model(&self) -> &FlowModel {
        &self.model
    }

    /// Runs one epoch over the shuffled training rows.
    pub fn run_epoch(&mut self, split: &SplitData) -> Result<EpochStats> {
        let epoch = self.state.epochs_done;
        let n = split.train.rows();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(self.config.seed, 1000 + epoch as u64)));

        let mut params = self.model.parameters();
        let mut first_batch_loss = f64::NAN;
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let (loss, grad) = loss_and_gradient(&self.model, &split.train, batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            if b == 0 {
                first_batch_loss = loss;
            }
            loss_sum += loss * batch.len() as f64;
            self.adam_step(&mut params, &grad);
            self.model.set_parameters(&params)?;
        }
        let val_nll = mean_nll(&self.model, &split.validation);
        if !val_nll.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                loss: val_nll,
            });
        }
        self.state.epochs_done += 1;
        self.state.current = params;
        if val_nll < self.state.best_val_nll {
            self.state.best_val_nll = val_nll;
            self.state.best_epoch = self.state.epochs_done;
            self.best = self.model.clone();
        }
        let stats = EpochStats {
            epoch: self.state.epochs_done,
            first_batch_loss,
            train_nll: loss_sum / n as f64,
            val_nll,
        };
        self.report.best_val_nll = self.state.best_val_nll;
        self.report.best_epoch = self.state.best_epoch;
        self.report.curve.push(stats.clone());
        log::debug!(
            "epoch {} train {:.5} val {:.5}",
            stats.epoch,
            stats.train_nll,
            stats.val_nll
        );
        Ok(stats)
    }

    fn adam_step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let lr = self.config.learning_rate;
        for i in 0..params.len() {
            let g = grad[i];
            let m = &mut self.state.first_moment[i];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            let v = &mut self.state.second_moment[i];
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mh = self.state.first_moment[i] / c1;
            let vh = self.state.second_moment[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }

    /// Trains until `config.epochs` epochs have been completed in total.
    pub fn train_to_completion(&mut self, split: &SplitData) -> Result<()> {
        while self.state.epochs_done < self.config.epochs {
            self.run_epoch(split)?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (FlowModel, TrainReport, TrainState) {
        (self.best, self.report, self.state)
    }
}

/// Fits a flow to `data` and returns the model with the lowest validation NLL
/// seen (the identity-initialized model when no epoch improves on it).
pub fn fit(data: &RowMatrix, config: &TrainConfig) -> Result<(FlowModel, TrainReport)> {
    let split = split_dataset(data, config)?;
    let mut trainer = Trainer::new(config.clone(), data.cols(), &split)?;
    trainer.train_to_completion(&split)?;
    let (model, report, _) = trainer.into_parts();
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn gaussian_data(n: usize, seed: u64) -> RowMatrix {
        let mut rng = rng_from_seed(seed);
        let mut m = RowMatrix::zeros(n, 2);
        for i in 0..n {
            m.row_mut(i)[0] = 2.0 + 3.0 * rng.sample::<f64, _>(StandardNormal);
            m.row_mut(i)[1] = -1.0 + 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
        m
    }

    #[test]
    fn gradient_matches_central_differences() {
        let arch = FlowArch {
            layers: 1,
            bins: 4,
            hidden: vec![5, 5],
            tail_bound: 3.0,
        };
        let model = FlowModel::with_random_parameters(2, arch, 17, 0.6).unwrap();
        let data = gaussian_data(5, 2);
        let z = {
            let s = Standardizer::fit(&data).unwrap();
            let mut m = RowMatrix::empty(2);
            for r in data.iter_rows() {
                m.push_row(&s.standardize(r));
            }
            m
        };
        let rows: Vec<usize> = (0..5).collect();
        let (_, grad) = loss_and_gradient(&model, &z, &rows);
        let params = model.parameters();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += eps;
            let mut mp = model.clone();
            mp.set_parameters(&p).unwrap();
            p[i] -= 2.0 * eps;
            let mut mm = model.clone();
            mm.set_parameters(&p).unwrap();
            let fd = (mean_nll(&mp, &z) - mean_nll(&mm, &z)) / (2.0 * eps);
            let rel = (grad[i] - fd).abs() / (grad[i].abs().max(fd.abs()).max(1e-3));
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn zero_epochs_returns_identity_layers() {
        let data = gaussian_data(200, 3);
        let cfg = TrainConfig {
            epochs: 0,
            hidden: vec![8, 8],
            ..TrainConfig::default()
        };
        let (model, report) = fit(&data, &cfg).unwrap();
        let u = [0.37, -1.2];
        let (z, lds) = model.layer_log_dets(&u).unwrap();
        assert_eq!(z, u.to_vec());
        assert!(lds.iter().all(|l| *l == 0.0));
        let split = split_dataset(&data, &cfg).unwrap();
        let base: f64 = split
            .validation
            .iter_rows()
            .map(|r| -std_normal_log_pdf(r))
            .sum::<f64>()
            / split.validation.rows() as f64;
        assert!((report.initial_val_nll - base).abs() < 1e-12);
        assert_eq!(report.best_val_nll, report.initial_val_nll);
    }

    #[test]
    fn training_does_not_worsen_validation_nll() {
        let data = gaussian_data(600, 4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 64,
            hidden: vec![8, 8],
            layers: 2,
            ..TrainConfig::default()
        };
        let (_, report) = fit(&data, &cfg).unwrap();
        assert!(report.best_val_nll <= report.initial_val_nll);
        assert_eq!(report.curve.len(), 3);
    }

    #[test]
    fn training_is_reproducible() {
        let data = gaussian_data(300, 5);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 50,
            hidden: vec![6],
            layers: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let (a, _) = fit(&data, &cfg).unwrap();
        let (b, _) = fit(&data, &cfg).unwrap();
        assert_eq!(a.parameters(), b.parameters());
    }

    #[test]
    fn rejects_bad_inputs() {
        let one = RowMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(fit(&one, &TrainConfig::default()).is_err());
        let nan = RowMatrix::from_rows(&[[1.0, f64::NAN], [2.0, 3.0]]).unwrap();
        assert!(matches!(fit(&nan, &TrainConfig::default()), Err(Error::NonFinite(_))));
        let constant = RowMatrix::from_rows(&[[1.0, 2.0], [1.0, 3.0], [1.0, 5.0], [1.0, 0.0]]).unwrap();
        assert!(matches!(
            fit(&constant, &TrainConfig::default()),
            Err(Error::SingularStandardizer(0))
        ));
        let bad = TrainConfig {
            validation_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(fit(&gaussian_data(10, 1), &bad).is_err());
    }
}
