//! Optimization loops: supervised forecasting, pretraining, linear probing
//! and fine-tuning, with early stopping on the validation loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataSplits, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::{SorMamba, Trainable};
use crate::nn::{Bound, ParamStore};
use crate::objectives::{
    ccm_objective, global_corr, mae, masked_modeling_loss, mse, mse_var, reconstruction_loss, total_loss, CorrMatrix, LossReport,
    Metric,
};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainTask {
    #[default]
    None,
    Ccm,
    Mm,
    Rec,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Supervised from scratch.
    #[default]
    Sl,
    /// Head only on a pretrained encoder.
    Lp,
    /// Every forecasting parameter on a pretrained encoder.
    Ft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patience: usize,
    /// Cap on optimizer steps per epoch; all batches when unset.
    pub max_batches_per_epoch: Option<usize>,
    /// Cap on validation windows per evaluation; all when unset.
    pub max_val_windows: Option<usize>,
    pub pretrain_task: PretrainTask,
    pub pretrain_epochs: usize,
    pub eval_mode: EvalMode,
    pub mask_ratio: f64,
    pub ccm_metric: Metric,
    /// Target the dataset-level correlation instead of per-window matrices.
    pub ccm_global: bool,
    /// Add the full-reconstruction loss to the correlation objective.
    pub ccm_with_rec: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            patience: 3,
            max_batches_per_epoch: None,
            max_val_windows: None,
            pretrain_task: PretrainTask::None,
            pretrain_epochs: 10,
            eval_mode: EvalMode::Sl,
            mask_ratio: 0.5,
            ccm_metric: Metric::L2,
            ccm_global: false,
            ccm_with_rec: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.pretrain_epochs == 0 {
            return Err(Error::Config("train epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("train.mask_ratio must be in (0, 1), got {}", self.mask_ratio)));
        }
        if (self.pretrain_task == PretrainTask::None) != (self.eval_mode == EvalMode::Sl) {
            return Err(Error::Config(
                "train.eval_mode lp/ft requires train.pretrain_task, and sl requires none".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// Applies one update from `grads[i]` (aligned with store order; `None` skips).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let i = id.0;
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id).data_mut();
            for k in 0..g.numel() {
                let gk = g.data()[k];
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                p[k] -= self.lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
            }
        }
    }
}

/// What a loop minimizes.
#[derive(Clone, Debug)]
pub enum Objective {
    Forecast,
    Ccm {
        metric: Metric,
        global: Option<CorrMatrix>,
        with_rec: bool,
    },
    Mm {
        ratio: f64,
    },
    Rec,
}

impl Objective {
    fn trainable(&self, forecast_scope: Trainable) -> Trainable {
        match self {
            Self::Forecast => forecast_scope,
            Self::Ccm { .. } => Trainable::EncoderAndCcm,
            Self::Mm { .. } | Self::Rec => Trainable::EncoderAndRecon,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Forecast => "forecast",
            Self::Ccm { .. } => "ccm",
            Self::Mm { .. } => "mm",
            Self::Rec => "rec",
        }
    }
}

/// Loss breakdown logged after every optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub objective: String,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub initial_val: f64,
}

impl TrainOutcome {
    /// Per-layer regularization averaged over the final epoch's steps.
    pub fn final_epoch_reg(&self) -> Vec<f64> {
        let last = self.steps.last().map_or(0, |s| s.epoch);
        let rows: Vec<&StepLog> = self.steps.iter().filter(|s| s.epoch == last).collect();
        let layers = rows.first().map_or(0, |s| s.loss.reg_per_layer.len());
        (0..layers)
            .map(|l| rows.iter().map(|s| s.loss.reg_per_layer[l]).sum::<f64>() / rows.len() as f64)
            .collect()
    }
}

fn collect_grads(tape: &Tape, p: &Bound) -> Vec<Option<Tensor>> {
    p.vars().iter().map(|&v| tape.grad(v)).collect()
}

fn batch_loss(
    model: &SorMamba,
    tape: &Tape,
    p: &Bound,
    objective: &Objective,
    x: &Tensor,
    y: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossReport)> {
    match objective {
        Objective::Forecast => {
            let orders = model.config.order_mode.sample(model.config.channels, rng);
            let f = model.forward(tape, p, x, &orders)?;
            let yv = tape.constant(y.clone());
            let fcst = mse_var(tape, f.yhat, yv)?;
            total_loss(tape, fcst, &f.regs, model.config.lambda)
        }
        Objective::Ccm {
            metric,
            global,
            with_rec,
        } => {
            let ccm = ccm_objective(tape, p, model, x, *metric, global.as_ref())?;
            let ccm_v = tape.value(ccm).item();
            let loss = if *with_rec {
                tape.add(ccm, reconstruction_loss(tape, p, model, x)?)?
            } else {
                ccm
            };
            let total = tape.value(loss).item();
            Ok((
                loss,
                LossReport {
                    fcst: 0.0,
                    reg_per_layer: Vec::new(),
                    total,
                    ccm: Some(ccm_v),
                },
            ))
        }
        Objective::Mm { ratio } => {
            let l = masked_modeling_loss(tape, p, model, x, *ratio, rng)?;
            Ok((l, task_report(tape, l)))
        }
        Objective::Rec => {
            let l = reconstruction_loss(tape, p, model, x)?;
            Ok((l, task_report(tape, l)))
        }
    }
}

fn task_report(tape: &Tape, l: Var) -> LossReport {
    LossReport {
        fcst: 0.0,
        reg_per_layer: Vec::new(),
        total: tape.value(l).item(),
        ccm: None,
    }
}

fn eval_indices(ds: &WindowedDataset, cap: Option<usize>) -> Vec<usize> {
    let n = ds.len();
    match cap {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

/// Mean validation loss of `objective` without gradients; masks use a fixed seed.
pub fn validation_loss(
    model: &SorMamba,
    ds: &WindowedDataset,
    objective: &Objective,
    batch_size: usize,
    cap: Option<usize>,
    seed: u64,
) -> Result<f64> {
    if let Objective::Forecast = objective {
        let idx = eval_indices(ds, cap);
        return Ok(forecast_metrics(model, ds, &idx, batch_size)?.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5A1);
    let idx = eval_indices(ds, cap);
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size) {
        let (x, y) = ds.batch(chunk);
        let tape = Tape::new();
        let p = model.bind(&tape, Trainable::None);
        let (_, rep) = batch_loss(model, &tape, &p, objective, &x, &y, &mut rng)?;
        sum += rep.ccm.unwrap_or(rep.total) * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(sum / count as f64)
}

/// Test-style `(mse, mae)` of forecasts over windows `idx`.
pub fn forecast_metrics(model: &SorMamba, ds: &WindowedDataset, idx: &[usize], batch_size: usize) -> Result<(f64, f64)> {
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for chunk in idx.chunks(batch_size) {
        let (x, y) = ds.batch(chunk);
        let (yhat, _) = model.forecast(&x)?;
        let k = y.numel();
        se += mse(&yhat, &y)? * k as f64;
        ae += mae(&yhat, &y)? * k as f64;
        n += k;
    }
    if n == 0 {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    Ok((se / n as f64, ae / n as f64))
}

/// Runs the optimization loop in place and restores the best-validation parameters.
pub fn run(
    model: &mut SorMamba,
    data: &DataSplits,
    cfg: &TrainConfig,
    objective: &Objective,
    scope: Trainable,
    epochs: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let trainable = objective.trainable(scope);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, model.params.len());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let initial_val = validation_loss(model, &data.val, objective, cfg.batch_size, cfg.max_val_windows, cfg.seed)?;
    let mut best = (initial_val, 0usize, model.params.clone());
    let mut steps = Vec::new();
    let mut epoch_logs = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let n_batches = order
            .len()
            .div_ceil(cfg.batch_size)
            .min(cfg.max_batches_per_epoch.unwrap_or(usize::MAX));
        let mut train_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).take(n_batches).enumerate() {
            let (x, y) = data.train.batch(chunk);
            let tape = Tape::new();
            let p = model.bind(&tape, trainable);
            let (loss, report) = batch_loss(model, &tape, &p, objective, &x, &y, &mut rng)?;
            if !report.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail: format!("{report:?}, first window index {}", chunk[0]),
                });
            }
            tape.backward(loss)?;
            adam.step(&mut model.params, &collect_grads(&tape, &p));
            train_sum += report.total;
            steps.push(StepLog {
                epoch,
                batch: bi,
                loss: report,
            });
        }
        let val = validation_loss(model, &data.val, objective, cfg.batch_size, cfg.max_val_windows, cfg.seed)?;
        epoch_logs.push(EpochLog {
            epoch,
            train_loss: train_sum / n_batches.max(1) as f64,
            val_loss: val,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if val < best.0 {
            best = (val, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                break;
            }
        }
    }
    model.params = best.2;
    Ok(TrainOutcome {
        objective: objective.name().into(),
        steps,
        epochs: epoch_logs,
        best_epoch: best.1,
        best_val: best.0,
        initial_val,
    })
}

pub fn train_supervised(model: &mut SorMamba, data: &DataSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(model, data, cfg, &Objective::Forecast, Trainable::All, cfg.epochs)
}

pub fn pretrain_objective(cfg: &TrainConfig, task: PretrainTask, global: Option<CorrMatrix>) -> Result<Objective> {
    Ok(match task {
        PretrainTask::None => return Err(Error::Config("pretrain task must be ccm, mm or rec".into())),
        PretrainTask::Ccm => Objective::Ccm {
            metric: cfg.ccm_metric,
            global: if cfg.ccm_global { global } else { None },
            with_rec: cfg.ccm_with_rec,
        },
        PretrainTask::Mm => Objective::Mm { ratio: cfg.mask_ratio },
        PretrainTask::Rec => Objective::Rec,
    })
}

/// Optimizes the encoder and the task head; the forecasting head is untouched.
pub fn pretrain(
    model: &mut SorMamba,
    data: &DataSplits,
    task: PretrainTask,
    cfg: &TrainConfig,
    global: Option<CorrMatrix>,
) -> Result<TrainOutcome> {
    if cfg.ccm_global && global.is_none() && task == PretrainTask::Ccm {
        return Err(Error::Config("global correlation target requested but not supplied".into()));
    }
    let objective = pretrain_objective(cfg, task, global)?;
    run(model, data, cfg, &objective, Trainable::All, cfg.pretrain_epochs)
}

pub fn linear_probe(model: &mut SorMamba, data: &DataSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(model, data, cfg, &Objective::Forecast, Trainable::HeadOnly, cfg.epochs)
}

pub fn fine_tune(model: &mut SorMamba, data: &DataSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(model, data, cfg, &Objective::Forecast, Trainable::All, cfg.epochs)
}

/// Every stage implied by `cfg`: supervised training alone, or pretraining
/// followed by linear probing or fine-tuning.
pub fn train_pipeline(model: &mut SorMamba, data: &DataSplits, cfg: &TrainConfig) -> Result<Vec<TrainOutcome>> {
    if cfg.pretrain_task == PretrainTask::None {
        return Ok(vec![train_supervised(model, data, cfg)?]);
    }
    let global = if cfg.ccm_global {
        Some(global_corr(&data.train.rows)?)
    } else {
        None
    };
    let pre = pretrain(model, data, cfg.pretrain_task, cfg, global)?;
    let adapt = match cfg.eval_mode {
        EvalMode::Lp => linear_probe(model, data, cfg)?,
        _ => fine_tune(model, data, cfg)?,
    };
    Ok(vec![pre, adapt])
}

/// Test `(mse, mae)` over every test window.
pub fn evaluate(model: &SorMamba, test: &WindowedDataset, batch_size: usize) -> Result<(f64, f64)> {
    if test.horizon != model.config.horizon || test.lookback != model.config.lookback {
        return Err(Error::Config(format!(
            "model expects L={} H={}, data has L={} H={}",
            model.config.lookback, model.config.horizon, test.lookback, test.horizon
        )));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    forecast_metrics(model, test, &idx, batch_size)
}

/// Test metrics with the input channels reordered by `perm` and predictions
/// mapped back to the original order.
pub fn evaluate_permuted(model: &SorMamba, test: &WindowedDataset, perm: &[usize], batch_size: usize) -> Result<(f64, f64)> {
    let inv = crate::blocks::inverse_permutation(perm);
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, y) = test.batch(chunk);
        let xp = tensor::gather_axis(&x, 2, perm)?;
        let (yp, _) = model.forecast(&xp)?;
        let yhat = tensor::gather_axis(&yp, 2, &inv)?;
        let k = y.numel();
        se += mse(&yhat, &y)? * k as f64;
        ae += mae(&yhat, &y)? * k as f64;
        n += k;
    }
    Ok((se / n as f64, ae / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, synthetic_series, SplitFamily, SyntheticSpec};
    use crate::model::ModelConfig;

    fn setup() -> (SorMamba, DataSplits, TrainConfig) {
        let s = synthetic_series(&SyntheticSpec {
            len: 400,
            channels: 4,
            ..Default::default()
        })
        .unwrap();
        let data = make_windows(&s, SplitFamily::Ratio712, 16, 4).unwrap();
        let model = SorMamba::new(
            ModelConfig {
                lookback: 16,
                horizon: 4,
                channels: 4,
                d_model: 8,
                layers: 1,
                d_state: 4,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            max_batches_per_epoch: Some(6),
            lr: 3e-3,
            ..TrainConfig::default()
        };
        (model, data, cfg)
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(vec![1.0, -1.0]));
        let mut adam = Adam::new(0.1, 1);
        adam.step(&mut store, &[Some(Tensor::from_vec(vec![2.0, -0.5]))]);
        let w = store.get(crate::nn::ParamId(0)).data();
        assert!((w[0] - 0.9).abs() < 1e-8 && (w[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn supervised_improves_and_is_deterministic() {
        let (m0, data, cfg) = setup();
        let mut a = m0.clone();
        let out = train_supervised(&mut a, &data, &cfg).unwrap();
        assert!(out.best_val < out.initial_val);
        for s in &out.steps {
            assert_eq!(s.loss.total, s.loss.recompute_total(a.config.lambda));
        }
        let mut b = m0.clone();
        train_supervised(&mut b, &data, &cfg).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn lambda_zero_total_is_fcst() {
        let (mut m, data, cfg) = setup();
        m.config.lambda = 0.0;
        let out = train_supervised(&mut m, &data, &TrainConfig { epochs: 1, ..cfg }).unwrap();
        assert!(out.steps.iter().all(|s| s.loss.total.to_bits() == s.loss.fcst.to_bits()));
    }

    #[test]
    fn probe_freezes_encoder_and_finetune_moves_it() {
        let (m0, data, cfg) = setup();
        let cfg = TrainConfig { epochs: 1, ..cfg };
        let mut lp = m0.clone();
        linear_probe(&mut lp, &data, &cfg).unwrap();
        let mut ft = m0.clone();
        fine_tune(&mut ft, &data, &cfg).unwrap();
        for (id, name, t) in m0.params.iter() {
            if !name.starts_with("head.") {
                assert_eq!(lp.params.get(id), t, "{name}");
            }
        }
        assert_ne!(ft.params.get(ft.params.find("embed.weight").unwrap()), m0.params.get(m0.params.find("embed.weight").unwrap()));
    }

    #[test]
    fn pretraining_leaves_forecast_head() {
        let (m0, data, cfg) = setup();
        for task in [PretrainTask::Ccm, PretrainTask::Mm, PretrainTask::Rec] {
            let mut m = m0.clone();
            pretrain(&mut m, &data, task, &TrainConfig { pretrain_epochs: 1, ..cfg.clone() }, None).unwrap();
            let h = m.params.find("head.weight").unwrap();
            assert_eq!(m.params.get(h), m0.params.get(h));
        }
        assert!(pretrain(&mut m0.clone(), &data, PretrainTask::None, &cfg, None).is_err());
    }

    #[test]
    fn oracle_and_last_value_metrics() {
        let (_, data, _) = setup();
        let ds = &data.test;
        let (x, y) = ds.batch(&[0, 1, 2]);
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        let mut naive = y.clone();
        let (h, c) = (ds.horizon, ds.channels());
        let mut se = 0.0;
        for b in 0..3 {
            for t in 0..h {
                for ci in 0..c {
                    let last = x.get(&[b, ds.lookback - 1, ci]);
                    naive.set(&[b, t, ci], last);
                    se += (y.get(&[b, t, ci]) - last).powi(2);
                }
            }
        }
        let m = mse(&naive, &y).unwrap();
        assert!(m > 0.0 && (m - se / (3 * h * c) as f64).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
