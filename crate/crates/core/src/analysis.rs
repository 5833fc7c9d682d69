//! Order-bias, permutation-robustness, correlation-preservation, efficiency
//! and missingness analyses.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    channel_permutation, inject_missingness, make_windows, DataSplits, PermuteMode, RawSeries, Split, SplitFamily,
    WindowedDataset,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamCounts, SorMamba, Trainable};
use crate::objectives::{ccm_loss, mse_var, Metric};
use crate::tape::Tape;
use crate::tensor::{self, Tensor};
use crate::train::{evaluate, evaluate_permuted, train_supervised, TrainConfig};

/// Test error under the original and the reversed channel order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasGap {
    pub mse_fwd: f64,
    pub mse_rev: f64,
    pub abs_gap: f64,
    /// `(mse_rev − mse_fwd) / mse_fwd`.
    pub rel_gap: f64,
}

pub fn bias_gap(mse_fwd: f64, mse_rev: f64) -> BiasGap {
    let rel_gap = if mse_fwd == mse_rev { 0.0 } else { (mse_rev - mse_fwd) / mse_fwd };
    BiasGap {
        mse_fwd,
        mse_rev,
        abs_gap: (mse_fwd - mse_rev).abs(),
        rel_gap,
    }
}

/// One model evaluated on the test split in both channel orders.
pub fn bias_metric(model: &SorMamba, test: &WindowedDataset, batch_size: usize) -> Result<BiasGap> {
    let c = test.channels();
    let (fwd, _) = evaluate(model, test, batch_size)?;
    let rev: Vec<usize> = (0..c).rev().collect();
    let (rev, _) = evaluate_permuted(model, test, &rev, batch_size)?;
    Ok(bias_gap(fwd, rev))
}

/// Two models, one trained per channel order, each evaluated in its own order.
pub fn bias_metric_two_models(
    fwd_model: &SorMamba,
    fwd_test: &WindowedDataset,
    rev_model: &SorMamba,
    rev_test: &WindowedDataset,
    batch_size: usize,
) -> Result<BiasGap> {
    let (a, _) = evaluate(fwd_model, fwd_test, batch_size)?;
    let (b, _) = evaluate(rev_model, rev_test, batch_size)?;
    Ok(bias_gap(a, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessResult {
    pub permutations: Vec<Vec<usize>>,
    pub test_mse: Vec<f64>,
    /// Per-layer regularization averaged over each run's final epoch.
    pub final_reg: Vec<Vec<f64>>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `k` seeded random channel orders.
pub fn random_permutations(channels: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| channel_permutation(channels, PermuteMode::FixedRandom(rng.gen()), &mut rng))
        .collect()
}

fn permute_series(series: &RawSeries, perm: &[usize]) -> Result<RawSeries> {
    Ok(RawSeries {
        values: tensor::gather_axis(&series.values, 1, perm)?,
        channel_names: perm.iter().map(|&p| series.channel_names[p].clone()).collect(),
        ..series.clone()
    })
}

/// Trains one model per channel order (same initialization seed) and reports
/// the spread of test MSE.
pub fn permutation_robustness(
    series: &RawSeries,
    family: SplitFamily,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    perms: &[Vec<usize>],
    model_seed: u64,
) -> Result<RobustnessResult> {
    if perms.len() < 2 {
        return Err(Error::Config("robustness needs at least 2 permutations".into()));
    }
    let mut test_mse = Vec::with_capacity(perms.len());
    let mut final_reg = Vec::with_capacity(perms.len());
    for perm in perms {
        let s = permute_series(series, perm)?;
        let data = make_windows(&s, family, model_cfg.lookback, model_cfg.horizon)?;
        let mut model = SorMamba::new(model_cfg.clone(), model_seed)?;
        final_reg.push(train_supervised(&mut model, &data, train_cfg)?.final_epoch_reg());
        test_mse.push(evaluate(&model, &data.test, train_cfg.batch_size)?.0);
    }
    let (mean, std) = mean_std(&test_mse);
    Ok(RobustnessResult {
        permutations: perms.to_vec(),
        test_mse,
        final_reg,
        mean,
        std,
    })
}

/// Mean `d(R_x, R_z)` over evaluated windows plus batch-averaged matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub windows: usize,
    pub mean_distance: f64,
    pub mean_rx: Tensor,
    pub mean_rz: Tensor,
}

pub fn correlation_preservation_report(
    model: &SorMamba,
    ds: &WindowedDataset,
    max_windows: Option<usize>,
    batch_size: usize,
    metric: Metric,
) -> Result<CorrelationReport> {
    let n = ds.len();
    let k = max_windows.map_or(n, |m| m.min(n));
    let idx: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    let c = ds.channels();
    let (mut rx_sum, mut rz_sum) = (Tensor::zeros(&[c, c]), Tensor::zeros(&[c, c]));
    let mut dist = 0.0;
    for chunk in idx.chunks(batch_size) {
        let (x, _) = ds.batch(chunk);
        let (rx, rz) = model.latent_for_ccm(&x)?;
        for (a, b) in rx.iter().zip(&rz) {
            dist += ccm_loss(a, b, metric)?;
            rx_sum.add_assign(&a.values);
            rz_sum.add_assign(&b.values);
        }
    }
    Ok(CorrelationReport {
        windows: k,
        mean_distance: dist / k as f64,
        mean_rx: rx_sum.map(|v| v / k as f64),
        mean_rz: rz_sum.map(|v| v / k as f64),
    })
}

/// Final encoder tokens `[C, D]` of the first window of `ds`.
pub fn channel_embeddings(model: &SorMamba, ds: &WindowedDataset, window: usize) -> Result<Tensor> {
    let (x, _) = ds.batch(&[window]);
    let tape = Tape::new();
    let p = model.bind(&tape, Trainable::None);
    let (xn, _) = model.normalize(&x)?;
    let xv = tape.constant(xn);
    let enc = model.encode_normalized(&tape, &p, xv, &model.eval_orders())?;
    let v = tape.value(enc);
    v.reshape(&v.shape()[1..])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub label: String,
    pub counts: ParamCounts,
    pub train_sec_per_step: Option<f64>,
    pub infer_ms_per_instance: Option<f64>,
}

/// Step and inference timing on random inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timing {
    pub steps: usize,
    pub batch_size: usize,
}

pub fn efficiency_report(configs: &[(String, ModelConfig)], timing: Option<Timing>) -> Result<Vec<EfficiencyRow>> {
    configs
        .iter()
        .map(|(label, cfg)| {
            let model = SorMamba::new(cfg.clone(), 0)?;
            let (train, infer) = match timing {
                Some(t) => {
                    let (a, b) = time_model(&model, t)?;
                    (Some(a), Some(b))
                }
                None => (None, None),
            };
            Ok(EfficiencyRow {
                label: label.clone(),
                counts: model.count_parameters(),
                train_sec_per_step: train,
                infer_ms_per_instance: infer,
            })
        })
        .collect()
}

fn time_model(model: &SorMamba, t: Timing) -> Result<(f64, f64)> {
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(&[t.batch_size, cfg.lookback, cfg.channels], |_| rng.gen_range(-1.0..1.0));
    let y = Tensor::from_fn(&[t.batch_size, cfg.horizon, cfg.channels], |_| rng.gen_range(-1.0..1.0));
    let steps = t.steps.max(1);
    let t0 = Instant::now();
    for _ in 0..steps {
        let tape = Tape::new();
        let p = model.bind(&tape, Trainable::All);
        let f = model.forward(&tape, &p, &x, &model.eval_orders())?;
        let loss = mse_var(&tape, f.yhat, tape.constant(y.clone()))?;
        tape.backward(loss)?;
    }
    let train = t0.elapsed().as_secs_f64() / steps as f64;
    let t1 = Instant::now();
    for _ in 0..steps {
        model.forecast(&x)?;
    }
    let infer = t1.elapsed().as_secs_f64() * 1e3 / (steps * t.batch_size) as f64;
    Ok((train, infer))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessRow {
    pub rate: f64,
    pub seed: u64,
    pub removed_cells: usize,
    pub test_mse: f64,
    pub test_mae: f64,
}

/// Splits built from a corrupted copy of `clean`; inputs everywhere and
/// training targets come from the corrupted data, evaluation targets from
/// the clean data.
pub fn corrupted_splits(
    clean: &RawSeries,
    family: SplitFamily,
    lookback: usize,
    horizon: usize,
    rate: f64,
    seed: u64,
) -> Result<(DataSplits, usize)> {
    let (corrupt, removed) = inject_missingness(clean, rate, seed)?;
    let mut data = make_windows(&corrupt, family, lookback, horizon)?;
    let norm = data.train.normalizer.clone();
    for split in [Split::Val, Split::Test] {
        let seg = data.borders.segment(split, lookback);
        let targets = norm.normalize(&clean.rows(seg));
        let ds = match split {
            Split::Val => &mut data.val,
            _ => &mut data.test,
        };
        *ds = ds.clone().with_targets(targets)?;
    }
    Ok((data, removed))
}

pub fn missingness_curve(
    clean: &RawSeries,
    family: SplitFamily,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    rates: &[f64],
    seed: u64,
) -> Result<Vec<MissingnessRow>> {
    rates
        .iter()
        .map(|&rate| {
            let (data, removed) = corrupted_splits(clean, family, model_cfg.lookback, model_cfg.horizon, rate, seed)?;
            let mut model = SorMamba::new(model_cfg.clone(), seed)?;
            train_supervised(&mut model, &data, &TrainConfig { seed, ..train_cfg.clone() })?;
            let (test_mse, test_mae) = evaluate(&model, &data.test, train_cfg.batch_size)?;
            Ok(MissingnessRow {
                rate,
                seed,
                removed_cells: removed,
                test_mse,
                test_mae,
            })
        })
        .collect()
}

/// Number of adjacent pairs `(v[i], v[i+1])` with `v[i] <= v[i+1]`.
pub fn non_decreasing_steps(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[0] <= w[1]).count()
}
