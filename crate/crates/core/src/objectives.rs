//! Forecasting loss, reversal regularizer, Pearson correlation machinery and
//! the pretraining objectives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SorMamba;
use crate::nn::Bound;
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::{self, Tensor};

/// Distance between two equally shaped tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    L2,
    L1,
    Cosine,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a.shape(), b.shape())?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.numel() as f64)
}

pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mae", a.shape(), b.shape())?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.numel() as f64)
}

pub fn mse_var(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    same_shape("mse", &tape.shape(a), &tape.shape(b))?;
    let d = tape.sub(a, b)?;
    Ok(tape.mean(tape.square(d)))
}

pub fn mae_var(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    same_shape("mae", &tape.shape(a), &tape.shape(b))?;
    let d = tape.sub(a, b)?;
    Ok(tape.mean(tape.abs(d)))
}

/// Per-token cosine similarity over the last axis; zero-norm tokens score 0.
struct CosineSimilarity;

fn cosine_rows(a: &[f64], b: &[f64], d: usize) -> Vec<(f64, f64, f64)> {
    a.chunks(d)
        .zip(b.chunks(d))
        .map(|(x, y)| {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            (dot, nx, ny)
        })
        .collect()
}

impl CustomOp for CosineSimilarity {
    fn name(&self) -> &'static str {
        "cosine_similarity"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let [a, b] = inputs else { unreachable!() };
        let d = *a.shape().last().expect("rank >= 1");
        let rows = cosine_rows(a.data(), b.data(), d);
        let mut ga = vec![0.0; a.numel()];
        let mut gb = vec![0.0; b.numel()];
        for (r, &(_, nx, ny)) in rows.iter().enumerate() {
            if nx == 0.0 || ny == 0.0 {
                continue;
            }
            let s = output.data()[r];
            let g = grad.data()[r];
            for j in 0..d {
                let (x, y) = (a.data()[r * d + j], b.data()[r * d + j]);
                ga[r * d + j] = g * (y / (nx * ny) - s * x / (nx * nx));
                gb[r * d + j] = g * (x / (nx * ny) - s * y / (ny * ny));
            }
        }
        vec![
            Some(Tensor::new(a.shape().to_vec(), ga).expect("ga")),
            Some(Tensor::new(b.shape().to_vec(), gb).expect("gb")),
        ]
    }
}

pub fn cosine_similarity_var(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(a);
    same_shape("cosine", &shape, &tape.shape(b))?;
    let d = *shape.last().ok_or(Error::AxisOutOfRange { axis: 0, rank: 0 })?;
    let sims: Vec<f64> = cosine_rows(tape.value(a).data(), tape.value(b).data(), d)
        .into_iter()
        .map(|(dot, nx, ny)| if nx == 0.0 || ny == 0.0 { 0.0 } else { dot / (nx * ny) })
        .collect();
    let out = Tensor::new(shape[..shape.len() - 1].to_vec(), sims)?;
    Ok(tape.custom(&[a, b], out, Box::new(CosineSimilarity)))
}

/// Distance `d(a, b)` under `metric`, as a scalar on the tape.
pub fn distance_var(tape: &Tape, a: Var, b: Var, metric: Metric) -> Result<Var> {
    match metric {
        Metric::L2 => mse_var(tape, a, b),
        Metric::L1 => mae_var(tape, a, b),
        Metric::Cosine => {
            let s = cosine_similarity_var(tape, a, b)?;
            Ok(tape.offset(tape.neg(tape.mean(s)), 1.0))
        }
    }
}

/// Distance between the two channel-order views of one encoder layer.
pub fn reg_loss(tape: &Tape, z1: Var, z2: Var, metric: Metric) -> Result<Var> {
    distance_var(tape, z1, z2, metric)
}

/// Plain-tensor counterpart of [`distance_var`].
pub fn distance(a: &Tensor, b: &Tensor, metric: Metric) -> Result<f64> {
    let tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let d = distance_var(&tape, x, y, metric)?;
    let v = tape.value(d).item();
    Ok(v)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub fcst: f64,
    pub reg_per_layer: Vec<f64>,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ccm: Option<f64>,
}

impl LossReport {
    pub fn reg_sum(&self) -> f64 {
        sum_in_order(&self.reg_per_layer)
    }

    /// `fcst + lambda * sum(reg)` with the same operation order as the tape.
    pub fn recompute_total(&self, lambda: f64) -> f64 {
        if self.reg_per_layer.is_empty() {
            self.fcst
        } else {
            self.fcst + lambda * self.reg_sum()
        }
    }
}

fn sum_in_order(v: &[f64]) -> f64 {
    let mut it = v.iter();
    let first = it.next().copied().unwrap_or(0.0);
    it.fold(first, |acc, &x| acc + x)
}

/// `fcst + lambda * Σ reg` on the tape, plus the scalar breakdown.
pub fn total_loss(tape: &Tape, fcst: Var, regs: &[Var], lambda: f64) -> Result<(Var, LossReport)> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let total = match regs.split_first() {
        None => fcst,
        Some((&first, rest)) => {
            let mut s = first;
            for &r in rest {
                s = tape.add(s, r)?;
            }
            tape.add(fcst, tape.scale(s, lambda))?
        }
    };
    let report = LossReport {
        fcst: tape.value(fcst).item(),
        reg_per_layer: regs.iter().map(|&r| tape.value(r).item()).collect(),
        total: tape.value(total).item(),
        ccm: None,
    };
    Ok((total, report))
}

/// Pairwise channel correlation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrMatrix {
    pub values: Tensor,
}

impl CorrMatrix {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(&[i, j])
    }

    /// Mean of `|r_ij|` over `i != j`.
    pub fn mean_abs_offdiag(&self) -> f64 {
        let c = self.channels();
        if c < 2 {
            return 0.0;
        }
        let mut s = 0.0;
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    s += self.get(i, j).abs();
                }
            }
        }
        s / (c * (c - 1)) as f64
    }
}

pub const PEARSON_EPS: f64 = 1e-8;

/// Pearson matrix of `samples [C, K]`: `cov_ij / ((std_i + eps)(std_j + eps))`,
/// clamped to `[-1, 1]` with a unit diagonal.
pub fn pearson_matrix(samples: &Tensor, eps: f64) -> Result<CorrMatrix> {
    if samples.rank() != 2 || samples.shape()[1] < 2 {
        return Err(Error::Data(format!(
            "pearson needs [C, K>=2] samples, got {:?}",
            samples.shape()
        )));
    }
    let (c, k) = (samples.shape()[0], samples.shape()[1]);
    let centered: Vec<Vec<f64>> = samples
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().sum::<f64>() / k as f64;
            row.iter().map(|v| v - m).collect()
        })
        .collect();
    let std: Vec<f64> = centered
        .iter()
        .map(|r| (r.iter().map(|v| v * v).sum::<f64>() / k as f64).sqrt())
        .collect();
    let mut out = Tensor::zeros(&[c, c]);
    for i in 0..c {
        out.set(&[i, i], 1.0);
        for j in i + 1..c {
            let cov = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / k as f64;
            let r = (cov / ((std[i] + eps) * (std[j] + eps))).clamp(-1.0, 1.0);
            out.set(&[i, j], r);
            out.set(&[j, i], r);
        }
    }
    Ok(CorrMatrix { values: out })
}

/// Batched Pearson matrices on the tape: `samples [B, C, K] -> [B, C, C]`.
pub fn pearson_var(tape: &Tape, samples: Var, eps: f64) -> Result<Var> {
    let shape = tape.shape(samples);
    if shape.len() != 3 || shape[2] < 2 {
        return Err(Error::Data(format!("pearson needs [B, C, K>=2], got {shape:?}")));
    }
    let (c, k) = (shape[1], shape[2]);
    let mean = tape.mean_axis(samples, 2)?;
    let xc = tape.sub(samples, mean)?;
    let xt = tape.transpose_last2(xc)?;
    let cov = tape.scale(tape.matmul(xc, xt)?, 1.0 / k as f64);
    let var = tape.scale(tape.sum_axis(tape.square(xc), 2)?, 1.0 / k as f64);
    let std = tape.offset(tape.sqrt(var), eps);
    let denom = tape.matmul(std, tape.transpose_last2(std)?)?;
    let r = tape.clamp(tape.div(cov, denom)?, -1.0, 1.0);
    let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    let off = tape.constant(eye.map(|v| 1.0 - v));
    let eye = tape.constant(eye);
    tape.add(tape.mul(r, off)?, eye)
}

/// `d(R_x, R_z)` between correlation matrices.
pub fn ccm_loss(rx: &CorrMatrix, rz: &CorrMatrix, metric: Metric) -> Result<f64> {
    distance(&rx.values, &rz.values, metric)
}

/// Per-timestep keep mask `[B, L, 1]` (1 = visible) with each timestep hidden
/// independently with probability `ratio`, resampling fully hidden windows.
pub fn sample_time_mask(rng: &mut ChaCha8Rng, batch: usize, steps: usize, ratio: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio must be in [0, 1), got {ratio}")));
    }
    let mut keep = Tensor::zeros(&[batch, steps, 1]);
    for b in 0..batch {
        loop {
            let row: Vec<bool> = (0..steps).map(|_| rng.gen::<f64>() >= ratio).collect();
            if row.iter().any(|&k| k) {
                for (t, k) in row.into_iter().enumerate() {
                    keep.set(&[b, t, 0], if k { 1.0 } else { 0.0 });
                }
                break;
            }
        }
    }
    Ok(keep)
}

/// Squared error on hidden timesteps only: `Σ hidden·(rec − x)² / (#hidden·C)`,
/// zero when nothing is hidden.
pub fn masked_mse_var(tape: &Tape, rec: Var, target: Var, keep: &Tensor) -> Result<Var> {
    let shape = tape.shape(target);
    same_shape("masked_mse", &tape.shape(rec), &shape)?;
    let hidden = keep.map(|k| 1.0 - k);
    let count = hidden.sum() * shape[2] as f64;
    let h = tape.constant(hidden);
    let d = tape.square(tape.sub(rec, target)?);
    let s = tape.sum(tape.mul(d, h)?);
    if count == 0.0 {
        return Ok(tape.scale(s, 0.0));
    }
    Ok(tape.scale(s, 1.0 / count))
}

/// Pearson matrix over an entire `[T, C]` series.
pub fn global_corr(series: &Tensor) -> Result<CorrMatrix> {
    if series.rank() != 2 {
        return Err(Error::Data(format!("expected [T, C] series, got {:?}", series.shape())));
    }
    pearson_matrix(&tensor::transpose_last2(series)?, PEARSON_EPS)
}

/// Correlation matrices of the raw windows `x [B,L,C]`: `[B,C,C]`.
pub fn window_corr(x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let xt = tape.constant(tensor::transpose_last2(x)?);
    let r = pearson_var(&tape, xt, PEARSON_EPS)?;
    let v = (*tape.value(r)).clone();
    Ok(v)
}

/// `d(R_x, R_z)` averaged over the batch. `global` replaces the per-window
/// input correlation with a fixed dataset-level matrix.
pub fn ccm_objective(
    tape: &Tape,
    p: &Bound,
    model: &SorMamba,
    x: &Tensor,
    metric: Metric,
    global: Option<&CorrMatrix>,
) -> Result<Var> {
    let b = x.shape()[0];
    let rx = match global {
        None => window_corr(x)?,
        Some(g) => {
            let c = g.channels();
            Tensor::from_fn(&[b, c, c], |i| g.values.data()[i % (c * c)])
        }
    };
    let (xn, _) = model.normalize(x)?;
    let xv = tape.constant(xn);
    let enc = model.encode_normalized(tape, p, xv, &model.eval_orders())?;
    let rz = pearson_var(tape, model.ccm_latent(tape, p, enc)?, PEARSON_EPS)?;
    let rx = tape.constant(rx);
    distance_var(tape, rx, rz, metric)
}

/// Reconstruction of hidden timesteps of the normalized window.
pub fn masked_modeling_loss(
    tape: &Tape,
    p: &Bound,
    model: &SorMamba,
    x: &Tensor,
    mask_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let (xn, _) = model.normalize(x)?;
    let keep = sample_time_mask(rng, x.shape()[0], x.shape()[1], mask_ratio)?;
    let masked = tensor::broadcast_zip("mask", &xn, &keep, |v, k| v * k)?;
    let mv = tape.constant(masked);
    let enc = model.encode_normalized(tape, p, mv, &model.eval_orders())?;
    let rec = model.reconstruct(tape, p, enc)?;
    let target = tape.constant(xn);
    masked_mse_var(tape, rec, target, &keep)
}

/// Full reconstruction of the normalized window.
pub fn reconstruction_loss(tape: &Tape, p: &Bound, model: &SorMamba, x: &Tensor) -> Result<Var> {
    let (xn, _) = model.normalize(x)?;
    let xv = tape.constant(xn);
    let enc = model.encode_normalized(tape, p, xv, &model.eval_orders())?;
    let rec = model.reconstruct(tape, p, enc)?;
    mse_var(tape, rec, xv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, check_gradients_multi};
    use rand::SeedableRng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn mse_mae_hand_values() {
        let a = t(&[2], &[0.0, 0.0]);
        let b = t(&[2], &[1.0, 3.0]);
        assert_eq!(mse(&a, &b).unwrap(), 5.0);
        assert_eq!(mae(&a, &b).unwrap(), 2.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!(mse(&a, &t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn reg_metrics() {
        let z = t(&[1, 2, 3], &[1.0, -2.0, 0.5, 0.3, 0.0, 1.0]);
        for m in [Metric::L2, Metric::L1, Metric::Cosine] {
            assert!(distance(&z, &z, m).unwrap().abs() < 1e-15, "{m:?}");
        }
        let neg = z.map(|v| -v);
        assert!((distance(&z, &neg, Metric::Cosine).unwrap() - 2.0).abs() < 1e-12);
        let zero = Tensor::zeros(&[1, 2, 3]);
        assert_eq!(distance(&z, &zero, Metric::Cosine).unwrap(), 1.0);
    }

    #[test]
    fn reg_l2_equals_recomputed_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-1.0..1.0));
        let mut s = 0.0;
        for i in 0..a.numel() {
            s += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((distance(&a, &b, Metric::L2).unwrap() - s / 24.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
        let err = check_gradients_multi(|tp, v| distance_var(tp, v[0], v[1], Metric::Cosine), &[a, b], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn total_loss_arithmetic() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::scalar(1.0));
        let r1 = tape.constant(Tensor::scalar(0.2));
        let r2 = tape.constant(Tensor::scalar(0.3));
        let (_, rep) = total_loss(&tape, f, &[r1, r2], 0.1).unwrap();
        assert!((rep.total - 1.05).abs() < 1e-12);
        assert_eq!(rep.total, rep.recompute_total(0.1));
        let (_, rep0) = total_loss(&tape, f, &[r1, r2], 0.0).unwrap();
        assert_eq!(rep0.total.to_bits(), rep0.fcst.to_bits());
        assert!(total_loss(&tape, f, &[r1], -1.0).is_err());
    }

    #[test]
    fn pearson_hand_values() {
        let x = t(&[2, 3], &[1.0, 2.0, 4.0, 1.0, 3.0, 5.0]);
        let r = pearson_matrix(&x, PEARSON_EPS).unwrap();
        assert!((r.get(0, 1) - 0.981_980_506_061_965_7).abs() < 1e-6);
        let lin = t(&[2, 4], &[1.0, 2.0, 0.0, 5.0, 5.0, 7.0, 3.0, 13.0]);
        assert!((pearson_matrix(&lin, PEARSON_EPS).unwrap().get(0, 1) - 1.0).abs() < 1e-7);
        let anti = t(&[2, 3], &[1.0, 2.0, 4.0, -1.0, -2.0, -4.0]);
        assert!((pearson_matrix(&anti, PEARSON_EPS).unwrap().get(0, 1) + 1.0).abs() < 1e-7);
        let flat = t(&[2, 3], &[1.0, 1.0, 1.0, 1.0, 2.0, 3.0]);
        let r = pearson_matrix(&flat, PEARSON_EPS).unwrap();
        assert_eq!(r.get(0, 0), 1.0);
        assert_eq!(r.get(0, 1), 0.0);
    }

    #[test]
    fn pearson_var_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[2, 4, 6], |_| rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let r = pearson_var(&tape, v, PEARSON_EPS).unwrap();
        let rv = tape.value(r);
        for b in 0..2 {
            let slice = crate::tensor::narrow(&x, 0, b, 1).unwrap().reshape(&[4, 6]).unwrap();
            let p = pearson_matrix(&slice, PEARSON_EPS).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    assert!((rv.get(&[b, i, j]) - p.get(i, j)).abs() < 1e-12);
                }
            }
        }
        let err = check_gradients(
            |tp, v| {
                let r = pearson_var(tp, v, PEARSON_EPS)?;
                let w = tp.constant(Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.7).sin()));
                Ok(tp.sum(tp.mul(r, w)?))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn ccm_loss_cases() {
        let eye = CorrMatrix {
            values: t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
        };
        let ones = CorrMatrix {
            values: Tensor::ones(&[2, 2]),
        };
        assert_eq!(ccm_loss(&eye, &eye, Metric::L2).unwrap(), 0.0);
        assert_eq!(ccm_loss(&eye, &ones, Metric::L2).unwrap(), 0.5);
        assert_eq!(ccm_loss(&ones, &eye, Metric::L2).unwrap(), 0.5);
        let three = CorrMatrix { values: Tensor::ones(&[3, 3]) };
        assert!(ccm_loss(&eye, &three, Metric::L2).is_err());
    }

    #[test]
    fn masks_are_seeded_and_never_fully_hidden() {
        let a = sample_time_mask(&mut ChaCha8Rng::seed_from_u64(4), 8, 6, 0.9).unwrap();
        let b = sample_time_mask(&mut ChaCha8Rng::seed_from_u64(4), 8, 6, 0.9).unwrap();
        assert_eq!(a, b);
        for bi in 0..8 {
            assert!((0..6).any(|t| a.get(&[bi, t, 0]) == 1.0));
        }
        let none = sample_time_mask(&mut ChaCha8Rng::seed_from_u64(4), 2, 6, 0.0).unwrap();
        assert!(none.data().iter().all(|&k| k == 1.0));
        assert!(sample_time_mask(&mut ChaCha8Rng::seed_from_u64(4), 2, 6, 1.0).is_err());
    }

    #[test]
    fn masked_mse_ignores_visible_positions() {
        let tape = Tape::new();
        let rec = tape.constant(t(&[1, 2, 1], &[5.0, 1.0]));
        let tgt = tape.constant(t(&[1, 2, 1], &[0.0, 0.0]));
        let keep = t(&[1, 2, 1], &[1.0, 0.0]);
        let l = masked_mse_var(&tape, rec, tgt, &keep).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let all = t(&[1, 2, 1], &[1.0, 1.0]);
        let l = masked_mse_var(&tape, rec, tgt, &all).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn global_corr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let dup = Tensor::from_fn(&[50, 3], |i| ((i / 3) as f64 * 0.37).sin());
        let r = global_corr(&dup).unwrap();
        assert!(r.values.data().iter().all(|&v| (v - 1.0).abs() < 1e-7));
        let noise = Tensor::from_fn(&[10_000, 3], |_| rng.gen_range(-1.0..1.0));
        let r = global_corr(&noise).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(r.get(i, j).abs() < 0.1);
                }
            }
        }
    }

    fn tiny_model() -> SorMamba {
        use crate::model::ModelConfig;
        SorMamba::new(
            ModelConfig {
                lookback: 8,
                horizon: 2,
                channels: 3,
                d_model: 4,
                layers: 1,
                d_state: 2,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn pretraining_losses() {
        use crate::model::Trainable;
        let m = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::from_fn(&[2, 8, 3], |_| rng.gen_range(-1.0..1.0));
        let run = |seed: u64| {
            let tape = Tape::new();
            let p = m.bind(&tape, Trainable::EncoderAndRecon);
            let l = masked_modeling_loss(&tape, &p, &m, &x, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let v = tape.value(l).item();
            v
        };
        assert_eq!(run(3).to_bits(), run(3).to_bits());
        let tape = Tape::new();
        let p = m.bind(&tape, Trainable::EncoderAndRecon);
        let rec = tape.value(reconstruction_loss(&tape, &p, &m, &x).unwrap()).item();
        assert_ne!(run(3), rec);
        let zero = masked_modeling_loss(&tape, &p, &m, &x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);
        let ccm = ccm_objective(&tape, &p, &m, &x, Metric::L2, None).unwrap();
        assert!(tape.value(ccm).item() > 0.0);
        let g = CorrMatrix { values: Tensor::ones(&[3, 3]) };
        let ccm_g = ccm_objective(&tape, &p, &m, &x, Metric::L2, Some(&g)).unwrap();
        assert_ne!(tape.value(ccm_g).item(), tape.value(ccm).item());
    }
}
