//! Discretized selective state-space layer.
//!
//! Continuous dynamics `h' = A h + B x`, `y = C h + D x` with diagonal `A`
//! are sampled at an input-dependent step `Δ`:
//!
//! ```text
//! Ā = exp(Δ A)
//! B̄ = (Δ A)⁻¹ (exp(Δ A) − 1) · Δ B     (zoh-exact)
//! B̄ = Δ B                              (euler-b)
//! h_k = Ā_k h_{k−1} + B̄_k x_k,   y_k = C_k h_k + D x_k,   h_0 = 0
//! ```
//!
//! `A = −exp(A_log)` keeps every `|Ā| < 1`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::tape::{self, CustomOp, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discretization {
    ZohExact,
    #[default]
    EulerB,
}

/// Below this `|Δa|` the exact hold uses its series limit `B̄ = Δ b`.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

/// Discretize one diagonal entry: returns `(Ā, B̄)`.
pub fn discretize_scalar(delta: f64, a: f64, b: f64, mode: Discretization) -> (f64, f64) {
    let da = delta * a;
    let a_bar = da.exp();
    let b_bar = match mode {
        Discretization::EulerB => delta * b,
        Discretization::ZohExact if da.abs() < ZOH_SERIES_THRESHOLD => delta * b,
        Discretization::ZohExact => da.exp_m1() / a * b,
    };
    (a_bar, b_bar)
}

/// Partial derivatives of `B̄` with respect to `(Δ, a, b)`.
fn b_bar_partials(delta: f64, a: f64, b: f64, mode: Discretization) -> (f64, f64, f64) {
    let da = delta * a;
    match mode {
        Discretization::EulerB => (b, 0.0, delta),
        Discretization::ZohExact if da.abs() < ZOH_SERIES_THRESHOLD => (b, 0.0, delta),
        Discretization::ZohExact => {
            let e = da.exp();
            let g = da.exp_m1() / a;
            let dg_da = (da * e - da.exp_m1()) / (a * a);
            (e * b, dg_da * b, g)
        }
    }
}

/// Broadcast discretization: `delta [B,S,Di]`, `a [Di,N]`, `b [B,S,N]`
/// to `(Ā, B̄)` each of shape `[B,S,Di,N]`.
pub fn discretize(
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    mode: Discretization,
) -> Result<(Tensor, Tensor)> {
    let dims = ScanDims::new(delta, delta, a, b, b, None)?;
    let ScanDims { batch, steps, inner, state } = dims;
    let mut a_bar = Tensor::zeros(&[batch, steps, inner, state]);
    let mut b_bar = Tensor::zeros(&[batch, steps, inner, state]);
    for bi in 0..batch {
        for k in 0..steps {
            for d in 0..inner {
                for n in 0..state {
                    let (ab, bb) = discretize_scalar(
                        delta.get(&[bi, k, d]),
                        a.get(&[d, n]),
                        b.get(&[bi, k, n]),
                        mode,
                    );
                    a_bar.set(&[bi, k, d, n], ab);
                    b_bar.set(&[bi, k, d, n], bb);
                }
            }
        }
    }
    Ok((a_bar, b_bar))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ScanDims {
    batch: usize,
    steps: usize,
    inner: usize,
    state: usize,
}

impl ScanDims {
    fn new(
        u: &Tensor,
        delta: &Tensor,
        a: &Tensor,
        b: &Tensor,
        c: &Tensor,
        d: Option<&Tensor>,
    ) -> Result<Self> {
        let bad = |lhs: &Tensor, rhs: &Tensor| Error::ShapeMismatch {
            op: "selective_scan",
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if u.rank() != 3 || a.rank() != 2 {
            return Err(bad(u, a));
        }
        let (batch, steps, inner) = (u.shape()[0], u.shape()[1], u.shape()[2]);
        let state = a.shape()[1];
        if delta.shape() != u.shape() {
            return Err(bad(u, delta));
        }
        if a.shape()[0] != inner {
            return Err(bad(u, a));
        }
        for t in [b, c] {
            if t.shape() != [batch, steps, state] {
                return Err(bad(u, t));
            }
        }
        if let Some(d) = d {
            if d.shape() != [inner] {
                return Err(bad(u, d));
            }
        }
        Ok(Self {
            batch,
            steps,
            inner,
            state,
        })
    }
}

/// Inputs of one scan: `u, delta [B,S,Di]`, `a [Di,N]`, `b, c [B,S,N]`, `d [Di]`.
#[derive(Clone, Debug)]
pub struct ScanInputs {
    pub u: Tensor,
    pub delta: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d: Tensor,
}

/// Hidden state of the recurrence after `step` inputs.
#[derive(Clone, Debug)]
pub struct ScanState {
    pub h: Tensor,
    pub step: usize,
}

impl ScanState {
    pub fn zeros(batch: usize, inner: usize, state: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, inner, state]),
            step: 0,
        }
    }
}

/// Flat-buffer scan. Returns `y [B,S,Di]` and every hidden state `[B,S,Di,N]`.
fn scan_forward(x: &ScanInputs, mode: Discretization) -> Result<(Tensor, Vec<f64>)> {
    let ScanDims { batch, steps, inner, state } =
        ScanDims::new(&x.u, &x.delta, &x.a, &x.b, &x.c, Some(&x.d))?;
    let (u, dl, a, bt, ct, ds) = (
        x.u.data(),
        x.delta.data(),
        x.a.data(),
        x.b.data(),
        x.c.data(),
        x.d.data(),
    );
    let mut y = vec![0.0; batch * steps * inner];
    let mut hs = vec![0.0; batch * steps * inner * state];
    for bi in 0..batch {
        for k in 0..steps {
            let row = bi * steps + k;
            let mut finite = true;
            for d in 0..inner {
                let idx = row * inner + d;
                let (delta, xv) = (dl[idx], u[idx]);
                let mut acc = 0.0;
                for n in 0..state {
                    let (ab, bb) =
                        discretize_scalar(delta, a[d * state + n], bt[row * state + n], mode);
                    let prev = if k == 0 { 0.0 } else { hs[(idx - inner) * state + n] };
                    let h = ab * prev + bb * xv;
                    hs[idx * state + n] = h;
                    acc += ct[row * state + n] * h;
                }
                let out = acc + ds[d] * xv;
                finite &= out.is_finite();
                y[idx] = out;
            }
            if !finite {
                return Err(Error::NonFiniteScan { step: k });
            }
        }
    }
    Ok((Tensor::new(vec![batch, steps, inner], y)?, hs))
}

/// Selective scan over prepared inputs.
pub fn selective_scan(x: &ScanInputs, mode: Discretization) -> Result<Tensor> {
    scan_forward(x, mode).map(|(y, _)| y)
}

/// Reference recurrence: one explicit step at a time through indexed
/// accessors, discretizing each entry in the literal `(ΔA)⁻¹(exp(ΔA)−1)·ΔB` form.
pub fn naive_scan(x: &ScanInputs, mode: Discretization) -> Result<Tensor> {
    let dims = ScanDims::new(&x.u, &x.delta, &x.a, &x.b, &x.c, Some(&x.d))?;
    let mut st = ScanState::zeros(dims.batch, dims.inner, dims.state);
    let mut y = Tensor::zeros(&[dims.batch, dims.steps, dims.inner]);
    for k in 0..dims.steps {
        let mut next = st.h.clone();
        for bi in 0..dims.batch {
            for d in 0..dims.inner {
                let xv = x.u.get(&[bi, k, d]);
                let mut out = x.d.get(&[d]) * xv;
                for n in 0..dims.state {
                    let delta = x.delta.get(&[bi, k, d]);
                    let da = delta * x.a.get(&[d, n]);
                    let db = delta * x.b.get(&[bi, k, n]);
                    let ab = da.exp();
                    let bb = match mode {
                        Discretization::ZohExact if da.abs() >= ZOH_SERIES_THRESHOLD => {
                            (ab - 1.0) / da * db
                        }
                        _ => db,
                    };
                    let h = ab * st.h.get(&[bi, d, n]) + bb * xv;
                    next.set(&[bi, d, n], h);
                    out += x.c.get(&[bi, k, n]) * h;
                }
                y.set(&[bi, k, d], out);
            }
        }
        st.h = next;
        st.step = k + 1;
        if !st.h.is_finite() || !(0..dims.batch).all(|bi| (0..dims.inner).all(|d| y.get(&[bi, k, d]).is_finite())) {
            return Err(Error::NonFiniteScan { step: k });
        }
    }
    Ok(y)
}

struct ScanBackward {
    mode: Discretization,
    states: Vec<f64>,
}

impl CustomOp for ScanBackward {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let [u, delta, a, b, c, d] = inputs else {
            unreachable!("scan takes six inputs")
        };
        let (batch, steps, inner) = (u.shape()[0], u.shape()[1], u.shape()[2]);
        let state = a.shape()[1];
        let hs = &self.states;
        let g = grad.data();
        let mut du = vec![0.0; u.numel()];
        let mut ddelta = vec![0.0; u.numel()];
        let mut da = vec![0.0; a.numel()];
        let mut db = vec![0.0; b.numel()];
        let mut dc = vec![0.0; c.numel()];
        let mut dd = vec![0.0; d.numel()];
        // Gradient flowing into h_k from step k+1, per (batch, d, n).
        let mut carry = vec![0.0; inner * state];
        for bi in 0..batch {
            carry.iter_mut().for_each(|v| *v = 0.0);
            for k in (0..steps).rev() {
                let row = bi * steps + k;
                for di in 0..inner {
                    let idx = row * inner + di;
                    let gy = g[idx];
                    let xv = u.data()[idx];
                    let dl = delta.data()[idx];
                    dd[di] += gy * xv;
                    let mut gu = gy * d.data()[di];
                    let mut gdelta = 0.0;
                    for n in 0..state {
                        let av = a.data()[di * state + n];
                        let bv = b.data()[row * state + n];
                        let h = hs[idx * state + n];
                        let prev = if k == 0 { 0.0 } else { hs[(idx - inner) * state + n] };
                        dc[row * state + n] += gy * h;
                        let dh = carry[di * state + n] + gy * c.data()[row * state + n];
                        let (ab, bb) = discretize_scalar(dl, av, bv, self.mode);
                        let (bb_ddelta, bb_da, bb_db) = b_bar_partials(dl, av, bv, self.mode);
                        let g_ab = dh * prev;
                        let g_bb = dh * xv;
                        gu += dh * bb;
                        gdelta += g_ab * ab * av + g_bb * bb_ddelta;
                        da[di * state + n] += g_ab * ab * dl + g_bb * bb_da;
                        db[row * state + n] += g_bb * bb_db;
                        carry[di * state + n] = dh * ab;
                    }
                    du[idx] += gu;
                    ddelta[idx] += gdelta;
                }
            }
        }
        let t = |src: &Tensor, v: Vec<f64>| Some(Tensor::new(src.shape().to_vec(), v).expect("grad shape"));
        vec![t(u, du), t(delta, ddelta), t(a, da), t(b, db), t(c, dc), t(d, dd)]
    }
}

/// Differentiable selective scan recorded on `tape`.
pub fn scan_op(
    tape: &Tape,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    mode: Discretization,
) -> Result<Var> {
    let inputs = ScanInputs {
        u: (*tape.value(u)).clone(),
        delta: (*tape.value(delta)).clone(),
        a: (*tape.value(a)).clone(),
        b: (*tape.value(b)).clone(),
        c: (*tape.value(c)).clone(),
        d: (*tape.value(d)).clone(),
    };
    let (y, states) = scan_forward(&inputs, mode)?;
    Ok(tape.custom(
        &[u, delta, a, b, c, d],
        y,
        Box::new(ScanBackward { mode, states }),
    ))
}

/// Parameters of one selective SSM: `A_log [Di,N]`, skip `D [Di]`, the
/// input projection producing `(Δ_low, B, C)` and the low-rank `Δ` projection.
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub mode: Discretization,
}

/// Range of the initial `softplus` step sizes, sampled log-uniformly.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

impl SelectiveSsm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_inner: usize,
        d_state: usize,
        dt_rank: usize,
        mode: Discretization,
    ) -> Self {
        let x_proj = Linear::new(store, rng, &format!("{name}.x_proj"), d_inner, dt_rank + 2 * d_state, false);
        let dt_proj = Linear::new(store, rng, &format!("{name}.dt_proj"), dt_rank, d_inner, true);
        // dt_proj weight ~ U(±rank^-1/2); bias = softplus⁻¹(dt), dt log-uniform.
        let std = (dt_rank as f64).powf(-0.5);
        *store.get_mut(dt_proj.weight) = crate::nn::uniform(rng, &[dt_rank, d_inner], std);
        let (lo, hi) = DT_INIT_RANGE;
        let bias = Tensor::from_fn(&[d_inner], |_| {
            let dt: f64 = (rng.gen_range(lo.ln()..hi.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        *store.get_mut(dt_proj.bias.expect("dt_proj has bias")) = bias;
        // S4D-real: A = -(1..=N) per row.
        let a_log = store.add(
            format!("{name}.A_log"),
            Tensor::from_fn(&[d_inner, d_state], |i| ((i % d_state) as f64 + 1.0).ln()),
        );
        let d_skip = store.add(format!("{name}.D"), Tensor::ones(&[d_inner]));
        Self {
            a_log,
            d_skip,
            x_proj,
            dt_proj,
            d_inner,
            d_state,
            dt_rank,
            mode,
        }
    }

    pub fn param_count(&self) -> usize {
        self.x_proj.param_count() + self.dt_proj.param_count() + self.d_inner * self.d_state + self.d_inner
    }

    /// Input-dependent `(Δ, A, B, C)` for `u [B,S,Di]`.
    pub fn project(&self, tape: &Tape, p: &Bound, u: Var) -> Result<[Var; 4]> {
        let x_dbl = self.x_proj.forward(tape, p, u)?;
        let r = self.dt_rank;
        let n = self.d_state;
        let dt_low = tape.narrow(x_dbl, 2, 0, r)?;
        let b = tape.narrow(x_dbl, 2, r, n)?;
        let c = tape.narrow(x_dbl, 2, r + n, n)?;
        let delta = tape.softplus(self.dt_proj.forward(tape, p, dt_low)?);
        let a = tape.neg(tape.exp(p.var(self.a_log)));
        Ok([delta, a, b, c])
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, u: Var) -> Result<Var> {
        let [delta, a, b, c] = self.project(tape, p, u)?;
        scan_op(tape, u, delta, a, b, c, p.var(self.d_skip), self.mode)
    }

    /// Prepared scan inputs for `u` under the stored parameters.
    pub fn scan_inputs(&self, store: &ParamStore, u: &Tensor) -> Result<ScanInputs> {
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        let uv = tape.constant(u.clone());
        let [delta, a, b, c] = self.project(&tape, &p, uv)?;
        Ok(ScanInputs {
            u: u.clone(),
            delta: (*tape.value(delta)).clone(),
            a: (*tape.value(a)).clone(),
            b: (*tape.value(b)).clone(),
            c: (*tape.value(c)).clone(),
            d: store.get(self.d_skip).clone(),
        })
    }
}

/// Elementwise `ln(1 + e^x)` on a plain tensor.
pub fn softplus_tensor(x: &Tensor) -> Tensor {
    x.map(tape::softplus)
}

/// `A = −exp(A_log)`.
pub fn a_from_log(a_log: &Tensor) -> Tensor {
    a_log.map(|v| -v.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_inputs(rng: &mut ChaCha8Rng, b: usize, s: usize, di: usize, n: usize) -> ScanInputs {
        let mut r = |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.gen_range(lo..hi));
        ScanInputs {
            u: r(&[b, s, di], -1.0, 1.0),
            delta: r(&[b, s, di], 0.01, 1.0),
            a: r(&[di, n], -2.0, -0.05),
            b: r(&[b, s, n], -1.0, 1.0),
            c: r(&[b, s, n], -1.0, 1.0),
            d: r(&[di], -1.0, 1.0),
        }
    }

    #[test]
    fn closed_form_discretization() {
        let (ab, bz) = discretize_scalar(0.5, -1.0, 2.0, Discretization::ZohExact);
        assert!((ab - 0.606_530_659_712_633).abs() < 1e-9);
        assert!((bz - 0.786_938_680_574_733).abs() < 1e-9);
        let (_, be) = discretize_scalar(0.5, -1.0, 2.0, Discretization::EulerB);
        assert_eq!(be, 1.0);
        let (ab0, bb0) = discretize_scalar(0.5, 0.0, 2.0, Discretization::ZohExact);
        assert_eq!((ab0, bb0), (1.0, 1.0));
        let (_, tiny) = discretize_scalar(0.5, -1e-10, 2.0, Discretization::ZohExact);
        assert_eq!(tiny, 1.0);
    }

    #[test]
    fn hand_unrolled_scalar_recurrence() {
        // Ā = 0.5 via Δ=ln 2, a=-1; B̄ = 1 via euler with b = 1/Δ.
        let dl = std::f64::consts::LN_2;
        let input = ScanInputs {
            u: Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap(),
            delta: Tensor::full(&[1, 2, 1], dl),
            a: Tensor::full(&[1, 1], -1.0),
            b: Tensor::full(&[1, 2, 1], 1.0 / dl),
            c: Tensor::ones(&[1, 2, 1]),
            d: Tensor::zeros(&[1]),
        };
        let y = selective_scan(&input, Discretization::EulerB).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.5).abs() < 1e-12);
        let yn = naive_scan(&input, Discretization::EulerB).unwrap();
        assert!(y.max_abs_diff(&yn) < 1e-12);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = random_inputs(&mut rng, 2, 5, 3, 2);
        x.u = Tensor::zeros(&[2, 5, 3]);
        let y = selective_scan(&x, Discretization::ZohExact).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fast_scan_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mode in [Discretization::EulerB, Discretization::ZohExact] {
            let x = random_inputs(&mut rng, 1, 4, 3, 2);
            let a = selective_scan(&x, mode).unwrap();
            let b = naive_scan(&x, mode).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn non_finite_step_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = random_inputs(&mut rng, 1, 4, 2, 2);
        x.u.set(&[0, 2, 1], f64::NAN);
        assert_eq!(
            selective_scan(&x, Discretization::EulerB).unwrap_err(),
            Error::NonFiniteScan { step: 2 }
        );
        assert_eq!(
            naive_scan(&x, Discretization::EulerB).unwrap_err(),
            Error::NonFiniteScan { step: 2 }
        );
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = random_inputs(&mut rng, 1, 4, 2, 2);
        x.c = Tensor::zeros(&[1, 3, 2]);
        assert!(matches!(
            selective_scan(&x, Discretization::EulerB),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn discrete_operator_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_inputs(&mut rng, 2, 6, 3, 4);
        let (ab, _) = discretize(&x.delta, &x.a, &x.b, Discretization::ZohExact).unwrap();
        assert!(ab.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn init_respects_sign_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let ssm = SelectiveSsm::new(&mut store, &mut rng, "ssm", 6, 3, 2, Discretization::EulerB);
        let a = a_from_log(store.get(ssm.a_log));
        assert!(a.data().iter().all(|&v| v < 0.0));
        let bias = store.get(ssm.dt_proj.bias.unwrap());
        let dt = softplus_tensor(bias);
        assert!(dt.data().iter().all(|&v| (1e-3 - 1e-12..=1e-1 + 1e-12).contains(&v)));
        let u = Tensor::from_fn(&[1, 5, 6], |i| (i as f64 * 0.37).sin());
        let inputs = ssm.scan_inputs(&store, &u).unwrap();
        assert!(inputs.delta.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for mode in [Discretization::EulerB, Discretization::ZohExact] {
            let x = random_inputs(&mut rng, 2, 5, 3, 2);
            let w = Tensor::from_fn(&[2, 5, 3], |_| rng.gen_range(-1.0..1.0));
            let err = crate::gradcheck::check_gradients_multi(
                |t, v| {
                    let y = scan_op(t, v[0], v[1], v[2], v[3], v[4], v[5], mode)?;
                    let w = t.constant(w.clone());
                    let y = t.mul(y, w)?;
                    Ok(t.sum(y))
                },
                &[x.u, x.delta, x.a, x.b, x.c, x.d],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{mode:?}: {err}");
        }
    }

    #[test]
    fn param_count_matches_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let ssm = SelectiveSsm::new(&mut store, &mut rng, "ssm", 8, 4, 3, Discretization::EulerB);
        assert_eq!(ssm.param_count(), store.total_count());
    }
}
