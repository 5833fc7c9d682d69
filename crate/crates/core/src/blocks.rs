//! Gated selective-SSM blocks applied along the channel-token axis.
//!
//! The CD block is the Mamba block with its depthwise causal convolution
//! removed: `out = W_out · (ssm(silu(x)) ⊙ silu(g))`, `[x, g] = W_in · z`.
//! The conv variant inserts `conv` before the first SiLU.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform, Bound, Linear, ParamId, ParamStore};
use crate::ssm::{Discretization, SelectiveSsm};
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    /// Kernel size of the causal conv; `None` gives the CD block.
    pub conv_kernel: Option<usize>,
    pub discretization: Discretization,
}

impl BlockConfig {
    /// Expansion 2, rank `ceil(D/16)`, no conv.
    pub fn cd(d_model: usize, d_state: usize) -> Self {
        Self {
            d_model,
            d_inner: 2 * d_model,
            d_state,
            dt_rank: d_model.div_ceil(16),
            conv_kernel: None,
            discretization: Discretization::default(),
        }
    }
}

/// Depthwise causal convolution over the token axis: `x [B,S,Di]`,
/// `weight [Di,k]`, `bias [Di]`; output token `t` sees tokens `t-k+1..=t`.
#[derive(Clone, Debug)]
pub struct CausalConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub channels: usize,
}

impl CausalConv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, kernel: usize) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(rng, &[channels, kernel], bound)),
            bias: store.add(format!("{name}.bias"), uniform(rng, &[channels], bound)),
            kernel,
            channels,
        }
    }

    pub fn param_count(&self) -> usize {
        self.channels * (self.kernel + 1)
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let (w, b) = (p.var(self.weight), p.var(self.bias));
        let out = conv_forward(&tape.value(x), &tape.value(w), &tape.value(b))?;
        Ok(tape.custom(&[x, w, b], out, Box::new(ConvBackward)))
    }
}

fn conv_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || w.rank() != 2 || w.shape()[0] != x.shape()[2] || bias.shape() != [x.shape()[2]] {
        return Err(Error::ShapeMismatch {
            op: "causal_conv",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (batch, steps, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    let mut out = vec![0.0; x.numel()];
    for b in 0..batch {
        for t in 0..steps {
            for d in 0..ch {
                let mut s = bias.data()[d];
                for j in 0..k {
                    if let Some(src) = (t + j + 1).checked_sub(k) {
                        s += w.data()[d * k + j] * x.data()[(b * steps + src) * ch + d];
                    }
                }
                out[(b * steps + t) * ch + d] = s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

struct ConvBackward;

impl CustomOp for ConvBackward {
    fn name(&self) -> &'static str {
        "causal_conv"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let [x, w, bias] = inputs else {
            unreachable!("conv takes three inputs")
        };
        let (batch, steps, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = w.shape()[1];
        let g = grad.data();
        let mut dx = vec![0.0; x.numel()];
        let mut dw = vec![0.0; w.numel()];
        let mut db = vec![0.0; bias.numel()];
        for b in 0..batch {
            for t in 0..steps {
                for d in 0..ch {
                    let gv = g[(b * steps + t) * ch + d];
                    db[d] += gv;
                    for j in 0..k {
                        if let Some(src) = (t + j + 1).checked_sub(k) {
                            let xi = (b * steps + src) * ch + d;
                            dw[d * k + j] += gv * x.data()[xi];
                            dx[xi] += gv * w.data()[d * k + j];
                        }
                    }
                }
            }
        }
        vec![
            Some(Tensor::new(x.shape().to_vec(), dx).expect("dx")),
            Some(Tensor::new(w.shape().to_vec(), dw).expect("dw")),
            Some(Tensor::new(bias.shape().to_vec(), db).expect("db")),
        ]
    }
}

/// Gated selective-SSM block; CD variant when `conv` is `None`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub in_proj: Linear,
    pub conv: Option<CausalConv>,
    pub ssm: SelectiveSsm,
    pub out_proj: Linear,
    pub config: BlockConfig,
}

impl MambaBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &BlockConfig) -> Self {
        let in_proj = Linear::new(store, rng, &format!("{name}.in_proj"), cfg.d_model, 2 * cfg.d_inner, false);
        let conv = cfg
            .conv_kernel
            .map(|k| CausalConv::new(store, rng, &format!("{name}.conv"), cfg.d_inner, k));
        let ssm = SelectiveSsm::new(
            store,
            rng,
            &format!("{name}.ssm"),
            cfg.d_inner,
            cfg.d_state,
            cfg.dt_rank,
            cfg.discretization,
        );
        let out_proj = Linear::new(store, rng, &format!("{name}.out_proj"), cfg.d_inner, cfg.d_model, false);
        Self {
            in_proj,
            conv,
            ssm,
            out_proj,
            config: cfg.clone(),
        }
    }

    pub fn is_cd(&self) -> bool {
        self.conv.is_none()
    }

    pub fn param_count(&self) -> usize {
        self.in_proj.param_count()
            + self.conv.as_ref().map_or(0, CausalConv::param_count)
            + self.ssm.param_count()
            + self.out_proj.param_count()
    }

    /// `z [B,C,D] -> [B,C,D]`.
    pub fn forward(&self, tape: &Tape, p: &Bound, z: Var) -> Result<Var> {
        let di = self.config.d_inner;
        let xz = self.in_proj.forward(tape, p, z)?;
        let mut x = tape.narrow(xz, 2, 0, di)?;
        let gate = tape.narrow(xz, 2, di, di)?;
        if let Some(conv) = &self.conv {
            x = conv.forward(tape, p, x)?;
        }
        let x = tape.silu(x);
        let y = self.ssm.forward(tape, p, x)?;
        let y = tape.mul(y, tape.silu(gate))?;
        self.out_proj.forward(tape, p, y)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    Unidirectional,
    Bidirectional,
}

/// Channel orders of the two views. `view_i = unpermute(block_i(permute(z)))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairOrders {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

impl PairOrders {
    /// Original order and its reversal.
    pub fn reversal(channels: usize) -> Self {
        Self {
            first: (0..channels).collect(),
            second: (0..channels).rev().collect(),
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn is_identity(perm: &[usize]) -> bool {
    perm.iter().enumerate().all(|(i, &p)| i == p)
}

/// One block (unidirectional) or two independently parameterized blocks
/// (bidirectional) producing the two channel-order views.
#[derive(Clone, Debug)]
pub enum DirectionalEncoder {
    Uni(MambaBlock),
    Bi { first: MambaBlock, second: MambaBlock },
}

impl DirectionalEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &BlockConfig,
        direction: Direction,
    ) -> Self {
        match direction {
            Direction::Unidirectional => Self::Uni(MambaBlock::new(store, rng, &format!("{name}.fwd"), cfg)),
            Direction::Bidirectional => Self::Bi {
                first: MambaBlock::new(store, rng, &format!("{name}.fwd"), cfg),
                second: MambaBlock::new(store, rng, &format!("{name}.bwd"), cfg),
            },
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Uni(b) => b.param_count(),
            Self::Bi { first, second } => first.param_count() + second.param_count(),
        }
    }

    fn blocks(&self) -> (&MambaBlock, &MambaBlock) {
        match self {
            Self::Uni(b) => (b, b),
            Self::Bi { first, second } => (first, second),
        }
    }

    fn view(tape: &Tape, p: &Bound, block: &MambaBlock, z: Var, perm: &[usize]) -> Result<Var> {
        if is_identity(perm) {
            return block.forward(tape, p, z);
        }
        let zp = tape.permute_axis(z, 1, perm)?;
        let out = block.forward(tape, p, zp)?;
        tape.permute_axis(out, 1, &inverse_permutation(perm))
    }

    /// `(z1, z2)` for `z [B,C,D]` under the given channel orders.
    pub fn forward_pair(&self, tape: &Tape, p: &Bound, z: Var, orders: &PairOrders) -> Result<(Var, Var)> {
        let c = tape.shape(z)[1];
        if orders.first.len() != c || orders.second.len() != c {
            return Err(Error::ShapeMismatch {
                op: "forward_pair",
                lhs: tape.shape(z),
                rhs: vec![orders.first.len(), orders.second.len()],
            });
        }
        let (b1, b2) = self.blocks();
        let z1 = Self::view(tape, p, b1, z, &orders.first)?;
        let z2 = Self::view(tape, p, b2, z, &orders.second)?;
        Ok((z1, z2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients_multi;
    use rand::{Rng, SeedableRng};

    fn cfg(conv: Option<usize>) -> BlockConfig {
        BlockConfig {
            d_model: 4,
            d_inner: 8,
            d_state: 3,
            dt_rank: 2,
            conv_kernel: conv,
            discretization: Discretization::EulerB,
        }
    }

    fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn run(store: &ParamStore, block: &MambaBlock, z: &Tensor) -> Tensor {
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        let zv = tape.constant(z.clone());
        let out = block.forward(&tape, &p, zv).unwrap();
        (*tape.value(out)).clone()
    }

    #[test]
    fn conv_removal_saves_kernel_plus_bias_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s1 = ParamStore::new();
        let cd = MambaBlock::new(&mut s1, &mut rng, "b", &cfg(None));
        let mut s2 = ParamStore::new();
        let mb = MambaBlock::new(&mut s2, &mut rng, "b", &cfg(Some(4)));
        assert_eq!(mb.param_count() - cd.param_count(), 8 * (4 + 1));
        assert_eq!(cd.param_count(), s1.total_count());
        assert_eq!(mb.param_count(), s2.total_count());
        assert_eq!(s1.count_prefix("b.conv"), 0);
    }

    #[test]
    fn bidirectional_doubles_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let uni = DirectionalEncoder::new(&mut s, &mut rng, "u", &cfg(None), Direction::Unidirectional);
        let bi = DirectionalEncoder::new(&mut s, &mut rng, "b", &cfg(None), Direction::Bidirectional);
        assert_eq!(bi.param_count(), 2 * uni.param_count());
    }

    #[test]
    fn zero_out_projection_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let b = MambaBlock::new(&mut s, &mut rng, "b", &cfg(None));
        *s.get_mut(b.out_proj.weight) = Tensor::zeros(&[8, 4]);
        let z = input(&mut rng, &[2, 3, 4]);
        assert!(run(&s, &b, &z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_count_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        let b = MambaBlock::new(&mut s, &mut rng, "b", &cfg(Some(4)));
        let z = input(&mut rng, &[2, 5, 4]);
        assert_eq!(run(&s, &b, &z).shape(), &[2, 5, 4]);
    }

    #[test]
    fn cd_block_is_causal_along_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let b = MambaBlock::new(&mut s, &mut rng, "b", &cfg(None));
        let z = input(&mut rng, &[1, 6, 4]);
        let base = run(&s, &b, &z);
        let mut z2 = z.clone();
        for d in 0..4 {
            z2.set(&[0, 4, d], 0.0);
        }
        let out = run(&s, &b, &z2);
        for t in 0..4 {
            for d in 0..4 {
                assert_eq!(base.get(&[0, t, d]), out.get(&[0, t, d]));
            }
        }
        assert!((0..4).any(|d| base.get(&[0, 4, d]) != out.get(&[0, 4, d])));
    }

    #[test]
    fn conv_receptive_field() {
        // With the SSM state path silenced the block is local: token t sees
        // exactly tokens t-3..=t through the kernel-4 conv.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        let b = MambaBlock::new(&mut s, &mut rng, "b", &cfg(Some(4)));
        let w = s.get(b.ssm.x_proj.weight).clone();
        let mut w0 = w.clone();
        for i in 0..8 {
            for j in 2..8 {
                w0.set(&[i, j], 0.0); // zero B and C projections
            }
        }
        *s.get_mut(b.ssm.x_proj.weight) = w0;
        let z = input(&mut rng, &[1, 8, 4]);
        let base = run(&s, &b, &z);
        let mut z2 = z.clone();
        for d in 0..4 {
            z2.set(&[0, 2, d], 0.5);
        }
        let out = run(&s, &b, &z2);
        for t in 0..8 {
            let changed = (0..4).any(|d| base.get(&[0, t, d]) != out.get(&[0, t, d]));
            assert_eq!(changed, (2..=5).contains(&t), "token {t}");
        }
    }

    #[test]
    fn gradients_through_full_blocks() {
        for conv in [None, Some(3)] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut s = ParamStore::new();
            let b = MambaBlock::new(&mut s, &mut rng, "b", &cfg(conv));
            let z = input(&mut rng, &[2, 4, 4]);
            let w = input(&mut rng, &[2, 4, 4]);
            let mut inputs = vec![z];
            inputs.extend(s.iter().map(|(_, _, t)| t.clone()));
            let err = check_gradients_multi(
                |t, v| {
                    let p = Bound::from_vars(v[1..].to_vec());
                    let out = b.forward(t, &p, v[0])?;
                    let wv = t.constant(w.clone());
                    let y = t.mul(out, wv)?;
                    Ok(t.sum(y))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{conv:?}: {err}");
        }
    }

    #[test]
    fn singleton_channel_views_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = ParamStore::new();
        for dir in [Direction::Unidirectional, Direction::Bidirectional] {
            let enc = DirectionalEncoder::new(&mut s, &mut rng, &format!("{dir:?}"), &cfg(None), dir);
            let z = input(&mut rng, &[2, 1, 4]);
            let tape = Tape::new();
            let p = s.bind(&tape, |_| false);
            let zv = tape.constant(z);
            let (z1, z2) = enc.forward_pair(&tape, &p, zv, &PairOrders::reversal(1)).unwrap();
            assert_eq!(tape.shape(z1), vec![2, 1, 4]);
            if dir == Direction::Unidirectional {
                assert_eq!(*tape.value(z1), *tape.value(z2));
            }
        }
    }

    #[test]
    fn random_init_has_order_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        let enc = DirectionalEncoder::new(&mut s, &mut rng, "e", &cfg(None), Direction::Unidirectional);
        let z = input(&mut rng, &[1, 4, 4]);
        let tape = Tape::new();
        let p = s.bind(&tape, |_| false);
        let zv = tape.constant(z);
        let (z1, z2) = enc.forward_pair(&tape, &p, zv, &PairOrders::reversal(4)).unwrap();
        let d = tape.value(z1).max_abs_diff(&tape.value(z2));
        assert!(d > 0.0);
    }

    #[test]
    fn silenced_ssm_path_is_order_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = ParamStore::new();
        let enc = DirectionalEncoder::new(&mut s, &mut rng, "e", &cfg(None), Direction::Unidirectional);
        let DirectionalEncoder::Uni(b) = &enc else { unreachable!() };
        *s.get_mut(b.ssm.x_proj.weight) = Tensor::zeros(&[8, 2 + 6]);
        *s.get_mut(b.ssm.d_skip) = Tensor::zeros(&[8]);
        let z = input(&mut rng, &[2, 5, 4]);
        let tape = Tape::new();
        let p = s.bind(&tape, |_| false);
        let zv = tape.constant(z);
        let (z1, z2) = enc.forward_pair(&tape, &p, zv, &PairOrders::reversal(5)).unwrap();
        assert_eq!(*tape.value(z1), *tape.value(z2));
    }

    #[test]
    fn batch_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new();
        let enc = DirectionalEncoder::new(&mut s, &mut rng, "e", &cfg(None), Direction::Bidirectional);
        let z = input(&mut rng, &[3, 4, 4]);
        let pair = |z: &Tensor| {
            let tape = Tape::new();
            let p = s.bind(&tape, |_| false);
            let zv = tape.constant(z.clone());
            let (a, b) = enc.forward_pair(&tape, &p, zv, &PairOrders::reversal(4)).unwrap();
            ((*tape.value(a)).clone(), (*tape.value(b)).clone())
        };
        let perm = [2, 0, 1];
        let zp = crate::tensor::gather_axis(&z, 0, &perm).unwrap();
        let (a, b) = pair(&z);
        let (ap, bp) = pair(&zp);
        assert!(crate::tensor::gather_axis(&a, 0, &perm).unwrap().max_abs_diff(&ap) < 1e-14);
        assert!(crate::tensor::gather_axis(&b, 0, &perm).unwrap().max_abs_diff(&bp) < 1e-14);
    }
}
