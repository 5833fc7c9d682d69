//! The full forecaster: channel-token embedding, stacked CD encoder layers
//! with a temporal MLP, a linear head and the pretraining heads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, Direction, DirectionalEncoder, PairOrders};
use crate::error::{Error, Result};
use crate::nn::{Bound, LayerNorm, Linear, ParamStore};
use crate::objectives::{pearson_matrix, pearson_var, reg_loss, CorrMatrix, Metric, PEARSON_EPS};
use crate::ssm::Discretization;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// How the two channel orders of each view pair are chosen during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderMode {
    /// Original order and its reversal.
    #[default]
    FixedReverse,
    /// Original order and a fresh random order.
    FixedRandom,
    /// Two independent random orders.
    RandomPair,
    /// A random order and its reversal.
    RandomReverse,
}

impl OrderMode {
    pub fn sample(self, channels: usize, rng: &mut ChaCha8Rng) -> PairOrders {
        let ident: Vec<usize> = (0..channels).collect();
        let shuffled = |rng: &mut ChaCha8Rng| {
            let mut p = ident.clone();
            p.shuffle(rng);
            p
        };
        match self {
            Self::FixedReverse => PairOrders::reversal(channels),
            Self::FixedRandom => PairOrders {
                first: ident.clone(),
                second: shuffled(rng),
            },
            Self::RandomPair => {
                let first = shuffled(rng);
                PairOrders {
                    first,
                    second: shuffled(rng),
                }
            }
            Self::RandomReverse => {
                let first = shuffled(rng);
                let second = first.iter().rev().copied().collect();
                PairOrders { first, second }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub d_model: usize,
    pub layers: usize,
    pub lambda: f64,
    pub direction: Direction,
    pub conv: bool,
    pub conv_kernel: usize,
    /// Hidden width of the temporal MLP; `2 * d_model` when unset.
    pub mlp_hidden: Option<usize>,
    pub order_mode: OrderMode,
    pub d_state: usize,
    pub expand: usize,
    /// Rank of the step-size projection; `ceil(d_model / 16)` when unset.
    pub dt_rank: Option<usize>,
    pub discretization: Discretization,
    pub instance_norm: bool,
    pub reg_metric: Metric,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            channels: 7,
            d_model: 128,
            layers: 2,
            lambda: 0.1,
            direction: Direction::Unidirectional,
            conv: false,
            conv_kernel: 4,
            mlp_hidden: None,
            order_mode: OrderMode::FixedReverse,
            d_state: 16,
            expand: 2,
            dt_rank: None,
            discretization: Discretization::EulerB,
            instance_norm: true,
            reg_metric: Metric::L2,
        }
    }
}

impl ModelConfig {
    /// The reference width configuration used for the Traffic benchmark.
    pub fn traffic_reference(direction: Direction, conv: bool) -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            channels: 862,
            d_model: 512,
            layers: 4,
            direction,
            conv,
            mlp_hidden: Some(512),
            d_state: 32,
            expand: 1,
            dt_rank: Some(32),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("conv_kernel", self.conv_kernel),
            ("mlp_hidden", self.mlp_hidden()),
            ("dt_rank", self.dt_rank()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("model.lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(2 * self.d_model)
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_rank.unwrap_or_else(|| self.d_model.div_ceil(16))
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            d_inner: self.expand * self.d_model,
            d_state: self.d_state,
            dt_rank: self.dt_rank(),
            conv_kernel: self.conv.then_some(self.conv_kernel),
            discretization: self.discretization,
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    cd: DirectionalEncoder,
    ln_in: LayerNorm,
    mlp_up: Linear,
    mlp_down: Linear,
    ln_out: LayerNorm,
}

/// Scalar counts per component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub in_projector: usize,
    pub encoder_cd: usize,
    pub encoder_td: usize,
    pub out_projector: usize,
    /// Forecasting model total (excludes pretraining heads).
    pub total: usize,
    pub pretrain_heads: usize,
}

/// Per-window instance statistics, shape `[B, 1, C]`.
#[derive(Clone, Debug)]
pub struct InstanceStats {
    pub mean: Tensor,
    pub std: Tensor,
}

impl InstanceStats {
    pub const EPS: f64 = 1e-5;

    pub fn of(x: &Tensor) -> Result<Self> {
        let [b, l, c] = dims3(x.shape())?;
        let mut mean = Tensor::zeros(&[b, 1, c]);
        let mut std = Tensor::zeros(&[b, 1, c]);
        for bi in 0..b {
            for ci in 0..c {
                let col = (0..l).map(|t| x.data()[(bi * l + t) * c + ci]);
                let m = col.clone().sum::<f64>() / l as f64;
                let v = col.map(|v| (v - m) * (v - m)).sum::<f64>() / l as f64;
                mean.set(&[bi, 0, ci], m);
                std.set(&[bi, 0, ci], (v + Self::EPS).sqrt());
            }
        }
        Ok(Self { mean, std })
    }
}

fn dims3(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[a, b, c] => Ok([a, b, c]),
        _ => Err(Error::ShapeMismatch {
            op: "model input",
            lhs: shape.to_vec(),
            rhs: vec![0, 0, 0],
        }),
    }
}

/// Outputs of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub yhat: Var,
    pub encoded: Var,
    pub regs: Vec<Var>,
}

/// Which parameters a training stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    HeadOnly,
    EncoderAndCcm,
    EncoderAndRecon,
    None,
}

impl Trainable {
    pub fn allows(self, name: &str) -> bool {
        let encoder = name.starts_with("embed.") || name.starts_with("layers.");
        match self {
            Self::All => encoder || name.starts_with("head."),
            Self::HeadOnly => name.starts_with("head."),
            Self::EncoderAndCcm => encoder || name.starts_with("ccm_proj."),
            Self::EncoderAndRecon => encoder || name.starts_with("recon_head."),
            Self::None => false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SorMamba {
    pub config: ModelConfig,
    pub params: ParamStore,
    embed: Linear,
    layers: Vec<EncoderLayer>,
    head: Linear,
    ccm_proj: Linear,
    recon_head: Linear,
}

impl SorMamba {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (l, d) = (config.lookback, config.d_model);
        let embed = Linear::new(&mut store, &mut rng, "embed", l, d, true);
        let block = config.block_config();
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("layers.{i}");
                EncoderLayer {
                    cd: DirectionalEncoder::new(&mut store, &mut rng, &format!("{p}.cd"), &block, config.direction),
                    ln_in: LayerNorm::new(&mut store, &format!("{p}.td.ln_in"), d),
                    mlp_up: Linear::new(&mut store, &mut rng, &format!("{p}.td.up"), d, config.mlp_hidden(), true),
                    mlp_down: Linear::new(&mut store, &mut rng, &format!("{p}.td.down"), config.mlp_hidden(), d, true),
                    ln_out: LayerNorm::new(&mut store, &format!("{p}.td.ln_out"), d),
                }
            })
            .collect();
        let head = Linear::new(&mut store, &mut rng, "head", d, config.horizon, true);
        let ccm_proj = Linear::new(&mut store, &mut rng, "ccm_proj", d, d, true);
        let recon_head = Linear::new(&mut store, &mut rng, "recon_head", d, l, true);
        Ok(Self {
            config,
            params: store,
            embed,
            layers,
            head,
            ccm_proj,
            recon_head,
        })
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let s = &self.params;
        let in_projector = s.count_prefix("embed.");
        let out_projector = s.count_prefix("head.");
        let encoder_cd: usize = self.layers.iter().map(|l| l.cd.param_count()).sum();
        let encoder_td = (0..self.layers.len())
            .map(|i| s.count_prefix(&format!("layers.{i}.td.")))
            .sum();
        ParamCounts {
            in_projector,
            encoder_cd,
            encoder_td,
            out_projector,
            total: in_projector + encoder_cd + encoder_td + out_projector,
            pretrain_heads: s.count_prefix("ccm_proj.") + s.count_prefix("recon_head."),
        }
    }

    pub fn bind(&self, tape: &Tape, trainable: Trainable) -> Bound {
        self.params.bind(tape, |n| trainable.allows(n))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, l, c] = dims3(shape)?;
        if l != self.config.lookback || c != self.config.channels {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: vec![shape[0], self.config.lookback, self.config.channels],
            });
        }
        Ok(())
    }

    /// Instance-normalized copy of `x [B,L,C]` and the statistics used,
    /// or `x` unchanged when normalization is off.
    pub fn normalize(&self, x: &Tensor) -> Result<(Tensor, Option<InstanceStats>)> {
        self.check_input(x.shape())?;
        if !self.config.instance_norm {
            return Ok((x.clone(), None));
        }
        let st = InstanceStats::of(x)?;
        let xn = tensor::broadcast_zip("normalize", x, &st.mean, |a, m| a - m)?;
        let xn = tensor::broadcast_zip("normalize", &xn, &st.std, |a, s| a / s)?;
        Ok((xn, Some(st)))
    }

    /// `x [B,L,C] -> tokens [B,C,D]`.
    pub fn embed(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(&tape.shape(x))?;
        let xt = tape.transpose_last2(x)?;
        self.embed.forward(tape, p, xt)
    }

    /// Stacked encoder layers; returns the final tokens and one regularization
    /// term per layer.
    pub fn encode(&self, tape: &Tape, p: &Bound, z: Var, orders: &PairOrders) -> Result<(Var, Vec<Var>)> {
        let mut z = z;
        let mut regs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (z1, z2) = layer.cd.forward_pair(tape, p, z, orders)?;
            regs.push(reg_loss(tape, z1, z2, self.config.reg_metric)?);
            z = tape.add(tape.add(z1, z2)?, z)?;
            let h = layer.ln_in.forward(tape, p, z)?;
            let h = tape.gelu(layer.mlp_up.forward(tape, p, h)?);
            let h = layer.mlp_down.forward(tape, p, h)?;
            z = layer.ln_out.forward(tape, p, h)?;
        }
        Ok((z, regs))
    }

    /// Forecast for `x [B,L,C]` in the data scale: `yhat [B,H,C]`.
    pub fn forward(&self, tape: &Tape, p: &Bound, x: &Tensor, orders: &PairOrders) -> Result<Forward> {
        let (xn, stats) = self.normalize(x)?;
        let xv = tape.constant(xn);
        let z = self.embed(tape, p, xv)?;
        let (encoded, regs) = self.encode(tape, p, z, orders)?;
        let mut yhat = tape.transpose_last2(self.head.forward(tape, p, encoded)?)?;
        if let Some(st) = stats {
            yhat = tape.mul(yhat, tape.constant(st.std))?;
            yhat = tape.add(yhat, tape.constant(st.mean))?;
        }
        Ok(Forward { yhat, encoded, regs })
    }

    /// Orders used outside training.
    pub fn eval_orders(&self) -> PairOrders {
        PairOrders::reversal(self.config.channels)
    }

    /// Inference without gradients: `(yhat, per-layer reg values)`.
    pub fn forecast(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let tape = Tape::new();
        let p = self.bind(&tape, Trainable::None);
        let f = self.forward(&tape, &p, x, &self.eval_orders())?;
        let regs = f.regs.iter().map(|&r| tape.value(r).item()).collect();
        let y = (*tape.value(f.yhat)).clone();
        Ok((y, regs))
    }

    /// Encoder tokens of normalized input `xn [B,L,C]`.
    pub fn encode_normalized(&self, tape: &Tape, p: &Bound, xn: Var, orders: &PairOrders) -> Result<Var> {
        let z = self.embed(tape, p, xn)?;
        Ok(self.encode(tape, p, z, orders)?.0)
    }

    /// `ccm_proj(tokens)`, `[B,C,D]`.
    pub fn ccm_latent(&self, tape: &Tape, p: &Bound, encoded: Var) -> Result<Var> {
        self.ccm_proj.forward(tape, p, encoded)
    }

    /// Reconstruction of the normalized window from tokens: `[B,L,C]`.
    pub fn reconstruct(&self, tape: &Tape, p: &Bound, encoded: Var) -> Result<Var> {
        tape.transpose_last2(self.recon_head.forward(tape, p, encoded)?)
    }

    /// Per-window correlation matrices of the raw input channels and of the
    /// projected latent tokens, each `[B]` long.
    pub fn latent_for_ccm(&self, x: &Tensor) -> Result<(Vec<CorrMatrix>, Vec<CorrMatrix>)> {
        let [b, _, c] = dims3(x.shape())?;
        if c < 2 {
            return Err(Error::Data("correlation requires at least 2 channels".into()));
        }
        let tape = Tape::new();
        let p = self.bind(&tape, Trainable::None);
        let (xn, _) = self.normalize(x)?;
        let xv = tape.constant(xn);
        let enc = self.encode_normalized(&tape, &p, xv, &self.eval_orders())?;
        let rz = pearson_var(&tape, self.ccm_latent(&tape, &p, enc)?, PEARSON_EPS)?;
        let rz = tape.value(rz);
        let xt = tensor::transpose_last2(x)?;
        let mut out_x = Vec::with_capacity(b);
        let mut out_z = Vec::with_capacity(b);
        for bi in 0..b {
            let xs = tensor::narrow(&xt, 0, bi, 1)?;
            let l = xs.shape()[2];
            out_x.push(pearson_matrix(&xs.reshape(&[c, l])?, PEARSON_EPS)?);
            let zs = tensor::narrow(&rz, 0, bi, 1)?.reshape(&[c, c])?;
            out_z.push(CorrMatrix { values: zs });
        }
        Ok((out_x, out_z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{distance, mse};
    use rand::Rng;

    fn small(c: usize) -> ModelConfig {
        ModelConfig {
            lookback: 6,
            horizon: 3,
            channels: c,
            d_model: 4,
            layers: 2,
            d_state: 3,
            mlp_hidden: Some(6),
            ..ModelConfig::default()
        }
    }

    fn input(b: usize, l: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, l, c], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shapes_and_reg_count() {
        let m = SorMamba::new(small(4), 0).unwrap();
        let (y, regs) = m.forecast(&input(2, 6, 4, 1)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4]);
        assert_eq!(regs.len(), 2);
        assert!(regs.iter().all(|&r| r > 0.0));
        assert!(m.forecast(&input(2, 5, 4, 1)).is_err());
        assert!(m.forecast(&input(2, 6, 3, 1)).is_err());
    }

    #[test]
    fn ett_shape() {
        let cfg = ModelConfig {
            d_model: 8,
            layers: 1,
            d_state: 4,
            ..ModelConfig::default()
        };
        let m = SorMamba::new(cfg, 0).unwrap();
        assert_eq!(m.forecast(&input(1, 96, 7, 2)).unwrap().0.shape(), &[1, 96, 7]);
    }

    #[test]
    fn zero_layers_rejected() {
        let cfg = ModelConfig { layers: 0, ..small(2) };
        assert!(matches!(SorMamba::new(cfg, 0), Err(Error::Config(_))));
        let cfg = ModelConfig { lambda: -0.1, ..small(2) };
        assert!(SorMamba::new(cfg, 0).is_err());
    }

    #[test]
    fn single_channel_has_zero_reg() {
        let m = SorMamba::new(small(1), 3).unwrap();
        let (_, regs) = m.forecast(&input(2, 6, 1, 4)).unwrap();
        assert!(regs.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn reg_terms_match_recomputed_distance() {
        let m = SorMamba::new(small(4), 5).unwrap();
        let x = input(2, 6, 4, 6);
        let tape = Tape::new();
        let p = m.bind(&tape, Trainable::None);
        let (xn, _) = m.normalize(&x).unwrap();
        let z0 = m.embed(&tape, &p, tape.constant(xn)).unwrap();
        let (_, regs) = m.encode(&tape, &p, z0, &m.eval_orders()).unwrap();
        let layer = &m.layers[0];
        let (z1, z2) = layer.cd.forward_pair(&tape, &p, z0, &m.eval_orders()).unwrap();
        let d = distance(&tape.value(z1), &tape.value(z2), Metric::L2).unwrap();
        assert_eq!(tape.value(regs[0]).item(), d);
    }

    #[test]
    fn embed_properties() {
        let mut m = SorMamba::new(small(3), 7).unwrap();
        let bias = m.embed.bias.unwrap();
        *m.params.get_mut(bias) = Tensor::zeros(&[4]);
        let tape = Tape::new();
        let p = m.bind(&tape, Trainable::None);
        let z = m.embed(&tape, &p, tape.constant(Tensor::zeros(&[1, 6, 3]))).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        let mut x = input(1, 6, 3, 8);
        for t in 0..6 {
            let v = x.get(&[0, t, 0]);
            x.set(&[0, t, 1], v);
        }
        let z = tape.value(m.embed(&tape, &p, tape.constant(x.clone())).unwrap());
        for d in 0..4 {
            assert_eq!(z.get(&[0, 0, d]), z.get(&[0, 1, d]));
        }
        let perm = [2, 0, 1];
        let xp = tensor::gather_axis(&x, 2, &perm).unwrap();
        let zp = tape.value(m.embed(&tape, &p, tape.constant(xp)).unwrap());
        assert_eq!(*zp, tensor::gather_axis(&z, 1, &perm).unwrap());
    }

    #[test]
    fn zero_parameters_give_head_bias() {
        let cfg = ModelConfig {
            instance_norm: false,
            ..small(2)
        };
        let mut m = SorMamba::new(cfg, 9).unwrap();
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            let shape = m.params.get(id).shape().to_vec();
            *m.params.get_mut(id) = Tensor::zeros(&shape);
        }
        let hb = m.head.bias.unwrap();
        *m.params.get_mut(hb) = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let (y, _) = m.forecast(&input(2, 6, 2, 10)).unwrap();
        for b in 0..2 {
            for h in 0..3 {
                for c in 0..2 {
                    assert_eq!(y.get(&[b, h, c]), [0.5, -1.0, 2.0][h]);
                }
            }
        }
    }

    #[test]
    fn symmetric_encoder_commutes_with_reversal() {
        let mut m = SorMamba::new(small(5), 11).unwrap();
        let names: Vec<_> = m
            .params
            .iter()
            .filter(|(_, n, _)| n.contains(".x_proj.") || n.contains(".dt_proj."))
            .map(|(id, _, _)| id)
            .collect();
        for id in names {
            let shape = m.params.get(id).shape().to_vec();
            *m.params.get_mut(id) = Tensor::zeros(&shape);
        }
        let x = input(2, 6, 5, 12);
        let (y, regs) = m.forecast(&x).unwrap();
        assert!(regs.iter().all(|&r| r < 1e-20), "{regs:?}");
        let xr = tensor::reverse_axis(&x, 2).unwrap();
        let (yr, _) = m.forecast(&xr).unwrap();
        let back = tensor::reverse_axis(&yr, 2).unwrap();
        assert!(back.max_abs_diff(&y) < 1e-12);
    }

    fn permuted_gap(m: &SorMamba, x: &Tensor, perm: &[usize]) -> f64 {
        let (y, _) = m.forecast(x).unwrap();
        let (yp, _) = m.forecast(&tensor::gather_axis(x, 2, perm).unwrap()).unwrap();
        let back = tensor::gather_axis(&yp, 2, &crate::blocks::inverse_permutation(perm)).unwrap();
        mse(&back, &y).unwrap()
    }

    #[test]
    fn random_init_is_order_biased() {
        let m = SorMamba::new(small(5), 13).unwrap();
        let x = input(2, 6, 5, 14);
        assert!(permuted_gap(&m, &x, &[3, 0, 4, 1, 2]) > 1e-20);
        let bi = SorMamba::new(
            ModelConfig {
                direction: Direction::Bidirectional,
                ..small(5)
            },
            13,
        )
        .unwrap();
        assert!(permuted_gap(&bi, &x, &[4, 3, 2, 1, 0]) > 1e-20);
    }

    #[test]
    fn shared_block_pair_is_reversal_equivariant() {
        let m = SorMamba::new(small(5), 17).unwrap();
        let x = input(2, 6, 5, 18);
        assert!(permuted_gap(&m, &x, &[4, 3, 2, 1, 0]) < 1e-24);
    }

    #[test]
    fn parameter_ordering_and_bi_doubling() {
        for (d, expand, n) in [(4, 2, 3), (8, 1, 4), (16, 2, 8)] {
            let base = ModelConfig {
                d_model: d,
                expand,
                d_state: n,
                ..small(3)
            };
            let count = |dir, conv| {
                SorMamba::new(ModelConfig { direction: dir, conv, ..base.clone() }, 0)
                    .unwrap()
                    .count_parameters()
            };
            let uni = count(Direction::Unidirectional, false);
            let uni_c = count(Direction::Unidirectional, true);
            let bi_c = count(Direction::Bidirectional, true);
            let bi = count(Direction::Bidirectional, false);
            assert_eq!(bi.encoder_cd, 2 * uni.encoder_cd);
            assert_eq!(uni_c.encoder_cd - uni.encoder_cd, base.layers * expand * d * (base.conv_kernel + 1));
            assert!(uni.total < uni_c.total && uni_c.total < bi_c.total);
            assert_eq!(uni.encoder_td, bi.encoder_td);
        }
    }

    #[test]
    fn ccm_latents_are_correlation_matrices() {
        let m = SorMamba::new(small(3), 15).unwrap();
        let mut x = input(2, 6, 3, 16);
        for t in 0..6 {
            let v = x.get(&[0, t, 0]);
            x.set(&[0, t, 2], v);
        }
        let (rx, rz) = m.latent_for_ccm(&x).unwrap();
        assert!((rx[0].get(0, 2) - 1.0).abs() < 1e-7);
        for r in rx.iter().chain(&rz) {
            for i in 0..3 {
                assert_eq!(r.get(i, i), 1.0);
                for j in 0..3 {
                    assert!((r.get(i, j) - r.get(j, i)).abs() < 1e-12);
                    assert!(r.get(i, j).abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn order_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(OrderMode::FixedReverse.sample(4, &mut rng), PairOrders::reversal(4));
        let o = OrderMode::FixedRandom.sample(6, &mut rng);
        assert_eq!(o.first, (0..6).collect::<Vec<_>>());
        let o = OrderMode::RandomReverse.sample(6, &mut rng);
        assert_eq!(o.second, o.first.iter().rev().copied().collect::<Vec<_>>());
        let mut s = OrderMode::RandomPair.sample(6, &mut rng).second;
        s.sort_unstable();
        assert_eq!(s, (0..6).collect::<Vec<_>>());
    }
}
