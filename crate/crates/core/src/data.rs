//! Multivariate series ingestion, chronological splits, normalization,
//! windowing and the channel-order and missingness transforms.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{global_corr, CorrMatrix};
use crate::tensor::Tensor;

/// A `[T, C]` multivariate series.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub name: String,
    pub values: Tensor,
    pub channel_names: Vec<String>,
    pub timestamps: Option<Vec<String>>,
}

impl RawSeries {
    pub fn new(name: impl Into<String>, values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Data(format!("series must be [T, C], got {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(Error::Data("series contains non-finite values".into()));
        }
        let channel_names = (0..values.shape()[1]).map(|c| format!("ch{c}")).collect();
        Ok(Self {
            name: name.into(),
            values,
            channel_names,
            timestamps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn rows(&self, range: Range<usize>) -> Tensor {
        let c = self.channels();
        Tensor::new(vec![range.len(), c], self.values.data()[range.start * c..range.end * c].to_vec())
            .expect("row slice")
    }
}

/// Reads a header-led numeric CSV; the first column is dropped when it holds timestamps.
pub fn load_csv(path: impl AsRef<Path>, has_timestamp: bool) -> Result<RawSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv { row: 0, msg: e.to_string() })?
        .clone();
    let skip = usize::from(has_timestamp);
    if headers.len() <= skip {
        return Err(Error::Csv {
            row: 0,
            msg: "no value columns".into(),
        });
    }
    let channel_names: Vec<String> = headers.iter().skip(skip).map(str::to_owned).collect();
    let mut data = Vec::new();
    let mut stamps = Vec::new();
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Csv { row, msg: e.to_string() })?;
        if has_timestamp {
            stamps.push(rec[0].to_owned());
        }
        for (j, cell) in rec.iter().skip(skip).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Csv {
                row,
                msg: format!("column {:?}: non-numeric cell {cell:?}", channel_names[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    row,
                    msg: format!("column {:?}: non-finite cell {cell:?}", channel_names[j]),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let values = Tensor::new(vec![rows, channel_names.len()], data)?;
    Ok(RawSeries {
        name,
        values,
        channel_names,
        timestamps: has_timestamp.then_some(stamps),
    })
}

/// Chronological split rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitFamily {
    /// Fixed 12/4/4-month borders of hourly data.
    EttHour,
    /// Fixed 12/4/4-month borders of 15-minute data.
    EttMinute,
    /// train `floor(0.6T)`, test `floor(0.2T)`, val the rest.
    #[serde(alias = "ett-pems-solar")]
    Ratio622,
    /// train `floor(0.7T)`, test `floor(0.2T)`, val the rest.
    #[serde(alias = "other")]
    Ratio712,
}

/// Raw row ranges of the three splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SplitBorders {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl SplitBorders {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// Rows feeding `split`: val and test are prefixed with the preceding
    /// `lookback` rows so their first target follows the previous split.
    pub fn segment(&self, split: Split, lookback: usize) -> Range<usize> {
        let r = self.range(split);
        match split {
            Split::Train => r,
            _ => r.start.saturating_sub(lookback)..r.end,
        }
    }

    /// Windows of `lookback + horizon` rows per split, or an error naming the short split.
    pub fn window_counts(&self, lookback: usize, horizon: usize) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (k, s) in Split::ALL.into_iter().enumerate() {
            let n = self.segment(s, lookback).len();
            if n < lookback + horizon {
                return Err(Error::Data(format!(
                    "{} split has {n} rows, needs at least {}",
                    s.as_str(),
                    lookback + horizon
                )));
            }
            out[k] = n - lookback - horizon + 1;
        }
        Ok(out)
    }

    /// Start positions with a full lookback window per split (`rows − L + 1`).
    pub fn lookback_counts(&self, lookback: usize) -> [usize; 3] {
        Split::ALL.map(|s| (self.segment(s, lookback).len() + 1).saturating_sub(lookback))
    }
}

pub fn chronological_split(len: usize, family: SplitFamily) -> Result<SplitBorders> {
    let (train, val) = match family {
        SplitFamily::EttHour | SplitFamily::EttMinute => {
            let per = if family == SplitFamily::EttHour { 1 } else { 4 };
            let month = 30 * 24 * per;
            let (tr, va, te) = (12 * month, 4 * month, 4 * month);
            if len < tr + va + te {
                return Err(Error::Data(format!(
                    "fixed-border split needs {} rows, got {len}",
                    tr + va + te
                )));
            }
            (tr, va)
        }
        SplitFamily::Ratio622 | SplitFamily::Ratio712 => {
            let p = if family == SplitFamily::Ratio622 { 6 } else { 7 };
            let train = len * p / 10;
            let test = len * 2 / 10;
            (train, len - train - test)
        }
    };
    let end = match family {
        SplitFamily::EttHour | SplitFamily::EttMinute => train + 2 * val,
        _ => len,
    };
    let borders = SplitBorders {
        train: 0..train,
        val: train..train + val,
        test: train + val..end,
    };
    if borders.train.is_empty() || borders.val.is_empty() || borders.test.is_empty() {
        return Err(Error::Data(format!("series of {len} rows is too short to split")));
    }
    Ok(borders)
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits on `[T, C]` rows; zero-variance channels get unit scale.
    pub fn fit(rows: &Tensor) -> Self {
        let (t, c) = (rows.shape()[0], rows.shape()[1]);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in rows.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= t as f64;
        }
        for row in rows.data().chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / t as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % c;
            *v = f(*v, self.mean[j], self.std[j]);
        }
        out
    }

    /// Works on any tensor whose last axis is the channel axis.
    pub fn normalize(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| v * s + m)
    }
}

/// Sliding `(x [L,C], y [H,C])` windows with stride 1 over one split.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    pub split: Split,
    /// Normalized rows of the split segment, `[T_seg, C]`.
    pub rows: Tensor,
    /// Index of `rows[0]` in the full series.
    pub offset: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub normalizer: Normalizer,
    /// Rows supplying targets when they differ from the inputs, same shape as `rows`.
    pub targets: Option<Tensor>,
}

impl WindowedDataset {
    pub fn new(
        split: Split,
        rows: Tensor,
        offset: usize,
        lookback: usize,
        horizon: usize,
        normalizer: Normalizer,
    ) -> Result<Self> {
        if rows.shape()[0] < lookback + horizon {
            return Err(Error::Data(format!(
                "{} split has {} rows, needs at least {}",
                split.as_str(),
                rows.shape()[0],
                lookback + horizon
            )));
        }
        Ok(Self {
            split,
            rows,
            offset,
            lookback,
            horizon,
            normalizer,
            targets: None,
        })
    }

    /// Draws targets from `targets` instead of the input rows.
    pub fn with_targets(mut self, targets: Tensor) -> Result<Self> {
        if targets.shape() != self.rows.shape() {
            return Err(Error::ShapeMismatch {
                op: "with_targets",
                lhs: self.rows.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        self.targets = Some(targets);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.rows.shape()[0] - self.lookback - self.horizon + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.rows.shape()[1]
    }

    /// Absolute row ranges `(input, target)` of window `i`.
    pub fn window_span(&self, i: usize) -> (Range<usize>, Range<usize>) {
        let s = self.offset + i;
        (s..s + self.lookback, s + self.lookback..s + self.lookback + self.horizon)
    }

    /// Stacks windows `idx` into `(x [B,L,C], y [B,H,C])`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let c = self.channels();
        let (l, h) = (self.lookback, self.horizon);
        let d = self.rows.data();
        let t = self.targets.as_ref().unwrap_or(&self.rows).data();
        let mut xs = Vec::with_capacity(idx.len() * l * c);
        let mut ys = Vec::with_capacity(idx.len() * h * c);
        for &i in idx {
            xs.extend_from_slice(&d[i * c..(i + l) * c]);
            ys.extend_from_slice(&t[(i + l) * c..(i + l + h) * c]);
        }
        (
            Tensor::new(vec![idx.len(), l, c], xs).expect("x batch"),
            Tensor::new(vec![idx.len(), h, c], ys).expect("y batch"),
        )
    }
}

/// Train, validation and test windows sharing train-fitted statistics.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub borders: SplitBorders,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

impl DataSplits {
    pub fn get(&self, split: Split) -> &WindowedDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn make_windows(series: &RawSeries, family: SplitFamily, lookback: usize, horizon: usize) -> Result<DataSplits> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::Config("lookback and horizon must be >= 1".into()));
    }
    let borders = chronological_split(series.len(), family)?;
    borders.window_counts(lookback, horizon)?;
    let normalizer = Normalizer::fit(&series.rows(borders.train.clone()));
    let build = |split| {
        let seg = borders.segment(split, lookback);
        let rows = normalizer.normalize(&series.rows(seg.clone()));
        WindowedDataset::new(split, rows, seg.start, lookback, horizon, normalizer.clone())
    };
    Ok(DataSplits {
        train: build(Split::Train)?,
        val: build(Split::Val)?,
        test: build(Split::Test)?,
        borders,
    })
}

/// Channel reorderings; `x'[.., i] = x[.., perm[i]]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PermuteMode {
    Identity,
    Reverse,
    FixedRandom(u64),
    FreshRandom,
}

pub fn channel_permutation(c: usize, mode: PermuteMode, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..c).collect();
    match mode {
        PermuteMode::Identity => {}
        PermuteMode::Reverse => p.reverse(),
        PermuteMode::FixedRandom(seed) => p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
        PermuteMode::FreshRandom => p.shuffle(rng),
    }
    p
}

/// Reorders the last axis of `x`.
pub fn permute_channels(x: &Tensor, mode: PermuteMode, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
    let axis = x.rank().checked_sub(1).ok_or(Error::AxisOutOfRange { axis: 0, rank: 0 })?;
    let perm = channel_permutation(x.shape()[axis], mode, rng);
    Ok((crate::tensor::gather_axis(x, axis, &perm)?, perm))
}

/// Fills NaN cells per channel by linear interpolation between the nearest
/// observed neighbours, extending the nearest value into edge gaps.
pub fn interpolate_missing(values: &mut Tensor) -> Result<()> {
    let (t, c) = (values.shape()[0], values.shape()[1]);
    let d = values.data_mut();
    for j in 0..c {
        let observed: Vec<usize> = (0..t).filter(|&i| !d[i * c + j].is_nan()).collect();
        let (&first, &last) = match (observed.first(), observed.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::Data(format!("channel {j} is entirely missing"))),
        };
        for i in 0..first {
            d[i * c + j] = d[first * c + j];
        }
        for i in last + 1..t {
            d[i * c + j] = d[last * c + j];
        }
        for w in observed.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (va, vb) = (d[a * c + j], d[b * c + j]);
            for i in a + 1..b {
                let f = (i - a) as f64 / (b - a) as f64;
                d[i * c + j] = va + f * (vb - va);
            }
        }
    }
    Ok(())
}

/// Removes each cell independently with probability `rate`, then fills the gaps.
/// Returns the filled series and the number of removed cells.
pub fn inject_missingness(series: &RawSeries, rate: f64, seed: u64) -> Result<(RawSeries, usize)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("missing rate must be in [0, 1), got {rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = series.values.clone();
    let mut removed = 0;
    for v in values.data_mut() {
        if rng.gen::<f64>() < rate {
            *v = f64::NAN;
            removed += 1;
        }
    }
    interpolate_missing(&mut values)?;
    Ok((
        RawSeries {
            values,
            ..series.clone()
        },
        removed,
    ))
}

/// Channel count and mean absolute off-diagonal correlation of the full series.
pub fn dataset_channel_stats(series: &RawSeries) -> Result<(usize, f64)> {
    let r: CorrMatrix = global_corr(&series.values)?;
    Ok((series.channels(), r.mean_abs_offdiag()))
}

/// Seeded synthetic series with correlated channels: each channel mixes a few
/// shared latent seasonal AR(1) factors plus independent noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub len: usize,
    pub channels: usize,
    pub factors: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            len: 2000,
            channels: 8,
            factors: 3,
            noise: 0.1,
            seed: 0,
        }
    }
}

pub fn synthetic_series(spec: &SyntheticSpec) -> Result<RawSeries> {
    if spec.len == 0 || spec.channels == 0 || spec.factors == 0 || !(spec.noise >= 0.0) {
        return Err(Error::Config(format!("invalid synthetic spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let periods: Vec<f64> = (0..spec.factors).map(|k| [24.0, 12.0, 48.0, 7.0, 96.0][k % 5]).collect();
    let phases: Vec<f64> = (0..spec.factors)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let weights: Vec<f64> = (0..spec.channels * spec.factors)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let mut ar = vec![0.0; spec.factors];
    let mut data = Vec::with_capacity(spec.len * spec.channels);
    for t in 0..spec.len {
        let f: Vec<f64> = (0..spec.factors)
            .map(|k| {
                ar[k] = 0.9 * ar[k] + 0.2 * std_normal.sample(&mut rng);
                (std::f64::consts::TAU * t as f64 / periods[k] + phases[k]).sin() + ar[k]
            })
            .collect();
        for c in 0..spec.channels {
            let mix: f64 = (0..spec.factors).map(|k| weights[c * spec.factors + k] * f[k]).sum();
            data.push(mix + spec.noise * std_normal.sample(&mut rng));
        }
    }
    RawSeries::new("synthetic", Tensor::new(vec![spec.len, spec.channels], data)?)
}

/// One dataset entry of a manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub path: String,
    pub family: SplitFamily,
    #[serde(default = "default_true")]
    pub has_timestamp: bool,
    pub lookback: usize,
    pub horizons: Vec<usize>,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub datasets: Vec<DatasetEntry>,
}
