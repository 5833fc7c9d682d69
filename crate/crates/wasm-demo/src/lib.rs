//! Browser bindings: discretization curves, channel-order sensitivity of a
//! small randomly initialized model, and Pearson matrices of pasted CSV.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sormamba::blocks::{inverse_permutation, Direction};
use sormamba::data::{synthetic_series, SyntheticSpec};
use sormamba::model::{ModelConfig, SorMamba};
use sormamba::objectives::{mse, pearson_matrix, PEARSON_EPS};
use sormamba::ssm::{discretize_scalar, Discretization};
use sormamba::tensor::{gather_axis, transpose_last2};
use sormamba::Tensor;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curve {
    delta: Vec<f64>,
    a_bar: Vec<f64>,
    b_zoh: Vec<f64>,
    b_euler: Vec<f64>,
}

/// `Ā` and both `B̄` forms over `Δ ∈ (0, delta_max]`.
#[wasm_bindgen]
pub fn discretization_curve(a: f64, b: f64, delta_max: f64, points: usize) -> Result<String, String> {
    if !(delta_max > 0.0) || points < 2 || points > 10_000 {
        return Err("need delta_max > 0 and 2..=10000 points".into());
    }
    let mut c = Curve {
        delta: Vec::with_capacity(points),
        a_bar: Vec::with_capacity(points),
        b_zoh: Vec::with_capacity(points),
        b_euler: Vec::with_capacity(points),
    };
    for i in 1..=points {
        let d = delta_max * i as f64 / points as f64;
        let (ab, bz) = discretize_scalar(d, a, b, Discretization::ZohExact);
        let (_, be) = discretize_scalar(d, a, b, Discretization::EulerB);
        c.delta.push(d);
        c.a_bar.push(ab);
        c.b_zoh.push(bz);
        c.b_euler.push(be);
    }
    to_json(&c)
}

#[derive(Serialize)]
struct Sensitivity {
    channels: usize,
    direction: &'static str,
    /// MSE between the direct forecast and the un-permuted forecast on the
    /// reversed input.
    reversed_gap: f64,
    /// Same for a random channel order.
    shuffled_gap: f64,
    shuffled_order: Vec<usize>,
    reg_per_layer: Vec<f64>,
}

/// Forecast change when the input channels of one synthetic window are
/// reversed or shuffled, for a freshly initialized model.
#[wasm_bindgen]
pub fn order_sensitivity(channels: usize, seed: u64, bidirectional: bool) -> Result<String, String> {
    if !(2..=32).contains(&channels) {
        return Err("channels must be in 2..=32".into());
    }
    let direction = if bidirectional {
        Direction::Bidirectional
    } else {
        Direction::Unidirectional
    };
    let cfg = ModelConfig {
        lookback: 24,
        horizon: 8,
        channels,
        d_model: 16,
        layers: 2,
        d_state: 4,
        direction,
        ..ModelConfig::default()
    };
    let model = SorMamba::new(cfg, seed).map_err(|e| e.to_string())?;
    let series = synthetic_series(&SyntheticSpec {
        len: 64,
        channels,
        seed,
        ..SyntheticSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let x = series.rows(0..24);
    let x = Tensor::new(vec![1, 24, channels], x.data().to_vec()).map_err(|e| e.to_string())?;
    let (direct, regs) = model.forecast(&x).map_err(|e| e.to_string())?;

    let gap = |perm: &[usize]| -> Result<f64, String> {
        let xp = gather_axis(&x, 2, perm).map_err(|e| e.to_string())?;
        let (yp, _) = model.forecast(&xp).map_err(|e| e.to_string())?;
        let back = gather_axis(&yp, 2, &inverse_permutation(perm)).map_err(|e| e.to_string())?;
        mse(&back, &direct).map_err(|e| e.to_string())
    };
    let reversed: Vec<usize> = (0..channels).rev().collect();
    let mut shuffled: Vec<usize> = (0..channels).collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    to_json(&Sensitivity {
        channels,
        direction: if bidirectional { "bidirectional" } else { "unidirectional" },
        reversed_gap: gap(&reversed)?,
        shuffled_gap: gap(&shuffled)?,
        shuffled_order: shuffled,
        reg_per_layer: regs,
    })
}

#[derive(Serialize)]
struct Correlation {
    names: Vec<String>,
    matrix: Vec<Vec<f64>>,
}

/// Pearson matrix of the numeric columns of CSV text with a header row.
#[wasm_bindgen]
pub fn correlation_matrix(csv_text: &str) -> Result<String, String> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(str::to_string)
        .collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        for f in rec.iter() {
            values.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| format!("row {}: {f:?} is not a number", i + 1))?,
            );
        }
        rows += 1;
    }
    let c = names.len();
    if c < 2 || rows < 2 {
        return Err("need at least 2 columns and 2 rows".into());
    }
    let t = Tensor::new(vec![rows, c], values).map_err(|e| e.to_string())?;
    let r = pearson_matrix(&transpose_last2(&t).map_err(|e| e.to_string())?, PEARSON_EPS)
        .map_err(|e| e.to_string())?;
    let matrix = (0..c).map(|i| (0..c).map(|j| r.get(i, j)).collect()).collect();
    to_json(&Correlation { names, matrix })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_matches_closed_form() {
        let v: serde_json::Value = serde_json::from_str(&discretization_curve(-1.0, 2.0, 0.5, 5).unwrap()).unwrap();
        let last = |k: &str| v[k].as_array().unwrap().last().unwrap().as_f64().unwrap();
        assert!((last("a_bar") - (-0.5f64).exp()).abs() < 1e-12);
        assert!((last("b_zoh") - 2.0 * (1.0 - (-0.5f64).exp())).abs() < 1e-12);
        assert_eq!(last("b_euler"), 1.0);
        assert!(discretization_curve(-1.0, 1.0, 0.0, 5).is_err());
    }

    #[test]
    fn shared_block_is_reversal_equivariant() {
        let v: serde_json::Value = serde_json::from_str(&order_sensitivity(5, 1, false).unwrap()).unwrap();
        assert!(v["reversed_gap"].as_f64().unwrap() < 1e-24);
        assert!(v["shuffled_gap"].as_f64().unwrap() > 0.0);
        let v: serde_json::Value = serde_json::from_str(&order_sensitivity(5, 1, true).unwrap()).unwrap();
        assert!(v["reversed_gap"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn correlation_of_pasted_csv() {
        let v: serde_json::Value =
            serde_json::from_str(&correlation_matrix("a,b,c\n1,2,3\n2,4,1\n3,6,2\n").unwrap()).unwrap();
        assert!((v["matrix"][0][1].as_f64().unwrap() - 1.0).abs() < 1e-7);
        assert!(correlation_matrix("a,b\n1,x\n2,3\n").is_err());
    }
}
