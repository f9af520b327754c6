//! Per-location attention summaries for visualization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::network::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// A layer's attention summary on its token grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub layer: String,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Min-max scaled to `0..=255`; a constant map becomes mid gray.
    pub fn to_gray(&self) -> Vec<u8> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return vec![128; self.values.len()];
        }
        self.values
            .iter()
            .map(|&v| libm::round((v - lo) / (hi - lo) * 255.0) as u8)
            .collect()
    }
}

/// Mean `|gate|` over channels for each token of an `N × C` gate.
pub fn gate_magnitude(gate: &Tensor, grid: (usize, usize)) -> Result<Vec<f64>> {
    let s = gate.shape();
    if s.len() != 2 || s[0] != grid.0 * grid.1 {
        return Err(dim_err!(
            "gate {:?} does not cover a {}x{} grid",
            s,
            grid.0,
            grid.1
        ));
    }
    Ok(gate
        .data()
        .chunks(s[1])
        .map(|row| row.iter().map(|v| (*v as f64).abs()).sum::<f64>() / s[1] as f64)
        .collect())
}

/// Query-averaged weight of each key of an `N × M` softmax, with each key
/// painted over the `ratio × ratio` cell it was pooled from.
pub fn key_attention(weights: &Tensor, grid: (usize, usize), ratio: usize) -> Result<Vec<f64>> {
    let s = weights.shape();
    let (kh, kw) = (grid.0.div_ceil(ratio), grid.1.div_ceil(ratio));
    if s.len() != 2 || s[0] != grid.0 * grid.1 || s[1] != kh * kw {
        return Err(dim_err!(
            "weights {:?} do not match a {}x{} grid at ratio {}",
            s,
            grid.0,
            grid.1,
            ratio
        ));
    }
    let mut keys = vec![0.0f64; s[1]];
    for row in weights.data().chunks(s[1]) {
        for (k, &v) in keys.iter_mut().zip(row) {
            *k += v as f64;
        }
    }
    let n = s[0] as f64;
    Ok((0..grid.0 * grid.1)
        .map(|i| {
            let (r, c) = (i / grid.1 / ratio, i % grid.1 / ratio);
            keys[r * kw + c] / n
        })
        .collect())
}

/// Attention summary of `layer` for one `C_img × H × W` image.
pub fn heatmap(model: &Model, image: &Tensor, layer: &str) -> Result<Heatmap> {
    let names = model.net.attention_layers();
    if !names.iter().any(|n| n == layer) {
        return Err(Error::Usage(format!(
            "unknown layer {layer:?}; valid layers: {}",
            names.join(", ")
        )));
    }
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let x = tape.constant(image.clone());
    let trace = model.net.forward_sample(&mut tape, &p, x)?;
    let map = trace
        .attention
        .iter()
        .find(|m| m.layer == layer)
        .expect("listed layer is traced");
    let values = tape.value(map.var);
    let values = if layer.starts_with("dec") {
        let stage: usize = layer[3..]
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .expect("decoder layer name");
        key_attention(values, map.grid, model.config().reduction_ratios[stage - 1])?
    } else {
        gate_magnitude(values, map.grid)?
    };
    Ok(Heatmap {
        layer: layer.into(),
        height: map.grid.0,
        width: map.grid.1,
        values,
    })
}
