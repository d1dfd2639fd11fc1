//! Cross-frame diagonal attention and contextual-token saliency.

use mubert_tensor::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, Linear, ParamStore};

/// Row-sum slack tolerated on attention fed to [`poi_scores`].
pub const STOCHASTIC_TOLERANCE: f64 = 1e-4;

/// Single-head query/key/value maps (`d → d`). The key map has no bias:
/// it would shift every softmax row by a constant.
#[derive(Clone, Debug)]
pub struct DmaParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl DmaParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            query: Linear::new(store, init, &format!("{name}.query"), d, d, true),
            key: Linear::new(store, init, &format!("{name}.key"), d, d, false),
            value: Linear::new(store, init, &format!("{name}.value"), d, d, true),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DmaOutput {
    /// `[N_p × d]` weighted values.
    pub features: Var,
    /// `[N_p × N_p]` cross-frame attention.
    pub attention: Var,
    /// `[N_p]` diagonal of `attention`.
    pub diagonal: Var,
    /// `[N_p]` diagonal times saliency, when saliency was supplied.
    pub combined: Option<Var>,
    /// `[N_p × d]` values before weighting.
    pub values: Var,
}

fn check_pair<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    let sa = g.value(a).dims2("dma")?;
    let sb = g.value(b).dims2("dma")?;
    if sa != sb {
        return Err(Error::Tensor(mubert_tensor::TensorError::Shape {
            op: "dma",
            lhs: vec![sa.0, sa.1],
            rhs: vec![sb.0, sb.1],
        }));
    }
    Ok(())
}

/// Queries come from the later frame, keys and values from the swapped
/// frame. Both inputs are patch rows only.
pub fn dma<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &DmaParams,
    later: Var,
    swapped: Var,
    scaled: bool,
) -> Result<DmaOutput> {
    dma_inner(g, p, params, later, swapped, None, scaled)
}

/// As [`dma`], with values weighted by `diag(Â) ⊙ s` instead of `diag(Â)`.
pub fn dma_with_poi<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &DmaParams,
    later: Var,
    swapped: Var,
    saliency: Var,
    scaled: bool,
) -> Result<DmaOutput> {
    dma_inner(g, p, params, later, swapped, Some(saliency), scaled)
}

fn dma_inner<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &DmaParams,
    later: Var,
    swapped: Var,
    saliency: Option<Var>,
    scaled: bool,
) -> Result<DmaOutput> {
    check_pair(g, later, swapped)?;
    let n = g.shape(later)[0];
    if let Some(s) = saliency {
        if g.shape(s) != [n] {
            return Err(Error::Tensor(mubert_tensor::TensorError::Shape {
                op: "dma_with_poi",
                lhs: g.shape(s).to_vec(),
                rhs: vec![n],
            }));
        }
    }
    let q = params.query.forward(g, p, later)?;
    let k = params.key.forward(g, p, swapped)?;
    let v = params.value.forward(g, p, swapped)?;
    let mut logits = g.matmul_nt(q, k)?;
    if scaled {
        let d = g.shape(q)[1] as f64;
        logits = g.scale(logits, T::lit(1.0 / d.sqrt()))?;
    }
    let attention = g.softmax_rows(logits)?;
    let diagonal = g.diag(attention)?;
    let (weights, combined) = match saliency {
        Some(s) => {
            let w = g.mul(diagonal, s)?;
            (w, Some(w))
        }
        None => (diagonal, None),
    };
    let features = g.mul_rows(weights, v)?;
    Ok(DmaOutput { features, attention, diagonal, combined, values: v })
}

fn check_stochastic<T: Real>(att: &Tensor<T>) -> Result<(usize, usize)> {
    let (r, c) = att.dims2("poi_scores")?;
    if r != c || r < 2 {
        return Err(Error::Integrity(format!("attention map {:?} is not square with a token row", att.shape())));
    }
    for i in 0..r {
        let s: f64 = att.row(i).iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > STOCHASTIC_TOLERANCE || att.row(i).iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::Integrity(format!("attention row {i} sums to {s}")));
        }
    }
    Ok((r, c))
}

/// Saliency from the contextual token's attention row: row 0 without its
/// self-weight, renormalized to sum to 1. Differentiable.
pub fn poi_scores_var<T: Real>(g: &mut Graph<T>, last_attention: Var) -> Result<Var> {
    let (_, c) = check_stochastic(g.value(last_attention))?;
    let row = g.slice_rows(last_attention, 0, 1)?;
    let row = g.slice_cols(row, 1, c)?;
    let row = g.reshape(row, vec![c - 1])?;
    Ok(g.normalize_sum(row)?)
}

/// Plain-value version of [`poi_scores_var`].
pub fn poi_scores<T: Real>(last_attention: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, c) = check_stochastic(last_attention)?;
    let row = &last_attention.row(0)[1..c];
    let total: f64 = row.iter().map(|v| v.as_f64()).sum();
    if total <= 0.0 {
        return Err(Error::Integrity("contextual token attends only to itself".into()));
    }
    Ok(row.iter().map(|v| v.as_f64() / total).collect())
}

/// Encoder-output row 0, as a `[d]` vector.
pub fn contextual_features<T: Real>(g: &mut Graph<T>, latent: Var, has_contextual_token: bool) -> Result<Var> {
    if !has_contextual_token {
        return Err(Error::usage("sequence carries no contextual token"));
    }
    Ok(g.row(latent, 0)?)
}
