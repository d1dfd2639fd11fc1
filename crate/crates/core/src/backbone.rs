//! Pre-norm transformer blocks and the symmetric encoder/decoder stacks.

use mubert_tensor::{Graph, Real, Var};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, LayerNormParams, Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    /// Divide logits by `sqrt(head width)`.
    pub scaled: bool,
    pub ln_eps: f64,
}

/// One block: `x' = x + MHA(LN(x))`, `out = x' + MLP(LN(x'))`.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub query: Linear,
    /// Keys carry no bias: a key bias only shifts each softmax row by a
    /// constant and never changes the output.
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BlockParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, d: usize, mlp_ratio: usize) -> Self {
        let hidden = d * mlp_ratio;
        Self {
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), d),
            query: Linear::new(store, init, &format!("{name}.attn.query"), d, d, true),
            key: Linear::new(store, init, &format!("{name}.attn.key"), d, d, false),
            value: Linear::new(store, init, &format!("{name}.attn.value"), d, d, true),
            out: Linear::new(store, init, &format!("{name}.attn.out"), d, d, true),
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, init, &format!("{name}.mlp.fc1"), d, hidden, true),
            fc2: Linear::new(store, init, &format!("{name}.mlp.fc2"), hidden, d, true),
        }
    }

    pub fn width(&self) -> usize {
        self.query.in_dim
    }

    /// Zeroes both residual-branch output projections.
    pub fn zero_branches<T: Real>(&self, store: &mut ParamStore<T>) {
        self.out.zero(store);
        self.fc2.zero(store);
    }
}

#[derive(Debug)]
pub struct BlockOutput {
    pub out: Var,
    /// Post-softmax attention, one `[n × n]` map per head.
    pub heads: Vec<Var>,
}

fn width_check<T: Real>(g: &Graph<T>, x: Var, d: usize, op: &'static str) -> Result<(usize, usize)> {
    let (n, w) = g.value(x).dims2(op)?;
    if w != d {
        return Err(Error::Tensor(mubert_tensor::TensorError::Shape { op, lhs: vec![n, w], rhs: vec![n, d] }));
    }
    Ok((n, w))
}

/// Scaled (or plain) dot-product attention of query rows against key rows.
/// Returns `(softmax map, map · values)`.
pub fn attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, scaled: bool) -> Result<(Var, Var)> {
    let mut logits = g.matmul_nt(q, k)?;
    if scaled {
        let dh = g.shape(q)[1] as f64;
        logits = g.scale(logits, T::lit(1.0 / dh.sqrt()))?;
    }
    let map = g.softmax_rows(logits)?;
    let mixed = g.matmul(map, v)?;
    Ok((map, mixed))
}

pub fn block_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    block: &BlockParams,
    x: Var,
    cfg: &AttentionConfig,
) -> Result<BlockOutput> {
    let d = block.width();
    width_check(g, x, d, "block_forward")?;
    if cfg.n_heads == 0 || !d.is_multiple_of(cfg.n_heads) {
        return Err(Error::config(format!("{} heads do not divide width {d}", cfg.n_heads)));
    }
    let dh = d / cfg.n_heads;
    let h = block.ln1.forward(g, p, x, cfg.ln_eps)?;
    let q = block.query.forward(g, p, h)?;
    let k = block.key.forward(g, p, h)?;
    let v = block.value.forward(g, p, h)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut mixed = Vec::with_capacity(cfg.n_heads);
    for i in 0..cfg.n_heads {
        let (lo, hi) = (i * dh, (i + 1) * dh);
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
        };
        let (map, out) = attention(g, qh, kh, vh, cfg.scaled)?;
        heads.push(map);
        mixed.push(out);
    }
    let joined = if mixed.len() == 1 { mixed[0] } else { g.concat_cols(&mixed)? };
    let attn_out = block.out.forward(g, p, joined)?;
    let x1 = g.add(x, attn_out)?;

    let h2 = block.ln2.forward(g, p, x1, cfg.ln_eps)?;
    let f = block.fc1.forward(g, p, h2)?;
    let f = g.gelu(f)?;
    let f = block.fc2.forward(g, p, f)?;
    let out = g.add(x1, f)?;
    Ok(BlockOutput { out, heads })
}

/// Average of per-head attention maps.
pub fn mean_attention<T: Real>(g: &mut Graph<T>, heads: &[Var]) -> Result<Var> {
    let mut acc = heads[0];
    for &h in &heads[1..] {
        acc = g.add(acc, h)?;
    }
    if heads.len() == 1 {
        return Ok(acc);
    }
    Ok(g.scale(acc, T::lit(1.0 / heads.len() as f64))?)
}

#[derive(Debug)]
pub struct EncoderOutput {
    pub latent: Var,
    /// Head-averaged attention of the final block.
    pub last_attention: Var,
}

pub fn encoder_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    blocks: &[BlockParams],
    z: Var,
    cfg: &AttentionConfig,
) -> Result<EncoderOutput> {
    if blocks.is_empty() {
        return Err(Error::config("encoder needs at least one block"));
    }
    let mut x = z;
    let mut heads = Vec::new();
    for b in blocks {
        let o = block_forward(g, p, b, x, cfg)?;
        x = o.out;
        heads = o.heads;
    }
    let last_attention = mean_attention(g, &heads)?;
    Ok(EncoderOutput { latent: x, last_attention })
}

/// Runs the decoder stack; a leading contextual-token row is dropped from
/// the result so exactly `N_p` rows remain.
pub fn decoder_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    blocks: &[BlockParams],
    x: Var,
    has_contextual_token: bool,
    cfg: &AttentionConfig,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::config("decoder needs at least one block"));
    }
    let mut x = x;
    for b in blocks {
        x = block_forward(g, p, b, x, cfg)?.out;
    }
    if has_contextual_token {
        let n = g.shape(x)[0];
        x = g.slice_rows(x, 1, n)?;
    }
    Ok(x)
}

/// Per-row linear map `d → ps²C`; the result is the reconstruction in
/// patch layout, convertible to an image with
/// [`PatchSequence::with_rows`](crate::patch::PatchSequence::with_rows) and
/// [`unpatchify`](crate::patch::unpatchify).
pub fn project_output<T: Real>(g: &mut Graph<T>, p: &Bound, head: &Linear, q: Var, n_patches: usize) -> Result<Var> {
    let rows = g.shape(q)[0];
    if rows != n_patches {
        return Err(Error::usage(format!(
            "output projection expects {n_patches} patch rows, got {rows} (contextual token still present?)"
        )));
    }
    head.forward(g, p, q)
}
