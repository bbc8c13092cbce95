//! Structured embedding refinement fusion: pools the quantized multi-scale
//! maps onto the coarse grid, blends them with scalar weights, scores the
//! fused tokens against the global embedding via scaled-dot attention, and
//! projects the attended vector through a small MLP to produce the
//! supervision target.

use crate::error::{Error, Result};
use crate::nn::{dot, l2_norm, linear, linear_backward, relu, relu_backward, softmax};
use crate::rng::{stream, Rng};
use crate::vq::Tokens;

/// How the refinement operator treats the fused tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineMode {
    /// Fused tokens form the attention token set; the global embedding
    /// scores them and the output is their attention-weighted mean.
    TokenValue,
    /// Single-query/single-key form. The softmax acts on a scalar, so the
    /// output collapses to the global embedding itself. Kept as an ablation.
    PaperLiteral,
}

impl RefineMode {
    pub fn parse(s: &str) -> Result<RefineMode> {
        match s {
            "token_value" => Ok(RefineMode::TokenValue),
            "paper_literal" => Ok(RefineMode::PaperLiteral),
            other => Err(Error::Config(format!("unknown serf mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RefineMode::TokenValue => "token_value",
            RefineMode::PaperLiteral => "paper_literal",
        }
    }
}

/// Which parameters receive alignment gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SerfGradMode {
    /// Alignment loss trains the refinement head (and fusion weights when
    /// trainable); scale projections train through the commitment loss.
    Align,
    /// Refinement head frozen; scale projections train through the
    /// commitment loss only.
    VqOnly,
    /// Refinement head and fusion weights frozen.
    Frozen,
}

impl SerfGradMode {
    pub fn parse(s: &str) -> Result<SerfGradMode> {
        match s {
            "align" => Ok(SerfGradMode::Align),
            "vq_only" => Ok(SerfGradMode::VqOnly),
            "frozen" => Ok(SerfGradMode::Frozen),
            other => Err(Error::Config(format!("unknown serf grad mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SerfGradMode::Align => "align",
            SerfGradMode::VqOnly => "vq_only",
            SerfGradMode::Frozen => "frozen",
        }
    }

    pub fn head_trains(&self) -> bool {
        matches!(self, SerfGradMode::Align)
    }
}

/// Two-layer refinement head parameters mapping `in_dim` to `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SerfMlp {
    pub in_dim: usize,
    pub hidden: usize,
    pub d: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl SerfMlp {
    pub fn init(in_dim: usize, hidden: usize, d: usize, seed: u64) -> SerfMlp {
        let mut rng = Rng::derived(seed, &[stream::SERF]);
        let bound1 = 1.0 / (in_dim as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        SerfMlp {
            in_dim,
            hidden,
            d,
            w1: (0..hidden * in_dim).map(|_| rng.range_f64(-bound1, bound1)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..d * hidden).map(|_| rng.range_f64(-bound2, bound2)).collect(),
            b2: vec![0.0; d],
        }
    }
}

/// Fusion weights and the refinement head.
#[derive(Clone, Debug, PartialEq)]
pub struct SerfParams {
    /// (alpha_c, alpha_m, alpha_f), non-negative scalar fusion weights.
    pub alpha: [f64; 3],
    pub mode: RefineMode,
    pub mlp: SerfMlp,
}

impl SerfParams {
    pub fn init(d: usize, hidden: usize, mode: RefineMode, seed: u64) -> SerfParams {
        SerfParams {
            alpha: [1.0 / 3.0; 3],
            mode,
            mlp: SerfMlp::init(d, hidden, d, seed),
        }
    }
}

/// Fused token set on the coarse grid plus its pooled anchor.
#[derive(Clone, Debug)]
pub struct FusedTokens {
    pub tokens: Tokens,
    /// Mean of the fused tokens.
    pub q_phi: Vec<f64>,
}

/// Average-pool a token grid down to `target` cells per side. Token rows are
/// row-major over the source grid, which must be a square integer multiple
/// of the target grid.
pub fn pool_tokens_to(tokens: &Tokens, src_side: usize, target: usize) -> Result<Tokens> {
    if src_side * src_side != tokens.p {
        return Err(Error::GridIncompatible(format!(
            "token count {} is not a {src_side}x{src_side} grid",
            tokens.p
        )));
    }
    if src_side % target != 0 {
        return Err(Error::GridIncompatible(format!(
            "grid {src_side} not an integer multiple of {target}"
        )));
    }
    let factor = src_side / target;
    if factor == 1 {
        return Ok(tokens.clone());
    }
    let mut out = Tokens::zeros(target * target, tokens.d);
    let inv = 1.0 / (factor * factor) as f64;
    for oy in 0..target {
        for ox in 0..target {
            let dest = oy * target + ox;
            for dy in 0..factor {
                for dx in 0..factor {
                    let src = (oy * factor + dy) * src_side + (ox * factor + dx);
                    let row = tokens.row(src);
                    let acc = out.row_mut(dest);
                    for (a, b) in acc.iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
            for v in out.row_mut(dest) {
                *v *= inv;
            }
        }
    }
    Ok(out)
}

/// Inputs to [`fuse`]: quantized token grids per scale with their grid sides.
/// Scales excluded by an ablation are passed as `None`.
pub struct ScaleTokens<'a> {
    pub coarse: Option<(&'a Tokens, usize)>,
    pub medium: Option<(&'a Tokens, usize)>,
    pub fine: Option<(&'a Tokens, usize)>,
}

/// Weighted fusion of the quantized maps onto the coarse grid:
/// `tokens[p] = a_c z_c[p] + a_m pool(z_m)[p] + a_f pool(z_f)[p]`.
pub fn fuse(scales: &ScaleTokens, alpha: &[f64; 3], coarse_side: usize, d: usize) -> Result<FusedTokens> {
    let t = coarse_side * coarse_side;
    let mut fused = Tokens::zeros(t, d);
    let mut any = false;
    for (slot, weight) in [
        (&scales.coarse, alpha[0]),
        (&scales.medium, alpha[1]),
        (&scales.fine, alpha[2]),
    ] {
        let Some((tokens, side)) = slot else { continue };
        any = true;
        let pooled = pool_tokens_to(tokens, *side, coarse_side)?;
        for (a, b) in fused.data.iter_mut().zip(&pooled.data) {
            *a += weight * b;
        }
    }
    if !any {
        return Err(Error::Precondition("fusion requires at least one scale".into()));
    }
    let mut q_phi = vec![0.0; d];
    for p in 0..t {
        for (a, b) in q_phi.iter_mut().zip(fused.row(p)) {
            *a += b;
        }
    }
    for v in &mut q_phi {
        *v /= t as f64;
    }
    Ok(FusedTokens { tokens: fused, q_phi })
}

/// Cached intermediates of [`refine`] for the backward pass.
#[derive(Clone, Debug)]
pub struct RefineCache {
    pub weights: Vec<f64>,
    pub k_phi: Vec<f64>,
}

/// Refine the fused tokens against the global embedding.
pub fn refine(fused: &FusedTokens, h_phi: &[f64], mode: RefineMode) -> Result<RefineCache> {
    let d = fused.tokens.d;
    if h_phi.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "h_phi dim {} vs token dim {d}",
            h_phi.len()
        )));
    }
    match mode {
        RefineMode::PaperLiteral => Ok(RefineCache { weights: vec![1.0], k_phi: h_phi.to_vec() }),
        RefineMode::TokenValue => {
            let scale = 1.0 / (d as f64).sqrt();
            let scores: Vec<f64> =
                (0..fused.tokens.p).map(|p| dot(fused.tokens.row(p), h_phi) * scale).collect();
            let weights = softmax(&scores);
            let mut k_phi = vec![0.0; d];
            for (p, w) in weights.iter().enumerate() {
                for (a, b) in k_phi.iter_mut().zip(fused.tokens.row(p)) {
                    *a += w * b;
                }
            }
            Ok(RefineCache { weights, k_phi })
        }
    }
}

/// Backward of [`refine`] in token-value mode: gradients w.r.t. the fused
/// tokens and the global embedding.
pub fn refine_backward(
    fused: &FusedTokens,
    h_phi: &[f64],
    cache: &RefineCache,
    d_k: &[f64],
) -> (Tokens, Vec<f64>) {
    let d = fused.tokens.d;
    let p_count = fused.tokens.p;
    let scale = 1.0 / (d as f64).sqrt();
    let mut d_tokens = Tokens::zeros(p_count, d);
    let mut d_h = vec![0.0; d];
    // c_p = <d_k, t_p>; ds_p = w_p (c_p - sum_q w_q c_q)
    let c: Vec<f64> = (0..p_count).map(|p| dot(d_k, fused.tokens.row(p))).collect();
    let mean_c: f64 = cache.weights.iter().zip(&c).map(|(w, cv)| w * cv).sum();
    for p in 0..p_count {
        let ds = cache.weights[p] * (c[p] - mean_c);
        let row = fused.tokens.row(p);
        let out = d_tokens.row_mut(p);
        for k in 0..d {
            out[k] = cache.weights[p] * d_k[k] + ds * scale * h_phi[k];
            d_h[k] += ds * scale * row[k];
        }
    }
    (d_tokens, d_h)
}

/// Cached intermediates of the refinement head forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    pub input: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden_act: Vec<f64>,
    pub q_t: Vec<f64>,
}

/// Supervision target `q_t = MLP(k_phi)`. Errors if the output collapses to
/// (numerical) zero, which would make the cosine loss undefined.
pub fn target(k_phi: &[f64], mlp: &SerfMlp) -> Result<MlpCache> {
    let hidden_pre = linear(k_phi, &mlp.w1, &mlp.b1, mlp.hidden);
    let mut hidden_act = hidden_pre.clone();
    relu(&mut hidden_act);
    let q_t = linear(&hidden_act, &mlp.w2, &mlp.b2, mlp.d);
    if l2_norm(&q_t) < 1e-12 {
        return Err(Error::DegenerateTarget { norm: l2_norm(&q_t) });
    }
    Ok(MlpCache { input: k_phi.to_vec(), hidden_pre, hidden_act, q_t })
}

/// Gradients of the refinement head. Returns d(input) and accumulates
/// parameter gradients into the given buffers.
pub fn target_backward(
    mlp: &SerfMlp,
    cache: &MlpCache,
    d_q: &[f64],
    d_w1: &mut [f64],
    d_b1: &mut [f64],
    d_w2: &mut [f64],
    d_b2: &mut [f64],
) -> Vec<f64> {
    let (g_w2, g_b2, mut d_hidden) = linear_backward(&cache.hidden_act, &mlp.w2, mlp.d, d_q);
    relu_backward(&cache.hidden_pre, &mut d_hidden);
    let (g_w1, g_b1, d_input) = linear_backward(&cache.input, &mlp.w1, mlp.hidden, &d_hidden);
    for (a, b) in d_w2.iter_mut().zip(&g_w2) {
        *a += b;
    }
    for (a, b) in d_b2.iter_mut().zip(&g_b2) {
        *a += b;
    }
    for (a, b) in d_w1.iter_mut().zip(&g_w1) {
        *a += b;
    }
    for (a, b) in d_b1.iter_mut().zip(&g_b1) {
        *a += b;
    }
    d_input
}
