//! Per-scale discrete bottleneck: 1x1 projection into codeword space,
//! nearest-codeword assignment, EMA codebook updates, commitment loss and
//! utilization diagnostics.

use crate::error::{Error, Result};
use crate::nn::Map3;
use crate::rng::{stream, Rng};

/// How codewords move toward their assigned tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmaMode {
    /// Each assigned codeword moves toward the mean of its assigned tokens;
    /// unassigned codewords stay put.
    Literal,
    /// Running count/sum accumulators with Laplace smoothing.
    CountWeighted,
}

impl EmaMode {
    pub fn parse(s: &str) -> Result<EmaMode> {
        match s {
            "literal" => Ok(EmaMode::Literal),
            "count_weighted" => Ok(EmaMode::CountWeighted),
            other => Err(Error::Config(format!("unknown vq mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EmaMode::Literal => "literal",
            EmaMode::CountWeighted => "count_weighted",
        }
    }
}

/// N x d codeword table with EMA accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub n: usize,
    pub d: usize,
    /// Flat N x d row-major codeword matrix.
    pub entries: Vec<f64>,
    pub decay: f64,
    pub epsilon: f64,
    pub mode: EmaMode,
    pub ema_count: Vec<f64>,
    pub ema_sum: Vec<f64>,
}

impl Codebook {
    /// Codewords drawn from a unit Gaussian scaled by 1/sqrt(d).
    pub fn init(
        n: usize,
        d: usize,
        decay: f64,
        epsilon: f64,
        mode: EmaMode,
        seed: u64,
        tag: u64,
    ) -> Result<Codebook> {
        if n < 2 {
            return Err(Error::Precondition("codebook needs at least 2 entries".into()));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Precondition("EMA decay must lie in [0, 1)".into()));
        }
        let mut rng = Rng::derived(seed, &[stream::CODEBOOK, tag, n as u64, d as u64]);
        let scale = 1.0 / (d as f64).sqrt();
        let entries: Vec<f64> = (0..n * d).map(|_| rng.next_gaussian() * scale).collect();
        let ema_sum = entries.clone();
        Ok(Codebook { n, d, entries, decay, epsilon, mode, ema_count: vec![1.0; n], ema_sum })
    }

    #[inline]
    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.d..(i + 1) * self.d]
    }
}

/// Per-scale 1x1 convolution mapping `in_c` channels to codeword space.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleProjection {
    pub in_c: usize,
    pub d: usize,
    /// Flat d x in_c row-major weight matrix.
    pub weights: Vec<f64>,
}

impl ScaleProjection {
    pub fn init(in_c: usize, d: usize, seed: u64, tag: u64) -> ScaleProjection {
        let mut rng = Rng::derived(seed, &[stream::CODEBOOK, 0x7072, tag]);
        let bound = 1.0 / (in_c as f64).sqrt();
        let weights = (0..d * in_c).map(|_| rng.range_f64(-bound, bound)).collect();
        ScaleProjection { in_c, d, weights }
    }
}

/// Token matrix: one row per spatial position, row-major over (y, x).
#[derive(Clone, Debug, PartialEq)]
pub struct Tokens {
    pub p: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Tokens {
    pub fn zeros(p: usize, d: usize) -> Tokens {
        Tokens { p, d, data: vec![0.0; p * d] }
    }

    #[inline]
    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.d..(p + 1) * self.d]
    }

    #[inline]
    pub fn row_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.d..(p + 1) * self.d]
    }
}

/// Apply the 1x1 projection at every spatial position of `z`, row-major.
pub fn project_tokens(z: &Map3, proj: &ScaleProjection) -> Result<Tokens> {
    if z.c != proj.in_c {
        return Err(Error::ShapeMismatch(format!(
            "projection expects {} channels, map has {}",
            proj.in_c, z.c
        )));
    }
    let p_count = z.h * z.w;
    // channels-last view of the map so every dot runs contiguously
    let mut feat = vec![0.0; p_count * proj.in_c];
    for c in 0..proj.in_c {
        let ch = z.channel(c);
        for p in 0..p_count {
            feat[p * proj.in_c + c] = ch[p];
        }
    }
    let mut tokens = Tokens::zeros(p_count, proj.d);
    for p in 0..p_count {
        let fv = &feat[p * proj.in_c..(p + 1) * proj.in_c];
        let out = &mut tokens.data[p * proj.d..(p + 1) * proj.d];
        for (o, out_v) in out.iter_mut().enumerate() {
            let wrow = &proj.weights[o * proj.in_c..(o + 1) * proj.in_c];
            let mut acc = 0.0;
            for (w, x) in wrow.iter().zip(fv) {
                acc += w * x;
            }
            *out_v = acc;
        }
    }
    Ok(tokens)
}

/// Accumulate d(loss)/d(weights) for [`project_tokens`] given upstream
/// gradients on the tokens.
pub fn project_tokens_backward(z: &Map3, proj: &ScaleProjection, d_tokens: &Tokens, d_weights: &mut [f64]) {
    let p_count = z.h * z.w;
    debug_assert_eq!(d_weights.len(), proj.d * proj.in_c);
    for p in 0..p_count {
        let g = d_tokens.row(p);
        for (o, &gv) in g.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            let drow = &mut d_weights[o * proj.in_c..(o + 1) * proj.in_c];
            for (c, dv) in drow.iter_mut().enumerate() {
                *dv += gv * z.data[c * p_count + p];
            }
        }
    }
}

/// d(loss)/d(input map) for [`project_tokens`]: needed when the supervision
/// branch shares weights with the trained encoder and the commitment loss
/// reaches the features themselves.
pub fn project_tokens_input_grad(proj: &ScaleProjection, d_tokens: &Tokens, h: usize, w: usize) -> Map3 {
    let p_count = h * w;
    debug_assert_eq!(d_tokens.p, p_count);
    let mut d_z = Map3::zeros(proj.in_c, h, w);
    for p in 0..p_count {
        let g = d_tokens.row(p);
        for (o, &gv) in g.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            let wrow = &proj.weights[o * proj.in_c..(o + 1) * proj.in_c];
            for (c, wv) in wrow.iter().enumerate() {
                d_z.data[c * p_count + p] += gv * wv;
            }
        }
    }
    d_z
}

/// Nearest codeword per token by squared L2 distance; ties break to the
/// smallest index.
pub fn assign(tokens: &Tokens, codebook: &Codebook) -> Result<Vec<usize>> {
    if tokens.d != codebook.d {
        return Err(Error::ShapeMismatch(format!(
            "token dim {} vs codeword dim {}",
            tokens.d, codebook.d
        )));
    }
    // ||t - e||^2 = ||t||^2 - 2<t,e> + ||e||^2; the token term is constant
    // per row, so the argmin needs only ||e||^2 - 2<t,e>
    let e_norms: Vec<f64> = (0..codebook.n)
        .map(|n| {
            let e = codebook.entry(n);
            e.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    let mut indices = Vec::with_capacity(tokens.p);
    for p in 0..tokens.p {
        let t = tokens.row(p);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for n in 0..codebook.n {
            let e = codebook.entry(n);
            let mut ip = 0.0;
            for (a, b) in t.iter().zip(e) {
                ip += a * b;
            }
            let dist = e_norms[n] - 2.0 * ip;
            if dist < best_d {
                best_d = dist;
                best = n;
            }
        }
        indices.push(best);
    }
    Ok(indices)
}

/// Result of quantizing one token set against one codebook.
#[derive(Clone, Debug)]
pub struct QuantizeResult {
    pub tokens: Tokens,
    pub indices: Vec<usize>,
    pub quantized: Tokens,
    pub commit_loss: f64,
    pub perplexity: f64,
}

/// Commitment weight from the training recipe.
pub const DEFAULT_BETA: f64 = 0.25;

/// Quantize tokens: copy assigned codewords, compute the commitment loss
/// `beta * mean_p ||t_p - sg[q_p]||^2` and the assignment perplexity.
pub fn quantize(tokens: &Tokens, codebook: &Codebook, beta: f64) -> Result<QuantizeResult> {
    let indices = assign(tokens, codebook)?;
    let mut quantized = Tokens::zeros(tokens.p, tokens.d);
    let mut loss = 0.0;
    for p in 0..tokens.p {
        let e = codebook.entry(indices[p]);
        quantized.row_mut(p).copy_from_slice(e);
        for (a, b) in tokens.row(p).iter().zip(e) {
            let diff = a - b;
            loss += diff * diff;
        }
    }
    let commit_loss = beta * loss / tokens.p as f64;
    let perplexity = perplexity(&indices, codebook.n);
    Ok(QuantizeResult { tokens: tokens.clone(), indices, quantized, commit_loss, perplexity })
}

/// d(commit_loss)/d(tokens): `2 beta (t_p - q_p) / P`. Codebook entries are
/// stop-gradiented and receive nothing.
pub fn commit_loss_grad(result: &QuantizeResult, beta: f64) -> Tokens {
    let mut grad = Tokens::zeros(result.tokens.p, result.tokens.d);
    let scale = 2.0 * beta / result.tokens.p as f64;
    for i in 0..grad.data.len() {
        grad.data[i] = scale * (result.tokens.data[i] - result.quantized.data[i]);
    }
    grad
}

/// EMA codebook update from one step's assignments.
pub fn ema_update(codebook: &mut Codebook, tokens: &Tokens, indices: &[usize]) {
    let mut counts = vec![0.0f64; codebook.n];
    let mut sums = vec![0.0f64; codebook.n * codebook.d];
    for (p, &i) in indices.iter().enumerate() {
        counts[i] += 1.0;
        let row = tokens.row(p);
        let acc = &mut sums[i * codebook.d..(i + 1) * codebook.d];
        for (a, b) in acc.iter_mut().zip(row) {
            *a += b;
        }
    }
    ema_update_from_stats(codebook, &counts, &sums);
}

/// Same as [`ema_update`] but from pre-reduced per-codeword (count, sum)
/// statistics, e.g. gathered across batch shards.
pub fn ema_update_from_stats(codebook: &mut Codebook, counts: &[f64], sums: &[f64]) {
    let m = codebook.decay;
    let d = codebook.d;
    match codebook.mode {
        EmaMode::Literal => {
            for i in 0..codebook.n {
                codebook.ema_count[i] = m * codebook.ema_count[i] + (1.0 - m) * counts[i];
                for k in 0..d {
                    codebook.ema_sum[i * d + k] =
                        m * codebook.ema_sum[i * d + k] + (1.0 - m) * sums[i * d + k];
                }
                if counts[i] > 0.0 {
                    for k in 0..d {
                        let mean = sums[i * d + k] / counts[i];
                        codebook.entries[i * d + k] =
                            m * codebook.entries[i * d + k] + (1.0 - m) * mean;
                    }
                }
            }
        }
        EmaMode::CountWeighted => {
            for i in 0..codebook.n {
                codebook.ema_count[i] = m * codebook.ema_count[i] + (1.0 - m) * counts[i];
                for k in 0..d {
                    codebook.ema_sum[i * d + k] =
                        m * codebook.ema_sum[i * d + k] + (1.0 - m) * sums[i * d + k];
                }
            }
            let total: f64 = codebook.ema_count.iter().sum();
            if total > 0.0 {
                let smooth = 1.0 + codebook.n as f64 * codebook.epsilon / total;
                for i in 0..codebook.n {
                    let denom = (codebook.ema_count[i] + codebook.epsilon) * smooth;
                    for k in 0..d {
                        codebook.entries[i * d + k] = codebook.ema_sum[i * d + k] / denom;
                    }
                }
            }
        }
    }
}

/// Exponential of the entropy of the empirical assignment distribution.
pub fn perplexity(indices: &[usize], n: usize) -> f64 {
    assert!(!indices.is_empty(), "perplexity of an empty assignment");
    let mut counts = vec![0.0f64; n];
    for &i in indices {
        counts[i] += 1.0;
    }
    perplexity_from_counts(&counts)
}

/// Perplexity from pre-reduced per-codeword counts.
pub fn perplexity_from_counts(counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut entropy = 0.0;
    for &c in counts {
        if c > 0.0 {
            let p = c / total;
            entropy -= p * p.ln();
        }
    }
    entropy.exp()
}

/// Re-seed codewords whose EMA count fell below 1 from randomly chosen
/// tokens. Disabled by default in training; exists for collapse experiments.
pub fn reinit_dead_codes(codebook: &mut Codebook, tokens: &Tokens, rng: &mut Rng) -> usize 	{
    let mut revived = 0;
    if tokens.p == 0 {
        return 0;
    }
    for i in 0..codebook.n {
        if codebook.ema_count[i] < 1.0 {
            let pick = rng.range_u64(0, tokens.p as u64 - 1) as usize;
            let row = tokens.row(pick).to_vec();
            codebook.entries[i * codebook.d..(i + 1) * codebook.d].copy_from_slice(&row);
            for (s, v) in codebook.ema_sum[i * codebook.d..(i + 1) * codebook.d]
                .iter_mut()
                .zip(&row)
            {
                *s = *v;
            }
            codebook.ema_count[i] = 1.0;
            revived += 1;
        }
    }
    revived
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn book_with(entries: Vec<Vec<f64>>, decay: f64, mode: EmaMode) -> Codebook {
        let n = entries.len();
        let d = entries[0].len();
        let flat: Vec<f64> = entries.into_iter().flatten().collect();
        Codebook {
            n,
            d,
            ema_sum: flat.clone(),
            entries: flat,
            decay,
            epsilon: 1e-5,
            mode,
            ema_count: vec![1.0; n],
        }
    }

    fn tokens_from(rows: Vec<Vec<f64>>) -> Tokens {
        let p = rows.len();
        let d = rows[0].len();
        Tokens { p, d, data: rows.into_iter().flatten().collect() }
    }

    #[test]
    fn assign_picks_visibly_nearer_entry() {
        let book = book_with(vec![vec![0.0, 0.0], vec![1.0, 1.0]], 0.99, EmaMode::Literal);
        let toks = tokens_from(vec![vec![0.1, 0.1]]);
        assert_eq!(assign(&toks, &book).unwrap(), vec![0]);
    }

    #[test]
    fn assign_exact_match_has_zero_distance() {
        let book = book_with(vec![vec![0.5, -1.0], vec![2.0, 3.0], vec![-1.0, 0.0]], 0.9, EmaMode::Literal);
        let toks = tokens_from(vec![vec![2.0, 3.0]]);
        assert_eq!(assign(&toks, &book).unwrap(), vec![1]);
    }

    #[test]
    fn assign_matches_bruteforce_oracle_including_ties() {
        let mut rng = Rng::new(21);
        for case in 0..200 {
            let n = 2 + (rng.next_u64() % 14) as usize;
            let d = 1 + (rng.next_u64() % 6) as usize;
            let p = 1 + (rng.next_u64() % 20) as usize;
            let mut entries: Vec<Vec<f64>> =
                (0..n).map(|_| (0..d).map(|_| rng.next_gaussian()).collect()).collect();
            if case % 3 == 0 && n >= 2 {
                // plant an exact duplicate so the tie-break path is exercised
                entries[n - 1] = entries[0].clone();
            }
            let book = book_with(entries.clone(), 0.99, EmaMode::Literal);
            let mut rows: Vec<Vec<f64>> =
                (0..p).map(|_| (0..d).map(|_| rng.next_gaussian()).collect()).collect();
            if case % 3 == 0 {
                rows[0] = entries[0].clone(); // tie between entry 0 and its duplicate
            }
            let toks = tokens_from(rows.clone());
            let got = assign(&toks, &book).unwrap();

            // oracle: exhaustive scan with explicit smallest-index tie-break
            for (p_i, row) in rows.iter().enumerate() {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (n_i, e) in entries.iter().enumerate() {
                    let dist: f64 = row.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best_d {
                        best_d = dist;
                        best = n_i;
                    }
                }
                assert_eq!(got[p_i], best, "case {case} token {p_i}");
            }
        }
    }

    #[test]
    fn quantize_exact_hits_give_zero_loss_and_unit_perplexity() {
        let book = book_with(vec![vec![1.0, 2.0], vec![-3.0, 0.5]], 0.99, EmaMode::Literal);
        let toks = tokens_from(vec![vec![1.0, 2.0], vec![1.0, 2.0]]);
        let q = quantize(&toks, &book, DEFAULT_BETA).unwrap();
        assert_eq!(q.commit_loss, 0.0);
        assert_eq!(q.perplexity, 1.0);
        assert_eq!(q.quantized.row(0), book.entry(0));
    }

    #[test]
    fn quantize_single_token_loss_is_beta_times_squared_distance() {
        let book = book_with(vec![vec![0.0, 0.0], vec![10.0, 10.0]], 0.99, EmaMode::Literal);
        let toks = tokens_from(vec![vec![0.3, -0.4]]);
        let q = quantize(&toks, &book, 0.25).unwrap();
        let expected = 0.25 * (0.3f64 * 0.3 + 0.4 * 0.4);
        assert!((q.commit_loss - expected).abs() < 1e-15);
    }

    #[test]
    fn commit_grad_matches_finite_difference() {
        let mut rng = Rng::new(33);
        let book = book_with(
            (0..6).map(|_| (0..4).map(|_| rng.next_gaussian()).collect()).collect(),
            0.99,
            EmaMode::Literal,
        );
        let toks = tokens_from((0..5).map(|_| (0..4).map(|_| rng.next_gaussian()).collect()).collect());
        let q = quantize(&toks, &book, 0.25).unwrap();
        let grad = commit_loss_grad(&q, 0.25);
        let h = 1e-5;
        for idx in 0..toks.data.len() {
            let mut plus = toks.clone();
            let mut minus = toks.clone();
            plus.data[idx] += h;
            minus.data[idx] -= h;
            let lp = quantize(&plus, &book, 0.25).unwrap().commit_loss;
            let lm = quantize(&minus, &book, 0.25).unwrap().commit_loss;
            let num = (lp - lm) / (2.0 * h);
            let denom = num.abs().max(grad.data[idx].abs()).max(1e-8);
            assert!((num - grad.data[idx]).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn ema_literal_moves_toward_assigned_mean() {
        let mut book = book_with(vec![vec![1.0], vec![5.0]], 0.99, EmaMode::Literal);
        let toks = tokens_from(vec![vec![2.0]]);
        let idx = assign(&toks, &book).unwrap();
        assert_eq!(idx, vec![0]);
        ema_update(&mut book, &toks, &idx);
        assert!((book.entries[0] - 1.01).abs() < 1e-12);
        assert_eq!(book.entries[1], 5.0); // unassigned: unchanged
    }

    #[test]
    fn ema_fixed_point_when_mean_equals_entry() {
        let mut book = book_with(vec![vec![2.5, -1.0], vec![9.0, 9.0]], 0.9, EmaMode::Literal);
        let toks = tokens_from(vec![vec![2.5, -1.0]]);
        let idx = assign(&toks, &book).unwrap();
        ema_update(&mut book, &toks, &idx);
        assert_eq!(&book.entries[0..2], &[2.5, -1.0]);
    }

    #[test]
    fn ema_contraction_identity_holds_exactly() {
        // delta = (1 - m)(mean - entry) in literal mode
        let mut rng = Rng::new(8);
        for _ in 0..50 {
            let m = 0.9;
            let e0: Vec<f64> = (0..3).map(|_| rng.next_gaussian()).collect();
            let mut book = book_with(vec![e0.clone(), vec![100.0, 100.0, 100.0]], m, EmaMode::Literal);
            let rows: Vec<Vec<f64>> =
                (0..4).map(|_| (0..3).map(|_| e0[0] + rng.next_gaussian() * 0.1).collect()).collect();
            let mut counts = vec![0.0; 2];
            let mut sums = vec![0.0; 6];
            for r in &rows {
                counts[0] += 1.0;
                for k in 0..3 {
                    sums[k] += r[k];
                }
            }
            ema_update_from_stats(&mut book, &counts, &sums);
            for k in 0..3 {
                let mean = sums[k] / counts[0];
                let delta = book.entries[k] - e0[k];
                let expected = (1.0 - m) * (mean - e0[k]);
                assert!((delta - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn count_weighted_matches_invariant() {
        let mut book = book_with(vec![vec![1.0], vec![-1.0]], 0.5, EmaMode::CountWeighted);
        let toks = tokens_from(vec![vec![0.9], vec![1.1], vec![-1.2]]);
        let idx = assign(&toks, &book).unwrap();
        ema_update(&mut book, &toks, &idx);
        let total: f64 = book.ema_count.iter().sum();
        let smooth = 1.0 + 2.0 * book.epsilon / total;
        for i in 0..2 {
            let expected = book.ema_sum[i] / ((book.ema_count[i] + book.epsilon) * smooth);
            assert!((book.entries[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn perplexity_known_values() {
        assert_eq!(perplexity(&[3, 3, 3, 3], 8), 1.0);
        let uniform = perplexity(&[0, 1, 2, 3], 4);
        assert!((uniform - 4.0).abs() < 1e-12);
        // counts (3, 1) over N=2: exp(-(0.75 ln 0.75 + 0.25 ln 0.25))
        let p = perplexity(&[0, 0, 0, 1], 2);
        let expected = (-(0.75f64.ln() * 0.75 + 0.25f64.ln() * 0.25)).exp();
        assert!((p - expected).abs() < 1e-12);
        assert!((p - 1.7548).abs() < 1e-4);
    }

    #[test]
    fn project_tokens_identity_and_shapes() {
        // identity projection when d == in_c
        let c = 3;
        let z = Map3::from_vec(c, 2, 2, (0..12).map(|v| v as f64).collect());
        let mut weights = vec![0.0; c * c];
        for i in 0..c {
            weights[i * c + i] = 1.0;
        }
        let proj = ScaleProjection { in_c: c, d: c, weights };
        let toks = project_tokens(&z, &proj).unwrap();
        assert_eq!(toks.p, 4);
        for p in 0..4 {
            for ch in 0..c {
                assert_eq!(toks.row(p)[ch], z.data[ch * 4 + p]);
            }
        }
        // zero weights give zero tokens
        let zero = ScaleProjection { in_c: c, d: 2, weights: vec![0.0; 2 * c] };
        let toks = project_tokens(&z, &zero).unwrap();
        assert!(toks.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn project_tokens_rejects_channel_mismatch() {
        let z = Map3::zeros(3, 2, 2);
        let proj = ScaleProjection { in_c: 4, d: 2, weights: vec![0.0; 8] };
        assert!(project_tokens(&z, &proj).is_err());
    }

    #[test]
    fn dead_code_reinit_revives_unused_entries() {
        let mut book = book_with(vec![vec![0.0], vec![50.0]], 0.99, EmaMode::Literal);
        book.ema_count = vec![5.0, 0.2];
        let toks = tokens_from(vec![vec![1.5], vec![2.5]]);
        let mut rng = Rng::new(0);
        let revived = reinit_dead_codes(&mut book, &toks, &mut rng);
        assert_eq!(revived, 1);
        assert!(book.entries[1] == 1.5 || book.entries[1] == 2.5);
        assert_eq!(book.ema_count[1], 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        /// Every quantized row is at least as close to its token as any other
        /// codeword, and perplexity stays within [1, N].
        #[test]
        fn assignment_optimality(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let n = 2 + (rng.next_u64() % 10) as usize;
            let d = 1 + (rng.next_u64() % 5) as usize;
            let p = 1 + (rng.next_u64() % 12) as usize;
            let entries: Vec<Vec<f64>> =
                (0..n).map(|_| (0..d).map(|_| rng.next_gaussian()).collect()).collect();
            let book = book_with(entries, 0.99, EmaMode::Literal);
            let toks = tokens_from((0..p).map(|_| (0..d).map(|_| rng.next_gaussian()).collect()).collect());
            let q = quantize(&toks, &book, DEFAULT_BETA).unwrap();
            prop_assert!(q.perplexity >= 1.0 - 1e-12 && q.perplexity <= book.n as f64 + 1e-12);
            prop_assert!(q.commit_loss >= 0.0);
            for p_i in 0..toks.p {
                let t = toks.row(p_i);
                let chosen: f64 = t.iter().zip(q.quantized.row(p_i)).map(|(a, b)| (a - b) * (a - b)).sum();
                for n_i in 0..book.n {
                    let other: f64 = t.iter().zip(book.entry(n_i)).map(|(a, b)| (a - b) * (a - b)).sum();
                    prop_assert!(chosen <= other + 1e-12);
                }
            }
        }
    }
}
