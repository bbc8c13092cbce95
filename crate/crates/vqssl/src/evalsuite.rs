//! Downstream evaluation: frozen-encoder linear probing, joint fine-tuning,
//! AUC computation, label-fraction sweeps, a patch-position separability
//! probe, and codebook diagnostics.

use std::collections::BTreeMap;

use crate::config::ProbeConfig;
use crate::datagen::Corpus;
use crate::encoder::{backward_cached, forward_cached, EncoderConfig, ParamStore, Upstream};
use crate::error::{Error, Result};
use crate::nn::{linear, Map3};
use crate::rng::{fnv1a64, stream, Rng};
use crate::trainer::TrainState;
use crate::vq::{assign, perplexity_from_counts, project_tokens};

// ---------------------------------------------------------------------------
// AUC
// ---------------------------------------------------------------------------

/// Area under the ROC curve via the rank statistic:
/// `P(score+ > score-) + 0.5 P(tie)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass { context: "auc".into() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks over tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean AUC over the four quadrant labels.
pub fn multi_label_auc(scores: &[[f64; 4]], labels: &[[u8; 4]]) -> Result<f64> {
    let mut total = 0.0;
    for q in 0..4 {
        let s: Vec<f64> = scores.iter().map(|r| r[q]).collect();
        let l: Vec<u8> = labels.iter().map(|r| r[q]).collect();
        total += auc(&s, &l)?;
    }
    Ok(total / 4.0)
}

// ---------------------------------------------------------------------------
// Splits and label subsets
// ---------------------------------------------------------------------------

/// Fixed 80/20 split by index hash, independent of every seed.
pub fn heldout_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for idx in 0..n {
        let h = fnv1a64(format!("split:{idx}").as_bytes());
        if h % 5 == 0 {
            held.push(idx);
        } else {
            train.push(idx);
        }
    }
    (train, held)
}

/// Deterministic nested label subset: the first `ceil(fraction * n)` entries
/// of a seeded permutation, so smaller fractions are prefixes of larger ones.
pub fn label_subset(train: &[usize], fraction: f64, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = train.to_vec();
    Rng::derived(seed, &[stream::PROBE]).shuffle(&mut perm);
    let take = ((fraction * train.len() as f64).ceil() as usize).clamp(1, train.len());
    perm.truncate(take);
    perm
}

fn has_both_classes(labels: &[[u8; 4]], subset: &[usize]) -> bool {
    for q in 0..4 {
        let mut pos = false;
        let mut neg = false;
        for &i in subset {
            if labels[i][q] != 0 {
                pos = true;
            } else {
                neg = true;
            }
        }
        if !(pos && neg) {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Embedding extraction
// ---------------------------------------------------------------------------

fn normalize_image(image: &Map3, mean: f64, std: f64) -> Map3 {
    let data = image.data.iter().map(|&v| (v - mean) / std).collect();
    Map3::from_vec(image.c, image.h, image.w, data)
}

/// Pooled embeddings of the (frozen) encoder over a set of images.
pub fn extract_embeddings(
    params: &ParamStore,
    enc: &EncoderConfig,
    images: &[Map3],
    normalize: (f64, f64),
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let threads = threads.max(1).min(images.len().max(1));
    let mut out: Vec<Option<Result<Vec<f64>>>> = Vec::new();
    out.resize_with(images.len(), || None);
    let work = |slot: &mut Option<Result<Vec<f64>>>, image: &Map3| {
        let x = normalize_image(image, normalize.0, normalize.1);
        *slot = Some(
            crate::encoder::forward(params, enc, &x).map(|(features, _)| features.pooled),
        );
    };
    if threads == 1 {
        for (slot, image) in out.iter_mut().zip(images) {
            work(slot, image);
        }
    } else {
        let chunk = images.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (slots, imgs) in out.chunks_mut(chunk).zip(images.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, image) in slots.iter_mut().zip(imgs) {
                        work(slot, image);
                    }
                });
            }
        });
    }
    out.into_iter().map(|s| s.expect("slot unfilled")).collect()
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-dimension standardization statistics fitted on the labeled subset.
fn fit_standardizer(embeddings: &[Vec<f64>], subset: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let dim = embeddings[0].len();
    let n = subset.len() as f64;
    let mut mean = vec![0.0; dim];
    for &i in subset {
        for (m, v) in mean.iter_mut().zip(&embeddings[i]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0; dim];
    for &i in subset {
        for (s, (v, m)) in std.iter_mut().zip(embeddings[i].iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
        if *s < 1e-8 {
            *s = 1.0;
        }
    }
    (mean, std)
}

fn standardize(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect()
}

/// Train a 4-way sigmoid linear head by full-batch gradient descent until
/// the gradient norm drops below 1e-5 or the epoch cap, then score the
/// held-out split. Returns the mean AUC over labels.
pub fn probe_on_embeddings(
    embeddings: &[Vec<f64>],
    labels: &[[u8; 4]],
    subset: &[usize],
    heldout: &[usize],
    epochs: usize,
    lr: f64,
) -> Result<f64> {
    let dim = embeddings[0].len();
    let (mean, std) = fit_standardizer(embeddings, subset);
    let xs: Vec<Vec<f64>> =
        subset.iter().map(|&i| standardize(&embeddings[i], &mean, &std)).collect();
    let ys: Vec<[u8; 4]> = subset.iter().map(|&i| labels[i]).collect();

    let mut w = vec![0.0; 4 * dim];
    let mut b = vec![0.0; 4];
    let scale = 1.0 / (xs.len() as f64 * 4.0);
    for _ in 0..epochs {
        let mut gw = vec![0.0; 4 * dim];
        let mut gb = vec![0.0; 4];
        for (x, y) in xs.iter().zip(&ys) {
            let z = linear(x, &w, &b, 4);
            for q in 0..4 {
                let err = (sigmoid(z[q]) - y[q] as f64) * scale;
                gb[q] += err;
                for (gwi, xi) in gw[q * dim..(q + 1) * dim].iter_mut().zip(x) {
                    *gwi += err * xi;
                }
            }
        }
        let gnorm = (gw.iter().map(|v| v * v).sum::<f64>() + gb.iter().map(|v| v * v).sum::<f64>()).sqrt();
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * gi;
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= lr * gi;
        }
        if gnorm < 1e-5 {
            break;
        }
    }

    let mut scores = Vec::with_capacity(heldout.len());
    let mut held_labels = Vec::with_capacity(heldout.len());
    for &i in heldout {
        let x = standardize(&embeddings[i], &mean, &std);
        let z = linear(&x, &w, &b, 4);
        scores.push([z[0], z[1], z[2], z[3]]);
        held_labels.push(labels[i]);
    }
    multi_label_auc(&scores, &held_labels)
}

/// Result of one probing sweep.
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub fraction: f64,
    pub per_seed: Vec<f64>,
}

impl ProbeOutcome {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len() as f64
    }
}

/// Pick a labeled subset, retrying with shifted seeds while some quadrant
/// label is single-class.
fn subset_with_both_classes(
    train: &[usize],
    labels: &[[u8; 4]],
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    for attempt in 0..64 {
        let subset = label_subset(train, fraction, seed.wrapping_add(attempt * 1_000_003));
        if has_both_classes(labels, &subset) {
            return Ok(subset);
        }
    }
    Err(Error::SingleClass { context: format!("label subset at fraction {fraction}") })
}

/// Linear probe with every training label available (fraction 1.0).
pub fn subsetless_probe_auc(
    state: &TrainState,
    corpus: &Corpus,
    train: &[usize],
    heldout: &[usize],
) -> Result<f64> {
    let norm = (state.config.augment.normalize_mean, state.config.augment.normalize_std);
    let embeddings = extract_embeddings(
        &state.theta,
        &state.config.encoder,
        &corpus.images,
        norm,
        state.config.threads,
    )?;
    probe_on_embeddings(
        &embeddings,
        &corpus.labels,
        train,
        heldout,
        state.config.probe.epochs,
        state.config.probe.lr,
    )
}

/// Frozen-encoder linear probing over every (fraction, seed) pair.
pub fn linear_probe(state: &TrainState, corpus: &Corpus, cfg: &ProbeConfig) -> Result<Vec<ProbeOutcome>> {
    let norm = (state.config.augment.normalize_mean, state.config.augment.normalize_std);
    let embeddings = extract_embeddings(
        &state.theta,
        &state.config.encoder,
        &corpus.images,
        norm,
        state.config.threads,
    )?;
    let (train, held) = heldout_split(corpus.images.len());
    let mut outcomes = Vec::new();
    for &fraction in &cfg.fractions {
        let mut per_seed = Vec::new();
        for s in 0..cfg.seeds {
            let subset = subset_with_both_classes(&train, &corpus.labels, fraction, s as u64)?;
            per_seed.push(probe_on_embeddings(
                &embeddings,
                &corpus.labels,
                &subset,
                &held,
                cfg.epochs,
                cfg.lr,
            )?);
        }
        outcomes.push(ProbeOutcome { fraction, per_seed });
    }
    Ok(outcomes)
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

/// Head learning rate used during joint fine-tuning; the encoder moves at
/// the (much smaller) configured rate while the zero-initialized head trains
/// at linear-probe speed on standardized features.
const FT_HEAD_LR: f64 = 0.5;

/// Jointly train the encoder and a linear head on the labeled subset,
/// encoder at the small configured rate, then score the held-out split.
/// Head inputs pass through a standardizer frozen at the initial subset
/// statistics so its conditioning matches the linear probe.
pub fn finetune_on_subset(
    theta: &ParamStore,
    enc: &EncoderConfig,
    corpus: &Corpus,
    subset: &[usize],
    heldout: &[usize],
    normalize: (f64, f64),
    epochs: usize,
    lr: f64,
    threads: usize,
) -> Result<f64> {
    let dim = enc.stage_channels.2;
    let mut params = theta.clone();
    let mut w = vec![0.0; 4 * dim];
    let mut b = vec![0.0; 4];
    let inputs: Vec<Map3> = subset
        .iter()
        .map(|&i| normalize_image(&corpus.images[i], normalize.0, normalize.1))
        .collect();
    let all_idx: Vec<usize> = (0..subset.len()).collect();
    let initial: Result<Vec<Vec<f64>>> = inputs
        .iter()
        .map(|x| forward_cached(&params, enc, x).map(|(f, _, _)| f.pooled))
        .collect();
    let (feat_mean, feat_std) = fit_standardizer(&initial?, &all_idx);
    let scale = 1.0 / (subset.len() as f64 * 4.0);
    let head_lr = if lr == 0.0 { 0.0 } else { FT_HEAD_LR };

    for _ in 0..epochs {
        if lr == 0.0 {
            break;
        }
        let mut g_params = params.zeros_like();
        let mut gw = vec![0.0; 4 * dim];
        let mut gb = vec![0.0; 4];
        for (x, &idx) in inputs.iter().zip(subset) {
            let (features, _, cache) = forward_cached(&params, enc, x)?;
            let xh = standardize(&features.pooled, &feat_mean, &feat_std);
            let z = linear(&xh, &w, &b, 4);
            let mut d_pooled = vec![0.0; dim];
            for q in 0..4 {
                let err = (sigmoid(z[q]) - corpus.labels[idx][q] as f64) * scale;
                gb[q] += err;
                for (k, (gwi, xi)) in gw[q * dim..(q + 1) * dim].iter_mut().zip(&xh).enumerate() {
                    *gwi += err * xi;
                    d_pooled[k] += err * w[q * dim + k] / feat_std[k];
                }
            }
            backward_cached(
                &params,
                enc,
                &cache,
                &Upstream { d_pooled: Some(d_pooled), ..Upstream::default() },
                &mut g_params,
            );
        }
        for (p, g) in params.params.iter_mut().zip(&g_params.params) {
            for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                *pv -= lr * gv;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= head_lr * gi;
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= head_lr * gi;
        }
        params.assert_finite("finetune parameters")?;
    }

    let embeddings = extract_embeddings(&params, enc, &corpus.images, normalize, threads)?;
    let mut scores = Vec::with_capacity(heldout.len());
    let mut held_labels = Vec::with_capacity(heldout.len());
    for &i in heldout {
        let xh = standardize(&embeddings[i], &feat_mean, &feat_std);
        let z = linear(&xh, &w, &b, 4);
        scores.push([z[0], z[1], z[2], z[3]]);
        held_labels.push(corpus.labels[i]);
    }
    multi_label_auc(&scores, &held_labels)
}

/// Semi-supervised fine-tuning over every (fraction, seed) pair.
pub fn finetune(state: &TrainState, corpus: &Corpus, cfg: &ProbeConfig) -> Result<Vec<ProbeOutcome>> {
    let norm = (state.config.augment.normalize_mean, state.config.augment.normalize_std);
    let (train, held) = heldout_split(corpus.images.len());
    let mut outcomes = Vec::new();
    for &fraction in &cfg.fractions {
        let mut per_seed = Vec::new();
        for s in 0..cfg.seeds {
            let subset = subset_with_both_classes(&train, &corpus.labels, fraction, s as u64)?;
            per_seed.push(finetune_on_subset(
                &state.theta,
                &state.config.encoder,
                corpus,
                &subset,
                &held,
                norm,
                cfg.ft_epochs,
                cfg.ft_lr,
                state.config.threads,
            )?);
        }
        outcomes.push(ProbeOutcome { fraction, per_seed });
    }
    Ok(outcomes)
}

// ---------------------------------------------------------------------------
// Patch-position probe
// ---------------------------------------------------------------------------

/// Pad with edge replication so the side becomes a multiple of 3, then split
/// into a 3x3 grid of patches.
pub fn grid_patches(image: &Map3) -> [Map3; 9] {
    let s = image.h;
    let padded_side = s.div_ceil(3) * 3;
    let patch = padded_side / 3;
    let get = |y: usize, x: usize| -> f64 {
        image.data[y.min(s - 1) * image.w + x.min(s - 1)]
    };
    std::array::from_fn(|pos| {
        let (gy, gx) = (pos / 3, pos % 3);
        let mut out = Map3::zeros(1, patch, patch);
        for y in 0..patch {
            for x in 0..patch {
                out.data[y * patch + x] = get(gy * patch + y, gx * patch + x);
            }
        }
        out
    })
}

/// Nearest-neighbor resize to the encoder input resolution.
pub fn resize_nearest(image: &Map3, side: usize) -> Map3 {
    let mut out = Map3::zeros(1, side, side);
    for y in 0..side {
        let sy = y * image.h / side;
        for x in 0..side {
            let sx = x * image.w / side;
            out.data[y * side + x] = image.data[sy * image.w + sx];
        }
    }
    out
}

/// Train a 9-way softmax linear classifier on patch-position labels over
/// frozen embeddings; returns held-out accuracy.
pub fn position_probe_on_embeddings(
    embeddings: &[Vec<f64>],
    positions: &[usize],
    train: &[usize],
    heldout: &[usize],
    epochs: usize,
    lr: f64,
) -> f64 {
    let dim = embeddings[0].len();
    let (mean, std) = fit_standardizer(embeddings, train);
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| standardize(&embeddings[i], &mean, &std)).collect();
    let mut w = vec![0.0; 9 * dim];
    let mut b = vec![0.0; 9];
    let scale = 1.0 / xs.len() as f64;
    for _ in 0..epochs {
        let mut gw = vec![0.0; 9 * dim];
        let mut gb = vec![0.0; 9];
        for (x, &i) in xs.iter().zip(train) {
            let z = linear(x, &w, &b, 9);
            let probs = crate::nn::softmax(&z);
            for k in 0..9 {
                let err = (probs[k] - if positions[i] == k { 1.0 } else { 0.0 }) * scale;
                gb[k] += err;
                for (gwi, xi) in gw[k * dim..(k + 1) * dim].iter_mut().zip(x) {
                    *gwi += err * xi;
                }
            }
        }
        let gnorm =
            (gw.iter().map(|v| v * v).sum::<f64>() + gb.iter().map(|v| v * v).sum::<f64>()).sqrt();
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * gi;
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= lr * gi;
        }
        if gnorm < 1e-5 {
            break;
        }
    }
    let mut correct = 0usize;
    for &i in heldout {
        let x = standardize(&embeddings[i], &mean, &std);
        let z = linear(&x, &w, &b, 9);
        let best = z
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, _)| k)
            .unwrap();
        if best == positions[i] {
            correct += 1;
        }
    }
    correct as f64 / heldout.len() as f64
}

/// Full patch-position separability probe on a frozen encoder.
pub fn position_probe(state: &TrainState, images: &[Map3], cfg: &ProbeConfig) -> Result<f64> {
    let enc = &state.config.encoder;
    let norm = (state.config.augment.normalize_mean, state.config.augment.normalize_std);
    let mut patches = Vec::with_capacity(images.len() * 9);
    let mut positions = Vec::with_capacity(images.len() * 9);
    for image in images {
        for (pos, patch) in grid_patches(image).into_iter().enumerate() {
            patches.push(resize_nearest(&patch, enc.input_size));
            positions.push(pos);
        }
    }
    let embeddings =
        extract_embeddings(&state.theta, enc, &patches, norm, state.config.threads)?;
    // split by source image so all nine patches land on the same side
    let (train_imgs, held_imgs) = heldout_split(images.len());
    let expand = |idxs: &[usize]| -> Vec<usize> {
        idxs.iter().flat_map(|&i| (0..9).map(move |p| i * 9 + p)).collect()
    };
    Ok(position_probe_on_embeddings(
        &embeddings,
        &positions,
        &expand(&train_imgs),
        &expand(&held_imgs),
        cfg.epochs,
        cfg.lr,
    ))
}

// ---------------------------------------------------------------------------
// Codebook diagnostics
// ---------------------------------------------------------------------------

/// Per-scale utilization diagnostics recomputed over a reference batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookReport {
    /// (perplexity, utilization fraction, assignment histogram) per scale,
    /// order coarse/medium/fine.
    pub perplexity: [f64; 3],
    pub utilization: [f64; 3],
    pub histogram: [Vec<usize>; 3],
}

impl CodebookReport {
    /// Metrics-style `key=value` serialization.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (j, tag) in ["c", "m", "f"].iter().enumerate() {
            s += &format!("codebook.{tag}.perplexity={}\n", self.perplexity[j]);
            s += &format!("codebook.{tag}.utilization={}\n", self.utilization[j]);
            let h: Vec<String> = self.histogram[j].iter().map(|c| c.to_string()).collect();
            s += &format!("codebook.{tag}.histogram={}\n", h.join(","));
        }
        s
    }

    pub fn parse(text: &str) -> Result<CodebookReport> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.to_string(), v.to_string());
            }
        }
        let mut report = CodebookReport {
            perplexity: [0.0; 3],
            utilization: [0.0; 3],
            histogram: [Vec::new(), Vec::new(), Vec::new()],
        };
        for (j, tag) in ["c", "m", "f"].iter().enumerate() {
            let get = |suffix: &str| -> Result<String> {
                map.get(&format!("codebook.{tag}.{suffix}"))
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("missing codebook.{tag}.{suffix}")))
            };
            report.perplexity[j] = get("perplexity")?
                .parse()
                .map_err(|_| Error::Config("bad perplexity".into()))?;
            report.utilization[j] = get("utilization")?
                .parse()
                .map_err(|_| Error::Config("bad utilization".into()))?;
            report.histogram[j] = get("histogram")?
                .split(',')
                .map(|c| c.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config("bad histogram".into()))?;
        }
        Ok(report)
    }
}

/// Recompute assignments of a reference batch against the checkpointed
/// codebooks and report utilization.
pub fn codebook_report(state: &TrainState, images: &[Map3]) -> Result<CodebookReport> {
    let enc = &state.config.encoder;
    let norm = (state.config.augment.normalize_mean, state.config.augment.normalize_std);
    let mut histogram: [Vec<usize>; 3] = [
        vec![0; state.codebooks[0].n],
        vec![0; state.codebooks[1].n],
        vec![0; state.codebooks[2].n],
    ];
    for image in images {
        let x = normalize_image(image, norm.0, norm.1);
        let (features, _) = crate::encoder::forward(&state.phi, enc, &x)?;
        let maps = [&features.z_c, &features.z_m, &features.z_f];
        for j in 0..3 {
            let tokens = project_tokens(maps[j], &state.aux.proj[j])?;
            for idx in assign(&tokens, &state.codebooks[j])? {
                histogram[j][idx] += 1;
            }
        }
    }
    let mut perplexity = [0.0; 3];
    let mut utilization = [0.0; 3];
    for j in 0..3 {
        let counts: Vec<f64> = histogram[j].iter().map(|&c| c as f64).collect();
        perplexity[j] = perplexity_from_counts(&counts);
        let used = histogram[j].iter().filter(|&&c| c > 0).count();
        utilization[j] = used as f64 / histogram[j].len() as f64;
    }
    Ok(CodebookReport { perplexity, utilization, histogram })
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

/// One downstream evaluation row: fine-tuning vs linear probing at one label
/// fraction, `delta = LP - FT`.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub fraction: f64,
    pub ft: f64,
    pub lp: f64,
}

impl EvalRow {
    pub fn delta(&self) -> f64 {
        self.lp - self.ft
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub codebooks: CodebookReport,
    pub position_accuracy: f64,
}

impl EvalReport {
    /// Metrics-style line format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in &self.rows {
            s += &format!(
                "eval.fraction={} eval.ft={} eval.lp={} eval.delta={}\n",
                row.fraction,
                row.ft,
                row.lp,
                row.delta()
            );
        }
        s += &format!("eval.position_accuracy={}\n", self.position_accuracy);
        s += &self.codebooks.to_text();
        s
    }

    /// Human-readable table: one row per fraction with FT, LP and the gap.
    pub fn to_table(&self) -> String {
        let mut s = String::from("fraction      FT      LP   LP-FT\n");
        for row in &self.rows {
            s += &format!(
                "{:>7.0}% {:>7.3} {:>7.3} {:>+7.3}\n",
                row.fraction * 100.0,
                row.ft,
                row.lp,
                row.delta()
            );
        }
        s += &format!("position-probe accuracy: {:.3}\n", self.position_accuracy);
        for (j, tag) in ["coarse", "medium", "fine"].iter().enumerate() {
            s += &format!(
                "codebook {tag}: perplexity {:.2}, utilization {:.2}\n",
                self.codebooks.perplexity[j], self.codebooks.utilization[j]
            );
        }
        s
    }
}

/// Run the full sweep: LP and FT per fraction, position probe and codebook
/// diagnostics.
pub fn eval_all(state: &TrainState, corpus: &Corpus, cfg: &ProbeConfig) -> Result<EvalReport> {
    let lp = linear_probe(state, corpus, cfg)?;
    let ft = finetune(state, corpus, cfg)?;
    let rows = lp
        .iter()
        .zip(&ft)
        .map(|(l, f)| EvalRow { fraction: l.fraction, ft: f.mean(), lp: l.mean() })
        .collect();
    let take = corpus.images.len().min(256);
    let codebooks = codebook_report(state, &corpus.images[..take])?;
    let position_accuracy = position_probe(state, &corpus.images[..take.min(128)], cfg)?;
    Ok(EvalReport { rows, codebooks, position_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn auc_perfect_inverted_and_tied() {
        let labels = vec![1, 1, 0, 0];
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_an_error() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::SingleClass { .. })
        ));
    }

    #[test]
    fn auc_matches_bruteforce_pair_count_exactly() {
        let mut rng = Rng::new(5);
        for case in 0..60 {
            let n = 2 + (rng.next_u64() % 199) as usize;
            let mut scores: Vec<f64> = (0..n).map(|_| (rng.next_u64() % 17) as f64 / 4.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() % 2) as u8).collect();
            if !labels.contains(&1) || !labels.contains(&0) {
                continue;
            }
            if case % 2 == 0 {
                // continuous scores too
                scores = (0..n).map(|_| rng.next_gaussian()).collect();
            }
            let fast = auc(&scores, &labels).unwrap();
            let mut num = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                if labels[i] == 0 {
                    continue;
                }
                for j in 0..n {
                    if labels[j] != 0 {
                        continue;
                    }
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
            assert_eq!(fast, num / pairs, "case {case}");
        }
    }

    #[test]
    fn heldout_split_is_disjoint_and_roughly_20_percent() {
        let (train, held) = heldout_split(1000);
        assert_eq!(train.len() + held.len(), 1000);
        assert!(held.len() > 120 && held.len() < 280, "{}", held.len());
        let (train2, _) = heldout_split(1000);
        assert_eq!(train, train2);
    }

    #[test]
    fn label_subsets_are_nested_and_deterministic() {
        let train: Vec<usize> = (0..500).collect();
        for seed in 0..5u64 {
            let s1 = label_subset(&train, 0.01, seed);
            let s5 = label_subset(&train, 0.05, seed);
            let s20 = label_subset(&train, 0.20, seed);
            assert!(s1.iter().all(|i| s5.contains(i)));
            assert!(s5.iter().all(|i| s20.contains(i)));
            assert_eq!(s1, label_subset(&train, 0.01, seed));
        }
    }

    #[test]
    fn probe_on_label_embeddings_is_perfectly_separable() {
        // embeddings are the labels themselves
        let mut rng = Rng::new(3);
        let n = 300;
        let labels: Vec<[u8; 4]> = (0..n)
            .map(|_| std::array::from_fn(|_| (rng.next_u64() % 2) as u8))
            .collect();
        let embeddings: Vec<Vec<f64>> =
            labels.iter().map(|l| l.iter().map(|&v| v as f64).collect()).collect();
        let (train, held) = heldout_split(n);
        let auc = probe_on_embeddings(&embeddings, &labels, &train, &held, 2000, 1.0).unwrap();
        assert!((auc - 1.0).abs() < 1e-9, "{auc}");
    }

    #[test]
    fn probe_on_noise_is_chance_level() {
        let mut rng = Rng::new(11);
        let n = 400;
        let labels: Vec<[u8; 4]> = (0..n)
            .map(|_| std::array::from_fn(|_| (rng.next_u64() % 2) as u8))
            .collect();
        let embeddings: Vec<Vec<f64>> =
            (0..n).map(|_| (0..16).map(|_| rng.next_gaussian()).collect()).collect();
        let (train, held) = heldout_split(n);
        let mut aucs = Vec::new();
        for _ in 0..3 {
            aucs.push(probe_on_embeddings(&embeddings, &labels, &train, &held, 300, 0.5).unwrap());
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!((0.40..=0.60).contains(&mean), "{mean}");
    }

    #[test]
    fn position_probe_sanity_injections() {
        // one-hot position embeddings are perfectly separable
        let n = 90;
        let positions: Vec<usize> = (0..n).map(|i| i % 9).collect();
        let one_hot: Vec<Vec<f64>> = positions
            .iter()
            .map(|&p| (0..9).map(|k| if k == p { 1.0 } else { 0.0 }).collect())
            .collect();
        let train: Vec<usize> = (0..72).collect();
        let held: Vec<usize> = (72..90).collect();
        let acc = position_probe_on_embeddings(&one_hot, &positions, &train, &held, 2000, 1.0);
        assert_eq!(acc, 1.0);

        // pure-noise embeddings sit near chance
        let mut rng = Rng::new(9);
        let noise: Vec<Vec<f64>> =
            (0..n).map(|_| (0..12).map(|_| rng.next_gaussian()).collect()).collect();
        let acc = position_probe_on_embeddings(&noise, &positions, &train, &held, 200, 0.5);
        assert!(acc <= 0.40, "noise accuracy {acc}");
    }

    #[test]
    fn grid_patches_cover_and_pad() {
        let image = Map3::from_vec(1, 32, 32, (0..1024).map(|v| v as f64 / 1024.0).collect());
        let patches = grid_patches(&image);
        assert_eq!(patches.len(), 9);
        for p in &patches {
            assert_eq!((p.h, p.w), (11, 11));
        }
        // top-left patch starts at the origin
        assert_eq!(patches[0].data[0], image.data[0]);
    }

    #[test]
    fn codebook_report_round_trips() {
        let report = CodebookReport {
            perplexity: [1.5, 2.25, 8.0],
            utilization: [0.5, 0.75, 1.0],
            histogram: [vec![3, 0, 1], vec![1, 1, 1], vec![0, 4, 0]],
        };
        let text = report.to_text();
        let parsed = CodebookReport::parse(&text).unwrap();
        assert_eq!(parsed, report);
    }
}
