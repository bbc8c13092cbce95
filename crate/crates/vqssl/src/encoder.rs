//! Shared convolutional backbone with multi-scale taps, plus projection and
//! prediction heads.
//!
//! Three stages, each entered by a stride-2 conv: fine (highest resolution)
//! through coarse (deepest). Each stage is conv-norm-ReLU twice. The coarse
//! map is globally average-pooled into the embedding fed to the heads. The
//! gradient-trained and momentum-updated branches each own one [`ParamStore`]
//! with identical names and shapes.

use crate::error::{Error, Result};
use crate::nn::{
    affine, affine_backward, channel_norm, channel_norm_backward, conv2d, conv2d_backward,
    global_avg_pool, global_avg_pool_backward, linear, linear_backward, relu, relu_backward, Map3,
    NormCache,
};
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_size: usize,
    /// Channels per stage, fine to coarse.
    pub stage_channels: (usize, usize, usize),
    /// Codeword dimension shared with the quantizers; must equal `proj_out`.
    pub embed_dim: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    /// Tap multi-scale maps before the final ReLU of each stage instead of
    /// after it.
    pub tap_preactivation: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 32,
            stage_channels: (16, 32, 64),
            embed_dim: 64,
            proj_hidden: 128,
            proj_out: 64,
            tap_preactivation: false,
        }
    }
}

impl EncoderConfig {
    /// The documented full-scale shape analogue (not the desk-scale default).
    pub fn full_scale_reference() -> Self {
        EncoderConfig {
            input_size: 224,
            stage_channels: (128, 256, 512),
            embed_dim: 128,
            proj_hidden: 2048,
            proj_out: 128,
            tap_preactivation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size % 8 != 0 || self.input_size < 16 {
            return Err(Error::Precondition(
                "input_size must be a multiple of 8 and >= 16".into(),
            ));
        }
        if self.embed_dim != self.proj_out {
            return Err(Error::Precondition(format!(
                "embed_dim ({}) must equal proj_out ({}) so heads and codebooks share a space",
                self.embed_dim, self.proj_out
            )));
        }
        Ok(())
    }

    pub fn fine_size(&self) -> usize {
        self.input_size / 2
    }
    pub fn medium_size(&self) -> usize {
        self.input_size / 4
    }
    pub fn coarse_size(&self) -> usize {
        self.input_size / 8
    }
}

/// One named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Bias and normalization parameters are exempt from weight decay and
    /// trust-ratio scaling in the optimizer.
    pub decay_exempt: bool,
}

/// Ordered collection of named, shaped arrays. Order is fixed at
/// construction and defines deterministic traversal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let decay_exempt =
            name.ends_with(".b") || name.ends_with(".scale") || name.ends_with(".shift");
        self.params.push(Param { name: name.to_string(), shape, data, decay_exempt });
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.params[self.index_of(name)].data
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"))
    }

    /// Same names/shapes, all zeros. Used for gradients and velocities.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![0.0; p.data.len()],
                    decay_exempt: p.decay_exempt,
                })
                .collect(),
        }
    }

    pub fn congruent_with(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Congruence(format!(
                "array counts differ: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Congruence(format!(
                    "array mismatch: {} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Elementwise accumulate `other * scale` into self. Stores must be congruent.
    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) {
        debug_assert_eq!(self.params.len(), other.params.len());
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for p in &mut self.params {
            for v in &mut p.data {
                *v *= factor;
            }
        }
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        for p in &self.params {
            if p.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: format!("{context} ({})", p.name) });
            }
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.data.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Multi-scale maps tapped from the three stages plus the pooled embedding.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    pub z_f: Map3,
    pub z_m: Map3,
    pub z_c: Map3,
    pub pooled: Vec<f64>,
}

/// Projection (`g`) and prediction (`h`) head outputs.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

fn stage_names(stage: usize) -> [String; 8] {
    [
        format!("stage{stage}.conv1.w"),
        format!("stage{stage}.conv1.b"),
        format!("stage{stage}.norm1.scale"),
        format!("stage{stage}.norm1.shift"),
        format!("stage{stage}.conv2.w"),
        format!("stage{stage}.conv2.b"),
        format!("stage{stage}.norm2.scale"),
        format!("stage{stage}.norm2.shift"),
    ]
}

fn head_names(head: &str) -> [String; 6] {
    [
        format!("{head}.fc1.w"),
        format!("{head}.fc1.b"),
        format!("{head}.norm.scale"),
        format!("{head}.norm.shift"),
        format!("{head}.fc2.w"),
        format!("{head}.fc2.b"),
    ]
}

fn fan_in_uniform(rng: &mut Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.range_f64(-bound, bound)).collect()
}

/// Deterministic initialization: conv and linear weights fan-in uniform,
/// biases zero, normalization scale 1 / shift 0.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> ParamStore {
    let mut rng = Rng::derived(seed, &[stream::INIT]);
    let mut store = ParamStore::default();
    let chans = [cfg.stage_channels.0, cfg.stage_channels.1, cfg.stage_channels.2];
    let mut in_c = 1usize;
    for stage in 0..3 {
        let out_c = chans[stage];
        let names = stage_names(stage + 1);
        store.push(&names[0], vec![out_c, in_c, 3, 3], fan_in_uniform(&mut rng, out_c * in_c * 9, in_c * 9));
        store.push(&names[1], vec![out_c], vec![0.0; out_c]);
        store.push(&names[2], vec![out_c], vec![1.0; out_c]);
        store.push(&names[3], vec![out_c], vec![0.0; out_c]);
        store.push(&names[4], vec![out_c, out_c, 3, 3], fan_in_uniform(&mut rng, out_c * out_c * 9, out_c * 9));
        store.push(&names[5], vec![out_c], vec![0.0; out_c]);
        store.push(&names[6], vec![out_c], vec![1.0; out_c]);
        store.push(&names[7], vec![out_c], vec![0.0; out_c]);
        in_c = out_c;
    }
    for (head, in_dim) in [("proj", chans[2]), ("pred", cfg.proj_out)] {
        let names = head_names(head);
        store.push(&names[0], vec![cfg.proj_hidden, in_dim], fan_in_uniform(&mut rng, cfg.proj_hidden * in_dim, in_dim));
        store.push(&names[1], vec![cfg.proj_hidden], vec![0.0; cfg.proj_hidden]);
        store.push(&names[2], vec![cfg.proj_hidden], vec![1.0; cfg.proj_hidden]);
        store.push(&names[3], vec![cfg.proj_hidden], vec![0.0; cfg.proj_hidden]);
        store.push(&names[4], vec![cfg.proj_out, cfg.proj_hidden], fan_in_uniform(&mut rng, cfg.proj_out * cfg.proj_hidden, cfg.proj_hidden));
        store.push(&names[5], vec![cfg.proj_out], vec![0.0; cfg.proj_out]);
    }
    store
}

struct StageCache {
    input: Map3,
    norm1: NormCache,
    pre_relu1: Map3,
    mid: Map3,
    norm2: NormCache,
    pre_relu2: Map3,
    out: Map3,
}

struct HeadCache {
    input: Vec<f64>,
    hidden_lin: Vec<f64>,
    hidden_aff: Vec<f64>,
    hidden_act: Vec<f64>,
    out: Vec<f64>,
}

/// Everything needed to backpropagate one forward pass.
pub struct ForwardCache {
    stages: Vec<StageCache>,
    proj: HeadCache,
    pred: HeadCache,
}

fn run_stage(params: &ParamStore, stage: usize, input: Map3, out_c: usize) -> StageCache {
    let names = stage_names(stage + 1);
    let conv1 = conv2d(&input, params.get(&names[0]), params.get(&names[1]), out_c, 2);
    let (mut act1, norm1) = channel_norm(&conv1, params.get(&names[2]), params.get(&names[3]));
    let pre_relu1 = act1.clone();
    relu(&mut act1.data);
    let mid = act1;
    let conv2 = conv2d(&mid, params.get(&names[4]), params.get(&names[5]), out_c, 1);
    let (mut act2, norm2) = channel_norm(&conv2, params.get(&names[6]), params.get(&names[7]));
    let pre_relu2 = act2.clone();
    relu(&mut act2.data);
    StageCache { input, norm1, pre_relu1, mid, norm2, pre_relu2, out: act2 }
}

fn run_head(params: &ParamStore, head: &str, input: Vec<f64>, hidden: usize, out_dim: usize) -> HeadCache {
    let names = head_names(head);
    let hidden_lin = linear(&input, params.get(&names[0]), params.get(&names[1]), hidden);
    let hidden_aff = affine(&hidden_lin, params.get(&names[2]), params.get(&names[3]));
    let mut hidden_act = hidden_aff.clone();
    relu(&mut hidden_act);
    let out = linear(&hidden_act, params.get(&names[4]), params.get(&names[5]), out_dim);
    HeadCache { input, hidden_lin, hidden_aff, hidden_act, out }
}

/// Full forward pass returning features, embeddings and the backward cache.
pub fn forward_cached(
    params: &ParamStore,
    cfg: &EncoderConfig,
    x: &Map3,
) -> Result<(MultiScaleFeatures, Embeddings, ForwardCache)> {
    if x.c != 1 || x.h != cfg.input_size || x.w != cfg.input_size {
        return Err(Error::ShapeMismatch(format!(
            "expected 1x{0}x{0} input, got {1}x{2}x{3}",
            cfg.input_size, x.c, x.h, x.w
        )));
    }
    let chans = [cfg.stage_channels.0, cfg.stage_channels.1, cfg.stage_channels.2];
    let mut stages = Vec::with_capacity(3);
    let mut cur = x.clone();
    for stage in 0..3 {
        let cache = run_stage(params, stage, cur, chans[stage]);
        cur = cache.out.clone();
        stages.push(cache);
    }
    let tap = |cache: &StageCache| -> Map3 {
        if cfg.tap_preactivation {
            cache.pre_relu2.clone()
        } else {
            cache.out.clone()
        }
    };
    let features = MultiScaleFeatures {
        z_f: tap(&stages[0]),
        z_m: tap(&stages[1]),
        z_c: tap(&stages[2]),
        pooled: global_avg_pool(&stages[2].out),
    };
    let proj = run_head(params, "proj", features.pooled.clone(), cfg.proj_hidden, cfg.proj_out);
    let pred = run_head(params, "pred", proj.out.clone(), cfg.proj_hidden, cfg.proj_out);
    let embeddings = Embeddings { g: proj.out.clone(), h: pred.out.clone() };
    Ok((features, embeddings, ForwardCache { stages, proj, pred }))
}

/// Forward pass without retaining the cache.
pub fn forward(params: &ParamStore, cfg: &EncoderConfig, x: &Map3) -> Result<(MultiScaleFeatures, Embeddings)> {
    forward_cached(params, cfg, x).map(|(f, e, _)| (f, e))
}

/// Upstream gradients for each forward output; `None` means zero.
#[derive(Default)]
pub struct Upstream {
    pub d_z_f: Option<Map3>,
    pub d_z_m: Option<Map3>,
    pub d_z_c: Option<Map3>,
    pub d_pooled: Option<Vec<f64>>,
    pub d_g: Option<Vec<f64>>,
    pub d_h: Option<Vec<f64>>,
}

fn add_into(acc: &mut Vec<f64>, v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn head_backward(
    params: &ParamStore,
    head: &str,
    cache: &HeadCache,
    d_out: &[f64],
    grads: &mut ParamStore,
) -> Vec<f64> {
    let names = head_names(head);
    let out_dim = cache.out.len();
    let (d_w2, d_b2, mut d_hidden_act) =
        linear_backward(&cache.hidden_act, params.get(&names[4]), out_dim, d_out);
    relu_backward(&cache.hidden_aff, &mut d_hidden_act);
    let (d_scale, d_shift, d_hidden_lin) =
        affine_backward(&cache.hidden_lin, params.get(&names[2]), &d_hidden_act);
    let (d_w1, d_b1, d_input) =
        linear_backward(&cache.input, params.get(&names[0]), cache.hidden_lin.len(), &d_hidden_lin);
    for (name, d) in [
        (&names[0], d_w1),
        (&names[1], d_b1),
        (&names[2], d_scale),
        (&names[3], d_shift),
        (&names[4], d_w2),
        (&names[5], d_b2),
    ] {
        let idx = grads.index_of(name);
        add_into(&mut grads.params[idx].data, &d);
    }
    d_input
}

fn stage_backward(
    params: &ParamStore,
    stage: usize,
    cache: &StageCache,
    mut d_out: Map3,
    d_tap_pre: Option<&Map3>,
    grads: &mut ParamStore,
) -> Map3 {
    let names = stage_names(stage + 1);
    let out_c = cache.out.c;
    relu_backward(&cache.pre_relu2.data, &mut d_out.data);
    if let Some(extra) = d_tap_pre {
        // pre-activation tap joins between the norm and the ReLU
        for (a, b) in d_out.data.iter_mut().zip(&extra.data) {
            *a += b;
        }
    }
    let (d_scale2, d_shift2, d_pre_norm2) =
        channel_norm_backward(&cache.norm2, params.get(&names[6]), &d_out);
    let (d_w2, d_b2, mut d_mid) =
        conv2d_backward(&cache.mid, params.get(&names[4]), out_c, 1, &d_pre_norm2);
    relu_backward(&cache.pre_relu1.data, &mut d_mid.data);
    let (d_scale1, d_shift1, d_pre_norm1) =
        channel_norm_backward(&cache.norm1, params.get(&names[2]), &d_mid);
    let (d_w1, d_b1, d_input) =
        conv2d_backward(&cache.input, params.get(&names[0]), out_c, 2, &d_pre_norm1);
    for (name, d) in [
        (&names[0], d_w1),
        (&names[1], d_b1),
        (&names[2], d_scale1),
        (&names[3], d_shift1),
        (&names[4], d_w2),
        (&names[5], d_b2),
        (&names[6], d_scale2),
        (&names[7], d_shift2),
    ] {
        let idx = grads.index_of(name);
        add_into(&mut grads.params[idx].data, &d);
    }
    d_input
}

/// Gradients of `<outputs, upstream>` with respect to every parameter,
/// accumulated into `grads` (which must be shaped like the parameter store).
pub fn backward_cached(
    params: &ParamStore,
    cfg: &EncoderConfig,
    cache: &ForwardCache,
    up: &Upstream,
    grads: &mut ParamStore,
) {
    let out_dim = cfg.proj_out;
    // prediction head
    let mut d_g = vec![0.0; out_dim];
    if let Some(d_h) = &up.d_h {
        let d = head_backward(params, "pred", &cache.pred, d_h, grads);
        add_into(&mut d_g, &d);
    }
    if let Some(dg) = &up.d_g {
        add_into(&mut d_g, dg);
    }
    // projection head
    let mut d_pooled = vec![0.0; cfg.stage_channels.2];
    if d_g.iter().any(|&v| v != 0.0) {
        let d = head_backward(params, "proj", &cache.proj, &d_g, grads);
        add_into(&mut d_pooled, &d);
    }
    if let Some(dp) = &up.d_pooled {
        add_into(&mut d_pooled, dp);
    }
    // pooled -> coarse map
    let s3 = &cache.stages[2];
    let mut d_cur = global_avg_pool_backward(&d_pooled, s3.out.c, s3.out.h, s3.out.w);
    let taps = [&up.d_z_f, &up.d_z_m, &up.d_z_c];
    for stage in (0..3).rev() {
        let cache_s = &cache.stages[stage];
        let mut d_post = None;
        let mut d_pre = None;
        if let Some(tap) = taps[stage] {
            if cfg.tap_preactivation {
                d_pre = Some(tap);
            } else {
                d_post = Some(tap);
            }
        }
        if let Some(t) = d_post {
            for (a, b) in d_cur.data.iter_mut().zip(&t.data) {
                *a += b;
            }
        }
        d_cur = stage_backward(params, stage, cache_s, d_cur, d_pre, grads);
    }
}

/// Standalone backward: runs the forward pass internally and returns fresh
/// parameter gradients.
pub fn backward(params: &ParamStore, cfg: &EncoderConfig, x: &Map3, up: &Upstream) -> Result<ParamStore> {
    let (_, _, cache) = forward_cached(params, cfg, x)?;
    let mut grads = params.zeros_like();
    backward_cached(params, cfg, &cache, up, &mut grads);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{conv_out_size, dot};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            input_size: 16,
            stage_channels: (3, 4, 5),
            embed_dim: 8,
            proj_hidden: 6,
            proj_out: 8,
            tap_preactivation: false,
        }
    }

    fn rand_input(cfg: &EncoderConfig, seed: u64) -> Map3 {
        let mut rng = Rng::new(seed);
        Map3::from_vec(
            1,
            cfg.input_size,
            cfg.input_size,
            (0..cfg.input_size * cfg.input_size).map(|_| rng.next_gaussian()).collect(),
        )
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = EncoderConfig::default();
        let a = init_params(&cfg, 1);
        let b = init_params(&cfg, 1);
        let c = init_params(&cfg, 2);
        assert_eq!(a, b);
        assert!(a.params.iter().zip(&c.params).any(|(p, q)| p.data != q.data));
    }

    #[test]
    fn pooled_length_matches_coarse_channels() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 0);
        let x = rand_input(&cfg, 3);
        let (features, _) = forward(&params, &cfg, &x).unwrap();
        assert_eq!(features.pooled.len(), 64);
    }

    #[test]
    fn shape_ladder_halves_per_stage() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 0);
        let x = rand_input(&cfg, 1);
        let (f, _) = forward(&params, &cfg, &x).unwrap();
        assert_eq!((f.z_f.h, f.z_f.w), (16, 16));
        assert_eq!((f.z_m.h, f.z_m.w), (8, 8));
        assert_eq!((f.z_c.h, f.z_c.w), (4, 4));
        assert_eq!(conv_out_size(40, 2), 20);
    }

    #[test]
    fn zero_input_gives_zero_pooled_vector() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 7);
        let x = Map3::zeros(1, cfg.input_size, cfg.input_size);
        let (f, _) = forward(&params, &cfg, &x).unwrap();
        assert!(f.pooled.iter().all(|&v| v == 0.0));
        assert!(f.z_c.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooled_is_spatial_mean_of_coarse_map() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 9);
        let x = rand_input(&cfg, 4);
        let (f, _) = forward(&params, &cfg, &x).unwrap();
        for (c, &p) in f.pooled.iter().enumerate() {
            let mean = f.z_c.channel(c).iter().sum::<f64>() / f.z_c.spatial() as f64;
            assert!((p - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicate_inputs_give_identical_outputs() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 2);
        let x = rand_input(&cfg, 8);
        let (f1, e1) = forward(&params, &cfg, &x).unwrap();
        let (f2, e2) = forward(&params, &cfg, &x).unwrap();
        assert_eq!(f1.pooled, f2.pooled);
        assert_eq!(e1.h, e2.h);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 2);
        let x = Map3::zeros(1, 8, 8);
        assert!(matches!(forward(&params, &cfg, &x), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 2);
        let x = rand_input(&cfg, 5);
        let grads = backward(&params, &cfg, &x, &Upstream::default()).unwrap();
        assert!(grads.params.iter().all(|p| p.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn dead_path_parameters_get_zero_gradient() {
        // upstream on z_f only: stages 2/3 and heads are off the path
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 2);
        let x = rand_input(&cfg, 5);
        let mut rng = Rng::new(6);
        let d_z_f = Map3::from_vec(
            cfg.stage_channels.0,
            8,
            8,
            (0..cfg.stage_channels.0 * 64).map(|_| rng.next_gaussian()).collect(),
        );
        let up = Upstream { d_z_f: Some(d_z_f), ..Upstream::default() };
        let grads = backward(&params, &cfg, &x, &up).unwrap();
        for p in &grads.params {
            let on_path = p.name.starts_with("stage1.");
            let zero = p.data.iter().all(|&v| v == 0.0);
            assert_eq!(!zero, on_path, "{}: zero={zero}", p.name);
        }
    }

    /// Directional-derivative finite-difference check over every parameter
    /// group, float64, h=1e-5.
    #[test]
    fn backward_matches_finite_difference() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 12);
        let x = rand_input(&cfg, 13);
        let mut rng = Rng::new(14);
        let (f, e) = forward(&params, &cfg, &x).unwrap();
        let up = Upstream {
            d_z_f: Some(Map3::from_vec(f.z_f.c, f.z_f.h, f.z_f.w, (0..f.z_f.data.len()).map(|_| rng.next_gaussian()).collect())),
            d_z_m: Some(Map3::from_vec(f.z_m.c, f.z_m.h, f.z_m.w, (0..f.z_m.data.len()).map(|_| rng.next_gaussian()).collect())),
            d_z_c: Some(Map3::from_vec(f.z_c.c, f.z_c.h, f.z_c.w, (0..f.z_c.data.len()).map(|_| rng.next_gaussian()).collect())),
            d_pooled: Some((0..f.pooled.len()).map(|_| rng.next_gaussian()).collect()),
            d_g: Some((0..e.g.len()).map(|_| rng.next_gaussian()).collect()),
            d_h: Some((0..e.h.len()).map(|_| rng.next_gaussian()).collect()),
        };
        let grads = backward(&params, &cfg, &x, &up).unwrap();

        let scalar = |params: &ParamStore| -> f64 {
            let (f, e) = forward(params, &cfg, &x).unwrap();
            let mut acc = 0.0;
            acc += dot(&f.z_f.data, &up.d_z_f.as_ref().unwrap().data);
            acc += dot(&f.z_m.data, &up.d_z_m.as_ref().unwrap().data);
            acc += dot(&f.z_c.data, &up.d_z_c.as_ref().unwrap().data);
            acc += dot(&f.pooled, up.d_pooled.as_ref().unwrap());
            acc += dot(&e.g, up.d_g.as_ref().unwrap());
            acc += dot(&e.h, up.d_h.as_ref().unwrap());
            acc
        };

        // random direction per parameter array
        let mut dir_rng = Rng::new(99);
        for (pi, p) in params.params.iter().enumerate() {
            let dir: Vec<f64> = (0..p.data.len()).map(|_| dir_rng.next_gaussian()).collect();
            let analytic = dot(&grads.params[pi].data, &dir);
            let h = 1e-5;
            let mut plus = params.clone();
            let mut minus = params.clone();
            for (i, d) in dir.iter().enumerate() {
                plus.params[pi].data[i] += h * d;
                minus.params[pi].data[i] -= h * d;
            }
            let numeric = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
            // the floor absorbs fd noise on mathematically-zero gradients
            // (conv biases are cancelled by the following normalization)
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "{}: analytic {analytic} vs numeric {numeric}",
                p.name
            );
        }
    }

    #[test]
    fn preactivation_tap_backward_matches_finite_difference() {
        let cfg = EncoderConfig { tap_preactivation: true, ..tiny_cfg() };
        let params = init_params(&cfg, 21);
        let x = rand_input(&cfg, 22);
        let mut rng = Rng::new(23);
        let (f, _) = forward(&params, &cfg, &x).unwrap();
        // pre-activation taps can go negative where the stage output cannot
        assert!(f.z_f.data.iter().any(|&v| v < 0.0));
        let up = Upstream {
            d_z_f: Some(Map3::from_vec(f.z_f.c, f.z_f.h, f.z_f.w, (0..f.z_f.data.len()).map(|_| rng.next_gaussian()).collect())),
            d_z_c: Some(Map3::from_vec(f.z_c.c, f.z_c.h, f.z_c.w, (0..f.z_c.data.len()).map(|_| rng.next_gaussian()).collect())),
            ..Upstream::default()
        };
        let grads = backward(&params, &cfg, &x, &up).unwrap();
        let scalar = |params: &ParamStore| -> f64 {
            let (f, _) = forward(params, &cfg, &x).unwrap();
            dot(&f.z_f.data, &up.d_z_f.as_ref().unwrap().data)
                + dot(&f.z_c.data, &up.d_z_c.as_ref().unwrap().data)
        };
        let h = 1e-5;
        let mut dir_rng = Rng::new(31);
        let mut analytic = 0.0;
        let mut plus = params.clone();
        let mut minus = params.clone();
        for (pi, p) in params.params.iter().enumerate() {
            for i in 0..p.data.len() {
                let dir = dir_rng.next_gaussian();
                analytic += grads.params[pi].data[i] * dir;
                plus.params[pi].data[i] += h * dir;
                minus.params[pi].data[i] -= h * dir;
            }
        }
        let numeric = (scalar(&plus) - scalar(&minus)) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-3);
        assert!((analytic - numeric).abs() / denom < 1e-4, "{analytic} vs {numeric}");
    }

    #[test]
    fn congruence_error_reports_mismatch() {
        let cfg = tiny_cfg();
        let a = init_params(&cfg, 0);
        let mut b = init_params(&cfg, 0);
        b.params[0].shape = vec![1];
        b.params[0].data = vec![0.0];
        assert!(a.congruent_with(&b).is_err());
    }
}
