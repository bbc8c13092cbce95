//! Flat `key=value` configuration covering data generation, augmentation,
//! model, quantization, fusion, optimization, training loop, ablation
//! variants and evaluation. Unknown keys are hard errors; serialization
//! round-trips all defaults unchanged.

use crate::datagen::{AugmentConfig, PhantomSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::rng::fnv1a64;
use crate::serf::{RefineMode, SerfGradMode};
use crate::vq::EmaMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptName {
    Lars,
    Sgd,
}

impl OptName {
    pub fn parse(s: &str) -> Result<OptName> {
        match s {
            "lars" => Ok(OptName::Lars),
            "sgd" => Ok(OptName::Sgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            OptName::Lars => "lars",
            OptName::Sgd => "sgd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptConfig {
    pub name: OptName,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier on the layerwise trust ratio. The bare ratio (coefficient
    /// 1) diverges at this model scale under momentum 0.99.
    pub trust_coef: f64,
    pub warmup_epochs: f64,
    pub floor_lr: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            name: OptName::Lars,
            base_lr: 0.3,
            momentum: 0.99,
            weight_decay: 1.5e-6,
            trust_coef: 0.001,
            warmup_epochs: 10.0,
            floor_lr: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqConfig {
    pub entries: [usize; 3],
    pub decay: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub mode: EmaMode,
    pub dead_code_reinit: bool,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            entries: [128, 128, 128],
            decay: 0.99,
            beta: 0.25,
            epsilon: 1e-5,
            mode: EmaMode::Literal,
            dead_code_reinit: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SerfConfig {
    pub alpha: [f64; 3],
    pub alpha_trainable: bool,
    pub mode: RefineMode,
    pub grad_mode: SerfGradMode,
}

impl Default for SerfConfig {
    fn default() -> Self {
        SerfConfig {
            alpha: [1.0 / 3.0; 3],
            alpha_trainable: false,
            mode: RefineMode::TokenValue,
            // `align` lets the refinement head chase the prediction until
            // the second target is vacuous; a frozen head keeps it a stable
            // structure-derived signal
            grad_mode: SerfGradMode::VqOnly,
        }
    }
}

/// Which fusion path produces the refined target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SerfVariant {
    Full,
    /// Pooled anchor and global embedding concatenated through the head.
    Concat,
    Off,
}

impl SerfVariant {
    pub fn parse(s: &str) -> Result<SerfVariant> {
        match s {
            "full" => Ok(SerfVariant::Full),
            "concat" => Ok(SerfVariant::Concat),
            "off" => Ok(SerfVariant::Off),
            other => Err(Error::Config(format!("unknown serf variant `{other}`"))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            SerfVariant::Full => "full",
            SerfVariant::Concat => "concat",
            SerfVariant::Off => "off",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetsVariant {
    Both,
    HPhi,
    QT,
}

impl TargetsVariant {
    pub fn parse(s: &str) -> Result<TargetsVariant> {
        match s {
            "both" => Ok(TargetsVariant::Both),
            "h_phi" => Ok(TargetsVariant::HPhi),
            "q_t" => Ok(TargetsVariant::QT),
            other => Err(Error::Config(format!("unknown targets variant `{other}`"))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            TargetsVariant::Both => "both",
            TargetsVariant::HPhi => "h_phi",
            TargetsVariant::QT => "q_t",
        }
    }
    /// Loss weights on the (h_phi, q_t) regression terms.
    pub fn weights(&self) -> (f64, f64) {
        match self {
            TargetsVariant::Both => (0.5, 0.5),
            TargetsVariant::HPhi => (1.0, 0.0),
            TargetsVariant::QT => (0.0, 1.0),
        }
    }
}

/// Which scales are quantized: (coarse, medium, fine).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleSet {
    pub coarse: bool,
    pub medium: bool,
    pub fine: bool,
}

impl Default for ScaleSet {
    fn default() -> Self {
        ScaleSet { coarse: true, medium: true, fine: true }
    }
}

impl ScaleSet {
    pub fn parse(s: &str) -> Result<ScaleSet> {
        if s.is_empty() || s.chars().any(|c| !"cmf".contains(c)) {
            return Err(Error::Config(format!(
                "scales must be a non-empty subset of `cmf`, got `{s}`"
            )));
        }
        Ok(ScaleSet { coarse: s.contains('c'), medium: s.contains('m'), fine: s.contains('f') })
    }

    pub fn name(&self) -> String {
        let mut out = String::new();
        if self.coarse {
            out.push('c');
        }
        if self.medium {
            out.push('m');
        }
        if self.fine {
            out.push('f');
        }
        out
    }

    pub fn as_array(&self) -> [bool; 3] {
        [self.coarse, self.medium, self.fine]
    }
}

/// Ablation switches, one per ablation-table row family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariantConfig {
    pub serf: SerfVariant,
    pub post_serf_head: bool,
    pub scales: ScaleSet,
    pub targets: TargetsVariant,
    pub momentum: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            serf: SerfVariant::Full,
            post_serf_head: true,
            scales: ScaleSet::default(),
            targets: TargetsVariant::Both,
            momentum: true,
        }
    }
}

/// Downstream evaluation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub fractions: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub seeds: usize,
    pub ft_epochs: usize,
    pub ft_lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            fractions: vec![0.01, 0.05, 0.10, 0.20, 0.30, 0.40],
            epochs: 800,
            lr: 0.5,
            seeds: 3,
            ft_epochs: 60,
            ft_lr: 0.003,
        }
    }
}

/// The complete run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: PhantomSpec,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub vq: VqConfig,
    pub serf: SerfConfig,
    pub lambda: f64,
    pub opt: OptConfig,
    pub mu_base: f64,
    pub mu_final: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub threads: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub variant: VariantConfig,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: PhantomSpec::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
            vq: VqConfig::default(),
            serf: SerfConfig::default(),
            lambda: 1.0,
            opt: OptConfig::default(),
            mu_base: 0.996,
            mu_final: 1.0,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            threads: 1,
            log_every: 1,
            checkpoint_every: 0,
            variant: VariantConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

impl TrainConfig {
    /// Canonical serialization; `parse(to_text(c)) == c` for every valid
    /// config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        s += &format!("data.image_size={}\n", d.image_size);
        s += &format!("data.anatomy_jitter={}\n", fmt_f64(d.anatomy_jitter));
        s += &format!("data.lesion_min={}\n", d.lesion_count_range.0);
        s += &format!("data.lesion_max={}\n", d.lesion_count_range.1);
        s += &format!("data.lesion_radius_min={}\n", fmt_f64(d.lesion_radius_range.0));
        s += &format!("data.lesion_radius_max={}\n", fmt_f64(d.lesion_radius_range.1));
        s += &format!("data.lesion_intensity_min={}\n", fmt_f64(d.lesion_intensity_range.0));
        s += &format!("data.lesion_intensity_max={}\n", fmt_f64(d.lesion_intensity_range.1));
        s += &format!("data.noise_sigma={}\n", fmt_f64(d.noise_sigma));
        s += &format!("data.seed={}\n", d.seed);
        let a = &self.augment;
        s += &format!("aug.crop_min={}\n", fmt_f64(a.crop_scale_range.0));
        s += &format!("aug.crop_max={}\n", fmt_f64(a.crop_scale_range.1));
        s += &format!("aug.flip_prob={}\n", fmt_f64(a.flip_prob));
        s += &format!("aug.blur_sigma_min={}\n", fmt_f64(a.blur_sigma_range.0));
        s += &format!("aug.blur_sigma_max={}\n", fmt_f64(a.blur_sigma_range.1));
        s += &format!("aug.blur_prob={}\n", fmt_f64(a.blur_prob));
        s += &format!("aug.normalize_mean={}\n", fmt_f64(a.normalize_mean));
        s += &format!("aug.normalize_std={}\n", fmt_f64(a.normalize_std));
        let e = &self.encoder;
        s += &format!("encoder.input_size={}\n", e.input_size);
        s += &format!("encoder.channels_fine={}\n", e.stage_channels.0);
        s += &format!("encoder.channels_medium={}\n", e.stage_channels.1);
        s += &format!("encoder.channels_coarse={}\n", e.stage_channels.2);
        s += &format!("encoder.embed_dim={}\n", e.embed_dim);
        s += &format!("encoder.proj_hidden={}\n", e.proj_hidden);
        s += &format!("encoder.proj_out={}\n", e.proj_out);
        s += &format!("encoder.tap_preactivation={}\n", e.tap_preactivation);
        let v = &self.vq;
        s += &format!("vq.entries_coarse={}\n", v.entries[0]);
        s += &format!("vq.entries_medium={}\n", v.entries[1]);
        s += &format!("vq.entries_fine={}\n", v.entries[2]);
        s += &format!("vq.decay={}\n", fmt_f64(v.decay));
        s += &format!("vq.beta={}\n", fmt_f64(v.beta));
        s += &format!("vq.epsilon={}\n", fmt_f64(v.epsilon));
        s += &format!("vq.mode={}\n", v.mode.name());
        s += &format!("vq.dead_code_reinit={}\n", v.dead_code_reinit);
        let f = &self.serf;
        s += &format!("serf.alpha_coarse={}\n", fmt_f64(f.alpha[0]));
        s += &format!("serf.alpha_medium={}\n", fmt_f64(f.alpha[1]));
        s += &format!("serf.alpha_fine={}\n", fmt_f64(f.alpha[2]));
        s += &format!("serf.alpha_trainable={}\n", f.alpha_trainable);
        s += &format!("serf.mode={}\n", f.mode.name());
        s += &format!("serf.grad_mode={}\n", f.grad_mode.name());
        s += &format!("loss.lambda={}\n", fmt_f64(self.lambda));
        let o = &self.opt;
        s += &format!("opt.name={}\n", o.name.name());
        s += &format!("opt.base_lr={}\n", fmt_f64(o.base_lr));
        s += &format!("opt.momentum={}\n", fmt_f64(o.momentum));
        s += &format!("opt.weight_decay={}\n", fmt_f64(o.weight_decay));
        s += &format!("opt.trust_coef={}\n", fmt_f64(o.trust_coef));
        s += &format!("opt.warmup_epochs={}\n", fmt_f64(o.warmup_epochs));
        s += &format!("opt.floor_lr={}\n", fmt_f64(o.floor_lr));
        s += &format!("momentum.base={}\n", fmt_f64(self.mu_base));
        s += &format!("momentum.final={}\n", fmt_f64(self.mu_final));
        s += &format!("train.epochs={}\n", self.epochs);
        s += &format!("train.batch_size={}\n", self.batch_size);
        s += &format!("train.seed={}\n", self.seed);
        s += &format!("train.threads={}\n", self.threads);
        s += &format!("train.log_every={}\n", self.log_every);
        s += &format!("train.checkpoint_every={}\n", self.checkpoint_every);
        let vr = &self.variant;
        s += &format!("variant.serf={}\n", vr.serf.name());
        s += &format!("variant.post_serf_head={}\n", vr.post_serf_head);
        s += &format!("variant.scales={}\n", vr.scales.name());
        s += &format!("variant.targets={}\n", vr.targets.name());
        s += &format!("variant.momentum={}\n", vr.momentum);
        let p = &self.probe;
        let fr: Vec<String> = p.fractions.iter().map(|v| fmt_f64(*v)).collect();
        s += &format!("probe.fractions={}\n", fr.join(","));
        s += &format!("probe.epochs={}\n", p.epochs);
        s += &format!("probe.lr={}\n", fmt_f64(p.lr));
        s += &format!("probe.seeds={}\n", p.seeds);
        s += &format!("probe.ft_epochs={}\n", p.ft_epochs);
        s += &format!("probe.ft_lr={}\n", fmt_f64(p.ft_lr));
        s
    }

    /// Parse `key=value` lines. Blank lines and `#` comments are skipped;
    /// unknown keys are errors.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value", lineno + 1)));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a single `key=value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
        }
        match key {
            "data.image_size" => self.data.image_size = p(key, value)?,
            "data.anatomy_jitter" => self.data.anatomy_jitter = p(key, value)?,
            "data.lesion_min" => self.data.lesion_count_range.0 = p(key, value)?,
            "data.lesion_max" => self.data.lesion_count_range.1 = p(key, value)?,
            "data.lesion_radius_min" => self.data.lesion_radius_range.0 = p(key, value)?,
            "data.lesion_radius_max" => self.data.lesion_radius_range.1 = p(key, value)?,
            "data.lesion_intensity_min" => self.data.lesion_intensity_range.0 = p(key, value)?,
            "data.lesion_intensity_max" => self.data.lesion_intensity_range.1 = p(key, value)?,
            "data.noise_sigma" => self.data.noise_sigma = p(key, value)?,
            "data.seed" => self.data.seed = p(key, value)?,
            "aug.crop_min" => self.augment.crop_scale_range.0 = p(key, value)?,
            "aug.crop_max" => self.augment.crop_scale_range.1 = p(key, value)?,
            "aug.flip_prob" => self.augment.flip_prob = p(key, value)?,
            "aug.blur_sigma_min" => self.augment.blur_sigma_range.0 = p(key, value)?,
            "aug.blur_sigma_max" => self.augment.blur_sigma_range.1 = p(key, value)?,
            "aug.blur_prob" => self.augment.blur_prob = p(key, value)?,
            "aug.normalize_mean" => self.augment.normalize_mean = p(key, value)?,
            "aug.normalize_std" => self.augment.normalize_std = p(key, value)?,
            "encoder.input_size" => self.encoder.input_size = p(key, value)?,
            "encoder.channels_fine" => self.encoder.stage_channels.0 = p(key, value)?,
            "encoder.channels_medium" => self.encoder.stage_channels.1 = p(key, value)?,
            "encoder.channels_coarse" => self.encoder.stage_channels.2 = p(key, value)?,
            "encoder.embed_dim" => self.encoder.embed_dim = p(key, value)?,
            "encoder.proj_hidden" => self.encoder.proj_hidden = p(key, value)?,
            "encoder.proj_out" => self.encoder.proj_out = p(key, value)?,
            "encoder.tap_preactivation" => self.encoder.tap_preactivation = p(key, value)?,
            "vq.entries_coarse" => self.vq.entries[0] = p(key, value)?,
            "vq.entries_medium" => self.vq.entries[1] = p(key, value)?,
            "vq.entries_fine" => self.vq.entries[2] = p(key, value)?,
            "vq.decay" => self.vq.decay = p(key, value)?,
            "vq.beta" => self.vq.beta = p(key, value)?,
            "vq.epsilon" => self.vq.epsilon = p(key, value)?,
            "vq.mode" => self.vq.mode = EmaMode::parse(value)?,
            "vq.dead_code_reinit" => self.vq.dead_code_reinit = p(key, value)?,
            "serf.alpha_coarse" => self.serf.alpha[0] = p(key, value)?,
            "serf.alpha_medium" => self.serf.alpha[1] = p(key, value)?,
            "serf.alpha_fine" => self.serf.alpha[2] = p(key, value)?,
            "serf.alpha_trainable" => self.serf.alpha_trainable = p(key, value)?,
            "serf.mode" => self.serf.mode = RefineMode::parse(value)?,
            "serf.grad_mode" => self.serf.grad_mode = SerfGradMode::parse(value)?,
            "loss.lambda" => self.lambda = p(key, value)?,
            "opt.name" => self.opt.name = OptName::parse(value)?,
            "opt.base_lr" => self.opt.base_lr = p(key, value)?,
            "opt.momentum" => self.opt.momentum = p(key, value)?,
            "opt.weight_decay" => self.opt.weight_decay = p(key, value)?,
            "opt.trust_coef" => self.opt.trust_coef = p(key, value)?,
            "opt.warmup_epochs" => self.opt.warmup_epochs = p(key, value)?,
            "opt.floor_lr" => self.opt.floor_lr = p(key, value)?,
            "momentum.base" => self.mu_base = p(key, value)?,
            "momentum.final" => self.mu_final = p(key, value)?,
            "train.epochs" => self.epochs = p(key, value)?,
            "train.batch_size" => self.batch_size = p(key, value)?,
            "train.seed" => self.seed = p(key, value)?,
            "train.threads" => self.threads = p(key, value)?,
            "train.log_every" => self.log_every = p(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "variant.serf" => self.variant.serf = SerfVariant::parse(value)?,
            "variant.post_serf_head" => self.variant.post_serf_head = p(key, value)?,
            "variant.scales" => self.variant.scales = ScaleSet::parse(value)?,
            "variant.targets" => self.variant.targets = TargetsVariant::parse(value)?,
            "variant.momentum" => self.variant.momentum = p(key, value)?,
            "probe.fractions" => {
                let mut out = Vec::new();
                for part in value.split(',') {
                    out.push(p::<f64>(key, part.trim())?);
                }
                self.probe.fractions = out;
            }
            "probe.epochs" => self.probe.epochs = p(key, value)?,
            "probe.lr" => self.probe.lr = p(key, value)?,
            "probe.seeds" => self.probe.seeds = p(key, value)?,
            "probe.ft_epochs" => self.probe.ft_epochs = p(key, value)?,
            "probe.ft_lr" => self.probe.ft_lr = p(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("train.threads must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("train.log_every must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("loss.lambda must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.vq.decay) {
            return Err(Error::Config("vq.decay must lie in [0, 1)".into()));
        }
        if self.vq.entries.iter().any(|&n| n < 2) {
            return Err(Error::Config("vq.entries_* must be >= 2".into()));
        }
        if self.serf.alpha.iter().any(|&a| a < 0.0) {
            return Err(Error::Config("serf.alpha_* must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mu_base) || !(0.0..=1.0).contains(&self.mu_final) {
            return Err(Error::Config("momentum coefficients must lie in [0, 1]".into()));
        }
        if self.variant.serf == SerfVariant::Off && self.variant.targets != TargetsVariant::HPhi {
            return Err(Error::Config(
                "variant.serf=off produces no refined target; set variant.targets=h_phi".into(),
            ));
        }
        if self.variant.serf == SerfVariant::Concat && !self.variant.post_serf_head {
            return Err(Error::Config(
                "variant.serf=concat requires the post-fusion head".into(),
            ));
        }
        if self.probe.fractions.iter().any(|&f| !(0.0..=1.0).contains(&f) || f <= 0.0) {
            return Err(Error::Config("probe.fractions must lie in (0, 1]".into()));
        }
        if self.probe.seeds == 0 {
            return Err(Error::Config("probe.seeds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    /// Apply one of the named ablation presets.
    pub fn apply_variant_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "full" => {}
            "no-serf-concat" => self.variant.serf = SerfVariant::Concat,
            "no-post-serf-head" => self.variant.post_serf_head = false,
            "coarse-only" => {
                self.variant.scales = ScaleSet { coarse: true, medium: false, fine: false };
                self.serf.alpha = [1.0, 0.0, 0.0];
            }
            "medium-only" => {
                self.variant.scales = ScaleSet { coarse: false, medium: true, fine: false };
                self.serf.alpha = [0.0, 1.0, 0.0];
            }
            "fine-only" => {
                self.variant.scales = ScaleSet { coarse: false, medium: false, fine: true };
                self.serf.alpha = [0.0, 0.0, 1.0];
            }
            "hphi-only" => self.variant.targets = TargetsVariant::HPhi,
            "qt-only" => self.variant.targets = TargetsVariant::QT,
            "no-momentum" => self.variant.momentum = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation variant `{other}` (expected one of: full, no-serf-concat, \
                     no-post-serf-head, coarse-only, medium-only, fine-only, hphi-only, qt-only, \
                     no-momentum)"
                )))
            }
        }
        Ok(())
    }
}
