//! Procedural "phantom radiograph" corpus.
//!
//! Every sample shares a global anatomical template (two elliptical lung
//! fields crossed by periodic rib arcs over a soft background gradient),
//! perturbed by a small per-sample jitter. Sparse Gaussian-blob lesions are
//! added on top; the downstream task is predicting, per image quadrant,
//! whether a lesion center falls inside it.
//!
//! Corpus layout on disk: `manifest.txt` (key=value lines), one
//! `img_%06d.f32` per image (row-major little-endian float32) and a
//! `labels.tsv` with one `index\tTL\tTR\tBL\tBR` row per image.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::Map3;
use crate::rng::{fnv1a64, stream, Rng};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// Generation parameters for the phantom corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub image_size: usize,
    /// Fraction in [0, 0.2] controlling per-sample geometric perturbation.
    pub anatomy_jitter: f64,
    pub lesion_count_range: (u32, u32),
    pub lesion_radius_range: (f64, f64),
    pub lesion_intensity_range: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 32,
            anatomy_jitter: 0.05,
            lesion_count_range: (0, 3),
            lesion_radius_range: (2.0, 4.0),
            lesion_intensity_range: (0.3, 0.65),
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 2 != 0 {
            return Err(Error::Precondition(format!(
                "image_size must be even and >= 8, got {}",
                self.image_size
            )));
        }
        if !(0.0..=0.2).contains(&self.anatomy_jitter) {
            return Err(Error::Precondition("anatomy_jitter must lie in [0, 0.2]".into()));
        }
        if self.lesion_count_range.0 > self.lesion_count_range.1 {
            return Err(Error::Precondition("lesion_count_range is inverted".into()));
        }
        if self.lesion_radius_range.0 > self.lesion_radius_range.1
            || self.lesion_radius_range.0 <= 0.0
        {
            return Err(Error::Precondition("lesion_radius_range invalid".into()));
        }
        if self.lesion_intensity_range.0 > self.lesion_intensity_range.1
            || self.lesion_intensity_range.0 < 0.0
            || self.lesion_intensity_range.1 > 1.0
        {
            return Err(Error::Precondition("lesion_intensity_range must be within [0,1]".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Precondition("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Content hash over all generation parameters.
    pub fn hash(&self) -> u64 {
        let repr = format!(
            "v{} size={} jitter={} count={},{} radius={},{} intensity={},{} noise={} seed={}",
            CORPUS_FORMAT_VERSION,
            self.image_size,
            self.anatomy_jitter,
            self.lesion_count_range.0,
            self.lesion_count_range.1,
            self.lesion_radius_range.0,
            self.lesion_radius_range.1,
            self.lesion_intensity_range.0,
            self.lesion_intensity_range.1,
            self.noise_sigma,
            self.seed
        );
        fnv1a64(repr.as_bytes())
    }
}

/// One synthetic radiograph with quadrant-level lesion labels.
#[derive(Clone, Debug)]
pub struct PhantomSample {
    /// H x W pixels in [0, 1].
    pub image: Map3,
    /// Lesion presence per quadrant: (TL, TR, BL, BR).
    pub labels: [u8; 4],
    pub lesion_centers: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug)]
pub struct Lesion {
    pub row: usize,
    pub col: usize,
    pub radius: f64,
    pub intensity: f64,
}

/// Quadrant index of a pixel: 0=TL, 1=TR, 2=BL, 3=BR.
pub fn quadrant_of(row: usize, col: usize, size: usize) -> usize {
    let half = size / 2;
    let bottom = (row >= half) as usize;
    let right = (col >= half) as usize;
    bottom * 2 + right
}

pub fn labels_from_centers(centers: &[(usize, usize)], size: usize) -> [u8; 4] {
    let mut labels = [0u8; 4];
    for &(r, c) in centers {
        labels[quadrant_of(r, c, size)] = 1;
    }
    labels
}

/// Render the shared anatomy template with a per-sample jitter, then add
/// lesions and noise. Exposed separately so tests can place lesions at exact
/// coordinates.
pub fn render_phantom(spec: &PhantomSpec, jitter_rng: &mut Rng, lesions: &[Lesion]) -> Map3 {
    let s = spec.image_size;
    let sf = s as f64;
    let j = spec.anatomy_jitter;
    let mut img = Map3::zeros(1, s, s);

    // jittered template geometry
    let dx = jitter_rng.range_f64(-j, j) * sf;
    let dy = jitter_rng.range_f64(-j, j) * sf;
    let rscale = 1.0 + jitter_rng.range_f64(-j, j);
    let rib_phase = jitter_rng.range_f64(0.0, 1.0);

    let lung_ry = 0.30 * sf * rscale;
    let lung_rx = 0.17 * sf * rscale;
    let lung_cy = 0.52 * sf + dy;
    let lung_cx = [0.30 * sf + dx, 0.70 * sf + dx];
    let rib_period = 0.16 * sf;
    let rib_width = 0.035 * sf;

    for y in 0..s {
        for x in 0..s {
            let (yf, xf) = (y as f64, x as f64);
            // soft vertical background gradient
            let mut v = 0.18 + 0.10 * yf / sf;
            // lung fields: bright ellipses with smooth falloff
            for &cx in &lung_cx {
                let ny = (yf - lung_cy) / lung_ry;
                let nx = (xf - cx) / lung_rx;
                let d = nx * nx + ny * ny;
                if d < 1.6 {
                    v += 0.34 * (-d * d * 1.4).exp();
                }
            }
            // rib arcs: periodic curved bands across the torso
            let arc = yf + 0.08 * (xf - sf / 2.0).powi(2) / sf;
            let phase = arc / rib_period + rib_phase;
            let band = (phase - phase.floor() - 0.5).abs() * rib_period;
            if (0.12 * sf..0.92 * sf).contains(&yf) {
                v += 0.08 * (-(band / rib_width).powi(2)).exp();
            }
            img.data[y * s + x] = v;
        }
    }

    for lesion in lesions {
        let sigma = lesion.radius / 2.0;
        let cut = (3.0 * sigma).ceil() as isize;
        let (lr, lc) = (lesion.row as isize, lesion.col as isize);
        for oy in -cut..=cut {
            let y = lr + oy;
            if y < 0 || y >= s as isize {
                continue;
            }
            for ox in -cut..=cut {
                let x = lc + ox;
                if x < 0 || x >= s as isize {
                    continue;
                }
                let d2 = (oy * oy + ox * ox) as f64;
                let bump = lesion.intensity * (-d2 / (2.0 * sigma * sigma)).exp();
                img.data[y as usize * s + x as usize] += bump;
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        for v in &mut img.data {
            *v += spec.noise_sigma * jitter_rng.next_gaussian();
        }
    }
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Deterministic sample generation from (spec, index).
pub fn generate_sample(spec: &PhantomSpec, index: u64) -> PhantomSample {
    let mut rng = Rng::derived(spec.seed, &[stream::DATA, index]);
    let count = rng.range_u64(spec.lesion_count_range.0 as u64, spec.lesion_count_range.1 as u64);
    let margin = spec.lesion_radius_range.1.ceil() as u64 + 1;
    let hi = spec.image_size as u64 - margin - 1;
    let mut lesions = Vec::with_capacity(count as usize);
    for _ in 0..count {
        lesions.push(Lesion {
            row: rng.range_u64(margin, hi) as usize,
            col: rng.range_u64(margin, hi) as usize,
            radius: rng.range_f64(spec.lesion_radius_range.0, spec.lesion_radius_range.1),
            intensity: rng.range_f64(spec.lesion_intensity_range.0, spec.lesion_intensity_range.1),
        });
    }
    let image = render_phantom(spec, &mut rng, &lesions);
    let centers: Vec<(usize, usize)> = lesions.iter().map(|l| (l.row, l.col)).collect();
    let labels = labels_from_centers(&centers, spec.image_size);
    PhantomSample { image, labels, lesion_centers: centers }
}

/// Manifest describing a generated corpus directory.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub version: u32,
    pub count: usize,
    pub image_size: usize,
    pub spec_hash: u64,
}

pub fn generate_corpus(spec: &PhantomSpec, n: usize, out_dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Precondition("corpus size must be >= 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut labels_out = String::new();
    for index in 0..n {
        let sample = generate_sample(spec, index as u64);
        let path = image_path(out_dir, index);
        write_f32_image(&path, &sample.image)?;
        labels_out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            index, sample.labels[0], sample.labels[1], sample.labels[2], sample.labels[3]
        ));
    }
    let labels_path = out_dir.join("labels.tsv");
    fs::write(&labels_path, labels_out).map_err(|e| Error::io(labels_path.display().to_string(), e))?;

    let manifest = CorpusManifest {
        version: CORPUS_FORMAT_VERSION,
        count: n,
        image_size: spec.image_size,
        spec_hash: spec.hash(),
    };
    let manifest_path = out_dir.join("manifest.txt");
    let text = format!(
        "version={}\ncount={}\nimage_size={}\nspec_hash={:016x}\n",
        manifest.version, manifest.count, manifest.image_size, manifest.spec_hash
    );
    fs::write(&manifest_path, text).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest)
}

fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("img_{index:06}.f32"))
}

fn write_f32_image(path: &Path, image: &Map3) -> Result<()> {
    let mut bytes = Vec::with_capacity(image.data.len() * 4);
    for &v in &image.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_f32_image(path: &Path, size: usize) -> Result<Map3> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() != size * size * 4 {
        return Err(Error::CheckpointCorrupt(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            size * size * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Map3::from_vec(1, size, size, data))
}

/// In-memory corpus loaded from a generated directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub images: Vec<Map3>,
    pub labels: Vec<[u8; 4]>,
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut version = None;
    let mut count = None;
    let mut image_size = None;
    let mut spec_hash = None;
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        match k {
            "version" => version = v.parse::<u32>().ok(),
            "count" => count = v.parse::<usize>().ok(),
            "image_size" => image_size = v.parse::<usize>().ok(),
            "spec_hash" => spec_hash = u64::from_str_radix(v, 16).ok(),
            _ => return Err(Error::Config(format!("unknown manifest key `{k}`"))),
        }
    }
    let manifest = CorpusManifest {
        version: version.ok_or_else(|| Error::CheckpointCorrupt("manifest missing version".into()))?,
        count: count.ok_or_else(|| Error::CheckpointCorrupt("manifest missing count".into()))?,
        image_size: image_size
            .ok_or_else(|| Error::CheckpointCorrupt("manifest missing image_size".into()))?,
        spec_hash: spec_hash
            .ok_or_else(|| Error::CheckpointCorrupt("manifest missing spec_hash".into()))?,
    };
    if manifest.version != CORPUS_FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.version.to_string(),
            expected: CORPUS_FORMAT_VERSION.to_string(),
        });
    }

    let labels_path = dir.join("labels.tsv");
    let labels_text = fs::read_to_string(&labels_path)
        .map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    let mut labels = vec![[0u8; 4]; manifest.count];
    for line in labels_text.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::CheckpointCorrupt(format!("bad labels row: {line}")));
        }
        let idx: usize = cols[0]
            .parse()
            .map_err(|_| Error::CheckpointCorrupt(format!("bad label index: {line}")))?;
        for q in 0..4 {
            labels[idx][q] = cols[q + 1]
                .parse()
                .map_err(|_| Error::CheckpointCorrupt(format!("bad label flag: {line}")))?;
        }
    }

    let mut images = Vec::with_capacity(manifest.count);
    for index in 0..manifest.count {
        images.push(read_f32_image(&image_path(dir, index), manifest.image_size)?);
    }
    Ok(Corpus { manifest, images, labels })
}

// ---------------------------------------------------------------------------
// Augmentation pipeline: random crop, horizontal flip, Gaussian blur,
// normalization.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop_scale_range: (f64, f64),
    pub flip_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub blur_prob: f64,
    pub normalize_mean: f64,
    pub normalize_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale_range: (0.6, 1.0),
            flip_prob: 0.5,
            blur_sigma_range: (0.1, 1.0),
            blur_prob: 0.5,
            normalize_mean: 0.5,
            normalize_std: 0.25,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Precondition("crop_scale_range must be within (0, 1]".into()));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Precondition(format!("{name} must be within [0, 1]")));
            }
        }
        if self.normalize_std <= 0.0 {
            return Err(Error::Precondition("normalize_std must be > 0".into()));
        }
        Ok(())
    }
}

/// Two augmented views of one source image.
#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub x1: Map3,
    pub x2: Map3,
}

/// Horizontal mirror.
pub fn flip_horizontal(image: &Map3) -> Map3 {
    let mut out = image.clone();
    for y in 0..image.h {
        for x in 0..image.w {
            out.data[y * image.w + x] = image.data[y * image.w + (image.w - 1 - x)];
        }
    }
    out
}

/// Crop a square `side x side` window at (r0, c0) and resize it back to the
/// source resolution with bilinear interpolation (align-corners). Side equal
/// to the full size with zero offset is an exact identity.
pub fn crop_resize(image: &Map3, r0: usize, c0: usize, side: usize) -> Map3 {
    let s = image.h;
    let mut out = Map3::zeros(1, s, s);
    if side == 1 {
        let v = image.data[r0 * image.w + c0];
        out.data.fill(v);
        return out;
    }
    let scale = (side - 1) as f64 / (s - 1) as f64;
    for y in 0..s {
        let sy = y as f64 * scale;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(side - 1);
        let fy = sy - y0 as f64;
        for x in 0..s {
            let sx = x as f64 * scale;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let fx = sx - x0 as f64;
            let p = |yy: usize, xx: usize| image.data[(r0 + yy) * image.w + c0 + xx];
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            out.data[y * s + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Separable Gaussian blur with kernel half-width ceil(3*sigma) and reflect
/// padding.
pub fn gaussian_blur(image: &Map3, sigma: f64) -> Map3 {
    if sigma <= 0.0 {
        return image.clone();
    }
    let half = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * half + 1) as usize);
    for i in -half..=half {
        kernel.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (h, w) = (image.h as isize, image.w as isize);
    let reflect = |i: isize, n: isize| -> usize {
        // reflect without repeating the edge sample, e.g. -1 -> 1
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        i as usize
    };
    let mut tmp = Map3::zeros(1, image.h, image.w);
    for y in 0..image.h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = reflect(x + ki as isize - half, w);
                acc += k * image.data[y * image.w + sx];
            }
            tmp.data[y * image.w + x as usize] = acc;
        }
    }
    let mut out = Map3::zeros(1, image.h, image.w);
    for y in 0..h {
        for x in 0..image.w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = reflect(y + ki as isize - half, h);
                acc += k * tmp.data[sy * image.w + x];
            }
            out.data[y as usize * image.w + x] = acc;
        }
    }
    out
}

/// One augmentation chain: crop -> flip -> blur -> normalize.
pub fn augment_view(image: &Map3, cfg: &AugmentConfig, rng: &mut Rng) -> Map3 {
    let s = image.h;
    let area = rng.range_f64(cfg.crop_scale_range.0, cfg.crop_scale_range.1);
    let side = ((s as f64 * area.sqrt()).round() as usize).clamp(1, s);
    let r0 = rng.range_u64(0, (s - side) as u64) as usize;
    let c0 = rng.range_u64(0, (s - side) as u64) as usize;
    let mut view = crop_resize(image, r0, c0, side);
    if rng.coin(cfg.flip_prob) {
        view = flip_horizontal(&view);
    }
    if rng.coin(cfg.blur_prob) {
        let sigma = rng.range_f64(cfg.blur_sigma_range.0, cfg.blur_sigma_range.1);
        view = gaussian_blur(&view, sigma);
    }
    for v in &mut view.data {
        *v = (*v - cfg.normalize_mean) / cfg.normalize_std;
    }
    view
}

/// Two independently sampled augmentation chains applied to the same image.
pub fn make_pair(image: &Map3, cfg: &AugmentConfig, rng: &mut Rng) -> AugmentedPair {
    AugmentedPair { x1: augment_view(image, cfg, rng), x2: augment_view(image, cfg, rng) }
}
