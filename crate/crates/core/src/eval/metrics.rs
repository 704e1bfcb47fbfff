use crate::data::{class_probe_sprites, sprite_mask, to_u8, CLASSES};
use crate::error::{Error, Result};
use crate::net::{make_schedule, q_sample_with, unet_forward, UNetWeights, TRAIN_STEPS};
use crate::rng;
use crate::tensor::Tensor;
use crate::text::{tokenize, Conditioning, Vocabulary};

/// Noise level at which probe features are read.
pub const PROBE_TIMESTEP: usize = 200;
/// Block whose output serves as the mid-level feature.
pub const PROBE_BLOCK: usize = 2;
pub const PROBE_SPRITES: usize = 8;
const HIST_LEVELS: usize = 4;
const MOMENT_WEIGHT: f64 = 4.0;

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn mean_vec(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs.first().map_or(0, Vec::len)];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = vs.len().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Identity descriptor: 64-bin color histogram over the sprite region
/// followed by weighted shape moments (area fraction, μ20, μ02, μ11).
pub fn identity_descriptor(img: &Tensor) -> Result<Vec<f64>> {
    let mask = sprite_mask(img)?;
    let n = mask.len();
    let d = img.data();
    let bins = HIST_LEVELS * HIST_LEVELS * HIST_LEVELS;
    let mut hist = vec![0.0; bins + 4];
    let side = (n as f64).sqrt() as usize;
    let mut pts = Vec::new();
    for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let q = |c: usize| usize::from(to_u8(d[c * n + p])) * HIST_LEVELS / 256;
        hist[(q(0) * HIST_LEVELS + q(1)) * HIST_LEVELS + q(2)] += 1.0;
        pts.push(((p % side) as f64, (p / side) as f64));
    }
    let area = pts.len() as f64;
    if area == 0.0 {
        return Ok(hist);
    }
    hist[..bins].iter_mut().for_each(|h| *h /= area);
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / area;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / area;
    let mut m = [0.0; 3];
    for (x, y) in &pts {
        m[0] += (x - cx).powi(2);
        m[1] += (y - cy).powi(2);
        m[2] += (x - cx) * (y - cy);
    }
    hist[bins] = MOMENT_WEIGHT * area / n as f64;
    for k in 0..3 {
        hist[bins + 1 + k] = MOMENT_WEIGHT * m[k] / (area * area);
    }
    Ok(hist)
}

/// Cosine between the generated image's descriptor and the mean
/// descriptor of the references.
pub fn toy_image_alignment(generated: &Tensor, references: &[Tensor]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Input("image alignment needs at least one reference".into()));
    }
    let refs = references.iter().map(identity_descriptor).collect::<Result<Vec<_>>>()?;
    Ok(cosine(&identity_descriptor(generated)?, &mean_vec(&refs)))
}

/// Translation- and scale-invariant silhouette descriptor: normalized
/// central moments of order 2 and 3, bounding-box fill and aspect ratio.
pub fn silhouette_descriptor(img: &Tensor) -> Result<Vec<f64>> {
    let mask = sprite_mask(img)?;
    let side = (mask.len() as f64).sqrt() as usize;
    let pts: Vec<(f64, f64)> = mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(p, _)| ((p % side) as f64, (p / side) as f64))
        .collect();
    if pts.is_empty() {
        return Ok(vec![0.0; SILHOUETTE_DIM]);
    }
    let area = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / area;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / area;
    let eta = |p: i32, q: i32| {
        let mu: f64 = pts.iter().map(|(x, y)| (x - cx).powi(p) * (y - cy).powi(q)).sum();
        mu / area.powf(1.0 + f64::from(p + q) / 2.0)
    };
    let span = |f: fn(&(f64, f64)) -> f64| {
        let (lo, hi) = pts.iter().map(f).fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v), h.max(v)));
        hi - lo + 1.0
    };
    let (w, h) = (span(|p| p.0), span(|p| p.1));
    Ok(vec![
        eta(2, 0),
        eta(0, 2),
        eta(1, 1),
        eta(3, 0),
        eta(0, 3),
        eta(2, 1),
        eta(1, 2),
        area / (w * h),
        w / h,
    ])
}

const SILHOUETTE_DIM: usize = 9;

/// Per-dimension standardization fitted on the probe sprites.
#[derive(Debug, Clone, Default)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(samples: &[Vec<f64>]) -> Self {
        let mean = mean_vec(samples);
        let n = samples.len().max(1) as f64;
        let scale = (0..mean.len())
            .map(|k| (samples.iter().map(|v| (v[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        Standardizer { mean, scale }
    }

    /// Dimensions without spread on the probe set are dropped to zero.
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| if *s > 1e-9 { (x - m) / s } else { 0.0 })
            .collect()
    }
}

/// Frozen base model used as a feature extractor, with cached class
/// signatures.
#[derive(Debug, Clone)]
pub struct Probe {
    weights: UNetWeights,
    null: Conditioning,
    eps: Tensor,
    abar: f64,
    /// `(class word, signature)` in shipped order.
    signatures: Vec<(String, Vec<f64>)>,
    center: Vec<f64>,
    /// `(class word, standardized mean silhouette)` in shipped order.
    silhouettes: Vec<(String, Vec<f64>)>,
    silhouette_norm: Standardizer,
}

impl Probe {
    pub fn new(weights: &UNetWeights, vocab: &Vocabulary) -> Result<Self> {
        let a = &weights.config;
        let shape = [a.channels, a.image_size, a.image_size];
        let n = shape.iter().product();
        let eps = Tensor::new(rng::normal_vec(&mut rng::stream(0, "probe-noise", 0), n, 1.0), &shape)?;
        let mut probe = Probe {
            weights: weights.clone(),
            null: vocab.null_condition()?,
            eps,
            abar: make_schedule(TRAIN_STEPS)?.alpha_bar(PROBE_TIMESTEP)?,
            signatures: Vec::new(),
            center: Vec::new(),
            silhouettes: Vec::new(),
            silhouette_norm: Standardizer::default(),
        };
        let mut shapes = Vec::new();
        for (class, _) in CLASSES {
            let sprites = class_probe_sprites(class, PROBE_SPRITES)?;
            let feats = sprites.iter().map(|img| probe.raw_feature(img)).collect::<Result<Vec<_>>>()?;
            probe.signatures.push((class.to_string(), mean_vec(&feats)));
            shapes.push(sprites.iter().map(silhouette_descriptor).collect::<Result<Vec<_>>>()?);
        }
        probe.center = mean_vec(&probe.signatures.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>());
        probe.silhouette_norm = Standardizer::fit(&shapes.concat());
        probe.silhouettes = CLASSES
            .iter()
            .zip(&shapes)
            .map(|((class, _), s)| (class.to_string(), probe.silhouette_norm.apply(&mean_vec(s))))
            .collect();
        Ok(probe)
    }

    /// Per-channel mean and standard deviation of the mid-block output.
    fn raw_feature(&self, img: &Tensor) -> Result<Vec<f64>> {
        let z = q_sample_with(img, self.abar, &self.eps)?;
        let out = unet_forward(&z, PROBE_TIMESTEP, &self.null, &self.weights, None, None)?;
        let f = &out.features[PROBE_BLOCK];
        let (m, hw) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
        let mut v = Vec::with_capacity(2 * m);
        let mut sd = Vec::with_capacity(m);
        for c in 0..m {
            let row = &f.data()[c * hw..(c + 1) * hw];
            let mean = row.iter().sum::<f64>() / hw as f64;
            v.push(mean);
            sd.push((row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / hw as f64).sqrt());
        }
        v.extend(sd);
        Ok(v)
    }

    /// Feature relative to the mean class signature.
    pub fn feature(&self, img: &Tensor) -> Result<Vec<f64>> {
        Ok(self.raw_feature(img)?.iter().zip(&self.center).map(|(a, b)| a - b).collect())
    }

    pub fn signature(&self, class: &str) -> Result<Vec<f64>> {
        self.signatures
            .iter()
            .find(|(c, _)| c == class)
            .map(|(_, s)| s.iter().zip(&self.center).map(|(a, b)| a - b).collect())
            .ok_or_else(|| Error::Vocabulary(format!("no signature for class {class:?}")))
    }

    /// Standardized mean silhouette descriptor of `images`.
    pub fn silhouette(&self, images: &[Tensor]) -> Result<Vec<f64>> {
        let d = images.iter().map(silhouette_descriptor).collect::<Result<Vec<_>>>()?;
        Ok(self.silhouette_norm.apply(&mean_vec(&d)))
    }

    pub fn silhouette_signature(&self, class: &str) -> Result<Vec<f64>> {
        self.silhouettes
            .iter()
            .find(|(c, _)| c == class)
            .map(|(_, s)| s.clone())
            .ok_or_else(|| Error::Vocabulary(format!("no silhouette for class {class:?}")))
    }
}

/// First macro-class word in `prompt`.
pub fn prompt_class(prompt: &str, vocab: &Vocabulary) -> Result<String> {
    let tokens = tokenize(prompt, vocab)?;
    tokens.ids[..tokens.len]
        .iter()
        .find(|&&id| vocab.is_class(id))
        .and_then(|&id| vocab.word(id))
        .map(str::to_string)
        .ok_or_else(|| Error::Vocabulary(format!("prompt {prompt:?} names no known class")))
}

/// Cosine between the image's probe feature and the signature of the
/// prompt's class.
pub fn toy_text_alignment(image: &Tensor, prompt: &str, vocab: &Vocabulary, probe: &Probe) -> Result<f64> {
    let class = prompt_class(prompt, vocab)?;
    Ok(cosine(&probe.feature(image)?, &probe.signature(&class)?))
}

/// Arg-max of `cosine(query, signature)`; ties keep the lowest token id.
pub fn nearest_class(query: &[f64], candidates: &[(u32, String, Vec<f64>)]) -> Option<String> {
    let mut sorted: Vec<&(u32, String, Vec<f64>)> = candidates.iter().collect();
    sorted.sort_by_key(|c| c.0);
    let mut best: Option<(f64, &str)> = None;
    for (_, word, sig) in sorted {
        let s = cosine(query, sig);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, word));
        }
    }
    best.map(|(_, w)| w.to_string())
}

/// Picks the vocabulary class word whose silhouette signature best matches
/// the mean silhouette of the references.
pub fn macro_class_nn(references: &[Tensor], vocab: &Vocabulary, probe: &Probe) -> Result<String> {
    if references.is_empty() {
        return Err(Error::Input("macro-class selection needs references".into()));
    }
    let mut words: Vec<(u32, String)> = vocab.class_words().into_iter().map(|(i, w)| (i, w.to_string())).collect();
    if words.is_empty() {
        words = vocab.words().iter().enumerate().map(|(i, w)| (i as u32, w.clone())).collect();
    }
    if words.len() == 1 {
        return Ok(words.remove(0).1);
    }
    let query = probe.silhouette(references)?;
    let candidates = words
        .into_iter()
        .map(|(id, w)| probe.silhouette_signature(&w).map(|s| (id, w, s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(nearest_class(&query, &candidates).expect("non-empty candidates"))
}
