//! Synthetic sprite corpus: pretraining images, concept reference sets,
//! image I/O and dataset manifests.

mod image;
mod sprites;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::TrainExample;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use crate::text::{build_vocab, tokenize, Vocabulary};

pub use image::{decode_ppm, encode_ppm, from_u8, load_image, load_pgm, save_image, save_pgm, to_u8};
pub use sprites::{
    background, color_distance, render, shape_of, Rgb, Shape, SpriteParams, Texture, BACKGROUNDS, CLASSES,
    IMAGE_SIZE, PALETTE, TEXTURES,
};

pub const MIN_CORPUS: usize = 64;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const FUNCTION_WORDS: [&str; 7] = ["a", "photo", "of", "the", "on", "in", "at"];
/// Minimum L1 distance (8-bit units) between a sprite color and its background.
const MIN_BG_CONTRAST: u32 = 150;
const MIN_COLOR_CONTRAST: u32 = 120;

/// The shipped vocabulary: caption words, class words flagged as macro classes.
pub fn toy_vocabulary(d_txt: usize, seed: u64) -> Result<Vocabulary> {
    let mut words: Vec<&str> = FUNCTION_WORDS.to_vec();
    words.extend(CLASSES.iter().map(|(c, _)| *c));
    words.extend(BACKGROUNDS.iter().map(|(b, _, _)| *b));
    let mut v = build_vocab(&words, d_txt, seed)?;
    v.set_class_words(&CLASSES.iter().map(|(c, _)| *c).collect::<Vec<_>>())?;
    Ok(v)
}

pub fn class_names() -> Vec<&'static str> {
    CLASSES.iter().map(|(c, _)| *c).collect()
}

/// One generated image with its caption.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub image: Tensor,
    pub caption: String,
    pub class: String,
    pub background: String,
}

impl From<&CorpusItem> for TrainExample {
    fn from(c: &CorpusItem) -> Self {
        TrainExample {
            image: c.image.clone(),
            caption: c.caption.clone(),
        }
    }
}

fn pick_colors(r: &mut Stream, bg: Rgb) -> [Rgb; 2] {
    let ok: Vec<Rgb> = PALETTE
        .iter()
        .map(|(_, c)| *c)
        .filter(|c| color_distance(*c, bg) >= MIN_BG_CONTRAST)
        .collect();
    loop {
        let a = ok[rng::uniform_index(r, ok.len())];
        let b = ok[rng::uniform_index(r, ok.len())];
        if color_distance(a, b) >= MIN_COLOR_CONTRAST {
            return [a, b];
        }
    }
}

fn random_center(r: &mut Stream, radius: i32) -> (i32, i32) {
    let lo = radius + 1;
    let span = (IMAGE_SIZE as i32 - 2 * lo) as usize;
    (
        lo + rng::uniform_index(r, span) as i32,
        lo + rng::uniform_index(r, span) as i32,
    )
}

/// A sprite of `class` with random identity, position and background.
fn random_class_item(r: &mut Stream, class: &str, with_background_phrase: bool) -> Result<CorpusItem> {
    let shape = shape_of(class)?;
    let (bg_name, phrase, bg) = BACKGROUNDS[rng::uniform_index(r, BACKGROUNDS.len())];
    let radius = 6 + rng::uniform_index(r, 3) as i32;
    let params = SpriteParams {
        shape,
        colors: pick_colors(r, bg),
        texture: TEXTURES[rng::uniform_index(r, TEXTURES.len())],
        radius,
        center: random_center(r, radius),
        background: bg,
    };
    let caption = if with_background_phrase {
        format!("a photo of a {class} {phrase}")
    } else {
        format!("a photo of a {class}")
    };
    Ok(CorpusItem {
        image: render(&params),
        caption,
        class: class.to_string(),
        background: bg_name.to_string(),
    })
}

/// `n` captioned sprites over every class and background.
pub fn gen_pretrain_corpus(seed: u64, n: usize) -> Result<Vec<CorpusItem>> {
    if n < MIN_CORPUS {
        return Err(Error::Input(format!("corpus needs at least {MIN_CORPUS} images, got {n}")));
    }
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, "pretrain-corpus", i as u64);
            let class = CLASSES[rng::uniform_index(&mut r, CLASSES.len())].0;
            let phrase = rng::bernoulli(&mut r, 0.5);
            random_class_item(&mut r, class, phrase)
        })
        .collect()
}

/// Same-class distractor sprites (random identity), captioned with the class.
pub fn gen_class_images(class: &str, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &format!("class-images-{class}"), i as u64);
            random_class_item(&mut r, class, false).map(|c| c.image)
        })
        .collect()
}

/// Identity of one personalized concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub id: String,
    pub macro_class: String,
    /// Palette names of the two identity colors.
    pub colors: [String; 2],
    pub texture: Texture,
    pub radius: i32,
    /// Background names to draw from; empty means every compatible one.
    #[serde(default)]
    pub backgrounds: Vec<String>,
    #[serde(default = "default_reference_count")]
    pub reference_count: usize,
}

fn default_reference_count() -> usize {
    4
}

pub fn palette_color(name: &str) -> Result<Rgb> {
    PALETTE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::Input(format!("unknown palette color {name:?}")))
}

impl ConceptSpec {
    /// Three fixed concepts used by tests and examples.
    pub fn presets() -> Vec<ConceptSpec> {
        let mk = |id: &str, class: &str, a: &str, b: &str, texture, radius| ConceptSpec {
            id: id.into(),
            macro_class: class.into(),
            colors: [a.into(), b.into()],
            texture,
            radius,
            backgrounds: Vec::new(),
            reference_count: 4,
        };
        vec![
            mk("spotted_dog", "dog", "red", "yellow", Texture::Checker, 8),
            mk("striped_car", "car", "blue", "orange", Texture::HStripes, 8),
            mk("split_cat", "cat", "purple", "white", Texture::Split, 8),
        ]
    }

    pub fn rgb(&self) -> Result<[Rgb; 2]> {
        Ok([palette_color(&self.colors[0])?, palette_color(&self.colors[1])?])
    }

    pub fn validate(&self) -> Result<()> {
        shape_of(&self.macro_class)?;
        let [a, b] = self.rgb()?;
        if a == b {
            return Err(Error::Input("identity colors must differ".into()));
        }
        if !(4..=10).contains(&self.radius) {
            return Err(Error::Input(format!("radius {} outside 4..=10", self.radius)));
        }
        if self.reference_count == 0 || self.reference_count > crate::residuals::MAX_REFERENCES {
            return Err(Error::Input(format!("reference count {} outside 1..=10", self.reference_count)));
        }
        for b in &self.backgrounds {
            background(b)?;
        }
        Ok(())
    }

    /// Backgrounds that contrast with both identity colors.
    pub fn compatible_backgrounds(&self) -> Result<Vec<&'static str>> {
        let [a, b] = self.rgb()?;
        Ok(BACKGROUNDS
            .iter()
            .filter(|(n, _, c)| {
                (self.backgrounds.is_empty() || self.backgrounds.iter().any(|x| x == n))
                    && color_distance(a, *c) >= MIN_BG_CONTRAST
                    && color_distance(b, *c) >= MIN_BG_CONTRAST
            })
            .map(|(n, _, _)| *n)
            .collect())
    }

    pub fn sprite(&self, center: (i32, i32), bg: Rgb) -> Result<SpriteParams> {
        Ok(SpriteParams {
            shape: shape_of(&self.macro_class)?,
            colors: self.rgb()?,
            texture: self.texture,
            radius: self.radius,
            center,
            background: bg,
        })
    }
}

/// Reference images sharing the concept's identity, each on a different
/// background and at a different position.
pub fn gen_concept(spec: &ConceptSpec, seed: u64) -> Result<Vec<CorpusItem>> {
    spec.validate()?;
    let mut bgs = spec.compatible_backgrounds()?;
    if bgs.len() < spec.reference_count {
        return Err(Error::Input(format!(
            "concept {} has {} compatible backgrounds for {} references",
            spec.id,
            bgs.len(),
            spec.reference_count
        )));
    }
    let mut r = rng::stream(seed, &format!("concept-{}", spec.id), 0);
    for i in (1..bgs.len()).rev() {
        bgs.swap(i, rng::uniform_index(&mut r, i + 1));
    }
    bgs.truncate(spec.reference_count);
    bgs.iter()
        .map(|name| {
            let (phrase, rgb) = background(name)?;
            let params = spec.sprite(random_center(&mut r, spec.radius), rgb)?;
            Ok(CorpusItem {
                image: render(&params),
                caption: format!("a photo of a V* {} {phrase}", spec.macro_class),
                class: spec.macro_class.clone(),
                background: name.to_string(),
            })
        })
        .collect()
}

/// Procedural sprites of `class` used as its text-alignment signature.
pub fn class_probe_sprites(class: &str, n: usize) -> Result<Vec<Tensor>> {
    gen_class_images(class, n, 0x0515_77e5)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub caption: String,
    pub split: String,
    pub concept: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

/// Writes images as `NNNN.ppm` plus `manifest.json` with relative paths.
pub fn write_dataset(dir: &Path, items: &[CorpusItem], split: &str, concept: Option<&str>) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let name = format!("{i:04}.ppm");
        save_image(&item.image, &dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name,
            caption: item.caption.clone(),
            split: split.to_string(),
            concept: concept.map(str::to_string),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a manifest and its images, checking that every path resolves.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Tensor>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    let images = manifest
        .entries
        .iter()
        .map(|e| load_image(&dir.join(&e.path)))
        .collect::<Result<_>>()?;
    Ok((manifest, images))
}

/// Every `.ppm` in a directory, sorted by name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(PathBuf, Tensor)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    paths.into_iter().map(|p| load_image(&p).map(|t| (p, t))).collect()
}

/// Checks every caption against the vocabulary; returns how many carry
/// concept tokens.
pub fn check_captions(manifest: &DatasetManifest, vocab: &Vocabulary) -> Result<usize> {
    let mut with_concept = 0;
    for e in &manifest.entries {
        if !tokenize(&e.caption, vocab)?.concept_indices.is_empty() {
            with_concept += 1;
        }
    }
    Ok(with_concept)
}

/// Background estimate: per-channel median over the image border.
pub fn estimate_background(img: &Tensor) -> Result<Rgb> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::dim("estimate_background", s, &[3, 0, 0])),
    };
    let d = img.data();
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let mut border: Vec<u8> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| y == 0 || x == 0 || y + 1 == h || x + 1 == w)
            .map(|(y, x)| to_u8(d[c * h * w + y * w + x]))
            .collect();
        border.sort_unstable();
        *o = border[border.len() / 2];
    }
    Ok(out)
}

/// Pixels whose color differs from the background estimate.
pub fn sprite_mask(img: &Tensor) -> Result<Vec<bool>> {
    let bg = estimate_background(img)?;
    let n = img.numel() / 3;
    let d = img.data();
    Ok((0..n)
        .map(|p| color_distance([to_u8(d[p]), to_u8(d[n + p]), to_u8(d[2 * n + p])], bg) > 60)
        .collect())
}

/// Position-independent identity attributes recovered from an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub colors: BTreeSet<Rgb>,
    pub area: usize,
    /// Normalized central moments `(μ20, μ02, μ11) / area²`.
    pub moments: [f64; 3],
    /// Pixel counts of the sprite colors, ordered as `colors`.
    pub color_counts: Vec<usize>,
}

pub fn extract_identity(img: &Tensor) -> Result<Identity> {
    let mask = sprite_mask(img)?;
    let side = (mask.len() as f64).sqrt() as usize;
    let n = mask.len();
    let d = img.data();
    let mut colors = std::collections::BTreeMap::new();
    let (mut sx, mut sy, mut area) = (0.0, 0.0, 0usize);
    for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let rgb = [to_u8(d[p]), to_u8(d[n + p]), to_u8(d[2 * n + p])];
        *colors.entry(rgb).or_insert(0usize) += 1;
        sx += (p % side) as f64;
        sy += (p / side) as f64;
        area += 1;
    }
    let mut moments = [0.0; 3];
    if area > 0 {
        let (cx, cy) = (sx / area as f64, sy / area as f64);
        for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            let (x, y) = ((p % side) as f64 - cx, (p / side) as f64 - cy);
            moments[0] += x * x;
            moments[1] += y * y;
            moments[2] += x * y;
        }
        let a2 = (area * area) as f64;
        for m in &mut moments {
            *m /= a2;
        }
    }
    Ok(Identity {
        colors: colors.keys().copied().collect(),
        color_counts: colors.values().copied().collect(),
        area,
        moments,
    })
}
