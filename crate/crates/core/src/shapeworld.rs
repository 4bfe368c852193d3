//! Procedural shape×texture images, dataset manifests, and triplet sampling.
//!
//! Every image is a 3×32×32 tensor: one filled shape on a flat gray
//! background, the shape filled with a texture. Shape and texture are the two
//! independent factors; triplets pair an anchor with a positive of the same
//! shape but a different texture, and a negative of a different shape.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::io;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_SHAPE: [usize; 3] = [CHANNELS, SIDE, SIDE];
pub const PIXELS: usize = CHANNELS * SIDE * SIDE;
pub const BACKGROUND: f64 = 0.5;

/// Allowed fraction of the image covered by the shape mask.
pub const MIN_AREA: f64 = 0.05;
pub const MAX_AREA: f64 = 0.80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeTag {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

impl ShapeTag {
    pub const ALL: [ShapeTag; 6] = [
        ShapeTag::Circle,
        ShapeTag::Square,
        ShapeTag::Triangle,
        ShapeTag::Cross,
        ShapeTag::Ring,
        ShapeTag::Diamond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeTag::Circle => "circle",
            ShapeTag::Square => "square",
            ShapeTag::Triangle => "triangle",
            ShapeTag::Cross => "cross",
            ShapeTag::Ring => "ring",
            ShapeTag::Diamond => "diamond",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureTag {
    Solid,
    Stripes,
    Checker,
    Noise,
    Gradient,
}

impl TextureTag {
    pub const ALL: [TextureTag; 5] = [
        TextureTag::Solid,
        TextureTag::Stripes,
        TextureTag::Checker,
        TextureTag::Noise,
        TextureTag::Gradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureTag::Solid => "solid",
            TextureTag::Stripes => "stripes",
            TextureTag::Checker => "checker",
            TextureTag::Noise => "noise",
            TextureTag::Gradient => "gradient",
        }
    }
}

impl fmt::Display for ShapeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for TextureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ShapeTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown shape `{s}`")))
    }
}

impl FromStr for TextureTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TextureTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown texture `{s}`")))
    }
}

/// A shape instance: `size` is the extent (diameter, side, or arm span) as a
/// fraction of the image width; `offset` moves the center, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeClass {
    pub tag: ShapeTag,
    pub size: f64,
    pub offset: [f64; 2],
}

impl ShapeClass {
    pub const SIZE_RANGE: (f64, f64) = (0.3, 0.8);

    pub fn centered(tag: ShapeTag, size: f64) -> Self {
        Self {
            tag,
            size,
            offset: [0.0, 0.0],
        }
    }

    /// Point-in-shape test in pixel coordinates (origin at the top-left
    /// corner, `y` pointing down).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let c = SIDE as f64 / 2.0;
        let dx = x - (c + self.offset[0]);
        let dy = y - (c + self.offset[1]);
        let half = self.size * SIDE as f64 / 2.0;
        match self.tag {
            ShapeTag::Circle => dx * dx + dy * dy <= half * half,
            ShapeTag::Square => dx.abs() <= half && dy.abs() <= half,
            ShapeTag::Triangle => dy.abs() <= half && dx.abs() <= (dy + half) / 2.0,
            ShapeTag::Cross => {
                let arm = half / 3.0;
                (dx.abs() <= half && dy.abs() <= arm) || (dy.abs() <= half && dx.abs() <= arm)
            }
            ShapeTag::Ring => {
                let r2 = dx * dx + dy * dy;
                r2 <= half * half && r2 >= half * half / 4.0
            }
            ShapeTag::Diamond => dx.abs() + dy.abs() <= half,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureClass {
    pub tag: TextureTag,
    /// Primary color; the secondary color is its complement `1 - color`.
    pub color: [f64; 3],
    /// Pattern frequency in cycles per image width.
    pub frequency: f64,
}

impl TextureClass {
    pub fn solid(color: [f64; 3]) -> Self {
        Self {
            tag: TextureTag::Solid,
            color,
            frequency: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTextureImage {
    pub pixels: Tensor,
    pub shape_label: ShapeTag,
    pub texture_label: TextureTag,
    pub seed: u64,
}

/// Per-render pattern details drawn from the image seed.
struct Pattern {
    angle: f64,
    phase: f64,
    noise: [[f64; 8]; 8],
}

impl Pattern {
    fn from_seed(seed: u64) -> Self {
        let mut r = rng::rng(rng::derive_str(seed, "pattern"));
        let angle = r.gen_range(0.0..std::f64::consts::PI);
        let phase = r.gen_range(0.0..1.0);
        let mut noise = [[0.0; 8]; 8];
        for row in &mut noise {
            for v in row.iter_mut() {
                *v = r.gen_range(0.0..1.0);
            }
        }
        Self {
            angle,
            phase,
            noise,
        }
    }

    /// Mixing weight toward the secondary color at pixel position `(x, y)`.
    fn mix(&self, tex: &TextureClass, shape: &ShapeClass, x: f64, y: f64) -> f64 {
        let w = SIDE as f64;
        let (s, c) = self.angle.sin_cos();
        match tex.tag {
            TextureTag::Solid => 0.0,
            TextureTag::Stripes => {
                let u = (x * c + y * s) / w * tex.frequency + self.phase;
                if u.rem_euclid(1.0) < 0.5 {
                    0.0
                } else {
                    1.0
                }
            }
            TextureTag::Checker => {
                let cell = w / (2.0 * tex.frequency);
                let i = ((x / cell) + self.phase).floor() as i64;
                let j = ((y / cell) + self.phase).floor() as i64;
                ((i + j).rem_euclid(2)) as f64
            }
            TextureTag::Noise => {
                let cell = w / (2.0 * tex.frequency);
                let i = ((x / cell).floor() as i64).rem_euclid(8) as usize;
                let j = ((y / cell).floor() as i64).rem_euclid(8) as usize;
                self.noise[j][i]
            }
            TextureTag::Gradient => {
                let cx = w / 2.0 + shape.offset[0];
                let cy = w / 2.0 + shape.offset[1];
                let extent = (shape.size * w).max(1.0);
                ((x - cx) * c + (y - cy) * s) / extent + 0.5
            }
        }
        .clamp(0.0, 1.0)
    }
}

const SUBSAMPLES: [(f64, f64); 4] = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];

/// Fraction of the image covered by the 2×2-supersampled mask.
pub fn mask_fraction(shape: &ShapeClass) -> f64 {
    let mut hits = 0usize;
    for py in 0..SIDE {
        for px in 0..SIDE {
            for (sx, sy) in SUBSAMPLES {
                if shape.contains(px as f64 + sx, py as f64 + sy) {
                    hits += 1;
                }
            }
        }
    }
    hits as f64 / (SIDE * SIDE * SUBSAMPLES.len()) as f64
}

/// Render one image. Deterministic in `(shape, texture, seed)`.
pub fn render_image(
    shape: &ShapeClass,
    texture: &TextureClass,
    seed: u64,
) -> Result<ShapeTextureImage> {
    let area = mask_fraction(shape);
    if !(MIN_AREA..=MAX_AREA).contains(&area) {
        return Err(Error::DegenerateShape(area));
    }
    let pattern = Pattern::from_seed(seed);
    let plane = SIDE * SIDE;
    let mut data = vec![0.0; PIXELS];
    for py in 0..SIDE {
        for px in 0..SIDE {
            let mut acc = [0.0; 3];
            for (sx, sy) in SUBSAMPLES {
                let (x, y) = (px as f64 + sx, py as f64 + sy);
                if shape.contains(x, y) {
                    let m = pattern.mix(texture, shape, x, y);
                    for (ch, a) in acc.iter_mut().enumerate() {
                        let c = texture.color[ch];
                        *a += c + m * (1.0 - 2.0 * c);
                    }
                } else {
                    acc.iter_mut().for_each(|a| *a += BACKGROUND);
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                data[ch * plane + py * SIDE + px] = (a / SUBSAMPLES.len() as f64).clamp(0.0, 1.0);
            }
        }
    }
    Ok(ShapeTextureImage {
        pixels: Tensor::new(IMAGE_SHAPE.to_vec(), data)?,
        shape_label: shape.tag,
        texture_label: texture.tag,
        seed,
    })
}

/// Draw shape and texture parameters for the given labels, resampling until
/// the mask area is admissible. Colors stay in `[0.1, 0.9]` and at least one
/// channel differs from the background by 0.25, so the shape is visible.
pub fn sample_params(rng: &mut Rng, shape: ShapeTag, texture: TextureTag) -> (ShapeClass, TextureClass) {
    let (lo, hi) = ShapeClass::SIZE_RANGE;
    let sc = loop {
        let candidate = ShapeClass {
            tag: shape,
            size: rng.gen_range(lo..hi),
            offset: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        };
        let area = mask_fraction(&candidate);
        if (MIN_AREA..=MAX_AREA).contains(&area) {
            break candidate;
        }
    };
    let color = loop {
        let c = [
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ];
        if c.iter().any(|v: &f64| (v - BACKGROUND).abs() >= 0.25) {
            break c;
        }
    };
    let tc = TextureClass {
        tag: texture,
        color,
        frequency: rng.gen_range(2.0..4.0),
    };
    (sc, tc)
}

/// Mirror an image left-right.
pub fn hflip(image: &Tensor) -> Tensor {
    let src = image.data();
    Tensor::from_fn(image.shape(), |i| {
        let x = i % SIDE;
        src[i - x + (SIDE - 1 - x)]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: usize,
    pub shape: ShapeClass,
    pub texture: TextureClass,
    pub seed: u64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_images: usize,
    pub shapes: Vec<ShapeTag>,
    pub textures: Vec<TextureTag>,
    pub seed: u64,
    pub val_fraction: f64,
    /// Size of the fixed triplet lists stored in the manifest.
    #[serde(default = "default_triplets")]
    pub train_triplets: usize,
    #[serde(default = "default_triplets")]
    pub val_triplets: usize,
}

fn default_triplets() -> usize {
    1000
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_images: 600,
            shapes: ShapeTag::ALL.to_vec(),
            textures: TextureTag::ALL.to_vec(),
            seed: 1,
            val_fraction: 0.2,
            train_triplets: default_triplets(),
            val_triplets: default_triplets(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.shapes.is_empty() || self.textures.is_empty() {
            return bad("shapes and textures must be nonempty".into());
        }
        let mut s = self.shapes.clone();
        s.sort();
        s.dedup();
        let mut t = self.textures.clone();
        t.sort();
        t.dedup();
        if s.len() != self.shapes.len() || t.len() != self.textures.len() {
            return bad("duplicate shape or texture tags".into());
        }
        let cells = self.shapes.len() * self.textures.len();
        if self.n_images < 2 * cells {
            return bad(format!(
                "n_images = {} is below 2 x {} shape/texture cells",
                self.n_images, cells
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction = {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical JSON form, as 16 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", rng::derive_str(0, &json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub config_hash: String,
    pub images: Vec<ImageRecord>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub train_triplets: Vec<Triplet>,
    pub val_triplets: Vec<Triplet>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn triplets(&self, split: Split) -> &[Triplet] {
        match split {
            Split::Train => &self.train_triplets,
            Split::Val => &self.val_triplets,
        }
    }

    pub fn shape_of(&self, id: usize) -> ShapeTag {
        self.images[id].shape.tag
    }

    pub fn texture_of(&self, id: usize) -> TextureTag {
        self.images[id].texture.tag
    }
}

/// A manifest plus its rendered images, indexed by image id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    pub fn image(&self, id: usize) -> &Tensor {
        &self.images[id]
    }

    pub fn sampler(&self, split: Split) -> Result<TripletSampler> {
        TripletSampler::new(&self.manifest, self.manifest.ids(split))
    }

    /// Per-pixel mean image over a split.
    pub fn mean_image(&self, split: Split) -> Tensor {
        let ids = self.manifest.ids(split);
        let mut acc = Tensor::zeros(&IMAGE_SHAPE);
        for &id in ids {
            for (a, v) in acc.data_mut().iter_mut().zip(self.images[id].data()) {
                *a += v;
            }
        }
        acc.scale(1.0 / ids.len().max(1) as f64)
    }

    /// Write `manifest.json` and one `STLB` file per image (plus PPM copies
    /// when `ppm` is set) under `dir`.
    pub fn save(&self, dir: &Path, ppm: bool) -> Result<()> {
        for (rec, img) in self.manifest.images.iter().zip(&self.images) {
            let path = dir.join(&rec.file);
            img.save(&path)?;
            if ppm {
                io::write_ppm(&path.with_extension("ppm"), img)?;
            }
        }
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        io::atomic_write(&dir.join(MANIFEST_FILE), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.clone()),
            _ => e.into(),
        })?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        let images = manifest
            .images
            .iter()
            .map(|rec| load_image(&dir.join(&rec.file)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images })
    }
}

/// Generate a stratified dataset. Image `i` lands in shape/texture cell
/// `i mod cells`, so every cell is populated and the two factors are exactly
/// balanced; the last `round(n · val_fraction)` ids form the validation split.
pub fn build_dataset(config: &DatasetConfig, exec: Exec) -> Result<Dataset> {
    config.validate()?;
    let n_tex = config.textures.len();
    let cells = config.shapes.len() * n_tex;
    let records: Vec<ImageRecord> = (0..config.n_images)
        .map(|id| {
            let cell = id % cells;
            let shape = config.shapes[cell / n_tex];
            let texture = config.textures[cell % n_tex];
            let seed = rng::derive(config.seed, id as u64);
            let (sc, tc) = sample_params(&mut rng::rng(seed), shape, texture);
            ImageRecord {
                id,
                shape: sc,
                texture: tc,
                seed,
                file: format!("images/{id:05}.stlb"),
            }
        })
        .collect();
    let images = exec
        .map(&records, |r| render_image(&r.shape, &r.texture, r.seed).map(|im| im.pixels))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let n_val = (config.n_images as f64 * config.val_fraction).round() as usize;
    let n_train = config.n_images - n_val;
    let train: Vec<usize> = (0..n_train).collect();
    let val: Vec<usize> = (n_train..config.n_images).collect();

    let mut manifest = DatasetManifest {
        config: config.clone(),
        config_hash: config.hash(),
        images: records,
        train,
        val,
        train_triplets: Vec::new(),
        val_triplets: Vec::new(),
    };
    for (split, count, label) in [
        (Split::Train, config.train_triplets, "train-triplets"),
        (Split::Val, config.val_triplets, "val-triplets"),
    ] {
        if count == 0 || manifest.ids(split).is_empty() {
            continue;
        }
        let sampler = TripletSampler::new(&manifest, manifest.ids(split))?;
        let mut r = rng::rng(rng::derive_str(config.seed, label));
        let list = (0..count).map(|_| sampler.sample(&mut r)).collect();
        match split {
            Split::Train => manifest.train_triplets = list,
            Split::Val => manifest.val_triplets = list,
        }
    }
    Ok(Dataset { manifest, images })
}

/// Uniform triplet sampling over one split.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    ids: Vec<usize>,
    labels: HashMap<usize, (ShapeTag, TextureTag)>,
    /// shape → ids of that shape.
    by_shape: BTreeMap<ShapeTag, Vec<usize>>,
}

impl TripletSampler {
    /// Requires at least two shapes, and at least two textures for every
    /// shape present.
    pub fn new(manifest: &DatasetManifest, ids: &[usize]) -> Result<Self> {
        let mut by_shape: BTreeMap<ShapeTag, Vec<usize>> = BTreeMap::new();
        let mut textures: BTreeMap<ShapeTag, Vec<TextureTag>> = BTreeMap::new();
        let mut labels = HashMap::with_capacity(ids.len());
        for &id in ids {
            let (s, t) = (manifest.shape_of(id), manifest.texture_of(id));
            by_shape.entry(s).or_default().push(id);
            let ts = textures.entry(s).or_default();
            if !ts.contains(&t) {
                ts.push(t);
            }
            labels.insert(id, (s, t));
        }
        if by_shape.len() < 2 {
            return Err(Error::InsufficientVariety(format!(
                "split has {} shape(s), need at least 2",
                by_shape.len()
            )));
        }
        if let Some((s, _)) = textures.iter().find(|(_, t)| t.len() < 2) {
            return Err(Error::InsufficientVariety(format!(
                "shape {s} has a single texture in this split"
            )));
        }
        Ok(Self {
            ids: ids.to_vec(),
            labels,
            by_shape,
        })
    }

    pub fn sample(&self, rng: &mut Rng) -> Triplet {
        let anchor = *self.ids.choose(rng).expect("sampler has ids");
        let (shape, texture) = self.labels[&anchor];
        let same = &self.by_shape[&shape];
        let positives: Vec<usize> = same
            .iter()
            .copied()
            .filter(|id| self.labels[id].1 != texture)
            .collect();
        let positive = *positives.choose(rng).expect("validated: >=2 textures per shape");
        let others = self.ids.len() - same.len();
        let mut k = rng.gen_range(0..others);
        let mut negative = usize::MAX;
        for (s, members) in &self.by_shape {
            if *s == shape {
                continue;
            }
            if k < members.len() {
                negative = members[k];
                break;
            }
            k -= members.len();
        }
        Triplet {
            anchor,
            positive,
            negative,
        }
    }
}

/// Load an image file (`.ppm` or `STLB`), resizing to 3×32×32 if needed.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingImage(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let img = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
        io::decode_ppm(&bytes)?
    } else {
        Tensor::read_from(&mut bytes.as_slice())?
    };
    if img.rank() != 3 || img.shape()[0] != CHANNELS {
        return Err(Error::Format(format!(
            "{}: expected a 3-channel image, got shape {:?}",
            path.display(),
            img.shape()
        )));
    }
    io::resize_bilinear(&img, SIDE, SIDE)
}

/// Triplets read from a CSV file, with their images cached once per path.
#[derive(Debug, Clone)]
pub struct ExternalTriplets {
    pub paths: Vec<PathBuf>,
    pub images: Vec<Tensor>,
    pub triplets: Vec<Triplet>,
}

/// Read a CSV with header `anchor,positive,negative` of image paths. Relative
/// paths resolve against the CSV's directory.
pub fn load_external_triplets(path: &Path) -> Result<ExternalTriplets> {
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(false)
        .from_path(path)?;
    let mut out = ExternalTriplets {
        paths: Vec::new(),
        images: Vec::new(),
        triplets: Vec::new(),
    };
    let mut cache: HashMap<PathBuf, usize> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        let cols: Vec<&str> = record.iter().map(str::trim).collect();
        if i == 0 {
            if cols != ["anchor", "positive", "negative"] {
                return Err(Error::MalformedRow {
                    line,
                    reason: "header must be `anchor,positive,negative`".into(),
                });
            }
            continue;
        }
        if cols.len() != 3 {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected 3 columns, found {}", cols.len()),
            });
        }
        let mut idx = [0usize; 3];
        for (slot, col) in idx.iter_mut().zip(&cols) {
            if col.is_empty() {
                return Err(Error::MalformedRow {
                    line,
                    reason: "empty image path".into(),
                });
            }
            let p = Path::new(col);
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            *slot = match cache.get(&full) {
                Some(&k) => k,
                None => {
                    let img = load_image(&full)?;
                    out.paths.push(full.clone());
                    out.images.push(img);
                    cache.insert(full, out.images.len() - 1);
                    out.images.len() - 1
                }
            };
        }
        out.triplets.push(Triplet {
            anchor: idx[0],
            positive: idx[1],
            negative: idx[2],
        });
    }
    Ok(out)
}

/// Write triplets as CSV rows of image paths (`image_root` joined with each
/// record's file).
pub fn export_triplets(
    manifest: &DatasetManifest,
    triplets: &[Triplet],
    image_root: &Path,
    csv_path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["anchor", "positive", "negative"])?;
    for t in triplets {
        let cols = [t.anchor, t.positive, t.negative]
            .map(|id| image_root.join(&manifest.images[id].file).to_string_lossy().into_owned());
        w.write_record(&cols)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    io::atomic_write(csv_path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            n_images: 60,
            shapes: vec![ShapeTag::Circle, ShapeTag::Square, ShapeTag::Ring],
            textures: vec![TextureTag::Solid, TextureTag::Stripes],
            seed: 5,
            val_fraction: 0.25,
            train_triplets: 50,
            val_triplets: 20,
        }
    }

    #[test]
    fn centered_circle_center_inside_corner_background() {
        let shape = ShapeClass::centered(ShapeTag::Circle, 1.0);
        let img = render_image(&shape, &TextureClass::solid([0.9, 0.1, 0.1]), 0).unwrap();
        let px = |c: usize, y: usize, x: usize| img.pixels.data()[c * SIDE * SIDE + y * SIDE + x];
        assert!((px(0, 16, 16) - 0.9).abs() < 1e-12);
        for c in 0..3 {
            assert_eq!(px(c, 0, 0), BACKGROUND);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut r = rng::rng(9);
        let (s, t) = sample_params(&mut r, ShapeTag::Cross, TextureTag::Noise);
        let a = render_image(&s, &t, 42).unwrap();
        let b = render_image(&s, &t, 42).unwrap();
        assert_eq!(a.pixels.data(), b.pixels.data());
    }

    #[test]
    fn half_width_square_covers_a_quarter() {
        let shape = ShapeClass::centered(ShapeTag::Square, 0.5);
        assert!((mask_fraction(&shape) - 0.25).abs() <= 0.01);
    }

    #[test]
    fn degenerate_shapes_are_rejected() {
        let tiny = ShapeClass::centered(ShapeTag::Triangle, 0.1);
        assert!(matches!(
            render_image(&tiny, &TextureClass::solid([0.2; 3]), 0),
            Err(Error::DegenerateShape(_))
        ));
    }

    #[test]
    fn sampled_params_always_render() {
        let mut r = rng::rng(0);
        for &s in &ShapeTag::ALL {
            for &t in &TextureTag::ALL {
                let (sc, tc) = sample_params(&mut r, s, t);
                let img = render_image(&sc, &tc, 1).unwrap();
                assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn two_by_two_split_forces_triplet_structure() {
        let cfg = DatasetConfig {
            n_images: 8,
            shapes: vec![ShapeTag::Circle, ShapeTag::Square],
            textures: vec![TextureTag::Solid, TextureTag::Stripes],
            seed: 1,
            val_fraction: 0.0,
            train_triplets: 0,
            val_triplets: 0,
        };
        let ds = build_dataset(&cfg, Exec::Sequential).unwrap();
        let m = &ds.manifest;
        let sampler = ds.sampler(Split::Train).unwrap();
        let mut r = rng::rng(2);
        for _ in 0..200 {
            let t = sampler.sample(&mut r);
            assert_eq!(m.shape_of(t.anchor), m.shape_of(t.positive));
            assert_ne!(m.texture_of(t.anchor), m.texture_of(t.positive));
            assert_ne!(m.shape_of(t.anchor), m.shape_of(t.negative));
        }
    }

    #[test]
    fn single_texture_split_is_insufficient() {
        let cfg = DatasetConfig {
            textures: vec![TextureTag::Checker],
            ..small_config()
        };
        let ds = build_dataset(
            &DatasetConfig {
                train_triplets: 0,
                val_triplets: 0,
                ..cfg
            },
            Exec::Sequential,
        )
        .unwrap();
        assert!(matches!(
            ds.sampler(Split::Train),
            Err(Error::InsufficientVariety(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.n_images = 11;
        assert!(matches!(c.validate(), Err(Error::ConfigInvalid(_))));
        let mut c = small_config();
        c.val_fraction = 1.5;
        assert!(matches!(c.validate(), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn zero_val_fraction_leaves_val_empty() {
        let cfg = DatasetConfig {
            val_fraction: 0.0,
            ..small_config()
        };
        let ds = build_dataset(&cfg, Exec::Sequential).unwrap();
        assert!(ds.manifest.val.is_empty());
        assert!(ds.manifest.val_triplets.is_empty());
        assert!(matches!(
            ds.sampler(Split::Val),
            Err(Error::InsufficientVariety(_))
        ));
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&small_config(), Exec::Sequential).unwrap();
        ds.save(dir.path(), true).unwrap();
        assert!(dir.path().join("images/00000.ppm").exists());
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert!(a.sub(b).unwrap().max() < 1e-7);
        }
    }

    #[test]
    fn external_triplets_parse_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&small_config(), Exec::Sequential).unwrap();
        ds.save(dir.path(), false).unwrap();
        let trips = &ds.manifest.val_triplets[..3];
        let csv_path = dir.path().join("t.csv");
        export_triplets(&ds.manifest, trips, Path::new(""), &csv_path).unwrap();
        let ext = load_external_triplets(&csv_path).unwrap();
        assert_eq!(ext.triplets.len(), 3);
        for (t, e) in trips.iter().zip(&ext.triplets) {
            assert!(ext.paths[e.anchor].ends_with(&ds.manifest.images[t.anchor].file));
            assert!(ext.paths[e.negative].ends_with(&ds.manifest.images[t.negative].file));
        }
    }

    #[test]
    fn two_column_row_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "anchor,positive,negative\na.stlb,b.stlb\n").unwrap();
        match load_external_triplets(&p) {
            Err(Error::MalformedRow { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MalformedRow, got {other:?}"),
        }
    }

    #[test]
    fn missing_image_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "anchor,positive,negative\na.stlb,b.stlb,c.stlb\n").unwrap();
        assert!(matches!(load_external_triplets(&p), Err(Error::MissingImage(_))));
    }
}
