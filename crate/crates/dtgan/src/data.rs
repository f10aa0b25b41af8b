//! Procedural captioned-shapes dataset and image file IO.
//!
//! Every sample is a flat-colored geometric shape on a plain background,
//! rendered without anti-aliasing, paired with a templated caption
//! ("a <size> <color> <shape> on a <background> background") tokenized over
//! an 18-word vocabulary. Rendering is a pure function of (spec, seed,
//! resolution), which makes the color of every image recoverable by a
//! pixel-counting oracle — the closure behind the training-time proxy
//! metrics.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{mix64, Rng};
use crate::tensor::Tensor;

// ── Attribute enums ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Purple,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::White, Color::Purple];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
            Color::Purple => "purple",
        }
    }

    /// RGB in [-1, 1].
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Purple => [1.0, -1.0, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Background {
    Black,
    Gray,
}

impl Background {
    pub const ALL: [Background; 2] = [Background::Black, Background::Gray];

    pub fn name(self) -> &'static str {
        match self {
            Background::Black => "black",
            Background::Gray => "gray",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Background::Black => [-1.0, -1.0, -1.0],
            Background::Gray => [0.0, 0.0, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CaptionSpec {
    pub color: Color,
    pub shape: Shape,
    pub size: Size,
    pub background: Background,
}

impl fmt::Display for CaptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.caption())
    }
}

impl CaptionSpec {
    /// All 96 attribute combinations, in a fixed order.
    pub fn all() -> Vec<CaptionSpec> {
        let mut out = Vec::with_capacity(96);
        for &color in &Color::ALL {
            for &shape in &Shape::ALL {
                for &size in &Size::ALL {
                    for &background in &Background::ALL {
                        out.push(CaptionSpec { color, shape, size, background });
                    }
                }
            }
        }
        out
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} {} on a {} background",
            self.size.name(),
            self.color.name(),
            self.shape.name(),
            self.background.name()
        )
    }

    pub fn tokens(&self) -> Vec<usize> {
        tokenize(&self.caption()).expect("template captions always tokenize")
    }
}

// ── Vocabulary ──────────────────────────────────────────────────────

pub const PAD_ID: usize = 0;
pub const SEQ_LEN: usize = 8;

/// Fixed 18-word vocabulary: pad, template words, and attribute words.
pub const VOCAB: [&str; 18] = [
    "<pad>", "a", "on", "background", "small", "large", "red", "green", "blue", "yellow",
    "white", "purple", "circle", "square", "triangle", "cross", "black", "gray",
];

pub fn token_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|&w| w == word)
}

/// Tokenize a caption, padding to [`SEQ_LEN`]. Unknown words are an error
/// listing the vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(SEQ_LEN);
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let id = token_id(&lower).ok_or_else(|| {
            Error::invalid(format!(
                "unknown word '{lower}'; vocabulary: {}",
                VOCAB[1..].join(", ")
            ))
        })?;
        ids.push(id);
    }
    if ids.len() > SEQ_LEN {
        return Err(Error::invalid(format!(
            "caption has {} words, maximum is {SEQ_LEN}",
            ids.len()
        )));
    }
    ids.resize(SEQ_LEN, PAD_ID);
    Ok(ids)
}

// ── Rendering ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct CaptionedSample {
    /// [3, R, R] in [-1, 1].
    pub image: Tensor,
    pub tokens: Vec<usize>,
    pub spec: CaptionSpec,
    pub seed: u64,
}

fn shape_extent(shape: Shape, size: Size) -> f64 {
    // Fractions of R chosen so the rasterized foreground stays within
    // 20%..60% of the pixels for every spec, jitter included.
    match (shape, size) {
        (Shape::Circle, Size::Small) => 0.28,   // radius
        (Shape::Circle, Size::Large) => 0.39,
        (Shape::Square, Size::Small) => 0.25,   // half side
        (Shape::Square, Size::Large) => 0.375,
        (Shape::Triangle, Size::Small) => 0.44, // circumradius
        (Shape::Triangle, Size::Large) => 0.49,
        (Shape::Cross, Size::Small) => 0.33,    // arm half length
        (Shape::Cross, Size::Large) => 0.45,
    }
}

/// Rasterize one spec at resolution R with seeded jitter: position moves by
/// up to ±10% of R, triangles and crosses also rotate freely.
pub fn render(spec: CaptionSpec, resolution: usize, seed: u64) -> Result<CaptionedSample> {
    if ![16, 32, 64].contains(&resolution) {
        return Err(Error::invalid(format!(
            "render: unsupported resolution {resolution} (expected 16, 32 or 64)"
        )));
    }
    let r = resolution as f64;
    let mut rng = Rng::seed_from(seed);
    let cx = r / 2.0 + 0.1 * r * rng.next_uniform(-1.0, 1.0);
    let cy = r / 2.0 + 0.1 * r * rng.next_uniform(-1.0, 1.0);
    let theta = match spec.shape {
        Shape::Triangle | Shape::Cross => rng.next_uniform(0.0, std::f64::consts::TAU),
        _ => 0.0,
    };
    let (sin_t, cos_t) = theta.sin_cos();
    let extent = shape_extent(spec.shape, spec.size) * r;

    let inside = |px: f64, py: f64| -> bool {
        let dx = px - cx;
        let dy = py - cy;
        match spec.shape {
            Shape::Circle => dx * dx + dy * dy <= extent * extent,
            Shape::Square => dx.abs() <= extent && dy.abs() <= extent,
            Shape::Triangle => {
                // Rotate into shape frame; equilateral triangle with
                // circumradius `extent`, one vertex up.
                let x = dx * cos_t + dy * sin_t;
                let y = -dx * sin_t + dy * cos_t;
                let verts = [
                    (0.0, -extent),
                    (extent * (3.0f64).sqrt() / 2.0, extent / 2.0),
                    (-extent * (3.0f64).sqrt() / 2.0, extent / 2.0),
                ];
                let sign = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d0 = sign(verts[0], verts[1]);
                let d1 = sign(verts[1], verts[2]);
                let d2 = sign(verts[2], verts[0]);
                let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(has_neg && has_pos)
            }
            Shape::Cross => {
                let x = dx * cos_t + dy * sin_t;
                let y = -dx * sin_t + dy * cos_t;
                let width = extent * 0.42; // bar half width
                (x.abs() <= extent && y.abs() <= width) || (y.abs() <= extent && x.abs() <= width)
            }
        }
    };

    let fg = spec.color.rgb();
    let bg = spec.background.rgb();
    let mut data = vec![0.0; 3 * resolution * resolution];
    for row in 0..resolution {
        for col in 0..resolution {
            let hit = inside(col as f64 + 0.5, row as f64 + 0.5);
            let rgb = if hit { fg } else { bg };
            for (ch, &v) in rgb.iter().enumerate() {
                data[(ch * resolution + row) * resolution + col] = v;
            }
        }
    }
    Ok(CaptionedSample {
        image: Tensor::from_vec(data, &[3, resolution, resolution]),
        tokens: spec.tokens(),
        spec,
        seed,
    })
}

// ── Dataset ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<CaptionedSample>,
    pub resolution: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stack sample images at the given indices into one [N,3,R,R] batch.
    pub fn batch_images(&self, indices: &[usize]) -> Result<Tensor> {
        let views: Vec<Tensor> = indices
            .iter()
            .map(|&i| self.samples[i].image.reshape(&[1, 3, self.resolution, self.resolution]))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = views.iter().collect();
        Tensor::concat(&refs, 0)
    }

    pub fn batch_tokens(&self, indices: &[usize]) -> Vec<Vec<usize>> {
        indices.iter().map(|&i| self.samples[i].tokens.clone()).collect()
    }

    pub fn batch_specs(&self, indices: &[usize]) -> Vec<CaptionSpec> {
        indices.iter().map(|&i| self.samples[i].spec).collect()
    }
}

/// Build train/test splits. Specs are sampled uniformly (or cycled through
/// all 96 when `stratified`); the test split draws its jitter seeds from a
/// disjoint stream so no test image can appear in training.
pub fn make_split(
    n_train: usize,
    n_test: usize,
    resolution: usize,
    master_seed: u64,
    stratified: bool,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid("make_split: splits must be non-empty"));
    }
    let specs = CaptionSpec::all();
    let mut pick_rng = Rng::derive(master_seed, 0xda7a);
    let mut build = |n: usize, salt: u64| -> Result<Vec<CaptionedSample>> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let spec = if stratified {
                specs[i % specs.len()]
            } else {
                specs[pick_rng.next_index(specs.len())]
            };
            let jitter_seed = mix64(master_seed ^ mix64(2 * i as u64 + salt));
            out.push(render(spec, resolution, jitter_seed)?);
        }
        Ok(out)
    };
    // Even/odd seed slots keep train and test jitters disjoint.
    let train = Dataset { samples: build(n_train, 0)?, resolution };
    let test = Dataset { samples: build(n_test, 1)?, resolution };
    Ok((train, test))
}

/// Mismatched-sentence assignment: cyclic shift by one, pushing further for
/// any index whose shifted spec collides with its own.
pub fn mismatch_indices(specs: &[CaptionSpec]) -> Result<Vec<usize>> {
    let n = specs.len();
    if n < 2 {
        return Err(Error::invalid("mismatch: batch size must be at least 2"));
    }
    if specs.iter().all(|s| s == &specs[0]) {
        return Err(Error::invalid("mismatch: all specs identical, cannot mismatch"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut k = 1;
        while specs[(i + k) % n] == specs[i] {
            k += 1;
        }
        out.push((i + k) % n);
    }
    Ok(out)
}

/// Line-oriented manifest: `seed<TAB>color<TAB>shape<TAB>size<TAB>background`.
pub fn write_manifest(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut text = String::new();
    for s in &dataset.samples {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            s.seed,
            s.spec.color.name(),
            s.spec.shape.name(),
            s.spec.size.name(),
            s.spec.background.name()
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── Color oracle ────────────────────────────────────────────────────

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn pixel_rgb(img: &Tensor, row: usize, col: usize) -> [f64; 3] {
    [img.at(&[0, row, col]), img.at(&[1, row, col]), img.at(&[2, row, col])]
}

/// Per-pixel foreground mask: a pixel is foreground when it sits closer to
/// one of the six shape colors than to both background colors.
pub fn foreground_mask(img: &Tensor) -> Vec<bool> {
    let r = img.shape()[1];
    let mut mask = Vec::with_capacity(r * r);
    for row in 0..r {
        for col in 0..r {
            let px = pixel_rgb(img, row, col);
            let fg_best = Color::ALL.iter().map(|c| dist2(px, c.rgb())).fold(f64::INFINITY, f64::min);
            let bg_best = Background::ALL.iter().map(|b| dist2(px, b.rgb())).fold(f64::INFINITY, f64::min);
            mask.push(fg_best < bg_best);
        }
    }
    mask
}

/// Dominant foreground color: mean RGB over foreground pixels, snapped to
/// the nearest shape color. Falls back to the whole-image mean when nothing
/// classifies as foreground, so a prediction always exists.
pub fn dominant_foreground_color(img: &Tensor) -> Color {
    let r = img.shape()[1];
    let mask = foreground_mask(img);
    let mut mean = [0.0; 3];
    let mut count = 0usize;
    for row in 0..r {
        for col in 0..r {
            if mask[row * r + col] {
                let px = pixel_rgb(img, row, col);
                for i in 0..3 {
                    mean[i] += px[i];
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        for row in 0..r {
            for col in 0..r {
                let px = pixel_rgb(img, row, col);
                for i in 0..3 {
                    mean[i] += px[i];
                }
            }
        }
        count = r * r;
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    *Color::ALL
        .iter()
        .min_by(|a, b| dist2(mean, a.rgb()).partial_cmp(&dist2(mean, b.rgb())).unwrap())
        .unwrap()
}

// ── PPM IO ──────────────────────────────────────────────────────────

fn to_byte(v: f64) -> u8 {
    let scaled = (v + 1.0) / 2.0 * 255.0;
    scaled.round().clamp(0.0, 255.0) as u8
}

/// Write a [3,R,R] tensor in [-1,1] as binary PPM (P6, maxval 255).
pub fn write_ppm(img: &Tensor, path: &Path) -> Result<()> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "write_ppm",
            detail: format!("expected [3,H,W], got {:?}", img.shape()),
        });
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut bytes = Vec::with_capacity(32 + 3 * h * w);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for row in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                bytes.push(to_byte(img.at(&[ch, row, col])));
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a binary PPM back to a [3,H,W] tensor in [-1,1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |msg: &str| Error::invalid(format!("{}: {msg}", path.display()));
    // Header: three whitespace-separated fields after the magic.
    let mut pos = 0usize;
    let mut next_field = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::invalid(format!("{}: truncated header", path.display())));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if next_field(&bytes)? != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let w: usize = next_field(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = next_field(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    if next_field(&bytes)? != "255" {
        return Err(bad("expected maxval 255"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + 3 * w * h {
        return Err(bad("truncated pixel data"));
    }
    let mut data = vec![0.0; 3 * h * w];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                let b = bytes[pos + (row * w + col) * 3 + ch];
                data[(ch * h + row) * w + col] = b as f64 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(data, &[3, h, w]))
}

/// Tile images (all [3,R,R]) into a grid with `cols` columns.
pub fn montage(images: &[Tensor], cols: usize) -> Result<Tensor> {
    if images.is_empty() || cols == 0 {
        return Err(Error::invalid("montage: nothing to lay out"));
    }
    let r = images[0].shape()[1];
    let rows = images.len().div_ceil(cols);
    let mut data = vec![-1.0; 3 * rows * r * cols * r];
    let (gh, gw) = (rows * r, cols * r);
    for (idx, img) in images.iter().enumerate() {
        let (tile_r, tile_c) = (idx / cols, idx % cols);
        for ch in 0..3 {
            for row in 0..r {
                for col in 0..r {
                    let grow = tile_r * r + row;
                    let gcol = tile_c * r + col;
                    data[(ch * gh + grow) * gw + gcol] = img.at(&[ch, row, col]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, &[3, gh, gw]))
}
