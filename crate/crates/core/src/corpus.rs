//! Sticker records, the emotion/style taxonomy, and a deterministic
//! synthetic corpus whose images are rendered from their annotations.
//!
//! Each synthetic sticker is a 32x32 RGB raster:
//!
//! * background colour keyed to the style label,
//! * an 8x8 glyph whose bitmap is keyed to the subject word, whose colour is
//!   keyed to the colour word and whose position is keyed to the action word
//!   (all three appear verbatim in the description),
//! * a 2-pixel border whose colour encodes the polarity and whose dash pattern
//!   encodes the lowest emotion id.
//!
//! A manifest on disk is a directory holding `manifest.json` (seed and schema
//! version), `index.jsonl` (one record per line) and `frames/<id>_<k>.png`.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const SCHEMA_VERSION: u32 = 1;

pub const N_EMOTIONS: usize = 30;
pub const N_POSITIVE: usize = 15;
pub const N_NEGATIVE: usize = 11;
pub const N_AMBIGUOUS: usize = 4;
pub const N_STYLES: usize = 5;

const GLYPH_CELLS: usize = 4;
const GLYPH_SCALE: usize = 2;
const BORDER: usize = 2;

pub const STYLE_NAMES: [&str; N_STYLES] =
    ["cute_cartoon", "pet_plush", "real_person", "pure_text", "harmful"];

const STYLE_BACKGROUNDS: [[u8; 3]; N_STYLES] = [
    [92, 60, 40],
    [30, 58, 96],
    [40, 92, 52],
    [104, 104, 104],
    [18, 18, 18],
];

pub const COLOR_WORDS: [&str; 8] =
    ["red", "green", "blue", "yellow", "purple", "cyan", "orange", "white"];

const GLYPH_COLORS: [[u8; 3]; 8] = [
    [232, 40, 40],
    [40, 204, 64],
    [48, 88, 236],
    [240, 220, 40],
    [156, 52, 208],
    [40, 224, 224],
    [252, 140, 20],
    [246, 246, 246],
];

pub const SUBJECT_WORDS: [&str; 12] = [
    "cat", "dog", "bear", "rabbit", "frog", "panda", "duck", "pig", "fox", "owl", "tiger",
    "mouse",
];

// 4x4 bitmaps, row-major, most significant bit first.
const SUBJECT_GLYPHS: [u16; 12] = [
    0b1001_1111_1011_0110,
    0b1111_1001_1001_1111,
    0b0110_1111_1111_0110,
    0b1010_1010_1110_0100,
    0b0000_1111_0000_1111,
    0b1100_1100_0011_0011,
    0b0100_1110_0100_0111,
    0b1111_0000_1111_0000,
    0b1000_0100_0010_0001,
    0b0001_0010_0100_1000,
    0b1010_0101_1010_0101,
    0b0011_0011_1100_1100,
];

pub const ACTION_WORDS: [&str; 6] = ["waving", "jumping", "sleeping", "crying", "laughing", "dancing"];

// Top-left corner (row, col) of the glyph.
const ACTION_POSITIONS: [(usize, usize); 6] = [(3, 3), (3, 21), (21, 3), (21, 21), (12, 12), (12, 3)];

const POLARITY_COLORS: [[u8; 3]; 3] = [[255, 180, 204], [120, 120, 255], [204, 204, 120]];

const DESCRIPTION_TEMPLATES: [&str; 3] = ["a {c} {s} {a}", "the {c} {s} is {a}", "{c} {s} {a} sticker"];

const OCR_PHRASES: [&[&str]; 3] = [
    &["haha", "love you", "so good", "yay", "thank you"],
    &["no way", "so sad", "go away", "ugh"],
    &["hmm", "what?", "ok...", "really"],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Ambiguous,
}

impl Polarity {
    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EmotionLabel(u8);

impl EmotionLabel {
    pub fn new(category_id: usize) -> Result<Self> {
        if category_id >= N_EMOTIONS {
            return Err(Error::invalid(format!("emotion id {category_id} outside 0..{N_EMOTIONS}")));
        }
        Ok(EmotionLabel(category_id as u8))
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn polarity(self) -> Polarity {
        match self.id() {
            i if i < N_POSITIVE => Polarity::Positive,
            i if i < N_POSITIVE + N_NEGATIVE => Polarity::Negative,
            _ => Polarity::Ambiguous,
        }
    }

    /// Id relative to the first id of its polarity block.
    fn local(self) -> usize {
        match self.polarity() {
            Polarity::Positive => self.id(),
            Polarity::Negative => self.id() - N_POSITIVE,
            Polarity::Ambiguous => self.id() - N_POSITIVE - N_NEGATIVE,
        }
    }

    pub fn name(self) -> String {
        let prefix = match self.polarity() {
            Polarity::Positive => "pos",
            Polarity::Negative => "neg",
            Polarity::Ambiguous => "ambig",
        };
        format!("{prefix}_{:02}", self.local())
    }

    pub fn all() -> impl Iterator<Item = EmotionLabel> {
        (0..N_EMOTIONS).map(|i| EmotionLabel(i as u8))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StyleLabel(u8);

impl StyleLabel {
    pub fn new(style_id: usize) -> Result<Self> {
        if style_id >= N_STYLES {
            return Err(Error::invalid(format!("style id {style_id} outside 0..{N_STYLES}")));
        }
        Ok(StyleLabel(style_id as u8))
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        STYLE_NAMES[self.id()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// An 8-bit RGB image, `IMAGE_SIZE x IMAGE_SIZE x 3`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pixels: Vec<u8>,
}

impl Raster {
    pub fn from_pixels(pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != IMAGE_SIZE * IMAGE_SIZE * CHANNELS {
            return Err(Error::Image(format!(
                "expected {} bytes, got {}",
                IMAGE_SIZE * IMAGE_SIZE * CHANNELS,
                pixels.len()
            )));
        }
        Ok(Raster { pixels })
    }

    fn solid(rgb: [u8; 3]) -> Self {
        Raster {
            pixels: rgb.repeat(IMAGE_SIZE * IMAGE_SIZE),
        }
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * IMAGE_SIZE + x) * CHANNELS;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let o = (y * IMAGE_SIZE + x) * CHANNELS;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// Channel value at `(y, x, c)` scaled to `[0, 1]`.
    pub fn value(&self, y: usize, x: usize, c: usize) -> f32 {
        f32::from(self.pixels[(y * IMAGE_SIZE + x) * CHANNELS + c]) / 255.0
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let img = image::RgbImage::from_raw(IMAGE_SIZE as u32, IMAGE_SIZE as u32, self.pixels.clone())
            .ok_or_else(|| Error::Image("raster buffer size".into()))?;
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(buf.into_inner())
    }

    /// Decodes any PNG and resizes it to the model resolution with bilinear
    /// filtering.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?
            .to_rgb8();
        let img = if img.dimensions() == (IMAGE_SIZE as u32, IMAGE_SIZE as u32) {
            img
        } else {
            image::imageops::resize(
                &img,
                IMAGE_SIZE as u32,
                IMAGE_SIZE as u32,
                image::imageops::FilterType::Triangle,
            )
        };
        Raster::from_pixels(img.into_raw())
    }

    /// Brightness-scaled, translated copy; pixels shifted in from outside the
    /// frame repeat the nearest edge.
    fn jittered(&self, brightness: f32, dy: isize, dx: isize) -> Self {
        let mut out = self.clone();
        let n = IMAGE_SIZE as isize;
        for y in 0..n {
            for x in 0..n {
                let sy = (y - dy).clamp(0, n - 1) as usize;
                let sx = (x - dx).clamp(0, n - 1) as usize;
                let src = self.pixel(sy, sx);
                let rgb = src.map(|v| (f32::from(v) * brightness).round().clamp(0.0, 255.0) as u8);
                out.put(y as usize, x as usize, rgb);
            }
        }
        out
    }
}

/// Attribute words that map one-to-one onto visible image features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Attributes {
    pub color: usize,
    pub subject: usize,
    pub action: usize,
}

impl Attributes {
    /// Recovers the attribute words from a description.
    pub fn parse(description: &str) -> Option<Self> {
        let mut color = None;
        let mut subject = None;
        let mut action = None;
        for word in description.split_whitespace() {
            color = color.or_else(|| COLOR_WORDS.iter().position(|w| *w == word));
            subject = subject.or_else(|| SUBJECT_WORDS.iter().position(|w| *w == word));
            action = action.or_else(|| ACTION_WORDS.iter().position(|w| *w == word));
        }
        Some(Attributes {
            color: color?,
            subject: subject?,
            action: action?,
        })
    }
}

/// Renders the base (first) frame of a sticker from its annotations.
pub fn render_sticker(attrs: Attributes, style: StyleLabel, lowest_emotion: EmotionLabel) -> Raster {
    let mut r = Raster::solid(STYLE_BACKGROUNDS[style.id()]);
    let glyph = SUBJECT_GLYPHS[attrs.subject];
    let color = GLYPH_COLORS[attrs.color];
    let (y0, x0) = ACTION_POSITIONS[attrs.action];
    for cy in 0..GLYPH_CELLS {
        for cx in 0..GLYPH_CELLS {
            let bit = 15 - (cy * GLYPH_CELLS + cx);
            if glyph >> bit & 1 == 1 {
                for dy in 0..GLYPH_SCALE {
                    for dx in 0..GLYPH_SCALE {
                        r.put(y0 + cy * GLYPH_SCALE + dy, x0 + cx * GLYPH_SCALE + dx, color);
                    }
                }
            }
        }
    }
    let border_color = POLARITY_COLORS[lowest_emotion.polarity().index()];
    let code = lowest_emotion.local() + 1;
    let n = IMAGE_SIZE;
    for y in 0..n {
        for x in 0..n {
            if y.min(x).min(n - 1 - y).min(n - 1 - x) >= BORDER {
                continue;
            }
            let t = if y < BORDER {
                x
            } else if x >= n - BORDER {
                n + y
            } else if y >= n - BORDER {
                2 * n + (n - 1 - x)
            } else {
                3 * n + (n - 1 - y)
            };
            if code >> ((t / 4) % 4) & 1 == 1 {
                r.put(y, x, border_color);
            }
        }
    }
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct StickerRecord {
    pub id: u32,
    pub frames: Vec<Raster>,
    pub description: String,
    pub ocr_text: String,
    /// Ascending, non-empty, without duplicates.
    pub emotions: Vec<EmotionLabel>,
    pub style: StyleLabel,
    pub split: Split,
}

impl StickerRecord {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::invalid(format!("record {} has no frames", self.id)));
        }
        if self.emotions.is_empty() {
            return Err(Error::invalid(format!("record {} has no emotion label", self.id)));
        }
        if self.emotions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("record {} emotions not strictly ascending", self.id)));
        }
        Ok(())
    }

    pub fn is_animated(&self) -> bool {
        self.frames.len() > 1
    }

    pub fn lowest_emotion(&self) -> EmotionLabel {
        self.emotions[0]
    }
}

/// Indices of the first, middle and last frames of an `n`-frame sticker.
pub fn frame_indices(n: usize) -> [usize; 3] {
    assert!(n >= 1, "a sticker has at least one frame");
    [0, (n - 1) / 2, n - 1]
}

/// First, middle and last frames.
pub fn select_frames(record: &StickerRecord) -> [&Raster; 3] {
    frame_indices(record.frames.len()).map(|i| &record.frames[i])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<StickerRecord>,
    pub seed: u64,
    pub schema_version: u32,
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train/test assignment: one id in every ten is held out, at a seed-dependent
/// phase.
pub fn split_for(seed: u64, id: u32) -> Split {
    let offset = mix(seed, 0x5eed) % 10;
    if (u64::from(id) + offset) % 10 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

/// Builds a deterministic synthetic corpus. Exactly
/// `round(n_records * animated_fraction)` stickers are animated with 3-5
/// frames; `(color, subject, action, style)` tuples are unique.
pub fn generate_synthetic_corpus(seed: u64, n_records: usize, animated_fraction: f64) -> Result<Manifest> {
    if n_records < 2 {
        return Err(Error::invalid("n_records must be at least 2"));
    }
    if !(0.0..=1.0).contains(&animated_fraction) {
        return Err(Error::invalid("animated_fraction must lie in [0, 1]"));
    }
    let mut combos: Vec<(usize, usize, usize, usize)> = Vec::new();
    for c in 0..COLOR_WORDS.len() {
        for s in 0..SUBJECT_WORDS.len() {
            for a in 0..ACTION_WORDS.len() {
                for st in 0..N_STYLES {
                    combos.push((c, s, a, st));
                }
            }
        }
    }
    if n_records > combos.len() {
        return Err(Error::invalid(format!(
            "at most {} distinct synthetic stickers exist",
            combos.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1));
    combos.shuffle(&mut rng);
    let n_animated = (n_records as f64 * animated_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n_records).collect();
    order.shuffle(&mut rng);
    let animated: HashSet<usize> = order[..n_animated].iter().copied().collect();

    let mut records = Vec::with_capacity(n_records);
    for (id, &(c, s, a, st)) in combos.iter().take(n_records).enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(mix(seed, 1000 + id as u64));
        let attrs = Attributes { color: c, subject: s, action: a };
        let style = StyleLabel(st as u8);
        let mut emotions = BTreeSet::new();
        emotions.insert(EmotionLabel(r.random_range(0..N_EMOTIONS) as u8));
        if r.random_bool(0.25) {
            emotions.insert(EmotionLabel(r.random_range(0..N_EMOTIONS) as u8));
        }
        let emotions: Vec<EmotionLabel> = emotions.into_iter().collect();
        let template = DESCRIPTION_TEMPLATES[r.random_range(0..DESCRIPTION_TEMPLATES.len())];
        let description = template
            .replace("{c}", COLOR_WORDS[c])
            .replace("{s}", SUBJECT_WORDS[s])
            .replace("{a}", ACTION_WORDS[a]);
        let ocr_text = if r.random_bool(0.2) {
            String::new()
        } else {
            let bank = OCR_PHRASES[emotions[0].polarity().index()];
            bank[r.random_range(0..bank.len())].to_string()
        };
        let base = render_sticker(attrs, style, emotions[0]);
        let mut frames = vec![base.clone()];
        if animated.contains(&id) {
            let n_frames = r.random_range(3..=5);
            for _ in 1..n_frames {
                let brightness = 1.0 + 0.08 * (r.random::<f32>() * 2.0 - 1.0);
                let dy = r.random_range(-1i32..=1) as isize;
                let dx = r.random_range(-1i32..=1) as isize;
                frames.push(base.jittered(brightness, dy, dx));
            }
        }
        records.push(StickerRecord {
            id: id as u32,
            frames,
            description,
            ocr_text,
            emotions,
            style,
            split: split_for(seed, id as u32),
        });
    }
    Ok(Manifest {
        records,
        seed,
        schema_version: SCHEMA_VERSION,
    })
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    id: u32,
    frames: Vec<String>,
    description: String,
    ocr_text: String,
    emotions: Vec<usize>,
    style: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct ManifestMeta {
    schema_version: u32,
    seed: u64,
    n_records: usize,
}

fn frame_file(id: u32, k: usize) -> String {
    format!("{id}_{k}.png")
}

impl Manifest {
    pub fn get(&self, id: u32) -> Option<&StickerRecord> {
        // Synthetic manifests are id-ordered from zero; fall back to a scan.
        match self.records.get(id as usize) {
            Some(r) if r.id == id => Some(r),
            _ => self.records.iter().find(|r| r.id == id),
        }
    }

    pub fn split(&self, split: Split) -> Vec<&StickerRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    fn index_line(record: &StickerRecord) -> IndexLine {
        IndexLine {
            id: record.id,
            frames: (0..record.frames.len()).map(|k| frame_file(record.id, k)).collect(),
            description: record.description.clone(),
            ocr_text: record.ocr_text.clone(),
            emotions: record.emotions.iter().map(|e| e.id()).collect(),
            style: record.style.id(),
            split: record.split,
        }
    }

    /// SHA-256 over the serialized index and every raster.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.schema_version.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        for r in &self.records {
            let line = serde_json::to_vec(&Self::index_line(r)).expect("index line serializes");
            h.update(&line);
            for f in &r.frames {
                h.update(f.pixels());
            }
        }
        hex(&h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let frames_dir = dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        let meta = ManifestMeta {
            schema_version: self.schema_version,
            seed: self.seed,
            n_records: self.records.len(),
        };
        let meta_path = dir.join("manifest.json");
        fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
        let index_path = dir.join("index.jsonl");
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, &Self::index_line(r))?;
            out.push(b'\n');
            for (k, f) in r.frames.iter().enumerate() {
                let p = frames_dir.join(frame_file(r.id, k));
                fs::write(&p, f.to_png()?).map_err(|e| Error::io(&p, e))?;
            }
        }
        let mut file = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
        file.write_all(&out).map_err(|e| Error::io(&index_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let meta_path = dir.join("manifest.json");
        let meta_bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ManifestMeta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Manifest {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        if meta.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: meta.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let index_path = dir.join("index.jsonl");
        let file = fs::File::open(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&index_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| Error::MalformedLine {
                path: index_path.clone(),
                line: n + 1,
                message,
            };
            let entry: IndexLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            if !seen.insert(entry.id) {
                return Err(malformed(format!("duplicate id {}", entry.id)));
            }
            let record = Self::record_from_line(dir, entry).map_err(|e| malformed(e.to_string()))?;
            records.push(record);
        }
        if records.is_empty() {
            return Err(Error::Manifest {
                path: index_path,
                message: "no records".into(),
            });
        }
        Ok(Manifest {
            records,
            seed: meta.seed,
            schema_version: meta.schema_version,
        })
    }

    fn record_from_line(dir: &Path, entry: IndexLine) -> Result<StickerRecord> {
        let mut frames = Vec::with_capacity(entry.frames.len());
        for name in &entry.frames {
            let p: PathBuf = dir.join("frames").join(name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                .map_err(|e| Error::Image(format!("{}: {e}", p.display())))?
                .to_rgb8();
            if img.dimensions() != (IMAGE_SIZE as u32, IMAGE_SIZE as u32) {
                return Err(Error::Image(format!("{} is not {IMAGE_SIZE}x{IMAGE_SIZE}", p.display())));
            }
            frames.push(Raster::from_pixels(img.into_raw())?);
        }
        let emotions = entry
            .emotions
            .iter()
            .map(|&e| EmotionLabel::new(e))
            .collect::<Result<Vec<_>>>()?;
        let record = StickerRecord {
            id: entry.id,
            frames,
            description: entry.description,
            ocr_text: entry.ocr_text,
            emotions,
            style: StyleLabel::new(entry.style)?,
            split: entry.split,
        };
        record.validate()?;
        Ok(record)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
