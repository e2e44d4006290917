//! Deterministic synthetic audio-visual scenes.
//!
//! Each category pairs a coloured sprite with a pure tone. A solo scene puts
//! one sprite on a randomly tinted, blocky 224×224 background; multi-source
//! scenes concatenate solo frames left to right and sum their waveforms.
//! Scenes are written to disk as PNG + 16-bit WAV and indexed by a JSON-lines
//! manifest.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::frontend::{concat_frames, mix_waveforms, Image, Waveform, CLIP_SECONDS, FRAME_SIZE, SAMPLE_RATE};

/// Per-source tone amplitude; three summed sources stay inside 16-bit range.
pub const TONE_AMPLITUDE: f64 = 0.3;
pub const MIN_SPRITE: usize = 72;
pub const MAX_SPRITE: usize = 112;
/// Range of the per-channel background base level.
pub const BACKGROUND_TINT: (f64, f64) = (0.2, 0.7);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sprite {
    Circle,
    Square,
    Triangle,
    Pentagon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub category_id: usize,
    pub sprite: Sprite,
    pub color: [f64; 3],
    pub tone_hz: f64,
}

pub fn default_categories() -> Vec<CategorySpec> {
    vec![
        CategorySpec { category_id: 0, sprite: Sprite::Circle, color: [0.90, 0.15, 0.15], tone_hz: 440.0 },
        CategorySpec { category_id: 1, sprite: Sprite::Square, color: [0.15, 0.80, 0.20], tone_hz: 660.0 },
        CategorySpec { category_id: 2, sprite: Sprite::Triangle, color: [0.15, 0.30, 0.90], tone_hz: 880.0 },
        CategorySpec { category_id: 3, sprite: Sprite::Pentagon, color: [0.90, 0.85, 0.10], tone_hz: 1100.0 },
    ]
}

fn validate_categories(categories: &[CategorySpec]) -> Result<()> {
    if categories.is_empty() {
        return invalid("category table is empty");
    }
    let c = categories.len();
    let mut seen = vec![false; c];
    for cat in categories {
        if cat.category_id >= c || seen[cat.category_id] {
            return invalid(format!("category id {} is out of range or repeated", cat.category_id));
        }
        seen[cat.category_id] = true;
    }
    for (i, a) in categories.iter().enumerate() {
        if categories[i + 1..].iter().any(|b| b.tone_hz == a.tone_hz) {
            return invalid(format!("tone {} Hz used by more than one category", a.tone_hz));
        }
    }
    Ok(())
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl From<[usize; 4]> for BBox {
    fn from([x0, y0, x1, y1]: [usize; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn area(&self) -> usize {
        self.x1.saturating_sub(self.x0) * self.y1.saturating_sub(self.y0)
    }

    pub fn offset_x(&self, dx: usize) -> Self {
        Self { x0: self.x0 + dx, x1: self.x1 + dx, ..*self }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    /// Binary `height × width` mask of the box.
    pub fn mask(&self, height: usize, width: usize) -> Array2<bool> {
        Array2::from_shape_fn((height, width), |(y, x)| {
            x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub category: usize,
    pub bbox: BBox,
    pub waveform: Waveform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub sources: Vec<Source>,
    pub mixture: Waveform,
    pub label_vector: Vec<u8>,
    pub seed: u64,
}

impl SceneSample {
    pub fn categories(&self) -> Vec<usize> {
        self.sources.iter().map(|s| s.category).collect()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.sources.iter().map(|s| s.bbox).collect()
    }
}

pub fn label_vector(categories: &[usize], num_categories: usize) -> Vec<u8> {
    let mut y = vec![0u8; num_categories];
    for &c in categories {
        y[c] = 1;
    }
    y
}

fn inside_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn sprite_covers(sprite: Sprite, u: f64, v: f64) -> bool {
    // (u, v) in [0, 1]² relative to the sprite box, v pointing down.
    match sprite {
        Sprite::Square => true,
        Sprite::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        Sprite::Triangle => inside_polygon(u, v, &[(0.5, 0.0), (1.0, 1.0), (0.0, 1.0)]),
        Sprite::Pentagon => {
            let pts: Vec<(f64, f64)> = (0..5)
                .map(|k| {
                    let a = -std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k as f64 / 5.0;
                    (0.5 + 0.5 * a.cos(), 0.5 + 0.5 * a.sin())
                })
                .collect();
            inside_polygon(u, v, &pts)
        }
    }
}

fn render_frame(cat: &CategorySpec, rng: &mut ChaCha8Rng) -> (Image, BBox, Waveform) {
    let n = FRAME_SIZE;
    // Background: a per-scene tint, coarse 28-pixel blocks, per-pixel jitter.
    let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(BACKGROUND_TINT.0..BACKGROUND_TINT.1)).collect();
    let blocks = n / 28;
    let coarse: Vec<f64> = (0..blocks * blocks * 3).map(|_| rng.gen_range(-0.15..0.15)).collect();
    let mut pixels = Array3::from_shape_fn((n, n, 3), |(y, x, c)| {
        tint[c] + coarse[((y / 28) * blocks + x / 28) * 3 + c]
    });
    pixels.mapv_inplace(|v| v + rng.gen_range(-0.04..0.04));

    let size = rng.gen_range(MIN_SPRITE..=MAX_SPRITE);
    let x0 = rng.gen_range(0..=n - size);
    let y0 = rng.gen_range(0..=n - size);
    let bbox = BBox { x0, y0, x1: x0 + size, y1: y0 + size };
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let u = (x - x0) as f64 / (size - 1) as f64;
            let v = (y - y0) as f64 / (size - 1) as f64;
            if sprite_covers(cat.sprite, u, v) {
                for c in 0..3 {
                    pixels[[y, x, c]] = cat.color[c] + rng.gen_range(-0.03..0.03);
                }
            }
        }
    }
    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let wave = Waveform::tone(cat.tone_hz, TONE_AMPLITUDE, phase, SAMPLE_RATE, CLIP_SECONDS);
    (Image::new(pixels), bbox, wave)
}

/// One sprite on a 224×224 background with its category's tone.
pub fn make_solo_sample(categories: &[CategorySpec], seed: u64) -> Result<SceneSample> {
    validate_categories(categories)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cat = &categories[rng.gen_range(0..categories.len())];
    let (image, bbox, waveform) = render_frame(cat, &mut rng);
    Ok(SceneSample {
        image,
        mixture: waveform.clone(),
        sources: vec![Source { category: cat.category_id, bbox, waveform }],
        label_vector: label_vector(&[cat.category_id], categories.len()),
        seed,
    })
}

/// `n_sources` solo frames with distinct categories, concatenated left to
/// right (`224·n_sources × 224`), with summed audio.
pub fn make_duet_sample(categories: &[CategorySpec], seed: u64, n_sources: usize) -> Result<SceneSample> {
    validate_categories(categories)?;
    if n_sources < 2 {
        return invalid(format!("multi-source scenes need at least 2 sources, got {n_sources}"));
    }
    if n_sources > categories.len() {
        return invalid(format!(
            "{n_sources} sources requested but only {} distinct categories exist",
            categories.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..categories.len()).collect();
    order.shuffle(&mut rng);
    let mut image: Option<Image> = None;
    let mut sources = Vec::with_capacity(n_sources);
    for (slot, &ci) in order.iter().take(n_sources).enumerate() {
        let cat = &categories[ci];
        let (frame, bbox, waveform) = render_frame(cat, &mut rng);
        image = Some(match image {
            None => frame,
            Some(acc) => concat_frames(&acc, &frame)?,
        });
        sources.push(Source {
            category: cat.category_id,
            bbox: bbox.offset_x(slot * FRAME_SIZE),
            waveform,
        });
    }
    let waves: Vec<Waveform> = sources.iter().map(|s| s.waveform.clone()).collect();
    let cats: Vec<usize> = sources.iter().map(|s| s.category).collect();
    Ok(SceneSample {
        image: image.expect("n_sources >= 2"),
        mixture: mix_waveforms(&waves)?,
        label_vector: label_vector(&cats, categories.len()),
        sources,
        seed,
    })
}

/// Builds a solo scene for `n_sources == 1`, a concatenated scene otherwise.
pub fn make_sample(categories: &[CategorySpec], seed: u64, n_sources: usize) -> Result<SceneSample> {
    match n_sources {
        0 => invalid("a scene needs at least one source"),
        1 => make_solo_sample(categories, seed),
        n => make_duet_sample(categories, seed, n),
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub seed: u64,
    pub categories: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub image_path: String,
    pub audio_path: String,
}

impl ManifestRecord {
    pub fn n_sources(&self) -> usize {
        self.categories.len()
    }

    pub fn image_width(&self) -> usize {
        FRAME_SIZE * self.categories.len()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.categories.is_empty() {
            return Err("record has no sources".into());
        }
        if self.boxes.len() != self.categories.len() {
            return Err(format!(
                "{} boxes for {} categories",
                self.boxes.len(),
                self.categories.len()
            ));
        }
        let (w, h) = (self.image_width(), FRAME_SIZE);
        if let Some(b) = self.boxes.iter().find(|b| !b.fits(w, h)) {
            return Err(format!("box {:?} outside the {w}×{h} frame or empty", <[usize; 4]>::from(*b)));
        }
        Ok(())
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest { line: i + 1, msg: e.to_string() })?;
        record
            .validate()
            .map_err(|msg| Error::Manifest { line: i + 1, msg })?;
        records.push(record);
    }
    Ok(records)
}

/// A manifest plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Dataset {
    pub fn open(manifest: &Path) -> Result<Self> {
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records: read_manifest(manifest)? })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load_image(&self, r: &ManifestRecord) -> Result<Image> {
        load_png(&self.root.join(&r.image_path))
    }

    pub fn load_audio(&self, r: &ManifestRecord) -> Result<Waveform> {
        load_wav(&self.root.join(&r.audio_path))
    }
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        *px = image::Rgb([0, 1, 2].map(|c| (img.pixels[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    });
    Ok(Image::new(pixels))
}

pub fn save_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in wave.samples() {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn load_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return invalid(format!("{}: expected mono 16-bit PCM", path.display()));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Generates one scene per seed under `dir`, writing `manifest.jsonl`,
/// `images/*.png` and `audio/*.wav`. Returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    categories: &[CategorySpec],
    seeds: &[u64],
    n_sources: usize,
) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("audio"))?;
    let mut records = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let sample = make_sample(categories, seed, n_sources)?;
        let stem = format!("n{n_sources}_{seed:08}");
        let image_path = format!("images/{stem}.png");
        let audio_path = format!("audio/{stem}.wav");
        save_png(&dir.join(&image_path), &sample.image)?;
        save_wav(&dir.join(&audio_path), &sample.mixture)?;
        records.push(ManifestRecord {
            seed,
            categories: sample.categories(),
            boxes: sample.boxes(),
            image_path,
            audio_path,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solo_is_deterministic_and_well_formed() {
        let cats = default_categories();
        let a = make_solo_sample(&cats, 7).unwrap();
        let b = make_solo_sample(&cats, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, make_solo_sample(&cats, 8).unwrap().image);
        assert_eq!(a.sources.len(), 1);
        let bb = a.sources[0].bbox;
        assert!(bb.fits(224, 224) && bb.area() > 0);
        assert_eq!(a.label_vector.iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert_eq!(a.label_vector[a.sources[0].category], 1);
        assert_eq!(a.mixture, a.sources[0].waveform);
        assert_eq!((a.image.width(), a.image.height()), (224, 224));
    }

    #[test]
    fn sprite_pixels_carry_category_color() {
        let cats = default_categories();
        for seed in 0..8 {
            let s = make_solo_sample(&cats, seed).unwrap();
            let src = &s.sources[0];
            let (cx, cy) = ((src.bbox.x0 + src.bbox.x1) / 2, (src.bbox.y0 + src.bbox.y1) / 2);
            let color = cats[src.category].color;
            for c in 0..3 {
                assert!((s.image.pixels[[cy, cx, c]] - color[c]).abs() <= 0.03 + 1e-9);
            }
        }
    }

    #[test]
    fn duet_geometry_and_mixture() {
        let cats = default_categories();
        let s = make_duet_sample(&cats, 3, 2).unwrap();
        assert_eq!((s.image.width(), s.image.height()), (448, 224));
        assert_eq!(s.sources.len(), 2);
        assert_ne!(s.sources[0].category, s.sources[1].category);
        for i in 0..s.mixture.len() {
            let sum = s.sources[0].waveform.samples()[i] + s.sources[1].waveform.samples()[i];
            assert_eq!(s.mixture.samples()[i], sum);
        }
        assert!(s.sources[0].bbox.x1 <= 224 && s.sources[1].bbox.x0 >= 224);
        let masks: Vec<_> = s.sources.iter().map(|src| src.bbox.mask(224, 448)).collect();
        assert!(masks[0].iter().zip(masks[1].iter()).all(|(a, b)| !(*a && *b)));

        let t = make_duet_sample(&cats, 3, 3).unwrap();
        assert_eq!((t.image.width(), t.image.height()), (672, 224));
        let mut c = t.categories();
        c.sort();
        c.dedup();
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn invalid_requests_rejected() {
        let cats = default_categories();
        assert!(make_solo_sample(&[], 0).is_err());
        assert!(make_duet_sample(&cats, 0, 5).is_err());
        assert!(make_duet_sample(&cats, 0, 1).is_err());
        let mut dup = cats.clone();
        dup[1].tone_hz = dup[0].tone_hz;
        assert!(make_solo_sample(&dup, 0).is_err());
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cats = default_categories();
        let seeds: Vec<u64> = (0..10).collect();
        let path = write_dataset(dir.path(), &cats, &seeds, 2).unwrap();
        let ds = Dataset::open(&path).unwrap();
        assert_eq!(ds.len(), 10);
        for (r, &seed) in ds.records.iter().zip(&seeds) {
            let s = make_duet_sample(&cats, seed, 2).unwrap();
            assert_eq!(r.seed, seed);
            assert_eq!(r.categories, s.categories());
            assert_eq!(r.boxes, s.boxes());
            let img = ds.load_image(r).unwrap();
            assert_eq!((img.width(), img.height()), (448, 224));
            let wav = ds.load_audio(r).unwrap();
            assert_eq!(wav.len(), s.mixture.len());
            let err = wav
                .samples()
                .iter()
                .zip(s.mixture.samples())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1.0 / 16000.0);
        }
        let again = dir.path().join("copy.jsonl");
        write_manifest(&again, &ds.records).unwrap();
        assert_eq!(read_manifest(&again).unwrap(), ds.records);

        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(read_manifest(&empty).unwrap().is_empty());

        let bad = dir.path().join("bad.jsonl");
        let good_line = serde_json::to_string(&ds.records[0]).unwrap();
        let mut broken = ds.records[1].clone();
        broken.boxes[0] = BBox { x0: 400, y0: 10, x1: 460, y1: 50 };
        let text = format!("{good_line}\n{}\n", serde_json::to_string(&broken).unwrap());
        fs::write(&bad, text).unwrap();
        match read_manifest(&bad) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected manifest error, got {other:?}"),
        }
        fs::write(&bad, "{not json}\n").unwrap();
        assert!(matches!(read_manifest(&bad), Err(Error::Manifest { line: 1, .. })));
    }
}
