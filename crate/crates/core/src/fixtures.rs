//! Procedural stand-in corpora: images of colored shapes with exact masks,
//! and per-class audio textures, written in the same on-disk formats the
//! synthesis adapters read (COCO-style instance JSON with uncompressed RLE,
//! an `audio_uri,label,duration_s` CSV and an alias TSV).

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::write_wav;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ontology::AliasTable;
use crate::synthesis::adapters::{read_audio_annotations, read_visual_annotations, AnnotationSource};
use crate::synthesis::manifest::write_manifest;
use crate::synthesis::{synthesize, DatasetManifest, RawAudio, RawVisual, SynthesisReport};
use crate::types::{rle_encode, BinaryMask};

pub const VISUAL_DATASET: &str = "shapes";
pub const AUDIO_DATASET: &str = "tones";
const SAMPLE_RATE: u32 = 16_000;
const CLIP_SECONDS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

impl Shape {
    /// Membership of an offset from the shape center, for radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => ax <= 0.8 * r && ay <= 0.8 * r,
            Shape::Triangle => dy >= -r && dy <= 0.7 * r && ax <= 0.95 * (dy + r) / 1.7,
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            Shape::Cross => (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r),
            Shape::Diamond => ax + ay <= r,
        }
    }
}

/// Audio texture that identifies a class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Signature {
    Tone { hz: f64 },
    Pulsed { hz: f64, rate: f64 },
    Chirp { from_hz: f64, to_hz: f64 },
    Harmonic { f0: f64, partials: usize },
    Tremolo { hz: f64, rate: f64 },
    Band { lo_hz: f64, hi_hz: f64 },
}

impl Signature {
    /// One clip; `jitter` in [-1, 1] detunes it slightly so clips of a
    /// class are similar but not identical.
    pub fn render(&self, seconds: f64, sample_rate: u32, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let n = (seconds * sample_rate as f64).round() as usize;
        let sr = sample_rate as f64;
        let detune = 1.0 + 0.04 * jitter;
        let phase0 = rng.random_range(0.0..2.0 * PI);
        let band: Vec<(f64, f64)> = match *self {
            Signature::Band { lo_hz, hi_hz } => (0..24)
                .map(|_| (rng.random_range(lo_hz..hi_hz), rng.random_range(0.0..2.0 * PI)))
                .collect(),
            _ => Vec::new(),
        };
        (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                let v = match *self {
                    Signature::Tone { hz } => (2.0 * PI * hz * detune * t + phase0).sin(),
                    Signature::Pulsed { hz, rate } => {
                        let gate = if (t * rate).fract() < 0.5 { 1.0 } else { 0.0 };
                        gate * (2.0 * PI * hz * detune * t + phase0).sin()
                    }
                    Signature::Chirp { from_hz, to_hz } => {
                        let k = (to_hz - from_hz) / seconds;
                        (2.0 * PI * (from_hz * detune * t + 0.5 * k * t * t) + phase0).sin()
                    }
                    Signature::Harmonic { f0, partials } => {
                        let s: f64 = (1..=partials.max(1))
                            .map(|h| (2.0 * PI * f0 * detune * h as f64 * t + phase0 * h as f64).sin() / h as f64)
                            .sum();
                        s / 1.6
                    }
                    Signature::Tremolo { hz, rate } => {
                        let env = 0.5 * (1.0 + (2.0 * PI * rate * t).sin());
                        env * (2.0 * PI * hz * detune * t + phase0).sin()
                    }
                    Signature::Band { .. } => {
                        band.iter().map(|&(f, p)| (2.0 * PI * f * detune * t + p).sin()).sum::<f64>() / 5.0
                    }
                };
                (0.5 * v + 0.01 * rng.random_range(-1.0..1.0)) as f32
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeClass {
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
    pub sound: Option<Signature>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderStyle {
    /// Flat colors on a flat background.
    Synthetic,
    /// Textured background, shading and color jitter: a deliberate domain
    /// gap from `Synthetic`.
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub canvas: usize,
    pub classes: Vec<ShapeClass>,
    pub min_instances: usize,
    pub max_instances: usize,
    pub clips_per_class: usize,
    pub style: RenderStyle,
}

/// The built-in shape vocabulary, in a fixed order.
pub fn standard_classes() -> Vec<ShapeClass> {
    let c = |name: &str, shape, color, sound| ShapeClass {
        name: name.to_string(),
        shape,
        color,
        sound: Some(sound),
    };
    vec![
        c("disk", Shape::Disk, [220, 60, 50], Signature::Tone { hz: 440.0 }),
        c("square", Shape::Square, [50, 120, 220], Signature::Pulsed { hz: 1200.0, rate: 4.0 }),
        c("triangle", Shape::Triangle, [60, 190, 80], Signature::Chirp { from_hz: 300.0, to_hz: 3000.0 }),
        c("ring", Shape::Ring, [230, 200, 40], Signature::Harmonic { f0: 220.0, partials: 6 }),
        c("cross", Shape::Cross, [170, 70, 200], Signature::Tremolo { hz: 2000.0, rate: 12.0 }),
        c("diamond", Shape::Diamond, [40, 200, 200], Signature::Band { lo_hz: 3000.0, hi_hz: 6000.0 }),
    ]
}

impl FixtureSpec {
    pub fn new(canvas: usize, n_classes: usize, style: RenderStyle) -> Self {
        Self {
            canvas,
            classes: standard_classes().into_iter().take(n_classes).collect(),
            min_instances: 1,
            // An image never holds two instances of one class.
            max_instances: n_classes.clamp(1, 3),
            clips_per_class: 4,
            style,
        }
    }

    pub fn with_instances(mut self, min: usize, max: usize) -> Self {
        self.min_instances = min;
        self.max_instances = max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::FixtureSpec(m));
        if self.canvas < 16 {
            return bad(format!("canvas {} is too small", self.canvas));
        }
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.classes.len() {
            return bad("class names must be unique".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            let Some(sig) = &c.sound else {
                return bad(format!("class {:?} has no audio signature", c.name));
            };
            if self.classes[..i].iter().any(|o| o.sound.as_ref() == Some(sig)) {
                return bad(format!("class {:?} shares its audio signature", c.name));
            }
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances || self.max_instances > self.classes.len() {
            return bad(format!(
                "instances per image must satisfy 1 <= {} <= {} <= {} classes",
                self.min_instances,
                self.max_instances,
                self.classes.len()
            ));
        }
        if self.clips_per_class == 0 {
            return bad("clips_per_class must be >= 1".into());
        }
        Ok(())
    }

    /// Alias rows tying both fixture datasets to the class names.
    pub fn aliases(&self) -> Result<AliasTable> {
        let mut t = AliasTable::new();
        for c in &self.classes {
            t.insert(&c.name, VISUAL_DATASET, &c.name)?;
            t.insert(&c.name, AUDIO_DATASET, &audio_label(&c.name))?;
        }
        Ok(t)
    }
}

pub fn audio_label(class: &str) -> String {
    format!("{class} sound")
}

/// What [`generate_fixtures`] wrote, plus the raw annotations it describes.
#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub dir: PathBuf,
    pub instances_json: PathBuf,
    pub audio_csv: PathBuf,
    pub aliases_tsv: PathBuf,
    pub images: usize,
    pub visual: Vec<RawVisual>,
    pub audio: Vec<RawAudio>,
}

struct Placed {
    class: usize,
    cx: f64,
    cy: f64,
    r: f64,
}

fn place(spec: &FixtureSpec, rng: &mut ChaCha8Rng) -> Vec<Placed> {
    let size = spec.canvas as f64;
    let want = rng.random_range(spec.min_instances..=spec.max_instances);
    let mut classes: Vec<usize> = (0..spec.classes.len()).collect();
    for i in 0..want {
        let j = rng.random_range(i..classes.len());
        classes.swap(i, j);
    }
    let mut placed: Vec<Placed> = Vec::with_capacity(want);
    for &class in &classes[..want] {
        for _ in 0..200 {
            let r = rng.random_range(0.13 * size..0.2 * size);
            let cx = rng.random_range(r + 1.0..size - r - 1.0);
            let cy = rng.random_range(r + 1.0..size - r - 1.0);
            let clear = placed
                .iter()
                .all(|p| ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt() > p.r + r + 2.0);
            if clear {
                placed.push(Placed { class, cx, cy, r });
                break;
            }
        }
    }
    placed
}

fn render(spec: &FixtureSpec, placed: &[Placed], rng: &mut ChaCha8Rng) -> (image::RgbImage, Vec<BinaryMask>) {
    let n = spec.canvas;
    let masks: Vec<BinaryMask> = placed
        .iter()
        .map(|p| {
            let shape = spec.classes[p.class].shape;
            BinaryMask::from_fn(n, n, |y, x| shape.contains(x as f64 + 0.5 - p.cx, y as f64 + 0.5 - p.cy, p.r))
        })
        .collect();
    let (bg0, bg1, noise, jitter) = match spec.style {
        RenderStyle::Synthetic => ([0.5; 3], [0.5; 3], 0.02, 0.0),
        RenderStyle::Real => {
            let mut c = || [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
            (c(), c(), 0.08, 0.15)
        }
    };
    let tints: Vec<[f64; 3]> = placed
        .iter()
        .map(|p| {
            let base = spec.classes[p.class].color;
            std::array::from_fn(|k| (base[k] as f64 / 255.0 + jitter * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0))
        })
        .collect();
    let mut img = image::RgbImage::new(n as u32, n as u32);
    for y in 0..n {
        for x in 0..n {
            let a = (x + y) as f64 / (2 * n) as f64;
            let mut px: [f64; 3] = std::array::from_fn(|k| bg0[k] * (1.0 - a) + bg1[k] * a);
            for (i, m) in masks.iter().enumerate() {
                if m.get(y, x) {
                    let shade = match spec.style {
                        RenderStyle::Synthetic => 1.0,
                        RenderStyle::Real => 0.75 + 0.5 * (y as f64 + 0.5 - placed[i].cy + placed[i].r) / (4.0 * placed[i].r),
                    };
                    px = std::array::from_fn(|k| tints[i][k] * shade);
                }
            }
            let rgb: [u8; 3] =
                std::array::from_fn(|k| ((px[k] + noise * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
        }
    }
    (img, masks)
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Draw `n` images and `clips_per_class` clips per class into `dir`.
/// Deterministic in `(spec, n, seed)`; image rendering runs under `exec`.
pub fn generate_fixtures(spec: &FixtureSpec, n: usize, seed: u64, dir: &Path, exec: Execution) -> Result<FixtureSet> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::FixtureSpec("n must be >= 1".into()));
    }
    for sub in ["images", "audio"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(write_err(&d))?;
    }
    let prefix = match spec.style {
        RenderStyle::Synthetic => "syn",
        RenderStyle::Real => "real",
    };

    let rendered = exec.map_indexed(n, |i| -> Result<(String, Vec<(usize, BinaryMask)>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + i as u64);
        let placed = place(spec, &mut rng);
        let (img, masks) = render(spec, &placed, &mut rng);
        let uri = format!("images/{prefix}_{i:05}.png");
        let path = dir.join(&uri);
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        Ok((uri, placed.iter().map(|p| p.class).zip(masks).collect()))
    });

    let mut visual = Vec::new();
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for (i, r) in rendered.into_iter().enumerate() {
        let (uri, inst) = r?;
        images.push(serde_json::json!({"id": i + 1, "file_name": uri, "height": spec.canvas, "width": spec.canvas}));
        for (class, mask) in inst {
            let rle = rle_encode(&mask);
            annotations.push(serde_json::json!({
                "id": annotations.len() + 1,
                "image_id": i + 1,
                "category_id": class + 1,
                "segmentation": {"size": rle.size, "counts": rle.counts},
            }));
            visual.push(RawVisual {
                source_dataset: VISUAL_DATASET.into(),
                image_uri: uri.clone(),
                image_size: (spec.canvas, spec.canvas),
                label: spec.classes[class].name.clone(),
                mask: rle,
            });
        }
    }
    let categories: Vec<_> = spec
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| serde_json::json!({"id": i + 1, "name": c.name}))
        .collect();
    let coco = serde_json::json!({"images": images, "annotations": annotations, "categories": categories});
    let instances_json = dir.join("instances.json");
    std::fs::write(&instances_json, serde_json::to_vec(&coco)?).map_err(write_err(&instances_json))?;

    let mut audio = Vec::new();
    let mut csv_text = String::from("audio_uri,label,duration_s\n");
    for (ci, c) in spec.classes.iter().enumerate() {
        let sig = c.sound.expect("validated");
        for k in 0..spec.clips_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1_000_000 + (ci * spec.clips_per_class + k) as u64);
            let jitter = rng.random_range(-1.0..1.0);
            let wave = sig.render(CLIP_SECONDS, SAMPLE_RATE, jitter, &mut rng);
            let uri = format!("audio/{}_{k:02}.wav", c.name);
            write_wav(&dir.join(&uri), &wave, SAMPLE_RATE)?;
            let label = audio_label(&c.name);
            csv_text.push_str(&format!("{uri},{label},{CLIP_SECONDS}\n"));
            audio.push(RawAudio {
                source_dataset: AUDIO_DATASET.into(),
                audio_uri: uri,
                label,
                duration_s: CLIP_SECONDS,
            });
        }
    }
    let audio_csv = dir.join("audio.csv");
    std::fs::write(&audio_csv, csv_text).map_err(write_err(&audio_csv))?;
    let aliases_tsv = dir.join("aliases.tsv");
    std::fs::write(&aliases_tsv, spec.aliases()?.to_tsv()).map_err(write_err(&aliases_tsv))?;

    Ok(FixtureSet {
        dir: dir.to_path_buf(),
        instances_json,
        audio_csv,
        aliases_tsv,
        images: n,
        visual,
        audio,
    })
}

/// Generate fixtures, read them back through the adapters, compose
/// triplets and write `manifest.jsonl` next to them.
pub fn fixture_manifest(
    spec: &FixtureSpec,
    n: usize,
    seed: u64,
    test_fraction: f64,
    dir: &Path,
    exec: Execution,
) -> Result<(DatasetManifest, SynthesisReport)> {
    let set = generate_fixtures(spec, n, seed, dir, exec)?;
    let visual = read_visual_annotations(&AnnotationSource {
        dataset: Some(VISUAL_DATASET.into()),
        path: set.instances_json.clone(),
    })?;
    let audio = read_audio_annotations(&AnnotationSource {
        dataset: Some(AUDIO_DATASET.into()),
        path: set.audio_csv.clone(),
    })?;
    let report = synthesize(visual, audio, &spec.aliases()?, test_fraction, seed, exec)?;
    write_manifest(&report.manifest, &dir.join("manifest.jsonl"))?;
    Ok((report.manifest.clone(), report))
}
