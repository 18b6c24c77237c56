//! Procedural videos of moving coloured rectangles with shot cuts.
//!
//! Every query owns a scene timeline. The query video is one window of it;
//! its variants are, by increasing severity:
//!
//! | label | construction |
//! |-------|--------------|
//! | ND | temporal trim of the query window, brightness change ≤ 0.03 |
//! | DS | temporal trim, 1–2 px translation, brightness change 0.15–0.3 |
//! | CS | window overlapping half of the query, horizontally flipped, 1–2 px translation |
//! | IS | same object colours in new settings: new backgrounds, sizes, motion and shot order |
//!
//! Distractors come from unrelated timelines. Everything is a pure function
//! of the seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::clip::Frames;
use crate::error::{Error, Result};
use crate::retrieval::{AnnotationSet, Label};
use crate::rng::SeedRng;

/// Variants generated per query, excluding the query itself.
pub const VARIANTS_PER_QUERY: usize = 8;

#[derive(Clone, Debug, PartialEq)]
struct Rect {
    color: [f32; 3],
    w: f32,
    h: f32,
    x0: f32,
    y0: f32,
    vx: f32,
    vy: f32,
}

#[derive(Clone, Debug, PartialEq)]
struct Scene {
    top: [f32; 3],
    bottom: [f32; 3],
    rects: Vec<Rect>,
}

/// Scenes played back to back; `time` keeps running inside each shot.
#[derive(Clone, Debug, PartialEq)]
struct Timeline {
    shots: Vec<(Scene, usize)>,
}

fn color(rng: &mut SeedRng) -> [f32; 3] {
    [rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32]
}

fn random_rect(color: [f32; 3], size: usize, rng: &mut SeedRng) -> Rect {
    let s = size as f64;
    let speed = |rng: &mut SeedRng| rng.open_range(-1.5, 1.5) as f32;
    Rect {
        color,
        w: rng.open_range(0.2 * s, 0.5 * s) as f32,
        h: rng.open_range(0.2 * s, 0.5 * s) as f32,
        x0: rng.open_range(0.0, s) as f32,
        y0: rng.open_range(0.0, s) as f32,
        vx: speed(rng),
        vy: speed(rng),
    }
}

fn random_scene(size: usize, rng: &mut SeedRng) -> Scene {
    let n = rng.int_in(1, 3);
    Scene {
        top: color(rng),
        bottom: color(rng),
        rects: (0..n).map(|_| random_rect(color(rng), size, rng)).collect(),
    }
}

/// The same objects (colours) filmed elsewhere: new background, sizes,
/// positions and velocities.
fn restage(scene: &Scene, size: usize, rng: &mut SeedRng) -> Scene {
    Scene {
        top: color(rng),
        bottom: color(rng),
        rects: scene.rects.iter().map(|r| random_rect(r.color, size, rng)).collect(),
    }
}

fn random_timeline(len: usize, size: usize, rng: &mut SeedRng) -> Timeline {
    let shots = rng.int_in(2, 4).min(len / 6).max(1);
    let mut cuts = rng.subset(len - 1, shots - 1);
    cuts.iter_mut().for_each(|c| *c += 1);
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(len);
    Timeline {
        shots: bounds.windows(2).map(|w| (random_scene(size, rng), w[1] - w[0])).collect(),
    }
}

impl Timeline {
    fn len(&self) -> usize {
        self.shots.iter().map(|(_, l)| l).sum()
    }

    fn render(&self, start: usize, len: usize, size: usize) -> Result<Frames> {
        if start + len > self.len() || len == 0 {
            return Err(Error::Contract(format!(
                "window {start}+{len} outside a {}-frame timeline",
                self.len()
            )));
        }
        let mut frames = Vec::with_capacity(len);
        for t in start..start + len {
            let mut at = t;
            let mut shot = 0;
            while at >= self.shots[shot].1 {
                at -= self.shots[shot].1;
                shot += 1;
            }
            frames.push(render_frame(&self.shots[shot].0, at as f32, size));
        }
        Frames::from_frames(&frames, size, size)
    }
}

/// Length of `[a, a+w)` ∩ `[b, b+v)` on a circle of circumference `size`.
fn wrapped_overlap(a: f32, w: f32, b: f32, v: f32, size: f32) -> f32 {
    let a = a.rem_euclid(size);
    [-size, 0.0, size]
        .iter()
        .map(|off| ((a + off + w).min(b + v) - (a + off).max(b)).max(0.0))
        .sum()
}

fn render_frame(scene: &Scene, t: f32, size: usize) -> Vec<f32> {
    let s = size as f32;
    let mut px = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let k = y as f32 / (s - 1.0).max(1.0);
        for x in 0..size {
            let mut c: [f32; 3] = std::array::from_fn(|i| scene.top[i] * (1.0 - k) + scene.bottom[i] * k);
            for r in &scene.rects {
                let cx = wrapped_overlap(r.x0 + r.vx * t, r.w, x as f32, 1.0, s);
                let cy = wrapped_overlap(r.y0 + r.vy * t, r.h, y as f32, 1.0, s);
                let cover = (cx * cy).min(1.0);
                for (ci, rc) in c.iter_mut().zip(r.color) {
                    *ci = *ci * (1.0 - cover) + rc * cover;
                }
            }
            px.extend_from_slice(&c);
        }
    }
    px
}

/// Single-shot videos whose rectangles move at constant velocity.
pub fn moving_patterns(count: usize, frames: usize, size: usize, seed: u64) -> Result<Vec<Frames>> {
    if count == 0 || frames == 0 || size == 0 {
        return Err(Error::Config("moving-pattern dataset needs positive count, length and size".into()));
    }
    let root = SeedRng::new(seed).fork(0x6d6f_7665);
    (0..count)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let tl = Timeline {
                shots: vec![(random_scene(size, &mut rng), frames)],
            };
            tl.render(0, frames, size)
        })
        .collect()
}

/// Unlabelled multi-shot videos drawn independently of any benchmark
/// timeline, for self-supervised training.
pub fn training_videos(count: usize, config: &SynthConfig) -> Result<Vec<Frames>> {
    config.validate()?;
    let root = SeedRng::new(config.seed).fork(0x7472_6169);
    (0..count)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let len = rng.int_in(config.min_len, config.max_len);
            random_timeline(len, config.size, &mut rng).render(0, len, config.size)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Total corpus size, queries and distractors included.
    pub videos: usize,
    pub queries: usize,
    pub size: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            videos: 200,
            queries: 20,
            size: 16,
            min_len: 24,
            max_len: 40,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.videos == 0 {
            return Err(Error::Config("video and query counts must be >= 1".into()));
        }
        let needed = self.queries * (1 + VARIANTS_PER_QUERY);
        if self.videos < needed {
            return Err(Error::Config(format!(
                "{} queries need a corpus of at least {needed} videos, got {}",
                self.queries, self.videos
            )));
        }
        if self.size < 4 || self.min_len < 12 || self.max_len < self.min_len {
            return Err(Error::Config("need size >= 4 and 12 <= min_len <= max_len".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBenchmark {
    pub videos: Vec<(String, Frames)>,
    pub annotations: AnnotationSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub videos: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_FILE: &str = "annotations.json";

fn brightness(rng: &mut SeedRng, lo: f64, hi: f64) -> f32 {
    let m = rng.open_range(lo, hi) as f32;
    if rng.coin(0.5) {
        m
    } else {
        -m
    }
}

fn trim(len: usize, rng: &mut SeedRng) -> (usize, usize) {
    let cut = len / 5;
    let head = rng.int_in(1, cut);
    let tail = rng.int_in(1, cut);
    (head, len - head - tail)
}

fn nonzero_offset(rng: &mut SeedRng) -> i32 {
    let m = rng.int_in(1, 2) as i32;
    if rng.coin(0.5) {
        m
    } else {
        -m
    }
}

impl SyntheticBenchmark {
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let size = config.size;
        let root = SeedRng::new(config.seed);
        let mut videos = Vec::with_capacity(config.videos);
        let mut annotations = AnnotationSet::default();
        for q in 0..config.queries {
            let mut rng = root.fork(q as u64);
            let len = rng.int_in(config.min_len, config.max_len);
            let tl = random_timeline(2 * len + 8, size, &mut rng);
            let a = rng.int_in(0, 8);
            let qid = format!("q{q:03}");
            videos.push((qid.clone(), tl.render(a, len, size)?));
            let mut labels = BTreeMap::new();
            let mut add = |name: String, label: Label, frames: Frames, videos: &mut Vec<(String, Frames)>| {
                labels.insert(name.clone(), label);
                videos.push((name, frames));
            };
            for i in 0..2 {
                let (s, l) = trim(len, &mut rng);
                let v = tl.render(a + s, l, size)?.brighten(brightness(&mut rng, 0.0, 0.03));
                add(format!("{qid}_nd{i}"), Label::ND, v, &mut videos);
            }
            for i in 0..2 {
                let (s, l) = trim(len, &mut rng);
                let (dx, dy) = (nonzero_offset(&mut rng), nonzero_offset(&mut rng));
                let v = tl
                    .render(a + s, l, size)?
                    .shift(dx, dy)
                    .brighten(brightness(&mut rng, 0.15, 0.3));
                add(format!("{qid}_ds{i}"), Label::DS, v, &mut videos);
            }
            for i in 0..2 {
                let start = if i == 0 { a + len / 2 } else { a.saturating_sub(len / 2) };
                let start = start.min(tl.len() - len);
                let (dx, dy) = (nonzero_offset(&mut rng), nonzero_offset(&mut rng));
                let v = tl.render(start, len, size)?.hflip().shift(dx, dy);
                add(format!("{qid}_cs{i}"), Label::CS, v, &mut videos);
            }
            for i in 0..2 {
                let mut shots: Vec<(Scene, usize)> = tl
                    .shots
                    .iter()
                    .map(|(scene, l)| (restage(scene, size, &mut rng), *l))
                    .collect();
                rng.shuffle(&mut shots);
                let other = Timeline { shots };
                let l = rng.int_in(config.min_len, config.max_len);
                let s = rng.int_in(0, other.len() - l);
                add(format!("{qid}_is{i}"), Label::IS, other.render(s, l, size)?, &mut videos);
            }
            annotations.queries.insert(qid, labels);
        }
        let distractors = config.videos - videos.len();
        for d in 0..distractors {
            let mut rng = root.fork(0x1000_0000 + d as u64);
            let len = rng.int_in(config.min_len, config.max_len);
            let tl = random_timeline(len, size, &mut rng);
            videos.push((format!("x{d:03}"), tl.render(0, len, size)?));
        }
        Ok(Self { videos, annotations })
    }

    fn file_name(id: &str) -> String {
        format!("videos/{id}.cslc")
    }

    pub fn write(&self, dir: &Path, config: &SynthConfig) -> Result<()> {
        let videos_dir = dir.join("videos");
        std::fs::create_dir_all(&videos_dir).map_err(|e| Error::io(&videos_dir, e))?;
        let mut entries = Vec::with_capacity(self.videos.len());
        for (id, frames) in &self.videos {
            let file = Self::file_name(id);
            frames.save(&dir.join(&file))?;
            entries.push(ManifestEntry {
                id: id.clone(),
                file,
                frames: frames.len(),
                height: frames.height(),
                width: frames.width(),
            });
        }
        let manifest = Manifest {
            config: config.clone(),
            videos: entries,
        };
        write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        self.annotations.save(&dir.join(ANNOTATION_FILE))
    }
}

/// Reads `manifest.json` and every clip file it lists.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, Frames)>> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    manifest
        .videos
        .iter()
        .map(|e| {
            let frames = Frames::load(&dir.join(&e.file))?;
            if frames.len() != e.frames || frames.height() != e.height || frames.width() != e.width {
                return Err(Error::Integrity(format!("video `{}` does not match its manifest entry", e.id)));
            }
            Ok((e.id.clone(), frames))
        })
        .collect()
}

pub fn annotation_path(dir: &Path) -> PathBuf {
    dir.join(ANNOTATION_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            videos: 20,
            queries: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_and_labels() {
        let b = SyntheticBenchmark::generate(&small()).unwrap();
        assert_eq!(b.videos.len(), 20);
        assert_eq!(b.annotations.queries.len(), 2);
        for labels in b.annotations.queries.values() {
            assert_eq!(labels.len(), VARIANTS_PER_QUERY);
            for l in [Label::ND, Label::DS, Label::CS, Label::IS] {
                assert_eq!(labels.values().filter(|&&x| x == l).count(), 2);
            }
        }
        for (_, v) in &b.videos {
            assert!(v.len() >= 12 && v.height() == 16);
            assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            SyntheticBenchmark::generate(&small()).unwrap(),
            SyntheticBenchmark::generate(&small()).unwrap()
        );
        let other = SyntheticBenchmark::generate(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(other, SyntheticBenchmark::generate(&small()).unwrap());
    }

    #[test]
    fn too_small_corpus_rejected() {
        let cfg = SynthConfig {
            videos: 10,
            ..small()
        };
        assert!(matches!(SyntheticBenchmark::generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn nd_variant_shares_frames_with_query() {
        let b = SyntheticBenchmark::generate(&small()).unwrap();
        let q = &b.videos[0].1;
        let nd = &b.videos[1].1;
        let close = (0..q.len()).any(|t| {
            q.frame(t)
                .iter()
                .zip(nd.frame(0))
                .all(|(a, b)| (a - b).abs() <= 0.031)
        });
        assert!(close);
    }

    #[test]
    fn moving_patterns_are_smooth() {
        let v = moving_patterns(3, 16, 16, 1).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[0].len(), 16);
        assert_ne!(v[0].frame(0), v[0].frame(8));
    }

    #[test]
    fn write_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let b = SyntheticBenchmark::generate(&cfg).unwrap();
        b.write(dir.path(), &cfg).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, b.videos);
        let ann = AnnotationSet::load(&annotation_path(dir.path())).unwrap();
        assert_eq!(ann, b.annotations);
    }
}
