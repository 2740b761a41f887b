//! Synthetic multi-annotator segmentation data and its on-disk format.
//!
//! Each example is a grey-level image of a blob with smooth star-shaped
//! boundary plus an optional dimmer lobe. Every annotator traces the blob
//! with their own smooth boundary offset and decides independently whether
//! the lobe belongs to the object.
//!
//! On disk an example is one grid file for the image and one per annotator
//! mask, listed in a JSON manifest. A grid file is `rows: u32 LE`,
//! `cols: u32 LE` followed by `rows * cols` little-endian `f64` values.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::engine::{Rng, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const SPLIT_STREAM: u64 = 0x5917;

/// One image with its annotator masks. The image is `[1, S, S]` in `[0, 1]`,
/// every mask is a binary `[S, S]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedExample {
    pub id: String,
    pub image: Tensor,
    pub masks: Vec<Tensor>,
}

impl AnnotatedExample {
    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }

    /// Pixels marked by at least one annotator.
    pub fn union_mask(&self) -> Tensor {
        let mut out = Tensor::zeros(self.masks[0].shape().to_vec());
        for m in &self.masks {
            for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
                if *v > 0.5 {
                    *o = 1.0;
                }
            }
        }
        out
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    harmonics: Vec<(f64, f64)>,
    lobe_angle: f64,
    lobe_radius: f64,
}

impl Blob {
    fn draw(size: f64, rng: &mut Rng) -> Self {
        let radius = rng.uniform_range(0.15, 0.24) * size;
        let harmonics = (2..=4).map(|_| (rng.uniform_range(0.0, 0.12), rng.uniform_range(0.0, 2.0 * PI))).collect();
        Blob {
            cy: rng.uniform_range(0.4, 0.6) * size,
            cx: rng.uniform_range(0.4, 0.6) * size,
            radius,
            harmonics,
            lobe_angle: rng.uniform_range(0.0, 2.0 * PI),
            lobe_radius: rng.uniform_range(0.4, 0.55) * radius,
        }
    }

    fn boundary(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(i, (a, phase))| a * ((i as f64 + 2.0) * theta + phase).cos())
            .sum();
        self.radius * (1.0 + wobble)
    }

    fn lobe_center(&self) -> (f64, f64) {
        let d = self.boundary(self.lobe_angle) + 0.3 * self.lobe_radius;
        (self.cy + d * self.lobe_angle.sin(), self.cx + d * self.lobe_angle.cos())
    }

    fn polar(&self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.cy, x - self.cx);
        ((dy * dy + dx * dx).sqrt(), dy.atan2(dx))
    }
}

/// Radial offset of one annotator's boundary: a random low-order Fourier
/// series with per-point standard deviation `sigma`.
struct Jitter {
    terms: Vec<(f64, f64)>,
    sigma: f64,
}

impl Jitter {
    fn draw(sigma: f64, rng: &mut Rng) -> Self {
        Jitter { terms: (0..3).map(|_| (rng.normal(), rng.normal())).collect(), sigma }
    }

    fn at(&self, theta: f64) -> f64 {
        let s: f64 = self
            .terms
            .iter()
            .enumerate()
            .map(|(k, (a, b))| a * ((k + 1) as f64 * theta).cos() + b * ((k + 1) as f64 * theta).sin())
            .sum();
        self.sigma * s / (self.terms.len() as f64).sqrt()
    }
}

/// Keeps the 4-connected component containing `seed`; everything else is
/// cleared. An empty seed pixel leaves the mask empty.
fn keep_component(mask: &mut [f64], size: usize, seed: (usize, usize)) {
    let mut keep = vec![false; mask.len()];
    let start = seed.0 * size + seed.1;
    if mask[start] > 0.5 {
        let mut stack = vec![start];
        keep[start] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / size, i % size);
            let mut push = |j: usize| {
                if !keep[j] && mask[j] > 0.5 {
                    keep[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                push(i - size);
            }
            if r + 1 < size {
                push(i + size);
            }
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < size {
                push(i + 1);
            }
        }
    }
    for (m, k) in mask.iter_mut().zip(keep) {
        *m = if k { 1.0 } else { 0.0 };
    }
}

fn synth_example(cfg: &SynthConfig, index: usize) -> Result<AnnotatedExample> {
    let mut rng = Rng::derive(cfg.seed, index as u64);
    let s = cfg.image_size;
    let sf = s as f64;
    let blob = Blob::draw(sf, &mut rng);
    let (ly, lx) = blob.lobe_center();
    let centre = ((blob.cy as usize).min(s - 1), (blob.cx as usize).min(s - 1));

    let texture: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.uniform_range(0.5, 2.5), rng.uniform_range(0.0, 2.0 * PI), rng.uniform_range(0.0, 2.0 * PI)))
        .collect();
    let mut image = Tensor::zeros(vec![1, s, s]);
    for r in 0..s {
        for c in 0..s {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let (dist, theta) = blob.polar(y, x);
            let in_core = dist <= blob.boundary(theta);
            let in_lobe = (y - ly).hypot(x - lx) <= blob.lobe_radius;
            let bg: f64 = texture
                .iter()
                .map(|(f, py, px)| 0.04 * (f * 2.0 * PI * y / sf + py).sin() * (f * 2.0 * PI * x / sf + px).cos())
                .sum();
            let base = if in_core {
                0.75
            } else if in_lobe {
                0.48
            } else {
                0.2 + bg
            };
            image.data_mut()[r * s + c] = (base + cfg.noise * rng.normal()).clamp(0.0, 1.0);
        }
    }

    let mut masks = Vec::with_capacity(cfg.num_annotators);
    for _ in 0..cfg.num_annotators {
        let jitter = Jitter::draw(cfg.boundary_jitter, &mut rng);
        let with_lobe = rng.bernoulli(cfg.ambiguity_rate);
        let lobe_r = blob.lobe_radius + jitter.at(blob.lobe_angle) * 0.5;
        let mut m = vec![0.0; s * s];
        for r in 0..s {
            for c in 0..s {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let (dist, theta) = blob.polar(y, x);
                let core = dist <= blob.boundary(theta) + jitter.at(theta);
                let lobe = with_lobe && (y - ly).hypot(x - lx) <= lobe_r;
                if core || lobe {
                    m[r * s + c] = 1.0;
                }
            }
        }
        keep_component(&mut m, s, centre);
        masks.push(Tensor::new(vec![s, s], m)?);
    }
    Ok(AnnotatedExample { id: format!("ex{index:05}"), image, masks })
}

/// Deterministic synthetic dataset; example `i` depends only on
/// `(cfg.seed, i)` and the shape parameters.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<AnnotatedExample>> {
    cfg.validate()?;
    (0..cfg.num_examples).map(|i| synth_example(cfg, i)).collect()
}

/// Seeded shuffle followed by a cut at `round(ratio * n)`.
pub fn split(examples: &[AnnotatedExample], ratio: f64, seed: u64) -> Result<(Vec<AnnotatedExample>, Vec<AnnotatedExample>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    Rng::derive(seed, SPLIT_STREAM).shuffle(&mut order);
    let cut = (ratio * examples.len() as f64).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

pub fn write_grid(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 8 * data.len());
    bytes.extend((rows as u32).to_le_bytes());
    bytes.extend((cols as u32).to_le_bytes());
    for v in data {
        bytes.extend(v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(path.to_path_buf()));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 || bytes.len() != 8 + 8 * rows * cols {
        return Err(Error::MalformedHeader(path.to_path_buf()));
    }
    let data = bytes[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(vec![rows, cols], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub mask_paths: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub records: Vec<ManifestRecord>,
}

/// Writes grids for every example under `dir/data/` (skipping files that
/// already exist with the same name) and a manifest `dir/<name>`.
pub fn write_manifest(dir: &Path, name: &str, examples: &[AnnotatedExample]) -> Result<PathBuf> {
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let mut records = Vec::with_capacity(examples.len());
    for ex in examples {
        let s = ex.size();
        let image_rel = format!("data/{}_image.grid", ex.id);
        write_grid(&dir.join(&image_rel), s, s, ex.image.data())?;
        let mut mask_paths = Vec::with_capacity(ex.masks.len());
        for (k, m) in ex.masks.iter().enumerate() {
            let rel = format!("data/{}_mask{k}.grid", ex.id);
            write_grid(&dir.join(&rel), s, s, m.data())?;
            mask_paths.push(rel);
        }
        records.push(ManifestRecord { id: ex.id.clone(), image_path: image_rel, mask_paths });
    }
    let manifest = Manifest { version: MANIFEST_VERSION, records };
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads every record of a manifest; paths are relative to its directory.
/// Masks are binarised at 0.5.
pub fn load_manifest(path: &Path) -> Result<Vec<AnnotatedExample>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest { path: path.to_path_buf(), reason: e.to_string() })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            reason: format!("unsupported version {}", manifest.version),
        });
    }
    let root = path.parent().unwrap_or(Path::new("."));
    manifest.records.iter().map(|r| load_record(root, r)).collect()
}

fn load_record(root: &Path, rec: &ManifestRecord) -> Result<AnnotatedExample> {
    let image = read_grid(&root.join(&rec.image_path))?;
    let (rows, cols) = (image.shape()[0], image.shape()[1]);
    if rows != cols {
        return Err(Error::ExampleShape { id: rec.id.clone(), detail: format!("image is {rows}x{cols}, expected square") });
    }
    if rec.mask_paths.is_empty() {
        return Err(Error::ExampleShape { id: rec.id.clone(), detail: "no annotator masks".into() });
    }
    let mut masks = Vec::with_capacity(rec.mask_paths.len());
    for p in &rec.mask_paths {
        let m = read_grid(&root.join(p))?;
        if m.shape() != image.shape() {
            return Err(Error::ExampleShape {
                id: rec.id.clone(),
                detail: format!("mask {p} is {:?}, image is {:?}", m.shape(), image.shape()),
            });
        }
        let bin = m.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        masks.push(Tensor::new(vec![rows, cols], bin)?);
    }
    Ok(AnnotatedExample { id: rec.id.clone(), image: image.reshape(vec![1, rows, cols])?, masks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> SynthConfig {
        SynthConfig { num_examples: n, ..SynthConfig::default() }
    }

    #[test]
    fn generation_is_reproducible_and_well_formed() {
        let a = generate(&cfg(12)).unwrap();
        let b = generate(&cfg(12)).unwrap();
        assert_eq!(a, b);
        for ex in &a {
            assert_eq!(ex.image.shape(), &[1, 32, 32]);
            assert_eq!(ex.masks.len(), 4);
            assert!(ex.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for m in &ex.masks {
                assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
                assert!(m.data().iter().sum::<f64>() > 20.0);
            }
        }
    }

    #[test]
    fn prefix_examples_do_not_depend_on_count() {
        let a = generate(&cfg(5)).unwrap();
        let b = generate(&cfg(9)).unwrap();
        assert_eq!(a[..], b[..5]);
    }

    #[test]
    fn no_jitter_no_ambiguity_gives_identical_annotators() {
        let c = SynthConfig { boundary_jitter: 0.0, ambiguity_rate: 0.0, ..cfg(6) };
        for ex in generate(&c).unwrap() {
            for m in &ex.masks[1..] {
                assert_eq!(m, &ex.masks[0]);
            }
        }
    }

    #[test]
    fn annotators_disagree_with_default_settings() {
        let ex = generate(&cfg(20)).unwrap();
        let differing = ex.iter().filter(|e| e.masks.iter().any(|m| m != &e.masks[0])).count();
        assert_eq!(differing, 20);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let ex = generate(&cfg(20)).unwrap();
        let (tr, te) = split(&ex, 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (16, 4));
        let (tr2, _) = split(&ex, 0.8, 3).unwrap();
        assert_eq!(tr, tr2);
        for t in &te {
            assert!(tr.iter().all(|x| x.id != t.id));
        }
        let (tr3, _) = split(&ex, 0.8, 4).unwrap();
        assert_ne!(tr, tr3);
    }

    #[test]
    fn component_filter_drops_islands() {
        let mut m = vec![0.0; 25];
        for i in [6, 7, 12, 24] {
            m[i] = 1.0;
        }
        keep_component(&mut m, 5, (1, 1));
        assert_eq!(m.iter().sum::<f64>(), 3.0);
        assert_eq!(m[24], 0.0);
    }
}
