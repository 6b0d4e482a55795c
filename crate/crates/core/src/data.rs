//! Dataset ingestion, preprocessing, splitting and synthetic scenes.
//!
//! On-disk layout is one directory per class holding images:
//! `root/<class_name>/<image>.ppm`. Class indices follow the lexicographic
//! order of the directory names. Images are binary PPM (`.ppm`) or raw
//! `(h, w, c)` tensors in the checkpoint tensor container (`.smxt`), both
//! holding values in `[0, 255]`. Other formats must be converted offline.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

// ---------------------------------------------------------------------------
// In-memory batches

/// A stack of equally sized images `(n, y, x, c)` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Real> LabeledImages<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if images.dims().len() != 4 || images.dims()[0] != labels.len() {
            return Err(Error::Dataset(format!(
                "{} labels for image stack {}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(LabeledImages { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn image_dims(&self) -> &[usize] {
        &self.images.dims()[1..]
    }

    /// Copies the listed samples into a new batch.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per: usize = self.image_dims().iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Dataset(format!("sample {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..][..per]);
            labels.push(self.labels[i]);
        }
        let mut dims = vec![idx.len()];
        dims.extend_from_slice(self.image_dims());
        Ok((Tensor::from_vec(&dims, data)?, labels))
    }

    pub fn cast<U: Real>(&self) -> LabeledImages<U> {
        LabeledImages {
            images: self.images.cast(),
            labels: self.labels.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            _ => Err(Error::Dataset(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleSource {
    File(PathBuf),
    Memory(Tensor<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Stable identity, the `/`-separated path relative to the dataset root.
    pub id: String,
    pub class: usize,
    pub source: SampleSource,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn count(&self, class: usize, split: Split) -> usize {
        self.samples
            .iter()
            .filter(|s| s.class == class && s.split == split)
            .count()
    }

    /// `path,class,split` rows in manifest order.
    pub fn split_csv(&self) -> String {
        let mut s = String::from("path,class,split\n");
        for smp in &self.samples {
            s.push_str(&format!(
                "{},{},{}\n",
                smp.id, self.class_names[smp.class], smp.split
            ));
        }
        s
    }

    /// Applies split assignments from [`DatasetManifest::split_csv`] output.
    /// Every sample must appear exactly once with a matching class.
    pub fn apply_split_csv(&mut self, text: &str) -> Result<()> {
        use std::collections::HashMap;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("path,class,split") {
            return Err(Error::Dataset("split manifest must start with path,class,split".into()));
        }
        let mut assigned: HashMap<&str, (&str, Split)> = HashMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut parts = line.rsplitn(3, ',');
            let (split, class, path) = match (parts.next(), parts.next(), parts.next()) {
                (Some(s), Some(c), Some(p)) => (s.trim(), c, p),
                _ => return Err(Error::Dataset(format!("malformed manifest row {line:?}"))),
            };
            if assigned.insert(path, (class, Split::parse(split)?)).is_some() {
                return Err(Error::Dataset(format!("{path} listed twice")));
            }
        }
        if assigned.len() != self.samples.len() {
            return Err(Error::Dataset(format!(
                "manifest lists {} samples, dataset has {}",
                assigned.len(),
                self.samples.len()
            )));
        }
        for smp in &mut self.samples {
            let (class, split) = assigned
                .get(smp.id.as_str())
                .ok_or_else(|| Error::Dataset(format!("{} missing from manifest", smp.id)))?;
            if *class != self.class_names[smp.class] {
                return Err(Error::Dataset(format!(
                    "{} is class {} in the dataset but {class} in the manifest",
                    smp.id, self.class_names[smp.class]
                )));
            }
            smp.split = *split;
        }
        Ok(())
    }

    /// Decodes, resizes to `h x w` and scales to `[0, 1]` every sample of
    /// `split`, in manifest order.
    pub fn materialize(&self, split: Split, h: usize, w: usize) -> Result<LabeledImages<f32>> {
        let picked: Vec<&Sample> = self.samples.iter().filter(|s| s.split == split).collect();
        if picked.is_empty() {
            return Err(Error::Dataset(format!("no samples assigned to the {split} split")));
        }
        let images: Vec<Tensor<f32>> = picked
            .par_iter()
            .map(|s| -> Result<Tensor<f32>> {
                let img = match &s.source {
                    SampleSource::File(p) => read_image(p)?,
                    SampleSource::Memory(t) => t.clone(),
                };
                Ok(normalize(&resize_bilinear(&img, h, w)?))
            })
            .collect::<Result<_>>()?;
        let c = images.first().map_or(3, |t| t.dims()[2]);
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in &images {
            if img.dims()[2] != c {
                return Err(Error::Dataset("images disagree on channel count".into()));
            }
            data.extend_from_slice(img.data());
        }
        let labels = picked.iter().map(|s| s.class).collect();
        LabeledImages::new(Tensor::from_vec(&[images.len(), h, w, c], data)?, labels)
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("smxt"))
}

/// Reads a `.ppm` or `.smxt` image as an `(h, w, c)` tensor of byte-range
/// values.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let smxt = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("smxt"));
    let img = if smxt {
        crate::model::checkpoint::tensor_from_bytes(&bytes)
    } else {
        decode_ppm(&bytes)
    }
    .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if img.dims().len() != 3 {
        return Err(Error::Dataset(format!(
            "{}: image tensor must be (h, w, c), got {}",
            path.display(),
            img.shape()
        )));
    }
    Ok(img)
}

/// Scans `root/<class>/<image>` for `.ppm` and `.smxt` files; other files
/// are ignored.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let mut class_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            class_dirs.push((name, path));
        }
    }
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} must contain at least two class directories, found {}",
            root.display(),
            class_dirs.len()
        )));
    }
    let mut samples = Vec::new();
    let mut class_names = Vec::with_capacity(class_dirs.len());
    for (class, (name, dir)) in class_dirs.into_iter().enumerate() {
        let mut files: Vec<(String, PathBuf)> = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.is_file() && is_image_file(&path) {
                files.push((entry.file_name().to_string_lossy().into_owned(), path));
            }
        }
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "class directory {} contains no .ppm or .smxt images",
                dir.display()
            )));
        }
        files.sort();
        for (file, path) in files {
            fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            samples.push(Sample {
                id: format!("{name}/{file}"),
                class,
                source: SampleSource::File(path),
                split: Split::Unassigned,
            });
        }
        class_names.push(name);
    }
    Ok(DatasetManifest {
        class_names,
        samples,
    })
}

/// Writes every in-memory sample to `root/<id>` as binary PPM.
pub fn write_ppm_tree(manifest: &DatasetManifest, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for s in &manifest.samples {
        let img = match &s.source {
            SampleSource::Memory(t) => t.clone(),
            SampleSource::File(p) => read_image(p)?,
        };
        let path = root.join(&s.id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, encode_ppm(&img)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PPM

/// Decodes a binary (`P6`, maxval 255) PPM into an `(h, w, 3)` tensor of
/// byte values.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Format(format!(
            "unsupported format {magic:?}, only binary PPM (P6) is read"
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("truncated PPM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed PPM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("PPM header value out of range".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("PPM with zero extent".into()));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("truncated PPM header".into())),
    }
    let need = w * h * 3;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Format(format!(
            "truncated PPM payload: {} of {need} bytes",
            payload.len()
        )));
    }
    let data = payload[..need].iter().map(|&b| b as f32).collect();
    Tensor::from_vec(&[h, w, 3], data)
}

/// Encodes an `(h, w, 3)` tensor as binary PPM, rounding and clamping each
/// value to a byte.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match *img.dims() {
        [h, w, 3] => (h, w),
        _ => return Err(Error::Format(format!("PPM needs (h, w, 3), got {}", img.shape()))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Bilinear resampling with half-pixel centers; edge samples are clamped.
/// Same-size requests return an exact copy.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = match *img.dims() {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::Format(format!("resize expects (h, w, c), got {}", img.shape()))),
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Format(format!("cannot resize to {out_h}x{out_w}")));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let axis = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let src = img.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(ox, w, out_w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::from_vec(&[out_h, out_w, c], out)
}

/// Byte range `[0, 255]` to `[0, 1]`.
pub fn normalize(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| v / 255.0)
}

// ---------------------------------------------------------------------------
// Splitting

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.70,
            val: 0.15,
            test: 0.15,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        SplitSpec {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|&f| f.is_nan() || f <= 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {fr:?} must be positive and sum to 1"
            )));
        }
        Ok(())
    }

    /// `(train, val, test)` for a class of `n` samples: validation and test
    /// take `floor(fraction * n)`, training takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        // The small offset keeps products such as 0.15 * 20 from flooring
        // one below the exact value.
        let take = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
        let (val, test) = (take(self.val), take(self.test));
        (n - val - test, val, test)
    }
}

/// Per-class shuffle (ChaCha seeded with `seed ^ class`) of the samples
/// sorted by id, then validation, test and training slices.
pub fn stratified_split(manifest: &mut DatasetManifest, spec: &SplitSpec) -> Result<()> {
    spec.validate()?;
    for class in 0..manifest.num_classes() {
        let mut members: Vec<usize> = (0..manifest.samples.len())
            .filter(|&i| manifest.samples[i].class == class)
            .collect();
        if members.len() < 3 {
            return Err(Error::Dataset(format!(
                "class {} has {} samples, at least 3 are needed to split",
                manifest.class_names[class],
                members.len()
            )));
        }
        members.sort_by(|&a, &b| manifest.samples[a].id.cmp(&manifest.samples[b].id));
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ class as u64);
        members.shuffle(&mut rng);
        let (_, val, test) = spec.counts(members.len());
        for (rank, &i) in members.iter().enumerate() {
            manifest.samples[i].split = if rank < val {
                Split::Val
            } else if rank < val + test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic scenes

pub const PATTERNS: [&str; 6] = ["hstripes", "checker", "radial", "blobs", "dstripes", "rings"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise, in byte units.
    pub noise_sigma: f64,
    /// Random phase, scale and position variation per sample.
    pub jitter: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            per_class: 250,
            side: 64,
            seed: 0,
            noise_sigma: 10.0,
            jitter: true,
        }
    }
}

struct Variation {
    phase: f64,
    scale: f64,
    cx: f64,
    cy: f64,
    blobs: Vec<(f64, f64, f64)>,
}

impl Variation {
    fn template(side: f64) -> Self {
        Variation {
            phase: 0.0,
            scale: 1.0,
            cx: side / 2.0,
            cy: side / 2.0,
            blobs: vec![
                (0.25 * side, 0.30 * side, 0.10 * side),
                (0.70 * side, 0.35 * side, 0.12 * side),
                (0.45 * side, 0.75 * side, 0.09 * side),
                (0.80 * side, 0.80 * side, 0.07 * side),
            ],
        }
    }

    fn random(rng: &mut ChaCha8Rng, side: f64) -> Self {
        let n_blobs = rng.random_range(3..=5);
        Variation {
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            scale: rng.random_range(0.8..1.25),
            cx: side / 2.0 + rng.random_range(-side / 8.0..side / 8.0),
            cy: side / 2.0 + rng.random_range(-side / 8.0..side / 8.0),
            blobs: (0..n_blobs)
                .map(|_| {
                    (
                        rng.random_range(0.1 * side..0.9 * side),
                        rng.random_range(0.1 * side..0.9 * side),
                        rng.random_range(0.06 * side..0.13 * side),
                    )
                })
                .collect(),
        }
    }
}

/// Intensity in `[0, 1]` of pattern `kind` at pixel `(y, x)`.
fn pattern_value(kind: usize, y: f64, x: f64, side: f64, v: &Variation) -> f64 {
    use std::f64::consts::TAU;
    let period = side / 8.0 * v.scale;
    match kind {
        0 => 0.5 + 0.5 * (TAU * y / period + v.phase).sin(),
        1 => {
            let cell = period;
            let off = v.phase / TAU * 2.0 * cell;
            let a = ((x + off) / cell).floor() as i64;
            let b = ((y + off) / cell).floor() as i64;
            if (a + b).rem_euclid(2) == 0 {
                1.0
            } else {
                0.0
            }
        }
        2 => {
            let d = ((x - v.cx).powi(2) + (y - v.cy).powi(2)).sqrt();
            (1.0 - d / (side * 0.75)).clamp(0.0, 1.0)
        }
        3 => {
            let s: f64 = v
                .blobs
                .iter()
                .map(|&(bx, by, r)| (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * r * r)).exp())
                .sum();
            s.min(1.0)
        }
        4 => 0.5 + 0.5 * (TAU * (x + y) / (period * std::f64::consts::SQRT_2) + v.phase).sin(),
        5 => {
            let d = ((x - v.cx).powi(2) + (y - v.cy).powi(2)).sqrt();
            0.5 + 0.5 * (TAU * d / period + v.phase).sin()
        }
        _ => unreachable!("pattern index checked by caller"),
    }
}

/// Generates `classes * per_class` textured RGB scenes of `side x side`
/// pixels with integer byte values. The patterns are the first `classes`
/// entries of [`PATTERNS`]; class indices and sample order follow the sorted
/// names, as [`load_dataset`] would produce for the written tree.
pub fn synth_generate(spec: &SynthSpec) -> Result<DatasetManifest> {
    if spec.classes < 2 || spec.classes > PATTERNS.len() {
        return Err(Error::Config(format!(
            "synthetic classes must be in 2..={}, got {}",
            PATTERNS.len(),
            spec.classes
        )));
    }
    if spec.per_class == 0 || spec.side == 0 {
        return Err(Error::Config("per_class and side must be >= 1".into()));
    }
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let side = spec.side as f64;
    let mut class_names: Vec<String> = PATTERNS[..spec.classes].iter().map(|s| s.to_string()).collect();
    class_names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for (kind, name) in PATTERNS.iter().take(spec.classes).enumerate() {
        let class = class_names.iter().position(|c| c == name).expect("name is listed");
        for i in 0..spec.per_class {
            let var = if spec.jitter {
                Variation::random(&mut rng, side)
            } else {
                Variation::template(side)
            };
            let mut data = Vec::with_capacity(spec.side * spec.side * 3);
            for y in 0..spec.side {
                for x in 0..spec.side {
                    let v = pattern_value(kind, y as f64 + 0.5, x as f64 + 0.5, side, &var);
                    for _ in 0..3 {
                        let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                        data.push((40.0 + 175.0 * v + n).round().clamp(0.0, 255.0) as f32);
                    }
                }
            }
            samples.push(Sample {
                id: format!("{name}/{name}_{i:05}.ppm"),
                class,
                source: SampleSource::Memory(Tensor::from_vec(&[spec.side, spec.side, 3], data)?),
                split: Split::Unassigned,
            });
        }
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(DatasetManifest { class_names, samples })
}
