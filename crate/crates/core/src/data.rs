//! Synthetic segmentation data: a background plus randomly placed rectangles and
//! disks, one shape per foreground class, drawn in class-correlated colors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cdt;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

pub const IMAGE_CHANNELS: usize = 3;

/// Row-major `H×W` class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::Shape {
                op: "label map",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn valid_pixels(&self) -> usize {
        self.data.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }

    /// Every label is below `num_classes` or ignored.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            Some(i) => Err(Error::Data(format!(
                "label {} at pixel {i} outside {num_classes} classes",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_fn([1, self.height, self.width], |i| self.data[i] as f32)
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [c, h, w] = t.dims3("label map")?;
        if c != 1 {
            return Err(Error::Data(format!("label tensor has {c} channels")));
        }
        let mut data = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                return Err(Error::Data(format!("label value {v} is not a byte")));
            }
            data.push(v as u8);
        }
        Self::new(h, w, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `[channels, H, W]` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub labels: LabelMap,
}

/// Parameters of [`generate_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Per-image jitter of each class color, uniform in `±color_jitter`.
    pub color_jitter: f64,
}

impl DatasetSpec {
    pub fn new(height: usize, width: usize, num_classes: usize, noise: f64) -> Self {
        Self {
            height,
            width,
            num_classes,
            noise,
            color_jitter: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "class count {} outside [2, 255]",
                self.num_classes
            )));
        }
        if self.height.min(self.width) < MIN_SIDE {
            return Err(Error::Config(format!(
                "image {}×{} is smaller than the smallest shape footprint ({MIN_SIDE} px)",
                self.height, self.width
            )));
        }
        if !(self.noise >= 0.0 && self.color_jitter >= 0.0) {
            return Err(Error::Config("noise and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

const MIN_SIDE: usize = 8;
const MAX_ATTEMPTS: usize = 1000;

/// Base color of `class`, spread around the hue circle at moderate saturation.
pub fn class_color(class: usize, num_classes: usize) -> [f64; IMAGE_CHANNELS] {
    let hue = class as f64 / num_classes as f64;
    let mut rgb = [0.0; IMAGE_CHANNELS];
    for (k, v) in rgb.iter_mut().enumerate() {
        let phase = std::f64::consts::TAU * (hue + k as f64 / 3.0);
        *v = 0.5 + 0.2 * phase.cos();
    }
    rgb
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { top: usize, left: usize, h: usize, w: usize },
    Disk { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn random(height: usize, width: usize, rng: &mut Rng) -> Self {
        let side = height.min(width);
        if rng.uniform() < 0.5 {
            let h = side / 5 + rng.below(side / 2 - side / 5 + 1);
            let w = side / 5 + rng.below(side / 2 - side / 5 + 1);
            Shape::Rect {
                top: rng.below(height - h + 1),
                left: rng.below(width - w + 1),
                h,
                w,
            }
        } else {
            let r = rng.uniform_range(side as f64 / 8.0, side as f64 / 4.0);
            Shape::Disk {
                cy: rng.uniform_range(r, height as f64 - r),
                cx: rng.uniform_range(r, width as f64 - r),
                r,
            }
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { top, left, h, w } => y >= top && y < top + h && x >= left && x < left + w,
            Shape::Disk { cy, cx, r } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

/// Smallest visible area for a class to count as present.
fn min_visible(spec: &DatasetSpec) -> usize {
    (spec.height * spec.width / 100).max(2)
}

fn layout(spec: &DatasetSpec, rng: &mut Rng) -> Result<Vec<u8>> {
    let (h, w) = (spec.height, spec.width);
    for _ in 0..MAX_ATTEMPTS {
        let mut labels = vec![0u8; h * w];
        for class in 1..spec.num_classes {
            let shape = Shape::random(h, w, rng);
            for y in 0..h {
                for x in 0..w {
                    if shape.contains(y, x) {
                        labels[y * w + x] = class as u8;
                    }
                }
            }
        }
        let mut counts = vec![0usize; spec.num_classes];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        if counts.iter().all(|&c| c >= min_visible(spec)) {
            return Ok(labels);
        }
    }
    Err(Error::Config(format!(
        "could not place {} visible classes on a {h}×{w} image",
        spec.num_classes
    )))
}

fn render(spec: &DatasetSpec, rng: &mut Rng) -> Result<SegSample> {
    let labels = layout(spec, rng)?;
    let colors: Vec<[f64; IMAGE_CHANNELS]> = (0..spec.num_classes)
        .map(|c| {
            let mut col = class_color(c, spec.num_classes);
            for v in &mut col {
                *v += rng.uniform_range(-spec.color_jitter, spec.color_jitter);
            }
            col
        })
        .collect();
    let n = spec.height * spec.width;
    let mut image = vec![0.0f32; IMAGE_CHANNELS * n];
    for ch in 0..IMAGE_CHANNELS {
        for (p, &l) in labels.iter().enumerate() {
            let mut v = colors[l as usize][ch];
            if spec.noise > 0.0 {
                v += spec.noise * rng.normal();
            }
            image[ch * n + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(SegSample {
        image: Tensor::new([IMAGE_CHANNELS, spec.height, spec.width], image)?,
        labels: LabelMap::new(spec.height, spec.width, labels)?,
    })
}

/// `n` samples, deterministic in `seed`. Sample `i` depends only on `(seed, i)`.
///
/// Every class is visible in every sample; layouts where occlusion hides a class are
/// redrawn.
pub fn generate_dataset(n: usize, spec: &DatasetSpec, seed: u64) -> Result<Vec<SegSample>> {
    spec.validate()?;
    let root = Rng::seed(seed);
    (0..n)
        .map(|i| render(spec, &mut root.fork(i as u64)))
        .collect()
}

pub fn save_dataset(dir: impl AsRef<Path>, samples: &[SegSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    writeln!(manifest, "count={}", samples.len()).expect("string write");
    if let Some(first) = samples.first() {
        let s = first.image.shape();
        writeln!(manifest, "channels={}\nheight={}\nwidth={}", s[0], s[1], s[2])
            .expect("string write");
    }
    for (i, sample) in samples.iter().enumerate() {
        cdt::write(dir.join(image_file(i)), &sample.image)?;
        cdt::write(dir.join(labels_file(i)), &sample.labels.to_tensor())?;
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SegSample>> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&path)?;
    let count = manifest
        .lines()
        .find_map(|l| l.strip_prefix("count="))
        .and_then(|v| v.trim().parse::<usize>().ok())
        .ok_or_else(|| Error::Format {
            path: path.clone(),
            reason: "missing count".into(),
        })?;
    (0..count)
        .map(|i| {
            let image = cdt::read(dir.join(image_file(i)))?;
            let labels = LabelMap::from_tensor(&cdt::read(dir.join(labels_file(i)))?)?;
            let s = image.dims3("sample image")?;
            if s[1] != labels.height() || s[2] != labels.width() {
                return Err(Error::Data(format!("sample {i}: image and labels disagree")));
            }
            Ok(SegSample { image, labels })
        })
        .collect()
}

fn image_file(i: usize) -> String {
    format!("sample_{i:05}_image.cdt")
}

fn labels_file(i: usize) -> String {
    format!("sample_{i:05}_labels.cdt")
}
