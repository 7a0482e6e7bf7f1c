//! Complex images, synthetic multi-contrast phantoms, k-space truncation
//! degradation and on-disk samples.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayD};
use num_complex::Complex64;
use rand::Rng;

use crate::archive::Archive;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::kspace::{fft2c_array, ifft2c_array, make_mask, KSpaceMask};
use crate::seed;

/// An `H×W` complex image stored as `H×W×2` (real, imaginary).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    values: Array3<f32>,
}

impl ComplexImage {
    pub fn new(values: Array3<f32>) -> Result<Self> {
        if values.dim().2 != 2 {
            return Err(Error::shape(format!("complex image needs 2 channels, got {}", values.dim().2)));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("complex image", "non-finite entry"));
        }
        Ok(Self { values: values.as_standard_layout().into_owned() })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { values: Array3::zeros((height, width, 2)) }
    }

    pub fn from_complex(z: &Array2<Complex64>) -> Self {
        Self { values: complex_to_channels(z) }
    }

    pub fn to_complex(&self) -> Array2<Complex64> {
        channels_to_complex(&self.values)
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f32> {
        self.values
    }

    pub fn magnitude(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.height(), self.width()), |(i, j)| {
            (self.values[(i, j, 0)] as f64).hypot(self.values[(i, j, 1)] as f64)
        })
    }
}

pub fn complex_to_channels(z: &Array2<Complex64>) -> Array3<f32> {
    let (h, w) = z.dim();
    Array3::from_shape_fn((h, w, 2), |(i, j, c)| if c == 0 { z[(i, j)].re as f32 } else { z[(i, j)].im as f32 })
}

pub fn channels_to_complex(x: &Array3<f32>) -> Array2<Complex64> {
    let (h, w, _) = x.dim();
    Array2::from_shape_fn((h, w), |(i, j)| Complex64::new(x[(i, j, 0)] as f64, x[(i, j, 1)] as f64))
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Soft membership in `[0, 1]`; the edge ramps over roughly `softness`
    /// pixels.
    fn coverage(&self, x: f64, y: f64, px: f64, softness: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let rho = (u * u + v * v).sqrt();
        let dist_px = (rho - 1.0) * self.a.min(self.b) / px;
        0.5 * (1.0 - (dist_px / softness).tanh())
    }
}

const EDGE_SOFTNESS_PX: f64 = 0.75;

fn draw_geometry(rng: &mut impl Rng, n: usize) -> Vec<Ellipse> {
    let mut out = vec![Ellipse {
        cx: rng.random_range(-0.05..0.05),
        cy: rng.random_range(-0.05..0.05),
        a: rng.random_range(0.7..0.9),
        b: rng.random_range(0.7..0.9),
        theta: rng.random_range(-0.3..0.3),
    }];
    for _ in 0..n {
        let r = rng.random_range(0.0..0.45);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        out.push(Ellipse {
            cx: r * phi.cos(),
            cy: r * phi.sin(),
            a: rng.random_range(0.08..0.35),
            b: rng.random_range(0.08..0.35),
            theta: rng.random_range(0.0..std::f64::consts::PI),
        });
    }
    out
}

fn render_contrast(geometry: &[Ellipse], size: usize, rng: &mut impl Rng) -> Array2<Complex64> {
    let intensities: Vec<f64> = geometry.iter().map(|_| rng.random_range(0.2..1.0)).collect();
    // Smooth phase: a tilted plane plus one slow cosine, at most ~0.3 rad.
    let (p1, p2) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let (a3, f1, f2) = (rng.random_range(0.0..0.1), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0));
    let px = 2.0 / size as f64;
    let coord = |i: usize| (i as f64 + 0.5) * px - 1.0;
    let mut mag = Array2::<f64>::zeros((size, size));
    for ((i, j), m) in mag.indexed_iter_mut() {
        let (x, y) = (coord(j), coord(i));
        let mut v = 0.0;
        for (e, &val) in geometry.iter().zip(&intensities) {
            let alpha = e.coverage(x, y, px, EDGE_SOFTNESS_PX);
            v = v * (1.0 - alpha) + val * alpha;
        }
        *m = v;
    }
    let peak = mag.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    Array2::from_shape_fn((size, size), |(i, j)| {
        let (x, y) = (coord(j), coord(i));
        let phase = p1 * x + p2 * y + a3 * (std::f64::consts::PI * (f1 * x + f2 * y)).cos();
        Complex64::from_polar(mag[(i, j)] / peak, phase)
    })
}

/// A reference/target pair sharing anatomy, with geometry and contrast drawn
/// from the same seed.
pub fn synth_phantom(seed: u64, size: usize, num_ellipses: usize, scale: usize) -> Result<(ComplexImage, ComplexImage)> {
    synth_phantom_with(seed, seed, size, num_ellipses, scale)
}

/// Like [`synth_phantom`] with separate seeds for the ellipse geometry and
/// for the per-contrast intensities and phase.
pub fn synth_phantom_with(
    geometry_seed: u64,
    contrast_seed: u64,
    size: usize,
    num_ellipses: usize,
    scale: usize,
) -> Result<(ComplexImage, ComplexImage)> {
    if scale == 0 || size == 0 || size % scale != 0 {
        return Err(Error::config(format!("phantom size {size} is not divisible by scale {scale}")));
    }
    let geometry = draw_geometry(&mut seed::rng(geometry_seed, &[seed::stream::GEOMETRY]), num_ellipses);
    let reference = render_contrast(&geometry, size, &mut seed::rng(contrast_seed, &[seed::stream::CONTRAST, 0]));
    let target = render_contrast(&geometry, size, &mut seed::rng(contrast_seed, &[seed::stream::CONTRAST, 1]));
    Ok((ComplexImage::from_complex(&reference), ComplexImage::from_complex(&target)))
}

/// Low-resolution simulation by keeping the central `(H/s)×(W/s)` block of
/// k-space. Amplitudes are scaled by `1/s` so intensities are preserved.
pub fn degrade(hr: &ComplexImage, s: usize) -> Result<ComplexImage> {
    Ok(ComplexImage::from_complex(&degrade_array(&hr.to_complex(), s)?))
}

pub fn degrade_array(hr: &Array2<Complex64>, s: usize) -> Result<Array2<Complex64>> {
    let (h, w) = hr.dim();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::config(format!("image {h}x{w} is not divisible by scale {s}")));
    }
    let (lh, lw) = (h / s, w / s);
    let k = fft2c_array(hr);
    let (y0, x0) = (h / 2 - lh / 2, w / 2 - lw / 2);
    let crop = k.slice(s![y0..y0 + lh, x0..x0 + lw]).to_owned();
    let inv = 1.0 / s as f64;
    Ok(ifft2c_array(&crop).mapv(|v| v * inv))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

/// Plain-text index of a dataset directory.
///
/// ```text
/// # priorsr dataset
/// scale 4
/// hr_size 64
/// sample_0000 train
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub scale: usize,
    pub hr_size: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn sample_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.safetensors"))
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.id.as_str()).collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("# priorsr dataset\nscale {}\nhr_size {}\n", self.scale, self.hr_size);
        for e in &self.entries {
            out.push_str(&format!("{} {}\n", e.id, e.split));
        }
        out
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::format("manifest", format!("line {}: {msg}", line + 1));
        let (mut scale, mut hr_size, mut entries) = (None, None, Vec::new());
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (key, value) = match (parts.next(), parts.next(), parts.next()) {
                (Some(k), Some(v), None) => (k, v),
                _ => return Err(bad(n, "expected two fields")),
            };
            match key {
                "scale" => scale = Some(value.parse().map_err(|_| bad(n, "scale must be an integer"))?),
                "hr_size" => hr_size = Some(value.parse().map_err(|_| bad(n, "hr_size must be an integer"))?),
                id => entries.push(ManifestEntry { id: id.to_string(), split: value.parse()? }),
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            scale: scale.ok_or_else(|| Error::format("manifest", "missing scale"))?,
            hr_size: hr_size.ok_or_else(|| Error::format("manifest", "missing hr_size"))?,
            entries,
        })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(root, &text)
    }

    pub fn save(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))
    }
}

/// Everything one training or evaluation step needs about a sample.
#[derive(Clone, Debug)]
pub struct MultiContrastSample {
    pub sample_id: String,
    pub ref_hr: ComplexImage,
    pub target_hr: ComplexImage,
    pub target_lr: ComplexImage,
    pub mask: KSpaceMask,
}

pub fn save_sample(path: &Path, ref_hr: &ComplexImage, target_hr: &ComplexImage) -> Result<()> {
    if ref_hr.values().dim() != target_hr.values().dim() {
        return Err(Error::shape("ref_hr and target_hr differ in shape"));
    }
    let mut a = Archive::default();
    a.insert("ref_hr", ref_hr.values().clone().into_dyn());
    a.insert("target_hr", target_hr.values().clone().into_dyn());
    a.write(path)
}

fn to_image(a: &ArrayD<f32>, hr_size: usize, name: &str) -> Result<ComplexImage> {
    if a.shape() != [hr_size, hr_size, 2] {
        return Err(Error::shape(format!("{name} has shape {:?}, expected [{hr_size}, {hr_size}, 2]", a.shape())));
    }
    ComplexImage::new(a.clone().into_dimensionality().unwrap())
}

/// Builds the derived fields (LR image, mask) of a sample from its HR pair.
pub fn make_sample(cfg: &RunConfig, id: &str, ref_hr: ComplexImage, target_hr: ComplexImage) -> Result<MultiContrastSample> {
    let ks = &cfg.kspace;
    let target_lr = degrade(&target_hr, cfg.data.scale)?;
    let mask = make_mask(
        (target_hr.height(), target_hr.width()),
        ks.pattern,
        ks.acceleration,
        ks.center_fraction,
        ks.mask_seed,
    )?;
    Ok(MultiContrastSample { sample_id: id.to_string(), ref_hr, target_hr, target_lr, mask })
}

pub fn load_sample(manifest: &DatasetManifest, id: &str, cfg: &RunConfig) -> Result<MultiContrastSample> {
    if !manifest.entries.iter().any(|e| e.id == id) {
        return Err(Error::MissingFile(manifest.sample_path(id)));
    }
    if manifest.scale != cfg.data.scale || manifest.hr_size != cfg.data.hr_size {
        return Err(Error::shape(format!(
            "dataset has scale {} and hr_size {}, configuration expects scale {} and hr_size {}",
            manifest.scale, manifest.hr_size, cfg.data.scale, cfg.data.hr_size
        )));
    }
    let archive = Archive::read(&manifest.sample_path(id))?;
    let ref_hr = to_image(archive.get("ref_hr")?, manifest.hr_size, "ref_hr")?;
    let target_hr = to_image(archive.get("target_hr")?, manifest.hr_size, "target_hr")?;
    make_sample(cfg, id, ref_hr, target_hr)
}

pub fn load_split(manifest: &DatasetManifest, split: Split, cfg: &RunConfig) -> Result<Vec<MultiContrastSample>> {
    manifest.ids(split).into_iter().map(|id| load_sample(manifest, id, cfg)).collect()
}

pub fn sample_id(index: usize) -> String {
    format!("sample_{index:04}")
}

/// Generates sample `index` of the configured synthetic dataset.
pub fn synth_sample(cfg: &RunConfig, index: usize) -> Result<MultiContrastSample> {
    let d = &cfg.data;
    let (r, t) = synth_phantom_with(
        seed::derive(d.seed, &[seed::stream::GEOMETRY, index as u64]),
        seed::derive(d.seed, &[seed::stream::CONTRAST, index as u64]),
        d.hr_size,
        d.num_ellipses,
        d.scale,
    )?;
    make_sample(cfg, &sample_id(index), r, t)
}

/// In-memory training set (no files involved).
pub fn synth_train_set(cfg: &RunConfig) -> Result<Vec<MultiContrastSample>> {
    (0..cfg.data.train_samples).map(|i| synth_sample(cfg, i)).collect()
}

/// Writes `n` phantom pairs and the manifest into `root`. The first
/// `train_samples` are train, then val, then test; overflow goes to train.
pub fn synth_dataset(cfg: &RunConfig, root: &Path, n: usize) -> Result<DatasetManifest> {
    let d = &cfg.data;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let split = if i < d.train_samples {
            Split::Train
        } else if i < d.train_samples + d.val_samples {
            Split::Val
        } else if i < d.train_samples + d.val_samples + d.test_samples {
            Split::Test
        } else {
            Split::Train
        };
        let s = synth_sample(cfg, i)?;
        let manifest_stub = DatasetManifest { root: root.to_path_buf(), scale: d.scale, hr_size: d.hr_size, entries: vec![] };
        save_sample(&manifest_stub.sample_path(&s.sample_id), &s.ref_hr, &s.target_hr)?;
        entries.push(ManifestEntry { id: s.sample_id, split });
    }
    let manifest = DatasetManifest { root: root.to_path_buf(), scale: d.scale, hr_size: d.hr_size, entries };
    manifest.save()?;
    Ok(manifest)
}
