//! Procedural (shadow image, shadow mask, shadow-free image) triplets.
//!
//! The shadow-free image is a clamped sum of smooth components. A filled
//! ellipse or convex polygon forms the hard mask; a box blur of it gives the
//! penumbra `M_soft`, and the shadow image is `free * (1 - k * M_soft)`.
//! All randomness is keyed by `(seed, index)`, so any triplet can be
//! regenerated on its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::{blur_buffer, BlurKernel};
use crate::image::{load_mask, load_pnm, save_mask, save_pnm, Image, PnmError, ShadowMask};
use crate::rng::{mix, Stream};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("index {index} out of range for count {count}")]
    Index { index: usize, count: usize },
    #[error("triplet {index}: no mask satisfied the area constraint after {attempts} samples")]
    Unsatisfiable { index: usize, attempts: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error("missing {0}")]
    Missing(String),
    #[error("triplet {index:04}: member shapes disagree")]
    Shape { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub attenuation_range: (f64, f64),
    pub mask_area_range: (f64, f64),
    pub blur_radius: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 8,
            height: 64,
            width: 64,
            attenuation_range: (0.4, 0.8),
            mask_area_range: (0.1, 0.4),
            blur_radius: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (k0, k1) = self.attenuation_range;
        let (a0, a1) = self.mask_area_range;
        if self.count == 0 {
            return Err(SynthError::Config("count must be at least 1".into()));
        }
        if self.height < 32 || self.width < 32 {
            return Err(SynthError::Config("height and width must be at least 32".into()));
        }
        if !(0.0 < k0 && k0 < k1 && k1 < 1.0) {
            return Err(SynthError::Config(format!(
                "attenuation range ({k0}, {k1}) must satisfy 0 < min < max < 1"
            )));
        }
        if !(0.0 < a0 && a0 < a1 && a1 < 1.0) {
            return Err(SynthError::Config(format!(
                "mask area range ({a0}, {a1}) must satisfy 0 < min < max < 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub index: usize,
    pub shadow: Image,
    pub mask: ShadowMask,
    pub shadow_free: Image,
}

/// Generation record for one triplet (a manifest row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletInfo {
    pub index: usize,
    pub attenuation: f64,
    pub area_fraction: f64,
    pub seed: u64,
}

const MAX_MASK_ATTEMPTS: usize = 100;
const BASE_LO: f64 = 0.15;
const BASE_HI: f64 = 0.95;

// stream tags
const TAG_BASE: u64 = 1;
const TAG_MASK: u64 = 2;
const TAG_ATTEN: u64 = 3;

pub fn triplet_seed(seed: u64, index: usize) -> u64 {
    mix(&[seed, index as u64])
}

pub fn gen_triplet(config: &SynthConfig, index: usize) -> Result<(Triplet, TripletInfo), SynthError> {
    config.validate()?;
    if index >= config.count {
        return Err(SynthError::Index {
            index,
            count: config.count,
        });
    }
    let tseed = triplet_seed(config.seed, index);
    let (h, w) = (config.height, config.width);
    let free = base_image(h, w, &mut Stream::keyed(&[tseed, TAG_BASE]));
    let mask = sample_mask(config, &free, &mut Stream::keyed(&[tseed, TAG_MASK])).ok_or(SynthError::Unsatisfiable {
        index,
        attempts: MAX_MASK_ATTEMPTS,
    })?;
    let (k0, k1) = config.attenuation_range;
    let k = Stream::keyed(&[tseed, TAG_ATTEN]).uniform(k0, k1);
    let soft = soften(&mask, config.blur_radius);
    let shadow = apply_shadow(&free, &soft, k);
    let info = TripletInfo {
        index,
        attenuation: k,
        area_fraction: mask.area_fraction(),
        seed: tseed,
    };
    Ok((
        Triplet {
            index,
            shadow,
            mask,
            shadow_free: free,
        },
        info,
    ))
}

/// `free * (1 - k * soft)` per pixel, the same factor on every channel.
pub fn apply_shadow(free: &Image, soft: &[f64], k: f64) -> Image {
    let c = free.channels();
    let data = free
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * (1.0 - k * soft[i / c]))
        .collect();
    Image::new(free.height(), free.width(), c, data).expect("attenuation keeps range")
}

/// Box-blurred hard mask in `[0, 1]`, one value per pixel.
pub fn soften(mask: &ShadowMask, radius: usize) -> Vec<f64> {
    let hard: Vec<f64> = mask.data().iter().map(|&m| m as f64).collect();
    if radius == 0 {
        return hard;
    }
    blur_buffer(&hard, mask.height(), mask.width(), 1, &BlurKernel::boxed(radius))
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}

enum Component {
    Gradient { angle: f64 },
    Sinusoid { fx: f64, fy: f64, phase: f64 },
    Blob { cx: f64, cy: f64, radius: f64 },
}

impl Component {
    /// Value at normalized coordinates `u, v` in `[-0.5, 0.5]`, roughly in `[-1, 1]`.
    fn eval(&self, u: f64, v: f64) -> f64 {
        use std::f64::consts::TAU;
        match *self {
            Component::Gradient { angle } => 2.0 * (u * angle.cos() + v * angle.sin()),
            Component::Sinusoid { fx, fy, phase } => (TAU * (fx * u + fy * v) + phase).sin(),
            Component::Blob { cx, cy, radius } => {
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                (-d2 / (2.0 * radius * radius)).exp()
            }
        }
    }
}

fn base_image(h: usize, w: usize, rng: &mut Stream) -> Image {
    use std::f64::consts::TAU;
    let level = rng.uniform(0.45, 0.65);
    let tint: Vec<f64> = (0..3).map(|_| level + rng.uniform(-0.05, 0.05)).collect();
    let n = rng.int_in(2, 4) as usize;
    let mut comps = Vec::with_capacity(n);
    for _ in 0..n {
        let comp = match rng.int_in(0, 2) {
            0 => Component::Gradient {
                angle: rng.uniform(0.0, TAU),
            },
            1 => Component::Sinusoid {
                fx: rng.uniform(-1.5, 1.5),
                fy: rng.uniform(-1.5, 1.5),
                phase: rng.uniform(0.0, TAU),
            },
            _ => Component::Blob {
                cx: rng.uniform(-0.4, 0.4),
                cy: rng.uniform(-0.4, 0.4),
                radius: rng.uniform(0.08, 0.25),
            },
        };
        let amp = rng.uniform(-0.15, 0.15);
        let chan: Vec<f64> = (0..3).map(|_| amp * rng.uniform(0.8, 1.2)).collect();
        comps.push((comp, chan));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        let v = (r as f64 + 0.5) / h as f64 - 0.5;
        for col in 0..w {
            let u = (col as f64 + 0.5) / w as f64 - 0.5;
            for (ch, &t) in tint.iter().enumerate() {
                let s: f64 = comps.iter().map(|(c, a)| a[ch] * c.eval(u, v)).sum();
                data.push((t + s).clamp(BASE_LO, BASE_HI));
            }
        }
    }
    Image::new(h, w, 3, data).expect("clamped into range")
}

/// Rejection-samples a mask whose area fraction lies in the configured range
/// and whose shadow-free interior is no brighter on average than the rest of
/// the image, so the shadow region always ends up darker.
fn sample_mask(config: &SynthConfig, free: &Image, rng: &mut Stream) -> Option<ShadowMask> {
    use std::f64::consts::{PI, TAU};
    let (h, w) = (config.height, config.width);
    let (a0, a1) = config.mask_area_range;
    for _ in 0..MAX_MASK_ATTEMPTS {
        let target = rng.uniform(a0, a1);
        let aspect = rng.uniform(0.5, 2.0);
        let theta = rng.uniform(0.0, PI);
        let cx = rng.uniform(0.25, 0.75) * w as f64;
        let cy = rng.uniform(0.25, 0.75) * h as f64;
        let polygon = rng.int_in(0, 1) == 1;
        let area_px = target * (h * w) as f64;
        let data = if polygon {
            let n = rng.int_in(3, 7) as usize;
            let mut angles: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, TAU)).collect();
            angles.sort_by(f64::total_cmp);
            // vertices on an ellipse in angular order form a convex polygon;
            // scale it so its area hits the target
            let unit: Vec<(f64, f64)> = angles
                .iter()
                .map(|&a| rotate(aspect.sqrt() * a.cos(), a.sin() / aspect.sqrt(), theta))
                .collect();
            let unit_area = polygon_area(&unit);
            if unit_area < 1e-3 {
                continue;
            }
            let s = (area_px / unit_area).sqrt();
            let verts: Vec<(f64, f64)> = unit.iter().map(|&(x, y)| (cx + s * x, cy + s * y)).collect();
            raster(h, w, |x, y| inside_convex(&verts, x, y))
        } else {
            let ra = (area_px * aspect / PI).sqrt();
            let rb = (area_px / (aspect * PI)).sqrt();
            raster(h, w, |x, y| {
                let (dx, dy) = rotate(x - cx, y - cy, -theta);
                (dx / ra).powi(2) + (dy / rb).powi(2) <= 1.0
            })
        };
        let mask = ShadowMask::new(h, w, data).expect("binary raster");
        let frac = mask.area_fraction();
        if !(a0..=a1).contains(&frac) {
            continue;
        }
        let inside = crate::image::region_mean(free, &mask, true);
        let outside = crate::image::region_mean(free, &mask, false);
        match (inside, outside) {
            (Some(i), Some(o)) if i <= o => return Some(mask),
            _ => continue,
        }
    }
    None
}

fn rotate(x: f64, y: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * x - s * y, s * x + c * y)
}

fn polygon_area(v: &[(f64, f64)]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (x0, y0) = v[i];
            let (x1, y1) = v[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Counter-clockwise convex polygon containment.
fn inside_convex(v: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = v.len();
    (0..n).all(|i| {
        let (x0, y0) = v[i];
        let (x1, y1) = v[(i + 1) % n];
        (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
    })
}

fn raster(h: usize, w: usize, inside: impl Fn(f64, f64) -> bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            out.push(u8::from(inside(c as f64 + 0.5, r as f64 + 0.5)));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub config: SynthConfig,
    pub rows: Vec<TripletInfo>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl Manifest {
    /// Tab-separated text: a comment line with the generating config, a
    /// column header, then one row per triplet.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "# shadowstorm-manifest v1 seed={} count={} size={}x{} attenuation={}..{} area={}..{} blur_radius={}\n",
            c.seed,
            c.count,
            c.height,
            c.width,
            c.attenuation_range.0,
            c.attenuation_range.1,
            c.mask_area_range.0,
            c.mask_area_range.1,
            c.blur_radius
        );
        s.push_str("index\tk\tarea_fraction\tseed\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:04}\t{:.9}\t{:.9}\t{}",
                r.index, r.attenuation, r.area_fraction, r.seed
            );
        }
        s
    }
}

pub fn triplet_paths(dir: &Path, index: usize) -> [PathBuf; 3] {
    [
        dir.join(format!("shadow_{index:04}.ppm")),
        dir.join(format!("mask_{index:04}.pgm")),
        dir.join(format!("free_{index:04}.ppm")),
    ]
}

pub fn gen_dataset(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest, SynthError> {
    config.validate()?;
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut rows = Vec::with_capacity(config.count);
    for index in 0..config.count {
        let (t, info) = gen_triplet(config, index)?;
        let [sp, mp, fp] = triplet_paths(dir, index);
        save_pnm(&t.shadow, sp)?;
        save_mask(&t.mask, mp)?;
        save_pnm(&t.shadow_free, fp)?;
        rows.push(info);
    }
    let manifest = Manifest {
        config: config.clone(),
        rows,
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_text()).map_err(|source| SynthError::Io {
        path: mpath.display().to_string(),
        source,
    })?;
    Ok(manifest)
}

/// Loads every `shadow_NNNN / mask_NNNN / free_NNNN` triplet in `dir`, sorted
/// by index. Images may be `.ppm` or `.pgm`; masks are thresholded at 0.5.
pub fn load_triplet_dir(dir: impl AsRef<Path>) -> Result<Vec<Triplet>, SynthError> {
    let dir = dir.as_ref();
    let io = |source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    };
    // index -> [shadow, mask, free]
    let mut found: BTreeMap<usize, [Option<PathBuf>; 3]> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some((stem, ext)) = name.rsplit_once('.') else {
            continue;
        };
        if ext != "ppm" && ext != "pgm" {
            continue;
        }
        let Some((kind, idx)) = stem.rsplit_once('_') else {
            continue;
        };
        let slot = match kind {
            "shadow" => 0,
            "mask" => 1,
            "free" => 2,
            _ => continue,
        };
        let Ok(index) = idx.parse::<usize>() else {
            continue;
        };
        found.entry(index).or_default()[slot] = Some(path);
    }
    let mut out = Vec::with_capacity(found.len());
    for (index, [s, m, f]) in found {
        let need = |p: Option<PathBuf>, kind: &str| p.ok_or_else(|| SynthError::Missing(format!("{kind}_{index:04}")));
        let (s, m, f) = (need(s, "shadow")?, need(m, "mask")?, need(f, "free")?);
        let shadow = load_pnm(s)?;
        let mask = load_mask(m, 0.5)?;
        let shadow_free = load_pnm(f)?;
        if !shadow.same_shape(&shadow_free) || !mask.matches(&shadow) {
            return Err(SynthError::Shape { index });
        }
        out.push(Triplet {
            index,
            shadow,
            mask,
            shadow_free,
        });
    }
    Ok(out)
}
