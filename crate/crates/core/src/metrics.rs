//! Full-reference quality metrics with shadow / non-shadow region splits,
//! plus perturbation norms.
//!
//! PSNR uses peak 1.0 and averages squared error over every channel of the
//! selected pixels. SSIM is the standard single-scale form: 11x11 Gaussian
//! window (sigma 1.5, renormalized after truncation), K1 = 0.01, K2 = 0.03,
//! computed per channel over valid windows only. A region's SSIM is the mean
//! of the map over windows whose center pixel belongs to the region, then
//! averaged over channels.

use std::fmt;

use thiserror::Error;

use crate::image::{Image, Perturbation, ShadowMask};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape([usize; 3], [usize; 3]),
    #[error("region {0} requires a shadow mask")]
    MissingMask(Region),
    #[error("mask is {mask_h}x{mask_w} but image is {h}x{w}")]
    MaskShape {
        mask_h: usize,
        mask_w: usize,
        h: usize,
        w: usize,
    },
    #[error("region {0} selects no pixels")]
    EmptyRegion(Region),
    #[error("image {h}x{w} is smaller than the {win}x{win} SSIM window")]
    TooSmall { h: usize, w: usize, win: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Region {
    All,
    Shadow,
    NonShadow,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::All, Region::Shadow, Region::NonShadow];

    fn selects(self, mask: Option<&ShadowMask>, row: usize, col: usize) -> bool {
        match (self, mask) {
            (Region::All, _) => true,
            (Region::Shadow, Some(m)) => m.is_shadow(row, col),
            (Region::NonShadow, Some(m)) => !m.is_shadow(row, col),
            (_, None) => false,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::All => "all",
            Region::Shadow => "shadow",
            Region::NonShadow => "nonshadow",
        })
    }
}

fn check_inputs(x: &Image, y: &Image, mask: Option<&ShadowMask>, region: Region) -> Result<(), MetricError> {
    if !x.same_shape(y) {
        return Err(MetricError::Shape(x.shape(), y.shape()));
    }
    match (region, mask) {
        (Region::All, _) => {}
        (r, None) => return Err(MetricError::MissingMask(r)),
        (_, Some(m)) => {
            if !m.matches(x) {
                return Err(MetricError::MaskShape {
                    mask_h: m.height(),
                    mask_w: m.width(),
                    h: x.height(),
                    w: x.width(),
                });
            }
        }
    }
    Ok(())
}

/// Sum of squared differences and number of entries over a region.
pub fn region_sse(
    x: &Image,
    y: &Image,
    mask: Option<&ShadowMask>,
    region: Region,
) -> Result<(f64, usize), MetricError> {
    check_inputs(x, y, mask, region)?;
    let (w, c) = (x.width(), x.channels());
    let mut sse = 0.0;
    let mut n = 0;
    for (p, (px, py)) in x.data().chunks_exact(c).zip(y.data().chunks_exact(c)).enumerate() {
        if region.selects(mask, p / w, p % w) {
            sse += px.iter().zip(py).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            n += c;
        }
    }
    if n == 0 {
        return Err(MetricError::EmptyRegion(region));
    }
    Ok((sse, n))
}

pub fn mse(x: &Image, y: &Image, mask: Option<&ShadowMask>, region: Region) -> Result<f64, MetricError> {
    let (sse, n) = region_sse(x, y, mask, region)?;
    Ok(sse / n as f64)
}

/// Peak-1.0 PSNR in dB; `f64::INFINITY` when the region matches exactly.
pub fn psnr(x: &Image, y: &Image, mask: Option<&ShadowMask>, region: Region) -> Result<f64, MetricError> {
    let m = mse(x, y, mask, region)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let g: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Dense SSIM map: `channels` planes of `(h - 10) x (w - 10)` values, the
/// map pixel `(i, j)` being the window centered on image pixel `(i + 5, j + 5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Indexed `[channel][row * width + col]`.
    pub planes: Vec<Vec<f64>>,
}

fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|t| g[t] * src[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|t| g[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

pub fn ssim_map(x: &Image, y: &Image) -> Result<SsimMap, MetricError> {
    if !x.same_shape(y) {
        return Err(MetricError::Shape(x.shape(), y.shape()));
    }
    let [h, w, ch] = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall { h, w, win: SSIM_WINDOW });
    }
    let g = gaussian_window();
    let plane = |img: &Image, c: usize| -> Vec<f64> { img.data().iter().skip(c).step_by(ch).copied().collect() };
    let mut planes = Vec::with_capacity(ch);
    for c in 0..ch {
        let (px, py) = (plane(x, c), plane(y, c));
        let xx: Vec<f64> = px.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = py.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = px.iter().zip(&py).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&px, h, w, &g);
        let my = filter_valid(&py, h, w, &g);
        let exx = filter_valid(&xx, h, w, &g);
        let eyy = filter_valid(&yy, h, w, &g);
        let exy = filter_valid(&xy, h, w, &g);
        let map = (0..mx.len())
            .map(|i| {
                let (a, b) = (mx[i], my[i]);
                let sx = exx[i] - a * a;
                let sy = eyy[i] - b * b;
                let sxy = exy[i] - a * b;
                ((2.0 * a * b + SSIM_C1) * (2.0 * sxy + SSIM_C2)) / ((a * a + b * b + SSIM_C1) * (sx + sy + SSIM_C2))
            })
            .collect();
        planes.push(map);
    }
    Ok(SsimMap {
        height: h + 1 - SSIM_WINDOW,
        width: w + 1 - SSIM_WINDOW,
        channels: ch,
        planes,
    })
}

pub fn ssim(x: &Image, y: &Image, mask: Option<&ShadowMask>, region: Region) -> Result<f64, MetricError> {
    check_inputs(x, y, mask, region)?;
    let map = ssim_map(x, y)?;
    let off = SSIM_WINDOW / 2;
    let selected: Vec<usize> = (0..map.height * map.width)
        .filter(|&i| region.selects(mask, i / map.width + off, i % map.width + off))
        .collect();
    if selected.is_empty() {
        return Err(MetricError::EmptyRegion(region));
    }
    let per_channel: f64 = map
        .planes
        .iter()
        .map(|p| selected.iter().map(|&i| p[i]).sum::<f64>() / selected.len() as f64)
        .sum();
    Ok(per_channel / map.channels as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationNorms {
    /// `(1/n) * sum |delta_i|`
    pub l1_mean: f64,
    pub linf: f64,
    /// `max_i |delta_i| / max(I_i, floor)`
    pub linf_normalized: f64,
}

pub fn perturbation_norms(delta: &Perturbation, image: &Image, floor: f64) -> Result<PerturbationNorms, MetricError> {
    if !delta.matches(image) {
        return Err(MetricError::Shape(delta.shape(), image.shape()));
    }
    let mut l1 = 0.0;
    let mut linf: f64 = 0.0;
    let mut linf_n: f64 = 0.0;
    for (&d, &i) in delta.data().iter().zip(image.data()) {
        l1 += d.abs();
        linf = linf.max(d.abs());
        linf_n = linf_n.max(d.abs() / i.max(floor));
    }
    Ok(PerturbationNorms {
        l1_mean: l1 / delta.len() as f64,
        linf,
        linf_normalized: linf_n,
    })
}

/// `|delta_i| / max(I_i, floor)` per entry; deliberately unclamped.
pub fn normalized_perturbation_map(delta: &Perturbation, image: &Image, floor: f64) -> Result<Vec<f64>, MetricError> {
    if !delta.matches(image) {
        return Err(MetricError::Shape(delta.shape(), image.shape()));
    }
    Ok(delta
        .data()
        .iter()
        .zip(image.data())
        .map(|(d, &i)| d.abs() / i.max(floor))
        .collect())
}

/// Mean of a per-entry map over the pixels of one region (all channels).
pub fn region_map_mean(map: &[f64], image: &Image, mask: &ShadowMask, region: Region) -> Option<f64> {
    let (w, c) = (image.width(), image.channels());
    let (s, n) = map
        .chunks_exact(c)
        .enumerate()
        .filter(|(p, _)| region.selects(Some(mask), p / w, p % w))
        .fold((0.0, 0usize), |(s, n), (_, px)| (s + px.iter().sum::<f64>(), n + c));
    (n > 0).then(|| s / n as f64)
}

/// PSNR and SSIM for the three regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionScores {
    pub psnr_all: f64,
    pub psnr_shadow: f64,
    pub psnr_nonshadow: f64,
    pub ssim_all: f64,
    pub ssim_shadow: f64,
    pub ssim_nonshadow: f64,
}

impl RegionScores {
    pub fn compute(x: &Image, y: &Image, mask: &ShadowMask) -> Result<Self, MetricError> {
        let m = Some(mask);
        Ok(Self {
            psnr_all: psnr(x, y, m, Region::All)?,
            psnr_shadow: psnr(x, y, m, Region::Shadow)?,
            psnr_nonshadow: psnr(x, y, m, Region::NonShadow)?,
            ssim_all: ssim(x, y, m, Region::All)?,
            ssim_shadow: ssim(x, y, m, Region::Shadow)?,
            ssim_nonshadow: ssim(x, y, m, Region::NonShadow)?,
        })
    }

    pub fn psnr(&self, region: Region) -> f64 {
        match region {
            Region::All => self.psnr_all,
            Region::Shadow => self.psnr_shadow,
            Region::NonShadow => self.psnr_nonshadow,
        }
    }

    pub fn ssim(&self, region: Region) -> f64 {
        match region {
            Region::All => self.ssim_all,
            Region::Shadow => self.ssim_shadow,
            Region::NonShadow => self.ssim_nonshadow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub scores: RegionScores,
    pub norms: PerturbationNorms,
}

/// CSV number format: rounded to 9 significant digits, then printed as the
/// shortest plain decimal; `inf` / `-inf` / `nan` for non-finite values.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
        format!("{}", rounded + 0.0)
    }
}

/// Inverse of [`format_value`] (accepts any float syntax plus `inf`).
pub fn parse_value(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use proptest::prelude::*;

    fn random(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut s = Stream::new(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| s.unit()).collect()).unwrap()
    }

    fn half_mask(h: usize, w: usize) -> ShadowMask {
        ShadowMask::new(h, w, (0..h * w).map(|p| u8::from(p % w < w / 2)).collect()).unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let x = random(4, 4, 3, 1);
        assert_eq!(psnr(&x, &x, None, Region::All).unwrap(), f64::INFINITY);
        assert_eq!(format_value(f64::INFINITY), "inf");
    }

    #[test]
    fn psnr_constant_pair() {
        let x = Image::filled(8, 8, 3, 0.5).unwrap();
        let y = Image::filled(8, 8, 3, 0.6).unwrap();
        assert!((psnr(&x, &y, None, Region::All).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn masked_psnr_two_pixels() {
        let x = Image::new(1, 2, 1, vec![0.5, 0.5]).unwrap();
        let y = Image::new(1, 2, 1, vec![0.6, 0.8]).unwrap();
        let m = ShadowMask::new(1, 2, vec![1, 0]).unwrap();
        let s = psnr(&x, &y, Some(&m), Region::Shadow).unwrap();
        let ns = psnr(&x, &y, Some(&m), Region::NonShadow).unwrap();
        assert!((s - 20.0).abs() < 1e-9);
        // hand-computed: 10 log10(1 / 0.09)
        assert!((ns - 10.457_574_905_606_752).abs() < 1e-9);
    }

    #[test]
    fn region_errors() {
        let x = random(4, 4, 1, 2);
        assert_eq!(
            psnr(&x, &x, None, Region::Shadow),
            Err(MetricError::MissingMask(Region::Shadow))
        );
        let all_lit = ShadowMask::new(4, 4, vec![0; 16]).unwrap();
        assert_eq!(
            psnr(&x, &x, Some(&all_lit), Region::Shadow),
            Err(MetricError::EmptyRegion(Region::Shadow))
        );
        let y = random(4, 5, 1, 2);
        assert!(matches!(psnr(&x, &y, None, Region::All), Err(MetricError::Shape(..))));
        assert!(matches!(
            ssim(&x, &x, None, Region::All),
            Err(MetricError::TooSmall { .. })
        ));
    }

    #[test]
    fn ssim_identity_is_one() {
        let x = random(16, 13, 3, 3);
        assert_eq!(ssim(&x, &x, None, Region::All).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_pair_closed_form() {
        let x = Image::filled(16, 16, 1, 0.5).unwrap();
        let y = Image::filled(16, 16, 1, 0.3).unwrap();
        let want = (2.0 * 0.5 * 0.3 + 1e-4) / (0.25 + 0.09 + 1e-4);
        let got = ssim(&x, &y, None, Region::All).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got - 0.882_388).abs() < 1e-6);
    }

    #[test]
    fn ssim_region_uses_window_centers() {
        let x = random(20, 20, 1, 4);
        let y = random(20, 20, 1, 5);
        let m = half_mask(20, 20);
        let s = ssim(&x, &y, Some(&m), Region::Shadow).unwrap();
        let ns = ssim(&x, &y, Some(&m), Region::NonShadow).unwrap();
        let all = ssim(&x, &y, Some(&m), Region::All).unwrap();
        // centers 5..15, split at column 10: 5 shadow columns, 5 lit
        assert!(((s + ns) / 2.0 - all).abs() < 1e-12);
        // shadow covers columns 0..10 but only centers 5..10 are in the map
        let narrow = ShadowMask::new(20, 20, (0..400).map(|p| u8::from(p % 20 < 5)).collect()).unwrap();
        assert_eq!(
            ssim(&x, &y, Some(&narrow), Region::Shadow),
            Err(MetricError::EmptyRegion(Region::Shadow))
        );
    }

    #[test]
    fn perturbation_norms_direct() {
        let img = Image::new(1, 2, 1, vec![0.5, 0.8]).unwrap();
        let d = Perturbation::for_image(&img, vec![0.1, -0.2]).unwrap();
        let n = perturbation_norms(&d, &img, 1.0 / 255.0).unwrap();
        assert!((n.l1_mean - 0.15).abs() < 1e-15);
        assert_eq!(n.linf, 0.2);
        assert!((n.linf_normalized - 0.25).abs() < 1e-15);
        let z = perturbation_norms(&Perturbation::zeros_like(&img), &img, 1.0 / 255.0).unwrap();
        assert_eq!((z.l1_mean, z.linf, z.linf_normalized), (0.0, 0.0, 0.0));
    }

    #[test]
    fn normalized_map_is_unclamped() {
        let img = Image::new(1, 2, 1, vec![0.1, 0.0]).unwrap();
        let d = Perturbation::for_image(&img, vec![0.05, 0.02]).unwrap();
        let m = normalized_perturbation_map(&d, &img, 1.0 / 255.0).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-15);
        assert!((m[1] - 5.1).abs() < 1e-12);
    }

    #[test]
    fn value_formatting() {
        assert_eq!(format_value(0.5), "0.5");
        assert_eq!(format_value(16.0 / 255.0), "0.062745098");
        assert_eq!(format_value(20.0), "20");
        assert_eq!(format_value(1234.5678912), "1234.56789");
        assert_eq!(format_value(1e-9), "0.000000001");
        assert_eq!(format_value(-0.0), "0");
        assert_eq!(parse_value("inf"), Some(f64::INFINITY));
        assert_eq!(parse_value(&format_value(0.123456789123)), Some(0.123456789));
    }

    proptest! {
        #[test]
        fn mse_region_additivity(seed in any::<u64>(), h in 2usize..9, w in 2usize..9) {
            let x = random(h, w, 3, seed);
            let y = random(h, w, 3, seed ^ 0xabc);
            let mut s = Stream::new(seed.wrapping_add(1));
            let mut md: Vec<u8> = (0..h * w).map(|_| u8::from(s.unit() < 0.5)).collect();
            md[0] = 1;
            md[1] = 0;
            let m = ShadowMask::new(h, w, md).unwrap();
            let (sa, na) = region_sse(&x, &y, Some(&m), Region::All).unwrap();
            let (ss, ns) = region_sse(&x, &y, Some(&m), Region::Shadow).unwrap();
            let (sn, nn) = region_sse(&x, &y, Some(&m), Region::NonShadow).unwrap();
            prop_assert_eq!(na, ns + nn);
            let lhs = na as f64 * (sa / na as f64);
            let rhs = ns as f64 * (ss / ns as f64) + nn as f64 * (sn / nn as f64);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(1.0));
        }

        #[test]
        fn ssim_and_psnr_symmetric(seed in any::<u64>()) {
            let x = random(12, 14, 3, seed);
            let y = random(12, 14, 3, seed ^ 0x55);
            let a = ssim(&x, &y, None, Region::All).unwrap();
            let b = ssim(&y, &x, None, Region::All).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
            prop_assert_eq!(psnr(&x, &y, None, Region::All).unwrap(), psnr(&y, &x, None, Region::All).unwrap());
            prop_assert_eq!(ssim(&x, &x, None, Region::All).unwrap(), 1.0);
        }

        #[test]
        fn psnr_translation_consistent(seed in any::<u64>(), shift in -0.2f64..0.2) {
            let mut s = Stream::new(seed);
            let n = 5 * 5;
            let xd: Vec<f64> = (0..n).map(|_| s.uniform(0.25, 0.75)).collect();
            let yd: Vec<f64> = (0..n).map(|_| s.uniform(0.25, 0.75)).collect();
            let x = Image::new(5, 5, 1, xd.clone()).unwrap();
            let y = Image::new(5, 5, 1, yd.clone()).unwrap();
            let xs = Image::new(5, 5, 1, xd.iter().map(|v| v + shift).collect()).unwrap();
            let ys = Image::new(5, 5, 1, yd.iter().map(|v| v + shift).collect()).unwrap();
            let a = psnr(&x, &y, None, Region::All).unwrap();
            let b = psnr(&xs, &ys, None, Region::All).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
