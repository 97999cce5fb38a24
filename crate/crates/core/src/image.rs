//! Unit-interval images, binary shadow masks, and 8-bit binary PNM I/O.
//!
//! Pixels are stored row-major by `(row, column, channel)`. Only the raw
//! 8-bit variants are supported: P5 (grayscale) and P6 (RGB), maxval 255.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image shape {height}x{width}x{channels}")]
    Shape {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("data length {got} does not match {height}x{width}x{channels}")]
    Length {
        height: usize,
        width: usize,
        channels: usize,
        got: usize,
    },
    #[error("intensity {value} at index {index} is outside [0, 1]")]
    Range { index: usize, value: f64 },
    #[error("mask value {value} at index {index} is not 0 or 1")]
    MaskValue { index: usize, value: u8 },
    #[error("shape mismatch: {left} vs {right}")]
    Mismatch { left: String, right: String },
}

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at byte 0: expected P5 or P6")]
    BadMagic,
    #[error("malformed header at byte {offset}: {reason}")]
    Header { offset: usize, reason: &'static str },
    #[error("unsupported maxval {maxval} at byte {offset} (only 255)")]
    UnsupportedMaxval { offset: usize, maxval: u32 },
    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("mask must be single-channel")]
    MaskChannels,
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(ImageError::Shape {
                height,
                width,
                channels,
            });
        }
        if data.len() != height * width * channels {
            return Err(ImageError::Length {
                height,
                width,
                channels,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::Range { index, value });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from arbitrary reals, clamping each into `[0, 1]`.
    /// NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ImageError::Mismatch {
                left: format!("{:?}", self.shape()),
                right: format!("{:?}", other.shape()),
            })
        }
    }

    /// Arithmetic mean over every stored intensity.
    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// The 8-bit value a stored intensity maps to: `round(v * 255)`, ties away
    /// from zero.
    pub fn quantize(v: f64) -> u8 {
        (v * 255.0).round().clamp(0.0, 255.0) as u8
    }

    /// Image after an 8-bit save/load cycle.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| Self::quantize(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| Self::quantize(v)));
        out
    }

    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Image, PnmError> {
        let header = parse_header(bytes)?;
        let expected = header.height * header.width * header.channels;
        let payload = &bytes[header.payload_offset..];
        if payload.len() < expected {
            return Err(PnmError::Truncated {
                offset: header.payload_offset + payload.len(),
                expected,
                found: payload.len(),
            });
        }
        let data = payload[..expected].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Image::new(header.height, header.width, header.channels, data)?)
    }
}

/// Mean intensity (all channels) over the pixels of one mask class, or
/// `None` when the class is empty.
pub fn region_mean(image: &Image, mask: &ShadowMask, shadow: bool) -> Option<f64> {
    let c = image.channels();
    let want = u8::from(shadow);
    let (sum, n) = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == want)
        .fold((0.0, 0usize), |(s, n), (p, _)| {
            (s + image.data()[p * c..(p + 1) * c].iter().sum::<f64>(), n + c)
        });
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShadowMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ShadowMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::Shape {
                height,
                width,
                channels: 1,
            });
        }
        if data.len() != height * width {
            return Err(ImageError::Length {
                height,
                width,
                channels: 1,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(ImageError::MaskValue { index, value });
        }
        Ok(Self { height, width, data })
    }

    /// Thresholds a single-channel image: 1 iff intensity > `threshold`.
    pub fn from_image(image: &Image, threshold: f64) -> Result<Self, PnmError> {
        if image.channels() != 1 {
            return Err(PnmError::MaskChannels);
        }
        let data = image.data().iter().map(|&v| u8::from(v > threshold)).collect();
        Ok(Self::new(image.height(), image.width(), data)?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn is_shadow(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 1
    }

    pub fn shadow_count(&self) -> usize {
        self.data.iter().filter(|&&m| m == 1).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.shadow_count() as f64 / self.data.len() as f64
    }

    pub fn matches(&self, image: &Image) -> bool {
        self.height == image.height() && self.width == image.width()
    }

    /// Square (Chebyshev) dilation of the shadow class. Radius 0 is a copy.
    pub fn dilated(&self, radius: usize) -> ShadowMask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let mut out = vec![0u8; h * w];
        for r in 0..h {
            for c in 0..w {
                let r0 = r.saturating_sub(radius);
                let r1 = (r + radius).min(h - 1);
                let c0 = c.saturating_sub(radius);
                let c1 = (c + radius).min(w - 1);
                let hit = (r0..=r1).any(|rr| (c0..=c1).any(|cc| self.data[rr * w + cc] == 1));
                out[r * w + c] = u8::from(hit);
            }
        }
        ShadowMask {
            height: h,
            width: w,
            data: out,
        }
    }

    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().map(|&m| m as f64).collect(),
        }
    }
}

/// Signed perturbation shaped like the image it attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Perturbation {
    pub fn zeros_like(image: &Image) -> Self {
        Self {
            shape: image.shape(),
            data: vec![0.0; image.len()],
        }
    }

    pub fn for_image(image: &Image, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != image.len() {
            let [height, width, channels] = image.shape();
            return Err(ImageError::Length {
                height,
                width,
                channels,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: image.shape(),
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matches(&self, image: &Image) -> bool {
        self.shape == image.shape()
    }

    /// `clamp(image + self)`.
    pub fn apply(&self, image: &Image) -> Result<Image, ImageError> {
        if !self.matches(image) {
            return Err(ImageError::Mismatch {
                left: format!("{:?}", self.shape),
                right: format!("{:?}", image.shape()),
            });
        }
        let [h, w, c] = self.shape;
        let data = image.data().iter().zip(&self.data).map(|(a, b)| a + b).collect();
        Image::from_clamped(h, w, c, data)
    }
}

struct Header {
    width: usize,
    height: usize,
    channels: usize,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PnmError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(PnmError::BadMagic),
    };
    let mut pos = 2;
    let (width, _) = header_number(bytes, &mut pos)?;
    let (height, _) = header_number(bytes, &mut pos)?;
    let (maxval, maxval_offset) = header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(PnmError::UnsupportedMaxval {
            offset: maxval_offset,
            maxval,
        });
    }
    // exactly one whitespace byte separates maxval from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) => {
            return Err(PnmError::Header {
                offset: pos,
                reason: "expected single whitespace after maxval",
            })
        }
        None => {
            return Err(PnmError::Truncated {
                offset: pos,
                expected: 1,
                found: 0,
            })
        }
    }
    if width == 0 || height == 0 {
        return Err(PnmError::Header {
            offset: 2,
            reason: "zero dimension",
        });
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        channels,
        payload_offset: pos,
    })
}

/// Skips whitespace and `#` comments, then reads one ASCII decimal. Returns
/// the value and the offset of its first digit.
fn header_number(bytes: &[u8], pos: &mut usize) -> Result<(u32, usize), PnmError> {
    let start = *pos;
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => {
                return Err(PnmError::Header {
                    offset: *pos,
                    reason: "unexpected end of header",
                })
            }
        }
    }
    if *pos == start {
        return Err(PnmError::Header {
            offset: *pos,
            reason: "expected whitespace before field",
        });
    }
    let digits_start = *pos;
    let mut value: u64 = 0;
    while let Some(&b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = value * 10 + (b - b'0') as u64;
        if value > u32::MAX as u64 {
            return Err(PnmError::Header {
                offset: digits_start,
                reason: "number too large",
            });
        }
        *pos += 1;
    }
    if *pos == digits_start {
        return Err(PnmError::Header {
            offset: *pos,
            reason: "expected decimal number",
        });
    }
    Ok((value as u32, digits_start))
}

pub fn load_pnm(path: impl AsRef<Path>) -> Result<Image, PnmError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| PnmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Image::from_pnm_bytes(&bytes)
}

pub fn save_pnm(image: &Image, path: impl AsRef<Path>) -> Result<(), PnmError> {
    let path = path.as_ref();
    fs::write(path, image.to_pnm_bytes()).map_err(|source| PnmError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_mask(path: impl AsRef<Path>, threshold: f64) -> Result<ShadowMask, PnmError> {
    ShadowMask::from_image(&load_pnm(path)?, threshold)
}

pub fn save_mask(mask: &ShadowMask, path: impl AsRef<Path>) -> Result<(), PnmError> {
    save_pnm(&mask.to_image(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pnm(magic: &str, w: usize, h: usize, payload: &[u8]) -> Vec<u8> {
        let mut v = format!("{magic}\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn p5_endpoints() {
        let img = Image::from_pnm_bytes(&pnm("P5", 2, 1, &[0, 255])).unwrap();
        assert_eq!(img.shape(), [1, 2, 1]);
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn p6_scaling() {
        let img = Image::from_pnm_bytes(&pnm("P6", 1, 1, &[128, 128, 128])).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.data(), &[128.0 / 255.0; 3]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let img = Image::from_pnm_bytes(bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_16bit_maxval() {
        let bytes = b"P5\n1 1\n65535\n\x00\x00".to_vec();
        let err = Image::from_pnm_bytes(&bytes).unwrap_err();
        assert!(matches!(
            err,
            PnmError::UnsupportedMaxval {
                maxval: 65535,
                offset: 7
            }
        ));
        assert!(err.to_string().contains("unsupported maxval"));
    }

    #[test]
    fn truncated_payload_names_offset() {
        let err = Image::from_pnm_bytes(&pnm("P6", 2, 2, &[1, 2, 3])).unwrap_err();
        match err {
            PnmError::Truncated {
                offset,
                expected,
                found,
            } => {
                assert_eq!((expected, found), (12, 3));
                assert_eq!(offset, "P6\n2 2\n255\n".len() + 3);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(
            Image::from_pnm_bytes(b"P3\n1 1\n255\n0"),
            Err(PnmError::BadMagic)
        ));
        assert!(matches!(
            Image::from_pnm_bytes(b"P5\nx 1\n255\n\x00"),
            Err(PnmError::Header { offset: 3, .. })
        ));
        assert!(matches!(
            Image::from_pnm_bytes(b"P5\n1 1\n255"),
            Err(PnmError::Truncated { .. })
        ));
        assert!(matches!(Image::from_pnm_bytes(b"P5 1"), Err(PnmError::Header { .. })));
    }

    #[test]
    fn quantization_rounds_half_away_from_zero() {
        let img = Image::new(1, 1, 1, vec![0.5]).unwrap();
        assert_eq!(*img.to_pnm_bytes().last().unwrap(), 128);
        let img = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        assert!(img.to_pnm_bytes().ends_with(&[0, 255]));
    }

    #[test]
    fn mask_threshold_boundary() {
        let m = ShadowMask::from_image(&Image::from_pnm_bytes(&pnm("P5", 2, 1, &[0, 255])).unwrap(), 0.5).unwrap();
        assert_eq!(m.data(), &[0, 1]);
        let m = ShadowMask::from_image(&Image::from_pnm_bytes(&pnm("P5", 2, 1, &[127, 128])).unwrap(), 0.5).unwrap();
        assert_eq!(m.data(), &[0, 1]);
    }

    #[test]
    fn mask_rejects_rgb() {
        let img = Image::filled(2, 2, 3, 0.0).unwrap();
        let err = ShadowMask::from_image(&img, 0.5).unwrap_err();
        assert_eq!(err.to_string(), "mask must be single-channel");
    }

    #[test]
    fn invariants_enforced() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(Image::new(2, 1, 1, vec![0.0]).is_err());
        assert!(ShadowMask::new(1, 1, vec![2]).is_err());
    }

    #[test]
    fn mean_of_checkerboard_and_constant() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(img.mean_intensity(), 0.5);
        let img = Image::filled(3, 5, 3, 0.3).unwrap();
        assert!((img.mean_intensity() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn dilation_grows_shadow() {
        let mut data = vec![0u8; 25];
        data[12] = 1;
        let m = ShadowMask::new(5, 5, data).unwrap();
        assert_eq!(m.dilated(0), m);
        assert_eq!(m.dilated(1).shadow_count(), 9);
        assert_eq!(m.dilated(2).shadow_count(), 25);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 2, 3, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        let p = dir.path().join("x.ppm");
        save_pnm(&img, &p).unwrap();
        assert_eq!(load_pnm(&p).unwrap(), img.quantized());
        let m = ShadowMask::new(1, 3, vec![1, 0, 1]).unwrap();
        let p = dir.path().join("m.pgm");
        save_mask(&m, &p).unwrap();
        assert_eq!(load_mask(&p, 0.5).unwrap(), m);
        assert!(matches!(
            load_pnm(dir.path().join("missing.pgm")),
            Err(PnmError::Io { .. })
        ));
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..6, 1usize..6, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
            proptest::collection::vec(0.0f64..=1.0, h * w * c).prop_map(move |data| Image::new(h, w, c, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn save_load_within_half_step(img in arb_image()) {
            let back = Image::from_pnm_bytes(&img.to_pnm_bytes()).unwrap();
            prop_assert_eq!(&back, &img.quantized());
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
            }
            // second cycle is byte-identical
            prop_assert_eq!(back.to_pnm_bytes(), img.to_pnm_bytes());
        }

        #[test]
        fn mean_is_permutation_invariant(img in arb_image(), seed in any::<u64>()) {
            let mut data = img.data().to_vec();
            let mut s = crate::rng::Stream::new(seed);
            for i in (1..data.len()).rev() {
                let j = s.int_in(0, i as u64) as usize;
                data.swap(i, j);
            }
            let shuffled = Image::new(img.height(), img.width(), img.channels(), data).unwrap();
            prop_assert!((shuffled.mean_intensity() - img.mean_intensity()).abs() < 1e-12);
        }
    }
}
