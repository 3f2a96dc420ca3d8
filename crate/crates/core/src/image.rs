//! Raster images, the mirror/symmetrize operators, and binary PGM/PPM I/O.
//!
//! Pixels are stored interleaved (`(row * width + col) * channels + ch`) as
//! real intensities, nominally in `[0, 1]`. Quantization to 8 bits happens
//! only when an image is encoded to a file or a wire payload.
//!
//! [`Image::flatten`] uses a fixed planar layout: channel-major, then
//! row-major (`ch * height * width + row * width + col`). Basis files and
//! embedders depend on this order, so it must not change.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("dimension mismatch: expected {expected} values, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("operation requires a {expected}-channel image, got {actual}")]
    Mode { expected: usize, actual: usize },
    #[error("geometry mismatch: expected {expected}, got {actual}")]
    Geometry { expected: Geometry, actual: Geometry },
    #[error("malformed {field}: {reason}")]
    Format { field: &'static str, reason: String },
    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Image shape: width × height × channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl Geometry {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        if width == 0 || height == 0 {
            return Err(ImageError::Format {
                field: "geometry",
                reason: format!("zero-sized image {width}x{height}"),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
        })
    }

    pub fn gray(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            channels: 1,
        }
    }

    pub fn rgb(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            channels: 3,
        }
    }

    /// Flattened length `channels * height * width`.
    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

impl std::str::FromStr for Geometry {
    type Err = ImageError;

    /// Parses `WxHxC`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(['x', 'X']).collect();
        let bad = || ImageError::Format {
            field: "geometry",
            reason: format!("expected WxHxC, got {s:?}"),
        };
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums: Result<Vec<usize>, _> = parts.iter().map(|p| p.parse::<usize>()).collect();
        let nums = nums.map_err(|_| bad())?;
        Geometry::new(nums[0], nums[1], nums[2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    geometry: Geometry,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(geometry: Geometry) -> Self {
        Self {
            geometry,
            data: vec![0.0; geometry.len()],
        }
    }

    /// Wraps interleaved pixel data.
    pub fn from_interleaved(geometry: Geometry, data: Vec<f64>) -> Result<Self, ImageError> {
        if geometry.channels != 1 && geometry.channels != 3 {
            return Err(ImageError::Channels(geometry.channels));
        }
        if data.len() != geometry.len() {
            return Err(ImageError::Dimension {
                expected: geometry.len(),
                actual: data.len(),
            });
        }
        Ok(Self { geometry, data })
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(geometry.len());
        for r in 0..geometry.height {
            for c in 0..geometry.width {
                for ch in 0..geometry.channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self { geometry, data }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }

    pub fn channels(&self) -> usize {
        self.geometry.channels
    }

    /// Interleaved pixel data.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.geometry.width + col) * self.geometry.channels + ch
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.offset(row, col, ch)]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.offset(row, col, ch);
        self.data[i] = v;
    }

    /// Mirror across the vertical axis: `out(r, c) = in(r, width - 1 - c)`.
    pub fn reflect(&self) -> Image {
        let g = self.geometry;
        let mut out = Vec::with_capacity(self.data.len());
        for r in 0..g.height {
            for c in 0..g.width {
                let src = self.offset(r, g.width - 1 - c, 0);
                out.extend_from_slice(&self.data[src..src + g.channels]);
            }
        }
        Image {
            geometry: g,
            data: out,
        }
    }

    /// `(X + 2·reflect(X)) / 3`, elementwise and unclipped.
    pub fn symmetrize(&self) -> Image {
        let mirrored = self.reflect();
        let data = self
            .data
            .iter()
            .zip(&mirrored.data)
            .map(|(x, m)| (x + 2.0 * m) / 3.0)
            .collect();
        Image {
            geometry: self.geometry,
            data,
        }
    }

    pub fn clip(&self) -> Image {
        Image {
            geometry: self.geometry,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Equal-weight average of the three channels.
    pub fn to_gray(&self) -> Result<Image, ImageError> {
        if self.geometry.channels != 3 {
            return Err(ImageError::Mode {
                expected: 3,
                actual: self.geometry.channels,
            });
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect();
        Ok(Image {
            geometry: Geometry::gray(self.geometry.width, self.geometry.height),
            data,
        })
    }

    /// Planar vector: channel-major, then row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let g = self.geometry;
        let plane = g.width * g.height;
        let mut out = vec![0.0; g.len()];
        for (px, pixel) in self.data.chunks_exact(g.channels).enumerate() {
            for (ch, v) in pixel.iter().enumerate() {
                out[ch * plane + px] = *v;
            }
        }
        out
    }

    /// Inverse of [`Image::flatten`].
    pub fn reshape(v: &[f64], geometry: Geometry) -> Result<Image, ImageError> {
        if v.len() != geometry.len() {
            return Err(ImageError::Dimension {
                expected: geometry.len(),
                actual: v.len(),
            });
        }
        let plane = geometry.width * geometry.height;
        let mut data = vec![0.0; geometry.len()];
        for px in 0..plane {
            for ch in 0..geometry.channels {
                data[px * geometry.channels + ch] = v[ch * plane + px];
            }
        }
        Ok(Image { geometry, data })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Rounds every intensity to the nearest 8-bit level, as a file round
    /// trip would.
    pub fn quantize(&self) -> Image {
        Image {
            geometry: self.geometry,
            data: self
                .data
                .iter()
                .map(|&v| f64::from(to_byte(v)) / 255.0)
                .collect(),
        }
    }

    /// Encodes as binary PGM (1 channel) or PPM (3 channels), maxval 255.
    ///
    /// Header is exactly `P5|P6 "\n" width " " height "\n255\n"`.
    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let g = self.geometry;
        let magic = if g.channels == 1 { "P5" } else { "P6" };
        let header = format!("{magic}\n{} {}\n255\n", g.width, g.height);
        let mut out = Vec::with_capacity(header.len() + self.data.len());
        out.extend_from_slice(header.as_bytes());
        out.extend(self.data.iter().map(|&v| to_byte(v)));
        out
    }

    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Image, ImageError> {
        let mut cursor = HeaderCursor { bytes, pos: 0 };
        let magic = cursor.token("magic")?;
        let channels = match magic {
            b"P5" => 1,
            b"P6" => 3,
            other => {
                return Err(ImageError::Format {
                    field: "magic",
                    reason: format!(
                        "unsupported magic {:?} (expected P5 or P6)",
                        String::from_utf8_lossy(other)
                    ),
                })
            }
        };
        let width = cursor.number("width")?;
        let height = cursor.number("height")?;
        let maxval = cursor.number("maxval")?;
        if maxval != 255 {
            return Err(ImageError::Format {
                field: "maxval",
                reason: format!("unsupported maxval {maxval} (only 255)"),
            });
        }
        // exactly one whitespace byte separates maxval from the raster
        match bytes.get(cursor.pos) {
            Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
            _ => {
                return Err(ImageError::Format {
                    field: "header",
                    reason: "missing whitespace after maxval".into(),
                })
            }
        }
        let geometry = Geometry::new(width, height, channels).map_err(|_| ImageError::Format {
            field: "width",
            reason: format!("zero-sized image {width}x{height}"),
        })?;
        let payload = &bytes[cursor.pos..];
        if payload.len() < geometry.len() {
            return Err(ImageError::Truncated {
                expected: geometry.len(),
                actual: payload.len(),
            });
        }
        let data = payload[..geometry.len()]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        Ok(Image { geometry, data })
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_ws_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&b) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, field: &'static str) -> Result<&'a [u8], ImageError> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ImageError::Format {
                field,
                reason: "unexpected end of header".into(),
            });
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, field: &'static str) -> Result<usize, ImageError> {
        let tok = self.token(field)?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| ImageError::Format {
                field,
                reason: format!("not a number: {:?}", String::from_utf8_lossy(tok)),
            })
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let bytes = fs::read(path)?;
    Image::from_pnm_bytes(&bytes)
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    fs::write(path, img.to_pnm_bytes())?;
    Ok(())
}

/// Loads every `.pgm`/`.ppm` file in `dir`, sorted by file name.
pub fn read_dir_images(dir: impl AsRef<Path>) -> Result<Vec<(String, Image)>, ImageError> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            read_image(&p).map(|img| (name, img))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(w: usize, h: usize, data: &[f64]) -> Image {
        Image::from_interleaved(Geometry::gray(w, h), data.to_vec()).unwrap()
    }

    fn lcg_image(g: Geometry, mut seed: u64) -> Image {
        Image::from_fn(g, |_, _, _| {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn reflect_swaps_columns() {
        assert_eq!(gray(2, 1, &[0.1, 0.7]).reflect().data(), &[0.7, 0.1]);
    }

    #[test]
    fn reflect_fixes_symmetric_image() {
        let img = gray(3, 2, &[0.2, 0.5, 0.2, 0.9, 0.1, 0.9]);
        assert_eq!(img.reflect(), img);
    }

    #[test]
    fn reflect_keeps_channel_order() {
        let g = Geometry::rgb(2, 1);
        let img = Image::from_interleaved(g, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.reflect().data(), &[0.4, 0.5, 0.6, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn reflect_is_involution() {
        let img = lcg_image(Geometry::new(5, 4, 3).unwrap(), 7);
        assert_eq!(img.reflect().reflect(), img);
    }

    #[test]
    fn symmetrize_arithmetic() {
        let s = gray(2, 1, &[0.0, 0.9]).symmetrize();
        assert!((s.data()[0] - 0.6).abs() < 1e-15);
        assert!((s.data()[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn symmetrize_fixes_symmetric_image() {
        let img = gray(3, 1, &[0.25, 0.5, 0.25]);
        assert_eq!(img.symmetrize(), img);
    }

    #[test]
    fn reflect_of_symmetrize_swaps_weights() {
        let img = lcg_image(Geometry::rgb(5, 3), 11);
        let lhs = img.symmetrize().reflect();
        let r = img.reflect();
        for ((l, x), m) in lhs.data().iter().zip(img.data()).zip(r.data()) {
            assert!((l - (m + 2.0 * x) / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn reshape_rejects_wrong_length() {
        let err = Image::reshape(&[0.0; 5], Geometry::gray(2, 2)).unwrap_err();
        assert!(matches!(err, ImageError::Dimension { expected: 4, actual: 5 }));
    }

    #[test]
    fn flatten_is_planar() {
        let g = Geometry::rgb(2, 1);
        let img = Image::from_interleaved(g, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(img.flatten(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn flatten_round_trip_small() {
        let img = gray(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let v = img.flatten();
        assert_eq!(v.len(), 4);
        assert_eq!(Image::reshape(&v, img.geometry()).unwrap(), img);
    }

    #[test]
    fn clip_bounds() {
        assert_eq!(gray(3, 1, &[-0.2, 0.5, 1.7]).clip().data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn to_gray_means_channels() {
        let img = Image::from_interleaved(Geometry::rgb(1, 1), vec![0.3, 0.6, 0.9]).unwrap();
        let g = img.to_gray().unwrap();
        assert_eq!(g.channels(), 1);
        assert!((g.data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn to_gray_rejects_gray_input() {
        let err = gray(1, 1, &[0.5]).to_gray().unwrap_err();
        assert!(matches!(err, ImageError::Mode { expected: 3, actual: 1 }));
    }

    #[test]
    fn zero_pgm_is_bit_exact() {
        let img = Image::zeros(Geometry::gray(4, 4));
        let bytes = img.to_pnm_bytes();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8; 16]);
        assert_eq!(Image::from_pnm_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_header_layout() {
        let img = Image::zeros(Geometry::rgb(3, 2));
        let bytes = img.to_pnm_bytes();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
    }

    #[test]
    fn rejects_p7() {
        let err = Image::from_pnm_bytes(b"P7\n1 1\n255\n\0").unwrap_err();
        assert!(matches!(err, ImageError::Format { field: "magic", .. }), "{err}");
    }

    #[test]
    fn rejects_other_maxval() {
        let err = Image::from_pnm_bytes(b"P5\n1 1\n65535\n\0\0").unwrap_err();
        assert!(matches!(err, ImageError::Format { field: "maxval", .. }), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let err = Image::from_pnm_bytes(b"P5\n2 2\n255\n\0\0\0").unwrap_err();
        assert!(matches!(err, ImageError::Truncated { expected: 4, actual: 3 }), "{err}");
    }

    #[test]
    fn rejects_bad_width() {
        let err = Image::from_pnm_bytes(b"P5\nxx 2\n255\n").unwrap_err();
        assert!(matches!(err, ImageError::Format { field: "width", .. }), "{err}");
    }

    #[test]
    fn accepts_header_comments() {
        let img = Image::from_pnm_bytes(b"P5\n# made by hand\n1 1\n255\n\xff").unwrap();
        assert_eq!(img.data(), &[1.0]);
    }

    #[test]
    fn geometry_parse() {
        assert_eq!("32x16x3".parse::<Geometry>().unwrap(), Geometry::rgb(32, 16));
        assert!("32x16x2".parse::<Geometry>().is_err());
        assert!("32x16".parse::<Geometry>().is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = lcg_image(Geometry::rgb(7, 5), 3);
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    fn image_strategy() -> impl Strategy<Value = Image> {
        (1usize..6, 1usize..6, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(w, h, c)| {
            let g = Geometry::new(w, h, c).unwrap();
            proptest::collection::vec(-0.5f64..1.5, g.len())
                .prop_map(move |d| Image::from_interleaved(g, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn flatten_reshape_inverse(img in image_strategy()) {
            let back = Image::reshape(&img.flatten(), img.geometry()).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn pnm_round_trip_within_quantization(img in image_strategy()) {
            let back = Image::from_pnm_bytes(&img.to_pnm_bytes()).unwrap();
            let clipped = img.clip();
            for (a, b) in clipped.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
            }
            prop_assert_eq!(back.clone(), img.quantize());
        }

        #[test]
        fn clip_idempotent(img in image_strategy()) {
            let once = img.clip();
            prop_assert!(once.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(once.clip(), once);
        }

        #[test]
        fn symmetrize_preserves_mean(img in image_strategy()) {
            prop_assert!((img.symmetrize().mean() - img.mean()).abs() < 1e-12);
        }

        #[test]
        fn reflect_and_flatten_are_linear(
            img in image_strategy(),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let other = img.reflect().clip();
            let combo = Image::from_interleaved(
                img.geometry(),
                img.data().iter().zip(other.data()).map(|(x, y)| a * x + b * y).collect(),
            ).unwrap();
            let lhs = combo.reflect();
            let (rx, ry) = (img.reflect(), other.reflect());
            for ((l, x), y) in lhs.data().iter().zip(rx.data()).zip(ry.data()) {
                prop_assert!((l - (a * x + b * y)).abs() < 1e-12);
            }
            let (fx, fy) = (img.flatten(), other.flatten());
            for ((l, x), y) in combo.flatten().iter().zip(&fx).zip(&fy) {
                prop_assert!((l - (a * x + b * y)).abs() < 1e-12);
            }
        }
    }
}
