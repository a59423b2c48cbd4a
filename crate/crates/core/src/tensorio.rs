//! Image and tensor I/O.
//!
//! Images live in memory as `f32` planes (RGB bytes are stored as their
//! integer values, 0..=255). On disk they are binary netpbm: P6 for RGB,
//! P5 for grayscale, both with maxval 255. Tensors use the `SPCT` format:
//! the 4-byte magic `SPCT`, a little-endian u32 rank, one little-endian
//! u32 per dimension, then the row-major payload as little-endian f32.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Interpretation of an [`Image`]'s channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    /// 3 channels, sRGB bytes stored as floats in 0..=255.
    Rgb8,
    /// 3 channels: L in 0..=100, a and b roughly in -128..=127.
    Lab,
    /// 1 channel: hue in [0, 1).
    Hue,
    /// 1 channel, 0..=255.
    Gray,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb8 | ColorSpace::Lab => 3,
            ColorSpace::Hue | ColorSpace::Gray => 1,
        }
    }
}

/// A dense row-major raster, `height * width * channels` floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub space: ColorSpace,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, space: ColorSpace) -> Image {
        Image {
            height,
            width,
            space,
            data: vec![0.0; height * width * space.channels()],
        }
    }

    pub fn from_data(height: usize, width: usize, space: ColorSpace, data: Vec<f32>) -> Result<Image> {
        if data.len() != height * width * space.channels() {
            return Err(Error::invalid(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                space.channels()
            )));
        }
        Ok(Image { height, width, space, data })
    }

    pub fn channels(&self) -> usize {
        self.space.channels()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels() + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let ch = self.channels();
        self.data[(y * self.width + x) * ch + c] = v;
    }
}

fn expect_space(img: &Image, want: ColorSpace, op: &str) -> Result<()> {
    if img.space != want {
        return Err(Error::invalid(format!(
            "space mismatch: {op} expects {want:?}, got {:?}",
            img.space
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// netpbm
// ---------------------------------------------------------------------------

/// Reads one header token, skipping whitespace and `#` comments.
fn read_token<R: Read>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::format("unexpected end of netpbm header"));
            }
            return Ok(tok);
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            // comment runs to end of line
            loop {
                if r.read(&mut byte)? == 0 || byte[0] == b'\n' {
                    break;
                }
            }
        } else if b.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(b as char);
        }
    }
}

fn read_dim(r: &mut impl Read, what: &str) -> Result<usize> {
    let tok = read_token(r)?;
    tok.parse::<usize>()
        .map_err(|_| Error::format(format!("bad netpbm {what}: {tok:?}")))
}

fn read_netpbm(path: &Path, magic: &str, space: ColorSpace) -> Result<Image> {
    let mut r = BufReader::new(File::open(path)?);
    let m = read_token(&mut r)?;
    if m != magic {
        return Err(Error::format(format!(
            "bad netpbm magic: expected {magic}, got {m:?}"
        )));
    }
    let width = read_dim(&mut r, "width")?;
    let height = read_dim(&mut r, "height")?;
    let maxval = read_dim(&mut r, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported netpbm maxval {maxval}")));
    }
    // read_token consumed the single whitespace byte after the maxval
    let mut bytes = vec![0u8; height * width * space.channels()];
    r.read_exact(&mut bytes).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::format("truncated netpbm payload")
        } else {
            Error::Io(e)
        }
    })?;
    let data = bytes.into_iter().map(f32::from).collect();
    Ok(Image { height, width, space, data })
}

fn write_netpbm(path: &Path, img: &Image, magic: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads a binary P6 image with maxval 255.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    read_netpbm(path.as_ref(), "P6", ColorSpace::Rgb8)
}

/// Writes an RGB image as binary P6. Values are rounded and clamped to 0..=255.
pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    expect_space(img, ColorSpace::Rgb8, "write_ppm")?;
    write_netpbm(path.as_ref(), img, "P6")
}

/// Reads a binary P5 image with maxval 255.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    read_netpbm(path.as_ref(), "P5", ColorSpace::Gray)
}

/// Writes a grayscale image as binary P5. Values are rounded and clamped to 0..=255.
pub fn write_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    expect_space(img, ColorSpace::Gray, "write_pgm")?;
    write_netpbm(path.as_ref(), img, "P5")
}

// ---------------------------------------------------------------------------
// color conversions
// ---------------------------------------------------------------------------

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Converts one sRGB pixel (bytes as floats) to CIELAB under D65.
pub fn srgb_pixel_to_lab(r: f32, g: f32, b: f32) -> [f64; 3] {
    let rl = srgb_to_linear(r as f64 / 255.0);
    let gl = srgb_to_linear(g as f64 / 255.0);
    let bl = srgb_to_linear(b as f64 / 255.0);
    let x = 0.412_456_4 * rl + 0.357_576_1 * gl + 0.180_437_5 * bl;
    let y = 0.212_672_9 * rl + 0.715_152_2 * gl + 0.072_175_0 * bl;
    let z = 0.019_333_9 * rl + 0.119_192_0 * gl + 0.950_304_1 * bl;
    let (xn, yn, zn) = (0.950_47, 1.0, 1.088_83);
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (841.0 / 108.0) * t + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / xn), f(y / yn), f(z / zn));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts an RGB image to CIELAB (D65 white point).
pub fn rgb_to_lab(img: &Image) -> Result<Image> {
    expect_space(img, ColorSpace::Rgb8, "rgb_to_lab")?;
    let mut out = Image::new(img.height, img.width, ColorSpace::Lab);
    for i in 0..img.pixels() {
        let lab = srgb_pixel_to_lab(img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]);
        out.data[3 * i] = lab[0] as f32;
        out.data[3 * i + 1] = lab[1] as f32;
        out.data[3 * i + 2] = lab[2] as f32;
    }
    Ok(out)
}

/// HSV hue of one RGB pixel, in [0, 1). Achromatic pixels map to 0.
pub fn rgb_pixel_to_hue(r: f32, g: f32, b: f32) -> f32 {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 {
        return 0.0;
    }
    let h = if r >= g && r >= b {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if g >= b {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    // guard against rounding up to exactly 1 on adversarial float input
    if h >= 1.0 {
        0.0
    } else {
        h
    }
}

/// Extracts the HSV hue channel, values in [0, 1).
pub fn rgb_to_hue(img: &Image) -> Result<Image> {
    expect_space(img, ColorSpace::Rgb8, "rgb_to_hue")?;
    let mut out = Image::new(img.height, img.width, ColorSpace::Hue);
    for i in 0..img.pixels() {
        out.data[i] = rgb_pixel_to_hue(img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// SPCT tensors
// ---------------------------------------------------------------------------

const SPCT_MAGIC: &[u8; 4] = b"SPCT";
const MAX_RANK: u32 = 8;

/// A dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > MAX_RANK as usize {
            return Err(Error::invalid(format!("tensor rank {} out of range", shape.len())));
        }
        if data.len() != want {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Serializes a tensor to a writer in SPCT format.
pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    if t.shape.is_empty() || t.shape.len() > MAX_RANK as usize {
        return Err(Error::invalid(format!("tensor rank {} out of range", t.shape.len())));
    }
    if let Some(bad) = t.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("tensor contains non-finite value {bad}")));
    }
    w.write_all(SPCT_MAGIC)?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &d in &t.shape {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    // buffer the payload in chunks rather than 4 bytes at a time
    let mut buf = Vec::with_capacity(t.data.len().min(1 << 16) * 4);
    for chunk in t.data.chunks(1 << 14) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::format("truncated SPCT header")
        } else {
            Error::Io(e)
        }
    })?;
    Ok(u32::from_le_bytes(b))
}

/// Deserializes one tensor in SPCT format from a reader.
pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::format("truncated SPCT header")
        } else {
            Error::Io(e)
        }
    })?;
    if &magic != SPCT_MAGIC {
        return Err(Error::format(format!("bad SPCT magic {magic:?}")));
    }
    let rank = read_u32(r)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(format!("SPCT rank {rank} out of range")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count = 1usize;
    for _ in 0..rank {
        let d = read_u32(r)? as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::format("SPCT shape overflows"))?;
        shape.push(d);
    }
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::format("truncated SPCT payload")
        } else {
            Error::Io(e)
        }
    })?;
    let mut data = Vec::with_capacity(count);
    for b in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if !v.is_finite() {
            return Err(Error::format(format!("SPCT payload contains non-finite value {v}")));
        }
        data.push(v);
    }
    Ok(Tensor { shape, data })
}

/// Writes a tensor to a file in SPCT format.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// Reads a tensor from an SPCT file.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor_from(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // keep the dir alive by leaking; test processes are short-lived
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn ppm_round_trip_is_bit_exact() {
        let mut img = Image::new(3, 5, ColorSpace::Rgb8);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f32;
        }
        let path = tmpfile("rt.ppm");
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn pgm_round_trip_is_bit_exact() {
        let mut img = Image::new(4, 3, ColorSpace::Gray);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 91) % 256) as f32;
        }
        let path = tmpfile("rt.pgm");
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let path = tmpfile("c.ppm");
        let payload: Vec<u8> = (0..6).collect();
        let mut bytes = b"P6 # trailing\n# a comment line\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&payload);
        std::fs::write(&path, bytes).unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!((img.height, img.width), (1, 2));
        assert_eq!(img.data, (0..6u8).map(f32::from).collect::<Vec<_>>());
    }

    #[test]
    fn ppm_rejects_bad_magic_maxval_and_truncation() {
        let path = tmpfile("bad.ppm");
        std::fs::write(&path, b"P5\n2 2\n255\n0000").unwrap();
        let err = read_ppm(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "bad magic should be a format error, got {err}");

        std::fs::write(&path, b"P6\n2 2\n65535\n0000000000000000000000000000").unwrap();
        let err = read_ppm(&path).unwrap_err();
        assert!(
            err.to_string().contains("maxval"),
            "expected maxval rejection, got {err}"
        );

        std::fs::write(&path, b"P6\n2 2\n255\n000").unwrap();
        let err = read_ppm(&path).unwrap_err();
        assert!(
            err.to_string().contains("truncated"),
            "expected truncation error, got {err}"
        );
    }

    #[test]
    fn write_ppm_rejects_space_mismatch() {
        let img = Image::new(2, 2, ColorSpace::Lab);
        let err = write_ppm(tmpfile("m.ppm"), &img).unwrap_err();
        assert!(
            err.to_string().contains("space mismatch"),
            "expected space mismatch, got {err}"
        );
    }

    #[test]
    fn lab_matches_reference_colors() {
        // references computed independently with the IEC 61966-2-1 sRGB
        // matrix and D65 white (0.95047, 1.0, 1.08883)
        let cases: [([f32; 3], [f64; 3]); 5] = [
            ([255.0, 0.0, 0.0], [53.2408, 80.0925, 67.2032]),
            ([255.0, 255.0, 255.0], [100.0, 0.0, 0.0]),
            ([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
            ([0.0, 255.0, 0.0], [87.7347, -86.1827, 83.1793]),
            ([0.0, 0.0, 255.0], [32.2970, 79.1875, -107.8602]),
        ];
        for (rgb, want) in cases {
            let got = srgb_pixel_to_lab(rgb[0], rgb[1], rgb[2]);
            for c in 0..3 {
                assert!(
                    (got[c] - want[c]).abs() < 1e-3,
                    "lab({rgb:?})[{c}] = {}, want {}",
                    got[c],
                    want[c]
                );
            }
        }
    }

    #[test]
    fn hue_matches_reference_colors() {
        let cases: [([f32; 3], f32); 7] = [
            ([255.0, 0.0, 0.0], 0.0),
            ([255.0, 255.0, 0.0], 1.0 / 6.0),
            ([0.0, 255.0, 0.0], 1.0 / 3.0),
            ([0.0, 255.0, 255.0], 0.5),
            ([0.0, 0.0, 255.0], 2.0 / 3.0),
            ([128.0, 128.0, 128.0], 0.0),
            ([255.0, 0.0, 128.0], 1.0 - 128.0 / 255.0 / 6.0),
        ];
        for (rgb, want) in cases {
            let got = rgb_pixel_to_hue(rgb[0], rgb[1], rgb[2]);
            assert!(
                (got - want).abs() < 1e-6,
                "hue({rgb:?}) = {got}, want {want}"
            );
        }
    }

    #[test]
    fn spct_round_trip_is_exact() {
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(|i| i as f32 * 0.5 - 2.0).collect()).unwrap();
        let path = tmpfile("t.spct");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn spct_rejects_bad_magic_and_size_mismatch() {
        let err = read_tensor_from(&mut Cursor::new(b"SPCX\x01\x00\x00\x00\x01\x00\x00\x00".to_vec()))
            .unwrap_err();
        assert!(
            err.to_string().contains("magic"),
            "expected bad-magic error, got {err}"
        );

        // rank 1, dim 2, but only one f32 of payload
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SPCT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        let err = read_tensor_from(&mut Cursor::new(bytes)).unwrap_err();
        assert!(
            err.to_string().contains("truncated"),
            "expected truncated payload, got {err}"
        );
    }

    #[test]
    fn spct_rejects_non_finite_values() {
        let t = Tensor {
            shape: vec![2],
            data: vec![1.0, f32::NAN],
        };
        let err = write_tensor_to(&mut Vec::new(), &t).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)), "got {err}");

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SPCT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&f32::INFINITY.to_le_bytes());
        let err = read_tensor_from(&mut Cursor::new(bytes)).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err}");
    }

    proptest! {
        #[test]
        fn hue_is_always_in_unit_interval(r in 0u8..=255, g in 0u8..=255, b in 0u8..=255) {
            let h = rgb_pixel_to_hue(r as f32, g as f32, b as f32);
            prop_assert!((0.0..1.0).contains(&h), "hue({r},{g},{b}) = {h}");
        }

        #[test]
        fn ppm_round_trips_arbitrary_images(
            h in 1usize..6,
            w in 1usize..6,
            seed in 0u64..1000,
        ) {
            let mut img = Image::new(h, w, ColorSpace::Rgb8);
            let mut state = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            for v in img.data.iter_mut() {
                state = state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
                *v = ((state >> 56) & 0xff) as f32;
            }
            let path = tmpfile("prop.ppm");
            write_ppm(&path, &img).unwrap();
            prop_assert_eq!(read_ppm(&path).unwrap(), img);
        }

        #[test]
        fn spct_round_trips_arbitrary_tensors(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in 0u64..1000,
        ) {
            let n: usize = dims.iter().product();
            let mut state = seed.wrapping_add(1);
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((state >> 40) as i32 as f32) * 1e-3
                })
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            write_tensor_to(&mut buf, &t).unwrap();
            prop_assert_eq!(read_tensor_from(&mut Cursor::new(buf)).unwrap(), t);
        }
    }
}
