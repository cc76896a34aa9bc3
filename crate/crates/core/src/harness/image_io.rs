//! Binary netpbm: PPM (`P6`) for colour, PGM (`P5`) for depth, masks and maps.
//!
//! Only 8-bit files are supported. Values map linearly to `[0,1]` by
//! `v / maxval`; writing always uses maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded 8-bit image, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("netpbm header: expected {what} at byte {start}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format(format!("netpbm header: {what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            return Err(Error::Format(
                "not a binary PGM/PPM file (expected P5 or P6 magic)".into(),
            ))
        }
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("netpbm image has zero extent {width}×{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "netpbm maxval {maxval} unsupported: only 8-bit files (maxval 1..=255) are read"
        )));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("netpbm header must end with one whitespace byte".into()));
    }
    let start = h.pos + 1;
    let need = width * height * channels;
    let payload = bytes.get(start..start + need).ok_or_else(|| {
        Error::Format(format!(
            "short netpbm payload: {} bytes, expected {need}",
            bytes.len().saturating_sub(start)
        ))
    })?;
    if let Some(&v) = payload.iter().find(|&&v| usize::from(v) > maxval) {
        return Err(Error::Format(format!("sample {v} exceeds maxval {maxval}")));
    }
    Ok(Image {
        width,
        height,
        channels,
        maxval: maxval as u16,
        data: payload.to_vec(),
    })
}

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Nearest 8-bit code of a value in `[0,1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_planar(img: &Image) -> Tensor<f32> {
    let (c, n) = (img.channels, img.width * img.height);
    let maxval = f32::from(img.maxval);
    let mut data = vec![0.0f32; c * n];
    for (i, px) in img.data.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * n + i] = f32::from(v) / maxval;
        }
    }
    Tensor::new(&[c, img.height, img.width], data).expect("shape matches payload")
}

fn from_planar(t: &Tensor<f32>) -> Result<Image> {
    let (c, h, w) = t.dims3("image")?;
    if c != 1 && c != 3 {
        return Err(Error::shape("image channels", t.shape(), &[3, h, w]));
    }
    let n = h * w;
    let mut data = vec![0u8; c * n];
    for ch in 0..c {
        for i in 0..n {
            data[i * c + ch] = quantize(t.data()[ch * n + i]);
        }
    }
    Ok(Image {
        width: w,
        height: h,
        channels: c,
        maxval: 255,
        data,
    })
}

fn read(path: &Path, channels: usize) -> Result<Image> {
    let img = decode(&fs::read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if img.channels != channels {
        return Err(Error::Format(format!(
            "{}: expected {} image, found {}",
            path.display(),
            if channels == 3 { "P6 colour" } else { "P5 greyscale" },
            if img.channels == 3 { "P6" } else { "P5" }
        )));
    }
    Ok(img)
}

/// `3×H×W` colour image.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    Ok(to_planar(&read(path, 3)?))
}

/// `1×H×W` greyscale image.
pub fn read_gray(path: &Path) -> Result<Tensor<f32>> {
    Ok(to_planar(&read(path, 1)?))
}

/// `1×H×W` binary mask: samples at or above half intensity (128 of 255) are 1.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = read(path, 1)?;
    let max = u32::from(img.maxval);
    let data = img
        .data
        .iter()
        .map(|&v| if u32::from(v) * 255 >= 128 * max { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::new(&[1, img.height, img.width], data).expect("shape matches payload"))
}

/// Write a `3×H×W` tensor as PPM or a `1×H×W` tensor as PGM.
pub fn write(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(&from_planar(t)?))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn known_pgm_fixture() {
        let bytes = b"P5\n# fixture\n2 2\n255\n\x00\x80\xff\x40";
        let img = decode(bytes).unwrap();
        let t = to_planar(&img);
        assert_eq!(t.shape(), &[1, 2, 2]);
        let want = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0];
        for (a, b) in t.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn small_maxval_is_rescaled() {
        let img = decode(b"P5 2 1 15\n\x0f\x05").unwrap();
        let t = to_planar(&img);
        assert!((t.data()[0] - 1.0).abs() < 1e-7);
        assert!((t.data()[1] - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn sixteen_bit_is_rejected() {
        let err = decode(b"P5\n1 1\n65535\n\x00\x00").unwrap_err();
        assert!(err.to_string().contains("65535"), "{err}");
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode(b"P3\n1 1\n255\n0").is_err());
        assert!(decode(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(decode(b"P5\nx 2\n255\n").is_err());
        assert!(decode(b"P5\n0 2\n255\n").is_err());
        assert!(decode(b"P5\n1 1\n255").is_err());
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in [1usize, 3] {
            let data: Vec<f32> = (0..c * 5 * 7).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let t = Tensor::new(&[c, 5, 7], data).unwrap();
            let path = dir.path().join(format!("img{c}"));
            write(&path, &t).unwrap();
            let back = if c == 3 { read_rgb(&path) } else { read_gray(&path) }.unwrap();
            assert!(back.max_abs_diff(&t) <= 1.0 / 255.0);
            // exact once quantised
            write(&path, &back).unwrap();
            let again = if c == 3 { read_rgb(&path) } else { read_gray(&path) }.unwrap();
            assert_eq!(again, back);
        }
    }

    #[test]
    fn mask_binarizes_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        fs::write(&path, b"P5\n4 1\n255\n\x00\x7f\x80\xff").unwrap();
        assert_eq!(read_mask(&path).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        assert!(read_rgb(&path).is_err());
    }
}
