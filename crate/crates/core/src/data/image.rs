//! Binary PPM (P6) and PGM (P5) codecs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[-1, 1]` → `0..=255` by affine rounding.
pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

pub fn from_u8(p: u8) -> f64 {
    f64::from(p) / 255.0 * 2.0 - 1.0
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated image header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::Format("non-ASCII header".into()))?);
    }
    if fields[0] != magic {
        return Err(Error::Format(format!("expected {magic} image, found magic {:?}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad header number {s:?}")))
    };
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w == 0 || h == 0 || max != 255 {
        return Err(Error::Format(format!("unsupported image {w}×{h} with max value {max}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::Format("missing raster".into()));
    }
    Ok((w, h, &bytes[i + 1..]))
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::dim("save_image", s, &[3, 0, 0])),
    };
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for p in 0..h * w {
        for c in 0..3 {
            buf.push(to_u8(d[c * h * w + p]));
        }
    }
    Ok(buf)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (w, h, raster) = parse_header(bytes, "P6")?;
    if raster.len() != 3 * w * h {
        return Err(Error::Format(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            3 * w * h
        )));
    }
    let mut data = vec![0.0; 3 * w * h];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = from_u8(raster[3 * p + c]);
        }
    }
    Tensor::new(data, &[3, h, w])
}

/// Writes `[3×h×w]` values in `[-1, 1]` as 8-bit P6.
pub fn save_image(img: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

/// Reads a P6 image of any size into `[3×h×w]` with values in `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_pgm(pixels: &[u8], width: usize, height: usize, path: &Path) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::dim("save_pgm", &[pixels.len()], &[width, height]));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Returns `(width, height, pixels)`.
pub fn load_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, raster) = parse_header(&bytes, "P5")?;
    if raster.len() != w * h {
        return Err(Error::Format(format!("{}: raster size mismatch", path.display())));
    }
    Ok((w, h, raster.to_vec()))
}
