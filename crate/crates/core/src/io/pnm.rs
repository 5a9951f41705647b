//! Binary 8-bit PPM (P6) and PGM (P5).

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::image::Image;
use crate::mask::SegMask;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("expected magic {expected}, found {found:?}")]
    Magic { expected: &'static str, found: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("only maxval 255 is supported, got {0}")]
    MaxVal(usize),
    #[error("pixel data is {found} bytes, expected {expected}")]
    Truncated { expected: usize, found: usize },
    #[error("a pixmap needs 3 channels, image has {0}")]
    Channels(usize),
}

/// `floor(v·255 + 0.5)` after clamping to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

fn header(magic: &str, w: usize, h: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

fn parse<'a>(buf: &'a [u8], magic: &'static str) -> Result<(usize, usize, &'a [u8]), PnmError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PnmError::Header("unexpected end of header".into()));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    if fields[0] != magic {
        return Err(PnmError::Magic { expected: magic, found: fields[0].clone() });
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| PnmError::Header(format!("not a number: {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 {
        return Err(PnmError::Header("zero extent".into()));
    }
    if maxval != 255 {
        return Err(PnmError::MaxVal(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    Ok((w, h, buf.get(pos..).unwrap_or(&[])))
}

fn raster(data: &[u8], expected: usize) -> Result<&[u8], PnmError> {
    if data.len() < expected {
        return Err(PnmError::Truncated { expected, found: data.len() });
    }
    Ok(&data[..expected])
}

fn read(path: &Path) -> Result<Vec<u8>, PnmError> {
    fs::read(path).map_err(|source| PnmError::Io { path: path.display().to_string(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), PnmError> {
    fs::write(path, bytes).map_err(|source| PnmError::Io { path: path.display().to_string(), source })
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>, PnmError> {
    if img.channels() != 3 {
        return Err(PnmError::Channels(img.channels()));
    }
    let (h, w) = (img.height(), img.width());
    let mut out = header("P6", w, h);
    for p in 0..h * w {
        for c in 0..3 {
            out.push(quantize(img.plane(c)[p]));
        }
    }
    Ok(out)
}

pub fn decode_ppm(buf: &[u8]) -> Result<Image, PnmError> {
    let (w, h, data) = parse(buf, "P6")?;
    let data = raster(data, 3 * w * h)?;
    let mut planes = vec![0.0f32; 3 * w * h];
    for (p, px) in data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planes[c * w * h + p] = px[c] as f32 / 255.0;
        }
    }
    Ok(Image::new(3, h, w, planes).expect("sized"))
}

pub fn encode_pgm(mask: &SegMask) -> Vec<u8> {
    let mut out = header("P5", mask.width(), mask.height());
    out.extend_from_slice(mask.values());
    out
}

pub fn decode_pgm(buf: &[u8]) -> Result<SegMask, PnmError> {
    let (w, h, data) = parse(buf, "P5")?;
    Ok(SegMask::new(h, w, raster(data, w * h)?.to_vec()).expect("sized"))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<(), PnmError> {
    write(path, &encode_ppm(img)?)
}

pub fn read_ppm(path: &Path) -> Result<Image, PnmError> {
    decode_ppm(&read(path)?)
}

pub fn write_pgm(path: &Path, mask: &SegMask) -> Result<(), PnmError> {
    write(path, &encode_pgm(mask))
}

pub fn read_pgm(path: &Path) -> Result<SegMask, PnmError> {
    decode_pgm(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_half_up() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
        assert_eq!(quantize(1.2), 255);
        assert_eq!(quantize(-0.1), 0);
    }

    #[test]
    fn header_comments_are_skipped() {
        let buf = b"P5\n# a comment\n2 1\n255\n\x03\x04";
        assert_eq!(decode_pgm(buf).unwrap().values(), &[3, 4]);
        assert!(matches!(decode_pgm(b"P5\n2 1\n255\n\x03"), Err(PnmError::Truncated { .. })));
        assert!(matches!(decode_ppm(buf), Err(PnmError::Magic { .. })));
    }
}
