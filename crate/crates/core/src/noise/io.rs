//! PNG and binary PGM reading and writing.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Image, MIN_IMAGE_SIZE};
use crate::error::{Error, Result};

/// Sample depth used when writing an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

fn unsupported(path: &Path, reason: impl Into<String>) -> Error {
    Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn quantize(v: f64, max: f64) -> u32 {
    (v * max + 0.5).floor().clamp(0.0, max) as u32
}

/// Reads an 8- or 16-bit grayscale PNG or a binary PGM, scaling samples by
/// the format's maximum value into `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let img = if bytes.starts_with(b"\x89PNG") {
        decode_png(path, &bytes)?
    } else if bytes.starts_with(b"P5") {
        decode_pgm(path, &bytes)?
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
        return Err(unsupported(path, "color images are not supported"));
    } else {
        return Err(unsupported(path, "not a PNG or binary PGM file"));
    };
    if img.width() < MIN_IMAGE_SIZE || img.height() < MIN_IMAGE_SIZE {
        return Err(unsupported(
            path,
            format!(
                "image is {}x{}, both sides must be at least {MIN_IMAGE_SIZE}",
                img.width(),
                img.height()
            ),
        ));
    }
    Ok(img)
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_error(path, e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    match color {
        png::ColorType::Grayscale => {}
        png::ColorType::GrayscaleAlpha => {
            return Err(unsupported(path, "grayscale with alpha is not supported"))
        }
        _ => return Err(unsupported(path, "color images are not supported")),
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_error(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_error(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let data: Vec<f64> = match depth {
        png::BitDepth::Eight => (0..h)
            .flat_map(|r| {
                buf[r * info.line_size..r * info.line_size + w]
                    .iter()
                    .map(|&b| b as f64 / 255.0)
            })
            .collect(),
        png::BitDepth::Sixteen => (0..h)
            .flat_map(|r| {
                buf[r * info.line_size..r * info.line_size + 2 * w]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            })
            .collect(),
        other => return Err(unsupported(path, format!("bit depth {other:?}"))),
    };
    Image::new(w, h, data)
}

fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<Image> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_error(path, "malformed PGM header"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_error(path, "malformed PGM header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(format_error(path, format!("PGM maxval {maxval} out of range")));
    }
    let width = if maxval < 256 { 1 } else { 2 };
    let body = &bytes[pos..];
    if body.len() < w * h * width {
        return Err(format_error(path, "PGM pixel data is truncated"));
    }
    let scale = maxval as f64;
    let data = if width == 1 {
        body[..w * h].iter().map(|&b| b as f64 / scale).collect()
    } else {
        body[..2 * w * h]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    Image::new(w, h, data)
}

/// Writes `img` as PNG, or as binary PGM when the extension is `pgm`.
/// Values are clamped to `[0, 1]` and rounded half-up to the target depth.
pub fn save_image(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let max = depth.max_value();
    let mut samples = Vec::with_capacity(img.len() * 2);
    for &v in img.data() {
        let q = quantize(v, max);
        match depth {
            BitDepth::Eight => samples.push(q as u8),
            BitDepth::Sixteen => samples.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        write!(out, "P5\n{} {}\n{}\n", img.width(), img.height(), max as u32)
            .and_then(|_| out.write_all(&samples))
            .map_err(|e| Error::io(path, e))?;
    } else {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(match depth {
            BitDepth::Eight => png::BitDepth::Eight,
            BitDepth::Sixteen => png::BitDepth::Sixteen,
        });
        let mut writer = enc
            .write_header()
            .map_err(|e| format_error(path, e.to_string()))?;
        writer
            .write_image_data(&samples)
            .and_then(|_| writer.finish())
            .map_err(|e| format_error(path, e.to_string()))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
