//! Image file IO: binary PGM (grayscale) and PPM (RGB) with maxval up to
//! 255, and a raw float64 tensor format for lossless round-trips.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

use super::Image;

pub const TENSOR_MAGIC: &[u8; 8] = b"SQTF0001";

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| {
        Error::io(format!("opening {}", path.display()), e)
    })?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        Error::io(format!("creating {}", path.display()), e)
    })?))
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Writes PGM for single-channel images, PPM for three channels. Values are
/// clamped to [0,1] and quantized to a byte.
pub fn write_image<T: Scalar>(path: &Path, image: &Image<T>) -> Result<()> {
    let (h, w, ch) = image.dim();
    let magic = match ch {
        1 => "P5",
        3 => "P6",
        other => {
            return Err(Error::InvalidArgument(format!(
                "cannot encode {other}-channel image as PGM/PPM"
            )))
        }
    };
    let mut out = create(path)?;
    let io_err = |e| Error::io(format!("writing {}", path.display()), e);
    write!(out, "{magic}\n{w} {h}\n255\n").map_err(io_err)?;
    let mut bytes = Vec::with_capacity(h * w * ch);
    for y in 0..h {
        for x in 0..w {
            for k in 0..ch {
                let v = image[[y, x, k]].to_f64_lossy().clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    out.write_all(&bytes).map_err(io_err)?;
    out.flush().map_err(io_err)
}

/// Reads PGM/PPM (binary variants), scaling intensities to [0,1].
pub fn read_image<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let mut reader = open(path)?;
    let mut data = Vec::new();
    reader
        .read_to_end(&mut data)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if data.len() < 2 {
        return Err(format_err(path, "file too short for a PGM/PPM header"));
    }
    let channels = match &data[0..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(format_err(path, "expected P5 or P6 magic")),
    };

    let mut pos = 2;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        *field = parse_header_int(&data, &mut pos)
            .ok_or_else(|| format_err(path, "truncated header"))?;
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if w == 0 || h == 0 {
        return Err(format_err(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    let expected = w * h * channels;
    if data.len() < pos + expected {
        return Err(format_err(
            path,
            format!(
                "payload too short: need {expected} bytes, have {}",
                data.len().saturating_sub(pos)
            ),
        ));
    }
    let scale = 1.0 / maxval as f64;
    let mut image = Array3::zeros((h, w, channels));
    for y in 0..h {
        for x in 0..w {
            for k in 0..channels {
                let byte = data[pos + (y * w + x) * channels + k];
                image[[y, x, k]] = c::<T>(byte as f64 * scale);
            }
        }
    }
    Ok(image)
}

/// Advances over whitespace and `#` comments, then parses one decimal field.
fn parse_header_int(data: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && data[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return None;
    }
    std::str::from_utf8(&data[start..*pos]).ok()?.parse().ok()
}

/// Lossless tensor dump: magic, three u32 dims (height, width, channels),
/// then row-major little-endian f64 values.
pub fn write_tensor<T: Scalar>(path: &Path, image: &Image<T>) -> Result<()> {
    let (h, w, ch) = image.dim();
    let mut out = create(path)?;
    let io_err = |e| Error::io(format!("writing {}", path.display()), e);
    out.write_all(TENSOR_MAGIC).map_err(io_err)?;
    for dim in [h, w, ch] {
        out.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
    }
    for v in image.iter() {
        out.write_all(&v.to_f64_lossy().to_le_bytes())
            .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let mut reader = open(path)?;
    let mut data = Vec::new();
    reader
        .read_to_end(&mut data)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if data.len() < 20 || &data[0..8] != TENSOR_MAGIC {
        return Err(format_err(path, "bad tensor magic"));
    }
    let dim_at =
        |i: usize| u32::from_le_bytes(data[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, ch) = (dim_at(0), dim_at(1), dim_at(2));
    let expected = 20 + h * w * ch * 8;
    if data.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} bytes, got {}", data.len()),
        ));
    }
    let mut image = Array3::zeros((h, w, ch));
    for (i, v) in image.iter_mut().enumerate() {
        let at = 20 + i * 8;
        *v = c::<T>(f64::from_le_bytes(data[at..at + 8].try_into().unwrap()));
    }
    Ok(image)
}

/// Reads an image by format: tensor magic first, then PGM/PPM.
pub fn read_any<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let mut reader = open(path)?;
    let mut magic = [0u8; 2];
    reader
        .read_exact(&mut magic)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    drop(reader);
    if &magic == b"SQ" {
        read_tensor(path)
    } else {
        read_image(path)
    }
}
