// PFM, PGM and CSV files.
//
// PFM: `PF` (3 channels) or `Pf` (1 channel), `W H`, scale (negative means
// little-endian), then float32 rows from the bottom of the image to the top.
// PGM: binary `P5`, maxval <= 255; values are mapped between [0, 1] and 0..=maxval.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::RasterMap;
use crate::{Error, Result};

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

// Reads `count` whitespace-separated header tokens (skipping `#` comments)
// and returns them with the offset of the first payload byte.
fn header_tokens<'a>(bytes: &'a [u8], count: usize, path: &Path) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
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
            return Err(malformed(path, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..i])
            .map_err(|_| malformed(path, "non-ascii header"))?;
        tokens.push(tok);
    }
    // exactly one whitespace byte separates the header from the payload
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(malformed(path, "missing separator after header"));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str, path: &Path) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(malformed(path, format!("bad dimension {tok:?}"))),
    }
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<RasterMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tok, start) = header_tokens(&bytes, 4, path)?;
    let channels = match tok[0] {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(malformed(path, format!("unknown magic {other:?}"))),
    };
    let width = parse_dim(tok[1], path)?;
    let height = parse_dim(tok[2], path)?;
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| malformed(path, format!("bad scale {:?}", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(malformed(path, "scale must be non-zero"));
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    let payload = &bytes[start..];
    if payload.len() != 4 * n {
        return Err(malformed(
            path,
            format!("expected {} payload bytes, found {}", 4 * n, payload.len()),
        ));
    }
    let mut data = vec![0.0; n];
    let row_len = width * channels;
    for (file_row, chunk) in payload.chunks_exact(4 * row_len).enumerate() {
        let y = height - 1 - file_row;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            let v = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            data[y * row_len + i] = f64::from(v);
        }
    }
    RasterMap::from_vec(width, height, channels, data)
}

pub fn write_pfm(path: impl AsRef<Path>, map: &RasterMap) -> Result<()> {
    let path = path.as_ref();
    let magic = match map.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::UnsupportedChannels(c)),
    };
    let (w, h) = (map.width(), map.height());
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * map.len());
    let row_len = w * map.channels();
    for y in (0..h).rev() {
        for &v in &map.data()[y * row_len..(y + 1) * row_len] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM, returning values scaled to `[0, 1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<RasterMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tok, start) = header_tokens(&bytes, 4, path)?;
    if tok[0] != "P5" {
        return Err(malformed(path, format!("unknown magic {:?}", tok[0])));
    }
    let width = parse_dim(tok[1], path)?;
    let height = parse_dim(tok[2], path)?;
    let maxval = parse_dim(tok[3], path)?;
    if maxval > 255 {
        return Err(malformed(path, "only 8-bit PGM is supported"));
    }
    let payload = &bytes[start..];
    if payload.len() != width * height {
        return Err(malformed(
            path,
            format!("expected {} payload bytes, found {}", width * height, payload.len()),
        ));
    }
    let data = payload
        .iter()
        .map(|&b| f64::from(b) / maxval as f64)
        .collect();
    RasterMap::from_vec(width, height, 1, data)
}

/// Writes a one-channel map with values in `[0, 1]` as 8-bit PGM
/// (values are clamped, then rounded).
pub fn write_pgm(path: impl AsRef<Path>, map: &RasterMap) -> Result<()> {
    let path = path.as_ref();
    if map.channels() != 1 {
        return Err(Error::UnsupportedChannels(map.channels()));
    }
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(
        map.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes an RFC 4180 CSV file with a header row.
pub fn write_csv<S: AsRef<str>>(path: impl AsRef<Path>, header: &[S], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(file, header, rows).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_csv_to<W: Write, S: AsRef<str>>(
    sink: W,
    header: &[S],
    rows: &[Vec<String>],
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(header.iter().map(|s| s.as_ref()))?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()
}
