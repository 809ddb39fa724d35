//! File formats: 16-bit binary PGM images, metric tables and atomic writes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::IntensityImage;

const MAXVAL: u32 = 65535;

/// Writes `P5` with 16-bit big-endian samples, `[0, 1]` mapped linearly onto
/// `[0, 65535]`. The pixel pitch goes into a header comment.
pub fn write_pgm<W: Write>(mut w: W, image: &IntensityImage) -> Result<()> {
    if let Some(bad) = image.values().iter().find(|&&v| v > 1.0) {
        return Err(Error::Range(format!("PGM samples must lie in [0, 1], found {bad}")));
    }
    let mut out = Vec::with_capacity(32 + 2 * image.values().len());
    write!(out, "P5\n# pitch={:e}\n{} {}\n{MAXVAL}\n", image.pitch(), image.width(), image.height())?;
    for &v in image.values() {
        let q = (v * MAXVAL as f64).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    w.write_all(&out)?;
    Ok(())
}

/// Reads an 8- or 16-bit `P5` file into `[0, 1]`. The pitch comment written
/// by [`write_pgm`] is honoured; otherwise `default_pitch` is used.
pub fn read_pgm<R: Read>(mut r: R, default_pitch: f64) -> Result<IntensityImage> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut pitch = default_pitch;

    if bytes.get(..2) != Some(b"P5") {
        return Err(Error::format(0, "not a binary PGM (expected P5)"));
    }
    pos += 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    let start = pos;
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    let comment = String::from_utf8_lossy(&bytes[start + 1..pos]);
                    if let Some(v) = comment.trim().strip_prefix("pitch=") {
                        pitch = v.parse().map_err(|_| Error::format(start, format!("bad pitch comment '{v}'")))?;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(pos, "truncated PGM header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(start, "header field out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "expected one whitespace byte before the raster")),
    }
    let [w, h, maxval] = fields;
    let (w, h) = (w as usize, h as usize);
    if w == 0 || h == 0 {
        return Err(Error::format(3, "zero image dimension"));
    }
    if maxval == 0 || maxval > MAXVAL {
        return Err(Error::format(pos - 1, format!("maxval {maxval} outside 1..=65535")));
    }
    let width_bytes = if maxval > 255 { 2 } else { 1 };
    let expected = w * h * width_bytes;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(Error::format(bytes.len(), format!("raster has {} bytes, expected {expected}", raster.len())));
    }
    if raster.len() > expected {
        return Err(Error::format(pos + expected, "trailing bytes after raster"));
    }
    let mut values = Vec::with_capacity(w * h);
    for (i, chunk) in raster.chunks_exact(width_bytes).enumerate() {
        let s = if width_bytes == 2 {
            u16::from_be_bytes([chunk[0], chunk[1]]) as u32
        } else {
            chunk[0] as u32
        };
        if s > maxval {
            return Err(Error::format(pos + i * width_bytes, format!("sample {s} exceeds maxval {maxval}")));
        }
        values.push(s as f64 / maxval as f64);
    }
    IntensityImage::new(w, h, pitch, values)
}

pub fn read_pgm_path(path: &Path, default_pitch: f64) -> Result<IntensityImage> {
    read_pgm(fs::File::open(path)?, default_pitch)
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Parameter(format!("'{}' has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_pgm_path(path: &Path, image: &IntensityImage) -> Result<()> {
    let mut buf = Vec::new();
    write_pgm(&mut buf, image)?;
    write_atomic(path, &buf)
}

/// `# key=value` metadata lines followed by a `metric,value` table.
pub fn metrics_csv(meta: &[(&str, String)], rows: &[(String, f64)]) -> String {
    let mut s = String::new();
    for (k, v) in meta {
        s.push_str(&format!("# {k}={v}\n"));
    }
    s.push_str("metric,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{},{v:e}\n", csv_field(k)));
    }
    s
}

/// Quotes a field when it contains a comma, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
