//! Binary PGM (P5) and PPM (P6) readers/writers, maxval 255 only, plus the
//! tensor conversions used throughout. Chosen for zero-dependency bit-exact
//! I/O.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn read_header_token<R: BufRead>(r: &mut R) -> Result<String> {
    // Skips whitespace and '#' comments between tokens.
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match r.read_exact(&mut byte) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof && !tok.is_empty() => return Ok(tok),
            Err(e) => return Err(Error::Data(format!("truncated PNM header: {e}"))),
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

fn read_pnm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let m = read_header_token(&mut r)?;
    if m != magic {
        return Err(Error::Data(format!("{}: expected {magic}, found {m:?}", path.display())));
    }
    let w: usize = read_header_token(&mut r)?.parse().map_err(|_| Error::Data(format!("{}: bad width", path.display())))?;
    let h: usize = read_header_token(&mut r)?.parse().map_err(|_| Error::Data(format!("{}: bad height", path.display())))?;
    let maxval: usize = read_header_token(&mut r)?.parse().map_err(|_| Error::Data(format!("{}: bad maxval", path.display())))?;
    if maxval != 255 {
        return Err(Error::Data(format!("{}: only maxval 255 supported, got {maxval}", path.display())));
    }
    if w == 0 || h == 0 {
        return Err(Error::Data(format!("{}: degenerate extent {w}x{h}", path.display())));
    }
    let mut data = vec![0u8; w * h * channels];
    r.read_exact(&mut data).map_err(|e| Error::Data(format!("{}: truncated pixel data: {e}", path.display())))?;
    Ok((w, h, data))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_pnm(path, "P5", 1)
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_pnm(path, "P6", 3)
}

fn write_pnm(path: &Path, magic: &str, w: usize, h: usize, data: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "{magic}\n{w} {h}\n255\n")?;
    f.write_all(data)?;
    Ok(())
}

pub fn write_pgm(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    debug_assert_eq!(data.len(), w * h);
    write_pnm(path, "P5", w, h, data)
}

pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    debug_assert_eq!(rgb.len(), 3 * w * h);
    write_pnm(path, "P6", w, h, rgb)
}

// ── Tensor conversions ───────────────────────────────────────────────

/// 8-bit grayscale to a [h, w] map in [0,1]; values divided by 255 exactly.
pub fn gray_to_map(w: usize, h: usize, bytes: &[u8]) -> Tensor {
    let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h, w], data).expect("byte count matches extent")
}

/// 8-bit grayscale to a binary [1,1,h,w] mask (threshold 128).
pub fn gray_to_mask(w: usize, h: usize, bytes: &[u8]) -> Tensor {
    let data = bytes.iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![1, 1, h, w], data).expect("byte count matches extent")
}

/// Interleaved RGB bytes to a [1,3,h,w] tensor in [0,1].
pub fn rgb_to_tensor(w: usize, h: usize, rgb: &[u8]) -> Tensor {
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    {
        let d = t.data_mut();
        for p in 0..w * h {
            for c in 0..3 {
                d[c * w * h + p] = rgb[p * 3 + c] as f64 / 255.0;
            }
        }
    }
    t
}

/// Values in [0,1] to bytes, round half away from zero.
pub fn map_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}
