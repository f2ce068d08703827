//! Binary greyscale PGM output for maps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, Tensor};

/// `P5` image of an `[H, W]` map, min-max normalized to 0..=255 and
/// rounded half up. A constant map renders as uniform 128.
pub fn pgm_bytes(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = map.dims2()?;
    ensure_finite(map.data(), "render_pgm")?;
    let (lo, hi) = map.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    if h * w == 0 {
        return Ok(out);
    }
    if hi == lo {
        out.extend(std::iter::repeat_n(128u8, h * w));
    } else {
        out.extend(map.data().iter().map(|&v| ((v - lo) / (hi - lo) * 255.0 + 0.5).floor().min(255.0) as u8));
    }
    Ok(out)
}

pub fn render_pgm(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, pgm_bytes(map)?)?;
    Ok(())
}

/// Parses a `P5` image with maxval 255, returning `(width, height, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "truncated PGM header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P5" {
        return Err(Error::format(0, format!("expected P5, found {:?}", fields[0].1)));
    }
    let num = |i: usize| -> Result<usize> {
        let (at, s) = fields[i];
        s.parse().map_err(|_| Error::format(at as u64, format!("bad PGM header field {s:?}")))
    };
    let (w, h, max) = (num(1)?, num(2)?, num(3)?);
    if max != 255 {
        return Err(Error::format(fields[3].0 as u64, format!("maxval {max} is not 255")));
    }
    // a single whitespace byte separates the header from the raster
    let body = &bytes[(pos + 1).min(bytes.len())..];
    if body.len() != w * h {
        return Err(Error::format(
            pos as u64 + 1,
            format!("raster has {} bytes, header declares {}", body.len(), w * h),
        ));
    }
    Ok((w, h, body.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_example() {
        let m = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let b = pgm_bytes(&m).unwrap();
        assert!(b.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&b[b.len() - 4..], &[0, 255, 255, 0]);
    }

    #[test]
    fn constant_map_is_mid_grey() {
        let (w, h, px) = read_pgm(&pgm_bytes(&Tensor::full(&[3, 5], -2.5)).unwrap()).unwrap();
        assert_eq!((w, h), (5, 3));
        assert!(px.iter().all(|&p| p == 128));
    }

    #[test]
    fn rounds_half_up() {
        // 0.5/255 of the range lands exactly between 0 and 1
        let m = Tensor::new(&[1, 3], vec![0.0, 0.5, 255.0]).unwrap();
        let (_, _, px) = read_pgm(&pgm_bytes(&m).unwrap()).unwrap();
        assert_eq!(px, vec![0, 1, 255]);
    }

    #[test]
    fn writes_files_and_rejects_non_finite_maps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        render_pgm(&Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(), &p).unwrap();
        assert_eq!(read_pgm(&std::fs::read(&p).unwrap()).unwrap(), (2, 1, vec![0, 255]));
        assert!(matches!(pgm_bytes(&Tensor::from_parts(vec![1, 1], vec![f64::NAN])), Err(Error::NonFinite(_))));
        assert!(matches!(render_pgm(&Tensor::zeros(&[1, 1]), dir.path().join("no/such/dir.pgm")), Err(Error::Io(_))));
    }
}
