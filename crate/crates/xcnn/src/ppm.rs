//! Binary portable pixmap (P6) encoding for the introspection images.
//! Dependency-free and byte-exact: the same pixels always produce the same
//! file.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use xcnn_core::introspect::RgbImage;

use crate::error::{Error, Result};

pub fn encode(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(img)).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|(what, offset)| Error::format(path, what, offset))
}

/// Parse a P6 file: `P6`, width, height, maxval 255, raw pixels.  Header
/// tokens may be separated by any whitespace and `#` comments.
fn token(bytes: &[u8], pos: &mut usize) -> std::result::Result<String, (String, u64)> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(("unexpected end of header".into(), start as u64));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn decode(bytes: &[u8]) -> std::result::Result<RgbImage, (String, u64)> {
    let mut pos = 0usize;
    let magic = token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err((format!("magic `{magic}` is not P6"), 0));
    }
    let dim = |pos: &mut usize| {
        let at = *pos;
        let t = token(bytes, pos)?;
        t.parse::<usize>().map_err(|_| (format!("bad header number `{t}`"), at as u64))
    };
    let width = dim(&mut pos)?;
    let height = dim(&mut pos)?;
    let maxval = dim(&mut pos)?;
    if maxval != 255 {
        return Err((format!("maxval {maxval}, expected 255"), pos as u64));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(("missing raster separator".into(), pos as u64));
    }
    pos += 1;
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() != need {
        return Err((
            format!("raster holds {} bytes, expected {need}", raster.len()),
            (pos + raster.len().min(need)) as u64,
        ));
    }
    Ok(RgbImage { width, height, pixels: raster.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> RgbImage {
        let mut img = RgbImage::new(3, 2);
        for y in 0..2 {
            for x in 0..3 {
                img.put(x, y, [(x * 40) as u8, (y * 90) as u8, 200]);
            }
        }
        img
    }

    #[test]
    fn files_round_trip_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = sample();
        write_ppm(&path, &img).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), img);
        // Same pixels, same bytes.
        let again = dir.path().join("img2.ppm");
        write_ppm(&again, &img).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn header_allows_comments_and_odd_whitespace() {
        let img = sample();
        let mut bytes = b"P6 # comment\n# another\n 3\t2 255\n".to_vec();
        bytes.extend_from_slice(&img.pixels);
        assert_eq!(decode(&bytes).unwrap(), img);
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected_with_offsets() {
        let img = sample();
        let mut bytes = encode(&img);
        bytes.truncate(bytes.len() - 4);
        let (what, _) = decode(&bytes).unwrap_err();
        assert!(what.contains("expected 18"), "{what}");

        let (what, offset) = decode(b"P5\n1 1\n255\nxxx").unwrap_err();
        assert!(what.contains("P6"), "{what}");
        assert_eq!(offset, 0);
    }
}
