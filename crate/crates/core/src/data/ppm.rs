//! Binary PPM (P6, maxval 255).

use std::path::Path;

use super::{DataError, Image};

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn err(msg: impl Into<String>) -> DataError {
    DataError::Ppm(msg.into())
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], DataError> {
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
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(err("truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, DataError> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| err(format!("bad {what} `{}`", String::from_utf8_lossy(tok))))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, DataError> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P6" {
        return Err(err("bad magic, expected P6"));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(err(format!("maxval {maxval} is not 255")));
    }
    if width == 0 || height == 0 {
        return Err(err(format!("empty image {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("truncated header"));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| err("image dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(err(format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    Ok(Image {
        width,
        height,
        data: payload[..need].iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<(), DataError> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| DataError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_ppm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_fixture() {
        let bytes = b"P6\n1 1\n255\n\xff\xff\xff";
        let img = decode_ppm(bytes).unwrap();
        assert_eq!(img.data, vec![1.0, 1.0, 1.0]);
        assert_eq!(encode_ppm(&img), bytes.to_vec());
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode_ppm(b"P6\n2 1\n255\n\xff\xff\xff").is_err());
        assert!(decode_ppm(b"P5\n1 1\n255\n\xff").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\xff\xff\xff\xff\xff\xff").is_err());
        assert!(decode_ppm(b"P6\n1").is_err());
        assert!(decode_ppm(b"").is_err());
    }

    #[test]
    fn comments_are_skipped() {
        let img = decode_ppm(b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff").unwrap();
        assert_eq!(img.pixel(0, 0)[1], 128.0 / 255.0);
    }
}
