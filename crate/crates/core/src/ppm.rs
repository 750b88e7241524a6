//! 8-bit PPM/PGM (binary P6/P5) images, with `[-1, 1]` ↔ `[0, 255]` mapping.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor};

/// `[-1, 1]` → `[0, 255]`, affine, rounding half up.
pub fn to_byte(v: f32) -> u8 {
    let x = (v.clamp(-1.0, 1.0) as f64 + 1.0) * 0.5 * 255.0;
    (x + 0.5).floor().min(255.0) as u8
}

pub fn from_byte(b: u8) -> f32 {
    (b as f64 / 255.0 * 2.0 - 1.0) as f32
}

pub fn encode(img: &ImageTensor) -> Result<Vec<u8>> {
    let [c, h, w] = *img.shape() else {
        return Err(Error::shape(format!("expected CHW image, got {:?}", img.shape())));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::shape(format!("PPM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(to_byte(d[(ch * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ImageTensor> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ASCII"))?);
    }
    pos += 1;
    let c = match fields[0] {
        "P6" => 3,
        "P5" => 1,
        m => return Err(bad(&format!("unsupported magic {m}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let body = bytes.get(pos..pos + w * h * c).ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = from_byte(body[(y * w + x) * c + ch]);
            }
        }
    }
    Tensor::image(c, h, w, data)
}

pub fn write_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    fs::write(path, encode(img)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        // 0 -> 127.5 rounds half up
        assert_eq!(to_byte(0.0), 128);
        assert_eq!(to_byte(5.0), 255);
    }

    #[test]
    fn roundtrip_within_quantization() {
        let img = Tensor::from_fn(&[3, 4, 5], |i| (i as f32 * 0.1).sin());
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
        assert!(decode(b"P3\n1 1\n255\n").is_err());
    }
}
