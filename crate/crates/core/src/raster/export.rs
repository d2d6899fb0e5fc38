use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Framebuffer;
use crate::error::{Error, Result};

/// Linear to sRGB transfer function.
fn encode_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Writes an 8-bit sRGB-encoded PNG.
pub fn write_png(fb: &Framebuffer, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = fb
        .pixels()
        .flat_map(|p| p.map(|v| (encode_srgb(v) * 255.0).round() as u8))
        .collect();
    let img = image::RgbImage::from_raw(fb.width as u32, fb.height as u32, bytes)
        .ok_or_else(|| Error::Invalid("framebuffer size overflow".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes the clamped linear image as `u32 width, u32 height` followed by
/// row-major RGB `f32` triples, all little-endian.
pub fn write_raw_f32(fb: &Framebuffer, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(8 + fb.len() * 12);
    buf.extend_from_slice(&(fb.width as u32).to_le_bytes());
    buf.extend_from_slice(&(fb.height as u32).to_le_bytes());
    for p in fb.pixels() {
        for v in p {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_raw_f32(path: &Path) -> Result<Framebuffer> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Invalid("raw image shorter than its header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (width, height) = (word(0) as usize, word(4) as usize);
    if bytes.len() != 8 + width * height * 12 {
        return Err(Error::Invalid(format!("raw image body does not match {width}x{height}")));
    }
    let data = bytes[8..]
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().unwrap()) as f64;
            [f(0), f(4), f(8)]
        })
        .collect();
    Framebuffer::from_raw(width, height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.raw");
        let mut fb = Framebuffer::new(3, 2);
        fb.set(1, 1, [0.25, 0.5, 2.0]);
        write_raw_f32(&fb, &path).unwrap();
        let back = read_raw_f32(&path).unwrap();
        assert_eq!(back.get(1, 1), [0.25, 0.5, 1.0]);
        assert_eq!(back.get(0, 0), [0.0; 3]);
    }

    #[test]
    fn png_is_gamma_encoded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        write_png(&Framebuffer::filled(2, 2, [0.5, 0.0, 1.0]), &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.get_pixel(0, 0).0, [188, 0, 255]);
    }
}
