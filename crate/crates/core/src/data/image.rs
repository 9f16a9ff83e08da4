//! 8-bit interleaved images and the geometry ops the pipeline needs:
//! binary PPM (P6) decode/encode, bilinear resize, crop, flip, transpose,
//! rotation with edge-replicate fill, and per-channel scaling.
//!
//! Anything that is not a P6 PPM or a tensor file must be converted
//! upstream.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::data::DataError;
use crate::tensor::{Element, Tensor};

/// Interleaved row-major `[H, W, C]` image with 0-255 values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<u8>) -> Result<Image, DataError> {
        if data.len() != h * w * c || c == 0 {
            return Err(DataError::Image(format!(
                "image data length {} does not match {h}x{w}x{c}",
                data.len()
            )));
        }
        Ok(Image { h, w, c, data })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: u8) -> Image {
        Image {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> u8 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: u8) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    /// Bilinear resize. Uses pixel-center alignment and clamps at borders.
    pub fn resize(&self, new_h: usize, new_w: usize) -> Image {
        if new_h == self.h && new_w == self.w {
            return self.clone();
        }
        let mut out = Image::filled(new_h, new_w, self.c, 0);
        let sy = self.h as f32 / new_h as f32;
        let sx = self.w as f32 / new_w as f32;
        for y in 0..new_h {
            let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(self.h - 1);
            let y1 = (y0 + 1).min(self.h - 1);
            let wy = fy - y0 as f32;
            for x in 0..new_w {
                let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx.floor() as usize).min(self.w - 1);
                let x1 = (x0 + 1).min(self.w - 1);
                let wx = fx - x0 as f32;
                for ch in 0..self.c {
                    let v00 = self.at(y0, x0, ch) as f32;
                    let v01 = self.at(y0, x1, ch) as f32;
                    let v10 = self.at(y1, x0, ch) as f32;
                    let v11 = self.at(y1, x1, ch) as f32;
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    out.set(y, x, ch, clamp_u8(top + (bot - top) * wy));
                }
            }
        }
        out
    }

    /// Copy out the `[y..y+h, x..x+w]` region. The source is untouched.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image, DataError> {
        if w == 0 || h == 0 || x + w > self.w || y + h > self.h {
            return Err(DataError::Image(format!(
                "crop {x},{y} {w}x{h} outside {}x{}",
                self.w, self.h
            )));
        }
        let mut data = Vec::with_capacity(w * h * self.c);
        for yy in y..y + h {
            let start = (yy * self.w + x) * self.c;
            data.extend_from_slice(&self.data[start..start + w * self.c]);
        }
        Image::new(h, w, self.c, data)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    out.set(y, x, ch, self.at(y, self.w - 1 - x, ch));
                }
            }
        }
        out
    }

    /// Swap the spatial axes; an HxW image becomes WxH.
    pub fn transpose(&self) -> Image {
        let mut out = Image::filled(self.w, self.h, self.c, 0);
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    out.set(x, y, ch, self.at(y, x, ch));
                }
            }
        }
        out
    }

    /// Multiply one channel by `factor`, clamping back to 0-255.
    pub fn scale_channel(&self, ch: usize, factor: f32) -> Image {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                out.set(y, x, ch, clamp_u8(self.at(y, x, ch) as f32 * factor));
            }
        }
        out
    }

    /// Rotate around the image center by `degrees` (counter-clockwise),
    /// bilinear sampling with edge replication outside the source.
    pub fn rotate(&self, degrees: f32) -> Image {
        if degrees == 0.0 {
            return self.clone();
        }
        let rad = degrees.to_radians();
        let (sin, cos) = rad.sin_cos();
        let cy = (self.h as f32 - 1.0) / 2.0;
        let cx = (self.w as f32 - 1.0) / 2.0;
        let mut out = Image::filled(self.h, self.w, self.c, 0);
        for y in 0..self.h {
            for x in 0..self.w {
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                // Inverse map: rotate the output coordinate back.
                let sxf = cos * dx + sin * dy + cx;
                let syf = -sin * dx + cos * dy + cy;
                for ch in 0..self.c {
                    out.set(y, x, ch, self.sample_bilinear_clamped(syf, sxf, ch));
                }
            }
        }
        out
    }

    fn sample_bilinear_clamped(&self, fy: f32, fx: f32, ch: usize) -> u8 {
        let fy = fy.clamp(0.0, (self.h - 1) as f32);
        let fx = fx.clamp(0.0, (self.w - 1) as f32);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let wy = fy - y0 as f32;
        let wx = fx - x0 as f32;
        let v00 = self.at(y0, x0, ch) as f32;
        let v01 = self.at(y0, x1, ch) as f32;
        let v10 = self.at(y1, x0, ch) as f32;
        let v11 = self.at(y1, x1, ch) as f32;
        let top = v00 + (v01 - v00) * wx;
        let bot = v10 + (v11 - v10) * wx;
        clamp_u8(top + (bot - top) * wy)
    }

    /// `[H, W, C]` tensor of raw 0-255 values.
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        Tensor::new(
            vec![self.h, self.w, self.c],
            self.data.iter().map(|&v| E::from_f64(v as f64)).collect(),
        )
        .expect("image shape")
    }
}

fn clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Write a 3-channel image as binary PPM (P6, maxval 255).
pub fn write_ppm<W: Write>(w: &mut W, img: &Image) -> Result<(), DataError> {
    if img.c != 3 {
        return Err(DataError::Image(format!("PPM needs 3 channels, image has {}", img.c)));
    }
    write!(w, "P6\n{} {}\n255\n", img.w, img.h)?;
    w.write_all(&img.data)?;
    Ok(())
}

pub fn read_ppm<R: Read>(r: &mut R) -> Result<Image, DataError> {
    let mut reader = BufReader::new(r);
    let magic = read_token(&mut reader)?;
    if magic != "P6" {
        return Err(DataError::Image(format!("not a P6 PPM (magic {magic:?})")));
    }
    let w: usize = parse_token(&mut reader)?;
    let h: usize = parse_token(&mut reader)?;
    let maxval: usize = parse_token(&mut reader)?;
    if maxval != 255 {
        return Err(DataError::Image(format!("unsupported PPM maxval {maxval}")));
    }
    let mut data = vec![0u8; w * h * 3];
    reader.read_exact(&mut data)?;
    Image::new(h, w, 3, data)
}

fn parse_token<R: BufRead>(r: &mut R) -> Result<usize, DataError> {
    let tok = read_token(r)?;
    tok.parse()
        .map_err(|_| DataError::Image(format!("bad PPM header token {tok:?}")))
}

// Tokens are separated by whitespace; '#' starts a comment to end of line.
// Exactly one whitespace byte follows the maxval before the pixel data.
fn read_token<R: BufRead>(r: &mut R) -> Result<String, DataError> {
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match r.read_exact(&mut byte) {
            Ok(()) => {}
            Err(e) if !tok.is_empty() && e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let b = byte[0];
        if in_comment {
            if b == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match b {
            b'#' => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !tok.is_empty() {
                    break;
                }
            }
            _ => tok.push(b as char),
        }
    }
    Ok(tok)
}

/// Load an image by extension: `.ppm` or a `[H, W, C]` f32 tensor file.
pub fn read_image(path: &Path) -> Result<Image, DataError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => {
            let mut f = std::fs::File::open(path)?;
            read_ppm(&mut f)
        }
        Some("htst") => {
            let t = crate::io::read_tensor_file::<f32>(path)
                .map_err(|e| DataError::Image(format!("{}: {e}", path.display())))?;
            if t.rank() != 3 {
                return Err(DataError::Image(format!(
                    "tensor image must be rank 3, got {:?}",
                    t.shape()
                )));
            }
            let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let data = t.data().iter().map(|&v| clamp_u8(v)).collect();
            Image::new(h, w, c, data)
        }
        other => Err(DataError::Image(format!(
            "unsupported image extension {other:?} for {}",
            path.display()
        ))),
    }
}

pub fn write_image(path: &Path, img: &Image) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ppm(&mut f, img)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut img = Image::filled(h, w, 3, 0);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    img.set(y, x, ch, ((y * 31 + x * 7 + ch * 13) % 256) as u8);
                }
            }
        }
        img
    }

    #[test]
    fn ppm_round_trip() {
        let img = gradient_image(5, 7);
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        let back = read_ppm(&mut buf.as_slice()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_comments_are_skipped() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"P6\n# a comment\n2 1\n255\n");
        buf.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = read_ppm(&mut buf.as_slice()).unwrap();
        assert_eq!((img.h, img.w), (1, 2));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn crop_copies_without_mutating() {
        let img = gradient_image(8, 8);
        let before = img.clone();
        let crop = img.crop(2, 3, 4, 5).unwrap();
        assert_eq!(img, before);
        assert_eq!((crop.h, crop.w), (5, 4));
        assert_eq!(crop.at(0, 0, 1), img.at(3, 2, 1));
    }

    #[test]
    fn crop_out_of_bounds_is_error() {
        let img = gradient_image(4, 4);
        assert!(img.crop(2, 2, 3, 1).is_err());
        assert!(img.crop(0, 0, 0, 1).is_err());
    }

    #[test]
    fn flip_is_involution() {
        let img = gradient_image(6, 9);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn transpose_swaps_axes() {
        let img = gradient_image(3, 5);
        let t = img.transpose();
        assert_eq!((t.h, t.w), (5, 3));
        assert_eq!(t.at(4, 2, 0), img.at(2, 4, 0));
        assert_eq!(t.transpose(), img);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = gradient_image(8, 8);
        assert_eq!(img.rotate(0.0), img);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = gradient_image(8, 8);
        assert_eq!(img.resize(8, 8), img);
        let flat = Image::filled(4, 4, 3, 77);
        let up = flat.resize(9, 13);
        assert!(up.data.iter().all(|&v| v == 77));
    }
}
