//! Binary cross-section rasters and their PGM encoding.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Binary raster of the channel cross-section; 1 = fluid, 0 = background.
///
/// Row-major, `height` rows by `width` columns.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FlowShape {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl FlowShape {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![1; height * width],
        }
    }

    /// Builds a raster from 0/1 values; anything nonzero counts as fluid.
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: format!("{} pixels ({height}x{width})", height * width),
                actual: format!("{} pixels", pixels.len()),
            });
        }
        let pixels = pixels.into_iter().map(|p| (p != 0) as u8).collect();
        Ok(Self { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c) as u8);
            }
        }
        Self { height, width, pixels }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, fluid: bool) {
        self.pixels[row * self.width + col] = fluid as u8;
    }

    pub fn fluid_count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn mirror_columns(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| 1 - p).collect(),
        }
    }

    pub(crate) fn check_dims(&self, other: &FlowShape) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", self.height, self.width),
                actual: format!("{}x{}", other.height, other.width),
            });
        }
        Ok(())
    }

    /// Writes a binary PGM (P5, maxval 255, fluid = 255).
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|&p| p * 255).collect();
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.pixels.len() + 20);
        self.write_pgm(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a binary PGM. Gray levels at or above half of maxval are fluid.
    pub fn read_pgm<R: Read>(mut input: R) -> Result<Self> {
        let mut data = Vec::new();
        input.read_to_end(&mut data)?;
        Self::from_pgm_bytes(&data)
    }

    pub fn from_pgm_bytes(data: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let magic = next_token(data, &mut pos)?;
        if magic != b"P5" {
            return Err(Error::corrupt(
                "PGM",
                format!("expected magic P5, found {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        let width = parse_header_number(data, &mut pos, "width")?;
        let height = parse_header_number(data, &mut pos, "height")?;
        let maxval = parse_header_number(data, &mut pos, "maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::corrupt(
                "PGM",
                format!("unsupported maxval {maxval} (only 8-bit images are accepted)"),
            ));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height;
        if data.len() < pos + n {
            return Err(Error::corrupt(
                "PGM",
                format!("raster truncated: need {n} bytes, have {}", data.len().saturating_sub(pos)),
            ));
        }
        let threshold = maxval.div_ceil(2);
        let pixels = data[pos..pos + n].iter().map(|&b| (b as usize >= threshold) as u8).collect();
        Ok(Self { height, width, pixels })
    }
}

fn next_token<'a>(data: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::corrupt("PGM", "unexpected end of header"));
    }
    Ok(&data[start..*pos])
}

fn parse_header_number(data: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let tok = next_token(data, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::corrupt("PGM", format!("bad {field} {:?}", String::from_utf8_lossy(tok))))
}
