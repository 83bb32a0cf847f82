//! Forward model: pillar sequences to sculpted cross-sections.
//!
//! Each of the 32 pillar classes owns a precomputed backward deformation map
//! giving, for every pixel of the deformed cross-section, the continuous
//! source coordinate the fluid there came from. A sequence is rendered by
//! chaining those lookups from the last pillar back to the first and testing
//! the resulting source coordinate against the undeformed inlet stripe.
//!
//! The maps come from a synthetic divergence-free field: a periodized
//! stream-function dipole centred on the pillar position,
//!
//! ```text
//! psi(y, z) = A * D^2 * sum_n phi((y - p - n) / (k D)) * sin(pi z),   phi(t) = t exp(-t^2 / 2)
//! ```
//!
//! with `y` in [-0.5, 0.5] across the width (pixel centres of the first and
//! last column), `z` in [0, 1] across the height, and displacement
//! `(dy, dz) = (d psi / dz, -d psi / dy)`. The dipole is odd about the pillar
//! so a pillar at `-p` produces exactly the column mirror of a pillar at `p`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::shape::FlowShape;

/// Number of discrete pillar classes.
pub const NUM_CLASSES: usize = 32;

/// Default cap on sequence length.
pub const MAX_SEQUENCE_LEN: usize = 20;

/// Lateral positions in class order (position varies fastest).
/// The cyclic successor of 0.375 is 0.5, stored as its wall-equivalent -0.5.
pub const POSITIONS: [f64; 8] = [0.0, 0.125, 0.25, 0.375, -0.5, -0.375, -0.25, -0.125];

/// Diameters in class order, one block of eight positions per diameter.
pub const DIAMETERS: [f64; 4] = [0.375, 0.5, 0.625, 0.25];

const MAP_MAGIC: &[u8; 4] = b"FSMP";
const MAP_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelSpec {
    pub height: usize,
    pub width: usize,
    /// Width fraction of the centred inlet stripe.
    pub inlet_fraction: f64,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            height: 12,
            width: 100,
            inlet_fraction: 0.25,
        }
    }
}

impl ChannelSpec {
    pub fn new(height: usize, width: usize, inlet_fraction: f64) -> Result<Self> {
        let spec = Self {
            height,
            width,
            inlet_fraction,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::InvalidParameter(format!(
                "channel must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        let f = self.inlet_fraction;
        if !(f > 0.0 && f <= 1.0) || f * (self.width as f64) < 1.0 {
            return Err(Error::InvalidParameter(format!(
                "inlet fraction {f} must lie in (0, 1] and cover at least one column"
            )));
        }
        Ok(())
    }

    /// Half-open column range `[lo, hi)` of the undeformed stripe.
    pub fn stripe_columns(&self) -> (usize, usize) {
        let w = self.width as f64;
        let f = self.inlet_fraction;
        let lo = (w * (1.0 - f) / 2.0).floor() as usize;
        let hi = (w * (1.0 + f) / 2.0).floor() as usize;
        (lo, hi.min(self.width))
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PillarConfig {
    /// 1-based class index.
    pub index: usize,
    /// Lateral offset as a fraction of the channel width, in [-0.5, 0.5].
    pub position: f64,
    /// Diameter as a fraction of the channel width.
    pub diameter: f64,
}

/// The 32-entry class table.
///
/// Index `1 + 8 * d + p` holds position `POSITIONS[p]` and diameter
/// `DIAMETERS[d]`, so index 1 is (0.0, 0.375) and index 2 is (0.125, 0.375).
pub fn class_table() -> Vec<PillarConfig> {
    let mut table = Vec::with_capacity(NUM_CLASSES);
    for &diameter in &DIAMETERS {
        for &position in &POSITIONS {
            table.push(PillarConfig {
                index: table.len() + 1,
                position,
                diameter,
            });
        }
    }
    table
}

pub fn pillar_config(index: usize) -> Result<PillarConfig> {
    if !(1..=NUM_CLASSES).contains(&index) {
        return Err(Error::InvalidPillar {
            index,
            position: 0,
            max: NUM_CLASSES,
        });
    }
    let zero = index - 1;
    Ok(PillarConfig {
        index,
        position: POSITIONS[zero % POSITIONS.len()],
        diameter: DIAMETERS[zero / POSITIONS.len()],
    })
}

/// Class whose pillar sits at the mirrored position with the same diameter.
/// Wall pillars (position -0.5) are their own partner.
pub fn mirror_index(index: usize) -> Result<usize> {
    let zero = pillar_config(index)?.index - 1;
    let (d, p) = (zero / POSITIONS.len(), zero % POSITIONS.len());
    let mirrored = (POSITIONS.len() - p) % POSITIONS.len();
    Ok(1 + d * POSITIONS.len() + mirrored)
}

pub fn mirror_sequence(seq: &PillarSequence) -> Result<PillarSequence> {
    seq.iter()
        .map(|&k| mirror_index(k))
        .collect::<Result<Vec<_>>>()
        .map(PillarSequence::from)
}

/// Ordered list of 1-based pillar classes, first-applied first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct PillarSequence(Vec<usize>);

impl PillarSequence {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn validated(indices: Vec<usize>) -> Result<Self> {
        let seq = Self(indices);
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        for (position, &index) in self.0.iter().enumerate() {
            if !(1..=NUM_CLASSES).contains(&index) {
                return Err(Error::InvalidPillar {
                    index,
                    position,
                    max: NUM_CLASSES,
                });
            }
        }
        Ok(())
    }

    pub fn push(&mut self, index: usize) {
        self.0.push(index);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, usize> {
        self.0.iter()
    }

    pub fn prefix(&self, len: usize) -> Self {
        Self(self.0[..len.min(self.0.len())].to_vec())
    }

    pub fn concat(&self, other: &PillarSequence) -> Self {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        Self(v)
    }

    pub fn without(&self, position: usize) -> Self {
        let mut v = self.0.clone();
        v.remove(position);
        Self(v)
    }

    /// Comma-separated indices, e.g. `3,17,5`.
    pub fn to_csv(&self) -> String {
        self.0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
    }

    /// Parses a comma-separated list; blank input is the empty sequence.
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Ok(Self::new());
        }
        let indices = trimmed
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidParameter(format!("bad pillar index {:?}", tok.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::validated(indices)
    }
}

impl From<Vec<usize>> for PillarSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

impl<'a> IntoIterator for &'a PillarSequence {
    type Item = &'a usize;
    type IntoIter = std::slice::Iter<'a, usize>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapGenParams {
    pub amplitude: f64,
    /// Dipole width as a multiple of the pillar diameter.
    pub width_scale: f64,
    pub substeps: usize,
}

impl Default for MapGenParams {
    fn default() -> Self {
        Self {
            amplitude: 0.5,
            width_scale: 0.75,
            substeps: 4,
        }
    }
}

impl MapGenParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "amplitude must be finite and non-negative, got {}",
                self.amplitude
            )));
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "width scale must be positive, got {}",
                self.width_scale
            )));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidParameter("substeps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-pixel continuous (row, col) coordinates in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    height: usize,
    width: usize,
    coords: Vec<[f64; 2]>,
}

impl CoordGrid {
    pub fn identity(height: usize, width: usize) -> Self {
        let mut coords = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                coords.push([r as f64, c as f64]);
            }
        }
        Self { height, width, coords }
    }

    pub fn from_coords(height: usize, width: usize, coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: format!("{} coordinates", height * width),
                actual: format!("{}", coords.len()),
            });
        }
        Ok(Self { height, width, coords })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> [f64; 2] {
        self.coords[row * self.width + col]
    }

    /// Bilinear interpolation of the stored coordinates at a continuous
    /// location, clamped to the grid.
    #[inline]
    pub fn sample(&self, row: f64, col: f64) -> [f64; 2] {
        let (r0, fr) = split_cell(row, self.height);
        let (c0, fc) = split_cell(col, self.width);
        let w = self.width;
        let i00 = r0 * w + c0;
        let p00 = self.coords[i00];
        let p01 = self.coords[i00 + 1];
        let p10 = self.coords[i00 + w];
        let p11 = self.coords[i00 + w + 1];
        let mut out = [0.0; 2];
        for k in 0..2 {
            let top = p00[k] + (p01[k] - p00[k]) * fc;
            let bottom = p10[k] + (p11[k] - p10[k]) * fc;
            out[k] = top + (bottom - top) * fr;
        }
        out
    }

    /// The column-mirrored grid: what the same field reflected across the
    /// channel centreline would produce.
    pub fn mirror_columns(&self) -> Self {
        let far = (self.width - 1) as f64;
        let mut coords = Vec::with_capacity(self.coords.len());
        for r in 0..self.height {
            for c in 0..self.width {
                let [sr, sc] = self.at(r, self.width - 1 - c);
                coords.push([sr, far - sc]);
            }
        }
        Self {
            height: self.height,
            width: self.width,
            coords,
        }
    }

    pub fn is_finite_within_domain(&self) -> bool {
        let (hmax, wmax) = ((self.height - 1) as f64, (self.width - 1) as f64);
        self.coords
            .iter()
            .all(|&[r, c]| r.is_finite() && c.is_finite() && (0.0..=hmax).contains(&r) && (0.0..=wmax).contains(&c))
    }
}

#[inline]
fn split_cell(x: f64, extent: usize) -> (usize, f64) {
    let max = (extent - 1) as f64;
    let x = x.clamp(0.0, max);
    let base = (x.floor() as usize).min(extent - 2);
    (base, x - base as f64)
}

/// Backward deformation map of one pillar class.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationMap {
    pub class_index: usize,
    pub substeps: usize,
    pub grid: CoordGrid,
}

#[inline]
fn dipole(t: f64) -> f64 {
    t * (-0.5 * t * t).exp()
}

#[inline]
fn dipole_slope(t: f64) -> f64 {
    (1.0 - t * t) * (-0.5 * t * t).exp()
}

/// Displacement of one pillar's field at a normalized location, in
/// normalized units `(dy, dz)`.
pub fn displacement(config: &PillarConfig, params: &MapGenParams, y: f64, z: f64) -> (f64, f64) {
    let scale = params.width_scale * config.diameter;
    let strength = params.amplitude * config.diameter * config.diameter;
    let x = y - config.position;
    // nearest periodic image; round() is odd so the wrap is mirror-exact
    let d = x - x.round();
    let mut sum = dipole(d / scale);
    let mut slope = dipole_slope(d / scale);
    for n in [1.0, 2.0, 3.0] {
        sum += dipole((d - n) / scale) + dipole((d + n) / scale);
        slope += dipole_slope((d - n) / scale) + dipole_slope((d + n) / scale);
    }
    let dy = strength * sum * PI * (PI * z).cos();
    let dz = -strength * slope / scale * (PI * z).sin();
    (dy, dz)
}

/// Integrates the negated field from every pixel to obtain its source
/// coordinate, in `params.substeps` explicit Euler steps with clamping.
pub fn build_map(config: &PillarConfig, channel: &ChannelSpec, params: &MapGenParams) -> Result<DeformationMap> {
    channel.validate()?;
    params.validate()?;
    if !(config.diameter > 0.0 && config.diameter.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "pillar diameter must be positive, got {}",
            config.diameter
        )));
    }
    let (h, w) = (channel.height, channel.width);
    let row_span = (h - 1) as f64;
    let col_span = (w - 1) as f64;
    let half = col_span / 2.0;
    let inv_steps = 1.0 / params.substeps as f64;

    let mut coords = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            // centred column coordinate keeps the mirror image exact
            let mut u = c as f64 - half;
            let mut row = r as f64;
            for _ in 0..params.substeps {
                let (dy, dz) = displacement(config, params, u / col_span, row / row_span);
                u = (u - dy * col_span * inv_steps).clamp(-half, half);
                row = (row - dz * row_span * inv_steps).clamp(0.0, row_span);
            }
            coords.push([row, u + half]);
        }
    }
    Ok(DeformationMap {
        class_index: config.index,
        substeps: params.substeps,
        grid: CoordGrid {
            height: h,
            width: w,
            coords,
        },
    })
}

/// Undeformed inlet: a full-height stripe over `ChannelSpec::stripe_columns`.
pub fn initial_shape(channel: &ChannelSpec) -> FlowShape {
    let (lo, hi) = channel.stripe_columns();
    FlowShape::from_fn(channel.height, channel.width, |_, c| c >= lo && c < hi)
}

/// All 32 deformation maps for one channel geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarLibrary {
    channel: ChannelSpec,
    maps: Vec<DeformationMap>,
}

impl PillarLibrary {
    pub fn build(channel: ChannelSpec, params: &MapGenParams) -> Result<Self> {
        let maps = class_table()
            .iter()
            .map(|cfg| build_map(cfg, &channel, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { channel, maps })
    }

    pub fn from_maps(channel: ChannelSpec, maps: Vec<DeformationMap>) -> Result<Self> {
        channel.validate()?;
        if maps.len() != NUM_CLASSES {
            return Err(Error::InvalidParameter(format!(
                "library needs {NUM_CLASSES} maps, got {}",
                maps.len()
            )));
        }
        for (i, m) in maps.iter().enumerate() {
            if m.class_index != i + 1 {
                return Err(Error::InvalidParameter(format!(
                    "map at slot {} carries class index {}",
                    i + 1,
                    m.class_index
                )));
            }
            if m.grid.height != channel.height || m.grid.width != channel.width {
                return Err(Error::DimensionMismatch {
                    expected: format!("{}x{}", channel.height, channel.width),
                    actual: format!("{}x{}", m.grid.height, m.grid.width),
                });
            }
        }
        Ok(Self { channel, maps })
    }

    pub fn channel(&self) -> &ChannelSpec {
        &self.channel
    }

    /// `channel` with a different inlet fraction; the maps do not depend on it.
    pub fn with_inlet_fraction(mut self, inlet_fraction: f64) -> Result<Self> {
        self.channel.inlet_fraction = inlet_fraction;
        self.channel.validate()?;
        Ok(self)
    }

    pub fn maps(&self) -> &[DeformationMap] {
        &self.maps
    }

    pub fn map(&self, index: usize) -> &DeformationMap {
        &self.maps[index - 1]
    }

    /// Chains backward lookups: last pillar's grid first, first pillar's last.
    pub fn compose(&self, seq: &PillarSequence) -> Result<CoordGrid> {
        seq.validate()?;
        let (h, w) = (self.channel.height, self.channel.width);
        let Some((&last, rest)) = seq.indices().split_last() else {
            return Ok(CoordGrid::identity(h, w));
        };
        let mut coords = self.map(last).grid.coords.clone();
        for &k in rest.iter().rev() {
            let grid = &self.map(k).grid;
            for p in coords.iter_mut() {
                *p = grid.sample(p[0], p[1]);
            }
        }
        Ok(CoordGrid {
            height: h,
            width: w,
            coords,
        })
    }

    /// Shape after the sequence: point-in-stripe on composed source columns.
    pub fn render(&self, seq: &PillarSequence) -> Result<FlowShape> {
        let grid = self.compose(seq)?;
        Ok(self.sample_stripe(&grid))
    }

    pub fn sample_stripe(&self, grid: &CoordGrid) -> FlowShape {
        let (lo, hi) = self.channel.stripe_columns();
        let (lo, hi) = (lo as f64, hi as f64);
        let pixels = grid.coords.iter().map(|&[_, c]| (c >= lo && c < hi) as u8).collect();
        FlowShape::from_pixels(grid.height, grid.width, pixels).expect("grid dimensions are consistent")
    }

    pub fn initial_shape(&self) -> FlowShape {
        initial_shape(&self.channel)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAP_MAGIC)?;
        out.write_all(&MAP_VERSION.to_le_bytes())?;
        out.write_all(&(self.channel.height as u32).to_le_bytes())?;
        out.write_all(&(self.channel.width as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.channel.pixel_count() * 16 + 8);
        for m in &self.maps {
            buf.clear();
            buf.extend_from_slice(&(m.class_index as u32).to_le_bytes());
            buf.extend_from_slice(&(m.substeps as u32).to_le_bytes());
            for &[r, c] in &m.grid.coords {
                buf.extend_from_slice(&r.to_le_bytes());
                buf.extend_from_slice(&c.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    /// Reads a map library; the inlet fraction is not stored and is taken
    /// from `inlet_fraction`.
    pub fn read<R: Read>(mut input: R, inlet_fraction: f64) -> Result<Self> {
        let mut data = Vec::new();
        input.read_to_end(&mut data)?;
        Self::from_bytes(&data, inlet_fraction)
    }

    pub fn from_bytes(data: &[u8], inlet_fraction: f64) -> Result<Self> {
        let mut cur = crate::codec::Cursor::new(data, "map library");
        cur.expect_magic(MAP_MAGIC)?;
        let version = cur.u32()?;
        if version != MAP_VERSION {
            return Err(Error::corrupt("map library", format!("unsupported version {version}")));
        }
        let height = cur.u32()? as usize;
        let width = cur.u32()? as usize;
        let channel = ChannelSpec::new(height, width, inlet_fraction)?;
        let mut maps = Vec::with_capacity(NUM_CLASSES);
        for _ in 0..NUM_CLASSES {
            let class_index = cur.u32()? as usize;
            let substeps = cur.u32()? as usize;
            let mut coords = Vec::with_capacity(height * width);
            for _ in 0..height * width {
                let r = cur.f64()?;
                let c = cur.f64()?;
                coords.push([r, c]);
            }
            let grid = CoordGrid { height, width, coords };
            if !grid.is_finite_within_domain() {
                return Err(Error::corrupt(
                    "map library",
                    format!("map {class_index} has coordinates outside the channel"),
                ));
            }
            maps.push(DeformationMap {
                class_index,
                substeps,
                grid,
            });
        }
        cur.finish()?;
        Self::from_maps(channel, maps).map_err(|e| Error::corrupt("map library", e.to_string()))
    }
}
