//! Seeded supervised data generated from the forward model.

use std::io::{Read, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::Cursor;
use crate::error::{Error, Result};
use crate::forward::{PillarLibrary, PillarSequence, NUM_CLASSES};
use crate::nn::{DataSource, Targets, Tensor};
use crate::scalar::Scalar;
use crate::shape::FlowShape;

pub const DATASET_MAGIC: &[u8; 4] = b"FSDS";
pub const DATASET_VERSION: u32 = 1;
/// Background rows between the pre- and post-shape of a juxtaposed input.
pub const PADDING_ROWS: usize = 5;
pub const SMC_PILLARS: usize = 10;

pub const APN_PREFIX_LENGTHS: RangeInclusive<usize> = 0..=9;
pub const ITN_SEQUENCE_LENGTHS: RangeInclusive<usize> = 2..=10;

const WHAT: &str = "dataset";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    /// Juxtaposed `(2H + 5) x W` input, one label.
    Apn,
    /// Pre- and post-shape as two channels, one label.
    ApnC,
    /// Final shape and bridging shape, no labels.
    Itn,
    /// Final shape and its generating labels.
    Smc,
}

impl DatasetKind {
    pub fn code(self) -> u8 {
        match self {
            DatasetKind::Apn => 1,
            DatasetKind::ApnC => 2,
            DatasetKind::Itn => 3,
            DatasetKind::Smc => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DatasetKind::Apn),
            2 => Some(DatasetKind::ApnC),
            3 => Some(DatasetKind::Itn),
            4 => Some(DatasetKind::Smc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Apn => "apn",
            DatasetKind::ApnC => "apnc",
            DatasetKind::Itn => "itn",
            DatasetKind::Smc => "smc",
        }
    }
}

/// The bridging prefix: `(n + 1) / 2` leading pillars for odd `n`, `n / 2` for even.
pub fn truncate(seq: &PillarSequence) -> Result<PillarSequence> {
    if seq.is_empty() {
        return Err(Error::Empty("pillar sequence"));
    }
    Ok(seq.prefix(seq.len().div_ceil(2)))
}

/// Stacks `pre`, five background rows and `post` vertically.
pub fn assemble_apn_input(pre: &FlowShape, post: &FlowShape) -> Result<FlowShape> {
    pre.check_dims(post)?;
    let (h, w) = pre.dims();
    let mut pixels = Vec::with_capacity((2 * h + PADDING_ROWS) * w);
    pixels.extend_from_slice(pre.pixels());
    pixels.resize(pixels.len() + PADDING_ROWS * w, 0);
    pixels.extend_from_slice(post.pixels());
    FlowShape::from_pixels(2 * h + PADDING_ROWS, w, pixels)
}

/// Generation parameters shared by all dataset kinds.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub kind: DatasetKind,
    pub count: usize,
    pub seed: u64,
    /// APN: prefix lengths; ITN: full sequence lengths; SMC: ignored (always `smc_pillars`).
    pub lengths: RangeInclusive<usize>,
    pub smc_pillars: usize,
}

impl GenSpec {
    pub fn new(kind: DatasetKind, count: usize, seed: u64) -> Self {
        let lengths = match kind {
            DatasetKind::Apn | DatasetKind::ApnC => APN_PREFIX_LENGTHS,
            DatasetKind::Itn => ITN_SEQUENCE_LENGTHS,
            DatasetKind::Smc => SMC_PILLARS..=SMC_PILLARS,
        };
        Self {
            kind,
            count,
            seed,
            lengths,
            smc_pillars: SMC_PILLARS,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidParameter("dataset count must be at least 1".into()));
        }
        let (lo, hi) = (*self.lengths.start(), *self.lengths.end());
        if lo > hi || hi > crate::forward::MAX_SEQUENCE_LEN {
            return Err(Error::InvalidParameter(format!("bad sequence length range {lo}..={hi}")));
        }
        if self.kind == DatasetKind::Itn && lo == 0 {
            return Err(Error::InvalidParameter("ITN sequences need at least one pillar".into()));
        }
        if self.kind == DatasetKind::Smc && (self.smc_pillars == 0 || self.smc_pillars > crate::forward::MAX_SEQUENCE_LEN) {
            return Err(Error::InvalidParameter(format!("bad SMC pillar count {}", self.smc_pillars)));
        }
        Ok(())
    }
}

/// Randomness of sample `index` under `seed`, independent of every other sample.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn random_sequence(rng: &mut ChaCha8Rng, len: usize) -> PillarSequence {
    PillarSequence::from((0..len).map(|_| rng.gen_range(1..=NUM_CLASSES)).collect::<Vec<_>>())
}

/// Uniform random sequence of `len` pillars for evaluation target `index`.
pub fn random_target_sequence(seed: u64, index: u64, len: usize) -> PillarSequence {
    random_sequence(&mut sample_rng(seed, index), len)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    kind: DatasetKind,
    height: usize,
    width: usize,
    shapes_per_record: usize,
    labels_per_record: usize,
    count: usize,
    pixels: Vec<u8>,
    labels: Vec<u16>,
}

impl Dataset {
    /// Generates `spec.count` samples on up to `threads` workers; the result
    /// does not depend on the worker count.
    pub fn generate(spec: &GenSpec, library: &PillarLibrary, threads: usize) -> Result<Self> {
        spec.validate()?;
        let ch = library.channel();
        let (h, w) = (ch.height, ch.width);
        let (height, shapes, labels) = match spec.kind {
            DatasetKind::Apn => (2 * h + PADDING_ROWS, 1, 1),
            DatasetKind::ApnC => (h, 2, 1),
            DatasetKind::Itn => (h, 2, 0),
            DatasetKind::Smc => (h, 1, spec.smc_pillars),
        };
        let rec_px = shapes * height * w;
        let mut ds = Self {
            kind: spec.kind,
            height,
            width: w,
            shapes_per_record: shapes,
            labels_per_record: labels,
            count: spec.count,
            pixels: vec![0; spec.count * rec_px],
            labels: vec![0; spec.count * labels],
        };
        let threads = threads.clamp(1, spec.count);
        let per = spec.count.div_ceil(threads);
        let results: Vec<Result<()>> = std::thread::scope(|scope| {
            let handles: Vec<_> = ds
                .pixels
                .chunks_mut(per * rec_px)
                .zip(
                    ds.labels
                        .chunks_mut((per * labels).max(1))
                        .map(Some)
                        .chain(std::iter::repeat_with(|| None)),
                )
                .enumerate()
                .map(|(t, (px, lb))| {
                    scope.spawn(move || -> Result<()> {
                        let start = t * per;
                        let n = px.len() / rec_px;
                        let mut empty: [u16; 0] = [];
                        let lb = lb.unwrap_or(&mut empty);
                        for j in 0..n {
                            let (shapes_out, labels_out) = generate_sample(spec, library, (start + j) as u64)?;
                            let dst = &mut px[j * rec_px..(j + 1) * rec_px];
                            let mut off = 0;
                            for s in &shapes_out {
                                dst[off..off + s.pixels().len()].copy_from_slice(s.pixels());
                                off += s.pixels().len();
                            }
                            if labels > 0 {
                                lb[j * labels..(j + 1) * labels].copy_from_slice(&labels_out);
                            }
                        }
                        Ok(())
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("generation worker panicked"))
                .collect()
        });
        for r in results {
            r?;
        }
        Ok(ds)
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// `(height, width)` of each stored raster.
    pub fn raster_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn shapes_per_record(&self) -> usize {
        self.shapes_per_record
    }

    pub fn labels_per_record(&self) -> usize {
        self.labels_per_record
    }

    fn record_pixels(&self) -> usize {
        self.shapes_per_record * self.height * self.width
    }

    /// Raster `which` of record `index`.
    pub fn shape(&self, index: usize, which: usize) -> FlowShape {
        let n = self.height * self.width;
        let start = index * self.record_pixels() + which * n;
        FlowShape::from_pixels(self.height, self.width, self.pixels[start..start + n].to_vec()).expect("stored raster dims")
    }

    pub fn labels(&self, index: usize) -> Vec<usize> {
        let m = self.labels_per_record;
        self.labels[index * m..(index + 1) * m].iter().map(|&l| l as usize).collect()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let mut head = Vec::with_capacity(33);
        head.extend_from_slice(DATASET_MAGIC);
        head.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        head.push(self.kind.code());
        head.extend_from_slice(&(self.count as u64).to_le_bytes());
        for d in [self.height, self.width, self.shapes_per_record, self.labels_per_record] {
            head.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.write_all(&head)?;
        let px = self.record_pixels();
        let m = self.labels_per_record;
        let mut rec = Vec::with_capacity(px + 2 * m);
        for i in 0..self.count {
            rec.clear();
            rec.extend_from_slice(&self.pixels[i * px..(i + 1) * px]);
            for l in &self.labels[i * m..(i + 1) * m] {
                rec.extend_from_slice(&l.to_le_bytes());
            }
            out.write_all(&rec)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut data = Vec::new();
        input.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(data, WHAT);
        cur.expect_magic(DATASET_MAGIC)?;
        let version = cur.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::corrupt(WHAT, format!("unsupported version {version}")));
        }
        let code = cur.u8()?;
        let kind = DatasetKind::from_code(code).ok_or_else(|| Error::corrupt(WHAT, format!("unknown kind {code}")))?;
        let count = cur.u64()? as usize;
        let height = cur.u32()? as usize;
        let width = cur.u32()? as usize;
        let shapes_per_record = cur.u32()? as usize;
        let labels_per_record = cur.u32()? as usize;
        let px = shapes_per_record * height * width;
        let rec = px + 2 * labels_per_record;
        if rec == 0 || data.len().saturating_sub(33) / rec < count {
            return Err(Error::corrupt(
                WHAT,
                format!("{count} records do not fit in {} bytes", data.len()),
            ));
        }
        let mut pixels = Vec::with_capacity(count * px);
        let mut labels = Vec::with_capacity(count * labels_per_record);
        for _ in 0..count {
            let raw = cur.take(px)?;
            if let Some(bad) = raw.iter().find(|&&b| b > 1) {
                return Err(Error::corrupt(WHAT, format!("pixel value {bad} is not 0/1")));
            }
            pixels.extend_from_slice(raw);
            for _ in 0..labels_per_record {
                labels.push(cur.u16()?);
            }
        }
        cur.finish()?;
        Ok(Self {
            kind,
            height,
            width,
            shapes_per_record,
            labels_per_record,
            count,
            pixels,
            labels,
        })
    }

    /// Per-sample network input shape for this kind.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            DatasetKind::Apn | DatasetKind::Smc => vec![1, self.height, self.width],
            DatasetKind::ApnC => vec![2, self.height, self.width],
            DatasetKind::Itn => vec![self.height, self.width],
        }
    }
}

/// Rasters and labels of sample `index`, recomputed from scratch.
pub fn generate_sample(spec: &GenSpec, library: &PillarLibrary, index: u64) -> Result<(Vec<FlowShape>, Vec<u16>)> {
    let mut rng = sample_rng(spec.seed, index);
    match spec.kind {
        DatasetKind::Apn | DatasetKind::ApnC => {
            let len = rng.gen_range(spec.lengths.clone());
            let prefix = random_sequence(&mut rng, len);
            let label = rng.gen_range(1..=NUM_CLASSES);
            let mut full = prefix.clone();
            full.push(label);
            let pre = library.render(&prefix)?;
            let post = library.render(&full)?;
            let shapes = if spec.kind == DatasetKind::Apn {
                vec![assemble_apn_input(&pre, &post)?]
            } else {
                vec![pre, post]
            };
            Ok((shapes, vec![label as u16]))
        }
        DatasetKind::Itn => {
            let len = rng.gen_range(spec.lengths.clone());
            let seq = random_sequence(&mut rng, len);
            let bridge = truncate(&seq)?;
            Ok((vec![library.render(&seq)?, library.render(&bridge)?], Vec::new()))
        }
        DatasetKind::Smc => {
            let seq = random_sequence(&mut rng, spec.smc_pillars);
            let labels = seq.iter().map(|&l| l as u16).collect();
            Ok((vec![library.render(&seq)?], labels))
        }
    }
}

impl<T: Scalar> DataSource<T> for Dataset {
    fn len(&self) -> usize {
        self.count
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Targets<T>)> {
        let px = self.record_pixels();
        let plane = self.height * self.width;
        let mut shape = vec![indices.len()];
        shape.extend(self.input_shape());
        let to_t = |b: &u8| if *b != 0 { T::one() } else { T::zero() };
        match self.kind {
            DatasetKind::Itn => {
                let mut x = Vec::with_capacity(indices.len() * plane);
                let mut y = Vec::with_capacity(indices.len() * plane);
                for &i in indices {
                    let rec = &self.pixels[i * px..(i + 1) * px];
                    x.extend(rec[..plane].iter().map(to_t));
                    y.extend(rec[plane..].iter().map(to_t));
                }
                Ok((
                    Tensor::new(shape, x)?,
                    Targets::Values(Tensor::new(vec![indices.len(), plane], y)?),
                ))
            }
            _ => {
                let m = self.labels_per_record;
                let mut x = Vec::with_capacity(indices.len() * px);
                let mut labels = Vec::with_capacity(indices.len() * m);
                for &i in indices {
                    x.extend(self.pixels[i * px..(i + 1) * px].iter().map(to_t));
                    labels.extend(self.labels[i * m..(i + 1) * m].iter().map(|&l| l as usize));
                }
                Ok((Tensor::new(shape, x)?, Targets::Labels(labels)))
            }
        }
    }
}

/// Sample counts for one training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preset {
    pub apn_train: usize,
    pub apn_valid: usize,
    pub itn_train: usize,
    pub itn_valid: usize,
    pub smc_train: usize,
    pub smc_valid: usize,
}

impl Preset {
    pub const DESK: Preset = Preset {
        apn_train: 20_000,
        apn_valid: 2_000,
        itn_train: 50_000,
        itn_valid: 2_000,
        smc_train: 20_000,
        smc_valid: 2_000,
    };

    pub const PAPER: Preset = Preset {
        apn_train: 250_240,
        apn_valid: 60_000,
        itn_train: 500_000,
        itn_valid: 20_000,
        smc_train: 250_240,
        smc_valid: 60_000,
    };

    pub fn by_name(name: &str) -> Option<Preset> {
        match name {
            "desk" => Some(Self::DESK),
            "paper" => Some(Self::PAPER),
            _ => None,
        }
    }
}
