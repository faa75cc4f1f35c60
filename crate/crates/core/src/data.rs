//! Synthetic token-grid datasets and their binary file format.
//!
//! Each class owns one deterministic pattern; samples of a class differ only
//! by independent token noise.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "FAGRIDS\0"
//! 8       4     version (u32) = 1
//! 12      4     height (u32)
//! 16      4     width (u32)
//! 20      4     vocab size (u32)
//! 24      4     class count (u32)
//! 28      8     sample count (u64)
//! 36      8     pattern seed (u64)
//! 44      8     noise rate (f64)
//! 52      ...   samples: class id (u32) then H*W tokens (u16), raster order
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Coord, Token, TokenGrid};
use crate::rng;

pub const DATASET_MAGIC: &[u8; 8] = b"FAGRIDS\0";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 52;

/// Deterministic per-class rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Family {
    /// Bands of `band` rows (horizontal) or columns cycling through `tokens`.
    Stripes { horizontal: bool, band: usize, tokens: Vec<Token> },
    /// Two-token checkerboard with square cells of side `size`.
    Checker { size: usize, tokens: [Token; 2] },
    /// `(start + row_step * p + col_step * q) mod V`.
    Gradient { start: Token, row_step: usize, col_step: usize },
    /// Piecewise-constant `block x block` tiles with hashed tokens.
    Blocky { block: usize, salt: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGridSpec {
    pub class: usize,
    pub family: Family,
    pub noise_rate: f64,
    pub height: usize,
    pub width: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl SyntheticGridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidConfig(format!("noise rate {} outside [0, 1)", self.noise_rate)));
        }
        if self.height == 0 || self.width == 0 || self.vocab < 2 || self.vocab > u16::MAX as usize + 1 {
            return Err(Error::InvalidConfig(format!(
                "grid {}x{} with vocab {}",
                self.height, self.width, self.vocab
            )));
        }
        let ok = match &self.family {
            Family::Stripes { band, tokens, .. } => {
                *band > 0 && !tokens.is_empty() && tokens.iter().all(|&t| (t as usize) < self.vocab)
            }
            Family::Checker { size, tokens } => *size > 0 && tokens.iter().all(|&t| (t as usize) < self.vocab),
            Family::Gradient { start, .. } => (*start as usize) < self.vocab,
            Family::Blocky { block, .. } => *block > 0,
        };
        if !ok {
            return Err(Error::InvalidConfig(format!("bad family parameters {:?}", self.family)));
        }
        Ok(())
    }

    /// The noiseless token at `(p, q)`.
    pub fn token_at(&self, p: usize, q: usize) -> Token {
        let v = self.vocab;
        match &self.family {
            Family::Stripes { horizontal, band, tokens } => {
                let k = if *horizontal { p } else { q };
                tokens[(k / band) % tokens.len()]
            }
            Family::Checker { size, tokens } => tokens[(p / size + q / size) % 2],
            Family::Gradient { start, row_step, col_step } => {
                ((*start as usize + row_step * p + col_step * q) % v) as Token
            }
            Family::Blocky { block, salt } => {
                let key = salt ^ ((p / block) as u64) << 32 ^ (q / block) as u64;
                (rng::splitmix64(key) % v as u64) as Token
            }
        }
    }

    pub fn clean_grid(&self) -> Result<TokenGrid> {
        let tokens = (0..self.height * self.width)
            .map(|i| self.token_at(i / self.width, i % self.width))
            .collect();
        TokenGrid::new(self.height, self.width, self.vocab, tokens)
    }

    /// A clean grid with each token independently replaced, at the noise
    /// rate, by a uniformly chosen different token.
    pub fn sample(&self, rng: &mut rng::Rng) -> Result<TokenGrid> {
        let mut grid = self.clean_grid()?;
        let v = self.vocab as u32;
        for p in 0..self.height {
            for q in 0..self.width {
                if rng.random::<f64>() < self.noise_rate {
                    let at = Coord::new(p, q);
                    let old = grid.get(at);
                    let mut t = rng.random_range(0..v - 1);
                    if t >= old {
                        t += 1;
                    }
                    grid.set(at, t)?;
                }
            }
        }
        Ok(grid)
    }
}

/// The standard class set: families cycle through stripes, checkers,
/// gradients and blocky textures, with parameters drawn from the
/// `"pattern.<class>"` stream of `seed`.
pub fn default_specs(classes: usize, height: usize, width: usize, vocab: usize, noise_rate: f64, seed: u64) -> Result<Vec<SyntheticGridSpec>> {
    let specs: Vec<SyntheticGridSpec> = (0..classes)
        .map(|class| {
            let mut r = rng::stream(seed, &format!("pattern.{class}"));
            let v = vocab as u32;
            let mut distinct = |n: usize| -> Vec<Token> {
                let mut out: Vec<Token> = Vec::with_capacity(n);
                while out.len() < n.min(vocab) {
                    let t = r.random_range(0..v);
                    if !out.contains(&t) {
                        out.push(t);
                    }
                }
                out
            };
            let round = class / 4;
            let family = match class % 4 {
                0 => Family::Stripes {
                    horizontal: round % 2 == 0,
                    band: 1 + round % 3,
                    tokens: distinct(2 + round % 3),
                },
                1 => {
                    let t = distinct(2);
                    Family::Checker {
                        size: 1 + round % 3,
                        tokens: [t[0], t[1]],
                    }
                }
                2 => {
                    let start = distinct(1)[0];
                    Family::Gradient {
                        start,
                        row_step: 1 + round % 3,
                        col_step: 1 + (round + 1) % 2,
                    }
                }
                _ => Family::Blocky {
                    block: 2 + round % 3,
                    salt: r.random(),
                },
            };
            SyntheticGridSpec {
                class,
                family,
                noise_rate,
                height,
                width,
                vocab,
                seed,
            }
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub height: usize,
    pub width: usize,
    pub vocab: usize,
    pub classes: usize,
    pub count: usize,
    pub seed: u64,
    pub noise_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub class: usize,
    pub grid: TokenGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

/// Roughly one sample in eleven goes to validation.
pub fn split_of(seed: u64, index: usize) -> Split {
    if rng::splitmix64(rng::stream_seed(seed, "split") ^ index as u64).is_multiple_of(11) {
        Split::Val
    } else {
        Split::Train
    }
}

/// `counts[c]` samples of class `c`, interleaved round-robin across
/// classes; noise draws come from the `"data"` stream of `seed`.
pub fn generate_dataset(specs: &[SyntheticGridSpec], counts: &[usize], seed: u64) -> Result<Dataset> {
    let first = specs.first().ok_or_else(|| Error::InvalidConfig("no pattern specs".into()))?;
    if counts.len() != specs.len() {
        return Err(Error::InvalidConfig(format!("{} counts for {} specs", counts.len(), specs.len())));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        if s.class != i
            || (s.height, s.width, s.vocab, s.noise_rate, s.seed)
                != (first.height, first.width, first.vocab, first.noise_rate, first.seed)
        {
            return Err(Error::InvalidConfig(format!("spec {i} disagrees with spec 0 on class, dims, vocab, noise or seed")));
        }
    }
    let mut r = rng::stream(seed, "data");
    let mut left = counts.to_vec();
    let mut samples = Vec::with_capacity(counts.iter().sum());
    while left.iter().any(|&n| n > 0) {
        for (class, n) in left.iter_mut().enumerate() {
            if *n > 0 {
                *n -= 1;
                samples.push(Sample {
                    class,
                    grid: specs[class].sample(&mut r)?,
                });
            }
        }
    }
    Ok(Dataset {
        header: DatasetHeader {
            height: first.height,
            width: first.width,
            vocab: first.vocab,
            classes: specs.len(),
            count: samples.len(),
            seed: first.seed,
            noise_rate: first.noise_rate,
        },
        samples,
    })
}

impl Dataset {
    /// Pattern rules this dataset was generated from.
    pub fn specs(&self) -> Result<Vec<SyntheticGridSpec>> {
        let h = &self.header;
        default_specs(h.classes, h.height, h.width, h.vocab, h.noise_rate, h.seed)
    }

    pub fn split(&self, which: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(i, _)| split_of(self.header.seed, *i) == which)
            .map(|(_, s)| s)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + self.samples.len() * (4 + 2 * h.height * h.width));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [DATASET_VERSION, h.height as u32, h.width as u32, h.vocab as u32, h.classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        out.extend_from_slice(&h.seed.to_le_bytes());
        out.extend_from_slice(&h.noise_rate.to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&(s.class as u32).to_le_bytes());
            for &t in s.grid.tokens() {
                out.extend_from_slice(&(t as u16).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Corrupt("not a dataset file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let (height, width, vocab, classes) = (
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
        );
        let count = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let noise_rate = f64::from_bits(read_u64(&mut r)?);
        let record = 4 + 2 * height * width;
        if r.len() != count.checked_mul(record).ok_or_else(|| Error::Corrupt("sample count overflow".into()))? {
            return Err(Error::Corrupt(format!(
                "{} payload bytes for {count} samples of {record} bytes",
                r.len()
            )));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let class = read_u32(&mut r)? as usize;
            if class >= classes {
                return Err(Error::Corrupt(format!("class {class} of {classes}")));
            }
            let tokens = (0..height * width)
                .map(|_| {
                    let mut b = [0u8; 2];
                    read_exact(&mut r, &mut b).map(|_| u16::from_le_bytes(b) as Token)
                })
                .collect::<Result<Vec<_>>>()?;
            let grid = TokenGrid::new(height, width, vocab, tokens).map_err(|e| Error::Corrupt(e.to_string()))?;
            samples.push(Sample { class, grid });
        }
        Ok(Self {
            header: DatasetHeader {
                height,
                width,
                vocab,
                classes,
                count,
                seed,
                noise_rate,
            },
            samples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Corrupt("unexpected end of file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
