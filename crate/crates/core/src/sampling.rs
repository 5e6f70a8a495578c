//! Coordinate samplers producing lattice-structured batches.
//!
//! Batches keep their block structure (origin, stride, dims) so windowed
//! LNCC and finite-difference Jacobians can treat each block as a small
//! contiguous lattice.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{real, Real};
use crate::volume::GridDomain;

/// One lattice block of sampled coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub origin: [usize; 3],
    pub stride: [usize; 3],
    pub dims: [usize; 3],
}

impl Block {
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A structured set of coordinate blocks preserving lattice topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleBatch {
    pub blocks: Vec<Block>,
}

impl SampleBatch {
    /// Total coordinate count N.
    pub fn len(&self) -> usize {
        self.blocks.iter().map(Block::len).sum()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Single full-grid block at stride 1.
    pub fn full_grid(domain: GridDomain) -> Self {
        SampleBatch {
            blocks: vec![Block {
                origin: [0; 3],
                stride: [1; 3],
                dims: domain.dims,
            }],
        }
    }
}

/// Sampler selection and knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerConfig {
    /// Strided lattice covering the whole grid coarsely.
    Downsize {
        #[serde(default = "default_stride")]
        stride: usize,
        /// Redraw the lattice offset each iteration; off reproduces the
        /// fixed zero-offset lattice.
        #[serde(default = "default_true")]
        randomize_offset: bool,
    },
    /// Several randomly placed full-resolution cubic blocks.
    Minipatch {
        #[serde(default = "default_patch_count")]
        count: usize,
        #[serde(default = "default_patch_size")]
        patch_size: usize,
    },
}

fn default_stride() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_patch_count() -> usize {
    5
}
fn default_patch_size() -> usize {
    32
}

impl SamplerConfig {
    pub fn downsize_default() -> Self {
        SamplerConfig::Downsize {
            stride: 3,
            randomize_offset: true,
        }
    }

    pub fn minipatch_default() -> Self {
        SamplerConfig::Minipatch {
            count: 5,
            patch_size: 32,
        }
    }

    pub fn draw(&self, domain: GridDomain, rng: &mut impl Rng) -> Result<SampleBatch> {
        match *self {
            SamplerConfig::Downsize {
                stride,
                randomize_offset,
            } => downsize_batch(domain, stride, randomize_offset, rng),
            SamplerConfig::Minipatch { count, patch_size } => {
                minipatch_batch(domain, count, patch_size, rng)
            }
        }
    }
}

/// One strided block; origin drawn uniformly from `[0, stride)^3` when
/// randomized, else zero.
pub fn downsize_batch(
    domain: GridDomain,
    stride: usize,
    randomize_offset: bool,
    rng: &mut impl Rng,
) -> Result<SampleBatch> {
    if stride == 0 {
        return Err(Error::config("downsize stride must be >= 1"));
    }
    if domain.dims.iter().any(|&d| stride >= d) {
        return Err(Error::config(format!(
            "downsize stride {stride} does not fit domain {:?}",
            domain.dims
        )));
    }
    let origin = if randomize_offset {
        [
            rng.gen_range(0..stride),
            rng.gen_range(0..stride),
            rng.gen_range(0..stride),
        ]
    } else {
        [0; 3]
    };
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = (domain.dims[a] - origin[a] - 1) / stride + 1;
    }
    Ok(SampleBatch {
        blocks: vec![Block {
            origin,
            stride: [stride; 3],
            dims,
        }],
    })
}

/// `count` stride-1 cubic blocks with origins uniform over valid
/// positions; blocks may overlap.
pub fn minipatch_batch(
    domain: GridDomain,
    count: usize,
    patch_size: usize,
    rng: &mut impl Rng,
) -> Result<SampleBatch> {
    if count == 0 {
        return Err(Error::config("minipatch count must be >= 1"));
    }
    if patch_size < 2 {
        return Err(Error::config("patch size must be >= 2"));
    }
    if domain.dims.iter().any(|&d| patch_size > d) {
        return Err(Error::config(format!(
            "patch size {patch_size} exceeds domain {:?}",
            domain.dims
        )));
    }
    let blocks = (0..count)
        .map(|_| {
            let mut origin = [0usize; 3];
            for a in 0..3 {
                origin[a] = rng.gen_range(0..=domain.dims[a] - patch_size);
            }
            Block {
                origin,
                stride: [1; 3],
                dims: [patch_size; 3],
            }
        })
        .collect();
    Ok(SampleBatch { blocks })
}

/// Enumerates every block's lattice in (d, h, w)-major order, block-major.
pub fn batch_coordinates<F: Real>(batch: &SampleBatch) -> Vec<[F; 3]> {
    let mut out = Vec::with_capacity(batch.len());
    for b in &batch.blocks {
        for d in 0..b.dims[0] {
            for h in 0..b.dims[1] {
                for w in 0..b.dims[2] {
                    out.push([
                        real::<F>((b.origin[0] + d * b.stride[0]) as f64),
                        real::<F>((b.origin[1] + h * b.stride[1]) as f64),
                        real::<F>((b.origin[2] + w * b.stride[2]) as f64),
                    ]);
                }
            }
        }
    }
    out
}
