//! Dense 4-D latent volumes laid out row-major in `(t, h, w, c)` order.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::rng::Rng;

/// Shape of a latent volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims {
    pub const fn new(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self { t, h, w, c }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(invalid!("dimensions must be positive, got {:?}", self));
        }
        Ok(())
    }

    /// Number of `(t, h, w)` sites.
    pub fn voxels(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.voxels() * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of the first channel of voxel `(t, h, w)`.
    #[inline]
    pub fn offset(&self, t: usize, h: usize, w: usize) -> usize {
        ((t * self.h + h) * self.w + w) * self.c
    }
}

/// A continuous latent `z` of shape `T x H x W x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVolume {
    dims: Dims,
    data: Vec<f32>,
}

impl LatentVolume {
    /// Checks length and finiteness.
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(invalid!(
                "data length {} does not match {:?} ({} values)",
                data.len(),
                dims,
                dims.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("non-finite value {} at index {}", data[i], i));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        dims.validate()?;
        Self::new(dims, alloc::vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, t: usize, h: usize, w: usize, c: usize) -> f32 {
        self.data[self.dims.offset(t, h, w) + c]
    }

    /// Sum of squares accumulated in 64 bits.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| {
                let d = v as f64 - m;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64
    }
}

/// I.i.d. standard-normal volume.
pub fn gaussian_volume(dims: Dims, rng: &mut Rng) -> Result<LatentVolume> {
    dims.validate()?;
    let data = (0..dims.len()).map(|_| rng.normal() as f32).collect();
    LatentVolume::new(dims, data)
}

/// Source coordinate and blend weight along one axis (align-corners-false).
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let x = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (x as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { x - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Trilinear resize over `(t, h, w)`, channels untouched.
pub fn resize_volume(z: &LatentVolume, t: usize, h: usize, w: usize) -> Result<LatentVolume> {
    let src = z.dims;
    let out_dims = Dims::new(t, h, w, src.c);
    out_dims.validate()?;
    if (t, h, w) == (src.t, src.h, src.w) {
        return Ok(z.clone());
    }
    let tt = axis_taps(src.t, t);
    let th = axis_taps(src.h, h);
    let tw = axis_taps(src.w, w);
    let mut data = Vec::with_capacity(out_dims.len());
    for at in &tt {
        for ah in &th {
            for aw in &tw {
                for ch in 0..src.c {
                    let mut acc = 0.0f64;
                    for (ti, wt) in [(at.lo, 1.0 - at.frac), (at.hi, at.frac)] {
                        for (hi, wh) in [(ah.lo, 1.0 - ah.frac), (ah.hi, ah.frac)] {
                            for (wi, ww) in [(aw.lo, 1.0 - aw.frac), (aw.hi, aw.frac)] {
                                acc += wt * wh * ww * z.get(ti, hi, wi, ch) as f64;
                            }
                        }
                    }
                    data.push(acc as f32);
                }
            }
        }
    }
    LatentVolume::new(out_dims, data)
}
