//! Prediction-unit factorizations of a latent volume.
//!
//! A [`UnitScheme`] cuts a `T x H x W x C` volume into an ordered sequence of
//! units. Frame, key-detail and cube schemes are exact partitions of the
//! voxel grid and invert bit-exactly; the multiscale scheme emits a
//! coarse-to-fine pyramid of resized copies whose last level is the volume
//! itself.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::{resize_volume, Dims, LatentVolume};

/// Spatiotemporal extent `(t, h, w)` of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Scale {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Scale {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn voxels(&self) -> usize {
        self.t * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum UnitScheme {
    /// One frame per unit.
    Frame,
    /// Unit `j` holds the strided frames `j, j+k, j+2k, ...`.
    KeyDetail { k: usize },
    /// `kt x kh x kw` cubes in time-major raster order.
    Cube { kt: usize, kh: usize, kw: usize },
    /// Coarse-to-fine pyramid; the last scale equals the full extent.
    Multiscale(Vec<Scale>),
}

impl UnitScheme {
    pub fn name(&self) -> &'static str {
        match self {
            UnitScheme::Frame => "frame",
            UnitScheme::KeyDetail { .. } => "keydetail",
            UnitScheme::Cube { .. } => "cube",
            UnitScheme::Multiscale(_) => "multiscale",
        }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        dims.validate()?;
        match self {
            UnitScheme::Frame => Ok(()),
            UnitScheme::KeyDetail { k } => {
                if *k < 2 {
                    return Err(invalid!("keydetail interval k must be >= 2, got {k}"));
                }
                if !dims.t.is_multiple_of(*k) {
                    return Err(invalid!("axis t: keydetail interval {k} does not divide T={}", dims.t));
                }
                Ok(())
            }
            UnitScheme::Cube { kt, kh, kw } => {
                for (axis, k, n) in [("t", kt, dims.t), ("h", kh, dims.h), ("w", kw, dims.w)] {
                    if *k == 0 {
                        return Err(invalid!("axis {axis}: cube extent must be positive"));
                    }
                    if n % k != 0 {
                        return Err(invalid!("axis {axis}: cube extent {k} does not divide {n}"));
                    }
                }
                Ok(())
            }
            UnitScheme::Multiscale(scales) => {
                let Some(last) = scales.last() else {
                    return Err(invalid!("multiscale needs at least one scale"));
                };
                if *last != Scale::new(dims.t, dims.h, dims.w) {
                    return Err(invalid!(
                        "final scale {:?} must equal the full extent ({}, {}, {})",
                        last,
                        dims.t,
                        dims.h,
                        dims.w
                    ));
                }
                let mut prev = Scale::new(1, 1, 1);
                for (i, s) in scales.iter().enumerate() {
                    if s.t == 0 || s.h == 0 || s.w == 0 {
                        return Err(invalid!("scale {i} has a zero extent"));
                    }
                    if s.t < prev.t || s.h < prev.h || s.w < prev.w {
                        return Err(invalid!("scale {i} {:?} is smaller than its predecessor {:?}", s, prev));
                    }
                    prev = *s;
                }
                Ok(())
            }
        }
    }
}

/// Number of autoregressive steps a scheme induces on `dims`.
pub fn step_count(scheme: &UnitScheme, dims: Dims) -> Result<usize> {
    scheme.validate(dims)?;
    Ok(match scheme {
        UnitScheme::Frame => dims.t,
        UnitScheme::KeyDetail { k } => *k,
        UnitScheme::Cube { kt, kh, kw } => (dims.t / kt) * (dims.h / kh) * (dims.w / kw),
        UnitScheme::Multiscale(scales) => scales.len(),
    })
}

/// What part of the source volume a unit stands for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ownership {
    /// Owned `(t, h, w)` sites, in payload order.
    Voxels(Vec<[u32; 3]>),
    /// Pyramid level `level` with its extent.
    Scale { level: usize, extent: Scale },
}

impl Ownership {
    /// Number of `(t, h, w)` sites in the unit payload.
    pub fn voxel_count(&self) -> usize {
        match self {
            Ownership::Voxels(v) => v.len(),
            Ownership::Scale { extent, .. } => extent.voxels(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub index: usize,
    pub payload: Vec<f32>,
    pub ownership: Ownership,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitSequence {
    pub scheme: UnitScheme,
    pub dims: Dims,
    pub units: Vec<Unit>,
}

fn voxel_block(ts: impl Iterator<Item = usize> + Clone, hs: core::ops::Range<usize>, ws: core::ops::Range<usize>) -> Vec<[u32; 3]> {
    let mut out = Vec::new();
    for t in ts {
        for h in hs.clone() {
            for w in ws.clone() {
                out.push([t as u32, h as u32, w as u32]);
            }
        }
    }
    out
}

/// Ownership of every unit, in canonical order, without touching data.
pub fn unit_plan(scheme: &UnitScheme, dims: Dims) -> Result<Vec<Ownership>> {
    scheme.validate(dims)?;
    let plan = match scheme {
        UnitScheme::Frame => (0..dims.t)
            .map(|t| Ownership::Voxels(voxel_block(t..t + 1, 0..dims.h, 0..dims.w)))
            .collect(),
        UnitScheme::KeyDetail { k } => (0..*k)
            .map(|j| Ownership::Voxels(voxel_block((j..dims.t).step_by(*k), 0..dims.h, 0..dims.w)))
            .collect(),
        UnitScheme::Cube { kt, kh, kw } => {
            let mut plan = Vec::new();
            for ct in 0..dims.t / kt {
                for ch in 0..dims.h / kh {
                    for cw in 0..dims.w / kw {
                        plan.push(Ownership::Voxels(voxel_block(
                            ct * kt..(ct + 1) * kt,
                            ch * kh..(ch + 1) * kh,
                            cw * kw..(cw + 1) * kw,
                        )));
                    }
                }
            }
            plan
        }
        UnitScheme::Multiscale(scales) => scales
            .iter()
            .enumerate()
            .map(|(level, s)| Ownership::Scale { level, extent: *s })
            .collect(),
    };
    Ok(plan)
}

/// Cut `z` into its unit sequence under `scheme`.
pub fn partition(z: &LatentVolume, scheme: &UnitScheme) -> Result<UnitSequence> {
    let dims = z.dims();
    let plan = unit_plan(scheme, dims)?;
    let data = z.data();
    let mut units = Vec::with_capacity(plan.len());
    for (index, ownership) in plan.into_iter().enumerate() {
        let payload = match &ownership {
            Ownership::Voxels(coords) => {
                let mut p = Vec::with_capacity(coords.len() * dims.c);
                for &[t, h, w] in coords {
                    let o = dims.offset(t as usize, h as usize, w as usize);
                    p.extend_from_slice(&data[o..o + dims.c]);
                }
                p
            }
            Ownership::Scale { extent, .. } => resize_volume(z, extent.t, extent.h, extent.w)?.into_data(),
        };
        units.push(Unit { index, payload, ownership });
    }
    Ok(UnitSequence {
        scheme: scheme.clone(),
        dims,
        units,
    })
}

/// Inverse of [`partition`]. For multiscale sequences the finest level is
/// returned as the volume.
pub fn reconstruct(seq: &UnitSequence) -> Result<LatentVolume> {
    let dims = seq.dims;
    let n = step_count(&seq.scheme, dims)?;
    if seq.units.len() != n {
        return Err(Error::Integrity(alloc::format!(
            "sequence has {} units, scheme expects {n}",
            seq.units.len()
        )));
    }
    for (i, u) in seq.units.iter().enumerate() {
        if u.index != i {
            return Err(Error::Integrity(alloc::format!("unit at position {i} carries index {}", u.index)));
        }
        if u.payload.len() != u.ownership.voxel_count() * dims.c {
            return Err(Error::Integrity(alloc::format!(
                "unit {i}: payload length {} does not match {} owned voxels",
                u.payload.len(),
                u.ownership.voxel_count()
            )));
        }
    }
    if let UnitScheme::Multiscale(scales) = &seq.scheme {
        let last = seq.units.last().expect("validated non-empty");
        match last.ownership {
            Ownership::Scale { extent, .. } if extent == scales[scales.len() - 1] => {}
            _ => return Err(Error::Integrity("finest unit does not carry the full-extent scale".into())),
        }
        return LatentVolume::new(dims, last.payload.clone());
    }

    let mut data = vec![0.0f32; dims.len()];
    let mut seen = vec![false; dims.voxels()];
    for u in &seq.units {
        let Ownership::Voxels(coords) = &u.ownership else {
            return Err(Error::Integrity(alloc::format!("unit {} has scale ownership in a voxel scheme", u.index)));
        };
        for (j, &[t, h, w]) in coords.iter().enumerate() {
            let (t, h, w) = (t as usize, h as usize, w as usize);
            if t >= dims.t || h >= dims.h || w >= dims.w {
                return Err(Error::Integrity(alloc::format!("unit {}: voxel ({t},{h},{w}) out of bounds", u.index)));
            }
            let site = (t * dims.h + h) * dims.w + w;
            if seen[site] {
                return Err(Error::Integrity(alloc::format!("voxel ({t},{h},{w}) owned twice (unit {})", u.index)));
            }
            seen[site] = true;
            let o = site * dims.c;
            data[o..o + dims.c].copy_from_slice(&u.payload[j * dims.c..(j + 1) * dims.c]);
        }
    }
    if let Some(site) = seen.iter().position(|s| !s) {
        let w = site % dims.w;
        let h = (site / dims.w) % dims.h;
        let t = site / (dims.w * dims.h);
        return Err(Error::Integrity(alloc::format!("voxel ({t},{h},{w}) is owned by no unit")));
    }
    LatentVolume::new(dims, data)
}

/// Token counts per unit and their prefix sums.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitLayout {
    tokens_per_unit: Vec<usize>,
    offsets: Vec<usize>,
}

impl UnitLayout {
    pub fn from_tokens(tokens_per_unit: Vec<usize>) -> Result<Self> {
        if tokens_per_unit.is_empty() {
            return Err(invalid!("layout needs at least one unit"));
        }
        if let Some(i) = tokens_per_unit.iter().position(|&n| n == 0) {
            return Err(invalid!("unit {i} has zero tokens"));
        }
        let mut offsets = Vec::with_capacity(tokens_per_unit.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &n in &tokens_per_unit {
            acc += n;
            offsets.push(acc);
        }
        Ok(Self { tokens_per_unit, offsets })
    }

    /// Layout a scheme induces on `dims` without materialising the units.
    pub fn for_scheme(scheme: &UnitScheme, dims: Dims, tokens_per_voxel: usize) -> Result<Self> {
        if tokens_per_voxel == 0 {
            return Err(invalid!("tokens_per_voxel must be positive"));
        }
        let plan = unit_plan(scheme, dims)?;
        Self::from_tokens(plan.iter().map(|o| o.voxel_count() * tokens_per_voxel).collect())
    }

    pub fn tokens_per_unit(&self) -> &[usize] {
        &self.tokens_per_unit
    }

    /// Prefix sums; `offsets()[n_units()] == total_tokens()`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn n_units(&self) -> usize {
        self.tokens_per_unit.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.offsets[self.tokens_per_unit.len()]
    }

    pub fn unit_range(&self, unit: usize) -> core::ops::Range<usize> {
        self.offsets[unit]..self.offsets[unit + 1]
    }

    pub fn max_unit_tokens(&self) -> usize {
        self.tokens_per_unit.iter().copied().max().unwrap_or(0)
    }

    /// Unit index of every token.
    pub fn unit_of_token(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_tokens());
        for (u, &n) in self.tokens_per_unit.iter().enumerate() {
            out.extend(core::iter::repeat_n(u, n));
        }
        out
    }

    pub fn reversed(&self) -> Self {
        let mut t = self.tokens_per_unit.clone();
        t.reverse();
        Self::from_tokens(t).expect("reversal keeps a valid layout")
    }
}

/// Token layout of a materialised sequence.
pub fn layout(seq: &UnitSequence, tokens_per_voxel: usize) -> Result<UnitLayout> {
    if tokens_per_voxel == 0 {
        return Err(invalid!("tokens_per_voxel must be positive"));
    }
    UnitLayout::from_tokens(
        seq.units
            .iter()
            .map(|u| u.ownership.voxel_count() * tokens_per_voxel)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gaussian_volume;

    fn ramp(dims: Dims) -> LatentVolume {
        LatentVolume::new(dims, (0..dims.len()).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn step_counts() {
        assert_eq!(step_count(&UnitScheme::Frame, Dims::new(16, 4, 4, 1)).unwrap(), 16);
        let d = Dims::new(8, 6, 4, 2);
        let cube = UnitScheme::Cube { kt: 4, kh: 3, kw: 2 };
        assert_eq!(step_count(&cube, d).unwrap(), 8);
        let ms = UnitScheme::Multiscale(vec![Scale::new(8, 6, 4)]);
        assert_eq!(step_count(&ms, d).unwrap(), 1);
        assert_eq!(step_count(&UnitScheme::KeyDetail { k: 4 }, d).unwrap(), 4);
    }

    #[test]
    fn divisibility_errors_name_axis() {
        let d = Dims::new(4, 6, 4, 1);
        let err = step_count(&UnitScheme::Cube { kt: 2, kh: 4, kw: 2 }, d).unwrap_err();
        assert!(alloc::format!("{err}").contains("axis h"), "{err}");
        let err = step_count(&UnitScheme::KeyDetail { k: 3 }, d).unwrap_err();
        assert!(alloc::format!("{err}").contains("axis t"), "{err}");
        assert!(step_count(&UnitScheme::KeyDetail { k: 1 }, d).is_err());
    }

    #[test]
    fn multiscale_validation() {
        let d = Dims::new(2, 2, 2, 1);
        assert!(UnitScheme::Multiscale(vec![]).validate(d).is_err());
        assert!(UnitScheme::Multiscale(vec![Scale::new(1, 1, 1)]).validate(d).is_err());
        assert!(UnitScheme::Multiscale(vec![Scale::new(2, 1, 2), Scale::new(1, 2, 2), Scale::new(2, 2, 2)])
            .validate(d)
            .is_err());
        assert!(UnitScheme::Multiscale(vec![Scale::new(1, 1, 1), Scale::new(2, 2, 2)])
            .validate(d)
            .is_ok());
    }

    #[test]
    fn cube_of_frame_slabs() {
        let z = ramp(Dims::new(2, 2, 2, 1));
        let seq = partition(&z, &UnitScheme::Cube { kt: 1, kh: 2, kw: 2 }).unwrap();
        assert_eq!(seq.units.len(), 2);
        assert_eq!(seq.units[0].payload, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(seq.units[1].payload, vec![4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn keydetail_strided_frames() {
        let (a, b, c, d) = (10.0, 20.0, 30.0, 40.0);
        let z = LatentVolume::new(Dims::new(4, 1, 1, 1), vec![a, b, c, d]).unwrap();
        let seq = partition(&z, &UnitScheme::KeyDetail { k: 2 }).unwrap();
        assert_eq!(seq.units[0].payload, vec![a, c]);
        assert_eq!(seq.units[1].payload, vec![b, d]);
    }

    #[test]
    fn cube_order_time_major() {
        let dims = Dims::new(2, 2, 4, 1);
        let seq = partition(&ramp(dims), &UnitScheme::Cube { kt: 1, kh: 2, kw: 2 }).unwrap();
        // cubes: (t0,w0-1) (t0,w2-3) (t1,w0-1) (t1,w2-3)
        assert_eq!(seq.units[0].payload, vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(seq.units[1].payload, vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(seq.units[2].payload, vec![8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn multiscale_constant_payloads() {
        let z = LatentVolume::filled(Dims::new(4, 4, 4, 2), -1.25).unwrap();
        let scheme = UnitScheme::Multiscale(vec![Scale::new(1, 1, 1), Scale::new(2, 2, 2), Scale::new(4, 4, 4)]);
        let seq = partition(&z, &scheme).unwrap();
        assert_eq!(seq.units[0].payload.len(), 2);
        assert_eq!(seq.units[1].payload.len(), 16);
        for u in &seq.units {
            assert!(u.payload.iter().all(|&v| v == -1.25));
        }
        assert_eq!(reconstruct(&seq).unwrap(), z);
    }

    #[test]
    fn multiscale_reconstruct_returns_finest() {
        let z = gaussian_volume(Dims::new(2, 4, 4, 1), &mut Rng::new(3)).unwrap();
        let scheme = UnitScheme::Multiscale(vec![Scale::new(1, 2, 2), Scale::new(2, 4, 4)]);
        let seq = partition(&z, &scheme).unwrap();
        assert_eq!(reconstruct(&seq).unwrap().data(), &seq.units[1].payload[..]);
    }

    #[test]
    fn round_trip_all_voxel_schemes() {
        let dims = Dims::new(4, 4, 6, 3);
        let z = gaussian_volume(dims, &mut Rng::new(8)).unwrap();
        for scheme in [
            UnitScheme::Frame,
            UnitScheme::KeyDetail { k: 2 },
            UnitScheme::KeyDetail { k: 4 },
            UnitScheme::Cube { kt: 2, kh: 2, kw: 3 },
            UnitScheme::Cube { kt: 4, kh: 4, kw: 6 },
        ] {
            let seq = partition(&z, &scheme).unwrap();
            assert_eq!(reconstruct(&seq).unwrap(), z, "{scheme:?}");
        }
    }

    #[test]
    fn tampered_ownership_is_integrity_error() {
        let z = gaussian_volume(Dims::new(2, 2, 2, 1), &mut Rng::new(1)).unwrap();
        let mut seq = partition(&z, &UnitScheme::Frame).unwrap();
        if let Ownership::Voxels(v) = &mut seq.units[1].ownership {
            v.pop();
        }
        seq.units[1].payload.pop();
        assert!(matches!(reconstruct(&seq), Err(Error::Integrity(_))));

        let mut seq = partition(&z, &UnitScheme::Frame).unwrap();
        if let Ownership::Voxels(v) = &mut seq.units[1].ownership {
            v[0] = [0, 0, 0];
        }
        assert!(matches!(reconstruct(&seq), Err(Error::Integrity(_))));
    }

    #[test]
    fn layouts() {
        let z = LatentVolume::filled(Dims::new(3, 2, 2, 5), 0.0).unwrap();
        let l = layout(&partition(&z, &UnitScheme::Frame).unwrap(), 1).unwrap();
        assert_eq!(l.tokens_per_unit(), &[4, 4, 4]);
        assert_eq!(l.total_tokens(), 12);
        assert_eq!(l.offsets(), &[0, 4, 8, 12]);

        let d = Dims::new(2, 2, 2, 3);
        let l = UnitLayout::for_scheme(&UnitScheme::Cube { kt: 1, kh: 2, kw: 2 }, d, 1).unwrap();
        assert_eq!(l.tokens_per_unit(), &[4, 4]);
        let ms = UnitScheme::Multiscale(vec![Scale::new(1, 1, 1), Scale::new(2, 2, 2)]);
        let l = UnitLayout::for_scheme(&ms, d, 1).unwrap();
        assert_eq!(l.tokens_per_unit(), &[1, 8]);
        assert!(UnitLayout::from_tokens(vec![1, 0]).is_err());
    }
}
