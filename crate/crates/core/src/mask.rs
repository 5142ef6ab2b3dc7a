//! Token-level block-causal attention masks.
//!
//! Causality is defined between units: every token sees all tokens of its
//! own unit, and sees other units according to the [`MaskDirection`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::scheme::UnitLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskDirection {
    /// Keys from the same or earlier units.
    Forward,
    /// Keys from the same or later units.
    Backward,
    /// Every key.
    Full,
}

impl MaskDirection {
    #[inline]
    pub fn allows(self, query_unit: usize, key_unit: usize) -> bool {
        match self {
            MaskDirection::Forward => key_unit <= query_unit,
            MaskDirection::Backward => key_unit >= query_unit,
            MaskDirection::Full => true,
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            MaskDirection::Forward => MaskDirection::Backward,
            MaskDirection::Backward => MaskDirection::Forward,
            MaskDirection::Full => MaskDirection::Full,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskDirection::Forward => "forward",
            MaskDirection::Backward => "backward",
            MaskDirection::Full => "full",
        }
    }
}

/// Dense boolean mask; row = query token, column = key token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n_tokens: usize,
    n_units: usize,
    allowed: Vec<bool>,
    unit_of_token: Vec<usize>,
    direction: Option<MaskDirection>,
}

impl AttentionMask {
    /// Wraps an explicit matrix. The result carries no direction tag.
    pub fn from_parts(allowed: Vec<bool>, unit_of_token: Vec<usize>) -> Result<Self> {
        let n = unit_of_token.len();
        if n == 0 {
            return Err(invalid!("mask needs at least one token"));
        }
        if allowed.len() != n * n {
            return Err(invalid!("mask matrix has {} entries, expected {}", allowed.len(), n * n));
        }
        let n_units = unit_of_token.iter().copied().max().unwrap_or(0) + 1;
        Ok(Self {
            n_tokens: n,
            n_units,
            allowed,
            unit_of_token,
            direction: None,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn direction(&self) -> Option<MaskDirection> {
        self.direction
    }

    pub fn unit_of_token(&self) -> &[usize] {
        &self.unit_of_token
    }

    #[inline]
    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.n_tokens + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.n_tokens..(query + 1) * self.n_tokens]
    }

    pub fn matrix(&self) -> &[bool] {
        &self.allowed
    }

    /// Allowed keys of `query`, ascending.
    pub fn keys(&self, query: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(query).iter().enumerate().filter_map(|(k, &a)| a.then_some(k))
    }

    pub fn rows_nonempty(&self) -> bool {
        (0..self.n_tokens).all(|q| self.row(q).iter().any(|&a| a))
    }

    /// Unit-level view: entry `(u, v)` says whether queries of unit `u` see
    /// keys of unit `v`. Fails if some block is not uniform.
    pub fn unit_blocks(&self) -> Result<Vec<bool>> {
        let n = self.n_units;
        let mut blocks: Vec<Option<bool>> = vec![None; n * n];
        for q in 0..self.n_tokens {
            for k in 0..self.n_tokens {
                let slot = &mut blocks[self.unit_of_token[q] * n + self.unit_of_token[k]];
                let a = self.allowed(q, k);
                match slot {
                    None => *slot = Some(a),
                    Some(prev) if *prev != a => {
                        return Err(Error::Integrity(alloc::format!(
                            "block ({}, {}) is not uniform",
                            self.unit_of_token[q],
                            self.unit_of_token[k]
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(blocks.into_iter().map(|b| b.unwrap_or(false)).collect())
    }
}

/// Block mask realising `dir` over the units of `layout`.
pub fn build_mask(layout: &UnitLayout, dir: MaskDirection) -> Result<AttentionMask> {
    let n = layout.total_tokens();
    if n == 0 {
        return Err(invalid!("layout has no tokens"));
    }
    let unit_of_token = layout.unit_of_token();
    let mut allowed = Vec::with_capacity(n * n);
    for &uq in &unit_of_token {
        allowed.extend(unit_of_token.iter().map(|&uk| dir.allows(uq, uk)));
    }
    Ok(AttentionMask {
        n_tokens: n,
        n_units: layout.n_units(),
        allowed,
        unit_of_token,
        direction: Some(dir),
    })
}

/// Outcome of an exhaustive direction check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CausalityReport {
    Clean,
    /// First `(query, key)` pair, in row-major order, whose entry disagrees
    /// with the direction. `allowed` is the entry found in the mask.
    Violation {
        query: usize,
        key: usize,
        query_unit: usize,
        key_unit: usize,
        allowed: bool,
    },
}

impl CausalityReport {
    pub fn is_clean(&self) -> bool {
        matches!(self, CausalityReport::Clean)
    }
}

/// Checks `allowed(q, k) == dir.allows(unit(q), unit(k))` for every pair.
pub fn verify_causality(mask: &AttentionMask, dir: MaskDirection) -> CausalityReport {
    let units = &mask.unit_of_token;
    for q in 0..mask.n_tokens {
        let row = mask.row(q);
        for (k, &a) in row.iter().enumerate() {
            if a != dir.allows(units[q], units[k]) {
                return CausalityReport::Violation {
                    query: q,
                    key: k,
                    query_unit: units[q],
                    key_unit: units[k],
                    allowed: a,
                };
            }
        }
    }
    CausalityReport::Clean
}

/// Reverses the unit order: unit `i` becomes `N-1-i` and tokens are
/// reordered so the relabelled units stay in ascending token order
/// (order inside a unit is kept). Entries move with their tokens.
pub fn reverse_mask(mask: &AttentionMask) -> AttentionMask {
    let n = mask.n_tokens;
    let last = mask.n_units - 1;
    // perm[new] = old
    let mut perm = Vec::with_capacity(n);
    for u in (0..mask.n_units).rev() {
        perm.extend((0..n).filter(|&t| mask.unit_of_token[t] == u));
    }
    let unit_of_token = perm.iter().map(|&old| last - mask.unit_of_token[old]).collect();
    let mut allowed = Vec::with_capacity(n * n);
    for &oq in &perm {
        let row = mask.row(oq);
        allowed.extend(perm.iter().map(|&ok| row[ok]));
    }
    AttentionMask {
        n_tokens: n,
        n_units: mask.n_units,
        allowed,
        unit_of_token,
        direction: mask.direction.map(MaskDirection::reversed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(t: &[usize]) -> UnitLayout {
        UnitLayout::from_tokens(t.to_vec()).unwrap()
    }

    #[test]
    fn single_token_units_forward_is_lower_triangular() {
        let m = build_mask(&layout(&[1, 1, 1]), MaskDirection::Forward).unwrap();
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(m.allowed(q, k), k <= q);
            }
        }
    }

    #[test]
    fn backward_two_by_two_enumerated() {
        let m = build_mask(&layout(&[2, 2]), MaskDirection::Backward).unwrap();
        #[rustfmt::skip]
        let expected = [
            true, true, true, true,
            true, true, true, true,
            false, false, true, true,
            false, false, true, true,
        ];
        assert_eq!(m.matrix(), &expected);
    }

    #[test]
    fn full_is_all_true() {
        let m = build_mask(&layout(&[3, 1, 2]), MaskDirection::Full).unwrap();
        assert!(m.matrix().iter().all(|&a| a));
    }

    #[test]
    fn verify_clean_and_violations() {
        let l = layout(&[2, 3, 1]);
        let fwd = build_mask(&l, MaskDirection::Forward).unwrap();
        assert!(verify_causality(&fwd, MaskDirection::Forward).is_clean());

        let mut allowed = fwd.matrix().to_vec();
        allowed[2] = true; // query 0 (unit 0) -> key 2 (unit 1)
        let hand = AttentionMask::from_parts(allowed, fwd.unit_of_token().to_vec()).unwrap();
        assert_eq!(
            verify_causality(&hand, MaskDirection::Forward),
            CausalityReport::Violation { query: 0, key: 2, query_unit: 0, key_unit: 1, allowed: true }
        );

        let full = build_mask(&l, MaskDirection::Full).unwrap();
        assert!(!verify_causality(&full, MaskDirection::Forward).is_clean());
    }

    #[test]
    fn reverse_of_forward_is_transpose_for_single_tokens() {
        let m = build_mask(&layout(&[1, 1, 1]), MaskDirection::Forward).unwrap();
        let r = reverse_mask(&m);
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(r.allowed(q, k), m.allowed(k, q));
            }
        }
    }

    #[test]
    fn reverse_forward_equals_backward_equal_units() {
        let l = layout(&[2, 2]);
        let f = build_mask(&l, MaskDirection::Forward).unwrap();
        let b = build_mask(&l, MaskDirection::Backward).unwrap();
        assert_eq!(reverse_mask(&f), b);
    }

    #[test]
    fn reverse_unequal_units_block_level() {
        let l = layout(&[1, 3, 2]);
        let f = build_mask(&l, MaskDirection::Forward).unwrap();
        let r = reverse_mask(&f);
        let b = build_mask(&l.reversed(), MaskDirection::Backward).unwrap();
        assert_eq!(r, b);
        assert_eq!(r.unit_blocks().unwrap(), build_mask(&l, MaskDirection::Backward).unwrap().unit_blocks().unwrap());
    }

    #[test]
    fn reverse_is_involution() {
        let f = build_mask(&layout(&[1, 4, 2, 2]), MaskDirection::Forward).unwrap();
        assert_eq!(reverse_mask(&reverse_mask(&f)), f);
    }

    #[test]
    fn rows_nonempty() {
        for dir in [MaskDirection::Forward, MaskDirection::Backward, MaskDirection::Full] {
            assert!(build_mask(&layout(&[2, 1, 5]), dir).unwrap().rows_nonempty());
        }
    }
}
