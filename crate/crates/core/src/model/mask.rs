//! The decoder's modified causal mask: temporal causality with spatial
//! bidirectionality.

use alloc::vec;
use alloc::vec::Vec;

/// Boolean attention mask over a flattened (time-major) token sequence;
/// `true` means the query may attend to the key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    #[inline]
    pub fn queries(&self) -> usize {
        self.queries
    }

    #[inline]
    pub fn keys(&self) -> usize {
        self.keys
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.keys + key]
    }

    #[inline]
    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.keys..(query + 1) * self.keys]
    }
}

/// Builds the decoder self-attention mask for `units` units over `l_plus`
/// time steps (token index = t·U + u). A query at time t may attend to every
/// token at times ≤ t — all units of its own time slice included — and to
/// nothing later.
pub fn build_decoder_mask(units: usize, l_plus: usize) -> AttentionMask {
    let s = units * l_plus;
    let mut allowed = vec![false; s * s];
    for q in 0..s {
        let tq = q / units;
        for k in 0..s {
            let tk = k / units;
            allowed[q * s + k] = tk <= tq;
        }
    }
    AttentionMask { queries: s, keys: s, allowed }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_unit_reduces_to_lower_triangular() {
        let m = build_decoder_mask(1, 3);
        for q in 0..3 {
            for k in 0..3 {
                assert_eq!(m.allows(q, k), k <= q);
            }
        }
    }

    #[test]
    fn two_units_two_steps_enumerated() {
        // Tokens: (t0,u0), (t0,u1), (t1,u0), (t1,u1).
        let m = build_decoder_mask(2, 2);
        for q in 0..2 {
            assert_eq!(m.row(q), &[true, true, false, false]);
        }
        for q in 2..4 {
            assert_eq!(m.row(q), &[true, true, true, true]);
        }
    }

    #[test]
    fn single_step_is_all_true() {
        let m = build_decoder_mask(4, 1);
        assert!((0..4).all(|q| (0..4).all(|k| m.allows(q, k))));
    }

    #[test]
    fn own_time_slice_always_allowed() {
        let units = 3;
        let m = build_decoder_mask(units, 4);
        for q in 0..m.queries() {
            let tq = q / units;
            for u in 0..units {
                assert!(m.allows(q, tq * units + u));
            }
            assert!(m.row(q).iter().filter(|&&a| a).count() >= units);
        }
    }
}
