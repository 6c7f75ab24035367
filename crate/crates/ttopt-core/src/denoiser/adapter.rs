//! Low-rank adapter factors for the cross-attention projections.
//!
//! Each (block, projection) pair holds factors `a (d, r)` and `b (r, d)`;
//! the contribution added to a projection output is `x·a·b / r`. Factor `a`
//! is Gaussian-initialized and `b` starts at zero, so a fresh set is an
//! exact no-op and memory misses reproduce the unadapted model bit for bit.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use super::{DenoiserConfig, DenoiserError};

/// Gaussian std for the `a` factors.
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Cross-attention projections carrying adapters, in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjKind {
    Query = 0,
    Key = 1,
    Value = 2,
    Output = 3,
}

pub const PROJ_KINDS: [ProjKind; 4] = [ProjKind::Query, ProjKind::Key, ProjKind::Value, ProjKind::Output];

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    /// `(dim, rank)`
    pub a: Array2<f64>,
    /// `(rank, dim)`
    pub b: Array2<f64>,
}

/// Adapter factors for every (block, projection) slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    /// `blocks * 4` pairs, block-major, projections in Q, K, V, O order.
    pub pairs: Vec<AdapterPair>,
}

impl AdapterSet {
    /// Fresh functional no-op: `a ~ N(0, 0.02)`, `b = 0`.
    pub fn fresh(cfg: &DenoiserConfig, rank: usize, seed: u64) -> Self {
        let d = cfg.dim;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, ADAPTER_INIT_STD).unwrap();
        let pairs = (0..cfg.blocks * PROJ_KINDS.len())
            .map(|_| AdapterPair {
                a: Array2::from_shape_fn((d, rank), |_| dist.sample(&mut rng)),
                b: Array2::zeros((rank, d)),
            })
            .collect();
        AdapterSet { rank, pairs }
    }

    /// All-zero mirror, used as a gradient container.
    pub fn zeros_like(&self) -> Self {
        AdapterSet {
            rank: self.rank,
            pairs: self
                .pairs
                .iter()
                .map(|p| AdapterPair { a: Array2::zeros(p.a.dim()), b: Array2::zeros(p.b.dim()) })
                .collect(),
        }
    }

    pub fn pair(&self, block: usize, proj: ProjKind) -> &AdapterPair {
        &self.pairs[block * PROJ_KINDS.len() + proj as usize]
    }

    pub fn pair_mut(&mut self, block: usize, proj: ProjKind) -> &mut AdapterPair {
        &mut self.pairs[block * PROJ_KINDS.len() + proj as usize]
    }

    /// Contribution scale applied to `a·b`.
    pub fn scale(&self) -> f64 {
        1.0 / self.rank as f64
    }

    pub fn check_shapes(&self, cfg: &DenoiserConfig) -> Result<(), DenoiserError> {
        if self.pairs.len() != cfg.blocks * PROJ_KINDS.len() {
            return Err(DenoiserError::ShapeMismatch(format!(
                "adapter set has {} pairs, config wants {}",
                self.pairs.len(),
                cfg.blocks * PROJ_KINDS.len()
            )));
        }
        for p in &self.pairs {
            if p.a.dim() != (cfg.dim, self.rank) || p.b.dim() != (self.rank, cfg.dim) {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "adapter factors {:?}/{:?} vs dim {} rank {}",
                    p.a.dim(),
                    p.b.dim(),
                    cfg.dim,
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// Visit factors in serialization order: block-major, Q/K/V/O, `a` then
    /// `b`.
    pub fn for_each_factor(&self, f: &mut dyn FnMut(&[f64])) {
        for p in &self.pairs {
            f(p.a.as_slice().unwrap());
            f(p.b.as_slice().unwrap());
        }
    }

    pub fn for_each_factor_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for p in &mut self.pairs {
            f(p.a.as_slice_mut().unwrap());
            f(p.b.as_slice_mut().unwrap());
        }
    }

    /// Factor slices in serialization order.
    pub fn factor_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.pairs.len() * 2);
        for p in &self.pairs {
            out.push(p.a.as_slice().unwrap());
            out.push(p.b.as_slice().unwrap());
        }
        out
    }

    /// Total scalar count across all factors.
    pub fn len(&self) -> usize {
        let mut n = 0;
        self.for_each_factor(&mut |s| n += s.len());
        n
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Round every factor through f32, the storage precision of the memory
    /// and blob formats. Values already representable pass through exactly.
    pub fn quantize_f32(&mut self) {
        self.for_each_factor_mut(&mut |s| {
            for v in s {
                *v = *v as f32 as f64;
            }
        });
    }

    /// Element-wise arithmetic mean of several sets, in the given order.
    /// Elements equal across all sets pass through untouched, so fusing
    /// copies of one entry reproduces it exactly for any k.
    pub fn average(sets: &[&AdapterSet]) -> AdapterSet {
        assert!(!sets.is_empty());
        let mut out = sets[0].clone();
        if sets.len() == 1 {
            return out;
        }
        let k = sets.len() as f64;
        let mean_into = |pi: usize, pick: fn(&AdapterPair) -> &Array2<f64>, dst: &mut Array2<f64>| {
            for (idx, v) in dst.iter_mut().enumerate() {
                let first = pick(&sets[0].pairs[pi]).as_slice().unwrap()[idx];
                let mut acc = first;
                let mut all_equal = true;
                for s in &sets[1..] {
                    let x = pick(&s.pairs[pi]).as_slice().unwrap()[idx];
                    all_equal &= x == first;
                    acc += x;
                }
                *v = if all_equal { first } else { acc / k };
            }
        };
        for pi in 0..out.pairs.len() {
            let mut a = out.pairs[pi].a.clone();
            mean_into(pi, |p| &p.a, &mut a);
            let mut b = out.pairs[pi].b.clone();
            mean_into(pi, |p| &p.b, &mut b);
            out.pairs[pi].a = a;
            out.pairs[pi].b = b;
        }
        out
    }

    /// Bit-level hash across factors.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        self.for_each_factor(&mut |s| {
            for v in s {
                h ^= crate::tokenizer::fnv1a64(&v.to_le_bytes());
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        });
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_second_factor_is_zero() {
        let cfg = DenoiserConfig::grad_check();
        let set = AdapterSet::fresh(&cfg, 2, 3);
        for p in &set.pairs {
            assert!(p.b.iter().all(|&v| v == 0.0));
            assert!(p.a.iter().any(|&v| v != 0.0));
        }
        assert_eq!(set.pairs.len(), cfg.blocks * 4);
        set.check_shapes(&cfg).unwrap();
    }

    #[test]
    fn average_of_identical_sets_is_identity() {
        let cfg = DenoiserConfig::grad_check();
        let set = AdapterSet::fresh(&cfg, 2, 3);
        let fused = AdapterSet::average(&[&set, &set, &set]);
        for (a, b) in fused.pairs.iter().zip(&set.pairs) {
            for (x, y) in a.a.iter().zip(b.a.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn average_of_two_sets_is_midpoint() {
        let cfg = DenoiserConfig::grad_check();
        let x = AdapterSet::fresh(&cfg, 2, 1);
        let mut y = AdapterSet::fresh(&cfg, 2, 2);
        y.pairs[0].a[(0, 0)] = 3.0;
        let fused = AdapterSet::average(&[&x, &y]);
        let expect = (x.pairs[0].a[(0, 0)] + 3.0) / 2.0;
        assert_eq!(fused.pairs[0].a[(0, 0)].to_bits(), expect.to_bits());
    }
}
