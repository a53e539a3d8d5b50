//! Inputs `x = (x¹, …, xⁿ)` with every block on the unit sphere in `ℝ^d`.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Allowed deviation of a block norm from 1.
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InputError {
    #[error("input has {got} values, expected n·d = {expected}")]
    Length { expected: usize, got: usize },
    #[error("block {block} has norm {norm}, not 1")]
    NotUnit { block: usize, norm: f64 },
    #[error("input has shape n={got_n}, d={got_d}; expected n={n}, d={d}")]
    Shape {
        n: usize,
        d: usize,
        got_n: usize,
        got_d: usize,
    },
    #[error("non-finite input value")]
    NotFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SphereInput {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl SphereInput {
    /// Wraps `n` consecutive blocks of length `d`, checking each has unit norm.
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self, InputError> {
        if data.len() != n * d || n == 0 || d == 0 {
            return Err(InputError::Length {
                expected: n * d,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(InputError::NotFinite);
        }
        let input = Self { n, d, data };
        for i in 0..n {
            let norm = input.block(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(InputError::NotUnit { block: i, norm });
            }
        }
        Ok(input)
    }

    /// Normalizes every block. Zero blocks are left as they are and rejected.
    pub fn normalized(n: usize, d: usize, mut data: Vec<f64>) -> Result<Self, InputError> {
        if data.len() == n * d && d > 0 {
            for block in data.chunks_mut(d) {
                let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    block.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        Self::new(n, d, data)
    }

    /// Uniform sample: a Gaussian vector per block, normalized.
    pub fn sample<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Self {
        loop {
            let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
            if let Ok(x) = Self::normalized(n, d, data) {
                return x;
            }
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `⟨xⁱ, yⁱ⟩` for block `i`.
    pub fn block_dot(&self, other: &Self, i: usize) -> f64 {
        self.block(i)
            .iter()
            .zip(other.block(i))
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn check_shape(&self, n: usize, d: usize) -> Result<(), InputError> {
        if self.n != n || self.d != d {
            return Err(InputError::Shape {
                n,
                d,
                got_n: self.n,
                got_d: self.d,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn rejects_non_unit_blocks() {
        let err = SphereInput::new(2, 2, vec![1.0, 0.0, 0.5, 0.5]).unwrap_err();
        assert!(matches!(err, InputError::NotUnit { block: 1, .. }));
        assert!(SphereInput::new(1, 2, vec![1.0]).is_err());
        assert!(SphereInput::normalized(1, 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn sampled_blocks_average_to_zero() {
        let mut g = rng::stream(1, 0);
        let mut mean = [0.0; 3];
        let m = 20_000;
        for _ in 0..m {
            let x = SphereInput::sample(1, 3, &mut g);
            for (acc, v) in mean.iter_mut().zip(x.block(0)) {
                *acc += v / m as f64;
            }
        }
        for v in mean {
            assert!(v.abs() < 0.02, "{v}");
        }
    }

    proptest! {
        #[test]
        fn samples_have_unit_blocks(seed in any::<u64>(), n in 1usize..5, d in 1usize..8) {
            let x = SphereInput::sample(n, d, &mut rng::stream(seed, 0));
            for i in 0..n {
                prop_assert!((x.block_dot(&x, i) - 1.0).abs() < 1e-12);
            }
        }
    }
}
