//! Halton points with a random (Cranley–Patterson) shift.

use ens_tensor::Rng;

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while index > 0 {
        out += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    out
}

/// Shifted Halton sequence over `[0, 1)^dims`.
#[derive(Clone, Debug)]
pub struct Halton {
    shift: Vec<f64>,
    next: u64,
}

impl Halton {
    pub fn new(dims: usize, rng: &mut Rng) -> Self {
        assert!(dims <= PRIMES.len(), "at most {} dimensions", PRIMES.len());
        Halton {
            shift: (0..dims).map(|_| rng.uniform()).collect(),
            // index 0 maps to the shift itself; start past it
            next: 1,
        }
    }

    pub fn sample(&mut self, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let i = self.next;
                self.next += 1;
                self.shift
                    .iter()
                    .zip(PRIMES)
                    .map(|(s, p)| {
                        let v = radical_inverse(i, p) + s;
                        if v >= 1.0 {
                            v - 1.0
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect()
    }
}
