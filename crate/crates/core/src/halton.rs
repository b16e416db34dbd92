//! Deterministic low-discrepancy points in the unit cube.

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let (mut f, mut r) = (inv, 0.0);
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// The `index`-th Halton point in `[0, 1)^dim` (skipping the origin).
pub(crate) fn halton(index: usize, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "halton sequence supports up to {} dimensions", PRIMES.len());
    (0..dim).map(|d| radical_inverse(index as u64 + 1, PRIMES[d])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_points() {
        assert_eq!(halton(0, 2), vec![0.5, 1.0 / 3.0]);
        assert_eq!(halton(1, 2), vec![0.25, 2.0 / 3.0]);
        assert!((0..1000).all(|i| halton(i, 5).iter().all(|v| (0.0..1.0).contains(v))));
    }
}
