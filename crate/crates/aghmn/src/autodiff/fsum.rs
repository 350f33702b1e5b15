//! Exactly rounded floating-point summation.
//!
//! Shewchuk-style expansion summation: the result is the exact sum of the
//! inputs rounded once to f64, so it does not depend on input order. The
//! weighted-sum graph op relies on this to make soft attention invariant
//! under joint permutation of its (memory, weight) pairs.

/// Sums finite f64 values with a single final rounding.
///
/// Follows CPython's `math.fsum`, including the half-ulp correction at the
/// end. Inputs must be finite.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::with_capacity(8);
    for value in values {
        debug_assert!(value.is_finite());
        let mut x = value;
        let mut keep = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[keep] = lo;
                keep += 1;
            }
            x = hi;
        }
        partials.truncate(keep);
        partials.push(x);
    }

    let mut n = partials.len();
    let mut hi = 0.0;
    if n > 0 {
        n -= 1;
        hi = partials[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = partials[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Round-half-even correction: if the residual and the next partial
        // agree in sign, the sum may need to round the other way.
        if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_plain_sum_on_benign_input() {
        assert_eq!(exact_sum([1.0, 2.0, 3.0]), 6.0);
        assert_eq!(exact_sum([]), 0.0);
        assert_eq!(exact_sum([-0.5]), -0.5);
    }

    #[test]
    fn recovers_cancelled_small_terms() {
        // Naive left-to-right summation loses the 1.0 here.
        let xs = [1e16, 1.0, -1e16];
        assert_eq!(exact_sum(xs), 1.0);
    }

    #[test]
    fn is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut xs: Vec<f64> = (0..12).map(|_| rng.random_range(-1e3..1e3)).collect();
            let reference = exact_sum(xs.iter().copied());
            for _ in 0..5 {
                // Fisher-Yates shuffle.
                for i in (1..xs.len()).rev() {
                    let j = rng.random_range(0..=i);
                    xs.swap(i, j);
                }
                let permuted = exact_sum(xs.iter().copied());
                assert_eq!(reference.to_bits(), permuted.to_bits());
            }
        }
    }
}
