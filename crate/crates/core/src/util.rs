//! Small shared helpers: angle arithmetic and the parallel/sequential map.

use std::f64::consts::PI;

/// Wrap an angle into `[-pi, pi)`. Exact (bit-identical) for in-range input.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a >= PI {
        a = -PI;
    }
    a
}

/// Shortest signed angular difference `a - b`, wrapped into `[-pi, pi)`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// Map `f` over `items`, collecting results in order.
///
/// Runs on the rayon pool when the `parallel` feature is enabled. Both paths
/// preserve the input ordering, so downstream reductions are deterministic.
#[cfg(feature = "parallel")]
pub fn maybe_par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn maybe_par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Sequential reference path, always available (benchmarks compare it against
/// the rayon path).
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Rayon path, available whenever the feature is on.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let a = 0.37 * k as f64;
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w), "{a} -> {w}");
            assert_relative_eq!((w - a).rem_euclid(2.0 * PI).min((a - w).rem_euclid(2.0 * PI)), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn wrap_pi_maps_to_minus_pi() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
    }

    #[test]
    fn map_helpers_agree() {
        let xs: Vec<i64> = (0..100).collect();
        let f = |x: &i64| x * x - 3;
        assert_eq!(maybe_par_map(&xs, f), seq_map(&xs, f));
    }
}
