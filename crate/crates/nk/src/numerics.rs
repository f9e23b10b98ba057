//! Small 1-D search helpers.

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section search for a maximum of `f` on [a, b].
pub fn golden_max(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Maximum of `f` over a uniform grid of `n` points on [a, b], refined by
/// golden-section search around the grid argmax. The returned value is never
/// below the grid maximum.
pub fn grid_refine_max(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize, iters: usize) -> (f64, f64) {
    if n <= 1 || a == b {
        return (a, f(a));
    }
    let step = (b - a) / (n - 1) as f64;
    let mut best = (a, f(a));
    for i in 1..n {
        let x = if i == n - 1 { b } else { a + step * i as f64 };
        let v = f(x);
        if v > best.1 {
            best = (x, v);
        }
    }
    let lo = (best.0 - step).max(a);
    let hi = (best.0 + step).min(b);
    let refined = golden_max(f, lo, hi, iters);
    if refined.1 > best.1 {
        refined
    } else {
        best
    }
}

/// Bisection for an increasing `f` on [lo, hi]: the point where f crosses `y`.
pub fn bisect_increasing(f: &dyn Fn(f64) -> f64, y: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_interior_maximum() {
        let f = |x: f64| -(x - 0.3).powi(2);
        let (x, _) = grid_refine_max(&f, -1.0, 1.0, 11, 60);
        assert!((x - 0.3).abs() < 1e-6);
        let r = bisect_increasing(&|x| x * x * x, 8.0, 0.0, 5.0);
        assert!((r - 2.0).abs() < 1e-12);
    }
}
