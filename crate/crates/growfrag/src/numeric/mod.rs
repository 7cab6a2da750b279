//! Shared numerical kernels: gamma function, adaptive quadrature, and
//! cancellation-safe evaluations of the small expressions the cumulant
//! integrands are built from.

pub mod gamma;
pub mod quad;

pub use gamma::{gamma, recip_gamma};
pub use quad::{integrate, QuadOptions, QuadResult};

/// (1 - x)^p - 1 + p x, the second-order remainder of the binomial
/// expansion, evaluated without catastrophic cancellation for small x.
///
/// Valid for x in [0, 1). Vanishes identically at p = 0 and p = 1.
pub fn pow_one_minus_rem(x: f64, p: f64) -> f64 {
    if x < 0.25 {
        // sum_{k>=2} C(p, k) (-x)^k, ratio recurrence on the terms.
        let mut term = 0.5 * p * (p - 1.0) * x * x;
        let mut sum = term;
        let mut k = 2.0;
        while term != 0.0 {
            term *= -x * (p - k) / (k + 1.0);
            sum += term;
            k += 1.0;
            if term.abs() < 1e-18 * sum.abs() || k > 200.0 {
                break;
            }
        }
        sum
    } else {
        (1.0 - x).powf(p) - 1.0 + p * x
    }
}

/// e^{p y} - 1 - p (e^y - 1), evaluated without catastrophic cancellation
/// near y = 0. Vanishes identically at p = 0 and p = 1.
pub fn exp_rem(p: f64, y: f64) -> f64 {
    if y.abs() < 0.25 {
        // sum_{k>=2} (p^k - p) y^k / k!
        let mut pow_p = p * p;
        let mut pow_y = y * y;
        let mut factorial = 2.0;
        let mut sum = 0.0;
        for k in 2..120 {
            let term = (pow_p - p) * pow_y / factorial;
            sum += term;
            if term.abs() < 1e-18 * sum.abs() {
                break;
            }
            pow_p *= p;
            pow_y *= y;
            factorial *= (k + 1) as f64;
        }
        sum
    } else {
        (p * y).exp_m1() - p * y.exp_m1()
    }
}

/// x + ln(1 - x), evaluated without catastrophic cancellation near x = 0.
pub fn x_plus_ln_one_minus(x: f64) -> f64 {
    if x.abs() < 0.25 {
        // -sum_{k>=2} x^k / k
        let mut pow_x = x * x;
        let mut sum = 0.0;
        for k in 2..120 {
            let term = pow_x / k as f64;
            sum -= term;
            if term.abs() < 1e-18 * sum.abs() {
                break;
            }
            pow_x *= x;
        }
        sum
    } else {
        x + (-x).ln_1p()
    }
}

/// y - (e^y - 1), evaluated without catastrophic cancellation near y = 0.
pub fn y_minus_expm1(y: f64) -> f64 {
    if y.abs() < 0.25 {
        // -sum_{k>=2} y^k / k!
        let mut pow_y = y * y;
        let mut factorial = 2.0;
        let mut sum = 0.0;
        for k in 2..80 {
            let term = pow_y / factorial;
            sum -= term;
            if term.abs() < 1e-18 * sum.abs() {
                break;
            }
            pow_y *= y;
            factorial *= (k + 1) as f64;
        }
        sum
    } else {
        y - y.exp_m1()
    }
}
