//! Closed-form reference laws of the branching flow with mechanism
//! `phi(lambda) = sqrt(8/3) lambda^(3/2)`: the transition Laplace exponent,
//! the two-sided exit probability, the excursion-measure mass constants, and
//! Monte Carlo batteries that verify the stable-driver samplers against
//! them.

use serde::Serialize;

use crate::error::Result;
use crate::exponents::phi;
use crate::lamperti::{csbp_terminal_value, stable_unit_increment, STABLE_UNIT_SCALE};
use crate::rng::RngStream;
use crate::stats::{mean_with_ci, EstimateWithCI};

/// Default driver grid step for flow Monte Carlo.
pub const DEFAULT_CSBP_DT: f64 = 1e-3;

/// Default cap on the simulated driver area per replicate. The expected
/// area to cover branching time `t` from mass `x` is `x t`, so this cap
/// censors only far-out excursions of the heavy-tailed replicate cost.
pub const DEFAULT_AREA_CAP: f64 = 500.0;

/// Cap on driver steps per exit-probability replicate.
const EXIT_STEP_CAP: u64 = 2_000_000;

/// `(3/2) pi^(-3/2) Gamma(1/3)^3 Gamma(7/6)^3`: the constant in the cubic
/// tail of the conditioned excursion height. Anchored against the gamma
/// evaluator in the tests.
pub const HEIGHT_CONSTANT: f64 = 4.135_276_182_532_925_816_295_065;

/// `1 / sqrt(6 pi)`: normalizer turning rescaled fragment counts into the
/// local time of the label process.
pub const LOCAL_TIME_NORMALIZER: f64 = 0.230_329_432_980_890_319_510_163_1;

/// The branching law in use: every routine in this module specializes the
/// mechanism `phi(lambda) = sqrt(8/3) lambda^(3/2)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CsbpLaw;

impl CsbpLaw {
    /// The branching mechanism.
    pub fn mechanism(self, lambda: f64) -> f64 {
        phi(lambda)
    }
}

// ---------------------------------------------------------------------------
// Closed forms
// ---------------------------------------------------------------------------

/// Transition Laplace exponent of the flow:
/// `E[exp(-lambda Y_t) | Y_0 = x] = exp(-x u_t(lambda))` with
/// `u_t(lambda) = (lambda^(-1/2) + t sqrt(2/3))^(-2)`.
pub fn u_t(t: f64, lambda: f64) -> f64 {
    assert!(t > 0.0 && lambda > 0.0, "domain: t and lambda must be positive");
    let root = lambda.powf(-0.5) + t * (2.0f64 / 3.0).sqrt();
    root.powi(-2)
}

/// Probability that the flow started at `x` ever reaches level `z`:
/// `1 - sqrt((1 - x/z)^+)`, and 1 when `x >= z`.
pub fn exit_prob(x: f64, z: f64) -> f64 {
    assert!(x > 0.0 && z > 0.0, "domain: x and z must be positive");
    if x >= z {
        return 1.0;
    }
    1.0 - (1.0 - x / z).sqrt()
}

/// Excursion mass of label ranges extending beyond `r`: `3 / (2 r^2)`.
pub fn range_tail_mass(r: f64) -> f64 {
    assert!(r > 0.0, "domain: r must be positive");
    1.5 / (r * r)
}

/// Excursion mass of a nontrivial boundary at depth `z`: `1 / (2 z)`.
pub fn boundary_hit_mass(z: f64) -> f64 {
    assert!(z > 0.0, "domain: z must be positive");
    0.5 / z
}

/// Tail mass of the height under the conditioned excursion measure:
/// `2 c delta^(-3)` with `c` = [`HEIGHT_CONSTANT`].
pub fn conditioned_height_tail_mass(delta: f64) -> f64 {
    assert!(delta > 0.0, "domain: delta must be positive");
    2.0 * HEIGHT_CONSTANT / (delta * delta * delta)
}

// ---------------------------------------------------------------------------
// Monte Carlo batteries
// ---------------------------------------------------------------------------

/// One Monte Carlo comparison of the flow's Laplace functional against its
/// closed form.
#[derive(Debug, Clone, Serialize)]
pub struct CsbpMcReport {
    pub x: f64,
    pub t: f64,
    pub lambda: f64,
    pub dt: f64,
    /// Mean of `exp(-lambda Y_t)` with its standard error.
    pub estimate: EstimateWithCI,
    /// `exp(-x u_t(lambda))`.
    pub target: f64,
    /// Replicates censored at the area cap (scored as zero; a censored
    /// replicate has large current mass, so its true score is near zero).
    pub censored: u64,
}

/// Monte Carlo mean of `exp(-lambda Y_t)` at the default grid step,
/// compared against `exp(-x u_t(lambda))`.
pub fn csbp_mc_check(x: f64, t: f64, lambda: f64, n: u64, stream: RngStream) -> Result<EstimateWithCI> {
    Ok(csbp_mc_check_with(x, t, lambda, n, DEFAULT_CSBP_DT, DEFAULT_AREA_CAP, stream)?.estimate)
}

/// As [`csbp_mc_check`], with explicit grid step and area cap, returning
/// the full report.
pub fn csbp_mc_check_with(
    x: f64,
    t: f64,
    lambda: f64,
    n: u64,
    dt: f64,
    max_area: f64,
    stream: RngStream,
) -> Result<CsbpMcReport> {
    assert!(n >= 2, "need at least two replicates");
    let mut censored = 0u64;
    let transformed: Vec<f64> = (0..n)
        .map(|i| {
            let mut rng = stream.substream(i).rng();
            let term = csbp_terminal_value(x, t, dt, max_area, &mut rng);
            if term.censored {
                censored += 1;
                0.0
            } else {
                (-lambda * term.value).exp()
            }
        })
        .collect();
    Ok(CsbpMcReport {
        x,
        t,
        lambda,
        dt,
        estimate: mean_with_ci(&transformed, stream),
        target: (-x * u_t(t, lambda)).exp(),
        censored,
    })
}

/// Transition check with a measured discretization budget: the Monte Carlo
/// battery at `dt` and `dt/2`, the halving difference scaled to bound the
/// remaining bias of the finer run, and the resulting gate.
#[derive(Debug, Clone, Serialize)]
pub struct TransitionCheck {
    pub coarse: CsbpMcReport,
    pub fine: CsbpMcReport,
    /// Twice the halving difference: for a grid bias of order `dt^(2/3)`,
    /// the bias left in the finer run is about 1.7 times the difference
    /// between the two runs.
    pub budget: f64,
    pub target: f64,
    pub passed: bool,
}

/// Run the Laplace-functional comparison at `dt` and `dt/2` on independent
/// streams and gate the finer run at 3 standard errors plus the measured
/// halving budget.
pub fn transition_check(
    x: f64,
    t: f64,
    lambda: f64,
    n: u64,
    dt: f64,
    stream: RngStream,
) -> Result<TransitionCheck> {
    let coarse = csbp_mc_check_with(x, t, lambda, n, dt, DEFAULT_AREA_CAP, stream.substream(1))?;
    let fine = csbp_mc_check_with(x, t, lambda, n, dt / 2.0, DEFAULT_AREA_CAP, stream.substream(2))?;
    let budget = 2.0 * (coarse.estimate.point - fine.estimate.point).abs();
    let target = fine.target;
    let passed = (fine.estimate.point - target).abs() <= 3.0 * fine.estimate.stderr + budget;
    Ok(TransitionCheck { coarse, fine, budget, target, passed })
}

/// One Monte Carlo comparison of the level-passage probability against the
/// closed form.
#[derive(Debug, Clone, Serialize)]
pub struct ExitMcReport {
    pub x: f64,
    pub z: f64,
    pub dt: f64,
    /// Fraction of drivers whose running maximum reaches `z` before zero.
    pub estimate: EstimateWithCI,
    /// `1 - sqrt((1 - x/z)^+)`.
    pub target: f64,
    /// Replicates stopped at the step cap before either passage (scored as
    /// a miss).
    pub censored: u64,
}

/// Estimate `P_x(sup Y >= z)` by running the stable driver from `x` until
/// it reaches `z` or zero. The running maximum of the flow equals the
/// running maximum of the driver before its zero hit, so no time change is
/// needed; upward jumps land inside grid increments and their overshoot is
/// captured, while within-step excursions below the crossing are not (grid
/// bias toward misses, measured by halving `dt`).
pub fn exit_prob_mc(x: f64, z: f64, n: u64, dt: f64, stream: RngStream) -> Result<ExitMcReport> {
    assert!(x > 0.0 && z > x, "domain: need 0 < x < z");
    assert!(n >= 2, "need at least two replicates");
    let scale = STABLE_UNIT_SCALE * dt.powf(2.0 / 3.0);
    let mut censored = 0u64;
    let hits: Vec<f64> = (0..n)
        .map(|i| {
            let mut rng = stream.substream(i).rng();
            let mut u = x;
            let mut steps = 0u64;
            loop {
                u += scale * stable_unit_increment(&mut rng);
                if u >= z {
                    return 1.0;
                }
                if u <= 0.0 {
                    return 0.0;
                }
                steps += 1;
                if steps >= EXIT_STEP_CAP {
                    censored += 1;
                    return 0.0;
                }
            }
        })
        .collect();
    Ok(ExitMcReport {
        x,
        z,
        dt,
        estimate: mean_with_ci(&hits, stream),
        target: exit_prob(x, z),
        censored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exponents::gamma_fn;
    use std::f64::consts::PI;

    fn stream(ordinal: u64) -> RngStream {
        RngStream::root(515151).substream(ordinal)
    }

    // -- closed forms -------------------------------------------------------

    #[test]
    fn transition_exponent_matches_frozen_references() {
        let refs = [
            (0.5, 1.0, 0.504_244_923_464_074_512_865_303_6),
            (1.0, 0.5, 0.200_961_894_323_342_029_854_415_2),
        ];
        for (t, lambda, expected) in refs {
            let got = u_t(t, lambda);
            assert!((got - expected).abs() < 1e-14 * expected, "u_{t}({lambda}) = {got}");
        }
        // Direct evaluation at (1, 1).
        let direct = (1.0 + (2.0f64 / 3.0).sqrt()).powi(-2);
        assert!((u_t(1.0, 1.0) - direct).abs() < 1e-15);
        assert!((u_t(1.0, 1.0) - 0.303_061_543_300_931_4).abs() < 1e-14);
    }

    #[test]
    fn transition_exponent_limits() {
        // Tiny t: the semigroup approaches the identity.
        assert!((u_t(1e-12, 2.0) - 2.0).abs() < 1e-10);
        // Huge lambda: the exponent saturates at 3 / (2 t^2).
        assert!((u_t(1.0, 1e18) - 1.5).abs() < 1e-8 * 1.5);
        assert!((u_t(2.0, 1e18) - 3.0 / 8.0).abs() < 1e-8);
    }

    #[test]
    fn flow_identity_holds_on_a_grid() {
        let grid = [0.1, 0.5, 1.0, 2.0, 5.0];
        for lambda in [0.5, 1.0, 2.0, 5.0, 10.0] {
            for t in grid {
                for s in grid {
                    let lhs = u_t(t + s, lambda);
                    let rhs = u_t(t, u_t(s, lambda));
                    assert!(
                        (lhs - rhs).abs() <= 1e-12 * lhs.abs(),
                        "flow identity fails at t={t}, s={s}, lambda={lambda}"
                    );
                }
            }
        }
    }

    #[test]
    fn exit_probability_closed_form_and_monotonicity() {
        assert!((exit_prob(1.0, 2.0) - 0.292_893_218_813_452_475_599_155_6).abs() < 1e-15);
        assert_eq!(exit_prob(2.0, 2.0), 1.0);
        assert_eq!(exit_prob(3.0, 2.0), 1.0);
        // Monotone in x with boundary values 0 and 1.
        let mut last = 0.0;
        for k in 1..100 {
            let p = exit_prob(k as f64 / 100.0, 1.0);
            assert!(p > last && p < 1.0);
            last = p;
        }
        // Small-mass expansion x/(2z) + O(x^2).
        let (x, z) = (1e-6, 2.0);
        assert!((exit_prob(x, z) - x / (2.0 * z)).abs() < x * x);
    }

    #[test]
    fn mass_constants_match_their_closed_forms() {
        assert_eq!(range_tail_mass(1.0), 1.5);
        assert_eq!(range_tail_mass(2.0), 0.375);
        assert_eq!(boundary_hit_mass(2.0), 0.25);
        let c = HEIGHT_CONSTANT;
        assert!((conditioned_height_tail_mass(2.0) - 2.0 * c / 8.0).abs() < 1e-15);
        // c = (3/2) pi^(-3/2) Gamma(1/3)^3 Gamma(7/6)^3.
        let g13 = gamma_fn(1.0 / 3.0).unwrap();
        let g76 = gamma_fn(7.0 / 6.0).unwrap();
        let direct = 1.5 * PI.powf(-1.5) * g13.powi(3) * g76.powi(3);
        assert!((c - direct).abs() < 1e-12 * c, "height constant {c} vs direct {direct}");
        let normalizer = 1.0 / (6.0 * PI).sqrt();
        assert!((LOCAL_TIME_NORMALIZER - normalizer).abs() < 1e-15);
    }

    #[test]
    fn mechanism_is_the_three_halves_power() {
        let law = CsbpLaw;
        assert!((law.mechanism(1.0) - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((law.mechanism(4.0) - (8.0f64 / 3.0).sqrt() * 8.0).abs() < 1e-13);
    }

    // -- Monte Carlo batteries ----------------------------------------------

    #[test]
    fn transition_mc_smoke_at_short_time() {
        // t -> 0 sanity: E exp(-Y_0.01) is close to exp(-1).
        let report =
            csbp_mc_check_with(1.0, 0.01, 1.0, 2000, 1e-3, DEFAULT_AREA_CAP, stream(1)).unwrap();
        let budget = 1.0 * STABLE_UNIT_SCALE * 1e-3f64.powf(2.0 / 3.0);
        assert!(
            (report.estimate.point - report.target).abs()
                <= 3.0 * report.estimate.stderr + budget,
            "estimate {} vs target {}",
            report.estimate.point,
            report.target
        );
        assert!((report.target - (-1.0f64).exp()).abs() < 0.01);
        assert_eq!(report.censored, 0);
    }

    #[test]
    fn transition_check_measures_a_budget_and_passes() {
        let check = transition_check(1.0, 0.5, 1.0, 4000, 2e-3, stream(2)).unwrap();
        assert!(check.passed, "fine {} vs target {} (budget {})",
            check.fine.estimate.point, check.target, check.budget);
        assert!(check.budget < 0.1);
        assert_eq!(check.fine.dt, 1e-3);
    }

    #[test]
    fn branching_property_in_monte_carlo() {
        // Independence across initial masses: the functional at x + x'
        // factorizes. Compare est(2.0) with est(0.7) * est(1.3).
        let (t, lambda, n) = (0.5, 1.0, 4000);
        let a = csbp_mc_check_with(0.7, t, lambda, n, 2e-3, DEFAULT_AREA_CAP, stream(3)).unwrap();
        let b = csbp_mc_check_with(1.3, t, lambda, n, 2e-3, DEFAULT_AREA_CAP, stream(4)).unwrap();
        let c = csbp_mc_check_with(2.0, t, lambda, n, 2e-3, DEFAULT_AREA_CAP, stream(5)).unwrap();
        let product = a.estimate.point * b.estimate.point;
        let se_product = (a.estimate.stderr * b.estimate.point).abs()
            + (b.estimate.stderr * a.estimate.point).abs();
        let grid_budget = 2.0 * lambda * STABLE_UNIT_SCALE * 2e-3f64.powf(2.0 / 3.0);
        assert!(
            (c.estimate.point - product).abs()
                <= 3.0 * (c.estimate.stderr + se_product) + grid_budget,
            "combined {} vs product {}",
            c.estimate.point,
            product
        );
    }

    #[test]
    fn exit_mc_smoke() {
        let report = exit_prob_mc(1.0, 2.0, 4000, 1e-3, stream(6)).unwrap();
        // Grid bias censors within-step max excursions: allow a one-sided
        // budget of a few grid fluctuations on top of 3 SE.
        let budget = 3.0 * STABLE_UNIT_SCALE * 1e-3f64.powf(2.0 / 3.0);
        assert!(
            (report.estimate.point - report.target).abs() <= 3.0 * report.estimate.stderr + budget,
            "estimate {} vs target {}",
            report.estimate.point,
            report.target
        );
        assert_eq!(report.censored, 0);
    }

    #[test]
    fn reports_are_reproducible_and_serializable() {
        let a = csbp_mc_check(1.0, 0.1, 1.0, 200, stream(7)).unwrap();
        let b = csbp_mc_check(1.0, 0.1, 1.0, 200, stream(7)).unwrap();
        assert_eq!(a.point, b.point);
        assert_eq!(a.stderr, b.stderr);
        let report =
            csbp_mc_check_with(1.0, 0.1, 1.0, 200, 1e-3, DEFAULT_AREA_CAP, stream(7)).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"target\""));
    }
}
