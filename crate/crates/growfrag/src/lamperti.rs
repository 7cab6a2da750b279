//! Time changes linking the scalar drivers to observable processes: the
//! positive self-similar mass process of a cell (exponential of a
//! time-changed driver) and the continuous-state branching flow carried by a
//! spectrally positive stable driver.
//!
//! Both directions use closed-form segment arithmetic on piecewise-linear
//! skeletons: exponential functionals of linear pieces integrate and invert
//! exactly, so the only discretization error is the skeleton grid itself.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::exponents::{psi_circ, psi_eve};
use crate::levy::{LevyPathSkeleton, PathParams, Process, MAX_GRID_ROWS};
use crate::rng::RngStream;

/// Default absorption-tail tolerance: the expected driver-clock exponential
/// functional left beyond the simulated horizon must not exceed this.
pub const DEFAULT_TAIL_TOL: f64 = 1e-6;

/// Default output grid spacing for the mass process, as a fraction of the
/// self-similar time unit `z^(1/2)`.
pub const DEFAULT_GRID_FRACTION: f64 = 1e-3;

/// Scale sigma such that sigma times a standard totally skewed 3/2-stable
/// variable (unit scale, positive skew) has Laplace transform
/// `exp(sqrt(8/3) lambda^(3/2))`, the branching-driver exponent per unit
/// time. Closed form `(2/sqrt(3))^(2/3)`.
pub const STABLE_UNIT_SCALE: f64 = 1.100_642_416_298_208_894_624_87;

/// Chambers-Mallows-Stuck skew normalizer for index 3/2 and full positive
/// skew: `(1 + tan^2(3 pi / 4))^(1/3) = 2^(1/3)`.
const CMS_SKEW: f64 = 1.259_921_049_894_873_164_767_211;

/// `(exp(x) - 1) / x`, continuous through 0.
pub(crate) fn exprel(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0 + 0.5 * x
    } else {
        x.exp_m1() / x
    }
}

// ---------------------------------------------------------------------------
// Positive self-similar mass process
// ---------------------------------------------------------------------------

/// Mass of one cell as a function of process time: positive, self-similar
/// with index 1/2, strictly decreasing across jumps, absorbed at zero when
/// the driver drifts to minus infinity.
#[derive(Debug, Clone)]
pub struct PssmpPath {
    /// Process time, nondecreasing from 0; jump times appear twice.
    pub times: Vec<f64>,
    /// Mass at `times`; starts at `initial_mass`, strictly positive before
    /// absorption.
    pub values: Vec<f64>,
    /// Marks the post-jump row of each jump-time pair.
    pub is_jump: Vec<bool>,
    /// (time, size) of every jump, in time order; sizes negative and equal to
    /// the recorded row decrement bitwise.
    pub jumps: Vec<(f64, f64)>,
    /// Process time at which the mass is absorbed at zero; `+inf` when the
    /// driver precludes absorption (conditioned driver, nonnegative drift).
    pub absorption_time: f64,
    pub initial_mass: f64,
}

impl PssmpPath {
    /// Check the structural contract: aligned columns, nondecreasing times,
    /// positivity before absorption, a zero row only at the absorption time,
    /// downward jumps recorded as exact pre/post row pairs.
    pub fn validate(&self) -> Result<()> {
        let contract = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Contract(msg.to_string()))
            }
        };
        contract(!self.times.is_empty(), "empty mass path")?;
        contract(
            self.times.len() == self.values.len() && self.times.len() == self.is_jump.len(),
            "misaligned mass path columns",
        )?;
        contract(
            self.times[0] == 0.0 && self.values[0] == self.initial_mass,
            "mass path must start at (0, initial_mass)",
        )?;
        contract(
            self.times.windows(2).all(|w| w[0] <= w[1]),
            "times must be nondecreasing",
        )?;
        for (i, (&t, &v)) in self.times.iter().zip(&self.values).enumerate() {
            contract(v.is_finite() && v >= 0.0, "masses must be finite and nonnegative")?;
            if v == 0.0 {
                contract(
                    i + 1 == self.times.len() && t >= self.absorption_time * (1.0 - 1e-12),
                    "a zero mass may only close the path at the absorption time",
                )?;
            } else {
                contract(t <= self.absorption_time, "positive mass after absorption")?;
            }
        }
        let post_rows: Vec<usize> = (0..self.times.len()).filter(|&i| self.is_jump[i]).collect();
        contract(post_rows.len() == self.jumps.len(), "one post-jump row per recorded jump")?;
        for (&row, &(t, size)) in post_rows.iter().zip(&self.jumps) {
            contract(row > 0, "post-jump row cannot be first")?;
            contract(
                self.times[row] == t && self.times[row - 1] == t,
                "jump time must appear as a pre/post row pair",
            )?;
            contract(size < 0.0, "mass never jumps upward")?;
            contract(
                self.values[row] == self.values[row - 1] + size,
                "mass decrement across a jump must equal the recorded size",
            )?;
        }
        Ok(())
    }
}

/// Expected remaining driver-clock exponential functional per unit of
/// terminal level: `E int_0^inf exp(xi_v / 2) dv` for a fresh driver, which
/// is `-1 / exponent(1/2)` when the exponent at 1/2 is negative and
/// divergent otherwise (no absorption).
fn tail_coefficient(process: Process) -> Result<Option<f64>> {
    Ok(match process {
        Process::Eve => Some(-1.0 / psi_eve(0.5)?),
        Process::Circ => Some(-1.0 / psi_circ(0.5)?),
        // The conditioned driver drifts to +inf: the mass survives forever.
        Process::Hat => None,
        Process::DriftOnly(c) if c < 0.0 => Some(-2.0 / c),
        Process::DriftOnly(_) => None,
        Process::StablePositive => {
            return Err(Error::Contract(
                "the mass time change applies to cell drivers, not the \
                 branching-flow stable driver"
                    .into(),
            ));
        }
    })
}

/// Build the mass process of a cell of initial mass `z` from a driver
/// skeleton, with the default output grid (`1e-3 z^(1/2)`) and absorption
/// tolerance.
pub fn pssmp_from_levy(skeleton: &LevyPathSkeleton, z: f64) -> Result<PssmpPath> {
    let dr = DEFAULT_GRID_FRACTION * z.sqrt();
    pssmp_from_levy_with(skeleton, z, dr, DEFAULT_TAIL_TOL)
}

/// As [`pssmp_from_levy`], with explicit output spacing `dr` (process time)
/// and absorption-tail tolerance.
///
/// The mass at process time `r` is `z exp(xi(chi(z^(-1/2) r)))` where `chi`
/// inverts the driver-clock exponential functional `A(s) = int_0^s
/// exp(xi/2)`. Both `A` and its inverse are evaluated in closed form on each
/// linear skeleton segment, so grid values carry no quadrature error. The
/// absorption time is `z^(1/2) A(inf)`; the part of `A` beyond the simulated
/// horizon is estimated by the expected functional of a fresh driver started
/// at the terminal level, and the build fails when that estimate exceeds
/// `tail_tol`.
pub fn pssmp_from_levy_with(
    skeleton: &LevyPathSkeleton,
    z: f64,
    dr: f64,
    tail_tol: f64,
) -> Result<PssmpPath> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Domain { what: "initial mass must be positive and finite", value: z });
    }
    if !(dr > 0.0) || !dr.is_finite() {
        return Err(Error::Domain { what: "output spacing must be positive and finite", value: dr });
    }
    skeleton.validate()?;
    let coeff = tail_coefficient(skeleton.params.process)?;
    if let Some(c) = coeff {
        let tail_bound = (skeleton.terminal_value() / 2.0).exp() * c;
        if tail_bound > tail_tol {
            return Err(Error::HorizonInsufficient { tail_bound, tolerance: tail_tol });
        }
    }

    let scale = z.sqrt();
    let mut times = vec![0.0];
    let mut values = vec![z];
    let mut is_jump = vec![false];
    let mut jumps = Vec::with_capacity(skeleton.jumps.len());
    let mut a_cum = 0.0f64;
    let mut j = 1u64;
    for i in 0..skeleton.times.len() - 1 {
        let (t0, x0) = (skeleton.times[i], skeleton.values[i]);
        let (t1, x1) = (skeleton.times[i + 1], skeleton.values[i + 1]);
        let h = t1 - t0;
        if h == 0.0 {
            if skeleton.is_jump[i + 1] {
                let r = scale * a_cum;
                let pre = z * x0.exp();
                let post = z * x1.exp();
                times.push(r);
                values.push(pre);
                is_jump.push(false);
                times.push(r);
                values.push(post);
                is_jump.push(true);
                jumps.push((r, post - pre));
            }
            continue;
        }
        let m = (x1 - x0) / h;
        let seg_a = (x0 / 2.0).exp() * h * exprel(m * h / 2.0);
        let seg_end = a_cum + seg_a;
        loop {
            let r = j as f64 * dr;
            if r / scale > seg_end {
                break;
            }
            let du = r / scale - a_cum;
            let s = if m.abs() < 1e-12 {
                du * (-x0 / 2.0).exp()
            } else {
                (2.0 / m) * ((m / 2.0) * du * (-x0 / 2.0).exp()).ln_1p()
            }
            .clamp(0.0, h);
            times.push(r);
            values.push(z * (x0 + m * s).exp());
            is_jump.push(false);
            j += 1;
            if times.len() > MAX_GRID_ROWS {
                return Err(Error::ResourceLimit(format!(
                    "mass path exceeds {MAX_GRID_ROWS} rows; coarsen the output spacing"
                )));
            }
        }
        a_cum = seg_end;
    }
    let absorption_time = if coeff.is_some() { scale * a_cum } else { f64::INFINITY };
    if coeff.is_some() {
        times.push(absorption_time);
        values.push(0.0);
        is_jump.push(false);
    }
    Ok(PssmpPath { times, values, is_jump, jumps, absorption_time, initial_mass: z })
}

// ---------------------------------------------------------------------------
// Spectrally positive stable driver
// ---------------------------------------------------------------------------

/// One draw of the standard totally skewed 3/2-stable law (unit scale,
/// positive skew, zero shift) by the Chambers-Mallows-Stuck transform.
/// Multiplied by [`STABLE_UNIT_SCALE`] it is the unit-time increment of the
/// branching driver.
pub fn stable_unit_increment<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let theta = (rng.random::<f64>() - 0.5) * PI;
        let w = -(1.0 - rng.random::<f64>()).ln();
        if w <= 0.0 || theta.abs() >= FRAC_PI_2 - 1e-9 {
            continue;
        }
        let a = 1.5 * theta - FRAC_PI_4;
        let x = CMS_SKEW * a.sin() / theta.cos().powf(2.0 / 3.0)
            * (w / (0.5 * theta - FRAC_PI_4).cos()).powf(1.0 / 3.0);
        if x.is_finite() {
            return x;
        }
    }
}

/// Sample the spectrally positive stable driver of the branching flow on
/// `[0, t_horizon]` with grid step `dt`. Increments are exact in law per
/// grid step (stable scaling `dt^(2/3)`), so `dt` only limits where the path
/// is observed, not its distribution at grid times.
pub fn stable_spectrally_positive(
    t_horizon: f64,
    dt: f64,
    stream: RngStream,
) -> Result<LevyPathSkeleton> {
    if !(t_horizon > 0.0) || !t_horizon.is_finite() {
        return Err(Error::Domain { what: "horizon must be positive and finite", value: t_horizon });
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Domain { what: "grid step must be positive and finite", value: dt });
    }
    let rows = (t_horizon / dt).ceil() as usize + 1;
    if rows > MAX_GRID_ROWS {
        return Err(Error::ResourceLimit(format!(
            "stable driver grid exceeds {MAX_GRID_ROWS} rows; coarsen dt"
        )));
    }
    let mut times = Vec::with_capacity(rows + 1);
    times.push(0.0);
    let mut k = 1u64;
    while (k as f64) * dt < t_horizon * (1.0 - 1e-12) {
        times.push(k as f64 * dt);
        k += 1;
    }
    times.push(t_horizon);
    let mut rng = stream.rng();
    let mut values = Vec::with_capacity(times.len());
    values.push(0.0);
    let mut v = 0.0f64;
    for w in times.windows(2) {
        let h = w[1] - w[0];
        v += STABLE_UNIT_SCALE * h.powf(2.0 / 3.0) * stable_unit_increment(&mut rng);
        values.push(v);
    }
    let is_jump = vec![false; times.len()];
    Ok(LevyPathSkeleton {
        times,
        values,
        is_jump,
        jumps: Vec::new(),
        params: PathParams {
            process: Process::StablePositive,
            delta: 0.0,
            dt,
            horizon: t_horizon,
            seed: stream,
        },
    })
}

// ---------------------------------------------------------------------------
// Branching flow from the stable driver
// ---------------------------------------------------------------------------

/// Population mass of the branching flow as a function of branching time:
/// nonnegative, upward jumps only (recorded as duplicate-time row pairs).
#[derive(Debug, Clone)]
pub struct CsbpPath {
    /// Branching time, nondecreasing from 0; jump times appear twice.
    pub times: Vec<f64>,
    /// Mass at `times`; starts at `initial_value`.
    pub values: Vec<f64>,
    /// Branching time accumulated up to the last strictly positive driver
    /// value: a lower bound for the extinction time. For the stable driver
    /// the bound misses `O(dt^(1/3))`; for drivers reaching zero linearly it
    /// grows like `log(1/dt)`, consistent with no extinction in finite time.
    pub extinction_time: f64,
    pub initial_value: f64,
}

impl CsbpPath {
    /// Check the structural contract: aligned columns, nondecreasing times,
    /// nonnegative finite masses, upward jumps only at duplicate-time rows.
    pub fn validate(&self) -> Result<()> {
        let contract = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Contract(msg.to_string()))
            }
        };
        contract(!self.times.is_empty(), "empty branching path")?;
        contract(self.times.len() == self.values.len(), "misaligned branching path columns")?;
        contract(
            self.times[0] == 0.0 && self.values[0] == self.initial_value,
            "branching path must start at (0, initial_value)",
        )?;
        for i in 1..self.times.len() {
            contract(self.times[i] >= self.times[i - 1], "times must be nondecreasing")?;
            if self.times[i] == self.times[i - 1] {
                contract(
                    self.values[i] >= self.values[i - 1],
                    "branching mass never jumps downward",
                )?;
            }
        }
        contract(
            self.values.iter().all(|v| v.is_finite() && *v >= 0.0),
            "masses must be finite and nonnegative",
        )?;
        Ok(())
    }
}

/// Default branching-time horizon for flow paths. The branching clock can
/// stretch without bound while the driver grazes zero, so an output window
/// must always be fixed in advance.
pub const DEFAULT_FLOW_HORIZON: f64 = 16.0;

/// Build the branching flow `Y` started at `x` from a spectrally positive
/// driver skeleton, on the driver's own grid spacing, over the default
/// branching-time window.
pub fn csbp_from_stable(u_path: &LevyPathSkeleton, x: f64) -> Result<CsbpPath> {
    csbp_from_stable_with(u_path, x, u_path.params.dt, DEFAULT_FLOW_HORIZON)
}

/// As [`csbp_from_stable`], with explicit output spacing and branching-time
/// horizon `t_max`.
///
/// The driver must reach zero within its horizon (a driver that never does
/// leaves the flow undefined beyond the simulated range and is rejected).
/// `Y_t = U(theta_t)` where `theta` inverts the additive clock
/// `int_0^s du / U(u)`, accumulated in closed form per linear segment; on
/// the segment where `U` crosses zero the clock diverges, so every finite
/// `t` is reached and `Y` decays exponentially there without touching zero.
/// The extinction bound keeps accumulating over the whole driver even after
/// row emission stops at `t_max`.
pub fn csbp_from_stable_with(
    u_path: &LevyPathSkeleton,
    x: f64,
    out_dt: f64,
    t_max: f64,
) -> Result<CsbpPath> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain { what: "initial mass must be positive and finite", value: x });
    }
    if !(out_dt > 0.0) || !out_dt.is_finite() {
        return Err(Error::Domain { what: "output spacing must be positive and finite", value: out_dt });
    }
    if !(t_max > 0.0) || !t_max.is_finite() {
        return Err(Error::Domain { what: "flow horizon must be positive and finite", value: t_max });
    }
    let n = u_path.times.len();
    let level = |k: usize| x + u_path.values[k];
    let zero = (0..n).find(|&k| level(k) <= 0.0).ok_or_else(|| {
        Error::Contract(
            "driver path never reaches zero; the branching flow is undefined \
             beyond its horizon"
                .into(),
        )
    })?;
    if zero == 0 {
        return Err(Error::Contract("driver path starts nonpositive".into()));
    }

    if t_max / out_dt > MAX_GRID_ROWS as f64 {
        return Err(Error::ResourceLimit(format!(
            "branching path would exceed {MAX_GRID_ROWS} rows; coarsen the output spacing"
        )));
    }
    let mut times = vec![0.0];
    let mut values = vec![x];
    let mut clock = 0.0f64;
    let mut j = 1u64;
    for i in 0..zero {
        let (t0, u_a) = (u_path.times[i], level(i));
        let (t1, u_b) = (u_path.times[i + 1], level(i + 1));
        let h = t1 - t0;
        if h == 0.0 {
            if u_b < u_a {
                return Err(Error::Contract(
                    "downward driver jump breaks spectral positivity".into(),
                ));
            }
            if u_b > u_a && clock <= t_max {
                // Upward driver jump: instantaneous in the branching clock.
                times.push(clock);
                values.push(u_a);
                times.push(clock);
                values.push(u_b);
            }
            continue;
        }
        let m = (u_b - u_a) / h;
        let crossing = i + 1 == zero;
        let c_end = if crossing {
            // U crosses zero inside this segment: the clock diverges there.
            f64::INFINITY
        } else if u_b == u_a {
            clock + h / u_a
        } else {
            clock + (h / (u_b - u_a)) * (u_b / u_a).ln()
        };
        loop {
            let t = j as f64 * out_dt;
            if t > c_end || t > t_max {
                break;
            }
            times.push(t);
            values.push(u_a * (m * (t - clock)).exp());
            j += 1;
        }
        if crossing {
            break;
        }
        clock = c_end;
    }
    Ok(CsbpPath { times, values, extinction_time: clock, initial_value: x })
}

/// Invert the branching time change: recover the driver skeleton
/// `U(s) - x` at driver times `s(t) = int_0^t Y`, with upward jumps of `Y`
/// carried through at their accumulated driver time. Rows at or after the
/// first zero mass are dropped (the driver is exhausted there).
pub fn csbp_inverse_timechange(y_path: &CsbpPath) -> Result<LevyPathSkeleton> {
    y_path.validate()?;
    let x = y_path.initial_value;
    if !(x > 0.0) {
        return Err(Error::Domain { what: "initial mass must be positive", value: x });
    }
    let mut times = vec![0.0];
    let mut values = vec![0.0];
    let mut is_jump = vec![false];
    let mut jumps = Vec::new();
    let mut s = 0.0f64;
    for i in 0..y_path.times.len() - 1 {
        let (t0, y0) = (y_path.times[i], y_path.values[i]);
        let (t1, y1) = (y_path.times[i + 1], y_path.values[i + 1]);
        if y0 == 0.0 {
            break;
        }
        if t1 == t0 {
            if y1 > y0 {
                let pre = *values.last().unwrap();
                let post = y1 - x;
                times.push(s);
                values.push(post);
                is_jump.push(true);
                jumps.push((s, post - pre));
            }
            continue;
        }
        s += 0.5 * (y0 + y1) * (t1 - t0);
        times.push(s);
        values.push(y1 - x);
        is_jump.push(false);
    }
    let dt = y_path
        .times
        .windows(2)
        .map(|w| w[1] - w[0])
        .find(|&h| h > 0.0)
        .unwrap_or(0.0);
    let horizon = *times.last().unwrap();
    Ok(LevyPathSkeleton {
        times,
        values,
        is_jump,
        jumps,
        params: PathParams {
            process: Process::StablePositive,
            delta: 0.0,
            dt,
            horizon,
            // Derived deterministically from the input path; the stream is a
            // placeholder, not a sampling seed.
            seed: RngStream::root(0),
        },
    })
}

// ---------------------------------------------------------------------------
// Streaming terminal value of the branching flow
// ---------------------------------------------------------------------------

/// One terminal draw of the branching flow: the mass at the requested time,
/// whether the replicate was censored at the area cap, and the number of
/// driver steps consumed.
#[derive(Debug, Clone, Copy)]
pub struct CsbpTerminal {
    pub value: f64,
    pub censored: bool,
    pub steps: u64,
}

/// Sample `Y_t` for a flow started at `x` by streaming a fresh stable driver
/// through the branching clock, without storing a path. The driver is
/// extended until the clock covers `t` or the mass reaches zero; the
/// simulated driver area `int U` is capped at `max_area` (expected area is
/// `x t`, so the cap bounds the heavy-tailed replicate cost), and capped
/// replicates return the current mass with `censored` set.
pub fn csbp_terminal_value<R: Rng + ?Sized>(
    x: f64,
    t: f64,
    dt: f64,
    max_area: f64,
    rng: &mut R,
) -> CsbpTerminal {
    assert!(x > 0.0 && t >= 0.0 && dt > 0.0 && max_area > 0.0, "domain");
    if t == 0.0 {
        return CsbpTerminal { value: x, censored: false, steps: 0 };
    }
    let scale = STABLE_UNIT_SCALE * dt.powf(2.0 / 3.0);
    let mut u = x;
    let mut clock = 0.0f64;
    let mut area = 0.0f64;
    let mut steps = 0u64;
    loop {
        steps += 1;
        let inc = scale * stable_unit_increment(rng);
        let u_next = u + inc;
        let m = inc / dt;
        if u_next <= 0.0 {
            // The clock diverges before the zero crossing, so t lands inside
            // this segment and the mass decays exponentially there.
            return CsbpTerminal { value: u * (m * (t - clock)).exp(), censored: false, steps };
        }
        let c_inc = if inc == 0.0 { dt / u } else { (dt / inc) * (inc / u).ln_1p() };
        if clock + c_inc > t {
            return CsbpTerminal { value: u * (m * (t - clock)).exp(), censored: false, steps };
        }
        clock += c_inc;
        area += 0.5 * dt * (u + u_next);
        u = u_next;
        if area > max_area {
            return CsbpTerminal { value: u, censored: true, steps };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exponents::phi;
    use crate::levy::sample_levy_path;
    use crate::stats::{ks_two_sample, ks_two_sample_critical_1pct, mean_and_sd};

    fn stream(ordinal: u64) -> RngStream {
        RngStream::root(424242).substream(ordinal)
    }

    // -- tail coefficients --------------------------------------------------

    #[test]
    fn tail_coefficients_match_reciprocal_exponents() {
        let eve = tail_coefficient(Process::Eve).unwrap().unwrap();
        assert!((eve - 0.840_716_982_764_937_810_125_013_6).abs() < 1e-12 * eve);
        let circ = tail_coefficient(Process::Circ).unwrap().unwrap();
        assert!((circ - 2.170_803_763_674_802_978_089_044).abs() < 1e-12 * circ);
        assert!(tail_coefficient(Process::Hat).unwrap().is_none());
        assert_eq!(tail_coefficient(Process::DriftOnly(-4.0)).unwrap(), Some(0.5));
        assert!(tail_coefficient(Process::DriftOnly(0.0)).unwrap().is_none());
        assert!(tail_coefficient(Process::StablePositive).is_err());
    }

    // -- mass process: exact cases ------------------------------------------

    #[test]
    fn zero_driver_gives_constant_mass() {
        let sk = sample_levy_path(Process::DriftOnly(0.0), 1.0, 1e-3, 1e-3, stream(1)).unwrap();
        let p = pssmp_from_levy(&sk, 4.0).unwrap();
        p.validate().unwrap();
        assert!(p.absorption_time.is_infinite());
        assert!(p.jumps.is_empty());
        assert!(p.values.iter().all(|&v| v == 4.0));
        // Driver clock of length 1 covers process time z^(1/2) * 1 = 2.
        assert!((p.times.last().unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn negative_drift_mass_matches_closed_form() {
        let (z, c) = (1.0f64, 4.0f64);
        let sk = sample_levy_path(Process::DriftOnly(-c), 8.0, 1e-3, 1e-3, stream(2)).unwrap();
        let p = pssmp_from_levy(&sk, z).unwrap();
        p.validate().unwrap();
        let mut worst = 0.0f64;
        for (&r, &v) in p.times.iter().zip(&p.values).take(p.times.len() - 1) {
            let expected = z * (1.0 - c * r / (2.0 * z.sqrt())).powi(2);
            worst = worst.max((v - expected).abs());
        }
        assert!(worst < 1e-6, "sup deviation from the closed form is {worst:.3e}");
        // Absorption at 2 sqrt(z) / c, up to the un-simulated tail.
        let t0 = 2.0 * z.sqrt() / c;
        assert!((p.absorption_time - t0).abs() < 1e-6);
        assert_eq!(*p.values.last().unwrap(), 0.0);
    }

    #[test]
    fn short_horizon_is_rejected_with_the_tail_bound() {
        let sk = sample_levy_path(Process::DriftOnly(-4.0), 2.0, 1e-3, 1e-3, stream(3)).unwrap();
        match pssmp_from_levy(&sk, 1.0) {
            Err(Error::HorizonInsufficient { tail_bound, tolerance }) => {
                // exp(-8 / 2) * (2 / 4)
                assert!((tail_bound - 0.5 * (-4.0f64).exp()).abs() < 1e-6);
                assert_eq!(tolerance, DEFAULT_TAIL_TOL);
            }
            other => panic!("expected a horizon error, got {other:?}"),
        }
    }

    #[test]
    fn stable_driver_skeleton_is_rejected_for_the_mass_change() {
        let sk = stable_spectrally_positive(1.0, 1e-2, stream(4)).unwrap();
        assert!(matches!(pssmp_from_levy(&sk, 1.0), Err(Error::Contract(_))));
    }

    // -- mass process: driven by the cell driver ----------------------------

    fn eve_skeleton(ordinal: u64) -> LevyPathSkeleton {
        sample_levy_path(Process::Eve, 20.0, 0.01, 0.01, stream(ordinal)).unwrap()
    }

    #[test]
    fn eve_mass_is_absorbed_and_conserves_jumps() {
        let sk = eve_skeleton(5);
        let p = pssmp_from_levy(&sk, 1.0).unwrap();
        p.validate().unwrap();
        assert!(p.absorption_time.is_finite());
        assert_eq!(p.jumps.len(), sk.jumps.len());
        let mut post_iter = (0..p.times.len()).filter(|&i| p.is_jump[i]);
        for (&(_, xi_size), &(_, mass_size)) in sk.jumps.iter().zip(&p.jumps) {
            let row = post_iter.next().unwrap();
            let pre = p.values[row - 1];
            let expected = -pre * (-xi_size.exp_m1());
            assert!(
                (mass_size - expected).abs() <= 1e-10 * pre,
                "jump size {mass_size} vs driver relation {expected}"
            );
            // Small driver jumps: the post-jump mass dominates the shed mass.
            assert!(p.values[row] > mass_size.abs());
        }
    }

    #[test]
    fn mass_change_is_self_similar_bitwise_for_the_drift_driver() {
        let sk = sample_levy_path(Process::DriftOnly(-3.0), 10.0, 1e-3, 1e-3, stream(6)).unwrap();
        let p1 = pssmp_from_levy(&sk, 1.0).unwrap();
        let p4 = pssmp_from_levy(&sk, 4.0).unwrap();
        assert_eq!(p1.times.len(), p4.times.len());
        for i in 0..p1.times.len() {
            assert_eq!(p4.times[i], 2.0 * p1.times[i]);
            assert_eq!(p4.values[i], 4.0 * p1.values[i]);
        }
        assert_eq!(p4.absorption_time, 2.0 * p1.absorption_time);
    }

    #[test]
    fn mass_change_is_self_similar_bitwise_for_the_cell_driver() {
        let sk = eve_skeleton(7);
        let p1 = pssmp_from_levy(&sk, 1.0).unwrap();
        let p4 = pssmp_from_levy(&sk, 4.0).unwrap();
        assert_eq!(p1.times.len(), p4.times.len());
        for i in 0..p1.times.len() {
            assert_eq!(p4.times[i], 2.0 * p1.times[i]);
            assert_eq!(p4.values[i], 4.0 * p1.values[i]);
        }
        assert_eq!(p1.jumps.len(), p4.jumps.len());
        for (&(r1, s1), &(r4, s4)) in p1.jumps.iter().zip(&p4.jumps) {
            assert_eq!(r4, 2.0 * r1);
            assert_eq!(s4, 4.0 * s1);
        }
    }

    #[test]
    fn mass_path_validation_rejects_corruption() {
        let sk = sample_levy_path(Process::DriftOnly(-4.0), 8.0, 1e-3, 1e-3, stream(8)).unwrap();
        let mut p = pssmp_from_levy(&sk, 1.0).unwrap();
        p.values[3] = -p.values[3];
        assert!(matches!(p.validate(), Err(Error::Contract(_))));
    }

    // -- stable driver ------------------------------------------------------

    #[test]
    fn stable_increments_match_the_branching_exponent() {
        let mut rng = stream(9).rng();
        let n = 200_000usize;
        let draws: Vec<f64> =
            (0..n).map(|_| STABLE_UNIT_SCALE * stable_unit_increment(&mut rng)).collect();
        for lambda in [0.5f64, 1.0, 2.0] {
            let transformed: Vec<f64> = draws.iter().map(|&u| (-lambda * u).exp()).collect();
            let (mean, sd) = mean_and_sd(&transformed);
            let target = phi(lambda).exp();
            let se = sd / (n as f64).sqrt();
            assert!(
                (mean - target).abs() <= 3.0 * se,
                "lambda {lambda}: mean {mean:.4} vs exp(phi) {target:.4}, se {se:.4}"
            );
        }
    }

    #[test]
    fn stable_increments_are_positively_skewed() {
        let mut rng = stream(10).rng();
        let n = 100_000usize;
        let mut draws: Vec<f64> = (0..n).map(|_| stable_unit_increment(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        draws.sort_by(f64::total_cmp);
        let median = draws[n / 2];
        assert!(
            mean - median > 0.1,
            "positive-jump law should pull the mean above the median: {mean:.3} vs {median:.3}"
        );
    }

    #[test]
    fn stable_increment_scaling_is_exact_in_the_step() {
        let mut rng_a = stream(11).rng();
        let mut rng_b = stream(11).rng();
        let (da, db) = (4e-3f64, 1e-3f64);
        let (sa, sb) = (da.powf(2.0 / 3.0), db.powf(2.0 / 3.0));
        let ratio = 4f64.powf(2.0 / 3.0);
        for _ in 0..1000 {
            let a = sa * stable_unit_increment(&mut rng_a);
            let b = sb * stable_unit_increment(&mut rng_b);
            assert!((a - ratio * b).abs() <= 1e-13 * a.abs().max(1.0));
        }
    }

    #[test]
    fn stable_sums_are_stable_in_law() {
        // Four steps of length h sum to one step of length 4h in law; the
        // sampler realizes this exactly, so a two-sample test must accept.
        let mut rng = stream(12).rng();
        let h = 0.25f64;
        let n = 20_000usize;
        let scale_h = STABLE_UNIT_SCALE * h.powf(2.0 / 3.0);
        let sums: Vec<f64> = (0..n)
            .map(|_| (0..4).map(|_| scale_h * stable_unit_increment(&mut rng)).sum())
            .collect();
        let scale_4h = STABLE_UNIT_SCALE * (4.0 * h).powf(2.0 / 3.0);
        let singles: Vec<f64> =
            (0..n).map(|_| scale_4h * stable_unit_increment(&mut rng)).collect();
        let d = ks_two_sample(&sums, &singles);
        let crit = ks_two_sample_critical_1pct(n, n);
        assert!(d < crit, "KS {d:.4} vs 1% critical {crit:.4}");
    }

    #[test]
    fn stable_path_has_exact_grid_and_marker_process() {
        let sk = stable_spectrally_positive(1.0, 1e-3, stream(13)).unwrap();
        sk.validate().unwrap();
        assert_eq!(sk.times.len(), 1001);
        assert_eq!(sk.params.process, Process::StablePositive);
        assert!(sk.jumps.is_empty());
        assert_eq!(sk.values[0], 0.0);
    }

    #[test]
    fn process_sampler_rejects_the_stable_marker() {
        use crate::levy::ProcessSampler;
        assert!(matches!(
            ProcessSampler::new(Process::StablePositive, 1e-3),
            Err(Error::Contract(_))
        ));
    }

    // -- branching flow -----------------------------------------------------

    #[test]
    fn linear_driver_gives_exponential_decay() {
        // U(s) = x - s turns into Y_t = x exp(-t): mass shrinks forever but
        // never reaches zero in finite branching time.
        let sk = sample_levy_path(Process::DriftOnly(-1.0), 1.2, 1e-3, 1e-4, stream(14)).unwrap();
        let y = csbp_from_stable_with(&sk, 1.0, 1e-3, 6.0).unwrap();
        y.validate().unwrap();
        let mut worst = 0.0f64;
        for (&t, &v) in y.times.iter().zip(&y.values) {
            worst = worst.max((v - (-t).exp()).abs());
        }
        assert!(worst < 1e-8, "sup deviation from exp(-t) is {worst:.3e}");
        assert!((y.times.last().unwrap() - 6.0).abs() < 1e-9);
        assert!(
            y.extinction_time > 9.0,
            "the grid extinction bound should diverge like log(1/dt), got {}",
            y.extinction_time
        );
    }

    #[test]
    fn driver_that_never_reaches_zero_is_rejected() {
        let sk = sample_levy_path(Process::DriftOnly(0.0), 1.0, 1e-3, 1e-3, stream(15)).unwrap();
        assert!(matches!(csbp_from_stable(&sk, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn terminal_flow_matches_the_laplace_functional() {
        // E exp(-lambda Y_t) = exp(-x u_t(lambda)) with
        // u_t(lambda) = (lambda^(-1/2) + t sqrt(2/3))^(-2); frozen reference
        // at x = 1, t = 0.5, lambda = 1.
        let (x, t, lambda) = (1.0f64, 0.5f64, 1.0f64);
        let dt = 2e-3f64;
        let n = 3000usize;
        let base = stream(16);
        let mut censored = 0u32;
        let transformed: Vec<f64> = (0..n)
            .map(|i| {
                let mut rng = base.substream(i as u64).rng();
                let term = csbp_terminal_value(x, t, dt, 200.0, &mut rng);
                if term.censored {
                    censored += 1;
                    0.0
                } else {
                    (-lambda * term.value).exp()
                }
            })
            .collect();
        let (mean, sd) = mean_and_sd(&transformed);
        let se = sd / (n as f64).sqrt();
        let target = (-x * 0.504_244_923_464_074_512_865_303_6f64).exp();
        let budget = lambda * STABLE_UNIT_SCALE * dt.powf(2.0 / 3.0);
        assert!(
            (mean - target).abs() <= 3.0 * se + budget,
            "mean {mean:.5} vs target {target:.5} (se {se:.5}, grid budget {budget:.5})"
        );
        assert!(censored < (n / 100) as u32, "censoring should be rare, got {censored}");
    }

    // -- inverse time change ------------------------------------------------

    #[test]
    fn constant_flow_inverts_to_a_constant_driver() {
        let y = CsbpPath {
            times: vec![0.0, 1.0, 2.0],
            values: vec![2.0, 2.0, 2.0],
            extinction_time: f64::INFINITY,
            initial_value: 2.0,
        };
        let sk = csbp_inverse_timechange(&y).unwrap();
        assert_eq!(sk.times, vec![0.0, 2.0, 4.0]);
        assert_eq!(sk.values, vec![0.0, 0.0, 0.0]);
        assert!(sk.jumps.is_empty());
    }

    #[test]
    fn upward_jump_is_preserved_at_the_accumulated_driver_time() {
        let y = CsbpPath {
            times: vec![0.0, 0.5, 0.5, 1.0],
            values: vec![1.0, 1.0, 2.0, 2.0],
            extinction_time: f64::INFINITY,
            initial_value: 1.0,
        };
        let sk = csbp_inverse_timechange(&y).unwrap();
        sk.validate().unwrap();
        assert_eq!(sk.times, vec![0.0, 0.5, 0.5, 1.5]);
        assert_eq!(sk.values, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(sk.jumps, vec![(0.5, 1.0)]);
    }

    #[test]
    fn flow_and_inverse_round_trip_within_the_grid_tolerance() {
        // Find a driver realization that reaches zero within the horizon.
        let dt = 1e-3f64;
        let x = 1.0f64;
        let sk = (0..50)
            .map(|s| stable_spectrally_positive(5.0, dt, stream(100 + s)).unwrap())
            .find(|sk| sk.values.iter().any(|&v| x + v <= 0.0))
            .expect("no zero-reaching driver among 50 seeds");
        let y = csbp_from_stable_with(&sk, x, 1e-3, 8.0).unwrap();
        y.validate().unwrap();
        let back = csbp_inverse_timechange(&y).unwrap();
        back.validate().unwrap();

        // Compare the recovered driver level x + value against the original
        // skeleton, linearly interpolated at the recovered driver times.
        let lipschitz = sk
            .values
            .windows(2)
            .map(|w| (w[1] - w[0]).abs() / dt)
            .fold(0.0f64, f64::max);
        let tol = 10.0 * dt * lipschitz;
        let mut worst = 0.0f64;
        let mut seg = 0usize;
        for (&s, &v) in back.times.iter().zip(&back.values) {
            while seg + 2 < sk.times.len() && sk.times[seg + 1] < s {
                seg += 1;
            }
            let (t0, t1) = (sk.times[seg], sk.times[seg + 1]);
            let w = if t1 > t0 { ((s - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 0.0 };
            let u_ref = x + sk.values[seg] + w * (sk.values[seg + 1] - sk.values[seg]);
            worst = worst.max(((x + v) - u_ref).abs());
        }
        assert!(worst <= tol, "round-trip sup error {worst:.4} vs tolerance {tol:.4}");
    }
}
