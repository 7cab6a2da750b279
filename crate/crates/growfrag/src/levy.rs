//! Path and terminal-value samplers for the spectrally negative driving
//! processes, with controlled small-jump truncation error.
//!
//! Jumps of magnitude at least delta are simulated exactly as a compound
//! Poisson process (inverse-CDF tables over the truncated density); the
//! removed small jumps are replaced by their compensated mean drift plus a
//! Gaussian of matching variance. Everything is a pure function of its
//! inputs and an explicit [`RngStream`], so runs reproduce bit for bit.

use rand::{Rng, RngExt};
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::exponents::{effective_drift, LevyTriplet, TripletLabel, ALPHA, TAIL_CUT};
use crate::numeric::{integrate, QuadOptions};
use crate::rng::RngStream;
use crate::stats::{log_mean_with_ci, EstimateWithCI};

/// Default small-jump cutoff for path construction.
pub const DEFAULT_DELTA: f64 = 1e-4;
/// Default recording grid step for path construction.
pub const DEFAULT_DT: f64 = 1e-3;
/// Default small-jump cutoff for terminal-value Monte Carlo. Coarser than
/// the path default: the induced cumulant bias is O(delta^{3/2}), far below
/// the Monte Carlo standard errors at the replicate counts in use, and the
/// jump rate (hence cost per replicate) scales like delta^{-3/2}.
pub const DEFAULT_MGF_DELTA: f64 = 1e-3;
/// Largest expected number of retained jumps per path or replicate.
const MAX_EVENTS: f64 = 5e7;
/// Largest number of recording grid rows per path.
pub(crate) const MAX_GRID_ROWS: usize = 20_000_000;
/// Knot count of the inverse-CDF tables.
const KNOTS: usize = 4096;

fn panel_opts() -> QuadOptions {
    QuadOptions {
        abs_tol: 1e-18,
        rel_tol: 1e-12,
        max_intervals: 60,
    }
}

// ---------------------------------------------------------------------------
// Process selection
// ---------------------------------------------------------------------------

/// Which driving process to sample.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Process {
    /// Driver of the Eve cell mass (bounded jumps, one piece).
    Eve,
    /// Driver of the exit process (unbounded jumps, one piece).
    Circ,
    /// Conditioned Eve driver: superposition of its two jump pieces, with
    /// the whole drift carried by the tilted piece.
    Hat,
    /// Pure linear drift with no jump measure; the drift passes through
    /// without conversion. Used for calibration demos and exact tests.
    DriftOnly(f64),
    /// Spectrally positive stable driver of the branching flow. Sampled by
    /// its own exact-increment routine, not by the jump-diffusion
    /// approximation here; this variant only labels such skeletons.
    StablePositive,
}

impl Process {
    /// Jump pieces behind this process, in sampling order.
    pub fn piece_labels(self) -> &'static [TripletLabel] {
        match self {
            Process::Eve => &[TripletLabel::Eve],
            Process::Circ => &[TripletLabel::Circ],
            Process::Hat => &[TripletLabel::HatPieceTilted, TripletLabel::HatPieceLarge],
            Process::DriftOnly(_) => &[],
            Process::StablePositive => &[],
        }
    }
}

/// The two jump pieces of the conditioned Eve driver, as standalone
/// triplets: the exponentially tilted small-jump piece (which carries the
/// whole drift) and the large-jump piece (zero drift).
pub fn hat_triplet() -> Result<(LevyTriplet, LevyTriplet)> {
    Ok((
        LevyTriplet::new(TripletLabel::HatPieceTilted)?,
        LevyTriplet::new(TripletLabel::HatPieceLarge)?,
    ))
}

// ---------------------------------------------------------------------------
// One jump piece: truncated rate, small-jump moments, inverse CDF
// ---------------------------------------------------------------------------

/// Sampler for the retained jumps of one piece: total intensity, small-jump
/// Gaussian variance, compensator mean over the retained jumps, and a
/// monotone-cubic inverse-CDF table of the normalized jump law.
#[derive(Debug, Clone)]
pub struct PieceSampler {
    pub label: TripletLabel,
    pub delta: f64,
    /// Lower end of the retained-jump interval (support truncated at
    /// [`TAIL_CUT`] when unbounded).
    pub retained_lo: f64,
    /// Upper end of the retained-jump interval: -delta for pieces whose
    /// support reaches 0, the support edge otherwise.
    pub retained_hi: f64,
    /// Total intensity of retained jumps.
    pub rate: f64,
    /// Variance per unit time of the removed small jumps,
    /// int_{-delta}^0 y^2 density dy (zero if the support stays away from 0).
    pub sigma2: f64,
    /// Compensator mean over retained jumps,
    /// int y density dy over [max(retained_lo, -1), retained_hi].
    pub mean_compensated: f64,
    cdf_u: Vec<f64>,
    cdf_y: Vec<f64>,
    cdf_slope: Vec<f64>,
    /// For p in [j/G, (j+1)/G), the knot search starts at `guide[j]`;
    /// expected forward walk is below one step.
    guide: Vec<u32>,
}

/// Exponential coefficient a of the density written as
/// alpha e^{a y} (1-e^y)^{-5/2}.
fn density_tilt(label: TripletLabel) -> f64 {
    match label {
        TripletLabel::Eve => -1.5,
        TripletLabel::Circ => 0.5,
        TripletLabel::HatPieceTilted | TripletLabel::HatPieceLarge => 1.5,
    }
}

/// Variance of the removed small jumps, int_{-delta}^0 y^2 density dy,
/// computed with the substitution u = (1-e^y)^{1/2} that makes the
/// integrand smooth through y = 0.
fn small_jump_variance(label: TripletLabel, delta: f64) -> Result<f64> {
    let a = density_tilt(label);
    let u_delta = (-(-delta).exp_m1()).sqrt();
    let integrand = move |u: f64| {
        let ratio = if u * u < 1e-280 {
            1.0
        } else {
            let r = (-u * u).ln_1p() / (u * u);
            r * r
        };
        2.0 * ALPHA * ratio * (1.0 - u * u).powf(a - 1.0)
    };
    let opts = QuadOptions {
        abs_tol: 1e-16,
        rel_tol: 1e-12,
        max_intervals: 2000,
    };
    Ok(integrate(&integrand, 0.0, u_delta, &opts)?.value)
}

impl PieceSampler {
    /// Build the sampler for one piece at small-jump cutoff `delta`.
    pub fn new(label: TripletLabel, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 0.3) {
            return Err(Error::Domain {
                what: "small-jump cutoff delta must lie in (0, 0.3)",
                value: delta,
            });
        }
        let (lo, hi) = label.support();
        let retained_lo = lo.max(TAIL_CUT);
        let (retained_hi, sigma2) = if hi == 0.0 {
            (-delta, small_jump_variance(label, delta)?)
        } else {
            (hi, 0.0)
        };

        // Geometric knots in |y|: dense near the steep end at -delta.
        let n = KNOTS;
        let log_ratio = (retained_hi / retained_lo).ln();
        let mut knots: Vec<f64> = (0..n)
            .map(|k| retained_lo * (log_ratio * k as f64 / (n - 1) as f64).exp())
            .collect();
        knots[0] = retained_lo;
        knots[n - 1] = retained_hi;

        let opts = panel_opts();
        let mut masses = Vec::with_capacity(n - 1);
        for k in 0..n - 1 {
            let m = integrate(&|y| label.density(y), knots[k], knots[k + 1], &opts)?.value;
            if !(m > 0.0) {
                return Err(Error::Contract(format!(
                    "non-positive jump mass {m} on knot interval [{}, {}] of {label:?}",
                    knots[k],
                    knots[k + 1]
                )));
            }
            masses.push(m);
        }
        let rate: f64 = masses.iter().sum();

        let mut cdf_u = Vec::with_capacity(n);
        cdf_u.push(0.0);
        let mut acc = 0.0;
        for &m in &masses {
            acc += m;
            cdf_u.push(acc / rate);
        }
        cdf_u[n - 1] = 1.0;

        // Shape-preserving slopes dy/du at the knots.
        let h: Vec<f64> = (0..n - 1).map(|k| cdf_u[k + 1] - cdf_u[k]).collect();
        let d: Vec<f64> = (0..n - 1).map(|k| (knots[k + 1] - knots[k]) / h[k]).collect();
        let mut slope = vec![0.0; n];
        slope[0] = d[0];
        slope[n - 1] = d[n - 2];
        for k in 1..n - 1 {
            let (h0, h1, d0, d1) = (h[k - 1], h[k], d[k - 1], d[k]);
            slope[k] = if d0 * d1 <= 0.0 {
                0.0
            } else {
                3.0 * (h0 + h1) / ((2.0 * h1 + h0) / d0 + (h1 + 2.0 * h0) / d1)
            };
        }

        let guide: Vec<u32> = (0..KNOTS)
            .map(|j| {
                let level = j as f64 / KNOTS as f64;
                (cdf_u.partition_point(|&v| v <= level) - 1) as u32
            })
            .collect();

        // Compensator mean over the retained, compensated region
        // [max(retained_lo, -1), retained_hi], accumulated over the same
        // knot intervals (clipped at -1 where the compensator switches off).
        let comp_lo = retained_lo.max(-1.0);
        let mut mean_compensated = 0.0;
        for k in 0..n - 1 {
            if knots[k + 1] <= comp_lo {
                continue;
            }
            let a = knots[k].max(comp_lo);
            mean_compensated += integrate(&|y| y * label.density(y), a, knots[k + 1], &opts)?.value;
        }

        Ok(Self {
            label,
            delta,
            retained_lo,
            retained_hi,
            rate,
            sigma2,
            mean_compensated,
            cdf_u,
            cdf_y: knots,
            cdf_slope: slope,
            guide,
        })
    }

    /// Jump size at probability level `p` of the normalized retained-jump
    /// law (monotone cubic interpolation of the inverse CDF).
    pub fn quantile(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return self.cdf_y[0];
        }
        if p >= 1.0 {
            return *self.cdf_y.last().unwrap();
        }
        let j = ((p * KNOTS as f64) as usize).min(KNOTS - 1);
        let mut k = self.guide[j] as usize;
        while self.cdf_u[k + 1] <= p {
            k += 1;
        }
        let h = self.cdf_u[k + 1] - self.cdf_u[k];
        let t = (p - self.cdf_u[k]) / h;
        let (y0, y1) = (self.cdf_y[k], self.cdf_y[k + 1]);
        let (m0, m1) = (self.cdf_slope[k] * h, self.cdf_slope[k + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        y0 * (2.0 * t3 - 3.0 * t2 + 1.0)
            + m0 * (t3 - 2.0 * t2 + t)
            + y1 * (3.0 * t2 - 2.0 * t3)
            + m1 * (t3 - t2)
    }
}

// ---------------------------------------------------------------------------
// Whole-process sampler
// ---------------------------------------------------------------------------

/// Sampler for one driving process at a fixed small-jump cutoff: the
/// simulation drift (internal drift minus retained compensator means), the
/// pooled Gaussian variance, and the per-piece jump samplers.
#[derive(Debug, Clone)]
pub struct ProcessSampler {
    pub process: Process,
    pub delta: f64,
    /// Linear drift of the simulated path between jumps.
    pub drift_sim: f64,
    /// Pooled small-jump Gaussian variance per unit time.
    pub sigma2: f64,
    /// Pooled retained-jump intensity.
    pub total_rate: f64,
    pieces: Vec<PieceSampler>,
}

/// Terminal state of one replicate: the value at the horizon, how many
/// retained jumps occurred, and the most negative jump size (0 if none).
#[derive(Debug, Clone, Copy)]
pub struct TerminalSample {
    pub value: f64,
    pub jump_count: u64,
    pub min_jump: f64,
}

pub(crate) fn poisson_count<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let draw: f64 = Poisson::new(lambda)
        .expect("positive finite Poisson intensity")
        .sample(rng);
    draw as u64
}

impl ProcessSampler {
    /// Build the sampler for `process` at small-jump cutoff `delta`.
    pub fn new(process: Process, delta: f64) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut drift_sim = match process {
            Process::DriftOnly(c) => c,
            Process::StablePositive => {
                return Err(Error::Contract(
                    "the spectrally positive stable driver has exact increments; \
                     sample it with stable_spectrally_positive, not the \
                     jump-diffusion approximation"
                        .into(),
                ));
            }
            _ => 0.0,
        };
        let mut sigma2 = 0.0;
        let mut total_rate = 0.0;
        for &label in process.piece_labels() {
            let piece = PieceSampler::new(label, delta)?;
            drift_sim += effective_drift(label)? - piece.mean_compensated;
            sigma2 += piece.sigma2;
            total_rate += piece.rate;
            pieces.push(piece);
        }
        Ok(Self {
            process,
            delta,
            drift_sim,
            sigma2,
            total_rate,
            pieces,
        })
    }

    pub fn pieces(&self) -> &[PieceSampler] {
        &self.pieces
    }

    /// Reject horizons whose expected retained-jump count exceeds the cap.
    fn check_budget(&self, horizon: f64) -> Result<()> {
        if self.total_rate * horizon > MAX_EVENTS {
            return Err(Error::RateOverflow {
                rate: self.total_rate,
                cap: MAX_EVENTS / horizon,
            });
        }
        Ok(())
    }

    /// Terminal value at time `t` in one draw, without building a path:
    /// drift plus one pooled Gaussian plus per-piece Poisson jump sums.
    /// Identical in law to the terminal value of [`ProcessSampler::path`].
    pub fn terminal<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> TerminalSample {
        assert!(t > 0.0);
        let mut value = self.drift_sim * t;
        if self.sigma2 > 0.0 {
            let g: f64 = StandardNormal.sample(rng);
            value += (self.sigma2 * t).sqrt() * g;
        }
        let mut jump_count = 0u64;
        let mut min_jump = 0.0f64;
        for piece in &self.pieces {
            let n = poisson_count(piece.rate * t, rng);
            for _ in 0..n {
                let y = piece.quantile(rng.random::<f64>());
                value += y;
                if y < min_jump {
                    min_jump = y;
                }
            }
            jump_count += n;
        }
        TerminalSample {
            value,
            jump_count,
            min_jump,
        }
    }

    /// Sample one discretized path on `[0, horizon]`: retained jumps in
    /// continuous time, drift and Gaussian small-jump correction advanced
    /// between events, values recorded on the `dt` grid and at both sides
    /// of every jump.
    pub fn path(&self, horizon: f64, dt: f64, stream: RngStream) -> Result<LevyPathSkeleton> {
        assert!(horizon > 0.0 && dt > 0.0);
        self.check_budget(horizon)?;
        let n_steps = (horizon / dt).ceil() as usize;
        if n_steps > MAX_GRID_ROWS {
            return Err(Error::ResourceLimit(format!(
                "recording grid would hold {n_steps} rows (cap {MAX_GRID_ROWS}); raise dt"
            )));
        }
        let mut rng = stream.rng();

        // Jump events: per piece, a Poisson count, then times, then sizes.
        let mut events: Vec<(f64, f64)> = Vec::new();
        for piece in &self.pieces {
            let n = poisson_count(piece.rate * horizon, &mut rng);
            let times: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * horizon).collect();
            let sizes: Vec<f64> = (0..n).map(|_| piece.quantile(rng.random::<f64>())).collect();
            events.extend(times.into_iter().zip(sizes));
        }
        events.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());

        let mut grid = Vec::with_capacity(n_steps + 1);
        let mut k = 1usize;
        loop {
            let t = k as f64 * dt;
            if t >= horizon * (1.0 - 1e-12) {
                break;
            }
            grid.push(t);
            k += 1;
        }
        grid.push(horizon);

        let capacity = grid.len() + 2 * events.len() + 1;
        let mut times = Vec::with_capacity(capacity);
        let mut values = Vec::with_capacity(capacity);
        let mut is_jump = Vec::with_capacity(capacity);
        let mut jumps = Vec::with_capacity(events.len());
        times.push(0.0);
        values.push(0.0);
        is_jump.push(false);

        let sigma = self.sigma2.sqrt();
        let mut t_cur = 0.0f64;
        let mut v_cur = 0.0f64;
        let (mut gi, mut ei) = (0usize, 0usize);
        while gi < grid.len() || ei < events.len() {
            let next_grid = grid.get(gi).copied().unwrap_or(f64::INFINITY);
            let next_event = events.get(ei).map(|e| e.0).unwrap_or(f64::INFINITY);
            let target = next_event.min(next_grid);
            let gap = target - t_cur;
            if gap > 0.0 {
                v_cur += self.drift_sim * gap;
                if sigma > 0.0 {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    v_cur += sigma * gap.sqrt() * g;
                }
                t_cur = target;
            }
            if next_event <= next_grid {
                let (tj, size) = events[ei];
                ei += 1;
                times.push(tj);
                values.push(v_cur);
                is_jump.push(false);
                v_cur += size;
                times.push(tj);
                values.push(v_cur);
                is_jump.push(true);
                jumps.push((tj, size));
            } else {
                gi += 1;
                times.push(target);
                values.push(v_cur);
                is_jump.push(false);
            }
        }

        Ok(LevyPathSkeleton {
            times,
            values,
            is_jump,
            jumps,
            params: PathParams {
                process: self.process,
                delta: self.delta,
                dt,
                horizon,
                seed: stream,
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Path skeletons
// ---------------------------------------------------------------------------

/// Inputs that produced a path skeleton.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PathParams {
    pub process: Process,
    pub delta: f64,
    pub dt: f64,
    pub horizon: f64,
    pub seed: RngStream,
}

/// Discretized path: values on the recording grid plus a pre/post pair of
/// rows at every retained jump, and the jump list itself.
#[derive(Debug, Clone)]
pub struct LevyPathSkeleton {
    /// Nondecreasing, starting at 0; jump times appear twice.
    pub times: Vec<f64>,
    /// Path values at `times`; starts at 0.
    pub values: Vec<f64>,
    /// Marks the post-jump row of each jump-time pair.
    pub is_jump: Vec<bool>,
    /// (time, size) of every retained jump, in time order. The
    /// growth-fragmentation drivers only produce negative sizes; skeletons
    /// built by the inverse branching time change may carry positive ones.
    pub jumps: Vec<(f64, f64)>,
    pub params: PathParams,
}

impl LevyPathSkeleton {
    pub fn terminal_value(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Check the structural contract: aligned lengths, nondecreasing times,
    /// zero start, and an exact pre/post row pair for every recorded jump.
    pub fn validate(&self) -> Result<()> {
        let contract = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Contract(msg.to_string()))
            }
        };
        contract(!self.times.is_empty(), "empty skeleton")?;
        contract(
            self.times.len() == self.values.len() && self.times.len() == self.is_jump.len(),
            "misaligned skeleton columns",
        )?;
        contract(self.times[0] == 0.0 && self.values[0] == 0.0, "path must start at (0, 0)")?;
        contract(
            self.times.windows(2).all(|w| w[0] <= w[1]),
            "times must be nondecreasing",
        )?;
        let post_rows: Vec<usize> = (0..self.times.len()).filter(|&i| self.is_jump[i]).collect();
        contract(
            post_rows.len() == self.jumps.len(),
            "one post-jump row per recorded jump",
        )?;
        for (&row, &(t, size)) in post_rows.iter().zip(&self.jumps) {
            contract(row > 0, "post-jump row cannot be first")?;
            contract(
                self.times[row] == t && self.times[row - 1] == t,
                "jump time must appear as a pre/post row pair",
            )?;
            contract(size != 0.0 && size.is_finite(), "jump sizes must be nonzero and finite")?;
            contract(
                self.values[row] == self.values[row - 1] + size,
                "value decrement across a jump must equal the recorded size",
            )?;
        }
        Ok(())
    }
}

/// Write a skeleton as CSV with columns `time,value,is_jump` (`is_jump` = 1
/// on the post-jump row of each jump-time pair). Values print in shortest
/// round-trip decimal form.
pub fn write_path_csv<W: std::io::Write>(path: &LevyPathSkeleton, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "time,value,is_jump")?;
    for i in 0..path.times.len() {
        writeln!(
            out,
            "{},{},{}",
            path.times[i],
            path.values[i],
            u8::from(path.is_jump[i])
        )?;
    }
    Ok(())
}

/// Sample one path of `process` (convenience wrapper that builds the
/// sampler and draws a single skeleton).
pub fn sample_levy_path(
    process: Process,
    horizon: f64,
    delta: f64,
    dt: f64,
    stream: RngStream,
) -> Result<LevyPathSkeleton> {
    ProcessSampler::new(process, delta)?.path(horizon, dt, stream)
}

// ---------------------------------------------------------------------------
// Terminal-value Monte Carlo
// ---------------------------------------------------------------------------

/// Draw `n` independent terminal samples at horizon `t`, one derived stream
/// per replicate.
pub fn terminal_samples(
    sampler: &ProcessSampler,
    t: f64,
    n: u64,
    stream: RngStream,
) -> Result<Vec<TerminalSample>> {
    sampler.check_budget(t)?;
    Ok((0..n)
        .map(|i| {
            let mut rng = stream.substream(i).rng();
            sampler.terminal(t, &mut rng)
        })
        .collect())
}

/// Estimate log E[e^{lambda xi(t)}] for several lambda values at once,
/// sharing one set of terminal samples across the battery. Each estimate
/// carries a delta-method standard error.
pub fn mgf_mc_battery(
    process: Process,
    lambdas: &[f64],
    t: f64,
    n: u64,
    delta: f64,
    stream: RngStream,
) -> Result<Vec<EstimateWithCI>> {
    assert!(n >= 2);
    let sampler = ProcessSampler::new(process, delta)?;
    let terminals = terminal_samples(&sampler, t, n, stream)?;
    let mut estimates = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let weights: Vec<f64> = terminals.iter().map(|s| (lambda * s.value).exp()).collect();
        estimates.push(log_mean_with_ci(&weights, stream));
    }
    Ok(estimates)
}

/// Estimate log E[e^{lambda xi(t)}] by terminal-value Monte Carlo at the
/// documented default cutoff [`DEFAULT_MGF_DELTA`].
pub fn mgf_mc(
    process: Process,
    lambda: f64,
    t: f64,
    n: u64,
    stream: RngStream,
) -> Result<EstimateWithCI> {
    Ok(mgf_mc_battery(process, &[lambda], t, n, DEFAULT_MGF_DELTA, stream)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exponents::{psi_eve, psi_hat};
    use std::f64::consts::LN_2;

    fn stream(tag: u64) -> RngStream {
        RngStream::root(0x5EED).substream(tag)
    }

    // -- piece samplers against frozen reference values --------------------

    #[test]
    fn eve_rates_match_reference_values() {
        for (delta, want) in [
            (0.01, 498.1535878065686308321413),
            (0.001, 14687.33199325756904163931),
            (0.0001, 461038.8587083031502472165),
        ] {
            let piece = PieceSampler::new(TripletLabel::Eve, delta).unwrap();
            assert!(
                ((piece.rate - want) / want).abs() < 1e-9,
                "rate({delta}) = {}, want {want}",
                piece.rate
            );
        }
    }

    #[test]
    fn eve_small_jump_variances_match_reference_values() {
        for (delta, want) in [
            (0.01, 0.1394746980388289641850685),
            (0.001, 0.04374202949179878008424756),
            (0.0001, 0.01382103289237395418190001),
        ] {
            let piece = PieceSampler::new(TripletLabel::Eve, delta).unwrap();
            assert!(
                ((piece.sigma2 - want) / want).abs() < 1e-10,
                "sigma2({delta}) = {}, want {want}",
                piece.sigma2
            );
        }
    }

    #[test]
    fn circ_rates_and_variances_match_reference_values() {
        for (delta, rate_want, sig2_want) in [
            (0.001, 14600.08112204132624710762, 0.04371286425571720478214345),
            (0.002, 5173.48820165057586013189, 0.06183478301486786786739828),
        ] {
            let piece = PieceSampler::new(TripletLabel::Circ, delta).unwrap();
            assert!(
                ((piece.rate - rate_want) / rate_want).abs() < 1e-10,
                "rate({delta}) = {}, want {rate_want}",
                piece.rate
            );
            assert!(((piece.sigma2 - sig2_want) / sig2_want).abs() < 1e-10);
        }
    }

    #[test]
    fn hat_pieces_combine_to_reference_rate() {
        for (delta, rate_want, sig2_want) in [
            (0.001, 14556.39010984660668947173, 0.04369829475840761036787728),
            (0.002, 5142.60171516857720587563, 0.06179356807475297457999289),
        ] {
            let tilted = PieceSampler::new(TripletLabel::HatPieceTilted, delta).unwrap();
            let large = PieceSampler::new(TripletLabel::HatPieceLarge, delta).unwrap();
            let rate = tilted.rate + large.rate;
            assert!(
                ((rate - rate_want) / rate_want).abs() < 1e-10,
                "combined rate({delta}) = {rate}, want {rate_want}"
            );
            assert!(((tilted.sigma2 - sig2_want) / sig2_want).abs() < 1e-10);
            assert_eq!(large.sigma2, 0.0);
        }
    }

    #[test]
    fn hat_large_piece_mass_and_support() {
        let large = PieceSampler::new(TripletLabel::HatPieceLarge, 0.001).unwrap();
        let want = 0.4606588659617806390203262;
        assert!(((large.rate - want) / want).abs() < 1e-10);
        assert_eq!(large.retained_hi, -LN_2);
        assert_eq!(large.retained_lo, TAIL_CUT);
        assert_eq!(large.quantile(0.0), TAIL_CUT);
        assert_eq!(large.quantile(1.0), -LN_2);
    }

    #[test]
    fn eve_retained_compensator_mean_matches_reference() {
        let piece = PieceSampler::new(TripletLabel::Eve, 0.001).unwrap();
        let want = -46.56035787827124867347336;
        assert!(
            ((piece.mean_compensated - want) / want).abs() < 1e-10,
            "mean = {}",
            piece.mean_compensated
        );
    }

    #[test]
    fn quantile_is_monotone_and_in_range() {
        for label in [TripletLabel::Eve, TripletLabel::Circ, TripletLabel::HatPieceLarge] {
            let piece = PieceSampler::new(label, 0.002).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for k in 0..=2048 {
                let y = piece.quantile(k as f64 / 2048.0);
                assert!(y >= prev, "{label:?}: quantile not monotone at {k}");
                assert!(y >= piece.retained_lo && y <= piece.retained_hi);
                prev = y;
            }
        }
    }

    #[test]
    fn inverse_cdf_round_trip() {
        let opts = QuadOptions {
            abs_tol: 1e-15,
            rel_tol: 1e-11,
            max_intervals: 4000,
        };
        for label in [TripletLabel::Eve, TripletLabel::Circ] {
            let piece = PieceSampler::new(label, 0.001).unwrap();
            for &p in &[1e-4, 0.05, 0.3, 0.5, 0.7, 0.9, 0.999] {
                let y = piece.quantile(p);
                let mass = integrate(&|t| label.density(t), piece.retained_lo, y, &opts)
                    .unwrap()
                    .value;
                let p_back = mass / piece.rate;
                assert!(
                    (p_back - p).abs() < 1e-5,
                    "{label:?}: quantile({p}) round-trips to {p_back}"
                );
            }
        }
    }

    #[test]
    fn rejects_out_of_range_delta() {
        assert!(PieceSampler::new(TripletLabel::Eve, 0.0).is_err());
        assert!(PieceSampler::new(TripletLabel::Eve, 0.5).is_err());
    }

    // -- hat triplet -------------------------------------------------------

    #[test]
    fn hat_triplet_pieces() {
        let (tilted, large) = hat_triplet().unwrap();
        assert_eq!(tilted.label, TripletLabel::HatPieceTilted);
        assert_eq!(large.label, TripletLabel::HatPieceLarge);
        assert!((tilted.drift - 1.754159551741807822495254).abs() < 1e-10);
        assert_eq!(large.drift, 0.0);
        assert_eq!(large.support(), (f64::NEG_INFINITY, -LN_2));
    }

    // -- drift-only exact behaviour ----------------------------------------

    #[test]
    fn drift_only_terminal_is_exact() {
        let sampler = ProcessSampler::new(Process::DriftOnly(-1.0), 0.001).unwrap();
        let mut rng = stream(1).rng();
        let s = sampler.terminal(2.0, &mut rng);
        assert_eq!(s.value, -2.0);
        assert_eq!(s.jump_count, 0);
        assert_eq!(s.min_jump, 0.0);
    }

    #[test]
    fn drift_only_path_is_a_straight_line() {
        let sk = sample_levy_path(Process::DriftOnly(-1.0), 1.0, 0.001, 1e-3, stream(2)).unwrap();
        sk.validate().unwrap();
        assert!(sk.jumps.is_empty());
        assert_eq!(sk.times.len(), 1001);
        for (&t, &v) in sk.times.iter().zip(&sk.values) {
            assert!((v - -t).abs() < 1e-12, "value at {t} is {v}");
        }
        assert!((sk.terminal_value() - -1.0).abs() < 1e-12);
    }

    #[test]
    fn drift_only_mgf_is_exact_with_zero_variance() {
        let est = mgf_mc(Process::DriftOnly(-1.0), 1.0, 2.0, 100, stream(3)).unwrap();
        assert!((est.point - -2.0).abs() < 1e-12);
        // All replicates are identical; the only "spread" is mean-rounding
        // noise at the last bit.
        assert!(est.stderr < 1e-15, "stderr = {}", est.stderr);
        assert_eq!(est.n, 100);
    }

    // -- path structure ----------------------------------------------------

    #[test]
    fn eve_path_jumps_stay_in_support() {
        let sk = sample_levy_path(Process::Eve, 0.02, 0.001, 1e-3, stream(4)).unwrap();
        sk.validate().unwrap();
        assert!(!sk.jumps.is_empty(), "expected jumps at this rate and horizon");
        for &(_, size) in &sk.jumps {
            assert!(size > -LN_2, "jump {size} at or below -log 2");
            assert!(size <= -0.001 * (1.0 - 1e-9), "jump {size} above the cutoff");
            assert!(size.exp() > 0.5);
        }
    }

    #[test]
    fn skeleton_is_bit_reproducible() {
        let a = sample_levy_path(Process::Circ, 0.05, 0.002, 1e-2, stream(5)).unwrap();
        let b = sample_levy_path(Process::Circ, 0.05, 0.002, 1e-2, stream(5)).unwrap();
        assert_eq!(a.times, b.times);
        assert_eq!(a.values, b.values);
        assert_eq!(a.jumps, b.jumps);
        let c = sample_levy_path(Process::Circ, 0.05, 0.002, 1e-2, stream(6)).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn path_params_echo_inputs() {
        let sk = sample_levy_path(Process::Hat, 0.01, 0.002, 1e-3, stream(7)).unwrap();
        assert_eq!(sk.params.process, Process::Hat);
        assert_eq!(sk.params.delta, 0.002);
        assert_eq!(sk.params.dt, 1e-3);
        assert_eq!(sk.params.horizon, 0.01);
        assert_eq!(sk.params.seed, stream(7));
    }

    #[test]
    fn rate_overflow_is_signalled() {
        let err = sample_levy_path(Process::Eve, 1000.0, 1e-4, 1.0, stream(8)).unwrap_err();
        match err {
            Error::RateOverflow { rate, cap } => {
                assert!(rate > 4e5 && rate < 5e5, "rate = {rate}");
                assert!(cap > 0.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn terminal_jump_bookkeeping_is_consistent() {
        let sampler = ProcessSampler::new(Process::Circ, 0.002).unwrap();
        let mut rng = stream(9).rng();
        for _ in 0..20 {
            let s = sampler.terminal(0.01, &mut rng);
            if s.jump_count == 0 {
                assert_eq!(s.min_jump, 0.0);
            } else {
                assert!(s.min_jump < 0.0);
            }
        }
    }

    #[test]
    fn csv_writer_emits_one_row_per_entry() {
        let sk = sample_levy_path(Process::Eve, 0.01, 0.002, 1e-3, stream(10)).unwrap();
        let mut buf = Vec::new();
        write_path_csv(&sk, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "time,value,is_jump");
        assert_eq!(lines.len(), 1 + sk.times.len());
        let jump_rows = lines[1..].iter().filter(|l| l.ends_with(",1")).count();
        assert_eq!(jump_rows, sk.jumps.len());
        assert!(lines[1].starts_with("0,0,"));
    }

    // -- moment-generating-function gates (seeded smoke versions) ----------

    #[test]
    fn eve_mgf_matches_exponent_within_three_se() {
        let t = 0.5;
        let est = mgf_mc_battery(Process::Eve, &[2.0], t, 20_000, 0.002, stream(11)).unwrap()[0];
        let target = t * psi_eve(2.0).unwrap();
        assert!(
            est.within_z(target, 3.0),
            "estimate {} +- {} vs target {target}",
            est.point,
            est.stderr
        );
        assert!(est.stderr < 0.05);
    }

    #[test]
    fn circ_mgf_brackets_zero_at_the_root() {
        let est = mgf_mc_battery(Process::Circ, &[1.0], 0.5, 20_000, 0.002, stream(12)).unwrap()[0];
        assert!(
            est.within_z(0.0, 3.0),
            "estimate {} +- {} should bracket 0",
            est.point,
            est.stderr
        );
    }

    #[test]
    fn hat_mgf_matches_exponent_within_three_se() {
        let t = 0.5;
        let est = mgf_mc_battery(Process::Hat, &[1.0], t, 20_000, 0.002, stream(13)).unwrap()[0];
        let target = t * psi_hat(1.0).unwrap();
        assert!(
            est.within_z(target, 3.0),
            "estimate {} +- {} vs target {target}",
            est.point,
            est.stderr
        );
    }

    #[test]
    fn mgf_is_cauchy_in_delta() {
        // Halving the small-jump cutoff moves the estimate by less than the
        // combined confidence widths.
        let a = mgf_mc_battery(Process::Eve, &[1.0], 0.5, 10_000, 0.002, stream(14)).unwrap()[0];
        let b = mgf_mc_battery(Process::Eve, &[1.0], 0.5, 10_000, 0.001, stream(15)).unwrap()[0];
        assert!(
            (a.point - b.point).abs() < 3.0 * (a.stderr + b.stderr),
            "delta = 2e-3 gives {}, delta = 1e-3 gives {} (se {} / {})",
            a.point,
            b.point,
            a.stderr,
            b.stderr
        );
    }

    #[test]
    fn martingale_normalization_holds_at_short_horizon() {
        // Indicator of no jump at or below -log 2 times e^{-2 value} has
        // unit mean under the exit-process driver.
        let sampler = ProcessSampler::new(Process::Circ, 0.002).unwrap();
        let terms = terminal_samples(&sampler, 0.3, 10_000, stream(16)).unwrap();
        let weights: Vec<f64> = terms
            .iter()
            .map(|s| {
                if s.min_jump > -LN_2 {
                    (-2.0 * s.value).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let est = crate::stats::mean_with_ci(&weights, stream(16));
        assert!(
            est.within_z(1.0, 3.0),
            "martingale mean {} +- {}",
            est.point,
            est.stderr
        );
    }
}
