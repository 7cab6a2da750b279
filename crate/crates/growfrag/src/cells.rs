//! Cell-system simulator for the growth-fragmentation process.
//!
//! An Eve cell of mass `z` evolves as the Lamperti mass process of its
//! driver. Every resolved negative jump of the driver splits off a child
//! cell whose mass is exactly the parent's mass decrement; children above
//! the configured mass floor are simulated recursively with the standard
//! (locally largest) driver, smaller ones are recorded as pruned leaves
//! that carry their birth mass as a truncation bound.
//!
//! The walk is event driven and works directly in the cell's level clock:
//!
//! * Jumps are simulated exactly in driver time from the inverse-CDF piece
//!   samplers; between events the driver advances by its simulation drift
//!   plus the matched small-jump Gaussian on a short knot grid.
//! * The small-jump cutoff is chosen per cell from a shared ladder of
//!   samplers so that every child above the mass floor corresponds to a
//!   resolved jump: a cell of mass `m` needs cutoff `<= -ln(1 - floor/m)`,
//!   which makes near-floor cells nearly free and keeps whole-tree cost
//!   proportional to `floor^(-3/2)`.
//! * Level spans, integrated norms `int m(r)^q dr`, and level inversion use
//!   the per-segment closed forms of the mass map, so no output grid is
//!   needed during simulation.
//!
//! Truncation accounting: pruned leaves, the kill remainder of each dead
//! cell (the walk stops once the mass falls below `KILL_FRACTION` times the
//! floor), and the sub-resolution spawn flux are all converted into an
//! expected lost norm through the subtree identity
//! `E int ||subtree of mass m||_q dr = -m^(q+1/2) / kappa(q+1/2)`,
//! valid on the window `2 < q+1/2 < 3`, and reported next to every norm.

use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponents::{kappa_closed, psi_eve, ALPHA};
use crate::lamperti::{exprel, PssmpPath};
use crate::levy::{poisson_count, PieceSampler, Process, ProcessSampler};
use crate::numeric::{integrate, QuadOptions};
use crate::rng::RngStream;
use crate::stats::{gamma_3_2_cdf, ks_critical_1pct, ks_one_sample, mean_with_ci, EstimateWithCI};

/// Default entrance mass for the conditioned Eve (the conditioned process
/// starts from 0 in the limit; this finite seed is extrapolated by the
/// halving diagnostic).
pub const DEFAULT_ENTRANCE_MASS: f64 = 1e-4;

/// Default cap on the total number of recorded cells (simulated plus
/// pruned) per tree.
pub const DEFAULT_MAX_CELLS: usize = 400_000;

/// A cell is declared dead once its mass falls below this fraction of the
/// mass floor; the remaining level span is bounded by
/// `sqrt(kill mass) * E int exp(xi/2)` and reported as `death_resolution`.
pub const KILL_FRACTION: f64 = 0.1;

/// Cutoff of the standalone conditioned-marginal sampler ([`hat_marginal`]).
/// The induced distributional error is O(delta^(3/2)) per unit driver time,
/// far below the 1% KS resolution of a 10^4-sample test.
pub const DEFAULT_MARGINAL_DELTA: f64 = 5e-3;

/// Finest small-jump cutoff on the shared sampler ladder; rung `k` uses
/// `LADDER_BASE * 2^k`.
const LADDER_BASE: f64 = 2.5e-4;
/// Number of ladder rungs; the top rung is `2.5e-4 * 2^10 = 0.256`.
const LADDER_RUNGS: usize = 11;
/// The conditioned driver never runs coarser than rung 4 (cutoff 4e-3):
/// its marginal law feeds a distributional gate, so the cutoff bias must
/// stay negligible even though spawning would tolerate a coarser rung.
const CONDITIONED_RUNG_CAP: usize = 4;

/// Driver-time window between rung reassessments.
const WINDOW: f64 = 1.0;
/// Safety margin on the spawn threshold: the rung is chosen as if the mass
/// were this much larger, so the threshold stays valid while the mass
/// drifts within one knot of Gaussian motion. The window is restarted
/// whenever the drifting mass calls for a finer rung (correctness) or a
/// rung at least two steps coarser (so decaying cells stop resolving
/// far-below-floor jumps).
const MASS_MARGIN: f64 = 1.5;
/// Knot spacing of the between-event grid for fine rungs (cutoff <= 0.02).
/// The linear-segment treatment of the Gaussian between knots biases the
/// level clock by about `sigma^2 * knot / 8` per driver unit.
const KNOT_FINE: f64 = 0.02;
/// Knot spacing for coarse rungs (larger Gaussian variance but tolerances
/// on near-floor cells are loose).
const KNOT_COARSE: f64 = 0.05;
/// Cap on expected events drawn per window; windows shrink below
/// [`WINDOW`] when a rung's rate would exceed it.
const EVENTS_PER_WINDOW: f64 = 20_000.0;
/// Runaway guards.
const MAX_WINDOWS: usize = 200_000;
const MAX_TREE_EVENTS: u64 = 50_000_000;

// ---------------------------------------------------------------------------
// Configuration and tree types
// ---------------------------------------------------------------------------

/// Which law drives the Eve cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EveKind {
    /// Locally largest evolution started from mass `z`.
    Standard,
    /// Conditioned (tilted) evolution started from the entrance mass and
    /// never absorbed; its children follow the standard law.
    Conditioned,
}

/// Full description of one growth-fragmentation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GfConfig {
    /// Initial mass of the Eve cell; the entrance mass for the conditioned
    /// variant (which may lie below the mass floor).
    pub z: f64,
    /// Level horizon `R`: simulation and queries stop here.
    pub horizon: f64,
    /// Children at or below this mass become pruned leaves.
    pub mass_floor: f64,
    pub eve_kind: EveKind,
    pub master_seed: u64,
    /// Cap on recorded cells (simulated plus pruned).
    #[serde(default = "default_max_cells")]
    pub max_cells: usize,
    /// Exponents `q` of the integrated norms `int sum_i m_i(r)^q dr`
    /// accumulated in closed form during the walk. Each must satisfy
    /// `2 < q + 1/2 < 3` so the truncation bias has a finite subtree value.
    #[serde(default)]
    pub norm_exponents: Vec<f64>,
    /// Optional variance-reduction stop for norm summaries: a standard-driver
    /// cell whose mass reaches this ceiling is stopped and its whole subtree
    /// replaced by the exact conditional expectation of its remaining norm
    /// integrals, `-m^{q+1/2} / kappa(q+1/2)`. The estimate stays unbiased
    /// while the heavy upper tail of the per-tree integral (driven by rare
    /// cells growing far above `z`) is capped. Summary mode only: `tree`
    /// rejects a config with a ceiling because cells frozen at the ceiling
    /// would make level queries above the stop meaningless. The conditioned
    /// root, which must grow without bound, ignores the ceiling.
    #[serde(default)]
    pub mass_ceiling: Option<f64>,
    /// Levels at which to audit squared-mass conservation. For the
    /// standard cascade, the expected total of `sum_i m_i(r)^2` over live
    /// cells plus the frozen squares of every stopped subtree (pruned
    /// children, kill remainders, sub-resolution spawns, ceiling and
    /// budget stops) equals `z^2` at every level, with no analytic
    /// constants involved; per-replicate totals land in
    /// [`GfSummary::probe_mass_sq`]. Deviations localize simulation bias
    /// by level.
    #[serde(default)]
    pub probe_levels: Vec<f64>,
}

fn default_max_cells() -> usize {
    DEFAULT_MAX_CELLS
}

impl GfConfig {
    /// Standard run from initial mass `z`.
    pub fn standard(z: f64, horizon: f64, mass_floor: f64, master_seed: u64) -> Self {
        Self {
            z,
            horizon,
            mass_floor,
            eve_kind: EveKind::Standard,
            master_seed,
            max_cells: DEFAULT_MAX_CELLS,
            norm_exponents: Vec::new(),
            mass_ceiling: None,
            probe_levels: Vec::new(),
        }
    }

    /// Conditioned run from the default entrance mass.
    pub fn conditioned(horizon: f64, mass_floor: f64, master_seed: u64) -> Self {
        Self {
            z: DEFAULT_ENTRANCE_MASS,
            horizon,
            mass_floor,
            eve_kind: EveKind::Conditioned,
            master_seed,
            max_cells: DEFAULT_MAX_CELLS,
            norm_exponents: Vec::new(),
            mass_ceiling: None,
            probe_levels: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let finite_pos = |what: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Domain { what, value: v })
            }
        };
        finite_pos("initial mass must be positive and finite", self.z)?;
        finite_pos("mass floor must be positive and finite", self.mass_floor)?;
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(Error::Domain {
                what: "level horizon must be nonnegative and finite",
                value: self.horizon,
            });
        }
        if self.eve_kind == EveKind::Standard && self.mass_floor >= self.z {
            return Err(Error::Domain {
                what: "mass floor must lie below the initial mass",
                value: self.mass_floor,
            });
        }
        if self.max_cells == 0 {
            return Err(Error::Config("cell cap must be positive".into()));
        }
        for &q in &self.norm_exponents {
            if !(q > 1.5 && q < 2.5) {
                return Err(Error::Domain {
                    what: "integrated norm exponent must satisfy 2 < q + 1/2 < 3",
                    value: q,
                });
            }
        }
        if let Some(ceiling) = self.mass_ceiling {
            if !(ceiling.is_finite() && ceiling > self.z) {
                return Err(Error::Domain {
                    what: "mass ceiling must be finite and exceed the initial mass",
                    value: ceiling,
                });
            }
        }
        for &p in &self.probe_levels {
            if !(p.is_finite() && p >= 0.0 && p <= self.horizon) {
                return Err(Error::Domain {
                    what: "probe level must lie inside [0, horizon]",
                    value: p,
                });
            }
        }
        Ok(())
    }
}

/// One cell of the genealogy.
#[derive(Debug, Clone)]
pub struct Cell {
    pub id: usize,
    pub parent_id: Option<usize>,
    /// Jump ordinals from the root: child `k` of a cell came from the k-th
    /// resolved jump (1-based) of its parent, pruned or not, so numbering
    /// does not shift when the floor changes.
    pub index_path: Vec<u32>,
    /// Absolute level at which the cell was born.
    pub birth_level: f64,
    pub birth_mass: f64,
    /// Mass path in the cell's own level clock (time 0 = birth level).
    /// `None` for pruned leaves, whose dynamics are not simulated.
    pub mass_path: Option<PssmpPath>,
    /// Level span from birth to death, resolved to the kill threshold of
    /// the walk. `None` for pruned leaves and for cells still alive at the
    /// horizon.
    pub lifetime: Option<f64>,
    /// (absolute jump level, child id) for every resolved jump, in level
    /// order, pruned children included.
    pub children: Vec<(f64, usize)>,
    pub pruned: bool,
}

impl Cell {
    /// Absolute death level, when the cell was simulated to death.
    pub fn death_level(&self) -> Option<f64> {
        self.lifetime.map(|b| self.birth_level + b)
    }

    /// Whether the cell carries mass at level `r`. Cells alive at the
    /// horizon count as alive for every `r` up to the horizon; pruned
    /// leaves never count (they enter the truncation bound instead).
    pub fn alive_at(&self, r: f64) -> bool {
        if self.pruned || r < self.birth_level {
            return false;
        }
        match self.lifetime {
            Some(b) => r < self.birth_level + b,
            None => true,
        }
    }
}

/// Aggregate counters of one run.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TreeDiagnostics {
    pub simulated_cells: usize,
    pub pruned_cells: usize,
    pub max_depth: usize,
    /// Largest death level over simulated cells; `None` while any cell is
    /// still alive at the horizon. A lower bound on the true extinction
    /// level: each death is resolved to `death_resolution` and pruned
    /// subtrees (mass at most the floor) are not followed.
    pub extinction_level: Option<f64>,
    pub horizon_censored: bool,
    /// Largest kill-tail bound `sqrt(kill mass) * E int exp(xi/2)` over
    /// recorded deaths.
    pub death_resolution: f64,
    /// Total driver time simulated (cost proxy).
    pub driver_time: f64,
    pub jump_events: u64,
}

/// A simulated genealogy with its configuration and counters.
#[derive(Debug, Clone)]
pub struct CellTree {
    pub cells: Vec<Cell>,
    pub root: usize,
    pub config: GfConfig,
    pub diagnostics: TreeDiagnostics,
}

/// Masses of the live cells at one level, ranked nonincreasing.
#[derive(Debug, Clone, Serialize)]
pub struct RankedMasses {
    pub level: f64,
    pub masses: Vec<f64>,
    /// Sum of birth masses of pruned leaves born at or below this level;
    /// pruned dynamics are unknown, so the bound never expires.
    pub truncated_mass_bound: f64,
}

/// A power-sum norm value with its truncation bound.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NormValue {
    pub value: f64,
    /// `sum (pruned birth mass)^q` over pruned leaves born by the queried
    /// level.
    pub truncation_bound: f64,
}

/// Exact-completion totals by channel, in the units of the estimate (each
/// channel already scaled by `-1/kappa(q + 1/2)`).
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CompletionBreakdown {
    /// Children born at or below the mass floor.
    pub pruned_children: f64,
    /// Spawns below the jump-resolution cutoff, integrated against the
    /// kernel over the walked driver time.
    pub subresolution_flux: f64,
    /// Residual mass at the kill threshold.
    pub kill_remainder: f64,
    /// Cells still alive at the level horizon.
    pub horizon: f64,
    /// Cells stopped at the mass ceiling.
    pub ceiling: f64,
    /// Frontier cells folded in when the cell or event budget ran out.
    pub budget_frontier: f64,
}

impl CompletionBreakdown {
    fn total(&self) -> f64 {
        self.pruned_children
            + self.subresolution_flux
            + self.kill_remainder
            + self.horizon
            + self.ceiling
            + self.budget_frontier
    }
}

/// An integrated norm with its expected truncation loss.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IntegralNorm {
    pub q: f64,
    /// `int sum_i m_i(r)^q dr` over the simulated cells.
    pub value: f64,
    /// Expected norm not simulated: pruned subtrees, kill remainders,
    /// sub-resolution spawns, and the continuation of cells stopped at the
    /// horizon, the mass ceiling, or the cell budget, each converted
    /// through the exact subtree identity `-m^(q+1/2) / kappa(q+1/2)`.
    /// Adding it to `value` gives an estimator of the untruncated integral
    /// that is unbiased up to driver-discretization error.
    pub truncation_bias: f64,
    /// Channel split of `truncation_bias`.
    pub breakdown: CompletionBreakdown,
    /// True when some cell was still alive at the horizon.
    pub censored: bool,
}

/// Lean per-replicate output of [`GfEngine::summary`]: everything the
/// Monte Carlo batteries need, with no retained paths.
#[derive(Debug, Clone, Serialize)]
pub struct GfSummary {
    pub extinction_level: Option<f64>,
    pub horizon_censored: bool,
    pub norms: Vec<IntegralNorm>,
    pub simulated_cells: usize,
    pub pruned_cells: usize,
    pub max_depth: usize,
    pub death_resolution: f64,
    /// Cells folded into the truncation bias by their exact subtree
    /// expectation when the cell or event budget ran out. Nonzero only in
    /// rare giant replicates; such replicates count as censored.
    pub frontier_completed: usize,
    /// Cells stopped at the configured mass ceiling and folded into the
    /// truncation bias by their exact subtree expectation. Such replicates
    /// count as censored (their extinction level is unknown).
    pub ceiling_stopped: usize,
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Reusable simulation engine: holds the sampler ladder (built lazily, one
/// sampler per rung and driver kind) so replicate loops pay the inverse-CDF
/// table construction only once.
pub struct GfEngine {
    config: GfConfig,
    /// `ladder[0]` = standard (Eve) driver, `ladder[1]` = conditioned (hat).
    ladder: [Vec<Option<ProcessSampler>>; 2],
    /// Per rung and norm exponent: the exact sub-resolution spawn rate
    /// coefficient `alpha * int_0^{u_lo} u^{c-5/2} (1-u)^{-5/2} du`, where
    /// `u_lo = 1 - exp(-delta_rung)` is the largest relative child size
    /// hidden inside the Gaussian lump.
    flux_table: [Vec<Option<Vec<f64>>>; 2],
    /// Same coefficient at the fixed exponent 2, for the squared-mass
    /// conservation probes.
    flux2_table: [Vec<Option<f64>>; 2],
    /// Sorted copy of the configured probe levels.
    probes: Vec<f64>,
    /// `q + 1/2` per configured norm exponent.
    norm_c: Vec<f64>,
    /// `-1/kappa(q + 1/2)` per configured norm exponent.
    kappa_factor: Vec<f64>,
    /// `E int exp(xi/2)` for a fresh standard driver; scales the kill-tail
    /// level bound.
    kill_tail_coefficient: f64,
}

/// One resolved jump of a walk: the ordinal among the cell's jumps, the
/// absolute level, and the exact child mass split off.
struct SplitRec {
    ordinal: u32,
    level: f64,
    child_mass: f64,
}

/// Result of walking a single cell.
struct CellOutcome {
    /// `None` when the cell was still alive at the level horizon.
    lifetime: Option<f64>,
    path: Option<PssmpPath>,
    /// Per norm exponent: `int m(r)^q dr` over the walked span.
    norms: Vec<f64>,
    /// Per norm exponent: accumulated `m^c` weight of sub-resolution
    /// spawns (to be scaled by `-1/kappa(c)`).
    flux_c: Vec<f64>,
    /// Per norm exponent: `m^c` at the stop, whether the kill threshold or
    /// the level horizon ended the walk; its subtree expectation completes
    /// the integral exactly.
    stop_c: Vec<f64>,
    /// Level-span resolution of the death (zero when censored).
    death_gap: f64,
    driver_time: f64,
    jump_events: u64,
    /// The walk ended because the mass reached the configured ceiling.
    ceiling_stopped: bool,
    /// Per probe level: this cell's contribution to the squared-mass
    /// conservation total (crossing value plus accrued sub-resolution
    /// flux, or the frozen stop value for probes beyond the stop).
    probe_sq: Vec<f64>,
}

/// Work queue entry of the tree builder.
struct Work {
    stream: RngStream,
    mass: f64,
    level: f64,
    parent: Option<usize>,
    /// Slot reserved for this cell in tree mode.
    slot: usize,
    depth: usize,
    index_path: Vec<u32>,
}

/// Closed-form level span of a linear driver segment: starting mass `m`,
/// log-mass increment `dxi` over driver time `g`.
fn seg_level_span(mass: f64, dxi: f64, g: f64) -> f64 {
    mass.sqrt() * g * exprel(0.5 * dxi)
}

/// Driver time at which a linear segment from mass `m` with log slope `k`
/// has swept level span `du`.
fn seg_level_invert(mass: f64, slope: f64, du: f64) -> f64 {
    let scaled = du / mass.sqrt();
    if slope.abs() < 1e-12 {
        scaled
    } else {
        (2.0 / slope) * (0.5 * slope * scaled).ln_1p()
    }
}

/// Exact per-unit-driver-time spawn weight of sub-resolution children,
/// `alpha * int_0^{u_lo} u^{c-5/2} (1-u)^{-5/2} du`: the kernel mass of
/// relative child sizes hidden inside the Gaussian lump, weighted by
/// `u^c`. The integrable endpoint singularity (exponent `c - 5/2` in
/// `(-1/2, 1/2)` for `c` in `(2, 3)`) is left to the adaptive quadrature,
/// whose interior nodes never touch `u = 0`.
fn flux_rate_coefficient(c: f64, u_lo: f64) -> Result<f64> {
    let quad = integrate(
        |u| u.powf(c - 2.5) * (1.0 - u).powf(-2.5),
        0.0,
        u_lo,
        &QuadOptions::default(),
    )?;
    Ok(ALPHA * quad.value)
}

/// Split a mass `pre` across a driver jump `y < 0` so that the stored
/// child and post masses satisfy `post + child == pre` exactly in floating
/// point (Sterbenz: whichever of the two parts is the larger makes the
/// subtraction exact).
fn exact_split(pre: f64, y: f64) -> (f64, f64) {
    let post_raw = pre * y.exp();
    let child = pre - post_raw;
    let post = if child >= 0.5 * pre {
        pre - child
    } else {
        post_raw
    };
    (child, post)
}

/// Row buffer for recorded mass paths.
struct RowBuf {
    times: Vec<f64>,
    values: Vec<f64>,
    is_jump: Vec<bool>,
    jumps: Vec<(f64, f64)>,
}

impl RowBuf {
    fn new(initial_mass: f64) -> Self {
        Self {
            times: vec![0.0],
            values: vec![initial_mass],
            is_jump: vec![false],
            jumps: Vec::new(),
        }
    }

    fn push_knot(&mut self, t: f64, v: f64) {
        self.times.push(t);
        self.values.push(v);
        self.is_jump.push(false);
    }

    fn push_jump(&mut self, t: f64, pre: f64, post: f64, child: f64) {
        self.times.push(t);
        self.values.push(pre);
        self.is_jump.push(false);
        self.times.push(t);
        self.values.push(post);
        self.is_jump.push(true);
        self.jumps.push((t, -child));
    }

    fn finish(self, absorption_time: f64, initial_mass: f64) -> PssmpPath {
        PssmpPath {
            times: self.times,
            values: self.values,
            is_jump: self.is_jump,
            jumps: self.jumps,
            absorption_time,
            initial_mass,
        }
    }
}

impl GfEngine {
    pub fn new(config: &GfConfig) -> Result<Self> {
        config.validate()?;
        let mut norm_c = Vec::new();
        let mut kappa_factor = Vec::new();
        for &q in &config.norm_exponents {
            let c = q + 0.5;
            let kappa = kappa_closed(c).finite(c)?;
            // c in (2, 3) makes kappa strictly negative.
            kappa_factor.push(-1.0 / kappa);
            norm_c.push(c);
        }
        Ok(Self {
            config: config.clone(),
            ladder: [
                (0..LADDER_RUNGS).map(|_| None).collect(),
                (0..LADDER_RUNGS).map(|_| None).collect(),
            ],
            flux_table: [
                (0..LADDER_RUNGS).map(|_| None).collect(),
                (0..LADDER_RUNGS).map(|_| None).collect(),
            ],
            flux2_table: [
                (0..LADDER_RUNGS).map(|_| None).collect(),
                (0..LADDER_RUNGS).map(|_| None).collect(),
            ],
            probes: {
                let mut probes = config.probe_levels.clone();
                probes.sort_by(|a, b| a.partial_cmp(b).expect("finite probe levels"));
                probes
            },
            norm_c,
            kappa_factor,
            kill_tail_coefficient: -1.0 / psi_eve(0.5)?,
        })
    }

    pub fn config(&self) -> &GfConfig {
        &self.config
    }

    /// Ladder rung for a spawn threshold `y_c` (the largest cutoff not
    /// exceeding it). The conditioned driver is capped at a fine rung for
    /// distributional accuracy.
    fn rung_index(y_c: f64, conditioned: bool) -> usize {
        let mut k = if y_c <= LADDER_BASE {
            0
        } else {
            let raw = (y_c / LADDER_BASE).log2().floor();
            (raw as usize).min(LADDER_RUNGS - 1)
        };
        if conditioned {
            k = k.min(CONDITIONED_RUNG_CAP);
        }
        k
    }

    /// Rung appropriate for the given current mass: every jump that could
    /// make a child above the floor must exceed the rung's cutoff, with a
    /// margin for within-knot mass drift.
    fn rung_for(mass: f64, floor: f64, conditioned: bool) -> usize {
        let basis = mass * MASS_MARGIN;
        let y_c = if floor >= basis {
            f64::INFINITY
        } else {
            -(-floor / basis).ln_1p()
        };
        Self::rung_index(y_c, conditioned)
    }

    fn ensure_rung(&mut self, conditioned: bool, k: usize) -> Result<()> {
        let delta = LADDER_BASE * (1u32 << k) as f64;
        let slot = &mut self.ladder[conditioned as usize][k];
        if slot.is_none() {
            let process = if conditioned {
                Process::Hat
            } else {
                Process::Eve
            };
            *slot = Some(ProcessSampler::new(process, delta)?);
        }
        if self.flux_table[conditioned as usize][k].is_none() {
            let u_lo = -(-delta).exp_m1();
            let coeffs = self
                .norm_c
                .iter()
                .map(|&c| flux_rate_coefficient(c, u_lo))
                .collect::<Result<Vec<f64>>>()?;
            self.flux_table[conditioned as usize][k] = Some(coeffs);
            self.flux2_table[conditioned as usize][k] = Some(flux_rate_coefficient(2.0, u_lo)?);
        }
        Ok(())
    }

    /// Simulate the full genealogy and keep every mass path.
    pub fn tree(&mut self, master_seed: u64) -> Result<CellTree> {
        if self.config.mass_ceiling.is_some() {
            return Err(Error::Config(
                "a mass ceiling freezes cells mid-flight, so level queries above \
                 the stop would be meaningless; clear `mass_ceiling` for tree \
                 assembly or use `summary`"
                    .into(),
            ));
        }
        let (tree, _) = self.run(master_seed, true)?;
        Ok(tree.expect("tree mode returns a tree"))
    }

    /// Simulate the genealogy keeping only aggregates (extinction level,
    /// integrated norms, counters). Draw-for-draw identical to
    /// [`GfEngine::tree`] at the same seed, except that an exhausted cell
    /// or event budget completes the pending frontier by its exact subtree
    /// expectation instead of failing the replicate.
    pub fn summary(&mut self, master_seed: u64) -> Result<GfSummary> {
        let (_, summary) = self.run(master_seed, false)?;
        Ok(summary)
    }

    fn run(&mut self, master_seed: u64, build_tree: bool) -> Result<(Option<CellTree>, GfSummary)> {
        let nq = self.norm_c.len();
        let mut slots: Vec<Option<Cell>> = Vec::new();
        let mut queue: Vec<Work> = Vec::new();
        let mut simulated = 0usize;
        let mut pruned = 0usize;
        let mut max_depth = 0usize;
        let mut extinction = 0.0f64;
        let mut censored = false;
        let mut death_resolution = 0.0f64;
        let mut driver_time = 0.0f64;
        let mut jump_events = 0u64;
        let mut norm_total = vec![0.0f64; nq];
        // Raw m^c completion weights by channel: pruned children,
        // sub-resolution flux, kill remainder, horizon, ceiling, frontier.
        let mut chan = vec![[0.0f64; 6]; nq];

        if build_tree {
            slots.push(None);
        }
        queue.push(Work {
            stream: RngStream::root(master_seed),
            mass: self.config.z,
            level: 0.0,
            parent: None,
            slot: 0,
            depth: 0,
            index_path: Vec::new(),
        });

        let mut frontier_completed = 0usize;
        let mut ceiling_stopped = 0usize;
        let mut event_scratch: Vec<f64> = Vec::new();
        while let Some(work) = queue.pop() {
            let stored = if build_tree { simulated + pruned } else { simulated };
            if stored >= self.config.max_cells || jump_events > MAX_TREE_EVENTS {
                if build_tree {
                    return Err(Error::ResourceLimit(format!(
                        "cell budget exhausted: {} simulated and {} pruned cells \
                         (cap {}), {} events (cap {}), frontier {}, deepest level \
                         so far {:.4} of horizon {:.4}",
                        simulated,
                        pruned,
                        self.config.max_cells,
                        jump_events,
                        MAX_TREE_EVENTS,
                        queue.len() + 1,
                        extinction,
                        self.config.horizon
                    )));
                }
                // Summary mode: fold the pending subtree into the bias by
                // its exact expectation instead of failing the replicate.
                frontier_completed += 1;
                censored = true;
                for qi in 0..nq {
                    chan[qi][5] += work.mass.powf(self.norm_c[qi]);
                }
                continue;
            }
            let conditioned =
                work.parent.is_none() && self.config.eve_kind == EveKind::Conditioned;
            let mut splits: Vec<SplitRec> = Vec::new();
            let outcome = self.walk(
                conditioned,
                work.mass,
                work.level,
                work.stream,
                build_tree,
                &mut splits,
                &mut event_scratch,
            )?;
            simulated += 1;
            max_depth = max_depth.max(work.depth);
            driver_time += outcome.driver_time;
            jump_events += outcome.jump_events;
            death_resolution = death_resolution.max(outcome.death_gap);
            match outcome.lifetime {
                Some(beta) => extinction = extinction.max(work.level + beta),
                None => censored = true,
            }
            if outcome.ceiling_stopped {
                ceiling_stopped += 1;
            }
            let stop_channel = if outcome.ceiling_stopped {
                4
            } else if outcome.lifetime.is_some() {
                2
            } else {
                3
            };
            for qi in 0..nq {
                norm_total[qi] += outcome.norms[qi];
                chan[qi][1] += outcome.flux_c[qi];
                chan[qi][stop_channel] += outcome.stop_c[qi];
            }

            let mut children: Vec<(f64, usize)> = Vec::with_capacity(splits.len());
            for split in &splits {
                let is_pruned = split.child_mass <= self.config.mass_floor;
                let child_slot = if build_tree { slots.len() } else { 0 };
                if is_pruned {
                    pruned += 1;
                    for qi in 0..nq {
                        chan[qi][0] += split.child_mass.powf(self.norm_c[qi]);
                    }
                    if build_tree {
                        let mut path = work.index_path.clone();
                        path.push(split.ordinal);
                        slots.push(Some(Cell {
                            id: child_slot,
                            parent_id: Some(work.slot),
                            index_path: path,
                            birth_level: split.level,
                            birth_mass: split.child_mass,
                            mass_path: None,
                            lifetime: None,
                            children: Vec::new(),
                            pruned: true,
                        }));
                    }
                } else {
                    let mut path = work.index_path.clone();
                    path.push(split.ordinal);
                    if build_tree {
                        slots.push(None);
                    }
                    queue.push(Work {
                        stream: work.stream.substream(split.ordinal as u64),
                        mass: split.child_mass,
                        level: split.level,
                        parent: Some(work.slot),
                        slot: child_slot,
                        depth: work.depth + 1,
                        index_path: path,
                    });
                }
                children.push((split.level, child_slot));
            }

            if build_tree {
                slots[work.slot] = Some(Cell {
                    id: work.slot,
                    parent_id: work.parent,
                    index_path: work.index_path,
                    birth_level: work.level,
                    birth_mass: work.mass,
                    mass_path: outcome.path,
                    lifetime: outcome.lifetime,
                    children,
                    pruned: false,
                });
            }
        }

        let norms = (0..nq)
            .map(|qi| {
                let f = self.kappa_factor[qi];
                let breakdown = CompletionBreakdown {
                    pruned_children: chan[qi][0] * f,
                    subresolution_flux: chan[qi][1] * f,
                    kill_remainder: chan[qi][2] * f,
                    horizon: chan[qi][3] * f,
                    ceiling: chan[qi][4] * f,
                    budget_frontier: chan[qi][5] * f,
                };
                IntegralNorm {
                    q: self.config.norm_exponents[qi],
                    value: norm_total[qi],
                    truncation_bias: breakdown.total(),
                    breakdown,
                    censored,
                }
            })
            .collect();
        let summary = GfSummary {
            extinction_level: if censored { None } else { Some(extinction) },
            horizon_censored: censored,
            norms,
            simulated_cells: simulated,
            pruned_cells: pruned,
            max_depth,
            death_resolution,
            frontier_completed,
            ceiling_stopped,
        };
        let tree = if build_tree {
            let cells = slots
                .into_iter()
                .map(|slot| slot.expect("every reserved slot is filled"))
                .collect();
            let mut config = self.config.clone();
            config.master_seed = master_seed;
            Some(CellTree {
                cells,
                root: 0,
                config,
                diagnostics: TreeDiagnostics {
                    simulated_cells: simulated,
                    pruned_cells: pruned,
                    max_depth,
                    extinction_level: summary.extinction_level,
                    horizon_censored: censored,
                    death_resolution,
                    driver_time,
                    jump_events,
                },
            })
        } else {
            None
        };
        Ok((tree, summary))
    }

    /// Walk one cell from birth to death, the level horizon, or the kill
    /// threshold, resolving every jump that could spawn a child above the
    /// mass floor.
    #[allow(clippy::too_many_arguments)]
    fn walk(
        &mut self,
        conditioned: bool,
        mass0: f64,
        birth_level: f64,
        stream: RngStream,
        record: bool,
        splits: &mut Vec<SplitRec>,
        event_scratch: &mut Vec<f64>,
    ) -> Result<CellOutcome> {
        let floor = self.config.mass_floor;
        let r_stop = self.config.horizon;
        let kill = if conditioned {
            // The conditioned driver drifts upward and is never absorbed;
            // only the horizon stops it.
            0.0
        } else {
            KILL_FRACTION * floor
        };
        let ceiling = if conditioned {
            f64::INFINITY
        } else {
            self.config.mass_ceiling.unwrap_or(f64::INFINITY)
        };
        let norm_c = self.norm_c.clone();
        let nq = norm_c.len();

        let mut rng = stream.rng();
        let mut mass = mass0;
        let mut level = birth_level;
        let mut s_total = 0.0f64;
        let mut rows = record.then(|| RowBuf::new(mass0));
        let mut norms = vec![0.0f64; nq];
        let mut flux_c = vec![0.0f64; nq];
        let mut stop_c = vec![0.0f64; nq];
        let mut ordinal: u32 = 0;
        let mut jump_events = 0u64;

        let probes = self.probes.clone();
        let np = probes.len();
        let mut probe_sq = vec![0.0f64; np];
        // Probes strictly below the birth level see this cell only through
        // its ancestors; an exact coincidence sees the birth mass.
        let mut next_probe = probes.partition_point(|&rj| rj < birth_level);
        while next_probe < np && probes[next_probe] <= level {
            probe_sq[next_probe] = mass * mass;
            next_probe += 1;
        }
        let mut flux2_cum = 0.0f64;

        let finish = |rows: Option<RowBuf>,
                      lifetime: Option<f64>,
                      norms: Vec<f64>,
                      flux_c: Vec<f64>,
                      stop_c: Vec<f64>,
                      death_gap: f64,
                      s_total: f64,
                      jump_events: u64,
                      probe_sq: Vec<f64>| CellOutcome {
            lifetime,
            path: rows.map(|b| {
                let absorption = match lifetime {
                    Some(beta) => beta,
                    None => f64::INFINITY,
                };
                b.finish(absorption, mass0)
            }),
            norms,
            flux_c,
            stop_c,
            death_gap,
            driver_time: s_total,
            jump_events,
            ceiling_stopped: false,
            probe_sq,
        };

        if level >= r_stop {
            for qi in 0..nq {
                stop_c[qi] = mass.powf(norm_c[qi]);
            }
            for j in next_probe..np {
                probe_sq[j] = mass * mass;
            }
            return Ok(finish(rows, None, norms, flux_c, stop_c, 0.0, 0.0, 0, probe_sq));
        }

        let mut windows = 0usize;
        'window: loop {
            windows += 1;
            if windows > MAX_WINDOWS {
                return Err(Error::Contract(format!(
                    "cell walk exceeded {MAX_WINDOWS} windows (mass {mass:.3e}, \
                     level {level:.4} of {r_stop:.4}); the driver is not escaping"
                )));
            }
            let k = Self::rung_for(mass, floor, conditioned);
            self.ensure_rung(conditioned, k)?;
            let sampler = self.ladder[conditioned as usize][k]
                .as_ref()
                .expect("rung was just built");
            let delta = sampler.delta;
            let knot = if delta <= 0.02 { KNOT_FINE } else { KNOT_COARSE };
            // Exact sub-resolution spawn weight for this rung: children of
            // relative size below u_lo = 1 - exp(-delta) are inside the
            // Gaussian lump; their lost m^c flows into the completion.
            let flux_coeff = self.flux_table[conditioned as usize][k]
                .clone()
                .expect("rung flux coefficients were just built");
            let flux2 = self.flux2_table[conditioned as usize][k]
                .expect("rung flux coefficients were just built");

            let window = WINDOW.min(EVENTS_PER_WINDOW / sampler.total_rate.max(1.0));
            let n_events = poisson_count(sampler.total_rate * window, &mut rng) as usize;
            event_scratch.clear();
            for _ in 0..n_events {
                event_scratch.push(rng.random::<f64>() * window);
            }
            event_scratch.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite event times"));

            let mut s_cursor = 0.0f64;
            for ev in 0..=n_events {
                let target = if ev < n_events {
                    event_scratch[ev]
                } else {
                    window
                };
                let gap = target - s_cursor;
                if gap > 0.0 {
                    let chunks = (gap / knot).ceil().max(1.0) as usize;
                    let g = gap / chunks as f64;
                    for _ in 0..chunks {
                        let gauss: f64 = StandardNormal.sample(&mut rng);
                        let dxi = sampler.drift_sim * g + (sampler.sigma2 * g).sqrt() * gauss;
                        let span = seg_level_span(mass, dxi, g);
                        if level + span >= r_stop {
                            // Partial chunk up to the horizon.
                            let slope = dxi / g;
                            let s_star = seg_level_invert(mass, slope, r_stop - level).min(g);
                            for qi in 0..nq {
                                let mc = mass.powf(norm_c[qi]);
                                norms[qi] += mc * s_star * exprel(norm_c[qi] * slope * s_star);
                                flux_c[qi] += mc * flux_coeff[qi] * s_star;
                            }
                            while next_probe < np && probes[next_probe] <= r_stop {
                                let s_j = seg_level_invert(mass, slope, probes[next_probe] - level)
                                    .min(s_star);
                                let m_j = mass * (slope * s_j).exp();
                                probe_sq[next_probe] = m_j * m_j
                                    + flux2_cum
                                    + mass * mass * flux2 * s_j * exprel(2.0 * slope * s_j);
                                next_probe += 1;
                            }
                            mass *= (slope * s_star).exp();
                            s_total += s_star;
                            for qi in 0..nq {
                                stop_c[qi] = mass.powf(norm_c[qi]);
                            }
                            if let Some(b) = rows.as_mut() {
                                b.push_knot(r_stop - birth_level, mass);
                            }
                            return Ok(finish(
                                rows,
                                None,
                                norms,
                                flux_c,
                                stop_c,
                                0.0,
                                s_total,
                                jump_events,
                                probe_sq,
                            ));
                        }
                        for qi in 0..nq {
                            let mc = mass.powf(norm_c[qi]);
                            norms[qi] += mc * g * exprel(norm_c[qi] * dxi);
                            flux_c[qi] += mc * flux_coeff[qi] * g;
                        }
                        if next_probe < np {
                            let slope = dxi / g;
                            while next_probe < np && probes[next_probe] <= level + span {
                                let s_j =
                                    seg_level_invert(mass, slope, probes[next_probe] - level)
                                        .min(g);
                                let m_j = mass * (slope * s_j).exp();
                                probe_sq[next_probe] = m_j * m_j
                                    + flux2_cum
                                    + mass * mass * flux2 * s_j * exprel(2.0 * slope * s_j);
                                next_probe += 1;
                            }
                            flux2_cum += mass * mass * flux2 * g * exprel(2.0 * dxi);
                        }
                        mass *= dxi.exp();
                        level += span;
                        s_total += g;
                        if let Some(b) = rows.as_mut() {
                            b.push_knot(level - birth_level, mass);
                        }
                        if !conditioned && mass <= kill {
                            let beta = level - birth_level;
                            for qi in 0..nq {
                                stop_c[qi] = mass.powf(norm_c[qi]);
                            }
                            for j in next_probe..np {
                                probe_sq[j] = mass * mass + flux2_cum;
                            }
                            let death_gap = mass.sqrt() * self.kill_tail_coefficient;
                            if let Some(b) = rows.as_mut() {
                                b.push_knot(beta, 0.0);
                            }
                            return Ok(finish(
                                rows,
                                Some(beta),
                                norms,
                                flux_c,
                                stop_c,
                                death_gap,
                                s_total,
                                jump_events,
                                probe_sq,
                            ));
                        }
                        if mass >= ceiling {
                            // Variance-reduction stop: the subtree of this
                            // now-large cell is folded into the truncation
                            // bias by its exact expectation. The driver is
                            // spectrally negative, so the ceiling can only
                            // be crossed inside a Gaussian chunk.
                            for qi in 0..nq {
                                stop_c[qi] = mass.powf(norm_c[qi]);
                            }
                            for j in next_probe..np {
                                probe_sq[j] = mass * mass + flux2_cum;
                            }
                            let mut out = finish(
                                rows,
                                None,
                                norms,
                                flux_c,
                                stop_c,
                                0.0,
                                s_total,
                                jump_events,
                                probe_sq,
                            );
                            out.ceiling_stopped = true;
                            return Ok(out);
                        }
                        let k_now = Self::rung_for(mass, floor, conditioned);
                        if k_now < k || k_now > k + 1 {
                            // The drifting mass calls for a different rung:
                            // finer when the mass rose (children above the
                            // floor would hide below the cutoff), coarser
                            // when it fell well below the window basis.
                            // The discarded remainder of the event window
                            // is redrawn fresh, which the memoryless
                            // Poisson clock permits. A one-rung-coarser
                            // mismatch is tolerated to avoid thrashing.
                            continue 'window;
                        }
                    }
                }
                s_cursor = target;
                if ev < n_events {
                    // Resolved jump: pick the piece proportionally to its
                    // rate, then its size by inverse CDF.
                    let pieces = sampler.pieces();
                    let y = if pieces.len() == 1 {
                        pieces[0].quantile(rng.random::<f64>())
                    } else {
                        let mut pick = rng.random::<f64>() * sampler.total_rate;
                        let mut chosen: Option<&PieceSampler> = None;
                        for piece in pieces {
                            if pick < piece.rate {
                                chosen = Some(piece);
                                break;
                            }
                            pick -= piece.rate;
                        }
                        let piece = chosen.unwrap_or(&pieces[pieces.len() - 1]);
                        piece.quantile(rng.random::<f64>())
                    };
                    jump_events += 1;
                    ordinal += 1;
                    let pre = mass;
                    let (child, post) = exact_split(pre, y);
                    debug_assert!(child > 0.0 && post > 0.0);
                    splits.push(SplitRec {
                        ordinal,
                        level,
                        child_mass: child,
                    });
                    if let Some(b) = rows.as_mut() {
                        b.push_jump(level - birth_level, pre, post, child);
                    }
                    mass = post;
                    let k_now = Self::rung_for(mass, floor, conditioned);
                    if k_now < k || k_now > k + 1 {
                        continue 'window;
                    }
                }
            }
        }
    }
}

/// Simulate one growth-fragmentation genealogy. See [`GfEngine`] for
/// replicate loops that reuse the sampler tables.
pub fn simulate_gf(config: &GfConfig) -> Result<CellTree> {
    GfEngine::new(config)?.tree(config.master_seed)
}

// ---------------------------------------------------------------------------
// Tree queries
// ---------------------------------------------------------------------------

/// Mass of a recorded path at clock `t`, by linear interpolation between
/// the surrounding rows (the post-jump row at an exact jump time).
fn path_value_at(path: &PssmpPath, t: f64) -> f64 {
    let hi = path.times.partition_point(|&row_t| row_t <= t);
    if hi == 0 {
        return path.values[0];
    }
    if hi == path.times.len() {
        return path.values[hi - 1];
    }
    let (t0, v0) = (path.times[hi - 1], path.values[hi - 1]);
    let (t1, v1) = (path.times[hi], path.values[hi]);
    if t1 <= t0 {
        return v1;
    }
    v0 + (v1 - v0) * ((t - t0) / (t1 - t0))
}

/// Ranked masses of all live cells at level `r`, with the pruned-mass
/// bound.
pub fn masses_at(tree: &CellTree, r: f64) -> Result<RankedMasses> {
    if !(r >= 0.0 && r <= tree.config.horizon) {
        return Err(Error::Domain {
            what: "queried level outside the simulated horizon",
            value: r,
        });
    }
    let mut masses = Vec::new();
    let mut bound = 0.0;
    for cell in &tree.cells {
        if cell.pruned {
            if cell.birth_level <= r {
                bound += cell.birth_mass;
            }
            continue;
        }
        if cell.alive_at(r) {
            let path = cell
                .mass_path
                .as_ref()
                .expect("simulated cells carry a path");
            let m = path_value_at(path, r - cell.birth_level);
            if m > 0.0 {
                masses.push(m);
            }
        }
    }
    masses.sort_unstable_by(|a, b| b.partial_cmp(a).expect("finite masses"));
    Ok(RankedMasses {
        level: r,
        masses,
        truncated_mass_bound: bound,
    })
}

/// `sum_i m_i(r)^q` over the live cells, with the pruned-"mass^q" bound.
/// Requires `q >= 1` so the bound controls the truncation bias.
pub fn p_norm(tree: &CellTree, r: f64, q: f64) -> Result<NormValue> {
    if !(q >= 1.0) {
        return Err(Error::Domain {
            what: "power-sum exponent must be at least 1 for a controlled truncation bound",
            value: q,
        });
    }
    let ranked = masses_at(tree, r)?;
    let value = ranked.masses.iter().map(|m| m.powf(q)).sum();
    let bound = tree
        .cells
        .iter()
        .filter(|c| c.pruned && c.birth_level <= r)
        .map(|c| c.birth_mass.powf(q))
        .sum();
    Ok(NormValue {
        value,
        truncation_bound: bound,
    })
}

/// Trapezoid integral of [`p_norm`] over the level grid up to extinction
/// (or the horizon, with the censored flag). The truncation bias converts
/// pruned leaves, kill remainders, and horizon-stopped masses into
/// expected lost norm through the subtree identity
/// `-m^(q+1/2)/kappa(q+1/2)`; the closed-form accumulator of
/// [`GfEngine::summary`] additionally counts sub-resolution spawns, so its
/// bias term is slightly larger than this one at the same seed.
pub fn integral_p_norm(tree: &CellTree, q: f64) -> Result<IntegralNorm> {
    let c = q + 0.5;
    if !(c > 2.0 && c < 3.0) {
        return Err(Error::Domain {
            what: "integrated norm exponent must satisfy 2 < q + 1/2 < 3",
            value: q,
        });
    }
    let censored = tree.diagnostics.horizon_censored;
    let top = match tree.diagnostics.extinction_level {
        Some(e) => e.min(tree.config.horizon),
        None => tree.config.horizon,
    };
    let kappa = kappa_closed(c).finite(c)?;
    let factor = -1.0 / kappa;
    let mut pruned_c = 0.0;
    let mut kill_c = 0.0;
    let mut horizon_c = 0.0;
    for cell in &tree.cells {
        if cell.pruned {
            pruned_c += cell.birth_mass.powf(c);
            continue;
        }
        let path = cell
            .mass_path
            .as_ref()
            .expect("simulated cells carry a path");
        if cell.lifetime.is_some() {
            // Kill remainder: the last positive row of a dead path.
            if path.values.len() >= 2 {
                let last_positive = path.values[path.values.len() - 2];
                kill_c += last_positive.powf(c);
            }
        } else {
            // Continuation of a cell stopped at the horizon.
            horizon_c += path.values[path.values.len() - 1].powf(c);
        }
    }
    let breakdown = CompletionBreakdown {
        pruned_children: pruned_c * factor,
        kill_remainder: kill_c * factor,
        horizon: horizon_c * factor,
        ..Default::default()
    };
    if top <= 0.0 {
        return Ok(IntegralNorm {
            q,
            value: 0.0,
            truncation_bias: breakdown.total(),
            breakdown,
            censored,
        });
    }
    let dr = (1e-3 * tree.config.z.sqrt()).max(top / 20_000.0);
    let steps = (top / dr).ceil() as usize;
    let mut value = 0.0;
    let mut prev = p_norm(tree, 0.0, q)?.value;
    for i in 1..=steps {
        let r = (top * i as f64 / steps as f64).min(top);
        let cur = p_norm(tree, r, q)?.value;
        value += 0.5 * (prev + cur) * (top / steps as f64);
        prev = cur;
    }
    Ok(IntegralNorm {
        q,
        value,
        truncation_bias: breakdown.total(),
        breakdown,
        censored,
    })
}

/// Number of live cells with mass above `eps` at level `r`. `eps` must
/// exceed the pruning floor, below which counts are not resolved.
pub fn frag_count(tree: &CellTree, r: f64, eps: f64) -> Result<usize> {
    if !(eps > tree.config.mass_floor) {
        return Err(Error::Domain {
            what: "count threshold below the pruning resolution",
            value: eps,
        });
    }
    let ranked = masses_at(tree, r)?;
    Ok(ranked.masses.iter().filter(|&&m| m > eps).count())
}

/// First recorded split of the root cell: its level and the child/parent
/// mass ratio, both read off the stored path.
#[derive(Debug, Clone, Copy)]
pub struct FirstSplit {
    pub level: f64,
    /// Child mass over pre-jump mass, in (0, 1/2) for the standard driver.
    pub ratio: f64,
}

pub fn first_split(tree: &CellTree) -> Option<FirstSplit> {
    let root = &tree.cells[tree.root];
    let path = root.mass_path.as_ref()?;
    let &(t, size) = path.jumps.first()?;
    let row = path.is_jump.iter().position(|&j| j)?;
    let pre = path.values[row - 1];
    let _ = t;
    Some(FirstSplit {
        level: root.birth_level + t,
        ratio: -size / pre,
    })
}

// ---------------------------------------------------------------------------
// Structural audit
// ---------------------------------------------------------------------------

/// Counters of a passed audit.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct AuditReport {
    pub cells: usize,
    pub simulated: usize,
    pub pruned: usize,
    pub splits_checked: usize,
}

/// Check every structural invariant of a recorded tree: path contracts,
/// genealogy (index paths extend the parent's by the jump ordinal, birth
/// levels equal recorded jump levels), exact split conservation
/// (`post + child == pre` bitwise at every recorded jump), jump dominance
/// for standard-driver cells, and floor consistency of pruning.
pub fn audit_tree(tree: &CellTree) -> Result<AuditReport> {
    let fail = |msg: String| -> Result<AuditReport> { Err(Error::Contract(msg)) };
    let mut report = AuditReport {
        cells: tree.cells.len(),
        ..AuditReport::default()
    };
    let root = &tree.cells[tree.root];
    if root.parent_id.is_some() || !root.index_path.is_empty() || root.birth_level != 0.0 {
        return fail("root must be unparented at level 0 with an empty index path".into());
    }
    if root.birth_mass != tree.config.z {
        return fail("root birth mass must equal the configured initial mass".into());
    }
    for (i, cell) in tree.cells.iter().enumerate() {
        if cell.id != i {
            return fail(format!("cell {i} stores id {}", cell.id));
        }
        if cell.pruned {
            report.pruned += 1;
            if cell.birth_mass > tree.config.mass_floor {
                return fail(format!(
                    "pruned cell {i} has mass {} above the floor",
                    cell.birth_mass
                ));
            }
            if cell.mass_path.is_some() || !cell.children.is_empty() {
                return fail(format!("pruned cell {i} carries dynamics"));
            }
            continue;
        }
        report.simulated += 1;
        let path = match cell.mass_path.as_ref() {
            Some(p) => p,
            None => return fail(format!("simulated cell {i} has no mass path")),
        };
        path.validate()?;
        if path.initial_mass != cell.birth_mass {
            return fail(format!("cell {i} path does not start at its birth mass"));
        }
        match cell.lifetime {
            Some(beta) => {
                if path.absorption_time != beta {
                    return fail(format!("cell {i} lifetime disagrees with its path"));
                }
            }
            None => {
                if path.absorption_time.is_finite() {
                    return fail(format!("live cell {i} has an absorbed path"));
                }
            }
        }
        let standard_driver =
            !(cell.parent_id.is_none() && tree.config.eve_kind == EveKind::Conditioned);
        if cell.children.len() != path.jumps.len() {
            return fail(format!(
                "cell {i} records {} children for {} jumps",
                cell.children.len(),
                path.jumps.len()
            ));
        }
        let post_rows: Vec<usize> = (0..path.is_jump.len())
            .filter(|&r| path.is_jump[r])
            .collect();
        for (k, (&(level, child_id), &(jump_t, size))) in
            cell.children.iter().zip(&path.jumps).enumerate()
        {
            let child = &tree.cells[child_id];
            if child.parent_id != Some(cell.id) {
                return fail(format!("child {child_id} does not point back to cell {i}"));
            }
            let expected_ordinal = (k + 1) as u32;
            let mut expected_path = cell.index_path.clone();
            expected_path.push(expected_ordinal);
            if child.index_path != expected_path {
                return fail(format!("child {child_id} index path does not extend cell {i}"));
            }
            if child.birth_level != level {
                return fail(format!("child {child_id} birth level disagrees"));
            }
            if level - cell.birth_level != jump_t {
                return fail(format!(
                    "cell {i} jump {k} level offset disagrees with its path"
                ));
            }
            if !(level >= cell.birth_level && level <= tree.config.horizon) {
                return fail(format!("cell {i} jump {k} level out of range"));
            }
            if let Some(beta) = cell.lifetime {
                if level - cell.birth_level > beta {
                    return fail(format!("cell {i} spawned after its death"));
                }
            }
            // Exact conservation: size is the recorded row decrement, and
            // the child carries exactly the split-off mass.
            if size != -child.birth_mass {
                return fail(format!(
                    "cell {i} jump {k} size {size} does not match child mass"
                ));
            }
            let row = post_rows[k];
            let pre = path.values[row - 1];
            let post = path.values[row];
            if post + child.birth_mass != pre {
                return fail(format!("cell {i} jump {k} split is not conservative"));
            }
            if standard_driver && !(post > child.birth_mass) {
                return fail(format!(
                    "cell {i} jump {k} violates jump dominance (post {post}, child {})",
                    child.birth_mass
                ));
            }
            if !child.pruned && child.birth_mass <= tree.config.mass_floor {
                return fail(format!("child {child_id} below the floor was simulated"));
            }
            report.splits_checked += 1;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Conditioned marginal
// ---------------------------------------------------------------------------

/// `n` independent samples of the conditioned Eve mass at level `r`,
/// started from entrance mass `x0`. Each sample uses its own substream.
pub fn hat_marginal(r: f64, n: usize, x0: f64, stream: RngStream) -> Result<Vec<f64>> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Domain {
            what: "marginal level must be positive and finite",
            value: r,
        });
    }
    if !(x0 > 0.0 && x0 < 0.1 * r * r) {
        return Err(Error::Domain {
            what: "entrance mass must be positive and well below the level squared",
            value: x0,
        });
    }
    if n == 0 {
        return Err(Error::InsufficientData {
            what: "conditioned marginal sample",
            needed: 1,
            got: 0,
        });
    }
    let sampler = ProcessSampler::new(Process::Hat, DEFAULT_MARGINAL_DELTA)?;
    let mut out = Vec::with_capacity(n);
    let mut scratch = Vec::new();
    for i in 0..n {
        let mut rng = stream.substream(i as u64).rng();
        out.push(marginal_walk(&sampler, x0, r, &mut rng, &mut scratch)?);
    }
    Ok(out)
}

/// Walk the conditioned driver until the level clock reaches `r_target`
/// and return the mass there.
fn marginal_walk<R: Rng + ?Sized>(
    sampler: &ProcessSampler,
    x0: f64,
    r_target: f64,
    rng: &mut R,
    event_scratch: &mut Vec<f64>,
) -> Result<f64> {
    let mut mass = x0;
    let mut level = 0.0f64;
    let mut windows = 0usize;
    loop {
        windows += 1;
        if windows > MAX_WINDOWS {
            return Err(Error::Contract(format!(
                "conditioned marginal walk stalled at level {level:.4} of {r_target:.4}"
            )));
        }
        let window = WINDOW.min(EVENTS_PER_WINDOW / sampler.total_rate.max(1.0));
        let n_events = poisson_count(sampler.total_rate * window, rng) as usize;
        event_scratch.clear();
        for _ in 0..n_events {
            event_scratch.push(rng.random::<f64>() * window);
        }
        event_scratch.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite event times"));
        let mut s_cursor = 0.0f64;
        for ev in 0..=n_events {
            let target = if ev < n_events {
                event_scratch[ev]
            } else {
                window
            };
            let gap = target - s_cursor;
            if gap > 0.0 {
                let chunks = (gap / KNOT_FINE).ceil().max(1.0) as usize;
                let g = gap / chunks as f64;
                for _ in 0..chunks {
                    let gauss: f64 = StandardNormal.sample(rng);
                    let dxi = sampler.drift_sim * g + (sampler.sigma2 * g).sqrt() * gauss;
                    let span = seg_level_span(mass, dxi, g);
                    if level + span >= r_target {
                        let slope = dxi / g;
                        let s_star = seg_level_invert(mass, slope, r_target - level).min(g);
                        return Ok(mass * (slope * s_star).exp());
                    }
                    mass *= dxi.exp();
                    level += span;
                }
            }
            s_cursor = target;
            if ev < n_events {
                let pieces = sampler.pieces();
                let mut pick = rng.random::<f64>() * sampler.total_rate;
                let mut y = f64::NAN;
                for piece in pieces {
                    if pick < piece.rate {
                        y = piece.quantile(rng.random::<f64>());
                        break;
                    }
                    pick -= piece.rate;
                }
                if y.is_nan() {
                    y = pieces[pieces.len() - 1].quantile(rng.random::<f64>());
                }
                mass *= y.exp();
            }
        }
    }
}

/// One-sample comparison of a conditioned marginal sample against its
/// Gamma(3/2, mean `r^2`) reference.
#[derive(Debug, Clone, Serialize)]
pub struct MarginalReport {
    pub level: f64,
    pub n: usize,
    pub ks: f64,
    pub ks_critical_1pct: f64,
    pub mean: EstimateWithCI,
    pub target_mean: f64,
}

pub fn hat_marginal_report(samples: &[f64], level: f64, seed: RngStream) -> MarginalReport {
    let mean_sq = level * level;
    MarginalReport {
        level,
        n: samples.len(),
        ks: ks_one_sample(samples, |x| gamma_3_2_cdf(x, mean_sq)),
        ks_critical_1pct: ks_critical_1pct(samples.len()),
        mean: mean_with_ci(samples, seed),
        target_mean: mean_sq,
    }
}
