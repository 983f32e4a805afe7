//! Wave decomposition of an avalanche: the n-wave recursion, the last-wave
//! threshold, penultimate clusters, and the three arrival-time fields.
//!
//! An n-wave from a source `z` pins the odometer at `z` to `n` and lets every
//! other site follow the synchronous floor recursion
//!
//! ```text
//! u_{t+1}(x) = floor( (sum of u_t over the 2d neighbours of x + eta(x)) / 2d )
//! ```
//!
//! starting from `u_0 = n·1{z}`. The odometer is monotone in `t` and in `n`
//! and never exceeds `n`, so each wave either reaches a fixed point (it
//! *stabilizes*) or grows forever. The last-wave threshold `M̂(z)` is the
//! smallest `n` whose wave does not stabilize; the terminal odometer `ũ` of
//! the `(M̂-1)`-wave defines the penultimate cluster
//! `P(z) = {z} ∪ {x : some neighbour y of x has ũ(y) > 0}`.
//!
//! Everything runs on a finite window and is exact for the infinite-lattice
//! process by the same argument the toppling engine uses: positivity spreads
//! at most one site per step (backgrounds are validated to be at most 2d-1),
//! so until the window's outermost ring turns positive the truncated and the
//! infinite recursions agree, and a run that reaches a fixed point with the
//! ring still at zero is the exact infinite-lattice terminal. A ring site
//! turning positive latches a frontier hit, which is the operational
//! definition of "does not stabilize" at this window size.
//!
//! Three arrival-time fields are measured from a source `z`:
//!
//! * `T(x)` — first time `x` topples in the exploding sandpile seeded with
//!   the explosion threshold at `z` (chips dynamics, toppling engine);
//! * `T̂(x)` — first time the last wave (the `M̂(z)`-wave) is positive at `x`;
//! * `T̃(x)` — first time the last wave is positive on *all* of `P(x)`,
//!   equivalently `max of T̂ over P(x)` since positivity is monotone in time.
//!
//! Arrival values use the convention `min{t >= 1 : positive}`, so the source
//! itself carries arrival time 1.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{explosion_threshold, ExplosionOutcome};
use crate::background::BackgroundSpec;
use crate::engine::{BoundaryMode, SandpileState, StabilizeOutcome, NEVER};
use crate::grid::{Grid, Point, Window};
use crate::{Error, Result};

/// Synchronous wave recursion on a window with the source odometer pinned.
///
/// The state is double-buffered and padded with a one-cell halo of permanent
/// zeros so the gather needs no bounds logic. Only the bounding box of the
/// positive support, inflated by one cell, is swept each step; sites further
/// out gather at most `eta <= 2d-1` from all-zero neighbours and stay zero.
pub struct WaveProcess {
    win: Window,
    ext: Vec<usize>,
    pext: Vec<usize>,
    pstr: Vec<usize>,
    eta: Vec<u64>,
    cur: Vec<u64>,
    nxt: Vec<u64>,
    arr: Vec<u32>,
    z: Point,
    z_idx: usize,
    n: u64,
    t: u64,
    frontier: Option<(u64, Point)>,
    /// Sweep region in padded coordinates, inclusive on both ends.
    region: Option<(Vec<usize>, Vec<usize>)>,
}

impl WaveProcess {
    pub fn new(spec: &BackgroundSpec, z: &[i64], n: u64, window: &Window) -> Result<Self> {
        let d = window.dim();
        if spec.dimension != d {
            return Err(Error::arg(format!(
                "background dimension {} does not match window dimension {d}",
                spec.dimension
            )));
        }
        if !window.contains(z) {
            return Err(Error::arg(format!(
                "wave source {z:?} must lie inside the window"
            )));
        }
        let two_d = 2 * d as u64;
        if n > (u64::MAX - (two_d - 1)) / two_d {
            return Err(Error::resource(format!(
                "source mass {n} would overflow the gather arithmetic"
            )));
        }
        let ext = window.extents();
        let pext: Vec<usize> = ext.iter().map(|&e| e + 2).collect();
        let mut pstr = vec![1usize; d];
        for k in 1..d {
            pstr[k] = pstr[k - 1] * pext[k - 1];
        }
        let pvol: usize = pext.iter().product();
        let values = spec.fill_window(window)?;
        let mut eta = vec![0u64; pvol];
        let pidx = |p: &[i64]| -> usize {
            p.iter()
                .zip(window.lo())
                .zip(&pstr)
                .map(|((&c, &lo), &s)| (c - lo + 1) as usize * s)
                .sum()
        };
        for (p, &v) in values.iter() {
            if v < 0 || v as u64 >= two_d {
                return Err(Error::arg(format!(
                    "the wave recursion needs background values in 0..=2d-1, found {v} at {p:?}"
                )));
            }
            eta[pidx(&p)] = v as u64;
        }
        let z_idx = pidx(z);
        let mut cur = vec![0u64; pvol];
        let region = if n > 0 {
            cur[z_idx] = n;
            let zc: Vec<usize> = z
                .iter()
                .zip(window.lo())
                .map(|(&c, &lo)| (c - lo + 1) as usize)
                .collect();
            let lo: Vec<usize> = zc.iter().map(|&c| (c - 1).max(1)).collect();
            let hi: Vec<usize> = zc.iter().zip(&ext).map(|(&c, &e)| (c + 1).min(e)).collect();
            Some((lo, hi))
        } else {
            None
        };
        Ok(WaveProcess {
            win: window.clone(),
            ext,
            pext,
            pstr,
            eta,
            nxt: cur.clone(),
            cur,
            arr: vec![NEVER; pvol],
            z: z.to_vec(),
            z_idx,
            n,
            t: 0,
            frontier: None,
            region,
        })
    }

    fn point_of(&self, mut idx: usize) -> Point {
        let d = self.pext.len();
        let mut p = vec![0i64; d];
        for k in (0..d).rev() {
            let c = idx / self.pstr[k];
            idx -= c * self.pstr[k];
            p[k] = self.win.lo()[k] + c as i64 - 1;
        }
        p
    }

    fn pidx(&self, p: &[i64]) -> usize {
        debug_assert!(self.win.contains(p));
        p.iter()
            .zip(self.win.lo())
            .zip(&self.pstr)
            .map(|((&c, &lo), &s)| (c - lo + 1) as usize * s)
            .sum()
    }

    fn gather(&self, idx: usize) -> u64 {
        if idx == self.z_idx {
            return self.n;
        }
        let d = self.pstr.len();
        let mut acc = self.eta[idx];
        for k in 0..d {
            acc += self.cur[idx - self.pstr[k]] + self.cur[idx + self.pstr[k]];
        }
        acc / (2 * d as u64)
    }

    /// One synchronous update. Returns the number of sites whose odometer
    /// changed; the time index advances only when something changed.
    pub fn step(&mut self) -> usize {
        let (rlo, rhi) = match &self.region {
            None => return 0,
            Some((a, b)) => (a.clone(), b.clone()),
        };
        let d = self.pstr.len();
        let t_next = self.t + 1;
        let mut changed = 0usize;
        let mut plo: Option<Vec<usize>> = None;
        let mut phi: Option<Vec<usize>> = None;
        let mut coords = rlo.clone();
        let mut base: usize = (1..d).map(|k| coords[k] * self.pstr[k]).sum();
        'rows: loop {
            let row_ring = (1..d).any(|k| coords[k] == 1 || coords[k] == self.ext[k]);
            let mut row_positive = false;
            let (mut min0, mut max0) = (usize::MAX, 0usize);
            for c0 in rlo[0]..=rhi[0] {
                let idx = base + c0;
                let val = self.gather(idx);
                debug_assert!(
                    val >= self.cur[idx],
                    "wave odometers must be monotone in time"
                );
                if val != self.cur[idx] {
                    changed += 1;
                }
                self.nxt[idx] = val;
                if val > 0 {
                    row_positive = true;
                    min0 = min0.min(c0);
                    max0 = max0.max(c0);
                    if self.arr[idx] == NEVER {
                        self.arr[idx] = t_next as u32;
                    }
                    if self.frontier.is_none()
                        && (row_ring || c0 == 1 || c0 == self.ext[0])
                    {
                        self.frontier = Some((t_next, self.point_of(idx)));
                    }
                }
            }
            if row_positive {
                match (&mut plo, &mut phi) {
                    (Some(lo), Some(hi)) => {
                        lo[0] = lo[0].min(min0);
                        hi[0] = hi[0].max(max0);
                        for k in 1..d {
                            lo[k] = lo[k].min(coords[k]);
                            hi[k] = hi[k].max(coords[k]);
                        }
                    }
                    _ => {
                        let mut lo = coords.clone();
                        let mut hi = coords.clone();
                        lo[0] = min0;
                        hi[0] = max0;
                        plo = Some(lo);
                        phi = Some(hi);
                    }
                }
            }
            let mut k = 1;
            loop {
                if k >= d {
                    break 'rows;
                }
                coords[k] += 1;
                base += self.pstr[k];
                if coords[k] <= rhi[k] {
                    break;
                }
                base -= (rhi[k] - rlo[k] + 1) * self.pstr[k];
                coords[k] = rlo[k];
                k += 1;
            }
        }
        if changed == 0 {
            return 0;
        }
        std::mem::swap(&mut self.cur, &mut self.nxt);
        self.t = t_next;
        self.region = plo.zip(phi).map(|(lo, hi)| {
            (
                lo.iter().map(|&c| (c - 1).max(1)).collect(),
                hi.iter()
                    .zip(&self.ext)
                    .map(|(&c, &e)| (c + 1).min(e))
                    .collect(),
            )
        });
        changed
    }

    fn at_fixpoint(&self) -> bool {
        let (rlo, rhi) = match &self.region {
            None => return true,
            Some((a, b)) => (a.clone(), b.clone()),
        };
        let d = self.pstr.len();
        let mut coords = rlo.clone();
        let mut base: usize = (1..d).map(|k| coords[k] * self.pstr[k]).sum();
        'rows: loop {
            for c0 in rlo[0]..=rhi[0] {
                let idx = base + c0;
                if self.gather(idx) != self.cur[idx] {
                    return false;
                }
            }
            let mut k = 1;
            loop {
                if k >= d {
                    break 'rows;
                }
                coords[k] += 1;
                base += self.pstr[k];
                if coords[k] <= rhi[k] {
                    break;
                }
                base -= (rhi[k] - rlo[k] + 1) * self.pstr[k];
                coords[k] = rlo[k];
                k += 1;
            }
        }
        true
    }

    /// Run until a fixed point, a frontier hit, or the step budget runs out.
    pub fn run(&mut self, step_budget: u64) -> Result<StabilizeOutcome> {
        if step_budget >= NEVER as u64 {
            return Err(Error::arg(
                "step budget must fit in the arrival-time type",
            ));
        }
        for _ in 0..step_budget {
            if let Some((time, witness)) = self.frontier.clone() {
                return Ok(StabilizeOutcome::FrontierHit { time, witness });
            }
            let changed = self.step();
            if let Some((time, witness)) = self.frontier.clone() {
                return Ok(StabilizeOutcome::FrontierHit { time, witness });
            }
            if changed == 0 {
                return Ok(StabilizeOutcome::Stabilized { time: self.t });
            }
        }
        if self.at_fixpoint() {
            return Ok(StabilizeOutcome::Stabilized { time: self.t });
        }
        Ok(StabilizeOutcome::BudgetExceeded {
            budget: step_budget,
        })
    }

    pub fn time(&self) -> u64 {
        self.t
    }

    pub fn source(&self) -> &[i64] {
        &self.z
    }

    /// Odometer at `p`, which must lie inside the window.
    pub fn value(&self, p: &[i64]) -> u64 {
        self.cur[self.pidx(p)]
    }

    /// First `t >= 1` with a positive odometer at `p`, if it has happened.
    pub fn arrival(&self, p: &[i64]) -> Option<u32> {
        let a = self.arr[self.pidx(p)];
        (a != NEVER).then_some(a)
    }

    pub fn odometer_grid(&self) -> Grid<u64> {
        let mut g = Grid::new_fill(self.win.clone(), 0u64);
        for p in self.win.iter() {
            let v = self.cur[self.pidx(&p)];
            g.set(&p, v);
        }
        g
    }

    pub fn arrival_grid(&self) -> Grid<u32> {
        let mut g = Grid::new_fill(self.win.clone(), NEVER);
        for p in self.win.iter() {
            let a = self.arr[self.pidx(&p)];
            g.set(&p, a);
        }
        g
    }
}

/// One executed wave: outcome, odometers, arrivals, and - when produced by
/// the threshold search - the threshold `M̂`, the penultimate odometer `ũ`,
/// and the cluster `P(z)`.
#[derive(Clone, Debug)]
pub struct WaveRun {
    pub z: Point,
    pub n: u64,
    pub outcome: StabilizeOutcome,
    /// Terminal odometer; present exactly when the run stabilized.
    pub terminal: Option<Grid<u64>>,
    /// First positive time per site for this wave (`NEVER` if not reached).
    pub arrivals: Grid<u32>,
    pub m_hat: Option<u64>,
    pub penultimate: Option<Grid<u64>>,
    pub cluster: Option<Vec<Point>>,
    /// True when some probe ran out of steps, so a verdict may depend on the
    /// truncation rather than the process itself.
    pub window_limited: bool,
}

/// Compact JSON-friendly digest of a [`WaveRun`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WaveRunSummary {
    pub z: Point,
    pub n: u64,
    pub outcome: StabilizeOutcome,
    pub m_hat: Option<u64>,
    pub steps: u64,
    /// Number of sites the wave reached (positive odometer at any time).
    pub support: usize,
    pub cluster_bbox: Option<(Point, Point)>,
}

impl WaveRun {
    pub fn summary(&self) -> WaveRunSummary {
        let steps = match &self.outcome {
            StabilizeOutcome::Stabilized { time } => *time,
            StabilizeOutcome::FrontierHit { time, .. } => *time,
            StabilizeOutcome::BudgetExceeded { budget } => *budget,
        };
        let support = self.arrivals.iter().filter(|(_, &a)| a != NEVER).count();
        let cluster_bbox = self.cluster.as_ref().and_then(|cl| {
            let first = cl.first()?;
            let mut lo = first.clone();
            let mut hi = first.clone();
            for p in cl {
                for k in 0..p.len() {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
            Some((lo, hi))
        });
        WaveRunSummary {
            z: self.z.clone(),
            n: self.n,
            outcome: self.outcome.clone(),
            m_hat: self.m_hat,
            steps,
            support,
            cluster_bbox,
        }
    }
}

/// Execute the n-wave from `z` on `window`. `n = 0` is allowed and reaches
/// its (empty) fixed point immediately.
pub fn run_n_wave(
    spec: &BackgroundSpec,
    z: &[i64],
    n: u64,
    window: &Window,
    step_budget: u64,
) -> Result<WaveRun> {
    let mut proc = WaveProcess::new(spec, z, n, window)?;
    let outcome = proc.run(step_budget)?;
    let terminal = outcome.is_stabilized().then(|| proc.odometer_grid());
    let window_limited = matches!(outcome, StabilizeOutcome::BudgetExceeded { .. });
    Ok(WaveRun {
        z: z.to_vec(),
        n,
        outcome,
        terminal,
        arrivals: proc.arrival_grid(),
        m_hat: None,
        penultimate: None,
        cluster: None,
        window_limited,
    })
}

/// Result of the last-wave threshold search.
#[derive(Clone, Debug)]
pub enum LastWaveOutcome {
    /// The `M̂`-wave run, with `m_hat`, `penultimate`, and `cluster` filled
    /// in. The wave below the threshold is verified to stabilize.
    Found(WaveRun),
    /// Every probed wave up to `n_budget` stabilized. With the flag set, some
    /// probe ran out of steps instead, so the verdict is inconclusive.
    NotFoundWithinBudget { n_budget: u64, window_limited: bool },
}

impl LastWaveOutcome {
    pub fn threshold(&self) -> Option<u64> {
        match self {
            LastWaveOutcome::Found(run) => run.m_hat,
            LastWaveOutcome::NotFoundWithinBudget { .. } => None,
        }
    }
}

/// Smallest `n` whose wave from `z` hits the window frontier. Doubling then
/// bisection; valid because wave odometers are monotone in the source mass.
/// A probe that exhausts its step budget counts as "stabilized" for the
/// search but sets the `window_limited` flag, and the threshold is only
/// reported when the wave just below it verifiably stabilized.
pub fn last_wave_threshold(
    spec: &BackgroundSpec,
    z: &[i64],
    window: &Window,
    n_budget: u64,
    step_budget: u64,
) -> Result<LastWaveOutcome> {
    if n_budget == 0 || step_budget == 0 {
        return Err(Error::arg("budgets must be positive"));
    }
    let mut limited = false;
    let probe = |n: u64, limited: &mut bool| -> Result<WaveRun> {
        let run = run_n_wave(spec, z, n, window, step_budget)?;
        if matches!(run.outcome, StabilizeOutcome::BudgetExceeded { .. }) {
            *limited = true;
        }
        Ok(run)
    };

    let mut lo = 0u64;
    let mut lo_run: Option<WaveRun> = None;
    let mut n = 1u64;
    let (mut hi, mut hi_run) = loop {
        let run = probe(n, &mut limited)?;
        if run.outcome.is_frontier_hit() {
            break (n, run);
        }
        lo = n;
        lo_run = Some(run);
        if n >= n_budget {
            return Ok(LastWaveOutcome::NotFoundWithinBudget {
                n_budget,
                window_limited: limited,
            });
        }
        n = (n * 2).min(n_budget);
    };
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let run = probe(mid, &mut limited)?;
        if run.outcome.is_frontier_hit() {
            hi = mid;
            hi_run = run;
        } else {
            lo = mid;
            lo_run = Some(run);
        }
    }

    let penultimate = if lo == 0 {
        Grid::new_fill(window.clone(), 0u64)
    } else {
        let below = lo_run.expect("the search probed every positive lower bound");
        match below.terminal {
            Some(grid) => grid,
            // The wave below the threshold only ran out of steps; the
            // threshold cannot be certified at this window.
            None => {
                return Ok(LastWaveOutcome::NotFoundWithinBudget {
                    n_budget,
                    window_limited: true,
                })
            }
        }
    };
    let cluster = cluster_of(z, &penultimate);
    let mut run = hi_run;
    run.m_hat = Some(hi);
    run.penultimate = Some(penultimate);
    run.cluster = Some(cluster);
    run.window_limited = limited;
    Ok(LastWaveOutcome::Found(run))
}

/// `P(z) = {z} ∪ {x : some neighbour of x has a positive penultimate
/// odometer}`, sorted. The penultimate support stays clear of the window
/// ring whenever the threshold search certified it, so the dilation never
/// leaves the window.
fn cluster_of(z: &[i64], penultimate: &Grid<u64>) -> Vec<Point> {
    let win = &penultimate.window;
    let d = win.dim();
    let mut set: BTreeSet<Point> = BTreeSet::new();
    set.insert(z.to_vec());
    for p in win.iter() {
        let mut q = p.clone();
        'axes: for k in 0..d {
            for s in [-1i64, 1] {
                q[k] = p[k] + s;
                let hit = penultimate.get(&q).map(|&v| v > 0).unwrap_or(false);
                q[k] = p[k];
                if hit {
                    set.insert(p.clone());
                    break 'axes;
                }
            }
        }
    }
    set.into_iter().collect()
}

/// The penultimate cluster of `z`, or `None` when the threshold search does
/// not find `M̂` within the chip budget.
pub fn penultimate_cluster(
    spec: &BackgroundSpec,
    z: &[i64],
    window: &Window,
    n_budget: u64,
    step_budget: u64,
) -> Result<Option<Vec<Point>>> {
    match last_wave_threshold(spec, z, window, n_budget, step_budget)? {
        LastWaveOutcome::Found(run) => Ok(run.cluster),
        LastWaveOutcome::NotFoundWithinBudget { .. } => Ok(None),
    }
}

/// Default local window radius for per-site cluster searches.
const CLUSTER_BASE_RADIUS: i64 = 8;

/// Compute `P(x)` on a window centered at `x`, escalating the radius (and
/// the step budget with it) until the search certifies. A search that rules
/// out a threshold within the chip budget *without* hitting any limit is a
/// definitive failure, since stabilized probes are exact.
fn certified_cluster(
    spec: &BackgroundSpec,
    x: &[i64],
    base_radius: i64,
    n_budget: u64,
    step_budget: u64,
) -> Result<Vec<Point>> {
    let mut radius = base_radius.max(1);
    let mut steps = step_budget;
    for _ in 0..4 {
        let win = Window::centered(x, radius)?;
        match last_wave_threshold(spec, x, &win, n_budget, steps)? {
            LastWaveOutcome::Found(run) if !run.window_limited => {
                return Ok(run.cluster.expect("the threshold search fills the cluster"));
            }
            LastWaveOutcome::NotFoundWithinBudget {
                window_limited: false,
                ..
            } => {
                return Err(Error::resource(format!(
                    "no last-wave threshold within the chip budget at {x:?}"
                )));
            }
            _ => {
                radius *= 2;
                steps = steps.saturating_mul(2);
            }
        }
    }
    Err(Error::resource(format!(
        "the penultimate cluster at {x:?} did not certify within radius {}",
        radius / 2
    )))
}

/// Memoized per-site penultimate clusters over one background.
pub struct PenultimateOracle<'a> {
    spec: &'a BackgroundSpec,
    base_radius: i64,
    n_budget: u64,
    step_budget: u64,
    cache: HashMap<Point, Vec<Point>>,
}

impl<'a> PenultimateOracle<'a> {
    pub fn new(spec: &'a BackgroundSpec, n_budget: u64, step_budget: u64) -> Self {
        PenultimateOracle {
            spec,
            base_radius: CLUSTER_BASE_RADIUS,
            n_budget,
            step_budget,
            cache: HashMap::new(),
        }
    }

    pub fn cluster(&mut self, x: &[i64]) -> Result<Vec<Point>> {
        if let Some(c) = self.cache.get(x) {
            return Ok(c.clone());
        }
        let c = certified_cluster(
            self.spec,
            x,
            self.base_radius,
            self.n_budget,
            self.step_budget,
        )?;
        self.cache.insert(x.to_vec(), c.clone());
        Ok(c)
    }
}

/// Which arrival-time field to measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    /// `T`: first toppling time in the sandpile seeded with the explosion
    /// threshold at the source.
    Explosion,
    /// `T̂`: first positive time of the last wave.
    LastWave,
    /// `T̃`: first time the last wave is positive on all of `P(x)`.
    PenultimateCluster,
}

/// Per-site first-arrival times for one of the three processes, measured on
/// a window. Unreached sites carry [`NEVER`].
#[derive(Clone, Debug)]
pub struct ArrivalField {
    pub window: Window,
    pub kind: ProcessKind,
    pub z: Point,
    pub times: Grid<u32>,
    /// Chip count at the source: the explosion threshold `M` for `T`, the
    /// last-wave threshold `M̂` for `T̂` and `T̃`.
    pub n_used: u64,
    /// `T̃` only: some `P(x)` with `x != z` contained the source (the
    /// source's own cluster necessarily does and is not counted).
    pub source_overlap: bool,
}

fn restrict_to(window: &Window, big: &Grid<u32>) -> Grid<u32> {
    let mut g = Grid::new_fill(window.clone(), NEVER);
    for p in window.iter() {
        let v = *big.get(&p).expect("the covering window contains the field");
        g.set(&p, v);
    }
    g
}

/// Run the last-wave threshold on windows inflated around `field_win` until
/// every field site (and every extra target) has a recorded arrival, so the
/// returned times are exact rather than cut short by the frontier latch.
fn covering_last_wave(
    spec: &BackgroundSpec,
    z: &[i64],
    field_win: &Window,
    extra: &BTreeSet<Point>,
    n_budget: u64,
    step_budget: u64,
) -> Result<(u64, Grid<u32>)> {
    let d = field_win.dim();
    let max_ext = field_win.extents().iter().max().copied().unwrap_or(1) as i64;
    let mut pad = 0i64;
    for p in extra {
        for k in 0..d {
            pad = pad
                .max(field_win.lo()[k] - p[k])
                .max(p[k] - field_win.hi()[k]);
        }
    }
    let mut margin = pad + max_ext;
    let mut steps = step_budget;
    for _ in 0..4 {
        let big = field_win.inflate(margin)?;
        match last_wave_threshold(spec, z, &big, n_budget, steps)? {
            LastWaveOutcome::Found(run) => {
                let arr = &run.arrivals;
                let covered = field_win
                    .iter()
                    .all(|p| *arr.get(&p).expect("inflated window covers the field") != NEVER)
                    && extra
                        .iter()
                        .all(|p| arr.get(p).map(|&a| a != NEVER).unwrap_or(false));
                if covered {
                    let m_hat = run.m_hat.expect("a found threshold carries M̂");
                    return Ok((m_hat, run.arrivals));
                }
            }
            LastWaveOutcome::NotFoundWithinBudget {
                window_limited: false,
                ..
            } => {
                return Err(Error::resource(format!(
                    "no last-wave threshold within the chip budget from {z:?}"
                )));
            }
            LastWaveOutcome::NotFoundWithinBudget { .. } => {}
        }
        margin *= 2;
        steps = steps.saturating_mul(2);
    }
    Err(Error::resource(
        "the last wave did not cover the window before reaching the run boundary".to_string(),
    ))
}

/// Seed the explosion threshold at `z` and record first toppling times,
/// inflating the run window until the whole field window has toppled.
fn explosion_arrivals(
    spec: &BackgroundSpec,
    z: &[i64],
    field_win: &Window,
    n_budget: u64,
    step_budget: u64,
) -> Result<(u64, Grid<u32>)> {
    let max_ext = field_win.extents().iter().max().copied().unwrap_or(1) as i64;
    let mut margin = max_ext;
    let mut steps = step_budget;
    for _ in 0..4 {
        let big = field_win.inflate(margin)?;
        let m = match explosion_threshold(spec, z, &big, n_budget, steps)? {
            ExplosionOutcome::Found { m, .. } => m,
            ExplosionOutcome::NotFoundWithinBudget { .. } => {
                return Err(Error::resource(format!(
                    "no explosion threshold within the chip budget from {z:?}"
                )));
            }
        };
        let mut state = SandpileState::from_background(spec, &big, BoundaryMode::Open)?;
        state.record_arrivals()?;
        state.add_chips(z, m as i64)?;
        let outcome = state.stabilize(steps);
        let arr = state.arrival_grid().expect("arrivals were recorded");
        let covered = field_win
            .iter()
            .all(|p| *arr.get(&p).expect("inflated window covers the field") != NEVER);
        if covered {
            return Ok((m, arr));
        }
        if outcome.is_stabilized() {
            return Err(Error::resource(format!(
                "the avalanche seeded at {z:?} stabilized without covering the window"
            )));
        }
        margin *= 2;
        steps = steps.saturating_mul(2);
    }
    Err(Error::resource(
        "the avalanche did not cover the window before reaching the run boundary".to_string(),
    ))
}

/// Measure one of the three arrival-time fields from `z` over `window`.
///
/// The run itself executes on a larger window so that every field site is
/// reached while the truncation is still exact; arrivals recorded up to the
/// moment the run's own boundary ring activates agree with the
/// infinite-lattice process.
pub fn arrival_field(
    spec: &BackgroundSpec,
    kind: ProcessKind,
    z: &[i64],
    window: &Window,
    n_budget: u64,
    step_budget: u64,
) -> Result<ArrivalField> {
    if !window.contains(z) {
        return Err(Error::arg(format!(
            "field source {z:?} must lie inside the window"
        )));
    }
    if n_budget == 0 || step_budget == 0 {
        return Err(Error::arg("budgets must be positive"));
    }
    match kind {
        ProcessKind::Explosion => {
            let (m, arr) = explosion_arrivals(spec, z, window, n_budget, step_budget)?;
            Ok(ArrivalField {
                window: window.clone(),
                kind,
                z: z.to_vec(),
                times: restrict_to(window, &arr),
                n_used: m,
                source_overlap: false,
            })
        }
        ProcessKind::LastWave => {
            let (m_hat, arr) =
                covering_last_wave(spec, z, window, &BTreeSet::new(), n_budget, step_budget)?;
            Ok(ArrivalField {
                window: window.clone(),
                kind,
                z: z.to_vec(),
                times: restrict_to(window, &arr),
                n_used: m_hat,
                source_overlap: false,
            })
        }
        ProcessKind::PenultimateCluster => {
            let sites: Vec<Point> = window.iter().collect();
            let clusters: Vec<Vec<Point>> = sites
                .par_iter()
                .map(|x| certified_cluster(spec, x, CLUSTER_BASE_RADIUS, n_budget, step_budget))
                .collect::<Result<_>>()?;
            let mut needed: BTreeSet<Point> = BTreeSet::new();
            for cl in &clusters {
                needed.extend(cl.iter().cloned());
            }
            let (m_hat, arr) =
                covering_last_wave(spec, z, window, &needed, n_budget, step_budget)?;
            let mut times = Grid::new_fill(window.clone(), NEVER);
            let mut overlap = false;
            for (x, cl) in sites.iter().zip(&clusters) {
                let mut t = 0u32;
                for y in cl {
                    let a = *arr.get(y).expect("cluster sites lie in the covering window");
                    debug_assert!(a != NEVER, "the covering run reached every cluster site");
                    t = t.max(a);
                }
                times.set(x, t);
                if x.as_slice() != z && cl.binary_search(&z.to_vec()).is_ok() {
                    overlap = true;
                }
            }
            Ok(ArrivalField {
                window: window.clone(),
                kind,
                z: z.to_vec(),
                times,
                n_used: m_hat,
                source_overlap: overlap,
            })
        }
    }
}
