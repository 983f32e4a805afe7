//! Executable explosion criteria: crossing times on cubes, good-cube
//! renormalization diagnostics, box-crossing predicates, recurrence,
//! the bootstrap-percolation coupling, dimensional reduction, and the
//! explosion threshold search.

use serde::{Deserialize, Serialize};

use crate::background::{splitmix64, BackgroundSpec, Family};
use crate::engine::{BoundaryMode, SandpileState};
use crate::grid::{Grid, Point, Window};
use crate::{Error, Result};

/// Crossing time for one line: run `{Q_k^c ∪ L}`-frozen toppling on the cube
/// `offset + {1..k}^d` with the odometer seeded at 1 on the line
/// `L^{(axis,z)} = {x : x_axis ∈ 1..k, x_j = z_j otherwise}` and return the
/// first time the odometer is 1 on the whole cube.
///
/// `z` is given relative to the closed cube (components in `0..=k+1`; the
/// component along `axis` is ignored). Times beyond `k^d` are reported as
/// `None` (∞): the goodness predicate only compares against `k^d`, so longer
/// runs are wasted work.
pub fn crossing_time(
    spec: &BackgroundSpec,
    k: i64,
    axis: usize,
    z: &[i64],
    offset: &[i64],
) -> Result<Option<u32>> {
    let d = spec.dimension;
    if axis >= d {
        return Err(Error::arg("line axis out of range"));
    }
    if z.len() != d || offset.len() != d {
        return Err(Error::arg("base point dimension mismatch"));
    }
    if k < 1 {
        return Err(Error::arg("cube side must be >= 1"));
    }
    for (j, &c) in z.iter().enumerate() {
        if j != axis && !(0..=k + 1).contains(&c) {
            return Err(Error::arg("base point outside the closed cube"));
        }
    }
    let closure = Window::new(offset.to_vec(), offset.iter().map(|o| o + k + 1).collect())?;
    let cube = Window::new(
        offset.iter().map(|o| o + 1).collect(),
        offset.iter().map(|o| o + k).collect(),
    )?;

    let mut state = SandpileState::from_background(spec, &closure, BoundaryMode::Open)?;
    state.record_arrivals()?;
    state.freeze_ring()?;
    let mut line = Vec::with_capacity(k as usize);
    for j in 1..=k {
        let mut p: Point = z.iter().zip(offset).map(|(a, o)| a + o).collect();
        p[axis] = offset[axis] + j;
        line.push(p);
    }
    state.freeze(&line)?;
    for p in &line {
        state.seed_odometer(p, 1)?;
    }

    let cap = (k as u64).pow(d as u32);
    state.stabilize(cap + 1);

    // The line's cube portion is pinned at odometer 1 and counts as covered;
    // every other cube site must have fired.
    let mut worst = 1u32;
    for p in cube.iter() {
        if on_line(&p, axis, z, offset) {
            continue;
        }
        match state.arrival(&p) {
            Some(t) if u64::from(t) <= cap => worst = worst.max(t),
            _ => return Ok(None),
        }
    }
    Ok(Some(worst))
}

fn on_line(p: &[i64], axis: usize, z: &[i64], offset: &[i64]) -> bool {
    p.iter()
        .zip(z.iter().zip(offset))
        .enumerate()
        .all(|(j, (&pc, (&zc, &oc)))| j == axis || pc == zc + oc)
}

/// One line of a crossing sweep: the direction, the canonical base point on
/// the outer boundary (component along `axis` set to 0), and the time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossingSample {
    pub axis: usize,
    pub base: Point,
    pub time: Option<u32>,
}

/// Full crossing sweep of one cube: every distinct line in every direction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossingReport {
    pub k: i64,
    pub offset: Point,
    pub times: Vec<CrossingSample>,
    /// Largest finite crossing time; `None` when some line failed to cross.
    pub max_time: Option<u32>,
    /// True when every line crossed within `k^d` steps.
    pub good: bool,
}

/// Sweep all `d · (k+2)^(d-1)` distinct lines of the cube `offset + {1..k}^d`.
/// Lines are canonically based at the outer-boundary point with `z_axis = 0`.
pub fn crossing_report(spec: &BackgroundSpec, k: i64, offset: &[i64]) -> Result<CrossingReport> {
    let d = spec.dimension;
    let mut times = Vec::new();
    let mut max_time = Some(0u32);
    for axis in 0..d {
        let transverse = Window::new(vec![0; d - 1], vec![k + 1; d - 1])?;
        for tr in transverse.iter() {
            let mut z = vec![0i64; d];
            let mut ti = tr.iter();
            for (j, c) in z.iter_mut().enumerate() {
                if j != axis {
                    *c = *ti.next().expect("transverse coordinate");
                }
            }
            let time = crossing_time(spec, k, axis, &z, offset)?;
            max_time = match (max_time, time) {
                (Some(m), Some(t)) => Some(m.max(t)),
                _ => None,
            };
            times.push(CrossingSample { axis, base: z, time });
        }
    }
    Ok(CrossingReport { k, offset: offset.to_vec(), times, max_time, good: max_time.is_some() })
}

/// A sampled pair of good cubes with its L1 and chemical (graph) distance on
/// the good-cube graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceSample {
    pub a: Point,
    pub b: Point,
    pub l1: i64,
    pub chemical: u32,
}

/// Classification of a macroscopic window of cubes by the crossing sweep,
/// with connected components of the good set and sampled chemical distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodCubeMap {
    pub k: i64,
    pub macro_window: Window,
    pub good: Grid<bool>,
    /// Component id per macro site; -1 for cubes that are not good.
    pub component: Grid<i32>,
    pub component_sizes: Vec<usize>,
    /// Id of the largest component, if any cube is good.
    pub largest: Option<i32>,
    /// Whether the largest component touches every face of the macro window.
    pub spans: bool,
    pub distance_samples: Vec<DistanceSample>,
}

/// Classify each cube `j·k + {1..k}^d` for `j` in `macro_window` by a full
/// crossing sweep, then decompose the good set into components and sample
/// chemical distances inside the largest one.
pub fn good_cube_map(spec: &BackgroundSpec, k: i64, macro_window: &Window) -> Result<GoodCubeMap> {
    let d = spec.dimension;
    if macro_window.dim() != d {
        return Err(Error::arg("macro window dimension mismatch"));
    }
    let mut good = Grid::new_fill(macro_window.clone(), false);
    for j in macro_window.iter() {
        let offset: Point = j.iter().map(|c| c * k).collect();
        let report = crossing_report(spec, k, &offset)?;
        good.set(&j, report.good);
    }

    // Connected components of the good set under macro-lattice adjacency.
    let mut component = Grid::new_fill(macro_window.clone(), -1i32);
    let mut component_sizes = Vec::new();
    let volume = macro_window.volume();
    for start in 0..volume {
        if !good.data[start] || component.data[start] >= 0 {
            continue;
        }
        let id = component_sizes.len() as i32;
        let mut size = 0usize;
        let mut queue = vec![start];
        component.data[start] = id;
        while let Some(i) = queue.pop() {
            size += 1;
            let p = macro_window.point_at(i);
            for (jdx, _) in neighbors_in(macro_window, &p) {
                if good.data[jdx] && component.data[jdx] < 0 {
                    component.data[jdx] = id;
                    queue.push(jdx);
                }
            }
        }
        component_sizes.push(size);
    }
    let largest = component_sizes
        .iter()
        .enumerate()
        .max_by_key(|(_, s)| **s)
        .map(|(i, _)| i as i32);

    let spans = match largest {
        Some(id) => {
            let mut touch = vec![[false; 2]; d];
            for (p, &c) in component.iter() {
                if c == id {
                    for a in 0..d {
                        if p[a] == macro_window.lo()[a] {
                            touch[a][0] = true;
                        }
                        if p[a] == macro_window.hi()[a] {
                            touch[a][1] = true;
                        }
                    }
                }
            }
            touch.iter().all(|t| t[0] && t[1])
        }
        None => false,
    };

    let distance_samples = match largest {
        Some(id) => sample_chemical_distances(spec.seed, &good, &component, id),
        None => Vec::new(),
    };

    Ok(GoodCubeMap {
        k,
        macro_window: macro_window.clone(),
        good,
        component,
        component_sizes,
        largest,
        spans,
        distance_samples,
    })
}

fn neighbors_in<'a>(win: &'a Window, p: &'a [i64]) -> impl Iterator<Item = (usize, Point)> + 'a {
    (0..win.dim()).flat_map(move |a| {
        [-1i64, 1].into_iter().filter_map(move |s| {
            let mut q = p.to_vec();
            q[a] += s;
            win.index_of(&q).map(|i| (i, q))
        })
    })
}

fn sample_chemical_distances(
    seed: u64,
    good: &Grid<bool>,
    component: &Grid<i32>,
    id: i32,
) -> Vec<DistanceSample> {
    let win = &good.window;
    let members: Vec<usize> =
        (0..component.data.len()).filter(|&i| component.data[i] == id).collect();
    if members.len() < 2 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut state = seed ^ 0x676f6f645f637562; // distinct stream per purpose
    let mut next = || {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        splitmix64(state)
    };
    for _ in 0..32.min(members.len() * (members.len() - 1) / 2) {
        let ai = members[(next() % members.len() as u64) as usize];
        let bi = members[(next() % members.len() as u64) as usize];
        if ai == bi {
            continue;
        }
        let a = win.point_at(ai);
        let b = win.point_at(bi);
        // BFS over good sites from a.
        let mut dist: Grid<u32> = Grid::new_fill(win.clone(), u32::MAX);
        dist.data[ai] = 0;
        let mut frontier = vec![ai];
        'bfs: while !frontier.is_empty() {
            let mut nextf = Vec::new();
            for &i in &frontier {
                let base = dist.data[i];
                let p = win.point_at(i);
                for (j, _) in neighbors_in(win, &p) {
                    if good.data[j] && dist.data[j] == u32::MAX {
                        dist.data[j] = base + 1;
                        if j == bi {
                            break 'bfs;
                        }
                        nextf.push(j);
                    }
                }
            }
            frontier = nextf;
        }
        let chem = dist.data[bi];
        if chem == u32::MAX {
            continue; // same component, unreachable would be a bug; skip defensively
        }
        let l1: i64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        debug_assert!(u64::from(chem) >= l1 as u64);
        out.push(DistanceSample { a, b, l1, chemical: chem });
    }
    out
}

/// Embed box values into their one-site closure, with zero chips on the ring.
fn embed_in_closure(values: &Grid<i32>) -> Result<Grid<i32>> {
    let closure = values.window.inflate(1)?;
    let mut chips = Grid::new_fill(closure, 0i32);
    for (p, &v) in values.iter() {
        chips.set(&p, v);
    }
    Ok(chips)
}

/// Whether the box can be crossed in the given direction: freeze the
/// complement, seed the odometer at 1 on the outer face `direction` (axes
/// `0..d` name the low faces, `d..2d` the high ones), and ask whether every
/// box site topples within `|B|` steps.
pub fn is_box_crossing(values: &Grid<i32>, direction: usize) -> Result<bool> {
    let d = values.window.dim();
    if direction >= 2 * d {
        return Err(Error::arg("face index out of range"));
    }
    let axis = direction % d;
    let high = direction >= d;
    let chips = embed_in_closure(values)?;
    let mut state = SandpileState::from_grid(&chips, BoundaryMode::Open)?;
    state.freeze_ring()?;
    let closure = chips.window.clone();
    let face_coord = if high { closure.hi()[axis] } else { closure.lo()[axis] };
    let face: Vec<Point> =
        closure.iter().filter(|p| p[axis] == face_coord).collect();
    state.freeze(&face)?;
    for p in &face {
        state.seed_odometer(p, 1)?;
    }
    state.stabilize(values.window.volume() as u64);
    Ok(values.window.iter().all(|p| state.toppled(&p)))
}

/// Result of the every-line crossing sweep behind strong box-crossing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrongCrossing {
    pub passed: bool,
    pub lines_total: usize,
    pub lines_checked: usize,
    /// False when the sweep was subsampled (boxes with more than 16384
    /// lines); the checked count is reported either way.
    pub exhaustive: bool,
}

const LINE_SWEEP_LIMIT: usize = 16384;

/// Strong box-crossing: for every direction and every distinct line through
/// the closed box, the `{B^c ∪ L}`-frozen toppling seeded at 1 on the line
/// reaches odometer ≥ 1 on the whole box within `|k| = Σ sides` steps.
pub fn is_strongly_box_crossing(values: &Grid<i32>) -> Result<StrongCrossing> {
    let win = values.window.clone();
    let d = win.dim();
    let sides: Vec<i64> = win.extents().iter().map(|&e| e as i64).collect();
    let budget: u64 = sides.iter().map(|&s| s as u64).sum();
    let chips = embed_in_closure(values)?;

    // Enumerate distinct lines: per axis, one per transverse position in the
    // closure. Above the sweep limit, take a deterministic subsample.
    let mut lines: Vec<(usize, Point)> = Vec::new();
    for axis in 0..d {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for j in 0..d {
            if j != axis {
                lo.push(win.lo()[j] - 1);
                hi.push(win.hi()[j] + 1);
            }
        }
        if lo.is_empty() {
            lines.push((axis, Vec::new()));
            continue;
        }
        for tr in Window::new(lo, hi)?.iter() {
            lines.push((axis, tr));
        }
    }
    let lines_total = lines.len();
    let exhaustive = lines_total <= LINE_SWEEP_LIMIT;
    if !exhaustive {
        let mut s = 0xb0c7_u64;
        let mut keep = Vec::with_capacity(LINE_SWEEP_LIMIT);
        for _ in 0..LINE_SWEEP_LIMIT {
            s = s.wrapping_add(0x9e3779b97f4a7c15);
            keep.push(lines[(splitmix64(s) % lines_total as u64) as usize].clone());
        }
        lines = keep;
    }

    let mut lines_checked = 0usize;
    for (axis, tr) in &lines {
        lines_checked += 1;
        let mut line = Vec::with_capacity(sides[*axis] as usize);
        for c in win.lo()[*axis]..=win.hi()[*axis] {
            let mut p = Vec::with_capacity(d);
            let mut ti = tr.iter();
            for j in 0..d {
                p.push(if j == *axis { c } else { *ti.next().expect("transverse") });
            }
            line.push(p);
        }
        let mut state = SandpileState::from_grid(&chips, BoundaryMode::Open)?;
        state.freeze_ring()?;
        state.freeze(&line)?;
        for p in &line {
            state.seed_odometer(p, 1)?;
        }
        state.stabilize(budget);
        let covered = win
            .iter()
            .all(|p| state.toppled(&p) || on_segment(&p, *axis, tr));
        if !covered {
            return Ok(StrongCrossing { passed: false, lines_total, lines_checked, exhaustive });
        }
    }
    Ok(StrongCrossing { passed: true, lines_total, lines_checked, exhaustive })
}

fn on_segment(p: &[i64], axis: usize, transverse: &[i64]) -> bool {
    let mut ti = transverse.iter();
    for (j, &c) in p.iter().enumerate() {
        if j == axis {
            continue;
        }
        if c != *ti.next().expect("transverse coordinate") {
            return false;
        }
    }
    true
}

/// Whether the background restricted to the grid's box is recurrent: freeze
/// the complement, fire the outer boundary once (odometer seeded at 1 on
/// every complement site adjacent to the box), and ask whether every box
/// site topples within `|V|` steps.
pub fn is_recurrent_on(values: &Grid<i32>) -> Result<bool> {
    let win = values.window.clone();
    let d = win.dim();
    let chips = embed_in_closure(values)?;
    let mut state = SandpileState::from_grid(&chips, BoundaryMode::Open)?;
    state.freeze_ring()?;
    let mut boundary = Vec::new();
    for axis in 0..d {
        for (side, coord) in [(0, win.lo()[axis] - 1), (1, win.hi()[axis] + 1)] {
            let _ = side;
            let mut lo = win.lo().to_vec();
            let mut hi = win.hi().to_vec();
            lo[axis] = coord;
            hi[axis] = coord;
            for p in Window::new(lo, hi)?.iter() {
                boundary.push(p);
            }
        }
    }
    for p in &boundary {
        state.seed_odometer(p, 1)?;
    }
    state.stabilize(win.volume() as u64);
    let covered = win.iter().all(|p| state.toppled(&p));
    Ok(covered)
}

/// Whether the threshold field (values in `{d, 2d}`) internally spans its
/// box: the complement-frozen, once-only toppling from a zero odometer
/// topples every site. Runs both the capped sandpile and the direct
/// d-neighbor bootstrap infection and asserts they agree site by site.
pub fn bootstrap_internally_spanned(values: &Grid<i32>) -> Result<bool> {
    let win = values.window.clone();
    let d = win.dim() as i32;
    if values.data.iter().any(|&v| v != d && v != 2 * d) {
        return Err(Error::arg("threshold field values must be d or 2d"));
    }

    // Sandpile route: once-only toppling with the complement frozen.
    let chips = embed_in_closure(values)?;
    let mut state = SandpileState::from_grid(&chips, BoundaryMode::Open)?;
    state.freeze_ring()?;
    state.set_uniform_cap(1)?;
    state.stabilize(win.volume() as u64 + 1);

    // Bootstrap route: 2d-sites start infected; a site with at least d
    // infected neighbors becomes infected.
    let mut infected = Grid::new_fill(win.clone(), false);
    for (i, &v) in values.data.iter().enumerate() {
        infected.data[i] = v == 2 * d;
    }
    loop {
        let mut grew = false;
        let mut nextg = infected.clone();
        for i in 0..infected.data.len() {
            if infected.data[i] {
                continue;
            }
            let p = win.point_at(i);
            let count = neighbors_in(&win, &p).filter(|(j, _)| infected.data[*j]).count();
            if count as i32 >= d {
                nextg.data[i] = true;
                grew = true;
            }
        }
        infected = nextg;
        if !grew {
            break;
        }
    }

    let mut spanned = true;
    for (p, &inf) in infected.iter() {
        let toppled = state.toppled(&p);
        assert_eq!(
            toppled, inf,
            "once-only toppling and bootstrap infection disagree at {p:?}"
        );
        spanned &= inf;
    }
    Ok(spanned)
}

/// Check the face-layer coupling between constrained d-dimensional toppling
/// and the (d-1)-dimensional process on the face values minus one: the face
/// odometers must agree at every step, and off-support chips must satisfy
/// `s_d = s_{d-1} + 2`.
///
/// `face` names which box face plays the seeded role (`0..d` low, `d..2d`
/// high); the box is reoriented so that face becomes the low face of axis 0.
/// Background values must lie in `{d, 2d-1}`.
pub fn dimensional_reduction_check(values: &Grid<i32>, face: usize) -> Result<bool> {
    let d = values.window.dim();
    if d < 2 {
        return Err(Error::arg("dimensional reduction needs d >= 2"));
    }
    if face >= 2 * d {
        return Err(Error::arg("face index out of range"));
    }
    let dv = d as i32;
    if values.data.iter().any(|&v| v != dv && v != 2 * dv - 1) {
        return Err(Error::arg("dimensional reduction requires values in {d, 2d-1}"));
    }
    let values = reorient_to_low_axis0(values, face);
    let win = values.window.clone();

    // d-dimensional side: complement frozen, interior beyond the face layer
    // pinned at odometer 0, face layer capped at one toppling, and the
    // boundary layer behind the face fired once.
    let chips = embed_in_closure(&values)?;
    let mut state_d = SandpileState::from_grid(&chips, BoundaryMode::Open)?;
    state_d.freeze_ring()?;
    let face_coord = win.lo()[0];
    let deep: Vec<Point> = win.iter().filter(|p| p[0] > face_coord).collect();
    state_d.freeze(&deep)?;
    state_d.set_uniform_cap(1)?;
    let mut lo = win.lo().to_vec();
    let mut hi = win.hi().to_vec();
    lo[0] = face_coord - 1;
    hi[0] = face_coord - 1;
    for p in Window::new(lo, hi)?.iter() {
        state_d.seed_odometer(&p, 1)?;
    }

    // (d-1)-dimensional side: face values minus one, complement frozen, all
    // sites capped at one toppling, no seed.
    let fwin = Window::new(win.lo()[1..].to_vec(), win.hi()[1..].to_vec())?;
    let mut fvals = Grid::new_fill(fwin.clone(), 0i32);
    for q in fwin.iter() {
        let mut p = vec![face_coord];
        p.extend_from_slice(&q);
        fvals.set(&q, values.get(&p).copied().expect("face value") - 1);
    }
    let fchips = embed_in_closure(&fvals)?;
    let mut state_f = SandpileState::from_grid(&fchips, BoundaryMode::Open)?;
    state_f.freeze_ring()?;
    state_f.set_uniform_cap(1)?;

    let rounds = fwin.volume() as u64 + 2;
    for _ in 0..=rounds {
        for q in fwin.iter() {
            let mut p = vec![face_coord];
            p.extend_from_slice(&q);
            let ud = state_d.odometer(&p);
            let uf = state_f.odometer(&q);
            if ud != uf {
                return Ok(false);
            }
            if ud == 0 && state_d.chips(&p) != state_f.chips(&q) + 2 {
                return Ok(false);
            }
        }
        let fired_d = state_d.parallel_step();
        let fired_f = state_f.parallel_step();
        if fired_d == 0 && fired_f == 0 {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Reorient a box grid so that the named face becomes the low face of
/// axis 0: swap that axis to the front and reflect if it was a high face.
fn reorient_to_low_axis0(values: &Grid<i32>, face: usize) -> Grid<i32> {
    let win = &values.window;
    let d = win.dim();
    let axis = face % d;
    let high = face >= d;
    let mut order: Vec<usize> = (0..d).collect();
    order.swap(0, axis);
    let lo: Vec<i64> = order.iter().map(|&j| win.lo()[j]).collect();
    let hi: Vec<i64> = order.iter().map(|&j| win.hi()[j]).collect();
    let new_win = Window::new(lo, hi).expect("permuted window");
    let mut out = Grid::new_fill(new_win.clone(), 0i32);
    for (p, &v) in values.iter() {
        let mut q: Vec<i64> = order.iter().map(|&j| p[j]).collect();
        if high {
            q[0] = new_win.lo()[0] + new_win.hi()[0] - q[0];
        }
        out.set(&q, v);
    }
    out
}

/// Certificate attached to a found explosion threshold for the checkerboard
/// counterexample families: a sub-box on which the origin-block modified
/// configuration is strongly box-crossing and recurrent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplosionCertificate {
    pub sub_box: Window,
    pub strongly_box_crossing: bool,
    pub recurrent: bool,
}

/// Result of the explosion threshold search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ExplosionOutcome {
    Found { m: u64, certificate: Option<ExplosionCertificate> },
    NotFoundWithinBudget { n_budget: u64 },
}

impl ExplosionOutcome {
    pub fn threshold(&self) -> Option<u64> {
        match self {
            ExplosionOutcome::Found { m, .. } => Some(*m),
            ExplosionOutcome::NotFoundWithinBudget { .. } => None,
        }
    }
}

/// Search for the least `n ≥ 1` such that the background plus `n` chips at
/// `z` hits the window frontier: double from 1, then bisect (sound because
/// adding chips only raises the odometer). Runs that exhaust the step budget
/// without stabilizing or reaching the frontier count as not exploded, so
/// the step budget should comfortably exceed the window radius.
///
/// For the checkerboard counterexample families the result carries an
/// advisory certificate: the modified background reached by toppling the
/// origin block (chips `η + Δ(1{η ≥ 2d-2} + 1{2×2 block at 0})`) is checked
/// for strong box-crossing and recurrence on a tile-aligned sub-box. The
/// primary decision remains the frontier-hit run.
pub fn explosion_threshold(
    spec: &BackgroundSpec,
    z: &[i64],
    window: &Window,
    n_budget: u64,
    step_budget: u64,
) -> Result<ExplosionOutcome> {
    if n_budget == 0 || step_budget == 0 {
        return Err(Error::arg("budgets must be positive"));
    }
    if !window.contains(z) {
        return Err(Error::arg("seed outside window"));
    }
    if n_budget > i32::MAX as u64 / 2 {
        return Err(Error::arg("chip budget too large for the chip type"));
    }
    let exploded = |n: u64| -> Result<bool> {
        let mut state = SandpileState::from_background(spec, window, BoundaryMode::Open)?;
        state.add_chips(z, n as i64)?;
        Ok(state.stabilize(step_budget).is_frontier_hit())
    };

    let mut lo = 0u64; // largest n known not to explode
    let mut n = 1u64;
    // Doubling phase: find a chip count that explodes, or exhaust the budget.
    let mut hi = loop {
        if exploded(n)? {
            break n;
        }
        lo = n;
        if n >= n_budget {
            return Ok(ExplosionOutcome::NotFoundWithinBudget { n_budget });
        }
        n = (n * 2).min(n_budget);
    };
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if exploded(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }

    let certificate = match spec.family {
        Family::Counterexample { .. } | Family::CounterexampleStacked { .. } => {
            Some(counterexample_certificate(spec)?)
        }
        _ => None,
    }
    .filter(|c| c.strongly_box_crossing && c.recurrent);
    Ok(ExplosionOutcome::Found { m: hi, certificate })
}

/// Modified background after the initial toppling phase of the checkerboard
/// counterexample: every site with at least `2d-2` chips fires once, as does
/// the 2×2 block of corner sites `{0,-e1} × {0,-e2}` around the origin.
/// Returns the resulting values at `x` (finite for any `x`).
pub fn counterexample_modified_value(spec: &BackgroundSpec, x: &[i64]) -> i32 {
    let d = spec.dimension as i32;
    // The corner-site block is a 2×2 square in the first two coordinates; in
    // the stacked family it extends as a column through every extra axis.
    let w = |p: &[i64]| -> i64 {
        let mut v = i64::from(spec.at(p) >= 2 * d - 2);
        if (p[0] == 0 || p[0] == -1) && (p[1] == 0 || p[1] == -1) {
            v += 1;
        }
        v
    };
    let mut laplacian = -2 * i64::from(d) * w(x);
    let mut q = x.to_vec();
    for a in 0..spec.dimension {
        for s in [-1i64, 1] {
            q.copy_from_slice(x);
            q[a] += s;
            laplacian += w(&q);
        }
    }
    spec.at(x) + laplacian as i32
}

fn counterexample_certificate(spec: &BackgroundSpec) -> Result<ExplosionCertificate> {
    // A tile-aligned 4×4(×4…) sub-box one block away from the origin, so the
    // origin block's extra topplings do not overlap it.
    let d = spec.dimension;
    let sub_box = Window::new(vec![4; d], vec![7; d])?;
    let mut values = Grid::new_fill(sub_box.clone(), 0i32);
    for p in sub_box.iter() {
        let v = counterexample_modified_value(spec, &p);
        values.set(&p, v);
    }
    let strongly = is_strongly_box_crossing(&values)?;
    let recurrent = is_recurrent_on(&values)?;
    Ok(ExplosionCertificate {
        sub_box,
        strongly_box_crossing: strongly.passed,
        recurrent,
    })
}
