//! Parallel (synchronous) toppling over a finite window.
//!
//! Each step, every site holding at least 2d chips — and not pinned — topples
//! exactly once, all sites simultaneously: it loses 2d chips and each of its
//! 2d neighbours gains one. The odometer v counts topplings per site. Pinned
//! ("frozen") sites never topple; they may carry a seeded initial odometer
//! value, whose chips are distributed to their neighbours up front, so a
//! seeded site behaves as if it had already toppled that many times.
//!
//! Two boundary conventions:
//! * [`BoundaryMode::Open`]: chips crossing the window edge are counted as
//!   exported and lost. A run agrees with the untruncated lattice until
//!   activity reaches the boundary ring; the first toppling on the ring is
//!   latched as a frontier hit with its time and site.
//! * [`BoundaryMode::Cylinder`] (d = 2): reflecting wall at the low x_1 face
//!   (the missing neighbour is the site itself), periodic in x_2, open at the
//!   high x_1 face.
//!
//! Steps are double-buffered: a toppling mask is computed from the current
//! chips, then applied as a gather, touching only the bounding box of sites
//! that can change. Results are bit-identical for any worker count because
//! both passes are pure per-site maps; the only reductions (bounding boxes,
//! counters) are order-independent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::background::BackgroundSpec;
use crate::grid::{Grid, Point, Window};
use crate::{Error, Result};

/// Arrival-time sentinel: site never toppled.
pub const NEVER: u32 = u32::MAX;

/// Below this active volume a step runs single-threaded; above it the passes
/// split across the rayon pool (when it has more than one worker).
const PAR_MIN_CELLS: usize = 1 << 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    Open,
    Cylinder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilizeOutcome {
    /// Fixed point reached (verified by a full instability scan).
    Stabilized { time: u64 },
    /// A site on the window boundary ring toppled; past this time the run no
    /// longer agrees with the untruncated process.
    FrontierHit { time: u64, witness: Point },
    BudgetExceeded { budget: u64 },
}

impl StabilizeOutcome {
    pub fn is_stabilized(&self) -> bool {
        matches!(self, StabilizeOutcome::Stabilized { .. })
    }
    pub fn is_frontier_hit(&self) -> bool {
        matches!(self, StabilizeOutcome::FrontierHit { .. })
    }
}

enum Neighbor {
    Inside(usize),
    Outside,
}

/// Lattice state on a window, stored padded with a one-cell halo so the
/// gather step needs no bounds logic: the halo never fires and its chips are
/// irrelevant (exports are counted separately).
pub struct SandpileState {
    win: Window,
    mode: BoundaryMode,
    /// Toppling threshold 2d.
    thr: i32,
    ext: Vec<usize>,
    pext: Vec<usize>,
    pstr: Vec<usize>,
    s: Vec<i32>,
    v: Vec<u64>,
    frozen: Vec<u8>,
    cap: Option<Vec<u64>>,
    fires: Vec<u8>,
    arrivals: Option<Vec<u32>>,
    t: u64,
    /// Padded-coordinate bounding box of sites that could topple next step.
    active: Option<(Vec<usize>, Vec<usize>)>,
    /// Window-coordinate bounding box of {v > 0}, seeds included.
    support: Option<(Vec<i64>, Vec<i64>)>,
    frontier: Option<(u64, Point)>,
    exported: i64,
    expected_mass: i64,
    started: bool,
}

impl SandpileState {
    /// State with chips = background over the window, odometer zero.
    pub fn from_background(
        spec: &BackgroundSpec,
        window: &Window,
        mode: BoundaryMode,
    ) -> Result<Self> {
        spec.validate()?;
        if window.dim() != spec.dimension {
            return Err(Error::arg("window dimension does not match background"));
        }
        let mut st = Self::empty(window.clone(), mode)?;
        let lo = window.lo().to_vec();
        let hi = window.hi().to_vec();
        let mut p = lo.clone();
        let mut mass: i64 = 0;
        'fill: loop {
            let val = spec.at(&p);
            mass += val as i64;
            let i = st.pindex(&p);
            st.s[i] = val;
            if val >= st.thr {
                st.widen_active(&p);
            }
            let mut axis = 0;
            loop {
                if axis == p.len() {
                    break 'fill;
                }
                p[axis] += 1;
                if p[axis] <= hi[axis] {
                    break;
                }
                p[axis] = lo[axis];
                axis += 1;
            }
        }
        st.expected_mass = mass;
        Ok(st)
    }

    /// State with the given chip grid.
    pub fn from_grid(chips: &Grid<i32>, mode: BoundaryMode) -> Result<Self> {
        let mut st = Self::empty(chips.window.clone(), mode)?;
        let mut mass: i64 = 0;
        for (p, &val) in chips.iter() {
            mass += val as i64;
            let i = st.pindex(&p);
            st.s[i] = val;
            if val >= st.thr {
                st.widen_active(&p);
            }
        }
        st.expected_mass = mass;
        Ok(st)
    }

    fn empty(win: Window, mode: BoundaryMode) -> Result<Self> {
        let d = win.dim();
        if mode == BoundaryMode::Cylinder && d != 2 {
            return Err(Error::arg("cylinder boundary is two-dimensional"));
        }
        let ext = win.extents();
        let pext: Vec<usize> = ext.iter().map(|e| e + 2).collect();
        let mut pstr = vec![1usize; d];
        for k in 1..d {
            pstr[k] = pstr[k - 1] * pext[k - 1];
        }
        let pvol = pstr[d - 1] * pext[d - 1];
        Ok(SandpileState {
            win,
            mode,
            thr: 2 * d as i32,
            ext,
            pext,
            pstr,
            s: vec![0; pvol],
            v: vec![0; pvol],
            frozen: vec![0; pvol],
            cap: None,
            fires: vec![0; pvol],
            arrivals: None,
            t: 0,
            active: None,
            support: None,
            frontier: None,
            exported: 0,
            expected_mass: 0,
            started: false,
        })
    }

    /// Padded flat index of a window point.
    fn pindex(&self, p: &[i64]) -> usize {
        let lo = self.win.lo();
        let mut idx = 0usize;
        for k in 0..p.len() {
            idx += ((p[k] - lo[k]) as usize + 1) * self.pstr[k];
        }
        idx
    }

    fn point_of_pindex(&self, mut i: usize) -> Point {
        let lo = self.win.lo();
        let mut p = Vec::with_capacity(self.pext.len());
        for k in 0..self.pext.len() {
            let c = i % self.pext[k];
            i /= self.pext[k];
            p.push(lo[k] + c as i64 - 1);
        }
        p
    }

    fn widen_active(&mut self, p: &[i64]) {
        let lo = self.win.lo();
        let d = p.len();
        match &mut self.active {
            None => {
                let mut alo = Vec::with_capacity(d);
                let mut ahi = Vec::with_capacity(d);
                for k in 0..d {
                    let c = (p[k] - lo[k]) as usize + 1;
                    alo.push((c - 1).max(1));
                    ahi.push((c + 1).min(self.ext[k]));
                }
                self.active = Some((alo, ahi));
            }
            Some((alo, ahi)) => {
                for k in 0..d {
                    let c = (p[k] - lo[k]) as usize + 1;
                    alo[k] = alo[k].min((c - 1).max(1));
                    ahi[k] = ahi[k].max((c + 1).min(self.ext[k]));
                }
            }
        }
    }

    fn widen_support(&mut self, wlo: &[i64], whi: &[i64]) {
        match &mut self.support {
            None => self.support = Some((wlo.to_vec(), whi.to_vec())),
            Some((slo, shi)) => {
                for k in 0..wlo.len() {
                    slo[k] = slo[k].min(wlo[k]);
                    shi[k] = shi[k].max(whi[k]);
                }
            }
        }
    }

    /// Add `n` chips at a site before the run starts.
    pub fn add_chips(&mut self, p: &[i64], n: i64) -> Result<()> {
        if self.started {
            return Err(Error::arg("chips can only be added before stepping"));
        }
        if !self.win.contains(p) {
            return Err(Error::arg("chip addition outside window"));
        }
        let i = self.pindex(p);
        let total = self.s[i] as i64 + n;
        if total > i32::MAX as i64 / 2 || total < i32::MIN as i64 / 2 {
            return Err(Error::resource("chip count out of range"));
        }
        self.s[i] = total as i32;
        self.expected_mass += n;
        if total >= self.thr as i64 {
            self.widen_active(p);
        }
        Ok(())
    }

    /// Pin sites so they never topple.
    pub fn freeze(&mut self, sites: &[Point]) -> Result<()> {
        if self.started {
            return Err(Error::arg("freezing must happen before stepping"));
        }
        for p in sites {
            if !self.win.contains(p) {
                return Err(Error::arg("frozen site outside window"));
            }
            let i = self.pindex(p);
            self.frozen[i] = 1;
        }
        Ok(())
    }

    /// Pin every site of the window boundary ring.
    pub fn freeze_ring(&mut self) -> Result<()> {
        let sites: Vec<Point> = self
            .win
            .iter()
            .filter(|p| self.win.boundary_distance(p) == 0)
            .collect();
        self.freeze(&sites)
    }

    /// Pin every window site satisfying the predicate.
    pub fn freeze_where(&mut self, pred: impl Fn(&[i64]) -> bool) -> Result<()> {
        let sites: Vec<Point> = self.win.iter().filter(|p| pred(p)).collect();
        self.freeze(&sites)
    }

    /// Seed the odometer of a pinned site with `w0`, distributing the chips
    /// those topplings would have sent (mass-neutral: 2d chips per toppling
    /// leave the site, one per neighbour).
    pub fn seed_odometer(&mut self, p: &[i64], w0: u64) -> Result<()> {
        if self.started {
            return Err(Error::arg("seeding must happen before stepping"));
        }
        if !self.win.contains(p) {
            return Err(Error::arg("seed outside window"));
        }
        let i = self.pindex(p);
        if self.frozen[i] == 0 {
            return Err(Error::arg("seeded odometer requires a pinned site"));
        }
        if w0 == 0 {
            return Ok(());
        }
        if w0 > (i32::MAX / (self.thr + 1)) as u64 {
            return Err(Error::resource("seed odometer too large for chip type"));
        }
        self.v[i] = w0;
        let w = w0 as i64;
        let d = self.win.dim();
        let mut q = p.to_vec();
        for k in 0..d {
            for side in [-1i64, 1] {
                q.copy_from_slice(p);
                q[k] += side;
                match self.resolve_neighbor(p, &q, k, side) {
                    Neighbor::Inside(j) => self.s[j] = (self.s[j] as i64 + w) as i32,
                    Neighbor::Outside => self.exported += w,
                }
            }
        }
        self.s[i] = (self.s[i] as i64 - (self.thr as i64) * w) as i32;
        self.widen_active(p);
        self.widen_support(p, p);
        Ok(())
    }

    fn resolve_neighbor(&self, p: &[i64], q: &[i64], axis: usize, side: i64) -> Neighbor {
        match self.mode {
            BoundaryMode::Open => {
                if self.win.contains(q) {
                    Neighbor::Inside(self.pindex(q))
                } else {
                    Neighbor::Outside
                }
            }
            BoundaryMode::Cylinder => {
                let lo = self.win.lo();
                let hi = self.win.hi();
                if axis == 0 {
                    if side < 0 && p[0] == lo[0] {
                        Neighbor::Inside(self.pindex(p))
                    } else if side > 0 && p[0] == hi[0] {
                        Neighbor::Outside
                    } else {
                        Neighbor::Inside(self.pindex(q))
                    }
                } else {
                    let mut w = q.to_vec();
                    if w[axis] < lo[axis] {
                        w[axis] = hi[axis];
                    } else if w[axis] > hi[axis] {
                        w[axis] = lo[axis];
                    }
                    Neighbor::Inside(self.pindex(&w))
                }
            }
        }
    }

    /// Uniform odometer cap: sites stop toppling after `cap` topplings
    /// (cap 1 is the once-only variant).
    pub fn set_uniform_cap(&mut self, cap: u64) -> Result<()> {
        if self.started {
            return Err(Error::arg("caps must be set before stepping"));
        }
        self.cap = Some(vec![cap; self.s.len()]);
        Ok(())
    }

    pub fn set_cap_at(&mut self, p: &[i64], cap: u64) -> Result<()> {
        if self.started {
            return Err(Error::arg("caps must be set before stepping"));
        }
        if !self.win.contains(p) {
            return Err(Error::arg("cap outside window"));
        }
        if self.cap.is_none() {
            self.cap = Some(vec![u64::MAX; self.s.len()]);
        }
        let i = self.pindex(p);
        self.cap.as_mut().unwrap()[i] = cap;
        Ok(())
    }

    /// Record first-toppling times (queryable via [`Self::arrival_grid`]).
    pub fn record_arrivals(&mut self) -> Result<()> {
        if self.started {
            return Err(Error::arg("arrival recording must start before stepping"));
        }
        self.arrivals = Some(vec![NEVER; self.s.len()]);
        Ok(())
    }

    pub fn window(&self) -> &Window {
        &self.win
    }

    pub fn mode(&self) -> BoundaryMode {
        self.mode
    }

    pub fn time(&self) -> u64 {
        self.t
    }

    pub fn exported(&self) -> i64 {
        self.exported
    }

    pub fn chips(&self, p: &[i64]) -> i32 {
        self.s[self.pindex(p)]
    }

    pub fn odometer(&self, p: &[i64]) -> u64 {
        self.v[self.pindex(p)]
    }

    pub fn toppled(&self, p: &[i64]) -> bool {
        self.odometer(p) > 0
    }

    pub fn arrival(&self, p: &[i64]) -> Option<u32> {
        self.arrivals.as_ref().map(|a| a[self.pindex(p)])
    }

    /// Window-coordinate bounding box of {v > 0}, None if nothing toppled.
    pub fn support_bbox(&self) -> Option<(Point, Point)> {
        self.support.clone()
    }

    /// Max side length of the toppled set's bounding box.
    pub fn support_diameter(&self) -> i64 {
        match &self.support {
            None => 0,
            Some((lo, hi)) => lo.iter().zip(hi).map(|(a, b)| b - a + 1).max().unwrap_or(0),
        }
    }

    /// Visit window rows (maximal x_1-runs) as `f(start, len)` in padded
    /// flat indices.
    fn for_each_window_row(&self, mut f: impl FnMut(usize, usize)) {
        let d = self.pext.len();
        let nrows: usize = self.ext[1..].iter().product::<usize>().max(1);
        for r in 0..nrows {
            let mut rr = r;
            let mut base = 0usize;
            for k in 1..d {
                let c = 1 + rr % self.ext[k];
                rr /= self.ext[k];
                base += c * self.pstr[k];
            }
            f(base + 1, self.ext[0]);
        }
    }

    fn copy_out<T: Copy>(&self, src: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.win.volume());
        self.for_each_window_row(|a, n| out.extend_from_slice(&src[a..a + n]));
        out
    }

    pub fn chip_grid(&self) -> Grid<i32> {
        Grid { window: self.win.clone(), data: self.copy_out(&self.s) }
    }

    pub fn odometer_grid(&self) -> Grid<u64> {
        Grid { window: self.win.clone(), data: self.copy_out(&self.v) }
    }

    /// First-toppling times; [`NEVER`] where nothing arrived. Requires
    /// [`Self::record_arrivals`] before the run.
    pub fn arrival_grid(&self) -> Option<Grid<u32>> {
        let arr = self.arrivals.as_ref()?;
        Some(Grid { window: self.win.clone(), data: self.copy_out(arr) })
    }

    /// (chips within the window) + (chips exported) - (chips put in):
    /// zero at all times, or the engine lost mass.
    pub fn conservation_defect(&self) -> i64 {
        let mut sum = 0i64;
        self.for_each_window_row(|a, n| {
            sum += self.s[a..a + n].iter().map(|&x| x as i64).sum::<i64>();
        });
        sum + self.exported - self.expected_mass
    }

    /// Full-window scan for an unstable, unpinned, uncapped site.
    pub fn is_stable(&self) -> bool {
        let mut stable = true;
        self.for_each_window_row(|a, n| {
            if !stable {
                return;
            }
            for i in a..a + n {
                if self.s[i] >= self.thr && self.frozen[i] == 0 {
                    let capped = match &self.cap {
                        Some(cap) => self.v[i] >= cap[i],
                        None => false,
                    };
                    if !capped {
                        stable = false;
                        return;
                    }
                }
            }
        });
        stable
    }

    /// One synchronous toppling step. Returns the number of sites that
    /// toppled; zero means the state is a fixed point and the step was the
    /// identity, time included.
    pub fn parallel_step(&mut self) -> usize {
        self.started = true;
        let (alo, ahi) = match &self.active {
            None => return 0,
            Some((a, b)) => (a.clone(), b.clone()),
        };
        let (fired, fbox) = self.fire_pass(&alo, &ahi);
        if fired == 0 {
            self.active = None;
            return 0;
        }
        let (flo, fhi) = fbox.expect("fired > 0 implies a fired bbox");
        self.t += 1;
        self.count_exports_and_frontier(&flo, &fhi);
        match self.mode {
            BoundaryMode::Open => self.apply_open(&flo, &fhi),
            BoundaryMode::Cylinder => self.apply_cylinder(),
        }
        self.clear_fires(&flo, &fhi);
        let lo = self.win.lo().to_vec();
        let wlo: Vec<i64> = flo.iter().enumerate().map(|(k, &c)| lo[k] + c as i64 - 1).collect();
        let whi: Vec<i64> = fhi.iter().enumerate().map(|(k, &c)| lo[k] + c as i64 - 1).collect();
        self.widen_support(&wlo, &whi);
        let nlo: Vec<usize> = flo.iter().map(|&c| (c - 1).max(1)).collect();
        let nhi: Vec<usize> = fhi.iter().zip(&self.ext).map(|(&c, &e)| (c + 1).min(e)).collect();
        self.active = Some((nlo, nhi));
        fired
    }

    /// Run until a fixed point, a frontier hit, or the step budget runs out.
    pub fn stabilize(&mut self, step_budget: u64) -> StabilizeOutcome {
        for _ in 0..step_budget {
            if let Some((time, witness)) = self.frontier.clone() {
                return StabilizeOutcome::FrontierHit { time, witness };
            }
            let fired = self.parallel_step();
            if let Some((time, witness)) = self.frontier.clone() {
                return StabilizeOutcome::FrontierHit { time, witness };
            }
            if fired == 0 {
                assert!(self.is_stable(), "no topplings but an unstable site remains");
                return StabilizeOutcome::Stabilized { time: self.t };
            }
        }
        if self.is_stable() {
            return StabilizeOutcome::Stabilized { time: self.t };
        }
        StabilizeOutcome::BudgetExceeded { budget: step_budget }
    }

    // ---- step internals ----

    fn fire_pass(
        &mut self,
        alo: &[usize],
        ahi: &[usize],
    ) -> (usize, Option<(Vec<usize>, Vec<usize>)>) {
        let d = self.pext.len();
        let row_len = ahi[0] - alo[0] + 1;
        let nrows: usize = (1..d).map(|k| ahi[k] - alo[k] + 1).product::<usize>().max(1);
        let volume = nrows * row_len;
        let thr = self.thr;
        let s = &self.s;
        let v = &self.v;
        let frozen = &self.frozen;
        let cap = self.cap.as_deref();

        // Mark row[j] for every unstable unpinned site; report (first, last,
        // count) of the marks. `a` is the absolute index of row[0].
        let scan = |row: &mut [u8], a: usize| -> Option<(usize, usize, usize)> {
            let srow = &s[a..a + row.len()];
            let frow = &frozen[a..a + row.len()];
            let mut first = usize::MAX;
            let mut last = 0usize;
            let mut count = 0usize;
            match cap {
                None => {
                    for j in 0..row.len() {
                        let f = (srow[j] >= thr) & (frow[j] == 0);
                        row[j] = f as u8;
                        if f {
                            count += 1;
                            if first == usize::MAX {
                                first = j;
                            }
                            last = j;
                        }
                    }
                }
                Some(cap) => {
                    let vrow = &v[a..a + row.len()];
                    let crow = &cap[a..a + row.len()];
                    for j in 0..row.len() {
                        let f = (srow[j] >= thr) & (frow[j] == 0) & (vrow[j] < crow[j]);
                        row[j] = f as u8;
                        if f {
                            count += 1;
                            if first == usize::MAX {
                                first = j;
                            }
                            last = j;
                        }
                    }
                }
            }
            if count == 0 {
                None
            } else {
                Some((first, last, count))
            }
        };

        let use_par = volume >= PAR_MIN_CELLS && rayon::current_num_threads() > 1;
        if use_par {
            let pstr1 = if d > 1 { self.pstr[1] } else { self.pext[0] };
            let pext = self.pext.clone();
            #[derive(Clone)]
            struct Hit {
                fired: usize,
                lo: Vec<usize>,
                hi: Vec<usize>,
            }
            let hit = self
                .fires
                .par_chunks_mut(pstr1)
                .enumerate()
                .filter_map(|(cidx, chunk)| {
                    // chunk = one padded x_1-line; cidx flattens axes 1..d
                    let mut rr = cidx;
                    for k in 1..d {
                        let c = rr % pext[k];
                        rr /= pext[k];
                        if c < alo[k] || c > ahi[k] {
                            return None;
                        }
                    }
                    let a = cidx * pstr1 + alo[0];
                    let (first, last, count) = scan(&mut chunk[alo[0]..=ahi[0]], a)?;
                    let mut lo = vec![0usize; d];
                    let mut hi = vec![0usize; d];
                    lo[0] = alo[0] + first;
                    hi[0] = alo[0] + last;
                    let mut rr = cidx;
                    for k in 1..d {
                        let c = rr % pext[k];
                        rr /= pext[k];
                        lo[k] = c;
                        hi[k] = c;
                    }
                    Some(Hit { fired: count, lo, hi })
                })
                .map(Some)
                .reduce(
                    || None,
                    |x, y| match (x, y) {
                        (None, z) | (z, None) => z,
                        (Some(mut x), Some(y)) => {
                            x.fired += y.fired;
                            for k in 0..x.lo.len() {
                                x.lo[k] = x.lo[k].min(y.lo[k]);
                                x.hi[k] = x.hi[k].max(y.hi[k]);
                            }
                            Some(x)
                        }
                    },
                );
            match hit {
                None => (0, None),
                Some(h) => (h.fired, Some((h.lo, h.hi))),
            }
        } else {
            let pstr = &self.pstr;
            let mut fires = std::mem::take(&mut self.fires);
            let mut fb_lo = vec![usize::MAX; d];
            let mut fb_hi = vec![0usize; d];
            let mut fired = 0usize;
            let mut coords: Vec<usize> = alo.to_vec();
            let mut base: usize = (1..d).map(|k| alo[k] * pstr[k]).sum();
            'rows: loop {
                let a = base + alo[0];
                if let Some((first, last, count)) = scan(&mut fires[a..a + row_len], a) {
                    fired += count;
                    fb_lo[0] = fb_lo[0].min(alo[0] + first);
                    fb_hi[0] = fb_hi[0].max(alo[0] + last);
                    for k in 1..d {
                        fb_lo[k] = fb_lo[k].min(coords[k]);
                        fb_hi[k] = fb_hi[k].max(coords[k]);
                    }
                }
                let mut k = 1;
                loop {
                    if k >= d {
                        break 'rows;
                    }
                    coords[k] += 1;
                    base += pstr[k];
                    if coords[k] <= ahi[k] {
                        break;
                    }
                    base -= (ahi[k] - alo[k] + 1) * pstr[k];
                    coords[k] = alo[k];
                    k += 1;
                }
            }
            self.fires = fires;
            if fired == 0 {
                (0, None)
            } else {
                (fired, Some((fb_lo, fb_hi)))
            }
        }
    }

    /// Count chips sent across open faces this step and latch the first
    /// boundary-ring toppling as the frontier. Runs on the fresh fire mask.
    fn count_exports_and_frontier(&mut self, flo: &[usize], fhi: &[usize]) {
        let d = self.pext.len();
        for k in 0..d {
            for (side, at_edge, face_coord) in [
                (-1i64, flo[k] == 1, 1usize),
                (1i64, fhi[k] == self.ext[k], self.ext[k]),
            ] {
                if !at_edge {
                    continue;
                }
                let exports_here = match self.mode {
                    BoundaryMode::Open => true,
                    // reflecting wall at low x_1, wrap in x_2: only the high
                    // x_1 face is open
                    BoundaryMode::Cylinder => k == 0 && side > 0,
                };
                if !exports_here {
                    continue;
                }
                let mut count = 0i64;
                let mut witness: Option<usize> = None;
                self.for_each_face_row(flo, fhi, k, face_coord, |fires, a, n| {
                    for i in a..a + n {
                        if fires[i] != 0 {
                            count += 1;
                            if witness.is_none() {
                                witness = Some(i);
                            }
                        }
                    }
                });
                self.exported += count;
                if count > 0 && self.frontier.is_none() {
                    let p = self.point_of_pindex(witness.unwrap());
                    self.frontier = Some((self.t, p));
                }
            }
        }
    }

    /// Visit rows of the face {coord_axis = face_coord} within a padded box.
    fn for_each_face_row(
        &self,
        blo: &[usize],
        bhi: &[usize],
        axis: usize,
        face_coord: usize,
        mut f: impl FnMut(&[u8], usize, usize),
    ) {
        let d = self.pext.len();
        let mut lo = blo.to_vec();
        let mut hi = bhi.to_vec();
        lo[axis] = face_coord;
        hi[axis] = face_coord;
        let nrows: usize = (1..d).map(|k| hi[k] - lo[k] + 1).product::<usize>().max(1);
        for r in 0..nrows {
            let mut rr = r;
            let mut base = 0usize;
            for k in 1..d {
                let e = hi[k] - lo[k] + 1;
                base += (lo[k] + rr % e) * self.pstr[k];
                rr /= e;
            }
            f(&self.fires, base + lo[0], hi[0] - lo[0] + 1);
        }
    }

    fn apply_open(&mut self, flo: &[usize], fhi: &[usize]) {
        let d = self.pext.len();
        // receivers live in the fired box inflated by one, window part only
        let rlo: Vec<usize> = flo.iter().map(|&c| (c - 1).max(1)).collect();
        let rhi: Vec<usize> = fhi.iter().zip(&self.ext).map(|(&c, &e)| (c + 1).min(e)).collect();
        let row_len = rhi[0] - rlo[0] + 1;
        let nrows: usize = (1..d).map(|k| rhi[k] - rlo[k] + 1).product::<usize>().max(1);
        let volume = nrows * row_len;
        let thr = self.thr;
        let t_now = self.t as u32;
        let fires = &self.fires;
        let pstr = self.pstr.clone();

        let apply_row = |srow: &mut [i32], vrow: &mut [u64], arow: Option<&mut [u32]>, a: usize| {
            let n = srow.len();
            let fc = &fires[a..a + n];
            match pstr.len() {
                1 => {
                    let fl = &fires[a - 1..a - 1 + n];
                    let fr = &fires[a + 1..a + 1 + n];
                    for j in 0..n {
                        srow[j] += fl[j] as i32 + fr[j] as i32 - thr * fc[j] as i32;
                        vrow[j] += fc[j] as u64;
                    }
                }
                2 => {
                    let sy = pstr[1];
                    let fl = &fires[a - 1..a - 1 + n];
                    let fr = &fires[a + 1..a + 1 + n];
                    let fu = &fires[a - sy..a - sy + n];
                    let fd = &fires[a + sy..a + sy + n];
                    for j in 0..n {
                        let acc = fl[j] as i32 + fr[j] as i32 + fu[j] as i32 + fd[j] as i32;
                        srow[j] += acc - thr * fc[j] as i32;
                        vrow[j] += fc[j] as u64;
                    }
                }
                3 => {
                    let sy = pstr[1];
                    let sz = pstr[2];
                    let fl = &fires[a - 1..a - 1 + n];
                    let fr = &fires[a + 1..a + 1 + n];
                    let fu = &fires[a - sy..a - sy + n];
                    let fd = &fires[a + sy..a + sy + n];
                    let fb = &fires[a - sz..a - sz + n];
                    let ff = &fires[a + sz..a + sz + n];
                    for j in 0..n {
                        let acc = fl[j] as i32
                            + fr[j] as i32
                            + fu[j] as i32
                            + fd[j] as i32
                            + fb[j] as i32
                            + ff[j] as i32;
                        srow[j] += acc - thr * fc[j] as i32;
                        vrow[j] += fc[j] as u64;
                    }
                }
                _ => {
                    for j in 0..n {
                        let mut acc = 0i32;
                        for &stk in pstr.iter() {
                            acc += fires[a + j - stk] as i32 + fires[a + j + stk] as i32;
                        }
                        srow[j] += acc - thr * fc[j] as i32;
                        vrow[j] += fc[j] as u64;
                    }
                }
            }
            if let Some(arow) = arow {
                for j in 0..n {
                    if fc[j] != 0 && arow[j] == NEVER {
                        arow[j] = t_now;
                    }
                }
            }
        };

        let use_par = volume >= PAR_MIN_CELLS && rayon::current_num_threads() > 1;
        if use_par {
            let pstr1 = if d > 1 { self.pstr[1] } else { self.pext[0] };
            let pext = self.pext.clone();
            let in_region = |cidx: usize| -> bool {
                let mut rr = cidx;
                for k in 1..d {
                    let c = rr % pext[k];
                    rr /= pext[k];
                    if c < rlo[k] || c > rhi[k] {
                        return false;
                    }
                }
                true
            };
            match self.arrivals.as_mut() {
                None => {
                    self.s
                        .par_chunks_mut(pstr1)
                        .zip(self.v.par_chunks_mut(pstr1))
                        .enumerate()
                        .for_each(|(cidx, (sc, vc))| {
                            if !in_region(cidx) {
                                return;
                            }
                            let a = cidx * pstr1 + rlo[0];
                            apply_row(&mut sc[rlo[0]..=rhi[0]], &mut vc[rlo[0]..=rhi[0]], None, a);
                        });
                }
                Some(arr) => {
                    self.s
                        .par_chunks_mut(pstr1)
                        .zip(self.v.par_chunks_mut(pstr1))
                        .zip(arr.par_chunks_mut(pstr1))
                        .enumerate()
                        .for_each(|(cidx, ((sc, vc), ac))| {
                            if !in_region(cidx) {
                                return;
                            }
                            let a = cidx * pstr1 + rlo[0];
                            apply_row(
                                &mut sc[rlo[0]..=rhi[0]],
                                &mut vc[rlo[0]..=rhi[0]],
                                Some(&mut ac[rlo[0]..=rhi[0]]),
                                a,
                            );
                        });
                }
            }
        } else {
            let mut s = std::mem::take(&mut self.s);
            let mut v = std::mem::take(&mut self.v);
            let mut arr = self.arrivals.take();
            let mut coords: Vec<usize> = rlo.clone();
            let mut base: usize = (1..d).map(|k| rlo[k] * self.pstr[k]).sum();
            'rows: loop {
                let a = base + rlo[0];
                apply_row(
                    &mut s[a..a + row_len],
                    &mut v[a..a + row_len],
                    arr.as_mut().map(|x| &mut x[a..a + row_len]),
                    a,
                );
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
            self.s = s;
            self.v = v;
            self.arrivals = arr;
        }
    }

    fn apply_cylinder(&mut self) {
        // Cylinder windows are small; a direct per-site sweep keeps the
        // reflect/wrap logic in one obvious place.
        let ext0 = self.ext[0];
        let ext1 = self.ext[1];
        let sy = self.pstr[1];
        let thr = self.thr;
        let t_now = self.t as u32;
        for c1 in 1..=ext1 {
            for c0 in 1..=ext0 {
                let i = c0 + c1 * sy;
                let left = if c0 == 1 { i } else { i - 1 };
                let up = if c1 == ext1 { c0 + sy } else { i + sy };
                let down = if c1 == 1 { c0 + ext1 * sy } else { i - sy };
                let mut acc = self.fires[left] as i32;
                if c0 < ext0 {
                    acc += self.fires[i + 1] as i32;
                }
                acc += self.fires[up] as i32 + self.fires[down] as i32;
                self.s[i] += acc - thr * self.fires[i] as i32;
                self.v[i] += self.fires[i] as u64;
                if let Some(arr) = self.arrivals.as_mut() {
                    if self.fires[i] != 0 && arr[i] == NEVER {
                        arr[i] = t_now;
                    }
                }
            }
        }
    }

    fn clear_fires(&mut self, flo: &[usize], fhi: &[usize]) {
        let d = self.pext.len();
        let mut coords: Vec<usize> = flo.to_vec();
        let mut base: usize = (1..d).map(|k| flo[k] * self.pstr[k]).sum();
        'rows: loop {
            self.fires[base + flo[0]..=base + fhi[0]].fill(0);
            let mut k = 1;
            loop {
                if k >= d {
                    break 'rows;
                }
                coords[k] += 1;
                base += self.pstr[k];
                if coords[k] <= fhi[k] {
                    break;
                }
                base -= (fhi[k] - flo[k] + 1) * self.pstr[k];
                coords[k] = flo[k];
                k += 1;
            }
        }
    }
}

/// Outcome plus final state of a pinned-set run.
pub struct FrozenRun {
    pub state: SandpileState,
    pub outcome: StabilizeOutcome,
}

/// Run parallel toppling with the given sites pinned and an initial odometer
/// seeded on some of them; chips start as the background. Open boundary.
pub fn frozen_run(
    spec: &BackgroundSpec,
    window: &Window,
    frozen: &[Point],
    w0: &[(Point, u64)],
    step_budget: u64,
) -> Result<FrozenRun> {
    let mut state = SandpileState::from_background(spec, window, BoundaryMode::Open)?;
    state.freeze(frozen)?;
    for (p, w) in w0 {
        state.seed_odometer(p, *w)?;
    }
    let outcome = state.stabilize(step_budget);
    Ok(FrozenRun { state, outcome })
}

/// Result of [`sequential_oracle`].
pub struct SequentialRun {
    pub outcome: StabilizeOutcome,
    pub odometer: Grid<u64>,
    pub topplings: u64,
}

/// Sequential single-site toppling in seeded random order; the independent
/// slow route for cross-checking the parallel engine (by the abelian
/// property, the terminal odometer of a stabilizable configuration does not
/// depend on the toppling order). Open boundary; stops at the first
/// boundary-ring toppling.
pub fn sequential_oracle(
    chips: &Grid<i32>,
    additions: &[(Point, i64)],
    topple_budget: u64,
    selection_seed: u64,
) -> Result<SequentialRun> {
    use crate::background::splitmix64;
    let win = chips.window.clone();
    let d = win.dim();
    let thr = 2 * d as i64;
    let ext = win.extents();
    let mut s: Vec<i64> = chips.data.iter().map(|&x| x as i64).collect();
    let mut v = vec![0u64; s.len()];
    for (p, n) in additions {
        let i = win
            .index_of(p)
            .ok_or_else(|| Error::arg("chip addition outside window"))?;
        s[i] += n;
    }
    let mut strides = vec![1usize; d];
    for k in 1..d {
        strides[k] = strides[k - 1] * ext[k - 1];
    }
    let coord = |i: usize, k: usize| -> usize { i / strides[k] % ext[k] };

    let mut queue: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= thr).collect();
    let mut queued = vec![0u8; s.len()];
    for &i in &queue {
        queued[i] = 1;
    }
    let mut rng = selection_seed;
    let mut topplings = 0u64;
    while !queue.is_empty() {
        if topplings >= topple_budget {
            return Ok(SequentialRun {
                outcome: StabilizeOutcome::BudgetExceeded { budget: topple_budget },
                odometer: Grid { window: win, data: v },
                topplings,
            });
        }
        rng = splitmix64(rng);
        let pick = (rng % queue.len() as u64) as usize;
        let i = queue.swap_remove(pick);
        queued[i] = 0;
        if s[i] < thr {
            continue;
        }
        s[i] -= thr;
        v[i] += 1;
        topplings += 1;
        let mut on_ring = false;
        for k in 0..d {
            let c = coord(i, k);
            on_ring |= c == 0 || c + 1 == ext[k];
            if c > 0 {
                let j = i - strides[k];
                s[j] += 1;
                if s[j] >= thr && queued[j] == 0 {
                    queued[j] = 1;
                    queue.push(j);
                }
            }
            if c + 1 < ext[k] {
                let j = i + strides[k];
                s[j] += 1;
                if s[j] >= thr && queued[j] == 0 {
                    queued[j] = 1;
                    queue.push(j);
                }
            }
        }
        if s[i] >= thr && queued[i] == 0 {
            queued[i] = 1;
            queue.push(i);
        }
        if on_ring {
            let witness = win.point_at(i);
            return Ok(SequentialRun {
                outcome: StabilizeOutcome::FrontierHit { time: topplings, witness },
                odometer: Grid { window: win, data: v },
                topplings,
            });
        }
    }
    Ok(SequentialRun {
        outcome: StabilizeOutcome::Stabilized { time: topplings },
        odometer: Grid { window: win, data: v },
        topplings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::background::Family;

    fn constant(d: usize, c: i32) -> BackgroundSpec {
        BackgroundSpec::new(d, 0, Family::Constant { c }).unwrap()
    }

    #[test]
    fn d1_zero_background_is_a_fixed_point() {
        let w = Window::centered(&[0], 3).unwrap();
        let mut st =
            SandpileState::from_background(&constant(1, 0), &w, BoundaryMode::Open).unwrap();
        assert_eq!(st.parallel_step(), 0);
        assert_eq!(st.time(), 0);
        assert!(matches!(st.stabilize(10), StabilizeOutcome::Stabilized { time: 0 }));
    }

    #[test]
    fn d1_three_chips_topple_once() {
        let w = Window::centered(&[0], 3).unwrap();
        let mut st =
            SandpileState::from_background(&constant(1, 0), &w, BoundaryMode::Open).unwrap();
        st.add_chips(&[0], 3).unwrap();
        assert_eq!(st.parallel_step(), 1);
        for (x, want_s, want_v) in [(-2, 0, 0), (-1, 1, 0), (0, 1, 1), (1, 1, 0), (2, 0, 0)] {
            assert_eq!(st.chips(&[x]), want_s, "chips at {}", x);
            assert_eq!(st.odometer(&[x]), want_v as u64, "odometer at {}", x);
        }
        assert!(matches!(st.stabilize(10), StabilizeOutcome::Stabilized { time: 1 }));
        assert_eq!(st.conservation_defect(), 0);
    }

    #[test]
    fn d1_marginal_background_explodes_at_unit_speed() {
        let w = Window::centered(&[0], 30).unwrap();
        let mut st =
            SandpileState::from_background(&constant(1, 1), &w, BoundaryMode::Open).unwrap();
        st.add_chips(&[0], 2).unwrap();
        match st.stabilize(100) {
            StabilizeOutcome::FrontierHit { time, witness } => {
                assert_eq!(time, 31);
                assert_eq!(witness[0].abs(), 30);
            }
            other => panic!("expected frontier hit, got {:?}", other),
        }
    }

    #[test]
    fn d2_max_stable_plus_four_first_two_steps() {
        let w = Window::centered(&[0, 0], 20).unwrap();
        let mut st =
            SandpileState::from_background(&constant(2, 3), &w, BoundaryMode::Open).unwrap();
        st.add_chips(&[0, 0], 4).unwrap();
        st.parallel_step();
        assert_eq!(st.odometer(&[0, 0]), 1);
        for p in [[1, 0], [-1, 0], [0, 1], [0, -1]] {
            assert_eq!(st.odometer(&p), 0);
        }
        st.parallel_step();
        // the origin is stable again (3 chips) while all four neighbours fire
        assert_eq!(st.odometer(&[0, 0]), 1);
        for p in [[1, 0], [-1, 0], [0, 1], [0, -1]] {
            assert_eq!(st.odometer(&p), 1);
        }
        assert_eq!(st.odometer(&[1, 1]), 0);
        // each neighbour returned a chip, so the origin is loaded again
        assert_eq!(st.chips(&[0, 0]), 7);
    }

    #[test]
    fn robust_background_stabilizes_with_square_root_diameter() {
        let w = Window::centered(&[0, 0], 120).unwrap();
        let mut st =
            SandpileState::from_background(&constant(2, 2), &w, BoundaryMode::Open).unwrap();
        st.add_chips(&[0, 0], 10_000).unwrap();
        let out = st.stabilize(1_000_000);
        assert!(out.is_stabilized(), "got {:?}", out);
        let diam = st.support_diameter();
        assert!(diam > 40 && diam < 200, "diameter {}", diam);
        assert_eq!(st.conservation_defect(), 0);
        assert_eq!(st.exported(), 0, "nothing should leave a window this large");
    }

    #[test]
    fn frontier_time_matches_unit_speed_front() {
        // eta = 3 with one extra chip: first topplings at distance r happen
        // at t = r + 1, so the ring of a radius-10 window fires at t = 11.
        let w = Window::centered(&[0, 0], 10).unwrap();
        let mut st =
            SandpileState::from_background(&constant(2, 3), &w, BoundaryMode::Open).unwrap();
        st.add_chips(&[0, 0], 1).unwrap();
        match st.stabilize(100) {
            StabilizeOutcome::FrontierHit { time, witness } => {
                assert_eq!(time, 11);
                assert_eq!(w.boundary_distance(&witness), 0);
            }
            other => panic!("expected frontier hit, got {:?}", other),
        }
    }

    #[test]
    fn pinned_site_on_robust_background_changes_nothing() {
        for (d, c) in [(2usize, 2i32), (3, 4)] {
            let w = Window::centered(&vec![0; d], 6).unwrap();
            let spec = constant(d, c);
            let run = frozen_run(&spec, &w, &[vec![0; d]], &[(vec![0; d], 1)], 100).unwrap();
            assert!(run.outcome.is_stabilized());
            assert_eq!(run.state.odometer(&vec![0; d]), 1);
            for p in w.iter() {
                if p != vec![0; d] {
                    assert_eq!(run.state.odometer(&p), 0, "d = {} at {:?}", d, p);
                }
            }
        }
    }

    #[test]
    fn pinned_l_path_fills_its_bounding_rectangle() {
        let w = Window::centered(&[0, 0], 8).unwrap();
        let spec = constant(2, 2);
        let path = vec![vec![0, 0], vec![1, 0], vec![1, 1]];
        let seeds: Vec<(Point, u64)> = path.iter().map(|p| (p.clone(), 1)).collect();
        let run = frozen_run(&spec, &w, &path, &seeds, 100).unwrap();
        assert!(run.outcome.is_stabilized());
        for p in w.iter() {
            let in_rect = (0..=1).contains(&p[0]) && (0..=1).contains(&p[1]);
            assert_eq!(run.state.odometer(&p) > 0, in_rect, "at {:?}", p);
            assert!(run.state.odometer(&p) <= 1);
        }
        assert_eq!(run.state.conservation_defect(), 0);
    }

    #[test]
    fn seeding_requires_a_pinned_site() {
        let w = Window::centered(&[0, 0], 3).unwrap();
        let mut st =
            SandpileState::from_background(&constant(2, 0), &w, BoundaryMode::Open).unwrap();
        assert!(st.seed_odometer(&[0, 0], 1).is_err());
        st.freeze(&[vec![0, 0]]).unwrap();
        assert!(st.seed_odometer(&[0, 0], 1).is_ok());
    }

    #[test]
    fn once_only_cap_turns_explosion_into_a_single_wave() {
        let w = Window::centered(&[0, 0], 15).unwrap();
        let mut st =
            SandpileState::from_background(&constant(2, 3), &w, BoundaryMode::Open).unwrap();
        st.add_chips(&[0, 0], 1).unwrap();
        st.set_uniform_cap(1).unwrap();
        let out = st.stabilize(200);
        assert!(out.is_frontier_hit(), "a single wave on eta = 3 never dies: {:?}", out);
        for p in w.iter() {
            assert!(st.odometer(&p) <= 1);
        }
    }

    #[test]
    fn sequential_oracle_matches_parallel_engine() {
        use crate::background::splitmix64;
        let mut rng = 0xABCDu64;
        let mut next = |m: u64| {
            rng = splitmix64(rng);
            rng % m
        };
        for case in 0..200u64 {
            let d = 1 + (next(3) as usize);
            let radius = 4 + next(4) as i64;
            let w = Window::centered(&vec![0; d], radius).unwrap();
            let mut chips = Grid::new_fill(w.clone(), 0i32);
            for i in 0..chips.data.len() {
                chips.data[i] = next(2 * d as u64 - 1) as i32; // robust: [0, 2d-2]
            }
            let n = 1 + next(16) as i64;
            let site = vec![0; d];
            let seq =
                sequential_oracle(&chips, &[(site.clone(), n)], 1_000_000, 99 + case).unwrap();
            let mut par = SandpileState::from_grid(&chips, BoundaryMode::Open).unwrap();
            par.add_chips(&site, n).unwrap();
            let out = par.stabilize(1_000_000);
            match (&seq.outcome, &out) {
                (StabilizeOutcome::Stabilized { .. }, StabilizeOutcome::Stabilized { .. }) => {
                    assert_eq!(
                        seq.odometer.data,
                        par.odometer_grid().data,
                        "case {} d {} n {}",
                        case,
                        d,
                        n
                    );
                }
                // the two routes must also agree on what fails to stabilize
                // inside the window
                (a, b) => assert_eq!(
                    std::mem::discriminant(a),
                    std::mem::discriminant(b),
                    "case {}: {:?} vs {:?}",
                    case,
                    a,
                    b
                ),
            }
        }
    }

    #[test]
    fn conservation_holds_step_by_step_including_exports() {
        let w = Window::centered(&[0, 0], 6).unwrap();
        let mut st =
            SandpileState::from_background(&constant(2, 3), &w, BoundaryMode::Open).unwrap();
        st.add_chips(&[0, 0], 5).unwrap();
        for _ in 0..40 {
            st.parallel_step();
            assert_eq!(st.conservation_defect(), 0, "t = {}", st.time());
        }
        assert!(st.exported() > 0, "the explosion must spill over this small window");
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let w = Window::centered(&[0, 0], 80).unwrap();
                let mut st =
                    SandpileState::from_background(&constant(2, 3), &w, BoundaryMode::Open)
                        .unwrap();
                st.add_chips(&[0, 0], 4).unwrap();
                let out = st.stabilize(120);
                (st.chip_grid().data, st.odometer_grid().data, st.time(), out)
            })
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert_eq!(a.3, b.3);
    }

    #[test]
    fn cylinder_reflects_on_the_left_and_wraps_around() {
        // eta = 3 on a circumference-4 cylinder, one pinned seeded column:
        // the front advances one column per step with no leakage at the wall.
        let w = Window::new(vec![0, 0], vec![30, 3]).unwrap();
        let mut st =
            SandpileState::from_background(&constant(2, 3), &w, BoundaryMode::Cylinder).unwrap();
        let col: Vec<Point> = (0..4).map(|y| vec![0, y]).collect();
        st.freeze(&col).unwrap();
        for p in &col {
            st.seed_odometer(p, 1).unwrap();
        }
        st.record_arrivals().unwrap();
        let out = st.stabilize(100);
        assert!(out.is_frontier_hit(), "got {:?}", out);
        for x in 1..=29i64 {
            for y in 0..4i64 {
                assert_eq!(st.arrival(&[x, y]), Some(x as u32), "at {},{}", x, y);
            }
        }
        assert_eq!(st.conservation_defect(), 0);
    }

    #[test]
    fn chips_cannot_be_added_after_the_run_starts() {
        let w = Window::centered(&[0], 2).unwrap();
        let mut st =
            SandpileState::from_background(&constant(1, 1), &w, BoundaryMode::Open).unwrap();
        st.parallel_step();
        assert!(st.add_chips(&[0], 1).is_err());
        assert!(st.freeze(&[vec![0]]).is_err());
    }
}
