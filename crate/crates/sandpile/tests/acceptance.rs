//! The acceptance suite: ten end-to-end checks, one per numbered criterion,
//! each printing a single `criterion NN: PASS — …` line (visible with
//! `--show-output`). Exact claims assert exactly; statistical claims pin
//! their tolerances inline next to the measurement they gate.
//!
//! Criterion 8 runs dimension 3 on a reduced window (radius 64 instead of
//! 512): a radius-512 cube in d = 3 is about 10^9 sites and does not fit in
//! memory here, while the measured thresholds (ignition masses well below a
//! hundred chips, cascades crossing the full window) make the reduced run
//! the same decision at an affordable size.

use sandpile::analysis::{
    bootstrap_internally_spanned, dimensional_reduction_check, explosion_threshold,
    is_recurrent_on, ExplosionOutcome,
};
use sandpile::background::splitmix64;
use sandpile::engine::{sequential_oracle, NEVER};
use sandpile::shapes::{
    cylinder_run, estimate_limit_shape, shape_convergence_metric, verify_counterexample,
    BallRaster,
};
use sandpile::waves::{
    arrival_field, last_wave_threshold, run_n_wave, LastWaveOutcome, PenultimateOracle,
    ProcessKind, WaveProcess,
};
use sandpile::{
    BackgroundSpec, BoundaryMode, Family, Grid, SandpileState, StabilizeOutcome, Window,
};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn constant(d: usize, c: i32) -> BackgroundSpec {
    BackgroundSpec::new(d, 0, Family::Constant { c }).unwrap()
}

fn bernoulli(d: usize, a: i32, b: i32, p: f64, seed: u64) -> BackgroundSpec {
    BackgroundSpec::new(d, seed, Family::Bernoulli { a, b, p }).unwrap()
}

/// Tiny deterministic generator for test-case parameters.
struct Rng(u64);

impl Rng {
    fn next(&mut self, m: u64) -> u64 {
        self.0 = splitmix64(self.0);
        self.0 % m
    }
}

/// Least-squares line through `(xs, ys)`: returns `(slope, intercept, r2)`.
fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert!(xs.len() == ys.len() && xs.len() >= 2);
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (slope, intercept, r2)
}

/// Bootstrap threshold field on `[1, n]^d`: value `2d` (initially infected)
/// with probability `p`, else `d`, drawn site by site from a seeded hash.
fn threshold_field(d: usize, n: i64, p: f64, seed: u64) -> Grid<i32> {
    let win = Window::new(vec![1; d], vec![n; d]).unwrap();
    let mut g = Grid::new_fill(win.clone(), d as i32);
    for q in win.iter() {
        let mut h = splitmix64(seed);
        for &c in &q {
            h = splitmix64(h ^ (c as u64));
        }
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u < p {
            g.set(&q, 2 * d as i32);
        }
    }
    g
}

// ---------------------------------------------------------------------------
// 1. Cylinder front states
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_cylinder_front_states() {
    let run = cylinder_run(4).unwrap();
    assert!(
        run.front_states_match,
        "criterion 01: FAIL — front states diverge: {:?}",
        run.failure
    );
    assert_eq!(
        run.minimal_period,
        Some((6, 4)),
        "criterion 01: FAIL — unexpected minimal front period"
    );
    assert!(
        run.period_12_8,
        "criterion 01: FAIL — the stated period 12 / advance 8 was not detected"
    );
    assert!(run.ok(), "criterion 01: FAIL — {:?}", run.failure);
    println!(
        "criterion 01: PASS — thirteen front states exact; period 12 with advance 8 \
         (minimal period 6 advancing 4)"
    );
}

// ---------------------------------------------------------------------------
// 2. Counterexample arrival bounds
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_counterexample_arrival_bounds() {
    let rep = verify_counterexample(401, &[2]).unwrap();
    assert!(rep.ok(), "criterion 02: FAIL — {:?}", rep.failure);
    assert!(
        rep.arrival_bounds_ok,
        "criterion 02: FAIL — some T(4n+1) left [4n+1, 4n+4]"
    );
    assert_eq!(
        rep.rays_checked, 101,
        "criterion 02: FAIL — expected rays n = 0..=100"
    );
    let expected: Vec<u64> = (1..=50).map(|n| 12 * n).collect();
    assert_eq!(
        rep.cylinder.front_arrivals, expected,
        "criterion 02: FAIL — cylinder slow-site arrivals are not 12n"
    );
    // The fast subsequence tends to ratio 1; at n_max = 401 the smallest
    // achievable ratio is 404/401 ≈ 1.0075, so the sample is pinned to
    // within 1% of the limit.
    assert!(
        (1.0..=1.01).contains(&rep.liminf_sample),
        "criterion 02: FAIL — liminf sample {} outside [1, 1.01]",
        rep.liminf_sample
    );
    assert!(
        rep.limsup_sample >= 1.5 * (1.0 - 0.02),
        "criterion 02: FAIL — limsup sample {} below 3/2·(1−0.02)",
        rep.limsup_sample
    );
    println!(
        "criterion 02: PASS — 101 rays within [4n+1, 4n+4]; cylinder arrivals 12n for n ≤ 50; \
         liminf sample {:.4} (limit 1), limsup sample {:.4} (limit 1.5)",
        rep.liminf_sample, rep.limsup_sample
    );
}

// ---------------------------------------------------------------------------
// 3. Robust-background growth exponent
// ---------------------------------------------------------------------------

/// Stabilize `n` chips at the origin of the all-twos plane and return the
/// toppled-set diameter, growing the window (on a frontier hit) or the step
/// budget (on exhaustion) until the run verifiably stabilizes.
fn all_twos_diameter(n: u64) -> i64 {
    let spec = constant(2, 2);
    let mut radius = (0.9 * (n as f64).sqrt()) as i64 + 16;
    let mut budget = 2 * n + 1000;
    loop {
        let window = Window::centered(&[0, 0], radius).unwrap();
        let mut st = SandpileState::from_background(&spec, &window, BoundaryMode::Open).unwrap();
        st.add_chips(&[0, 0], n as i64).unwrap();
        match st.stabilize(budget) {
            StabilizeOutcome::Stabilized { .. } => return st.support_diameter(),
            StabilizeOutcome::FrontierHit { .. } => radius *= 2,
            StabilizeOutcome::BudgetExceeded { .. } => budget *= 2,
        }
    }
}

#[test]
fn criterion_03_growth_exponent_on_the_all_twos_plane() {
    let ns: Vec<u64> = (10..=16).map(|k| 1u64 << k).collect();
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    let mut diameters = Vec::new();
    for &n in &ns {
        let d = all_twos_diameter(n);
        assert!(d > 0, "criterion 03: FAIL — empty toppled set at n = {n}");
        diameters.push(d);
        lx.push((n as f64).ln());
        ly.push((d as f64).ln());
    }
    let (slope, _, r2) = linear_fit(&lx, &ly);
    assert!(
        (0.45..=0.55).contains(&slope),
        "criterion 03: FAIL — fitted exponent {slope:.4} outside 0.5 ± 0.05 \
         (diameters {diameters:?})"
    );
    println!(
        "criterion 03: PASS — diameter exponent {:.4} over n = 2^10..2^16 \
         (R² {:.4}; diameters {:?})",
        slope, r2, diameters
    );
}

// ---------------------------------------------------------------------------
// 4. Square lower bound for waves
// ---------------------------------------------------------------------------

/// Terminal odometer of the stabilized n-wave from the origin on the
/// all-twos plane, on a window comfortably containing its support.
fn twos_wave_terminal(n: u64, window_radius: i64) -> Grid<u64> {
    let spec = constant(2, 2);
    let window = Window::centered(&[0, 0], window_radius).unwrap();
    let run = run_n_wave(&spec, &[0, 0], n, &window, 1 << 18).unwrap();
    match run.outcome {
        StabilizeOutcome::Stabilized { .. } => run.terminal.unwrap(),
        other => panic!(
            "criterion 04: FAIL — the {n}-wave should stabilize on radius {window_radius}: {other:?}"
        ),
    }
}

/// Does the terminal odometer cover every site of `[-r, r]^2`?
fn covers_square(terminal: &Grid<u64>, r: i64) -> bool {
    Window::centered(&[0, 0], r)
        .unwrap()
        .iter()
        .all(|p| terminal.get(&p).copied().unwrap_or(0) > 0)
}

#[test]
fn criterion_04_waves_cover_squares_of_the_guaranteed_radius() {
    let mut lines = Vec::new();
    for r_target in [8i64, 16, 32] {
        let window_radius = 2 * r_target + 12;
        // The covered square grows with n (wave odometers are monotone in
        // n), so the least covering n is found by bisection.
        let mut hi = ((2 * r_target + 3) * (2 * r_target + 3)) as u64;
        assert!(
            covers_square(&twos_wave_terminal(hi, window_radius), r_target),
            "criterion 04: FAIL — the (2R+3)^2-wave does not cover [-{r_target}, {r_target}]^2"
        );
        let mut lo = 1u64;
        assert!(
            !covers_square(&twos_wave_terminal(lo, window_radius), r_target),
            "criterion 04: FAIL — a single-chip wave covers [-{r_target}, {r_target}]^2"
        );
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if covers_square(&twos_wave_terminal(mid, window_radius), r_target) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let n_min = hi;
        let terminal = twos_wave_terminal(n_min, window_radius);
        let mut measured = 0i64;
        while measured < window_radius && covers_square(&terminal, measured + 1) {
            measured += 1;
        }
        let guaranteed = ((n_min as f64).sqrt() - 3.0) / 2.0;
        assert!(
            measured as f64 >= guaranteed,
            "criterion 04: FAIL — R = {r_target}: least covering n = {n_min}, measured radius \
             {measured} < (√n − 3)/2 = {guaranteed:.2}"
        );
        lines.push(format!(
            "R = {r_target}: n = {n_min}, measured radius {measured} ≥ {guaranteed:.2}"
        ));
    }
    println!(
        "criterion 04: PASS — wave squares hold the exact lower bound ({})",
        lines.join("; ")
    );
}

// ---------------------------------------------------------------------------
// 5. Recurrence of the all-d background
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_the_all_d_background_is_recurrent() {
    for d in [2usize, 3] {
        for n in [4i64, 8, 16, 32] {
            let win = Window::new(vec![1; d], vec![n; d]).unwrap();
            let values = Grid::new_fill(win, d as i32);
            assert!(
                is_recurrent_on(&values).unwrap(),
                "criterion 05: FAIL — the all-{d} box Q_{n} in d = {d} is not recurrent"
            );
        }
    }
    println!(
        "criterion 05: PASS — η ≡ d recurrent on Q_n for d ∈ {{2, 3}}, n ∈ {{4, 8, 16, 32}} (exact)"
    );
}

// ---------------------------------------------------------------------------
// 6. Dimensional reduction
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_dimensional_reduction_holds_on_random_instances() {
    let mut rng = Rng(0x6d26);
    for case in 0..40u64 {
        let d = if case < 20 { 2usize } else { 3 };
        let side = if d == 2 { 8i64 } else { 6 };
        let win = Window::new(vec![1; d], vec![side; d]).unwrap();
        let mut values = Grid::new_fill(win.clone(), d as i32);
        for p in win.iter() {
            if rng.next(2) == 1 {
                values.set(&p, 2 * d as i32 - 1);
            }
        }
        let face = (rng.next(2 * d as u64)) as usize;
        assert!(
            dimensional_reduction_check(&values, face).unwrap(),
            "criterion 06: FAIL — instance {case} (d = {d}, face {face}) broke the \
             odometer equality or the chip relation"
        );
    }
    println!(
        "criterion 06: PASS — odometer equality at every step and the +2 chip relation \
         on 40 random instances (20 at d = 2, 20 at d = 3), exact"
    );
}

// ---------------------------------------------------------------------------
// 7. Bootstrap spanning curve
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_bootstrap_spanning_curve_fits_the_exponential_law() {
    let sizes = [8i64, 16, 32, 64];
    let trials = 200u64;
    let p = 0.1;
    let mut fractions = Vec::new();
    for &n in &sizes {
        let mut successes = 0u64;
        for t in 0..trials {
            let seed = splitmix64(12 ^ splitmix64(((n as u64) << 32) | t));
            let field = threshold_field(2, n, p, seed);
            if bootstrap_internally_spanned(&field).unwrap() {
                successes += 1;
            }
        }
        fractions.push(successes as f64 / trials as f64);
    }
    for w in fractions.windows(2) {
        assert!(
            w[1] >= w[0],
            "criterion 07: FAIL — spanning probability not nondecreasing: {fractions:?}"
        );
    }
    // Fit 1 − c·exp(−C·n) by regressing ln(1 − f) on n. A fully spanned
    // size has 1 − f = 0, which the log cannot take; the standard
    // continuity correction 1/(2·trials) stands in for it.
    let floor = 1.0 / (2.0 * trials as f64);
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let ys: Vec<f64> = fractions.iter().map(|&f| (1.0 - f).max(floor).ln()).collect();
    let (slope, _, r2) = linear_fit(&xs, &ys);
    let big_c = -slope;
    assert!(
        big_c > 0.0,
        "criterion 07: FAIL — fitted decay rate C = {big_c:.4} is not positive"
    );
    assert!(
        r2 >= 0.9,
        "criterion 07: FAIL — exponential fit R² = {r2:.4} below 0.9 (fractions {fractions:?})"
    );
    println!(
        "criterion 07: PASS — spanning fractions {:?} nondecreasing; fit 1 − c·exp(−C·n) \
         with C = {:.4} > 0, R² = {:.4} ≥ 0.9",
        fractions, big_c, r2
    );
}

// ---------------------------------------------------------------------------
// 8. Explosiveness statistics
// ---------------------------------------------------------------------------

/// Count seeds whose explosion threshold is found, and track the largest.
fn explosion_found_count(
    d: usize,
    p: f64,
    seeds: std::ops::RangeInclusive<u64>,
    radius: i64,
    step_budget: u64,
) -> (usize, usize, u64) {
    let window = Window::centered(&vec![0; d], radius).unwrap();
    let z = vec![0i64; d];
    let mut found = 0usize;
    let mut total = 0usize;
    let mut max_m = 0u64;
    for seed in seeds {
        total += 1;
        let spec = bernoulli(d, d as i32, 2 * d as i32 - 1, p, seed);
        match explosion_threshold(&spec, &z, &window, 1 << 20, step_budget).unwrap() {
            ExplosionOutcome::Found { m, .. } => {
                found += 1;
                max_m = max_m.max(m);
            }
            ExplosionOutcome::NotFoundWithinBudget { .. } => {}
        }
    }
    (found, total, max_m)
}

#[test]
fn criterion_08_explosion_thresholds_are_found_across_seeds() {
    // d = 2 runs at the stated window radius 512. d = 3 runs at radius 64:
    // the stated radius in three dimensions is ~10^9 sites and does not fit
    // in memory, while the found thresholds (tens of chips, cascades
    // crossing 64 sites in every direction) are decided well inside the
    // reduced window.
    let (found2, total2, max2) = explosion_found_count(2, 0.25, 1..=100, 512, 6000);
    assert!(
        found2 >= 95,
        "criterion 08: FAIL — d = 2: threshold found for only {found2}/{total2} seeds"
    );
    let (found3, total3, max3) = explosion_found_count(3, 0.25, 1..=100, 64, 2048);
    assert!(
        found3 >= 95,
        "criterion 08: FAIL — d = 3: threshold found for only {found3}/{total3} seeds \
         (window radius 64)"
    );
    println!(
        "criterion 08: PASS — thresholds found for {found2}/{total2} seeds (d = 2, radius 512, \
         largest M = {max2}) and {found3}/{total3} seeds (d = 3, radius 64 for memory, \
         largest M = {max3})"
    );
}

// ---------------------------------------------------------------------------
// 9. Property suites
// ---------------------------------------------------------------------------

/// 9a: the parallel engine agrees with sequential toppling in random order
/// on 200 random stabilizable instances.
fn abelian_oracle_instances() -> usize {
    let mut rng = Rng(0xacce);
    for case in 0..200u64 {
        let d = 1 + rng.next(3) as usize;
        let radius = 4 + rng.next(4) as i64;
        let w = Window::centered(&vec![0; d], radius).unwrap();
        let mut chips = Grid::new_fill(w.clone(), 0i32);
        for i in 0..chips.data.len() {
            chips.data[i] = rng.next(2 * d as u64 - 1) as i32;
        }
        let n = 1 + rng.next(16) as i64;
        let site = vec![0i64; d];
        let seq = sequential_oracle(&chips, &[(site.clone(), n)], 1_000_000, 0x9e + case).unwrap();
        let mut par = SandpileState::from_grid(&chips, BoundaryMode::Open).unwrap();
        par.add_chips(&site, n).unwrap();
        let out = par.stabilize(1_000_000);
        match (&seq.outcome, &out) {
            (StabilizeOutcome::Stabilized { .. }, StabilizeOutcome::Stabilized { .. }) => {
                assert_eq!(
                    seq.odometer.data,
                    par.odometer_grid().data,
                    "criterion 09: FAIL — abelian oracle: odometers diverge on case {case}"
                );
            }
            (a, b) => assert_eq!(
                std::mem::discriminant(a),
                std::mem::discriminant(b),
                "criterion 09: FAIL — abelian oracle: outcomes diverge on case {case}"
            ),
        }
    }
    200
}

/// 9b: adding chips never lowers any site's odometer at any time, on 100
/// coupled pairs stepped in lockstep.
fn monotone_coupling_pairs() -> usize {
    let mut rng = Rng(0x3070);
    for case in 0..100u64 {
        let d = 2 + rng.next(2) as usize;
        let radius = 5 + rng.next(3) as i64;
        let w = Window::centered(&vec![0; d], radius).unwrap();
        let mut chips = Grid::new_fill(w.clone(), 0i32);
        for i in 0..chips.data.len() {
            chips.data[i] = rng.next(2 * d as u64 - 1) as i32;
        }
        let mut low = SandpileState::from_grid(&chips, BoundaryMode::Open).unwrap();
        let mut high = SandpileState::from_grid(&chips, BoundaryMode::Open).unwrap();
        let base = 1 + rng.next(10) as i64;
        low.add_chips(&vec![0; d], base).unwrap();
        high.add_chips(&vec![0; d], base).unwrap();
        for _ in 0..=rng.next(3) {
            let extra_site: Vec<i64> = (0..d)
                .map(|_| rng.next((2 * radius - 1) as u64) as i64 - (radius - 1))
                .collect();
            high.add_chips(&extra_site, 1 + rng.next(4) as i64).unwrap();
        }
        for step in 0..10_000u64 {
            let fl = low.parallel_step();
            let fh = high.parallel_step();
            let lo_grid = low.odometer_grid();
            let hi_grid = high.odometer_grid();
            for (a, b) in lo_grid.data.iter().zip(&hi_grid.data) {
                assert!(
                    a <= b,
                    "criterion 09: FAIL — monotonicity: extra chips lowered an odometer \
                     (case {case}, step {step})"
                );
            }
            if fl == 0 && fh == 0 {
                break;
            }
            assert!(step < 9_999, "criterion 09: FAIL — coupling did not settle (case {case})");
        }
    }
    100
}

/// 9c: along the last wave, no site ever exceeds the penultimate odometer
/// by more than one, checked at every step of 50 runs.
fn last_wave_bound_runs() -> usize {
    let radius = 20i64;
    let window = Window::centered(&[0, 0], radius).unwrap();
    for k in 0..50u64 {
        let spec = bernoulli(2, 2, 3, 0.5, 1_000 + k);
        let found = last_wave_threshold(&spec, &[0, 0], &window, 1 << 12, 1 << 12).unwrap();
        let run = match found {
            LastWaveOutcome::Found(run) => run,
            LastWaveOutcome::NotFoundWithinBudget { .. } => {
                panic!("criterion 09: FAIL — no last-wave threshold at seed {}", 1_000 + k)
            }
        };
        let m_hat = run.m_hat.expect("a found threshold carries its M̂");
        let penultimate = run.penultimate.expect("a found threshold carries ũ");
        let mut wave = WaveProcess::new(&spec, &[0, 0], m_hat, &window).unwrap();
        'steps: for _ in 0..(1 << 12) {
            let fired = wave.step();
            let u = wave.odometer_grid();
            for (a, b) in u.data.iter().zip(&penultimate.data) {
                assert!(
                    *a <= 1 + *b,
                    "criterion 09: FAIL — last-wave bound u_t ≤ 1 + ũ broken at seed {}",
                    1_000 + k
                );
            }
            if fired == 0 {
                break 'steps;
            }
            for p in window.iter() {
                if p.iter().any(|&c| c.abs() == radius) && u.get(&p).copied().unwrap_or(0) > 0 {
                    break 'steps;
                }
            }
        }
    }
    50
}

/// 9d: penultimate-cluster arrival times are subadditive over 50 random
/// triples in one fixed Bernoulli(2, 3, 1/2) sample.
fn subadditive_triples() -> usize {
    let spec = bernoulli(2, 2, 3, 0.5, 777);
    let mut oracle = PenultimateOracle::new(&spec, 1 << 12, 1 << 12);
    let mut rng = Rng(0x7713);
    let t_tilde = |src: &[i64], tgt: &[i64], oracle: &mut PenultimateOracle| -> u64 {
        let cluster = oracle.cluster(tgt).unwrap();
        let mut radius = 24i64
            + src
                .iter()
                .zip(tgt)
                .map(|(a, b)| (a - b).abs())
                .max()
                .unwrap_or(0);
        for q in &cluster {
            for (c, s) in q.iter().zip(src) {
                radius = radius.max((c - s).abs() + 8);
            }
        }
        let window = Window::centered(src, radius).unwrap();
        let field =
            arrival_field(&spec, ProcessKind::LastWave, src, &window, 1 << 12, 1 << 12).unwrap();
        let mut t = 0u64;
        for q in &cluster {
            let a = field.times.get(q).copied().unwrap_or(NEVER);
            assert!(a != NEVER, "criterion 09: FAIL — covering wave missed a cluster site");
            t = t.max(a as u64);
        }
        t
    };
    for _ in 0..50 {
        let pick = |rng: &mut Rng| -> Vec<i64> {
            vec![rng.next(17) as i64 - 8, rng.next(17) as i64 - 8]
        };
        let a = pick(&mut rng);
        let mut b = pick(&mut rng);
        while b == a {
            b = pick(&mut rng);
        }
        let mut c = pick(&mut rng);
        while c == a || c == b {
            c = pick(&mut rng);
        }
        let ac = t_tilde(&a, &c, &mut oracle);
        let ab = t_tilde(&a, &b, &mut oracle);
        let bc = t_tilde(&b, &c, &mut oracle);
        assert!(
            ac <= ab + bc,
            "criterion 09: FAIL — subadditivity broken: T̃{a:?}→{c:?} = {ac} > {ab} + {bc}"
        );
    }
    50
}

/// 9e: the last wave never beats the cluster arrival (T̂ ≤ T̃), and the gap
/// between explosion and last-wave arrivals stays flat from radius 64 to
/// 512 on one Bernoulli(2, 3, 1/2) sample.
fn sandwich_and_flatness() -> (u32, [u32; 4]) {
    let spec = bernoulli(2, 2, 3, 0.5, 4242);
    let z = [0i64, 0];
    let window = Window::centered(&z, 512).unwrap();
    let t_field = arrival_field(&spec, ProcessKind::Explosion, &z, &window, 1 << 20, 8192).unwrap();
    let t_hat = arrival_field(&spec, ProcessKind::LastWave, &z, &window, 1 << 14, 8192).unwrap();

    // T̂ ≤ T̃ on a grid of sampled sites near the source.
    let mut oracle = PenultimateOracle::new(&spec, 1 << 12, 1 << 12);
    for x0 in (-24..=24i64).step_by(8) {
        for x1 in (-24..=24i64).step_by(8) {
            let x = vec![x0, x1];
            let hat = t_hat.times.get(&x).copied().unwrap();
            let mut tilde = 0u32;
            for q in oracle.cluster(&x).unwrap() {
                let a = t_hat.times.get(&q).copied().unwrap_or(NEVER);
                assert!(a != NEVER, "criterion 09: FAIL — cluster site unreached at {x:?}");
                tilde = tilde.max(a);
            }
            assert!(
                hat <= tilde,
                "criterion 09: FAIL — T̂({x:?}) = {hat} exceeds T̃ = {tilde}"
            );
        }
    }

    // |T − T̂| over nested windows of radius 64 → 512.
    let mut gaps = [0u32; 4];
    for (i, r) in [64i64, 128, 256, 512].into_iter().enumerate() {
        let mut gap = 0u32;
        for p in Window::centered(&z, r).unwrap().iter() {
            let t = t_field.times.get(&p).copied().unwrap();
            let h = t_hat.times.get(&p).copied().unwrap();
            assert!(
                t != NEVER && h != NEVER,
                "criterion 09: FAIL — arrival fields left {p:?} unreached"
            );
            gap = gap.max(t.abs_diff(h));
        }
        gaps[i] = gap;
    }
    // Flatness: the gap at radius 512 stays within a few steps of the gap
    // at radius 64 instead of growing with the window.
    assert!(
        gaps[3] <= gaps[0] + 4,
        "criterion 09: FAIL — |T − T̂| grows with the window: {gaps:?}"
    );
    (t_field.n_used as u32, gaps)
}

#[test]
fn criterion_09_property_suites() {
    let oracle_cases = abelian_oracle_instances();
    let pairs = monotone_coupling_pairs();
    let bound_runs = last_wave_bound_runs();
    let triples = subadditive_triples();
    let (_, gaps) = sandwich_and_flatness();
    println!(
        "criterion 09: PASS — abelian oracle on {oracle_cases} instances; monotone couplings \
         on {pairs} pairs; last-wave bound on {bound_runs} runs; subadditivity on {triples} \
         triples; T̂ ≤ T̃ sampled and |T − T̂| flat across radii 64→512 (gaps {gaps:?})"
    );
}

// ---------------------------------------------------------------------------
// 10. Shape-convergence trend
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_rescaled_supports_approach_the_limit_shape() {
    // Half-and-half plane: metric against the estimated ball, averaged over
    // ten background seeds, must decrease strictly in t.
    let family = bernoulli(2, 2, 3, 0.5, 0);
    let est = estimate_limit_shape(&family, 12, &[96, 192], &[21, 22, 23], 1 << 16, 4096).unwrap();
    let times = [64u64, 128, 256];
    let mut means = [0.0f64; 3];
    let seeds = 31..=40u64;
    let mut seed_count = 0.0;
    for seed in seeds {
        let spec = bernoulli(2, 2, 3, 0.5, seed);
        let metrics = shape_convergence_metric(&spec, &times, &est.ball, 1 << 16).unwrap();
        for (i, (_, m)) in metrics.iter().enumerate() {
            means[i] += m;
        }
        seed_count += 1.0;
    }
    for m in &mut means {
        *m /= seed_count;
    }
    assert!(
        means[0] > means[1] && means[1] > means[2],
        "criterion 10: FAIL — mean symmetric-difference metric not strictly decreasing: {means:?}"
    );

    // All-threes plane: the exact limit is the L1 ball, and the distance
    // falls below 0.05 by t = 256.
    let l1 = BallRaster::l1(2, 512).unwrap();
    let metrics = shape_convergence_metric(&constant(2, 3), &times, &l1, 16).unwrap();
    let last = metrics.last().unwrap().1;
    assert!(
        last < 0.05,
        "criterion 10: FAIL — η ≡ 3 distance to the L1 ball at t = 256 is {last:.4} ≥ 0.05"
    );
    println!(
        "criterion 10: PASS — mean metric decreasing {:.4} → {:.4} → {:.4} over t ∈ {{64, 128, 256}} \
         (10 seeds); η ≡ 3 vs. L1 ball at t = 256: {:.4} < 0.05",
        means[0], means[1], means[2], last
    );
}
