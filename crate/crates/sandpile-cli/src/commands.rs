//! One function per subcommand. Each resolves its inputs from the [`Ctx`],
//! writes `manifest.json` plus its artifacts into the output directory, and
//! returns a one-line summary (exit 0), a verification failure (exit 1), or
//! a usage error (exit 2).

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use sandpile::analysis::{
    bootstrap_internally_spanned, crossing_report, dimensional_reduction_check,
    explosion_threshold, is_box_crossing, is_recurrent_on, is_strongly_box_crossing,
    CrossingReport, ExplosionOutcome, StrongCrossing,
};
use sandpile::background::splitmix64;
use sandpile::engine::BoundaryMode;
use sandpile::io;
use sandpile::shapes::{estimate_limit_shape, verify_counterexample};
use sandpile::waves::{last_wave_threshold, run_n_wave, LastWaveOutcome};
use sandpile::{BackgroundSpec, Family, Grid, Point, SandpileState, StabilizeOutcome, Window};

use crate::config::{failed, usage, CliResult, Ctx, OutputFormat};

/// Materialize the background over a window.
fn field_on(spec: &BackgroundSpec, win: &Window) -> Grid<i32> {
    let mut g = Grid::new_fill(win.clone(), 0);
    for p in win.iter() {
        g.set(&p, spec.at(&p));
    }
    g
}

fn origin(d: usize) -> Point {
    vec![0; d]
}

/// Derive one reproducible seed per (size, trial) cell of a campaign.
fn trial_seed(base: u64, size: i64, trial: u64) -> u64 {
    splitmix64(base ^ splitmix64(((size as u64) << 32) | trial))
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SimulateReport {
    outcome: StabilizeOutcome,
    time: u64,
    exported: i64,
    support_sites: usize,
    support_diameter: i64,
    support_bbox: Option<(Point, Point)>,
    artifacts: Vec<String>,
}

pub fn simulate(ctx: &Ctx) -> CliResult<String> {
    let spec = ctx.background()?;
    let d = spec.dimension;
    let chips = ctx.params.chips.unwrap_or(0);
    let radius = ctx.params.window.unwrap_or_else(|| match ctx.params.steps {
        Some(s) => s as i64 + 10,
        // Robust-regime supports grow like the square root of the mass; the
        // cap keeps accidental huge windows from exhausting memory.
        None => (2 * (chips as f64).sqrt() as i64 + 16).clamp(128, 1024),
    });
    let window = Window::centered(&origin(d), radius)?;
    let budget = match ctx.params.steps {
        Some(s) => s,
        None => ctx.params.step_budget.unwrap_or_else(|| (radius as u64 * 32).max(1 << 16)),
    };

    let mut state = SandpileState::from_background(&spec, &window, BoundaryMode::Open)?;
    state.add_chips(&origin(d), chips as i64)?;
    let outcome = state.stabilize(budget);

    let mut artifacts = vec!["result.json".to_string()];
    if ctx.wants(OutputFormat::Pgm) && d == 2 {
        io::write_pgm(&ctx.artifact("chips.pgm"), &io::chip_snapshot(&state)?)?;
        io::write_pgm(&ctx.artifact("support.pgm"), &io::support_snapshot(&state)?)?;
        io::write_pgm(&ctx.artifact("odometer.pgm"), &io::odometer_snapshot(&state)?)?;
        artifacts.extend(["chips.pgm".into(), "support.pgm".into(), "odometer.pgm".into()]);
    }
    if ctx.wants(OutputFormat::Csv) {
        io::write_grid_csv(&ctx.artifact("chips.csv"), &state.chip_grid())?;
        io::write_grid_csv(&ctx.artifact("odometer.csv"), &state.odometer_grid())?;
        artifacts.extend(["chips.csv".into(), "odometer.csv".into()]);
    }

    let report = SimulateReport {
        outcome: outcome.clone(),
        time: state.time(),
        exported: state.exported(),
        support_sites: window.iter().filter(|p| state.toppled(p)).count(),
        support_diameter: state.support_diameter(),
        support_bbox: state.support_bbox(),
        artifacts,
    };
    io::write_json(&ctx.artifact("result.json"), &report)?;

    let what = match &outcome {
        StabilizeOutcome::Stabilized { time } => format!("stabilized at t = {time}"),
        StabilizeOutcome::FrontierHit { time, .. } => {
            format!("reached the window frontier at t = {time}")
        }
        StabilizeOutcome::BudgetExceeded { budget } => {
            format!("still active after {budget} steps")
        }
    };
    Ok(format!(
        "{what}; support diameter {}; artifacts in {}",
        report.support_diameter,
        ctx.out.display()
    ))
}

// ---------------------------------------------------------------------------
// explode
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ExplodeReport {
    source: Point,
    window_radius: i64,
    n_budget: u64,
    step_budget: u64,
    #[serde(flatten)]
    outcome: ExplosionOutcome,
}

pub fn explode(ctx: &Ctx) -> CliResult<String> {
    let spec = ctx.background()?;
    let d = spec.dimension;
    let z = origin(d);
    let radius = ctx.params.window.unwrap_or(64);
    let window = Window::centered(&z, radius)?;
    let n_budget = ctx.params.n_budget.unwrap_or(1 << 20);
    let step_budget = ctx.params.step_budget.unwrap_or(radius as u64 * 8 + 1024);

    let outcome = explosion_threshold(&spec, &z, &window, n_budget, step_budget)?;
    let report = ExplodeReport {
        source: z.clone(),
        window_radius: radius,
        n_budget,
        step_budget,
        outcome: outcome.clone(),
    };
    io::write_json(&ctx.artifact("explode.json"), &report)?;

    match outcome {
        ExplosionOutcome::Found { m, .. } => {
            if ctx.wants(OutputFormat::Csv) {
                let field = sandpile::waves::arrival_field(
                    &spec,
                    sandpile::waves::ProcessKind::Explosion,
                    &z,
                    &window,
                    n_budget,
                    step_budget,
                )?;
                io::write_arrivals_csv(&ctx.artifact("arrivals.csv"), &field.times)?;
            }
            Ok(format!("explosion threshold {m} within radius {radius}"))
        }
        ExplosionOutcome::NotFoundWithinBudget { n_budget } => Err(failed(format!(
            "no explosion threshold within {n_budget} chips on radius {radius}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// wave
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct WaveNotFound {
    outcome: &'static str,
    n_budget: u64,
    window_limited: bool,
}

#[derive(Serialize)]
struct PathFillReport {
    path_steps: u64,
    path_sites: usize,
    rectangle_lo: Point,
    rectangle_hi: Point,
    rectangle_sites: u64,
    filled: bool,
    spill_sites: usize,
    outcome: StabilizeOutcome,
}

pub fn wave(ctx: &Ctx) -> CliResult<String> {
    if ctx.params.chips.is_some() && ctx.params.path.is_some() {
        return Err(usage("--chips and --path are mutually exclusive"));
    }
    if let Some(len) = ctx.params.path {
        return path_filling(ctx, len);
    }

    let spec = ctx.background()?;
    let d = spec.dimension;
    let z = origin(d);
    let radius = ctx.params.window.unwrap_or(32);
    let window = Window::centered(&z, radius)?;
    let n_budget = ctx.params.n_budget.unwrap_or(1 << 20);
    let step_budget = ctx.params.step_budget.unwrap_or(radius as u64 * 8 + 1024);

    let run = match ctx.params.chips {
        Some(n) => run_n_wave(&spec, &z, n, &window, step_budget)?,
        None => match last_wave_threshold(&spec, &z, &window, n_budget, step_budget)? {
            LastWaveOutcome::Found(run) => run,
            LastWaveOutcome::NotFoundWithinBudget { n_budget, window_limited } => {
                io::write_json(
                    &ctx.artifact("wave.json"),
                    &WaveNotFound { outcome: "not_found", n_budget, window_limited },
                )?;
                return Err(failed(format!(
                    "no wave reaches the frontier within {n_budget} chips{}",
                    if window_limited { " (some probes ran out of steps)" } else { "" }
                )));
            }
        },
    };

    let summary = run.summary();
    io::write_json(&ctx.artifact("wave.json"), &summary)?;
    if ctx.wants(OutputFormat::Pgm) && d == 2 {
        // Prefer the stabilized terminal odometer; for a threshold run that
        // is the wave just below the threshold.
        let grid = run.terminal.as_ref().or(run.penultimate.as_ref());
        if let Some(g) = grid {
            io::write_pgm(&ctx.artifact("odometer.pgm"), &io::odometer_grid_snapshot(g)?)?;
        }
    }
    if ctx.wants(OutputFormat::Csv) {
        io::write_arrivals_csv(&ctx.artifact("arrivals.csv"), &run.arrivals)?;
        if let Some(cluster) = &run.cluster {
            let columns: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
            let cols: Vec<&str> = columns.iter().map(|s| s.as_str()).collect();
            let rows: Vec<Vec<i64>> = cluster.iter().map(|p| p.to_vec()).collect();
            io::write_curve_csv(&ctx.artifact("cluster.csv"), &cols, &rows)?;
        }
    }

    let what = match summary.m_hat {
        Some(m) => format!("last-wave threshold {m}; the threshold wave reached {} sites", summary.support),
        None => format!("{}-wave covered {} sites", summary.n, summary.support),
    };
    Ok(format!("{what}; artifacts in {}", ctx.out.display()))
}

/// Freeze a random nearest-neighbor path, seed its odometer at one, and
/// let the surrounding field topple: over an all-2 background the toppled
/// set must fill the path's bounding rectangle.
fn path_filling(ctx: &Ctx, len: u64) -> CliResult<String> {
    let spec = ctx.background_or(|| {
        Ok(BackgroundSpec::new(
            ctx.params.dim.unwrap_or(2),
            ctx.seed(),
            Family::Constant { c: 2 },
        )?)
    })?;
    let d = spec.dimension;

    // A reproducible lattice walk from the origin.
    let mut site = origin(d);
    let mut sites = BTreeSet::new();
    sites.insert(site.clone());
    let mut h = splitmix64(ctx.seed() ^ 0x9e3779b97f4a7c15);
    for _ in 0..len {
        h = splitmix64(h);
        let axis = (h % (2 * d as u64)) as usize;
        site[axis / 2] += if axis % 2 == 0 { 1 } else { -1 };
        sites.insert(site.clone());
    }
    let sites: Vec<Point> = sites.into_iter().collect();

    let mut lo = sites[0].clone();
    let mut hi = sites[0].clone();
    for p in &sites {
        for k in 0..d {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let rect = Window::new(lo.clone(), hi.clone())?;
    let margin: Vec<i64> = lo.iter().map(|c| c - 8).collect();
    let margin_hi: Vec<i64> = hi.iter().map(|c| c + 8).collect();
    let window = Window::new(margin, margin_hi)?;

    let mut state = SandpileState::from_background(&spec, &window, BoundaryMode::Open)?;
    state.freeze(&sites)?;
    for p in &sites {
        state.seed_odometer(p, 1)?;
    }
    let outcome = state.stabilize(ctx.params.step_budget.unwrap_or(1 << 16));

    let filled = rect.iter().all(|p| state.toppled(&p));
    let spill_sites = window
        .iter()
        .filter(|p| state.toppled(p) && !rect.contains(p))
        .count();
    let report = PathFillReport {
        path_steps: len,
        path_sites: sites.len(),
        rectangle_lo: lo,
        rectangle_hi: hi,
        rectangle_sites: rect.volume() as u64,
        filled,
        spill_sites,
        outcome,
    };
    io::write_json(&ctx.artifact("wave.json"), &report)?;
    if ctx.wants(OutputFormat::Pgm) && d == 2 {
        io::write_pgm(&ctx.artifact("odometer.pgm"), &io::odometer_snapshot(&state)?)?;
        io::write_pgm(&ctx.artifact("support.pgm"), &io::support_snapshot(&state)?)?;
    }
    if ctx.wants(OutputFormat::Csv) {
        io::write_grid_csv(&ctx.artifact("odometer.csv"), &state.odometer_grid())?;
    }

    if filled {
        Ok(format!(
            "the frozen path ({} sites) filled its {}-site bounding rectangle",
            report.path_sites, report.rectangle_sites
        ))
    } else {
        Err(failed(format!(
            "the frozen path left {} rectangle sites untoppled",
            rect.iter().filter(|p| !state.toppled(p)).count()
        )))
    }
}

// ---------------------------------------------------------------------------
// crossing
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CrossingArtifact {
    k: i64,
    offset: Point,
    good: bool,
    max_time: Option<u32>,
    lines: usize,
    /// Seeded-face crossings, directions `0..d` low faces then `d..2d` high.
    face_crossing: Vec<bool>,
    strong: StrongCrossing,
    report: CrossingReport,
}

pub fn crossing(ctx: &Ctx) -> CliResult<String> {
    let spec = ctx.background()?;
    let d = spec.dimension;
    let k = ctx.params.window.unwrap_or(8);
    if k < 1 {
        return Err(usage("--window (the cube side) must be at least 1"));
    }
    let report = crossing_report(&spec, k, &origin(d))?;

    let cube = Window::new(vec![1; d], vec![k; d])?;
    let values = field_on(&spec, &cube);
    let face_crossing: Vec<bool> = (0..2 * d)
        .map(|dir| is_box_crossing(&values, dir))
        .collect::<sandpile::Result<_>>()?;
    let strong = is_strongly_box_crossing(&values)?;

    let artifact = CrossingArtifact {
        k,
        offset: origin(d),
        good: report.good,
        max_time: report.max_time,
        lines: report.times.len(),
        face_crossing,
        strong,
        report,
    };
    io::write_json(&ctx.artifact("crossing.json"), &artifact)?;

    if artifact.good {
        Ok(format!(
            "all {} lines crossed within time {}",
            artifact.lines,
            artifact.max_time.expect("good cubes have a finite maximum")
        ))
    } else {
        Err(failed(format!(
            "{} of {} crossing lines stalled on the side-{k} cube",
            artifact.report.times.iter().filter(|s| s.time.is_none()).count(),
            artifact.lines
        )))
    }
}

// ---------------------------------------------------------------------------
// limit-shape
// ---------------------------------------------------------------------------

pub fn limit_shape(ctx: &Ctx) -> CliResult<String> {
    let spec = ctx.background()?;
    let d = spec.dimension;
    let directions = ctx.params.directions.unwrap_or(if d == 2 { 8 } else { 26 });
    let scales = ctx.params.scales.clone().unwrap_or_else(|| vec![8, 16, 32]);
    let seeds = ctx.params.seeds.clone().unwrap_or_else(|| vec![1, 2, 3, 4]);
    let n_budget = ctx.params.n_budget.unwrap_or(1 << 20);
    let step_budget = ctx.params.step_budget.unwrap_or(4096);

    let estimate = estimate_limit_shape(&spec, directions, &scales, &seeds, n_budget, step_budget)?;

    io::write_json(&ctx.artifact("shape.json"), &estimate)?;
    io::write_speed_csv(&ctx.artifact("speeds.csv"), &estimate.samples)?;
    if ctx.wants(OutputFormat::Pgm) && d == 2 {
        io::write_pgm(&ctx.artifact("ball.pgm"), &io::ball_snapshot(&estimate.ball)?)?;
    }

    let (lo, hi) = estimate
        .n_hat
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut notes = Vec::new();
    if !estimate.converged {
        notes.push("scales not yet converged".to_string());
    }
    if estimate.insufficient_seeds {
        notes.push(format!("{} seeds skipped", estimate.skipped_seeds));
    }
    let notes = if notes.is_empty() { String::new() } else { format!(" ({})", notes.join("; ")) };
    Ok(format!(
        "directional speeds in [{lo:.3}, {hi:.3}]; symmetry {:.3}, convexity {:.3}{notes}",
        estimate.symmetry_score, estimate.convexity_score
    ))
}

// ---------------------------------------------------------------------------
// counterexample
// ---------------------------------------------------------------------------

pub fn counterexample(ctx: &Ctx) -> CliResult<String> {
    let n_max = ctx.params.nmax.unwrap_or(99);
    let dims = ctx.params.dims.clone().unwrap_or_else(|| vec![2, 3]);
    let report = verify_counterexample(n_max, &dims)?;
    io::write_json(&ctx.artifact("counterexample.json"), &report)?;
    if report.ok() {
        Ok(format!(
            "arrival brackets hold through n = {n_max}; pulsating front verified \
             (liminf sample {:.3}, limsup sample {:.3})",
            report.liminf_sample, report.limsup_sample
        ))
    } else {
        Err(failed(
            report.failure.clone().unwrap_or_else(|| "the construction did not verify".into()),
        ))
    }
}

// ---------------------------------------------------------------------------
// recurrence
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RecurrenceRow {
    dim: usize,
    size: i64,
    recurrent: bool,
}

pub fn recurrence(ctx: &Ctx) -> CliResult<String> {
    let sizes = ctx.params.sizes.clone().unwrap_or_else(|| vec![4, 8, 16, 32]);
    let dims = match &ctx.background {
        Some(spec) => vec![spec.dimension],
        None => ctx.params.dims.clone().unwrap_or_else(|| vec![2, 3]),
    };

    let mut rows = Vec::new();
    for &d in &dims {
        let spec = ctx.background_or(|| {
            Ok(BackgroundSpec::new(d, ctx.seed(), Family::Constant { c: d as i32 })?)
        })?;
        for &n in &sizes {
            let cube = Window::new(vec![1; d], vec![n; d])?;
            let values = field_on(&spec, &cube);
            rows.push(RecurrenceRow { dim: d, size: n, recurrent: is_recurrent_on(&values)? });
        }
    }
    io::write_json(&ctx.artifact("recurrence.json"), &rows)?;

    let failures: Vec<&RecurrenceRow> = rows.iter().filter(|r| !r.recurrent).collect();
    if failures.is_empty() {
        Ok(format!("all {} boxes are recurrent", rows.len()))
    } else {
        Err(failed(format!(
            "{} of {} boxes are not recurrent (first: d={} n={})",
            failures.len(),
            rows.len(),
            failures[0].dim,
            failures[0].size
        )))
    }
}

// ---------------------------------------------------------------------------
// bootstrap
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct BootstrapRow {
    size: i64,
    trials: u64,
    successes: u64,
    fraction: f64,
}

#[derive(Serialize)]
struct BootstrapReport {
    dim: usize,
    p: f64,
    rows: Vec<BootstrapRow>,
}

/// Draw a threshold field: each site independently `2d` with probability
/// `p`, else `d`. These fields exceed the maximal stable height by design,
/// so they are drawn directly rather than through a background document.
fn threshold_field(d: usize, n: i64, p: f64, seed: u64) -> CliResult<Grid<i32>> {
    let win = Window::new(vec![1; d], vec![n; d])?;
    let mut g = Grid::new_fill(win.clone(), 0);
    for q in win.iter() {
        let mut h = splitmix64(seed);
        for &c in q.iter() {
            h = splitmix64(h ^ (c as u64));
        }
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        g.set(&q, if u < p { 2 * d as i32 } else { d as i32 });
    }
    Ok(g)
}

pub fn bootstrap(ctx: &Ctx) -> CliResult<String> {
    if ctx.background.is_some() {
        return Err(usage(
            "bootstrap draws its own threshold fields (values d and 2d); --background is not used",
        ));
    }
    let d = ctx.params.dim.unwrap_or(2);
    let p = ctx.params.p.unwrap_or(0.1);
    let sizes = ctx.params.sizes.clone().unwrap_or_else(|| vec![8, 16, 32, 64]);
    let trials = ctx.params.trials.unwrap_or(200);
    let base = ctx.seed();

    let mut rows = Vec::new();
    for &n in &sizes {
        let successes: u64 = (0..trials)
            .into_par_iter()
            .map(|t| -> CliResult<u64> {
                let values = threshold_field(d, n, p, trial_seed(base, n, t))?;
                Ok(bootstrap_internally_spanned(&values)? as u64)
            })
            .sum::<CliResult<u64>>()?;
        rows.push(BootstrapRow {
            size: n,
            trials,
            successes,
            fraction: successes as f64 / trials.max(1) as f64,
        });
    }

    let table: Vec<Vec<u64>> =
        rows.iter().map(|r| vec![r.size as u64, r.trials, r.successes]).collect();
    io::write_curve_csv(&ctx.artifact("curve.csv"), &["n", "trials", "successes"], &table)?;
    io::write_json(&ctx.artifact("bootstrap.json"), &BootstrapReport { dim: d, p, rows })?;
    Ok(format!(
        "spanning curve over {} sizes x {trials} trials written to {}",
        sizes.len(),
        ctx.out.display()
    ))
}

// ---------------------------------------------------------------------------
// reduce-dim
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ReductionRow {
    size: i64,
    trial: u64,
    seed: u64,
    face: usize,
    agreed: bool,
}

pub fn reduce_dim(ctx: &Ctx) -> CliResult<String> {
    let d = ctx.params.dim.unwrap_or(2);
    if d < 2 {
        return Err(usage("--dim must be at least 2"));
    }
    let p = ctx.params.p.unwrap_or(0.5);
    let sizes = ctx.params.sizes.clone().unwrap_or_else(|| vec![6]);
    let trials = ctx.params.trials.unwrap_or(8);
    let base = ctx.seed();

    let mut rows = Vec::new();
    for &n in &sizes {
        let checked: Vec<ReductionRow> = (0..trials)
            .into_par_iter()
            .map(|t| -> CliResult<ReductionRow> {
                let mut spec = ctx.background_or(|| {
                    Ok(BackgroundSpec::new(
                        d,
                        0,
                        Family::Bernoulli { a: 2 * d as i32 - 1, b: d as i32, p },
                    )?)
                })?;
                let seed = trial_seed(base, n, t);
                spec.seed = seed;
                let cube = Window::new(vec![1; spec.dimension], vec![n; spec.dimension])?;
                let values = field_on(&spec, &cube);
                let face = (t as usize) % (2 * spec.dimension);
                let agreed = dimensional_reduction_check(&values, face)?;
                Ok(ReductionRow { size: n, trial: t, seed, face, agreed })
            })
            .collect::<CliResult<_>>()?;
        rows.extend(checked);
    }
    io::write_json(&ctx.artifact("reduce_dim.json"), &rows)?;

    let disagreements = rows.iter().filter(|r| !r.agreed).count();
    if disagreements == 0 {
        Ok(format!("face coupling agreed on all {} instances", rows.len()))
    } else {
        Err(failed(format!(
            "face coupling disagreed on {disagreements} of {} instances",
            rows.len()
        )))
    }
}
