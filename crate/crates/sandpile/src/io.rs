//! Plain-file output: binary PGM snapshots of planar runs, CSV tables with
//! gnuplot companion scripts, and JSON for the structured reports.
//!
//! PGM files are binary (P5) with maximum value 255. Rows run top to bottom
//! in decreasing x_2, so images come out in the usual mathematical
//! orientation. CSV files use comma separators, `.` decimals, LF line
//! endings, and a leading `#` header line; every CSV writer drops a small
//! gnuplot script next to the data so figures can be regenerated without
//! this crate.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::engine::{SandpileState, NEVER};
use crate::grid::Grid;
use crate::shapes::{BallRaster, SpeedSample};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// PGM
// ---------------------------------------------------------------------------

/// Shade of one site in a chip snapshot: untoppled sites are white, toppled
/// sites darken with their chip count (0 or fewer chips lightest, four or
/// more black).
pub fn chip_shade(toppled: bool, chips: i32) -> u8 {
    if !toppled {
        return 255;
    }
    match chips {
        i32::MIN..=0 => 224,
        1 => 176,
        2 => 128,
        3 => 80,
        _ => 0,
    }
}

/// Write a planar grid of shades as a binary PGM (P5, max value 255). The
/// first image row is the window's top edge (largest x_2).
pub fn write_pgm(path: &Path, shades: &Grid<u8>) -> Result<()> {
    if shades.window.dim() != 2 {
        return Err(Error::arg("PGM output is for planar grids"));
    }
    let w = shades.window.extents()[0];
    let h = shades.window.extents()[1];
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let lo = shades.window.lo().to_vec();
    let hi = shades.window.hi().to_vec();
    let mut row = Vec::with_capacity(w);
    for x2 in (lo[1]..=hi[1]).rev() {
        row.clear();
        for x1 in lo[0]..=hi[0] {
            row.push(*shades.get(&[x1, x2]).expect("in window"));
        }
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Chip-count snapshot of a planar state, ready for [`write_pgm`].
pub fn chip_snapshot(state: &SandpileState) -> Result<Grid<u8>> {
    planar(state, |state, p| chip_shade(state.toppled(p), state.chips(p)))
}

/// Support snapshot: toppled sites black, the rest white.
pub fn support_snapshot(state: &SandpileState) -> Result<Grid<u8>> {
    planar(state, |state, p| if state.toppled(p) { 0 } else { 255 })
}

/// Odometer snapshot: untoppled sites white, toppled sites darken linearly
/// with their odometer up to the maximum in view.
pub fn odometer_snapshot(state: &SandpileState) -> Result<Grid<u8>> {
    odometer_grid_snapshot(&state.odometer_grid())
}

/// Shades for a raw odometer grid, same scheme as [`odometer_snapshot`]:
/// zero stays white, positive values darken linearly up to the maximum.
pub fn odometer_grid_snapshot(v: &Grid<u64>) -> Result<Grid<u8>> {
    if v.window.dim() != 2 {
        return Err(Error::arg("snapshots are for planar grids"));
    }
    let max = v.data.iter().copied().max().unwrap_or(0);
    let mut grid = Grid::new_fill(v.window.clone(), 255u8);
    for (p, &value) in v.iter() {
        if value > 0 {
            // 224 at odometer 1 shading down to 0 at the maximum.
            let shade = (224 - (value as u128 * 224 / max.max(1) as u128) as u8).min(224);
            grid.set(&p, shade);
        }
    }
    Ok(grid)
}

fn planar(
    state: &SandpileState,
    shade: impl Fn(&SandpileState, &[i64]) -> u8,
) -> Result<Grid<u8>> {
    let win = state.window().clone();
    if win.dim() != 2 {
        return Err(Error::arg("snapshots are for planar states"));
    }
    let mut grid = Grid::new_fill(win.clone(), 255u8);
    for p in win.iter() {
        grid.set(&p, shade(state, &p));
    }
    Ok(grid)
}

/// Ball-raster image: cells inside the ball black, outside white.
pub fn ball_snapshot(ball: &BallRaster) -> Result<Grid<u8>> {
    if ball.grid.window.dim() != 2 {
        return Err(Error::arg("ball images are for planar rasters"));
    }
    let mut grid = Grid::new_fill(ball.grid.window.clone(), 255u8);
    for (p, &inside) in ball.grid.iter() {
        if inside {
            grid.set(&p, 0);
        }
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// CSV + gnuplot companions
// ---------------------------------------------------------------------------

/// Path of the gnuplot script written alongside `csv`.
fn companion_path(csv: &Path) -> PathBuf {
    csv.with_extension("gnuplot")
}

fn write_companion(csv: &Path, body: &str) -> Result<()> {
    let mut out = BufWriter::new(File::create(companion_path(csv))?);
    let name = csv
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::arg("CSV path has no printable file name"))?;
    writeln!(out, "# gnuplot script regenerating the figure for {name}")?;
    writeln!(out, "set datafile separator \",\"")?;
    writeln!(out, "{}", body.replace("{csv}", name))?;
    out.flush()?;
    Ok(())
}

/// Write a raw grid as CSV: a `#` header carrying the window corners, then
/// the values row-major (x_1 fastest). Planar grids become a matrix, one
/// window row per record; higher-dimensional grids get one `coords…,value`
/// record per site.
pub fn write_grid_csv<T: Display>(path: &Path, grid: &Grid<T>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let lo = grid.window.lo().to_vec();
    let hi = grid.window.hi().to_vec();
    writeln!(
        out,
        "# window lo={} hi={}",
        lo.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        hi.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
    )?;
    if grid.window.dim() == 2 {
        for x2 in lo[1]..=hi[1] {
            let mut first = true;
            for x1 in lo[0]..=hi[0] {
                if !first {
                    write!(out, ",")?;
                }
                write!(out, "{}", grid.get(&[x1, x2]).expect("in window"))?;
                first = false;
            }
            writeln!(out)?;
        }
        out.flush()?;
        write_companion(
            path,
            "plot '{csv}' matrix nonuniform with image notitle",
        )?;
    } else {
        for (p, v) in grid.iter() {
            for c in &p {
                write!(out, "{c},")?;
            }
            writeln!(out, "{v}")?;
        }
        out.flush()?;
        write_companion(path, "# one coords…,value record per site\nplot '{csv}' using 1:2 notitle")?;
    }
    Ok(())
}

/// Write an arrival field as CSV with columns `x_1,…,x_d,t`; unreached
/// sites leave the time field empty.
pub fn write_arrivals_csv(path: &Path, arrivals: &Grid<u32>) -> Result<()> {
    let d = arrivals.window.dim();
    let mut out = BufWriter::new(File::create(path)?);
    let cols: Vec<String> = (1..=d).map(|k| format!("x_{k}")).collect();
    writeln!(out, "# {},t", cols.join(","))?;
    for (p, &t) in arrivals.iter() {
        for c in &p {
            write!(out, "{c},")?;
        }
        if t == NEVER {
            writeln!(out)?;
        } else {
            writeln!(out, "{t}")?;
        }
    }
    out.flush()?;
    let body = if d == 2 {
        "plot '{csv}' using 1:2:3 with image notitle"
    } else {
        "# arrival records are x_1,…,x_d,t\nplot '{csv}' using 1:2 notitle"
    };
    write_companion(path, body)?;
    Ok(())
}

/// Write speed samples as CSV with columns `direction,n,seed,ratio` (the
/// direction quoted, its coordinates space-separated).
pub fn write_speed_csv(path: &Path, samples: &[SpeedSample]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# direction,n,seed,ratio")?;
    for s in samples {
        let dir = s.direction.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(out, "\"{dir}\",{},{},{}", s.scale, s.seed, s.ratio)?;
    }
    out.flush()?;
    write_companion(
        path,
        "plot '{csv}' using 2:4 with points pt 7 title 'T(n·u)/n'",
    )?;
    Ok(())
}

/// Write a generic curve as CSV: a `#` header naming the columns, one
/// record per row.
pub fn write_curve_csv<T: Display>(path: &Path, columns: &[&str], rows: &[Vec<T>]) -> Result<()> {
    if rows.iter().any(|r| r.len() != columns.len()) {
        return Err(Error::arg("every row needs one value per column"));
    }
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# {}", columns.join(","))?;
    for row in rows {
        let line = row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    write_companion(path, "plot '{csv}' using 1:2 with linespoints title columnheader")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

/// Write any serializable report as pretty-printed JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, value)
        .map_err(|e| Error::arg(format!("JSON serialization failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::background::{BackgroundSpec, Family};
    use crate::engine::BoundaryMode;
    use crate::grid::Window;

    #[test]
    fn pgm_bytes_are_exact_for_a_tiny_run() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BackgroundSpec::new(2, 0, Family::Constant { c: 3 }).unwrap();
        let win = Window::centered(&[0, 0], 1).unwrap();
        let mut state =
            SandpileState::from_background(&spec, &win, BoundaryMode::Open).unwrap();
        state.add_chips(&[0, 0], 1).unwrap();
        state.parallel_step();
        // Only the origin has toppled; it holds 0 chips, its neighbors 4.
        let path = dir.path().join("chips.pgm");
        write_pgm(&path, &chip_snapshot(&state).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expected = b"P5\n3 3\n255\n".to_vec();
        expected.extend_from_slice(&[255, 255, 255, 255, 224, 255, 255, 255, 255]);
        assert_eq!(bytes, expected);

        let path = dir.path().join("support.pgm");
        write_pgm(&path, &support_snapshot(&state).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expected = b"P5\n3 3\n255\n".to_vec();
        expected.extend_from_slice(&[255, 255, 255, 255, 0, 255, 255, 255, 255]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn pgm_rows_run_top_down_in_x2() {
        let dir = tempfile::tempdir().unwrap();
        let win = Window::new(vec![0, 0], vec![1, 1]).unwrap();
        let mut shades = Grid::new_fill(win, 128u8);
        shades.set(&[0, 1], 7); // top-left in image coordinates
        let path = dir.path().join("orient.pgm");
        write_pgm(&path, &shades).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[7, 128, 128, 128]);
    }

    #[test]
    fn arrival_csv_leaves_unreached_sites_empty() {
        let dir = tempfile::tempdir().unwrap();
        let win = Window::new(vec![0, 0], vec![1, 0]).unwrap();
        let mut arrivals = Grid::new_fill(win, NEVER);
        arrivals.set(&[0, 0], 3u32);
        let path = dir.path().join("arrivals.csv");
        write_arrivals_csv(&path, &arrivals).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# x_1,x_2,t\n0,0,3\n1,0,\n");
        assert!(companion_path(&path).exists());
        let script = std::fs::read_to_string(companion_path(&path)).unwrap();
        assert!(script.contains("arrivals.csv"));
        assert!(script.contains("set datafile separator"));
    }

    #[test]
    fn grid_csv_carries_the_window_corners() {
        let dir = tempfile::tempdir().unwrap();
        let win = Window::new(vec![-1, 5], vec![0, 6]).unwrap();
        let mut grid = Grid::new_fill(win, 0i32);
        grid.set(&[-1, 5], 1);
        grid.set(&[0, 5], 2);
        grid.set(&[-1, 6], 3);
        grid.set(&[0, 6], 4);
        let path = dir.path().join("grid.csv");
        write_grid_csv(&path, &grid).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# window lo=-1,5 hi=0,6\n1,2\n3,4\n");
    }

    #[test]
    fn speed_csv_quotes_directions() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![SpeedSample {
            direction: vec![2, -1],
            scale: 16,
            seed: 9,
            ratio: 1.5,
        }];
        let path = dir.path().join("speeds.csv");
        write_speed_csv(&path, &samples).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# direction,n,seed,ratio\n\"2 -1\",16,9,1.5\n");
        assert!(companion_path(&path).exists());
    }

    #[test]
    fn json_and_curves_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ball = BallRaster::l1(2, 4).unwrap();
        let path = dir.path().join("ball.json");
        write_json(&path, &ball).unwrap();
        let back: BallRaster =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back.resolution, ball.resolution);

        let img = ball_snapshot(&ball).unwrap();
        assert_eq!(*img.get(&[0, 0]).unwrap(), 0);
        assert_eq!(*img.get(&[5, 0]).unwrap(), 255);

        let curve = dir.path().join("curve.csv");
        write_curve_csv(&curve, &["n", "p"], &[vec![8.0, 0.25], vec![16.0, 0.5]]).unwrap();
        let text = std::fs::read_to_string(&curve).unwrap();
        assert_eq!(text, "# n,p\n8,0.25\n16,0.5\n");
    }
}
