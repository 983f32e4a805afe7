//! Seeded background configurations η: Z^d -> Z.
//!
//! Every family is a pure function of (spec, coordinate): the value at a site
//! is derived by hashing the seed, a family tag, and the owning coordinate
//! (site or tile), so any window, any traversal order, and any worker count
//! see the same field. No RNG state is carried between calls.

use serde::{Deserialize, Serialize};

use crate::grid::{Grid, Point, Window};
use crate::{Error, Result};

/// One round of splitmix64; the usual constants.
pub const fn splitmix64(x: u64) -> u64 {
    let x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn hash_point(seed: u64, tag: u64, p: &[i64]) -> u64 {
    let mut h = splitmix64(seed ^ tag);
    for &c in p {
        h = splitmix64(h ^ (c as u64));
    }
    h
}

/// Uniform in [0, 1) from the top 53 bits.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

const TAG_BERNOULLI: u64 = 0x42_45_52_4e;
const TAG_CLOUD: u64 = 0x43_4c_4f_55;
const TAG_TILE: u64 = 0x54_49_4c_45;

/// The 4x4 tile of the deterministic explosive counterexample, stored with
/// x_1 fastest and x_2 = 0 the bottom row: 1 at the corners, 3 elsewhere.
pub const ZETA_1: [i32; 16] = [
    1, 3, 3, 1, // x_2 = 0
    3, 3, 3, 3, // x_2 = 1
    3, 3, 3, 3, // x_2 = 2
    1, 3, 3, 1, // x_2 = 3
];

/// Variant tile: equal to `ZETA_1` except for a 2 at (1, 2).
pub const ZETA_2: [i32; 16] = [
    1, 3, 3, 1, //
    3, 3, 3, 3, //
    3, 2, 3, 3, //
    1, 3, 3, 1, //
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub dimension: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub family: Family,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum Family {
    /// η ≡ c.
    Constant { c: i32 },
    /// Two-point field: independently per site, `b` with probability `p`,
    /// else `a`.
    Bernoulli { a: i32, b: i32, p: f64 },
    /// Shifted copies of the point set `points` are switched on independently
    /// with probability `p` per lattice shift; covered sites get 2d-1, the
    /// rest 2d-2.
    BernoulliCloud { points: Vec<Point>, p: f64 },
    /// Z^d tiled by boxes of the given extent; each tile independently draws
    /// one of the `tiles` value tables with the matching probability.
    /// Tables are stored with x_1 fastest.
    Checkerboard {
        extent: Vec<i64>,
        tiles: Vec<Vec<i32>>,
        probs: Vec<f64>,
    },
    /// One deterministic tile repeated over Z^d.
    Periodic { extent: Vec<i64>, values: Vec<i32> },
    /// d = 2 explosive counterexample: 4x4 tiles, each independently ZETA_1
    /// with probability `p_zeta1`, else ZETA_2. `p_zeta1 = 1` is the
    /// deterministic tiling.
    Counterexample { p_zeta1: f64 },
    /// The counterexample stacked into d >= 3:
    /// η(x) = 2(d-2) + η_2d(x_1, x_2).
    CounterexampleStacked { p_zeta1: f64 },
}

impl BackgroundSpec {
    pub fn new(dimension: usize, seed: u64, family: Family) -> Result<Self> {
        let spec = BackgroundSpec { dimension, seed, family };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: BackgroundSpec =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("background spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dimension;
        if d < 1 {
            return Err(Error::arg("dimension must be >= 1"));
        }
        let max_stable = 2 * d as i32 - 1;
        let check_value = |v: i32| -> Result<()> {
            if v > max_stable {
                Err(Error::arg(format!(
                    "background value {} exceeds the maximal stable value {}",
                    v, max_stable
                )))
            } else {
                Ok(())
            }
        };
        let check_prob = |p: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                Err(Error::arg(format!("probability {} outside [0, 1]", p)))
            } else {
                Ok(())
            }
        };
        match &self.family {
            Family::Constant { c } => check_value(*c)?,
            Family::Bernoulli { a, b, p } => {
                check_value(*a)?;
                check_value(*b)?;
                check_prob(*p)?;
            }
            Family::BernoulliCloud { points, p } => {
                check_prob(*p)?;
                if points.is_empty() {
                    return Err(Error::arg("cloud point set must be non-empty"));
                }
                if points.iter().any(|q| q.len() != d) {
                    return Err(Error::arg("cloud point dimension mismatch"));
                }
            }
            Family::Checkerboard { extent, tiles, probs } => {
                let vol = tile_volume(extent, d)?;
                if tiles.is_empty() || tiles.len() != probs.len() {
                    return Err(Error::arg("need one probability per tile table"));
                }
                for t in tiles {
                    if t.len() != vol {
                        return Err(Error::arg("tile table length != tile volume"));
                    }
                    for &v in t {
                        check_value(v)?;
                    }
                }
                let sum: f64 = probs.iter().sum();
                if probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::arg("tile probabilities must be >= 0 and sum to 1"));
                }
            }
            Family::Periodic { extent, values } => {
                let vol = tile_volume(extent, d)?;
                if values.len() != vol {
                    return Err(Error::arg("tile table length != tile volume"));
                }
                for &v in values {
                    check_value(v)?;
                }
            }
            Family::Counterexample { p_zeta1 } => {
                check_prob(*p_zeta1)?;
                if d != 2 {
                    return Err(Error::arg("counterexample background is two-dimensional"));
                }
            }
            Family::CounterexampleStacked { p_zeta1 } => {
                check_prob(*p_zeta1)?;
                if d < 3 {
                    return Err(Error::arg("stacked counterexample needs dimension >= 3"));
                }
            }
        }
        Ok(())
    }

    /// Declared (min, max) of the field values.
    pub fn value_range(&self) -> (i32, i32) {
        let d = self.dimension as i32;
        match &self.family {
            Family::Constant { c } => (*c, *c),
            Family::Bernoulli { a, b, p } => {
                if *p == 0.0 {
                    (*a, *a)
                } else if *p == 1.0 {
                    (*b, *b)
                } else {
                    ((*a).min(*b), (*a).max(*b))
                }
            }
            Family::BernoulliCloud { .. } => (2 * d - 2, 2 * d - 1),
            Family::Checkerboard { tiles, .. } => {
                let lo = tiles.iter().flatten().copied().min().unwrap_or(0);
                let hi = tiles.iter().flatten().copied().max().unwrap_or(0);
                (lo, hi)
            }
            Family::Periodic { values, .. } => {
                let lo = values.iter().copied().min().unwrap_or(0);
                let hi = values.iter().copied().max().unwrap_or(0);
                (lo, hi)
            }
            Family::Counterexample { .. } => (1, 3),
            Family::CounterexampleStacked { .. } => (2 * (d - 2) + 1, 2 * (d - 2) + 3),
        }
    }

    /// Field value at a site. Coordinate length must match the dimension.
    pub fn at(&self, x: &[i64]) -> i32 {
        debug_assert_eq!(x.len(), self.dimension);
        let d = self.dimension as i32;
        match &self.family {
            Family::Constant { c } => *c,
            Family::Bernoulli { a, b, p } => {
                if unit(hash_point(self.seed, TAG_BERNOULLI, x)) < *p {
                    *b
                } else {
                    *a
                }
            }
            Family::BernoulliCloud { points, p } => {
                // x is covered by the copy at shift j iff x - s = j for some
                // s in the point set; scan the |S| candidate shifts.
                let mut shift = vec![0i64; x.len()];
                for s in points {
                    for i in 0..x.len() {
                        shift[i] = x[i] - s[i];
                    }
                    if unit(hash_point(self.seed, TAG_CLOUD, &shift)) < *p {
                        return 2 * d - 1;
                    }
                }
                2 * d - 2
            }
            Family::Checkerboard { extent, tiles, probs } => {
                let (tile_idx, offset) = split_tile(x, extent);
                let r = unit(hash_point(self.seed, TAG_TILE, &tile_idx));
                let mut acc = 0.0;
                let mut chosen = tiles.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if r < acc {
                        chosen = i;
                        break;
                    }
                }
                tiles[chosen][offset]
            }
            Family::Periodic { extent, values } => {
                let (_, offset) = split_tile(x, extent);
                values[offset]
            }
            Family::Counterexample { p_zeta1 } => self.counterexample_2d(x, *p_zeta1),
            Family::CounterexampleStacked { p_zeta1 } => {
                2 * (d - 2) + self.counterexample_2d(&x[..2], *p_zeta1)
            }
        }
    }

    fn counterexample_2d(&self, xy: &[i64], p_zeta1: f64) -> i32 {
        let tile_idx = [xy[0].div_euclid(4), xy[1].div_euclid(4)];
        let offset = (xy[0].rem_euclid(4) + 4 * xy[1].rem_euclid(4)) as usize;
        if p_zeta1 >= 1.0 || unit(hash_point(self.seed, TAG_TILE, &tile_idx)) < p_zeta1 {
            ZETA_1[offset]
        } else {
            ZETA_2[offset]
        }
    }

    /// Materialize the field over a window.
    pub fn fill_window(&self, window: &Window) -> Result<Grid<i32>> {
        if window.dim() != self.dimension {
            return Err(Error::arg("window dimension does not match background"));
        }
        let mut data = Vec::with_capacity(window.volume());
        let mut p = window.lo().to_vec();
        let lo = window.lo().to_vec();
        let hi = window.hi().to_vec();
        loop {
            data.push(self.at(&p));
            // odometer-style increment, first coordinate fastest
            let mut axis = 0;
            loop {
                if axis == p.len() {
                    return Grid::from_vec(window.clone(), data);
                }
                p[axis] += 1;
                if p[axis] <= hi[axis] {
                    break;
                }
                p[axis] = lo[axis];
                axis += 1;
            }
        }
    }
}

fn tile_volume(extent: &[i64], d: usize) -> Result<usize> {
    if extent.len() != d || extent.iter().any(|&e| e < 1) {
        return Err(Error::arg("tile extent must be positive and match dimension"));
    }
    let vol: i64 = extent.iter().product();
    if vol > 1 << 24 {
        return Err(Error::resource("tile volume too large"));
    }
    Ok(vol as usize)
}

/// Tile coordinates of x and its flat offset within the tile (x_1 fastest).
fn split_tile(x: &[i64], extent: &[i64]) -> (Vec<i64>, usize) {
    let mut tile = Vec::with_capacity(x.len());
    let mut offset = 0usize;
    let mut stride = 1usize;
    for i in 0..x.len() {
        tile.push(x[i].div_euclid(extent[i]));
        offset += x[i].rem_euclid(extent[i]) as usize * stride;
        stride *= extent[i] as usize;
    }
    (tile, offset)
}
