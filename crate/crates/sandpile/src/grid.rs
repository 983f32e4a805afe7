//! Finite windows into Z^d and dense grids over them.
//!
//! Layout is row-major with the first coordinate fastest, so a d=2 window
//! stores each row of constant x_2 contiguously. Windows are inclusive boxes
//! [lo_1, hi_1] x ... x [lo_d, hi_d].

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Point = Vec<i64>;

/// Hard cap on window volume; well past anything this machine can hold, but
/// catches nonsense before an allocation does.
const MAX_VOLUME: u128 = 1 << 33;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    lo: Vec<i64>,
    hi: Vec<i64>,
}

impl Window {
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::arg("window corners must be non-empty and of equal dimension"));
        }
        if lo.iter().zip(&hi).any(|(a, b)| a > b) {
            return Err(Error::arg("window has lo > hi on some axis"));
        }
        let mut vol: u128 = 1;
        for (a, b) in lo.iter().zip(&hi) {
            vol = vol.saturating_mul((b - a) as u128 + 1);
            if vol > MAX_VOLUME {
                return Err(Error::resource(format!(
                    "window volume exceeds {} sites",
                    MAX_VOLUME
                )));
            }
        }
        Ok(Window { lo, hi })
    }

    /// Cube [center - r, center + r]^d.
    pub fn centered(center: &[i64], radius: i64) -> Result<Self> {
        if radius < 0 {
            return Err(Error::arg("window radius must be >= 0"));
        }
        Window::new(
            center.iter().map(|c| c - radius).collect(),
            center.iter().map(|c| c + radius).collect(),
        )
    }

    /// The cube {1, ..., k}^d.
    pub fn cube(k: i64, d: usize) -> Result<Self> {
        if k < 1 || d < 1 {
            return Err(Error::arg("cube needs k >= 1 and d >= 1"));
        }
        Window::new(vec![1; d], vec![k; d])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[i64] {
        &self.lo
    }

    pub fn hi(&self) -> &[i64] {
        &self.hi
    }

    pub fn extents(&self) -> Vec<usize> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| (b - a) as usize + 1)
            .collect()
    }

    pub fn volume(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn contains(&self, p: &[i64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(x, (a, b))| a <= x && x <= b)
    }

    /// Flat index of `p` (first coordinate fastest), or None if outside.
    pub fn index_of(&self, p: &[i64]) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let mut idx = 0usize;
        let mut stride = 1usize;
        for i in 0..self.dim() {
            idx += (p[i] - self.lo[i]) as usize * stride;
            stride *= (self.hi[i] - self.lo[i]) as usize + 1;
        }
        Some(idx)
    }

    pub fn point_at(&self, mut idx: usize) -> Point {
        let mut p = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let ext = (self.hi[i] - self.lo[i]) as usize + 1;
            p.push(self.lo[i] + (idx % ext) as i64);
            idx /= ext;
        }
        p
    }

    pub fn iter(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.volume()).map(move |i| self.point_at(i))
    }

    pub fn inflate(&self, m: i64) -> Result<Window> {
        Window::new(
            self.lo.iter().map(|a| a - m).collect(),
            self.hi.iter().map(|b| b + m).collect(),
        )
    }

    /// Distance from `p` to the nearest face, i.e. how many parallel steps a
    /// front starting at `p` needs before it can reach the window boundary.
    /// This is the exact step budget for an untruncated run.
    pub fn boundary_distance(&self, p: &[i64]) -> i64 {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(x, (a, b))| (x - a).min(b - x))
            .min()
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub window: Window,
    pub data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new_fill(window: Window, value: T) -> Self {
        let n = window.volume();
        Grid { window, data: vec![value; n] }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(window: Window, data: Vec<T>) -> Result<Self> {
        if data.len() != window.volume() {
            return Err(Error::arg("grid data length does not match window volume"));
        }
        Ok(Grid { window, data })
    }

    pub fn get(&self, p: &[i64]) -> Option<&T> {
        self.window.index_of(p).map(|i| &self.data[i])
    }

    pub fn set(&mut self, p: &[i64], value: T) -> bool {
        match self.window.index_of(p) {
            Some(i) => {
                self.data[i] = value;
                true
            }
            None => false,
        }
    }

    /// Iterate (point, value).
    pub fn iter(&self) -> impl Iterator<Item = (Point, &T)> + '_ {
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (self.window.point_at(i), v))
    }
}
