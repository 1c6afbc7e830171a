//! Dense row-major 2D grids used for images, depth maps and per-pixel fields.

use std::ops::{Index, IndexMut};

use nalgebra::{Vector2, Vector3};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Wraps row-major data. Panics when the length does not match.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn get(&self, x: usize, y: usize) -> Option<&T> {
        (x < self.width && y < self.height).then(|| &self.data[y * self.width + x])
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl<T> Index<(usize, usize)> for Grid<T> {
    type Output = T;

    fn index(&self, (x, y): (usize, usize)) -> &T {
        debug_assert!(x < self.width && y < self.height);
        &self.data[y * self.width + x]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid<T> {
    fn index_mut(&mut self, (x, y): (usize, usize)) -> &mut T {
        debug_assert!(x < self.width && y < self.height);
        &mut self.data[y * self.width + x]
    }
}

/// Values that can be linearly blended during resampling.
pub trait Blend: Copy {
    fn zero() -> Self;
    fn scaled(self, w: f64) -> Self;
    fn plus(self, other: Self) -> Self;
}

impl Blend for f64 {
    fn zero() -> Self {
        0.0
    }
    fn scaled(self, w: f64) -> Self {
        self * w
    }
    fn plus(self, other: Self) -> Self {
        self + other
    }
}

impl Blend for Vector3<f64> {
    fn zero() -> Self {
        Vector3::zeros()
    }
    fn scaled(self, w: f64) -> Self {
        self * w
    }
    fn plus(self, other: Self) -> Self {
        self + other
    }
}

impl Blend for Vector2<f64> {
    fn zero() -> Self {
        Vector2::zeros()
    }
    fn scaled(self, w: f64) -> Self {
        self * w
    }
    fn plus(self, other: Self) -> Self {
        self + other
    }
}

/// Bilinear tap positions and weights for a continuous coordinate, clamped to
/// the grid. Pixel centers sit on integer coordinates.
fn taps(coord: f64, len: usize) -> [(usize, f64); 2] {
    let max = (len - 1) as f64;
    let c = coord.clamp(0.0, max);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    let t = c - i0 as f64;
    [(i0, 1.0 - t), (i1, t)]
}

impl<T: Blend> Grid<T> {
    /// Bilinear sample at a continuous pixel coordinate, clamped at borders.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> T {
        let tx = taps(x, self.width);
        let ty = taps(y, self.height);
        let mut acc = T::zero();
        for &(yi, wy) in &ty {
            for &(xi, wx) in &tx {
                acc = acc.plus(self[(xi, yi)].scaled(wx * wy));
            }
        }
        acc
    }

    /// Resamples to `out_w`×`out_h`, where output pixel `x` reads source
    /// coordinate `(x + 0.5) / scale - 0.5`.
    pub fn resample(&self, out_w: usize, out_h: usize, scale: f64) -> Grid<T> {
        Grid::from_fn(out_w, out_h, |x, y| {
            self.sample_bilinear(source_coord(x, scale), source_coord(y, scale))
        })
    }
}

impl<T: Blend> Grid<T> {
    /// Bilinear sample that only blends taps accepted by `valid`. Returns the
    /// renormalized value and the accepted weight mass.
    pub fn sample_bilinear_masked(&self, x: f64, y: f64, valid: impl Fn(&T) -> bool) -> (T, f64) {
        let tx = taps(x, self.width);
        let ty = taps(y, self.height);
        let mut acc = T::zero();
        let mut mass = 0.0;
        for &(yi, wy) in &ty {
            for &(xi, wx) in &tx {
                let v = self[(xi, yi)];
                let w = wx * wy;
                if w > 0.0 && valid(&v) {
                    acc = acc.plus(v.scaled(w));
                    mass += w;
                }
            }
        }
        if mass > 0.0 {
            (acc.scaled(1.0 / mass), mass)
        } else {
            (T::zero(), 0.0)
        }
    }
}

/// Source coordinate read by output pixel `i` when resampling by `scale`.
pub fn source_coord(i: usize, scale: f64) -> f64 {
    (i as f64 + 0.5) / scale - 0.5
}

/// Dimension of a grid scaled by `scale`, floored. A tiny epsilon absorbs
/// representation error in products like `640 * 0.8`.
pub fn scaled_dim(dim: usize, scale: f64) -> usize {
    (dim as f64 * scale + 1e-9).floor() as usize
}

pub type Image = Grid<Vector3<f64>>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_midpoint_and_clamp() {
        let g = Grid::from_vec(2, 1, vec![1.0, 3.0]);
        assert_eq!(g.sample_bilinear(0.5, 0.0), 2.0);
        assert_eq!(g.sample_bilinear(-4.0, 0.0), 1.0);
        assert_eq!(g.sample_bilinear(9.0, 0.0), 3.0);
    }

    #[test]
    fn masked_sample_renormalizes() {
        let g = Grid::from_vec(2, 1, vec![0.0, 4.0]);
        let (v, mass) = g.sample_bilinear_masked(0.25, 0.0, |d| *d > 0.0);
        assert_eq!(v, 4.0);
        assert!((mass - 0.25).abs() < 1e-15);
    }

    #[test]
    fn scaled_dims_floor() {
        assert_eq!(scaled_dim(640, 0.8), 512);
        assert_eq!(scaled_dim(480, 0.8), 384);
        assert_eq!(scaled_dim(640, 0.8f64.powi(2)), 409);
        assert_eq!(scaled_dim(480, 0.8f64.powi(2)), 307);
    }
}
