//! Dense row-major 2D grids.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// A row-major `height x width` grid of cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }
}

impl<T> Grid<T> {
    /// Wraps `data`; returns `None` unless `data.len() == width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height).then_some(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn get_mut(&mut self, col: usize, row: usize) -> &mut T {
        &mut self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: T) {
        self.data[row * self.width + col] = value;
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

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }
}

impl Grid<f64> {
    /// Bilinear sample at continuous pixel coordinates where cell `(c, r)` has
    /// its center at `(c + 0.5, r + 0.5)`. Coordinates are clamped to the grid.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> f64 {
        #[allow(unused_imports)] // std, when linked, provides these inherently
        use num_traits::Float;
        let x = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize; output cell centers map onto input cell centers.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Grid<f64> {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Grid::from_fn(width, height, |c, r| {
            self.sample_bilinear((c as f64 + 0.5) * sx, (r as f64 + 0.5) * sy)
        })
    }
}

impl Grid<bool> {
    /// Nearest-cell resize, sampling the source at each output cell center.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Grid<bool> {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Grid::from_fn(width, height, |c, r| {
            let sc = (((c as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let sr = (((r as f64 + 0.5) * sy) as usize).min(self.height - 1);
            *self.get(sc, sr)
        })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Inclusive pixel bounds `(col_min, row_min, col_max, row_max)` of set cells.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut out: Option<(usize, usize, usize, usize)> = None;
        for row in 0..self.height {
            for col in 0..self.width {
                if *self.get(col, row) {
                    out = Some(match out {
                        None => (col, row, col, row),
                        Some((a, b, c, d)) => (a.min(col), b.min(row), c.max(col), d.max(row)),
                    });
                }
            }
        }
        out
    }
}
