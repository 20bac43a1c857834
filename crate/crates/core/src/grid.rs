//! Dense 4-D grids laid out as `[w, h, d, c]` with the channel axis fastest.
//!
//! The flat index of `(x, y, t, ch)` is `((t * h + y) * w + x) * c + ch`, so
//! every spatio-temporal position owns a contiguous run of `c` values. That
//! makes per-position linear maps a single row-major GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

/// Real-valued grid: frames, token grids, feature volumes and CAMs.
pub type Volume = Grid<f64>;
/// Boolean grid: segmentation masks.
pub type MaskVolume = Grid<bool>;

impl<T: Clone + Default> Grid<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::default(); dims.iter().product()],
        }
    }
}

impl<T: Clone> Grid<T> {
    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "grid {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [w, h, d, c] = dims;
        let mut data = Vec::with_capacity(w * h * d * c);
        for t in 0..d {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data.push(f(x, y, t, ch));
                    }
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.dims[0]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.dims[1]
    }
    #[inline]
    pub fn d(&self) -> usize {
        self.dims[2]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.dims[3]
    }

    /// Number of spatio-temporal positions (`w * h * d`).
    #[inline]
    pub fn positions(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, t: usize, ch: usize) -> usize {
        let [w, h, _, c] = self.dims;
        ((t * h + y) * w + x) * c + ch
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, t: usize, ch: usize) -> &T {
        &self.data[self.index(x, y, t, ch)]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize, t: usize, ch: usize) -> &mut T {
        let i = self.index(x, y, t, ch);
        &mut self.data[i]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub(crate) fn ensure_dims(&self, other: [usize; 4], what: &str) -> Result<()> {
        if self.dims != other {
            return Err(Error::shape(format!(
                "{what}: expected {other:?}, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

impl<T: Clone> Grid<T> {
    /// Frame `t` as its own grid with `d = 1`.
    pub fn frame(&self, t: usize) -> Grid<T> {
        let [w, h, _, c] = self.dims;
        let len = w * h * c;
        Grid {
            dims: [w, h, 1, c],
            data: self.data[t * len..(t + 1) * len].to_vec(),
        }
    }

    /// Channel `ch` as its own grid with `c = 1`.
    pub fn channel(&self, ch: usize) -> Grid<T> {
        let c = self.dims[3];
        Grid {
            dims: [self.dims[0], self.dims[1], self.dims[2], 1],
            data: self.data.iter().skip(ch).step_by(c).cloned().collect(),
        }
    }

    /// Reorders the temporal axis so output frame `i` is input frame `order[i]`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Grid<T>> {
        let [w, h, d, c] = self.dims;
        if order.len() != d {
            return Err(Error::shape(format!(
                "frame order has {} entries for {d} frames",
                order.len()
            )));
        }
        let len = w * h * c;
        let mut data = Vec::with_capacity(self.data.len());
        for &src in order {
            if src >= d {
                return Err(Error::range(format!("frame index {src} >= {d}")));
            }
            data.extend_from_slice(&self.data[src * len..(src + 1) * len]);
        }
        Ok(Grid {
            dims: self.dims,
            data,
        })
    }

    /// Concatenates single-frame grids along the temporal axis.
    pub fn stack_frames(frames: &[Grid<T>]) -> Result<Grid<T>> {
        let first = frames
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero frames"))?;
        let [w, h, _, c] = first.dims;
        let mut data = Vec::with_capacity(first.data.len() * frames.len());
        let mut d = 0;
        for f in frames {
            if f.dims[0] != w || f.dims[1] != h || f.dims[3] != c {
                return Err(Error::shape(format!(
                    "frame {:?} does not match {:?}",
                    f.dims, first.dims
                )));
            }
            d += f.dims[2];
            data.extend_from_slice(&f.data);
        }
        Ok(Grid {
            dims: [w, h, d, c],
            data,
        })
    }
}

impl Volume {
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn add_assign(&mut self, other: &Volume) -> Result<()> {
        other.ensure_dims(self.dims, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

impl MaskVolume {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
