//! Periodic grids, sampled fields and deformation maps.
//!
//! Nodes are stored row-major with the last axis fastest: in 2D the node
//! `(i0, i1)` lives at linear index `i0 * n1 + i1` and sits at the physical
//! position `(i0 * h0, i1 * h1)`. Vector components are indexed by axis.

use num_traits::Float;

use crate::{GeoError, Real, Result};

/// Uniform periodic grid in one or two dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    shape: Vec<usize>,
    spacing: Vec<T>,
}

impl<T: Real> Grid<T> {
    pub fn new(shape: &[usize], spacing: &[T]) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(GeoError::InvalidInput(format!(
                "grid dimension must be 1 or 2, got {}",
                shape.len()
            )));
        }
        if spacing.len() != shape.len() {
            return Err(GeoError::InvalidInput(
                "spacing must have one entry per axis".into(),
            ));
        }
        if let Some(n) = shape.iter().find(|&&n| n < 4) {
            return Err(GeoError::InvalidInput(format!(
                "every axis needs at least 4 nodes, got {n}"
            )));
        }
        if spacing.iter().any(|h| !h.is_finite() || *h <= T::zero()) {
            return Err(GeoError::InvalidInput(
                "spacing must be finite and positive".into(),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            spacing: spacing.to_vec(),
        })
    }

    pub fn new_1d(n: usize, h: T) -> Result<Self> {
        Self::new(&[n], &[h])
    }

    pub fn new_2d(n0: usize, n1: usize, h0: T, h1: T) -> Result<Self> {
        Self::new(&[n0, n1], &[h0, h1])
    }

    /// Square `n × n` grid covering the unit square.
    pub fn unit_square(n: usize) -> Result<Self> {
        let h = T::one() / T::from_usize_lossy(n);
        Self::new_2d(n, n, h, h)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[T] {
        &self.spacing
    }

    pub fn cell_volume(&self) -> T {
        self.spacing.iter().fold(T::one(), |acc, &h| acc * h)
    }

    /// Physical period along `axis`.
    pub fn extent(&self, axis: usize) -> T {
        T::from_usize_lossy(self.shape[axis]) * self.spacing[axis]
    }

    #[inline]
    pub(crate) fn n1(&self) -> usize {
        if self.dim() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    /// Multi-index of a linear node index (second entry is 0 in 1D).
    #[inline]
    pub fn unravel(&self, idx: usize) -> [usize; 2] {
        let n1 = self.n1();
        [idx / n1, idx % n1]
    }

    /// Physical position of node `idx` (second entry is 0 in 1D).
    #[inline]
    pub fn node(&self, idx: usize) -> [T; 2] {
        let [i0, i1] = self.unravel(idx);
        let x0 = T::from_usize_lossy(i0) * self.spacing[0];
        let x1 = if self.dim() == 2 {
            T::from_usize_lossy(i1) * self.spacing[1]
        } else {
            T::zero()
        };
        [x0, x1]
    }

    /// Linear index of the neighbour of `idx` offset by `step` along `axis`, with wrap.
    #[inline]
    pub(crate) fn shift(&self, idx: usize, axis: usize, step: isize) -> usize {
        let [i0, i1] = self.unravel(idx);
        let n = self.shape[axis] as isize;
        if axis == 0 {
            let j = (i0 as isize + step).rem_euclid(n) as usize;
            j * self.n1() + i1
        } else {
            let j = (i1 as isize + step).rem_euclid(n) as usize;
            i0 * self.n1() + j
        }
    }

    pub(crate) fn check_same(&self, other: &Grid<T>) -> Result<()> {
        if self.shape != other.shape || self.spacing != other.spacing {
            return Err(GeoError::GridMismatch(format!(
                "{:?}/{:?} vs {:?}/{:?}",
                self.shape, self.spacing, other.shape, other.spacing
            )));
        }
        Ok(())
    }

    /// Interpolation stencil at a physical position. The position must be finite.
    #[inline]
    pub(crate) fn stencil(&self, p: [T; 2]) -> Stencil<T> {
        let (i0, f0) = self.locate(p[0], 0);
        let h0 = self.spacing[0];
        if self.dim() == 1 {
            let j0 = (i0 + 1) % self.shape[0];
            let inv = T::one() / h0;
            return Stencil {
                idx: [i0, j0, i0, i0],
                w: [T::one() - f0, f0, T::zero(), T::zero()],
                dw: [[-inv, inv, T::zero(), T::zero()], [T::zero(); 4]],
            };
        }
        let (i1, f1) = self.locate(p[1], 1);
        let h1 = self.spacing[1];
        let n1 = self.shape[1];
        let j0 = (i0 + 1) % self.shape[0];
        let j1 = (i1 + 1) % n1;
        let g0 = T::one() - f0;
        let g1 = T::one() - f1;
        Stencil {
            idx: [i0 * n1 + i1, j0 * n1 + i1, i0 * n1 + j1, j0 * n1 + j1],
            w: [g0 * g1, f0 * g1, g0 * f1, f0 * f1],
            dw: [
                [-g1 / h0, g1 / h0, -f1 / h0, f1 / h0],
                [-g0 / h1, -f0 / h1, g0 / h1, f0 / h1],
            ],
        }
    }

    /// Cell index and fractional offset along `axis`, wrapped into range.
    #[inline]
    fn locate(&self, x: T, axis: usize) -> (usize, T) {
        let mut q = x / self.spacing[axis];
        let r = q.round();
        if Float::abs(q - r) <= T::epsilon() * T::lit(8.0) * Float::abs(r).max(T::one()) {
            q = r;
        }
        let fl = q.floor();
        let f = q - fl;
        let n = self.shape[axis] as i64;
        let i = fl.to_i64().unwrap_or(0).rem_euclid(n) as usize;
        (i, f)
    }
}

/// Bilinear (2D) / linear (1D) interpolation weights for one position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil<T> {
    pub idx: [usize; 4],
    pub w: [T; 4],
    /// Derivatives of the weights with respect to the physical position.
    pub dw: [[T; 4]; 2],
}

impl<T: Real> Stencil<T> {
    #[inline]
    pub fn eval(&self, v: &[T]) -> T {
        self.w[0] * v[self.idx[0]]
            + self.w[1] * v[self.idx[1]]
            + self.w[2] * v[self.idx[2]]
            + self.w[3] * v[self.idx[3]]
    }

    /// Gradient of the interpolant with respect to the query position.
    #[inline]
    pub fn grad(&self, v: &[T]) -> [T; 2] {
        let a = [
            v[self.idx[0]],
            v[self.idx[1]],
            v[self.idx[2]],
            v[self.idx[3]],
        ];
        let d = |k: usize| {
            self.dw[k][0] * a[0] + self.dw[k][1] * a[1] + self.dw[k][2] * a[2] + self.dw[k][3] * a[3]
        };
        [d(0), d(1)]
    }

    /// Adjoint of `eval` with respect to the node values.
    #[inline]
    pub fn scatter(&self, out: &mut [T], a: T) {
        for k in 0..4 {
            out[self.idx[k]] = out[self.idx[k]] + self.w[k] * a;
        }
    }
}

/// Catmull-Rom weights and their derivatives for offsets `-1, 0, 1, 2`.
fn cubic_weights<T: Real>(f: T) -> ([T; 4], [T; 4]) {
    let h = T::lit(0.5);
    let f2 = f * f;
    let f3 = f2 * f;
    let c = |x: f64| T::lit(x);
    (
        [
            h * (-f3 + c(2.0) * f2 - f),
            h * (c(3.0) * f3 - c(5.0) * f2 + c(2.0)),
            h * (c(-3.0) * f3 + c(4.0) * f2 + f),
            h * (f3 - f2),
        ],
        [
            h * (c(-3.0) * f2 + c(4.0) * f - T::one()),
            h * (c(9.0) * f2 - c(10.0) * f),
            h * (c(-9.0) * f2 + c(8.0) * f + T::one()),
            h * (c(3.0) * f2 - c(2.0) * f),
        ],
    )
}

/// Catmull-Rom (bicubic in 2D) interpolation weights for one position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct CubicStencil<T> {
    pub idx: [usize; 16],
    pub w: [T; 16],
    pub dw: [[T; 16]; 2],
}

impl<T: Real> Grid<T> {
    pub(crate) fn cubic_stencil(&self, p: [T; 2]) -> CubicStencil<T> {
        let wrap = |i: usize, o: isize, n: usize| ((i as isize + o).rem_euclid(n as isize)) as usize;
        let (i0, f0) = self.locate(p[0], 0);
        let n0 = self.shape[0];
        let (w0, d0) = cubic_weights(f0);
        let inv0 = T::one() / self.spacing[0];
        let mut st = CubicStencil {
            idx: [0; 16],
            w: [T::zero(); 16],
            dw: [[T::zero(); 16]; 2],
        };
        if self.dim() == 1 {
            for a in 0..4 {
                st.idx[a] = wrap(i0, a as isize - 1, n0);
                st.w[a] = w0[a];
                st.dw[0][a] = d0[a] * inv0;
            }
            return st;
        }
        let (i1, f1) = self.locate(p[1], 1);
        let n1 = self.shape[1];
        let (w1, d1) = cubic_weights(f1);
        let inv1 = T::one() / self.spacing[1];
        for a in 0..4 {
            let r = wrap(i0, a as isize - 1, n0);
            for b in 0..4 {
                let k = a * 4 + b;
                st.idx[k] = r * n1 + wrap(i1, b as isize - 1, n1);
                st.w[k] = w0[a] * w1[b];
                st.dw[0][k] = d0[a] * inv0 * w1[b];
                st.dw[1][k] = w0[a] * d1[b] * inv1;
            }
        }
        st
    }
}

impl<T: Real> CubicStencil<T> {
    #[inline]
    pub fn eval(&self, v: &[T]) -> T {
        (0..16).fold(T::zero(), |acc, k| acc + self.w[k] * v[self.idx[k]])
    }

    #[inline]
    pub fn grad(&self, v: &[T]) -> [T; 2] {
        let mut g = [T::zero(); 2];
        for k in 0..16 {
            let x = v[self.idx[k]];
            g[0] = g[0] + self.dw[0][k] * x;
            g[1] = g[1] + self.dw[1][k] * x;
        }
        g
    }

    #[inline]
    pub fn scatter(&self, out: &mut [T], a: T) {
        for k in 0..16 {
            out[self.idx[k]] = out[self.idx[k]] + self.w[k] * a;
        }
    }
}

fn check_finite<T: Real>(values: &[T], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GeoError::InvalidInput(format!("{what} contains non-finite values")))
    }
}

fn point_from_slice<T: Real>(grid: &Grid<T>, point: &[T]) -> Result<[T; 2]> {
    if point.len() != grid.dim() {
        return Err(GeoError::InvalidInput(format!(
            "point has {} coordinates, grid has dimension {}",
            point.len(),
            grid.dim()
        )));
    }
    if point.iter().any(|x| !x.is_finite()) {
        return Err(GeoError::InvalidInput("non-finite sample point".into()));
    }
    Ok([point[0], if grid.dim() == 2 { point[1] } else { T::zero() }])
}

/// Central difference along `axis` with periodic wrap.
pub(crate) fn central_diff<T: Real>(grid: &Grid<T>, f: &[T], axis: usize, out: &mut [T]) {
    let inv = T::one() / (T::lit(2.0) * grid.spacing()[axis]);
    for (idx, o) in out.iter_mut().enumerate() {
        let p = grid.shift(idx, axis, 1);
        let m = grid.shift(idx, axis, -1);
        *o = (f[p] - f[m]) * inv;
    }
}

/// One real value per grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField<T> {
    grid: Grid<T>,
    values: Vec<T>,
}

impl<T: Real> ScalarField<T> {
    pub fn new(grid: Grid<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(GeoError::InvalidInput(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        check_finite(&values, "scalar field")?;
        Ok(Self { grid, values })
    }

    pub(crate) fn from_raw(grid: Grid<T>, values: Vec<T>) -> Self {
        debug_assert_eq!(grid.len(), values.len());
        Self { grid, values }
    }

    pub fn zeros(grid: &Grid<T>) -> Self {
        Self::constant(grid, T::zero())
    }

    pub fn constant(grid: &Grid<T>, c: T) -> Self {
        Self {
            values: vec![c; grid.len()],
            grid: grid.clone(),
        }
    }

    /// Field from a function of the physical node position.
    pub fn from_fn(grid: &Grid<T>, f: impl Fn([T; 2]) -> T) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.node(i))).collect();
        Self {
            grid: grid.clone(),
            values,
        }
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Periodic (bi)linear interpolation at a physical position.
    pub fn sample(&self, point: &[T]) -> Result<T> {
        let p = point_from_slice(&self.grid, point)?;
        Ok(self.grid.stencil(p).eval(&self.values))
    }

    /// Values at many positions; fails on the first non-finite point.
    pub fn sample_many(&self, points: &[Vec<T>]) -> Result<Vec<T>> {
        points.iter().map(|p| self.sample(p)).collect()
    }

    #[inline]
    pub(crate) fn sample_at(&self, p: [T; 2]) -> T {
        self.grid.stencil(p).eval(&self.values)
    }

    /// Central-difference gradient.
    pub fn grad(&self) -> VectorField<T> {
        let n = self.grid.len();
        let comps = (0..self.grid.dim())
            .map(|axis| {
                let mut out = vec![T::zero(); n];
                central_diff(&self.grid, &self.values, axis, &mut out);
                out
            })
            .collect();
        VectorField {
            grid: self.grid.clone(),
            comps,
        }
    }

    /// `Σ a·b · cellVolume`.
    pub fn inner(&self, other: &Self) -> Result<T> {
        self.grid.check_same(&other.grid)?;
        Ok(dot(&self.values, &other.values) * self.grid.cell_volume())
    }

    pub fn norm_sq(&self) -> T {
        dot(&self.values, &self.values) * self.grid.cell_volume()
    }

    /// `Σ values · cellVolume`.
    pub fn integral(&self) -> T {
        self.values.iter().copied().sum::<T>() * self.grid.cell_volume()
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn max_abs(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |m, &v| m.max(Float::abs(v)))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        Ok(Self {
            grid: self.grid.clone(),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `dim` real components per grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T> {
    grid: Grid<T>,
    comps: Vec<Vec<T>>,
}

impl<T: Real> VectorField<T> {
    pub fn new(grid: Grid<T>, comps: Vec<Vec<T>>) -> Result<Self> {
        if comps.len() != grid.dim() {
            return Err(GeoError::InvalidInput(format!(
                "expected {} components, got {}",
                grid.dim(),
                comps.len()
            )));
        }
        for c in &comps {
            if c.len() != grid.len() {
                return Err(GeoError::InvalidInput(format!(
                    "component has {} values, grid has {} nodes",
                    c.len(),
                    grid.len()
                )));
            }
            check_finite(c, "vector field")?;
        }
        Ok(Self { grid, comps })
    }

    pub(crate) fn from_raw(grid: Grid<T>, comps: Vec<Vec<T>>) -> Self {
        Self { grid, comps }
    }

    pub fn zeros(grid: &Grid<T>) -> Self {
        Self {
            comps: vec![vec![T::zero(); grid.len()]; grid.dim()],
            grid: grid.clone(),
        }
    }

    pub fn constant(grid: &Grid<T>, c: &[T]) -> Result<Self> {
        if c.len() != grid.dim() {
            return Err(GeoError::InvalidInput("constant has wrong length".into()));
        }
        Ok(Self {
            comps: c.iter().map(|&v| vec![v; grid.len()]).collect(),
            grid: grid.clone(),
        })
    }

    pub fn from_fn(grid: &Grid<T>, f: impl Fn([T; 2]) -> [T; 2]) -> Self {
        let mut comps = vec![vec![T::zero(); grid.len()]; grid.dim()];
        for i in 0..grid.len() {
            let v = f(grid.node(i));
            for (a, c) in comps.iter_mut().enumerate() {
                c[i] = v[a];
            }
        }
        Self {
            grid: grid.clone(),
            comps,
        }
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[T] {
        &self.comps[axis]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [T] {
        &mut self.comps[axis]
    }

    pub fn components(&self) -> &[Vec<T>] {
        &self.comps
    }

    pub fn component_field(&self, axis: usize) -> ScalarField<T> {
        ScalarField::from_raw(self.grid.clone(), self.comps[axis].clone())
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().flatten().all(|v| v.is_finite())
    }

    #[inline]
    pub(crate) fn at(&self, idx: usize) -> [T; 2] {
        [
            self.comps[0][idx],
            if self.comps.len() == 2 {
                self.comps[1][idx]
            } else {
                T::zero()
            },
        ]
    }

    #[inline]
    pub(crate) fn sample_at(&self, p: [T; 2]) -> [T; 2] {
        let st = self.grid.stencil(p);
        self.eval_stencil(&st)
    }

    #[inline]
    pub(crate) fn eval_stencil(&self, st: &Stencil<T>) -> [T; 2] {
        [
            st.eval(&self.comps[0]),
            if self.comps.len() == 2 {
                st.eval(&self.comps[1])
            } else {
                T::zero()
            },
        ]
    }

    /// Periodic (bi)linear interpolation of every component.
    pub fn sample(&self, point: &[T]) -> Result<Vec<T>> {
        let p = point_from_slice(&self.grid, point)?;
        let v = self.sample_at(p);
        Ok(v[..self.grid.dim()].to_vec())
    }

    /// Central-difference divergence.
    pub fn div(&self) -> ScalarField<T> {
        let n = self.grid.len();
        let mut out = vec![T::zero(); n];
        let mut tmp = vec![T::zero(); n];
        for (axis, c) in self.comps.iter().enumerate() {
            central_diff(&self.grid, c, axis, &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o = *o + *t;
            }
        }
        ScalarField::from_raw(self.grid.clone(), out)
    }

    /// `Σ a·b · cellVolume` over nodes and components.
    pub fn inner(&self, other: &Self) -> Result<T> {
        self.grid.check_same(&other.grid)?;
        Ok(self.dot_raw(other) * self.grid.cell_volume())
    }

    pub(crate) fn dot_raw(&self, other: &Self) -> T {
        self.comps
            .iter()
            .zip(&other.comps)
            .fold(T::zero(), |acc, (a, b)| acc + dot(a, b))
    }

    pub fn norm_sq(&self) -> T {
        self.dot_raw(self) * self.grid.cell_volume()
    }

    pub fn max_abs(&self) -> T {
        self.comps
            .iter()
            .flatten()
            .fold(T::zero(), |m, &v| m.max(Float::abs(v)))
    }

    /// Largest component magnitude measured in grid cells of its axis.
    pub fn max_abs_cells(&self) -> T {
        self.comps
            .iter()
            .enumerate()
            .map(|(a, c)| {
                let h = self.grid.spacing()[a];
                c.iter().fold(T::zero(), |m, &v| m.max(Float::abs(v) / h))
            })
            .fold(T::zero(), T::max)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            grid: self.grid.clone(),
            comps: self
                .comps
                .iter()
                .map(|c| c.iter().map(|&v| f(v)).collect())
                .collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        Ok(Self {
            grid: self.grid.clone(),
            comps: self
                .comps
                .iter()
                .zip(&other.comps)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// `self += c · other`, grids assumed equal.
    pub(crate) fn axpy(&mut self, c: T, other: &Self) {
        for (a, b) in self.comps.iter_mut().zip(&other.comps) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + c * y;
            }
        }
    }
}

/// A map `φ(x) = x + d(x)` stored through its displacement `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationMap<T> {
    disp: VectorField<T>,
}

/// Output of [`DeformationMap::invert`].
#[derive(Clone, Debug)]
pub struct Inverse<T> {
    pub map: DeformationMap<T>,
    /// `‖φ∘φ⁻¹ − Id‖∞` in grid cells.
    pub residual: T,
    pub iterations: usize,
}

impl<T: Real> DeformationMap<T> {
    pub fn identity(grid: &Grid<T>) -> Self {
        Self {
            disp: VectorField::zeros(grid),
        }
    }

    pub fn from_displacement(disp: VectorField<T>) -> Self {
        Self { disp }
    }

    pub fn translation(grid: &Grid<T>, shift: &[T]) -> Result<Self> {
        Ok(Self {
            disp: VectorField::constant(grid, shift)?,
        })
    }

    pub fn grid(&self) -> &Grid<T> {
        self.disp.grid()
    }

    pub fn displacement(&self) -> &VectorField<T> {
        &self.disp
    }

    pub fn into_displacement(self) -> VectorField<T> {
        self.disp
    }

    /// `φ(p)` for an arbitrary physical point.
    pub fn apply(&self, point: &[T]) -> Result<Vec<T>> {
        let d = self.disp.sample(point)?;
        Ok(point.iter().zip(d).map(|(&x, dx)| x + dx).collect())
    }

    #[inline]
    pub(crate) fn image_of_node(&self, idx: usize) -> [T; 2] {
        let x = self.grid().node(idx);
        let d = self.disp.at(idx);
        [x[0] + d[0], x[1] + d[1]]
    }

    /// `(φ∘ψ)(x) = φ(ψ(x))`.
    pub fn compose(&self, psi: &Self) -> Result<Self> {
        self.grid().check_same(psi.grid())?;
        let grid = self.grid().clone();
        let dim = grid.dim();
        let mut comps = vec![vec![T::zero(); grid.len()]; dim];
        for idx in 0..grid.len() {
            let q = psi.image_of_node(idx);
            let dq = psi.disp.at(idx);
            let d = self.disp.sample_at(q);
            for a in 0..dim {
                comps[a][idx] = dq[a] + d[a];
            }
        }
        Ok(Self {
            disp: VectorField::from_raw(grid, comps),
        })
    }

    /// Fixed-point inversion `d⁻(x) ← −d(x + d⁻(x))`.
    ///
    /// Stops when the largest update falls below `tol` (in cells); fails with
    /// the final residual if that does not happen within `iters` sweeps.
    pub fn invert(&self, iters: usize, tol: T) -> Result<Inverse<T>> {
        let grid = self.grid().clone();
        let dim = grid.dim();
        let n = grid.len();
        let h = grid.spacing().to_vec();
        let mut inv: Vec<Vec<T>> = self.disp.comps.iter().map(|c| c.iter().map(|&v| -v).collect()).collect();
        let mut next = inv.clone();
        for it in 1..=iters {
            let mut change = T::zero();
            for idx in 0..n {
                let x = grid.node(idx);
                let p = [
                    x[0] + inv[0][idx],
                    if dim == 2 { x[1] + inv[1][idx] } else { T::zero() },
                ];
                let d = self.disp.sample_at(p);
                for a in 0..dim {
                    let v = -d[a];
                    change = change.max(Float::abs(v - inv[a][idx]) / h[a]);
                    next[a][idx] = v;
                }
            }
            std::mem::swap(&mut inv, &mut next);
            if !change.is_finite() {
                break;
            }
            if change < tol {
                let map = Self {
                    disp: VectorField::from_raw(grid, inv),
                };
                let residual = compose_residual(self, &map)?;
                return Ok(Inverse {
                    map,
                    residual,
                    iterations: it,
                });
            }
        }
        let map = Self {
            disp: VectorField::from_raw(grid, inv),
        };
        let residual = compose_residual(self, &map)?;
        Err(GeoError::NotConverged {
            iterations: iters,
            residual: residual.to_f64_lossy(),
        })
    }

    /// Central-difference determinant of `I + ∇d`.
    pub fn jacobian_det(&self) -> ScalarField<T> {
        jacobian_det_of(&self.disp)
    }

    pub fn min_jacobian_det(&self) -> T {
        self.jacobian_det().min()
    }

    /// True when the Jacobian determinant is positive at every node.
    pub fn is_diffeomorphic(&self) -> bool {
        self.min_jacobian_det() > T::zero()
    }
}

/// `‖φ∘ψ − Id‖∞` in grid cells.
pub fn compose_residual<T: Real>(phi: &DeformationMap<T>, psi: &DeformationMap<T>) -> Result<T> {
    Ok(phi.compose(psi)?.displacement().max_abs_cells())
}

pub(crate) fn jacobian_det_of<T: Real>(disp: &VectorField<T>) -> ScalarField<T> {
    let grid = disp.grid();
    let n = grid.len();
    let mut a = vec![T::zero(); n];
    central_diff(grid, disp.component(0), 0, &mut a);
    if grid.dim() == 1 {
        return ScalarField::from_raw(grid.clone(), a.into_iter().map(|v| T::one() + v).collect());
    }
    let mut b = vec![T::zero(); n];
    let mut c = vec![T::zero(); n];
    let mut d = vec![T::zero(); n];
    central_diff(grid, disp.component(0), 1, &mut b);
    central_diff(grid, disp.component(1), 0, &mut c);
    central_diff(grid, disp.component(1), 1, &mut d);
    let det = (0..n)
        .map(|i| (T::one() + a[i]) * (T::one() + d[i]) - b[i] * c[i])
        .collect();
    ScalarField::from_raw(grid.clone(), det)
}

/// A trajectory sampled at `t_k = k / steps`, `k = 0..=steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimePath<S> {
    samples: Vec<S>,
}

impl<S> TimePath<S> {
    pub fn new(samples: Vec<S>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(GeoError::InvalidInput(
                "a time path needs at least one step".into(),
            ));
        }
        Ok(Self { samples })
    }

    pub fn steps(&self) -> usize {
        self.samples.len() - 1
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.steps() as f64
    }

    pub fn samples(&self) -> &[S] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [S] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<S> {
        self.samples
    }

    pub fn first(&self) -> &S {
        &self.samples[0]
    }

    pub fn last(&self) -> &S {
        &self.samples[self.samples.len() - 1]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.samples.iter()
    }

    pub fn map<R>(&self, f: impl FnMut(&S) -> R) -> TimePath<R> {
        TimePath {
            samples: self.samples.iter().map(f).collect(),
        }
    }
}

impl<S> std::ops::Index<usize> for TimePath<S> {
    type Output = S;
    fn index(&self, k: usize) -> &S {
        &self.samples[k]
    }
}

/// Trapezoid weights on `steps + 1` uniform samples of `[0, 1]`.
pub fn trapezoid_weights<T: Real>(steps: usize) -> Vec<T> {
    let dt = T::one() / T::from_usize_lossy(steps);
    (0..=steps)
        .map(|k| {
            if k == 0 || k == steps {
                dt / T::lit(2.0)
            } else {
                dt
            }
        })
        .collect()
}

/// A time path of vector fields that are identically zero.
pub fn zero_velocity_path<T: Real>(grid: &Grid<T>, steps: usize) -> Result<TimePath<VectorField<T>>> {
    TimePath::new(vec![VectorField::zeros(grid); steps + 1])
}

/// Validates that every sample of a vector-field path lives on `grid`.
pub(crate) fn check_path_grid<T: Real>(grid: &Grid<T>, path: &TimePath<VectorField<T>>) -> Result<()> {
    for v in path.iter() {
        grid.check_same(v.grid())?;
    }
    Ok(())
}
