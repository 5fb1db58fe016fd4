//! Spectral Sobolev operator `L = (Id − α²Δ)^k` and its inverse `K = L⁻¹`.
//!
//! Both are diagonal in the discrete Fourier basis of a periodic grid. The
//! Laplacian symbol is that of the periodic three-point stencil per axis,
//! `λ(m) = Σ_a (2 − 2cos(2π m_a / N_a)) / h_a²`, so `apply_l` coincides with
//! the finite-difference operator to round-off.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::fields::{Grid, ScalarField, VectorField};
use crate::{GeoError, Real, Result};

#[derive(Clone)]
pub struct SobolevKernel<T: Real> {
    grid: Grid<T>,
    alpha: T,
    power: u32,
    /// `(1 + α²λ)^k`, laid out column-major (axis 0 fastest) to match the
    /// transposed spectrum inside `apply_raw`.
    symbol: Vec<T>,
    fft0: Arc<dyn Fft<T>>,
    ifft0: Arc<dyn Fft<T>>,
    fft1: Option<(Arc<dyn Fft<T>>, Arc<dyn Fft<T>>)>,
}

impl<T: Real> fmt::Debug for SobolevKernel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SobolevKernel")
            .field("shape", &self.grid.shape())
            .field("alpha", &self.alpha)
            .field("power", &self.power)
            .finish()
    }
}

impl<T: Real> SobolevKernel<T> {
    pub fn new(grid: &Grid<T>, alpha: T, power: u32) -> Result<Self> {
        if !alpha.is_finite() || alpha < T::zero() {
            return Err(GeoError::InvalidInput(format!(
                "alpha must be finite and >= 0, got {alpha}"
            )));
        }
        if power < 1 {
            return Err(GeoError::InvalidInput("kernel power must be >= 1".into()));
        }
        let shape = grid.shape();
        let h = grid.spacing();
        let two = T::lit(2.0);
        let lap_1d = |m: usize, n: usize, h: T| -> T {
            let ang = T::TAU() * T::from_usize_lossy(m) / T::from_usize_lossy(n);
            (two - two * ang.cos()) / (h * h)
        };
        let n0 = shape[0];
        let n1 = if grid.dim() == 2 { shape[1] } else { 1 };
        let a2 = alpha * alpha;
        let mut symbol = Vec::with_capacity(grid.len());
        for m1 in 0..n1 {
            for m0 in 0..n0 {
                let mut lam = lap_1d(m0, n0, h[0]);
                if grid.dim() == 2 {
                    lam = lam + lap_1d(m1, n1, h[1]);
                }
                symbol.push((T::one() + a2 * lam).powi(power as i32));
            }
        }
        let mut planner = FftPlanner::new();
        let fft0 = planner.plan_fft_forward(n0);
        let ifft0 = planner.plan_fft_inverse(n0);
        let fft1 = (grid.dim() == 2).then(|| (planner.plan_fft_forward(n1), planner.plan_fft_inverse(n1)));
        Ok(Self {
            grid: grid.clone(),
            alpha,
            power,
            symbol,
            fft0,
            ifft0,
            fft1,
        })
    }

    /// Kernel with the default smoothing length of two grid cells and `k = 1`.
    pub fn with_default_alpha(grid: &Grid<T>) -> Result<Self> {
        let h = grid.spacing().iter().copied().fold(T::infinity(), T::min);
        Self::new(grid, T::lit(2.0) * h, 1)
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn power(&self) -> u32 {
        self.power
    }

    /// Multiplies one node array by the symbol (`inverse = false`) or divides by it.
    pub(crate) fn apply_raw(&self, values: &mut [T], inverse: bool) {
        if self.alpha == T::zero() {
            return;
        }
        let n0 = self.grid.shape()[0];
        let n1 = self.grid.n1();
        let mut buf: Vec<Complex<T>> = values.iter().map(|&v| Complex::new(v, T::zero())).collect();
        let mut tr = vec![Complex::new(T::zero(), T::zero()); buf.len()];
        // rows (axis 1) then columns (axis 0) in the transposed buffer
        if let Some((f1, _)) = &self.fft1 {
            f1.process(&mut buf);
        }
        transpose(&buf, &mut tr, n0, n1);
        self.fft0.process(&mut tr);
        for (c, &s) in tr.iter_mut().zip(&self.symbol) {
            *c = if inverse { *c / s } else { *c * s };
        }
        self.ifft0.process(&mut tr);
        transpose(&tr, &mut buf, n1, n0);
        if let Some((_, i1)) = &self.fft1 {
            i1.process(&mut buf);
        }
        let scale = T::one() / T::from_usize_lossy(values.len());
        for (v, c) in values.iter_mut().zip(&buf) {
            *v = c.re * scale;
        }
    }

    fn check(&self, grid: &Grid<T>) -> Result<()> {
        self.grid.check_same(grid)
    }

    pub fn apply_l_scalar(&self, f: &ScalarField<T>) -> Result<ScalarField<T>> {
        self.check(f.grid())?;
        let mut out = f.clone();
        self.apply_raw(out.values_mut(), false);
        Ok(out)
    }

    pub fn apply_k_scalar(&self, f: &ScalarField<T>) -> Result<ScalarField<T>> {
        self.check(f.grid())?;
        let mut out = f.clone();
        self.apply_raw(out.values_mut(), true);
        Ok(out)
    }

    /// Componentwise `L u`.
    pub fn apply_l(&self, u: &VectorField<T>) -> Result<VectorField<T>> {
        self.check(u.grid())?;
        let mut out = u.clone();
        for a in 0..u.grid().dim() {
            self.apply_raw(out.component_mut(a), false);
        }
        Ok(out)
    }

    /// Componentwise `K m`.
    pub fn apply_k(&self, m: &VectorField<T>) -> Result<VectorField<T>> {
        self.check(m.grid())?;
        let mut out = m.clone();
        for a in 0..m.grid().dim() {
            self.apply_raw(out.component_mut(a), true);
        }
        Ok(out)
    }

    /// `⟨Lu, v⟩` with the grid inner product.
    pub fn metric_inner(&self, u: &VectorField<T>, v: &VectorField<T>) -> Result<T> {
        self.check(v.grid())?;
        self.apply_l(u)?.inner(v)
    }

    /// `⟨Lu, u⟩`, the squared Riemannian norm of a velocity.
    pub fn metric_norm_sq(&self, u: &VectorField<T>) -> Result<T> {
        let v = self.metric_inner(u, u)?;
        // round-off can only push an exactly-zero field below zero
        Ok(v.max(T::zero()))
    }
}

fn transpose<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn dense_l_1d(n: usize, h: f64, alpha: f64) -> DMatrix<f64> {
        let mut m = DMatrix::<f64>::identity(n, n);
        let c = alpha * alpha / (h * h);
        for i in 0..n {
            m[(i, i)] += 2.0 * c;
            m[(i, (i + 1) % n)] -= c;
            m[(i, (i + n - 1) % n)] -= c;
        }
        m
    }

    fn random_field(g: &Grid<f64>, seed: u64) -> ScalarField<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ScalarField::new(g.clone(), (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_alpha_is_identity() {
        let g = Grid::<f64>::unit_square(8).unwrap();
        let k = SobolevKernel::new(&g, 0.0, 1).unwrap();
        let f = random_field(&g, 1);
        assert_eq!(k.apply_l_scalar(&f).unwrap(), f);
        assert_eq!(k.apply_k_scalar(&f).unwrap(), f);
    }

    #[test]
    fn constants_are_fixed() {
        let g = Grid::<f64>::unit_square(16).unwrap();
        let k = SobolevKernel::with_default_alpha(&g).unwrap();
        let c = ScalarField::constant(&g, 2.5);
        let out = k.apply_l_scalar(&c).unwrap();
        assert!(out.values().iter().all(|v| (v - 2.5).abs() < 1e-13));
    }

    #[test]
    fn matches_dense_operator_1d() {
        let n = 16;
        let h = 0.1;
        let alpha = 0.25;
        let g = Grid::<f64>::new_1d(n, h).unwrap();
        let k = SobolevKernel::new(&g, alpha, 1).unwrap();
        let f = random_field(&g, 7);
        let dense = dense_l_1d(n, h, alpha);
        let expect = &dense * DVector::from_column_slice(f.values());
        let got = k.apply_l_scalar(&f).unwrap();
        for i in 0..n {
            assert!((got.values()[i] - expect[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_dense_operator_2d() {
        let (n0, n1) = (6, 5);
        let (h0, h1) = (0.2, 0.3);
        let alpha = 0.3;
        let g = Grid::<f64>::new_2d(n0, n1, h0, h1).unwrap();
        let k = SobolevKernel::new(&g, alpha, 2).unwrap();
        let mut lap = DMatrix::<f64>::zeros(g.len(), g.len());
        for i in 0..g.len() {
            for (axis, h) in [(0, h0), (1, h1)] {
                lap[(i, i)] -= 2.0 / (h * h);
                lap[(i, g.shift(i, axis, 1))] += 1.0 / (h * h);
                lap[(i, g.shift(i, axis, -1))] += 1.0 / (h * h);
            }
        }
        let l1 = DMatrix::<f64>::identity(g.len(), g.len()) - lap * (alpha * alpha);
        let l2 = &l1 * &l1;
        let f = random_field(&g, 3);
        let expect = &l2 * DVector::from_column_slice(f.values());
        let got = k.apply_l_scalar(&f).unwrap();
        for i in 0..g.len() {
            assert!((got.values()[i] - expect[i]).abs() < 1e-9 * expect.amax());
        }
    }

    #[test]
    fn single_mode_matches_dense_solve() {
        let n = 16;
        let h = 1.0 / 16.0;
        let alpha = 2.0 * h;
        let g = Grid::<f64>::new_1d(n, h).unwrap();
        let k = SobolevKernel::new(&g, alpha, 1).unwrap();
        let m = 3.0;
        let f = ScalarField::from_fn(&g, |[x, _]| (std::f64::consts::TAU * m * x).cos());
        let dense = dense_l_1d(n, h, alpha);
        let solved = dense.lu().solve(&DVector::from_column_slice(f.values())).unwrap();
        let lam = (2.0 - 2.0 * (std::f64::consts::TAU * m / n as f64).cos()) / (h * h);
        let got = k.apply_k_scalar(&f).unwrap();
        for i in 0..n {
            assert!((got.values()[i] - solved[i]).abs() < 1e-12);
            assert!((got.values()[i] - f.values()[i] / (1.0 + alpha * alpha * lam)).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_norm_cases() {
        let g = Grid::<f64>::unit_square(8).unwrap();
        let k = SobolevKernel::with_default_alpha(&g).unwrap();
        assert_eq!(k.metric_norm_sq(&VectorField::zeros(&g)).unwrap(), 0.0);
        let plain = SobolevKernel::new(&g, 0.0, 1).unwrap();
        let c = VectorField::constant(&g, &[0.6, -0.8]).unwrap();
        assert!((plain.metric_norm_sq(&c).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn metric_norm_matches_dense_quadratic_form() {
        let n = 16;
        let h = 0.05;
        let alpha = 0.1;
        let g = Grid::<f64>::new_1d(n, h).unwrap();
        let k = SobolevKernel::new(&g, alpha, 1).unwrap();
        let f = random_field(&g, 11);
        let u = VectorField::new(g.clone(), vec![f.values().to_vec()]).unwrap();
        let x = DVector::from_column_slice(f.values());
        let expect = (x.transpose() * dense_l_1d(n, h, alpha) * &x)[(0, 0)] * h;
        assert!((k.metric_norm_sq(&u).unwrap() - expect).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_parameters_and_grids() {
        let g = Grid::<f64>::unit_square(8).unwrap();
        assert!(SobolevKernel::new(&g, -1.0, 1).is_err());
        assert!(SobolevKernel::new(&g, f64::NAN, 1).is_err());
        assert!(SobolevKernel::new(&g, 0.1, 0).is_err());
        let k = SobolevKernel::new(&g, 0.1, 1).unwrap();
        let other = ScalarField::zeros(&Grid::unit_square(16).unwrap());
        assert!(matches!(k.apply_l_scalar(&other), Err(GeoError::GridMismatch(_))));
    }

    proptest! {
        #[test]
        fn k_inverts_l_and_contracts(seed in 0u64..500, alpha in 0.0f64..0.5, power in 1u32..3) {
            let g = Grid::<f64>::new_2d(8, 12, 1.0 / 8.0, 1.0 / 12.0).unwrap();
            let k = SobolevKernel::new(&g, alpha, power).unwrap();
            let f = random_field(&g, seed);
            let back = k.apply_k_scalar(&k.apply_l_scalar(&f).unwrap()).unwrap();
            prop_assert!(back.sub(&f).unwrap().max_abs() < 1e-10);
            let fwd = k.apply_l_scalar(&k.apply_k_scalar(&f).unwrap()).unwrap();
            prop_assert!(fwd.sub(&f).unwrap().max_abs() < 1e-10);
            let kf = k.apply_k_scalar(&f).unwrap();
            prop_assert!(kf.norm_sq() <= f.norm_sq() * (1.0 + 1e-12));
        }

        #[test]
        fn metric_is_symmetric_and_positive(seed in 0u64..500) {
            let g = Grid::<f64>::unit_square(8).unwrap();
            let k = SobolevKernel::with_default_alpha(&g).unwrap();
            let a = random_field(&g, seed);
            let b = random_field(&g, seed + 1000);
            let c = random_field(&g, seed + 2000);
            let u = VectorField::new(g.clone(), vec![a.values().to_vec(), b.values().to_vec()]).unwrap();
            let v = VectorField::new(g.clone(), vec![c.values().to_vec(), a.values().to_vec()]).unwrap();
            let uv = k.metric_inner(&u, &v).unwrap();
            let vu = k.metric_inner(&v, &u).unwrap();
            prop_assert!((uv - vu).abs() < 1e-12 * uv.abs().max(1.0));
            prop_assert!(k.metric_norm_sq(&u).unwrap() > 0.0);
        }
    }
}
