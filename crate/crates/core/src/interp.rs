//! Continuous reconstruction of node arrays ("slice calculus").
//!
//! Periodic grids use trigonometric interpolation, which is exact for
//! band-limited data and spectrally accurate for analytic slices. Grids on
//! `(-1, 1)` use local degree-5 polynomials in Newton form.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::model::SurfaceModel;

/// Value and first two derivatives at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

#[derive(Debug, Clone)]
pub enum SliceInterp {
    Trig(TrigInterp),
    Poly(LocalPoly),
}

impl SliceInterp {
    pub fn new(model: &SurfaceModel, values: &[f64]) -> Self {
        if model.is_periodic() {
            SliceInterp::Trig(TrigInterp::new(values))
        } else {
            SliceInterp::Poly(LocalPoly::new(&model.grid.nodes, values))
        }
    }

    pub fn jet(&self, x: f64) -> Jet {
        match self {
            SliceInterp::Trig(t) => t.jet(x),
            SliceInterp::Poly(p) => p.jet(x),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        self.jet(x).value
    }
}

/// Trigonometric interpolant of samples at `x_j = j/N` on the unit circle.
#[derive(Debug, Clone)]
pub struct TrigInterp {
    mean: f64,
    /// `2 F_k / N` for `1 <= k < N/2` (k-th harmonic as a complex amplitude).
    harmonics: Vec<Complex64>,
    /// Real Nyquist amplitude (even `N` only).
    nyquist: f64,
    n: usize,
}

impl TrigInterp {
    pub fn new(values: &[f64]) -> Self {
        let n = values.len();
        let spectrum = fft(values);
        let scale = 1.0 / n as f64;
        let top = n.div_ceil(2);
        let harmonics = (1..top).map(|k| 2.0 * scale * spectrum[k]).collect();
        let nyquist = if n % 2 == 0 { scale * spectrum[n / 2].re } else { 0.0 };
        TrigInterp { mean: scale * spectrum[0].re, harmonics, nyquist, n }
    }

    pub fn jet(&self, x: f64) -> Jet {
        let theta = 2.0 * PI * x;
        let w = Complex64::new(theta.cos(), theta.sin());
        let mut wk = w;
        let (mut v, mut d1, mut d2) = (self.mean, 0.0, 0.0);
        for (idx, c) in self.harmonics.iter().enumerate() {
            let k = (idx + 1) as f64;
            let omega = 2.0 * PI * k;
            let z = c * wk;
            v += z.re;
            d1 -= omega * z.im;
            d2 -= omega * omega * z.re;
            wk *= w;
        }
        if self.n % 2 == 0 {
            let omega = PI * self.n as f64;
            let (s, c) = (omega * x).sin_cos();
            v += self.nyquist * c;
            d1 -= self.nyquist * omega * s;
            d2 -= self.nyquist * omega * omega * c;
        }
        Jet { value: v, d1, d2 }
    }

    /// Magnitude of the highest resolved harmonics relative to the largest one;
    /// a cheap resolution diagnostic.
    pub fn tail_ratio(&self) -> f64 {
        let peak = self.harmonics.iter().map(|c| c.norm()).fold(self.nyquist.abs(), f64::max);
        if peak == 0.0 {
            return 0.0;
        }
        let m = self.harmonics.len();
        let tail = self.harmonics[m.saturating_sub(4)..]
            .iter()
            .map(|c| c.norm())
            .fold(self.nyquist.abs(), f64::max);
        tail / peak
    }
}

fn fft(values: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Spectral first and second derivatives of periodic samples on `[0, 1)`.
pub fn spectral_derivatives(values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = values.len();
    let spectrum = fft(values);
    let mut s1 = vec![Complex64::new(0.0, 0.0); n];
    let mut s2 = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..n {
        let signed = if 2 * k < n { k as f64 } else { k as f64 - n as f64 };
        let omega = 2.0 * PI * signed;
        if 2 * k == n {
            // Nyquist: no first derivative at the nodes, second derivative of cos(πN x).
            s2[k] = -(PI * n as f64).powi(2) * spectrum[k];
            continue;
        }
        s1[k] = Complex64::new(0.0, omega) * spectrum[k];
        s2[k] = -omega * omega * spectrum[k];
    }
    let mut planner = FftPlanner::new();
    let inv = planner.plan_fft_inverse(n);
    inv.process(&mut s1);
    inv.process(&mut s2);
    let scale = 1.0 / n as f64;
    (s1.iter().map(|c| c.re * scale).collect(), s2.iter().map(|c| c.re * scale).collect())
}

/// Node derivatives of a slice with the model's high-order calculus.
pub fn node_derivatives(model: &SurfaceModel, values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    if model.is_periodic() {
        spectral_derivatives(values)
    } else {
        let p = LocalPoly::new(&model.grid.nodes, values);
        model
            .grid
            .nodes
            .iter()
            .map(|&x| {
                let j = p.jet(x);
                (j.d1, j.d2)
            })
            .unzip()
    }
}

/// High-order `ω_φ` density `ρ₀ + κ (a φ')'` of a slice.
pub fn smooth_density(model: &SurfaceModel, values: &[f64]) -> Vec<f64> {
    let (d1, d2) = node_derivatives(model, values);
    let kappa = model.kappa();
    model
        .grid
        .nodes
        .iter()
        .zip(d1.iter().zip(&d2))
        .map(|(&x, (p1, p2))| model.rho0() + kappa * (model.weight_deriv(x) * p1 + model.weight(x) * p2))
        .collect()
}

const STENCIL: usize = 6;

/// Piecewise local polynomial through the `STENCIL` nearest uniform nodes.
#[derive(Debug, Clone)]
pub struct LocalPoly {
    x0: f64,
    h: f64,
    values: Vec<f64>,
}

impl LocalPoly {
    pub fn new(nodes: &[f64], values: &[f64]) -> Self {
        assert!(nodes.len() >= STENCIL && nodes.len() == values.len());
        LocalPoly { x0: nodes[0], h: nodes[1] - nodes[0], values: values.to_vec() }
    }

    pub fn jet(&self, x: f64) -> Jet {
        let n = self.values.len();
        let u = (x - self.x0) / self.h;
        let start = (u.floor() as isize - (STENCIL as isize / 2 - 1)).clamp(0, (n - STENCIL) as isize) as usize;
        // Newton divided differences on integer abscissae start..start+STENCIL.
        let mut coef: Vec<f64> = self.values[start..start + STENCIL].to_vec();
        for level in 1..STENCIL {
            for i in (level..STENCIL).rev() {
                coef[i] = (coef[i] - coef[i - 1]) / level as f64;
            }
        }
        let local = u - start as f64;
        // Horner with derivatives for Π (local - j).
        let (mut p, mut dp, mut ddp) = (coef[STENCIL - 1], 0.0, 0.0);
        for i in (0..STENCIL - 1).rev() {
            let factor = local - i as f64;
            ddp = ddp * factor + 2.0 * dp;
            dp = dp * factor + p;
            p = p * factor + coef[i];
        }
        Jet { value: p, d1: dp / self.h, d2: ddp / (self.h * self.h) }
    }
}
