//! Source-to-signal maps `X = f(D)`.
//!
//! The source is a flat real vector of length `n`; the signal is a complex
//! `N_t K × T` matrix. Gradients flow back through [`Encoder::vjp`], which uses the
//! conjugate-Wirtinger convention: given `c = ∂L/∂conj(X)` for a real loss `L`,
//! it returns `∂L/∂D = 2·Re(Jᴴ c)`.

use std::io::{BufRead, Write};

use num_complex::Complex64;
use rand::Rng;

use crate::linalg::ComplexMatrix;
use crate::{Error, MimoDims, Result};

/// Below this many Jacobian entries Frobenius norms are computed exactly.
pub const DEFAULT_EXACT_THRESHOLD: usize = 4096;

pub trait Encoder: Send + Sync + std::fmt::Debug {
    /// Source dimension `n`.
    fn input_dim(&self) -> usize;

    /// `(rows, cols)` of the produced signal.
    fn output_shape(&self) -> (usize, usize);

    fn encode(&self, d: &[f64]) -> Result<ComplexMatrix>;

    /// `2·Re(Jᴴ c)` where `J` is the Jacobian of [`encode`](Self::encode) at `d`.
    fn vjp(&self, d: &[f64], cotangent: &ComplexMatrix) -> Result<Vec<f64>>;

    /// Some encoders admit closed-form baselines.
    fn as_linear(&self) -> Option<&LinearEncoder> {
        None
    }

    fn output_len(&self) -> usize {
        let (r, c) = self.output_shape();
        r * c
    }
}

fn check_input(enc: &dyn Encoder, d: &[f64]) -> Result<()> {
    if d.len() != enc.input_dim() {
        return Err(Error::Shape(format!(
            "source has length {}, encoder expects {}",
            d.len(),
            enc.input_dim()
        )));
    }
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "source contains non-finite entries".into(),
        ));
    }
    Ok(())
}

fn check_cotangent(enc: &dyn Encoder, c: &ComplexMatrix) -> Result<()> {
    if c.shape() != enc.output_shape() {
        return Err(Error::Shape(format!(
            "cotangent is {}x{}, encoder output is {:?}",
            c.rows(),
            c.cols(),
            enc.output_shape()
        )));
    }
    Ok(())
}

/// `X = reshape(A d)` with `A` complex `(rows·cols) × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEncoder {
    a: ComplexMatrix,
    out_rows: usize,
    out_cols: usize,
}

impl LinearEncoder {
    pub fn new(a: ComplexMatrix, out_rows: usize, out_cols: usize) -> Result<Self> {
        if a.rows() != out_rows * out_cols || a.cols() == 0 {
            return Err(Error::Shape(format!(
                "A is {}x{}, output {out_rows}x{out_cols} needs {} rows",
                a.rows(),
                a.cols(),
                out_rows * out_cols
            )));
        }
        Ok(Self {
            a,
            out_rows,
            out_cols,
        })
    }

    /// `A` with i.i.d. CN(0, P/n) entries, so a unit-variance source yields
    /// average symbol power `P`.
    pub fn random<R: Rng + ?Sized>(dims: &MimoDims, rng: &mut R) -> Self {
        let (rows, cols) = dims.signal_shape();
        let a = ComplexMatrix::random_cn(rows * cols, dims.n, dims.power / dims.n as f64, rng);
        Self {
            a,
            out_rows: rows,
            out_cols: cols,
        }
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.a
    }

    /// Same map, output reinterpreted with a new shape of equal size.
    pub fn reshaped(&self, out_rows: usize, out_cols: usize) -> Result<Self> {
        Self::new(self.a.clone(), out_rows, out_cols)
    }

    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "linear {} {} {}",
            self.out_rows,
            self.out_cols,
            self.a.cols()
        )?;
        write_entries(w, &self.a)
    }
}

impl Encoder for LinearEncoder {
    fn input_dim(&self) -> usize {
        self.a.cols()
    }

    fn output_shape(&self) -> (usize, usize) {
        (self.out_rows, self.out_cols)
    }

    fn encode(&self, d: &[f64]) -> Result<ComplexMatrix> {
        check_input(self, d)?;
        let n = d.len();
        let out = (0..self.a.rows())
            .map(|r| {
                let row = self.a.row(r);
                (0..n).map(|k| row[k] * d[k]).sum()
            })
            .collect();
        ComplexMatrix::from_vec(self.out_rows, self.out_cols, out)
    }

    fn vjp(&self, d: &[f64], cotangent: &ComplexMatrix) -> Result<Vec<f64>> {
        check_input(self, d)?;
        check_cotangent(self, cotangent)?;
        let mut g = vec![0.0; d.len()];
        for (r, c) in cotangent.as_slice().iter().enumerate() {
            for (gk, a) in g.iter_mut().zip(self.a.row(r)) {
                *gk += 2.0 * (a.re * c.re + a.im * c.im);
            }
        }
        Ok(g)
    }

    fn as_linear(&self) -> Option<&LinearEncoder> {
        Some(self)
    }
}

/// `X = tanh(g·Re(A d)) + i·tanh(g·Im(A d))`, reshaped.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturatingEncoder {
    a: ComplexMatrix,
    gain: f64,
    out_rows: usize,
    out_cols: usize,
}

impl SaturatingEncoder {
    pub fn new(a: ComplexMatrix, gain: f64, out_rows: usize, out_cols: usize) -> Result<Self> {
        LinearEncoder::new(a.clone(), out_rows, out_cols)?;
        if !gain.is_finite() || gain == 0.0 {
            return Err(Error::InvalidArgument(
                "gain must be finite and nonzero".into(),
            ));
        }
        Ok(Self {
            a,
            gain,
            out_rows,
            out_cols,
        })
    }

    pub fn random<R: Rng + ?Sized>(dims: &MimoDims, gain: f64, rng: &mut R) -> Result<Self> {
        let lin = LinearEncoder::random(dims, rng);
        Self::new(lin.a, gain, lin.out_rows, lin.out_cols)
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    fn pre_activation(&self, d: &[f64]) -> Vec<Complex64> {
        (0..self.a.rows())
            .map(|r| {
                let row = self.a.row(r);
                let z: Complex64 = row.iter().zip(d).map(|(a, x)| a * x).sum();
                z * self.gain
            })
            .collect()
    }

    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "saturating {} {} {} {:e}",
            self.out_rows,
            self.out_cols,
            self.a.cols(),
            self.gain
        )?;
        write_entries(w, &self.a)
    }
}

impl Encoder for SaturatingEncoder {
    fn input_dim(&self) -> usize {
        self.a.cols()
    }

    fn output_shape(&self) -> (usize, usize) {
        (self.out_rows, self.out_cols)
    }

    fn encode(&self, d: &[f64]) -> Result<ComplexMatrix> {
        check_input(self, d)?;
        let out = self
            .pre_activation(d)
            .into_iter()
            .map(|z| Complex64::new(z.re.tanh(), z.im.tanh()))
            .collect();
        ComplexMatrix::from_vec(self.out_rows, self.out_cols, out)
    }

    fn vjp(&self, d: &[f64], cotangent: &ComplexMatrix) -> Result<Vec<f64>> {
        check_input(self, d)?;
        check_cotangent(self, cotangent)?;
        let pre = self.pre_activation(d);
        let mut g = vec![0.0; d.len()];
        for (r, (c, z)) in cotangent.as_slice().iter().zip(&pre).enumerate() {
            let s_re = 1.0 - z.re.tanh().powi(2);
            let s_im = 1.0 - z.im.tanh().powi(2);
            let w_re = 2.0 * self.gain * s_re * c.re;
            let w_im = 2.0 * self.gain * s_im * c.im;
            for (gk, a) in g.iter_mut().zip(self.a.row(r)) {
                *gk += a.re * w_re + a.im * w_im;
            }
        }
        Ok(g)
    }
}

/// Wraps an encoder with per-instance global scaling to average power `P`:
/// `f(d) = √(P m) · g(d) / ‖g(d)‖_F`, `m` the number of output symbols.
#[derive(Debug)]
pub struct PowerNormalized<E> {
    inner: E,
    power: f64,
}

impl<E: Encoder> PowerNormalized<E> {
    pub fn new(inner: E, power: f64) -> Result<Self> {
        if !(power > 0.0 && power.is_finite()) {
            return Err(Error::InvalidArgument("power must be positive".into()));
        }
        Ok(Self { inner, power })
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    fn target_norm(&self) -> f64 {
        (self.power * self.inner.output_len() as f64).sqrt()
    }
}

impl<E: Encoder> Encoder for PowerNormalized<E> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_shape(&self) -> (usize, usize) {
        self.inner.output_shape()
    }

    fn encode(&self, d: &[f64]) -> Result<ComplexMatrix> {
        let g = self.inner.encode(d)?;
        let norm = g.frobenius_norm();
        if norm == 0.0 {
            return Err(Error::InvalidArgument(
                "cannot normalise a zero signal".into(),
            ));
        }
        Ok(g.scale(self.target_norm() / norm))
    }

    fn vjp(&self, d: &[f64], cotangent: &ComplexMatrix) -> Result<Vec<f64>> {
        check_cotangent(self, cotangent)?;
        let g = self.inner.encode(d)?;
        let norm2 = g.frobenius_norm_sqr();
        if norm2 == 0.0 {
            return Err(Error::InvalidArgument(
                "cannot normalise a zero signal".into(),
            ));
        }
        let norm = norm2.sqrt();
        // Project out the radial component: c' = (α/‖g‖)(c − Re⟨c, g⟩ g/‖g‖²).
        let radial = crate::linalg::inner(cotangent.as_slice(), g.as_slice()).re / norm2;
        let mut projected = cotangent.clone();
        projected.axpy(-radial, &g)?;
        self.inner
            .vjp(d, &projected.scale(self.target_norm() / norm))
    }
}

impl<E: Encoder + ?Sized> Encoder for Box<E> {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }

    fn output_shape(&self) -> (usize, usize) {
        (**self).output_shape()
    }

    fn encode(&self, d: &[f64]) -> Result<ComplexMatrix> {
        (**self).encode(d)
    }

    fn vjp(&self, d: &[f64], cotangent: &ComplexMatrix) -> Result<Vec<f64>> {
        (**self).vjp(d, cotangent)
    }

    fn as_linear(&self) -> Option<&LinearEncoder> {
        (**self).as_linear()
    }
}

/// Scales `x` so that `‖c X‖_F² / (N_t K T) = P`.
pub fn normalize_power(x: &ComplexMatrix, dims: &MimoDims) -> Result<ComplexMatrix> {
    if x.shape() != dims.signal_shape() {
        return Err(Error::Shape(format!(
            "signal is {}x{}, dims expect {:?}",
            x.rows(),
            x.cols(),
            dims.signal_shape()
        )));
    }
    let energy = x.frobenius_norm_sqr();
    if energy == 0.0 {
        return Err(Error::InvalidArgument(
            "cannot normalise a zero signal".into(),
        ));
    }
    let count = (dims.n_t * dims.k * dims.t) as f64;
    let c = (dims.power * count / energy).sqrt();
    if c == 1.0 {
        return Ok(x.clone());
    }
    Ok(x.scale(c))
}

/// How Frobenius norms of (weighted) encoder Jacobians are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    /// Rademacher probes for the Hutchinson estimate.
    pub probes: usize,
    /// Exact evaluation when the Jacobian has fewer entries than this.
    pub exact_threshold: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            probes: 8,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
        }
    }
}

/// `‖J‖_F²` of the encoder Jacobian at `d`.
pub fn jacobian_frobenius2<R: Rng + ?Sized>(
    enc: &dyn Encoder,
    d: &[f64],
    probes: usize,
    rng: &mut R,
) -> Result<f64> {
    let cfg = ProbeConfig {
        probes,
        exact_threshold: DEFAULT_EXACT_THRESHOLD,
    };
    weighted_jacobian_frobenius2(enc, d, enc.output_shape(), |c| Ok(c.clone()), &cfg, rng)
}

/// `‖W J‖_F²` for a linear map `W` given through its adjoint `Wᴴ`, whose input
/// has shape `out_shape`.
///
/// Row `r` of `W J` is recovered from `vjp(Wᴴ e_r)/2 = Re(row)` and
/// `vjp(Wᴴ i e_r)/2 = Im(row)`; the Hutchinson route uses `c = a + i b` with
/// independent ±1 vectors `a, b`, for which `E‖vjp(Wᴴ c)/2‖² = ‖W J‖_F²`.
pub fn weighted_jacobian_frobenius2<R, F>(
    enc: &dyn Encoder,
    d: &[f64],
    out_shape: (usize, usize),
    adjoint: F,
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<f64>
where
    R: Rng + ?Sized,
    F: Fn(&ComplexMatrix) -> Result<ComplexMatrix>,
{
    let (rows, cols) = out_shape;
    let m = rows * cols;
    let entries = m * enc.input_dim();
    let sq = |v: Vec<f64>| v.iter().map(|x| x * x).sum::<f64>() / 4.0;
    if entries < cfg.exact_threshold || cfg.probes == 0 {
        let mut total = 0.0;
        let mut unit = ComplexMatrix::zeros(rows, cols);
        for r in 0..m {
            for phase in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
                unit.as_mut_slice()[r] = phase;
                total += sq(enc.vjp(d, &adjoint(&unit)?)?);
            }
            unit.as_mut_slice()[r] = Complex64::new(0.0, 0.0);
        }
        return Ok(total);
    }
    let mut total = 0.0;
    for _ in 0..cfg.probes {
        let probe = ComplexMatrix::from_fn(rows, cols, |_, _| {
            let re = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let im = if rng.random::<bool>() { 1.0 } else { -1.0 };
            Complex64::new(re, im)
        });
        total += sq(enc.vjp(d, &adjoint(&probe)?)?);
    }
    Ok(total / cfg.probes as f64)
}

/// Forces the Hutchinson route regardless of size (test and diagnostics use).
pub fn hutchinson_frobenius2<R: Rng + ?Sized>(
    enc: &dyn Encoder,
    d: &[f64],
    probes: usize,
    rng: &mut R,
) -> Result<f64> {
    let cfg = ProbeConfig {
        probes: probes.max(1),
        exact_threshold: 0,
    };
    weighted_jacobian_frobenius2(enc, d, enc.output_shape(), |c| Ok(c.clone()), &cfg, rng)
}

fn write_entries<W: Write>(w: &mut W, a: &ComplexMatrix) -> Result<()> {
    for z in a.as_slice() {
        writeln!(w, "{:e} {:e}", z.re, z.im)?;
    }
    Ok(())
}

/// Reads an encoder written by `write_text`.
///
/// Format: optional `#` comment lines, then a header
/// `linear <rows> <cols> <n>` or `saturating <rows> <cols> <n> <gain>`,
/// followed by `rows·cols·n` lines `re im` holding `A` in row-major order.
pub fn read_encoder<R: BufRead>(reader: R) -> Result<Box<dyn Encoder>> {
    let mut lines = reader.lines().filter(|l| {
        l.as_ref().map_or(true, |s| {
            !s.trim().is_empty() && !s.trim_start().starts_with('#')
        })
    });
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("missing header".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let num = |i: usize| -> Result<usize> {
        fields
            .get(i)
            .ok_or_else(|| Error::Format(format!("header field {i} missing")))?
            .parse()
            .map_err(|_| Error::Format(format!("header field {i} is not a count")))
    };
    let (rows, cols, n) = (num(1)?, num(2)?, num(3)?);
    let mut data = Vec::with_capacity(rows * cols * n);
    for line in lines {
        let line = line?;
        let mut parts = line.split_whitespace().map(str::parse::<f64>);
        match (parts.next(), parts.next(), parts.next()) {
            (Some(Ok(re)), Some(Ok(im)), None) => data.push(Complex64::new(re, im)),
            _ => return Err(Error::Format(format!("bad entry line {line:?}"))),
        }
    }
    if data.len() != rows * cols * n {
        return Err(Error::Format(format!(
            "expected {} entries, found {}",
            rows * cols * n,
            data.len()
        )));
    }
    let a = ComplexMatrix::from_vec(rows * cols, n, data)?;
    match fields[0] {
        "linear" => Ok(Box::new(LinearEncoder::new(a, rows, cols)?)),
        "saturating" => {
            let gain: f64 = fields
                .get(4)
                .ok_or_else(|| Error::Format("saturating header needs a gain".into()))?
                .parse()
                .map_err(|_| Error::Format("gain is not a number".into()))?;
            Ok(Box::new(SaturatingEncoder::new(a, gain, rows, cols)?))
        }
        other => Err(Error::Format(format!("unknown encoder kind {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(n: usize) -> MimoDims {
        MimoDims {
            n_r: 2,
            n_t: 2,
            k: 2,
            t: 3,
            n_u: 1,
            n,
            power: 1.0,
            sigma_n2: 0.1,
        }
    }

    fn scalar_linear(a: f64) -> LinearEncoder {
        LinearEncoder::new(ComplexMatrix::from_real(1, 1, &[a]).unwrap(), 1, 1).unwrap()
    }

    /// Real loss L(X) = Σ Re(conj(w) X) + ½ ‖X‖² with w fixed; ∂L/∂conj(X) = w/2 + X/2.
    fn loss(w: &ComplexMatrix, x: &ComplexMatrix) -> f64 {
        crate::linalg::inner(w.as_slice(), x.as_slice()).re + 0.5 * x.frobenius_norm_sqr()
    }

    fn loss_cotangent(w: &ComplexMatrix, x: &ComplexMatrix) -> ComplexMatrix {
        let mut c = w.scale(0.5);
        c.axpy(0.5, x).unwrap();
        c
    }

    fn check_vjp_fd(enc: &dyn Encoder, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = enc.input_dim();
        let (r, c) = enc.output_shape();
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = ComplexMatrix::random_cn(r, c, 1.0, &mut rng);
        let x = enc.encode(&d).unwrap();
        let grad = enc.vjp(&d, &loss_cotangent(&w, &x)).unwrap();
        let h = 1e-6;
        for k in 0..n {
            let mut dp = d.clone();
            let mut dm = d.clone();
            dp[k] += h;
            dm[k] -= h;
            let fd = (loss(&w, &enc.encode(&dp).unwrap()) - loss(&w, &enc.encode(&dm).unwrap()))
                / (2.0 * h);
            assert!(
                (grad[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "coordinate {k}: vjp {} vs fd {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn linear_identity_reshapes_row_major() {
        let enc = LinearEncoder::new(ComplexMatrix::identity(6), 2, 3).unwrap();
        let d = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = enc.encode(&d).unwrap();
        assert_eq!(x, ComplexMatrix::from_real(2, 3, &d).unwrap());
    }

    #[test]
    fn scalar_examples() {
        assert_eq!(
            scalar_linear(3.0).encode(&[2.0]).unwrap(),
            ComplexMatrix::from_real(1, 1, &[6.0]).unwrap()
        );
        // L = |x|², c = x = 3, dL/dd = 2 a² d = 18.
        let g = scalar_linear(3.0)
            .vjp(&[1.0], &ComplexMatrix::from_real(1, 1, &[3.0]).unwrap())
            .unwrap();
        assert!((g[0] - 18.0).abs() < 1e-12);
    }

    #[test]
    fn saturating_is_odd_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = SaturatingEncoder::random(&dims(5), 2.0, &mut rng).unwrap();
        assert_eq!(enc.encode(&[0.0; 5]).unwrap().frobenius_norm(), 0.0);
        let big = enc.encode(&[50.0; 5]).unwrap();
        assert!(big.as_slice().iter().all(|z| z.norm() <= 2f64.sqrt()));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = SaturatingEncoder::random(&dims(4), 1.5, &mut rng).unwrap();
        let g = enc
            .vjp(&[0.3, -0.2, 0.1, 0.9], &ComplexMatrix::zeros(4, 3))
            .unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_errors() {
        let enc = scalar_linear(1.0);
        assert!(matches!(enc.encode(&[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(matches!(
            enc.vjp(&[1.0], &ComplexMatrix::zeros(2, 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let lin = LinearEncoder::random(&dims(5), &mut rng);
            check_vjp_fd(&lin, seed);
            let sat = SaturatingEncoder::random(&dims(5), 1.3, &mut rng).unwrap();
            check_vjp_fd(&sat, seed);
            let norm = PowerNormalized::new(
                SaturatingEncoder::random(&dims(5), 0.7, &mut rng).unwrap(),
                2.0,
            )
            .unwrap();
            check_vjp_fd(&norm, seed);
        }
    }

    #[test]
    fn normalize_power_examples() {
        let d1 = MimoDims {
            n_t: 1,
            k: 1,
            t: 1,
            ..dims(1)
        };
        let x = ComplexMatrix::from_real(1, 1, &[2.0]).unwrap();
        assert_eq!(
            normalize_power(&x, &d1).unwrap(),
            ComplexMatrix::from_real(1, 1, &[1.0]).unwrap()
        );
        let unit = ComplexMatrix::from_real(1, 1, &[1.0]).unwrap();
        assert_eq!(normalize_power(&unit, &d1).unwrap(), unit);
        assert!(normalize_power(&ComplexMatrix::zeros(1, 1), &d1).is_err());
    }

    #[test]
    fn power_normalized_encoder_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = dims(4);
        let enc = PowerNormalized::new(LinearEncoder::random(&d, &mut rng), 2.5).unwrap();
        let x = enc.encode(&[0.1, 0.2, -0.7, 1.1]).unwrap();
        let p = x.frobenius_norm_sqr() / 12.0;
        assert!((p / 2.5 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frobenius_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eye = LinearEncoder::new(ComplexMatrix::identity(5), 5, 1).unwrap();
        assert!((jacobian_frobenius2(&eye, &[0.0; 5], 4, &mut rng).unwrap() - 5.0).abs() < 1e-12);
        assert!(
            (jacobian_frobenius2(&scalar_linear(3.0), &[0.4], 4, &mut rng).unwrap() - 9.0).abs()
                < 1e-12
        );

        let a = ComplexMatrix::from_fn(6, 3, |r, c| {
            Complex64::new((r as f64 - c as f64) * 0.3, 0.0)
        });
        let sat = SaturatingEncoder::new(a.clone(), 1.7, 3, 2).unwrap();
        let expect = 1.7f64.powi(2) * a.frobenius_norm_sqr();
        let got = jacobian_frobenius2(&sat, &[0.0; 3], 4, &mut rng).unwrap();
        assert!((got - expect).abs() < 1e-10 * expect);
    }

    #[test]
    fn hutchinson_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc = SaturatingEncoder::random(&dims(3), 1.2, &mut rng).unwrap();
        let d = [0.4, -0.3, 0.8];
        let exact = jacobian_frobenius2(&enc, &d, 1, &mut rng).unwrap();
        let sets = 10_000;
        let mean: f64 = (0..sets)
            .map(|_| hutchinson_frobenius2(&enc, &d, 1, &mut rng).unwrap())
            .sum::<f64>()
            / sets as f64;
        assert!(
            (mean / exact - 1.0).abs() < 0.02,
            "mean {mean} exact {exact}"
        );
    }

    #[test]
    fn text_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lin = LinearEncoder::random(&dims(3), &mut rng);
        let mut buf = Vec::new();
        lin.write_text(&mut buf).unwrap();
        let back = read_encoder(&buf[..]).unwrap();
        let d = [0.2, -1.0, 0.5];
        assert_eq!(back.encode(&d).unwrap(), lin.encode(&d).unwrap());
        assert!(back.as_linear().is_some());

        let sat = SaturatingEncoder::random(&dims(3), 0.8, &mut rng).unwrap();
        let mut buf = b"# saturating test encoder\n".to_vec();
        sat.write_text(&mut buf).unwrap();
        let back = read_encoder(&buf[..]).unwrap();
        assert_eq!(back.encode(&d).unwrap(), sat.encode(&d).unwrap());

        assert!(read_encoder(&b"linear 1 1 1\n1 0\n2 0\n"[..]).is_err());
        assert!(read_encoder(&b"cubic 1 1 1\n1 0\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn linear_encoder_is_linear(seed in 0u64..500, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = LinearEncoder::random(&dims(4), &mut rng);
            let d1: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d2: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let combo: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| alpha * a + beta * b).collect();
            let mut expect = enc.encode(&d1).unwrap().scale(alpha);
            expect.axpy(beta, &enc.encode(&d2).unwrap()).unwrap();
            prop_assert!(enc.encode(&combo).unwrap().sub(&expect).unwrap().frobenius_norm() < 1e-12);
        }

        #[test]
        fn normalize_power_is_idempotent(seed in 0u64..500, power in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = MimoDims { power, ..dims(2) };
            let x = ComplexMatrix::random_cn(4, 3, rng.random_range(0.01..100.0), &mut rng);
            let once = normalize_power(&x, &d).unwrap();
            let p = once.frobenius_norm_sqr() / 12.0;
            prop_assert!((p / power - 1.0).abs() < 1e-12);
            let twice = normalize_power(&once, &d).unwrap();
            prop_assert!(twice.sub(&once).unwrap().frobenius_norm() <= 1e-12 * once.frobenius_norm());
        }
    }
}
