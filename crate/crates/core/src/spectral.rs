//! 2D discrete Fourier analysis: transforms, amplitude/phase decomposition,
//! amplitude swapping, and the phase-consistency loss.
//!
//! Convention: unnormalized forward transform
//! `X(u,v) = Σ x(h,w)·exp(−2πi(uh/H + vw/W))`, and a `1/(HW)` inverse.
//! Power-of-two extents use an iterative radix-2 Cooley–Tukey transform;
//! other extents fall back to direct summation along that axis.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::image::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("empty input")]
    Empty,
    #[error("expected a {expected}-D tensor, got shape {found:?}")]
    Rank { expected: usize, found: Vec<usize> },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("spectrum is not Hermitian (max violation {0:e}); it has no real inverse")]
    NotHermitian(f64),
    #[error("eps must be positive, got {0}")]
    BadEps(f64),
}

/// Per-frequency complex coefficients of an `H×W` plane, row-major in `(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(height: usize, width: usize, coeffs: Vec<Complex64>) -> Result<Self, SpectralError> {
        if height == 0 || width == 0 {
            return Err(SpectralError::Empty);
        }
        if coeffs.len() != height * width {
            return Err(SpectralError::ShapeMismatch(vec![height, width], vec![coeffs.len()]));
        }
        Ok(Self { height, width, coeffs })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        self.coeffs[u * self.width + v]
    }

    /// `[H, W, 2]` real/imaginary layout.
    pub fn to_tensor(&self) -> Tensor<f64> {
        let data = self.coeffs.iter().flat_map(|c| [c.re, c.im]).collect();
        Tensor::new(vec![self.height, self.width, 2], data).expect("sized")
    }

    /// Largest `|X(u,v) − conj(X(−u,−v))|` over all bins.
    pub fn hermitian_violation(&self) -> f64 {
        let (h, w) = (self.height, self.width);
        let mut worst: f64 = 0.0;
        for u in 0..h {
            for v in 0..w {
                let mirror = self.get((h - u) % h, (w - v) % w).conj();
                worst = worst.max((self.get(u, v) - mirror).norm());
            }
        }
        worst
    }
}

fn fft_radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| {
                let (s, c) = (sign * 2.0 * PI * k as f64 / len as f64).sin_cos();
                Complex64::new(c, s)
            })
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn dft_direct(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let input = buf.to_vec();
    for (k, out) in buf.iter_mut().enumerate() {
        *out = input
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let (s, c) = (sign * 2.0 * PI * ((k * j) % n) as f64 / n as f64).sin_cos();
                x * Complex64::new(c, s)
            })
            .sum();
    }
}

fn transform_1d(buf: &mut [Complex64], inverse: bool) {
    if buf.len().is_power_of_two() {
        fft_radix2(buf, inverse);
    } else {
        dft_direct(buf, inverse);
    }
}

/// Unnormalized 2D transform in place (`inverse` flips the exponent sign only).
fn transform_2d(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    for row in data.chunks_mut(w) {
        transform_1d(row, inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for v in 0..w {
        for u in 0..h {
            col[u] = data[u * w + v];
        }
        transform_1d(&mut col, inverse);
        for u in 0..h {
            data[u * w + v] = col[u];
        }
    }
}

fn plane_dims(t: &Tensor<f64>) -> Result<(usize, usize, usize), SpectralError> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(SpectralError::Rank { expected: 2, found: s.to_vec() });
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((t.numel() / (h * w), h, w))
}

fn plane_spectrum(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_2d(&mut buf, h, w, false);
    buf
}

/// Forward transform of one `[H, W]` channel.
pub fn dft2(channel: &Tensor<f64>) -> Result<Spectrum, SpectralError> {
    match *channel.shape() {
        [h, w] => Spectrum::new(h, w, plane_spectrum(channel.data(), h, w)),
        ref s => Err(SpectralError::Rank { expected: 2, found: s.to_vec() }),
    }
}

/// `1/(HW)`-normalized inverse without the Hermitian check.
pub fn idft2_complex(spec: &Spectrum) -> Vec<Complex64> {
    let mut buf = spec.coeffs.clone();
    transform_2d(&mut buf, spec.height, spec.width, true);
    let scale = 1.0 / (spec.height * spec.width) as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    buf
}

/// Inverse transform to a real `[H, W]` plane. Rejects spectra whose inverse
/// would carry an imaginary residue above 1e-9 (relative to the largest coefficient).
pub fn idft2(spec: &Spectrum) -> Result<Tensor<f64>, SpectralError> {
    let scale = spec.coeffs.iter().map(|c| c.norm()).fold(1.0, f64::max);
    let violation = spec.hermitian_violation();
    if violation > 1e-9 * scale {
        return Err(SpectralError::NotHermitian(violation));
    }
    let out = idft2_complex(spec);
    Ok(Tensor::new(vec![spec.height, spec.width], out.iter().map(|c| c.re).collect()).expect("sized"))
}

/// Amplitude `|X|` and phase `atan2(Im, Re)` per bin; zero coefficients get phase 0.
pub fn split_amp_phase(spec: &Spectrum) -> (Tensor<f64>, Tensor<f64>) {
    let shape = vec![spec.height, spec.width];
    let amp = spec.coeffs.iter().map(|c| c.norm()).collect();
    let phase = spec
        .coeffs
        .iter()
        .map(|c| if c.re == 0.0 && c.im == 0.0 { 0.0 } else { wrap_phase(c.im.atan2(c.re)) })
        .collect();
    (Tensor::new(shape.clone(), amp).expect("sized"), Tensor::new(shape, phase).expect("sized"))
}

// atan2 returns −π for (negative, −0.0); fold it onto +π.
fn wrap_phase(p: f64) -> f64 {
    if p <= -PI {
        p + 2.0 * PI
    } else {
        p
    }
}

/// Inverse of [`split_amp_phase`]: `amplitude·(cos φ, sin φ)`.
pub fn combine_amp_phase(amplitude: &Tensor<f64>, phase: &Tensor<f64>) -> Result<Spectrum, SpectralError> {
    if amplitude.shape() != phase.shape() {
        return Err(SpectralError::ShapeMismatch(amplitude.shape().to_vec(), phase.shape().to_vec()));
    }
    let [h, w] = *amplitude.shape() else {
        return Err(SpectralError::Rank { expected: 2, found: amplitude.shape().to_vec() });
    };
    let coeffs = amplitude
        .data()
        .iter()
        .zip(phase.data())
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    Spectrum::new(h, w, coeffs)
}

/// Per channel: the style's amplitude paired with the content's phase, before clamping.
pub fn amplitude_swap_raw(content: &Tensor<f64>, style: &Tensor<f64>) -> Result<Tensor<f64>, SpectralError> {
    if content.shape() != style.shape() {
        return Err(SpectralError::ShapeMismatch(content.shape().to_vec(), style.shape().to_vec()));
    }
    let (planes, h, w) = plane_dims(content)?;
    let n = h * w;
    let mut out = Vec::with_capacity(content.numel());
    for p in 0..planes {
        let c = plane_spectrum(&content.data()[p * n..(p + 1) * n], h, w);
        let s = plane_spectrum(&style.data()[p * n..(p + 1) * n], h, w);
        let coeffs = c
            .iter()
            .zip(&s)
            .map(|(cc, sc)| {
                let phase = if cc.norm() == 0.0 { 0.0 } else { cc.arg() };
                Complex64::from_polar(sc.norm(), phase)
            })
            .collect();
        let spec = Spectrum::new(h, w, coeffs)?;
        // Both factors are Hermitian-symmetric, so the product is too; take the real part.
        out.extend(idft2_complex(&spec).iter().map(|c| c.re));
    }
    Ok(Tensor::new(content.shape().to_vec(), out).expect("sized"))
}

/// Image with `content`'s phase and `style`'s amplitude, clamped to `[0, 1]`.
pub fn amplitude_swap(content: &Image, style: &Image) -> Result<Image, SpectralError> {
    let raw = amplitude_swap_raw(&content.to_f64(), &style.to_f64())?;
    let data = raw.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(Image::new(content.channels(), content.height(), content.width(), data).expect("sized"))
}

/// Loss value and gradients with respect to both arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseLossOutput {
    pub loss: f64,
    pub grad_reference: Vec<f64>,
    pub grad_translated: Vec<f64>,
    /// Bins dropped because `|X|·|Y| < eps`.
    pub dropped_bins: usize,
}

/// Negative cosine between the Fourier coefficients of `reference` and `translated`,
/// summed over planes (all leading axes) and frequency bins; divided by the bin count
/// times the plane count when `normalize` is set.
pub fn phase_loss_tensor(
    reference: &Tensor<f64>,
    translated: &Tensor<f64>,
    normalize: bool,
    eps: f64,
) -> Result<PhaseLossOutput, SpectralError> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(SpectralError::BadEps(eps));
    }
    if reference.shape() != translated.shape() {
        return Err(SpectralError::ShapeMismatch(reference.shape().to_vec(), translated.shape().to_vec()));
    }
    let (planes, h, w) = plane_dims(reference)?;
    let n = h * w;
    let scale = if normalize { 1.0 / (n * planes) as f64 } else { 1.0 };
    let mut out = PhaseLossOutput {
        loss: 0.0,
        grad_reference: Vec::with_capacity(reference.numel()),
        grad_translated: Vec::with_capacity(reference.numel()),
        dropped_bins: 0,
    };
    let zero = Complex64::new(0.0, 0.0);
    for p in 0..planes {
        let a = plane_spectrum(&reference.data()[p * n..(p + 1) * n], h, w);
        let b = plane_spectrum(&translated.data()[p * n..(p + 1) * n], h, w);
        let mut ga = vec![zero; n];
        let mut gb = vec![zero; n];
        for j in 0..n {
            let (na, nb) = (a[j].norm(), b[j].norm());
            let denom = na * nb;
            if denom < eps {
                out.dropped_bins += 1;
                continue;
            }
            let cos = (a[j].re * b[j].re + a[j].im * b[j].im) / denom;
            out.loss -= cos * scale;
            // d cos / d b = a/(|a||b|) − cos·b/|b|², symmetrically for a
            gb[j] = -(a[j] / denom - b[j] * (cos / (nb * nb))) * scale;
            ga[j] = -(b[j] / denom - a[j] * (cos / (na * na))) * scale;
        }
        // Adjoint of the forward DFT: unnormalized inverse, real part.
        transform_2d(&mut ga, h, w, true);
        transform_2d(&mut gb, h, w, true);
        out.grad_reference.extend(ga.iter().map(|c| c.re));
        out.grad_translated.extend(gb.iter().map(|c| c.re));
    }
    Ok(out)
}

/// Phase-consistency loss and its gradient with respect to `translated`.
pub fn phase_consistency_loss(
    reference: &Tensor<f64>,
    translated: &Tensor<f64>,
    normalize: bool,
    eps: f64,
) -> Result<(f64, Tensor<f64>), SpectralError> {
    let out = phase_loss_tensor(reference, translated, normalize, eps)?;
    let grad = Tensor::new(translated.shape().to_vec(), out.grad_translated).expect("sized");
    Ok((out.loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[h, w], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.3)
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let mut x = Tensor::zeros(&[4, 8]);
        x.data_mut()[0] = 1.0;
        let s = dft2(&x).unwrap();
        for c in s.coeffs() {
            assert!((c - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
        let back = idft2(&s).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn constant_image_is_dc_only() {
        let s = dft2(&Tensor::full(&[4, 4], 0.25)).unwrap();
        assert!((s.get(0, 0) - Complex64::new(4.0, 0.0)).norm() < 1e-14);
        assert!(s.coeffs()[1..].iter().all(|c| c.norm() < 1e-14));
        let back = idft2(&s).unwrap();
        assert!(back.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn non_power_of_two_round_trip() {
        let x = ramp(6, 5);
        let back = idft2(&dft2(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn rejects_non_hermitian() {
        let mut s = dft2(&ramp(4, 4)).unwrap();
        s.coeffs_mut()[1] += Complex64::new(0.0, 1.0);
        assert!(matches!(idft2(&s), Err(SpectralError::NotHermitian(_))));
        assert!(matches!(dft2(&Tensor::zeros(&[4])), Err(SpectralError::Rank { .. })));
    }

    #[test]
    fn amplitude_and_phase_of_simple_coefficients() {
        let s = Spectrum::new(1, 3, vec![Complex64::new(0.0, 1.0), Complex64::new(-2.0, 0.0), Complex64::new(-2.0, -0.0)])
            .unwrap();
        let (amp, phase) = split_amp_phase(&s);
        assert_eq!(amp.data(), &[1.0, 2.0, 2.0]);
        assert!((phase.data()[0] - PI / 2.0).abs() < 1e-15);
        assert_eq!(phase.data()[1], PI);
        assert_eq!(phase.data()[2], PI);
        let zero = Spectrum::new(1, 1, vec![Complex64::new(0.0, 0.0)]).unwrap();
        assert_eq!(split_amp_phase(&zero).1.data(), &[0.0]);
    }

    #[test]
    fn phase_loss_identities() {
        let x = Tensor::from_fn(&[3, 8, 8], |i| ((i as f64 * 1.7).sin() * 43758.5).fract().abs() + 0.05);
        let (same, _) = phase_consistency_loss(&x, &x, true, 1e-12).unwrap();
        assert!((same + 1.0).abs() < 1e-12);
        let neg = x.map(|v| -v);
        let (opp, _) = phase_consistency_loss(&x, &neg, true, 1e-12).unwrap();
        assert!((opp - 1.0).abs() < 1e-12);
        assert!(phase_consistency_loss(&x, &x, true, 0.0).is_err());
    }
}
