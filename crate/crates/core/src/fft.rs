use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Forward DFT of a real signal, unnormalized.
pub fn fft(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false);
    buf
}

/// Inverse DFT with the `1/L` normalization, so `ifft(fft(x)) == x`.
pub fn ifft(spectrum: &[Complex64]) -> Vec<Complex64> {
    let mut buf = spectrum.to_vec();
    fft_in_place(&mut buf, true);
    let inv = 1.0 / buf.len().max(1) as f64;
    buf.iter_mut().for_each(|v| *v *= inv);
    buf
}

pub(crate) fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    if buf.is_empty() {
        return;
    }
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let plan = if inverse {
            p.plan_fft_inverse(buf.len())
        } else {
            p.plan_fft_forward(buf.len())
        };
        plan.process(buf);
    });
}

pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = vec![0.0; 16];
        x[0] = 1.0;
        for v in fft(&x) {
            assert!((v.re - 1.0).abs() < 1e-15 && v.im.abs() < 1e-15);
        }
    }

    #[test]
    fn constant_concentrates_at_dc() {
        let c = 2.5;
        let s = fft(&[c; 8]);
        assert!((s[0].re - 8.0 * c).abs() < 1e-12);
        for v in &s[1..] {
            assert!(v.norm() < 1e-12);
        }
    }

    #[test]
    fn pow2() {
        assert_eq!(next_pow2(1), 1);
        assert_eq!(next_pow2(500), 512);
        assert_eq!(next_pow2(512), 512);
    }
}
