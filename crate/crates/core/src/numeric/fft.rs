//! Iterative radix-2 FFT and the real-signal helpers used by the long
//! convolution.
//!
//! Two real signals are transformed with one complex FFT by packing them as
//! `a + i·b`; the inverse direction packs two Hermitian spectra the same way.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct FftPlan {
    n: usize,
    twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Config(format!("FFT length {n} is not a power of two")));
        }
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Ok(Self {
            n,
            twiddles,
            bitrev,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalized forward transform, in place.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, false);
    }

    /// Inverse transform including the `1/n` factor, in place.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, true);
        let s = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        assert_eq!(buf.len(), n, "buffer length must match plan");
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for j in 0..half {
                    let mut w = self.twiddles[j * stride];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[start + j];
                    let b = buf[start + j + half] * w;
                    buf[start + j] = a + b;
                    buf[start + j + half] = a - b;
                }
            }
            len <<= 1;
        }
    }

    /// Spectra of two real signals from a single complex transform.
    /// `b = None` treats the second signal as zero.
    pub fn forward_real_pair(
        &self,
        a: &[f64],
        b: Option<&[f64]>,
        out_a: &mut [Complex64],
        out_b: &mut [Complex64],
    ) {
        let n = self.n;
        let mut z: Vec<Complex64> = match b {
            Some(b) => a.iter().zip(b).map(|(&x, &y)| Complex64::new(x, y)).collect(),
            None => a.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
        };
        self.forward(&mut z);
        for k in 0..n {
            let zk = z[k];
            let zc = z[(n - k) % n].conj();
            out_a[k] = (zk + zc) * 0.5;
            // (zk - zc) / 2i
            let d = zk - zc;
            out_b[k] = Complex64::new(d.im * 0.5, -d.re * 0.5);
        }
    }

    /// Real signals of two Hermitian spectra from a single inverse transform.
    pub fn inverse_real_pair(
        &self,
        spec_a: &[Complex64],
        spec_b: Option<&[Complex64]>,
        out_a: &mut [f64],
        out_b: Option<&mut [f64]>,
    ) {
        let i = Complex64::new(0.0, 1.0);
        let mut w: Vec<Complex64> = match spec_b {
            Some(sb) => spec_a.iter().zip(sb).map(|(&x, &y)| x + i * y).collect(),
            None => spec_a.to_vec(),
        };
        self.inverse(&mut w);
        for (o, v) in out_a.iter_mut().zip(&w) {
            *o = v.re;
        }
        if let Some(ob) = out_b {
            for (o, v) in ob.iter_mut().zip(&w) {
                *o = v.im;
            }
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<FftPlan>>> = RefCell::new(HashMap::new());
}

/// Per-thread cached plan for length `n`.
pub fn plan(n: usize) -> Result<Rc<FftPlan>> {
    PLANS.with(|cache| {
        if let Some(p) = cache.borrow().get(&n) {
            return Ok(Rc::clone(p));
        }
        let p = Rc::new(FftPlan::new(n)?);
        cache.borrow_mut().insert(n, Rc::clone(&p));
        Ok(p)
    })
}

/// Circular convolution of two equal-length real signals through the
/// frequency domain: `y[i] = Σ_j u[j]·k[(i−j) mod L]`.
pub fn circular_convolve(u: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    if u.len() != k.len() {
        return Err(Error::dim(format!(
            "convolution operands of length {} and {}",
            u.len(),
            k.len()
        )));
    }
    let p = plan(u.len())?;
    let n = u.len();
    let mut su = vec![Complex64::default(); n];
    let mut sk = vec![Complex64::default(); n];
    p.forward_real_pair(u, Some(k), &mut su, &mut sk);
    for (a, b) in su.iter_mut().zip(&sk) {
        *a *= b;
    }
    let mut y = vec![0.0; n];
    p.inverse_real_pair(&su, None, &mut y, None);
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                (0..n)
                    .map(|j| x[j] * Complex64::from_polar(1.0, -2.0 * PI * (j * k) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft() {
        for n in [1, 2, 4, 8, 32] {
            let x: Vec<Complex64> = (0..n)
                .map(|i| Complex64::new((i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()))
                .collect();
            let mut y = x.clone();
            FftPlan::new(n).unwrap().forward(&mut y);
            for (a, b) in y.iter().zip(naive_dft(&x)) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn inverse_round_trips() {
        let p = FftPlan::new(16).unwrap();
        let x: Vec<Complex64> = (0..16).map(|i| Complex64::new(i as f64, -(i as f64))).collect();
        let mut y = x.clone();
        p.forward(&mut y);
        p.inverse(&mut y);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(FftPlan::new(12).is_err());
        assert!(FftPlan::new(0).is_err());
    }

    #[test]
    fn delta_kernels() {
        let u = [1.0, 2.0, 3.0, 4.0];
        let id = circular_convolve(&u, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let shift = circular_convolve(&u, &[0.0, 1.0, 0.0, 0.0]).unwrap();
        for (a, b) in id.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in shift.iter().zip([4.0, 1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
