//! Direct discrete Fourier transforms for the short sequences used here
//! (36-point tuning profiles, 28–32 pixel image rows).

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

/// Complex sequence stored as separate real and imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn from_real(x: &[f64]) -> Self {
        Self {
            re: x.to_vec(),
            im: vec![0.0; x.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn norm_sqr(&self, k: usize) -> f64 {
        self.re[k] * self.re[k] + self.im[k] * self.im[k]
    }

    pub fn arg(&self, k: usize) -> f64 {
        libm::atan2(self.im[k], self.re[k])
    }
}

/// Unnormalized transform `X_k = Σ_n x_n e^{∓2πikn/N}`; `inverse` flips the
/// sign of the exponent (no 1/N factor).
pub fn dft(x: &Spectrum, inverse: bool) -> Spectrum {
    let n = x.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|t| {
            let a = 2.0 * PI * t as f64 / n as f64;
            (libm::cos(a), sign * libm::sin(a))
        })
        .unzip();
    let mut out = Spectrum {
        re: vec![0.0; n],
        im: vec![0.0; n],
    };
    for k in 0..n {
        let (mut re, mut im) = (0.0, 0.0);
        for t in 0..n {
            let w = (k * t) % n;
            re += x.re[t] * cos[w] - x.im[t] * sin[w];
            im += x.re[t] * sin[w] + x.im[t] * cos[w];
        }
        out.re[k] = re;
        out.im[k] = im;
    }
    out
}

/// Row-then-column transform of an `h × w` row-major field.
pub fn dft2(x: &Spectrum, h: usize, w: usize, inverse: bool) -> Spectrum {
    assert_eq!(x.len(), h * w, "dft2: length mismatch");
    let mut out = x.clone();
    for r in 0..h {
        let row = Spectrum {
            re: out.re[r * w..(r + 1) * w].to_vec(),
            im: out.im[r * w..(r + 1) * w].to_vec(),
        };
        let t = dft(&row, inverse);
        out.re[r * w..(r + 1) * w].copy_from_slice(&t.re);
        out.im[r * w..(r + 1) * w].copy_from_slice(&t.im);
    }
    for c in 0..w {
        let col = Spectrum {
            re: (0..h).map(|r| out.re[r * w + c]).collect(),
            im: (0..h).map(|r| out.im[r * w + c]).collect(),
        };
        let t = dft(&col, inverse);
        for r in 0..h {
            out.re[r * w + c] = t.re[r];
            out.im[r * w + c] = t.im[r];
        }
    }
    out
}

/// Signed frequency of bin `k` of an `n`-point transform, in cycles per
/// sample, folded to `[-1/2, 1/2]`.
pub fn frequency(k: usize, n: usize) -> f64 {
    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    k / n as f64
}
