//! Double-double arithmetic (about 106 significant bits).

use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn from(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Self {
        let (h, l) = two_sum(hi, lo);
        Dd { hi: h, lo: l }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::from(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::from(q2);
        let q3 = r.hi / b.hi;
        Dd::norm(q1, q2) + Dd::from(q3)
    }

    fn scale_pow2(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    /// `e^x` by reduction `x = k ln2 + r`, `r / 2^10` Taylor, then squaring.
    pub fn exp(self) -> Dd {
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = (self - ln2() * Dd::from(k)).scale_pow2(-10);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for i in 1..30 {
            term = (term * r).div(Dd::from(i as f64));
            sum = sum + term;
            if term.hi.abs() < 1e-40 {
                break;
            }
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale_pow2(k as i32)
    }

    /// Natural log by Newton iteration on `exp`.
    pub fn ln(self) -> Dd {
        let mut y = Dd::from(self.hi.ln());
        for _ in 0..3 {
            y = y + self.div(y.exp()) - Dd::ONE;
        }
        y
    }
}

/// ln 2 to double-double precision.
pub fn ln2() -> Dd {
    Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = two_sum(s, e + t);
        Dd::norm(s, e + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        Dd::norm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

/// `ln(1 + e^x)`.
pub fn softplus(x: Dd) -> Dd {
    if x.hi > 0.0 {
        x + (Dd::ONE + (-x).exp()).ln()
    } else {
        (Dd::ONE + x.exp()).ln()
    }
}

/// Forward pass of a flat-parameter ReLU network (`out x in` row-major
/// weights then biases per layer, linear output) in double-double.
pub fn mlp_forward(layer_dims: &[usize], params: &[f64], x: &[f64]) -> Dd {
    let mut act: Vec<Dd> = x.iter().map(|&v| Dd::from(v)).collect();
    let mut off = 0;
    let layers = layer_dims.len() - 1;
    for (l, w) in layer_dims.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let bias = off + n_in * n_out;
        let mut next = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let mut s = Dd::from(params[bias + o]);
            for i in 0..n_in {
                s = s + Dd::from(params[off + o * n_in + i]) * act[i];
            }
            if l + 1 < layers && s.hi < 0.0 {
                s = Dd::ZERO;
            }
            next.push(s);
        }
        off = bias + n_out;
        act = next;
    }
    act[0]
}
