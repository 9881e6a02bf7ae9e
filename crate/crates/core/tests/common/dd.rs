//! Double-double (~106-bit) arithmetic for the high-precision EM reference.
//! Self-contained so the oracle shares nothing with the implementation under
//! test.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

pub const DD_ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
pub const DD_ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
/// pi to double-double precision.
pub const DD_PI: Dd = Dd {
    hi: 3.141592653589793,
    lo: 1.2246467991473532e-16,
};
/// ln(2) to double-double precision.
pub const DD_LN2: Dd = Dd {
    hi: 0.6931471805599453,
    lo: 2.3190468138462996e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let err = b - (s - a);
    (s, err)
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let err = a.mul_add(b, -p);
    (p, err)
}

impl Dd {
    pub fn from(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, o.hi);
        let (t1, t2) = two_sum(self.lo, o.lo);
        let s2 = s2 + t1;
        let (s1, s2) = quick_two_sum(s1, s2);
        let s2 = s2 + t2;
        let (hi, lo) = quick_two_sum(s1, s2);
        Dd { hi, lo }
    }

    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p1, p2) = two_prod(self.hi, o.hi);
        let p2 = p2 + self.hi * o.lo + self.lo * o.hi;
        let (hi, lo) = quick_two_sum(p1, p2);
        Dd { hi, lo }
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        let (s, e) = quick_two_sum(q1, q2);
        let d = Dd { hi: s, lo: e };
        d.add(Dd::from(q3))
    }

    pub fn sqrt(self) -> Dd {
        if self.hi == 0.0 && self.lo == 0.0 {
            return DD_ZERO;
        }
        assert!(self.hi > 0.0, "sqrt of negative dd");
        // One dd Newton step on an f64 seed: x' = (x + a/x) / 2.
        let x = Dd::from(self.hi.sqrt());
        let x = x.add(self.div(x)).mul(Dd::from(0.5));
        x.add(self.div(x)).mul(Dd::from(0.5))
    }

    /// exp via argument reduction exp(x) = 2^k exp(r), |r| <= ln2/2, then a
    /// Taylor series taken far past double-double precision.
    pub fn exp(self) -> Dd {
        if self.hi == 0.0 && self.lo == 0.0 {
            return DD_ONE;
        }
        let k = (self.hi / DD_LN2.hi).round();
        let r = self.sub(DD_LN2.mul(Dd::from(k)));
        let mut term = DD_ONE;
        let mut sum = DD_ONE;
        for i in 1..=30 {
            term = term.mul(r).div(Dd::from(i as f64));
            sum = sum.add(term);
        }
        let scale = 2.0_f64.powi(k as i32);
        sum.mul(Dd::from(scale))
    }

    pub fn lt(self, v: f64) -> bool {
        self.hi < v || (self.hi == v && self.lo < 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_f64_to_high_precision() {
        for &x in &[0.0, 1.0, -1.0, 0.5, -7.25, 3.0] {
            let dd = Dd::from(x).exp();
            let rel = (dd.to_f64() - x.exp()).abs() / x.exp();
            assert!(rel < 1e-15, "exp({x}): {} vs {}", dd.to_f64(), x.exp());
        }
    }

    #[test]
    fn exp_add_identity_beyond_f64() {
        // exp(a) * exp(b) == exp(a + b) to ~1e-30 relative.
        let a = Dd::from(0.3);
        let b = Dd::from(-1.7);
        let lhs = a.exp().mul(b.exp());
        let rhs = a.add(b).exp();
        let diff = lhs.sub(rhs);
        assert!(diff.hi.abs() < 1e-30 * rhs.hi.abs());
    }

    #[test]
    fn sqrt_squares_back() {
        let x = Dd::from(2.0);
        let s = x.sqrt();
        let back = s.mul(s).sub(x);
        assert!(back.hi.abs() < 1e-31);
    }

    #[test]
    fn division_inverts_multiplication() {
        let a = Dd::from(1.0).div(Dd::from(3.0));
        let back = a.mul(Dd::from(3.0)).sub(DD_ONE);
        assert!(back.hi.abs() < 1e-31);
    }
}
