//! First-order dual numbers carrying one directional input derivative.

/// A value together with its derivative along the seeded input direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    /// Primal value.
    pub v: f64,
    /// Directional derivative with respect to the seeded input coordinate.
    pub dv: f64,
}

impl Dual {
    pub const ZERO: Dual = Dual { v: 0.0, dv: 0.0 };

    /// A constant: tangent 0.
    pub fn constant(v: f64) -> Dual {
        Dual { v, dv: 0.0 }
    }

    /// The seeded input coordinate: tangent 1.
    pub fn seeded(v: f64) -> Dual {
        Dual { v, dv: 1.0 }
    }

    pub fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, dv: self.dv + o.dv }
    }

    pub fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, dv: self.dv - o.dv }
    }

    pub fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            dv: self.dv * o.v + self.v * o.dv,
        }
    }

    pub fn div(self, o: Dual) -> Dual {
        let v = self.v / o.v;
        Dual {
            v,
            dv: (self.dv - v * o.dv) / o.v,
        }
    }

    pub fn neg(self) -> Dual {
        Dual { v: -self.v, dv: -self.dv }
    }

    pub fn tanh(self) -> Dual {
        let t = self.v.tanh();
        Dual {
            v: t,
            dv: (1.0 - t * t) * self.dv,
        }
    }

    pub fn exp(self) -> Dual {
        let e = self.v.exp();
        Dual { v: e, dv: e * self.dv }
    }

    pub fn ln(self) -> Dual {
        Dual {
            v: self.v.ln(),
            dv: self.dv / self.v,
        }
    }

    pub fn square(self) -> Dual {
        Dual {
            v: self.v * self.v,
            dv: 2.0 * self.v * self.dv,
        }
    }
}
