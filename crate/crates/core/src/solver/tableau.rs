//! Butcher tableaux for the fixed-step explicit integrators.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Integrator {
    /// Runge-Kutta-Fehlberg 4(5), advanced with the fifth-order weights;
    /// the embedded difference is kept as a diagnostic only.
    #[default]
    Rk45FixedStep,
    /// Classic four-stage Runge-Kutta.
    Rk4,
    /// Explicit Euler; monotone for upwind advection under the CFL bound.
    Euler,
}

pub(crate) struct Tableau {
    pub a: &'static [&'static [f64]],
    pub b: &'static [f64],
    /// Embedded lower-order weights, when the method has a pair.
    pub b_low: Option<&'static [f64]>,
}

impl Tableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }
}

const RKF45: Tableau = Tableau {
    a: &[
        &[],
        &[1.0 / 4.0],
        &[3.0 / 32.0, 9.0 / 32.0],
        &[1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0],
        &[439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0],
        &[-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0],
    ],
    b: &[
        16.0 / 135.0,
        0.0,
        6656.0 / 12825.0,
        28561.0 / 56430.0,
        -9.0 / 50.0,
        2.0 / 55.0,
    ],
    b_low: Some(&[
        25.0 / 216.0,
        0.0,
        1408.0 / 2565.0,
        2197.0 / 4104.0,
        -1.0 / 5.0,
        0.0,
    ]),
};

const RK4: Tableau = Tableau {
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
    b_low: None,
};

const EULER: Tableau = Tableau {
    a: &[&[]],
    b: &[1.0],
    b_low: None,
};

impl Integrator {
    pub(crate) fn tableau(self) -> &'static Tableau {
        match self {
            Integrator::Rk45FixedStep => &RKF45,
            Integrator::Rk4 => &RK4,
            Integrator::Euler => &EULER,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_are_consistent() {
        for m in [Integrator::Rk45FixedStep, Integrator::Rk4, Integrator::Euler] {
            let t = m.tableau();
            assert!((t.b.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            if let Some(bl) = t.b_low {
                assert!((bl.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            }
            assert_eq!(t.a.len(), t.stages());
            for (i, row) in t.a.iter().enumerate() {
                assert_eq!(row.len(), i);
            }
        }
    }
}
