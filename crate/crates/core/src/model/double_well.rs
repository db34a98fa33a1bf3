use super::Model;

/// Particle in the potential `V(x) = (x + 1)^2 (x - 1)^2`, moving as
/// `dx/dt = -V'(x) = 4x - 4x^3`. Equilibria at -1, 0 (unstable) and +1.
#[derive(Debug, Clone)]
pub struct DoubleWell {
    step: f64,
}

impl DoubleWell {
    pub const DEFAULT_STEP: f64 = 1e-3;

    pub fn with_step(step: f64) -> Self {
        Self { step }
    }

    pub fn potential(x: f64) -> f64 {
        (x + 1.0).powi(2) * (x - 1.0).powi(2)
    }
}

impl Default for DoubleWell {
    fn default() -> Self {
        Self { step: Self::DEFAULT_STEP }
    }
}

impl Model for DoubleWell {
    fn nvar(&self) -> usize {
        1
    }

    fn step_size(&self) -> f64 {
        self.step
    }

    fn tendency(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 4.0 * x[0] - 4.0 * x[0] * x[0] * x[0];
    }

    fn tendency_jvp(&self, x: &[f64], dx: &[f64], out: &mut [f64]) {
        out[0] = (4.0 - 12.0 * x[0] * x[0]) * dx[0];
    }

    fn tendency_vjp(&self, x: &[f64], lambda: &[f64], out: &mut [f64]) {
        out[0] = (4.0 - 12.0 * x[0] * x[0]) * lambda[0];
    }
}
