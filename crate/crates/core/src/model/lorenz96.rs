use super::Model;

/// Lorenz-96: `dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F` on a cyclic
/// ring of `n` variables.
#[derive(Debug, Clone)]
pub struct Lorenz96 {
    n: usize,
    forcing: f64,
    step: f64,
}

impl Lorenz96 {
    pub const DEFAULT_STEP: f64 = 0.005;

    pub fn new(n: usize, forcing: f64) -> Self {
        Self { n, forcing, step: Self::DEFAULT_STEP }
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn forcing(&self) -> f64 {
        self.forcing
    }

    #[inline]
    fn idx(&self, i: usize, offset: isize) -> usize {
        (i as isize + offset).rem_euclid(self.n as isize) as usize
    }
}

impl Default for Lorenz96 {
    fn default() -> Self {
        Self::new(40, 8.0)
    }
}

impl Model for Lorenz96 {
    fn nvar(&self) -> usize {
        self.n
    }

    fn step_size(&self) -> f64 {
        self.step
    }

    fn tendency(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let (ip1, im1, im2) = (self.idx(i, 1), self.idx(i, -1), self.idx(i, -2));
            out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + self.forcing;
        }
    }

    fn tendency_jvp(&self, x: &[f64], dx: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let (ip1, im1, im2) = (self.idx(i, 1), self.idx(i, -1), self.idx(i, -2));
            out[i] = (dx[ip1] - dx[im2]) * x[im1] + (x[ip1] - x[im2]) * dx[im1] - dx[i];
        }
    }

    fn tendency_vjp(&self, x: &[f64], lambda: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.n {
            let (ip1, im1, im2) = (self.idx(i, 1), self.idx(i, -1), self.idx(i, -2));
            let l = lambda[i];
            out[ip1] += l * x[im1];
            out[im2] -= l * x[im1];
            out[im1] += l * (x[ip1] - x[im2]);
            out[i] -= l;
        }
    }
}
