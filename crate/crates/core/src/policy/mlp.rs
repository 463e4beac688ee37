//! Fully connected network with leaky-ReLU hidden layers and a linear
//! output, plus reverse-mode gradients. Generic over `f32` (training) and
//! `f64` (gradient checks).

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Scalar types with a GEMM kernel.
pub trait Real: Float + Default + std::fmt::Debug + Send + Sync + 'static {
    /// `C = alpha * A B + beta * C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (u, v) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + u[i] * v[i];
        }
    }
    let mut tail = T::zero();
    for (u, v) in ra.iter().zip(rb) {
        tail = tail + *u * *v;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        debug_assert!(a.len() >= extent(m, k, rsa, csa));
        debug_assert!(b.len() >= extent(k, n, rsb, csb));
        debug_assert!(c.len() >= extent(m, n, rsc, csc));
        // SAFETY: strides are non-negative and every slice covers its
        // strided extent (asserted above in debug builds).
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        debug_assert!(a.len() >= extent(m, k, rsa, csa));
        debug_assert!(b.len() >= extent(k, n, rsb, csb));
        debug_assert!(c.len() >= extent(m, n, rsc, csc));
        // SAFETY: as for f32.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Network parameters stored flat: per layer, the `out x in` row-major
/// weight matrix followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Real> {
    widths: Vec<usize>,
    params: Vec<T>,
}

/// Activations kept from a batched forward pass for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Workspace<T: Real> {
    batch: usize,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<T>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<T>>,
    delta: Vec<T>,
    delta_prev: Vec<T>,
}

fn layer_offsets(widths: &[usize]) -> Vec<(usize, usize)> {
    let mut off = 0;
    widths
        .windows(2)
        .map(|w| {
            let start = off;
            off += w[0] * w[1] + w[1];
            (start, start + w[0] * w[1])
        })
        .collect()
}

#[inline]
fn leaky<T: Real>(z: T) -> T {
    if z >= T::zero() {
        z
    } else {
        z * T::from_f64(LEAKY_SLOPE)
    }
}

/// Derivative of the leaky ReLU; at exactly zero the positive-side slope.
#[inline]
pub fn leaky_derivative<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one()
    } else {
        T::from_f64(LEAKY_SLOPE)
    }
}

impl<T: Real> Mlp<T> {
    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2 && widths.iter().all(|w| *w > 0));
        Self {
            widths: widths.to_vec(),
            params: vec![T::zero(); Self::param_count(widths)],
        }
    }

    /// He-uniform weights, zero biases; the output layer is scaled by
    /// `output_scale`.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], output_scale: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(widths);
        let offsets = layer_offsets(widths);
        let last = offsets.len() - 1;
        for (l, (w_start, b_start)) in offsets.into_iter().enumerate() {
            let bound = (6.0 / widths[l] as f64).sqrt() * if l == last { output_scale } else { 1.0 };
            for p in &mut net.params[w_start..b_start] {
                *p = T::from_f64(rng.random_range(-bound..=bound));
            }
        }
        net
    }

    pub fn from_params(widths: &[usize], params: Vec<T>) -> Option<Self> {
        if widths.len() < 2 || widths.contains(&0) || params.len() != Self::param_count(widths) {
            return None;
        }
        Some(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Output bias of the last layer.
    pub fn output_bias(&self) -> &[T] {
        let n = self.output_dim();
        &self.params[self.params.len() - n..]
    }

    /// Batched forward pass over row-major `input` (`batch x input_dim`).
    /// Returns the row-major output held in `ws`.
    pub fn forward_batch<'a>(&self, input: &[T], batch: usize, ws: &'a mut Workspace<T>) -> &'a [T] {
        assert_eq!(input.len(), batch * self.input_dim(), "input shape");
        let layers = self.widths.len() - 1;
        ws.batch = batch;
        ws.acts.resize_with(layers + 1, Vec::new);
        ws.pre.resize_with(layers, Vec::new);
        ws.acts[0].clear();
        ws.acts[0].extend_from_slice(input);
        for (l, (w_start, b_start)) in layer_offsets(&self.widths).into_iter().enumerate() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[w_start..b_start];
            let b = &self.params[b_start..b_start + n_out];
            let (prev, rest) = ws.acts.split_at_mut(l + 1);
            let x = &prev[l];
            let z = &mut ws.pre[l];
            z.clear();
            if batch == 1 {
                // Row-major W: one contiguous dot product per output skips
                // the GEMM packing, which dominates at this size.
                z.extend(w.chunks_exact(n_in).zip(b).map(|(row, &bj)| bj + dot(row, x)));
            } else {
                for _ in 0..batch {
                    z.extend_from_slice(b);
                }
                // Z = X W^T + 1 b^T
                T::gemm(
                    batch,
                    n_in,
                    n_out,
                    T::one(),
                    x,
                    n_in as isize,
                    1,
                    w,
                    1,
                    n_in as isize,
                    T::one(),
                    z,
                    n_out as isize,
                    1,
                );
            }
            let y = &mut rest[0];
            y.clear();
            if l + 1 < layers {
                y.extend(z.iter().map(|v| leaky(*v)));
            } else {
                y.extend_from_slice(z);
            }
        }
        &ws.acts[layers]
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[T]) -> Vec<T> {
        let mut ws = Workspace::default();
        self.forward_batch(input, 1, &mut ws).to_vec()
    }

    /// Accumulate `d loss / d params` into `grads` given `d loss / d output`
    /// for the batch last run through `ws`.
    pub fn backward_batch(&self, ws: &mut Workspace<T>, grad_output: &[T], grads: &mut [T]) {
        let batch = ws.batch;
        let layers = self.widths.len() - 1;
        assert_eq!(grad_output.len(), batch * self.output_dim(), "grad shape");
        assert_eq!(grads.len(), self.params.len(), "grad buffer");
        ws.delta.clear();
        ws.delta.extend_from_slice(grad_output);
        let offsets = layer_offsets(&self.widths);
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (w_start, b_start) = offsets[l];
            if l + 1 < layers {
                for (d, z) in ws.delta.iter_mut().zip(&ws.pre[l]) {
                    *d = *d * leaky_derivative(*z);
                }
            }
            let delta = &ws.delta;
            // dW += delta^T X
            T::gemm(
                n_out,
                batch,
                n_in,
                T::one(),
                delta,
                1,
                n_out as isize,
                &ws.acts[l],
                n_in as isize,
                1,
                T::one(),
                &mut grads[w_start..b_start],
                n_in as isize,
                1,
            );
            let gb = &mut grads[b_start..b_start + n_out];
            for row in delta.chunks_exact(n_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g = *g + *d;
                }
            }
            if l > 0 {
                // dX = delta W
                ws.delta_prev.clear();
                ws.delta_prev.resize(batch * n_in, T::zero());
                T::gemm(
                    batch,
                    n_out,
                    n_in,
                    T::one(),
                    delta,
                    n_out as isize,
                    1,
                    &self.params[w_start..b_start],
                    n_in as isize,
                    1,
                    T::zero(),
                    &mut ws.delta_prev,
                    n_in as isize,
                    1,
                );
                std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            widths: self.widths.clone(),
            params: self.params.iter().map(|p| U::from_f64(p.as_f64())).collect(),
        }
    }
}

/// Loss `sum(c . y)` for fixed random `c`, so `dL/dy = c`.
fn loss(net: &Mlp<f64>, x: &[f64], batch: usize, c: &[f64]) -> f64 {
    let mut ws = Workspace::default();
    let y = net.forward_batch(x, batch, &mut ws);
    y.iter().zip(c).map(|(a, b)| a * b).sum()
}

/// Worst relative error between backprop gradients and central finite
/// differences (`h = 1e-5`) on a randomly perturbed `f64` network.
pub fn gradient_check(widths: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::<f64>::random(widths, 1.0, &mut rng);
    for p in net.params_mut() {
        *p += rng.random_range(-0.1..0.1);
    }
    let batch = 3;
    let x: Vec<f64> = (0..batch * widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..batch * net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut ws = Workspace::default();
    net.forward_batch(&x, batch, &mut ws);
    let mut grads = vec![0.0; net.params().len()];
    net.backward_batch(&mut ws, &c, &mut grads);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..grads.len() {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + h;
        let up = loss(&net, &x, batch, &c);
        net.params_mut()[i] = orig - h;
        let down = loss(&net, &x, batch, &c);
        net.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (fd - grads[i]).abs() / (fd.abs() + grads[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// Tolerance of [`gradient_gate`].
pub const GRADIENT_GATE_TOLERANCE: f64 = 1e-4;

/// Gradient check over `instances` small networks of varying shape; fails
/// on the first whose relative error reaches the tolerance. Returns the
/// worst error seen.
pub fn gradient_gate(instances: usize) -> crate::Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let widths = [2 + i % 5, 3 + (3 * i) % 7, 2 + i % 4, 1 + i % 3];
        let err = gradient_check(&widths, 0x9a7e + i as u64);
        if !(err < GRADIENT_GATE_TOLERANCE) {
            return Err(crate::Error::GradientCheck { instance: i, error: err });
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let err = gradient_check(&[4, 8, 8, 2], seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
        let err = gradient_check(&[6, 16, 12, 8, 3], 99);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut net = Mlp::<f32>::zeros(&[5, 7, 3]);
        let n = net.params().len();
        net.params_mut()[n - 3..].copy_from_slice(&[0.5, -1.0, 2.0]);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0, 4.0, 5.0]), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn leaky_kink_uses_positive_slope() {
        assert_eq!(leaky_derivative(0.0f64), 1.0);
        assert_eq!(leaky_derivative(-1e-300f64), LEAKY_SLOPE);
        assert_eq!(leaky(-2.0f64), -0.02);
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f32>::random(&[10, 32, 16, 4], 1.0, &mut rng);
        let x: Vec<f32> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut ws = Workspace::default();
        let y = net.forward_batch(&x, 5, &mut ws).to_vec();
        for r in 0..5 {
            let single = net.forward(&x[r * 10..(r + 1) * 10]);
            for (a, b) in single.iter().zip(&y[r * 4..(r + 1) * 4]) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn param_count_matches_widths() {
        assert_eq!(Mlp::<f32>::param_count(&[99, 512, 256, 64, 12]), 99 * 512 + 512 + 512 * 256 + 256 + 256 * 64 + 64 + 64 * 12 + 12);
        assert!(Mlp::<f32>::from_params(&[2, 3], vec![0.0; 8]).is_none());
        assert!(Mlp::<f32>::from_params(&[2, 3], vec![0.0; 9]).is_some());
    }
}
