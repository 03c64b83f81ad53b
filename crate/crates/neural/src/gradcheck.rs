//! Central finite-difference checks of every differentiable op, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ops;
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-3;
/// Relative errors are taken against at least this magnitude so that
/// near-zero gradients do not amplify rounding.
const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

/// Central differences of scalar `f` at `x`.
pub fn numeric_grad(x: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

fn with(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor { shape: t.shape.clone(), data: data.to_vec() }
}

/// Checks the gradients of `L = Σ r ⊙ f(x, w, b)` for a layer with a kernel
/// and bias, returning the worst relative error over the three inputs.
fn check_layer(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    r: &Tensor<f64>,
    fwd: &dyn Fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
    grads: (Tensor<f64>, Tensor<f64>, Tensor<f64>),
) -> f64 {
    let (dx, dw, db) = grads;
    let ex = relative_error(&dx.data, &numeric_grad(&x.data, EPS, |v| dot(&fwd(&with(x, v), w, b), r)));
    let ew = relative_error(&dw.data, &numeric_grad(&w.data, EPS, |v| dot(&fwd(x, &with(w, v), b), r)));
    let eb = relative_error(&db.data, &numeric_grad(&b.data, EPS, |v| dot(&fwd(x, w, &with(b, v)), r)));
    ex.max(ew).max(eb)
}

/// Worst relative error of each op's backward pass against finite
/// differences on tensors of at most 8×8 spatial extent.
pub fn check_all(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for (name, stride, pad, k) in [("conv2d 3x3 s1 p1", 1, 1, 3), ("conv2d 3x3 s2 p1", 2, 1, 3), ("conv2d 1x1", 1, 0, 1)] {
        let x = random(&mut rng, &[2, 8, 8]);
        let w = random(&mut rng, &[3, 2, k, k]);
        let b = random(&mut rng, &[3]);
        let fwd = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| ops::conv2d_forward(x, w, b, stride, pad).unwrap().0;
        let (y, cols) = ops::conv2d_forward(&x, &w, &b, stride, pad).unwrap();
        let r = random(&mut rng, &y.shape);
        let g = ops::conv2d_backward(&r, (2, 8, 8), &w, &cols, stride, pad).unwrap();
        out.push((name, check_layer(&x, &w, &b, &r, &fwd, g)));
    }

    let x = random(&mut rng, &[3, 4, 4]);
    let w = random(&mut rng, &[3, 2, 4, 4]);
    let b = random(&mut rng, &[2]);
    let fwd = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| ops::deconv2d_forward(x, w, b, 2, 1).unwrap();
    let r = random(&mut rng, &fwd(&x, &w, &b).shape);
    let g = ops::deconv2d_backward(&r, &x, &w, 2, 1).unwrap();
    out.push(("deconv2d 4x4 s2 p1", check_layer(&x, &w, &b, &r, &fwd, g)));

    // Keep inputs away from the kink so the differences stay one-sided-free.
    let mut x = random(&mut rng, &[2, 8, 8]);
    x.data.iter_mut().for_each(|v| *v += 0.01f64.copysign(*v));
    let r = random(&mut rng, &x.shape);
    let y = ops::relu_forward(&x);
    let dx = ops::relu_backward(&r, &y);
    let num = numeric_grad(&x.data, EPS, |v| dot(&ops::relu_forward(&with(&x, v)), &r));
    out.push(("relu", relative_error(&dx.data, &num)));

    // Distinct values spaced well beyond 2·EPS keep every argmax stable.
    let n = 2 * 8 * 8;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_vec(&[2, 8, 8], vals).unwrap();
    let (y, arg) = ops::maxpool2_forward(&x).unwrap();
    let r = random(&mut rng, &y.shape);
    let dx = ops::maxpool2_backward(&r, &arg, &x.shape);
    let num = numeric_grad(&x.data, EPS, |v| dot(&ops::maxpool2_forward(&with(&x, v)).unwrap().0, &r));
    out.push(("maxpool2", relative_error(&dx.data, &num)));

    let a = random(&mut rng, &[2, 4, 4]);
    let c = random(&mut rng, &[3, 4, 4]);
    let r = random(&mut rng, &[5, 4, 4]);
    let parts = ops::split_channels(&r, &[2, 3]).unwrap();
    let na = numeric_grad(&a.data, EPS, |v| dot(&ops::concat_channels(&[&with(&a, v), &c]).unwrap(), &r));
    let nc = numeric_grad(&c.data, EPS, |v| dot(&ops::concat_channels(&[&a, &with(&c, v)]).unwrap(), &r));
    out.push(("concat", relative_error(&parts[0].data, &na).max(relative_error(&parts[1].data, &nc))));

    let z = random(&mut rng, &[4, 8, 8]);
    let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..4)).collect();
    let weights = [0.5, 2.0, 10.0, 0.25];
    let (_, dz) = ops::softmax_xent(&z, &labels, &weights).unwrap();
    let num = numeric_grad(&z.data, EPS, |v| ops::softmax_xent(&with(&z, v), &labels, &weights).unwrap().0);
    out.push(("softmax_xent", relative_error(&dz.data, &num)));

    out
}
