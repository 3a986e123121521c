use super::*;
use crate::grid_field::PdeParams;
use crate::rng::SplitMix64;

fn random(shape: &[usize], seed: u64, amp: f64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.symmetric(amp)).collect())
}

/// Central differences of a scalar function of one tensor.
fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64, eps: f64) -> Tensor {
    let mut g = vec![0.0; x.numel()];
    for k in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[k] += eps;
        let mut minus = x.clone();
        minus.data_mut()[k] -= eps;
        g[k] = (f(&plus) - f(&minus)) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), g)
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.data().iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn check_first_order(x: Tensor, f: impl Fn(&Var) -> Var) {
    let leaf = Var::leaf(x.clone());
    let out = f(&leaf);
    let g = grad(&out, &[&leaf], false).remove(0);
    let num = numeric_grad(&x, &|t| f(&Var::constant(t.clone())).item(), 1e-6);
    let err = rel_err(g.value(), &num);
    assert!(err < 1e-6, "relative gradient error {err}");
}

#[test]
fn elementwise_gradients() {
    let x = random(&[2, 3, 4, 4], 1, 1.0);
    let c = Var::constant(random(&[2, 3, 4, 4], 2, 1.0));
    check_first_order(x.clone(), |v| v.mul(&c).add(&v.square()).sub(&c).sum_all());
    check_first_order(x.clone(), |v| v.tanh().scale(2.0).add_scalar(0.3).square().mean_all());
    check_first_order(x.clone(), |v| v.leaky_relu(0.2).abs().sum_all());
    check_first_order(x.map(|a| a.abs() + 0.5), |v| v.powf(-0.5).sum_all());
}

#[test]
fn reduction_and_channel_gradients() {
    let x = random(&[2, 3, 4, 5], 3, 1.0);
    let w = Var::constant(random(&[2, 3, 4, 5], 4, 1.0));
    check_first_order(x.clone(), |v| {
        let m = v.sum_keep(&[true, true, false, false]).scale(0.05);
        v.sub(&m.expand(v.shape())).square().mul(&w).sum_all()
    });
    check_first_order(x.clone(), |v| {
        let a = v.narrow_channels(1, 2);
        let b = v.narrow_channels(0, 1);
        Var::concat_channels(&[&a, &b, &a]).square().mul_scalar_var(&v.sum_all()).sum_all()
    });
    check_first_order(x, |v| v.sum_per_sample().square().sum_all());
}

#[test]
fn conv_gradients_both_arguments() {
    let g = ConvGeom { kernel: 4, stride: 2, pad: 1 };
    let x = random(&[2, 2, 6, 6], 5, 1.0);
    let w = random(&[3, 2, 4, 4], 6, 0.5);
    let wc = Var::constant(w.clone());
    check_first_order(x.clone(), |v| v.conv2d(&wc, g).square().sum_all());
    let xc = Var::constant(x.clone());
    check_first_order(w.clone(), |v| xc.conv2d(v, g).square().sum_all());

    // transposed conv in both arguments
    let y = random(&[2, 3, 3, 3], 7, 1.0);
    check_first_order(y.clone(), |v| v.conv_transpose(&wc, g, 6, 6).square().sum_all());
    let yc = Var::constant(y);
    check_first_order(w, |v| yc.conv_transpose(v, g, 6, 6).square().sum_all());
}

#[test]
fn field_operator_gradients() {
    let params = PdeParams::standard(6).unwrap();
    let x = random(&[2, 1, 6, 6], 8, 0.9);
    check_first_order(x.clone(), |v| v.laplacian(0.4).square().sum_all());
    check_first_order(x.clone(), |v| v.diff_rows().square().add(&v.diff_cols().square()).sum_all());
    check_first_order(x.clone(), |v| v.with_boundary(0.3).square().sum_all());
    check_first_order(x, |v| v.euler_step(&params).euler_step(&params).square().sum_all());
}

#[test]
fn euler_op_matches_field_solver_bitwise() {
    let params = PdeParams::standard(9).unwrap();
    let mut rng = SplitMix64::new(4);
    let mut f = crate::grid_field::Field::from_fn(9, |_, _| rng.symmetric(1.0)).unwrap();
    f.fill_boundary(0.0);
    let expected = crate::forward_solver::simulate(&f, &params, 3).unwrap();
    let mut v = Var::constant(Tensor::new(vec![1, 1, 9, 9], f.values().to_vec()));
    for _ in 0..3 {
        v = v.euler_step(&params);
    }
    assert_eq!(v.value().data(), expected.values());
}

#[test]
fn unreachable_inputs_get_zero_gradient() {
    let a = Var::leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
    let b = Var::leaf(Tensor::full(&[1, 1, 2, 2], 2.0));
    let out = a.square().sum_all();
    let gs = grad(&out, &[&a, &b], false);
    assert_eq!(gs[0].value().data(), &[2.0; 4]);
    assert_eq!(gs[1].value().data(), &[0.0; 4]);
}

#[test]
fn constants_do_not_build_graphs() {
    let a = Var::constant(Tensor::full(&[3], 1.0));
    let b = a.square().add(&a);
    assert!(!b.requires_grad());
}

/// d/dw ‖∇ₓ f(x, w)‖² through a conv + leaky-relu stack, against central
/// differences of the first-order gradient.
#[test]
fn second_order_through_conv_stack() {
    let g1 = ConvGeom { kernel: 4, stride: 2, pad: 1 };
    let g2 = ConvGeom { kernel: 3, stride: 1, pad: 1 };
    let x = random(&[2, 2, 8, 8], 9, 1.0);
    let w1 = random(&[3, 2, 4, 4], 10, 0.4);
    let w2 = random(&[1, 3, 3, 3], 11, 0.4);

    let penalty = |w1: &Var, w2: &Var, create: bool| -> Var {
        let xl = Var::leaf(x.clone());
        let scale = w1.square().sum_all().powf(-0.5);
        let h = xl.conv2d(&w1.mul_scalar_var(&scale), g1).leaky_relu(0.2);
        let out = h.conv2d(w2, g2).mean_per_sample().sum_all();
        let gx = grad(&out, &[&xl], create).remove(0);
        let norms = gx.square().sum_per_sample().add_scalar(1e-12).powf(0.5);
        norms.add_scalar(-1.0).square().mean_all()
    };

    let w1v = Var::leaf(w1.clone());
    let w2v = Var::leaf(w2.clone());
    let p = penalty(&w1v, &w2v, true);
    let gs = grad(&p, &[&w1v, &w2v], false);

    let num1 = numeric_grad(&w1, &|t| penalty(&Var::constant(t.clone()), &Var::constant(w2.clone()), false).item(), 1e-6);
    let num2 = numeric_grad(&w2, &|t| penalty(&Var::constant(w1.clone()), &Var::constant(t.clone()), false).item(), 1e-6);
    assert!(rel_err(gs[0].value(), &num1) < 1e-5, "w1 err {}", rel_err(gs[0].value(), &num1));
    assert!(rel_err(gs[1].value(), &num2) < 1e-5, "w2 err {}", rel_err(gs[1].value(), &num2));
}
