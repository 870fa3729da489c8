use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn col(v: &[f64]) -> Tensor {
    Tensor::column(v.to_vec())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-6);
    max_abs_diff(got, want) / scale
}

fn eval(f: &dyn Fn(&mut Tape, Var) -> Result<Var>, at: &[f64]) -> f64 {
    let mut t = Tape::new();
    let x = t.leaf(col(at));
    let out = f(&mut t, x).unwrap();
    t.value(out).item()
}

fn grad_of(f: &dyn Fn(&mut Tape, Var) -> Result<Var>, at: &[f64]) -> Vec<f64> {
    grad(|t, v| f(t, v[0]), &[col(at)]).unwrap().remove(0).into_data()
}

/// Central finite differences, one coordinate at a time.
fn fd_grad(f: &dyn Fn(&mut Tape, Var) -> Result<Var>, at: &[f64], h: f64) -> Vec<f64> {
    (0..at.len())
        .map(|i| {
            let mut p = at.to_vec();
            let mut m = at.to_vec();
            p[i] += h;
            m[i] -= h;
            (eval(f, &p) - eval(f, &m)) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Act {
    Identity,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy)]
enum Head {
    Sum,
    Mean,
    SelfDot,
    Bce,
    SoftmaxCe,
}

/// A random MLP-shaped composition whose parameters are read from a flat vector.
#[derive(Debug, Clone)]
struct Program {
    x: Tensor,
    dims: Vec<usize>,
    acts: Vec<Act>,
    head: Head,
    targets: Tensor,
    mask: Tensor,
}

impl Program {
    fn random(rng: &mut ChaCha8Rng, max_params: usize) -> Self {
        loop {
            let depth = rng.gen_range(1..=3);
            let mut dims = vec![rng.gen_range(1..=3)];
            for _ in 0..depth {
                dims.push(rng.gen_range(1..=4));
            }
            let head = match rng.gen_range(0..5) {
                0 => Head::Sum,
                1 => Head::Mean,
                2 => Head::SelfDot,
                3 => Head::Bce,
                _ => Head::SoftmaxCe,
            };
            let out = *dims.last().unwrap();
            if matches!(head, Head::SoftmaxCe) && out < 2 {
                continue;
            }
            let p: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
            if p > max_params {
                continue;
            }
            let batch = rng.gen_range(1..=4);
            let x = Tensor::new(batch, dims[0], (0..batch * dims[0]).map(|_| rng.gen_range(-1.5..1.5)).collect());
            let acts = (0..depth - 1)
                .map(|_| match rng.gen_range(0..3) {
                    0 => Act::Identity,
                    1 => Act::Relu,
                    _ => Act::Sigmoid,
                })
                .collect();
            let targets = match head {
                Head::SoftmaxCe => {
                    let mut t = vec![0.0; batch * out];
                    for r in 0..batch {
                        t[r * out + rng.gen_range(0..out)] = 1.0;
                    }
                    Tensor::new(batch, out, t)
                }
                _ => Tensor::new(batch, out, (0..batch * out).map(|_| f64::from(rng.gen_range(0..2u8))).collect()),
            };
            let mask = Tensor::new(batch, out, (0..batch * out).map(|_| rng.gen_range(0.5..1.5)).collect());
            return Self { x, dims, acts, head, targets, mask };
        }
    }

    fn num_params(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Distance of any ReLU pre-activation from its kink at `theta`.
    fn min_kink_gap(&self, theta: &[f64]) -> f64 {
        let mut t = Tape::new();
        let th = t.leaf(col(theta));
        let mut gap = f64::INFINITY;
        let mut h = t.constant(self.x.clone());
        let mut off = 0;
        for (l, w) in self.dims.windows(2).enumerate() {
            let wv = t.slice(th, off, w[0], w[1]).unwrap();
            off += w[0] * w[1];
            let bv = t.slice(th, off, 1, w[1]).unwrap();
            off += w[1];
            h = t.affine(h, wv, bv).unwrap();
            if let Some(Act::Relu) = self.acts.get(l) {
                gap = t.value(h).data().iter().fold(gap, |g, v| g.min(v.abs()));
                h = t.relu(h).unwrap();
            } else if let Some(Act::Sigmoid) = self.acts.get(l) {
                h = t.sigmoid(h).unwrap();
            }
        }
        gap
    }

    fn build(&self, t: &mut Tape, theta: Var) -> Result<Var> {
        let mut h = t.constant(self.x.clone());
        let mut off = 0;
        for (l, w) in self.dims.windows(2).enumerate() {
            let wv = t.slice(theta, off, w[0], w[1])?;
            off += w[0] * w[1];
            let bv = t.slice(theta, off, 1, w[1])?;
            off += w[1];
            h = t.affine(h, wv, bv)?;
            h = match self.acts.get(l) {
                Some(Act::Relu) => t.relu(h)?,
                Some(Act::Sigmoid) => t.sigmoid(h)?,
                Some(Act::Identity) | None => h,
            };
        }
        let m = t.constant(self.mask.clone());
        let y = t.constant(self.targets.clone());
        match self.head {
            Head::Sum => {
                let p = t.mul(h, m)?;
                t.sum(p)
            }
            Head::Mean => {
                let s = t.sigmoid(h)?;
                t.mean(s)
            }
            Head::SelfDot => t.dot(h, h),
            Head::Bce => {
                let l = t.bce_with_logits(h, y)?;
                t.mean(l)
            }
            Head::SoftmaxCe => {
                let l = t.softmax_cross_entropy(h, y)?;
                t.mean(l)
            }
        }
    }
}

#[test]
fn grad_of_dot_self() {
    let g = grad(|t, v| t.dot(v[0], v[0]), &[col(&[1.0, 2.0])]).unwrap();
    assert_eq!(g[0].data(), &[2.0, 4.0]);
}

#[test]
fn grad_of_constant_is_zero() {
    let g = grad(|t, _| Ok(t.constant(Tensor::scalar(3.5))), &[col(&[1.0, 2.0])]).unwrap();
    assert_eq!(g[0].data(), &[0.0, 0.0]);
}

#[test]
fn three_layer_affine_relu_sum_matches_finite_differences() {
    // 2 -> 2 -> 1 affine/relu stack: 2*2 + 2 + 2*1 + 1 = 9 params, plus a
    // trailing scalar gain so the parameter vector has 10 entries.
    let x = Tensor::new(3, 2, vec![0.3, -1.2, 0.8, 0.5, -0.7, 1.1]);
    let f = move |t: &mut Tape, th: Var| -> Result<Var> {
        let xin = t.constant(x.clone());
        let w1 = t.slice(th, 0, 2, 2)?;
        let b1 = t.slice(th, 4, 1, 2)?;
        let w2 = t.slice(th, 6, 2, 1)?;
        let b2 = t.slice(th, 8, 1, 1)?;
        let gain = t.slice(th, 9, 1, 1)?;
        let h = t.affine(xin, w1, b1)?;
        let h = t.relu(h)?;
        let o = t.affine(h, w2, b2)?;
        let o = t.relu(o)?;
        let s = t.sum(o)?;
        t.mul(s, gain)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 5 {
        let theta: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = grad_of(&f, &theta);
        let fd = fd_grad(&f, &theta, 1e-5);
        if fd.iter().all(|v| *v == 0.0) {
            continue;
        }
        assert!(rel_err(&g, &fd) < 1e-6, "g={g:?} fd={fd:?}");
        checked += 1;
    }
}

#[test]
fn hvp_examples() {
    let half_sq = |t: &mut Tape, x: Var| -> Result<Var> {
        let d = t.dot(x, x)?;
        t.scale(d, 0.5)
    };
    let hv = hvp(half_sq, &col(&[0.4, 7.0]), &col(&[3.0, -1.0])).unwrap();
    assert_eq!(hv.data(), &[3.0, -1.0]);

    let linear = |t: &mut Tape, x: Var| t.sum(x);
    let hv = hvp(linear, &col(&[0.4, 7.0]), &col(&[3.0, -1.0])).unwrap();
    assert_eq!(hv.data(), &[0.0, 0.0]);
}

#[test]
fn hvp_quadratic_form_matches_dense_hessian() {
    let a = Tensor::new(2, 2, vec![2.0, 1.0, 1.0, 3.0]);
    let quad = {
        let a = a.clone();
        move |t: &mut Tape, x: Var| -> Result<Var> {
            let am = t.constant(a.clone());
            let ax = t.matmul(am, x)?;
            t.dot(x, ax)
        }
    };
    // Dense Hessian oracle: columns of H from second differences of the value.
    let at = [0.3, -0.8];
    let h = 1e-4;
    let f = |p: &[f64]| eval(&quad, p);
    let mut hess = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut pp = at;
            pp[i] += h;
            pp[j] += h;
            let mut pm = at;
            pm[i] += h;
            pm[j] -= h;
            let mut mp = at;
            mp[i] -= h;
            mp[j] += h;
            let mut mm = at;
            mm[i] -= h;
            mm[j] -= h;
            hess[i][j] = (f(&pp) - f(&pm) - f(&mp) + f(&mm)) / (4.0 * h * h);
        }
    }
    let oracle = [hess[0][0], hess[1][0]];
    assert!(max_abs_diff(&oracle, &[4.0, 2.0]) < 1e-6);
    let hv = hvp(quad, &col(&at), &col(&[1.0, 0.0])).unwrap();
    assert!(max_abs_diff(hv.data(), &[4.0, 2.0]) < 1e-12);
}

#[test]
fn relu_kink_has_zero_subgradient() {
    let g = grad(|t, v| {
        let r = t.relu(v[0])?;
        t.sum(r)
    }, &[col(&[0.0, 1.0, -1.0])])
    .unwrap();
    assert_eq!(g[0].data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn bce_stays_finite_for_large_logits() {
    let (v, g) = value_and_grad(
        |t, v| {
            let y = t.constant(col(&[0.0, 1.0]));
            let l = t.bce_with_logits(v[0], y)?;
            t.sum(l)
        },
        &[col(&[800.0, -800.0])],
    )
    .unwrap();
    assert!((v - 1600.0).abs() < 1e-9);
    assert_eq!(g[0].data(), &[1.0, -1.0]);
}

#[test]
fn softmax_cross_entropy_uniform_logits() {
    let (v, g) = value_and_grad(
        |t, v| {
            let y = t.constant(Tensor::new(1, 4, vec![0.0, 0.0, 1.0, 0.0]));
            let l = t.softmax_cross_entropy(v[0], y)?;
            t.sum(l)
        },
        &[Tensor::zeros(1, 4)],
    )
    .unwrap();
    assert!((v - 4f64.ln()).abs() < 1e-15);
    assert_eq!(g[0].data(), &[0.25, 0.25, -0.75, 0.25]);
}

#[test]
fn non_finite_values_are_reported_with_op_kind() {
    let err = grad(
        |t, v| {
            let big = t.scale(v[0], 1e300)?;
            let sq = t.mul(big, big)?;
            t.sum(sq)
        },
        &[col(&[10.0])],
    )
    .unwrap_err();
    assert_eq!(err, Error::Numerical { op: "mul" });
}

#[test]
fn shape_mismatch_is_a_spec_error() {
    let mut t = Tape::new();
    let a = t.leaf(col(&[1.0, 2.0]));
    let b = t.leaf(col(&[1.0, 2.0, 3.0]));
    assert!(matches!(t.add(a, b), Err(Error::Spec(_))));
    assert!(matches!(t.grad(a, &[a]), Err(Error::Spec(_))));
}

#[test]
fn gather_and_scatter_are_adjoint() {
    // f(a) = sum(w * gather(a, [2, 0, 2])) -> df/da = scatter(w)
    let g = grad(
        |t, v| {
            let s = t.gather_rows(v[0], &[2, 0, 2])?;
            let w = t.constant(col(&[1.0, 10.0, 100.0]));
            t.dot(s, w)
        },
        &[col(&[5.0, 6.0, 7.0])],
    )
    .unwrap();
    assert_eq!(g[0].data(), &[10.0, 0.0, 101.0]);
}

#[test]
fn replaying_a_tape_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prog = Program::random(&mut rng, 32);
    let theta: Vec<f64> = (0..prog.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let th = tape.leaf(col(&theta));
    let out = prog.build(&mut tape, th).unwrap();
    let g1 = tape.grad(out, &[th]).unwrap()[0];
    let g2 = tape.grad(out, &[th]).unwrap()[0];
    let a: Vec<u64> = tape.value(g1).data().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = tape.value(g2).data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grad_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prog = Program::random(&mut rng, 32);
        let theta: Vec<f64> = (0..prog.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        prop_assume!(prog.min_kink_gap(&theta) > 1e-3);
        let f = |t: &mut Tape, v: Var| prog.build(t, v);
        let g = grad_of(&f, &theta);
        let fd = fd_grad(&f, &theta, 1e-5);
        prop_assert!(rel_err(&g, &fd) < 1e-6, "prog={:?} g={:?} fd={:?}", prog, g, fd);
    }

    #[test]
    fn hvp_matches_finite_differences_of_grad(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prog = Program::random(&mut rng, 32);
        let n = prog.num_params();
        let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        prop_assume!(prog.min_kink_gap(&theta) > 1e-2);
        let f = |t: &mut Tape, x: Var| prog.build(t, x);
        let hv = hvp(f, &col(&theta), &col(&v)).unwrap();
        let h = 1e-5;
        let plus: Vec<f64> = theta.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = theta.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let gp = grad_of(&f, &plus);
        let gm = grad_of(&f, &minus);
        let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        prop_assert!(rel_err(hv.data(), &fd) < 1e-5, "prog={:?} hv={:?} fd={:?}", prog, hv, fd);
    }

    #[test]
    fn grad_is_linear_in_the_function(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p1 = Program::random(&mut rng, 16);
        let mut p2 = Program::random(&mut rng, 16);
        // share one parameter vector: pad the shorter program's reads
        let n = p1.num_params().max(p2.num_params());
        if p2.num_params() != p1.num_params() {
            p2 = p1.clone();
            p2.head = Head::SelfDot;
        }
        let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let combo = grad(|t, v| {
            let f = p1.build(t, v[0])?;
            let g = p2.build(t, v[0])?;
            let fa = t.scale(f, a)?;
            let gb = t.scale(g, b)?;
            t.add(fa, gb)
        }, &[col(&theta)]).unwrap().remove(0);
        let g1 = grad_of(&|t: &mut Tape, v: Var| p1.build(t, v), &theta);
        let g2 = grad_of(&|t: &mut Tape, v: Var| p2.build(t, v), &theta);
        let want: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
        prop_assert!(max_abs_diff(combo.data(), &want) < 1e-12 * want.iter().fold(1.0f64, |m, v| m.max(v.abs())));
    }
}
