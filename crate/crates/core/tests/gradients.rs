//! Autodiff gradients against central finite differences.

use bpp_core::autodiff::{finite_diff_grad, relative_error, NormStats, Tape, Var};
use bpp_core::bpp::{Bpp, BppConfig, Pass};
use bpp_core::{Shape, Tape64, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;
const SEEDS: [u64; 3] = [1, 2, 3];

fn random(shape: impl Into<Shape>, rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor64::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn positive(shape: impl Into<Shape>, rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor64::from_fn(shape, |_, _, _, _| rng.random_range(0.5..1.5))
}

fn tape_with(vals: &[Tensor64]) -> (Tape64, Vec<Var>) {
    let mut tape = Tape::new();
    let vars = vals.iter().map(|v| tape.param(v.clone())).collect();
    (tape, vars)
}

/// Compares d/d(input) of `mse(build(inputs), target)` for every input,
/// with a random target so the upstream gradient is generic.
fn check(inputs: &[Tensor64], rng: &mut ChaCha8Rng, build: impl Fn(&mut Tape64, &[Var]) -> Var, tol: f64) {
    let shape = {
        let (mut t, v) = tape_with(inputs);
        let y = build(&mut t, &v);
        t.shape(y)
    };
    let target = random(shape, rng);
    let loss = |vals: &[Tensor64]| {
        let (mut tape, vars) = tape_with(vals);
        let y = build(&mut tape, &vars);
        let t = tape.constant(target.clone());
        let l = tape.mse_loss(y, t).unwrap();
        (tape, vars, l)
    };
    let (mut tape, vars, l) = loss(inputs);
    tape.backward(l).unwrap();
    for (i, &v) in vars.iter().enumerate() {
        let fd = finite_diff_grad(
            |p| {
                let mut vals = inputs.to_vec();
                vals[i] = p.clone();
                let (t, _, l) = loss(&vals);
                t.value(l).item()
            },
            &inputs[i],
            H,
        );
        let err = relative_error(&tape.grad(v), &fd);
        assert!(err <= tol, "input {i}: relative error {err}");
    }
}

#[test]
fn dense_conv_stride_one_and_two() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for stride in [1, 2] {
            let ins = [
                random([2, 3, 6, 8], &mut rng),
                random([4, 3, 3, 3], &mut rng),
                random([1, 4, 1, 1], &mut rng),
            ];
            check(
                &ins,
                &mut rng,
                |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, false).unwrap(),
                TOL,
            );
        }
    }
}

#[test]
fn depthwise_scaler_conv() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [random([1, 3, 10, 12], &mut rng), random([3, 1, 9, 9], &mut rng)];
        check(&ins, &mut rng, |t, v| t.conv2d(v[0], v[1], None, 2, true).unwrap(), TOL);
    }
}

#[test]
fn zero_insert_relu_and_mask() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [random([2, 2, 3, 4], &mut rng)];
        check(&ins, &mut rng, |t, v| t.zero_insert_upsample2x(v[0]), TOL);
        check(&ins, &mut rng, |t, v| t.relu(v[0]), TOL);
        let mask = Tensor64::from_fn([2, 2, 3, 4], |_, _, _, _| if rng.random::<bool>() { 1.0 } else { 0.0 });
        check(&ins, &mut rng, |t, v| t.mask_mul(v[0], mask.clone()).unwrap(), TOL);
    }
}

#[test]
fn instance_norm_live_and_frozen() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [
            random([2, 3, 4, 5], &mut rng),
            positive([1, 3, 1, 1], &mut rng),
            random([1, 3, 1, 1], &mut rng),
        ];
        check(
            &ins,
            &mut rng,
            |t, v| t.instance_norm(v[0], v[1], v[2], 1e-5).unwrap().0,
            TOL,
        );
        let stats = NormStats {
            mean: (0..6).map(|_| rng.random_range(-0.5..0.5)).collect(),
            var: (0..6).map(|_| rng.random_range(0.2..2.0)).collect(),
        };
        check(
            &ins,
            &mut rng,
            |t, v| t.frozen_norm(v[0], v[1], v[2], 1e-5, &stats).unwrap(),
            TOL,
        );
    }
}

#[test]
fn elementwise_and_reductions() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [
            random([2, 2, 3, 3], &mut rng),
            random([2, 3, 3, 3], &mut rng),
            random([2, 2, 3, 3], &mut rng),
        ];
        check(&ins, &mut rng, |t, v| t.concat_channels(v[0], v[1]).unwrap(), TOL);
        check(&ins, &mut rng, |t, v| t.add(v[0], v[2]).unwrap(), TOL);
        check(&ins, &mut rng, |t, v| t.sub(v[0], v[2]).unwrap(), TOL);
        check(&ins, &mut rng, |t, v| t.scale(v[0], -1.7), TOL);
        check(&ins, &mut rng, |t, v| t.sum(v[1]), TOL);
        check(&ins, &mut rng, |t, v| t.l1_loss(v[0], v[2]).unwrap(), TOL);
        check(&ins, &mut rng, |t, v| t.mse_loss(v[0], v[2]).unwrap(), TOL);
    }
}

#[test]
fn negative_ssim_loss() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [
            Tensor64::from_fn([1, 1, 16, 16], |_, _, _, _| rng.random()),
            Tensor64::from_fn([1, 1, 16, 16], |_, _, _, _| rng.random()),
        ];
        check(&ins, &mut rng, |t, v| t.neg_ssim_loss(v[0], v[1]).unwrap(), 1e-4);
    }
}

/// Every parameter tensor of a small network, through the given loss.
fn network_check(cfg: BppConfig, ssim: bool, seed: u64) {
    let net = Bpp::<f64>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let x = Tensor64::from_fn([1, 3, 16, 16], |_, _, _, _| rng.random());
    let y = Tensor64::from_fn([1, 3, 16, 16], |_, _, _, _| rng.random());
    let loss_of = |n: &Bpp<f64>, track: bool| {
        let mut pass = Pass::new(n, track);
        let xi = pass.tape.constant(x.clone());
        let out = pass.run(xi).unwrap();
        let yi = pass.tape.constant(y.clone());
        let l = if ssim {
            pass.tape.neg_ssim_loss(out, yi).unwrap()
        } else {
            pass.tape.l1_loss(out, yi).unwrap()
        };
        let vars = pass.param_vars().to_vec();
        (pass.tape, vars, l)
    };
    let (mut tape, vars, l) = loss_of(&net, true);
    tape.backward(l).unwrap();
    for (i, name) in net.params.names().enumerate() {
        let fd = finite_diff_grad(
            |p| {
                let mut n = net.clone();
                n.params.tensors[i] = p.clone();
                let (t, _, l) = loss_of(&n, false);
                t.value(l).item()
            },
            &net.params.tensors[i],
            H,
        );
        let g = tape.grad(vars[i]);
        // biases feeding instance norm have zero gradient; FD sees only noise
        let vanishing = g.norm_l2() <= 1e-12 && fd.norm_l2() <= 1e-8;
        let err = relative_error(&g, &fd);
        assert!(
            err <= 1e-4 || vanishing,
            "{name}: relative error {err}, |g| {:e}, |fd| {:e}",
            g.norm_l2(),
            fd.norm_l2()
        );
    }
}

#[test]
fn full_network_neg_ssim() {
    network_check(BppConfig::new(1, &[4, 3]), true, 5);
}

#[test]
fn full_network_l1_with_frozen_lowest_update() {
    let mut cfg = BppConfig::new(2, &[4, 3]);
    cfg.freeze_lowest_update = true;
    cfg.use_instance_norm = false;
    network_check(cfg, false, 6);
}

/// Direct seven-loop convolution with zero padding.
fn conv_oracle(x: &Tensor64, w: &Tensor64, b: &[f64], stride: usize) -> Tensor64 {
    let (xs, ws) = (x.shape(), w.shape());
    let pad = (ws.h - 1) / 2;
    Tensor64::from_fn([xs.n, ws.n, xs.h / stride, xs.w / stride], |n, co, oy, ox| {
        let mut acc = b[co];
        for ci in 0..xs.c {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                        acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn conv_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(n, c, h, w) in &[(1, 1, 2, 2), (1, 2, 5, 7), (2, 4, 16, 16), (2, 3, 8, 6)] {
        for stride in [1, 2] {
            if stride == 2 && (h % 2 != 0 || w % 2 != 0) {
                continue;
            }
            let x = random([n, c, h, w], &mut rng);
            let wt = random([5, c, 3, 3], &mut rng);
            let b: Vec<f64> = (0..5).map(|_| rng.random()).collect();
            let mut tape = Tape64::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(wt.clone()));
            let bv = tape.constant(Tensor64::from_vec([1, 5, 1, 1], b.clone()).unwrap());
            let y = tape.conv2d(xv, wv, Some(bv), stride, false).unwrap();
            let want = conv_oracle(&x, &wt, &b, stride);
            assert!(
                tape.value(y).max_abs_diff(&want).unwrap() <= 1e-12,
                "{n}x{c}x{h}x{w} s{stride}"
            );
        }
    }
}
