//! Helpers shared by the integration tests: random data, finite-difference
//! gradient checks and brute-force metric oracles.
#![allow(dead_code)]

use crackclf_core::metrics::{prf, ConfusionCounts};
use crackclf_core::{BinaryMask, Graph, ParamStore, ProbabilityMap, Result, StoreHandle, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(density))
}

/// Probabilities in `(0, 1)`, a third of them landing exactly on sweep
/// thresholds.
pub fn random_probs(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ProbabilityMap {
    let t = Tensor::from_fn(&[1, h, w], |_| {
        if rng.random_bool(0.33) {
            rng.random_range(1..=999u32) as f64 / 1000.0
        } else {
            rng.random_range(0.0..1.0)
        }
    });
    ProbabilityMap::new(t).unwrap()
}

/// Fills every parameter of `store` with uniform values in `[-scale, scale]`.
pub fn randomize(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Reduces a node to a scalar through a fixed, smooth projection.
pub fn project(g: &mut Graph<'_>, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    if shape.iter().product::<usize>() == 1 {
        return v;
    }
    let proj = g.input(Tensor::from_fn(&shape, |i| (i as f64 * 0.73 + 0.2).sin()));
    let m = g.mul(v, proj).unwrap();
    let s = g.sigmoid(m);
    let target = Tensor::from_fn(&shape, |i| (i % 3 == 0) as u8 as f64);
    g.weighted_bce(s, &target, 0.6, 0.4).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient norms below this are compared absolutely; finite differences
/// cannot resolve them.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)` in the Euclidean norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(GRAD_FLOOR)
}

/// Finite-difference step.
pub const FD_EPS: f64 = 1e-4;
/// Step for ReLU networks, small enough to stay on one linear piece.
pub const RELU_FD_EPS: f64 = 1e-6;

/// Tensors up to this size are checked coordinate by coordinate; larger
/// ones along a few random directions.
const FULL_CHECK_LEN: usize = 48;
const DIRECTIONS: usize = 3;

/// Value of the scalar objective plus, when requested, its gradients with
/// respect to every input and every parameter of the store.
pub type Evaluation = (f64, Option<(Vec<Tensor>, Vec<Tensor>)>);

/// The largest per-tensor relative error between analytic and
/// central-difference gradients of `run`, over every input and parameter.
pub fn fd_check(
    eps: f64,
    store: &ParamStore,
    inputs: &[Tensor],
    run: impl Fn(&ParamStore, &[Tensor], bool) -> Evaluation,
) -> f64 {
    let (_, grads) = run(store, inputs, true);
    let (input_grads, param_grads) = grads.expect("gradients requested");
    let mut worst = 0.0f64;
    let mut dir_rng = rng(0xD1);
    for (k, (x, grad)) in inputs.iter().zip(&input_grads).enumerate() {
        let f = |t: &Tensor| {
            let mut ins = inputs.to_vec();
            ins[k] = t.clone();
            run(store, &ins, false).0
        };
        let e = check_tensor(eps, x, grad, f, &mut dir_rng);
        if std::env::var_os("GRADCHECK_VERBOSE").is_some() {
            eprintln!("input {k}: {e:.3e}");
        }
        worst = worst.max(e);
    }
    for (i, id) in store.ids().enumerate() {
        let f = |t: &Tensor| {
            let mut s = store.clone();
            *s.get_mut(id) = t.clone();
            run(&s, inputs, false).0
        };
        let e = check_tensor(eps, store.get(id), &param_grads[i], f, &mut dir_rng);
        if std::env::var_os("GRADCHECK_VERBOSE").is_some() {
            eprintln!(
                "{}: {e:.3e} |g|={:.3e}",
                store.name(id),
                param_grads[i].data().iter().map(|v| v * v).sum::<f64>().sqrt()
            );
        }
        worst = worst.max(e);
    }
    worst
}

/// Finishes a recorded evaluation: projects `root` to a scalar and
/// backpropagates when asked.
pub fn finish(g: &mut Graph<'_>, root: Var, h: StoreHandle, inputs: &[Var], grads: bool) -> Evaluation {
    let root = project(g, root);
    let value = g.value(root).item();
    if !grads {
        return (value, None);
    }
    let mut gr = g.backward(root).unwrap();
    let ig = inputs
        .iter()
        .map(|&v| gr.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    (value, Some((ig, gr.take_store(g, h))))
}

/// Gradient check of a graph recorded by `build` over the attached store
/// and the given inputs.
pub fn gradcheck(
    store: &ParamStore,
    inputs: &[Tensor],
    build: impl for<'p> Fn(&mut Graph<'p>, StoreHandle, &[Var]) -> Result<Var>,
) -> f64 {
    gradcheck_eps(FD_EPS, store, inputs, build)
}

pub fn gradcheck_eps(
    eps: f64,
    store: &ParamStore,
    inputs: &[Tensor],
    build: impl for<'p> Fn(&mut Graph<'p>, StoreHandle, &[Var]) -> Result<Var>,
) -> f64 {
    fd_check(eps, store, inputs, |s, ins, grads| {
        let mut g = Graph::new();
        let h = g.attach(s, grads);
        let vars: Vec<Var> = ins
            .iter()
            .map(|t| if grads { g.leaf(t.clone()) } else { g.input(t.clone()) })
            .collect();
        let root = build(&mut g, h, &vars).unwrap();
        finish(&mut g, root, h, &vars, grads)
    })
}

fn check_tensor(eps: f64, x: &Tensor, grad: &Tensor, f: impl Fn(&Tensor) -> f64, rng: &mut ChaCha8Rng) -> f64 {
    let along = |d: &Tensor| {
        let mut p = x.clone();
        p.axpy(eps, d).unwrap();
        let mut m = x.clone();
        m.axpy(-eps, d).unwrap();
        (f(&p) - f(&m)) / (2.0 * eps)
    };
    if x.len() <= FULL_CHECK_LEN {
        let numeric: Vec<f64> = (0..x.len())
            .map(|i| {
                let mut d = Tensor::zeros(x.shape());
                d.data_mut()[i] = 1.0;
                along(&d)
            })
            .collect();
        relative_error(grad.data(), &numeric)
    } else {
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..DIRECTIONS {
            let mut d = uniform(x.shape(), -1.0, 1.0, rng);
            let n = norm(d.data());
            d.scale_in_place(1.0 / n);
            analytic.push(grad.data().iter().zip(d.data()).map(|(g, d)| g * d).sum());
            numeric.push(along(&d));
        }
        relative_error(&analytic, &numeric)
    }
}

/// Gradient check with no parameters.
pub fn gradcheck_inputs(inputs: &[Tensor], build: impl Fn(&mut Graph<'_>, &[Var]) -> Result<Var>) -> f64 {
    let empty = ParamStore::new();
    gradcheck(&empty, inputs, move |g: &mut Graph<'_>, _h: StoreHandle, v: &[Var]| {
        build(g, v)
    })
}

/// Pairwise-distance confusion counting: a predicted pixel is a hit when a
/// ground-truth pixel lies within Euclidean distance `tol`, and vice versa.
pub fn brute_confusion(pred: &BinaryMask, gt: &BinaryMask, tol: f64) -> ConfusionCounts {
    let pts = |m: &BinaryMask| {
        let mut v = Vec::new();
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(y, x) {
                    v.push((y as f64, x as f64));
                }
            }
        }
        v
    };
    let (p, g) = (pts(pred), pts(gt));
    let near = |a: (f64, f64), set: &[(f64, f64)]| {
        set.iter()
            .any(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= tol)
    };
    let tp = p.iter().filter(|&&a| near(a, &g)).count() as u64;
    let fn_ = g.iter().filter(|&&b| !near(b, &p)).count() as u64;
    ConfusionCounts {
        tp,
        fp: p.len() as u64 - tp,
        fn_,
    }
}

/// `(pr, re, f1)` computed from the textbook definitions with the
/// empty-denominator conventions.
pub fn brute_prf(c: ConfusionCounts) -> (f64, f64, f64) {
    let pr = if c.tp + c.fp == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let re = if c.tp + c.fn_ == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let f1 = if pr + re == 0.0 { 0.0 } else { 2.0 * pr * re / (pr + re) };
    (pr, re, f1)
}

fn binarize(p: &ProbabilityMap, t: f64) -> BinaryMask {
    BinaryMask::from_fn(p.height(), p.width(), |y, x| p.data()[y * p.width() + x] >= t)
}

/// Exhaustive ODS: `(ods, best_t)` over every threshold `k / 1000`.
pub fn brute_ods(probs: &[ProbabilityMap], gts: &[BinaryMask], tol: f64) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 1..=999 {
        let t = k as f64 / 1000.0;
        let mut total = ConfusionCounts::default();
        for (p, g) in probs.iter().zip(gts) {
            total += brute_confusion(&binarize(p, t), g, tol);
        }
        let f1 = brute_prf(total).2;
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    best
}

/// Exhaustive OIS.
pub fn brute_ois(probs: &[ProbabilityMap], gts: &[BinaryMask], tol: f64) -> f64 {
    let mut sum = 0.0;
    for (p, g) in probs.iter().zip(gts) {
        let best = (1..=999)
            .map(|k| brute_prf(brute_confusion(&binarize(p, k as f64 / 1000.0), g, tol)).2)
            .fold(f64::NEG_INFINITY, f64::max);
        sum += best;
    }
    sum / probs.len() as f64
}

/// Sanity link between the brute-force and library ratio code.
pub fn prf_tuple(c: ConfusionCounts) -> (f64, f64, f64) {
    let m = prf(c);
    (m.pr, m.re, m.f1)
}
