//! The runnable oracle suite: every case compares a production operator
//! against its brute-force reference on freshly generated random inputs and
//! reports max absolute/relative error against fixed tolerances.

use ndarray::{Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gca;
use crate::lca::{LcaStage, StageSpec};
use crate::nn::{Bindings, Registry};
use crate::oracle::{self, OracleReport};
use crate::tensor::{Arr, FactorLayout, Tape, Var, WindowGeometry};

const ATOL: f64 = 1e-8;
const RTOL: f64 = 1e-6;
const GRAD_RTOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// Runs every registered case; deterministic in `seed`.
pub fn run_suite(seed: u64) -> Vec<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // Class-center pooling vs the explicit-loop oracle.
    for case in 0..25 {
        let (c, k, p) = (
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..17),
        );
        let feature = Array2::from_shape_fn((c, p), |_| rng.random_range(-2.0..2.0));
        let logits = Array2::from_shape_fn((k, p), |_| rng.random_range(-2.0..2.0));
        let want = oracle::class_centers(&feature, &logits);
        let tape = Tape::new();
        let f = tape.leaf(feature.clone().into_dyn().into_shape_with_order(IxDyn(&[1, c, p])).unwrap());
        let d = tape.leaf(logits.clone().into_dyn().into_shape_with_order(IxDyn(&[1, k, p])).unwrap());
        let got = gca::class_centers_flat(&f, &d).value();
        reports.push(OracleReport::compare(
            &format!("class_centers/{case}"),
            got.as_slice().unwrap(),
            want.as_slice().unwrap(),
            ATOL,
            RTOL,
        ));
    }

    // Multi-head class attention with identity projections vs the oracle.
    for case in 0..25 {
        for &heads in &[1usize, 2] {
            let c = 2 * heads * rng.random_range(1..3);
            let k = rng.random_range(1..5);
            let p = rng.random_range(1..9);
            let pixels = Array2::from_shape_fn((p, c), |_| rng.random_range(-1.5..1.5));
            let keys = Array2::from_shape_fn((k, c), |_| rng.random_range(-1.5..1.5));
            let values = Array2::from_shape_fn((k, c), |_| rng.random_range(-1.5..1.5));
            let want = oracle::attention(&pixels, &keys, &values, heads);
            let mut reg = Registry::new();
            let stage = LcaStage::new(
                &mut reg,
                "verify",
                StageSpec {
                    mode: crate::lca::ContextMode::LocalGlobal,
                    channels: c,
                    value_in: c,
                    classes: k.max(2),
                    heads,
                    patches: (1, 1),
                    atb: None,
                    atb_slope: 0.01,
                    tie_value_heads: false,
                    identity_init: true,
                },
                &mut rng,
            )
            .expect("verify stage builds");
            let tape = Tape::new();
            let mut bind = Bindings::new();
            let q = tape.leaf(to3(&pixels));
            let kk = tape.leaf(to3(&keys));
            let v = tape.leaf(to3(&values));
            let got = stage.attention(&q, &kk, &v, &mut bind, None).value();
            reports.push(OracleReport::compare(
                &format!("attention/h{heads}/{case}"),
                got.as_slice().unwrap(),
                want.as_slice().unwrap(),
                ATOL,
                RTOL,
            ));
        }
    }

    // Affine window grids vs per-point transformation.
    for case in 0..34 {
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let geom = WindowGeometry::regular(1, 2, 2, h, w);
        let layout = FactorLayout::new(true, true, true);
        let factors = rand_arr(&mut rng, &[4, 4]).mapv(|v| v * 0.5);
        let tape = Tape::new();
        let f = tape.leaf(factors.clone());
        let grid = f.affine_window_grid(layout, &geom).value();
        let mut got = Vec::new();
        let mut want = Vec::new();
        for win in 0..4 {
            let center = geom.center(win);
            let half = geom.half_extents();
            let theta = factors[[win, 0]];
            let delta = (factors[[win, 1]], factors[[win, 2]]);
            let psi = 1.0 + factors[[win, 3]];
            let mut base = Vec::new();
            for i in 0..h {
                for j in 0..w {
                    base.push((
                        geom.xl[win] + j as f64,
                        geom.yl[win] + i as f64,
                    ));
                }
            }
            let transformed = oracle::affine_points(&base, center, half, psi, theta, delta);
            for (p, t) in transformed.iter().enumerate() {
                got.push(grid[[win, p, 0]]);
                got.push(grid[[win, p, 1]]);
                want.push(t.0);
                want.push(t.1);
            }
        }
        reports.push(OracleReport::compare(
            &format!("affine_grid/{case}"),
            &got,
            &want,
            1e-12,
            RTOL,
        ));
    }

    // Gradient spot checks against central finite differences.
    reports.push(grad_case("grad/preclassify", &mut rng, |rng| {
        let x0 = rand_arr(rng, &[1, 3, 2, 2]);
        let w0 = rand_arr(rng, &[2, 3, 1, 1]);
        let b0 = rand_arr(rng, &[2]);
        (
            x0,
            Box::new(move |t: &std::rc::Rc<Tape>, x: &Var| {
                let w = t.leaf(w0.clone());
                let b = t.leaf(b0.clone());
                x.conv2d(&w, Some(&b), 1, 0).mean_all()
            }),
        )
    }));
    reports.push(grad_case("grad/class_centers", &mut rng, |rng| {
        let d0 = rand_arr(rng, &[1, 2, 2, 2]);
        let w0 = rand_arr(rng, &[1, 2, 3]);
        let x0 = rand_arr(rng, &[1, 3, 2, 2]);
        (
            x0,
            Box::new(move |t: &std::rc::Rc<Tape>, x: &Var| {
                let d = t.leaf(d0.clone());
                let w = t.leaf(w0.clone());
                gca::class_centers(x, &d).mul(&w).sum_all()
            }),
        )
    }));
    reports.push(grad_case("grad/softmax_attention", &mut rng, |rng| {
        let k0 = rand_arr(rng, &[1, 3, 4]);
        let v0 = rand_arr(rng, &[1, 3, 4]);
        let q0 = rand_arr(rng, &[1, 4, 4]);
        (
            q0,
            Box::new(move |t: &std::rc::Rc<Tape>, q: &Var| {
                let k = t.leaf(k0.clone());
                let v = t.leaf(v0.clone());
                q.bmm_nt(&k).scale(0.5).softmax(2).bmm(&v).mean_all()
            }),
        )
    }));
    reports.push(grad_case("grad/grid_sample_coords", &mut rng, |rng| {
        let x0 = rand_arr(rng, &[1, 2, 4, 4]);
        let g0 = Arr::from_shape_fn(IxDyn(&[1, 6, 2]), |_| rng.random_range(0.3..2.7));
        (
            g0,
            Box::new(move |t: &std::rc::Rc<Tape>, g: &Var| {
                let x = t.leaf(x0.clone());
                x.grid_sample_points(g).mean_all()
            }),
        )
    }));
    reports.push(grad_case("grad/cross_entropy", &mut rng, |rng| {
        let x0 = rand_arr(rng, &[1, 3, 2, 2]);
        let mut tgt = ndarray::ArrayD::zeros(IxDyn(&[1, 2, 2]));
        for (i, t) in tgt.iter_mut().enumerate() {
            *t = (i % 3) as i64;
        }
        let _ = rng;
        (
            x0,
            Box::new(move |_t: &std::rc::Rc<Tape>, x: &Var| x.cross_entropy_mean(&tgt, 255)),
        )
    }));

    reports
}

fn to3(m: &Array2<f64>) -> Arr {
    let (r, c) = m.dim();
    m.clone()
        .into_dyn()
        .into_shape_with_order(IxDyn(&[1, r, c]))
        .unwrap()
}

type BuildFn = Box<dyn Fn(&std::rc::Rc<Tape>, &Var) -> Var>;

fn grad_case(
    name: &str,
    rng: &mut ChaCha8Rng,
    make: impl FnOnce(&mut ChaCha8Rng) -> (Arr, BuildFn),
) -> OracleReport {
    let (x0, build) = make(rng);
    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let out = build(&tape, &x);
    tape.backward(&out);
    let analytic = tape.grad(&x).expect("gradient reaches input");
    let numeric = oracle::finite_diff_grad(
        |v| {
            let t = Tape::new();
            let xv = t.leaf(v.clone());
            build(&t, &xv).scalar()
        },
        &x0,
        EPS,
    );
    OracleReport::compare(
        name,
        analytic.as_slice().unwrap(),
        numeric.as_slice().unwrap(),
        1e-7,
        GRAD_RTOL,
    )
}
