//! Finite-difference checks of every tape op and of the whole model, at f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::CandidateLabelSet;
use crate::pll::WeightGradient;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares backward against central differences for every element of every
/// parameter in `store`.
fn check<F>(mut store: ParamStore<f64>, build: F)
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let eval = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let l = build(&mut tape, s);
        tape.value(l)[0]
    };
    let mut tape = Tape::new();
    let loss = build(&mut tape, &store);
    tape.backward(loss, &mut store).unwrap();
    let analytic: Vec<Vec<f64>> = store.tensors.iter().map(|t| t.grad.clone().unwrap()).collect();
    for p in 0..store.len() {
        for i in 0..store.tensors[p].numel() {
            let orig = store.tensors[p].data[i];
            store.tensors[p].data[i] = orig + H;
            let up = eval(&store);
            store.tensors[p].data[i] = orig - H;
            let down = eval(&store);
            store.tensors[p].data[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[p][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(rel < TOL, "{}[{i}]: analytic {a} numeric {numeric}", store.names[p]);
        }
    }
}

/// `sum(out * r)` for a fixed random projection `r`.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(tape.shape(out), &mut rng);
    let rv = tape.input(&r);
    let prod = tape.mul(out, rv).unwrap();
    tape.sum(prod)
}

#[test]
fn linear_sum_gradient_is_input() {
    let mut store = ParamStore::default();
    store.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let x = Tensor::new(vec![3], vec![4.0, 5.0, -6.0]).unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&store, 0);
    let xv = tape.input(&x);
    let p = tape.mul(w, xv).unwrap();
    let l = tape.sum(p);
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.tensors[0].grad.as_deref(), Some(&x.data[..]));
}

#[test]
fn zero_weighted_term_contributes_nothing() {
    let mut store = ParamStore::default();
    store.add("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    store.add("b", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let mut tape = Tape::new();
    let a = tape.param(&store, 0);
    let b = tape.param(&store, 1);
    let sa = tape.sum(a);
    let sb = tape.sum(b);
    let zb = tape.scale(sb, 0.0);
    let l = tape.add(sa, zb).unwrap();
    tape.backward(l, &mut store).unwrap();
    assert_eq!(store.tensors[1].grad.as_deref(), Some(&[0.0, 0.0][..]));
    assert_eq!(store.tensors[0].grad.as_deref(), Some(&[1.0, 1.0][..]));
}

#[test]
fn backward_needs_scalar() {
    let mut store = ParamStore::default();
    store.add("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let mut tape = Tape::new();
    let a = tape.param(&store, 0);
    let r = tape.relu(a);
    assert!(matches!(tape.backward(r, &mut store), Err(crate::Error::InvalidArgument(_))));
}

#[test]
fn gap_of_constant_map_is_constant() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&Tensor::new(vec![2, 3, 4, 5], vec![1.75; 120]).unwrap());
    let g = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.shape(g), &[2, 3]);
    assert!(tape.value(g).iter().all(|v| *v == 1.75));
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[2, 3, 5, 6], &mut rng);
    let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    let (stride, pad) = (2, 1);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.input(&x), tape.input(&w), tape.input(&b));
    let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
    let s = tape.shape(y).to_vec();
    assert_eq!(s, vec![2, 4, 3, 3]);
    let at = |n: usize, c: usize, i: isize, j: isize| {
        if i < 0 || j < 0 || i >= 5 || j >= 6 {
            0.0
        } else {
            x.data[((n * 3 + c) * 5 + i as usize) * 6 + j as usize]
        }
    };
    for n in 0..2 {
        for o in 0..4 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b.data[o];
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                acc += w.data[((o * 3 + c) * 3 + ky) * 3 + kx] * at(n, c, iy, ix);
                            }
                        }
                    }
                    let got = tape.value(y)[((n * 4 + o) * 3 + oy) * 3 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn gradcheck_conv() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 1)] {
        let mut rng = ChaCha8Rng::seed_from_u64(stride as u64 * 10 + k as u64);
        let mut store = ParamStore::default();
        store.add("x", rand_tensor(&[2, 2, 5, 4], &mut rng));
        store.add("w", rand_tensor(&[3, 2, k, k], &mut rng));
        store.add("b", rand_tensor(&[3], &mut rng));
        check(store, |t, s| {
            let (x, w, b) = (t.param(s, 0), t.param(s, 1), t.param(s, 2));
            let y = t.conv2d(x, w, b, stride, pad).unwrap();
            project(t, y, 1)
        });
    }
}

#[test]
fn gradcheck_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::default();
    // Keep values clear of the kink.
    let mut x = rand_tensor(&[20], &mut rng);
    x.data.iter_mut().for_each(|v| *v += 0.1 * v.signum());
    store.add("x", x);
    check(store, |t, s| {
        let x = t.param(s, 0);
        let y = t.relu(x);
        project(t, y, 2)
    });
}

#[test]
fn gradcheck_maxpool() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::default();
    store.add("x", rand_tensor(&[2, 2, 5, 6], &mut rng));
    check(store, |t, s| {
        let x = t.param(s, 0);
        let y = t.max_pool2d(x, 2).unwrap();
        project(t, y, 3)
    });
}

#[test]
fn gradcheck_global_avg_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::default();
    store.add("x", rand_tensor(&[2, 3, 3, 4], &mut rng));
    check(store, |t, s| {
        let x = t.param(s, 0);
        let y = t.global_avg_pool(x).unwrap();
        project(t, y, 4)
    });
}

#[test]
fn gradcheck_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::default();
    store.add("x", rand_tensor(&[3, 5], &mut rng));
    store.add("w", rand_tensor(&[4, 5], &mut rng));
    store.add("b", rand_tensor(&[4], &mut rng));
    check(store, |t, s| {
        let (x, w, b) = (t.param(s, 0), t.param(s, 1), t.param(s, 2));
        let y = t.linear(x, w, b).unwrap();
        project(t, y, 5)
    });
}

#[test]
fn gradcheck_add_skip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::default();
    store.add("a", rand_tensor(&[2, 3, 2], &mut rng));
    store.add("b", rand_tensor(&[2, 3, 2], &mut rng));
    check(store, |t, s| {
        let (a, b) = (t.param(s, 0), t.param(s, 1));
        // a feeds both branches, as in an identity skip.
        let y = t.add(a, b).unwrap();
        let z = t.add(y, a).unwrap();
        project(t, z, 6)
    });
}

#[test]
fn gradcheck_pll_loss_both_modes() {
    let sets: Vec<CandidateLabelSet> = ["T", "TF", "TFSM", "FS"].iter().map(|s| s.parse().unwrap()).collect();
    for mode in [WeightGradient::Frozen, WeightGradient::Full] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::default();
        store.add("logits", rand_tensor(&[4, 4], &mut rng));
        if mode == WeightGradient::Full {
            let sets = sets.clone();
            check(store, move |t, s| {
                let f = t.param(s, 0);
                t.pll_loss(f, &sets, mode).unwrap()
            });
        } else {
            // Frozen weights are not the derivative of the loss; compare with
            // the surrogate `mean_o sum_i w_i (lse - f_i)` where w is held fixed.
            let mut tape = Tape::new();
            let f = tape.param(&store, 0);
            let l = tape.pll_loss(f, &sets, mode).unwrap();
            tape.backward(l, &mut store).unwrap();
            let logits = &store.tensors[0].data;
            for (o, set) in sets.iter().enumerate() {
                let row: [f64; 4] = std::array::from_fn(|i| logits[o * 4 + i]);
                let g = crate::pll::softmax(&row);
                let w = crate::pll::candidate_weights(&row, *set);
                for k in 0..4 {
                    let want = (g[k] - w[k]) / 4.0;
                    assert!((store.tensors[0].grad.as_ref().unwrap()[o * 4 + k] - want).abs() < 1e-12);
                }
            }
        }
    }
}

fn tiny_model() -> Model<f64> {
    Model::<f64>::new(ModelConfig {
        stem_width: 3,
        stage_widths: vec![3, 4],
        blocks_per_stage: vec![1, 1],
        seed: 22,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn gradcheck_full_model() {
    let model = tiny_model();
    assert!(model.num_parameters() <= 5000);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[3, 1, 8, 6], &mut rng);
    let sets: Vec<CandidateLabelSet> = ["TF", "S", "TFM"].iter().map(|s| s.parse().unwrap()).collect();
    let names = model.params.names.clone();
    let build = |t: &mut Tape<f64>, s: &ParamStore<f64>| {
        let mut m = model.clone();
        m.params.tensors.iter_mut().zip(&s.tensors).for_each(|(d, src)| d.data.clone_from(&src.data));
        let xv = t.input(&x);
        let out = m.forward(t, xv).unwrap();
        t.pll_loss(out, &sets, WeightGradient::Full).unwrap()
    };
    check(model.params.clone(), build);
    assert!(names.iter().any(|n| n.ends_with("proj.weight")));
}

#[test]
fn f32_and_f64_forward_agree() {
    let m64 = tiny_model();
    let m32 = m64.cast::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&[2, 1, 8, 6], &mut rng);
    let a = m64.logits(&x).unwrap();
    let b = m32.logits(&x.cast()).unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        for (va, vb) in ra.iter().zip(rb) {
            assert!((va - vb).abs() < 1e-4);
        }
    }
}
