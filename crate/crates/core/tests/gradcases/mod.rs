//! Gradient-check cases shared by the `gradcheck` and `acceptance` targets.

use crate::common::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stereoforge::selection::DisparityRange;
use stereoforge::tensorcore::{Graph, Mode, Tensor, Var, BN_EPS};

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const INSTANCES: usize = 20;

type Oracle = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;
type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// One random instance of an op under test.
pub struct Case {
    pub inputs: Vec<(Vec<usize>, Vec<f64>)>,
    pub build: Build,
    pub oracle: Oracle,
}

/// Worst relative error over all inputs of one instance. The loss is a
/// random projection `sum(r * op(inputs))`.
pub fn case_error(case: &Case, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|(s, v)| g.param(to_tensor(s, v))).collect();
    let out = (case.build)(&mut g, &vars);
    let out_shape = g.value(out).shape().to_vec();
    let (r_t, r) = rand_tensor(rng, &out_shape, -1.0, 1.0);
    let rv = g.input(r_t);
    let prod = g.mul(out, rv).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(&case.inputs[i].0));
        let mut all: Vec<Vec<f64>> = case.inputs.iter().map(|(_, v)| v.clone()).collect();
        let numeric = numeric_grad(&case.inputs[i].1, H, |x| {
            all[i] = x.to_vec();
            dot(&r, &(case.oracle)(&all))
        });
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// Draws instances until `INSTANCES` valid ones were checked; `make` returns
/// `None` for draws that land on a non-differentiable point.
fn run(name: &str, seed: u64, mut make: impl FnMut(&mut ChaCha8Rng) -> Option<Case>) {
    let mut rng = rng(seed);
    let (mut done, mut draws, mut worst) = (0, 0, 0.0f64);
    while done < INSTANCES {
        draws += 1;
        assert!(draws < 50 * INSTANCES, "{name}: too many resamples");
        let Some(case) = make(&mut rng) else { continue };
        let e = case_error(&case, &mut rng);
        worst = worst.max(e);
        done += 1;
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn away_from(v: &[f64], points: f64) -> bool {
    v.iter().all(|x| x.abs() > points)
}

pub fn conv2d_gradients() {
    run("conv2d", 1, |rng| {
        let (n, ci, co) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
        let k = [1, 2, 3][rng.random_range(0..3)];
        let stride = dims(rng, 1, 2);
        let pad = rng.random_range(0..k);
        // pick an input size with an exact output
        let h = (1..=6).find(|&h| h + 2 * pad >= k && (h + 2 * pad - k) % stride == 0 && h >= 2)?;
        let w = (h..=6).rev().find(|&w| w + 2 * pad >= k && (w + 2 * pad - k) % stride == 0)?;
        let (_, x) = rand_tensor(rng, &[n, ci, h, w], -1.0, 1.0);
        let (_, wt) = rand_tensor(rng, &[co, ci, k, k], -1.0, 1.0);
        let (_, b) = rand_tensor(rng, &[co], -1.0, 1.0);
        let xs = [n, ci, h, w];
        let ws = [co, ci, k, k];
        Some(Case {
            inputs: vec![(xs.to_vec(), x), (ws.to_vec(), wt), (vec![co], b)],
            build: Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()),
            oracle: Box::new(move |a| conv2d(&a[0], xs, &a[1], ws, Some(&a[2]), stride, pad).0),
        })
    });
}

pub fn deconv2d_gradients() {
    run("deconv2d", 2, |rng| {
        let s = dims(rng, 1, 3);
        let (n, ci, co, h, w) = (dims(rng, 1, 2), dims(rng, 1, 2), dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
        let xs = [n, ci, h, w];
        let ws = [ci, co, 2 * s, 2 * s];
        let (_, x) = rand_tensor(rng, &xs, -1.0, 1.0);
        let (_, wt) = rand_tensor(rng, &ws, -1.0, 1.0);
        Some(Case {
            inputs: vec![(xs.to_vec(), x), (ws.to_vec(), wt)],
            build: Box::new(move |g, v| g.deconv2d(v[0], v[1], s, s / 2).unwrap()),
            oracle: Box::new(move |a| deconv2d(&a[0], xs, &a[1], ws, s, s / 2).0),
        })
    });
}

pub fn max_pool_gradients() {
    run("max_pool2d", 3, |rng| {
        let (k, stride) = [(2, 2), (2, 1), (3, 1), (3, 3)][rng.random_range(0..4)];
        let (n, c) = (dims(rng, 1, 2), dims(rng, 1, 2));
        let h = k + stride * dims(rng, 0, 2);
        let w = k + stride * dims(rng, 0, 2);
        let xs = [n, c, h, w];
        let (_, x) = rand_tensor(rng, &xs, -1.0, 1.0);
        if pool_min_gap(&x, xs, k, stride) < 4.0 * H {
            return None;
        }
        Some(Case {
            inputs: vec![(xs.to_vec(), x)],
            build: Box::new(move |g, v| g.max_pool2d(v[0], k, stride).unwrap()),
            oracle: Box::new(move |a| max_pool(&a[0], xs, k, stride)),
        })
    });
}

pub fn fully_connected_gradients() {
    run("fully_connected", 4, |rng| {
        let (n, d, m) = (dims(rng, 1, 4), dims(rng, 1, 6), dims(rng, 1, 6));
        let (_, x) = rand_tensor(rng, &[n, d], -1.0, 1.0);
        let (_, wt) = rand_tensor(rng, &[d, m], -1.0, 1.0);
        let (_, b) = rand_tensor(rng, &[m], -1.0, 1.0);
        Some(Case {
            inputs: vec![(vec![n, d], x), (vec![d, m], wt), (vec![m], b)],
            build: Box::new(|g, v| g.fully_connected(v[0], v[1], v[2]).unwrap()),
            oracle: Box::new(move |a| fully_connected(&a[0], n, d, &a[1], m, &a[2])),
        })
    });
}

pub fn batch_norm_gradients() {
    run("batch_norm", 5, |rng| {
        let (n, c, h, w) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 2, 4), dims(rng, 2, 4));
        let xs = [n, c, h, w];
        let (_, x) = rand_tensor(rng, &xs, -2.0, 2.0);
        let (_, gamma) = rand_tensor(rng, &[c], 0.5, 1.5);
        let (_, beta) = rand_tensor(rng, &[c], -1.0, 1.0);
        Some(Case {
            inputs: vec![(xs.to_vec(), x), (vec![c], gamma), (vec![c], beta)],
            build: Box::new(|g, v| g.batch_norm(v[0], v[1], v[2], BN_EPS, Mode::Train, None).unwrap().0),
            oracle: Box::new(move |a| batch_norm(&a[0], xs, &a[1], &a[2], BN_EPS as f64)),
        })
    });
}

pub fn softmax_gradients() {
    run("softmax_channels", 6, |rng| {
        let xs = [dims(rng, 1, 2), dims(rng, 1, 6), dims(rng, 1, 3), dims(rng, 1, 3)];
        let (_, x) = rand_tensor(rng, &xs, -3.0, 3.0);
        Some(Case {
            inputs: vec![(xs.to_vec(), x)],
            build: Box::new(|g, v| g.softmax_channels(v[0]).unwrap()),
            oracle: Box::new(move |a| softmax(&a[0], xs)),
        })
    });
}

pub fn relu_gradients() {
    run("relu", 7, |rng| {
        let n = dims(rng, 1, 30);
        let (_, x) = rand_tensor(rng, &[n], -1.0, 1.0);
        if !away_from(&x, 2.0 * H) {
            return None;
        }
        Some(Case {
            inputs: vec![(vec![n], x)],
            build: Box::new(|g, v| g.relu(v[0]).unwrap()),
            oracle: Box::new(|a| a[0].iter().map(|v| v.max(0.0)).collect()),
        })
    });
}

pub fn dropout_gradients() {
    run("dropout", 8, |rng| {
        let n = dims(rng, 1, 40);
        let seed: u64 = rng.random();
        let (_, x) = rand_tensor(rng, &[n], -1.0, 1.0);
        // the mask the op will draw, read off an all-ones input with the same seed
        let mut g = Graph::new();
        let ones = g.input(Tensor::full(&[n], 1.0));
        let m = g.dropout(ones, 0.5, Mode::Train, &mut crate::common::rng(seed)).unwrap();
        let mask = f64s(g.value(m));
        assert!(mask.iter().all(|&v| v == 0.0 || v == 2.0));
        Some(Case {
            inputs: vec![(vec![n], x)],
            build: Box::new(move |g, v| g.dropout(v[0], 0.5, Mode::Train, &mut crate::common::rng(seed)).unwrap()),
            oracle: Box::new(move |a| a[0].iter().zip(&mask).map(|(x, m)| x * m).collect()),
        })
    });
}

pub fn l1_loss_gradients() {
    run("l1_loss", 9, |rng| {
        let n = dims(rng, 1, 30);
        let (_, o) = rand_tensor(rng, &[n], -1.0, 1.0);
        let (_, y) = rand_tensor(rng, &[n], -1.0, 1.0);
        let diff: Vec<f64> = o.iter().zip(&y).map(|(a, b)| a - b).collect();
        if !away_from(&diff, 4.0 * H) {
            return None;
        }
        Some(Case {
            inputs: vec![(vec![n], o), (vec![n], y)],
            build: Box::new(|g, v| g.l1_loss(v[0], v[1]).unwrap()),
            oracle: Box::new(move |a| vec![a[0].iter().zip(&a[1]).map(|(p, q)| (p - q).abs()).sum::<f64>() / n as f64]),
        })
    });
}

pub fn elementwise_gradients() {
    run("add/mul/sum/reshape", 10, |rng| {
        let (a, b) = (dims(rng, 1, 4), dims(rng, 1, 4));
        let (_, x) = rand_tensor(rng, &[a, b], -1.0, 1.0);
        let (_, y) = rand_tensor(rng, &[a, b], -1.0, 1.0);
        Some(Case {
            inputs: vec![(vec![a, b], x), (vec![a, b], y)],
            // (x + y) * x, reshaped, plus a repeated use of x in a scalar sum
            build: Box::new(move |g, v| {
                let s = g.add(v[0], v[1]).unwrap();
                let p = g.mul(s, v[0]).unwrap();
                let p = g.reshape(p, &[a * b]).unwrap();
                let t = g.sum(v[0]).unwrap();
                let t = g.reshape(t, &[1]).unwrap();
                let tail = g.mul(p, p).unwrap();
                let total = g.sum(tail).unwrap();
                g.add(total, t).unwrap()
            }),
            oracle: Box::new(|v| {
                let p: Vec<f64> = v[0].iter().zip(&v[1]).map(|(x, y)| (x + y) * x).collect();
                vec![p.iter().map(|q| q * q).sum::<f64>() + v[0].iter().sum::<f64>()]
            }),
        })
    });
}

pub fn selection_gradients() {
    run("shifted_stack + selection", 11, |rng| {
        let w = dims(rng, 4, 6);
        let d_min = -(dims(rng, 0, 2) as i32);
        let d_max = dims(rng, 0, 2) as i32;
        let has_empty = rng.random::<bool>();
        let range = DisparityRange::new(d_min, d_max, has_empty).unwrap();
        let (n, c, h) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
        let xs = [n, c, h, w];
        let ps = [n, range.channel_count(), h, w];
        let (_, img) = rand_tensor(rng, &xs, 0.0, 1.0);
        let (_, logits) = rand_tensor(rng, &ps, -2.0, 2.0);
        let (first, dc, chans) = (range.first_disparity_channel(), range.disparity_count(), range.channel_count());
        Some(Case {
            inputs: vec![(xs.to_vec(), img), (ps.to_vec(), logits)],
            build: Box::new(move |g, v| {
                let probs = g.softmax_channels(v[1]).unwrap();
                let stack = g.shifted_stack(v[0], &range).unwrap();
                g.selection(stack, probs, &range).unwrap()
            }),
            oracle: Box::new(move |a| selection(&a[0], xs, &softmax(&a[1], ps), chans, first, d_min, dc)),
        })
    });
}

pub fn selection_gradients_raw_probabilities() {
    run("selection (raw probs)", 12, |rng| {
        let range = DisparityRange::new(-2, 3, true).unwrap();
        let (n, c, h, w) = (1, dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 4, 6));
        let xs = [n, c, h, w];
        let ps = [n, range.channel_count(), h, w];
        let (_, img) = rand_tensor(rng, &xs, 0.0, 1.0);
        let (_, probs) = rand_tensor(rng, &ps, 0.0, 1.0);
        let (first, dc, chans) = (range.first_disparity_channel(), range.disparity_count(), range.channel_count());
        Some(Case {
            inputs: vec![(xs.to_vec(), img), (ps.to_vec(), probs)],
            build: Box::new(move |g, v| {
                let stack = g.shifted_stack(v[0], &range).unwrap();
                g.selection(stack, v[1], &range).unwrap()
            }),
            oracle: Box::new(move |a| selection(&a[0], xs, &a[1], chans, first, -2, dc)),
        })
    });
}

/// conv -> relu -> pool -> fc -> l1 against a target, all parameters checked.
pub fn composite_pipeline_gradients() {
    run("conv-relu-pool-fc-l1", 13, |rng| {
        let (n, ci, co, h, w, m) = (2, 2, 3, 4, 4, 3);
        let xs = [n, ci, h, w];
        let ws = [co, ci, 3, 3];
        let (_, x) = rand_tensor(rng, &xs, -1.0, 1.0);
        let (_, wt) = rand_tensor(rng, &ws, -1.0, 1.0);
        let (_, b) = rand_tensor(rng, &[co], -0.5, 0.5);
        let d = co * (h / 2) * (w / 2);
        let (_, fw) = rand_tensor(rng, &[d, m], -1.0, 1.0);
        let (_, fb) = rand_tensor(rng, &[m], -0.5, 0.5);
        let (_, target) = rand_tensor(rng, &[n * m], -1.0, 1.0);
        let forward = move |a: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
            let (pre, os) = conv2d(&a[0], xs, &a[1], ws, Some(&a[2]), 1, 1);
            let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let pooled = max_pool(&act, os, 2, 2);
            let out = fully_connected(&pooled, n, d, &a[3], m, &a[4]);
            (pre, act, out)
        };
        let all = vec![x.clone(), wt.clone(), b.clone(), fw.clone(), fb.clone()];
        let (pre, act, out) = forward(&all);
        let diff: Vec<f64> = out.iter().zip(&target).map(|(o, t)| o - t).collect();
        // stay away from relu kinks, pool ties and l1 zero crossings; the
        // margins bound how far a single h-step can move each quantity
        if !away_from(&pre, 4.0 * H) || pool_min_gap(&act, [n, co, h, w], 2, 2) < 4.0 * H || !away_from(&diff, 30.0 * H)
        {
            return None;
        }
        let tgt = target.clone();
        Some(Case {
            inputs: vec![(xs.to_vec(), x), (ws.to_vec(), wt), (vec![co], b), (vec![d, m], fw), (vec![m], fb)],
            build: Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
                let y = g.relu(y).unwrap();
                let y = g.max_pool2d(y, 2, 2).unwrap();
                let y = g.reshape(y, &[n, d]).unwrap();
                let y = g.fully_connected(y, v[3], v[4]).unwrap();
                let t = g.input(to_tensor(&[n, m], &tgt));
                g.l1_loss(y, t).unwrap()
            }),
            oracle: Box::new(move |a| {
                let out = forward(a).2;
                vec![out.iter().zip(&target).map(|(o, t)| (o - t).abs()).sum::<f64>() / (n * m) as f64]
            }),
        })
    });
}

pub fn shared_subexpression_gradients_add_up() {
    // loss = sum(x * x) -> grad 2x
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
}

// only the acceptance target iterates the list
#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("conv2d_gradients", conv2d_gradients),
    ("deconv2d_gradients", deconv2d_gradients),
    ("max_pool_gradients", max_pool_gradients),
    ("fully_connected_gradients", fully_connected_gradients),
    ("batch_norm_gradients", batch_norm_gradients),
    ("softmax_gradients", softmax_gradients),
    ("relu_gradients", relu_gradients),
    ("dropout_gradients", dropout_gradients),
    ("l1_loss_gradients", l1_loss_gradients),
    ("elementwise_gradients", elementwise_gradients),
    ("selection_gradients", selection_gradients),
    ("selection_gradients_raw_probabilities", selection_gradients_raw_probabilities),
    ("composite_pipeline_gradients", composite_pipeline_gradients),
    ("shared_subexpression_gradients_add_up", shared_subexpression_gradients_add_up),
];
