//! Naive loop references for graph ops. Each `*_case` draws one random
//! configuration from `case` and returns the largest absolute difference
//! between the graph op and its reference.

use incongruity_core::autograd::{Graph, ParamId, ParamStore, LAYER_NORM_EPS};
use incongruity_core::coattention::{affinity, attend, attention_pool};
use incongruity_core::film::GruCell;
use incongruity_core::nn::{normal_tensor, ModelRng};
use incongruity_core::Tensor;
use rand::{Rng, SeedableRng};

fn rng(case: u64) -> ModelRng {
    ModelRng::seed_from_u64(0x5eed_0000 + case)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn conv2d_ref(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xv = |n: usize, c: usize, i: isize, j: isize| {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            x.data()[((n * cin + c) * h + i as usize) * w + j as usize]
        }
    };
    let mut out = Vec::with_capacity(b * cout * oh * ow);
    for n in 0..b {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let ii = (i * stride + u) as isize - pad as isize;
                                let jj = (j * stride + v) as isize - pad as isize;
                                acc += xv(n, c, ii, jj) * k.data()[((o * cin + c) * kh + u) * kw + v];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn conv2d_case(case: u64) -> f64 {
    let mut r = rng(case);
    let (b, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let (kh, kw) = (r.random_range(1..4), r.random_range(1..4));
    let stride = r.random_range(1..3);
    let pad = r.random_range(0..2);
    // The op only accepts geometries whose output size is an exact integer.
    let side = |k: usize, out: usize| ((out - 1) * stride + k).saturating_sub(2 * pad).max(1);
    let fits = |k: usize, n: usize| n + 2 * pad >= k && (n + 2 * pad - k).is_multiple_of(stride);
    let (mut h, mut w) = (side(kh, r.random_range(1..5)), side(kw, r.random_range(1..5)));
    while !fits(kh, h) {
        h += 1;
    }
    while !fits(kw, w) {
        w += 1;
    }
    let x = normal_tensor(&[b, cin, h, w], 1.0, &mut r);
    let k = normal_tensor(&[cout, cin, kh, kw], 1.0, &mut r);
    let mut g = Graph::new();
    let (xv, kv) = (g.input(x.clone()), g.input(k.clone()));
    let y = g.conv2d(xv, kv, stride, pad).unwrap();
    let expected = conv2d_ref(&x, &k, stride, pad);
    max_diff(g.value(y).data(), &expected)
}

pub fn layer_norm_case(case: u64) -> f64 {
    let mut r = rng(100 + case);
    let (n, d) = (r.random_range(1..6), r.random_range(2..10));
    let x = normal_tensor(&[n, d], 2.0, &mut r);
    let gain = normal_tensor(&[d], 1.0, &mut r);
    let bias = normal_tensor(&[d], 1.0, &mut r);
    let mut expected = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = &x.data()[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for j in 0..d {
            expected.push((row[j] - mean) / (var + LAYER_NORM_EPS).sqrt() * gain.data()[j] + bias.data()[j]);
        }
    }
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.input(x), g.input(gain), g.input(bias));
    let y = g.layer_norm(xv, gv, bv).unwrap();
    max_diff(g.value(y).data(), &expected)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out[k] = b[k] + Σ_i v[i] W[i][k]` with `W` stored `in×out`.
fn affine(store: &ParamStore, w: ParamId, b: ParamId, v: &[f64]) -> Vec<f64> {
    let (w, b) = (store.value(w), store.value(b));
    let out = b.numel();
    (0..out)
        .map(|k| b.data()[k] + v.iter().enumerate().map(|(i, x)| x * w.data()[i * out + k]).sum::<f64>())
        .collect()
}

pub fn gru_step_case(case: u64) -> f64 {
    let mut r = rng(200 + case);
    let (input, hidden) = (r.random_range(1..6), r.random_range(1..6));
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, "gru", input, hidden, &mut r).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = normal_tensor(&shape, 0.7, &mut r);
    }
    let x = normal_tensor(&[input], 1.0, &mut r);
    let h = normal_tensor(&[hidden], 0.5, &mut r);

    let xh: Vec<f64> = x.data().iter().chain(h.data()).copied().collect();
    let z: Vec<f64> = affine(&store, cell.update.weight, cell.update.bias, &xh).into_iter().map(sigmoid).collect();
    let rg: Vec<f64> = affine(&store, cell.reset.weight, cell.reset.bias, &xh).into_iter().map(sigmoid).collect();
    let xrh: Vec<f64> = x
        .data()
        .iter()
        .copied()
        .chain(h.data().iter().zip(&rg).map(|(a, b)| a * b))
        .collect();
    let n: Vec<f64> = affine(&store, cell.candidate.weight, cell.candidate.bias, &xrh)
        .into_iter()
        .map(f64::tanh)
        .collect();
    let expected: Vec<f64> = (0..hidden).map(|k| (1.0 - z[k]) * n[k] + z[k] * h.data()[k]).collect();

    let mut g = Graph::new();
    let (xv, hv) = (g.input(x), g.input(h));
    let out = cell.step(&mut g, &store, xv, hv).unwrap();
    max_diff(g.value(out).data(), &expected)
}

pub fn coattention_case(case: u64) -> f64 {
    let mut r = rng(300 + case);
    let (n, m, d) = (r.random_range(1..7), r.random_range(1..7), r.random_range(1..6));
    let p = normal_tensor(&[n, d], 1.0, &mut r);
    let q = normal_tensor(&[m, d], 1.0, &mut r);
    let w = normal_tensor(&[d, d], 0.6, &mut r);
    let mut text_mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
    text_mask[r.random_range(0..n)] = true;
    let attr_mask: Vec<bool> = (0..m).map(|_| r.random_bool(0.7)).collect();

    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for a in 0..d {
                for b in 0..d {
                    s += p.data()[i * d + a] * w.data()[a * d + b] * q.data()[j * d + b];
                }
            }
            c[i * m + j] = s.tanh();
        }
    }
    let alpha: Vec<f64> = (0..m)
        .map(|j| {
            if !attr_mask[j] {
                return 0.0;
            }
            (0..n).filter(|&i| text_mask[i]).map(|i| c[i * m + j]).fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let q_att: Vec<f64> = (0..d).map(|k| (0..m).map(|j| alpha[j] * q.data()[j * d + k]).sum()).collect();

    let mut g = Graph::new();
    let (pv, qv, wv) = (g.input(p), g.input(q), g.input(w));
    let cv = affinity(&mut g, pv, qv, wv).unwrap();
    let av = attention_pool(&mut g, cv, &text_mask, &attr_mask).unwrap();
    let ov = attend(&mut g, av, qv).unwrap();
    max_diff(g.value(cv).data(), &c)
        .max(max_diff(g.value(av).data(), &alpha))
        .max(max_diff(g.value(ov).data(), &q_att))
}
