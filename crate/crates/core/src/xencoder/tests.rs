use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{grad_check, Tensor};

type Mat = Vec<Vec<f64>>;

fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn small_cfg(d: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        d,
        heads,
        layers,
        ffn_hidden: 10,
        ..ModelConfig::desk()
    }
}

/// Encoder weights with non-trivial layer-norm affine parameters and biases.
fn encoder_store(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    init_encoder(&mut s, cfg, &mut rng).unwrap();
    for (name, t) in s.names().to_vec().into_iter().zip(s.tensors_mut()) {
        if name.ends_with(".g") || name.ends_with(".b") || name.ends_with("b1") || name.ends_with("b2") {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        if name.ends_with(".wo") || name.ends_with("ffn.w2") {
            *t = t.map(|v| v * 8.0);
        }
    }
    s
}

fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

fn madd(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn oracle_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let dk = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            (0..v[0].len())
                .map(|c| w.iter().zip(v).map(|(wj, vj)| wj / z * vj[c]).sum())
                .collect()
        })
        .collect()
}

fn oracle_mh(q: &Mat, k: &Mat, v: &Mat, s: &ParamStore<f64>, prefix: &str, heads: usize) -> Mat {
    let w = |n: &str| to_mat(s.get(&format!("{prefix}.{n}")).unwrap());
    let (qp, kp, vp) = (mm(q, &w("wq")), mm(k, &w("wk")), mm(v, &w("wv")));
    let dh = qp[0].len() / heads;
    let mut cat: Mat = vec![Vec::new(); q.len()];
    for h in 0..heads {
        let o = oracle_attention(&cols(&qp, h * dh, dh), &cols(&kp, h * dh, dh), &cols(&vp, h * dh, dh));
        for (row, part) in cat.iter_mut().zip(o) {
            row.extend(part);
        }
    }
    mm(&cat, &w("wo"))
}

fn oracle_ln(x: &Mat, s: &ParamStore<f64>, prefix: &str) -> Mat {
    let g = s.get(&format!("{prefix}.g")).unwrap().row(0).to_vec();
    let b = s.get(&format!("{prefix}.b")).unwrap().row(0).to_vec();
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(c, v)| (v - mu) / (var + LAYER_NORM_EPS).sqrt() * g[c] + b[c])
                .collect()
        })
        .collect()
}

fn oracle_ffn(x: &Mat, s: &ParamStore<f64>, l: usize) -> Mat {
    let w = |n: &str| to_mat(s.get(&layer_name(l, n)).unwrap());
    let bias = |m: Mat, n: &str| -> Mat {
        let b = s.get(&layer_name(l, n)).unwrap().row(0).to_vec();
        m.into_iter()
            .map(|r| r.into_iter().zip(&b).map(|(v, bb)| v + bb).collect())
            .collect()
    };
    let h = bias(mm(x, &w("ffn.w1")), "ffn.b1");
    let h: Mat = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    bias(mm(&h, &w("ffn.w2")), "ffn.b2")
}

/// One layer written out step by step.
fn oracle_layer(x: &Mat, y: &Mat, px: &Mat, py: &Mat, s: &ParamStore<f64>, l: usize, heads: usize) -> (Mat, Mat) {
    let sa = layer_name(l, "sa");
    let ca = layer_name(l, "ca");
    let nx = madd(&oracle_ln(x, s, &layer_name(l, "ln1")), px);
    let ny = madd(&oracle_ln(y, s, &layer_name(l, "ln1")), py);
    let x1 = madd(x, &oracle_mh(&nx, &nx, &nx, s, &sa, heads));
    let y1 = madd(y, &oracle_mh(&ny, &ny, &ny, s, &sa, heads));
    let nx = madd(&oracle_ln(&x1, s, &layer_name(l, "ln2")), px);
    let ny = madd(&oracle_ln(&y1, s, &layer_name(l, "ln2")), py);
    let x2 = madd(&x1, &oracle_mh(&nx, &ny, &ny, s, &ca, heads));
    let y2 = madd(&y1, &oracle_mh(&ny, &nx, &nx, s, &ca, heads));
    let x3 = madd(&x2, &oracle_ffn(&oracle_ln(&x2, s, &layer_name(l, "ln3")), s, l));
    let y3 = madd(&y2, &oracle_ffn(&oracle_ln(&y2, s, &layer_name(l, "ln3")), s, l));
    (x3, y3)
}

fn max_diff(t: &Tensor<f64>, m: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for (r, row) in m.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((t.get(r, c) - v).abs());
        }
    }
    worst
}

struct Inputs {
    fx: Tensor<f64>,
    fy: Tensor<f64>,
    px: Tensor<f64>,
    py: Tensor<f64>,
}

fn inputs(m: usize, n: usize, d: usize, seed: u64) -> Inputs {
    Inputs {
        fx: rand_tensor(m, d, seed),
        fy: rand_tensor(n, d, seed + 1),
        px: rand_tensor(m, d, seed + 2).map(|v| 0.5 * v),
        py: rand_tensor(n, d, seed + 3).map(|v| 0.5 * v),
    }
}

fn run_encoder(s: &ParamStore<f64>, cfg: &ModelConfig, inp: &Inputs, swap: bool) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let p = s.bind(&mut g, false);
    let (a, b, pa, pb) = if swap {
        (&inp.fy, &inp.fx, &inp.py, &inp.px)
    } else {
        (&inp.fx, &inp.fy, &inp.px, &inp.py)
    };
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let (pa, pb) = (g.constant(pa.clone()), g.constant(pb.clone()));
    let (x, y) = encode_projected(&mut g, a, b, pa, pb, cfg, &p, None).unwrap().last();
    (g.value(x).clone(), g.value(y).clone())
}

fn attention_store(d: usize, seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in ["wq", "wk", "wv", "wo"] {
        s.insert_uniform(format!("att.{n}"), d, d, 1.0, &mut rng).unwrap();
    }
    s
}

fn run_mh(s: &ParamStore<f64>, heads: usize, q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let p = s.bind(&mut g, false);
    let w = AttentionWeights::bind(&p, "att", heads).unwrap();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let mut trace = Vec::new();
    let out = mh_attention(&mut g, qv, kv, vv, &w, Some(&mut trace)).unwrap();
    let maps = trace.iter().map(|t| g.value(*t).clone()).collect();
    (g.value(out).clone(), maps)
}

#[test]
fn single_key_attention_passes_values_through() {
    let s = attention_store(8, 1);
    let q = rand_tensor(3, 8, 2);
    let k = rand_tensor(1, 8, 3);
    let v = rand_tensor(1, 8, 4);
    let (out, maps) = run_mh(&s, 2, &q, &k, &v);
    assert!(maps.iter().all(|m| m.data().iter().all(|w| *w == 1.0)));
    let vw = to_mat(&v.matmul(s.get("att.wv").unwrap()).unwrap());
    let expect = mm(&vw, &to_mat(s.get("att.wo").unwrap()));
    for r in 0..3 {
        for c in 0..8 {
            assert!((out.get(r, c) - expect[0][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let s = attention_store(8, 5);
    let q = rand_tensor(3, 8, 6);
    let row = rand_tensor(1, 8, 7);
    let k = Tensor::from_fn(5, 8, |_, c| row.get(0, c));
    let v = rand_tensor(5, 8, 8);
    let (_, maps) = run_mh(&s, 4, &q, &k, &v);
    assert_eq!(maps.len(), 4);
    for m in maps {
        assert!(m.data().iter().all(|w| (w - 0.2).abs() < 1e-15));
    }
}

#[test]
fn multi_head_attention_matches_formula_oracle() {
    let s = attention_store(8, 9);
    let q = rand_tensor(4, 8, 10);
    let k = rand_tensor(6, 8, 11);
    let v = rand_tensor(6, 8, 12);
    let (out, _) = run_mh(&s, 2, &q, &k, &v);
    let expect = oracle_mh(&to_mat(&q), &to_mat(&k), &to_mat(&v), &s, "att", 2);
    assert!(max_diff(&out, &expect) < 1e-12);
}

#[test]
fn attention_rejects_width_not_divisible_by_heads() {
    let s = attention_store(6, 13);
    let mut g = Graph::<f64>::new();
    let p = s.bind(&mut g, false);
    let w = AttentionWeights::bind(&p, "att", 4).unwrap();
    let x = g.constant(rand_tensor(2, 6, 14));
    assert!(mh_attention(&mut g, x, x, x, &w, None).is_err());
    let bad = g.constant(rand_tensor(2, 5, 15));
    let w = AttentionWeights::bind(&p, "att", 2).unwrap();
    assert!(mh_attention(&mut g, bad, x, x, &w, None).is_err());
}

#[test]
fn one_layer_matches_unrolled_oracle() {
    let cfg = small_cfg(8, 2, 1);
    let s = encoder_store(&cfg, 20);
    let inp = inputs(3, 4, 8, 21);
    let (x, y) = run_encoder(&s, &cfg, &inp, false);
    let (ex, ey) = oracle_layer(
        &to_mat(&inp.fx),
        &to_mat(&inp.fy),
        &to_mat(&inp.px),
        &to_mat(&inp.py),
        &s,
        0,
        2,
    );
    assert!(max_diff(&x, &ex) < 1e-12);
    assert!(max_diff(&y, &ey) < 1e-12);
}

#[test]
fn positional_encoding_count_must_match_keypoints() {
    let cfg = small_cfg(8, 2, 1);
    let s = encoder_store(&cfg, 22);
    let mut g = Graph::new();
    let p = s.bind(&mut g, false);
    let fx = g.constant(rand_tensor(3, 8, 23));
    let fy = g.constant(rand_tensor(4, 8, 24));
    let short = g.constant(rand_tensor(2, 8, 25));
    let err = cross_encoder_layer(&mut g, fx, fy, short, fy, &p, 0, 2, None);
    assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
}

#[test]
fn zeroed_output_projections_leave_features_unchanged() {
    let cfg = small_cfg(8, 2, 3);
    let mut s = encoder_store(&cfg, 30);
    for name in output_projection_names(&cfg) {
        let t = s.get_mut(&name).unwrap();
        *t = t.map(|_| 0.0);
    }
    let inp = inputs(5, 7, 8, 31);
    let (x, y) = run_encoder(&s, &cfg, &inp, false);
    assert_eq!(x, inp.fx);
    assert_eq!(y, inp.fy);
}

#[test]
fn swapping_clouds_swaps_outputs_exactly() {
    let cfg = small_cfg(8, 2, 3);
    let s = encoder_store(&cfg, 40);
    let inp = inputs(5, 7, 8, 41);
    let (x, y) = run_encoder(&s, &cfg, &inp, false);
    let (y2, x2) = run_encoder(&s, &cfg, &inp, true);
    assert_eq!(x, x2);
    assert_eq!(y, y2);
}

#[test]
fn zero_layers_return_input_and_depth_matters() {
    let inp = inputs(4, 5, 8, 50);
    let cfg0 = small_cfg(8, 2, 0);
    let s0 = encoder_store(&cfg0, 51);
    let (x, y) = run_encoder(&s0, &cfg0, &inp, false);
    assert_eq!((x, y), (inp.fx.clone(), inp.fy.clone()));

    let cfg6 = small_cfg(8, 2, 6);
    let s6 = encoder_store(&cfg6, 52);
    let cfg2 = small_cfg(8, 2, 2);
    // The two-layer model is the first two layers of the six-layer one.
    let mut s2 = ParamStore::new();
    for (name, t) in s6.iter() {
        if name.starts_with("enc.0.") || name.starts_with("enc.1.") {
            s2.insert(name, t.clone()).unwrap();
        }
    }
    let (x2, _) = run_encoder(&s2, &cfg2, &inp, false);
    let (x6, _) = run_encoder(&s6, &cfg6, &inp, false);
    assert!(x2.max_abs_diff(&x6) > 1e-3);
}

#[test]
fn permuting_keypoints_permutes_outputs() {
    let cfg = small_cfg(8, 2, 2);
    let s = encoder_store(&cfg, 60);
    let inp = inputs(6, 5, 8, 61);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor<f64>| Tensor::from_fn(t.rows(), t.cols(), |r, c| t.get(perm[r], c));
    let shuffled = Inputs {
        fx: permute(&inp.fx),
        fy: inp.fy.clone(),
        px: permute(&inp.px),
        py: inp.py.clone(),
    };
    let (x, y) = run_encoder(&s, &cfg, &inp, false);
    let (xs, ys) = run_encoder(&s, &cfg, &shuffled, false);
    assert!(permute(&x).max_abs_diff(&xs) < 1e-12);
    assert!(y.max_abs_diff(&ys) < 1e-12);
}

#[test]
fn attention_rows_sum_to_one_in_every_layer() {
    let cfg = small_cfg(8, 4, 2);
    let s = encoder_store(&cfg, 70);
    let inp = inputs(5, 6, 8, 71);
    let mut g = Graph::new();
    let p = s.bind(&mut g, false);
    let (a, b) = (g.constant(inp.fx.clone()), g.constant(inp.fy.clone()));
    let (pa, pb) = (g.constant(inp.px.clone()), g.constant(inp.py.clone()));
    let mut trace = Vec::new();
    encode_projected(&mut g, a, b, pa, pb, &cfg, &p, Some(&mut trace)).unwrap();
    // Per layer: self x, self y, cross x, cross y, each with 4 heads.
    assert_eq!(trace.len(), 2 * 4 * 4);
    for t in trace {
        let m = g.value(t);
        for r in 0..m.rows() {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_stack_gradients_match_finite_differences() {
    let cfg = small_cfg(6, 2, 2);
    let s = encoder_store(&cfg, 80);
    let inp = inputs(3, 4, 6, 81);
    let proj_x = rand_tensor(6, 1, 82);
    let proj_y = rand_tensor(6, 1, 83);
    let mut tensors = vec![inp.fx.clone(), inp.fy.clone()];
    tensors.extend(s.tensors().iter().cloned());
    let report = grad_check(
        |g, v| {
            let p = s.bind_vars(v[2..].to_vec())?;
            let pa = g.constant(inp.px.clone());
            let pb = g.constant(inp.py.clone());
            let (x, y) = encode_projected(g, v[0], v[1], pa, pb, &cfg, &p, None)?.last();
            let wx = g.constant(proj_x.clone());
            let wy = g.constant(proj_y.clone());
            let sx = g.matmul(x, wx)?;
            let sy = g.matmul(y, wy)?;
            let sx = g.sum(sx)?;
            let sy = g.sum(sy)?;
            let sy = g.mul(sy, sy)?;
            g.add(sx, sy)
        },
        &tensors,
        1e-5,
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}
