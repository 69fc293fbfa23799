use amlb_core::nn::*;
use amlb_core::Result;

type T = Tensor<f64>;

fn ref_matmul(a: &T, b: &T) -> T {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a.get(i, p) * b.get(p, j);
            }
        }
    }
    Tensor::matrix(n, m, out).unwrap()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = RngStream::new(1, 0);
    for (n, k, m) in [(1, 1, 1), (3, 5, 2), (8, 64, 8), (17, 3, 9)] {
        let a: T = r.normal_tensor(&[n, k]);
        let b: T = r.normal_tensor(&[k, m]);
        let d = a.matmul(&b).unwrap().max_abs_diff(&ref_matmul(&a, &b)).unwrap();
        assert!(d < 1e-12, "{n}x{k}x{m}: {d}");
    }
}

#[test]
fn linear_identity_and_zero() {
    let mut r = RngStream::new(2, 0);
    let x: T = r.normal_tensor(&[4, 6]);
    assert_eq!(linear(&x, &Tensor::identity(6), None).unwrap(), x);
    let b = Tensor::from_f64(&[1, 3], &[1.0, -2.0, 0.5]).unwrap();
    let y = linear(&x, &Tensor::zeros(&[6, 3]), Some(&b)).unwrap();
    for row in 0..4 {
        assert_eq!(y.row(row), b.data());
    }
    assert!(linear(&x, &Tensor::<f64>::zeros(&[5, 3]), None).is_err());
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut r = RngStream::new(3, 0);
    let x: T = r.normal_tensor(&[5, 16]).scale(7.0);
    let mut g = Graph::new();
    let v = g.constant(x);
    let n = g.layer_norm(v, 0.0).unwrap();
    let out = g.value(n);
    for row in 0..5 {
        let vals = out.row(row);
        let mean = vals.iter().sum::<f64>() / 16.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-10);
    }
}

fn ref_attention(q: &T, k: &T, v: &T) -> T {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = vec![0.0; q.rows() * v.cols()];
    for i in 0..q.rows() {
        let s: Vec<f64> = (0..k.rows())
            .map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() * scale)
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..k.rows() {
            for c in 0..v.cols() {
                out[i * v.cols() + c] += e[j] / z * v.get(j, c);
            }
        }
    }
    Tensor::matrix(q.rows(), v.cols(), out).unwrap()
}

#[test]
fn attention_matches_loop_reference() {
    let mut store = ParamStore::<f64>::new();
    let mut r = RngStream::new(4, 0);
    let mha = MultiHeadAttention::new(&mut store, "a", 6, 5, 8, 2, &mut r).unwrap();
    let q: T = r.normal_tensor(&[3, 6]);
    let kv: T = r.normal_tensor(&[4, 5]);
    let mut g = Graph::new();
    let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
    let y = mha.forward(&mut g, &store, qv, kvv, 1).unwrap();
    let pq = q.matmul(store.value(mha.wq.w)).unwrap();
    let pk = kv.matmul(store.value(mha.wk.w)).unwrap();
    let pv = kv.matmul(store.value(mha.wv.w)).unwrap();
    let mut merged = vec![0.0; 3 * 8];
    for h in 0..2 {
        let cols = |t: &T| {
            let mut d = Vec::new();
            for row in 0..t.rows() {
                d.extend_from_slice(&t.row(row)[h * 4..h * 4 + 4]);
            }
            Tensor::matrix(t.rows(), 4, d).unwrap()
        };
        let o = ref_attention(&cols(&pq), &cols(&pk), &cols(&pv));
        for row in 0..3 {
            merged[row * 8 + h * 4..row * 8 + h * 4 + 4].copy_from_slice(o.row(row));
        }
    }
    let expect = Tensor::matrix(3, 8, merged).unwrap().matmul(store.value(mha.wo.w)).unwrap();
    assert!(g.value(y).max_abs_diff(&expect).unwrap() < 1e-12);
}

#[test]
fn attention_single_key_returns_projected_value() {
    let mut store = ParamStore::<f64>::new();
    let mut r = RngStream::new(5, 0);
    let mha = MultiHeadAttention::new(&mut store, "a", 4, 4, 4, 1, &mut r).unwrap();
    let q: T = r.normal_tensor(&[3, 4]);
    let kv: T = r.normal_tensor(&[1, 4]);
    let mut g = Graph::new();
    let (qv, kvv) = (g.constant(q), g.constant(kv.clone()));
    let y = mha.forward(&mut g, &store, qv, kvv, 1).unwrap();
    let v = kv.matmul(store.value(mha.wv.w)).unwrap().matmul(store.value(mha.wo.w)).unwrap();
    for row in 0..3 {
        for (a, b) in g.value(y).row(row).iter().zip(v.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_equal_keys_average_values() {
    let mut store = ParamStore::<f64>::new();
    let mut r = RngStream::new(6, 0);
    let mha = MultiHeadAttention::new(&mut store, "a", 4, 4, 4, 2, &mut r).unwrap();
    store.set_value(mha.wk.w, Tensor::zeros(&[4, 4])).unwrap();
    let q: T = r.normal_tensor(&[2, 4]);
    let kv: T = r.normal_tensor(&[5, 4]);
    let mut g = Graph::new();
    let (qv, kvv) = (g.constant(q), g.constant(kv.clone()));
    let y = mha.forward(&mut g, &store, qv, kvv, 1).unwrap();
    let mut mean = vec![0.0; 4];
    for row in 0..5 {
        for (m, x) in mean.iter_mut().zip(kv.row(row)) {
            *m += x / 5.0;
        }
    }
    let m = Tensor::matrix(1, 4, mean).unwrap();
    let expect = m.matmul(store.value(mha.wv.w)).unwrap().matmul(store.value(mha.wo.w)).unwrap();
    for row in 0..2 {
        for (a, b) in g.value(y).row(row).iter().zip(expect.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn adamw_minimizes_quadratic() {
    let target = [3.0, -1.5, 0.25, 7.0];
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::zeros(&[1, 4])).unwrap();
    let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let goal = Tensor::from_f64(&[1, 4], &target).unwrap();
    for _ in 0..2000 {
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let t = g.constant(goal.clone());
        let d = g.sub(w, t).unwrap();
        let sq = g.square(d);
        let l = g.sum(sq);
        g.backward(l).unwrap();
        g.accumulate_param_grads(&mut store).unwrap();
        opt.step(&mut store, 0.05).unwrap();
    }
    assert!(store.value(id).max_abs_diff(&goal).unwrap() < 1e-3);
    assert_eq!(opt.steps_taken(), 2000);
}

#[test]
fn cosine_schedule_endpoints() {
    let s = CosineSchedule { base_lr: 1.0, warmup: 10, total: 110 };
    assert!((s.lr(0) - 0.1).abs() < 1e-15);
    assert!((s.lr(9) - 1.0).abs() < 1e-15);
    assert!((s.lr(60) - 0.5).abs() < 1e-12);
    assert!(s.lr(110).abs() < 1e-15);
}

fn scalar_loss(g: &mut Graph<f64>, y: Var, probe: &T) -> Result<Var> {
    let p = g.constant(probe.clone());
    let m = g.mul(y, p)?;
    Ok(g.sum(m))
}

#[test]
fn layer_gradients() -> Result<()> {
    let mut r = RngStream::new(7, 0);
    let x: T = r.normal_tensor(&[8, 6]);

    let mut store = ParamStore::<f64>::new();
    let lin = Linear::new(&mut store, "lin", 6, 5, true, &mut r)?;
    let probe: T = r.normal_tensor(&[8, 5]);
    let rep = grad_check(&mut store, |g, st| {
        let xv = g.constant(x.clone());
        let y = lin.forward(g, st, xv)?;
        scalar_loss(g, y, &probe)
    }, 1e-4)?;
    assert!(rep.passed(), "linear {rep:?}");

    let mut store = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut store, "ln", 6)?;
    store.set_value(ln.gamma, r.normal_tensor(&[1, 6]))?;
    let probe: T = r.normal_tensor(&[8, 6]);
    let rep = grad_check(&mut store, |g, st| {
        let xv = g.constant(x.clone());
        let y = ln.forward(g, st, xv)?;
        scalar_loss(g, y, &probe)
    }, 1e-4)?;
    assert!(rep.passed(), "layer norm {rep:?}");

    let mut store = ParamStore::<f64>::new();
    let mlp = Mlp::new(&mut store, "mlp", &[6, 12, 3], &mut r)?;
    let probe: T = r.normal_tensor(&[8, 3]);
    let rep = grad_check(&mut store, |g, st| {
        let xv = g.constant(x.clone());
        let y = mlp.forward(g, st, xv)?;
        scalar_loss(g, y, &probe)
    }, 1e-4)?;
    assert!(rep.passed(), "mlp {rep:?}");

    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 6, 6, 8, 2, &mut r)?;
    let probe: T = r.normal_tensor(&[8, 6]);
    let rep = grad_check(&mut store, |g, st| {
        let xv = g.constant(x.clone());
        let y = mha.forward(g, st, xv, xv, 2)?;
        scalar_loss(g, y, &probe)
    }, 1e-4)?;
    assert!(rep.passed(), "attention {rep:?}");
    Ok(())
}

#[test]
fn elementwise_op_gradients() -> Result<()> {
    let mut r = RngStream::new(8, 0);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", r.normal_tensor(&[3, 4]))?;
    let b = store.add("b", r.normal_tensor(&[3, 4]))?;
    let row = store.add("row", r.normal_tensor(&[1, 4]))?;
    let col = store.add("col", r.normal_tensor(&[3, 1]))?;
    let probe: T = r.normal_tensor(&[3, 8]);
    let rep = grad_check(&mut store, |g, st| {
        let (av, bv, rv, cv) = (g.param(st, a), g.param(st, b), g.param(st, row), g.param(st, col));
        let s = g.sigmoid(av)?;
        let t = g.tanh(bv);
        let u = g.silu(av)?;
        let m = g.mul(s, t)?;
        let m = g.add_row(m, rv)?;
        let m = g.mul_col(m, cv)?;
        let sm = g.softmax(m)?;
        let sm = g.sub(sm, u)?;
        let tr = g.transpose(bv);
        let mm = g.matmul(av, tr)?;
        let mm = g.matmul(mm, bv)?;
        let cat = g.concat_cols(&[sm, mm])?;
        scalar_loss(g, cat, &probe)
    }, 1e-4)?;
    assert!(rep.passed(), "{rep:?}");
    Ok(())
}

#[test]
fn frozen_parameters_receive_no_update() -> Result<()> {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::from_f64(&[1, 2], &[1.0, 2.0])?)?;
    store.set_frozen(id, true);
    let before = store.value(id).clone();
    let mut opt = AdamW::new(&store, AdamWConfig::default());
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let sq = g.square(w);
    let l = g.sum(sq);
    g.backward(l)?;
    g.accumulate_param_grads(&mut store)?;
    opt.step(&mut store, 0.1)?;
    assert_eq!(store.value(id), &before);
    Ok(())
}

#[test]
fn rng_streams_reproducible_and_distinct() {
    let draw = |s, k| {
        let mut r = RngStream::new(s, k);
        (0..8).map(|_| r.next_u64()).collect::<Vec<_>>()
    };
    assert_eq!(draw(9, 3), draw(9, 3));
    assert_ne!(draw(9, 3), draw(9, 4));
    assert_ne!(draw(9, 3), draw(10, 3));
    let base = RngStream::new(9, 3);
    assert_eq!(base.fork(1).next_u64(), base.fork(1).next_u64());
    assert_ne!(base.fork(1).next_u64(), base.fork(2).next_u64());
}
