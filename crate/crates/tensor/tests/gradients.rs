use mnp_tensor::gradcheck::check;
use mnp_tensor::{Graph, Tensor, TensorError, Var};
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn positive_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.2f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=8, 1usize..=8)
}

/// Reduces any tensor to a scalar through a fixed random-ish weighting so the
/// upstream adjoint is not uniform.
fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var, TensorError> {
    let shape = g.value(v).shape().to_vec();
    let n = g.value(v).len();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect())?;
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn assert_ok(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>) {
    for r in check(inputs, STEP, build).unwrap() {
        assert!(r.max_rel_err < TOL, "input {} rel err {}", r.input, r.max_rel_err);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_grad((n, k) in dims(), m in 1usize..=8, seed in any::<u64>()) {
        let _ = seed;
        let a = Tensor::matrix(n, k, (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = Tensor::matrix(k, m, (0..k * m).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        assert_ok(&[a, b], |g, v| {
            let c = g.matmul(v[0], v[1])?;
            weighted_sum(g, c)
        });
    }

    #[test]
    fn matmul_nt_and_transpose_grad(a in matrix(3, 4), b in matrix(5, 4)) {
        assert_ok(&[a, b], |g, v| {
            let c = g.matmul_nt(v[0], v[1])?;
            let t = g.transpose(c)?;
            weighted_sum(g, t)
        });
    }

    #[test]
    fn binary_ops_with_row_broadcast(a in matrix(4, 3), r in positive_matrix(1, 3), b in positive_matrix(4, 3)) {
        assert_ok(&[a, r, b], |g, v| {
            let x = g.add(v[0], v[1])?;
            let y = g.mul(x, v[2])?;
            let z = g.div(y, v[1])?;
            let w = g.sub(v[2], z)?;
            let q = g.div(v[1], w)?;
            weighted_sum(g, q)
        });
    }

    #[test]
    fn scalar_broadcast(a in matrix(3, 2), s in positive_matrix(1, 1)) {
        assert_ok(&[a, s], |g, v| {
            let x = g.mul(v[0], v[1])?;
            weighted_sum(g, x)
        });
    }

    #[test]
    fn unary_ops(a in matrix(3, 5), p in positive_matrix(3, 5)) {
        assert_ok(&[a, p], |g, v| {
            let e = g.exp(v[0])?;
            let l = g.log(v[1])?;
            let s = g.sqrt(v[1])?;
            let r = g.recip(v[1])?;
            let sq = g.square(v[0])?;
            let n = g.neg(sq)?;
            let sp = g.softplus(v[0])?;
            let sc = g.scale(sp, 1.7)?;
            let ad = g.add_scalar(sc, -0.3)?;
            let mut acc = g.add(e, l)?;
            for t in [s, r, n, ad] {
                acc = g.add(acc, t)?;
            }
            weighted_sum(g, acc)
        });
    }

    #[test]
    fn piecewise_activations_away_from_kinks(a in matrix(4, 4)) {
        // Nudge entries off the kink at zero so the finite difference is smooth.
        let a = a.map(|x| if x.abs() < 1e-3 { x + 0.01 } else { x });
        assert_ok(&[a], |g, v| {
            let l = g.leaky_relu(v[0], 0.01)?;
            let r = g.relu(v[0])?;
            let c = g.clamp_min(v[0], 0.5)?;
            let x = g.add(l, r)?;
            let y = g.add(x, c)?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn softmax_and_layer_norm(a in matrix(5, 6)) {
        assert_ok(&[a], |g, v| {
            let s = g.softmax_rows(v[0])?;
            let ln = g.layer_norm_rows(v[0])?;
            let x = g.add(s, ln)?;
            weighted_sum(g, x)
        });
    }

    #[test]
    fn softmax_rows_are_distributions(a in matrix(6, 7)) {
        let mut g = Graph::new();
        let x = g.constant(a);
        let s = g.softmax_rows(x).unwrap();
        let v = g.value(s);
        for i in 0..v.rows() {
            let row = v.row_slice(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn masked_log_softmax_grad(a in matrix(4, 4), bits in prop::collection::vec(any::<bool>(), 16)) {
        assert_ok(&[a], move |g, v| {
            let y = g.log_softmax_rows_masked(v[0], bits.clone())?;
            weighted_sum(g, y)
        });
    }

    #[test]
    fn reductions_and_concat(a in matrix(3, 4), b in matrix(3, 2)) {
        assert_ok(&[a, b], |g, v| {
            let c = g.concat_cols(&[v[0], v[1]])?;
            let m = g.mean_rows(c)?;
            let s = weighted_sum(g, m)?;
            let t = g.mean(v[1])?;
            g.add(s, t)
        });
    }

    #[test]
    fn composite_mlp_loss(x in matrix(5, 3), w1 in matrix(3, 6), b1 in matrix(1, 6), w2 in matrix(6, 2)) {
        assert_ok(&[x, w1, b1, w2], |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add(h, v[2])?;
            let h = g.layer_norm_rows(h)?;
            let h = g.softplus(h)?;
            let o = g.matmul(h, v[3])?;
            let p = g.softmax_rows(o)?;
            let p = g.clamp_min(p, 1e-12)?;
            let l = g.log(p)?;
            let s = g.mean(l)?;
            g.neg(s)
        });
    }
}
