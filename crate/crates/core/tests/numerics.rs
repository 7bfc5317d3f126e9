use ca_stream::numerics::{grad_check, GradCheckOptions, Tape, Tensor, Var};
use ca_stream::Result;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn shaped() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..4, 1usize..5).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c)))
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, leaves: &[Tensor]) {
    let report = grad_check(f, leaves, GradCheckOptions::with_tol(1e-5)).unwrap();
    assert!(report.passed(), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_gradients((a, b) in shaped()) {
        check(
            |t, v| {
                let x = t.mul(v[0], v[1])?;
                let s = t.sigmoid(x)?;
                let g = t.gelu(v[0])?;
                let h = t.tanh(v[1])?;
                let sp = t.softplus(g)?;
                let y = t.add(s, sp)?;
                let y = t.sub(y, h)?;
                let e = t.exp(y)?;
                t.sum(e)
            },
            &[a, b],
        );
    }

    #[test]
    fn matmul_and_row_ops(a in matrix(3, 4), b in matrix(4, 2), r in matrix(1, 2), c in matrix(3, 1)) {
        check(
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                let m = t.add_row(m, v[2])?;
                let m = t.mul_col(m, v[3])?;
                let m = t.transpose(m)?;
                let m = t.cumsum_rows(m, true)?;
                let m = t.layer_norm_rows(m, 1e-5)?;
                let w = t.constant(Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.7, 0.1, -0.4]).unwrap())?;
                let m = t.mul(m, w)?;
                t.sum(m)
            },
            &[a, b, r, c],
        );
    }

    #[test]
    fn softmax_and_slicing(a in matrix(3, 5)) {
        check(
            |t, v| {
                let s = t.softmax_rows(v[0], None)?;
                let l = t.log_softmax_rows(v[0])?;
                let left = t.slice_cols(s, 0, 2)?;
                let right = t.slice_cols(l, 2, 3)?;
                let joined = t.concat_cols(&[right, left])?;
                let rows = t.slice_rows(joined, 1, 2)?;
                let picked = t.pick_cols(rows, &[4, 0])?;
                let g = t.gather_rows(joined, &[2, 0, 2])?;
                let a = t.mean(g)?;
                let b = t.sum(picked)?;
                let sq = t.mul(a, b)?;
                t.add(sq, b)
            },
            &[a],
        );
    }

    #[test]
    fn softmax_rows_sum_to_one(a in matrix(4, 6)) {
        let mut t = Tape::new();
        let x = t.constant(a).unwrap();
        let s = t.softmax_rows(x, None).unwrap();
        let v = t.value(s);
        for r in 0..4 {
            let sum: f64 = v.row_slice(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(v.row_slice(r).iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised(a in matrix(3, 8)) {
        let mut t = Tape::new();
        let x = t.constant(a.clone()).unwrap();
        let y = t.layer_norm_rows(x, 0.0).unwrap();
        let v = t.value(y);
        for r in 0..3 {
            let row = a.row_slice(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assume!(var > 1e-3);
            let out = v.row_slice(r);
            let m: f64 = out.iter().sum::<f64>() / 8.0;
            let s: f64 = out.iter().map(|x| x * x).sum::<f64>() / 8.0;
            prop_assert!(m.abs() < 1e-12);
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn masked_softmax_ignores_hidden_columns() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row(vec![1.0, 100.0, 2.0])).unwrap();
    let s = t.softmax_rows(x, Some(&[true, false, true])).unwrap();
    let v = t.value(s).data().to_vec();
    assert_eq!(v[1], 0.0);
    let e = (1.0f64).exp() + (2.0f64).exp();
    assert!((v[0] - (1.0f64).exp() / e).abs() < 1e-15);
}

#[test]
fn saturated_sigmoid_stays_finite() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::row(vec![-800.0, 800.0]), true).unwrap();
    let s = t.sigmoid(x).unwrap();
    let sp = t.softplus(x).unwrap();
    let y = t.add(s, sp).unwrap();
    let y = t.sum(y).unwrap();
    let g = t.backward(y).unwrap();
    assert!(g.get(x).unwrap().is_finite());
    assert_eq!(t.value(sp).data()[1], 800.0);
}
