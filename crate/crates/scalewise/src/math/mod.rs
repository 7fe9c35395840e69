//! Dense tensor arithmetic with reverse-mode automatic differentiation and a
//! finite-difference gradient oracle. Everything else in the crate is built
//! on this module.
//!
//! Ops are exact double-precision computations by default and deterministic:
//! identical inputs produce bit-identical outputs. There is no implicit
//! broadcasting except scalar-tensor.

pub mod gradcheck;
pub mod mask;
pub mod rope;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, FdReport};
pub use mask::MaskMatrix;
pub use rope::RopePlan;
pub use scalar::Scalar;
pub use tape::{ParamStore, PId, Tape, Val, EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use std::rc::Rc;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::mat(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new(false);
        let eye = tape.constant(t2(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = tape.constant(t2(3, 2, &[1., 2., 3., 4., 5., 6.]));
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(a).data());
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f64>::new(false);
        let a = tape.constant(t2(2, 3, &[0.0; 6]));
        let b = tape.constant(t2(2, 2, &[0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            crate::error::Error::Dimension { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut tape = Tape::<f64>::new(false);
        let x = tape.constant(t2(1, 3, &[0., 0., 0.]));
        let y = tape.softmax(x, None).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_under_mask() {
        let mut tape = Tape::<f64>::new(false);
        let x = tape.constant(t2(2, 4, &[3., -1., 0.5, 2., 0., 0., 0., 0.]));
        let mask = Rc::new(MaskMatrix::from_fn(2, 4, |r, c| c <= r + 1));
        let y = tape.softmax(x, Some(mask.clone())).unwrap();
        for r in 0..2 {
            let mut sum = 0.0;
            for c in 0..4 {
                let v = tape.value(y).at2(r, c);
                assert!(v >= 0.0);
                if !mask.allowed(r, c) {
                    assert_eq!(v, 0.0);
                }
                sum += v;
            }
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_contract_violation() {
        let mut tape = Tape::<f64>::new(false);
        let x = tape.constant(t2(1, 2, &[0., 0.]));
        let mask = Rc::new(MaskMatrix::from_fn(1, 2, |_, _| false));
        assert!(matches!(
            tape.softmax(x, Some(mask)),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn rms_reduce_hand_value() {
        // rms([3, 4]) = sqrt((9 + 16) / 2)
        let mut tape = Tape::<f64>::new(false);
        let x = tape.constant(t2(1, 2, &[3., 4.]));
        let r = tape.rms(x).unwrap();
        assert!((tape.value(r).item().unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::<f64>::new(true);
        let w = tape.leaf(t2(2, 2, &[1., -2., 0.5, 3.]));
        let loss = tape.sum_all(w).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.leaf_grad(w).unwrap().data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn backward_sum_of_squares_gives_two_w() {
        let mut tape = Tape::<f64>::new(true);
        let w = tape.leaf(t2(1, 3, &[1., -2., 0.5]));
        let ww = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(ww).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.leaf_grad(w).unwrap().data(), &[2., -4., 1.]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut tape = Tape::<f64>::new(true);
        let w = tape.leaf(t2(1, 2, &[1., 2.]));
        let loss = tape.sum_all(w).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.leaf_grad(w).unwrap().data(), &[2., 2.]);
        tape.reset_grads();
        assert!(tape.leaf_grad(w).is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new(true);
        let w = tape.leaf(t2(1, 2, &[1., 2.]));
        assert!(matches!(
            tape.backward(w),
            Err(crate::error::Error::Usage(_))
        ));
    }

    #[test]
    fn nonfinite_output_names_the_op() {
        let mut tape = Tape::<f64>::new(false);
        let x = tape.constant(t2(1, 2, &[800., 800.]));
        let err = tape.exp(x).unwrap_err();
        assert!(matches!(err, crate::error::Error::Numeric { op: "exp" }));
    }

    #[test]
    fn rope_preserves_row_norms() {
        let coords: Vec<(f64, f64)> = (0..6).map(|i| (i as f64 * 0.7, i as f64 * 1.3)).collect();
        let plan = Rc::new(RopePlan::new(&coords, 8, 10_000.0).unwrap());
        let mut tape = Tape::<f64>::new(false);
        let data: Vec<f64> = (0..6 * 16).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let x = tape.constant(t2(6, 16, &data));
        let y = tape.rope(x, plan).unwrap();
        for r in 0..6 {
            let nx: f64 = tape.value(x).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = tape.value(y).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nx - ny).abs() < 1e-12, "row {r}: {nx} vs {ny}");
        }
    }

    #[test]
    fn rope_rejects_bad_head_dim() {
        assert!(RopePlan::new(&[(0.0, 0.0)], 6, 10_000.0).is_err());
    }

    /// Every primitive's analytic gradient against the central-difference
    /// oracle, composed into one deliberately crooked scalar function.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let a = store.add("a", t2(3, 4, &[0.3, -0.7, 1.1, 0.2, -0.4, 0.9, -1.2, 0.5, 0.8, -0.1, 0.6, -0.9]));
        let b = store.add("b", t2(4, 3, &[0.5, -0.2, 0.7, 1.0, -0.6, 0.1, -0.3, 0.4, 0.9, 0.2, -0.8, 0.3]));
        let table = store.add("table", t2(5, 4, &(0..20).map(|i| (i as f64 - 10.0) * 0.1).collect::<Vec<_>>()));

        let coords: Vec<(f64, f64)> = (0..3).map(|i| (i as f64 * 0.5, 1.0 - i as f64 * 0.25)).collect();
        let plan = Rc::new(RopePlan::new(&coords, 4, 100.0).unwrap());
        let mask = Rc::new(MaskMatrix::from_fn(3, 3, |r, c| c <= r));
        let idx = Rc::new(vec![4usize, 0, 2]);
        let picks = Rc::new(vec![1usize, 2, 0]);

        let eval = |tape: &mut Tape<f64>, av: Val, bv: Val, tv: Val| -> crate::error::Result<Val> {
            let prod = tape.matmul(av, bv)?; // (3,3)
            let soft = tape.softmax(prod, Some(mask.clone()))?;
            let logs = tape.log_softmax(prod)?;
            let gathered = tape.gather_rows(tv, idx.clone())?; // (3,4)
            let rotated = tape.rope(gathered, plan.clone())?;
            let normed = tape.rms_norm(rotated)?;
            let lnormed = tape.layer_norm(gathered)?;
            let act1 = tape.silu(normed)?;
            let act2 = tape.gelu_tanh(lnormed)?;
            let acts = tape.add(act1, act2)?;
            let att = tape.matmul(soft, acts)?; // (3,4)
            let attt = tape.transpose(att)?; // (4,3)
            let scaled = tape.scale(attt, 0.7)?;
            let shifted = tape.add_scalar(scaled, 0.1)?;
            let joined = tape.concat_rows(&[shifted, bv])?; // (8,3)
            let piece = tape.slice_rows(joined, 2, 3)?;
            let piece2 = tape.slice_cols(joined, 1, 2)?; // (8,2)
            let e = tape.exp(piece)?;
            let wide = tape.concat_cols(&[piece, e])?; // (3,6)
            let reshaped = tape.reshape(wide, vec![9, 2])?;
            let pooled = tape.mean_rows(reshaped)?; // (1,2)
            let spread = tape.broadcast_rows(pooled, 4)?; // (4,2)
            let anchor = tape_const(tape, 4, 2);
            let diff = tape.sub(spread, anchor)?;
            let prod2 = tape.mul(diff, diff)?;
            let m1 = tape.mean_all(prod2)?;
            let m2 = tape.sum_all(piece2)?;
            let picked = tape.pick_per_row(logs, picks.clone())?;
            let m3 = tape.mean_all(picked)?;
            let r = tape.rms(att)?;
            let partial = tape.add(m1, m2)?;
            let partial = tape.add(partial, m3)?;
            tape.add(partial, r)
        };

        fn tape_const(tape: &mut Tape<f64>, rows: usize, cols: usize) -> Val {
            tape.constant(Tensor::mat(rows, cols, vec![0.25; rows * cols]).unwrap())
        }

        let mut tape = Tape::<f64>::new(true);
        let av = tape.param(&store, a);
        let bv = tape.param(&store, b);
        let tv = tape.param(&store, table);
        let loss = eval(&mut tape, av, bv, tv).unwrap();
        tape.backward(loss).unwrap();
        tape.grads_into_store(&mut store).unwrap();

        let report = finite_diff_check(&mut store, 1e-6, |p| {
            let mut t = Tape::<f64>::new(true);
            let av = t.param(p, a);
            let bv = t.param(p, b);
            let tv = t.param(p, table);
            let loss = eval(&mut t, av, bv, tv)?;
            t.value(loss).item()
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {} at {}[{}] analytic {} numeric {}",
            report.max_rel_err,
            report.worst_param,
            report.worst_index,
            report.worst_analytic,
            report.worst_numeric
        );
    }

    #[test]
    fn flops_count_matmuls_only() {
        let mut tape = Tape::<f64>::new(false);
        let a = tape.constant(t2(2, 3, &[0.1; 6]));
        let b = tape.constant(t2(3, 5, &[0.1; 15]));
        let c = tape.matmul(a, b).unwrap();
        let _ = tape.exp(c).unwrap();
        assert_eq!(tape.flops(), 2 * 2 * 3 * 5);
    }

    #[test]
    fn non_recording_tape_rejects_backward() {
        let mut tape = Tape::<f64>::new(false);
        let x = tape.constant(Tensor::scalar(1.0));
        assert!(tape.backward(x).is_err());
    }
}
