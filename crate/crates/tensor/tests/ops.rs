use patchsum_tensor::{Tensor, TensorError};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::constant(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_sum() {
    let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(i2.matmul(&i2).unwrap().data(), i2.data());

    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let ones = t(&[2, 1], &[1.0, 1.0]);
    let c = a.matmul(&ones).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = t(&[2, 3], &[0.0; 6]);
    let b = t(&[2, 3], &[0.0; 6]);
    let err = a.matmul(&b).unwrap_err();
    assert_eq!(err, TensorError::Shape { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] });
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn softmax_symmetry_and_stabilization() {
    let s = t(&[1, 3], &[0.0, 0.0, 0.0]).softmax_rows().unwrap();
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = t(&[1, 3], &[1000.0, 0.0, 0.0]).softmax_rows().unwrap();
    assert!((s.data()[0] - 1.0).abs() < 1e-12);
    assert!(s.data()[1] < 1e-300);
}

#[test]
fn softmax_rejects_non_finite() {
    let err = t(&[1, 2], &[f64::NAN, 0.0]).softmax_rows().unwrap_err();
    assert!(matches!(err, TensorError::NonFinite { .. }));
    let err = t(&[1, 2], &[f64::INFINITY, 0.0]).softmax_rows().unwrap_err();
    assert!(matches!(err, TensorError::NonFinite { .. }));
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let s = t(&[1, 3], &[5.0, 1.0, 1.0]).softmax_rows_masked(&[false, true, true]).unwrap();
    assert_eq!(s.data(), &[0.0, 0.5, 0.5]);
}

#[test]
fn layer_norm_examples() {
    let ones = t(&[2], &[1.0, 1.0]);
    let zeros = t(&[2], &[0.0, 0.0]);
    let y = t(&[1, 2], &[3.0, 3.0]).layer_norm(&ones, &zeros, 1e-5).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0]);

    let y = t(&[1, 2], &[1.0, -1.0]).layer_norm(&ones, &zeros, 1e-15).unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-12);
    assert!((y.data()[1] + 1.0).abs() < 1e-12);
}

#[test]
fn sigmoid_and_bce_analytic_values() {
    assert_eq!(t(&[1], &[0.0]).sigmoid().data(), &[0.5]);
    let l = t(&[1], &[0.5]).binary_cross_entropy(&[1.0], 1e-7).unwrap();
    assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn minmax_degenerate_inputs_map_to_half() {
    assert_eq!(t(&[1], &[4.2]).minmax_normalize().unwrap().data(), &[0.5]);
    assert_eq!(t(&[3], &[2.0, 2.0, 2.0]).minmax_normalize().unwrap().data(), &[0.5, 0.5, 0.5]);
    assert_eq!(t(&[3], &[1.0, 3.0, 2.0]).minmax_normalize().unwrap().data(), &[0.0, 1.0, 0.5]);
}

#[test]
fn ignored_tensor_gets_exactly_zero_gradient() {
    let used = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
    let ignored = Tensor::param(vec![2], vec![3.0, 4.0]).unwrap();
    // `ignored` participates in the graph but not in the loss.
    let _side = ignored.scale(2.0);
    let loss = used.mul(&used).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(used.grad().unwrap(), vec![2.0, 4.0]);
    assert!(ignored.grad_or_zeros().iter().all(|&g| g == 0.0));
}

#[test]
fn constants_accumulate_no_gradient() {
    let c = t(&[2], &[1.0, 2.0]);
    let p = Tensor::param(vec![2], vec![0.5, 0.5]).unwrap();
    c.mul(&p).unwrap().sum().backward().unwrap();
    assert!(c.grad().is_none());
    assert_eq!(p.grad().unwrap(), vec![1.0, 2.0]);
}

#[test]
fn shared_subexpression_is_visited_once() {
    let x = Tensor::param(vec![1], vec![3.0]).unwrap();
    let y = x.mul(&x).unwrap(); // x²
    let z = y.add(&y).unwrap().add(&y).unwrap(); // 3x²
    z.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![18.0]);
    // records: mul, add, add
    assert_eq!(z.graph_len(), 3);
}

#[test]
fn backward_requires_single_element() {
    let x = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(x.scale(1.0).backward(), Err(TensorError::NotScalar(_))));
}

#[test]
fn repeated_forward_backward_is_bit_identical() {
    let run = || {
        let a = Tensor::param(vec![3, 3], (0..9).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = Tensor::param(vec![3, 3], (0..9).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let y = a.matmul(&b).unwrap().softmax_rows().unwrap().gelu();
        y.sum().backward().unwrap();
        (y.data().to_vec(), a.grad().unwrap(), b.grad().unwrap())
    };
    let (y1, ga1, gb1) = run();
    let (y2, ga2, gb2) = run();
    assert_eq!(y1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ga1, ga2);
    assert_eq!(gb1, gb2);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-50.0f64..50.0, 12)) {
        let s = t(&[3, 4], &data).softmax_rows().unwrap();
        for row in s.data().chunks(4) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(data in prop::collection::vec(-10.0f64..10.0, 16)) {
        prop_assume!(data[..8].iter().any(|v| (v - data[0]).abs() > 1e-3));
        prop_assume!(data[8..].iter().any(|v| (v - data[8]).abs() > 1e-3));
        let ones = t(&[8], &[1.0; 8]);
        let zeros = t(&[8], &[0.0; 8]);
        let y = t(&[2, 8], &data).layer_norm(&ones, &zeros, 1e-12).unwrap();
        for row in y.data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() <= 1e-7);
            prop_assert!((var - 1.0).abs() <= 1e-7);
        }
    }
}
