mod common;

use approx::assert_abs_diff_eq;
use common::*;
use enmkl::kernel::{
    build_linear_cross_kernels, build_linear_kernels, center_train_kernel, normalize_kernel, weighted_sum, FittedPreprocessing,
    Preprocessing,
};
use enmkl::{GroupedDataset, KernelMatrix, KernelStack, MklError};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn dataset(x: DMatrix<f64>, sizes: &[usize]) -> GroupedDataset {
    let mut col_groups = Vec::new();
    for (g, &s) in sizes.iter().enumerate() {
        col_groups.extend(std::iter::repeat_n(g, s));
    }
    let names = (0..x.ncols()).map(|c| format!("f{c}")).collect();
    let groups = (0..sizes.len()).map(|g| format!("g{g}")).collect();
    let ids = (0..x.nrows()).map(|i| format!("s{i}")).collect();
    GroupedDataset::new(x, names, col_groups, groups, ids).unwrap()
}

fn features(max_n: usize) -> impl Strategy<Value = (DMatrix<f64>, Vec<usize>)> {
    (3..max_n, prop::collection::vec(1usize..5, 1..4)).prop_flat_map(|(n, sizes)| {
        let p: usize = sizes.iter().sum();
        (prop::collection::vec(-3.0f64..3.0, n * p), Just(sizes), Just(n), Just(p))
            .prop_map(|(v, sizes, n, p)| (DMatrix::from_row_slice(n, p, &v), sizes))
    })
}

fn min_eigenvalue(k: &KernelMatrix) -> f64 {
    k.values().clone().symmetric_eigenvalues().min()
}

/// Centers columns by `means`, scales each row to unit norm, and takes inner products.
fn feature_oracle(test: &DMatrix<f64>, train: &DMatrix<f64>) -> DMatrix<f64> {
    let means = train.row_mean();
    let unit = |x: &DMatrix<f64>| {
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            row -= &means;
            let norm = row.norm();
            row /= norm;
        }
        c
    };
    unit(test) * unit(train).transpose()
}

#[test]
fn two_samples_two_single_column_groups() {
    let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let stack = build_linear_kernels(&dataset(x, &[1, 1])).unwrap();
    assert_eq!(stack.kernel(0).values(), &DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 9.0]));
    assert_eq!(stack.kernel(1).values(), &DMatrix::from_row_slice(2, 2, &[4.0, 8.0, 8.0, 16.0]));
}

#[test]
fn constant_group_is_a_zero_norm_error() {
    let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
    let raw = build_linear_kernels(&dataset(x, &[1, 1])).unwrap();
    let err = FittedPreprocessing::fit(&raw, Preprocessing::default()).unwrap_err();
    assert!(matches!(err, MklError::ZeroNorm(_)), "{err}");
}

#[test]
fn stack_rejects_mismatched_ids_and_duplicate_names() {
    let a = KernelMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let b = KernelMatrix::square(DMatrix::identity(2, 2), vec!["x".into(), "y".into()]).unwrap();
    assert!(matches!(KernelStack::from_kernels(vec![a.clone(), b]), Err(MklError::IdMismatch(_))));
    assert!(KernelStack::new(vec![a.clone(), a], vec!["g".into(), "g".into()], vec![1, 1]).is_err());
    assert!(KernelStack::from_kernels(Vec::new()).is_err());
}

#[test]
fn training_samples_as_test_reproduce_the_train_kernel() {
    let mut rng = rng(5);
    let data = regression_data(&mut rng, 15, &[group("a", 3, 1.0), group("b", 4, 1.0)], 0.1);
    let raw = build_linear_kernels(&data).unwrap();
    let (processed, fitted) = FittedPreprocessing::fit(&raw, Preprocessing::default()).unwrap();
    let (cross, selfs) = build_linear_cross_kernels(&data, &data).unwrap();
    let cross = fitted.transform(&cross, &selfs).unwrap();
    for j in 0..2 {
        assert_abs_diff_eq!(cross.kernel(j).values(), processed.kernel(j).values(), epsilon = 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preprocessing_matches_raw_feature_pipeline((x, sizes) in features(12), split in 0.5f64..0.8) {
        let data = dataset(x, &sizes);
        let n = data.nsamples();
        let cut = ((n as f64 * split) as usize).clamp(2, n - 1);
        let train = data.select_samples(&(0..cut).collect::<Vec<_>>());
        let test = data.select_samples(&(cut..n).collect::<Vec<_>>());
        let raw = build_linear_kernels(&train).unwrap();
        let Ok((processed, fitted)) = FittedPreprocessing::fit(&raw, Preprocessing::default()) else {
            // a group whose centered rows vanish cannot be normalized
            return Ok(());
        };
        let (cross, selfs) = build_linear_cross_kernels(&test, &train).unwrap();
        let Ok(cross) = fitted.transform(&cross, &selfs) else { return Ok(()) };
        for j in 0..sizes.len() {
            let xtr = train.group_features(j);
            let xte = test.group_features(j);
            let d_train = (processed.kernel(j).values() - feature_oracle(&xtr, &xtr)).abs().max();
            let d_test = (cross.kernel(j).values() - feature_oracle(&xte, &xtr)).abs().max();
            prop_assert!(d_train <= 1e-8, "train diff {d_train}");
            prop_assert!(d_test <= 1e-8, "test diff {d_test}");
        }
    }

    #[test]
    fn preprocessing_keeps_symmetry_and_psd((x, sizes) in features(10)) {
        let raw = build_linear_kernels(&dataset(x, &sizes)).unwrap();
        for k in raw.kernels() {
            let c = center_train_kernel(k).unwrap();
            prop_assert!(c.is_centered());
            prop_assert!(c.relative_asymmetry() <= 1e-10);
            prop_assert!(min_eigenvalue(&c) >= -1e-8);
            let n = c.nrows() as f64;
            for i in 0..c.nrows() {
                prop_assert!((c.values().row(i).sum() / n).abs() <= 1e-8);
                prop_assert!((c.values().column(i).sum() / n).abs() <= 1e-8);
            }
            if let Ok(u) = normalize_kernel(&c) {
                prop_assert!(u.is_normalized());
                prop_assert!(u.relative_asymmetry() <= 1e-10);
                prop_assert!(min_eigenvalue(&u) >= -1e-8);
                for d in u.diagonal() {
                    prop_assert!((d - 1.0).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn weighted_sum_is_linear(
        (x, sizes) in features(8),
        a in 0.0f64..3.0,
        b in 0.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let stack = build_linear_kernels(&dataset(x, &sizes)).unwrap();
        let m = stack.len();
        let mut r = rng(seed);
        let b1: Vec<f64> = (0..m).map(|_| gauss(&mut r).abs()).collect();
        let b2: Vec<f64> = (0..m).map(|_| gauss(&mut r).abs()).collect();
        let mix: Vec<f64> = b1.iter().zip(&b2).map(|(u, v)| a * u + b * v).collect();
        let lhs = weighted_sum(&stack, &mix).unwrap();
        let rhs = weighted_sum(&stack, &b1).unwrap().values() * a + weighted_sum(&stack, &b2).unwrap().values() * b;
        let scale = rhs.abs().max().max(1.0);
        prop_assert!((lhs.values() - rhs).abs().max() <= 1e-12 * scale);
    }
}
