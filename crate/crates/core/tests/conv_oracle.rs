mod common;

use common::{conv2d_direct, conv_transpose2d_direct, rng};
use proptest::prelude::*;
use sggan_core::autograd::Graph;
use sggan_core::Tensor;

fn conv(x: &Tensor, w: &Tensor, s: usize, p: usize, transposed: bool) -> Tensor {
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = if transposed { g.conv_transpose2d(xv, wv, s, p) } else { g.conv2d(xv, wv, s, p) }.unwrap();
    g.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_loops(
        n in 1usize..3, c in 1usize..4, o in 1usize..4, h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let mut r = rng(seed);
        let x = Tensor::randn(&[n, c, h, w], 1.0, &mut r);
        let wt = Tensor::randn(&[o, c, k, k], 1.0, &mut r);
        let fast = conv(&x, &wt, stride, pad, false);
        let slow = conv2d_direct(&x, &wt, stride, pad);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn conv_transpose2d_matches_scatter(
        n in 1usize..3, c in 1usize..4, o in 1usize..4, h in 2usize..6, w in 2usize..6,
        k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let mut r = rng(seed);
        let x = Tensor::randn(&[n, c, h, w], 1.0, &mut r);
        let wt = Tensor::randn(&[c, o, k, k], 1.0, &mut r);
        let fast = conv(&x, &wt, stride, pad, true);
        let slow = conv_transpose2d_direct(&x, &wt, stride, pad);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.max_abs_diff(&slow) < 1e-12);
    }
}

#[test]
fn same_padding_extents() {
    let mut r = rng(0);
    let x = Tensor::randn(&[1, 2, 8, 8], 1.0, &mut r);
    assert_eq!(conv(&x, &Tensor::randn(&[4, 2, 3, 3], 1.0, &mut r), 2, 1, false).shape(), &[1, 4, 4, 4]);
    assert_eq!(conv(&x, &Tensor::randn(&[2, 4, 5, 5], 1.0, &mut r), 2, 2, true).shape(), &[1, 4, 16, 16]);
}
