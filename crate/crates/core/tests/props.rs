//! Property tests over arbitrary inputs for the invariants that must hold
//! unconditionally, not just on hand-picked cases.

use proptest::prelude::*;

use ssattn_core::attention::{window_merge, window_partition};
use ssattn_core::raingen::compose;
use ssattn_core::tensor::{Tape, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Softmax lanes sum to 1 +- 1e-12 for any finite input, including wild
    /// magnitude spreads.
    #[test]
    fn softmax_rows_normalize(rows in 1usize..5, cols in 1usize..9,
                              values in prop::collection::vec(-300.0f64..300.0, 1..45)) {
        let n = rows * cols;
        let data: Vec<f64> = (0..n).map(|i| values[i % values.len()]).collect();
        let x = Tensor::new(vec![rows, cols], data).unwrap();
        let mut tape = Tape::new();
        let y = tape.softmax(&x, 1).unwrap();
        for r in 0..rows {
            let s: f64 = y.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12, "row {r} sums to {s}");
        }
    }

    /// Window partition followed by merge is the identity, bit for bit, for
    /// every divisible geometry.
    #[test]
    fn window_roundtrip_is_identity(c in 1usize..4, mh in 1usize..4, mw in 1usize..4,
                                    win in 1usize..4, seed in 0u64..1000) {
        let (h, w) = (mh * win, mw * win);
        let mut state = seed;
        let x = Tensor::from_fn(vec![c, h, w], |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        });
        let mut tape = Tape::new();
        let parts = window_partition(&mut tape, &x, win).unwrap();
        let back = window_merge(&mut tape, &parts, h, w).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// The compositing identity holds exactly for arbitrary scene parts, not
    /// only for generator output.
    #[test]
    fn compose_identity_exact(seed in 0u64..1000, eta in 0.0f64..1.0) {
        let mut state = seed.wrapping_add(1);
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let (h, w) = (3, 4);
        let b = Tensor::from_fn(vec![3, h, w], |_| next());
        let s = Tensor::from_fn(vec![3, h, w], |_| next() * 0.5);
        let m = Tensor::from_fn(vec![1, h, w], |_| if next() > 0.5 { 1.0 } else { 0.0 });
        let d = Tensor::from_fn(vec![3, h, w], |_| next());
        let r = compose(&b, &s, &m, &d, eta).unwrap();
        let hw = h * w;
        for c in 0..3 {
            for p in 0..hw {
                let expect = (1.0 - m.data()[p]) * (b.data()[c * hw + p] + s.data()[c * hw + p])
                    + eta * d.data()[c * hw + p];
                prop_assert_eq!(r.data()[c * hw + p].to_bits(), expect.to_bits());
            }
        }
    }
}
