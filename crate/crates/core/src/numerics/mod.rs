//! Dense tensors, parameters and the recorded graph used for training.

mod graph;
pub mod gradcheck;
mod param;
mod tensor;

pub use graph::{AttnMask, Graph, Var};
pub use param::{Gradients, ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f32> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for t in 0..k {
                    s += a.data()[i * k + t] as f64 * b.data()[t * n + j] as f64;
                }
                out[i * n + j] = s as f32;
            }
        }
        out
    }

    /// Explicit per-row softmax attention for one head.
    fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttnMask) -> Vec<f32> {
        let (n, d, m) = (q.rows(), q.cols(), k.rows());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let mut w = vec![0.0f64; m];
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                if mask.get(i, j) {
                    let s: f64 = (0..d).map(|c| q.row(i)[c] as f64 * k.row(j)[c] as f64).sum::<f64>()
                        / (d as f64).sqrt();
                    w[j] = s;
                    max = max.max(s);
                }
            }
            let mut z = 0.0;
            for j in 0..m {
                if mask.get(i, j) {
                    w[j] = (w[j] - max).exp();
                    z += w[j];
                } else {
                    w[j] = 0.0;
                }
            }
            for c in 0..d {
                out[i * d + c] = (0..m).map(|j| w[j] / z * v.row(j)[c] as f64).sum::<f64>() as f32;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let b = g.input(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap()).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);
        assert_eq!(g.value(c).shape(), &[2, 1]);

        let a = g.input(Tensor::from_rows(&[vec![2.0]]).unwrap()).unwrap();
        let b = g.input(Tensor::from_rows(&[vec![0.0]]).unwrap()).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ta = rand_tensor(&mut rng, &[3, 4]);
        let tb = rand_tensor(&mut rng, &[4, 2]);
        let expected = naive_matmul(&ta, &tb);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(ta).unwrap();
        let b = g.input(tb).unwrap();
        let c = g.matmul(a, b).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn single_token_attention_returns_v() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.input(Tensor::from_rows(&[vec![0.3, -2.0]]).unwrap()).unwrap();
        let k = g.input(Tensor::from_rows(&[vec![1.5, 0.7]]).unwrap()).unwrap();
        let v = g.input(Tensor::from_rows(&[vec![4.0, -1.0]]).unwrap()).unwrap();
        let o = g.attention(q, k, v, Some(&AttnMask::full(1, 1)), 1).unwrap();
        assert_eq!(g.value(o).data(), &[4.0, -1.0]);
    }

    #[test]
    fn causal_attention_matches_per_row_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (tq, tk, tv) = (
            rand_tensor(&mut rng, &[4, 6]),
            rand_tensor(&mut rng, &[4, 6]),
            rand_tensor(&mut rng, &[4, 6]),
        );
        let mask = AttnMask::causal(4);
        let expected = naive_attention(&tq, &tk, &tv, &mask);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (q, k, v) = (g.input(tq).unwrap(), g.input(tk).unwrap(), g.input(tv).unwrap());
        let o = g.attention(q, k, v, Some(&mask), 1).unwrap();
        for (x, y) in g.value(o).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn forbidden_key_has_no_influence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (tq, tk, tv) = (
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[3, 4]),
        );
        // key 2 forbidden for every query
        let mask = AttnMask::from_fn(3, 3, |_, k| k != 2);
        let run = |k: Tensor, v: Tensor| {
            let store = ParamStore::new();
            let mut g = Graph::new(&store);
            let (q, k, v) = (g.input(tq.clone()).unwrap(), g.input(k).unwrap(), g.input(v).unwrap());
            let o = g.attention(q, k, v, Some(&mask), 2).unwrap();
            g.value(o).clone()
        };
        let base = run(tk.clone(), tv.clone());
        let (mut k2, mut v2) = (tk.clone(), tv.clone());
        for c in 0..4 {
            k2.data_mut()[2 * 4 + c] = 1e3 * (c as f32 + 1.0);
            v2.data_mut()[2 * 4 + c] = -7e2;
        }
        assert!(base.bit_eq(&run(k2, v2)));
    }

    #[test]
    fn forbidden_key_receives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mask = AttnMask::causal(5);
        let q = g.input_tracked(rand_tensor(&mut rng, &[5, 4])).unwrap();
        let k = g.input_tracked(rand_tensor(&mut rng, &[5, 4])).unwrap();
        let v = g.input_tracked(rand_tensor(&mut rng, &[5, 4])).unwrap();
        let o = g.attention(q, k, v, Some(&mask), 2).unwrap();
        // loss touches only output row 1, which may see keys 0 and 1
        let row = g.slice_rows(o, 1, 1).unwrap();
        let loss = g.sum(row).unwrap();
        let grads = g.backward(loss).unwrap();
        for key in 2..5 {
            assert!(grads.input(k).unwrap().row(key).iter().all(|&x| x == 0.0));
            assert!(grads.input(v).unwrap().row(key).iter().all(|&x| x == 0.0));
        }
        assert!(grads.input(v).unwrap().row(0).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[2, 2])).unwrap();
        let mask = AttnMask::from_fn(2, 2, |q, _| q == 0);
        assert!(matches!(
            g.attention(x, x, x, Some(&mask), 1),
            Err(Error::FullyMaskedRow { row: 1 })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_fn(&[2, 3], |i| i as f32), ParamGroup::Backbone);
        let mut g = Graph::new(&store);
        let pv = g.param(p);
        let loss = g.sum(pv).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(p).unwrap().data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn backward_of_half_square_is_identity() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_fn(&[4], |i| i as f32 - 1.5), ParamGroup::Backbone);
        let mut g = Graph::new(&store);
        let pv = g.param(p);
        let sq = g.mul(pv, pv).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(p).unwrap().data(), store.value(p).data());
        store.accumulate(&grads);
        assert_eq!(store.get(p).grad.data(), store.value(p).data());
    }

    #[test]
    fn frozen_parameters_never_get_gradients() {
        let mut store = ParamStore::new();
        let frozen = store.add("f", Tensor::full(&[2, 2], 0.5), ParamGroup::Frozen);
        let live = store.add("w", Tensor::full(&[2, 2], 0.25), ParamGroup::Backbone);
        let mut g = Graph::new(&store);
        let (f, w) = (g.param(frozen), g.param(live));
        let y = g.matmul(f, w).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(frozen).is_none());
        assert!(grads.param(live).is_some());
        store.accumulate(&grads);
        assert_eq!(store.get(frozen).grad.sq_norm(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input_tracked(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full(&[1, 2], 3e38)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut store = ParamStore::new();
        let gamma = store.add("g", Tensor::full(&[4], 1.0), ParamGroup::Backbone);
        let beta = store.add("b", Tensor::zeros(&[4]), ParamGroup::Backbone);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 0.0, 1.0]]).unwrap()).unwrap();
        let (gv, bv) = (g.param(gamma), g.param(beta));
        let y = g.layer_norm(x, gv, bv, 1e-5).unwrap();
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean: f32 = row.iter().sum::<f32>() / 4.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_with_large_logits() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_rows(&[vec![1000.0, 999.0, -5.0]]).unwrap()).unwrap();
        let y = g.softmax(x).unwrap();
        let s: f32 = g.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn composite_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let w1 = store.add_normal("w1", &[6, 8], 0.4, ParamGroup::Backbone, &mut rng);
        let b1 = store.add_normal("b1", &[8], 0.1, ParamGroup::Backbone, &mut rng);
        let gamma = store.add_normal("g", &[8], 0.3, ParamGroup::Backbone, &mut rng);
        let beta = store.add_normal("be", &[8], 0.1, ParamGroup::Backbone, &mut rng);
        let emb = store.add_normal("emb", &[5, 8], 0.5, ParamGroup::Backbone, &mut rng);
        let w2 = store.add_normal("w2", &[8, 8], 0.4, ParamGroup::Backbone, &mut rng);
        let x = rand_tensor(&mut rng, &[3, 6]);
        let target = rand_tensor(&mut rng, &[5, 8]);

        let forward = |g: &mut Graph| -> crate::Result<Var> {
            let xi = g.input(x.clone())?;
            let w1v = g.param(w1);
            let h = g.matmul(xi, w1v)?;
            let b1v = g.param(b1);
            let h = g.add_row(h, b1v)?;
            let h = g.gelu(h)?;
            let e = g.embedding(emb, &[1, 4])?;
            let h = g.concat_rows(&[h, e])?;
            let (gv, bv) = (g.param(gamma), g.param(beta));
            let h = g.layer_norm(h, gv, bv, 1e-5)?;
            let w2v = g.param(w2);
            let qk = g.matmul(h, w2v)?;
            let a = g.attention(qk, h, h, Some(&AttnMask::causal(5)), 2)?;
            let t = g.input(target.clone())?;
            g.mse(a, t)
        };
        let opts = gradcheck::GradCheckOptions {
            samples: 40,
            step: 1e-3,
            // below this magnitude f32 central differences cannot resolve 1%
            min_abs_grad: 2e-3,
            seed: 77,
        };
        let report = gradcheck::check_filtered(&mut store, forward, |_| true, &opts).unwrap();
        assert!(report.checked >= 20, "{report:?}");
        assert!(report.max_rel_err <= 1e-2, "{report:?}");
    }
}
