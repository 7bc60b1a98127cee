//! Minimal reverse-mode differentiation over a fixed layer vocabulary,
//! enough to train the paired encoders and their decomposition losses.

pub mod checkpoint;
pub mod graph;
pub mod layers;

pub use graph::{stop_gradient, GradStore, Graph, NnError, NodeId, Tensor};
pub use layers::{grad_check, tanh_rnn_step, LayerSpec, Mode, Model, ParamArray, ParamStore, Sgd, BN_EPS, BN_MOMENTUM};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_model(input: usize, output: usize) -> Model {
        Model::new("m", vec![LayerSpec::Linear { input, output }])
    }

    #[test]
    fn identity_linear_passes_input_through() {
        let model = linear_model(3, 3);
        let mut store = ParamStore::new(0);
        model.init_params(&mut store);
        store.get_mut("m.0.w").unwrap().data = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let batch = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let out = model.forward(&mut store, &batch, Mode::Eval).unwrap();
        assert_eq!(out.data, batch.data);
    }

    #[test]
    fn batchnorm_standardizes_batch() {
        // per-feature mean 5, variance 4, scale 1, shift 0
        let model = Model::new("bn", vec![LayerSpec::BatchNorm { dim: 1, affine_trainable: true }]);
        let mut store = ParamStore::new(0);
        model.init_params(&mut store);
        let batch = Tensor::new(vec![4, 1], vec![3.0, 7.0, 3.0, 7.0]).unwrap(); // mean 5, var 4
        let out = model.forward(&mut store, &batch, Mode::Train).unwrap();
        let mean: f64 = out.data.iter().sum::<f64>() / 4.0;
        let var: f64 = out.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn batchnorm_train_batch_stats_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::new("bn", vec![LayerSpec::BatchNorm { dim: 5, affine_trainable: false }]);
        let mut store = ParamStore::new(3);
        model.init_params(&mut store);
        for _ in 0..5 {
            let data: Vec<f64> = (0..40 * 5).map(|_| rng.gen_range(-3.0..9.0)).collect();
            let batch = Tensor::new(vec![40, 5], data).unwrap();
            let out = model.forward(&mut store, &batch, Mode::Train).unwrap();
            for j in 0..5 {
                let col: Vec<f64> = (0..40).map(|i| out.data[i * 5 + j]).collect();
                let mean: f64 = col.iter().sum::<f64>() / 40.0;
                let var: f64 = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 40.0;
                assert!(mean.abs() <= 1e-6);
                assert!((var - 1.0).abs() <= 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn two_layer_tanh_matches_straight_line_oracle() {
        let model = Model::new(
            "t",
            vec![
                LayerSpec::Linear { input: 2, output: 3 },
                LayerSpec::Relu,
                LayerSpec::Linear { input: 3, output: 2 },
            ],
        );
        let mut store = ParamStore::new(42);
        model.init_params(&mut store);
        let batch = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
        let out = model.forward(&mut store, &batch, Mode::Eval).unwrap();

        // independent straight-line forward
        let w1 = &store.get("t.0.w").unwrap().data;
        let b1 = &store.get("t.0.b").unwrap().data;
        let w2 = &store.get("t.2.w").unwrap().data;
        let b2 = &store.get("t.2.b").unwrap().data;
        let x = [0.3, -0.7];
        let mut h = [0.0; 3];
        for j in 0..3 {
            h[j] = (x[0] * w1[j] + x[1] * w1[3 + j] + b1[j]).max(0.0);
        }
        for j in 0..2 {
            let y = h[0] * w2[j] + h[1] * w2[2 + j] + h[2] * w2[4 + j] + b2[j];
            assert!((out.data[j] - y).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let model = linear_model(3, 2);
        let mut store = ParamStore::new(1);
        model.init_params(&mut store);
        let batch = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let upstream = Tensor::zeros(vec![2, 2]);
        let grads = model.backward(&mut store, &batch, &upstream, Mode::Eval).unwrap();
        for (_, g) in grads {
            assert!(g.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let model = linear_model(4, 3);
        let mut store = ParamStore::new(2);
        model.init_params(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..2 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor::new(vec![2, 4], data).unwrap();
        let err = grad_check(
            &store,
            |g, s| {
                let input = g.leaf(&batch);
                let out = model.forward_graph(g, s, input, Mode::Eval)?;
                let sq = g.mul(out, out)?;
                Ok(g.sum(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4 * 0.01, "relative error {err}"); // linear case is exact-ish
    }

    #[test]
    fn stop_gradient_blocks_upstream_flow() {
        // loss = sum(sg(W x)) has zero gradient w.r.t. W
        let model = linear_model(2, 2);
        let mut store = ParamStore::new(3);
        model.init_params(&mut store);
        let batch = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let mut s = store.clone();
        let input = g.leaf(&batch);
        let out = model.forward_graph(&mut g, &mut s, input, Mode::Eval).unwrap();
        let blocked = g.stop_grad(out);
        let loss = g.sum(blocked);
        let grads = g.backward(loss).unwrap();
        assert!(grads.is_empty() || grads.values().all(|v| v.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn stop_gradient_is_identity_in_forward() {
        let t = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        assert_eq!(stop_gradient(&t).data, t.data);
        let mut g = Graph::new();
        let a = g.leaf(&t);
        let sg = g.stop_grad(a);
        assert_eq!(g.value(sg), t.data.as_slice());
    }

    #[test]
    fn product_with_stopped_copy_matches_symbolic_derivative() {
        // d/dtheta [ f * sg(f) ] = sg(f) * f' for f = theta^3:
        // expected 3 theta^2 * theta^3 = 3 theta^5
        let theta = 1.3f64;
        let mut store = ParamStore::new(0);
        store.insert("theta", vec![1], vec![theta], true);
        let mut g = Graph::new();
        let th = store.bind(&mut g, "theta").unwrap();
        let th2 = g.mul(th, th).unwrap();
        let f = g.mul(th2, th).unwrap();
        let sgf = g.stop_grad(f);
        let prod = g.mul(f, sgf).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let expected = 3.0 * theta.powi(5);
        assert!((grads["theta"][0] - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_stopped_square_is_zero() {
        let mut store = ParamStore::new(0);
        store.insert("theta", vec![1], vec![0.7], true);
        let mut g = Graph::new();
        let th = store.bind(&mut g, "theta").unwrap();
        let sq = g.mul(th, th).unwrap();
        let sg = g.stop_grad(sq);
        let loss = g.sum(sg);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("theta").map(|v| v[0]).unwrap_or(0.0) == 0.0);
    }

    #[test]
    fn grad_check_quadratic_loss_on_linear_model() {
        let model = linear_model(3, 2);
        let mut store = ParamStore::new(7);
        model.init_params(&mut store);
        let batch = Tensor::new(vec![2, 3], vec![0.1, 0.4, -0.2, 0.9, -0.5, 0.3]).unwrap();
        let err = grad_check(
            &store,
            |g, s| {
                let input = g.leaf(&batch);
                let out = model.forward_graph(g, s, input, Mode::Eval)?;
                let sq = g.mul(out, out)?;
                Ok(g.sum(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn grad_check_constant_loss_is_zero() {
        let mut store = ParamStore::new(0);
        store.insert("w", vec![2], vec![0.5, -0.5], true);
        let err = grad_check(&store, |g, _s| Ok(g.scalar(3.25)), 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_loss_with_stop_gradient_inside() {
        // loss = sum( (w x) * sg(w x) ): analytic grad must match the
        // detached derivative, which the finite difference of the *whole*
        // loss does NOT equal; so check against the hand-derived value.
        let mut store = ParamStore::new(0);
        store.insert("w", vec![1], vec![2.0], true);
        let x = 1.5f64;
        let mut g = Graph::new();
        let w = store.bind(&mut g, "w").unwrap();
        let xv = g.scalar(x);
        let wx = g.mul(w, xv).unwrap();
        let sg = g.stop_grad(wx);
        let prod = g.mul(wx, sg).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        // d/dw [ (wx) * const ] = x * (w x)
        let expected = x * (2.0 * x);
        assert!((grads["w"][0] - expected).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_is_batch_size_independent() {
        let model = Model::new(
            "e",
            vec![
                LayerSpec::Linear { input: 3, output: 4 },
                LayerSpec::BatchNorm { dim: 4, affine_trainable: false },
            ],
        );
        let mut store = ParamStore::new(9);
        model.init_params(&mut store);
        // shift running stats away from the defaults first
        let warm = Tensor::new(vec![8, 3], (0..24).map(|i| (i as f64) / 7.0).collect()).unwrap();
        model.forward(&mut store, &warm, Mode::Train).unwrap();

        let x = vec![0.2, -0.4, 1.0];
        let single = Tensor::new(vec![1, 3], x.clone()).unwrap();
        let mut both = x.clone();
        both.extend_from_slice(&[3.0, 2.0, 1.0]);
        let pair = Tensor::new(vec![2, 3], both).unwrap();
        let out1 = model.forward(&mut store, &single, Mode::Eval).unwrap();
        let out2 = model.forward(&mut store, &pair, Mode::Eval).unwrap();
        assert_eq!(out1.data.as_slice(), &out2.data[..4]);
        let out1b = model.forward(&mut store, &single, Mode::Eval).unwrap();
        assert_eq!(out1.data, out1b.data);
    }

    #[test]
    fn embed_equals_onehot_matmul() {
        let mut store = ParamStore::new(4);
        store.insert("table", vec![5, 3], (0..15).map(|i| i as f64 * 0.1).collect(), true);
        let indices = vec![4usize, 0, 2, 2];

        let mut g = Graph::new();
        let table = store.bind(&mut g, "table").unwrap();
        let emb = g.embed(table, indices.clone()).unwrap();

        let mut onehot = vec![0.0; indices.len() * 5];
        for (r, &ix) in indices.iter().enumerate() {
            onehot[r * 5 + ix] = 1.0;
        }
        let mut g2 = Graph::new();
        let table2 = store.bind(&mut g2, "table").unwrap();
        let oh = g2.leaf_from(vec![indices.len(), 5], onehot);
        let mm = g2.matmul(oh, table2).unwrap();
        assert_eq!(g.value(emb), g2.value(mm));

        // same gradient through both paths
        let s1 = g.sum(emb);
        let s2 = g2.sum(mm);
        let gr1 = g.backward(s1).unwrap();
        let gr2 = g2.backward(s2).unwrap();
        assert_eq!(gr1["table"], gr2["table"]);
    }

    #[test]
    fn matmul_tn_matches_transpose_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a_data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let a = g.leaf_from(vec![4, 3], a_data.clone());
        let b = g.leaf_from(vec![4, 2], b_data.clone());
        let tn = g.matmul_tn(a, b).unwrap();
        // manual transpose
        let mut at = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                at[j * 4 + i] = a_data[i * 3 + j];
            }
        }
        let a_t = g.leaf_from(vec![3, 4], at);
        let mm = g.matmul(a_t, b).unwrap();
        for (x, y) in g.value(tn).iter().zip(g.value(mm)) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn conv2d_tiny_hand_case() {
        // 1x1x2x2 input, 1x1x1x1 kernel of 2.0, bias 0.5, stride 1
        let mut g = Graph::new();
        let x = g.leaf_from(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = g.leaf_from(vec![1, 1, 1, 1], vec![2.0]);
        let b = g.leaf_from(vec![1], vec![0.5]);
        let y = g.conv2d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y), &[2.5, 4.5, 6.5, 8.5]);
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    }

    #[test]
    fn rnn_cell_unrolled_grad_check() {
        let cell = Model::new("r", vec![LayerSpec::TanhRnnCell { input: 3, hidden: 4 }]);
        let mut store = ParamStore::new(11);
        cell.init_params(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let frames: Vec<Vec<f64>> =
            (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let err = grad_check(
            &store,
            |g, s| {
                let mut h = g.leaf_from(vec![1, 4], vec![0.0; 4]);
                for frame in &frames {
                    let x = g.leaf_from(vec![1, 3], frame.clone());
                    h = tanh_rnn_step(g, s, "r.0", x, h)?;
                }
                let sq = g.mul(h, h)?;
                Ok(g.sum(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = Model::new(
            "c",
            vec![
                LayerSpec::Linear { input: 3, output: 4 },
                LayerSpec::BatchNorm { dim: 4, affine_trainable: true },
            ],
        );
        let mut store = ParamStore::new(123);
        model.init_params(&mut store);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        checkpoint::save(&store, &path).unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        assert_eq!(loaded.seed, store.seed);
        for (name, arr) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(&l.shape, &arr.shape);
            assert_eq!(&l.data, &arr.data);
            assert_eq!(l.trainable, arr.trainable);
        }
    }

    #[test]
    fn forward_errors_name_the_layer_on_shape_mismatch() {
        let model = linear_model(3, 2);
        let mut store = ParamStore::new(0);
        model.init_params(&mut store);
        let bad = Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap();
        let err = model.forward(&mut store, &bad, Mode::Eval).unwrap_err();
        assert!(matches!(err, NnError::ShapeMismatch { .. }));
    }
}
