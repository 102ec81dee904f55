use super::*;

fn ident_dense(n: usize) -> (Graph, ParameterSet) {
    let mut b = GraphBuilder::new(vec![n]);
    let y = b.add(LayerSpec::Dense { input: n, output: n }, &[Port::Input]).unwrap();
    let g = b.finish(y, "t.").unwrap();
    let mut ps = ParameterSet::new();
    g.init_params(&mut ps, 0).unwrap();
    // overwrite with identity weights, zero bias
    let wid = ps.id_of("t.n000.weight").unwrap();
    let w = ps.value_mut(wid);
    w.data_mut().fill(0.0);
    for i in 0..n {
        w.data_mut()[i * n + i] = 1.0;
    }
    (g, ps)
}

#[test]
fn dense_identity_forward() {
    let (g, ps) = ident_dense(5);
    let x = Tensor::new(vec![1, 5], vec![0.1, -2.0, 3.0, 0.0, 7.5]).unwrap();
    let (y, _) = g.forward(&ps, &x, None).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn sigmoid_of_zero_vector_is_half() {
    let mut b = GraphBuilder::new(vec![4]);
    let y = b.add(LayerSpec::Sigmoid, &[Port::Input]).unwrap();
    let g = b.finish(y, "s.").unwrap();
    let ps = ParameterSet::new();
    let (out, _) = g.forward(&ps, &Tensor::zeros(vec![2, 4]), None).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.5));
}

#[test]
fn conv_delta_kernel_identity_through_graph() {
    let mut b = GraphBuilder::new(vec![1, 6]);
    let y = b
        .add(LayerSpec::Conv1d { in_channels: 1, out_channels: 1, kernel: 3 }, &[Port::Input])
        .unwrap();
    let g = b.finish(y, "c.").unwrap();
    let mut ps = ParameterSet::new();
    g.init_params(&mut ps, 1).unwrap();
    let wid = ps.id_of("c.n000.weight").unwrap();
    ps.value_mut(wid).data_mut().copy_from_slice(&[0.0, 1.0, 0.0]);
    let x = Tensor::new(vec![1, 1, 6], vec![0.5, -1.0, 2.0, 3.0, -4.0, 0.25]).unwrap();
    let (out, _) = g.forward(&ps, &x, None).unwrap();
    assert_eq!(out.data(), x.data());
}

#[test]
fn dense_backward_matches_outer_product() {
    // loss = sum(output) with identity weights: dW[i][j] = x[i] for all j
    let (g, mut ps) = ident_dense(3);
    let x = Tensor::new(vec![1, 3], vec![2.0, -1.5, 4.0]).unwrap();
    let (y, mut tape) = g.forward(&ps, &x, None).unwrap();
    let ones = Tensor::full(y.shape().to_vec(), 1.0);
    let dx = g.backward(&mut ps, &mut tape, &ones).unwrap();
    let wid = ps.id_of("t.n000.weight").unwrap();
    let dw = ps.grad(wid);
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(dw.data()[i * 3 + j], x.data()[i]);
        }
    }
    // identity weights: dx = dy . W^T = ones
    assert!(dx.data().iter().all(|&v| v == 1.0));
    let bid = ps.id_of("t.n000.bias").unwrap();
    assert!(ps.grad(bid).data().iter().all(|&v| v == 1.0));
}

#[test]
fn zero_output_gradient_gives_zero_param_gradients() {
    let (g, mut ps) = ident_dense(4);
    let x = Tensor::randn(vec![2, 4], &mut crate::rng::rng_from(9, &[]));
    let (_, mut tape) = g.forward(&ps, &x, None).unwrap();
    let zeros = Tensor::zeros(vec![2, 4]);
    g.backward(&mut ps, &mut tape, &zeros).unwrap();
    for e in ps.iter() {
        assert!(e.grad.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn tape_reuse_is_a_usage_error() {
    let (g, mut ps) = ident_dense(2);
    let x = Tensor::zeros(vec![1, 2]);
    let (_, mut tape) = g.forward(&ps, &x, None).unwrap();
    let dy = Tensor::zeros(vec![1, 2]);
    g.backward(&mut ps, &mut tape, &dy).unwrap();
    let err = g.backward(&mut ps, &mut tape, &dy).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn shape_mismatch_is_a_config_error() {
    let (g, ps) = ident_dense(3);
    let bad = Tensor::zeros(vec![1, 4]);
    assert!(matches!(g.forward(&ps, &bad, None).unwrap_err(), Error::Config(_)));
}

#[test]
fn non_finite_activation_names_the_layer() {
    let (g, mut ps) = ident_dense(2);
    let wid = ps.id_of("t.n000.weight").unwrap();
    ps.value_mut(wid).data_mut()[0] = f64::INFINITY as crate::tensor::Real;
    let x = Tensor::full(vec![1, 2], 1.0);
    let err = g.forward(&ps, &x, None).unwrap_err();
    match err {
        Error::Numeric(msg) => assert!(msg.contains("dense") && msg.contains("node 0"), "{msg}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn time_embedding_depends_on_t() {
    let mut b = GraphBuilder::new(vec![4]);
    let e = b.add(LayerSpec::SinusoidalTimeEmbedding { dim: 8 }, &[Port::Time]).unwrap();
    let d = b.add(LayerSpec::Dense { input: 8, output: 4 }, &[e]).unwrap();
    let y = b.add(LayerSpec::BroadcastAdd, &[Port::Input, d]).unwrap();
    let g = b.finish(y, "te.").unwrap();
    let mut ps = ParameterSet::new();
    g.init_params(&mut ps, 3).unwrap();
    let x = Tensor::zeros(vec![1, 4]);
    let (y1, _) = g.forward(&ps, &x, Some(&[1])).unwrap();
    let (y2, _) = g.forward(&ps, &x, Some(&[40])).unwrap();
    assert!(y1.max_abs_diff(&y2) > 1e-9);
    // missing time index is a configuration error
    assert!(matches!(g.forward(&ps, &x, None).unwrap_err(), Error::Config(_)));
}

#[test]
fn skip_concat_and_upsample_shapes() {
    let mut b = GraphBuilder::new(vec![2, 4]);
    let down = b
        .add(
            LayerSpec::StridedDownsample { in_channels: 2, out_channels: 3, kernel: 3, stride: 2 },
            &[Port::Input],
        )
        .unwrap();
    let up = b.add(LayerSpec::NearestUpsample { factor: 2 }, &[down]).unwrap();
    let cat = b.add(LayerSpec::SkipConcat, &[up, Port::Input]).unwrap();
    let g = b.finish(cat, "u.").unwrap();
    assert_eq!(g.output_shape(), &[5, 4]);
    let mut ps = ParameterSet::new();
    g.init_params(&mut ps, 5).unwrap();
    let x = Tensor::randn(vec![3, 2, 4], &mut crate::rng::rng_from(11, &[]));
    let (y, _) = g.forward(&ps, &x, None).unwrap();
    assert_eq!(y.shape(), &[3, 5, 4]);
}

#[test]
fn descriptor_roundtrip_preserves_structure() {
    let mut b = GraphBuilder::new(vec![1, 8]);
    let c1 = b
        .add(LayerSpec::Conv1d { in_channels: 1, out_channels: 4, kernel: 3 }, &[Port::Input])
        .unwrap();
    let n1 = b.add(LayerSpec::LayerNorm { channels: 4 }, &[c1]).unwrap();
    let a1 = b.add(LayerSpec::Silu, &[n1]).unwrap();
    let d1 = b
        .add(
            LayerSpec::StridedDownsample { in_channels: 4, out_channels: 8, kernel: 3, stride: 2 },
            &[a1],
        )
        .unwrap();
    let u1 = b.add(LayerSpec::NearestUpsample { factor: 2 }, &[d1]).unwrap();
    let cat = b.add(LayerSpec::SkipConcat, &[u1, a1]).unwrap();
    let out = b
        .add(LayerSpec::Conv1d { in_channels: 12, out_channels: 1, kernel: 3 }, &[cat])
        .unwrap();
    let g = b.finish(out, "rt.").unwrap();

    let text = g.to_descriptor();
    let g2 = graph_from_descriptor(&text).unwrap();
    assert_eq!(g2.to_descriptor(), text);
    assert_eq!(g2.param_count(), g.param_count());

    let mut ps = ParameterSet::new();
    g.init_params(&mut ps, 7).unwrap();
    let x = Tensor::randn(vec![2, 1, 8], &mut crate::rng::rng_from(13, &[]));
    let (y1, _) = g.forward(&ps, &x, None).unwrap();
    let (y2, _) = g2.forward(&ps, &x, None).unwrap();
    assert_eq!(y1.data(), y2.data());
}

#[test]
fn backward_input_gradient_shape_matches_forward_input() {
    let mut b = GraphBuilder::new(vec![2, 6]);
    let c = b
        .add(LayerSpec::Conv1d { in_channels: 2, out_channels: 3, kernel: 3 }, &[Port::Input])
        .unwrap();
    let r = b.add(LayerSpec::Relu, &[c]).unwrap();
    let g = b.finish(r, "bs.").unwrap();
    let mut ps = ParameterSet::new();
    g.init_params(&mut ps, 21).unwrap();
    let x = Tensor::randn(vec![4, 2, 6], &mut crate::rng::rng_from(17, &[]));
    let (y, mut tape) = g.forward(&ps, &x, None).unwrap();
    let dy = Tensor::full(y.shape().to_vec(), 0.5);
    let dx = g.backward(&mut ps, &mut tape, &dy).unwrap();
    assert_eq!(dx.shape(), x.shape());
}
