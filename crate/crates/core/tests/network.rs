use mmsr_core::network::{forward, layer_inventory, predict_tensor, write_checkpoint};
use mmsr_core::synth::synth_pair;
use mmsr_core::{Graph, ModelConfig, ModelParams, Variant};

fn cfg(variant: Variant, n: usize, m: usize) -> ModelConfig {
    ModelConfig { variant, n, m, channels: 6, scale: 4 }
}

#[test]
fn golden_inventory() {
    let names: Vec<String> = layer_inventory(&ModelConfig::default()).into_iter().map(|l| l.name).collect();
    let expected = [
        "src.conv1", "src.conv2", "src.res1.conv1", "src.res1.conv2", "src.res2.conv1", "src.res2.conv2",
        "guide.conv1", "guide.conv2", "guide.res1.conv1", "guide.res1.conv2", "guide.res2.conv1", "guide.res2.conv2",
        "fuse",
        "pred.res1.conv1", "pred.res1.conv2", "pred.res2.conv1", "pred.res2.conv2", "pred.res3.conv1", "pred.res3.conv2",
        "pred.out",
    ];
    assert_eq!(names, expected);
    let params = ModelParams::<f32>::build(ModelConfig::default(), 0).unwrap();
    let c = 64;
    let expected_numel = (c + c) + (c * c + c) * 5 // source
        + (27 * c + c) + (9 * c * c + c) * 5 // guide
        + (2 * c * c + c) // fuse
        + (c * c + c) * 6 + (c + 1); // prediction
    assert_eq!(params.numel(), expected_numel);
}

#[test]
fn variant_equivalences_are_exact() {
    let pair = synth_pair(4, 16, 4).unwrap();
    let run = |c: ModelConfig| {
        let p = ModelParams::<f32>::build(c, 21).unwrap();
        predict_tensor(&p, &pair.lr, &pair.guide).unwrap()
    };
    assert_eq!(run(cfg(Variant::Model3, 1, 1)), run(cfg(Variant::Model0, 1, 1)));
    assert_eq!(run(cfg(Variant::Model3, 1, 5)), run(cfg(Variant::Model1, 1, 5)));
    assert_eq!(run(cfg(Variant::Model3, 5, 1)), run(cfg(Variant::Model2, 5, 1)));
    assert_ne!(run(cfg(Variant::Model3, 5, 3)), run(cfg(Variant::Model0, 5, 3)));
}

#[test]
fn every_parameter_receives_a_finite_gradient() {
    let pair = synth_pair(8, 16, 4).unwrap();
    for v in Variant::ALL {
        let c = cfg(v, 3, 3);
        let params = ModelParams::<f64>::build(c, 5).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let s = g.input(pair.lr.to_tensor());
        let gd = g.input(pair.guide.to_tensor());
        let out = forward(&mut g, &bound, &c, s, gd).unwrap().output;
        let pooled = g.avg_pool_down(out, 4).unwrap();
        let loss = g.l1_loss(pooled, s).unwrap();
        g.backward(loss).unwrap();
        for (name, &var) in params.names().iter().zip(bound.vars()) {
            let grad = g.grad(var).unwrap_or_else(|| panic!("{v}: {name} has no gradient"));
            assert!(grad.is_finite(), "{v}: {name}");
            assert!(grad.data().iter().any(|&x| x != 0.0), "{v}: {name} gradient is identically zero");
        }
    }
}

#[test]
fn forward_is_thread_count_invariant() {
    let pair = synth_pair(2, 32, 4).unwrap();
    let params = ModelParams::<f32>::build(cfg(Variant::Model3, 5, 3), 1).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| predict_tensor(&params, &pair.lr, &pair.guide).unwrap())
    };
    let one = run(1);
    for t in [2, 4] {
        assert!(one.max_abs_diff(&run(t)).unwrap() < 1e-6);
    }
}

#[test]
fn checkpoint_header_layout() {
    let c = cfg(Variant::Model5, 3, 1);
    let params = ModelParams::<f32>::build(c, 0).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &params).unwrap();
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    assert_eq!(&buf[..8], b"MMSRCKPT");
    assert_eq!(u32_at(8), 1);
    assert_eq!(buf[12], Variant::Model5.code());
    assert_eq!([u32_at(13), u32_at(17), u32_at(21), u32_at(25)], [3, 1, 6, 4]);
    assert_eq!(u32_at(29) as usize, params.len());
    let name_len = u32_at(33) as usize;
    assert_eq!(&buf[37..37 + name_len], b"src.conv1.weight");
    let o = 37 + name_len;
    assert_eq!(buf[o], 0, "f32 dtype code");
    assert_eq!(u32_at(o + 1), 4);
    let first = f32::from_le_bytes(buf[o + 21..o + 25].try_into().unwrap());
    assert_eq!(first, params.tensors()[0].data()[0]);
}

#[test]
fn single_window_variants_ignore_m() {
    let pair = synth_pair(9, 16, 4).unwrap();
    for v in [Variant::Model4, Variant::Model5, Variant::Model6] {
        let run = |m| {
            let p = ModelParams::<f32>::build(cfg(v, 5, m), 3).unwrap();
            predict_tensor(&p, &pair.lr, &pair.guide).unwrap()
        };
        assert_eq!(run(1), run(3), "{v}");
    }
    let m4 = layer_inventory(&ModelConfig::default().with_variant(Variant::Model4));
    let k: Vec<usize> = m4.iter().filter(|l| l.name.ends_with(".filter")).map(|l| l.k).collect();
    assert_eq!(k, [11, 11]);
}
