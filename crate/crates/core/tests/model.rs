use proptest::prelude::*;
use t4t_core::checkpoint::Checkpoint;
use t4t_core::config::{ModelSize, RunConfig};
use t4t_core::decoder::Fusion;
use t4t_core::metrics::{count_flops, count_params};
use t4t_core::nn::seeded_rng;
use t4t_core::{Graph, Model32, ModelConfig, Tensor};

fn forward_shapes(cfg: &ModelConfig, size: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let model = Model32::new(cfg, 0).unwrap();
    let g = Graph::inference();
    let p = model.params.bind(&g);
    let image = Tensor::uniform(vec![3, size, size], 0.0, 1.0, &mut seeded_rng(1)).unwrap();
    let out = model.forward(&g, &p, &g.constant(image)).unwrap();
    let pyramid = out.pyramid.shapes().to_vec();
    let tpm = out.heads.iter().flat_map(|h| h.stage_maps.iter().map(|m| m.shape().to_vec())).collect();
    let logits = out.heads.iter().map(|h| h.logits.shape().to_vec()).collect();
    (pyramid, tpm, logits)
}

#[test]
fn tiny_shapes_at_64_and_128() {
    for size in [64, 128] {
        let (pyramid, tpm, logits) = forward_shapes(&ModelConfig::tiny(), size);
        let want: Vec<Vec<usize>> =
            [(64, 4), (128, 8), (320, 16), (512, 32)].iter().map(|&(c, s)| vec![c, size / s, size / s]).collect();
        assert_eq!(pyramid, want);
        assert_eq!(tpm.len(), 8);
        assert!(tpm.iter().all(|s| s == &vec![64, size / 4, size / 4]));
        assert_eq!(logits, vec![vec![13, size, size], vec![12, size, size]]);
    }
}

#[test]
fn toy_model_shapes_and_single_head() {
    let (pyramid, tpm, logits) = forward_shapes(&ModelConfig::toy(), 32);
    assert_eq!(pyramid, vec![vec![8, 8, 8], vec![16, 4, 4], vec![24, 2, 2], vec![32, 1, 1]]);
    assert!(tpm.iter().all(|s| s == &vec![8, 8, 8]));
    assert_eq!(logits, vec![vec![4, 32, 32], vec![4, 32, 32]]);

    let (_, _, logits) = forward_shapes(&ModelConfig::toy().single_head(), 64);
    assert_eq!(logits, vec![vec![4, 64, 64]]);
}

#[test]
fn concat_fusion_widens_the_head_input() {
    let mut cfg = ModelConfig::toy();
    cfg.tpm.fusion = Fusion::Concat;
    let (_, _, logits) = forward_shapes(&cfg, 32);
    assert_eq!(logits[0], vec![4, 32, 32]);
    assert!(count_params(&cfg).unwrap() > count_params(&ModelConfig::toy()).unwrap());
}

#[test]
fn inputs_off_the_stride_grid_are_rejected() {
    let model = Model32::new(&ModelConfig::toy(), 0).unwrap();
    for (h, w) in [(30, 32), (32, 48), (64, 40)] {
        assert!(model.infer(&Tensor::zeros(vec![3, h, w]).unwrap()).is_err(), "{h}x{w}");
    }
    assert!(model.infer(&Tensor::zeros(vec![1, 32, 32]).unwrap()).is_err());
}

#[test]
fn counted_parameters_match_allocated_ones() {
    for size in [ModelSize::Toy, ModelSize::Tiny] {
        let cfg = RunConfig::preset(size).model;
        for c in [cfg.clone(), cfg.clone().single_head()] {
            let model = Model32::new(&c, 0).unwrap();
            assert_eq!(count_params(&c).unwrap(), model.param_count() as u64, "{size}");
        }
    }
}

#[test]
fn costs_grow_with_tpm_width_and_input() {
    let mut last = (0, 0);
    for c in [64, 128, 256, 512] {
        let mut cfg = ModelConfig::tiny();
        cfg.tpm.embed_dim = c;
        let r = count_flops(&cfg.single_head(), 512, 512).unwrap();
        assert!(r.params > last.0 && r.macs > last.1);
        last = (r.params, r.macs);
    }
    let small = count_flops(&ModelConfig::tiny(), 256, 256).unwrap();
    let big = count_flops(&ModelConfig::tiny(), 512, 512).unwrap();
    assert_eq!(small.params, big.params);
    assert!(big.macs > 3 * small.macs);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = RunConfig::preset(ModelSize::Toy);
    let model = Model32::new(&cfg.model, 11).unwrap();
    let snapshot = cfg.model_snapshot();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    Checkpoint::from_model(&model, &snapshot).save(&path).unwrap();

    let mut restored = Model32::new(&cfg.model, 999).unwrap();
    Checkpoint::load(&path).unwrap().apply(&mut restored, &snapshot).unwrap();
    for (a, b) in model.params.iter().zip(restored.params.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    let image = Tensor::uniform(vec![3, 32, 32], 0.0, 1.0, &mut seeded_rng(2)).unwrap();
    assert_eq!(model.infer(&image).unwrap(), restored.infer(&image).unwrap());
}

#[test]
fn checkpoint_with_another_architecture_fails_loudly() {
    let cfg = RunConfig::preset(ModelSize::Toy);
    let model = Model32::new(&cfg.model, 0).unwrap();
    let ck = Checkpoint::from_model(&model, &cfg.model_snapshot());

    let mut other = cfg.clone();
    other.model.tpm.embed_dim = 16;
    let mut wider = Model32::new(&other.model, 0).unwrap();
    let err = ck.apply(&mut wider, &other.model_snapshot()).unwrap_err().to_string();
    assert!(err.contains("tpm"), "{err}");

    let mut bytes = ck.to_bytes().unwrap();
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    let bytes = ck.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

fn any_config() -> impl Strategy<Value = RunConfig> {
    (
        prop_oneof![Just(ModelSize::Toy), Just(ModelSize::Tiny), Just(ModelSize::Small), Just(ModelSize::Medium)],
        0.5f64..5.0,
        0.01f64..1.0,
        0.01f64..1.0,
        1usize..100,
        1e-6f64..1e-1,
        1usize..300,
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(size, obstacle, trans, walk, cycle, lr, epochs, concat, seed)| {
            let mut c = RunConfig::preset(size);
            c.decision.theta_obstacle_m = obstacle;
            c.decision.theta_trans = trans;
            c.decision.theta_walkable = walk;
            c.decision.cycle_frames = cycle;
            c.train.lr = lr;
            c.train.epochs = epochs;
            c.train.seed = seed;
            if concat {
                c.model.tpm.fusion = Fusion::Concat;
            }
            c
        })
}

proptest! {
    #[test]
    fn config_render_parse_round_trips(cfg in any_config()) {
        let text = cfg.render();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.render(), text);
    }
}

#[test]
fn bad_config_values_are_rejected() {
    for text in [
        "model = huge",
        "theta_trans = 1.5",
        "cycle_frames = 0",
        "theta_obstacle_m = 0.1",
        "tpm.embed_dim = 0",
        "no_such_key = 1",
        "theta_walkable",
    ] {
        assert!(RunConfig::parse(text).is_err(), "{text}");
    }
}
