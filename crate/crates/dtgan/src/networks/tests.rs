use super::*;
use crate::attention::NormMode;
use crate::tensor::GradCheckItem;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    Tensor::from_fn(shape, |_| rng.next_uniform(-1.0, 1.0))
}

fn small_encoder(seed: u64) -> (ParamStore, TextEncoder) {
    let mut rng = Rng::seed_from(seed);
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(EncoderConfig {
        vocab_size: 6,
        seq_len: 4,
        embed_dim: 5,
        hidden_dim: 6,
        sent_dim: 8,
        ..EncoderConfig::default()
    });
    enc.register(&mut store, &mut rng).unwrap();
    (store, enc)
}

#[test]
fn encoder_zero_weights_give_zero_vector() {
    let (store, enc) = small_encoder(1);
    let mut zeroed = ParamStore::new();
    for (path, t) in store.iter() {
        zeroed.register(path, Tensor::zeros(t.shape()), true).unwrap();
    }
    let s = enc.encode(&zeroed, &[vec![0, 0, 0, 0]]).unwrap();
    assert!(s.data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_is_deterministic() {
    let (store, enc) = small_encoder(2);
    let tokens = vec![vec![1, 2, 3, 0], vec![4, 5, 0, 0]];
    let a = enc.encode(&store, &tokens).unwrap();
    let b = enc.encode(&store, &tokens).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn encoder_is_order_sensitive() {
    // Swapping two tokens must change the vector for generic weights.
    for seed in 0..100 {
        let (store, enc) = small_encoder(100 + seed);
        let a = enc.encode(&store, &[vec![1, 2, 0, 0]]).unwrap();
        let b = enc.encode(&store, &[vec![2, 1, 0, 0]]).unwrap();
        assert_ne!(a.data(), b.data(), "seed {seed}");
    }
}

#[test]
fn encoder_rejects_out_of_vocab_and_bad_length() {
    let (store, enc) = small_encoder(3);
    assert!(enc.encode(&store, &[vec![9, 0, 0, 0]]).is_err());
    assert!(enc.encode(&store, &[vec![1, 2]]).is_err());
}

#[test]
fn encoder_lstm_variant_works() {
    let mut rng = Rng::seed_from(4);
    let mut store = ParamStore::new();
    let enc = TextEncoder::new(EncoderConfig {
        vocab_size: 6,
        seq_len: 4,
        embed_dim: 5,
        hidden_dim: 6,
        sent_dim: 8,
        cell: CellKind::Lstm,
        ..EncoderConfig::default()
    });
    enc.register(&mut store, &mut rng).unwrap();
    let s = enc.encode(&store, &[vec![1, 2, 3, 0]]).unwrap();
    assert_eq!(s.shape(), &[1, 8]);
    s.validate_finite("lstm sentence").unwrap();
}

fn small_gen_cfg() -> GeneratorConfig {
    GeneratorConfig {
        num_layers: 2,
        base_channels: 8,
        min_channels: 4,
        sent_dim: 8,
        noise_dim: 8,
        ..GeneratorConfig::default()
    }
}

fn build_generator(cfg: GeneratorConfig, seed: u64) -> (ParamStore, Generator) {
    let mut rng = Rng::seed_from(seed);
    let mut store = ParamStore::new();
    let gen = Generator::new(cfg);
    gen.register(&mut store, &mut rng).unwrap();
    (store, gen)
}

#[test]
fn generator_resolution_law() {
    for layers in [2, 3, 4] {
        let cfg = GeneratorConfig { num_layers: layers, ..small_gen_cfg() };
        assert_eq!(cfg.resolution(), 4 * (1 << (layers - 1)));
        let (store, gen) = build_generator(cfg.clone(), 10);
        let z = rand_t(&[1, 8], 11);
        let s = rand_t(&[1, 8], 12);
        let (img, maps) = gen.forward(&store, &z, &s).unwrap();
        assert_eq!(img.shape(), &[1, 3, cfg.resolution(), cfg.resolution()]);
        assert_eq!(maps.len(), layers);
    }
}

#[test]
fn generator_output_bounded_by_tanh() {
    let (store, gen) = build_generator(small_gen_cfg(), 13);
    let z = rand_t(&[2, 8], 14).mul_scalar(3.0).unwrap();
    let s = rand_t(&[2, 8], 15);
    let (img, _) = gen.forward(&store, &z, &s).unwrap();
    assert!(img.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
}

#[test]
fn generator_with_zero_gates_equals_attention_free_skeleton() {
    let cfg = small_gen_cfg();
    let (store, gen) = build_generator(cfg.clone(), 16);
    let skeleton_cfg = GeneratorConfig {
        stage: crate::attention::StageConfig { use_cam: false, use_pam: false, ..cfg.stage },
        ..cfg
    };
    // Same store: the skeleton reads only the conv/norm parameters.
    let skeleton = Generator::new(skeleton_cfg);
    let z = rand_t(&[1, 8], 17);
    let s = rand_t(&[1, 8], 18);
    let (full, _) = gen.forward(&store, &z, &s).unwrap();
    let (bare, _) = skeleton.forward(&store, &z, &s).unwrap();
    assert_eq!(full.data(), bare.data());
}

#[test]
fn generator_deterministic_bit_identical() {
    let (store, gen) = build_generator(small_gen_cfg(), 19);
    let z = rand_t(&[1, 8], 20);
    let s = rand_t(&[1, 8], 21);
    let (a, _) = gen.forward(&store, &z, &s).unwrap();
    let (b, _) = gen.forward(&store, &z, &s).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn generator_gradients_match_finite_differences_end_to_end() {
    // d mean(image) / d θ for every generator parameter, 2-layer 8-channel
    // config against central differences.
    let (mut store, gen) = build_generator(small_gen_cfg(), 22);
    // Gates open, rho off the boundary: keeps every path differentiable.
    for path in store.paths() {
        if path.ends_with(".gamma") {
            store.set(&path, Tensor::from_vec(vec![0.3], &[1])).unwrap();
        }
        if path.ends_with(".rho") {
            let n = store.get(&path).unwrap().numel();
            store.set(&path, Tensor::full(&[n], 0.5)).unwrap();
        }
    }
    let z = rand_t(&[1, 8], 23);
    let s = rand_t(&[1, 8], 24);
    let paths = store.paths();
    let mut inputs = vec![z.clone(), s.clone()];
    for p in &paths {
        inputs.push(store.get(p).unwrap());
    }
    let paths_f = paths.clone();
    let gen_f = gen.clone();
    let item = GradCheckItem::new("generator_e2e", inputs, move |_, xs| {
        let mut probe = ParamStore::new();
        for (i, p) in paths_f.iter().enumerate() {
            probe.register(p, xs[2 + i].clone(), true)?;
        }
        let (img, _) = gen_f.forward(&probe, &xs[0], &xs[1])?;
        img.mean_all()
    });
    let err = item.run().unwrap();
    assert!(err < 1e-4, "generator e2e rel err {err}");
}

#[test]
fn generator_norm_none_has_no_norm_params() {
    let cfg = GeneratorConfig {
        stage: crate::attention::StageConfig { norm_mode: NormMode::None, ..StageConfig::default() },
        ..small_gen_cfg()
    };
    let (store, _) = build_generator(cfg, 25);
    assert!(store.paths().iter().all(|p| !p.contains("norm")));
}

fn small_disc_cfg() -> DiscriminatorConfig {
    DiscriminatorConfig {
        resolution: 16,
        base_channels: 8,
        sent_dim: 8,
        proj_channels: 4,
        head_channels: 8,
        ..DiscriminatorConfig::default()
    }
}

fn build_disc(seed: u64) -> (ParamStore, Discriminator) {
    let mut rng = Rng::seed_from(seed);
    let mut store = ParamStore::new();
    let disc = Discriminator::new(small_disc_cfg());
    disc.register(&mut store, &mut rng).unwrap();
    (store, disc)
}

#[test]
fn discriminator_logit_depends_on_sentence() {
    for seed in 0..20 {
        let (store, disc) = build_disc(200 + seed);
        let img = rand_t(&[1, 3, 16, 16], 300 + seed);
        let s1 = rand_t(&[1, 8], 400 + seed);
        let s2 = rand_t(&[1, 8], 500 + seed);
        let o1 = disc.forward(&store, &img, &s1).unwrap();
        let o2 = disc.forward(&store, &img, &s2).unwrap();
        assert_ne!(o1.logit.data(), o2.logit.data(), "seed {seed}");
    }
}

#[test]
fn discriminator_deterministic() {
    let (store, disc) = build_disc(26);
    let img = rand_t(&[2, 3, 16, 16], 27);
    let s = rand_t(&[2, 8], 28);
    let a = disc.forward(&store, &img, &s).unwrap();
    let b = disc.forward(&store, &img, &s).unwrap();
    assert_eq!(a.logit.data(), b.logit.data());
    assert_eq!(a.features.data(), b.features.data());
}

#[test]
fn discriminator_features_ignore_sentence_bit_exact() {
    let (store, disc) = build_disc(29);
    let img = rand_t(&[2, 3, 16, 16], 30);
    let s1 = rand_t(&[2, 8], 31);
    let s2 = rand_t(&[2, 8], 32);
    let o1 = disc.forward(&store, &img, &s1).unwrap();
    let o2 = disc.forward(&store, &img, &s2).unwrap();
    assert_eq!(o1.features.data(), o2.features.data());
    assert_eq!(o1.features.shape(), &[2, disc.cfg.feature_dim()]);
}

#[test]
fn discriminator_rejects_wrong_resolution() {
    let (store, disc) = build_disc(33);
    let img = rand_t(&[1, 3, 8, 8], 34);
    let s = rand_t(&[1, 8], 35);
    assert!(disc.forward(&store, &img, &s).is_err());
}

#[test]
fn noise_sampling_reproducible_and_sized() {
    let mut a = Rng::seed_from(7);
    let mut b = Rng::seed_from(7);
    let za = sample_noise(3, 5, &mut a);
    let zb = sample_noise(3, 5, &mut b);
    assert_eq!(za.data(), zb.data());
    assert_eq!(za.shape(), &[3, 5]);
    let empty = sample_noise(0, 5, &mut a);
    assert_eq!(empty.shape(), &[0, 5]);
    assert_eq!(empty.numel(), 0);
}

#[test]
fn noise_moments_near_standard_normal() {
    let mut rng = Rng::seed_from(8);
    let z = sample_noise(100, 1000, &mut rng);
    let n = z.numel() as f64;
    let mean: f64 = z.data().iter().sum::<f64>() / n;
    let var: f64 = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var - 1.0).abs() < 0.05, "var {var}");
}

#[test]
fn parameter_count_is_pure_function_of_config() {
    let (s1, _) = build_generator(small_gen_cfg(), 40);
    let (s2, _) = build_generator(small_gen_cfg(), 41);
    assert_eq!(s1.total_elems(), s2.total_elems());
    assert_eq!(s1.paths(), s2.paths());
}
