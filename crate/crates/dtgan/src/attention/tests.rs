use super::*;
use crate::tensor::GradCheckItem;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    Tensor::from_fn(shape, |_| rng.next_uniform(-1.0, 1.0))
}

fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

// ── Channel attention ───────────────────────────────────────────────

fn cam_setup(c: usize, d: usize, seed: u64) -> (ParamStore, CamParams) {
    let mut rng = Rng::seed_from(seed);
    let mut store = ParamStore::new();
    let cam = CamParams::new("cam", c, d);
    cam.register(&mut store, &mut rng).unwrap();
    (store, cam)
}

#[test]
fn cam_zero_gate_is_identity_bit_exact() {
    let (store, cam) = cam_setup(3, 4, 1);
    for seed in 0..5 {
        let h = rand_t(&[2, 3, 4, 4], 10 + seed);
        let s = rand_t(&[2, 4], 20 + seed);
        let (y, _, _) = cam_forward(&h, &s, &cam, &store, CamScoreMode::Elementwise).unwrap();
        assert_eq!(y.data(), h.data(), "seed {seed}");
    }
}

#[test]
fn cam_single_channel_softmax_is_one() {
    let (store, cam) = cam_setup(1, 3, 2);
    let h = rand_t(&[1, 1, 2, 2], 3);
    let s = rand_t(&[1, 3], 4);
    let (_, aa, am) = cam_forward(&h, &s, &cam, &store, CamScoreMode::Elementwise).unwrap();
    assert_eq!(aa.data(), &[1.0]);
    assert_eq!(am.data(), &[1.0]);
}

/// Independent scalar walk of the channel-attention pipeline (N=1,
/// elementwise scores).
#[allow(clippy::too_many_arguments)]
fn cam_oracle(
    h: &Tensor, // [1,C,H,W]
    s: &[f64],
    w_qa: &Tensor,
    w_qm: &Tensor,
    w_kc: &Tensor,
    w_vc: &Tensor,
    w_c: &Tensor,
    gamma: f64,
) -> Vec<f64> {
    let (c, hh, ww) = (h.shape()[1], h.shape()[2], h.shape()[3]);
    let d = s.len();
    let np = hh * ww;
    let mut x_a = vec![0.0; c];
    let mut x_m = vec![f64::NEG_INFINITY; c];
    for ci in 0..c {
        for i in 0..hh {
            for j in 0..ww {
                let v = h.at(&[0, ci, i, j]);
                x_a[ci] += v / np as f64;
                x_m[ci] = x_m[ci].max(v);
            }
        }
    }
    let proj_c = |w: &Tensor, x: &[f64]| -> Vec<f64> {
        (0..c).map(|o| (0..c).map(|i| w.at(&[o, i, 0, 0]) * x[i]).sum()).collect()
    };
    let proj_s = |w: &Tensor| -> Vec<f64> {
        (0..c).map(|o| (0..d).map(|i| w.at(&[o, i]) * s[i]).sum()).collect()
    };
    let q_a = proj_c(w_qa, &x_a);
    let q_m = proj_c(w_qm, &x_m);
    let k = proj_s(w_kc);
    let v = proj_s(w_vc);
    let alpha_a = softmax_vec(&(0..c).map(|i| q_a[i] * k[i] * v[i]).collect::<Vec<_>>());
    let alpha_m = softmax_vec(&(0..c).map(|i| q_m[i] * k[i] * v[i]).collect::<Vec<_>>());
    let mut out = vec![0.0; c * np];
    for co in 0..c {
        for p in 0..np {
            let (i, j) = (p / ww, p % ww);
            let mut acc = 0.0;
            for ci in 0..c {
                acc += w_c.at(&[co, ci, 0, 0]) * alpha_a[ci] * h.at(&[0, ci, i, j]);
                acc += w_c.at(&[co, c + ci, 0, 0]) * alpha_m[ci] * h.at(&[0, ci, i, j]);
            }
            out[co * np + p] = gamma * acc.max(0.0) + h.at(&[0, co, i, j]);
        }
    }
    out
}

#[test]
fn cam_matches_scalar_oracle_identity_setup() {
    // C = 2, per-channel constants {1, 2}, identity-like projections,
    // sentence [1, 0], gate forced to 1.
    let (mut store, cam) = cam_setup(2, 2, 5);
    let eye2 = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]);
    store.set("cam.w_qa.w", eye2.clone()).unwrap();
    store.set("cam.w_qm.w", eye2).unwrap();
    store.set("cam.w_kc.w", Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2])).unwrap();
    store.set("cam.w_vc.w", Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2])).unwrap();
    store
        .set(
            "cam.w_c.w",
            Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0], &[2, 4, 1, 1]),
        )
        .unwrap();
    store.set("cam.gamma", Tensor::from_vec(vec![1.0], &[1])).unwrap();

    let mut h_data = vec![1.0; 4];
    h_data.extend(vec![2.0; 4]);
    let h = Tensor::from_vec(h_data, &[1, 2, 2, 2]);
    let s = [1.0, 0.0];
    let (y, aa, _) = cam_forward(
        &h,
        &Tensor::from_vec(s.to_vec(), &[1, 2]),
        &cam,
        &store,
        CamScoreMode::Elementwise,
    )
    .unwrap();

    // Channel scores reduce to softmax([1, 0]).
    let expect_alpha = softmax_vec(&[1.0, 0.0]);
    assert!((aa.data()[0] - expect_alpha[0]).abs() < 1e-12);
    assert!((aa.data()[1] - expect_alpha[1]).abs() < 1e-12);

    let oracle = cam_oracle(
        &h,
        &s,
        &store.get("cam.w_qa.w").unwrap(),
        &store.get("cam.w_qm.w").unwrap(),
        &store.get("cam.w_kc.w").unwrap(),
        &store.get("cam.w_vc.w").unwrap(),
        &store.get("cam.w_c.w").unwrap(),
        1.0,
    );
    for (a, b) in y.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn cam_matches_scalar_oracle_random_params() {
    let (mut store, cam) = cam_setup(3, 4, 6);
    store.set("cam.gamma", Tensor::from_vec(vec![0.8], &[1])).unwrap();
    let h = rand_t(&[1, 3, 3, 3], 7);
    let s_t = rand_t(&[1, 4], 8);
    let (y, _, _) = cam_forward(&h, &s_t, &cam, &store, CamScoreMode::Elementwise).unwrap();
    let oracle = cam_oracle(
        &h,
        s_t.data(),
        &store.get("cam.w_qa.w").unwrap(),
        &store.get("cam.w_qm.w").unwrap(),
        &store.get("cam.w_kc.w").unwrap(),
        &store.get("cam.w_vc.w").unwrap(),
        &store.get("cam.w_c.w").unwrap(),
        0.8,
    );
    for (a, b) in y.data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn cam_outer_mode_is_query_softmax_with_temperature() {
    let (mut store, cam) = cam_setup(2, 2, 9);
    store.set("cam.gamma", Tensor::from_vec(vec![1.0], &[1])).unwrap();
    let h = rand_t(&[1, 2, 2, 2], 10);
    let s = rand_t(&[1, 2], 11);
    let (_, aa, _) = cam_forward(&h, &s, &cam, &store, CamScoreMode::Outer).unwrap();
    // Recompute: alpha = softmax(q * (k . v)).
    let w_kc = store.get("cam.w_kc.w").unwrap();
    let w_vc = store.get("cam.w_vc.w").unwrap();
    let w_qa = store.get("cam.w_qa.w").unwrap();
    let mut x_a = [0.0; 2];
    for c in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                x_a[c] += h.at(&[0, c, i, j]) / 4.0;
            }
        }
    }
    let q: Vec<f64> = (0..2)
        .map(|o| (0..2).map(|i| w_qa.at(&[o, i, 0, 0]) * x_a[i]).sum())
        .collect();
    let k: Vec<f64> = (0..2)
        .map(|o| (0..2).map(|i| w_kc.at(&[o, i]) * s.at(&[0, i])).sum())
        .collect();
    let v: Vec<f64> = (0..2)
        .map(|o| (0..2).map(|i| w_vc.at(&[o, i]) * s.at(&[0, i])).sum())
        .collect();
    let temp: f64 = k.iter().zip(&v).map(|(a, b)| a * b).sum();
    let expect = softmax_vec(&[q[0] * temp, q[1] * temp]);
    for c in 0..2 {
        assert!((aa.at(&[0, c]) - expect[c]).abs() < 1e-12);
    }
}

// ── Pixel attention ─────────────────────────────────────────────────

fn pam_setup(d: usize, seed: u64) -> (ParamStore, PamParams) {
    let mut rng = Rng::seed_from(seed);
    let mut store = ParamStore::new();
    let pam = PamParams::new("pam", d);
    pam.register(&mut store, &mut rng).unwrap();
    (store, pam)
}

#[test]
fn pam_zero_gate_is_identity_bit_exact() {
    let (store, pam) = pam_setup(4, 12);
    for seed in 0..5 {
        let hh = rand_t(&[2, 3, 4, 4], 30 + seed);
        let s = rand_t(&[2, 4], 40 + seed);
        let (y, _, _) = pam_forward(&hh, &s, &pam, &store).unwrap();
        assert_eq!(y.data(), hh.data(), "seed {seed}");
    }
}

#[test]
fn pam_single_pixel_softmax_is_one() {
    let (store, pam) = pam_setup(3, 13);
    let hh = rand_t(&[1, 4, 1, 1], 14);
    let s = rand_t(&[1, 3], 15);
    let (_, aa, am) = pam_forward(&hh, &s, &pam, &store).unwrap();
    assert_eq!(aa.data(), &[1.0]);
    assert_eq!(am.data(), &[1.0]);
}

#[test]
fn pam_matches_scalar_oracle() {
    // 1x2x2 map [[1,2],[3,4]] with k_p = v_p = 1: attention is
    // softmax([1,2,3,4]) over the four positions.
    let (mut store, pam) = pam_setup(1, 16);
    store.set("pam.w_kp.w", Tensor::from_vec(vec![1.0], &[1, 1])).unwrap();
    store.set("pam.w_vp.w", Tensor::from_vec(vec![1.0], &[1, 1])).unwrap();
    store.set("pam.w_p", Tensor::from_vec(vec![0.6, 0.4], &[2])).unwrap();
    store.set("pam.gamma", Tensor::from_vec(vec![1.0], &[1])).unwrap();
    let hh = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
    let s = Tensor::from_vec(vec![1.0], &[1, 1]);
    let (y, aa, am) = pam_forward(&hh, &s, &pam, &store).unwrap();

    let alpha = softmax_vec(&[1.0, 2.0, 3.0, 4.0]);
    for p in 0..4 {
        assert!((aa.data()[p] - alpha[p]).abs() < 1e-12);
        assert!((am.data()[p] - alpha[p]).abs() < 1e-12);
    }
    // C = 1 so both pooled paths equal the map itself.
    for p in 0..4 {
        let o = alpha[p] * hh.data()[p];
        let fused = (0.6 * o + 0.4 * o).max(0.0);
        let expect = fused + hh.data()[p];
        assert!((y.data()[p] - expect).abs() < 1e-12);
    }
}

#[test]
fn pam_random_matches_scalar_oracle() {
    let (mut store, pam) = pam_setup(3, 17);
    store.set("pam.gamma", Tensor::from_vec(vec![0.5], &[1])).unwrap();
    let hh = rand_t(&[1, 2, 2, 3], 18);
    let s = rand_t(&[1, 3], 19);
    let (y, _, _) = pam_forward(&hh, &s, &pam, &store).unwrap();

    let w_kp = store.get("pam.w_kp.w").unwrap();
    let w_vp = store.get("pam.w_vp.w").unwrap();
    let w_p = store.get("pam.w_p").unwrap();
    let kp: f64 = (0..3).map(|i| w_kp.at(&[0, i]) * s.at(&[0, i])).sum();
    let vp: f64 = (0..3).map(|i| w_vp.at(&[0, i]) * s.at(&[0, i])).sum();
    let (c, hdim, wdim) = (2, 2, 3);
    let np = hdim * wdim;
    let mut e_a = vec![0.0; np];
    let mut e_m = vec![f64::NEG_INFINITY; np];
    for p in 0..np {
        let (i, j) = (p / wdim, p % wdim);
        for ci in 0..c {
            let v = hh.at(&[0, ci, i, j]);
            e_a[p] += v / c as f64;
            e_m[p] = e_m[p].max(v);
        }
    }
    let alpha_a = softmax_vec(&e_a.iter().map(|v| v * kp * vp).collect::<Vec<_>>());
    let alpha_m = softmax_vec(&e_m.iter().map(|v| v * kp * vp).collect::<Vec<_>>());
    for ci in 0..c {
        for p in 0..np {
            let (i, j) = (p / wdim, p % wdim);
            let hv = hh.at(&[0, ci, i, j]);
            let fused = (w_p.at(&[0]) * alpha_a[p] * hv + w_p.at(&[1]) * alpha_m[p] * hv).max(0.0);
            let expect = 0.5 * fused + hv;
            assert!((y.at(&[0, ci, i, j]) - expect).abs() < 1e-12);
        }
    }
}

// ── CAdaILN ─────────────────────────────────────────────────────────

fn norm_setup(c: usize, d: usize, seed: u64) -> (ParamStore, NormSite) {
    let mut rng = Rng::seed_from(seed);
    let mut store = ParamStore::new();
    let site = NormSite::new("norm", c, d, NormMode::CadaIln);
    site.register(&mut store, &mut rng).unwrap();
    (store, site)
}

/// Force γ = 1, β = 0 for a sentence whose first entry is 1 and rest 0.
fn unit_gamma_zero_beta(store: &mut ParamStore, c: usize, d: usize) {
    let mut w1 = vec![0.0; c * d];
    for row in 0..c {
        w1[row * d] = 1.0;
    }
    store.set("norm.w1.w", Tensor::from_vec(w1, &[c, d])).unwrap();
    store.set("norm.w2.w", Tensor::zeros(&[c, d])).unwrap();
}

#[test]
fn cadailn_rho_one_standardizes_per_channel() {
    let (mut store, site) = norm_setup(3, 4, 20);
    unit_gamma_zero_beta(&mut store, 3, 4);
    let mut s = vec![0.0; 4];
    s[0] = 1.0;
    let s = Tensor::from_vec(s, &[1, 4]);
    let a = rand_t(&[1, 3, 8, 8], 21);
    let out = cadailn_forward(&a, &s, &site, &store).unwrap();
    for c in 0..3 {
        let mut mean = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                mean += out.at(&[0, c, i, j]);
            }
        }
        mean /= 64.0;
        assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
        let mut var = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                var += (out.at(&[0, c, i, j]) - mean).powi(2);
            }
        }
        var /= 64.0;
        assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
    }
}

#[test]
fn cadailn_constant_input_yields_beta() {
    let (mut store, site) = norm_setup(2, 3, 22);
    // Random rho in [0,1].
    store.set("norm.rho", Tensor::from_vec(vec![0.3, 0.9], &[2])).unwrap();
    let a = Tensor::full(&[1, 2, 2, 2], 5.0);
    let s = rand_t(&[1, 3], 23);
    let out = cadailn_forward(&a, &s, &site, &store).unwrap();
    let w2 = store.get("norm.w2.w").unwrap();
    for c in 0..2 {
        let beta: f64 = (0..3).map(|i| w2.at(&[c, i]) * s.at(&[0, i])).sum();
        for i in 0..2 {
            for j in 0..2 {
                assert!((out.at(&[0, c, i, j]) - beta).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cadailn_matches_scalar_oracle() {
    let (mut store, site) = norm_setup(2, 3, 24);
    store.set("norm.rho", Tensor::from_vec(vec![0.5, 0.5], &[2])).unwrap();
    let a = rand_t(&[1, 2, 2, 2], 25);
    let s = rand_t(&[1, 3], 26);
    let out = cadailn_forward(&a, &s, &site, &store).unwrap();

    let w1 = store.get("norm.w1.w").unwrap();
    let w2 = store.get("norm.w2.w").unwrap();
    let np = 4;
    // Instance stats per channel, layer stats over everything, both biased.
    let mut mu_i = [0.0; 2];
    for c in 0..2 {
        for p in 0..np {
            mu_i[c] += a.at(&[0, c, p / 2, p % 2]) / np as f64;
        }
    }
    let mut var_i = [0.0; 2];
    for c in 0..2 {
        for p in 0..np {
            var_i[c] += (a.at(&[0, c, p / 2, p % 2]) - mu_i[c]).powi(2) / np as f64;
        }
    }
    let mut mu_l = 0.0;
    for c in 0..2 {
        for p in 0..np {
            mu_l += a.at(&[0, c, p / 2, p % 2]) / (2.0 * np as f64);
        }
    }
    let mut var_l = 0.0;
    for c in 0..2 {
        for p in 0..np {
            var_l += (a.at(&[0, c, p / 2, p % 2]) - mu_l).powi(2) / (2.0 * np as f64);
        }
    }
    for c in 0..2 {
        let gamma: f64 = (0..3).map(|i| w1.at(&[c, i]) * s.at(&[0, i])).sum();
        let beta: f64 = (0..3).map(|i| w2.at(&[c, i]) * s.at(&[0, i])).sum();
        for p in 0..np {
            let v = a.at(&[0, c, p / 2, p % 2]);
            let a_in = (v - mu_i[c]) / (var_i[c] + NORM_EPS).sqrt();
            let a_ln = (v - mu_l) / (var_l + NORM_EPS).sqrt();
            let expect = gamma * (0.5 * a_in + 0.5 * a_ln) + beta;
            let got = out.at(&[0, c, p / 2, p % 2]);
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }
}

#[test]
fn cadailn_output_is_convex_combination_in_rho() {
    let (mut store, site) = norm_setup(3, 4, 27);
    let a = rand_t(&[2, 3, 4, 4], 28);
    let s = rand_t(&[2, 4], 29);
    let eval_with_rho = |store: &mut ParamStore, r: f64| {
        store.set("norm.rho", Tensor::full(&[3], r)).unwrap();
        cadailn_forward(&a, &s, &site, store).unwrap()
    };
    let out1 = eval_with_rho(&mut store, 1.0);
    let out0 = eval_with_rho(&mut store, 0.0);
    let r = 0.37;
    let mid = eval_with_rho(&mut store, r);
    for ((m, o1), o0) in mid.data().iter().zip(out1.data()).zip(out0.data()) {
        let expect = r * o1 + (1.0 - r) * o0;
        assert!((m - expect).abs() < 1e-12);
    }
}

#[test]
fn cadailn_rejects_rho_out_of_range_and_tiny_maps() {
    let (mut store, site) = norm_setup(2, 3, 30);
    let a = rand_t(&[1, 2, 2, 2], 31);
    let s = rand_t(&[1, 3], 32);
    store.set("norm.rho", Tensor::from_vec(vec![0.5, 1.2], &[2])).unwrap();
    assert!(cadailn_forward(&a, &s, &site, &store).is_err());
    store.set("norm.rho", Tensor::from_vec(vec![0.5, 0.5], &[2])).unwrap();
    let tiny = rand_t(&[1, 2, 1, 1], 33);
    assert!(cadailn_forward(&tiny, &s, &site, &store).is_err());
}

#[test]
fn bn_sent_standardizes_over_batch() {
    let mut rng = Rng::seed_from(34);
    let mut store = ParamStore::new();
    let site = NormSite::new("norm", 2, 3, NormMode::BnSent);
    site.register(&mut store, &mut rng).unwrap();
    assert!(!store.contains("norm.rho"));
    let a = rand_t(&[4, 2, 3, 3], 35);
    let s = rand_t(&[4, 3], 36);
    let out = site.forward(&store, &a, &s).unwrap();
    assert_eq!(out.shape(), a.shape());
}

// ── Full stage ──────────────────────────────────────────────────────

fn stage_setup(cfg: StageConfig, upsample: bool, seed: u64) -> (ParamStore, DualAttentionLayer) {
    let mut rng = Rng::seed_from(seed);
    let mut store = ParamStore::new();
    let layer = DualAttentionLayer::new("gen.layer0", 0, 4, 4, 4, upsample, cfg);
    layer.register(&mut store, &mut rng).unwrap();
    (store, layer)
}

#[test]
fn stage_with_zero_gates_equals_skeleton() {
    let (store, layer) = stage_setup(StageConfig::default(), false, 40);
    let skeleton = DualAttentionLayer::new(
        "gen.layer0",
        0,
        4,
        4,
        4,
        false,
        StageConfig { use_cam: false, use_pam: false, ..StageConfig::default() },
    );
    let h = rand_t(&[1, 4, 4, 4], 41);
    let s = rand_t(&[1, 4], 42);
    let (full, maps) = layer.forward(&store, &h, &s).unwrap();
    let (bare, _) = skeleton.forward(&store, &h, &s).unwrap();
    assert_eq!(full.data(), bare.data());
    assert!(maps.channel_avg.is_some() && maps.pixel_avg.is_some());
}

#[test]
fn stage_upsample_doubles_spatial_extent() {
    let (store, layer) = stage_setup(StageConfig::default(), true, 43);
    let h = rand_t(&[1, 4, 4, 4], 44);
    let s = rand_t(&[1, 4], 45);
    let (out, _) = layer.forward(&store, &h, &s).unwrap();
    assert_eq!(out.shape(), &[1, 4, 8, 8]);
}

#[test]
fn stage_attention_maps_sum_to_one() {
    let (mut store, layer) = stage_setup(StageConfig::default(), false, 46);
    store.set("gen.layer0.cam.gamma", Tensor::from_vec(vec![0.5], &[1])).unwrap();
    store.set("gen.layer0.pam.gamma", Tensor::from_vec(vec![0.5], &[1])).unwrap();
    let h = rand_t(&[2, 4, 4, 4], 47);
    let s = rand_t(&[2, 4], 48);
    let (_, maps) = layer.forward(&store, &h, &s).unwrap();
    for m in [maps.channel_avg.unwrap(), maps.channel_max.unwrap()] {
        for row in 0..2 {
            let sum: f64 = (0..4).map(|c| m.at(&[row, c])).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!((0..4).all(|c| m.at(&[row, c]) > 0.0));
        }
    }
    for m in [maps.pixel_avg.unwrap(), maps.pixel_max.unwrap()] {
        for row in 0..2 {
            let mut sum = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    let v = m.at(&[row, 0, i, j]);
                    assert!(v > 0.0);
                    sum += v;
                }
            }
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn stage_depends_on_sentence_when_gated() {
    let (mut store, layer) = stage_setup(StageConfig::default(), false, 49);
    store.set("gen.layer0.cam.gamma", Tensor::from_vec(vec![0.7], &[1])).unwrap();
    store.set("gen.layer0.pam.gamma", Tensor::from_vec(vec![0.7], &[1])).unwrap();
    let h = rand_t(&[1, 4, 4, 4], 50);
    let mut differs = 0;
    for seed in 0..10 {
        let s1 = rand_t(&[1, 4], 60 + seed);
        let s2 = rand_t(&[1, 4], 80 + seed);
        let (y1, _) = layer.forward(&store, &h, &s1).unwrap();
        let (y2, _) = layer.forward(&store, &h, &s2).unwrap();
        if y1.data() != y2.data() {
            differs += 1;
        }
    }
    assert_eq!(differs, 10);
}

#[test]
fn stage_forward_is_pure() {
    let (store, layer) = stage_setup(StageConfig::default(), false, 51);
    let h = rand_t(&[1, 4, 4, 4], 52);
    let s = rand_t(&[1, 4], 53);
    let (y1, m1) = layer.forward(&store, &h, &s).unwrap();
    let (y2, m2) = layer.forward(&store, &h, &s).unwrap();
    assert_eq!(y1.data(), y2.data());
    assert_eq!(
        m1.channel_avg.unwrap().data(),
        m2.channel_avg.unwrap().data()
    );
}

#[test]
fn stage_gradients_match_finite_differences() {
    // Check d sum(output) / d θ for every stage parameter on a small stage.
    let (mut store, layer) = stage_setup(StageConfig::default(), false, 54);
    // Open the gates so attention paths carry gradient.
    store.set("gen.layer0.cam.gamma", Tensor::from_vec(vec![0.4], &[1])).unwrap();
    store.set("gen.layer0.pam.gamma", Tensor::from_vec(vec![0.6], &[1])).unwrap();
    // Move rho off the clamp boundary so finite differences stay in-domain.
    store.set("gen.layer0.norm1.rho", Tensor::full(&[4], 0.5)).unwrap();
    store.set("gen.layer0.norm2.rho", Tensor::full(&[4], 0.5)).unwrap();

    let h = rand_t(&[1, 4, 4, 4], 55);
    let s = rand_t(&[1, 4], 56);
    let paths = store.paths();
    let mut inputs = vec![h.clone(), s.clone()];
    for p in &paths {
        inputs.push(store.get(p).unwrap());
    }
    let paths_for_f = paths.clone();
    let layer_for_f = layer.clone();
    let item = GradCheckItem::new("dual_attention_stage", inputs, move |_, xs| {
        let mut probe = ParamStore::new();
        for (i, p) in paths_for_f.iter().enumerate() {
            probe.register(p, xs[2 + i].clone(), true)?;
        }
        let (out, _) = layer_for_f.forward(&probe, &xs[0], &xs[1])?;
        out.sum_all()
    });
    let err = item.run().unwrap();
    assert!(err < 1e-4, "stage rel err {err}");
}

#[test]
fn stage_parameter_counts_shrink_with_ablations() {
    let full = stage_setup(StageConfig::default(), false, 57).0.total_elems();
    let no_cam = stage_setup(
        StageConfig { use_cam: false, ..StageConfig::default() },
        false,
        57,
    )
    .0
    .total_elems();
    let no_pam = stage_setup(
        StageConfig { use_pam: false, ..StageConfig::default() },
        false,
        57,
    )
    .0
    .total_elems();
    let no_norm = stage_setup(
        StageConfig { norm_mode: NormMode::None, ..StageConfig::default() },
        false,
        57,
    )
    .0
    .total_elems();
    assert!(no_cam < full && no_pam < full && no_norm < full);
    // CAM carries far more parameters than PAM.
    assert!(full - no_cam > full - no_pam);
}
