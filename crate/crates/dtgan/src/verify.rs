//! Named gradient-check suites: every primitive, every composite mechanism,
//! every loss — each compared against central finite differences. Backs the
//! `gradcheck` command; the test suites reuse it as their oracle harness.

use crate::attention::{
    cadailn_forward, cam_forward, pam_forward, CamParams, CamScoreMode, DualAttentionLayer,
    NormMode, NormSite, PamParams, StageConfig,
};
use crate::error::{Error, Result};
use crate::losses::{d_adv_loss, g_adv_loss, magp_loss, visual_loss};
use crate::networks::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::nn::{CellKind, ParamStore, RecurrentCell};
use crate::rng::Rng;
use crate::tensor::{GradCheckItem, GradCheckReport, Tensor};

pub const FIRST_ORDER_TOL: f64 = 1e-4;
pub const SECOND_ORDER_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    Modules,
    Losses,
    E2e,
    All,
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Scope> {
        match s {
            "primitives" => Ok(Scope::Primitives),
            "modules" => Ok(Scope::Modules),
            "losses" => Ok(Scope::Losses),
            "e2e" => Ok(Scope::E2e),
            "all" => Ok(Scope::All),
            _ => Err(Error::invalid(format!(
                "unknown gradcheck scope '{s}' (expected primitives|modules|losses|e2e|all)"
            ))),
        }
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    Tensor::from_fn(shape, |_| rng.next_uniform(-1.0, 1.0))
}

fn rand_t_off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    Tensor::from_fn(shape, |_| {
        let v = rng.next_uniform(-1.0, 1.0);
        if v.abs() < 0.05 {
            v + 0.1 * v.signum() + if v == 0.0 { 0.1 } else { 0.0 }
        } else {
            v
        }
    })
}

fn rand_t_positive(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    Tensor::from_fn(shape, |_| rng.next_uniform(0.2, 1.5))
}

fn weighted_sum(t: &Tensor, seed: u64) -> Result<Tensor> {
    let r = rand_t(&[t.numel()], seed).reshape(t.shape())?;
    t.mul(&r)?.sum_all()
}

pub fn primitive_items() -> Vec<GradCheckItem> {
    vec![
        GradCheckItem::new("add", vec![rand_t(&[2, 3], 1), rand_t(&[3], 2)], |_, xs| {
            weighted_sum(&xs[0].add(&xs[1])?, 900)
        }),
        GradCheckItem::new("sub", vec![rand_t(&[2, 3], 3), rand_t(&[2, 1], 4)], |_, xs| {
            weighted_sum(&xs[0].sub(&xs[1])?, 901)
        }),
        GradCheckItem::new("mul", vec![rand_t(&[2, 3], 5), rand_t(&[2, 3], 6)], |_, xs| {
            weighted_sum(&xs[0].mul(&xs[1])?, 902)
        }),
        GradCheckItem::new("div", vec![rand_t(&[2, 3], 7), rand_t_positive(&[2, 3], 8)], |_, xs| {
            weighted_sum(&xs[0].div(&xs[1])?, 903)
        }),
        GradCheckItem::new("add_scalar", vec![rand_t(&[5], 9)], |_, xs| {
            weighted_sum(&xs[0].add_scalar(0.3)?, 904)
        }),
        GradCheckItem::new("mul_scalar", vec![rand_t(&[5], 10)], |_, xs| {
            weighted_sum(&xs[0].mul_scalar(-2.1)?, 905)
        }),
        GradCheckItem::new("pow_scalar", vec![rand_t_positive(&[5], 11)], |_, xs| {
            weighted_sum(&xs[0].pow_scalar(1.7)?, 906)
        }),
        GradCheckItem::new("exp", vec![rand_t(&[5], 12)], |_, xs| weighted_sum(&xs[0].exp()?, 907)),
        GradCheckItem::new("log", vec![rand_t_positive(&[5], 13)], |_, xs| {
            weighted_sum(&xs[0].log()?, 908)
        }),
        GradCheckItem::new("tanh", vec![rand_t(&[5], 14)], |_, xs| weighted_sum(&xs[0].tanh()?, 909)),
        GradCheckItem::new("relu", vec![rand_t_off_zero(&[8], 15)], |_, xs| {
            weighted_sum(&xs[0].relu()?, 910)
        }),
        GradCheckItem::new("leaky_relu", vec![rand_t_off_zero(&[8], 16)], |_, xs| {
            weighted_sum(&xs[0].leaky_relu(0.2)?, 911)
        }),
        GradCheckItem::new("matmul", vec![rand_t(&[3, 4], 17), rand_t(&[4, 2], 18)], |_, xs| {
            weighted_sum(&xs[0].matmul(&xs[1])?, 912)
        }),
        GradCheckItem::new("transpose", vec![rand_t(&[3, 4], 19)], |_, xs| {
            weighted_sum(&xs[0].transpose()?, 913)
        }),
        GradCheckItem::new("sum_axes", vec![rand_t(&[2, 3, 4], 20)], |_, xs| {
            weighted_sum(&xs[0].sum_axes(&[0, 2], false)?, 914)
        }),
        GradCheckItem::new("mean_axes", vec![rand_t(&[2, 3, 4], 21)], |_, xs| {
            weighted_sum(&xs[0].mean_axes(&[1], true)?, 915)
        }),
        GradCheckItem::new("max_axes", vec![rand_t(&[2, 3, 4], 22)], |_, xs| {
            weighted_sum(&xs[0].max_axes(&[2], false)?, 916)
        }),
        GradCheckItem::new("softmax", vec![rand_t(&[3, 5], 23)], |_, xs| {
            weighted_sum(&xs[0].softmax(1)?, 917)
        }),
        GradCheckItem::new("reshape", vec![rand_t(&[2, 6], 24)], |_, xs| {
            weighted_sum(&xs[0].reshape(&[4, 3])?, 918)
        }),
        GradCheckItem::new("broadcast", vec![rand_t(&[1, 3, 1], 25)], |_, xs| {
            weighted_sum(&xs[0].broadcast_to(&[2, 3, 4])?, 919)
        }),
        GradCheckItem::new("concat", vec![rand_t(&[2, 2], 26), rand_t(&[2, 3], 27)], |_, xs| {
            weighted_sum(&Tensor::concat(&[&xs[0], &xs[1]], 1)?, 920)
        }),
        GradCheckItem::new("slice", vec![rand_t(&[2, 5], 28)], |_, xs| {
            weighted_sum(&xs[0].slice(1, 1, 3)?, 921)
        }),
        GradCheckItem::new(
            "conv2d",
            vec![rand_t(&[1, 2, 4, 4], 29), rand_t(&[3, 2, 3, 3], 30)],
            |_, xs| weighted_sum(&xs[0].conv2d(&xs[1], 1, 1)?, 922),
        ),
        GradCheckItem::new(
            "conv2d_stride2",
            vec![rand_t(&[1, 2, 6, 6], 31), rand_t(&[3, 2, 3, 3], 32)],
            |_, xs| weighted_sum(&xs[0].conv2d(&xs[1], 2, 1)?, 923),
        ),
        GradCheckItem::new("upsample_nn_2x", vec![rand_t(&[1, 2, 3, 3], 33)], |_, xs| {
            weighted_sum(&xs[0].upsample_nn_2x()?, 924)
        }),
        GradCheckItem::new("sigmoid", vec![rand_t(&[6], 34)], |_, xs| {
            weighted_sum(&xs[0].sigmoid()?, 925)
        }),
        GradCheckItem::new("l2_norm", vec![rand_t(&[2, 5], 35)], |_, xs| {
            xs[0].l2_norm_trailing(1)?.sum_all()
        }),
    ]
}

/// Gradient checks through each mechanism, with all of a module's
/// parameters and inputs as differentiation targets.
pub fn module_items() -> Vec<GradCheckItem> {
    let mut items = Vec::new();

    // Channel attention.
    {
        let mut rng = Rng::seed_from(50);
        let mut store = ParamStore::new();
        let cam = CamParams::new("cam", 3, 4);
        cam.register(&mut store, &mut rng).unwrap();
        store.set("cam.gamma", Tensor::from_vec(vec![0.5], &[1])).unwrap();
        let paths = store.paths();
        let mut inputs = vec![rand_t(&[1, 3, 3, 3], 51), rand_t(&[1, 4], 52)];
        for p in &paths {
            inputs.push(store.get(p).unwrap());
        }
        for (name, mode) in [
            ("cam_elementwise", CamScoreMode::Elementwise),
            ("cam_outer", CamScoreMode::Outer),
        ] {
            let paths = paths.clone();
            let cam = cam.clone();
            items.push(GradCheckItem::new(name, inputs.clone(), move |_, xs| {
                let mut probe = ParamStore::new();
                for (i, p) in paths.iter().enumerate() {
                    probe.register(p, xs[2 + i].clone(), true)?;
                }
                let (y, _, _) = cam_forward(&xs[0], &xs[1], &cam, &probe, mode)?;
                weighted_sum(&y, 930)
            }));
        }
    }

    // Pixel attention.
    {
        let mut rng = Rng::seed_from(53);
        let mut store = ParamStore::new();
        let pam = PamParams::new("pam", 4);
        pam.register(&mut store, &mut rng).unwrap();
        store.set("pam.gamma", Tensor::from_vec(vec![0.5], &[1])).unwrap();
        let paths = store.paths();
        let mut inputs = vec![rand_t(&[1, 3, 3, 3], 54), rand_t(&[1, 4], 55)];
        for p in &paths {
            inputs.push(store.get(p).unwrap());
        }
        items.push(GradCheckItem::new("pam", inputs, move |_, xs| {
            let mut probe = ParamStore::new();
            for (i, p) in paths.iter().enumerate() {
                probe.register(p, xs[2 + i].clone(), true)?;
            }
            let (y, _, _) = pam_forward(&xs[0], &xs[1], &pam, &probe)?;
            weighted_sum(&y, 931)
        }));
    }

    // Conditional instance/layer normalization.
    {
        let mut rng = Rng::seed_from(56);
        let mut store = ParamStore::new();
        let site = NormSite::new("norm", 3, 4, NormMode::CadaIln);
        site.register(&mut store, &mut rng).unwrap();
        store.set("norm.rho", Tensor::full(&[3], 0.5)).unwrap();
        let paths = store.paths();
        let mut inputs = vec![rand_t(&[2, 3, 3, 3], 57), rand_t(&[2, 4], 58)];
        for p in &paths {
            inputs.push(store.get(p).unwrap());
        }
        items.push(GradCheckItem::new("cadailn", inputs, move |_, xs| {
            let mut probe = ParamStore::new();
            for (i, p) in paths.iter().enumerate() {
                probe.register(p, xs[2 + i].clone(), true)?;
            }
            let y = cadailn_forward(&xs[0], &xs[1], &site, &probe)?;
            weighted_sum(&y, 932)
        }));
    }

    // One full dual-attention stage.
    {
        let mut rng = Rng::seed_from(59);
        let mut store = ParamStore::new();
        let layer = DualAttentionLayer::new("stage", 1, 4, 4, 4, false, StageConfig::default());
        layer.register(&mut store, &mut rng).unwrap();
        store.set("stage.cam.gamma", Tensor::from_vec(vec![0.4], &[1])).unwrap();
        store.set("stage.pam.gamma", Tensor::from_vec(vec![0.6], &[1])).unwrap();
        store.set("stage.norm1.rho", Tensor::full(&[4], 0.5)).unwrap();
        store.set("stage.norm2.rho", Tensor::full(&[4], 0.5)).unwrap();
        let paths = store.paths();
        let mut inputs = vec![rand_t(&[1, 4, 4, 4], 60), rand_t(&[1, 4], 61)];
        for p in &paths {
            inputs.push(store.get(p).unwrap());
        }
        items.push(GradCheckItem::new("dual_attention_layer", inputs, move |_, xs| {
            let mut probe = ParamStore::new();
            for (i, p) in paths.iter().enumerate() {
                probe.register(p, xs[2 + i].clone(), true)?;
            }
            let (y, _) = layer.forward(&probe, &xs[0], &xs[1])?;
            y.sum_all()
        }));
    }

    // Recurrent encoder cell.
    {
        let mut rng = Rng::seed_from(62);
        let mut store = ParamStore::new();
        let cell = RecurrentCell::new("cell", CellKind::Gated, 3, 4);
        cell.register(&mut store, &mut rng).unwrap();
        let paths = store.paths();
        let mut inputs = vec![rand_t(&[2, 4], 63).mul_scalar(0.5).unwrap(), rand_t(&[2, 3], 64)];
        for p in &paths {
            inputs.push(store.get(p).unwrap());
        }
        items.push(GradCheckItem::new("recurrent_cell", inputs, move |_, xs| {
            let mut probe = ParamStore::new();
            for (i, p) in paths.iter().enumerate() {
                probe.register(p, xs[2 + i].clone(), true)?;
            }
            let next = cell.step(&probe, &xs[0], &xs[1])?;
            weighted_sum(&next, 933)
        }));
    }

    items
}

fn tiny_disc_cfg() -> DiscriminatorConfig {
    DiscriminatorConfig {
        resolution: 8,
        base_channels: 4,
        max_channels: 16,
        sent_dim: 4,
        proj_channels: 4,
        head_channels: 4,
        leaky_slope: 0.2,
    }
}

/// Loss-level checks, including the second-order gradient-penalty path
/// through a real (tiny) convolutional discriminator.
pub fn loss_items() -> Vec<GradCheckItem> {
    let mut items = Vec::new();

    items.push(GradCheckItem::new(
        "d_adv_loss",
        vec![
            rand_t_off_zero(&[4], 70).mul_scalar(2.0).unwrap(),
            rand_t_off_zero(&[4], 71).mul_scalar(2.0).unwrap(),
            rand_t_off_zero(&[4], 72).mul_scalar(2.0).unwrap(),
        ],
        |_, xs| d_adv_loss(&xs[0], &xs[1], &xs[2]),
    ));

    items.push(GradCheckItem::new("g_adv_loss", vec![rand_t(&[4], 73)], |_, xs| {
        g_adv_loss(&xs[0])
    }));

    items.push(GradCheckItem::new(
        "visual_loss",
        vec![rand_t(&[2, 6], 74), rand_t(&[2, 6], 75)],
        |_, xs| visual_loss(&xs[0], &xs[1]),
    ));

    // Generator adversarial loss through D(G(.)): gradients reach the
    // pre-image parameters.
    {
        let w_gen = rand_t(&[2, 2, 3, 3], 76).mul_scalar(0.5).unwrap();
        let w_disc = rand_t(&[1, 2, 3, 3], 77).mul_scalar(0.5).unwrap();
        let seed_img = rand_t(&[1, 2, 4, 4], 78);
        items.push(GradCheckItem::new(
            "g_adv_through_d_of_g",
            vec![w_gen, w_disc],
            move |_, xs| {
                let fake = seed_img.conv2d(&xs[0], 1, 1)?.tanh()?;
                let logit = fake.conv2d(&xs[1], 2, 1)?.sum_axes(&[1, 2, 3], false)?;
                g_adv_loss(&logit)
            },
        ));
    }

    // Second-order: gradient penalty through a tiny conv discriminator,
    // differentiated with respect to all discriminator parameters.
    {
        let mut rng = Rng::seed_from(79);
        let mut store = ParamStore::new();
        let disc = Discriminator::new(tiny_disc_cfg());
        disc.register(&mut store, &mut rng).unwrap();
        let paths = store.paths();
        let x = rand_t(&[2, 3, 8, 8], 80);
        let s = rand_t(&[2, 4], 81);
        let mut inputs = Vec::new();
        for p in &paths {
            inputs.push(store.get(p).unwrap());
        }
        let paths_m = paths.clone();
        let disc_m = disc.clone();
        let (x_m, s_m) = (x.clone(), s.clone());
        items.push(
            GradCheckItem::new("magp_second_order", inputs.clone(), move |tape, xs| {
                let mut probe = ParamStore::new();
                for (i, p) in paths_m.iter().enumerate() {
                    probe.register(p, xs[i].clone(), true)?;
                }
                let disc = disc_m.clone();
                magp_loss(tape, &x_m, &s_m, move |xw, sw| Ok(disc.forward(&probe, xw, sw)?.logit), 6.0)
            })
            .with_tolerance(SECOND_ORDER_TOL),
        );

        // Full discriminator objective (hinge + weighted penalty) on a
        // 3-channel 8x8 input.
        let paths_f = paths.clone();
        let disc_f = disc.clone();
        let fake = rand_t(&[2, 3, 8, 8], 82);
        let s_mm = rand_t(&[2, 4], 83);
        items.push(
            GradCheckItem::new("full_d_objective", inputs, move |tape, xs| {
                let mut probe = ParamStore::new();
                for (i, p) in paths_f.iter().enumerate() {
                    probe.register(p, xs[i].clone(), true)?;
                }
                let xw = tape.watch(&x.detach().requires_grad(true));
                let sw = tape.watch(&s.detach().requires_grad(true));
                let trunk_real = disc_f.trunk(&probe, &xw)?;
                let logit_real = disc_f.head(&probe, &trunk_real, &sw)?;
                let logit_mm = disc_f.head(&probe, &trunk_real, &s_mm)?;
                let trunk_fake = disc_f.trunk(&probe, &fake)?;
                let logit_fake = disc_f.head(&probe, &trunk_fake, &sw)?;
                let adv = d_adv_loss(&logit_real, &logit_fake, &logit_mm)?;
                let penalty = crate::losses::gradient_penalty(tape, &logit_real, &xw, &sw, 6.0)?;
                crate::losses::d_objective(&adv, &penalty, 2.0)
            })
            .with_tolerance(SECOND_ORDER_TOL),
        );
    }

    items
}

/// End-to-end: mean generated pixel against every generator parameter at a
/// 2-layer, 8-channel configuration.
pub fn e2e_items() -> Vec<GradCheckItem> {
    let cfg = GeneratorConfig {
        num_layers: 2,
        base_channels: 8,
        min_channels: 4,
        sent_dim: 8,
        noise_dim: 8,
        ..GeneratorConfig::default()
    };
    let mut rng = Rng::seed_from(90);
    let mut store = ParamStore::new();
    let gen = Generator::new(cfg);
    gen.register(&mut store, &mut rng).unwrap();
    for path in store.paths() {
        if path.ends_with(".gamma") {
            store.set(&path, Tensor::from_vec(vec![0.3], &[1])).unwrap();
        }
        if path.ends_with(".rho") {
            let n = store.get(&path).unwrap().numel();
            store.set(&path, Tensor::full(&[n], 0.5)).unwrap();
        }
    }
    let z = rand_t(&[1, 8], 91);
    let s = rand_t(&[1, 8], 92);
    let paths = store.paths();
    let mut inputs = Vec::new();
    for p in &paths {
        inputs.push(store.get(p).unwrap());
    }
    vec![GradCheckItem::new("generator_mean_image", inputs, move |_, xs| {
        let mut probe = ParamStore::new();
        for (i, p) in paths.iter().enumerate() {
            probe.register(p, xs[i].clone(), true)?;
        }
        let (img, _) = gen.forward(&probe, &z, &s)?;
        img.mean_all()
    })]
}

pub fn items_for_scope(scope: Scope) -> Vec<GradCheckItem> {
    match scope {
        Scope::Primitives => primitive_items(),
        Scope::Modules => module_items(),
        Scope::Losses => loss_items(),
        Scope::E2e => e2e_items(),
        Scope::All => {
            let mut items = primitive_items();
            items.extend(module_items());
            items.extend(loss_items());
            items.extend(e2e_items());
            items
        }
    }
}

pub fn run_scope(scope: Scope) -> Result<GradCheckReport> {
    GradCheckReport::run(&items_for_scope(scope))
}
