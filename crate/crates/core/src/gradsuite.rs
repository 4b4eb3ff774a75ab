//! Finite-difference checks of every differentiable op and loss term.

use std::time::Instant;

use gwnet_tensor::ops;
use gwnet_tensor::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    ac_loss, adv_losses, channel_covariance, const_loss, gradient_penalty, perceptual_term, pixel_l1, tap_loss,
    total_g_var, von_neumann_div, LossWeights,
};
use crate::nn::{Binder, Mode};
use crate::percepnets::{Classifier, ClassifierConfig, Heads, Tap};
use crate::wnet::{Critic, Generator, Variant, WNetConfig};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Tolerance for first-order ops and losses.
pub const TOL: f64 = 1e-4;
/// Tolerance for terms that differentiate through a gradient.
pub const PENALTY_TOL: f64 = 1e-3;
/// Tolerance for smooth elementwise maps.
pub const SMOOTH_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub tol: f64,
    pub max_rel_error: f64,
    pub elements: usize,
    pub seconds: f64,
    /// Set when the case could not be evaluated.
    pub error: Option<String>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error < self.tol
    }
}

type CaseFn = Box<dyn Fn() -> Result<GradCheck>>;

struct Case {
    name: &'static str,
    tol: f64,
    run: CaseFn,
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn positive(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
}

/// Values in `±[0.1, 1]`, away from the kink of piecewise-linear maps.
fn off_kink(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn check(f: impl Fn(&[Var]) -> Result<Var>, inputs: Vec<Tensor>) -> Result<GradCheck> {
    // grad_check needs an infallible closure; carry the first error out
    let failure = std::cell::RefCell::new(None);
    let r = grad_check(
        |v| match f(v) {
            Ok(y) => y,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                Var::scalar(0.0)
            }
        },
        &inputs,
        STEP,
    )?;
    match failure.into_inner() {
        Some(e) => Err(e),
        None => Ok(r),
    }
}

fn case(name: &'static str, tol: f64, run: impl Fn() -> Result<GradCheck> + 'static) -> Case {
    Case { name, tol, run: Box::new(run) }
}

/// Small generator for end-to-end checks: 32×32, width 2 everywhere.
pub fn tiny_wnet(variant: Variant) -> WNetConfig {
    let mut cfg = WNetConfig::new(32, 2, 3);
    cfg.enc_widths = vec![2; 5];
    cfg.critic_widths = vec![2; 5];
    cfg.mixer.variant = variant;
    cfg.mixer.blocks_per_layer = 1;
    cfg
}

fn tiny_classifier(heads: Heads) -> Result<Classifier> {
    Classifier::init(ClassifierConfig { size: 32, widths: [2, 2, 3, 3, 3], heads, contents: 4, styles: 3 }, 5)
}

/// Binds `names[k]` to `v[k]` for one pass.
fn bind_all(b: &Binder, names: &[&str], v: &[Var]) -> Result<()> {
    for (name, var) in names.iter().zip(v) {
        b.bind(name, var.clone())?;
    }
    Ok(())
}

fn store_values(store: &crate::nn::ParamStore, names: &[&str]) -> Result<Vec<Tensor>> {
    names.iter().map(|n| store.get(n).cloned()).collect()
}

fn tensor_cases() -> Vec<Case> {
    vec![
        case("conv2d k5 s2", TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let inputs = vec![
                random(Shape::new(1, 2, 6, 6), &mut rng),
                random(Shape::new(3, 2, 5, 5), &mut rng),
                random(Shape::new(1, 3, 1, 1), &mut rng),
            ];
            check(|v| Ok(conv2d(&v[0], &ConvSpec::new(v[1].clone(), Some(v[2].clone()), 2, 2))?), inputs)
        }),
        case("conv2d k3 s1", TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let inputs = vec![random(Shape::new(2, 2, 4, 4), &mut rng), random(Shape::new(2, 2, 3, 3), &mut rng)];
            check(|v| Ok(conv2d(&v[0], &ConvSpec::new(v[1].clone(), None, 1, 1))?), inputs)
        }),
        case("deconv2d", TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let inputs = vec![
                random(Shape::new(2, 3, 2, 2), &mut rng),
                random(Shape::new(3, 2, 5, 5), &mut rng),
                random(Shape::new(1, 2, 1, 1), &mut rng),
            ];
            check(|v| Ok(deconv2d(&v[0], &ConvSpec::new(v[1].clone(), Some(v[2].clone()), 2, 2))?), inputs)
        }),
        case("conv weight gradient", TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let inputs = vec![random(Shape::new(2, 2, 5, 5), &mut rng), random(Shape::new(2, 3, 3, 3), &mut rng)];
            check(|v| Ok(ops::conv2d_weight_grad(&v[0], &v[1], (5, 5), 2, 2)?), inputs)
        }),
        case("relu", SMOOTH_TOL, || {
            let x = off_kink(Shape::new(1, 2, 3, 3), &mut ChaCha8Rng::seed_from_u64(5));
            check(|v| Ok(activation(&v[0], Activation::Relu)), vec![x])
        }),
        case("leaky relu", SMOOTH_TOL, || {
            let x = off_kink(Shape::new(1, 2, 3, 3), &mut ChaCha8Rng::seed_from_u64(6));
            check(|v| Ok(activation(&v[0], Activation::LeakyRelu(0.2))), vec![x])
        }),
        case("tanh", SMOOTH_TOL, || {
            let x = random(Shape::new(1, 2, 3, 3), &mut ChaCha8Rng::seed_from_u64(7));
            check(|v| Ok(activation(&v[0], Activation::Tanh)), vec![x])
        }),
        case("abs", SMOOTH_TOL, || {
            let x = off_kink(Shape::new(1, 2, 3, 3), &mut ChaCha8Rng::seed_from_u64(8));
            check(|v| Ok(ops::abs(&v[0])), vec![x])
        }),
        case("batch norm", TOL, || norm_case(NormKind::Batch)),
        case("instance norm", TOL, || norm_case(NormKind::Instance)),
        case("layer norm", TOL, || norm_case(NormKind::Layer)),
        case("adain", TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let inputs = vec![random(Shape::new(1, 2, 3, 3), &mut rng), random(Shape::new(1, 2, 3, 3), &mut rng)];
            check(|v| Ok(adain(&v[0], &v[1], DEFAULT_EPS)?), inputs)
        }),
        case("set reduce avg", SMOOTH_TOL, || set_case(ReduceMode::Avg)),
        case("set reduce max", SMOOTH_TOL, || set_case(ReduceMode::Max)),
        case("set reduce min", SMOOTH_TOL, || set_case(ReduceMode::Min)),
        case("segment reduce", SMOOTH_TOL, || {
            let y = random(Shape::new(3, 2, 2, 2), &mut ChaCha8Rng::seed_from_u64(10));
            check(
                |v| {
                    let g = [vec![0, 2], vec![1]];
                    let parts = [ReduceMode::Avg, ReduceMode::Max, ReduceMode::Min]
                        .map(|m| segment_reduce(&v[0], &g, m))
                        .into_iter()
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    Ok(channel_concat(&parts)?)
                },
                vec![y],
            )
        }),
        case("channel concat and slice", SMOOTH_TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let inputs = vec![random(Shape::new(2, 1, 3, 3), &mut rng), random(Shape::new(2, 2, 3, 3), &mut rng)];
            check(|v| Ok(ops::slice_channels(&channel_concat(&[v[0].clone(), v[1].clone()])?, 1, 2)), inputs)
        }),
        case("interpolation", SMOOTH_TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let inputs = vec![random(Shape::new(2, 1, 3, 3), &mut rng), random(Shape::new(2, 1, 3, 3), &mut rng)];
            check(
                |v| {
                    let a = interpolate_uniform(&v[0], &v[1], 0.3)?;
                    let b = interpolate_per_sample(&v[0], &v[1], &[0.7, 0.1])?;
                    Ok(&a * &b)
                },
                inputs,
            )
        }),
        case("max pool", SMOOTH_TOL, || {
            let x = random(Shape::new(1, 2, 4, 4), &mut ChaCha8Rng::seed_from_u64(13));
            check(|v| Ok(ops::max_pool2(&v[0])), vec![x])
        }),
        case("matmul and transpose", TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let inputs = vec![random(Shape::new(2, 1, 3, 4), &mut rng), random(Shape::new(2, 1, 3, 2), &mut rng)];
            check(|v| Ok(ops::matmul(&ops::transpose_hw(&v[0]), &v[1])?), inputs)
        }),
        case("elementwise arithmetic", TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let a = random(Shape::new(2, 3, 2, 2), &mut rng);
            let b = positive(Shape::new(1, 3, 1, 1), &mut rng);
            check(
                |v| {
                    let q = &(&(&v[0] + &v[1]) * &v[0]) / &v[1];
                    let r = ops::sqrt(&ops::ln(&(ops::exp(&v[0]) + 1.0)));
                    Ok(&(&q - &r) + &ops::mean_to(&ops::square(&v[0]), Shape::new(2, 1, 1, 1)))
                },
                vec![a, b],
            )
        }),
        case("input gradient penalty (double backward)", PENALTY_TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(16);
            let inputs = vec![
                random(Shape::new(2, 1, 6, 6), &mut rng),
                random(Shape::new(3, 1, 5, 5), &mut rng),
                positive(Shape::new(1, 3, 1, 1), &mut rng),
                random(Shape::new(1, 3, 1, 1), &mut rng),
                random(Shape::new(1, 3, 1, 1), &mut rng),
            ];
            check(
                |v| {
                    let (_, g) = input_gradient(
                        |x| {
                            let h = conv2d(x, &ConvSpec::new(v[1].clone(), None, 2, 2)).expect("shapes");
                            let h = normalize(&h, NormKind::Layer, &v[2], &v[3], DEFAULT_EPS).expect("shapes");
                            let h = activation(&h, Activation::Tanh);
                            ops::sum_all(&ops::mul(&h, &v[4]))
                        },
                        &v[0],
                    )?;
                    Ok(ops::sum_all(&ops::square(&g)))
                },
                inputs,
            )
        }),
    ]
}

fn norm_case(kind: NormKind) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let inputs = vec![
        random(Shape::new(2, 3, 3, 3), &mut rng),
        random(Shape::new(1, 3, 1, 1), &mut rng),
        random(Shape::new(1, 3, 1, 1), &mut rng),
    ];
    check(|v| Ok(normalize(&v[0], kind, &v[1], &v[2], DEFAULT_EPS)?), inputs)
}

fn set_case(mode: ReduceMode) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = (0..3).map(|_| random(Shape::new(2, 2, 2, 2), &mut rng)).collect();
    check(|v| Ok(set_reduce(v, mode)?), inputs)
}

const CRITIC_PARAMS: [&str; 4] = ["critic.1.conv.w", "critic.3.norm.gamma", "critic.score.w", "critic.ac.w"];

fn critic_inputs(rng: &mut ChaCha8Rng) -> [Var; 4] {
    let s = Shape::new(2, 1, 32, 32);
    [random(s, rng), random(s, rng), random(s, rng), random(s, rng)].map(Var::constant)
}

fn loss_cases() -> Vec<Case> {
    vec![
        case("pixel l1", SMOOTH_TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(30);
            let t = random(Shape::new(2, 1, 4, 4), &mut rng);
            let d = off_kink(Shape::new(2, 1, 4, 4), &mut rng);
            let g = t.zip_broadcast(&d, |a, b| a + b).expect("same shape");
            check(|v| pixel_l1(&v[0], &Var::constant(t.clone())), vec![g])
        }),
        case("constant loss", SMOOTH_TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let inputs = vec![random(Shape::new(2, 8, 1, 1), &mut rng), random(Shape::new(2, 8, 1, 1), &mut rng)];
            check(|v| const_loss(&v[0], &v[1]), inputs)
        }),
        case("auxiliary cross-entropy", SMOOTH_TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(32);
            let inputs = vec![random(Shape::new(3, 4, 1, 1), &mut rng), random(Shape::new(3, 4, 1, 1), &mut rng)];
            check(|v| ac_loss(&v[0], &v[1], &[0, 3, 1]), inputs)
        }),
        case("von Neumann divergence", TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(33);
            let inputs = vec![random(Shape::new(2, 3, 4, 4), &mut rng), random(Shape::new(2, 3, 4, 4), &mut rng)];
            check(|v| Ok(ops::sum_all(&von_neumann_div(&channel_covariance(&v[0])?, &channel_covariance(&v[1])?)?)), inputs)
        }),
        case("tap loss", TOL, || {
            let mut rng = ChaCha8Rng::seed_from_u64(34);
            let inputs = vec![random(Shape::new(2, 3, 4, 4), &mut rng), random(Shape::new(2, 3, 4, 4), &mut rng)];
            check(|v| Ok(tap_loss(&v[0], &v[1], 0.1)?.0), inputs)
        }),
        case("perceptual taps", TOL, || {
            let net = tiny_classifier(Heads::Both)?;
            let mut rng = ChaCha8Rng::seed_from_u64(35);
            let target = Var::constant(random(Shape::new(1, 1, 32, 32), &mut rng));
            let gen = random(Shape::new(1, 1, 32, 32), &mut rng);
            check(move |v| perceptual_term(&net, &v[0], &target, &Tap::ALL, &[1.0; 5], 0.1), vec![gen])
        }),
        case("adversarial critic terms", TOL, || {
            let critic = Critic::init(tiny_wnet(Variant::Adain), 36)?;
            let [p, real, fake, r] = critic_inputs(&mut ChaCha8Rng::seed_from_u64(36));
            let inputs = store_values(&critic.params, &CRITIC_PARAMS)?;
            check(
                move |v| {
                    let b = critic.binder(false);
                    bind_all(&b, &CRITIC_PARAMS, v)?;
                    let (sr, lr) = critic.discriminate(&b, &p, &real, &r)?;
                    let (sf, lf) = critic.discriminate(&b, &p, &fake, &r)?;
                    let (adv_g, adv_d) = adv_losses(&sr, &sf);
                    Ok(&(&adv_d + &(adv_g * 0.5)) + &ac_loss(&lr, &lf, &[0, 2])?)
                },
                inputs,
            )
        }),
        case("gradient penalty", PENALTY_TOL, || {
            let critic = Critic::init(tiny_wnet(Variant::Adain), 37)?;
            let [p, real, fake, r] = critic_inputs(&mut ChaCha8Rng::seed_from_u64(37));
            let inputs = store_values(&critic.params, &CRITIC_PARAMS)?;
            check(
                move |v| {
                    let b = critic.binder(false);
                    bind_all(&b, &CRITIC_PARAMS, v)?;
                    Ok(gradient_penalty(&critic, &b, &p, &real, &fake, &r, &[0.25, 0.8])?.0)
                },
                inputs,
            )
        }),
        case("style transform", TOL, || {
            let gen = Generator::init(tiny_wnet(Variant::Adain), 38)?;
            let names = ["mix.1.style0.w", "mix.1.style0.b", "mix.1.style1.w"];
            let mut inputs = vec![random(Shape::new(1, 6, 4, 4), &mut ChaCha8Rng::seed_from_u64(38))];
            inputs.extend(store_values(&gen.params, &names)?);
            check(
                move |v| {
                    let b = gen.binder(Mode::Train, false);
                    bind_all(&b, &names, &v[1..])?;
                    gen.style_transform(&b, 1, &v[0])
                },
                inputs,
            )
        }),
        case("generator (bn)", TOL, || generator_case(Variant::Bn)),
        case("generator (adain)", TOL, || generator_case(Variant::Adain)),
    ]
}

/// End-to-end check of the generator loss with respect to parameters of
/// every component.
fn generator_case(variant: Variant) -> Result<GradCheck> {
    let gen = Generator::init(tiny_wnet(variant), 39)?;
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    let protos = Var::constant(random(Shape::new(2, 2, 32, 32), &mut rng));
    let refs = Var::constant(random(Shape::new(3, 1, 32, 32), &mut rng));
    let target = Var::constant(random(Shape::new(2, 1, 32, 32), &mut rng));
    let groups = vec![vec![0, 1], vec![2]];
    let mut names = vec!["enc_p.1.conv.w", "enc_r.2.conv.w", "mix.1.blk0.conv.w", "dec.1.deconv.w", "dec.5.deconv.w"];
    if variant == Variant::Bn {
        names.push("mix.2.blk0.norm.gamma");
    } else {
        names.push("mix.2.style1.w");
    }
    let inputs = store_values(&gen.params, &names)?;
    let weights = LossWeights::default();
    check(
        move |v| {
            let b = gen.binder(Mode::Train, false);
            bind_all(&b, &names, v)?;
            let out = gen.forward(&b, &protos, &refs, &groups)?;
            let probe = gen.encode_content(&b, &channel_concat(&[out.image.clone(), out.image.clone()])?)?;
            let const_p = const_loss(out.content_terminal(), probe.last().expect("layers"))?;
            let zero = Var::scalar(0.0);
            let proj = ops::mean_all(&ops::mul(&out.image, &target));
            Ok(total_g_var(&zero, &zero, &proj, &zero, &const_p, &zero, &weights))
        },
        inputs,
    )
}

/// A deliberately wrong backward rule; used to show the suite reports
/// failures.
fn broken_case() -> Case {
    case("broken backward fixture", TOL, || {
        let x = random(Shape::new(1, 1, 2, 2), &mut ChaCha8Rng::seed_from_u64(40));
        check(
            |v| {
                let out = v[0].value().map(|a| a * a);
                Ok(ops::record("bad_square", out, vec![v[0].clone()], |i, _, g| vec![Some(ops::mul(g, &i[0]))]))
            },
            vec![x],
        )
    })
}

/// Runs every case, optionally with the broken fixture appended.
pub fn run_suite(include_broken: bool) -> Vec<CaseResult> {
    let mut cases = tensor_cases();
    cases.extend(loss_cases());
    if include_broken {
        cases.push(broken_case());
    }
    cases
        .into_iter()
        .map(|c| {
            let start = Instant::now();
            let r = (c.run)();
            let seconds = start.elapsed().as_secs_f64();
            match r {
                Ok(g) => CaseResult {
                    name: c.name.into(),
                    tol: c.tol,
                    max_rel_error: g.max_rel_error,
                    elements: g.elements,
                    seconds,
                    error: None,
                },
                Err(e) => CaseResult {
                    name: c.name.into(),
                    tol: c.tol,
                    max_rel_error: f64::NAN,
                    elements: 0,
                    seconds,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Fixed-width table of suite results.
pub fn format_table(results: &[CaseResult]) -> String {
    let mut s = format!("{:<42} {:>10} {:>8} {:>8} {:>7}  result\n", "case", "max rel", "tol", "elems", "secs");
    for r in results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        s += &format!(
            "{:<42} {:>10.2e} {:>8.0e} {:>8} {:>7.2}  {status}",
            r.name, r.max_rel_error, r.tol, r.elements, r.seconds
        );
        if let Some(e) = &r.error {
            s += &format!(" ({e})");
        }
        s.push('\n');
    }
    s
}
