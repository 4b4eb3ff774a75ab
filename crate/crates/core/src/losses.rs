//! Loss terms for both players and their weighted totals.

use std::fmt::Write as _;
use std::rc::Rc;

use gwnet_tensor::{input_gradient, interpolate_per_sample, ops, Shape, Tensor, Var};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::config::{format_list, parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::nn::Binder;
use crate::percepnets::{Classifier, Tap};
use crate::wnet::Critic;

/// Ridge added to channel covariances before the divergence.
pub const VN_RIDGE: f64 = 1e-4;

/// Scalar weights of every loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub alpha_gp: f64,
    pub beta: f64,
    pub lambda_pixel: f64,
    pub psi_p: f64,
    pub psi_r: f64,
    /// Per-tap weights for φ_real over phi1-2 … phi5-3.
    pub w_real: [f64; 5],
    /// Per-tap weights for φ_content over phi4-3, phi5-3.
    pub w_content: [f64; 2],
    /// Per-tap weights for φ_style over phi4-3, phi5-3.
    pub w_style: [f64; 2],
    pub w_vn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            alpha_gp: 10.0,
            beta: 1.0,
            lambda_pixel: 50.0,
            psi_p: 1.0,
            psi_r: 1.0,
            w_real: [1.0; 5],
            w_content: [1.0; 2],
            w_style: [1.0; 2],
            w_vn: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let scalars = [self.alpha, self.alpha_gp, self.beta, self.lambda_pixel, self.psi_p, self.psi_r, self.w_vn];
        let all = scalars.iter().chain(&self.w_real).chain(&self.w_content).chain(&self.w_style);
        if all.into_iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("alpha", self.alpha);
        kv.set("alpha_gp", self.alpha_gp);
        kv.set("beta", self.beta);
        kv.set("lambda_pixel", self.lambda_pixel);
        kv.set("psi_p", self.psi_p);
        kv.set("psi_r", self.psi_r);
        kv.set("w_real", format_list(&self.w_real));
        kv.set("w_content", format_list(&self.w_content));
        kv.set("w_style", format_list(&self.w_style));
        kv.set("w_vn", self.w_vn);
    }

    pub fn read_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("alpha", &mut self.alpha)?;
        kv.read_into("alpha_gp", &mut self.alpha_gp)?;
        kv.read_into("beta", &mut self.beta)?;
        kv.read_into("lambda_pixel", &mut self.lambda_pixel)?;
        kv.read_into("psi_p", &mut self.psi_p)?;
        kv.read_into("psi_r", &mut self.psi_r)?;
        kv.read_into("w_vn", &mut self.w_vn)?;
        fn fixed<const K: usize>(kv: &KeyValues, key: &str, slot: &mut [f64; K]) -> Result<()> {
            if let Some(s) = kv.get_str(key) {
                let v: Vec<f64> = parse_list(s)?;
                *slot = v.try_into().map_err(|v: Vec<f64>| Error::Config(format!("`{key}` needs {K} values, got {}", v.len())))?;
            }
            Ok(())
        }
        fixed(kv, "w_real", &mut self.w_real)?;
        fixed(kv, "w_content", &mut self.w_content)?;
        fixed(kv, "w_style", &mut self.w_style)?;
        self.validate()
    }
}

/// Critic terms: `(adv_g, adv_d)` with `adv_g = mean D(fake)` and
/// `adv_d = mean D(fake) − mean D(real)`.
pub fn adv_losses(score_real: &Var, score_fake: &Var) -> (Var, Var) {
    let fake = ops::mean_all(score_fake);
    let real = ops::mean_all(score_real);
    (fake.clone(), &fake - &real)
}

/// Two-sided gradient penalty on the candidate slot.
///
/// `x̂ = (1 − u)·real + u·fake` per sample; the penalty is the batch mean
/// of `(‖∇_x̂ D‖ − 1)²`, differentiable with respect to the critic
/// parameters. Also returns the mean gradient norm.
pub fn gradient_penalty(
    critic: &Critic,
    b: &Binder,
    proto: &Var,
    real: &Var,
    fake: &Var,
    reference: &Var,
    u: &[f64],
) -> Result<(Var, f64)> {
    let x_hat = interpolate_per_sample(&real.detach(), &fake.detach(), u)?;
    let mut failure = None;
    let (_, g) = input_gradient(
        |x| match critic.discriminate(b, proto, x, reference) {
            Ok((score, _)) => ops::sum_all(&score),
            Err(e) => {
                failure = Some(e);
                Var::scalar(0.0)
            }
        },
        &x_hat,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    penalty_from_gradient(&g)
}

/// `mean((‖g_n‖ − 1)²)` over batch rows of an input gradient, and the mean
/// norm.
pub fn penalty_from_gradient(g: &Var) -> Result<(Var, f64)> {
    let n = g.shape().n();
    let sq = ops::sum_to(&ops::square(g), Shape::new(n, 1, 1, 1));
    // tiny floor keeps the sqrt derivative finite at a zero gradient
    let norm = ops::sqrt(&(&sq + 1e-12));
    let mean_norm = norm.value().sum() / n as f64;
    Ok((ops::mean_all(&ops::square(&(&norm - 1.0))), mean_norm))
}

/// Softmax cross-entropy of `(B, K, 1, 1)` logits against class indices,
/// averaged over the batch.
pub fn cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let [n, k, h, w] = logits.shape().0;
    if h != 1 || w != 1 || labels.len() != n {
        return Err(Error::Data(format!("logits {} with {} labels", logits.shape(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("class index {bad} outside 0..{k}")));
    }
    let rows = Shape::new(n, 1, 1, 1);
    let shift = Tensor::from_fn(rows, |[r, ..]| {
        logits.value().data()[r * k..(r + 1) * k].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    });
    let shifted = &(-&Var::constant(shift)) + logits;
    let lse = ops::ln(&ops::sum_to(&ops::exp(&shifted), rows));
    let onehot = Tensor::from_fn(logits.shape(), |[r, c, ..]| if labels[r] == c { 1.0 } else { 0.0 });
    let picked = ops::sum_to(&ops::mul_const(&shifted, &onehot), rows);
    Ok(ops::mean_all(&(&lse - &picked)))
}

/// Auxiliary-classifier loss: cross-entropy of the true style on the real
/// and on the fake triple, summed.
pub fn ac_loss(logits_real: &Var, logits_fake: &Var, labels: &[usize]) -> Result<Var> {
    Ok(&cross_entropy(logits_real, labels)? + &cross_entropy(logits_fake, labels)?)
}

/// Encoder constant loss: squared distance between feature vectors divided
/// by their dimension, averaged over the batch.
pub fn const_loss(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(Error::Data(format!("const loss: {} vs {}", a.shape(), b.shape())));
    }
    Ok(ops::mean_all(&ops::square(&(a - b))))
}

/// Mean absolute pixel difference.
pub fn pixel_l1(generated: &Var, target: &Var) -> Result<Var> {
    if generated.shape() != target.shape() {
        return Err(Error::Data(format!("pixel loss: {} vs {}", generated.shape(), target.shape())));
    }
    Ok(ops::mean_all(&ops::abs(&(generated - target))))
}

fn matrices(t: &Tensor) -> Vec<DMatrix<f64>> {
    let [n, _, c, _] = t.shape().0;
    (0..n).map(|k| DMatrix::from_row_slice(c, c, &t.data()[k * c * c..(k + 1) * c * c])).collect()
}

fn check_spd_input(t: &Tensor, name: &str) -> Result<()> {
    let [_, one, r, c] = t.shape().0;
    if one != 1 || r != c {
        return Err(Error::Data(format!("{name}: expected (B, 1, C, C), got {}", t.shape())));
    }
    for m in matrices(t) {
        let scale = m.amax().max(1.0);
        if (&m - m.transpose()).amax() > 1e-9 * scale {
            return Err(Error::Data(format!("{name} is not symmetric")));
        }
    }
    Ok(())
}

fn eig(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let e = SymmetricEigen::new(m.clone());
    if e.eigenvalues.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::Numeric("von Neumann divergence needs positive definite inputs".into()));
    }
    Ok(e)
}

fn mat_log(e: &SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let l = DMatrix::from_diagonal(&e.eigenvalues.map(f64::ln));
    &e.eigenvectors * l * e.eigenvectors.transpose()
}

/// Von Neumann divergence `tr(A·log A − A·log B − A + B)` of each pair of
/// symmetric positive-definite matrices in `(B, 1, C, C)` stacks; returns
/// `(B, 1, 1, 1)`.
///
/// The backward rule is first order: `∂/∂A = log A − log B` and
/// `∂/∂B = I − V (L ∘ VᵀAV) Vᵀ`, where `B = V diag(b) Vᵀ` and `L` holds the
/// divided differences of `log` at the eigenvalues of `B`.
pub fn von_neumann_div(a: &Var, b: &Var) -> Result<Var> {
    check_spd_input(a.value(), "A")?;
    check_spd_input(b.value(), "B")?;
    if a.shape() != b.shape() {
        return Err(Error::Data(format!("A {} vs B {}", a.shape(), b.shape())));
    }
    let [n, _, c, _] = a.shape().0;
    let (ma, mb) = (matrices(a.value()), matrices(b.value()));
    let mut values = Vec::with_capacity(n);
    let mut grad_a = Vec::with_capacity(n * c * c);
    let mut grad_b = Vec::with_capacity(n * c * c);
    for (a, b) in ma.iter().zip(&mb) {
        let (ea, eb) = (eig(a)?, eig(b)?);
        let (log_a, log_b) = (mat_log(&ea), mat_log(&eb));
        let a_log_a: f64 = ea.eigenvalues.iter().map(|&x| x * x.ln()).sum();
        let a_log_b = (a * &log_b).trace();
        values.push(a_log_a - a_log_b - a.trace() + b.trace());
        let ga = &log_a - &log_b;
        let v = &eb.eigenvectors;
        let lam = &eb.eigenvalues;
        let inner = v.transpose() * a * v;
        let divided = DMatrix::from_fn(c, c, |i, j| {
            let (x, y) = (lam[i], lam[j]);
            let d = if (x - y).abs() <= 1e-12 * x.abs().max(y.abs()) { 1.0 / x } else { (x.ln() - y.ln()) / (x - y) };
            d * inner[(i, j)]
        });
        let gb = DMatrix::<f64>::identity(c, c) - v * divided * v.transpose();
        for i in 0..c {
            for j in 0..c {
                grad_a.push(ga[(i, j)]);
                grad_b.push(gb[(i, j)]);
            }
        }
    }
    let shape = a.shape();
    let ga = Rc::new(Tensor::new(shape, grad_a)?);
    let gb = Rc::new(Tensor::new(shape, grad_b)?);
    let out = Tensor::new(Shape::new(n, 1, 1, 1), values)?;
    Ok(ops::record("von_neumann_div", out, vec![a.clone(), b.clone()], move |_, _, g| {
        vec![Some(ops::mul_const(&ops::broadcast_to(g, shape), &ga)), Some(ops::mul_const(&ops::broadcast_to(g, shape), &gb))]
    }))
}

/// Channel covariance of `(B, C, H, W)` features, ridged by
/// [`VN_RIDGE`]·I and scaled to unit trace; `(B, 1, C, C)`.
pub fn channel_covariance(f: &Var) -> Result<Var> {
    let [n, c, h, w] = f.shape().0;
    let x = ops::reshape(f, Shape::new(n, 1, c, h * w))?;
    let centered = &x - &ops::mean_to(&x, Shape::new(n, 1, c, 1));
    let cov = ops::matmul(&centered, &ops::transpose_hw(&centered))? * (1.0 / (h * w) as f64);
    let eye = Tensor::from_fn(Shape::new(1, 1, c, c), |[_, _, i, j]| if i == j { 1.0 } else { 0.0 });
    let ridged = &cov + &Var::constant(eye.map(|v| v * VN_RIDGE));
    let trace = ops::sum_to(&ops::mul_const(&ridged, &eye.broadcast_to(ridged.shape())), Shape::new(n, 1, 1, 1));
    Ok(&ridged / &trace)
}

/// Per-tap perceptual discrepancy: feature MSE plus `w_vn` times the von
/// Neumann divergence between channel covariances (generated first).
pub fn tap_loss(gen: &Var, target: &Var, w_vn: f64) -> Result<(Var, f64, f64)> {
    if gen.shape() != target.shape() {
        return Err(Error::Data(format!("tap features {} vs {}", gen.shape(), target.shape())));
    }
    let mse = ops::mean_all(&ops::square(&(gen - target)));
    if w_vn == 0.0 {
        let m = mse.item();
        return Ok((mse, m, 0.0));
    }
    let vn = ops::mean_all(&von_neumann_div(&channel_covariance(gen)?, &channel_covariance(target)?)?);
    let (m, v) = (mse.item(), vn.item());
    Ok((&mse + &(vn * w_vn), m, v))
}

/// Weighted perceptual loss of one classifier over `taps`; the target's
/// features are computed without gradient.
pub fn perceptual_term(net: &Classifier, gen: &Var, target: &Var, taps: &[Tap], weights: &[f64], w_vn: f64) -> Result<Var> {
    let b = net.binder();
    let fg = net.features(&b, gen, taps)?;
    let ft = {
        let _guard = gwnet_tensor::no_grad();
        net.features(&b, &target.detach(), taps)?
    };
    let mut total = Var::scalar(0.0);
    for (tap, &w) in taps.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let (l, _, _) = tap_loss(&fg[tap], &ft[tap], w_vn)?;
        total = &total + &(l * w);
    }
    Ok(total)
}

/// The three frozen perceptual networks.
pub struct PerceptualNets<'a> {
    pub real: &'a Classifier,
    pub content: &'a Classifier,
    pub style: &'a Classifier,
}

/// `(φ_real, φ_content, φ_style)` for a generated batch against the real
/// target, the critic-side prototype, and the critic-side reference.
pub fn perceptual_total(
    nets: &PerceptualNets,
    generated: &Var,
    target: &Var,
    content_probe: &Var,
    style_probe: &Var,
    w: &LossWeights,
) -> Result<(Var, Var, Var)> {
    let real = perceptual_term(nets.real, generated, target, &Tap::ALL, &w.w_real, w.w_vn)?;
    let content = perceptual_term(nets.content, generated, content_probe, &Tap::HIGH, &w.w_content, w.w_vn)?;
    let style = perceptual_term(nets.style, generated, style_probe, &Tap::HIGH, &w.w_style, w.w_vn)?;
    Ok((real, content, style))
}

/// Every term of one training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub critic_real: f64,
    pub critic_fake: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub gp: f64,
    pub gp_grad_norm: f64,
    pub ac_d: f64,
    pub ac_g: f64,
    pub pixel: f64,
    pub phi_real: f64,
    pub phi_content: f64,
    pub phi_style: f64,
    pub phi_total: f64,
    pub const_p: f64,
    pub const_r: f64,
    pub total_g: f64,
    pub total_d: f64,
}

pub const CSV_HEADER: &str = "step,critic_real,critic_fake,adv_g,adv_d,gp,gp_grad_norm,ac_d,ac_g,pixel,phi_real,phi_content,phi_style,phi_total,const_p,const_r,total_g,total_d";

impl LossReport {
    fn values(&self) -> [f64; 17] {
        [
            self.critic_real,
            self.critic_fake,
            self.adv_g,
            self.adv_d,
            self.gp,
            self.gp_grad_norm,
            self.ac_d,
            self.ac_g,
            self.pixel,
            self.phi_real,
            self.phi_content,
            self.phi_style,
            self.phi_total,
            self.const_p,
            self.const_r,
            self.total_g,
            self.total_d,
        ]
    }

    /// One CSV row; floats use the shortest exact representation so the log
    /// round-trips bit for bit.
    pub fn csv_row(&self) -> String {
        let mut s = self.step.to_string();
        for v in self.values() {
            let _ = write!(s, ",{v:?}");
        }
        s
    }

    pub fn parse_csv_row(line: &str) -> Result<LossReport> {
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 18 {
            return Err(Error::Data(format!("loss row has {} columns, expected 18", parts.len())));
        }
        let f = |k: usize| parts[k].parse::<f64>().map_err(|e| Error::Data(format!("column {k}: {e}")));
        Ok(LossReport {
            step: parts[0].parse().map_err(|e| Error::Data(format!("step: {e}")))?,
            critic_real: f(1)?,
            critic_fake: f(2)?,
            adv_g: f(3)?,
            adv_d: f(4)?,
            gp: f(5)?,
            gp_grad_norm: f(6)?,
            ac_d: f(7)?,
            ac_g: f(8)?,
            pixel: f(9)?,
            phi_real: f(10)?,
            phi_content: f(11)?,
            phi_style: f(12)?,
            phi_total: f(13)?,
            const_p: f(14)?,
            const_r: f(15)?,
            total_g: f(16)?,
            total_d: f(17)?,
        })
    }

    /// First non-finite term, by column name.
    pub fn non_finite(&self) -> Option<&'static str> {
        let names = CSV_HEADER.split(',').skip(1);
        names.zip(self.values()).find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

/// `L_G = −α·adv_G + β·ac + λ_pixel·pixel + φ_total + ψ_p·const_p + ψ_r·const_r`.
pub fn total_g(r: &LossReport, w: &LossWeights) -> f64 {
    -w.alpha * r.adv_g + w.beta * r.ac_g + w.lambda_pixel * r.pixel + r.phi_total + w.psi_p * r.const_p + w.psi_r * r.const_r
}

/// `L_D = α·adv_D + α_GP·GP + β·ac`.
pub fn total_d(r: &LossReport, w: &LossWeights) -> f64 {
    w.alpha * r.adv_d + w.alpha_gp * r.gp + w.beta * r.ac_d
}

/// Graph version of [`total_g`] with the same summation order.
pub fn total_g_var(adv_g: &Var, ac: &Var, pixel: &Var, phi_total: &Var, const_p: &Var, const_r: &Var, w: &LossWeights) -> Var {
    let t = &(adv_g * -w.alpha) + &(ac * w.beta);
    let t = &t + &(pixel * w.lambda_pixel);
    let t = &t + phi_total;
    let t = &t + &(const_p * w.psi_p);
    &t + &(const_r * w.psi_r)
}

/// Graph version of [`total_d`] with the same summation order.
pub fn total_d_var(adv_d: &Var, gp: &Var, ac: &Var, w: &LossWeights) -> Var {
    let t = &(adv_d * w.alpha) + &(gp * w.alpha_gp);
    &t + &(ac * w.beta)
}
