//! Training objectives and their analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! its inputs, so the trainer can chain them into the network backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Act, Grads, Net};
use crate::scalar::{cst, Scalar};

/// Clamp applied to discriminator probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-7;
pub const DEFAULT_GP_LAMBDA: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GanVariant {
    Standard,
    #[default]
    WganGp,
}

impl std::fmt::Display for GanVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GanVariant::Standard => "standard",
            GanVariant::WganGp => "wgan_gp",
        })
    }
}

fn check_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    check_len(a, b)?;
    if a.is_empty() {
        return Ok(T::zero());
    }
    let s: T = a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum();
    Ok(s / cst(a.len() as f64))
}

/// Value and gradient with respect to `a` (subgradient 0 where `a == b`).
pub fn l1_loss_grad<T: Scalar>(a: &[T], b: &[T]) -> Result<(T, Vec<T>)> {
    let v = l1_loss(a, b)?;
    let inv = T::one() / cst(a.len().max(1) as f64);
    let g = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x > y {
                inv
            } else if x < y {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    Ok((v, g))
}

/// `KL(N(mu, sigma^2) || N(0, I))` summed over dimensions.
pub fn kl_loss<T: Scalar>(mu: &[T], sigma: &[T]) -> Result<T> {
    check_len(mu, sigma)?;
    let half: T = cst(0.5);
    let mut s = T::zero();
    for (&m, &sd) in mu.iter().zip(sigma) {
        if !(sd > T::zero()) {
            return Err(Error::Numeric(format!("non-positive sigma {sd}")));
        }
        let var = sd * sd;
        s += T::one() + var.ln() - m * m - var;
    }
    Ok(-half * s)
}

/// Batch KL from the log-variance parameterization.
///
/// `mu` and `logvar` are `[batch][k]`; the per-sample sum is averaged over the
/// batch. Returns the value and gradients with respect to `mu` and `logvar`.
pub fn kl_logvar_grad<T: Scalar>(
    mu: &[T],
    logvar: &[T],
    batch: usize,
) -> Result<(T, Vec<T>, Vec<T>)> {
    check_len(mu, logvar)?;
    if batch == 0 || mu.len() % batch != 0 {
        return Err(Error::Shape(format!("{} values in a batch of {batch}", mu.len())));
    }
    let half: T = cst(0.5);
    let inv_b = T::one() / cst(batch as f64);
    let mut s = T::zero();
    let mut gmu = Vec::with_capacity(mu.len());
    let mut glv = Vec::with_capacity(mu.len());
    for (&m, &lv) in mu.iter().zip(logvar) {
        let var = lv.exp();
        s += T::one() + lv - m * m - var;
        gmu.push(m * inv_b);
        glv.push(half * (var - T::one()) * inv_b);
    }
    Ok((-half * s * inv_b, gmu, glv))
}

fn check_prob<T: Scalar>(d: &[T]) -> Result<()> {
    for &v in d {
        if !(v >= T::zero() && v <= T::one()) {
            return Err(Error::Numeric(format!("discriminator output {v} outside [0, 1]")));
        }
    }
    Ok(())
}

fn mean<T: Scalar>(v: &[T]) -> T {
    if v.is_empty() {
        T::zero()
    } else {
        v.iter().copied().sum::<T>() / cst(v.len() as f64)
    }
}

/// Adversarial losses with gradients with respect to each score stream.
#[derive(Clone, Debug, PartialEq)]
pub struct GanTerms<T> {
    pub gen_loss: T,
    pub disc_loss: T,
    /// d(disc_loss)/d(score) for real, recon and gen streams.
    pub disc_grad: [Vec<T>; 3],
    /// d(gen_loss)/d(score) for recon and gen streams.
    pub gen_grad: [Vec<T>; 2],
}

/// Standard (non-saturating) GAN losses on probabilities, batch-averaged.
///
/// `disc = -[log d_real + (log(1 - d_recon) + log(1 - d_gen)) / 2]`,
/// `gen = -(log d_recon + log d_gen) / 2`.
pub fn gan_standard<T: Scalar>(d_real: &[T], d_recon: &[T], d_gen: &[T]) -> Result<GanTerms<T>> {
    check_prob(d_real)?;
    check_prob(d_recon)?;
    check_prob(d_gen)?;
    let (lo, hi): (T, T) = (cst(LOG_EPS), cst(1.0 - LOG_EPS));
    let half: T = cst(0.5);
    let clamp = |v: T| v.max(lo).min(hi);
    let per = |v: &[T]| T::one() / cst(v.len().max(1) as f64);

    let (nr, nc, ng) = (per(d_real), per(d_recon), per(d_gen));
    let real_term = mean(&d_real.iter().map(|&d| clamp(d).ln()).collect::<Vec<_>>());
    let recon_fake = mean(&d_recon.iter().map(|&d| (T::one() - clamp(d)).ln()).collect::<Vec<_>>());
    let gen_fake = mean(&d_gen.iter().map(|&d| (T::one() - clamp(d)).ln()).collect::<Vec<_>>());
    let disc_loss = -(real_term + half * (recon_fake + gen_fake));
    let recon_real = mean(&d_recon.iter().map(|&d| clamp(d).ln()).collect::<Vec<_>>());
    let gen_real = mean(&d_gen.iter().map(|&d| clamp(d).ln()).collect::<Vec<_>>());
    let gen_loss = -half * (recon_real + gen_real);

    let disc_grad = [
        d_real.iter().map(|&d| -nr / clamp(d)).collect(),
        d_recon.iter().map(|&d| half * nc / (T::one() - clamp(d))).collect(),
        d_gen.iter().map(|&d| half * ng / (T::one() - clamp(d))).collect(),
    ];
    let gen_grad = [
        d_recon.iter().map(|&d| -half * nc / clamp(d)).collect(),
        d_gen.iter().map(|&d| -half * ng / clamp(d)).collect(),
    ];
    Ok(GanTerms {
        gen_loss,
        disc_loss,
        disc_grad,
        gen_grad,
    })
}

/// Wasserstein losses; the two fake streams are pooled with equal weight.
///
/// `disc = mean(d_fake) - mean(d_real) + lambda * penalty`, `gen = -mean(d_fake)`.
pub fn gan_wgan_gp<T: Scalar>(
    d_real: &[T],
    d_recon: &[T],
    d_gen: &[T],
    penalty: T,
    lambda: T,
) -> Result<GanTerms<T>> {
    if !(penalty >= T::zero()) {
        return Err(Error::Numeric(format!("gradient penalty {penalty} is negative")));
    }
    let all = d_real.iter().chain(d_recon).chain(d_gen);
    if all.clone().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite critic score".into()));
    }
    let half: T = cst(0.5);
    let fake = half * (mean(d_recon) + mean(d_gen));
    let disc_loss = fake - mean(d_real) + lambda * penalty;
    let gen_loss = -fake;
    let per = |v: &[T]| T::one() / cst(v.len().max(1) as f64);
    let (nr, nc, ng) = (per(d_real), per(d_recon), per(d_gen));
    Ok(GanTerms {
        gen_loss,
        disc_loss,
        disc_grad: [
            vec![-nr; d_real.len()],
            vec![half * nc; d_recon.len()],
            vec![half * ng; d_gen.len()],
        ],
        gen_grad: [vec![-half * nc; d_recon.len()], vec![-half * ng; d_gen.len()]],
    })
}

/// A scalar-valued critic over single-channel image batches.
pub trait Critic<T: Scalar> {
    /// Scores and per-sample input gradients for an `[n][h][w]` batch.
    fn score_and_input_grad(&self, x: &[T], n: usize, h: usize, w: usize) -> Result<(Vec<T>, Vec<T>)>;
}

impl<T: Scalar> Critic<T> for Net<T> {
    fn score_and_input_grad(&self, x: &[T], n: usize, h: usize, w: usize) -> Result<(Vec<T>, Vec<T>)> {
        let input = Act::Map {
            c: 1,
            n,
            h,
            w,
            data: x.to_vec(),
        };
        let (y, tape) = self.forward(input)?;
        let ones = Act::Flat {
            n,
            f: 1,
            data: vec![T::one(); n],
        };
        let g = self
            .backward(&tape, ones, None, true, true)?
            .expect("input gradient requested");
        Ok((y.into_data(), g.into_data()))
    }
}

/// Per-sample interpolation `u * real + (1 - u) * fake`.
pub fn interpolate<T: Scalar>(real: &[T], fake: &[T], u: &[T]) -> Result<Vec<T>> {
    check_len(real, fake)?;
    if u.is_empty() || real.len() % u.len() != 0 {
        return Err(Error::Shape("one mixing weight per sample required".into()));
    }
    let per = real.len() / u.len();
    Ok(real
        .iter()
        .zip(fake)
        .enumerate()
        .map(|(i, (&r, &f))| {
            let t = u[i / per];
            t * r + (T::one() - t) * f
        })
        .collect())
}

fn per_sample_norms<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    let per = g.len() / n.max(1);
    g.chunks(per.max(1))
        .map(|c| c.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect()
}

/// Mean of `(||grad D(x_hat)|| - 1)^2` with explicit mixing weights.
pub fn gradient_penalty_at<T: Scalar, C: Critic<T> + ?Sized>(
    critic: &C,
    real: &[T],
    fake: &[T],
    u: &[T],
    h: usize,
    w: usize,
) -> Result<T> {
    let xhat = interpolate(real, fake, u)?;
    let n = u.len();
    let (_, g) = critic.score_and_input_grad(&xhat, n, h, w)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("critic gradient is not finite at the interpolate".into()));
    }
    let norms = per_sample_norms(&g, n);
    Ok(mean(&norms.iter().map(|&s| (s - T::one()) * (s - T::one())).collect::<Vec<_>>()))
}

/// Gradient penalty with `u ~ U(0, 1)` drawn per sample.
pub fn gradient_penalty<T: Scalar, C: Critic<T> + ?Sized, R: Rng>(
    critic: &C,
    real: &[T],
    fake: &[T],
    n: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<T> {
    let u: Vec<T> = (0..n).map(|_| cst(rng.gen_range(0.0..1.0))).collect();
    gradient_penalty_at(critic, real, fake, &u, h, w)
}

/// Penalty value and its exact gradient with respect to the critic weights.
///
/// Valid for critics made of linear layers and leaky ReLUs, where the input
/// gradient is piecewise constant in `x`: with `v_i = (2/B)(|g_i| - 1) g_i / |g_i|`,
/// the weight gradient equals that of `sum_i <v_i, grad D(x_i)>`, which is
/// the tangent pass `J v` differentiated with frozen activation masks.
pub fn gradient_penalty_param_grads<T: Scalar>(
    critic: &Net<T>,
    xhat: &[T],
    n: usize,
    h: usize,
    w: usize,
    grads: &mut Grads<T>,
    scale: T,
) -> Result<T> {
    let input = Act::Map {
        c: 1,
        n,
        h,
        w,
        data: xhat.to_vec(),
    };
    let (_, tape) = critic.forward(input)?;
    let ones = Act::Flat {
        n,
        f: 1,
        data: vec![T::one(); n],
    };
    let g = critic
        .backward(&tape, ones, None, true, true)?
        .expect("input gradient requested")
        .into_data();
    let norms = per_sample_norms(&g, n);
    let per = g.len() / n;
    let two_over_b: T = cst(2.0 / n as f64);
    let mut penalty = T::zero();
    let mut v = vec![T::zero(); g.len()];
    for (i, &s) in norms.iter().enumerate() {
        penalty += (s - T::one()) * (s - T::one());
        if s > T::zero() {
            let coef = two_over_b * (s - T::one()) / s;
            for (dst, &src) in v[i * per..(i + 1) * per].iter_mut().zip(&g[i * per..(i + 1) * per]) {
                *dst = coef * src;
            }
        }
    }
    penalty /= cst(n as f64);
    let tangent = Act::Map {
        c: 1,
        n,
        h,
        w,
        data: v,
    };
    let (jv, ttape) = critic.linearize(&tape, tangent)?;
    let dy = Act::Flat {
        n,
        f: 1,
        data: vec![scale; jv.data().len()],
    };
    critic.backward(&ttape, dy, Some(grads), false, false)?;
    Ok(penalty)
}

/// Every scalar of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_recon: f64,
    pub l_gen: f64,
    pub l_kl: f64,
    pub l_cvae: f64,
    pub l_gan_generator: f64,
    pub l_gan_discriminator: f64,
    pub gradient_penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 8] = [
        "l_recon",
        "l_gen",
        "l_kl",
        "l_cvae",
        "l_gan_generator",
        "l_gan_discriminator",
        "gradient_penalty",
        "total",
    ];

    /// Assemble the composite terms from their parts.
    pub fn compose(
        l_recon: f64,
        l_gen: f64,
        l_kl: f64,
        l_gan_generator: f64,
        l_gan_discriminator: f64,
        gradient_penalty: f64,
        beta: f64,
    ) -> Self {
        let l_cvae = l_recon + l_gen + l_kl;
        Self {
            l_recon,
            l_gen,
            l_kl,
            l_cvae,
            l_gan_generator,
            l_gan_discriminator,
            gradient_penalty,
            total: l_cvae + beta * l_gan_generator,
        }
    }

    pub fn values(&self) -> [f64; 8] {
        [
            self.l_recon,
            self.l_gen,
            self.l_kl,
            self.l_cvae,
            self.l_gan_generator,
            self.l_gan_discriminator,
            self.gradient_penalty,
            self.total,
        ]
    }

    /// Both composition identities, checked bit-for-bit.
    pub fn identities_hold(&self, beta: f64) -> bool {
        self.l_cvae == self.l_recon + self.l_gen + self.l_kl
            && self.total == self.l_cvae + beta * self.l_gan_generator
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// `l_recon + l_gen + l_kl + beta * l_gan_generator`.
pub fn total_loss(parts: &LossBreakdown, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::config("beta", "must be non-negative"));
    }
    if !parts.all_finite() {
        return Err(Error::Numeric("non-finite loss component".into()));
    }
    Ok(parts.l_recon + parts.l_gen + parts.l_kl + beta * parts.l_gan_generator)
}
