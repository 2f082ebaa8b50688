//! Analytic loss gradients against central finite differences on 8x8 images
//! with a 4-dimensional latent space. Each check returns its relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicegen_core::losses::*;
use slicegen_core::model::{ModelConfig, SliceGen};
use slicegen_core::nn::{Act, Net};
use slicegen_core::trainer::{generator_backward, generator_forward};

const H: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
const SIDE: usize = 8;
const K: usize = 4;

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt())
        .max(1e-12);
    diff / scale
}

fn central(x: &mut [f64], i: usize, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + H;
    let up = f(x);
    x[i] = orig - H;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * H)
}

pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len()).map(|i| central(&mut x, i, &mut f)).collect()
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tiny_config(variant: GanVariant) -> ModelConfig {
    ModelConfig {
        latent_dim: K,
        image_size: SIDE,
        working_size: SIDE,
        encoder_widths: vec![2, 3],
        decoder_widths: vec![3, 2],
        discriminator_widths: vec![2, 3],
        gan_variant: variant,
        ..Default::default()
    }
}

pub fn l1_gradient() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = uniform(&mut rng, 2 * SIDE * SIDE, 0.0, 1.0);
    // Keep every |a - b| well away from the kink.
    let a: Vec<f64> = b
        .iter()
        .map(|&v| v + rng.gen_range(0.01..0.5) * if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let (_, g) = l1_loss_grad(&a, &b).unwrap();
    let n = numeric_grad(&a, |x| l1_loss(x, &b).unwrap());
    rel_err(&g, &n)
}

/// Errors in mu and log-variance; panics if the value disagrees with the sigma form.
pub fn kl_gradient() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = 2;
    let mu = uniform(&mut rng, batch * K, -2.0, 2.0);
    let lv = uniform(&mut rng, batch * K, -1.5, 1.5);
    let (v, gmu, glv) = kl_logvar_grad(&mu, &lv, batch).unwrap();

    // Independent value: closed form with sigma, averaged over the batch.
    let sigma: Vec<f64> = lv.iter().map(|l| (0.5 * l).exp()).collect();
    let per_sample: f64 = (0..batch)
        .map(|i| kl_loss(&mu[i * K..(i + 1) * K], &sigma[i * K..(i + 1) * K]).unwrap())
        .sum::<f64>()
        / batch as f64;
    assert!((v - per_sample).abs() < 1e-12);

    let nmu = numeric_grad(&mu, |m| kl_logvar_grad(m, &lv, batch).unwrap().0);
    let nlv = numeric_grad(&lv, |l| kl_logvar_grad(&mu, l, batch).unwrap().0);
    (rel_err(&gmu, &nmu), rel_err(&glv, &nlv))
}

/// Worst error over every score stream of both losses.
fn score_grads(f: impl Fn(&[f64], &[f64], &[f64]) -> GanTerms<f64>, lo: f64, hi: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let streams = [
        uniform(&mut rng, 3, lo, hi),
        uniform(&mut rng, 4, lo, hi),
        uniform(&mut rng, 4, lo, hi),
    ];
    let terms = f(&streams[0], &streams[1], &streams[2]);
    let mut worst = 0.0f64;
    for s in 0..3 {
        let eval = |x: &[f64], which: fn(&GanTerms<f64>) -> f64| {
            let mut st = streams.clone();
            st[s] = x.to_vec();
            which(&f(&st[0], &st[1], &st[2]))
        };
        let nd = numeric_grad(&streams[s], |x| eval(x, |t| t.disc_loss));
        worst = worst.max(rel_err(&terms.disc_grad[s], &nd));
        let ng = numeric_grad(&streams[s], |x| eval(x, |t| t.gen_loss));
        if s == 0 {
            assert!(ng.iter().all(|v| v.abs() < 1e-9), "generator loss ignores real scores");
        } else {
            worst = worst.max(rel_err(&terms.gen_grad[s - 1], &ng));
        }
    }
    worst
}

pub fn standard_gan_score_gradients() -> f64 {
    score_grads(|r, c, g| gan_standard(r, c, g).unwrap(), 0.05, 0.95, 3)
}

pub fn wgan_score_gradients() -> f64 {
    score_grads(|r, c, g| gan_wgan_gp(r, c, g, 0.3, 10.0).unwrap(), -3.0, 3.0, 4)
}

fn critic(seed: u64) -> Net<f64> {
    SliceGen::<f64>::new(tiny_config(GanVariant::WganGp), seed)
        .unwrap()
        .discriminator
}

pub fn gradient_penalty_parameter_gradient() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 3;
    let real = uniform(&mut rng, n * SIDE * SIDE, 0.0, 1.0);
    let fake = uniform(&mut rng, n * SIDE * SIDE, 0.0, 1.0);
    let u = uniform(&mut rng, n, 0.0, 1.0);
    let mut net = critic(6);
    let theta = net.flat_params();

    let xhat = interpolate(&real, &fake, &u).unwrap();
    let mut grads = net.zero_grads();
    let p = gradient_penalty_param_grads(&net, &xhat, n, SIDE, SIDE, &mut grads, 1.0).unwrap();
    let p_ref = gradient_penalty_at(&net, &real, &fake, &u, SIDE, SIDE).unwrap();
    assert!((p - p_ref).abs() < 1e-12);

    let numeric = numeric_grad(&theta, |t| {
        net.set_flat_params(t).unwrap();
        gradient_penalty_at(&net, &real, &fake, &u, SIDE, SIDE).unwrap()
    });
    rel_err(&grads.flatten(), &numeric)
}

pub fn wgan_discriminator_loss_parameter_gradient() -> f64 {
    // Full critic objective: pooled fake scores minus real scores plus the
    // lambda-weighted penalty over interpolates against both fake streams.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let b = 2;
    let plane = SIDE * SIDE;
    let real = uniform(&mut rng, b * plane, 0.0, 1.0);
    let fakes = uniform(&mut rng, 2 * b * plane, 0.0, 1.0);
    let u = uniform(&mut rng, 2 * b, 0.0, 1.0);
    let lambda = DEFAULT_GP_LAMBDA;
    let mut net = critic(8);
    let theta = net.flat_params();
    let mut reals = real.clone();
    reals.extend_from_slice(&real);
    let mut all = real.clone();
    all.extend_from_slice(&fakes);

    let loss = |net: &Net<f64>| {
        let s = net
            .infer(Act::Map { c: 1, n: 3 * b, h: SIDE, w: SIDE, data: all.clone() })
            .unwrap()
            .into_data();
        let p = gradient_penalty_at(net, &reals, &fakes, &u, SIDE, SIDE).unwrap();
        gan_wgan_gp(&s[..b], &s[b..2 * b], &s[2 * b..], p, lambda).unwrap().disc_loss
    };

    let (scores, tape) = net
        .forward(Act::Map { c: 1, n: 3 * b, h: SIDE, w: SIDE, data: all.clone() })
        .unwrap();
    let s = scores.into_data();
    let mut grads = net.zero_grads();
    let xhat = interpolate(&reals, &fakes, &u).unwrap();
    let p = gradient_penalty_param_grads(&net, &xhat, 2 * b, SIDE, SIDE, &mut grads, lambda).unwrap();
    let terms = gan_wgan_gp(&s[..b], &s[b..2 * b], &s[2 * b..], p, lambda).unwrap();
    let dy: Vec<f64> = terms.disc_grad.iter().flatten().copied().collect();
    net.backward(&tape, Act::Flat { n: 3 * b, f: 1, data: dy }, Some(&mut grads), true, false)
        .unwrap();

    let numeric = numeric_grad(&theta, |t| {
        net.set_flat_params(t).unwrap();
        loss(&net)
    });
    rel_err(&grads.flatten(), &numeric)
}

/// Errors for encoder 1, encoder 2 and the decoder under the full generator objective.
pub fn generator_chain(variant: GanVariant, seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 2;
    let beta = 0.5;
    let plane = SIDE * SIDE;
    let model = SliceGen::<f64>::new(tiny_config(variant), seed).unwrap();
    let cond = uniform(&mut rng, b * plane, 0.0, 1.0);
    let target = uniform(&mut rng, b * plane, 0.0, 1.0);
    let eps = uniform(&mut rng, b * K, -1.0, 1.0);
    let prior = uniform(&mut rng, b * K, -1.0, 1.0);
    let map = |d: &[f64]| Act::Map { c: 1, n: b, h: SIDE, w: SIDE, data: d.to_vec() };

    // Generator objective with the discriminator held fixed.
    let objective = |m: &SliceGen<f64>| -> f64 {
        let fwd = generator_forward(m, map(&cond), map(&target), &eps, &prior).unwrap();
        let s = m
            .discriminator
            .infer(Act::Map { c: 1, n: 2 * b, h: SIDE, w: SIDE, data: fwd.fake.data().to_vec() })
            .unwrap()
            .into_data();
        let real = vec![0.5; b];
        let adv = match variant {
            GanVariant::Standard => gan_standard(&real, &s[..b], &s[b..]).unwrap(),
            GanVariant::WganGp => gan_wgan_gp(&real, &s[..b], &s[b..], 0.0, 10.0).unwrap(),
        };
        l1_loss(fwd.recon(), &target).unwrap()
            + l1_loss(fwd.generated(), &target).unwrap()
            + kl_logvar_grad(&fwd.mu, &fwd.logvar, b).unwrap().0
            + beta * adv.gen_loss
    };

    let fwd = generator_forward(&model, map(&cond), map(&target), &eps, &prior).unwrap();
    let (_, g_rec) = l1_loss_grad(fwd.recon(), &target).unwrap();
    let (_, g_gen) = l1_loss_grad(fwd.generated(), &target).unwrap();
    let (_, gmu, glv) = kl_logvar_grad(&fwd.mu, &fwd.logvar, b).unwrap();
    let (s, tape) = model
        .discriminator
        .forward(Act::Map { c: 1, n: 2 * b, h: SIDE, w: SIDE, data: fwd.fake.data().to_vec() })
        .unwrap();
    let s = s.into_data();
    let real = vec![0.5; b];
    let adv = match variant {
        GanVariant::Standard => gan_standard(&real, &s[..b], &s[b..]).unwrap(),
        GanVariant::WganGp => gan_wgan_gp(&real, &s[..b], &s[b..], 0.0, 10.0).unwrap(),
    };
    let dy: Vec<f64> = adv.gen_grad.iter().flatten().map(|g| beta * g).collect();
    let dx = model
        .discriminator
        .backward(&tape, Act::Flat { n: 2 * b, f: 1, data: dy }, None, true, true)
        .unwrap()
        .unwrap()
        .into_data();
    let mut d_fake = g_rec;
    d_fake.extend_from_slice(&g_gen);
    d_fake.iter_mut().zip(&dx).for_each(|(d, a)| *d += a);
    let analytic = generator_backward(&model, &fwd, d_fake, &gmu, &glv).unwrap();

    let mut errs = [0.0; 3];
    for (which, grads) in analytic.iter().enumerate() {
        let mut m = model.clone();
        let theta = match which {
            0 => m.encoder1.flat_params(),
            1 => m.encoder2.flat_params(),
            _ => m.decoder.flat_params(),
        };
        let numeric = numeric_grad(&theta, |t| {
            match which {
                0 => m.encoder1.set_flat_params(t),
                1 => m.encoder2.set_flat_params(t),
                _ => m.decoder.set_flat_params(t),
            }
            .unwrap();
            objective(&m)
        });
        errs[which] = rel_err(&grads.flatten(), &numeric);
    }
    errs
}
