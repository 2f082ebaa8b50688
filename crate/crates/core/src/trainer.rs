//! Optimization loop.
//!
//! Each step draws a batch of (condition, target) pairs, applies one shared
//! spatial augmentation per pair, produces `x_recon` and `x_gen`, updates the
//! discriminator on real targets against both fakes, and updates the encoders
//! and decoder on `l_recon + l_gen + l_kl + beta * l_gan_generator`. The
//! generator's adversarial term is taken against the discriminator as it was
//! before that step's discriminator update.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::image::{Image, Units};
use crate::losses::{
    gan_standard, gan_wgan_gp, gradient_penalty_param_grads, interpolate, kl_logvar_grad,
    l1_loss_grad, GanTerms, GanVariant, LossBreakdown,
};
use crate::metrics::format_value;
use crate::model::{ModelConfig, SliceGen};
use crate::nn::{Act, Grads, Tape};
use crate::preprocess::{resize_image, window_and_rescale, Augment};
use crate::scalar::{cst, Scalar};
use crate::seeding;
use crate::volume::Volume;

/// How condition slices are paired with targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PairingMode {
    /// Every slice paired with the subject's target slice.
    UnknownDistance,
    /// Slices within `d` mm of the target, paired with the target.
    FixedRange(f64),
    /// Each slice paired with the slice exactly `d` mm above it.
    FixedDistance(f64),
}

impl fmt::Display for PairingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairingMode::UnknownDistance => f.write_str("unknown_distance"),
            PairingMode::FixedRange(d) => write!(f, "fixed_range:{d}"),
            PairingMode::FixedDistance(d) => write!(f, "fixed_distance:{d}"),
        }
    }
}

impl FromStr for PairingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("pairing_mode", format!("cannot parse `{s}`"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let dist = || -> Result<f64> {
            let d: f64 = arg.ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if !(d >= 0.0) || !d.is_finite() {
                return Err(Error::config("pairing_mode", "distance must be non-negative"));
            }
            Ok(d)
        };
        match name {
            "unknown_distance" if arg.is_none() => Ok(PairingMode::UnknownDistance),
            "fixed_range" => Ok(PairingMode::FixedRange(dist()?)),
            "fixed_distance" => Ok(PairingMode::FixedDistance(dist()?)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for PairingMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PairingMode> for String {
    fn from(m: PairingMode) -> String {
        m.to_string()
    }
}

/// `(condition_index, target_index)` pairs on a regular z grid.
pub fn make_pairs_z(
    z_positions_mm: &[f64],
    target_index: usize,
    mode: PairingMode,
) -> Result<Vec<(usize, usize)>> {
    let n = z_positions_mm.len();
    if target_index >= n {
        return Err(Error::Range(format!("target index {target_index} outside {n} slices")));
    }
    let tol = 1e-9;
    Ok(match mode {
        PairingMode::UnknownDistance => (0..n).map(|i| (i, target_index)).collect(),
        PairingMode::FixedRange(d) => {
            let zt = z_positions_mm[target_index];
            (0..n)
                .filter(|&i| (z_positions_mm[i] - zt).abs() <= d + tol)
                .map(|i| (i, target_index))
                .collect()
        }
        PairingMode::FixedDistance(d) => {
            let spacing = match z_positions_mm {
                [a, b, ..] => b - a,
                _ => return Err(Error::Data("need at least two slices".into())),
            };
            let k = d / spacing;
            if (k - k.round()).abs() > 1e-6 {
                return Err(Error::config(
                    "pairing_mode",
                    format!("distance {d} mm is not a multiple of the {spacing} mm spacing"),
                ));
            }
            let k = k.round() as usize;
            (0..n.saturating_sub(k)).map(|i| (i, i + k)).collect()
        }
    })
}

pub fn make_pairs<T: Scalar>(
    volume: &Volume<T>,
    target_index: usize,
    mode: PairingMode,
) -> Result<Vec<(usize, usize)>> {
    make_pairs_z(&volume.z_positions_mm, target_index, mode)
}

/// Window (if raw) and resample a slice to the model resolution.
pub fn model_ready<T: Scalar>(volume: &Volume<T>, index: usize, size: usize) -> Result<Image<T>> {
    let slice = volume.slice(index)?;
    let slice = match slice.units {
        Units::RawHu => window_and_rescale(&slice)?,
        Units::Normalized01 => slice,
    };
    Ok(resize_image(&slice.pixels, size, size))
}

/// Model-ready images plus index pairs into them.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet<T> {
    pub images: Vec<Image<T>>,
    pub pairs: Vec<(usize, usize)>,
}

impl<T: Scalar> TrainingSet<T> {
    /// Add one subject's pairs, storing only the slices they reference.
    pub fn add_volume(
        &mut self,
        volume: &Volume<T>,
        target_index: usize,
        mode: PairingMode,
        size: usize,
    ) -> Result<()> {
        let pairs = make_pairs(volume, target_index, mode)?;
        let mut slot = vec![usize::MAX; volume.n_slices()];
        for &(c, t) in &pairs {
            for i in [c, t] {
                if slot[i] == usize::MAX {
                    slot[i] = self.images.len();
                    self.images.push(model_ready(volume, i, size)?);
                }
            }
        }
        self.pairs.extend(pairs.iter().map(|&(c, t)| (slot[c], slot[t])));
        Ok(())
    }

    pub fn push_pair(&mut self, cond: Image<T>, target: Image<T>) {
        let base = self.images.len();
        self.images.push(cond);
        self.images.push(target);
        self.pairs.push((base, base + 1));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub finetune_learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub disc_steps_per_gen_step: usize,
    pub seed: u64,
    pub beta: f64,
    pub gan_variant: GanVariant,
    pub pairing_mode: PairingMode,
    pub augment: bool,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            finetune_learning_rate: 1e-5,
            batch_size: 8,
            max_steps: 20_000,
            disc_steps_per_gen_step: 1,
            seed: 0,
            beta: 0.01,
            gan_variant: GanVariant::WganGp,
            pairing_mode: PairingMode::UnknownDistance,
            augment: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("finetune_learning_rate", self.finetune_learning_rate),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.disc_steps_per_gen_step == 0 {
            return Err(Error::config("disc_steps_per_gen_step", "must be at least 1"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config("beta", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Model config with this run's adversarial settings applied.
    pub fn apply_to(&self, model: &ModelConfig) -> ModelConfig {
        ModelConfig {
            beta: self.beta,
            gan_variant: self.gan_variant,
            ..model.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for f in LossBreakdown::FIELDS {
            out.push(',');
            out.push_str(f);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}", r.step);
            for v in r.losses.values() {
                let _ = write!(out, ",{}", format_value(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&LossBreakdown> {
        self.rows.last().map(|r| &r.losses)
    }

    /// Mean of a loss field over the final `window` rows.
    pub fn tail_mean(&self, window: usize, field: impl Fn(&LossBreakdown) -> f64) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(window)..];
        tail.iter().map(|r| field(&r.losses)).sum::<f64>() / tail.len().max(1) as f64
    }
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64_lossy()
}

fn sample_images<T: Scalar>(act: &Act<T>, range: std::ops::Range<usize>) -> &[T] {
    let Act::Map { h, w, data, .. } = act else {
        unreachable!("image batches are maps")
    };
    &data[range.start * h * w..range.end * h * w]
}

/// Everything the optimizer loop needs besides the model.
pub struct StepContext<'a, T> {
    pub set: &'a TrainingSet<T>,
    pub config: &'a TrainConfig,
    pub learning_rate: f64,
}

/// Generator forward state kept for the backward pass.
pub struct GeneratorForward<T> {
    pub batch: usize,
    /// `[recon batch; gen batch]` decoder outputs.
    pub fake: Act<T>,
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
    pub eps: Vec<T>,
    tapes: [Tape<T>; 3],
}

impl<T: Scalar> GeneratorForward<T> {
    pub fn recon(&self) -> &[T] {
        sample_images(&self.fake, 0..self.batch)
    }

    pub fn generated(&self) -> &[T] {
        sample_images(&self.fake, self.batch..2 * self.batch)
    }
}

/// Encode, reparameterize with `eps`, and decode both the reconstruction
/// (`[z_c, z_t]`) and the prior sample (`[z_c, prior]`) in one decoder batch.
pub fn generator_forward<T: Scalar>(
    model: &SliceGen<T>,
    x_cond: Act<T>,
    x_target: Act<T>,
    eps: &[T],
    prior: &[T],
) -> Result<GeneratorForward<T>> {
    let b = x_cond.batch();
    let k = model.config.latent_dim;
    if eps.len() != b * k || prior.len() != b * k || x_target.batch() != b {
        return Err(Error::Shape("noise and batches disagree in size".into()));
    }
    let (zc, tape_e1) = model.encoder1.forward(x_cond)?;
    let (post, tape_e2) = model.encoder2.forward(x_target)?;
    let zc = zc.into_data();
    let post = post.into_data();
    let half: T = cst(0.5);
    let mut mu = Vec::with_capacity(b * k);
    let mut logvar = Vec::with_capacity(b * k);
    for row in post.chunks(2 * k) {
        mu.extend_from_slice(&row[..k]);
        logvar.extend_from_slice(&row[k..]);
    }
    let mut dec_in = Vec::with_capacity(4 * b * k);
    for i in 0..b {
        dec_in.extend_from_slice(&zc[i * k..(i + 1) * k]);
        for j in i * k..(i + 1) * k {
            dec_in.push(mu[j] + (half * logvar[j]).exp() * eps[j]);
        }
    }
    for i in 0..b {
        dec_in.extend_from_slice(&zc[i * k..(i + 1) * k]);
        dec_in.extend_from_slice(&prior[i * k..(i + 1) * k]);
    }
    let (fake, tape_dec) = model.decoder.forward(Act::Flat {
        n: 2 * b,
        f: 2 * k,
        data: dec_in,
    })?;
    Ok(GeneratorForward {
        batch: b,
        fake,
        mu,
        logvar,
        eps: eps.to_vec(),
        tapes: [tape_e1, tape_e2, tape_dec],
    })
}

/// Parameter gradients of encoder1, encoder2 and the decoder, given the loss
/// gradient with respect to the fakes and to `(mu, logvar)` directly.
pub fn generator_backward<T: Scalar>(
    model: &SliceGen<T>,
    fwd: &GeneratorForward<T>,
    d_fake: Vec<T>,
    d_mu: &[T],
    d_logvar: &[T],
) -> Result<[Grads<T>; 3]> {
    let b = fwd.batch;
    let k = model.config.latent_dim;
    let s = model.config.image_size;
    let half: T = cst(0.5);
    let [tape_e1, tape_e2, tape_dec] = &fwd.tapes;
    let mut dec_grads = model.decoder.zero_grads();
    let d_in = model
        .decoder
        .backward(
            tape_dec,
            Act::Map { c: 1, n: 2 * b, h: s, w: s, data: d_fake },
            Some(&mut dec_grads),
            true,
            true,
        )?
        .expect("input gradient requested")
        .into_data();
    let mut d_zc = vec![T::zero(); b * k];
    let mut d_post = vec![T::zero(); b * 2 * k];
    for i in 0..b {
        let rec = &d_in[i * 2 * k..(i + 1) * 2 * k];
        let gen = &d_in[(b + i) * 2 * k..(b + i + 1) * 2 * k];
        for j in 0..k {
            let idx = i * k + j;
            d_zc[idx] = rec[j] + gen[j];
            let dz = rec[k + j];
            let sigma = (half * fwd.logvar[idx]).exp();
            d_post[i * 2 * k + j] = dz + d_mu[idx];
            d_post[i * 2 * k + k + j] = dz * fwd.eps[idx] * half * sigma + d_logvar[idx];
        }
    }
    let mut e1_grads = model.encoder1.zero_grads();
    model.encoder1.backward(
        tape_e1,
        Act::Flat { n: b, f: k, data: d_zc },
        Some(&mut e1_grads),
        true,
        false,
    )?;
    let mut e2_grads = model.encoder2.zero_grads();
    model.encoder2.backward(
        tape_e2,
        Act::Flat { n: b, f: 2 * k, data: d_post },
        Some(&mut e2_grads),
        true,
        false,
    )?;
    Ok([e1_grads, e2_grads, dec_grads])
}

/// One generator step (preceded by the configured discriminator steps).
pub fn train_step<T: Scalar>(model: &mut SliceGen<T>, ctx: &StepContext<'_, T>) -> Result<LossBreakdown> {
    let cfg = ctx.config;
    let b = cfg.batch_size;
    let k = model.config.latent_dim;
    let s = model.config.image_size;
    let plane = s * s;
    let beta = cfg.beta;
    let mut rng = seeding::stream_n(cfg.seed, "train-step", model.step);

    let mut conds: Vec<Image<T>> = Vec::with_capacity(b);
    let mut targets: Vec<Image<T>> = Vec::with_capacity(b);
    for _ in 0..b {
        let (ci, ti) = ctx.set.pairs[rng.gen_range(0..ctx.set.pairs.len())];
        let (c, t) = (&ctx.set.images[ci], &ctx.set.images[ti]);
        if cfg.augment {
            let aug = Augment::sample(&mut rng, s);
            conds.push(aug.apply(c));
            targets.push(aug.apply(t));
        } else {
            conds.push(c.clone());
            targets.push(t.clone());
        }
    }
    let cond_refs: Vec<&Image<T>> = conds.iter().collect();
    let target_refs: Vec<&Image<T>> = targets.iter().collect();
    let x_cond = model.batch(&cond_refs)?;
    let x_target = model.batch(&target_refs)?;
    let target_data = x_target.data().to_vec();
    let eps: Vec<T> = (0..b * k).map(|_| cst(StandardNormal.sample(&mut rng))).collect();
    let prior: Vec<T> = (0..b * k).map(|_| cst(StandardNormal.sample(&mut rng))).collect();

    let fwd = generator_forward(model, x_cond, x_target, &eps, &prior)?;
    let (l_recon, g_recon) = l1_loss_grad(fwd.recon(), &target_data)?;
    let (l_gen, g_gen) = l1_loss_grad(fwd.generated(), &target_data)?;
    let (l_kl, g_mu_kl, g_lv_kl) = kl_logvar_grad(&fwd.mu, &fwd.logvar, b)?;

    // Discriminator on [real; recon; gen] with fakes detached.
    let mut disc_in = target_data.clone();
    disc_in.extend_from_slice(fwd.fake.data());
    let disc_batch = Act::Map {
        c: 1,
        n: 3 * b,
        h: s,
        w: s,
        data: disc_in,
    };
    let variant = model.config.gan_variant;
    let lambda: T = cst(model.config.gp_lambda);
    let mut gen_adv_dx: Option<Vec<T>> = None;
    let mut first: Option<(GanTerms<T>, T)> = None;
    for d_step in 0..cfg.disc_steps_per_gen_step {
        let (scores, tape_d) = model.discriminator.forward(disc_batch.clone())?;
        let scores = scores.into_data();
        let (d_real, rest) = scores.split_at(b);
        let (d_recon, d_gen) = rest.split_at(b);
        let mut grads = model.discriminator.zero_grads();
        let penalty = if variant == GanVariant::WganGp {
            let u: Vec<T> = (0..2 * b).map(|_| cst(rng.gen_range(0.0..1.0))).collect();
            let mut reals = target_data.clone();
            reals.extend_from_slice(&target_data);
            let xhat = interpolate(&reals, fwd.fake.data(), &u)?;
            gradient_penalty_param_grads(&model.discriminator, &xhat, 2 * b, s, s, &mut grads, lambda)?
        } else {
            T::zero()
        };
        let terms = match variant {
            GanVariant::Standard => gan_standard(d_real, d_recon, d_gen)?,
            GanVariant::WganGp => gan_wgan_gp(d_real, d_recon, d_gen, penalty, lambda)?,
        };
        let dy: Vec<T> = terms.disc_grad.iter().flatten().copied().collect();
        model.discriminator.backward(
            &tape_d,
            Act::Flat { n: 3 * b, f: 1, data: dy },
            Some(&mut grads),
            true,
            false,
        )?;
        if d_step == 0 {
            if beta > 0.0 {
                let mut dy = vec![T::zero(); b];
                dy.extend(terms.gen_grad.iter().flatten().map(|&g| g * cst(beta)));
                let dx = model
                    .discriminator
                    .backward(&tape_d, Act::Flat { n: 3 * b, f: 1, data: dy }, None, true, true)?
                    .expect("input gradient requested");
                gen_adv_dx = Some(dx.into_data()[b * plane..].to_vec());
            }
            first = Some((terms, penalty));
        }
        if !grads.all_finite() {
            return Err(Error::Diverged {
                step: model.step,
                detail: "non-finite discriminator gradient".into(),
            });
        }
        model
            .optimizers
            .discriminator
            .update(&mut model.discriminator, &grads, ctx.learning_rate, cfg.weight_decay);
    }
    let (terms, penalty) = first.expect("at least one discriminator step");

    let mut d_fake = g_recon;
    d_fake.extend_from_slice(&g_gen);
    if let Some(adv) = &gen_adv_dx {
        d_fake.iter_mut().zip(adv).for_each(|(d, &a)| *d += a);
    }
    let [e1_grads, e2_grads, dec_grads] = generator_backward(model, &fwd, d_fake, &g_mu_kl, &g_lv_kl)?;

    let losses = LossBreakdown::compose(
        to_f64(l_recon),
        to_f64(l_gen),
        to_f64(l_kl),
        to_f64(terms.gen_loss),
        to_f64(terms.disc_loss),
        to_f64(penalty),
        beta,
    );
    if !losses.all_finite() || !dec_grads.all_finite() || !e1_grads.all_finite() || !e2_grads.all_finite() {
        return Err(Error::Diverged {
            step: model.step,
            detail: format!("{losses:?}"),
        });
    }
    let (lr, wd) = (ctx.learning_rate, cfg.weight_decay);
    model.optimizers.encoder1.update(&mut model.encoder1, &e1_grads, lr, wd);
    model.optimizers.encoder2.update(&mut model.encoder2, &e2_grads, lr, wd);
    model.optimizers.decoder.update(&mut model.decoder, &dec_grads, lr, wd);
    model.step += 1;
    Ok(losses)
}

/// Run `steps` generator steps at `learning_rate`.
///
/// On divergence or a non-finite loss input the last finite model is written to
/// `snapshot_dir/diverged.ckpt` (when a directory is given) before the error
/// is returned.
pub fn run_steps<T: Scalar>(
    model: &mut SliceGen<T>,
    set: &TrainingSet<T>,
    config: &TrainConfig,
    learning_rate: f64,
    steps: u64,
    snapshot_dir: Option<&Path>,
) -> Result<TrainLog> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::Data("training set has no pairs".into()));
    }
    model.config.beta = config.beta;
    let ctx = StepContext {
        set,
        config,
        learning_rate,
    };
    let mut log = TrainLog::default();
    for _ in 0..steps {
        let before = snapshot_dir.map(|_| model.clone());
        match train_step(model, &ctx) {
            Ok(losses) => log.rows.push(LogRow {
                step: model.step,
                losses,
            }),
            Err(e @ (Error::Diverged { .. } | Error::Numeric(_))) => {
                if let (Some(dir), Some(good)) = (snapshot_dir, before) {
                    save_checkpoint(&good, &dir.join("diverged.ckpt"))?;
                }
                log::error!("{e}");
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        if let Some(dir) = snapshot_dir {
            if config.checkpoint_every > 0 && model.step % config.checkpoint_every == 0 {
                save_checkpoint(model, &dir.join(format!("step-{:08}.ckpt", model.step)))?;
            }
        }
        if model.step % 100 == 0 {
            log::debug!("step {} {:?}", model.step, log.last());
        }
    }
    Ok(log)
}

/// Train a fresh model for `config.max_steps` steps.
pub fn train<T: Scalar>(
    model_config: &ModelConfig,
    config: &TrainConfig,
    set: &TrainingSet<T>,
    checkpoint_dir: Option<&Path>,
) -> Result<(SliceGen<T>, TrainLog)> {
    config.validate()?;
    let mut model = SliceGen::new(config.apply_to(model_config), config.seed)?;
    let log = run_steps(&mut model, set, config, config.learning_rate, config.max_steps, checkpoint_dir)?;
    Ok((model, log))
}

/// Continue training at the fine-tuning rate; the step counter carries on.
pub fn finetune<T: Scalar>(
    model: &mut SliceGen<T>,
    set: &TrainingSet<T>,
    config: &TrainConfig,
    steps: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    if config.gan_variant != model.config.gan_variant {
        let wanted = config.apply_to(&model.config);
        return Err(Error::Fingerprint {
            expected: wanted.fingerprint(),
            found: model.fingerprint(),
        });
    }
    run_steps(model, set, config, config.finetune_learning_rate, steps, checkpoint_dir)
}

/// Directory for per-run artifacts.
pub fn run_dir(base: &Path, name: &str) -> Result<PathBuf> {
    let dir = base.join(name);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
