//! Conditional slice generator: two encoders, a decoder and a discriminator.
//!
//! ```text
//! condition ─ encoder1 ─ z_c ───────────────┐
//! target ──── encoder2 ─ (mu, logvar) ─ z_t ┴─ decoder ─ x_recon
//!                         z_prior ~ N(0, I) ┴─ decoder ─ x_gen
//! ```
//!
//! All networks take and produce `image_size` square images. The learned
//! layers run at `working_size`; a fixed mean-pool stage in front of each
//! encoder and a fixed bilinear stage after the decoder bridge the two.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, SliceImage};
use crate::losses::{GanVariant, DEFAULT_GP_LAMBDA};
use crate::metrics::SliceGenerator;
use crate::nn::{Act, AdamW, Geom, Layer, Net};
use crate::scalar::{cst, Scalar};
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub image_size: usize,
    /// Resolution of the learned layers; must divide `image_size`.
    pub working_size: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub discriminator_widths: Vec<usize>,
    pub gan_variant: GanVariant,
    pub beta: f64,
    pub gp_lambda: f64,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            image_size: 256,
            working_size: 64,
            encoder_widths: vec![8, 16, 32],
            decoder_widths: vec![32, 16, 8],
            discriminator_widths: vec![8, 16, 32],
            gan_variant: GanVariant::WganGp,
            beta: 0.01,
            gp_lambda: DEFAULT_GP_LAMBDA,
            leaky_slope: 0.2,
        }
    }
}

/// Architecture-defining fields; two configs with equal keys have interchangeable parameters.
#[derive(Serialize)]
struct ArchKey<'a> {
    latent_dim: usize,
    image_size: usize,
    working_size: usize,
    encoder_widths: &'a [usize],
    decoder_widths: &'a [usize],
    discriminator_widths: &'a [usize],
    gan_variant: GanVariant,
    leaky_slope: f64,
}

fn check_stack(field: &str, widths: &[usize], working: usize) -> Result<usize> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::config(field, "widths must be non-empty and positive"));
    }
    let div = 1usize << widths.len();
    if working % div != 0 {
        return Err(Error::config(
            field,
            format!("{} stride-2 stages do not divide working size {working}", widths.len()),
        ));
    }
    Ok(working / div)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be at least 1"));
        }
        if self.working_size == 0 || self.image_size == 0 || self.image_size % self.working_size != 0 {
            return Err(Error::config("working_size", "must divide image_size"));
        }
        check_stack("encoder_widths", &self.encoder_widths, self.working_size)?;
        check_stack("decoder_widths", &self.decoder_widths, self.working_size)?;
        check_stack("discriminator_widths", &self.discriminator_widths, self.working_size)?;
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config("beta", "must be finite and non-negative"));
        }
        if !(self.gp_lambda >= 0.0) || !self.gp_lambda.is_finite() {
            return Err(Error::config("gp_lambda", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::config("leaky_slope", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn pool_factor(&self) -> usize {
        self.image_size / self.working_size
    }

    /// Hex SHA-256 over the architecture-defining fields.
    pub fn fingerprint(&self) -> String {
        let key = ArchKey {
            latent_dim: self.latent_dim,
            image_size: self.image_size,
            working_size: self.working_size,
            encoder_widths: &self.encoder_widths,
            decoder_widths: &self.decoder_widths,
            discriminator_widths: &self.discriminator_widths,
            gan_variant: self.gan_variant,
            leaky_slope: self.leaky_slope,
        };
        let json = serde_json::to_vec(&key).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn down_stack<T: Scalar, R: Rng>(
    cfg: &ModelConfig,
    widths: &[usize],
    out_features: usize,
    rng: &mut R,
) -> Net<T> {
    let slope = cfg.leaky_slope;
    let mut layers = Vec::new();
    if cfg.pool_factor() > 1 {
        layers.push(Layer::AvgPool(cfg.pool_factor()));
    }
    let mut cin = 1;
    for &w in widths {
        layers.push(Layer::conv(cin, w, Geom::new(4, 2, 1), slope, rng));
        layers.push(Layer::LeakyRelu(cst(slope)));
        cin = w;
    }
    let side = cfg.working_size >> widths.len();
    layers.push(Layer::Flatten);
    // Heads feed a loss directly, so they use a unit-gain init.
    layers.push(Layer::dense(cin * side * side, out_features, 1.0, rng));
    Net::new(layers)
}

fn up_stack<T: Scalar, R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Net<T> {
    let slope = cfg.leaky_slope;
    let widths = &cfg.decoder_widths;
    let side = cfg.working_size >> widths.len();
    let mut layers = vec![
        Layer::dense(2 * cfg.latent_dim, widths[0] * side * side, slope, rng),
        Layer::LeakyRelu(cst(slope)),
        Layer::Unflatten {
            c: widths[0],
            h: side,
            w: side,
        },
    ];
    for (i, &w) in widths.iter().enumerate() {
        let next = widths.get(i + 1).copied().unwrap_or(1);
        layers.push(Layer::conv_t(w, next, Geom::new(4, 2, 1), slope, rng));
        if i + 1 < widths.len() {
            layers.push(Layer::LeakyRelu(cst(slope)));
        }
    }
    layers.push(Layer::Sigmoid);
    if cfg.pool_factor() > 1 {
        layers.push(Layer::Upsample(cfg.pool_factor()));
    }
    Net::new(layers)
}

/// Adam state for every network.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers<T> {
    pub encoder1: AdamW<T>,
    pub encoder2: AdamW<T>,
    pub decoder: AdamW<T>,
    pub discriminator: AdamW<T>,
}

/// Parameters, optimizer state and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceGen<T> {
    pub config: ModelConfig,
    pub encoder1: Net<T>,
    pub encoder2: Net<T>,
    pub decoder: Net<T>,
    pub discriminator: Net<T>,
    pub optimizers: Optimizers<T>,
    pub step: u64,
}

/// Which latent a code holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    ZC,
    ZT,
    ZPrior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub values: Vec<T>,
    pub kind: LatentKind,
}

impl<T: Scalar> SliceGen<T> {
    /// Freshly initialized model; weights depend only on `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeding::stream_n(seed, "model-init", 0);
        let k = config.latent_dim;
        let encoder1 = down_stack(&config, &config.encoder_widths, k, &mut rng);
        let encoder2 = down_stack(&config, &config.encoder_widths, 2 * k, &mut rng);
        let decoder = up_stack(&config, &mut rng);
        let mut discriminator = down_stack(&config, &config.discriminator_widths, 1, &mut rng);
        if config.gan_variant == GanVariant::Standard {
            discriminator.layers.push(Layer::Sigmoid);
        }
        let optimizers = Optimizers {
            encoder1: AdamW::new(encoder1.param_count()),
            encoder2: AdamW::new(encoder2.param_count()),
            decoder: AdamW::new(decoder.param_count()),
            discriminator: AdamW::new(discriminator.param_count()),
        };
        Ok(Self {
            config,
            encoder1,
            encoder2,
            decoder,
            discriminator,
            optimizers,
            step: 0,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn param_count(&self) -> usize {
        self.generator_param_count() + self.discriminator.param_count()
    }

    pub fn generator_param_count(&self) -> usize {
        self.encoder1.param_count() + self.encoder2.param_count() + self.decoder.param_count()
    }

    pub fn all_finite(&self) -> bool {
        self.encoder1.all_finite()
            && self.encoder2.all_finite()
            && self.decoder.all_finite()
            && self.discriminator.all_finite()
    }

    /// Zero encoder2's output layer so that `mu = 0` and `sigma = 1` everywhere.
    pub fn zero_encoder2_head(&mut self) {
        if let Some((w, b)) = self.encoder2.layers.last_mut().and_then(|l| l.params_mut()) {
            w.iter_mut().for_each(|v| *v = T::zero());
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn check_image(&self, img: &Image<T>) -> Result<()> {
        let s = self.config.image_size;
        if img.rows() != s || img.cols() != s {
            return Err(Error::Shape(format!(
                "model expects {s}x{s} images, got {}x{}",
                img.rows(),
                img.cols()
            )));
        }
        Ok(())
    }

    /// Stack images into a network input batch.
    pub fn batch(&self, images: &[&Image<T>]) -> Result<Act<T>> {
        for img in images {
            self.check_image(img)?;
        }
        let s = self.config.image_size;
        let slices: Vec<&[T]> = images.iter().map(|i| i.as_slice()).collect();
        Act::from_images(&slices, s, s)
    }

    fn single(&self, img: &SliceImage<T>) -> Result<Act<T>> {
        img.require_normalized()?;
        self.batch(&[&img.pixels])
    }

    pub fn encode_condition(&self, img: &SliceImage<T>) -> Result<LatentCode<T>> {
        let z = self.encoder1.infer(self.single(img)?)?;
        Ok(LatentCode {
            values: z.into_data(),
            kind: LatentKind::ZC,
        })
    }

    /// `(mu, sigma)` with `sigma = exp(logvar / 2)`.
    pub fn encode_target(&self, img: &SliceImage<T>) -> Result<(Vec<T>, Vec<T>)> {
        let out = self.encoder2.infer(self.single(img)?)?.into_data();
        let k = self.config.latent_dim;
        let half: T = cst(0.5);
        let sigma = out[k..].iter().map(|&lv| (half * lv).exp()).collect();
        Ok((out[..k].to_vec(), sigma))
    }

    pub fn decode(&self, z_c: &LatentCode<T>, z: &LatentCode<T>) -> Result<Image<T>> {
        let k = self.config.latent_dim;
        if z_c.values.len() != k || z.values.len() != k {
            return Err(Error::Shape(format!(
                "latent codes of length {} and {}, expected {k}",
                z_c.values.len(),
                z.values.len()
            )));
        }
        let mut input = z_c.values.clone();
        input.extend_from_slice(&z.values);
        let out = self.decoder.infer(Act::Flat {
            n: 1,
            f: 2 * k,
            data: input,
        })?;
        let s = self.config.image_size;
        Image::new(s, s, out.into_data())
    }

    /// Probability (standard variant) or critic score (Wasserstein variant).
    pub fn discriminate(&self, img: &SliceImage<T>) -> Result<T> {
        Ok(self.discriminator.infer(self.single(img)?)?.data()[0])
    }

    /// Target-level slice from a condition slice and a prior draw.
    pub fn generate<R: Rng>(&self, cond: &SliceImage<T>, rng: &mut R) -> Result<SliceImage<T>> {
        if !self.all_finite() {
            return Err(Error::State("model parameters are not finite".into()));
        }
        let z_c = self.encode_condition(cond)?;
        let z_prior = sample_prior(self.config.latent_dim, rng);
        let pixels = self.decode(&z_c, &z_prior)?;
        let mut out = cond.with_pixels(pixels);
        out.meta.visit_index = cond.meta.visit_index;
        Ok(out)
    }
}

pub fn sample_prior<T: Scalar, R: Rng>(k: usize, rng: &mut R) -> LatentCode<T> {
    LatentCode {
        values: (0..k)
            .map(|_| cst::<T>(StandardNormal.sample(rng)))
            .collect(),
        kind: LatentKind::ZPrior,
    }
}

/// `z = mu + sigma * eps` with `eps ~ N(0, I)`.
pub fn reparameterize<T: Scalar, R: Rng>(mu: &[T], sigma: &[T], rng: &mut R) -> Result<LatentCode<T>> {
    if mu.len() != sigma.len() {
        return Err(Error::Shape("mu and sigma differ in length".into()));
    }
    let values = mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            if !(s > T::zero()) {
                return Err(Error::Numeric(format!("non-positive sigma {s}")));
            }
            let eps: f64 = StandardNormal.sample(rng);
            Ok(m + s * cst(eps))
        })
        .collect::<Result<_>>()?;
    Ok(LatentCode {
        values,
        kind: LatentKind::ZT,
    })
}

impl<T: Scalar> SliceGenerator<T> for SliceGen<T> {
    fn generate_slice(&self, cond: &SliceImage<T>, seed: u64) -> Result<SliceImage<T>> {
        self.generate(cond, &mut seeding::stream_n(seed, "generate", 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::SliceMeta;

    fn small() -> ModelConfig {
        ModelConfig {
            latent_dim: 4,
            image_size: 32,
            working_size: 16,
            encoder_widths: vec![2, 4],
            decoder_widths: vec![4, 2],
            discriminator_widths: vec![2, 4],
            ..Default::default()
        }
    }

    fn img(v: f64) -> SliceImage<f64> {
        SliceImage::normalized(
            Image::from_fn(32, 32, |r, c| ((r + c) as f64 / 62.0 * v).min(1.0)),
            SliceMeta::new("s", 0.0, 1.0),
        )
    }

    #[test]
    fn zeroed_head_gives_standard_normal_posterior() {
        let mut m = SliceGen::<f64>::new(small(), 1).unwrap();
        m.zero_encoder2_head();
        let (mu, sigma) = m.encode_target(&img(1.0)).unwrap();
        assert_eq!(mu, vec![0.0; 4]);
        assert_eq!(sigma, vec![1.0; 4]);
    }

    #[test]
    fn shapes_and_ranges() {
        let m = SliceGen::<f64>::new(small(), 2).unwrap();
        let zc = m.encode_condition(&img(0.5)).unwrap();
        assert_eq!(zc.values.len(), 4);
        let out = m.generate(&img(0.5), &mut seeding::stream_n(0, "t", 0)).unwrap();
        assert_eq!(out.size().unwrap(), 32);
        assert!(out.pixels.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let wrong = SliceImage::normalized(Image::<f64>::zeros(16, 16), SliceMeta::new("s", 0.0, 1.0));
        assert!(matches!(m.encode_condition(&wrong), Err(Error::Shape(_))));
        let short = LatentCode {
            values: vec![0.0; 3],
            kind: LatentKind::ZPrior,
        };
        assert!(matches!(m.decode(&zc, &short), Err(Error::Shape(_))));
    }

    #[test]
    fn standard_discriminator_outputs_probabilities() {
        let cfg = ModelConfig {
            gan_variant: GanVariant::Standard,
            ..small()
        };
        let m = SliceGen::<f64>::new(cfg, 3).unwrap();
        let d = m.discriminate(&img(0.8)).unwrap();
        assert!(d > 0.0 && d < 1.0);
    }

    #[test]
    fn fingerprint_tracks_architecture_only() {
        let a = small();
        let b = ModelConfig { beta: 0.0, ..small() };
        let c = ModelConfig { latent_dim: 5, ..small() };
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn reparameterize_limits() {
        let mut rng = seeding::stream_n(1, "t", 0);
        let z = reparameterize(&[0.5f64, -1.0], &[1e-300, 1e-300], &mut rng).unwrap();
        assert_eq!(z.values, vec![0.5, -1.0]);
        assert!(reparameterize(&[0.0f64], &[0.0], &mut rng).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ModelConfig { latent_dim: 0, ..small() }.validate().is_err());
        assert!(ModelConfig { encoder_widths: vec![], ..small() }.validate().is_err());
        assert!(ModelConfig { beta: -0.1, ..small() }.validate().is_err());
        assert!(ModelConfig { working_size: 12, ..small() }.validate().is_err());
    }
}
