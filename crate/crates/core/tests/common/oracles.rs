//! Direct, unoptimized re-implementations used as test oracles.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicegen_core::image::{Image, SliceImage, SliceMeta, Units};
use slicegen_core::metrics::nmi;
use slicegen_core::phantom::{generate_volume, PhantomConfig, PhantomSubject};
use slicegen_core::preprocess::window_and_rescale;
use slicegen_core::targetsel::{refine_target_semi_bpr, translate};

pub fn noise(seed: u64, rows: usize, cols: usize) -> Image<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(rows, cols, |_, _| rng.gen_range(0.0..1.0))
}

pub fn smooth_pair(seed: u64, n: usize) -> (Image<f64>, Image<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fa, fb): (f64, f64) = (rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3));
    let a = Image::from_fn(n, n, |r, c| 0.5 + 0.4 * ((r as f64 * fa).sin() * (c as f64 * fb).cos()));
    let b = Image::from_fn(n, n, |r, c| {
        (a.get(r, c) + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)
    });
    (a, b)
}

/// SSIM with an explicit 2-D Gaussian window evaluated at every valid position.
pub fn ssim_oracle(a: &Image<f64>, b: &Image<f64>) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let c = 5.0;
    let mut w = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (dy, dx) = (i as f64 - c, j as f64 - c);
            w[i * k + j] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for r in 0..=a.rows() - k {
        for cc in 0..=a.cols() - k {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let (x, y, wt) = (a.get(r + i, cc + j), b.get(r + i, cc + j), w[i * k + j]);
                    mx += wt * x;
                    my += wt * y;
                    sxx += wt * x * x;
                    syy += wt * y * y;
                    sxy += wt * x * y;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

pub fn psnr_oracle(a: &Image<f64>, b: &Image<f64>) -> f64 {
    let mut se = 0.0;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            let d = a.get(r, c) - b.get(r, c);
            se += d * d;
        }
    }
    let mse = se / (a.rows() * a.cols()) as f64;
    -10.0 * mse.log10()
}

pub fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2 I(A;B) / (H(A) + H(B))` from hashed bin counts.
pub fn nmi_oracle(a: &Image<f64>, b: &Image<f64>) -> f64 {
    let bin = |v: f64| ((v * 64.0) as usize).min(63);
    let mut ha: HashMap<usize, usize> = HashMap::new();
    let mut hb: HashMap<usize, usize> = HashMap::new();
    let mut hab: HashMap<(usize, usize), usize> = HashMap::new();
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        *ha.entry(bin(x)).or_default() += 1;
        *hb.entry(bin(y)).or_default() += 1;
        *hab.entry((bin(x), bin(y))).or_default() += 1;
    }
    let n = a.len() as f64;
    let (ea, eb) = (entropy(ha.values().copied(), n), entropy(hb.values().copied(), n));
    let eab = entropy(hab.values().copied(), n);
    if ea + eb == 0.0 {
        return if ha.keys().eq(hb.keys()) { 1.0 } else { 0.0 };
    }
    2.0 * (ea + eb - eab) / (ea + eb)
}

pub fn cv_oracle(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let second = x.iter().map(|v| v * v).sum::<f64>() / n;
    (second - mean * mean).max(0.0).sqrt() / mean
}

/// Null distribution of W+ by flipping every sign of the observed magnitudes.
pub fn brute_force(diffs: &[f64]) -> (f64, f64, f64) {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    // Average ranks, computed by counting rather than sorting.
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let below = abs.iter().filter(|&&b| b < a).count() as f64;
            let equal = abs.iter().filter(|&&b| b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let w = |signs: &dyn Fn(usize) -> bool| -> f64 {
        (0..nz.len()).filter(|&i| signs(i)).map(|i| ranks[i]).sum()
    };
    let observed = w(&|i| nz[i] > 0.0);
    let total = 1usize << nz.len();
    let (mut le, mut ge) = (0usize, 0usize);
    for mask in 0..total {
        let v = w(&|i| mask >> i & 1 == 1);
        if v <= observed + 1e-9 {
            le += 1;
        }
        if v >= observed - 1e-9 {
            ge += 1;
        }
    }
    let (pl, pu) = (le as f64 / total as f64, ge as f64 / total as f64);
    (pl, pu, (2.0 * pl.min(pu)).min(1.0))
}

pub fn config(seed: u64, id: &str, n_slices: usize) -> PhantomConfig {
    PhantomConfig {
        seed,
        subject_id: id.into(),
        n_slices,
        ..Default::default()
    }
}

/// Target-level slice of `subject`, re-rendered with independent noise and shifted.
pub fn reference(subject: &PhantomSubject, noise_seed: u64, shift: (i64, i64)) -> SliceImage<f32> {
    let z = subject.z_target_mm();
    let raw = subject.render::<f32>(z, 256, 500.0, 5.0, noise_seed);
    let meta = SliceMeta::new("reference", z, 500.0 / 256.0);
    let norm = window_and_rescale(&SliceImage::new(raw, Units::RawHu, meta)).unwrap();
    let moved = translate(&norm.pixels, shift);
    norm.with_pixels(moved)
}

pub fn crop(img: &Image<f32>, r0: usize, c0: usize, rows: usize, cols: usize) -> Image<f32> {
    Image::from_fn(rows, cols, |r, c| img.get(r0 + r, c0 + c))
}

/// NMI of the overlapping region with `moving` displaced by `(dy, dx)`.
pub fn overlap_nmi(reference: &Image<f32>, moving: &Image<f32>, (dy, dx): (i64, i64)) -> f64 {
    let n = reference.rows() as i64;
    let (r0, r1) = (dy.max(0), n.min(n + dy));
    let (c0, c1) = (dx.max(0), n.min(n + dx));
    let (rows, cols) = ((r1 - r0) as usize, (c1 - c0) as usize);
    let a = crop(reference, r0 as usize, c0 as usize, rows, cols);
    let b = crop(moving, (r0 - dy) as usize, (c0 - dx) as usize, rows, cols);
    nmi(&a, &b).unwrap()
}


/// Best `(slice, nmi)` over every slice and every shift of the default grid; ties keep the first.
pub fn exhaustive_registration(volume: &slicegen_core::volume::Volume<f32>, reference: &Image<f32>) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for i in 0..volume.n_slices() {
        let mov = window_and_rescale(&volume.slice(i).unwrap()).unwrap().pixels;
        for dy in (-8i64..=8).step_by(2) {
            for dx in (-8i64..=8).step_by(2) {
                let v = overlap_nmi(reference, &mov, (dy, dx));
                if v > best.1 {
                    best = (i, v);
                }
            }
        }
    }
    best
}

/// `(selected, true)` target after refining a guess displaced by `displacement` slices.
pub fn semi_bpr_recovers(seed: u64, displacement: i64) -> (usize, usize) {
    let cfg = config(seed, "semi", 64);
    let subject = cfg.subject().unwrap();
    let volume = generate_volume::<f32>(&cfg).unwrap();
    let reference = reference(&subject, seed ^ 0xfeed, (0, 0));
    let initial = (subject.target_index as i64 + displacement) as usize;
    let sel = refine_target_semi_bpr(&volume, initial, &reference, 8).unwrap();
    (sel.slice_index, subject.target_index)
}
