//! The cloak optimizer: per-image perturbations that pull an image's
//! feature representation toward a target image, under a DSSIM budget.
//!
//! The constrained problem (minimize mean feature distance to the target
//! subject to `dssim <= rho`) is solved with a penalty term
//! `lambda * max(dssim - rho, 0)` and an adaptive lambda schedule. Pixels
//! are parametrized as `p = (tanh(w) + 1) / 2`, so the box constraint is
//! built in and the optimizer runs unconstrained Adam in w-space.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{FeatureExtractor, FeatureVector};
use crate::imaging::{dssim, dssim_with_grad, Image, SsimParams};

/// Configuration of one cloak optimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloakParams {
    /// DSSIM budget rho.
    pub rho: f64,
    pub iterations: usize,
    /// Adam learning rate, applied in tanh space.
    pub learning_rate: f64,
    pub lambda_init: f64,
    /// Every this many iterations lambda doubles if the budget is violated
    /// and shrinks otherwise.
    pub lambda_update_every: usize,
    /// Stop once the target distance falls to this fraction of the initial
    /// distance (detection-evasion variant).
    pub early_stop_fraction: Option<f64>,
    /// Enforce `dssim <= rho` exactly on the returned image by scaling the
    /// perturbation with a final bisection.
    pub hard_budget: bool,
    /// Trace row cadence for the optimizer log.
    pub log_every: usize,
    pub ssim: SsimParams,
}

impl Default for CloakParams {
    fn default() -> Self {
        CloakParams {
            rho: 0.007,
            iterations: 1000,
            learning_rate: 0.5,
            lambda_init: 10.0,
            lambda_update_every: 50,
            early_stop_fraction: None,
            hard_budget: true,
            log_every: 50,
            ssim: SsimParams::default(),
        }
    }
}

impl CloakParams {
    fn validate(&self) -> Result<()> {
        if self.rho < 0.0 || !self.rho.is_finite() {
            return Err(Error::Param("rho must be >= 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Param("iterations must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Param("learning rate must be > 0".into()));
        }
        if self.lambda_init < 0.0 {
            return Err(Error::Param("lambda_init must be >= 0".into()));
        }
        if let Some(f) = self.early_stop_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Param(format!(
                    "early_stop_fraction must be in (0, 1], got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// One optimizer log row; the harness writes these as JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloakTraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub dssim: f64,
    pub target_distance: f64,
}

/// Outcome of one cloak optimization.
#[derive(Debug, Clone)]
pub struct CloakResult {
    /// The perturbed image `x + delta`, always inside the unit box.
    pub cloaked: Image,
    /// `cloaked - x`, planar layout.
    pub delta: Vec<f64>,
    pub final_dssim: f64,
    pub initial_target_distance: f64,
    pub final_target_distance: f64,
    /// Optimizer steps taken (smaller than `iterations` on early stop).
    pub iterations_run: usize,
    /// Early stop fired, or the returned image satisfies the budget.
    pub converged: bool,
    pub trace: Vec<CloakTraceRow>,
}

const ATANH_CLIP: f64 = 1e-6;
const FEASIBLE_SLACK: f64 = 1e-9;

struct Snapshot {
    pixels: Vec<f64>,
    distance: f64,
}

/// Mean feature distance and the mean pixel gradient of that distance
/// across extractors.
fn distance_and_grad(
    phis: &[FeatureExtractor],
    targets: &[FeatureVector],
    img: &Image,
) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut grad = vec![0.0; img.pixels().len()];
    for (phi, t) in phis.iter().zip(targets) {
        let (d, g) = phi.embed_with_grad(img, |e| {
            let diff: Vec<f64> = e.iter().zip(t.values()).map(|(a, b)| a - b).collect();
            let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = if d > 1e-12 { 1.0 / d } else { 0.0 };
            (d, diff.iter().map(|v| v * inv).collect())
        })?;
        total += d;
        for (acc, g) in grad.iter_mut().zip(&g) {
            *acc += g;
        }
    }
    let n = phis.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    Ok((total / n, grad))
}

fn mean_distance(phis: &[FeatureExtractor], targets: &[FeatureVector], img: &Image) -> Result<f64> {
    let mut total = 0.0;
    for (phi, t) in phis.iter().zip(targets) {
        let e = phi.embed(img)?;
        let d: f64 = e
            .values()
            .iter()
            .zip(t.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        total += d;
    }
    Ok(total / phis.len() as f64)
}

/// Computes the cloak perturbation for `x` toward `x_target` under the
/// given budget, jointly over all extractors (unweighted mean of their
/// feature distances).
pub fn compute_cloak(
    phis: &[FeatureExtractor],
    x: &Image,
    x_target: &Image,
    params: &CloakParams,
) -> Result<CloakResult> {
    params.validate()?;
    if phis.is_empty() {
        return Err(Error::Param("at least one extractor required".into()));
    }
    for phi in phis {
        let (h, w, c) = phi.input_shape();
        if x.height() != h || x.width() != w || x.channels() != c {
            return Err(Error::Dimension(format!(
                "image {}x{}x{} does not match extractor input {h}x{w}x{c}",
                x.height(),
                x.width(),
                x.channels()
            )));
        }
    }
    if !x.same_shape(x_target) {
        return Err(Error::Dimension("target image shape differs from input".into()));
    }

    let targets: Vec<FeatureVector> = phis
        .iter()
        .map(|phi| phi.embed(x_target))
        .collect::<Result<_>>()?;
    let initial_distance = mean_distance(phis, &targets, x)?;

    // A zero budget with hard enforcement admits only the unchanged image.
    if params.rho == 0.0 && params.hard_budget {
        return Ok(CloakResult {
            cloaked: x.clone(),
            delta: vec![0.0; x.pixels().len()],
            final_dssim: 0.0,
            initial_target_distance: initial_distance,
            final_target_distance: initial_distance,
            iterations_run: 0,
            converged: true,
            trace: Vec::new(),
        });
    }

    // w = atanh(2 clip(x) - 1) makes the first iterate equal x (up to the
    // clip at exact 0/1 pixels), so delta starts at zero.
    let mut w: Vec<f64> = x
        .pixels()
        .iter()
        .map(|p| (2.0 * p.clamp(ATANH_CLIP, 1.0 - ATANH_CLIP) - 1.0).atanh())
        .collect();

    let mut adam = WAdam::new(w.len(), params.learning_rate);
    let mut lambda = params.lambda_init;
    let mut best_feasible: Option<Snapshot> = None;
    let mut best_soft: Option<(f64, Snapshot)> = None;
    let mut trace = Vec::new();
    let mut early_stopped = false;
    let mut iterations_run = 0;

    let (h, wd, c) = (x.height(), x.width(), x.channels());
    for iter in 0..=params.iterations {
        let pixels: Vec<f64> = w.iter().map(|v| (v.tanh() + 1.0) / 2.0).collect();
        let img = Image::new(h, wd, c, pixels.clone())?;
        let (dist, dist_grad) = distance_and_grad(phis, &targets, &img)?;
        let (sim, sim_grad) = dssim_with_grad(x, &img, &params.ssim)?;
        let violation = (sim - params.rho).max(0.0);
        let loss = dist + lambda * violation;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("cloak loss diverged at iteration {iter}")));
        }

        if sim <= params.rho + FEASIBLE_SLACK
            && best_feasible.as_ref().map_or(true, |b| dist < b.distance)
        {
            best_feasible = Some(Snapshot {
                pixels: pixels.clone(),
                distance: dist,
            });
        }
        if best_soft.as_ref().map_or(true, |(l, _)| loss < *l) {
            best_soft = Some((
                loss,
                Snapshot {
                    pixels: pixels.clone(),
                    distance: dist,
                },
            ));
        }

        if iter % params.log_every.max(1) == 0 || iter == params.iterations {
            trace.push(CloakTraceRow {
                iteration: iter,
                loss,
                dssim: sim,
                target_distance: dist,
            });
        }

        if let Some(f) = params.early_stop_fraction {
            if dist <= f * initial_distance {
                early_stopped = true;
                break;
            }
        }
        if iter == params.iterations {
            break;
        }

        // Penalty subgradient: the dssim term only pushes once over budget.
        let mut grad_w = dist_grad;
        if violation > 0.0 {
            for (g, sg) in grad_w.iter_mut().zip(&sim_grad) {
                *g += lambda * sg;
            }
        }
        // Chain through the tanh parametrization: dp/dw = 2 p (1 - p).
        for (g, p) in grad_w.iter_mut().zip(&img.pixels().to_vec()) {
            *g *= 2.0 * p * (1.0 - p);
        }
        adam.step(&mut w, &grad_w);
        iterations_run = iter + 1;

        if (iter + 1) % params.lambda_update_every.max(1) == 0 {
            lambda = if sim > params.rho {
                (lambda * 2.0).min(1e4)
            } else {
                (lambda / 1.5).max(1e-2)
            };
        }
    }

    // Final selection. Under a hard budget, compare the best feasible
    // iterate against a budget-scaled version of the best soft iterate and
    // keep whichever lands closer to the target.
    let (final_pixels, final_distance) = if params.hard_budget {
        let scaled = best_soft
            .as_ref()
            .map(|(_, snap)| scale_into_budget(x, &snap.pixels, params, phis, &targets))
            .transpose()?;
        match (best_feasible, scaled) {
            (Some(a), Some(b)) if b.distance < a.distance => (b.pixels, b.distance),
            (Some(a), _) => (a.pixels, a.distance),
            (None, Some(b)) => (b.pixels, b.distance),
            (None, None) => (x.pixels().to_vec(), initial_distance),
        }
    } else {
        let (_, snap) = best_soft.expect("at least one iterate evaluated");
        (snap.pixels, snap.distance)
    };

    let cloaked = Image::new(h, wd, c, final_pixels)?;
    let final_dssim = dssim(x, &cloaked, &params.ssim)?;
    let delta: Vec<f64> = cloaked
        .pixels()
        .iter()
        .zip(x.pixels())
        .map(|(a, b)| a - b)
        .collect();
    Ok(CloakResult {
        converged: early_stopped || final_dssim <= params.rho + 1e-6,
        final_target_distance: final_distance.min(initial_distance),
        cloaked,
        delta,
        final_dssim,
        initial_target_distance: initial_distance,
        iterations_run,
        trace,
    })
}

/// Largest scaling of `pixels - x` that keeps the result within the DSSIM
/// budget, found by bisection (20 steps); scale 0 is always feasible.
fn scale_into_budget(
    x: &Image,
    pixels: &[f64],
    params: &CloakParams,
    phis: &[FeatureExtractor],
    targets: &[FeatureVector],
) -> Result<Snapshot> {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let delta: Vec<f64> = pixels.iter().zip(x.pixels()).map(|(p, b)| p - b).collect();
    let build = |s: f64| -> Result<Image> {
        let px: Vec<f64> = x
            .pixels()
            .iter()
            .zip(&delta)
            .map(|(b, d)| (b + s * d).clamp(0.0, 1.0))
            .collect();
        Image::new(h, w, c, px)
    };

    let full = build(1.0)?;
    let mut lo = 0.0;
    if dssim(x, &full, &params.ssim)? <= params.rho + FEASIBLE_SLACK {
        lo = 1.0;
    } else {
        let mut hi = 1.0;
        for _ in 0..20 {
            let mid = 0.5 * (lo + hi);
            if dssim(x, &build(mid)?, &params.ssim)? <= params.rho + FEASIBLE_SLACK {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let img = build(lo)?;
    let distance = mean_distance(phis, targets, &img)?;
    Ok(Snapshot {
        pixels: img.pixels().to_vec(),
        distance,
    })
}

/// Adam specialized to the flat w vector of the cloak optimizer.
struct WAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
    lr: f64,
}

impl WAdam {
    fn new(n: usize, lr: f64) -> WAdam {
        WAdam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, w: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..w.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            w[i] -= self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + EPS);
        }
    }
}

/// Pairs every user image with a uniformly drawn target image (with
/// replacement); returns `(user index, target index)` pairs.
pub fn pair_targets(
    user_images: &[Image],
    target_images: &[Image],
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    if target_images.is_empty() {
        return Err(Error::Dataset("no target images to pair against".into()));
    }
    Ok((0..user_images.len())
        .map(|i| (i, rng.gen_range(0..target_images.len())))
        .collect())
}

/// Cloaks a whole album: pairs each image with a target, then optimizes
/// each pair. Results come back in input order; the per-image
/// optimizations are independent and fan out across the worker pool.
pub fn cloak_album(
    phis: &[FeatureExtractor],
    user_images: &[Image],
    target_images: &[Image],
    params: &CloakParams,
    rng: &mut impl Rng,
) -> Result<Vec<CloakResult>> {
    if user_images.is_empty() {
        return Ok(Vec::new());
    }
    let pairs = pair_targets(user_images, target_images, rng)?;
    pairs
        .par_iter()
        .map(|&(i, t)| compute_cloak(phis, &user_images[i], &target_images[t], params))
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.gen_range(0.05..0.95)).unwrap()
    }

    fn quick_params() -> CloakParams {
        CloakParams {
            iterations: 120,
            rho: 0.02,
            ..CloakParams::default()
        }
    }

    #[test]
    fn zero_budget_hard_returns_input_bit_for_bit() {
        let phi = FeatureExtractor::identity(16, 16, 1);
        let x = random_image(1, 16, 16, 1);
        let t = random_image(2, 16, 16, 1);
        let params = CloakParams {
            rho: 0.0,
            hard_budget: true,
            ..CloakParams::default()
        };
        let res = compute_cloak(std::slice::from_ref(&phi), &x, &t, &params).unwrap();
        assert_eq!(res.cloaked, x);
        assert_eq!(res.final_dssim, 0.0);
        assert_eq!(res.iterations_run, 0);
        assert!(res.delta.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn identity_extractor_converges_to_target_unconstrained() {
        let phi = FeatureExtractor::identity(16, 16, 1);
        let x = random_image(3, 16, 16, 1);
        let t = random_image(4, 16, 16, 1);
        let params = CloakParams {
            lambda_init: 0.0,
            hard_budget: false,
            iterations: 1000,
            ..CloakParams::default()
        };
        let res = compute_cloak(std::slice::from_ref(&phi), &x, &t, &params).unwrap();
        let ratio = res.final_target_distance / res.initial_target_distance;
        assert!(ratio < 0.05, "distance ratio {ratio}");
    }

    #[test]
    fn hard_budget_holds_on_random_cloaks() {
        let phi = FeatureExtractor::identity(16, 16, 1);
        let params = quick_params();
        for k in 0..8 {
            let x = random_image(100 + k, 16, 16, 1);
            let t = random_image(200 + k, 16, 16, 1);
            let res = compute_cloak(std::slice::from_ref(&phi), &x, &t, &params).unwrap();
            assert!(
                res.final_dssim <= params.rho + 1e-6,
                "dssim {} over budget",
                res.final_dssim
            );
            assert!(res.final_target_distance <= res.initial_target_distance);
            // cloaked == x + delta by construction.
            for (i, d) in res.delta.iter().enumerate() {
                assert!((x.pixels()[i] + d - res.cloaked.pixels()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn early_stop_halts_at_the_distance_floor() {
        let phi = FeatureExtractor::identity(16, 16, 1);
        let x = random_image(5, 16, 16, 1);
        let t = random_image(6, 16, 16, 1);
        let params = CloakParams {
            lambda_init: 0.0,
            hard_budget: false,
            early_stop_fraction: Some(0.5),
            iterations: 1000,
            ..CloakParams::default()
        };
        let res = compute_cloak(std::slice::from_ref(&phi), &x, &t, &params).unwrap();
        assert!(res.converged);
        assert!(res.iterations_run < 1000, "stopped at {}", res.iterations_run);
        let ratio = res.final_target_distance / res.initial_target_distance;
        assert!(ratio <= 0.5 + 1e-9, "ratio {ratio}");
        // The evasion keeps separation: distance must not collapse far
        // below the floor either.
        assert!(ratio > 0.25, "overshot the early-stop floor: {ratio}");
    }

    #[test]
    fn trace_rows_follow_the_log_cadence() {
        let phi = FeatureExtractor::identity(16, 16, 1);
        let x = random_image(7, 16, 16, 1);
        let t = random_image(8, 16, 16, 1);
        let params = CloakParams {
            iterations: 100,
            log_every: 25,
            ..quick_params()
        };
        let res = compute_cloak(std::slice::from_ref(&phi), &x, &t, &params).unwrap();
        let iters: Vec<usize> = res.trace.iter().map(|r| r.iteration).collect();
        assert_eq!(iters, vec![0, 25, 50, 75, 100]);
    }

    #[test]
    fn determinism_same_inputs_same_cloak() {
        let phi = FeatureExtractor::identity(16, 16, 1);
        let x = random_image(9, 16, 16, 1);
        let t = random_image(10, 16, 16, 1);
        let params = quick_params();
        let a = compute_cloak(std::slice::from_ref(&phi), &x, &t, &params).unwrap();
        let b = compute_cloak(std::slice::from_ref(&phi), &x, &t, &params).unwrap();
        assert_eq!(a.cloaked, b.cloaked);
        assert_eq!(a.final_dssim, b.final_dssim);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let phi = FeatureExtractor::identity(16, 16, 1);
        let x = random_image(11, 16, 16, 1);
        let t = random_image(12, 20, 20, 1);
        assert!(matches!(
            compute_cloak(std::slice::from_ref(&phi), &x, &t, &quick_params()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn pair_targets_single_target_and_determinism() {
        let user: Vec<Image> = (0..3).map(|k| random_image(20 + k, 16, 16, 1)).collect();
        let targets = vec![random_image(30, 16, 16, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = pair_targets(&user, &targets, &mut rng).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 0), (2, 0)]);

        let targets4: Vec<Image> = (0..4).map(|k| random_image(40 + k, 16, 16, 1)).collect();
        let a = pair_targets(&user, &targets4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = pair_targets(&user, &targets4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);

        assert!(matches!(
            pair_targets(&user, &[], &mut ChaCha8Rng::seed_from_u64(3)),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn pair_targets_draws_are_near_uniform() {
        let user: Vec<Image> = (0..16).map(|k| random_image(50 + k, 16, 16, 1)).collect();
        let targets: Vec<Image> = (0..4).map(|k| random_image(70 + k, 16, 16, 1)).collect();
        let mut counts = [0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // 625 albums of 16 images = 10_000 draws.
        for _ in 0..625 {
            for (_, t) in pair_targets(&user, &targets, &mut rng).unwrap() {
                counts[t] += 1;
            }
        }
        let expected = 2500.0;
        let sigma = (10_000.0_f64 * 0.25 * 0.75).sqrt();
        for (t, &n) in counts.iter().enumerate() {
            assert!(
                (n as f64 - expected).abs() <= 3.0 * sigma,
                "target {t} drawn {n} times"
            );
        }
    }

    #[test]
    fn album_results_follow_input_order_and_invariants() {
        let phi = FeatureExtractor::identity(16, 16, 1);
        let user: Vec<Image> = (0..5).map(|k| random_image(80 + k, 16, 16, 1)).collect();
        let targets: Vec<Image> = (0..2).map(|k| random_image(90 + k, 16, 16, 1)).collect();
        let params = CloakParams {
            iterations: 60,
            ..quick_params()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let results = cloak_album(std::slice::from_ref(&phi), &user, &targets, &params, &mut rng).unwrap();
        assert_eq!(results.len(), 5);
        for (res, original) in results.iter().zip(&user) {
            assert!(res.final_dssim <= params.rho + 1e-6);
            assert!(res.final_target_distance <= res.initial_target_distance);
            assert!(res.cloaked.same_shape(original));
        }

        // Per-image cloak patterns differ.
        for i in 0..results.len() {
            for j in (i + 1)..results.len() {
                let max_gap = results[i]
                    .delta
                    .iter()
                    .zip(&results[j].delta)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(max_gap > 0.0, "cloaks {i} and {j} identical");
            }
        }

        let empty = cloak_album(std::slice::from_ref(&phi), &[], &targets, &params, &mut rng).unwrap();
        assert!(empty.is_empty());
    }
}
