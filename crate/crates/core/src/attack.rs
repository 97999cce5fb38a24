//! Sign-gradient PGD under two budget geometries.
//!
//! * **Uniform**: `|delta_i| <= eps` for every entry.
//! * **Adaptive**: `|delta_i| <= eps * I_eff,i` with `I_eff = max(I, floor)`,
//!   i.e. the budget scales with each entry's own intensity, so dark (shadow)
//!   pixels get proportionally less perturbation.
//!
//! Both are intersected with `[-I, 1 - I]` so the attacked image stays in
//! range. The objective is `||f(I) - f(I + delta)||_2` with `f(I)` computed
//! once as a fixed anchor.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::image::{Image, ImageError, Perturbation};
use crate::models::{DiffModel, ModelError};
use crate::rng::Stream;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("non-finite gradient at iteration {iteration} (entry {index})")]
    NonFiniteGradient { iteration: usize, index: usize },
    #[error("non-finite objective at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackMode {
    Adaptive,
    Uniform,
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMode::Uniform => "uniform",
            AttackMode::Adaptive => "adaptive",
        })
    }
}

impl FromStr for AttackMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(AttackMode::Uniform),
            "adaptive" => Ok(AttackMode::Adaptive),
            other => Err(format!("unknown attack mode {other:?} (uniform | adaptive)")),
        }
    }
}

/// How the adaptive attack sizes its steps. Uniform mode always uses the
/// scalar `eps / step_divisor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepRule {
    /// `alpha_i = eps * I_eff,i / step_divisor`
    #[default]
    PerPixel,
    /// `alpha = eps / step_divisor` everywhere
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub mode: AttackMode,
    /// `eps_u` in uniform mode, `eps_a` in adaptive mode.
    pub epsilon: f64,
    pub iterations: usize,
    pub step_divisor: f64,
    pub seed: u64,
    /// Adaptive mode only.
    pub intensity_floor: f64,
    pub step_rule: StepRule,
}

pub const DEFAULT_ITERATIONS: usize = 20;
pub const DEFAULT_STEP_DIVISOR: f64 = 4.0;
pub const DEFAULT_INTENSITY_FLOOR: f64 = 1.0 / 255.0;

impl AttackConfig {
    pub fn new(mode: AttackMode, epsilon: f64) -> Self {
        Self {
            mode,
            epsilon,
            iterations: DEFAULT_ITERATIONS,
            step_divisor: DEFAULT_STEP_DIVISOR,
            seed: 0,
            intensity_floor: DEFAULT_INTENSITY_FLOOR,
            step_rule: StepRule::PerPixel,
        }
    }

    pub fn uniform(epsilon: f64) -> Self {
        Self::new(AttackMode::Uniform, epsilon)
    }

    pub fn adaptive(epsilon: f64) -> Self {
        Self::new(AttackMode::Adaptive, epsilon)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn with_step_divisor(mut self, step_divisor: f64) -> Self {
        self.step_divisor = step_divisor;
        self
    }

    pub fn with_step_rule(mut self, step_rule: StepRule) -> Self {
        self.step_rule = step_rule;
        self
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(AttackError::Config(format!(
                "epsilon {} must lie in (0, 1)",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(AttackError::Config("iterations must be at least 1".into()));
        }
        if !(self.step_divisor > 0.0 && self.step_divisor.is_finite()) {
            return Err(AttackError::Config(format!(
                "step divisor {} must be positive",
                self.step_divisor
            )));
        }
        if !(self.intensity_floor > 0.0 && self.intensity_floor <= 1.0) {
            return Err(AttackError::Config(format!(
                "intensity floor {} must lie in (0, 1]",
                self.intensity_floor
            )));
        }
        Ok(())
    }

    /// The per-entry magnitude budget before range clipping.
    fn radius(&self, intensity: f64) -> f64 {
        match self.mode {
            AttackMode::Uniform => self.epsilon,
            AttackMode::Adaptive => self.epsilon * intensity.max(self.intensity_floor),
        }
    }

    fn step(&self, intensity: f64) -> f64 {
        match (self.mode, self.step_rule) {
            (AttackMode::Adaptive, StepRule::PerPixel) => self.radius(intensity) / self.step_divisor,
            _ => self.epsilon / self.step_divisor,
        }
    }
}

/// Per-entry feasible interval `[lower_i, upper_i]` for `delta`, always
/// containing 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BudgetBox {
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// True when every interval has zero width, so no attack is possible.
    pub fn is_degenerate(&self) -> bool {
        self.lower.iter().zip(&self.upper).all(|(l, u)| u - l <= 0.0)
    }

    pub fn project(&self, delta: &mut [f64]) {
        for ((d, &l), &u) in delta.iter_mut().zip(&self.lower).zip(&self.upper) {
            *d = d.clamp(l, u);
        }
    }

    /// First entry outside the box by more than `tol`.
    pub fn violation(&self, delta: &[f64], tol: f64) -> Option<usize> {
        delta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .position(|(&d, (&l, &u))| d < l - tol || d > u + tol)
    }

    /// Coordinate-wise containment of `self` in `other`.
    pub fn is_within(&self, other: &BudgetBox) -> bool {
        self.len() == other.len()
            && self
                .lower
                .iter()
                .zip(&self.upper)
                .zip(other.lower.iter().zip(&other.upper))
                .all(|((&l, &u), (&ol, &ou))| l >= ol && u <= ou)
    }
}

pub fn budget_box(image: &Image, config: &AttackConfig) -> BudgetBox {
    let (lower, upper) = image
        .data()
        .iter()
        .map(|&i| {
            let r = config.radius(i);
            ((-r).max(-i), r.min(1.0 - i))
        })
        .unzip();
    BudgetBox { lower, upper }
}

/// Draws each entry uniformly from its own interval.
pub fn init_delta(bbox: &BudgetBox, seed: u64) -> Vec<f64> {
    let mut rng = Stream::keyed(&[seed, 0x696e_6974]);
    bbox.lower
        .iter()
        .zip(&bbox.upper)
        .map(|(&l, &u)| rng.uniform(l, u))
        .collect()
}

/// Step size per entry.
pub fn step_sizes(image: &Image, config: &AttackConfig) -> Vec<f64> {
    image.data().iter().map(|&i| config.step(i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub perturbation: Perturbation,
    pub attacked_image: Image,
    /// Objective after each of the `iterations` updates.
    pub objective_trace: Vec<f64>,
    /// Objective at the random starting point.
    pub initial_objective: f64,
    pub config: AttackConfig,
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add(image: &Image, delta: &[f64]) -> Result<Image, ImageError> {
    let [h, w, c] = image.shape();
    Image::from_clamped(h, w, c, image.data().iter().zip(delta).map(|(a, b)| a + b).collect())
}

fn distance(a: &Image, b: &Image) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn pgd_attack(model: &dyn DiffModel, image: &Image, config: &AttackConfig) -> Result<AttackResult, AttackError> {
    pgd_attack_observed(model, image, config, |_, _| {})
}

/// [`pgd_attack`] that reports `delta` after initialization (iteration 0) and
/// after every projected update (iterations `1..=T`).
pub fn pgd_attack_observed(
    model: &dyn DiffModel,
    image: &Image,
    config: &AttackConfig,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<AttackResult, AttackError> {
    config.validate()?;
    let anchor = model.forward(image)?;
    let bbox = budget_box(image, config);
    let steps = step_sizes(image, config);
    let mut delta = init_delta(&bbox, config.seed);
    observe(0, &delta);

    let mut out = model.forward(&add(image, &delta)?)?;
    let initial_objective = distance(&anchor, &out);
    let mut objective = initial_objective;
    let mut trace = Vec::with_capacity(config.iterations);
    for t in 0..config.iterations {
        // d||f(I) - y|| / dy = (y - f(I)) / ||.||, zero at the origin
        let cot: Vec<f64> = if objective > 0.0 {
            out.data()
                .iter()
                .zip(anchor.data())
                .map(|(y, a)| (y - a) / objective)
                .collect()
        } else {
            vec![0.0; image.len()]
        };
        let grad = model.input_grad(&add(image, &delta)?, &cot)?;
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(AttackError::NonFiniteGradient { iteration: t, index });
        }
        for ((d, g), a) in delta.iter_mut().zip(&grad).zip(&steps) {
            *d += a * sgn(*g);
        }
        bbox.project(&mut delta);
        observe(t + 1, &delta);
        out = model.forward(&add(image, &delta)?)?;
        objective = distance(&anchor, &out);
        if !objective.is_finite() {
            return Err(AttackError::NonFiniteObjective { iteration: t });
        }
        trace.push(objective);
    }
    let attacked_image = add(image, &delta)?;
    Ok(AttackResult {
        perturbation: Perturbation::for_image(image, delta)?,
        attacked_image,
        objective_trace: trace,
        initial_objective,
        config: *config,
    })
}

/// Uniform budget with the same maximal mean absolute perturbation as an
/// adaptive budget `epsilon_a`: `eps_u = eps_a * mean(I)`.
pub fn equivalent_uniform_budget(image: &Image, epsilon_a: f64) -> f64 {
    epsilon_a * image.mean_intensity()
}

#[derive(Debug, Clone, PartialEq)]
pub struct L1BoundReport {
    /// `(1/n) * sum |delta_i|`
    pub mean_abs: f64,
    /// `eps_a * mean(max(I_i, floor))`
    pub bound: f64,
    /// First entry with `|delta_i| > eps_a * I_eff,i + 1e-9`, and its excess.
    pub violation: Option<(usize, f64)>,
    pub holds: bool,
}

pub const L1_BOUND_TOL: f64 = 1e-9;

/// Checks the per-entry adaptive bound `|delta_i| <= eps_a * I_eff,i` and
/// its mean-l1 consequence `(1/n)||delta||_1 <= eps_a * mean(I_eff)`, both
/// with absolute slack 1e-9.
pub fn verify_l1_bound(delta: &Perturbation, image: &Image, epsilon_a: f64, floor: f64) -> L1BoundReport {
    let n = image.len() as f64;
    let mut sum_abs = 0.0;
    let mut sum_eff = 0.0;
    let mut violation = None;
    for (i, (&d, &v)) in delta.data().iter().zip(image.data()).enumerate() {
        let limit = epsilon_a * v.max(floor);
        sum_abs += d.abs();
        sum_eff += v.max(floor);
        if violation.is_none() && d.abs() > limit + L1_BOUND_TOL {
            violation = Some((i, d.abs() - limit));
        }
    }
    let mean_abs = sum_abs / n;
    let bound = epsilon_a * (sum_eff / n);
    L1BoundReport {
        mean_abs,
        bound,
        violation,
        holds: violation.is_none() && mean_abs <= bound + L1_BOUND_TOL,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{model_identity, model_tinycnn};
    use proptest::prelude::*;

    fn img(data: Vec<f64>) -> Image {
        Image::new(1, data.len(), 1, data).unwrap()
    }

    #[test]
    fn uniform_box_clips_to_range() {
        let b = budget_box(&img(vec![0.95]), &AttackConfig::uniform(0.1));
        assert_eq!((b.lower()[0], b.upper()[0]), (-0.1, 1.0 - 0.95));
    }

    #[test]
    fn adaptive_box_scales_with_intensity() {
        let b = budget_box(&img(vec![0.1]), &AttackConfig::adaptive(0.3));
        assert!((b.lower()[0] + 0.03).abs() < 1e-15);
        assert!((b.upper()[0] - 0.03).abs() < 1e-15);
    }

    #[test]
    fn adaptive_box_floors_black_pixels() {
        let b = budget_box(&img(vec![0.0]), &AttackConfig::adaptive(0.3));
        assert_eq!(b.lower()[0], 0.0);
        assert_eq!(b.upper()[0], 0.3 / 255.0);
    }

    #[test]
    fn degenerate_box_gives_zero_init() {
        let b = budget_box(&img(vec![1.0]), &AttackConfig::uniform(0.1));
        assert_eq!(b.upper()[0], 0.0);
        let b = BudgetBox {
            lower: vec![0.0],
            upper: vec![0.0],
        };
        assert!(b.is_degenerate());
        assert_eq!(init_delta(&b, 4), vec![0.0]);
    }

    #[test]
    fn init_is_seeded() {
        let image = img(vec![0.5; 64]);
        let b = budget_box(&image, &AttackConfig::uniform(0.1));
        assert_eq!(init_delta(&b, 1), init_delta(&b, 1));
        assert_ne!(init_delta(&b, 1), init_delta(&b, 2));
    }

    #[test]
    fn init_mean_near_box_midpoint() {
        // 1e5 draws from [-0.1, 0.05]: mean within 3 sigma of -0.025
        let image = Image::filled(100, 1000, 1, 0.95).unwrap();
        let b = budget_box(&image, &AttackConfig::uniform(0.1));
        let d = init_delta(&b, 77);
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let width: f64 = 0.15;
        let sigma = width / 12f64.sqrt() / (d.len() as f64).sqrt();
        assert!((mean + 0.025).abs() < 3.0 * sigma, "{mean}");
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::uniform(0.0).validate().is_err());
        assert!(AttackConfig::uniform(1.0).validate().is_err());
        assert!(AttackConfig::uniform(0.1).with_iterations(0).validate().is_err());
        assert!(AttackConfig::uniform(0.1).with_step_divisor(0.0).validate().is_err());
        let mut c = AttackConfig::adaptive(0.1);
        c.intensity_floor = 0.0;
        assert!(c.validate().is_err());
        assert!(AttackConfig::adaptive(0.1).validate().is_ok());
        assert_eq!("adaptive".parse::<AttackMode>(), Ok(AttackMode::Adaptive));
        assert!("linf".parse::<AttackMode>().is_err());
    }

    #[test]
    fn identity_model_drives_interior_to_faces() {
        let mut s = Stream::new(5);
        let image = Image::new(8, 8, 3, (0..192).map(|_| s.uniform(0.1, 0.9)).collect()).unwrap();
        let cfg = AttackConfig::uniform(0.1).with_seed(3);
        let r = pgd_attack(&model_identity(), &image, &cfg).unwrap();
        for &d in r.perturbation.data() {
            assert_eq!(d.abs(), 0.1);
        }
        assert_eq!(r.objective_trace.len(), 20);
    }

    #[test]
    fn huge_step_saturates_in_one_iteration() {
        let mut s = Stream::new(6);
        let image = Image::new(6, 6, 3, (0..108).map(|_| s.unit()).collect()).unwrap();
        let cfg = AttackConfig::uniform(0.1)
            .with_iterations(1)
            .with_step_divisor(0.01)
            .with_seed(1);
        let r = pgd_attack(&model_identity(), &image, &cfg).unwrap();
        let b = budget_box(&image, &cfg);
        let init = init_delta(&b, 1);
        for (i, &d) in r.perturbation.data().iter().enumerate() {
            // identity gradient sign equals sign of the starting delta
            if init[i] > 0.0 {
                assert_eq!(d, b.upper()[i]);
            } else if init[i] < 0.0 {
                assert_eq!(d, b.lower()[i]);
            }
        }
    }

    #[test]
    fn sgn_of_zero_is_zero() {
        assert_eq!(sgn(0.0), 0.0);
        assert_eq!(sgn(-0.0), 0.0);
        assert_eq!(sgn(-2.0), -1.0);
    }

    #[test]
    fn budget_mapping() {
        let image = Image::filled(2, 2, 3, 0.4).unwrap();
        let e = equivalent_uniform_budget(&image, 16.0 / 255.0);
        assert!((e - 6.4 / 255.0).abs() < 1e-15);
        assert!((e - 0.025098).abs() < 1e-6);
        let white = Image::filled(2, 2, 1, 1.0).unwrap();
        assert_eq!(equivalent_uniform_budget(&white, 0.05), 0.05);
    }

    #[test]
    fn l1_bound_report() {
        let image = img(vec![0.2, 0.5, 0.7]);
        let eps = 0.1;
        let zero = verify_l1_bound(&Perturbation::zeros_like(&image), &image, eps, DEFAULT_INTENSITY_FLOOR);
        assert!(zero.holds);
        assert_eq!(zero.mean_abs, 0.0);

        let face: Vec<f64> = image.data().iter().map(|v| eps * v).collect();
        let r = verify_l1_bound(
            &Perturbation::for_image(&image, face.clone()).unwrap(),
            &image,
            eps,
            DEFAULT_INTENSITY_FLOOR,
        );
        assert!(r.holds);
        assert!((r.mean_abs - r.bound).abs() < 1e-9);

        let mut bad = face;
        bad[1] += 2e-9;
        let r = verify_l1_bound(
            &Perturbation::for_image(&image, bad).unwrap(),
            &image,
            eps,
            DEFAULT_INTENSITY_FLOOR,
        );
        assert!(!r.holds);
        assert_eq!(r.violation.map(|v| v.0), Some(1));
    }

    fn rgb(h: usize, w: usize, seed: u64) -> Image {
        let mut s = crate::rng::Stream::new(seed);
        Image::new(h, w, 3, (0..h * w * 3).map(|_| s.uniform(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn every_iterate_stays_in_the_box() {
        let image = rgb(6, 7, 3);
        let model = model_tinycnn(2);
        for config in [AttackConfig::uniform(8.0 / 255.0), AttackConfig::adaptive(16.0 / 255.0)] {
            let bx = budget_box(&image, &config);
            let mut calls = 0;
            pgd_attack_observed(&model, &image, &config.with_seed(5), |_, delta| {
                calls += 1;
                assert_eq!(bx.violation(delta, 0.0), None);
            })
            .unwrap();
            assert_eq!(calls, config.iterations + 1);
        }
    }

    #[test]
    fn optimized_beats_random_start() {
        let image = rgb(10, 10, 4);
        let model = crate::models::GainMap::default();
        for config in [AttackConfig::uniform(8.0 / 255.0), AttackConfig::adaptive(8.0 / 255.0)] {
            let r = pgd_attack(&model, &image, &config.with_seed(9)).unwrap();
            let last = *r.objective_trace.last().unwrap();
            assert!(
                last > r.initial_objective,
                "{} {last} vs {}",
                config.mode,
                r.initial_objective
            );
        }
    }

    #[test]
    fn attack_is_deterministic() {
        let mut s = Stream::new(8);
        let image = Image::new(8, 8, 3, (0..192).map(|_| s.unit()).collect()).unwrap();
        let m = model_tinycnn(1);
        let cfg = AttackConfig::adaptive(8.0 / 255.0).with_seed(9).with_iterations(4);
        let a = pgd_attack(&m, &image, &cfg).unwrap();
        let b = pgd_attack(&m, &image, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        struct Broken;
        impl DiffModel for Broken {
            fn name(&self) -> &str {
                "broken"
            }
            fn forward(&self, image: &Image) -> Result<Image, ModelError> {
                Ok(image.clone())
            }
            fn input_grad(&self, image: &Image, _: &[f64]) -> Result<Vec<f64>, ModelError> {
                Ok(vec![f64::NAN; image.len()])
            }
        }
        let image = img(vec![0.5; 4]);
        let err = pgd_attack(&Broken, &image, &AttackConfig::uniform(0.1)).unwrap_err();
        assert!(matches!(err, AttackError::NonFiniteGradient { iteration: 0, index: 0 }));
    }

    proptest! {
        #[test]
        fn larger_budget_box_contains_smaller(seed in any::<u64>(), e1 in 1e-6f64..0.5, e2 in 1e-6f64..0.5, adaptive in any::<bool>()) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let mut s = Stream::new(seed);
            let image = Image::new(4, 4, 3, (0..48).map(|_| s.unit()).collect()).unwrap();
            let mode = if adaptive { AttackMode::Adaptive } else { AttackMode::Uniform };
            let small = budget_box(&image, &AttackConfig::new(mode, lo));
            let big = budget_box(&image, &AttackConfig::new(mode, hi));
            prop_assert!(small.is_within(&big));
            for ((&l, &u), &i) in small.lower().iter().zip(small.upper()).zip(image.data()) {
                prop_assert!(l <= 0.0 && 0.0 <= u);
                prop_assert!(i + l >= 0.0 && i + u <= 1.0);
            }
        }

        #[test]
        fn tiny_budget_collapses(seed in any::<u64>(), adaptive in any::<bool>()) {
            let mut s = Stream::new(seed);
            let image = Image::new(4, 4, 3, (0..48).map(|_| s.unit()).collect()).unwrap();
            let mode = if adaptive { AttackMode::Adaptive } else { AttackMode::Uniform };
            let cfg = AttackConfig::new(mode, 1e-9).with_seed(seed).with_iterations(3);
            let r = pgd_attack(&model_identity(), &image, &cfg).unwrap();
            prop_assert!(r.perturbation.data().iter().all(|d| d.abs() <= 1e-9));
        }
    }
}
