//! Flow-matching noise schedules and the Euler ODE sampler.
//!
//! Convention: `z_σ = (1 − σ)·z₀ + σ·ε` and the model predicts `u = dz/dσ = ε − z₀`,
//! so the clean estimate at any level is `ẑ₀ = z_σ − σ·u`.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{invalid, Error, Result};
use crate::latent::{axpy, LatentGrid};

/// Monotone noise levels `1 = σ₀ > σ₁ > … > σₙ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule {
    sigmas: Vec<f64>,
    shift: f64,
}

impl SigmaSchedule {
    /// `n` steps with the rational shift warp `σ = s·u / (1 + (s − 1)·u)`, `u = 1 − i/n`.
    pub fn new(n: usize, shift: f64) -> Result<Self> {
        if n == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(shift >= 1.0) || !shift.is_finite() {
            return Err(invalid(format!("shift must be finite and >= 1, got {shift}")));
        }
        let mut sigmas: Vec<f64> = (0..=n)
            .map(|i| {
                let u = 1.0 - i as f64 / n as f64;
                shift * u / (1.0 + (shift - 1.0) * u)
            })
            .collect();
        sigmas[0] = 1.0;
        sigmas[n] = 0.0;
        Ok(SigmaSchedule { sigmas, shift })
    }

    pub fn linear(n: usize) -> Result<Self> {
        Self::new(n, 1.0)
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }
}

/// Text-embedding stand-in: a fixed-length conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning(pub Vec<f64>);

impl Conditioning {
    pub fn zeros(len: usize) -> Self {
        Conditioning(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A velocity field `u(z, σ)`.
pub trait VelocityModel {
    fn evaluate(&self, z: &LatentGrid, sigma: f64, cond: &Conditioning) -> Result<LatentGrid>;
}

impl<M: VelocityModel + ?Sized> VelocityModel for &M {
    fn evaluate(&self, z: &LatentGrid, sigma: f64, cond: &Conditioning) -> Result<LatentGrid> {
        (**self).evaluate(z, sigma, cond)
    }
}

/// Checks the model contract (same extent, finite values) on one evaluation.
pub fn eval_checked<M: VelocityModel + ?Sized>(
    model: &M,
    z: &LatentGrid,
    sigma: f64,
    cond: &Conditioning,
) -> Result<LatentGrid> {
    let u = model.evaluate(z, sigma, cond)?;
    if u.extent() != z.extent() {
        return Err(Error::ModelContract(format!("model returned {} for input {}", u.extent(), z.extent())));
    }
    if !u.is_finite() {
        return Err(Error::ModelContract("model returned non-finite values".into()));
    }
    Ok(u)
}

/// Wraps a model and counts evaluations and evaluated latent elements.
#[derive(Debug)]
pub struct NfeCounter<M> {
    inner: M,
    calls: AtomicU64,
    elements: AtomicU64,
}

impl<M> NfeCounter<M> {
    pub fn new(inner: M) -> Self {
        NfeCounter { inner, calls: AtomicU64::new(0), elements: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn elements(&self) -> u64 {
        self.elements.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> M {
        self.inner
    }
}

impl<M: VelocityModel> VelocityModel for NfeCounter<M> {
    fn evaluate(&self, z: &LatentGrid, sigma: f64, cond: &Conditioning) -> Result<LatentGrid> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.elements.fetch_add(z.values().len() as u64, Ordering::Relaxed);
        self.inner.evaluate(z, sigma, cond)
    }
}

/// One Euler step of `dz/dσ = u` from `sigma_cur` down to `sigma_next`.
pub fn euler_step(z: &LatentGrid, u: &LatentGrid, sigma_cur: f64, sigma_next: f64) -> Result<LatentGrid> {
    if !(0.0..=1.0).contains(&sigma_next) || !(0.0..=1.0).contains(&sigma_cur) || sigma_next >= sigma_cur {
        return Err(invalid(format!("euler step needs 0 <= next < cur <= 1, got {sigma_cur} -> {sigma_next}")));
    }
    axpy(sigma_next - sigma_cur, u, z)
}

/// `ẑ₀ = z − σ·u`.
pub fn estimate_clean(z: &LatentGrid, u: &LatentGrid, sigma: f64) -> Result<LatentGrid> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(invalid(format!("sigma {sigma} outside [0, 1]")));
    }
    axpy(-sigma, u, z)
}

/// Integrates `sched` steps `from..to` starting at `z` (which sits at `σ_from`).
pub(crate) fn integrate_range<M: VelocityModel + ?Sized>(
    model: &M,
    mut z: LatentGrid,
    sched: &SigmaSchedule,
    from: usize,
    to: usize,
    cond: &Conditioning,
) -> Result<LatentGrid> {
    for i in from..to {
        let (cur, next) = (sched.sigma(i), sched.sigma(i + 1));
        let u = eval_checked(model, &z, cur, cond)?;
        z = euler_step(&z, &u, cur, next)?;
    }
    Ok(z)
}

/// Euler integration of the flow ODE from `σ = 1` to `σ = 0`; exactly
/// `sched.steps()` model evaluations.
pub fn sample_ode<M: VelocityModel + ?Sized>(
    model: &M,
    z1: &LatentGrid,
    sched: &SigmaSchedule,
    cond: &Conditioning,
) -> Result<LatentGrid> {
    if !z1.is_finite() {
        return Err(invalid("initial latent is not finite"));
    }
    integrate_range(model, z1.clone(), sched, 0, sched.steps(), cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{sample_gaussian, Extent5, Rng};
    use proptest::prelude::*;

    struct Zero;
    impl VelocityModel for Zero {
        fn evaluate(&self, z: &LatentGrid, _: f64, _: &Conditioning) -> Result<LatentGrid> {
            Ok(LatentGrid::zeros(z.extent()))
        }
    }

    struct Constant(LatentGrid);
    impl VelocityModel for Constant {
        fn evaluate(&self, _: &LatentGrid, _: f64, _: &Conditioning) -> Result<LatentGrid> {
            Ok(self.0.clone())
        }
    }

    struct Identity;
    impl VelocityModel for Identity {
        fn evaluate(&self, z: &LatentGrid, _: f64, _: &Conditioning) -> Result<LatentGrid> {
            Ok(z.clone())
        }
    }

    fn ext() -> Extent5 {
        Extent5::new(1, 2, 3, 4, 4).unwrap()
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(SigmaSchedule::new(1, 7.0).unwrap().sigmas(), &[1.0, 0.0]);
        assert_eq!(SigmaSchedule::new(4, 1.0).unwrap().sigmas(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        let s = SigmaSchedule::new(2, 3.0).unwrap();
        assert_eq!(s.sigmas(), &[1.0, 3.0 * 0.5 / (1.0 + 2.0 * 0.5), 0.0]);
        assert_eq!(s.sigma(1), 0.75);
        assert!(SigmaSchedule::new(3, 0.5).is_err());
        assert!(SigmaSchedule::new(0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_monotone(n in 1usize..200, shift in 1.0f64..20.0) {
            let s = SigmaSchedule::new(n, shift).unwrap();
            prop_assert_eq!(s.sigma(0), 1.0);
            prop_assert_eq!(s.sigma(n), 0.0);
            for w in s.sigmas().windows(2) {
                prop_assert!(w[0] > w[1]);
                prop_assert!((0.0..=1.0).contains(&w[1]));
            }
        }
    }

    #[test]
    fn euler_examples() {
        let e = Extent5::new(1, 1, 1, 1, 1).unwrap();
        let z = LatentGrid::from_vec(e, vec![1.0]).unwrap();
        let u = LatentGrid::from_vec(e, vec![2.0]).unwrap();
        assert_eq!(euler_step(&z, &u, 1.0, 0.5).unwrap().values(), &[0.0]);
        assert_eq!(euler_step(&z, &LatentGrid::zeros(e), 0.7, 0.2).unwrap(), z);
        assert!(euler_step(&z, &u, 0.5, 0.5).is_err());
        assert!(euler_step(&z, &u, 0.2, 0.5).is_err());

        let mut rng = Rng::new(4);
        let z0 = sample_gaussian(ext(), &mut rng);
        let eps = sample_gaussian(ext(), &mut rng);
        let v = eps.sub(&z0).unwrap();
        let out = euler_step(&eps, &v, 1.0, 0.0).unwrap();
        for (a, b) in out.values().iter().zip(z0.values()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn estimate_clean_examples() {
        let mut rng = Rng::new(5);
        let z0 = sample_gaussian(ext(), &mut rng);
        let eps = sample_gaussian(ext(), &mut rng);
        assert_eq!(estimate_clean(&z0, &eps, 0.0).unwrap(), z0);
        assert_eq!(estimate_clean(&z0, &LatentGrid::zeros(ext()), 0.4).unwrap(), z0);
        let sigma = 0.6;
        let zt = axpy(sigma, &eps, &z0.scale(1.0 - sigma)).unwrap();
        let u = eps.sub(&z0).unwrap();
        let est = estimate_clean(&zt, &u, sigma).unwrap();
        for (a, b) in est.values().iter().zip(z0.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sample_zero_model_is_identity_and_counts_nfe() {
        let z1 = sample_gaussian(ext(), &mut Rng::new(1));
        let model = NfeCounter::new(Zero);
        let sched = SigmaSchedule::new(17, 5.0).unwrap();
        let out = sample_ode(&model, &z1, &sched, &Conditioning::zeros(0)).unwrap();
        assert_eq!(out, z1);
        assert_eq!(model.calls(), 17);
    }

    #[test]
    fn sample_linear_path_is_exact() {
        let mut rng = Rng::new(8);
        let z0 = sample_gaussian(ext(), &mut rng);
        let eps = sample_gaussian(ext(), &mut rng);
        let model = Constant(eps.sub(&z0).unwrap());
        for (n, shift) in [(1, 1.0), (3, 5.0), (40, 3.0)] {
            let out = sample_ode(&model, &eps, &SigmaSchedule::new(n, shift).unwrap(), &Conditioning::zeros(0)).unwrap();
            for (a, b) in out.values().iter().zip(z0.values()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn linear_ode_first_order() {
        // dz/dσ = z from σ=1 to 0: z(0) = z1·e^{-1}
        let z1 = sample_gaussian(ext(), &mut Rng::new(3));
        let err = |n: usize| {
            let out = sample_ode(&Identity, &z1, &SigmaSchedule::linear(n).unwrap(), &Conditioning::zeros(0)).unwrap();
            out.values()
                .iter()
                .zip(z1.values())
                .map(|(o, z)| ((o - z * (-1.0f64).exp()) / (z * (-1.0f64).exp())).abs())
                .fold(0.0, f64::max)
        };
        assert!(err(1000) <= 2e-3);
        let ratio = err(1000) / err(2000);
        assert!((1.8..=2.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn contract_violation_is_reported() {
        struct Bad;
        impl VelocityModel for Bad {
            fn evaluate(&self, _: &LatentGrid, _: f64, _: &Conditioning) -> Result<LatentGrid> {
                Ok(LatentGrid::zeros(Extent5::new(1, 1, 1, 1, 1).unwrap()))
            }
        }
        let z1 = LatentGrid::zeros(ext());
        let r = sample_ode(&Bad, &z1, &SigmaSchedule::linear(2).unwrap(), &Conditioning::zeros(0));
        assert!(matches!(r, Err(Error::ModelContract(_))));
    }
}
