//! Straight-path flow matching in latent space: corruption, velocity targets,
//! the joint loss and the Euler sampler shared by teacher and student.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::latent::{LatentBlock, Provenance};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Teacher sampler length.
pub const TEACHER_STEPS: usize = 50;
/// Distilled student sampler length.
pub const STUDENT_STEPS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState<T> {
    pub x_v: LatentBlock<T>,
    pub x_a: LatentBlock<T>,
    pub t: T,
    pub eps_v: LatentBlock<T>,
    pub eps_a: LatentBlock<T>,
}

fn check_t<T: Real>(t: T) -> Result<()> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::Precondition(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

fn lerp<T: Real>(z: &LatentBlock<T>, eps: &LatentBlock<T>, t: T) -> Result<LatentBlock<T>> {
    z.check_like(eps)?;
    let one_minus = T::one() - t;
    let data = z.tensor().zip_map(eps.tensor(), |a, e| one_minus * a + t * e)?;
    let block = match z.modality() {
        crate::latent::Modality::Video => LatentBlock::video(data, Provenance::Derived)?,
        crate::latent::Modality::Audio => LatentBlock::audio(data, Provenance::Derived)?,
    };
    Ok(block)
}

/// `x = (1 − t)·z + t·ε` for both modalities at a shared `t`.
pub fn corrupt<T: Real>(
    z_v: &LatentBlock<T>,
    z_a: &LatentBlock<T>,
    eps_v: &LatentBlock<T>,
    eps_a: &LatentBlock<T>,
    t: T,
) -> Result<FlowState<T>> {
    check_t(t)?;
    Ok(FlowState {
        x_v: lerp(z_v, eps_v, t)?,
        x_a: lerp(z_a, eps_a, t)?,
        t,
        eps_v: eps_v.clone(),
        eps_a: eps_a.clone(),
    })
}

/// `v = ε − z`.
pub fn velocity_target<T: Real>(z: &LatentBlock<T>, eps: &LatentBlock<T>) -> Result<LatentBlock<T>> {
    z.check_like(eps)?;
    let mut out = eps.map(|x| x);
    *out.tensor_mut() = eps.tensor().zip_map(z.tensor(), |e, a| e - a)?;
    Ok(out)
}

/// Per-modality mean squared error against `ε − z`, summed over modalities.
pub fn flow_loss<T: Real>(
    pred_v: &LatentBlock<T>,
    pred_a: &LatentBlock<T>,
    z_v: &LatentBlock<T>,
    z_a: &LatentBlock<T>,
    eps_v: &LatentBlock<T>,
    eps_a: &LatentBlock<T>,
) -> Result<T> {
    let term = |pred: &LatentBlock<T>, z: &LatentBlock<T>, eps: &LatentBlock<T>| -> Result<T> {
        let target = velocity_target(z, eps)?;
        pred.check_like(&target)?;
        Ok(pred.tensor().zip_map(target.tensor(), |p, v| (p - v) * (p - v))?.mean())
    };
    Ok(term(pred_v, z_v, eps_v)? + term(pred_a, z_a, eps_a)?)
}

/// Graph form of [`flow_loss`] on token matrices.
pub fn flow_loss_graph<T: Real>(g: &Graph<T>, pred_v: Var, pred_a: Var, target_v: Var, target_a: Var) -> Var {
    let lv = g.mean_square(g.sub(pred_v, target_v));
    let la = g.mean_square(g.sub(pred_a, target_a));
    g.add(lv, la)
}

/// Uniform schedule `{1, 1 − 1/n, …, 1/n}`.
pub fn uniform_schedule(n_steps: usize) -> Vec<f64> {
    (0..n_steps).map(|i| 1.0 - i as f64 / n_steps as f64).collect()
}

pub fn validate_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::Precondition("empty schedule".into()));
    }
    if (schedule[0] - 1.0).abs() > 1e-12 {
        return Err(Error::Precondition("schedule must start at t = 1".into()));
    }
    if schedule.windows(2).any(|w| w[1] >= w[0]) || *schedule.last().unwrap() <= 0.0 {
        return Err(Error::Precondition("schedule must be strictly decreasing and positive".into()));
    }
    Ok(())
}

/// A velocity field `f(x_v, x_a, t)` with its conditioning baked in.
pub trait VelocityField<T: Real> {
    fn velocity(&mut self, x_v: &LatentBlock<T>, x_a: &LatentBlock<T>, t: T) -> Result<(LatentBlock<T>, LatentBlock<T>)>;
}

impl<T: Real, F> VelocityField<T> for F
where
    F: FnMut(&LatentBlock<T>, &LatentBlock<T>, T) -> Result<(LatentBlock<T>, LatentBlock<T>)>,
{
    fn velocity(&mut self, x_v: &LatentBlock<T>, x_a: &LatentBlock<T>, t: T) -> Result<(LatentBlock<T>, LatentBlock<T>)> {
        self(x_v, x_a, t)
    }
}

/// Euler integration `x ← x − (t_i − t_{i+1})·f(x, t_i)` from pure noise down to `t = 0`.
pub fn sample<T: Real>(
    field: &mut impl VelocityField<T>,
    noise_v: &LatentBlock<T>,
    noise_a: &LatentBlock<T>,
    schedule: &[f64],
) -> Result<(LatentBlock<T>, LatentBlock<T>)> {
    validate_schedule(schedule)?;
    let mut x_v = noise_v.clone();
    let mut x_a = noise_a.clone();
    for (i, &t) in schedule.iter().enumerate() {
        let next = schedule.get(i + 1).copied().unwrap_or(0.0);
        let dt = T::lit(t - next);
        let (f_v, f_a) = field.velocity(&x_v, &x_a, T::lit(t))?;
        f_v.check_like(&x_v)?;
        f_a.check_like(&x_a)?;
        *x_v.tensor_mut() = x_v.tensor().zip_map(f_v.tensor(), |x, f| x - dt * f)?;
        *x_a.tensor_mut() = x_a.tensor().zip_map(f_a.tensor(), |x, f| x - dt * f)?;
    }
    x_v.provenance = Provenance::Generated;
    x_a.provenance = Provenance::Generated;
    Ok((x_v, x_a))
}

/// Standard normal block shaped like `like`.
pub fn noise_like<T: Real>(like: &LatentBlock<T>, rng: &mut impl Rng) -> LatentBlock<T> {
    let data: Vec<T> = (0..like.tensor().len()).map(|_| T::lit(rng.sample(StandardNormal))).collect();
    let t = Tensor::from_vec(like.shape(), data).unwrap();
    let mut b = like.map(|x| x);
    *b.tensor_mut() = t;
    b.provenance = Provenance::Noise;
    b
}

/// Sampler step counts and explicit schedules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub teacher_schedule: Vec<f64>,
    pub student_schedule: Vec<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { teacher_schedule: uniform_schedule(TEACHER_STEPS), student_schedule: uniform_schedule(STUDENT_STEPS) }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        validate_schedule(&self.teacher_schedule)?;
        validate_schedule(&self.student_schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn audio(v: &[f64]) -> LatentBlock<f64> {
        LatentBlock::audio(Tensor::from_vec(&[v.len(), 1], v.to_vec()).unwrap(), Provenance::GroundTruth).unwrap()
    }

    fn rand_block(rng: &mut ChaCha8Rng, n: usize) -> LatentBlock<f64> {
        noise_like(&LatentBlock::zeros_audio(n, 3), rng)
    }

    #[test]
    fn corrupt_endpoints_and_midpoint() {
        let (z, e) = (audio(&[2.0, -1.0]), audio(&[0.0, 5.0]));
        let s0 = corrupt(&z, &z, &e, &e, 0.0).unwrap();
        assert_eq!(s0.x_v.tensor(), z.tensor());
        let s1 = corrupt(&z, &z, &e, &e, 1.0).unwrap();
        assert_eq!(s1.x_a.tensor(), e.tensor());
        let mid = corrupt(&audio(&[2.0]), &audio(&[2.0]), &audio(&[0.0]), &audio(&[0.0]), 0.5).unwrap();
        assert_eq!(mid.x_v.tensor().data(), &[1.0]);
    }

    #[test]
    fn corrupt_rejects_bad_inputs() {
        let (z, e) = (audio(&[1.0]), audio(&[1.0, 2.0]));
        assert!(corrupt(&z, &z, &z, &z, 1.5).is_err());
        assert!(corrupt(&z, &z, &z, &z, -0.1).is_err());
        assert!(corrupt(&z, &z, &e, &z, 0.5).is_err());
    }

    #[test]
    fn velocity_target_examples() {
        let v = velocity_target(&audio(&[1.0, 2.0]), &audio(&[3.0, 1.0])).unwrap();
        assert_eq!(v.tensor().data(), &[2.0, -1.0]);
        let z = audio(&[0.3, 0.7]);
        assert!(velocity_target(&z, &z).unwrap().tensor().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_hand_computation() {
        let (z_v, e_v) = (audio(&[1.0, 0.0]), audio(&[0.0, 0.0]));
        let (z_a, e_a) = (audio(&[0.0, 0.0]), audio(&[0.6, 0.8]));
        let zero = audio(&[0.0, 0.0]);
        // ‖ε_v − z_v‖² / 2 + ‖ε_a − z_a‖² / 2 = 0.5 + 0.5
        let l = flow_loss(&zero, &zero, &z_v, &z_a, &e_v, &e_a).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        let tv = velocity_target(&z_v, &e_v).unwrap();
        let ta = velocity_target(&z_a, &e_a).unwrap();
        assert_eq!(flow_loss(&tv, &ta, &z_v, &z_a, &e_v, &e_a).unwrap(), 0.0);
        assert_eq!(flow_loss(&zero, &zero, &z_v, &z_a, &z_v, &z_a).unwrap(), 0.0);
    }

    #[test]
    fn schedule_validation() {
        assert!(validate_schedule(&[]).is_err());
        assert!(validate_schedule(&[1.0, 0.5, 0.6]).is_err());
        assert!(validate_schedule(&[0.9, 0.5]).is_err());
        assert!(validate_schedule(&uniform_schedule(50)).is_ok());
        assert_eq!(uniform_schedule(4), vec![1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn oracle_field_recovers_clean_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (z_v, z_a) = (rand_block(&mut rng, 5), rand_block(&mut rng, 7));
        let (e_v, e_a) = (rand_block(&mut rng, 5), rand_block(&mut rng, 7));
        let tv = velocity_target(&z_v, &e_v).unwrap();
        let ta = velocity_target(&z_a, &e_a).unwrap();
        let mut calls = 0;
        let mut field = |_: &LatentBlock<f64>, _: &LatentBlock<f64>, _: f64| {
            calls += 1;
            Ok((tv.clone(), ta.clone()))
        };
        let (one_v, _) = sample(&mut field, &e_v, &e_a, &[1.0]).unwrap();
        assert!(one_v.tensor().max_abs_diff(z_v.tensor()) < 1e-12);
        let (v4, a4) = sample(&mut field, &e_v, &e_a, &uniform_schedule(4)).unwrap();
        assert_eq!(v4.shape(), z_v.shape());
        assert_eq!(a4.shape(), z_a.shape());
        let (v50, a50) = sample(&mut field, &e_v, &e_a, &uniform_schedule(50)).unwrap();
        assert!(v50.tensor().max_abs_diff(one_v.tensor()) < 1e-5);
        assert!(a50.tensor().max_abs_diff(z_a.tensor()) < 1e-5);
        assert_eq!(calls, 1 + 4 + 50);
        assert_eq!(v50.provenance, Provenance::Generated);
    }
}
