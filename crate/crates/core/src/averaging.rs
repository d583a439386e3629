//! Stochastic iterative rotation averaging.
//!
//! Three update rules share one synchronous batch loop: each step samples
//! `batch_size` distinct nodes, one uniformly chosen neighbor per node,
//! computes every pair update against the pre-step estimates and only then
//! applies them. The neighbor estimate is always treated as a constant.
//!
//! * [`So3Rule`]: `R_i <- R_i · exp(γ · log(R_iᵀ · R_ij · R_j))`.
//! * [`QuaternionRule`]: ambient gradient step on `1 - <q_i, q_ij ⊗ q_j>²`,
//!   followed by renormalization.
//! * [`MrpRule`]: step toward the MRP projection of `q_ij ⊗ q_j`, choosing the
//!   antipode whose projection is closer to the current estimate, with the
//!   step length capped at `η`.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector4;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envgraph::RotationEnvironment;
use crate::error::ConfigError;
use crate::metrics::{self, TraceRecord};
use crate::rotmath::{
    exp_so3, log_so3, matrix_to_quat, mrp_project, mrp_unproject, sample_uniform_rotation,
    MrpVector, RotationMatrix, TangentVector, UnitQuaternion, Vec3,
};

// ChaCha stream ids. Environment generation uses the default stream 0.
const SAMPLING_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    So3,
    Quaternion,
    Mrp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::So3, Algorithm::Quaternion, Algorithm::Mrp];

    /// Short name used on the command line and in file names.
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::So3 => "so3",
            Algorithm::Quaternion => "quat",
            Algorithm::Mrp => "mrp",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "so3" => Ok(Algorithm::So3),
            "quat" | "quaternion" => Ok(Algorithm::Quaternion),
            "mrp" => Ok(Algorithm::Mrp),
            other => Err(format!(
                "unknown algorithm '{other}' (expected so3, quat or mrp)"
            )),
        }
    }
}

/// Per-node estimates in one parameterization.
#[derive(Clone, Debug, PartialEq)]
pub enum EstimateSet {
    So3(Vec<RotationMatrix>),
    Quaternion(Vec<UnitQuaternion>),
    Mrp(Vec<MrpVector>),
}

/// MRP of a quaternion using whichever antipode has `rho >= 0`, which always
/// lies inside the closed unit ball.
fn mrp_of(q: &UnitQuaternion) -> MrpVector {
    let q = if q.rho < 0.0 { -*q } else { *q };
    mrp_project(&q).expect("rho >= 0 is never at the south pole")
}

impl EstimateSet {
    pub fn identity(n: usize, algorithm: Algorithm) -> Self {
        Self::from_quaternions(&vec![UnitQuaternion::identity(); n], algorithm)
    }

    /// Haar-uniform estimates. Drawn from a dedicated ChaCha stream so that
    /// reusing an environment's seed does not reproduce its ground truth.
    pub fn haar_random(n: usize, seed: u64, algorithm: Algorithm) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let quats: Vec<_> = (0..n).map(|_| sample_uniform_rotation(&mut rng)).collect();
        Self::from_quaternions(&quats, algorithm)
    }

    pub fn from_quaternions(quats: &[UnitQuaternion], algorithm: Algorithm) -> Self {
        match algorithm {
            Algorithm::So3 => Self::So3(quats.iter().map(UnitQuaternion::to_matrix).collect()),
            Algorithm::Quaternion => Self::Quaternion(quats.to_vec()),
            Algorithm::Mrp => Self::Mrp(quats.iter().map(mrp_of).collect()),
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            Self::So3(_) => Algorithm::So3,
            Self::Quaternion(_) => Algorithm::Quaternion,
            Self::Mrp(_) => Algorithm::Mrp,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::So3(v) => v.len(),
            Self::Quaternion(v) => v.len(),
            Self::Mrp(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_quaternions(&self) -> Vec<UnitQuaternion> {
        match self {
            Self::So3(v) => v.iter().map(matrix_to_quat).collect(),
            Self::Quaternion(v) => v.clone(),
            Self::Mrp(v) => v.iter().map(mrp_unproject).collect(),
        }
    }

    pub fn to_matrices(&self) -> Vec<RotationMatrix> {
        match self {
            Self::So3(v) => v.clone(),
            Self::Quaternion(v) => v.iter().map(UnitQuaternion::to_matrix).collect(),
            Self::Mrp(v) => v.iter().map(|p| mrp_unproject(p).to_matrix()).collect(),
        }
    }

    /// Re-expresses the same rotations in another parameterization. MRP
    /// targets use the `rho >= 0` antipode.
    pub fn convert(&self, algorithm: Algorithm) -> Self {
        if algorithm == self.algorithm() {
            return self.clone();
        }
        Self::from_quaternions(&self.to_quaternions(), algorithm)
    }

    /// Worst violation of the parameterization's validity constraint:
    /// orthonormality for matrices, unit norm for quaternions, and
    /// `0`/`inf` for finite/non-finite MRPs.
    pub fn invariant_error(&self) -> f64 {
        match self {
            Self::So3(v) => v
                .iter()
                .map(RotationMatrix::orthonormality_error)
                .fold(0.0, f64::max),
            Self::Quaternion(v) => v.iter().map(|q| (q.norm() - 1.0).abs()).fold(0.0, f64::max),
            Self::Mrp(v) => {
                if v.iter().all(MrpVector::is_finite) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Identity,
    HaarRandom(u64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    /// Learning rate.
    pub gamma: f64,
    /// Longest MRP-space step before scaling by `gamma`.
    pub eta: f64,
    pub batch_size: usize,
    pub max_iters: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub init: Init,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Mrp,
            gamma: 0.5,
            eta: 0.1,
            batch_size: 8,
            max_iters: 300_000,
            seed: 0,
            checkpoint_every: 1000,
            init: Init::HaarRandom(0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(ConfigError::Gamma(self.gamma));
        }
        if self.eta.is_nan() || self.eta <= 0.0 {
            return Err(ConfigError::Eta(self.eta));
        }
        if self.batch_size < 1 {
            return Err(ConfigError::BatchSize);
        }
        if self.checkpoint_every < 1 {
            return Err(ConfigError::CheckpointEvery);
        }
        Ok(())
    }
}

/// An update or descent direction in the space the algorithm works in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateVector {
    /// so(3) tangent vector at the estimate (right-multiplied).
    Tangent(Vec3),
    /// Ambient R⁴ quaternion step.
    Ambient(Vector4<f64>),
    /// Step in MRP space.
    Mrp(Vec3),
}

impl UpdateVector {
    pub fn norm(&self) -> f64 {
        match self {
            Self::Tangent(v) | Self::Mrp(v) => v.norm(),
            Self::Ambient(v) => v.norm(),
        }
    }
}

/// What one synchronous batch step did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub pairs: Vec<(usize, usize)>,
    pub losses: Vec<f64>,
    /// Update actually applied to each sampled node, after step scaling.
    pub updates: Vec<UpdateVector>,
}

impl StepReport {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// A per-pair update rule. New averaging methods plug into the shared batch
/// loop by implementing this.
pub trait UpdateRule {
    type Param: Copy;

    /// Loss of estimate `i` against neighbor `j` and the unscaled descent
    /// direction for `i`, with `j` held fixed.
    fn pair_update(
        &self,
        est_i: &Self::Param,
        est_j: &Self::Param,
        q_ij: &UnitQuaternion,
    ) -> (f64, UpdateVector);

    /// Moves `est` along `direction`; returns the update actually applied.
    fn apply(
        &self,
        est: &mut Self::Param,
        direction: &UpdateVector,
        cfg: &OptimizerConfig,
    ) -> UpdateVector;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct So3Rule;

#[derive(Clone, Copy, Debug, Default)]
pub struct QuaternionRule;

#[derive(Clone, Copy, Debug, Default)]
pub struct MrpRule;

/// `r_Δ = log(R_iᵀ · R_ij · R_j)`, which is also the descent direction.
pub fn so3_residual(
    est_i: &RotationMatrix,
    est_j: &RotationMatrix,
    q_ij: &UnitQuaternion,
) -> TangentVector {
    log_so3(&RotationMatrix(
        est_i.0.transpose() * q_ij.to_matrix().0 * est_j.0,
    ))
}

impl UpdateRule for So3Rule {
    type Param = RotationMatrix;

    fn pair_update(
        &self,
        est_i: &RotationMatrix,
        est_j: &RotationMatrix,
        q_ij: &UnitQuaternion,
    ) -> (f64, UpdateVector) {
        let r = so3_residual(est_i, est_j, q_ij).0;
        (r.norm_squared(), UpdateVector::Tangent(r))
    }

    fn apply(
        &self,
        est: &mut RotationMatrix,
        direction: &UpdateVector,
        cfg: &OptimizerConfig,
    ) -> UpdateVector {
        let UpdateVector::Tangent(r) = direction else {
            unreachable!("SO(3) rule produced a non-tangent update")
        };
        let step = r * cfg.gamma;
        *est = *est * exp_so3(&TangentVector(step));
        UpdateVector::Tangent(step)
    }
}

/// `q̃_i = q_ij ⊗ q̂_j`, where estimate `i` should be relative to `j`.
pub fn target_quaternion(q_ij: &UnitQuaternion, qhat_j: &UnitQuaternion) -> UnitQuaternion {
    *q_ij * *qhat_j
}

/// `1 - <q̂_i, q̃>²`.
pub fn quaternion_loss(qhat_i: &UnitQuaternion, target: &UnitQuaternion) -> f64 {
    let d = qhat_i.dot(target);
    1.0 - d * d
}

/// Ambient gradient of [`quaternion_loss`] with respect to `q̂_i`:
/// `-2 <q̂_i, q̃> q̃`.
pub fn quaternion_gradient(qhat_i: &UnitQuaternion, target: &UnitQuaternion) -> Vector4<f64> {
    target.as_vector4() * (-2.0 * qhat_i.dot(target))
}

impl UpdateRule for QuaternionRule {
    type Param = UnitQuaternion;

    fn pair_update(
        &self,
        est_i: &UnitQuaternion,
        est_j: &UnitQuaternion,
        q_ij: &UnitQuaternion,
    ) -> (f64, UpdateVector) {
        let target = target_quaternion(q_ij, est_j);
        (
            quaternion_loss(est_i, &target),
            UpdateVector::Ambient(-quaternion_gradient(est_i, &target)),
        )
    }

    fn apply(
        &self,
        est: &mut UnitQuaternion,
        direction: &UpdateVector,
        cfg: &OptimizerConfig,
    ) -> UpdateVector {
        let UpdateVector::Ambient(d) = direction else {
            unreachable!("quaternion rule produced a non-ambient update")
        };
        let step = d * cfg.gamma;
        *est = UnitQuaternion::from_vector4(&(est.as_vector4() + step));
        UpdateVector::Ambient(step)
    }
}

/// Which sign of the target quaternion the MRP loss was measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Antipode {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MrpPairLoss {
    /// `min(loss_plus, loss_minus)`.
    pub loss: f64,
    /// `ψ̂_i - φ(±q̃_i)` for the selected sign. The true gradient of `loss`
    /// is twice this; the factor is absorbed by the learning rate.
    pub grad: MrpVector,
    pub antipode: Antipode,
    /// `|ψ̂_i - φ(q̃_i)|²`, infinite if `q̃_i` sits on the south pole.
    pub loss_plus: f64,
    /// `|ψ̂_i - φ(-q̃_i)|²`, infinite if `-q̃_i` sits on the south pole.
    pub loss_minus: f64,
}

/// MRP pair loss and gradient with nearest-antipode selection.
pub fn mrp_loss_and_grad(
    psi_i: &MrpVector,
    psi_j: &MrpVector,
    q_ij: &UnitQuaternion,
) -> MrpPairLoss {
    let target = target_quaternion(q_ij, &mrp_unproject(psi_j));
    let plus = mrp_project(&target).ok().map(|p| psi_i.0 - p.0);
    let minus = mrp_project(&-target).ok().map(|p| psi_i.0 - p.0);
    let loss_plus = plus.map_or(f64::INFINITY, |d| d.norm_squared());
    let loss_minus = minus.map_or(f64::INFINITY, |d| d.norm_squared());
    let (grad, antipode) = if loss_plus < loss_minus {
        (plus, Antipode::Positive)
    } else {
        (minus, Antipode::Negative)
    };
    MrpPairLoss {
        loss: loss_plus.min(loss_minus),
        grad: MrpVector(grad.expect("at most one antipode is on the south pole")),
        antipode,
        loss_plus,
        loss_minus,
    }
}

/// Rescales `v` to length `max_norm` when it is longer.
pub fn clamp_norm(v: Vec3, max_norm: f64) -> Vec3 {
    let n = v.norm();
    if n > max_norm {
        v * (max_norm / n)
    } else {
        v
    }
}

impl UpdateRule for MrpRule {
    type Param = MrpVector;

    fn pair_update(
        &self,
        est_i: &MrpVector,
        est_j: &MrpVector,
        q_ij: &UnitQuaternion,
    ) -> (f64, UpdateVector) {
        let pair = mrp_loss_and_grad(est_i, est_j, q_ij);
        (pair.loss, UpdateVector::Mrp(-pair.grad.0))
    }

    fn apply(
        &self,
        est: &mut MrpVector,
        direction: &UpdateVector,
        cfg: &OptimizerConfig,
    ) -> UpdateVector {
        let UpdateVector::Mrp(d) = direction else {
            unreachable!("MRP rule produced a non-MRP update")
        };
        let step = clamp_norm(*d, cfg.eta) * cfg.gamma;
        est.0 += step;
        UpdateVector::Mrp(step)
    }
}

/// One synchronous batch step of `rule` over `values`.
///
/// Samples `min(batch_size, N)` distinct nodes, then one neighbor each.
pub fn batch_step<U, R>(
    rule: &U,
    values: &mut [U::Param],
    env: &RotationEnvironment,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> StepReport
where
    U: UpdateRule,
    R: Rng + ?Sized,
{
    let n = values.len();
    assert_eq!(
        n,
        env.n_nodes(),
        "estimate count does not match environment"
    );
    let batch = cfg.batch_size.min(n);
    let nodes = index::sample(rng, n, batch);

    let mut pairs = Vec::with_capacity(batch);
    let mut losses = Vec::with_capacity(batch);
    let mut directions = Vec::with_capacity(batch);
    for i in nodes.iter() {
        let neighbors = env.neighbors(i);
        let pick = &neighbors[rng.random_range(0..neighbors.len())];
        let (loss, dir) = rule.pair_update(&values[i], &values[pick.node], &env.relative(pick));
        pairs.push((i, pick.node));
        losses.push(loss);
        directions.push(dir);
    }
    let updates = pairs
        .iter()
        .zip(&directions)
        .map(|(&(i, _), dir)| rule.apply(&mut values[i], dir, cfg))
        .collect();
    StepReport {
        pairs,
        losses,
        updates,
    }
}

pub fn so3_step<R: Rng + ?Sized>(
    estimates: &mut [RotationMatrix],
    env: &RotationEnvironment,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> StepReport {
    batch_step(&So3Rule, estimates, env, cfg, rng)
}

pub fn quaternion_step<R: Rng + ?Sized>(
    estimates: &mut [UnitQuaternion],
    env: &RotationEnvironment,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> StepReport {
    batch_step(&QuaternionRule, estimates, env, cfg, rng)
}

pub fn mrp_step<R: Rng + ?Sized>(
    estimates: &mut [MrpVector],
    env: &RotationEnvironment,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> StepReport {
    batch_step(&MrpRule, estimates, env, cfg, rng)
}

/// Steps `estimates` with the rule matching its parameterization.
pub fn step<R: Rng + ?Sized>(
    estimates: &mut EstimateSet,
    env: &RotationEnvironment,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> StepReport {
    match estimates {
        EstimateSet::So3(v) => so3_step(v, env, cfg, rng),
        EstimateSet::Quaternion(v) => quaternion_step(v, env, cfg, rng),
        EstimateSet::Mrp(v) => mrp_step(v, env, cfg, rng),
    }
}

fn mean_direction<U: UpdateRule>(
    rule: &U,
    values: &[U::Param],
    env: &RotationEnvironment,
    i: usize,
) -> UpdateVector {
    let neighbors = env.neighbors(i);
    let k = neighbors.len() as f64;
    let dirs = neighbors.iter().map(|nb| {
        rule.pair_update(&values[i], &values[nb.node], &env.relative(nb))
            .1
    });
    let mut acc: Option<UpdateVector> = None;
    for d in dirs {
        acc = Some(match (acc, d) {
            (None, d) => d,
            (Some(UpdateVector::Tangent(a)), UpdateVector::Tangent(b)) => {
                UpdateVector::Tangent(a + b)
            }
            (Some(UpdateVector::Mrp(a)), UpdateVector::Mrp(b)) => UpdateVector::Mrp(a + b),
            (Some(UpdateVector::Ambient(a)), UpdateVector::Ambient(b)) => {
                UpdateVector::Ambient(a + b)
            }
            _ => unreachable!("mixed update kinds from one rule"),
        });
    }
    match acc.expect("node has at least one neighbor") {
        UpdateVector::Tangent(v) => UpdateVector::Tangent(v / k),
        UpdateVector::Mrp(v) => UpdateVector::Mrp(v / k),
        UpdateVector::Ambient(v) => UpdateVector::Ambient(v / k),
    }
}

/// Expected descent direction of node `i` under uniform neighbor sampling,
/// before learning-rate scaling and before the MRP step cap. Estimates are
/// converted into `algorithm`'s parameterization first.
pub fn expected_update(
    estimates: &EstimateSet,
    env: &RotationEnvironment,
    i: usize,
    algorithm: Algorithm,
) -> UpdateVector {
    match estimates.convert(algorithm) {
        EstimateSet::So3(v) => mean_direction(&So3Rule, &v, env, i),
        EstimateSet::Quaternion(v) => mean_direction(&QuaternionRule, &v, env, i),
        EstimateSet::Mrp(v) => mean_direction(&MrpRule, &v, env, i),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub estimates: EstimateSet,
    pub trace: Vec<TraceRecord>,
}

/// Runs `cfg.max_iters` batch steps, recording a checkpoint at step 0, every
/// `checkpoint_every` steps and at the final step.
pub fn run_averaging(
    env: &RotationEnvironment,
    cfg: &OptimizerConfig,
) -> Result<RunResult, ConfigError> {
    cfg.validate()?;
    let n = env.n_nodes();
    let mut estimates = match cfg.init {
        Init::Identity => EstimateSet::identity(n, cfg.algorithm),
        Init::HaarRandom(seed) => EstimateSet::haar_random(n, seed, cfg.algorithm),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SAMPLING_STREAM);

    let mut trace = vec![metrics::snapshot(0, &estimates.to_matrices(), env)];
    for s in 1..=cfg.max_iters {
        step(&mut estimates, env, cfg, &mut rng);
        if s % cfg.checkpoint_every == 0 || s == cfg.max_iters {
            trace.push(metrics::snapshot(s, &estimates.to_matrices(), env));
        }
    }
    Ok(RunResult { estimates, trace })
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::envgraph::{generate_uniform_env, Edge, GeneratorConfig};
    use proptest::prelude::*;

    fn quat() -> impl Strategy<Value = UnitQuaternion> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("away from zero", |c| {
                c.iter().map(|x| x * x).sum::<f64>() > 1e-2
            })
            .prop_map(|c| UnitQuaternion::from_wxyz(c[0], c[1], c[2], c[3]))
    }

    /// MRP point of either antipode, kept within a moderate radius.
    fn mrp() -> impl Strategy<Value = MrpVector> {
        (quat(), any::<bool>()).prop_filter_map("bounded", |(q, flip)| {
            let p = mrp_project(&if flip { -q } else { q }).ok()?;
            (p.norm() < 20.0).then_some(p)
        })
    }

    fn mrp_loss(psi_i: Vec3, psi_j: &MrpVector, q_ij: &UnitQuaternion, antipode: Antipode) -> f64 {
        let pair = mrp_loss_and_grad(&MrpVector(psi_i), psi_j, q_ij);
        match antipode {
            Antipode::Positive => pair.loss_plus,
            Antipode::Negative => pair.loss_minus,
        }
    }

    const H: f64 = 1e-6;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn mrp_gradient_matches_finite_differences(psi_i in mrp(), psi_j in mrp(), q_ij in quat()) {
            let pair = mrp_loss_and_grad(&psi_i, &psi_j, &q_ij);
            let (lp, lm) = (pair.loss_plus, pair.loss_minus);
            prop_assume!(lp.is_finite() && lm.is_finite());
            prop_assume!((lp - lm).abs() > 1e-3 * (lp + lm));
            prop_assume!(pair.grad.norm() > 1e-3);
            let mut fd = Vec3::zeros();
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = H;
                fd[k] = (mrp_loss(psi_i.0 + e, &psi_j, &q_ij, pair.antipode)
                    - mrp_loss(psi_i.0 - e, &psi_j, &q_ij, pair.antipode))
                    / (2.0 * H);
            }
            let analytic = pair.grad.0 * 2.0;
            prop_assert!((fd - analytic).norm() <= 1e-5 * analytic.norm());
        }

        #[test]
        fn quaternion_gradient_matches_finite_differences(q_i in quat(), target in quat()) {
            prop_assume!(q_i.dot(&target).abs() > 1e-3);
            let f = |v: Vector4<f64>| 1.0 - v.dot(&target.as_vector4()).powi(2);
            let x = q_i.as_vector4();
            let mut fd = Vector4::zeros();
            for k in 0..4 {
                let mut e = Vector4::zeros();
                e[k] = H;
                fd[k] = (f(x + e) - f(x - e)) / (2.0 * H);
            }
            let analytic = quaternion_gradient(&q_i, &target);
            prop_assert!((fd - analytic).norm() <= 1e-5 * analytic.norm());
        }

        #[test]
        fn small_steps_do_not_increase_pair_loss(qi in quat(), qj in quat(), q_ij in quat()) {
            let cfg = OptimizerConfig { gamma: 1e-3, ..Default::default() };

            let (ri, rj) = (qi.to_matrix(), qj.to_matrix());
            let (before, dir) = So3Rule.pair_update(&ri, &rj, &q_ij);
            let mut moved = ri;
            So3Rule.apply(&mut moved, &dir, &cfg);
            prop_assert!(So3Rule.pair_update(&moved, &rj, &q_ij).0 <= before + 1e-12);

            let (before, dir) = QuaternionRule.pair_update(&qi, &qj, &q_ij);
            let mut moved = qi;
            QuaternionRule.apply(&mut moved, &dir, &cfg);
            prop_assert!(QuaternionRule.pair_update(&moved, &qj, &q_ij).0 <= before + 1e-12);

            let (pi, pj) = (mrp_of(&qi), mrp_of(&qj));
            let pair = mrp_loss_and_grad(&pi, &pj, &q_ij);
            let (_, dir) = MrpRule.pair_update(&pi, &pj, &q_ij);
            let mut moved = pi;
            MrpRule.apply(&mut moved, &dir, &cfg);
            let after = mrp_loss(moved.0, &pj, &q_ij, pair.antipode);
            prop_assert!(after <= pair.loss + 1e-12);
        }

        #[test]
        fn mrp_applied_step_respects_the_cap(
            psi_i in mrp(), psi_j in mrp(), q_ij in quat(),
            gamma in 1e-3f64..2.0, eta in 1e-3f64..1.0,
        ) {
            let cfg = OptimizerConfig { gamma, eta, ..Default::default() };
            let (_, dir) = MrpRule.pair_update(&psi_i, &psi_j, &q_ij);
            let mut est = psi_i;
            let applied = MrpRule.apply(&mut est, &dir, &cfg);
            prop_assert!(applied.norm() <= gamma * eta * (1.0 + 1e-12));
        }

        #[test]
        fn antipode_directions_are_antiparallel_only_through_the_origin(
            psi_j in mrp(), q_ij in quat(), t in 0.05f64..0.95,
        ) {
            let target = target_quaternion(&q_ij, &mrp_unproject(&psi_j));
            let (Ok(a), Ok(b)) = (mrp_project(&target), mrp_project(&-target)) else {
                return Ok(());
            };
            // Any point on the segment between the two projections sits on
            // the line through the origin and sees them in opposite directions.
            let on_segment = a.0 * (1.0 - t) + b.0 * t;
            let da = a.0 - on_segment;
            let db = b.0 - on_segment;
            prop_assert!(da.normalize().dot(&db.normalize()) < -1.0 + 1e-9);
            // A point off that line does not.
            let off = on_segment + a.0.cross(&Vec3::new(0.3, -0.2, 0.9)).normalize() * 0.1;
            prop_assume!(a.0.cross(&Vec3::new(0.3, -0.2, 0.9)).norm() > 1e-3);
            let cos = (a.0 - off).normalize().dot(&(b.0 - off).normalize());
            prop_assert!(cos > -1.0 + 1e-12);
        }
    }

    fn rotated_env(env: &RotationEnvironment, s: &UnitQuaternion) -> RotationEnvironment {
        let gt: Vec<UnitQuaternion> = env
            .ground_truth()
            .unwrap()
            .iter()
            .map(|q| *s * *q)
            .collect();
        let edges = env
            .edges()
            .iter()
            .map(|e| Edge {
                i: e.i,
                j: e.j,
                rel: gt[e.i] * gt[e.j].conjugate(),
            })
            .collect();
        RotationEnvironment::new(env.n_nodes(), Some(gt), edges).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn so3_and_quaternion_steps_commute_with_a_global_rotation(
            env_seed in 0u64..1000, step_seed in any::<u64>(), s in quat(),
        ) {
            let env = generate_uniform_env(&GeneratorConfig {
                n_nodes: 12, seed: env_seed, ..Default::default()
            }).unwrap();
            let moved_env = rotated_env(&env, &s);
            for algorithm in [Algorithm::So3, Algorithm::Quaternion] {
                let cfg = OptimizerConfig { algorithm, batch_size: 5, ..Default::default() };
                let mut plain = EstimateSet::haar_random(12, env_seed + 7, algorithm);
                let start: Vec<UnitQuaternion> =
                    plain.to_quaternions().iter().map(|q| s * *q).collect();
                let mut rotated = EstimateSet::from_quaternions(&start, algorithm);

                let a = step(&mut plain, &env, &cfg, &mut ChaCha8Rng::seed_from_u64(step_seed));
                let b = step(&mut rotated, &moved_env, &cfg, &mut ChaCha8Rng::seed_from_u64(step_seed));
                prop_assert_eq!(a.pairs, b.pairs);
                let expected = plain.to_matrices();
                for (x, y) in expected.iter().zip(rotated.to_matrices()) {
                    let sx = s.to_matrix() * *x;
                    prop_assert!((sx.0 - y.0).abs().max() < 1e-9);
                }
            }
        }
    }
}
