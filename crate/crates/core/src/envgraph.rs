//! Rotation-averaging problem instances: nodes, relative-rotation edges and
//! the neighborhood structure the stochastic solvers sample from.
//!
//! Edges are stored once, directed `i -> j`, carrying `q_ij` with
//! `R_i = R(q_ij) · R_j`. Each endpoint lists the edge in its neighborhood; the
//! `j` side sees the conjugate.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::averaging::EstimateSet;
use crate::error::EnvError;
use crate::rotmath::{
    exp_so3, geodesic_distance, matrix_to_quat, sample_uniform_rotation, RotationMatrix,
    TangentVector, UnitQuaternion, Vec3,
};

/// Number of attempts `generate_uniform_env` makes before giving up on
/// finding a connected neighborhood graph.
pub const MAX_GENERATION_ATTEMPTS: usize = 100;

const SEED_MIX: u64 = 0x9E37_79B9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    /// `q_ij`, mapping `R_j` onto `R_i`.
    pub rel: UnitQuaternion,
}

/// One entry of a node's neighborhood.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeighborRef {
    pub node: usize,
    pub edge: usize,
    /// The owning node is the stored edge's `j`, so the relative rotation is
    /// the conjugate of the stored one.
    pub reversed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotationEnvironment {
    n_nodes: usize,
    ground_truth: Option<Vec<UnitQuaternion>>,
    gt_matrices: Option<Vec<RotationMatrix>>,
    edges: Vec<Edge>,
    neighborhoods: Vec<Vec<NeighborRef>>,
    source: Option<String>,
}

impl RotationEnvironment {
    /// Validates endpoints and connectivity and builds the neighborhoods.
    pub fn new(
        n_nodes: usize,
        ground_truth: Option<Vec<UnitQuaternion>>,
        edges: Vec<Edge>,
    ) -> Result<Self, EnvError> {
        if n_nodes < 2 {
            return Err(EnvError::InvalidConfig(format!(
                "an environment needs at least 2 nodes, got {n_nodes}"
            )));
        }
        if let Some(gt) = &ground_truth {
            if gt.len() != n_nodes {
                return Err(EnvError::GroundTruthLength {
                    expected: n_nodes,
                    got: gt.len(),
                });
            }
        }
        let mut neighborhoods = vec![Vec::new(); n_nodes];
        for (index, e) in edges.iter().enumerate() {
            if e.i >= n_nodes || e.j >= n_nodes || e.i == e.j {
                return Err(EnvError::InvalidEdge {
                    index,
                    i: e.i,
                    j: e.j,
                    n_nodes,
                });
            }
            neighborhoods[e.i].push(NeighborRef {
                node: e.j,
                edge: index,
                reversed: false,
            });
            neighborhoods[e.j].push(NeighborRef {
                node: e.i,
                edge: index,
                reversed: true,
            });
        }
        let components = count_components(n_nodes, edges.iter().map(|e| (e.i, e.j)));
        if components != 1 {
            return Err(EnvError::Disconnected { components });
        }
        let gt_matrices = ground_truth
            .as_ref()
            .map(|gt| gt.iter().map(UnitQuaternion::to_matrix).collect());
        Ok(Self {
            n_nodes,
            ground_truth,
            gt_matrices,
            edges,
            neighborhoods,
            source: None,
        })
    }

    /// Attaches a free-form provenance note (e.g. where ground truth came from).
    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    pub fn ground_truth(&self) -> Option<&[UnitQuaternion]> {
        self.ground_truth.as_deref()
    }

    pub fn ground_truth_matrices(&self) -> Option<&[RotationMatrix]> {
        self.gt_matrices.as_deref()
    }

    pub fn neighbors(&self, i: usize) -> &[NeighborRef] {
        &self.neighborhoods[i]
    }

    /// Relative rotation `q_ij` for a neighbor of `i`, oriented so that
    /// `R_i = R(q_ij) · R_j`.
    pub fn relative(&self, n: &NeighborRef) -> UnitQuaternion {
        let rel = self.edges[n.edge].rel;
        if n.reversed {
            rel.conjugate()
        } else {
            rel
        }
    }
}

/// Neighbors of `i` with correctly oriented relative quaternions.
pub fn neighborhood_of(env: &RotationEnvironment, i: usize) -> Vec<(usize, UnitQuaternion)> {
    env.neighbors(i)
        .iter()
        .map(|n| (n.node, env.relative(n)))
        .collect()
}

/// Union-find component count over an undirected edge list.
pub(crate) fn count_components(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> usize {
    let labels = component_labels(n, edges);
    labels.iter().collect::<BTreeSet<_>>().len()
}

/// Component representative for every node.
pub(crate) fn component_labels(
    n: usize,
    edges: impl IntoIterator<Item = (usize, usize)>,
) -> Vec<usize> {
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut parent: Vec<usize> = (0..n).collect();
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..n).map(|x| find(&mut parent, x)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NeighborhoodMode {
    /// The `k` geodesically closest rotations, symmetrized by union.
    Knn,
    /// All rotations closer than the given angle in radians.
    Epsilon(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_nodes: usize,
    pub k_neighbors: usize,
    pub seed: u64,
    pub neighborhood_mode: NeighborhoodMode,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_nodes: 100,
            k_neighbors: 3,
            seed: 0,
            neighborhood_mode: NeighborhoodMode::Knn,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n_nodes < 2 {
            return Err(EnvError::InvalidConfig(format!(
                "n_nodes must be at least 2, got {}",
                self.n_nodes
            )));
        }
        if self.k_neighbors < 1 {
            return Err(EnvError::InvalidConfig(
                "k_neighbors must be at least 1".into(),
            ));
        }
        if let NeighborhoodMode::Epsilon(eps) = self.neighborhood_mode {
            if eps.is_nan() || eps <= 0.0 {
                return Err(EnvError::InvalidConfig(format!(
                    "epsilon must be positive, got {eps}"
                )));
            }
        }
        Ok(())
    }
}

fn attempt_seed(seed: u64, attempt: usize) -> u64 {
    if attempt == 0 {
        seed
    } else {
        seed.wrapping_mul(SEED_MIX).wrapping_add(attempt as u64)
    }
}

/// Indices of the `k` nodes closest to `i` (ties broken by index).
pub(crate) fn directed_knn(distances: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..distances.len()).filter(|&m| m != i).collect();
    others.sort_by(|&a, &b| distances[i][a].total_cmp(&distances[i][b]).then(a.cmp(&b)));
    others.truncate(k);
    others
}

/// Haar-uniform ground truth with exact relative rotations on a kNN or
/// epsilon-ball neighborhood graph. Regenerates from a derived seed until the
/// graph is connected.
pub fn generate_uniform_env(cfg: &GeneratorConfig) -> Result<RotationEnvironment, EnvError> {
    cfg.validate()?;
    let n = cfg.n_nodes;
    for attempt in 0..MAX_GENERATION_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(attempt_seed(cfg.seed, attempt));
        let gt: Vec<UnitQuaternion> = (0..n).map(|_| sample_uniform_rotation(&mut rng)).collect();
        let mats: Vec<RotationMatrix> = gt.iter().map(UnitQuaternion::to_matrix).collect();
        let distances: Vec<Vec<f64>> = mats
            .iter()
            .map(|a| mats.iter().map(|b| geodesic_distance(a, b)).collect())
            .collect();

        let mut pairs = BTreeSet::new();
        match cfg.neighborhood_mode {
            NeighborhoodMode::Knn => {
                for i in 0..n {
                    for j in directed_knn(&distances, i, cfg.k_neighbors) {
                        pairs.insert((i.min(j), i.max(j)));
                    }
                }
            }
            NeighborhoodMode::Epsilon(eps) => {
                for (i, row) in distances.iter().enumerate() {
                    for (j, &d) in row.iter().enumerate().skip(i + 1) {
                        if d < eps {
                            pairs.insert((i, j));
                        }
                    }
                }
            }
        }
        if count_components(n, pairs.iter().copied()) != 1 {
            log::debug!("seed {} attempt {attempt}: disconnected graph", cfg.seed);
            continue;
        }
        let edges = pairs
            .into_iter()
            .map(|(i, j)| Edge {
                i,
                j,
                rel: gt[i] * gt[j].conjugate(),
            })
            .collect();
        return RotationEnvironment::new(n, Some(gt), edges);
    }
    Err(EnvError::ConnectivityFailure {
        attempts: MAX_GENERATION_ATTEMPTS,
    })
}

/// Ground truth `R_i = exp((offset - i·2π/n)·ω)`, evenly spaced about `omega`.
pub fn evenly_spaced_about_axis(omega: &Vec3, offset: f64, n: usize) -> Vec<RotationMatrix> {
    let axis = omega.normalize();
    (0..n)
        .map(|i| exp_so3(&TangentVector(axis * (offset - i as f64 * TAU / n as f64))))
        .collect()
}

/// Fully connected environment over `gt` paired with the estimates
/// `R̂_i = R_i · R0 · exp((θ0 + i·2π/n)·ω0)`.
///
/// With `R0 = I` and `gt = evenly_spaced_about_axis(ω0, -θ0, n)` every
/// estimate starts at the identity.
pub fn build_critical_env(
    omega0: &Vec3,
    theta0: f64,
    r0: &RotationMatrix,
    gt: &[RotationMatrix],
) -> Result<(RotationEnvironment, EstimateSet), EnvError> {
    let n = gt.len();
    let axis = omega0.normalize();
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push(Edge {
                i,
                j,
                rel: matrix_to_quat(&(gt[i] * gt[j].transpose())),
            });
        }
    }
    let gt_quats = gt.iter().map(matrix_to_quat).collect();
    let env = RotationEnvironment::new(n, Some(gt_quats), edges)?;
    let estimates = gt
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let spin = exp_so3(&TangentVector(axis * (theta0 + i as f64 * TAU / n as f64)));
            *r * *r0 * spin
        })
        .collect();
    Ok((env, EstimateSet::So3(estimates)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotmath::Mat3;

    fn max_diff(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
        (a.0 - b.0).abs().max()
    }

    fn assert_exact_env(env: &RotationEnvironment) {
        let gt = env.ground_truth_matrices().unwrap();
        for i in 0..env.n_nodes() {
            for (j, q) in neighborhood_of(env, i) {
                assert!(max_diff(&(q.to_matrix() * gt[j]), &gt[i]) < 1e-9);
                let back = neighborhood_of(env, j)
                    .into_iter()
                    .find(|&(m, _)| m == i)
                    .expect("neighborhoods are symmetric");
                let conj = q.conjugate();
                let d = (back.1.as_vector4() - conj.as_vector4()).abs().max();
                assert!(d < 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig {
            n_nodes: 100,
            k_neighbors: 3,
            seed: 7,
            ..Default::default()
        };
        assert_eq!(
            generate_uniform_env(&cfg).unwrap(),
            generate_uniform_env(&cfg).unwrap()
        );
    }

    #[test]
    fn two_node_environment() {
        let cfg = GeneratorConfig {
            n_nodes: 2,
            k_neighbors: 1,
            seed: 3,
            ..Default::default()
        };
        let env = generate_uniform_env(&cfg).unwrap();
        assert_eq!(env.edges().len(), 1);
        let gt = env.ground_truth_matrices().unwrap();
        let e = env.edges()[0];
        let expected = gt[e.i] * gt[e.j].transpose();
        assert!(max_diff(&e.rel.to_matrix(), &expected) < 1e-12);
        assert_eq!(neighborhood_of(&env, 0).len(), 1);
        assert_eq!(neighborhood_of(&env, 1).len(), 1);
    }

    #[test]
    fn generated_envs_satisfy_edge_invariants() {
        for seed in 0..50 {
            let cfg = GeneratorConfig {
                n_nodes: 40,
                seed,
                ..Default::default()
            };
            let env = generate_uniform_env(&cfg).unwrap();
            assert_exact_env(&env);
            for e in env.edges() {
                assert!(e.i < env.n_nodes() && e.j < env.n_nodes() && e.i != e.j);
            }
        }
    }

    #[test]
    fn knn_neighbors_are_closest() {
        let cfg = GeneratorConfig {
            n_nodes: 60,
            seed: 5,
            ..Default::default()
        };
        let env = generate_uniform_env(&cfg).unwrap();
        let gt = env.ground_truth_matrices().unwrap();
        let distances: Vec<Vec<f64>> = gt
            .iter()
            .map(|a| gt.iter().map(|b| geodesic_distance(a, b)).collect())
            .collect();
        for i in 0..env.n_nodes() {
            let knn = directed_knn(&distances, i, 3);
            let worst_in = knn.iter().map(|&j| distances[i][j]).fold(0.0, f64::max);
            for m in (0..env.n_nodes()).filter(|m| *m != i && !knn.contains(m)) {
                assert!(worst_in <= distances[i][m]);
            }
            let listed: BTreeSet<usize> = env.neighbors(i).iter().map(|n| n.node).collect();
            assert!(knn.iter().all(|j| listed.contains(j)));
        }
    }

    #[test]
    fn epsilon_mode_connects_with_large_radius() {
        let cfg = GeneratorConfig {
            n_nodes: 30,
            seed: 1,
            neighborhood_mode: NeighborhoodMode::Epsilon(2.0),
            ..Default::default()
        };
        let env = generate_uniform_env(&cfg).unwrap();
        assert_exact_env(&env);
        let gt = env.ground_truth_matrices().unwrap();
        for e in env.edges() {
            assert!(geodesic_distance(&gt[e.i], &gt[e.j]) < 2.0);
        }
    }

    #[test]
    fn tiny_epsilon_fails_connectivity() {
        let cfg = GeneratorConfig {
            n_nodes: 30,
            seed: 1,
            neighborhood_mode: NeighborhoodMode::Epsilon(1e-6),
            ..Default::default()
        };
        assert_eq!(
            generate_uniform_env(&cfg),
            Err(EnvError::ConnectivityFailure { attempts: 100 })
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let one = GeneratorConfig {
            n_nodes: 1,
            ..Default::default()
        };
        assert!(matches!(
            generate_uniform_env(&one),
            Err(EnvError::InvalidConfig(_))
        ));
        let zero_k = GeneratorConfig {
            k_neighbors: 0,
            ..Default::default()
        };
        assert!(matches!(
            generate_uniform_env(&zero_k),
            Err(EnvError::InvalidConfig(_))
        ));
    }

    #[test]
    fn new_rejects_bad_edges_and_disconnection() {
        let q = UnitQuaternion::identity();
        let self_loop = vec![Edge { i: 0, j: 0, rel: q }];
        assert!(matches!(
            RotationEnvironment::new(2, None, self_loop),
            Err(EnvError::InvalidEdge { .. })
        ));
        let out_of_range = vec![Edge { i: 0, j: 5, rel: q }];
        assert!(matches!(
            RotationEnvironment::new(2, None, out_of_range),
            Err(EnvError::InvalidEdge { .. })
        ));
        let split = vec![Edge { i: 0, j: 1, rel: q }, Edge { i: 2, j: 3, rel: q }];
        assert_eq!(
            RotationEnvironment::new(4, None, split),
            Err(EnvError::Disconnected { components: 2 })
        );
    }

    #[test]
    fn critical_env_construction_identity() {
        let omega = Vec3::new(0.2, -0.7, 0.4);
        let theta0 = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt: Vec<RotationMatrix> = (0..3)
            .map(|_| sample_uniform_rotation(&mut rng).to_matrix())
            .collect();
        let r0 = sample_uniform_rotation(&mut rng).to_matrix();
        let (env, est) = build_critical_env(&omega, theta0, &r0, &gt).unwrap();
        assert_eq!(env.edges().len(), 3);
        assert_exact_env(&env);
        let est = est.to_matrices();
        for i in 0..3 {
            let offset = exp_so3(&TangentVector(
                omega.normalize() * (theta0 + i as f64 * TAU / 3.0),
            ));
            assert!(max_diff(&(gt[i].transpose() * est[i]), &(r0 * offset)) < 1e-12);
        }
    }

    #[test]
    fn evenly_spaced_fixture_puts_estimates_at_identity() {
        let omega = Vec3::new(1.0, 1.0, 0.0);
        let theta0 = 0.8;
        let gt = evenly_spaced_about_axis(&omega, -theta0, 3);
        let (_, est) =
            build_critical_env(&omega, theta0, &RotationMatrix::identity(), &gt).unwrap();
        for r in est.to_matrices() {
            assert!((r.0 - Mat3::identity()).abs().max() < 1e-12);
        }
    }
}
