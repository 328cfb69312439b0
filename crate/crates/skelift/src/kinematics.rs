//! Forward kinematics over a joint hierarchy and the bone-length-preserving
//! inverse-kinematics refinement of noisy joint trajectories.
//!
//! Joint positions are produced by composing per-joint local transforms down
//! a parent tree: each joint's accumulated transform is its parent's
//! transform times `[R(theta_j), offset_j; 0, 1]`, so bone lengths equal the
//! rest offset norms for every frame by construction.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::geometry::{rodrigues, rodrigues_jacobian, AxisAngle};
use crate::optim::{AdamConfig, AdamState};

/// Joint hierarchy with rest offsets in the parent frame. The adjacency
/// matrix and a parents-first traversal order are derived at construction
/// and kept consistent with the parent links by validation.
#[derive(Debug, Clone)]
pub struct KinematicChain {
    parents: Vec<Option<usize>>,
    rest_offsets: Vec<Vector3<f64>>,
    joint_names: Vec<String>,
    adjacency: Array2<f64>,
    topo: Vec<usize>,
    root: usize,
}

impl KinematicChain {
    pub fn new(
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<Vector3<f64>>,
        joint_names: Vec<String>,
    ) -> Result<Self> {
        let n = parents.len();
        if rest_offsets.len() != n || joint_names.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "parents {n}, offsets {}, names {}",
                rest_offsets.len(),
                joint_names.len()
            )));
        }
        if n == 0 {
            return Err(Error::ShapeMismatch("empty chain".into()));
        }
        let roots: Vec<usize> = (0..n).filter(|&j| parents[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        // Cycle check: every joint must reach the root in at most n hops.
        for mut j in 0..n {
            let mut hops = 0;
            while let Some(p) = parents[j] {
                if p >= n {
                    return Err(Error::IndexOutOfRange(format!("parent {p} of joint {j}")));
                }
                j = p;
                hops += 1;
                if hops > n {
                    return Err(Error::ShapeMismatch("parent graph contains a cycle".into()));
                }
            }
        }
        for (j, offset) in rest_offsets.iter().enumerate() {
            if j != root && offset.norm() <= 0.0 {
                return Err(Error::ShapeMismatch(format!(
                    "non-root joint {j} has a zero rest offset"
                )));
            }
            if !offset.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("rest offset of joint {j}")));
            }
        }

        let mut adjacency = Array2::zeros((n, n));
        for j in 0..n {
            if let Some(p) = parents[j] {
                adjacency[[j, p]] = 1.0;
                adjacency[[p, j]] = 1.0;
            }
        }

        // Parents-first order by repeated sweeps; terminates because the
        // graph is a tree.
        let mut topo = Vec::with_capacity(n);
        let mut placed = vec![false; n];
        while topo.len() < n {
            for j in 0..n {
                if !placed[j] && parents[j].map_or(true, |p| placed[p]) {
                    placed[j] = true;
                    topo.push(j);
                }
            }
        }

        Ok(KinematicChain {
            parents,
            rest_offsets,
            joint_names,
            adjacency,
            topo,
            root,
        })
    }

    /// Rebuilds a chain from stored parts, validating that the adjacency
    /// matrix is symmetric, zero on the diagonal, and consistent with the
    /// parent links.
    pub fn from_parts(
        parents: Vec<Option<usize>>,
        rest_offsets: Vec<Vector3<f64>>,
        joint_names: Vec<String>,
        adjacency: ArrayView2<f64>,
    ) -> Result<Self> {
        let chain = Self::new(parents, rest_offsets, joint_names)?;
        if adjacency.dim() != chain.adjacency.dim() {
            return Err(Error::ShapeMismatch("adjacency dimensions".into()));
        }
        for i in 0..chain.len() {
            for j in 0..chain.len() {
                if (adjacency[[i, j]] - chain.adjacency[[i, j]]).abs() > 0.0 {
                    return Err(Error::ShapeMismatch(format!(
                        "adjacency entry ({i},{j}) inconsistent with parent links"
                    )));
                }
            }
        }
        Ok(chain)
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn rest_offset(&self, joint: usize) -> Vector3<f64> {
        self.rest_offsets[joint]
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    /// Parents-first traversal order.
    pub fn traversal(&self) -> &[usize] {
        &self.topo
    }

    /// Same topology with different rest offsets.
    pub fn with_rest_offsets(&self, rest_offsets: Vec<Vector3<f64>>) -> Result<Self> {
        Self::new(self.parents.clone(), rest_offsets, self.joint_names.clone())
    }

    /// Bone lengths: norm of each non-root rest offset.
    pub fn bone_lengths(&self) -> Vec<f64> {
        (0..self.len())
            .map(|j| {
                if j == self.root {
                    0.0
                } else {
                    self.rest_offsets[j].norm()
                }
            })
            .collect()
    }
}

/// Per-frame, per-joint axis-angle parameters of the FK chain.
#[derive(Debug, Clone)]
pub struct PoseAngles {
    pub theta: Array3<f64>,
}

impl PoseAngles {
    pub fn zeros(frames: usize, joints: usize) -> Self {
        PoseAngles {
            theta: Array3::zeros((frames, joints, 3)),
        }
    }

    pub fn frames(&self) -> usize {
        self.theta.dim().0
    }

    pub fn joints(&self) -> usize {
        self.theta.dim().1
    }

    pub fn at(&self, frame: usize, joint: usize) -> AxisAngle {
        AxisAngle::new(
            self.theta[[frame, joint, 0]],
            self.theta[[frame, joint, 1]],
            self.theta[[frame, joint, 2]],
        )
    }
}

/// Settings for the IK refinement stage.
#[derive(Debug, Clone)]
pub struct IkConfig {
    pub smoothness_weight: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Relative objective improvement below which a 50-iteration window
    /// counts as stalled.
    pub convergence_tol: f64,
    pub adam_betas: (f64, f64),
    pub root_translation_free: bool,
}

impl Default for IkConfig {
    fn default() -> Self {
        IkConfig {
            smoothness_weight: 0.1,
            learning_rate: 0.05,
            max_iters: 2000,
            convergence_tol: 1e-7,
            adam_betas: (0.9, 0.999),
            root_translation_free: true,
        }
    }
}

fn check_shapes(chain: &KinematicChain, theta: &PoseAngles, root: ArrayView2<f64>) -> Result<()> {
    if theta.joints() != chain.len() {
        return Err(Error::ShapeMismatch(format!(
            "theta has {} joints, chain has {}",
            theta.joints(),
            chain.len()
        )));
    }
    if root.dim() != (theta.frames(), 3) {
        return Err(Error::ShapeMismatch(format!(
            "root path {:?}, expected ({}, 3)",
            root.dim(),
            theta.frames()
        )));
    }
    Ok(())
}

/// Joint positions from per-joint axis-angle rotations composed down the
/// parent tree. Bone lengths equal the rest-offset norms exactly for every
/// frame.
pub fn forward_kinematics(
    chain: &KinematicChain,
    theta: &PoseAngles,
    root_position: ArrayView2<f64>,
) -> Result<Array3<f64>> {
    check_shapes(chain, theta, root_position)?;
    let frames = theta.frames();
    let n = chain.len();
    let mut out = Array3::zeros((frames, n, 3));
    let mut acc_rot = vec![Matrix3::<f64>::identity(); n];
    let mut acc_pos = vec![Vector3::<f64>::zeros(); n];
    for t in 0..frames {
        for &j in chain.traversal() {
            let local = rodrigues(theta.at(t, j));
            match chain.parent(j) {
                None => {
                    acc_rot[j] = *local.matrix();
                    acc_pos[j] = Vector3::new(
                        root_position[[t, 0]],
                        root_position[[t, 1]],
                        root_position[[t, 2]],
                    );
                }
                Some(p) => {
                    acc_rot[j] = acc_rot[p] * local.matrix();
                    acc_pos[j] = acc_rot[p] * chain.rest_offset(j) + acc_pos[p];
                }
            }
            for k in 0..3 {
                out[[t, j, k]] = acc_pos[j][k];
            }
        }
    }
    Ok(out)
}

fn unit_or_zero(v: Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vector3::zeros()
    }
}

/// The IK objective: summed joint-to-target distances plus the
/// frame-to-frame smoothness term weighted by `lambda`.
pub fn ik_objective(
    chain: &KinematicChain,
    theta: &PoseAngles,
    root_position: ArrayView2<f64>,
    target: ArrayView3<f64>,
    lambda: f64,
) -> Result<f64> {
    let joints = forward_kinematics(chain, theta, root_position)?;
    if target.dim() != joints.dim() {
        return Err(Error::ShapeMismatch(format!(
            "target {:?}, fk output {:?}",
            target.dim(),
            joints.dim()
        )));
    }
    Ok(objective_of(&joints, &target) + lambda * smoothness_of(&joints))
}

fn objective_of(joints: &Array3<f64>, target: &ArrayView3<f64>) -> f64 {
    let (frames, n, _) = joints.dim();
    let mut total = 0.0;
    for t in 0..frames {
        for j in 0..n {
            let d = Vector3::new(
                joints[[t, j, 0]] - target[[t, j, 0]],
                joints[[t, j, 1]] - target[[t, j, 1]],
                joints[[t, j, 2]] - target[[t, j, 2]],
            );
            total += d.norm();
        }
    }
    total
}

fn smoothness_of(joints: &Array3<f64>) -> f64 {
    let (frames, n, _) = joints.dim();
    let mut total = 0.0;
    for t in 1..frames {
        for j in 0..n {
            let d = Vector3::new(
                joints[[t, j, 0]] - joints[[t - 1, j, 0]],
                joints[[t, j, 1]] - joints[[t - 1, j, 1]],
                joints[[t, j, 2]] - joints[[t - 1, j, 2]],
            );
            total += d.norm();
        }
    }
    total
}

/// Objective split into fit and smoothness parts plus the gradient with
/// respect to the pose angles and the root path. Reverse accumulation
/// through the FK recursion; the unsquared distance terms use the
/// subgradient 0 at coincident points.
pub fn ik_gradient(
    chain: &KinematicChain,
    theta: &PoseAngles,
    root_position: ArrayView2<f64>,
    target: ArrayView3<f64>,
    lambda: f64,
) -> Result<(f64, Array3<f64>, Array2<f64>)> {
    check_shapes(chain, theta, root_position)?;
    let frames = theta.frames();
    let n = chain.len();
    if target.dim() != (frames, n, 3) {
        return Err(Error::ShapeMismatch(format!(
            "target {:?}, expected ({frames}, {n}, 3)",
            target.dim()
        )));
    }

    // Forward pass, caching accumulated transforms and local rotations.
    let mut acc_rot = vec![Matrix3::<f64>::identity(); frames * n];
    let mut acc_pos = vec![Vector3::<f64>::zeros(); frames * n];
    let mut local_rot = vec![Matrix3::<f64>::identity(); frames * n];
    for t in 0..frames {
        for &j in chain.traversal() {
            let local = *rodrigues(theta.at(t, j)).matrix();
            local_rot[t * n + j] = local;
            match chain.parent(j) {
                None => {
                    acc_rot[t * n + j] = local;
                    acc_pos[t * n + j] = Vector3::new(
                        root_position[[t, 0]],
                        root_position[[t, 1]],
                        root_position[[t, 2]],
                    );
                }
                Some(p) => {
                    acc_rot[t * n + j] = acc_rot[t * n + p] * local;
                    acc_pos[t * n + j] = acc_rot[t * n + p] * chain.rest_offset(j) + acc_pos[t * n + p];
                }
            }
        }
    }

    let mut objective = 0.0;
    // d(objective)/d(position) for every frame and joint.
    let mut d_pos = vec![Vector3::<f64>::zeros(); frames * n];
    for t in 0..frames {
        for j in 0..n {
            let diff = acc_pos[t * n + j]
                - Vector3::new(target[[t, j, 0]], target[[t, j, 1]], target[[t, j, 2]]);
            objective += diff.norm();
            d_pos[t * n + j] += unit_or_zero(diff);
            if t >= 1 {
                let vel = acc_pos[t * n + j] - acc_pos[(t - 1) * n + j];
                objective += lambda * vel.norm();
                let u = unit_or_zero(vel) * lambda;
                d_pos[t * n + j] += u;
                d_pos[(t - 1) * n + j] -= u;
            }
        }
    }

    // Reverse sweep per frame.
    let mut d_theta = Array3::zeros((frames, n, 3));
    let mut d_root = Array2::zeros((frames, 3));
    let mut g_rot = vec![Matrix3::<f64>::zeros(); n];
    let mut g_pos = vec![Vector3::<f64>::zeros(); n];
    for t in 0..frames {
        for j in 0..n {
            g_rot[j] = Matrix3::zeros();
            g_pos[j] = d_pos[t * n + j];
        }
        for &j in chain.traversal().iter().rev() {
            let d_local = match chain.parent(j) {
                None => {
                    for k in 0..3 {
                        d_root[[t, k]] += g_pos[j][k];
                    }
                    g_rot[j]
                }
                Some(p) => {
                    // Push adjoints of this joint's accumulated transform
                    // into the parent's.
                    let gr = g_rot[j];
                    let gp = g_pos[j];
                    g_rot[p] += gr * local_rot[t * n + j].transpose();
                    g_rot[p] += gp * chain.rest_offset(j).transpose();
                    g_pos[p] += gp;
                    acc_rot[t * n + p].transpose() * gr
                }
            };
            let jac = rodrigues_jacobian(theta.at(t, j));
            for i in 0..3 {
                d_theta[[t, j, i]] = (d_local.component_mul(&jac[i])).sum();
            }
        }
    }
    Ok((objective, d_theta, d_root))
}

/// Output of the IK refinement: optimized pose angles, root path, the
/// refined joint trajectory, the chain whose rest offsets were taken from
/// the target's first frame, and the per-iteration objective trace.
#[derive(Debug, Clone)]
pub struct IkRefinement {
    pub angles: PoseAngles,
    pub root_path: Array2<f64>,
    pub joints: Array3<f64>,
    pub chain: KinematicChain,
    pub trace: Vec<f64>,
}

/// Refines a noisy joint trajectory into one with per-frame bone lengths
/// equal to the first frame's, by fitting FK pose angles with Adam.
///
/// Rest offsets are taken from the target's frame-1 bone vectors, so the
/// zero-angle initialization reproduces frame 1 exactly. The learning rate
/// is halved whenever a 50-iteration window brings no relative improvement
/// beyond `convergence_tol`; after ten halvings another stalled window stops
/// the loop.
pub fn refine_inverse_kinematics(
    chain: &KinematicChain,
    target: ArrayView3<f64>,
    config: &IkConfig,
) -> Result<IkRefinement> {
    let (frames, n, dim) = target.dim();
    if n != chain.len() || dim != 3 {
        return Err(Error::ShapeMismatch(format!(
            "target {:?} does not match chain of {} joints",
            target.dim(),
            chain.len()
        )));
    }
    if frames == 0 {
        return Err(Error::ShapeMismatch("empty target".into()));
    }

    // Frame-1 bone vectors become the rest offsets.
    let root = chain.root();
    let offsets: Vec<Vector3<f64>> = (0..n)
        .map(|j| match chain.parent(j) {
            None => Vector3::zeros(),
            Some(p) => Vector3::new(
                target[[0, j, 0]] - target[[0, p, 0]],
                target[[0, j, 1]] - target[[0, p, 1]],
                target[[0, j, 2]] - target[[0, p, 2]],
            ),
        })
        .collect();
    let fit_chain = chain.with_rest_offsets(offsets)?;

    let mut theta = PoseAngles::zeros(frames, n);
    let mut root_path = Array2::zeros((frames, 3));
    for t in 0..frames {
        for k in 0..3 {
            root_path[[t, k]] = target[[t, root, k]];
        }
    }

    let theta_len = frames * n * 3;
    let root_len = if config.root_translation_free {
        frames * 3
    } else {
        0
    };
    let mut adam = AdamState::new(theta_len + root_len);
    let mut adam_config = AdamConfig {
        learning_rate: config.learning_rate,
        beta1: config.adam_betas.0,
        beta2: config.adam_betas.1,
        epsilon: 1e-8,
        weight_decay: 0.0,
    };

    let mut trace = Vec::with_capacity(config.max_iters + 1);
    let mut best_obj = f64::INFINITY;
    let mut best_theta = theta.clone();
    let mut best_root = root_path.clone();
    let mut initial_obj = None;
    let mut stalled = 0usize;
    let mut halvings = 0usize;

    for iter in 0..config.max_iters {
        let (objective, d_theta, d_root) = ik_gradient(
            &fit_chain,
            &theta,
            root_path.view(),
            target,
            config.smoothness_weight,
        )?;
        if iter == 0 {
            initial_obj = Some(objective);
            trace.push(objective);
        }
        let initial = initial_obj.unwrap();
        if objective > 10.0 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Diverged {
                iteration: iter,
                objective,
            });
        }
        if objective < best_obj - config.convergence_tol * best_obj.abs().max(1.0) {
            best_obj = objective;
            best_theta = theta.clone();
            best_root = root_path.clone();
            stalled = 0;
        } else {
            if objective < best_obj {
                best_obj = objective;
                best_theta = theta.clone();
                best_root = root_path.clone();
            }
            stalled += 1;
        }
        if stalled >= 50 {
            if halvings >= 10 {
                break;
            }
            adam_config.learning_rate /= 2.0;
            halvings += 1;
            stalled = 0;
        }

        let mut params: Vec<f64> = theta.theta.iter().cloned().collect();
        let mut grads: Vec<f64> = d_theta.iter().cloned().collect();
        if config.root_translation_free {
            params.extend(root_path.iter().cloned());
            grads.extend(d_root.iter().cloned());
        }
        adam.step(&adam_config, &mut params, &grads);
        theta.theta = Array3::from_shape_vec((frames, n, 3), params[..theta_len].to_vec())
            .expect("theta shape");
        if config.root_translation_free {
            root_path =
                Array2::from_shape_vec((frames, 3), params[theta_len..].to_vec()).expect("root shape");
        }

        let after = ik_objective(
            &fit_chain,
            &theta,
            root_path.view(),
            target,
            config.smoothness_weight,
        )?;
        trace.push(after);
    }

    // Final candidate may beat the best recorded one.
    let last_obj = *trace.last().expect("non-empty trace");
    if last_obj < best_obj {
        best_theta = theta;
        best_root = root_path;
    }

    let joints = forward_kinematics(&fit_chain, &best_theta, best_root.view())?;
    Ok(IkRefinement {
        angles: best_theta,
        root_path: best_root,
        joints,
        chain: fit_chain,
        trace,
    })
}

/// Mean frame-to-frame joint displacement of a trajectory; used to verify
/// that the smoothness term damps jitter.
pub fn mean_frame_displacement(joints: ArrayView3<f64>) -> f64 {
    let (frames, n, _) = joints.dim();
    if frames < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for t in 1..frames {
        for j in 0..n {
            let d = Vector3::new(
                joints[[t, j, 0]] - joints[[t - 1, j, 0]],
                joints[[t, j, 1]] - joints[[t - 1, j, 1]],
                joints[[t, j, 2]] - joints[[t - 1, j, 2]],
            );
            total += d.norm();
        }
    }
    total / ((frames - 1) * n) as f64
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random tree chain with unit-scale offsets; joint 0 is the root.
    pub(crate) fn random_chain(rng: &mut impl Rng, n: usize) -> KinematicChain {
        let mut parents = vec![None];
        for j in 1..n {
            parents.push(Some(rng.gen_range(0..j)));
        }
        let offsets: Vec<Vector3<f64>> = (0..n)
            .map(|j| {
                if j == 0 {
                    Vector3::zeros()
                } else {
                    let v = Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    );
                    let norm = v.norm();
                    if norm < 0.1 {
                        Vector3::new(0.5, 0.0, 0.0)
                    } else {
                        v
                    }
                }
            })
            .collect();
        let names = (0..n).map(|j| format!("j{j}")).collect();
        KinematicChain::new(parents, offsets, names).unwrap()
    }

    pub(crate) fn random_pose(rng: &mut impl Rng, frames: usize, n: usize, scale: f64) -> PoseAngles {
        PoseAngles {
            theta: Array3::from_shape_fn((frames, n, 3), |_| rng.gen_range(-scale..scale)),
        }
    }

    #[test]
    fn zero_angles_stack_rest_offsets() {
        let chain = KinematicChain::new(
            vec![None, Some(0), Some(1)],
            vec![
                Vector3::zeros(),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 2.0, 0.0),
            ],
            vec!["root".into(), "a".into(), "b".into()],
        )
        .unwrap();
        let theta = PoseAngles::zeros(2, 3);
        let root = Array2::from_shape_fn((2, 3), |(t, k)| if k == 2 { t as f64 } else { 0.0 });
        let joints = forward_kinematics(&chain, &theta, root.view()).unwrap();
        for t in 0..2 {
            let z = t as f64;
            assert_abs_diff_eq!(joints[[t, 0, 2]], z, epsilon = 1e-15);
            assert_abs_diff_eq!(joints[[t, 1, 0]], 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(joints[[t, 1, 2]], z, epsilon = 1e-15);
            assert_abs_diff_eq!(joints[[t, 2, 0]], 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(joints[[t, 2, 1]], 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn quarter_turn_rotates_child_offset() {
        let chain = KinematicChain::new(
            vec![None, Some(0)],
            vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)],
            vec!["root".into(), "tip".into()],
        )
        .unwrap();
        let mut theta = PoseAngles::zeros(1, 2);
        theta.theta[[0, 0, 2]] = std::f64::consts::FRAC_PI_2;
        let root = Array2::from_shape_vec((1, 3), vec![0.3, -0.2, 0.5]).unwrap();
        let joints = forward_kinematics(&chain, &theta, root.view()).unwrap();
        assert_abs_diff_eq!(joints[[0, 1, 0]], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(joints[[0, 1, 1]], -0.2 + 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(joints[[0, 1, 2]], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn bone_lengths_are_invariant_under_any_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let chain = random_chain(&mut rng, 5);
        let theta = random_pose(&mut rng, 20, 5, 2.5);
        let root = Array2::from_shape_fn((20, 3), |_| rng.gen_range(-1.0..1.0));
        let joints = forward_kinematics(&chain, &theta, root.view()).unwrap();
        for t in 0..20 {
            for j in 1..5 {
                let p = chain.parent(j).unwrap();
                let bone = Vector3::new(
                    joints[[t, j, 0]] - joints[[t, p, 0]],
                    joints[[t, j, 1]] - joints[[t, p, 1]],
                    joints[[t, j, 2]] - joints[[t, p, 2]],
                );
                assert_abs_diff_eq!(bone.norm(), chain.rest_offset(j).norm(), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn fk_is_equivariant_to_global_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let chain = random_chain(&mut rng, 6);
        let mut theta = random_pose(&mut rng, 4, 6, 1.0);
        // Zero root rotation in the base pose so composing is just setting it.
        for t in 0..4 {
            for k in 0..3 {
                theta.theta[[t, 0, k]] = 0.0;
            }
        }
        let root = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let base = forward_kinematics(&chain, &theta, root.view()).unwrap();

        let q_aa = AxisAngle::new(0.4, -0.7, 0.2);
        let q = rodrigues(q_aa);
        let mut theta_rot = theta.clone();
        let mut root_rot = Array2::zeros((4, 3));
        for t in 0..4 {
            for k in 0..3 {
                theta_rot.theta[[t, 0, k]] = q_aa.0[k];
            }
            let p = q.apply(Vector3::new(root[[t, 0]], root[[t, 1]], root[[t, 2]]));
            for k in 0..3 {
                root_rot[[t, k]] = p[k];
            }
        }
        let rotated = forward_kinematics(&chain, &theta_rot, root_rot.view()).unwrap();
        for t in 0..4 {
            for j in 0..6 {
                let expect = q.apply(Vector3::new(base[[t, j, 0]], base[[t, j, 1]], base[[t, j, 2]]));
                for k in 0..3 {
                    assert_abs_diff_eq!(rotated[[t, j, k]], expect[k], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn objective_is_zero_for_perfect_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let chain = random_chain(&mut rng, 4);
        let theta = random_pose(&mut rng, 3, 4, 1.0);
        let root = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let joints = forward_kinematics(&chain, &theta, root.view()).unwrap();
        let obj = ik_objective(&chain, &theta, root.view(), joints.view(), 0.0).unwrap();
        assert_abs_diff_eq!(obj, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn static_pose_has_zero_smoothness_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let chain = random_chain(&mut rng, 4);
        let mut theta = random_pose(&mut rng, 1, 4, 1.0);
        // Repeat the same frame.
        let first = theta.theta.clone();
        let mut rep = Array3::zeros((5, 4, 3));
        for t in 0..5 {
            for j in 0..4 {
                for k in 0..3 {
                    rep[[t, j, k]] = first[[0, j, k]];
                }
            }
        }
        theta.theta = rep;
        let root = Array2::from_elem((5, 3), 0.25);
        let joints = forward_kinematics(&chain, &theta, root.view()).unwrap();
        let target = Array3::zeros((5, 4, 3));
        let with_lambda = ik_objective(&chain, &theta, root.view(), target.view(), 123.0).unwrap();
        let without = ik_objective(&chain, &theta, root.view(), target.view(), 0.0).unwrap();
        assert_abs_diff_eq!(with_lambda, without, epsilon = 1e-9);
        assert!(smoothness_of(&joints) < 1e-12);
    }

    #[test]
    fn objective_matches_hand_sum_on_tiny_case() {
        // Single joint (the root), two frames: the objective is just the
        // distance from the root path to the targets plus lambda times the
        // root displacement.
        let chain = KinematicChain::new(
            vec![None],
            vec![Vector3::zeros()],
            vec!["root".into()],
        )
        .unwrap();
        let theta = PoseAngles::zeros(2, 1);
        let root = Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let target =
            Array3::from_shape_vec((2, 1, 3), vec![3.0, 4.0, 0.0, 1.0, 1.0, 2.0]).unwrap();
        let lambda = 0.5;
        let obj = ik_objective(&chain, &theta, root.view(), target.view(), lambda).unwrap();
        // Frame 1 distance 5 (3-4-5 triangle), frame 2 distance 2, smoothness
        // lambda * ||(1,1,0)|| = 0.5 * sqrt(2).
        let expected = 5.0 + 2.0 + 0.5 * 2.0_f64.sqrt();
        assert_abs_diff_eq!(obj, expected, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let chain = random_chain(&mut rng, 5);
        let theta = random_pose(&mut rng, 4, 5, 0.8);
        let root = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-0.5..0.5));
        let target = Array3::from_shape_fn((4, 5, 3), |_| rng.gen_range(-1.5..1.5));
        let lambda = 0.3;
        let (obj, d_theta, d_root) =
            ik_gradient(&chain, &theta, root.view(), target.view(), lambda).unwrap();
        let check = ik_objective(&chain, &theta, root.view(), target.view(), lambda).unwrap();
        assert_abs_diff_eq!(obj, check, epsilon = 1e-10);

        let h = 1e-5;
        for _ in 0..20 {
            let t = rng.gen_range(0..4);
            let j = rng.gen_range(0..5);
            let k = rng.gen_range(0..3);
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus.theta[[t, j, k]] += h;
            minus.theta[[t, j, k]] -= h;
            let op = ik_objective(&chain, &plus, root.view(), target.view(), lambda).unwrap();
            let om = ik_objective(&chain, &minus, root.view(), target.view(), lambda).unwrap();
            let fd = (op - om) / (2.0 * h);
            let analytic = d_theta[[t, j, k]];
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-4,
                "theta grad mismatch: analytic {analytic}, fd {fd}"
            );
        }
        for _ in 0..8 {
            let t = rng.gen_range(0..4);
            let k = rng.gen_range(0..3);
            let mut rp = root.clone();
            let mut rm = root.clone();
            rp[[t, k]] += h;
            rm[[t, k]] -= h;
            let op = ik_objective(&chain, &theta, rp.view(), target.view(), lambda).unwrap();
            let om = ik_objective(&chain, &theta, rm.view(), target.view(), lambda).unwrap();
            let fd = (op - om) / (2.0 * h);
            let analytic = d_root[[t, k]];
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-4,
                "root grad mismatch: analytic {analytic}, fd {fd}"
            );
        }
    }

    #[test]
    fn refine_recovers_fk_realizable_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let chain = random_chain(&mut rng, 4);
        let theta_true = random_pose(&mut rng, 8, 4, 0.5);
        let root = Array2::from_shape_fn((8, 3), |(t, _)| 0.1 * t as f64);
        let target = forward_kinematics(&chain, &theta_true, root.view()).unwrap();

        let config = IkConfig::default();
        let refined = refine_inverse_kinematics(&chain, target.view(), &config).unwrap();
        let final_obj = objective_of(&refined.joints, &target.view());
        assert!(
            final_obj < 0.02,
            "objective should be near zero, got {final_obj}"
        );
        let mut max_err = 0.0_f64;
        for t in 0..8 {
            for j in 0..4 {
                for k in 0..3 {
                    max_err = max_err.max((refined.joints[[t, j, k]] - target[[t, j, k]]).abs());
                }
            }
        }
        assert!(max_err < 1e-3, "max joint error {max_err}");
    }

    #[test]
    fn refine_pins_bone_lengths_to_frame_one() {
        // One bone whose target length ramps from 1.0 to 1.1.
        let chain = KinematicChain::new(
            vec![None, Some(0)],
            vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)],
            vec!["root".into(), "tip".into()],
        )
        .unwrap();
        let frames = 20;
        let mut target = Array3::zeros((frames, 2, 3));
        for t in 0..frames {
            let len = 1.0 + 0.1 * t as f64 / (frames - 1) as f64;
            target[[t, 1, 0]] = len;
        }
        let refined =
            refine_inverse_kinematics(&chain, target.view(), &IkConfig::default()).unwrap();
        for t in 0..frames {
            let bone = Vector3::new(
                refined.joints[[t, 1, 0]] - refined.joints[[t, 0, 0]],
                refined.joints[[t, 1, 1]] - refined.joints[[t, 0, 1]],
                refined.joints[[t, 1, 2]] - refined.joints[[t, 0, 2]],
            );
            assert_abs_diff_eq!(bone.norm(), 1.0, epsilon = 1e-9);
        }
        // The returned refinement is the best iterate: its objective cannot
        // exceed the initial one.
        let final_obj = ik_objective(
            &refined.chain,
            &refined.angles,
            refined.root_path.view(),
            target.view(),
            IkConfig::default().smoothness_weight,
        )
        .unwrap();
        assert!(final_obj <= refined.trace[0] + 1e-9);
    }

    #[test]
    fn large_lambda_damps_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let chain = random_chain(&mut rng, 4);
        let theta_true = random_pose(&mut rng, 10, 4, 0.3);
        let root = Array2::zeros((10, 3));
        let clean = forward_kinematics(&chain, &theta_true, root.view()).unwrap();
        let jitter = Array3::from_shape_fn((10, 4, 3), |_| rng.gen_range(-0.05..0.05));
        let target = &clean + &jitter;

        let config = IkConfig {
            smoothness_weight: 1e3,
            ..IkConfig::default()
        };
        let refined = refine_inverse_kinematics(&chain, target.view(), &config).unwrap();
        let before = mean_frame_displacement(target.view());
        let after = mean_frame_displacement(refined.joints.view());
        assert!(
            after < before,
            "smoothed displacement {after} should be below input {before}"
        );
    }

    #[test]
    fn min_so_far_envelope_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let chain = random_chain(&mut rng, 4);
        let target = Array3::from_shape_fn((6, 4, 3), |_| rng.gen_range(-1.0..1.0));
        let config = IkConfig {
            max_iters: 300,
            ..IkConfig::default()
        };
        let refined = refine_inverse_kinematics(&chain, target.view(), &config).unwrap();
        let mut best = f64::INFINITY;
        for &obj in &refined.trace {
            let envelope = best.min(obj);
            assert!(envelope <= best + 1e-12);
            best = envelope;
        }
        // The returned refinement must not be worse than the initial state.
        let final_obj = ik_objective(
            &refined.chain,
            &refined.angles,
            refined.root_path.view(),
            target.view(),
            config.smoothness_weight,
        )
        .unwrap();
        assert!(final_obj <= refined.trace[0] + 1e-9);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let chain = KinematicChain::new(
            vec![None, Some(0)],
            vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)],
            vec!["root".into(), "tip".into()],
        )
        .unwrap();
        let theta = PoseAngles::zeros(2, 3);
        let root = Array2::zeros((2, 3));
        match forward_kinematics(&chain, &theta, root.view()) {
            Err(Error::ShapeMismatch(_)) => {}
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn chain_validation_rejects_bad_graphs() {
        // Two roots.
        assert!(KinematicChain::new(
            vec![None, None],
            vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)],
            vec!["a".into(), "b".into()],
        )
        .is_err());
        // Cycle.
        assert!(KinematicChain::new(
            vec![Some(1), Some(0)],
            vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)],
            vec!["a".into(), "b".into()],
        )
        .is_err());
        // Zero-length bone.
        assert!(KinematicChain::new(
            vec![None, Some(0)],
            vec![Vector3::zeros(), Vector3::zeros()],
            vec!["a".into(), "b".into()],
        )
        .is_err());
    }

    #[test]
    fn adjacency_is_symmetric_and_matches_parents() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let chain = random_chain(&mut rng, 7);
        let a = chain.adjacency();
        for i in 0..7 {
            assert_eq!(a[[i, i]], 0.0);
            for j in 0..7 {
                assert_eq!(a[[i, j]], a[[j, i]]);
            }
        }
        for j in 1..7 {
            let p = chain.parent(j).unwrap();
            assert_eq!(a[[j, p]], 1.0);
        }
    }
}
