//! Rigid registration of the gripper Gaussians between `t` and `t + Δt`, and
//! the split of the recovered motion into per-step actions.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ActionError, FieldError};
use crate::field::GaussianField;
use crate::geometry::se3_serde::PoseRepr;
use crate::geometry::Se3;

/// Singular values of the centered source covariance below this are treated as zero.
pub const DEGENERACY_THRESHOLD: f64 = 1e-9;

/// Static 3D kd-tree for exact nearest-neighbor queries.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Point indices laid out as an implicit balanced tree: the median of
    /// each range is its root, split on `depth % 3`.
    order: Vec<usize>,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build_range(points, &mut order, 0);
        KdTree { points: points.to_vec(), order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the closest point and its squared distance. Ties resolve to
    /// the smaller index.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        let mut best = None;
        self.search(q, 0, self.order.len(), 0, &mut best);
        best
    }

    fn search(&self, q: &Vector3<f64>, lo: usize, hi: usize, depth: usize, best: &mut Option<(usize, f64)>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        match *best {
            Some((bi, bd)) if d2 > bd || (d2 == bd && idx > bi) => {}
            _ => *best = Some((idx, d2)),
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, depth + 1, best);
        if best.is_none_or(|(_, bd)| diff * diff <= bd) {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

fn build_range(points: &[Vector3<f64>], order: &mut [usize], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let (left, right) = order.split_at_mut(mid);
    build_range(points, left, depth + 1);
    build_range(points, &mut right[1..], depth + 1);
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Least-squares rigid transform taking `src[k]` to `dst[k]`, with the
/// reflection case corrected.
pub fn kabsch_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Se3, ActionError> {
    if src.len() != dst.len() {
        return Err(ActionError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(ActionError::TooFewPoints(src.len()));
    }
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut spread = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - cs, d - cd);
        spread += a * a.transpose();
        cross += a * b.transpose();
    }
    let mut sv: Vec<f64> = (spread / src.len() as f64).symmetric_eigenvalues().iter().map(|e| e.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[1] <= DEGENERACY_THRESHOLD {
        return Err(ActionError::Degenerate([sv[0], sv[1], sv[2]]));
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = v_t.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = v * fix * u.transpose();
    let rotation = crate::geometry::Quaternion::from_matrix(&r);
    let translation = cd - rotation.to_matrix() * cs;
    Ok(Se3::new(rotation, translation))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correspondence {
    PairedByIndex,
    #[default]
    NearestNeighbor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once the RMS residual changes by less than this.
    pub tolerance: f64,
    pub correspondence: Correspondence,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig { max_iterations: 50, tolerance: 1e-8, correspondence: Correspondence::NearestNeighbor }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpResult {
    pub transform: Se3,
    pub rms: f64,
    pub iterations: usize,
}

/// Point-to-point ICP from the identity, mapping `src` toward `dst`.
pub fn icp(src: &[Vector3<f64>], dst: &[Vector3<f64>], cfg: &IcpConfig) -> Result<IcpResult, ActionError> {
    if src.len() < 3 {
        return Err(ActionError::TooFewPoints(src.len()));
    }
    if dst.len() < 3 {
        return Err(ActionError::TooFewPoints(dst.len()));
    }
    if cfg.correspondence == Correspondence::PairedByIndex {
        let transform = kabsch_align(src, dst)?;
        return Ok(IcpResult { transform, rms: rms(&transform, src, dst), iterations: 1 });
    }
    let tree = KdTree::build(dst);
    let mut transform = Se3::identity();
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    let mut current = prev;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let matched: Vec<Vector3<f64>> = src
            .par_iter()
            .map(|p| dst[tree.nearest(&transform.apply(p)).expect("nonempty tree").0])
            .collect();
        transform = kabsch_align(src, &matched)?;
        current = rms(&transform, src, &matched);
        if (prev - current).abs() < cfg.tolerance {
            break;
        }
        prev = current;
    }
    Ok(IcpResult { transform, rms: current, iterations })
}

fn rms(t: &Se3, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
    (src.iter().zip(dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum::<f64>() / src.len() as f64).sqrt()
}

/// Motion over one interval split into equal screw steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InitActionRepr", into = "InitActionRepr")]
pub struct InitAction {
    pub horizon: usize,
    /// World-frame increments; step `k` takes the pose at `k/H` to `(k+1)/H`.
    pub steps: Vec<Se3>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitActionRepr {
    horizon: usize,
    steps: Vec<PoseRepr>,
}

impl From<InitAction> for InitActionRepr {
    fn from(a: InitAction) -> Self {
        InitActionRepr { horizon: a.horizon, steps: a.steps.iter().map(PoseRepr::from).collect() }
    }
}

impl TryFrom<InitActionRepr> for InitAction {
    type Error = String;
    fn try_from(r: InitActionRepr) -> Result<Self, String> {
        if r.horizon != r.steps.len() {
            return Err(format!("horizon {} but {} steps", r.horizon, r.steps.len()));
        }
        Ok(InitAction { horizon: r.horizon, steps: r.steps.into_iter().map(Se3::from).collect() })
    }
}

impl InitAction {
    /// `steps[k] = interp(T, (k+1)/H) ∘ interp(T, k/H)⁻¹`.
    pub fn from_total(total: &Se3, horizon: usize) -> Result<Self, ActionError> {
        if horizon == 0 {
            return Err(ActionError::ZeroHorizon);
        }
        let h = horizon as f64;
        let poses: Vec<Se3> = (0..=horizon).map(|k| total.interpolate(k as f64 / h)).collect::<Result<_, _>>()?;
        let steps = poses.windows(2).map(|w| w[1].compose(&w[0].inverse())).collect();
        Ok(InitAction { horizon, steps })
    }

    /// `steps[H-1] ∘ … ∘ steps[0]`.
    pub fn total(&self) -> Se3 {
        self.steps.iter().fold(Se3::identity(), |acc, s| s.compose(&acc))
    }

    /// The same increments expressed in the frame of a body at `pose`, so that
    /// `pose ∘ body_step = world_step ∘ pose`.
    pub fn in_body_frame(&self, pose: &Se3) -> Vec<Se3> {
        let inv = pose.inverse();
        self.steps.iter().map(|s| s.conjugate_by(&inv)).collect()
    }
}

/// Registers the labeled Gaussians at `t` onto their displaced positions and
/// splits the result into `horizon` steps.
pub fn compute_init_action(field: &GaussianField, label: u8, horizon: usize, cfg: &IcpConfig) -> Result<(InitAction, IcpResult), ActionError> {
    if horizon == 0 {
        return Err(ActionError::ZeroHorizon);
    }
    let (now, next) = field.extract_subset(label).map_err(|e| match e {
        FieldError::EmptySubset(l) => ActionError::EmptySubset(l),
        _ => unreachable!("extract_subset only fails on an empty subset"),
    })?;
    let fit = icp(&now, &next, cfg)?;
    Ok((InitAction::from_total(&fit.transform, horizon)?, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{GaussianPoint, BACKGROUND_LABEL, GRIPPER_LABEL};
    use crate::geometry::Quaternion;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.15..0.15), rng.random_range(-0.1..0.25))).collect()
    }

    #[test]
    fn kd_tree_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = cloud(300, &mut rng);
        let tree = KdTree::build(&pts);
        for _ in 0..500 {
            let q = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let brute = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm_squared()))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .unwrap();
            assert_eq!(tree.nearest(&q), Some(brute));
        }
        assert_eq!(KdTree::build(&[]).nearest(&Vector3::zeros()), None);
    }

    #[test]
    fn kabsch_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = cloud(20, &mut rng);
        let id = kabsch_align(&src, &src).unwrap();
        assert!(id.rotation_angle() < 1e-12 && id.translation.norm() < 1e-12);

        let shifted: Vec<_> = src.iter().map(|p| p + Vector3::new(0.1, 0.0, 0.0)).collect();
        let t = kabsch_align(&src, &shifted).unwrap();
        assert!((t.translation - Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-12 && t.rotation_angle() < 1e-12);

        let truth = Se3::new(Quaternion::from_axis_angle(Vector3::z(), 30f64.to_radians()), Vector3::new(0.05, 0.0, 0.02));
        let moved: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let est = kabsch_align(&src, &moved).unwrap();
        let (angle, dist) = est.distance(&truth);
        assert!(angle < 1e-9 && dist < 1e-9);
    }

    #[test]
    fn kabsch_rejects_bad_input() {
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(kabsch_align(&line, &line), Err(ActionError::Degenerate(_))));
        assert!(matches!(kabsch_align(&line[..2], &line[..2]), Err(ActionError::TooFewPoints(2))));
        assert!(matches!(kabsch_align(&line, &line[..4]), Err(ActionError::LengthMismatch(5, 4))));
        // A planar cloud has rank 2 and is accepted.
        let plane = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0), Vector3::new(1.0, 1.0, 0.0)];
        let t = Se3::rot_z(0.3);
        let moved: Vec<_> = plane.iter().map(|p| t.apply(p)).collect();
        assert!(kabsch_align(&plane, &moved).unwrap().distance(&t).0 < 1e-12);
    }

    #[test]
    fn icp_recovers_shuffled_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = cloud(120, &mut rng);
        let truth = Se3::new(Quaternion::from_axis_angle(Vector3::new(0.3, -0.2, 1.0), 20f64.to_radians()), Vector3::new(0.03, -0.04, 0.0));
        let mut dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        dst.shuffle(&mut rng);
        let res = icp(&src, &dst, &IcpConfig::default()).unwrap();
        let (angle, dist) = res.transform.distance(&truth);
        assert!(angle.to_degrees() < 0.5 && dist < 1e-3, "{angle} {dist}");
        assert!(res.rms < 1e-9);

        let mut same = src.clone();
        same.shuffle(&mut rng);
        let res = icp(&src, &same, &IcpConfig::default()).unwrap();
        assert!(res.transform.rotation_angle() < 1e-12 && res.rms < 1e-12);
    }

    #[test]
    fn icp_is_equivariant_under_global_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = cloud(80, &mut rng);
        let truth = Se3::new(Quaternion::from_axis_angle(Vector3::x(), 0.2), Vector3::new(0.02, 0.01, -0.03));
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let g = Se3::rot_z(0.7);
        let (gs, gd): (Vec<_>, Vec<_>) = (src.iter().map(|p| g.apply(p)).collect(), dst.iter().map(|p| g.apply(p)).collect());
        let res = icp(&gs, &gd, &IcpConfig::default()).unwrap();
        let (angle, dist) = res.transform.distance(&truth.conjugate_by(&g));
        assert!(angle < 1e-9 && dist < 1e-9);
    }

    fn gripper_field(disp: Vector3<f64>) -> GaussianField {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut points: Vec<GaussianPoint> = cloud(30, &mut rng)
            .into_iter()
            .map(|m| {
                let mut p = GaussianPoint::new(m, Vector3::repeat(0.5), 0.0, Quaternion::IDENTITY, Vector3::repeat(0.02), GRIPPER_LABEL);
                p.disp = disp;
                p
            })
            .collect();
        points.push(GaussianPoint::new(Vector3::new(1.0, 1.0, 1.0), Vector3::repeat(0.5), 0.0, Quaternion::IDENTITY, Vector3::repeat(0.02), BACKGROUND_LABEL));
        GaussianField::new(points)
    }

    #[test]
    fn init_action_examples() {
        let (a, _) = compute_init_action(&gripper_field(Vector3::zeros()), GRIPPER_LABEL, 8, &IcpConfig::default()).unwrap();
        assert!(a.steps.iter().all(|s| s.rotation_angle() < 1e-12 && s.translation.norm() < 1e-12));

        let (a, _) = compute_init_action(&gripper_field(Vector3::new(0.08, 0.0, 0.0)), GRIPPER_LABEL, 8, &IcpConfig::default()).unwrap();
        assert_eq!(a.steps.len(), 8);
        for s in &a.steps {
            assert!((s.translation - Vector3::new(0.01, 0.0, 0.0)).norm() < 1e-12 && s.rotation_angle() < 1e-12);
        }
        assert!(matches!(compute_init_action(&gripper_field(Vector3::zeros()), 9, 8, &IcpConfig::default()), Err(ActionError::EmptySubset(9))));
        assert!(matches!(compute_init_action(&gripper_field(Vector3::zeros()), GRIPPER_LABEL, 0, &IcpConfig::default()), Err(ActionError::ZeroHorizon)));
    }

    #[test]
    fn steps_compose_to_total_and_body_frame_agrees() {
        let total = Se3::new(Quaternion::from_axis_angle(Vector3::new(1.0, 1.0, 0.0), 0.6), Vector3::new(0.1, -0.2, 0.05));
        let a = InitAction::from_total(&total, 8).unwrap();
        let (angle, dist) = a.total().distance(&total);
        assert!(angle < 1e-12 && dist < 1e-12);
        let pose = Se3::new(Quaternion::from_axis_angle(Vector3::y(), 1.1), Vector3::new(0.3, 0.2, 0.1));
        let body = a.in_body_frame(&pose);
        let via_body = body.iter().fold(pose, |p, s| p.compose(s));
        let (angle, dist) = via_body.distance(&total.compose(&pose));
        assert!(angle < 1e-12 && dist < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let total = Se3::new(Quaternion::from_axis_angle(Vector3::new(0.2, 1.0, 0.0), 0.3), Vector3::new(0.1, 0.0, 0.05));
        let a = InitAction::from_total(&total, 4).unwrap();
        let s = serde_json::to_string(&a).unwrap();
        assert!(s.starts_with("{\"horizon\":4,\"steps\":[{\"q\":["));
        let back: InitAction = serde_json::from_str(&s).unwrap();
        assert_eq!(back, a);
        assert!(serde_json::from_str::<InitAction>("{\"horizon\":2,\"steps\":[]}").is_err());
    }
}
