//! The Gaussian action field: per-Gaussian position, displacement over the
//! interval Δt and appearance, plus the `GAF1` binary file format.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::FieldError;
use crate::geometry::{Quaternion, Se3, SCALE_FLOOR};

pub const BACKGROUND_LABEL: u8 = 0;
pub const GRIPPER_LABEL: u8 = 1;
pub const DEFAULT_INTERVAL: u32 = 8;

/// Number of optimizable scalars per Gaussian.
pub const PARAM_COUNT: usize = 17;

/// Offsets into the flat parameter layout, which mirrors the `GAF1` record order.
pub mod param {
    pub const MEAN: usize = 0;
    pub const DISP: usize = 3;
    pub const COLOR: usize = 6;
    pub const OPACITY: usize = 9;
    pub const ROTATION: usize = 10;
    pub const LOG_SCALE: usize = 14;
}

const MAGIC: [u8; 4] = *b"GAF1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const RECORD_LEN: usize = PARAM_COUNT * 4 + 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPoint {
    pub mean: Vector3<f64>,
    pub disp: Vector3<f64>,
    pub color: Vector3<f64>,
    /// Opacity logit.
    pub opacity: f64,
    /// Raw, normalized on use.
    pub rotation: Quaternion,
    pub log_scale: Vector3<f64>,
    pub label: u8,
}

impl GaussianPoint {
    pub fn new(mean: Vector3<f64>, color: Vector3<f64>, opacity: f64, rotation: Quaternion, scale: Vector3<f64>, label: u8) -> Self {
        GaussianPoint {
            mean,
            disp: Vector3::zeros(),
            color,
            opacity,
            rotation,
            log_scale: scale.map(|s| s.max(SCALE_FLOOR).ln()),
            label,
        }
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.opacity)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(|s| s.exp().max(SCALE_FLOOR))
    }

    pub fn params(&self) -> [f64; PARAM_COUNT] {
        let mut p = [0.0; PARAM_COUNT];
        p[0..3].copy_from_slice(self.mean.as_slice());
        p[3..6].copy_from_slice(self.disp.as_slice());
        p[6..9].copy_from_slice(self.color.as_slice());
        p[9] = self.opacity;
        p[10..14].copy_from_slice(&self.rotation.to_array());
        p[14..17].copy_from_slice(self.log_scale.as_slice());
        p
    }

    pub fn set_params(&mut self, p: &[f64; PARAM_COUNT]) {
        self.mean = Vector3::new(p[0], p[1], p[2]);
        self.disp = Vector3::new(p[3], p[4], p[5]);
        self.color = Vector3::new(p[6], p[7], p[8]);
        self.opacity = p[9];
        self.rotation = Quaternion::new(p[10], p[11], p[12], p[13]);
        self.log_scale = Vector3::new(p[14], p[15], p[16]);
    }

    /// Rigidly moves the Gaussian (center and orientation). Displacement is untouched.
    pub fn transformed(&self, pose: &Se3) -> GaussianPoint {
        GaussianPoint {
            mean: pose.apply(&self.mean),
            rotation: pose.rotation.mul(self.rotation.normalized()),
            ..*self
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    pub points: Vec<GaussianPoint>,
    pub timestep: u32,
    pub interval: u32,
}

impl GaussianField {
    pub fn new(points: Vec<GaussianPoint>) -> Self {
        GaussianField { points, timestep: 0, interval: DEFAULT_INTERVAL }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Moves every center by `fraction · Δμ` and keeps the rest of the motion.
    /// `advance(F, 1)` is the future Gaussian.
    pub fn advance(&self, fraction: f64) -> Result<GaussianField, FieldError> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(FieldError::FractionOutOfRange(fraction));
        }
        let points = self
            .points
            .iter()
            .map(|p| GaussianPoint { mean: p.mean + p.disp * fraction, disp: p.disp * (1.0 - fraction), ..*p })
            .collect();
        Ok(GaussianField { points, ..*self })
    }

    /// Current and future centers of the Gaussians carrying `label`, in field order.
    pub fn extract_subset(&self, label: u8) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>), FieldError> {
        let (now, next): (Vec<_>, Vec<_>) = self
            .points
            .iter()
            .filter(|p| p.label == label)
            .map(|p| (p.mean, p.mean + p.disp))
            .unzip();
        if now.is_empty() {
            return Err(FieldError::EmptySubset(label));
        }
        Ok((now, next))
    }

    pub fn has_label(&self, label: u8) -> bool {
        self.points.iter().any(|p| p.label == label)
    }

    /// Rounds every parameter through `f32`, the precision of the file format.
    pub fn quantized(&self) -> GaussianField {
        let mut out = self.clone();
        for p in &mut out.points {
            let q = p.params().map(|v| v as f32 as f64);
            p.set_params(&q);
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), FieldError> {
        let mut buf = Vec::with_capacity(HEADER_LEN + RECORD_LEN * self.len());
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.timestep.to_le_bytes());
        buf.extend_from_slice(&self.interval.to_le_bytes());
        for p in &self.points {
            for v in p.params() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            buf.push(p.label);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<GaussianField, FieldError> {
        if bytes.len() < 4 {
            return Err(FieldError::Truncated { expected: HEADER_LEN, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FieldError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(FieldError::Truncated { expected: HEADER_LEN, found: bytes.len() });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(FieldError::UnsupportedVersion(version));
        }
        let count = word(8) as usize;
        let expected = HEADER_LEN + count * RECORD_LEN;
        if bytes.len() < expected {
            return Err(FieldError::Truncated { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(FieldError::TrailingBytes(count));
        }
        let points = bytes[HEADER_LEN..]
            .chunks_exact(RECORD_LEN)
            .map(|rec| {
                let mut params = [0.0; PARAM_COUNT];
                for (k, v) in params.iter_mut().enumerate() {
                    *v = f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
                }
                let mut p = GaussianPoint::new(Vector3::zeros(), Vector3::zeros(), 0.0, Quaternion::IDENTITY, Vector3::repeat(1.0), rec[RECORD_LEN - 1]);
                p.set_params(&params);
                p
            })
            .collect();
        Ok(GaussianField { points, timestep: word(12), interval: word(16) })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FieldError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GaussianField, FieldError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        GaussianField::from_bytes(&bytes)
    }
}

/// Per-Gaussian gradients in the flat parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldDelta {
    pub grads: Vec<[f64; PARAM_COUNT]>,
}

impl FieldDelta {
    pub fn zeros(n: usize) -> Self {
        FieldDelta { grads: vec![[0.0; PARAM_COUNT]; n] }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add_assign(&mut self, other: &FieldDelta) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Gradient of a loss on `advance(F, 1)` expressed on `F`: the mean
    /// gradient is routed to both the center and the displacement.
    pub fn routed_to_displacement(&self) -> FieldDelta {
        let mut out = self.clone();
        for g in &mut out.grads {
            for k in 0..3 {
                g[param::DISP + k] = g[param::MEAN + k];
            }
        }
        out
    }

    pub fn is_finite(&self) -> Result<(), usize> {
        match self.grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            Some(i) => Err(i),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_field(n: usize, seed: u64) -> GaussianField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let points = (0..n)
            .map(|i| {
                let mean = v();
                let disp = v() * 0.1;
                let color = v().map(|c| 0.5 + 0.5 * c);
                let rot = v();
                let mut p = GaussianPoint::new(mean, color, rot.x * 3.0, Quaternion::new(1.0, rot.x, rot.y, rot.z), v().map(|s| 0.05 + 0.02 * s), (i % 4) as u8);
                p.disp = disp;
                p
            })
            .collect();
        GaussianField { points, timestep: 3, interval: 8 }
    }

    #[test]
    fn advance_zero_is_identity() {
        let f = random_field(20, 1);
        assert_eq!(f.advance(0.0).unwrap(), f);
    }

    #[test]
    fn advance_single_point() {
        let mut p = GaussianPoint::new(Vector3::zeros(), Vector3::new(0.2, 0.3, 0.4), 0.5, Quaternion::IDENTITY, Vector3::repeat(0.1), 1);
        p.disp = Vector3::new(1.0, 0.0, 0.0);
        let f = GaussianField::new(vec![p]).advance(1.0).unwrap();
        let q = f.points[0];
        assert_eq!(q.mean, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(q.disp, Vector3::zeros());
        assert_eq!((q.color, q.opacity, q.rotation, q.log_scale, q.label), (p.color, p.opacity, p.rotation, p.log_scale, p.label));
    }

    #[test]
    fn advance_in_two_stages() {
        // With Δμ=(4,8,-2) the quarter and remainder are exact in binary.
        let mut p = GaussianPoint::new(Vector3::new(0.5, 1.0, 2.0), Vector3::repeat(0.5), 0.0, Quaternion::IDENTITY, Vector3::repeat(0.1), 0);
        p.disp = Vector3::new(4.0, 8.0, -2.0);
        let f = GaussianField::new(vec![p]);
        let staged = f.advance(0.25).unwrap().advance(1.0).unwrap();
        assert_eq!(staged, f.advance(1.0).unwrap());
        let g = random_field(50, 2);
        let staged = g.advance(0.25).unwrap().advance(1.0).unwrap();
        let direct = g.advance(1.0).unwrap();
        for (a, b) in staged.points.iter().zip(&direct.points) {
            assert!((a.mean - b.mean).amax() < 1e-12);
        }
        assert!(g.advance(1.1).is_err());
    }

    #[test]
    fn subset_filters_by_label() {
        let mut f = random_field(10, 3);
        for (i, p) in f.points.iter_mut().enumerate() {
            p.label = if i % 3 == 1 { GRIPPER_LABEL } else { BACKGROUND_LABEL };
        }
        let (now, next) = f.extract_subset(GRIPPER_LABEL).unwrap();
        assert_eq!(now.len(), 3);
        for (k, i) in [1, 4, 7].into_iter().enumerate() {
            assert_eq!(now[k], f.points[i].mean);
            assert_eq!(next[k], f.points[i].mean + f.points[i].disp);
        }
        let (adv, _) = f.advance(1.0).unwrap().extract_subset(GRIPPER_LABEL).unwrap();
        assert_eq!(adv, next);
        for p in &mut f.points {
            p.label = BACKGROUND_LABEL;
        }
        assert!(matches!(f.extract_subset(GRIPPER_LABEL), Err(FieldError::EmptySubset(1))));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let f = random_field(1000, 4).quantized();
        let mut bytes = Vec::new();
        f.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 20 + 1000 * 69);
        let g = GaussianField::from_bytes(&bytes).unwrap();
        for (a, b) in f.points.iter().zip(&g.points) {
            assert_eq!(a.params().map(f64::to_bits), b.params().map(f64::to_bits));
            assert_eq!(a.label, b.label);
        }
        assert_eq!((g.timestep, g.interval), (3, 8));
        let mut again = Vec::new();
        g.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn file_errors_are_distinct() {
        let mut bytes = Vec::new();
        random_field(5, 5).write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(GaussianField::from_bytes(&bad), Err(FieldError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(GaussianField::from_bytes(&bad), Err(FieldError::UnsupportedVersion(2))));
        let cut = &bytes[..20 + 69 * 2 + 30];
        assert!(matches!(GaussianField::from_bytes(cut), Err(FieldError::Truncated { .. })));
        assert!(matches!(GaussianField::from_bytes(&bytes[..10]), Err(FieldError::Truncated { .. })));
    }

    #[test]
    fn params_round_trip() {
        let f = random_field(3, 6);
        for p in &f.points {
            let mut q = *p;
            q.set_params(&p.params());
            assert_eq!(&q, p);
        }
    }
}
