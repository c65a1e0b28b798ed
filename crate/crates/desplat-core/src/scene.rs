//! Scene: an ordered primitive collection plus its random-stream bookkeeping.

use crate::gaussian::GaussianPrimitive;
use crate::math::Vec3;
use crate::rng::FIRST_PRIMITIVE_STREAM;
use alloc::vec::Vec;

/// Optimization target. Primitive order is stable under serialization and
/// is the tie-breaker everywhere ordering matters, so two runs with the same
/// seed and config follow identical trajectories.
#[derive(Debug, Clone)]
pub struct Scene {
    pub primitives: Vec<GaussianPrimitive>,
    /// Seed shared by every random stream touching this scene.
    pub rng_seed: u64,
    /// Per-primitive stream ids; relocated or split primitives get fresh ids
    /// so their noise never replays a donor's.
    pub streams: Vec<u64>,
    /// Next unassigned stream id.
    pub next_stream: u64,
}

impl Scene {
    pub fn new(primitives: Vec<GaussianPrimitive>, rng_seed: u64) -> Self {
        let n = primitives.len() as u64;
        let streams = (0..n).map(|i| FIRST_PRIMITIVE_STREAM + i).collect();
        Self {
            primitives,
            rng_seed,
            streams,
            next_stream: FIRST_PRIMITIVE_STREAM + n,
        }
    }

    /// Rebuild a scene from persisted parts. `streams` may be empty, in which
    /// case default per-index streams are assigned.
    pub fn from_parts(
        primitives: Vec<GaussianPrimitive>,
        rng_seed: u64,
        streams: Vec<u64>,
        next_stream: u64,
    ) -> Self {
        if streams.len() == primitives.len() {
            Self {
                primitives,
                rng_seed,
                streams,
                next_stream,
            }
        } else {
            Self::new(primitives, rng_seed)
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn fresh_stream(&mut self) -> u64 {
        let id = self.next_stream;
        self.next_stream += 1;
        id
    }

    pub fn centroid(&self) -> Vec3 {
        if self.is_empty() {
            return Vec3::zero();
        }
        let mut acc = Vec3::zero();
        for p in &self.primitives {
            acc += p.mean;
        }
        acc * (1.0 / self.len() as f64)
    }

    /// Scene extent: largest distance from the centroid to any mean.
    /// Used to size exploration noise and synthetic jitter.
    pub fn extent(&self) -> f64 {
        let c = self.centroid();
        let mut worst = 0.0f64;
        for p in &self.primitives {
            let d = (p.mean - c).norm();
            if d > worst {
                worst = d;
            }
        }
        worst
    }

    pub fn all_finite(&self) -> bool {
        self.primitives.iter().all(|p| p.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Quat;

    fn prim(x: f64) -> GaussianPrimitive {
        GaussianPrimitive {
            mean: Vec3::new(x, 0.0, 0.0),
            log_scale: Vec3::zero(),
            rotation: Quat::identity(),
            raw_opacity: 0.0,
            color: Vec3::splat(0.5),
        }
    }

    #[test]
    fn streams_assigned_per_index() {
        let s = Scene::new(alloc::vec![prim(0.0), prim(1.0)], 9);
        assert_eq!(s.streams, alloc::vec![16, 17]);
        assert_eq!(s.next_stream, 18);
    }

    #[test]
    fn extent_measures_farthest_mean() {
        let s = Scene::new(alloc::vec![prim(-1.0), prim(3.0)], 0);
        // centroid at x=1, farthest mean at x=3.
        assert!((s.extent() - 2.0).abs() < 1e-12);
    }
}
