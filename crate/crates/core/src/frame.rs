use crate::geom::{backproject_unchecked, CameraIntrinsics, Vec3};

/// Registered color + metric depth image. A pixel is valid iff its depth is
/// strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    pub intrinsics: CameraIntrinsics,
    /// Row-major RGB.
    pub color: Vec<[u8; 3]>,
    /// Row-major depth in meters, 0 = invalid.
    pub depth: Vec<f64>,
}

/// Neighbor depth differences above this are treated as discontinuities
/// when estimating normals.
const NORMAL_JUMP_TOL: f64 = 0.03;

impl RgbdFrame {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        let n = intrinsics.pixel_count();
        Self {
            intrinsics,
            color: vec![[0; 3]; n],
            depth: vec![0.0; n],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.intrinsics.width + u
    }

    #[inline]
    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[self.index(u, v)]
    }

    #[inline]
    pub fn color_at(&self, u: usize, v: usize) -> [u8; 3] {
        self.color[self.index(u, v)]
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.depth_at(u, v) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    /// Camera-frame point at a valid pixel.
    pub fn point_at(&self, u: usize, v: usize) -> Option<Vec3> {
        let z = self.depth_at(u, v);
        (z > 0.0).then(|| backproject_unchecked(u as f64, v as f64, z, &self.intrinsics))
    }

    /// Per-pixel unit normals by central differences, oriented toward the
    /// camera. Pixels with an invalid or discontinuous neighbor get `None`.
    pub fn normals(&self) -> Vec<Option<Vec3>> {
        let (w, h) = (self.width(), self.height());
        let mut out = vec![None; w * h];
        if w < 3 || h < 3 {
            return out;
        }
        for v in 1..h - 1 {
            for u in 1..w - 1 {
                out[v * w + u] = self.normal_at(u, v);
            }
        }
        out
    }

    pub fn normal_at(&self, u: usize, v: usize) -> Option<Vec3> {
        if u == 0 || v == 0 || u + 1 >= self.width() || v + 1 >= self.height() {
            return None;
        }
        let z = self.depth_at(u, v);
        if z <= 0.0 {
            return None;
        }
        let mut pts = [Vec3::zeros(); 4];
        for (slot, (du, dv)) in pts.iter_mut().zip([(-1i64, 0i64), (1, 0), (0, -1), (0, 1)]) {
            let (nu, nv) = ((u as i64 + du) as usize, (v as i64 + dv) as usize);
            let nz = self.depth_at(nu, nv);
            if nz <= 0.0 || (nz - z).abs() > NORMAL_JUMP_TOL {
                return None;
            }
            *slot = backproject_unchecked(nu as f64, nv as f64, nz, &self.intrinsics);
        }
        let n = (pts[1] - pts[0]).cross(&(pts[3] - pts[2]));
        let len = n.norm();
        if len == 0.0 {
            return None;
        }
        let n = n / len;
        let p = backproject_unchecked(u as f64, v as f64, z, &self.intrinsics);
        Some(if n.dot(&p) > 0.0 { -n } else { n })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_normals_face_camera() {
        let k = CameraIntrinsics::new(100.0, 100.0, 16.0, 12.0, 32, 24).unwrap();
        let mut f = RgbdFrame::new(k);
        f.depth.iter_mut().for_each(|d| *d = 1.0);
        let n = f.normals();
        assert!(n[0].is_none());
        let c = n[f.index(10, 10)].unwrap();
        assert!((c - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        let i = f.index(11, 10);
        f.depth[i] = 0.0;
        assert!(f.normal_at(10, 10).is_none());
    }
}
