use serde::{Deserialize, Serialize};

use super::SceneError;

/// 2×3 affine map `[x', y'] = M · [x, y, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

/// Ground-truth camera: image px → table mm for generated scenes.
pub const CAMERA: Affine2 = Affine2 {
    m: [[1.98, 0.05, -250.0], [0.04, -2.01, 720.0]],
};

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub const fn apply(&self, x: f64, y: f64) -> [f64; 2] {
        let m = &self.m;
        [m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2]]
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let d = self.determinant();
        if d.abs() < 1e-12 {
            return None;
        }
        let [[a, b, tx], [c, e, ty]] = self.m;
        let (ia, ib, ic, ie) = (e / d, -b / d, -c / d, a / d);
        Some(Affine2 {
            m: [[ia, ib, -(ia * tx + ib * ty)], [ic, ie, -(ic * tx + ie * ty)]],
        })
    }

    pub fn as_array(&self) -> [f64; 6] {
        let m = self.m;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            m: [[v[0], v[1], v[2]], [v[3], v[4], v[5]]],
        }
    }
}

/// Image → robot (table) transform; unusable until fitted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub affine: Option<Affine2>,
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    let scale: f64 = a.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max).powi(3);
    if d.abs() <= 1e-12 * scale.max(1e-300) {
        return None;
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][k] = b[r];
        }
        *o = det(m) / d;
    }
    Some(out)
}

impl Calibration {
    pub fn new(affine: Affine2) -> Self {
        Self { affine: Some(affine) }
    }

    /// Least-squares affine fit from `(image px, table mm)` pairs.
    pub fn fit(pairs: &[([f64; 2], [f64; 2])]) -> Result<Self, SceneError> {
        if pairs.len() < 3 {
            return Err(SceneError::Invalid("calibration needs at least 3 point pairs".into()));
        }
        let mut ata = [[0.0; 3]; 3];
        let mut atx = [0.0; 3];
        let mut aty = [0.0; 3];
        for (p, q) in pairs {
            let row = [p[0], p[1], 1.0];
            for i in 0..3 {
                for j in 0..3 {
                    ata[i][j] += row[i] * row[j];
                }
                atx[i] += row[i] * q[0];
                aty[i] += row[i] * q[1];
            }
        }
        let (Some(rx), Some(ry)) = (solve3(ata, atx), solve3(ata, aty)) else {
            return Err(SceneError::Invalid("calibration points are collinear".into()));
        };
        Ok(Self::new(Affine2 { m: [rx, ry] }))
    }

    /// Largest fit error over the given pairs, in mm.
    pub fn residual(&self, pairs: &[([f64; 2], [f64; 2])]) -> Result<f64, SceneError> {
        let mut worst: f64 = 0.0;
        for (p, q) in pairs {
            let r = self.image_to_robot(*p)?;
            worst = worst.max(((r[0] - q[0]).powi(2) + (r[1] - q[1]).powi(2)).sqrt());
        }
        Ok(worst)
    }

    pub fn image_to_robot(&self, px: [f64; 2]) -> Result<[f64; 2], SceneError> {
        let a = self.affine.ok_or_else(|| SceneError::Invalid("calibration has not been fitted".into()))?;
        Ok(a.apply(px[0], px[1]))
    }

    pub fn robot_to_image(&self, mm: [f64; 2]) -> Result<[f64; 2], SceneError> {
        let a = self.affine.ok_or_else(|| SceneError::Invalid("calibration has not been fitted".into()))?;
        let inv = a.inverse().ok_or_else(|| SceneError::Invalid("calibration is singular".into()))?;
        Ok(inv.apply(mm[0], mm[1]))
    }
}
