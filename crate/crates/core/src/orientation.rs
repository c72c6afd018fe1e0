//! Local edge orientation from the eigen-system of the 2x2 structure tensor.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid2;

pub const DEFAULT_WINDOW_RADIUS: usize = 3;
/// Below this anisotropy the orientation is treated as undefined.
pub const MIN_ANISOTROPY: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum OrientationError {
    #[error("center ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("window radius must be >= 1")]
    BadRadius,
    #[error("gradient images differ in shape")]
    ShapeMismatch,
}

/// Which axis of the local edge the reported angle describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientMode {
    /// Along the edge, perpendicular to the dominant gradient.
    #[default]
    Tangent,
    /// Along the dominant gradient.
    Gradient,
}

/// Symmetric 2x2 matrix `[xx, xy; xy, yy]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tensor2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Tensor2 {
    pub fn scaled(self, c: f64) -> Self {
        Self {
            xx: self.xx * c,
            xy: self.xy * c,
            yy: self.yy * c,
        }
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.xx * v[0] + self.xy * v[1],
            self.xy * v[0] + self.yy * v[1],
        ]
    }

    /// Eigenvalues `(larger, smaller)`.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mean = 0.5 * (self.xx + self.yy);
        let half_diff = 0.5 * (self.xx - self.yy);
        let r = half_diff.hypot(self.xy);
        (mean + r, mean - r)
    }

    /// Unit eigenvector of the larger eigenvalue. `(1, 0)` when the tensor is isotropic.
    pub fn major_eigenvector(&self) -> [f64; 2] {
        let (l1, _) = self.eigenvalues();
        // pick the better-conditioned of the two equivalent forms
        let (a, b) = if self.xx >= self.yy {
            (l1 - self.yy, self.xy)
        } else {
            (self.xy, l1 - self.xx)
        };
        let n = a.hypot(b);
        if n == 0.0 || !n.is_finite() {
            [1.0, 0.0]
        } else {
            [a / n, b / n]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeOrientation {
    /// Radians in (-pi/2, pi/2].
    pub theta: f64,
    /// `1 - lambda2 / lambda1`, 0 for a zero tensor.
    pub anisotropy: f64,
    /// Unit vector along the reported axis; its angle folds to `theta`.
    pub eigenvector: [f64; 2],
}

impl EdgeOrientation {
    pub fn is_degenerate(&self) -> bool {
        self.anisotropy < MIN_ANISOTROPY
    }
}

/// Fold an angle of an undirected line into (-pi/2, pi/2].
pub fn fold_line_angle(a: f64) -> f64 {
    let mut t = a.rem_euclid(PI);
    if t > FRAC_PI_2 {
        t -= PI;
    }
    t
}

/// Sum of gradient outer products over a `(2r+1)^2` window, clamped to the image.
pub fn structure_tensor(
    gx: &Grid2<f64>,
    gy: &Grid2<f64>,
    center: [usize; 2],
    window_radius: usize,
) -> Result<Tensor2, OrientationError> {
    if !gx.same_shape(gy) {
        return Err(OrientationError::ShapeMismatch);
    }
    if window_radius == 0 {
        return Err(OrientationError::BadRadius);
    }
    let [cx, cy] = center;
    if cx >= gx.width || cy >= gx.height {
        return Err(OrientationError::OutOfBounds {
            x: cx,
            y: cy,
            width: gx.width,
            height: gx.height,
        });
    }
    let x0 = cx.saturating_sub(window_radius);
    let x1 = (cx + window_radius).min(gx.width - 1);
    let y0 = cy.saturating_sub(window_radius);
    let y1 = (cy + window_radius).min(gx.height - 1);
    let mut t = Tensor2::default();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (a, b) = (gx.get(x, y), gy.get(x, y));
            t.xx += a * a;
            t.xy += a * b;
            t.yy += b * b;
        }
    }
    Ok(t)
}

pub fn principal_orientation(t: &Tensor2) -> EdgeOrientation {
    principal_orientation_with(t, OrientMode::Tangent)
}

pub fn principal_orientation_with(t: &Tensor2, mode: OrientMode) -> EdgeOrientation {
    let (l1, l2) = t.eigenvalues();
    let anisotropy = if l1 > 0.0 {
        (1.0 - l2.max(0.0) / l1).clamp(0.0, 1.0)
    } else {
        0.0
    };
    if anisotropy < MIN_ANISOTROPY {
        return EdgeOrientation {
            theta: 0.0,
            anisotropy,
            eigenvector: [1.0, 0.0],
        };
    }
    let g = t.major_eigenvector();
    let axis = match mode {
        OrientMode::Gradient => g,
        OrientMode::Tangent => [-g[1], g[0]],
    };
    EdgeOrientation {
        theta: fold_line_angle(axis[1].atan2(axis[0])),
        anisotropy,
        eigenvector: axis,
    }
}

/// Orientation at `center` of a slice with precomputed Sobel gradients.
pub fn orientation_at(
    gx: &Grid2<f64>,
    gy: &Grid2<f64>,
    center: [usize; 2],
    window_radius: usize,
    mode: OrientMode,
) -> Result<EdgeOrientation, OrientationError> {
    let t = structure_tensor(gx, gy, center, window_radius)?;
    Ok(principal_orientation_with(&t, mode))
}
