//! Boxes, IoU and the 4-tuple delta parameterization.
//!
//! Pixel `(x, y)` has its center at integer coordinates, so an image of
//! width `W` spans `[-0.5, W - 0.5]` horizontally.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box stored as center and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn validate(&self) -> Result<Self> {
        if self.is_valid() {
            Ok(*self)
        } else {
            Err(Error::InvalidBox(format!("{self:?}")))
        }
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = self.x1().min(other.x1()) - self.x0().max(other.x0());
        let ih = self.y1().min(other.y1()) - self.y0().max(other.y0());
        iw.max(0.0) * ih.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }

    /// Clip to `[lo, hi]` on both axes; may produce an empty box.
    pub fn clip(&self, x_lo: f64, y_lo: f64, x_hi: f64, y_hi: f64) -> BBox {
        BBox::from_corners(
            self.x0().clamp(x_lo, x_hi),
            self.y0().clamp(y_lo, y_hi),
            self.x1().clamp(x_lo, x_hi),
            self.y1().clamp(y_lo, y_hi),
        )
    }

    /// Clip to an image of `width × height` pixels.
    pub fn clip_to_image(&self, width: usize, height: usize) -> BBox {
        self.clip(-0.5, -0.5, width as f64 - 0.5, height as f64 - 0.5)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }
}

/// Regression target `t = (tx, ty, tw, th)` relative to a reference box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }

    /// Center shifts in units of the reference size; log size ratios.
    pub fn encode(target: &BBox, reference: &BBox) -> Self {
        Self {
            tx: (target.cx - reference.cx) / reference.w,
            ty: (target.cy - reference.cy) / reference.h,
            tw: (target.w / reference.w).ln(),
            th: (target.h / reference.h).ln(),
        }
    }

    pub fn decode(&self, reference: &BBox) -> BBox {
        BBox::new(
            reference.cx + self.tx * reference.w,
            reference.cy + self.ty * reference.h,
            reference.w * self.tw.exp(),
            reference.h * self.th.exp(),
        )
    }
}

/// Rotated rectangle; `angle_deg` is the direction of the `w` side measured
/// from the +x axis, normalized to `[0, 90)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub angle_deg: f64,
}

impl RotatedBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (hw, hh) = (0.5 * self.w, 0.5 * self.h);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(u, v)| (self.cx + u * c - v * s, self.cy + u * s + v * c))
    }

    /// Axis-aligned envelope.
    pub fn bounding_box(&self) -> BBox {
        let pts = self.corners();
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for (x, y) in pts {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        BBox::from_corners(x0, y0, x1, y1)
    }

    pub fn from_axis_aligned(b: &BBox) -> Self {
        Self {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            angle_deg: 0.0,
        }
    }
}
