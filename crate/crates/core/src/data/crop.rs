//! Context-padded square crops.
//!
//! For a target of size `w×h` the context side is `s_z = sqrt((w+p)(h+p))`
//! with `p = context_amount·(w+h)`. The exemplar covers `s_z` source pixels,
//! the search window `s_z·search_scale`. Crop pixel `i` of an `n`-pixel crop
//! samples the source at `c + (i − (n−1)/2)·side/n`; everything outside the
//! frame reads the frame's mean color.

use image::RgbImage;

use crate::config::DataConfig;
use crate::data::{mean_color, Mask};
use crate::error::Result;
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// A square source window resampled to `out×out` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextWindow {
    pub cx: f64,
    pub cy: f64,
    /// Side in source pixels.
    pub side: f64,
    pub out: usize,
}

impl ContextWindow {
    pub fn context_side(target_w: f64, target_h: f64, context_amount: f64) -> f64 {
        let p = context_amount * (target_w + target_h);
        ((target_w + p) * (target_h + p)).sqrt()
    }

    /// Source pixels per crop pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.out as f64
    }

    fn half(&self) -> f64 {
        (self.out as f64 - 1.0) / 2.0
    }

    pub fn point_to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.scale();
        ((x - self.cx) / s + self.half(), (y - self.cy) / s + self.half())
    }

    pub fn point_to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        let s = self.scale();
        (self.cx + (u - self.half()) * s, self.cy + (v - self.half()) * s)
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.point_to_crop(b.cx, b.cy);
        BBox::new(cx, cy, b.w / self.scale(), b.h / self.scale())
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.point_to_frame(b.cx, b.cy);
        BBox::new(cx, cy, b.w * self.scale(), b.h * self.scale())
    }

    /// Resample the frame into a `3×out×out` tensor.
    pub fn crop_image(&self, img: &RgbImage) -> Tensor {
        let fill = mean_color(img);
        let (w, h) = (img.width() as i64, img.height() as i64);
        let n = self.out;
        let mut data = vec![0.0; 3 * n * n];
        for i in 0..n {
            for j in 0..n {
                let (sx, sy) = self.point_to_frame(j as f64, i as f64);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let mut acc = [0.0; 3];
                for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let (px, py) = (x0 as i64 + dx, y0 as i64 + dy);
                        if px >= 0 && py >= 0 && px < w && py < h {
                            let p = img.get_pixel(px as u32, py as u32).0;
                            for c in 0..3 {
                                acc[c] += wgt * p[c] as f64;
                            }
                        } else {
                            for c in 0..3 {
                                acc[c] += wgt * fill[c];
                            }
                        }
                    }
                }
                for c in 0..3 {
                    data[c * n * n + i * n + j] = acc[c];
                }
            }
        }
        Tensor::from_parts(vec![3, n, n], data)
    }

    /// Resample a mask into a soft `1×out×out` grid (zero outside the frame).
    pub fn crop_mask(&self, mask: &Mask) -> Tensor {
        let n = self.out;
        let t = mask.to_tensor();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (sx, sy) = self.point_to_frame(j as f64, i as f64);
                data[i * n + j] = crate::tensor::bilinear_zero(t.data(), mask.height, mask.width, sy, sx);
            }
        }
        Tensor::from_parts(vec![1, n, n], data)
    }
}

/// Exemplar and search crops with the target box in search coordinates.
#[derive(Clone, Debug)]
pub struct CropPair {
    pub exemplar: Tensor,
    pub search: Tensor,
    pub gt_box_in_search: BBox,
    pub gt_mask_in_search: Option<Tensor>,
    pub exemplar_window: ContextWindow,
    pub search_window: ContextWindow,
}

/// Exemplar window centered on `box_z`, and search window of the same
/// context measure centered on `search_center` (defaults to the target).
pub fn windows_for(box_z: &BBox, box_x: &BBox, search_center: Option<(f64, f64)>, cfg: &DataConfig) -> (ContextWindow, ContextWindow) {
    let sz = ContextWindow::context_side(box_z.w, box_z.h, cfg.context_amount);
    let ez = ContextWindow {
        cx: box_z.cx,
        cy: box_z.cy,
        side: sz,
        out: cfg.exemplar_size,
    };
    let sx_ctx = ContextWindow::context_side(box_x.w, box_x.h, cfg.context_amount);
    let (cx, cy) = search_center.unwrap_or((box_x.cx, box_x.cy));
    let ex = ContextWindow {
        cx,
        cy,
        side: sx_ctx * cfg.search_scale(),
        out: cfg.search_size,
    };
    (ez, ex)
}

/// Build a training/evaluation crop pair. `search_jitter` shifts the search
/// center (source pixels) and scales its side.
pub fn crop_exemplar_search(
    frame_z: &RgbImage,
    box_z: &BBox,
    frame_x: &RgbImage,
    box_x: &BBox,
    mask_x: Option<&Mask>,
    cfg: &DataConfig,
    search_jitter: (f64, f64, f64),
) -> Result<CropPair> {
    box_z.validate()?;
    box_x.validate()?;
    let (dx, dy, ds) = search_jitter;
    let (ez, mut ex) = windows_for(box_z, box_x, Some((box_x.cx + dx, box_x.cy + dy)), cfg);
    ex.side *= ds;
    Ok(CropPair {
        exemplar: ez.crop_image(frame_z),
        search: ex.crop_image(frame_x),
        gt_box_in_search: ex.box_to_crop(box_x),
        gt_mask_in_search: mask_x.map(|m| ex.crop_mask(m)),
        exemplar_window: ez,
        search_window: ex,
    })
}
