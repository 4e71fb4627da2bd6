//! From attention maps to a pixel-space saliency crop: class-to-patch
//! extraction, aggregation over the last K layers, max-sum window search on
//! the patch grid, and mapping the chosen window back to image coordinates.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionStack;
use crate::scalar::{c, Scalar};

/// Aggregated class-to-patch attention reshaped onto the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrid<T> {
    pub grid: Array2<T>,
    pub source_layers: usize,
}

impl<T: Scalar> AttentionGrid<T> {
    pub fn side(&self) -> usize {
        self.grid.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSelection<T> {
    pub a: usize,
    pub b: usize,
    pub m: usize,
    pub score: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// Row 0 of one layer's token-to-token attention, class column dropped.
pub fn class_to_patch<T: Scalar>(stack: &AttentionStack<T>, layer: usize) -> Result<Array1<T>> {
    let count = stack.layer_count();
    if layer >= count {
        return Err(Error::OutOfRange(format!(
            "attention layer {layer} of {count}"
        )));
    }
    let matrix = &stack.layers[layer];
    if matrix.nrows() != matrix.ncols() || matrix.ncols() < 2 {
        return Err(Error::shape(
            "attention matrix",
            "square, at least 2 tokens",
            format!("{:?}", matrix.dim()),
        ));
    }
    Ok(matrix.row(0).iter().skip(1).cloned().collect())
}

/// Mean of `class_to_patch` over the last `k` layers, reshaped row-major to
/// the square patch grid.
pub fn aggregate_last_k<T: Scalar>(
    stack: &AttentionStack<T>,
    k: usize,
) -> Result<AttentionGrid<T>> {
    let count = stack.layer_count();
    if k == 0 || k > count {
        return Err(Error::InvalidArgument(format!(
            "aggregation depth {k} must be in 1..={count}"
        )));
    }
    let mut sum: Option<Array1<T>> = None;
    for layer in count - k..count {
        let v = class_to_patch(stack, layer)?;
        sum = Some(match sum {
            None => v,
            Some(s) => {
                if s.len() != v.len() {
                    return Err(Error::shape(
                        "attention stack layers",
                        format!("{} patches", s.len()),
                        format!("{} patches", v.len()),
                    ));
                }
                s + v
            }
        });
    }
    let mean = sum.unwrap() * c::<T>(1.0 / k as f64);
    let patches = mean.len();
    let side = (patches as f64).sqrt().round() as usize;
    if side * side != patches {
        return Err(Error::InvalidArgument(format!(
            "patch count {patches} is not a perfect square"
        )));
    }
    let grid = Array2::from_shape_vec((side, side), mean.to_vec()).expect("length checked");
    Ok(AttentionGrid {
        grid,
        source_layers: k,
    })
}

/// Direct row-major sum of the `m`-by-`m` window at `(a, b)`. This is the
/// authoritative score; the prefix-sum scan only narrows candidates.
fn window_sum<T: Scalar>(grid: &Array2<T>, a: usize, b: usize, m: usize) -> T {
    let mut total = T::zero();
    for i in 0..m {
        for j in 0..m {
            total = total + grid[[a + i, b + j]];
        }
    }
    total
}

/// Location of the maximum-sum `m`-by-`m` window. Prefix sums locate the
/// near-maximal windows in O(side^2); those candidates are then re-scored by
/// direct summation so that exact ties resolve to the smallest row, then the
/// smallest column.
pub fn find_window<T: Scalar>(grid: &AttentionGrid<T>, m: usize) -> Result<WindowSelection<T>> {
    let side = grid.side();
    if grid.grid.ncols() != side {
        return Err(Error::shape(
            "attention grid",
            "square",
            format!("{:?}", grid.grid.dim()),
        ));
    }
    if m == 0 || m > side {
        return Err(Error::InvalidArgument(format!(
            "window side {m} must be in 1..={side}"
        )));
    }

    let mut prefix: Array2<T> = Array2::zeros((side + 1, side + 1));
    for i in 0..side {
        for j in 0..side {
            prefix[[i + 1, j + 1]] =
                grid.grid[[i, j]] + prefix[[i, j + 1]] + prefix[[i + 1, j]] - prefix[[i, j]];
        }
    }
    let window_from_prefix = |a: usize, b: usize| {
        prefix[[a + m, b + m]] - prefix[[a, b + m]] - prefix[[a + m, b]] + prefix[[a, b]]
    };

    let mut max_fast = T::neg_infinity();
    for a in 0..=side - m {
        for b in 0..=side - m {
            let s = window_from_prefix(a, b);
            if s > max_fast {
                max_fast = s;
            }
        }
    }
    // Margin covering prefix-sum rounding, so no true maximum is missed.
    let band = grid.grid.iter().map(|&v| v.abs()).sum::<T>() * T::epsilon() * c::<T>(4.0);

    let mut best: Option<WindowSelection<T>> = None;
    for a in 0..=side - m {
        for b in 0..=side - m {
            if window_from_prefix(a, b) < max_fast - band {
                continue;
            }
            let score = window_sum(&grid.grid, a, b, m);
            let better = match &best {
                None => true,
                Some(sel) => score > sel.score,
            };
            if better {
                best = Some(WindowSelection { a, b, m, score });
            }
        }
    }
    Ok(best.expect("at least one window"))
}

/// Maps a window on the teacher's patch grid to a `crop_size` square on the
/// original image: the window center is scaled from teacher to original
/// coordinates, rounded to the nearest pixel, and the square is clamped to
/// the image bounds.
pub fn window_to_pixel_rect(
    sel: &WindowSelection<impl Scalar>,
    teacher_size: usize,
    patch_size: usize,
    original: (usize, usize),
    crop_size: usize,
) -> Result<PixelRect> {
    let (orig_w, orig_h) = original;
    if orig_w < crop_size || orig_h < crop_size {
        return Err(Error::InvalidArgument(format!(
            "original {orig_w}x{orig_h} is smaller than crop size {crop_size}"
        )));
    }
    if teacher_size == 0 || patch_size == 0 {
        return Err(Error::InvalidArgument(
            "teacher_size and patch_size must be positive".into(),
        ));
    }
    let half_window = sel.m as f64 / 2.0;
    let center_x_teacher = (sel.b as f64 + half_window) * patch_size as f64;
    let center_y_teacher = (sel.a as f64 + half_window) * patch_size as f64;
    let scale_x = orig_w as f64 / teacher_size as f64;
    let scale_y = orig_h as f64 / teacher_size as f64;
    let x = (center_x_teacher * scale_x - crop_size as f64 / 2.0).round();
    let y = (center_y_teacher * scale_y - crop_size as f64 / 2.0).round();
    let clamp = |v: f64, max: usize| (v.max(0.0) as usize).min(max);
    Ok(PixelRect {
        x: clamp(x, orig_w - crop_size),
        y: clamp(y, orig_h - crop_size),
        width: crop_size,
        height: crop_size,
    })
}

/// Window side for a given patch-grid side, following the ratio that worked
/// best at full scale (8 windows on a 14-wide grid), at least 1.
pub fn default_window_side(grid_side: usize) -> usize {
    ((grid_side as f64 * 8.0 / 14.0).round() as usize)
        .max(1)
        .min(grid_side)
}

/// Grid rescaled to 0..255 for heatmap export; a constant grid maps to 0.
pub fn grid_to_u8<T: Scalar>(grid: &AttentionGrid<T>) -> Array2<u8> {
    let lo = grid
        .grid
        .iter()
        .map(|v| v.to_f64_lossy())
        .fold(f64::INFINITY, f64::min);
    let hi = grid
        .grid
        .iter()
        .map(|v| v.to_f64_lossy())
        .fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    grid.grid.mapv(|v| {
        if span <= 0.0 {
            0
        } else {
            ((v.to_f64_lossy() - lo) / span * 255.0).round() as u8
        }
    })
}
