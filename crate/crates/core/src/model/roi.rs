//! RoI max pooling of element boxes from a feature map.
//!
//! A box `[x, x + w)` covers feature cells `floor(x / s) .. ceil((x + w) / s)`,
//! clamped to the map and widened to one cell when empty. Output bin `p` of
//! `out` spans cells `start + floor(p * len / out) .. start + ceil((p + 1) * len / out)`,
//! so bins may overlap when the window is smaller than the output.

use ndarray::{Array3, ArrayViewMut3};

use super::FeatureMap;
use crate::geom::BBox;

/// Half-open cell window `[start, end)` on an axis of `n` cells.
pub fn cell_window(pos: f64, len: f64, stride: usize, n: usize) -> (usize, usize) {
    let s = stride as f64;
    let start = ((pos / s).floor().max(0.0) as usize).min(n.saturating_sub(1));
    let end = (((pos + len) / s).ceil().max(0.0) as usize).min(n);
    (start, end.max(start + 1))
}

/// Bin boundaries along one axis.
pub fn bin_bounds(start: usize, end: usize, out: usize) -> Vec<(usize, usize)> {
    let len = end - start;
    (0..out)
        .map(|p| (start + p * len / out, start + ((p + 1) * len).div_ceil(out)))
        .collect()
}

/// Pooled `(C, out_h, out_w)` tensor for `bbox`.
pub fn roi_pool(fmap: &FeatureMap, bbox: &BBox, out: (usize, usize)) -> Array3<f64> {
    roi_pool_with_argmax(fmap, bbox, out).0
}

/// Pooled tensor plus, per output entry (row-major), the flat index into
/// `fmap.data` of the winning cell. Ties keep the first cell in row-major order.
pub fn roi_pool_with_argmax(
    fmap: &FeatureMap,
    bbox: &BBox,
    out: (usize, usize),
) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = fmap.data.dim();
    let (y0, y1) = cell_window(bbox.y, bbox.h, fmap.stride, h);
    let (x0, x1) = cell_window(bbox.x, bbox.w, fmap.stride, w);
    let ybins = bin_bounds(y0, y1, out.0);
    let xbins = bin_bounds(x0, x1, out.1);
    let mut pooled = Array3::zeros((c, out.0, out.1));
    let mut argmax = Vec::with_capacity(c * out.0 * out.1);
    for ch in 0..c {
        for (py, &(ya, yb)) in ybins.iter().enumerate() {
            for (px, &(xa, xb)) in xbins.iter().enumerate() {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for y in ya..yb {
                    for x in xa..xb {
                        let v = fmap.data[[ch, y, x]];
                        if v > best {
                            best = v;
                            at = (ch * h + y) * w + x;
                        }
                    }
                }
                pooled[[ch, py, px]] = best;
                argmax.push(at);
            }
        }
    }
    (pooled, argmax)
}

/// Routes `grad` (flattened like the pooled tensor) back to the winning cells.
pub fn roi_backward(grad: &[f64], argmax: &[usize], mut d_fmap: ArrayViewMut3<'_, f64>) {
    let flat = d_fmap
        .as_slice_mut()
        .expect("contiguous feature-map gradient");
    for (&g, &i) in grad.iter().zip(argmax) {
        flat[i] += g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    fn ramp() -> FeatureMap {
        FeatureMap {
            data: Array::range(1.0, 17.0, 1.0)
                .into_shape_with_order((1, 4, 4))
                .unwrap(),
            stride: 1,
        }
    }

    #[test]
    fn whole_map_two_by_two() {
        let p = roi_pool(&ramp(), &BBox::new(0., 0., 4., 4.), (2, 2));
        assert_eq!(p, array![[[6.0, 8.0], [14.0, 16.0]]]);
    }

    #[test]
    fn tiny_box_repeats_one_cell() {
        let p = roi_pool(&ramp(), &BBox::new(1.2, 2.5, 0.1, 0.1), (3, 3));
        assert!(p.iter().all(|&v| v == 10.0));
    }

    #[test]
    fn box_outside_clamped_to_edge() {
        let p = roi_pool(&ramp(), &BBox::new(10., 10., 3., 3.), (1, 1));
        assert_eq!(p[[0, 0, 0]], 16.0);
    }

    #[test]
    fn stride_maps_pixels_to_cells() {
        let f = FeatureMap {
            stride: 32,
            ..ramp()
        };
        assert_eq!(cell_window(33.0, 30.0, 32, 4), (1, 2));
        assert_eq!(cell_window(0.0, 128.0, 32, 4), (0, 4));
        let p = roi_pool(&f, &BBox::new(64., 64., 64., 64.), (1, 1));
        assert_eq!(p[[0, 0, 0]], 16.0);
    }

    #[test]
    fn backward_routes_to_argmax() {
        let f = ramp();
        let (_, am) = roi_pool_with_argmax(&f, &BBox::new(0., 0., 4., 4.), (2, 2));
        let mut d = Array3::zeros((1, 4, 4));
        roi_backward(&[1.0, 2.0, 3.0, 4.0], &am, d.view_mut());
        assert_eq!(d[[0, 1, 1]], 1.0);
        assert_eq!(d[[0, 1, 3]], 2.0);
        assert_eq!(d[[0, 3, 1]], 3.0);
        assert_eq!(d[[0, 3, 3]], 4.0);
        assert_eq!(d.sum(), 10.0);
    }
}
