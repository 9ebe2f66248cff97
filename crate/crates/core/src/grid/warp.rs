//! Backward bilinear warping.
//!
//! `out(b, c, y, x) = source(b, c, y + flow_y(b, y, x), x + flow_x(b, y, x))`
//! with bilinear interpolation between the four neighbouring cells and zero
//! contribution from neighbours outside the grid. Flow is in grid cells,
//! channel 0 is the x (column) displacement and channel 1 the y (row) one.

use super::{FeatureGrid, Real};
use crate::error::{shape_err, Result};

struct Tap<T> {
    x0: isize,
    y0: isize,
    wx: T,
    wy: T,
}

#[inline]
fn tap<T: Real>(x: usize, y: usize, fx: T, fy: T) -> Tap<T> {
    let px = T::from_usize(x).unwrap() + fx;
    let py = T::from_usize(y).unwrap() + fy;
    let fx0 = px.floor();
    let fy0 = py.floor();
    Tap {
        x0: fx0.to_isize().unwrap_or(isize::MIN / 2),
        y0: fy0.to_isize().unwrap_or(isize::MIN / 2),
        wx: px - fx0,
        wy: py - fy0,
    }
}

#[inline]
fn fetch<T: Real>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

fn check<T: Real>(source: &FeatureGrid<T>, flow: &FeatureGrid<T>) -> Result<()> {
    let [n, _, h, w] = source.shape();
    if flow.channels() != 2 {
        return Err(shape_err!(
            "bilinear_warp: flow needs 2 channels, got {}",
            flow.channels()
        ));
    }
    if flow.shape() != [n, 2, h, w] {
        return Err(shape_err!(
            "bilinear_warp: flow {:?} does not match source {:?}",
            flow.shape(),
            source.shape()
        ));
    }
    Ok(())
}

pub fn bilinear_warp<T: Real>(
    source: &FeatureGrid<T>,
    flow: &FeatureGrid<T>,
) -> Result<FeatureGrid<T>> {
    check(source, flow)?;
    let [n, c, h, w] = source.shape();
    let mut out = FeatureGrid::zeros(source.shape());
    for b in 0..n {
        let (fxs, fys) = (flow.plane(b, 0), flow.plane(b, 1));
        for ch in 0..c {
            let src = source.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let t = tap(x, y, fxs[i], fys[i]);
                    let v00 = fetch(src, h, w, t.y0, t.x0);
                    let v01 = fetch(src, h, w, t.y0, t.x0 + 1);
                    let v10 = fetch(src, h, w, t.y0 + 1, t.x0);
                    let v11 = fetch(src, h, w, t.y0 + 1, t.x0 + 1);
                    let one = T::one();
                    dst[i] = (one - t.wy) * ((one - t.wx) * v00 + t.wx * v01)
                        + t.wy * ((one - t.wx) * v10 + t.wx * v11);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`bilinear_warp`] w.r.t. source and flow.
pub fn bilinear_warp_backward<T: Real>(
    source: &FeatureGrid<T>,
    flow: &FeatureGrid<T>,
    grad_out: &FeatureGrid<T>,
    need_source: bool,
    need_flow: bool,
) -> Result<(Option<FeatureGrid<T>>, Option<FeatureGrid<T>>)> {
    check(source, flow)?;
    grad_out.expect_shape(source.shape(), "bilinear_warp backward grad")?;
    let [n, c, h, w] = source.shape();
    let mut dsrc = need_source.then(|| FeatureGrid::zeros(source.shape()));
    let mut dflow = need_flow.then(|| FeatureGrid::zeros(flow.shape()));
    let one = T::one();
    for b in 0..n {
        let (fxs, fys) = (flow.plane(b, 0), flow.plane(b, 1));
        for ch in 0..c {
            let src = source.plane(b, ch);
            let g = grad_out.plane(b, ch);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let t = tap(x, y, fxs[i], fys[i]);
                    let gi = g[i];
                    if let Some(ds) = dsrc.as_mut() {
                        let plane = ds.plane_mut(b, ch);
                        let mut put = |yy: isize, xx: isize, wgt: T| {
                            if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                                let k = yy as usize * w + xx as usize;
                                plane[k] = plane[k] + gi * wgt;
                            }
                        };
                        put(t.y0, t.x0, (one - t.wy) * (one - t.wx));
                        put(t.y0, t.x0 + 1, (one - t.wy) * t.wx);
                        put(t.y0 + 1, t.x0, t.wy * (one - t.wx));
                        put(t.y0 + 1, t.x0 + 1, t.wy * t.wx);
                    }
                    if let Some(df) = dflow.as_mut() {
                        let v00 = fetch(src, h, w, t.y0, t.x0);
                        let v01 = fetch(src, h, w, t.y0, t.x0 + 1);
                        let v10 = fetch(src, h, w, t.y0 + 1, t.x0);
                        let v11 = fetch(src, h, w, t.y0 + 1, t.x0 + 1);
                        let dx = (one - t.wy) * (v01 - v00) + t.wy * (v11 - v10);
                        let dy = (one - t.wx) * (v10 - v00) + t.wx * (v11 - v01);
                        let px = df.plane_mut(b, 0);
                        px[i] = px[i] + gi * dx;
                        let py = df.plane_mut(b, 1);
                        py[i] = py[i] + gi * dy;
                    }
                }
            }
        }
    }
    Ok((dsrc, dflow))
}
