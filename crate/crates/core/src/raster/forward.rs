use std::cmp::Ordering;

use super::{prepare_splat, CamParams, RenderOutput, RenderRecord, Splat, EXTENT_SIGMAS, MAX_SPLAT_ALPHA, TILE_SIZE};
use crate::camera::Camera;
use crate::gaussian::DeformedSnapshot;
use crate::par;
use crate::real::Real;

/// One splat's contribution at one pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Hit<T> {
    /// Position in the tile list.
    pub slot: usize,
    pub alpha: T,
    pub transmittance: T,
    pub gauss: T,
    pub clamped: bool,
    pub dx: T,
    pub dy: T,
}

/// Walks the depth-ordered splats covering pixel `(px, py)` front to back.
/// Returns the final transmittance.
#[inline]
pub(crate) fn composite_pixel<T: Real>(
    splats: &[Splat<T>],
    list: &[u32],
    px: T,
    py: T,
    mut visit: impl FnMut(&Hit<T>),
) -> T {
    let max_q = T::c(EXTENT_SIGMAS * EXTENT_SIGMAS);
    let cap = T::c(MAX_SPLAT_ALPHA);
    let half = T::c(0.5);
    let mut trans = T::one();
    for (slot, &g) in list.iter().enumerate() {
        let s = &splats[g as usize];
        let dx = px - s.proj.mean2d[0];
        let dy = py - s.proj.mean2d[1];
        let [a, b, c] = s.conic;
        let q = a * dx * dx + T::c(2.0) * b * dx * dy + c * dy * dy;
        if q > max_q {
            continue;
        }
        let gauss = (-half * q).exp();
        let raw = s.opacity * gauss;
        let clamped = raw > cap;
        let alpha = if clamped { cap } else { raw };
        visit(&Hit {
            slot,
            alpha,
            transmittance: trans,
            gauss,
            clamped,
            dx,
            dy,
        });
        trans *= T::one() - alpha;
    }
    trans
}

pub(crate) fn tile_bounds(tile: usize, tiles_x: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let tx = tile % tiles_x;
    let ty = tile / tiles_x;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (x0, y0, (x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height))
}

/// Renders `snapshot` from `cam` over `background`. A scene with no visible
/// Gaussian yields the pure background with zero alpha.
pub fn render<T: Real>(snapshot: &DeformedSnapshot<'_, T>, cam: &Camera, background: [T; 3]) -> RenderOutput<T> {
    let width = cam.width as usize;
    let height = cam.height as usize;
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let cp = CamParams::<T>::new(cam);
    let n = snapshot.len();
    let splats = par::map_range(n, |i| prepare_splat(&cp, snapshot, i, width, height, tiles_x, tiles_y));

    let mut order: Vec<u32> = (0..n as u32).filter(|&i| splats[i as usize].proj.visible).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (splats[a as usize].proj.depth, splats[b as usize].proj.depth);
        da.partial_cmp(&db).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for &g in &order {
        let [x0, y0, x1, y1] = splats[g as usize].tiles;
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                tile_lists[ty * tiles_x + tx].push(g);
            }
        }
    }

    let tile_pixels = par::map_range(tile_lists.len(), |tile| {
        let (x0, y0, x1, y1) = tile_bounds(tile, tiles_x, width, height);
        let list = &tile_lists[tile];
        let mut rgb = Vec::with_capacity((x1 - x0) * (y1 - y0) * 3);
        let mut alpha = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for y in y0..y1 {
            for x in x0..x1 {
                let mut c = [T::zero(); 3];
                let t_final = composite_pixel(&splats, list, T::c(x as f64), T::c(y as f64), |h| {
                    let s = &splats[list[h.slot] as usize];
                    let w = h.alpha * h.transmittance;
                    for k in 0..3 {
                        c[k] += s.color[k] * w;
                    }
                });
                for k in 0..3 {
                    rgb.push(c[k] + background[k] * t_final);
                }
                alpha.push(T::one() - t_final);
            }
        }
        (rgb, alpha)
    });

    let mut rgb = vec![T::zero(); width * height * 3];
    let mut alpha = vec![T::zero(); width * height];
    for (tile, (trgb, talpha)) in tile_pixels.into_iter().enumerate() {
        let (x0, y0, x1, y1) = tile_bounds(tile, tiles_x, width, height);
        let tw = x1 - x0;
        for y in y0..y1 {
            let row = (y - y0) * tw;
            let dst = y * width + x0;
            alpha[dst..dst + tw].copy_from_slice(&talpha[row..row + tw]);
            rgb[dst * 3..(dst + tw) * 3].copy_from_slice(&trgb[row * 3..(row + tw) * 3]);
        }
    }

    RenderOutput {
        width,
        height,
        rgb,
        alpha,
        screen_grad_norm: vec![T::zero(); n],
        visibility: splats.iter().map(|s| s.proj.visible).collect(),
        radii: splats.iter().map(|s| s.radius).collect(),
        record: RenderRecord {
            splats,
            tile_lists,
            tiles_x,
            background,
            camera: cam.clone(),
        },
    }
}

/// Renders several cameras against one read-only snapshot.
pub fn render_many<T: Real>(snapshot: &DeformedSnapshot<'_, T>, cams: &[Camera], background: [T; 3]) -> Vec<RenderOutput<T>> {
    par::map_slice(cams, |cam| render(snapshot, cam, background))
}
