//! Image-space reconstruction losses with their gradients.

use crate::error::{Error, Result};
use crate::frame::Image;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconLoss {
    /// Mean absolute RGB error over all pixels and channels.
    pub rec: f32,
    /// Mean squared alpha-vs-mask error; zero when the target has no mask.
    pub mask: f32,
    pub d_rgb: Vec<f32>,
    pub d_alpha: Vec<f32>,
}

/// L1 on colour and MSE on alpha against the target. Gradients are scaled by
/// `w_rec` and `w_mask` so they can be handed straight to the rasterizer.
pub fn recon_loss(rgb: &[f32], alpha: &[f32], target: &Image, w_rec: f32, w_mask: f32) -> Result<ReconLoss> {
    let n = target.width * target.height;
    if rgb.len() != 3 * n || alpha.len() != n {
        return Err(Error::Shape(format!(
            "render has {} rgb / {} alpha values, target is {}×{}",
            rgb.len(),
            alpha.len(),
            target.width,
            target.height
        )));
    }
    let inv_rgb = 1.0 / (3 * n) as f64;
    let mut rec = 0.0f64;
    let d_rgb = rgb
        .iter()
        .zip(&target.rgb)
        .map(|(&x, &y)| {
            let d = x - y;
            rec += d.abs() as f64;
            // subgradient 0 at the kink
            w_rec * (inv_rgb as f32) * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 }
        })
        .collect();
    let (mask, d_alpha) = match &target.mask {
        Some(m) => {
            let inv = 1.0 / n as f64;
            let mut sum = 0.0f64;
            let d = alpha
                .iter()
                .zip(m)
                .map(|(&a, &y)| {
                    let diff = a - y;
                    sum += (diff as f64) * (diff as f64);
                    w_mask * 2.0 * diff * inv as f32
                })
                .collect();
            ((sum * inv) as f32, d)
        }
        None => (0.0, vec![0.0; n]),
    };
    Ok(ReconLoss {
        rec: (rec * inv_rgb) as f32,
        mask,
        d_rgb,
        d_alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target(mask: f32) -> Image {
        Image::new(2, 2, vec![0.25; 12], Some(vec![mask; 4])).unwrap()
    }

    #[test]
    fn identical_render_has_zero_loss() {
        let l = recon_loss(&[0.25; 12], &[1.0; 4], &target(1.0), 1.0, 1.0).unwrap();
        assert_eq!((l.rec, l.mask), (0.0, 0.0));
        assert!(l.d_rgb.iter().chain(&l.d_alpha).all(|&g| g == 0.0));
    }

    #[test]
    fn constant_offset_gives_offset_loss() {
        let l = recon_loss(&[0.35; 12], &[1.0; 4], &target(1.0), 1.0, 1.0).unwrap();
        assert!((l.rec - 0.1).abs() < 1e-6);
        assert!(l.d_rgb.iter().all(|&g| (g - 1.0 / 12.0).abs() < 1e-9));
    }

    #[test]
    fn full_alpha_on_empty_mask() {
        let l = recon_loss(&[0.25; 12], &[1.0; 4], &target(0.0), 1.0, 3.0).unwrap();
        assert_eq!(l.mask, 1.0);
        assert!(l.d_alpha.iter().all(|&g| (g - 3.0 * 2.0 / 4.0).abs() < 1e-6));
    }

    #[test]
    fn mask_gradient_matches_finite_difference() {
        let t = Image::new(1, 2, vec![0.0; 6], Some(vec![0.3, 0.9])).unwrap();
        let alpha = [0.5f32, 0.2];
        let l = recon_loss(&[0.0; 6], &alpha, &t, 1.0, 1.0).unwrap();
        let h = 1e-3;
        let f = |a: [f32; 2]| recon_loss(&[0.0; 6], &a, &t, 1.0, 1.0).unwrap().mask as f64;
        let fd = (f([alpha[0] + h, alpha[1]]) - f([alpha[0] - h, alpha[1]])) / (2.0 * h as f64);
        assert!((fd - l.d_alpha[0] as f64).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(matches!(recon_loss(&[0.0; 9], &[0.0; 4], &target(1.0), 1.0, 1.0), Err(Error::Shape(_))));
    }
}
