use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{BBox, ClickPoint};

/// Interior margin kept between a click and the box edges, in pixels.
pub const CLICK_MARGIN: f64 = 1.0;

/// Uniform click inside `query_box`, at least one pixel from every edge.
pub fn sample_click_point<R: Rng + ?Sized>(query_box: &BBox, rng: &mut R) -> Result<ClickPoint> {
    if !(query_box.w >= 2.0 && query_box.h >= 2.0) {
        return Err(Error::DegenerateBox {
            w: query_box.w,
            h: query_box.h,
        });
    }
    let x_lo = query_box.x0() + CLICK_MARGIN;
    let x_hi = query_box.x1() - CLICK_MARGIN;
    let y_lo = query_box.y0() + CLICK_MARGIN;
    let y_hi = query_box.y1() - CLICK_MARGIN;
    let x = x_lo + rng.gen::<f64>() * (x_hi - x_lo);
    let y = y_lo + rng.gen::<f64>() * (y_hi - y_lo);
    Ok(ClickPoint::new(x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_pixel_box_forces_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let p = sample_click_point(&BBox::new(10.0, 10.0, 2.0, 2.0), &mut rng).unwrap();
            assert_eq!((p.x, p.y), (10.0, 10.0));
        }
    }

    #[test]
    fn empirical_mean_is_box_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = BBox::new(50.0, 50.0, 20.0, 10.0);
        let n = 10_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let p = sample_click_point(&b, &mut rng).unwrap();
            assert!(b.contains_point(p.x, p.y));
            assert!(p.x >= b.x0() + 1.0 && p.x <= b.x1() - 1.0);
            sx += p.x;
            sy += p.y;
        }
        assert!((sx / n as f64 - 50.0).abs() < 0.5);
        assert!((sy / n as f64 - 50.0).abs() < 0.5);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            sample_click_point(&BBox::new(5.0, 5.0, 1.5, 4.0), &mut rng),
            Err(Error::DegenerateBox { .. })
        ));
    }
}
