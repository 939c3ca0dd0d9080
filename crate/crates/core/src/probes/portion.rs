use crate::error::{Error, Result};

/// Smallest fraction of the image a crop must cover: the receptive-field
/// footprint as a share of the image area, capped at 1, times `c_min`.
pub fn total_min_portion(rf_side: usize, image: (usize, usize), c_min: f64) -> Result<f64> {
    if rf_side == 0 || image.0 == 0 || image.1 == 0 {
        return Err(Error::invalid(format!("sizes must be positive, got rf {rf_side} and image {image:?}")));
    }
    if !(c_min > 0.0 && c_min <= 1.0) {
        return Err(Error::invalid(format!("c_min must lie in (0, 1], got {c_min}")));
    }
    let share = (rf_side * rf_side) as f64 / (image.0 * image.1) as f64;
    Ok(share.min(1.0) * c_min)
}
