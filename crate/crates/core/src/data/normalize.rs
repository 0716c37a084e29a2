use super::{DanceStream, DataError};

/// Fit the dataset into the unit box.
///
/// Each frame is first translated horizontally so its joint barycenter sits
/// at the origin of the (x, y) plane. One uniform scale and translation,
/// shared by every frame of every stream, then maps the barycenter to
/// (0.5, 0.5) and the lowest z to 0 while keeping every coordinate in [0, 1].
pub fn normalize(streams: &[DanceStream]) -> Result<Vec<DanceStream>, DataError> {
    if streams.is_empty() {
        return Err(DataError::NoStreams);
    }
    let mut out: Vec<DanceStream> = streams.to_vec();

    let mut max_abs_xy = 0.0f64;
    let mut z_min = f64::INFINITY;
    let mut z_max = f64::NEG_INFINITY;
    for s in &mut out {
        let j = s.num_joints;
        for mut row in s.frames_mut().rows_mut() {
            let (mut bx, mut by) = (0.0, 0.0);
            for k in 0..j {
                bx += row[3 * k];
                by += row[3 * k + 1];
            }
            bx /= j as f64;
            by /= j as f64;
            for k in 0..j {
                row[3 * k] -= bx;
                row[3 * k + 1] -= by;
                max_abs_xy = max_abs_xy.max(row[3 * k].abs()).max(row[3 * k + 1].abs());
                z_min = z_min.min(row[3 * k + 2]);
                z_max = z_max.max(row[3 * k + 2]);
            }
        }
    }

    let z_extent = z_max - z_min;
    let scale_xy = if max_abs_xy > 0.0 {
        0.5 / max_abs_xy
    } else {
        f64::INFINITY
    };
    let scale_z = if z_extent > 0.0 { 1.0 / z_extent } else { f64::INFINITY };
    let scale = scale_xy.min(scale_z);
    if !scale.is_finite() {
        return Err(DataError::Degenerate);
    }

    for s in &mut out {
        for mut row in s.frames_mut().rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                let mapped = if c % 3 == 2 {
                    scale * (*v - z_min)
                } else {
                    scale * *v + 0.5
                };
                *v = mapped.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}
