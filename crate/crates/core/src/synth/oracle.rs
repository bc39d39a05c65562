use crate::model::PixelVideo;

use super::Direction;

/// Median per-frame displacement below which a clip counts as static, in pixels.
pub const STATIC_SPEED: f64 = 0.25;
/// Minimum contrast (summed RGB over the frame median) for a frame to hold an object.
const MIN_CONTRAST: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionVerdict {
    /// `None` means static.
    pub direction: Option<Direction>,
    /// Median displacement along the dominant axis, pixels per frame.
    pub speed: f64,
    /// Fraction of frame pairs agreeing with the verdict.
    pub confidence: f64,
}

impl MotionVerdict {
    pub fn is_static(&self) -> bool {
        self.direction.is_none()
    }
}

/// Foreground centroid `(x, y)`: pixels brighter than the frame median by at least
/// half the peak contrast, weighted by their excess.
fn centroid(frame: &[u8], width: usize) -> Option<(f64, f64)> {
    let intensity: Vec<f64> = frame.chunks(3).map(|p| p.iter().map(|&v| v as f64).sum()).collect();
    let mut sorted = intensity.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let peak = sorted[sorted.len() - 1] - median;
    if peak < MIN_CONTRAST {
        return None;
    }
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (i, &v) in intensity.iter().enumerate() {
        let w = v - median;
        if w >= 0.5 * peak {
            sw += w;
            sx += w * (i % width) as f64;
            sy += w * (i / width) as f64;
        }
    }
    Some((sx / sw, sy / sw))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Judges motion from pixels alone.
pub fn motion_oracle(video: &PixelVideo) -> MotionVerdict {
    let still = MotionVerdict {
        direction: None,
        speed: 0.0,
        confidence: 1.0,
    };
    let centroids: Vec<Option<(f64, f64)>> = (0..video.frames).map(|f| centroid(video.frame(f), video.width)).collect();
    let steps: Vec<(f64, f64)> = centroids
        .windows(2)
        .filter_map(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) => Some((b.0 - a.0, b.1 - a.1)),
            _ => None,
        })
        .collect();
    if steps.is_empty() {
        return MotionVerdict {
            confidence: 0.0,
            ..still
        };
    }
    let n = steps.len() as f64;
    let mean_x = steps.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_y = steps.iter().map(|s| s.1).sum::<f64>() / n;
    let horizontal = mean_x.abs() >= mean_y.abs();
    let along: Vec<f64> = steps.iter().map(|s| if horizontal { s.0 } else { s.1 }).collect();
    let mean = if horizontal { mean_x } else { mean_y };
    let sign = if mean >= 0.0 { 1.0 } else { -1.0 };
    let speed = median(along.iter().map(|d| d * sign).collect());
    if speed < STATIC_SPEED {
        let agree = along.iter().filter(|d| d.abs() < STATIC_SPEED).count() as f64;
        return MotionVerdict {
            direction: None,
            speed: speed.max(0.0),
            confidence: agree / n,
        };
    }
    let direction = match (horizontal, sign > 0.0) {
        (true, true) => Direction::Right,
        (true, false) => Direction::Left,
        (false, true) => Direction::Down,
        (false, false) => Direction::Up,
    };
    let agree = along.iter().filter(|&&d| d * sign > 0.0).count() as f64;
    MotionVerdict {
        direction: Some(direction),
        speed,
        confidence: agree / n,
    }
}
