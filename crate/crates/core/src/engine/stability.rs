use super::StabilityConfig;

// Absorbs binary rounding in differences like 500.3 - 499.8.
const RANGE_SLACK_G: f64 = 1e-9;

/// True iff the last `window_frames` samples span at most `stable_range_g`.
/// Fewer samples than a full window is "not yet stable".
pub fn is_stable(window: &[f64], cfg: &StabilityConfig) -> bool {
    window.len() >= cfg.window_frames && window_range(window, cfg) <= cfg.stable_range_g + RANGE_SLACK_G
}

/// True when the last `window_frames` samples move in one direction only and
/// do not all agree: a settling tail rather than noise around a level.
pub fn is_creeping(window: &[f64], cfg: &StabilityConfig) -> bool {
    if window.len() < cfg.window_frames {
        return false;
    }
    let w = &window[window.len() - cfg.window_frames..];
    let rising = w.windows(2).all(|p| p[1] >= p[0]);
    let falling = w.windows(2).all(|p| p[1] <= p[0]);
    (rising || falling) && w[0] != w[w.len() - 1]
}

/// Max-min spread of the last `window_frames` samples; infinite while the
/// window is still filling.
fn window_range(window: &[f64], cfg: &StabilityConfig) -> f64 {
    if window.len() < cfg.window_frames {
        return f64::INFINITY;
    }
    let (lo, hi) = window[window.len() - cfg.window_frames..]
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| {
            (lo.min(w), hi.max(w))
        });
    hi - lo
}

/// Mean of the last `window_frames` samples.
pub fn stable_weight(window: &[f64], cfg: &StabilityConfig) -> f64 {
    let n = cfg.window_frames.min(window.len()).max(1);
    let recent = &window[window.len().saturating_sub(n)..];
    recent.iter().sum::<f64>() / recent.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_window_is_stable() {
        assert!(is_stable(&[500.0; 10], &StabilityConfig::default()));
    }

    #[test]
    fn range_equal_to_epsilon_is_stable() {
        let w = [499.8, 500.0, 500.3, 500.1, 499.9, 500.2, 500.0, 499.8, 500.3, 500.0];
        assert!(is_stable(&w, &StabilityConfig::default()));
    }

    #[test]
    fn ramp_is_unstable() {
        let w: Vec<f64> = (0..10).map(|i| 500.0 + i as f64 * 10.0 / 9.0).collect();
        assert!(!is_stable(&w, &StabilityConfig::default()));
    }

    #[test]
    fn settling_tail_is_creeping_but_level_and_noise_are_not() {
        let cfg = StabilityConfig::default();
        let tail: Vec<f64> = (0..10).map(|i| 498.0 + 0.3 * (-(i as f64) / 3.0).exp()).collect();
        assert!(is_stable(&tail, &cfg));
        assert!(is_creeping(&tail, &cfg));
        assert!(!is_creeping(&[500.0; 10], &cfg));
        let noisy = [499.8, 500.0, 500.3, 500.1, 499.9, 500.2, 500.0, 499.8, 500.3, 500.0];
        assert!(!is_creeping(&noisy, &cfg));
        assert!(!is_creeping(&tail[..9], &cfg));
    }

    #[test]
    fn short_window_is_not_yet_stable() {
        assert!(!is_stable(&[500.0; 9], &StabilityConfig::default()));
        assert!(!is_stable(&[], &StabilityConfig::default()));
    }

    #[test]
    fn only_the_last_window_counts() {
        let mut w = vec![0.0; 5];
        w.extend([500.0; 10]);
        assert!(is_stable(&w, &StabilityConfig::default()));
        assert_eq!(stable_weight(&w, &StabilityConfig::default()), 500.0);
    }
}
