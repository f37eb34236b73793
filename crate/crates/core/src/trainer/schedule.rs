use super::TrainConfig;

/// Number of linear warmup steps for a run of `total` steps.
pub fn warmup_steps(total: usize, warmup_frac: f64) -> usize {
    (warmup_frac * total as f64).floor() as usize
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to 0 over each
/// restart cycle. The final step of the run sits at the end of its cycle.
pub fn lr_schedule(k: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warmup = warmup_steps(total, cfg.warmup_frac);
    if k < warmup {
        return cfg.lr_peak * k as f64 / warmup as f64;
    }
    let post = k - warmup;
    let period = cfg.restart_period.unwrap_or(total - warmup.min(total));
    if period == 0 {
        return cfg.lr_peak;
    }
    let mut pos = post % period;
    if pos == 0 && post > 0 && k >= total {
        pos = period;
    }
    let tau = pos as f64 / period as f64;
    (cfg.lr_peak * ((std::f64::consts::PI * tau).cos() + 1.0) / 2.0).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(restart: Option<usize>) -> TrainConfig {
        TrainConfig {
            lr_peak: 1e-3,
            warmup_frac: 0.1,
            restart_period: restart,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn examples() {
        let c = cfg(None);
        assert_eq!(lr_schedule(0, 100, &c), 0.0);
        assert_eq!(lr_schedule(10, 100, &c), 1e-3);
        assert!((lr_schedule(55, 100, &c) - 5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(5, 100, &c), 5e-4);
        assert!(lr_schedule(100, 100, &c).abs() < 1e-18);
    }

    #[test]
    fn continuous_except_at_restarts() {
        let c = cfg(Some(30));
        let total = 100;
        for k in 1..=total {
            let (a, b) = (lr_schedule(k - 1, total, &c), lr_schedule(k, total, &c));
            let boundary = k > 10 && (k - 10) % 30 == 0 && k < total;
            if boundary {
                assert_eq!(b, 1e-3);
            } else {
                assert!((a - b).abs() <= 1e-3 * 0.11, "jump at {k}: {a} -> {b}");
            }
        }
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let c = TrainConfig {
            warmup_frac: 0.0,
            ..cfg(None)
        };
        assert_eq!(lr_schedule(0, 50, &c), 1e-3);
    }
}
