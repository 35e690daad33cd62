use serde::{Deserialize, Serialize};

/// Default frame period of the 25 Hz grasp camera.
pub const FRAME_PERIOD_S: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimClock {
    t: f64,
    pub step: f64,
}

impl Default for SimClock {
    fn default() -> Self {
        Self {
            t: 0.0,
            step: FRAME_PERIOD_S,
        }
    }
}

impl SimClock {
    pub fn now(&self) -> f64 {
        self.t
    }

    pub fn tick(&mut self) -> f64 {
        self.t += self.step;
        self.t
    }

    /// Advance by an arbitrary non-negative duration.
    pub fn advance(&mut self, seconds: f64) -> f64 {
        if seconds > 0.0 {
            self.t += seconds;
        }
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_at_frame_rate_and_never_rewinds() {
        let mut c = SimClock::default();
        for _ in 0..25 {
            c.tick();
        }
        assert!((c.now() - 1.0).abs() < 1e-12);
        c.advance(-5.0);
        assert!((c.now() - 1.0).abs() < 1e-12);
    }
}
