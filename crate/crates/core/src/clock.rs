//! Session clocks. The virtual clock jumps straight to each requested time;
//! the real-time clock sleeps until it, waking early when interrupted.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Real,
    Virtual,
}

pub trait Clock: Send {
    /// Seconds since session start.
    fn now_s(&self) -> f64;

    /// Moves the clock to `t_s`. Returns `false` if `interrupt` was raised
    /// before the time was reached.
    fn advance_to(&mut self, t_s: f64, interrupt: &AtomicBool) -> bool;

    fn mode(&self) -> ClockMode;
}

#[derive(Debug, Default, Clone)]
pub struct VirtualClock {
    now: f64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for VirtualClock {
    fn now_s(&self) -> f64 {
        self.now
    }

    fn advance_to(&mut self, t_s: f64, interrupt: &AtomicBool) -> bool {
        if interrupt.load(Ordering::SeqCst) {
            return false;
        }
        self.now = self.now.max(t_s);
        true
    }

    fn mode(&self) -> ClockMode {
        ClockMode::Virtual
    }
}

#[derive(Debug, Clone)]
pub struct RealClock {
    start: Instant,
}

impl RealClock {
    const POLL: Duration = Duration::from_millis(5);

    pub fn new() -> Self {
        Self { start: Instant::now() }
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for RealClock {
    fn now_s(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn advance_to(&mut self, t_s: f64, interrupt: &AtomicBool) -> bool {
        let target = self.start + Duration::from_secs_f64(t_s.max(0.0));
        loop {
            if interrupt.load(Ordering::SeqCst) {
                return false;
            }
            let now = Instant::now();
            if now >= target {
                return true;
            }
            std::thread::sleep((target - now).min(Self::POLL));
        }
    }

    fn mode(&self) -> ClockMode {
        ClockMode::Real
    }
}

pub fn make_clock(mode: ClockMode) -> Box<dyn Clock> {
    match mode {
        ClockMode::Real => Box::new(RealClock::new()),
        ClockMode::Virtual => Box::new(VirtualClock::new()),
    }
}
