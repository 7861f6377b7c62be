use std::time::Instant;

use crate::ledger::Millis;

pub const DEFAULT_TICK_INTERVAL_MS: Millis = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    Virtual,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClockError {
    #[error("tick interval must be positive")]
    ZeroInterval,
    #[error("clock cannot move backwards from {now} to {requested}")]
    Backwards { now: Millis, requested: Millis },
}

/// Session clock. Virtual time only moves when told to; wall time follows a
/// monotonic origin but is never allowed to go backwards either.
#[derive(Debug, Clone)]
pub struct Clock {
    mode: ClockMode,
    now: Millis,
    tick_interval: Millis,
    origin: Option<Instant>,
}

impl Clock {
    pub fn new_virtual(tick_interval: Millis) -> Result<Self, ClockError> {
        Self::new(ClockMode::Virtual, tick_interval)
    }

    pub fn new_wall(tick_interval: Millis) -> Result<Self, ClockError> {
        Self::new(ClockMode::Wall, tick_interval)
    }

    fn new(mode: ClockMode, tick_interval: Millis) -> Result<Self, ClockError> {
        if tick_interval == 0 {
            return Err(ClockError::ZeroInterval);
        }
        Ok(Self {
            mode,
            now: 0,
            tick_interval,
            origin: (mode == ClockMode::Wall).then(Instant::now),
        })
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn tick_interval(&self) -> Millis {
        self.tick_interval
    }

    pub fn advance_to(&mut self, t: Millis) -> Result<(), ClockError> {
        if t < self.now {
            return Err(ClockError::Backwards {
                now: self.now,
                requested: t,
            });
        }
        self.now = t;
        Ok(())
    }

    /// Wall time elapsed since the clock started. Always the current time for
    /// a virtual clock.
    pub fn wall_elapsed(&self) -> Millis {
        match self.origin {
            Some(origin) => (origin.elapsed().as_millis() as Millis).max(self.now),
            None => self.now,
        }
    }

    /// First tick strictly after `t`.
    pub fn next_tick_after(&self, t: Millis) -> Millis {
        (t / self.tick_interval + 1) * self.tick_interval
    }
}

pub fn time_passage_text(now: Millis) -> String {
    format!("Time passed. t={now} ms")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_interval_rejected() {
        assert_eq!(Clock::new_virtual(0).unwrap_err(), ClockError::ZeroInterval);
    }

    #[test]
    fn ticks_in_23_seconds() {
        let clock = Clock::new_virtual(DEFAULT_TICK_INTERVAL_MS).unwrap();
        let mut ticks = Vec::new();
        let mut t = clock.next_tick_after(0);
        while t <= 23_000 {
            ticks.push(t);
            t = clock.next_tick_after(t);
        }
        assert_eq!(ticks, vec![5000, 10000, 15000, 20000]);
    }

    #[test]
    fn monotone() {
        let mut clock = Clock::new_virtual(10).unwrap();
        clock.advance_to(5).unwrap();
        clock.advance_to(5).unwrap();
        assert!(clock.advance_to(4).is_err());
        assert_eq!(clock.now(), 5);
    }
}
