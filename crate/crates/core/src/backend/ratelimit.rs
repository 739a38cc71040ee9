use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

const ARRIVAL_GUARD: Duration = Duration::from_millis(15);

/// Sliding-window limiter: at most `cap` acquisitions in any window of
/// length `window`.
#[derive(Debug)]
pub struct RateLimiter {
    cap: usize,
    window: Duration,
    issued: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    /// `cap` per second. The window carries a small guard so that arrival
    /// times at the server, not only issue times here, respect the cap.
    pub fn per_second(cap: usize) -> Self {
        Self::new(cap, Duration::from_secs(1) + ARRIVAL_GUARD)
    }

    pub fn new(cap: usize, window: Duration) -> Self {
        assert!(cap > 0, "rate cap must be positive");
        RateLimiter {
            cap,
            window,
            issued: Mutex::new(VecDeque::with_capacity(cap)),
        }
    }

    /// Blocks until a slot is free and returns the instant it was taken.
    pub fn acquire(&self) -> Instant {
        loop {
            let wait = {
                let mut issued = self.issued.lock().unwrap_or_else(|p| p.into_inner());
                let now = Instant::now();
                while issued.front().is_some_and(|t| now.duration_since(*t) >= self.window) {
                    issued.pop_front();
                }
                if issued.len() < self.cap {
                    issued.push_back(now);
                    return now;
                }
                self.window - now.duration_since(*issued.front().unwrap())
            };
            std::thread::sleep(wait);
        }
    }
}
