use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Bounded retries with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff_ms: 500,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            attempts: 1,
            ..Self::default()
        }
    }

    /// No sleeping between attempts.
    pub fn immediate(attempts: u32) -> Self {
        Self {
            attempts,
            initial_backoff_ms: 0,
            multiplier: 1.0,
        }
    }

    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt as i32);
        Duration::from_millis(ms.min(60_000.0) as u64)
    }

    /// Runs `op` until it succeeds, fails with an error `retryable` rejects,
    /// or the attempts run out. Returns the last error.
    pub fn run<T, E>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, E>,
        retryable: impl Fn(&E) -> bool,
    ) -> Result<T, E> {
        let attempts = self.attempts.max(1);
        let mut attempt = 0;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if attempt + 1 < attempts && retryable(&e) => {
                    let wait = self.backoff(attempt);
                    if !wait.is_zero() {
                        std::thread::sleep(wait);
                    }
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_grows_exponentially() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(0), Duration::from_millis(500));
        assert_eq!(p.backoff(1), Duration::from_millis(1000));
        assert_eq!(p.backoff(2), Duration::from_millis(2000));
    }

    #[test]
    fn stops_after_attempts() {
        let mut calls = 0;
        let r: Result<(), &str> = RetryPolicy::immediate(3).run(
            |_| {
                calls += 1;
                Err("boom")
            },
            |_| true,
        );
        assert_eq!(r, Err("boom"));
        assert_eq!(calls, 3);
    }

    #[test]
    fn succeeds_midway() {
        let r: Result<u32, &str> =
            RetryPolicy::immediate(3).run(|a| if a < 2 { Err("x") } else { Ok(a) }, |_| true);
        assert_eq!(r, Ok(2));
    }

    #[test]
    fn non_retryable_fails_fast() {
        let mut calls = 0;
        let _: Result<(), &str> = RetryPolicy::immediate(5).run(
            |_| {
                calls += 1;
                Err("fatal")
            },
            |_| false,
        );
        assert_eq!(calls, 1);
    }
}
