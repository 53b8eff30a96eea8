use std::thread;
use std::time::Duration;

/// Runs `op` until it succeeds, fails with a non-retryable error, or `max_retries`
/// retries are spent. The delay doubles after each failed attempt.
pub fn with_backoff<T, E>(
    max_retries: u32,
    initial_delay: Duration,
    retryable: impl Fn(&E) -> bool,
    mut op: impl FnMut(u32) -> Result<T, E>,
) -> Result<T, E> {
    let mut delay = initial_delay;
    let mut attempt = 0;
    loop {
        match op(attempt) {
            Ok(v) => return Ok(v),
            Err(e) if attempt < max_retries && retryable(&e) => {
                thread::sleep(delay);
                delay = delay.saturating_mul(2);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_after_max_retries() {
        let mut calls = 0;
        let r: Result<(), &str> = with_backoff(3, Duration::ZERO, |_| true, |_| {
            calls += 1;
            Err("boom")
        });
        assert!(r.is_err());
        assert_eq!(calls, 4);
    }

    #[test]
    fn non_retryable_fails_fast() {
        let mut calls = 0;
        let r: Result<(), &str> = with_backoff(3, Duration::ZERO, |_| false, |_| {
            calls += 1;
            Err("auth")
        });
        assert!(r.is_err());
        assert_eq!(calls, 1);
    }

    #[test]
    fn recovers() {
        let r: Result<u32, &str> =
            with_backoff(3, Duration::ZERO, |_| true, |n| if n < 2 { Err("flaky") } else { Ok(n) });
        assert_eq!(r, Ok(2));
    }
}
