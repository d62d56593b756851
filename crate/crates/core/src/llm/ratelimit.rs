use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Token bucket shared by every outbound call of a process.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    refill_per_sec: f64,
    disabled: bool,
    state: Mutex<Bucket>,
}

#[derive(Debug)]
struct Bucket {
    tokens: f64,
    last: Instant,
}

impl RateLimiter {
    /// `requests_per_minute` of zero disables limiting.
    pub fn per_minute(requests_per_minute: u32) -> Self {
        let capacity = f64::from(requests_per_minute.max(1));
        RateLimiter {
            capacity,
            refill_per_sec: capacity / 60.0,
            disabled: requests_per_minute == 0,
            state: Mutex::new(Bucket {
                tokens: capacity,
                last: Instant::now(),
            }),
        }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        if self.disabled {
            return;
        }
        loop {
            let wait = {
                let mut bucket = self.state.lock().unwrap();
                let now = Instant::now();
                let elapsed = now.duration_since(bucket.last).as_secs_f64();
                bucket.tokens = (bucket.tokens + elapsed * self.refill_per_sec).min(self.capacity);
                bucket.last = now;
                if bucket.tokens >= 1.0 {
                    bucket.tokens -= 1.0;
                    return;
                }
                (1.0 - bucket.tokens) / self.refill_per_sec
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}
