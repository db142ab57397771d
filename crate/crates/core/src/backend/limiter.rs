use std::sync::{Condvar, Mutex};

/// Counting semaphore capping concurrent backend requests.
#[derive(Debug)]
pub struct Limiter {
    capacity: usize,
    state: Mutex<(usize, usize)>, // (in flight, peak)
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "limiter capacity must be positive");
        Self {
            capacity,
            state: Mutex::new((0, 0)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap();
        while st.0 >= self.capacity {
            st = self.freed.wait(st).unwrap();
        }
        st.0 += 1;
        st.1 = st.1.max(st.0);
        Permit { limiter: self }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Highest number of permits held at once so far.
    pub fn peak(&self) -> usize {
        self.state.lock().unwrap().1
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.limiter.state.lock().unwrap();
        st.0 -= 1;
        self.limiter.freed.notify_one();
    }
}
