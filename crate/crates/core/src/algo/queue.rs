use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{DataPoint, MiniBatch};

/// Multi-producer, single-consumer FIFO of data-points with a blocking take.
#[derive(Debug, Default)]
pub struct DataPointQueue {
    inner: Mutex<VecDeque<DataPoint>>,
    ready: Condvar,
}

impl DataPointQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, dp: DataPoint) {
        self.inner.lock().expect("queue poisoned").push_back(dp);
        self.ready.notify_all();
    }

    pub fn extend(&self, points: impl IntoIterator<Item = DataPoint>) {
        self.inner.lock().expect("queue poisoned").extend(points);
        self.ready.notify_all();
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("queue poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Blocks until `bs` points are queued, then removes exactly `bs` in
    /// FIFO order.
    pub fn take(&self, bs: usize) -> MiniBatch {
        let mut q = self.inner.lock().expect("queue poisoned");
        while q.len() < bs {
            q = self.ready.wait(q).expect("queue poisoned");
        }
        MiniBatch::new(q.drain(..bs).collect())
    }

    /// Like [`take`](Self::take) but gives up after `timeout`. Never
    /// returns a short batch.
    pub fn take_timeout(&self, bs: usize, timeout: Duration) -> Option<MiniBatch> {
        let deadline = Instant::now() + timeout;
        let mut q = self.inner.lock().expect("queue poisoned");
        while q.len() < bs {
            let left = deadline.checked_duration_since(Instant::now())?;
            q = self.ready.wait_timeout(q, left).expect("queue poisoned").0;
        }
        Some(MiniBatch::new(q.drain(..bs).collect()))
    }

    pub fn try_take(&self, bs: usize) -> Option<MiniBatch> {
        let mut q = self.inner.lock().expect("queue poisoned");
        (q.len() >= bs).then(|| MiniBatch::new(q.drain(..bs).collect()))
    }
}

pub fn assemble_batch(queue: &DataPointQueue, bs: usize) -> MiniBatch {
    queue.take(bs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Observation;
    use std::collections::HashSet;
    use std::sync::Arc;

    fn tagged(id: usize) -> DataPoint {
        DataPoint {
            obs: Observation(vec![0.0]),
            action: 0,
            n_step_return: id as f64,
        }
    }

    fn ids(b: &MiniBatch) -> Vec<usize> {
        b.points().iter().map(|d| d.n_step_return as usize).collect()
    }

    #[test]
    fn exact_batch_drains_queue() {
        let q = DataPointQueue::new();
        q.extend((0..5).map(tagged));
        let b = assemble_batch(&q, 5);
        assert_eq!(ids(&b), vec![0, 1, 2, 3, 4]);
        assert!(q.is_empty());
    }

    #[test]
    fn successive_takes_partition_in_order() {
        let q = DataPointQueue::new();
        q.extend((0..64).map(tagged));
        let a = assemble_batch(&q, 32);
        let b = assemble_batch(&q, 32);
        assert_eq!(ids(&a), (0..32).collect::<Vec<_>>());
        assert_eq!(ids(&b), (32..64).collect::<Vec<_>>());
    }

    #[test]
    fn never_returns_short_batch() {
        let q = DataPointQueue::new();
        q.extend((0..3).map(tagged));
        assert!(q.try_take(4).is_none());
        assert!(q.take_timeout(4, Duration::from_millis(20)).is_none());
        assert_eq!(q.len(), 3);
    }

    #[test]
    fn interleaved_producers_lose_nothing() {
        let q = Arc::new(DataPointQueue::new());
        let n_sim = 10;
        let per = 1000;
        let bs = 32;
        let producers: Vec<_> = (0..n_sim)
            .map(|s| {
                let q = Arc::clone(&q);
                std::thread::spawn(move || {
                    for k in 0..per {
                        q.push(tagged(s * per + k));
                    }
                })
            })
            .collect();
        let total = n_sim * per;
        let mut seen = Vec::new();
        while seen.len() + bs <= total {
            seen.extend(ids(&q.take(bs)));
        }
        for p in producers {
            p.join().unwrap();
        }
        if let Some(rest) = q.try_take(q.len()) {
            seen.extend(ids(&rest));
        }
        let unique: HashSet<_> = seen.iter().copied().collect();
        assert_eq!(seen.len(), total);
        assert_eq!(unique.len(), total);
        // each producer's points stay in its own push order
        for s in 0..n_sim {
            let mine: Vec<_> = seen.iter().filter(|&&i| i / per == s).copied().collect();
            assert!(mine.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
