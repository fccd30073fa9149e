use rand::Rng;

use crate::error::{Error, Result};
use crate::DfpRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Bounded replay buffer. Entries below the offline watermark are never
/// evicted; once full, online entries are overwritten oldest-first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    storage: Vec<Transition>,
    capacity: usize,
    offline_watermark: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            storage: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            offline_watermark: 0,
            cursor: 0,
        }
    }

    /// Buffer holding `offline` and sized for `online_steps` more entries.
    pub fn with_offline(offline: Vec<Transition>, online_steps: usize) -> Result<Self> {
        let mut buf = Self::new(offline.len() + online_steps);
        buf.load_offline(offline)?;
        Ok(buf)
    }

    /// Appends protected offline data. Must precede any online insertion.
    pub fn load_offline(&mut self, data: Vec<Transition>) -> Result<()> {
        if self.storage.len() != self.offline_watermark {
            return Err(Error::InvalidConfig(
                "offline data must be loaded before online transitions".into(),
            ));
        }
        if self.storage.len() + data.len() > self.capacity {
            return Err(Error::BufferFull {
                capacity: self.capacity,
            });
        }
        self.storage.extend(data);
        self.offline_watermark = self.storage.len();
        Ok(())
    }

    pub fn add(&mut self, t: Transition) -> Result<()> {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
            return Ok(());
        }
        let online_slots = self.capacity - self.offline_watermark;
        if online_slots == 0 {
            return Err(Error::BufferFull {
                capacity: self.capacity,
            });
        }
        self.storage[self.offline_watermark + self.cursor] = t;
        self.cursor = (self.cursor + 1) % online_slots;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn offline_len(&self) -> usize {
        self.offline_watermark
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.storage[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    /// Uniform indices, with replacement.
    pub fn sample_indices(&self, batch_size: usize, rng: &mut DfpRng) -> Result<Vec<usize>> {
        if self.storage.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch_size)
            .map(|_| rng.random_range(0..self.storage.len()))
            .collect())
    }

    pub fn sample(&self, batch_size: usize, rng: &mut DfpRng) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| &self.storage[i])
            .collect())
    }
}
