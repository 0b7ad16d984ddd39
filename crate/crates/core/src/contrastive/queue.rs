use std::collections::VecDeque;

use crate::encoder::Embedding;
use crate::error::{Error, Result};

/// Fixed-capacity FIFO of key embeddings. Pushing into a full queue evicts
/// the oldest entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    entries: VecDeque<Embedding>,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("queue capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn push(&mut self, key: Embedding) {
        if self.is_full() {
            self.entries.pop_front();
        }
        self.entries.push_back(key);
    }

    pub fn extend(&mut self, keys: impl IntoIterator<Item = Embedding>) {
        for k in keys {
            self.push(k);
        }
    }

    /// Oldest first.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &Embedding> {
        self.entries.iter()
    }
}
