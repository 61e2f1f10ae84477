//! Fixed-capacity FIFO embedding queues, one per domain and modality.

use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureBatch, UNIT_NORM_TOL};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{norm, Matrix};
use crate::synth_data::{Domain, Modality};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub embedding: Vec<f64>,
    pub iteration: u64,
}

/// Ring buffer of the most recent `capacity` embeddings of one designation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    domain: Domain,
    modality: Modality,
    capacity: usize,
    dim: usize,
    slots: Vec<MemoryEntry>,
    /// Slot the next push overwrites once the ring is full.
    write_cursor: usize,
}

impl MemoryBank {
    pub fn new(domain: Domain, modality: Modality, capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Parameter("memory capacity and dim must be positive".into()));
        }
        Ok(Self {
            domain,
            modality,
            capacity,
            dim,
            slots: Vec::with_capacity(capacity),
            write_cursor: 0,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    pub fn write_cursor(&self) -> usize {
        self.write_cursor
    }

    /// Rebuilds a bank from its ring layout (checkpoint loading).
    pub(crate) fn from_ring(
        domain: Domain,
        modality: Modality,
        capacity: usize,
        dim: usize,
        slots: Vec<MemoryEntry>,
        write_cursor: usize,
    ) -> Result<Self> {
        let mut bank = Self::new(domain, modality, capacity, dim)?;
        if slots.len() > capacity || write_cursor >= capacity || (slots.len() < capacity && write_cursor != slots.len() % capacity) {
            return Err(Error::Format("inconsistent memory ring layout".into()));
        }
        if slots.iter().any(|e| e.embedding.len() != dim) {
            return Err(Error::Format("memory entry of the wrong width".into()));
        }
        bank.slots = slots;
        bank.write_cursor = write_cursor;
        Ok(bank)
    }

    /// Storage slots in ring order (not age order).
    pub(crate) fn ring(&self) -> &[MemoryEntry] {
        &self.slots
    }

    /// Enqueues one embedding, evicting the oldest when full.
    pub fn push(&mut self, embedding: &[f64], iteration: u64) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(shape_err!("bank holds width {}, got {}", self.dim, embedding.len()));
        }
        let n = norm(embedding);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Domain(format!("memory entries must be unit norm, got {n}")));
        }
        let entry = MemoryEntry {
            embedding: embedding.to_vec(),
            iteration,
        };
        if self.slots.len() < self.capacity {
            self.slots.push(entry);
        } else {
            self.slots[self.write_cursor] = entry;
        }
        self.write_cursor = (self.write_cursor + 1) % self.capacity;
        Ok(())
    }

    /// Enqueues every row of `feats` in order.
    pub fn push_batch(&mut self, feats: &FeatureBatch, iteration: u64) -> Result<()> {
        if feats.domain() != self.domain || feats.modality() != self.modality {
            return Err(Error::Usage(format!(
                "{:?}/{:?} features pushed into the {:?}/{:?} bank",
                feats.domain(),
                feats.modality(),
                self.domain,
                self.modality
            )));
        }
        if feats.dim() != self.dim && !feats.is_empty() {
            return Err(shape_err!("bank holds width {}, got {}", self.dim, feats.dim()));
        }
        for row in feats.features().row_iter() {
            self.push(row, iteration)?;
        }
        Ok(())
    }

    /// Entries from oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        let split = if self.is_full() { self.write_cursor } else { 0 };
        self.slots[split..].iter().chain(&self.slots[..split])
    }

    /// Copy of the stored embeddings, oldest row first.
    pub fn snapshot(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.len() * self.dim);
        for e in self.entries() {
            data.extend_from_slice(&e.embedding);
        }
        Matrix::new(self.len(), self.dim, data).expect("bank rows have bank width")
    }
}

/// The four queues used during adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBanks {
    pub source_image: MemoryBank,
    pub target_image: MemoryBank,
    pub source_text: MemoryBank,
    pub target_text: MemoryBank,
}

impl MemoryBanks {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            source_image: MemoryBank::new(Domain::Source, Modality::Image, capacity, dim)?,
            target_image: MemoryBank::new(Domain::Target, Modality::Image, capacity, dim)?,
            source_text: MemoryBank::new(Domain::Source, Modality::Text, capacity, dim)?,
            target_text: MemoryBank::new(Domain::Target, Modality::Text, capacity, dim)?,
        })
    }

    pub fn get(&self, domain: Domain, modality: Modality) -> &MemoryBank {
        match (domain, modality) {
            (Domain::Source, Modality::Image) => &self.source_image,
            (Domain::Target, Modality::Image) => &self.target_image,
            (Domain::Source, Modality::Text) => &self.source_text,
            (Domain::Target, Modality::Text) => &self.target_text,
        }
    }

    pub fn get_mut(&mut self, domain: Domain, modality: Modality) -> &mut MemoryBank {
        match (domain, modality) {
            (Domain::Source, Modality::Image) => &mut self.source_image,
            (Domain::Target, Modality::Image) => &mut self.target_image,
            (Domain::Source, Modality::Text) => &mut self.source_text,
            (Domain::Target, Modality::Text) => &mut self.target_text,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemoryBank> {
        [
            &self.source_image,
            &self.target_image,
            &self.source_text,
            &self.target_text,
        ]
        .into_iter()
    }
}
