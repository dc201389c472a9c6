//! Flat parameter storage with named entries and a weight/bias partition.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// All parameters of one network in a single `f32` buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    values: Vec<f32>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, kind: ParamKind, init: Vec<f32>) -> ParamId {
        let len: usize = shape.iter().product();
        assert_eq!(init.len(), len, "initializer length mismatch");
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            kind,
            offset: self.values.len(),
            len,
            trainable: true,
        });
        self.values.extend(init);
        id
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f32] {
        let e = &self.entries[id.0];
        &self.values[e.offset..e.offset + e.len]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&ParamEntry) -> bool) {
        for e in &mut self.entries {
            e.trainable = pred(e);
        }
    }

    pub fn count(&self, pred: impl Fn(&ParamEntry) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(e)).map(|e| e.len).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count(|e| e.trainable)
    }

    /// Per-element trainability, aligned with [`ParamStore::values`].
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for e in &self.entries {
            if e.trainable {
                mask[e.offset..e.offset + e.len].fill(true);
            }
        }
        mask
    }

    /// Values of every entry for which `pred` holds, concatenated in order.
    pub fn gather(&self, pred: impl Fn(&ParamEntry) -> bool) -> Vec<f32> {
        self.entries
            .iter()
            .filter(|e| pred(e))
            .flat_map(|e| self.values[e.offset..e.offset + e.len].iter().copied())
            .collect()
    }

    /// Replaces the whole value buffer (e.g. from a checkpoint blob).
    pub fn load_values(&mut self, values: Vec<f32>) -> Result<(), String> {
        if values.len() != self.values.len() {
            return Err(format!(
                "parameter blob has {} values, model expects {}",
                values.len(),
                self.values.len()
            ));
        }
        self.values = values;
        Ok(())
    }

    pub fn zero_grad(&self) -> Vec<f32> {
        vec![0.0; self.values.len()]
    }
}

/// Gradient buffer slice for one parameter.
#[inline]
pub fn grad_slice<'a>(store: &ParamStore, grads: &'a mut [f32], id: ParamId) -> &'a mut [f32] {
    let e = store.entry(id);
    &mut grads[e.offset..e.offset + e.len]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts() {
        let mut s = ParamStore::new();
        let w = s.add("w", vec![2, 3], ParamKind::Weight, vec![1.0; 6]);
        let b = s.add("b", vec![2], ParamKind::Bias, vec![0.5; 2]);
        assert_eq!(s.len(), 8);
        assert_eq!(s.get(b), &[0.5, 0.5]);
        s.set_trainable(|e| e.kind == ParamKind::Bias);
        assert!(!s.is_trainable(w));
        assert_eq!(s.trainable_count(), 2);
        assert_eq!(s.trainable_mask().iter().filter(|m| **m).count(), 2);
        assert_eq!(s.gather(|e| e.kind == ParamKind::Weight).len(), 6);
        assert!(s.load_values(vec![0.0; 3]).is_err());
    }
}
