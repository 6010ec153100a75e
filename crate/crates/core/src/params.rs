//! Named parameter tensors with per-parameter trainable flags.

use crate::envelope::{EnvelopeError, Reader, Writer};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of parameters. Order is part of the model layout and
/// of the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, slot: usize) -> &Param {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Param {
        &mut self.params[slot]
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total number of scalars, trainable or not.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Records every parameter on `tape`; only trainable ones require grad.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.trainable))
            .collect()
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.name);
            w.u8(p.trainable as u8);
            w.u32(p.value.rank() as u32);
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.f64s(p.value.data());
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, EnvelopeError> {
        let count = r.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let name = r.str()?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(EnvelopeError::Invalid(format!("trainable flag {other}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| EnvelopeError::Invalid(format!("{name}: shape overflow")))?;
            let data = r.f64s(numel)?;
            let value = Tensor::new(shape, data)
                .map_err(|e| EnvelopeError::Invalid(format!("{name}: {e}")))?;
            store.push(name, value, trainable);
        }
        Ok(store)
    }
}
