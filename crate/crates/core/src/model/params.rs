use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.ids()
            .map(|id| (id, self.names[id.0].as_str(), &self.tensors[id.0]))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter on `tape`; trainable leaves receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Adds the gradients held on `tape` into each parameter's buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "{} bound vars for {} parameters",
                vars.len(),
                self.tensors.len()
            )));
        }
        for (t, v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(*v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_accumulate() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, true);
        let sq = tape.mul(vars[0], vars[0]).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        store.accumulate_grads(&tape, &vars).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[2.0, 4.0]);
        assert_eq!(store.by_name("w"), Some(w));
        assert_eq!(store.total_params(), 2);
    }
}
