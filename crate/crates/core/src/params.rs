//! Named parameter arrays shared by the encoder, optimizer, EMA and checkpoints.

use std::collections::HashMap;

use crate::error::{CarlError, Result};
use crate::tensor::{Graph, NodeId};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named arrays. Order is insertion order and is part
/// of the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(CarlError::Dimension {
                op: "param",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        if self.index.contains_key(&name) {
            return Err(CarlError::Contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn require(&self, name: &str) -> Result<&Param> {
        self.get(name)
            .ok_or_else(|| CarlError::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.insert(p.name.clone(), &p.shape, vec![0.0; p.data.len()])
                .expect("names are unique");
        }
        out
    }

    /// Copy of the parameters whose names satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        let mut out = ParamSet::new();
        for p in self.params.iter().filter(|p| keep(&p.name)) {
            out.insert(p.name.clone(), &p.shape, p.data.clone())
                .expect("names are unique");
        }
        out
    }

    /// All scalars concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(CarlError::Dimension {
                op: "assign_flat",
                lhs: vec![self.numel()],
                rhs: vec![flat.len()],
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `self += scale * other`, matched by name.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        for p in &mut self.params {
            let o = other.require(&p.name)?;
            if o.shape != p.shape {
                return Err(CarlError::Dimension {
                    op: "add_scaled",
                    lhs: p.shape.clone(),
                    rhs: o.shape.clone(),
                });
            }
            for (a, b) in p.data.iter_mut().zip(&o.data) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<Bound> {
        let mut ids = HashMap::with_capacity(self.params.len());
        let mut order = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let id = g.leaf(p.data.clone(), &p.shape, requires_grad)?;
            ids.insert(p.name.clone(), id);
            order.push((p.name.clone(), id));
        }
        Ok(Bound { ids, order })
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    ids: HashMap<String, NodeId>,
    order: Vec<(String, NodeId)>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| CarlError::Contract(format!("parameter `{name}` not bound")))
    }

    /// Gradients collected after `backward`, shaped like the bound set.
    pub fn grads(&self, g: &Graph) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, id) in &self.order {
            out.insert(name.clone(), g.shape(*id), g.grad(*id).to_vec())
                .expect("names are unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_and_assign_round_trip() {
        let mut p = ParamSet::new();
        p.insert("a", &[2], vec![1.0, 2.0]).unwrap();
        p.insert("b", &[1, 3], vec![3.0, 4.0, 5.0]).unwrap();
        let flat = p.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut q = p.zeros_like();
        q.assign_flat(&flat).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn duplicate_names_and_bad_shapes_are_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", &[2], vec![1.0, 2.0]).unwrap();
        assert!(p.insert("a", &[1], vec![0.0]).is_err());
        assert!(p.insert("b", &[3], vec![0.0]).is_err());
    }

    #[test]
    fn bound_grads_follow_graph() {
        let mut p = ParamSet::new();
        p.insert("w", &[2], vec![3.0, -1.0]).unwrap();
        let mut g = Graph::new(0);
        let b = p.bind(&mut g, true).unwrap();
        let w = b.id("w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(b.grads(&g).get("w").unwrap().data, vec![6.0, -2.0]);
    }
}
