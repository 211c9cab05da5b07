use nalgebra::{DVector, Vector3};

use crate::error::{Error, Result};
use crate::lie::Rotation;

pub type BlockId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Manifold {
    Euclidean(usize),
    Rotation,
}

impl Manifold {
    pub fn tangent_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(n) => *n,
            Manifold::Rotation => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockValue {
    Vector(DVector<f64>),
    Rotation(Rotation),
}

/// One optimization variable. Rotation blocks are updated by right
/// retraction `R ← R·Exp(δ)`; euclidean blocks additively, then clamped to
/// `bounds` when present.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterBlock {
    pub value: BlockValue,
    pub fixed: bool,
    pub bounds: Option<(f64, f64)>,
}

impl ParameterBlock {
    pub fn manifold(&self) -> Manifold {
        match &self.value {
            BlockValue::Vector(v) => Manifold::Euclidean(v.len()),
            BlockValue::Rotation(_) => Manifold::Rotation,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        self.manifold().tangent_dim()
    }

    pub fn retract(&mut self, delta: &[f64]) {
        match &mut self.value {
            BlockValue::Vector(v) => {
                for (x, d) in v.iter_mut().zip(delta) {
                    *x += d;
                    if let Some((lo, hi)) = self.bounds {
                        *x = x.clamp(lo, hi);
                    }
                }
            }
            BlockValue::Rotation(r) => {
                *r = r.retract(&Vector3::new(delta[0], delta[1], delta[2]));
            }
        }
    }
}

/// Ordered collection of parameter blocks.
#[derive(Clone, Debug, Default)]
pub struct Parameters {
    blocks: Vec<ParameterBlock>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn add(&mut self, block: ParameterBlock) -> BlockId {
        self.blocks.push(block);
        self.blocks.len() - 1
    }

    pub fn add_vector(&mut self, values: &[f64], fixed: bool) -> BlockId {
        self.add(ParameterBlock {
            value: BlockValue::Vector(DVector::from_column_slice(values)),
            fixed,
            bounds: None,
        })
    }

    pub fn add_vec3(&mut self, v: &Vector3<f64>, fixed: bool) -> BlockId {
        self.add_vector(v.as_slice(), fixed)
    }

    pub fn add_scalar(&mut self, v: f64, fixed: bool, bounds: Option<(f64, f64)>) -> BlockId {
        self.add(ParameterBlock {
            value: BlockValue::Vector(DVector::from_element(1, v)),
            fixed,
            bounds,
        })
    }

    pub fn add_rotation(&mut self, r: Rotation, fixed: bool) -> BlockId {
        self.add(ParameterBlock {
            value: BlockValue::Rotation(r),
            fixed,
            bounds: None,
        })
    }

    pub fn block(&self, id: BlockId) -> &ParameterBlock {
        &self.blocks[id]
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut ParameterBlock {
        &mut self.blocks[id]
    }

    pub fn blocks(&self) -> &[ParameterBlock] {
        &self.blocks
    }

    pub fn set_fixed(&mut self, id: BlockId, fixed: bool) {
        self.blocks[id].fixed = fixed;
    }

    pub fn is_fixed(&self, id: BlockId) -> bool {
        self.blocks[id].fixed
    }

    pub fn vector(&self, id: BlockId) -> &DVector<f64> {
        match &self.blocks[id].value {
            BlockValue::Vector(v) => v,
            BlockValue::Rotation(_) => panic!("block {id} is a rotation"),
        }
    }

    pub fn vec3(&self, id: BlockId) -> Vector3<f64> {
        let v = self.vector(id);
        Vector3::new(v[0], v[1], v[2])
    }

    pub fn scalar(&self, id: BlockId) -> f64 {
        self.vector(id)[0]
    }

    pub fn rotation(&self, id: BlockId) -> &Rotation {
        match &self.blocks[id].value {
            BlockValue::Rotation(r) => r,
            BlockValue::Vector(_) => panic!("block {id} is a vector"),
        }
    }

    pub fn set_vec3(&mut self, id: BlockId, v: &Vector3<f64>) {
        self.blocks[id].value = BlockValue::Vector(DVector::from_column_slice(v.as_slice()));
    }

    pub fn set_scalar(&mut self, id: BlockId, v: f64) {
        self.blocks[id].value = BlockValue::Vector(DVector::from_element(1, v));
    }

    pub fn set_rotation(&mut self, id: BlockId, r: Rotation) {
        self.blocks[id].value = BlockValue::Rotation(r);
    }

    pub(crate) fn check_id(&self, id: BlockId) -> Result<()> {
        if id >= self.blocks.len() {
            return Err(Error::invalid(format!("factor references missing block {id}")));
        }
        Ok(())
    }
}
