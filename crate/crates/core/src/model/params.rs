use std::io::{Read, Write};

use crate::io::{read_f32s, read_string, read_u32, write_f32s, write_string, write_u32};
use crate::{Error, Result};

/// A named parameter tensor. Values live in f64; checkpoints store f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Whether weight decay applies (matrices and embeddings, not gains or biases).
    pub decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub(crate) fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>, decay: bool) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor { name: name.into(), shape: shape.to_vec(), data, decay });
        self.tensors.len() - 1
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn write_table<W: Write>(&self, w: &mut W) -> Result<()> {
        write_u32(w, self.tensors.len() as u32)?;
        for t in &self.tensors {
            write_string(w, &t.name)?;
            write_u32(w, t.shape.len() as u32)?;
            for &d in &t.shape {
                write_u32(w, d as u32)?;
            }
            write_f32s(w, t.data.iter().map(|&x| x as f32))?;
        }
        Ok(())
    }

    /// Fill this store (built from the same config) from a tensor table.
    pub(crate) fn read_table<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let count = read_u32(r)? as usize;
        if count != self.tensors.len() {
            return Err(Error::Format(format!("expected {} tensors, found {count}", self.tensors.len())));
        }
        for _ in 0..count {
            let name = read_string(r)?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(r)? as usize);
            }
            let t = self
                .tensors
                .iter_mut()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::Format(format!("tensor {name}: shape {shape:?}, expected {:?}", t.shape)));
            }
            let v = read_f32s(r, t.data.len())?;
            t.data = v.into_iter().map(f64::from).collect();
        }
        Ok(())
    }

    /// Round every value through f32, as a checkpoint round trip would.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x = *x as f32 as f64;
            }
        }
    }
}
