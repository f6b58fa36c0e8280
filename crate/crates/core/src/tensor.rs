use crate::error::{shape_err, Error, Result};

/// Dense row-major `f32` tensor. Image tensors use NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    /// Copies `len` entries starting at `start` along dimension 1.
    pub fn slice_dim1(&self, start: usize, len: usize) -> Result<Self> {
        if self.rank() < 2 || start + len > self.shape[1] {
            return Err(shape_err!(
                "slice [{start}, {}) out of range for dim 1 of {:?}",
                start + len,
                self.shape
            ));
        }
        let outer = self.shape[0];
        let inner: usize = self.shape[2..].iter().product();
        let row = self.shape[1] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for n in 0..outer {
            let base = n * row + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = len;
        Ok(Self { shape, data })
    }

    /// Concatenates tensors along dimension 1; all other dimensions must agree.
    pub fn concat_dim1(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        if first.rank() < 2 {
            return Err(shape_err!("concat needs rank >= 2, got {:?}", first.shape));
        }
        for p in parts {
            if p.rank() != first.rank() || p.shape[0] != first.shape[0] || p.shape[2..] != first.shape[2..] {
                return Err(shape_err!(
                    "concat along dim 1: {:?} incompatible with {:?}",
                    p.shape,
                    first.shape
                ));
            }
        }
        let outer = first.shape[0];
        let inner: usize = first.shape[2..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for n in 0..outer {
            for p in parts {
                let row = p.shape[1] * inner;
                data.extend_from_slice(&p.data[n * row..(n + 1) * row]);
            }
        }
        let mut shape = first.shape.clone();
        shape[1] = total;
        Ok(Self { shape, data })
    }

    /// Reorders indices along `dim` so that new index `i` holds old index `perm[i]`.
    pub fn permute_axis(&self, dim: usize, perm: &[usize]) -> Result<Self> {
        if dim >= self.rank() || perm.len() != self.shape[dim] {
            return Err(shape_err!(
                "permutation of length {} does not fit dim {dim} of {:?}",
                perm.len(),
                self.shape
            ));
        }
        let outer: usize = self.shape[..dim].iter().product();
        let inner: usize = self.shape[dim + 1..].iter().product();
        let len = self.shape[dim];
        let mut data = Vec::with_capacity(self.data.len());
        for o in 0..outer {
            for &src in perm {
                let base = (o * len + src) * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Selects entries along dimension 0 (samples) by index.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        if self.rank() == 0 {
            return Err(shape_err!("gather_rows on a scalar"));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(shape_err!("row {r} out of range for {:?}", self.shape));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self { shape, data })
    }
}
