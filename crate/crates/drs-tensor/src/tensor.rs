use crate::error::TensorError;
use crate::scalar::Scalar;

/// A dense n-dimensional array in row-major order.
///
/// `grad` is present iff `requires_grad` is set and holds the same number of
/// elements as `data`. Tensors are plain values: the tape copies them in as
/// leaves and hands gradients back out after `backward`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    dims: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidTensor(format!(
                "zero extent in dims {dims:?}"
            )));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidTensor(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            dims,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel: usize = dims.iter().product();
        Self {
            dims,
            data: vec![S::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(dims: Vec<usize>, value: S) -> Self {
        let numel: usize = dims.iter().product();
        Self {
            dims,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = dims.iter().product();
        Self {
            dims,
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf. Allocates a zero gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![S::zero(); self.data.len()]);
        }
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Overwrites the gradient buffer. The tensor must be a gradient leaf.
    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(TensorError::InvalidTensor(format!(
                "grad length {} does not match data length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.requires_grad = true;
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major offset for a `[H, W, C]` tensor.
    #[inline]
    pub fn idx3(&self, i: usize, j: usize, c: usize) -> usize {
        debug_assert_eq!(self.dims.len(), 3);
        (i * self.dims[1] + j) * self.dims[2] + c
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, c: usize) -> S {
        self.data[self.idx3(i, j, c)]
    }

    pub fn set3(&mut self, i: usize, j: usize, c: usize, v: S) {
        let idx = self.idx3(i, j, c);
        self.data[idx] = v;
    }

    /// Element-wise cast between scalar types (used by the double-precision
    /// check mode in tests).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.into_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| T::from_f64(v.into_f64())).collect()),
        }
    }
}
