use crate::element::Element;
use crate::error::{Error, Result};

pub const MAX_RANK: usize = 5;

/// Dense row-major array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    dims: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::shape(
            "tensor",
            format!("rank must be 1..={MAX_RANK}, got {}", dims.len()),
        ));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(Error::shape(
            "tensor",
            format!("extent {pos} of {dims:?} is zero"),
        ));
    }
    Ok(dims.iter().product())
}

impl<E: Element> Tensor<E> {
    /// Builds a tensor, rejecting bad shapes and non-finite values.
    pub fn new(dims: &[usize], data: Vec<E>) -> Result<Self> {
        let numel = check_dims(dims)?;
        if data.len() != numel {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {numel} values, got {}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor data at flat index {i}")));
        }
        Ok(Self::from_parts(dims.to_vec(), data))
    }

    /// Internal constructor for kernel outputs; shape is trusted.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, E::zero())
    }

    pub fn full(dims: &[usize], value: E) -> Result<Self> {
        let numel = check_dims(dims)?;
        Self::new(dims, vec![value; numel])
    }

    pub fn scalar(value: E) -> Result<Self> {
        Self::new(&[1], vec![value])
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> E) -> Result<Self> {
        let numel = check_dims(dims)?;
        Self::new(dims, (0..numel).map(&mut f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable view of the values. Callers that write must keep them finite;
    /// [`Tensor::check_finite`] re-validates.
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(
                "item",
                format!("expected one element, dims {:?}", self.dims),
            )),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Enables or disables gradient tracking. Enabling allocates a zeroed
    /// gradient buffer.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = on.then(|| vec![E::zero(); self.data.len()]);
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [E]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = E::zero());
        }
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[E]) -> Result<()> {
        let grad = self
            .grad
            .as_mut()
            .ok_or_else(|| Error::Autograd("tensor does not require grad".into()))?;
        if grad.len() != delta.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{} vs {}", grad.len(), delta.len()),
            ));
        }
        grad.iter_mut().zip(delta).for_each(|(g, d)| *g = *g + *d);
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{what} at flat index {i}"))),
            None => Ok(()),
        }
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let numel = check_dims(dims)?;
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {dims:?}", self.dims),
            ));
        }
        Ok(Self::from_parts(dims.to_vec(), self.data.clone()))
    }

    /// Value-only copy at another precision. Gradient state is not carried.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::from_parts(
            self.dims.clone(),
            self.data
                .iter()
                .map(|v| F::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        )
    }

    /// Drops gradient state, keeping values.
    pub fn detached(&self) -> Self {
        Self::from_parts(self.dims.clone(), self.data.clone())
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        (self.dims == other.dims).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
                .fold(0.0, f64::max)
        })
    }
}
