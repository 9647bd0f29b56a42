use std::fmt;

/// Dense row-major array of `f64` with an arbitrary shape.
///
/// Convolutional data uses the NCHW layout throughout the crate. A tensor
/// with an empty shape is a scalar holding exactly one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            expected,
            data.len(),
            "shape {shape:?} needs {expected} values, got {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected an NCHW tensor, got shape {:?}", self.shape),
        }
    }

    /// The single value of a scalar (or any one-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    /// Sample `index` of an NCHW tensor as a `[1, c, h, w]` tensor.
    pub fn sample(&self, index: usize) -> Tensor {
        let (n, c, h, w) = self.dims4();
        assert!(index < n);
        let plane = c * h * w;
        Tensor::new(vec![1, c, h, w], self.data[index * plane..(index + 1) * plane].to_vec())
    }

    /// Stack equally shaped `[1, c, h, w]` (or `[c, h, w]`) tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "cannot stack an empty list");
        let inner: Vec<usize> = match items[0].shape.len() {
            4 => items[0].shape[1..].to_vec(),
            3 => items[0].shape.clone(),
            _ => panic!("stack expects rank 3 or 4 tensors"),
        };
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.len(), items[0].len(), "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }

    /// Select samples of an NCHW tensor in the given order.
    pub fn gather_samples(&self, order: &[usize]) -> Tensor {
        let (_, c, h, w) = self.dims4();
        let plane = c * h * w;
        let mut data = Vec::with_capacity(order.len() * plane);
        for &i in order {
            data.extend_from_slice(&self.data[i * plane..(i + 1) * plane]);
        }
        Tensor::new(vec![order.len(), c, h, w], data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.4}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_has_one_value() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.len(), 1);
        assert!(s.shape().is_empty());
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    #[should_panic(expected = "needs 6 values")]
    fn new_rejects_wrong_length() {
        Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn stack_and_sample_are_inverse() {
        let a = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]);
        let b = Tensor::new(vec![1, 1, 1, 2], vec![3.0, 4.0]);
        let s = Tensor::stack(&[a.clone(), b.clone()]);
        assert_eq!(s.shape(), &[2, 1, 1, 2]);
        assert_eq!(s.sample(0), a);
        assert_eq!(s.sample(1), b);
        assert_eq!(s.gather_samples(&[1, 0]).sample(0), b);
    }
}
