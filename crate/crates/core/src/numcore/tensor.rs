use super::Real;
use crate::{Error, Result};

/// Dense row-major tensor with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn data_and_grad_mut(&mut self) -> (&mut [T], Option<&[T]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Adds `weight * g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T], weight: T) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of {} elements for tensor {:?}",
                g.len(),
                self.shape
            )));
        }
        let buf = self.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        if weight == T::one() {
            for (b, &x) in buf.iter_mut().zip(g) {
                *b = *b + x;
            }
        } else {
            for (b, &x) in buf.iter_mut().zip(g) {
                *b = *b + weight * x;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|&x| U::of(x.f64())).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
        assert_eq!(Tensor::<f64>::scalar(1.0).numel(), 1);
    }

    #[test]
    fn gradient_accumulates_with_weight() {
        let mut t = Tensor::<f64>::zeros(vec![2]);
        t.accumulate_grad(&[1.0, 2.0], 1.0).unwrap();
        t.accumulate_grad(&[1.0, 1.0], 0.5).unwrap();
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 2.5][..]));
        assert!(t.accumulate_grad(&[1.0], 1.0).is_err());
    }
}
