//! Tensor shapes.

use std::fmt;

/// Ordered list of positive extents. Rank 0 denotes a scalar.
///
/// Element count is the product of the extents (1 for rank 0). Elementwise
/// ops require equal shapes; the only implicit broadcast anywhere in the
/// engine is scalar-with-tensor.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    /// Panics on a zero extent: shapes are always built from validated
    /// configuration or from other shapes, so a zero here is a programmer
    /// error.
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        let dims = dims.into();
        assert!(
            dims.iter().all(|&d| d >= 1),
            "shape extents must be >= 1, got {dims:?}"
        );
        Shape { dims }
    }

    pub fn scalar() -> Self {
        Shape { dims: Vec::new() }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_scalar_like(&self) -> bool {
        self.count() == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.dims.is_empty() {
            return write!(f, "scalar");
        }
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

impl From<&[usize]> for Shape {
    fn from(dims: &[usize]) -> Self {
        Shape::new(dims.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_is_product_of_extents() {
        assert_eq!(Shape::new(vec![2, 3, 4]).count(), 24);
        assert_eq!(Shape::scalar().count(), 1);
        assert_eq!(Shape::new(vec![7]).count(), 7);
    }

    #[test]
    fn display() {
        assert_eq!(Shape::new(vec![2, 224, 224, 3]).to_string(), "2x224x224x3");
        assert_eq!(Shape::scalar().to_string(), "scalar");
    }

    #[test]
    #[should_panic]
    fn zero_extent_rejected() {
        let _ = Shape::new(vec![2, 0]);
    }
}
