use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, norm};

/// Gradient (or parameter direction) organised by parameter group, one group
/// per parametrised layer of the originating model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector<T> {
    groups: Vec<Vec<T>>,
}

impl<T: Scalar> GradientVector<T> {
    pub fn new(groups: Vec<Vec<T>>) -> Self {
        Self { groups }
    }

    pub fn zeros(group_sizes: &[usize]) -> Self {
        Self { groups: group_sizes.iter().map(|&n| vec![T::zero(); n]).collect() }
    }

    pub fn groups(&self) -> &[Vec<T>] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.groups
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| a.len() == b.len())
    }

    pub(crate) fn check_structure(&self, other: &Self) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::shape(format!("{:?}", self.group_sizes()), format!("{:?}", other.group_sizes())))
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.groups.iter().flatten().copied().collect()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.groups.iter().zip(&other.groups).map(|(a, b)| dot(a, b)).sum()
    }

    pub fn norm(&self) -> T {
        self.groups.iter().map(|g| dot(g, g)).sum::<T>().sqrt()
    }

    pub fn group_norms(&self) -> Vec<T> {
        self.groups.iter().map(|g| norm(g)).collect()
    }

    pub fn scale(&mut self, k: T) {
        self.groups.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn scaled(&self, k: T) -> Self {
        let mut out = self.clone();
        out.scale(k);
        out
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: T, other: &Self) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += k * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().flatten().all(|v| v.is_finite())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> GradientVector<U> {
        GradientVector { groups: self.groups.iter().map(|g| g.iter().map(|&v| f(v)).collect()).collect() }
    }
}
