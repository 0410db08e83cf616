//! Dense row-major arrays: single-channel volumes and multi-channel fields.

use crate::error::{Error, Result};

/// A dense row-major array of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Clone + Default> Volume<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Contract(format!(
                "volume data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Volume { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Volume { shape, data: vec![T::default(); n] }
    }
}

impl<T> Volume<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Flat index of a multi-dimensional coordinate.
    pub fn flat_index(&self, coord: &[usize]) -> usize {
        debug_assert_eq!(coord.len(), self.shape.len());
        let strides = self.strides();
        coord.iter().zip(&strides).map(|(c, s)| c * s).sum()
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Multi-dimensional coordinate of a row-major flat index.
pub fn coord_of(flat: usize, shape: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    shape.iter().zip(&strides).map(|(&e, &s)| flat / s % e).collect()
}

/// A multi-channel field over a spatial grid, stored channel-major:
/// `data[c * n_voxels + v]` where `v` is the row-major flat spatial index.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    channels: usize,
    spatial: Vec<usize>,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(channels: usize, spatial: Vec<usize>) -> Self {
        let n: usize = spatial.iter().product();
        Field { channels, spatial, data: vec![0.0; channels * n] }
    }

    pub fn from_data(channels: usize, spatial: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = spatial.iter().product();
        if data.len() != channels * n {
            return Err(Error::Contract(format!(
                "field data length {} does not match {} channels x {:?}",
                data.len(),
                channels,
                spatial
            )));
        }
        Ok(Field { channels, spatial, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }

    pub fn n_voxels(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.n_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.n_voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, v: usize) -> f64 {
        self.data[c * self.n_voxels() + v]
    }

    /// The probability/logit vector of one voxel, gathered across channels.
    pub fn voxel_vector(&self, v: usize) -> Vec<f64> {
        let n = self.n_voxels();
        (0..self.channels).map(|c| self.data[c * n + v]).collect()
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.channels == other.channels && self.spatial == other.spatial
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// The set of flat spatial indices belonging to one view (a whole volume or
/// one slice along an axis). Indices enumerate as
/// `base + o * outer_stride + k` for `o in 0..outer`, `k in 0..run`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewSpan {
    pub base: usize,
    pub run: usize,
    pub outer: usize,
    pub outer_stride: usize,
}

impl ViewSpan {
    pub fn whole(n_voxels: usize) -> Self {
        ViewSpan { base: 0, run: n_voxels, outer: 1, outer_stride: 0 }
    }

    pub fn slice(shape: &[usize], axis: usize, index: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "slice axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        if index >= shape[axis] {
            return Err(Error::Contract(format!(
                "slice index {} out of range for axis {} of shape {:?}",
                index, axis, shape
            )));
        }
        let run: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        Ok(ViewSpan { base: index * run, run, outer, outer_stride: shape[axis] * run })
    }

    pub fn n_voxels(&self) -> usize {
        self.run * self.outer
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        let ViewSpan { base, run, outer, outer_stride } = *self;
        (0..outer).flat_map(move |o| {
            let start = base + o * outer_stride;
            start..start + run
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_checks_length() {
        assert!(Volume::new(vec![2, 3], vec![0u8; 6]).is_ok());
        assert!(Volume::new(vec![2, 3], vec![0u8; 5]).is_err());
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_of(&[4, 3, 2]), vec![6, 2, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
        assert_eq!(strides_of(&[]), Vec::<usize>::new());
    }

    #[test]
    fn field_planes() {
        let mut f = Field::zeros(2, vec![2, 2]);
        f.plane_mut(1).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(f.at(1, 2), 3.0);
        assert_eq!(f.voxel_vector(2), vec![0.0, 3.0]);
    }

    #[test]
    fn span_covers_each_axis() {
        let shape = [3usize, 4, 5];
        let total: usize = shape.iter().product();
        for axis in 0..3 {
            let mut seen = vec![0usize; total];
            for i in 0..shape[axis] {
                let span = ViewSpan::slice(&shape, axis, i).unwrap();
                assert_eq!(span.n_voxels(), total / shape[axis]);
                for idx in span.indices() {
                    seen[idx] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "axis {} double-covers", axis);
        }
    }

    #[test]
    fn span_matches_coordinates() {
        // Slicing axis 1 of a [2,3,4] array at index 2 must select exactly the
        // coordinates (x, 2, z).
        let shape = [2usize, 3, 4];
        let span = ViewSpan::slice(&shape, 1, 2).unwrap();
        let strides = strides_of(&shape);
        let mut expect = vec![];
        for x in 0..2 {
            for z in 0..4 {
                expect.push(x * strides[0] + 2 * strides[1] + z);
            }
        }
        let got: Vec<usize> = span.indices().collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn whole_span() {
        let span = ViewSpan::whole(12);
        assert_eq!(span.indices().collect::<Vec<_>>(), (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn span_rejects_bad_args() {
        assert!(ViewSpan::slice(&[2, 2], 2, 0).is_err());
        assert!(ViewSpan::slice(&[2, 2], 0, 2).is_err());
    }
}
