use crate::error::{bail, Result};

pub const MAX_RANK: usize = 4;

/// Dense row-major f32 array of rank 1..=4, last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(
                Geometry,
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                numel,
                data.len()
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![0.0; numel],
        })
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        Ok(Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        })
    }

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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same data under a new shape with an equal element count.
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|x| !x.is_finite()) {
            bail!(
                Validation,
                "non-finite element {} at flat index {}",
                self.data[pos],
                pos
            );
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            bail!(Geometry, "shape {:?} vs {:?}", self.shape, other.shape);
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        bail!(
            Geometry,
            "rank must be between 1 and {}, got {}",
            MAX_RANK,
            shape.len()
        );
    }
    if shape.contains(&0) {
        bail!(Geometry, "zero extent in shape {:?}", shape);
    }
    Ok(())
}
