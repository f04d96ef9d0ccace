//! Axis layouts of a latent video and conversions between them.

use super::{DiffusionError, Result};
use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Axis lengths of a latent video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub b: usize,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn numel(&self) -> usize {
        self.b * self.t * self.c * self.h * self.w
    }

    pub fn sites(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// `(B·T) × C × H × W`
    Frames,
    /// `B × T × C × H × W`
    Video,
    /// `(B·H·W) × T × C`
    Sites,
}

impl Layout {
    pub fn shape(self, d: Dims) -> Vec<usize> {
        match self {
            Layout::Frames => vec![d.b * d.t, d.c, d.h, d.w],
            Layout::Video => vec![d.b, d.t, d.c, d.h, d.w],
            Layout::Sites => vec![d.b * d.h * d.w, d.t, d.c],
        }
    }
}

// [B,T,C,H,W] <-> [B,H,W,T,C]; the permutation is its own inverse
const SITES_PERM: [usize; 5] = [0, 3, 4, 1, 2];

/// A latent tensor tagged with its layout. Fields are private so the tag
/// and the shape can only change together.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    data: Tensor,
    layout: Layout,
    dims: Dims,
}

impl LatentVideo {
    pub fn new(data: Tensor, layout: Layout, dims: Dims) -> Result<Self> {
        check(data.shape(), layout, dims)?;
        Ok(Self { data, layout, dims })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn rearrange(&self, target: Layout) -> Result<Self> {
        let d = self.dims;
        let video = match self.layout {
            Layout::Frames | Layout::Video => self.data.reshape(&Layout::Video.shape(d))?,
            Layout::Sites => self.data.reshape(&[d.b, d.h, d.w, d.t, d.c])?.permute(&SITES_PERM)?,
        };
        let data = match target {
            Layout::Frames | Layout::Video => video.reshape(&target.shape(d))?,
            Layout::Sites => video.permute(&SITES_PERM)?.reshape(&target.shape(d))?,
        };
        Ok(Self { data, layout: target, dims: d })
    }
}

fn check(shape: &[usize], layout: Layout, dims: Dims) -> Result<()> {
    if shape != layout.shape(dims).as_slice() {
        return Err(DiffusionError::Shape {
            shape: shape.to_vec(),
            layout,
            dims,
        });
    }
    Ok(())
}

/// Tape-side counterpart of [`LatentVideo`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentVar {
    pub var: Var,
    pub layout: Layout,
    pub dims: Dims,
}

impl LatentVar {
    pub fn new(tape: &Tape, var: Var, layout: Layout, dims: Dims) -> Result<Self> {
        check(tape.shape(var), layout, dims)?;
        Ok(Self { var, layout, dims })
    }

    pub fn rearrange(&self, tape: &mut Tape, target: Layout) -> Result<Self> {
        if target == self.layout {
            return Ok(*self);
        }
        let d = self.dims;
        let video = match self.layout {
            Layout::Frames | Layout::Video => tape.reshape(self.var, &Layout::Video.shape(d))?,
            Layout::Sites => {
                let x = tape.reshape(self.var, &[d.b, d.h, d.w, d.t, d.c])?;
                tape.permute(x, &SITES_PERM)?
            }
        };
        let var = match target {
            Layout::Frames | Layout::Video => tape.reshape(video, &target.shape(d))?,
            Layout::Sites => {
                let x = tape.permute(video, &SITES_PERM)?;
                tape.reshape(x, &target.shape(d))?
            }
        };
        Ok(Self { var, layout: target, dims: d })
    }

    /// `[(B·T), H·W, C]` view: one row per mesh site, per frame.
    pub fn vertex_rows(&self, tape: &mut Tape) -> Result<Var> {
        let f = self.rearrange(tape, Layout::Frames)?;
        let d = self.dims;
        let x = tape.permute(f.var, &[0, 2, 3, 1])?;
        Ok(tape.reshape(x, &[d.b * d.t, d.h * d.w, d.c])?)
    }

    /// Inverse of [`LatentVar::vertex_rows`], returning a `Frames` latent.
    pub fn from_vertex_rows(tape: &mut Tape, rows: Var, dims: Dims) -> Result<Self> {
        let d = dims;
        let x = tape.reshape(rows, &[d.b * d.t, d.h, d.w, d.c])?;
        let var = tape.permute(x, &[0, 3, 1, 2])?;
        Self::new(tape, var, Layout::Frames, dims)
    }

    /// `[B, C, T, H, W]` view for 3-D convolution.
    pub fn conv_view(&self, tape: &mut Tape) -> Result<Var> {
        let v = self.rearrange(tape, Layout::Video)?;
        Ok(tape.permute(v.var, &[0, 2, 1, 3, 4])?)
    }

    pub fn from_conv_view(tape: &mut Tape, x: Var, dims: Dims) -> Result<Self> {
        let v = tape.permute(x, &[0, 2, 1, 3, 4])?;
        Self::new(tape, v, Layout::Video, dims)?.rearrange(tape, Layout::Frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sites_layout_index_example() {
        let d = Dims { b: 1, t: 2, c: 1, h: 1, w: 2 };
        // a, b, c, d = 1, 2, 3, 4 at (t, w) = (0,0), (0,1), (1,0), (1,1)
        let v = LatentVideo::new(Tensor::new(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), Layout::Frames, d).unwrap();
        let s = v.rearrange(Layout::Sites).unwrap();
        assert_eq!(s.data().shape(), &[2, 2, 1]);
        assert_eq!(s.data().get(&[1, 0, 0]), 2.0);
        assert_eq!(s.data().get(&[0, 0, 0]), 1.0);
        assert_eq!(s.data().get(&[0, 1, 0]), 3.0);
        assert_eq!(s.data().get(&[1, 1, 0]), 4.0);
    }

    #[test]
    fn rejects_inconsistent_shape() {
        let d = Dims { b: 1, t: 2, c: 1, h: 1, w: 2 };
        assert!(LatentVideo::new(Tensor::zeros(&[4]), Layout::Frames, d).is_err());
    }
}
