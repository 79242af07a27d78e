//! The joint 2D spatial interaction operator.
//!
//! A stacked batch `[2B, F·H·W, d]` holds source streams in rows `[0, B)` and
//! target streams in rows `[B, 2B)`. The operator folds frames into the batch,
//! places each source frame next to its target frame along the width axis,
//! runs an attention map over the `2·H·W` joined tokens of every frame, and
//! undoes the layout. Tokens never see a different frame.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Layout of a stacked source/target token batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    /// Source/target pairs.
    pub batch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TokenGrid {
    pub fn new(batch: usize, frames: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        let g = Self {
            batch,
            frames,
            height,
            width,
            channels,
        };
        if [batch, frames, height, width, channels].contains(&0) {
            return Err(Error::shape("token_grid", format!("zero extent in {g:?}")));
        }
        Ok(g)
    }

    /// Tokens per stream, `F·H·W`.
    pub fn seq_len(&self) -> usize {
        self.frames * self.height * self.width
    }

    /// Shape of the stacked tensor this grid describes.
    pub fn stacked_shape(&self) -> [usize; 3] {
        [2 * self.batch, self.seq_len(), self.channels]
    }

    fn stream_shape(&self) -> [usize; 3] {
        [self.batch, self.seq_len(), self.channels]
    }

    fn folded_shape(&self) -> [usize; 4] {
        [self.batch * self.frames, self.height, self.width, self.channels]
    }

    fn expect(&self, shape: &[usize], want: &[usize], op: &'static str) -> Result<()> {
        if shape != want {
            return Err(Error::shape(
                op,
                format!("expected {want:?} for {self:?}, got {shape:?}"),
            ));
        }
        Ok(())
    }
}

/// Splits `[2B, S, d]` into its source and target halves.
pub fn split_streams<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = *x
        .shape()
        .first()
        .ok_or_else(|| Error::shape("split_streams", "rank 0"))?;
    if n % 2 != 0 {
        return Err(Error::shape("split_streams", format!("odd leading extent {n}")));
    }
    let mut halves = x.split(0, &[n / 2, n / 2])?.into_iter();
    Ok((halves.next().unwrap(), halves.next().unwrap()))
}

pub fn stack_streams<T: Scalar>(src: &Tensor<T>, tgt: &Tensor<T>) -> Result<Tensor<T>> {
    src.expect_same_shape(tgt, "stack_streams")?;
    Tensor::concat(&[src, tgt], 0)
}

/// `[B, F·H·W, d] → [B·F, H, W, d]`; frame `f` of batch `b` lands at `b·F + f`.
pub fn fold_time<T: Scalar>(x: &Tensor<T>, g: &TokenGrid) -> Result<Tensor<T>> {
    g.expect(x.shape(), &g.stream_shape(), "fold_time")?;
    x.reshape(g.folded_shape())
}

pub fn unfold_time<T: Scalar>(x: &Tensor<T>, g: &TokenGrid) -> Result<Tensor<T>> {
    g.expect(x.shape(), &g.folded_shape(), "unfold_time")?;
    x.reshape(g.stream_shape())
}

/// Joins along width: columns `[0, W)` are source, `[W, 2W)` target.
pub fn widthwise_join<T: Scalar>(src: &Tensor<T>, tgt: &Tensor<T>) -> Result<Tensor<T>> {
    src.expect_same_shape(tgt, "widthwise_join")?;
    if src.rank() != 4 {
        return Err(Error::shape("widthwise_join", format!("rank {} != 4", src.rank())));
    }
    Tensor::concat(&[src, tgt], 2)
}

pub fn widthwise_split<T: Scalar>(m: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if m.rank() != 4 || !m.shape()[2].is_multiple_of(2) {
        return Err(Error::shape("widthwise_split", format!("{:?}", m.shape())));
    }
    let w = m.shape()[2] / 2;
    let mut halves = m.split(2, &[w, w])?.into_iter();
    Ok((halves.next().unwrap(), halves.next().unwrap()))
}

/// The operator on plain tensors. `attn` maps `[B·F, 2·H·W, d]` to the same
/// shape.
pub fn phi_tensor<T: Scalar>(
    x: &Tensor<T>,
    g: &TokenGrid,
    attn: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    g.expect(x.shape(), &g.stacked_shape(), "phi")?;
    let (src, tgt) = split_streams(x)?;
    let joined = widthwise_join(&fold_time(&src, g)?, &fold_time(&tgt, g)?)?;
    let seq_shape = [g.batch * g.frames, 2 * g.height * g.width, g.channels];
    let attended = attn(&joined.reshape(seq_shape)?)?;
    if attended.shape() != seq_shape {
        return Err(Error::shape(
            "phi",
            format!("attention changed shape to {:?}", attended.shape()),
        ));
    }
    let m = attended.reshape([g.batch * g.frames, g.height, 2 * g.width, g.channels])?;
    let (src, tgt) = widthwise_split(&m)?;
    stack_streams(&unfold_time(&src, g)?, &unfold_time(&tgt, g)?)
}

/// The operator recorded on a gradient tape; same layout steps as
/// [`phi_tensor`].
pub fn phi<T: Scalar>(
    graph: &mut Graph<T>,
    x: Var,
    g: &TokenGrid,
    attn: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Var> {
    g.expect(graph.shape(x), &g.stacked_shape(), "phi")?;
    let halves = graph.split(x, 0, &[g.batch, g.batch])?;
    let src = graph.reshape(halves[0], g.folded_shape())?;
    let tgt = graph.reshape(halves[1], g.folded_shape())?;
    let joined = graph.concat(&[src, tgt], 2)?;
    let seq_shape = [g.batch * g.frames, 2 * g.height * g.width, g.channels];
    let seq = graph.reshape(joined, seq_shape)?;
    let attended = attn(graph, seq)?;
    if graph.shape(attended) != seq_shape {
        return Err(Error::shape(
            "phi",
            format!("attention changed shape to {:?}", graph.shape(attended)),
        ));
    }
    let m = graph.reshape(attended, [g.batch * g.frames, g.height, 2 * g.width, g.channels])?;
    let cols = graph.split(m, 2, &[g.width, g.width])?;
    let src = graph.reshape(cols[0], g.stream_shape())?;
    let tgt = graph.reshape(cols[1], g.stream_shape())?;
    graph.concat(&[src, tgt], 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_zero_extent() {
        assert!(TokenGrid::new(1, 0, 2, 2, 4).is_err());
    }

    #[test]
    fn split_streams_rejects_odd_batch() {
        let x = Tensor::<f32>::zeros([3, 4, 2]);
        assert!(split_streams(&x).is_err());
    }

    #[test]
    fn single_frame_fold_is_pure_reshape() {
        let g = TokenGrid::new(2, 1, 2, 3, 2).unwrap();
        let x = Tensor::<f32>::from_fn([2, 6, 2], |i| i as f32);
        let f = fold_time(&x, &g).unwrap();
        assert_eq!(f.shape(), &[2, 2, 3, 2]);
        assert_eq!(f.data(), x.data());
    }

    #[test]
    fn two_frames_fold_in_order() {
        let g = TokenGrid::new(1, 2, 1, 1, 1).unwrap();
        let x = Tensor::<f32>::new([1, 2, 1], vec![10.0, 20.0]).unwrap();
        let f = fold_time(&x, &g).unwrap();
        assert_eq!(f.shape(), &[2, 1, 1, 1]);
        assert_eq!(f.data(), &[10.0, 20.0]);
    }

    #[test]
    fn width_one_join_alternates() {
        let src = Tensor::<f32>::full([1, 2, 1, 1], 1.0);
        let tgt = Tensor::<f32>::full([1, 2, 1, 1], 2.0);
        let m = widthwise_join(&src, &tgt).unwrap();
        assert_eq!(m.data(), &[1.0, 2.0, 1.0, 2.0]);
    }
}
