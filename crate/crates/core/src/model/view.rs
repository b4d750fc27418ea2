//! Column, channel, and row bookkeeping for the packed head layout.
//!
//! Pruning edits individual heads and state channels inside flat weight
//! matrices; [`HeadView`] is the single source of truth for where each piece
//! lives, so surgery code never re-derives offsets.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{BlockParams, ModelDims};
use crate::tensor::Tensor;

/// Index map over the packed `[z | x | B | C | dt]` in_proj layout, the
/// `[x | B | C]` conv channels, and the out_proj input rows of one block.
#[derive(Debug, Clone, Copy)]
pub struct HeadView {
    pub n_heads: usize,
    pub n_groups: usize,
    pub head_dim: usize,
    pub d_state: usize,
}

impl HeadView {
    pub fn new(n_heads: usize, n_groups: usize, head_dim: usize, d_state: usize) -> HeadView {
        HeadView {
            n_heads,
            n_groups,
            head_dim,
            d_state,
        }
    }

    /// View over a specific block (per-layer head/group counts).
    pub fn for_block(block: &BlockParams, dims: &ModelDims) -> HeadView {
        HeadView::new(block.n_heads, block.n_groups, dims.head_dim, dims.d_state)
    }

    pub fn d_inner(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn group_width(&self) -> usize {
        self.n_groups * self.d_state
    }

    pub fn in_proj_width(&self) -> usize {
        2 * self.d_inner() + 2 * self.group_width() + self.n_heads
    }

    pub fn conv_channels(&self) -> usize {
        self.d_inner() + 2 * self.group_width()
    }

    /// B/C group serving a head: contiguous blocks, `g = h * G / H`.
    pub fn group_of_head(&self, head: usize) -> usize {
        head * self.n_groups / self.n_heads
    }

    // ─── in_proj sections ──────────────────────────────────────────────────────

    pub fn z_section(&self) -> Range<usize> {
        0..self.d_inner()
    }

    pub fn x_section(&self) -> Range<usize> {
        self.d_inner()..2 * self.d_inner()
    }

    pub fn b_section(&self) -> Range<usize> {
        let start = 2 * self.d_inner();
        start..start + self.group_width()
    }

    pub fn c_section(&self) -> Range<usize> {
        let start = 2 * self.d_inner() + self.group_width();
        start..start + self.group_width()
    }

    pub fn dt_section(&self) -> Range<usize> {
        let start = 2 * self.d_inner() + 2 * self.group_width();
        start..start + self.n_heads
    }

    // ─── per-head / per-group in_proj columns ──────────────────────────────────

    pub fn z_cols(&self, head: usize) -> Range<usize> {
        let start = self.z_section().start + head * self.head_dim;
        start..start + self.head_dim
    }

    pub fn x_cols(&self, head: usize) -> Range<usize> {
        let start = self.x_section().start + head * self.head_dim;
        start..start + self.head_dim
    }

    pub fn b_cols(&self, group: usize) -> Range<usize> {
        let start = self.b_section().start + group * self.d_state;
        start..start + self.d_state
    }

    pub fn c_cols(&self, group: usize) -> Range<usize> {
        let start = self.c_section().start + group * self.d_state;
        start..start + self.d_state
    }

    pub fn dt_col(&self, head: usize) -> usize {
        self.dt_section().start + head
    }

    // ─── single channels ───────────────────────────────────────────────────────

    pub fn z_col(&self, head: usize, p: usize) -> usize {
        self.z_cols(head).start + p
    }

    pub fn x_col(&self, head: usize, p: usize) -> usize {
        self.x_cols(head).start + p
    }

    pub fn b_col(&self, group: usize, n: usize) -> usize {
        self.b_cols(group).start + n
    }

    pub fn c_col(&self, group: usize, n: usize) -> usize {
        self.c_cols(group).start + n
    }

    // ─── conv channels (layout [x | B | C]) ────────────────────────────────────

    pub fn conv_x_channels(&self, head: usize) -> Range<usize> {
        let start = head * self.head_dim;
        start..start + self.head_dim
    }

    pub fn conv_b_channels(&self, group: usize) -> Range<usize> {
        let start = self.d_inner() + group * self.d_state;
        start..start + self.d_state
    }

    pub fn conv_c_channels(&self, group: usize) -> Range<usize> {
        let start = self.d_inner() + self.group_width() + group * self.d_state;
        start..start + self.d_state
    }

    // ─── out_proj input rows / gated-norm entries ──────────────────────────────

    pub fn out_rows(&self, head: usize) -> Range<usize> {
        let start = head * self.head_dim;
        start..start + self.head_dim
    }
}

/// Splits the packed in_proj output `[T, 2HP + 2GN + H]` into
/// `(z [T,HP], x [T,HP], B [T,GN], C [T,GN], dt [T,H])`.
pub fn split_in_proj(
    proj: &Tensor,
    view: &HeadView,
) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let (_, width) = proj.dims2("model.split_in_proj")?;
    if width != view.in_proj_width() {
        return Err(Error::dim(
            "model.split_in_proj",
            format!(
                "packed width {width}, expected {} (H={}, P={}, G={}, N={})",
                view.in_proj_width(),
                view.n_heads,
                view.head_dim,
                view.n_groups,
                view.d_state
            ),
        ));
    }
    let z = proj.slice_cols(view.z_section().start, view.d_inner())?;
    let x = proj.slice_cols(view.x_section().start, view.d_inner())?;
    let b = proj.slice_cols(view.b_section().start, view.group_width())?;
    let c = proj.slice_cols(view.c_section().start, view.group_width())?;
    let dt = proj.slice_cols(view.dt_section().start, view.n_heads)?;
    Ok((z, x, b, c, dt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_section_widths() {
        // H=2, P=3, G=1, N=4 gives section widths (6, 6, 4, 4, 2), total 22.
        let v = HeadView::new(2, 1, 3, 4);
        assert_eq!(v.z_section(), 0..6);
        assert_eq!(v.x_section(), 6..12);
        assert_eq!(v.b_section(), 12..16);
        assert_eq!(v.c_section(), 16..20);
        assert_eq!(v.dt_section(), 20..22);
        assert_eq!(v.in_proj_width(), 22);
    }

    #[test]
    fn sections_tile_the_width_exactly() {
        for (h, g, p, n) in [(2, 1, 3, 4), (4, 2, 2, 3), (6, 6, 2, 5), (8, 4, 4, 4)] {
            let v = HeadView::new(h, g, p, n);
            let mut cursor = 0;
            for r in [v.z_section(), v.x_section(), v.b_section(), v.c_section(), v.dt_section()] {
                assert_eq!(r.start, cursor, "H={h} G={g}");
                cursor = r.end;
            }
            assert_eq!(cursor, v.in_proj_width());
            // Per-head / per-group columns tile their sections.
            let mut z_cursor = v.z_section().start;
            for head in 0..h {
                assert_eq!(v.z_cols(head).start, z_cursor);
                z_cursor = v.z_cols(head).end;
            }
            assert_eq!(z_cursor, v.z_section().end);
            let mut b_cursor = v.b_section().start;
            for group in 0..g {
                assert_eq!(v.b_cols(group).start, b_cursor);
                b_cursor = v.b_cols(group).end;
            }
            assert_eq!(b_cursor, v.b_section().end);
        }
    }

    #[test]
    fn mha_mapping_is_one_group_per_head() {
        let v = HeadView::new(4, 4, 2, 3);
        for head in 0..4 {
            assert_eq!(v.group_of_head(head), head);
        }
    }

    #[test]
    fn gva_groups_are_contiguous_blocks() {
        let v = HeadView::new(8, 2, 2, 3);
        let groups: Vec<usize> = (0..8).map(|h| v.group_of_head(h)).collect();
        assert_eq!(groups, [0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn split_desk_example() {
        let v = HeadView::new(2, 1, 3, 4);
        let row: Vec<f32> = (0..22).map(|i| i as f32).collect();
        let proj = Tensor::new(vec![1, 22], row).unwrap();
        let (z, x, b, c, dt) = split_in_proj(&proj, &v).unwrap();
        assert_eq!(z.shape(), [1, 6]);
        assert_eq!(x.shape(), [1, 6]);
        assert_eq!(b.shape(), [1, 4]);
        assert_eq!(c.shape(), [1, 4]);
        assert_eq!(dt.shape(), [1, 2]);
        assert_eq!(z.data()[0], 0.0);
        assert_eq!(x.data()[0], 6.0);
        assert_eq!(b.data()[0], 12.0);
        assert_eq!(c.data()[0], 16.0);
        assert_eq!(dt.data(), [20.0, 21.0]);
    }

    #[test]
    fn split_mha_group_widths() {
        // H=2, G=2, P=2, N=3: B and C sections are G*N = 6 wide.
        let v = HeadView::new(2, 2, 2, 3);
        let proj = Tensor::zeros(vec![3, v.in_proj_width()]);
        let (z, x, b, c, dt) = split_in_proj(&proj, &v).unwrap();
        assert_eq!(z.shape(), [3, 4]);
        assert_eq!(x.shape(), [3, 4]);
        assert_eq!(b.shape(), [3, 6]);
        assert_eq!(c.shape(), [3, 6]);
        assert_eq!(dt.shape(), [3, 2]);
    }

    #[test]
    fn split_rejects_wrong_width() {
        let v = HeadView::new(2, 1, 3, 4);
        let proj = Tensor::zeros(vec![1, 21]);
        let err = split_in_proj(&proj, &v).unwrap_err();
        assert!(err.to_string().contains("expected 22"));
    }
}
