//! Structured ops: positional encoding, dense 2D convolution, sparse 3D
//! convolution over a neighbor table, weighted gathers, row stacking, masked
//! per-row moments, and ray compositing. Each op validates its plan when
//! recorded and implements an exact backward rule.

use std::f64::consts::PI;
use std::sync::Arc;

use super::scalar::Real;
use super::tape::{axpy, dot, plan_err, shape_err, Gradients, NodeId, Tape, TapeError, TapeOp};
use super::tensor::Tensor;

// ---- positional encoding ----------------------------------------------------

struct PositionalEncode {
    x: NodeId,
    octaves: usize,
}

impl<T: Real> Tape<T> {
    /// Frequency-expand `[n,C]` into `[n, C*(2*octaves+1)]`:
    /// `[x, sin(2^l pi x), cos(2^l pi x)]` for `l = 0..octaves`, the identity
    /// block first, then per-octave sin and cos blocks.
    pub fn positional_encode(&mut self, x: NodeId, octaves: usize) -> Result<NodeId, TapeError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(shape_err("positional_encode", format!("need rank 2, got {:?}", xv.shape())));
        }
        let (n, c) = (xv.rows(), xv.cols());
        let width = c * (2 * octaves + 1);
        let mut out = Tensor::zeros(&[n, width]);
        for r in 0..n {
            let src = xv.row(r);
            let dst = out.row_mut(r);
            dst[..c].copy_from_slice(src);
            for l in 0..octaves {
                let freq = T::from_f64((1u64 << l) as f64 * PI);
                let sin_at = c * (1 + 2 * l);
                let cos_at = sin_at + c;
                for (j, &v) in src.iter().enumerate() {
                    let a = freq * v;
                    dst[sin_at + j] = a.sin();
                    dst[cos_at + j] = a.cos();
                }
            }
        }
        Ok(self.push_op(out, PositionalEncode { x, octaves }))
    }
}

impl<T: Real> TapeOp<T> for PositionalEncode {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let xv = tape.value(self.x);
        let (n, c) = (xv.rows(), xv.cols());
        let shape = xv.shape().to_vec();
        let gx = grads.accumulate(self.x, &shape);
        for r in 0..n {
            let src = xv.row(r);
            let grow = g.row(r);
            let gxr = gx.row_mut(r);
            for j in 0..c {
                let mut acc = grow[j]; // identity block
                for l in 0..self.octaves {
                    let freq = T::from_f64((1u64 << l) as f64 * PI);
                    let a = freq * src[j];
                    let sin_at = c * (1 + 2 * l) + j;
                    let cos_at = sin_at + c;
                    acc += freq * (a.cos() * grow[sin_at] - a.sin() * grow[cos_at]);
                }
                gxr[j] += acc;
            }
        }
    }
}

// ---- dense 2D convolution ---------------------------------------------------

struct Conv2d {
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
    stride: usize,
}

fn conv2d_out_dim(size: usize, stride: usize) -> usize {
    // Same-padding with odd kernels: output covers input centers 0, s, 2s, ...
    size.div_ceil(stride)
}

impl<T: Real> Tape<T> {
    /// 2D convolution with same-padding: input `[Cin,H,W]`, weight
    /// `[Cout,Cin,k,k]` (k odd), bias `[Cout]`, output `[Cout,ceil(H/s),ceil(W/s)]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId, TapeError> {
        let iv = self.value(input);
        let wv = self.value(weight);
        let bv = self.value(bias);
        if iv.shape().len() != 3 || wv.shape().len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} weight {:?}", iv.shape(), wv.shape()),
            ));
        }
        let (cin, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
        let (cout, wcin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if wcin != cin || kh != kw || kh % 2 == 0 || bv.len() != cout || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input {:?} weight {:?} bias {:?} stride {}",
                    iv.shape(),
                    wv.shape(),
                    bv.shape(),
                    stride
                ),
            ));
        }
        let k = kh;
        let pad = (k - 1) / 2;
        let (oh, ow) = (conv2d_out_dim(h, stride), conv2d_out_dim(w, stride));
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        {
            let idat = iv.data();
            let wdat = wv.data();
            let odat = out.data_mut();
            for co in 0..cout {
                let b = bv.data()[co];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b;
                        for ci in 0..cin {
                            let iplane = &idat[ci * h * w..(ci + 1) * h * w];
                            let wbase = ((co * cin + ci) * k) * k;
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wdat[wbase + ky * k + kx]
                                        * iplane[iy as usize * w + ix as usize];
                                }
                            }
                        }
                        odat[(co * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Ok(self.push_op(out, Conv2d { input, weight, bias, stride }))
    }
}

impl<T: Real> TapeOp<T> for Conv2d {
    fn backward(&self, tape: &Tape<T>, out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let iv = tape.value(self.input);
        let wv = tape.value(self.weight);
        let (cin, h, w) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
        let cout = wv.shape()[0];
        let k = wv.shape()[2];
        let pad = (k - 1) / 2;
        let ov = tape.value(out);
        let (oh, ow) = (ov.shape()[1], ov.shape()[2]);
        let s = self.stride;

        {
            let bshape = tape.value(self.bias).shape().to_vec();
            let gb = grads.accumulate(self.bias, &bshape);
            for co in 0..cout {
                let mut acc = T::zero();
                for &gv in &g.data()[co * oh * ow..(co + 1) * oh * ow] {
                    acc += gv;
                }
                gb.data_mut()[co] += acc;
            }
        }
        {
            let wshape = wv.shape().to_vec();
            let gw = grads.accumulate(self.weight, &wshape);
            let idat = iv.data();
            let gdat = g.data();
            let gwdat = gw.data_mut();
            for co in 0..cout {
                let gplane = &gdat[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..cin {
                    let iplane = &idat[ci * h * w..(ci + 1) * h * w];
                    let wbase = ((co * cin + ci) * k) * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = T::zero();
                            for oy in 0..oh {
                                let iy = (oy * s + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * s + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += gplane[oy * ow + ox] * iplane[iy as usize * w + ix as usize];
                                }
                            }
                            gwdat[wbase + ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
        {
            let ishape = iv.shape().to_vec();
            let gi = grads.accumulate(self.input, &ishape);
            let wdat = wv.data();
            let gdat = g.data();
            let gidat = gi.data_mut();
            for ci in 0..cin {
                for iy in 0..h {
                    for ix in 0..w {
                        let mut acc = T::zero();
                        for ky in 0..k {
                            // oy*s + ky - pad == iy  =>  oy = (iy + pad - ky)/s
                            let num_y = iy as isize + pad as isize - ky as isize;
                            if num_y < 0 || num_y % s as isize != 0 {
                                continue;
                            }
                            let oy = (num_y / s as isize) as usize;
                            if oy >= oh {
                                continue;
                            }
                            for kx in 0..k {
                                let num_x = ix as isize + pad as isize - kx as isize;
                                if num_x < 0 || num_x % s as isize != 0 {
                                    continue;
                                }
                                let ox = (num_x / s as isize) as usize;
                                if ox >= ow {
                                    continue;
                                }
                                for co in 0..cout {
                                    acc += gdat[(co * oh + oy) * ow + ox]
                                        * wdat[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        gidat[(ci * h + iy) * w + ix] += acc;
                    }
                }
            }
        }
    }
}

// ---- sparse 3D convolution --------------------------------------------------

/// Precomputed neighbor indices for a sparse voxel set: `taps[v*k3 + o]` is
/// the row of the voxel at `coord(v) + offsets[o]`, or [`NeighborTable::ABSENT`].
/// Offsets enumerate `(dx,dy,dz)` lexicographically over `-r..=r`, so the
/// reverse of offset `o` is `k3-1-o`.
#[derive(Debug, Clone)]
pub struct NeighborTable {
    kernel: usize,
    rows: usize,
    taps: Vec<u32>,
}

impl NeighborTable {
    pub const ABSENT: u32 = u32::MAX;

    /// Lexicographic offsets for an odd `kernel` size.
    pub fn offsets(kernel: usize) -> Vec<[i32; 3]> {
        assert!(kernel % 2 == 1, "kernel must be odd, got {kernel}");
        let r = (kernel / 2) as i32;
        let mut out = Vec::with_capacity(kernel * kernel * kernel);
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }

    pub fn from_taps(kernel: usize, rows: usize, taps: Vec<u32>) -> Self {
        let k3 = kernel * kernel * kernel;
        assert!(kernel % 2 == 1, "kernel must be odd, got {kernel}");
        assert_eq!(taps.len(), rows * k3, "neighbor table size mismatch");
        debug_assert!(taps.iter().all(|&t| t == Self::ABSENT || (t as usize) < rows));
        Self { kernel, rows, taps }
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    fn k3(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn tap(&self, v: usize, o: usize) -> Option<usize> {
        let t = self.taps[v * self.k3() + o];
        (t != Self::ABSENT).then_some(t as usize)
    }
}

struct SparseConv3d {
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
    nbrs: Arc<NeighborTable>,
}

impl<T: Real> Tape<T> {
    /// Sparse 3D convolution: input `[V,Cin]`, weight `[k3,Cin,Cout]`, bias
    /// `[Cout]`, output `[V,Cout]`. Rows absent from the voxel set contribute
    /// nothing (and receive no gradient), which is what makes the operator
    /// well-defined on an unbounded sparse domain.
    pub fn sparse_conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        nbrs: Arc<NeighborTable>,
    ) -> Result<NodeId, TapeError> {
        let iv = self.value(input);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let k3 = nbrs.k3();
        if iv.shape().len() != 2 || iv.rows() != nbrs.rows() {
            return Err(shape_err(
                "sparse_conv3d",
                format!("input {:?} vs table rows {}", iv.shape(), nbrs.rows()),
            ));
        }
        let cin = iv.cols();
        if wv.shape() != [k3, cin, bv.len()] {
            return Err(shape_err(
                "sparse_conv3d",
                format!("weight {:?}, want [{},{},{}]", wv.shape(), k3, cin, bv.len()),
            ));
        }
        let cout = bv.len();
        let v = nbrs.rows();
        let mut out = Tensor::zeros(&[v, cout]);
        {
            let idat = iv.data();
            let wdat = wv.data();
            for row in 0..v {
                let orow = &mut out.data_mut()[row * cout..(row + 1) * cout];
                orow.copy_from_slice(bv.data());
                for o in 0..k3 {
                    let Some(tap) = nbrs.tap(row, o) else { continue };
                    let irow = &idat[tap * cin..(tap + 1) * cin];
                    let wslab = &wdat[o * cin * cout..(o + 1) * cin * cout];
                    for (ci, &x) in irow.iter().enumerate() {
                        axpy(orow, x, &wslab[ci * cout..(ci + 1) * cout]);
                    }
                }
            }
        }
        Ok(self.push_op(out, SparseConv3d { input, weight, bias, nbrs }))
    }
}

impl<T: Real> TapeOp<T> for SparseConv3d {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let iv = tape.value(self.input);
        let wv = tape.value(self.weight);
        let (v, cin) = (iv.rows(), iv.cols());
        let cout = g.cols();
        let k3 = self.nbrs.k3();

        {
            let bshape = tape.value(self.bias).shape().to_vec();
            let gb = grads.accumulate(self.bias, &bshape);
            for row in 0..v {
                for (b, &gv) in gb.data_mut().iter_mut().zip(g.row(row)) {
                    *b += gv;
                }
            }
        }
        {
            let wshape = wv.shape().to_vec();
            let gw = grads.accumulate(self.weight, &wshape);
            let idat = iv.data();
            let gwdat = gw.data_mut();
            for row in 0..v {
                let grow = g.row(row);
                for o in 0..k3 {
                    let Some(tap) = self.nbrs.tap(row, o) else { continue };
                    let irow = &idat[tap * cin..(tap + 1) * cin];
                    let slab = &mut gwdat[o * cin * cout..(o + 1) * cin * cout];
                    for (ci, &x) in irow.iter().enumerate() {
                        axpy(&mut slab[ci * cout..(ci + 1) * cout], x, grow);
                    }
                }
            }
        }
        {
            // dIn[v] collects g from every output row u whose window covers v:
            // u = coord(v) - offset[o] is exactly the reverse tap of v.
            let ishape = iv.shape().to_vec();
            let gi = grads.accumulate(self.input, &ishape);
            let wdat = wv.data();
            for row in 0..v {
                let girow = &mut gi.data_mut()[row * cin..(row + 1) * cin];
                for o in 0..k3 {
                    let Some(u) = self.nbrs.tap(row, k3 - 1 - o) else { continue };
                    let grow = g.row(u);
                    let wslab = &wdat[o * cin * cout..(o + 1) * cin * cout];
                    for (ci, gv) in girow.iter_mut().enumerate() {
                        *gv += dot(grow, &wslab[ci * cout..(ci + 1) * cout]);
                    }
                }
            }
        }
    }
}

// ---- weighted gather ---------------------------------------------------------

/// Sparse row-combination plan: output row `r` is the weighted sum of source
/// rows `taps(r)`. Rows with no taps are exactly zero. Used for trilinear
/// voxel sampling and bilinear image-feature sampling.
#[derive(Debug, Clone)]
pub struct GatherPlan<T> {
    starts: Vec<u32>,
    src: Vec<u32>,
    weight: Vec<T>,
}

impl<T: Real> GatherPlan<T> {
    pub fn new(rows: Vec<Vec<(u32, T)>>) -> Self {
        let total: usize = rows.iter().map(Vec::len).sum();
        let mut starts = Vec::with_capacity(rows.len() + 1);
        let mut src = Vec::with_capacity(total);
        let mut weight = Vec::with_capacity(total);
        starts.push(0u32);
        for row in &rows {
            for &(i, w) in row {
                src.push(i);
                weight.push(w);
            }
            starts.push(src.len() as u32);
        }
        Self { starts, src, weight }
    }

    pub fn rows(&self) -> usize {
        self.starts.len() - 1
    }

    fn taps(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let lo = self.starts[r] as usize;
        let hi = self.starts[r + 1] as usize;
        self.src[lo..hi].iter().zip(&self.weight[lo..hi]).map(|(&i, &w)| (i as usize, w))
    }

    fn max_src(&self) -> Option<u32> {
        self.src.iter().copied().max()
    }
}

struct GatherWeighted<T> {
    src: NodeId,
    plan: Arc<GatherPlan<T>>,
}

impl<T: Real> Tape<T> {
    /// Weighted row gather (see [`GatherPlan`]): `[V,C] -> [R,C]`.
    pub fn gather(&mut self, src: NodeId, plan: Arc<GatherPlan<T>>) -> Result<NodeId, TapeError> {
        let sv = self.value(src);
        if sv.shape().len() != 2 {
            return Err(shape_err("gather", format!("need rank 2 source, got {:?}", sv.shape())));
        }
        if let Some(m) = plan.max_src() {
            if m as usize >= sv.rows() {
                return Err(plan_err("gather", format!("tap row {} out of {} rows", m, sv.rows())));
            }
        }
        let c = sv.cols();
        let mut out = Tensor::zeros(&[plan.rows(), c]);
        for r in 0..plan.rows() {
            let orow = out.row_mut(r);
            for (i, w) in plan.taps(r) {
                axpy(orow, w, sv.row(i));
            }
        }
        Ok(self.push_op(out, GatherWeighted { src, plan }))
    }
}

impl<T: Real> TapeOp<T> for GatherWeighted<T> {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let shape = tape.value(self.src).shape().to_vec();
        let gs = grads.accumulate(self.src, &shape);
        for r in 0..self.plan.rows() {
            let grow = g.row(r);
            for (i, w) in self.plan.taps(r) {
                axpy(gs.row_mut(i), w, grow);
            }
        }
    }
}

// ---- row stacking -------------------------------------------------------------

struct StackRows {
    parts: Vec<(NodeId, Arc<Vec<u32>>)>,
}

struct SelectRows {
    x: NodeId,
    rows: Arc<Vec<u32>>,
}

impl<T: Real> Tape<T> {
    /// Extract rows of `x` in the given order. Like `stack_rows`, rows are
    /// copied bit-for-bit with no arithmetic. Row indices may repeat; the
    /// backward pass accumulates into the shared source row.
    pub fn select_rows(&mut self, x: NodeId, rows: Arc<Vec<u32>>) -> Result<NodeId, TapeError> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(shape_err("select_rows", format!("need a matrix, got {:?}", xv.shape())));
        }
        let (n, c) = (xv.rows(), xv.cols());
        for &r in rows.iter() {
            if r as usize >= n {
                return Err(plan_err("select_rows", format!("row {} out of range {}", r, n)));
            }
        }
        let mut out = Tensor::zeros(&[rows.len(), c]);
        for (j, &r) in rows.iter().enumerate() {
            out.row_mut(j).copy_from_slice(xv.row(r as usize));
        }
        Ok(self.push_op(out, SelectRows { x, rows }))
    }
}

impl<T: Real> TapeOp<T> for SelectRows {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let shape = tape.value(self.x).shape().to_vec();
        let gx = grads.accumulate(self.x, &shape);
        for (j, &r) in self.rows.iter().enumerate() {
            let src = g.row(j);
            for (d, &s) in gx.row_mut(r as usize).iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// Assemble an output whose row `placement[j]` is row `j` of the part, for
    /// every part. Placements must tile `0..R` exactly once. Rows are copied
    /// bit-for-bit — no arithmetic — so untouched rows stay byte-identical,
    /// which the fusion step relies on.
    pub fn stack_rows(&mut self, parts: Vec<(NodeId, Arc<Vec<u32>>)>) -> Result<NodeId, TapeError> {
        if parts.is_empty() {
            return Err(shape_err("stack_rows", "no inputs"));
        }
        let c = self.value(parts[0].0).cols();
        let mut total = 0usize;
        for (p, map) in &parts {
            let v = self.value(*p);
            if v.shape().len() != 2 || v.cols() != c || v.rows() != map.len() {
                return Err(shape_err(
                    "stack_rows",
                    format!("part {:?} with {} placements (cols want {})", v.shape(), map.len(), c),
                ));
            }
            total += map.len();
        }
        let mut seen = vec![false; total];
        for (_, map) in &parts {
            for &r in map.iter() {
                let r = r as usize;
                if r >= total || seen[r] {
                    return Err(plan_err("stack_rows", format!("row {} missing or duplicated", r)));
                }
                seen[r] = true;
            }
        }
        let mut out = Tensor::zeros(&[total, c]);
        for (p, map) in &parts {
            let pv = self.value(*p);
            for (j, &r) in map.iter().enumerate() {
                out.row_mut(r as usize).copy_from_slice(pv.row(j));
            }
        }
        Ok(self.push_op(out, StackRows { parts }))
    }
}

impl<T: Real> TapeOp<T> for StackRows {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        for (p, map) in &self.parts {
            let shape = tape.value(*p).shape().to_vec();
            let gp = grads.accumulate(*p, &shape);
            for (j, &r) in map.iter().enumerate() {
                let src = g.row(r as usize);
                for (d, &s) in gp.row_mut(j).iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

// ---- masked per-row moments ----------------------------------------------------

/// Visibility masks for a set of per-view feature tensors: `masks[i][v]` says
/// whether view `i` covers voxel row `v`. Every row must be covered by at
/// least one view.
#[derive(Debug, Clone)]
pub struct MaskSet {
    masks: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn new(masks: Vec<Vec<bool>>) -> Self {
        assert!(!masks.is_empty(), "MaskSet needs at least one view");
        let v = masks[0].len();
        assert!(masks.iter().all(|m| m.len() == v), "MaskSet ragged masks");
        Self { masks }
    }

    pub fn views(&self) -> usize {
        self.masks.len()
    }

    pub fn rows(&self) -> usize {
        self.masks[0].len()
    }

    pub fn visible(&self, view: usize, row: usize) -> bool {
        self.masks[view][row]
    }
}

struct MaskedMeanVar {
    views: Vec<NodeId>,
    masks: Arc<MaskSet>,
}

/// Deterministic visible-view ordering for one voxel row: views sorted by
/// their feature values (lexicographic), which makes the reduction canonical
/// under any permutation of the input views.
fn visible_sorted<T: Real>(values: &[&[T]], visible: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| visible[i]).collect();
    idx.sort_by(|&a, &b| {
        for (x, y) in values[a].iter().zip(values[b]) {
            match x.partial_cmp(y) {
                Some(std::cmp::Ordering::Equal) | None => continue,
                Some(ord) => return ord,
            }
        }
        std::cmp::Ordering::Equal
    });
    idx
}

impl<T: Real> Tape<T> {
    /// Per-row mean and population variance across visible views:
    /// `K x [V,C] -> [V,2C]` (mean in the first C columns, variance in the
    /// rest). The reduction is shifted by the smallest visible value and
    /// summed in value order, so identical inputs give an exactly-zero
    /// variance and permuting the views gives bitwise-identical output.
    pub fn masked_mean_var(
        &mut self,
        views: &[NodeId],
        masks: Arc<MaskSet>,
    ) -> Result<NodeId, TapeError> {
        if views.is_empty() || views.len() != masks.views() {
            return Err(plan_err(
                "masked_mean_var",
                format!("{} views vs {} masks", views.len(), masks.views()),
            ));
        }
        let v = masks.rows();
        let c = self.value(views[0]).cols();
        for &view in views {
            let val = self.value(view);
            if val.shape() != [v, c] {
                return Err(shape_err(
                    "masked_mean_var",
                    format!("view {:?}, want [{},{}]", val.shape(), v, c),
                ));
            }
        }
        for row in 0..v {
            if !(0..views.len()).any(|i| masks.visible(i, row)) {
                return Err(plan_err("masked_mean_var", format!("row {} visible in no view", row)));
            }
        }
        let mut out = Tensor::zeros(&[v, 2 * c]);
        for row in 0..v {
            let values: Vec<&[T]> = views.iter().map(|&n| self.value(n).row(row)).collect();
            let vis: Vec<bool> = (0..views.len()).map(|i| masks.visible(i, row)).collect();
            let order = visible_sorted(&values, &vis);
            let n = T::from_f64(order.len() as f64);
            let shift = values[order[0]];
            let orow = out.row_mut(row);
            for j in 0..c {
                let mut acc = T::zero();
                for &i in &order {
                    acc += values[i][j] - shift[j];
                }
                let m_sh = acc / n;
                let mean = shift[j] + m_sh;
                let mut var = T::zero();
                for &i in &order {
                    let dev = (values[i][j] - shift[j]) - m_sh;
                    var += dev * dev;
                }
                orow[j] = mean;
                orow[c + j] = var / n;
            }
        }
        Ok(self.push_op(out, MaskedMeanVar { views: views.to_vec(), masks }))
    }
}

impl<T: Real> TapeOp<T> for MaskedMeanVar {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let v = self.masks.rows();
        let c = tape.value(self.views[0]).cols();
        let shape = vec![v, c];
        // Two passes per view to keep the borrow of `grads` simple.
        for (vi, &view) in self.views.iter().enumerate() {
            let mut gview = Tensor::zeros(&shape);
            for row in 0..v {
                if !self.masks.visible(vi, row) {
                    continue;
                }
                let values: Vec<&[T]> = self.views.iter().map(|&n| tape.value(n).row(row)).collect();
                let vis: Vec<bool> =
                    (0..self.views.len()).map(|i| self.masks.visible(i, row)).collect();
                let order = visible_sorted(&values, &vis);
                let n = T::from_f64(order.len() as f64);
                let shift = values[order[0]];
                let grow = g.row(row);
                let dst = gview.row_mut(row);
                for j in 0..c {
                    // Recompute the shifted mean exactly as forward did.
                    let mut acc = T::zero();
                    for &i in &order {
                        acc += values[i][j] - shift[j];
                    }
                    let m_sh = acc / n;
                    let dev = (values[vi][j] - shift[j]) - m_sh;
                    let two = T::from_f64(2.0);
                    dst[j] += grow[j] / n + grow[c + j] * two * dev / n;
                }
            }
            grads.accumulate(view, &shape).add_assign(&gview);
        }
    }
}

// ---- ray compositing -------------------------------------------------------------

/// One ray's slice of the flattened sample arrays.
#[derive(Debug, Clone, Copy)]
pub struct RaySpan {
    pub start: u32,
    pub len: u32,
}

/// Fixed (non-differentiated) data for compositing a batch of rays: per-sample
/// depths and step lengths, per-ray spans into them, and the background color
/// composited behind the last sample.
#[derive(Debug, Clone)]
pub struct CompositePlan<T> {
    pub spans: Vec<RaySpan>,
    pub ts: Vec<T>,
    pub deltas: Vec<T>,
    pub background: [T; 3],
    /// Floor on the accumulated weight when normalizing expected depth.
    pub depth_eps: T,
}

impl<T: Real> CompositePlan<T> {
    fn validate(&self, samples: usize) -> Result<(), TapeError> {
        if self.ts.len() != samples || self.deltas.len() != samples {
            return Err(plan_err(
                "composite",
                format!("{} samples vs {} ts / {} deltas", samples, self.ts.len(), self.deltas.len()),
            ));
        }
        let mut cursor = 0u32;
        for (r, span) in self.spans.iter().enumerate() {
            if span.start != cursor {
                return Err(plan_err("composite", format!("ray {} spans not contiguous", r)));
            }
            cursor += span.len;
            let lo = span.start as usize;
            let hi = lo + span.len as usize;
            for i in lo..hi {
                if !self.deltas[i].is_finite() || self.deltas[i] <= T::zero() {
                    return Err(plan_err("composite", format!("ray {} has non-positive delta", r)));
                }
                if i > lo && !(self.ts[i] > self.ts[i - 1]) {
                    return Err(plan_err(
                        "composite",
                        format!("ray {} sample depths not strictly increasing", r),
                    ));
                }
            }
        }
        if cursor as usize != samples {
            return Err(plan_err(
                "composite",
                format!("spans cover {} of {} samples", cursor, samples),
            ));
        }
        Ok(())
    }
}

struct Composite<T> {
    sigma: NodeId,
    color: NodeId,
    plan: Arc<CompositePlan<T>>,
}

impl<T: Real> Tape<T> {
    /// Front-to-back alpha compositing of ray samples.
    ///
    /// `sigma` is `[S,1]` density, `color` `[S,3]` radiance; the plan carries
    /// depths/steps/spans. Output is `[R,5]`: RGB (with background composited
    /// behind the final transmittance), expected depth (weight-normalized),
    /// and the final transmittance itself.
    pub fn composite(
        &mut self,
        sigma: NodeId,
        color: NodeId,
        plan: Arc<CompositePlan<T>>,
    ) -> Result<NodeId, TapeError> {
        let sv = self.value(sigma);
        let cv = self.value(color);
        if sv.shape().len() != 2 || sv.cols() != 1 || cv.shape() != [sv.rows(), 3] {
            return Err(shape_err(
                "composite",
                format!("sigma {:?} color {:?}", sv.shape(), cv.shape()),
            ));
        }
        plan.validate(sv.rows())?;
        let r = plan.spans.len();
        let mut out = Tensor::zeros(&[r, 5]);
        for (ri, span) in plan.spans.iter().enumerate() {
            let lo = span.start as usize;
            let hi = lo + span.len as usize;
            let mut trans = T::one();
            let mut rgb = [T::zero(); 3];
            let mut dsum = T::zero();
            let mut wsum = T::zero();
            for i in lo..hi {
                let alpha = T::one() - (-sv.data()[i] * plan.deltas[i]).exp();
                let w = trans * alpha;
                let crow = cv.row(i);
                for ch in 0..3 {
                    rgb[ch] += w * crow[ch];
                }
                dsum += w * plan.ts[i];
                wsum += w;
                trans *= T::one() - alpha;
            }
            for ch in 0..3 {
                rgb[ch] += trans * plan.background[ch];
            }
            let orow = out.row_mut(ri);
            orow[0] = rgb[0];
            orow[1] = rgb[1];
            orow[2] = rgb[2];
            orow[3] = dsum / wsum.maximum(plan.depth_eps);
            orow[4] = trans;
        }
        Ok(self.push_op(out, Composite { sigma, color, plan }))
    }
}

impl<T: Real> TapeOp<T> for Composite<T> {
    fn backward(&self, tape: &Tape<T>, _out: NodeId, g: &Tensor<T>, grads: &mut Gradients<T>) {
        let sv = tape.value(self.sigma);
        let cv = tape.value(self.color);
        let s = sv.rows();
        let mut gsig = Tensor::zeros(&[s, 1]);
        let mut gcol = Tensor::zeros(&[s, 3]);
        let tiny = T::from_f64(1e-12);

        for (ri, span) in self.plan.spans.iter().enumerate() {
            let lo = span.start as usize;
            let hi = lo + span.len as usize;
            let grow = g.row(ri);
            let (gc, gd, gt) = ([grow[0], grow[1], grow[2]], grow[3], grow[4]);

            // Recompute the forward pass for this ray.
            let n = hi - lo;
            let mut alpha = vec![T::zero(); n];
            let mut trans_before = vec![T::zero(); n];
            let mut weight = vec![T::zero(); n];
            let mut trans = T::one();
            let mut dsum = T::zero();
            let mut wsum = T::zero();
            for (j, i) in (lo..hi).enumerate() {
                let a = T::one() - (-sv.data()[i] * self.plan.deltas[i]).exp();
                trans_before[j] = trans;
                alpha[j] = a;
                let w = trans * a;
                weight[j] = w;
                dsum += w * self.plan.ts[i];
                wsum += w;
                trans *= T::one() - a;
            }
            let denom = wsum.maximum(self.plan.depth_eps);
            let depth = dsum / denom;

            // d loss / d final transmittance, including the background path.
            let mut g_tn = gt;
            for ch in 0..3 {
                g_tn += gc[ch] * self.plan.background[ch];
            }

            // Per-sample weight gradients.
            let mut g_w = vec![T::zero(); n];
            for (j, i) in (lo..hi).enumerate() {
                let crow = cv.row(i);
                let mut acc = T::zero();
                for ch in 0..3 {
                    acc += gc[ch] * crow[ch];
                }
                // Depth: d(dsum/denom)/dw_j. When wsum is clamped by the eps
                // floor the denominator is constant.
                acc += if wsum > self.plan.depth_eps {
                    gd * (self.plan.ts[i] - depth) / denom
                } else {
                    gd * self.plan.ts[i] / denom
                };
                g_w[j] = acc;
                gcol.row_mut(i)[0] += weight[j] * gc[0];
                gcol.row_mut(i)[1] += weight[j] * gc[1];
                gcol.row_mut(i)[2] += weight[j] * gc[2];
            }

            // Suffix sweep: alpha_k influences its own weight (T_k factor) and
            // scales every later weight and the final transmittance by
            // (1 - alpha_k).
            let mut suffix = g_tn * trans; // trans == T_N here
            for j in (0..n).rev() {
                let i = lo + j;
                let one_m_a = (T::one() - alpha[j]).maximum(tiny);
                let g_alpha = g_w[j] * trans_before[j] - suffix / one_m_a;
                // d alpha / d sigma = delta * (1 - alpha)
                gsig.data_mut()[i] += g_alpha * self.plan.deltas[i] * (T::one() - alpha[j]);
                suffix += g_w[j] * weight[j];
            }
        }

        grads.accumulate(self.sigma, &[s, 1]).add_assign(&gsig);
        grads.accumulate(self.color, &[s, 3]).add_assign(&gcol);
    }
}
