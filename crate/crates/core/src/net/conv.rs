//! Convolution engine for aggregated layers.
//!
//! An aggregated layer runs several parallel stride-1 shape-preserving
//! convolutions (kernel sizes ascending, e.g. 3/4/5) over one input and
//! concatenates their outputs along channels. With the shape-preserving
//! padding rule — `pad_before = (k-1)/2`, `pad_after = k-1-pad_before` —
//! the input taps of a smaller kernel are a subset of any larger one's.
//!
//! Rather than materializing an im2col matrix (25x the input, mostly
//! redundant copies), the engine works on the zero-padded pixel grid,
//! where shifting by a tap offset `(dy, dx)` is adding the constant
//! `dy*padded_width + dx` to the flattened row index. Each tap then
//! contributes one dense GEMM between *contiguous row slices*:
//!
//! * forward: `out_padded[r] += in_padded[r + δ] · W_t` for every tap;
//! * input gradient: `dx_padded[r + δ] += dz_padded[r] · W_tᵀ`;
//! * weight gradient: `dW_t += in_padded[rows + δ]ᵀ · dz_padded[rows]`.
//!
//! Rows shifted past a scanline edge or an image boundary land in that
//! image's own zero padding or a neighbor's: zeros on the input side
//! contribute nothing, and stray products on the output side land only
//! in padding rows, which are discarded when the interior is extracted.
//! Taps are ordered by the first (smallest) kernel that uses them, and
//! a tap owned by kernel group `g` feeds only the output channels of
//! branches `>= g`, so no structurally-zero weights are touched.
//!
//! Batches are processed in fixed-size chunks of images
//! ([`crate::parallel::CHUNK_IMAGES`]); chunk order, tap order, and the
//! gradient reduction order are fixed, so sequential and parallel
//! builds produce bit-identical results.

use ndarray::linalg::general_mat_mul;
use ndarray::{
    s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView4, ArrayViewMut2, ArrayViewMut4,
    Axis, CowArray, Ix2, Ix4, NdFloat,
};

use crate::parallel::{self, CHUNK_IMAGES};

use super::{Activation, AggLayer};

/// Tap layout shared by all branches of one aggregated layer.
#[derive(Clone, Debug)]
pub(crate) struct TapPlan {
    /// (dy, dx) input offsets, grouped by owning kernel.
    offsets: Vec<(isize, isize)>,
    /// Cumulative tap count per kernel group; group `g` owns taps
    /// `group_end[g-1]..group_end[g]`.
    group_end: Vec<usize>,
    pad_before: usize,
    pad_after: usize,
}

impl TapPlan {
    /// Build the plan for ascending `kernel_sizes`.
    pub(crate) fn new(kernel_sizes: &[usize]) -> TapPlan {
        assert!(!kernel_sizes.is_empty());
        assert!(
            kernel_sizes.windows(2).all(|w| w[0] <= w[1]),
            "kernel sizes must be ascending for shared-tap layout"
        );
        let mut offsets: Vec<(isize, isize)> = Vec::new();
        let mut group_end = Vec::with_capacity(kernel_sizes.len());
        for &k in kernel_sizes {
            let pb = ((k - 1) / 2) as isize;
            let pa = (k - 1) as isize - pb;
            for dy in -pb..=pa {
                for dx in -pb..=pa {
                    if !offsets.contains(&(dy, dx)) {
                        offsets.push((dy, dx));
                    }
                }
            }
            group_end.push(offsets.len());
        }
        let pad_before = offsets.iter().map(|&(dy, dx)| (-dy).max(-dx).max(0)).max().unwrap() as usize;
        let pad_after = offsets.iter().map(|&(dy, dx)| dy.max(dx).max(0)).max().unwrap() as usize;
        TapPlan { offsets, group_end, pad_before, pad_after }
    }

    fn taps(&self) -> usize {
        self.offsets.len()
    }

    /// Index of offset (dy, dx) in the tap order.
    fn tap_index(&self, dy: isize, dx: isize) -> usize {
        self.offsets.iter().position(|&o| o == (dy, dx)).expect("offset outside tap plan")
    }

    /// Kernel group owning tap `t` (the smallest kernel covering it).
    fn tap_group(&self, t: usize) -> usize {
        self.group_end.iter().position(|&end| t < end).expect("tap outside all groups")
    }

    fn is_unpadded(&self) -> bool {
        self.pad_before == 0 && self.pad_after == 0
    }

    fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h + self.pad_before + self.pad_after, w + self.pad_before + self.pad_after)
    }
}

/// One aggregated layer lowered to its shift-GEMM form.
struct FusedLayer<F> {
    plan: TapPlan,
    /// Per-tap weight slices, `(taps, c_in, c_out)`; entries outside a
    /// tap's group block are zero and are never read.
    wtaps: Array3<F>,
    /// All branch biases concatenated, length `c_out`.
    bias: Array1<F>,
    /// Output-channel offset of each branch (cumulative channel counts,
    /// length `branches + 1`).
    ch_off: Vec<usize>,
}

impl<F: NdFloat> FusedLayer<F> {
    fn new(layer: &AggLayer<F>, c_in: usize) -> FusedLayer<F> {
        let plan = TapPlan::new(&layer.kernel_sizes());
        let mut ch_off = vec![0usize];
        for conv in &layer.branches {
            ch_off.push(ch_off.last().unwrap() + conv.out_channels());
        }
        let c_out = *ch_off.last().unwrap();
        let mut wtaps = Array3::zeros((plan.taps(), c_in, c_out));
        let mut bias = Array1::zeros(c_out);
        for (j, conv) in layer.branches.iter().enumerate() {
            let (oc, kh, kw, ic) = conv.weight.dim();
            assert_eq!(ic, c_in, "branch input channels disagree with layer input");
            let pb = ((kh - 1) / 2) as isize;
            for ky in 0..kh {
                for kx in 0..kw {
                    let t = plan.tap_index(ky as isize - pb, kx as isize - pb);
                    for c in 0..ic {
                        for o in 0..oc {
                            wtaps[(t, c, ch_off[j] + o)] = conv.weight[(o, ky, kx, c)];
                        }
                    }
                }
            }
            bias.slice_mut(s![ch_off[j]..ch_off[j] + oc]).assign(&conv.bias);
        }
        FusedLayer { plan, wtaps, bias, ch_off }
    }

    fn c_out(&self) -> usize {
        *self.ch_off.last().unwrap()
    }

    /// Output-channel range tap `t` feeds: every branch whose kernel
    /// covers it, i.e. groups `tap_group(t)..`.
    fn tap_cols(&self, t: usize) -> std::ops::Range<usize> {
        self.ch_off[self.plan.tap_group(t)]..self.c_out()
    }
}

/// Per-branch parameter gradients of one aggregated layer.
#[derive(Clone, Debug)]
pub(crate) struct AggGrads<F> {
    /// One `(oc, kh, kw, ic)` tensor per branch.
    pub dw: Vec<Array4<F>>,
    /// One bias gradient per branch.
    pub db: Vec<Array1<F>>,
}

impl<F: NdFloat> AggGrads<F> {
    pub(crate) fn zeros_like(layer: &AggLayer<F>) -> AggGrads<F> {
        AggGrads {
            dw: layer.branches.iter().map(|c| Array4::zeros(c.weight.dim())).collect(),
            db: layer.branches.iter().map(|c| Array1::zeros(c.bias.len())).collect(),
        }
    }
}

/// One image chunk flattened onto its zero-padded grid: `(n*ph*pw, c)`
/// rows, zero everywhere but the interior. Unpadded plans borrow the
/// compact input directly (`ph == h`, `pw == w`).
struct PaddedGrid<'a, F> {
    rows: CowArray<'a, F, Ix2>,
    n: usize,
    ph: usize,
    pw: usize,
}

impl<'a, F: NdFloat> PaddedGrid<'a, F> {
    fn from_interior(interior: ArrayView4<'a, F>, plan: &TapPlan) -> PaddedGrid<'a, F> {
        let (n, h, w, c) = interior.dim();
        let (ph, pw) = plan.padded_dims(h, w);
        let compact =
            interior.into_shape_with_order((n * h * w, c)).expect("chunk is contiguous");
        let rows = if plan.is_unpadded() {
            CowArray::from(compact)
        } else {
            let mut padded = Array2::zeros((n * ph * pw, c));
            pad_rows(compact, padded.view_mut(), n, h, w, plan);
            CowArray::from(padded)
        };
        PaddedGrid { rows, n, ph, pw }
    }

    fn zeros(n: usize, h: usize, w: usize, c: usize, plan: &TapPlan) -> Array2<F> {
        let (ph, pw) = plan.padded_dims(h, w);
        Array2::zeros((n * ph * pw, c))
    }

    /// GEMM operand row ranges for tap offset `(dy, dx)`: the
    /// contiguous destination span and the source span shifted by
    /// `dy*pw + dx`. Shifts past an edge stay inside padding rows.
    fn tap_spans(&self, dy: isize, dx: isize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let delta = dy * self.pw as isize + dx;
        let total = self.n * self.ph * self.pw;
        let lo = (-delta).max(0) as usize;
        let hi = total - delta.max(0) as usize;
        (lo..hi, (lo as isize + delta) as usize..(hi as isize + delta) as usize)
    }
}

/// Copy compact `(n*h*w, c)` rows into the interior of a padded grid.
fn pad_rows<F: NdFloat>(
    compact: ArrayView2<F>,
    mut padded: ArrayViewMut2<F>,
    n: usize,
    h: usize,
    w: usize,
    plan: &TapPlan,
) {
    let (pb, _) = (plan.pad_before, plan.pad_after);
    let (ph, pw) = plan.padded_dims(h, w);
    let c = compact.dim().1;
    let src = compact.to_slice().expect("compact rows are contiguous");
    let dst = padded.as_slice_mut().expect("padded grid is contiguous");
    for b in 0..n {
        for y in 0..h {
            let s0 = (b * h + y) * w * c;
            let d0 = ((b * ph + pb + y) * pw + pb) * c;
            dst[d0..d0 + w * c].copy_from_slice(&src[s0..s0 + w * c]);
        }
    }
}

/// Copy the interior of a padded grid back into compact rows.
fn extract_rows<F: NdFloat>(
    padded: ArrayView2<F>,
    mut compact: ArrayViewMut2<F>,
    n: usize,
    h: usize,
    w: usize,
    plan: &TapPlan,
) {
    let pb = plan.pad_before;
    let (ph, pw) = plan.padded_dims(h, w);
    let c = padded.dim().1;
    let src = padded.to_slice().expect("padded grid is contiguous");
    let dst = compact.as_slice_mut().expect("compact rows are contiguous");
    for b in 0..n {
        for y in 0..h {
            let s0 = ((b * ph + pb + y) * pw + pb) * c;
            let d0 = (b * h + y) * w * c;
            dst[d0..d0 + w * c].copy_from_slice(&src[s0..s0 + w * c]);
        }
    }
}

/// Forward pass of one aggregated layer over a full batch.
pub(crate) fn forward_agg<F: NdFloat>(input: ArrayView4<F>, layer: &AggLayer<F>) -> Array4<F> {
    let input = as_standard(input);
    let (n, h, w, c_in) = input.dim();
    let fused = FusedLayer::new(layer, c_in);
    let mut out = Array4::zeros((n, h, w, fused.c_out()));

    let tasks: Vec<(ArrayView4<F>, ArrayViewMut4<F>)> = input
        .axis_chunks_iter(Axis(0), CHUNK_IMAGES)
        .zip(out.axis_chunks_iter_mut(Axis(0), CHUNK_IMAGES))
        .collect();
    parallel::map_ordered(tasks, |_, (in_chunk, out_chunk)| {
        chunk_forward(in_chunk, out_chunk, &fused, layer.activation);
    });
    out
}

/// Backward pass of one aggregated layer over a full batch.
///
/// `output` is the cached post-activation output of the forward pass
/// (used as the ReLU mask); `grad_out` is the loss gradient w.r.t. that
/// output. Either result can be skipped: frozen layers skip `need_dw`,
/// first layers skip `need_dx`.
pub(crate) fn backward_agg<F: NdFloat>(
    input: ArrayView4<F>,
    output: ArrayView4<F>,
    grad_out: ArrayView4<F>,
    layer: &AggLayer<F>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<F>>, Option<AggGrads<F>>) {
    debug_assert!(need_dx || need_dw);
    let input = as_standard(input);
    let output = as_standard(output);
    let grad_out = as_standard(grad_out);
    let (n, h, w, c_in) = input.dim();
    let fused = FusedLayer::new(layer, c_in);

    let mut dx = need_dx.then(|| Array4::zeros((n, h, w, c_in)));
    let in_chunks: Vec<ArrayView4<F>> =
        input.axis_chunks_iter(Axis(0), CHUNK_IMAGES).collect();
    let out_chunks: Vec<ArrayView4<F>> =
        output.axis_chunks_iter(Axis(0), CHUNK_IMAGES).collect();
    let go_chunks: Vec<ArrayView4<F>> =
        grad_out.axis_chunks_iter(Axis(0), CHUNK_IMAGES).collect();
    let mut dx_chunks: Vec<Option<ArrayViewMut4<F>>> = match &mut dx {
        Some(dx) => dx.axis_chunks_iter_mut(Axis(0), CHUNK_IMAGES).map(Some).collect(),
        None => (0..in_chunks.len()).map(|_| None).collect(),
    };

    let tasks: Vec<_> = in_chunks
        .into_iter()
        .zip(out_chunks)
        .zip(go_chunks)
        .zip(dx_chunks.drain(..))
        .map(|(((i, o), g), d)| (i, o, g, d))
        .collect();
    let partials = parallel::map_ordered(tasks, |_, (in_c, out_c, go_c, dx_c)| {
        chunk_backward(in_c, out_c, go_c, dx_c, &fused, layer.activation, need_dw)
    });

    let grads = need_dw.then(|| {
        let mut dwtaps = Array3::<F>::zeros((fused.plan.taps(), c_in, fused.c_out()));
        let mut db = Array1::<F>::zeros(fused.c_out());
        for part in partials.into_iter().flatten() {
            dwtaps += &part.0;
            db += &part.1;
        }
        split_tap_grads(&dwtaps, &db, layer, &fused)
    });
    (dx, grads)
}

/// Borrow `view` if it is already row-major, else copy it into a
/// row-major array. (`to_owned` is not enough: it keeps the source's
/// memory order, and e.g. `concatenate` can hand us column-major data.)
fn as_standard<F: NdFloat>(view: ArrayView4<'_, F>) -> CowArray<'_, F, Ix4> {
    if view.is_standard_layout() {
        CowArray::from(view)
    } else {
        let mut owned = Array4::zeros(view.raw_dim());
        owned.assign(&view);
        CowArray::from(owned)
    }
}

/// Scatter per-tap weight gradients back into per-branch tensors.
fn split_tap_grads<F: NdFloat>(
    dwtaps: &Array3<F>,
    db: &Array1<F>,
    layer: &AggLayer<F>,
    fused: &FusedLayer<F>,
) -> AggGrads<F> {
    let mut grads = AggGrads::zeros_like(layer);
    for (j, conv) in layer.branches.iter().enumerate() {
        let (oc, kh, kw, ic) = conv.weight.dim();
        let pb = ((kh - 1) / 2) as isize;
        for ky in 0..kh {
            for kx in 0..kw {
                let t = fused.plan.tap_index(ky as isize - pb, kx as isize - pb);
                for c in 0..ic {
                    for o in 0..oc {
                        grads.dw[j][(o, ky, kx, c)] = dwtaps[(t, c, fused.ch_off[j] + o)];
                    }
                }
            }
        }
        grads.db[j].assign(&db.slice(s![fused.ch_off[j]..fused.ch_off[j] + oc]));
    }
    grads
}

fn chunk_forward<F: NdFloat>(
    input: ArrayView4<F>,
    out: ArrayViewMut4<F>,
    fused: &FusedLayer<F>,
    activation: Activation,
) {
    let (n, h, w, _) = input.dim();
    let rows = n * h * w;
    let c_out = fused.c_out();
    let mut out2 =
        out.into_shape_with_order((rows, c_out)).expect("output chunk is contiguous");

    let grid = PaddedGrid::from_interior(input, &fused.plan);
    // Accumulate on the padded grid (or, unpadded, straight into the
    // zeroed output chunk).
    let mut acc =
        (!fused.plan.is_unpadded()).then(|| PaddedGrid::<F>::zeros(n, h, w, c_out, &fused.plan));
    for (t, &(dy, dx)) in fused.plan.offsets.iter().enumerate() {
        let (dst, src) = grid.tap_spans(dy, dx);
        let nr = fused.tap_cols(t);
        let a = grid.rows.slice(s![src, ..]);
        let b = fused.wtaps.slice(s![t, .., nr.clone()]);
        match &mut acc {
            Some(acc) => {
                general_mat_mul(F::one(), &a, &b, F::one(), &mut acc.slice_mut(s![dst, nr]))
            }
            None => general_mat_mul(F::one(), &a, &b, F::one(), &mut out2.slice_mut(s![dst, nr])),
        }
    }
    if let Some(acc) = &acc {
        extract_rows(acc.view(), out2.view_mut(), n, h, w, &fused.plan);
    }

    out2 += &fused.bias;
    if activation == Activation::Relu {
        out2.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
    }
}

fn chunk_backward<F: NdFloat>(
    input: ArrayView4<F>,
    output: ArrayView4<F>,
    grad_out: ArrayView4<F>,
    dx: Option<ArrayViewMut4<F>>,
    fused: &FusedLayer<F>,
    activation: Activation,
    need_dw: bool,
) -> Option<(Array3<F>, Array1<F>)> {
    let (n, h, w, c_in) = input.dim();
    let rows = n * h * w;
    let c_out = fused.c_out();
    let plan = &fused.plan;

    // Gradient w.r.t. the pre-activation output, masked and compact.
    let go2 = grad_out.into_shape_with_order((rows, c_out)).expect("grad chunk is contiguous");
    let dz_compact: CowArray<'_, F, Ix2> = match activation {
        Activation::Linear => CowArray::from(go2),
        Activation::Relu => {
            let out2 =
                output.into_shape_with_order((rows, c_out)).expect("output chunk is contiguous");
            let mut dz = go2.to_owned();
            dz.zip_mut_with(&out2, |g, &o| {
                if o <= F::zero() {
                    *g = F::zero();
                }
            });
            CowArray::from(dz)
        }
    };
    // The same gradient on the padded grid; zero padding rows mean the
    // shifted GEMMs below neither read nor write anything real there.
    let dz: CowArray<'_, F, Ix2> = if plan.is_unpadded() {
        dz_compact
    } else {
        let mut padded = PaddedGrid::<F>::zeros(n, h, w, c_out, plan);
        pad_rows(dz_compact.view(), padded.view_mut(), n, h, w, plan);
        CowArray::from(padded)
    };

    let grid = PaddedGrid::from_interior(input, plan);
    let result = if need_dw {
        let mut dwtaps = Array3::<F>::zeros((plan.taps(), c_in, c_out));
        for (t, &(dy, dx_off)) in plan.offsets.iter().enumerate() {
            let (dst, src) = grid.tap_spans(dy, dx_off);
            let nr = fused.tap_cols(t);
            general_mat_mul(
                F::one(),
                &grid.rows.slice(s![src, ..]).t(),
                &dz.slice(s![dst, nr.clone()]),
                F::one(),
                &mut dwtaps.slice_mut(s![t, .., nr]),
            );
        }
        let db = dz.sum_axis(Axis(0));
        Some((dwtaps, db))
    } else {
        None
    };

    if let Some(dx) = dx {
        let mut dx2 =
            dx.into_shape_with_order((rows, c_in)).expect("dx chunk is contiguous");
        let mut dxp =
            (!plan.is_unpadded()).then(|| PaddedGrid::<F>::zeros(n, h, w, c_in, plan));
        for (t, &(dy, dx_off)) in plan.offsets.iter().enumerate() {
            let (dst, src) = grid.tap_spans(dy, dx_off);
            let nr = fused.tap_cols(t);
            let a = dz.slice(s![dst, nr.clone()]);
            let b = fused.wtaps.slice(s![t, .., nr]);
            match &mut dxp {
                Some(dxp) => {
                    general_mat_mul(F::one(), &a, &b.t(), F::one(), &mut dxp.slice_mut(s![src, ..]))
                }
                None => {
                    general_mat_mul(F::one(), &a, &b.t(), F::one(), &mut dx2.slice_mut(s![src, ..]))
                }
            }
        }
        if let Some(dxp) = &dxp {
            extract_rows(dxp.view(), dx2.view_mut(), n, h, w, plan);
        }
    }
    result
}
