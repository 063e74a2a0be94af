//! Dilated, grouped 2-D convolution.

use rayon::prelude::*;

use super::gemm::{gemm, MatRef};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Output columns handled per patch-matrix chunk.
const CHUNK_COLS: usize = 1024;

/// Static description of a square convolution.
///
/// Padding is implied: `dilation * (kernel - 1) / 2` on every side, which keeps
/// stride-1 resolution and halves even extents at stride 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Dense, undilated, stride-1 convolution without bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(self, stride: usize) -> Self {
        ConvSpec { stride, ..self }
    }

    pub fn dilation(self, dilation: usize) -> Self {
        ConvSpec { dilation, ..self }
    }

    pub fn groups(self, groups: usize) -> Self {
        ConvSpec { groups, ..self }
    }

    pub fn with_bias(self, bias: bool) -> Self {
        ConvSpec { bias, ..self }
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    /// Extent covered by one kernel application.
    pub fn effective_kernel(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Weight tensor shape `(out, in/groups, k, k)`.
    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_per_group(), self.kernel, self.kernel)
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let span = input + 2 * self.padding();
        let reach = self.effective_kernel();
        if span < reach {
            return Err(Error::shape(format!(
                "input extent {input} too small for kernel reach {reach}"
            )));
        }
        Ok((span - reach) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        Ok(Shape::new(
            input.n,
            self.out_channels,
            self.output_extent(input.h)?,
            self.output_extent(input.w)?,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::spec("channel counts must be >= 1"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::spec(format!("kernel {} must be odd", self.kernel)));
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::spec("stride and dilation must be >= 1"));
        }
        if self.groups == 0
            || !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::spec(format!(
                "groups {} must divide in {} and out {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Multiply-accumulates for one image of the given input size.
    pub fn macs(&self, input_h: usize, input_w: usize) -> Result<u64> {
        let oh = self.output_extent(input_h)? as u64;
        let ow = self.output_extent(input_w)? as u64;
        Ok(oh * ow * self.out_channels as u64 * (self.in_per_group() * self.kernel * self.kernel) as u64)
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().numel()
    }
}

fn check_operands<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Shape> {
    spec.validate()?;
    let s = input.shape();
    if s.c != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, conv expects {}",
            s.c, spec.in_channels
        )));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "weights {} do not match expected {}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    match bias {
        Some(b) if b.len() != spec.out_channels => {
            return Err(Error::shape(format!(
                "bias length {} != out channels {}",
                b.len(),
                spec.out_channels
            )))
        }
        None if spec.bias => return Err(Error::shape("conv spec requires a bias")),
        _ => {}
    }
    spec.output_shape(s)
}

/// Reference convolution: a plain loop nest with a fixed accumulation order
/// over (input channel, kernel row, kernel column). Slow; used as the oracle
/// for [`conv2d_fast`].
pub fn conv2d_direct<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_shape = check_operands(input, weights, bias, spec)?;
    let ins = input.shape();
    let pad = spec.padding() as isize;
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let mut out = Tensor::zeroed_unchecked(out_shape);
    for n in 0..ins.n {
        for oc in 0..spec.out_channels {
            let g = oc / cout_g;
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let mut acc = T::zero();
                    for ic in 0..cin_g {
                        for ky in 0..spec.kernel {
                            let iy = (oy * spec.stride) as isize - pad + (ky * spec.dilation) as isize;
                            if iy < 0 || iy >= ins.h as isize {
                                continue;
                            }
                            for kx in 0..spec.kernel {
                                let ix = (ox * spec.stride) as isize - pad + (kx * spec.dilation) as isize;
                                if ix < 0 || ix >= ins.w as isize {
                                    continue;
                                }
                                acc = acc
                                    + weights.get(oc, ic, ky, kx)
                                        * input.get(n, g * cin_g + ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc = acc + b[oc];
                    }
                    out.set(n, oc, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Convolution by patch gathering plus matrix multiply, one group at a time.
///
/// Work is split over (image, group, column chunk); each output element is
/// produced by exactly one task, so results do not depend on the thread count.
/// Groups never interact, so convolving a channel slice with the matching
/// slice of weights reproduces that slice of the full result bit for bit.
pub fn conv2d_fast<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_shape = check_operands(input, weights, bias, spec)?;
    let ins = input.shape();
    let cols = out_shape.plane();
    let chunks = cols.div_ceil(CHUNK_COLS);
    let tasks: Vec<(usize, usize, usize)> = (0..ins.n)
        .flat_map(|n| (0..spec.groups).flat_map(move |g| (0..chunks).map(move |c| (n, g, c))))
        .collect();

    let cout_g = spec.out_per_group();
    let k = spec.in_per_group() * spec.kernel * spec.kernel;
    let pointwise = spec.kernel == 1 && spec.stride == 1;

    let results: Vec<Vec<T>> = tasks
        .par_iter()
        .map(|&(n, g, chunk)| {
            let c0 = chunk * CHUNK_COLS;
            let nc = CHUNK_COLS.min(cols - c0);
            let a = MatRef {
                data: &weights.data()[g * cout_g * k..(g + 1) * cout_g * k],
                rows: cout_g,
                cols: k,
                ld: k,
            };
            let mut block = vec![T::zero(); cout_g * nc];
            if pointwise {
                let start = input.offset(n, g * spec.in_per_group(), 0, 0) + c0;
                let b = MatRef {
                    data: &input.data()[start..],
                    rows: k,
                    cols: nc,
                    ld: ins.plane(),
                };
                gemm(a, b, &mut block, nc);
            } else {
                let patches = gather_patches(input, spec, n, g, c0, nc, out_shape.w);
                let b = MatRef {
                    data: &patches,
                    rows: k,
                    cols: nc,
                    ld: nc,
                };
                gemm(a, b, &mut block, nc);
            }
            if let Some(bias) = bias {
                for (r, row) in block.chunks_mut(nc).enumerate() {
                    let bv = bias[g * cout_g + r];
                    row.iter_mut().for_each(|x| *x = *x + bv);
                }
            }
            block
        })
        .collect();

    let mut out = Tensor::zeroed_unchecked(out_shape);
    for (&(n, g, chunk), block) in tasks.iter().zip(results) {
        let c0 = chunk * CHUNK_COLS;
        let nc = CHUNK_COLS.min(cols - c0);
        for (r, row) in block.chunks(nc).enumerate() {
            let plane = out.plane_mut(n, g * cout_g + r);
            plane[c0..c0 + nc].copy_from_slice(row);
        }
    }
    Ok(out)
}

/// Patch matrix (rows: in-channel x ky x kx of group `g`; columns: output
/// positions `[c0, c0+nc)`), zero where the tap falls into padding.
fn gather_patches<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    n: usize,
    g: usize,
    c0: usize,
    nc: usize,
    out_w: usize,
) -> Vec<T> {
    let ins = input.shape();
    let (h, w) = (ins.h as isize, ins.w as isize);
    let pad = spec.padding() as isize;
    let kk = spec.kernel;
    let mut buf = vec![T::zero(); spec.in_per_group() * kk * kk * nc];
    let mut row = 0;
    for ic in 0..spec.in_per_group() {
        let plane = input.plane(n, g * spec.in_per_group() + ic);
        for ky in 0..kk {
            for kx in 0..kk {
                let dst = &mut buf[row * nc..(row + 1) * nc];
                let dy = (ky * spec.dilation) as isize - pad;
                let dx = (kx * spec.dilation) as isize - pad;
                let (mut oy, mut ox) = (c0 / out_w, c0 % out_w);
                for slot in dst.iter_mut() {
                    let iy = (oy * spec.stride) as isize + dy;
                    let ix = (ox * spec.stride) as isize + dx;
                    if iy >= 0 && iy < h && ix >= 0 && ix < w {
                        *slot = plane[(iy * w + ix) as usize];
                    }
                    ox += 1;
                    if ox == out_w {
                        ox = 0;
                        oy += 1;
                    }
                }
                row += 1;
            }
        }
    }
    buf
}

/// Grouped 3x3 convolution whose groups are split into contiguous branches,
/// each with its own dilation rate.
///
/// `spec` describes the whole layer (`groups` counts groups over all
/// branches, `dilation` is ignored). Branch `i` sees channels
/// `[i*c/b, (i+1)*c/b)` and runs `groups/b` groups at `dilations[i]`; branch
/// outputs are concatenated in order. All branches share the stride.
pub fn multi_dilation_group_conv<T: Scalar>(
    input: &Tensor<T>,
    branch_weights: &[&Tensor<T>],
    branch_bias: Option<&[&[T]]>,
    dilations: &[usize],
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let branches = branch_specs(spec, dilations)?;
    if branch_weights.len() != branches.len() {
        return Err(Error::shape(format!(
            "{} branch weights for {} dilations",
            branch_weights.len(),
            branches.len()
        )));
    }
    if let Some(bb) = branch_bias {
        if bb.len() != branches.len() {
            return Err(Error::shape("one bias per branch required"));
        }
    }
    if input.shape().c != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, layer expects {}",
            input.shape().c,
            spec.in_channels
        )));
    }
    let bias_at = |i: usize| branch_bias.map(|bb| bb[i]);
    if branches.len() == 1 {
        return conv2d_fast(input, branch_weights[0], bias_at(0), &branches[0]);
    }
    let step = spec.in_channels / branches.len();
    let outputs = branches
        .iter()
        .enumerate()
        .map(|(i, bspec)| {
            let part = input.slice_channels(i * step, (i + 1) * step)?;
            conv2d_fast(&part, branch_weights[i], bias_at(i), bspec)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = outputs.iter().collect();
    Tensor::concat_channels(&refs)
}

/// Per-branch conv specs for a multi-dilation layer.
pub fn branch_specs(spec: &ConvSpec, dilations: &[usize]) -> Result<Vec<ConvSpec>> {
    spec.validate()?;
    let b = dilations.len();
    if b == 0 {
        return Err(Error::spec("at least one dilation branch required"));
    }
    if dilations.contains(&0) {
        return Err(Error::spec("dilation rates must be >= 1"));
    }
    if !spec.groups.is_multiple_of(b) || !spec.in_channels.is_multiple_of(b) || !spec.out_channels.is_multiple_of(b) {
        return Err(Error::spec(format!(
            "{b} branches cannot evenly split {} groups over {}->{} channels",
            spec.groups, spec.in_channels, spec.out_channels
        )));
    }
    Ok(dilations
        .iter()
        .map(|&d| ConvSpec {
            in_channels: spec.in_channels / b,
            out_channels: spec.out_channels / b,
            groups: spec.groups / b,
            dilation: d,
            ..*spec
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: impl Into<Shape>, rng: &mut ChaCha8Rng, range: f32) -> Tensor<f32> {
        let shape = shape.into();
        let data = (0..shape.numel()).map(|_| rng.random_range(-range..range)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Independent scalar oracle: walks every output element and every tap,
    /// with padding handled by bounds checks on the padded coordinate.
    fn triple_loop_oracle(
        x: &Tensor<f32>,
        wts: &Tensor<f32>,
        bias: Option<&[f32]>,
        cin: usize,
        cout: usize,
        k: usize,
        s: usize,
        r: usize,
        groups: usize,
    ) -> Tensor<f32> {
        let xs = x.shape();
        let pad = r * (k - 1) / 2;
        let oh = (xs.h + 2 * pad - r * (k - 1) - 1) / s + 1;
        let ow = (xs.w + 2 * pad - r * (k - 1) - 1) / s + 1;
        let mut out = vec![0f64; xs.n * cout * oh * ow];
        let (ig, og) = (cin / groups, cout / groups);
        for n in 0..xs.n {
            for o in 0..cout {
                for y in 0..oh {
                    for xq in 0..ow {
                        let mut sum = bias.map_or(0.0, |b| b[o] as f64);
                        for t in 0..ig * k * k {
                            let (ci, ky, kx) = (t / (k * k), (t / k) % k, t % k);
                            let py = y * s + ky * r;
                            let px = xq * s + kx * r;
                            if py < pad || px < pad || py - pad >= xs.h || px - pad >= xs.w {
                                continue;
                            }
                            let c = (o / og) * ig + ci;
                            sum += wts.get(o, ci, ky, kx) as f64 * x.get(n, c, py - pad, px - pad) as f64;
                        }
                        out[((n * cout + o) * oh + y) * ow + xq] = sum;
                    }
                }
            }
        }
        Tensor::from_vec([xs.n, cout, oh, ow], out.into_iter().map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn identity_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 4, 5, 3], &mut rng, 3.0);
        let mut w = Tensor::zeros([4, 4, 1, 1]).unwrap();
        for c in 0..4 {
            w.set(c, c, 0, 0, 1.0);
        }
        let spec = ConvSpec::new(4, 4, 1);
        assert_eq!(conv2d_direct(&x, &w, None, &spec).unwrap(), x);
        assert_eq!(conv2d_fast(&x, &w, None, &spec).unwrap(), x);
    }

    #[test]
    fn dilation_two_impulse_footprint() {
        let mut x = Tensor::zeros([1, 1, 9, 9]).unwrap();
        x.set(0, 0, 4, 4, 1.0f32);
        let w = Tensor::full([1, 1, 3, 3], 1.0).unwrap();
        let spec = ConvSpec::new(1, 1, 3).dilation(2);
        for out in [
            conv2d_direct(&x, &w, None, &spec).unwrap(),
            conv2d_fast(&x, &w, None, &spec).unwrap(),
        ] {
            assert_eq!(out.shape(), Shape::new(1, 1, 9, 9));
            for y in 0..9 {
                for xq in 0..9 {
                    let on_grid = [2, 4, 6].contains(&y) && [2, 4, 6].contains(&xq);
                    assert_eq!(out.get(0, 0, y, xq) != 0.0, on_grid, "({y},{xq})");
                }
            }
        }
    }

    #[test]
    fn direct_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ConvSpec::new(8, 8, 3).dilation(4).groups(2).with_bias(true);
        let x = random([1, 8, 16, 16], &mut rng, 10.0);
        let w = random(spec.weight_shape(), &mut rng, 1.0);
        let b: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = conv2d_direct(&x, &w, Some(&b), &spec).unwrap();
        let want = triple_loop_oracle(&x, &w, Some(&b), 8, 8, 3, 1, 4, 2);
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-4);
        let fast = conv2d_fast(&x, &w, Some(&b), &spec).unwrap();
        assert!(fast.max_abs_diff(&want).unwrap() <= 1e-4);
    }

    #[test]
    fn output_extent_formula() {
        let s2 = ConvSpec::new(3, 32, 3).stride(2);
        assert_eq!(s2.output_extent(1024).unwrap(), 512);
        assert_eq!(s2.output_extent(5).unwrap(), 3);
        let d14 = ConvSpec::new(1, 1, 3).dilation(14);
        assert_eq!(d14.output_extent(64).unwrap(), 64);
        assert_eq!(d14.effective_kernel(), 29);
    }

    #[test]
    fn zero_weights_give_exact_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::new(4, 8, 3).stride(2).groups(2);
        let x = random([1, 4, 11, 7], &mut rng, 10.0);
        let w = Tensor::zeros(spec.weight_shape()).unwrap();
        let out = conv2d_fast(&x, &w, None, &spec).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_groups_and_shapes() {
        let x = Tensor::<f32>::zeros([1, 6, 4, 4]).unwrap();
        let w = Tensor::zeros([6, 1, 3, 3]).unwrap();
        let bad = ConvSpec::new(6, 6, 3).groups(4);
        assert!(matches!(conv2d_direct(&x, &w, None, &bad), Err(Error::Spec(_))));
        let spec = ConvSpec::new(6, 6, 3).groups(6);
        let wrong_w = Tensor::zeros([6, 2, 3, 3]).unwrap();
        assert!(matches!(conv2d_fast(&x, &wrong_w, None, &spec), Err(Error::Shape(_))));
        let wrong_x = Tensor::zeros([1, 5, 4, 4]).unwrap();
        assert!(matches!(conv2d_fast(&wrong_x, &w, None, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn single_branch_is_plain_group_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ConvSpec::new(32, 32, 3).groups(2);
        let x = random([1, 32, 10, 12], &mut rng, 5.0);
        let w = random(spec.weight_shape(), &mut rng, 1.0);
        let multi = multi_dilation_group_conv(&x, &[&w], None, &[3], &spec).unwrap();
        let plain = conv2d_fast(&x, &w, None, &spec.dilation(3)).unwrap();
        assert_eq!(multi, plain);
    }

    #[test]
    fn equal_dilation_branches_are_bit_identical_to_one_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let spec = ConvSpec::new(64, 64, 3).groups(4);
        let x = random([1, 64, 9, 13], &mut rng, 5.0);
        let w = random(spec.weight_shape(), &mut rng, 1.0);
        let halves = w.split_leading(2).unwrap();
        let multi = multi_dilation_group_conv(&x, &[&halves[0], &halves[1]], None, &[1, 1], &spec).unwrap();
        let single = conv2d_fast(&x, &w, None, &spec).unwrap();
        assert!(multi
            .data()
            .iter()
            .zip(single.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn two_dilations_match_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let spec = ConvSpec::new(32, 32, 3).groups(4);
        let x = random([1, 32, 20, 20], &mut rng, 5.0);
        let w = random(spec.weight_shape(), &mut rng, 1.0);
        let halves = w.split_leading(2).unwrap();
        let got = multi_dilation_group_conv(&x, &[&halves[0], &halves[1]], None, &[1, 4], &spec).unwrap();
        let lo = conv2d_direct(
            &x.slice_channels(0, 16).unwrap(),
            &halves[0],
            None,
            &ConvSpec::new(16, 16, 3).groups(2),
        )
        .unwrap();
        let hi = conv2d_direct(
            &x.slice_channels(16, 32).unwrap(),
            &halves[1],
            None,
            &ConvSpec::new(16, 16, 3).groups(2).dilation(4),
        )
        .unwrap();
        let want = Tensor::concat_channels(&[&lo, &hi]).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-4);
    }

    #[test]
    fn uneven_branch_split_rejected() {
        let spec = ConvSpec::new(48, 48, 3).groups(3);
        assert!(matches!(branch_specs(&spec, &[1, 2]), Err(Error::Spec(_))));
    }
}
