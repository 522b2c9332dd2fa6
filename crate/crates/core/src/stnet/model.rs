//! Two-branch estimator: an adjacent-frames branch over three groups of
//! consecutive difference frames and a segment branch over one frame per
//! group, merged by a convolution and read out per frame by a dense head.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{channel_affine, guarded_std, ChannelStats, NormOrder, NormParams};
use crate::scalar::Scalar;
use crate::stnet::layers::{
    apply_mask_inplace, attention_mask, attention_mask_backward, avg_pool2, avg_pool2_backward,
    conv3x3, conv3x3_backward, dropout_mask, shift_backward, shift_forward, tanh_backward_inplace,
    tanh_inplace,
};
use crate::stnet::tensor::Tensor4;
use crate::stnet::weights::{slot, NetworkWeights};

/// Number of adjacent-frame groups, and the length of the segment sequence.
pub const GROUPS: usize = 3;

const ADJACENT: usize = 0;
const SEGMENT: usize = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    #[default]
    Multi,
    /// Segment branch disabled; its half of the merge input is zero.
    Adjacent,
}

/// Runtime switches. None of them changes the set of weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub shift: bool,
    pub mask: bool,
    pub branches: BranchMode,
    pub norm_order: NormOrder,
    /// Run the adjacent groups and the segment branch on separate threads.
    pub parallel: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            shift: true,
            mask: true,
            branches: BranchMode::Multi,
            norm_order: NormOrder::AffineFirst,
            parallel: false,
        }
    }
}

/// One window: `n` raw difference frames (`n x 3 x S x S`), the statistics
/// they are normalized with, and the `1 x 3 x S x S` appearance frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput<T> {
    pub diffs: Tensor4<T>,
    pub stats: ChannelStats,
    pub appearance: Tensor4<T>,
}

impl<T: Scalar> NetInput<T> {
    pub fn new(diffs: Tensor4<T>, stats: ChannelStats, appearance: Tensor4<T>) -> Result<Self> {
        let [n, c, h, w] = diffs.dims();
        if c != 3 || h != w {
            return Err(Error::validation(format!(
                "diffs must be n x 3 x S x S, got {:?}",
                diffs.dims()
            )));
        }
        if appearance.dims() != [1, 3, h, w] {
            return Err(Error::validation(format!(
                "appearance must be 1 x 3 x {h} x {w}, got {:?}",
                appearance.dims()
            )));
        }
        if n < GROUPS {
            return Err(Error::validation(format!(
                "a window needs at least {GROUPS} difference frames"
            )));
        }
        if stats.mean.iter().chain(&stats.std).any(|v| !v.is_finite()) {
            return Err(Error::validation("normalization statistics must be finite"));
        }
        Ok(Self {
            diffs,
            stats,
            appearance,
        })
    }

    pub fn len(&self) -> usize {
        self.diffs.frames()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits `n` frames into [`GROUPS`] contiguous groups whose sizes differ by
/// at most one, larger groups first.
pub fn group_ranges(n: usize) -> Vec<Range<usize>> {
    let (base, extra) = (n / GROUPS, n % GROUPS);
    let mut start = 0;
    (0..GROUPS)
        .map(|g| {
            let len = base + usize::from(g < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Frame picked from each group for the segment branch (the middle one).
pub fn segment_frames(n: usize) -> Vec<usize> {
    group_ranges(n)
        .into_iter()
        .map(|r| r.start + r.len() / 2)
        .collect()
}

#[derive(Debug, Clone)]
struct BranchMasks<T> {
    /// Appearance at full and at pooled resolution.
    features: [Tensor4<T>; 2],
    masks: Option<[Tensor4<T>; 2]>,
}

#[derive(Debug, Clone)]
struct BranchCache<T> {
    xs: Tensor4<T>,
    a1: Tensor4<T>,
    a1s: Tensor4<T>,
    t2: Tensor4<T>,
    a2: Tensor4<T>,
    k1: Option<Vec<T>>,
    d1s: Tensor4<T>,
    t3: Tensor4<T>,
    a3s: Tensor4<T>,
    a4: Tensor4<T>,
    k2: Option<Vec<T>>,
}

struct BranchGrads<T> {
    conv_w: [Vec<T>; 4],
    conv_b: [Vec<T>; 4],
    mask: [Vec<T>; 2],
    input: Tensor4<T>,
}

struct Ctx<'a, T> {
    w: &'a NetworkWeights<T>,
    opts: &'a ModelOptions,
}

fn multiply_by_mask<T: Scalar>(x: &mut Tensor4<T>, mask: &Tensor4<T>) {
    let plane = mask.frame_len();
    for chunk in x.data_mut().chunks_mut(plane) {
        chunk
            .iter_mut()
            .zip(mask.data())
            .for_each(|(v, m)| *v *= *m);
    }
}

/// Sum over frames and channels of `g * x`, one value per pixel.
fn mask_gradient<T: Scalar>(g: &Tensor4<T>, x: &Tensor4<T>, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); plane];
    for (gc, xc) in g.data().chunks(plane).zip(x.data().chunks(plane)) {
        out.iter_mut()
            .zip(gc.iter().zip(xc))
            .for_each(|(o, (a, b))| *o += *a * *b);
    }
    out
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv_params(&self, branch: usize, layer: usize) -> (&[T], &[T]) {
        let base = branch * slot::BRANCH_LEN;
        (
            self.w.at(base + slot::CONV_W[layer]),
            self.w.at(base + slot::CONV_B[layer]),
        )
    }

    fn masks(&self, branch: usize, appearance: &Tensor4<T>) -> Result<BranchMasks<T>> {
        let pooled = avg_pool2(appearance);
        let masks = if self.opts.mask {
            let base = branch * slot::BRANCH_LEN;
            let m1 = attention_mask(
                appearance,
                self.w.at(base + slot::MASK_W[0]),
                self.w.at(base + slot::MASK_B[0])[0],
            )?;
            let m2 = attention_mask(
                &pooled,
                self.w.at(base + slot::MASK_W[1]),
                self.w.at(base + slot::MASK_B[1])[0],
            )?;
            Some([m1, m2])
        } else {
            None
        };
        Ok(BranchMasks {
            features: [appearance.clone(), pooled],
            masks,
        })
    }

    fn conv_tanh(&self, x: &Tensor4<T>, branch: usize, layer: usize) -> Tensor4<T> {
        let (w, b) = self.conv_params(branch, layer);
        let mut y = conv3x3(x, w, b, b.len());
        tanh_inplace(&mut y);
        y
    }

    fn branch_forward(
        &self,
        x: &Tensor4<T>,
        branch: usize,
        masks: &BranchMasks<T>,
        mut rng: Option<ChaCha8Rng>,
    ) -> (Tensor4<T>, BranchCache<T>) {
        let shift = self.opts.shift;
        let xs = shift_forward(x, shift);
        let a1 = self.conv_tanh(&xs, branch, 0);
        let a1s = shift_forward(&a1, shift);
        let t2 = self.conv_tanh(&a1s, branch, 1);
        let mut a2 = a1.clone();
        a2.add_assign(&t2);

        let mut g1 = a2.clone();
        if let Some([m1, _]) = &masks.masks {
            multiply_by_mask(&mut g1, m1);
        }
        let mut d1 = avg_pool2(&g1);
        let k1 = rng
            .as_mut()
            .and_then(|r| dropout_mask(d1.data().len(), self.w.drop1, r));
        apply_mask_inplace(&mut d1, k1.as_deref());

        let d1s = shift_forward(&d1, shift);
        let t3 = self.conv_tanh(&d1s, branch, 2);
        let mut a3 = d1;
        a3.add_assign(&t3);
        let a3s = shift_forward(&a3, shift);
        let a4 = self.conv_tanh(&a3s, branch, 3);

        let mut g2 = a4.clone();
        if let Some([_, m2]) = &masks.masks {
            multiply_by_mask(&mut g2, m2);
        }
        let mut out = avg_pool2(&g2);
        let k2 = rng
            .as_mut()
            .and_then(|r| dropout_mask(out.data().len(), self.w.drop2, r));
        apply_mask_inplace(&mut out, k2.as_deref());

        let cache = BranchCache {
            xs,
            a1,
            a1s,
            t2,
            a2,
            k1,
            d1s,
            t3,
            a3s,
            a4,
            k2,
        };
        (out, cache)
    }

    fn branch_backward(
        &self,
        c: &BranchCache<T>,
        branch: usize,
        masks: &BranchMasks<T>,
        g_out: &Tensor4<T>,
        need_input_grad: bool,
    ) -> BranchGrads<T> {
        let shift = self.opts.shift;
        let base = branch * slot::BRANCH_LEN;
        let mut conv_w: [Vec<T>; 4] =
            std::array::from_fn(|l| vec![T::zero(); self.w.at(base + slot::CONV_W[l]).len()]);
        let mut conv_b: [Vec<T>; 4] =
            std::array::from_fn(|l| vec![T::zero(); self.w.at(base + slot::CONV_B[l]).len()]);
        let mut mask = [Vec::new(), Vec::new()];

        let mut g = g_out.clone();
        apply_mask_inplace(&mut g, c.k2.as_deref());
        let mut g_a4 = avg_pool2_backward(&g, c.a4.dims());
        if let Some([_, m2]) = &masks.masks {
            mask[1] = mask_gradient(&g_a4, &c.a4, m2.frame_len());
            multiply_by_mask(&mut g_a4, m2);
        }
        tanh_backward_inplace(&mut g_a4, &c.a4);
        let (w4, _) = self.conv_params(branch, 3);
        let g_a3s = conv3x3_backward(&c.a3s, w4, &g_a4, &mut conv_w[3], &mut conv_b[3], true)
            .expect("input grad");
        let g_a3 = shift_backward(&g_a3s, shift);

        let mut g_t3 = g_a3.clone();
        tanh_backward_inplace(&mut g_t3, &c.t3);
        let (w3, _) = self.conv_params(branch, 2);
        let g_d1s = conv3x3_backward(&c.d1s, w3, &g_t3, &mut conv_w[2], &mut conv_b[2], true)
            .expect("input grad");
        let mut g_d1 = g_a3;
        g_d1.add_assign(&shift_backward(&g_d1s, shift));

        apply_mask_inplace(&mut g_d1, c.k1.as_deref());
        let mut g_a2 = avg_pool2_backward(&g_d1, c.a2.dims());
        if let Some([m1, _]) = &masks.masks {
            mask[0] = mask_gradient(&g_a2, &c.a2, m1.frame_len());
            multiply_by_mask(&mut g_a2, m1);
        }

        let mut g_t2 = g_a2.clone();
        tanh_backward_inplace(&mut g_t2, &c.t2);
        let (w2, _) = self.conv_params(branch, 1);
        let g_a1s = conv3x3_backward(&c.a1s, w2, &g_t2, &mut conv_w[1], &mut conv_b[1], true)
            .expect("input grad");
        let mut g_a1 = g_a2;
        g_a1.add_assign(&shift_backward(&g_a1s, shift));
        tanh_backward_inplace(&mut g_a1, &c.a1);
        let (w1, _) = self.conv_params(branch, 0);
        let input = match conv3x3_backward(
            &c.xs,
            w1,
            &g_a1,
            &mut conv_w[0],
            &mut conv_b[0],
            need_input_grad,
        ) {
            Some(g_xs) => shift_backward(&g_xs, shift),
            None => Tensor4::zeros([1, 1, 1, 1]),
        };
        BranchGrads {
            conv_w,
            conv_b,
            mask,
            input,
        }
    }
}

/// Runs the jobs in order, or concurrently when `parallel` is set. Results
/// come back in job order either way.
fn run_jobs<'a, R: Send>(jobs: Vec<Box<dyn FnOnce() -> R + Send + 'a>>, parallel: bool) -> Vec<R> {
    if !parallel || jobs.len() < 2 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs.into_iter().map(|j| s.spawn(j)).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("branch worker panicked"))
            .collect()
    })
}

fn job_rng(seed: Option<u64>, stream: u64) -> Option<ChaCha8Rng> {
    seed.map(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        rng.set_stream(stream);
        rng
    })
}

fn ensure_finite<T: Scalar>(layer: &str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::numeric(
            layer,
            format!("non-finite value at index {i}"),
        )),
        None => Ok(()),
    }
}

struct NormCoeffs {
    scale: [f64; 3],
    offset: [f64; 3],
    /// d scale / d beta; the offset derivative is `-mean` times this.
    dscale: [f64; 3],
    /// d offset / d gamma.
    doffset_gamma: f64,
}

fn norm_coeffs<T: Scalar>(
    w: &NetworkWeights<T>,
    stats: &ChannelStats,
    order: NormOrder,
) -> NormCoeffs {
    let beta: [f64; 3] = std::array::from_fn(|c| w.at(slot::BETA)[c].as_f64());
    let gamma: [f64; 3] = std::array::from_fn(|c| w.at(slot::GAMMA)[c].as_f64());
    let params = NormParams {
        beta,
        gamma,
        learnable: true,
    };
    let (scale, offset, _) = channel_affine(&params, stats, order);
    let dscale = std::array::from_fn(|c| match order {
        NormOrder::AffineFirst => {
            let (s, _) = guarded_std(beta[c].abs() * stats.std[c]);
            1.0 / s - beta[c] * beta[c].signum() * stats.std[c] / (s * s)
        }
        NormOrder::StandardizeFirst => 1.0 / guarded_std(stats.std[c]).0,
    });
    let doffset_gamma = match order {
        NormOrder::AffineFirst => 0.0,
        NormOrder::StandardizeFirst => 1.0,
    };
    NormCoeffs {
        scale,
        offset,
        dscale,
        doffset_gamma,
    }
}

struct ForwardState<T> {
    x: Tensor4<T>,
    masks: [BranchMasks<T>; 2],
    adjacent: Vec<BranchCache<T>>,
    segment: Option<BranchCache<T>>,
    branch_out_shape: [usize; 3],
    segment_out_shape: Option<[usize; 3]>,
    merge_in: Tensor4<T>,
    merge_out: Tensor4<T>,
    head_in: Vec<T>,
    hidden: Vec<T>,
    output: Vec<T>,
}

fn check_arch<T: Scalar>(input: &NetInput<T>, w: &NetworkWeights<T>) -> Result<()> {
    let s = w.arch.input_size;
    let [_, c, h, _] = input.diffs.dims();
    if c != 3 || h != s {
        return Err(Error::validation(format!(
            "input frames are {:?}, weights expect 3 x {s} x {s}",
            input.diffs.frame_shape()
        )));
    }
    Ok(())
}

fn forward_state<T: Scalar>(
    input: &NetInput<T>,
    w: &NetworkWeights<T>,
    opts: &ModelOptions,
    dropout_seed: Option<u64>,
) -> Result<ForwardState<T>> {
    check_arch(input, w)?;
    let ctx = Ctx { w, opts };
    let arch = w.arch;
    let n = input.len();

    let coeffs = norm_coeffs(w, &input.stats, opts.norm_order);
    let mut x = input.diffs.clone();
    let plane = arch.input_size * arch.input_size;
    for (i, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
        let c = i % 3;
        let (s, o) = (T::lit(coeffs.scale[c]), T::lit(coeffs.offset[c]));
        chunk.iter_mut().for_each(|v| *v = *v * s + o);
    }
    ensure_finite("normalization", x.data())?;

    let masks = [
        ctx.masks(ADJACENT, &input.appearance)?,
        ctx.masks(SEGMENT, &input.appearance)?,
    ];
    let groups = group_ranges(n);
    let multi = opts.branches == BranchMode::Multi;
    let seg_input = multi.then(|| {
        let frames: Vec<&[T]> = segment_frames(n).into_iter().map(|f| x.frame(f)).collect();
        Tensor4::stack(&frames, x.frame_shape())
    });

    let mut jobs: Vec<Box<dyn FnOnce() -> (Tensor4<T>, BranchCache<T>) + Send + '_>> = Vec::new();
    for (g, r) in groups.iter().enumerate() {
        let part = x.slice_frames(r.start, r.len());
        let (ctx, masks) = (&ctx, &masks[ADJACENT]);
        let rng = job_rng(dropout_seed, g as u64);
        jobs.push(Box::new(move || {
            ctx.branch_forward(&part, ADJACENT, masks, rng)
        }));
    }
    if let Some(seg) = seg_input {
        let (ctx, masks) = (&ctx, &masks[SEGMENT]);
        let rng = job_rng(dropout_seed, GROUPS as u64);
        jobs.push(Box::new(move || {
            ctx.branch_forward(&seg, SEGMENT, masks, rng)
        }));
    }
    let mut results = run_jobs(jobs, opts.parallel);
    let segment = if multi { results.pop() } else { None };
    for (out, _) in results.iter().chain(segment.iter()) {
        ensure_finite("branch output", out.data())?;
    }

    let (_, s4) = arch.pooled_sizes();
    let o = arch.out_channels;
    let branch_len = o * s4 * s4;
    let mut merge_in = Tensor4::zeros([n, 2 * o, s4, s4]);
    for (g, r) in groups.iter().enumerate() {
        let (adj_out, _) = &results[g];
        for (k, f) in r.clone().enumerate() {
            let dst = merge_in.frame_mut(f);
            dst[..branch_len].copy_from_slice(adj_out.frame(k));
            if let Some((seg_out, _)) = &segment {
                dst[branch_len..].copy_from_slice(seg_out.frame(g));
            }
        }
    }
    let mut merge_out = conv3x3(
        &merge_in,
        w.at(slot::MERGE_W),
        w.at(slot::MERGE_B),
        arch.merge_channels,
    );
    tanh_inplace(&mut merge_out);
    ensure_finite("merge", merge_out.data())?;

    let feat = arch.head_inputs();
    let head_in = if arch.pool_head {
        merge_out
            .data()
            .chunks(s4 * s4)
            .map(|m| m.iter().copied().sum::<T>() / T::from_usize_(s4 * s4))
            .collect()
    } else {
        merge_out.data().to_vec()
    };
    let hid = arch.hidden;
    let mut hidden = vec![T::zero(); n * hid];
    for row in hidden.chunks_mut(hid) {
        row.copy_from_slice(w.at(slot::FC1_B));
    }
    T::gemm(
        n,
        feat,
        hid,
        T::one(),
        &head_in,
        (feat as isize, 1),
        w.at(slot::FC1_W),
        (1, feat as isize),
        T::one(),
        &mut hidden,
        (hid as isize, 1),
    );
    hidden.iter_mut().for_each(|v| *v = v.tanh());
    let w2 = w.at(slot::FC2_W);
    let b2 = w.at(slot::FC2_B)[0];
    let output: Vec<T> = hidden
        .chunks(hid)
        .map(|h| h.iter().zip(w2).fold(b2, |acc, (a, b)| acc + *a * *b))
        .collect();
    ensure_finite("head", &output)?;

    let branch_out_shape = results[0].0.frame_shape();
    let segment_out_shape = segment.as_ref().map(|(out, _)| out.frame_shape());
    let (adjacent, segment) = (
        results.into_iter().map(|(_, c)| c).collect(),
        segment.map(|(_, c)| c),
    );
    Ok(ForwardState {
        x,
        masks,
        adjacent,
        segment,
        branch_out_shape,
        segment_out_shape,
        merge_in,
        merge_out,
        head_in,
        hidden,
        output,
    })
}

/// Predicted derivative of the pulse for each difference frame of the
/// window. `dropout_seed` selects training mode; `None` is inference.
pub fn forward<T: Scalar>(
    input: &NetInput<T>,
    w: &NetworkWeights<T>,
    opts: &ModelOptions,
    dropout_seed: Option<u64>,
) -> Result<Vec<T>> {
    forward_state(input, w, opts, dropout_seed).map(|s| s.output)
}

/// Mean squared error of the forward pass against `target`, and its
/// gradient with respect to every tensor of `w`.
pub fn backward<T: Scalar>(
    input: &NetInput<T>,
    w: &NetworkWeights<T>,
    opts: &ModelOptions,
    target: &[T],
    dropout_seed: Option<u64>,
) -> Result<(T, NetworkWeights<T>)> {
    backward_with_integral(input, w, opts, target, dropout_seed, 0.0)
}

/// Squared error of `output` against `target` plus `integral_weight` times
/// the squared error of their running sums, both averaged over frames, and
/// the gradient with respect to `output`. The running-sum term punishes
/// errors that share a sign across the window, which integrate into drift.
pub fn window_loss<T: Scalar>(output: &[T], target: &[T], integral_weight: f64) -> (T, Vec<T>) {
    let nf = T::from_usize_(output.len());
    let residual: Vec<T> = output.iter().zip(target).map(|(p, t)| *p - *t).collect();
    let mut loss = residual.iter().map(|r| *r * *r).sum::<T>() / nf;
    let mut grad: Vec<T> = residual.iter().map(|r| T::lit(2.0) * *r / nf).collect();
    if integral_weight > 0.0 {
        let lam = T::lit(integral_weight);
        let mut run = T::zero();
        let sums: Vec<T> = residual
            .iter()
            .map(|r| {
                run += *r;
                run
            })
            .collect();
        loss += lam * sums.iter().map(|c| *c * *c).sum::<T>() / nf;
        let mut tail = T::zero();
        for (g, c) in grad.iter_mut().zip(&sums).rev() {
            tail += *c;
            *g += lam * T::lit(2.0) * tail / nf;
        }
    }
    (loss, grad)
}

/// [`backward`] on the loss of [`window_loss`].
pub fn backward_with_integral<T: Scalar>(
    input: &NetInput<T>,
    w: &NetworkWeights<T>,
    opts: &ModelOptions,
    target: &[T],
    dropout_seed: Option<u64>,
    integral_weight: f64,
) -> Result<(T, NetworkWeights<T>)> {
    let n = input.len();
    if target.len() != n {
        return Err(Error::validation(format!(
            "target has {} values for {n} frames",
            target.len()
        )));
    }
    let tape = record(input, w, opts, dropout_seed)?;
    let (loss, g_out) = window_loss(tape.output(), target, integral_weight);
    ensure_finite("loss", &[loss])?;
    Ok((loss, backprop(&tape, input, w, opts, &g_out)?))
}

/// A forward pass with everything its backward pass needs.
pub struct Tape<T>(ForwardState<T>);

impl<T> Tape<T> {
    pub fn output(&self) -> &[T] {
        &self.0.output
    }
}

/// Forward pass that keeps its activations for [`backprop`].
pub fn record<T: Scalar>(
    input: &NetInput<T>,
    w: &NetworkWeights<T>,
    opts: &ModelOptions,
    dropout_seed: Option<u64>,
) -> Result<Tape<T>> {
    forward_state(input, w, opts, dropout_seed).map(Tape)
}

/// Gradient of every tensor of `w` given the gradient of some loss with
/// respect to the recorded outputs.
pub fn backprop<T: Scalar>(
    tape: &Tape<T>,
    input: &NetInput<T>,
    w: &NetworkWeights<T>,
    opts: &ModelOptions,
    g_out: &[T],
) -> Result<NetworkWeights<T>> {
    let st = &tape.0;
    let n = input.len();
    if g_out.len() != n {
        return Err(Error::validation(format!(
            "output gradient has {} values for {n} frames",
            g_out.len()
        )));
    }
    let ctx = Ctx { w, opts };
    let arch = w.arch;
    let mut grads = w.zeros_like();

    // head
    let (feat, hid) = (arch.head_inputs(), arch.hidden);
    let w2 = w.at(slot::FC2_W).to_vec();
    grads.at_mut(slot::FC2_B)[0] = g_out.iter().copied().sum();
    let mut g_hidden = vec![T::zero(); n * hid];
    {
        let dw2 = grads.at_mut(slot::FC2_W);
        for ((g, h), gh) in g_out
            .iter()
            .zip(st.hidden.chunks(hid))
            .zip(g_hidden.chunks_mut(hid))
        {
            for j in 0..hid {
                dw2[j] += *g * h[j];
                gh[j] = *g * w2[j] * (T::one() - h[j] * h[j]);
            }
        }
    }
    {
        let db1 = grads.at_mut(slot::FC1_B);
        for row in g_hidden.chunks(hid) {
            db1.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
        }
    }
    T::gemm(
        hid,
        n,
        feat,
        T::one(),
        &g_hidden,
        (1, hid as isize),
        &st.head_in,
        (feat as isize, 1),
        T::one(),
        grads.at_mut(slot::FC1_W),
        (feat as isize, 1),
    );
    let mut g_head = vec![T::zero(); n * feat];
    T::gemm(
        n,
        hid,
        feat,
        T::one(),
        &g_hidden,
        (hid as isize, 1),
        w.at(slot::FC1_W),
        (feat as isize, 1),
        T::zero(),
        &mut g_head,
        (feat as isize, 1),
    );
    let mut g_merge = Tensor4::zeros(st.merge_out.dims());
    if arch.pool_head {
        let area = st.merge_out.dims()[2] * st.merge_out.dims()[3];
        let inv = T::one() / T::from_usize_(area);
        for (m, g) in g_merge.data_mut().chunks_mut(area).zip(&g_head) {
            m.fill(*g * inv);
        }
    } else {
        g_merge.data_mut().copy_from_slice(&g_head);
    }

    // merge
    tanh_backward_inplace(&mut g_merge, &st.merge_out);
    let mut dmw = vec![T::zero(); w.at(slot::MERGE_W).len()];
    let mut dmb = vec![T::zero(); w.at(slot::MERGE_B).len()];
    let g_merge_in = conv3x3_backward(
        &st.merge_in,
        w.at(slot::MERGE_W),
        &g_merge,
        &mut dmw,
        &mut dmb,
        true,
    )
    .expect("input grad");
    grads.at_mut(slot::MERGE_W).copy_from_slice(&dmw);
    grads.at_mut(slot::MERGE_B).copy_from_slice(&dmb);

    let groups = group_ranges(n);
    let (_, s4) = arch.pooled_sizes();
    let o = arch.out_channels;
    let branch_len = o * s4 * s4;
    let branch_shape = [o, s4, s4];
    let adj_grads: Vec<Tensor4<T>> = groups
        .iter()
        .map(|r| {
            let frames: Vec<&[T]> = r
                .clone()
                .map(|f| &g_merge_in.frame(f)[..branch_len])
                .collect();
            Tensor4::stack(&frames, branch_shape)
        })
        .collect();
    let seg_grad = st.segment.as_ref().map(|_| {
        let mut g = Tensor4::zeros([GROUPS, o, s4, s4]);
        for (k, r) in groups.iter().enumerate() {
            let dst = g.frame_mut(k);
            for f in r.clone() {
                dst.iter_mut()
                    .zip(&g_merge_in.frame(f)[branch_len..])
                    .for_each(|(a, b)| *a += *b);
            }
        }
        g
    });

    let need_input = true;
    let mut jobs: Vec<Box<dyn FnOnce() -> BranchGrads<T> + Send + '_>> = Vec::new();
    for (cache, g) in st.adjacent.iter().zip(&adj_grads) {
        let (ctx, masks) = (&ctx, &st.masks[ADJACENT]);
        jobs.push(Box::new(move || {
            ctx.branch_backward(cache, ADJACENT, masks, g, need_input)
        }));
    }
    if let (Some(cache), Some(g)) = (st.segment.as_ref(), seg_grad.as_ref()) {
        let (ctx, masks) = (&ctx, &st.masks[SEGMENT]);
        jobs.push(Box::new(move || {
            ctx.branch_backward(cache, SEGMENT, masks, g, need_input)
        }));
    }
    let results = run_jobs(jobs, opts.parallel);

    // fold per-job gradients in job order so threading cannot change sums
    let mut g_x: Tensor4<T> = Tensor4::zeros(st.x.dims());
    let seg_frames = segment_frames(n);
    for (j, bg) in results.iter().enumerate() {
        let branch = if j < GROUPS { ADJACENT } else { SEGMENT };
        let base = branch * slot::BRANCH_LEN;
        for l in 0..4 {
            grads
                .at_mut(base + slot::CONV_W[l])
                .iter_mut()
                .zip(&bg.conv_w[l])
                .for_each(|(a, b)| *a += *b);
            grads
                .at_mut(base + slot::CONV_B[l])
                .iter_mut()
                .zip(&bg.conv_b[l])
                .for_each(|(a, b)| *a += *b);
        }
        if j < GROUPS {
            for (k, f) in groups[j].clone().enumerate() {
                g_x.frame_mut(f)
                    .iter_mut()
                    .zip(bg.input.frame(k))
                    .for_each(|(a, b)| *a += *b);
            }
        } else {
            for (k, &f) in seg_frames.iter().enumerate() {
                g_x.frame_mut(f)
                    .iter_mut()
                    .zip(bg.input.frame(k))
                    .for_each(|(a, b)| *a += *b);
            }
        }
    }

    // attention masks: per-pixel gradients summed over jobs, then through
    // the 1x1 convolution
    if opts.mask {
        for (branch, jobs_of_branch) in [(ADJACENT, 0..GROUPS), (SEGMENT, GROUPS..results.len())] {
            if jobs_of_branch.is_empty() {
                continue;
            }
            let base = branch * slot::BRANCH_LEN;
            let bm = &st.masks[branch];
            let masks = bm.masks.as_ref().expect("masks enabled");
            for level in 0..2 {
                let mut gm = Tensor4::zeros(masks[level].dims());
                for j in jobs_of_branch.clone() {
                    gm.data_mut()
                        .iter_mut()
                        .zip(&results[j].mask[level])
                        .for_each(|(a, b)| *a += *b);
                }
                let mut dw = vec![T::zero(); 3];
                let mut db = T::zero();
                let mw = w.at(base + slot::MASK_W[level]);
                let mb = w.at(base + slot::MASK_B[level])[0];
                attention_mask_backward(&bm.features[level], mw, mb, &gm, &mut dw, &mut db);
                grads
                    .at_mut(base + slot::MASK_W[level])
                    .copy_from_slice(&dw);
                grads.at_mut(base + slot::MASK_B[level])[0] = db;
            }
        }
    }

    // normalization parameters
    let coeffs = norm_coeffs(w, &input.stats, opts.norm_order);
    let plane = arch.input_size * arch.input_size;
    let mut dbeta = [0.0f64; 3];
    let mut dgamma = [0.0f64; 3];
    for (i, (gc, dc)) in g_x
        .data()
        .chunks(plane)
        .zip(input.diffs.data().chunks(plane))
        .enumerate()
    {
        let c = i % 3;
        let mu = input.stats.mean[c];
        for (g, d) in gc.iter().zip(dc) {
            let g = g.as_f64();
            dbeta[c] += g * (d.as_f64() - mu) * coeffs.dscale[c];
            dgamma[c] += g * coeffs.doffset_gamma;
        }
    }
    for c in 0..3 {
        grads.at_mut(slot::BETA)[c] = T::lit(dbeta[c]);
        grads.at_mut(slot::GAMMA)[c] = T::lit(dgamma[c]);
    }

    for p in grads.params() {
        ensure_finite(&format!("gradient of {}", p.name), &p.data)?;
    }
    Ok(grads)
}

/// `(C, H, W)` of every stage of each branch on the given input, from the
/// normalized input through conv1, conv2, pool1, conv3, conv4 and pool2.
/// The adjacent-frames branch comes first, then the segment branch when the
/// options enable it.
pub fn branch_shape_trace<T: Scalar>(
    input: &NetInput<T>,
    w: &NetworkWeights<T>,
    opts: &ModelOptions,
) -> Result<Vec<Vec<[usize; 3]>>> {
    let st = forward_state(input, w, opts, None)?;
    let trace = |c: &BranchCache<T>, out: [usize; 3]| {
        vec![
            c.xs.frame_shape(),
            c.a1.frame_shape(),
            c.a2.frame_shape(),
            c.d1s.frame_shape(),
            c.t3.frame_shape(),
            c.a4.frame_shape(),
            out,
        ]
    };
    let mut traces = vec![trace(&st.adjacent[0], st.branch_out_shape)];
    if let (Some(c), Some(out)) = (&st.segment, st.segment_out_shape) {
        traces.push(trace(c, out));
    }
    Ok(traces)
}
