//! Building blocks with explicit backward passes. Every backward function
//! returns (or accumulates) the adjoint of its forward map.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stnet::tensor::Tensor4;

/// Channel block boundaries for the temporal shift: `floor(C/3)`,
/// `floor(C/3)`, remainder.
fn shift_blocks(c: usize) -> (usize, usize) {
    let third = c / 3;
    (third, 2 * third)
}

fn shift_impl<T: Scalar>(x: &Tensor4<T>, adjoint: bool) -> Tensor4<T> {
    let [t, c, h, w] = x.dims();
    let (b1, b2) = shift_blocks(c);
    let plane = h * w;
    let mut out = Tensor4::zeros(x.dims());
    for f in 0..t {
        // block 1 pulls from the next frame, block 2 from the previous one;
        // the adjoint swaps the directions
        let (from1, from2) = if adjoint {
            (f.checked_sub(1), (f + 1 < t).then_some(f + 1))
        } else {
            ((f + 1 < t).then_some(f + 1), f.checked_sub(1))
        };
        let dst = f * c * plane;
        if let Some(s) = from1 {
            let src = s * c * plane;
            out.data_mut()[dst..dst + b1 * plane].copy_from_slice(&x.data()[src..src + b1 * plane]);
        }
        if let Some(s) = from2 {
            let src = s * c * plane;
            out.data_mut()[dst + b1 * plane..dst + b2 * plane]
                .copy_from_slice(&x.data()[src + b1 * plane..src + b2 * plane]);
        }
        out.data_mut()[dst + b2 * plane..dst + c * plane]
            .copy_from_slice(&x.data()[dst + b2 * plane..dst + c * plane]);
    }
    out
}

/// Zero-parameter temporal shift. The first channel block of frame `t` takes
/// the values of frame `t + 1`, the second block those of frame `t - 1`, the
/// rest stays; vacated positions are zero.
pub fn temporal_shift<T: Scalar>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    if x.frames() < 2 {
        return Err(Error::validation("temporal shift needs at least 2 frames"));
    }
    Ok(shift_impl(x, false))
}

pub(crate) fn shift_forward<T: Scalar>(x: &Tensor4<T>, enabled: bool) -> Tensor4<T> {
    if enabled {
        shift_impl(x, false)
    } else {
        x.clone()
    }
}

pub(crate) fn shift_backward<T: Scalar>(g: &Tensor4<T>, enabled: bool) -> Tensor4<T> {
    if enabled {
        shift_impl(g, true)
    } else {
        g.clone()
    }
}

/// Unrolls one `C x H x W` frame into `(C * 9) x (H * W)` columns for a
/// `3 x 3` convolution with zero padding 1.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let plane = h * w;
    for ch in 0..c {
        let src = &x[ch * plane..(ch + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * plane..][..plane];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&line[..w - 1]);
                        }
                        1 => out.copy_from_slice(line),
                        _ => {
                            out[..w - 1].copy_from_slice(&line[1..]);
                            out[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the frame.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, x: &mut [T]) {
    let plane = h * w;
    x.fill(T::zero());
    for ch in 0..c {
        let dst = &mut x[ch * plane..(ch + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * plane..][..plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let line = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => line[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(a, b)| *a += *b),
                        1 => line.iter_mut().zip(src).for_each(|(a, b)| *a += *b),
                        _ => line[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(a, b)| *a += *b),
                    }
                }
            }
        }
    }
}

/// Same-padded `3 x 3` convolution applied frame by frame. `weight` is
/// `[cout, cin, 3, 3]`.
pub fn conv3x3<T: Scalar>(x: &Tensor4<T>, weight: &[T], bias: &[T], cout: usize) -> Tensor4<T> {
    let [t, cin, h, w] = x.dims();
    let plane = h * w;
    let k = cin * 9;
    debug_assert_eq!(weight.len(), cout * k);
    let mut cols = vec![T::zero(); k * plane];
    let mut out = Tensor4::zeros([t, cout, h, w]);
    for f in 0..t {
        im2col(x.frame(f), cin, h, w, &mut cols);
        let y = out.frame_mut(f);
        for (co, b) in bias.iter().enumerate() {
            y[co * plane..(co + 1) * plane].fill(*b);
        }
        T::gemm(
            cout,
            k,
            plane,
            T::one(),
            weight,
            (k as isize, 1),
            &cols,
            (plane as isize, 1),
            T::one(),
            y,
            (plane as isize, 1),
        );
    }
    out
}

/// Backward of [`conv3x3`] given the gradient at its (pre-activation)
/// output. Accumulates into `dweight`/`dbias` and returns the input gradient
/// when asked.
pub fn conv3x3_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    gy: &Tensor4<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor4<T>> {
    let [t, cin, h, w] = x.dims();
    let cout = gy.channels();
    let plane = h * w;
    let k = cin * 9;
    let mut cols = vec![T::zero(); k * plane];
    let mut dcols = vec![T::zero(); k * plane];
    let mut dx = need_input_grad.then(|| Tensor4::zeros(x.dims()));
    for f in 0..t {
        let g = gy.frame(f);
        for (co, db) in dbias.iter_mut().enumerate() {
            *db += g[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
        }
        im2col(x.frame(f), cin, h, w, &mut cols);
        T::gemm(
            cout,
            plane,
            k,
            T::one(),
            g,
            (plane as isize, 1),
            &cols,
            (1, plane as isize),
            T::one(),
            dweight,
            (k as isize, 1),
        );
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                k,
                cout,
                plane,
                T::one(),
                weight,
                (1, k as isize),
                g,
                (plane as isize, 1),
                T::zero(),
                &mut dcols,
                (plane as isize, 1),
            );
            col2im(&dcols, cin, h, w, dx.frame_mut(f));
        }
    }
    dx
}

pub fn tanh_inplace<T: Scalar>(x: &mut Tensor4<T>) {
    x.data_mut().iter_mut().for_each(|v| *v = v.tanh());
}

/// Multiplies `g` by `1 - y^2`, the derivative of `tanh` at output `y`.
pub fn tanh_backward_inplace<T: Scalar>(g: &mut Tensor4<T>, y: &Tensor4<T>) {
    g.data_mut()
        .iter_mut()
        .zip(y.data())
        .for_each(|(g, y)| *g *= T::one() - *y * *y);
}

/// `2 x 2` average pooling with stride 2; an odd trailing row or column is
/// dropped.
pub fn avg_pool2<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [t, c, h, w] = x.dims();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Tensor4::zeros([t, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..t * c {
        let s = &src[plane * h * w..];
        let d = &mut dst[plane * oh * ow..];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                d[y * ow + xx] = (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(g: &Tensor4<T>, input_dims: [usize; 4]) -> Tensor4<T> {
    let [t, c, h, w] = input_dims;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Tensor4::zeros(input_dims);
    let src = g.data();
    let dst = out.data_mut();
    for plane in 0..t * c {
        let s = &src[plane * oh * ow..];
        let d = &mut dst[plane * h * w..];
        for y in 0..oh {
            for xx in 0..ow {
                let v = s[y * ow + xx] * quarter;
                let i = 2 * y * w + 2 * xx;
                d[i] = v;
                d[i + 1] = v;
                d[i + w] = v;
                d[i + w + 1] = v;
            }
        }
    }
    out
}

fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Soft attention mask from a 1x1 convolution over `features`:
/// `m = H W sigmoid(z) / (2 |sigmoid(z)|_1)` per frame, with
/// `z = sum_c omega_c x_c + bias`. Returns a `T x 1 x H x W` tensor whose
/// frames each sum to `H W / 2`.
pub fn attention_mask<T: Scalar>(
    features: &Tensor4<T>,
    omega: &[T],
    bias: T,
) -> Result<Tensor4<T>> {
    let [t, c, h, w] = features.dims();
    if omega.len() != c {
        return Err(Error::validation(format!(
            "mask weights have {} entries for {c} channels",
            omega.len()
        )));
    }
    if !features.is_finite() {
        return Err(Error::validation("mask features must be finite"));
    }
    let plane = h * w;
    let half_area = T::from_usize_(plane) * T::lit(0.5);
    let mut out = Tensor4::zeros([t, 1, h, w]);
    for f in 0..t {
        let x = features.frame(f);
        let m = out.frame_mut(f);
        for (i, v) in m.iter_mut().enumerate() {
            let z = (0..c).fold(bias, |acc, ch| acc + omega[ch] * x[ch * plane + i]);
            *v = sigmoid(z);
        }
        let l1: T = m.iter().copied().sum();
        m.iter_mut().for_each(|v| *v = *v * half_area / l1);
    }
    Ok(out)
}

/// Backward of [`attention_mask`] with respect to `omega` and `bias`, given
/// the gradient `gm` at the mask.
pub fn attention_mask_backward<T: Scalar>(
    features: &Tensor4<T>,
    omega: &[T],
    bias: T,
    gm: &Tensor4<T>,
    domega: &mut [T],
    dbias: &mut T,
) {
    let [t, c, h, w] = features.dims();
    let plane = h * w;
    let half_area = T::from_usize_(plane) * T::lit(0.5);
    let mut s = vec![T::zero(); plane];
    for f in 0..t {
        let x = features.frame(f);
        let g = gm.frame(f);
        for (i, v) in s.iter_mut().enumerate() {
            let z = (0..c).fold(bias, |acc, ch| acc + omega[ch] * x[ch * plane + i]);
            *v = sigmoid(z);
        }
        let total: T = s.iter().copied().sum();
        let dot: T = s.iter().zip(g).map(|(a, b)| *a * *b).sum();
        for i in 0..plane {
            let gs = half_area * (g[i] / total - dot / (total * total));
            let gz = gs * s[i] * (T::one() - s[i]);
            for ch in 0..c {
                domega[ch] += gz * x[ch * plane + i];
            }
            *dbias += gz;
        }
    }
}

/// Inverted-dropout keep mask (entries `0` or `1 / (1 - p)`), or `None`
/// when `p == 0`.
pub fn dropout_mask<T: Scalar, R: Rng>(len: usize, p: f64, rng: &mut R) -> Option<Vec<T>> {
    if p <= 0.0 {
        return None;
    }
    let scale = T::lit(1.0 / (1.0 - p));
    Some(
        (0..len)
            .map(|_| {
                if rng.gen::<f64>() >= p {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect(),
    )
}

pub fn apply_mask_inplace<T: Scalar>(x: &mut Tensor4<T>, mask: Option<&[T]>) {
    if let Some(m) = mask {
        x.data_mut().iter_mut().zip(m).for_each(|(v, k)| *v *= *k);
    }
}
