//! Numeric kernels behind the tape ops.
//!
//! All kernels accumulate in a fixed order that does not depend on the spatial
//! position of a voxel within its tensor. In particular each output voxel of
//! [`conv3d_valid`] is a sum over `(in_ch, dx, dy, dz)` in that exact order,
//! which is what makes dense tiled inference bitwise independent of the tiling.

use crate::error::{Error, Result};
use crate::tensor::{Element, LabelGrid, Tensor};

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// Dot product with eight interleaved partial sums (vectorizes; the reduction
/// structure is fixed, so results are reproducible).
fn dot_lanes<E: Element>(a: &[E], b: &[E]) -> E {
    let mut lanes = [E::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for j in 0..8 {
            lanes[j] = lanes[j] + xa[j] * xb[j];
        }
    }
    for (j, (&xa, &xb)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        lanes[j] = lanes[j] + xa * xb;
    }
    let mut total = E::zero();
    for &l in &lanes {
        total = total + l;
    }
    total
}

/// Sum with eight interleaved partial sums; same reproducibility note as
/// [`dot_lanes`].
fn sum_lanes<E: Element>(a: &[E]) -> E {
    let mut lanes = [E::zero(); 8];
    let mut ca = a.chunks_exact(8);
    for xa in &mut ca {
        for j in 0..8 {
            lanes[j] = lanes[j] + xa[j];
        }
    }
    for (j, &xa) in ca.remainder().iter().enumerate() {
        lanes[j] = lanes[j] + xa;
    }
    let mut total = E::zero();
    for &l in &lanes {
        total = total + l;
    }
    total
}

/// Validated geometry for one valid (no padding, stride 1) 3D convolution.
struct ConvGeom {
    in_ch: usize,
    out_ch: usize,
    k: usize,
    ins: [usize; 3],
    outs: [usize; 3],
}

fn conv_geom<E: Element>(
    input: &Tensor<E>,
    kernels: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<ConvGeom> {
    if input.rank() != 4 || kernels.rank() != 5 || bias.rank() != 1 {
        return Err(shape_err(
            "conv3d",
            format!(
                "expected input rank 4, kernels rank 5, bias rank 1; got {:?} {:?} {:?}",
                input.shape(),
                kernels.shape(),
                bias.shape()
            ),
        ));
    }
    let ks = kernels.shape();
    let (out_ch, in_ch, k) = (ks[0], ks[1], ks[2]);
    if ks[3] != k || ks[4] != k || k == 0 {
        return Err(shape_err("conv3d", format!("kernels must be cubic, got {:?}", ks)));
    }
    if input.shape()[0] != in_ch {
        return Err(shape_err(
            "conv3d",
            format!("input has {} channels, kernels expect {}", input.shape()[0], in_ch),
        ));
    }
    if bias.shape()[0] != out_ch {
        return Err(shape_err(
            "conv3d",
            format!("bias has {} entries, kernels produce {}", bias.shape()[0], out_ch),
        ));
    }
    let ins = input.spatial();
    if ins.iter().any(|&d| d < k) {
        return Err(shape_err(
            "conv3d",
            format!("input extent {:?} smaller than kernel {}", ins, k),
        ));
    }
    let outs = [ins[0] - k + 1, ins[1] - k + 1, ins[2] - k + 1];
    Ok(ConvGeom { in_ch, out_ch, k, ins, outs })
}

/// Valid 3D cross-correlation (no kernel flip) with per-output-channel bias.
pub fn conv3d_valid<E: Element>(
    input: &Tensor<E>,
    kernels: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    let g = conv_geom(input, kernels, bias)?;
    let [ix, iy, iz] = g.ins;
    let [ox, oy, oz] = g.outs;
    let (in_sz, out_sz) = (ix * iy * iz, ox * oy * oz);
    let k = g.k;
    let input = input.data();
    let kern = kernels.data();
    let bias = bias.data();

    let mut out = vec![E::zero(); g.out_ch * out_sz];
    if k == 1 {
        // 1x1x1 conv: whole-plane axpy per channel pair.
        for co in 0..g.out_ch {
            let out_ch = &mut out[co * out_sz..(co + 1) * out_sz];
            out_ch.fill(bias[co]);
            for ci in 0..g.in_ch {
                let w = kern[co * g.in_ch + ci];
                let in_ch = &input[ci * in_sz..(ci + 1) * in_sz];
                for (o, &s) in out_ch.iter_mut().zip(in_ch) {
                    *o = *o + w * s;
                }
            }
        }
        return Tensor::new(vec![g.out_ch, ox, oy, oz], out);
    }
    let mut acc = vec![E::zero(); oz];
    for co in 0..g.out_ch {
        let k_co = co * g.in_ch * k * k * k;
        let out_ch = &mut out[co * out_sz..(co + 1) * out_sz];
        for x in 0..ox {
            for y in 0..oy {
                acc.fill(bias[co]);
                for ci in 0..g.in_ch {
                    let in_ch = &input[ci * in_sz..(ci + 1) * in_sz];
                    let k_ci = k_co + ci * k * k * k;
                    for dx in 0..k {
                        for dy in 0..k {
                            let row = &in_ch[((x + dx) * iy + (y + dy)) * iz..][..iz];
                            let kb = k_ci + (dx * k + dy) * k;
                            if k == 3 {
                                // One pass over the row covers all three taps;
                                // the left-to-right sum keeps the exact
                                // accumulation order of the generic loop.
                                let (w0, w1, w2) = (kern[kb], kern[kb + 1], kern[kb + 2]);
                                let r0 = &row[..oz];
                                let r1 = &row[1..1 + oz];
                                let r2 = &row[2..2 + oz];
                                for i in 0..oz {
                                    acc[i] = acc[i] + w0 * r0[i] + w1 * r1[i] + w2 * r2[i];
                                }
                            } else {
                                for dz in 0..k {
                                    let w = kern[kb + dz];
                                    let src = &row[dz..dz + oz];
                                    for (a, &s) in acc.iter_mut().zip(src) {
                                        *a = *a + w * s;
                                    }
                                }
                            }
                        }
                    }
                }
                out_ch[(x * oy + y) * oz..][..oz].copy_from_slice(&acc);
            }
        }
    }
    Tensor::new(vec![g.out_ch, ox, oy, oz], out)
}

pub fn conv3d_grad_input<E: Element>(
    dout: &Tensor<E>,
    input: &Tensor<E>,
    kernels: &Tensor<E>,
) -> Tensor<E> {
    let ks = kernels.shape();
    let (out_ch, in_ch, k) = (ks[0], ks[1], ks[2]);
    let [ix, iy, iz] = input.spatial();
    let [ox, oy, oz] = dout.spatial();
    let (in_sz, out_sz) = (ix * iy * iz, ox * oy * oz);
    let dout = dout.data();
    let kern = kernels.data();

    let mut din = vec![E::zero(); in_ch * in_sz];
    if k == 1 {
        for co in 0..out_ch {
            let out_ch_data = &dout[co * out_sz..(co + 1) * out_sz];
            for ci in 0..in_ch {
                let w = kern[co * in_ch + ci];
                let din_ch = &mut din[ci * in_sz..(ci + 1) * in_sz];
                for (d, &s) in din_ch.iter_mut().zip(out_ch_data) {
                    *d = *d + w * s;
                }
            }
        }
        return Tensor::new(input.shape().to_vec(), din).expect("din shape");
    }
    for co in 0..out_ch {
        let out_ch_data = &dout[co * out_sz..(co + 1) * out_sz];
        let k_co = co * in_ch * k * k * k;
        for ci in 0..in_ch {
            let din_ch = &mut din[ci * in_sz..(ci + 1) * in_sz];
            let k_ci = k_co + ci * k * k * k;
            for dx in 0..k {
                for dy in 0..k {
                    let kb = k_ci + (dx * k + dy) * k;
                    for dz in 0..k {
                        let w = kern[kb + dz];
                        for x in 0..ox {
                            for y in 0..oy {
                                let src = &out_ch_data[(x * oy + y) * oz..][..oz];
                                let dst = &mut din_ch
                                    [((x + dx) * iy + (y + dy)) * iz + dz..][..oz];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d = *d + w * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), din).expect("din shape")
}

pub fn conv3d_grad_kernels<E: Element>(
    dout: &Tensor<E>,
    input: &Tensor<E>,
    kernels: &Tensor<E>,
) -> Tensor<E> {
    let ks = kernels.shape();
    let (out_ch, in_ch, k) = (ks[0], ks[1], ks[2]);
    let [_, iy, iz] = input.spatial();
    let [ox, oy, oz] = dout.spatial();
    let in_sz = input.spatial().iter().product::<usize>();
    let out_sz = ox * oy * oz;
    let dout = dout.data();
    let input = input.data();

    let mut dk = vec![E::zero(); out_ch * in_ch * k * k * k];
    if k == 1 {
        for co in 0..out_ch {
            let out_ch_data = &dout[co * out_sz..(co + 1) * out_sz];
            for ci in 0..in_ch {
                let in_ch_data = &input[ci * in_sz..(ci + 1) * in_sz];
                dk[co * in_ch + ci] = dot_lanes(in_ch_data, out_ch_data);
            }
        }
        return Tensor::new(ks.to_vec(), dk).expect("dk shape");
    }
    let mut acc = vec![E::zero(); 3 * oz];
    for co in 0..out_ch {
        let out_ch_data = &dout[co * out_sz..(co + 1) * out_sz];
        for ci in 0..in_ch {
            let in_ch_data = &input[ci * in_sz..(ci + 1) * in_sz];
            for dx in 0..k {
                for dy in 0..k {
                    if k == 3 {
                        // One pass over the rows accumulates all three dz taps.
                        let (a0, rest) = acc.split_at_mut(oz);
                        let (a1, a2) = rest.split_at_mut(oz);
                        a0.fill(E::zero());
                        a1.fill(E::zero());
                        a2.fill(E::zero());
                        for x in 0..ox {
                            for y in 0..oy {
                                let a = &in_ch_data[((x + dx) * iy + (y + dy)) * iz..][..oz + 2];
                                let g = &out_ch_data[(x * oy + y) * oz..][..oz];
                                for i in 0..oz {
                                    a0[i] = a0[i] + a[i] * g[i];
                                    a1[i] = a1[i] + a[i + 1] * g[i];
                                    a2[i] = a2[i] + a[i + 2] * g[i];
                                }
                            }
                        }
                        for (dz, lane) in [&*a0, &*a1, &*a2].into_iter().enumerate() {
                            let mut total = E::zero();
                            for &v in lane {
                                total = total + v;
                            }
                            dk[(((co * in_ch + ci) * k + dx) * k + dy) * k + dz] = total;
                        }
                    } else {
                        for dz in 0..k {
                            let lane = &mut acc[..oz];
                            lane.fill(E::zero());
                            for x in 0..ox {
                                for y in 0..oy {
                                    let a = &in_ch_data
                                        [((x + dx) * iy + (y + dy)) * iz + dz..][..oz];
                                    let g = &out_ch_data[(x * oy + y) * oz..][..oz];
                                    for (s, (&av, &gv)) in
                                        lane.iter_mut().zip(a.iter().zip(g))
                                    {
                                        *s = *s + av * gv;
                                    }
                                }
                            }
                            let mut total = E::zero();
                            for &v in acc[..oz].iter() {
                                total = total + v;
                            }
                            dk[(((co * in_ch + ci) * k + dx) * k + dy) * k + dz] = total;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(ks.to_vec(), dk).expect("dk shape")
}

pub fn conv3d_grad_bias<E: Element>(dout: &Tensor<E>) -> Tensor<E> {
    let out_ch = dout.channels();
    let out_sz = dout.spatial().iter().product::<usize>();
    let data = dout.data();
    let mut db = vec![E::zero(); out_ch];
    for co in 0..out_ch {
        db[co] = sum_lanes(&data[co * out_sz..(co + 1) * out_sz]);
    }
    Tensor::new(vec![out_ch], db).expect("db shape")
}

/// Leaky ReLU; the subgradient at exactly zero is the negative-side slope.
pub fn leaky_relu<E: Element>(input: &Tensor<E>, slope: E) -> Tensor<E> {
    input.map(|v| if v > E::zero() { v } else { slope * v })
}

pub fn leaky_relu_grad<E: Element>(dout: &Tensor<E>, input: &Tensor<E>, slope: E) -> Tensor<E> {
    let data: Vec<E> = input
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&v, &g)| if v > E::zero() { g } else { slope * g })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu grad shape")
}

/// Softmax over channels followed by cross-entropy against integer targets,
/// averaged over all spatial positions. Returns `(loss, probs)`; `probs` is
/// kept for the backward pass.
pub fn softmax_xent_mean<E: Element>(
    logits: &Tensor<E>,
    targets: &LabelGrid,
) -> Result<(E, Tensor<E>)> {
    if logits.rank() != 4 {
        return Err(shape_err(
            "softmax_xent_mean",
            format!("logits must be rank 4, got {:?}", logits.shape()),
        ));
    }
    if logits.spatial() != targets.shape() {
        return Err(shape_err(
            "softmax_xent_mean",
            format!(
                "logits spatial {:?} vs targets {:?}",
                logits.spatial(),
                targets.shape()
            ),
        ));
    }
    let classes = logits.channels();
    let n = targets.numel();
    let data = logits.data();
    let tdata = targets.data();

    let mut probs = vec![E::zero(); classes * n];
    let mut loss = E::zero();
    for v in 0..n {
        let mut m = data[v];
        for ch in 1..classes {
            let z = data[ch * n + v];
            if z > m {
                m = z;
            }
        }
        let mut sum = E::zero();
        for ch in 0..classes {
            let e = (data[ch * n + v] - m).exp();
            probs[ch * n + v] = e;
            sum = sum + e;
        }
        let inv = E::one() / sum;
        for ch in 0..classes {
            probs[ch * n + v] = probs[ch * n + v] * inv;
        }
        let t = tdata[v] as usize;
        if t >= classes {
            return Err(Error::LabelOutOfRange { label: tdata[v], classes });
        }
        loss = loss + (sum.ln() + m - data[t * n + v]);
    }
    let loss = loss / E::from_f64(n as f64);
    let probs = Tensor::new(logits.shape().to_vec(), probs)?;
    Ok((loss, probs))
}

pub fn softmax_xent_mean_grad<E: Element>(
    dout: E,
    probs: &Tensor<E>,
    targets: &LabelGrid,
) -> Tensor<E> {
    let n = targets.numel();
    let scale = dout / E::from_f64(n as f64);
    let mut dlogits = probs.data().to_vec();
    for (ch, chunk) in dlogits.chunks_exact_mut(n).enumerate() {
        for (v, d) in chunk.iter_mut().enumerate() {
            let onehot = if targets.data()[v] as usize == ch { E::one() } else { E::zero() };
            *d = (*d - onehot) * scale;
        }
    }
    Tensor::new(probs.shape().to_vec(), dlogits).expect("xent grad shape")
}

/// Nearest-neighbour upsampling by integer repetition along each spatial axis.
pub fn upsample_repeat<E: Element>(input: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    if input.rank() != 4 {
        return Err(shape_err(
            "upsample_repeat",
            format!("input must be rank 4, got {:?}", input.shape()),
        ));
    }
    if factor == 0 {
        return Err(shape_err("upsample_repeat", "factor must be >= 1".into()));
    }
    let c = input.channels();
    let [ix, iy, iz] = input.spatial();
    let (ox, oy, oz) = (ix * factor, iy * factor, iz * factor);
    let data = input.data();
    let mut out = vec![E::zero(); c * ox * oy * oz];
    for ch in 0..c {
        let src = &data[ch * ix * iy * iz..][..ix * iy * iz];
        let dst = &mut out[ch * ox * oy * oz..][..ox * oy * oz];
        for a in 0..ox {
            for b in 0..oy {
                let row = &src[((a / factor) * iy + b / factor) * iz..][..iz];
                let drow = &mut dst[(a * oy + b) * oz..][..oz];
                for (i, d) in drow.iter_mut().enumerate() {
                    *d = row[i / factor];
                }
            }
        }
    }
    Tensor::new(vec![c, ox, oy, oz], out)
}

pub fn upsample_repeat_grad<E: Element>(
    dout: &Tensor<E>,
    input: &Tensor<E>,
    factor: usize,
) -> Tensor<E> {
    let c = input.channels();
    let [ix, iy, iz] = input.spatial();
    let [ox, oy, oz] = dout.spatial();
    let data = dout.data();
    let mut din = vec![E::zero(); c * ix * iy * iz];
    for ch in 0..c {
        let src = &data[ch * ox * oy * oz..][..ox * oy * oz];
        let dst = &mut din[ch * ix * iy * iz..][..ix * iy * iz];
        for a in 0..ox {
            for b in 0..oy {
                let row = &src[(a * oy + b) * oz..][..oz];
                let dbase = ((a / factor) * iy + b / factor) * iz;
                for (i, &g) in row.iter().enumerate() {
                    dst[dbase + i / factor] += g;
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), din).expect("upsample grad shape")
}

/// Offset of a centered crop: `floor((src - tgt) / 2)` per axis.
pub fn center_crop_offset(src: [usize; 3], tgt: [usize; 3]) -> [usize; 3] {
    [(src[0] - tgt[0]) / 2, (src[1] - tgt[1]) / 2, (src[2] - tgt[2]) / 2]
}

pub fn center_crop<E: Element>(input: &Tensor<E>, target: [usize; 3]) -> Result<Tensor<E>> {
    if input.rank() != 4 {
        return Err(shape_err(
            "center_crop",
            format!("input must be rank 4, got {:?}", input.shape()),
        ));
    }
    let ins = input.spatial();
    if ins.iter().zip(&target).any(|(&i, &t)| t > i || t == 0) {
        return Err(shape_err(
            "center_crop",
            format!("cannot crop {:?} to {:?}", ins, target),
        ));
    }
    let off = center_crop_offset(ins, target);
    let c = input.channels();
    let [ix, iy, iz] = ins;
    let [tx, ty, tz] = target;
    let data = input.data();
    let mut out = vec![E::zero(); c * tx * ty * tz];
    for ch in 0..c {
        let src = &data[ch * ix * iy * iz..][..ix * iy * iz];
        let dst = &mut out[ch * tx * ty * tz..][..tx * ty * tz];
        for x in 0..tx {
            for y in 0..ty {
                let s = &src[((x + off[0]) * iy + (y + off[1])) * iz + off[2]..][..tz];
                dst[(x * ty + y) * tz..][..tz].copy_from_slice(s);
            }
        }
    }
    Tensor::new(vec![c, tx, ty, tz], out)
}

pub fn center_crop_grad<E: Element>(dout: &Tensor<E>, input: &Tensor<E>) -> Tensor<E> {
    let ins = input.spatial();
    let target = dout.spatial();
    let off = center_crop_offset(ins, target);
    let c = input.channels();
    let [ix, iy, iz] = ins;
    let [tx, ty, tz] = target;
    let data = dout.data();
    let mut din = vec![E::zero(); c * ix * iy * iz];
    for ch in 0..c {
        let src = &data[ch * tx * ty * tz..][..tx * ty * tz];
        let dst = &mut din[ch * ix * iy * iz..][..ix * iy * iz];
        for x in 0..tx {
            for y in 0..ty {
                let d = &mut dst[((x + off[0]) * iy + (y + off[1])) * iz + off[2]..][..tz];
                let s = &src[(x * ty + y) * tz..][..tz];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv = *dv + sv;
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), din).expect("crop grad shape")
}

/// Concatenate rank-4 tensors along the channel axis; spatial extents must match.
pub fn concat_channels<E: Element>(inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = inputs
        .first()
        .ok_or_else(|| shape_err("concat_channels", "no inputs".into()))?;
    if first.rank() != 4 {
        return Err(shape_err(
            "concat_channels",
            format!("inputs must be rank 4, got {:?}", first.shape()),
        ));
    }
    let spatial = first.spatial();
    let mut channels = 0;
    for t in inputs {
        if t.rank() != 4 || t.spatial() != spatial {
            return Err(shape_err(
                "concat_channels",
                format!("spatial mismatch: {:?} vs {:?}", t.shape(), first.shape()),
            ));
        }
        channels += t.channels();
    }
    let mut out = Vec::with_capacity(channels * spatial.iter().product::<usize>());
    for t in inputs {
        out.extend_from_slice(t.data());
    }
    Tensor::new(vec![channels, spatial[0], spatial[1], spatial[2]], out)
}

pub fn sum_all<E: Element>(input: &Tensor<E>) -> E {
    let mut total = E::zero();
    for &v in input.data() {
        total = total + v;
    }
    total
}
