//! Dense whole-volume inference by output-window tiling.
//!
//! The volume is split into output windows of `tile_extent` per axis; the
//! last window on an axis is shifted back to fit inside the volume, and
//! each voxel is written by the window that owns it. Reads outside the
//! volume are zero-padded *by absolute coordinate*, and the low-resolution
//! pathway is sampled on the absolute lattice `D * i` regardless of window
//! position. Every output voxel therefore sees exactly the same inputs in
//! exactly the same accumulation order whatever the tiling, which makes
//! predictions bitwise independent of `tile_extent`.

use crate::error::{Error, Result};
use crate::net::{SegmenterSpec, Segmenter};
use crate::tensor::ops::{concat_channels, conv3d_valid, leaky_relu, upsample_repeat};
use crate::tensor::{Element, LabelGrid, ParamSet, Tensor};

/// `(kernels, bias)` per layer, in forward order, ending with the classifier.
fn layer_refs<'a, E: Element>(
    params: &'a ParamSet<E>,
    spec: &SegmenterSpec,
    prefix: &str,
) -> Vec<(&'a Tensor<E>, &'a Tensor<E>)> {
    let p = spec.pathway_len();
    let names: Vec<String> = match prefix {
        "hidden" => (0..spec.hidden_layers.len())
            .map(|j| format!("hidden.layer{}", p + j + 1))
            .collect(),
        "classify" => vec!["classify".into()],
        _ => (1..=p).map(|i| format!("{prefix}.layer{i}")).collect(),
    };
    names
        .iter()
        .map(|n| {
            let k = params.find(&format!("{n}.kernels")).expect("layer kernels");
            let b = params.find(&format!("{n}.bias")).expect("layer bias");
            (params.get(k), params.get(b))
        })
        .collect()
}

/// Read a `[C, ex, ey, ez]` block sampled at `start + stride * i` per axis,
/// zero-filling positions outside the volume.
fn read_padded<E: Element>(
    image: &Tensor<E>,
    start: [isize; 3],
    extents: [usize; 3],
    stride: usize,
) -> Tensor<E> {
    let [sx, sy, sz] = image.spatial();
    let channels = image.channels();
    let spatial = sx * sy * sz;
    let idata = image.data();
    let mut data = Vec::with_capacity(channels * extents.iter().product::<usize>());
    for ch in 0..channels {
        let plane = &idata[ch * spatial..(ch + 1) * spatial];
        for i in 0..extents[0] {
            let x = start[0] + (stride * i) as isize;
            for j in 0..extents[1] {
                let y = start[1] + (stride * j) as isize;
                for k in 0..extents[2] {
                    let z = start[2] + (stride * k) as isize;
                    let inside = x >= 0
                        && y >= 0
                        && z >= 0
                        && (x as usize) < sx
                        && (y as usize) < sy
                        && (z as usize) < sz;
                    data.push(if inside {
                        plane[(x as usize * sy + y as usize) * sz + z as usize]
                    } else {
                        E::zero()
                    });
                }
            }
        }
    }
    let shape = vec![channels, extents[0], extents[1], extents[2]];
    Tensor::new(shape, data).expect("padded read shape")
}

/// Crop `target` extents starting at `offsets` (pure index copy).
fn crop_at<E: Element>(input: &Tensor<E>, offsets: [usize; 3], target: [usize; 3]) -> Tensor<E> {
    let [sx, sy, sz] = input.spatial();
    let channels = input.channels();
    debug_assert!((0..3).all(|a| offsets[a] + target[a] <= [sx, sy, sz][a]));
    let idata = input.data();
    let mut data = Vec::with_capacity(channels * target.iter().product::<usize>());
    for ch in 0..channels {
        for i in 0..target[0] {
            for j in 0..target[1] {
                let row = ((ch * sx + offsets[0] + i) * sy + offsets[1] + j) * sz + offsets[2];
                data.extend_from_slice(&idata[row..row + target[2]]);
            }
        }
    }
    Tensor::new(vec![channels, target[0], target[1], target[2]], data).expect("crop shape")
}

fn conv_chain<E: Element>(
    mut x: Tensor<E>,
    layers: &[(&Tensor<E>, &Tensor<E>)],
    slope: E,
) -> Result<Tensor<E>> {
    for (kernels, bias) in layers {
        x = leaky_relu(&conv3d_valid(&x, kernels, bias)?, slope);
    }
    Ok(x)
}

/// Logits for the output window `[start, start + out)` per axis.
fn forward_window<E: Element>(
    seg: &Segmenter<E>,
    image: &Tensor<E>,
    start: [usize; 3],
    out: [usize; 3],
) -> Result<Tensor<E>> {
    let spec = seg.spec();
    let params = seg.params();
    let slope = E::from_f64(spec.activation_slope);
    let shrink = spec.pathway_shrink();
    debug_assert!(shrink % 2 == 0, "3x3x3 stacks shrink by an even amount");
    let p = shrink / 2;
    let d = spec.downsample_factor;

    let n_start = std::array::from_fn(|a| start[a] as isize - p as isize);
    let n_ext = std::array::from_fn(|a| out[a] + shrink);
    let normal_in = read_padded(image, n_start, n_ext, 1);

    // Low-res lattice: block b covers voxels [d*b, d*(b+1)). The window
    // needs blocks j0 .. j0 + l_out per axis, plus the conv halo.
    let j0: [usize; 3] = std::array::from_fn(|a| start[a] / d);
    let off: [usize; 3] = std::array::from_fn(|a| start[a] - d * j0[a]);
    let l_out: [usize; 3] = std::array::from_fn(|a| (off[a] + out[a]).div_ceil(d));
    let low_start = std::array::from_fn(|a| (d as isize) * (j0[a] as isize - p as isize));
    let low_ext = std::array::from_fn(|a| l_out[a] + shrink);
    let low_in = read_padded(image, low_start, low_ext, d);

    let normal_out = conv_chain(normal_in, &layer_refs(params, spec, "path_norm"), slope)?;
    let low_out = conv_chain(low_in, &layer_refs(params, spec, "path_low"), slope)?;
    let low_up = upsample_repeat(&low_out, d)?;
    let low_cropped = crop_at(&low_up, off, out);
    let fused = concat_channels(&[&normal_out, &low_cropped])?;
    let hidden = conv_chain(fused, &layer_refs(params, spec, "hidden"), slope)?;
    let (ck, cb) = layer_refs(params, spec, "classify")[0];
    conv3d_valid(&hidden, ck, cb)
}

/// Class logits for the whole volume, `[classes, X, Y, Z]`.
pub fn dense_infer_logits<E: Element>(
    seg: &Segmenter<E>,
    image: &Tensor<E>,
    tile_extent: usize,
) -> Result<Tensor<E>> {
    if tile_extent == 0 {
        return Err(Error::InvalidConfig("tile extent must be >= 1".into()));
    }
    let spec = seg.spec();
    if image.rank() != 4 || image.channels() != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "dense_infer",
            detail: format!(
                "volume {:?} vs {} input channels",
                image.shape(),
                spec.in_channels
            ),
        });
    }
    let dims = image.spatial();
    let classes = spec.classes;
    let spatial: usize = dims.iter().product();
    let mut logits = vec![E::zero(); classes * spatial];
    let tiles: [usize; 3] = std::array::from_fn(|a| tile_extent.min(dims[a]));
    let counts: [usize; 3] = std::array::from_fn(|a| dims[a].div_ceil(tiles[a]));
    for wx in 0..counts[0] {
        for wy in 0..counts[1] {
            for wz in 0..counts[2] {
                let w = [wx, wy, wz];
                // Owned region vs computed (shifted-to-fit) window.
                let own_lo: [usize; 3] = std::array::from_fn(|a| w[a] * tiles[a]);
                let own_hi: [usize; 3] =
                    std::array::from_fn(|a| ((w[a] + 1) * tiles[a]).min(dims[a]));
                let start: [usize; 3] =
                    std::array::from_fn(|a| own_lo[a].min(dims[a] - tiles[a]));
                let tile = forward_window(seg, image, start, tiles)?;
                let tdata = tile.data();
                for c in 0..classes {
                    for x in own_lo[0]..own_hi[0] {
                        for y in own_lo[1]..own_hi[1] {
                            let src = ((c * tiles[0] + (x - start[0])) * tiles[1]
                                + (y - start[1]))
                                * tiles[2]
                                + (own_lo[2] - start[2]);
                            let dst =
                                ((c * dims[0] + x) * dims[1] + y) * dims[2] + own_lo[2];
                            let n = own_hi[2] - own_lo[2];
                            logits[dst..dst + n].copy_from_slice(&tdata[src..src + n]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![classes, dims[0], dims[1], dims[2]], logits)
}

/// Predicted label map (argmax over classes, first index wins ties).
pub fn dense_infer<E: Element>(
    seg: &Segmenter<E>,
    image: &Tensor<E>,
    tile_extent: usize,
) -> Result<LabelGrid> {
    let logits = dense_infer_logits(seg, image, tile_extent)?;
    let dims = image.spatial();
    let spatial: usize = dims.iter().product();
    let classes = seg.spec().classes;
    let data = logits.data();
    let labels = (0..spatial)
        .map(|v| {
            let mut best = 0usize;
            for c in 1..classes {
                if data[c * spatial + v] > data[best * spatial + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelGrid::new(dims, labels)
}
