//! Stride-2 transposed convolution (kernel 4, padding 1) on channels-last maps.
//!
//! Each stage exactly doubles the spatial size: `out = (in − 1)·2 − 2·1 + 4 = 2·in`.
//! The weight is stored `[c_in, c_out, 4, 4]`.

use super::linalg::{gemm, MatMut, MatRef};
use super::{Grads, ParamSet, Real};
use crate::error::{shape_err, Result};

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl MapDims {
    pub fn len(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn kernel_dims<T: Real>(params: &ParamSet<T>, name: &str) -> Result<(usize, usize)> {
    let w = params.get(&format!("{name}.weight"))?;
    match w.shape() {
        [cin, cout, KERNEL, KERNEL] => Ok((*cin, *cout)),
        s => Err(shape_err!("{name}.weight must be [c_in, c_out, 4, 4], got {s:?}")),
    }
}

/// Output coordinate hit by input coordinate `i` and kernel tap `k`, if in range.
fn target(i: usize, k: usize, out: usize) -> Option<usize> {
    let o = (i * STRIDE + k) as isize - PADDING as isize;
    (o >= 0 && (o as usize) < out).then_some(o as usize)
}

pub fn conv_transpose<T: Real>(
    params: &ParamSet<T>,
    name: &str,
    x: &[T],
    dims: MapDims,
) -> Result<(Vec<T>, MapDims)> {
    let (cin, cout) = kernel_dims(params, name)?;
    if dims.channels != cin || x.len() != dims.len() {
        return Err(shape_err!(
            "{name}: input {dims:?} incompatible with {cin} input channels"
        ));
    }
    let w = params.get(&format!("{name}.weight"))?;
    let pixels = dims.batch * dims.height * dims.width;
    let taps = cout * KERNEL * KERNEL;
    let mut cols = vec![T::zero(); pixels * taps];
    gemm(
        T::one(),
        MatRef::new(x, pixels, cin),
        MatRef::new(w.data(), cin, taps),
        T::zero(),
        MatMut::new(&mut cols, pixels, taps),
    );
    let out_dims = MapDims {
        batch: dims.batch,
        height: dims.height * STRIDE,
        width: dims.width * STRIDE,
        channels: cout,
    };
    let mut y = vec![T::zero(); out_dims.len()];
    for b in 0..dims.batch {
        for iy in 0..dims.height {
            for ix in 0..dims.width {
                let p = (b * dims.height + iy) * dims.width + ix;
                let col = &cols[p * taps..(p + 1) * taps];
                for ky in 0..KERNEL {
                    let Some(oy) = target(iy, ky, out_dims.height) else {
                        continue;
                    };
                    for kx in 0..KERNEL {
                        let Some(ox) = target(ix, kx, out_dims.width) else {
                            continue;
                        };
                        let o = ((b * out_dims.height + oy) * out_dims.width + ox) * cout;
                        for co in 0..cout {
                            y[o + co] += col[(co * KERNEL + ky) * KERNEL + kx];
                        }
                    }
                }
            }
        }
    }
    let bias_name = format!("{name}.bias");
    if params.contains(&bias_name) {
        let bias = params.get(&bias_name)?.data();
        for px in y.chunks_exact_mut(cout) {
            for (v, b) in px.iter_mut().zip(bias) {
                *v += *b;
            }
        }
    }
    Ok((y, out_dims))
}

pub fn conv_transpose_backward<T: Real>(
    params: &ParamSet<T>,
    name: &str,
    x: &[T],
    dims: MapDims,
    dy: &[T],
    grads: &mut Grads<T>,
    need_dx: bool,
) -> Result<Option<Vec<T>>> {
    let (cin, cout) = kernel_dims(params, name)?;
    let (oh, ow) = (dims.height * STRIDE, dims.width * STRIDE);
    if dy.len() != dims.batch * oh * ow * cout {
        return Err(shape_err!("{name}: transposed-conv backward size mismatch"));
    }
    let pixels = dims.batch * dims.height * dims.width;
    let taps = cout * KERNEL * KERNEL;
    // Gather output gradients back onto the column layout used in forward.
    let mut dcols = vec![T::zero(); pixels * taps];
    for b in 0..dims.batch {
        for iy in 0..dims.height {
            for ix in 0..dims.width {
                let p = (b * dims.height + iy) * dims.width + ix;
                let col = &mut dcols[p * taps..(p + 1) * taps];
                for ky in 0..KERNEL {
                    let Some(oy) = target(iy, ky, oh) else {
                        continue;
                    };
                    for kx in 0..KERNEL {
                        let Some(ox) = target(ix, kx, ow) else {
                            continue;
                        };
                        let o = ((b * oh + oy) * ow + ox) * cout;
                        for co in 0..cout {
                            col[(co * KERNEL + ky) * KERNEL + kx] = dy[o + co];
                        }
                    }
                }
            }
        }
    }
    let wname = format!("{name}.weight");
    {
        let gw = grads.slot(&wname, cin * taps);
        gemm(
            T::one(),
            MatRef::new(x, pixels, cin).t(),
            MatRef::new(&dcols, pixels, taps),
            T::one(),
            MatMut::new(gw, cin, taps),
        );
    }
    let bias_name = format!("{name}.bias");
    if params.contains(&bias_name) {
        let gb = grads.slot(&bias_name, cout);
        for px in dy.chunks_exact(cout) {
            for (g, d) in gb.iter_mut().zip(px) {
                *g += *d;
            }
        }
    }
    if !need_dx {
        return Ok(None);
    }
    let w = params.get(&wname)?;
    let mut dx = vec![T::zero(); pixels * cin];
    gemm(
        T::one(),
        MatRef::new(&dcols, pixels, taps),
        MatRef::new(w.data(), cin, taps).t(),
        T::zero(),
        MatMut::new(&mut dx, pixels, cin),
    );
    Ok(Some(dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scatter-form definition straight from the transposed-conv formula, NCHW indexing.
    fn naive(x: &[f64], w: &[f64], b: &[f64], dims: MapDims, cout: usize) -> Vec<f64> {
        let (oh, ow) = (dims.height * 2, dims.width * 2);
        let mut y = vec![0.0; dims.batch * oh * ow * cout];
        for n in 0..dims.batch {
            for ci in 0..dims.channels {
                for iy in 0..dims.height {
                    for ix in 0..dims.width {
                        let xv = x[((n * dims.height + iy) * dims.width + ix) * dims.channels + ci];
                        for co in 0..cout {
                            for ky in 0..4 {
                                for kx in 0..4 {
                                    let oy = (iy * 2 + ky) as isize - 1;
                                    let ox = (ix * 2 + kx) as isize - 1;
                                    if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                        continue;
                                    }
                                    let wv = w[((ci * cout + co) * 4 + ky) * 4 + kx];
                                    y[((n * oh + oy as usize) * ow + ox as usize) * cout + co] +=
                                        xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        for px in y.chunks_exact_mut(cout) {
            for (v, bv) in px.iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    fn setup(seed: u64) -> (ParamSet<f64>, Vec<f64>, MapDims, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = MapDims {
            batch: 2,
            height: 3,
            width: 2,
            channels: 3,
        };
        let cout = 2;
        let mut p = ParamSet::new();
        let w: Vec<f64> = (0..3 * cout * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.insert("up.weight", Tensor::new(vec![3, cout, 4, 4], w).unwrap());
        p.insert("up.bias", Tensor::new(vec![cout], b).unwrap());
        let x: Vec<f64> = (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        (p, x, dims, cout)
    }

    #[test]
    fn doubles_spatial_size_and_matches_definition() {
        let (p, x, dims, cout) = setup(1);
        let (y, od) = conv_transpose(&p, "up", &x, dims).unwrap();
        assert_eq!((od.height, od.width, od.channels), (6, 4, cout));
        let want = naive(
            &x,
            p.get("up.weight").unwrap().data(),
            p.get("up.bias").unwrap().data(),
            dims,
            cout,
        );
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (p, x, dims, _) = setup(2);
        let (y0, _) = conv_transpose(&p, "up", &x, dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let proj: Vec<f64> = (0..y0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &ParamSet<f64>, x: &[f64]| -> f64 {
            let (y, _) = conv_transpose(p, "up", x, dims).unwrap();
            y.iter().zip(&proj).map(|(a, b)| a * b).sum()
        };
        let mut grads = Grads::new();
        let dx = conv_transpose_backward(&p, "up", &x, dims, &proj, &mut grads, true)
            .unwrap()
            .unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (loss(&p, &up) - loss(&p, &dn)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6, "dx[{i}]");
        }
        let gw = grads.get("up.weight").unwrap().to_vec();
        for i in 0..gw.len() {
            let (mut up, mut dn) = (p.clone(), p.clone());
            up.get_mut("up.weight").unwrap().data_mut()[i] += h;
            dn.get_mut("up.weight").unwrap().data_mut()[i] -= h;
            let fd = (loss(&up, &x) - loss(&dn, &x)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-6, "dw[{i}]");
        }
    }
}
