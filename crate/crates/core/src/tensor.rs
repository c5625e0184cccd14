//! Dense real tensors, binary spike tensors and the raw kernels the tape is
//! built on. Storage is `f64` throughout so gradient checks can run at tight
//! tolerances.

use crate::error::{Error, Result};

/// Dense real-valued tensor in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        Ok(Tensor {
            shape: vec![m, n],
            data: kernels::matmul(&self.data, &other.data, m, k, n),
            requires_grad: false,
        })
    }
}

/// Binary tensor with a leading time axis. One byte per element.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpikeTensor {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl SpikeTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("spike tensor", &shape, &[data.len()]));
        }
        if let Some((index, &v)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NotBinary {
                index,
                value: f64::from(v),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0; numel(shape)],
        }
    }

    /// Converts a real tensor, rejecting anything other than exact 0.0 / 1.0.
    pub fn from_real(t: &Tensor) -> Result<Self> {
        let mut data = Vec::with_capacity(t.numel());
        for (index, &v) in t.data().iter().enumerate() {
            if v == 0.0 {
                data.push(0);
            } else if v == 1.0 {
                data.push(1);
            } else {
                return Err(Error::NotBinary { index, value: v });
            }
        }
        Ok(Self {
            shape: t.shape().to_vec(),
            data,
        })
    }

    pub fn to_real(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Leading time dimension.
    pub fn timesteps(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of elements in one timestep slice.
    pub fn step_len(&self) -> usize {
        numel(&self.shape[1..])
    }

    pub fn step(&self, t: usize) -> &[u8] {
        let n = self.step_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn step_mut(&mut self, t: usize) -> &mut [u8] {
        let n = self.step_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn firing_rate(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.data.len() as f64
        }
    }

    pub fn set(&mut self, index: usize, on: bool) {
        self.data[index] = u8::from(on);
    }
}

/// Geometry of a batched 2-D cross-correlation with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height(), self.out_width()]
    }
}

/// Flat-slice kernels shared by the eager API and the tape.
pub(crate) mod kernels {
    use super::ConvGeom;

    /// `a[m,k] · b[k,n]`, skipping zero entries of `a` (spike inputs are sparse).
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    /// `aᵀ · g` where `a` is `[m,k]` and `g` is `[m,n]`; result `[k,n]`.
    pub fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &gv) in orow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
        out
    }

    /// `g · bᵀ` where `g` is `[m,n]` and `b` is `[k,n]`; result `[m,k]`.
    pub fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// Valid (kernel offset, output offset) pairs along one axis, per input index.
    fn tap_table(len: usize, g: &ConvGeom, out_len: usize) -> Vec<Vec<(usize, usize)>> {
        (0..len)
            .map(|i| {
                (0..g.kernel)
                    .filter_map(|k| {
                        let num = (i + g.pad).checked_sub(k)?;
                        (num % g.stride == 0 && num / g.stride < out_len).then_some((k, num / g.stride))
                    })
                    .collect()
            })
            .collect()
    }

    /// `w[o][c][ky][kx]` → `[c][ky][kx][o]`, so one tap's output channels are contiguous.
    fn weight_channels_last(w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (co, rest) = (g.out_channels, g.in_channels * g.kernel * g.kernel);
        let mut wt = vec![0.0; w.len()];
        for o in 0..co {
            for r in 0..rest {
                wt[r * co + o] = w[o * rest + r];
            }
        }
        wt
    }

    /// Cross-correlation written in scatter form so zero inputs cost nothing.
    pub fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let plane = oh * ow;
        let (co, k, kk) = (g.out_channels, g.kernel, g.kernel * g.kernel);
        let wt = weight_channels_last(w, g);
        let mut out = vec![0.0; g.batch * co * plane];
        let mut acc = vec![0.0; plane * co];
        let rows = tap_table(g.height, g, oh);
        let cols = tap_table(g.width, g, ow);
        for n in 0..g.batch {
            match b {
                Some(b) => acc.chunks_exact_mut(co).for_each(|r| r.copy_from_slice(b)),
                None => acc.iter_mut().for_each(|v| *v = 0.0),
            }
            for c in 0..g.in_channels {
                for (iy, ty) in rows.iter().enumerate() {
                    let xrow = &x[((n * g.in_channels + c) * g.height + iy) * g.width..][..g.width];
                    for (ix, &xv) in xrow.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        for &(ky, oy) in ty {
                            for &(kx, ox) in &cols[ix] {
                                let wrow = &wt[(c * kk + ky * k + kx) * co..][..co];
                                let arow = &mut acc[(oy * ow + ox) * co..][..co];
                                if xv == 1.0 {
                                    arow.iter_mut().zip(wrow).for_each(|(a, w)| *a += w);
                                } else {
                                    arow.iter_mut().zip(wrow).for_each(|(a, w)| *a += xv * w);
                                }
                            }
                        }
                    }
                }
            }
            let dst = &mut out[n * co * plane..][..co * plane];
            for p in 0..plane {
                for o in 0..co {
                    dst[o * plane + p] = acc[p * co + o];
                }
            }
        }
        out
    }

    /// Returns `(grad_x, grad_w, grad_b)`; `grad_x` only when requested.
    pub fn conv2d_backward(
        x: &[f64],
        w: &[f64],
        gout: &[f64],
        g: &ConvGeom,
        need_gx: bool,
    ) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let (oh, ow) = (g.out_height(), g.out_width());
        let plane = oh * ow;
        let (co, k, kk) = (g.out_channels, g.kernel, g.kernel * g.kernel);
        let wt = weight_channels_last(w, g);
        let mut gwt = vec![0.0; w.len()];
        let mut gb = vec![0.0; co];
        let mut gx = need_gx.then(|| vec![0.0; x.len()]);
        for n in 0..g.batch {
            for o in 0..co {
                let base = (n * co + o) * plane;
                gb[o] += gout[base..base + plane].iter().sum::<f64>();
            }
        }
        let mut gt = vec![0.0; plane * co];
        let rows = tap_table(g.height, g, oh);
        let cols = tap_table(g.width, g, ow);
        for n in 0..g.batch {
            let src = &gout[n * co * plane..][..co * plane];
            for p in 0..plane {
                for o in 0..co {
                    gt[p * co + o] = src[o * plane + p];
                }
            }
            for c in 0..g.in_channels {
                for (iy, ty) in rows.iter().enumerate() {
                    for (ix, tx) in cols.iter().enumerate() {
                        let xi = ((n * g.in_channels + c) * g.height + iy) * g.width + ix;
                        let xv = x[xi];
                        if xv == 0.0 && gx.is_none() {
                            continue;
                        }
                        let mut acc = 0.0;
                        for &(ky, oy) in ty {
                            for &(kx, ox) in tx {
                                let wi = (c * kk + ky * k + kx) * co;
                                let grow = &gt[(oy * ow + ox) * co..][..co];
                                if gx.is_some() {
                                    for (wv, gv) in wt[wi..wi + co].iter().zip(grow) {
                                        acc += wv * gv;
                                    }
                                }
                                if xv != 0.0 {
                                    for (gw, gv) in gwt[wi..wi + co].iter_mut().zip(grow) {
                                        *gw += xv * gv;
                                    }
                                }
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            gx[xi] = acc;
                        }
                    }
                }
            }
        }
        let rest = g.in_channels * kk;
        let mut gw = vec![0.0; w.len()];
        for o in 0..co {
            for r in 0..rest {
                gw[o * rest + r] = gwt[r * co + o];
            }
        }
        (gx, gw, gb)
    }
}
