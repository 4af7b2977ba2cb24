use rand::Rng;
use rand_distr::{Distribution, Normal};

/// 3x3 convolution, stride 1, zero padding 1, on planar `c x h x w` buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    /// `[cout][cin][3][3]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[inline]
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi)
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (cin * 9) as f32).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            cin,
            cout,
            weight: (0..cout * cin * 9).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; cout],
        }
    }

    pub fn forward(&self, x: &[f32], h: usize, w: usize) -> Vec<f32> {
        let hw = h * w;
        debug_assert_eq!(x.len(), self.cin * hw);
        let mut out = vec![0.0f32; self.cout * hw];
        for o in 0..self.cout {
            let op = &mut out[o * hw..(o + 1) * hw];
            op.fill(self.bias[o]);
            for i in 0..self.cin {
                let ip = &x[i * hw..(i + 1) * hw];
                let wk = &self.weight[(o * self.cin + i) * 9..][..9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = tap_range(w, dx);
                        let wv = wk[ky * 3 + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut op[y * w + x0..y * w + x1];
                            let irow = &ip[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                            for (a, b) in orow.iter_mut().zip(irow) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Backpropagates `gout`. Weight/bias gradients are accumulated into
    /// `grads` when given; the input gradient is returned when `want_input`.
    pub fn backward(
        &self,
        x: &[f32],
        h: usize,
        w: usize,
        gout: &[f32],
        grads: Option<(&mut [f32], &mut [f32])>,
        want_input: bool,
    ) -> Option<Vec<f32>> {
        let hw = h * w;
        if let Some((gw, gb)) = grads {
            for o in 0..self.cout {
                let go = &gout[o * hw..(o + 1) * hw];
                gb[o] += go.iter().sum::<f32>();
                for i in 0..self.cin {
                    let ip = &x[i * hw..(i + 1) * hw];
                    for ky in 0..3 {
                        let dy = ky as isize - 1;
                        let (y0, y1) = tap_range(h, dy);
                        for kx in 0..3 {
                            let dx = kx as isize - 1;
                            let (x0, x1) = tap_range(w, dx);
                            let mut acc = 0.0f32;
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let grow = &go[y * w + x0..y * w + x1];
                                let irow = &ip[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                                acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f32>();
                            }
                            gw[((o * self.cin + i) * 3 + ky) * 3 + kx] += acc;
                        }
                    }
                }
            }
        }
        if !want_input {
            return None;
        }
        let mut gin = vec![0.0f32; self.cin * hw];
        for o in 0..self.cout {
            let go = &gout[o * hw..(o + 1) * hw];
            for i in 0..self.cin {
                let gi = &mut gin[i * hw..(i + 1) * hw];
                let wk = &self.weight[(o * self.cin + i) * 9..][..9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = tap_range(w, dx);
                        let wv = wk[ky * 3 + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &go[y * w + x0..y * w + x1];
                            let irow = &mut gi[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                            for (a, b) in irow.iter_mut().zip(grow) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
        Some(gin)
    }
}

/// Fully connected layer, weight stored `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub nin: usize,
    pub nout: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(nin: usize, nout: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / nin as f32).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            nin,
            nout,
            weight: (0..nin * nout).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; nout],
        }
    }

    pub fn zeros(nin: usize, nout: usize) -> Self {
        Self {
            nin,
            nout,
            weight: vec![0.0; nin * nout],
            bias: vec![0.0; nout],
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        self.weight
            .chunks_exact(self.nin)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>())
            .collect()
    }

    pub fn backward(
        &self,
        x: &[f32],
        gout: &[f32],
        grads: Option<(&mut [f32], &mut [f32])>,
        want_input: bool,
    ) -> Option<Vec<f32>> {
        if let Some((gw, gb)) = grads {
            for (o, &g) in gout.iter().enumerate() {
                gb[o] += g;
                if g != 0.0 {
                    for (a, v) in gw[o * self.nin..(o + 1) * self.nin].iter_mut().zip(x) {
                        *a += g * v;
                    }
                }
            }
        }
        want_input.then(|| {
            let mut gin = vec![0.0f32; self.nin];
            for (row, &g) in self.weight.chunks_exact(self.nin).zip(gout) {
                for (a, w) in gin.iter_mut().zip(row) {
                    *a += g * w;
                }
            }
            gin
        })
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        *v = v.max(0.0);
    }
}

/// 2x2 max pool (floor). Returns output and the flat argmax of each window.
pub fn maxpool2(x: &[f32], c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut bi = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > best {
                        best = x[idx];
                        bi = idx;
                    }
                }
                out.push(best);
                arg.push(bi as u32);
            }
        }
    }
    (out, arg)
}

pub fn avgpool2(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| x[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                out.push(0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of a `c x h x w` buffer.
pub fn upsample2(x: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * oh + y) * ow + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Gradient of [`upsample2`]: sums each 2x2 block of `g` (`c x 2h x 2w`).
pub fn upsample2_backward(g: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    avgpool2(g, c, 2 * h, 2 * w).into_iter().map(|v| 4.0 * v).collect()
}

pub fn avgpool2_backward(g: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gin = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * g[(ch * oh + y) * ow + xx];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    gin[(ch * h + 2 * y + dy) * w + 2 * xx + dx] = v;
                }
            }
        }
    }
    gin
}
