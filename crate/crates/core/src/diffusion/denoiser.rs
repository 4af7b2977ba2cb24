//! Conditional noise predictor: a two-scale convolutional network with one
//! skip connection. Every hidden activation is modulated per channel (FiLM)
//! by a linear map of the text conditioning and a sinusoidal timestep
//! embedding.
//!
//! ```text
//! x -> c0 -> c1 --------------------------+
//!             |                           |
//!             avgpool -> c2 -> c3 -> up --cat -> c4 -> c5 -> eps
//! ```

use crate::image::CHANNELS;
use crate::nn::layers::{avgpool2, avgpool2_backward, upsample2, upsample2_backward, Conv2d, Linear};
use crate::rng::Rng;

pub const TIME_DIM: usize = 32;
const HIDDEN: usize = 5;

pub fn timestep_embedding(t: usize) -> Vec<f32> {
    let half = TIME_DIM / 2;
    let mut out = Vec::with_capacity(TIME_DIM);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out.push((t as f64 * freq).sin() as f32);
    }
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out.push((t as f64 * freq).cos() as f32);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub channels: usize,
    pub cond_dim: usize,
    pub film: Linear,
    pub convs: [Conv2d; 6],
}

pub struct DenoiserTrace {
    h: usize,
    w: usize,
    emb: Vec<f32>,
    film: Vec<f32>,
    /// Input of each conv layer.
    inputs: [Vec<f32>; 6],
    /// Raw outputs of the modulated convs.
    pre: [Vec<f32>; HIDDEN],
    /// Activations after modulation and ReLU.
    post: [Vec<f32>; HIDDEN],
}

impl Denoiser {
    pub fn new(channels: usize, cond_dim: usize, rng: &mut Rng) -> Self {
        let c = channels;
        let mut out = Conv2d::new(c, CHANNELS, rng);
        out.weight.iter_mut().for_each(|w| *w *= 0.1);
        let film_out: usize = (0..HIDDEN).map(|l| 2 * Self::width(c, l)).sum();
        Self {
            channels,
            cond_dim,
            film: Linear::zeros(cond_dim + TIME_DIM, film_out),
            convs: [
                Conv2d::new(CHANNELS, c, rng),
                Conv2d::new(c, c, rng),
                Conv2d::new(c, 2 * c, rng),
                Conv2d::new(2 * c, 2 * c, rng),
                Conv2d::new(3 * c, c, rng),
                out,
            ],
        }
    }

    fn width(c: usize, layer: usize) -> usize {
        if layer == 2 || layer == 3 {
            2 * c
        } else {
            c
        }
    }

    /// Offset of layer `l`'s `(gamma, beta)` block in the FiLM output.
    fn film_offset(&self, l: usize) -> usize {
        (0..l).map(|k| 2 * Self::width(self.channels, k)).sum()
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = vec![&self.film.weight, &self.film.bias];
        for c in &self.convs {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = vec![&mut self.film.weight, &mut self.film.bias];
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v
    }

    fn modulate(&self, film: &[f32], l: usize, a: &[f32]) -> Vec<f32> {
        let n = Self::width(self.channels, l);
        let off = self.film_offset(l);
        let hw = a.len() / n;
        let mut out = a.to_vec();
        for ch in 0..n {
            let (g, b) = (1.0 + film[off + ch], film[off + n + ch]);
            for v in &mut out[ch * hw..(ch + 1) * hw] {
                *v = (*v * g + b).max(0.0);
            }
        }
        out
    }

    /// Gradient through modulation and ReLU of layer `l`: returns the
    /// gradient w.r.t. the raw conv output and writes FiLM gradients.
    fn modulate_backward(&self, tr: &DenoiserTrace, l: usize, g: &[f32], gfilm: &mut [f32]) -> Vec<f32> {
        let n = Self::width(self.channels, l);
        let off = self.film_offset(l);
        let (a, out) = (&tr.pre[l], &tr.post[l]);
        let hw = a.len() / n;
        let mut ga = vec![0.0f32; a.len()];
        for ch in 0..n {
            let scale = 1.0 + tr.film[off + ch];
            let (mut sg, mut sb) = (0.0f32, 0.0f32);
            for i in ch * hw..(ch + 1) * hw {
                if out[i] > 0.0 {
                    sg += g[i] * a[i];
                    sb += g[i];
                    ga[i] = g[i] * scale;
                }
            }
            gfilm[off + ch] = sg;
            gfilm[off + n + ch] = sb;
        }
        ga
    }

    /// Predicted noise for planar `x` (`3 x h x w`, `h` and `w` even).
    pub fn forward(&self, x: &[f32], h: usize, w: usize, t: usize, cond: &[f32]) -> (Vec<f32>, DenoiserTrace) {
        debug_assert_eq!(cond.len(), self.cond_dim);
        debug_assert!(h % 2 == 0 && w % 2 == 0);
        let c = self.channels;
        let (h2, w2) = (h / 2, w / 2);
        let mut emb = cond.to_vec();
        emb.extend(timestep_embedding(t));
        let film = self.film.forward(&emb);
        let dims = [(h, w), (h, w), (h2, w2), (h2, w2), (h, w)];
        let mut inputs: [Vec<f32>; 6] = Default::default();
        let mut pre: [Vec<f32>; HIDDEN] = Default::default();
        let mut post: [Vec<f32>; HIDDEN] = Default::default();
        inputs[0] = x.to_vec();
        for l in 0..HIDDEN {
            let (lh, lw) = dims[l];
            pre[l] = self.convs[l].forward(&inputs[l], lh, lw);
            post[l] = self.modulate(&film, l, &pre[l]);
            inputs[l + 1] = match l {
                1 => avgpool2(&post[1], c, h, w),
                3 => {
                    let mut cat = upsample2(&post[3], 2 * c, h2, w2);
                    cat.extend_from_slice(&post[1]);
                    cat
                }
                _ => post[l].clone(),
            };
        }
        let y = self.convs[5].forward(&inputs[5], h, w);
        (
            y,
            DenoiserTrace {
                h,
                w,
                emb,
                film,
                inputs,
                pre,
                post,
            },
        )
    }

    pub fn predict(&self, x: &[f32], h: usize, w: usize, t: usize, cond: &[f32]) -> Vec<f32> {
        self.forward(x, h, w, t, cond).0
    }

    /// Backpropagates `gout`. Parameter gradients (in [`Self::params`] order)
    /// are accumulated when `grads` is given. Returns the gradient with
    /// respect to the conditioning vector.
    pub fn backward(&self, tr: &DenoiserTrace, gout: &[f32], mut grads: Option<&mut [Vec<f32>]>) -> Vec<f32> {
        let (h, w) = (tr.h, tr.w);
        let (h2, w2) = (h / 2, w / 2);
        let c = self.channels;
        let mut gfilm = vec![0.0f32; tr.film.len()];
        let mut conv_back = |l: usize, lh: usize, lw: usize, g: &[f32], want: bool| {
            let pg = grads.as_deref_mut().map(|gs| {
                let (a, b) = gs[2 + 2 * l..4 + 2 * l].split_at_mut(1);
                (&mut a[0][..], &mut b[0][..])
            });
            self.convs[l].backward(&tr.inputs[l], lh, lw, g, pg, want)
        };
        let g5 = conv_back(5, h, w, gout, true).unwrap();
        let g4 = self.modulate_backward(tr, 4, &g5, &mut gfilm);
        let gcat = conv_back(4, h, w, &g4, true).unwrap();
        let (gup, gskip) = gcat.split_at(2 * c * h * w);
        let g3 = upsample2_backward(gup, 2 * c, h2, w2);
        let g3 = self.modulate_backward(tr, 3, &g3, &mut gfilm);
        let g2 = conv_back(3, h2, w2, &g3, true).unwrap();
        let g2 = self.modulate_backward(tr, 2, &g2, &mut gfilm);
        let gp = conv_back(2, h2, w2, &g2, true).unwrap();
        let mut g1 = avgpool2_backward(&gp, c, h, w);
        for (a, b) in g1.iter_mut().zip(gskip) {
            *a += b;
        }
        let g1 = self.modulate_backward(tr, 1, &g1, &mut gfilm);
        let g0 = conv_back(1, h, w, &g1, true).unwrap();
        let g0 = self.modulate_backward(tr, 0, &g0, &mut gfilm);
        conv_back(0, h, w, &g0, false);
        let pg = grads.map(|gs| {
            let (a, b) = gs[0..2].split_at_mut(1);
            (&mut a[0][..], &mut b[0][..])
        });
        let gemb = self.film.backward(&tr.emb, &gfilm, pg, true).unwrap();
        gemb[..self.cond_dim].to_vec()
    }
}
