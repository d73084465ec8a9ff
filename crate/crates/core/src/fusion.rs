//! Cross-modal multi-head attention between the graph vector and the text
//! vector. Every head attends over exactly two slots (graph, text).

use crate::numerics::{axpy, dot, softmax, softmax_backward, ParamTensor};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FusionError {
    #[error("{what}: expected width {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Projection families of one head, each `d x d_h`.
pub struct HeadParams {
    pub w_q_g: ParamTensor,
    pub w_k_g: ParamTensor,
    pub w_v_g: ParamTensor,
    pub w_q_text: ParamTensor,
    pub w_k_text: ParamTensor,
    pub w_v_text: ParamTensor,
}

impl HeadParams {
    fn new<R: Rng + ?Sized>(h: usize, d: usize, d_h: usize, rng: &mut R) -> Self {
        let mk = |suffix: &str, rng: &mut R| ParamTensor::xavier(format!("fusion.head{h}.{suffix}"), d, d_h, rng);
        Self {
            w_q_g: mk("w_q_g", rng),
            w_k_g: mk("w_k_g", rng),
            w_v_g: mk("w_v_g", rng),
            w_q_text: mk("w_q_text", rng),
            w_k_text: mk("w_k_text", rng),
            w_v_text: mk("w_v_text", rng),
        }
    }

    fn all(&self) -> [&ParamTensor; 6] {
        [&self.w_q_g, &self.w_k_g, &self.w_v_g, &self.w_q_text, &self.w_k_text, &self.w_v_text]
    }

    fn all_mut(&mut self) -> [&mut ParamTensor; 6] {
        [
            &mut self.w_q_g,
            &mut self.w_k_g,
            &mut self.w_v_g,
            &mut self.w_q_text,
            &mut self.w_k_text,
            &mut self.w_v_text,
        ]
    }
}

pub struct CrossModalParams {
    pub heads: Vec<HeadParams>,
    /// `(H * d_h) x d`.
    pub w_o: ParamTensor,
}

struct HeadCache {
    q: Vec<f64>,
    k: [Vec<f64>; 2],
    v: [Vec<f64>; 2],
    attn: Vec<f64>,
}

pub struct FusionCache {
    h_g: Vec<f64>,
    h_text: Vec<f64>,
    heads: Vec<HeadCache>,
    o_concat: Vec<f64>,
}

impl FusionCache {
    /// Attention weights (graph slot, text slot) per head.
    pub fn attention(&self) -> Vec<[f64; 2]> {
        self.heads.iter().map(|h| [h.attn[0], h.attn[1]]).collect()
    }

    /// Head outputs before the output projection.
    pub fn head_outputs(&self) -> Vec<&[f64]> {
        let d_h = self.o_concat.len() / self.heads.len().max(1);
        self.o_concat.chunks(d_h).collect()
    }

    pub fn values(&self, head: usize) -> (&[f64], &[f64]) {
        (&self.heads[head].v[0], &self.heads[head].v[1])
    }
}

impl CrossModalParams {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, d_h: usize, rng: &mut R) -> Self {
        assert!(heads >= 1 && d_h >= 1);
        Self {
            heads: (0..heads).map(|h| HeadParams::new(h, d, d_h, rng)).collect(),
            w_o: ParamTensor::xavier("fusion.w_o", heads * d_h, d, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.w_o.value.cols()
    }

    pub fn head_width(&self) -> usize {
        self.heads[0].w_q_g.value.cols()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut v: Vec<&ParamTensor> = self.heads.iter().flat_map(|h| h.all()).collect();
        v.push(&self.w_o);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v: Vec<&mut ParamTensor> = self.heads.iter_mut().flat_map(|h| h.all_mut()).collect();
        v.push(&mut self.w_o);
        v
    }

    pub fn forward(&self, h_g: &[f64], h_text: &[f64]) -> Result<(Vec<f64>, FusionCache), FusionError> {
        let d = self.width();
        for (what, v) in [("graph embedding", h_g), ("text embedding", h_text)] {
            if v.len() != d {
                return Err(FusionError::ShapeMismatch { what, expected: d, got: v.len() });
            }
        }
        let scale = 1.0 / (self.head_width() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads.len());
        let mut o_concat = Vec::with_capacity(self.heads.len() * self.head_width());
        for hp in &self.heads {
            let mut q = hp.w_q_g.value.t_matvec(h_g);
            axpy(&mut q, 1.0, &hp.w_q_text.value.t_matvec(h_text));
            let k = [hp.w_k_g.value.t_matvec(h_g), hp.w_k_text.value.t_matvec(h_text)];
            let v = [hp.w_v_g.value.t_matvec(h_g), hp.w_v_text.value.t_matvec(h_text)];
            let attn = softmax(&[dot(&q, &k[0]) * scale, dot(&q, &k[1]) * scale]);
            let o: Vec<f64> = v[0].iter().zip(&v[1]).map(|(a, b)| attn[0] * a + attn[1] * b).collect();
            o_concat.extend_from_slice(&o);
            heads.push(HeadCache { q, k, v, attn });
        }
        let h_f = self.w_o.value.t_matvec(&o_concat);
        Ok((
            h_f,
            FusionCache {
                h_g: h_g.to_vec(),
                h_text: h_text.to_vec(),
                heads,
                o_concat,
            },
        ))
    }

    /// Accumulates parameter gradients; returns `(d h_g, d h_text)`.
    pub fn backward(&mut self, cache: &FusionCache, d_hf: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d_h = self.head_width();
        let scale = 1.0 / (d_h as f64).sqrt();
        self.w_o.grad.add_outer(&cache.o_concat, d_hf);
        let d_concat = self.w_o.value.matvec(d_hf);
        let mut dg = vec![0.0; cache.h_g.len()];
        let mut dt = vec![0.0; cache.h_text.len()];
        for ((hp, hc), d_o) in self.heads.iter_mut().zip(&cache.heads).zip(d_concat.chunks(d_h)) {
            let d_attn = [dot(d_o, &hc.v[0]), dot(d_o, &hc.v[1])];
            let ds = softmax_backward(&hc.attn, &d_attn);
            let mut dq = vec![0.0; d_h];
            axpy(&mut dq, ds[0] * scale, &hc.k[0]);
            axpy(&mut dq, ds[1] * scale, &hc.k[1]);
            let dk: Vec<Vec<f64>> = ds.iter().map(|s| hc.q.iter().map(|q| q * s * scale).collect()).collect();
            let dv: Vec<Vec<f64>> = hc.attn.iter().map(|a| d_o.iter().map(|g| g * a).collect()).collect();

            let apply = |w: &mut ParamTensor, x: &[f64], dz: &[f64], dx: &mut [f64]| {
                w.grad.add_outer(x, dz);
                axpy(dx, 1.0, &w.value.matvec(dz));
            };
            apply(&mut hp.w_q_g, &cache.h_g, &dq, &mut dg);
            apply(&mut hp.w_k_g, &cache.h_g, &dk[0], &mut dg);
            apply(&mut hp.w_v_g, &cache.h_g, &dv[0], &mut dg);
            apply(&mut hp.w_q_text, &cache.h_text, &dq, &mut dt);
            apply(&mut hp.w_k_text, &cache.h_text, &dk[1], &mut dt);
            apply(&mut hp.w_v_text, &cache.h_text, &dv[1], &mut dt);
        }
        (dg, dt)
    }
}

pub fn cross_modal_attend(h_g: &[f64], h_text: &[f64], params: &CrossModalParams) -> Result<Vec<f64>, FusionError> {
    Ok(params.forward(h_g, h_text)?.0)
}
