//! Element-wise gate between the fused embedding and the prediction
//! embedding, followed by the linear property head.
//!
//! ```text
//! g   = sigmoid(F_s h_f + b_s + F_g h_icl + b_g)
//! h_u = sigmoid(g * h_f + (1 - g) * h_icl)
//! y   = W_out h_u + b_out
//! ```

use crate::numerics::{axpy, sigmoid, ParamTensor};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MoeError {
    #[error("{what}: expected width {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

fn check(what: &'static str, v: &[f64], expected: usize) -> Result<(), MoeError> {
    if v.len() == expected {
        Ok(())
    } else {
        Err(MoeError::ShapeMismatch { what, expected, got: v.len() })
    }
}

/// Gate branch fed by the prediction embedding; absent when that input is
/// ablated away.
pub struct IclGate {
    pub f_g: ParamTensor,
    pub bias: ParamTensor,
}

pub struct GateParams {
    pub f_s: ParamTensor,
    pub f_s_bias: ParamTensor,
    pub icl: Option<IclGate>,
    /// `c x d`.
    pub w_out: ParamTensor,
    pub bias_out: ParamTensor,
}

pub struct GateCache {
    h_f: Vec<f64>,
    h_icl: Vec<f64>,
    g: Vec<f64>,
    h_u: Vec<f64>,
}

impl GateCache {
    pub fn gate(&self) -> &[f64] {
        &self.g
    }

    pub fn h_u(&self) -> &[f64] {
        &self.h_u
    }
}

impl GateParams {
    pub fn new<R: Rng + ?Sized>(d: usize, c: usize, with_icl: bool, rng: &mut R) -> Self {
        let f_s = ParamTensor::xavier("moe.f_s", d, d, rng);
        let icl = with_icl.then(|| IclGate {
            f_g: ParamTensor::xavier("moe.f_g", d, d, rng),
            bias: ParamTensor::zeros("moe.f_g.bias", 1, d),
        });
        Self {
            f_s,
            f_s_bias: ParamTensor::zeros("moe.f_s.bias", 1, d),
            icl,
            w_out: ParamTensor::xavier("moe.w_out", c, d, rng),
            bias_out: ParamTensor::zeros("moe.bias_out", 1, c),
        }
    }

    pub fn width(&self) -> usize {
        self.f_s.value.rows()
    }

    pub fn outputs(&self) -> usize {
        self.w_out.value.rows()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut v = vec![&self.f_s, &self.f_s_bias];
        if let Some(icl) = &self.icl {
            v.extend([&icl.f_g, &icl.bias]);
        }
        v.extend([&self.w_out, &self.bias_out]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = vec![&mut self.f_s, &mut self.f_s_bias];
        if let Some(icl) = &mut self.icl {
            v.extend([&mut icl.f_g, &mut icl.bias]);
        }
        v.extend([&mut self.w_out, &mut self.bias_out]);
        v
    }

    /// `h_icl` is ignored (treated as zero) when the ICL branch is absent.
    pub fn gate_fuse(&self, h_f: &[f64], h_icl: &[f64]) -> Result<GateCache, MoeError> {
        let d = self.width();
        check("fused embedding", h_f, d)?;
        let h_icl = match &self.icl {
            Some(_) => {
                check("prediction embedding", h_icl, d)?;
                h_icl.to_vec()
            }
            None => vec![0.0; d],
        };
        let mut z = self.f_s.value.matvec(h_f);
        axpy(&mut z, 1.0, self.f_s_bias.value.as_slice());
        if let Some(icl) = &self.icl {
            axpy(&mut z, 1.0, &icl.f_g.value.matvec(&h_icl));
            axpy(&mut z, 1.0, icl.bias.value.as_slice());
        }
        let g: Vec<f64> = z.into_iter().map(sigmoid).collect();
        let h_u = (0..d).map(|i| sigmoid(h_icl[i] + g[i] * (h_f[i] - h_icl[i]))).collect();
        Ok(GateCache {
            h_f: h_f.to_vec(),
            h_icl,
            g,
            h_u,
        })
    }

    pub fn predict(&self, h_u: &[f64]) -> Result<Vec<f64>, MoeError> {
        check("gated embedding", h_u, self.width())?;
        let mut y = self.w_out.value.matvec(h_u);
        axpy(&mut y, 1.0, self.bias_out.value.as_slice());
        Ok(y)
    }

    /// Backpropagates `dy` through the head and gate; returns
    /// `(d h_f, d h_icl)`.
    pub fn backward(&mut self, cache: &GateCache, dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.width();
        self.w_out.grad.add_outer(dy, &cache.h_u);
        axpy(self.bias_out.grad.as_mut_slice(), 1.0, dy);
        let dh_u = self.w_out.value.t_matvec(dy);
        let mut dh_f = vec![0.0; d];
        let mut dh_icl = vec![0.0; d];
        let mut dz = vec![0.0; d];
        for i in 0..d {
            let (g, u) = (cache.g[i], cache.h_u[i]);
            let dm = dh_u[i] * u * (1.0 - u);
            dh_f[i] = dm * g;
            dh_icl[i] = dm * (1.0 - g);
            dz[i] = dm * (cache.h_f[i] - cache.h_icl[i]) * g * (1.0 - g);
        }
        self.f_s.grad.add_outer(&dz, &cache.h_f);
        axpy(self.f_s_bias.grad.as_mut_slice(), 1.0, &dz);
        axpy(&mut dh_f, 1.0, &self.f_s.value.t_matvec(&dz));
        if let Some(icl) = &mut self.icl {
            icl.f_g.grad.add_outer(&dz, &cache.h_icl);
            axpy(icl.bias.grad.as_mut_slice(), 1.0, &dz);
            axpy(&mut dh_icl, 1.0, &icl.f_g.value.t_matvec(&dz));
        }
        (dh_f, dh_icl)
    }
}

pub fn gate_fuse(h_f: &[f64], h_icl: &[f64], params: &GateParams) -> Result<Vec<f64>, MoeError> {
    Ok(params.gate_fuse(h_f, h_icl)?.h_u)
}

pub fn predict(h_u: &[f64], params: &GateParams) -> Result<Vec<f64>, MoeError> {
    params.predict(h_u)
}

/// Gate-free head: one linear map of the concatenated inputs.
pub struct ConcatHead {
    /// `c x (d * inputs)`.
    pub w: ParamTensor,
    pub bias: ParamTensor,
}

impl ConcatHead {
    pub fn new<R: Rng + ?Sized>(input_width: usize, c: usize, rng: &mut R) -> Self {
        Self {
            w: ParamTensor::xavier("head.linear.w", c, input_width, rng),
            bias: ParamTensor::zeros("head.linear.bias", 1, c),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w.value.cols()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.w, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.w, &mut self.bias]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, MoeError> {
        check("concatenated input", x, self.input_width())?;
        let mut y = self.w.value.matvec(x);
        axpy(&mut y, 1.0, self.bias.value.as_slice());
        Ok(y)
    }

    /// Returns the gradient with respect to the concatenated input.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        self.w.grad.add_outer(dy, x);
        axpy(self.bias.grad.as_mut_slice(), 1.0, dy);
        self.w.value.t_matvec(dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, finite_diff_grad, max_relative_error, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        Matrix::xavier_uniform(1, n, rng).into_vec()
    }

    #[test]
    fn zero_gate_weights_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = GateParams::new(4, 2, true, &mut rng);
        p.f_s.value.fill(0.0);
        p.icl.as_mut().unwrap().f_g.value.fill(0.0);
        let cache = p.gate_fuse(&rand_vec(4, &mut rng), &rand_vec(4, &mut rng)).unwrap();
        assert!(cache.gate().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn equal_inputs_give_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GateParams::new(5, 1, true, &mut rng);
        let x = rand_vec(5, &mut rng);
        let h_u = gate_fuse(&x, &x, &p).unwrap();
        for (u, v) in h_u.iter().zip(&x) {
            assert_eq!(*u, sigmoid(*v));
        }
    }

    #[test]
    fn saturated_gate_selects_fused_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = GateParams::new(3, 1, true, &mut rng);
        p.f_s.value.fill(0.0);
        p.icl.as_mut().unwrap().f_g.value.fill(0.0);
        p.f_s_bias.value = Matrix::row_vector(&[20.0; 3]);
        let (h_f, h_icl) = (rand_vec(3, &mut rng), rand_vec(3, &mut rng));
        let h_u = gate_fuse(&h_f, &h_icl, &p).unwrap();
        for (u, f) in h_u.iter().zip(&h_f) {
            assert!((u - sigmoid(*f)).abs() < 1e-8);
        }
        p.f_s_bias.value = Matrix::row_vector(&[-20.0; 3]);
        let h_u = gate_fuse(&h_f, &h_icl, &p).unwrap();
        for (u, i) in h_u.iter().zip(&h_icl) {
            assert!((u - sigmoid(*i)).abs() < 1e-8);
        }
    }

    #[test]
    fn gate_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = GateParams::new(6, 2, true, &mut rng);
        for _ in 0..100 {
            let (h_f, h_icl) = (rand_vec(6, &mut rng), rand_vec(6, &mut rng));
            let cache = p.gate_fuse(&h_f, &h_icl).unwrap();
            for i in 0..6 {
                let g = cache.gate()[i];
                assert!(g > 0.0 && g < 1.0);
                assert_eq!(g + (1.0 - g), 1.0);
                let m = g * h_f[i] + (1.0 - g) * h_icl[i];
                assert!(m >= h_f[i].min(h_icl[i]) - 1e-15 && m <= h_f[i].max(h_icl[i]) + 1e-15);
                assert!(cache.h_u()[i] > 0.0 && cache.h_u()[i] < 1.0);
            }
        }
    }

    #[test]
    fn head_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = GateParams::new(2, 1, false, &mut rng);
        p.w_out.value.fill(0.0);
        p.bias_out.value = Matrix::row_vector(&[0.25]);
        assert_eq!(predict(&[0.3, 0.7], &p).unwrap(), vec![0.25]);
        p.w_out.value = Matrix::from_rows(&[vec![1.0, 1.0]]);
        assert!((predict(&[0.3, 0.7], &p).unwrap()[0] - 1.25).abs() < 1e-15);
        assert!(matches!(predict(&[0.3], &p), Err(MoeError::ShapeMismatch { .. })));
        assert_eq!(p.params().len(), 4);
        assert!(p.params().iter().all(|t| !t.name.starts_with("moe.f_g")));
    }

    fn check_grads(with_icl: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = GateParams::new(4, 2, with_icl, &mut rng);
        p.f_s_bias.value = Matrix::xavier_uniform(1, 4, &mut rng);
        p.bias_out.value = Matrix::xavier_uniform(1, 2, &mut rng);
        let (h_f, h_icl) = (rand_vec(4, &mut rng), rand_vec(4, &mut rng));
        let target = [0.4, -0.9];
        let mse = |p: &GateParams, h_f: &[f64], h_icl: &[f64]| {
            let y = p.predict(p.gate_fuse(h_f, h_icl).unwrap().h_u()).unwrap();
            y.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 2.0
        };
        let cache = p.gate_fuse(&h_f, &h_icl).unwrap();
        let y = p.predict(cache.h_u()).unwrap();
        let dy: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
        let (dh_f, _) = p.backward(&cache, &dy);
        let num = finite_diff_grad(&Matrix::row_vector(&h_f), 1e-5, |m| mse(&p, m.as_slice(), &h_icl)).unwrap();
        assert!(max_relative_error(&Matrix::row_vector(&dh_f), &num, 1e-8) < 1e-4);
        for idx in 0..p.params().len() {
            let value = p.params()[idx].value.clone();
            let analytic = p.params()[idx].grad.clone();
            let numeric = finite_diff_grad(&value, 1e-5, |m| {
                let saved = std::mem::replace(&mut p.params_mut()[idx].value, m.clone());
                let out = mse(&p, &h_f, &h_icl);
                p.params_mut()[idx].value = saved;
                out
            })
            .unwrap();
            let err = max_relative_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-4, "{}: {err}", p.params()[idx].name);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_grads(true);
        check_grads(false);
    }

    #[test]
    fn concat_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut h = ConcatHead::new(6, 2, &mut rng);
        let x = rand_vec(6, &mut rng);
        let w = [0.5, -1.5];
        let dx = h.backward(&x, &w);
        let num = finite_diff_grad(&Matrix::row_vector(&x), 1e-5, |m| dot(&h.forward(m.as_slice()).unwrap(), &w)).unwrap();
        assert!(max_relative_error(&Matrix::row_vector(&dx), &num, 1e-8) < 1e-4);
    }
}
