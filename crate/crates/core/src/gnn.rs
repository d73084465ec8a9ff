//! Graph encoder: Chebyshev graph convolution followed by a Set2Set readout.
//!
//! Shapes, for a graph with `n` atoms and embedding width `d`:
//!
//! ```text
//! H   = Xv W0^T + Xe W1^T                      n x d
//! out = sigmoid( sum_k T_k(L) H Theta_k )      n x d
//! h_g = P [q_T ; r_T]                          d
//! ```
//!
//! where `q_t` is the LSTM controller state and `r_t` the attention read of
//! step `t`.

use crate::molgraph::SpectralOperator;
use crate::numerics::{axpy, dot, sigmoid, softmax, softmax_backward, Matrix, ParamTensor};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GnnError {
    #[error("{what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("graph has no nodes")]
    EmptyGraph,
}

/// Chebyshev polynomials `T_0 .. T_{k-1}` of `l` by the three-term recurrence.
pub fn cheb_basis(l: &SpectralOperator, k: usize) -> Vec<Matrix> {
    assert!(k >= 1, "Chebyshev order must be at least 1");
    let n = l.size();
    let mut out: Vec<Matrix> = Vec::with_capacity(k);
    out.push(Matrix::identity(n));
    if k > 1 {
        out.push(l.matrix.clone());
    }
    for i in 2..k {
        let mut next = l.matrix.matmul(&out[i - 1]).scaled(2.0);
        let prev = &out[i - 2];
        for (a, b) in next.as_mut_slice().iter_mut().zip(prev.as_slice()) {
            *a -= b;
        }
        out.push(next);
    }
    out
}

pub struct ChebConvLayer {
    pub w0: ParamTensor,
    pub w1: ParamTensor,
    pub theta: Vec<ParamTensor>,
}

pub struct ConvCache {
    xv: Matrix,
    xe: Matrix,
    basis: Vec<Matrix>,
    /// `T_k H` per order.
    th: Vec<Matrix>,
    out: Matrix,
}

impl ConvCache {
    pub fn output(&self) -> &Matrix {
        &self.out
    }
}

impl ChebConvLayer {
    pub fn new<R: Rng + ?Sized>(d: usize, dv: usize, de: usize, order: usize, rng: &mut R) -> Self {
        assert!(order >= 1);
        Self {
            w0: ParamTensor::xavier("gnn.cheb.w0", d, dv, rng),
            w1: ParamTensor::xavier("gnn.cheb.w1", d, de, rng),
            theta: (0..order)
                .map(|k| ParamTensor::xavier(format!("gnn.cheb.theta.{k}"), d, d, rng))
                .collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.theta.len()
    }

    pub fn width(&self) -> usize {
        self.w0.value.rows()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut v = vec![&self.w0, &self.w1];
        v.extend(self.theta.iter());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = vec![&mut self.w0, &mut self.w1];
        v.extend(self.theta.iter_mut());
        v
    }

    /// Forward pass given precomputed Chebyshev basis matrices.
    pub fn forward(&self, xv: &Matrix, xe_agg: &Matrix, basis: &[Matrix]) -> Result<ConvCache, GnnError> {
        let n = xv.rows();
        let (d, dv) = self.w0.shape();
        let de = self.w1.value.cols();
        if xv.cols() != dv {
            return Err(GnnError::ShapeMismatch { what: "node features", expected: (n, dv), got: xv.shape() });
        }
        if xe_agg.shape() != (n, de) {
            return Err(GnnError::ShapeMismatch { what: "edge aggregate", expected: (n, de), got: xe_agg.shape() });
        }
        if basis.len() != self.order() {
            return Err(GnnError::ShapeMismatch {
                what: "Chebyshev basis length",
                expected: (self.order(), 1),
                got: (basis.len(), 1),
            });
        }
        if let Some(t) = basis.iter().find(|t| t.shape() != (n, n)) {
            return Err(GnnError::ShapeMismatch { what: "Chebyshev basis", expected: (n, n), got: t.shape() });
        }
        let mut h = xv.matmul_t(&self.w0.value);
        h.add_assign(&xe_agg.matmul_t(&self.w1.value));
        let mut z = Matrix::zeros(n, d);
        let mut th = Vec::with_capacity(basis.len());
        for (t, theta) in basis.iter().zip(&self.theta) {
            let tk_h = t.matmul(&h);
            z.add_assign(&tk_h.matmul(&theta.value));
            th.push(tk_h);
        }
        let out = z.map(sigmoid);
        Ok(ConvCache {
            xv: xv.clone(),
            xe: xe_agg.clone(),
            basis: basis.to_vec(),
            th,
            out,
        })
    }

    /// Accumulates parameter gradients for upstream gradient `d_out` (n x d).
    pub fn backward(&mut self, cache: &ConvCache, d_out: &Matrix) {
        let mut dz = d_out.clone();
        for (g, y) in dz.as_mut_slice().iter_mut().zip(cache.out.as_slice()) {
            *g *= y * (1.0 - y);
        }
        let (n, d) = dz.shape();
        let mut dh = Matrix::zeros(n, d);
        for ((t, tk_h), theta) in cache.basis.iter().zip(&cache.th).zip(self.theta.iter_mut()) {
            theta.grad.add_assign(&tk_h.t_matmul(&dz));
            dh.add_assign(&t.t_matmul(&dz.matmul_t(&theta.value)));
        }
        self.w0.grad.add_assign(&dh.t_matmul(&cache.xv));
        self.w1.grad.add_assign(&dh.t_matmul(&cache.xe));
    }
}

/// Convenience wrapper computing the Chebyshev basis from the operator.
pub fn cheb_conv(
    layer: &ChebConvLayer,
    xv: &Matrix,
    xe_agg: &Matrix,
    l: &SpectralOperator,
) -> Result<Matrix, GnnError> {
    let basis = cheb_basis(l, layer.order());
    Ok(layer.forward(xv, xe_agg, &basis)?.out)
}

/// Set2Set readout with an LSTM controller and a `d x 2d` output projection.
pub struct Set2SetReadout {
    pub steps: usize,
    /// Gate order in the `4d` rows: input, forget, cell, output.
    pub w_ih: ParamTensor,
    pub w_hh: ParamTensor,
    pub bias: ParamTensor,
    pub proj: ParamTensor,
}

struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
    q: Vec<f64>,
    attn: Vec<f64>,
}

pub struct ReadoutCache {
    nodes: Matrix,
    steps: Vec<StepCache>,
    q_star: Vec<f64>,
}

impl ReadoutCache {
    /// Attention weights over nodes at every step.
    pub fn attention(&self) -> Vec<&[f64]> {
        self.steps.iter().map(|s| s.attn.as_slice()).collect()
    }

    /// The final `[q ; r]` vector before projection.
    pub fn q_star(&self) -> &[f64] {
        &self.q_star
    }
}

impl Set2SetReadout {
    pub fn new<R: Rng + ?Sized>(d: usize, steps: usize, rng: &mut R) -> Self {
        assert!(steps >= 1);
        Self {
            steps,
            w_ih: ParamTensor::xavier("gnn.s2s.w_ih", 4 * d, 2 * d, rng),
            w_hh: ParamTensor::xavier("gnn.s2s.w_hh", 4 * d, d, rng),
            bias: ParamTensor::zeros("gnn.s2s.bias", 1, 4 * d),
            proj: ParamTensor::xavier("gnn.s2s.proj", d, 2 * d, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.proj.value.rows()
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.w_ih, &self.w_hh, &self.bias, &self.proj]
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.bias, &mut self.proj]
    }

    pub fn forward(&self, nodes: &Matrix) -> Result<(Vec<f64>, ReadoutCache), GnnError> {
        let d = self.width();
        if nodes.rows() == 0 {
            return Err(GnnError::EmptyGraph);
        }
        if nodes.cols() != d {
            return Err(GnnError::ShapeMismatch { what: "node embeddings", expected: (nodes.rows(), d), got: nodes.shape() });
        }
        let mut q_star = vec![0.0; 2 * d];
        let mut h = vec![0.0; d];
        let mut c = vec![0.0; d];
        let mut steps = Vec::with_capacity(self.steps);
        for _ in 0..self.steps {
            let mut z = self.w_ih.value.matvec(&q_star);
            let zh = self.w_hh.value.matvec(&h);
            for ((zi, a), b) in z.iter_mut().zip(&zh).zip(self.bias.vector()) {
                *zi += a + b;
            }
            let i: Vec<f64> = z[..d].iter().map(|&v| sigmoid(v)).collect();
            let f: Vec<f64> = z[d..2 * d].iter().map(|&v| sigmoid(v)).collect();
            let g: Vec<f64> = z[2 * d..3 * d].iter().map(|&v| v.tanh()).collect();
            let o: Vec<f64> = z[3 * d..].iter().map(|&v| sigmoid(v)).collect();
            let c_new: Vec<f64> = (0..d).map(|j| f[j] * c[j] + i[j] * g[j]).collect();
            let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
            let q: Vec<f64> = (0..d).map(|j| o[j] * tanh_c[j]).collect();

            let logits = nodes.matvec(&q);
            let attn = softmax(&logits);
            let r = nodes.t_matvec(&attn);

            let x = std::mem::replace(&mut q_star, [q.as_slice(), r.as_slice()].concat());
            steps.push(StepCache {
                x,
                h_prev: std::mem::replace(&mut h, q.clone()),
                c_prev: std::mem::replace(&mut c, c_new),
                i,
                f,
                g,
                o,
                tanh_c,
                q,
                attn,
            });
        }
        let hg = self.proj.value.matvec(&q_star);
        Ok((
            hg,
            ReadoutCache {
                nodes: nodes.clone(),
                steps,
                q_star,
            },
        ))
    }

    /// Backpropagates `d_hg`, accumulating parameter gradients; returns the
    /// gradient with respect to the node embeddings.
    pub fn backward(&mut self, cache: &ReadoutCache, d_hg: &[f64]) -> Matrix {
        let d = self.width();
        let nodes = &cache.nodes;
        let mut d_nodes = Matrix::zeros(nodes.rows(), d);
        self.proj.grad.add_outer(d_hg, &cache.q_star);
        let mut d_qstar = self.proj.value.t_matvec(d_hg);
        let mut dh_next = vec![0.0; d];
        let mut dc_next = vec![0.0; d];
        for s in cache.steps.iter().rev() {
            let (dq_direct, dr) = d_qstar.split_at(d);
            // attention read r = nodes^T a, logits = nodes q
            let da = nodes.matvec(dr);
            let dlogits = softmax_backward(&s.attn, &da);
            let mut dh: Vec<f64> = nodes.t_matvec(&dlogits);
            d_nodes.add_outer(&s.attn, dr);
            d_nodes.add_outer(&dlogits, &s.q);
            for j in 0..d {
                dh[j] += dq_direct[j] + dh_next[j];
            }
            let mut dz = vec![0.0; 4 * d];
            for j in 0..d {
                let dc = dh[j] * s.o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]) + dc_next[j];
                let d_o = dh[j] * s.tanh_c[j];
                let d_i = dc * s.g[j];
                let d_g = dc * s.i[j];
                let d_f = dc * s.c_prev[j];
                dc_next[j] = dc * s.f[j];
                dz[j] = d_i * s.i[j] * (1.0 - s.i[j]);
                dz[d + j] = d_f * s.f[j] * (1.0 - s.f[j]);
                dz[2 * d + j] = d_g * (1.0 - s.g[j] * s.g[j]);
                dz[3 * d + j] = d_o * s.o[j] * (1.0 - s.o[j]);
            }
            self.w_ih.grad.add_outer(&dz, &s.x);
            self.w_hh.grad.add_outer(&dz, &s.h_prev);
            axpy(self.bias.grad.as_mut_slice(), 1.0, &dz);
            d_qstar = self.w_ih.value.t_matvec(&dz);
            dh_next = self.w_hh.value.t_matvec(&dz);
        }
        d_nodes
    }
}

/// Chebyshev convolution followed by Set2Set pooling.
pub struct GraphEncoder {
    pub conv: ChebConvLayer,
    pub readout: Set2SetReadout,
}

pub struct EncoderCache {
    pub conv: ConvCache,
    pub readout: ReadoutCache,
}

impl GraphEncoder {
    pub fn new<R: Rng + ?Sized>(d: usize, dv: usize, de: usize, order: usize, steps: usize, rng: &mut R) -> Self {
        Self {
            conv: ChebConvLayer::new(d, dv, de, order, rng),
            readout: Set2SetReadout::new(d, steps, rng),
        }
    }

    pub fn forward(&self, xv: &Matrix, xe_agg: &Matrix, basis: &[Matrix]) -> Result<(Vec<f64>, EncoderCache), GnnError> {
        let conv = self.conv.forward(xv, xe_agg, basis)?;
        let (hg, readout) = self.readout.forward(&conv.out)?;
        Ok((hg, EncoderCache { conv, readout }))
    }

    pub fn backward(&mut self, cache: &EncoderCache, d_hg: &[f64]) {
        let d_nodes = self.readout.backward(&cache.readout, d_hg);
        self.conv.backward(&cache.conv, &d_nodes);
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut v = self.conv.params();
        v.extend(self.readout.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.conv.params_mut();
        v.extend(self.readout.params_mut());
        v
    }
}

/// Mean of the node rows; the readout of an all-zero controller.
pub fn mean_rows(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        axpy(&mut out, 1.0 / m.rows() as f64, m.row(i));
    }
    out
}

/// `sum(out * weights)` helper used as a scalar probe in gradient checks.
pub fn weighted_sum(m: &Matrix, weights: &Matrix) -> f64 {
    dot(m.as_slice(), weights.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{edge_to_node, parse_smiles, spectral_operator, EDGE_FEATURES, NODE_FEATURES};
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Symmetric eigendecomposition by cyclic Jacobi rotations.
    fn jacobi_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
        let n = a.rows();
        let mut m = a.clone();
        let mut v = Matrix::identity(n);
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| m[(i, j)].powi(2))
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if m[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                        m[(k, p)] = c * mkp - s * mkq;
                        m[(k, q)] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                        m[(p, k)] = c * mpk - s * mqk;
                        m[(q, k)] = s * mpk + c * mqk;
                    }
                    for k in 0..n {
                        let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| m[(i, i)]).collect(), v)
    }

    fn cosine_oracle(l: &Matrix, k: usize) -> Matrix {
        let (lambda, q) = jacobi_eigen(l);
        let n = l.rows();
        let mut diag = Matrix::zeros(n, n);
        for i in 0..n {
            diag[(i, i)] = (k as f64 * lambda[i].clamp(-1.0, 1.0).acos()).cos();
        }
        q.matmul(&diag).matmul_t(&q)
    }

    #[test]
    fn basis_of_identity_is_identity() {
        let l = SpectralOperator { matrix: Matrix::identity(3) };
        for t in cheb_basis(&l, 5) {
            assert_eq!(t, Matrix::identity(3));
        }
    }

    #[test]
    fn basis_scalar_half() {
        let l = SpectralOperator { matrix: Matrix::from_rows(&[vec![0.5]]) };
        let b = cheb_basis(&l, 3);
        let vals: Vec<f64> = b.iter().map(|m| m[(0, 0)]).collect();
        assert_eq!(vals, vec![1.0, 0.5, -0.5]);
    }

    #[test]
    fn basis_matches_cosine_oracle() {
        for s in ["CCO", "C1CCCC1", "CC(C)(C)N", "c1ccoc1", "OCC(O)CO"] {
            let l = spectral_operator(&parse_smiles(s).unwrap());
            let basis = cheb_basis(&l, 6);
            for (k, t) in basis.iter().enumerate() {
                let oracle = cosine_oracle(&l.matrix, k);
                assert!(t.max_abs_diff(&oracle) < 1e-8, "{s} k={k}");
            }
        }
    }

    fn inputs(s: &str) -> (Matrix, Matrix, SpectralOperator) {
        let g = parse_smiles(s).unwrap();
        let l = spectral_operator(&g);
        (g.node_features.clone(), edge_to_node(&g), l)
    }

    #[test]
    fn zero_weights_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = ChebConvLayer::new(4, NODE_FEATURES, EDGE_FEATURES, 3, &mut rng);
        for p in layer.params_mut() {
            p.value.fill(0.0);
        }
        let (xv, xe, l) = inputs("CC=O");
        let out = cheb_conv(&layer, &xv, &xe, &l).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_atom_order_one_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = ChebConvLayer::new(3, NODE_FEATURES, EDGE_FEATURES, 1, &mut rng);
        let (xv, xe, l) = inputs("C");
        let out = cheb_conv(&layer, &xv, &xe, &l).unwrap();
        let x = xv.row(0);
        let hw0 = layer.w0.value.matvec(x);
        let hw1 = layer.w1.value.matvec(xe.row(0));
        let h: Vec<f64> = hw0.iter().zip(&hw1).map(|(a, b)| a + b).collect();
        let z = layer.theta[0].value.t_matvec(&h);
        for j in 0..3 {
            assert!((out[(0, j)] - sigmoid(z[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = ChebConvLayer::new(4, NODE_FEATURES, EDGE_FEATURES, 2, &mut rng);
        let (xv, xe, l) = inputs("CCO");
        let bad = Matrix::zeros(3, 4);
        assert!(matches!(cheb_conv(&layer, &bad, &xe, &l), Err(GnnError::ShapeMismatch { .. })));
        assert!(matches!(cheb_conv(&layer, &xv, &bad, &l), Err(GnnError::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = ChebConvLayer::new(5, NODE_FEATURES, EDGE_FEATURES, 3, &mut rng);
        let (xv, xe, l) = inputs("CC1CC1O");
        let basis = cheb_basis(&l, 3);
        let probe = Matrix::xavier_uniform(5, 5, &mut rng);
        let cache = layer.forward(&xv, &xe, &basis).unwrap();
        layer.backward(&cache, &probe);

        let names: Vec<String> = layer.params().iter().map(|p| p.name.clone()).collect();
        for name in names {
            let (value, analytic) = {
                let p = layer.params().into_iter().find(|p| p.name == name).unwrap();
                (p.value.clone(), p.grad.clone())
            };
            let numeric = finite_diff_grad(&value, 1e-5, |m| {
                let p = layer.params_mut().into_iter().find(|p| p.name == name).unwrap();
                let saved = std::mem::replace(&mut p.value, m.clone());
                let out = layer.forward(&xv, &xe, &basis).unwrap();
                layer.params_mut().into_iter().find(|p| p.name == name).unwrap().value = saved;
                weighted_sum(out.output(), &probe)
            })
            .unwrap();
            let err = max_relative_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn readout_single_node_and_zero_controller() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s2s = Set2SetReadout::new(4, 3, &mut rng);
        let one = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]);
        let (_, cache) = s2s.forward(&one).unwrap();
        assert!(cache.attention().iter().all(|a| a == &[1.0]));

        for p in [&mut s2s.w_ih, &mut s2s.w_hh, &mut s2s.bias] {
            p.value.fill(0.0);
        }
        let nodes = Matrix::xavier_uniform(5, 4, &mut rng);
        let (_, cache) = s2s.forward(&nodes).unwrap();
        let mean = mean_rows(&nodes);
        let r = &cache.q_star()[4..];
        for (a, b) in r.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(s2s.forward(&Matrix::zeros(0, 4)), Err(GnnError::EmptyGraph)));
    }

    #[test]
    fn readout_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s2s = Set2SetReadout::new(4, 3, &mut rng);
        let nodes = Matrix::xavier_uniform(5, 4, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let mut permuted = Matrix::zeros(5, 4);
        for i in 0..5 {
            permuted.row_mut(perm[i]).copy_from_slice(nodes.row(i));
        }
        let (a, _) = s2s.forward(&nodes).unwrap();
        let (b, _) = s2s.forward(&permuted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn readout_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s2s = Set2SetReadout::new(3, 3, &mut rng);
        s2s.bias.value = Matrix::xavier_uniform(1, 12, &mut rng);
        let nodes = Matrix::xavier_uniform(4, 3, &mut rng);
        let probe = [0.7, -1.3, 0.4];
        let (_, cache) = s2s.forward(&nodes).unwrap();
        let d_nodes = s2s.backward(&cache, &probe);

        let numeric = finite_diff_grad(&nodes, 1e-5, |m| dot(&s2s.forward(m).unwrap().0, &probe)).unwrap();
        assert!(max_relative_error(&d_nodes, &numeric, 1e-8) < 1e-4);

        for idx in 0..4 {
            let value = s2s.params()[idx].value.clone();
            let analytic = s2s.params()[idx].grad.clone();
            let numeric = finite_diff_grad(&value, 1e-5, |m| {
                let saved = std::mem::replace(&mut s2s.params_mut()[idx].value, m.clone());
                let out = s2s.forward(&nodes).unwrap().0;
                s2s.params_mut()[idx].value = saved;
                dot(&out, &probe)
            })
            .unwrap();
            let err = max_relative_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-4, "param {idx}: {err}");
        }
    }
}
