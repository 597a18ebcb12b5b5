//! Dense GELU network acting on reduced coordinates, with exact input
//! Jacobians and parameter gradients of the normalized H1 loss.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use libm::erf;

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// Floor applied to per-sample normalization denominators.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// `x Phi(x)` with the exact Gaussian CDF, and its first derivative.
pub fn gelu(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    (x * cdf, cdf + x * pdf)
}

/// Second derivative of [`gelu`].
pub fn gelu_second(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp() * (2.0 - x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentNet {
    widths: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

/// One reduced training or test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedRecord {
    pub m_r: Vec<f64>,
    pub z: Vec<f64>,
    pub u_r: Vec<f64>,
    pub j_mr: DMatrix<f64>,
    pub j_zr: DMatrix<f64>,
}

/// Batch-mean loss, its parts and the parameter gradient.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub state_term: f64,
    pub jac_m_term: f64,
    pub jac_z_term: f64,
    /// Number of denominators raised to [`DENOMINATOR_FLOOR`].
    pub floored: usize,
    pub grad: Vec<f64>,
}

impl LatentNet {
    /// All-zero network with the given layer widths (input first, output last).
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid(format!("invalid layer widths {widths:?}")));
        }
        let weights = widths.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect();
        let biases = widths[1..].iter().map(|&w| DVector::zeros(w)).collect();
        Ok(LatentNet { widths: widths.to_vec(), weights, biases })
    }

    /// Uniform fan-in initialization on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn random(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        for (w, b) in net.weights.iter_mut().zip(net.biases.iter_mut()) {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            w.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
            b.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn from_layers(weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::invalid("network needs matching, nonempty weight and bias lists"));
        }
        let mut widths = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.ncols() != *widths.last().unwrap() || b.len() != w.nrows() {
                return Err(Error::invalid("incompatible layer shapes"));
            }
            widths.push(w.nrows());
        }
        Ok(LatentNet { widths, weights, biases })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Flat parameters: for each layer, `W` row-major then `b`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..w.nrows() {
                out.extend(w.row(r).iter());
            }
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::invalid("parameter vector length does not match the network"));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    w[(r, c)] = p[k];
                    k += 1;
                }
            }
            for x in b.iter_mut() {
                *x = p[k];
                k += 1;
            }
        }
        Ok(())
    }

    fn check_input(&self, m_r: &[f64], z: &[f64]) -> Result<()> {
        if m_r.len() + z.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "network expects {} inputs, got {} + {}",
                self.input_dim(),
                m_r.len(),
                z.len()
            )));
        }
        Ok(())
    }

    /// Output for the concatenated input `(m_r, z)`.
    pub fn forward(&self, m_r: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(m_r, z)?;
        let x = DMatrix::from_iterator(self.input_dim(), 1, m_r.iter().chain(z).copied());
        Ok(self.forward_batch(&x).as_slice().to_vec())
    }

    /// Columns of `x` are inputs; columns of the result are outputs.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut zl = w * &a;
            for mut col in zl.column_iter_mut() {
                col += b;
            }
            if l < last {
                zl.iter_mut().for_each(|v| *v = gelu(*v).0);
            }
            a = zl;
        }
        a
    }

    /// Output and full input Jacobian by forward tangent propagation.
    fn forward_with_tangent(&self, input: &DVector<f64>) -> Tape {
        let last = self.weights.len() - 1;
        let mut a = vec![input.clone()];
        let mut t = vec![DMatrix::identity(self.input_dim(), self.input_dim())];
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut s = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let zl = w * &a[l] + b;
            let sl = w * &t[l];
            if l < last {
                let d1 = zl.map(|v| gelu(v).1);
                let mut tl = sl.clone();
                for (r, mut row) in tl.row_iter_mut().enumerate() {
                    row *= d1[r];
                }
                a.push(zl.map(|v| gelu(v).0));
                t.push(tl);
            }
            pre.push(zl);
            s.push(sl);
        }
        Tape { a, t, pre, s }
    }

    /// `(D_1 g, D_2 g)`: Jacobian blocks for the `m_r` and `z` inputs.
    pub fn jacobian(&self, m_r: &[f64], z: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_input(m_r, z)?;
        let input = DVector::from_iterator(self.input_dim(), m_r.iter().chain(z).copied());
        let tape = self.forward_with_tangent(&input);
        let j = tape.s.last().unwrap();
        let r_m = m_r.len();
        Ok((j.columns(0, r_m).into_owned(), j.columns(r_m, z.len()).into_owned()))
    }

    /// Output together with both Jacobian blocks.
    pub fn forward_and_jacobian(&self, m_r: &[f64], z: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
        self.check_input(m_r, z)?;
        let input = DVector::from_iterator(self.input_dim(), m_r.iter().chain(z).copied());
        let tape = self.forward_with_tangent(&input);
        let j = tape.s.last().unwrap();
        let r_m = m_r.len();
        Ok((
            tape.pre.last().unwrap().as_slice().to_vec(),
            j.columns(0, r_m).into_owned(),
            j.columns(r_m, z.len()).into_owned(),
        ))
    }

    /// Adds the gradient of one sample's loss to `grad` and returns its terms.
    fn sample_loss_grad(&self, rec: &ReducedRecord, alpha_d: f64, grad: &mut [f64]) -> SampleLoss {
        let input = DVector::from_iterator(self.input_dim(), rec.m_r.iter().chain(&rec.z).copied());
        let r_m = rec.m_r.len();
        let mut floored = 0;
        let mut denom = |v: f64| {
            if v < DENOMINATOR_FLOOR {
                floored += 1;
                DENOMINATOR_FLOOR
            } else {
                v
            }
        };
        let nu = denom(rec.u_r.iter().map(|x| x * x).sum());
        let derivative = alpha_d != 0.0;
        let (nm, nz) = if derivative { (denom(rec.j_mr.norm_squared()), denom(rec.j_zr.norm_squared())) } else { (1.0, 1.0) };

        if !derivative {
            // plain backpropagation without tangents
            let last = self.weights.len() - 1;
            let mut acts = vec![input];
            let mut pres = Vec::with_capacity(self.weights.len());
            for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
                let zl = w * &acts[l] + b;
                if l < last {
                    acts.push(zl.map(|v| gelu(v).0));
                }
                pres.push(zl);
            }
            let y = pres.last().unwrap();
            let diff = DVector::from_iterator(y.len(), y.iter().zip(&rec.u_r).map(|(a, b)| a - b));
            let state = diff.norm_squared() / nu;
            let mut zbar = diff * (2.0 / nu);
            let offsets = self.offsets();
            for l in (0..=last).rev() {
                accumulate_outer(grad, offsets[l], &zbar, &acts[l], &self.weights[l]);
                let boff = offsets[l] + self.weights[l].len();
                for (g, v) in grad[boff..boff + zbar.len()].iter_mut().zip(zbar.iter()) {
                    *g += v;
                }
                if l > 0 {
                    let abar = self.weights[l].tr_mul(&zbar);
                    zbar = abar.zip_map(&pres[l - 1], |ab, zp| ab * gelu(zp).1);
                }
            }
            return SampleLoss { state, jac_m: 0.0, jac_z: 0.0, floored };
        }

        let tape = self.forward_with_tangent(&input);
        let last = self.weights.len() - 1;
        let y = tape.pre.last().unwrap();
        let diff = DVector::from_iterator(y.len(), y.iter().zip(&rec.u_r).map(|(a, b)| a - b));
        let state = diff.norm_squared() / nu;
        let j = tape.s.last().unwrap();
        let dm = j.columns(0, r_m) - &rec.j_mr;
        let dz = j.columns(r_m, rec.z.len()) - &rec.j_zr;
        let jac_m = dm.norm_squared() / nm;
        let jac_z = dz.norm_squared() / nz;

        let mut zbar = diff * (2.0 / nu);
        let mut sbar = DMatrix::zeros(j.nrows(), j.ncols());
        sbar.columns_mut(0, r_m).copy_from(&(dm * (2.0 * alpha_d / nm)));
        sbar.columns_mut(r_m, rec.z.len()).copy_from(&(dz * (2.0 * alpha_d / nz)));

        let offsets = self.offsets();
        for l in (0..=last).rev() {
            let w = &self.weights[l];
            accumulate_outer(grad, offsets[l], &zbar, &tape.a[l], w);
            // d/dW of tr(Sbar^T W T) is Sbar T^T
            let gw = &sbar * tape.t[l].transpose();
            for r in 0..w.nrows() {
                let row = &mut grad[offsets[l] + r * w.ncols()..offsets[l] + (r + 1) * w.ncols()];
                for (c, g) in row.iter_mut().enumerate() {
                    *g += gw[(r, c)];
                }
            }
            let boff = offsets[l] + w.len();
            for (g, v) in grad[boff..boff + zbar.len()].iter_mut().zip(zbar.iter()) {
                *g += v;
            }
            if l > 0 {
                let abar = w.tr_mul(&zbar);
                let tbar = w.tr_mul(&sbar);
                let zprev = &tape.pre[l - 1];
                let sprev = &tape.s[l - 1];
                let mut next = DVector::zeros(zprev.len());
                for r in 0..zprev.len() {
                    let (_, d1) = gelu(zprev[r]);
                    let d2 = gelu_second(zprev[r]);
                    let cross: f64 = tbar.row(r).iter().zip(sprev.row(r).iter()).map(|(a, b)| a * b).sum();
                    next[r] = abar[r] * d1 + d2 * cross;
                }
                let mut snext = tbar;
                for r in 0..zprev.len() {
                    let d1 = gelu(zprev[r]).1;
                    snext.row_mut(r).iter_mut().for_each(|v| *v *= d1);
                }
                zbar = next;
                sbar = snext;
            }
        }
        SampleLoss { state, jac_m, jac_z, floored }
    }

    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.weights.len());
        let mut k = 0;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(k);
            k += w.len() + b.len();
        }
        out
    }

    /// Normalized loss averaged over `batch`, with its parameter gradient.
    ///
    /// Per sample: `|u_r - g|^2/|u_r|^2 + alpha_d (|J_mr - D_1 g|_F^2/|J_mr|_F^2
    /// + |J_zr - D_2 g|_F^2/|J_zr|_F^2)`.
    pub fn h1_loss(&self, batch: &[&ReducedRecord], alpha_d: f64) -> Result<LossEval> {
        if batch.is_empty() {
            return Err(Error::invalid("loss needs a nonempty batch"));
        }
        for rec in batch {
            self.check_input(&rec.m_r, &rec.z)?;
            if rec.u_r.len() != self.output_dim()
                || (alpha_d != 0.0
                    && (rec.j_mr.shape() != (self.output_dim(), rec.m_r.len())
                        || rec.j_zr.shape() != (self.output_dim(), rec.z.len())))
            {
                return Err(Error::invalid("record shapes do not match the network"));
            }
        }
        let mut grad = vec![0.0; self.num_params()];
        let mut total = SampleLoss::default();
        for rec in batch {
            let s = self.sample_loss_grad(rec, alpha_d, &mut grad);
            total.add(&s);
        }
        Ok(finish(total, grad, batch.len(), alpha_d))
    }

    /// Same as [`Self::h1_loss`], splitting the batch into fixed chunks that are
    /// evaluated in parallel and summed in chunk order.
    pub fn h1_loss_parallel(&self, batch: &[&ReducedRecord], alpha_d: f64, chunk: usize) -> Result<LossEval> {
        use rayon::prelude::*;
        if batch.is_empty() {
            return Err(Error::invalid("loss needs a nonempty batch"));
        }
        let parts: Vec<Result<LossEval>> = batch.par_chunks(chunk.max(1)).map(|c| self.h1_loss(c, alpha_d)).collect();
        let mut grad = vec![0.0; self.num_params()];
        let mut total = SampleLoss::default();
        for (part, c) in parts.into_iter().zip(batch.chunks(chunk.max(1))) {
            let part = part?;
            let k = c.len() as f64;
            for (g, p) in grad.iter_mut().zip(&part.grad) {
                *g += p * k;
            }
            total.add(&SampleLoss {
                state: part.state_term * k,
                jac_m: part.jac_m_term * k,
                jac_z: part.jac_z_term * k,
                floored: part.floored,
            });
        }
        Ok(finish(total, grad, batch.len(), alpha_d))
    }

    /// Loss terms without the gradient.
    pub fn evaluate_loss(&self, batch: &[&ReducedRecord], alpha_d: f64) -> Result<LossEval> {
        let mut e = self.h1_loss(batch, alpha_d)?;
        e.grad.clear();
        Ok(e)
    }
}

fn finish(total: SampleLoss, mut grad: Vec<f64>, n: usize, alpha_d: f64) -> LossEval {
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    let (state, jm, jz) = (total.state * inv, total.jac_m * inv, total.jac_z * inv);
    LossEval {
        loss: state + alpha_d * (jm + jz),
        state_term: state,
        jac_m_term: jm,
        jac_z_term: jz,
        floored: total.floored,
        grad,
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct SampleLoss {
    state: f64,
    jac_m: f64,
    jac_z: f64,
    floored: usize,
}

impl SampleLoss {
    fn add(&mut self, o: &SampleLoss) {
        self.state += o.state;
        self.jac_m += o.jac_m;
        self.jac_z += o.jac_z;
        self.floored += o.floored;
    }
}

struct Tape {
    /// Layer inputs `a_0 .. a_{L-1}`.
    a: Vec<DVector<f64>>,
    /// Input tangents of the layer inputs.
    t: Vec<DMatrix<f64>>,
    /// Pre-activations per layer; the last one is the output.
    pre: Vec<DVector<f64>>,
    /// Pre-activation tangents; the last one is the Jacobian.
    s: Vec<DMatrix<f64>>,
}

fn accumulate_outer(grad: &mut [f64], offset: usize, zbar: &DVector<f64>, a: &DVector<f64>, w: &DMatrix<f64>) {
    let cols = w.ncols();
    for r in 0..w.nrows() {
        let zr = zbar[r];
        if zr == 0.0 {
            continue;
        }
        let row = &mut grad[offset + r * cols..offset + (r + 1) * cols];
        for (g, ac) in row.iter_mut().zip(a.iter()) {
            *g += zr * ac;
        }
    }
}

pub fn net_forward(net: &LatentNet, m_r: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    net.forward(m_r, z)
}

pub fn net_jacobian(net: &LatentNet, m_r: &[f64], z: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    net.jacobian(m_r, z)
}

pub fn h1_loss(net: &LatentNet, batch: &[&ReducedRecord], alpha_d: f64) -> Result<LossEval> {
    net.h1_loss(batch, alpha_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::stream_rng;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), (0.0, 0.5));
        assert!((gelu(2.0).0 - 1.954_499_736_103_642).abs() < 1e-12);
        for i in 0..=100 {
            let x = -5.0 + 0.1 * i as f64;
            let h = 1e-5;
            let fd = (gelu(x + h).0 - gelu(x - h).0) / (2.0 * h);
            assert!((gelu(x).1 - fd).abs() < 1e-8);
            let fd2 = (gelu(x + h).1 - gelu(x - h).1) / (2.0 * h);
            assert!((gelu_second(x) - fd2).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_and_affine_nets() {
        let net = LatentNet::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0], &[3.0]).unwrap(), vec![0.0, 0.0]);
        let (a, b) = net.jacobian(&[1.0, 2.0], &[3.0]).unwrap();
        assert!(a.iter().chain(b.iter()).all(|v| *v == 0.0));

        let id = LatentNet::from_layers(vec![DMatrix::identity(3, 3)], vec![DVector::zeros(3)]).unwrap();
        assert_eq!(id.forward(&[1.0, -2.0], &[0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        let (a, b) = id.jacobian(&[1.0, -2.0], &[0.5]).unwrap();
        assert_eq!(a, DMatrix::identity(3, 3).columns(0, 2).into_owned());
        assert_eq!(b, DMatrix::identity(3, 3).columns(2, 1).into_owned());
    }

    #[test]
    fn parameter_round_trip_and_count() {
        let net = LatentNet::random(&[5, 7, 3], &mut stream_rng(1, 0)).unwrap();
        assert_eq!(net.num_params(), 5 * 7 + 7 + 7 * 3 + 3);
        let mut other = LatentNet::zeros(&[5, 7, 3]).unwrap();
        other.set_params(&net.params()).unwrap();
        assert_eq!(other, net);
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let net = LatentNet::random(&[3, 6, 2], &mut stream_rng(2, 0)).unwrap();
        let (m_r, z) = (vec![0.3, -0.1], vec![0.7]);
        let (u_r, j_mr, j_zr) = net.forward_and_jacobian(&m_r, &z).unwrap();
        let rec = ReducedRecord { m_r, z, u_r, j_mr, j_zr };
        let e = net.h1_loss(&[&rec], 1.0).unwrap();
        assert!(e.loss.abs() < 1e-28);
        assert!(e.grad.iter().all(|g| g.abs() < 1e-12));
    }
}
