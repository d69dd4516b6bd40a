//! Donsker–Varadhan mutual-information lower bound with a trainable statistics network.
//!
//! For aligned batches `(f_a[i], f_d[i])` the estimate is
//!
//! ```text
//! mean_i T(f_a[i], f_d[i]) - log mean_i exp T(f_a[i], f_d[pi(i)])
//! ```
//!
//! where `pi` is a uniform random permutation of the batch, so the second term
//! sees samples from the product of marginals. Both inputs are standardized per
//! dimension over the batch first. Mutual information is invariant to such
//! rescaling, and without it encoders minimizing the bound can lower the
//! estimate by inflating their activations.

use candle_core::{DType, Tensor, D};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{Linear, Param};
use crate::seed::Rng;

/// Statistics network `T(f_a, f_d)`: an MLP with ELU activations over the
/// concatenated inputs.
#[derive(Clone)]
pub struct MineNetwork {
    layers: Vec<Linear>,
    anatomy_dim: usize,
    domain_dim: usize,
}

impl MineNetwork {
    pub fn new(
        anatomy_dim: usize,
        domain_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        dtype: DType,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut width = anatomy_dim + domain_dim;
        for _ in 0..hidden_layers {
            layers.push(Linear::new(width, hidden, dtype, rng)?);
            width = hidden;
        }
        layers.push(Linear::new(width, 1, dtype, rng)?);
        Ok(Self {
            layers,
            anatomy_dim,
            domain_dim,
        })
    }

    /// Scores for row-aligned `(B, anatomy_dim)` and `(B, domain_dim)` inputs, shape `(B,)`.
    pub fn forward(&self, fa: &Tensor, fd: &Tensor) -> Result<Tensor> {
        let (na, da) = fa.dims2()?;
        let (nd, dd) = fd.dims2()?;
        if na != nd || da != self.anatomy_dim || dd != self.domain_dim {
            return Err(Error::Shape(format!(
                "statistics network expects ({}, {}) rows, got {:?} and {:?}",
                self.anatomy_dim,
                self.domain_dim,
                fa.dims(),
                fd.dims()
            )));
        }
        let mut h = Tensor::cat(&[fa, fd], 1)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.elu(1.0)?;
            }
        }
        Ok(h.squeeze(1)?)
    }

    pub fn params(&self) -> Vec<Param> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params(&format!("layer{i}")))
            .collect()
    }
}

/// One Monte-Carlo estimate. `value = joint_term - marginal_term`; all three
/// are scalar tensors attached to the autodiff graph.
pub struct MiEstimate {
    pub value: Tensor,
    pub joint_term: Tensor,
    pub marginal_term: Tensor,
}

impl MiEstimate {
    pub fn value_f64(&self) -> Result<f64> {
        Ok(self.value.to_dtype(DType::F64)?.to_scalar()?)
    }

    pub fn joint_f64(&self) -> Result<f64> {
        Ok(self.joint_term.to_dtype(DType::F64)?.to_scalar()?)
    }

    pub fn marginal_f64(&self) -> Result<f64> {
        Ok(self.marginal_term.to_dtype(DType::F64)?.to_scalar()?)
    }
}

pub fn random_permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// `log(mean(exp(x)))` over a 1D tensor with max subtraction.
fn log_mean_exp(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?.exp()?.mean_keepdim(D::Minus1)?.log()?;
    Ok((shifted + max)?.squeeze(0)?)
}

const STANDARDIZE_EPS: f64 = 1e-5;

/// Per-column `(x - mean) / sqrt(var + eps)` over the rows of a `(B, D)` batch.
pub fn standardize_batch(x: &Tensor) -> Result<Tensor> {
    let centered = x.broadcast_sub(&x.mean_keepdim(0)?)?;
    let std = (centered.sqr()?.mean_keepdim(0)? + STANDARDIZE_EPS)?.sqrt()?;
    Ok(centered.broadcast_div(&std)?)
}

/// Estimates the bound using the marginal pairing `fd[perm[i]]` for `fa[i]`.
pub fn estimate_mi_with_permutation(t: &MineNetwork, fa: &Tensor, fd: &Tensor, perm: &[usize]) -> Result<MiEstimate> {
    let n = fa.dim(0)?;
    if n < 2 {
        return Err(Error::InvalidValue(format!(
            "mutual information needs a batch of at least 2, got {n}"
        )));
    }
    if perm.len() != n || {
        let mut seen = vec![false; n];
        perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
    } {
        return Err(Error::InvalidValue("marginal pairing is not a permutation of the batch".into()));
    }
    let fa = &standardize_batch(fa)?;
    let fd = &standardize_batch(fd)?;
    let joint_term = t.forward(fa, fd)?.mean_all()?;
    let index = Tensor::from_vec(perm.iter().map(|&p| p as u32).collect::<Vec<_>>(), n, fd.device())?;
    let shuffled = fd.contiguous()?.index_select(&index, 0)?;
    let marginal_term = log_mean_exp(&t.forward(fa, &shuffled)?)?;
    let value = (&joint_term - &marginal_term)?;
    Ok(MiEstimate {
        value,
        joint_term,
        marginal_term,
    })
}

/// Estimates the bound with a fresh permutation drawn from `rng`.
pub fn estimate_mi(t: &MineNetwork, fa: &Tensor, fd: &Tensor, rng: &mut Rng) -> Result<MiEstimate> {
    let n = fa.dim(0)?;
    if n < 2 {
        return Err(Error::InvalidValue(format!(
            "mutual information needs a batch of at least 2, got {n}"
        )));
    }
    let perm = random_permutation(n, rng);
    estimate_mi_with_permutation(t, fa, fd, &perm)
}

/// Loss for the statistics network: `-(est1 + est2)`. Descending it tightens the bound.
pub fn mine_training_objective(est1: &MiEstimate, est2: &MiEstimate) -> Result<Tensor> {
    Ok((&est1.value + &est2.value)?.neg()?)
}

/// Loss for the encoders: the estimate itself. Only encoder optimizers
/// consume its gradient.
pub fn mi_loss(est: &MiEstimate) -> Tensor {
    est.value.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Adam;
    use crate::seed::rng;
    use candle_core::{Device, Var};
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_batch(n: usize, rho: f64, rng: &mut Rng) -> (Tensor, Tensor) {
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = StandardNormal.sample(rng);
            let z: f64 = StandardNormal.sample(rng);
            a.push(x);
            b.push(rho * x + (1.0 - rho * rho).sqrt() * z);
        }
        (
            Tensor::from_vec(a, (n, 1), &Device::Cpu).unwrap(),
            Tensor::from_vec(b, (n, 1), &Device::Cpu).unwrap(),
        )
    }

    #[test]
    fn constant_statistics_give_zero() {
        let mut r = rng(1);
        let t = MineNetwork::new(3, 2, 8, 2, DType::F64, &mut r).unwrap();
        // Zero the last layer's weight: T becomes its bias, a constant.
        let params = t.params();
        let w = &params[params.len() - 2].var;
        w.set(&w.as_tensor().zeros_like().unwrap()).unwrap();
        let fa = Tensor::randn(0f64, 1.0, (16, 3), &Device::Cpu).unwrap();
        let fd = Tensor::randn(0f64, 1.0, (16, 2), &Device::Cpu).unwrap();
        let fa_var = Var::from_tensor(&fa).unwrap();
        let est = estimate_mi(&t, fa_var.as_tensor(), &fd, &mut r).unwrap();
        assert_eq!(est.value_f64().unwrap(), 0.0);
        let loss = mi_loss(&est);
        assert_eq!(loss.to_scalar::<f64>().unwrap(), 0.0);
        let grads = loss.backward().unwrap();
        let g: Vec<f64> = grads
            .get(fa_var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1().unwrap())
            .unwrap_or_default();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn value_is_joint_minus_marginal() {
        let mut r = rng(2);
        let t = MineNetwork::new(1, 1, 16, 2, DType::F64, &mut r).unwrap();
        let (a, b) = gaussian_batch(32, 0.5, &mut r);
        let est = estimate_mi(&t, &a, &b, &mut r).unwrap();
        let v = est.value_f64().unwrap();
        assert!((v - (est.joint_f64().unwrap() - est.marginal_f64().unwrap())).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let mut r = rng(3);
        let t = MineNetwork::new(1, 1, 4, 1, DType::F32, &mut r).unwrap();
        let x = Tensor::zeros((1, 1), DType::F32, &Device::Cpu).unwrap();
        assert!(estimate_mi(&t, &x, &x, &mut r).is_err());
    }

    #[test]
    fn deterministic_given_permutation() {
        let mut r = rng(4);
        let t = MineNetwork::new(1, 1, 8, 2, DType::F64, &mut r).unwrap();
        let (a, b) = gaussian_batch(20, 0.3, &mut r);
        let v1 = estimate_mi(&t, &a, &b, &mut rng(10)).unwrap().value_f64().unwrap();
        let v2 = estimate_mi(&t, &a, &b, &mut rng(10)).unwrap().value_f64().unwrap();
        assert_eq!(v1, v2);
        assert!(estimate_mi_with_permutation(&t, &a, &b, &[0; 20]).is_err());
    }

    #[test]
    fn log_mean_exp_is_stable() {
        let x = Tensor::new(&[80.0f32, 79.0, -80.0], &Device::Cpu).unwrap();
        let v: f32 = log_mean_exp(&x).unwrap().to_scalar().unwrap();
        let expected = 80.0 + ((1.0 + (-1.0f64).exp() + (-160.0f64).exp()) / 3.0).ln();
        assert!(v.is_finite());
        assert!((v as f64 - expected).abs() < 1e-4);
    }

    #[test]
    fn objective_sign_and_sum() {
        let mk = |v: f64| {
            let s = Tensor::new(v, &Device::Cpu).unwrap();
            MiEstimate {
                value: s.clone(),
                joint_term: s,
                marginal_term: Tensor::new(0.0, &Device::Cpu).unwrap(),
            }
        };
        let zero = mine_training_objective(&mk(0.0), &mk(0.0)).unwrap();
        assert_eq!(zero.to_scalar::<f64>().unwrap(), 0.0);
        let l = mine_training_objective(&mk(0.3), &mk(0.5)).unwrap();
        assert!((l.to_scalar::<f64>().unwrap() + 0.8).abs() < 1e-12);
        assert_eq!(mi_loss(&mk(0.42)).to_scalar::<f64>().unwrap(), 0.42);
    }

    #[test]
    fn objective_gradient_matches_finite_difference() {
        let mut r = rng(5);
        let t = MineNetwork::new(2, 2, 6, 2, DType::F64, &mut r).unwrap();
        let fa = Tensor::randn(0f64, 1.0, (8, 2), &Device::Cpu).unwrap();
        let fd = Tensor::randn(0f64, 1.0, (8, 2), &Device::Cpu).unwrap();
        let fa2 = Tensor::randn(0f64, 1.0, (8, 2), &Device::Cpu).unwrap();
        let fd2 = Tensor::randn(0f64, 1.0, (8, 2), &Device::Cpu).unwrap();
        let p1 = random_permutation(8, &mut r);
        let p2 = random_permutation(8, &mut r);
        let objective = || {
            let e1 = estimate_mi_with_permutation(&t, &fa, &fd, &p1).unwrap();
            let e2 = estimate_mi_with_permutation(&t, &fa2, &fd2, &p2).unwrap();
            mine_training_objective(&e1, &e2).unwrap()
        };
        let grads = objective().backward().unwrap();
        for p in t.params() {
            let analytic: Vec<f64> = grads.get(p.var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = p.var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            for i in 0..base.len().min(3) {
                let h = 1e-6;
                let set = |delta: f64| {
                    let mut v = base.clone();
                    v[i] += delta;
                    p.var.set(&Tensor::from_vec(v, p.var.shape(), &Device::Cpu).unwrap()).unwrap();
                    objective().to_scalar::<f64>().unwrap()
                };
                let fd_grad = (set(h) - set(-h)) / (2.0 * h);
                set(0.0);
                // The output bias cancels between the two terms, so its exact
                // gradient is zero; floor the scale to absorb round-off there.
                let denom = fd_grad.abs().max(analytic[i].abs()).max(1e-6);
                assert!(
                    (fd_grad - analytic[i]).abs() / denom < 1e-4,
                    "{}[{i}]: {fd_grad} vs {}",
                    p.name,
                    analytic[i]
                );
            }
        }
    }

    /// Linear encoders `fa = x W_a`, `fd = x W_d` on a shared latent `x`;
    /// alternating statistics-network ascent and encoder descent must lower
    /// the re-estimated bound.
    #[test]
    fn encoder_descent_lowers_estimate() {
        for seed in 0..3u64 {
            let mut r = rng(100 + seed);
            let wa = Var::from_tensor(&Tensor::new(&[[1.0f32], [0.2]], &Device::Cpu).unwrap()).unwrap();
            let wd = Var::from_tensor(&Tensor::new(&[[0.9f32], [0.3]], &Device::Cpu).unwrap()).unwrap();
            let t = MineNetwork::new(1, 1, 32, 2, DType::F32, &mut r).unwrap();
            let mut t_opt = Adam::new(t.params().into_iter().map(|p| p.var).collect(), 1e-2, None);
            let mut enc_opt = Adam::new(vec![wa.clone(), wd.clone()], 1e-2, None);
            let x = Tensor::randn(0f32, 1.0, (256, 2), &Device::Cpu).unwrap();

            let fit_estimate = |t_opt: &mut Adam, r: &mut Rng, steps: usize| -> f64 {
                let fa = x.matmul(wa.as_tensor()).unwrap().detach();
                let fd = x.matmul(wd.as_tensor()).unwrap().detach();
                let mut last = 0.0;
                for _ in 0..steps {
                    let e = estimate_mi(&t, &fa, &fd, r).unwrap();
                    last = e.value_f64().unwrap();
                    t_opt.step(&e.value.neg().unwrap().backward().unwrap()).unwrap();
                }
                last
            };
            let initial = fit_estimate(&mut t_opt, &mut r, 300);
            for _ in 0..100 {
                let fa = x.matmul(wa.as_tensor()).unwrap();
                let fd = x.matmul(wd.as_tensor()).unwrap();
                let e = estimate_mi(&t, &fa, &fd, &mut r).unwrap();
                let grads = mi_loss(&e).backward().unwrap();
                enc_opt.step(&grads).unwrap();
                let e = estimate_mi(&t, &fa.detach(), &fd.detach(), &mut r).unwrap();
                t_opt.step(&e.value.neg().unwrap().backward().unwrap()).unwrap();
            }
            let fin = fit_estimate(&mut t_opt, &mut r, 300);
            assert!(fin < initial, "seed {seed}: {fin} !< {initial}");
        }
    }
}
