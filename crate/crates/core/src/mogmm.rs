//! The MoGMM-FC head: one diagonal-covariance Gaussian mixture per class,
//! whose η-weighted component means double as the rows of a bias-free
//! linear classifier.
//!
//! Trainable state is the hyper-mean tensor `A` (`C×K×M`), the log-variances
//! `b̃` with `b = exp(b̃)`, and mixing logits `η̃` with `η_i = softmax(η̃_i)`.
//! Class weights `ω` are fixed from class proportions. Component means are
//! realized as `μ = A` and covariances as `Σ = diag(b)`.
//!
//! Losses built here:
//!
//! * `L_SGVB = (1/B) Σ_b ln(ω_t GMM_t(z_b))`
//! * `L_NSGVB = (1/B) Σ_b Σ_{i≠t} ln(ω_i GMM_i(z_b))`
//! * `L_DS = L_SGVB − ρ·L_NSGVB`
//! * `Reg = Σ_i ω*_i Σ_j [η_ij ln(η_ij K) + (η*_ij/2) Σ_m (b + a² − ln b − 1)]`
//! * `𝓛 = L_CE − L_DS + γ·Reg`

use crate::error::{dim_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Bound applied to every `b̃` after an optimizer step.
pub const LOG_VARIANCE_BOUND: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Parameters of the MoGMM-FC head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoGmmParams {
    classes: usize,
    components: usize,
    dim: usize,
    /// Hyper-means `a_ijm`, shape `[C, K, M]`.
    pub a: Tensor,
    /// Log-variances `b̃_ijm`, shape `[C, K, M]`.
    pub b_tilde: Tensor,
    /// Mixing logits `η̃_ij`, shape `[C, K]`.
    pub eta_tilde: Tensor,
    omega: Vec<f64>,
}

impl MoGmmParams {
    /// Fresh parameters: `A ~ N(0, 2/M)`, `b̃ = 0`, `η̃ = 0`.
    pub fn init<R: Rng + ?Sized>(
        classes: usize,
        components: usize,
        dim: usize,
        omega: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        let normal = Normal::new(0.0, (2.0 / dim as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let n = classes * components * dim;
        let a = (0..n).map(|_| normal.sample(rng)).collect();
        Self::from_parts(
            classes,
            components,
            dim,
            Tensor::new(vec![classes, components, dim], a)?,
            Tensor::zeros(&[classes, components, dim]),
            Tensor::zeros(&[classes, components]),
            omega,
        )
    }

    pub fn from_parts(
        classes: usize,
        components: usize,
        dim: usize,
        a: Tensor,
        b_tilde: Tensor,
        eta_tilde: Tensor,
        omega: Vec<f64>,
    ) -> Result<Self> {
        if classes == 0 || components == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "C, K, M must be positive (got {}, {}, {})",
                classes, components, dim
            )));
        }
        let ckm = [classes, components, dim];
        if a.shape() != ckm || b_tilde.shape() != ckm {
            return dim_err(format!(
                "A and b̃ must have shape {:?}, got {:?} and {:?}",
                ckm,
                a.shape(),
                b_tilde.shape()
            ));
        }
        if eta_tilde.shape() != [classes, components] {
            return dim_err(format!(
                "η̃ must have shape [{}, {}], got {:?}",
                classes,
                components,
                eta_tilde.shape()
            ));
        }
        validate_omega(&omega, classes)?;
        let mut p = Self {
            classes,
            components,
            dim,
            a,
            b_tilde,
            eta_tilde,
            omega,
        };
        p.clamp_log_variances();
        Ok(p)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn clamp_log_variances(&mut self) {
        for v in self.b_tilde.data_mut() {
            *v = v.clamp(-LOG_VARIANCE_BOUND, LOG_VARIANCE_BOUND);
        }
    }

    /// Rejects `ω_i = 0` for any class that occurs in `labels`.
    pub fn check_omega_covers(&self, labels: &[usize]) -> Result<()> {
        for &t in labels {
            if t >= self.classes {
                return Err(Error::Contract(format!(
                    "label {} out of range for {} classes",
                    t, self.classes
                )));
            }
            if self.omega[t] == 0.0 {
                return Err(Error::Config(format!(
                    "ω_{} = 0 but class {} has training samples",
                    t, t
                )));
            }
        }
        Ok(())
    }

    /// Mixing weights `η = softmax(η̃)` row by row, flattened `C×K`.
    pub fn eta(&self) -> Vec<f64> {
        let k = self.components;
        let mut out = Vec::with_capacity(self.classes * k);
        for row in self.eta_tilde.data().chunks(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            out.extend(row.iter().map(|x| (x - m).exp() / z));
        }
        out
    }

    /// Classifier rows `W_i = Σ_j η_ij a_ij`, shape `[C, M]`.
    pub fn class_means(&self) -> Tensor {
        let (k, m) = (self.components, self.dim);
        let eta = self.eta();
        let a = self.a.data();
        let mut w = vec![0.0; self.classes * m];
        for i in 0..self.classes {
            for j in 0..k {
                let e = eta[i * k + j];
                let base = (i * k + j) * m;
                for d in 0..m {
                    w[i * m + d] += e * a[base + d];
                }
            }
        }
        Tensor::from_parts(vec![self.classes, m], w)
    }

    /// Registers the trainable tensors as tape leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundHead> {
        let (c, k, m) = (self.classes, self.components, self.dim);
        let a = tape.leaf(self.a.clone());
        let b_tilde = tape.leaf(self.b_tilde.clone());
        let eta_tilde = tape.leaf(self.eta_tilde.clone());
        let a2 = tape.reshape(a, &[c * k, m])?;
        let bt2 = tape.reshape(b_tilde, &[c * k, m])?;
        Ok(BoundHead {
            a,
            b_tilde,
            eta_tilde,
            a2,
            bt2,
            classes: c,
            components: k,
            dim: m,
            omega: self.omega.clone(),
        })
    }
}

fn validate_omega(omega: &[f64], classes: usize) -> Result<()> {
    if omega.len() != classes {
        return Err(Error::Config(format!(
            "ω has {} entries for {} classes",
            omega.len(),
            classes
        )));
    }
    if omega.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config("ω entries must be finite and nonnegative".into()));
    }
    let s: f64 = omega.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!("ω sums to {}, not 1", s)));
    }
    Ok(())
}

/// Class proportions of `labels`, used as the fixed `ω`.
pub fn omega_from_labels(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Contract("cannot estimate ω from no labels".into()));
    }
    let mut counts = vec![0usize; classes];
    for &t in labels {
        if t >= classes {
            return Err(Error::Contract(format!("label {} >= {}", t, classes)));
        }
        counts[t] += 1;
    }
    let n = labels.len() as f64;
    let mut omega: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    // absorb rounding so Σω = 1 holds tightly
    let s: f64 = omega.iter().sum();
    if let Some(w) = omega.iter_mut().max_by(|a, b| a.total_cmp(b)) {
        *w += 1.0 - s;
    }
    Ok(omega)
}

/// Head parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundHead {
    /// Leaf for `A`, shape `[C, K, M]`.
    pub a: Var,
    /// Leaf for `b̃`, shape `[C, K, M]`.
    pub b_tilde: Var,
    /// Leaf for `η̃`, shape `[C, K]`.
    pub eta_tilde: Var,
    a2: Var,
    bt2: Var,
    classes: usize,
    components: usize,
    dim: usize,
    omega: Vec<f64>,
}

impl BoundHead {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    fn check_features(&self, tape: &Tape, z: Var) -> Result<usize> {
        let (n, m) = tape.value(z).dims2()?;
        if m != self.dim {
            return dim_err(format!("features have {} columns, head expects {}", m, self.dim));
        }
        Ok(n)
    }

    pub fn eta(&self, tape: &mut Tape) -> Result<Var> {
        tape.softmax_rows(self.eta_tilde)
    }

    pub fn log_eta(&self, tape: &mut Tape) -> Result<Var> {
        tape.log_softmax_rows(self.eta_tilde)
    }

    /// `W = [Σ_j η_ij μ_ij]_i`, shape `[C, M]`, rebuilt from the current η and μ.
    pub fn class_means(&self, tape: &mut Tape) -> Result<Var> {
        let (c, k, m) = (self.classes, self.components, self.dim);
        let eta = self.eta(tape)?;
        let eta_flat = tape.reshape(eta, &[c * k])?;
        let eta_cols = tape.repeat_cols(eta_flat, m)?;
        let weighted = tape.mul(self.a2, eta_cols)?;
        let mut group = vec![0.0; c * c * k];
        for i in 0..c {
            for j in 0..k {
                group[i * c * k + i * k + j] = 1.0;
            }
        }
        let g = tape.constant(Tensor::from_parts(vec![c, c * k], group));
        tape.matmul(g, weighted)
    }

    /// `ln N(z_n; μ_ij, diag(b_ij))` for every sample and component:
    /// `[N×M] -> [N×CK]`.
    pub fn component_log_pdfs(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let n = self.check_features(tape, z)?;
        let ck = self.classes * self.components;
        // Σ_m (z−a)²/b = z²·(1/b) − 2 z·(a/b) + Σ_m a²/b
        let neg_bt = tape.neg(self.bt2);
        let inv_b = tape.exp(neg_bt);
        let inv_b_t = tape.transpose(inv_b)?;
        let z_sq = tape.square(z);
        let quad = tape.matmul(z_sq, inv_b_t)?;
        let a_over_b = tape.mul(self.a2, inv_b)?;
        let a_over_b_t = tape.transpose(a_over_b)?;
        let cross = tape.matmul(z, a_over_b_t)?;
        let a_sq = tape.square(self.a2);
        let a_sq_over_b = tape.mul(a_sq, inv_b)?;
        let per_comp = tape.add(a_sq_over_b, self.bt2)?;
        let ones = tape.constant(Tensor::full(&[self.dim, 1], 1.0));
        let comp_const = tape.matmul(per_comp, ones)?;
        let comp_const = tape.reshape(comp_const, &[ck])?;
        let comp_const = tape.offset(comp_const, self.dim as f64 * LN_2PI);
        let comp_rows = tape.repeat_rows(comp_const, n)?;
        let cross2 = tape.scale(cross, 2.0);
        let s = tape.sub(quad, cross2)?;
        let s = tape.add(s, comp_rows)?;
        Ok(tape.scale(s, -0.5))
    }

    /// `ln GMM_i(z_n)` for every sample and class: `[N×M] -> [N×C]`.
    pub fn gmm_log_densities(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let n = self.check_features(tape, z)?;
        let (c, k) = (self.classes, self.components);
        let comp = self.component_log_pdfs(tape, z)?;
        let log_eta = self.log_eta(tape)?;
        let log_eta = tape.reshape(log_eta, &[c * k])?;
        let log_eta = tape.repeat_rows(log_eta, n)?;
        let joint = tape.add(comp, log_eta)?;
        let grouped = tape.reshape(joint, &[n * c, k])?;
        let mixed = tape.log_sum_exp_rows(grouped)?;
        tape.reshape(mixed, &[n, c])
    }

    /// `ℓ_ni = ln ω_i + ln GMM_i(z_n)`: `[N×M] -> [N×C]`.
    pub fn class_log_likelihoods_batch(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let n = self.check_features(tape, z)?;
        let g = self.gmm_log_densities(tape, z)?;
        let ln_omega: Vec<f64> = self.omega.iter().map(|w| w.ln()).collect();
        let tiled = ln_omega.iter().cycle().take(n * self.classes).cloned().collect();
        let c = tape.constant(Tensor::from_parts(vec![n, self.classes], tiled));
        tape.add(g, c)
    }

    /// `y = z·Wᵀ` with `W` rebuilt each pass: `[N×M] -> [N×C]`.
    pub fn classifier_logits_batch(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.check_features(tape, z)?;
        let w = self.class_means(tape)?;
        let wt = tape.transpose(w)?;
        tape.matmul(z, wt)
    }
}

/// Per-sample class log-likelihoods `ℓ_i = ln(ω_i GMM_i(z))`, a length-`C`
/// node.
#[derive(Clone, Copy, Debug)]
pub struct ClassLogLikelihoods {
    pub values: Var,
}

/// `ln N(z; μ, diag(b))` for a single feature vector.
pub fn gaussian_log_pdf(tape: &mut Tape, z: &Tensor, mu: Var, b: Var) -> Result<Var> {
    let m = z.numel();
    if z.shape() != [m] || tape.shape(mu) != [m] || tape.shape(b) != [m] {
        return dim_err(format!(
            "gaussian_log_pdf: z {:?}, μ {:?}, b {:?}",
            z.shape(),
            tape.shape(mu),
            tape.shape(b)
        ));
    }
    let zc = tape.constant(z.clone());
    let d = tape.sub(zc, mu)?;
    let d2 = tape.square(d);
    let q = tape.div(d2, b)?;
    let lb = tape.ln(b)?;
    let s = tape.add(q, lb)?;
    let s = tape.sum(s);
    let s = tape.offset(s, m as f64 * LN_2PI);
    Ok(tape.scale(s, -0.5))
}

fn single_row(tape: &mut Tape, z: &Tensor) -> Result<Var> {
    let m = z.numel();
    if z.shape() != [m] {
        return dim_err(format!("expected a feature vector, got {:?}", z.shape()));
    }
    Ok(tape.constant(z.clone().reshaped(vec![1, m])?))
}

/// `ln GMM_i(z)` for one vector and one class.
pub fn gmm_log_density(tape: &mut Tape, z: &Tensor, head: &BoundHead, class: usize) -> Result<Var> {
    if class >= head.classes {
        return Err(Error::Contract(format!(
            "class {} out of range for {} classes",
            class, head.classes
        )));
    }
    let zr = single_row(tape, z)?;
    let g = head.gmm_log_densities(tape, zr)?;
    let v = tape.gather(g, &[class])?;
    tape.reshape(v, &[])
}

pub fn class_log_likelihoods(
    tape: &mut Tape,
    z: &Tensor,
    head: &BoundHead,
) -> Result<ClassLogLikelihoods> {
    let zr = single_row(tape, z)?;
    let l = head.class_log_likelihoods_batch(tape, zr)?;
    let values = tape.reshape(l, &[head.classes])?;
    Ok(ClassLogLikelihoods { values })
}

/// Classifier output `y_i = (Σ_j η_ij μ_ij)·z` for one feature vector node.
pub fn classifier_logits(tape: &mut Tape, z: Var, head: &BoundHead) -> Result<Var> {
    let m = tape.value(z).numel();
    if tape.shape(z) != [m] {
        return dim_err(format!("expected a feature vector, got {:?}", tape.shape(z)));
    }
    let zr = tape.reshape(z, &[1, m])?;
    let y = head.classifier_logits_batch(tape, zr)?;
    tape.reshape(y, &[head.classes])
}

/// Posterior class probabilities `ω_i GMM_i(z) / Σ_c ω_c GMM_c(z)`.
pub fn class_posteriors(z: &Tensor, params: &MoGmmParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let head = params.bind(&mut tape)?;
    let ll = class_log_likelihoods(&mut tape, z, &head)?;
    let p = tape.softmax(ll.values)?;
    Ok(tape.value(p).data().to_vec())
}

fn check_labels(tape: &Tape, ll: Var, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, c) = tape.value(ll).dims2()?;
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if labels.len() != n {
        return dim_err(format!("{} labels for {} samples", labels.len(), n));
    }
    if let Some(&t) = labels.iter().find(|&&t| t >= c) {
        return Err(Error::Contract(format!("label {} out of range for {} classes", t, c)));
    }
    Ok((n, c))
}

/// `L_SGVB` from a precomputed `[N×C]` log-likelihood matrix.
pub fn sgvb_from_log_likelihoods(tape: &mut Tape, ll: Var, labels: &[usize]) -> Result<Var> {
    check_labels(tape, ll, labels)?;
    let picked = tape.gather(ll, labels)?;
    Ok(tape.mean(picked))
}

/// `L_NSGVB` from a precomputed `[N×C]` log-likelihood matrix. With
/// `normalize` the inner sum is divided by `C − 1`.
pub fn nsgvb_from_log_likelihoods(
    tape: &mut Tape,
    ll: Var,
    labels: &[usize],
    normalize: bool,
) -> Result<Var> {
    let (n, c) = check_labels(tape, ll, labels)?;
    if c == 1 {
        log::warn!("negative-sample likelihood is empty for a single class; using 0");
        return Ok(tape.scalar(0.0));
    }
    let mut mask = vec![1.0; n * c];
    for (r, &t) in labels.iter().enumerate() {
        mask[r * c + t] = 0.0;
    }
    let mask = tape.constant(Tensor::from_parts(vec![n, c], mask));
    let others = tape.mul(ll, mask)?;
    let s = tape.sum(others);
    let denom = if normalize { (n * (c - 1)) as f64 } else { n as f64 };
    Ok(tape.scale(s, 1.0 / denom))
}

/// Mean true-class log-likelihood over the batch.
pub fn loss_sgvb(tape: &mut Tape, head: &BoundHead, z: Var, labels: &[usize]) -> Result<Var> {
    let ll = head.class_log_likelihoods_batch(tape, z)?;
    sgvb_from_log_likelihoods(tape, ll, labels)
}

/// Mean over the batch of the summed other-class log-likelihoods.
pub fn loss_nsgvb(tape: &mut Tape, head: &BoundHead, z: Var, labels: &[usize]) -> Result<Var> {
    let ll = head.class_log_likelihoods_batch(tape, z)?;
    nsgvb_from_log_likelihoods(tape, ll, labels, false)
}

fn combine_ds(tape: &mut Tape, sgvb: Var, nsgvb: Var, rho: f64) -> Result<Var> {
    if rho == 0.0 {
        return Ok(sgvb);
    }
    let scaled = tape.scale(nsgvb, rho);
    tape.sub(sgvb, scaled)
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::Config(format!("ρ must be finite and nonnegative, got {}", rho)));
    }
    Ok(())
}

/// `L_DS = L_SGVB − ρ·L_NSGVB`.
pub fn loss_ds(
    tape: &mut Tape,
    head: &BoundHead,
    z: Var,
    labels: &[usize],
    rho: f64,
) -> Result<Var> {
    check_rho(rho)?;
    let ll = head.class_log_likelihoods_batch(tape, z)?;
    let s = sgvb_from_log_likelihoods(tape, ll, labels)?;
    if rho == 0.0 {
        return Ok(s);
    }
    let ns = nsgvb_from_log_likelihoods(tape, ll, labels, false)?;
    combine_ds(tape, s, ns, rho)
}

/// `½ Σ (b + a² − ln b − 1)`, the KL from `N(a, b)` to `N(0, 1)` summed over
/// elements.
pub fn kl_gaussian_term(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let lb = tape.ln(b)?;
    let a2 = tape.square(a);
    let s = tape.add(b, a2)?;
    let s = tape.sub(s, lb)?;
    let s = tape.offset(s, -1.0);
    let s = tape.sum(s);
    Ok(tape.scale(s, 0.5))
}

/// `Σ_j η_j ln(η_j K)`, the KL from `η` to the uniform categorical.
pub fn kl_categorical_term(tape: &mut Tape, eta_row: Var) -> Result<Var> {
    let k = match tape.shape(eta_row) {
        [k] => *k,
        s => return dim_err(format!("expected a mixing-weight vector, got {:?}", s)),
    };
    let l = tape.ln(eta_row)?;
    let l = tape.offset(l, (k as f64).ln());
    let p = tape.mul(eta_row, l)?;
    Ok(tape.sum(p))
}

/// Which form of the KL regularizer to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegVariant {
    /// Sub-multipliers `ω* = ω`, `η* = η`.
    Adaptive,
    /// Sub-multipliers fixed at one: the plain KL divergence.
    Plain,
}

/// The generalized KL regularizer over all head parameters.
pub fn regularizer(tape: &mut Tape, head: &BoundHead, variant: RegVariant) -> Result<Var> {
    let (c, k, m) = (head.classes, head.components, head.dim);
    let eta = head.eta(tape)?;
    let log_eta = head.log_eta(tape)?;
    let shifted = tape.offset(log_eta, (k as f64).ln());
    let categorical = tape.mul(eta, shifted)?;

    // ln b = b̃ exactly
    let b = tape.exp(head.bt2);
    let a2 = tape.square(head.a2);
    let g = tape.add(b, a2)?;
    let g = tape.sub(g, head.bt2)?;
    let g = tape.offset(g, -1.0);
    let ones = tape.constant(Tensor::full(&[m, 1], 1.0));
    let g = tape.matmul(g, ones)?;
    let g = tape.reshape(g, &[c, k])?;
    let g = tape.scale(g, 0.5);

    match variant {
        RegVariant::Adaptive => {
            let weighted = tape.mul(eta, g)?;
            let per = tape.add(categorical, weighted)?;
            let omega: Vec<f64> = head
                .omega
                .iter()
                .flat_map(|&w| std::iter::repeat_n(w, k))
                .collect();
            let om = tape.constant(Tensor::from_parts(vec![c, k], omega));
            let per = tape.mul(per, om)?;
            Ok(tape.sum(per))
        }
        RegVariant::Plain => {
            let per = tape.add(categorical, g)?;
            Ok(tape.sum(per))
        }
    }
}

/// Regularizer selection for the total loss, including the option to drop it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegMode {
    Adaptive,
    Plain,
    Off,
}

/// Weights and ablation switches of the total loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub rho: f64,
    /// Include the negative-sample term.
    pub nsgvb: bool,
    pub reg: RegMode,
    /// Divide the negative-sample inner sum by `C − 1`.
    pub normalize_nsgvb: bool,
    /// Stop MoGMM-loss gradients from reaching the feature extractor.
    pub detach_features: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-4,
            rho: 4.0,
            nsgvb: true,
            reg: RegMode::Adaptive,
            normalize_nsgvb: false,
            detach_features: false,
        }
    }
}

impl LossConfig {
    /// Cross-entropy plus the plain expected log-likelihood only.
    pub fn ce_sgvb_only() -> Self {
        Self {
            gamma: 0.0,
            rho: 0.0,
            nsgvb: false,
            reg: RegMode::Off,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rho(self.rho)?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "γ must be finite and nonnegative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Nodes of every loss component for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub sgvb: Var,
    pub nsgvb: Option<Var>,
    pub reg: Option<Var>,
    pub logits: Var,
    pub log_likelihoods: Var,
}

/// Mean cross-entropy of `softmax(logits)` against `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(tape, logits, labels)?;
    let ls = tape.log_softmax_rows(logits)?;
    let picked = tape.gather(ls, labels)?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

/// `𝓛 = L_CE − L_DS + γ·Reg` over a batch of features `z` (`[N×M]`).
pub fn total_loss(
    tape: &mut Tape,
    head: &BoundHead,
    z: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let logits = head.classifier_logits_batch(tape, z)?;
    let ce = cross_entropy(tape, logits, labels)?;
    let zd = if cfg.detach_features { tape.detach(z) } else { z };
    let ll = head.class_log_likelihoods_batch(tape, zd)?;
    let sgvb = sgvb_from_log_likelihoods(tape, ll, labels)?;
    let (ds, nsgvb) = if cfg.nsgvb {
        let ns = nsgvb_from_log_likelihoods(tape, ll, labels, cfg.normalize_nsgvb)?;
        (combine_ds(tape, sgvb, ns, cfg.rho)?, Some(ns))
    } else {
        (sgvb, None)
    };
    let mut total = tape.sub(ce, ds)?;
    let reg = match cfg.reg {
        RegMode::Off => None,
        RegMode::Adaptive => Some(regularizer(tape, head, RegVariant::Adaptive)?),
        RegMode::Plain => Some(regularizer(tape, head, RegVariant::Plain)?),
    };
    if let Some(r) = reg {
        if cfg.gamma != 0.0 {
            let scaled = tape.scale(r, cfg.gamma);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(LossTerms {
        total,
        ce,
        sgvb,
        nsgvb,
        reg,
        logits,
        log_likelihoods: ll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rand_params(rng: &mut ChaCha8Rng, c: usize, k: usize, m: usize) -> MoGmmParams {
        let mut n = |len: usize, s: f64| -> Vec<f64> {
            (0..len).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let a = n(c * k * m, 1.0);
        let bt = n(c * k * m, 0.5);
        let et = n(c * k, 1.0);
        MoGmmParams::from_parts(
            c,
            k,
            m,
            Tensor::new(vec![c, k, m], a).unwrap(),
            Tensor::new(vec![c, k, m], bt).unwrap(),
            Tensor::new(vec![c, k], et).unwrap(),
            vec![1.0 / c as f64; c],
        )
        .unwrap()
    }

    fn rand_features(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor {
        let d = (0..n * m).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(vec![n, m], d).unwrap()
    }

    /// ln(ω_i GMM_i(z)) by direct summation of densities.
    fn naive_class_ll(p: &MoGmmParams, z: &[f64]) -> Vec<f64> {
        let (c, k, m) = (p.classes(), p.components(), p.dim());
        let eta = p.eta();
        (0..c)
            .map(|i| {
                let mut dens = 0.0;
                for j in 0..k {
                    let mut lp = 0.0;
                    for d in 0..m {
                        let idx = (i * k + j) * m + d;
                        let a = p.a.data()[idx];
                        let b = p.b_tilde.data()[idx].exp();
                        lp += -0.5 * ((2.0 * std::f64::consts::PI * b).ln() + (z[d] - a).powi(2) / b);
                    }
                    dens += eta[i * k + j] * lp.exp();
                }
                (p.omega()[i] * dens).ln()
            })
            .collect()
    }

    #[test]
    fn gaussian_log_pdf_analytic_points() {
        let mut t = Tape::new();
        let mu = t.leaf(Tensor::vector(vec![0., 0.]).unwrap());
        let b = t.leaf(Tensor::vector(vec![1., 1.]).unwrap());
        let z = Tensor::vector(vec![0., 0.]).unwrap();
        let l = gaussian_log_pdf(&mut t, &z, mu, b).unwrap();
        assert!((t.item(l).unwrap() + 1.837877066409345).abs() < 1e-12);

        let mu = t.leaf(Tensor::vector(vec![0.]).unwrap());
        let b = t.leaf(Tensor::vector(vec![1.]).unwrap());
        let z = Tensor::vector(vec![1.]).unwrap();
        let l = gaussian_log_pdf(&mut t, &z, mu, b).unwrap();
        assert!((t.item(l).unwrap() + 1.418938533204673).abs() < 1e-12);

        let z3 = Tensor::vector(vec![1., 2., 3.]).unwrap();
        assert!(matches!(
            gaussian_log_pdf(&mut t, &z3, mu, b),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gaussian_log_pdf_matches_product_quadrature() {
        // each 1-D factor normalized by trapezoidal quadrature of its kernel
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let m = 4;
            let mu: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(0.3..2.0)).collect();
            let z: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut oracle = 0.0;
            for d in 0..m {
                let kernel = |x: f64| (-(x - mu[d]).powi(2) / (2.0 * b[d])).exp();
                let (lo, hi, steps) = (mu[d] - 20.0, mu[d] + 20.0, 40_000);
                let h = (hi - lo) / steps as f64;
                let mut area = 0.5 * (kernel(lo) + kernel(hi));
                for s in 1..steps {
                    area += kernel(lo + s as f64 * h);
                }
                area *= h;
                oracle += (kernel(z[d]) / area).ln();
            }
            let mut t = Tape::new();
            let vmu = t.leaf(Tensor::vector(mu).unwrap());
            let vb = t.leaf(Tensor::vector(b).unwrap());
            let l = gaussian_log_pdf(&mut t, &Tensor::vector(z).unwrap(), vmu, vb).unwrap();
            assert!((t.item(l).unwrap() - oracle).abs() < 1e-8);
        }
    }

    #[test]
    fn batched_component_pdfs_agree_with_single_vector_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = rand_params(&mut rng, 2, 3, 4);
        let z = rand_features(&mut rng, 5, 4);
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let zv = t.constant(z.clone());
        let batch = head.component_log_pdfs(&mut t, zv).unwrap();
        let batch = t.value(batch).clone();
        for n in 0..5 {
            for comp in 0..6 {
                let mu = Tensor::vector(p.a.data()[comp * 4..comp * 4 + 4].to_vec()).unwrap();
                let b: Vec<f64> = p.b_tilde.data()[comp * 4..comp * 4 + 4]
                    .iter()
                    .map(|x| x.exp())
                    .collect();
                let mut s = Tape::new();
                let vmu = s.leaf(mu);
                let vb = s.leaf(Tensor::vector(b).unwrap());
                let zr = Tensor::vector(z.row(n).to_vec()).unwrap();
                let l = gaussian_log_pdf(&mut s, &zr, vmu, vb).unwrap();
                assert!((s.item(l).unwrap() - batch.get2(n, comp)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identical_components_collapse() {
        let a = Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 0.5, -1.0]).unwrap();
        let bt = Tensor::new(vec![1, 2, 2], vec![0.3, -0.2, 0.3, -0.2]).unwrap();
        let p = MoGmmParams::from_parts(
            1,
            2,
            2,
            a,
            bt,
            Tensor::new(vec![1, 2], vec![0.7, -1.1]).unwrap(),
            vec![1.0],
        )
        .unwrap();
        let z = Tensor::vector(vec![0.2, 0.4]).unwrap();
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let g = gmm_log_density(&mut t, &z, &head, 0).unwrap();
        let mu = t.leaf(Tensor::vector(vec![0.5, -1.0]).unwrap());
        let b = t.leaf(Tensor::vector(vec![0.3f64.exp(), (-0.2f64).exp()]).unwrap());
        let single = gaussian_log_pdf(&mut t, &z, mu, b).unwrap();
        assert!((t.item(g).unwrap() - t.item(single).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn single_component_equals_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = rand_params(&mut rng, 2, 1, 3);
        let z = Tensor::vector(vec![0.1, -0.3, 0.9]).unwrap();
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let g = gmm_log_density(&mut t, &z, &head, 1).unwrap();
        let mu = t.leaf(Tensor::vector(p.a.data()[3..6].to_vec()).unwrap());
        let b = t.leaf(
            Tensor::vector(p.b_tilde.data()[3..6].iter().map(|x| x.exp()).collect()).unwrap(),
        );
        let single = gaussian_log_pdf(&mut t, &z, mu, b).unwrap();
        assert!((t.item(g).unwrap() - t.item(single).unwrap()).abs() < 1e-12);
        assert!(matches!(
            gmm_log_density(&mut t, &z, &head, 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gmm_density_integrates_to_one_in_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = rand_params(&mut rng, 1, 3, 2);
        for v in p.b_tilde.data_mut() {
            *v = v.clamp(-1.5, 1.5);
        }
        let step = 0.05;
        let n = 400;
        let mut grid = Vec::with_capacity(n * n * 2);
        for i in 0..n {
            for j in 0..n {
                grid.push(-10.0 + (i as f64 + 0.5) * step);
                grid.push(-10.0 + (j as f64 + 0.5) * step);
            }
        }
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let z = t.constant(Tensor::new(vec![n * n, 2], grid).unwrap());
        let g = head.gmm_log_densities(&mut t, z).unwrap();
        let total: f64 = t.value(g).data().iter().map(|l| l.exp()).sum::<f64>() * step * step;
        assert!((total - 1.0).abs() < 1e-3, "integral {}", total);
    }

    #[test]
    fn class_log_likelihoods_symmetry_and_naive() {
        let a = Tensor::new(vec![2, 1, 2], vec![0.3, 0.1, 0.3, 0.1]).unwrap();
        let p = MoGmmParams::from_parts(
            2,
            1,
            2,
            a,
            Tensor::zeros(&[2, 1, 2]),
            Tensor::zeros(&[2, 1]),
            vec![0.5, 0.5],
        )
        .unwrap();
        let z = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let ll = class_log_likelihoods(&mut t, &z, &head).unwrap();
        let v = t.value(ll.values).data().to_vec();
        assert_eq!(v[0], v[1]);
        let post = class_posteriors(&z, &p).unwrap();
        assert!(post.iter().all(|p| (p - 0.5).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = rand_params(&mut rng, 3, 2, 3);
        let z: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let ll = class_log_likelihoods(&mut t, &Tensor::vector(z.clone()).unwrap(), &head).unwrap();
        let naive = naive_class_ll(&p, &z);
        for (a, b) in t.value(ll.values).data().iter().zip(&naive) {
            assert!((a - b).abs() < 1e-10);
        }
        let post = class_posteriors(&Tensor::vector(z).unwrap(), &p).unwrap();
        let e: Vec<f64> = naive.iter().map(|l| l.exp()).collect();
        let s: f64 = e.iter().sum();
        for (p, q) in post.iter().zip(&e) {
            assert!((p - q / s).abs() < 1e-10);
        }
    }

    #[test]
    fn posterior_separation_limit() {
        let a = Tensor::new(vec![2, 1, 2], vec![0.0, 0.0, 10.0, 0.0]).unwrap();
        let p = MoGmmParams::from_parts(
            2,
            1,
            2,
            a,
            Tensor::zeros(&[2, 1, 2]),
            Tensor::zeros(&[2, 1]),
            vec![0.5, 0.5],
        )
        .unwrap();
        let post = class_posteriors(&Tensor::vector(vec![0.0, 0.0]).unwrap(), &p).unwrap();
        assert!(post[0] > 0.999);
    }

    #[test]
    fn omega_validation() {
        let bad = MoGmmParams::from_parts(
            2,
            1,
            1,
            Tensor::zeros(&[2, 1, 1]),
            Tensor::zeros(&[2, 1, 1]),
            Tensor::zeros(&[2, 1]),
            vec![0.7, 0.7],
        );
        assert!(matches!(bad, Err(Error::Config(_))));
        let p = MoGmmParams::from_parts(
            2,
            1,
            1,
            Tensor::zeros(&[2, 1, 1]),
            Tensor::zeros(&[2, 1, 1]),
            Tensor::zeros(&[2, 1]),
            vec![1.0, 0.0],
        )
        .unwrap();
        assert!(matches!(p.check_omega_covers(&[0, 1]), Err(Error::Config(_))));
        assert!(p.check_omega_covers(&[0, 0]).is_ok());

        let w = omega_from_labels(&[0, 1, 1, 2, 2, 2], 3).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_variances_are_clamped() {
        let p = MoGmmParams::from_parts(
            1,
            1,
            2,
            Tensor::zeros(&[1, 1, 2]),
            Tensor::new(vec![1, 1, 2], vec![-50.0, 50.0]).unwrap(),
            Tensor::zeros(&[1, 1]),
            vec![1.0],
        )
        .unwrap();
        assert_eq!(p.b_tilde.data(), &[-10.0, 10.0]);
    }

    #[test]
    fn classifier_logits_cases() {
        // K=2, η=(½,½), μ₁=(1,0), μ₂=(0,1), z=(2,2) → 2
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = MoGmmParams::from_parts(
            1,
            2,
            2,
            a,
            Tensor::zeros(&[1, 2, 2]),
            Tensor::zeros(&[1, 2]),
            vec![1.0],
        )
        .unwrap();
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let z = t.leaf(Tensor::vector(vec![2.0, 2.0]).unwrap());
        let y = classifier_logits(&mut t, z, &head).unwrap();
        assert!((t.value(y).data()[0] - 2.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = rand_params(&mut rng, 3, 1, 4);
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let z0 = t.leaf(Tensor::zeros(&[4]));
        let y0 = classifier_logits(&mut t, z0, &head).unwrap();
        assert!(t.value(y0).data().iter().all(|&v| v == 0.0));
        let zv = vec![0.5, -1.5, 2.0, 0.25];
        let z = t.leaf(Tensor::vector(zv.clone()).unwrap());
        let y = classifier_logits(&mut t, z, &head).unwrap();
        let w = p.class_means();
        for i in 0..3 {
            let direct: f64 = (0..4).map(|d| p.a.data()[i * 4 + d] * zv[d]).sum();
            let via_w: f64 = (0..4).map(|d| w.get2(i, d) * zv[d]).sum();
            assert!((t.value(y).data()[i] - direct).abs() < 1e-12);
            assert!((t.value(y).data()[i] - via_w).abs() < 1e-12);
        }
    }

    #[test]
    fn sgvb_cases() {
        // one sample at the component mean, b=1, K=1, ω=1, M=2
        let p = MoGmmParams::from_parts(
            1,
            1,
            2,
            Tensor::new(vec![1, 1, 2], vec![0.4, -0.7]).unwrap(),
            Tensor::zeros(&[1, 1, 2]),
            Tensor::zeros(&[1, 1]),
            vec![1.0],
        )
        .unwrap();
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let z = t.constant(Tensor::matrix(1, 2, vec![0.4, -0.7]).unwrap());
        let l = loss_sgvb(&mut t, &head, z, &[0]).unwrap();
        assert!((t.item(l).unwrap() + LN_2PI).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = rand_params(&mut rng, 3, 2, 3);
        let zs = rand_features(&mut rng, 4, 3);
        let labels = [2, 0, 1, 2];
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let z = t.constant(zs.clone());
        let l = loss_sgvb(&mut t, &head, z, &labels).unwrap();
        let oracle: f64 = (0..4)
            .map(|n| naive_class_ll(&p, zs.row(n))[labels[n]])
            .sum::<f64>()
            / 4.0;
        assert!((t.item(l).unwrap() - oracle).abs() < 1e-10);

        // duplicating rows leaves the mean unchanged
        let dup = zs.select_rows(&[0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
        let zd = t.constant(dup);
        let ld = loss_sgvb(&mut t, &head, zd, &[2, 0, 1, 2, 2, 0, 1, 2]).unwrap();
        assert!((t.item(ld).unwrap() - t.item(l).unwrap()).abs() < 1e-12);

        let empty = t.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(
            loss_sgvb(&mut t, &head, empty, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nsgvb_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // C=2: complement class
        let p = rand_params(&mut rng, 2, 2, 2);
        let zs = rand_features(&mut rng, 3, 2);
        let labels = [0, 1, 1];
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let z = t.constant(zs.clone());
        let l = loss_nsgvb(&mut t, &head, z, &labels).unwrap();
        let oracle: f64 = (0..3)
            .map(|n| naive_class_ll(&p, zs.row(n))[1 - labels[n]])
            .sum::<f64>()
            / 3.0;
        assert!((t.item(l).unwrap() - oracle).abs() < 1e-10);

        // C=3, B=2 brute-force double sum
        let p = rand_params(&mut rng, 3, 2, 2);
        let zs = rand_features(&mut rng, 2, 2);
        let labels = [1, 2];
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let z = t.constant(zs.clone());
        let l = loss_nsgvb(&mut t, &head, z, &labels).unwrap();
        let mut oracle = 0.0;
        for n in 0..2 {
            let ll = naive_class_ll(&p, zs.row(n));
            for (i, v) in ll.iter().enumerate() {
                if i != labels[n] {
                    oracle += v;
                }
            }
        }
        assert!((t.item(l).unwrap() - oracle / 2.0).abs() < 1e-10);
    }

    #[test]
    fn nsgvb_identical_classes_scale_sgvb() {
        let a = Tensor::new(vec![3, 1, 2], vec![0.2, 0.1, 0.2, 0.1, 0.2, 0.1]).unwrap();
        let p = MoGmmParams::from_parts(
            3,
            1,
            2,
            a,
            Tensor::zeros(&[3, 1, 2]),
            Tensor::zeros(&[3, 1]),
            vec![1.0 / 3.0; 3],
        )
        .unwrap();
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let z = t.constant(Tensor::matrix(2, 2, vec![0.5, 0.5, -1.0, 2.0]).unwrap());
        let s = loss_sgvb(&mut t, &head, z, &[0, 2]).unwrap();
        let n = loss_nsgvb(&mut t, &head, z, &[0, 2]).unwrap();
        assert!((t.item(n).unwrap() - 2.0 * t.item(s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn nsgvb_single_class_is_zero() {
        let p = MoGmmParams::from_parts(
            1,
            1,
            1,
            Tensor::zeros(&[1, 1, 1]),
            Tensor::zeros(&[1, 1, 1]),
            Tensor::zeros(&[1, 1]),
            vec![1.0],
        )
        .unwrap();
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let z = t.constant(Tensor::matrix(2, 1, vec![0.5, -0.5]).unwrap());
        let n = loss_nsgvb(&mut t, &head, z, &[0, 0]).unwrap();
        assert_eq!(t.item(n).unwrap(), 0.0);
    }

    #[test]
    fn loss_ds_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = rand_params(&mut rng, 3, 2, 3);
        let zs = rand_features(&mut rng, 5, 3);
        let labels = [0, 1, 2, 1, 0];
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let z = t.constant(zs);
        let s = loss_sgvb(&mut t, &head, z, &labels).unwrap();
        let n = loss_nsgvb(&mut t, &head, z, &labels).unwrap();
        let d0 = loss_ds(&mut t, &head, z, &labels, 0.0).unwrap();
        assert_eq!(t.item(d0).unwrap().to_bits(), t.item(s).unwrap().to_bits());
        let d4 = loss_ds(&mut t, &head, z, &labels, 4.0).unwrap();
        let oracle = t.item(s).unwrap() - 4.0 * t.item(n).unwrap();
        assert!((t.item(d4).unwrap() - oracle).abs() < 1e-12);
        assert!(matches!(
            loss_ds(&mut t, &head, z, &labels, -1.0),
            Err(Error::Config(_))
        ));
        assert_eq!(LossConfig::default().rho, 4.0);
        assert_eq!(LossConfig::default().gamma, 1e-4);
    }

    #[test]
    fn kl_gaussian_cases() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(0.0));
        let b = t.leaf(Tensor::scalar(1.0));
        let k = kl_gaussian_term(&mut t, a, b).unwrap();
        assert_eq!(t.item(k).unwrap(), 0.0);
        let a = t.leaf(Tensor::scalar(1.0));
        let k = kl_gaussian_term(&mut t, a, b).unwrap();
        assert!((t.item(k).unwrap() - 0.5).abs() < 1e-15);
        let bad = t.leaf(Tensor::scalar(0.0));
        assert!(matches!(
            kl_gaussian_term(&mut t, a, bad),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kl_categorical_cases() {
        let mut t = Tape::new();
        for k in [1usize, 2, 5] {
            let u = t.leaf(Tensor::vector(vec![1.0 / k as f64; k]).unwrap());
            let v = kl_categorical_term(&mut t, u).unwrap();
            assert!(t.item(v).unwrap().abs() < 1e-15);
        }
        let nh = t.leaf(Tensor::vector(vec![1.0 - 1e-12, 1e-12]).unwrap());
        let v = kl_categorical_term(&mut t, nh).unwrap();
        assert!((t.item(v).unwrap() - 2f64.ln()).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let eta: Vec<f64> = e.iter().map(|x| x / s).collect();
        let oracle = eta.iter().map(|p| p * p.ln()).sum::<f64>() + 4f64.ln();
        let lv = t.leaf(Tensor::vector(logits).unwrap());
        let sm = t.softmax(lv).unwrap();
        let v = kl_categorical_term(&mut t, sm).unwrap();
        assert!((t.item(v).unwrap() - oracle).abs() < 1e-12);
    }

    /// Closed-form regularizer with explicit loops.
    fn reg_oracle(p: &MoGmmParams, adaptive: bool) -> f64 {
        let (c, k, m) = (p.classes(), p.components(), p.dim());
        let eta = p.eta();
        let mut total = 0.0;
        for i in 0..c {
            let w = if adaptive { p.omega()[i] } else { 1.0 };
            let mut inner = 0.0;
            for j in 0..k {
                let e = eta[i * k + j];
                let es = if adaptive { e } else { 1.0 };
                let mut g = 0.0;
                for d in 0..m {
                    let idx = (i * k + j) * m + d;
                    let a = p.a.data()[idx];
                    let b = p.b_tilde.data()[idx].exp();
                    g += b + a * a - b.ln() - 1.0;
                }
                inner += e * (e * k as f64).ln() + es / 2.0 * g;
            }
            total += w * inner;
        }
        total
    }

    #[test]
    fn regularizer_cases() {
        let p = MoGmmParams::from_parts(
            1,
            1,
            1,
            Tensor::zeros(&[1, 1, 1]),
            Tensor::zeros(&[1, 1, 1]),
            Tensor::zeros(&[1, 1]),
            vec![1.0],
        )
        .unwrap();
        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        for v in [RegVariant::Adaptive, RegVariant::Plain] {
            let r = regularizer(&mut t, &head, v).unwrap();
            assert_eq!(t.item(r).unwrap(), 0.0);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let mut p = rand_params(&mut rng, 3, 4, 2);
            let w: Vec<f64> = vec![0.2, 0.3, 0.5];
            p = MoGmmParams::from_parts(3, 4, 2, p.a, p.b_tilde, p.eta_tilde, w).unwrap();
            let mut t = Tape::new();
            let head = p.bind(&mut t).unwrap();
            let ra = regularizer(&mut t, &head, RegVariant::Adaptive).unwrap();
            let rp = regularizer(&mut t, &head, RegVariant::Plain).unwrap();
            assert!((t.item(ra).unwrap() - reg_oracle(&p, true)).abs() < 1e-10);
            assert!((t.item(rp).unwrap() - reg_oracle(&p, false)).abs() < 1e-10);
            assert!(t.item(ra).unwrap() >= 0.0 && t.item(rp).unwrap() >= 0.0);
        }
    }

    #[test]
    fn total_loss_flag_semantics_and_recomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let p = rand_params(&mut rng, 3, 2, 3);
        let zs = rand_features(&mut rng, 4, 3);
        let labels = [0, 2, 1, 1];

        let mut t = Tape::new();
        let head = p.bind(&mut t).unwrap();
        let z = t.constant(zs.clone());
        let terms = total_loss(&mut t, &head, z, &labels, &LossConfig::ce_sgvb_only()).unwrap();
        let expect = t.item(terms.ce).unwrap() - t.item(terms.sgvb).unwrap();
        assert_eq!(t.item(terms.total).unwrap(), expect);
        assert!(terms.nsgvb.is_none() && terms.reg.is_none());

        let cfg = LossConfig::default();
        let terms = total_loss(&mut t, &head, z, &labels, &cfg).unwrap();
        let logits = head.classifier_logits_batch(&mut t, z).unwrap();
        let ce = cross_entropy(&mut t, logits, &labels).unwrap();
        let s = loss_sgvb(&mut t, &head, z, &labels).unwrap();
        let n = loss_nsgvb(&mut t, &head, z, &labels).unwrap();
        let r = regularizer(&mut t, &head, RegVariant::Adaptive).unwrap();
        let oracle = t.item(ce).unwrap() - (t.item(s).unwrap() - 4.0 * t.item(n).unwrap())
            + 1e-4 * t.item(r).unwrap();
        assert!((t.item(terms.total).unwrap() - oracle).abs() < 1e-10);
        assert!(t.item(terms.ce).unwrap() >= 0.0);

        let bad = LossConfig {
            gamma: -1.0,
            ..LossConfig::default()
        };
        assert!(matches!(
            total_loss(&mut t, &head, z, &labels, &bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn detached_features_receive_only_ce_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = rand_params(&mut rng, 2, 2, 2);
        let zs = rand_features(&mut rng, 3, 2);
        let labels = [0, 1, 0];
        let grad_for = |cfg: &LossConfig, root: fn(&LossTerms) -> Var| {
            let mut t = Tape::new();
            let head = p.bind(&mut t).unwrap();
            let z = t.leaf(zs.clone());
            let terms = total_loss(&mut t, &head, z, &labels, cfg).unwrap();
            let r = root(&terms);
            t.backward(r).unwrap();
            t.grad(z)
        };
        let detached = LossConfig {
            detach_features: true,
            ..LossConfig::default()
        };
        let g_total = grad_for(&detached, |t| t.total);
        let g_ce = grad_for(&detached, |t| t.ce);
        for (a, b) in g_total.data().iter().zip(g_ce.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
