//! Frozen linear layers with trainable low-rank adapters.
//!
//! Two flavors share one representation:
//!
//! * `TruncSvd`: `W = W_pre + (alpha / r) * B * diag(E) * A`, with `B`, `A`
//!   Gaussian and `E` zero at construction.
//! * `Lora`: `W = W_pre + (alpha / r) * B * A`, with `B` zero and `A`
//!   Gaussian. The diagonal is held fixed at one and is never trained or
//!   transmitted.
//!
//! A *triplet* `i` is `(column i of B, E[i], row i of A)`. Dead triplets are
//! hard-zeroed and stay dead.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flavor {
    Lora,
    TruncSvd,
}

impl Flavor {
    /// Whether the diagonal `E` is a trainable, transmitted parameter.
    pub fn has_diag(self) -> bool {
        matches!(self, Flavor::TruncSvd)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    /// Initial rank `r`.
    pub r_init: usize,
    /// Scaling numerator; the adapter output is scaled by `alpha / r_init`.
    pub alpha: f64,
    pub flavor: Flavor,
    /// Standard deviation of the Gaussian factors at construction.
    pub init_std: f64,
}

impl AdapterConfig {
    pub fn new(flavor: Flavor, r_init: usize) -> Self {
        Self {
            r_init,
            alpha: 16.0,
            flavor,
            init_std: 0.02,
        }
    }

    pub fn validate(&self, d_out: usize, d_in: usize) -> Result<()> {
        if self.r_init == 0 {
            return Err(Error::contract("r_init must be >= 1"));
        }
        if 2 * self.r_init > d_out.min(d_in) {
            return Err(Error::contract(format!(
                "r_init {} exceeds min(d_out, d_in)/2 for a {d_out}x{d_in} layer",
                self.r_init
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::contract("alpha must be > 0"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::contract("init_std must be > 0"));
        }
        Ok(())
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        self.alpha / self.r_init as f64
    }
}

/// Gradients of a loss with respect to one adapter's factors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrad {
    pub b: Matrix,
    /// Empty for LoRA.
    pub e: Vec<f64>,
    pub a: Matrix,
}

/// A frozen base weight plus its low-rank adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    base: Matrix,
    b: Matrix,
    e: Vec<f64>,
    a: Matrix,
    alive: Vec<bool>,
    config: AdapterConfig,
}

/// Truncated-SVD adapter: Gaussian `B`, `A`, zero `E`.
pub fn new_svd_adapter(rng: &mut Rng, base: Matrix, config: AdapterConfig) -> Result<Adapter> {
    if config.flavor != Flavor::TruncSvd {
        return Err(Error::contract("new_svd_adapter requires the TruncSvd flavor"));
    }
    let (d_out, d_in) = base.shape();
    config.validate(d_out, d_in)?;
    let r = config.r_init;
    let b = Matrix::gaussian(rng, d_out, r, config.init_std)?;
    let a = Matrix::gaussian(rng, r, d_in, config.init_std)?;
    Ok(Adapter {
        base,
        b,
        e: vec![0.0; r],
        a,
        alive: vec![true; r],
        config,
    })
}

/// LoRA adapter: zero `B`, Gaussian `A`.
pub fn new_lora_adapter(rng: &mut Rng, base: Matrix, config: AdapterConfig) -> Result<Adapter> {
    if config.flavor != Flavor::Lora {
        return Err(Error::contract("new_lora_adapter requires the Lora flavor"));
    }
    let (d_out, d_in) = base.shape();
    config.validate(d_out, d_in)?;
    let r = config.r_init;
    let a = Matrix::gaussian(rng, r, d_in, config.init_std)?;
    Ok(Adapter {
        b: Matrix::zeros(d_out, r),
        base,
        e: vec![1.0; r],
        a,
        alive: vec![true; r],
        config,
    })
}

impl Adapter {
    /// Constructs an adapter of the configured flavor.
    pub fn new(rng: &mut Rng, base: Matrix, config: AdapterConfig) -> Result<Adapter> {
        match config.flavor {
            Flavor::TruncSvd => new_svd_adapter(rng, base, config),
            Flavor::Lora => new_lora_adapter(rng, base, config),
        }
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn flavor(&self) -> Flavor {
        self.config.flavor
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    /// Only central pretraining touches the base, before any adapter is trained.
    pub(crate) fn base_mut(&mut self) -> &mut Matrix {
        &mut self.base
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn e(&self) -> &[f64] {
        &self.e
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn alive(&self) -> &[bool] {
        &self.alive
    }

    pub fn r_init(&self) -> usize {
        self.config.r_init
    }

    pub fn d_out(&self) -> usize {
        self.base.rows()
    }

    pub fn d_in(&self) -> usize {
        self.base.cols()
    }

    pub fn live_rank(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    /// Number of scalars one triplet carries: `d_out + d_in (+ 1 for E)`.
    pub fn triplet_width(&self) -> usize {
        self.d_out() + self.d_in() + usize::from(self.flavor().has_diag())
    }

    /// Materialized `(alpha / r) * B * diag(E) * A`.
    pub fn delta_w(&self) -> Matrix {
        let s = self.config.scale();
        let mut be = self.b.clone();
        for row in 0..be.rows() {
            for (v, e) in be.row_mut(row).iter_mut().zip(&self.e) {
                *v *= s * e;
            }
        }
        be.matmul(&self.a).expect("adapter factor shapes agree")
    }

    /// `(W_pre + delta_w) * x` evaluated in factored form.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_parts(x, false)?.0)
    }

    /// Factored forward returning `(y, A x)`. With `skip_adapter` only the
    /// frozen path `W_pre x` is evaluated and the second element is `None`.
    pub(crate) fn forward_parts(
        &self,
        x: &Matrix,
        skip_adapter: bool,
    ) -> Result<(Matrix, Option<Matrix>)> {
        if x.rows() != self.d_in() {
            return Err(Error::contract(format!(
                "adapter input has {} rows, expected {}",
                x.rows(),
                self.d_in()
            )));
        }
        let mut y = self.base.matmul(x)?;
        if skip_adapter {
            return Ok((y, None));
        }
        let u = self.a.matmul(x)?;
        let s = self.config.scale();
        let mut v = u.clone();
        for i in 0..v.rows() {
            let w = s * self.e[i];
            for val in v.row_mut(i) {
                *val *= w;
            }
        }
        y.add_assign(&self.b.matmul(&v)?)?;
        Ok((y, Some(u)))
    }

    /// Chain rule through the factored forward.
    ///
    /// `x` is the layer input, `u = A x` from [`Adapter::forward_parts`] and
    /// `dy` the upstream gradient. Returns the factor gradients (zero at dead
    /// triplets) and the adapter's contribution `A^T (s E ⊙ B^T dy)` to the
    /// input gradient; the frozen path `W_pre^T dy` is left to the caller.
    pub(crate) fn backward(&self, x: &Matrix, u: &Matrix, dy: &Matrix) -> Result<(AdapterGrad, Matrix)> {
        let s = self.config.scale();
        let r = self.r_init();
        // dv = s * B^T dy, with v = E ⊙ u
        let mut dv = self.b.t_matmul(dy)?;
        for val in dv.data_mut() {
            *val *= s;
        }
        let mut v = u.clone();
        for i in 0..r {
            let e = self.e[i];
            for val in v.row_mut(i) {
                *val *= e;
            }
        }
        // dB = s * dy v^T
        let mut db = dy.matmul_t(&v)?;
        for val in db.data_mut() {
            *val *= s;
        }
        let de = if self.flavor().has_diag() {
            (0..r)
                .map(|i| dv.row(i).iter().zip(u.row(i)).map(|(g, x)| g * x).sum())
                .collect()
        } else {
            Vec::new()
        };
        let mut du = dv;
        for i in 0..r {
            let e = self.e[i];
            for val in du.row_mut(i) {
                *val *= e;
            }
        }
        let dx = self.a.t_matmul(&du)?;
        let mut grad = AdapterGrad {
            b: db,
            e: de,
            a: du.matmul_t(x)?,
        };
        for i in (0..r).filter(|&i| !self.alive[i]) {
            for row in 0..grad.b.rows() {
                grad.b.set(row, i, 0.0);
            }
            if let Some(g) = grad.e.get_mut(i) {
                *g = 0.0;
            }
            grad.a.row_mut(i).fill(0.0);
        }
        Ok((grad, dx))
    }

    /// Prunes every triplet whose mask entry is false. Pruning is monotone:
    /// a mask may not revive a dead triplet.
    pub fn apply_mask(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.r_init() {
            return Err(Error::contract(format!(
                "mask length {} does not match r_init {}",
                mask.len(),
                self.r_init()
            )));
        }
        if mask.iter().zip(&self.alive).any(|(&m, &a)| m && !a) {
            return Err(Error::contract("mask attempts to revive a dead triplet"));
        }
        for i in 0..mask.len() {
            if !mask[i] {
                self.kill(i);
            }
        }
        Ok(())
    }

    fn kill(&mut self, i: usize) {
        self.alive[i] = false;
        self.e[i] = 0.0;
        for row in 0..self.b.rows() {
            self.b.set(row, i, 0.0);
        }
        self.a.row_mut(i).fill(0.0);
    }

    /// Column `i` of `B`, `E[i]` and row `i` of `A`.
    pub fn triplet(&self, i: usize) -> (Vec<f64>, f64, &[f64]) {
        (self.b.col(i), self.e[i], self.a.row(i))
    }

    /// Overwrites triplet `i`. For LoRA the diagonal value is ignored.
    pub(crate) fn set_triplet(&mut self, i: usize, b_col: &[f64], e: f64, a_row: &[f64]) {
        for (row, &v) in b_col.iter().enumerate() {
            self.b.set(row, i, v);
        }
        if self.flavor().has_diag() {
            self.e[i] = e;
        }
        self.a.row_mut(i).copy_from_slice(a_row);
    }

    /// Mutable views of the trainable factors `(B, E, A)`; `E` is `None` for LoRA.
    pub(crate) fn trainable_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>, &mut [f64]) {
        let e = if self.config.flavor.has_diag() {
            Some(self.e.as_mut_slice())
        } else {
            None
        };
        (self.b.data_mut(), e, self.a.data_mut())
    }

    /// Replaces the factors wholesale (test and fixture use).
    pub fn with_factors(mut self, b: Matrix, e: Vec<f64>, a: Matrix) -> Result<Self> {
        let r = self.r_init();
        if b.shape() != (self.d_out(), r) || a.shape() != (r, self.d_in()) || e.len() != r {
            return Err(Error::contract("factor shapes do not match the adapter"));
        }
        self.b = b;
        self.a = a;
        if self.flavor().has_diag() {
            self.e = e;
        }
        let alive = self.alive.clone();
        for (i, live) in alive.into_iter().enumerate() {
            if !live {
                self.kill(i);
            }
        }
        Ok(self)
    }
}
