use crate::adapters::{Adapter, AdapterConfig, AdapterGrad};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Names of the four adapter sites, in forward order.
pub const SITE_NAMES: [&str; 4] = ["block0.proj", "block0.ffn", "block1.proj", "block1.ffn"];
pub const NUM_SITES: usize = SITE_NAMES.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Test hook: makes the network linear.
    Identity,
}

impl Activation {
    fn apply(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Tanh => m.map(f64::tanh),
            Activation::Identity => m.clone(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

/// A mini-batch in column layout: `x` is `d x n`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset, indices: &[usize]) -> Batch {
        let d = ds.dim();
        let n = indices.len();
        let mut x = Matrix::zeros(d, n);
        for (col, &i) in indices.iter().enumerate() {
            for (row, &v) in ds.features.row(i).iter().enumerate() {
                x.set(row, col, v);
            }
        }
        Batch {
            x,
            labels: indices.iter().map(|&i| ds.labels[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Two blocks of two frozen `d x d` linear layers, each followed by the
/// activation, with one adapter per layer and a trainable softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyModel {
    sites: Vec<Adapter>,
    head_w: Matrix,
    head_b: Vec<f64>,
    frozen: Vec<bool>,
    activation: Activation,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Cache {
    /// Input of each site; `inputs[NUM_SITES]` feeds the head.
    inputs: Vec<Matrix>,
    /// `A x` per site, `None` for frozen sites.
    projections: Vec<Option<Matrix>>,
    probs: Matrix,
    labels: Vec<usize>,
    with_base: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    /// `None` for frozen sites.
    pub sites: Vec<Option<AdapterGrad>>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    /// Gradients of the frozen base weights (pretraining only).
    pub base: Option<Vec<Matrix>>,
}

impl TinyModel {
    /// Builds a model over frozen `bases` (four `d x d` matrices) with fresh
    /// adapters and a zero head.
    pub fn new(rng: &mut Rng, bases: &[Matrix], classes: usize, config: &AdapterConfig) -> Result<Self> {
        if bases.len() != NUM_SITES {
            return Err(Error::contract(format!("expected {NUM_SITES} base weights")));
        }
        let d = bases[0].rows();
        if bases.iter().any(|b| b.shape() != (d, d)) {
            return Err(Error::contract("base weights must all be d x d"));
        }
        if classes < 2 {
            return Err(Error::contract("classes must be >= 2"));
        }
        let sites = bases
            .iter()
            .map(|b| Adapter::new(rng, b.clone(), config.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sites,
            head_w: Matrix::zeros(classes, d),
            head_b: vec![0.0; classes],
            frozen: vec![false; NUM_SITES],
            activation: Activation::Tanh,
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn dim(&self) -> usize {
        self.head_w.cols()
    }

    pub fn classes(&self) -> usize {
        self.head_w.rows()
    }

    pub fn sites(&self) -> &[Adapter] {
        &self.sites
    }

    pub(crate) fn sites_mut(&mut self) -> &mut [Adapter] {
        &mut self.sites
    }

    pub fn head_w(&self) -> &Matrix {
        &self.head_w
    }

    pub fn head_b(&self) -> &[f64] {
        &self.head_b
    }

    pub fn set_head(&mut self, w: Matrix, b: Vec<f64>) -> Result<()> {
        if w.shape() != self.head_w.shape() || b.len() != self.head_b.len() {
            return Err(Error::contract("head shape mismatch"));
        }
        self.head_w = w;
        self.head_b = b;
        Ok(())
    }

    /// Replaces the factors of site `n`; dead triplets stay zero.
    pub fn set_site_factors(&mut self, n: usize, b: Matrix, e: Vec<f64>, a: Matrix) -> Result<()> {
        let site = self
            .sites
            .get(n)
            .ok_or_else(|| Error::contract(format!("site {n} out of range")))?;
        self.sites[n] = site.clone().with_factors(b, e, a)?;
        Ok(())
    }

    pub(crate) fn head_mut(&mut self) -> (&mut Matrix, &mut Vec<f64>) {
        (&mut self.head_w, &mut self.head_b)
    }

    pub(crate) fn split_for_pretraining(&mut self) -> (&mut [Adapter], (&mut Matrix, &mut Vec<f64>)) {
        (&mut self.sites, (&mut self.head_w, &mut self.head_b))
    }

    pub fn head_len(&self) -> usize {
        self.head_w.data().len() + self.head_b.len()
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    /// Marks sites as excluded from adapter computation and training.
    pub fn set_frozen(&mut self, frozen: Vec<bool>) -> Result<()> {
        if frozen.len() != NUM_SITES {
            return Err(Error::contract("frozen flag count mismatch"));
        }
        self.frozen = frozen;
        Ok(())
    }

    pub fn average_live_rank(&self) -> f64 {
        self.sites.iter().map(|s| s.live_rank() as f64).sum::<f64>() / NUM_SITES as f64
    }

    /// Scalars held by trainable matrices, counted per matrix: every
    /// non-frozen site contributes its full factors, frozen sites nothing.
    pub fn trainable_param_count(&self) -> usize {
        let adapters: usize = self
            .sites
            .iter()
            .zip(&self.frozen)
            .filter(|(_, &f)| !f)
            .map(|(s, _)| s.r_init() * s.triplet_width())
            .sum();
        adapters + self.head_len()
    }

    /// Scalars at live triplet positions plus the head.
    pub fn live_param_count(&self) -> usize {
        self.sites.iter().map(|s| s.live_rank() * s.triplet_width()).sum::<usize>() + self.head_len()
    }

    /// Checksum over the frozen base weights.
    pub fn base_checksum(&self) -> u64 {
        self.sites
            .iter()
            .flat_map(|s| s.base().data())
            .fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01B3))
    }

    fn check_batch(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.dim() {
            return Err(Error::contract(format!(
                "batch has {} features, model expects {}",
                x.rows(),
                self.dim()
            )));
        }
        if x.cols() == 0 {
            return Err(Error::contract("batch must be non-empty"));
        }
        Ok(())
    }

    fn trunk(&self, x: &Matrix, keep: bool) -> Result<(Matrix, Vec<Matrix>, Vec<Option<Matrix>>)> {
        let mut inputs = Vec::with_capacity(NUM_SITES + 1);
        let mut projections = Vec::with_capacity(NUM_SITES);
        let mut h = x.clone();
        for (site, frozen) in self.sites.iter().zip(&self.frozen) {
            let (z, u) = site.forward_parts(&h, *frozen)?;
            let out = self.activation.apply(&z);
            if keep {
                inputs.push(h);
                projections.push(u);
            }
            h = out;
        }
        Ok((h, inputs, projections))
    }

    /// Class scores, `classes x n`.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.check_batch(x)?;
        let (h, _, _) = self.trunk(x, false)?;
        self.head_logits(&h)
    }

    fn head_logits(&self, h: &Matrix) -> Result<Matrix> {
        let mut z = self.head_w.matmul(h)?;
        for (c, b) in self.head_b.iter().enumerate() {
            for v in z.row_mut(c) {
                *v += b;
            }
        }
        Ok(z)
    }

    /// Mean softmax cross-entropy over the batch plus the backward cache.
    pub fn forward_loss(&self, batch: &Batch) -> Result<(f64, Cache)> {
        self.forward_loss_impl(batch, false)
    }

    pub(crate) fn forward_loss_impl(&self, batch: &Batch, with_base: bool) -> Result<(f64, Cache)> {
        self.check_batch(&batch.x)?;
        if batch.labels.len() != batch.x.cols() {
            return Err(Error::contract("label count does not match batch width"));
        }
        let (h, mut inputs, projections) = self.trunk(&batch.x, true)?;
        let logits = self.head_logits(&h)?;
        inputs.push(h);
        let (n, classes) = (batch.len(), self.classes());
        let mut probs = Matrix::zeros(classes, n);
        let mut loss = 0.0;
        for j in 0..n {
            let max = (0..classes).map(|c| logits.get(c, j)).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..classes).map(|c| (logits.get(c, j) - max).exp()).sum();
            let log_z = max + sum.ln();
            for c in 0..classes {
                probs.set(c, j, (logits.get(c, j) - log_z).exp());
            }
            loss += log_z - logits.get(batch.labels[j], j);
        }
        Ok((
            loss / n as f64,
            Cache {
                inputs,
                projections,
                probs,
                labels: batch.labels.clone(),
                with_base,
            },
        ))
    }

    /// Analytic gradients of the mean loss for every trainable parameter.
    pub fn backward(&self, cache: &Cache) -> Result<Grads> {
        let n = cache.labels.len();
        let mut dlogits = cache.probs.clone();
        for (j, &l) in cache.labels.iter().enumerate() {
            dlogits.set(l, j, dlogits.get(l, j) - 1.0);
        }
        for v in dlogits.data_mut() {
            *v /= n as f64;
        }
        let h_last = &cache.inputs[NUM_SITES];
        let head_w = dlogits.matmul_t(h_last)?;
        let head_b = (0..self.classes()).map(|c| dlogits.row(c).iter().sum()).collect();
        let mut g = self.head_w.t_matmul(&dlogits)?;

        let mut sites: Vec<Option<AdapterGrad>> = vec![None; NUM_SITES];
        let mut base = cache.with_base.then(|| vec![Matrix::zeros(0, 0); NUM_SITES]);
        for s in (0..NUM_SITES).rev() {
            let out = &cache.inputs[s + 1];
            let mut dz = g;
            for (v, &o) in dz.data_mut().iter_mut().zip(out.data()) {
                *v *= self.activation.grad_from_output(o);
            }
            let x = &cache.inputs[s];
            if let Some(base) = base.as_mut() {
                base[s] = dz.matmul_t(x)?;
            }
            let site = &self.sites[s];
            let need_dx = s > 0;
            let mut dx = if need_dx {
                Some(site.base().t_matmul(&dz)?)
            } else {
                None
            };
            if let (false, Some(u)) = (self.frozen[s], cache.projections[s].as_ref()) {
                let (grad, dx_adapter) = site.backward(x, u, &dz)?;
                if let Some(dx) = dx.as_mut() {
                    dx.add_assign(&dx_adapter)?;
                }
                sites[s] = Some(grad);
            }
            g = dx.unwrap_or_else(|| Matrix::zeros(0, 0));
        }
        Ok(Grads {
            sites,
            head_w,
            head_b,
            base,
        })
    }

    /// Predicted class per sample, ties to the lowest class index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.cols())
            .map(|j| {
                let mut best = 0;
                for c in 1..logits.rows() {
                    if logits.get(c, j) > logits.get(best, j) {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    /// Visits `(parameter, gradient)` slices in a fixed slot order:
    /// per site `B, E (TruncSvd only), A`, then head weights and bias.
    /// Frozen sites yield `None` gradients.
    pub(crate) fn param_grad_pairs<'a>(
        &'a mut self,
        grads: &'a Grads,
    ) -> Vec<(&'a mut [f64], Option<&'a [f64]>)> {
        let mut out = Vec::new();
        for (site, grad) in self.sites.iter_mut().zip(&grads.sites) {
            let (b, e, a) = site.trainable_mut();
            out.push((b, grad.as_ref().map(|g| g.b.data())));
            if let Some(e) = e {
                out.push((e, grad.as_ref().map(|g| g.e.as_slice())));
            }
            out.push((a, grad.as_ref().map(|g| g.a.data())));
        }
        out.push((self.head_w.data_mut(), Some(grads.head_w.data())));
        out.push((self.head_b.as_mut_slice(), Some(grads.head_b.as_slice())));
        out
    }
}

/// Fraction of samples classified correctly.
pub fn evaluate(model: &TinyModel, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract("evaluation dataset is empty"));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let batch = Batch::from_dataset(ds, &idx);
    let pred = model.predict(&batch.x)?;
    let correct = pred.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / ds.len() as f64)
}
