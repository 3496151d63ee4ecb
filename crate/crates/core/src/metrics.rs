//! Discrepancy between global and local adapter updates, and a Monte Carlo
//! estimate of client drift variance for the two adapter factorizations.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

fn check_shapes(global: &Matrix, locals: &[Matrix]) -> Result<()> {
    if locals.is_empty() {
        return Err(Error::contract("at least one local update is required"));
    }
    if let Some(bad) = locals.iter().find(|l| l.shape() != global.shape()) {
        return Err(Error::contract(format!(
            "local shape {:?} does not match global {:?}",
            bad.shape(),
            global.shape()
        )));
    }
    Ok(())
}

/// Sum over clients of `||global - local||_F`.
pub fn mag_discrepancy(global: &Matrix, locals: &[Matrix]) -> Result<f64> {
    check_shapes(global, locals)?;
    let mut total = 0.0;
    for local in locals {
        total += global.sub(local)?.frobenius_norm();
    }
    Ok(total)
}

/// Mean cosine similarity between the global update and each local update.
/// Undefined when any operand has zero norm.
pub fn dir_discrepancy(global: &Matrix, locals: &[Matrix]) -> Result<f64> {
    check_shapes(global, locals)?;
    let g_norm = global.frobenius_norm();
    if g_norm == 0.0 {
        return Err(Error::UndefinedMetric("global update has zero norm".into()));
    }
    let mut total = 0.0;
    for (i, local) in locals.iter().enumerate() {
        let l_norm = local.frobenius_norm();
        if l_norm == 0.0 {
            return Err(Error::UndefinedMetric(format!("local update {i} has zero norm")));
        }
        let cos = global.frobenius_dot(local)? / (g_norm * l_norm);
        total += cos.clamp(-1.0, 1.0);
    }
    Ok(total / locals.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DriftFlavor {
    /// `Delta W = B A`.
    Ba,
    /// `Delta W = B E A` with diagonal `E`.
    Bea,
}

impl DriftFlavor {
    pub fn name(self) -> &'static str {
        match self {
            DriftFlavor::Ba => "BA",
            DriftFlavor::Bea => "BEA",
        }
    }
}

/// Second-moment model of client factor vectors: `E|b_i|^2 = tau_b`,
/// `E[b_i . b_j] = rho_b` for `i != j` (likewise for `a`), `E[e_i^2] = tau_e`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftParams {
    pub d: usize,
    pub r_values: Vec<usize>,
    pub tau_b: f64,
    pub rho_b: f64,
    pub tau_a: f64,
    pub rho_a: f64,
    pub tau_e: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for DriftParams {
    fn default() -> Self {
        Self {
            d: 64,
            r_values: vec![2, 4, 8, 16, 32],
            tau_b: 1.0,
            rho_b: 0.8,
            tau_a: 1.0,
            rho_a: 0.8,
            tau_e: 1.0,
            trials: 2000,
            seed: 0,
        }
    }
}

impl DriftParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 {
            return bad("d must be >= 1".into());
        }
        if self.r_values.is_empty() || self.r_values.contains(&0) {
            return bad("r_values must be a non-empty list of positive ranks".into());
        }
        for (name, rho, tau) in [("b", self.rho_b, self.tau_b), ("a", self.rho_a, self.tau_a)] {
            if !(rho.is_finite() && tau.is_finite() && 0.0 <= rho && rho < tau) {
                return bad(format!("0 <= rho_{name} < tau_{name} violated ({rho}, {tau})"));
            }
        }
        if !(self.tau_e.is_finite() && self.tau_e > 0.0) {
            return bad(format!("tau_e > 0 violated ({})", self.tau_e));
        }
        if self.trials < 100 {
            return bad(format!("trials >= 100 violated ({})", self.trials));
        }
        Ok(())
    }
}

/// Exact expectation of `||Delta W||_F^2` under [`DriftParams`].
pub fn drift_closed_form(params: &DriftParams, flavor: DriftFlavor, r: usize) -> f64 {
    let r = r as f64;
    match flavor {
        DriftFlavor::Ba => r * params.tau_b * params.tau_a + r * (r - 1.0) * params.rho_b * params.rho_a,
        DriftFlavor::Bea => r * params.tau_e * params.tau_b * params.tau_a,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftRow {
    pub flavor: DriftFlavor,
    pub r: usize,
    pub mc_mean: f64,
    pub stderr: f64,
    pub closed_form: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftReport {
    /// All `BA` rows in `r_values` order, then all `BEA` rows.
    pub rows: Vec<DriftRow>,
    pub slope_ba: f64,
    pub slope_bea: f64,
}

impl DriftReport {
    pub fn slope(&self, flavor: DriftFlavor) -> f64 {
        match flavor {
            DriftFlavor::Ba => self.slope_ba,
            DriftFlavor::Bea => self.slope_bea,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("flavor,r,mc_mean,stderr,closed_form,slope\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.flavor.name(),
                row.r,
                row.mc_mean,
                row.stderr,
                row.closed_form,
                self.slope(row.flavor)
            ));
        }
        out
    }
}

/// Columns are `mu + xi_i` with `mu ~ N(0, rho/d I)`, `xi_i ~ N(0, (tau-rho)/d I)`.
fn correlated_vectors(rng: &mut Rng, d: usize, r: usize, tau: f64, rho: f64) -> Vec<Vec<f64>> {
    let shared_std = (rho / d as f64).sqrt();
    let own_std = ((tau - rho) / d as f64).sqrt();
    let mu: Vec<f64> = (0..d).map(|_| shared_std * rng.normal()).collect();
    (0..r)
        .map(|_| mu.iter().map(|m| m + own_std * rng.normal()).collect())
        .collect()
}

fn gram(vectors: &[Vec<f64>]) -> Vec<f64> {
    let r = vectors.len();
    let mut g = vec![0.0; r * r];
    for i in 0..r {
        for j in i..r {
            let v: f64 = vectors[i].iter().zip(&vectors[j]).map(|(x, y)| x * y).sum();
            g[i * r + j] = v;
            g[j * r + i] = v;
        }
    }
    g
}

/// One draw of `(||BA||_F^2, ||BEA||_F^2)` via
/// `||B D A||_F^2 = sum_ij d_i d_j (b_i . b_j)(a_i . a_j)`.
fn drift_trial(params: &DriftParams, r: usize, rng: &mut Rng) -> (f64, f64) {
    let b = correlated_vectors(rng, params.d, r, params.tau_b, params.rho_b);
    let a = correlated_vectors(rng, params.d, r, params.tau_a, params.rho_a);
    let e_std = params.tau_e.sqrt();
    let e: Vec<f64> = (0..r).map(|_| e_std * rng.normal()).collect();
    let gb = gram(&b);
    let ga = gram(&a);
    let (mut ba, mut bea) = (0.0, 0.0);
    for i in 0..r {
        for j in 0..r {
            let p = gb[i * r + j] * ga[i * r + j];
            ba += p;
            bea += e[i] * e[j] * p;
        }
    }
    (ba, bea)
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Trials run in parallel, each on its own substream keyed by `(r, trial)`;
/// results are reduced in trial order.
pub fn drift_monte_carlo(params: &DriftParams) -> Result<DriftReport> {
    params.validate()?;
    let root = Rng::new(params.seed);
    let mut ba_rows = Vec::new();
    let mut bea_rows = Vec::new();
    for &r in &params.r_values {
        let stream = root.fork(r as u64);
        let draws: Vec<(f64, f64)> = (0..params.trials)
            .into_par_iter()
            .map(|trial| drift_trial(params, r, &mut stream.fork(trial as u64)))
            .collect();
        let ba: Vec<f64> = draws.iter().map(|d| d.0).collect();
        let bea: Vec<f64> = draws.iter().map(|d| d.1).collect();
        for (flavor, xs, rows) in [
            (DriftFlavor::Ba, &ba, &mut ba_rows),
            (DriftFlavor::Bea, &bea, &mut bea_rows),
        ] {
            let (mc_mean, stderr) = mean_and_stderr(xs);
            rows.push(DriftRow {
                flavor,
                r,
                mc_mean,
                stderr,
                closed_form: drift_closed_form(params, flavor, r),
            });
        }
    }
    let rs: Vec<f64> = params.r_values.iter().map(|&r| r as f64).collect();
    let slope = |rows: &[DriftRow]| {
        if rs.len() < 2 {
            return f64::NAN;
        }
        log_log_slope(&rs, &rows.iter().map(|r| r.mc_mean).collect::<Vec<_>>())
    };
    let slope_ba = slope(&ba_rows);
    let slope_bea = slope(&bea_rows);
    ba_rows.extend(bea_rows);
    Ok(DriftReport {
        rows: ba_rows,
        slope_ba,
        slope_bea,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn mag_hand_cases() {
        let g = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(mag_discrepancy(&g, &[g.clone(), g.clone()]).unwrap(), 0.0);
        let l = m(&[&[4.0, 6.0], &[3.0, 4.0]]);
        assert_eq!(mag_discrepancy(&g, &[l.clone()]).unwrap(), 5.0);
        assert_eq!(mag_discrepancy(&g, &[l.clone(), l.clone(), l]).unwrap(), 15.0);
    }

    #[test]
    fn dir_hand_cases() {
        let g = m(&[&[1.0, -2.0], &[0.5, 3.0]]);
        assert_eq!(dir_discrepancy(&g, &[g.clone()]).unwrap(), 1.0);
        assert_eq!(dir_discrepancy(&g, &[g.scale(-1.0)]).unwrap(), -1.0);
        let orth = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let other = m(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert_eq!(dir_discrepancy(&orth, &[other]).unwrap(), 0.0);
    }

    #[test]
    fn dir_zero_norm_is_undefined() {
        let g = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let z = Matrix::zeros(2, 2);
        assert!(matches!(dir_discrepancy(&g, &[z.clone()]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(dir_discrepancy(&z, &[g]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let g = Matrix::zeros(2, 2);
        assert!(matches!(mag_discrepancy(&g, &[Matrix::zeros(2, 3)]), Err(Error::Contract(_))));
        assert!(matches!(mag_discrepancy(&g, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn dir_in_unit_interval() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let g = Matrix::gaussian(&mut rng, 3, 3, 1.0).unwrap();
            let l = Matrix::gaussian(&mut rng, 3, 3, 1.0).unwrap();
            let v = dir_discrepancy(&g, &[l]).unwrap();
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn closed_form_hand_values() {
        let p = DriftParams {
            rho_b: 0.5,
            rho_a: 0.5,
            ..DriftParams::default()
        };
        assert_eq!(drift_closed_form(&p, DriftFlavor::Ba, 8), 22.0);
        assert_eq!(drift_closed_form(&p, DriftFlavor::Bea, 8), 8.0);
        assert_eq!(drift_closed_form(&p, DriftFlavor::Ba, 1), 1.0);
    }

    #[test]
    fn trial_matches_explicit_product() {
        let p = DriftParams::default();
        let r = 3;
        let mut rng = Rng::new(11);
        let (ba, bea) = drift_trial(&p, r, &mut rng.clone());
        let b = correlated_vectors(&mut rng, p.d, r, p.tau_b, p.rho_b);
        let a = correlated_vectors(&mut rng, p.d, r, p.tau_a, p.rho_a);
        let e: Vec<f64> = (0..r).map(|_| rng.normal()).collect();
        let bm = Matrix::from_vec(r, p.d, b.concat()).unwrap().transpose();
        let am = Matrix::from_vec(r, p.d, a.concat()).unwrap();
        let mut ea = am.clone();
        for i in 0..r {
            for v in ea.row_mut(i) {
                *v *= e[i];
            }
        }
        let want_ba = bm.matmul(&am).unwrap().frobenius_norm().powi(2);
        let want_bea = bm.matmul(&ea).unwrap().frobenius_norm().powi(2);
        assert!((ba - want_ba).abs() < 1e-9 * want_ba);
        assert!((bea - want_bea).abs() < 1e-9 * want_bea);
    }

    #[test]
    fn independent_case_is_linear() {
        let p = DriftParams {
            rho_b: 0.0,
            rho_a: 0.0,
            trials: 500,
            seed: 5,
            ..DriftParams::default()
        };
        let rep = drift_monte_carlo(&p).unwrap();
        assert!((0.9..=1.1).contains(&rep.slope_ba), "{}", rep.slope_ba);
        assert!((0.9..=1.1).contains(&rep.slope_bea), "{}", rep.slope_bea);
    }

    #[test]
    fn report_is_deterministic_and_shaped() {
        let p = DriftParams {
            trials: 100,
            r_values: vec![2, 4],
            ..DriftParams::default()
        };
        let a = drift_monte_carlo(&p).unwrap();
        assert_eq!(a, drift_monte_carlo(&p).unwrap());
        assert_eq!(a.to_csv().lines().count(), 5);
    }

    #[test]
    fn invalid_params_rejected() {
        let few = DriftParams {
            trials: 99,
            ..DriftParams::default()
        };
        assert!(matches!(few.validate(), Err(Error::Config(_))));
        let rho = DriftParams {
            rho_b: 1.0,
            ..DriftParams::default()
        };
        assert!(rho.validate().is_err());
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(2)).collect();
        assert!((log_log_slope(&xs, &ys) - 2.0).abs() < 1e-12);
    }
}
