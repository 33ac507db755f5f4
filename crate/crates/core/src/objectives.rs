//! Training losses and their analytic gradients.
//!
//! Every loss is a pure `f64` function of its inputs. The `*_grad` variants
//! return the value together with the gradient with respect to the
//! differentiable inputs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Error, Result};

/// Per-term multipliers of the combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl LossWeights {
    pub const fn new(lambda1: f64, lambda2: f64, lambda3: f64, lambda4: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            lambda3,
            lambda4,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Temperatures {
    pub t_teacher: f64,
    pub t_student: f64,
    pub tau_contrast: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            t_teacher: 0.04,
            t_student: 0.1,
            tau_contrast: 0.2,
        }
    }
}

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("t_teacher", self.t_teacher),
            ("t_student", self.t_student),
            ("tau_contrast", self.tau_contrast),
        ] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {t}")));
            }
        }
        Ok(())
    }
}

/// The four loss values of one step, before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub dino: f64,
    pub domain: f64,
    pub contrast: f64,
    pub recon: f64,
}

fn log_softmax_row(row: ArrayView1<f64>, scale: f64) -> Array1<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    let lse = max + row.iter().map(|&v| (v * scale - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v * scale - lse)
}

fn softmax_row(row: ArrayView1<f64>, scale: f64) -> Array1<f64> {
    log_softmax_row(row, scale).mapv(f64::exp)
}

fn check_dino_shapes(teacher: ArrayView2<f64>, student: ArrayView2<f64>, center: ArrayView1<f64>) -> Result<()> {
    let g = teacher.nrows();
    if g < 2 {
        return Err(input_err!("self-distillation needs at least 2 teacher views, got {g}"));
    }
    let k = center.len();
    if teacher.ncols() != k || student.ncols() != k {
        return Err(shape_err!(
            "logit width mismatch: teacher {}, student {}, center {k}",
            teacher.ncols(),
            student.ncols()
        ));
    }
    if student.nrows() < g {
        return Err(shape_err!(
            "student must see every teacher view: {} student rows for {g} teacher rows",
            student.nrows()
        ));
    }
    Ok(())
}

/// Self-distillation loss for one sample.
///
/// `teacher` holds the G global-view logits, `student` the G global views
/// (same order) followed by the local views. The result is the mean over
/// ordered pairs `(i, j)`, `i != j`, of the cross-entropy between the
/// centered, sharpened teacher distribution `i` and the student distribution `j`.
pub fn dino_loss(
    teacher: ArrayView2<f64>,
    student: ArrayView2<f64>,
    center: ArrayView1<f64>,
    temps: &Temperatures,
) -> Result<f64> {
    Ok(dino_loss_grad(teacher, student, center, temps)?.0)
}

/// [`dino_loss`] plus its gradient with respect to the student logits.
/// The teacher side is a constant target.
pub fn dino_loss_grad(
    teacher: ArrayView2<f64>,
    student: ArrayView2<f64>,
    center: ArrayView1<f64>,
    temps: &Temperatures,
) -> Result<(f64, Array2<f64>)> {
    check_dino_shapes(teacher, student, center)?;
    let g = teacher.nrows();
    let v = student.nrows();
    let targets: Vec<Array1<f64>> = teacher
        .outer_iter()
        .map(|t| softmax_row((&t - &center).view(), 1.0 / temps.t_teacher))
        .collect();
    let pairs = (g * v - g) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(student.raw_dim());
    for j in 0..v {
        let log_p = log_softmax_row(student.row(j), 1.0 / temps.t_student);
        let p = log_p.mapv(f64::exp);
        let mut weight = 0.0;
        let mut target_sum = Array1::<f64>::zeros(p.len());
        for (i, q) in targets.iter().enumerate() {
            if i == j {
                continue;
            }
            loss -= q.dot(&log_p);
            target_sum += q;
            weight += 1.0;
        }
        // d/ds of -q·log_softmax(s/T) is (softmax - q)/T per pair
        let row = (&p * weight - &target_sum) / (temps.t_student * pairs);
        grad.row_mut(j).assign(&row);
    }
    Ok((loss / pairs, grad))
}

/// EMA of the center toward the mean teacher logit over every row given.
pub fn update_center(center: ArrayView1<f64>, teacher_logits: ArrayView2<f64>, momentum: f64) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("center momentum must lie in [0,1], got {momentum}")));
    }
    if teacher_logits.nrows() == 0 {
        return Err(input_err!("cannot update the center from an empty batch"));
    }
    if teacher_logits.ncols() != center.len() {
        return Err(shape_err!(
            "center has {} entries, logits have {} columns",
            center.len(),
            teacher_logits.ncols()
        ));
    }
    let mean = teacher_logits.mean_axis(Axis(0)).expect("nonempty");
    Ok(&center * momentum + mean * (1.0 - momentum))
}

fn check_labels(labels: &[u8], rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(shape_err!("{rows} logit rows but {} labels", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(input_err!("domain label must be 0 or 1, got {bad}"));
    }
    Ok(())
}

/// Mean two-class cross-entropy (`0 = he`, `1 = sim`).
pub fn domain_loss(logits: ArrayView2<f64>, labels: &[u8]) -> Result<f64> {
    Ok(domain_loss_grad(logits, labels)?.0)
}

pub fn domain_loss_grad(logits: ArrayView2<f64>, labels: &[u8]) -> Result<(f64, Array2<f64>)> {
    if logits.ncols() != 2 {
        return Err(shape_err!("domain logits need 2 columns, got {}", logits.ncols()));
    }
    check_labels(labels, logits.nrows())?;
    if labels.is_empty() {
        return Err(input_err!("domain loss of an empty batch"));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (r, &label) in labels.iter().enumerate() {
        let log_p = log_softmax_row(logits.row(r), 1.0);
        loss -= log_p[label as usize];
        let mut g = log_p.mapv(f64::exp);
        g[label as usize] -= 1.0;
        grad.row_mut(r).assign(&(g / n));
    }
    Ok((loss / n, grad))
}

const NORM_GUARD: f64 = 1e-8;

fn normalize_rows(z: ArrayView2<f64>, which: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| !(n >= NORM_GUARD)) {
        return Err(Error::Numeric(format!(
            "{which} row {i} has norm {} below {NORM_GUARD}",
            norms[i]
        )));
    }
    let u = &z / &norms.view().insert_axis(Axis(1));
    Ok((u, norms))
}

/// Symmetric paired contrastive loss over registered rows.
///
/// For each anchor the candidates are all `2B` embeddings except the anchor
/// itself; the positive is the same-index row of the other modality.
pub fn paired_contrastive_loss(z_he: ArrayView2<f64>, z_sim: ArrayView2<f64>, tau: f64) -> Result<f64> {
    Ok(paired_contrastive_loss_grad(z_he, z_sim, tau)?.0)
}

/// [`paired_contrastive_loss`] with gradients for `z_he` and `z_sim`.
pub fn paired_contrastive_loss_grad(
    z_he: ArrayView2<f64>,
    z_sim: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if z_he.dim() != z_sim.dim() {
        return Err(shape_err!("paired inputs differ in shape: {:?} vs {:?}", z_he.dim(), z_sim.dim()));
    }
    let b = z_he.nrows();
    if b == 0 {
        return Err(input_err!("contrastive loss of an empty batch"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let z = ndarray::concatenate(Axis(0), &[z_he, z_sim]).map_err(|e| shape_err!("{e}"))?;
    let (u, norms) = normalize_rows(z.view(), "contrastive embedding")?;
    let n = 2 * b;
    let sim = u.dot(&u.t()) / tau;
    let mut loss = 0.0;
    let mut d_sim = Array2::<f64>::zeros((n, n));
    for a in 0..n {
        let pos = (a + b) % n;
        let row = sim.row(a);
        let max = (0..n).filter(|&k| k != a).fold(f64::NEG_INFINITY, |m, k| m.max(row[k]));
        let denom: f64 = (0..n).filter(|&k| k != a).map(|k| (row[k] - max).exp()).sum();
        let lse = max + denom.ln();
        loss -= row[pos] - lse;
        for k in (0..n).filter(|&k| k != a) {
            d_sim[[a, k]] = (row[k] - lse).exp() / n as f64;
        }
        d_sim[[a, pos]] -= 1.0 / n as f64;
    }
    let d_u = (&d_sim + &d_sim.t()).dot(&u) / tau;
    // project out the radial component and undo the norm
    let radial = (&d_u * &u).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_z = (&d_u - &(&u * &radial)) / &norms.insert_axis(Axis(1));
    let g_he = d_z.slice(ndarray::s![..b, ..]).to_owned();
    let g_sim = d_z.slice(ndarray::s![b.., ..]).to_owned();
    Ok((loss / n as f64, g_he, g_sim))
}

/// Mean squared error per element and its gradient with respect to `pred`.
pub fn mse_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(input_err!(
            "reconstruction shape mismatch: {} predicted values for {} targets",
            pred.len(),
            target.len()
        ));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            loss += (p - t) * (p - t);
            2.0 * (p - t) / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Cross-reconstruction loss from decoder outputs: `he_from_sim` is the H&E
/// decoder applied to SIM embeddings and is scored against `v_he`, and
/// symmetrically for `sim_from_he`.
pub fn cross_recon_loss(he_from_sim: &[f64], v_he: &[f64], sim_from_he: &[f64], v_sim: &[f64]) -> Result<f64> {
    Ok(cross_recon_loss_grad(he_from_sim, v_he, sim_from_he, v_sim)?.0)
}

pub fn cross_recon_loss_grad(
    he_from_sim: &[f64],
    v_he: &[f64],
    sim_from_he: &[f64],
    v_sim: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (a, ga) = mse_grad(he_from_sim, v_he)?;
    let (b, gb) = mse_grad(sim_from_he, v_sim)?;
    Ok((a + b, ga, gb))
}

/// Weighted sum of the loss components.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.lambda1 * c.dino + w.lambda2 * c.domain + w.lambda3 * c.contrast + w.lambda4 * c.recon
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn uniform_dino_is_log_k() {
        let t = Array2::zeros((2, 4));
        let s = Array2::zeros((6, 4));
        let c = Array1::zeros(4);
        let l = dino_loss(t.view(), s.view(), c.view(), &Temperatures::default()).unwrap();
        assert_abs_diff_eq!(l, 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn dino_needs_two_teacher_views() {
        let t = Array2::zeros((1, 4));
        let c = Array1::zeros(4);
        assert!(matches!(
            dino_loss(t.view(), t.view(), c.view(), &Temperatures::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn center_update_arithmetic() {
        let c = Array1::zeros(2);
        let logits = array![[1.0, 3.0], [3.0, 5.0]];
        let out = update_center(c.view(), logits.view(), 0.5).unwrap();
        assert_eq!(out, array![1.0, 2.0]);
    }

    #[test]
    fn domain_rejects_bad_label() {
        let logits = Array2::zeros((1, 2));
        assert!(domain_loss(logits.view(), &[2]).is_err());
    }

    #[test]
    fn zero_norm_row_is_a_numeric_error() {
        let a = array![[0.0, 0.0], [1.0, 0.0]];
        let b = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            paired_contrastive_loss(a.view(), b.view(), 0.5),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn recon_shape_mismatch_is_input_error() {
        assert!(matches!(mse_grad(&[1.0], &[1.0, 2.0]), Err(Error::Input(_))));
    }
}
