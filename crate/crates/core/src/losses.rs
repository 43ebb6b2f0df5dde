//! Loss family: MAE/MSE baselines, threshold cross-entropy, the
//! intensity-weighted WMCE, latent and reconstruction L1 terms, and the
//! weighted overall combination.
//!
//! Each loss exists twice: a plain-arithmetic scalar version (used for
//! reporting and as an oracle) and a tape version that participates in
//! backprop. Tests pin the two against each other.

use std::collections::BTreeMap;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Weight on the reanalysis-modality reconstruction term; all other terms
/// enter the total with weight 1.
pub const RECON_WEIGHT_REANALYSIS: f64 = 0.1;

/// Precipitation/dry split of a truth grid at a normalized threshold.
/// `y >= tau` counts as precipitation (ties are events).
#[derive(Debug, Clone)]
pub struct EventMask {
    pub mask: Vec<bool>,
    pub n_precip: usize,
    pub n_dry: usize,
}

impl EventMask {
    pub fn from_truth(truth: &Tensor, tau: f64) -> Self {
        let mask: Vec<bool> = truth.data.iter().map(|&y| y >= tau).collect();
        let n_precip = mask.iter().filter(|&&m| m).count();
        let n_dry = mask.len() - n_precip;
        EventMask { mask, n_precip, n_dry }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn inverted(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| !m).collect()
    }
}

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            context: "loss inputs".into(),
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn ln_sigmoid(z: f64) -> f64 {
    // Stable log sigmoid: ln σ(z) = -ln(1 + e^{-z}).
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Intensity weight `w = ln(e + y°)` on raw (mm/h) truth.
pub fn intensity_weight(y_raw: f64) -> f64 {
    (std::f64::consts::E + y_raw).ln()
}

pub fn mae_loss(y: &Tensor, y_hat: &Tensor) -> Result<f64, TensorError> {
    check_shapes(y, y_hat)?;
    let n = y.numel() as f64;
    Ok(y.data.iter().zip(&y_hat.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

pub fn mse_loss(y: &Tensor, y_hat: &Tensor) -> Result<f64, TensorError> {
    check_shapes(y, y_hat)?;
    let n = y.numel() as f64;
    Ok(y.data.iter().zip(&y_hat.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Binary threshold cross-entropy on sigmoid exceedance probabilities.
pub fn ce_loss(y: &Tensor, y_hat: &Tensor, tau: f64) -> Result<f64, TensorError> {
    check_shapes(y, y_hat)?;
    let n = y.numel() as f64;
    let mut acc = 0.0;
    for (&yt, &yp) in y.data.iter().zip(&y_hat.data) {
        let z = yp - tau;
        acc -= if yt >= tau { ln_sigmoid(z) } else { ln_sigmoid(-z) };
    }
    Ok(acc / n)
}

/// The three WMCE components, each already divided by the full pixel count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WmceTerms {
    pub mae_term: f64,
    pub ce_precip_term: f64,
    pub ce_dry_term: f64,
}

impl WmceTerms {
    pub fn total(&self) -> f64 {
        self.mae_term + self.ce_precip_term + self.ce_dry_term
    }
}

/// Weighted MAE + CE. MAE applies only to precipitation pixels; both CE
/// branches use the sigmoid exceedance at `tau`; precipitation terms carry
/// the `ln(e + y°)` intensity weight.
pub fn wmce_loss(
    y_norm: &Tensor,
    y_hat_norm: &Tensor,
    y_raw: &Tensor,
    tau: f64,
) -> Result<(f64, WmceTerms), TensorError> {
    check_shapes(y_norm, y_hat_norm)?;
    check_shapes(y_norm, y_raw)?;
    if let Some(v) = y_raw.data.iter().find(|v| **v < 0.0) {
        return Err(TensorError::InvalidArg(format!(
            "raw intensity must be nonnegative, got {v}"
        )));
    }
    let n = y_norm.numel() as f64;
    let mut mae = 0.0;
    let mut ce_p = 0.0;
    let mut ce_d = 0.0;
    for i in 0..y_norm.numel() {
        let (yt, yp, yr) = (y_norm.data[i], y_hat_norm.data[i], y_raw.data[i]);
        let z = yp - tau;
        if yt >= tau {
            let w = intensity_weight(yr);
            mae += w * (yt - yp).abs();
            ce_p -= w * ln_sigmoid(z);
        } else {
            ce_d -= ln_sigmoid(-z);
        }
    }
    let terms = WmceTerms {
        mae_term: mae / n,
        ce_precip_term: ce_p / n,
        ce_dry_term: ce_d / n,
    };
    Ok((terms.total(), terms))
}

/// Mean absolute latent error across all predicted steps.
pub fn latent_loss(h_true: &[Tensor], h_pred: &[Tensor]) -> Result<f64, TensorError> {
    if h_true.len() != h_pred.len() {
        return Err(TensorError::ShapeMismatch {
            context: "latent list lengths".into(),
            lhs: vec![h_true.len()],
            rhs: vec![h_pred.len()],
        });
    }
    if h_true.is_empty() {
        return Err(TensorError::InvalidArg("empty latent lists".into()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (a, b) in h_true.iter().zip(h_pred) {
        check_shapes(a, b)?;
        acc += a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>();
        count += a.numel();
    }
    Ok(acc / count as f64)
}

/// Per-modality mean absolute reconstruction error.
pub fn recon_loss(
    pairs: &BTreeMap<String, (Vec<Tensor>, Vec<Tensor>)>,
) -> Result<BTreeMap<String, f64>, TensorError> {
    let mut out = BTreeMap::new();
    for (name, (truth, recon)) in pairs {
        out.insert(name.clone(), latent_loss(truth, recon)?);
    }
    Ok(out)
}

/// Component values of one training step, plus the weighted total.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub wmce_mae_term: f64,
    pub wmce_ce_precip_term: f64,
    pub wmce_ce_dry_term: f64,
    pub latent_term: f64,
    pub recon_terms: BTreeMap<String, f64>,
    pub total: f64,
}

pub fn recon_weight(modality: &str) -> f64 {
    if modality == "reanalysis" {
        RECON_WEIGHT_REANALYSIS
    } else {
        1.0
    }
}

/// WMCE + latent + recon with unit weights except the reanalysis recon.
pub fn overall_loss(
    wmce: &WmceTerms,
    latent: f64,
    recon: &BTreeMap<String, f64>,
) -> LossBreakdown {
    let mut total = wmce.total() + latent;
    for (name, v) in recon {
        total += recon_weight(name) * v;
    }
    LossBreakdown {
        wmce_mae_term: wmce.mae_term,
        wmce_ce_precip_term: wmce.ce_precip_term,
        wmce_ce_dry_term: wmce.ce_dry_term,
        latent_term: latent,
        recon_terms: recon.clone(),
        total,
    }
}

impl LossBreakdown {
    pub fn csv_header() -> &'static str {
        "step,wmce_mae,wmce_ce_precip,wmce_ce_dry,latent,recon_fine,recon_reanalysis,recon_satellite,total"
    }

    pub fn csv_row(&self, step: usize) -> String {
        let get = |k: &str| self.recon_terms.get(k).copied().unwrap_or(0.0);
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            step,
            self.wmce_mae_term,
            self.wmce_ce_precip_term,
            self.wmce_ce_dry_term,
            self.latent_term,
            get("qpe_radar"),
            get("reanalysis"),
            get("satellite"),
            self.total,
        )
    }
}

// ---- tape (differentiable) versions ----

/// Mean absolute error between a constant truth and a live prediction.
pub fn mae_var(t: &mut Tape, truth: &Tensor, pred: Var) -> Result<Var, TensorError> {
    if truth.shape != t.shape(pred) {
        return Err(TensorError::ShapeMismatch {
            context: "loss inputs".into(),
            lhs: truth.shape.clone(),
            rhs: t.shape(pred).to_vec(),
        });
    }
    let c = t.constant(truth.clone());
    let d = t.sub(c, pred);
    let a = t.abs(d);
    Ok(t.mean_all(a))
}

pub fn mse_var(t: &mut Tape, truth: &Tensor, pred: Var) -> Result<Var, TensorError> {
    if truth.shape != t.shape(pred) {
        return Err(TensorError::ShapeMismatch {
            context: "loss inputs".into(),
            lhs: truth.shape.clone(),
            rhs: t.shape(pred).to_vec(),
        });
    }
    let c = t.constant(truth.clone());
    let d = t.sub(c, pred);
    let sq = t.mul(d, d);
    Ok(t.mean_all(sq))
}

/// Tape version of [`ce_loss`]: unweighted threshold cross-entropy.
pub fn ce_var(
    t: &mut Tape,
    y_norm: &Tensor,
    pred: Var,
    tau: f64,
) -> Result<Var, TensorError> {
    if y_norm.shape != t.shape(pred) {
        return Err(TensorError::ShapeMismatch {
            context: "loss inputs".into(),
            lhs: y_norm.shape.clone(),
            rhs: t.shape(pred).to_vec(),
        });
    }
    let n = y_norm.numel() as f64;
    let mask = EventMask::from_truth(y_norm, tau);
    let mut acc = t.scalar_const(0.0);
    if mask.n_precip > 0 {
        let yp = t.masked_select(pred, &mask.mask);
        let z = t.add_scalar(yp, -tau);
        let sig = t.sigmoid(z);
        let ls = t.ln(sig);
        let s = t.sum_all(ls);
        acc = t.add(acc, s);
    }
    if mask.n_dry > 0 {
        let dry = mask.inverted();
        let yp = t.masked_select(pred, &dry);
        let neg = t.scale(yp, -1.0);
        let z = t.add_scalar(neg, tau);
        let sig = t.sigmoid(z);
        let ls = t.ln(sig);
        let s = t.sum_all(ls);
        acc = t.add(acc, s);
    }
    Ok(t.scale(acc, -1.0 / n))
}

#[derive(Debug, Clone, Copy)]
pub struct WmceVars {
    pub total: Var,
    pub mae_term: Var,
    pub ce_precip_term: Var,
    pub ce_dry_term: Var,
}

/// Tape WMCE. Masks are applied through gather, so dry pixels are exactly
/// absent from the MAE term rather than weighted to zero. The dry CE uses
/// the identity `ln(1 − σ(z)) = ln σ(−z)`.
pub fn wmce_var(
    t: &mut Tape,
    y_norm: &Tensor,
    pred: Var,
    y_raw: &Tensor,
    tau: f64,
) -> Result<WmceVars, TensorError> {
    if y_norm.shape != t.shape(pred) || y_raw.shape != y_norm.shape {
        return Err(TensorError::ShapeMismatch {
            context: "wmce inputs".into(),
            lhs: y_norm.shape.clone(),
            rhs: t.shape(pred).to_vec(),
        });
    }
    if let Some(v) = y_raw.data.iter().find(|v| **v < 0.0) {
        return Err(TensorError::InvalidArg(format!(
            "raw intensity must be nonnegative, got {v}"
        )));
    }
    let n = y_norm.numel() as f64;
    let mask = EventMask::from_truth(y_norm, tau);

    let mae_term;
    let ce_p_term;
    if mask.n_precip > 0 {
        let w: Vec<f64> = y_raw
            .data
            .iter()
            .zip(&mask.mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| intensity_weight(*v))
            .collect();
        let yt: Vec<f64> = y_norm
            .data
            .iter()
            .zip(&mask.mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .collect();
        let k = w.len();
        let w = t.constant(Tensor::new(vec![k], w));
        let yt = t.constant(Tensor::new(vec![k], yt));
        let yp = t.masked_select(pred, &mask.mask);

        let d = t.sub(yt, yp);
        let ad = t.abs(d);
        let wad = t.mul(w, ad);
        let s = t.sum_all(wad);
        mae_term = t.scale(s, 1.0 / n);

        let z = t.add_scalar(yp, -tau);
        let sig = t.sigmoid(z);
        let ls = t.ln(sig);
        let wls = t.mul(w, ls);
        let s = t.sum_all(wls);
        ce_p_term = t.scale(s, -1.0 / n);
    } else {
        mae_term = t.scalar_const(0.0);
        ce_p_term = t.scalar_const(0.0);
    }

    let ce_d_term = if mask.n_dry > 0 {
        let dry = mask.inverted();
        let yp = t.masked_select(pred, &dry);
        let neg = t.scale(yp, -1.0);
        let z = t.add_scalar(neg, tau);
        let sig = t.sigmoid(z);
        let ls = t.ln(sig);
        let s = t.sum_all(ls);
        t.scale(s, -1.0 / n)
    } else {
        t.scalar_const(0.0)
    };

    let partial = t.add(mae_term, ce_p_term);
    let total = t.add(partial, ce_d_term);
    Ok(WmceVars {
        total,
        mae_term,
        ce_precip_term: ce_p_term,
        ce_dry_term: ce_d_term,
    })
}

/// Mean absolute error over a list of (constant truth, live prediction)
/// pairs, pooled across all elements — the latent and recon term shape.
pub fn list_mae_var(t: &mut Tape, pairs: &[(Tensor, Var)]) -> Result<Var, TensorError> {
    if pairs.is_empty() {
        return Err(TensorError::InvalidArg("empty loss pair list".into()));
    }
    let total: usize = pairs.iter().map(|(a, _)| a.numel()).sum();
    let mut acc = t.scalar_const(0.0);
    for (truth, pred) in pairs {
        if truth.shape != t.shape(*pred) {
            return Err(TensorError::ShapeMismatch {
                context: "loss inputs".into(),
                lhs: truth.shape.clone(),
                rhs: t.shape(*pred).to_vec(),
            });
        }
        let c = t.constant(truth.clone());
        let d = t.sub(c, *pred);
        let a = t.abs(d);
        let s = t.sum_all(a);
        acc = t.add(acc, s);
    }
    Ok(t.scale(acc, 1.0 / total as f64))
}
