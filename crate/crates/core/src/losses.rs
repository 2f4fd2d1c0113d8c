//! Training objectives.
//!
//! All losses are scalar [`Var`]s on the caller's tape and are generic over
//! the element type so they can be checked against finite differences in
//! double precision.

use serde::{Deserialize, Serialize};

use crate::autodiff::{check_temperature, log_softmax_t, Element, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Weights and temperature shared by the distillation objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the temperature-scaled KL term.
    pub alpha: f64,
    pub temperature: f64,
    /// DKD target-class weight.
    pub dkd_alpha: f64,
    /// DKD non-target-class weight.
    pub dkd_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            temperature: 4.0,
            dkd_alpha: 1.0,
            dkd_beta: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        for (name, v) in [
            ("alpha", self.alpha),
            ("dkd_alpha", self.dkd_alpha),
            ("dkd_beta", self.dkd_beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape<F: Element>(tape: &Tape<F>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb || sa.len() != 2 {
        return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn check_labels<F: Element>(tape: &Tape<F>, op: &'static str, logits: Var, labels: &[usize]) -> Result<()> {
    let s = tape.value(logits).shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err(op, format!("logits {s:?} with {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: s[1],
        });
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<F: Element>(tape: &mut Tape<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(tape, "cross_entropy", logits, labels)?;
    let ls = tape.log_softmax(logits)?;
    let picked = tape.gather(ls, labels)?;
    let mean = tape.mean_batch(picked)?;
    tape.scale(mean, -1.0)
}

/// `T² · mean_batch KL(softmax(z_t/T) ‖ softmax(z_s/T))`, teacher as the
/// reference distribution. Differentiable in both arguments.
pub fn kd_kl<F: Element>(tape: &mut Tape<F>, z_t: Var, z_s: Var, temperature: f64) -> Result<Var> {
    same_shape(tape, "kd_kl", z_t, z_s)?;
    check_temperature(temperature)?;
    let lt = log_softmax_t(tape, z_t, temperature)?;
    let ls = log_softmax_t(tape, z_s, temperature)?;
    let pt = tape.exp(lt)?;
    let diff = tape.sub(lt, ls)?;
    let terms = tape.mul(pt, diff)?;
    let per_sample = tape.sum_last(terms)?;
    let mean = tape.mean_batch(per_sample)?;
    tape.scale(mean, temperature * temperature)
}

fn weighted_sum<F: Element>(tape: &mut Tape<F>, a: Var, b: Option<(f64, Var)>) -> Result<Var> {
    match b {
        None => Ok(a),
        Some((w, v)) => {
            let scaled = tape.scale(v, w)?;
            tape.add(a, scaled)
        }
    }
}

/// Teacher conditioning objective:
/// `(1/n) Σ_i [CE(z_si) + α·KL(z_t ‖ z_si)] + CE(z_t)`.
pub fn loss_ct<F: Element>(
    tape: &mut Tape<F>,
    z_t: Var,
    branch_logits: &[Var],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    if branch_logits.is_empty() {
        return Err(Error::EmptyBranches);
    }
    cfg.validate()?;
    let mut total: Option<Var> = None;
    for &z_s in branch_logits {
        same_shape(tape, "loss_ct", z_t, z_s)?;
        let ce = cross_entropy(tape, z_s, labels)?;
        let kl = if cfg.alpha != 0.0 {
            Some((cfg.alpha, kd_kl(tape, z_t, z_s, cfg.temperature)?))
        } else {
            None
        };
        let term = weighted_sum(tape, ce, kl)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let branches = tape.scale(total.expect("non-empty"), 1.0 / branch_logits.len() as f64)?;
    let ce_t = cross_entropy(tape, z_t, labels)?;
    tape.add(branches, ce_t)
}

/// Gate objective `CE(z_s) − α·KL(z_t ‖ z_s)`; may be negative.
pub fn loss_phi<F: Element>(
    tape: &mut Tape<F>,
    z_t: Var,
    z_s: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    signed_kd(tape, z_t, z_s, labels, cfg, -1.0)
}

/// Vanilla distillation objective `CE(z_s) + α·KL(z_t ‖ z_s)`.
pub fn loss_kd<F: Element>(
    tape: &mut Tape<F>,
    z_s: Var,
    z_t: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    signed_kd(tape, z_t, z_s, labels, cfg, 1.0)
}

fn signed_kd<F: Element>(
    tape: &mut Tape<F>,
    z_t: Var,
    z_s: Var,
    labels: &[usize],
    cfg: &LossConfig,
    sign: f64,
) -> Result<Var> {
    cfg.validate()?;
    same_shape(tape, "kd", z_t, z_s)?;
    let ce = cross_entropy(tape, z_s, labels)?;
    let kl = if cfg.alpha != 0.0 {
        Some((sign * cfg.alpha, kd_kl(tape, z_t, z_s, cfg.temperature)?))
    } else {
        None
    };
    weighted_sum(tape, ce, kl)
}

/// Per-sample decoupled KD components, both already multiplied by `T²`.
#[derive(Clone, Copy, Debug)]
pub struct DkdTerms {
    /// Binary KL over (target, rest), shape `[N]`.
    pub tckd: Var,
    /// KL over the renormalised non-target classes, shape `[N]`.
    pub nckd: Var,
    /// Teacher's tempered probability of the rest, `1 − p_t(target)`, `[N]`.
    pub teacher_rest: Var,
}

const NON_TARGET_MASK: f64 = 1000.0;

pub fn dkd_terms<F: Element>(
    tape: &mut Tape<F>,
    z_s: Var,
    z_t: Var,
    labels: &[usize],
    temperature: f64,
) -> Result<DkdTerms> {
    same_shape(tape, "dkd", z_t, z_s)?;
    check_labels(tape, "dkd", z_s, labels)?;
    check_temperature(temperature)?;
    let (n, c) = {
        let s = tape.value(z_s).shape();
        (s[0], s[1])
    };
    if c < 2 {
        return Err(Error::SingleClass);
    }
    let t2 = temperature * temperature;
    let mut mask = Tensor::<F>::zeros(&[n, c]);
    for (i, &y) in labels.iter().enumerate() {
        mask.data_mut()[i * c + y] = F::from_f64_lossy(-NON_TARGET_MASK);
    }
    let mask = tape.input(mask);
    // Any non-target column works as the anchor for log(1 - p_target).
    let other: Vec<usize> = labels.iter().map(|&y| (y + 1) % c).collect();

    let parts = |z: Var, tape: &mut Tape<F>| -> Result<(Var, Var, Var)> {
        let full = log_softmax_t(tape, z, temperature)?;
        let scaled = tape.scale(z, 1.0 / temperature)?;
        let masked = tape.add(scaled, mask)?;
        let non_target = tape.log_softmax(masked)?;
        let log_target = tape.gather(full, labels)?;
        let a = tape.gather(full, &other)?;
        let b = tape.gather(non_target, &other)?;
        // log p_k - log p̂_k = log(1 - p_target) for any k != target.
        let log_rest = tape.sub(a, b)?;
        Ok((log_target, log_rest, non_target))
    };
    let (t_tgt, t_rest, t_nt) = parts(z_t, tape)?;
    let (s_tgt, s_rest, s_nt) = parts(z_s, tape)?;

    let kl_pair = |tape: &mut Tape<F>, lt: Var, ls: Var| -> Result<Var> {
        let p = tape.exp(lt)?;
        let d = tape.sub(lt, ls)?;
        tape.mul(p, d)
    };
    let a = kl_pair(tape, t_tgt, s_tgt)?;
    let b = kl_pair(tape, t_rest, s_rest)?;
    let tckd = tape.add(a, b)?;
    let tckd = tape.scale(tckd, t2)?;

    let nt = kl_pair(tape, t_nt, s_nt)?;
    let nckd = tape.sum_last(nt)?;
    let nckd = tape.scale(nckd, t2)?;
    let teacher_rest = tape.exp(t_rest)?;
    Ok(DkdTerms {
        tckd,
        nckd,
        teacher_rest,
    })
}

/// `dkd_alpha · TCKD + dkd_beta · NCKD`, each averaged over the batch.
pub fn loss_dkd<F: Element>(
    tape: &mut Tape<F>,
    z_s: Var,
    z_t: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let terms = dkd_terms(tape, z_s, z_t, labels, cfg.temperature)?;
    let tckd = tape.mean_batch(terms.tckd)?;
    let nckd = tape.mean_batch(terms.nckd)?;
    let tckd = tape.scale(tckd, cfg.dkd_alpha)?;
    let nckd = tape.scale(nckd, cfg.dkd_beta)?;
    tape.add(tckd, nckd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(tape: &mut Tape<f64>, rows: &[&[f64]]) -> Var {
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.input(Tensor::from_f64(&[rows.len(), c], &flat).unwrap())
    }

    fn val(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item()
    }

    // Oracle: plain-f64 softmax and KL, independent of the tape.
    fn softmax(z: &[f64], t: f64) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| ((v - m) / t).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = logits(&mut tape, &[&[50., 0., 0.]]);
        let ce = cross_entropy(&mut tape, z, &[0]).unwrap();
        assert!(val(&tape, ce) < 1e-6);

        let z = logits(&mut tape, &[&[0.3; 4], &[0.3; 4]]);
        let ce = cross_entropy(&mut tape, z, &[1, 3]).unwrap();
        assert!((val(&tape, ce) - 4f64.ln()).abs() < 1e-12);
        assert!((val(&tape, ce) - 1.3863).abs() < 1e-4);

        let z = logits(&mut tape, &[&[1., 0.]]);
        let ce = cross_entropy(&mut tape, z, &[0]).unwrap();
        let e = std::f64::consts::E;
        assert!((val(&tape, ce) + (e / (e + 1.)).ln()).abs() < 1e-12);
        assert!((val(&tape, ce) - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let z = logits(&mut tape, &[&[1., 0.]]);
        assert_eq!(
            cross_entropy(&mut tape, z, &[2]).unwrap_err(),
            Error::LabelOutOfRange { label: 2, classes: 2 }
        );
    }

    #[test]
    fn kd_kl_examples() {
        let mut tape = Tape::new();
        let a = logits(&mut tape, &[&[0.2, -1.0, 3.0]]);
        let same = kd_kl(&mut tape, a, a, 4.0).unwrap();
        assert_eq!(val(&tape, same), 0.0);

        let t = logits(&mut tape, &[&[1., 0.]]);
        let s = logits(&mut tape, &[&[0., 1.]]);
        let v = kd_kl(&mut tape, t, s, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((val(&tape, v) - (e - 1.) / (e + 1.)).abs() < 1e-12);
        assert!((val(&tape, v) - 0.4621).abs() < 1e-4);

        let v2 = kd_kl(&mut tape, t, s, 2.0).unwrap();
        let unscaled = kl(&softmax(&[1., 0.], 2.), &softmax(&[0., 1.], 2.));
        assert!((val(&tape, v2) - 4.0 * unscaled).abs() < 1e-12);
    }

    #[test]
    fn kd_kl_errors() {
        let mut tape = Tape::new();
        let a = logits(&mut tape, &[&[1., 0.]]);
        let b = logits(&mut tape, &[&[1., 0., 2.]]);
        assert!(matches!(kd_kl(&mut tape, a, b, 1.0), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(kd_kl(&mut tape, a, a, 0.0), Err(Error::InvalidTemperature(_))));
    }

    #[test]
    fn loss_ct_structure() {
        let mut tape = Tape::new();
        let zt = logits(&mut tape, &[&[1.0, -0.5, 0.2], &[0.1, 0.4, -2.0]]);
        let s1 = logits(&mut tape, &[&[0.3, 0.5, 0.2], &[-1.0, 0.0, 1.0]]);
        let s2 = logits(&mut tape, &[&[2.0, 0.1, -0.3], &[0.5, 0.5, 0.5]]);
        let y = [0, 2];
        let zero_alpha = LossConfig { alpha: 0.0, ..Default::default() };

        let l = loss_ct(&mut tape, zt, &[s1], &y, &zero_alpha).unwrap();
        let ce_s = cross_entropy(&mut tape, s1, &y).unwrap();
        let ce_t = cross_entropy(&mut tape, zt, &y).unwrap();
        assert_eq!(val(&tape, l), val(&tape, ce_s) + val(&tape, ce_t));

        let cfg = LossConfig { alpha: 0.7, temperature: 3.0, ..Default::default() };
        let l = loss_ct(&mut tape, zt, &[zt, zt], &y, &cfg).unwrap();
        assert!((val(&tape, l) - 2.0 * val(&tape, ce_t)).abs() < 1e-12);

        // Term-by-term oracle for n = 2.
        let l = loss_ct(&mut tape, zt, &[s1, s2], &y, &cfg).unwrap();
        let mut expect = 0.0;
        for s in [s1, s2] {
            let ce = cross_entropy(&mut tape, s, &y).unwrap();
            let k = kd_kl(&mut tape, zt, s, 3.0).unwrap();
            expect += val(&tape, ce) + 0.7 * val(&tape, k);
        }
        expect = expect / 2.0 + val(&tape, ce_t);
        assert!((val(&tape, l) - expect).abs() < 1e-6);

        assert_eq!(loss_ct(&mut tape, zt, &[], &y, &cfg).unwrap_err(), Error::EmptyBranches);
    }

    #[test]
    fn kd_and_phi_sign_structure() {
        let mut tape = Tape::new();
        let zt = logits(&mut tape, &[&[1.5, -0.5, 0.2, 0.0]]);
        let zs = logits(&mut tape, &[&[0.1, 0.4, -0.3, 0.9]]);
        let y = [2];
        let cfg = LossConfig { alpha: 1.0, temperature: 4.0, ..Default::default() };
        let kd = loss_kd(&mut tape, zs, zt, &y, &cfg).unwrap();
        let phi = loss_phi(&mut tape, zt, zs, &y, &cfg).unwrap();
        let k = kd_kl(&mut tape, zt, zs, 4.0).unwrap();
        assert!((val(&tape, kd) - val(&tape, phi) - 2.0 * val(&tape, k)).abs() < 1e-12);

        // Oracle: CE + 16·KL(p_t ‖ p_s) at T = 4.
        let ps = softmax(&[0.1, 0.4, -0.3, 0.9], 1.0);
        let ce = -ps[2].ln();
        let klv = kl(&softmax(&[1.5, -0.5, 0.2, 0.0], 4.0), &softmax(&[0.1, 0.4, -0.3, 0.9], 4.0));
        assert!((val(&tape, kd) - (ce + 16.0 * klv)).abs() < 1e-6);
        assert!((val(&tape, phi) - (ce - 16.0 * klv)).abs() < 1e-6);

        let off = LossConfig { alpha: 0.0, ..cfg };
        let kd0 = loss_kd(&mut tape, zs, zt, &y, &off).unwrap();
        let phi0 = loss_phi(&mut tape, zt, zs, &y, &off).unwrap();
        assert!((val(&tape, kd0) - ce).abs() < 1e-12);
        assert_eq!(val(&tape, kd0), val(&tape, phi0));

        let same = loss_kd(&mut tape, zt, zt, &y, &cfg).unwrap();
        let ce_t = cross_entropy(&mut tape, zt, &y).unwrap();
        assert_eq!(val(&tape, same), val(&tape, ce_t));
    }

    #[test]
    fn dkd_examples() {
        let mut tape = Tape::new();
        let z = logits(&mut tape, &[&[0.3, 1.2, -0.7], &[2.0, 0.0, 0.5]]);
        let cfg = LossConfig::default();
        let d = loss_dkd(&mut tape, z, z, &[1, 0], &cfg).unwrap();
        assert!(val(&tape, d).abs() < 1e-12);

        // Two classes, beta = 0: alpha · T² · binary KL.
        let zt = logits(&mut tape, &[&[1.3, -0.2]]);
        let zs = logits(&mut tape, &[&[0.1, 0.6]]);
        let cfg = LossConfig { dkd_alpha: 0.8, dkd_beta: 0.0, temperature: 2.0, ..Default::default() };
        let d = loss_dkd(&mut tape, zs, zt, &[0], &cfg).unwrap();
        let expect = 0.8 * 4.0 * kl(&softmax(&[1.3, -0.2], 2.0), &softmax(&[0.1, 0.6], 2.0));
        assert!((val(&tape, d) - expect).abs() < 1e-10);

        let one = logits(&mut tape, &[&[1.0]]);
        assert_eq!(loss_dkd(&mut tape, one, one, &[0], &cfg).unwrap_err(), Error::SingleClass);
    }
}
