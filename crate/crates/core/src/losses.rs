//! Local training objectives. Every loss returns the batch-mean scalar and
//! the exact gradient with respect to its input rows, so training can chain
//! it onto the projector's backward pass.
//!
//! The prototype-contrastive losses score a sample against one prototype
//! per class with a temperature-scaled inner product. The denominator sums
//! over the negative classes only by default; the conventional form that
//! also includes the positive is available as [`DenomMode::IncludePositive`]
//! (the default variant can go negative, the inclusive one cannot).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_norm, Matrix};
use crate::prototypes::PrototypeSet;

/// Which classes the contrastive denominator sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenomMode {
    /// Negatives only (the positive class is excluded).
    #[default]
    ExcludePositive,
    /// All classes, positive included (standard InfoNCE shape).
    IncludePositive,
}

/// Softmax temperature; must be positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Param(format!("temperature must be > 0, got {tau}")));
        }
        Ok(Temperature(tau))
    }

    pub fn get(&self) -> f64 {
        self.0
    }
}

/// Settings shared by the prototype-contrastive losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: Temperature,
    pub denom_mode: DenomMode,
    /// L2-normalize the embeddings and prototypes before the dot product
    /// (cosine similarity) instead of the raw inner product.
    pub normalize: bool,
}

impl ContrastiveConfig {
    pub fn new(tau: f64) -> Result<Self> {
        Ok(ContrastiveConfig {
            tau: Temperature::new(tau)?,
            denom_mode: DenomMode::default(),
            normalize: false,
        })
    }
}

/// Batch-mean loss value and its gradient w.r.t. the input rows.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub dz: Matrix,
    /// Set when the batch admitted no real contrast (e.g. no negatives);
    /// the value is still well defined.
    pub degenerate: bool,
}

impl LossOutput {
    fn checked(self) -> Result<Self> {
        if !self.value.is_finite() || !self.dz.is_finite() {
            return Err(Error::Numerical("loss produced non-finite output".into()));
        }
        Ok(self)
    }
}

/// Prototypes arranged for the kernels: sorted class ids, one matrix row per
/// class, and a label -> row lookup.
struct AlignedProtos {
    classes: Vec<usize>,
    rows: Matrix,
}

impl AlignedProtos {
    fn build(set: &PrototypeSet, z_cols: usize, context: &str) -> Result<Self> {
        let (classes, rows) = set.aligned();
        if rows.cols() != z_cols {
            return Err(Error::Shape(format!(
                "prototype dim {} != embedding dim {} ({context})",
                rows.cols(),
                z_cols
            )));
        }
        Ok(AlignedProtos { classes, rows })
    }

    fn row_of(&self, class: usize, context: &str) -> Result<usize> {
        self.classes
            .binary_search(&class)
            .map_err(|_| Error::MissingClass {
                class,
                context: context.to_string(),
            })
    }
}

fn l2_normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let n = l2_norm(m.row(r));
        if n == 0.0 {
            return Err(Error::Numerical(format!("row {r} has zero norm")));
        }
        for v in out.row_mut(r) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pulls a gradient w.r.t. normalized rows back through the normalization.
fn backprop_row_normalization(du: &Matrix, u: &Matrix, norms: &[f64]) -> Matrix {
    let mut dz = Matrix::zeros(du.rows(), du.cols());
    for r in 0..du.rows() {
        let proj = dot(du.row(r), u.row(r));
        for j in 0..du.cols() {
            dz.set(r, j, (du.get(r, j) - proj * u.row(r)[j]) / norms[r]);
        }
    }
    dz
}

/// Contrastive loss of a batch against a single prototype set. Returns the
/// per-sample sum (not yet divided by batch size) and the gradient w.r.t.
/// the (possibly normalized) embedding rows, scaled by `grad_scale`.
fn proto_contrastive_kernel(
    z: &Matrix,
    labels: &[usize],
    protos: &AlignedProtos,
    cfg: &ContrastiveConfig,
    context: &str,
    du_acc: &mut Matrix,
    grad_scale: f64,
) -> Result<f64> {
    let n_classes = protos.classes.len();
    if n_classes < 2 {
        return Err(Error::DegenerateLoss(format!(
            "{context}: need >= 2 prototype classes, have {n_classes}"
        )));
    }
    let tau = cfg.tau.get();
    let mut total = 0.0;
    for i in 0..z.rows() {
        let pos = protos.row_of(labels[i], context)?;
        let sims: Vec<f64> = (0..n_classes)
            .map(|c| dot(z.row(i), protos.rows.row(c)) / tau)
            .collect();
        // Max-subtraction over the denominator's support for stability.
        let mut max_sim = f64::NEG_INFINITY;
        for (c, &s) in sims.iter().enumerate() {
            if cfg.denom_mode == DenomMode::ExcludePositive && c == pos {
                continue;
            }
            max_sim = max_sim.max(s);
        }
        let mut denom = 0.0;
        for (c, &s) in sims.iter().enumerate() {
            if cfg.denom_mode == DenomMode::ExcludePositive && c == pos {
                continue;
            }
            denom += (s - max_sim).exp();
        }
        let log_denom = max_sim + denom.ln();
        total += -(sims[pos] - log_denom);

        // d/dz of (-s_pos + log denom): softmax over the denominator support
        // pulls in each prototype; the positive contributes -C_pos / tau.
        for j in 0..z.cols() {
            let mut g = -protos.rows.get(pos, j) / tau;
            for (c, &s) in sims.iter().enumerate() {
                if cfg.denom_mode == DenomMode::ExcludePositive && c == pos {
                    continue;
                }
                let p = (s - max_sim).exp() / denom;
                g += p * protos.rows.get(c, j) / tau;
            }
            du_acc.set(i, j, du_acc.get(i, j) + grad_scale * g);
        }
    }
    Ok(total)
}

fn with_optional_normalization(
    z: &Matrix,
    cfg: &ContrastiveConfig,
    body: impl FnOnce(&Matrix, &mut Matrix) -> Result<f64>,
) -> Result<LossOutput> {
    if cfg.normalize {
        let (u, norms) = l2_normalize_rows(z)?;
        let mut du = Matrix::zeros(z.rows(), z.cols());
        let value = body(&u, &mut du)?;
        let dz = backprop_row_normalization(&du, &u, &norms);
        LossOutput {
            value,
            dz,
            degenerate: false,
        }
        .checked()
    } else {
        let mut dz = Matrix::zeros(z.rows(), z.cols());
        let value = body(z, &mut dz)?;
        LossOutput {
            value,
            dz,
            degenerate: false,
        }
        .checked()
    }
}

fn normalized_protos(set: &PrototypeSet, z_cols: usize, cfg: &ContrastiveConfig, context: &str) -> Result<AlignedProtos> {
    let mut aligned = AlignedProtos::build(set, z_cols, context)?;
    if cfg.normalize {
        for r in 0..aligned.rows.rows() {
            let n = l2_norm(aligned.rows.row(r));
            if n == 0.0 {
                return Err(Error::Numerical(format!("{context}: zero-norm prototype")));
            }
            for v in aligned.rows.row_mut(r) {
                *v /= n;
            }
        }
    }
    Ok(aligned)
}

/// Contrastive alignment of each sample with its class's global prototype.
pub fn global_proto_loss(
    z: &Matrix,
    labels: &[usize],
    global_protos: &PrototypeSet,
    cfg: &ContrastiveConfig,
) -> Result<LossOutput> {
    check_batch(z, labels)?;
    let protos = normalized_protos(global_protos, z.cols(), cfg, "global prototypes")?;
    let n = z.rows() as f64;
    with_optional_normalization(z, cfg, |u, du| {
        let total = proto_contrastive_kernel(u, labels, &protos, cfg, "global prototypes", du, 1.0 / n)?;
        Ok(total / n)
    })
}

/// Mean over all clients' prototype sets of the per-set contrastive term.
pub fn local_proto_loss(
    z: &Matrix,
    labels: &[usize],
    local_sets: &[PrototypeSet],
    cfg: &ContrastiveConfig,
) -> Result<LossOutput> {
    check_batch(z, labels)?;
    if local_sets.is_empty() {
        return Err(Error::Param("local_proto_loss needs at least one set".into()));
    }
    let m = local_sets.len() as f64;
    let aligned: Vec<AlignedProtos> = local_sets
        .iter()
        .enumerate()
        .map(|(p, s)| normalized_protos(s, z.cols(), cfg, &format!("local set {p}")))
        .collect::<Result<_>>()?;
    let n = z.rows() as f64;
    with_optional_normalization(z, cfg, |u, du| {
        let mut total = 0.0;
        for (p, protos) in aligned.iter().enumerate() {
            total += proto_contrastive_kernel(
                u,
                labels,
                protos,
                cfg,
                &format!("local set {p}"),
                du,
                1.0 / (n * m),
            )?;
        }
        Ok(total / (n * m))
    })
}

/// Sum of the global and local terms; gradients add.
pub fn combined_loss(
    z: &Matrix,
    labels: &[usize],
    global_protos: &PrototypeSet,
    local_sets: &[PrototypeSet],
    cfg: &ContrastiveConfig,
) -> Result<LossOutput> {
    let g = global_proto_loss(z, labels, global_protos, cfg)?;
    let l = local_proto_loss(z, labels, local_sets, cfg)?;
    let mut dz = g.dz;
    for (a, b) in dz.data_mut().iter_mut().zip(l.dz.data()) {
        *a += b;
    }
    LossOutput {
        value: g.value + l.value,
        dz,
        degenerate: false,
    }
    .checked()
}

/// Mean negative log-softmax of the true class; the gradient is
/// (softmax - one_hot) / batch_size.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    check_batch(logits, labels)?;
    let n = logits.rows();
    let c = logits.cols();
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Data(format!(
                "label {y} at row {i} out of range for {c} classes"
            )));
        }
    }
    let mut total = 0.0;
    let mut dz = Matrix::zeros(n, c);
    let nf = n as f64;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        total += -(row[labels[i]] - max - denom.ln());
        for j in 0..c {
            let p = (row[j] - max).exp() / denom;
            let one = if j == labels[i] { 1.0 } else { 0.0 };
            dz.set(i, j, (p - one) / nf);
        }
    }
    LossOutput {
        value: total / nf,
        dz,
        degenerate: false,
    }
    .checked()
}

/// Squared-distance pull of each sample toward its class's global
/// prototype, scaled by `lambda`.
pub fn proto_dist_term(
    z: &Matrix,
    labels: &[usize],
    global_protos: &PrototypeSet,
    lambda: f64,
) -> Result<LossOutput> {
    check_batch(z, labels)?;
    if !lambda.is_finite() {
        return Err(Error::Param(format!("lambda must be finite, got {lambda}")));
    }
    let protos = AlignedProtos::build(global_protos, z.cols(), "proto_dist")?;
    let n = z.rows();
    let nf = n as f64;
    let mut total = 0.0;
    let mut dz = Matrix::zeros(n, z.cols());
    for i in 0..n {
        let pos = protos.row_of(labels[i], "proto_dist")?;
        for j in 0..z.cols() {
            let diff = z.get(i, j) - protos.rows.get(pos, j);
            total += diff * diff;
            dz.set(i, j, 2.0 * lambda * diff / nf);
        }
    }
    LossOutput {
        value: lambda * total / nf,
        dz,
        degenerate: false,
    }
    .checked()
}

/// Batch-wise supervised contrastive loss over L2-normalized embeddings.
/// Anchors with no positive in the batch are skipped; the value is the mean
/// over the remaining anchors. The gradient includes the normalization
/// Jacobian.
pub fn supcon_batch_loss(z: &Matrix, labels: &[usize], tau: Temperature) -> Result<LossOutput> {
    check_batch(z, labels)?;
    let n = z.rows();
    if n < 2 {
        return Err(Error::Param(format!("supcon needs a batch of >= 2, got {n}")));
    }
    let t = tau.get();
    let (u, norms) = l2_normalize_rows(z)?;

    let positives: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect())
        .collect();
    let valid: Vec<usize> = (0..n).filter(|&i| !positives[i].is_empty()).collect();
    if valid.is_empty() {
        return Err(Error::DegenerateBatch(
            "no anchor has a positive in the batch".into(),
        ));
    }
    // No anchor sees a negative: the loss is still defined (and zero for
    // pairs), but there is nothing to contrast against.
    let degenerate = valid
        .iter()
        .all(|&i| positives[i].len() == n - 1);

    let vf = valid.len() as f64;
    let mut sims = Matrix::zeros(n, n);
    for i in 0..n {
        for a in 0..n {
            if a != i {
                sims.set(i, a, dot(u.row(i), u.row(a)) / t);
            }
        }
    }

    let mut total = 0.0;
    // dL/ds over ordered pairs, then chained into dL/du.
    let mut ds = Matrix::zeros(n, n);
    for &i in &valid {
        let pf = positives[i].len() as f64;
        let mut max_sim = f64::NEG_INFINITY;
        for a in 0..n {
            if a != i {
                max_sim = max_sim.max(sims.get(i, a));
            }
        }
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += (sims.get(i, a) - max_sim).exp();
            }
        }
        let log_denom = max_sim + denom.ln();
        for &p in &positives[i] {
            total += -(sims.get(i, p) - log_denom) / pf;
            ds.set(i, p, ds.get(i, p) - 1.0 / (vf * pf));
        }
        for a in 0..n {
            if a != i {
                let soft = (sims.get(i, a) - max_sim).exp() / denom;
                ds.set(i, a, ds.get(i, a) + soft / vf);
            }
        }
    }

    let mut du = Matrix::zeros(n, z.cols());
    for i in 0..n {
        for a in 0..n {
            let g = ds.get(i, a);
            if g == 0.0 || a == i {
                continue;
            }
            for j in 0..z.cols() {
                du.set(i, j, du.get(i, j) + g * u.get(a, j) / t);
                du.set(a, j, du.get(a, j) + g * u.get(i, j) / t);
            }
        }
    }
    let dz = backprop_row_normalization(&du, &u, &norms);
    LossOutput {
        value: total / vf,
        dz,
        degenerate,
    }
    .checked()
}

fn check_batch(z: &Matrix, labels: &[usize]) -> Result<()> {
    if z.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} rows vs {} labels",
            z.rows(),
            labels.len()
        )));
    }
    if z.rows() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use crate::prototypes::{Owner, ProtoEntry, PrototypeSet};

    fn protos(entries: &[(usize, Vec<f64>)]) -> PrototypeSet {
        let mut s = PrototypeSet::new(Owner::Global);
        for (c, v) in entries {
            s.insert(
                *c,
                ProtoEntry {
                    vector: v.clone(),
                    count: 1,
                    padded: false,
                },
            );
        }
        s
    }

    fn cfg(tau: f64, mode: DenomMode) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: Temperature::new(tau).unwrap(),
            denom_mode: mode,
            normalize: false,
        }
    }

    /// Central finite differences of `f` against `dz` at `z`.
    fn check_gradient(z: &Matrix, dz: &Matrix, f: &dyn Fn(&Matrix) -> f64) {
        let h = 1e-5;
        for r in 0..z.rows() {
            for c in 0..z.cols() {
                let mut plus = z.clone();
                plus.set(r, c, z.get(r, c) + h);
                let mut minus = z.clone();
                minus.set(r, c, z.get(r, c) - h);
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let a = dz.get(r, c);
                let tol = 1e-7 + 1e-4 * a.abs().max(fd.abs());
                assert!(
                    (a - fd).abs() <= tol,
                    "entry ({r},{c}): analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn global_loss_equal_similarities_is_zero_excluding() {
        // Two classes with identical similarity: numerator equals the
        // (single-term) denominator.
        let g = protos(&[(0, vec![1.0, 1.0]), (1, vec![1.0, 1.0])]);
        let z = Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let out = global_proto_loss(&z, &[0], &g, &cfg(1.0, DenomMode::ExcludePositive)).unwrap();
        assert!(out.value.abs() < 1e-12, "value {}", out.value);
    }

    #[test]
    fn global_loss_hand_value_both_modes() {
        let g = protos(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        let z = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let ex = global_proto_loss(&z, &[0], &g, &cfg(1.0, DenomMode::ExcludePositive)).unwrap();
        assert!((ex.value - (-1.0)).abs() < 1e-12, "exclude {}", ex.value);
        let inc = global_proto_loss(&z, &[0], &g, &cfg(1.0, DenomMode::IncludePositive)).unwrap();
        let expected = (1.0f64 + (-1.0f64).exp()).ln();
        assert!((inc.value - expected).abs() < 1e-12, "include {}", inc.value);
    }

    #[test]
    fn global_loss_gradient_matches_fd() {
        let mut rng = Rng::new(21);
        for mode in [DenomMode::ExcludePositive, DenomMode::IncludePositive] {
            for normalize in [false, true] {
                let g = protos(&[
                    (0, (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()),
                    (1, (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()),
                    (2, (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()),
                ]);
                let z = Matrix::from_vec(4, 3, (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect())
                    .unwrap();
                let labels = [0, 2, 1, 0];
                let mut c = cfg(0.3, mode);
                c.normalize = normalize;
                let out = global_proto_loss(&z, &labels, &g, &c).unwrap();
                check_gradient(&z, &out.dz, &|zz| {
                    global_proto_loss(zz, &labels, &g, &c).unwrap().value
                });
            }
        }
    }

    #[test]
    fn global_loss_missing_class_and_degenerate() {
        let g = protos(&[(0, vec![1.0]), (1, vec![2.0])]);
        let z = Matrix::from_rows(&[vec![0.5]]).unwrap();
        assert!(matches!(
            global_proto_loss(&z, &[7], &g, &cfg(1.0, DenomMode::ExcludePositive)),
            Err(Error::MissingClass { class: 7, .. })
        ));
        let single = protos(&[(0, vec![1.0])]);
        assert!(matches!(
            global_proto_loss(&z, &[0], &single, &cfg(1.0, DenomMode::ExcludePositive)),
            Err(Error::DegenerateLoss(_))
        ));
    }

    #[test]
    fn local_loss_single_set_reduces_to_global() {
        let mut rng = Rng::new(22);
        let g = protos(&[
            (0, (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()),
            (1, (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()),
        ]);
        let z = Matrix::from_vec(3, 3, (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let labels = [0, 1, 0];
        let c = cfg(0.5, DenomMode::ExcludePositive);
        let lg = global_proto_loss(&z, &labels, &g, &c).unwrap();
        let ll = local_proto_loss(&z, &labels, &[g.clone()], &c).unwrap();
        assert!((lg.value - ll.value).abs() < 1e-12);
        for (a, b) in lg.dz.data().iter().zip(ll.dz.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn local_loss_two_sets_averages() {
        let mut rng = Rng::new(23);
        let mk = |rng: &mut Rng| {
            protos(&[
                (0, (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect()),
                (1, (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect()),
            ])
        };
        let s1 = mk(&mut rng);
        let s2 = mk(&mut rng);
        let z = Matrix::from_vec(2, 2, (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let labels = [1, 0];
        let c = cfg(0.7, DenomMode::ExcludePositive);
        let v1 = local_proto_loss(&z, &labels, &[s1.clone()], &c).unwrap().value;
        let v2 = local_proto_loss(&z, &labels, &[s2.clone()], &c).unwrap().value;
        let both = local_proto_loss(&z, &labels, &[s1, s2], &c).unwrap().value;
        assert!((both - (v1 + v2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn local_loss_gradient_matches_fd() {
        let mut rng = Rng::new(24);
        let mk = |rng: &mut Rng| {
            protos(&[
                (0, (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()),
                (1, (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()),
            ])
        };
        let sets = vec![mk(&mut rng), mk(&mut rng), mk(&mut rng)];
        let z = Matrix::from_vec(4, 3, (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let labels = [0, 1, 1, 0];
        let c = cfg(0.4, DenomMode::ExcludePositive);
        let out = local_proto_loss(&z, &labels, &sets, &c).unwrap();
        check_gradient(&z, &out.dz, &|zz| {
            local_proto_loss(zz, &labels, &sets, &c).unwrap().value
        });
    }

    #[test]
    fn combined_is_sum_of_parts() {
        let mut rng = Rng::new(25);
        let g = protos(&[
            (0, (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect()),
            (1, (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect()),
        ]);
        let sets = vec![g.clone(), g.clone()];
        let z = Matrix::from_vec(3, 2, (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let labels = [0, 1, 1];
        let c = cfg(0.9, DenomMode::IncludePositive);
        let comb = combined_loss(&z, &labels, &g, &sets, &c).unwrap();
        let lg = global_proto_loss(&z, &labels, &g, &c).unwrap();
        let ll = local_proto_loss(&z, &labels, &sets, &c).unwrap();
        assert!((comb.value - (lg.value + ll.value)).abs() < 1e-12);
        for ((a, b), cc) in comb.dz.data().iter().zip(lg.dz.data()).zip(ll.dz.data()) {
            assert_eq!(*a, b + cc);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let n_classes = 7;
        let logits = Matrix::from_rows(&[vec![0.42; n_classes]]).unwrap();
        let out = cross_entropy_loss(&logits, &[3]).unwrap();
        assert!((out.value - (n_classes as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logits() {
        let logits = Matrix::from_rows(&[vec![10.0, -10.0]]).unwrap();
        let out = cross_entropy_loss(&logits, &[0]).unwrap();
        let expected = (1.0f64 + (-20.0f64).exp()).ln();
        assert!((out.value - expected).abs() < 1e-15, "value {}", out.value);
        assert!(out.value < 3e-9);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = Rng::new(26);
        let logits = Matrix::from_vec(3, 4, (0..12).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
        let labels = [2, 0, 3];
        let out = cross_entropy_loss(&logits, &labels).unwrap();
        for i in 0..3 {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..4 {
                let p = (row[j] - max).exp() / denom;
                let one = if labels[i] == j { 1.0 } else { 0.0 };
                assert!((out.dz.get(i, j) - (p - one) / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            cross_entropy_loss(&logits, &[2]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn proto_dist_zero_when_on_prototype() {
        let g = protos(&[(0, vec![1.0, 2.0])]);
        let z = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let out = proto_dist_term(&z, &[0], &g, 1.0).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.dz.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn proto_dist_hand_value_and_scaling() {
        let g = protos(&[(0, vec![3.0, 4.0])]);
        let z = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let one = proto_dist_term(&z, &[0], &g, 1.0).unwrap();
        assert!((one.value - 25.0).abs() < 1e-12);
        let two = proto_dist_term(&z, &[0], &g, 2.0).unwrap();
        assert!((two.value - 50.0).abs() < 1e-12);
        for (a, b) in two.dz.data().iter().zip(one.dz.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn proto_dist_gradient_matches_fd() {
        let mut rng = Rng::new(27);
        let g = protos(&[
            (0, (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()),
            (1, (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()),
        ]);
        let z = Matrix::from_vec(4, 3, (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let labels = [0, 1, 0, 1];
        let out = proto_dist_term(&z, &labels, &g, 0.75).unwrap();
        check_gradient(&z, &out.dz, &|zz| {
            proto_dist_term(zz, &labels, &g, 0.75).unwrap().value
        });
    }

    #[test]
    fn supcon_pair_of_identical_same_class() {
        let z = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let out = supcon_batch_loss(&z, &[0, 0], Temperature::new(0.5).unwrap()).unwrap();
        assert!(out.value.abs() < 1e-12);
        assert!(out.degenerate);
    }

    #[test]
    fn supcon_all_anchors_skipped() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            supcon_batch_loss(&z, &[0, 1], Temperature::new(0.5).unwrap()),
            Err(Error::DegenerateBatch(_))
        ));
    }

    /// Direct double-loop evaluation of the definition, written separately
    /// from the implementation.
    fn supcon_brute_force(z: &Matrix, labels: &[usize], tau: f64) -> f64 {
        let n = z.rows();
        let u: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let norm = l2_norm(z.row(i));
                z.row(i).iter().map(|v| v / norm).collect()
            })
            .collect();
        let mut total = 0.0;
        let mut anchors = 0usize;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let mut inner = 0.0;
            for &p in &pos {
                let mut denom = 0.0;
                for a in 0..n {
                    if a != i {
                        denom += (dot(&u[i], &u[a]) / tau).exp();
                    }
                }
                inner += -((dot(&u[i], &u[p]) / tau).exp() / denom).ln();
            }
            total += inner / pos.len() as f64;
        }
        total / anchors as f64
    }

    #[test]
    fn supcon_matches_brute_force() {
        let mut rng = Rng::new(28);
        let z = Matrix::from_vec(4, 3, (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let labels = [0, 1, 0, 1];
        let out = supcon_batch_loss(&z, &labels, Temperature::new(0.2).unwrap()).unwrap();
        let brute = supcon_brute_force(&z, &labels, 0.2);
        assert!((out.value - brute).abs() < 1e-10, "{} vs {brute}", out.value);
    }

    #[test]
    fn supcon_gradient_matches_fd() {
        let mut rng = Rng::new(29);
        let z = Matrix::from_vec(5, 3, (0..15).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let labels = [0, 1, 0, 2, 1];
        let tau = Temperature::new(0.3).unwrap();
        let out = supcon_batch_loss(&z, &labels, tau).unwrap();
        check_gradient(&z, &out.dz, &|zz| {
            supcon_batch_loss(zz, &labels, tau).unwrap().value
        });
    }

    #[test]
    fn include_positive_is_nonnegative() {
        let mut rng = Rng::new(30);
        for _ in 0..50 {
            let g = protos(&[
                (0, (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect()),
                (1, (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect()),
                (2, (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect()),
            ]);
            let z = Matrix::from_vec(3, 3, (0..9).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap();
            let out = global_proto_loss(&z, &[0, 1, 2], &g, &cfg(0.5, DenomMode::IncludePositive))
                .unwrap();
            assert!(out.value >= 0.0, "include_positive went negative: {}", out.value);
        }
    }

    #[test]
    fn label_permutation_equivariance() {
        let mut rng = Rng::new(31);
        let vecs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let g = protos(&[(0, vecs[0].clone()), (1, vecs[1].clone()), (2, vecs[2].clone())]);
        // Permutation 0->2, 1->0, 2->1 applied to classes and labels alike.
        let perm = [2usize, 0, 1];
        let gp = protos(&[(perm[0], vecs[0].clone()), (perm[1], vecs[1].clone()), (perm[2], vecs[2].clone())]);
        let z = Matrix::from_vec(4, 3, (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let labels = [0usize, 1, 2, 1];
        let permuted: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
        let c = cfg(0.6, DenomMode::ExcludePositive);
        let a = global_proto_loss(&z, &labels, &g, &c).unwrap();
        let b = global_proto_loss(&z, &permuted, &gp, &c).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn batch_order_invariance() {
        let mut rng = Rng::new(32);
        let g = protos(&[
            (0, (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect()),
            (1, (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect()),
        ]);
        let z = Matrix::from_vec(4, 2, (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let labels = [0usize, 1, 0, 1];
        let order = [2usize, 0, 3, 1];
        let zs = z.select_rows(&order).unwrap();
        let ls: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let c = cfg(0.8, DenomMode::ExcludePositive);
        let a = global_proto_loss(&z, &labels, &g, &c).unwrap();
        let b = global_proto_loss(&zs, &ls, &g, &c).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        for (k, &i) in order.iter().enumerate() {
            for j in 0..2 {
                assert!((b.dz.get(k, j) - a.dz.get(i, j)).abs() < 1e-12);
            }
        }
    }
}
