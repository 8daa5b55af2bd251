//! Training objectives for the guidance network `f(x_t, t[, c])`.
//!
//! Every objective is expressed as a head applied to the network outputs of
//! one batched forward pass, so the same code computes loss values and
//! parameter gradients.

use ndarray::{Array2, ArrayView2};

use crate::energy::EnergySpec;
use crate::error::{Error, Result};
use crate::netcore::{NetInput, Network};
use crate::prior::perturb_rows;
use crate::schedule::Schedule;

/// Exponent arguments are clamped to `[-EXP_CLAMP, EXP_CLAMP]`.
pub const EXP_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Number of exponent arguments that hit the clamp.
    pub clamped: usize,
}

fn clamp_exp_arg(v: f64, clamped: &mut usize) -> f64 {
    if v > EXP_CLAMP {
        *clamped += 1;
        EXP_CLAMP
    } else if v < -EXP_CLAMP {
        *clamped += 1;
        -EXP_CLAMP
    } else {
        v
    }
}

/// Labels `exp(-beta E)` with clamped exponents, and the clamp count.
pub fn unnormalized_labels(scaled_energies: &[f64]) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    let labels = scaled_energies
        .iter()
        .map(|e| clamp_exp_arg(-e, &mut clamped).exp())
        .collect();
    (labels, clamped)
}

/// Labels `softmax(-beta E)` within the group.
pub fn self_normalized_labels(scaled_energies: &[f64]) -> Vec<f64> {
    let m = scaled_energies.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = scaled_energies.iter().map(|e| (m - e).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

pub(crate) fn log_sum_exp_neg(f: &[f64]) -> f64 {
    let m = f.iter().copied().fold(f64::INFINITY, f64::min);
    -m + f.iter().map(|v| (m - v).exp()).sum::<f64>().ln()
}

/// `-sum_i l_i log softmax(-f)_i` and its gradient `l_j - p_j sum_i l_i`.
pub fn soft_cross_entropy(f: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let lse = log_sum_exp_neg(f);
    let total: f64 = labels.iter().sum();
    let loss = labels.iter().zip(f).map(|(l, fi)| l * (fi + lse)).sum();
    let grad = labels
        .iter()
        .zip(f)
        .map(|(l, fi)| l - (-fi - lse).exp() * total)
        .collect();
    (loss, grad)
}

/// Row layout of one conditional contrast group: `owner[i]` is the block
/// (distinct condition) of pair `i`; block `u` occupies rows
/// `offset + u * k .. offset + (u + 1) * k`.
#[derive(Debug, Clone)]
pub(crate) struct PairLayout {
    pub offset: usize,
    pub k: usize,
    pub owner: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) enum Head {
    /// Consecutive groups of `group` rows with one soft label per row.
    Contrast { group: usize, labels: Vec<f64> },
    /// Normalization over data within a fixed condition.
    Paired { layouts: Vec<PairLayout> },
    /// Row `i * n_classes + m` holds sample `i` under class `m`.
    Classifier { classes: Vec<usize>, n_classes: usize },
    Regression { targets: Vec<f64> },
    /// `(exp(-f) - exp(-target))^2`.
    ExpRegression { targets: Vec<f64> },
}

impl Head {
    /// Loss, gradient with respect to the outputs, and clamp count.
    pub(crate) fn apply(&self, f: &[f64]) -> (f64, Vec<f64>, usize) {
        let mut grad = vec![0.0; f.len()];
        let mut clamped = 0;
        let loss = match self {
            Head::Contrast { group, labels } => {
                let groups = f.len() / group;
                let mut total = 0.0;
                for g in 0..groups {
                    let r = g * group..(g + 1) * group;
                    let (l, gr) = soft_cross_entropy(&f[r.clone()], &labels[r.clone()]);
                    total += l;
                    for (dst, v) in grad[r].iter_mut().zip(gr) {
                        *dst = v / groups as f64;
                    }
                }
                total / groups as f64
            }
            Head::Paired { layouts } => {
                let groups = layouts.len() as f64;
                let mut total = 0.0;
                for lay in layouts {
                    for (i, &u) in lay.owner.iter().enumerate() {
                        let start = lay.offset + u * lay.k;
                        let block = &f[start..start + lay.k];
                        let mut one_hot = vec![0.0; lay.k];
                        one_hot[i] = 1.0;
                        let (l, gr) = soft_cross_entropy(block, &one_hot);
                        total += l;
                        for (dst, v) in grad[start..start + lay.k].iter_mut().zip(gr) {
                            *dst += v / groups;
                        }
                    }
                }
                total / groups
            }
            Head::Classifier { classes, n_classes } => {
                let n = classes.len() as f64;
                let mut total = 0.0;
                for (i, &c) in classes.iter().enumerate() {
                    let r = i * n_classes..(i + 1) * n_classes;
                    let mut one_hot = vec![0.0; *n_classes];
                    one_hot[c] = 1.0;
                    let (l, gr) = soft_cross_entropy(&f[r.clone()], &one_hot);
                    total += l;
                    for (dst, v) in grad[r].iter_mut().zip(gr) {
                        *dst = v / n;
                    }
                }
                total / n
            }
            Head::Regression { targets } => {
                let n = targets.len() as f64;
                let mut total = 0.0;
                for ((fi, y), g) in f.iter().zip(targets).zip(grad.iter_mut()) {
                    let r = fi - y;
                    total += r * r;
                    *g = 2.0 * r / n;
                }
                total / n
            }
            Head::ExpRegression { targets } => {
                let n = targets.len() as f64;
                let mut total = 0.0;
                for ((fi, y), g) in f.iter().zip(targets).zip(grad.iter_mut()) {
                    let before = clamped;
                    let arg = clamp_exp_arg(-fi, &mut clamped);
                    let pred = arg.exp();
                    let f_clamped = clamped != before;
                    let target = clamp_exp_arg(-y, &mut clamped).exp();
                    let r = pred - target;
                    total += r * r;
                    *g = if f_clamped { 0.0 } else { -2.0 * r * pred / n };
                }
                total / n
            }
        };
        (loss, grad, clamped)
    }
}

/// Network inputs for one loss evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Rows {
    pub x: Array2<f64>,
    pub t: Vec<f64>,
    pub cond: Option<Array2<f64>>,
}

impl Rows {
    fn input(&self) -> NetInput<'_> {
        NetInput::new(self.x.view())
            .with_time(&self.t)
            .with_cond(self.cond.as_ref().map(|c| c.view()))
    }
}

/// Evaluates a head on the network outputs, with the parameter gradient if requested.
pub(crate) fn evaluate(net: &Network, rows: &Rows, head: &Head, want_grad: bool) -> Result<(LossValue, Option<Vec<f64>>)> {
    if net.spec().output_dim != 1 {
        return Err(Error::invalid("guidance network must have a scalar output"));
    }
    let input = rows.input();
    if want_grad {
        let mut clamped = 0;
        let (value, grad) = net.grad_params(&input, |out| {
            let f = out.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| out.iter().copied().collect());
            let (loss, g, c) = head.apply(&f);
            clamped = c;
            (loss, Array2::from_shape_vec((g.len(), 1), g).expect("one output per row"))
        })?;
        Ok((LossValue { value, clamped }, Some(grad)))
    } else {
        let out = net.forward_batch(&input)?;
        let f: Vec<f64> = out.iter().copied().collect();
        let (value, _, clamped) = head.apply(&f);
        if !value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok((LossValue { value, clamped }, None))
    }
}

fn check_batch(x0: ArrayView2<'_, f64>, noise: ArrayView2<'_, f64>, min_rows: usize) -> Result<()> {
    if x0.nrows() < min_rows {
        return Err(Error::invalid(format!(
            "contrast group needs at least {min_rows} samples, got {}",
            x0.nrows()
        )));
    }
    if noise.dim() != x0.dim() {
        return Err(Error::DimMismatch {
            expected: x0.len(),
            got: noise.len(),
            context: "noise batch",
        });
    }
    Ok(())
}

fn check_times(schedule: &Schedule, times: &[f64], rows: usize) -> Result<()> {
    if times.len() != rows {
        return Err(Error::DimMismatch {
            expected: rows,
            got: times.len(),
            context: "time batch",
        });
    }
    for &t in times {
        schedule.alpha_sigma(t)?;
    }
    Ok(())
}

pub(crate) fn contrast_rows(
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    times: Vec<f64>,
    noise: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
) -> Rows {
    Rows {
        x: perturb_rows(schedule, x0, &times, noise),
        t: times,
        cond: cond.map(|c| c.to_owned()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Labels {
    Unnormalized,
    SelfNormalized,
}

#[allow(clippy::too_many_arguments)]
fn contrastive(
    net: &Network,
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    energy: &EnergySpec,
    times: Vec<f64>,
    noise: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
    labels: Labels,
) -> Result<LossValue> {
    check_batch(x0, noise, 2)?;
    check_times(schedule, &times, x0.nrows())?;
    let scaled = energy.scaled_rows(x0);
    let (labels, clamped) = match labels {
        Labels::Unnormalized => unnormalized_labels(&scaled),
        Labels::SelfNormalized => (self_normalized_labels(&scaled), 0),
    };
    let rows = contrast_rows(schedule, x0, times, noise, cond);
    let head = Head::Contrast {
        group: x0.nrows(),
        labels,
    };
    let (mut v, _) = evaluate(net, &rows, &head, false)?;
    v.clamped += clamped;
    Ok(v)
}

/// Contrastive energy prediction on one group sharing the time `t`, with
/// soft labels `exp(-beta E(x0_i))`.
pub fn cep_loss(
    net: &Network,
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    energy: &EnergySpec,
    t: f64,
    noise: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
) -> Result<LossValue> {
    let times = vec![t; x0.nrows()];
    contrastive(net, schedule, x0, energy, times, noise, cond, Labels::Unnormalized)
}

/// As [`cep_loss`] with labels normalized within the group.
pub fn cep_self_norm_loss(
    net: &Network,
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    energy: &EnergySpec,
    t: f64,
    noise: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
) -> Result<LossValue> {
    let times = vec![t; x0.nrows()];
    contrastive(net, schedule, x0, energy, times, noise, cond, Labels::SelfNormalized)
}

/// As [`cep_loss`] with one time per sample inside the group.
pub fn cep_multi_t_loss(
    net: &Network,
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    energy: &EnergySpec,
    times: &[f64],
    noise: ArrayView2<'_, f64>,
    cond: Option<ArrayView2<'_, f64>>,
) -> Result<LossValue> {
    contrastive(net, schedule, x0, energy, times.to_vec(), noise, cond, Labels::Unnormalized)
}

/// Distinct condition rows and the index of each input row among them.
fn distinct_rows(cond: ArrayView2<'_, f64>) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut keys: Vec<Vec<u64>> = Vec::new();
    let mut values = Vec::new();
    let mut owner = Vec::with_capacity(cond.nrows());
    for row in cond.rows() {
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let u = match keys.iter().position(|k| *k == key) {
            Some(u) => u,
            None => {
                keys.push(key);
                values.push(row.to_vec());
                keys.len() - 1
            }
        };
        owner.push(u);
    }
    (values, owner)
}

/// Rows for conditional contrast groups. Each group of `k` consecutive pairs
/// shares one time; `f` is evaluated on every perturbed sample of the group
/// under each distinct condition of the group.
pub(crate) fn paired_rows(
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    cond: ArrayView2<'_, f64>,
    group_times: &[f64],
    noise: ArrayView2<'_, f64>,
    k: usize,
) -> (Rows, Head) {
    let d = x0.ncols();
    let m = cond.ncols();
    let mut xs: Vec<f64> = Vec::new();
    let mut ts = Vec::new();
    let mut cs: Vec<f64> = Vec::new();
    let mut layouts = Vec::with_capacity(group_times.len());
    for (g, &t) in group_times.iter().enumerate() {
        let r = g * k..(g + 1) * k;
        let x_t = perturb_rows(
            schedule,
            x0.slice(ndarray::s![r.clone(), ..]),
            &vec![t; k],
            noise.slice(ndarray::s![r.clone(), ..]),
        );
        let (distinct, owner) = distinct_rows(cond.slice(ndarray::s![r, ..]));
        let offset = ts.len();
        for c in &distinct {
            for row in x_t.rows() {
                xs.extend(row.iter());
                ts.push(t);
                cs.extend_from_slice(c);
            }
        }
        layouts.push(PairLayout { offset, k, owner });
    }
    let n = ts.len();
    let rows = Rows {
        x: Array2::from_shape_vec((n, d), xs).expect("row-major build"),
        t: ts,
        cond: Some(Array2::from_shape_vec((n, m), cs).expect("row-major build")),
    };
    (rows, Head::Paired { layouts })
}

/// Conditional contrastive loss on paired data `(x0_i, c_i)`: normalization
/// runs over the data of the group for each fixed condition.
pub fn cep_conditional_loss(
    net: &Network,
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    cond: ArrayView2<'_, f64>,
    t: f64,
    noise: ArrayView2<'_, f64>,
) -> Result<LossValue> {
    check_batch(x0, noise, 2)?;
    check_times(schedule, &[t], 1)?;
    if cond.nrows() != x0.nrows() {
        return Err(Error::DimMismatch {
            expected: x0.nrows(),
            got: cond.nrows(),
            context: "paired conditions",
        });
    }
    let (rows, head) = paired_rows(schedule, x0, cond, &[t], noise, x0.nrows());
    Ok(evaluate(net, &rows, &head, false)?.0)
}

/// The same objective written as a sum over conditions of unnormalized
/// contrastive losses whose labels are the conditional probabilities
/// `q(c | x0_i)`, which for paired data are indicators of `c == c_i`.
pub fn cep_conditional_loss_by_class(
    net: &Network,
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    cond: ArrayView2<'_, f64>,
    t: f64,
    noise: ArrayView2<'_, f64>,
) -> Result<LossValue> {
    check_batch(x0, noise, 2)?;
    check_times(schedule, &[t], 1)?;
    let k = x0.nrows();
    let (distinct, owner) = distinct_rows(cond);
    let x_t = perturb_rows(schedule, x0, &vec![t; k], noise);
    let mut total = 0.0;
    for (u, c) in distinct.iter().enumerate() {
        let cmat = Array2::from_shape_fn((k, c.len()), |(_, j)| c[j]);
        let rows = Rows {
            x: x_t.clone(),
            t: vec![t; k],
            cond: Some(cmat),
        };
        let labels = owner.iter().map(|&o| if o == u { 1.0 } else { 0.0 }).collect();
        let head = Head::Contrast { group: k, labels };
        total += evaluate(net, &rows, &head, false)?.0.value;
    }
    Ok(LossValue {
        value: total,
        clamped: 0,
    })
}

pub(crate) fn classifier_rows(
    x_t: ArrayView2<'_, f64>,
    times: &[f64],
    n_classes: usize,
) -> Rows {
    let n = x_t.nrows();
    let d = x_t.ncols();
    let mut x = Array2::zeros((n * n_classes, d));
    let mut c = Array2::zeros((n * n_classes, n_classes));
    let mut t = Vec::with_capacity(n * n_classes);
    for i in 0..n {
        for m in 0..n_classes {
            x.row_mut(i * n_classes + m).assign(&x_t.row(i));
            c[[i * n_classes + m, m]] = 1.0;
            t.push(times[i]);
        }
    }
    Rows { x, t, cond: Some(c) }
}

/// Cross-entropy over the class logits `-f(x_t, onehot(m), t)`, averaged over samples.
pub fn classifier_loss(
    net: &Network,
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    classes: &[usize],
    n_classes: usize,
    t: f64,
    noise: ArrayView2<'_, f64>,
) -> Result<LossValue> {
    check_batch(x0, noise, 1)?;
    check_times(schedule, &[t], 1)?;
    check_classes(classes, x0.nrows(), n_classes)?;
    let times = vec![t; x0.nrows()];
    let x_t = perturb_rows(schedule, x0, &times, noise);
    let rows = classifier_rows(x_t.view(), &times, n_classes);
    let head = Head::Classifier {
        classes: classes.to_vec(),
        n_classes,
    };
    Ok(evaluate(net, &rows, &head, false)?.0)
}

pub(crate) fn check_classes(classes: &[usize], rows: usize, n_classes: usize) -> Result<()> {
    if classes.len() != rows {
        return Err(Error::DimMismatch {
            expected: rows,
            got: classes.len(),
            context: "class labels",
        });
    }
    if let Some(c) = classes.iter().find(|&&c| c >= n_classes) {
        return Err(Error::invalid(format!("class {c} outside [0, {n_classes})")));
    }
    Ok(())
}

fn regression(
    net: &Network,
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    energy: &EnergySpec,
    times: &[f64],
    noise: ArrayView2<'_, f64>,
    exponential: bool,
) -> Result<LossValue> {
    check_batch(x0, noise, 1)?;
    check_times(schedule, times, x0.nrows())?;
    let targets = energy.scaled_rows(x0);
    let rows = contrast_rows(schedule, x0, times.to_vec(), noise, None);
    let head = if exponential {
        Head::ExpRegression { targets }
    } else {
        Head::Regression { targets }
    };
    Ok(evaluate(net, &rows, &head, false)?.0)
}

/// `mean (f(x_t, t) - beta E(x0))^2` with one time per sample.
pub fn mse_loss(
    net: &Network,
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    energy: &EnergySpec,
    times: &[f64],
    noise: ArrayView2<'_, f64>,
) -> Result<LossValue> {
    regression(net, schedule, x0, energy, times, noise, false)
}

/// `mean (exp(-f(x_t, t)) - exp(-beta E(x0)))^2` with clamped exponents.
pub fn emse_loss(
    net: &Network,
    schedule: &Schedule,
    x0: ArrayView2<'_, f64>,
    energy: &EnergySpec,
    times: &[f64],
    noise: ArrayView2<'_, f64>,
) -> Result<LossValue> {
    regression(net, schedule, x0, energy, times, noise, true)
}
