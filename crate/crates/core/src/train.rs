//! Reverse pass, Adam and the training loop.
//!
//! The re-connected adjacency is rebuilt from `Q` after every optimiser
//! step. Within one step its support is fixed, so `dL/dQ` reaches `Q` only
//! through the retained cosine values and their row normalisation.

use std::time::Instant;

use ndarray::{s, Array, Array1, Array2, ArrayView, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::datasets::{load_graph, DatasetDescriptor};
use crate::error::{Error, Result};
use crate::graph::{normalize_sym, stratified_split, CsrMatrix, Graph, NormalizedAdjacency, SplitMasks};
use crate::model::{
    accuracy, forward, masked_cross_entropy, Branches, CombineMode, DropoutMasks, ForwardInputs, ForwardTrace,
    GcnSlParams, Mode,
};
use crate::rng::{stream_rng, Stream};
use crate::spectral::{esc, esc_anch_seeded, median_pairwise_distance, sc_dense, SpectralFeatures, SpectralMethod};
use crate::structure::{build_reconnected, preprocess_features, SimilarityHead};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Output width of the similarity projection `Q`.
    pub p: usize,
    /// Output width of each first-layer projection.
    pub q: usize,
    pub eps: f64,
    /// Anchor count.
    pub m: usize,
    /// Spectral feature width.
    pub c: usize,
    /// Aggregation rounds over the input graph.
    pub k: usize,
    pub seed: u64,
    pub epochs: usize,
    pub patience: usize,
    pub combine: CombineMode,
    /// Whether weight decay also shrinks the gate `w`.
    pub decay_gate: bool,
    pub branches: Branches,
    pub spectral: SpectralMethod,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 5e-4,
            dropout: 0.5,
            p: 16,
            q: 32,
            eps: 0.9,
            m: 100,
            c: 15,
            k: 2,
            seed: 42,
            epochs: 500,
            patience: 100,
            combine: CombineMode::Cc,
            decay_gate: false,
            branches: Branches::default(),
            spectral: SpectralMethod::EscAnch,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be finite and non-negative", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("wd = {} must be finite and non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} must be in [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.eps) {
            return bad(format!("eps = {} must be in [0, 1]", self.eps));
        }
        for (name, value) in [("p", self.p), ("q", self.q), ("m", self.m), ("c", self.c), ("K", self.k)] {
            if value == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.epochs == 0 || self.patience == 0 {
            return bad("epochs and patience must be positive".into());
        }
        Ok(())
    }
}

/// One gradient per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub q: Array2<f64>,
    pub w0x: Array2<f64>,
    pub w0f: Array2<f64>,
    pub w: Array1<f64>,
    pub w1: Array2<f64>,
}

impl GradientSet {
    pub fn all_finite(&self) -> bool {
        [&self.q, &self.w0x, &self.w0f, &self.w1]
            .iter()
            .all(|g| g.iter().all(|v| v.is_finite()))
            && self.w.iter().all(|v| v.is_finite())
    }
}

/// Exact gradients of `trace.loss` for the fixed support and dropout masks
/// used to produce `trace`.
pub fn backward_gradients(
    trace: &ForwardTrace,
    inputs: &ForwardInputs<'_>,
    head: &SimilarityHead,
    params: &GcnSlParams,
) -> Result<GradientSet> {
    let n = inputs.x_aug.nrows();
    let count = inputs.loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    if trace.h_a.len() != params.rounds + 1 {
        return Err(Error::Trace("aggregation rounds"));
    }

    // softmax + cross-entropy
    let mut d_logits = trace.z.clone();
    for (i, mut row) in d_logits.axis_iter_mut(Axis(0)).enumerate() {
        if inputs.loss_mask[i] {
            row[inputs.labels[i]] -= 1.0;
            row /= count as f64;
        } else {
            row.fill(0.0);
        }
    }
    let d_w1 = trace.h_final.t().dot(&d_logits);
    let mut d_t = d_logits.dot(&params.w1.t());

    // ReLU(w * H_cb)
    Zip::from(&mut d_t)
        .and(&trace.h_cb)
        .and_broadcast(&params.w)
        .for_each(|g, &h, &w| {
            if !(h * w > 0.0) {
                *g = 0.0;
            }
        });
    let d_w = (&d_t * &trace.h_cb).sum_axis(Axis(0));
    let mut d_cb = &d_t * &params.w;
    if let Some(masks) = &trace.dropout {
        d_cb *= &masks.combined;
    }
    let width = params.hidden_width();
    if !inputs.branches.adjacency {
        d_cb.slice_mut(s![.., width..3 * width]).fill(0.0);
    }
    if !inputs.branches.reconnected {
        d_cb.slice_mut(s![.., 3 * width..]).fill(0.0);
    }
    let d_ego = d_cb.slice(s![.., ..width]);
    let d_prev = d_cb.slice(s![.., width..2 * width]);
    let d_last = d_cb.slice(s![.., 2 * width..3 * width]);
    let d_star = d_cb.slice(s![.., 3 * width..]);

    // H_A(k) = A_hat H_A(k-1), walked back from k = K to 1
    let rounds = params.rounds;
    let mut g = d_last.to_owned();
    for k in (1..=rounds).rev() {
        let mut below = inputs.a_hat.matrix.spmm_transpose(g.view())?;
        if k == rounds {
            below += &d_prev;
        }
        g = below;
    }
    let mut d_h = g + d_ego;

    let mut d_q = Array2::zeros(head.q.dim());
    if inputs.branches.reconnected {
        let rec = trace.reconnected.as_ref().ok_or(Error::Trace("re-connected adjacency"))?;
        let a_star = &rec.normalized.matrix;
        d_h += &a_star.spmm_transpose(d_star)?;

        // A*_ij = S_ij / r_i with S_ij = u_i . u_j on the support
        let mut d_unit = Array2::<f64>::zeros(rec.unit.dim());
        let (indptr, indices, values) = (a_star.indptr(), a_star.indices(), a_star.values());
        let mut g_row = Vec::new();
        for i in 0..n {
            let span = indptr[i]..indptr[i + 1];
            let upstream = d_star.row(i);
            g_row.clear();
            g_row.extend(indices[span.clone()].iter().map(|&j| upstream.dot(&trace.h.row(j))));
            let through_norm: f64 = g_row.iter().zip(&values[span.clone()]).map(|(g, a)| g * a).sum();
            let r = rec.row_sums[i];
            for (e, &j) in span.clone().zip(&indices[span]) {
                if j == i {
                    continue;
                }
                let d_s = (g_row[e - indptr[i]] - through_norm) / r;
                d_unit.row_mut(i).scaled_add(d_s, &rec.unit.row(j));
                d_unit.row_mut(j).scaled_add(d_s, &rec.unit.row(i));
            }
        }
        // u_i = P_i / |P_i|
        for (i, mut row) in d_unit.axis_iter_mut(Axis(0)).enumerate() {
            let u = rec.unit.row(i);
            let radial = row.dot(&u);
            row.scaled_add(-radial, &u);
            row /= rec.norms[i];
        }
        d_q = inputs.x_aug.t().dot(&d_unit);
    }

    if let Some(masks) = &trace.dropout {
        d_h *= &masks.hidden;
    }
    Zip::from(&mut d_h).and(&trace.h_pre).for_each(|g, &pre| {
        if !(pre > 0.0) {
            *g = 0.0;
        }
    });
    let (d_x, d_f) = match params.combine {
        CombineMode::Av => {
            let half = d_h * 0.5;
            (half.clone(), half)
        }
        CombineMode::Cc => {
            let q = params.q();
            (d_h.slice(s![.., ..q]).to_owned(), d_h.slice(s![.., q..]).to_owned())
        }
    };
    Ok(GradientSet {
        q: d_q,
        w0x: inputs.x_aug.t().dot(&d_x),
        w0f: inputs.spectral.t().dot(&d_f),
        w: d_w,
        w1: d_w1,
    })
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<D: Dimension> {
    pub m: Array<f64, D>,
    pub v: Array<f64, D>,
}

impl<D: Dimension> Moments<D> {
    pub fn zeros(dim: D) -> Self {
        Self {
            m: Array::zeros(dim.clone()),
            v: Array::zeros(dim),
        }
    }
}

/// One bias-corrected Adam update of `theta` at step `t >= 1`. Weight decay
/// is added to the gradient before the moment updates.
pub fn adam_update<D: Dimension>(
    theta: &mut Array<f64, D>,
    grad: ArrayView<'_, f64, D>,
    moments: &mut Moments<D>,
    t: u64,
    lr: f64,
    weight_decay: f64,
) {
    let c1 = 1.0 - BETA1.powf(t as f64);
    let c2 = 1.0 - BETA2.powf(t as f64);
    Zip::from(theta)
        .and(&grad)
        .and(&mut moments.m)
        .and(&mut moments.v)
        .for_each(|theta, &g, m, v| {
            let g = g + weight_decay * *theta;
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        });
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub q: Moments<ndarray::Ix2>,
    pub w0x: Moments<ndarray::Ix2>,
    pub w0f: Moments<ndarray::Ix2>,
    pub w: Moments<ndarray::Ix1>,
    pub w1: Moments<ndarray::Ix2>,
}

impl AdamState {
    pub fn new(params: &GcnSlParams, head: &SimilarityHead) -> Self {
        Self {
            t: 0,
            q: Moments::zeros(head.q.raw_dim()),
            w0x: Moments::zeros(params.w0x.raw_dim()),
            w0f: Moments::zeros(params.w0f.raw_dim()),
            w: Moments::zeros(params.w.raw_dim()),
            w1: Moments::zeros(params.w1.raw_dim()),
        }
    }
}

/// Applies one Adam step to every trainable tensor. Nothing is modified
/// when a gradient is not finite.
pub fn adam_step(
    params: &mut GcnSlParams,
    head: &mut SimilarityHead,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    decay_gate: bool,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::Numerics("gradients".into()));
    }
    state.t += 1;
    let t = state.t;
    adam_update(&mut head.q, grads.q.view(), &mut state.q, t, lr, weight_decay);
    adam_update(&mut params.w0x, grads.w0x.view(), &mut state.w0x, t, lr, weight_decay);
    adam_update(&mut params.w0f, grads.w0f.view(), &mut state.w0f, t, lr, weight_decay);
    let gate_decay = if decay_gate { weight_decay } else { 0.0 };
    adam_update(&mut params.w, grads.w.view(), &mut state.w, t, lr, gate_decay);
    adam_update(&mut params.w1, grads.w1.view(), &mut state.w1, t, lr, weight_decay);
    Ok(())
}

/// Per-graph quantities shared by every run of an experiment.
#[derive(Debug, Clone)]
pub struct PreparedGraph<'g> {
    pub graph: &'g Graph,
    pub a_hat: NormalizedAdjacency,
    /// Computed from the raw features.
    pub spectral: SpectralFeatures,
    /// Raw features with the injected column.
    pub x_aug: Array2<f64>,
    pub chosen_dim: usize,
}

pub fn spectral_features(x: ndarray::ArrayView2<'_, f64>, hyper: &HyperParams) -> Result<SpectralFeatures> {
    match hyper.spectral {
        SpectralMethod::EscAnch => esc_anch_seeded(x, hyper.m, hyper.c, hyper.seed),
        SpectralMethod::Esc => esc(x, hyper.c),
        SpectralMethod::ScDense => sc_dense(x, hyper.c, median_pairwise_distance(x)),
    }
}

pub fn prepare<'g>(graph: &'g Graph, hyper: &HyperParams) -> Result<PreparedGraph<'g>> {
    let spectral = spectral_features(graph.features().view(), hyper)?;
    prepare_with_spectral(graph, hyper, spectral)
}

pub fn prepare_with_spectral<'g>(
    graph: &'g Graph,
    hyper: &HyperParams,
    spectral: SpectralFeatures,
) -> Result<PreparedGraph<'g>> {
    if spectral.f.nrows() != graph.n_nodes() {
        return Err(Error::Shape(format!(
            "{} spectral rows for {} nodes",
            spectral.f.nrows(),
            graph.n_nodes()
        )));
    }
    let (x_aug, chosen_dim) = preprocess_features(graph.features().view(), hyper.seed);
    Ok(PreparedGraph {
        graph,
        a_hat: normalize_sym(graph),
        spectral,
        x_aug,
        chosen_dim,
    })
}

impl PreparedGraph<'_> {
    pub fn inputs<'a>(&'a self, support: &'a CsrMatrix, mask: &'a [bool], branches: Branches) -> ForwardInputs<'a> {
        ForwardInputs {
            x_aug: self.x_aug.view(),
            spectral: self.spectral.f.view(),
            a_hat: &self.a_hat,
            support,
            labels: self.graph.labels(),
            loss_mask: mask,
            branches,
        }
    }

    /// Thresholded support for the current `Q`; the identity when the
    /// re-connected branch is off.
    pub fn support(&self, head: &SimilarityHead, branches: Branches) -> Result<CsrMatrix> {
        if branches.reconnected {
            Ok(build_reconnected(self.x_aug.view(), head)?.a_star)
        } else {
            Ok(CsrMatrix::identity(self.graph.n_nodes()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub z: Array2<f64>,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Dropout-free forward pass scored on every split.
pub fn evaluate(
    prep: &PreparedGraph<'_>,
    head: &SimilarityHead,
    params: &GcnSlParams,
    support: &CsrMatrix,
    split: &SplitMasks,
    branches: Branches,
) -> Result<Evaluation> {
    let trace = forward(&prep.inputs(support, &split.val, branches), head, params, Mode::Eval)?;
    let labels = prep.graph.labels();
    let val_loss = masked_cross_entropy(trace.logits.view(), labels, &split.val)?;
    Ok(Evaluation {
        train_acc: accuracy(trace.z.view(), labels, &split.train),
        val_acc: accuracy(trace.z.view(), labels, &split.val),
        test_acc: accuracy(trace.z.view(), labels, &split.test),
        val_loss,
        z: trace.z,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub run_seed: u64,
    pub chosen_dim: usize,
    /// Training loss of each epoch's dropout forward pass.
    pub train_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    /// Epoch (0-based) with the lowest validation loss.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Test accuracy of the parameters saved at `best_epoch`.
    pub test_acc: f64,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

/// Parameters saved at the lowest validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub head: SimilarityHead,
    pub params: GcnSlParams,
    pub support: CsrMatrix,
    pub split: SplitMasks,
    pub run_seed: u64,
}

/// Trains once on the experiment seed.
pub fn fit(graph: &Graph, hyper: &HyperParams) -> Result<TrainReport> {
    hyper.validate()?;
    let prep = prepare(graph, hyper)?;
    Ok(fit_prepared(&prep, hyper, hyper.seed)?.0)
}

/// Trains one run. `run_seed` drives the split, initialisation and dropout.
pub fn fit_prepared(prep: &PreparedGraph<'_>, hyper: &HyperParams, run_seed: u64) -> Result<(TrainReport, TrainedModel)> {
    hyper.validate()?;
    let graph = prep.graph;
    let n = graph.n_nodes();
    let d = graph.n_features();
    let branches = hyper.branches;
    let split = stratified_split(graph, run_seed)?;

    let mut init_rng = stream_rng(run_seed, Stream::Init);
    let mut params = GcnSlParams::init(
        d,
        prep.spectral.c(),
        hyper.q,
        graph.class_count(),
        hyper.combine,
        hyper.k,
        &mut init_rng,
    )?;
    let mut head = SimilarityHead::init(d, hyper.p, hyper.eps, run_seed)?;
    let mut dropout_rng = stream_rng(run_seed, Stream::Dropout);
    let mut adam = AdamState::new(&params, &head);
    let mut support = prep.support(&head, branches)?;

    let mut report = TrainReport {
        run_seed,
        chosen_dim: prep.chosen_dim,
        train_loss: Vec::new(),
        train_acc: Vec::new(),
        val_loss: Vec::new(),
        val_acc: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        test_acc: 0.0,
    };
    let mut best: Option<TrainedModel> = None;
    let mut since_best = 0;

    for epoch in 0..hyper.epochs {
        let masks = DropoutMasks::sample(n, params.hidden_width(), hyper.dropout, &mut dropout_rng)?;
        let inputs = prep.inputs(&support, &split.train, branches);
        let trace = forward(&inputs, &head, &params, Mode::Train(&masks))?;
        let grads = backward_gradients(&trace, &inputs, &head, &params)?;
        adam_step(
            &mut params,
            &mut head,
            &grads,
            &mut adam,
            hyper.lr,
            hyper.weight_decay,
            hyper.decay_gate,
        )?;
        support = prep.support(&head, branches)?;

        let eval = evaluate(prep, &head, &params, &support, &split, branches)?;
        if !eval.val_loss.is_finite() || !trace.loss.is_finite() {
            return Err(Error::Numerics(format!("loss at epoch {epoch}")));
        }
        report.train_loss.push(trace.loss);
        report.train_acc.push(eval.train_acc);
        report.val_loss.push(eval.val_loss);
        report.val_acc.push(eval.val_acc);
        log::debug!(
            "seed {run_seed} epoch {epoch}: train {:.4} val {:.4} acc {:.3}",
            trace.loss,
            eval.val_loss,
            eval.val_acc
        );

        if eval.val_loss < report.best_val_loss {
            report.best_val_loss = eval.val_loss;
            report.best_epoch = epoch;
            report.test_acc = eval.test_acc;
            best = Some(TrainedModel {
                head: head.clone(),
                params: params.clone(),
                support: support.clone(),
                split: split.clone(),
                run_seed,
            });
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }
    let best = best.ok_or_else(|| Error::Numerics("no epoch produced a validation loss".into()))?;
    Ok((report, best))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub hyper: HyperParams,
    pub runs: Vec<TrainReport>,
    pub acc_mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub acc_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTimings {
    pub spectral_seconds: f64,
    pub run_seconds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summary: ExperimentSummary,
    pub models: Vec<TrainedModel>,
    pub timings: ExperimentTimings,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn run_experiment(desc: &DatasetDescriptor, hyper: &HyperParams, runs: usize) -> Result<ExperimentSummary> {
    let graph = load_graph(desc)?;
    Ok(run_experiment_on(&graph, hyper, runs)?.summary)
}

/// Runs seeds `seed..seed + runs` on one graph. Spectral features and the
/// injected column depend on the experiment seed only.
pub fn run_experiment_on(graph: &Graph, hyper: &HyperParams, runs: usize) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let spectral = spectral_features(graph.features().view(), hyper)?;
    run_experiment_with_spectral(graph, hyper, runs, spectral, start.elapsed().as_secs_f64())
}

pub fn run_experiment_with_spectral(
    graph: &Graph,
    hyper: &HyperParams,
    runs: usize,
    spectral: SpectralFeatures,
    spectral_seconds: f64,
) -> Result<ExperimentOutcome> {
    hyper.validate()?;
    if runs == 0 {
        return Err(Error::Param("runs must be positive".into()));
    }
    let prep = prepare_with_spectral(graph, hyper, spectral)?;
    let mut reports = Vec::with_capacity(runs);
    let mut models = Vec::with_capacity(runs);
    let mut timings = ExperimentTimings {
        spectral_seconds,
        run_seconds: Vec::with_capacity(runs),
    };
    for r in 0..runs as u64 {
        let seed = hyper.seed + r;
        let start = Instant::now();
        let (report, model) = fit_prepared(&prep, hyper, seed).map_err(|e| Error::Run {
            seed,
            source: Box::new(e),
        })?;
        timings.run_seconds.push(start.elapsed().as_secs_f64());
        log::info!("seed {seed}: test accuracy {:.4} at epoch {}", report.test_acc, report.best_epoch);
        reports.push(report);
        models.push(model);
    }
    let accs: Vec<f64> = reports.iter().map(|r| r.test_acc).collect();
    let (acc_mean, acc_std) = mean_std(&accs);
    Ok(ExperimentOutcome {
        summary: ExperimentSummary {
            hyper: hyper.clone(),
            runs: reports,
            acc_mean,
            acc_std,
        },
        models,
        timings,
    })
}
