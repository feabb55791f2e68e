//! Shallow-deep assembly: a backbone network with uncertainty heads
//! attached at interior taps (internal classifiers) and at the output.
//! Covers placement, the weighted multi-exit loss, joint training,
//! per-exit prediction, and prediction-switch counting.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GpConfig, GpHead};
use crate::nn::{
    cross_entropy_grad, softmax, DenseGrad, DenseLayer, Mode, Network, OptState, TrainConfig,
};

/// One interior exit: a linear projector from the tap activation to
/// the head's input space, then an uncertainty head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InternalClassifier {
    tap_index: usize,
    projector: DenseLayer,
    head: GpHead,
}

impl InternalClassifier {
    pub fn tap_index(&self) -> usize {
        self.tap_index
    }

    pub fn head(&self) -> &GpHead {
        &self.head
    }

    pub fn projector(&self) -> &DenseLayer {
        &self.projector
    }
}

/// Per-exit loss weights; index 0 weights the final exit and the rest
/// the internal classifiers in tap order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdnLossWeights {
    p: Vec<f64>,
}

impl SdnLossWeights {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidArgument(
                "loss weights need at least the final exit".into(),
            ));
        }
        if p.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be nonnegative and finite, got {p:?}"
            )));
        }
        Ok(Self { p })
    }

    /// The default scheme: every exit weighted 1/(N_IC + 1).
    pub fn equal(n_ic: usize) -> Self {
        let w = 1.0 / (n_ic + 1) as f64;
        Self { p: vec![w; n_ic + 1] }
    }

    /// All mass on the final exit; recovers plain single-exit training.
    pub fn final_only(n_ic: usize) -> Self {
        let mut p = vec![0.0; n_ic + 1];
        p[0] = 1.0;
        Self { p }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    fn check_len(&self, n_ic: usize) -> Result<()> {
        if self.p.len() != n_ic + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} loss weights for a model with {} exits",
                self.p.len(),
                n_ic + 1
            )));
        }
        Ok(())
    }
}

/// Which exits participate in switch counting. The literal definition
/// iterates over internal classifiers only; including the final exit
/// is exposed for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchScope {
    #[default]
    IcsOnly,
    IncludeFinal,
}

/// Uniform interior tap placement: indices ceil(j * L / (n_ic + 1))
/// for j = 1..n_ic. Always lands strictly before the final layer.
pub fn place_ics(depth: usize, n_ic: usize) -> Result<Vec<usize>> {
    if n_ic == 0 {
        return Err(Error::InvalidArgument(
            "placement needs at least one internal classifier".into(),
        ));
    }
    if n_ic >= depth {
        return Err(Error::InvalidArgument(format!(
            "cannot place {n_ic} internal classifiers in a depth-{depth} network"
        )));
    }
    Ok((1..=n_ic)
        .map(|j| (j * depth + n_ic) / (n_ic + 1))
        .collect())
}

/// Backbone plus uncertainty heads at every exit. The backbone output
/// feeds `final_head`; each internal classifier reads one interior tap.
/// A model with zero internal classifiers is a plain single-exit
/// network with a GP output head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdnModel {
    backbone: Network,
    ics: Vec<InternalClassifier>,
    final_head: GpHead,
}

impl SdnModel {
    /// Builds heads for `backbone` with `n_ic` uniformly placed
    /// internal classifiers. The final head is drawn from `rng` before
    /// the internal classifiers, so models that share a backbone and
    /// rng state agree on backbone and final-head weights regardless
    /// of `n_ic`.
    pub fn new(
        backbone: Network,
        n_ic: usize,
        n_classes: usize,
        gp: &GpConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let taps = if n_ic == 0 {
            Vec::new()
        } else {
            place_ics(backbone.depth(), n_ic)?
        };
        Self::with_taps(backbone, &taps, n_classes, gp, rng)
    }

    /// As [`SdnModel::new`] with explicit tap indices (strictly
    /// increasing, each in 1..depth).
    pub fn with_taps(
        mut backbone: Network,
        taps: &[usize],
        n_classes: usize,
        gp: &GpConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two classes, got {n_classes}"
            )));
        }
        for &t in taps {
            if t >= backbone.depth() {
                return Err(Error::InvalidArgument(format!(
                    "tap {t} does not precede the final layer of a depth-{} backbone",
                    backbone.depth()
                )));
            }
        }
        backbone.set_tap_points(taps.to_vec())?;
        let final_head = GpHead::new(backbone.output_dim(), n_classes, gp, rng)?;
        let mut ics = Vec::with_capacity(taps.len());
        for &tap_index in taps {
            let width = backbone.tap_dim(tap_index)?;
            // Identity-width linear projector: the head reads a learned
            // re-mix of the tap activation at its own width.
            let projector =
                DenseLayer::new(width, width, crate::nn::Activation::Identity, rng);
            let head = GpHead::new(width, n_classes, gp, rng)?;
            ics.push(InternalClassifier { tap_index, projector, head });
        }
        Ok(SdnModel { backbone, ics, final_head })
    }

    pub fn n_ic(&self) -> usize {
        self.ics.len()
    }

    pub fn n_classes(&self) -> usize {
        self.final_head.n_classes()
    }

    pub fn backbone(&self) -> &Network {
        &self.backbone
    }

    pub fn ics(&self) -> &[InternalClassifier] {
        &self.ics
    }

    pub fn final_head(&self) -> &GpHead {
        &self.final_head
    }

    pub fn tap_indices(&self) -> Vec<usize> {
        self.ics.iter().map(|ic| ic.tap_index).collect()
    }

    /// Total trainable parameters: backbone, projectors, and all head
    /// output weights (the fixed feature maps do not train).
    pub fn param_count(&self) -> usize {
        let ic_params: usize = self
            .ics
            .iter()
            .map(|ic| {
                ic.projector.weights.len() + ic.projector.bias.len() + ic.head.beta.len()
            })
            .sum();
        self.backbone.param_count() + ic_params + self.final_head.beta.len()
    }

    /// Flat parameter vector in update order: backbone dense slots
    /// (weights then bias each), then per internal classifier the
    /// projector weights, projector bias, and head output weights,
    /// then the final head's output weights.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.backbone.visit_dense(&mut |layer| {
            out.extend(layer.weights.iter());
            out.extend(layer.bias.iter());
        });
        for ic in &self.ics {
            out.extend(ic.projector.weights.iter());
            out.extend(ic.projector.bias.iter());
            out.extend(ic.head.beta.iter());
        }
        out.extend(self.final_head.beta.iter());
        out
    }

    /// Writes a flat parameter vector back; inverse of
    /// [`SdnModel::flat_params`].
    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters supplied, model holds {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        self.backbone.visit_dense_mut(&mut |layer| {
            for w in layer.weights.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
        });
        for ic in &mut self.ics {
            for w in ic.projector.weights.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
            for b in ic.projector.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
            for w in ic.head.beta.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
        }
        for w in self.final_head.beta.iter_mut() {
            *w = params[offset];
            offset += 1;
        }
        Ok(())
    }

    /// Variance-adjusted logits for every exit: internal classifiers
    /// in tap order, then the final head. One backbone forward pass;
    /// the interior taps are reused from its trace.
    pub fn exit_logits(&self, x: &ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        let trace = self.backbone.forward_trace(x, Mode::Eval)?;
        let mut exits = Vec::with_capacity(self.ics.len() + 1);
        for ic in &self.ics {
            let (_, h) = ic.projector.forward(&trace.tap(ic.tap_index).view());
            exits.push(ic.head.predict_adjusted(&h.view())?);
        }
        exits.push(self.final_head.predict_adjusted(&trace.output().view())?);
        Ok(exits)
    }

    /// Final-exit adjusted logits only.
    pub fn final_logits(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let trace = self.backbone.forward_trace(x, Mode::Eval)?;
        self.final_head.predict_adjusted(&trace.output().view())
    }

    /// Final-exit class predictions.
    pub fn predict(&self, x: &ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.final_logits(x)?))
    }

    /// Per-sample count of prediction changes between consecutive
    /// exits. `IcsOnly` follows the literal definition (internal
    /// classifiers only, needs at least two); `IncludeFinal` appends
    /// the final exit to the sequence.
    pub fn prediction_switches(
        &self,
        x: &ArrayView2<f64>,
        scope: SwitchScope,
    ) -> Result<Vec<usize>> {
        let required = match scope {
            SwitchScope::IcsOnly => 2,
            SwitchScope::IncludeFinal => 1,
        };
        if self.ics.len() < required {
            return Err(Error::UnsupportedConfiguration(format!(
                "switch counting over {:?} needs at least {required} internal classifiers, model has {}",
                scope,
                self.ics.len()
            )));
        }
        let exits = self.exit_logits(x)?;
        let seq: Vec<Vec<usize>> = match scope {
            SwitchScope::IcsOnly => exits[..self.ics.len()]
                .iter()
                .map(|e| argmax_rows(e))
                .collect(),
            SwitchScope::IncludeFinal => exits.iter().map(|e| argmax_rows(e)).collect(),
        };
        let n = x.nrows();
        let mut switches = vec![0usize; n];
        for step in 1..seq.len() {
            for i in 0..n {
                if seq[step][i] != seq[step - 1][i] {
                    switches[i] += 1;
                }
            }
        }
        Ok(switches)
    }
}

pub(crate) fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Per-batch loss and flat gradient, shared by the public loss/grad
/// entry points and the trainer. Raw (unadjusted) logits feed the
/// cross entropy; the variance adjustment is inference-only.
fn loss_and_grads(
    model: &SdnModel,
    x: &ArrayView2<f64>,
    labels: &[usize],
    weights: &SdnLossWeights,
    mode: Mode,
    want_grads: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    weights.check_len(model.ics.len())?;
    let p = weights.as_slice();
    let trace = model.backbone.forward_trace(x, mode)?;

    // Final exit first: per-exit losses are ordered [final, ics..] to
    // line up with the weight vector.
    let final_rff = model.final_head.rff_trace(&trace.output().view())?;
    let final_logits = model
        .final_head
        .logits_from_features(&final_rff.phi.view())?;
    let (final_loss, final_dlogits) = cross_entropy_grad(&final_logits.view(), labels)?;
    let mut per_exit = vec![final_loss];
    let mut total = p[0] * final_loss;

    struct IcPass {
        cache: crate::nn::DenseCache,
        h: Array2<f64>,
        rff: crate::gp::RffTrace,
        dlogits: Array2<f64>,
    }
    let mut passes = Vec::with_capacity(model.ics.len());
    for (i, ic) in model.ics.iter().enumerate() {
        let (cache, h) = ic.projector.forward(&trace.tap(ic.tap_index).view());
        let rff = ic.head.rff_trace(&h.view())?;
        let logits = ic.head.logits_from_features(&rff.phi.view())?;
        let (loss, dlogits) = cross_entropy_grad(&logits.view(), labels)?;
        per_exit.push(loss);
        total += p[i + 1] * loss;
        passes.push(IcPass { cache, h, rff, dlogits });
    }
    if !want_grads {
        return Ok((total, per_exit, Vec::new()));
    }

    // Assemble the flat gradient in flat_params order.
    let (dbeta_final, dh_out) = model.final_head.backward(
        &trace.output().view(),
        &final_rff,
        &(&final_dlogits * p[0]).view(),
    );
    let mut ic_grads = Vec::with_capacity(model.ics.len());
    let mut tap_grads = Vec::with_capacity(model.ics.len());
    for (i, (ic, pass)) in model.ics.iter().zip(&passes).enumerate() {
        let (dbeta, dh) =
            ic.head
                .backward(&pass.h.view(), &pass.rff, &(&pass.dlogits * p[i + 1]).view());
        let mut proj_grad = DenseGrad::zeros_like(&ic.projector);
        let dtap = ic.projector.backward(&pass.cache, &dh.view(), &mut proj_grad);
        ic_grads.push((proj_grad, dbeta));
        tap_grads.push((ic.tap_index, dtap));
    }
    let (backbone_grads, _) = model.backbone.backward(&trace, &dh_out.view(), &tap_grads);

    let mut flat = Vec::with_capacity(model.param_count());
    for slot in &backbone_grads.slots {
        flat.extend(slot.dw.iter());
        flat.extend(slot.db.iter());
    }
    for (proj_grad, dbeta) in &ic_grads {
        flat.extend(proj_grad.dw.iter());
        flat.extend(proj_grad.db.iter());
        flat.extend(dbeta.iter());
    }
    flat.extend(dbeta_final.iter());
    Ok((total, per_exit, flat))
}

/// Weighted multi-exit loss: p[0] * CE(final) + sum_i p[i] * CE(IC_i).
/// Returns the total and the unweighted per-exit values ordered
/// [final, IC_1, .., IC_N].
pub fn sdn_loss(
    model: &SdnModel,
    x: &ArrayView2<f64>,
    labels: &[usize],
    weights: &SdnLossWeights,
) -> Result<(f64, Vec<f64>)> {
    let (total, per_exit, _) = loss_and_grads(model, x, labels, weights, Mode::Eval, false)?;
    Ok((total, per_exit))
}

/// Total loss plus its analytic gradient, flattened in
/// [`SdnModel::flat_params`] order.
pub fn sdn_loss_gradient(
    model: &SdnModel,
    x: &ArrayView2<f64>,
    labels: &[usize],
    weights: &SdnLossWeights,
) -> Result<(f64, Vec<f64>)> {
    let (total, _, flat) = loss_and_grads(model, x, labels, weights, Mode::Eval, true)?;
    Ok((total, flat))
}

/// Refits every head's Laplace covariance from the given inputs (one
/// shared backbone pass).
pub fn laplace_pass(model: &mut SdnModel, x: &ArrayView2<f64>) -> Result<()> {
    let trace = model.backbone.forward_trace(x, Mode::Eval)?;
    for ic in &mut model.ics {
        let (_, h) = ic.projector.forward(&trace.tap(ic.tap_index).view());
        let phi = ic.head.rff_features(&h.view())?;
        let probs = softmax(&ic.head.logits_from_features(&phi.view())?.view());
        ic.head.laplace_update(&phi.view(), &probs.view())?;
    }
    let phi = model.final_head.rff_features(&trace.output().view())?;
    let probs = softmax(&model.final_head.logits_from_features(&phi.view())?.view());
    model.final_head.laplace_update(&phi.view(), &probs.view())?;
    Ok(())
}

/// Joint training of backbone, projectors, and all head output
/// weights under the weighted multi-exit loss, followed by one Laplace
/// pass per head over the full training inputs. Returns the per-epoch
/// mean total loss.
pub fn train_sdn(
    model: &mut SdnModel,
    x: &ArrayView2<f64>,
    labels: &[usize],
    config: &TrainConfig,
    weights: &SdnLossWeights,
) -> Result<Vec<f64>> {
    config.validate()?;
    weights.check_len(model.ics.len())?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} training rows vs {} labels",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptState::new(config.optimizer, model.param_count());
    let mut rate = config.learning_rate;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        rate = crate::nn::train::scheduled_rate(
            config.learning_rate,
            &config.lr_schedule,
            epoch,
            rate,
        );
        let mut epoch_loss = 0.0;
        for batch in crate::nn::train::epoch_batches(n, config.batch_size, &mut rng) {
            let xb = crate::nn::train::gather_rows(x, &batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (batch_loss, _, grads) = loss_and_grads(
                model,
                &xb.view(),
                &yb,
                weights,
                Mode::Train(&mut rng),
                true,
            )?;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += batch_loss * batch.len() as f64;
            let mut params = model.flat_params();
            opt.begin_step();
            opt.apply(rate, 0, &mut params, &grads);
            model.set_flat_params(&params)?;
            crate::nn::normalize_configured(&mut model.backbone);
        }
        history.push(epoch_loss / n as f64);
    }
    laplace_pass(model, x)?;
    Ok(history)
}

#[derive(Serialize, Deserialize)]
struct SdnFile {
    format_version: u32,
    tap_indices: Vec<usize>,
    ics: Vec<InternalClassifier>,
    final_head: GpHead,
}

const SDN_FORMAT_VERSION: u32 = 1;

/// Writes the model as a directory: `backbone.json` (the network) and
/// `sdn.json` (tap indices, projectors, head states).
pub fn save_sdn(model: &SdnModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::nn::save_network(&model.backbone, &dir.join("backbone.json"))?;
    let file = SdnFile {
        format_version: SDN_FORMAT_VERSION,
        tap_indices: model.tap_indices(),
        ics: model.ics.clone(),
        final_head: model.final_head.clone(),
    };
    std::fs::write(dir.join("sdn.json"), serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_sdn(dir: &Path) -> Result<SdnModel> {
    let backbone = crate::nn::load_network(&dir.join("backbone.json"))?;
    let text = std::fs::read_to_string(dir.join("sdn.json"))?;
    let file: SdnFile = serde_json::from_str(&text)?;
    if file.format_version != SDN_FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported model format version {}",
            file.format_version
        )));
    }
    for (ic, &tap) in file.ics.iter().zip(&file.tap_indices) {
        if ic.tap_index != tap {
            return Err(Error::Schema(
                "tap index manifest disagrees with classifier records".into(),
            ));
        }
        if tap >= backbone.depth() {
            return Err(Error::Schema(format!(
                "tap {tap} out of range for depth-{} backbone",
                backbone.depth()
            )));
        }
    }
    let mut backbone = backbone;
    backbone.set_tap_points(file.tap_indices)?;
    Ok(SdnModel {
        backbone,
        ics: file.ics,
        final_head: file.final_head,
    })
}
