//! Loss assembly and the training loop.
//!
//! The reconstruction loss combines the per-patch l2 and cosine distances.
//! The intra branch pulls its correlations toward spread distributions, the
//! inter branch toward concentrated ones; both are optimized in two phases
//! with stop-gradients between targets and correlations, gradients of the
//! two phase losses accumulated before a single Adam step per image. Direct
//! single-loss optimization is kept as an ablation mode.

use crate::autodiff::{Tape, Var};
use crate::bank::BankSource;
use crate::correlation::{divergence_total, entropy_measure};
use crate::error::{Error, Result};
use crate::model::{forward, FeatureSequence, ForwardTrace, LevelModel};
use crate::param::ParamStore;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptMode {
    TwoPhase,
    Direct,
}

impl OptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OptMode::TwoPhase => "two-phase",
            OptMode::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two-phase" => Ok(OptMode::TwoPhase),
            "direct" => Ok(OptMode::Direct),
            other => Err(Error::config(format!("unknown optimization mode '{other}'"))),
        }
    }
}

/// Per-level training settings.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub entropy: bool,
    pub opt: OptMode,
    /// Multiplies the training objective; 1.0 for normal runs. A value of
    /// 2.0 makes a single-loss run consume the same accumulated gradient as
    /// a degenerate two-phase run.
    pub loss_scale: f64,
}

impl TrainSettings {
    /// Entropy-off ablation is a zero entropy weight everywhere.
    fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.weights.lambda1,
            lambda2: if self.entropy { self.weights.lambda2 } else { 0.0 },
        }
    }
}

/// Mean over patches of `||xhat_i - x_i||_2 + (1 - cos(xhat_i, x_i))`, the
/// cosine denominator floored at 1e-12.
pub fn reconstruction_loss(tape: &Tape, xhat: Var, x: Var) -> Result<Var> {
    Ok(tape.mean_all(reconstruction_rows(tape, xhat, x)?))
}

/// Per-patch reconstruction distances (also the Rec anomaly criterion).
pub fn reconstruction_rows(tape: &Tape, xhat: Var, x: Var) -> Result<Var> {
    let diff = tape.sub(xhat, x)?;
    let l2 = tape.sqrt(tape.row_sum(tape.mul(diff, diff)?)?);
    let num = tape.row_sum(tape.mul(xhat, x)?)?;
    let nh = tape.sqrt(tape.row_sum(tape.mul(xhat, xhat)?)?);
    let nx = tape.sqrt(tape.row_sum(tape.mul(x, x)?)?);
    let den = tape.clamp_min(tape.mul(nh, nx)?, 1e-12);
    let cos = tape.div(num, den)?;
    let one_minus = tape.add_scalar(tape.neg(cos), 1.0);
    tape.add(l2, one_minus)
}

/// The reported loss components of one trace (the loss-history columns):
/// reconstruction as a per-patch mean, divergences as row means, entropies
/// as the full sum, all layer-averaged.
pub struct TraceMeasures {
    pub rec: Var,
    pub div_g: Var,
    pub div_e: Var,
    pub ent_g: Var,
    pub ent_e: Var,
}

pub fn trace_measures(tape: &Tape, trace: &ForwardTrace) -> Result<TraceMeasures> {
    Ok(TraceMeasures {
        rec: reconstruction_loss(tape, trace.xhat, trace.x)?,
        div_g: crate::correlation::divergence_measure(tape, &trace.tg, &trace.sg)?,
        div_e: crate::correlation::divergence_measure(tape, &trace.te, &trace.se)?,
        ent_g: entropy_measure(tape, &trace.sg)?,
        ent_e: entropy_measure(tape, &trace.se)?,
    })
}

/// The training-objective components. The reconstruction term is the
/// per-patch mean; the divergence reduces over patch rows by summation so it
/// lives on the same O(N) scale as the entropy item — with a mean-scale
/// divergence the entropy term outweighs it by a factor of N and the
/// correlations collapse onto a single reference.
pub struct LossTerms {
    pub rec: Var,
    pub div_g: Var,
    pub div_e: Var,
    pub ent_g: Var,
    pub ent_e: Var,
}

pub fn loss_terms(tape: &Tape, trace: &ForwardTrace) -> Result<LossTerms> {
    Ok(LossTerms {
        rec: reconstruction_loss(tape, trace.xhat, trace.x)?,
        div_g: divergence_total(tape, &trace.tg, &trace.sg)?,
        div_e: divergence_total(tape, &trace.te, &trace.se)?,
        ent_g: entropy_measure(tape, &trace.sg)?,
        ent_e: entropy_measure(tape, &trace.se)?,
    })
}

/// Intra-branch loss: `lambda1 Div(T_g, S_g) - lambda2 Ent(S_g)`.
pub fn intra_loss(tape: &Tape, t: &LossTerms, w: &LossWeights) -> Result<Var> {
    let div = tape.scale(t.div_g, w.lambda1);
    let ent = tape.scale(t.ent_g, w.lambda2);
    tape.sub(div, ent)
}

/// Inter-branch loss, opposite direction: `-lambda1 Div(T_e, S_e) + lambda2 Ent(S_e)`.
pub fn inter_loss(tape: &Tape, t: &LossTerms, w: &LossWeights) -> Result<Var> {
    let div = tape.scale(t.div_e, w.lambda1);
    let ent = tape.scale(t.ent_e, w.lambda2);
    tape.sub(ent, div)
}

/// Direct-mode objective: reconstruction plus both branch losses.
pub fn total_loss(tape: &Tape, t: &LossTerms, w: &LossWeights) -> Result<Var> {
    let lg = intra_loss(tape, t, w)?;
    let le = inter_loss(tape, t, w)?;
    tape.add(tape.add(t.rec, lg)?, le)
}

/// The two phase losses. Phase one adapts targets with correlations frozen;
/// phase two adapts correlations (and entropy terms) with targets frozen.
/// `rec` is the reconstruction term shared by both phases.
pub fn two_phase_losses(
    tape: &Tape,
    trace: &ForwardTrace,
    rec: Var,
    w: &LossWeights,
) -> Result<(Var, Var)> {
    let sg_frozen: Vec<Var> = trace.sg.iter().map(|&s| tape.stop_gradient(s)).collect();
    let se_frozen: Vec<Var> = trace.se.iter().map(|&s| tape.stop_gradient(s)).collect();
    let tg_frozen: Vec<Var> = trace.tg.iter().map(|&t| tape.stop_gradient(t)).collect();
    let te_frozen: Vec<Var> = trace.te.iter().map(|&t| tape.stop_gradient(t)).collect();

    // Phase 1: L_l + l1 Div(T_g, SG[S_g]) - l1 Div(T_e, SG[S_e])
    let div_g1 = divergence_total(tape, &trace.tg, &sg_frozen)?;
    let div_e1 = divergence_total(tape, &trace.te, &se_frozen)?;
    let phase1 = tape.add(
        rec,
        tape.sub(
            tape.scale(div_g1, w.lambda1),
            tape.scale(div_e1, w.lambda1),
        )?,
    )?;

    // Phase 2: L_l - l1 Div(SG[T_g], S_g) + l1 Div(SG[T_e], S_e)
    //              - l2 Ent(S_g) + l2 Ent(S_e)
    let div_g2 = divergence_total(tape, &tg_frozen, &trace.sg)?;
    let div_e2 = divergence_total(tape, &te_frozen, &trace.se)?;
    let ent_g = entropy_measure(tape, &trace.sg)?;
    let ent_e = entropy_measure(tape, &trace.se)?;
    let div_part = tape.sub(
        tape.scale(div_e2, w.lambda1),
        tape.scale(div_g2, w.lambda1),
    )?;
    let ent_part = tape.sub(tape.scale(ent_e, w.lambda2), tape.scale(ent_g, w.lambda2))?;
    let phase2 = tape.add(rec, tape.add(div_part, ent_part)?)?;

    Ok((phase1, phase2))
}

/// Loss components of one epoch, means over its image steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub rec: f64,
    pub div_g: f64,
    pub div_e: f64,
    pub ent_g: f64,
    pub ent_e: f64,
}

impl EpochStats {
    pub fn csv_header() -> &'static str {
        "epoch,l_rec,div_g,div_e,ent_g,ent_e"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.12},{:.12},{:.12},{:.12},{:.12}",
            self.epoch, self.rec, self.div_g, self.div_e, self.ent_g, self.ent_e
        )
    }
}

/// One optimization step on one image: forward, loss assembly by mode,
/// backward (twice for two-phase, with accumulation), one Adam step per
/// parameter. Returns the step's loss components.
pub fn train_step(
    store: &mut ParamStore,
    model: &LevelModel,
    image: &FeatureSequence,
    banks: &BankSource,
    settings: &TrainSettings,
    context: &str,
) -> Result<EpochStats> {
    let bank = banks.bank_for(image)?;
    let tape = Tape::new();
    let trace = forward(&tape, store, image, &bank, model)?;
    let measures = trace_measures(&tape, &trace)?;
    let stats = EpochStats {
        epoch: 0,
        rec: tape.scalar_value(measures.rec),
        div_g: tape.scalar_value(measures.div_g),
        div_e: tape.scalar_value(measures.div_e),
        ent_g: tape.scalar_value(measures.ent_g),
        ent_e: tape.scalar_value(measures.ent_e),
    };
    let w = settings.effective_weights();
    let terms = loss_terms(&tape, &trace)?;
    match settings.opt {
        OptMode::TwoPhase => {
            let (l1, l2) = two_phase_losses(&tape, &trace, terms.rec, &w)?;
            let (l1, l2) = if settings.loss_scale == 1.0 {
                (l1, l2)
            } else {
                (
                    tape.scale(l1, settings.loss_scale),
                    tape.scale(l2, settings.loss_scale),
                )
            };
            let (v1, v2) = (tape.scalar_value(l1), tape.scalar_value(l2));
            if !v1.is_finite() || !v2.is_finite() {
                return Err(Error::NonFinite(format!("phase losses at {context}")));
            }
            tape.backward_params(l1, store)?;
            tape.backward_params(l2, store)?;
        }
        OptMode::Direct => {
            let mut loss = total_loss(&tape, &terms, &w)?;
            if settings.loss_scale != 1.0 {
                loss = tape.scale(loss, settings.loss_scale);
            }
            if !tape.scalar_value(loss).is_finite() {
                return Err(Error::NonFinite(format!("total loss at {context}")));
            }
            tape.backward_params(loss, store)?;
        }
    }
    store.adam_step_all(settings.lr)?;
    Ok(stats)
}

/// Trains one level model over the given images for `settings.epochs`
/// epochs, one Adam step per image, images visited in a seeded shuffled
/// order each epoch. Returns the per-epoch loss history.
pub fn train_level(
    store: &mut ParamStore,
    model: &LevelModel,
    images: &[FeatureSequence],
    banks: &BankSource,
    settings: &TrainSettings,
) -> Result<Vec<EpochStats>> {
    if images.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if settings.epochs == 0 {
        return Err(Error::config("epochs must be >= 1"));
    }
    let mut history = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let order = Rng::new(settings.seed)
            .derive(0x7261_696e + epoch as u64)
            .permutation(images.len());
        let mut sums = [0.0f64; 5];
        for &idx in &order {
            let context = format!("epoch {epoch} image {idx} level {}", model.level.label());
            let s = train_step(store, model, &images[idx], banks, settings, &context)?;
            sums[0] += s.rec;
            sums[1] += s.div_g;
            sums[2] += s.div_e;
            sums[3] += s.ent_g;
            sums[4] += s.ent_e;
        }
        let n = images.len() as f64;
        history.push(EpochStats {
            epoch,
            rec: sums[0] / n,
            div_g: sums[1] / n,
            div_e: sums[2] / n,
            ent_g: sums[3] / n,
            ent_e: sums[4] / n,
        });
    }
    Ok(history)
}
