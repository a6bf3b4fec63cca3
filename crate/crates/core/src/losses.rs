//! Scalar objectives and the confusing-set constructor.
//!
//! Every operation returns both a loss value and the analytic gradient
//! contribution per touched head, in the flat parameter layout of the
//! model module. Clamped scores contribute zero gradient.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ModelParams, ReferenceParams, ScoreVector};
use crate::scalar::{log_sigmoid, sigmoid, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Privileged,
    NonPrivileged,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Privileged => "privileged",
            Group::NonPrivileged => "non_privileged",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Routing {
    Preference,
    BceFallback,
    Hinge,
}

impl Routing {
    pub fn as_str(self) -> &'static str {
        match self {
            Routing::Preference => "preference",
            Routing::BceFallback => "bce_fallback",
            Routing::Hinge => "hinge",
        }
    }
}

/// Which preference formulation drives the privileged objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dpo,
    SimPo,
    Cpo,
}

/// One routed loss evaluation: value plus sparse per-head gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSample<T: Real> {
    pub group: Group,
    pub value: T,
    pub gradient: BTreeMap<usize, Vec<T>>,
    pub routing: Routing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LossConfig<T: Real> {
    pub beta: T,
    pub gamma_margin: T,
    pub lambda_cpo: T,
    pub epsilon_slack: T,
    pub focal_gamma: T,
    pub focal_alpha: T,
}

impl<T: Real> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig {
            beta: T::one(),
            gamma_margin: T::from_f64_lossy(0.3),
            lambda_cpo: T::one(),
            epsilon_slack: T::from_f64_lossy(0.05),
            focal_gamma: T::from_f64_lossy(2.0),
            focal_alpha: T::from_f64_lossy(0.25),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfusingKind {
    NegativesForTruePositive,
    PositivesForTrueNegative,
}

/// Labels the model currently confuses with the anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusingSet {
    pub anchor_label: usize,
    pub kind: ConfusingKind,
    pub members: Vec<usize>,
}

impl ConfusingSet {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Preferred / dispreferred head roles for one sampled counterpart.
/// The truly positive label always takes the preferred slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreferencePair {
    pub preferred: usize,
    pub dispreferred: usize,
    pub anchor: usize,
}

/// Binary cross-entropy: value and `d(loss)/d(logit)` factor.
pub fn bce<T: Real>(score: T, y: u8) -> (T, T) {
    let value = if y == 1 { -score.ln() } else { -(T::one() - score).ln() };
    let grad_logit = score - T::from_f64_lossy(f64::from(y));
    (value, grad_logit)
}

/// Focal loss `-α (1-p_t)^γ log p_t`; reduces to `α·BCE` at `γ = 0`.
pub fn focal<T: Real>(score: T, y: u8, cfg: &LossConfig<T>) -> (T, T) {
    let (gamma, alpha) = (cfg.focal_gamma, cfg.focal_alpha);
    let one = T::one();
    let (p_t, sign) = if y == 1 { (score, one) } else { (one - score, -one) };
    let value = -alpha * (one - p_t).powf(gamma) * p_t.ln();
    // d value / d p_t, then chain to d p_t / d m = sign and d m / d logit.
    let mut dv_dpt = -alpha * (one - p_t).powf(gamma) / p_t;
    if gamma > T::zero() {
        dv_dpt = dv_dpt + alpha * gamma * (one - p_t).powf(gamma - one) * p_t.ln();
    }
    let grad_logit = dv_dpt * sign * score * (one - score);
    (value, grad_logit)
}

/// Members scoring at or beyond the anchor on the wrong side, exactly per
/// the non-strict inequalities: ties with the anchor count as confusing.
pub fn build_confusing_set<T: Real>(
    scores: &ScoreVector<T>,
    labels: &[u8],
    anchor: usize,
) -> ConfusingSet {
    let anchor_score = scores.get(anchor);
    let kind = if labels[anchor] == 1 {
        ConfusingKind::NegativesForTruePositive
    } else {
        ConfusingKind::PositivesForTrueNegative
    };
    let members = (0..scores.len())
        .filter(|&k| {
            k != anchor
                && match kind {
                    ConfusingKind::NegativesForTruePositive => {
                        labels[k] == 0 && scores.get(k) >= anchor_score
                    }
                    ConfusingKind::PositivesForTrueNegative => {
                        labels[k] == 1 && scores.get(k) <= anchor_score
                    }
                }
        })
        .collect();
    ConfusingSet { anchor_label: anchor, kind, members }
}

/// Role assignment for a sampled counterpart `k`: the true positive of the
/// pair is preferred, whichever of anchor/counterpart it is.
pub fn assign_roles(anchor: usize, anchor_y: u8, counterpart: usize) -> PreferencePair {
    if anchor_y == 1 {
        PreferencePair { preferred: anchor, dispreferred: counterpart, anchor }
    } else {
        PreferencePair { preferred: counterpart, dispreferred: anchor, anchor }
    }
}

fn accumulate<T: Real>(
    gradient: &mut BTreeMap<usize, Vec<T>>,
    model: &ModelParams<T>,
    features: &[T],
    scores: &ScoreVector<T>,
    label: usize,
    logit_coeff: T,
) {
    if scores.is_clamped(label) || logit_coeff == T::zero() {
        return;
    }
    let head_grad = model.heads[label].grad_logit(features);
    let entry = gradient
        .entry(label)
        .or_insert_with(|| vec![T::zero(); head_grad.len()]);
    for (e, g) in entry.iter_mut().zip(&head_grad) {
        *e = *e + logit_coeff * *g;
    }
}

/// `-log σ(β[(log m_p − log m̂_p) − (log m_d − log m̂_d)])`.
pub fn pref_dpo<T: Real>(
    model: &ModelParams<T>,
    features: &[T],
    pair: PreferencePair,
    scores: &ScoreVector<T>,
    ref_scores: &ScoreVector<T>,
    cfg: &LossConfig<T>,
) -> LossSample<T> {
    let (p, d) = (pair.preferred, pair.dispreferred);
    let h = (scores.get(p).ln() - ref_scores.get(p).ln())
        - (scores.get(d).ln() - ref_scores.get(d).ln());
    let arg = cfg.beta * h;
    let value = -log_sigmoid(arg);
    let dv_darg = sigmoid(arg) - T::one();
    let mut gradient = BTreeMap::new();
    accumulate(
        &mut gradient,
        model,
        features,
        scores,
        p,
        dv_darg * cfg.beta * (T::one() - scores.get(p)),
    );
    accumulate(
        &mut gradient,
        model,
        features,
        scores,
        d,
        -dv_darg * cfg.beta * (T::one() - scores.get(d)),
    );
    LossSample { group: Group::Privileged, value, gradient, routing: Routing::Preference }
}

/// Reference-free `-log σ(β log(m_p/m_d) − γ)`.
pub fn pref_simpo<T: Real>(
    model: &ModelParams<T>,
    features: &[T],
    pair: PreferencePair,
    scores: &ScoreVector<T>,
    cfg: &LossConfig<T>,
) -> LossSample<T> {
    pref_margin(model, features, pair, scores, cfg, cfg.gamma_margin)
}

fn pref_margin<T: Real>(
    model: &ModelParams<T>,
    features: &[T],
    pair: PreferencePair,
    scores: &ScoreVector<T>,
    cfg: &LossConfig<T>,
    margin: T,
) -> LossSample<T> {
    let (p, d) = (pair.preferred, pair.dispreferred);
    let arg = cfg.beta * (scores.get(p).ln() - scores.get(d).ln()) - margin;
    let value = -log_sigmoid(arg);
    let dv_darg = sigmoid(arg) - T::one();
    let mut gradient = BTreeMap::new();
    accumulate(
        &mut gradient,
        model,
        features,
        scores,
        p,
        dv_darg * cfg.beta * (T::one() - scores.get(p)),
    );
    accumulate(
        &mut gradient,
        model,
        features,
        scores,
        d,
        -dv_darg * cfg.beta * (T::one() - scores.get(d)),
    );
    LossSample { group: Group::Privileged, value, gradient, routing: Routing::Preference }
}

/// Margin-free preference term plus `λ_CPO · BCE` on the anchor label.
pub fn pref_cpo<T: Real>(
    model: &ModelParams<T>,
    features: &[T],
    pair: PreferencePair,
    scores: &ScoreVector<T>,
    y_anchor: u8,
    cfg: &LossConfig<T>,
) -> LossSample<T> {
    let mut sample = pref_margin(model, features, pair, scores, cfg, T::zero());
    let m_a = scores.get(pair.anchor);
    let (bce_value, bce_grad) = bce(m_a, y_anchor);
    sample.value = sample.value + cfg.lambda_cpo * bce_value;
    accumulate(
        &mut sample.gradient,
        model,
        features,
        scores,
        pair.anchor,
        cfg.lambda_cpo * bce_grad,
    );
    sample
}

/// `max(0, BCE_live − BCE_ref − ε)`; zero gradient whenever inactive,
/// including exactly at the boundary.
pub fn nonprivileged_hinge<T: Real>(
    model: &ModelParams<T>,
    features: &[T],
    label: usize,
    scores: &ScoreVector<T>,
    ref_scores: &ScoreVector<T>,
    y: u8,
    cfg: &LossConfig<T>,
) -> LossSample<T> {
    let (live, _) = bce(scores.get(label), y);
    let (reference, _) = bce(ref_scores.get(label), y);
    let slack = live - reference - cfg.epsilon_slack;
    let mut gradient = BTreeMap::new();
    let value = if slack > T::zero() {
        let (_, grad) = bce(scores.get(label), y);
        accumulate(&mut gradient, model, features, scores, label, grad);
        slack
    } else {
        T::zero()
    };
    LossSample { group: Group::NonPrivileged, value, gradient, routing: Routing::Hinge }
}

/// Plain single-label BCE or focal loss as a routed sample.
pub fn single_label_sample<T: Real>(
    model: &ModelParams<T>,
    features: &[T],
    scores: &ScoreVector<T>,
    label: usize,
    y: u8,
    group: Group,
    use_focal: bool,
    cfg: &LossConfig<T>,
) -> LossSample<T> {
    let (value, grad) = if use_focal {
        focal(scores.get(label), y, cfg)
    } else {
        bce(scores.get(label), y)
    };
    let mut gradient = BTreeMap::new();
    accumulate(&mut gradient, model, features, scores, label, grad);
    LossSample { group, value, gradient, routing: Routing::BceFallback }
}

/// Ablation switches on the privileged routing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivilegedFlags {
    /// Negative anchors never form preference pairs; they fall back to BCE.
    #[serde(default)]
    pub only_confusing_negatives: bool,
    /// An empty confusing set contributes zero loss and zero gradient
    /// instead of the BCE fallback.
    #[serde(default)]
    pub no_bce_fallback: bool,
    /// Privileged anchors always use plain BCE (no preference loss at all).
    #[serde(default)]
    pub preference_off: bool,
}

/// Conditional privileged objective: preference loss on a sampled confusing
/// counterpart when one exists, BCE fallback otherwise.
#[allow(clippy::too_many_arguments)]
pub fn privileged_loss<T: Real, R: Rng + ?Sized>(
    model: &ModelParams<T>,
    reference: &ReferenceParams<T>,
    features: &[T],
    labels: &[u8],
    anchor: usize,
    variant: Variant,
    scores: &ScoreVector<T>,
    rng: &mut R,
    cfg: &LossConfig<T>,
    flags: PrivilegedFlags,
) -> LossSample<T> {
    let y_anchor = labels[anchor];
    let fallback = |model: &ModelParams<T>| {
        single_label_sample(model, features, scores, anchor, y_anchor, Group::Privileged, false, cfg)
    };
    if flags.preference_off {
        return fallback(model);
    }
    if flags.only_confusing_negatives && y_anchor == 0 {
        return fallback(model);
    }
    let confusing = build_confusing_set(scores, labels, anchor);
    if confusing.is_empty() {
        if flags.no_bce_fallback {
            return LossSample {
                group: Group::Privileged,
                value: T::zero(),
                gradient: BTreeMap::new(),
                routing: Routing::BceFallback,
            };
        }
        return fallback(model);
    }
    // One uniform draw per nonempty set, consumed here and nowhere else.
    let k = confusing.members[rng.gen_range(0..confusing.members.len())];
    let pair = assign_roles(anchor, y_anchor, k);
    match variant {
        Variant::Dpo => {
            let ref_scores = reference
                .forward(features)
                .expect("reference structurally identical to live model");
            pref_dpo(model, features, pair, scores, &ref_scores, cfg)
        }
        Variant::SimPo => pref_simpo(model, features, pair, scores, cfg),
        Variant::Cpo => pref_cpo(model, features, pair, scores, y_anchor, cfg),
    }
}
