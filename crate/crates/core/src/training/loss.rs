use serde::{Deserialize, Serialize};

use crate::autodiff::{multilabel_soft_margin, Graph, Var};
use crate::error::{MctError, Result};
use crate::model::{ForwardRecord, ForwardVars, Variant};

/// Image-level multi-hot labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector(Vec<bool>);

impl LabelVector {
    /// Fails unless at least one class is present.
    pub fn new(present: Vec<bool>) -> Result<Self> {
        if !present.iter().any(|&p| p) {
            return Err(MctError::Config("label vector has no positive class".into()));
        }
        Ok(Self(present))
    }

    pub fn from_indices(num_classes: usize, present: &[usize]) -> Result<Self> {
        let mut v = vec![false; num_classes];
        for &c in present {
            *v.get_mut(c)
                .ok_or_else(|| MctError::Config(format!("class {c} out of range")))? = true;
        }
        Self::new(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, c: usize) -> bool {
        self.0[c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect()
    }

    pub fn present(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &p)| p).map(|(c, _)| c)
    }
}

/// `-(1/C) Σ_c [y_c log σ(s_c) + (1 - y_c) log σ(-s_c)]`.
pub fn multilabel_soft_margin_loss(scores: &[f64], labels: &LabelVector) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MctError::shape(
            "multilabel_soft_margin_loss",
            &[scores.len()],
            &[labels.len()],
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MctError::Config("non-finite class score".into()));
    }
    Ok(multilabel_soft_margin(scores, &labels.to_f64()))
}

/// The two loss terms of one sample and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    /// Zero for V1.
    pub patch: f64,
    pub total: f64,
}

/// Class-token loss, plus the PatchCAM loss for V2, summed unweighted.
pub fn total_loss(record: &ForwardRecord, labels: &LabelVector, variant: Variant) -> Result<LossParts> {
    let cls = multilabel_soft_margin_loss(record.class_scores_cls.data(), labels)?;
    let patch = match variant {
        Variant::V1 => 0.0,
        Variant::V2 => {
            let s = record
                .class_scores_patch
                .as_ref()
                .ok_or_else(|| MctError::InvalidRecord("V2 record without patch scores".into()))?;
            multilabel_soft_margin_loss(s.data(), labels)?
        }
    };
    Ok(LossParts {
        cls,
        patch,
        total: cls + patch,
    })
}

/// Graph version of [`total_loss`]; returns `(total, cls, patch)` handles.
pub fn loss_graph(
    g: &mut Graph,
    vars: &ForwardVars,
    labels: &LabelVector,
    variant: Variant,
) -> Result<(Var, Var, Option<Var>)> {
    let y = labels.to_f64();
    let cls = g.soft_margin_loss(vars.scores_cls, &y)?;
    match variant {
        Variant::V1 => Ok((cls, cls, None)),
        Variant::V2 => {
            let s = vars
                .scores_patch
                .ok_or_else(|| MctError::InvalidRecord("V2 graph without patch scores".into()))?;
            let patch = g.soft_margin_loss(s, &y)?;
            Ok((g.add(cls, patch)?, cls, Some(patch)))
        }
    }
}
