//! Pharmacological actions, the rule-based parameter modulation map and the
//! clinical feasibility mask.
//!
//! A rule rewrites one template parameter as
//! `clamp(p · (1 + mult·dose) + add·dose, min, max)`, so dose 0 is always the
//! identity. Combination actions apply the rules of both drugs one after the
//! other in registry order, clamping after each application.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ecg_ode::{OdeError, OdeParams, WaveLabel};

/// Default registry covering the eight drug-response regimens.
pub const DEFAULT_REGISTRY_JSON: &str = include_str!("../data/registry.json");

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("unknown drug id {0:?}")]
    UnknownDrug(String),
    #[error("invalid registry: {0}")]
    InvalidRegistry(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("action {action} rejected by mask: {reason}")]
    Masked { action: String, reason: MaskReason },
    #[error("modulation produced invalid parameters: {0}")]
    Modulation(#[from] OdeError),
    #[error("registry parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    SingleBolus,
    Combination,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::SingleBolus => "single-bolus",
            Protocol::Combination => "combination",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamField {
    Alpha,
    B,
    Theta,
}

/// Which template parameter a rule acts on: a wave field or the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamSelector {
    Wave(WaveLabel, ParamField),
    Baseline,
}

impl ParamSelector {
    pub fn get(&self, p: &OdeParams) -> f64 {
        match *self {
            ParamSelector::Baseline => p.y0(),
            ParamSelector::Wave(label, field) => {
                let w = p.wave(label);
                match field {
                    ParamField::Alpha => w.alpha,
                    ParamField::B => w.b,
                    ParamField::Theta => w.theta,
                }
            }
        }
    }

    pub fn set(&self, p: &mut OdeParams, value: f64) {
        match *self {
            ParamSelector::Baseline => p.set_y0(value),
            ParamSelector::Wave(label, field) => {
                let w = p.wave_mut(label);
                match field {
                    ParamField::Alpha => w.alpha = value,
                    ParamField::B => w.b = value,
                    ParamField::Theta => w.theta = value,
                }
            }
        }
    }
}

impl fmt::Display for ParamSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamSelector::Baseline => f.write_str("y0"),
            ParamSelector::Wave(l, field) => {
                let name = match field {
                    ParamField::Alpha => "alpha",
                    ParamField::B => "b",
                    ParamField::Theta => "theta",
                };
                write!(f, "{l}.{name}")
            }
        }
    }
}

impl FromStr for ParamSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "y0" {
            return Ok(ParamSelector::Baseline);
        }
        let (wave, field) = s.split_once('.').ok_or_else(|| format!("bad parameter selector {s:?}"))?;
        let label = match wave {
            "P" => WaveLabel::P,
            "Q" => WaveLabel::Q,
            "R" => WaveLabel::R,
            "S" => WaveLabel::S,
            "T" => WaveLabel::T,
            _ => return Err(format!("unknown wave {wave:?}")),
        };
        let field = match field {
            "alpha" => ParamField::Alpha,
            "b" => ParamField::B,
            "theta" => ParamField::Theta,
            _ => return Err(format!("unknown field {field:?}")),
        };
        Ok(ParamSelector::Wave(label, field))
    }
}

impl Serialize for ParamSelector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamSelector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulationRule {
    pub target: ParamSelector,
    /// Multiplicative coefficient per unit dose.
    #[serde(default)]
    pub mult: f64,
    /// Additive offset per unit dose.
    #[serde(default)]
    pub add: f64,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

impl ModulationRule {
    fn validate(&self) -> Result<(), String> {
        if !(self.mult.is_finite() && self.add.is_finite()) {
            return Err(format!("rule on {} has non-finite coefficients", self.target));
        }
        let (lo, hi) = (self.min.unwrap_or(f64::NEG_INFINITY), self.max.unwrap_or(f64::INFINITY));
        if lo > hi {
            return Err(format!("rule on {} has min > max", self.target));
        }
        if let ParamSelector::Wave(_, field) = self.target {
            match field {
                ParamField::B if !(lo > 0.0 && hi.is_finite()) => {
                    return Err(format!("width rule on {} needs bounds with min > 0", self.target));
                }
                ParamField::Theta if !(lo >= 0.0 && hi < TAU) => {
                    return Err(format!("phase rule on {} needs bounds inside [0, 2π)", self.target));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn apply(&self, params: &mut OdeParams, dose: f64) {
        if dose == 0.0 {
            return;
        }
        let current = self.target.get(params);
        let raw = current * (1.0 + self.mult * dose) + self.add * dose;
        let lo = self.min.unwrap_or(f64::NEG_INFINITY);
        let hi = self.max.unwrap_or(f64::INFINITY);
        self.target.set(params, raw.clamp(lo, hi));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrugSpec {
    pub id: String,
    #[serde(default)]
    pub rules: Vec<ModulationRule>,
    pub max_dose: f64,
}

/// Drug table plus the feasibility mask, loaded from one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrugRegistry {
    pub drugs: Vec<DrugSpec>,
    #[serde(default)]
    pub forbidden_pairs: Vec<[String; 2]>,
    pub protocols: Vec<Protocol>,
}

impl DrugRegistry {
    pub fn from_json(s: &str) -> Result<Self, ActionError> {
        let reg: DrugRegistry = serde_json::from_str(s)?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn default_registry() -> Self {
        Self::from_json(DEFAULT_REGISTRY_JSON).expect("bundled registry is valid")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ActionError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ActionError::InvalidRegistry(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ActionError> {
        let mut seen = BTreeSet::new();
        for d in &self.drugs {
            if !seen.insert(d.id.as_str()) {
                return Err(ActionError::InvalidRegistry(format!("duplicate drug {:?}", d.id)));
            }
            if !(d.max_dose.is_finite() && d.max_dose >= 0.0) {
                return Err(ActionError::InvalidRegistry(format!("drug {:?} has bad max_dose", d.id)));
            }
            for r in &d.rules {
                r.validate().map_err(ActionError::InvalidRegistry)?;
            }
        }
        for [a, b] in &self.forbidden_pairs {
            for id in [a, b] {
                if !seen.contains(id.as_str()) {
                    return Err(ActionError::UnknownDrug(id.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn drug(&self, id: &str) -> Option<&DrugSpec> {
        self.drugs.iter().find(|d| d.id == id)
    }

    /// Position of a drug in registry order.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.drugs.iter().position(|d| d.id == id)
    }

    pub fn len(&self) -> usize {
        self.drugs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drugs.is_empty()
    }

    pub fn mask(&self) -> ActionMask {
        ActionMask {
            max_dose: self.drugs.iter().map(|d| (d.id.clone(), d.max_dose)).collect(),
            forbidden_pairs: self.forbidden_pairs.iter().map(|[a, b]| ordered_pair(a, b)).collect(),
            protocols: self.protocols.iter().copied().collect(),
        }
    }

    pub fn single(&self, id: &str, dose: f64) -> Result<Action, ActionError> {
        self.drug(id).ok_or_else(|| ActionError::UnknownDrug(id.to_string()))?;
        Action::single(id, dose)
    }

    pub fn combination(&self, a: (&str, f64), b: (&str, f64)) -> Result<Action, ActionError> {
        for id in [a.0, b.0] {
            self.drug(id).ok_or_else(|| ActionError::UnknownDrug(id.to_string()))?;
        }
        Action::combination(a, b)
    }

    /// Parses ids of the form `drug@dose` or `drugA@doseA+drugB@doseB`.
    pub fn parse_action(&self, id: &str) -> Result<Action, ActionError> {
        let part = |s: &str| -> Result<(String, f64), ActionError> {
            let (drug, dose) =
                s.split_once('@').ok_or_else(|| ActionError::InvalidAction(format!("missing '@' in {s:?}")))?;
            let dose: f64 = dose.parse().map_err(|_| ActionError::InvalidAction(format!("bad dose in {s:?}")))?;
            Ok((drug.to_string(), dose))
        };
        match id.split_once('+') {
            None => {
                let (d, x) = part(id)?;
                self.single(&d, x)
            }
            Some((l, r)) => {
                let (a, x) = part(l)?;
                let (b, y) = part(r)?;
                self.combination((&a, x), (&b, y))
            }
        }
    }
}

fn ordered_pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrugDose {
    pub drug_id: String,
    pub dose: f64,
}

/// A pharmacological intervention. Combinations keep their two components in
/// lexicographic drug order so equal regimens compare equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub drug_id: String,
    pub dose: f64,
    pub protocol: Protocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second: Option<DrugDose>,
}

impl Action {
    pub fn single(drug_id: &str, dose: f64) -> Result<Self, ActionError> {
        check_dose(dose)?;
        Ok(Action { drug_id: drug_id.to_string(), dose, protocol: Protocol::SingleBolus, second: None })
    }

    pub fn combination(a: (&str, f64), b: (&str, f64)) -> Result<Self, ActionError> {
        check_dose(a.1)?;
        check_dose(b.1)?;
        if a.0 == b.0 {
            return Err(ActionError::InvalidAction(format!("combination repeats drug {:?}", a.0)));
        }
        let (first, second) = if a.0 <= b.0 { (a, b) } else { (b, a) };
        Ok(Action {
            drug_id: first.0.to_string(),
            dose: first.1,
            protocol: Protocol::Combination,
            second: Some(DrugDose { drug_id: second.0.to_string(), dose: second.1 }),
        })
    }

    /// `(drug, dose)` components in action order.
    pub fn components(&self) -> Vec<(&str, f64)> {
        let mut out = vec![(self.drug_id.as_str(), self.dose)];
        if let Some(s) = &self.second {
            out.push((s.drug_id.as_str(), s.dose));
        }
        out
    }

    pub fn id(&self) -> String {
        self.to_string()
    }

    pub fn is_placebo(&self) -> bool {
        self.components().iter().all(|(d, _)| *d == "placebo")
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.drug_id, self.dose)?;
        if let Some(s) = &self.second {
            write!(f, "+{}@{}", s.drug_id, s.dose)?;
        }
        Ok(())
    }
}

fn check_dose(dose: f64) -> Result<(), ActionError> {
    if dose.is_finite() && dose >= 0.0 {
        Ok(())
    } else {
        Err(ActionError::InvalidAction(format!("dose must be finite and >= 0, got {dose}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMask {
    pub max_dose: Vec<(String, f64)>,
    pub forbidden_pairs: BTreeSet<(String, String)>,
    pub protocols: BTreeSet<Protocol>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskReason {
    DoseExceeded,
    ForbiddenPair,
    ProtocolDisallowed,
    UnknownDrug,
}

impl fmt::Display for MaskReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskReason::DoseExceeded => "dose-exceeded",
            MaskReason::ForbiddenPair => "forbidden-pair",
            MaskReason::ProtocolDisallowed => "protocol-disallowed",
            MaskReason::UnknownDrug => "unknown-drug",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskVerdict {
    pub feasible: bool,
    pub reason: Option<MaskReason>,
}

impl MaskVerdict {
    const OK: MaskVerdict = MaskVerdict { feasible: true, reason: None };

    fn reject(reason: MaskReason) -> Self {
        MaskVerdict { feasible: false, reason: Some(reason) }
    }
}

pub fn mask_check(action: &Action, mask: &ActionMask) -> MaskVerdict {
    if !mask.protocols.contains(&action.protocol) {
        return MaskVerdict::reject(MaskReason::ProtocolDisallowed);
    }
    for (drug, dose) in action.components() {
        match mask.max_dose.iter().find(|(id, _)| id == drug) {
            None => return MaskVerdict::reject(MaskReason::UnknownDrug),
            Some((_, max)) if dose > *max => return MaskVerdict::reject(MaskReason::DoseExceeded),
            _ => {}
        }
    }
    if let Some(s) = &action.second {
        if mask.forbidden_pairs.contains(&ordered_pair(&action.drug_id, &s.drug_id)) {
            return MaskVerdict::reject(MaskReason::ForbiddenPair);
        }
    }
    MaskVerdict::OK
}

/// `Θ_a = M(a, Θ)`.
pub fn modulate(params: &OdeParams, action: &Action, registry: &DrugRegistry) -> Result<OdeParams, ActionError> {
    let verdict = mask_check(action, &registry.mask());
    if let Some(reason) = verdict.reason {
        return Err(ActionError::Masked { action: action.id(), reason });
    }
    let mut comps: Vec<(usize, f64)> = action
        .components()
        .into_iter()
        .map(|(id, dose)| registry.index_of(id).map(|i| (i, dose)).ok_or_else(|| ActionError::UnknownDrug(id.into())))
        .collect::<Result<_, _>>()?;
    comps.sort_by_key(|&(i, _)| i);
    let mut out = params.clone();
    for (i, dose) in comps {
        for rule in &registry.drugs[i].rules {
            rule.apply(&mut out, dose);
        }
    }
    out.validate()?;
    Ok(out)
}

/// Every mask-feasible single agent and non-forbidden pair over `dose_grid`,
/// ordered by drug id, then partner, then dose.
pub fn enumerate_actions(registry: &DrugRegistry, mask: &ActionMask, dose_grid: &[f64]) -> Vec<Action> {
    let mut ids: Vec<&str> = registry.drugs.iter().map(|d| d.id.as_str()).collect();
    ids.sort_unstable();
    let mut out = Vec::new();
    for &id in &ids {
        for &dose in dose_grid {
            if let Ok(a) = Action::single(id, dose) {
                if mask_check(&a, mask).feasible {
                    out.push(a);
                }
            }
        }
    }
    for (i, &a_id) in ids.iter().enumerate() {
        for &b_id in &ids[i + 1..] {
            for &da in dose_grid {
                for &db in dose_grid {
                    if let Ok(a) = Action::combination((a_id, da), (b_id, db)) {
                        if mask_check(&a, mask).feasible {
                            out.push(a);
                        }
                    }
                }
            }
        }
    }
    out.sort_by(|x, y| {
        let key = |a: &Action| (a.drug_id.clone(), a.second.as_ref().map(|s| s.drug_id.clone()));
        key(x)
            .cmp(&key(y))
            .then(x.dose.total_cmp(&y.dose))
            .then_with(|| {
                let sd = |a: &Action| a.second.as_ref().map_or(0.0, |s| s.dose);
                sd(x).total_cmp(&sd(y))
            })
    });
    out
}

/// Conditioning features: a multi-hot drug indicator followed by per-drug dose,
/// both in registry order.
pub fn action_features(action: &Action, registry: &DrugRegistry) -> Result<Vec<f64>, ActionError> {
    let n = registry.len();
    let mut v = vec![0.0; 2 * n];
    for (id, dose) in action.components() {
        let i = registry.index_of(id).ok_or_else(|| ActionError::UnknownDrug(id.into()))?;
        v[i] = 1.0;
        v[n + i] = dose;
    }
    Ok(v)
}
