//! Local update oracles: the honest Local Majority Vote pipeline and the
//! Byzantine message generators.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{sample_minibatch, Dataset, Partition};
use crate::error::{arg, Error, Result};
use crate::learn::{gradient, sign_quantize, GradientVector, ModelParams, SignVector};
use crate::rng::StreamKey;

/// Byzantine behaviour. Serialized names are `label_flip`, `mimic`,
/// `directional`, `omniscient` and `oracle_sign_flip`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    /// Run the honest pipeline on labels remapped `y -> (C-1) - y`.
    LabelFlip,
    /// Copy one honest worker's message; `None` picks the lowest honest id.
    Mimic {
        #[serde(default)]
        target: Option<usize>,
    },
    /// Send the all-ones vector.
    Directional,
    /// Send `-sign(Σ honest messages)`.
    Omniscient,
    /// Send `-sign(true gradient)`.
    OracleSignFlip,
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::LabelFlip => "label_flip",
            AttackSpec::Mimic { .. } => "mimic",
            AttackSpec::Directional => "directional",
            AttackSpec::Omniscient => "omniscient",
            AttackSpec::OracleSignFlip => "oracle_sign_flip",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "label_flip" => AttackSpec::LabelFlip,
            "mimic" => AttackSpec::Mimic { target: None },
            "directional" => AttackSpec::Directional,
            "omniscient" => AttackSpec::Omniscient,
            "oracle_sign_flip" => AttackSpec::OracleSignFlip,
            other => return arg(format!("unknown attack '{other}'")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerRole {
    Honest,
    Byzantine(AttackSpec),
}

impl WorkerRole {
    pub fn is_honest(&self) -> bool {
        matches!(self, WorkerRole::Honest)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub worker: usize,
    pub round: usize,
    pub message: SignVector,
    /// Mini-batch gradients evaluated to produce the message.
    pub gradient_evals: usize,
}

/// Number of Byzantine workers for corruption level `c`: `⌊cK⌋`.
pub fn byzantine_count(k: usize, c: f64) -> usize {
    // the epsilon keeps products like 0.3·10 from landing just below an integer
    ((c * k as f64) + 1e-9).floor() as usize
}

/// Roles fixed for the whole run: the first `⌊cK⌋` ids of a seeded shuffle of
/// `[0, K)` are Byzantine. Without an attack every worker is honest.
pub fn assign_roles(k: usize, c: f64, attack: Option<AttackSpec>, key: StreamKey) -> Vec<WorkerRole> {
    let mut roles = vec![WorkerRole::Honest; k];
    let Some(attack) = attack else {
        return roles;
    };
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut key.rng());
    for &id in order.iter().take(byzantine_count(k, c)) {
        roles[id] = WorkerRole::Byzantine(attack);
    }
    roles
}

/// Check a configured mimic target, or pick the lowest-indexed honest worker.
pub fn resolve_mimic_target(roles: &[WorkerRole], requested: Option<usize>) -> Result<usize> {
    match requested {
        Some(t) if t >= roles.len() => Err(Error::Config(format!("mimic target {t} out of range"))),
        Some(t) if !roles[t].is_honest() => {
            Err(Error::Config(format!("mimic target {t} is a Byzantine worker")))
        }
        Some(t) => Ok(t),
        None => roles
            .iter()
            .position(WorkerRole::is_honest)
            .ok_or_else(|| Error::Config("mimic attack needs at least one honest worker".into())),
    }
}

/// Coordinate-wise majority of `ballots` with ties going to `+1`.
pub fn local_vote(ballots: &[SignVector]) -> Result<SignVector> {
    let Some(first) = ballots.first() else {
        return arg("vote needs at least one ballot");
    };
    let mut tally = vec![0i64; first.len()];
    for b in ballots {
        if b.len() != tally.len() {
            return arg("ballots differ in dimension");
        }
        for (t, &s) in tally.iter_mut().zip(b.as_slice()) {
            *t += s as i64;
        }
    }
    Ok(SignVector::from_tallies(&tally))
}

/// Honest Local Majority Vote: one mini-batch of size `batch` per allocated
/// subset in `assigned`, each gradient quantized to signs, then a local vote.
///
/// Batch for subset `i` is drawn from `key.derive("minibatch", [worker, round, i])`.
#[allow(clippy::too_many_arguments)]
pub fn honest_update(
    params: &ModelParams,
    dataset: &Dataset,
    partition: &Partition,
    assigned: &[usize],
    batch: usize,
    worker: usize,
    round: usize,
    key: StreamKey,
) -> Result<LocalUpdate> {
    if assigned.is_empty() {
        return arg(format!("worker {worker} has no allocated subsets"));
    }
    let mut tally = vec![0i64; params.dim()];
    for &i in assigned {
        let mut rng = key.derive("minibatch", &[worker as u64, round as u64, i as u64]).rng();
        let mb = sample_minibatch(partition, i, batch, &mut rng)?;
        let g = gradient(params, dataset, &mb.indices)?;
        for (t, &s) in tally.iter_mut().zip(sign_quantize(&g).as_slice()) {
            *t += s as i64;
        }
    }
    Ok(LocalUpdate {
        worker,
        round,
        message: SignVector::from_tallies(&tally),
        gradient_evals: assigned.len(),
    })
}

/// Labels remapped `y -> (C-1) - y`; features shared with the original.
pub fn label_flip_view(dataset: &Dataset) -> Dataset {
    let top = dataset.classes() as u32 - 1;
    dataset.relabeled(|y| top - y, format!("{}-flipped", dataset.name))
}

pub fn directional_update(d: usize, worker: usize, round: usize) -> LocalUpdate {
    LocalUpdate {
        worker,
        round,
        message: SignVector::filled(d, 1),
        gradient_evals: 0,
    }
}

pub fn mimic_update(target: &LocalUpdate, worker: usize) -> LocalUpdate {
    LocalUpdate {
        worker,
        round: target.round,
        message: target.message.clone(),
        gradient_evals: 0,
    }
}

/// `-sign(Σ honest)`, with `sign(0) = +1` applied before negation.
pub fn omniscient_update(honest: &[&SignVector], worker: usize, round: usize) -> Result<LocalUpdate> {
    if honest.is_empty() {
        return arg("omniscient attack needs at least one honest message");
    }
    let d = honest[0].len();
    let mut tally = vec![0i64; d];
    for m in honest {
        if m.len() != d {
            return arg("honest messages differ in dimension");
        }
        for (t, &s) in tally.iter_mut().zip(m.as_slice()) {
            *t += s as i64;
        }
    }
    Ok(LocalUpdate {
        worker,
        round,
        message: SignVector::from_tallies(&tally).negated(),
        gradient_evals: 0,
    })
}

pub fn oracle_sign_flip_update(true_gradient: &GradientVector, worker: usize, round: usize) -> LocalUpdate {
    LocalUpdate {
        worker,
        round,
        message: sign_quantize(true_gradient).negated(),
        gradient_evals: 0,
    }
}
