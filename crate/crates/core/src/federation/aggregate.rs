use crate::diffcore::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{BoundModel, ModelParams};

fn mean_set(sets: &[&ParamSet], part: &str) -> Result<ParamSet> {
    let first = sets[0];
    let n = sets.len() as f64;
    first
        .iter()
        .map(|(name, t0)| {
            let mut acc = vec![0.0; t0.numel()];
            for (i, set) in sets.iter().enumerate() {
                let t = set.get(name).map_err(|_| {
                    Error::Data(format!("client {i} lacks {part} tensor `{name}`"))
                })?;
                if t.shape() != t0.shape() {
                    return Err(Error::Data(format!(
                        "{part} tensor `{name}`: client {i} has shape {:?}, client 0 has {:?}",
                        t.shape(),
                        t0.shape()
                    )));
                }
                acc.iter_mut().zip(t.data()).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= n);
            Ok((name.clone(), Tensor::new(t0.shape().to_vec(), acc)?))
        })
        .collect()
}

/// Unweighted elementwise mean, summed in the given (client id) order.
pub fn server_aggregate(clients: &[&ModelParams]) -> Result<ModelParams> {
    let first = clients
        .first()
        .ok_or_else(|| Error::InvalidArgument("aggregation over zero clients".into()))?;
    for (i, c) in clients.iter().enumerate() {
        if c.encoder.len() != first.encoder.len() || c.classifier.len() != first.classifier.len() {
            return Err(Error::Data(format!(
                "client {i} has a different parameter count than client 0"
            )));
        }
    }
    let enc: Vec<&ParamSet> = clients.iter().map(|c| &c.encoder).collect();
    let cls: Vec<&ParamSet> = clients.iter().map(|c| &c.classifier).collect();
    Ok(ModelParams {
        encoder: mean_set(&enc, "encoder")?,
        classifier: mean_set(&cls, "classifier")?,
    })
}

pub fn naive_init(global: &ModelParams) -> ModelParams {
    global.clone()
}

fn check_mu(mu: f64) -> Result<()> {
    if mu < 0.0 || mu.is_nan() {
        return Err(Error::InvalidArgument(format!("fedprox mu must be >= 0, got {mu}")));
    }
    Ok(())
}

/// `(mu / 2) * ||local - global||^2` over every tensor.
pub fn fedprox_term(local: &ModelParams, global: &ModelParams, mu: f64) -> Result<f64> {
    check_mu(mu)?;
    local.check_same_layout(global)?;
    let sq = |a: &ParamSet, b: &ParamSet| -> f64 {
        a.iter()
            .zip(b.iter())
            .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(u, v)| (u - v) * (u - v)))
            .sum()
    };
    Ok(0.5 * mu * (sq(&local.encoder, &global.encoder) + sq(&local.classifier, &global.classifier)))
}

/// The proximal term on a tape, differentiable in the bound local model.
pub fn fedprox_penalty(tape: &Tape, local: &BoundModel, global: &ModelParams, mu: f64) -> Result<Var> {
    check_mu(mu)?;
    let mut total: Option<Var> = None;
    for (bound, set) in [(&local.encoder, &global.encoder), (&local.classifier, &global.classifier)] {
        for (name, g) in set.iter() {
            let diff = tape.sub(bound.get(name)?, tape.constant(g.clone()))?;
            let s = tape.sum_all(tape.square(diff)?);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
    }
    let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    Ok(tape.scale(total, 0.5 * mu))
}
