//! Alternating triage: route each training instance to whichever of expert and
//! classifier has the lower negative log-likelihood of the true label, retrain the
//! classifier on its share, repeat; then fit a deferral predictor to the final routing.

use ndarray::{Array2, Axis};

use super::{DeferConfig, TeamModel};
use crate::dataset::{Dataset, Example, Provenance};
use crate::embedding::{fit_network, fit_objective};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, log_softmax_rows, Network};
use crate::seed;

/// Negative log-likelihood of the true label under the expert, `-ln p` with `p` the
/// probability that the expert is correct clipped to `[floor, 1 - floor]`.
///
/// Real predictions give `p` = 1 or 0 (so `floor = 0` yields 0 or infinity). Artificial
/// rows use the expertise model's probability that the expert is correct.
pub fn expert_nll(example: &Example, floor: f64) -> Result<f64> {
    let correct = example.expert_correct().ok_or_else(|| {
        Error::Precondition(format!("instance {} has no expert prediction", example.id))
    })?;
    let p = match example.provenance {
        Some(Provenance::Artificial {
            correct: predicted,
            confidence,
        }) => {
            if predicted {
                confidence
            } else {
                1.0 - confidence
            }
        }
        _ if correct => 1.0,
        _ => 0.0,
    };
    Ok(-p.clamp(floor, 1.0 - floor).ln())
}

fn classifier_nll(network: &Network, x: &Array2<f64>, y: &[usize]) -> Vec<f64> {
    let logp = log_softmax_rows(&network.logits(x));
    y.iter().enumerate().map(|(i, &t)| -logp[[i, t]]).collect()
}

pub fn train_nll_triage(completed: &Dataset, config: &DeferConfig, seed: u64) -> Result<TeamModel> {
    if config.triage_rounds < 1 {
        return Err(Error::Precondition("triage needs at least one round".into()));
    }
    let expert: Vec<f64> = completed.examples().iter().map(|e| expert_nll(e, config.triage_expert_floor))
        .collect::<Result<_>>()?;
    let all: Vec<usize> = (0..completed.len()).collect();
    let x = completed.inputs(&all);
    let y: Vec<usize> = completed.labels(&all).iter().map(|c| c.index()).collect();
    let mut classifier = Network::new(
        &config.backbone,
        completed.shape(),
        completed.k(),
        seed::derive(seed, "triage-classifier"),
    );
    let mut rng = seed::rng_for(seed, "triage-batches");
    let mut steps = 0;
    if config.triage_warmup_epochs > 0 {
        fit_network(
            &mut classifier,
            &x,
            &y,
            &config.optimizer,
            config.triage_warmup_epochs,
            config.batch_size,
            config.cosine_schedule,
            &mut rng,
            &mut steps,
        )?;
    }
    let assign = |net: &Network| -> Vec<bool> {
        classifier_nll(net, &x, &y)
            .iter()
            .zip(&expert)
            .map(|(c, e)| e < c)
            .collect()
    };
    let mut round_losses = Vec::with_capacity(config.triage_rounds);
    for round in 0..config.triage_rounds {
        let deferred = assign(&classifier);
        let own: Vec<usize> = all.iter().copied().filter(|&i| !deferred[i]).collect();
        if own.is_empty() {
            log::info!("triage round {round}: every instance routed to the expert");
            round_losses.push(0.0);
            continue;
        }
        let xo = x.select(Axis(0), &own);
        let yo: Vec<usize> = own.iter().map(|&i| y[i]).collect();
        fit_objective(
            &mut classifier,
            own.len(),
            &config.schedule(config.epochs),
            &mut rng,
            &mut steps,
            |net, rows| {
                let xb = xo.select(Axis(0), rows);
                let tb: Vec<usize> = rows.iter().map(|&i| yo[i]).collect();
                let (logits, cache) = net.forward(&xb);
                let (loss, grad) = cross_entropy(&logits, &tb, None);
                (loss, net.backward(&cache, &grad))
            },
        )?;
        let nll = classifier_nll(&classifier, &xo, &yo);
        round_losses.push(nll.iter().sum::<f64>() / nll.len() as f64);
    }
    let targets: Vec<usize> = assign(&classifier).into_iter().map(usize::from).collect();
    let mut deferral = Network::new(
        &config.backbone,
        completed.shape(),
        2,
        seed::derive(seed, "triage-deferral"),
    );
    fit_network(
        &mut deferral,
        &x,
        &targets,
        &config.optimizer,
        config.epochs,
        config.batch_size,
        config.cosine_schedule,
        &mut rng,
        &mut steps,
    )?;
    Ok(TeamModel::Triage {
        classifier,
        deferral,
        round_losses,
    })
}
