use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Mlp, ModelError, ToyArchitecture};
use crate::checkpoint::Checkpoint;
use crate::exec::Exec;
use crate::rng::seeded;

/// Half-width of the uniform initialisation interval.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Full-batch loss before each update, then the final loss
    /// (`epochs + 1` entries).
    pub losses: Vec<f64>,
}

fn check_config(data: &LabeledDataset, config: &TrainConfig) -> Result<(), ModelError> {
    if data.is_empty() {
        return Err(ModelError::InvalidDataset("training data is empty".into()));
    }
    if config.epochs == 0 {
        return Err(ModelError::ParameterOutOfRange {
            name: "epochs",
            value: 0.0,
            expected: "at least 1",
        });
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(ModelError::ParameterOutOfRange {
            name: "learning_rate",
            value: config.learning_rate,
            expected: "a finite value > 0",
        });
    }
    Ok(())
}

fn run(
    mut mlp: Mlp,
    data: &LabeledDataset,
    config: &TrainConfig,
    exec: Exec,
) -> Result<(Mlp, Vec<f64>), ModelError> {
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        let (loss, grads) = mlp.loss_and_grad(data, exec)?;
        losses.push(loss);
        mlp.step(&grads, config.learning_rate);
    }
    losses.push(mlp.loss(data)?);
    Ok((mlp, losses))
}

fn record(c: &mut Checkpoint, init: &str, config: &TrainConfig, data: &LabeledDataset) {
    c.metadata.insert("train.init".into(), init.into());
    c.metadata
        .insert("train.epochs".into(), config.epochs.to_string());
    c.metadata.insert(
        "train.learning_rate".into(),
        serde_json::to_string(&config.learning_rate).expect("finite"),
    );
    c.metadata
        .insert("train.examples".into(), data.len().to_string());
}

/// Full-batch gradient descent from a seeded uniform initialisation, keeping
/// the per-epoch loss curve.
pub fn train_with_history(
    arch: &ToyArchitecture,
    data: &LabeledDataset,
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome, ModelError> {
    arch.validate()?;
    check_config(data, config)?;
    let init = Mlp::init_uniform(arch, &mut seeded(config.seed), INIT_SCALE);
    let (mlp, losses) = run(init, data, config, exec)?;
    let mut checkpoint = mlp.to_checkpoint();
    record(
        &mut checkpoint,
        &format!("uniform(seed={})", config.seed),
        config,
        data,
    );
    Ok(TrainOutcome { checkpoint, losses })
}

pub fn train_toy_model(
    arch: &ToyArchitecture,
    data: &LabeledDataset,
    config: &TrainConfig,
    exec: Exec,
) -> Result<Checkpoint, ModelError> {
    Ok(train_with_history(arch, data, config, exec)?.checkpoint)
}

/// Continues training from an existing checkpoint; `config.seed` is unused.
pub fn finetune(
    start: &Checkpoint,
    arch: &ToyArchitecture,
    data: &LabeledDataset,
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome, ModelError> {
    check_config(data, config)?;
    let (mlp, losses) = run(Mlp::from_checkpoint(start, arch)?, data, config, exec)?;
    let mut checkpoint = mlp.to_checkpoint();
    record(&mut checkpoint, "finetune", config, data);
    Ok(TrainOutcome { checkpoint, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{generate, DataSpec};

    fn blobs() -> LabeledDataset {
        generate(&DataSpec::Blobs {
            n: 200,
            dim: 2,
            classes: 2,
            spread: 0.5,
            center_scale: 3.0,
            label_noise: 0.0,
            seed: 8,
            task_seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn loss_decreases_on_separable_blobs() {
        let arch = ToyArchitecture::new(2, vec![4], 2);
        let cfg = TrainConfig {
            epochs: 100,
            learning_rate: 0.5,
            seed: 1,
        };
        let out = train_with_history(&arch, &blobs(), &cfg, Exec::Sequential).unwrap();
        let l = &out.losses;
        assert!(l.last().unwrap() < &l[0]);
        let drops = l.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(
            drops * 10 >= (l.len() - 1) * 9,
            "{drops} of {} epochs decreased",
            l.len() - 1
        );
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let arch = ToyArchitecture::new(2, vec![3], 2);
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 0.1,
            seed: 3,
        };
        let a = train_toy_model(&arch, &blobs(), &cfg, Exec::Sequential).unwrap();
        let b = train_toy_model(&arch, &blobs(), &cfg, Exec::Parallel).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = train_toy_model(
            &arch,
            &blobs(),
            &TrainConfig { seed: 4, ..cfg },
            Exec::Sequential,
        )
        .unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn rejects_bad_config() {
        let arch = ToyArchitecture::new(2, vec![], 2);
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 0.0,
            seed: 0,
        };
        assert!(matches!(
            train_toy_model(&arch, &blobs(), &cfg, Exec::Sequential),
            Err(ModelError::ParameterOutOfRange {
                name: "learning_rate",
                ..
            })
        ));
        let cfg = TrainConfig {
            epochs: 0,
            learning_rate: 0.1,
            seed: 0,
        };
        assert!(train_toy_model(&arch, &blobs(), &cfg, Exec::Sequential).is_err());
    }

    #[test]
    fn finetune_moves_from_start() {
        let arch = ToyArchitecture::new(2, vec![3], 2);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.1,
            seed: 0,
        };
        let base = train_toy_model(&arch, &blobs(), &cfg, Exec::Sequential).unwrap();
        let ft = finetune(&base, &arch, &blobs(), &cfg, Exec::Sequential).unwrap();
        assert_eq!(ft.checkpoint.metadata["train.init"], "finetune");
        assert!(!ft.checkpoint.bitwise_eq(&base));
        assert!(crate::checkpoint::validate_compatibility(&[&base, &ft.checkpoint]).compatible);
    }
}
