//! Hyperparameter presets per (dataset, model), embedded from the
//! workspace `presets/` directory.

use semkge::trainer::TrainConfig;

const PRESETS: &[(&str, &str, &str)] = &[
    ("fb15k", "transe", include_str!("../../../presets/fb15k/transe.kv")),
    ("fb15k", "distmult", include_str!("../../../presets/fb15k/distmult.kv")),
    ("fb15k", "complex", include_str!("../../../presets/fb15k/complex.kv")),
    ("fb15k-237", "transe", include_str!("../../../presets/fb15k-237/transe.kv")),
    ("fb15k-237", "distmult", include_str!("../../../presets/fb15k-237/distmult.kv")),
    ("fb15k-237", "complex", include_str!("../../../presets/fb15k-237/complex.kv")),
    ("toy", "transe", include_str!("../../../presets/toy/transe.kv")),
];

pub fn lookup(dataset: &str, model: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(d, m, _)| *d == dataset && *m == model).map(|(_, _, text)| *text)
}

/// The dataset preset for `model` if one exists, else the model defaults.
pub fn base_config(dataset: Option<&str>, model: &str) -> semkge::Result<TrainConfig> {
    if let Some(text) = dataset.and_then(|d| lookup(d, model)) {
        return TrainConfig::from_kv(text);
    }
    let mut cfg = TrainConfig::default();
    cfg.apply_kv(&format!("model={model}"))?;
    Ok(TrainConfig::for_model(cfg.model))
}
