//! Parameter checkpoints: a container of named f64 arrays holding every MLP
//! tensor, the model-config block, and the normalization statistics needed
//! for consistent de-normalization at evaluation time.

use crate::container::Container;
use crate::data::{stats_from_container, stats_to_container, NormStats};
use crate::error::{LamError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;
use std::path::Path;

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    params: &ModelParams<S>,
    stats: &NormStats,
    extra_meta: &[(String, String)],
) -> Result<()> {
    let mut c = Container::new("checkpoint");
    let cfg = &params.config;
    c.set_meta("variant", cfg.variant);
    c.set_meta("latent_width", cfg.latent_width);
    c.set_meta("k_layers", cfg.k_layers);
    c.set_meta("n_levels", cfg.n_levels);
    c.set_meta("n_vars", cfg.n_vars);
    c.set_meta("n_forcing", cfg.n_forcing);
    for (k, v) in extra_meta {
        c.set_meta(k, v);
    }
    let f64_params: ModelParams<f64> = params.convert();
    let mut err = None;
    f64_params.for_each_param(&mut |name, t| {
        if let Err(e) = c.add_f64(
            &format!("param/{name}"),
            t.shape().to_vec(),
            t.values().to_vec(),
        ) {
            err.get_or_insert(e);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let stats_c = stats_to_container(stats)?;
    for entry in stats_c.entries() {
        match &entry.data {
            crate::container::ArrayData::F64(v) => {
                c.add_f64(&format!("stats/{}", entry.name), entry.shape.clone(), v.clone())?
            }
            crate::container::ArrayData::U64(v) => {
                c.add_u64(&format!("stats/{}", entry.name), entry.shape.clone(), v.clone())?
            }
        }
    }
    c.write_to(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f64>, NormStats, BTreeMap<String, String>)> {
    let c = Container::read_from(path)?;
    if c.kind != "checkpoint" {
        return Err(LamError::Corrupt(format!(
            "expected a checkpoint file, found kind '{}'",
            c.kind
        )));
    }
    let config = ModelConfig {
        variant: c.meta_str("variant")?.parse()?,
        latent_width: c.meta_parse("latent_width")?,
        k_layers: c.meta_parse("k_layers")?,
        n_levels: c.meta_parse("n_levels")?,
        n_vars: c.meta_parse("n_vars")?,
        n_forcing: c.meta_parse("n_forcing")?,
    };
    // rebuild the parameter tree, then overwrite every tensor from the file
    let mut params: ModelParams<f64> = ModelParams::init(&config, 0)?;
    let mut err: Option<LamError> = None;
    params.for_each_param_mut(&mut |name, t| {
        let full = format!("param/{name}");
        match c.get_f64(&full) {
            Ok((shape, vals)) => {
                if shape != t.shape() {
                    err.get_or_insert(LamError::Corrupt(format!(
                        "checkpoint entry '{full}' has shape {shape:?}, expected {:?}",
                        t.shape()
                    )));
                } else {
                    match Tensor::from_vec(shape.to_vec(), vals.to_vec()) {
                        Ok(new) => *t = new,
                        Err(e) => {
                            err.get_or_insert(e);
                        }
                    }
                }
            }
            Err(e) => {
                err.get_or_insert(e);
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    // stats entries live under the stats/ prefix
    let mut stats_c = Container::new("normstats");
    stats_c.set_meta("n_vars", config.n_vars);
    for name in ["mean", "std", "diff_var", "lambda", "omega"] {
        let (shape, vals) = c.get_f64(&format!("stats/{name}"))?;
        stats_c.add_f64(name, shape.to_vec(), vals.to_vec())?;
    }
    let stats = stats_from_container(&stats_c)?;
    Ok((params, stats, c.meta.clone()))
}
