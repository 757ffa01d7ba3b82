//! Flat `key = value` experiment configuration with `#` comments.
//!
//! Every key is optional; unset keys take the desk-scale defaults. Unknown
//! keys are rejected so typos surface immediately.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{generate_synthetic, load_idx, Dataset};
use crate::defenses::DefenseKind;
use crate::fed::{AttackKind, FLConfig};
use crate::{Error, Result};

/// Where the task data comes from.
#[derive(Debug, Clone)]
pub enum DatasetSource {
    Synth {
        n_classes: usize,
        image_h: usize,
        image_w: usize,
        per_class: usize,
        test_per_class: usize,
        noise_sigma: f64,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

/// A fully resolved run: FL configuration, data source, and whether to run
/// the no-attack companion baseline.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub fl: FLConfig,
    pub dataset: DatasetSource,
    pub baseline: bool,
}

impl RunSpec {
    pub fn desk_default() -> Self {
        let fl = FLConfig::desk_default();
        RunSpec {
            dataset: DatasetSource::Synth {
                n_classes: 10,
                image_h: 16,
                image_w: 16,
                per_class: 100,
                test_per_class: 20,
                noise_sigma: 0.15,
                seed: fl.seeds.data,
            },
            fl,
            baseline: false,
        }
    }

    /// Canonical text of the resolved configuration, the digest input.
    pub fn canonical_text(&self) -> String {
        let fl = &self.fl;
        let mut lines = vec![
            format!("attack = {}", fl.attack.name()),
            format!("arch = {}", fl.arch),
            format!("batch_size = {}", fl.batch_size),
            format!("baseline = {}", self.baseline),
            format!("defense = {}", fl.defense.name()),
            format!("local_epochs = {}", fl.local_epochs),
            format!("local_lr = {}", fl.local_lr),
            format!("mcr = {}", fl.mcr),
            format!("n_clients = {}", fl.n_clients),
            format!("noniid_bias = {}", fl.noniid_bias),
            format!("poison_rate = {}", fl.poison_rate),
            format!("rounds = {}", fl.rounds),
            format!("scaling_factor = {}", fl.scaling_factor),
            format!("seed_data = {}", fl.seeds.data),
            format!("seed_model = {}", fl.seeds.model),
            format!("seed_round = {}", fl.seeds.round),
            format!("target_label = {}", fl.target_label),
            format!("tri_size = {}", fl.tri_size),
            format!("trigger_gamma0 = {}", fl.trigger_gamma0),
            format!("trigger_iters = {}", fl.trigger_iters),
        ];
        match &self.dataset {
            DatasetSource::Synth {
                n_classes,
                image_h,
                image_w,
                per_class,
                test_per_class,
                noise_sigma,
                seed,
            } => {
                lines.push("dataset = synth".into());
                lines.push(format!("n_classes = {n_classes}"));
                lines.push(format!("image_h = {image_h}"));
                lines.push(format!("image_w = {image_w}"));
                lines.push(format!("per_class = {per_class}"));
                lines.push(format!("test_per_class = {test_per_class}"));
                lines.push(format!("noise_sigma = {noise_sigma}"));
                lines.push(format!("data_seed = {seed}"));
            }
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                lines.push("dataset = idx".into());
                lines.push(format!("idx_train_images = {}", train_images.display()));
                lines.push(format!("idx_train_labels = {}", train_labels.display()));
                lines.push(format!("idx_test_images = {}", test_images.display()));
                lines.push(format!("idx_test_labels = {}", test_labels.display()));
            }
        }
        lines.join("\n")
    }

    /// Materializes (train, test) datasets.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSource::Synth {
                n_classes,
                image_h,
                image_w,
                per_class,
                test_per_class,
                noise_sigma,
                seed,
            } => {
                let all = generate_synthetic(
                    *n_classes,
                    per_class + test_per_class,
                    (*image_h, *image_w),
                    *noise_sigma,
                    *seed,
                )?;
                all.split_per_class(*test_per_class)
            }
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                if train.n_classes != test.n_classes || train.image_shape != test.image_shape {
                    return Err(Error::Consistency(
                        "train/test class count or image shape disagree".into(),
                    ));
                }
                Ok((train, test))
            }
        }
    }
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if pairs.insert(key.clone(), value).is_some() {
            return Err(Error::config(format!("duplicate key '{key}'")));
        }
    }
    Ok(pairs)
}

struct Pairs(BTreeMap<String, String>);

impl Pairs {
    fn take<T: std::str::FromStr>(&mut self, key: &str, into: &mut T) -> Result<()> {
        if let Some(v) = self.0.remove(key) {
            *into = v
                .parse()
                .map_err(|_| Error::config(format!("bad value '{v}' for key '{key}'")))?;
        }
        Ok(())
    }

    fn take_opt<T: std::str::FromStr>(&mut self, key: &str, into: &mut Option<T>) -> Result<()> {
        if let Some(v) = self.0.remove(key) {
            let parsed = v
                .parse()
                .map_err(|_| Error::config(format!("bad value '{v}' for key '{key}'")))?;
            *into = Some(parsed);
        }
        Ok(())
    }
}

/// Parses configuration text into a resolved [`RunSpec`].
pub fn parse_run_spec(text: &str) -> Result<RunSpec> {
    let mut pairs = Pairs(parse_pairs(text)?);
    let mut spec = RunSpec::desk_default();
    let fl = &mut spec.fl;

    pairs.take("n_clients", &mut fl.n_clients)?;
    pairs.take("mcr", &mut fl.mcr)?;
    pairs.take("rounds", &mut fl.rounds)?;
    pairs.take("local_epochs", &mut fl.local_epochs)?;
    pairs.take("batch_size", &mut fl.batch_size)?;
    pairs.take("local_lr", &mut fl.local_lr)?;
    pairs.take("poison_rate", &mut fl.poison_rate)?;
    pairs.take("tri_size", &mut fl.tri_size)?;
    pairs.take("target_label", &mut fl.target_label)?;
    pairs.take("scaling_factor", &mut fl.scaling_factor)?;
    pairs.take("seed_data", &mut fl.seeds.data)?;
    pairs.take("seed_model", &mut fl.seeds.model)?;
    pairs.take("seed_round", &mut fl.seeds.round)?;
    pairs.take("arch", &mut fl.arch)?;
    pairs.take("noniid_bias", &mut fl.noniid_bias)?;
    pairs.take("trigger_iters", &mut fl.trigger_iters)?;
    pairs.take("trigger_gamma0", &mut fl.trigger_gamma0)?;
    pairs.take("baseline", &mut spec.baseline)?;
    if let Some(v) = pairs.0.remove("defense") {
        fl.defense = DefenseKind::parse(&v)?;
    }
    if let Some(v) = pairs.0.remove("attack") {
        fl.attack = AttackKind::parse(&v)?;
    }

    let p = &mut fl.defense_params;
    pairs.take("trimmed_mean.trim_ratio", &mut p.trim_ratio)?;
    pairs.take_opt("multi_krum.f", &mut p.krum_f)?;
    pairs.take_opt("multi_krum.m", &mut p.krum_m)?;
    pairs.take_opt("robustlr.vote_threshold", &mut p.vote_threshold)?;
    pairs.take("robustlr.server_lr", &mut p.server_lr)?;
    pairs.take("rfa.max_iter", &mut p.rfa_max_iter)?;
    pairs.take("rfa.eps", &mut p.rfa_eps)?;
    pairs.take("rfa.nu", &mut p.rfa_nu)?;
    pairs.take_opt("flair.n_malicious", &mut p.flair_n_malicious)?;
    pairs.take("flcert.n_groups", &mut p.flcert_groups)?;
    pairs.take_opt("flcert.seed", &mut p.flcert_seed)?;
    pairs.take("flame.sigma", &mut p.flame_sigma)?;

    let kind = pairs.0.remove("dataset").unwrap_or_else(|| "synth".into());
    match kind.as_str() {
        "synth" => {
            let DatasetSource::Synth {
                mut n_classes,
                mut image_h,
                mut image_w,
                mut per_class,
                mut test_per_class,
                mut noise_sigma,
                ..
            } = RunSpec::desk_default().dataset
            else {
                unreachable!()
            };
            pairs.take("n_classes", &mut n_classes)?;
            pairs.take("image_h", &mut image_h)?;
            pairs.take("image_w", &mut image_w)?;
            pairs.take("per_class", &mut per_class)?;
            pairs.take("test_per_class", &mut test_per_class)?;
            pairs.take("noise_sigma", &mut noise_sigma)?;
            spec.dataset = DatasetSource::Synth {
                n_classes,
                image_h,
                image_w,
                per_class,
                test_per_class,
                noise_sigma,
                seed: spec.fl.seeds.data,
            };
        }
        "idx" => {
            let need = |pairs: &mut Pairs, key: &str| -> Result<PathBuf> {
                pairs
                    .0
                    .remove(key)
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::config(format!("dataset = idx requires '{key}'")))
            };
            spec.dataset = DatasetSource::Idx {
                train_images: need(&mut pairs, "idx_train_images")?,
                train_labels: need(&mut pairs, "idx_train_labels")?,
                test_images: need(&mut pairs, "idx_test_images")?,
                test_labels: need(&mut pairs, "idx_test_labels")?,
            };
        }
        other => {
            return Err(Error::config(format!(
                "unknown dataset '{other}'; valid: synth, idx"
            )))
        }
    }

    if let Some((key, _)) = pairs.0.iter().next() {
        return Err(Error::config(format!("unknown config key '{key}'")));
    }
    Ok(spec)
}

/// Reads and parses a config file, then applies the `DPOT_SEED` environment
/// override to every seed stream.
pub fn load_run_spec(path: &Path) -> Result<RunSpec> {
    let text = std::fs::read_to_string(path)?;
    let mut spec = parse_run_spec(&text)?;
    if let Ok(raw) = std::env::var("DPOT_SEED") {
        let seed: u64 = raw
            .parse()
            .map_err(|_| Error::config(format!("DPOT_SEED '{raw}' is not a u64")))?;
        spec.fl.seeds.data = seed;
        spec.fl.seeds.model = seed;
        spec.fl.seeds.round = seed;
        if let DatasetSource::Synth { seed: s, .. } = &mut spec.dataset {
            *s = seed;
        }
    }
    Ok(spec)
}
