//! Training configuration file and its merge with command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use dbdenoise::data::Augment;
use dbdenoise::training::{OptimizerKind, Stage, TrainConfig};
use dbdenoise::{ModelConfig, Variant};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Option<String>,
    pub pairs: Option<usize>,
    pub base_channels: Option<usize>,
    pub growth_rate: Option<usize>,
    pub block_layers: Option<usize>,
    pub init_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub sigma: Option<f64>,
    pub noise_seed: Option<u64>,
    pub shuffle_seed: Option<u64>,
    pub patch_size: Option<usize>,
    pub stride: Option<usize>,
    pub augment: Option<bool>,
    pub max_patches: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub optimizer: Option<String>,
    pub momentum: Option<f64>,
    pub seed: Option<u64>,
    pub retrain_all: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// Fully resolved settings of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub train_dir: PathBuf,
    pub val_dir: Option<PathBuf>,
    pub sigma: f64,
    pub noise_seed: u64,
    pub shuffle_seed: u64,
    pub patch_size: usize,
    pub stride: usize,
    pub augment: Augment,
    pub max_patches: Option<usize>,
    pub train: TrainConfig,
}

pub fn parse_optimizer(name: &str, momentum: f64) -> Result<OptimizerKind, String> {
    match name {
        "adam" => Ok(OptimizerKind::adam()),
        "sgd" => Ok(OptimizerKind::Sgd { momentum }),
        other => Err(format!("unknown optimizer {other:?} (expected adam or sgd)")),
    }
}

pub fn parse_variant(name: &str) -> Result<Variant, String> {
    name.parse().map_err(|e: dbdenoise::Error| e.to_string())
}

impl TrainRun {
    /// Defaults for `stage`, overridden by the file and then by flags.
    pub fn resolve(stage: Stage, file: &FileConfig, flags: &crate::TrainArgs) -> Result<Self, String> {
        let m = &file.model;
        let d = &file.data;
        let t = &file.train;
        let variant = parse_variant(flags.variant.as_deref().or(m.variant.as_deref()).unwrap_or("v1"))?;
        let mut model = ModelConfig::for_variant(variant);
        if flags.tiny {
            model = ModelConfig::tiny(variant);
        }
        model.pairs = flags.pairs.or(m.pairs).unwrap_or(model.pairs);
        model.base_channels = m.base_channels.unwrap_or(model.base_channels);
        model.growth_rate = m.growth_rate.unwrap_or(model.growth_rate);
        model.block_layers = m.block_layers.unwrap_or(model.block_layers);
        let defaults = match stage {
            Stage::Stage1 => TrainConfig::stage1(),
            Stage::Stage2 => TrainConfig::stage2(),
        };
        let optimizer_name = flags.optimizer.as_deref().or(t.optimizer.as_deref()).unwrap_or("adam");
        let momentum = flags.momentum.or(t.momentum).unwrap_or(0.9);
        let train = TrainConfig {
            stage,
            learning_rate: flags.lr.or(t.learning_rate).unwrap_or(defaults.learning_rate),
            batch_size: flags.batch_size.or(t.batch_size).unwrap_or(defaults.batch_size),
            epochs: flags.epochs.or(t.epochs).unwrap_or(defaults.epochs),
            optimizer: parse_optimizer(optimizer_name, momentum)?,
            seed: flags.seed.or(t.seed).unwrap_or(defaults.seed),
            retrain_all: flags.retrain_all || t.retrain_all.unwrap_or(false),
        };
        let train_dir = flags
            .data
            .clone()
            .or_else(|| d.train_dir.clone())
            .ok_or("no training directory: pass --data or set data.train_dir")?;
        Ok(Self {
            model,
            init_seed: flags.init_seed.or(m.init_seed).unwrap_or(0),
            train_dir,
            val_dir: flags.val.clone().or_else(|| d.val_dir.clone()),
            sigma: flags.sigma.or(d.sigma).unwrap_or(25.0),
            noise_seed: flags.noise_seed.or(d.noise_seed).unwrap_or(1),
            shuffle_seed: flags.shuffle_seed.or(d.shuffle_seed).unwrap_or(2),
            patch_size: flags.patch_size.or(d.patch_size).unwrap_or(40),
            stride: flags.stride.or(d.stride).unwrap_or(10),
            augment: if flags.augment || d.augment.unwrap_or(false) {
                Augment::Dihedral
            } else {
                Augment::None
            },
            max_patches: flags.max_patches.or(d.max_patches),
            train,
        })
    }

    /// The effective configuration in config-file syntax.
    pub fn echo(&self) -> String {
        let mut s = String::from("# effective configuration\n[model]\n");
        let m = &self.model;
        let _ = writeln!(s, "variant = \"{}\"", m.variant);
        let _ = writeln!(s, "pairs = {}", m.pairs);
        let _ = writeln!(s, "base_channels = {}", m.base_channels);
        let _ = writeln!(s, "growth_rate = {}", m.growth_rate);
        let _ = writeln!(s, "block_layers = {}", m.block_layers);
        let _ = writeln!(s, "init_seed = {}", self.init_seed);
        s.push_str("[data]\n");
        let _ = writeln!(s, "train_dir = {:?}", self.train_dir.display().to_string());
        if let Some(v) = &self.val_dir {
            let _ = writeln!(s, "val_dir = {:?}", v.display().to_string());
        }
        let _ = writeln!(s, "sigma = {:?}", self.sigma);
        let _ = writeln!(s, "noise_seed = {}", self.noise_seed);
        let _ = writeln!(s, "shuffle_seed = {}", self.shuffle_seed);
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "stride = {}", self.stride);
        let _ = writeln!(s, "augment = {}", self.augment == Augment::Dihedral);
        if let Some(n) = self.max_patches {
            let _ = writeln!(s, "max_patches = {n}");
        }
        s.push_str("[train]\n");
        let t = &self.train;
        let _ = writeln!(s, "# stage = {}", t.stage);
        let _ = writeln!(s, "learning_rate = {:?}", t.learning_rate);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        match t.optimizer {
            OptimizerKind::Adam { .. } => s.push_str("optimizer = \"adam\"\n"),
            OptimizerKind::Sgd { momentum } => {
                let _ = writeln!(s, "optimizer = \"sgd\"\nmomentum = {momentum:?}");
            }
        }
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "retrain_all = {}", t.retrain_all);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Wrapper {
        #[command(flatten)]
        args: crate::TrainArgs,
    }

    fn flags(extra: &[&str]) -> crate::TrainArgs {
        let mut argv = vec!["t", "--out", "m.ckpt"];
        argv.extend_from_slice(extra);
        Wrapper::parse_from(argv).args
    }

    fn file(text: &str) -> FileConfig {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let f =
            file("[data]\ntrain_dir = \"d\"\nsigma = 15.0\nstride = 20\n[train]\nepochs = 7\nlearning_rate = 0.01\n");
        let run = TrainRun::resolve(Stage::Stage1, &f, &flags(&["--epochs", "2"])).unwrap();
        assert_eq!(run.train.epochs, 2);
        assert_eq!(run.train.learning_rate, 0.01);
        assert_eq!(run.sigma, 15.0);
        assert_eq!(run.stride, 20);
        assert_eq!(run.patch_size, 40);
        assert_eq!(run.train.batch_size, TrainConfig::stage1().batch_size);
        let s2 = TrainRun::resolve(Stage::Stage2, &FileConfig::default(), &flags(&["--data", "d"])).unwrap();
        assert_eq!(s2.train.learning_rate, TrainConfig::stage2().learning_rate);
    }

    #[test]
    fn echo_reparses_to_the_same_run() {
        let f = file("[model]\nvariant = \"v2\"\npairs = 3\n[data]\ntrain_dir = \"x y\"\nmax_patches = 9\n");
        let run = TrainRun::resolve(Stage::Stage1, &f, &flags(&["--optimizer", "sgd", "--augment"])).unwrap();
        let again = TrainRun::resolve(Stage::Stage1, &file(&run.echo()), &flags(&[])).unwrap();
        assert_eq!(again.echo(), run.echo());
        assert_eq!(again.model, run.model);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\nepoch = 1\n").is_err());
        assert!(toml::from_str::<FileConfig>("[extra]\n").is_err());
        assert!(TrainRun::resolve(Stage::Stage1, &FileConfig::default(), &flags(&[])).is_err());
        assert!(TrainRun::resolve(
            Stage::Stage1,
            &file("[model]\nvariant = \"v9\"\n"),
            &flags(&["--data", "d"])
        )
        .is_err());
        assert!(parse_optimizer("rmsprop", 0.9).is_err());
    }
}
