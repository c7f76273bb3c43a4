//! Flat key-value experiment configuration with typed validation.
//!
//! Values outside the hyperparameter grids are rejected unless the config
//! sets `custom = true`; structural invariants (non-negative weights,
//! positive temperature, at least one enabled loss) hold regardless.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoder::{ModelKind, Sampler};
use crate::error::{CgrlError, Result};
use crate::graph::{read_text, Fnv};
use crate::shift::{SbmSpec, ShiftSpec};

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LossSet {
    pub sup: bool,
    pub rec: bool,
    pub intra: bool,
    pub inter: bool,
}

impl LossSet {
    pub fn all() -> Self {
        LossSet {
            sup: true,
            rec: true,
            intra: true,
            inter: true,
        }
    }

    pub fn sup_only() -> Self {
        LossSet {
            sup: true,
            rec: false,
            intra: false,
            inter: false,
        }
    }

    pub fn any(&self) -> bool {
        self.sup || self.rec || self.intra || self.inter
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut set = LossSet {
            sup: false,
            rec: false,
            intra: false,
            inter: false,
        };
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "sup" => set.sup = true,
                "rec" => set.rec = true,
                "intra" => set.intra = true,
                "inter" => set.inter = true,
                other => {
                    return Err(CgrlError::Config(format!(
                        "unknown loss {other:?} (expected sup, rec, intra, inter)"
                    )))
                }
            }
        }
        Ok(set)
    }

    pub fn render(&self) -> String {
        let mut parts = Vec::new();
        if self.sup {
            parts.push("sup");
        }
        if self.rec {
            parts.push("rec");
        }
        if self.intra {
            parts.push("intra");
        }
        if self.inter {
            parts.push("inter");
        }
        parts.join(",")
    }
}

/// One experiment: model variant, losses, hyperparameters, run plan.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub losses: LossSet,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub margin: f64,
    pub k: usize,
    pub layers: usize,
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub runs: usize,
    pub seed: u64,
    pub pairs_per_epoch: usize,
    pub sampler: Sampler,
    pub hr_recompute: bool,
    /// Select best-val parameters on the OOD validation MI split instead of
    /// ID validation accuracy.
    pub ood_val_selection: bool,
    pub bench_dir: String,
    pub out_dir: String,
    pub custom: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelKind::CgrlGcn,
            losses: LossSet::all(),
            lambda1: 1.0,
            lambda2: 1.0,
            tau: 1.0,
            margin: 0.5,
            k: 2,
            layers: 2,
            hidden: 32,
            lr: 0.01,
            weight_decay: 1e-5,
            dropout: 0.0,
            epochs: 500,
            runs: 5,
            seed: 1,
            pairs_per_epoch: 4096,
            sampler: Sampler::Gumbel,
            hr_recompute: false,
            ood_val_selection: false,
            bench_dir: "bench".into(),
            out_dir: "out".into(),
            custom: false,
        }
    }
}

const LR_GRID: [f64; 2] = [0.001, 0.01];
const WD_GRID: [f64; 4] = [1e-5, 5e-5, 1e-3, 3e-3];
const DROPOUT_GRID: [f64; 4] = [0.0, 0.1, 0.2, 0.4];
const HIDDEN_GRID: [usize; 4] = [32, 64, 128, 256];
const LAYERS_GRID: [usize; 4] = [2, 3, 4, 5];
const K_GRID: [usize; 6] = [1, 2, 3, 4, 5, 6];
const TAU_GRID: [f64; 3] = [0.5, 1.0, 2.0];
const MARGIN_GRID: [f64; 3] = [0.3, 0.5, 0.7];
const LAMBDA_GRID: [f64; 5] = [0.0, 0.1, 0.5, 1.0, 2.0];

fn in_grid_f(grid: &[f64], v: f64) -> bool {
    grid.iter().any(|&g| (g - v).abs() < 1e-12)
}

impl ExperimentConfig {
    /// Structural invariants, enforced even for `custom = true` configs.
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(CgrlError::Config(format!(
                "loss weights must be non-negative (lambda1 = {}, lambda2 = {})",
                self.lambda1, self.lambda2
            )));
        }
        if self.tau <= 0.0 {
            return Err(CgrlError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(CgrlError::Config(format!("margin {} outside [0, 1)", self.margin)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CgrlError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.epochs == 0 || self.runs == 0 || self.k == 0 || self.layers == 0 {
            return Err(CgrlError::Config(
                "epochs, runs, k, and layers must all be >= 1".into(),
            ));
        }
        if !self.losses.any() {
            return Err(CgrlError::Config(
                "at least one loss must be enabled (nothing to optimize)".into(),
            ));
        }
        if self.model.is_erm() {
            if self.losses != LossSet::sup_only() {
                return Err(CgrlError::Config(
                    "erm models train on the supervised loss alone (losses = sup)".into(),
                ));
            }
            if self.k != 1 {
                return Err(CgrlError::Config("erm models use k = 1".into()));
            }
        }
        if !self.custom {
            let checks: [(&str, bool); 9] = [
                ("lr", in_grid_f(&LR_GRID, self.lr)),
                ("weight_decay", in_grid_f(&WD_GRID, self.weight_decay)),
                ("dropout", in_grid_f(&DROPOUT_GRID, self.dropout)),
                ("hidden", HIDDEN_GRID.contains(&self.hidden)),
                ("layers", LAYERS_GRID.contains(&self.layers)),
                ("k", K_GRID.contains(&self.k)),
                ("tau", in_grid_f(&TAU_GRID, self.tau)),
                ("margin", in_grid_f(&MARGIN_GRID, self.margin)),
                (
                    "lambda",
                    in_grid_f(&LAMBDA_GRID, self.lambda1) && in_grid_f(&LAMBDA_GRID, self.lambda2),
                ),
            ];
            for (name, ok) in checks {
                if !ok {
                    return Err(CgrlError::Config(format!(
                        "{name} is outside the hyperparameter grid; set custom = true to override"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sorted key = value rendering; the echo format and the hash input.
    pub fn canonical_text(&self) -> String {
        let mut m = BTreeMap::new();
        m.insert("model", self.model.name().to_string());
        m.insert("losses", self.losses.render());
        m.insert("lambda1", format!("{:?}", self.lambda1));
        m.insert("lambda2", format!("{:?}", self.lambda2));
        m.insert("tau", format!("{:?}", self.tau));
        m.insert("margin", format!("{:?}", self.margin));
        m.insert("k", self.k.to_string());
        m.insert("layers", self.layers.to_string());
        m.insert("hidden", self.hidden.to_string());
        m.insert("lr", format!("{:?}", self.lr));
        m.insert("weight_decay", format!("{:?}", self.weight_decay));
        m.insert("dropout", format!("{:?}", self.dropout));
        m.insert("epochs", self.epochs.to_string());
        m.insert("runs", self.runs.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("pairs_per_epoch", self.pairs_per_epoch.to_string());
        m.insert(
            "sampler",
            match self.sampler {
                Sampler::Gumbel => "gumbel".to_string(),
                Sampler::Softmax => "softmax".to_string(),
            },
        );
        m.insert("hr_recompute", self.hr_recompute.to_string());
        m.insert("ood_val_selection", self.ood_val_selection.to_string());
        m.insert("bench_dir", self.bench_dir.clone());
        m.insert("out_dir", self.out_dir.clone());
        m.insert("custom", self.custom.to_string());
        m.iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Short stable hash over the canonical text, excluding output paths.
    pub fn hash(&self) -> String {
        let mut h = Fnv::new();
        for line in self.canonical_text().lines() {
            if line.starts_with("out_dir") || line.starts_with("bench_dir") {
                continue;
            }
            h.write_bytes(line.as_bytes());
        }
        format!("{:08x}", h.finish() as u32)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut saw_model = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CgrlError::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad_num = |k: &str| CgrlError::Config(format!("line {}: bad number for {k}", lineno + 1));
            match key {
                "model" => {
                    cfg.model = ModelKind::parse(value)?;
                    saw_model = true;
                }
                "losses" => cfg.losses = LossSet::parse(value)?,
                "lambda1" => cfg.lambda1 = value.parse().map_err(|_| bad_num(key))?,
                "lambda2" => cfg.lambda2 = value.parse().map_err(|_| bad_num(key))?,
                "tau" => cfg.tau = value.parse().map_err(|_| bad_num(key))?,
                "margin" => cfg.margin = value.parse().map_err(|_| bad_num(key))?,
                "k" => cfg.k = value.parse().map_err(|_| bad_num(key))?,
                "layers" => cfg.layers = value.parse().map_err(|_| bad_num(key))?,
                "hidden" => cfg.hidden = value.parse().map_err(|_| bad_num(key))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad_num(key))?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad_num(key))?,
                "dropout" => cfg.dropout = value.parse().map_err(|_| bad_num(key))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad_num(key))?,
                "runs" => cfg.runs = value.parse().map_err(|_| bad_num(key))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad_num(key))?,
                "pairs_per_epoch" => cfg.pairs_per_epoch = value.parse().map_err(|_| bad_num(key))?,
                "sampler" => {
                    cfg.sampler = match value {
                        "gumbel" => Sampler::Gumbel,
                        "softmax" => Sampler::Softmax,
                        other => {
                            return Err(CgrlError::Config(format!(
                                "unknown sampler {other:?} (expected gumbel or softmax)"
                            )))
                        }
                    }
                }
                "hr_recompute" => cfg.hr_recompute = parse_bool(value, key)?,
                "ood_val_selection" => cfg.ood_val_selection = parse_bool(value, key)?,
                "bench_dir" => cfg.bench_dir = value.to_string(),
                "out_dir" => cfg.out_dir = value.to_string(),
                "custom" => cfg.custom = parse_bool(value, key)?,
                other => {
                    return Err(CgrlError::Config(format!(
                        "unknown key {other:?} on line {}",
                        lineno + 1
                    )))
                }
            }
        }
        if !saw_model {
            return Err(CgrlError::Config("missing required key: model".into()));
        }
        // ERM runs imply the fixed baseline shape unless the file overrode it
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_bool(value: &str, key: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(CgrlError::Config(format!("bad boolean {other:?} for {key}"))),
    }
}

/// Load and validate a config file; defaults fill unset keys.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = read_text(path)?;
    ExperimentConfig::parse(&text)
}

/// Benchmark generation settings for the `bench` subcommand, same flat
/// format with `sbm_` / `shift_` prefixes.
#[derive(Debug, Clone, Default)]
pub struct BenchConfig {
    pub sbm: SbmSpec,
    pub shift: ShiftSpec,
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = BenchConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CgrlError::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |k: &str| CgrlError::Config(format!("line {}: bad value for {k}", lineno + 1));
            match key {
                "sbm_classes" => cfg.sbm.classes = value.parse().map_err(|_| bad(key))?,
                "sbm_per_class" => cfg.sbm.per_class = value.parse().map_err(|_| bad(key))?,
                "sbm_p_in" => cfg.sbm.p_in = value.parse().map_err(|_| bad(key))?,
                "sbm_p_out" => cfg.sbm.p_out = value.parse().map_err(|_| bad(key))?,
                "sbm_dim" => cfg.sbm.dim = value.parse().map_err(|_| bad(key))?,
                "sbm_delta" => cfg.sbm.delta = value.parse().map_err(|_| bad(key))?,
                "sbm_noise" => cfg.sbm.noise = value.parse().map_err(|_| bad(key))?,
                "sbm_seed" => cfg.sbm.seed = value.parse().map_err(|_| bad(key))?,
                "shift_seed" => cfg.shift.seed = value.parse().map_err(|_| bad(key))?,
                "shift_strengths" => {
                    let parts: Vec<f64> = value
                        .split(',')
                        .map(|p| p.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(key))?;
                    if parts.len() != 6 {
                        return Err(CgrlError::Config("shift_strengths needs 6 values".into()));
                    }
                    cfg.shift.strengths.copy_from_slice(&parts);
                }
                other => {
                    return Err(CgrlError::Config(format!(
                        "unknown key {other:?} on line {}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.sbm.validate()?;
        cfg.shift.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_paper_defaults() {
        let cfg = ExperimentConfig::parse("model = erm-gcn\nlosses = sup\nk = 1\n").unwrap();
        assert_eq!(cfg.epochs, 500);
        assert_eq!(cfg.runs, 5);
        assert_eq!(cfg.model, ModelKind::ErmGcn);
    }

    #[test]
    fn negative_lambda_rejected() {
        let err = ExperimentConfig::parse("model = cgrl-gcn\nlambda1 = -1\n").unwrap_err();
        assert!(err.to_string().contains("non-negative"));
    }

    #[test]
    fn unknown_key_rejected_with_name() {
        let err = ExperimentConfig::parse("model = cgrl-gcn\nfoo = 1\n").unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
    }

    #[test]
    fn out_of_grid_needs_custom_flag() {
        let err = ExperimentConfig::parse("model = cgrl-gcn\nlr = 0.37\n").unwrap_err();
        assert!(err.to_string().contains("custom"), "{err}");
        let ok = ExperimentConfig::parse("model = cgrl-gcn\nlr = 0.37\ncustom = true\n");
        assert!(ok.is_ok());
    }

    #[test]
    fn erm_shape_is_enforced() {
        assert!(ExperimentConfig::parse("model = erm-gcn\n").is_err()); // losses default to all
        assert!(ExperimentConfig::parse("model = erm-gcn\nlosses = sup\nk = 1\n").is_ok());
    }

    #[test]
    fn all_losses_disabled_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.losses = LossSet {
            sup: false,
            rec: false,
            intra: false,
            inter: false,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_path_independent() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        let mut c = ExperimentConfig::default();
        c.lambda1 = 0.5;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn comments_and_blanks_are_ignored()  {
        let cfg = ExperimentConfig::parse(
            "# experiment\nmodel = cgrl-gat\n\nk = 3  # three branches\n",
        )
        .unwrap();
        assert_eq!(cfg.model, ModelKind::CgrlGat);
        assert_eq!(cfg.k, 3);
    }

    #[test]
    fn bench_config_round_trip() {
        let cfg = BenchConfig::parse("sbm_classes = 3\nsbm_per_class = 20\nshift_seed = 9\n").unwrap();
        assert_eq!(cfg.sbm.classes, 3);
        assert_eq!(cfg.shift.seed, 9);
        assert!(BenchConfig::parse("bogus = 1\n").is_err());
        assert!(BenchConfig::parse("sbm_p_in = 0.001\nsbm_p_out = 0.5\n").is_err());
    }
}
