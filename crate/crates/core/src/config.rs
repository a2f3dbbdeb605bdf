//! Experiment configuration: TOML file, dotted-path overrides, validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::defenses::DefenseConfig;
use crate::encoder::{Activation, LayerLayout};
use crate::error::{FsslError, Result};
use crate::eval::ProbeConfig;
use crate::hallucination::HallucinationConfig;
use crate::poisoning::{BottomKMode, TriggerSpec};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub federation: FederationConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Per-coordinate standard deviation around each class mean.
    pub spread: f64,
    /// Trailing synthetic coordinates with no class signal.
    pub background: usize,
    /// Raw CIFAR-10 training / test batches when `source = "cifar10"`.
    pub train_path: Option<String>,
    pub test_path: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            classes: 10,
            dim: 32,
            train_per_class: 200,
            test_per_class: 100,
            spread: 0.15,
            background: 0,
            train_path: None,
            test_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub emb_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: vec![64, 64],
            emb_dim: 16,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Federated rounds `E`.
    pub rounds: usize,
    /// Local epochs `e`.
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tau: f64,
    pub queue_size: usize,
    pub aug_sigma: f64,
    pub aug_rho: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rounds: 100,
            local_epochs: 3,
            batch_size: 128,
            lr: 0.001,
            momentum: 0.99,
            tau: 0.2,
            queue_size: 1024,
            aug_sigma: 0.1,
            aug_rho: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub clients: usize,
    pub malicious: Vec<usize>,
    /// Dirichlet concentration; `None` gives the stratified IID split.
    pub alpha: Option<f64>,
    /// Clients sampled per round; `None` means everyone participates.
    pub clients_per_round: Option<usize>,
    /// Probability that a malicious client takes part in a given round.
    pub malicious_participation: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 5,
            malicious: vec![0],
            alpha: None,
            clients_per_round: None,
            malicious_participation: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub enabled: bool,
    pub mu: f64,
    pub target_class: usize,
    /// Explicit trigger; when absent a tail patch of `trigger_width`
    /// coordinates set to `trigger_value` is used.
    pub trigger: Option<TriggerSpec>,
    pub trigger_width: usize,
    pub trigger_value: f64,
    /// Fraction of the training set drawn from the target class and
    /// poisoned.
    pub poison_ratio: f64,
    /// `|B|`: poisoned positives per entanglement term.
    pub poison_batch: usize,
    /// Triggered queries per local step.
    pub attack_queries: usize,
    pub hallucination: HallucinationConfig,
    /// Project every local step back into the epsilon ball.
    pub constrain_eps: bool,
    /// Restrict the attack gradient to the bottom-k coordinates.
    pub constrain_mask: bool,
    pub model_replacement: bool,
    /// Explicit radius; when absent `eps_scale` times the attacker's own
    /// warmup-round update norm.
    pub eps: Option<f64>,
    pub eps_scale: f64,
    pub k_frac: f64,
    pub track_frac: f64,
    pub bottom_k_mode: BottomKMode,
    /// First round with the attack active; earlier rounds are benign warmup.
    pub start_round: usize,
    /// Last round with the attacker present; it is removed afterwards.
    pub stop_round: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            enabled: true,
            mu: 0.5,
            target_class: 0,
            trigger: None,
            trigger_width: 4,
            trigger_value: 1.0,
            poison_ratio: 0.01,
            poison_batch: 8,
            attack_queries: 32,
            hallucination: HallucinationConfig::default(),
            constrain_eps: true,
            constrain_mask: true,
            model_replacement: false,
            eps: None,
            eps_scale: 0.5,
            k_frac: 0.2,
            track_frac: 1.0,
            bottom_k_mode: BottomKMode::Magnitude,
            start_round: 2,
            stop_round: None,
        }
    }
}

impl AttackConfig {
    pub fn trigger_for(&self, dim: usize) -> TriggerSpec {
        self.trigger.clone().unwrap_or_else(|| {
            TriggerSpec::tail_patch(
                dim,
                self.trigger_width,
                self.trigger_value,
                self.target_class,
            )
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    /// Training samples per class fed to the linear probe; `None` uses all.
    pub probe_per_class: Option<usize>,
    pub clean_loss_queries: usize,
    pub clean_loss_negatives: usize,
    pub persistence_step: usize,
    /// Save the global encoder every this many rounds; the final round is
    /// always saved.
    pub checkpoint_every: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            probe: ProbeConfig::default(),
            probe_per_class: None,
            clean_loss_queries: 128,
            clean_loss_negatives: 256,
            persistence_step: 10,
            checkpoint_every: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Self::from_toml_with_overrides(s, &[])
    }

    /// Parses `s`, applies `key.path=value` overrides, then validates.
    pub fn from_toml_with_overrides(s: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = s
            .parse()
            .map_err(|e: toml::de::Error| FsslError::config("<file>", e.message()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(root))
            .map_err(|e| {
                let path = e.path().to_string();
                FsslError::config(
                    if path == "." {
                        "<root>".to_string()
                    } else {
                        path
                    },
                    e.inner().to_string(),
                )
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn layout(&self) -> Result<LayerLayout> {
        LayerLayout::uniform(
            self.data.dim,
            &self.encoder.hidden,
            self.encoder.emb_dim,
            self.encoder.activation,
        )
    }

    pub fn trigger(&self) -> TriggerSpec {
        self.attack.trigger_for(self.data.dim)
    }

    /// Field-level checks; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| Err(FsslError::config(f, m));
        let d = &self.data;
        if d.classes < 2 {
            return bad("data.classes", "need at least 2 classes".into());
        }
        if d.source == DataSource::Synthetic {
            if d.dim < d.classes {
                return bad(
                    "data.dim",
                    format!("must be >= data.classes ({})", d.classes),
                );
            }
            if d.dim.saturating_sub(d.background) < d.classes {
                return bad(
                    "data.background",
                    format!(
                        "leaves fewer than data.classes ({}) signal coordinates",
                        d.classes
                    ),
                );
            }
            if d.train_per_class == 0 || d.test_per_class == 0 {
                return bad(
                    "data.train_per_class",
                    "per-class counts must be positive".into(),
                );
            }
            if !(d.spread >= 0.0) {
                return bad("data.spread", "must be >= 0".into());
            }
        } else if d.train_path.is_none() {
            return bad("data.train_path", "required for cifar10".into());
        }
        if self.encoder.emb_dim < 2 {
            return bad("encoder.emb_dim", "must be >= 2".into());
        }
        if self.encoder.hidden.iter().any(|&h| h == 0) {
            return bad("encoder.hidden", "layer widths must be positive".into());
        }
        let t = &self.train;
        if t.local_epochs == 0 {
            return bad("train.local_epochs", "must be >= 1".into());
        }
        if t.batch_size == 0 {
            return bad("train.batch_size", "must be >= 1".into());
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return bad("train.lr", "must be finite and >= 0".into());
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return bad("train.momentum", "must lie in [0, 1)".into());
        }
        if !(t.tau > 0.0) {
            return bad("train.tau", "must be > 0".into());
        }
        if t.queue_size == 0 {
            return bad("train.queue_size", "must be >= 1".into());
        }
        if !(t.aug_sigma >= 0.0) {
            return bad("train.aug_sigma", "must be >= 0".into());
        }
        if !(0.0..1.0).contains(&t.aug_rho) {
            return bad("train.aug_rho", "must lie in [0, 1)".into());
        }
        let f = &self.federation;
        if f.clients == 0 {
            return bad("federation.clients", "must be >= 1".into());
        }
        if let Some(&m) = f.malicious.iter().find(|&&m| m >= f.clients) {
            return bad("federation.malicious", format!("client {m} does not exist"));
        }
        if let Some(a) = f.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return bad("federation.alpha", "must be positive".into());
            }
        }
        if let Some(c) = f.clients_per_round {
            if c == 0 || c > f.clients {
                return bad(
                    "federation.clients_per_round",
                    format!("must lie in [1, {}]", f.clients),
                );
            }
        }
        if !(0.0..=1.0).contains(&f.malicious_participation) {
            return bad(
                "federation.malicious_participation",
                "must lie in [0, 1]".into(),
            );
        }
        let a = &self.attack;
        if !(0.0..=1.0).contains(&a.mu) {
            return bad("attack.mu", "must lie in [0, 1]".into());
        }
        if a.target_class >= d.classes {
            return bad(
                "attack.target_class",
                format!("must be < data.classes ({})", d.classes),
            );
        }
        let dim = if d.source == DataSource::Synthetic {
            d.dim
        } else {
            crate::data::CIFAR10_RECORD - 1
        };
        let trig = a.trigger_for(dim);
        trig.validate(dim)?;
        if trig.target_class != a.target_class {
            return bad(
                "attack.trigger.target_class",
                "must equal attack.target_class".into(),
            );
        }
        if !(0.0..=1.0).contains(&a.poison_ratio) {
            return bad("attack.poison_ratio", "must lie in [0, 1]".into());
        }
        if a.poison_batch == 0 {
            return bad("attack.poison_batch", "must be >= 1".into());
        }
        if a.attack_queries == 0 {
            return bad("attack.attack_queries", "must be >= 1".into());
        }
        a.hallucination.validate().map_err(|e| match e {
            FsslError::ConfigInvalid { field, msg } => FsslError::ConfigInvalid {
                field: format!("attack.{field}"),
                msg,
            },
            e => e,
        })?;
        if a.hallucination.top_k > t.queue_size {
            return bad(
                "attack.hallucination.top_k",
                "must not exceed train.queue_size".into(),
            );
        }
        if let Some(e) = a.eps {
            if !(e > 0.0) {
                return bad("attack.eps", "must be > 0".into());
            }
        }
        if !(a.eps_scale > 0.0) {
            return bad("attack.eps_scale", "must be > 0".into());
        }
        if !(a.k_frac > 0.0 && a.k_frac <= 1.0) {
            return bad("attack.k_frac", "must lie in (0, 1]".into());
        }
        if !(a.track_frac > 0.0 && a.track_frac <= 1.0) {
            return bad("attack.track_frac", "must lie in (0, 1]".into());
        }
        if a.start_round == 0 {
            return bad("attack.start_round", "rounds are numbered from 1".into());
        }
        if a.enabled && a.constrain_eps && a.eps.is_none() && a.start_round < 2 {
            return bad(
                "attack.start_round",
                "needs a warmup round to calibrate eps, or set attack.eps".into(),
            );
        }
        if let Some(s) = a.stop_round {
            if s < a.start_round {
                return bad("attack.stop_round", "must be >= attack.start_round".into());
            }
        }
        match &self.defense {
            DefenseConfig::Krum { f: kf } if f.clients < kf + 3 => {
                return bad(
                    "defense.f",
                    format!("krum needs clients >= f + 3 = {}", kf + 3),
                );
            }
            DefenseConfig::Flame { noise_factor } if !(*noise_factor >= 0.0) => {
                return bad("defense.noise_factor", "must be >= 0".into());
            }
            DefenseConfig::Fltrust { root_samples: 0 } => {
                return bad("defense.root_samples", "must be >= 1".into());
            }
            DefenseConfig::NormClip { bound } if !(*bound > 0.0) => {
                return bad("defense.bound", "must be > 0".into());
            }
            _ => {}
        }
        if !(self.eval.probe.lr >= 0.0) {
            return bad("eval.probe.lr", "must be >= 0".into());
        }
        if self.eval.probe_per_class == Some(0) {
            return bad("eval.probe_per_class", "must be >= 1".into());
        }
        if self.eval.clean_loss_queries == 0 || self.eval.clean_loss_negatives == 0 {
            return bad(
                "eval.clean_loss_queries",
                "probe sizes must be positive".into(),
            );
        }
        if self.eval.checkpoint_every == Some(0) {
            return bad("eval.checkpoint_every", "must be >= 1".into());
        }
        Ok(())
    }
}

/// Sets `a.b.c = value` inside `root`, creating intermediate tables. The
/// value is read as a TOML literal, falling back to a bare string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| FsslError::config(spec, "override must look like key.path=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(FsslError::config(spec, "empty key segment"));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| FsslError::config(parts[..=i].join("."), "is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.federation.clients, 5);
        assert_eq!(c.federation.malicious, vec![0]);
        assert_eq!(c.attack.poison_ratio, 0.01);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.momentum, 0.99);
        assert_eq!(c.train.rounds, 100);
        assert_eq!(c.train.local_epochs, 3);
        assert_eq!(c.attack.hallucination.lambda, 0.8);
    }

    #[test]
    fn overrides_apply_dotted_paths() {
        let over = vec![
            "attack.mu=0.3".to_string(),
            "defense.kind=krum".to_string(),
            "name=abc".to_string(),
        ];
        let c = ExperimentConfig::from_toml_with_overrides("[train]\nrounds = 7\n", &over).unwrap();
        assert_eq!(c.attack.mu, 0.3);
        assert_eq!(c.train.rounds, 7);
        assert_eq!(c.defense, DefenseConfig::Krum { f: 1 });
        assert_eq!(c.name, "abc");
    }

    #[test]
    fn errors_name_the_field() {
        let field = |s: &str, o: &[&str]| {
            let o: Vec<String> = o.iter().map(|s| s.to_string()).collect();
            match ExperimentConfig::from_toml_with_overrides(s, &o) {
                Err(FsslError::ConfigInvalid { field, .. }) => field,
                other => panic!("{other:?}"),
            }
        };
        assert_eq!(field("", &["attack.mu=1.5"]), "attack.mu");
        assert_eq!(field("[train]\nlr = \"fast\"\n", &[]), "train.lr");
        assert!(field("[train]\nbogus = 1\n", &[]).starts_with("train"));
        assert_eq!(
            field("", &["attack.hallucination.lambda=0"]),
            "attack.hallucination.lambda"
        );
        assert_eq!(
            field("", &["federation.malicious=[9]"]),
            "federation.malicious"
        );
        assert_eq!(
            field(
                "",
                &["attack.trigger={coords=[40], values=[1.0], target_class=0}"]
            ),
            "attack.trigger.coords"
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.attack.stop_round = Some(30);
        c.federation.alpha = Some(0.1);
        c.defense = DefenseConfig::Flame { noise_factor: 0.0 };
        let back = ExperimentConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
