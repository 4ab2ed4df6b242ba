//! Experiment configuration: TOML parsing, defaults, presets and validation.
//!
//! ```toml
//! train_images = "data/mnist/train-images.idx3-ubyte"
//! train_labels = "data/mnist/train-labels.idx1-ubyte"
//! test_images = "data/mnist/t10k-images.idx3-ubyte"
//! test_labels = "data/mnist/t10k-labels.idx1-ubyte"
//! seeds = 8
//!
//! [[condition]]
//! label = "qsd"
//! mode = "qsd"
//! drop_rate = 0.2
//! alpha = 0.2
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::dataio::Permutation;
use crate::dilution::{DilutionConfig, DilutionMode, MaskSharing};
use crate::error::{Error, Result};
use crate::netcore::{LrSchedule, MlpSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub label: String,
    pub mode: DilutionMode,
    pub drop_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl Condition {
    pub fn dilution(&self) -> Result<DilutionConfig> {
        DilutionConfig::new(self.mode, self.drop_rate, self.alpha.unwrap_or(1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub enabled: bool,
    /// Probe on the first `samples` test images; all of them when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    pub permutation: Permutation,
    pub histogram_bins: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            enabled: true,
            samples: None,
            permutation: Permutation::PerSample,
            histogram_bins: 50,
        }
    }
}

/// A fully defaulted and validated experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Train on the first `train_subset` samples only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    pub hidden_widths: Vec<usize>,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    /// Dilution coefficients per example, or one draw shared by the batch.
    pub mask_sharing: MaskSharing,
    pub jobs: usize,
    pub probe: ProbeSettings,
    #[serde(rename = "condition")]
    pub conditions: Vec<Condition>,
}

/// Canned protocol sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 10000 training samples, 20 epochs, rate drops at 6, 12 and 16.
    Quick,
    /// All 60000 training samples, 100 epochs, rate drops at 30, 60 and 80.
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quick" => Ok(Preset::Quick),
            "full" => Ok(Preset::Full),
            other => Err(Error::Parameter(format!(
                "unknown preset `{other}` (expected quick or full)"
            ))),
        }
    }
}

pub fn default_conditions() -> Vec<Condition> {
    vec![
        Condition {
            label: "standard".into(),
            mode: DilutionMode::Standard,
            drop_rate: 0.2,
            alpha: None,
        },
        Condition {
            label: "qsd".into(),
            mode: DilutionMode::Qsd,
            drop_rate: 0.2,
            alpha: Some(0.2),
        },
    ]
}

impl ExperimentConfig {
    /// Full-protocol defaults around the given dataset paths.
    pub fn with_paths(
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    ) -> Self {
        let schedule = LrSchedule::mnist_default();
        ExperimentConfig {
            train_images,
            train_labels,
            test_images,
            test_labels,
            output_dir: PathBuf::from("results"),
            seeds: (0..8).collect(),
            epochs: 100,
            batch_size: 64,
            train_subset: None,
            hidden_widths: vec![128, 256, 512],
            learning_rate: schedule.initial,
            lr_decay: schedule.factor,
            lr_milestones: schedule.milestones,
            momentum: 0.9,
            mask_sharing: MaskSharing::PerExample,
            jobs: 1,
            probe: ProbeSettings::default(),
            conditions: default_conditions(),
        }
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::Quick => {
                self.train_subset = Some(10_000);
                self.epochs = 20;
                self.lr_milestones = vec![6, 12, 16];
            }
            Preset::Full => {
                self.train_subset = None;
                self.epochs = 100;
                self.lr_milestones = vec![30, 60, 80];
            }
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.learning_rate,
            factor: self.lr_decay,
            milestones: self.lr_milestones.clone(),
        }
    }

    pub fn spec(&self, condition: &Condition) -> Result<MlpSpec> {
        let mut widths = vec![crate::dataio::PIXELS];
        widths.extend(&self.hidden_widths);
        widths.push(10);
        Ok(MlpSpec::uniform(&widths, condition.dilution()?).with_sharing(self.mask_sharing))
    }

    pub fn condition(&self, label: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.label == label)
    }

    /// Reads and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    /// Parses TOML text, resolving relative paths against `base`. Every
    /// problem found is reported together.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let mut r = Reader::default();
        let cfg = r.config(&table, base);
        let mut errors = r.errors;
        if let Some(cfg) = &cfg {
            let empty_because_dropped = r.dropped_conditions && cfg.conditions.is_empty();
            errors.extend(
                cfg.problems().into_iter().filter(|p| {
                    !(empty_because_dropped && p.starts_with("condition: at least one"))
                }),
            );
        }
        match cfg {
            Some(cfg) if errors.is_empty() => Ok(cfg),
            _ => Err(Error::Config(errors)),
        }
    }

    /// Checks every invariant; used after parsing and after presets or
    /// command-line overrides.
    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.seeds.is_empty() {
            p.push("seeds: at least one seed is required".into());
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            p.push("seeds: duplicate seed values".into());
        }
        if self.epochs == 0 {
            p.push("epochs: must be at least 1".into());
        }
        if self.batch_size == 0 {
            p.push("batch_size: must be at least 1".into());
        }
        if self.train_subset == Some(0) {
            p.push("train_subset: must be at least 1".into());
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            p.push("hidden_widths: need at least one layer, all widths positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push(format!(
                "learning_rate: must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            p.push(format!(
                "lr_decay: must lie in (0, 1], got {}",
                self.lr_decay
            ));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            p.push("lr_milestones: must be strictly increasing".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!(
                "momentum: must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.jobs == 0 {
            p.push("jobs: must be at least 1".into());
        }
        if self.probe.histogram_bins == 0 {
            p.push("probe.histogram_bins: must be at least 1".into());
        }
        if self.probe.samples == Some(0) {
            p.push("probe.samples: must be at least 1".into());
        }
        if self.conditions.is_empty() {
            p.push("condition: at least one condition is required".into());
        }
        let mut seen = BTreeSet::new();
        for c in &self.conditions {
            let at = format!("condition `{}`", c.label);
            if c.label.is_empty()
                || !c
                    .label
                    .chars()
                    .all(|ch| ch.is_ascii_alphanumeric() || "_-.".contains(ch))
            {
                p.push(format!(
                    "{at}: labels may only use letters, digits, `_`, `-` and `.`"
                ));
            }
            if !seen.insert(c.label.as_str()) {
                p.push(format!("duplicate condition label `{}`", c.label));
            }
            if !(0.0..1.0).contains(&c.drop_rate) {
                p.push(format!(
                    "{at}: drop_rate must lie in [0, 1), got {}",
                    c.drop_rate
                ));
            }
            if c.mode.uses_alpha() {
                match c.alpha {
                    None => p.push(format!("{at}: alpha is required for mode {}", c.mode)),
                    Some(a) if !(a > 0.0 && a.is_finite()) => p.push(format!(
                        "{at}: alpha must be positive (beta shapes need alpha > 0), got {a}"
                    )),
                    _ => {}
                }
            }
        }
        p
    }

    /// The configuration as TOML, with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }
}

const TOP_KEYS: &[&str] = &[
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "output_dir",
    "seeds",
    "epochs",
    "batch_size",
    "train_subset",
    "hidden_widths",
    "learning_rate",
    "lr_decay",
    "lr_milestones",
    "momentum",
    "mask_sharing",
    "jobs",
    "probe",
    "condition",
];
const PROBE_KEYS: &[&str] = &["enabled", "samples", "permutation", "histogram_bins"];
const CONDITION_KEYS: &[&str] = &["label", "mode", "drop_rate", "alpha"];

#[derive(Default)]
struct Reader {
    errors: Vec<String>,
    /// Some `[[condition]]` entry was malformed and left out.
    dropped_conditions: bool,
}

impl Reader {
    fn unknown(&mut self, table: &Table, allowed: &[&str], ctx: &str) {
        for key in table.keys() {
            if !allowed.contains(&key.as_str()) {
                self.errors.push(format!("{ctx}unknown key `{key}`"));
            }
        }
    }

    fn path(&mut self, t: &Table, key: &str, base: &Path) -> Option<PathBuf> {
        match t.get(key) {
            None => {
                self.errors.push(format!("missing required key `{key}`"));
                None
            }
            Some(Value::String(s)) => Some(base.join(s)),
            Some(_) => {
                self.errors.push(format!("`{key}` must be a string path"));
                None
            }
        }
    }

    fn uint(&mut self, t: &Table, key: &str, ctx: &str) -> Option<Option<u64>> {
        match t.get(key) {
            None => Some(None),
            Some(Value::Integer(i)) if *i >= 0 => Some(Some(*i as u64)),
            Some(_) => {
                self.errors
                    .push(format!("{ctx}`{key}` must be a non-negative integer"));
                None
            }
        }
    }

    fn float(&mut self, t: &Table, key: &str, ctx: &str) -> Option<Option<f64>> {
        match t.get(key) {
            None => Some(None),
            Some(Value::Float(f)) => Some(Some(*f)),
            Some(Value::Integer(i)) => Some(Some(*i as f64)),
            Some(_) => {
                self.errors.push(format!("{ctx}`{key}` must be a number"));
                None
            }
        }
    }

    fn uint_list(&mut self, t: &Table, key: &str) -> Option<Option<Vec<u64>>> {
        match t.get(key) {
            None => Some(None),
            Some(Value::Array(items)) => {
                let parsed: Option<Vec<u64>> = items
                    .iter()
                    .map(|v| match v {
                        Value::Integer(i) if *i >= 0 => Some(*i as u64),
                        _ => None,
                    })
                    .collect();
                if parsed.is_none() {
                    self.errors
                        .push(format!("`{key}` entries must be non-negative integers"));
                }
                parsed.map(Some)
            }
            Some(_) => {
                self.errors
                    .push(format!("`{key}` must be an array of integers"));
                None
            }
        }
    }

    fn string<'a>(&mut self, t: &'a Table, key: &str, ctx: &str) -> Option<Option<&'a str>> {
        match t.get(key) {
            None => Some(None),
            Some(Value::String(s)) => Some(Some(s)),
            Some(_) => {
                self.errors.push(format!("{ctx}`{key}` must be a string"));
                None
            }
        }
    }

    fn config(&mut self, t: &Table, base: &Path) -> Option<ExperimentConfig> {
        self.unknown(t, TOP_KEYS, "");
        let paths = [
            self.path(t, "train_images", base),
            self.path(t, "train_labels", base),
            self.path(t, "test_images", base),
            self.path(t, "test_labels", base),
        ];
        let [Some(ti), Some(tl), Some(ei), Some(el)] = paths else {
            self.rest(
                t,
                base,
                &mut ExperimentConfig::with_paths(
                    PathBuf::new(),
                    PathBuf::new(),
                    PathBuf::new(),
                    PathBuf::new(),
                ),
            );
            return None;
        };
        let mut cfg = ExperimentConfig::with_paths(ti, tl, ei, el);
        self.rest(t, base, &mut cfg);
        Some(cfg)
    }

    fn rest(&mut self, t: &Table, base: &Path, cfg: &mut ExperimentConfig) {
        if let Some(Some(dir)) = self.string(t, "output_dir", "") {
            cfg.output_dir = base.join(dir);
        } else {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        match t.get("seeds") {
            None => {}
            Some(Value::Integer(n)) if *n >= 1 => cfg.seeds = (0..*n as u64).collect(),
            Some(Value::Array(_)) => {
                if let Some(Some(list)) = self.uint_list(t, "seeds") {
                    cfg.seeds = list;
                }
            }
            Some(_) => self
                .errors
                .push("`seeds` must be a positive count or an array of seeds".into()),
        }
        if let Some(Some(v)) = self.uint(t, "epochs", "") {
            cfg.epochs = v as usize;
        }
        if let Some(Some(v)) = self.uint(t, "batch_size", "") {
            cfg.batch_size = v as usize;
        }
        if let Some(v) = self.uint(t, "train_subset", "") {
            cfg.train_subset = v.map(|v| v as usize);
        }
        if let Some(Some(v)) = self.uint_list(t, "hidden_widths") {
            cfg.hidden_widths = v.into_iter().map(|w| w as usize).collect();
        }
        if let Some(Some(v)) = self.float(t, "learning_rate", "") {
            cfg.learning_rate = v;
        }
        if let Some(Some(v)) = self.float(t, "lr_decay", "") {
            cfg.lr_decay = v;
        }
        if let Some(Some(v)) = self.uint_list(t, "lr_milestones") {
            cfg.lr_milestones = v.into_iter().map(|m| m as usize).collect();
        }
        if let Some(Some(v)) = self.float(t, "momentum", "") {
            cfg.momentum = v;
        }
        if let Some(Some(v)) = self.string(t, "mask_sharing", "") {
            match v.parse() {
                Ok(m) => cfg.mask_sharing = m,
                Err(_) => self.errors.push(format!(
                    "unknown mask_sharing `{v}` (expected per_example or per_batch)"
                )),
            }
        }
        if let Some(Some(v)) = self.uint(t, "jobs", "") {
            cfg.jobs = v as usize;
        }
        match t.get("probe") {
            None => {}
            Some(Value::Table(p)) => self.probe(p, &mut cfg.probe),
            Some(_) => self.errors.push("`probe` must be a table".into()),
        }
        match t.get("condition") {
            None => {}
            Some(Value::Array(items)) => {
                cfg.conditions.clear();
                for (i, item) in items.iter().enumerate() {
                    match item {
                        Value::Table(c) => {
                            if let Some(c) = self.condition(c, i) {
                                cfg.conditions.push(c);
                            }
                        }
                        _ => self
                            .errors
                            .push(format!("condition #{}: must be a table", i + 1)),
                    }
                }
            }
            Some(_) => self
                .errors
                .push("`condition` must be an array of tables ([[condition]])".into()),
        }
    }

    fn probe(&mut self, p: &Table, out: &mut ProbeSettings) {
        let ctx = "probe: ";
        self.unknown(p, PROBE_KEYS, ctx);
        match p.get("enabled") {
            None => {}
            Some(Value::Boolean(b)) => out.enabled = *b,
            Some(_) => self
                .errors
                .push(format!("{ctx}`enabled` must be a boolean")),
        }
        if let Some(v) = self.uint(p, "samples", ctx) {
            out.samples = v.map(|v| v as usize);
        }
        if let Some(Some(v)) = self.uint(p, "histogram_bins", ctx) {
            out.histogram_bins = v as usize;
        }
        match self.string(p, "permutation", ctx) {
            Some(Some("per_sample")) => out.permutation = Permutation::PerSample,
            Some(Some("shared")) => out.permutation = Permutation::Shared,
            Some(Some(other)) => self.errors.push(format!(
                "{ctx}unknown permutation `{other}` (expected per_sample or shared)"
            )),
            _ => {}
        }
    }

    fn condition(&mut self, c: &Table, index: usize) -> Option<Condition> {
        let label = match c.get("label") {
            Some(Value::String(s)) => s.clone(),
            _ => format!("#{}", index + 1),
        };
        let ctx = format!("condition `{label}`: ");
        self.unknown(c, CONDITION_KEYS, &ctx);
        let before = self.errors.len();
        if !matches!(c.get("label"), Some(Value::String(_))) {
            self.errors.push(format!("{ctx}missing string `label`"));
        }
        let mode = match self.string(c, "mode", &ctx) {
            Some(Some(m)) => match m.parse::<DilutionMode>() {
                Ok(m) => Some(m),
                Err(_) => {
                    self.errors.push(format!(
                        "{ctx}unknown mode `{m}` (expected none, standard, dist_p, dist_q or qsd)"
                    ));
                    None
                }
            },
            Some(None) => {
                self.errors.push(format!("{ctx}missing `mode`"));
                None
            }
            None => None,
        };
        let drop_rate = match self.float(c, "drop_rate", &ctx) {
            Some(Some(d)) => Some(d),
            Some(None) if mode == Some(DilutionMode::None) => Some(0.0),
            Some(None) => {
                self.errors.push(format!("{ctx}missing `drop_rate`"));
                None
            }
            None => None,
        };
        let alpha = self.float(c, "alpha", &ctx).flatten();
        if self.errors.len() > before {
            // report range problems of the fields that did parse, since
            // this condition never reaches `problems`
            if let Some(d) = drop_rate.filter(|d| !(0.0..1.0).contains(d)) {
                self.errors
                    .push(format!("{ctx}drop_rate must lie in [0, 1), got {d}"));
            }
            if let Some(a) = alpha.filter(|a| !(*a > 0.0 && a.is_finite())) {
                self.errors
                    .push(format!("{ctx}alpha must be positive, got {a}"));
            }
            self.dropped_conditions = true;
            return None;
        }
        Some(Condition {
            label,
            mode: mode?,
            drop_rate: drop_rate?,
            alpha,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PATHS: &str = r#"
        train_images = "a"
        train_labels = "b"
        test_images = "c"
        test_labels = "d"
    "#;

    fn parse(extra: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&format!("{PATHS}\n{extra}"), Path::new("/base"))
    }

    fn messages(r: Result<ExperimentConfig>) -> Vec<String> {
        match r {
            Err(Error::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.train_images, PathBuf::from("/base/a"));
        assert_eq!(c.output_dir, PathBuf::from("/base/results"));
        assert_eq!(c.seeds, (0..8).collect::<Vec<_>>());
        assert_eq!((c.epochs, c.batch_size, c.momentum), (100, 64, 0.9));
        assert_eq!(c.lr_milestones, vec![30, 60, 80]);
        assert_eq!(c.conditions, default_conditions());
        assert!(c.probe.enabled);
    }

    #[test]
    fn conditions_and_overrides() {
        let c = parse(
            r#"
            seeds = [3, 5]
            epochs = 2
            output_dir = "/tmp/out"
            [probe]
            permutation = "shared"
            [[condition]]
            label = "p"
            mode = "dist_p"
            drop_rate = 0.5
            alpha = 1
            [[condition]]
            label = "off"
            mode = "none"
            "#,
        )
        .unwrap();
        assert_eq!(c.seeds, vec![3, 5]);
        assert_eq!(c.output_dir, PathBuf::from("/tmp/out"));
        assert_eq!(c.probe.permutation, Permutation::Shared);
        assert_eq!(c.conditions.len(), 2);
        assert_eq!(c.conditions[0].alpha, Some(1.0));
        assert_eq!(c.conditions[1].drop_rate, 0.0);
    }

    #[test]
    fn itemized_errors() {
        let m = messages(parse(
            r#"
            colour = "red"
            [[condition]]
            label = "x"
            mode = "qsd"
            drop_rate = 0.2
            alpha = 0
            [[condition]]
            label = "x"
            mode = "standard"
            drop_rate = 0.2
            [[condition]]
            label = "y"
            mode = "standard"
            "#,
        ));
        assert!(
            m.iter().any(|e| e.contains("unknown key `colour`")),
            "{m:?}"
        );
        assert!(m.iter().any(|e| e.contains("missing `drop_rate`")), "{m:?}");
        assert!(
            m.iter()
                .any(|e| e.contains("duplicate condition label `x`")),
            "{m:?}"
        );
        assert!(
            m.iter().any(|e| e.contains("alpha must be positive")),
            "{m:?}"
        );
    }

    #[test]
    fn missing_paths_are_listed() {
        let m = messages(ExperimentConfig::parse("epochs = 3", Path::new("")));
        assert_eq!(
            m.iter()
                .filter(|e| e.contains("missing required key"))
                .count(),
            4
        );
        let m = messages(ExperimentConfig::parse("epochs = [", Path::new("")));
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn toml_round_trip_and_presets() {
        let mut c = parse("").unwrap();
        c.apply_preset(Preset::Quick);
        assert_eq!((c.train_subset, c.epochs), (Some(10_000), 20));
        let text = c.to_toml();
        let back = ExperimentConfig::parse(&text, Path::new("/elsewhere")).unwrap();
        assert_eq!(back, c);
        c.apply_preset(Preset::Full);
        assert_eq!(
            (c.train_subset, c.lr_milestones.clone()),
            (None, vec![30, 60, 80])
        );
        assert!("slow".parse::<Preset>().is_err());
    }
}
