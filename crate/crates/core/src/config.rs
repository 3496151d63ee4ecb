//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment. Values are decimal numbers,
//! identifiers (`fedara`, `true`, `synthetic`) or double-quoted paths.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::adapters::{AdapterConfig, Flavor};
use crate::data::{PartitionSpec, Scheme};
use crate::error::{Error, Result};
use crate::metrics::DriftParams;
use crate::rank_alloc::BudgetSchedule;
use crate::trainer::LocalTrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Truncated-SVD adapters with adaptive rank masks.
    FedAra,
    /// Truncated-SVD adapters at fixed rank.
    FedSvd,
    /// LoRA adapters at fixed rank.
    FedLora,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FedAra => "fedara",
            Method::FedSvd => "fedsvd",
            Method::FedLora => "fedlora",
        }
    }

    pub fn flavor(self) -> Flavor {
        match self {
            Method::FedLora => Flavor::Lora,
            Method::FedAra | Method::FedSvd => Flavor::TruncSvd,
        }
    }

    pub fn adaptive(self) -> bool {
        self == Method::FedAra
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedara" => Ok(Method::FedAra),
            "fedsvd" => Ok(Method::FedSvd),
            "fedlora" => Ok(Method::FedLora),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected fedara, fedsvd or fedlora)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionKind {
    Dirichlet,
    Pathological,
    Iid,
}

impl PartitionKind {
    fn name(self) -> &'static str {
        match self {
            PartitionKind::Dirichlet => "dirichlet",
            PartitionKind::Pathological => "pathological",
            PartitionKind::Iid => "iid",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Csv(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub d: usize,
    pub classes: usize,
    pub blocks: usize,
    pub r_init: usize,
    /// Final average rank per site; the final budget is `T_r * sites`.
    pub t_r: usize,
    /// Vote fraction a triplet must exceed to survive arbitration.
    pub t_h: f64,
    pub t_w: usize,
    pub t_f: usize,
    pub total_rounds: usize,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub partition: PartitionKind,
    pub partition_alpha: f64,
    pub labels_per_client: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_per_round: usize,
    pub seed: u64,
    pub data: DataSource,
    /// Synthetic sample count.
    pub n: usize,
    /// Synthetic class-center distance from the origin.
    pub margin: f64,
    pub output: PathBuf,
    pub alpha_scale: f64,
    pub init_std: f64,
    pub pretrain_epochs: usize,
    pub module_pruning: bool,
    /// Adapter site whose update feeds the discrepancy metrics.
    pub eval_site: usize,
}

const SITES: usize = crate::trainer::NUM_SITES;

const EXPERIMENT_KEYS: &[&str] = &[
    "method",
    "d",
    "classes",
    "blocks",
    "r_init",
    "T_r",
    "T_h",
    "t_w",
    "t_f",
    "T",
    "num_clients",
    "clients_per_round",
    "partition",
    "partition_alpha",
    "labels_per_client",
    "lr",
    "batch_size",
    "epochs_per_round",
    "seed",
    "data",
    "n",
    "margin",
    "output",
    "alpha_scale",
    "init_std",
    "pretrain_epochs",
    "module_pruning",
    "eval_site",
];

#[derive(Clone, Debug, PartialEq)]
struct Value {
    line: usize,
    text: String,
    quoted: bool,
}

/// Parses `key = value` lines into a map, rejecting unknown and repeated keys.
fn parse_pairs(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, Value>> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = strip_comment(raw).trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Parse {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if !allowed.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}` (line {line})")));
        }
        let (text, quoted) = if let Some(inner) = value.strip_prefix('"') {
            let Some(inner) = inner.strip_suffix('"') else {
                return Err(Error::Parse {
                    line,
                    message: format!("unterminated quoted value for `{key}`"),
                });
            };
            (inner.to_string(), true)
        } else {
            if value.is_empty() {
                return Err(Error::Parse {
                    line,
                    message: format!("missing value for `{key}`"),
                });
            }
            (value.to_string(), false)
        };
        if out.insert(key.to_string(), Value { line, text, quoted }).is_some() {
            return Err(Error::Config(format!("duplicate key `{key}` (line {line})")));
        }
    }
    Ok(out)
}

/// Drops a `#` comment unless it sits inside a quoted value.
fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

struct Fields(BTreeMap<String, Value>);

impl Fields {
    fn raw(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    fn parse<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        if v.quoted {
            return Err(Error::Config(format!("`{key}` must be {what}, not a quoted string")));
        }
        v.text.parse().map(Some).map_err(|_| {
            Error::Config(format!("`{key}` must be {what}, got {:?} (line {})", v.text, v.line))
        })
    }

    fn uint(&self, key: &str) -> Result<Option<usize>> {
        self.parse(key, "a non-negative integer")
    }

    fn float(&self, key: &str) -> Result<Option<f64>> {
        let v: Option<f64> = self.parse(key, "a number")?;
        if let Some(x) = v {
            if !x.is_finite() {
                return Err(Error::Config(format!("`{key}` must be finite")));
            }
        }
        Ok(v)
    }

    fn required<T>(&self, key: &str, v: Option<T>) -> Result<T> {
        v.ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn ident(&self, key: &str) -> Option<&str> {
        self.raw(key).map(|v| v.text.as_str())
    }
}

impl ExperimentConfig {
    /// Parses and validates a config, filling defaults for omitted keys.
    pub fn parse(text: &str) -> Result<Self> {
        let f = Fields(parse_pairs(text, EXPERIMENT_KEYS)?);
        let method: Method = f.required("method", f.ident("method"))?.parse()?;
        let r_init = f.required("r_init", f.uint("r_init")?)?;
        let total_rounds = f.required("T", f.uint("T")?)?;
        let seed: u64 = f.required("seed", f.parse("seed", "a non-negative integer")?)?;
        let partition = match f.ident("partition").unwrap_or("dirichlet") {
            "dirichlet" => PartitionKind::Dirichlet,
            "pathological" => PartitionKind::Pathological,
            "iid" => PartitionKind::Iid,
            other => {
                return Err(Error::Config(format!(
                    "unknown partition `{other}` (expected dirichlet, pathological or iid)"
                )))
            }
        };
        let data = match f.raw("data") {
            None => DataSource::Synthetic,
            Some(v) if !v.quoted && v.text == "synthetic" => DataSource::Synthetic,
            Some(v) if v.quoted => DataSource::Csv(PathBuf::from(&v.text)),
            Some(v) => {
                return Err(Error::Config(format!(
                    "`data` must be `synthetic` or a quoted CSV path, got {:?}",
                    v.text
                )))
            }
        };
        let module_pruning = match f.ident("module_pruning") {
            None | Some("true") => true,
            Some("false") => false,
            Some(other) => {
                return Err(Error::Config(format!("`module_pruning` must be true or false, got {other:?}")))
            }
        };
        let config = Self {
            method,
            d: f.uint("d")?.unwrap_or(16),
            classes: f.uint("classes")?.unwrap_or(4),
            blocks: f.uint("blocks")?.unwrap_or(2),
            r_init,
            t_r: f.uint("T_r")?.unwrap_or((r_init / 4).max(1).min(r_init)),
            t_h: f.float("T_h")?.unwrap_or(0.5),
            t_w: f.uint("t_w")?.unwrap_or(5),
            t_f: f.uint("t_f")?.unwrap_or(total_rounds / 2),
            total_rounds,
            num_clients: f.uint("num_clients")?.unwrap_or(100),
            clients_per_round: f.uint("clients_per_round")?.unwrap_or(10),
            partition,
            partition_alpha: f.float("partition_alpha")?.unwrap_or(0.1),
            labels_per_client: f.uint("labels_per_client")?.unwrap_or(2),
            lr: f.float("lr")?.unwrap_or(DEFAULT_LR),
            batch_size: f.uint("batch_size")?.unwrap_or(4),
            epochs_per_round: f.uint("epochs_per_round")?.unwrap_or(1),
            seed,
            data,
            n: f.uint("n")?.unwrap_or(5000),
            margin: f.float("margin")?.unwrap_or(3.0),
            output: f.raw("output").map_or_else(|| PathBuf::from("out"), |v| PathBuf::from(&v.text)),
            alpha_scale: f.float("alpha_scale")?.unwrap_or(16.0),
            init_std: f.float("init_std")?.unwrap_or(0.02),
            pretrain_epochs: f.uint("pretrain_epochs")?.unwrap_or(5),
            module_pruning,
            eval_site: f.uint("eval_site")?.unwrap_or(2),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("constraint violated: {m}")));
        if self.blocks != 2 {
            return fail("blocks = 2 (the only supported depth)");
        }
        if self.classes < 2 {
            return fail("classes >= 2");
        }
        if self.d < self.classes {
            return fail("d >= classes");
        }
        if self.r_init == 0 {
            return fail("r_init >= 1");
        }
        if 2 * self.r_init > self.d {
            return fail("2 * r_init <= d");
        }
        if self.t_r > self.r_init {
            return fail("T_r <= r_init");
        }
        if !(0.0..1.0).contains(&self.t_h) {
            return fail("0 <= T_h < 1");
        }
        if self.total_rounds == 0 {
            return fail("T >= 1");
        }
        if self.t_w + self.t_f >= self.total_rounds {
            return fail("t_w + t_f < T");
        }
        if self.num_clients == 0 || self.clients_per_round == 0 {
            return fail("num_clients >= 1 and clients_per_round >= 1");
        }
        if self.clients_per_round > self.num_clients {
            return fail("clients_per_round <= num_clients");
        }
        if self.partition_alpha <= 0.0 {
            return fail("partition_alpha > 0");
        }
        if self.labels_per_client == 0 || self.labels_per_client > self.classes {
            return fail("1 <= labels_per_client <= classes");
        }
        if self.lr <= 0.0 {
            return fail("lr > 0");
        }
        if self.batch_size == 0 || self.epochs_per_round == 0 {
            return fail("batch_size >= 1 and epochs_per_round >= 1");
        }
        if self.n < 10 {
            return fail("n >= 10");
        }
        if self.margin < 0.0 {
            return fail("margin >= 0");
        }
        if self.alpha_scale <= 0.0 || self.init_std <= 0.0 {
            return fail("alpha_scale > 0 and init_std > 0");
        }
        if self.eval_site >= SITES {
            return fail("eval_site < 4");
        }
        if self.output.as_os_str().is_empty() || self.output.to_string_lossy().contains('"') {
            return fail("output is a non-empty path without double quotes");
        }
        if let DataSource::Csv(p) = &self.data {
            if p.as_os_str().is_empty() || p.to_string_lossy().contains('"') {
                return fail("data path is non-empty and has no double quotes");
            }
        }
        Ok(())
    }

    /// Serializes every key, so that [`ExperimentConfig::parse`] returns an
    /// equal config.
    pub fn to_text(&self) -> String {
        let data = match &self.data {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Csv(p) => format!("\"{}\"", p.display()),
        };
        let lines = [
            ("method", self.method.name().to_string()),
            ("d", self.d.to_string()),
            ("classes", self.classes.to_string()),
            ("blocks", self.blocks.to_string()),
            ("r_init", self.r_init.to_string()),
            ("T_r", self.t_r.to_string()),
            ("T_h", self.t_h.to_string()),
            ("t_w", self.t_w.to_string()),
            ("t_f", self.t_f.to_string()),
            ("T", self.total_rounds.to_string()),
            ("num_clients", self.num_clients.to_string()),
            ("clients_per_round", self.clients_per_round.to_string()),
            ("partition", self.partition.name().to_string()),
            ("partition_alpha", self.partition_alpha.to_string()),
            ("labels_per_client", self.labels_per_client.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs_per_round", self.epochs_per_round.to_string()),
            ("seed", self.seed.to_string()),
            ("data", data),
            ("n", self.n.to_string()),
            ("margin", self.margin.to_string()),
            ("output", format!("\"{}\"", self.output.display())),
            ("alpha_scale", self.alpha_scale.to_string()),
            ("init_std", self.init_std.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("module_pruning", self.module_pruning.to_string()),
            ("eval_site", self.eval_site.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn schedule(&self) -> Result<BudgetSchedule> {
        BudgetSchedule::new(
            self.r_init * SITES,
            self.t_r * SITES,
            self.t_w,
            self.t_f,
            self.total_rounds,
        )
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            alpha: self.alpha_scale,
            init_std: self.init_std,
            ..AdapterConfig::new(self.method.flavor(), self.r_init)
        }
    }

    pub fn train_config(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.epochs_per_round,
            batch_size: self.batch_size,
        }
    }

    pub fn partition_spec(&self, seed: u64) -> PartitionSpec {
        let scheme = match self.partition {
            PartitionKind::Dirichlet => Scheme::Dirichlet {
                alpha: self.partition_alpha,
            },
            PartitionKind::Pathological => Scheme::Pathological {
                labels_per_client: self.labels_per_client,
            },
            PartitionKind::Iid => Scheme::Iid,
        };
        PartitionSpec {
            scheme,
            num_clients: self.num_clients,
            seed,
        }
    }
}

/// Adam learning rate used when `lr` is omitted.
pub const DEFAULT_LR: f64 = 2e-2;

const DRIFT_KEYS: &[&str] = &[
    "d", "r_values", "tau_b", "rho_b", "tau_a", "rho_a", "tau_e", "trials", "seed", "output",
];

/// Parameters of the `drift` subcommand. Every key is optional.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftConfig {
    pub params: DriftParams,
    pub output: PathBuf,
}

impl DriftConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let f = Fields(parse_pairs(text, DRIFT_KEYS)?);
        let defaults = DriftParams::default();
        let r_values = match f.raw("r_values") {
            None => defaults.r_values.clone(),
            Some(v) => v
                .text
                .split(',')
                .map(|s| {
                    s.trim().parse::<usize>().map_err(|_| {
                        Error::Config(format!("`r_values` must be a comma-separated list of integers, got {:?}", v.text))
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let params = DriftParams {
            d: f.uint("d")?.unwrap_or(defaults.d),
            r_values,
            tau_b: f.float("tau_b")?.unwrap_or(defaults.tau_b),
            rho_b: f.float("rho_b")?.unwrap_or(defaults.rho_b),
            tau_a: f.float("tau_a")?.unwrap_or(defaults.tau_a),
            rho_a: f.float("rho_a")?.unwrap_or(defaults.rho_a),
            tau_e: f.float("tau_e")?.unwrap_or(defaults.tau_e),
            trials: f.uint("trials")?.unwrap_or(defaults.trials),
            seed: f.parse("seed", "a non-negative integer")?.unwrap_or(defaults.seed),
        };
        params.validate()?;
        let output = f.raw("output").map_or_else(|| PathBuf::from("out"), |v| PathBuf::from(&v.text));
        Ok(Self { params, output })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "method = fedara\nr_init = 8\nT = 100\nseed = 1\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.t_h, 0.5);
        assert_eq!(c.t_r, 2);
        assert_eq!(c.alpha_scale, 16.0);
        assert_eq!(c.t_w, 5);
        assert_eq!(c.t_f, 50);
        assert_eq!(c.clients_per_round, 10);
        assert_eq!(c.num_clients, 100);
        assert_eq!(c.data, DataSource::Synthetic);
        assert!(c.module_pruning);
    }

    #[test]
    fn rank_constraint_named() {
        let err = ExperimentConfig::parse("method = fedara\nT_r = 20\nr_init = 8\nT = 100\nseed = 1\nd = 64\n")
            .unwrap_err();
        assert!(err.to_string().contains("T_r <= r_init"), "{err}");
    }

    #[test]
    fn unknown_key_named() {
        let err = ExperimentConfig::parse(&format!("{MINIMAL}learning_rate = 0.1\n")).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn missing_required_key() {
        let err = ExperimentConfig::parse("method = fedara\nr_init = 8\nT = 100\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn bad_method_is_config_error() {
        let err = ExperimentConfig::parse("method = fedx\nr_init = 8\nT = 100\nseed = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn comments_and_quotes() {
        let text = "# header\nmethod = fedlora # trailing\nr_init = 4\nT = 20\nseed = 3\noutput = \"runs/a#b\"\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.method, Method::FedLora);
        assert_eq!(c.output, PathBuf::from("runs/a#b"));
        assert_eq!(c.t_r, 1);
    }

    #[test]
    fn malformed_line_reports_line() {
        match ExperimentConfig::parse("method = fedara\nr_init 8\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let text = "method = fedsvd\nr_init = 4\nT = 30\nseed = 9\nlr = 0.0123\nT_h = 0.3\n\
                    partition = pathological\nlabels_per_client = 1\ndata = \"x/y.csv\"\nmodule_pruning = false\n";
        let c = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn schedule_from_config() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        let s = c.schedule().unwrap();
        assert_eq!((s.b0, s.b_final, s.t_warmup, s.t_final, s.total_rounds), (32, 8, 5, 50, 100));
        assert_eq!(s.budget(28), 10);
    }

    #[test]
    fn drift_defaults_and_list() {
        let c = DriftConfig::parse("").unwrap();
        assert_eq!(c.params, DriftParams::default());
        let c = DriftConfig::parse("r_values = 1, 3,5\ntrials = 100\n").unwrap();
        assert_eq!(c.params.r_values, vec![1, 3, 5]);
        assert!(matches!(DriftConfig::parse("trials = 50\n"), Err(Error::Config(_))));
    }
}
