//! The experiment configuration engine: one YAML file declares the model,
//! the train/val dataloaders with their transform chains, the trainer
//! settings, and the callback list. Parsing is strict — the four top-level
//! sections must all be present, nothing else is accepted, and component
//! parameters are validated by the factory that consumes them.

pub mod experiment;
pub mod params;
pub mod registry;

pub use params::{ComponentSpec, ParamError, ParamReader, ParamValue};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigTree {
    pub model: ComponentSpec,
    pub dataloaders: Dataloaders,
    pub trainer: TrainerSpec,
    pub callbacks: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataloaders {
    pub train: LoaderSpec,
    pub val: LoaderSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoaderSpec {
    pub dataset: ComponentSpec,
    pub transforms: Vec<ComponentSpec>,
    pub batch_size: usize,
    pub shuffle: bool,
    pub split: SplitChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Val,
    All,
}

impl SplitChoice {
    fn as_str(self) -> &'static str {
        match self {
            SplitChoice::Train => "train",
            SplitChoice::Val => "val",
            SplitChoice::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accelerator {
    Cpu,
    Gpu,
    Auto,
}

impl Accelerator {
    fn as_str(self) -> &'static str {
        match self {
            Accelerator::Cpu => "cpu",
            Accelerator::Gpu => "gpu",
            Accelerator::Auto => "auto",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerSpec {
    pub max_steps: u64,
    pub val_check_interval: u64,
    pub accelerator: Accelerator,
    pub seed: u64,
    pub log_dir: String,
    pub logger: Option<ComponentSpec>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax error at line {line}, column {column}: {msg}")]
    Syntax { line: usize, column: usize, msg: String },
    #[error("config schema error: {}", problems.join("; "))]
    Schema { problems: Vec<String> },
}

const SECTION_NAMES: [&str; 4] = ["model", "dataloaders", "trainer", "callbacks"];
const TRAINER_ALIAS: &str = "lightning";

/// Parse and validate an experiment config. The file must contain exactly
/// the sections `model`, `dataloaders`, `trainer` (alias `lightning`) and
/// `callbacks`; every unknown or missing key is collected into one
/// [`ConfigError::Schema`].
pub fn parse_config(text: &str) -> Result<ConfigTree, ConfigError> {
    let value: serde_yaml::Value = serde_yaml::from_str(text).map_err(|e| {
        let loc = e.location();
        ConfigError::Syntax {
            line: loc.as_ref().map_or(0, |l| l.line()),
            column: loc.as_ref().map_or(0, |l| l.column()),
            msg: e.to_string(),
        }
    })?;

    let mut problems = Vec::new();
    let root = match value.as_mapping() {
        Some(m) => m,
        None => {
            return Err(ConfigError::Schema {
                problems: vec!["top level must be a mapping of sections".into()],
            })
        }
    };

    let mut model_v = None;
    let mut dataloaders_v = None;
    let mut trainer_v: Option<(&str, &serde_yaml::Value)> = None;
    let mut callbacks_v = None;
    for (key, val) in root {
        let Some(key) = key.as_str() else {
            problems.push(format!("non-string top-level key {key:?}"));
            continue;
        };
        match key {
            "model" => model_v = Some(val),
            "dataloaders" => dataloaders_v = Some(val),
            "trainer" | "lightning" => match trainer_v {
                None => trainer_v = Some((key, val)),
                Some((first, _)) => {
                    problems.push(format!("sections {first:?} and {key:?} both configure the trainer"))
                }
            },
            "callbacks" => callbacks_v = Some(val),
            other => problems.push(format!("unknown top-level section {other:?}")),
        }
    }
    for (name, present) in [
        ("model", model_v.is_some()),
        ("dataloaders", dataloaders_v.is_some()),
        ("trainer", trainer_v.is_some()),
        ("callbacks", callbacks_v.is_some()),
    ] {
        if !present {
            problems.push(format!("missing section {name:?}"));
        }
    }
    if !problems.is_empty() {
        return Err(ConfigError::Schema { problems });
    }

    let model = component_spec(model_v.unwrap(), "model", &mut problems);
    let dataloaders = parse_dataloaders(dataloaders_v.unwrap(), &mut problems);
    let trainer = parse_trainer(trainer_v.unwrap().1, &mut problems);
    let callbacks = parse_callback_list(callbacks_v.unwrap(), &mut problems);

    if !problems.is_empty() {
        return Err(ConfigError::Schema { problems });
    }
    Ok(ConfigTree {
        model: model.unwrap(),
        dataloaders: dataloaders.unwrap(),
        trainer: trainer.unwrap(),
        callbacks: callbacks.unwrap(),
    })
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn param_value(value: &serde_yaml::Value, at: &str, problems: &mut Vec<String>) -> ParamValue {
    match value {
        serde_yaml::Value::Bool(b) => ParamValue::Bool(*b),
        serde_yaml::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                ParamValue::Int(i)
            } else {
                ParamValue::Float(n.as_f64().unwrap_or(f64::NAN))
            }
        }
        serde_yaml::Value::String(s) => ParamValue::Str(s.clone()),
        serde_yaml::Value::Sequence(items) => ParamValue::List(
            items.iter().map(|v| param_value(v, at, problems)).collect(),
        ),
        serde_yaml::Value::Mapping(m) => {
            let mut entries = Vec::new();
            for (k, v) in m {
                match k.as_str() {
                    Some(k) if is_identifier(k) => {
                        entries.push((k.to_string(), param_value(v, at, problems)))
                    }
                    Some(k) => problems.push(format!("{at}: key {k:?} is not a valid identifier")),
                    None => problems.push(format!("{at}: non-string key {k:?}")),
                }
            }
            ParamValue::Map(entries)
        }
        serde_yaml::Value::Null => {
            problems.push(format!("{at}: null values are not allowed"));
            ParamValue::Bool(false)
        }
        serde_yaml::Value::Tagged(_) => {
            problems.push(format!("{at}: YAML tags are not allowed"));
            ParamValue::Bool(false)
        }
    }
}

fn component_spec(
    value: &serde_yaml::Value,
    at: &str,
    problems: &mut Vec<String>,
) -> Option<ComponentSpec> {
    let Some(mapping) = value.as_mapping() else {
        problems.push(format!("{at}: expected a mapping with a \"type\" key"));
        return None;
    };
    let mut type_name = None;
    let mut params = Vec::new();
    for (k, v) in mapping {
        let Some(key) = k.as_str() else {
            problems.push(format!("{at}: non-string key {k:?}"));
            continue;
        };
        if key == "type" {
            match v.as_str() {
                Some(t) if !t.is_empty() => type_name = Some(t.to_string()),
                _ => problems.push(format!("{at}: \"type\" must be a non-empty string")),
            }
        } else if is_identifier(key) {
            params.push((key.to_string(), param_value(v, &format!("{at}.{key}"), problems)));
        } else {
            problems.push(format!("{at}: key {key:?} is not a valid identifier"));
        }
    }
    let type_name = match type_name {
        Some(t) => t,
        None => {
            problems.push(format!("{at}: missing \"type\""));
            return None;
        }
    };
    Some(ComponentSpec { type_name, params })
}

fn parse_dataloaders(value: &serde_yaml::Value, problems: &mut Vec<String>) -> Option<Dataloaders> {
    let Some(mapping) = value.as_mapping() else {
        problems.push("dataloaders: expected a mapping with train and val".into());
        return None;
    };
    let mut train = None;
    let mut val = None;
    for (k, v) in mapping {
        match k.as_str() {
            Some("train") => train = parse_loader(v, "dataloaders.train", SplitChoice::Train, problems),
            Some("val") => val = parse_loader(v, "dataloaders.val", SplitChoice::Val, problems),
            Some(other) => problems.push(format!("dataloaders: unknown key {other:?}")),
            None => problems.push(format!("dataloaders: non-string key {k:?}")),
        }
    }
    if train.is_none() && !problems.iter().any(|p| p.starts_with("dataloaders.train")) {
        problems.push("dataloaders: missing \"train\"".into());
    }
    if val.is_none() && !problems.iter().any(|p| p.starts_with("dataloaders.val")) {
        problems.push("dataloaders: missing \"val\"".into());
    }
    Some(Dataloaders { train: train?, val: val? })
}

fn parse_loader(
    value: &serde_yaml::Value,
    at: &str,
    default_split: SplitChoice,
    problems: &mut Vec<String>,
) -> Option<LoaderSpec> {
    let Some(mapping) = value.as_mapping() else {
        problems.push(format!("{at}: expected a mapping"));
        return None;
    };
    let mut dataset = None;
    let mut transforms = Vec::new();
    let mut batch_size = 1usize;
    let mut shuffle = default_split == SplitChoice::Train;
    let mut split = default_split;
    for (k, v) in mapping {
        match k.as_str() {
            Some("dataset") => dataset = component_spec(v, &format!("{at}.dataset"), problems),
            Some("transforms") => match v.as_sequence() {
                Some(items) => {
                    for (i, item) in items.iter().enumerate() {
                        if let Some(spec) =
                            component_spec(item, &format!("{at}.transforms[{i}]"), problems)
                        {
                            transforms.push(spec);
                        }
                    }
                }
                None => problems.push(format!("{at}.transforms: expected a list")),
            },
            Some("batch_size") => match v.as_u64() {
                Some(n) if n >= 1 => batch_size = n as usize,
                _ => problems.push(format!("{at}.batch_size: must be an integer >= 1")),
            },
            Some("shuffle") => match v.as_bool() {
                Some(b) => shuffle = b,
                None => problems.push(format!("{at}.shuffle: must be a bool")),
            },
            Some("split") => match v.as_str() {
                Some("train") => split = SplitChoice::Train,
                Some("val") => split = SplitChoice::Val,
                Some("all") => split = SplitChoice::All,
                _ => problems.push(format!("{at}.split: must be train, val, or all")),
            },
            Some(other) => problems.push(format!("{at}: unknown key {other:?}")),
            None => problems.push(format!("{at}: non-string key {k:?}")),
        }
    }
    if dataset.is_none() {
        problems.push(format!("{at}: missing \"dataset\""));
    }
    Some(LoaderSpec { dataset: dataset?, transforms, batch_size, shuffle, split })
}

fn parse_trainer(value: &serde_yaml::Value, problems: &mut Vec<String>) -> Option<TrainerSpec> {
    let Some(mapping) = value.as_mapping() else {
        problems.push("trainer: expected a mapping".into());
        return None;
    };
    let mut max_steps = None;
    let mut val_check_interval = None;
    let mut accelerator = Accelerator::Cpu;
    let mut seed: u64 = 0;
    let mut log_dir = "logs".to_string();
    let mut logger = None;
    for (k, v) in mapping {
        match k.as_str() {
            Some("max_steps") => match v.as_u64() {
                Some(n) if n >= 1 => max_steps = Some(n),
                _ => problems.push("trainer.max_steps: must be an integer >= 1".into()),
            },
            Some("val_check_interval") => match v.as_u64() {
                Some(n) if n >= 1 => val_check_interval = Some(n),
                _ => problems.push("trainer.val_check_interval: must be an integer >= 1".into()),
            },
            Some("accelerator") => match v.as_str() {
                Some("cpu") => accelerator = Accelerator::Cpu,
                Some("gpu") => accelerator = Accelerator::Gpu,
                Some("auto") => accelerator = Accelerator::Auto,
                _ => problems.push("trainer.accelerator: must be cpu, gpu, or auto".into()),
            },
            Some("seed") => match v.as_i64() {
                Some(n) => seed = n as u64,
                None => problems.push("trainer.seed: must be an integer".into()),
            },
            Some("log_dir") => match v.as_str() {
                Some(s) => log_dir = s.to_string(),
                None => problems.push("trainer.log_dir: must be a string".into()),
            },
            Some("logger") => logger = component_spec(v, "trainer.logger", problems),
            Some(other) => problems.push(format!("trainer: unknown key {other:?}")),
            None => problems.push(format!("trainer: non-string key {k:?}")),
        }
    }
    let max_steps = match max_steps {
        Some(n) => n,
        None => {
            problems.push("trainer: missing \"max_steps\"".into());
            return None;
        }
    };
    let val_check_interval = val_check_interval.unwrap_or(max_steps);
    if val_check_interval > max_steps {
        problems.push(format!(
            "trainer.val_check_interval: {val_check_interval} exceeds max_steps {max_steps}"
        ));
    }
    Some(TrainerSpec { max_steps, val_check_interval, accelerator, seed, log_dir, logger })
}

fn parse_callback_list(
    value: &serde_yaml::Value,
    problems: &mut Vec<String>,
) -> Option<Vec<ComponentSpec>> {
    let Some(items) = value.as_sequence() else {
        problems.push("callbacks: expected a list".into());
        return None;
    };
    let mut specs = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if let Some(spec) = component_spec(item, &format!("callbacks[{i}]"), problems) {
            specs.push(spec);
        }
    }
    Some(specs)
}

// --- serialization back to YAML ---------------------------------------

fn param_to_yaml(value: &ParamValue) -> serde_yaml::Value {
    use serde_yaml::Value;
    match value {
        ParamValue::Bool(b) => Value::Bool(*b),
        ParamValue::Int(i) => Value::Number((*i).into()),
        ParamValue::Float(f) => Value::Number((*f).into()),
        ParamValue::Str(s) => Value::String(s.clone()),
        ParamValue::List(items) => Value::Sequence(items.iter().map(param_to_yaml).collect()),
        ParamValue::Map(entries) => {
            let mut m = serde_yaml::Mapping::new();
            for (k, v) in entries {
                m.insert(Value::String(k.clone()), param_to_yaml(v));
            }
            Value::Mapping(m)
        }
    }
}

fn spec_to_yaml(spec: &ComponentSpec) -> serde_yaml::Value {
    let mut m = serde_yaml::Mapping::new();
    m.insert("type".into(), spec.type_name.clone().into());
    for (k, v) in &spec.params {
        m.insert(serde_yaml::Value::String(k.clone()), param_to_yaml(v));
    }
    serde_yaml::Value::Mapping(m)
}

fn loader_to_yaml(loader: &LoaderSpec) -> serde_yaml::Value {
    let mut m = serde_yaml::Mapping::new();
    m.insert("dataset".into(), spec_to_yaml(&loader.dataset));
    m.insert(
        "transforms".into(),
        serde_yaml::Value::Sequence(loader.transforms.iter().map(spec_to_yaml).collect()),
    );
    m.insert("batch_size".into(), (loader.batch_size as u64).into());
    m.insert("shuffle".into(), loader.shuffle.into());
    m.insert("split".into(), loader.split.as_str().into());
    serde_yaml::Value::Mapping(m)
}

impl ConfigTree {
    /// Emit canonical YAML that [`parse_config`] reads back into an equal tree.
    pub fn to_yaml_string(&self) -> String {
        let mut root = serde_yaml::Mapping::new();
        root.insert("model".into(), spec_to_yaml(&self.model));
        let mut loaders = serde_yaml::Mapping::new();
        loaders.insert("train".into(), loader_to_yaml(&self.dataloaders.train));
        loaders.insert("val".into(), loader_to_yaml(&self.dataloaders.val));
        root.insert("dataloaders".into(), serde_yaml::Value::Mapping(loaders));
        let mut trainer = serde_yaml::Mapping::new();
        trainer.insert("max_steps".into(), self.trainer.max_steps.into());
        trainer.insert("val_check_interval".into(), self.trainer.val_check_interval.into());
        trainer.insert("accelerator".into(), self.trainer.accelerator.as_str().into());
        trainer.insert("seed".into(), (self.trainer.seed as i64).into());
        trainer.insert("log_dir".into(), self.trainer.log_dir.clone().into());
        if let Some(logger) = &self.trainer.logger {
            trainer.insert("logger".into(), spec_to_yaml(logger));
        }
        root.insert("trainer".into(), serde_yaml::Value::Mapping(trainer));
        root.insert(
            "callbacks".into(),
            serde_yaml::Value::Sequence(self.callbacks.iter().map(spec_to_yaml).collect()),
        );
        serde_yaml::to_string(&serde_yaml::Value::Mapping(root))
            .expect("config serialization cannot fail")
    }
}
