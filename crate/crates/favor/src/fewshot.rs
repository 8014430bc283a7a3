//! Labeled tasks, k-shot episode splits, prompts, and synthetic data.
//!
//! A task is a list of labeled instances over an ordered set of class
//! names. Instances carry a real-valued feature vector standing in for
//! the image. The manifest file format is one JSON object per line with
//! fields `id`, `class_index`, `class_name`, `features`, and optional
//! `source`; newline delimits records and JSON escaping covers the rest.
//! Features serialize as decimal JSON numbers, which round-trip `f64`
//! exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One classification item: the feature vector is the image stand-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: String,
    pub class_index: usize,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

/// One manifest line. `class_name` is carried per record so the file is
/// self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    class_index: usize,
    class_name: String,
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

/// A validated classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDefinition {
    class_names: Vec<String>,
    feature_dim: usize,
    instances: Vec<LabeledInstance>,
    by_id: HashMap<String, usize>,
}

impl TaskDefinition {
    /// Validates and builds a task. Class names must be unique, every
    /// `class_index` must reference a name, and at least two classes are
    /// required.
    pub fn new(class_names: Vec<String>, instances: Vec<LabeledInstance>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::Manifest(format!(
                "a task needs at least 2 classes, got {}",
                class_names.len()
            )));
        }
        {
            let mut seen = HashMap::new();
            for (i, name) in class_names.iter().enumerate() {
                if let Some(j) = seen.insert(name.clone(), i) {
                    return Err(Error::Manifest(format!(
                        "duplicate class name '{name}' at indices {j} and {i}"
                    )));
                }
            }
        }
        let feature_dim = match instances.first() {
            Some(inst) => inst.features.len(),
            None => {
                return Err(Error::Manifest("a task needs at least one instance".to_string()))
            }
        };
        let mut by_id = HashMap::new();
        for (i, inst) in instances.iter().enumerate() {
            if inst.class_index >= class_names.len() {
                return Err(Error::Manifest(format!(
                    "instance '{}': class_index {} out of range (C = {})",
                    inst.id,
                    inst.class_index,
                    class_names.len()
                )));
            }
            if inst.features.len() != feature_dim {
                return Err(Error::Manifest(format!(
                    "instance '{}': feature dimension {} differs from {}",
                    inst.id,
                    inst.features.len(),
                    feature_dim
                )));
            }
            if inst.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::Manifest(format!(
                    "instance '{}': non-finite feature value",
                    inst.id
                )));
            }
            if by_id.insert(inst.id.clone(), i).is_some() {
                return Err(Error::Manifest(format!("duplicate instance id '{}'", inst.id)));
            }
        }
        Ok(Self {
            class_names,
            feature_dim,
            instances,
            by_id,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn instance(&self, id: &str) -> Option<&LabeledInstance> {
        self.by_id.get(id).map(|&i| &self.instances[i])
    }

    /// Instance ids of one class, in manifest order.
    pub fn ids_of_class(&self, class_index: usize) -> Vec<&str> {
        self.instances
            .iter()
            .filter(|inst| inst.class_index == class_index)
            .map(|inst| inst.id.as_str())
            .collect()
    }
}

/// Loads and validates a manifest. Class indices seen in the file must
/// form a contiguous range starting at 0, each mapped to exactly one
/// name.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<TaskDefinition> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text).map_err(|e| match e {
        Error::Manifest(msg) => Error::Manifest(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_manifest(text: &str) -> Result<TaskDefinition> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Manifest(format!("line {}: {e}", lineno + 1)))?;
        records.push((lineno + 1, record));
    }
    if records.is_empty() {
        return Err(Error::Manifest("no records".to_string()));
    }

    let mut names_by_index: HashMap<usize, String> = HashMap::new();
    for (lineno, r) in &records {
        match names_by_index.get(&r.class_index) {
            Some(existing) if existing != &r.class_name => {
                return Err(Error::Manifest(format!(
                    "line {lineno}: class_index {} named '{}' conflicts with earlier name '{}'",
                    r.class_index, r.class_name, existing
                )));
            }
            None => {
                names_by_index.insert(r.class_index, r.class_name.clone());
            }
            _ => {}
        }
    }
    let num_classes = names_by_index.keys().max().unwrap() + 1;
    let mut class_names = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        match names_by_index.get(&c) {
            Some(name) => class_names.push(name.clone()),
            None => {
                return Err(Error::Manifest(format!(
                    "class_index {} appears but index {c} has no records \
                     ({} distinct class names for indices up to {})",
                    num_classes - 1,
                    names_by_index.len(),
                    num_classes - 1
                )))
            }
        }
    }

    let instances = records
        .into_iter()
        .map(|(_, r)| LabeledInstance {
            id: r.id,
            class_index: r.class_index,
            features: r.features,
            source: r.source,
        })
        .collect();
    TaskDefinition::new(class_names, instances)
}

/// Writes a task back to the manifest format.
pub fn save_manifest(task: &TaskDefinition, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for inst in task.instances() {
        let record = ManifestRecord {
            id: inst.id.clone(),
            class_index: inst.class_index,
            class_name: task.class_names()[inst.class_index].clone(),
            features: inst.features.clone(),
            source: inst.source.clone(),
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A k-shot train/test partition of a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSplit {
    pub k: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
    /// Classes that had at most k instances: all of them went to train
    /// and none to test. Callers may want to warn on these.
    pub short_classes: Vec<usize>,
}

/// Draws k instances per class uniformly without replacement into the
/// train set; everything else is the test set. Deterministic given
/// (task, k, seed).
pub fn split_few_shot(task: &TaskDefinition, k: usize, seed: u64) -> Result<EpisodeSplit> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    let mut short_classes = Vec::new();

    for c in 0..task.num_classes() {
        let ids = task.ids_of_class(c);
        if ids.is_empty() {
            return Err(Error::Contract(format!(
                "class {c} ('{}') has no instances",
                task.class_names()[c]
            )));
        }
        if ids.len() <= k {
            short_classes.push(c);
            train_ids.extend(ids.iter().map(|s| s.to_string()));
            continue;
        }
        let mut chosen = index::sample(&mut rng, ids.len(), k).into_vec();
        chosen.sort_unstable();
        let mut cursor = chosen.iter().peekable();
        for (i, id) in ids.iter().enumerate() {
            if cursor.peek() == Some(&&i) {
                cursor.next();
                train_ids.push(id.to_string());
            } else {
                test_ids.push(id.to_string());
            }
        }
    }
    Ok(EpisodeSplit {
        k,
        train_ids,
        test_ids,
        seed,
        short_classes,
    })
}

/// Builds the question prompt for one instance: an image placeholder
/// bound to the instance, the question, the enumerated option list in
/// class-index order, and the tagged-response instruction.
pub fn build_prompt(instance: &LabeledInstance, task: &TaskDefinition) -> String {
    let options = task
        .class_names()
        .iter()
        .enumerate()
        .map(|(i, name)| format!("{i}: {name}"))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        "<image:{id}> The person in the image is performing which of the following \
         activities? {options}. First output the thinking process in <think> </think> \
         tags and then output the final answer in <answer> </answer> tags. Output the \
         final answer in JSON format.",
        id = instance.id,
    )
}

/// Generates a synthetic task: one seeded Gaussian prototype per class,
/// instances are the prototype plus seeded noise of scale `noise_scale`.
pub fn generate_synthetic_task(
    num_classes: usize,
    n_per_class: usize,
    feature_dim: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<TaskDefinition> {
    if num_classes < 2 {
        return Err(Error::Contract(format!(
            "num_classes must be at least 2, got {num_classes}"
        )));
    }
    if n_per_class == 0 || feature_dim == 0 {
        return Err(Error::Contract(
            "n_per_class and feature_dim must be positive".to_string(),
        ));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::Contract(format!(
            "noise_scale must be a finite nonnegative real, got {noise_scale}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_names: Vec<String> = (0..num_classes).map(|c| format!("class_{c}")).collect();
    let mut instances = Vec::with_capacity(num_classes * n_per_class);
    for c in 0..num_classes {
        let prototype: Vec<f64> = (0..feature_dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        for j in 0..n_per_class {
            let features = if noise_scale == 0.0 {
                prototype.clone()
            } else {
                let noise = Normal::new(0.0, noise_scale).expect("valid stddev");
                prototype.iter().map(|&x| x + noise.sample(&mut rng)).collect()
            };
            instances.push(LabeledInstance {
                id: format!("c{c}_{j:03}"),
                class_index: c,
                features,
                source: None,
            });
        }
    }
    TaskDefinition::new(class_names, instances)
}
