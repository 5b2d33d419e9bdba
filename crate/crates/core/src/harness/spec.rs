//! Experiment configuration (TOML) and its digest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ClassMap, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_THETA;
use crate::model::{resnet50_extractor, segmentation_head, ArchitectureSpec, GroupRule, STUDENT_GROUP_RULE};
use crate::optim::Stage;
use crate::train::{Method, PipelineConfig, StageConfig};

/// Where the domains come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic(SyntheticConfig),
    /// Directories in the `images/` + `labels/` layout.
    Directory {
        target: PathBuf,
        validation: PathBuf,
        #[serde(default)]
        proximity: Option<PathBuf>,
        /// Needed only when the teacher is pretrained here.
        #[serde(default)]
        source: Option<PathBuf>,
        #[serde(default)]
        class_map: ClassMap,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic(SyntheticConfig::default())
    }
}

/// Network sizes. Full size is `scale = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchitectureConfig {
    pub scale: f64,
    pub n_classes: usize,
    /// Decoder width before scaling.
    pub head_width: usize,
    pub teacher_rule: GroupRule,
    pub student_rule: GroupRule,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            scale: 1.0 / 16.0,
            n_classes: 2,
            head_width: 512,
            teacher_rule: GroupRule::None,
            student_rule: STUDENT_GROUP_RULE,
        }
    }
}

impl ArchitectureConfig {
    pub fn teacher_extractor(&self) -> ArchitectureSpec {
        resnet50_extractor(self.teacher_rule).scaled(self.scale)
    }

    pub fn teacher_head(&self) -> ArchitectureSpec {
        segmentation_head(2048, self.head_width, self.n_classes, self.teacher_rule).scaled(self.scale)
    }

    /// Decoder shared by the student and the constructed teacher.
    pub fn student_head(&self) -> ArchitectureSpec {
        segmentation_head(2048, self.head_width, self.n_classes, self.student_rule).scaled(self.scale)
    }
}

/// Teacher source: a checkpoint, or pretraining on the source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub checkpoint: Option<PathBuf>,
    pub pretrain: StageConfig,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { checkpoint: None, pretrain: StageConfig::default_for(Stage::Normal), seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub theta: f64,
    pub include_background: bool,
    /// Max-pool factor applied to full validation images.
    pub eval_pool: usize,
    pub output_dir: PathBuf,
    pub data: DataSpec,
    pub architecture: ArchitectureConfig,
    pub teacher: TeacherConfig,
    pub pipeline: PipelineConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            methods: vec![Method::Normal, Method::Sd, Method::Esd(0.5)],
            seeds: vec![0],
            theta: DEFAULT_THETA,
            include_background: true,
            eval_pool: 2,
            output_dir: PathBuf::from("runs"),
            data: DataSpec::default(),
            architecture: ArchitectureConfig::default(),
            teacher: TeacherConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text` over the defaults, applies `key.path=value` overrides,
    /// then validates. Tables merge key by key, so a partial stage section
    /// keeps that stage's default optimizer.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut value = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut value, user);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let spec: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("`methods` must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must not be empty".into()));
        }
        for m in &self.methods {
            m.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        if self.eval_pool == 0 {
            return Err(Error::Config("eval_pool must be at least 1".into()));
        }
        if !(self.architecture.scale > 0.0) {
            return Err(Error::Config("architecture.scale must be positive".into()));
        }
        let p = &self.pipeline;
        for c in [&p.distill, &p.frozen, &p.finetune, &p.normal, &self.teacher.pretrain] {
            c.optimizer.validate().map_err(|e| Error::Config(e.to_string()))?;
            c.schedule.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let DataSpec::Synthetic(s) = &self.data {
            s.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        let needs_proximity = self.methods.iter().any(|m| matches!(m, Method::Esd(r) if r.is_finite()));
        if let DataSpec::Directory { proximity: None, .. } = &self.data {
            if needs_proximity {
                return Err(Error::Config("ESD methods need `data.proximity`".into()));
            }
        }
        Ok(())
    }

    /// Hash of everything that influences results. Output location, the
    /// method list and the seed list are left out so a cell keeps its
    /// digest when the matrix around it changes.
    pub fn digest(&self) -> String {
        let mut core = self.clone();
        core.output_dir = PathBuf::new();
        core.methods.clear();
        core.seeds.clear();
        core.name.clear();
        let json = serde_json::to_string(&core).expect("spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Digest of a single `(method, seed)` cell.
    pub fn cell_digest(&self, method: Method, seed: u64) -> String {
        let text = format!("{}|{method}|{seed}", self.digest());
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Digest of the teacher-producing part of the spec.
    pub fn teacher_digest(&self) -> String {
        #[derive(Serialize)]
        struct TeacherKey<'a> {
            data: &'a DataSpec,
            architecture: &'a ArchitectureConfig,
            teacher: &'a TeacherConfig,
            crop: usize,
            pool: usize,
        }
        let key = TeacherKey {
            data: &self.data,
            architecture: &self.architecture,
            teacher: &self.teacher,
            crop: self.pipeline.crop,
            pool: self.pipeline.pool,
        };
        hex::encode(Sha256::digest(serde_json::to_string(&key).expect("serializable").as_bytes()))
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        let kind_changed = |b: &toml::Table, o: &toml::Table| o.contains_key("kind") && b.get("kind") != o.get("kind");
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !kind_changed(b, &o) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as a TOML
/// literal when possible and used as a plain string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key `{path}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path `{path}` crosses a non-table value at `{k}`")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let spec = ExperimentSpec::default();
        let text = spec.to_toml().unwrap();
        let back = ExperimentSpec::from_toml_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn partial_config_and_overrides() {
        let text = "methods = [\"SD\", \"ESD(0.5)\"]\nseeds = [0, 1]\n[pipeline.frozen.schedule]\nmax_epochs = 3\n";
        let spec = ExperimentSpec::from_toml_with_overrides(
            text,
            &["theta=0.6".into(), "pipeline.frozen.optimizer.learning_rate=0.02".into(), "name=quick".into()],
        )
        .unwrap();
        assert_eq!(spec.methods, vec![Method::Sd, Method::Esd(0.5)]);
        assert_eq!(spec.pipeline.frozen.schedule.max_epochs, 3);
        assert_eq!(spec.pipeline.frozen.optimizer.learning_rate, 0.02);
        assert_eq!(spec.theta, 0.6);
        assert_eq!(spec.name, "quick");
    }

    #[test]
    fn directory_data_replaces_synthetic_defaults() {
        let text = "[data]\nkind = \"directory\"\ntarget = \"t\"\nvalidation = \"v\"\nproximity = \"p\"\n";
        let spec = ExperimentSpec::from_toml_str(text).unwrap();
        match spec.data {
            DataSpec::Directory { target, proximity, source, .. } => {
                assert_eq!(target, PathBuf::from("t"));
                assert_eq!(proximity, Some(PathBuf::from("p")));
                assert_eq!(source, None);
            }
            other => panic!("{other:?}"),
        }
        let no_prox = "[data]\nkind = \"directory\"\ntarget = \"t\"\nvalidation = \"v\"\n";
        assert!(ExperimentSpec::from_toml_str(no_prox).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentSpec::from_toml_str("methods = []").is_err());
        assert!(ExperimentSpec::from_toml_str("theta = 1.5").is_err());
        assert!(ExperimentSpec::from_toml_str("methods = [\"KD\"]").is_err());
        assert!(ExperimentSpec::from_toml_str("seeds = \"x\"").is_err());
    }

    #[test]
    fn digest_ignores_matrix_shape_but_not_hyperparameters() {
        let a = ExperimentSpec::default();
        let b = ExperimentSpec { seeds: vec![0, 1, 2], output_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.digest(), b.digest());
        let mut c = a.clone();
        c.pipeline.crop = 40;
        assert_ne!(a.digest(), c.digest());
        assert_ne!(a.cell_digest(Method::Sd, 0), a.cell_digest(Method::Sd, 1));
    }
}
