//! Robot and scene documents, and the catalog they form.
//!
//! Documents are TOML (see `catalog/FORMAT.md`). A scene's identity is the
//! SHA-256 of its *scene copy*: the canonical-form object
//! `{"robot": <robot doc>, "scene": <scene doc>}`, so reformatting or
//! re-commenting a file does not change it but any value change does.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use demoforge_core::codec::{self, ObjectBuilder};
use demoforge_core::sim::{ObjectSpec, Shape, Tracking};
use demoforge_core::{Aabb, JointConfig, JointKind, JointSpec, Pose, RobotModel, SceneSpec, TickRate, Vec3, World, WorldState};
use serde::Deserialize;
use serde_json::Value;

use crate::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum DocError {
    #[error("{origin}: {source}")]
    Parse { origin: String, source: toml::de::Error },
    #[error("{origin}: {source}")]
    Json { origin: String, source: serde_json::Error },
    #[error("{origin}: {msg}")]
    Invalid { origin: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl DocError {
    fn invalid(origin: &str, msg: impl std::fmt::Display) -> Self {
        DocError::Invalid { origin: origin.into(), msg: msg.to_string() }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseDoc {
    xyz: [f64; 3],
    #[serde(default)]
    rpy: [f64; 3],
}

impl PoseDoc {
    fn pose(self) -> Pose {
        Pose::from_xyz_rpy(self.xyz, self.rpy)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LimitDoc {
    lo: f64,
    hi: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDoc {
    name: String,
    kind: String,
    axis: [f64; 3],
    origin: Option<PoseDoc>,
    limit: LimitDoc,
    max_velocity: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RobotDoc {
    name: String,
    joints: Vec<JointDoc>,
    base_pose: Option<PoseDoc>,
    ee_offset: Option<PoseDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsDoc {
    min: [f64; 3],
    max: [f64; 3],
}

impl BoundsDoc {
    fn aabb(&self) -> Aabb {
        Aabb { min: Vec3::from_array(self.min), max: Vec3::from_array(self.max) }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackingDoc {
    max_ee_speed: Option<f64>,
    max_ee_angular_speed: Option<f64>,
    orientation_weight: Option<f64>,
    damping: Option<f64>,
    grasp_radius: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    id: String,
    shape: String,
    size: Option<[f64; 3]>,
    radius: Option<f64>,
    pose: PoseDoc,
    #[serde(default = "yes")]
    graspable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    name: String,
    robot: String,
    robot_initial: Vec<f64>,
    task_prompt: Option<String>,
    workspace_bounds: BoundsDoc,
    goal_region: Option<BoundsDoc>,
    tracking: Option<TrackingDoc>,
    #[serde(default)]
    objects: Vec<ObjectDoc>,
}

fn robot_from_doc(doc: RobotDoc, origin: &str) -> Result<RobotModel, DocError> {
    let joints = doc
        .joints
        .into_iter()
        .map(|j| {
            let kind = match j.kind.as_str() {
                "revolute" => JointKind::Revolute,
                "prismatic" => JointKind::Prismatic,
                other => return Err(DocError::invalid(origin, format!("joint `{}`: unknown kind `{other}`", j.name))),
            };
            Ok(JointSpec {
                name: j.name,
                kind,
                axis: Vec3::from_array(j.axis),
                origin: j.origin.map_or(Pose::IDENTITY, PoseDoc::pose),
                limit_lo: j.limit.lo,
                limit_hi: j.limit.hi,
                max_velocity: j.max_velocity,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    RobotModel::new(
        doc.name,
        joints,
        doc.base_pose.map_or(Pose::IDENTITY, PoseDoc::pose),
        doc.ee_offset.map_or(Pose::IDENTITY, PoseDoc::pose),
    )
    .map_err(|e| DocError::invalid(origin, e))
}

fn scene_from_doc(doc: SceneDoc, origin: &str) -> Result<SceneSpec, DocError> {
    let objects = doc
        .objects
        .into_iter()
        .map(|o| {
            let shape = match (o.shape.as_str(), o.size, o.radius) {
                ("box", Some(size), None) => Shape::Box { size: Vec3::from_array(size) },
                ("sphere", None, Some(radius)) => Shape::Sphere { radius },
                ("box", ..) => return Err(DocError::invalid(origin, format!("object `{}`: box needs `size` only", o.id))),
                ("sphere", ..) => {
                    return Err(DocError::invalid(origin, format!("object `{}`: sphere needs `radius` only", o.id)))
                }
                (other, ..) => return Err(DocError::invalid(origin, format!("object `{}`: unknown shape `{other}`", o.id))),
            };
            Ok(ObjectSpec { id: o.id, shape, initial_pose: o.pose.pose(), graspable: o.graspable })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let t = doc.tracking.unwrap_or_default();
    let d = Tracking::default();
    Ok(SceneSpec {
        name: doc.name,
        robot: doc.robot,
        robot_initial: JointConfig(doc.robot_initial),
        objects,
        workspace_bounds: doc.workspace_bounds.aabb(),
        task_prompt: doc.task_prompt,
        goal_region: doc.goal_region.as_ref().map(BoundsDoc::aabb),
        tracking: Tracking {
            max_ee_speed: t.max_ee_speed.unwrap_or(d.max_ee_speed),
            max_ee_angular_speed: t.max_ee_angular_speed.unwrap_or(d.max_ee_angular_speed),
            orientation_weight: t.orientation_weight.unwrap_or(d.orientation_weight),
            damping: t.damping.unwrap_or(d.damping),
            grasp_radius: t.grasp_radius.unwrap_or(d.grasp_radius),
        },
    })
}

/// Parses TOML text into its document value (for digests) and typed form.
fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<(Value, T), DocError> {
    let parse = |source| DocError::Parse { origin: origin.into(), source };
    let typed: T = toml::from_str(text).map_err(parse)?;
    let table: toml::Table = toml::from_str(text).map_err(parse)?;
    let value = serde_json::to_value(table).map_err(|source| DocError::Json { origin: origin.into(), source })?;
    Ok((value, typed))
}

pub fn load_robot_model(text: &str, origin: &str) -> Result<RobotModel, DocError> {
    let (_, doc) = parse_toml::<RobotDoc>(text, origin)?;
    robot_from_doc(doc, origin)
}

#[derive(Debug, Clone)]
pub struct RobotEntry {
    pub model: RobotModel,
    doc: Value,
}

#[derive(Debug, Clone)]
pub struct SceneEntry {
    pub spec: SceneSpec,
    /// Canonical text of `{"robot": .., "scene": ..}`.
    pub copy: String,
    /// SHA-256 of `copy`, hex.
    pub digest: String,
    pub robot: RobotModel,
}

impl SceneEntry {
    pub fn world(&self) -> (World, WorldState) {
        World::with_model(self.spec.clone(), self.robot.clone(), TickRate::default()).expect("validated at load")
    }
}

/// Rebuilds a scene from a stored scene copy.
pub fn scene_from_copy(copy: &str) -> Result<SceneEntry, DocError> {
    let origin = "scene.copy";
    let mut obj = codec::parse_object(copy).map_err(|e| DocError::invalid(origin, e))?;
    let (Some(robot), Some(scene)) = (obj.remove("robot"), obj.remove("scene")) else {
        return Err(DocError::invalid(origin, "expected `robot` and `scene` keys"));
    };
    if !obj.is_empty() {
        return Err(DocError::invalid(origin, "unexpected keys"));
    }
    let json = |source| DocError::Json { origin: origin.into(), source };
    let robot_doc: RobotDoc = serde_json::from_value(robot.clone()).map_err(json)?;
    let scene_doc: SceneDoc = serde_json::from_value(scene.clone()).map_err(json)?;
    let model = robot_from_doc(robot_doc, origin)?;
    let spec = scene_from_doc(scene_doc, origin)?;
    build_entry(spec, model, robot, scene, origin)
}

fn build_entry(spec: SceneSpec, model: RobotModel, robot_doc: Value, scene_doc: Value, origin: &str) -> Result<SceneEntry, DocError> {
    if spec.robot != model.name() {
        return Err(DocError::invalid(origin, format!("scene uses robot `{}`, got `{}`", spec.robot, model.name())));
    }
    World::with_model(spec.clone(), model.clone(), TickRate::default()).map_err(|e| DocError::invalid(origin, e))?;
    let copy = ObjectBuilder::new().set("robot", robot_doc).set("scene", scene_doc).encode();
    let digest = sha256_hex(copy.as_bytes());
    Ok(SceneEntry { spec, copy, digest, robot: model })
}

/// Named robots and scenes available to sessions and replay.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    robots: BTreeMap<String, RobotEntry>,
    scenes: BTreeMap<String, SceneEntry>,
}

const BUNDLED_ROBOTS: &[(&str, &str)] = &[
    ("planar2.toml", include_str!("../catalog/robots/planar2.toml")),
    ("planar3.toml", include_str!("../catalog/robots/planar3.toml")),
    ("arm7.toml", include_str!("../catalog/robots/arm7.toml")),
];

const BUNDLED_SCENES: &[(&str, &str)] = &[
    ("tabletop.toml", include_str!("../catalog/scenes/tabletop.toml")),
    ("reach2.toml", include_str!("../catalog/scenes/reach2.toml")),
    ("shelf.toml", include_str!("../catalog/scenes/shelf.toml")),
];

impl Catalog {
    pub fn bundled() -> Self {
        let robots: Vec<(String, String)> = BUNDLED_ROBOTS.iter().map(|(n, t)| (n.to_string(), t.to_string())).collect();
        let scenes: Vec<(String, String)> = BUNDLED_SCENES.iter().map(|(n, t)| (n.to_string(), t.to_string())).collect();
        Self::from_texts(&robots, &scenes).expect("bundled catalog is valid")
    }

    /// Loads `<dir>/robots/*.toml` and `<dir>/scenes/*.toml`.
    pub fn from_dir(dir: &Path) -> Result<Self, DocError> {
        let read = |sub: &str| -> Result<Vec<(String, String)>, DocError> {
            let path = dir.join(sub);
            let io = |source| DocError::Io { path: path.clone(), source };
            let mut files: Vec<PathBuf> = fs::read_dir(&path)
                .map_err(io)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "toml"))
                .collect();
            files.sort();
            files
                .into_iter()
                .map(|p| {
                    let text = fs::read_to_string(&p).map_err(|source| DocError::Io { path: p.clone(), source })?;
                    Ok((p.display().to_string(), text))
                })
                .collect()
        };
        Self::from_texts(&read("robots")?, &read("scenes")?)
    }

    pub fn from_texts(robots: &[(String, String)], scenes: &[(String, String)]) -> Result<Self, DocError> {
        let mut cat = Catalog::default();
        for (origin, text) in robots {
            let (doc, typed) = parse_toml::<RobotDoc>(text, origin)?;
            let model = robot_from_doc(typed, origin)?;
            let name = model.name().to_string();
            if cat.robots.insert(name.clone(), RobotEntry { model, doc }).is_some() {
                return Err(DocError::invalid(origin, format!("duplicate robot `{name}`")));
            }
        }
        for (origin, text) in scenes {
            let (doc, typed) = parse_toml::<SceneDoc>(text, origin)?;
            let spec = scene_from_doc(typed, origin)?;
            let robot = cat
                .robots
                .get(&spec.robot)
                .ok_or_else(|| DocError::invalid(origin, format!("unknown robot `{}`", spec.robot)))?;
            let name = spec.name.clone();
            let entry = build_entry(spec, robot.model.clone(), robot.doc.clone(), doc, origin)?;
            if cat.scenes.insert(name.clone(), entry).is_some() {
                return Err(DocError::invalid(origin, format!("duplicate scene `{name}`")));
            }
        }
        Ok(cat)
    }

    pub fn robot(&self, name: &str) -> Option<&RobotModel> {
        self.robots.get(name).map(|r| &r.model)
    }

    pub fn robots(&self) -> impl Iterator<Item = &RobotModel> {
        self.robots.values().map(|r| &r.model)
    }

    pub fn scene(&self, name: &str) -> Option<&SceneEntry> {
        self.scenes.get(name)
    }

    pub fn scenes(&self) -> impl Iterator<Item = &SceneEntry> {
        self.scenes.values()
    }
}

/// Catalog entry as listed over HTTP and by `demoforge scenes`.
pub fn scene_summary(s: &SceneEntry) -> serde_json::Map<String, Value> {
    ObjectBuilder::new()
        .set("digest", s.digest.as_str())
        .set("name", s.spec.name.as_str())
        .set("objects", s.spec.objects.iter().map(|o| Value::from(o.id.as_str())).collect::<Vec<_>>())
        .set("robot", s.spec.robot.as_str())
        .set("task_prompt", s.spec.task_prompt.as_deref().map_or(Value::Null, Value::from))
        .build()
}

pub fn robot_summary(m: &RobotModel) -> serde_json::Map<String, Value> {
    let joints: Vec<Value> = m
        .joints()
        .iter()
        .map(|j| {
            let o = ObjectBuilder::new()
                .set("kind", j.kind.as_str())
                .set("limit", vec![Value::from(j.limit_lo), Value::from(j.limit_hi)])
                .set("name", j.name.as_str())
                .build();
            Value::Object(o)
        })
        .collect();
    ObjectBuilder::new().set("dof", m.dof()).set("joints", joints).set("name", m.name()).build()
}
