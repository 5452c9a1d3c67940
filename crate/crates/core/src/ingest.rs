//! URDF-subset parsing, the linkage-geometry sidecar, and binding the two together.
//!
//! URDF describes the serial ankle (a pitch joint followed by a roll joint) but cannot carry
//! the closed linkage behind it, so the linkage lives in a separate JSON file.
//!
//! Accepted subset: `robot`, `link`, `joint` (`revolute` or `fixed`) and the joint children
//! `origin`, `axis`, `limit`, `parent`, `child`. Unknown elements are skipped. Unknown
//! attributes on known elements are rejected.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::Vector3;
use roxmltree::{Document, Node};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{basic_rotation, validate_geometry, AnkleGeometry, Axis, GeometryConfig};

/// Axis tolerance used by [`bind_ankle`].
pub const AXIS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Link {
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Revolute,
    Fixed,
}

impl JointType {
    fn as_str(self) -> &'static str {
        match self {
            JointType::Revolute => "revolute",
            JointType::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Origin {
    pub xyz: [f64; 3],
    /// Fixed-axis roll, pitch, yaw.
    pub rpy: [f64; 3],
}

impl Origin {
    /// `R_z(yaw) R_y(pitch) R_x(roll)`.
    pub fn rotation(&self) -> nalgebra::Matrix3<f64> {
        let [r, p, y] = self.rpy;
        let (sy, cy) = y.sin_cos();
        let yaw = nalgebra::Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
        yaw * basic_rotation(Axis::Y, p) * basic_rotation(Axis::X, r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointLimit {
    pub lower: f64,
    pub upper: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effort: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub velocity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Joint {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: JointType,
    pub parent: String,
    pub child: String,
    pub origin: Origin,
    /// Unit axis in the joint frame.
    pub axis: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<JointLimit>,
}

/// Linkage geometry attached to a pitch/roll joint pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnkleBinding {
    pub pitch_joint: String,
    pub roll_joint: String,
    pub geometry: GeometryConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobotModel {
    pub name: String,
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    pub ankle_bindings: Vec<AnkleBinding>,
}

impl RobotModel {
    pub fn joint(&self, name: &str) -> Option<&Joint> {
        self.joints.iter().find(|j| j.name == name)
    }

    /// Same links and joints, ignoring bindings.
    pub fn same_structure(&self, other: &RobotModel) -> bool {
        self.name == other.name && self.links == other.links && self.joints == other.joints
    }
}

fn check_attributes(node: Node, allowed: &[&str]) -> Result<()> {
    for attr in node.attributes() {
        if attr.namespace().is_some() || !allowed.contains(&attr.name()) {
            return Err(Error::Schema(format!(
                "unknown attribute '{}' on <{}> (line {})",
                attr.name(),
                node.tag_name().name(),
                line_of(node)
            )));
        }
    }
    Ok(())
}

fn line_of(node: Node) -> u32 {
    node.document().text_pos_at(node.range().start).row
}

fn required<'a>(node: Node<'a, '_>, attr: &str) -> Result<&'a str> {
    node.attribute(attr).ok_or_else(|| {
        Error::Schema(format!(
            "<{}> at line {} is missing required attribute '{attr}'",
            node.tag_name().name(),
            line_of(node)
        ))
    })
}

fn number(node: Node, attr: &str, text: &str) -> Result<f64> {
    text.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
        Error::Schema(format!(
            "attribute '{attr}' of <{}> at line {} is not a finite number: '{text}'",
            node.tag_name().name(),
            line_of(node)
        ))
    })
}

fn triple(node: Node, attr: &str, default: [f64; 3]) -> Result<[f64; 3]> {
    let Some(text) = node.attribute(attr) else {
        return Ok(default);
    };
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Schema(format!(
            "attribute '{attr}' of <{}> at line {} needs three numbers, got '{text}'",
            node.tag_name().name(),
            line_of(node)
        )));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(parts) {
        *slot = number(node, attr, part)?;
    }
    Ok(out)
}

fn is_element(node: &Node, name: &str) -> bool {
    node.is_element() && node.tag_name().namespace().is_none() && node.tag_name().name() == name
}

fn parse_joint(node: Node) -> Result<Joint> {
    check_attributes(node, &["name", "type"])?;
    let name = required(node, "name")?.to_string();
    let kind = match required(node, "type")? {
        "revolute" => JointType::Revolute,
        "fixed" => JointType::Fixed,
        other => {
            return Err(Error::Schema(format!(
                "joint '{name}' has unsupported type '{other}' (expected revolute or fixed)"
            )))
        }
    };
    let mut parent = None;
    let mut child = None;
    let mut origin = Origin::default();
    let mut axis = [1.0, 0.0, 0.0];
    let mut limit = None;
    for c in node.children().filter(|c| c.is_element()) {
        if c.tag_name().namespace().is_some() {
            continue;
        }
        match c.tag_name().name() {
            "parent" => {
                check_attributes(c, &["link"])?;
                parent = Some(required(c, "link")?.to_string());
            }
            "child" => {
                check_attributes(c, &["link"])?;
                child = Some(required(c, "link")?.to_string());
            }
            "origin" => {
                check_attributes(c, &["xyz", "rpy"])?;
                origin = Origin {
                    xyz: triple(c, "xyz", [0.0; 3])?,
                    rpy: triple(c, "rpy", [0.0; 3])?,
                };
            }
            "axis" => {
                check_attributes(c, &["xyz"])?;
                let v = Vector3::from(triple(c, "xyz", [1.0, 0.0, 0.0])?);
                let n = v.norm();
                if n == 0.0 {
                    return Err(Error::Schema(format!("joint '{name}' has a zero axis")));
                }
                axis = if (n - 1.0).abs() > 1e-12 { (v / n).into() } else { v.into() };
            }
            "limit" => {
                check_attributes(c, &["lower", "upper", "effort", "velocity"])?;
                let get = |a: &str| c.attribute(a).map(|t| number(c, a, t)).transpose();
                limit = Some(JointLimit {
                    lower: get("lower")?.unwrap_or(0.0),
                    upper: get("upper")?.unwrap_or(0.0),
                    effort: get("effort")?,
                    velocity: get("velocity")?,
                });
            }
            _ => {}
        }
    }
    let missing = |what: &str| Error::Schema(format!("joint '{name}' has no <{what}> element"));
    let parent = parent.ok_or_else(|| missing("parent"))?;
    let child = child.ok_or_else(|| missing("child"))?;
    if kind == JointType::Revolute && limit.is_none() {
        return Err(missing("limit"));
    }
    Ok(Joint {
        name,
        kind,
        parent,
        child,
        origin,
        axis,
        limit,
    })
}

/// Parses the URDF subset into an open-chain model.
pub fn parse_urdf_subset(text: &str) -> Result<RobotModel> {
    let doc = Document::parse(text).map_err(|e| Error::Syntax(e.to_string()))?;
    let root = doc.root_element();
    if !is_element(&root, "robot") {
        return Err(Error::Schema(format!("root element is <{}>, expected <robot>", root.tag_name().name())));
    }
    check_attributes(root, &["name"])?;
    let name = required(root, "name")?.to_string();

    let mut links = Vec::new();
    let mut joints = Vec::new();
    for node in root.children().filter(|n| n.is_element()) {
        if is_element(&node, "link") {
            check_attributes(node, &["name"])?;
            links.push(Link {
                name: required(node, "name")?.to_string(),
            });
        } else if is_element(&node, "joint") {
            joints.push(parse_joint(node)?);
        }
    }
    check_tree(&links, &joints)?;
    Ok(RobotModel {
        name,
        links,
        joints,
        ankle_bindings: Vec::new(),
    })
}

fn check_tree(links: &[Link], joints: &[Joint]) -> Result<()> {
    let mut link_names = HashSet::new();
    for l in links {
        if !link_names.insert(l.name.as_str()) {
            return Err(Error::Schema(format!("duplicate link '{}'", l.name)));
        }
    }
    let mut joint_names = HashSet::new();
    let mut parent_of: HashMap<&str, &str> = HashMap::new();
    let mut joint_into: HashMap<&str, &str> = HashMap::new();
    for j in joints {
        if !joint_names.insert(j.name.as_str()) {
            return Err(Error::Schema(format!("duplicate joint '{}'", j.name)));
        }
        for link in [&j.parent, &j.child] {
            if !link_names.contains(link.as_str()) {
                return Err(Error::Schema(format!("joint '{}' references unknown link '{link}'", j.name)));
            }
        }
        if parent_of.insert(&j.child, &j.parent).is_some() {
            return Err(Error::Loop {
                joint: j.name.clone(),
                child: j.child.clone(),
            });
        }
        joint_into.insert(&j.child, &j.name);
    }
    // with unique children, a loop can only be a cycle of parents
    for start in parent_of.keys() {
        let mut seen = HashSet::new();
        let mut link = *start;
        while let Some(&p) = parent_of.get(link) {
            if !seen.insert(link) {
                return Err(Error::Loop {
                    joint: joint_into[link].to_string(),
                    child: link.to_string(),
                });
            }
            link = p;
        }
    }
    Ok(())
}

fn fmt3(v: &[f64; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

/// Writes the model back out in the accepted subset. Bindings are not part of URDF.
pub fn to_urdf(model: &RobotModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "<?xml version=\"1.0\"?>");
    let _ = writeln!(out, "<robot name=\"{}\">", escape(&model.name));
    for l in &model.links {
        let _ = writeln!(out, "  <link name=\"{}\"/>", escape(&l.name));
    }
    for j in &model.joints {
        let _ = writeln!(out, "  <joint name=\"{}\" type=\"{}\">", escape(&j.name), j.kind.as_str());
        let _ = writeln!(out, "    <parent link=\"{}\"/>", escape(&j.parent));
        let _ = writeln!(out, "    <child link=\"{}\"/>", escape(&j.child));
        let _ = writeln!(out, "    <origin xyz=\"{}\" rpy=\"{}\"/>", fmt3(&j.origin.xyz), fmt3(&j.origin.rpy));
        let _ = writeln!(out, "    <axis xyz=\"{}\"/>", fmt3(&j.axis));
        if let Some(l) = &j.limit {
            let mut attrs = format!("lower=\"{}\" upper=\"{}\"", l.lower, l.upper);
            if let Some(e) = l.effort {
                let _ = write!(attrs, " effort=\"{e}\"");
            }
            if let Some(v) = l.velocity {
                let _ = write!(attrs, " velocity=\"{v}\"");
            }
            let _ = writeln!(out, "    <limit {attrs}/>");
        }
        let _ = writeln!(out, "  </joint>");
    }
    let _ = writeln!(out, "</robot>");
    out
}

fn json_error(e: serde_json::Error) -> Error {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => Error::Schema(e.to_string()),
        Category::Syntax | Category::Eof | Category::Io => Error::Syntax(e.to_string()),
    }
}

/// Reads the JSON linkage description, resolves `L2 = "auto"`, and validates the workspace.
pub fn load_linkage_config(text: &str) -> Result<AnkleGeometry> {
    let cfg: GeometryConfig = serde_json::from_str(text).map_err(json_error)?;
    let geom = cfg.into_geometry();
    validate_geometry(&geom)?;
    Ok(geom)
}

fn check_axis(joint: &Joint, expected: Vector3<f64>, label: &str) -> Result<()> {
    if joint.kind != JointType::Revolute {
        return Err(Error::Bind(format!(
            "{label} joint '{}' is {}, not revolute",
            joint.name,
            joint.kind.as_str()
        )));
    }
    let axis = joint.origin.rotation() * Vector3::from(joint.axis);
    let dev = (axis - expected).amax();
    if dev > AXIS_TOLERANCE {
        return Err(Error::Bind(format!(
            "{label} joint '{}' has axis ({}, {}, {}) in the ankle frame, expected ({}, {}, {}) within {AXIS_TOLERANCE:e}",
            joint.name, axis[0], axis[1], axis[2], expected[0], expected[1], expected[2]
        )));
    }
    Ok(())
}

/// Attaches `geom` to a pitch/roll joint pair. The pitch axis must be `+y` and the roll axis
/// `+x`, each rotated by its joint's own origin.
pub fn bind_ankle(model: &RobotModel, pitch_joint: &str, roll_joint: &str, geom: &AnkleGeometry) -> Result<RobotModel> {
    let find = |name: &str| {
        model
            .joint(name)
            .ok_or_else(|| Error::Bind(format!("model '{}' has no joint '{name}'", model.name)))
    };
    let pitch = find(pitch_joint)?;
    let roll = find(roll_joint)?;
    check_axis(pitch, Vector3::y(), "pitch")?;
    check_axis(roll, Vector3::x(), "roll")?;
    validate_geometry(geom)?;
    let mut bound = model.clone();
    bound.ankle_bindings.push(AnkleBinding {
        pitch_joint: pitch_joint.to_string(),
        roll_joint: roll_joint.to_string(),
        geometry: GeometryConfig::from(geom),
    });
    Ok(bound)
}
