//! Static hand description: joints, couplings, tendon routes, motors and
//! fingertip frames.
//!
//! A [`HandSpec`] is the document form (names as references) and maps 1:1
//! onto the TOML config schema documented in `docs/hand-config.md`. A
//! [`HandModel`] is a spec that passed [`validate_hand_model`] with every
//! reference resolved to an index. Models are immutable once built.

use std::collections::{HashMap, HashSet};
use std::fmt;

use nalgebra::{Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Config schema version understood by this crate.
pub const SCHEMA_VERSION: u32 = 1;

const PROTO0_TOML: &str = include_str!("../config/proto0.toml");

const AXIS_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Rolling,
    Hinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermKind {
    /// Constant moment arm; `value` in m/rad.
    Linear,
    /// Rolling-contact wrap; `value` is the effective radius in m.
    Rolling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub actuated_dof: usize,
    pub motor_count: usize,
    pub paired_motor_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub name: String,
    /// Distance from the link frame (at its parent joint) to its distal end
    /// along local +z.
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    pub parent_link: String,
    pub child_link: String,
    /// Joint position in the parent link frame. Defaults to the parent's
    /// distal end `[0, 0, length]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<[f64; 3]>,
    pub axis: [f64; 3],
    /// Rolling joints: contact surface radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Rolling joints: distance between the two virtual hinge axes, along
    /// the child link's +z.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hinge_offset: Option<f64>,
    /// Hinge joints: point on the rotation axis, in the joint frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivot: Option<[f64; 3]>,
    pub range: [f64; 2],
    #[serde(default)]
    pub rest: f64,
}

/// Geometry of a joint after validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointGeometry {
    Rolling { radius: f64, hinge_offset: f64 },
    Hinge { pivot: Vector3<f64> },
}

impl JointSpec {
    pub fn q_min(&self) -> f64 {
        self.range[0]
    }

    pub fn q_max(&self) -> f64 {
        self.range[1]
    }

    /// Typed geometry, or `None` if the kind-specific fields are missing.
    pub fn geometry(&self) -> Option<JointGeometry> {
        match self.kind {
            JointKind::Rolling => Some(JointGeometry::Rolling {
                radius: self.radius?,
                hinge_offset: self.hinge_offset?,
            }),
            JointKind::Hinge => Some(JointGeometry::Hinge {
                pivot: Vector3::from(self.pivot.unwrap_or([0.0; 3])),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSpec {
    pub driver: String,
    pub driven: String,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteTerm {
    pub joint: String,
    pub kind: TermKind,
    pub value: f64,
    /// +1 flexor, -1 extensor.
    pub sign: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TendonRoute {
    pub name: String,
    pub rest_length: f64,
    pub terms: Vec<RouteTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub tendon: String,
    pub spool_radius: f64,
    pub winding: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotorSpec {
    pub name: String,
    pub attachments: Vec<Attachment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingertipSpec {
    pub name: String,
    pub link: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<[f64; 3]>,
}

/// Document form of a hand description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandSpec {
    pub schema_version: u32,
    pub name: String,
    /// Max allowed deviation (m) of antagonistic pairs from the spool-ratio
    /// relation.
    #[serde(default = "default_antagonistic_tolerance")]
    pub antagonistic_tolerance: f64,
    pub layout: Layout,
    pub links: Vec<LinkSpec>,
    pub joints: Vec<JointSpec>,
    #[serde(default)]
    pub couplings: Vec<CouplingSpec>,
    pub tendons: Vec<TendonRoute>,
    pub motors: Vec<MotorSpec>,
    pub fingertips: Vec<FingertipSpec>,
}

fn default_antagonistic_tolerance() -> f64 {
    0.002
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: &'static str,
    pub subject: String,
    pub detail: String,
}

impl Violation {
    fn new(rule: &'static str, subject: impl Into<String>, detail: impl Into<String>) -> Self {
        Self {
            rule,
            subject: subject.into(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.rule, self.subject, self.detail)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("hand config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid hand model: {}", join_violations(.0))]
    Validation(Vec<Violation>),
    #[error("hand config serialization failed: {0}")]
    Serialize(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Parse a hand config document into a spec without validating it.
pub fn parse_hand_spec(text: &str) -> Result<HandSpec, ModelError> {
    toml::from_str::<HandSpec>(text).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|span| line_col(text, span.start))
            .unwrap_or((0, 0));
        ModelError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let prefix = &text[..offset.min(text.len())];
    let line = prefix.matches('\n').count() + 1;
    let column = prefix.rfind('\n').map_or(prefix.len(), |i| prefix.len() - i - 1) + 1;
    (line, column)
}

/// Parse and validate a hand config document.
pub fn load_hand_model(text: &str) -> Result<HandModel, ModelError> {
    HandModel::from_spec(parse_hand_spec(text)?)
}

/// The built-in Proto-0 hand: 16 joints, 11 actuated DoF, 16 motors.
pub fn builtin_proto0() -> HandModel {
    load_hand_model(PROTO0_TOML).expect("built-in proto0 config is valid")
}

/// Source text of the built-in Proto-0 config.
pub fn builtin_proto0_text() -> &'static str {
    PROTO0_TOML
}

/// Checks every invariant of a hand spec and returns all violations.
pub fn validate_hand_model(spec: &HandSpec) -> Vec<Violation> {
    let mut out = Vec::new();

    if spec.schema_version != SCHEMA_VERSION {
        out.push(Violation::new(
            "schema_version",
            &spec.name,
            format!("expected {SCHEMA_VERSION}, found {}", spec.schema_version),
        ));
    }

    let links = name_index(spec.links.iter().map(|l| l.name.as_str()), "link", &mut out);
    let joints = name_index(spec.joints.iter().map(|j| j.name.as_str()), "joint", &mut out);
    let tendons = name_index(spec.tendons.iter().map(|t| t.name.as_str()), "tendon", &mut out);
    name_index(spec.motors.iter().map(|m| m.name.as_str()), "motor", &mut out);

    for link in &spec.links {
        if !(link.length.is_finite() && link.length >= 0.0) {
            out.push(Violation::new("link_length", &link.name, "length must be finite and >= 0"));
        }
    }

    // Joints.
    let mut child_of: HashMap<&str, &str> = HashMap::new();
    for j in &spec.joints {
        let [lo, hi] = j.range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            out.push(Violation::new(
                "joint_range",
                &j.name,
                format!("q_min < q_max required, got [{lo}, {hi}]"),
            ));
        } else if !(lo..=hi).contains(&j.rest) {
            out.push(Violation::new(
                "joint_rest",
                &j.name,
                format!("rest {} outside [{lo}, {hi}]", j.rest),
            ));
        }
        let axis = Vector3::from(j.axis);
        if (axis.norm() - 1.0).abs() > AXIS_NORM_TOL {
            out.push(Violation::new(
                "axis_unit_norm",
                &j.name,
                format!("axis norm {} differs from 1", axis.norm()),
            ));
        }
        match j.kind {
            JointKind::Rolling => {
                match j.radius {
                    Some(r) if r > 0.0 && r.is_finite() => {}
                    _ => out.push(Violation::new("rolling_radius", &j.name, "rolling joint needs radius > 0")),
                }
                match j.hinge_offset {
                    Some(d) if d > 0.0 && d.is_finite() => {}
                    _ => out.push(Violation::new(
                        "rolling_hinge_offset",
                        &j.name,
                        "rolling joint needs hinge_offset > 0",
                    )),
                }
                if axis.z.abs() > AXIS_NORM_TOL {
                    out.push(Violation::new(
                        "rolling_axis",
                        &j.name,
                        "rolling axis must be perpendicular to the link direction (+z)",
                    ));
                }
            }
            JointKind::Hinge => {
                if j.radius.is_some() || j.hinge_offset.is_some() {
                    out.push(Violation::new(
                        "hinge_geometry",
                        &j.name,
                        "hinge joints take `pivot`, not radius/hinge_offset",
                    ));
                }
            }
        }
        for (field, link) in [("parent_link", &j.parent_link), ("child_link", &j.child_link)] {
            if !links.contains_key(link.as_str()) {
                out.push(Violation::new(
                    "missing_link",
                    &j.name,
                    format!("{field} `{link}` does not exist"),
                ));
            }
        }
        if child_of.insert(j.child_link.as_str(), j.name.as_str()).is_some() {
            out.push(Violation::new(
                "link_tree",
                &j.child_link,
                "link is the child of more than one joint",
            ));
        }
    }

    // Link tree: one root and no cycles.
    let roots: Vec<&str> = spec
        .links
        .iter()
        .map(|l| l.name.as_str())
        .filter(|l| !child_of.contains_key(l))
        .collect();
    if roots.len() != 1 {
        out.push(Violation::new(
            "link_tree",
            &spec.name,
            format!("expected exactly one root link, found {}", roots.len()),
        ));
    }
    let joint_by_name: HashMap<&str, &JointSpec> =
        spec.joints.iter().map(|j| (j.name.as_str(), j)).collect();
    for j in &spec.joints {
        if joint_ancestors(j.name.as_str(), &joint_by_name, &child_of).is_none() {
            out.push(Violation::new("link_tree", &j.name, "kinematic chain contains a cycle"));
        }
    }

    // Couplings.
    let mut driven_seen: HashSet<&str> = HashSet::new();
    for c in &spec.couplings {
        let subject = format!("coupling {}<-{}", c.driven, c.driver);
        for name in [&c.driver, &c.driven] {
            if !joints.contains_key(name.as_str()) {
                out.push(Violation::new(
                    "missing_joint",
                    &subject,
                    format!("joint `{name}` does not exist"),
                ));
            }
        }
        if c.driver == c.driven {
            out.push(Violation::new("coupling_self", &subject, "driver and driven must differ"));
        }
        if !driven_seen.insert(c.driven.as_str()) {
            out.push(Violation::new(
                "coupling_unique",
                &subject,
                "joint is driven by more than one coupling",
            ));
        }
        if !c.ratio.is_finite() {
            out.push(Violation::new("coupling_ratio", &subject, "ratio must be finite"));
        }
    }
    for c in &spec.couplings {
        if driven_seen.contains(c.driver.as_str()) {
            out.push(Violation::new(
                "coupling_chain",
                format!("coupling {}<-{}", c.driven, c.driver),
                "driver must be an actuated joint",
            ));
        }
    }

    let actuated = spec.joints.len().saturating_sub(spec.couplings.len());
    if actuated != spec.layout.actuated_dof {
        out.push(Violation::new(
            "actuated_dof",
            &spec.name,
            format!(
                "{} joints - {} couplings = {actuated}, expected {}",
                spec.joints.len(),
                spec.couplings.len(),
                spec.layout.actuated_dof
            ),
        ));
    }

    // Tendon routes.
    for t in &spec.tendons {
        if !(t.rest_length > 0.0 && t.rest_length.is_finite()) {
            out.push(Violation::new("tendon_rest_length", &t.name, "rest length must be > 0"));
        }
        if t.terms.is_empty() {
            out.push(Violation::new("tendon_terms", &t.name, "route has no terms"));
        }
        for term in &t.terms {
            if !joints.contains_key(term.joint.as_str()) {
                out.push(Violation::new(
                    "missing_joint",
                    &t.name,
                    format!("term joint `{}` does not exist", term.joint),
                ));
            }
            if term.sign != 1 && term.sign != -1 {
                out.push(Violation::new("term_sign", &t.name, format!("sign {} not in {{+1, -1}}", term.sign)));
            }
            if !(term.value > 0.0 && term.value.is_finite()) {
                out.push(Violation::new(
                    "term_value",
                    &t.name,
                    format!("term on `{}` needs a positive value", term.joint),
                ));
            }
        }
        for pair in t.terms.windows(2) {
            let (a, b) = (pair[0].joint.as_str(), pair[1].joint.as_str());
            if a == b {
                continue;
            }
            let ordered = joint_ancestors(b, &joint_by_name, &child_of)
                .map(|anc| anc.contains(&a))
                .unwrap_or(false);
            if joints.contains_key(a) && joints.contains_key(b) && !ordered {
                out.push(Violation::new(
                    "term_order",
                    &t.name,
                    format!("`{a}` is not proximal to `{b}`"),
                ));
            }
        }
    }

    // Motors.
    if spec.motors.len() != spec.layout.motor_count {
        out.push(Violation::new(
            "motor_count",
            &spec.name,
            format!("expected {} motors, found {}", spec.layout.motor_count, spec.motors.len()),
        ));
    }
    let paired = spec.motors.iter().filter(|m| m.attachments.len() == 2).count();
    if paired != spec.layout.paired_motor_count {
        out.push(Violation::new(
            "paired_motor_count",
            &spec.name,
            format!(
                "expected {} motors with two tendons, found {paired}",
                spec.layout.paired_motor_count
            ),
        ));
    }
    let mut attached: HashSet<&str> = HashSet::new();
    for m in &spec.motors {
        if !(1..=2).contains(&m.attachments.len()) {
            out.push(Violation::new(
                "motor_attachments",
                &m.name,
                format!("1 or 2 attachments required, found {}", m.attachments.len()),
            ));
        }
        for a in &m.attachments {
            if !tendons.contains_key(a.tendon.as_str()) {
                out.push(Violation::new(
                    "missing_tendon",
                    &m.name,
                    format!("tendon `{}` does not exist", a.tendon),
                ));
            }
            if !(a.spool_radius > 0.0 && a.spool_radius.is_finite()) {
                out.push(Violation::new("spool_radius", &m.name, "spool radius must be > 0"));
            }
            if a.winding != 1 && a.winding != -1 {
                out.push(Violation::new(
                    "winding_sign",
                    &m.name,
                    format!("winding {} not in {{+1, -1}}", a.winding),
                ));
            }
            if !attached.insert(a.tendon.as_str()) {
                out.push(Violation::new(
                    "tendon_attachment",
                    &a.tendon,
                    "tendon attached to more than one motor",
                ));
            }
        }
    }

    // Fingertips.
    if spec.fingertips.len() != 5 {
        out.push(Violation::new(
            "fingertip_count",
            &spec.name,
            format!("expected 5 fingertips, found {}", spec.fingertips.len()),
        ));
    }
    for tip in &spec.fingertips {
        if !links.contains_key(tip.link.as_str()) {
            out.push(Violation::new(
                "missing_link",
                &tip.name,
                format!("fingertip link `{}` does not exist", tip.link),
            ));
        }
    }

    if !(spec.antagonistic_tolerance >= 0.0) {
        out.push(Violation::new(
            "antagonistic_tolerance",
            &spec.name,
            "tolerance must be >= 0",
        ));
    }

    out
}

fn name_index<'a>(
    names: impl Iterator<Item = &'a str>,
    what: &'static str,
    out: &mut Vec<Violation>,
) -> HashMap<&'a str, usize> {
    let mut map = HashMap::new();
    for (i, n) in names.enumerate() {
        if map.insert(n, i).is_some() {
            out.push(Violation::new("unique_name", n, format!("duplicate {what} name")));
        }
    }
    map
}

/// Joint names from the root down to (excluding) `joint`, or `None` on a
/// cycle.
fn joint_ancestors<'a>(
    joint: &'a str,
    joints: &HashMap<&'a str, &'a JointSpec>,
    child_of: &HashMap<&'a str, &'a str>,
) -> Option<Vec<&'a str>> {
    let mut chain = Vec::new();
    let mut current = joints.get(joint)?;
    while let Some(parent) = child_of.get(current.parent_link.as_str()) {
        if *parent == joint || chain.contains(parent) || chain.len() > joints.len() {
            return None;
        }
        chain.push(*parent);
        current = joints.get(parent)?;
    }
    chain.reverse();
    Some(chain)
}

/// A joint with all references resolved.
#[derive(Debug, Clone)]
pub struct ResolvedJoint {
    pub parent_link: usize,
    pub child_link: usize,
    pub origin: Vector3<f64>,
    pub axis: Unit<Vector3<f64>>,
    pub geometry: JointGeometry,
    pub range: (f64, f64),
}

#[derive(Debug, Clone, Copy)]
pub struct ResolvedTerm {
    /// Index into the full joint vector.
    pub joint: usize,
    pub kind: TermKind,
    pub value: f64,
    pub sign: f64,
}

#[derive(Debug, Clone)]
pub struct ResolvedTendon {
    pub rest_length: f64,
    pub terms: Vec<ResolvedTerm>,
}

#[derive(Debug, Clone, Copy)]
pub struct ResolvedAttachment {
    pub tendon: usize,
    pub spool_radius: f64,
    pub winding: f64,
}

#[derive(Debug, Clone)]
pub struct ResolvedMotor {
    pub attachments: Vec<ResolvedAttachment>,
}

impl ResolvedMotor {
    /// The attachment whose length is reported as the motor's measurement.
    pub fn primary(&self) -> &ResolvedAttachment {
        &self.attachments[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ResolvedFingertip {
    pub link: usize,
    pub offset: Vector3<f64>,
}

/// Where a full-joint value comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointSource {
    pub actuated: usize,
    pub ratio: f64,
}

/// A validated hand model with resolved indices.
#[derive(Debug, Clone)]
pub struct HandModel {
    spec: HandSpec,
    joints: Vec<ResolvedJoint>,
    eval_order: Vec<usize>,
    actuated: Vec<usize>,
    sources: Vec<JointSource>,
    tendons: Vec<ResolvedTendon>,
    motors: Vec<ResolvedMotor>,
    fingertips: Vec<ResolvedFingertip>,
    root_link: usize,
}

impl HandModel {
    pub fn from_spec(spec: HandSpec) -> Result<Self, ModelError> {
        let violations = validate_hand_model(&spec);
        if !violations.is_empty() {
            return Err(ModelError::Validation(violations));
        }

        let link_ix: HashMap<&str, usize> =
            spec.links.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
        let joint_ix: HashMap<&str, usize> =
            spec.joints.iter().enumerate().map(|(i, j)| (j.name.as_str(), i)).collect();
        let tendon_ix: HashMap<&str, usize> =
            spec.tendons.iter().enumerate().map(|(i, t)| (t.name.as_str(), i)).collect();

        let joints: Vec<ResolvedJoint> = spec
            .joints
            .iter()
            .map(|j| {
                let parent = link_ix[j.parent_link.as_str()];
                let origin = j
                    .origin
                    .map(Vector3::from)
                    .unwrap_or_else(|| Vector3::new(0.0, 0.0, spec.links[parent].length));
                ResolvedJoint {
                    parent_link: parent,
                    child_link: link_ix[j.child_link.as_str()],
                    origin,
                    axis: Unit::new_normalize(Vector3::from(j.axis)),
                    geometry: j.geometry().expect("validated geometry"),
                    range: (j.q_min(), j.q_max()),
                }
            })
            .collect();

        // Joints whose parent link is already placed can be evaluated.
        let root_link = (0..spec.links.len())
            .find(|&l| joints.iter().all(|j| j.child_link != l))
            .expect("validated single root");
        let mut placed = vec![false; spec.links.len()];
        placed[root_link] = true;
        let mut eval_order = Vec::with_capacity(joints.len());
        while eval_order.len() < joints.len() {
            for (i, j) in joints.iter().enumerate() {
                if !eval_order.contains(&i) && placed[j.parent_link] {
                    placed[j.child_link] = true;
                    eval_order.push(i);
                }
            }
        }

        let driven: HashMap<usize, (usize, f64)> = spec
            .couplings
            .iter()
            .map(|c| (joint_ix[c.driven.as_str()], (joint_ix[c.driver.as_str()], c.ratio)))
            .collect();
        let actuated: Vec<usize> = (0..joints.len()).filter(|i| !driven.contains_key(i)).collect();
        let act_of: HashMap<usize, usize> =
            actuated.iter().enumerate().map(|(a, &full)| (full, a)).collect();
        let sources = (0..joints.len())
            .map(|i| match driven.get(&i) {
                Some(&(driver, ratio)) => JointSource { actuated: act_of[&driver], ratio },
                None => JointSource { actuated: act_of[&i], ratio: 1.0 },
            })
            .collect();

        let tendons = spec
            .tendons
            .iter()
            .map(|t| ResolvedTendon {
                rest_length: t.rest_length,
                terms: t
                    .terms
                    .iter()
                    .map(|term| ResolvedTerm {
                        joint: joint_ix[term.joint.as_str()],
                        kind: term.kind,
                        value: term.value,
                        sign: f64::from(term.sign),
                    })
                    .collect(),
            })
            .collect();
        let motors = spec
            .motors
            .iter()
            .map(|m| ResolvedMotor {
                attachments: m
                    .attachments
                    .iter()
                    .map(|a| ResolvedAttachment {
                        tendon: tendon_ix[a.tendon.as_str()],
                        spool_radius: a.spool_radius,
                        winding: f64::from(a.winding),
                    })
                    .collect(),
            })
            .collect();
        let fingertips = spec
            .fingertips
            .iter()
            .map(|tip| {
                let link = link_ix[tip.link.as_str()];
                ResolvedFingertip {
                    link,
                    offset: tip
                        .offset
                        .map(Vector3::from)
                        .unwrap_or_else(|| Vector3::new(0.0, 0.0, spec.links[link].length)),
                }
            })
            .collect();

        Ok(Self {
            spec,
            joints,
            eval_order,
            actuated,
            sources,
            tendons,
            motors,
            fingertips,
            root_link,
        })
    }

    pub fn spec(&self) -> &HandSpec {
        &self.spec
    }

    /// Always empty for a constructed model.
    pub fn validate(&self) -> Vec<Violation> {
        validate_hand_model(&self.spec)
    }

    pub fn to_toml(&self) -> Result<String, ModelError> {
        toml::to_string(&self.spec).map_err(|e| ModelError::Serialize(e.to_string()))
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn n_actuated(&self) -> usize {
        self.actuated.len()
    }

    pub fn n_motors(&self) -> usize {
        self.motors.len()
    }

    pub fn n_links(&self) -> usize {
        self.spec.links.len()
    }

    pub fn n_fingertips(&self) -> usize {
        self.fingertips.len()
    }

    pub fn joints(&self) -> &[ResolvedJoint] {
        &self.joints
    }

    /// Joint indices in an order where every parent link is placed first.
    pub fn eval_order(&self) -> &[usize] {
        &self.eval_order
    }

    /// Full-joint indices of the actuated joints, in actuated order.
    pub fn actuated_joints(&self) -> &[usize] {
        &self.actuated
    }

    /// For each full joint, the actuated joint and ratio driving it.
    pub fn joint_sources(&self) -> &[JointSource] {
        &self.sources
    }

    pub fn tendons(&self) -> &[ResolvedTendon] {
        &self.tendons
    }

    pub fn motors(&self) -> &[ResolvedMotor] {
        &self.motors
    }

    pub fn fingertips(&self) -> &[ResolvedFingertip] {
        &self.fingertips
    }

    pub fn root_link(&self) -> usize {
        self.root_link
    }

    pub fn actuated_names(&self) -> Vec<&str> {
        self.actuated.iter().map(|&i| self.spec.joints[i].name.as_str()).collect()
    }

    /// `(q_min, q_max)` per actuated joint.
    pub fn actuated_ranges(&self) -> Vec<(f64, f64)> {
        self.actuated.iter().map(|&i| self.joints[i].range).collect()
    }

    /// Configured rest pose over the actuated joints.
    pub fn rest_pose(&self) -> Vec<f64> {
        self.actuated.iter().map(|&i| self.spec.joints[i].rest).collect()
    }

    pub fn antagonistic_tolerance(&self) -> f64 {
        self.spec.antagonistic_tolerance
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proto_spec() -> HandSpec {
        parse_hand_spec(builtin_proto0_text()).unwrap()
    }

    #[test]
    fn proto0_counts() {
        let m = builtin_proto0();
        assert_eq!(m.n_joints(), 16);
        assert_eq!(m.n_actuated(), 11);
        assert_eq!(m.n_motors(), 16);
        assert_eq!(m.spec().couplings.len(), 5);
        assert_eq!(m.n_fingertips(), 5);
        let attachments: usize = m.motors().iter().map(|mo| mo.attachments.len()).sum();
        assert_eq!(attachments, 22);
        assert_eq!(m.motors().iter().filter(|mo| mo.attachments.len() == 2).count(), 6);
        assert!(m.validate().is_empty());
    }

    #[test]
    fn proto0_structure() {
        let m = builtin_proto0();
        let names = m.actuated_names();
        assert_eq!(&names[..3], &["thumb_cmc_abd", "thumb_cmc_flex", "thumb_mcp"]);
        let spec = m.spec();
        let thumb_hinges = spec
            .joints
            .iter()
            .filter(|j| j.name.starts_with("thumb_cmc") && j.kind == JointKind::Hinge)
            .count();
        assert_eq!(thumb_hinges, 2);
        for finger in ["index", "middle", "ring", "pinky"] {
            let c = spec
                .couplings
                .iter()
                .find(|c| c.driven == format!("{finger}_dip"))
                .unwrap();
            assert_eq!(c.driver, format!("{finger}_pip"));
            assert_eq!(c.ratio, 1.0);
        }
    }

    #[test]
    fn inverted_range_names_joint() {
        let text = builtin_proto0_text().replacen("range = [0.0, 1.7]\nrest = 0.9", "range = [1.7, 1.7]\nrest = 0.9", 1);
        let err = load_hand_model(&text).unwrap_err();
        match err {
            ModelError::Validation(v) => {
                assert!(v.iter().any(|x| x.rule == "joint_range" && x.subject == "index_pip"), "{v:?}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn seven_paired_motors_rejected() {
        let mut spec = proto_spec();
        let m = spec.motors.iter_mut().find(|m| m.name == "index_pip_flexor").unwrap();
        m.attachments.push(Attachment {
            tendon: "index_pip_extensor".into(),
            spool_radius: 0.005,
            winding: -1,
        });
        spec.motors.retain(|m| m.name != "index_pip_extensor");
        spec.motors.push(MotorSpec {
            name: "spare".into(),
            attachments: vec![Attachment {
                tendon: "index_pip_extensor_spare".into(),
                spool_radius: 0.005,
                winding: 1,
            }],
        });
        let v = validate_hand_model(&spec);
        let paired: Vec<_> = v.iter().filter(|x| x.rule == "paired_motor_count").collect();
        assert_eq!(paired.len(), 1);
        assert!(paired[0].detail.contains("expected 6"));
    }

    #[test]
    fn missing_coupling_joint_is_one_violation() {
        let mut spec = proto_spec();
        spec.couplings[1].driver = "index_nonexistent".into();
        let v = validate_hand_model(&spec);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].rule, "missing_joint");
    }

    #[test]
    fn reports_every_violation() {
        let mut spec = proto_spec();
        spec.joints[0].range = [1.0, 0.0];
        spec.tendons[0].rest_length = -0.1;
        let v = validate_hand_model(&spec);
        assert_eq!(v.len(), 2, "{v:?}");
    }

    #[test]
    fn non_unit_axis_rejected() {
        let mut spec = proto_spec();
        spec.joints[0].axis = [0.0, 1.0 + 1e-6, 0.0];
        let v = validate_hand_model(&spec);
        assert!(v.iter().any(|x| x.rule == "axis_unit_norm"));
    }

    #[test]
    fn parse_error_has_line() {
        let text = "schema_version = 1\nname = \"x\"\nlayout = 3\n";
        match parse_hand_spec(text).unwrap_err() {
            ModelError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn distal_to_proximal_terms_rejected() {
        let mut spec = proto_spec();
        let t = spec.tendons.iter_mut().find(|t| t.name == "index_pip_flexor").unwrap();
        t.terms.reverse();
        let v = validate_hand_model(&spec);
        assert!(v.iter().any(|x| x.rule == "term_order"), "{v:?}");
    }

    #[test]
    fn serialization_round_trip() {
        let m = builtin_proto0();
        let text = m.to_toml().unwrap();
        let again = load_hand_model(&text).unwrap();
        assert_eq!(m.spec(), again.spec());
    }
}
