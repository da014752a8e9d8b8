use std::path::Path;

use morphavatar_core::eval::render_params;
use morphavatar_core::morphable::{canonical_pose, AnimationParams, MorphableTemplate, JOINT_NAMES, NUM_EXPR, NUM_JOINTS};
use morphavatar_core::render::{Camera, LatentChoice, Orbit, OutputKind, RenderOutput, DEFAULT_FOV_Y};
use morphavatar_core::train::Checkpoint;
use morphavatar_core::{Error, Result};
use serde_json::{json, Map, Value};

/// Largest accepted width or height.
pub const MAX_SIZE: usize = 512;
pub const DEFAULT_SIZE: usize = 128;

/// A trained checkpoint with the template it was trained against.
pub struct Avatar {
    pub checkpoint: Checkpoint,
    pub template: MorphableTemplate,
    pub checkpoint_hash: String,
}

impl Avatar {
    pub fn load(checkpoint: &Path, template: &Path) -> Result<Self> {
        let checkpoint = Checkpoint::load(checkpoint)?;
        if !template.exists() {
            return Err(Error::invalid(format!("template not found: {}", template.display())));
        }
        let template = MorphableTemplate::load(template)?;
        let hash = template.content_hash()?;
        if !checkpoint.template_hash.is_empty() && checkpoint.template_hash != hash {
            return Err(Error::invalid(format!(
                "template hash {hash} does not match the checkpoint's {}",
                checkpoint.template_hash
            )));
        }
        let checkpoint_hash = checkpoint.content_hash()?;
        Ok(Self {
            checkpoint,
            template,
            checkpoint_hash,
        })
    }

    pub fn info(&self) -> Value {
        json!({
            "n_e": NUM_EXPR,
            "n_j": NUM_JOINTS,
            "joint_names": JOINT_NAMES,
            "canonical_pose": canonical_pose(),
            "checkpoint_hash": self.checkpoint_hash,
            "max_size": MAX_SIZE,
        })
    }

    pub fn render(&self, req: &RenderRequest) -> Result<RenderOutput> {
        let mut cfg = self.checkpoint.config.clone();
        if let Some(s) = req.seed {
            cfg.march.seed = s;
        }
        let camera = Camera::orbit(req.camera, req.width, req.height, DEFAULT_FOV_Y)?;
        let params = AnimationParams {
            theta: req.theta.clone(),
            psi: req.psi.clone(),
            ..AnimationParams::canonical()
        };
        params.validate()?;
        render_params(&self.checkpoint.nets, &self.template, &params, &camera, LatentChoice::Mean, &cfg)
    }

    pub fn render_png(&self, req: &RenderRequest) -> Result<Vec<u8>> {
        self.render(req)?.png(req.output)
    }
}

/// One render job, as accepted by the service and the `render` command.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderRequest {
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub camera: Orbit,
    pub width: usize,
    pub height: usize,
    pub output: OutputKind,
    /// Overrides the checkpoint's ray-sampling seed.
    pub seed: Option<u64>,
}

impl Default for RenderRequest {
    fn default() -> Self {
        Self {
            theta: canonical_pose(),
            psi: vec![0.0; NUM_EXPR],
            camera: Orbit::default(),
            width: DEFAULT_SIZE,
            height: DEFAULT_SIZE,
            output: OutputKind::Rgb,
            seed: None,
        }
    }
}

/// A request field that failed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn field_err(field: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        field: field.to_string(),
        message: message.into(),
    }
}

fn number(v: &Value, field: &str) -> std::result::Result<f64, FieldError> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| field_err(field, "expected a finite number"))
}

fn vector(v: &Value, field: &str, len: usize) -> std::result::Result<Vec<f64>, FieldError> {
    let arr = v.as_array().ok_or_else(|| field_err(field, "expected an array of numbers"))?;
    if arr.len() != len {
        return Err(field_err(field, format!("expected {len} values, got {}", arr.len())));
    }
    arr.iter().map(|x| number(x, field)).collect()
}

fn size(v: &Value, field: &str) -> std::result::Result<usize, FieldError> {
    match v.as_u64() {
        Some(n) if n >= 1 && n as usize <= MAX_SIZE => Ok(n as usize),
        _ => Err(field_err(field, format!("expected an integer in [1, {MAX_SIZE}]"))),
    }
}

impl RenderRequest {
    /// Parse a request object. Missing fields take their defaults; unknown
    /// or invalid fields are reported by name.
    pub fn from_json(v: &Value) -> std::result::Result<Self, FieldError> {
        let obj = v.as_object().ok_or_else(|| field_err("body", "expected a JSON object"))?;
        let mut r = Self::default();
        for (key, val) in obj {
            match key.as_str() {
                "theta" => r.theta = vector(val, "theta", 3 * NUM_JOINTS)?,
                "psi" => r.psi = vector(val, "psi", NUM_EXPR)?,
                "camera" => r.camera = parse_camera(val)?,
                "width" => r.width = size(val, "width")?,
                "height" => r.height = size(val, "height")?,
                "output" => {
                    r.output = match val.as_str() {
                        Some("rgb") => OutputKind::Rgb,
                        Some("normal") => OutputKind::Normal,
                        Some("mask") => OutputKind::Mask,
                        Some("depth") => OutputKind::Depth,
                        _ => return Err(field_err("output", "expected one of rgb, normal, mask, depth")),
                    }
                }
                "seed" => r.seed = Some(val.as_u64().ok_or_else(|| field_err("seed", "expected a non-negative integer"))?),
                other => return Err(field_err(other, "unknown field")),
            }
        }
        Ok(r)
    }

    pub fn to_json(&self) -> Value {
        let output = match self.output {
            OutputKind::Rgb => "rgb",
            OutputKind::Normal => "normal",
            OutputKind::Mask => "mask",
            OutputKind::Depth => "depth",
        };
        let mut m = Map::new();
        m.insert("theta".into(), json!(self.theta));
        m.insert("psi".into(), json!(self.psi));
        m.insert(
            "camera".into(),
            json!({
                "orbit_azimuth": self.camera.azimuth,
                "orbit_elevation": self.camera.elevation,
                "distance": self.camera.distance,
            }),
        );
        m.insert("width".into(), json!(self.width));
        m.insert("height".into(), json!(self.height));
        m.insert("output".into(), json!(output));
        if let Some(s) = self.seed {
            m.insert("seed".into(), json!(s));
        }
        Value::Object(m)
    }
}

fn parse_camera(v: &Value) -> std::result::Result<Orbit, FieldError> {
    let obj = v.as_object().ok_or_else(|| field_err("camera", "expected an object"))?;
    let mut o = Orbit::default();
    for (key, val) in obj {
        match key.as_str() {
            "orbit_azimuth" => o.azimuth = number(val, "camera.orbit_azimuth")?,
            "orbit_elevation" => o.elevation = number(val, "camera.orbit_elevation")?,
            "distance" => {
                o.distance = number(val, "camera.distance")?;
                if o.distance <= 0.0 {
                    return Err(field_err("camera.distance", "expected a positive number"));
                }
            }
            other => return Err(field_err(&format!("camera.{other}"), "unknown field")),
        }
    }
    Ok(o)
}
