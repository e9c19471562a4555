//! Inpainting tasks: masks, supervised tuples and the terminal objective.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::ScoreBackbone;
use crate::error::{shape_check, Error, Result};

/// Diagonal binary mask; 1 marks a visible coordinate, 0 a missing one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    bits: Vec<f64>,
    shape: Option<(usize, usize)>,
}

impl Mask {
    pub fn new(bits: Vec<f64>, shape: Option<(usize, usize)>) -> Result<Self> {
        if bits.iter().any(|b| *b != 0.0 && *b != 1.0) {
            return Err(Error::Domain("mask entries must be 0 or 1".into()));
        }
        if let Some((h, w)) = shape {
            shape_check("mask bits for image shape", h * w, bits.len())?;
        }
        Ok(Self { bits, shape })
    }

    pub fn all_visible(dim: usize) -> Self {
        Self { bits: vec![1.0; dim], shape: None }
    }

    pub fn bits(&self) -> &[f64] {
        &self.bits
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    pub fn missing_count(&self) -> usize {
        self.bits.iter().filter(|b| **b == 0.0).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        self.missing_count() as f64 / self.bits.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskFamily {
    /// Unions of random rectangles; missing fraction uniform in `[0.2, 0.6]`.
    Freeform,
    /// Centered rectangle covering a quarter of the pixels.
    Center,
    /// Full-height vertical band covering a quarter of the columns.
    Strip,
    /// The same mask on every draw.
    Fixed(Mask),
}

impl MaskFamily {
    pub fn name(&self) -> &'static str {
        match self {
            MaskFamily::Freeform => "freeform",
            MaskFamily::Center => "center",
            MaskFamily::Strip => "strip",
            MaskFamily::Fixed(_) => "fixed",
        }
    }

    /// Families that may appear in training.
    pub fn is_training_family(&self) -> bool {
        matches!(self, MaskFamily::Freeform | MaskFamily::Fixed(_))
    }
}

impl fmt::Display for MaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "freeform" => Ok(MaskFamily::Freeform),
            "center" => Ok(MaskFamily::Center),
            "strip" => Ok(MaskFamily::Strip),
            other => Err(Error::Domain(format!("unknown mask family `{other}`"))),
        }
    }
}

pub const FREEFORM_MIN_MISSING: f64 = 0.2;
pub const FREEFORM_MAX_MISSING: f64 = 0.6;

fn image_shape(family: &MaskFamily, shape: Option<(usize, usize)>) -> Result<(usize, usize)> {
    shape.ok_or_else(|| {
        Error::Shape(format!("mask family `{family}` needs an image-shaped dimension"))
    })
}

fn rect_mask(h: usize, w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    let mut bits = vec![1.0; h * w];
    for r in rows {
        for c in cols.clone() {
            bits[r * w + c] = 0.0;
        }
    }
    bits
}

fn freeform_mask<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let d = h * w;
    let target: f64 = rng.gen_range(FREEFORM_MIN_MISSING..=FREEFORM_MAX_MISSING);
    let max_missing = (FREEFORM_MAX_MISSING * d as f64).floor() as usize;
    let mut bits = vec![1.0; d];
    let mut missing = 0usize;
    let mut rejections = 0usize;
    while (missing as f64) < target * d as f64 {
        if missing + 1 > max_missing {
            break;
        }
        let (rh, rw) = if rejections < 16 {
            (rng.gen_range(1..=h.div_ceil(2)), rng.gen_range(1..=w.div_ceil(2)))
        } else {
            (1, 1)
        };
        let r0 = rng.gen_range(0..=h - rh);
        let c0 = rng.gen_range(0..=w - rw);
        let fresh = (r0..r0 + rh)
            .flat_map(|r| (c0..c0 + rw).map(move |c| r * w + c))
            .filter(|&i| bits[i] == 1.0)
            .count();
        if missing + fresh > max_missing {
            rejections += 1;
            continue;
        }
        for r in r0..r0 + rh {
            for c in c0..c0 + rw {
                bits[r * w + c] = 0.0;
            }
        }
        missing += fresh;
    }
    bits
}

pub fn sample_mask<R: Rng + ?Sized>(
    family: &MaskFamily,
    shape: Option<(usize, usize)>,
    rng: &mut R,
) -> Result<Mask> {
    match family {
        MaskFamily::Fixed(m) => Ok(m.clone()),
        MaskFamily::Freeform => {
            let (h, w) = image_shape(family, shape)?;
            Mask::new(freeform_mask(h, w, rng), Some((h, w)))
        }
        MaskFamily::Center => {
            let (h, w) = image_shape(family, shape)?;
            let (mh, mw) = (h / 2, w / 2);
            let (r0, c0) = ((h - mh) / 2, (w - mw) / 2);
            Mask::new(rect_mask(h, w, r0..r0 + mh, c0..c0 + mw), Some((h, w)))
        }
        MaskFamily::Strip => {
            let (h, w) = image_shape(family, shape)?;
            let sw = (w / 4).max(1);
            let c0 = (w - sw) / 2;
            Mask::new(rect_mask(h, w, 0..h, c0..c0 + sw), Some((h, w)))
        }
    }
}

/// What a deployed guidance law may see: the mask and the masked observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    pub mask: Mask,
    pub observation: Vec<f64>,
}

impl Observable {
    pub fn dim(&self) -> usize {
        self.mask.dim()
    }
}

/// Supervised tuple: observable plus the clean reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    xi: Observable,
    clean: Vec<f64>,
}

impl Task {
    pub fn new(mask: Mask, clean: Vec<f64>) -> Result<Self> {
        shape_check("clean image", mask.dim(), clean.len())?;
        let observation = mask.bits().iter().zip(&clean).map(|(m, x)| m * x).collect();
        Ok(Self { xi: Observable { mask, observation }, clean })
    }

    pub fn observable(&self) -> &Observable {
        &self.xi
    }

    pub fn mask(&self) -> &Mask {
        &self.xi.mask
    }

    pub fn observation(&self) -> &[f64] {
        &self.xi.observation
    }

    pub fn clean(&self) -> &[f64] {
        &self.clean
    }

    pub fn dim(&self) -> usize {
        self.clean.len()
    }
}

pub fn sample_task<R: Rng + ?Sized>(
    backbone: &ScoreBackbone,
    family: &MaskFamily,
    shape: Option<(usize, usize)>,
    rng: &mut R,
) -> Result<Task> {
    let dim = crate::backbone::ScoreModel::dim(backbone);
    if let Some((h, w)) = shape {
        shape_check("backbone dimension vs image shape", h * w, dim)?;
    }
    let mask = sample_mask(family, shape, rng)?;
    shape_check("mask", dim, mask.dim())?;
    let clean = backbone.sample_data(rng);
    Task::new(mask, clean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalWeights {
    pub alpha_vis: f64,
    pub alpha_hole: f64,
}

impl TerminalWeights {
    pub fn new(alpha_vis: f64, alpha_hole: f64) -> Result<Self> {
        if !(alpha_vis >= 0.0 && alpha_hole >= 0.0 && alpha_vis.is_finite() && alpha_hole.is_finite()) {
            return Err(Error::Domain("terminal weights must be finite and nonnegative".into()));
        }
        if alpha_vis == 0.0 && alpha_hole == 0.0 {
            return Err(Error::Domain("terminal weights cannot both be zero".into()));
        }
        Ok(Self { alpha_vis, alpha_hole })
    }

    /// Diagonal of the terminal quadratic, `alpha_vis M + alpha_hole (I - M)`.
    pub fn diagonal(&self, mask: &Mask) -> Vec<f64> {
        mask.bits().iter().map(|m| m * self.alpha_vis + (1.0 - m) * self.alpha_hole).collect()
    }
}

impl Default for TerminalWeights {
    fn default() -> Self {
        Self { alpha_vis: 2.0, alpha_hole: 1.0 }
    }
}

/// `alpha_vis/2 |M(x - x†)|^2 + alpha_hole/2 |(I - M)(x - x†)|^2`.
pub fn terminal_loss(weights: &TerminalWeights, x: &[f64], task: &Task) -> Result<f64> {
    shape_check("state", task.dim(), x.len())?;
    let mut vis = 0.0;
    let mut hole = 0.0;
    for ((xi, c), m) in x.iter().zip(task.clean()).zip(task.mask().bits()) {
        let e = xi - c;
        if *m == 1.0 {
            vis += e * e;
        } else {
            hole += e * e;
        }
    }
    Ok(0.5 * weights.alpha_vis * vis + 0.5 * weights.alpha_hole * hole)
}

/// Gradient of [`terminal_loss`] with respect to `x`.
pub fn terminal_loss_grad(weights: &TerminalWeights, x: &[f64], task: &Task) -> Result<Vec<f64>> {
    shape_check("state", task.dim(), x.len())?;
    Ok(x.iter()
        .zip(task.clean())
        .zip(task.mask().bits())
        .map(|((xi, c), m)| {
            let a = if *m == 1.0 { weights.alpha_vis } else { weights.alpha_hole };
            a * (xi - c)
        })
        .collect())
}

/// Terminal critic target `Psi(x) - lambda T`.
pub fn centered_terminal(
    weights: &TerminalWeights,
    x: &[f64],
    task: &Task,
    lambda: f64,
    horizon: f64,
) -> Result<f64> {
    Ok(terminal_loss(weights, x, task)? - lambda * horizon)
}
