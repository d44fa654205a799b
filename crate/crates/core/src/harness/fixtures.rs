//! Procedural scenes and synthetic attacks.
//!
//! Clean scenes are smooth: per-channel linear gradients, a faint long-wave
//! ripple, and a few soft-edged discs and rounded boxes. Attacks follow the two
//! threat models: an L∞-bounded perturbation over the whole frame, or an
//! opaque high-contrast patch pasted under a binary mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::purifier::PixelMask;
use crate::sentinel::ThreatClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    GlobalUniform,
    GlobalGaussian,
    GlobalSignGrad,
    Patch,
}

impl AttackKind {
    pub const GLOBAL: [AttackKind; 3] = [
        Self::GlobalUniform,
        Self::GlobalGaussian,
        Self::GlobalSignGrad,
    ];

    pub fn is_global(self) -> bool {
        self != Self::Patch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatchFill {
    /// Black/white checkerboard with 2-px cells (4-px period).
    Checker,
    /// Independent 0/1 per pixel and channel.
    SaturatedRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
    pub top: usize,
    pub left: usize,
    pub fill: PatchFill,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// L∞ budget for global kinds.
    pub epsilon: f64,
    pub patch: Option<PatchSpec>,
    pub seed: u64,
}

impl AttackSpec {
    pub fn global(kind: AttackKind, epsilon: f64, seed: u64) -> Self {
        Self {
            kind,
            epsilon,
            patch: None,
            seed,
        }
    }

    pub fn patch(patch: PatchSpec, seed: u64) -> Self {
        Self {
            kind: AttackKind::Patch,
            epsilon: 0.0,
            patch: Some(patch),
            seed,
        }
    }

    pub fn truth(&self) -> ThreatClass {
        if self.kind.is_global() {
            ThreatClass::GlobalAttack
        } else {
            ThreatClass::LocalAttack
        }
    }
}

/// `clamp(I + delta)` with `|delta| <= epsilon` everywhere.
///
/// The sign-gradient kind stands in for FGSM without a model: it takes the sign
/// of a 3×3 high-pass of the image, and draws a seeded random sign wherever the
/// high-pass is numerically flat.
pub fn gen_global(image: &Image, spec: &AttackSpec) -> Result<Image> {
    if !spec.kind.is_global() {
        return Err(invalid("gen_global needs a global attack kind"));
    }
    let eps = spec.epsilon;
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(invalid(format!("epsilon {eps} must lie in (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let delta: Vec<f64> = match spec.kind {
        AttackKind::GlobalUniform => (0..h * w * ch)
            .map(|_| rng.random_range(-eps..=eps))
            .collect(),
        AttackKind::GlobalGaussian => {
            let n = Normal::new(0.0, eps / 2.0).map_err(|e| invalid(e.to_string()))?;
            (0..h * w * ch)
                .map(|_| n.sample(&mut rng).clamp(-eps, eps))
                .collect()
        }
        AttackKind::GlobalSignGrad => {
            let hp = high_pass(image);
            hp.iter()
                .map(|&g| {
                    if g.abs() > 1e-6 {
                        eps * g.signum()
                    } else if rng.random_bool(0.5) {
                        eps
                    } else {
                        -eps
                    }
                })
                .collect()
        }
        AttackKind::Patch => unreachable!(),
    };
    let data = image
        .data()
        .iter()
        .zip(&delta)
        .map(|(v, d)| (v + d).clamp(0.0, 1.0))
        .collect();
    Image::new(h, w, ch, data)
}

/// `I - box3x3(I)` per channel, replicated borders.
fn high_pass(image: &Image) -> Vec<f64> {
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let mut out = Vec::with_capacity(h * w * ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut s = 0.0;
                for dy in [-1isize, 0, 1] {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in [-1isize, 0, 1] {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        s += image.get(yy, xx, c);
                    }
                }
                out.push(image.get(y, x, c) - s / 9.0);
            }
        }
    }
    out
}

/// `(1 - M) * I + M * patch`; returns the attacked image and `M`.
pub fn gen_patch(image: &Image, spec: &AttackSpec) -> Result<(Image, PixelMask)> {
    let p = match (spec.kind, spec.patch) {
        (AttackKind::Patch, Some(p)) => p,
        _ => return Err(invalid("gen_patch needs a patch spec")),
    };
    if p.height == 0
        || p.width == 0
        || p.top + p.height > image.height()
        || p.left + p.width > image.width()
    {
        return Err(invalid("patch does not fit inside the image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = image.clone();
    for y in p.top..p.top + p.height {
        for x in p.left..p.left + p.width {
            for c in 0..image.channels() {
                let v = match p.fill {
                    PatchFill::Checker => {
                        if ((y - p.top) / 2 + (x - p.left) / 2) % 2 == 0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    PatchFill::SaturatedRandom => {
                        if rng.random_bool(0.5) {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                out.set(y, x, c, v);
            }
        }
    }
    let mask = PixelMask::rect(
        image.height(),
        image.width(),
        p.top,
        p.left,
        p.height,
        p.width,
    );
    Ok((out, mask))
}

fn smoothstep_edge(signed_dist: f64, softness: f64) -> f64 {
    1.0 / (1.0 + (-signed_dist / softness).exp())
}

/// Smooth RGB scene, deterministic in `seed`.
pub fn clean_scene(height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);

    let mut base = [[0.0; 3]; 3];
    for b in &mut base {
        *b = [
            rng.random_range(0.3..0.7),
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.15..0.15),
        ];
    }
    let ripple_amp = rng.random_range(0.0..0.05);
    let ripple_fy = rng.random_range(0.5..2.0) / hf;
    let ripple_fx = rng.random_range(0.5..2.0) / wf;
    let ripple_phase = rng.random_range(0.0..std::f64::consts::TAU);

    struct Shape {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        rounded_box: bool,
        color: [f64; 3],
        opacity: f64,
        softness: f64,
    }
    let min_side = hf.min(wf);
    let shapes: Vec<Shape> = (0..rng.random_range(2..=4))
        .map(|_| {
            let r = rng.random_range(0.05..0.18) * min_side;
            Shape {
                cy: rng.random_range(0.1..0.9) * hf,
                cx: rng.random_range(0.1..0.9) * wf,
                ry: r * rng.random_range(0.7..1.3),
                rx: r * rng.random_range(0.7..1.3),
                rounded_box: rng.random_bool(0.5),
                color: [
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                ],
                opacity: rng.random_range(0.3..0.6),
                softness: rng.random_range(4.0..6.0),
            }
        })
        .collect();

    Image::from_fn(height, width, 3, |y, x, c| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let [b0, gx, gy] = base[c];
        let mut v = b0 + gx * (xf / wf - 0.5) + gy * (yf / hf - 0.5);
        v += ripple_amp
            * (std::f64::consts::TAU * (ripple_fy * yf + ripple_fx * xf) + ripple_phase).sin();
        for s in &shapes {
            let (dy, dx) = (yf - s.cy, xf - s.cx);
            // Signed distance (positive inside), in pixels.
            let inside = if s.rounded_box {
                let qy = dy.abs() - s.ry;
                let qx = dx.abs() - s.rx;
                -(qy.max(0.0).hypot(qx.max(0.0)) + qy.max(qx).min(0.0))
            } else {
                let r = (dy / s.ry).hypot(dx / s.rx);
                (1.0 - r) * s.ry.min(s.rx)
            };
            let a = s.opacity * smoothstep_edge(inside, s.softness);
            v = v * (1.0 - a) + s.color[c] * a;
        }
        v
    })
}

/// One labelled sample of a synthetic suite.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub id: String,
    pub image: Image,
    pub truth: ThreatClass,
    pub attack: Option<AttackSpec>,
    pub ground_truth_mask: Option<PixelMask>,
}

/// Composition of a synthetic suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub clean: usize,
    pub global: usize,
    pub patch: usize,
    pub side: usize,
    /// Patch placement granularity in pixels (patches snap to this grid).
    pub patch_align: usize,
    pub seed: u64,
}

impl SuiteSpec {
    /// 200 samples: 70 clean, 65 global, 65 patch at 224×224.
    pub fn evaluation(seed: u64) -> Self {
        Self {
            clean: 70,
            global: 65,
            patch: 65,
            side: 224,
            patch_align: 16,
            seed,
        }
    }

    /// 100 samples in the same proportions, for threshold calibration.
    pub fn calibration(seed: u64) -> Self {
        Self {
            clean: 35,
            global: 33,
            patch: 32,
            ..Self::evaluation(seed)
        }
    }

    pub fn len(&self) -> usize {
        self.clean + self.global + self.patch
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Budgets cycled through by global fixtures, in 8-bit steps.
pub const GLOBAL_EPSILONS: [f64; 3] = [4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0];

/// Patch shapes in pixels: 2–5% of a 224×224 frame at 16-px alignment.
const PATCH_SIZES: [(usize, usize); 4] = [(32, 32), (32, 48), (48, 32), (48, 48)];

/// Generates a labelled suite; each sample gets its own clean scene.
///
/// Images are quantized to 8 bits so in-memory suites match what a PNG
/// round trip would produce.
pub fn generate_suite(spec: &SuiteSpec) -> Result<Vec<Fixture>> {
    if spec.patch_align == 0 {
        return Err(invalid("patch alignment must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.len());
    let side = spec.side;
    let scene = |rng: &mut ChaCha8Rng| clean_scene(side, side, rng.random());

    for i in 0..spec.clean {
        out.push(Fixture {
            id: format!("clean-{i:03}"),
            image: scene(&mut rng)?.quantized(),
            truth: ThreatClass::Clean,
            attack: None,
            ground_truth_mask: None,
        });
    }
    for i in 0..spec.global {
        let base = scene(&mut rng)?;
        let kind = AttackKind::GLOBAL[i % 3];
        let eps = GLOBAL_EPSILONS[(i / 3) % 3];
        let attack = AttackSpec::global(kind, eps, rng.random());
        out.push(Fixture {
            id: format!("global-{i:03}"),
            image: gen_global(&base, &attack)?.quantized(),
            truth: ThreatClass::GlobalAttack,
            attack: Some(attack),
            ground_truth_mask: None,
        });
    }
    for i in 0..spec.patch {
        let base = scene(&mut rng)?;
        let (ph, pw) = PATCH_SIZES[i % PATCH_SIZES.len()];
        let (ph, pw) = (ph.min(side / 2), pw.min(side / 2));
        let slots_y = (side - ph) / spec.patch_align + 1;
        let slots_x = (side - pw) / spec.patch_align + 1;
        let patch = PatchSpec {
            height: ph,
            width: pw,
            top: rng.random_range(0..slots_y) * spec.patch_align,
            left: rng.random_range(0..slots_x) * spec.patch_align,
            fill: if i % 2 == 0 {
                PatchFill::Checker
            } else {
                PatchFill::SaturatedRandom
            },
        };
        let attack = AttackSpec::patch(patch, rng.random());
        let (image, mask) = gen_patch(&base, &attack)?;
        out.push(Fixture {
            id: format!("patch-{i:03}"),
            image: image.quantized(),
            truth: ThreatClass::LocalAttack,
            attack: Some(attack),
            ground_truth_mask: Some(mask),
        });
    }
    Ok(out)
}

/// Driving-style instructions used by the prompt-tuning fixtures.
pub const FIXTURE_PROMPTS: [&str; 10] = [
    "Describe the road ahead and the safest next action.",
    "Is it safe to change lanes to the left?",
    "What traffic signs are visible in this frame?",
    "Should the vehicle slow down here?",
    "Identify pedestrians near the crosswalk.",
    "What is the state of the traffic light?",
    "Describe any obstacles in the current lane.",
    "Can the car turn right at this intersection?",
    "Estimate the distance to the vehicle in front.",
    "Summarize the hazards in this driving scene.",
];

/// The 20 (frame, prompt) pairs used to exercise prompt tuning: globally
/// perturbed scenes paired with the fixture prompts.
pub fn eapt_fixtures(seed: u64) -> Result<Vec<(Image, String)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..20)
        .map(|i| {
            let base = clean_scene(96, 96, rng.random())?;
            let attack = AttackSpec::global(
                AttackKind::GLOBAL[i % 3],
                GLOBAL_EPSILONS[i % 3],
                rng.random(),
            );
            Ok((
                gen_global(&base, &attack)?,
                FIXTURE_PROMPTS[i % FIXTURE_PROMPTS.len()].to_string(),
            ))
        })
        .collect()
}
