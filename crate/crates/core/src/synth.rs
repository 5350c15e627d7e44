//! Moving-shape scenes rendered to a frame, an ideal event stream and
//! instance masks, so the whole pipeline runs without recorded data.
//!
//! Time is in milliseconds inside a scene and in microseconds on emitted
//! events. Pixels are sampled at their centres.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::events::{normalize_volume, voxelize, Event, Polarity, TimeWindow, DEFAULT_BINS};
use crate::metrics::MaskSet;
use crate::numeric::Tensor;

/// Simulation step, in milliseconds.
pub const STEP_MS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Top-left corner for rectangles, centre for disks, as `[x, y]` at t = 0.
    pub position: [f64; 2],
    /// `[width, height]` for rectangles; disks use `size[0]` as the radius.
    pub size: [f64; 2],
    /// Pixels per millisecond, `[vx, vy]`.
    pub velocity: [f64; 2],
    pub intensity: f64,
}

impl Shape {
    fn origin_at(&self, t: f64) -> (f64, f64) {
        (self.position[0] + self.velocity[0] * t, self.position[1] + self.velocity[1] * t)
    }

    /// Whether the pixel centred at `(px, py)` lies inside the shape at time `t`.
    pub fn covers(&self, px: f64, py: f64, t: f64) -> bool {
        let (x, y) = self.origin_at(t);
        match self.kind {
            ShapeKind::Rectangle => px >= x && px < x + self.size[0] && py >= y && py < y + self.size[1],
            ShapeKind::Disk => {
                let r = self.size[0];
                (px - x).powi(2) + (py - y).powi(2) <= r * r
            }
        }
    }

    /// `[x0, y0, x1, y1]` at time `t`.
    fn bounds(&self, t: f64) -> [f64; 4] {
        let (x, y) = self.origin_at(t);
        match self.kind {
            ShapeKind::Rectangle => [x, y, x + self.size[0], y + self.size[1]],
            ShapeKind::Disk => {
                let r = self.size[0];
                [x - r, y - r, x + r, y + r]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub shapes: Vec<Shape>,
    #[serde(default)]
    pub background: f64,
    #[serde(default = "default_window_ms")]
    pub window_ms: u32,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Expected background-noise events per pixel per millisecond.
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_window_ms() -> u32 {
    40
}

fn default_threshold() -> f64 {
    0.1
}

impl SceneSpec {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            shapes: Vec::new(),
            background: 0.0,
            window_ms: default_window_ms(),
            threshold: default_threshold(),
            noise_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.window_ms == 0 {
            return invalid("scene needs positive size and window");
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return invalid(format!("event threshold must be positive, got {}", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return invalid(format!("noise rate must lie in [0, 1], got {}", self.noise_rate));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return invalid("background intensity must lie in [0, 1]");
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, s) in self.shapes.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.intensity) {
                return invalid(format!("shape {} intensity outside [0, 1]", i + 1));
            }
            let sized = match s.kind {
                ShapeKind::Rectangle => s.size[0] > 0.0 && s.size[1] > 0.0,
                ShapeKind::Disk => s.size[0] > 0.0,
            };
            if !sized {
                return invalid(format!("shape {} has non-positive size", i + 1));
            }
            // Motion is linear, so the endpoints bound the whole path.
            for t in [0.0, self.window_ms as f64] {
                let [x0, y0, x1, y1] = s.bounds(t);
                if x0 < 0.0 || y0 < 0.0 || x1 > w || y1 > h {
                    return invalid(format!("shape {} leaves the {}x{} frame within the window", i + 1, self.height, self.width));
                }
            }
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.window_ms as f64).contains(&t) {
            return invalid(format!("t = {t} ms outside the 0..={} ms window", self.window_ms));
        }
        Ok(())
    }

    pub fn window(&self) -> TimeWindow {
        TimeWindow {
            start: 0,
            end: self.window_ms as u64 * 1000,
        }
    }

    /// Index+1 of the topmost shape covering each pixel, 0 for background.
    fn labels(&self, t: f64) -> Vec<u32> {
        let mut out = vec![0u32; self.height * self.width];
        for y in 0..self.height {
            for x in 0..self.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if let Some(i) = self.shapes.iter().rposition(|s| s.covers(px, py, t)) {
                    out[y * self.width + x] = i as u32 + 1;
                }
            }
        }
        out
    }

    fn intensity(&self, t: f64) -> Vec<f64> {
        self.labels(t)
            .into_iter()
            .map(|l| match l {
                0 => self.background,
                i => self.shapes[i as usize - 1].intensity,
            })
            .collect()
    }
}

/// Grayscale frame at `t` ms, replicated over three channels.
pub fn render_frame(spec: &SceneSpec, t: f64) -> Result<Tensor> {
    spec.validate()?;
    spec.check_time(t)?;
    let data = spec.intensity(t).into_iter().flat_map(|v| [v; 3]).collect();
    Tensor::from_vec(&[spec.height, spec.width, 3], data)
}

fn log_intensity(i: f64) -> f64 {
    (i + 1.0).ln()
}

/// Ideal event camera: each pixel fires whenever its log intensity moves
/// `threshold` away from the level at its previous event. Crossing times are
/// interpolated linearly inside each 1 ms step.
pub fn generate_events(spec: &SceneSpec) -> Result<Vec<Event>> {
    spec.validate()?;
    let theta = spec.threshold;
    let mut reference: Vec<f64> = spec.intensity(0.0).into_iter().map(log_intensity).collect();
    let mut prev = reference.clone();
    let mut events = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for step in 1..=spec.window_ms / STEP_MS {
        let t1 = (step * STEP_MS) as f64;
        let t0 = t1 - STEP_MS as f64;
        let cur: Vec<f64> = spec.intensity(t1).into_iter().map(log_intensity).collect();
        for (idx, (&a, &b)) in prev.iter().zip(&cur).enumerate() {
            let (x, y) = ((idx % spec.width) as u32, (idx / spec.width) as u32);
            let r = &mut reference[idx];
            loop {
                let (level, p) = if b - *r >= theta {
                    (*r + theta, Polarity::Positive)
                } else if *r - b >= theta {
                    (*r - theta, Polarity::Negative)
                } else {
                    break;
                };
                let frac = ((level - a) / (b - a)).clamp(0.0, 1.0);
                let t_ms = t0 + frac * STEP_MS as f64;
                events.push(Event {
                    t: (t_ms * 1000.0).round() as u64,
                    x,
                    y,
                    p,
                });
                *r = level;
            }
            if spec.noise_rate > 0.0 && rng.random_bool(spec.noise_rate) {
                let t_ms = t0 + rng.random::<f64>() * STEP_MS as f64;
                let p = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                events.push(Event {
                    t: (t_ms * 1000.0).round() as u64,
                    x,
                    y,
                    p,
                });
            }
        }
        prev = cur;
    }
    events.sort_by_key(|e| (e.t, e.y, e.x));
    Ok(events)
}

/// One mask per visible shape at `t`, later shapes occluding earlier ones.
/// Mask ids are shape indices counted from 1; hidden shapes are omitted.
pub fn ground_truth_masks(spec: &SceneSpec, t: f64) -> Result<MaskSet> {
    spec.validate()?;
    spec.check_time(t)?;
    MaskSet::from_labels(spec.height, spec.width, &spec.labels(t))
}

/// A scene rendered into everything the trainer and evaluator consume.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Frame at the end of the window.
    pub image: Tensor,
    pub events: Vec<Event>,
    /// Per-bin max-normalized event counts, `H × W × 3`.
    pub volume: Tensor,
    /// Masks at the end of the window.
    pub masks: MaskSet,
}

pub fn render_sample(spec: &SceneSpec) -> Result<Sample> {
    let end = spec.window_ms as f64;
    let events = generate_events(spec)?;
    let volume = voxelize(&events, spec.window(), spec.height, spec.width, DEFAULT_BINS)?;
    Ok(Sample {
        image: render_frame(spec, end)?,
        volume: normalize_volume(&volume).grid,
        events,
        masks: ground_truth_masks(spec, end)?,
    })
}

/// A seeded scene of `n_shapes` shapes of mixed kind that stay in frame.
pub fn random_scene(height: usize, width: usize, n_shapes: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = SceneSpec::empty(height, width);
    spec.seed = seed;
    spec.background = rng.random_range(0.0..0.2);
    let window = spec.window_ms as f64;
    let (w, h) = (width as f64, height as f64);
    let max_speed = 0.25 * w.min(h) / window;
    for _ in 0..n_shapes {
        let kind = if rng.random_bool(0.5) { ShapeKind::Rectangle } else { ShapeKind::Disk };
        let v = [
            rng.random_range(-max_speed..=max_speed),
            rng.random_range(-max_speed..=max_speed),
        ];
        let travel = [v[0].abs() * window, v[1].abs() * window];
        let (size, extent) = match kind {
            ShapeKind::Rectangle => {
                let s = [
                    rng.random_range(0.15 * w..0.35 * w),
                    rng.random_range(0.15 * h..0.35 * h),
                ];
                (s, s)
            }
            ShapeKind::Disk => {
                let r = rng.random_range(0.08..0.16) * w.min(h);
                ([r, r], [2.0 * r, 2.0 * r])
            }
        };
        // Lowest admissible top-left corner along each axis given the direction of travel.
        let lo = |axis: usize| if v[axis] < 0.0 { travel[axis] } else { 0.0 };
        let span = |axis: usize, dim: f64| (dim - extent[axis] - travel[axis]).max(0.0);
        let corner = [
            lo(0) + rng.random_range(0.0..=span(0, w)),
            lo(1) + rng.random_range(0.0..=span(1, h)),
        ];
        let position = match kind {
            ShapeKind::Rectangle => corner,
            ShapeKind::Disk => [corner[0] + size[0], corner[1] + size[0]],
        };
        spec.shapes.push(Shape {
            kind,
            position,
            size,
            velocity: v,
            intensity: rng.random_range(0.5..1.0),
        });
    }
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(x: f64, y: f64, w: f64, h: f64, vx: f64, intensity: f64) -> Shape {
        Shape {
            kind: ShapeKind::Rectangle,
            position: [x, y],
            size: [w, h],
            velocity: [vx, 0.0],
            intensity,
        }
    }

    fn scene(w: usize, h: usize, shapes: Vec<Shape>) -> SceneSpec {
        SceneSpec {
            shapes,
            background: 0.1,
            ..SceneSpec::empty(h, w)
        }
    }

    fn first_column(frame: &Tensor, row: usize, level: f64) -> Option<usize> {
        let w = frame.dims()[1];
        (0..w).find(|&x| frame.data()[(row * w + x) * 3] == level)
    }

    #[test]
    fn empty_scene_is_background() {
        let s = scene(6, 4, vec![]);
        let f = render_frame(&s, 3.0).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.1));
        assert!(generate_events(&s).unwrap().is_empty());
        assert!(render_frame(&s, 41.0).is_err());
    }

    #[test]
    fn resting_rectangle_does_not_change() {
        let s = scene(16, 8, vec![rect(2.0, 2.0, 4.0, 3.0, 0.0, 0.9)]);
        assert_eq!(render_frame(&s, 0.0).unwrap(), render_frame(&s, 40.0).unwrap());
    }

    #[test]
    fn moving_rectangle_kinematics() {
        let s = scene(64, 8, vec![rect(2.0, 2.0, 4.0, 4.0, 1.0, 0.9)]);
        let a = first_column(&render_frame(&s, 0.0).unwrap(), 3, 0.9).unwrap();
        let b = first_column(&render_frame(&s, 5.0).unwrap(), 3, 0.9).unwrap();
        assert_eq!(b - a, 5);
    }

    #[test]
    fn edge_sweep_fires_on_then_off() {
        // A 3 px wide bright bar crossing pixel column 10.
        let s = scene(40, 3, vec![rect(1.0, 0.0, 3.0, 3.0, 0.5, 1.0)]);
        let ev: Vec<Event> = generate_events(&s).unwrap().into_iter().filter(|e| e.x == 10 && e.y == 1).collect();
        assert!(!ev.is_empty());
        assert_eq!(ev.first().unwrap().p, Polarity::Positive);
        assert_eq!(ev.last().unwrap().p, Polarity::Negative);
        let flips = ev.windows(2).filter(|w| w[0].p != w[1].p).count();
        assert_eq!(flips, 1);
    }

    #[test]
    fn masks_follow_occlusion_order() {
        let one = SceneSpec {
            shapes: vec![Shape {
                kind: ShapeKind::Disk,
                position: [4.0, 4.0],
                size: [2.0, 2.0],
                velocity: [0.0, 0.0],
                intensity: 0.8,
            }],
            ..SceneSpec::empty(8, 8)
        };
        let m = ground_truth_masks(&one, 0.0).unwrap();
        assert_eq!(m.len(), 1);
        let f = render_frame(&one, 0.0).unwrap();
        for (i, &c) in m.masks[0].cells.iter().enumerate() {
            assert_eq!(c, f.data()[i * 3] == 0.8);
        }

        let bottom = rect(0.0, 0.0, 4.0, 4.0, 0.0, 0.5);
        let top = rect(2.0, 0.0, 4.0, 4.0, 0.0, 0.9);
        let m = ground_truth_masks(&scene(8, 4, vec![bottom.clone(), top.clone()]), 0.0).unwrap();
        assert_eq!(m.masks[0].area(), 8);
        assert_eq!(m.masks[1].area(), 16);
        let apart = ground_truth_masks(&scene(12, 4, vec![bottom, rect(6.0, 0.0, 4.0, 4.0, 0.0, 0.9)]), 0.0).unwrap();
        assert!(apart.masks[0].cells.iter().zip(&apart.masks[1].cells).all(|(a, b)| !(a & b)));

        let hidden = ground_truth_masks(&scene(8, 4, vec![rect(2.0, 0.0, 2.0, 2.0, 0.0, 0.5), top]), 0.0).unwrap();
        assert_eq!(hidden.masks.iter().map(|m| m.id).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn rejects_out_of_frame_and_bad_threshold() {
        assert!(scene(8, 8, vec![rect(5.0, 0.0, 4.0, 4.0, 0.0, 0.5)]).validate().is_err());
        assert!(scene(8, 8, vec![rect(0.0, 0.0, 4.0, 4.0, 1.0, 0.5)]).validate().is_err());
        let mut s = scene(8, 8, vec![]);
        s.threshold = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn noise_is_opt_in_and_seeded() {
        let mut s = scene(8, 8, vec![]);
        s.noise_rate = 0.05;
        let a = generate_events(&s).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, generate_events(&s).unwrap());
    }

    #[test]
    fn sample_shapes() {
        let s = random_scene(32, 32, 2, 7);
        let smp = render_sample(&s).unwrap();
        assert_eq!(smp.image.dims(), [32, 32, 3]);
        assert_eq!(smp.volume.dims(), [32, 32, 3]);
        assert!(smp.volume.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(!smp.events.is_empty());
    }

    proptest! {
        #[test]
        fn random_scenes_are_valid_and_deterministic(seed in any::<u64>(), n in 0usize..4) {
            let s = random_scene(24, 20, n, seed);
            prop_assert!(s.validate().is_ok());
            let a = render_sample(&s).unwrap();
            let b = render_sample(&s).unwrap();
            prop_assert_eq!(&a.events, &b.events);
            prop_assert_eq!(&a.image, &b.image);
            prop_assert_eq!(&a.masks, &b.masks);
            prop_assert!(a.events.windows(2).all(|w| w[0].t <= w[1].t));
        }

        #[test]
        fn constant_pixels_stay_silent(seed in any::<u64>()) {
            let s = random_scene(16, 16, 2, seed);
            let frames: Vec<Tensor> = (0..=s.window_ms).map(|t| render_frame(&s, t as f64).unwrap()).collect();
            let events = generate_events(&s).unwrap();
            for idx in 0..16 * 16 {
                let constant = frames.iter().all(|f| f.data()[idx * 3] == frames[0].data()[idx * 3]);
                if constant {
                    let (x, y) = ((idx % 16) as u32, (idx / 16) as u32);
                    prop_assert!(!events.iter().any(|e| e.x == x && e.y == y));
                }
            }
        }

        #[test]
        fn higher_threshold_never_adds_events(seed in any::<u64>()) {
            let s = random_scene(16, 16, 2, seed);
            let mut doubled = s.clone();
            doubled.threshold *= 2.0;
            prop_assert!(generate_events(&doubled).unwrap().len() <= generate_events(&s).unwrap().len());
        }

        #[test]
        fn masks_match_frame_intensity(seed in any::<u64>(), t in 0.0f64..=40.0) {
            let s = random_scene(16, 16, 3, seed);
            let f = render_frame(&s, t).unwrap();
            for m in &ground_truth_masks(&s, t).unwrap().masks {
                let want = s.shapes[m.id as usize - 1].intensity;
                for (i, &c) in m.cells.iter().enumerate() {
                    if c {
                        prop_assert_eq!(f.data()[i * 3], want);
                    }
                }
            }
        }
    }
}
